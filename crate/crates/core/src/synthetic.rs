//! Small generated corpora with known structure, used for smoke training,
//! ablation-direction checks and benchmarks.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{CodeSummaryPair, ConversationSample, LabeledCode, Turn};
use crate::tokenizer::TokenizerModel;

pub const VULN_QUESTION: &str = "What is the vulnerability in this code?";

const VERBS: [&str; 4] = ["copy", "parse", "read", "load"];
const NOUNS: [&str; 8] = ["name", "header", "packet", "path", "token", "field", "record", "label"];
/// `(call, weakness)` pairs; the call is what makes the snippet unsafe.
const SINKS: [(&str, &str); 4] = [
    ("strcpy(buf, src)", "CWE-120"),
    ("memcpy(buf, src, len)", "CWE-787"),
    ("sprintf(buf, src)", "CWE-134"),
    ("gets(buf)", "CWE-242"),
];

fn sink_name(call: &str) -> &str {
    call.split('(').next().unwrap_or(call)
}

/// Thirty-two single-turn samples sharing one question; each answer names
/// the function and the unsafe call, so it is determined by the code alone.
pub fn overfit_corpus() -> Vec<ConversationSample> {
    let mut out = Vec::with_capacity(32);
    for (v, verb) in VERBS.iter().enumerate() {
        for (n, noun) in NOUNS.iter().enumerate() {
            let i = v * NOUNS.len() + n;
            let (call, cwe) = SINKS[(v + n) % SINKS.len()];
            let fname = format!("{verb}_{noun}");
            let size = 8 << (i % 4);
            let code = format!(
                "int {fname}(char *src, int len) {{\n    char buf[{size}];\n    {call};\n    return len;\n}}\n"
            );
            let answer = format!("{cwe}: {} in {fname}", sink_name(call));
            out.push(ConversationSample {
                id: format!("overfit-{i:02}"),
                language: "C".into(),
                code,
                description: None,
                turns: vec![Turn::new(VULN_QUESTION, answer)],
                split: None,
            });
        }
    }
    out
}

const TRUNC_CLASSES: [(&str, &str); 4] = [
    ("strcpy(dst, src);", "CWE-120"),
    ("free(ptr); use(ptr);", "CWE-416"),
    ("memcpy(dst, src, n);", "CWE-787"),
    ("printf(src);", "CWE-134"),
];
const TRUNC_QUESTIONS: [&str; 2] = ["Which weakness does this code have?", "Name the CWE for this function."];

fn filler_line(rng: &mut ChaCha8Rng, i: usize) -> String {
    const OPS: [&str; 4] = ["+", "^", "*", "-"];
    let a: u32 = rng.random_range(1000..99999);
    let b: u32 = rng.random_range(1000..99999);
    let op = OPS[rng.random_range(0..OPS.len())];
    format!("    acc_{i} = (acc_{i} {op} {a}) % {b};\n")
}

/// Where the class-deciding statement starts, in tokens of the code field.
pub fn decisive_offset(tok: &TokenizerModel, code: &str) -> usize {
    let cut = code.rfind("    /* sink */").expect("truncation sample has a sink marker");
    tok.encode(&code[..cut]).len()
}

/// Four fillers × four classes × two questions. Each snippet carries a long
/// filler, then one statement that decides the answer; fillers are extended
/// until that statement starts after `min_prefix_tokens` tokens under `tok`.
/// Samples sharing a filler are identical before the statement, so a model
/// that sees only a shorter prefix cannot tell the four classes apart.
pub fn truncation_corpus(tok: &TokenizerModel, min_prefix_tokens: usize, seed: u64) -> Vec<ConversationSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(32);
    for f in 0..4 {
        let mut prefix = format!("int process_{f}(char *dst, char *src, char *ptr, int n) {{\n    long acc_0 = {f};\n");
        let mut line = 0;
        while tok.encode(&prefix).len() < min_prefix_tokens + 4 {
            prefix.push_str(&filler_line(&mut rng, line % 6));
            line += 1;
        }
        for (c, (stmt, cwe)) in TRUNC_CLASSES.iter().enumerate() {
            let code = format!("{prefix}    /* sink */\n    {stmt}\n    return n;\n}}\n");
            for (q, question) in TRUNC_QUESTIONS.iter().enumerate() {
                out.push(ConversationSample {
                    id: format!("trunc-f{f}-c{c}-q{q}"),
                    language: "C".into(),
                    code: code.clone(),
                    description: None,
                    turns: vec![Turn::new(*question, format!("{cwe}."))],
                    split: None,
                });
            }
        }
    }
    out
}

/// Assorted C-like snippets for tokenizer training and stress tests.
pub fn code_snippets(n: usize, seed: u64) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    const TYPES: [&str; 5] = ["int", "char", "size_t", "long", "unsigned"];
    const CALLS: [&str; 8] = ["memcpy", "strlen", "malloc", "free", "printf", "strncpy", "fread", "snprintf"];
    (0..n)
        .map(|i| {
            let ty = TYPES[rng.random_range(0..TYPES.len())];
            let call = CALLS[rng.random_range(0..CALLS.len())];
            let noun = NOUNS[rng.random_range(0..NOUNS.len())];
            let k: u32 = rng.random_range(1..512);
            let mut body = String::new();
            for j in 0..rng.random_range(1..5) {
                body.push_str(&format!("    {ty} v{j} = {call}(p + {}, {k});\n", j * 4));
            }
            format!("static {ty} handle_{noun}_{i}(char *p) {{\n{body}    if (v0 > {k}) {{ return -1; }}\n    return 0;\n}}\n")
        })
        .collect()
}

/// Code/summary pairs in the pretraining shape.
pub fn summary_pairs(n: usize, seed: u64) -> Vec<CodeSummaryPair> {
    code_snippets(n, seed)
        .into_iter()
        .enumerate()
        .map(|(i, code)| {
            let name = code.split_whitespace().nth(2).unwrap_or("fn").split('(').next().unwrap_or("fn").to_string();
            CodeSummaryPair {
                id: format!("pair-{i}"),
                language: "C".into(),
                summary: format!("Defines {name}, which checks a computed value."),
                code,
            }
        })
        .collect()
}

/// The token whose presence marks a snippet as vulnerable.
pub const MARKER_CALL: &str = "gets";

/// Labelled functions where label 1 ⇔ the body calls [`MARKER_CALL`]; safe
/// functions use `fgets` instead. Roughly `vulnerable_fraction` of the
/// records are positive, so the set is deliberately unbalanced.
pub fn marker_corpus(n: usize, vulnerable_fraction: f64, seed: u64) -> Vec<LabeledCode> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bodies = code_snippets(n, seed ^ 0x5eed);
    let mut out: Vec<LabeledCode> = bodies
        .into_iter()
        .enumerate()
        .map(|(i, body)| {
            let vulnerable = rng.random_bool(vulnerable_fraction);
            let call = if vulnerable { "gets(line);" } else { "fgets(line, 64, stdin);" };
            let mut lines: Vec<&str> = body.lines().collect();
            let at = rng.random_range(1..lines.len());
            let stmt = format!("    {call}");
            lines.insert(at, &stmt);
            LabeledCode {
                id: format!("marker-{i}"),
                language: "C".into(),
                code: lines.join("\n"),
                label: u8::from(vulnerable),
                split: None,
            }
        })
        .collect();
    out.shuffle(&mut rng);
    out
}

/// Text drawn from a corpus for tokenizer training: code, questions and
/// answers.
pub fn tokenizer_corpus(samples: &[ConversationSample]) -> Vec<String> {
    let mut out = Vec::new();
    for s in samples {
        out.push(s.code.clone());
        for t in &s.turns {
            out.push(t.q.clone());
            out.push(t.a.clone());
        }
    }
    out
}
