//! Conversation generation from `(code, description)` records: prompt
//! construction, a Q/A transcript parser, an offline template generator and
//! an HTTP client for an external text-generation service.

use std::collections::HashSet;
use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::data::{read_jsonl, ConversationSample, Turn};
use crate::error::QagenError;
use crate::metrics::tokenize;

/// Input record: a vulnerable function and its advisory text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VulnRecord {
    pub id: String,
    #[serde(default)]
    pub language: String,
    pub code: String,
    #[serde(default)]
    pub description: String,
}

/// Reads `{id, language, code, description}` lines. Ids must be unique.
pub fn load_records(path: &Path) -> Result<Vec<VulnRecord>, QagenError> {
    let rows: Vec<(usize, VulnRecord)> = read_jsonl(path)?;
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(rows.len());
    for (line, r) in rows {
        if r.id.trim().is_empty() || !seen.insert(r.id.clone()) {
            return Err(QagenError::Input(format!("line {line}: empty or duplicate id {:?}", r.id)));
        }
        out.push(r);
    }
    Ok(out)
}

pub const SYSTEM_INSTRUCTION: &str = "You are given a vulnerable function and a description of its vulnerability. \
Write a conversation between a human who asks questions about the code and an assistant who answers them. \
Ask about the vulnerability location, how to fix it, its mechanism of action, its severity, and what the program does. \
Answer only from the code and the description below, without introducing extra information.";

pub const FORMAT_CONTRACT: &str =
    "Write each question on a line starting with \"Q:\" and each answer on the following line starting with \"A:\".";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationPrompt {
    pub instruction: String,
    pub code: String,
    pub description: String,
    pub format: String,
}

impl GenerationPrompt {
    /// The full prompt text sent to a generator.
    pub fn render(&self) -> String {
        format!(
            "{}\n\nCode:\n```\n{}\n```\n\nDescription:\n{}\n\n{}\n",
            self.instruction, self.code, self.description, self.format
        )
    }
}

pub fn build_generation_prompt(code: &str, description: &str) -> Result<GenerationPrompt, QagenError> {
    if code.trim().is_empty() {
        return Err(QagenError::Input("empty code".into()));
    }
    if description.trim().is_empty() {
        return Err(QagenError::Input("empty description".into()));
    }
    Ok(GenerationPrompt {
        instruction: SYSTEM_INSTRUCTION.into(),
        code: code.into(),
        description: description.into(),
        format: FORMAT_CONTRACT.into(),
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ParsedConversation {
    pub turns: Vec<Turn>,
    /// Questions that never received an answer.
    pub dropped_questions: usize,
}

/// Returns the text after a `Q:`/`Q3:`-style prefix, if the line has one.
fn strip_marker(line: &str, letter: char) -> Option<&str> {
    let l = line.trim_start().trim_start_matches(['*', '#', '-', ' ']);
    let rest = l.strip_prefix(letter).or_else(|| l.strip_prefix(letter.to_ascii_lowercase()))?;
    let rest = rest.trim_start_matches(|c: char| c.is_ascii_digit());
    let rest = rest.strip_prefix(':')?;
    Some(rest.trim_start_matches('*').trim())
}

enum Block {
    None,
    Question(String),
    Answer(String, String),
}

/// Greedy scan for `Q:` / `A:` blocks. Continuation lines extend the open
/// block; a question followed by another question is dropped, as is an
/// answer with no open question.
pub fn parse_conversation(raw: &str) -> Result<ParsedConversation, QagenError> {
    let mut out = ParsedConversation::default();
    let mut cur = Block::None;
    let close = |cur: Block, out: &mut ParsedConversation| match cur {
        Block::Question(_) => out.dropped_questions += 1,
        Block::Answer(q, a) => {
            let (q, a) = (q.trim().to_string(), a.trim().to_string());
            if q.is_empty() || a.is_empty() {
                out.dropped_questions += 1;
            } else {
                out.turns.push(Turn::new(q, a));
            }
        }
        Block::None => {}
    };
    for line in raw.lines() {
        if let Some(q) = strip_marker(line, 'Q') {
            close(std::mem::replace(&mut cur, Block::Question(q.to_string())), &mut out);
        } else if let Some(a) = strip_marker(line, 'A') {
            cur = match cur {
                Block::Question(q) => Block::Answer(q, a.to_string()),
                other => {
                    close(other, &mut out);
                    Block::None
                }
            };
        } else if !line.trim().is_empty() {
            match &mut cur {
                Block::Question(s) | Block::Answer(_, s) => {
                    s.push(' ');
                    s.push_str(line.trim());
                }
                Block::None => {}
            }
        }
    }
    close(cur, &mut out);
    if out.turns.is_empty() {
        return Err(QagenError::Generation("no complete Q/A pair in generator output".into()));
    }
    Ok(out)
}

pub trait GeneratorClient {
    /// Raw transcript for one prompt.
    fn complete(&self, prompt: &GenerationPrompt) -> Result<String, QagenError>;
}

pub const TEMPLATE_QUESTIONS: [&str; 5] = [
    "What is the vulnerability in this code?",
    "Where in the code is the vulnerability located?",
    "What is the mechanism of action for this vulnerability?",
    "How can this vulnerability be fixed?",
    "What is the severity of this vulnerability?",
];

const MECHANISM_CUES: [&str; 7] = ["allow", "attacker", "via", "trigger", "crafted", "because", "when"];
const FIX_CUES: [&str; 7] = ["fix", "check", "validat", "bound", "patch", "sanitiz", "should"];
const SEVERITY_CUES: [&str; 8] = [
    "denial of service",
    "arbitrary code",
    "crash",
    "remote",
    "critical",
    "severe",
    "information disclosure",
    "memory corruption",
];

/// Splits on `.`, `!` or `?` followed by whitespace or the end.
pub fn sentences(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    let mut chars = text.chars().peekable();
    while let Some(c) = chars.next() {
        cur.push(c);
        if matches!(c, '.' | '!' | '?') && chars.peek().is_none_or(|n| n.is_whitespace()) {
            let s = cur.split_whitespace().collect::<Vec<_>>().join(" ");
            if !s.is_empty() {
                out.push(s);
            }
            cur.clear();
        }
    }
    let s = cur.split_whitespace().collect::<Vec<_>>().join(" ");
    if !s.is_empty() {
        out.push(s);
    }
    out
}

/// Identifiers that appear in call or definition position in `code`.
fn called_identifiers(code: &str) -> HashSet<String> {
    static RE: std::sync::OnceLock<regex::Regex> = std::sync::OnceLock::new();
    let re = RE.get_or_init(|| regex::Regex::new(r"([A-Za-z_][A-Za-z0-9_]{2,})\s*\(").expect("valid regex"));
    re.captures_iter(code).map(|c| c[1].to_string()).collect()
}

fn has_identifier(sentence: &str, idents: &HashSet<String>) -> bool {
    sentence
        .split(|c: char| !(c.is_ascii_alphanumeric() || c == '_'))
        .any(|w| idents.contains(w))
}

fn has_cue(sentence: &str, cues: &[&str]) -> bool {
    let l = sentence.to_lowercase();
    cues.iter().any(|c| l.contains(c))
}

/// Deterministic generator: asks [`TEMPLATE_QUESTIONS`] and answers each
/// with the first description sentence that supports it. Questions without
/// support are not asked; the first question is always answered with the
/// opening sentence.
#[derive(Debug, Clone, Copy, Default)]
pub struct OfflineTemplate;

impl OfflineTemplate {
    pub fn turns(code: &str, description: &str) -> Vec<Turn> {
        let sents = sentences(description);
        let Some(first) = sents.first() else {
            return Vec::new();
        };
        let idents = called_identifiers(code);
        let pick = |f: &dyn Fn(&str) -> bool| sents.iter().find(|s| f(s)).cloned();
        let answers = [
            Some(first.clone()),
            pick(&|s| has_identifier(s, &idents)),
            pick(&|s| has_cue(s, &MECHANISM_CUES)),
            pick(&|s| has_cue(s, &FIX_CUES)),
            pick(&|s| has_cue(s, &SEVERITY_CUES)),
        ];
        TEMPLATE_QUESTIONS
            .iter()
            .zip(answers)
            .filter_map(|(q, a)| a.map(|a| Turn::new(*q, a)))
            .collect()
    }
}

impl GeneratorClient for OfflineTemplate {
    fn complete(&self, prompt: &GenerationPrompt) -> Result<String, QagenError> {
        let turns = Self::turns(&prompt.code, &prompt.description);
        Ok(turns.iter().map(|t| format!("Q: {}\nA: {}\n", t.q, t.a)).collect())
    }
}

#[derive(Serialize)]
struct CompletionRequest<'a> {
    prompt: &'a str,
    max_tokens: usize,
    temperature: f64,
}

#[derive(Deserialize)]
struct CompletionResponse {
    text: String,
}

/// Client for a service speaking `{"prompt","max_tokens","temperature"}` →
/// `{"text"}` over HTTP POST.
#[derive(Debug, Clone)]
pub struct HttpClient {
    pub endpoint: String,
    pub max_tokens: usize,
    pub temperature: f64,
    agent: ureq::Agent,
}

impl HttpClient {
    pub fn new(endpoint: impl Into<String>, timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder().timeout_global(Some(timeout)).build().into();
        HttpClient { endpoint: endpoint.into(), max_tokens: 1024, temperature: 0.7, agent }
    }
}

impl GeneratorClient for HttpClient {
    fn complete(&self, prompt: &GenerationPrompt) -> Result<String, QagenError> {
        let text = prompt.render();
        let req = CompletionRequest { prompt: &text, max_tokens: self.max_tokens, temperature: self.temperature };
        let mut resp = self
            .agent
            .post(&self.endpoint)
            .send_json(&req)
            .map_err(|e| QagenError::Transport(e.to_string()))?;
        let body: CompletionResponse =
            resp.body_mut().read_json().map_err(|e| QagenError::Transport(format!("bad response body: {e}")))?;
        Ok(body.text)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QagenConfig {
    /// Keep at most this many turns per sample.
    pub turn_cap: Option<usize>,
    /// Extra attempts per record after a failed one.
    pub retries: usize,
}

impl Default for QagenConfig {
    fn default() -> Self {
        QagenConfig { turn_cap: None, retries: 2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedRecord {
    pub id: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct QagenReport {
    pub records: usize,
    pub succeeded: usize,
    pub retries: usize,
    pub skipped: Vec<SkippedRecord>,
    pub dropped_questions: usize,
    /// Mean fraction of answer bigrams found in the record's code or
    /// description. Reported only; nothing is filtered on it.
    pub mean_grounding: f64,
}

/// Fraction of the answer's word bigrams that also occur in `source`
/// (unigrams for one-word answers).
pub fn grounding_score(answer: &str, source: &str) -> f64 {
    let a = tokenize(answer);
    let s = tokenize(source);
    if a.is_empty() {
        return 0.0;
    }
    if a.len() == 1 {
        return f64::from(u8::from(s.contains(&a[0])));
    }
    let have: HashSet<(&str, &str)> = s.windows(2).map(|w| (w[0].as_str(), w[1].as_str())).collect();
    let hits = a.windows(2).filter(|w| have.contains(&(w[0].as_str(), w[1].as_str()))).count();
    hits as f64 / (a.len() - 1) as f64
}

/// Generates one sample per record. Failed records are retried up to the
/// budget and then skipped; the run itself never fails on a single record.
pub fn generate_dataset(
    records: &[VulnRecord],
    client: &dyn GeneratorClient,
    cfg: &QagenConfig,
) -> (Vec<ConversationSample>, QagenReport) {
    let mut report = QagenReport { records: records.len(), ..Default::default() };
    let mut out = Vec::new();
    let mut grounding = Vec::new();
    for r in records {
        let prompt = match build_generation_prompt(&r.code, &r.description) {
            Ok(p) => p,
            Err(e) => {
                report.skipped.push(SkippedRecord { id: r.id.clone(), reason: e.to_string() });
                continue;
            }
        };
        let mut last_err = None;
        let mut parsed = None;
        for attempt in 0..=cfg.retries {
            if attempt > 0 {
                report.retries += 1;
            }
            match client.complete(&prompt).and_then(|raw| parse_conversation(&raw)) {
                Ok(p) => {
                    parsed = Some(p);
                    break;
                }
                Err(e) => last_err = Some(e),
            }
        }
        let Some(mut p) = parsed else {
            let reason = last_err.map(|e| e.to_string()).unwrap_or_default();
            report.skipped.push(SkippedRecord { id: r.id.clone(), reason });
            continue;
        };
        report.dropped_questions += p.dropped_questions;
        if let Some(cap) = cfg.turn_cap {
            p.turns.truncate(cap);
        }
        let sample = ConversationSample {
            id: r.id.clone(),
            language: r.language.clone(),
            code: r.code.clone(),
            description: Some(r.description.clone()),
            turns: p.turns,
            split: None,
        };
        if let Err(reason) = sample.validate() {
            report.skipped.push(SkippedRecord { id: r.id.clone(), reason });
            continue;
        }
        let source = format!("{}\n{}", r.code, r.description);
        grounding.extend(sample.turns.iter().map(|t| grounding_score(&t.a, &source)));
        out.push(sample);
    }
    report.succeeded = out.len();
    if !grounding.is_empty() {
        report.mean_grounding = grounding.iter().sum::<f64>() / grounding.len() as f64;
    }
    (out, report)
}
