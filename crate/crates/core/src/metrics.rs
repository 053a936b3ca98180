//! Generation metrics (BLEU, ROUGE, METEOR, an embedding-overlap score) and
//! binary classification metrics.
//!
//! Text is lowercased and split into runs of alphanumerics/underscore, with
//! every other non-space character as its own token. Corpus scores are
//! means of sentence-level scores.

use std::collections::HashMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::ConversationSample;
use crate::error::MetricsError;
use crate::model::{render_prompt, DecodeConfig, LlavulModel, Sampling};
use crate::numerics::Scalar;
use crate::tokenizer::TokenizerModel;

/// Metric tokenization; see the module docs.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut word = String::new();
    for ch in text.chars().flat_map(char::to_lowercase) {
        if ch.is_alphanumeric() || ch == '_' {
            word.push(ch);
            continue;
        }
        if !word.is_empty() {
            out.push(std::mem::take(&mut word));
        }
        if !ch.is_whitespace() {
            out.push(ch.to_string());
        }
    }
    if !word.is_empty() {
        out.push(word);
    }
    out
}

fn ngram_counts<S: AsRef<str>>(tokens: &[S], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut m = HashMap::new();
    if n == 0 || tokens.len() < n {
        return m;
    }
    for w in tokens.windows(n) {
        *m.entry(w.iter().map(|s| s.as_ref()).collect()).or_insert(0) += 1;
    }
    m
}

/// `(clipped overlap, hypothesis n-gram count, reference n-gram count)`.
fn overlap<S: AsRef<str>>(hyp: &[S], reference: &[S], n: usize) -> (usize, usize, usize) {
    let h = ngram_counts(hyp, n);
    let r = ngram_counts(reference, n);
    let m = h.iter().map(|(g, &c)| c.min(r.get(g).copied().unwrap_or(0))).sum();
    (m, hyp.len().saturating_sub(n - 1), reference.len().saturating_sub(n - 1))
}

/// Sentence BLEU over pre-tokenized input.
///
/// Geometric mean of clipped k-gram precisions for k = 1..=n; a zero count
/// at k ≥ 2 is replaced by add-one smoothing. Brevity penalty
/// `exp(min(0, 1 - |ref| / |hyp|))`.
pub fn bleu_tokens<S: AsRef<str>>(hyp: &[S], reference: &[S], n: usize) -> f64 {
    if hyp.is_empty() || n == 0 {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for k in 1..=n {
        let (m, total, _) = overlap(hyp, reference, k);
        let p = if k == 1 {
            if m == 0 {
                return 0.0;
            }
            m as f64 / total as f64
        } else if m == 0 {
            1.0 / (total as f64 + 1.0)
        } else {
            m as f64 / total as f64
        };
        log_sum += p.ln();
    }
    let bp = (1.0 - reference.len() as f64 / hyp.len() as f64).min(0.0).exp();
    bp * (log_sum / n as f64).exp()
}

pub fn bleu_n(hyp: &str, reference: &str, n: usize) -> Result<f64, MetricsError> {
    if n != 2 && n != 4 {
        return Err(MetricsError::Invalid(format!("BLEU order {n} not supported (use 2 or 4)")));
    }
    Ok(bleu_tokens(&tokenize(hyp), &tokenize(reference), n))
}

fn f1(p: f64, r: f64) -> f64 {
    if p + r <= 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

pub fn rouge_n_tokens<S: AsRef<str>>(hyp: &[S], reference: &[S], n: usize) -> f64 {
    if n == 0 {
        return 0.0;
    }
    let (m, h, r) = overlap(hyp, reference, n);
    if m == 0 || h == 0 || r == 0 {
        return 0.0;
    }
    f1(m as f64 / h as f64, m as f64 / r as f64)
}

pub fn rouge_n(hyp: &str, reference: &str, n: usize) -> Result<f64, MetricsError> {
    if n == 0 {
        return Err(MetricsError::Invalid("ROUGE order must be positive".into()));
    }
    Ok(rouge_n_tokens(&tokenize(hyp), &tokenize(reference), n))
}

pub fn lcs_len<S: AsRef<str>>(a: &[S], b: &[S]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x.as_ref() == y.as_ref() { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub fn rouge_l_tokens<S: AsRef<str>>(hyp: &[S], reference: &[S]) -> f64 {
    if hyp.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let l = lcs_len(hyp, reference) as f64;
    f1(l / hyp.len() as f64, l / reference.len() as f64)
}

pub fn rouge_l(hyp: &str, reference: &str) -> f64 {
    rouge_l_tokens(&tokenize(hyp), &tokenize(reference))
}

pub const METEOR_ALPHA: f64 = 0.9;
pub const METEOR_BETA: f64 = 3.0;
pub const METEOR_GAMMA: f64 = 0.5;

/// Search budget for the chunk-minimising alignment; beyond it the best
/// alignment found so far is used.
const METEOR_NODE_BUDGET: usize = 200_000;

/// `(matches, chunks)` of an exact-match alignment that maximises matches
/// and, among those, minimises chunks.
pub fn meteor_alignment<S: AsRef<str>>(hyp: &[S], reference: &[S]) -> (usize, usize) {
    let mut hc: HashMap<&str, usize> = HashMap::new();
    let mut rc: HashMap<&str, usize> = HashMap::new();
    hyp.iter().for_each(|t| *hc.entry(t.as_ref()).or_default() += 1);
    reference.iter().for_each(|t| *rc.entry(t.as_ref()).or_default() += 1);
    let matches: usize = hc.iter().map(|(w, &c)| c.min(rc.get(w).copied().unwrap_or(0))).sum();
    if matches == 0 {
        return (0, 0);
    }
    // Per hyp position: how many occurrences of its word remain at or after it.
    let mut remaining_after = vec![0usize; hyp.len()];
    let mut seen: HashMap<&str, usize> = HashMap::new();
    for i in (0..hyp.len()).rev() {
        let e = seen.entry(hyp[i].as_ref()).or_default();
        *e += 1;
        remaining_after[i] = *e;
    }
    let need: HashMap<&str, usize> =
        hc.iter().map(|(&w, &c)| (w, c.min(rc.get(w).copied().unwrap_or(0)))).collect();

    struct Search<'s> {
        hyp: Vec<&'s str>,
        reference: Vec<&'s str>,
        remaining_after: Vec<usize>,
        need: HashMap<&'s str, usize>,
        used: Vec<bool>,
        best: usize,
        nodes: usize,
    }

    impl Search<'_> {
        fn go(&mut self, i: usize, prev: Option<usize>, chunks: usize) {
            self.nodes += 1;
            if chunks >= self.best || self.nodes > METEOR_NODE_BUDGET {
                return;
            }
            if i == self.hyp.len() {
                self.best = chunks;
                return;
            }
            let w = self.hyp[i];
            let needed = self.need.get(w).copied().unwrap_or(0);
            if needed > 0 {
                // Contiguous continuation first: it never adds a chunk.
                let mut cands: Vec<usize> = (0..self.reference.len())
                    .filter(|&j| !self.used[j] && self.reference[j] == w)
                    .collect();
                if let Some(p) = prev {
                    if let Some(pos) = cands.iter().position(|&j| j == p + 1) {
                        let j = cands.remove(pos);
                        cands.insert(0, j);
                    }
                }
                for j in cands {
                    let extra = usize::from(prev != Some(j.wrapping_sub(1)) || j == 0);
                    self.used[j] = true;
                    *self.need.get_mut(w).expect("present") -= 1;
                    self.go(i + 1, Some(j), chunks + extra);
                    *self.need.get_mut(w).expect("present") += 1;
                    self.used[j] = false;
                }
            }
            // Skipping is only allowed if later occurrences can still supply the quota.
            if self.remaining_after[i] > needed {
                self.go(i + 1, None, chunks);
            }
        }
    }

    let mut s = Search {
        hyp: hyp.iter().map(|t| t.as_ref()).collect(),
        reference: reference.iter().map(|t| t.as_ref()).collect(),
        remaining_after,
        need,
        used: vec![false; reference.len()],
        best: usize::MAX,
        nodes: 0,
    };
    s.go(0, None, 0);
    if s.best == usize::MAX {
        // Budget exhausted before any complete alignment: every match its own chunk.
        s.best = matches;
    }
    (matches, s.best)
}

pub fn meteor_tokens<S: AsRef<str>>(hyp: &[S], reference: &[S]) -> f64 {
    if hyp.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let (m, chunks) = meteor_alignment(hyp, reference);
    if m == 0 {
        return 0.0;
    }
    let p = m as f64 / hyp.len() as f64;
    let r = m as f64 / reference.len() as f64;
    let fmean = p * r / (METEOR_ALPHA * p + (1.0 - METEOR_ALPHA) * r);
    let penalty = METEOR_GAMMA * (chunks as f64 / m as f64).powf(METEOR_BETA);
    fmean * (1.0 - penalty)
}

pub fn meteor(hyp: &str, reference: &str) -> f64 {
    meteor_tokens(&tokenize(hyp), &tokenize(reference))
}

/// Maps text to one vector per token.
pub trait Embedder {
    fn embed(&self, text: &str) -> Vec<Vec<f64>>;
}

/// Embeds through the model tokenizer and a `[vocab, dim]` table, by
/// default the decoder's token embeddings.
#[derive(Debug, Clone)]
pub struct TableEmbedder {
    tokenizer: TokenizerModel,
    table: Vec<f64>,
    dim: usize,
}

impl TableEmbedder {
    pub fn new(tokenizer: TokenizerModel, table: Vec<f64>, dim: usize) -> Result<Self, MetricsError> {
        if dim == 0 || table.len() != tokenizer.vocab_size() * dim {
            return Err(MetricsError::Invalid("embedding table does not cover the vocabulary".into()));
        }
        Ok(TableEmbedder { tokenizer, table, dim })
    }

    pub fn from_model<T: Scalar>(model: &LlavulModel<T>) -> Self {
        let t = model.token_embeddings();
        TableEmbedder {
            tokenizer: model.tokenizer.clone(),
            table: t.data().iter().map(|v| v.as_f64()).collect(),
            dim: t.shape()[1],
        }
    }
}

impl Embedder for TableEmbedder {
    fn embed(&self, text: &str) -> Vec<Vec<f64>> {
        self.tokenizer
            .encode(text)
            .into_iter()
            .map(|id| self.table[id as usize * self.dim..(id as usize + 1) * self.dim].to_vec())
            .collect()
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Greedy max-cosine matching F1 between two vector sequences, clamped to [0, 1].
pub fn greedy_cosine_f1(hyp: &[Vec<f64>], reference: &[Vec<f64>]) -> f64 {
    if hyp.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let best = |xs: &[Vec<f64>], ys: &[Vec<f64>]| {
        xs.iter().map(|x| ys.iter().map(|y| cosine(x, y)).fold(f64::NEG_INFINITY, f64::max)).sum::<f64>()
            / xs.len() as f64
    };
    let p = best(hyp, reference);
    let r = best(reference, hyp);
    f1(p, r).clamp(0.0, 1.0)
}

pub fn semantic_score(hyp: &str, reference: &str, embedder: &dyn Embedder) -> f64 {
    greedy_cosine_f1(&embedder.embed(hyp), &embedder.embed(reference))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassificationReport {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
}

impl ClassificationReport {
    pub fn from_counts(tp: usize, fp: usize, fn_: usize, tn: usize) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        ClassificationReport {
            accuracy: ratio(tp + tn, tp + fp + fn_ + tn),
            precision,
            recall,
            f1: f1(precision, recall),
            tp,
            fp,
            fn_,
            tn,
        }
    }
}

/// Positive class (1) is "vulnerable".
pub fn classification_metrics(predictions: &[u8], labels: &[u8]) -> Result<ClassificationReport, MetricsError> {
    if predictions.len() != labels.len() {
        return Err(MetricsError::LengthMismatch(predictions.len(), labels.len()));
    }
    if labels.is_empty() {
        return Err(MetricsError::Empty("no predictions".into()));
    }
    if predictions.iter().chain(labels).any(|&v| v > 1) {
        return Err(MetricsError::Invalid("labels must be 0 or 1".into()));
    }
    let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
    for (&p, &l) in predictions.iter().zip(labels) {
        match (p, l) {
            (1, 1) => tp += 1,
            (1, 0) => fp += 1,
            (0, 1) => fn_ += 1,
            _ => tn += 1,
        }
    }
    Ok(ClassificationReport::from_counts(tp, fp, fn_, tn))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleScores {
    pub id: String,
    pub turn: usize,
    pub hypothesis: String,
    pub reference: String,
    pub bleu2: f64,
    pub bleu4: f64,
    pub rouge1: f64,
    pub rouge2: f64,
    pub rouge_l: f64,
    pub meteor: f64,
    pub semantic_score: f64,
    pub exact_match: f64,
}

pub fn score_pair(id: &str, turn: usize, hyp: &str, reference: &str, embedder: &dyn Embedder) -> SampleScores {
    let h = tokenize(hyp);
    let r = tokenize(reference);
    SampleScores {
        id: id.to_string(),
        turn,
        hypothesis: hyp.to_string(),
        reference: reference.to_string(),
        bleu2: bleu_tokens(&h, &r, 2),
        bleu4: bleu_tokens(&h, &r, 4),
        rouge1: rouge_n_tokens(&h, &r, 1),
        rouge2: rouge_n_tokens(&h, &r, 2),
        rouge_l: rouge_l_tokens(&h, &r),
        meteor: meteor_tokens(&h, &r),
        semantic_score: semantic_score(hyp, reference, embedder),
        exact_match: f64::from(u8::from(hyp.trim() == reference.trim())),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub bleu2: f64,
    pub bleu4: f64,
    pub rouge1: f64,
    pub rouge2: f64,
    #[serde(rename = "rougeL")]
    pub rouge_l: f64,
    pub meteor: f64,
    pub semantic_score: f64,
    pub exact_match: f64,
    pub size: usize,
    pub skipped: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rows: Option<Vec<SampleScores>>,
}

impl MetricReport {
    /// Arithmetic mean of per-sample scores.
    pub fn aggregate(rows: Vec<SampleScores>, skipped: usize, keep_rows: bool) -> Result<Self, MetricsError> {
        if rows.is_empty() {
            return Err(MetricsError::Empty("no scored samples".into()));
        }
        let n = rows.len() as f64;
        let mean = |f: fn(&SampleScores) -> f64| rows.iter().map(f).sum::<f64>() / n;
        Ok(MetricReport {
            bleu2: mean(|s| s.bleu2),
            bleu4: mean(|s| s.bleu4),
            rouge1: mean(|s| s.rouge1),
            rouge2: mean(|s| s.rouge2),
            rouge_l: mean(|s| s.rouge_l),
            meteor: mean(|s| s.meteor),
            semantic_score: mean(|s| s.semantic_score),
            exact_match: mean(|s| s.exact_match),
            size: rows.len(),
            skipped,
            rows: keep_rows.then_some(rows),
        })
    }

    pub fn header() -> String {
        format!(
            "{:<24} {:>7} {:>7} {:>7} {:>7} {:>7} {:>7} {:>8} {:>6}",
            "Model", "BLEU-2", "BLEU-4", "ROUGE-1", "ROUGE-2", "ROUGE-L", "METEOR", "SemScore", "Exact"
        )
    }

    pub fn table_row(&self, name: &str) -> String {
        format!(
            "{:<24} {:>7.3} {:>7.3} {:>7.3} {:>7.3} {:>7.3} {:>7.3} {:>8.3} {:>6.3}",
            name,
            self.bleu2,
            self.bleu4,
            self.rouge1,
            self.rouge2,
            self.rouge_l,
            self.meteor,
            self.semantic_score,
            self.exact_match
        )
    }

    /// Aligned table of named reports.
    pub fn table(rows: &[(String, MetricReport)]) -> String {
        let mut s = Self::header();
        s.push('\n');
        for (name, r) in rows {
            let _ = writeln!(s, "{}", r.table_row(name));
        }
        s
    }
}

/// Generates an answer for every turn of every sample (one turn per prompt)
/// and scores it against the reference answer. Samples whose generation
/// fails are counted as skipped.
pub fn evaluate_corpus<T: Scalar>(
    model: &LlavulModel<T>,
    samples: &[ConversationSample],
    decode: &DecodeConfig,
    max_code_tokens: usize,
    embedder: &dyn Embedder,
    keep_rows: bool,
) -> Result<MetricReport, MetricsError> {
    if samples.is_empty() {
        return Err(MetricsError::Empty("empty test set".into()));
    }
    let mut jobs = Vec::new();
    let mut skipped = 0;
    for s in samples {
        for (t, turn) in s.turns.iter().enumerate() {
            match render_prompt(&model.tokenizer, &s.code, &turn.q, max_code_tokens) {
                Ok(p) if p.expanded_len() <= model.config.context => jobs.push((s.id.as_str(), t, p, turn.a.as_str())),
                _ => skipped += 1,
            }
        }
    }
    let mut rows = Vec::with_capacity(jobs.len());
    // Greedy decoding is batched; sampled decoding runs per prompt with a
    // per-prompt seed so results do not depend on batch composition.
    let chunk = if decode.sampling == Sampling::Greedy { 16 } else { 1 };
    for (c, group) in jobs.chunks(chunk).enumerate() {
        let prompts: Vec<_> = group.iter().map(|j| j.2.clone()).collect();
        let cfg = DecodeConfig { seed: decode.seed.wrapping_add(c as u64), ..*decode };
        match model.generate_batch(&prompts, &cfg) {
            Ok(outs) => {
                for (j, hyp) in group.iter().zip(outs) {
                    rows.push(score_pair(j.0, j.1, &hyp, j.3, embedder));
                }
            }
            Err(_) => skipped += group.len(),
        }
    }
    MetricReport::aggregate(rows, skipped, keep_rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        tokenize(s)
    }

    #[test]
    fn tokenization_rules() {
        assert_eq!(tokenize("CWE-120: strcpy(buf)"), ["cwe", "-", "120", ":", "strcpy", "(", "buf", ")"]);
        assert!(tokenize("   ").is_empty());
    }

    #[test]
    fn anchors() {
        assert!((bleu_n("a b x d", "a b c d", 2).unwrap() - 0.5).abs() < 1e-12);
        assert!((rouge_l("a b c", "a c b") - 2.0 / 3.0).abs() < 1e-12);
        assert!((meteor("the cat", "the cat") - 0.9375).abs() < 1e-12);
        assert_eq!(bleu_n("a b c d", "a b c d", 4).unwrap(), 1.0);
        assert_eq!(bleu_n("x y", "a b", 2).unwrap(), 0.0);
        assert_eq!(bleu_n("", "a b", 2).unwrap(), 0.0);
        assert!(bleu_n("a", "a", 3).is_err());
    }

    #[test]
    fn rouge_edges() {
        for n in 1..=2 {
            assert_eq!(rouge_n("a b c", "a b c", n).unwrap(), 1.0);
            assert_eq!(rouge_n("a b c", "d e f", n).unwrap(), 0.0);
        }
        assert_eq!(rouge_l("a b c", ""), 0.0);
        assert_eq!(rouge_l("x", "y"), 0.0);
    }

    #[test]
    fn meteor_prefers_fewer_chunks() {
        let (m, c) = meteor_alignment(&toks("a b a b"), &toks("a b"));
        assert_eq!((m, c), (2, 1));
        let one = meteor("a b c d", "a b c d");
        let two = meteor("c d a b", "a b c d");
        assert!(two < one);
        assert_eq!(meteor("x y", "a b"), 0.0);
    }

    #[test]
    fn confusion_anchor() {
        let preds = [1, 1, 1, 1, 0, 0, 0, 0, 0, 0];
        let labels = [1, 1, 1, 0, 1, 1, 0, 0, 0, 0];
        let r = classification_metrics(&preds, &labels).unwrap();
        assert_eq!((r.tp, r.fp, r.fn_, r.tn), (3, 1, 2, 4));
        assert!((r.precision - 0.75).abs() < 1e-12);
        assert!((r.recall - 0.6).abs() < 1e-12);
        assert!((r.f1 - 2.0 / 3.0).abs() < 1e-12);
        assert!((r.accuracy - 0.7).abs() < 1e-12);
        let neg = classification_metrics(&[0, 0, 0, 0], &[1, 1, 0, 0]).unwrap();
        assert_eq!((neg.accuracy, neg.recall), (0.5, 0.0));
        assert!(classification_metrics(&[], &[]).is_err());
        assert!(classification_metrics(&[1], &[1, 0]).is_err());
    }

    #[test]
    fn cosine_f1_edges() {
        let a = vec![vec![1.0, 0.0]];
        let b = vec![vec![0.0, 1.0]];
        let c = vec![vec![-1.0, 0.0]];
        assert_eq!(greedy_cosine_f1(&a, &a), 1.0);
        assert_eq!(greedy_cosine_f1(&a, &b), 0.0);
        assert_eq!(greedy_cosine_f1(&a, &c), 0.0);
        assert_eq!(greedy_cosine_f1(&a, &[]), 0.0);
    }
}
