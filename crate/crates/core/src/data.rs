//! Corpus schemas, JSONL ingestion, pretraining-corpus construction,
//! statistics, and deterministic splits.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::DataError;
use crate::tokenizer::TokenizerModel;

/// The fixed instruction used for every pretraining (code, summary) pair.
pub const PRETRAIN_QUESTION: &str = "Summarize the purpose of this script.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub q: String,
    pub a: String,
}

impl Turn {
    pub fn new(q: impl Into<String>, a: impl Into<String>) -> Self {
        Turn { q: q.into(), a: a.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConversationSample {
    pub id: String,
    pub language: String,
    pub code: String,
    #[serde(default)]
    pub description: Option<String>,
    pub turns: Vec<Turn>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
}

impl ConversationSample {
    pub fn validate(&self) -> Result<(), String> {
        if self.id.trim().is_empty() {
            return Err("empty id".into());
        }
        if self.turns.is_empty() {
            return Err(format!("sample {} has no turns", self.id));
        }
        for (i, t) in self.turns.iter().enumerate() {
            if t.q.trim().is_empty() {
                return Err(format!("sample {} turn {} has an empty question", self.id, i + 1));
            }
            if t.a.trim().is_empty() {
                return Err(format!("sample {} turn {} has an empty answer", self.id, i + 1));
            }
        }
        Ok(())
    }

    /// CVE identifier carried in the sample id, if any.
    pub fn cve_id(&self) -> Option<&str> {
        cve_regex().find(&self.id).map(|m| m.as_str())
    }
}

fn cve_regex() -> &'static Regex {
    static RE: std::sync::OnceLock<Regex> = std::sync::OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^CVE-\d{4}-\d{4,}").expect("valid regex"))
}

/// Binary-labelled code record for the classification path.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledCode {
    pub id: String,
    #[serde(default)]
    pub language: String,
    pub code: String,
    pub label: u8,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodeSummaryPair {
    pub id: String,
    #[serde(default)]
    pub language: String,
    pub code: String,
    pub summary: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PretrainCorpus {
    pub samples: Vec<ConversationSample>,
    pub skipped: usize,
}

/// One single-turn sample per pair; pairs with an empty summary or code are
/// skipped and counted.
pub fn build_pretrain_corpus(pairs: &[CodeSummaryPair]) -> PretrainCorpus {
    let mut out = PretrainCorpus::default();
    for p in pairs {
        if p.summary.trim().is_empty() || p.code.is_empty() {
            out.skipped += 1;
            continue;
        }
        out.samples.push(ConversationSample {
            id: p.id.clone(),
            language: p.language.clone(),
            code: p.code.clone(),
            description: None,
            turns: vec![Turn::new(PRETRAIN_QUESTION, p.summary.clone())],
            split: None,
        });
    }
    out
}

/// Parses one JSON value per non-blank line.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<(usize, T)>, DataError> {
    let reader = BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let value = serde_json::from_str(&line)
            .map_err(|e| DataError::Parse { line: i + 1, message: e.to_string() })?;
        out.push((i + 1, value));
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<(), DataError> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut w, item).map_err(|e| DataError::Validation(e.to_string()))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Checks per-sample invariants and id uniqueness.
pub fn validate_corpus(samples: &[ConversationSample]) -> Result<(), DataError> {
    let mut seen = HashSet::new();
    for s in samples {
        s.validate().map_err(DataError::Validation)?;
        if !seen.insert(s.id.as_str()) {
            return Err(DataError::Validation(format!("duplicate id {}", s.id)));
        }
    }
    Ok(())
}

pub fn load_finetune_corpus(path: &Path) -> Result<Vec<ConversationSample>, DataError> {
    let rows: Vec<(usize, ConversationSample)> = read_jsonl(path)?;
    let mut seen = HashMap::new();
    let mut out = Vec::with_capacity(rows.len());
    for (line, s) in rows {
        s.validate().map_err(|m| DataError::Validation(format!("line {line}: {m}")))?;
        if let Some(first) = seen.insert(s.id.clone(), line) {
            return Err(DataError::Validation(format!(
                "line {line}: duplicate id {} (first seen on line {first})",
                s.id
            )));
        }
        out.push(s);
    }
    Ok(out)
}

pub fn load_labeled_corpus(path: &Path) -> Result<Vec<LabeledCode>, DataError> {
    let rows: Vec<(usize, LabeledCode)> = read_jsonl(path)?;
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(rows.len());
    for (line, s) in rows {
        if s.label > 1 {
            return Err(DataError::Validation(format!("line {line}: label must be 0 or 1")));
        }
        if s.code.is_empty() {
            return Err(DataError::Validation(format!("line {line}: empty code")));
        }
        if !seen.insert(s.id.clone()) {
            return Err(DataError::Validation(format!("line {line}: duplicate id {}", s.id)));
        }
        out.push(s);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub num_codes: usize,
    pub num_cves: usize,
    pub num_qas: usize,
    pub max_qas_per_code: usize,
    pub min_qas_per_code: usize,
    pub mean_qas_per_code: f64,
    pub total_tokens: usize,
    pub max_tokens_per_code: usize,
    pub min_tokens_per_code: usize,
    pub mean_tokens_per_code: f64,
}

pub fn compute_stats(
    corpus: &[ConversationSample],
    tokenizer: &TokenizerModel,
) -> Result<DatasetStats, DataError> {
    if corpus.is_empty() {
        return Err(DataError::Stats("empty corpus".into()));
    }
    let qas: Vec<usize> = corpus.iter().map(|s| s.turns.len()).collect();
    let tokens: Vec<usize> = corpus.iter().map(|s| tokenizer.encode(&s.code).len()).collect();
    let cves: HashSet<&str> = corpus.iter().filter_map(|s| s.cve_id()).collect();
    let n = corpus.len();
    let num_qas: usize = qas.iter().sum();
    let total_tokens: usize = tokens.iter().sum();
    Ok(DatasetStats {
        num_codes: n,
        num_cves: cves.len(),
        num_qas,
        max_qas_per_code: *qas.iter().max().expect("non-empty"),
        min_qas_per_code: *qas.iter().min().expect("non-empty"),
        mean_qas_per_code: num_qas as f64 / n as f64,
        total_tokens,
        max_tokens_per_code: *tokens.iter().max().expect("non-empty"),
        min_tokens_per_code: *tokens.iter().min().expect("non-empty"),
        mean_tokens_per_code: total_tokens as f64 / n as f64,
    })
}

impl DatasetStats {
    /// Aligned two-column table using the conventional row labels.
    pub fn to_table(&self, title: &str) -> String {
        let cves = if self.num_cves == 0 { "-".to_string() } else { self.num_cves.to_string() };
        let rows = [
            ("# codes", self.num_codes.to_string()),
            ("# CVEs", cves),
            ("# QAs", self.num_qas.to_string()),
            ("max # QAs per code", self.max_qas_per_code.to_string()),
            ("min # QAs per code", self.min_qas_per_code.to_string()),
            ("mean # QAs per code", format!("{:.2}", self.mean_qas_per_code)),
            ("# tokens", self.total_tokens.to_string()),
            ("max # tokens per code", self.max_tokens_per_code.to_string()),
            ("min # tokens per code", self.min_tokens_per_code.to_string()),
            ("mean # tokens per code", format!("{:.2}", self.mean_tokens_per_code)),
        ];
        let width = rows.iter().map(|(l, _)| l.len()).max().unwrap_or(0).max(7);
        let mut out = String::new();
        let _ = writeln!(out, "{:<width$}  {}", "Dataset", title);
        for (label, value) in rows {
            let _ = writeln!(out, "{label:<width$}  {value}");
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        SplitRatios { train: 0.9, val: 0.05, test: 0.05 }
    }
}

/// Assigns a split to every sample. Samples sharing identical code form one
/// group, so no code appears in two splits. Groups are shuffled with `seed`
/// and cut at the cumulative ratios.
pub fn split_corpus(
    corpus: &[ConversationSample],
    ratios: SplitRatios,
    seed: u64,
) -> Result<Vec<Split>, DataError> {
    let codes: Vec<&str> = corpus.iter().map(|s| s.code.as_str()).collect();
    split_codes(&codes, ratios, seed)
}

/// [`split_corpus`] over bare code strings, for any record type.
pub fn split_codes(codes: &[&str], ratios: SplitRatios, seed: u64) -> Result<Vec<Split>, DataError> {
    let parts = [ratios.train, ratios.val, ratios.test];
    if parts.iter().any(|r| !(0.0..=1.0).contains(r)) || (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(DataError::Config(format!(
            "split ratios must be in [0, 1] and sum to 1, got {parts:?}"
        )));
    }
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, code) in codes.iter().enumerate() {
        groups.entry(code).or_default().push(i);
    }
    let mut order: Vec<Vec<usize>> = groups.into_values().collect();
    order.sort_by_key(|members| members[0]);
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let n = order.len() as f64;
    let train_end = (ratios.train * n).round() as usize;
    let val_end = ((ratios.train + ratios.val) * n).round() as usize;
    let mut out = vec![Split::Train; codes.len()];
    for (rank, members) in order.iter().enumerate() {
        let split = if rank < train_end {
            Split::Train
        } else if rank < val_end {
            Split::Val
        } else {
            Split::Test
        };
        for &i in members {
            out[i] = split;
        }
    }
    Ok(out)
}

pub fn apply_split(corpus: &mut [ConversationSample], assignment: &[Split]) {
    for (s, &a) in corpus.iter_mut().zip(assignment) {
        s.split = Some(a);
    }
}

pub fn select_split(corpus: &[ConversationSample], split: Split) -> Vec<ConversationSample> {
    corpus.iter().filter(|s| s.split == Some(split)).cloned().collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(id: &str, code: &str, turns: usize) -> ConversationSample {
        ConversationSample {
            id: id.into(),
            language: "C".into(),
            code: code.into(),
            description: None,
            turns: (0..turns).map(|i| Turn::new(format!("q{i}?"), format!("a{i}."))).collect(),
            split: None,
        }
    }

    #[test]
    fn pretrain_pairs_become_single_turn_samples() {
        let pairs = vec![
            CodeSummaryPair { id: "f1".into(), language: "go".into(), code: "func f(){}".into(), summary: "Sorts a list.".into() },
            CodeSummaryPair { id: "f2".into(), language: "go".into(), code: "func g(){}".into(), summary: "  ".into() },
        ];
        let corpus = build_pretrain_corpus(&pairs);
        assert_eq!(corpus.skipped, 1);
        assert_eq!(corpus.samples.len(), 1);
        assert_eq!(corpus.samples[0].turns, vec![Turn::new("Summarize the purpose of this script.", "Sorts a list.")]);
        assert_eq!(build_pretrain_corpus(&[]), PretrainCorpus::default());
    }

    #[test]
    fn invariants() {
        assert!(sample("a", "x", 1).validate().is_ok());
        assert!(sample("a", "x", 0).validate().is_err());
        let mut s = sample("a", "x", 1);
        s.turns[0].a = " ".into();
        assert!(s.validate().is_err());
        assert!(validate_corpus(&[sample("a", "x", 1), sample("a", "y", 1)]).is_err());
    }

    #[test]
    fn cve_ids_are_recognised() {
        assert_eq!(sample("CVE-2018-1000039", "x", 1).cve_id(), Some("CVE-2018-1000039"));
        assert_eq!(sample("CVE-2018-1000039/add_range", "x", 1).cve_id(), Some("CVE-2018-1000039"));
        assert_eq!(sample("codexglue-17", "x", 1).cve_id(), None);
    }

    #[test]
    fn single_sample_stats() {
        let tok = TokenizerModel::train(&["abcabc"], 264).unwrap();
        let st = compute_stats(&[sample("CVE-2020-1234", "abc", 1)], &tok).unwrap();
        assert_eq!((st.num_qas, st.max_qas_per_code, st.min_qas_per_code), (1, 1, 1));
        assert_eq!(st.mean_qas_per_code, 1.0);
        assert_eq!(st.num_cves, 1);
        assert!(compute_stats(&[], &tok).is_err());
        assert!(st.to_table("fine-tuning").contains("mean # QAs per code"));
    }

    #[test]
    fn split_edge_cases() {
        let corpus: Vec<_> = (0..20).map(|i| sample(&format!("s{i}"), &format!("code{i}"), 1)).collect();
        let all_train = split_corpus(&corpus, SplitRatios { train: 1.0, val: 0.0, test: 0.0 }, 3).unwrap();
        assert!(all_train.iter().all(|&s| s == Split::Train));
        let a = split_corpus(&corpus, SplitRatios::default(), 11).unwrap();
        assert_eq!(a, split_corpus(&corpus, SplitRatios::default(), 11).unwrap());
        assert!(split_corpus(&corpus, SplitRatios { train: 0.5, val: 0.2, test: 0.2 }, 1).is_err());
    }

    #[test]
    fn identical_code_stays_in_one_split() {
        let corpus: Vec<_> = (0..60).map(|i| sample(&format!("s{i}"), &format!("code{}", i % 15), 1)).collect();
        let ratios = SplitRatios { train: 0.4, val: 0.3, test: 0.3 };
        let a = split_corpus(&corpus, ratios, 5).unwrap();
        for i in 0..60 {
            for j in 0..60 {
                if corpus[i].code == corpus[j].code {
                    assert_eq!(a[i], a[j]);
                }
            }
        }
    }
}
