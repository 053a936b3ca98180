use std::cell::Cell;
use std::path::PathBuf;

use llavul::data::{compute_stats, ConversationSample};
use llavul::qagen::{
    generate_dataset, load_records, parse_conversation, GenerationPrompt, GeneratorClient, OfflineTemplate,
    QagenConfig, TEMPLATE_QUESTIONS,
};
use llavul::synthetic::tokenizer_corpus;
use llavul::tokenizer::TokenizerModel;
use llavul::QagenError;

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

#[test]
fn appendix_transcript_parses_to_five_pairs() {
    let raw = std::fs::read_to_string(fixture("cve_2018_1000039_transcript.txt")).unwrap();
    let parsed = parse_conversation(&raw).unwrap();
    assert_eq!(parsed.turns.len(), 5);
    assert_eq!(parsed.dropped_questions, 0);
    let questions: Vec<&str> = parsed.turns.iter().map(|t| t.q.as_str()).collect();
    let expected = TEMPLATE_QUESTIONS.to_vec();
    assert_eq!(questions, expected);
    assert!(parsed.turns[1].a.contains("add_range"));
}

#[test]
fn offline_fixture_matches_hand_counts() {
    let records = load_records(&fixture("qagen_records.jsonl")).unwrap();
    assert_eq!(records.len(), 10);
    let (samples, report) = generate_dataset(&records, &OfflineTemplate, &QagenConfig::default());
    // One record has an empty description.
    assert_eq!(report.skipped.len(), 1);
    assert_eq!(report.skipped[0].id, "CVE-2020-10004");
    assert_eq!(report.succeeded, 9);
    assert_eq!(report.retries, 0);
    let turns: Vec<usize> = samples.iter().map(|s| s.turns.len()).collect();
    assert_eq!(turns, vec![4, 1, 3, 5, 3, 4, 1, 5, 4]);
    let tok = TokenizerModel::train(&tokenizer_corpus(&samples), 300).unwrap();
    let stats = compute_stats(&samples, &tok).unwrap();
    assert_eq!(stats.num_codes, 9);
    assert_eq!(stats.num_qas, 30);
    assert_eq!((stats.max_qas_per_code, stats.min_qas_per_code), (5, 1));
    assert!((stats.mean_qas_per_code - 30.0 / 9.0).abs() < 1e-12);
    // CVE-2020-10002 appears twice and gh-issue-6 carries none.
    assert_eq!(stats.num_cves, 7);
    // Every answer is a sentence of the description.
    for (s, r) in samples.iter().zip(records.iter().filter(|r| !r.description.is_empty())) {
        for t in &s.turns {
            assert!(r.description.contains(&t.a));
        }
    }
    assert!((report.mean_grounding - 1.0).abs() < 1e-12);
}

#[test]
fn offline_mode_is_deterministic_and_capped() {
    let records = load_records(&fixture("qagen_records.jsonl")).unwrap();
    let (a, _) = generate_dataset(&records, &OfflineTemplate, &QagenConfig::default());
    let (b, _) = generate_dataset(&records, &OfflineTemplate, &QagenConfig::default());
    assert_eq!(a, b);
    let capped = QagenConfig { turn_cap: Some(3), ..Default::default() };
    let (c, _) = generate_dataset(&records, &OfflineTemplate, &capped);
    assert!(c.iter().all(|s| s.turns.len() <= 3));
    assert_eq!(c.iter().map(|s| s.turns.len()).sum::<usize>(), 23);
    assert!(c.iter().all(|s: &ConversationSample| s.validate().is_ok()));
}

/// Fails a fixed number of times, then answers.
struct Flaky {
    failures: Cell<usize>,
}

impl GeneratorClient for Flaky {
    fn complete(&self, _: &GenerationPrompt) -> Result<String, QagenError> {
        if self.failures.get() > 0 {
            self.failures.set(self.failures.get() - 1);
            return Err(QagenError::Transport("connection refused".into()));
        }
        Ok("Q: What does it do?\nA: It copies.".into())
    }
}

#[test]
fn retries_then_skips_without_aborting() {
    let records = load_records(&fixture("qagen_records.jsonl")).unwrap();
    let first = &records[..1];
    let flaky = Flaky { failures: Cell::new(2) };
    let (out, report) = generate_dataset(first, &flaky, &QagenConfig { turn_cap: None, retries: 2 });
    assert_eq!((out.len(), report.retries), (1, 2));
    let dead = Flaky { failures: Cell::new(usize::MAX) };
    let (out, report) = generate_dataset(&records[..3], &dead, &QagenConfig { turn_cap: None, retries: 1 });
    assert!(out.is_empty());
    assert_eq!(report.skipped.len(), 3);
    assert_eq!(report.retries, 3);
    assert!(report.skipped[0].reason.contains("connection refused"));
}

#[test]
fn unreachable_endpoint_is_a_transport_error() {
    let client = llavul::qagen::HttpClient::new("http://127.0.0.1:9/generate", std::time::Duration::from_millis(500));
    let prompt = llavul::qagen::build_generation_prompt("int f(void);", "A bug.").unwrap();
    assert!(matches!(client.complete(&prompt), Err(QagenError::Transport(_))));
}
