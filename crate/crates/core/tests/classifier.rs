mod common;

use common::{tiny_config, tiny_model, tiny_tokenizer};
use llavul::classifier::{
    balance_corpus, evaluate_classifier, train_classifier, ClassifierConfig, VulnClassifier,
};
use llavul::model::ModelConfig;
use llavul::synthetic::{marker_corpus, MARKER_CALL};
use llavul::tokenizer::TokenizerModel;

fn marker_setup(n: usize) -> (VulnClassifier<f32>, Vec<llavul::data::LabeledCode>) {
    let raw = marker_corpus(n, 0.3, 11);
    let text: Vec<String> = raw.iter().map(|r| r.code.clone()).collect();
    let tok = TokenizerModel::train(&text, 512).unwrap();
    let cfg = ModelConfig { vocab_size: tok.vocab_size(), ..Default::default() };
    (VulnClassifier::new(cfg, tok).unwrap(), raw)
}

#[test]
fn learns_the_marker() {
    let (mut clf, raw) = marker_setup(800);
    let balanced = balance_corpus(&raw, 1).unwrap();
    let pos = balanced.iter().filter(|r| r.label == 1).count();
    assert_eq!(pos * 2, balanced.len());
    let (train, test) = balanced.split_at(balanced.len() * 4 / 5);
    let report = train_classifier(&mut clf, train, &ClassifierConfig { epochs: 6, ..Default::default() }).unwrap();
    assert_eq!(report.train_size, train.len());
    let (metrics, preds) = evaluate_classifier(&clf, test).unwrap();
    assert!(metrics.accuracy >= 0.95, "{metrics:?}");
    assert_eq!(preds.len(), test.len());
    let marked: Vec<_> = test.iter().zip(&preds).filter(|(r, _)| r.code.contains(&format!(" {MARKER_CALL}("))).collect();
    let confident = marked.iter().filter(|(_, p)| p.probability > 0.5).count();
    assert!(confident as f64 >= 0.95 * marked.len() as f64);
}

#[test]
fn loss_series_is_seeded_and_zero_steps_keep_init() {
    let (clf, raw) = marker_setup(120);
    let data = balance_corpus(&raw, 2).unwrap();
    let cfg = ClassifierConfig { epochs: 1, batch_size: 8, seed: 5, ..Default::default() };
    let mut a = clf.clone();
    let mut b = clf.clone();
    let ra = train_classifier(&mut a, &data, &cfg).unwrap();
    let rb = train_classifier(&mut b, &data, &cfg).unwrap();
    assert_eq!(ra.losses, rb.losses);
    let mut c = clf.clone();
    let rc = train_classifier(&mut c, &data, &ClassifierConfig { max_steps: Some(0), ..cfg }).unwrap();
    assert_eq!(rc.steps, 0);
    for ((_, p), (_, q)) in c.params.iter().zip(clf.params.iter()) {
        assert_eq!(p.tensor.data(), q.tensor.data());
    }
    assert!(train_classifier(&mut c, &[], &cfg).is_err());
}

#[test]
fn probabilities_are_padding_invariant_and_complementary() {
    let tok = tiny_tokenizer();
    let clf = VulnClassifier::<f32>::new(tiny_config(&tok), tok).unwrap();
    let short = "int h(int *a, int i) { return a[i]; }";
    let long = "void g(int n) { char *p = malloc(n); free(p); p[0] = 1; }";
    let alone = clf.classify(short).unwrap();
    let batched = clf.classify_batch(&[short, long]).unwrap();
    assert!((alone.probability - batched[0].probability).abs() < 1e-6);
    assert!((0.0..=1.0).contains(&alone.probability));
    assert_eq!(alone.label, u8::from(alone.probability >= 0.5));
    assert_eq!(clf.classify(short).unwrap(), alone);
    assert!(clf.classify("").is_err());
}

#[test]
fn built_from_a_model_it_holds_only_encoder_and_head() {
    let model = tiny_model::<f32>();
    let clf = VulnClassifier::from_model(&model).unwrap();
    for (_, p) in clf.params.iter() {
        assert!(p.name.starts_with("encoder.") || p.name.starts_with("classifier.head."), "{}", p.name);
        if p.name.starts_with("encoder.") {
            assert_eq!(p.tensor.data(), model.params.by_name(&p.name).unwrap().tensor.data());
        }
    }
}

#[test]
fn save_and_load_round_trip() {
    let tok = tiny_tokenizer();
    let clf = VulnClassifier::<f32>::new(tiny_config(&tok), tok).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("clf.ckpt");
    clf.save(&path).unwrap();
    let loaded = VulnClassifier::<f32>::load(&path).unwrap();
    let code = "void k(char *fmt) { printf(fmt); }";
    assert_eq!(loaded.classify(code).unwrap(), clf.classify(code).unwrap());
    // A generation checkpoint is not a classifier.
    let model_path = dir.path().join("model.ckpt");
    llavul::model::save_checkpoint(&tiny_model::<f32>(), &model_path).unwrap();
    assert!(VulnClassifier::<f32>::load(&model_path).is_err());
    assert!(llavul::model::load_checkpoint::<f32>(&path).is_err());
}
