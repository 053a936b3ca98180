//! Metric implementations against independently coded direct formulas on
//! randomized token sequences, plus hand-derived anchors.

use llavul::metrics::{
    bleu_n, bleu_tokens, classification_metrics, greedy_cosine_f1, meteor, meteor_tokens, rouge_l, rouge_l_tokens,
    rouge_n, rouge_n_tokens, score_pair, semantic_score, tokenize, Embedder, MetricReport, SampleScores,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const WORDS: [&str; 5] = ["a", "b", "c", "d", "e"];
const TOL: f64 = 1e-9;

fn random_pairs(seed: u64, n: usize, max_len: usize) -> Vec<(Vec<String>, Vec<String>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sent = |rng: &mut ChaCha8Rng| {
        let len = rng.random_range(1..=max_len);
        (0..len).map(|_| WORDS[rng.random_range(0..WORDS.len())].to_string()).collect::<Vec<_>>()
    };
    (0..n).map(|_| (sent(&mut rng), sent(&mut rng))).collect()
}

/// All n-grams as a plain list, in order.
fn grams(t: &[String], n: usize) -> Vec<Vec<String>> {
    if t.len() < n {
        return Vec::new();
    }
    (0..=t.len() - n).map(|i| t[i..i + n].to_vec()).collect()
}

/// Clipped match count: each reference n-gram can be used once.
fn clipped(h: &[Vec<String>], r: &[Vec<String>]) -> usize {
    let mut used = vec![false; r.len()];
    let mut m = 0;
    for g in h {
        if let Some(k) = (0..r.len()).find(|&k| !used[k] && &r[k] == g) {
            used[k] = true;
            m += 1;
        }
    }
    m
}

fn bleu_oracle(h: &[String], r: &[String], n: usize) -> f64 {
    let mut prod = 1.0;
    for k in 1..=n {
        let hg = grams(h, k);
        let m = clipped(&hg, &grams(r, k));
        let p = if m > 0 {
            m as f64 / hg.len() as f64
        } else if k == 1 {
            return 0.0;
        } else {
            1.0 / (hg.len() as f64 + 1.0)
        };
        prod *= p;
    }
    let bp = if h.len() >= r.len() { 1.0 } else { (1.0 - r.len() as f64 / h.len() as f64).exp() };
    bp * prod.powf(1.0 / n as f64)
}

fn rouge_n_oracle(h: &[String], r: &[String], n: usize) -> f64 {
    let (hg, rg) = (grams(h, n), grams(r, n));
    let m = clipped(&hg, &rg) as f64;
    if m == 0.0 {
        return 0.0;
    }
    let (p, rc) = (m / hg.len() as f64, m / rg.len() as f64);
    2.0 * p * rc / (p + rc)
}

fn is_subsequence(sub: &[&String], of: &[String]) -> bool {
    let mut it = of.iter();
    sub.iter().all(|s| it.any(|x| x == *s))
}

/// LCS by enumerating every subsequence of the hypothesis.
fn lcs_brute(h: &[String], r: &[String]) -> usize {
    let mut best = 0;
    for mask in 0u32..(1 << h.len()) {
        let sub: Vec<&String> = (0..h.len()).filter(|i| mask >> i & 1 == 1).map(|i| &h[i]).collect();
        if sub.len() > best && is_subsequence(&sub, r) {
            best = sub.len();
        }
    }
    best
}

fn rouge_l_oracle(h: &[String], r: &[String]) -> f64 {
    let l = lcs_brute(h, r) as f64;
    if l == 0.0 {
        return 0.0;
    }
    let (p, rc) = (l / h.len() as f64, l / r.len() as f64);
    2.0 * p * rc / (p + rc)
}

/// Every one-to-one exact alignment; returns the best `(matches, chunks)`.
fn meteor_brute(h: &[String], r: &[String]) -> (usize, usize) {
    fn walk(h: &[String], r: &[String], i: usize, used: &mut Vec<bool>, pairs: &mut Vec<(usize, usize)>, best: &mut (usize, usize)) {
        if i == h.len() {
            let m = pairs.len();
            let chunks = if m == 0 {
                0
            } else {
                1 + pairs.windows(2).filter(|w| !(w[1].0 == w[0].0 + 1 && w[1].1 == w[0].1 + 1)).count()
            };
            if m > best.0 || (m == best.0 && chunks < best.1) {
                *best = (m, chunks);
            }
            return;
        }
        walk(h, r, i + 1, used, pairs, best);
        for j in 0..r.len() {
            if !used[j] && r[j] == h[i] {
                used[j] = true;
                pairs.push((i, j));
                walk(h, r, i + 1, used, pairs, best);
                pairs.pop();
                used[j] = false;
            }
        }
    }
    let mut best = (0, usize::MAX);
    walk(h, r, 0, &mut vec![false; r.len()], &mut Vec::new(), &mut best);
    if best.0 == 0 {
        (0, 0)
    } else {
        best
    }
}

fn meteor_oracle(h: &[String], r: &[String]) -> f64 {
    let (m, ch) = meteor_brute(h, r);
    if m == 0 {
        return 0.0;
    }
    let p = m as f64 / h.len() as f64;
    let rc = m as f64 / r.len() as f64;
    let fmean = 10.0 * p * rc / (rc + 9.0 * p);
    fmean * (1.0 - 0.5 * (ch as f64 / m as f64).powi(3))
}

#[test]
fn bleu_matches_direct_formula() {
    for (h, r) in random_pairs(1, 50, 10) {
        for n in [2, 4] {
            let (got, want) = (bleu_tokens(&h, &r, n), bleu_oracle(&h, &r, n));
            assert!((got - want).abs() < TOL, "{h:?} {r:?} n={n}: {got} vs {want}");
        }
    }
}

#[test]
fn rouge_matches_direct_formula() {
    for (h, r) in random_pairs(2, 50, 10) {
        for n in [1, 2] {
            let (got, want) = (rouge_n_tokens(&h, &r, n), rouge_n_oracle(&h, &r, n));
            assert!((got - want).abs() < TOL, "{h:?} {r:?} n={n}: {got} vs {want}");
        }
        let (got, want) = (rouge_l_tokens(&h, &r), rouge_l_oracle(&h, &r));
        assert!((got - want).abs() < TOL, "{h:?} {r:?}: {got} vs {want}");
    }
}

#[test]
fn meteor_matches_exhaustive_alignment() {
    for (h, r) in random_pairs(3, 50, 7) {
        let (got, want) = (meteor_tokens(&h, &r), meteor_oracle(&h, &r));
        assert!((got - want).abs() < TOL, "{h:?} {r:?}: {got} vs {want}");
    }
}

#[test]
fn classification_matches_counting() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..50 {
        let n = rng.random_range(1..30);
        let preds: Vec<u8> = (0..n).map(|_| rng.random_range(0..2)).collect();
        let labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..2)).collect();
        let count = |p: u8, l: u8| preds.iter().zip(&labels).filter(|&(&a, &b)| a == p && b == l).count() as f64;
        let (tp, fp, fn_, tn) = (count(1, 1), count(1, 0), count(0, 1), count(0, 0));
        let acc = (tp + tn) / n as f64;
        let prec = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
        let rec = if tp + fn_ > 0.0 { tp / (tp + fn_) } else { 0.0 };
        let f1 = if tp > 0.0 { 2.0 * tp / (2.0 * tp + fp + fn_) } else { 0.0 };
        let r = classification_metrics(&preds, &labels).unwrap();
        for (got, want) in [(r.accuracy, acc), (r.precision, prec), (r.recall, rec), (r.f1, f1)] {
            assert!((got - want).abs() < TOL);
        }
    }
}

#[test]
fn hand_derived_anchors() {
    assert!((bleu_n("a b x d", "a b c d", 2).unwrap() - 0.5).abs() < TOL);
    assert!((rouge_l("a b c", "a c b") - 2.0 / 3.0).abs() < TOL);
    assert!((meteor("the cat", "the cat") - 0.9375).abs() < TOL);
    let preds = [1, 1, 1, 1, 0, 0, 0, 0, 0, 0];
    let labels = [1, 1, 1, 0, 1, 1, 0, 0, 0, 0];
    let r = classification_metrics(&preds, &labels).unwrap();
    assert_eq!((r.tp, r.fp, r.fn_, r.tn), (3, 1, 2, 4));
    assert!((r.precision - 0.75).abs() < TOL);
    assert!((r.recall - 0.6).abs() < TOL);
    assert!((r.f1 - 2.0 / 3.0).abs() < TOL);
    assert!((r.accuracy - 0.7).abs() < TOL);
}

#[test]
fn trivial_cases() {
    let s = "the buffer is copied without a length check";
    assert_eq!(bleu_n(s, s, 4).unwrap(), 1.0);
    assert_eq!(rouge_n(s, s, 2).unwrap(), 1.0);
    assert_eq!(rouge_l(s, s), 1.0);
    assert!(bleu_n(s, s, 3).is_err());
    assert_eq!(bleu_n("", s, 2).unwrap(), 0.0);
    assert_eq!(rouge_l("", s), 0.0);
    assert_eq!(meteor("x y", "p q"), 0.0);
    let perfect = classification_metrics(&[1, 0, 1], &[1, 0, 1]).unwrap();
    assert_eq!((perfect.accuracy, perfect.precision, perfect.recall, perfect.f1), (1.0, 1.0, 1.0, 1.0));
    let none = classification_metrics(&[0, 0, 0, 0], &[1, 1, 0, 0]).unwrap();
    assert_eq!((none.accuracy, none.recall), (0.5, 0.0));
    assert!(classification_metrics(&[], &[]).is_err());
    assert!(classification_metrics(&[1], &[1, 0]).is_err());
}

#[test]
fn tokenization_is_frozen() {
    assert_eq!(tokenize("Heap-Overflow in add_range()."), vec!["heap", "-", "overflow", "in", "add_range", "(", ")", "."]);
    assert!(tokenize("  \n\t").is_empty());
}

/// Fixed per-word vectors.
struct Lookup;

impl Embedder for Lookup {
    fn embed(&self, text: &str) -> Vec<Vec<f64>> {
        text.split_whitespace()
            .map(|w| match w {
                "x" => vec![1.0, 0.0, 0.0],
                "y" => vec![0.0, 1.0, 0.0],
                "z" => vec![1.0, 1.0, 0.0],
                "w" => vec![0.0, 0.0, 1.0],
                _ => vec![1.0, 2.0, 3.0],
            })
            .collect()
    }
}

#[test]
fn semantic_score_by_brute_force() {
    assert_eq!(semantic_score("x y z", "x y z", &Lookup), 1.0);
    assert_eq!(semantic_score("x", "w", &Lookup), 0.0);
    // hyp x,y,z against ref z,w: best cosines by hand.
    let s = std::f64::consts::FRAC_1_SQRT_2;
    let p = (s + s + 1.0) / 3.0;
    let r = (1.0 + 0.0) / 2.0;
    let want = 2.0 * p * r / (p + r);
    assert!((semantic_score("x y z", "z w", &Lookup) - want).abs() < TOL);
    assert_eq!(greedy_cosine_f1(&[], &[vec![1.0]]), 0.0);
}

#[test]
fn report_is_the_mean_of_rows() {
    let rows: Vec<SampleScores> = vec![
        score_pair("s1", 0, "a b c d", "a b c d", &Lookup),
        score_pair("s2", 0, "a b x d", "a b c d", &Lookup),
    ];
    // Second row by hand: BLEU-2 0.5, ROUGE-1 3/4, ROUGE-2 1/3, ROUGE-L 3/4.
    assert!((rows[1].bleu2 - 0.5).abs() < TOL);
    assert!((rows[1].rouge1 - 0.75).abs() < TOL);
    assert!((rows[1].rouge2 - 1.0 / 3.0).abs() < TOL);
    assert!((rows[1].rouge_l - 0.75).abs() < TOL);
    let r = MetricReport::aggregate(rows, 0, false).unwrap();
    assert!((r.bleu2 - 0.75).abs() < TOL);
    assert!((r.rouge1 - 0.875).abs() < TOL);
    assert!((r.rouge2 - 2.0 / 3.0).abs() < TOL);
    assert!((r.rouge_l - 0.875).abs() < TOL);
    assert_eq!((r.exact_match, r.size), (0.5, 2));
    assert!(MetricReport::aggregate(Vec::new(), 0, false).is_err());
}
