#![allow(dead_code)]

use llavul::data::{ConversationSample, Turn};
use llavul::model::{render_conversation, LlavulModel, ModelConfig, MultimodalSequence};
use llavul::numerics::{Graph, Tensor, Var};
use llavul::tokenizer::TokenizerModel;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, scale: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-scale..scale))
}

/// Central-difference check of `f` at `inputs`.
///
/// `f` builds a scalar from leaf variables; the analytic gradient comes from
/// the tape, the numeric one from `(f(x + h) - f(x - h)) / 2h` on up to
/// `max_coords` coordinates per input. Returns the worst relative error and
/// the number of coordinates compared.
pub fn check_gradients<F>(inputs: &[Tensor<f64>], f: F, h: f64, max_coords: usize) -> (f64, usize)
where
    F: Fn(&mut Graph<'_, f64>, &[Var]) -> Var,
{
    let eval = |ts: &[Tensor<f64>]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = ts.iter().map(|t| g.input(t.clone(), true)).collect();
        let out = f(&mut g, &vars);
        g.scalar(out)
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone(), true)).collect();
    let out = f(&mut g, &vars);
    let grads = g.backward(out).unwrap();

    let mut worst = 0.0f64;
    let mut compared = 0;
    for (k, t) in inputs.iter().enumerate() {
        let analytic = grads.wrt(vars[k]).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; t.numel()]);
        let stride = (t.numel() / max_coords).max(1);
        for i in (0..t.numel()).step_by(stride).take(max_coords) {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += h;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let denom = numeric.abs().max(analytic[i].abs()).max(1e-6);
            worst = worst.max((numeric - analytic[i]).abs() / denom);
            compared += 1;
        }
    }
    (worst, compared)
}

/// Fixed random projection that turns any tensor into a scalar loss.
pub fn probe_weights(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}


/// Small corpus with code of different lengths and multi-turn samples.
pub fn tiny_corpus() -> Vec<ConversationSample> {
    let codes = [
        "int f(char *s) { char b[8]; strcpy(b, s); return 0; }",
        "void g(int n) { char *p = malloc(n); free(p); p[0] = 1; }",
        "int h(int *a, int i) { return a[i]; }",
        "void k(char *fmt) { printf(fmt); }",
    ];
    codes
        .iter()
        .enumerate()
        .map(|(i, code)| ConversationSample {
            id: format!("tiny-{i}"),
            language: "C".into(),
            code: code.to_string(),
            description: None,
            turns: (0..=i % 2)
                .map(|t| Turn::new(format!("question {t} about sample {i}?"), format!("answer {t} for {i}.")))
                .collect(),
            split: None,
        })
        .collect()
}

pub fn tiny_tokenizer() -> TokenizerModel {
    TokenizerModel::train(&llavul::synthetic::tokenizer_corpus(&tiny_corpus()), 300).unwrap()
}

pub fn tiny_config(tok: &TokenizerModel) -> ModelConfig {
    ModelConfig {
        vocab_size: tok.vocab_size(),
        enc_dim: 16,
        enc_layers: 2,
        enc_heads: 2,
        enc_positions: 64,
        proj_hidden: 24,
        dec_dim: 16,
        dec_layers: 2,
        dec_heads: 2,
        context: 128,
        mlp_ratio: 2,
        seed: 7,
        ..Default::default()
    }
}

pub fn tiny_model<T: llavul::Scalar>() -> LlavulModel<T> {
    let tok = tiny_tokenizer();
    LlavulModel::new(tiny_config(&tok), tok).unwrap()
}

pub fn render_all<T: llavul::Scalar>(model: &LlavulModel<T>) -> Vec<MultimodalSequence> {
    tiny_corpus()
        .iter()
        .map(|s| render_conversation(&model.tokenizer, s, model.render_options(64)).unwrap())
        .collect()
}

pub fn max_abs_diff<T: llavul::Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data().iter().zip(b.data()).map(|(x, y)| (x.as_f64() - y.as_f64()).abs()).fold(0.0, f64::max)
}
