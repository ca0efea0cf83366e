//! Helpers shared by the integration test targets.
#![allow(dead_code)]

pub mod causality;
pub mod equivalence;
pub mod gradcheck;
pub mod its_oracle;
pub mod workspace;

use ndarray::Array2;
use pig_retrieval::autodiff::{Graph, Mat, Var};
use pig_retrieval::config::ModelConfig;
use pig_retrieval::data::{RawText, RawVideo};
use pig_retrieval::nn::{token_init, Forward, ParamId, ParamStore};
use pig_retrieval::Result;
use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Central difference step.
pub const FD_STEP: f64 = 1e-5;
/// Maximum accepted relative error between analytic and numeric gradients.
pub const FD_TOL: f64 = 1e-3;
/// Norm floor in the relative error, so gradients that are both
/// numerically zero compare as equal.
pub const FD_FLOOR: f64 = 1e-6;

/// `‖a − n‖ / max(‖a‖, ‖n‖, FD_FLOOR)`.
pub fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |x: &[f64]| x.iter().map(|v| v * v).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    norm(&diff) / norm(analytic).max(norm(numeric)).max(FD_FLOOR)
}

pub fn random_mat(rng: &mut impl Rng, rows: usize, cols: usize) -> Mat {
    token_init(rng, rows, cols, 1.0)
}

/// Worst relative gradient error over every input of a scalar function
/// built on a fresh graph. All inputs are differentiable leaves.
pub fn graph_grad_error(
    inputs: &[Mat],
    build: impl Fn(&mut Graph, &[Var]) -> Result<Var>,
) -> f64 {
    let eval = |vals: &[Mat]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|m| g.leaf(m.clone(), false)).collect();
        let out = build(&mut g, &vars).expect("forward");
        g.value(out)[[0, 0]]
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|m| g.leaf(m.clone(), true)).collect();
    let out = build(&mut g, &vars).expect("forward");
    assert_eq!(g.shape(out), (1, 1), "loss must be a scalar");
    g.backward(out).expect("backward");

    let mut worst = 0.0f64;
    for (i, input) in inputs.iter().enumerate() {
        let analytic = g
            .grad(vars[i])
            .cloned()
            .unwrap_or_else(|| Array2::zeros(input.dim()));
        let mut numeric = Vec::with_capacity(input.len());
        let mut vals = inputs.to_vec();
        for j in 0..input.len() {
            let orig = input.as_slice().unwrap()[j];
            vals[i].as_slice_mut().unwrap()[j] = orig + FD_STEP;
            let up = eval(&vals);
            vals[i].as_slice_mut().unwrap()[j] = orig - FD_STEP;
            let down = eval(&vals);
            vals[i].as_slice_mut().unwrap()[j] = orig;
            numeric.push((up - down) / (2.0 * FD_STEP));
        }
        let analytic: Vec<f64> = analytic.iter().copied().collect();
        worst = worst.max(rel_err(&analytic, &numeric));
    }
    worst
}

/// Worst relative gradient error over the trainable parameters of a store,
/// checking up to `per_tensor` randomly chosen entries of every tensor.
/// Returns the error and the number of tensors checked.
pub fn param_grad_error(
    store: &ParamStore,
    rng: &mut ChaCha8Rng,
    per_tensor: usize,
    loss: impl Fn(&mut Forward) -> Result<Var>,
) -> (f64, usize) {
    let mut f = Forward::train(store);
    let out = loss(&mut f).expect("forward");
    f.g.backward(out).expect("backward");
    let grads: std::collections::HashMap<ParamId, Mat> = f.param_grads().into_iter().collect();

    let eval = |s: &ParamStore| -> f64 {
        let mut f = Forward::inference(s);
        let out = loss(&mut f).expect("forward");
        f.value(out)[[0, 0]]
    };
    let mut work = store.clone();
    let mut worst = 0.0f64;
    let mut checked = 0;
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        if !store.get(id).trainable {
            continue;
        }
        let len = store.value(id).len();
        let picks = sample(rng, len, per_tensor.min(len)).into_vec();
        let grad: Vec<f64> = match grads.get(&id) {
            Some(g) => g.iter().copied().collect(),
            None => vec![0.0; len],
        };
        let mut analytic = Vec::new();
        let mut numeric = Vec::new();
        for j in picks {
            let orig = store.value(id).as_slice().unwrap()[j];
            work.value_mut(id).as_slice_mut().unwrap()[j] = orig + FD_STEP;
            let up = eval(&work);
            work.value_mut(id).as_slice_mut().unwrap()[j] = orig - FD_STEP;
            let down = eval(&work);
            work.value_mut(id).as_slice_mut().unwrap()[j] = orig;
            analytic.push(grad[j]);
            numeric.push((up - down) / (2.0 * FD_STEP));
        }
        let e = rel_err(&analytic, &numeric);
        if e > FD_TOL {
            eprintln!("{}: relative error {e:.3e}", store.get(id).name);
        }
        worst = worst.max(e);
        checked += 1;
    }
    (worst, checked)
}

/// A small but structurally complete model.
pub fn tiny_model() -> ModelConfig {
    ModelConfig {
        d: 8,
        heads: 2,
        d_in: 4,
        frames: 2,
        patches: 4,
        top_k: 3,
        text_max_len: 4,
        encoder_depth: 1,
        text_depth: 1,
        generator_depth: 1,
        mlp_ratio: 2,
        ..ModelConfig::default()
    }
}

pub fn random_video(rng: &mut impl Rng, cfg: &ModelConfig) -> RawVideo {
    let rows = cfg.frames * cfg.patches;
    RawVideo::new(cfg.frames, cfg.patches, random_mat(rng, rows, cfg.d_in)).unwrap()
}

pub fn random_text(rng: &mut impl Rng, cfg: &ModelConfig, len: usize) -> RawText {
    RawText::new(random_mat(rng, len, cfg.d_in)).unwrap()
}
