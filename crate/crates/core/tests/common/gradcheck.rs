//! Central finite-difference checks of every tape operation and of the
//! full composed training loss.

use super::*;
use pig_retrieval::autodiff::{AttentionSpec, Graph, Mat, Segment, Var};
use pig_retrieval::config::GeneratorInput;
use pig_retrieval::model::PigModel;
use pig_retrieval::objectives::{info_nce_graph, recon_loss_graph};
use pig_retrieval::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const SEEDS: u64 = 20;

/// Reduces a matrix to a scalar through fixed random weights, so that every
/// output entry carries a distinct upstream gradient.
fn weighted_sum(g: &mut Graph, x: Var, seed: u64) -> Result<Var> {
    let (r, c) = g.shape(x);
    let w = random_mat(&mut ChaCha8Rng::seed_from_u64(seed ^ 0xabcd), r, c);
    let w = g.constant(w);
    let p = g.mul(x, w)?;
    Ok(g.sum(p))
}

fn dims(rng: &mut ChaCha8Rng) -> (usize, usize) {
    (rng.random_range(1..6), rng.random_range(1..6))
}

/// Worst error of `case` over every seed; non-finite errors count as
/// infinitely bad.
fn check_op(
    out: &mut Vec<(&'static str, f64)>,
    name: &'static str,
    case: impl Fn(u64, &mut ChaCha8Rng) -> f64,
) {
    let mut worst = 0.0f64;
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let e = case(seed, &mut rng);
        worst = worst.max(if e.is_finite() { e } else { f64::INFINITY });
    }
    out.push((name, worst));
}

fn unary(out: &mut Vec<(&'static str, f64)>, name: &'static str, op: impl Fn(&mut Graph, Var) -> Result<Var> + Copy) {
    check_op(out, name, |seed, rng| {
        let (r, c) = dims(rng);
        let x = random_mat(rng, r, c);
        graph_grad_error(&[x], |g, v| {
            let y = op(g, v[0])?;
            weighted_sum(g, y, seed)
        })
    });
}

fn binary(out: &mut Vec<(&'static str, f64)>, name: &'static str, op: impl Fn(&mut Graph, Var, Var) -> Result<Var> + Copy) {
    check_op(out, name, |seed, rng| {
        let (r, c) = dims(rng);
        let a = random_mat(rng, r, c);
        let b = random_mat(rng, r, c);
        graph_grad_error(&[a, b], |g, v| {
            let y = op(g, v[0], v[1])?;
            weighted_sum(g, y, seed)
        })
    });
}

fn elementwise_ops(out: &mut Vec<(&'static str, f64)>) {
    binary(out, "add", |g, a, b| g.add(a, b));
    binary(out, "sub", |g, a, b| g.sub(a, b));
    binary(out, "mul", |g, a, b| g.mul(a, b));
    unary(out, "scale", |g, a| Ok(g.scale(a, -1.7)));
    unary(out, "affine", |g, a| Ok(g.affine(a, 0.3, 2.0)));
    unary(out, "exp", |g, a| Ok(g.exp(a)));
    unary(out, "quick_gelu", |g, a| Ok(g.quick_gelu(a)));
    unary(out, "transpose", |g, a| Ok(g.transpose(a)));
}

fn matmul(out: &mut Vec<(&'static str, f64)>) {
    check_op(out, "matmul", |seed, rng| {
        let (p, q) = dims(rng);
        let r = rng.random_range(1..6);
        let a = random_mat(rng, p, q);
        let b = random_mat(rng, q, r);
        graph_grad_error(&[a, b], |g, v| {
            let y = g.matmul(v[0], v[1])?;
            weighted_sum(g, y, seed)
        })
    });
}

fn broadcasting_ops(out: &mut Vec<(&'static str, f64)>) {
    check_op(out, "add_row", |seed, rng| {
        let (r, c) = dims(rng);
        let a = random_mat(rng, r, c);
        let row = random_mat(rng, 1, c);
        graph_grad_error(&[a, row], |g, v| {
            let y = g.add_row(v[0], v[1])?;
            weighted_sum(g, y, seed)
        })
    });
    check_op(out, "add_tiled", |seed, rng| {
        let (r, c) = dims(rng);
        let times = rng.random_range(1..4);
        let a = random_mat(rng, r * times, c);
        let block = random_mat(rng, r, c);
        graph_grad_error(&[a, block], |g, v| {
            let y = g.add_tiled(v[0], v[1])?;
            weighted_sum(g, y, seed)
        })
    });
    check_op(out, "scale_by", |seed, rng| {
        let (r, c) = dims(rng);
        let a = random_mat(rng, r, c);
        let s = random_mat(rng, 1, 1);
        graph_grad_error(&[a, s], |g, v| {
            let y = g.scale_by(v[0], v[1])?;
            weighted_sum(g, y, seed)
        })
    });
    check_op(out, "tile_rows", |seed, rng| {
        let (r, c) = dims(rng);
        let times = rng.random_range(1..4);
        let a = random_mat(rng, r, c);
        graph_grad_error(&[a], |g, v| {
            let y = g.tile_rows(v[0], times);
            weighted_sum(g, y, seed)
        })
    });
}

fn row_normalizing_ops(out: &mut Vec<(&'static str, f64)>) {
    unary(out, "softmax", |g, a| Ok(g.softmax(a)));
    unary(out, "softmax_masked_causal", |g, a| Ok(g.softmax_masked(a, true)));
    unary(out, "log_softmax", |g, a| Ok(g.log_softmax(a)));
    unary(out, "normalize_rows", |g, a| Ok(g.normalize_rows(a)));
    check_op(out, "layer_norm", |seed, rng| {
        let r = rng.random_range(1..6);
        let c = rng.random_range(2..7);
        let x = random_mat(rng, r, c);
        let gamma = random_mat(rng, 1, c);
        let beta = random_mat(rng, 1, c);
        graph_grad_error(&[x, gamma, beta], |g, v| {
            let y = g.layer_norm(v[0], v[1], v[2])?;
            weighted_sum(g, y, seed)
        })
    });
}

fn row_selection_ops(out: &mut Vec<(&'static str, f64)>) {
    check_op(out, "slice_rows", |seed, rng| {
        let (r, c) = dims(rng);
        let start = rng.random_range(0..r);
        let len = rng.random_range(1..=r - start);
        let x = random_mat(rng, r, c);
        graph_grad_error(&[x], |g, v| {
            let y = g.slice_rows(v[0], start, len)?;
            weighted_sum(g, y, seed)
        })
    });
    check_op(out, "gather_rows", |seed, rng| {
        let (r, c) = dims(rng);
        // Repeated rows must accumulate their gradients.
        let rows: Vec<usize> = (0..rng.random_range(1..8))
            .map(|_| rng.random_range(0..r))
            .collect();
        let x = random_mat(rng, r, c);
        graph_grad_error(&[x], |g, v| {
            let y = g.gather_rows(v[0], &rows)?;
            weighted_sum(g, y, seed)
        })
    });
    check_op(out, "concat_rows", |seed, rng| {
        let c = rng.random_range(1..5);
        let parts: Vec<Mat> = (0..rng.random_range(1..4))
            .map(|_| {
                let r = rng.random_range(1..4);
                random_mat(rng, r, c)
            })
            .collect();
        graph_grad_error(&parts, |g, v| {
            let y = g.concat_rows(v)?;
            weighted_sum(g, y, seed)
        })
    });
    check_op(out, "diag", |seed, rng| {
        let n = rng.random_range(1..6);
        let x = random_mat(rng, n, n);
        graph_grad_error(&[x], |g, v| {
            let y = g.diag(v[0])?;
            weighted_sum(g, y, seed)
        })
    });
}

fn reductions(out: &mut Vec<(&'static str, f64)>) {
    unary(out, "sum", |g, a| Ok(g.sum(a)));
    unary(out, "mean", |g, a| Ok(g.mean(a)));
}

fn segments(rng: &mut ChaCha8Rng, count: usize, max_len: usize) -> Vec<Segment> {
    let mut start = 0;
    (0..count)
        .map(|_| {
            let len = rng.random_range(1..=max_len);
            let s = Segment::new(start, len);
            start += len;
            s
        })
        .collect()
}

fn total_rows(segs: &[Segment]) -> usize {
    segs.last().map(|s| s.start + s.len).unwrap_or(0)
}

fn attention_cross_segments(out: &mut Vec<(&'static str, f64)>) {
    check_op(out, "attention", |seed, rng| {
        let heads = rng.random_range(1..4);
        let d = heads * rng.random_range(1..4);
        let count = rng.random_range(1..4);
        let q_segments = segments(rng, count, 4);
        let k_segments = segments(rng, count, 4);
        let q = random_mat(rng, total_rows(&q_segments), d);
        let k = random_mat(rng, total_rows(&k_segments), d);
        let v = random_mat(rng, total_rows(&k_segments), d);
        let spec = AttentionSpec {
            heads,
            scale: 1.0 / ((d / heads) as f64).sqrt(),
            causal: false,
            q_segments,
            k_segments,
        };
        graph_grad_error(&[q, k, v], |g, x| {
            let y = g.attention(x[0], x[1], x[2], spec.clone())?;
            weighted_sum(g, y, seed)
        })
    });
}

fn attention_causal_self(out: &mut Vec<(&'static str, f64)>) {
    check_op(out, "attention_causal", |seed, rng| {
        let heads = rng.random_range(1..4);
        let d = heads * rng.random_range(1..4);
        let count = rng.random_range(1..4);
        let segs = segments(rng, count, 5);
        let rows = total_rows(&segs);
        let q = random_mat(rng, rows, d);
        let k = random_mat(rng, rows, d);
        let v = random_mat(rng, rows, d);
        let spec = AttentionSpec {
            heads,
            scale: 0.7,
            causal: true,
            q_segments: segs.clone(),
            k_segments: segs,
        };
        graph_grad_error(&[q, k, v], |g, x| {
            let y = g.attention(x[0], x[1], x[2], spec.clone())?;
            weighted_sum(g, y, seed)
        })
    });
}

fn contrastive_and_reconstruction_losses(out: &mut Vec<(&'static str, f64)>) {
    check_op(out, "info_nce", |_, rng| {
        let b = rng.random_range(1..6);
        let d = rng.random_range(2..6);
        let t = random_mat(rng, b, d);
        let v = random_mat(rng, b, d);
        let log_tau = Mat::from_elem((1, 1), rng.random_range(0.0..3.0));
        graph_grad_error(&[t, v, log_tau], |g, x| {
            let tau = g.exp(x[2]);
            info_nce_graph(g, x[0], x[1], tau)
        })
    });
    check_op(out, "recon", |_, rng| {
        let (b, d) = dims(rng);
        let tp = random_mat(rng, b, d);
        let t = random_mat(rng, b, d);
        graph_grad_error(&[tp, t], |g, x| recon_loss_graph(g, x[0], x[1]))
    });
}

/// Worst relative error per operation over all seeds.
pub fn op_errors() -> Vec<(&'static str, f64)> {
    let mut out = Vec::new();
    elementwise_ops(&mut out);
    matmul(&mut out);
    broadcasting_ops(&mut out);
    row_normalizing_ops(&mut out);
    row_selection_ops(&mut out);
    reductions(&mut out);
    attention_cross_segments(&mut out);
    attention_causal_self(&mut out);
    contrastive_and_reconstruction_losses(&mut out);
    out
}

/// The complete stage-2 objective `L_cons(t, v) + α·L_recon(t_p, t)` through
/// both encoders, patch selection, the generator and the fusioner, with
/// every parameter (temperature included) trainable.
pub fn full_model_error() -> f64 {
    let mut worst = 0.0f64;
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let mut cfg = tiny_model();
        cfg.heads = [1, 2, 4][seed as usize % 3];
        cfg.frames = rng.random_range(1..4);
        cfg.patches = rng.random_range(2..5);
        cfg.top_k = rng.random_range(1..=cfg.frames * cfg.patches);
        cfg.fc_depth = 1 + seed as usize % 2;
        cfg.generator_input = [
            GeneratorInput::Full,
            GeneratorInput::Video,
            GeneratorInput::VideoPatch,
        ][seed as usize % 3];
        let mut model = PigModel::new(&cfg, seed).unwrap();
        model.set_tau(rng.random_range(2.0..20.0));
        let batch = rng.random_range(2..4);
        let videos: Vec<_> = (0..batch).map(|_| random_video(&mut rng, &cfg)).collect();
        let texts: Vec<_> = (0..batch)
            .map(|_| {
                let len = rng.random_range(1..=cfg.text_max_len);
                random_text(&mut rng, &cfg, len)
            })
            .collect();
        let alpha = 1.5;
        let (e, checked) = param_grad_error(&model.store, &mut rng, 4, |f| {
            let vr: Vec<_> = videos.iter().collect();
            let tr: Vec<_> = texts.iter().collect();
            let t = model.text_forward(f, &tr)?;
            let out = model.video_forward(f, &vr)?;
            let tau = model.tau_node(f);
            let l_cons = info_nce_graph(&mut f.g, t, out.v, tau)?;
            let l_recon = recon_loss_graph(&mut f.g, out.t_p, t)?;
            let w = f.g.scale(l_recon, alpha);
            f.g.add(l_cons, w)
        });
        assert_eq!(checked, model.store.len(), "every tensor is checked");
        worst = worst.max(e);
    }
    worst
}
