//! Loop and full-sort reimplementations of token selection.

use super::*;
use pig_retrieval::autodiff::Mat;
use pig_retrieval::encoders::VIDEO_TOKENS;
use pig_retrieval::its::{informativeness, score_scale, select_top_k, top_k_indices, InformativenessMatrix};
use pig_retrieval::model::PigModel;
use pig_retrieval::nn::HeadProjections;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const INSTANCES: u64 = 60;

/// Per-head patch-restricted attention of `cls` over `patches`, by loops.
fn loop_scores(cls: &[f64], patches: &Mat, proj: &HeadProjections, scale: f64) -> Vec<Vec<f64>> {
    let d = cls.len();
    let dh = d / proj.heads;
    let mut out = Vec::new();
    for h in 0..proj.heads {
        let mut logits = Vec::new();
        for p in 0..patches.nrows() {
            let mut dot = 0.0;
            for e in 0..dh {
                let col = h * dh + e;
                let mut q = 0.0;
                let mut k = 0.0;
                for c in 0..d {
                    q += cls[c] * proj.w_q[[c, col]];
                    k += patches[[p, c]] * proj.w_k[[c, col]];
                }
                dot += q * k;
            }
            logits.push(dot * scale);
        }
        let mut max = f64::NEG_INFINITY;
        for &l in &logits {
            if l > max {
                max = l;
            }
        }
        let mut total = 0.0;
        for l in logits.iter_mut() {
            *l = (*l - max).exp();
            total += *l;
        }
        for l in logits.iter_mut() {
            *l /= total;
        }
        out.push(logits);
    }
    out
}

fn assert_matches_loops(s: &InformativenessMatrix, per_head: &[Vec<f64>]) {
    let n = s.patches;
    for (h, expected) in per_head.iter().enumerate() {
        for (flat, e) in expected.iter().enumerate() {
            let got = s.per_head[h][[flat / n, flat % n]];
            assert!((got - e).abs() < 1e-12, "head {h} patch {flat}: {got} vs {e}");
        }
    }
    for flat in 0..s.frames * n {
        let mut best = f64::NEG_INFINITY;
        for head in per_head {
            if head[flat] > best {
                best = head[flat];
            }
        }
        assert!((s.flat_score(flat) - best).abs() < 1e-12);
    }
}

pub fn scores_match_loop_oracle_on_random_inputs() {
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let heads = rng.random_range(1..5);
        let d = heads * rng.random_range(1..5);
        let frames = rng.random_range(1..5);
        let patches = rng.random_range(1..7);
        let cls = random_mat(&mut rng, 1, d);
        let tokens = random_mat(&mut rng, frames * patches, d);
        let proj = HeadProjections {
            w_q: random_mat(&mut rng, d, d),
            w_k: random_mat(&mut rng, d, d),
            heads,
        };
        let scale = 1.0 / ((d / heads) as f64).sqrt();
        let s = informativeness(cls.view(), tokens.view(), &proj, frames, patches, scale).unwrap();
        let cls_row: Vec<f64> = cls.iter().copied().collect();
        assert_matches_loops(&s, &loop_scores(&cls_row, &tokens, &proj, scale));
    }
}

pub fn encoder_scores_match_loop_oracle() {
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cfg = tiny_model();
        cfg.encoder_depth = 1 + seed as usize % 2;
        cfg.frames = rng.random_range(1..4);
        cfg.patches = rng.random_range(1..6);
        cfg.top_k = 1;
        let model = PigModel::new(&cfg, seed).unwrap();
        let video = random_video(&mut rng, &cfg);
        let feats = model.video.encode(&model.store, &video).unwrap();

        let input = &feats.last_layer_input;
        let cls: Vec<f64> = input.row(0).to_vec();
        assert_eq!(feats.first_video_cls.row(0).to_vec(), cls);
        let start = VIDEO_TOKENS + cfg.frames;
        let patches = input.slice(ndarray::s![start.., ..]).to_owned();
        assert_eq!(patches.nrows(), cfg.frames * cfg.patches);
        let proj = model.video.transformer.last().attn.head_projections(&model.store);
        let scale = score_scale(cfg.its_scale, cfg.d, cfg.heads, cfg.patches);
        let expected = loop_scores(&cls, &patches, &proj, scale);
        assert_matches_loops(&feats.informativeness, &expected);
        for (h, row) in expected.iter().enumerate() {
            for (j, e) in row.iter().enumerate() {
                assert!((feats.last_attention[[h, j]] - e).abs() < 1e-12);
            }
        }
    }
}

/// Stable full sort by descending score, ties to the smaller index.
fn sort_oracle(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());
    idx.truncate(k);
    idx
}

fn random_scores(rng: &mut ChaCha8Rng, frames: usize, patches: usize, ties: bool) -> Mat {
    Mat::from_shape_fn((frames, patches), |_| {
        let x: f64 = rng.random();
        // Quantized scores produce many exact ties.
        if ties { (x * 4.0).floor() / 4.0 } else { x }
    })
}

pub fn top_k_matches_full_sort() {
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let frames = rng.random_range(1..6);
        let patches = rng.random_range(1..8);
        let total = frames * patches;
        let k = rng.random_range(1..=total);
        let scores = random_scores(&mut rng, frames, patches, seed % 2 == 0);
        let flat: Vec<f64> = scores.iter().copied().collect();
        let s = InformativenessMatrix::from_scores(scores);
        assert_eq!(top_k_indices(&s, k).unwrap(), sort_oracle(&flat, k), "seed {seed}");

        let x_p = random_mat(&mut rng, total, 3);
        let sel = select_top_k(&s, &x_p, k).unwrap();
        for (row, &(i, j)) in sel.indices.iter().enumerate() {
            assert_eq!(sel.x_ip.row(row), x_p.row(i * patches + j));
        }
    }
}

pub fn raising_an_unselected_patch_swaps_it_in() {
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(2000 + seed);
        let frames = rng.random_range(1..5);
        let patches = rng.random_range(2..7);
        let total = frames * patches;
        let k = rng.random_range(1..total);
        let mut scores = random_scores(&mut rng, frames, patches, false);
        let before = top_k_indices(&InformativenessMatrix::from_scores(scores.clone()), k).unwrap();
        let outside: Vec<usize> = (0..total).filter(|i| !before.contains(i)).collect();
        let lifted = outside[rng.random_range(0..outside.len())];
        scores[[lifted / patches, lifted % patches]] = 2.0;
        let after = top_k_indices(&InformativenessMatrix::from_scores(scores.clone()), k).unwrap();
        assert_eq!(after[0], lifted);
        assert_eq!(&after[1..], &before[..k - 1], "the weakest pick drops out");

        // Lowering a selected patch below everything drops it.
        let dropped = after[0];
        scores[[dropped / patches, dropped % patches]] = -1.0;
        let again = top_k_indices(&InformativenessMatrix::from_scores(scores), k).unwrap();
        assert_eq!(again, before);
    }
}
