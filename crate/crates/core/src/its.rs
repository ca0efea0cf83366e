//! Informativeness token selection.
//!
//! Every patch token is scored by the final encoder layer's attention from the
//! first video-level cls token, restricted to the patch tokens and max-pooled
//! across heads. The `k` highest-scoring patches are kept, ordered by
//! descending score with ties going to the smaller flattened index.
//!
//! Selection is a hard index choice computed on plain values: no gradient
//! flows through the indices, while the gathered rows stay differentiable
//! wherever the caller gathers them on the tape.

use ndarray::{ArrayView2, Axis};

use crate::autodiff::{softmax_rows, Mat};
use crate::config::ItsScale;
use crate::error::{PigError, Result};
use crate::nn::HeadProjections;

/// `S ∈ [0,1]^{m×n}` plus the per-head scores it was pooled from.
#[derive(Clone, Debug, PartialEq)]
pub struct InformativenessMatrix {
    pub frames: usize,
    pub patches: usize,
    /// `m × n`, max over heads of `per_head`.
    pub scores: Mat,
    /// `h` matrices of shape `m × n`; each sums to one.
    pub per_head: Vec<Mat>,
}

impl InformativenessMatrix {
    pub fn flat_score(&self, flat: usize) -> f64 {
        self.scores[[flat / self.patches, flat % self.patches]]
    }

    /// Builds a matrix from explicit scores, e.g. for tests or replays.
    pub fn from_scores(scores: Mat) -> Self {
        let (frames, patches) = scores.dim();
        InformativenessMatrix {
            frames,
            patches,
            per_head: vec![scores.clone()],
            scores,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SelectedPatches {
    /// `k × d` rows of the patch tokens at `indices`.
    pub x_ip: Mat,
    /// `(frame, patch)` pairs in selection order.
    pub indices: Vec<(usize, usize)>,
}

/// The score scale for the chosen convention.
pub fn score_scale(kind: ItsScale, d: usize, heads: usize, patches: usize) -> f64 {
    match kind {
        ItsScale::PerHead => 1.0 / (d as f64 / heads as f64).sqrt(),
        ItsScale::PerPatchCount => 1.0 / (d as f64 / patches as f64).sqrt(),
    }
}

/// Scores every patch token against the video cls token.
///
/// `cls` is `1 × d` and `patches_tokens` is `(frames·patches) × d`, both taken
/// at the input of the final encoder attention layer so that `proj` (that
/// layer's query/key projections) applies to them directly.
pub fn informativeness(
    cls: ArrayView2<f64>,
    patch_tokens: ArrayView2<f64>,
    proj: &HeadProjections,
    frames: usize,
    patches: usize,
    scale: f64,
) -> Result<InformativenessMatrix> {
    let d = proj.w_q.nrows();
    if cls.dim() != (1, d) || patch_tokens.ncols() != d || proj.w_k.nrows() != d {
        return Err(PigError::Config(format!(
            "token selector width mismatch: cls {:?}, patches {:?}, projections {d}",
            cls.dim(),
            patch_tokens.dim()
        )));
    }
    if patch_tokens.nrows() != frames * patches || frames == 0 || patches == 0 {
        return Err(PigError::shape(
            "informativeness",
            &[patch_tokens.nrows(), d],
            &[frames * patches, d],
        ));
    }
    let mut per_head = Vec::with_capacity(proj.heads);
    let mut scores = Mat::zeros((frames, patches));
    for h in 0..proj.heads {
        let q = cls.dot(&proj.w_q_head(h));
        let k = patch_tokens.dot(&proj.w_k_head(h));
        let logits = q.dot(&k.t()) * scale;
        let p = softmax_rows(logits.view());
        let grid = p
            .into_shape_with_order((frames, patches))
            .expect("one row of frames·patches");
        if h == 0 {
            scores.assign(&grid);
        } else {
            scores.zip_mut_with(&grid, |s, &g| *s = s.max(g));
        }
        per_head.push(grid);
    }
    Ok(InformativenessMatrix {
        frames,
        patches,
        scores,
        per_head,
    })
}

/// Flattened indices of the `k` largest scores in selection order.
pub fn top_k_indices(s: &InformativenessMatrix, k: usize) -> Result<Vec<usize>> {
    let total = s.frames * s.patches;
    if k == 0 || k > total {
        return Err(PigError::Usage(format!(
            "top-k of {k} out of range 1..={total}"
        )));
    }
    let flat: Vec<f64> = s.scores.iter().cloned().collect();
    let mut order: Vec<usize> = (0..total).collect();
    let cmp = |a: &usize, b: &usize| flat[*b].total_cmp(&flat[*a]).then(a.cmp(b));
    if k < total {
        order.select_nth_unstable_by(k - 1, cmp);
        order.truncate(k);
    }
    order.sort_unstable_by(cmp);
    Ok(order)
}

/// Gathers the `k` most informative patch rows from `x_p` (`(m·n) × d`).
pub fn select_top_k(s: &InformativenessMatrix, x_p: &Mat, k: usize) -> Result<SelectedPatches> {
    if x_p.nrows() != s.frames * s.patches {
        return Err(PigError::shape(
            "select_top_k",
            &[x_p.nrows(), x_p.ncols()],
            &[s.frames, s.patches],
        ));
    }
    let flat = top_k_indices(s, k)?;
    let x_ip = x_p.select(Axis(0), &flat);
    let indices = flat.iter().map(|&i| (i / s.patches, i % s.patches)).collect();
    Ok(SelectedPatches { x_ip, indices })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{token_init, xavier_uniform};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn projections(rng: &mut ChaCha8Rng, d: usize, heads: usize) -> HeadProjections {
        HeadProjections {
            w_q: xavier_uniform(rng, d, d),
            w_k: xavier_uniform(rng, d, d),
            heads,
        }
    }

    #[test]
    fn single_patch_scores_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let proj = projections(&mut rng, 8, 2);
        let cls = token_init(&mut rng, 1, 8, 1.0);
        let xp = token_init(&mut rng, 1, 8, 1.0);
        let s = informativeness(cls.view(), xp.view(), &proj, 1, 1, 0.5).unwrap();
        assert_eq!(s.scores, ndarray::array![[1.0]]);
    }

    #[test]
    fn identical_keys_split_evenly() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let proj = projections(&mut rng, 4, 1);
        let cls = token_init(&mut rng, 1, 4, 1.0);
        let row = token_init(&mut rng, 1, 4, 1.0);
        let xp = ndarray::concatenate(Axis(0), &[row.view(), row.view()]).unwrap();
        let s = informativeness(cls.view(), xp.view(), &proj, 1, 2, 0.5).unwrap();
        assert!((s.scores[[0, 0]] - 0.5).abs() < 1e-15);
        assert!((s.scores[[0, 1]] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn width_mismatch_is_config_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let proj = projections(&mut rng, 8, 2);
        let cls = token_init(&mut rng, 1, 6, 1.0);
        let xp = token_init(&mut rng, 4, 6, 1.0);
        assert!(matches!(
            informativeness(cls.view(), xp.view(), &proj, 2, 2, 1.0),
            Err(PigError::Config(_))
        ));
    }

    #[test]
    fn exhaustive_selection_is_descending() {
        let s = InformativenessMatrix::from_scores(ndarray::array![[0.1, 0.4], [0.3, 0.2]]);
        assert_eq!(top_k_indices(&s, 4).unwrap(), vec![1, 2, 3, 0]);
    }

    #[test]
    fn one_hot_selection_and_ties() {
        let s = InformativenessMatrix::from_scores(ndarray::array![[0.0, 0.0, 1.0], [0.0, 0.0, 0.0]]);
        assert_eq!(top_k_indices(&s, 1).unwrap(), vec![2]);
        assert_eq!(top_k_indices(&s, 3).unwrap(), vec![2, 0, 1]);
    }

    #[test]
    fn k_out_of_range_rejected() {
        let s = InformativenessMatrix::from_scores(Mat::zeros((2, 2)));
        assert!(matches!(top_k_indices(&s, 0), Err(PigError::Usage(_))));
        assert!(matches!(top_k_indices(&s, 5), Err(PigError::Usage(_))));
    }

    #[test]
    fn gathered_rows_match_indices() {
        let s = InformativenessMatrix::from_scores(ndarray::array![[0.1, 0.9], [0.5, 0.2]]);
        let xp = Mat::from_shape_fn((4, 3), |(i, j)| (i * 10 + j) as f64);
        let sel = select_top_k(&s, &xp, 2).unwrap();
        assert_eq!(sel.indices, vec![(0, 1), (1, 0)]);
        assert_eq!(sel.x_ip.row(0), xp.row(1));
        assert_eq!(sel.x_ip.row(1), xp.row(2));
    }

    fn grid(values: Vec<f64>, n: usize) -> InformativenessMatrix {
        let m = values.len() / n;
        InformativenessMatrix::from_scores(Mat::from_shape_vec((m, n), values).unwrap())
    }

    proptest! {
        #[test]
        fn permutation_equivariance(
            values in proptest::collection::vec(0.0f64..1.0, 12),
            k in 1usize..12,
            perm_seed in any::<u64>(),
        ) {
            let s = grid(values.clone(), 4);
            let mut perm: Vec<usize> = (0..12).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(perm_seed);
            use rand::seq::SliceRandom;
            perm.shuffle(&mut rng);
            // permuted[i] = values[perm[i]]
            let permuted: Vec<f64> = perm.iter().map(|&p| values[p]).collect();
            let sp = grid(permuted, 4);
            let a = top_k_indices(&s, k).unwrap();
            let b = top_k_indices(&sp, k).unwrap();
            let mut sa: Vec<f64> = a.iter().map(|&i| values[i]).collect();
            let mut sb: Vec<f64> = b.iter().map(|&i| values[perm[i]]).collect();
            sa.sort_by(f64::total_cmp);
            sb.sort_by(f64::total_cmp);
            prop_assert_eq!(sa, sb);
            // With distinct scores the selected items are the same items.
            let distinct = {
                let mut v = values.clone();
                v.sort_by(f64::total_cmp);
                v.windows(2).all(|w| w[0] != w[1])
            };
            if distinct {
                let mut ia: Vec<usize> = a.clone();
                let mut ib: Vec<usize> = b.iter().map(|&i| perm[i]).collect();
                ia.sort();
                ib.sort();
                prop_assert_eq!(ia, ib);
            }
        }

        #[test]
        fn raising_an_unselected_entry_swaps_it_in(
            values in proptest::collection::vec(0.0f64..1.0, 12),
            k in 1usize..12,
            pick in 0usize..12,
        ) {
            let s = grid(values.clone(), 4);
            let before = top_k_indices(&s, k).unwrap();
            let unselected: Vec<usize> = (0..12).filter(|i| !before.contains(i)).collect();
            let target = unselected[pick % unselected.len()];
            let kth = values[*before.last().unwrap()];
            let mut raised = values.clone();
            raised[target] = kth + 0.5;
            let after = top_k_indices(&grid(raised, 4), k).unwrap();
            let mut expected: Vec<usize> = before[..k - 1].to_vec();
            expected.push(target);
            let mut got = after.clone();
            expected.sort();
            got.sort();
            prop_assert_eq!(got, expected);
        }
    }
}
