//! Contrastive and reconstruction losses, and retrieval metrics.
//!
//! Plain-value functions work on `ndarray` matrices; the `*_graph` variants
//! build the same quantities on the autodiff tape for training.

use std::collections::HashMap;
use std::fmt;

use ndarray::ArrayView1;

use crate::autodiff::{Graph, Mat, Var, NORM_EPS};
use crate::error::{PigError, Result};

/// Cosine similarity of two vectors. Zero-norm inputs are a numeric error.
pub fn cosine_sim(t: ArrayView1<f64>, v: ArrayView1<f64>) -> Result<f64> {
    if t.len() != v.len() {
        return Err(PigError::shape("cosine_sim", &[t.len()], &[v.len()]));
    }
    let (nt, nv) = (t.dot(&t).sqrt(), v.dot(&v).sqrt());
    if nt < NORM_EPS || nv < NORM_EPS {
        return Err(PigError::Numeric("cosine similarity of a zero-norm vector".into()));
    }
    Ok(t.dot(&v) / (nt * nv))
}

/// Row-normalized copy; zero rows are a numeric error.
pub fn normalize_rows(x: &Mat) -> Result<Mat> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let n = row.dot(&row).sqrt();
        if n < NORM_EPS {
            return Err(PigError::Numeric("cannot normalize a zero-norm row".into()));
        }
        row.mapv_inplace(|v| v / n);
    }
    Ok(out)
}

/// `T × V` cosine similarity matrix between rows of `texts` and `videos`.
pub fn similarity_matrix(texts: &Mat, videos: &Mat) -> Result<Mat> {
    if texts.ncols() != videos.ncols() {
        return Err(PigError::shape(
            "similarity_matrix",
            &[texts.nrows(), texts.ncols()],
            &[videos.nrows(), videos.ncols()],
        ));
    }
    Ok(normalize_rows(texts)?.dot(&normalize_rows(videos)?.t()))
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    max + values.map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Symmetric InfoNCE over a square similarity matrix whose diagonal holds
/// the positive pairs, with logits `sim · tau`.
pub fn info_nce(sim: &Mat, tau: f64) -> Result<f64> {
    let b = sim.nrows();
    if b == 0 {
        return Err(PigError::Usage("InfoNCE needs a non-empty batch".into()));
    }
    if sim.ncols() != b {
        return Err(PigError::shape("info_nce", &[b, sim.ncols()], &[b, b]));
    }
    let mut t2v = 0.0;
    let mut v2t = 0.0;
    for i in 0..b {
        let pos = sim[[i, i]] * tau;
        t2v += log_sum_exp(sim.row(i).iter().map(|x| x * tau)) - pos;
        v2t += log_sum_exp(sim.column(i).iter().map(|x| x * tau)) - pos;
    }
    Ok(0.5 * (t2v + v2t) / b as f64)
}

/// `1 − cos(t_p, t)`.
pub fn recon_loss(t_p: ArrayView1<f64>, t: ArrayView1<f64>) -> Result<f64> {
    Ok(1.0 - cosine_sim(t_p, t)?)
}

pub fn total_loss(l_cons: f64, l_recon: f64, alpha: f64) -> f64 {
    l_cons + alpha * l_recon
}

/// Graph form of [`info_nce`]: `texts` and `videos` are `B × d` (not yet
/// normalized), `tau` is a `1 × 1` node.
pub fn info_nce_graph(g: &mut Graph, texts: Var, videos: Var, tau: Var) -> Result<Var> {
    let b = g.shape(texts).0;
    if b == 0 || g.shape(videos).0 != b {
        return Err(PigError::Usage(format!(
            "InfoNCE needs matching non-empty batches, got {} and {}",
            b,
            g.shape(videos).0
        )));
    }
    let t = g.normalize_rows(texts);
    let v = g.normalize_rows(videos);
    let vt = g.transpose(v);
    let sim = g.matmul(t, vt)?;
    let logits = g.scale_by(sim, tau)?;
    let t2v = g.log_softmax(logits);
    let t2v = g.diag(t2v)?;
    let t2v = g.mean(t2v);
    let logits_t = g.transpose(logits);
    let v2t = g.log_softmax(logits_t);
    let v2t = g.diag(v2t)?;
    let v2t = g.mean(v2t);
    let both = g.add(t2v, v2t)?;
    Ok(g.scale(both, -0.5))
}

/// Graph form of the batch-mean reconstruction loss `1 − mean cos(t_p, t)`.
pub fn recon_loss_graph(g: &mut Graph, t_p: Var, t: Var) -> Result<Var> {
    let a = g.normalize_rows(t_p);
    let b = g.normalize_rows(t);
    let prod = g.mul(a, b)?;
    let rows = g.shape(prod).0 as f64;
    let s = g.sum(prod);
    Ok(g.affine(s, -1.0 / rows, 1.0))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RetrievalMetrics {
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
    pub sum_r: f64,
    pub mnr: f64,
}

impl RetrievalMetrics {
    /// Metrics from 1-based ranks.
    pub fn from_ranks(ranks: &[usize]) -> Self {
        let n = ranks.len().max(1) as f64;
        let pct = |k: usize| 100.0 * ranks.iter().filter(|&&r| r <= k).count() as f64 / n;
        let (r1, r5, r10) = (pct(1), pct(5), pct(10));
        RetrievalMetrics {
            r1,
            r5,
            r10,
            sum_r: r1 + r5 + r10,
            mnr: ranks.iter().sum::<usize>() as f64 / n,
        }
    }

    /// Single-line `key=value` record.
    pub fn record(&self) -> String {
        format!(
            "r1={:.2} r5={:.2} r10={:.2} sum_r={:.2} mnr={:.2}",
            self.r1, self.r5, self.r10, self.sum_r, self.mnr
        )
    }

    pub fn table(&self) -> String {
        format!(
            "| R@1 | R@5 | R@10 | SumR | MnR |\n|---:|---:|---:|---:|---:|\n| {:.1} | {:.1} | {:.1} | {:.1} | {:.1} |",
            self.r1, self.r5, self.r10, self.sum_r, self.mnr
        )
    }
}

impl fmt::Display for RetrievalMetrics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.record())
    }
}

/// 1-based rank of `gt` in a row of scores: items scoring higher, or equal
/// with a smaller id, come first.
pub fn rank_of(scores: ArrayView1<f64>, ids: &[u64], gt: usize) -> usize {
    let (s, id) = (scores[gt], ids[gt]);
    1 + scores
        .iter()
        .zip(ids)
        .filter(|&(&x, &i)| x > s || (x == s && i < id))
        .count()
}

/// Text-to-video metrics. Row `i` of `sim` scores text `i` against every
/// gallery video; `gt_ids[i]` names the matching video in `video_ids`.
pub fn compute_metrics(sim: &Mat, video_ids: &[u64], gt_ids: &[u64]) -> Result<RetrievalMetrics> {
    Ok(RetrievalMetrics::from_ranks(&ranks(sim, video_ids, gt_ids)?))
}

/// Per-text ranks used by [`compute_metrics`].
pub fn ranks(sim: &Mat, video_ids: &[u64], gt_ids: &[u64]) -> Result<Vec<usize>> {
    if sim.dim() != (gt_ids.len(), video_ids.len()) {
        return Err(PigError::shape(
            "compute_metrics",
            &[sim.nrows(), sim.ncols()],
            &[gt_ids.len(), video_ids.len()],
        ));
    }
    let column: HashMap<u64, usize> = video_ids.iter().enumerate().map(|(j, &id)| (id, j)).collect();
    if column.len() != video_ids.len() {
        return Err(PigError::Data("duplicate video id in gallery".into()));
    }
    gt_ids
        .iter()
        .enumerate()
        .map(|(i, gt)| {
            let j = *column.get(gt).ok_or_else(|| {
                PigError::Data(format!("ground-truth video {gt} of text {i} is not in the gallery"))
            })?;
            Ok(rank_of(sim.row(i), video_ids, j))
        })
        .collect()
}

/// Diagonal-ground-truth convenience for a square similarity matrix.
pub fn diagonal_metrics(sim: &Mat) -> Result<RetrievalMetrics> {
    let ids: Vec<u64> = (0..sim.ncols() as u64).collect();
    let gt: Vec<u64> = (0..sim.nrows() as u64).collect();
    compute_metrics(sim, &ids, &gt)
}

/// Mean cosine similarity between matching rows.
pub fn mean_row_cosine(a: &Mat, b: &Mat) -> Result<f64> {
    if a.dim() != b.dim() || a.nrows() == 0 {
        return Err(PigError::shape(
            "mean_row_cosine",
            &[a.nrows(), a.ncols()],
            &[b.nrows(), b.ncols()],
        ));
    }
    let total: f64 = a
        .rows()
        .into_iter()
        .zip(b.rows())
        .map(|(x, y)| cosine_sim(x, y))
        .sum::<Result<f64>>()?;
    Ok(total / a.nrows() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array1};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn cosine_examples() {
        let x = array![1.0, 2.0, -3.0];
        assert!((cosine_sim(x.view(), x.view()).unwrap() - 1.0).abs() < 1e-15);
        let nx = -&x;
        assert!((cosine_sim(x.view(), nx.view()).unwrap() + 1.0).abs() < 1e-15);
        let (a, b) = (array![1.0, 0.0], array![0.0, 1.0]);
        assert_eq!(cosine_sim(a.view(), b.view()).unwrap(), 0.0);
        let z = array![0.0, 0.0];
        assert!(matches!(cosine_sim(a.view(), z.view()), Err(PigError::Numeric(_))));
    }

    #[test]
    fn info_nce_closed_forms() {
        assert_eq!(info_nce(&array![[0.3]], 50.0).unwrap(), 0.0);
        let l = info_nce(&Mat::eye(2), 1.0).unwrap();
        let expected = -(1f64.exp() / (1f64.exp() + 1.0)).ln();
        assert!((l - expected).abs() < 1e-12);
        assert!((l - 0.3133).abs() < 1e-4);
        assert!(matches!(info_nce(&Mat::zeros((0, 0)), 1.0), Err(PigError::Usage(_))));
    }

    fn loop_info_nce(sim: &Mat, tau: f64) -> f64 {
        let b = sim.nrows();
        let mut t2v = 0.0;
        let mut v2t = 0.0;
        for i in 0..b {
            let mut row = 0.0;
            let mut col = 0.0;
            for j in 0..b {
                row += (sim[[i, j]] * tau).exp();
                col += (sim[[j, i]] * tau).exp();
            }
            t2v -= ((sim[[i, i]] * tau).exp() / row).ln();
            v2t -= ((sim[[i, i]] * tau).exp() / col).ln();
        }
        0.5 * (t2v / b as f64 + v2t / b as f64)
    }

    fn random_sim(rng: &mut ChaCha8Rng, b: usize) -> Mat {
        Mat::from_shape_fn((b, b), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn info_nce_matches_loop_and_is_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let sim = random_sim(&mut rng, 5);
        let l = info_nce(&sim, 3.0).unwrap();
        assert!((l - loop_info_nce(&sim, 3.0)).abs() < 1e-12);
        let mut prev = l;
        let mut s = sim.clone();
        for step in 0..20 {
            let (i, j) = (step % 5, (step * 3 + 1) % 5);
            if i == j {
                continue;
            }
            s[[i, j]] -= 0.05;
            let cur = info_nce(&s, 3.0).unwrap();
            assert!(cur <= prev + 1e-15);
            prev = cur;
        }
    }

    #[test]
    fn graph_info_nce_matches_plain() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = Mat::from_shape_fn((4, 6), |_| rng.random_range(-1.0..1.0));
        let v = Mat::from_shape_fn((4, 6), |_| rng.random_range(-1.0..1.0));
        let mut g = Graph::new();
        let (tv, vv) = (g.constant(t.clone()), g.constant(v.clone()));
        let tau = g.constant(array![[7.0]]);
        let l = info_nce_graph(&mut g, tv, vv, tau).unwrap();
        let plain = info_nce(&similarity_matrix(&t, &v).unwrap(), 7.0).unwrap();
        assert!((g.value(l)[[0, 0]] - plain).abs() < 1e-12);
    }

    #[test]
    fn recon_examples_and_graph() {
        let t = array![1.0, -2.0, 0.5];
        let neg = -&t;
        assert!(recon_loss(t.view(), t.view()).unwrap().abs() < 1e-15);
        assert!((recon_loss(neg.view(), t.view()).unwrap() - 2.0).abs() < 1e-15);
        let (a, b) = (array![1.0, 0.0], array![0.0, 3.0]);
        assert_eq!(recon_loss(a.view(), b.view()).unwrap(), 1.0);

        let mut g = Graph::new();
        let x = g.constant(array![[1.0, 0.0], [1.0, 1.0]]);
        let y = g.constant(array![[0.0, 2.0], [2.0, 2.0]]);
        let l = recon_loss_graph(&mut g, x, y).unwrap();
        assert!((g.value(l)[[0, 0]] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn total_loss_arithmetic() {
        assert_eq!(total_loss(1.0, 0.5, 2.0), 2.0);
        assert_eq!(total_loss(1.0, 0.5, 0.0), 1.0);
    }

    #[test]
    fn metric_examples() {
        let m = diagonal_metrics(&Mat::eye(10)).unwrap();
        assert_eq!((m.r1, m.mnr), (100.0, 1.0));
        let rev = Mat::from_shape_fn((10, 10), |(i, j)| if i == j { -1.0 } else { 1.0 });
        let m = diagonal_metrics(&rev).unwrap();
        assert_eq!((m.r1, m.r5, m.r10, m.mnr), (0.0, 0.0, 100.0, 10.0));
        assert!(matches!(
            compute_metrics(&Mat::eye(2), &[0, 1], &[0, 7]),
            Err(PigError::Data(_))
        ));
    }

    #[test]
    fn ties_break_by_ascending_id() {
        let sim = array![[0.5, 0.5, 0.5]];
        assert_eq!(ranks(&sim, &[3, 1, 2], &[3]).unwrap(), vec![3]);
        assert_eq!(ranks(&sim, &[3, 1, 2], &[1]).unwrap(), vec![1]);
    }

    fn loop_metrics(sim: &Mat) -> RetrievalMetrics {
        let n = sim.nrows();
        let mut ranks = Vec::new();
        for i in 0..n {
            let mut order: Vec<usize> = (0..sim.ncols()).collect();
            order.sort_by(|&a, &b| sim[[i, b]].total_cmp(&sim[[i, a]]).then(a.cmp(&b)));
            ranks.push(order.iter().position(|&j| j == i).unwrap() + 1);
        }
        let pct = |k| 100.0 * ranks.iter().filter(|&&r| r <= k).count() as f64 / n as f64;
        RetrievalMetrics {
            r1: pct(1),
            r5: pct(5),
            r10: pct(10),
            sum_r: pct(1) + pct(5) + pct(10),
            mnr: ranks.iter().sum::<usize>() as f64 / n as f64,
        }
    }

    #[test]
    fn metrics_match_sort_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let sim = random_sim(&mut rng, 50);
        assert_eq!(diagonal_metrics(&sim).unwrap(), loop_metrics(&sim));
    }

    proptest! {
        #[test]
        fn metric_invariants(seed in any::<u64>(), n in 1usize..30) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let sim = random_sim(&mut rng, n);
            let m = diagonal_metrics(&sim).unwrap();
            prop_assert!(0.0 <= m.r1 && m.r1 <= m.r5 && m.r5 <= m.r10 && m.r10 <= 100.0);
            prop_assert!((m.sum_r - (m.r1 + m.r5 + m.r10)).abs() < 1e-9);
            prop_assert!(m.mnr >= 1.0);
            // Strictly increasing transforms keep every rank.
            let warped = sim.mapv(|x| (3.0 * x).exp() + x);
            prop_assert_eq!(diagonal_metrics(&warped).unwrap(), m);
        }

        #[test]
        fn info_nce_permutation_invariant(seed in any::<u64>(), n in 1usize..8) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let sim = random_sim(&mut rng, n);
            let mut perm: Vec<usize> = (0..n).collect();
            use rand::seq::SliceRandom;
            perm.shuffle(&mut rng);
            let permuted = Mat::from_shape_fn((n, n), |(i, j)| sim[[perm[i], perm[j]]]);
            let a = info_nce(&sim, 5.0).unwrap();
            let b = info_nce(&permuted, 5.0).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
        }

        #[test]
        fn recon_is_scale_invariant(
            a in proptest::collection::vec(-1.0f64..1.0, 4),
            b in proptest::collection::vec(-1.0f64..1.0, 4),
            s in 0.1f64..10.0,
        ) {
            let (a, b) = (Array1::from(a), Array1::from(b));
            prop_assume!(a.dot(&a) > 1e-6 && b.dot(&b) > 1e-6);
            let l = recon_loss(a.view(), b.view()).unwrap();
            let scaled = &a * s;
            let ls = recon_loss(scaled.view(), b.view()).unwrap();
            prop_assert!((l - ls).abs() < 1e-12);
            prop_assert!((0.0..=2.0 + 1e-12).contains(&l));
        }
    }
}
