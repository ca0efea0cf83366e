//! Tape-based reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Graph`] is rebuilt for every forward pass. Operations append nodes in
//! creation order, which is a valid topological order, so `backward` walks the
//! tape from the loss down to index 0. Leaf gradients accumulate across
//! successive `backward` calls until [`Graph::zero_grad`] is called.
//!
//! Every tensor is a 2-D matrix; higher-rank objects (for example the
//! `m × n × d` patch grid) are stored flattened to `(m·n) × d`.

use ndarray::{s, Array2, ArrayView2, Axis, Zip};

use crate::error::{PigError, Result};

pub type Mat = Array2<f64>;

/// Lower bound on row norms in [`Graph::normalize_rows`].
pub const NORM_EPS: f64 = 1e-12;

/// Epsilon added to the variance inside layer normalization.
pub const LN_EPS: f64 = 1e-5;

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Contiguous run of rows belonging to one sequence in a stacked batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
}

impl Segment {
    pub fn new(start: usize, len: usize) -> Self {
        Segment { start, len }
    }

    /// `count` back-to-back segments of equal length starting at row 0.
    pub fn uniform(count: usize, len: usize) -> Vec<Segment> {
        (0..count).map(|i| Segment::new(i * len, len)).collect()
    }

    fn end(&self) -> usize {
        self.start + self.len
    }
}

/// Parameters of the fused scaled-dot-product attention kernel.
///
/// Query segment `i` attends only to key segment `i`, which lets one node hold
/// the attention of a whole batch of independent sequences.
#[derive(Clone, Debug)]
pub struct AttentionSpec {
    pub heads: usize,
    pub scale: f64,
    pub causal: bool,
    pub q_segments: Vec<Segment>,
    pub k_segments: Vec<Segment>,
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    AddTiled(Var, Var),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    Exp(Var),
    QuickGelu(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Mat,
        inv_std: Vec<f64>,
    },
    NormalizeRows {
        x: Var,
        norms: Vec<f64>,
    },
    SliceRows {
        x: Var,
        start: usize,
    },
    GatherRows {
        x: Var,
        rows: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    TileRows(Var),
    Sum(Var),
    Mean(Var),
    Diag(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        spec: AttentionSpec,
        probs: Vec<Mat>,
    },
}

struct Node {
    value: Mat,
    op: Op,
    requires_grad: bool,
}

/// The dynamic computation tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    leaf_grads: Vec<Option<Mat>>,
    numeric_flags: usize,
}

fn dims(m: &Mat) -> [usize; 2] {
    [m.nrows(), m.ncols()]
}

fn softmax_rows_inplace(x: &mut Mat) {
    for mut row in x.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum: f64 = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
}

/// Row-wise softmax of a plain matrix, outside any graph.
pub fn softmax_rows(x: ArrayView2<f64>) -> Mat {
    let mut out = x.to_owned();
    softmax_rows_inplace(&mut out);
    out
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

const GELU_ALPHA: f64 = 1.702;

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Mat, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Adds a leaf tensor. Leaves with `requires_grad` receive gradients.
    pub fn leaf(&mut self, value: Mat, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Mat) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, present after `backward`.
    pub fn grad(&self, v: Var) -> Option<&Mat> {
        self.leaf_grads[v.0].as_ref()
    }

    pub fn zero_grad(&mut self) {
        self.leaf_grads.iter_mut().for_each(|g| *g = None);
    }

    /// Number of times a zero-norm row hit the normalization epsilon.
    pub fn numeric_flags(&self) -> usize {
        self.numeric_flags
    }

    /// Per-segment, per-head attention probabilities saved by an attention
    /// node, ordered `segment * heads + head`.
    pub fn attention_probs(&self, v: Var) -> Option<&[Mat]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.ncols() != vb.nrows() {
            return Err(PigError::shape("matmul", &dims(va), &dims(vb)));
        }
        let out = va.dot(vb);
        let rg = self.needs(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).t().to_owned();
        let rg = self.needs(&[a]);
        self.push(out, Op::Transpose(a), rg)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.dim() != vb.dim() {
            return Err(PigError::shape(op, &dims(va), &dims(vb)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.value(a) + self.value(b);
        let rg = self.needs(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.value(a) - self.value(b);
        let rg = self.needs(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.value(a) * self.value(b);
        let rg = self.needs(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    /// Adds a `1 × q` row to every row of a `p × q` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (va, vr) = (self.value(a), self.value(row));
        if vr.nrows() != 1 || vr.ncols() != va.ncols() {
            return Err(PigError::shape("add_row", &dims(va), &dims(vr)));
        }
        let out = va + vr;
        let rg = self.needs(&[a, row]);
        Ok(self.push(out, Op::AddRow(a, row), rg))
    }

    /// Adds an `r × q` block to each consecutive `r`-row block of `a`.
    pub fn add_tiled(&mut self, a: Var, block: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(block));
        let r = vb.nrows();
        if r == 0 || va.ncols() != vb.ncols() || va.nrows() % r != 0 {
            return Err(PigError::shape("add_tiled", &dims(va), &dims(vb)));
        }
        let mut out = va.clone();
        for mut chunk in out.axis_chunks_iter_mut(Axis(0), r) {
            chunk += vb;
        }
        let rg = self.needs(&[a, block]);
        Ok(self.push(out, Op::AddTiled(a, block), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a) * c;
        let rg = self.needs(&[a]);
        self.push(out, Op::Scale(a, c), rg)
    }

    /// `mul · a + add`, elementwise.
    pub fn affine(&mut self, a: Var, mul: f64, add: f64) -> Var {
        let out = self.value(a).mapv(|v| mul * v + add);
        let rg = self.needs(&[a]);
        self.push(out, Op::Scale(a, mul), rg)
    }

    /// Multiplies every entry of `a` by the single entry of the `1 × 1` tensor `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        let vs = self.value(s);
        if vs.dim() != (1, 1) {
            return Err(PigError::shape("scale_by", &dims(self.value(a)), &dims(vs)));
        }
        let c = vs[[0, 0]];
        let out = self.value(a) * c;
        let rg = self.needs(&[a, s]);
        Ok(self.push(out, Op::ScaleBy(a, s), rg))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(f64::exp);
        let rg = self.needs(&[a]);
        self.push(out, Op::Exp(a), rg)
    }

    /// `x · σ(1.702 x)`, the smooth GELU approximation used by CLIP.
    pub fn quick_gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|x| x * sigmoid(GELU_ALPHA * x));
        let rg = self.needs(&[a]);
        self.push(out, Op::QuickGelu(a), rg)
    }

    /// Softmax along the last axis with max-subtraction.
    pub fn softmax(&mut self, a: Var) -> Var {
        self.softmax_masked(a, false)
    }

    /// Softmax along the last axis. With `causal`, entry `(i, j)` for `j > i`
    /// is set to −∞ before normalization and therefore comes out exactly 0.
    pub fn softmax_masked(&mut self, a: Var, causal: bool) -> Var {
        let mut out = self.value(a).clone();
        if causal {
            apply_causal_mask(&mut out);
        }
        softmax_rows_inplace(&mut out);
        let rg = self.needs(&[a]);
        self.push(out, Op::Softmax(a), rg)
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for mut row in out.rows_mut() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            row.mapv_inplace(|v| v - lse);
        }
        let rg = self.needs(&[a]);
        self.push(out, Op::LogSoftmax(a), rg)
    }

    /// Row-wise layer normalization with affine `gamma`/`beta` (`1 × d`).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let vx = self.value(x);
        let d = vx.ncols();
        for p in [gamma, beta] {
            let vp = self.value(p);
            if vp.dim() != (1, d) {
                return Err(PigError::shape("layer_norm", &dims(vx), &dims(vp)));
            }
        }
        if d < 2 {
            return Err(PigError::shape("layer_norm", &dims(vx), &[1, 2]));
        }
        let mut xhat = vx.clone();
        let mut inv_std = Vec::with_capacity(vx.nrows());
        for mut row in xhat.rows_mut() {
            let mean = row.sum() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            row.mapv_inplace(|v| (v - mean) * is);
            inv_std.push(is);
        }
        let out = &xhat * self.value(gamma) + self.value(beta);
        let rg = self.needs(&[x, gamma, beta]);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Scales each row to unit L2 norm. Norms below [`NORM_EPS`] are clamped
    /// and counted in [`Graph::numeric_flags`].
    pub fn normalize_rows(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        let mut norms = Vec::with_capacity(out.nrows());
        for mut row in out.rows_mut() {
            let n = row.dot(&row).sqrt();
            if n <= NORM_EPS {
                self.numeric_flags += 1;
            }
            let denom = n.max(NORM_EPS);
            row.mapv_inplace(|v| v / denom);
            norms.push(n);
        }
        let rg = self.needs(&[x]);
        self.push(out, Op::NormalizeRows { x, norms }, rg)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let vx = self.value(x);
        if start + len > vx.nrows() || len == 0 {
            return Err(PigError::shape("slice_rows", &dims(vx), &[start, len]));
        }
        let out = vx.slice(s![start..start + len, ..]).to_owned();
        let rg = self.needs(&[x]);
        Ok(self.push(out, Op::SliceRows { x, start }, rg))
    }

    /// Selects rows by index; repeated indices are allowed and their
    /// gradients are summed.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let vx = self.value(x);
        if rows.is_empty() {
            return Err(PigError::shape("gather_rows", &dims(vx), &[0]));
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= vx.nrows()) {
            return Err(PigError::shape("gather_rows", &dims(vx), &[bad]));
        }
        let out = vx.select(Axis(0), rows);
        let rg = self.needs(&[x]);
        Ok(self.push(
            out,
            Op::GatherRows {
                x,
                rows: rows.to_vec(),
            },
            rg,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| PigError::Usage("concat_rows of nothing".into()))?;
        let cols = self.value(*first).ncols();
        for p in parts {
            let vp = self.value(*p);
            if vp.ncols() != cols {
                return Err(PigError::shape("concat_rows", &[0, cols], &dims(vp)));
            }
        }
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let out = ndarray::concatenate(Axis(0), &views).expect("column counts checked");
        let rg = self.needs(parts);
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Stacks `times` copies of `x` vertically.
    pub fn tile_rows(&mut self, x: Var, times: usize) -> Var {
        let vx = self.value(x);
        let views: Vec<_> = (0..times).map(|_| vx.view()).collect();
        let out = ndarray::concatenate(Axis(0), &views).expect("identical shapes");
        let rg = self.needs(&[x]);
        self.push(out, Op::TileRows(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Mat::from_elem((1, 1), self.value(x).sum());
        let rg = self.needs(&[x]);
        self.push(out, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let out = Mat::from_elem((1, 1), vx.sum() / vx.len() as f64);
        let rg = self.needs(&[x]);
        self.push(out, Op::Mean(x), rg)
    }

    /// Diagonal of a square matrix as a column.
    pub fn diag(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        if vx.nrows() != vx.ncols() {
            return Err(PigError::shape("diag", &dims(vx), &[vx.nrows(), vx.nrows()]));
        }
        let out = vx.diag().to_owned().insert_axis(Axis(1));
        let rg = self.needs(&[x]);
        Ok(self.push(out, Op::Diag(x), rg))
    }

    /// Fused multi-head scaled-dot-product attention over already projected
    /// queries, keys and values. Heads split the columns evenly.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, spec: AttentionSpec) -> Result<Var> {
        let (vq, vk, vv) = (self.value(q), self.value(k), self.value(v));
        let d = vq.ncols();
        if vk.ncols() != d || vv.ncols() != d {
            return Err(PigError::shape("attention", &dims(vq), &dims(vk)));
        }
        if vk.nrows() != vv.nrows() {
            return Err(PigError::shape("attention", &dims(vk), &dims(vv)));
        }
        if spec.heads == 0 || d % spec.heads != 0 {
            return Err(PigError::Config(format!(
                "model width {d} is not divisible by {} heads",
                spec.heads
            )));
        }
        if spec.q_segments.len() != spec.k_segments.len() {
            return Err(PigError::Usage(format!(
                "{} query segments vs {} key segments",
                spec.q_segments.len(),
                spec.k_segments.len()
            )));
        }
        for (qs, ks) in spec.q_segments.iter().zip(&spec.k_segments) {
            if qs.len == 0 || ks.len == 0 || qs.end() > vq.nrows() || ks.end() > vk.nrows() {
                return Err(PigError::shape(
                    "attention segment",
                    &[qs.start, qs.len, ks.start, ks.len],
                    &[vq.nrows(), vk.nrows()],
                ));
            }
            if spec.causal && qs.len != ks.len {
                return Err(PigError::Usage(
                    "causal attention needs equal query and key lengths".into(),
                ));
            }
        }

        let dh = d / spec.heads;
        let mut out = Mat::zeros((vq.nrows(), d));
        let mut probs = Vec::with_capacity(spec.q_segments.len() * spec.heads);
        for (qs, ks) in spec.q_segments.iter().zip(&spec.k_segments) {
            for h in 0..spec.heads {
                let cols = h * dh..(h + 1) * dh;
                let qh = vq.slice(s![qs.start..qs.end(), cols.clone()]);
                let kh = vk.slice(s![ks.start..ks.end(), cols.clone()]);
                let vh = vv.slice(s![ks.start..ks.end(), cols.clone()]);
                let mut p = qh.dot(&kh.t()) * spec.scale;
                if spec.causal {
                    apply_causal_mask(&mut p);
                }
                softmax_rows_inplace(&mut p);
                out.slice_mut(s![qs.start..qs.end(), cols]).assign(&p.dot(&vh));
                probs.push(p);
            }
        }
        let rg = self.needs(&[q, k, v]);
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                spec,
                probs,
            },
            rg,
        ))
    }

    /// Returns an error if any value on the tape is NaN or infinite.
    pub fn check_finite(&self, v: Var) -> Result<()> {
        if self.value(v).iter().all(|x| x.is_finite()) {
            Ok(())
        } else {
            Err(PigError::Numeric(format!("non-finite value at node {}", v.0)))
        }
    }

    /// Back-propagates from a scalar loss. Gradients of `requires_grad`
    /// leaves are added to whatever they already hold.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = self.value(loss);
        if lv.dim() != (1, 1) {
            return Err(PigError::Usage(format!(
                "backward needs a scalar loss, got {:?}",
                lv.dim()
            )));
        }
        self.check_finite(loss)?;

        let mut grads: Vec<Option<Mat>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Mat::ones((1, 1)));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if let Op::Leaf = node.op {
                grads[i] = Some(g);
                continue;
            }
            self.backward_node(i, g, &mut grads);
        }

        for (i, g) in grads.into_iter().enumerate() {
            if let (Op::Leaf, Some(g)) = (&self.nodes[i].op, g) {
                if !g.iter().all(|x| x.is_finite()) {
                    return Err(PigError::Numeric(format!("non-finite gradient at leaf {i}")));
                }
                match &mut self.leaf_grads[i] {
                    Some(acc) => *acc += &g,
                    slot => *slot = Some(g),
                }
            }
        }
        Ok(())
    }

    fn backward_node(&self, i: usize, g: Mat, grads: &mut [Option<Mat>]) {
        let nodes = &self.nodes;
        let needs = |v: &Var| nodes[v.0].requires_grad;
        let mut acc = |v: Var, delta: Mat| {
            if !nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => *existing += &delta,
                slot => *slot = Some(delta),
            }
        };
        let val = |v: &Var| &nodes[v.0].value;
        let out = &nodes[i].value;

        match &nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if needs(a) {
                    acc(*a, g.dot(&val(b).t()));
                }
                if needs(b) {
                    acc(*b, val(a).t().dot(&g));
                }
            }
            Op::Transpose(a) => acc(*a, g.t().to_owned()),
            Op::Add(a, b) => {
                if needs(b) {
                    acc(*b, g.clone());
                }
                acc(*a, g);
            }
            Op::Sub(a, b) => {
                if needs(b) {
                    acc(*b, -&g);
                }
                acc(*a, g);
            }
            Op::Mul(a, b) => {
                if needs(a) {
                    acc(*a, &g * val(b));
                }
                if needs(b) {
                    acc(*b, &g * val(a));
                }
            }
            Op::AddRow(a, row) => {
                if needs(row) {
                    acc(*row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                acc(*a, g);
            }
            Op::AddTiled(a, block) => {
                if needs(block) {
                    let r = val(block).nrows();
                    let mut gb = Mat::zeros(val(block).raw_dim());
                    for chunk in g.axis_chunks_iter(Axis(0), r) {
                        gb += &chunk;
                    }
                    acc(*block, gb);
                }
                acc(*a, g);
            }
            Op::Scale(a, c) => acc(*a, g * *c),
            Op::ScaleBy(a, sv) => {
                let c = val(sv)[[0, 0]];
                if needs(sv) {
                    let gs = (&g * val(a)).sum();
                    acc(*sv, Mat::from_elem((1, 1), gs));
                }
                acc(*a, g * c);
            }
            Op::Exp(a) => acc(*a, g * out),
            Op::QuickGelu(a) => {
                let mut ga = g;
                Zip::from(&mut ga).and(val(a)).for_each(|gi, &x| {
                    let sg = sigmoid(GELU_ALPHA * x);
                    *gi *= sg + GELU_ALPHA * x * sg * (1.0 - sg);
                });
                acc(*a, ga);
            }
            Op::Softmax(a) => {
                let dot = (&g * out).sum_axis(Axis(1)).insert_axis(Axis(1));
                acc(*a, out * &(g - &dot));
            }
            Op::LogSoftmax(a) => {
                let rowsum = g.sum_axis(Axis(1)).insert_axis(Axis(1));
                let sm = out.mapv(f64::exp);
                acc(*a, g - &(sm * &rowsum));
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                if needs(gamma) {
                    acc(*gamma, (&g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                if needs(beta) {
                    acc(*beta, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                if needs(x) {
                    let d = xhat.ncols() as f64;
                    let dxhat = &g * val(gamma);
                    let mut gx = Mat::zeros(xhat.raw_dim());
                    for (r, mut row) in gx.rows_mut().into_iter().enumerate() {
                        let dx = dxhat.row(r);
                        let xh = xhat.row(r);
                        let m1 = dx.sum() / d;
                        let m2 = dx.dot(&xh) / d;
                        Zip::from(&mut row)
                            .and(&dx)
                            .and(&xh)
                            .for_each(|o, &a, &b| *o = inv_std[r] * (a - m1 - b * m2));
                    }
                    acc(*x, gx);
                }
            }
            Op::NormalizeRows { x, norms } => {
                let mut gx = g;
                for (r, mut row) in gx.rows_mut().into_iter().enumerate() {
                    let n = norms[r];
                    if n > NORM_EPS {
                        let y = out.row(r);
                        let proj = y.dot(&row);
                        Zip::from(&mut row)
                            .and(&y)
                            .for_each(|gi, &yi| *gi = (*gi - yi * proj) / n);
                    } else {
                        row.mapv_inplace(|gi| gi / NORM_EPS);
                    }
                }
                acc(*x, gx);
            }
            Op::SliceRows { x, start } => {
                let mut gx = Mat::zeros(val(x).raw_dim());
                gx.slice_mut(s![*start..*start + g.nrows(), ..]).assign(&g);
                acc(*x, gx);
            }
            Op::GatherRows { x, rows } => {
                let mut gx = Mat::zeros(val(x).raw_dim());
                for (r, &src) in rows.iter().enumerate() {
                    let mut dst = gx.row_mut(src);
                    dst += &g.row(r);
                }
                acc(*x, gx);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let rows = val(p).nrows();
                    if needs(p) {
                        acc(*p, g.slice(s![offset..offset + rows, ..]).to_owned());
                    }
                    offset += rows;
                }
            }
            Op::TileRows(x) => {
                let r = val(x).nrows();
                let mut gx = Mat::zeros(val(x).raw_dim());
                for chunk in g.axis_chunks_iter(Axis(0), r) {
                    gx += &chunk;
                }
                acc(*x, gx);
            }
            Op::Sum(x) => acc(*x, Mat::from_elem(val(x).raw_dim(), g[[0, 0]])),
            Op::Mean(x) => {
                let n = val(x).len() as f64;
                acc(*x, Mat::from_elem(val(x).raw_dim(), g[[0, 0]] / n));
            }
            Op::Diag(x) => {
                let mut gx = Mat::zeros(val(x).raw_dim());
                for r in 0..g.nrows() {
                    gx[[r, r]] = g[[r, 0]];
                }
                acc(*x, gx);
            }
            Op::Attention {
                q,
                k,
                v,
                spec,
                probs,
            } => {
                let (vq, vk, vv) = (val(q), val(k), val(v));
                let d = vq.ncols();
                let dh = d / spec.heads;
                let mut gq = Mat::zeros(vq.raw_dim());
                let mut gk = Mat::zeros(vk.raw_dim());
                let mut gv = Mat::zeros(vv.raw_dim());
                for (si, (qs, ks)) in spec.q_segments.iter().zip(&spec.k_segments).enumerate() {
                    for h in 0..spec.heads {
                        let p = &probs[si * spec.heads + h];
                        let cols = h * dh..(h + 1) * dh;
                        let qrows = qs.start..qs.end();
                        let krows = ks.start..ks.end();
                        let go = g.slice(s![qrows.clone(), cols.clone()]);
                        let qh = vq.slice(s![qrows.clone(), cols.clone()]);
                        let kh = vk.slice(s![krows.clone(), cols.clone()]);
                        let vh = vv.slice(s![krows.clone(), cols.clone()]);

                        let mut gv_slice = gv.slice_mut(s![krows.clone(), cols.clone()]);
                        gv_slice += &p.t().dot(&go);

                        let dp = go.dot(&vh.t());
                        let rowdot = (&dp * p).sum_axis(Axis(1)).insert_axis(Axis(1));
                        let ds = p * &(dp - &rowdot);

                        let mut gq_slice = gq.slice_mut(s![qrows, cols.clone()]);
                        gq_slice.scaled_add(spec.scale, &ds.dot(&kh));
                        let mut gk_slice = gk.slice_mut(s![krows, cols]);
                        gk_slice.scaled_add(spec.scale, &ds.t().dot(&qh));
                    }
                }
                acc(*q, gq);
                acc(*k, gk);
                acc(*v, gv);
            }
        }
    }
}

fn apply_causal_mask(x: &mut Mat) {
    let cols = x.ncols();
    for (i, mut row) in x.rows_mut().into_iter().enumerate() {
        for j in (i + 1)..cols {
            row[j] = f64::NEG_INFINITY;
        }
    }
}
