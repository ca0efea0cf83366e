//! Parameter storage and the transformer building blocks shared by every
//! model component.

use std::collections::HashMap;

use ndarray::{s, Array2};
use rand::Rng;
use rand_distr::{Distribution, Uniform};
use sha2::{Digest, Sha256};

use crate::autodiff::{AttentionSpec, Graph, Mat, Segment, Var};
use crate::error::{PigError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Mat,
    pub trainable: bool,
}

/// Named, ordered collection of model parameters.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Mat) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Param {
            name,
            value,
            trainable: true,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Mat {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.params[id.0].value
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.params[id.0].trainable = trainable;
    }

    /// Marks exactly the parameters whose name starts with one of `prefixes`
    /// as trainable and freezes the rest.
    pub fn train_only(&mut self, prefixes: &[&str]) {
        for p in &mut self.params {
            p.trainable = prefixes.iter().any(|pre| p.name.starts_with(pre));
        }
    }

    pub fn set_all_trainable(&mut self) {
        self.params.iter_mut().for_each(|p| p.trainable = true);
    }

    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// SHA-256 over the names and raw values of the selected parameters.
    pub fn digest_where(&self, mut keep: impl FnMut(&Param) -> bool) -> [u8; 32] {
        let mut h = Sha256::new();
        for p in self.params.iter().filter(|p| keep(p)) {
            h.update(p.name.as_bytes());
            for v in p.value.iter() {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().into()
    }

    pub fn all_finite(&self) -> bool {
        self.params
            .iter()
            .all(|p| p.value.iter().all(|v| v.is_finite()))
    }
}

/// Xavier/Glorot uniform initialization for an `fan_in × fan_out` matrix.
pub fn xavier_uniform(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Mat {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let dist = Uniform::new_inclusive(-a, a).expect("finite bound");
    Array2::from_shape_fn((fan_in, fan_out), |_| dist.sample(rng))
}

/// Small-scale uniform init for learned tokens and positional tables.
pub fn token_init(rng: &mut impl Rng, rows: usize, cols: usize, scale: f64) -> Mat {
    let dist = Uniform::new_inclusive(-scale, scale).expect("finite bound");
    Array2::from_shape_fn((rows, cols), |_| dist.sample(rng))
}

/// A single forward pass: the tape plus the parameters bound into it.
pub struct Forward<'a> {
    pub g: Graph,
    params: &'a ParamStore,
    bound: Vec<Option<Var>>,
    grad_enabled: bool,
}

impl<'a> Forward<'a> {
    /// Forward pass whose trainable parameters receive gradients.
    pub fn train(params: &'a ParamStore) -> Self {
        Self::with_grad(params, true)
    }

    /// Inference-only pass: nothing on the tape requires a gradient.
    pub fn inference(params: &'a ParamStore) -> Self {
        Self::with_grad(params, false)
    }

    fn with_grad(params: &'a ParamStore, grad_enabled: bool) -> Self {
        Forward {
            g: Graph::new(),
            params,
            bound: vec![None; params.len()],
            grad_enabled,
        }
    }

    pub fn params(&self) -> &'a ParamStore {
        self.params
    }

    /// Leaf for a parameter, created on first use.
    pub fn p(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let p = self.params.get(id);
        let v = self.g.leaf(p.value.clone(), self.grad_enabled && p.trainable);
        self.bound[id.0] = Some(v);
        v
    }

    pub fn constant(&mut self, value: Mat) -> Var {
        self.g.constant(value)
    }

    pub fn value(&self, v: Var) -> &Mat {
        self.g.value(v)
    }

    /// Gradients of every bound trainable parameter after `backward`.
    pub fn param_grads(&self) -> Vec<(ParamId, Mat)> {
        self.bound
            .iter()
            .enumerate()
            .filter_map(|(i, v)| {
                let v = (*v)?;
                self.g.grad(v).map(|g| (ParamId(i), g.clone()))
            })
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let w = store.add(format!("{name}.w"), xavier_uniform(rng, in_dim, out_dim));
        let b = bias.then(|| store.add(format!("{name}.b"), Mat::zeros((1, out_dim))));
        Linear { w, b }
    }

    pub fn forward(&self, f: &mut Forward, x: Var) -> Result<Var> {
        let w = f.p(self.w);
        let y = f.g.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = f.p(b);
                f.g.add_row(y, b)
            }
            None => Ok(y),
        }
    }

    pub fn in_dim(&self, store: &ParamStore) -> usize {
        store.value(self.w).nrows()
    }

    pub fn out_dim(&self, store: &ParamStore) -> usize {
        store.value(self.w).ncols()
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        LayerNorm {
            gamma: store.add(format!("{name}.gamma"), Mat::ones((1, d))),
            beta: store.add(format!("{name}.beta"), Mat::zeros((1, d))),
        }
    }

    pub fn forward(&self, f: &mut Forward, x: Var) -> Result<Var> {
        let (gamma, beta) = (f.p(self.gamma), f.p(self.beta));
        f.g.layer_norm(x, gamma, beta)
    }
}

/// Multi-head attention with bias-free query/key/value projections and a
/// biased output projection.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
}

/// Output of [`MultiHeadAttention::forward`].
pub struct AttentionOutput {
    pub out: Var,
    /// The fused attention node; its saved probabilities are the per-head
    /// scores, see [`Graph::attention_probs`].
    pub scores: Var,
}

impl MultiHeadAttention {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if heads == 0 || d % heads != 0 {
            return Err(PigError::Config(format!(
                "{name}: width {d} is not divisible by {heads} heads"
            )));
        }
        Ok(MultiHeadAttention {
            wq: Linear::new(store, &format!("{name}.q"), d, d, false, rng),
            wk: Linear::new(store, &format!("{name}.k"), d, d, false, rng),
            wv: Linear::new(store, &format!("{name}.v"), d, d, false, rng),
            wo: Linear::new(store, &format!("{name}.o"), d, d, true, rng),
            heads,
        })
    }

    pub fn scale(&self, d: usize) -> f64 {
        1.0 / ((d / self.heads) as f64).sqrt()
    }

    /// Queries from `q_in`, keys and values from `kv_in`, with segment `i` of
    /// the queries attending to segment `i` of the keys.
    pub fn forward(
        &self,
        f: &mut Forward,
        q_in: Var,
        kv_in: Var,
        q_segments: Vec<Segment>,
        k_segments: Vec<Segment>,
        causal: bool,
    ) -> Result<AttentionOutput> {
        let d = f.g.shape(q_in).1;
        let q = self.wq.forward(f, q_in)?;
        let k = self.wk.forward(f, kv_in)?;
        let v = self.wv.forward(f, kv_in)?;
        let spec = AttentionSpec {
            heads: self.heads,
            scale: self.scale(d),
            causal,
            q_segments,
            k_segments,
        };
        let scores = f.g.attention(q, k, v, spec)?;
        let out = self.wo.forward(f, scores)?;
        Ok(AttentionOutput { out, scores })
    }

    /// Copies of the query and key projection matrices, split per head on
    /// demand by the caller.
    pub fn head_projections(&self, store: &ParamStore) -> HeadProjections {
        HeadProjections {
            w_q: store.value(self.wq.w).clone(),
            w_k: store.value(self.wk.w).clone(),
            heads: self.heads,
        }
    }
}

/// Query/key projections of one attention layer, `d × d` each; head `h` owns
/// columns `h·d/heads .. (h+1)·d/heads`.
#[derive(Clone, Debug)]
pub struct HeadProjections {
    pub w_q: Mat,
    pub w_k: Mat,
    pub heads: usize,
}

impl HeadProjections {
    pub fn head_dim(&self) -> usize {
        self.w_q.ncols() / self.heads
    }

    pub fn w_q_head(&self, h: usize) -> ndarray::ArrayView2<'_, f64> {
        let dh = self.head_dim();
        self.w_q.slice(s![.., h * dh..(h + 1) * dh])
    }

    pub fn w_k_head(&self, h: usize) -> ndarray::ArrayView2<'_, f64> {
        let dh = self.head_dim();
        self.w_k.slice(s![.., h * dh..(h + 1) * dh])
    }
}

/// Pre-LN transformer block: `x + attn(ln1(x))`, then `x + mlp(ln2(x))`.
#[derive(Clone, Debug)]
pub struct Block {
    pub ln1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

pub struct BlockOutput {
    pub out: Var,
    /// `ln1(x)`, the input the attention projections see.
    pub normed: Var,
    pub attention: Var,
}

impl Block {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        heads: usize,
        mlp_ratio: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Block {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), d),
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), d, heads, rng)?,
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), d),
            fc1: Linear::new(store, &format!("{name}.fc1"), d, d * mlp_ratio, true, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), d * mlp_ratio, d, true, rng),
        })
    }

    pub fn forward(
        &self,
        f: &mut Forward,
        x: Var,
        segments: &[Segment],
        causal: bool,
    ) -> Result<BlockOutput> {
        let normed = self.ln1.forward(f, x)?;
        let attn = self.attn.forward(
            f,
            normed,
            normed,
            segments.to_vec(),
            segments.to_vec(),
            causal,
        )?;
        let x = f.g.add(x, attn.out)?;
        let h = self.ln2.forward(f, x)?;
        let h = self.fc1.forward(f, h)?;
        let h = f.g.quick_gelu(h);
        let h = self.fc2.forward(f, h)?;
        let out = f.g.add(x, h)?;
        Ok(BlockOutput {
            out,
            normed,
            attention: attn.scores,
        })
    }
}

#[derive(Clone, Debug)]
pub struct Transformer {
    pub blocks: Vec<Block>,
    pub causal: bool,
}

impl Transformer {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        depth: usize,
        d: usize,
        heads: usize,
        mlp_ratio: usize,
        causal: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if depth == 0 {
            return Err(PigError::Config(format!("{name}: depth must be at least 1")));
        }
        let blocks = (0..depth)
            .map(|i| Block::new(store, &format!("{name}.{i}"), d, heads, mlp_ratio, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Transformer { blocks, causal })
    }

    /// Runs every block; returns the final hidden state together with the
    /// last block's normalized input and attention node.
    pub fn forward(&self, f: &mut Forward, x: Var, segments: &[Segment]) -> Result<BlockOutput> {
        let mut x = x;
        let mut last = None;
        for block in &self.blocks {
            let out = block.forward(f, x, segments, self.causal)?;
            x = out.out;
            last = Some(out);
        }
        Ok(last.expect("depth >= 1"))
    }

    pub fn last(&self) -> &Block {
        self.blocks.last().expect("depth >= 1")
    }
}
