//! Attention pooling of video and frame tokens guided by the pseudo-query.
//!
//! `v' = LN(Attn(q = t_p, k = v = [x_v; x_f]))` with no residual from `t_p`,
//! then `v = LN(FC(v') + v')`.

use rand::Rng;

use crate::autodiff::{Mat, Segment, Var};
use crate::config::ModelConfig;
use crate::encoders::VIDEO_TOKENS;
use crate::error::{PigError, Result};
use crate::nn::{Forward, LayerNorm, Linear, MultiHeadAttention, ParamStore};

#[derive(Clone, Debug)]
pub struct Fusioner {
    pub attn: MultiHeadAttention,
    pub ln_attn: LayerNorm,
    pub fc: Vec<Linear>,
    pub ln_out: LayerNorm,
    pub frames: usize,
    pub d: usize,
}

pub struct FusionOutput {
    /// `B × d` fused video representations.
    pub v: Var,
    /// Fused attention node; per-head weights over the `4 + m` keys.
    pub attention: Var,
}

impl Fusioner {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        let d = cfg.d;
        Ok(Fusioner {
            attn: MultiHeadAttention::new(store, "fusion.attn", d, cfg.fusion_heads, rng)?,
            ln_attn: LayerNorm::new(store, "fusion.ln_attn", d),
            fc: (0..cfg.fc_depth)
                .map(|i| Linear::new(store, &format!("fusion.fc.{i}"), d, d, true, rng))
                .collect(),
            ln_out: LayerNorm::new(store, "fusion.ln_out", d),
            frames: cfg.frames,
            d,
        })
    }

    pub fn keys_per_video(&self) -> usize {
        VIDEO_TOKENS + self.frames
    }

    /// Fuses `B` pseudo-queries (`B × d`) with `B` stacked key blocks
    /// (`(B·(4+m)) × d`, each block `[x_v; x_f]`).
    pub fn forward(&self, f: &mut Forward, t_p: Var, keys: Var) -> Result<FusionOutput> {
        let (b, dq) = f.g.shape(t_p);
        let (rows, dk) = f.g.shape(keys);
        let per = self.keys_per_video();
        if dq != self.d || dk != self.d || rows != b * per || b == 0 {
            return Err(PigError::Input(format!(
                "fusioner expects B × {d} queries and B·{per} × {d} keys, got {b} × {dq} and {rows} × {dk}",
                d = self.d
            )));
        }
        let attn = self.attn.forward(
            f,
            t_p,
            keys,
            Segment::uniform(b, 1),
            Segment::uniform(b, per),
            false,
        )?;
        let v_prime = self.ln_attn.forward(f, attn.out)?;
        let mut h = v_prime;
        for (i, fc) in self.fc.iter().enumerate() {
            if i > 0 {
                h = f.g.quick_gelu(h);
            }
            h = fc.forward(f, h)?;
        }
        let h = f.g.add(h, v_prime)?;
        let v = self.ln_out.forward(f, h)?;
        Ok(FusionOutput {
            v,
            attention: attn.scores,
        })
    }

    /// Fuses one video outside of training.
    pub fn fuse(&self, store: &ParamStore, t_p: &Mat, x_v: &Mat, x_f: &Mat) -> Result<ndarray::Array1<f64>> {
        if x_v.nrows() != VIDEO_TOKENS || x_f.nrows() != self.frames {
            return Err(PigError::Input(format!(
                "fusioner expects {VIDEO_TOKENS} video and {} frame rows, got {} and {}",
                self.frames,
                x_v.nrows(),
                x_f.nrows()
            )));
        }
        if x_v.ncols() != x_f.ncols() {
            return Err(PigError::Input("x_v and x_f widths differ".into()));
        }
        let keys = ndarray::concatenate(ndarray::Axis(0), &[x_v.view(), x_f.view()])
            .expect("equal widths");
        let mut f = Forward::inference(store);
        let q = f.constant(t_p.clone());
        let k = f.constant(keys);
        let out = self.forward(&mut f, q, k)?;
        Ok(f.value(out.v).row(0).to_owned())
    }
}
