//! Pseudo-query generator: a causal transformer that reads the visual tokens
//! coarse to fine, `[bos; x_v; x_f; x_ip; eos]`, and emits one text-like
//! embedding from the eos position.

use ndarray::Axis;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Mat, Segment, Var};
use crate::config::{GeneratorInput, GeneratorKind, ModelConfig};
use crate::encoders::{TextEncoder, VIDEO_TOKENS};
use crate::error::{PigError, Result};
use crate::nn::{token_init, Forward, LayerNorm, Linear, ParamId, ParamStore, Transformer};

const INPUT_NOISE: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct PseudoQueryGenerator {
    pub input_proj: Linear,
    pub bos: ParamId,
    pub eos: ParamId,
    pub pos: ParamId,
    pub transformer: Transformer,
    pub ln_final: LayerNorm,
    pub proj: Linear,
    pub input: GeneratorInput,
    pub frames: usize,
    pub top_k: usize,
    pub d: usize,
}

/// Stacked generator output for a batch.
pub struct GeneratorOutput {
    /// `B × d` pseudo-queries.
    pub t_p: Var,
    /// `(B·L) × d` final-layer hidden states for every position.
    pub hidden: Var,
    pub seq_len: usize,
}

impl PseudoQueryGenerator {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        if cfg.generator_kind != GeneratorKind::Causal {
            return Err(PigError::Config(format!(
                "generator kind {} is not implemented; use causal",
                cfg.generator_kind
            )));
        }
        let d = cfg.d;
        let input_proj = Linear::new(store, "generator.input_proj", d, d, true, rng);
        let noise = Normal::new(0.0, INPUT_NOISE).expect("valid normal");
        let w = Mat::from_shape_fn((d, d), |(i, j)| {
            f64::from(u8::from(i == j)) + noise.sample(rng)
        });
        *store.value_mut(input_proj.w) = w;
        let content = cfg.generator_content_len();
        Ok(PseudoQueryGenerator {
            input_proj,
            bos: store.add("generator.bos", token_init(rng, 1, d, 0.02)),
            eos: store.add("generator.eos", token_init(rng, 1, d, 0.02)),
            pos: store.add("generator.pos", token_init(rng, content + 2, d, 0.02)),
            transformer: Transformer::new(
                store,
                "generator.blocks",
                cfg.generator_depth,
                d,
                cfg.heads,
                cfg.mlp_ratio,
                true,
                rng,
            )?,
            ln_final: LayerNorm::new(store, "generator.ln_final", d),
            proj: Linear::new(store, "generator.proj", d, d, false, rng),
            input: cfg.generator_input,
            frames: cfg.frames,
            top_k: cfg.top_k,
            d,
        })
    }

    /// Content rows per sample, before bos/eos.
    pub fn content_len(&self) -> usize {
        let mut len = VIDEO_TOKENS;
        if self.input.uses_frames() {
            len += self.frames;
        }
        if self.input.uses_patches() {
            len += self.top_k;
        }
        len
    }

    pub fn seq_len(&self) -> usize {
        self.content_len() + 2
    }

    /// Copies the shared-architecture weights of a trained text encoder:
    /// transformer blocks (as many as both have), final norm, output
    /// projection and the bos/eos tokens.
    pub fn init_from_text_encoder(&self, store: &mut ParamStore, text: &TextEncoder) {
        let mut pairs = vec![
            (self.ln_final.gamma, text.ln_final.gamma),
            (self.ln_final.beta, text.ln_final.beta),
            (self.proj.w, text.proj.w),
            (self.bos, text.bos),
            (self.eos, text.eos),
        ];
        for (gb, tb) in self.transformer.blocks.iter().zip(&text.transformer.blocks) {
            pairs.extend([
                (gb.ln1.gamma, tb.ln1.gamma),
                (gb.ln1.beta, tb.ln1.beta),
                (gb.ln2.gamma, tb.ln2.gamma),
                (gb.ln2.beta, tb.ln2.beta),
                (gb.attn.wq.w, tb.attn.wq.w),
                (gb.attn.wk.w, tb.attn.wk.w),
                (gb.attn.wv.w, tb.attn.wv.w),
                (gb.attn.wo.w, tb.attn.wo.w),
                (gb.fc1.w, tb.fc1.w),
                (gb.fc2.w, tb.fc2.w),
            ]);
            for (g, t) in [
                (gb.attn.wo.b, tb.attn.wo.b),
                (gb.fc1.b, tb.fc1.b),
                (gb.fc2.b, tb.fc2.b),
            ] {
                if let (Some(g), Some(t)) = (g, t) {
                    pairs.push((g, t));
                }
            }
        }
        for (dst, src) in pairs {
            let value = store.value(src).clone();
            *store.value_mut(dst) = value;
        }
    }

    /// Runs the generator on `B` stacked content blocks of
    /// [`PseudoQueryGenerator::content_len`] rows each.
    pub fn forward(&self, f: &mut Forward, content: Var, batch: usize) -> Result<GeneratorOutput> {
        let content_len = self.content_len();
        let (rows, cols) = f.g.shape(content);
        if rows != batch * content_len || cols != self.d || batch == 0 {
            return Err(PigError::Input(format!(
                "generator expects {batch} × {content_len} rows of width {}, got {rows} × {cols}",
                self.d
            )));
        }
        let projected = self.input_proj.forward(f, content)?;
        let bos = f.p(self.bos);
        let eos = f.p(self.eos);
        let mut parts = Vec::with_capacity(3 * batch);
        for i in 0..batch {
            parts.push(bos);
            parts.push(f.g.slice_rows(projected, i * content_len, content_len)?);
            parts.push(eos);
        }
        let seq = f.g.concat_rows(&parts)?;
        let pos = f.p(self.pos);
        let seq = f.g.add_tiled(seq, pos)?;
        let len = self.seq_len();
        let out = self.transformer.forward(f, seq, &Segment::uniform(batch, len))?;
        let eos_rows: Vec<usize> = (0..batch).map(|i| i * len + len - 1).collect();
        let eos_out = f.g.gather_rows(out.out, &eos_rows)?;
        let hidden = self.ln_final.forward(f, eos_out)?;
        let t_p = self.proj.forward(f, hidden)?;
        Ok(GeneratorOutput {
            t_p,
            hidden: out.out,
            seq_len: len,
        })
    }

    /// Assembles the content rows of one sample from plain matrices.
    pub fn content(&self, x_v: &Mat, x_f: &Mat, x_ip: &Mat) -> Result<Mat> {
        let expect = [
            (x_v, VIDEO_TOKENS, "x_v"),
            (x_f, self.frames, "x_f"),
            (x_ip, self.top_k, "x_ip"),
        ];
        for (m, rows, name) in expect {
            if m.dim() != (rows, self.d) {
                return Err(PigError::Input(format!(
                    "{name} is {:?}, expected ({rows}, {})",
                    m.dim(),
                    self.d
                )));
            }
        }
        let mut views = vec![x_v.view()];
        if self.input.uses_frames() {
            views.push(x_f.view());
        }
        if self.input.uses_patches() {
            views.push(x_ip.view());
        }
        Ok(ndarray::concatenate(Axis(0), &views).expect("equal widths"))
    }

    /// Pseudo-query for one video's tokens outside of training.
    pub fn generate(
        &self,
        store: &ParamStore,
        x_v: &Mat,
        x_f: &Mat,
        x_ip: &Mat,
    ) -> Result<ndarray::Array1<f64>> {
        let content = self.content(x_v, x_f, x_ip)?;
        let mut f = Forward::inference(store);
        let c = f.constant(content);
        let out = self.forward(&mut f, c, 1)?;
        Ok(f.value(out.t_p).row(0).to_owned())
    }

    /// Final-layer hidden state at every sequence position for one sample.
    pub fn hidden_states(&self, store: &ParamStore, content: &Mat) -> Result<Mat> {
        let mut f = Forward::inference(store);
        let c = f.constant(content.clone());
        let out = self.forward(&mut f, c, 1)?;
        Ok(f.value(out.hidden).clone())
    }
}
