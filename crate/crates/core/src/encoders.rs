//! Toy video and text encoders with the multi-grained output interface.
//!
//! The video encoder runs full self-attention over
//! `[4 video proxies; one cls per frame; every patch]` and projects all three
//! granularities through a single shared visual projection. The text encoder
//! is a causal transformer over `[bos; tokens; eos; padding]` whose eos output,
//! projected, is the text feature.

use ndarray::{s, Axis};
use rand::Rng;

use crate::autodiff::{Mat, Segment, Var};
use crate::config::ModelConfig;
use crate::data::{RawText, RawVideo};
use crate::error::{PigError, Result};
use crate::its::{self, InformativenessMatrix};
use crate::nn::{token_init, Forward, LayerNorm, Linear, ParamStore, Transformer};

/// Number of video-level proxy tokens.
pub const VIDEO_TOKENS: usize = 4;

const TOKEN_INIT_SCALE: f64 = 0.02;

#[derive(Clone, Debug)]
pub struct VideoEncoder {
    pub patch_embed: Linear,
    pub proxies: crate::nn::ParamId,
    pub frame_cls: crate::nn::ParamId,
    pub temporal_pos: crate::nn::ParamId,
    pub spatial_pos: crate::nn::ParamId,
    pub transformer: Transformer,
    pub ln_post: LayerNorm,
    pub proj: Linear,
    pub frames: usize,
    pub patches: usize,
    pub d_in: usize,
    pub d: usize,
    pub its_scale: f64,
}

/// Encoder output for a stacked batch, still on the tape.
pub struct VideoBatch {
    pub batch: usize,
    /// `(B·4) × d`
    pub x_v: Var,
    /// `(B·m) × d`
    pub x_f: Var,
    /// `(B·m·n) × d`
    pub x_p: Var,
    /// Token-selector scores per video, from the final attention layer.
    pub informativeness: Vec<InformativenessMatrix>,
    /// `B × d` video cls tokens at the input of the final attention layer.
    pub cls_query: Mat,
    /// `(B·L) × d` whole sequences at the input of the final attention layer.
    pub last_layer_input: Mat,
}

/// Plain-value encoder output for one video.
#[derive(Clone, Debug)]
pub struct MultiGrainVideoFeatures {
    /// `4 × d`
    pub x_v: Mat,
    /// `m × d`
    pub x_f: Mat,
    /// `(m·n) × d`, frame-major.
    pub x_p: Mat,
    pub frames: usize,
    pub patches: usize,
    /// `h × (m·n)`: per-head attention of the first proxy over patch tokens.
    pub last_attention: Mat,
    /// `1 × d` first proxy at the input of the final attention layer.
    pub first_video_cls: Mat,
    /// `L × d` token sequence at the input of the final attention layer.
    pub last_layer_input: Mat,
    pub informativeness: InformativenessMatrix,
}

impl MultiGrainVideoFeatures {
    pub fn patch_grid_shape(&self) -> (usize, usize, usize) {
        (self.frames, self.patches, self.x_p.ncols())
    }
}

impl VideoEncoder {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        let d = cfg.d;
        Ok(VideoEncoder {
            patch_embed: Linear::new(store, "video.patch_embed", cfg.d_in, d, true, rng),
            proxies: store.add(
                "video.proxies",
                token_init(rng, VIDEO_TOKENS, d, TOKEN_INIT_SCALE),
            ),
            frame_cls: store.add("video.frame_cls", token_init(rng, 1, d, TOKEN_INIT_SCALE)),
            temporal_pos: store.add(
                "video.temporal_pos",
                token_init(rng, cfg.frames, d, TOKEN_INIT_SCALE),
            ),
            spatial_pos: store.add(
                "video.spatial_pos",
                token_init(rng, cfg.patches, d, TOKEN_INIT_SCALE),
            ),
            transformer: Transformer::new(
                store,
                "video.blocks",
                cfg.encoder_depth,
                d,
                cfg.heads,
                cfg.mlp_ratio,
                false,
                rng,
            )?,
            ln_post: LayerNorm::new(store, "video.ln_post", d),
            proj: Linear::new(store, "video.proj", d, d, false, rng),
            frames: cfg.frames,
            patches: cfg.patches,
            d_in: cfg.d_in,
            d,
            its_scale: its::score_scale(cfg.its_scale, d, cfg.heads, cfg.patches),
        })
    }

    pub fn seq_len(&self) -> usize {
        VIDEO_TOKENS + self.frames + self.frames * self.patches
    }

    fn check(&self, v: &RawVideo) -> Result<()> {
        if v.frames != self.frames || v.patches != self.patches || v.d_in() != self.d_in {
            return Err(PigError::Input(format!(
                "video of {} frames × {} patches × {} does not match encoder {} × {} × {}",
                v.frames,
                v.patches,
                v.d_in(),
                self.frames,
                self.patches,
                self.d_in
            )));
        }
        Ok(())
    }

    /// Encodes a batch of videos into stacked multi-grained features.
    pub fn forward(&self, f: &mut Forward, videos: &[&RawVideo]) -> Result<VideoBatch> {
        if videos.is_empty() {
            return Err(PigError::Input("empty video batch".into()));
        }
        for v in videos {
            self.check(v)?;
        }
        let (m, n, b) = (self.frames, self.patches, videos.len());
        let mn = m * n;
        let len = self.seq_len();

        let views: Vec<_> = videos.iter().map(|v| v.data.view()).collect();
        let raw = ndarray::concatenate(Axis(0), &views).expect("checked widths");
        let raw = f.constant(raw);
        let patches = self.patch_embed.forward(f, raw)?;

        // Patch (i, j) gets temporal position i plus spatial position j.
        let temporal = f.p(self.temporal_pos);
        let spatial = f.p(self.spatial_pos);
        let frame_of_patch: Vec<usize> = (0..mn).map(|r| r / n).collect();
        let t_rows = f.g.gather_rows(temporal, &frame_of_patch)?;
        let s_rows = f.g.tile_rows(spatial, m);
        let patch_pos = f.g.add(t_rows, s_rows)?;
        let patches = f.g.add_tiled(patches, patch_pos)?;

        let cls = f.p(self.frame_cls);
        let cls = f.g.tile_rows(cls, m);
        let frame_tokens = f.g.add(cls, temporal)?;
        let proxies = f.p(self.proxies);

        let mut parts = Vec::with_capacity(3 * b);
        for i in 0..b {
            parts.push(proxies);
            parts.push(frame_tokens);
            parts.push(f.g.slice_rows(patches, i * mn, mn)?);
        }
        let seq = f.g.concat_rows(&parts)?;

        let segments = Segment::uniform(b, len);
        let out = self.transformer.forward(f, seq, &segments)?;
        let hidden = self.ln_post.forward(f, out.out)?;
        let projected = self.proj.forward(f, hidden)?;

        let rows = |offset: usize, count: usize| -> Vec<usize> {
            (0..b)
                .flat_map(|i| (0..count).map(move |r| i * len + offset + r))
                .collect()
        };
        let x_v = f.g.gather_rows(projected, &rows(0, VIDEO_TOKENS))?;
        let x_f = f.g.gather_rows(projected, &rows(VIDEO_TOKENS, m))?;
        let x_p = f.g.gather_rows(projected, &rows(VIDEO_TOKENS + m, mn))?;

        let normed = f.value(out.normed).clone();
        let proj = self
            .transformer
            .last()
            .attn
            .head_projections(f.params());
        let mut informativeness = Vec::with_capacity(b);
        let mut cls_query = Mat::zeros((b, self.d));
        for i in 0..b {
            let cls_row = normed.slice(s![i * len..i * len + 1, ..]);
            let start = i * len + VIDEO_TOKENS + m;
            let patch_rows = normed.slice(s![start..start + mn, ..]);
            informativeness.push(its::informativeness(
                cls_row,
                patch_rows,
                &proj,
                m,
                n,
                self.its_scale,
            )?);
            cls_query.row_mut(i).assign(&cls_row.row(0));
        }

        Ok(VideoBatch {
            batch: b,
            x_v,
            x_f,
            x_p,
            informativeness,
            cls_query,
            last_layer_input: normed,
        })
    }

    /// Encodes one video outside of training.
    pub fn encode(&self, store: &ParamStore, video: &RawVideo) -> Result<MultiGrainVideoFeatures> {
        let mut f = Forward::inference(store);
        let out = self.forward(&mut f, &[video])?;
        let s = out.informativeness.into_iter().next().expect("one video");
        let heads = s.per_head.len();
        let mut last_attention = Mat::zeros((heads, self.frames * self.patches));
        for (h, grid) in s.per_head.iter().enumerate() {
            last_attention
                .row_mut(h)
                .assign(&grid.iter().cloned().collect::<ndarray::Array1<f64>>());
        }
        Ok(MultiGrainVideoFeatures {
            x_v: f.value(out.x_v).clone(),
            x_f: f.value(out.x_f).clone(),
            x_p: f.value(out.x_p).clone(),
            frames: self.frames,
            patches: self.patches,
            last_attention,
            first_video_cls: out.cls_query.slice(s![0..1, ..]).to_owned(),
            last_layer_input: out.last_layer_input,
            informativeness: s,
        })
    }
}

#[derive(Clone, Debug)]
pub struct TextEncoder {
    pub token_embed: Linear,
    pub bos: crate::nn::ParamId,
    pub eos: crate::nn::ParamId,
    pub pos: crate::nn::ParamId,
    pub transformer: Transformer,
    pub ln_final: LayerNorm,
    pub proj: Linear,
    pub max_len: usize,
    pub d_in: usize,
}

impl TextEncoder {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        let d = cfg.d;
        Ok(TextEncoder {
            token_embed: Linear::new(store, "text.token_embed", cfg.d_in, d, true, rng),
            bos: store.add("text.bos", token_init(rng, 1, d, TOKEN_INIT_SCALE)),
            eos: store.add("text.eos", token_init(rng, 1, d, TOKEN_INIT_SCALE)),
            pos: store.add(
                "text.pos",
                token_init(rng, cfg.text_max_len + 2, d, TOKEN_INIT_SCALE),
            ),
            transformer: Transformer::new(
                store,
                "text.blocks",
                cfg.text_depth,
                d,
                cfg.heads,
                cfg.mlp_ratio,
                true,
                rng,
            )?,
            ln_final: LayerNorm::new(store, "text.ln_final", d),
            proj: Linear::new(store, "text.proj", d, d, false, rng),
            max_len: cfg.text_max_len,
            d_in: cfg.d_in,
        })
    }

    /// Context length: bos, up to `max_len` tokens, eos and padding.
    pub fn context_len(&self) -> usize {
        self.max_len + 2
    }

    /// Encodes a batch of texts to `B × d` features.
    pub fn forward(&self, f: &mut Forward, texts: &[&RawText]) -> Result<Var> {
        self.forward_with_trailing(f, texts, None)
    }

    /// Like [`TextEncoder::forward`], but rows after each eos are filled with
    /// `trailing` instead of zeros. The causal mask makes them irrelevant.
    pub fn forward_with_trailing(
        &self,
        f: &mut Forward,
        texts: &[&RawText],
        trailing: Option<&Mat>,
    ) -> Result<Var> {
        if texts.is_empty() {
            return Err(PigError::Input("empty text batch".into()));
        }
        let ctx = self.context_len();
        let d = f.params().value(self.bos).ncols();
        let mut lens = Vec::with_capacity(texts.len());
        let mut token_views = Vec::with_capacity(texts.len());
        for t in texts {
            if t.is_empty() {
                return Err(PigError::Input("empty text".into()));
            }
            if t.tokens.ncols() != self.d_in {
                return Err(PigError::Input(format!(
                    "text tokens are {} wide, encoder expects {}",
                    t.tokens.ncols(),
                    self.d_in
                )));
            }
            let len = if t.len() > self.max_len {
                log::warn!(
                    "text of {} tokens truncated to {}",
                    t.len(),
                    self.max_len
                );
                self.max_len
            } else {
                t.len()
            };
            lens.push(len);
            token_views.push(t.tokens.slice(s![..len, ..]));
        }
        let raw = ndarray::concatenate(Axis(0), &token_views).expect("checked widths");
        let raw = f.constant(raw);
        let embedded = self.token_embed.forward(f, raw)?;

        let bos = f.p(self.bos);
        let eos = f.p(self.eos);
        let mut parts = Vec::with_capacity(4 * texts.len());
        let mut offset = 0;
        let mut eos_rows = Vec::with_capacity(texts.len());
        for (i, &len) in lens.iter().enumerate() {
            parts.push(bos);
            parts.push(f.g.slice_rows(embedded, offset, len)?);
            parts.push(eos);
            let pad = ctx - len - 2;
            if pad > 0 {
                let fill = match trailing {
                    Some(t) => t.slice(s![..pad, ..]).to_owned(),
                    None => Mat::zeros((pad, d)),
                };
                parts.push(f.constant(fill));
            }
            eos_rows.push(i * ctx + len + 1);
            offset += len;
        }
        let seq = f.g.concat_rows(&parts)?;
        let pos = f.p(self.pos);
        let seq = f.g.add_tiled(seq, pos)?;
        let out = self
            .transformer
            .forward(f, seq, &Segment::uniform(texts.len(), ctx))?;
        let eos_out = f.g.gather_rows(out.out, &eos_rows)?;
        let hidden = self.ln_final.forward(f, eos_out)?;
        self.proj.forward(f, hidden)
    }

    /// Encodes one text outside of training.
    pub fn encode(&self, store: &ParamStore, text: &RawText) -> Result<ndarray::Array1<f64>> {
        let mut f = Forward::inference(store);
        let t = self.forward(&mut f, &[text])?;
        Ok(f.value(t).row(0).to_owned())
    }
}
