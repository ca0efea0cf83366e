//! The full retrieval model: encoders, token selector, pseudo-query
//! generator, fusioner and the learnable temperature, all in one parameter
//! store.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Mat, Var};
use crate::config::ModelConfig;
use crate::data::{RawText, RawVideo};
use crate::encoders::{TextEncoder, VideoBatch, VideoEncoder, VIDEO_TOKENS};
use crate::error::Result;
use crate::fusioner::Fusioner;
use crate::generator::PseudoQueryGenerator;
use crate::its;
use crate::nn::{Forward, ParamId, ParamStore};

/// Parameter-name prefixes of each component, used for freezing.
pub const GENERATOR_PREFIX: &str = "generator.";

#[derive(Clone, Debug)]
pub struct PigModel {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub video: VideoEncoder,
    pub text: TextEncoder,
    pub generator: PseudoQueryGenerator,
    pub fusioner: Fusioner,
    pub log_tau: ParamId,
}

/// Everything the video side produces for a batch, on the tape.
pub struct VideoForward {
    pub encoded: VideoBatch,
    /// Flattened patch indices selected per video, in selection order.
    pub selected: Vec<Vec<usize>>,
    /// `(B·k) × d` selected patch tokens.
    pub x_ip: Var,
    /// `B × d` pseudo-queries.
    pub t_p: Var,
    /// `B × d` fused video representations (not normalized).
    pub v: Var,
}

/// Plain-value intermediate results for one video.
#[derive(Clone, Debug)]
pub struct VideoTrace {
    pub x_v: Mat,
    pub x_f: Mat,
    pub x_ip: Mat,
    pub selected: Vec<(usize, usize)>,
    pub scores: Mat,
    pub t_p: Mat,
    pub v: Mat,
}

impl PigModel {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let video = VideoEncoder::new(&mut store, cfg, &mut rng)?;
        let text = TextEncoder::new(&mut store, cfg, &mut rng)?;
        let generator = PseudoQueryGenerator::new(&mut store, cfg, &mut rng)?;
        let fusioner = Fusioner::new(&mut store, cfg, &mut rng)?;
        let log_tau = store.add("log_tau", Mat::from_elem((1, 1), 50f64.ln()));
        Ok(PigModel {
            cfg: cfg.clone(),
            store,
            video,
            text,
            generator,
            fusioner,
            log_tau,
        })
    }

    pub fn tau(&self) -> f64 {
        self.store.value(self.log_tau)[[0, 0]].exp()
    }

    /// Sets the temperature, e.g. before training.
    pub fn set_tau(&mut self, tau: f64) {
        self.store.value_mut(self.log_tau)[[0, 0]] = tau.ln();
    }

    /// Caps the temperature at `max`.
    pub fn clamp_tau(&mut self, max: f64) {
        let v = &mut self.store.value_mut(self.log_tau)[[0, 0]];
        *v = v.min(max.ln());
    }

    /// `1 × 1` temperature node, `exp(log_tau)`.
    pub fn tau_node(&self, f: &mut Forward) -> Var {
        let l = f.p(self.log_tau);
        f.g.exp(l)
    }

    pub fn text_forward(&self, f: &mut Forward, texts: &[&RawText]) -> Result<Var> {
        self.text.forward(f, texts)
    }

    /// Generator content rows for each sample in a batch, built from
    /// already-computed multi-grained tokens.
    pub fn generator_content(
        &self,
        f: &mut Forward,
        x_v: Var,
        x_f: Var,
        x_ip: Var,
        batch: usize,
    ) -> Result<Var> {
        let (m, k) = (self.cfg.frames, self.cfg.top_k);
        let input = self.cfg.generator_input;
        let mut parts = Vec::with_capacity(3 * batch);
        for i in 0..batch {
            parts.push(f.g.slice_rows(x_v, i * VIDEO_TOKENS, VIDEO_TOKENS)?);
            if input.uses_frames() {
                parts.push(f.g.slice_rows(x_f, i * m, m)?);
            }
            if input.uses_patches() {
                parts.push(f.g.slice_rows(x_ip, i * k, k)?);
            }
        }
        f.g.concat_rows(&parts)
    }

    /// Stacked `[x_v; x_f]` fusion keys for each sample.
    pub fn fusion_keys(&self, f: &mut Forward, x_v: Var, x_f: Var, batch: usize) -> Result<Var> {
        let m = self.cfg.frames;
        let mut parts = Vec::with_capacity(2 * batch);
        for i in 0..batch {
            parts.push(f.g.slice_rows(x_v, i * VIDEO_TOKENS, VIDEO_TOKENS)?);
            parts.push(f.g.slice_rows(x_f, i * m, m)?);
        }
        f.g.concat_rows(&parts)
    }

    /// Selects the top-k patches of each encoded video and gathers them.
    pub fn select_patches(
        &self,
        f: &mut Forward,
        encoded: &VideoBatch,
    ) -> Result<(Vec<Vec<usize>>, Var)> {
        let mn = self.cfg.frames * self.cfg.patches;
        let mut selected = Vec::with_capacity(encoded.batch);
        let mut rows = Vec::with_capacity(encoded.batch * self.cfg.top_k);
        for (i, s) in encoded.informativeness.iter().enumerate() {
            let idx = its::top_k_indices(s, self.cfg.top_k)?;
            rows.extend(idx.iter().map(|&j| i * mn + j));
            selected.push(idx);
        }
        let x_ip = f.g.gather_rows(encoded.x_p, &rows)?;
        Ok((selected, x_ip))
    }

    /// The full video side: encode, select, generate, fuse.
    pub fn video_forward(&self, f: &mut Forward, videos: &[&RawVideo]) -> Result<VideoForward> {
        let encoded = self.video.forward(f, videos)?;
        let b = encoded.batch;
        let (selected, x_ip) = self.select_patches(f, &encoded)?;
        let content = self.generator_content(f, encoded.x_v, encoded.x_f, x_ip, b)?;
        let t_p = self.generator.forward(f, content, b)?.t_p;
        let keys = self.fusion_keys(f, encoded.x_v, encoded.x_f, b)?;
        let v = self.fusioner.forward(f, t_p, keys)?.v;
        Ok(VideoForward {
            encoded,
            selected,
            x_ip,
            t_p,
            v,
        })
    }

    /// Video representations `v` (`B × d`, not normalized) without a tape
    /// that records gradients.
    pub fn represent_videos(&self, videos: &[&RawVideo]) -> Result<Mat> {
        let mut f = Forward::inference(&self.store);
        let out = self.video_forward(&mut f, videos)?;
        Ok(f.value(out.v).clone())
    }

    /// Pseudo-queries `t_p` (`B × d`).
    pub fn pseudo_queries(&self, videos: &[&RawVideo]) -> Result<Mat> {
        let mut f = Forward::inference(&self.store);
        let out = self.video_forward(&mut f, videos)?;
        Ok(f.value(out.t_p).clone())
    }

    /// Text features `t` (`B × d`).
    pub fn encode_texts(&self, texts: &[&RawText]) -> Result<Mat> {
        let mut f = Forward::inference(&self.store);
        let t = self.text.forward(&mut f, texts)?;
        Ok(f.value(t).clone())
    }

    /// Every intermediate for one video.
    pub fn trace_video(&self, video: &RawVideo) -> Result<VideoTrace> {
        let mut f = Forward::inference(&self.store);
        let out = self.video_forward(&mut f, &[video])?;
        let patches = self.cfg.patches;
        Ok(VideoTrace {
            x_v: f.value(out.encoded.x_v).clone(),
            x_f: f.value(out.encoded.x_f).clone(),
            x_ip: f.value(out.x_ip).clone(),
            selected: out.selected[0]
                .iter()
                .map(|&j| (j / patches, j % patches))
                .collect(),
            scores: out.encoded.informativeness[0].scores.clone(),
            t_p: f.value(out.t_p).clone(),
            v: f.value(out.v).clone(),
        })
    }

    /// Representation of one video computed step by step through the
    /// single-item component APIs, without batching.
    pub fn represent_video_unbatched(&self, video: &RawVideo) -> Result<ndarray::Array1<f64>> {
        let feats = self.video.encode(&self.store, video)?;
        let sel = its::select_top_k(&feats.informativeness, &feats.x_p, self.cfg.top_k)?;
        let t_p = self
            .generator
            .generate(&self.store, &feats.x_v, &feats.x_f, &sel.x_ip)?;
        let t_p = t_p.insert_axis(ndarray::Axis(0));
        self.fusioner.fuse(&self.store, &t_p, &feats.x_v, &feats.x_f)
    }

    /// Copies the text encoder's weights into the generator.
    pub fn init_generator_from_text(&mut self) {
        self.generator.init_from_text_encoder(&mut self.store, &self.text);
    }
}
