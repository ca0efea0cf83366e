//! Model, training and run configuration.
//!
//! A run configuration is a flat text file of `section.key = value` lines.
//! Blank lines and `#` comments are ignored and unknown keys are rejected.
//! The canonical rendering (every key, fixed order) is what gets hashed and
//! embedded in output files.

use std::fmt;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::data::SyntheticSpec;
use crate::error::{PigError, Result};

/// Scale applied to the cls-to-patch scores inside the token selector.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ItsScale {
    /// `1/√(d/h)`, the usual per-head scaling.
    PerHead,
    /// `1/√(d/n)` with `n` the patches per frame.
    PerPatchCount,
}

/// Which visual granularities feed the pseudo-query generator.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GeneratorInput {
    Video,
    VideoFrame,
    VideoPatch,
    Full,
}

impl GeneratorInput {
    pub fn uses_frames(self) -> bool {
        matches!(self, GeneratorInput::VideoFrame | GeneratorInput::Full)
    }

    pub fn uses_patches(self) -> bool {
        matches!(self, GeneratorInput::VideoPatch | GeneratorInput::Full)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GeneratorKind {
    Causal,
    Mlp,
    QFormer,
}

macro_rules! keyword_enum {
    ($ty:ty { $($variant:path => $text:literal),+ $(,)? }) => {
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                let s = match self { $($variant => $text),+ };
                f.write_str(s)
            }
        }

        impl FromStr for $ty {
            type Err = PigError;

            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($text => Ok($variant),)+
                    other => Err(PigError::Config(format!(
                        "unknown {} value {other:?}",
                        stringify!($ty)
                    ))),
                }
            }
        }
    };
}

keyword_enum!(ItsScale {
    ItsScale::PerHead => "per_head",
    ItsScale::PerPatchCount => "per_patch_count",
});

keyword_enum!(GeneratorInput {
    GeneratorInput::Video => "video",
    GeneratorInput::VideoFrame => "video_frame",
    GeneratorInput::VideoPatch => "video_patch",
    GeneratorInput::Full => "full",
});

keyword_enum!(GeneratorKind {
    GeneratorKind::Causal => "causal",
    GeneratorKind::Mlp => "mlp",
    GeneratorKind::QFormer => "qformer",
});

/// Architecture dimensions shared by every model component.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Shared cross-modal width `d`.
    pub d: usize,
    pub heads: usize,
    /// Width of synthetic patch and token vectors.
    pub d_in: usize,
    /// Frames per video (`m`).
    pub frames: usize,
    /// Patches per frame (`n`).
    pub patches: usize,
    pub top_k: usize,
    pub text_max_len: usize,
    pub encoder_depth: usize,
    pub text_depth: usize,
    pub generator_depth: usize,
    pub mlp_ratio: usize,
    pub fusion_heads: usize,
    pub fc_depth: usize,
    pub its_scale: ItsScale,
    pub generator_input: GeneratorInput,
    pub generator_kind: GeneratorKind,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d: 64,
            heads: 4,
            d_in: 32,
            frames: 8,
            patches: 16,
            top_k: 8,
            text_max_len: 16,
            encoder_depth: 2,
            text_depth: 2,
            generator_depth: 2,
            mlp_ratio: 4,
            fusion_heads: 1,
            fc_depth: 1,
            its_scale: ItsScale::PerHead,
            generator_input: GeneratorInput::Full,
            generator_kind: GeneratorKind::Causal,
        }
    }
}

impl ModelConfig {
    /// Dimensions of the full-size setup: 512-wide, 12 frames of 7×7
    /// patches, top-16 selection and 50 word tokens.
    pub fn full_scale() -> Self {
        ModelConfig {
            d: 512,
            heads: 8,
            d_in: 768,
            frames: 12,
            patches: 49,
            top_k: 16,
            text_max_len: 50,
            encoder_depth: 12,
            text_depth: 12,
            generator_depth: 12,
            ..ModelConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("model.d", self.d),
            ("model.heads", self.heads),
            ("model.d_in", self.d_in),
            ("model.frames", self.frames),
            ("model.patches", self.patches),
            ("model.top_k", self.top_k),
            ("model.text_max_len", self.text_max_len),
            ("model.encoder_depth", self.encoder_depth),
            ("model.text_depth", self.text_depth),
            ("model.generator_depth", self.generator_depth),
            ("model.mlp_ratio", self.mlp_ratio),
            ("model.fusion_heads", self.fusion_heads),
            ("model.fc_depth", self.fc_depth),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(PigError::Config(format!("{key} must be positive")));
            }
        }
        if self.d < 2 {
            return Err(PigError::Config("model.d must be at least 2".into()));
        }
        for (key, h) in [("model.heads", self.heads), ("model.fusion_heads", self.fusion_heads)] {
            if self.d % h != 0 {
                return Err(PigError::Config(format!(
                    "model.d = {} is not divisible by {key} = {h}",
                    self.d
                )));
            }
        }
        if self.top_k > self.frames * self.patches {
            return Err(PigError::Config(format!(
                "model.top_k = {} exceeds frames × patches = {}",
                self.top_k,
                self.frames * self.patches
            )));
        }
        Ok(())
    }

    /// Tokens seen by the video encoder: 4 video proxies, one cls per frame
    /// and every patch.
    pub fn video_seq_len(&self) -> usize {
        crate::encoders::VIDEO_TOKENS + self.frames + self.frames * self.patches
    }

    /// Content rows fed to the generator, before bos/eos.
    pub fn generator_content_len(&self) -> usize {
        let mut len = crate::encoders::VIDEO_TOKENS;
        if self.generator_input.uses_frames() {
            len += self.frames;
        }
        if self.generator_input.uses_patches() {
            len += self.top_k;
        }
        len
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Two-Tower contrastive warm-up of both encoders, standing in for the
    /// pretrained backbone. Zero disables it.
    pub stage0_steps: usize,
    pub stage0_lr: f64,
    pub stage1_steps: usize,
    pub stage1_lr: f64,
    pub stage2_steps: usize,
    pub stage2_lr: f64,
    pub batch_size: usize,
    pub alpha: f64,
    pub seed: u64,
    /// Evaluate on the validation split every this many stage-2 steps.
    pub eval_every: usize,
    /// Stop stage 2 after this many evaluations without a SumR improvement.
    pub patience: usize,
    pub tau_init: f64,
    pub tau_max: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            stage0_steps: 600,
            stage0_lr: 1e-3,
            stage1_steps: 400,
            stage1_lr: 1e-3,
            stage2_steps: 600,
            stage2_lr: 1e-4,
            batch_size: 32,
            alpha: 2.0,
            seed: 0,
            eval_every: 50,
            patience: 5,
            tau_init: 50.0,
            tau_max: 100.0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

impl TrainConfig {
    /// Learning rates and batch size of the full-size setup.
    pub fn full_scale() -> Self {
        TrainConfig {
            stage1_lr: 9e-5,
            stage2_lr: 1e-6,
            batch_size: 128,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (key, lr) in [
            ("train.stage0_lr", self.stage0_lr),
            ("train.stage1_lr", self.stage1_lr),
            ("train.stage2_lr", self.stage2_lr),
        ] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(PigError::Config(format!("{key} must be positive")));
            }
        }
        if self.batch_size < 2 {
            return Err(PigError::Config(
                "train.batch_size must be at least 2 for in-batch negatives".into(),
            ));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(PigError::Config("train.alpha must be non-negative".into()));
        }
        if !(self.tau_init > 0.0 && self.tau_max >= self.tau_init) {
            return Err(PigError::Config(
                "train.tau_init must be positive and at most train.tau_max".into(),
            ));
        }
        if self.eval_every == 0 {
            return Err(PigError::Config("train.eval_every must be positive".into()));
        }
        Ok(())
    }
}

/// Everything a run needs: data, model and training knobs.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct RunConfig {
    pub data: SyntheticSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| PigError::Config(format!("bad value {value:?} for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(PigError::Config(format!("bad boolean {value:?} for {key}"))),
    }
}

impl RunConfig {
    pub fn full_scale() -> Self {
        let model = ModelConfig::full_scale();
        let data = SyntheticSpec {
            d_in: model.d_in,
            frames: model.frames,
            patches: model.patches,
            text_len: model.text_max_len,
            ..SyntheticSpec::default()
        };
        RunConfig {
            data,
            model,
            train: TrainConfig::full_scale(),
        }
    }

    /// Sets one `section.key` entry.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        let (d, m, t) = (&mut self.data, &mut self.model, &mut self.train);
        match key {
            "data.pairs" => d.pairs = parse(key, value)?,
            "data.z_dim" => d.z_dim = parse(key, value)?,
            "data.d_in" => d.d_in = parse(key, value)?,
            "data.frames" => d.frames = parse(key, value)?,
            "data.patches" => d.patches = parse(key, value)?,
            "data.p_info" => d.p_info = parse(key, value)?,
            "data.text_len" => d.text_len = parse(key, value)?,
            "data.sigma_video" => d.sigma_video = parse(key, value)?,
            "data.sigma_text" => d.sigma_text = parse(key, value)?,
            "data.sigma_patch" => d.sigma_patch = parse(key, value)?,
            "data.drift" => d.drift = parse(key, value)?,
            "data.signal_offset" => d.signal_offset = parse(key, value)?,
            "data.shared_mixing" => d.shared_mixing = parse_bool(key, value)?,
            "data.val_frac" => d.val_frac = parse(key, value)?,
            "data.test_frac" => d.test_frac = parse(key, value)?,
            "data.seed" => d.seed = parse(key, value)?,

            "model.d" => m.d = parse(key, value)?,
            "model.heads" => m.heads = parse(key, value)?,
            "model.d_in" => m.d_in = parse(key, value)?,
            "model.frames" => m.frames = parse(key, value)?,
            "model.patches" => m.patches = parse(key, value)?,
            "model.top_k" => m.top_k = parse(key, value)?,
            "model.text_max_len" => m.text_max_len = parse(key, value)?,
            "model.encoder_depth" => m.encoder_depth = parse(key, value)?,
            "model.text_depth" => m.text_depth = parse(key, value)?,
            "model.generator_depth" => m.generator_depth = parse(key, value)?,
            "model.mlp_ratio" => m.mlp_ratio = parse(key, value)?,
            "model.fusion_heads" => m.fusion_heads = parse(key, value)?,
            "model.fc_depth" => m.fc_depth = parse(key, value)?,
            "model.its_scale" => m.its_scale = value.parse()?,
            "model.generator_input" => m.generator_input = value.parse()?,
            "model.generator_kind" => m.generator_kind = value.parse()?,

            "train.stage0_steps" => t.stage0_steps = parse(key, value)?,
            "train.stage0_lr" => t.stage0_lr = parse(key, value)?,
            "train.stage1_steps" => t.stage1_steps = parse(key, value)?,
            "train.stage1_lr" => t.stage1_lr = parse(key, value)?,
            "train.stage2_steps" => t.stage2_steps = parse(key, value)?,
            "train.stage2_lr" => t.stage2_lr = parse(key, value)?,
            "train.batch_size" => t.batch_size = parse(key, value)?,
            "train.alpha" => t.alpha = parse(key, value)?,
            "train.seed" => t.seed = parse(key, value)?,
            "train.eval_every" => t.eval_every = parse(key, value)?,
            "train.patience" => t.patience = parse(key, value)?,
            "train.tau_init" => t.tau_init = parse(key, value)?,
            "train.tau_max" => t.tau_max = parse(key, value)?,
            "train.beta1" => t.beta1 = parse(key, value)?,
            "train.beta2" => t.beta2 = parse(key, value)?,
            "train.adam_eps" => t.adam_eps = parse(key, value)?,
            _ => return Err(PigError::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Every key with its current value, in canonical order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let (d, m, t) = (&self.data, &self.model, &self.train);
        vec![
            ("data.pairs", d.pairs.to_string()),
            ("data.z_dim", d.z_dim.to_string()),
            ("data.d_in", d.d_in.to_string()),
            ("data.frames", d.frames.to_string()),
            ("data.patches", d.patches.to_string()),
            ("data.p_info", d.p_info.to_string()),
            ("data.text_len", d.text_len.to_string()),
            ("data.sigma_video", d.sigma_video.to_string()),
            ("data.sigma_text", d.sigma_text.to_string()),
            ("data.sigma_patch", d.sigma_patch.to_string()),
            ("data.drift", d.drift.to_string()),
            ("data.signal_offset", d.signal_offset.to_string()),
            ("data.shared_mixing", d.shared_mixing.to_string()),
            ("data.val_frac", d.val_frac.to_string()),
            ("data.test_frac", d.test_frac.to_string()),
            ("data.seed", d.seed.to_string()),
            ("model.d", m.d.to_string()),
            ("model.heads", m.heads.to_string()),
            ("model.d_in", m.d_in.to_string()),
            ("model.frames", m.frames.to_string()),
            ("model.patches", m.patches.to_string()),
            ("model.top_k", m.top_k.to_string()),
            ("model.text_max_len", m.text_max_len.to_string()),
            ("model.encoder_depth", m.encoder_depth.to_string()),
            ("model.text_depth", m.text_depth.to_string()),
            ("model.generator_depth", m.generator_depth.to_string()),
            ("model.mlp_ratio", m.mlp_ratio.to_string()),
            ("model.fusion_heads", m.fusion_heads.to_string()),
            ("model.fc_depth", m.fc_depth.to_string()),
            ("model.its_scale", m.its_scale.to_string()),
            ("model.generator_input", m.generator_input.to_string()),
            ("model.generator_kind", m.generator_kind.to_string()),
            ("train.stage0_steps", t.stage0_steps.to_string()),
            ("train.stage0_lr", t.stage0_lr.to_string()),
            ("train.stage1_steps", t.stage1_steps.to_string()),
            ("train.stage1_lr", t.stage1_lr.to_string()),
            ("train.stage2_steps", t.stage2_steps.to_string()),
            ("train.stage2_lr", t.stage2_lr.to_string()),
            ("train.batch_size", t.batch_size.to_string()),
            ("train.alpha", t.alpha.to_string()),
            ("train.seed", t.seed.to_string()),
            ("train.eval_every", t.eval_every.to_string()),
            ("train.patience", t.patience.to_string()),
            ("train.tau_init", t.tau_init.to_string()),
            ("train.tau_max", t.tau_max.to_string()),
            ("train.beta1", t.beta1.to_string()),
            ("train.beta2", t.beta2.to_string()),
            ("train.adam_eps", t.adam_eps.to_string()),
        ]
    }

    /// Parses a config file body on top of the defaults.
    pub fn parse_text(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                PigError::Config(format!("line {}: expected `key = value`", lineno + 1))
            })?;
            self.set(key.trim(), value)?;
        }
        Ok(())
    }

    /// Applies a `section.key=value` override.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (key, value) = assignment
            .split_once('=')
            .ok_or_else(|| PigError::Usage(format!("override {assignment:?} is not key=value")))?;
        self.set(key.trim(), value)
    }

    /// Canonical text form, one `key = value` per line.
    pub fn to_text(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    /// Data-section subset of [`RunConfig::to_text`].
    pub fn data_text(&self) -> String {
        self.entries()
            .into_iter()
            .filter(|(k, _)| k.starts_with("data."))
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    pub fn hash(&self) -> u64 {
        hash_text(&self.to_text())
    }

    /// Checks cross-section consistency as well as each section.
    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        let pairs = [
            ("d_in", self.data.d_in, self.model.d_in),
            ("frames", self.data.frames, self.model.frames),
            ("patches", self.data.patches, self.model.patches),
        ];
        for (name, data, model) in pairs {
            if data != model {
                return Err(PigError::Config(format!(
                    "data.{name} = {data} does not match model.{name} = {model}"
                )));
            }
        }
        Ok(())
    }
}

/// First eight bytes of SHA-256, little-endian.
pub fn hash_text(text: &str) -> u64 {
    let digest = Sha256::digest(text.as_bytes());
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}
