//! Procedural paired video/text data with planted cross-modal structure.
//!
//! Each pair draws a latent `z`. Text tokens are `A_t·z` plus noise. Every
//! frame hides `p_info` signal patches at random grid positions, each
//! `A_v·z_f + offset` plus noise, where `z_f` is `z` shifted along a fixed
//! drift direction depending on the frame index. All other patches are pure
//! noise. Generation is bit-exact under `(spec, seed)` and each pair draws
//! from its own RNG stream.

use std::path::Path;

use ndarray::{Array1, Array2};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::Mat;
use crate::blob::{Blob, BlobFile};
use crate::config::{hash_text, RunConfig};
use crate::error::{PigError, Result};

pub const DATASET_MAGIC: [u8; 4] = *b"PIGD";
pub const DATASET_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub pairs: usize,
    pub z_dim: usize,
    pub d_in: usize,
    pub frames: usize,
    pub patches: usize,
    /// Signal patches per frame.
    pub p_info: usize,
    /// Tokens per text.
    pub text_len: usize,
    /// Scale of the background (non-informative) patches.
    pub sigma_video: f64,
    pub sigma_text: f64,
    /// Noise added to the signal patches.
    pub sigma_patch: f64,
    /// Total latent shift from the first to the last frame.
    pub drift: f64,
    /// Per-coordinate scale of the fixed vector added to every signal patch.
    pub signal_offset: f64,
    /// Use one mixing matrix for both modalities.
    pub shared_mixing: bool,
    pub val_frac: f64,
    pub test_frac: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            pairs: 2000,
            z_dim: 16,
            d_in: 32,
            frames: 8,
            patches: 16,
            p_info: 2,
            text_len: 8,
            sigma_video: 1.0,
            sigma_text: 0.5,
            sigma_patch: 0.5,
            drift: 1.0,
            signal_offset: 1.0,
            shared_mixing: false,
            val_frac: 0.1,
            test_frac: 0.1,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        for (key, v) in [
            ("data.z_dim", self.z_dim),
            ("data.d_in", self.d_in),
            ("data.frames", self.frames),
            ("data.patches", self.patches),
            ("data.text_len", self.text_len),
        ] {
            if v == 0 {
                return Err(PigError::Config(format!("{key} must be positive")));
            }
        }
        if self.p_info > self.patches {
            return Err(PigError::Config(format!(
                "data.p_info = {} exceeds data.patches = {}",
                self.p_info, self.patches
            )));
        }
        if self.shared_mixing && self.z_dim > self.d_in {
            return Err(PigError::Config(
                "data.z_dim must not exceed data.d_in".into(),
            ));
        }
        for (key, s) in [
            ("data.sigma_video", self.sigma_video),
            ("data.sigma_text", self.sigma_text),
            ("data.sigma_patch", self.sigma_patch),
            ("data.signal_offset", self.signal_offset),
        ] {
            if !(s >= 0.0 && s.is_finite()) {
                return Err(PigError::Config(format!("{key} must be non-negative")));
            }
        }
        let fracs = self.val_frac + self.test_frac;
        if !(self.val_frac >= 0.0 && self.test_frac >= 0.0 && fracs < 1.0) {
            return Err(PigError::Config(
                "data.val_frac + data.test_frac must be in [0, 1)".into(),
            ));
        }
        Ok(())
    }

    /// Pair counts per split: `(train, val, test)`.
    pub fn split_sizes(&self) -> (usize, usize, usize) {
        let test = (self.pairs as f64 * self.test_frac).round() as usize;
        let val = (self.pairs as f64 * self.val_frac).round() as usize;
        let train = self.pairs.saturating_sub(test + val);
        (train, val, test)
    }
}

/// `frames × patches` grid of `d_in`-wide patch vectors, stored flattened
/// frame-major as `(frames·patches) × d_in`.
#[derive(Clone, Debug, PartialEq)]
pub struct RawVideo {
    pub frames: usize,
    pub patches: usize,
    pub data: Mat,
}

impl RawVideo {
    pub fn new(frames: usize, patches: usize, data: Mat) -> Result<Self> {
        if frames == 0 || patches == 0 {
            return Err(PigError::Input("a video needs at least one frame and patch".into()));
        }
        if data.nrows() != frames * patches || data.ncols() == 0 {
            return Err(PigError::Input(format!(
                "video data {:?} does not match {frames} frames × {patches} patches",
                data.dim()
            )));
        }
        Ok(RawVideo {
            frames,
            patches,
            data,
        })
    }

    pub fn d_in(&self) -> usize {
        self.data.ncols()
    }
}

/// A sequence of `d_in`-wide token vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct RawText {
    pub tokens: Mat,
}

impl RawText {
    pub fn new(tokens: Mat) -> Result<Self> {
        if tokens.nrows() == 0 || tokens.ncols() == 0 {
            return Err(PigError::Input("a text needs at least one token".into()));
        }
        Ok(RawText { tokens })
    }

    pub fn len(&self) -> usize {
        self.tokens.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.nrows() == 0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    fn code(self) -> u64 {
        match self {
            Split::Train => 0,
            Split::Val => 1,
            Split::Test => 2,
        }
    }

    fn from_code(c: u64) -> Result<Self> {
        match c {
            0 => Ok(Split::Train),
            1 => Ok(Split::Val),
            2 => Ok(Split::Test),
            _ => Err(PigError::Format(format!("unknown split code {c}"))),
        }
    }
}

impl std::str::FromStr for Split {
    type Err = PigError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(PigError::Usage(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Pair {
    pub id: u64,
    pub split: Split,
    pub video: RawVideo,
    pub text: RawText,
    pub latent: Vec<f64>,
    /// `(frame, patch)` positions of the planted signal patches.
    pub signal: Vec<(usize, usize)>,
}

/// Fixed random structure shared by every pair of a dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct Mixing {
    /// `d_in × z_dim` text mixing matrix.
    pub text: Mat,
    /// `d_in × z_dim` video mixing matrix.
    pub video: Mat,
    /// Unit drift direction in latent space.
    pub drift: Array1<f64>,
    /// Offset added to signal patches.
    pub offset: Array1<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairedDataset {
    pub spec: SyntheticSpec,
    pub mixing: Mixing,
    pub pairs: Vec<Pair>,
}

fn normal_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Mat {
    Array2::from_shape_fn((rows, cols), |_| {
        let x: f64 = StandardNormal.sample(rng);
        x * scale
    })
}

fn normal_vec(rng: &mut ChaCha8Rng, n: usize) -> Array1<f64> {
    Array1::from_shape_fn(n, |_| StandardNormal.sample(rng))
}

/// Generates the dataset described by `spec`.
pub fn generate(spec: &SyntheticSpec) -> Result<PairedDataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mix_scale = 1.0 / (spec.z_dim as f64).sqrt();
    let text = normal_matrix(&mut rng, spec.d_in, spec.z_dim, mix_scale);
    let video = if spec.shared_mixing {
        text.clone()
    } else {
        normal_matrix(&mut rng, spec.d_in, spec.z_dim, mix_scale)
    };
    let mut drift = normal_vec(&mut rng, spec.z_dim);
    let norm = drift.dot(&drift).sqrt().max(1e-12);
    drift /= norm;
    let offset = normal_vec(&mut rng, spec.d_in) * spec.signal_offset;
    let mixing = Mixing {
        text,
        video,
        drift,
        offset,
    };

    let (train, val, _) = spec.split_sizes();
    let pairs = (0..spec.pairs)
        .map(|i| {
            let split = if i < train {
                Split::Train
            } else if i < train + val {
                Split::Val
            } else {
                Split::Test
            };
            generate_pair(spec, &mixing, i as u64, split)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PairedDataset {
        spec: spec.clone(),
        mixing,
        pairs,
    })
}

fn generate_pair(spec: &SyntheticSpec, mix: &Mixing, id: u64, split: Split) -> Result<Pair> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(id + 1);
    let z = normal_vec(&mut rng, spec.z_dim);

    let text_signal = mix.text.dot(&z);
    let mut tokens = Mat::zeros((spec.text_len, spec.d_in));
    for mut row in tokens.rows_mut() {
        let noise = normal_vec(&mut rng, spec.d_in);
        row.assign(&(&text_signal + &(noise * spec.sigma_text)));
    }

    let (m, n) = (spec.frames, spec.patches);
    let mut data = Mat::zeros((m * n, spec.d_in));
    let mut signal = Vec::with_capacity(m * spec.p_info);
    for f in 0..m {
        let shift = if m > 1 {
            spec.drift * (f as f64 / (m - 1) as f64 - 0.5)
        } else {
            0.0
        };
        let zf = &z + &(&mix.drift * shift);
        let patch_signal = mix.video.dot(&zf) + &mix.offset;
        let mut chosen: Vec<usize> = sample(&mut rng, n, spec.p_info).into_vec();
        chosen.sort_unstable();
        for p in 0..n {
            let noise = normal_vec(&mut rng, spec.d_in);
            let row = if chosen.binary_search(&p).is_ok() {
                &patch_signal + &(noise * spec.sigma_patch)
            } else {
                noise * spec.sigma_video
            };
            data.row_mut(f * n + p).assign(&row);
        }
        signal.extend(chosen.into_iter().map(|p| (f, p)));
    }

    Ok(Pair {
        id,
        split,
        video: RawVideo::new(m, n, data)?,
        text: RawText::new(tokens)?,
        latent: z.to_vec(),
        signal,
    })
}

impl PairedDataset {
    pub fn split(&self, split: Split) -> Vec<&Pair> {
        self.pairs.iter().filter(|p| p.split == split).collect()
    }

    pub fn by_id(&self, id: u64) -> Option<&Pair> {
        self.pairs.iter().find(|p| p.id == id)
    }

    fn spec_text(&self) -> String {
        let cfg = RunConfig {
            data: self.spec.clone(),
            ..RunConfig::default()
        };
        cfg.data_text()
    }

    pub fn config_hash(&self) -> u64 {
        hash_text(&self.spec_text())
    }

    pub fn to_blob_file(&self) -> BlobFile {
        let mut f = BlobFile::new(DATASET_MAGIC, DATASET_VERSION, self.config_hash());
        f.push(Blob::text("spec", &self.spec_text()));
        f.push(Blob::matrix("mixing.text", &self.mixing.text));
        f.push(Blob::matrix("mixing.video", &self.mixing.video));
        f.push(Blob::f64s("mixing.drift", self.mixing.drift.to_vec()));
        f.push(Blob::f64s("mixing.offset", self.mixing.offset.to_vec()));
        for (i, p) in self.pairs.iter().enumerate() {
            f.push(Blob::u64s(
                format!("pair.{i}.meta"),
                vec![
                    p.id,
                    p.split.code(),
                    p.video.frames as u64,
                    p.video.patches as u64,
                ],
            ));
            f.push(Blob::matrix(format!("pair.{i}.video"), &p.video.data));
            f.push(Blob::matrix(format!("pair.{i}.text"), &p.text.tokens));
            f.push(Blob::f64s(format!("pair.{i}.latent"), p.latent.clone()));
            f.push(Blob::u64s(
                format!("pair.{i}.signal"),
                p.signal
                    .iter()
                    .flat_map(|&(fr, pa)| [fr as u64, pa as u64])
                    .collect(),
            ));
        }
        f
    }

    pub fn from_blob_file(f: &BlobFile) -> Result<Self> {
        let spec_text = f.get("spec")?.as_text()?;
        let cfg = RunConfig::parse_text(spec_text)?;
        let spec = cfg.data;
        let mixing = Mixing {
            text: f.get("mixing.text")?.to_matrix()?,
            video: f.get("mixing.video")?.to_matrix()?,
            drift: Array1::from(f.get("mixing.drift")?.as_f64s()?.to_vec()),
            offset: Array1::from(f.get("mixing.offset")?.as_f64s()?.to_vec()),
        };
        let mut pairs = Vec::with_capacity(spec.pairs);
        for i in 0..spec.pairs {
            let meta = f.get(&format!("pair.{i}.meta"))?.as_u64s()?;
            let [id, split, frames, patches] = meta else {
                return Err(PigError::Format(format!("pair {i}: bad meta blob")));
            };
            let signal = f.get(&format!("pair.{i}.signal"))?.as_u64s()?;
            pairs.push(Pair {
                id: *id,
                split: Split::from_code(*split)?,
                video: RawVideo::new(
                    *frames as usize,
                    *patches as usize,
                    f.get(&format!("pair.{i}.video"))?.to_matrix()?,
                )
                .map_err(|e| PigError::Format(e.to_string()))?,
                text: RawText::new(f.get(&format!("pair.{i}.text"))?.to_matrix()?)
                    .map_err(|e| PigError::Format(e.to_string()))?,
                latent: f.get(&format!("pair.{i}.latent"))?.as_f64s()?.to_vec(),
                signal: signal
                    .chunks_exact(2)
                    .map(|c| (c[0] as usize, c[1] as usize))
                    .collect(),
            });
        }
        let ds = PairedDataset {
            spec,
            mixing,
            pairs,
        };
        if ds.config_hash() != f.config_hash {
            return Err(PigError::Format("dataset config hash mismatch".into()));
        }
        Ok(ds)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.to_blob_file().write_to(&mut w)?;
        use std::io::Write;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
        let f = BlobFile::read_from(&mut r, DATASET_MAGIC, DATASET_VERSION)?;
        Self::from_blob_file(&f)
    }
}
