//! Checkpoint files: the run configuration, every parameter, the optimizer
//! moments, the step counter and the RNG position, stored in the blob
//! container under the `PIGC` magic.

use std::path::Path;

use rand_chacha::ChaCha8Rng;

use crate::autodiff::Mat;
use crate::blob::{Blob, BlobFile};
use crate::config::{hash_text, RunConfig};
use crate::error::{PigError, Result};
use crate::model::PigModel;
use crate::optim::Adam;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"PIGC";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Serializable position of a ChaCha stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }

    fn to_words(self) -> Vec<u64> {
        let mut words: Vec<u64> = self
            .seed
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        words.push(self.stream);
        words.push(self.word_pos as u64);
        words.push((self.word_pos >> 64) as u64);
        words
    }

    fn from_words(words: &[u64]) -> Result<Self> {
        let [s0, s1, s2, s3, stream, lo, hi] = words else {
            return Err(PigError::Format("rng blob must hold 7 words".into()));
        };
        let mut seed = [0u8; 32];
        for (chunk, w) in seed.chunks_exact_mut(8).zip([s0, s1, s2, s3]) {
            chunk.copy_from_slice(&w.to_le_bytes());
        }
        Ok(RngState {
            seed,
            stream: *stream,
            word_pos: (u128::from(*hi) << 64) | u128::from(*lo),
        })
    }
}

/// A complete training snapshot.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub model: PigModel,
    pub optimizer: Adam,
    /// Optimizer steps taken across all stages.
    pub step: u64,
    /// Last completed training stage (0 before any training).
    pub stage: u64,
    pub rng: RngState,
}

impl Checkpoint {
    pub fn config_hash(&self) -> u64 {
        self.config.hash()
    }

    pub fn to_blob_file(&self) -> BlobFile {
        let mut f = BlobFile::new(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, self.config_hash());
        f.push(Blob::text("config", &self.config.to_text()));
        f.push(Blob::u64s("step", vec![self.step]));
        f.push(Blob::u64s("stage", vec![self.stage]));
        f.push(Blob::u64s("rng", self.rng.to_words()));
        let o = &self.optimizer;
        f.push(Blob::f64s("adam.hyper", vec![o.lr, o.beta1, o.beta2, o.eps]));
        f.push(Blob::u64s("adam.step", vec![o.step]));
        for (id, p) in self.model.store.iter() {
            f.push(Blob::matrix(format!("param.{}", p.name), &p.value));
            f.push(Blob::matrix(format!("adam.m.{}", p.name), &o.m[id.index()]));
            f.push(Blob::matrix(format!("adam.v.{}", p.name), &o.v[id.index()]));
        }
        f
    }

    pub fn from_blob_file(f: &BlobFile) -> Result<Self> {
        let text = f.get("config")?.as_text()?;
        if hash_text(text) != f.config_hash {
            return Err(PigError::Format("checkpoint config hash mismatch".into()));
        }
        let config = RunConfig::parse_text(text)?;
        config.validate()?;
        let mut model = PigModel::new(&config.model, config.train.seed)?;
        let hyper = f.get("adam.hyper")?.as_f64s()?;
        let [lr, beta1, beta2, eps] = hyper else {
            return Err(PigError::Format("adam.hyper must hold 4 values".into()));
        };
        let mut optimizer = Adam::new(&model.store, *lr, *beta1, *beta2, *eps);
        optimizer.step = single(f, "adam.step")?;
        let ids: Vec<_> = model.store.ids().collect();
        for id in ids {
            let name = model.store.get(id).name.clone();
            let read = |prefix: &str| -> Result<Mat> {
                let m = f.get(&format!("{prefix}{name}"))?.to_matrix()?;
                Ok(m)
            };
            let value = read("param.")?;
            let expected = model.store.value(id).dim();
            if value.dim() != expected {
                return Err(PigError::Format(format!(
                    "parameter {name} has shape {:?}, model expects {expected:?}",
                    value.dim()
                )));
            }
            optimizer.m[id.index()] = read("adam.m.")?;
            optimizer.v[id.index()] = read("adam.v.")?;
            *model.store.value_mut(id) = value;
        }
        let expected_blobs = 6 + 3 * model.store.len();
        if f.blobs.len() != expected_blobs {
            return Err(PigError::Format(format!(
                "checkpoint has {} blobs, expected {expected_blobs}",
                f.blobs.len()
            )));
        }
        Ok(Checkpoint {
            config,
            model,
            optimizer,
            step: single(f, "step")?,
            stage: single(f, "stage")?,
            rng: RngState::from_words(f.get("rng")?.as_u64s()?)?,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.to_blob_file().to_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::from_blob_file(&BlobFile::from_bytes(bytes, CHECKPOINT_MAGIC, CHECKPOINT_VERSION)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn single(f: &BlobFile, name: &str) -> Result<u64> {
    match f.get(name)?.as_u64s()? {
        [v] => Ok(*v),
        _ => Err(PigError::Format(format!("{name} must hold one value"))),
    }
}

/// SHA-256-derived 64-bit hash of a checkpoint file's bytes.
pub fn file_hash(bytes: &[u8]) -> u64 {
    use sha2::{Digest, Sha256};
    let d = Sha256::digest(bytes);
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}
