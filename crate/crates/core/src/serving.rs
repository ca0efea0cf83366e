//! Offline index build, online query and cost accounting.
//!
//! Index file layout, all integers little-endian:
//!
//! ```text
//! "PIGX" | version u32 = 1 | d u32 | N u64 | N × (id u64 | d × f32)
//! ```
//!
//! Build metadata (checkpoint hash, config hash, creation time) lives in a
//! `<index>.meta` text file next to the index so that rebuilding from the
//! same inputs reproduces the index bytes exactly.

use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};

use ndarray::{ArrayView1, Axis};
use rayon::prelude::*;

use crate::autodiff::{Mat, NORM_EPS};
use crate::config::ModelConfig;
use crate::data::{RawText, RawVideo};
use crate::encoders::VIDEO_TOKENS;
use crate::error::{PigError, Result};
use crate::model::PigModel;
use crate::nn::Forward;
use crate::objectives;

pub const INDEX_MAGIC: [u8; 4] = *b"PIGX";
pub const INDEX_VERSION: u32 = 1;

/// Videos or texts encoded per forward pass.
pub const CHUNK: usize = 32;

fn stack(parts: Vec<Mat>, d: usize) -> Mat {
    if parts.is_empty() {
        return Mat::zeros((0, d));
    }
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    ndarray::concatenate(Axis(0), &views).expect("equal widths")
}

/// Fused representations `v` of `videos` (not normalized), computed in
/// parallel chunks. The result does not depend on the thread count.
pub fn video_vectors(model: &PigModel, videos: &[&RawVideo]) -> Result<Mat> {
    let parts = videos
        .par_chunks(CHUNK)
        .map(|c| model.represent_videos(c))
        .collect::<Result<Vec<_>>>()?;
    Ok(stack(parts, model.cfg.d))
}

pub fn pseudo_query_vectors(model: &PigModel, videos: &[&RawVideo]) -> Result<Mat> {
    let parts = videos
        .par_chunks(CHUNK)
        .map(|c| model.pseudo_queries(c))
        .collect::<Result<Vec<_>>>()?;
    Ok(stack(parts, model.cfg.d))
}

pub fn text_vectors(model: &PigModel, texts: &[&RawText]) -> Result<Mat> {
    let parts = texts
        .par_chunks(CHUNK)
        .map(|c| model.encode_texts(c))
        .collect::<Result<Vec<_>>>()?;
    Ok(stack(parts, model.cfg.d))
}

/// First proxy token of each video, the Two-Tower video embedding.
pub fn two_tower_vectors(model: &PigModel, videos: &[&RawVideo]) -> Result<Mat> {
    let parts = videos
        .par_chunks(CHUNK)
        .map(|c| {
            let mut f = Forward::inference(&model.store);
            let enc = model.video.forward(&mut f, c)?;
            let rows: Vec<usize> = (0..c.len()).map(|i| i * VIDEO_TOKENS).collect();
            Ok(f.value(enc.x_v).select(Axis(0), &rows))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(stack(parts, model.cfg.d))
}

/// Immutable gallery of L2-normalized video vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalIndex {
    pub dim: usize,
    pub ids: Vec<u64>,
    /// `N × dim`, row-major.
    pub vectors: Vec<f32>,
}

/// Build provenance stored next to an index file.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IndexMeta {
    pub checkpoint_hash: u64,
    pub config_hash: u64,
    pub created_unix: u64,
    pub entries: u64,
}

impl IndexMeta {
    pub fn path_for(index: &Path) -> PathBuf {
        let mut s = index.as_os_str().to_owned();
        s.push(".meta");
        PathBuf::from(s)
    }

    pub fn to_text(&self) -> String {
        format!(
            "checkpoint_hash = {:016x}\nconfig_hash = {:016x}\ncreated_unix = {}\nentries = {}\n",
            self.checkpoint_hash, self.config_hash, self.created_unix, self.entries
        )
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut fields = std::collections::HashMap::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| PigError::Format(format!("bad index metadata line {line:?}")))?;
            fields.insert(k.trim().to_string(), v.trim().to_string());
        }
        let get = |k: &str| {
            fields
                .get(k)
                .ok_or_else(|| PigError::Format(format!("index metadata lacks {k}")))
        };
        let hex = |k: &str| -> Result<u64> {
            u64::from_str_radix(get(k)?, 16)
                .map_err(|_| PigError::Format(format!("bad hex value for {k}")))
        };
        let dec = |k: &str| -> Result<u64> {
            get(k)?
                .parse()
                .map_err(|_| PigError::Format(format!("bad integer for {k}")))
        };
        Ok(IndexMeta {
            checkpoint_hash: hex("checkpoint_hash")?,
            config_hash: hex("config_hash")?,
            created_unix: dec("created_unix")?,
            entries: dec("entries")?,
        })
    }

    pub fn save(&self, index_path: &Path) -> Result<()> {
        std::fs::write(Self::path_for(index_path), self.to_text())?;
        Ok(())
    }

    pub fn load(index_path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(Self::path_for(index_path))?)
    }
}

impl RetrievalIndex {
    pub fn empty(dim: usize) -> Self {
        RetrievalIndex {
            dim,
            ids: Vec::new(),
            vectors: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn vector(&self, i: usize) -> &[f32] {
        &self.vectors[i * self.dim..(i + 1) * self.dim]
    }

    /// Appends already-normalized vectors; ids must stay unique.
    pub fn from_rows(dim: usize, ids: Vec<u64>, rows: &Mat) -> Result<Self> {
        if rows.dim() != (ids.len(), dim) {
            return Err(PigError::shape(
                "index rows",
                &[rows.nrows(), rows.ncols()],
                &[ids.len(), dim],
            ));
        }
        let mut seen = HashSet::with_capacity(ids.len());
        if let Some(dup) = ids.iter().find(|id| !seen.insert(**id)) {
            return Err(PigError::Data(format!("duplicate video id {dup} in index build")));
        }
        Ok(RetrievalIndex {
            dim,
            ids,
            vectors: rows.iter().map(|&x| x as f32).collect(),
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(20 + self.len() * (8 + 4 * self.dim));
        out.extend_from_slice(&INDEX_MAGIC);
        out.extend_from_slice(&INDEX_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.len() as u64).to_le_bytes());
        for (i, id) in self.ids.iter().enumerate() {
            out.extend_from_slice(&id.to_le_bytes());
            for x in self.vector(i) {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let header = 4 + 4 + 4 + 8;
        if bytes.len() < header {
            return Err(PigError::Format("index file truncated".into()));
        }
        if bytes[..4] != INDEX_MAGIC {
            return Err(PigError::Format("not an index file (bad magic)".into()));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
        let version = u32_at(4);
        if version != INDEX_VERSION {
            return Err(PigError::Format(format!("unsupported index version {version}")));
        }
        let dim = u32_at(8) as usize;
        let n = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes"));
        let record = 8 + 4 * dim as u64;
        let expected = (header as u64).checked_add(n.checked_mul(record).unwrap_or(u64::MAX));
        match expected {
            Some(e) if e == bytes.len() as u64 => {}
            _ => {
                return Err(PigError::Format(format!(
                    "index of {n} × {dim} entries does not match file size {}",
                    bytes.len()
                )))
            }
        }
        let n = n as usize;
        let mut ids = Vec::with_capacity(n);
        let mut vectors = Vec::with_capacity(n * dim);
        for rec in bytes[header..].chunks_exact(record as usize) {
            ids.push(u64::from_le_bytes(rec[..8].try_into().expect("8 bytes")));
            vectors.extend(
                rec[8..]
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))),
            );
        }
        let mut seen = HashSet::with_capacity(n);
        if ids.iter().any(|id| !seen.insert(*id)) {
            return Err(PigError::Format("index contains duplicate ids".into()));
        }
        Ok(RetrievalIndex { dim, ids, vectors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Exact scan: the `min(top, N)` best `(id, score)` pairs by descending
    /// dot product with the normalized query, ties going to the smaller id.
    pub fn query(&self, t: ArrayView1<f64>, top: usize) -> Result<Vec<(u64, f64)>> {
        if t.len() != self.dim {
            return Err(PigError::Input(format!(
                "query has dimension {}, index has {}",
                t.len(),
                self.dim
            )));
        }
        let norm = t.dot(&t).sqrt();
        if !(norm > NORM_EPS) {
            return Err(PigError::Numeric("query vector has zero norm".into()));
        }
        let q: Vec<f64> = t.iter().map(|x| x / norm).collect();
        let mut scored: Vec<(u64, f64)> = self
            .ids
            .iter()
            .enumerate()
            .map(|(i, &id)| {
                let s = self
                    .vector(i)
                    .iter()
                    .zip(&q)
                    .map(|(&v, &q)| f64::from(v) * q)
                    .sum();
                (id, s)
            })
            .collect();
        let order = |a: &(u64, f64), b: &(u64, f64)| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0));
        let top = top.min(scored.len());
        if top == 0 {
            return Ok(Vec::new());
        }
        if top < scored.len() {
            scored.select_nth_unstable_by(top - 1, order);
            scored.truncate(top);
        }
        scored.sort_unstable_by(order);
        Ok(scored)
    }
}

/// Encodes, selects, generates and fuses every video, then stores the
/// normalized representation. Videos are processed in parallel chunks; the
/// result is identical to a serial build.
pub fn build_index(model: &PigModel, videos: &[(u64, &RawVideo)]) -> Result<RetrievalIndex> {
    let mut seen = HashSet::with_capacity(videos.len());
    if let Some((dup, _)) = videos.iter().find(|(id, _)| !seen.insert(*id)) {
        return Err(PigError::Data(format!("duplicate video id {dup} in index build")));
    }
    let raw: Vec<&RawVideo> = videos.iter().map(|(_, v)| *v).collect();
    let v = video_vectors(model, &raw)?;
    let v = objectives::normalize_rows(&v)?;
    RetrievalIndex::from_rows(model.cfg.d, videos.iter().map(|(id, _)| *id).collect(), &v)
}

/// Analytic multiply-accumulate counts (one MAC counts as one FLOP).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FlopsReport {
    /// Per video: patch embedding, encoder transformer, output projection
    /// and token scoring.
    pub offline_video_encode_flops: u64,
    pub offline_generate_flops: u64,
    pub offline_fuse_flops: u64,
    /// Per text query, paid once regardless of gallery size.
    pub online_text_encode_flops: u64,
    /// Per text-video pair at query time.
    pub online_per_matching_flops: u64,
    pub storage_bytes_per_video: u64,
}

/// MACs of `depth` pre-LN transformer blocks over `len` tokens of width `d`,
/// counting full `len × len` attention.
fn transformer_macs(len: u64, d: u64, depth: u64, mlp_ratio: u64) -> u64 {
    let projections = 4 * len * d * d;
    let attention = 2 * len * len * d;
    let mlp = 2 * len * d * mlp_ratio * d;
    depth * (projections + attention + mlp)
}

pub fn account_flops(cfg: &ModelConfig) -> FlopsReport {
    let d = cfg.d as u64;
    let (m, n) = (cfg.frames as u64, cfg.patches as u64);
    let r = cfg.mlp_ratio as u64;
    let video_len = VIDEO_TOKENS as u64 + m + m * n;
    let patch_embed = m * n * cfg.d_in as u64 * d;
    let scoring = d * d + m * n * d * d + m * n * d;
    let video = patch_embed
        + transformer_macs(video_len, d, cfg.encoder_depth as u64, r)
        + video_len * d * d
        + scoring;

    let content = cfg.generator_content_len() as u64;
    let gen_len = content + 2;
    let generate =
        content * d * d + transformer_macs(gen_len, d, cfg.generator_depth as u64, r) + d * d;

    let keys = VIDEO_TOKENS as u64 + m;
    let fuse = d * d + 2 * keys * d * d + 2 * keys * d + d * d + cfg.fc_depth as u64 * d * d;

    let text_len = cfg.text_max_len as u64 + 2;
    let text = text_len * cfg.d_in as u64 * d
        + transformer_macs(text_len, d, cfg.text_depth as u64, r)
        + d * d;
    FlopsReport {
        offline_video_encode_flops: video,
        offline_generate_flops: generate,
        offline_fuse_flops: fuse,
        online_text_encode_flops: text,
        online_per_matching_flops: d,
        storage_bytes_per_video: 4 * d,
    }
}

/// `64`, `0.5K`, `12.3M`: counts below 100 verbatim, otherwise scaled by
/// powers of 1000 to one decimal.
pub fn humanize_count(x: u64) -> String {
    if x < 100 {
        return x.to_string();
    }
    let units = ["K", "M", "G", "T", "P"];
    let mut v = x as f64 / 1000.0;
    let mut i = 0;
    while v >= 999.95 && i + 1 < units.len() {
        v /= 1000.0;
        i += 1;
    }
    format!("{}{}", trim(v), units[i])
}

/// `256 B`, `2 KB`, `1.5 MB` in powers of 1024.
pub fn humanize_bytes(x: u64) -> String {
    if x < 1024 {
        return format!("{x} B");
    }
    let units = ["KB", "MB", "GB", "TB"];
    let mut v = x as f64 / 1024.0;
    let mut i = 0;
    while v >= 1023.95 && i + 1 < units.len() {
        v /= 1024.0;
        i += 1;
    }
    format!("{} {}", trim(v), units[i])
}

fn trim(v: f64) -> String {
    let s = format!("{v:.1}");
    s.strip_suffix(".0").map(str::to_string).unwrap_or(s)
}

impl fmt::Display for FlopsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let rows = [
            ("offline video encode (per video)", self.offline_video_encode_flops),
            ("offline generate (per video)", self.offline_generate_flops),
            ("offline fuse (per video)", self.offline_fuse_flops),
            ("online text encode (per query)", self.online_text_encode_flops),
            ("online per matching (per pair)", self.online_per_matching_flops),
        ];
        writeln!(f, "| quantity | MACs | readable |")?;
        writeln!(f, "|---|---:|---:|")?;
        for (name, v) in rows {
            writeln!(f, "| {name} | {v} | {} |", humanize_count(v))?;
        }
        write!(
            f,
            "| storage per video | {} B | {} |",
            self.storage_bytes_per_video,
            humanize_bytes(self.storage_bytes_per_video)
        )
    }
}
