//! Versioned container of named blobs, shared by checkpoints and datasets.
//!
//! ```text
//! magic        4 bytes
//! version      u32
//! config_hash  u64
//! blob_count   u64
//! blob*        name_len u32 | name utf-8 | dtype u8 | ndim u32 | dims u64* | payload
//! ```
//!
//! All integers and floats are little-endian. `dtype` is 0 for `f64`, 1 for
//! `u64` and 2 for raw bytes.

use std::io::{Read, Write};

use crate::autodiff::Mat;
use crate::error::{PigError, Result};

#[derive(Clone, Debug, PartialEq)]
pub enum BlobData {
    F64(Vec<f64>),
    U64(Vec<u64>),
    Bytes(Vec<u8>),
}

impl BlobData {
    fn dtype(&self) -> u8 {
        match self {
            BlobData::F64(_) => 0,
            BlobData::U64(_) => 1,
            BlobData::Bytes(_) => 2,
        }
    }

    fn len(&self) -> usize {
        match self {
            BlobData::F64(v) => v.len(),
            BlobData::U64(v) => v.len(),
            BlobData::Bytes(v) => v.len(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Blob {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: BlobData,
}

impl Blob {
    pub fn matrix(name: impl Into<String>, m: &Mat) -> Self {
        Blob {
            name: name.into(),
            shape: vec![m.nrows(), m.ncols()],
            data: BlobData::F64(m.iter().cloned().collect()),
        }
    }

    pub fn u64s(name: impl Into<String>, values: Vec<u64>) -> Self {
        Blob {
            name: name.into(),
            shape: vec![values.len()],
            data: BlobData::U64(values),
        }
    }

    pub fn f64s(name: impl Into<String>, values: Vec<f64>) -> Self {
        Blob {
            name: name.into(),
            shape: vec![values.len()],
            data: BlobData::F64(values),
        }
    }

    pub fn text(name: impl Into<String>, text: &str) -> Self {
        Blob {
            name: name.into(),
            shape: vec![text.len()],
            data: BlobData::Bytes(text.as_bytes().to_vec()),
        }
    }

    pub fn to_matrix(&self) -> Result<Mat> {
        match (&self.data, self.shape.as_slice()) {
            (BlobData::F64(v), [r, c]) => Mat::from_shape_vec((*r, *c), v.clone())
                .map_err(|e| PigError::Format(format!("blob {}: {e}", self.name))),
            _ => Err(PigError::Format(format!(
                "blob {} is not an f64 matrix",
                self.name
            ))),
        }
    }

    pub fn as_u64s(&self) -> Result<&[u64]> {
        match &self.data {
            BlobData::U64(v) => Ok(v),
            _ => Err(PigError::Format(format!("blob {} is not u64", self.name))),
        }
    }

    pub fn as_f64s(&self) -> Result<&[f64]> {
        match &self.data {
            BlobData::F64(v) => Ok(v),
            _ => Err(PigError::Format(format!("blob {} is not f64", self.name))),
        }
    }

    pub fn as_text(&self) -> Result<&str> {
        match &self.data {
            BlobData::Bytes(v) => std::str::from_utf8(v)
                .map_err(|_| PigError::Format(format!("blob {} is not utf-8", self.name))),
            _ => Err(PigError::Format(format!("blob {} is not text", self.name))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlobFile {
    pub magic: [u8; 4],
    pub version: u32,
    pub config_hash: u64,
    pub blobs: Vec<Blob>,
}

// Guards against absurd allocations when reading corrupt files.
const MAX_NAME: usize = 1 << 16;
const MAX_ELEMS: u64 = 1 << 34;

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u64::from_le_bytes(b))
}

fn truncated(e: std::io::Error) -> PigError {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        PigError::Format("file truncated".into())
    } else {
        PigError::Io(e)
    }
}

impl BlobFile {
    pub fn new(magic: [u8; 4], version: u32, config_hash: u64) -> Self {
        BlobFile {
            magic,
            version,
            config_hash,
            blobs: Vec::new(),
        }
    }

    pub fn push(&mut self, blob: Blob) {
        self.blobs.push(blob);
    }

    pub fn get(&self, name: &str) -> Result<&Blob> {
        self.blobs
            .iter()
            .find(|b| b.name == name)
            .ok_or_else(|| PigError::Format(format!("missing blob {name}")))
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(&self.magic)?;
        w.write_all(&self.version.to_le_bytes())?;
        w.write_all(&self.config_hash.to_le_bytes())?;
        w.write_all(&(self.blobs.len() as u64).to_le_bytes())?;
        for blob in &self.blobs {
            let expected: usize = blob.shape.iter().product();
            if expected != blob.data.len() {
                return Err(PigError::Invariant(format!(
                    "blob {} shape {:?} does not match {} elements",
                    blob.name,
                    blob.shape,
                    blob.data.len()
                )));
            }
            w.write_all(&(blob.name.len() as u32).to_le_bytes())?;
            w.write_all(blob.name.as_bytes())?;
            w.write_all(&[blob.data.dtype()])?;
            w.write_all(&(blob.shape.len() as u32).to_le_bytes())?;
            for &d in &blob.shape {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            match &blob.data {
                BlobData::F64(v) => {
                    let mut buf = Vec::with_capacity(v.len() * 8);
                    v.iter().for_each(|x| buf.extend_from_slice(&x.to_le_bytes()));
                    w.write_all(&buf)?;
                }
                BlobData::U64(v) => {
                    let mut buf = Vec::with_capacity(v.len() * 8);
                    v.iter().for_each(|x| buf.extend_from_slice(&x.to_le_bytes()));
                    w.write_all(&buf)?;
                }
                BlobData::Bytes(v) => w.write_all(v)?,
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        self.write_to(&mut out)?;
        Ok(out)
    }

    /// Reads a container, checking the magic and the supported version.
    pub fn read_from(r: &mut impl Read, magic: [u8; 4], max_version: u32) -> Result<Self> {
        let mut m = [0u8; 4];
        r.read_exact(&mut m).map_err(truncated)?;
        if m != magic {
            return Err(PigError::Format(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(&m),
                String::from_utf8_lossy(&magic)
            )));
        }
        let version = read_u32(r)?;
        if version == 0 || version > max_version {
            return Err(PigError::Format(format!("unsupported version {version}")));
        }
        let config_hash = read_u64(r)?;
        let count = read_u64(r)?;
        let mut blobs = Vec::new();
        for _ in 0..count {
            let name_len = read_u32(r)? as usize;
            if name_len > MAX_NAME {
                return Err(PigError::Format("blob name too long".into()));
            }
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name).map_err(truncated)?;
            let name = String::from_utf8(name)
                .map_err(|_| PigError::Format("blob name is not utf-8".into()))?;
            let mut dtype = [0u8; 1];
            r.read_exact(&mut dtype).map_err(truncated)?;
            let ndim = read_u32(r)? as usize;
            if ndim > 8 {
                return Err(PigError::Format(format!("blob {name}: {ndim} dimensions")));
            }
            let mut shape = Vec::with_capacity(ndim);
            let mut total: u64 = 1;
            for _ in 0..ndim {
                let d = read_u64(r)?;
                total = total.saturating_mul(d);
                shape.push(d as usize);
            }
            if total > MAX_ELEMS {
                return Err(PigError::Format(format!("blob {name} too large")));
            }
            let n = total as usize;
            let data = match dtype[0] {
                0 | 1 => {
                    let mut buf = vec![0u8; n * 8];
                    r.read_exact(&mut buf).map_err(truncated)?;
                    let words = buf.chunks_exact(8).map(|c| c.try_into().expect("8 bytes"));
                    if dtype[0] == 0 {
                        BlobData::F64(words.map(f64::from_le_bytes).collect())
                    } else {
                        BlobData::U64(words.map(u64::from_le_bytes).collect())
                    }
                }
                2 => {
                    let mut buf = vec![0u8; n];
                    r.read_exact(&mut buf).map_err(truncated)?;
                    BlobData::Bytes(buf)
                }
                other => {
                    return Err(PigError::Format(format!("blob {name}: unknown dtype {other}")))
                }
            };
            blobs.push(Blob { name, shape, data });
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(PigError::Format("trailing bytes after last blob".into()));
        }
        Ok(BlobFile {
            magic,
            version,
            config_hash,
            blobs,
        })
    }

    pub fn from_bytes(bytes: &[u8], magic: [u8; 4], max_version: u32) -> Result<Self> {
        Self::read_from(&mut &bytes[..], magic, max_version)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> BlobFile {
        let mut f = BlobFile::new(*b"TEST", 1, 0xdead_beef);
        f.push(Blob::matrix("w", &ndarray::array![[1.0, -2.5], [3.25, 1e-300]]));
        f.push(Blob::u64s("ids", vec![1, u64::MAX]));
        f.push(Blob::text("cfg", "a = 1\n"));
        f
    }

    #[test]
    fn round_trip() {
        let f = sample();
        let bytes = f.to_bytes().unwrap();
        let back = BlobFile::from_bytes(&bytes, *b"TEST", 1).unwrap();
        assert_eq!(back, f);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn rejects_wrong_magic_version_and_truncation() {
        let bytes = sample().to_bytes().unwrap();
        assert!(matches!(
            BlobFile::from_bytes(&bytes, *b"NOPE", 1),
            Err(PigError::Format(_))
        ));
        assert!(matches!(
            BlobFile::from_bytes(&sample_with_version(2), *b"TEST", 1),
            Err(PigError::Format(_))
        ));
        assert!(matches!(
            BlobFile::from_bytes(&bytes[..bytes.len() - 3], *b"TEST", 1),
            Err(PigError::Format(_))
        ));
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(BlobFile::from_bytes(&extra, *b"TEST", 1).is_err());
    }

    fn sample_with_version(v: u32) -> Vec<u8> {
        let mut f = sample();
        f.version = v;
        f.to_bytes().unwrap()
    }

    proptest! {
        #[test]
        fn arbitrary_matrices_round_trip(
            rows in 1usize..5,
            cols in 1usize..5,
            seed in any::<u64>(),
        ) {
            let m = Mat::from_shape_fn((rows, cols), |(i, j)| {
                f64::from_bits(seed.rotate_left((i * cols + j) as u32) & 0x7fef_ffff_ffff_ffff)
            });
            let mut f = BlobFile::new(*b"PROP", 1, seed);
            f.push(Blob::matrix("m", &m));
            let bytes = f.to_bytes().unwrap();
            let back = BlobFile::from_bytes(&bytes, *b"PROP", 1).unwrap();
            prop_assert_eq!(back.get("m").unwrap().to_matrix().unwrap(), m);
            prop_assert_eq!(back.to_bytes().unwrap(), bytes);
        }
    }
}
