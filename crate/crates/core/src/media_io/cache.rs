//! Binary feature cache.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      8 bytes  "MDVQAFC\n"
//! version    u32      1
//! modality   u8       0 semantic, 1 technical, 2 motion
//! video_id   u32 length + UTF-8 bytes
//! producer   u32 length + UTF-8 bytes
//! ndim       u32
//! shape      ndim × u64
//! count      u64      element count, must equal the shape product
//! values     count × f64
//! ```

use std::fs;
use std::io::{Cursor, Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::Array2;

use crate::{Error, Matrix, Modality, Result};

pub const CACHE_MAGIC: &[u8; 8] = b"MDVQAFC\n";
pub const CACHE_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureCache {
    pub video_id: String,
    pub modality: Modality,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
    /// Extractor name plus the sampling settings that produced the values.
    pub producer: String,
}

/// Conventional cache location for one video and modality.
pub fn cache_path(dir: impl AsRef<Path>, video_id: &str, modality: Modality) -> PathBuf {
    dir.as_ref().join(format!("{video_id}.{modality}.feat"))
}

fn check_shape(shape: &[usize], count: usize) -> std::result::Result<(), String> {
    if shape.len() != 2 {
        return Err(format!("expected a 2-d token × feature shape, got {shape:?}"));
    }
    if shape.contains(&0) {
        return Err(format!("empty dimension in {shape:?}"));
    }
    let product: usize = shape.iter().product();
    if product != count {
        return Err(format!("shape {shape:?} holds {product} values, found {count}"));
    }
    Ok(())
}

impl FeatureCache {
    pub fn from_matrix(
        video_id: impl Into<String>,
        modality: Modality,
        features: &Matrix,
        producer: impl Into<String>,
    ) -> Self {
        Self {
            video_id: video_id.into(),
            modality,
            shape: vec![features.nrows(), features.ncols()],
            values: features.iter().copied().collect(),
            producer: producer.into(),
        }
    }

    pub fn to_matrix(&self) -> Result<Matrix> {
        check_shape(&self.shape, self.values.len()).map_err(Error::Shape)?;
        Ok(Array2::from_shape_vec((self.shape[0], self.shape[1]), self.values.clone())
            .expect("checked shape"))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        check_shape(&self.shape, self.values.len()).map_err(Error::Shape)?;
        let mut buf = Vec::with_capacity(64 + self.values.len() * 8);
        buf.write_all(CACHE_MAGIC).expect("vec write");
        buf.write_u32::<LittleEndian>(CACHE_VERSION).expect("vec write");
        buf.write_u8(self.modality.code()).expect("vec write");
        for s in [&self.video_id, &self.producer] {
            buf.write_u32::<LittleEndian>(s.len() as u32).expect("vec write");
            buf.write_all(s.as_bytes()).expect("vec write");
        }
        buf.write_u32::<LittleEndian>(self.shape.len() as u32).expect("vec write");
        for &d in &self.shape {
            buf.write_u64::<LittleEndian>(d as u64).expect("vec write");
        }
        buf.write_u64::<LittleEndian>(self.values.len() as u64).expect("vec write");
        for &v in &self.values {
            buf.write_f64::<LittleEndian>(v).expect("vec write");
        }
        Ok(buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut cur = Cursor::new(bytes);
        let short = |_| "truncated header".to_string();
        let mut magic = [0u8; 8];
        cur.read_exact(&mut magic).map_err(short)?;
        if &magic != CACHE_MAGIC {
            return Err("bad magic".into());
        }
        let version = cur.read_u32::<LittleEndian>().map_err(short)?;
        if version != CACHE_VERSION {
            return Err(format!("unsupported version {version}"));
        }
        let modality = Modality::from_code(cur.read_u8().map_err(short)?)
            .ok_or_else(|| "unknown modality code".to_string())?;
        let read_str = |cur: &mut Cursor<&[u8]>| -> std::result::Result<String, String> {
            let len = cur.read_u32::<LittleEndian>().map_err(short)? as usize;
            if len > bytes.len() {
                return Err("string length exceeds file".into());
            }
            let mut b = vec![0u8; len];
            cur.read_exact(&mut b).map_err(short)?;
            String::from_utf8(b).map_err(|_| "string is not UTF-8".to_string())
        };
        let video_id = read_str(&mut cur)?;
        let producer = read_str(&mut cur)?;
        let ndim = cur.read_u32::<LittleEndian>().map_err(short)? as usize;
        if ndim > 8 {
            return Err(format!("implausible rank {ndim}"));
        }
        let shape = (0..ndim)
            .map(|_| cur.read_u64::<LittleEndian>().map(|d| d as usize).map_err(short))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let count = cur.read_u64::<LittleEndian>().map_err(short)? as usize;
        let remaining = bytes.len() - cur.position() as usize;
        if remaining != count.saturating_mul(8) {
            return Err(format!(
                "header declares {count} values but {remaining} payload bytes follow"
            ));
        }
        check_shape(&shape, count)?;
        let values = (0..count)
            .map(|_| cur.read_f64::<LittleEndian>().expect("length checked"))
            .collect();
        Ok(Self {
            video_id,
            modality,
            shape,
            values,
            producer,
        })
    }

    /// Writes through a temporary sibling and a rename; creates missing parent directories.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_bytes()?;
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let tmp = path.with_extension("feat.tmp");
        fs::File::create(&tmp)
            .and_then(|mut f| f.write_all(&bytes))
            .map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|message| Error::Cache {
            path: path.to_path_buf(),
            message,
        })
    }

    /// Loads a cache and checks it holds the `expected` modality.
    pub fn load_expecting(path: impl AsRef<Path>, expected: Modality) -> Result<Self> {
        let cache = Self::load(path)?;
        if cache.modality != expected {
            return Err(Error::ModalityMismatch {
                expected,
                found: cache.modality,
            });
        }
        Ok(cache)
    }
}
