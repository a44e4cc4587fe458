use std::collections::HashSet;
use std::fs::File;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Closed interval of valid mean opinion scores.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MosRange {
    pub lo: f64,
    pub hi: f64,
}

impl MosRange {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(Error::Config(format!("degenerate MOS range [{lo}, {hi}]")));
        }
        Ok(Self { lo, hi })
    }

    pub fn contains(&self, v: f64) -> bool {
        v >= self.lo && v <= self.hi
    }
}

impl Default for MosRange {
    fn default() -> Self {
        Self { lo: 1.0, hi: 5.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub video_id: String,
    pub uri: String,
    pub mos: Option<f64>,
    pub prompt: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub records: Vec<ManifestRecord>,
    /// Directory relative URIs are resolved against.
    pub base_dir: PathBuf,
}

impl DatasetManifest {
    /// Parses a CSV manifest with a header row.
    ///
    /// `video_id` and `uri` columns are required; `mos` and `prompt` are
    /// optional. Row numbers in errors count data rows from 1.
    pub fn load(path: impl AsRef<Path>, mos_range: MosRange) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::Fields).from_reader(file);
        let headers = reader.headers()?.clone();
        let column = |name: &str| headers.iter().position(|h| h == name);
        let missing = |name: &str| Error::Manifest {
            path: path.to_path_buf(),
            message: format!("missing required column {name:?}"),
        };
        let id_col = column("video_id").ok_or_else(|| missing("video_id"))?;
        let uri_col = column("uri").ok_or_else(|| missing("uri"))?;
        let mos_col = column("mos");
        let prompt_col = column("prompt");

        let mut records = Vec::new();
        let mut seen = HashSet::new();
        for (i, row) in reader.records().enumerate() {
            let row_no = i + 1;
            let row_err = |message: String| Error::ManifestRow {
                path: path.to_path_buf(),
                row: row_no,
                message,
            };
            let row = row.map_err(|e| row_err(e.to_string()))?;
            let video_id = row.get(id_col).unwrap_or_default().to_string();
            if video_id.is_empty() {
                return Err(row_err("empty video_id".into()));
            }
            if !seen.insert(video_id.clone()) {
                return Err(row_err(format!("duplicate video_id {video_id:?}")));
            }
            let uri = row.get(uri_col).unwrap_or_default().to_string();
            let mos = match mos_col.and_then(|c| row.get(c)) {
                None | Some("") => None,
                Some(raw) => {
                    let v: f64 = raw
                        .parse()
                        .map_err(|_| row_err(format!("mos {raw:?} is not a number")))?;
                    if !v.is_finite() || !mos_range.contains(v) {
                        return Err(row_err(format!(
                            "mos {v} outside [{}, {}]",
                            mos_range.lo, mos_range.hi
                        )));
                    }
                    Some(v)
                }
            };
            let prompt = prompt_col
                .and_then(|c| row.get(c))
                .filter(|p| !p.is_empty())
                .map(str::to_string);
            records.push(ManifestRecord {
                video_id,
                uri,
                mos,
                prompt,
            });
        }
        let base_dir = path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."));
        Ok(Self { records, base_dir })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn has_mos(&self) -> bool {
        !self.records.is_empty() && self.records.iter().all(|r| r.mos.is_some())
    }

    /// Resolves a record's URI, joining relative paths onto the manifest directory.
    pub fn resolve_uri(&self, record: &ManifestRecord) -> String {
        let p = Path::new(&record.uri);
        if p.is_absolute() || record.uri.contains("://") {
            record.uri.clone()
        } else {
            self.base_dir.join(p).to_string_lossy().into_owned()
        }
    }
}

/// Writes a manifest CSV; the `mos` and `prompt` columns appear only when some
/// record carries them.
pub fn write_manifest(records: &[ManifestRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    let with_mos = records.iter().any(|r| r.mos.is_some());
    let with_prompt = records.iter().any(|r| r.prompt.is_some());
    let mut header = vec!["video_id", "uri"];
    if with_mos {
        header.push("mos");
    }
    if with_prompt {
        header.push("prompt");
    }
    w.write_record(&header)?;
    for r in records {
        let mut row = vec![r.video_id.clone(), r.uri.clone()];
        if with_mos {
            row.push(r.mos.map(|m| m.to_string()).unwrap_or_default());
        }
        if with_prompt {
            row.push(r.prompt.clone().unwrap_or_default());
        }
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}
