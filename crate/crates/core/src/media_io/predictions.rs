use std::fs::File;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// One predicted score, optionally paired with its ground-truth MOS.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub video_id: String,
    pub score: f64,
    pub mos: Option<f64>,
}

#[derive(Serialize, Deserialize)]
struct Row {
    video_id: String,
    score: f64,
}

/// Writes `video_id,score` rows sorted by id. Scores are written with the
/// shortest representation that parses back to the same `f64`.
pub fn write_predictions(records: &[ScoreRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if records.is_empty() {
        return Err(Error::Degenerate("no predictions to write".into()));
    }
    if let Some(bad) = records.iter().find(|r| !r.score.is_finite()) {
        return Err(Error::NonFinite(format!("score for {}", bad.video_id)));
    }
    let mut sorted: Vec<&ScoreRecord> = records.iter().collect();
    sorted.sort_by(|a, b| a.video_id.cmp(&b.video_id));
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    for r in sorted {
        w.serialize(Row {
            video_id: r.video_id.clone(),
            score: r.score,
        })?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_predictions(path: impl AsRef<Path>) -> Result<Vec<ScoreRecord>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::Reader::from_reader(file);
    reader
        .deserialize::<Row>()
        .map(|row| {
            let row = row?;
            Ok(ScoreRecord {
                video_id: row.video_id,
                score: row.score,
                mos: None,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: &str, score: f64) -> ScoreRecord {
        ScoreRecord {
            video_id: id.into(),
            score,
            mos: None,
        }
    }

    #[test]
    fn three_records_four_lines_sorted() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("pred.csv");
        let records = vec![rec("c", 1.0 / 3.0), rec("a", 4.25), rec("b", 2.000001)];
        write_predictions(&records, &p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 4);
        assert_eq!(lines[0], "video_id,score");
        assert!(lines[1].starts_with("a,"));
        assert!(lines[3].starts_with("c,"));
        let back = read_predictions(&p).unwrap();
        assert_eq!(back.len(), 3);
        assert!((back[2].score - 1.0 / 3.0).abs() < 1e-6);
        assert_eq!(back[2].score, 1.0 / 3.0);
    }

    #[test]
    fn empty_list_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(write_predictions(&[], dir.path().join("p.csv")).is_err());
    }

    #[test]
    fn unwritable_path() {
        let err = write_predictions(&[rec("a", 1.0)], "/nonexistent-dir/p.csv").unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }
}
