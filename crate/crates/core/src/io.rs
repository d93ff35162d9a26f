//! File helpers: atomic writes, JSON documents and SPD matrix CSV ingestion.

use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::lvm::Dataset;
use crate::manifolds::ManifoldSpec;

/// Writes `bytes` to a temporary file next to `path` and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

pub fn to_json<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_atomic(path, to_json(value)?.as_bytes())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

/// Renders rows of floats as CSV with a header; floats use shortest round-trip form.
pub fn csv_string(header: &[String], rows: &[Vec<f64>]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for row in rows {
        w.write_record(row.iter().map(|v| v.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    String::from_utf8(bytes).map_err(|e| Error::Internal(e.to_string()))
}

pub fn write_csv(path: &Path, header: &[String], rows: &[Vec<f64>]) -> Result<()> {
    write_atomic(path, csv_string(header, rows)?.as_bytes())
}

/// Loads SPD matrices from a headerless or headed CSV: one matrix per row,
/// `trajectory_id` followed by the `size²` row-major entries.
pub fn load_spd_csv(path: &Path, size: usize) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new().has_headers(false).trim(csv::Trim::All).from_path(path)?;
    let mut points = Vec::new();
    let mut ids = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record?;
        let fields: Vec<&str> = record.iter().collect();
        if line == 0 && fields.first().is_some_and(|f| f.parse::<f64>().is_err()) {
            continue;
        }
        if fields.len() != size * size + 1 {
            return Err(Error::Validation(format!(
                "line {}: expected {} fields (trajectory id and {} entries), found {}",
                line + 1,
                size * size + 1,
                size * size,
                fields.len()
            )));
        }
        let id: usize = fields[0]
            .parse()
            .map_err(|_| Error::Validation(format!("line {}: bad trajectory id {:?}", line + 1, fields[0])))?;
        let coords = fields[1..]
            .iter()
            .map(|f| f.parse::<f64>().map_err(|_| Error::Validation(format!("line {}: bad number {f:?}", line + 1))))
            .collect::<Result<Vec<_>>>()?;
        ids.push(id);
        points.push(coords);
    }
    Dataset::new(ManifoldSpec::Spd { size }, points, ids)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn atomic_write_replaces() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.txt");
        write_atomic(&p, b"one").unwrap();
        write_atomic(&p, b"two").unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap(), "two");
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
    }

    #[test]
    fn spd_csv_loads() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("spd.csv");
        std::fs::write(&p, "traj,a,b,c,d\n0,2,0.1,0.1,1\n0,1,0,0,1\n1,3,0,0,2\n").unwrap();
        let ds = load_spd_csv(&p, 2).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.trajectories().len(), 2);
        std::fs::write(&p, "0,1,0,0,-1\n").unwrap();
        assert!(load_spd_csv(&p, 2).is_err());
    }
}
