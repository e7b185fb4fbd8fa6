//! Snapshot files.
//!
//! Binary: u64 little-endian header length, JSON header, then the node values as
//! f64 little-endian in row-major order. CSV: a `# {json header}` line, a column
//! row, then one node per line (coordinates and value, 17 significant digits).

use std::fs;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::flow::Snapshot;
use crate::grid::{BoxDomain, GridError, GridFunction};

#[derive(Debug, Error)]
pub enum SnapshotError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}: malformed snapshot: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error("{path}: {source}")]
    Grid { path: PathBuf, source: GridError },
    #[error("no snapshot files in {0}")]
    Empty(PathBuf),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SnapshotHeader {
    pub n: usize,
    #[serde(rename = "L")]
    pub half_width: f64,
    pub m: usize,
    pub t: f64,
    pub tau: f64,
    pub label: String,
    #[serde(default)]
    pub interior_margin: usize,
}

impl SnapshotHeader {
    pub fn for_grid(u: &GridFunction, t: f64, tau: f64) -> Self {
        let d = u.domain();
        Self {
            n: d.dim(),
            half_width: d.half_width(),
            m: d.points_per_axis(),
            t,
            tau,
            label: u.label().to_string(),
            interior_margin: d.interior_margin(),
        }
    }

    pub fn domain(&self) -> Result<BoxDomain, GridError> {
        Ok(BoxDomain::new(self.n, self.half_width, self.m)?.with_interior_margin(self.interior_margin))
    }
}

/// A grid function with its time stamp and flow parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct SnapshotFile {
    pub header: SnapshotHeader,
    pub u: GridFunction,
}

impl SnapshotFile {
    pub fn new(u: GridFunction, t: f64, tau: f64) -> Self {
        Self {
            header: SnapshotHeader::for_grid(&u, t, tau),
            u,
        }
    }

    pub fn into_snapshot(self) -> Snapshot {
        Snapshot { t: self.header.t, u: self.u }
    }
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> SnapshotError + '_ {
    move |source| SnapshotError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn fmt_err(path: &Path, reason: impl Into<String>) -> SnapshotError {
    SnapshotError::Format {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

pub fn encode_binary(s: &SnapshotFile) -> Vec<u8> {
    let header = serde_json::to_vec(&s.header).expect("header serializes");
    let mut out = Vec::with_capacity(8 + header.len() + 8 * s.u.values().len());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for v in s.u.values() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_binary(bytes: &[u8], path: &Path) -> Result<SnapshotFile, SnapshotError> {
    if bytes.len() < 8 {
        return Err(fmt_err(path, "truncated header length"));
    }
    let hlen = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
    let body = bytes.get(8..8 + hlen).ok_or_else(|| fmt_err(path, "truncated header"))?;
    let header: SnapshotHeader = serde_json::from_slice(body).map_err(|e| fmt_err(path, format!("header: {e}")))?;
    let d = header.domain().map_err(|source| SnapshotError::Grid {
        path: path.to_path_buf(),
        source,
    })?;
    let data = &bytes[8 + hlen..];
    if data.len() != 8 * d.len() {
        return Err(fmt_err(path, format!("expected {} values, found {} bytes", d.len(), data.len())));
    }
    let values: Vec<f64> = data.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    let u = GridFunction::new(d, values, header.label.clone()).map_err(|source| SnapshotError::Grid {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(SnapshotFile { header, u })
}

pub fn encode_csv(s: &SnapshotFile) -> String {
    let d = s.u.domain();
    let n = d.dim();
    let mut out = format!("# {}\n", serde_json::to_string(&s.header).expect("header serializes"));
    for a in 0..n {
        out.push_str(&format!("x{a},"));
    }
    out.push_str("value\n");
    for i in 0..d.len() {
        let p = d.point(i);
        for x in p.iter().take(n) {
            out.push_str(&format!("{x:.16e},"));
        }
        out.push_str(&format!("{:.16e}\n", s.u.value(i)));
    }
    out
}

pub fn decode_csv(text: &str, path: &Path) -> Result<SnapshotFile, SnapshotError> {
    let mut lines = text.lines();
    let first = lines.next().ok_or_else(|| fmt_err(path, "empty file"))?;
    let json = first.strip_prefix("# ").ok_or_else(|| fmt_err(path, "line 1: expected '# {header}'"))?;
    let header: SnapshotHeader = serde_json::from_str(json).map_err(|e| fmt_err(path, format!("line 1: {e}")))?;
    let d = header.domain().map_err(|source| SnapshotError::Grid {
        path: path.to_path_buf(),
        source,
    })?;
    lines.next().ok_or_else(|| fmt_err(path, "line 2: missing column row"))?;
    let mut values = Vec::with_capacity(d.len());
    for (k, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let last = line.rsplit(',').next().unwrap_or("");
        let v: f64 = last
            .trim()
            .parse()
            .map_err(|e| fmt_err(path, format!("line {}: {e}", k + 3)))?;
        values.push(v);
    }
    if values.len() != d.len() {
        return Err(fmt_err(path, format!("expected {} rows, found {}", d.len(), values.len())));
    }
    let u = GridFunction::new(d, values, header.label.clone()).map_err(|source| SnapshotError::Grid {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(SnapshotFile { header, u })
}

pub fn write_binary(path: &Path, s: &SnapshotFile) -> Result<(), SnapshotError> {
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    f.write_all(&encode_binary(s)).map_err(io_err(path))
}

pub fn write_csv(path: &Path, s: &SnapshotFile) -> Result<(), SnapshotError> {
    fs::write(path, encode_csv(s)).map_err(io_err(path))
}

/// Reads either format; CSV is recognized by a `.csv` extension.
pub fn read(path: &Path) -> Result<SnapshotFile, SnapshotError> {
    if path.extension().is_some_and(|e| e == "csv") {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        decode_csv(&text, path)
    } else {
        let mut bytes = Vec::new();
        fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(io_err(path))?;
        decode_binary(&bytes, path)
    }
}

/// Writes by extension (`.csv` → CSV, anything else binary).
pub fn write(path: &Path, s: &SnapshotFile) -> Result<(), SnapshotError> {
    if path.extension().is_some_and(|e| e == "csv") {
        write_csv(path, s)
    } else {
        write_binary(path, s)
    }
}

/// File name of the k-th snapshot of a trajectory.
pub fn snapshot_name(k: usize) -> String {
    format!("snap_{k:04}.bin")
}

/// Loads every `*.bin` snapshot of a trajectory directory (or its `snapshots/`
/// subdirectory), ordered by time.
pub fn read_trajectory(dir: &Path) -> Result<Vec<SnapshotFile>, SnapshotError> {
    let sub = dir.join("snapshots");
    let dir = if sub.is_dir() { sub } else { dir.to_path_buf() };
    let mut files: Vec<PathBuf> = fs::read_dir(&dir)
        .map_err(io_err(&dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "bin"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(SnapshotError::Empty(dir));
    }
    let mut out: Vec<SnapshotFile> = files.iter().map(|p| read(p)).collect::<Result<_, _>>()?;
    out.sort_by(|a, b| a.header.t.total_cmp(&b.header.t));
    Ok(out)
}
