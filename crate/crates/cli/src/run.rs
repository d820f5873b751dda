//! Run directories, CSV emission and manifests.

use std::fs;
use std::path::{Path, PathBuf};

use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

pub const DEFAULT_OUTPUT_ROOT: &str = "runs";
pub const OUTPUT_ENV: &str = "MFGLAB_OUT";
pub const MANIFEST: &str = "manifest.json";

/// `--out`, then `MFGLAB_OUT`, then the config's `output`, then `runs`.
pub fn output_root(flag: Option<&Path>, config: Option<&str>) -> PathBuf {
    if let Some(p) = flag {
        return p.to_path_buf();
    }
    if let Some(p) = std::env::var_os(OUTPUT_ENV).filter(|v| !v.is_empty()) {
        return PathBuf::from(p);
    }
    PathBuf::from(config.unwrap_or(DEFAULT_OUTPUT_ROOT))
}

/// Creates `root/<command>-<UTC timestamp>[-i]`, never reusing a directory.
pub fn fresh_run_dir(root: &Path, command: &str) -> CliResult<PathBuf> {
    fs::create_dir_all(root).map_err(CliError::io(root))?;
    let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%S%.3fZ").to_string();
    for attempt in 0.. {
        let name = if attempt == 0 {
            format!("{command}-{stamp}")
        } else {
            format!("{command}-{stamp}-{attempt}")
        };
        let dir = root.join(name);
        match fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(CliError::Io { path: dir, source: e }),
        }
    }
    unreachable!("attempt counter is unbounded")
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Writes a header row and records with RFC-4180 quoting. Floats use the
/// shortest round-trip representation, so reruns are byte-identical.
pub fn write_csv(path: &Path, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> CliResult<()> {
    let to_io = |e: csv::Error| match e.into_kind() {
        csv::ErrorKind::Io(source) => CliError::Io {
            path: path.to_path_buf(),
            source,
        },
        other => CliError::Io {
            path: path.to_path_buf(),
            source: std::io::Error::other(format!("{other:?}")),
        },
    };
    let mut w = csv::Writer::from_path(path).map_err(to_io)?;
    w.write_record(header).map_err(to_io)?;
    for row in rows {
        w.write_record(&row).map_err(to_io)?;
    }
    w.flush().map_err(CliError::io(path))
}

#[cfg(test)]
pub fn read_csv(path: &Path) -> CliResult<(Vec<String>, Vec<Vec<String>>)> {
    let prior = |message: String| CliError::PriorRun {
        path: path.to_path_buf(),
        message,
    };
    let mut r = csv::Reader::from_path(path).map_err(|e| prior(e.to_string()))?;
    let header = r
        .headers()
        .map_err(|e| prior(e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    let mut rows = Vec::new();
    for rec in r.records() {
        rows.push(rec.map_err(|e| prior(e.to_string()))?.iter().map(str::to_string).collect());
    }
    Ok((header, rows))
}

pub fn write_json(path: &Path, value: &Value) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).expect("json serializes");
    text.push('\n');
    fs::write(path, text).map_err(CliError::io(path))
}

pub fn read_manifest(dir: &Path) -> CliResult<Value> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| CliError::PriorRun {
        path: dir.to_path_buf(),
        message: format!("cannot read {MANIFEST}: {e}"),
    })?;
    serde_json::from_str(&text).map_err(|e| CliError::PriorRun {
        path: path.clone(),
        message: e.to_string(),
    })
}

pub fn f(x: f64) -> String {
    format!("{x:?}")
}

pub fn u(x: usize) -> String {
    x.to_string()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn run_directories_are_never_reused() {
        let root = tempfile::tempdir().unwrap();
        let a = fresh_run_dir(root.path(), "solve").unwrap();
        let b = fresh_run_dir(root.path(), "solve").unwrap();
        assert_ne!(a, b);
        assert!(a.is_dir() && b.is_dir());
    }

    #[test]
    fn csv_quotes_and_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        write_csv(&path, &["id", "value"], vec![vec!["a,b".into(), f(0.1)], vec!["c\"d".into(), f(-2.5e-300)]]).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("id,value\n\"a,b\",0.1\n\"c\"\"d\",-2.5e-300\n"), "{text}");
        let (header, rows) = read_csv(&path).unwrap();
        assert_eq!(header, vec!["id", "value"]);
        assert_eq!(rows[1][0], "c\"d");
        assert_eq!(rows[1][1].parse::<f64>().unwrap(), -2.5e-300);
    }

    #[test]
    fn flag_beats_environment_beats_config() {
        assert_eq!(output_root(Some(Path::new("x")), Some("y")), PathBuf::from("x"));
    }

    #[test]
    fn sha256_known_vector() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}
