use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

/// Collects artifacts written into one output directory.
pub struct OutputDir {
    root: PathBuf,
    pub artifacts: Vec<String>,
}

impl OutputDir {
    pub fn create(root: &Path) -> Result<Self> {
        fs::create_dir_all(root).with_context(|| format!("creating {}", root.display()))?;
        Ok(Self {
            root: root.to_path_buf(),
            artifacts: vec![],
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    fn note(&mut self, name: &str) {
        if !self.artifacts.iter().any(|a| a == name) {
            self.artifacts.push(name.to_string());
        }
    }

    pub fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        fs::write(self.path(name), text).with_context(|| format!("writing {name}"))?;
        self.note(name);
        Ok(())
    }

    pub fn jsonl<T: Serialize>(&mut self, name: &str, rows: impl IntoIterator<Item = T>) -> Result<()> {
        let mut f = std::io::BufWriter::new(fs::File::create(self.path(name))?);
        for r in rows {
            serde_json::to_writer(&mut f, &r)?;
            f.write_all(b"\n")?;
        }
        f.flush()?;
        self.note(name);
        Ok(())
    }

    pub fn csv_rows<T: Serialize>(&mut self, name: &str, rows: &[T]) -> Result<()> {
        let mut w = csv::Writer::from_path(self.path(name))?;
        for r in rows {
            w.serialize(r)?;
        }
        w.flush()?;
        self.note(name);
        Ok(())
    }

    /// CSV with an explicit header and numeric columns.
    pub fn csv_table(&mut self, name: &str, header: &[String], rows: &[Vec<f64>]) -> Result<()> {
        let mut w = csv::Writer::from_path(self.path(name))?;
        w.write_record(header)?;
        for r in rows {
            w.write_record(r.iter().map(|x| format!("{x:e}")))?;
        }
        w.flush()?;
        self.note(name);
        Ok(())
    }
}

pub const CHECKPOINT: &str = "checkpoint.json";

#[derive(Serialize, Deserialize)]
struct CheckpointFile<T> {
    config_hash: String,
    kind: String,
    payload: T,
}

pub fn save_checkpoint<T: Serialize>(out: &OutputDir, hash: &str, kind: &str, payload: &T) -> Result<()> {
    let file = CheckpointFile {
        config_hash: hash.to_string(),
        kind: kind.to_string(),
        payload,
    };
    // write then rename so an interrupted write never leaves a torn checkpoint
    let tmp = out.path("checkpoint.json.tmp");
    fs::write(&tmp, serde_json::to_vec(&file)?)?;
    fs::rename(&tmp, out.path(CHECKPOINT))?;
    Ok(())
}

/// Load a checkpoint if present; refuses one written for a different configuration.
pub fn load_checkpoint<T: DeserializeOwned>(out: &OutputDir, hash: &str, kind: &str) -> Result<Option<T>> {
    let p = out.path(CHECKPOINT);
    if !p.exists() {
        return Ok(None);
    }
    let file: CheckpointFile<T> =
        serde_json::from_slice(&fs::read(&p)?).with_context(|| format!("reading {}", p.display()))?;
    if file.config_hash != hash || file.kind != kind {
        bail!(
            "checkpoint {} was written by a different configuration (hash {}, kind {}); refusing to resume",
            p.display(),
            file.config_hash,
            file.kind
        );
    }
    Ok(Some(file.payload))
}

pub fn clear_checkpoint(out: &OutputDir) -> Result<()> {
    let p = out.path(CHECKPOINT);
    if p.exists() {
        fs::remove_file(p)?;
    }
    Ok(())
}
