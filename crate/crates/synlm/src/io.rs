//! Line-oriented corpus, oracle and JSONL files.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use synlm_core::transitions::{reconstruct, ActionSequence};
use synlm_core::tree::{parse_corpus, Tree};

use crate::error::{Error, Result};

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// One bracketed tree per line; blank lines skipped.
pub fn read_trees(path: &Path) -> Result<Vec<Tree>> {
    let text = read_text(path)?;
    parse_corpus(&text)
        .map(|r| r.map_err(|e| Error::Data(format!("{}: {e}", path.display()))))
        .collect()
}

pub fn render_trees(trees: &[Tree]) -> String {
    let mut s = String::new();
    for t in trees {
        s.push_str(&t.to_string());
        s.push('\n');
    }
    s
}

/// Oracle lines as written by [`render_oracles`]: actions after BOS,
/// space-separated. Each line must describe a complete tree.
pub fn read_oracles(path: &Path) -> Result<Vec<ActionSequence>> {
    let text = read_text(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let seq = ActionSequence::from_line(line)
            .map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), i + 1)))?;
        reconstruct(&seq).map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), i + 1)))?;
        out.push(seq);
    }
    Ok(out)
}

pub fn render_oracles(oracles: &[ActionSequence]) -> String {
    let mut s = String::new();
    for o in oracles {
        s.push_str(&o.to_line());
        s.push('\n');
    }
    s
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = read_text(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), i + 1))))
        .collect()
}

pub fn to_jsonl<T: Serialize>(records: &[T]) -> Result<String> {
    let mut s = String::new();
    for r in records {
        s.push_str(&serde_json::to_string(r)?);
        s.push('\n');
    }
    Ok(s)
}

/// Appends JSON records to a file, one per line.
pub struct JsonlWriter {
    out: BufWriter<fs::File>,
    path: std::path::PathBuf,
}

impl JsonlWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(JsonlWriter {
            out: BufWriter::new(f),
            path: path.to_path_buf(),
        })
    }

    pub fn write<T: Serialize>(&mut self, record: &T) -> Result<()> {
        serde_json::to_writer(&mut self.out, record)?;
        writeln!(self.out)
            .and_then(|_| self.out.flush())
            .map_err(|e| Error::io(&self.path, e))
    }
}

/// Rounds to 9 significant digits so printed numbers are stable and diffable.
pub fn sig9(x: f64) -> f64 {
    if !x.is_finite() || x == 0.0 {
        return x;
    }
    format!("{x:.8e}").parse().unwrap_or(x)
}
