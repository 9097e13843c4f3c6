//! JSON-lines metric log.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde_json::{json, Map, Value};

use crate::error::{Error, Result};

/// One JSON object per line, keys sorted. Every line is also kept in memory.
#[derive(Debug)]
pub struct MetricsLog {
    lines: Vec<String>,
    file: Option<(PathBuf, BufWriter<File>)>,
    started: Instant,
    /// Adds an `elapsed_s` field; off in deterministic mode so logs compare exactly.
    timing: bool,
}

impl MetricsLog {
    pub fn in_memory(timing: bool) -> Self {
        Self {
            lines: Vec::new(),
            file: None,
            started: Instant::now(),
            timing,
        }
    }

    /// Writes to `path`, replacing any previous contents.
    pub fn create(path: &Path, timing: bool) -> Result<Self> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(Self {
            file: Some((path.to_path_buf(), BufWriter::new(f))),
            ..Self::in_memory(timing)
        })
    }

    pub fn record(&mut self, mut rec: Map<String, Value>) -> Result<()> {
        if self.timing {
            rec.insert("elapsed_s".into(), json!(self.started.elapsed().as_secs_f64()));
        }
        let line = Value::Object(rec).to_string();
        if let Some((path, w)) = &mut self.file {
            writeln!(w, "{line}")
                .and_then(|_| w.flush())
                .map_err(|e| Error::io(path.as_path(), e))?;
        }
        self.lines.push(line);
        Ok(())
    }

    pub fn lines(&self) -> &[String] {
        &self.lines
    }
}
