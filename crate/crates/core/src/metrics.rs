//! JSON-lines metrics buffer.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde_json::Value;

#[derive(Debug, Default, Clone)]
pub struct Metrics {
    lines: Vec<String>,
    /// Echo every record to stderr as it arrives.
    pub echo: bool,
}

impl Metrics {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, record: Value) {
        let line = record.to_string();
        if self.echo {
            eprintln!("{line}");
        }
        self.lines.push(line);
    }

    pub fn lines(&self) -> &[String] {
        &self.lines
    }

    pub fn records(&self) -> Vec<Value> {
        self.lines.iter().map(|l| serde_json::from_str(l).expect("metrics lines are json")).collect()
    }

    pub fn write(&self, path: &Path) -> std::io::Result<()> {
        let mut f = std::io::BufWriter::new(fs::File::create(path)?);
        for l in &self.lines {
            writeln!(f, "{l}")?;
        }
        f.flush()
    }
}
