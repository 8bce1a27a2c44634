use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

use crate::Result;

pub const TOOL_NAME: &str = "ddsqueeze";
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Twelve significant digits in scientific notation.
pub fn fmt_num(x: f64) -> String {
    if x.is_nan() {
        "nan".to_string()
    } else {
        format!("{x:.11e}")
    }
}

/// A comma-separated table with `#` comment lines in front of the header
/// row and, optionally, after the last data row.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CsvTable {
    pub comments: Vec<String>,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
    pub trailer: Vec<String>,
}

impl CsvTable {
    pub fn new(command: &str, columns: &[&str]) -> Self {
        Self {
            comments: vec![format!("{TOOL_NAME} {TOOL_VERSION} {command}")],
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
            trailer: Vec::new(),
        }
    }

    pub fn comment(&mut self, line: impl Into<String>) {
        self.comments.push(line.into());
    }

    /// Echoes a TOML document, one comment line per line.
    pub fn echo_config(&mut self, toml: &str) {
        self.comments.push("config:".into());
        for line in toml.lines().filter(|l| !l.trim().is_empty()) {
            self.comments.push(format!("  {line}"));
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }

    /// Data rows and the header row, without comments.
    pub fn body(&self) -> String {
        let mut s = self.columns.join(",");
        s.push('\n');
        for row in &self.rows {
            s.push_str(&row.join(","));
            s.push('\n');
        }
        s
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        for c in &self.comments {
            writeln!(s, "# {c}").unwrap();
        }
        s.push_str(&self.body());
        for c in &self.trailer {
            writeln!(s, "# {c}").unwrap();
        }
        s
    }

    pub fn write_to(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        f.write_all(self.render().as_bytes())?;
        f.flush()?;
        Ok(())
    }
}
