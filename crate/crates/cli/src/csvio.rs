//! CSV output with the repo conventions: a header row, data rows, and a
//! trailing metadata comment carrying the tool version and master seed.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::{Context, Result};

pub struct CsvWriter {
    buf: String,
    columns: usize,
}

impl CsvWriter {
    pub fn new(header: &[&str]) -> Self {
        let mut buf = String::new();
        buf.push_str(&header.join(","));
        buf.push('\n');
        CsvWriter { buf, columns: header.len() }
    }

    pub fn row(&mut self, cells: &[String]) {
        assert_eq!(cells.len(), self.columns, "row width mismatch");
        self.buf.push_str(&cells.join(","));
        self.buf.push('\n');
    }

    pub fn row_display(&mut self, cells: &[&dyn std::fmt::Display]) {
        let strings: Vec<String> = cells.iter().map(|c| format!("{c}")).collect();
        self.row(&strings);
    }

    pub fn finish(mut self, path: &Path, seed: u64) -> Result<()> {
        let _ = writeln!(self.buf, "# nsvit {} seed={}", env!("CARGO_PKG_VERSION"), seed);
        fs::write(path, self.buf).with_context(|| format!("writing {}", path.display()))
    }
}

/// Reads back one of our CSVs: returns (header, rows), skipping comments.
pub fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut lines = text.lines().filter(|l| !l.starts_with('#') && !l.is_empty());
    let header: Vec<String> = lines
        .next()
        .context("empty csv")?
        .split(',')
        .map(str::to_string)
        .collect();
    let rows = lines
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect();
    Ok((header, rows))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_rows_and_metadata_comment() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("out.csv");
        let mut w = CsvWriter::new(&["a", "b"]);
        w.row_display(&[&1, &2.5]);
        w.finish(&path, 77).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("a,b\n1,2.5\n"));
        assert!(text.trim_end().ends_with("seed=77"));
        let (header, rows) = read_csv(&path).unwrap();
        assert_eq!(header, vec!["a", "b"]);
        assert_eq!(rows, vec![vec!["1".to_string(), "2.5".to_string()]]);
    }
}
