use std::fmt::Write as _;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use popctrl_core::{CharGrid, Field2D, Scenario, SolveReport};
use sha2::{Digest, Sha256};

/// SHA-256 of the canonical JSON form of a parsed scenario.
pub fn scenario_hash(scenario: &Scenario) -> String {
    hex::encode(Sha256::digest(scenario.to_canonical_json().as_bytes()))
}

pub struct OutDir {
    root: PathBuf,
}

impl OutDir {
    pub fn create(root: &Path) -> Result<Self> {
        fs::create_dir_all(root).with_context(|| format!("creating {}", root.display()))?;
        Ok(Self {
            root: root.to_path_buf(),
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn field(&self, name: &str, grid: &CharGrid, field: &Field2D) -> Result<()> {
        let path = self.path(name);
        let file = fs::File::create(&path).with_context(|| format!("writing {}", path.display()))?;
        field.write_csv(grid, BufWriter::new(file))?;
        Ok(())
    }

    /// Writes a CSV table; floats use the shortest round-trip form.
    pub fn table(&self, name: &str, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
        let mut s = header.join(",");
        s.push('\n');
        for row in rows {
            s.push_str(&row.join(","));
            s.push('\n');
        }
        self.text(name, &s)
    }

    pub fn report(&self, report: &SolveReport) -> Result<()> {
        self.text("report.json", &report.to_json())
    }

    pub fn json<T: serde::Serialize>(&self, name: &str, value: &T) -> Result<()> {
        let mut s = serde_json::to_string_pretty(value)?;
        s.push('\n');
        self.text(name, &s)
    }

    fn text(&self, name: &str, body: &str) -> Result<()> {
        let path = self.path(name);
        fs::write(&path, body).with_context(|| format!("writing {}", path.display()))
    }
}

pub fn num(v: f64) -> String {
    let mut s = String::new();
    let _ = write!(s, "{v}");
    s
}

/// Time traces as rows (time, columns...).
pub fn trace_rows(grid: &CharGrid, columns: &[&[f64]]) -> Vec<Vec<String>> {
    (0..grid.time_nodes())
        .map(|n| {
            let mut row = vec![num(grid.time(n))];
            row.extend(columns.iter().map(|c| num(c[n])));
            row
        })
        .collect()
}
