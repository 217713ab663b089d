//! CSV reports. The first line of every file is `# config: <json>`, the run
//! configuration that produced it; the header row follows.

use std::io::Write;
use std::path::Path;

use serde::Serialize;
use serde_json::Value;

use crate::error::{Error, Result};

const CONFIG_PREFIX: &str = "# config: ";

/// A report read back from disk.
#[derive(Clone, Debug, PartialEq)]
pub struct CsvTable {
    pub config: Value,
    pub headers: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl CsvTable {
    pub fn column(&self, name: &str) -> Result<Vec<&str>> {
        let i = self
            .headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Parse(format!("no column {name:?}")))?;
        Ok(self.rows.iter().map(|r| r[i].as_str()).collect())
    }

    pub fn column_f64(&self, name: &str) -> Result<Vec<f64>> {
        self.column(name)?
            .into_iter()
            .map(|s| s.parse().map_err(|_| Error::Parse(format!("{name}: {s:?} is not a number"))))
            .collect()
    }
}

pub fn write_csv<R: Serialize>(path: &Path, config: &Value, rows: &[R]) -> Result<()> {
    let mut buf = Vec::new();
    writeln!(buf, "{CONFIG_PREFIX}{}", serde_json::to_string(config)?)?;
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        for r in rows {
            w.serialize(r).map_err(|e| Error::Parse(e.to_string()))?;
        }
        w.flush()?;
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn read_csv(path: &Path) -> Result<CsvTable> {
    let text = std::fs::read_to_string(path)?;
    let (first, body) = text.split_once('\n').unwrap_or((&text, ""));
    let config = first
        .strip_prefix(CONFIG_PREFIX)
        .ok_or_else(|| Error::Parse(format!("{} does not start with a config line", path.display())))?;
    let config = serde_json::from_str(config)?;
    let mut r = csv::Reader::from_reader(body.as_bytes());
    let headers = r
        .headers()
        .map_err(|e| Error::Parse(e.to_string()))?
        .iter()
        .map(str::to_owned)
        .collect();
    let rows = r
        .records()
        .map(|rec| {
            rec.map(|r| r.iter().map(str::to_owned).collect())
                .map_err(|e| Error::Parse(e.to_string()))
        })
        .collect::<Result<_>>()?;
    Ok(CsvTable { config, headers, rows })
}
