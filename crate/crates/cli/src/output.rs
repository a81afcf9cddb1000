use std::io::Write;
use std::path::Path;

use anyhow::{Context, Result};
use serde::Serialize;
use serde_json::{Map, Value};

use dfscope_core::SCHEMA_VERSION;

/// Provenance stamped on every report.
pub struct Stamp {
    pub seed: u64,
    pub config_hash: String,
}

impl Stamp {
    /// `body` as a JSON object with the version, seed and hash up front.
    pub fn json(&self, body: &impl Serialize) -> Result<String> {
        let mut out = Map::new();
        out.insert("schema_version".into(), SCHEMA_VERSION.into());
        out.insert("seed".into(), self.seed.into());
        out.insert("config_hash".into(), self.config_hash.clone().into());
        match serde_json::to_value(body)? {
            Value::Object(m) => out.extend(m),
            other => {
                out.insert("data".into(), other);
            }
        }
        let mut text = serde_json::to_string_pretty(&Value::Object(out))?;
        text.push('\n');
        Ok(text)
    }

    /// CSV text whose first line is a `#` comment with the seed and hash.
    pub fn csv<R: Serialize>(&self, header: &[&str], rows: impl IntoIterator<Item = R>) -> Result<String> {
        let mut w = csv::WriterBuilder::new()
            .has_headers(false)
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(Vec::new());
        w.write_record(header)?;
        for r in rows {
            w.serialize(r)?;
        }
        let body = String::from_utf8(w.into_inner().map_err(|e| anyhow::anyhow!("{e}"))?)?;
        Ok(format!("# seed={},config_hash={}\n{body}", self.seed, self.config_hash))
    }
}

/// Writes `text` to `path`, or to stdout when there is none.
pub fn emit(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(text.as_bytes())?;
            out.flush()?;
            Ok(())
        }
    }
}
