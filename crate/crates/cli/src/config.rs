use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use anyhow::{Context, Result};
use dfscope_core::{BackendKind, Error, SimConfig};
use serde::Serialize;
use sha2::{Digest, Sha256};

/// Environment variable naming the backend used when neither a flag nor the
/// config file picks one.
pub const BACKEND_ENV: &str = "DFSCOPE_BACKEND";

const KEYS: &[&str] = &[
    "backend",
    "seed",
    "noise_ticks",
    "hit_latency",
    "miss_latency",
    "flush_ticks",
    "reload_ticks",
    "access_ticks",
    "step_jitter",
    "target",
    "trials",
    "budget",
    "retries",
    "gaps",
    "methods",
    "strategy",
    "tx",
    "adversary",
];

/// Flat `key = value` settings. Blank lines and `#` comments are ignored.
#[derive(Debug, Default)]
pub struct FileConfig {
    values: BTreeMap<String, String>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut values = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::Usage(format!("config line {}: expected key = value", n + 1)).into());
            };
            let k = k.trim().replace('-', "_");
            if !KEYS.contains(&k.as_str()) {
                return Err(Error::Usage(format!("config line {}: unknown key `{k}`", n + 1)).into());
            }
            values.insert(k, v.trim().to_string());
        }
        Ok(FileConfig { values })
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        match self.values.get(key) {
            None => Ok(None),
            Some(v) => v.parse().map(Some).map_err(|e| Error::Usage(format!("config key `{key}`: {e}")).into()),
        }
    }

    /// The flag if given, otherwise the file's value.
    pub fn pick<T: FromStr>(&self, flag: Option<T>, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        match flag {
            Some(v) => Ok(Some(v)),
            None => self.get(key),
        }
    }
}

/// Settings shared by every command after merging flags, file and
/// environment.
#[derive(Clone, Debug, Serialize)]
pub struct RunConfig {
    pub backend: BackendKind,
    pub seed: u64,
    /// Present for the simulator only.
    pub sim: Option<SimConfig>,
}

impl RunConfig {
    pub fn resolve(
        backend: Option<BackendKind>,
        seed: Option<u64>,
        noise: Option<u64>,
        file: &FileConfig,
    ) -> Result<Self> {
        let backend = match file.pick(backend, "backend")? {
            Some(b) => b,
            None => match std::env::var(BACKEND_ENV) {
                Ok(v) if !v.is_empty() => v.parse::<BackendKind>()?,
                _ => BackendKind::Sim,
            },
        };
        let seed = file.pick(seed, "seed")?;
        let (seed, sim) = match backend {
            BackendKind::Sim => {
                let seed = seed.ok_or_else(|| Error::Usage("--seed is required with the sim backend".into()))?;
                let mut c = SimConfig::with_seed(seed);
                c.noise_ticks = file.pick(noise, "noise_ticks")?.unwrap_or(c.noise_ticks);
                c.hit_latency = file.get("hit_latency")?.unwrap_or(c.hit_latency);
                c.miss_latency = file.get("miss_latency")?.unwrap_or(c.miss_latency);
                c.flush_ticks = file.get("flush_ticks")?.unwrap_or(c.flush_ticks);
                c.reload_ticks = file.get("reload_ticks")?.unwrap_or(c.reload_ticks);
                c.access_ticks = file.get("access_ticks")?.unwrap_or(c.access_ticks);
                c.step_jitter = file.get("step_jitter")?.unwrap_or(c.step_jitter);
                c.validate()?;
                (seed, Some(c))
            }
            BackendKind::Hw => (seed.unwrap_or(0), None),
        };
        Ok(RunConfig { backend, seed, sim })
    }
}

/// First 16 hex digits of the SHA-256 of the canonical JSON of `value`.
pub fn config_hash(value: &impl Serialize) -> String {
    let text = serde_json::to_string(value).expect("config serialises");
    hex::encode(&Sha256::digest(text.as_bytes())[..8])
}
