use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{usage, Error, Result};
use crate::hw::HwProbe;
use crate::probe::{CalibrationProfile, ProbeBackend, SimProbe};
use crate::sim::SimConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Hw,
    Sim,
}

impl BackendKind {
    pub fn as_str(self) -> &'static str {
        match self {
            BackendKind::Hw => "hw",
            BackendKind::Sim => "sim",
        }
    }
}

impl fmt::Display for BackendKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BackendKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hw" => Ok(BackendKind::Hw),
            "sim" => Ok(BackendKind::Sim),
            other => Err(usage(format!("unknown backend `{other}` (expected hw or sim)"))),
        }
    }
}

/// A calibrated probe backend.
#[derive(Clone)]
pub enum Backend {
    Sim { config: SimConfig, profile: CalibrationProfile },
    Hw { probe: Arc<HwProbe>, profile: CalibrationProfile },
}

/// Calibration rounds used by [`Backend::hw`].
pub const HW_CALIBRATION_ROUNDS: usize = 10_000;

impl Backend {
    /// Simulator with `config`, calibrated.
    pub fn sim(config: SimConfig) -> Result<Self> {
        let probe = SimProbe::new(config.clone())?;
        let profile = probe.calibrate(64)?;
        Ok(Backend::Sim { config, profile })
    }

    /// Host CPU. Fails with a capability error when `clflush` or `rdtscp`
    /// is missing.
    pub fn hw() -> Result<Self> {
        let probe = Arc::new(HwProbe::new()?);
        let profile = probe.calibrate(HW_CALIBRATION_ROUNDS)?;
        Ok(Backend::Hw { probe, profile })
    }

    pub fn kind(&self) -> BackendKind {
        match self {
            Backend::Sim { .. } => BackendKind::Sim,
            Backend::Hw { .. } => BackendKind::Hw,
        }
    }

    pub fn profile(&self) -> &CalibrationProfile {
        match self {
            Backend::Sim { profile, .. } | Backend::Hw { profile, .. } => profile,
        }
    }

    pub fn fr_cycle_cost(&self) -> u64 {
        self.profile().fr_cycle_cost
    }

    pub fn sim_config(&self) -> Option<&SimConfig> {
        match self {
            Backend::Sim { config, .. } => Some(config),
            Backend::Hw { .. } => None,
        }
    }
}

impl fmt::Debug for Backend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Backend").field("kind", &self.kind()).field("profile", self.profile()).finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kind_parses() {
        assert_eq!("sim".parse::<BackendKind>().unwrap(), BackendKind::Sim);
        assert_eq!("hw".parse::<BackendKind>().unwrap(), BackendKind::Hw);
        assert!(matches!("gpu".parse::<BackendKind>(), Err(Error::Usage(_))));
    }

    #[test]
    fn sim_backend_is_calibrated() {
        let b = Backend::sim(SimConfig::with_seed(4)).unwrap();
        assert_eq!(b.fr_cycle_cost(), 3);
        assert!(b.profile().threshold > 70);
    }
}
