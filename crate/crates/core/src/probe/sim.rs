use std::sync::Mutex;

use crate::backend::BackendKind;
use crate::error::{Error, Result};
use crate::sim::{Actor, EventKind, Machine, SimConfig};

use super::{select_threshold, CalibrationProfile, Histogram, LineId, ProbeBackend, ProbeSample, SharedBuffer};

/// Probe backend over a standalone simulated machine.
pub struct SimProbe {
    state: Mutex<State>,
}

struct State {
    machine: Machine,
    profile: Option<CalibrationProfile>,
}

impl SimProbe {
    pub fn new(config: SimConfig) -> Result<Self> {
        config.validate()?;
        Ok(SimProbe { state: Mutex::new(State { machine: Machine::new(config), profile: None }) })
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, State> {
        self.state.lock().unwrap_or_else(|e| e.into_inner())
    }

    /// Copy of the machine's event log so far.
    pub fn log(&self) -> Vec<crate::sim::AccessEvent> {
        self.lock().machine.log().to_vec()
    }
}

impl ProbeBackend for SimProbe {
    fn kind(&self) -> BackendKind {
        BackendKind::Sim
    }

    fn allocate_shared(&self, size_bytes: usize) -> Result<SharedBuffer> {
        let mut st = self.lock();
        let id = st.machine.allocate(size_bytes)?;
        Ok(st.machine.shared(id).clone())
    }

    fn flush(&self, line: LineId) -> Result<()> {
        let mut st = self.lock();
        let now = st.machine.now();
        st.machine.flush(line, Actor::Monitor, now).map(|_| ())
    }

    fn timed_reload(&self, line: LineId) -> Result<ProbeSample> {
        let mut st = self.lock();
        let Some(threshold) = st.profile.as_ref().map(|p| p.threshold) else {
            return Err(Error::State("timed_reload before calibration".into()));
        };
        let now = st.machine.now();
        let mut sample = st.machine.reload(line, Actor::Monitor, now)?;
        sample.classification =
            if sample.latency < threshold { super::Classification::Hit } else { super::Classification::Miss };
        Ok(sample)
    }

    fn touch(&self, line: LineId) -> Result<()> {
        self.lock().machine.record_access(line, EventKind::Read, Actor::Target).map(|_| ())
    }

    fn calibrate(&self, rounds: usize) -> Result<CalibrationProfile> {
        if rounds == 0 {
            return Err(Error::Usage("calibration needs at least one round".into()));
        }
        let mut st = self.lock();
        let id = st.machine.allocate(1)?;
        let line = st.machine.shared(id).first_line();
        let mut hits = Histogram::new();
        let mut misses = Histogram::new();
        for _ in 0..rounds {
            st.machine.record_access(line, EventKind::Read, Actor::Target)?;
            let now = st.machine.now();
            hits.add(st.machine.reload(line, Actor::Monitor, now)?.latency);
            st.machine.flush(line, Actor::Monitor, now)?;
            let now = st.machine.now();
            misses.add(st.machine.reload(line, Actor::Monitor, now)?.latency);
        }
        let threshold = select_threshold(&hits, &misses)?;
        let profile = CalibrationProfile {
            backend: BackendKind::Sim,
            threshold,
            hit_latencies: hits,
            miss_latencies: misses,
            fr_cycle_cost: st.machine.config().fr_cycle_cost(),
        };
        st.profile = Some(profile.clone());
        Ok(profile)
    }

    fn profile(&self) -> Option<CalibrationProfile> {
        self.lock().profile.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::probe::Classification;

    fn probe() -> SimProbe {
        let p = SimProbe::new(SimConfig::with_seed(1)).unwrap();
        p.calibrate(10).unwrap();
        p
    }

    #[test]
    fn calibration_uses_the_constants() {
        let p = probe();
        let prof = p.profile().unwrap();
        assert!(prof.threshold > 70 && prof.threshold <= 200);
        assert_eq!(prof.fr_cycle_cost, 3);
        assert_eq!(prof.misclassification_rate(), 0.0);
    }

    #[test]
    fn reload_without_calibration_is_a_state_error() {
        let p = SimProbe::new(SimConfig::with_seed(1)).unwrap();
        let buf = p.allocate_shared(8).unwrap();
        assert!(matches!(p.timed_reload(buf.first_line()), Err(Error::State(_))));
    }

    #[test]
    fn flush_then_reload() {
        let p = probe();
        let l = p.allocate_shared(8).unwrap().first_line();
        p.flush(l).unwrap();
        assert_eq!(p.timed_reload(l).unwrap().classification, Classification::Miss);
        p.flush(l).unwrap();
        p.touch(l).unwrap();
        assert_eq!(p.timed_reload(l).unwrap().classification, Classification::Hit);
        // the reload itself re-caches
        assert_eq!(p.timed_reload(l).unwrap().classification, Classification::Hit);
    }

    #[test]
    fn unregistered_flush_is_usage_error() {
        let p = probe();
        assert!(matches!(p.flush(LineId(1)), Err(Error::Usage(_))));
    }
}
