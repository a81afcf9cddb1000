use dfscope_core::Error;

/// A sweep bound: raw ticks, or a multiple of the flush+reload cycle when
/// written with a `c` suffix.
#[derive(Clone, Copy, Debug, PartialEq)]
enum Bound {
    Ticks(f64),
    Cycles(f64),
}

impl Bound {
    fn parse(s: &str) -> Result<Self, Error> {
        let s = s.trim();
        let (num, cycles) = match s.strip_suffix('c') {
            Some(n) => (n, true),
            None => (s, false),
        };
        let v: f64 = num.parse().map_err(|_| Error::Usage(format!("bad gap `{s}`")))?;
        if !v.is_finite() || v < 0.0 {
            return Err(Error::Usage(format!("bad gap `{s}`")));
        }
        Ok(if cycles { Bound::Cycles(v) } else { Bound::Ticks(v) })
    }

    fn ticks(self, cycle: u64) -> f64 {
        match self {
            Bound::Ticks(t) => t,
            Bound::Cycles(c) => c * cycle as f64,
        }
    }
}

/// Gap sweep `start:end:step`, end inclusive.
#[derive(Clone, Debug, PartialEq)]
pub struct GapSpec {
    start: Bound,
    end: Bound,
    step: Bound,
}

impl std::str::FromStr for GapSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        let parts: Vec<&str> = s.split(':').collect();
        let [start, end, step] = parts[..] else {
            return Err(Error::Usage(format!("gap sweep `{s}` is not start:end:step")));
        };
        Ok(GapSpec { start: Bound::parse(start)?, end: Bound::parse(end)?, step: Bound::parse(step)? })
    }
}

impl GapSpec {
    /// Gaps in whole ticks, rounded to the nearest tick, without repeats.
    pub fn ticks(&self, cycle: u64) -> Result<Vec<u64>, Error> {
        let (start, end, step) = (self.start.ticks(cycle), self.end.ticks(cycle), self.step.ticks(cycle));
        if step <= 0.0 {
            return Err(Error::Usage("gap step must be positive".into()));
        }
        if end < start {
            return Err(Error::Usage("gap sweep ends before it starts".into()));
        }
        let mut out: Vec<u64> = Vec::new();
        let mut k = 0u64;
        loop {
            let g = start + k as f64 * step;
            if g > end + 1e-9 {
                break;
            }
            let t = g.round() as u64;
            if out.last() != Some(&t) {
                out.push(t);
            }
            k += 1;
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cycle_units() {
        let g: GapSpec = "0:2c:0.5c".parse().unwrap();
        assert_eq!(g.ticks(4).unwrap(), vec![0, 2, 4, 6, 8]);
        assert_eq!(g.ticks(3).unwrap(), vec![0, 2, 3, 5, 6]);
    }

    #[test]
    fn raw_ticks() {
        let g: GapSpec = "3:9:3".parse().unwrap();
        assert_eq!(g.ticks(100).unwrap(), vec![3, 6, 9]);
    }

    #[test]
    fn malformed() {
        assert!("0:12c".parse::<GapSpec>().is_err());
        assert!("a:1:1".parse::<GapSpec>().is_err());
        assert!("0:1:0".parse::<GapSpec>().unwrap().ticks(3).is_err());
        assert!("5:1:1".parse::<GapSpec>().unwrap().ticks(3).is_err());
    }
}
