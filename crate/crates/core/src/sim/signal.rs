use serde::{Deserialize, Serialize};

use crate::behavior::{SignalPhase, SignalState};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseSpec {
    pub phase: SignalPhase,
    pub duration: f64,
}

/// Repeating phase cycle for one intersection, shifted by `offset` seconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SignalSchedule {
    pub intersection: String,
    pub phases: Vec<PhaseSpec>,
    #[serde(default)]
    pub offset: f64,
}

impl SignalSchedule {
    pub fn cycle(&self) -> f64 {
        self.phases.iter().map(|p| p.duration).sum()
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.phases.is_empty() || self.phases.iter().any(|p| !(p.duration > 0.0)) {
            return Err(format!("signal `{}` needs phases with positive durations", self.intersection));
        }
        Ok(())
    }
}

/// Phase and time left at `t`; each phase owns the interval [start, end).
pub fn spat_feed(t: f64, schedule: &SignalSchedule) -> SignalState {
    let cycle = schedule.cycle();
    let mut local = (t - schedule.offset).rem_euclid(cycle);
    if local >= cycle {
        local = 0.0;
    }
    let mut start = 0.0;
    for p in &schedule.phases {
        let end = start + p.duration;
        if local < end {
            return SignalState {
                intersection: schedule.intersection.clone(),
                phase: p.phase,
                remaining: end - local,
            };
        }
        start = end;
    }
    let first = &schedule.phases[0];
    SignalState {
        intersection: schedule.intersection.clone(),
        phase: first.phase,
        remaining: first.duration,
    }
}
