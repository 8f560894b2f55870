//! Learning-rate schedules.

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    /// Five sawtooth cycles over the run: within each cycle the rate decays
    /// linearly from the cycle peak to a tenth of it, and each peak is half
    /// the previous one.
    Cyclical,
    /// base · 0.5^floor(epoch / 9).
    Step,
}

pub const CYCLICAL_CYCLES: usize = 5;
pub const STEP_EVERY: usize = 9;

pub fn lr_schedule(kind: ScheduleKind, epoch: usize, total_epochs: usize, base: f64) -> f64 {
    assert!(epoch < total_epochs.max(1), "epoch {epoch} of {total_epochs}");
    match kind {
        ScheduleKind::Step => base * 0.5f64.powi((epoch / STEP_EVERY) as i32),
        ScheduleKind::Cyclical => {
            let cycle_len = total_epochs.div_ceil(CYCLICAL_CYCLES).max(1);
            let cycle = epoch / cycle_len;
            let local = epoch % cycle_len;
            let peak = base * 0.5f64.powi(cycle as i32);
            let frac = if cycle_len > 1 {
                local as f64 / (cycle_len - 1) as f64
            } else {
                0.0
            };
            peak * (1.0 - 0.9 * frac)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cyclical_starts_at_base() {
        assert_eq!(lr_schedule(ScheduleKind::Cyclical, 0, 100, 1e-3), 1e-3);
    }

    #[test]
    fn step_halves_every_nine() {
        assert_eq!(lr_schedule(ScheduleKind::Step, 0, 100, 1e-3), 1e-3);
        assert_eq!(lr_schedule(ScheduleKind::Step, 8, 100, 1e-3), 1e-3);
        assert_eq!(lr_schedule(ScheduleKind::Step, 9, 100, 1e-3), 5e-4);
        assert_eq!(lr_schedule(ScheduleKind::Step, 18, 100, 1e-3), 2.5e-4);
    }

    #[test]
    fn cyclical_has_exactly_five_local_maxima_over_100_epochs() {
        let lrs: Vec<f64> = (0..100)
            .map(|e| lr_schedule(ScheduleKind::Cyclical, e, 100, 1e-3))
            .collect();
        let mut maxima = 0;
        for e in 0..100 {
            let left = if e == 0 { f64::NEG_INFINITY } else { lrs[e - 1] };
            let right = if e == 99 { f64::NEG_INFINITY } else { lrs[e + 1] };
            if lrs[e] > left && lrs[e] > right {
                maxima += 1;
            }
        }
        assert_eq!(maxima, 5, "{lrs:?}");
        // each cycle decays to a tenth of its peak
        assert!((lrs[19] - 1e-4).abs() < 1e-12);
        // peaks halve
        assert!((lrs[20] - 5e-4).abs() < 1e-12);
    }
}
