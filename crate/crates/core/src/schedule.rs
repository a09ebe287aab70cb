//! Warm-up plus cosine learning-rate schedules, and the learning-rate guided
//! batch composition rule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleState {
    pub eta_initial: f64,
    pub eta_final: f64,
    pub warmup: usize,
    /// Last schedule position; `lr_at(total) == eta_final`.
    pub total: usize,
    pub epoch: usize,
    pub eta_current: f64,
}

impl ScheduleState {
    /// A schedule spanning `epochs` epochs, i.e. positions `0..epochs`.
    pub fn for_epochs(eta_initial: f64, eta_final: f64, warmup: usize, epochs: usize) -> Result<Self> {
        let total = epochs.saturating_sub(1);
        if warmup > total && epochs > 0 {
            return Err(Error::Config(format!(
                "warm-up ({warmup}) must not exceed the last epoch index ({total})"
            )));
        }
        let mut s = Self {
            eta_initial,
            eta_final,
            warmup,
            total,
            epoch: 0,
            eta_current: 0.0,
        };
        s.eta_current = lr_at(&s, 0)?;
        Ok(s)
    }

    /// Moves to `epoch` and updates the current rate.
    pub fn seek(&mut self, epoch: usize) -> Result<f64> {
        self.eta_current = lr_at(self, epoch)?;
        self.epoch = epoch;
        Ok(self.eta_current)
    }
}

pub fn lr_at(s: &ScheduleState, epoch: usize) -> Result<f64> {
    if epoch > s.total {
        return Err(Error::EpochOutOfRange { epoch, total: s.total });
    }
    if epoch < s.warmup {
        return Ok(s.eta_initial * epoch as f64 / s.warmup as f64);
    }
    let span = s.total - s.warmup;
    if span == 0 {
        return Ok(s.eta_initial);
    }
    let t = (epoch - s.warmup) as f64 / span as f64;
    Ok(s.eta_final + 0.5 * (s.eta_initial - s.eta_final) * (1.0 + (std::f64::consts::PI * t).cos()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchPlan {
    pub b_l: usize,
    pub b_u: usize,
}

impl BatchPlan {
    pub fn total(&self) -> usize {
        self.b_l + self.b_u
    }
}

/// Normalized decay progress `(eta_initial - eta_current) / (eta_initial - eta_final)`,
/// clamped to `[0, 1]`. Warm-up epochs count as no progress: the rising rate
/// there would otherwise read as a fully decayed schedule.
pub fn decay_fraction(s: &ScheduleState) -> Result<f64> {
    let range = s.eta_initial - s.eta_final;
    if range == 0.0 {
        return Err(Error::DegenerateSchedule);
    }
    if s.epoch < s.warmup {
        return Ok(0.0);
    }
    Ok(((s.eta_initial - s.eta_current) / range).clamp(0.0, 1.0))
}

pub fn lrg_plan(s: &ScheduleState, b: usize) -> Result<BatchPlan> {
    if b == 0 {
        return Err(Error::EmptyBatch);
    }
    let b_u = (decay_fraction(s)? * b as f64).floor() as usize;
    Ok(BatchPlan { b_l: b - b_u, b_u })
}

pub fn uniform_plan(b: usize) -> Result<BatchPlan> {
    if b == 0 {
        return Err(Error::EmptyBatch);
    }
    Ok(BatchPlan {
        b_l: b.div_ceil(2),
        b_u: b / 2,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sched(init: f64, fin: f64, warmup: usize, total: usize) -> ScheduleState {
        ScheduleState {
            eta_initial: init,
            eta_final: fin,
            warmup,
            total,
            epoch: 0,
            eta_current: init,
        }
    }

    fn at(s: &ScheduleState, e: usize) -> ScheduleState {
        let mut s = *s;
        s.seek(e).unwrap();
        s
    }

    #[test]
    fn endpoints_and_midpoint() {
        let s = sched(1e-3, 0.0, 10, 110);
        assert_eq!(lr_at(&s, 10).unwrap(), 1e-3);
        assert!(lr_at(&s, 110).unwrap().abs() < 1e-18);
        assert!((lr_at(&s, 60).unwrap() - 5e-4).abs() < 1e-15);
        assert_eq!(lr_at(&s, 0).unwrap(), 0.0);
        assert!((lr_at(&s, 5).unwrap() - 5e-4).abs() < 1e-15);
        assert!(matches!(lr_at(&s, 111), Err(Error::EpochOutOfRange { .. })));
    }

    #[test]
    fn plan_examples() {
        let mut s = sched(1e-3, 0.0, 0, 100);
        assert_eq!(lrg_plan(&s, 5).unwrap(), BatchPlan { b_l: 5, b_u: 0 });
        s.eta_current = 0.0;
        assert_eq!(lrg_plan(&s, 5).unwrap(), BatchPlan { b_l: 0, b_u: 5 });
        s.eta_current = 5e-4;
        assert_eq!(lrg_plan(&s, 5).unwrap(), BatchPlan { b_l: 3, b_u: 2 });
        assert!(matches!(lrg_plan(&sched(1e-3, 1e-3, 0, 10), 5), Err(Error::DegenerateSchedule)));
        assert_eq!(uniform_plan(5).unwrap(), BatchPlan { b_l: 3, b_u: 2 });
        assert_eq!(uniform_plan(4).unwrap(), BatchPlan { b_l: 2, b_u: 2 });
    }

    #[test]
    fn warmup_draws_no_unlabeled() {
        let s = sched(1e-3, 0.0, 20, 200);
        for e in 0..20 {
            assert_eq!(lrg_plan(&at(&s, e), 5).unwrap().b_u, 0);
        }
    }

    #[test]
    fn for_epochs_covers_the_range() {
        let s = ScheduleState::for_epochs(1e-4, 0.0, 0, 400).unwrap();
        assert_eq!(s.total, 399);
        assert_eq!(s.eta_current, 1e-4);
        assert_eq!(lr_at(&s, 399).unwrap(), 0.0);
    }

    proptest! {
        #[test]
        fn post_warmup_monotone(total in 2usize..300, warm_frac in 0.0f64..0.5, b in 1usize..12) {
            let warmup = (warm_frac * total as f64) as usize;
            let s = sched(1e-3, 0.0, warmup, total);
            let mut prev_lr = f64::INFINITY;
            let mut prev_bu = 0;
            for e in 0..=total {
                let st = at(&s, e);
                let plan = lrg_plan(&st, b).unwrap();
                prop_assert_eq!(plan.total(), b);
                prop_assert!(plan.b_u >= prev_bu);
                prev_bu = plan.b_u;
                if e >= warmup {
                    prop_assert!(st.eta_current <= prev_lr);
                    prop_assert!(st.eta_current >= 0.0 && st.eta_current <= 1e-3);
                    prev_lr = st.eta_current;
                }
            }
        }

        #[test]
        fn scale_invariant(k in 1e-3f64..1e3, cur in 0.0f64..1.0, b in 1usize..20) {
            let mut s = sched(1.0, 0.1, 0, 10);
            s.eta_current = 0.1 + 0.9 * cur;
            let mut t = s;
            t.eta_initial *= k;
            t.eta_final *= k;
            t.eta_current *= k;
            // Guard against floor boundaries where rounding of the scaled ratio could differ.
            let f = decay_fraction(&s).unwrap() * b as f64;
            prop_assume!((f - f.round()).abs() > 1e-9);
            prop_assert_eq!(lrg_plan(&s, b).unwrap(), lrg_plan(&t, b).unwrap());
        }
    }
}
