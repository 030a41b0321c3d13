//! Scalar schedules: inner LR `γ_t`, outer LR (linear warmup then cosine
//! decay), the per-epoch `ε` switch, and the latching temperature-LR decay.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GammaKind {
    Constant,
    Cosine,
}

/// Inner learning rate for the moving-average estimators.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GammaSchedule {
    pub kind: GammaKind,
    pub gamma_const: f64,
    pub gamma_min: f64,
    /// Number of decay epochs.
    pub decay_epochs: u64,
    pub iters_per_epoch: u64,
}

impl GammaSchedule {
    pub fn constant(gamma: f64) -> Self {
        Self {
            kind: GammaKind::Constant,
            gamma_const: gamma,
            gamma_min: gamma,
            decay_epochs: 1,
            iters_per_epoch: 1,
        }
    }

    pub fn cosine(gamma_min: f64, decay_epochs: u64, iters_per_epoch: u64) -> Self {
        Self {
            kind: GammaKind::Cosine,
            gamma_const: 1.0,
            gamma_min,
            decay_epochs,
            iters_per_epoch,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let in_unit = |x: f64| x > 0.0 && x <= 1.0;
        match self.kind {
            GammaKind::Constant if !in_unit(self.gamma_const) => {
                Err(Error::config("gamma", "must lie in (0, 1]"))
            }
            GammaKind::Cosine if !in_unit(self.gamma_min) => {
                Err(Error::config("gamma_min", "must lie in (0, 1]"))
            }
            GammaKind::Cosine if self.decay_epochs == 0 => {
                Err(Error::config("gamma_decay_epochs", "must be positive"))
            }
            GammaKind::Cosine if self.iters_per_epoch == 0 => {
                Err(Error::config("iters_per_epoch", "must be positive"))
            }
            _ => Ok(()),
        }
    }
}

/// `γ_t`; constant within an epoch, clamped to `γ_min` after the decay epochs.
pub fn gamma_at(sched: &GammaSchedule, t: u64) -> f64 {
    match sched.kind {
        GammaKind::Constant => sched.gamma_const,
        GammaKind::Cosine => {
            let epoch = t / sched.iters_per_epoch.max(1);
            if epoch >= sched.decay_epochs {
                return sched.gamma_min;
            }
            let phase = PI * epoch as f64 / sched.decay_epochs as f64;
            0.5 * (1.0 + phase.cos()) * (1.0 - sched.gamma_min) + sched.gamma_min
        }
    }
}

/// Model learning rate: linear warmup from 0, then cosine decay to `min_lr`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OuterLrSchedule {
    pub peak_lr: f64,
    pub min_lr: f64,
    pub warmup_iters: u64,
    pub total_iters: u64,
}

pub fn lr_at(sched: &OuterLrSchedule, t: u64) -> f64 {
    let OuterLrSchedule {
        peak_lr,
        min_lr,
        warmup_iters,
        total_iters,
    } = *sched;
    if t > total_iters || (t == total_iters && total_iters > warmup_iters) {
        return min_lr;
    }
    if t <= warmup_iters {
        if warmup_iters == 0 {
            return peak_lr;
        }
        return peak_lr * (t as f64 / warmup_iters as f64);
    }
    let progress = (t - warmup_iters) as f64 / (total_iters - warmup_iters) as f64;
    // Centre-plus-amplitude form keeps the decay midpoint exact.
    0.5 * (peak_lr + min_lr) + 0.5 * (peak_lr - min_lr) * (PI * progress).cos()
}

/// `ε` used inside the logs: `eps_initial` before `switch_epoch`, `eps_late` from it on.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpsilonSchedule {
    pub eps_initial: f64,
    pub eps_late: f64,
    /// `None` means never switch.
    pub switch_epoch: Option<u64>,
}

impl EpsilonSchedule {
    pub fn constant(eps: f64) -> Self {
        Self {
            eps_initial: eps,
            eps_late: eps,
            switch_epoch: None,
        }
    }

    pub fn at_epoch(&self, epoch: u64) -> f64 {
        match self.switch_epoch {
            Some(s) if epoch >= s => self.eps_late,
            _ => self.eps_initial,
        }
    }
}

/// Latching temperature-LR decay: once τ has been observed below the
/// threshold the multiplier stays at `factor` for the rest of training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TauLrDecay {
    pub threshold: f64,
    pub factor: f64,
    pub latched: bool,
}

impl Default for TauLrDecay {
    fn default() -> Self {
        Self {
            threshold: 0.03,
            factor: 1.0 / 3.0,
            latched: false,
        }
    }
}

impl TauLrDecay {
    /// Records the current τ and returns the LR multiplier to use.
    pub fn observe(&mut self, current_tau: f64) -> f64 {
        if current_tau < self.threshold {
            self.latched = true;
        }
        self.multiplier()
    }

    pub fn multiplier(&self) -> f64 {
        if self.latched {
            self.factor
        } else {
            1.0
        }
    }
}

/// Stateless form of the decay rule: `factor` if τ ever dipped below `threshold`.
pub fn tau_lr_modifier(history: &[f64], threshold: f64, factor: f64) -> f64 {
    let mut d = TauLrDecay {
        threshold,
        factor,
        latched: false,
    };
    history.iter().fold(1.0, |_, &t| d.observe(t))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn gamma_anchors() {
        let s = GammaSchedule::cosine(0.2, 18, 10);
        assert!((gamma_at(&s, 0) - 1.0).abs() < 1e-12);
        assert!((gamma_at(&s, 9) - 1.0).abs() < 1e-12);
        assert!((gamma_at(&s, 90) - 0.6).abs() < 1e-12);
        assert_eq!(gamma_at(&s, 180), 0.2);
        assert_eq!(gamma_at(&s, 10_000), 0.2);
        assert_eq!(gamma_at(&GammaSchedule::constant(0.6), 12345), 0.6);
        assert!((gamma_at(&GammaSchedule::cosine(0.7, 3, 1), 0) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn gamma_validation() {
        assert!(GammaSchedule::constant(0.0).validate().is_err());
        assert!(GammaSchedule::constant(1.0).validate().is_ok());
        assert!(GammaSchedule::cosine(1.2, 3, 1).validate().is_err());
        assert!(GammaSchedule::cosine(0.2, 0, 1).validate().is_err());
    }

    #[test]
    fn lr_anchors() {
        let s = OuterLrSchedule {
            peak_lr: 2e-4,
            min_lr: 4e-5,
            warmup_iters: 100,
            total_iters: 1100,
        };
        assert_eq!(lr_at(&s, 0), 0.0);
        assert_eq!(lr_at(&s, 100), 2e-4);
        assert_eq!(lr_at(&s, 1100), 4e-5);
        assert_eq!(lr_at(&s, 5000), 4e-5);
        assert_eq!(lr_at(&s, 600), 1.2e-4);
        assert!((lr_at(&s, 50) - 1e-4).abs() < 1e-18);
    }

    #[test]
    fn lr_without_warmup_starts_at_peak() {
        let s = OuterLrSchedule {
            peak_lr: 1e-3,
            min_lr: 0.0,
            warmup_iters: 0,
            total_iters: 10,
        };
        assert_eq!(lr_at(&s, 0), 1e-3);
        assert_eq!(lr_at(&s, 10), 0.0);
    }

    #[test]
    fn epsilon_switch() {
        let e = EpsilonSchedule {
            eps_initial: 1e-14,
            eps_late: 1e-8,
            switch_epoch: Some(18),
        };
        assert_eq!(e.at_epoch(0), 1e-14);
        assert_eq!(e.at_epoch(17), 1e-14);
        assert_eq!(e.at_epoch(18), 1e-8);
        assert_eq!(EpsilonSchedule::constant(1e-14).at_epoch(1000), 1e-14);
    }

    #[test]
    fn tau_lr_decay_latches() {
        assert_eq!(tau_lr_modifier(&[0.07, 0.07, 0.07], 0.03, 1.0 / 3.0), 1.0);
        assert_eq!(tau_lr_modifier(&[0.07, 0.029, 0.05], 0.03, 1.0 / 3.0), 1.0 / 3.0);
        let mut d = TauLrDecay::default();
        assert_eq!(d.observe(0.05), 1.0);
        assert_eq!(d.observe(0.02), 1.0 / 3.0);
        assert_eq!(d.observe(0.5), 1.0 / 3.0);
        assert!((2e-4 * d.multiplier() - 2e-4 / 3.0).abs() < 1e-20);
    }

    proptest! {
        #[test]
        fn cosine_gamma_is_monotone_bounded_and_epochwise_constant(
            gmin in 0.01f64..1.0, e in 1u64..40, per in 1u64..20, t in 0u64..2000
        ) {
            let s = GammaSchedule::cosine(gmin, e, per);
            let g = gamma_at(&s, t);
            prop_assert!(g >= gmin - 1e-15 && g <= 1.0 + 1e-15);
            prop_assert!(gamma_at(&s, t + 1) <= g + 1e-15);
            let start = (t / per) * per;
            prop_assert_eq!(gamma_at(&s, start), g);
        }

        #[test]
        fn lr_is_continuous(peak in 1e-5f64..1e-2, frac in 0.0f64..1.0, w in 1u64..50, extra in 2u64..500, t in 0u64..600) {
            let s = OuterLrSchedule { peak_lr: peak, min_lr: peak * frac, warmup_iters: w, total_iters: w + extra };
            let a = lr_at(&s, t);
            let b = lr_at(&s, t + 1);
            let bound = peak * 3.2 / (w.min(extra) as f64);
            prop_assert!((a - b).abs() <= bound);
            prop_assert!(a >= 0.0 && a <= peak * (1.0 + 1e-15));
        }
    }
}
