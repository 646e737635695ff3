//! Epoch-to-step mapping and the learning-rate schedule.

use crate::config::OptimConfig;
use crate::error::{Error, Result};

/// First epoch of each intermediate step `1..=T`. Epochs before the first
/// start train at `t = 0`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StepSchedule {
    starts: Vec<usize>,
    epochs: usize,
}

impl StepSchedule {
    /// Equal-length steps: step `t` starts at epoch `(t - 1) E / T`.
    pub fn uniform(epochs: usize, total_steps: usize) -> Self {
        let starts = (0..total_steps).map(|i| i * epochs / total_steps).collect();
        Self { starts, epochs }
    }

    pub fn from_starts(starts: Vec<usize>, total_steps: usize, epochs: usize) -> Result<Self> {
        if starts.len() != total_steps {
            return Err(Error::Invalid(format!(
                "{} step starts for {total_steps} steps",
                starts.len()
            )));
        }
        if starts.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::Invalid("step starts must be nondecreasing".into()));
        }
        if let Some(&last) = starts.last() {
            if last >= epochs {
                return Err(Error::Invalid(format!("step start {last} beyond {epochs} epochs")));
            }
        }
        Ok(Self { starts, epochs })
    }

    pub fn starts(&self) -> &[usize] {
        &self.starts
    }

    pub fn total_steps(&self) -> usize {
        self.starts.len()
    }

    pub fn epochs(&self) -> usize {
        self.epochs
    }

    /// Number of steps that have started by `epoch`.
    pub fn step_for_epoch(&self, epoch: usize) -> usize {
        self.starts.iter().filter(|&&s| s <= epoch).count()
    }
}

/// Linear warm-up followed by piecewise-constant decay.
#[derive(Debug, Clone, PartialEq)]
pub struct LrSchedule {
    pub base: f64,
    pub warmup_epochs: usize,
    pub milestones: Vec<usize>,
    /// Factor relative to `base` once the matching milestone is reached.
    pub decay: Vec<f64>,
}

impl LrSchedule {
    /// Built from a resolved optimizer config.
    pub fn from_config(cfg: &OptimConfig) -> Result<Self> {
        let milestones = cfg
            .milestones
            .clone()
            .ok_or_else(|| Error::Config("learning-rate milestones unresolved".into()))?;
        Ok(Self {
            base: cfg.lr,
            warmup_epochs: cfg.warmup_epochs.unwrap_or(0),
            milestones,
            decay: cfg.decay.clone(),
        })
    }

    /// Learning rate for a whole epoch.
    pub fn lr(&self, epoch: usize) -> f64 {
        let warm = if epoch < self.warmup_epochs {
            (epoch + 1) as f64 / self.warmup_epochs as f64
        } else {
            1.0
        };
        let factor = self
            .milestones
            .iter()
            .zip(&self.decay)
            .filter(|(m, _)| epoch >= **m)
            .map(|(_, d)| *d)
            .last()
            .unwrap_or(1.0);
        self.base * warm * factor
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_four_steps_over_180_epochs() {
        let s = StepSchedule::uniform(180, 4);
        assert_eq!(s.starts(), &[0, 45, 90, 135]);
        for e in 0..45 {
            assert_eq!(s.step_for_epoch(e), 1);
        }
        assert_eq!(s.step_for_epoch(45), 2);
        assert_eq!(s.step_for_epoch(134), 3);
        assert_eq!(s.step_for_epoch(135), 4);
        assert_eq!(s.step_for_epoch(179), 4);
    }

    #[test]
    fn zero_steps_is_single_step() {
        let s = StepSchedule::uniform(30, 0);
        assert!((0..30).all(|e| s.step_for_epoch(e) == 0));
    }

    #[test]
    fn irregular_starts() {
        let s = StepSchedule::from_starts(vec![10, 30, 50, 70, 90, 160], 6, 180).unwrap();
        assert_eq!(s.step_for_epoch(5), 0);
        assert_eq!(s.step_for_epoch(10), 1);
        assert_eq!(s.step_for_epoch(100), 5);
        assert_eq!(s.step_for_epoch(170), 6);
        assert!(StepSchedule::from_starts(vec![0, 20, 10], 3, 30).is_err());
        assert!(StepSchedule::from_starts(vec![0, 20], 3, 30).is_err());
        assert!(StepSchedule::from_starts(vec![0, 30], 2, 30).is_err());
    }

    #[test]
    fn learning_rate_warmup_and_decay() {
        let s = LrSchedule {
            base: 4e-4,
            warmup_epochs: 10,
            milestones: vec![80, 120],
            decay: vec![0.1, 0.01],
        };
        assert!((s.lr(0) - 4e-5).abs() < 1e-18);
        assert!((s.lr(9) - 4e-4).abs() < 1e-18);
        assert_eq!(s.lr(79), 4e-4);
        assert!((s.lr(80) - 4e-5).abs() < 1e-18);
        assert!((s.lr(150) - 4e-6).abs() < 1e-18);
    }
}
