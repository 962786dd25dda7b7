use serde::{Deserialize, Serialize};

use super::{HarnessError, Result};

/// Which part of the network a training stage optimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// Stereo and volume networks plus the occupancy head, occupancy loss.
    BackboneOccupancy,
    /// Detection head only, backbone frozen.
    DetectionHead,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::BackboneOccupancy => "backbone_occupancy",
            Stage::DetectionHead => "detection_head",
        }
    }
}

/// Step-decay learning-rate schedule and batching of one stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSchedule {
    pub stage: Stage,
    pub epochs: usize,
    pub initial_lr: f64,
    pub decay_epochs: Vec<usize>,
    pub decay_factor: f64,
    pub batch_size: usize,
    pub seed: u64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default)]
    pub weight_decay: f64,
    /// Rescales the batch gradient to at most this global L2 norm.
    #[serde(default)]
    pub grad_clip: Option<f64>,
    /// Epochs of linear ramp-up before `initial_lr` is reached.
    #[serde(default)]
    pub warmup_epochs: usize,
}

fn default_momentum() -> f64 {
    0.9
}

impl TrainSchedule {
    /// 50 epochs at 1e-3, decayed 10× at epochs 35 and 45.
    pub fn backbone_default() -> Self {
        Self {
            stage: Stage::BackboneOccupancy,
            epochs: 50,
            initial_lr: 1e-3,
            decay_epochs: vec![35, 45],
            decay_factor: 0.1,
            batch_size: 2,
            seed: 0,
            momentum: 0.9,
            weight_decay: 0.0,
            grad_clip: None,
            warmup_epochs: 0,
        }
    }

    /// 50 epochs at 1e-2, decayed 10× at epochs 30 and 45.
    pub fn detection_default() -> Self {
        Self {
            stage: Stage::DetectionHead,
            initial_lr: 1e-2,
            decay_epochs: vec![30, 45],
            ..Self::backbone_default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(HarnessError::InvalidSchedule(m));
        if !(self.initial_lr > 0.0 && self.initial_lr.is_finite()) {
            return bad(format!("learning rate must be positive, got {}", self.initial_lr));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch size must be positive".into());
        }
        if !self.decay_epochs.windows(2).all(|w| w[0] < w[1]) {
            return bad(format!(
                "decay epochs {:?} must be strictly increasing",
                self.decay_epochs
            ));
        }
        if self.decay_epochs.first().is_some_and(|&e| e < self.warmup_epochs) {
            return bad(format!("decay epochs {:?} fall inside the warmup", self.decay_epochs));
        }
        if self.decay_epochs.last().is_some_and(|&e| e >= self.epochs) {
            return bad(format!(
                "decay epochs {:?} must precede epoch {}",
                self.decay_epochs, self.epochs
            ));
        }
        if !(self.decay_factor > 0.0 && (0.0..1.0).contains(&self.momentum) && self.weight_decay >= 0.0) {
            return bad("decay factor must be positive, momentum in [0, 1), weight decay non-negative".into());
        }
        if self.grad_clip.is_some_and(|c| !(c > 0.0)) {
            return bad("gradient clip must be positive".into());
        }
        Ok(())
    }

    /// `initial_lr · decay_factor^(decay epochs already reached)`, ramped by
    /// `(epoch + 1) / (warmup + 1)` during warmup.
    pub fn lr_at(&self, epoch: usize) -> Result<f64> {
        if epoch >= self.epochs {
            return Err(HarnessError::OutOfRange {
                epoch,
                epochs: self.epochs,
            });
        }
        if epoch < self.warmup_epochs {
            return Ok(self.initial_lr * (epoch + 1) as f64 / (self.warmup_epochs + 1) as f64);
        }
        let passed = self.decay_epochs.iter().filter(|&&d| epoch >= d).count();
        Ok(self.initial_lr * self.decay_factor.powi(passed as i32))
    }
}

/// Learning rate of `schedule` at `epoch`.
pub fn lr_at(schedule: &TrainSchedule, epoch: usize) -> Result<f64> {
    schedule.lr_at(epoch)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn step_decay() {
        let s1 = TrainSchedule::backbone_default();
        assert_eq!(lr_at(&s1, 10).unwrap(), 0.001);
        assert!((lr_at(&s1, 36).unwrap() - 0.0001).abs() < 1e-18);
        assert!((lr_at(&s1, 46).unwrap() - 0.00001).abs() < 1e-18);
        assert_eq!(lr_at(&s1, 34).unwrap(), 0.001);
        assert!(matches!(lr_at(&s1, 50), Err(HarnessError::OutOfRange { .. })));
        let s2 = TrainSchedule::detection_default();
        assert_eq!(lr_at(&s2, 0).unwrap(), 0.01);
        assert!((lr_at(&s2, 30).unwrap() - 0.001).abs() < 1e-18);
    }

    #[test]
    fn warmup_ramps_linearly() {
        let s = TrainSchedule {
            warmup_epochs: 3,
            ..TrainSchedule::backbone_default()
        };
        let lrs: Vec<f64> = (0..5).map(|e| s.lr_at(e).unwrap()).collect();
        for (got, want) in lrs.iter().zip([0.00025, 0.0005, 0.00075, 0.001, 0.001]) {
            assert!((got - want).abs() < 1e-18, "{lrs:?}");
        }
    }

    #[test]
    fn invalid_schedules() {
        let ok = TrainSchedule::backbone_default();
        assert!(ok.validate().is_ok());
        for bad in [
            TrainSchedule {
                decay_epochs: vec![45, 35],
                ..ok.clone()
            },
            TrainSchedule {
                decay_epochs: vec![35, 50],
                ..ok.clone()
            },
            TrainSchedule {
                initial_lr: 0.0,
                ..ok.clone()
            },
            TrainSchedule {
                batch_size: 0,
                ..ok.clone()
            },
            TrainSchedule {
                warmup_epochs: 40,
                ..ok.clone()
            },
        ] {
            assert!(bad.validate().is_err(), "{bad:?}");
        }
    }
}
