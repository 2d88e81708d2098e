use serde::{Deserialize, Serialize};

use super::NumericsError;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub lr_max: f64,
    pub lr_min: f64,
    pub total_epochs: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self { lr_max: 1e-4, lr_min: 1e-6, total_epochs: 100 }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<(), NumericsError> {
        if !(self.lr_min > 0.0 && self.lr_min <= self.lr_max && self.lr_max.is_finite()) {
            return Err(NumericsError::InvalidSchedule(format!(
                "need 0 < lr_min <= lr_max, got {} and {}",
                self.lr_min, self.lr_max
            )));
        }
        if self.total_epochs == 0 {
            return Err(NumericsError::InvalidSchedule("total_epochs must be >= 1".into()));
        }
        Ok(())
    }
}

/// Cosine annealing from `lr_max` at epoch 0 to `lr_min` at `total_epochs`.
pub fn cosine_lr(epoch: usize, cfg: &ScheduleConfig) -> Result<f64, NumericsError> {
    if epoch > cfg.total_epochs {
        return Err(NumericsError::EpochOutOfRange { epoch, total: cfg.total_epochs });
    }
    let t = epoch as f64 / cfg.total_epochs as f64;
    Ok(cfg.lr_min + 0.5 * (cfg.lr_max - cfg.lr_min) * (1.0 + (std::f64::consts::PI * t).cos()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoints_and_midpoint() {
        let c = ScheduleConfig::default();
        assert!((cosine_lr(0, &c).unwrap() - 1e-4).abs() < 1e-18);
        assert!((cosine_lr(100, &c).unwrap() - 1e-6).abs() < 1e-18);
        assert!((cosine_lr(50, &c).unwrap() - 5.05e-5).abs() < 1e-15);
        assert!(matches!(cosine_lr(101, &c), Err(NumericsError::EpochOutOfRange { .. })));
    }

    #[test]
    fn non_increasing() {
        let c = ScheduleConfig { lr_max: 3e-3, lr_min: 1e-5, total_epochs: 37 };
        let lrs: Vec<f64> = (0..=37).map(|e| cosine_lr(e, &c).unwrap()).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn validation() {
        assert!(ScheduleConfig { lr_max: 1e-6, lr_min: 1e-4, total_epochs: 1 }.validate().is_err());
        assert!(ScheduleConfig { total_epochs: 0, ..Default::default() }.validate().is_err());
        assert!(ScheduleConfig::default().validate().is_ok());
    }
}
