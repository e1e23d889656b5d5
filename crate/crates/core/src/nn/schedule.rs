use crate::error::{Error, Result};

/// Linear warm-up followed by polynomial decay, stepped once per epoch.
///
/// Warm-up uses the `(epoch + 1) / warmup_epochs` convention, so the last
/// warm-up epoch already runs at `base_lr` and the schedule is continuous at
/// the boundary.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WarmUpPolyLR {
    pub base_lr: f64,
    pub power: f64,
    pub warmup_epochs: usize,
    pub total_epochs: usize,
}

impl Default for WarmUpPolyLR {
    fn default() -> Self {
        WarmUpPolyLR {
            base_lr: 6e-5,
            power: 0.9,
            warmup_epochs: 5,
            total_epochs: 120,
        }
    }
}

impl WarmUpPolyLR {
    pub fn lr_at(&self, epoch: usize) -> Result<f64> {
        if epoch >= self.total_epochs {
            return Err(Error::Contract(format!(
                "epoch {epoch} outside schedule of {} epochs",
                self.total_epochs
            )));
        }
        if epoch < self.warmup_epochs {
            return Ok(self.base_lr * (epoch + 1) as f64 / self.warmup_epochs as f64);
        }
        let span = (self.total_epochs - self.warmup_epochs) as f64;
        let progress = (epoch - self.warmup_epochs) as f64 / span;
        Ok(self.base_lr * (1.0 - progress).powf(self.power))
    }
}

/// Free-function form of [`WarmUpPolyLR::lr_at`].
pub fn lr_at(epoch: usize, sched: &WarmUpPolyLR) -> Result<f64> {
    sched.lr_at(epoch)
}
