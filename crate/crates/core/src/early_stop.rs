//! Patience-based early stopping on the validation loss.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EarlyStopConfig {
    pub patience: usize,
    pub min_delta: f64,
}

impl Default for EarlyStopConfig {
    fn default() -> Self {
        Self {
            patience: 5,
            min_delta: 1e-4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decision {
    /// Keep training; `improved` means this epoch is the new best.
    Continue {
        improved: bool,
    },
    Stop {
        best_epoch: usize,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopState {
    pub best_loss: f64,
    /// 1-based epoch of the best loss, 0 before any update.
    pub best_epoch: usize,
    pub patience: usize,
    pub min_delta: f64,
    pub wait: usize,
    epoch: usize,
}

impl EarlyStopState {
    pub fn new(config: EarlyStopConfig) -> Self {
        Self {
            best_loss: f64::INFINITY,
            best_epoch: 0,
            patience: config.patience,
            min_delta: config.min_delta,
            wait: 0,
            epoch: 0,
        }
    }

    /// Records the validation loss of the next epoch. An improvement is
    /// `loss < best - min_delta`; otherwise `wait` grows and training stops
    /// once it reaches `patience`.
    pub fn update(&mut self, val_loss: f64) -> Decision {
        self.epoch += 1;
        if val_loss < self.best_loss - self.min_delta {
            self.best_loss = val_loss;
            self.best_epoch = self.epoch;
            self.wait = 0;
            return Decision::Continue { improved: true };
        }
        self.wait += 1;
        if self.wait >= self.patience {
            Decision::Stop {
                best_epoch: self.best_epoch,
            }
        } else {
            Decision::Continue { improved: false }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec::Vec;

    fn walk(losses: &[f64], patience: usize) -> (Vec<Decision>, EarlyStopState) {
        let mut s = EarlyStopState::new(EarlyStopConfig {
            patience,
            min_delta: 0.0,
        });
        let mut out = Vec::new();
        for &l in losses {
            let d = s.update(l);
            out.push(d);
            if matches!(d, Decision::Stop { .. }) {
                break;
            }
        }
        (out, s)
    }

    #[test]
    fn stops_after_patience_epochs_without_improvement() {
        let (d, s) = walk(&[1.0, 0.9, 0.91, 0.92, 0.93], 2);
        assert_eq!(d.len(), 4);
        assert_eq!(d[3], Decision::Stop { best_epoch: 2 });
        assert_eq!(s.best_loss, 0.9);
    }

    #[test]
    fn decreasing_losses_never_stop() {
        let losses: Vec<f64> = (0..50).map(|i| 1.0 / (i + 1) as f64).collect();
        let (d, _) = walk(&losses, 1);
        assert_eq!(d.len(), 50);
        assert!(d
            .iter()
            .all(|x| matches!(x, Decision::Continue { improved: true })));
    }

    #[test]
    fn zero_patience_stops_on_first_non_improvement() {
        let (d, _) = walk(&[1.0, 0.5, 0.6, 0.1], 0);
        assert_eq!(d.len(), 3);
        assert_eq!(d[2], Decision::Stop { best_epoch: 2 });
    }

    #[test]
    fn min_delta_requires_a_real_improvement() {
        let mut s = EarlyStopState::new(EarlyStopConfig {
            patience: 3,
            min_delta: 0.1,
        });
        assert_eq!(s.update(1.0), Decision::Continue { improved: true });
        assert_eq!(s.update(0.95), Decision::Continue { improved: false });
        assert_eq!(s.wait, 1);
        assert_eq!(s.update(0.85), Decision::Continue { improved: true });
        assert_eq!(s.wait, 0);
    }
}
