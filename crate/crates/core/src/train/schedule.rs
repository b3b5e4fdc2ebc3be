use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn ten() -> f64 {
    10.0
}
fn thirty() -> usize {
    30
}
fn five() -> usize {
    5
}
fn three() -> usize {
    3
}
fn tenth_percent() -> f64 {
    1e-3
}

/// Learning-rate schedule. Epochs are counted from 0.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ScheduleSpec {
    /// `lr · factor^-(epoch / every)`.
    FixedStep {
        lr: f64,
        #[serde(default = "ten")]
        factor: f64,
        #[serde(default = "thirty")]
        every: usize,
    },
    /// Divide by `factor` when the epoch-mean training loss has not improved
    /// on its best by more than `threshold` (relative) for `patience`
    /// consecutive epochs, at most `max_drops` times.
    Plateau {
        lr: f64,
        #[serde(default = "ten")]
        factor: f64,
        #[serde(default = "five")]
        patience: usize,
        #[serde(default = "three")]
        max_drops: usize,
        #[serde(default = "tenth_percent")]
        threshold: f64,
    },
}

impl ScheduleSpec {
    pub fn validate(&self) -> Result<()> {
        let (lr, factor) = match *self {
            ScheduleSpec::FixedStep { lr, factor, every } => {
                if every == 0 {
                    return Err(Error::config("fixed-step schedule needs every >= 1"));
                }
                (lr, factor)
            }
            ScheduleSpec::Plateau {
                lr, factor, patience, ..
            } => {
                if patience == 0 {
                    return Err(Error::config("plateau schedule needs patience >= 1"));
                }
                (lr, factor)
            }
        };
        if !(lr.is_finite() && lr > 0.0) {
            return Err(Error::config(format!("learning rate must be positive, got {lr}")));
        }
        if !(factor.is_finite() && factor >= 1.0) {
            return Err(Error::config(format!("drop factor must be >= 1, got {factor}")));
        }
        Ok(())
    }
}

/// Mutable part of a schedule, persisted in checkpoints.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ScheduleState {
    pub drops: u32,
    pub stale_epochs: u32,
    /// Best epoch-mean loss so far; `None` before the first epoch.
    pub best: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Schedule {
    pub spec: ScheduleSpec,
    pub state: ScheduleState,
}

impl Schedule {
    pub fn new(spec: ScheduleSpec) -> Self {
        Schedule {
            spec,
            state: ScheduleState::default(),
        }
    }

    /// Learning rate for `epoch`.
    pub fn lr(&self, epoch: usize) -> f64 {
        match self.spec {
            ScheduleSpec::FixedStep { lr, factor, every } => lr / factor.powi((epoch / every) as i32),
            ScheduleSpec::Plateau { lr, factor, .. } => lr / factor.powi(self.state.drops as i32),
        }
    }

    /// Feeds the finished epoch's mean training loss.
    pub fn end_epoch(&mut self, mean_loss: f64) {
        let ScheduleSpec::Plateau {
            patience,
            max_drops,
            threshold,
            ..
        } = self.spec
        else {
            return;
        };
        let s = &mut self.state;
        match s.best {
            Some(best) if mean_loss >= best * (1.0 - threshold) => s.stale_epochs += 1,
            _ => {
                s.best = Some(mean_loss);
                s.stale_epochs = 0;
            }
        }
        if s.stale_epochs as usize >= patience && (s.drops as usize) < max_drops {
            s.drops += 1;
            s.stale_epochs = 0;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn fixed_step_values() {
        let s = Schedule::new(ScheduleSpec::FixedStep {
            lr: 0.1,
            factor: 10.0,
            every: 30,
        });
        let lrs: Vec<f64> = (0..100).map(|e| s.lr(e)).collect();
        assert!(lrs[..30].iter().all(|&l| l == 0.1));
        assert!(lrs[30..60].iter().all(|&l| l == 0.01));
        assert!(lrs[60..90].iter().all(|&l| l == 0.001));
        assert!(lrs[90..].iter().all(|&l| l == 0.0001));
    }

    fn plateau() -> Schedule {
        Schedule::new(ScheduleSpec::Plateau {
            lr: 0.1,
            factor: 10.0,
            patience: 5,
            max_drops: 3,
            threshold: 1e-3,
        })
    }

    #[test]
    fn plateau_drops_after_patience() {
        let mut s = plateau();
        s.end_epoch(1.0);
        for _ in 0..4 {
            s.end_epoch(0.9995); // within 0.1%: no improvement
        }
        assert_eq!(s.lr(0), 0.1);
        s.end_epoch(1.0);
        assert_eq!(s.lr(0), 0.01);
        s.end_epoch(0.5);
        assert_eq!(s.state.stale_epochs, 0);
    }

    proptest! {
        #[test]
        fn plateau_drops_at_most_three_times(losses in prop::collection::vec(0.1f64..10.0, 0..200)) {
            let mut s = plateau();
            let mut prev = s.lr(0);
            for l in losses {
                s.end_epoch(l);
                let lr = s.lr(0);
                prop_assert!(lr > 0.0 && lr <= prev);
                prev = lr;
            }
            prop_assert!(s.state.drops <= 3);
            prop_assert!(s.lr(0) >= 0.1 / 1000.0);
        }

        #[test]
        fn fixed_step_non_increasing(lr in 1e-4f64..1.0, every in 1usize..50) {
            let s = Schedule::new(ScheduleSpec::FixedStep { lr, factor: 10.0, every });
            for e in 0..200 {
                prop_assert!(s.lr(e + 1) <= s.lr(e) && s.lr(e + 1) > 0.0);
            }
        }
    }

    #[test]
    fn toml_defaults() {
        let s: ScheduleSpec = toml::from_str("kind = \"plateau\"\nlr = 0.1").unwrap();
        assert_eq!(
            s,
            ScheduleSpec::Plateau {
                lr: 0.1,
                factor: 10.0,
                patience: 5,
                max_drops: 3,
                threshold: 1e-3
            }
        );
        assert!(toml::from_str::<ScheduleSpec>("kind = \"fixed-step\"\nlr = 0.1\nfoo = 1").is_err());
        assert!(ScheduleSpec::FixedStep {
            lr: -1.0,
            factor: 10.0,
            every: 30
        }
        .validate()
        .is_err());
    }
}
