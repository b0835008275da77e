use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::{AdamConfig, AdamState};
use super::model::{batch_loss, batch_loss_grad, stack, AEConfig, Autoencoder};
use crate::error::{Error, Result};
use crate::ingest::holdout_split;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Trailing fraction of windows held out for validation and calibration.
    pub validation_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            epochs: 200,
            batch_size: 64,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            validation_fraction: 0.3,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate.is_nan() || self.learning_rate <= 0.0 {
            return Err(Error::Config(format!(
                "learning rate {} must be > 0",
                self.learning_rate
            )));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean per-window error over the fit windows, in training mode.
    pub train_loss: f64,
    /// Mean per-window error over the validation windows, in eval mode.
    pub val_loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Autoencoder,
    pub curve: Vec<EpochStats>,
    /// Eval-mode error of every validation window under the final model.
    pub validation_errors: Vec<f64>,
}

pub fn write_curve_csv<W: Write>(curve: &[EpochStats], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["epoch", "train_loss", "val_loss"])?;
    for s in curve {
        w.write_record([
            s.epoch.to_string(),
            s.train_loss.to_string(),
            s.val_loss.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Trains on channel-major `C·L` windows (already normalized). The final
/// `validation_fraction` of windows is held out; the rest is shuffled each
/// epoch with the configured seed, so runs are bit-reproducible.
pub fn train<W: AsRef<[f64]>>(
    windows: &[W],
    ae: &AEConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if windows.is_empty() {
        return Err(Error::Data("no training windows".into()));
    }
    let mut model = Autoencoder::init(ae.clone())?;
    let (c, l) = (ae.input_channels, ae.window_length);
    let (mut fit, val) = holdout_split((0..windows.len()).collect(), cfg.validation_fraction)?;
    let val_windows: Vec<&[f64]> = val.iter().map(|&i| windows[i].as_ref()).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = AdamState::new(model.named_trainable().into_iter().map(|(_, t)| t));
    let adam_cfg = cfg.adam();
    let mut curve = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        fit.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in fit.chunks(cfg.batch_size) {
            let batch: Vec<&[f64]> = chunk.iter().map(|&i| windows[i].as_ref()).collect();
            let x = stack(&batch, c, l)?;
            let (out, tape) = model.forward_train(&x, &mut rng)?;
            let loss = batch_loss(&x, &out.reconstruction)?;
            if !loss.is_finite() {
                return Err(Error::Training {
                    epoch,
                    reason: format!("non-finite loss {loss}"),
                });
            }
            total += loss * chunk.len() as f64;
            let grads = model.backward(&tape, &batch_loss_grad(&x, &out.reconstruction)?)?;
            adam.step(&mut model.trainable_mut(), &grads.tensors, &adam_cfg)?;
            model.update_running_stats(&tape);
        }
        let train_loss = total / fit.len() as f64;
        let val_errors = model.window_errors(&val_windows, cfg.batch_size)?;
        let val_loss = val_errors.iter().sum::<f64>() / val_errors.len() as f64;
        if !val_loss.is_finite() {
            return Err(Error::Training {
                epoch,
                reason: format!("non-finite validation loss {val_loss}"),
            });
        }
        log::info!("epoch {epoch}: train {train_loss:.6} val {val_loss:.6}");
        curve.push(EpochStats {
            epoch,
            train_loss,
            val_loss,
        });
    }

    let validation_errors = model.window_errors(&val_windows, cfg.batch_size)?;
    Ok(TrainOutcome {
        model,
        curve,
        validation_errors,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sine_windows(n: usize, c: usize, l: usize) -> Vec<Vec<f64>> {
        (0..n)
            .map(|i| {
                let mut w = Vec::with_capacity(c * l);
                for ch in 0..c {
                    for t in 0..l {
                        let phase = (i * 3 + t) as f64 * 0.4 + ch as f64;
                        w.push(phase.sin());
                    }
                }
                w
            })
            .collect()
    }

    fn tiny() -> AEConfig {
        AEConfig {
            hidden_channels: 4,
            latent_channels: 4,
            dropout_p: 0.0,
            ..AEConfig::new(2, 16).with_blocks(2)
        }
    }

    #[test]
    fn loss_decreases_on_sines() {
        let windows = sine_windows(32, 2, 16);
        let cfg = TrainConfig {
            learning_rate: 1e-2,
            epochs: 50,
            batch_size: 8,
            ..Default::default()
        };
        let out = train(&windows, &tiny(), &cfg).unwrap();
        assert_eq!(out.curve.len(), 50);
        let first = out.curve[0].train_loss;
        let last = out.curve.last().unwrap().train_loss;
        assert!(last < first, "{last} !< {first}");
        assert_eq!(out.validation_errors.len(), 10);
    }

    #[test]
    fn same_seed_same_parameters() {
        let windows = sine_windows(12, 2, 16);
        let cfg = TrainConfig {
            learning_rate: 1e-3,
            epochs: 3,
            batch_size: 4,
            ..Default::default()
        };
        let ae = AEConfig {
            dropout_p: 0.2,
            ..tiny()
        };
        let a = train(&windows, &ae, &cfg).unwrap();
        let b = train(&windows, &ae, &cfg).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(a.curve, b.curve);
    }

    #[test]
    fn zero_epochs_rejected() {
        let windows = sine_windows(4, 2, 16);
        let cfg = TrainConfig {
            epochs: 0,
            ..Default::default()
        };
        assert!(matches!(
            train(&windows, &tiny(), &cfg),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn trained_model_beats_untrained_on_constants() {
        let windows: Vec<Vec<f64>> = (0..20).map(|i| vec![0.5 + 0.01 * i as f64; 32]).collect();
        let cfg = TrainConfig {
            learning_rate: 1e-2,
            epochs: 40,
            batch_size: 4,
            ..Default::default()
        };
        let untrained = Autoencoder::init(tiny()).unwrap();
        let before: f64 = untrained.window_errors(&windows, 8).unwrap().iter().sum();
        let out = train(&windows, &tiny(), &cfg).unwrap();
        let after: f64 = out.model.window_errors(&windows, 8).unwrap().iter().sum();
        assert!(after < before, "{after} !< {before}");
    }

    #[test]
    fn divergence_reports_epoch() {
        let mut windows = sine_windows(8, 2, 16);
        windows[0][0] = f64::NAN;
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 8,
            ..Default::default()
        };
        match train(&windows, &tiny(), &cfg) {
            Err(Error::Training { epoch, .. }) => assert_eq!(epoch, 1),
            other => panic!("expected divergence, got {other:?}"),
        }
    }
}
