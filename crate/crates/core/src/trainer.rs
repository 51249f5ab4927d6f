//! Minibatch training with Adam and a step learning-rate schedule.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::dataset::{PatchConfig, TrainingData};
use crate::denoiser::{Denoiser, ParamGradient, Precision};
use crate::error::{invalid, Error, Result};
use crate::image::Image;
use crate::metrics::{psnr, PSNR_CAP_DB};
use crate::noise::sigma_from_255;
use crate::pairing::synth_noisy;
use crate::risk::{loss_and_gradient, DivergenceMode, EpsilonPolicy, EstimatorConfig, LossKind};
use crate::rng::RngStream;

pub const DEFAULT_KAPPA: f64 = 1.6e-4;
pub const TRAINING_LOG_SCHEMA: &str = "training_log/1";

/// MC perturbation step for noise level `sigma_255` (0-255 units), returned
/// in normalized units: `kappa * sigma_255 / 255`.
pub fn epsilon_rule(sigma_255: f64, kappa: f64) -> f64 {
    kappa * sigma_255 / 255.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub stabilizer: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            stabilizer: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub first: Vec<f64>,
    pub second: Vec<f64>,
    pub step: u64,
    pub config: AdamConfig,
}

impl OptimizerState {
    pub fn new(len: usize, config: AdamConfig) -> Self {
        Self {
            first: vec![0.0; len],
            second: vec![0.0; len],
            step: 0,
            config,
        }
    }
}

/// One bias-corrected Adam update of `params` in place.
pub fn adam_step(
    params: &mut [f64],
    grad: &ParamGradient,
    state: &mut OptimizerState,
    lr: f64,
) -> Result<()> {
    let n = params.len();
    for len in [grad.len(), state.first.len(), state.second.len()] {
        if len != n {
            return Err(Error::LengthMismatch {
                expected: n,
                actual: len,
            });
        }
    }
    let AdamConfig {
        beta1,
        beta2,
        stabilizer,
    } = state.config;
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    for (i, p) in params.iter_mut().enumerate() {
        let g = grad.0[i];
        let m = beta1 * state.first[i] + (1.0 - beta1) * g;
        let v = beta2 * state.second[i] + (1.0 - beta2) * g * g;
        state.first[i] = m;
        state.second[i] = v;
        *p -= lr * (m / c1) / ((v / c2).sqrt() + stabilizer);
    }
    Ok(())
}

fn default_epochs() -> usize {
    50
}
fn default_batch() -> usize {
    32
}
fn default_lr() -> f64 {
    1e-3
}
fn default_drop_factor() -> f64 {
    0.1
}
fn default_drop_epoch() -> usize {
    40
}
fn default_kappa() -> f64 {
    DEFAULT_KAPPA
}
fn default_true() -> bool {
    true
}
fn default_one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub loss: LossKind,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub lr_initial: f64,
    #[serde(default = "default_drop_factor")]
    pub lr_drop_factor: f64,
    /// First (0-based) epoch trained at the dropped rate.
    #[serde(default = "default_drop_epoch")]
    pub lr_drop_epoch: usize,
    /// Coefficient of the epsilon rule, sigma in 0-255 units.
    #[serde(default = "default_kappa")]
    pub kappa: f64,
    #[serde(default)]
    pub divergence_mode: DivergenceMode,
    #[serde(default)]
    pub patches: PatchConfig,
    /// Train eSURE on independent pairs through the averaged nested pair.
    #[serde(default = "default_true")]
    pub pair_averaging: bool,
    #[serde(default)]
    pub global_seed: u64,
    /// Overrides the denoiser's arithmetic when set.
    #[serde(default)]
    pub precision: Option<Precision>,
    #[serde(default)]
    pub adam: AdamConfig,
    /// Noise level of the validation inputs; defaults to the regime's nominal level.
    #[serde(default)]
    pub validation_sigma_255: Option<f64>,
    #[serde(default)]
    pub validation_seed: u64,
    /// Validate every this many epochs (and after the last); 0 disables.
    #[serde(default = "default_one")]
    pub validate_every: usize,
}

impl TrainConfig {
    pub fn new(loss: LossKind) -> Self {
        serde_json::from_value(serde_json::json!({ "loss": loss })).expect("defaults deserialize")
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.lr_initial > 0.0) || !(self.lr_drop_factor > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if !(self.kappa > 0.0) {
            return Err(Error::Config("kappa must be positive".into()));
        }
        if self.patches.patch_size == 0 || self.patches.stride == 0 {
            return Err(Error::Config("patch size and stride must be positive".into()));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        if epoch >= self.lr_drop_epoch {
            self.lr_initial * self.lr_drop_factor
        } else {
            self.lr_initial
        }
    }

    /// Short stable hash of the config JSON.
    pub fn digest(&self) -> String {
        crate::checkpoint::digest_json(&serde_json::to_value(self).expect("config serializes"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub epoch: usize,
    /// Optimizer steps taken so far.
    pub step: u64,
    pub lr: f64,
    pub mean_loss: f64,
    pub val_psnr: Option<f64>,
    pub wall_ms: u64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingLog {
    pub rows: Vec<LogRow>,
    pub adam: AdamConfig,
    pub config_digest: String,
}

impl TrainingLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        let a = &self.adam;
        let _ = writeln!(
            out,
            "#schema={TRAINING_LOG_SCHEMA} adam_beta1={} adam_beta2={} adam_stabilizer={} shuffle=per_epoch_permutation config_digest={}",
            a.beta1, a.beta2, a.stabilizer, self.config_digest
        );
        out.push_str("epoch,step,lr,mean_loss,val_psnr,wall_ms\n");
        for r in &self.rows {
            let val = r.val_psnr.map(|v| v.to_string()).unwrap_or_default();
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                r.epoch, r.step, r.lr, r.mean_loss, val, r.wall_ms
            );
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|source| Error::Unwritable {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn final_val_psnr(&self) -> Option<f64> {
        self.rows.iter().rev().find_map(|r| r.val_psnr)
    }
}

/// Noisy validation inputs with their clean references.
pub fn validation_set(cleans: &[Image], sigma: f64, seed: u64) -> Result<Vec<(Image, Image)>> {
    cleans
        .iter()
        .enumerate()
        .map(|(i, x)| {
            let mut stream = RngStream::derive(seed, "eval/noise", &[i as u64]);
            Ok((x.clone(), synth_noisy(x, sigma, &mut stream)?))
        })
        .collect()
}

/// Mean PSNR (peak 1) of `d` over `(clean, noisy)` pairs.
pub fn mean_psnr(d: &Denoiser, set: &[(Image, Image)]) -> Result<f64> {
    if set.is_empty() {
        return Err(invalid("empty evaluation set"));
    }
    let mut total = 0.0;
    for (clean, noisy) in set {
        total += psnr(clean, &d.forward(noisy)?, 1.0)?.min(PSNR_CAP_DB);
    }
    Ok(total / set.len() as f64)
}

/// Trains a copy of `d` and returns it with the per-epoch log.
pub fn train(
    config: &TrainConfig,
    data: &TrainingData,
    d: &Denoiser,
) -> Result<(Denoiser, TrainingLog)> {
    config.validate()?;
    data.regime.check_loss(config.loss)?;
    let mut model = d.clone();
    if let Some(p) = config.precision {
        model.set_precision(p);
    }
    let mut log = TrainingLog {
        rows: Vec::new(),
        adam: config.adam,
        config_digest: config.digest(),
    };
    if config.epochs == 0 {
        return Ok((model, log));
    }

    let mut pool = data.patch_pool(config.loss, &config.patches, config.pair_averaging)?;
    if pool.is_empty() {
        return Err(invalid("no training patches"));
    }
    let validation = if data.validation.is_empty() || config.validate_every == 0 {
        Vec::new()
    } else {
        let sigma_255 = config
            .validation_sigma_255
            .unwrap_or_else(|| data.regime.nominal_input_sigma_255());
        validation_set(&data.validation, sigma_from_255(sigma_255), config.validation_seed)?
    };

    let mut state = OptimizerState::new(model.param_count(), config.adam);
    let mut params = model.params().to_vec();
    let start = Instant::now();
    let mut order: Vec<usize> = (0..pool.len()).collect();
    for epoch in 0..config.epochs {
        let lr = config.lr_at(epoch);
        pool.refresh(epoch)?;
        order.sort_unstable();
        RngStream::derive(config.global_seed, "train/shuffle", &[epoch as u64]).shuffle(&mut order);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<_> = chunk.iter().map(|&i| pool.samples[i].clone()).collect();
            let mut cfg = match config.divergence_mode {
                DivergenceMode::Analytic => EstimatorConfig::analytic(),
                DivergenceMode::MonteCarlo => EstimatorConfig::monte_carlo(
                    EpsilonPolicy::SigmaProportional {
                        kappa: config.kappa,
                    },
                    RngStream::derive(config.global_seed, "train/probe", &[state.step]),
                ),
            };
            let (loss, grad) = loss_and_gradient(config.loss, &batch, &model, &mut cfg)
                .map_err(|e| match e {
                    Error::NonFinite(what) => Error::NonFinite(format!(
                        "{what} at epoch {epoch}, step {}",
                        state.step
                    )),
                    other => other,
                })?;
            adam_step(&mut params, &grad, &mut state, lr)?;
            if params.iter().any(|p| !p.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "parameters after step {} (epoch {epoch})",
                    state.step
                )));
            }
            model.set_params(&params)?;
            loss_sum += loss;
            batches += 1;
        }
        let last = epoch + 1 == config.epochs;
        let val_psnr = if !validation.is_empty()
            && ((epoch + 1) % config.validate_every == 0 || last)
        {
            Some(mean_psnr(&model, &validation)?)
        } else {
            None
        };
        log.rows.push(LogRow {
            epoch,
            step: state.step,
            lr,
            mean_loss: loss_sum / batches as f64,
            val_psnr,
            wall_ms: start.elapsed().as_millis() as u64,
        });
    }
    Ok((model, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{NoiseLevel, Regime};
    use crate::image::Shape;
    use approx::assert_abs_diff_eq;

    #[test]
    fn epsilon_rule_examples() {
        assert_abs_diff_eq!(epsilon_rule(25.0, 1.6e-4) * 255.0, 0.004, epsilon = 1e-15);
        assert_abs_diff_eq!(epsilon_rule(25.0, 1.6e-4), 1.5686e-5, epsilon = 1e-9);
        assert_eq!(epsilon_rule(0.0, 1.6e-4), 0.0);
        assert_abs_diff_eq!(epsilon_rule(50.0, 1.6e-4) * 255.0, 0.008, epsilon = 1e-15);
    }

    #[test]
    fn adam_examples() {
        let mut p = vec![0.3, -1.0];
        let mut s = OptimizerState::new(2, AdamConfig::default());
        adam_step(&mut p, &ParamGradient::zeros(2), &mut s, 1e-3).unwrap();
        assert_eq!(p, vec![0.3, -1.0]);
        assert_eq!(s.step, 1);

        let mut p = vec![0.0];
        let mut s = OptimizerState::new(1, AdamConfig::default());
        adam_step(&mut p, &ParamGradient(vec![1.0]), &mut s, 1e-3).unwrap();
        assert_abs_diff_eq!(p[0], -1e-3 / (1.0 + 1e-8), epsilon = 1e-15);

        let mut a = (vec![0.5], OptimizerState::new(1, AdamConfig::default()));
        let mut b = a.clone();
        adam_step(&mut a.0, &ParamGradient(vec![0.2]), &mut a.1, 1e-2).unwrap();
        adam_step(&mut b.0, &ParamGradient(vec![0.2]), &mut b.1, 1e-2).unwrap();
        assert_eq!(a, b);

        let err = adam_step(&mut [0.0], &ParamGradient(vec![1.0, 2.0]), &mut s, 1e-3);
        assert!(matches!(err, Err(Error::LengthMismatch { .. })));
    }

    #[test]
    fn config_defaults() {
        let c = TrainConfig::new(LossKind::Sure);
        assert_eq!(c.epochs, 50);
        assert_eq!(c.batch_size, 32);
        assert_eq!(c.lr_at(39), 1e-3);
        assert_abs_diff_eq!(c.lr_at(40), 1e-4, epsilon = 1e-18);
        assert_eq!(c.patches.patch_size, 40);
        assert_eq!(c.kappa, 1.6e-4);
        assert_eq!(c.digest().len(), 16);
    }

    fn tiny_data(regime: Regime) -> TrainingData {
        let x = Image::filled(Shape::gray(16, 16).unwrap(), 0.2);
        TrainingData::new(regime, 1, vec![x.clone()], vec![x]).unwrap()
    }

    #[test]
    fn zero_epochs_returns_input() {
        let data = tiny_data(Regime::Single {
            noise: NoiseLevel::Fixed { sigma_255: 25.0 },
            realizations: 1,
        });
        let mut c = TrainConfig::new(LossKind::Sure);
        c.epochs = 0;
        let d = Denoiser::scaling(0.37);
        let (out, log) = train(&c, &data, &d).unwrap();
        assert_eq!(out.params(), d.params());
        assert!(log.rows.is_empty());
    }

    #[test]
    fn incompatible_regime_fails_before_training() {
        let data = tiny_data(Regime::Single {
            noise: NoiseLevel::Fixed { sigma_255: 25.0 },
            realizations: 1,
        });
        let err = train(&TrainConfig::new(LossKind::N2n), &data, &Denoiser::identity()).unwrap_err();
        assert!(matches!(err, Error::IncompatibleData { .. }));
    }

    #[test]
    fn schedule_and_log() {
        let data = tiny_data(Regime::UncorrelatedPair {
            noise: NoiseLevel::Fixed { sigma_255: 25.0 },
        });
        let mut c = TrainConfig::new(LossKind::N2n);
        c.epochs = 4;
        c.lr_drop_epoch = 2;
        c.batch_size = 2;
        c.patches = PatchConfig {
            patch_size: 8,
            stride: 8,
            augment: false,
        };
        let (_, log) = train(&c, &data, &Denoiser::scaling(1.0)).unwrap();
        let lrs: Vec<f64> = log.rows.iter().map(|r| r.lr).collect();
        assert_eq!(lrs[..2], [1e-3, 1e-3]);
        assert!(lrs[2..].iter().all(|&lr| (lr - 1e-4).abs() < 1e-18));
        assert_eq!(log.rows.last().unwrap().step, 8);
        assert!(log.rows.iter().all(|r| r.val_psnr.is_some() && r.mean_loss.is_finite()));
        let csv = log.to_csv();
        assert!(csv.starts_with("#schema=training_log/1 adam_beta1=0.9"));
        assert_eq!(csv.lines().count(), 6);
    }
}
