//! Risk estimators used as training losses, and their parameter gradients.
//!
//! Every loss is normalized per entry (`1/N`) so that a minibatch loss is a
//! plain mean over samples:
//!
//! * `mse`   `(1/N)||x - h(y)||^2` against a clean target
//! * `sure`  `(1/N)||y - h(y)||^2 - s^2 + (2 s^2/N) div h(y)`
//! * `esure` `(1/N)||y1 - h(y2)||^2 - s1^2 + (2 s1^2/N) div h(y2)` for a nested
//!   pair; for an independent pair the divergence coefficient is zero
//! * `n2n`   `(1/N)||z - h(y)||^2`
//!
//! The divergence is either analytic or the Monte-Carlo estimate
//! `(1/eps) n^T (h(y + eps n) - h(y))` with a standard-normal probe `n`.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::denoiser::{Denoiser, ParamGradient, Trace};
use crate::error::{invalid, Error, Result};
use crate::image::{Image, Shape};
use crate::noise::standard_normal_field;
use crate::pairing::{PairedSample, SampleMode};
use crate::rng::RngStream;
use crate::trainer::epsilon_rule;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Mse,
    Sure,
    Esure,
    N2n,
}

impl LossKind {
    pub fn name(&self) -> &'static str {
        match self {
            LossKind::Mse => "mse",
            LossKind::Sure => "sure",
            LossKind::Esure => "esure",
            LossKind::N2n => "n2n",
        }
    }

    /// Whether a sample of `mode` carries what this loss needs.
    pub fn accepts(&self, mode: SampleMode) -> bool {
        match self {
            LossKind::Mse => mode == SampleMode::CleanTarget,
            LossKind::Sure => true,
            LossKind::Esure | LossKind::N2n => mode != SampleMode::CleanTarget,
        }
    }

    fn check(&self, mode: SampleMode) -> Result<()> {
        if self.accepts(mode) {
            Ok(())
        } else {
            Err(Error::IncompatibleData {
                loss: self.name(),
                detail: format!("{mode:?} samples"),
            })
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DivergenceMode {
    Analytic,
    #[default]
    MonteCarlo,
}

/// Perturbation step of the Monte-Carlo divergence.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EpsilonPolicy {
    Fixed(f64),
    /// `eps = kappa * sigma` with sigma in 0-255 units, converted to working units.
    SigmaProportional { kappa: f64 },
}

impl EpsilonPolicy {
    pub fn for_sigma(&self, sigma: f64) -> f64 {
        match *self {
            EpsilonPolicy::Fixed(eps) => eps,
            EpsilonPolicy::SigmaProportional { kappa } => epsilon_rule(sigma * 255.0, kappa),
        }
    }
}

/// Where MC probe vectors come from: a stream (fresh probe per sample per
/// call) or a frozen list indexed by sample position, for gradient checks.
#[derive(Debug, Clone)]
pub enum ProbeSource {
    Stream(RngStream),
    Frozen(Vec<Image>),
}

impl ProbeSource {
    fn probe(&mut self, index: usize, shape: Shape) -> Result<Image> {
        match self {
            ProbeSource::Stream(stream) => Ok(standard_normal_field(stream, shape)),
            ProbeSource::Frozen(probes) => {
                let p = probes
                    .get(index)
                    .ok_or_else(|| invalid(format!("no frozen probe for sample {index}")))?;
                if p.shape() != shape {
                    return Err(Error::ShapeMismatch {
                        expected: shape.as_tuple(),
                        actual: p.shape().as_tuple(),
                    });
                }
                Ok(p.clone())
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct EstimatorConfig {
    pub epsilon: EpsilonPolicy,
    pub divergence_mode: DivergenceMode,
    pub probes: ProbeSource,
}

impl EstimatorConfig {
    pub fn analytic() -> Self {
        Self {
            epsilon: EpsilonPolicy::Fixed(1e-3),
            divergence_mode: DivergenceMode::Analytic,
            probes: ProbeSource::Frozen(vec![]),
        }
    }

    pub fn monte_carlo(epsilon: EpsilonPolicy, stream: RngStream) -> Self {
        Self {
            epsilon,
            divergence_mode: DivergenceMode::MonteCarlo,
            probes: ProbeSource::Stream(stream),
        }
    }

    pub fn frozen(epsilon: EpsilonPolicy, probes: Vec<Image>) -> Self {
        Self {
            epsilon,
            divergence_mode: DivergenceMode::MonteCarlo,
            probes: ProbeSource::Frozen(probes),
        }
    }
}

/// A scalar risk estimate with what produced it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstimateValue {
    pub value: f64,
    pub kind: LossKind,
    pub epsilon: Option<f64>,
    pub divergence_mode: Option<DivergenceMode>,
}

impl EstimateValue {
    fn plain(value: f64, kind: LossKind) -> Result<Self> {
        finite(value, kind)?;
        Ok(Self {
            value,
            kind,
            epsilon: None,
            divergence_mode: None,
        })
    }
}

fn finite(value: f64, kind: LossKind) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("{kind} loss evaluated to {value}")))
    }
}

/// `(1/N) ||clean - h(input)||^2`
pub fn mse_loss(d: &Denoiser, input: &Image, clean: &Image) -> Result<EstimateValue> {
    input.ensure_same_shape(clean)?;
    let out = d.forward(input)?;
    EstimateValue::plain(clean.mean_squared_distance(&out)?, LossKind::Mse)
}

/// `(1/N) ||target - h(input)||^2`
pub fn n2n_loss(d: &Denoiser, input: &Image, target: &Image) -> Result<EstimateValue> {
    input.ensure_same_shape(target)?;
    let out = d.forward(input)?;
    EstimateValue::plain(target.mean_squared_distance(&out)?, LossKind::N2n)
}

/// Unnormalized Monte-Carlo divergence `(1/eps) n^T (h(y + eps n) - h(y))`.
pub fn mc_divergence(d: &Denoiser, y: &Image, epsilon: f64, probe: &Image) -> Result<f64> {
    if !(epsilon > 0.0) {
        return Err(invalid(format!("MC divergence needs epsilon > 0, got {epsilon}")));
    }
    y.ensure_same_shape(probe)?;
    let base = d.forward(y)?;
    let shifted = d.forward(&y.add_scaled(probe, epsilon)?)?;
    Ok(probe.dot(&shifted.sub(&base)?)? / epsilon)
}

/// SURE for a single noisy observation `y` with noise level `sigma`.
pub fn sure_loss(
    d: &Denoiser,
    y: &Image,
    sigma: f64,
    cfg: &mut EstimatorConfig,
) -> Result<EstimateValue> {
    if !(sigma >= 0.0) {
        return Err(invalid(format!("sigma must be >= 0, got {sigma}")));
    }
    let sample = PairedSample {
        input: y.clone(),
        target: y.clone(),
        sigma_input: sigma,
        sigma_target: 0.0,
        mode: SampleMode::CleanTarget,
    };
    let terms = evaluate(LossKind::Sure, &sample, d, cfg, 0, false)?;
    Ok(terms.estimate)
}

/// Extended SURE on a nested pair, or its divergence-free form on an
/// independent pair.
pub fn esure_loss(
    sample: &PairedSample,
    d: &Denoiser,
    cfg: &mut EstimatorConfig,
) -> Result<EstimateValue> {
    Ok(evaluate(LossKind::Esure, sample, d, cfg, 0, false)?.estimate)
}

/// Value of any loss on one sample; `index` selects the frozen probe.
pub fn loss_value(
    kind: LossKind,
    sample: &PairedSample,
    d: &Denoiser,
    cfg: &mut EstimatorConfig,
    index: usize,
) -> Result<EstimateValue> {
    Ok(evaluate(kind, sample, d, cfg, index, false)?.estimate)
}

/// Mean loss over a batch.
pub fn batch_loss(
    kind: LossKind,
    samples: &[PairedSample],
    d: &Denoiser,
    cfg: &mut EstimatorConfig,
) -> Result<f64> {
    if samples.is_empty() {
        return Err(invalid("empty batch"));
    }
    let mut total = 0.0;
    for (j, s) in samples.iter().enumerate() {
        total += evaluate(kind, s, d, cfg, j, false)?.estimate.value;
    }
    Ok(total / samples.len() as f64)
}

/// Mean loss and its exact parameter gradient over a batch.
pub fn loss_and_gradient(
    kind: LossKind,
    samples: &[PairedSample],
    d: &Denoiser,
    cfg: &mut EstimatorConfig,
) -> Result<(f64, ParamGradient)> {
    if samples.is_empty() {
        return Err(invalid("empty batch"));
    }
    for s in samples {
        kind.check(s.mode)?;
    }
    let mut total = 0.0;
    let mut grad = ParamGradient::zeros(d.param_count());
    for (j, s) in samples.iter().enumerate() {
        let terms = evaluate(kind, s, d, cfg, j, true)?;
        total += terms.estimate.value;
        grad.add_scaled(&terms.gradient.expect("gradient requested"), 1.0);
    }
    let m = samples.len() as f64;
    grad.scale(1.0 / m);
    if !grad.all_finite() {
        return Err(Error::NonFinite(format!("{kind} gradient")));
    }
    Ok((total / m, grad))
}

/// Gradient of the minibatch-mean loss.
pub fn loss_gradient(
    kind: LossKind,
    samples: &[PairedSample],
    d: &Denoiser,
    cfg: &mut EstimatorConfig,
) -> Result<ParamGradient> {
    Ok(loss_and_gradient(kind, samples, d, cfg)?.1)
}

struct Terms {
    estimate: EstimateValue,
    gradient: Option<ParamGradient>,
}

/// Shared evaluation of every loss: fidelity term, constant and divergence
/// correction, plus the reverse-mode gradient when asked for.
fn evaluate(
    kind: LossKind,
    sample: &PairedSample,
    d: &Denoiser,
    cfg: &mut EstimatorConfig,
    index: usize,
    want_grad: bool,
) -> Result<Terms> {
    kind.check(sample.mode)?;
    let input = &sample.input;
    input.ensure_same_shape(&sample.target)?;
    let n = input.len() as f64;

    // fidelity target, subtracted constant and divergence coefficient
    let (target, constant, div_coeff) = match kind {
        LossKind::Mse | LossKind::N2n => (&sample.target, 0.0, 0.0),
        LossKind::Sure => {
            let s2 = sample.sigma_input * sample.sigma_input;
            (input, s2, 2.0 * s2 / n)
        }
        LossKind::Esure => {
            let s2 = sample.sigma_target * sample.sigma_target;
            let coeff = match sample.mode {
                SampleMode::NestedTarget => 2.0 * s2 / n,
                _ => 0.0,
            };
            (&sample.target, s2, coeff)
        }
    };

    let (out, trace) = if want_grad {
        let (o, t) = d.forward_traced(input)?;
        (o, Some(t))
    } else {
        (d.forward(input)?, None)
    };
    let residual = target.sub(&out)?;
    let mut value = residual.squared_norm() / n - constant;
    // d/dh of (1/N)||t - h||^2
    let mut cotangent = residual.scale(-2.0 / n);
    let mut gradient = None;
    let mut eps_used = None;
    let mut mode_used = None;

    let mut extra_grad: Option<ParamGradient> = None;
    if div_coeff != 0.0 {
        mode_used = Some(cfg.divergence_mode);
        match cfg.divergence_mode {
            DivergenceMode::Analytic => {
                value += div_coeff * d.analytic_divergence(input)?;
                if want_grad {
                    let mut g = d.analytic_divergence_param_grad(input)?;
                    g.scale(div_coeff);
                    extra_grad = Some(g);
                }
            }
            DivergenceMode::MonteCarlo => {
                let eps = cfg.epsilon.for_sigma(sample.sigma_input);
                if !(eps > 0.0) {
                    return Err(invalid(format!(
                        "MC divergence needs epsilon > 0, got {eps} for sigma {}",
                        sample.sigma_input
                    )));
                }
                eps_used = Some(eps);
                let probe = cfg.probes.probe(index, input.shape())?;
                let shifted_in = input.add_scaled(&probe, eps)?;
                let (shifted, shifted_trace) = if want_grad {
                    let (o, t) = d.forward_traced(&shifted_in)?;
                    (o, Some(t))
                } else {
                    (d.forward(&shifted_in)?, None)
                };
                let div = probe.dot(&shifted.sub(&out)?)? / eps;
                value += div_coeff * div;
                if let Some(st) = shifted_trace {
                    let c = div_coeff / eps;
                    cotangent = cotangent.add_scaled(&probe, -c)?;
                    extra_grad = Some(d.vjp(&st, &probe.scale(c))?);
                }
            }
        }
    }
    finite(value, kind)?;

    if let Some(trace) = trace.as_ref() {
        let mut g = vjp_or_zero(d, trace, &cotangent)?;
        if let Some(extra) = extra_grad {
            g.add_scaled(&extra, 1.0);
        }
        gradient = Some(g);
    }

    Ok(Terms {
        estimate: EstimateValue {
            value,
            kind,
            epsilon: eps_used,
            divergence_mode: mode_used,
        },
        gradient,
    })
}

fn vjp_or_zero(d: &Denoiser, trace: &Trace, cotangent: &Image) -> Result<ParamGradient> {
    if d.param_count() == 0 {
        return Ok(ParamGradient::zeros(0));
    }
    d.vjp(trace, cotangent)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::Shape;
    use crate::noise::gaussian_field;
    use approx::assert_abs_diff_eq;

    fn rand_image(seed: u64, h: usize, w: usize, sigma: f64) -> Image {
        gaussian_field(
            &mut RngStream::derive(seed, "risk-test", &[]),
            Shape::gray(h, w).unwrap(),
            sigma,
        )
        .unwrap()
    }

    #[test]
    fn mse_examples() {
        let x = rand_image(1, 4, 4, 1.0);
        assert_eq!(mse_loss(&Denoiser::identity(), &x, &x).unwrap().value, 0.0);
        let clean = Image::from_row(&[3.0, 4.0]);
        let v = mse_loss(&Denoiser::scaling(0.0), &clean, &clean).unwrap().value;
        assert_eq!(v, 12.5);
        let v = mse_loss(&Denoiser::scaling(0.5), &x, &x).unwrap().value;
        assert_abs_diff_eq!(v, 0.25 * x.squared_norm() / x.len() as f64, epsilon = 1e-14);
    }

    #[test]
    fn n2n_examples() {
        let a = Image::from_row(&[1.0, 0.0]);
        let b = Image::from_row(&[0.0, 1.0]);
        assert_eq!(n2n_loss(&Denoiser::identity(), &a, &b).unwrap().value, 1.0);
        assert_eq!(n2n_loss(&Denoiser::identity(), &a, &a).unwrap().value, 0.0);
        assert!(n2n_loss(&Denoiser::identity(), &a, &Image::from_row(&[1.0])).is_err());
    }

    #[test]
    fn sure_examples() {
        let mut cfg = EstimatorConfig::analytic();
        let y = rand_image(2, 5, 5, 1.0);
        let v = sure_loss(&Denoiser::identity(), &y, 0.1, &mut cfg).unwrap().value;
        assert_abs_diff_eq!(v, 0.01, epsilon = 1e-15);
        // 0.25 * (8/2) - 1 + (2/2) * 0.5 * 2
        let y = Image::from_row(&[2.0, 2.0]);
        let v = sure_loss(&Denoiser::scaling(0.5), &y, 1.0, &mut cfg).unwrap().value;
        assert_abs_diff_eq!(v, 1.0, epsilon = 1e-15);
    }

    #[test]
    fn sure_analytic_on_cnn_is_unsupported() {
        use crate::denoiser::{build_denoiser, DenoiserConfig};
        let d = build_denoiser(
            &DenoiserConfig::SmallCnn {
                spec: Default::default(),
                precision: Default::default(),
            },
            &mut RngStream::derive(0, "init", &[]),
        )
        .unwrap();
        let y = rand_image(3, 4, 4, 1.0);
        let err = sure_loss(&d, &y, 0.1, &mut EstimatorConfig::analytic()).unwrap_err();
        assert!(matches!(err, Error::UnsupportedDivergence(_)));
    }

    #[test]
    fn mc_divergence_linear_examples() {
        let y = Image::from_row(&[0.3, -0.1]);
        let probe = Image::from_row(&[1.0, -1.0]);
        for eps in [1e-6, 0.1, 3.0] {
            let v = mc_divergence(&Denoiser::scaling(0.7), &y, eps, &probe).unwrap();
            assert_abs_diff_eq!(v, 1.4, epsilon = 1e-9);
        }
        let probe = rand_image(5, 6, 6, 1.0);
        let y = rand_image(6, 6, 6, 1.0);
        let v = mc_divergence(&Denoiser::identity(), &y, 0.01, &probe).unwrap();
        assert_abs_diff_eq!(v, probe.squared_norm(), epsilon = 1e-9 * probe.squared_norm());
        assert!(mc_divergence(&Denoiser::identity(), &y, 0.0, &probe).is_err());
    }

    #[test]
    fn esure_nested_example() {
        let sample = PairedSample::new(
            Image::from_row(&[1.2, 0.8]),
            Image::from_row(&[1.0, 1.0]),
            0.2,
            0.1,
            SampleMode::NestedTarget,
        )
        .unwrap();
        let v = esure_loss(&sample, &Denoiser::identity(), &mut EstimatorConfig::analytic())
            .unwrap()
            .value;
        // 0.04 - 0.01 + 2 * 0.01
        assert_abs_diff_eq!(v, 0.05, epsilon = 1e-15);
    }

    #[test]
    fn esure_rejects_clean_target() {
        let x = rand_image(1, 3, 3, 1.0);
        let s = PairedSample::clean(x);
        assert!(esure_loss(&s, &Denoiser::identity(), &mut EstimatorConfig::analytic()).is_err());
        assert!(loss_gradient(LossKind::Esure, &[s], &Denoiser::identity(), &mut EstimatorConfig::analytic()).is_err());
    }

    #[test]
    fn esure_independent_is_n2n_minus_constant() {
        let s = PairedSample::new(
            rand_image(1, 5, 5, 1.0),
            rand_image(2, 5, 5, 1.0),
            0.3,
            0.3,
            SampleMode::IndependentTarget,
        )
        .unwrap();
        let d = Denoiser::scaling(0.6);
        let mut cfg = EstimatorConfig::analytic();
        let e = esure_loss(&s, &d, &mut cfg).unwrap().value;
        let n = n2n_loss(&d, &s.input, &s.target).unwrap().value;
        assert_abs_diff_eq!(e, n - 0.09, epsilon = 1e-12);
    }

    #[test]
    fn scaling_sure_gradient_example() {
        let y = Image::from_row(&[2.0, 2.0]);
        let s = PairedSample {
            input: y.clone(),
            target: y,
            sigma_input: 1.0,
            sigma_target: 0.0,
            mode: SampleMode::CleanTarget,
        };
        let g = loss_gradient(
            LossKind::Sure,
            &[s],
            &Denoiser::scaling(0.5),
            &mut EstimatorConfig::analytic(),
        )
        .unwrap();
        assert_abs_diff_eq!(g.0[0], -2.0, epsilon = 1e-14);
    }

    #[test]
    fn mse_requires_clean_targets() {
        let s = PairedSample::new(
            rand_image(1, 3, 3, 1.0),
            rand_image(2, 3, 3, 1.0),
            0.1,
            0.1,
            SampleMode::IndependentTarget,
        )
        .unwrap();
        let err = loss_gradient(LossKind::Mse, &[s], &Denoiser::scaling(1.0), &mut EstimatorConfig::analytic());
        assert!(matches!(err, Err(Error::IncompatibleData { .. })));
    }

    #[test]
    fn zero_sigma_skips_divergence() {
        let y = rand_image(4, 3, 3, 1.0);
        let mut cfg = EstimatorConfig::monte_carlo(
            EpsilonPolicy::SigmaProportional { kappa: 1.6e-4 },
            RngStream::derive(0, "probe", &[]),
        );
        let v = sure_loss(&Denoiser::scaling(0.5), &y, 0.0, &mut cfg).unwrap();
        assert_eq!(v.epsilon, None);
        assert_abs_diff_eq!(v.value, 0.25 * y.squared_norm() / 9.0, epsilon = 1e-15);
    }
}
