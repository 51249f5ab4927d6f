//! Empirical checks of the estimator claims: unbiasedness against a risk
//! oracle, the independent-pair identity, gradient exactness and Monte-Carlo
//! divergence consistency.

use serde::{Deserialize, Serialize};

use crate::denoiser::{Architecture, Denoiser, DenoiserKind};
use crate::error::{invalid, Error, Result};
use crate::image::Image;
use crate::noise::standard_normal_field;
use crate::pairing::{make_clean_pair, make_imperfect_gt_pair, make_uncorrelated_pair};
use crate::pairing::{PairedSample, SampleMode, SigmaMode};
use crate::risk::{
    loss_and_gradient, loss_value, mc_divergence, DivergenceMode, EpsilonPolicy, EstimatorConfig,
    LossKind,
};
use crate::rng::RngStream;

pub const DEFAULT_Z_THRESHOLD: f64 = 4.0;
pub const MIN_DRAWS: usize = 1000;

/// How each verification draw is synthesized from the fixed clean image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "setup", rename_all = "snake_case")]
pub enum NoiseSetup {
    /// `y = x + n`, the SURE setting.
    Single { sigma: f64 },
    /// Two independent realizations.
    Independent { sigma: f64 },
    /// `y1 = x + n_gt`, `y2 = y1 + z`.
    Nested {
        sigma_gt: f64,
        sigma_noisy: f64,
        #[serde(default)]
        sigma_mode: SigmaMode,
    },
}

impl NoiseSetup {
    pub fn sample(&self, clean: &Image, stream: &mut RngStream) -> Result<PairedSample> {
        match *self {
            NoiseSetup::Single { sigma } => make_clean_pair(clean, sigma, stream),
            NoiseSetup::Independent { sigma } => make_uncorrelated_pair(clean, sigma, stream),
            NoiseSetup::Nested {
                sigma_gt,
                sigma_noisy,
                sigma_mode,
            } => make_imperfect_gt_pair(clean, sigma_gt, sigma_noisy, sigma_mode, stream),
        }
    }

    /// Noise level of the denoiser input.
    pub fn input_sigma(&self) -> Result<f64> {
        Ok(match *self {
            NoiseSetup::Single { sigma } | NoiseSetup::Independent { sigma } => sigma,
            NoiseSetup::Nested {
                sigma_gt,
                sigma_noisy,
                sigma_mode,
            } => {
                let z = crate::pairing::added_sigma(sigma_gt, sigma_noisy, sigma_mode)?;
                sigma_gt.hypot(z)
            }
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OracleKind {
    ClosedForm,
    /// Mean true loss over the same draws; the z-score uses paired differences.
    BruteForce,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub estimator: LossKind,
    pub denoiser: DenoiserKind,
    pub draws: usize,
    pub mean: f64,
    pub std_error: f64,
    pub oracle: f64,
    pub oracle_kind: OracleKind,
    pub z_score: f64,
    pub threshold: f64,
    pub pass: bool,
}

impl VerificationReport {
    pub const CSV_SCHEMA: &'static str = "verification/1";
    pub const CSV_HEADER: &'static str =
        "estimator,denoiser,draws,mean,std_error,oracle,oracle_kind,z_score,threshold,pass";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{:e},{:e},{:e},{},{},{},{}",
            self.estimator,
            self.denoiser.name(),
            self.draws,
            self.mean,
            self.std_error,
            self.oracle,
            match self.oracle_kind {
                OracleKind::ClosedForm => "closed_form",
                OracleKind::BruteForce => "brute_force",
            },
            self.z_score,
            self.threshold,
            self.pass
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UnbiasednessSetup {
    pub estimator: LossKind,
    pub noise: NoiseSetup,
    pub draws: usize,
    pub seed: u64,
    pub divergence_mode: DivergenceMode,
    pub epsilon: EpsilonPolicy,
    pub threshold: f64,
}

impl UnbiasednessSetup {
    pub fn new(estimator: LossKind, noise: NoiseSetup, draws: usize, seed: u64) -> Self {
        Self {
            estimator,
            noise,
            draws,
            seed,
            divergence_mode: DivergenceMode::Analytic,
            epsilon: EpsilonPolicy::SigmaProportional {
                kappa: crate::trainer::DEFAULT_KAPPA,
            },
            threshold: DEFAULT_Z_THRESHOLD,
        }
    }
}

/// `E (1/N)||x - h(x + n)||^2` with `n ~ N(0, sigma^2 I)`, for the linear kinds.
pub fn closed_form_risk(d: &Denoiser, clean: &Image, sigma: f64) -> Option<f64> {
    let n = clean.len() as f64;
    let bias = clean.mean_squared_distance(&d.forward(clean).ok()?).ok()?;
    let s2 = sigma * sigma;
    let trace = match d.architecture() {
        Architecture::Identity => n,
        Architecture::Scaling => d.params()[0].powi(2) * n,
        Architecture::ConvFilter { kernel_size } => {
            // trace(K^T K): each tap contributes k^2 for every pixel it stays inside for
            let (h, w, c) = clean.shape().as_tuple();
            let k = *kernel_size;
            let p = (k / 2) as isize;
            let mut t = 0.0;
            for dy in 0..k {
                for dx in 0..k {
                    let oy = (dy as isize - p).unsigned_abs();
                    let ox = (dx as isize - p).unsigned_abs();
                    let count = h.saturating_sub(oy) * w.saturating_sub(ox) * c;
                    t += d.params()[dy * k + dx].powi(2) * count as f64;
                }
            }
            t
        }
        _ => return None,
    };
    Some(bias + s2 * trace / n)
}

fn mean_and_se(values: &[f64]) -> (f64, f64) {
    let k = values.len() as f64;
    let mean = values.iter().sum::<f64>() / k;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (k - 1.0);
    (mean, (var / k).sqrt())
}

fn estimator_config(mode: DivergenceMode, epsilon: EpsilonPolicy, stream: RngStream) -> EstimatorConfig {
    match mode {
        DivergenceMode::Analytic => EstimatorConfig::analytic(),
        DivergenceMode::MonteCarlo => EstimatorConfig::monte_carlo(epsilon, stream),
    }
}

/// Averages the estimator over independent noise draws at a fixed clean
/// image and compares the mean with the true risk of `h` on the input.
pub fn verify_unbiasedness(
    setup: &UnbiasednessSetup,
    d: &Denoiser,
    clean: &Image,
) -> Result<VerificationReport> {
    let closed = closed_form_risk(d, clean, setup.noise.input_sigma()?);
    verify_unbiasedness_with_oracle(setup, d, clean, closed)
}

/// As [`verify_unbiasedness`] with a caller-supplied risk. `None` falls back
/// to the brute-force paired difference against the realized loss.
pub fn verify_unbiasedness_with_oracle(
    setup: &UnbiasednessSetup,
    d: &Denoiser,
    clean: &Image,
    closed: Option<f64>,
) -> Result<VerificationReport> {
    if setup.draws < MIN_DRAWS {
        return Err(invalid(format!(
            "unbiasedness needs at least {MIN_DRAWS} draws, got {}",
            setup.draws
        )));
    }
    let probe_mode = {
        let s = setup.noise.sample(clean, &mut RngStream::derive(setup.seed, "verify/shape", &[]))?;
        s.mode
    };
    if setup.estimator == LossKind::Mse || !setup.estimator.accepts(probe_mode) {
        return Err(Error::IncompatibleData {
            loss: setup.estimator.name(),
            detail: format!("{probe_mode:?} samples in unbiasedness checks"),
        });
    }
    if setup.divergence_mode == DivergenceMode::Analytic && d.kind() == DenoiserKind::SmallCnn {
        return Err(Error::UnsupportedDivergence("small_cnn"));
    }
    let mut estimates = Vec::with_capacity(setup.draws);
    let mut diffs = Vec::with_capacity(setup.draws);
    let mut truths = Vec::with_capacity(setup.draws);
    for k in 0..setup.draws {
        let mut stream = RngStream::derive(setup.seed, "verify/noise", &[k as u64]);
        let sample = setup.noise.sample(clean, &mut stream)?;
        let mut cfg = estimator_config(
            setup.divergence_mode,
            setup.epsilon,
            RngStream::derive(setup.seed, "verify/probe", &[k as u64]),
        );
        let est = loss_value(setup.estimator, &sample, d, &mut cfg, 0)?.value;
        estimates.push(est);
        if closed.is_none() {
            let truth = clean.mean_squared_distance(&d.forward(&sample.input)?)?;
            truths.push(truth);
            diffs.push(est - truth);
        }
    }
    let (mean, se_est) = mean_and_se(&estimates);
    // zero-variance estimators (SURE of the identity) are judged against the
    // worst-case round-off of summing the draws
    let roundoff = |scale: f64| setup.draws as f64 * f64::EPSILON * scale.abs().max(mean.abs());
    let (oracle, oracle_kind, std_error, z_score) = match closed {
        Some(risk) => {
            let se = se_est.max(roundoff(risk));
            (risk, OracleKind::ClosedForm, se, (mean - risk) / se)
        }
        None => {
            let (md, se) = mean_and_se(&diffs);
            let oracle = truths.iter().sum::<f64>() / truths.len() as f64;
            let se = se.max(roundoff(oracle));
            (oracle, OracleKind::BruteForce, se, md / se)
        }
    };
    let pass = z_score.abs() <= setup.threshold;
    Ok(VerificationReport {
        estimator: setup.estimator,
        denoiser: d.kind(),
        draws: setup.draws,
        mean,
        std_error,
        oracle,
        oracle_kind,
        z_score,
        threshold: setup.threshold,
        pass,
    })
}

/// Largest `|esure - (n2n - sigma_t^2)|` over every denoiser and sample.
pub fn verify_identity_n2n(denoisers: &[Denoiser], samples: &[PairedSample]) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for s in samples {
        if s.mode != SampleMode::IndependentTarget {
            return Err(invalid(format!(
                "identity check needs independent pairs, got {:?}",
                s.mode
            )));
        }
        for d in denoisers {
            // the divergence is never evaluated for independent pairs
            let mut cfg = EstimatorConfig::analytic();
            let esure = loss_value(LossKind::Esure, s, d, &mut cfg, 0)?.value;
            let n2n = loss_value(LossKind::N2n, s, d, &mut cfg, 0)?.value;
            worst = worst.max((esure - (n2n - s.sigma_target * s.sigma_target)).abs());
        }
    }
    Ok(worst)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientReport {
    pub loss: LossKind,
    pub denoiser: DenoiserKind,
    pub coordinates: Vec<usize>,
    pub max_rel_error: f64,
    pub max_abs_gradient: f64,
}

/// Central finite differences of the batch loss against the analytic
/// gradient, on at most `max_coords` sampled coordinates. Each coordinate is
/// differenced at `fd_step` and three successive halvings of it.
///
/// The relative error of a coordinate is `|g - fd| / max(|g|, |fd|, floor)`
/// where `floor = 1e-3 * max|fd|` keeps near-zero coordinates from measuring
/// only finite-difference round-off.
pub fn verify_gradient(
    d: &Denoiser,
    batch: &[PairedSample],
    loss: LossKind,
    cfg: &EstimatorConfig,
    fd_step: f64,
    max_coords: usize,
    seed: u64,
) -> Result<GradientReport> {
    if let crate::risk::ProbeSource::Stream(_) = cfg.probes {
        if cfg.divergence_mode == DivergenceMode::MonteCarlo {
            return Err(invalid("gradient checks need frozen probes"));
        }
    }
    let (_, grad) = loss_and_gradient(loss, batch, d, &mut cfg.clone())?;
    let p = d.param_count();
    let mut coords: Vec<usize> = (0..p).collect();
    if p > max_coords {
        RngStream::derive(seed, "verify/coords", &[]).shuffle(&mut coords);
        coords.truncate(max_coords);
        coords.sort_unstable();
    }
    let eval = |theta: &[f64]| -> Result<f64> {
        let dd = d.with_params(theta)?;
        crate::risk::batch_loss(loss, batch, &dd, &mut cfg.clone())
    };
    let mut fds = Vec::with_capacity(coords.len());
    let mut theta = d.params().to_vec();
    for &i in &coords {
        let orig = theta[i];
        let mut ladder = [0.0; FD_LADDER];
        for (k, slot) in ladder.iter_mut().enumerate() {
            let h = fd_step / (1 << k) as f64;
            theta[i] = orig + h;
            let plus = eval(&theta)?;
            theta[i] = orig - h;
            let minus = eval(&theta)?;
            *slot = (plus - minus) / (2.0 * h);
        }
        theta[i] = orig;
        fds.push(settled_difference(&ladder));
    }
    let max_fd = fds.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = 1e-3 * max_fd;
    let mut max_rel: f64 = 0.0;
    for (&i, &fd) in coords.iter().zip(&fds) {
        let g = grad.0[i];
        let scale = g.abs().max(fd.abs()).max(floor);
        if scale > 0.0 {
            max_rel = max_rel.max((g - fd).abs() / scale);
        }
    }
    let max_abs_gradient = coords.iter().fold(0.0f64, |m, &i| m.max(grad.0[i].abs()));
    Ok(GradientReport {
        loss,
        denoiser: d.kind(),
        coordinates: coords,
        max_rel_error: max_rel,
        max_abs_gradient,
    })
}

const FD_LADDER: usize = 4;

/// Largest rung that agrees with the next one about as well as the best
/// adjacent pair does. A ReLU kink inside the stencil shifts the estimate by
/// orders of magnitude more than round-off, so corrupted rungs are skipped
/// while clean coordinates keep the largest, least round-off prone step.
fn settled_difference(ladder: &[f64]) -> f64 {
    let gaps: Vec<f64> = ladder.windows(2).map(|w| (w[0] - w[1]).abs()).collect();
    let best = gaps.iter().copied().fold(f64::INFINITY, f64::min);
    gaps.iter()
        .position(|&g| g <= 100.0 * best)
        .map(|k| ladder[k])
        .unwrap_or(ladder[0])
}

/// Frozen standard-normal probes, one per sample.
pub fn frozen_probes(batch: &[PairedSample], seed: u64) -> Vec<Image> {
    batch
        .iter()
        .enumerate()
        .map(|(j, s)| {
            standard_normal_field(
                &mut RngStream::derive(seed, "verify/frozen_probe", &[j as u64]),
                s.input.shape(),
            )
        })
        .collect()
}

/// Mean of `mc_divergence / N` over `draws` fresh probes.
pub fn mc_divergence_mean(
    d: &Denoiser,
    y: &Image,
    epsilon: f64,
    draws: usize,
    stream: &mut RngStream,
) -> Result<f64> {
    if draws == 0 {
        return Err(invalid("need at least one draw"));
    }
    let n = y.len() as f64;
    let mut total = 0.0;
    for _ in 0..draws {
        let probe = standard_normal_field(stream, y.shape());
        total += mc_divergence(d, y, epsilon, &probe)? / n;
    }
    Ok(total / draws as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MinimizerScan {
    pub grid: Vec<f64>,
    pub mean_loss: Vec<f64>,
    /// Grid point with the smallest mean loss.
    pub argmin: f64,
    /// Vertex of the parabola through the argmin and its neighbours.
    pub refined: f64,
}

/// Mean loss of the scaling denoiser `h(y) = a y` over a grid of `a`, with
/// every grid point evaluated on the same draws.
pub fn scan_scaling_minimizer(
    loss: LossKind,
    noise: &NoiseSetup,
    clean: &Image,
    grid: &[f64],
    draws: usize,
    seed: u64,
) -> Result<MinimizerScan> {
    if grid.len() < 3 || draws == 0 {
        return Err(invalid("scan needs at least three grid points and one draw"));
    }
    let denoisers: Vec<Denoiser> = grid.iter().map(|&a| Denoiser::scaling(a)).collect();
    let mut sums = vec![0.0; grid.len()];
    for k in 0..draws {
        let sample = noise.sample(clean, &mut RngStream::derive(seed, "scan/noise", &[k as u64]))?;
        for (s, d) in sums.iter_mut().zip(&denoisers) {
            *s += loss_value(loss, &sample, d, &mut EstimatorConfig::analytic(), 0)?.value;
        }
    }
    let mean_loss: Vec<f64> = sums.iter().map(|s| s / draws as f64).collect();
    let best = mean_loss
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i)
        .unwrap();
    let refined = if best == 0 || best + 1 == grid.len() {
        grid[best]
    } else {
        let (x0, x1, x2) = (grid[best - 1], grid[best], grid[best + 1]);
        let (f0, f1, f2) = (mean_loss[best - 1], mean_loss[best], mean_loss[best + 1]);
        let num = (x1 - x0).powi(2) * (f1 - f2) - (x1 - x2).powi(2) * (f1 - f0);
        let den = (x1 - x0) * (f1 - f2) - (x1 - x2) * (f1 - f0);
        if den == 0.0 {
            x1
        } else {
            x1 - 0.5 * num / den
        }
    };
    Ok(MinimizerScan {
        grid: grid.to_vec(),
        mean_loss,
        argmin: grid[best],
        refined,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::Shape;
    use approx::assert_abs_diff_eq;

    fn ramp(h: usize, w: usize) -> Image {
        let data = (0..h * w).map(|i| (i as f64 * 0.173).sin() * 0.5 + 0.5).collect();
        Image::from_vec(Shape::gray(h, w).unwrap(), data).unwrap()
    }

    #[test]
    fn closed_form_matches_monte_carlo_for_conv() {
        let x = ramp(6, 7);
        let d = Denoiser::conv_filter(vec![0.1, 0.2, -0.1, 0.0, 0.6, 0.1, 0.05, -0.2, 0.1]).unwrap();
        let sigma = 0.3;
        let closed = closed_form_risk(&d, &x, sigma).unwrap();
        let k = 40_000;
        let mut total = 0.0;
        for i in 0..k {
            let s = make_clean_pair(&x, sigma, &mut RngStream::derive(2, "cf", &[i])).unwrap();
            total += x.mean_squared_distance(&d.forward(&s.input).unwrap()).unwrap();
        }
        assert_abs_diff_eq!(total / k as f64, closed, epsilon = 0.02 * closed);
    }

    #[test]
    fn identity_risk_is_noise_variance() {
        let x = ramp(4, 4);
        assert_abs_diff_eq!(closed_form_risk(&Denoiser::identity(), &x, 0.2).unwrap(), 0.04, epsilon = 1e-15);
        assert!(closed_form_risk(&Denoiser::soft_threshold(0.1), &x, 0.2).is_none());
    }

    #[test]
    fn too_few_draws_rejected() {
        let setup = UnbiasednessSetup::new(LossKind::Sure, NoiseSetup::Single { sigma: 0.1 }, 10, 0);
        assert!(verify_unbiasedness(&setup, &Denoiser::identity(), &ramp(4, 4)).is_err());
    }

    #[test]
    fn identity_check_rejects_nested_pairs() {
        let x = ramp(4, 4);
        let s = NoiseSetup::Nested { sigma_gt: 0.1, sigma_noisy: 0.2, sigma_mode: SigmaMode::TotalSigma }
            .sample(&x, &mut RngStream::derive(0, "t", &[]))
            .unwrap();
        assert!(verify_identity_n2n(&[Denoiser::identity()], &[s]).is_err());
    }

    #[test]
    fn scan_finds_parabola_vertex() {
        let x = ramp(8, 8);
        let grid: Vec<f64> = (0..=20).map(|i| i as f64 * 0.05).collect();
        let scan = scan_scaling_minimizer(
            LossKind::Sure,
            &NoiseSetup::Single { sigma: 0.0 },
            &x,
            &grid,
            3,
            0,
        )
        .unwrap();
        // noiseless: loss (1-a)^2 S is minimized at a = 1
        assert_eq!(scan.argmin, 1.0);
    }
}
