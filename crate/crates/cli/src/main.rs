//! `esure`: dataset synthesis, training, evaluation, estimator verification
//! and comparison campaigns.
//!
//! Exit status: 0 on success or a passing check, 1 when a verification does
//! not come out as expected, 2 on usage, configuration or runtime errors.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::*;
use esure_core::checkpoint::{load_checkpoint, save_checkpoint};
use esure_core::dataset::{materialize, DatasetManifest, TrainingData};
use esure_core::harness::{
    append_csv, evaluate_psnr, frozen_probes, run_experiment, test_set, verify_gradient,
    verify_identity_n2n, verify_unbiasedness, CampaignConfig, CampaignOutputs,
    UnbiasednessSetup, VerificationReport,
};
use esure_core::io::{write_image, ImageFormat};
use esure_core::risk::{DivergenceMode, EpsilonPolicy, EstimatorConfig};
use esure_core::synthetic::synthetic_image;
use esure_core::trainer::train;
use esure_core::{Denoiser, DenoiserConfig, DenoiserKind, Error, Image, Result, RngStream};

#[derive(Parser)]
#[command(name = "esure", version, about = "Unbiased risk estimators for Gaussian denoising")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// JSON job description.
    config: PathBuf,
    /// Overrides the seed in the job description.
    #[arg(long)]
    seed: Option<u64>,
    /// Output path (file or directory, depending on the command).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Materialize a noisy training set and its manifest.
    Synth(Common),
    /// Train a denoiser on a dataset manifest.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: PathBuf,
        /// Training log CSV; defaults to `<out>.log.csv`.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// PSNR of a checkpoint on noisy test images.
    Eval(Common),
    /// Estimator verification.
    #[command(subcommand)]
    Verify(Verify),
    /// Run a comparison campaign.
    Experiment(Common),
}

#[derive(Subcommand)]
enum Verify {
    /// Estimator mean against the true risk over many noise draws.
    Unbiasedness(Common),
    /// eSURE on independent pairs against Noise2Noise minus the target variance.
    Identity(Common),
    /// Loss gradient against central finite differences.
    Gradient(Common),
}

enum Outcome {
    Pass,
    Fail,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(c) => synth(&c),
        Command::Train { common, manifest, log } => train_cmd(&common, &manifest, log.as_deref()),
        Command::Eval(c) => eval(&c),
        Command::Verify(Verify::Unbiasedness(c)) => unbiasedness(&c),
        Command::Verify(Verify::Identity(c)) => identity(&c),
        Command::Verify(Verify::Gradient(c)) => gradient(&c),
        Command::Experiment(c) => experiment(&c),
    };
    match result {
        Ok(Outcome::Pass) => ExitCode::SUCCESS,
        Ok(Outcome::Fail) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn base_dir(config: &Path) -> PathBuf {
    config.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|source| Error::Unwritable {
        path: dir.to_path_buf(),
        source,
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|source| Error::Unwritable {
        path: path.to_path_buf(),
        source,
    })
}

fn synth(c: &Common) -> Result<Outcome> {
    let job: SynthJob = read_json(&c.config)?;
    let mut manifest = job.manifest;
    if let Some(seed) = c.seed {
        manifest.seed = seed;
    }
    let mut base = base_dir(&c.config);
    create_dir(&c.out)?;
    if let Some(corpus) = &job.generate {
        let source = c.out.join("source");
        create_dir(&source)?;
        let (train, test) = corpus.load(manifest.seed, &base)?;
        manifest.train_images.clear();
        manifest.validation_images.clear();
        for (i, img) in train.iter().enumerate() {
            let name = PathBuf::from(format!("train_{i:04}.esdn"));
            write_image(img, &source.join(&name), ImageFormat::TensorF32)?;
            manifest.train_images.push(name);
        }
        for (i, img) in test.iter().enumerate() {
            let name = PathBuf::from(format!("test_{i:04}.esdn"));
            write_image(img, &source.join(&name), ImageFormat::TensorF32)?;
            manifest.validation_images.push(name);
        }
        base = source;
    }
    if manifest.train_images.is_empty() {
        return Err(Error::Config("manifest lists no training images".into()));
    }
    let out = materialize(&manifest, &base, &c.out)?;
    out.save(&c.out.join("manifest.json"))?;
    println!(
        "wrote {} samples for {} images to {}",
        out.materialized.len(),
        out.train_images.len(),
        c.out.display()
    );
    Ok(Outcome::Pass)
}

fn train_cmd(c: &Common, manifest_path: &Path, log: Option<&Path>) -> Result<Outcome> {
    let mut job: TrainJob = read_json(&c.config)?;
    if let Some(seed) = c.seed {
        job.train.global_seed = seed;
    }
    job.train.validate()?;
    let manifest = DatasetManifest::load(manifest_path)?;
    let data = TrainingData::from_manifest(&manifest, &base_dir(manifest_path))?;
    let init = job.denoiser.load(&base_dir(&c.config), job.train.global_seed)?;
    let (model, train_log) = train(&job.train, &data, &init)?;
    save_checkpoint(&model, Some(&job.train.digest()), &c.out)?;
    let log_path = log.map(Path::to_path_buf).unwrap_or_else(|| {
        let mut p = c.out.clone().into_os_string();
        p.push(".log.csv");
        PathBuf::from(p)
    });
    train_log.write_csv(&log_path)?;
    if let Some(last) = train_log.rows.last() {
        println!(
            "trained {} epochs ({} steps), final mean loss {:.6e}{}",
            last.epoch + 1,
            last.step,
            last.mean_loss,
            last.val_psnr.map(|p| format!(", validation {p:.3} dB")).unwrap_or_default()
        );
    }
    Ok(Outcome::Pass)
}

fn eval(c: &Common) -> Result<Outcome> {
    let mut job: EvalJob = read_json(&c.config)?;
    if let Some(seed) = c.seed {
        job.eval_seed = seed;
    }
    let base = base_dir(&c.config);
    let (model, _) = load_checkpoint(&resolve(&base, &job.checkpoint))?;
    let cleans: Vec<Image> = match &job.corpus {
        Some(corpus) => corpus.load(job.corpus_seed, &base)?.1,
        None => job
            .images
            .iter()
            .map(|p| esure_core::io::read_image_auto(&resolve(&base, p)))
            .collect::<Result<_>>()?,
    };
    let set = test_set(&cleans, job.sigma_255, job.eval_seed)?;
    let report = evaluate_psnr(&model, &set)?;
    if let Some(dir) = &job.denoised_dir {
        let dir = resolve(&base, dir);
        create_dir(&dir)?;
        for (i, (_, noisy)) in set.iter().enumerate() {
            let out = model.forward(noisy)?;
            write_image(&out, &dir.join(format!("denoised_{i:04}.pgm")), ImageFormat::Pgm8)?;
        }
    }
    write_text(&c.out, &report.to_csv())?;
    println!("mean PSNR {:.3} dB over {} images", report.mean, report.per_image.len());
    Ok(Outcome::Pass)
}

fn unbiasedness(c: &Common) -> Result<Outcome> {
    let mut job: UnbiasednessJob = read_json(&c.config)?;
    if let Some(seed) = c.seed {
        job.seed = seed;
    }
    let base = base_dir(&c.config);
    let d = job.denoiser.load(&base, job.seed)?;
    let clean = job.image.load(&base, job.seed)?;
    let mut setup = UnbiasednessSetup::new(job.estimator, job.noise.normalized(), job.draws, job.seed);
    setup.threshold = job.threshold;
    setup.epsilon = EpsilonPolicy::SigmaProportional { kappa: job.kappa };
    setup.divergence_mode = job.divergence_mode.unwrap_or(if d.kind() == DenoiserKind::SmallCnn {
        DivergenceMode::MonteCarlo
    } else {
        DivergenceMode::Analytic
    });
    let report = verify_unbiasedness(&setup, &d, &clean)?;
    append_csv(
        &c.out,
        VerificationReport::CSV_SCHEMA,
        VerificationReport::CSV_HEADER,
        &[report.csv_row()],
    )?;
    let expected = match job.expect {
        Expectation::Unbiased => report.pass,
        Expectation::Biased => !report.pass,
    };
    println!(
        "{} / {}: mean {:.6e}, oracle {:.6e}, z = {:.2} (threshold {}), expected {:?}: {}",
        report.estimator,
        report.denoiser.name(),
        report.mean,
        report.oracle,
        report.z_score,
        report.threshold,
        job.expect,
        if expected { "ok" } else { "MISMATCH" }
    );
    Ok(if expected { Outcome::Pass } else { Outcome::Fail })
}

fn default_zoo() -> Vec<DenoiserSource> {
    vec![
        DenoiserSource::Build {
            config: DenoiserConfig::Identity,
            params: None,
        },
        DenoiserSource::Build {
            config: DenoiserConfig::Scaling,
            params: Some(vec![0.7]),
        },
        DenoiserSource::Build {
            config: DenoiserConfig::ConvFilter { kernel_size: 3 },
            params: Some(vec![0.05, 0.1, 0.05, 0.1, 0.4, 0.1, 0.05, 0.1, 0.05]),
        },
        DenoiserSource::default(),
    ]
}

/// Perturbs every parameter so the identity-start CNN is not trivially the identity.
fn jitter(d: Denoiser, seed: u64) -> Result<Denoiser> {
    if d.kind() != DenoiserKind::SmallCnn {
        return Ok(d);
    }
    let mut rng = RngStream::derive(seed, "cli/jitter", &[]);
    let p: Vec<f64> = d.params().iter().map(|v| v + 0.05 * rng.standard_normal()).collect();
    d.with_params(&p)
}

fn identity(c: &Common) -> Result<Outcome> {
    let mut job: IdentityJob = read_json(&c.config)?;
    if let Some(seed) = c.seed {
        job.seed = seed;
    }
    let base = base_dir(&c.config);
    let denoisers = job
        .denoisers
        .clone()
        .unwrap_or_else(default_zoo)
        .iter()
        .map(|s| jitter(s.load(&base, job.seed)?, job.seed))
        .collect::<Result<Vec<_>>>()?;
    let clean = job.image.load(&base, job.seed)?;
    let noise = Noise255::Independent {
        sigma_255: job.sigma_255,
    }
    .normalized();
    let samples = (0..job.samples)
        .map(|k| noise.sample(&clean, &mut RngStream::derive(job.seed, "cli/identity", &[k as u64])))
        .collect::<Result<Vec<_>>>()?;
    let worst = verify_identity_n2n(&denoisers, &samples)?;
    let pass = worst <= job.tolerance;
    append_csv(
        &c.out,
        "identity/1",
        "samples,denoisers,max_deviation,tolerance,pass",
        &[format!(
            "{},{},{:e},{:e},{}",
            job.samples,
            denoisers.len(),
            worst,
            job.tolerance,
            pass
        )],
    )?;
    println!(
        "max |esure - (n2n - sigma_t^2)| = {worst:.3e} over {} samples x {} denoisers: {}",
        job.samples,
        denoisers.len(),
        if pass { "ok" } else { "FAIL" }
    );
    Ok(if pass { Outcome::Pass } else { Outcome::Fail })
}

fn gradient(c: &Common) -> Result<Outcome> {
    let mut job: GradientJob = read_json(&c.config)?;
    if let Some(seed) = c.seed {
        job.seed = seed;
    }
    let base = base_dir(&c.config);
    let d = jitter(job.denoiser.load(&base, job.seed)?, job.seed)?;
    let noise = job.noise.normalized();
    let batch = (0..job.batch_size)
        .map(|j| {
            let clean = synthetic_image(job.seed, "gradient", j, job.patch_size);
            noise.sample(&clean, &mut RngStream::derive(job.seed, "cli/gradient", &[j as u64]))
        })
        .collect::<Result<Vec<_>>>()?;
    let epsilon = EpsilonPolicy::SigmaProportional { kappa: job.kappa };
    let cfg = match job.divergence_mode.unwrap_or(DivergenceMode::MonteCarlo) {
        DivergenceMode::Analytic => EstimatorConfig::analytic(),
        DivergenceMode::MonteCarlo => EstimatorConfig::frozen(epsilon, frozen_probes(&batch, job.seed)),
    };
    let report = verify_gradient(&d, &batch, job.loss, &cfg, job.fd_step, job.max_coords, job.seed)?;
    let pass = report.max_rel_error <= job.tolerance;
    append_csv(
        &c.out,
        "gradient/1",
        "loss,denoiser,coordinates,max_rel_error,tolerance,pass",
        &[format!(
            "{},{},{},{:e},{:e},{}",
            report.loss,
            report.denoiser.name(),
            report.coordinates.len(),
            report.max_rel_error,
            job.tolerance,
            pass
        )],
    )?;
    println!(
        "{} / {}: max relative error {:.3e} over {} coordinates: {}",
        report.loss,
        report.denoiser.name(),
        report.max_rel_error,
        report.coordinates.len(),
        if pass { "ok" } else { "FAIL" }
    );
    Ok(if pass { Outcome::Pass } else { Outcome::Fail })
}

fn experiment(c: &Common) -> Result<Outcome> {
    let mut cfg: CampaignConfig = read_json(&c.config)?;
    if let Some(seed) = c.seed {
        cfg.seed = seed;
    }
    let outputs = CampaignOutputs {
        dir: c.out.clone(),
        save_checkpoints: true,
    };
    println!("corpus: {}", cfg.corpus.describe());
    let results = run_experiment(&cfg, &base_dir(&c.config), Some(&outputs), |r| {
        println!(
            "{:6} {:13} sigma_gt {:>4}  {:.3} dB (std {:.3})",
            r.method,
            r.regime,
            r.sigma_gt_255.map(|v| v.to_string()).unwrap_or_else(|| "-".into()),
            r.psnr_mean_db,
            r.psnr_std_db
        );
    })?;
    write_text(
        &c.out.join("config.json"),
        &serde_json::to_string_pretty(&cfg).map_err(Error::from)?,
    )?;
    println!("{} runs written to {}", results.len(), outputs.metrics().display());
    Ok(Outcome::Pass)
}

