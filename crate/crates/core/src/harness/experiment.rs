//! PSNR evaluation and the desk-scale comparison campaigns.

use std::fs::OpenOptions;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::{digest_json, save_checkpoint};
use crate::dataset::{NoiseLevel, Regime, TrainingData};
use crate::denoiser::{build_denoiser, Denoiser, DenoiserConfig};
use crate::error::{invalid, Error, Result};
use crate::image::Image;
use crate::io::read_image_auto;
use crate::metrics::{mean_std, psnr};
use crate::noise::sigma_from_255;
use crate::pairing::SigmaMode;
use crate::risk::LossKind;
use crate::rng::RngStream;
use crate::synthetic::synthetic_corpus;
use crate::trainer::{train, validation_set, TrainConfig};

pub const METRICS_SCHEMA: &str = "metrics/1";
pub const PLOT_SCHEMA: &str = "plot_data/1";
pub const EVAL_SCHEMA: &str = "eval/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_image: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut out = format!("#schema={EVAL_SCHEMA}\nimage,psnr_db\n");
        for (i, p) in self.per_image.iter().enumerate() {
            out.push_str(&format!("{i},{p}\n"));
        }
        out.push_str(&format!("mean,{}\n", self.mean));
        out
    }
}

/// PSNR (peak 1) of `d` on `(clean, noisy)` pairs.
pub fn evaluate_psnr(d: &Denoiser, set: &[(Image, Image)]) -> Result<EvalReport> {
    if set.is_empty() {
        return Err(invalid("empty evaluation set"));
    }
    let per_image = set
        .iter()
        .map(|(clean, noisy)| psnr(clean, &d.forward(noisy)?, 1.0))
        .collect::<Result<Vec<_>>>()?;
    let (mean, std) = mean_std(&per_image);
    if !mean.is_finite() {
        return Err(Error::NonFinite("evaluation PSNR".into()));
    }
    Ok(EvalReport {
        per_image,
        mean,
        std,
    })
}

/// Noisy test instances for `cleans` at `sigma_255`, fixed by `eval_seed`.
pub fn test_set(cleans: &[Image], sigma_255: f64, eval_seed: u64) -> Result<Vec<(Image, Image)>> {
    validation_set(cleans, sigma_from_255(sigma_255), eval_seed)
}

fn default_train_count() -> usize {
    20
}
fn default_test_count() -> usize {
    8
}
fn default_size() -> usize {
    128
}

/// Clean images for a campaign.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum Corpus {
    Synthetic {
        #[serde(default = "default_train_count")]
        train_count: usize,
        #[serde(default = "default_test_count")]
        test_count: usize,
        #[serde(default = "default_size")]
        size: usize,
    },
    /// Image files, relative to the config's directory.
    Files {
        train: Vec<PathBuf>,
        test: Vec<PathBuf>,
    },
}

impl Default for Corpus {
    fn default() -> Self {
        Corpus::Synthetic {
            train_count: default_train_count(),
            test_count: default_test_count(),
            size: default_size(),
        }
    }
}

impl Corpus {
    /// Training and test images. Synthetic corpora are generated from `seed`.
    pub fn load(&self, seed: u64, base: &Path) -> Result<(Vec<Image>, Vec<Image>)> {
        match self {
            Corpus::Synthetic {
                train_count,
                test_count,
                size,
            } => Ok((
                synthetic_corpus(seed, "train", *train_count, *size),
                synthetic_corpus(seed, "test", *test_count, *size),
            )),
            Corpus::Files { train, test } => {
                let load = |paths: &[PathBuf]| -> Result<Vec<Image>> {
                    paths
                        .iter()
                        .map(|p| read_image_auto(&if p.is_absolute() { p.clone() } else { base.join(p) }))
                        .collect()
                };
                Ok((load(train)?, load(test)?))
            }
        }
    }

    pub fn describe(&self) -> String {
        match self {
            Corpus::Synthetic {
                train_count,
                test_count,
                size,
            } => format!("synthetic {train_count} train / {test_count} test at {size}x{size}"),
            Corpus::Files { train, test } => format!("files {} train / {} test", train.len(), test.len()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "MSE")]
    Mse,
    #[serde(rename = "SURE")]
    Sure,
    /// SURE on both members of every pair, as separate samples.
    #[serde(rename = "SURE*")]
    SureStar,
    #[serde(rename = "N2N")]
    N2n,
    #[serde(rename = "eSURE")]
    Esure,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Mse => "MSE",
            Method::Sure => "SURE",
            Method::SureStar => "SURE*",
            Method::N2n => "N2N",
            Method::Esure => "eSURE",
        }
    }

    pub fn loss(&self) -> LossKind {
        match self {
            Method::Mse => LossKind::Mse,
            Method::Sure | Method::SureStar => LossKind::Sure,
            Method::N2n => LossKind::N2n,
            Method::Esure => LossKind::Esure,
        }
    }

    fn file_stem(&self) -> &'static str {
        match self {
            Method::SureStar => "sure_star",
            other => other.loss().name(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Campaign {
    UncorrelatedPairs,
    ImperfectGtSweep,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlindRange {
    pub min_255: f64,
    pub max_255: f64,
}

fn default_sigma_noisy() -> f64 {
    25.0
}
fn default_sigma_gt() -> Vec<f64> {
    vec![1.0, 5.0, 10.0]
}
fn default_eval_seed() -> u64 {
    2024
}
fn default_denoiser() -> DenoiserConfig {
    DenoiserConfig::SmallCnn {
        spec: Default::default(),
        precision: Default::default(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignConfig {
    pub campaign: Campaign,
    /// Defaults: all five methods for uncorrelated pairs, N2N and eSURE for the sweep.
    #[serde(default)]
    pub methods: Option<Vec<Method>>,
    #[serde(default = "default_sigma_noisy")]
    pub sigma_noisy_255: f64,
    #[serde(default = "default_sigma_gt")]
    pub sigma_gt_255: Vec<f64>,
    #[serde(default)]
    pub sigma_mode: SigmaMode,
    /// Train over a noise range instead of the single test level.
    #[serde(default)]
    pub blind: Option<BlindRange>,
    #[serde(default)]
    pub corpus: Corpus,
    /// Seeds data synthesis, initialization and training streams.
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_eval_seed")]
    pub eval_seed: u64,
    #[serde(default = "default_denoiser")]
    pub denoiser: DenoiserConfig,
    /// Trainer settings shared by every method; `loss` is filled in per method.
    #[serde(default)]
    pub train: serde_json::Map<String, serde_json::Value>,
}

impl CampaignConfig {
    pub fn new(campaign: Campaign) -> Self {
        serde_json::from_value(serde_json::json!({ "campaign": campaign })).expect("defaults deserialize")
    }

    pub fn methods(&self) -> Vec<Method> {
        self.methods.clone().unwrap_or_else(|| match self.campaign {
            Campaign::UncorrelatedPairs => {
                vec![Method::Mse, Method::Sure, Method::SureStar, Method::N2n, Method::Esure]
            }
            Campaign::ImperfectGtSweep => vec![Method::N2n, Method::Esure],
        })
    }

    pub fn train_config(&self, method: Method) -> Result<TrainConfig> {
        let mut map = self.train.clone();
        map.insert("loss".into(), serde_json::to_value(method.loss())?);
        map.entry("global_seed").or_insert(self.seed.into());
        let mut c: TrainConfig = serde_json::from_value(serde_json::Value::Object(map))
            .map_err(|e| Error::Config(format!("train settings: {e}")))?;
        c.validate_every = 0;
        c.validate()?;
        Ok(c)
    }

    pub fn digest(&self) -> String {
        digest_json(&serde_json::to_value(self).expect("config serializes"))
    }

    fn noise(&self) -> NoiseLevel {
        match self.blind {
            Some(b) => NoiseLevel::Blind {
                min_255: b.min_255,
                max_255: b.max_255,
            },
            None => NoiseLevel::Fixed {
                sigma_255: self.sigma_noisy_255,
            },
        }
    }

    fn regime(&self, method: Method, sigma_gt_255: Option<f64>) -> Result<Regime> {
        let noise = self.noise();
        let regime = match (method, sigma_gt_255) {
            (Method::Mse, _) => Regime::Clean {
                noise,
                fresh_noise: true,
            },
            (Method::Sure, _) => Regime::Single {
                noise,
                realizations: 1,
            },
            (Method::SureStar, _) => Regime::Single {
                noise,
                realizations: 2,
            },
            (Method::N2n | Method::Esure, None) => Regime::UncorrelatedPair { noise },
            (Method::N2n | Method::Esure, Some(gt)) => {
                if self.blind.is_some() {
                    return Err(Error::Config(
                        "the imperfect ground-truth sweep trains at the fixed sigma_noisy".into(),
                    ));
                }
                Regime::ImperfectGt {
                    sigma_gt_255: gt,
                    sigma_noisy_255: self.sigma_noisy_255,
                    sigma_mode: self.sigma_mode,
                }
            }
        };
        regime.validate()?;
        Ok(regime)
    }

    pub fn validate(&self) -> Result<()> {
        if self.methods().is_empty() {
            return Err(Error::Config("campaign lists no methods".into()));
        }
        if self.campaign == Campaign::ImperfectGtSweep && self.sigma_gt_255.is_empty() {
            return Err(Error::Config("sweep needs at least one sigma_gt_255".into()));
        }
        for m in self.methods() {
            self.train_config(m)?;
            for gt in self.points() {
                self.regime(m, gt)?;
            }
        }
        Ok(())
    }

    fn points(&self) -> Vec<Option<f64>> {
        match self.campaign {
            Campaign::UncorrelatedPairs => vec![None],
            Campaign::ImperfectGtSweep => self.sigma_gt_255.iter().copied().map(Some).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub method: String,
    pub regime: String,
    pub sigma_noisy_255: f64,
    pub sigma_gt_255: Option<f64>,
    pub psnr_mean_db: f64,
    pub psnr_std_db: f64,
    pub seed: u64,
    pub config_digest: String,
}

impl ExperimentResult {
    pub const CSV_HEADER: &'static str =
        "method,regime,sigma_noisy_255,sigma_gt_255,psnr_mean_db,psnr_std_db,seed,config_digest";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.method,
            self.regime,
            self.sigma_noisy_255,
            self.sigma_gt_255.map(|v| v.to_string()).unwrap_or_default(),
            self.psnr_mean_db,
            self.psnr_std_db,
            self.seed,
            self.config_digest
        )
    }
}

/// Appends `rows` to a schema-versioned CSV, writing the schema and header
/// lines when the file is new. Refuses files of another schema.
pub fn append_csv(path: &Path, schema: &str, header: &str, rows: &[String]) -> Result<()> {
    let schema_line = format!("#schema={schema}");
    let exists = path.exists() && std::fs::metadata(path).map(|m| m.len() > 0).unwrap_or(false);
    if exists {
        let file = std::fs::File::open(path).map_err(|source| Error::Unreadable {
            path: path.to_path_buf(),
            source,
        })?;
        let mut lines = BufReader::new(file).lines();
        let first = lines.next().transpose()?.unwrap_or_default();
        let second = lines.next().transpose()?.unwrap_or_default();
        if first != schema_line || second != header {
            return Err(Error::MalformedHeader {
                path: path.to_path_buf(),
                reason: format!("expected {schema_line} with header {header}"),
            });
        }
    }
    let unwritable = |source| Error::Unwritable {
        path: path.to_path_buf(),
        source,
    };
    let mut file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(unwritable)?;
    let mut text = String::new();
    if !exists {
        text.push_str(&format!("{schema_line}\n{header}\n"));
    }
    for r in rows {
        text.push_str(r);
        text.push('\n');
    }
    file.write_all(text.as_bytes()).map_err(unwritable)
}

/// Where a campaign writes its outputs.
#[derive(Debug, Clone)]
pub struct CampaignOutputs {
    pub dir: PathBuf,
    pub save_checkpoints: bool,
}

impl CampaignOutputs {
    pub fn metrics(&self) -> PathBuf {
        self.dir.join("metrics.csv")
    }

    pub fn plot_data(&self) -> PathBuf {
        self.dir.join("plot_data.csv")
    }
}

/// Trains one denoiser per method and campaign point from the same clean
/// images and initialization, and scores them all on the same noisy test set.
///
/// Each result is appended to the metrics CSV as soon as it exists, so a
/// failing member leaves the completed rows in place.
pub fn run_experiment(
    cfg: &CampaignConfig,
    base_dir: &Path,
    outputs: Option<&CampaignOutputs>,
    mut progress: impl FnMut(&ExperimentResult),
) -> Result<Vec<ExperimentResult>> {
    cfg.validate()?;
    if let Some(o) = outputs {
        std::fs::create_dir_all(&o.dir).map_err(|source| Error::Unwritable {
            path: o.dir.clone(),
            source,
        })?;
    }
    let (train_imgs, test_imgs) = cfg.corpus.load(cfg.seed, base_dir)?;
    let tests = test_set(&test_imgs, cfg.sigma_noisy_255, cfg.eval_seed)?;
    let init = build_denoiser(&cfg.denoiser, &mut RngStream::derive(cfg.seed, "campaign/init", &[]))?;
    let digest = cfg.digest();
    let mut results = Vec::new();
    for gt in cfg.points() {
        for method in cfg.methods() {
            let regime = cfg.regime(method, gt)?;
            let data = TrainingData::new(regime, cfg.seed, train_imgs.clone(), Vec::new())?;
            let tc = cfg.train_config(method)?;
            let (model, _) = train(&tc, &data, &init)?;
            let eval = evaluate_psnr(&model, &tests)?;
            let result = ExperimentResult {
                method: method.name().to_string(),
                regime: match (method, gt) {
                    (Method::Mse, _) => "clean".to_string(),
                    (_, None) => "uncorrelated".to_string(),
                    (_, Some(_)) => "imperfect_gt".to_string(),
                },
                sigma_noisy_255: cfg.sigma_noisy_255,
                sigma_gt_255: gt,
                psnr_mean_db: eval.mean,
                psnr_std_db: eval.std,
                seed: cfg.seed,
                config_digest: digest.clone(),
            };
            if let Some(o) = outputs {
                append_csv(&o.metrics(), METRICS_SCHEMA, ExperimentResult::CSV_HEADER, &[result.csv_row()])?;
                if o.save_checkpoints {
                    let name = match gt {
                        Some(g) => format!("{}_gt{g}.ckpt", method.file_stem()),
                        None => format!("{}.ckpt", method.file_stem()),
                    };
                    save_checkpoint(&model, Some(&tc.digest()), &o.dir.join(name))?;
                }
            }
            progress(&result);
            results.push(result);
        }
    }
    if let (Some(o), Campaign::ImperfectGtSweep) = (outputs, cfg.campaign) {
        std::fs::write(o.plot_data(), plot_data_csv(&cfg.methods(), &results)).map_err(|source| {
            Error::Unwritable {
                path: o.plot_data(),
                source,
            }
        })?;
    }
    Ok(results)
}

/// PSNR against sigma_gt, one column per method.
pub fn plot_data_csv(methods: &[Method], results: &[ExperimentResult]) -> String {
    let mut xs: Vec<f64> = results.iter().filter_map(|r| r.sigma_gt_255).collect();
    xs.dedup();
    let mut out = format!("#schema={PLOT_SCHEMA}\nsigma_gt_255");
    for m in methods {
        out.push(',');
        out.push_str(m.name());
    }
    out.push('\n');
    for x in xs {
        out.push_str(&x.to_string());
        for m in methods {
            out.push(',');
            if let Some(r) = results
                .iter()
                .find(|r| r.method == m.name() && r.sigma_gt_255 == Some(x))
            {
                out.push_str(&r.psnr_mean_db.to_string());
            }
        }
        out.push('\n');
    }
    out
}
