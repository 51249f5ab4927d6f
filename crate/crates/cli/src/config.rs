//! JSON job descriptions read by the subcommands. Noise levels are in the
//! 0-255 convention throughout.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use esure_core::checkpoint::load_checkpoint;
use esure_core::dataset::DatasetManifest;
use esure_core::harness::{Corpus, NoiseSetup};
use esure_core::noise::sigma_from_255;
use esure_core::risk::{DivergenceMode, LossKind};
use esure_core::synthetic::synthetic_image;
use esure_core::trainer::{TrainConfig, DEFAULT_KAPPA};
use esure_core::{build_denoiser, io, Denoiser, DenoiserConfig, Error, Image, Result, RngStream, SigmaMode};

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|source| Error::Unreadable {
        path: path.to_path_buf(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

pub fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn default_cnn() -> DenoiserConfig {
    DenoiserConfig::SmallCnn {
        spec: Default::default(),
        precision: Default::default(),
    }
}

/// A denoiser read from a checkpoint or built from a recipe, optionally
/// with explicit parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DenoiserSource {
    Checkpoint {
        checkpoint: PathBuf,
    },
    Build {
        #[serde(flatten)]
        config: DenoiserConfig,
        #[serde(default)]
        params: Option<Vec<f64>>,
    },
}

impl Default for DenoiserSource {
    fn default() -> Self {
        DenoiserSource::Build {
            config: default_cnn(),
            params: None,
        }
    }
}

impl DenoiserSource {
    pub fn load(&self, base: &Path, seed: u64) -> Result<Denoiser> {
        match self {
            DenoiserSource::Checkpoint { checkpoint } => Ok(load_checkpoint(&resolve(base, checkpoint))?.0),
            DenoiserSource::Build { config, params } => {
                let mut d = build_denoiser(config, &mut RngStream::derive(seed, "cli/init", &[]))?;
                if let Some(p) = params {
                    d.set_params(p)?;
                }
                Ok(d)
            }
        }
    }
}

fn default_image_size() -> usize {
    32
}

/// The fixed clean image of a verification run.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ImageSource {
    Path {
        path: PathBuf,
    },
    Synthetic {
        #[serde(default = "default_image_size")]
        size: usize,
        #[serde(default)]
        index: usize,
        /// Rescales the image so that `||x||^2 / N` takes this value.
        #[serde(default)]
        energy: Option<f64>,
    },
}

impl Default for ImageSource {
    fn default() -> Self {
        ImageSource::Synthetic {
            size: default_image_size(),
            index: 0,
            energy: None,
        }
    }
}

impl ImageSource {
    pub fn load(&self, base: &Path, seed: u64) -> Result<Image> {
        match self {
            ImageSource::Path { path } => io::read_image_auto(&resolve(base, path)),
            ImageSource::Synthetic { size, index, energy } => {
                let x = synthetic_image(seed, "verify", *index, *size);
                Ok(match energy {
                    Some(s) => {
                        let current = x.squared_norm() / x.len() as f64;
                        x.scale((s / current).sqrt())
                    }
                    None => x,
                })
            }
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(tag = "setup", rename_all = "snake_case")]
pub enum Noise255 {
    Single {
        sigma_255: f64,
    },
    Independent {
        sigma_255: f64,
    },
    Nested {
        sigma_gt_255: f64,
        sigma_noisy_255: f64,
        #[serde(default)]
        sigma_mode: SigmaMode,
    },
}

impl Noise255 {
    pub fn normalized(&self) -> NoiseSetup {
        match *self {
            Noise255::Single { sigma_255 } => NoiseSetup::Single {
                sigma: sigma_from_255(sigma_255),
            },
            Noise255::Independent { sigma_255 } => NoiseSetup::Independent {
                sigma: sigma_from_255(sigma_255),
            },
            Noise255::Nested {
                sigma_gt_255,
                sigma_noisy_255,
                sigma_mode,
            } => NoiseSetup::Nested {
                sigma_gt: sigma_from_255(sigma_gt_255),
                sigma_noisy: sigma_from_255(sigma_noisy_255),
                sigma_mode,
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Expectation {
    #[default]
    Unbiased,
    /// The estimator is expected to be detectably biased.
    Biased,
}

fn default_draws() -> usize {
    20_000
}
fn default_threshold() -> f64 {
    4.0
}
fn default_kappa() -> f64 {
    DEFAULT_KAPPA
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UnbiasednessJob {
    pub estimator: LossKind,
    pub denoiser: DenoiserSource,
    #[serde(default)]
    pub image: ImageSource,
    pub noise: Noise255,
    #[serde(default = "default_draws")]
    pub draws: usize,
    #[serde(default = "default_threshold")]
    pub threshold: f64,
    #[serde(default)]
    pub divergence_mode: Option<DivergenceMode>,
    #[serde(default = "default_kappa")]
    pub kappa: f64,
    #[serde(default)]
    pub expect: Expectation,
    #[serde(default)]
    pub seed: u64,
}

fn default_samples() -> usize {
    100
}
fn default_sigma() -> f64 {
    25.0
}
fn default_identity_tolerance() -> f64 {
    1e-12
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IdentityJob {
    #[serde(default = "default_samples")]
    pub samples: usize,
    #[serde(default = "default_sigma")]
    pub sigma_255: f64,
    #[serde(default)]
    pub image: ImageSource,
    /// Defaults to identity, scaling, conv_filter and small_cnn.
    #[serde(default)]
    pub denoisers: Option<Vec<DenoiserSource>>,
    #[serde(default = "default_identity_tolerance")]
    pub tolerance: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_batch() -> usize {
    4
}
fn default_patch() -> usize {
    8
}
fn default_fd_step() -> f64 {
    1e-5
}
fn default_coords() -> usize {
    200
}
fn default_gradient_tolerance() -> f64 {
    1e-4
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GradientJob {
    pub loss: LossKind,
    #[serde(default)]
    pub denoiser: DenoiserSource,
    pub noise: Noise255,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_patch")]
    pub patch_size: usize,
    #[serde(default)]
    pub divergence_mode: Option<DivergenceMode>,
    #[serde(default = "default_kappa")]
    pub kappa: f64,
    #[serde(default = "default_fd_step")]
    pub fd_step: f64,
    #[serde(default = "default_coords")]
    pub max_coords: usize,
    #[serde(default = "default_gradient_tolerance")]
    pub tolerance: f64,
    #[serde(default)]
    pub seed: u64,
}

/// Training job: trainer settings plus the model to start from.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainJob {
    #[serde(flatten)]
    pub train: TrainConfig,
    #[serde(default)]
    pub denoiser: DenoiserSource,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalJob {
    pub checkpoint: PathBuf,
    #[serde(default)]
    pub corpus: Option<Corpus>,
    /// Test images; used when no corpus is given.
    #[serde(default)]
    pub images: Vec<PathBuf>,
    #[serde(default = "default_sigma")]
    pub sigma_255: f64,
    #[serde(default = "default_eval_seed")]
    pub eval_seed: u64,
    /// Seed of a synthetic corpus.
    #[serde(default)]
    pub corpus_seed: u64,
    /// Writes each denoised test image as 8-bit PGM into this directory.
    #[serde(default)]
    pub denoised_dir: Option<PathBuf>,
}

fn default_eval_seed() -> u64 {
    2024
}

/// `synth` input: a manifest, optionally with a synthetic corpus to create first.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthJob {
    #[serde(flatten)]
    pub manifest: DatasetManifest,
    #[serde(default)]
    pub generate: Option<Corpus>,
}
