//! Training-data regimes, the JSON dataset manifest, and the patch pools the
//! trainer consumes.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::image::Image;
use crate::io::{read_image_auto, write_image, ImageFormat};
use crate::noise::{sigma_from_255, sigma_to_255};
use crate::pairing::{
    corollary_transform, extract_patches, make_imperfect_gt_pair, make_uncorrelated_pair,
    synth_noisy, PairedSample, SampleMode, SigmaMode,
};
use crate::risk::LossKind;
use crate::rng::RngStream;

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

/// Training noise level in the 0-255 convention: one fixed value, or a
/// uniform draw per patch for blind training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum NoiseLevel {
    Fixed { sigma_255: f64 },
    Blind { min_255: f64, max_255: f64 },
}

impl NoiseLevel {
    fn validate(&self) -> Result<()> {
        match *self {
            NoiseLevel::Fixed { sigma_255 } if sigma_255 >= 0.0 => Ok(()),
            NoiseLevel::Blind { min_255, max_255 } if 0.0 <= min_255 && min_255 <= max_255 => {
                Ok(())
            }
            other => Err(invalid(format!("invalid noise level {other:?}"))),
        }
    }

    /// Normalized sigma for one patch.
    fn draw(&self, stream: &mut RngStream) -> f64 {
        match *self {
            NoiseLevel::Fixed { sigma_255 } => sigma_from_255(sigma_255),
            NoiseLevel::Blind { min_255, max_255 } => {
                sigma_from_255(stream.uniform_range(min_255, max_255))
            }
        }
    }

    /// Representative level, used for validation noise by default.
    pub fn nominal_255(&self) -> f64 {
        match *self {
            NoiseLevel::Fixed { sigma_255 } => sigma_255,
            NoiseLevel::Blind { min_255, max_255 } => 0.5 * (min_255 + max_255),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "regime", rename_all = "snake_case")]
pub enum Regime {
    /// Noisy input with its clean target (supervised reference). With
    /// `fresh_noise` the input noise is redrawn every epoch.
    Clean {
        noise: NoiseLevel,
        #[serde(default)]
        fresh_noise: bool,
    },
    /// Single noisy realizations; `realizations = 2` concatenates both members
    /// of each independent pair as separate samples.
    Single {
        noise: NoiseLevel,
        #[serde(default = "one")]
        realizations: usize,
    },
    /// Two independent noisy realizations per clean patch.
    UncorrelatedPair { noise: NoiseLevel },
    /// Imperfect ground truth `x + n_gt` with extra noise on top.
    ImperfectGt {
        sigma_gt_255: f64,
        sigma_noisy_255: f64,
        #[serde(default)]
        sigma_mode: SigmaMode,
    },
}

fn one() -> usize {
    1
}

impl Regime {
    pub fn name(&self) -> &'static str {
        match self {
            Regime::Clean { .. } => "clean",
            Regime::Single { .. } => "single",
            Regime::UncorrelatedPair { .. } => "uncorrelated_pair",
            Regime::ImperfectGt { .. } => "imperfect_gt",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Regime::Clean { noise, .. } | Regime::UncorrelatedPair { noise } => noise.validate(),
            Regime::Single {
                noise,
                realizations,
            } => {
                if !(1..=2).contains(&realizations) {
                    return Err(invalid("single regime supports 1 or 2 realizations"));
                }
                noise.validate()
            }
            Regime::ImperfectGt {
                sigma_gt_255,
                sigma_noisy_255,
                sigma_mode,
            } => crate::pairing::added_sigma(
                sigma_from_255(sigma_gt_255),
                sigma_from_255(sigma_noisy_255),
                sigma_mode,
            )
            .map(|_| ()),
        }
    }

    /// Noise level of the images the denoiser is meant for.
    pub fn nominal_input_sigma_255(&self) -> f64 {
        match *self {
            Regime::Clean { noise, .. }
            | Regime::Single { noise, .. }
            | Regime::UncorrelatedPair { noise } => noise.nominal_255(),
            Regime::ImperfectGt {
                sigma_gt_255,
                sigma_noisy_255,
                sigma_mode,
            } => match sigma_mode {
                SigmaMode::TotalSigma => sigma_noisy_255,
                SigmaMode::AddedSigma => sigma_gt_255.hypot(sigma_noisy_255),
            },
        }
    }

    /// Fails unless this regime supplies what `loss` trains on.
    pub fn check_loss(&self, loss: LossKind) -> Result<()> {
        let ok = matches!(
            (loss, self),
            (LossKind::Mse, Regime::Clean { .. })
                | (LossKind::Sure, Regime::Single { .. })
                | (
                    LossKind::Esure | LossKind::N2n,
                    Regime::UncorrelatedPair { .. } | Regime::ImperfectGt { .. }
                )
        );
        if ok {
            Ok(())
        } else {
            Err(Error::IncompatibleData {
                loss: loss.name(),
                detail: format!("the {} regime", self.name()),
            })
        }
    }

    /// Base samples for one clean image or patch, from its own stream.
    pub fn synthesize(
        &self,
        clean: &Image,
        sigma: f64,
        stream: &mut RngStream,
    ) -> Result<Vec<PairedSample>> {
        match *self {
            Regime::Clean { .. } => {
                let pair = make_uncorrelated_pair(clean, sigma, stream)?;
                Ok(vec![PairedSample::new(
                    pair.input,
                    clean.clone(),
                    sigma,
                    0.0,
                    SampleMode::CleanTarget,
                )?])
            }
            Regime::Single { realizations, .. } => {
                let pair = make_uncorrelated_pair(clean, sigma, stream)?;
                let mut out = vec![PairedSample::new(
                    pair.input,
                    clean.clone(),
                    sigma,
                    0.0,
                    SampleMode::CleanTarget,
                )?];
                if realizations == 2 {
                    out.push(PairedSample::new(
                        pair.target,
                        clean.clone(),
                        sigma,
                        0.0,
                        SampleMode::CleanTarget,
                    )?);
                }
                Ok(out)
            }
            Regime::UncorrelatedPair { .. } => Ok(vec![make_uncorrelated_pair(clean, sigma, stream)?]),
            Regime::ImperfectGt {
                sigma_gt_255,
                sigma_noisy_255,
                sigma_mode,
            } => Ok(vec![make_imperfect_gt_pair(
                clean,
                sigma_from_255(sigma_gt_255),
                sigma_from_255(sigma_noisy_255),
                sigma_mode,
                stream,
            )?]),
        }
    }

    fn draw_sigma(&self, stream: &mut RngStream) -> f64 {
        match *self {
            Regime::Clean { noise, .. }
            | Regime::Single { noise, .. }
            | Regime::UncorrelatedPair { noise } => noise.draw(stream),
            // fixed by the regime itself
            Regime::ImperfectGt { .. } => 0.0,
        }
    }
}

/// A sample written to disk by `synth`: input and target files next to the clean one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaterializedSample {
    pub clean: PathBuf,
    pub input: PathBuf,
    pub target: PathBuf,
    pub sigma_input_255: f64,
    pub sigma_target_255: f64,
    pub mode: SampleMode,
}

/// JSON description of a training set. Relative paths resolve against the
/// manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    #[serde(default = "schema_version")]
    pub schema_version: u32,
    #[serde(default)]
    pub train_images: Vec<PathBuf>,
    #[serde(default)]
    pub validation_images: Vec<PathBuf>,
    #[serde(flatten)]
    pub regime: Regime,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub materialized: Vec<MaterializedSample>,
}

fn schema_version() -> u32 {
    MANIFEST_SCHEMA_VERSION
}

impl DatasetManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Unreadable {
            path: path.to_path_buf(),
            source,
        })?;
        let m: DatasetManifest = serde_json::from_str(&text)?;
        if m.schema_version != MANIFEST_SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "unsupported manifest schema {}",
                m.schema_version
            )));
        }
        m.regime.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|source| Error::Unwritable {
            path: path.to_path_buf(),
            source,
        })
    }
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Writes one synthesized full-image sample set per training image as
/// `tensor_f32` files in `out_dir`, and returns the manifest listing them.
pub fn materialize(
    manifest: &DatasetManifest,
    manifest_dir: &Path,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    manifest.regime.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|source| Error::Unwritable {
        path: out_dir.to_path_buf(),
        source,
    })?;
    let mut materialized = Vec::new();
    let mut train_images = Vec::new();
    for (i, rel) in manifest.train_images.iter().enumerate() {
        let clean = read_image_auto(&resolve(manifest_dir, rel))?;
        let clean_name = PathBuf::from(format!("clean_{i:04}.esdn"));
        write_image(&clean, &out_dir.join(&clean_name), ImageFormat::TensorF32)?;
        train_images.push(clean_name.clone());
        let mut stream = RngStream::derive(manifest.seed, "synth/image", &[i as u64]);
        let sigma = manifest
            .regime
            .draw_sigma(&mut RngStream::derive(manifest.seed, "synth/sigma", &[i as u64]));
        for (k, s) in manifest
            .regime
            .synthesize(&clean, sigma, &mut stream)?
            .into_iter()
            .enumerate()
        {
            let input = PathBuf::from(format!("input_{i:04}_{k}.esdn"));
            let target = PathBuf::from(format!("target_{i:04}_{k}.esdn"));
            write_image(&s.input, &out_dir.join(&input), ImageFormat::TensorF32)?;
            write_image(&s.target, &out_dir.join(&target), ImageFormat::TensorF32)?;
            materialized.push(MaterializedSample {
                clean: clean_name.clone(),
                input,
                target,
                sigma_input_255: sigma_to_255(s.sigma_input),
                sigma_target_255: sigma_to_255(s.sigma_target),
                mode: s.mode,
            });
        }
    }
    let mut validation_images = Vec::new();
    for (i, rel) in manifest.validation_images.iter().enumerate() {
        let img = read_image_auto(&resolve(manifest_dir, rel))?;
        let name = PathBuf::from(format!("val_{i:04}.esdn"));
        write_image(&img, &out_dir.join(&name), ImageFormat::TensorF32)?;
        validation_images.push(name);
    }
    Ok(DatasetManifest {
        schema_version: MANIFEST_SCHEMA_VERSION,
        train_images,
        validation_images,
        regime: manifest.regime,
        seed: manifest.seed,
        materialized,
    })
}

/// Patch geometry for building the training pool.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PatchConfig {
    pub patch_size: usize,
    pub stride: usize,
    pub augment: bool,
}

impl Default for PatchConfig {
    fn default() -> Self {
        Self {
            patch_size: 40,
            stride: 40,
            augment: true,
        }
    }
}

/// In-memory training set: clean images plus the regime and seed that
/// determine every noise realization.
#[derive(Debug, Clone)]
pub struct TrainingData {
    pub regime: Regime,
    pub seed: u64,
    pub train: Vec<Image>,
    pub validation: Vec<Image>,
    /// Full-image samples produced by `synth`, used instead of on-the-fly synthesis.
    pub materialized: Option<Vec<PairedSample>>,
}

impl TrainingData {
    pub fn new(regime: Regime, seed: u64, train: Vec<Image>, validation: Vec<Image>) -> Result<Self> {
        regime.validate()?;
        if train.is_empty() {
            return Err(invalid("training set has no images"));
        }
        Ok(Self {
            regime,
            seed,
            train,
            validation,
            materialized: None,
        })
    }

    pub fn from_manifest(manifest: &DatasetManifest, manifest_dir: &Path) -> Result<Self> {
        let load = |paths: &[PathBuf]| -> Result<Vec<Image>> {
            paths
                .iter()
                .map(|p| read_image_auto(&resolve(manifest_dir, p)))
                .collect()
        };
        let mut data = TrainingData::new(
            manifest.regime,
            manifest.seed,
            load(&manifest.train_images)?,
            load(&manifest.validation_images)?,
        )?;
        if !manifest.materialized.is_empty() {
            let samples = manifest
                .materialized
                .iter()
                .map(|m| {
                    PairedSample::new(
                        read_image_auto(&resolve(manifest_dir, &m.input))?,
                        read_image_auto(&resolve(manifest_dir, &m.target))?,
                        sigma_from_255(m.sigma_input_255),
                        sigma_from_255(m.sigma_target_255),
                        m.mode,
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            data.materialized = Some(samples);
        }
        Ok(data)
    }

    /// Builds the fixed patch pool `loss` trains on.
    pub fn patch_pool(
        &self,
        loss: LossKind,
        patches: &PatchConfig,
        pair_averaging: bool,
    ) -> Result<PatchPool> {
        self.regime.check_loss(loss)?;
        let mut aug = RngStream::derive(self.seed, "patches/augment", &[]);
        let base: Vec<PairedSample> = match &self.materialized {
            Some(samples) => {
                extract_patches(samples, patches.patch_size, patches.stride, patches.augment, &mut aug)?
                    .patches
            }
            None => {
                let cleans: Vec<PairedSample> =
                    self.train.iter().cloned().map(PairedSample::clean).collect();
                let clean_patches =
                    extract_patches(&cleans, patches.patch_size, patches.stride, patches.augment, &mut aug)?;
                let mut out = Vec::new();
                for (i, p) in clean_patches.patches.iter().enumerate() {
                    let sigma = self
                        .regime
                        .draw_sigma(&mut RngStream::derive(self.seed, "patches/sigma", &[i as u64]));
                    let mut stream = RngStream::derive(self.seed, "patches/noise", &[i as u64]);
                    out.extend(self.regime.synthesize(&p.target, sigma, &mut stream)?);
                }
                out
            }
        };
        let samples = if loss == LossKind::Esure
            && pair_averaging
            && matches!(self.regime, Regime::UncorrelatedPair { .. })
        {
            base.iter()
                .enumerate()
                .map(|(i, s)| {
                    corollary_transform(
                        s,
                        &mut RngStream::derive(self.seed, "patches/corollary", &[i as u64]),
                    )
                })
                .collect::<Result<Vec<_>>>()?
        } else {
            base
        };
        let fresh_noise = matches!(
            self.regime,
            Regime::Clean {
                fresh_noise: true,
                ..
            }
        );
        Ok(PatchPool {
            samples,
            fresh_noise,
            seed: self.seed,
        })
    }
}

/// The samples of one training run.
#[derive(Debug, Clone)]
pub struct PatchPool {
    pub samples: Vec<PairedSample>,
    fresh_noise: bool,
    seed: u64,
}

impl PatchPool {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Redraws supervised input noise for `epoch` when the regime asks for it.
    pub fn refresh(&mut self, epoch: usize) -> Result<()> {
        if !self.fresh_noise {
            return Ok(());
        }
        for (i, s) in self.samples.iter_mut().enumerate() {
            let mut stream = RngStream::derive(self.seed, "patches/fresh", &[epoch as u64, i as u64]);
            s.input = synth_noisy(&s.target, s.sigma_input, &mut stream)?;
        }
        Ok(())
    }
}
