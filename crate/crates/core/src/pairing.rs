//! Noisy training-pair synthesis: single realizations, independent pairs,
//! nested pairs built on imperfect ground truth, the pair-averaging transform
//! and patch extraction.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::image::{Dihedral, Image};
use crate::noise::gaussian_field;
use crate::rng::RngStream;

/// How the target of a [`PairedSample`] relates to its input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleMode {
    /// Target is the clean image.
    CleanTarget,
    /// Target noise is independent of input noise.
    IndependentTarget,
    /// Input is the target plus extra independent noise.
    NestedTarget,
}

/// How `sigma_noisy` is read when building a nested pair on imperfect ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SigmaMode {
    /// `sigma_noisy` is the total noise of the input: `sigma_z = sqrt(noisy^2 - gt^2)`.
    #[default]
    TotalSigma,
    /// `sigma_noisy` is the std of the noise added on top of the ground truth.
    AddedSigma,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedSample {
    pub input: Image,
    pub target: Image,
    pub sigma_input: f64,
    pub sigma_target: f64,
    pub mode: SampleMode,
}

impl PairedSample {
    pub fn new(
        input: Image,
        target: Image,
        sigma_input: f64,
        sigma_target: f64,
        mode: SampleMode,
    ) -> Result<Self> {
        input.ensure_same_shape(&target)?;
        if !(sigma_input >= 0.0 && sigma_target >= 0.0) {
            return Err(invalid("sample noise levels must be >= 0"));
        }
        if mode == SampleMode::NestedTarget && sigma_input < sigma_target {
            return Err(invalid(format!(
                "nested sample needs sigma_input >= sigma_target ({sigma_input} < {sigma_target})"
            )));
        }
        Ok(Self {
            input,
            target,
            sigma_input,
            sigma_target,
            mode,
        })
    }

    /// Zero-noise pair `(clean, clean)`, the starting point for patch extraction.
    pub fn clean(clean: Image) -> Self {
        Self {
            input: clean.clone(),
            target: clean,
            sigma_input: 0.0,
            sigma_target: 0.0,
            mode: SampleMode::CleanTarget,
        }
    }

    fn map_geometry(&self, f: impl Fn(&Image) -> Result<Image>) -> Result<Self> {
        Ok(Self {
            input: f(&self.input)?,
            target: f(&self.target)?,
            ..self.clone()
        })
    }
}

/// `clean + n`, `n ~ N(0, sigma^2 I)`.
pub fn synth_noisy(clean: &Image, sigma: f64, stream: &mut RngStream) -> Result<Image> {
    let noise = gaussian_field(stream, clean.shape(), sigma)?;
    clean.add(&noise)
}

/// Supervised pair: noisy input, clean target.
pub fn make_clean_pair(clean: &Image, sigma: f64, stream: &mut RngStream) -> Result<PairedSample> {
    let input = synth_noisy(clean, sigma, &mut stream.fork("pair/input", 0))?;
    PairedSample::new(input, clean.clone(), sigma, 0.0, SampleMode::CleanTarget)
}

/// Two independent realizations `clean + n_a`, `clean + n_b`.
pub fn make_uncorrelated_pair(
    clean: &Image,
    sigma: f64,
    stream: &mut RngStream,
) -> Result<PairedSample> {
    let input = synth_noisy(clean, sigma, &mut stream.fork("pair/input", 0))?;
    let target = synth_noisy(clean, sigma, &mut stream.fork("pair/target", 1))?;
    PairedSample::new(input, target, sigma, sigma, SampleMode::IndependentTarget)
}

/// Averages an independent pair into a less noisy target `w = (y3 + y4) / 2`
/// and re-noises it into the input `v = w + z`, `z ~ N(0, sigma^2/2 I)`, so the
/// input again carries the original per-realization noise level.
pub fn corollary_transform(pair: &PairedSample, stream: &mut RngStream) -> Result<PairedSample> {
    if pair.mode != SampleMode::IndependentTarget {
        return Err(invalid(format!(
            "pair averaging needs an independent pair, got {:?}",
            pair.mode
        )));
    }
    if pair.sigma_input != pair.sigma_target {
        return Err(invalid(format!(
            "pair averaging needs equal noise levels, got {} and {}",
            pair.sigma_input, pair.sigma_target
        )));
    }
    let sigma = pair.sigma_input;
    let w = pair.input.zip_map(&pair.target, |a, b| 0.5 * (a + b))?;
    let half_sigma = sigma / std::f64::consts::SQRT_2;
    let z = gaussian_field(&mut stream.fork("corollary/z", 0), w.shape(), half_sigma)?;
    let v = w.add(&z)?;
    PairedSample::new(v, w, sigma, half_sigma, SampleMode::NestedTarget)
}

/// Std of the noise added on top of the ground truth.
pub fn added_sigma(sigma_gt: f64, sigma_noisy: f64, mode: SigmaMode) -> Result<f64> {
    if !(sigma_gt >= 0.0) || !(sigma_noisy > sigma_gt) {
        return Err(invalid(format!(
            "nested pair needs sigma_noisy > sigma_gt >= 0, got gt={sigma_gt}, noisy={sigma_noisy}"
        )));
    }
    Ok(match mode {
        SigmaMode::TotalSigma => (sigma_noisy * sigma_noisy - sigma_gt * sigma_gt).sqrt(),
        SigmaMode::AddedSigma => sigma_noisy,
    })
}

/// Nested pair on imperfect ground truth: target `y1 = clean + n_gt`, input
/// `y2 = y1 + z`.
pub fn make_imperfect_gt_pair(
    clean: &Image,
    sigma_gt: f64,
    sigma_noisy: f64,
    mode: SigmaMode,
    stream: &mut RngStream,
) -> Result<PairedSample> {
    let sigma_z = added_sigma(sigma_gt, sigma_noisy, mode)?;
    let y1 = synth_noisy(clean, sigma_gt, &mut stream.fork("imperfect/gt", 0))?;
    let y2 = synth_noisy(&y1, sigma_z, &mut stream.fork("imperfect/added", 1))?;
    let sigma_input = (sigma_gt * sigma_gt + sigma_z * sigma_z).sqrt();
    let mode = if sigma_gt == 0.0 {
        SampleMode::CleanTarget
    } else {
        SampleMode::NestedTarget
    };
    PairedSample::new(y2, y1, sigma_input, sigma_gt, mode)
}

/// Square patches sharing one size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchBatch {
    pub patches: Vec<PairedSample>,
    pub patch_size: usize,
}

impl PatchBatch {
    pub fn new(patches: Vec<PairedSample>, patch_size: usize) -> Result<Self> {
        if patches.is_empty() {
            return Err(invalid("patch batch must not be empty"));
        }
        for p in &patches {
            let s = p.input.shape();
            if s.height != patch_size || s.width != patch_size {
                return Err(invalid(format!(
                    "patch of {}x{} in a batch of size {patch_size}",
                    s.height, s.width
                )));
            }
            p.input.ensure_same_shape(&p.target)?;
        }
        Ok(Self {
            patches,
            patch_size,
        })
    }

    /// Noise level of each patch's input.
    pub fn sigmas(&self) -> Vec<f64> {
        self.patches.iter().map(|p| p.sigma_input).collect()
    }

    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }
}

/// Grid positions `0, stride, 2 stride, ...` that keep a patch inside `extent`.
fn grid(extent: usize, patch: usize, stride: usize) -> impl Iterator<Item = usize> {
    (0..=(extent - patch)).step_by(stride)
}

/// Crops every sample on a regular grid, row-major per image. With `augment`,
/// each patch gets one dihedral transform applied identically to input and target.
pub fn extract_patches(
    images: &[PairedSample],
    patch_size: usize,
    stride: usize,
    augment: bool,
    stream: &mut RngStream,
) -> Result<PatchBatch> {
    if patch_size == 0 || stride == 0 {
        return Err(invalid("patch size and stride must be >= 1"));
    }
    let mut patches = Vec::new();
    for sample in images {
        let (h, w) = (sample.input.height(), sample.input.width());
        if patch_size > h.min(w) {
            return Err(invalid(format!(
                "patch size {patch_size} exceeds image {h}x{w}"
            )));
        }
        for row in grid(h, patch_size, stride) {
            for col in grid(w, patch_size, stride) {
                let mut patch =
                    sample.map_geometry(|img| img.crop(row, col, patch_size, patch_size))?;
                if augment {
                    let t = Dihedral::from_index(stream.below(8));
                    if t != Dihedral::IDENTITY {
                        patch = patch.map_geometry(|img| t.apply(img))?;
                    }
                }
                patches.push(patch);
            }
        }
    }
    PatchBatch::new(patches, patch_size)
}
