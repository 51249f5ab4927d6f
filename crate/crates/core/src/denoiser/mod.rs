//! Differentiable denoisers `h_theta`.
//!
//! The zoo runs from closed-form maps whose divergence is known analytically
//! (identity, scaling, a fixed-support convolution filter, soft thresholding)
//! up to a small residual CNN that needs the Monte-Carlo divergence.

pub mod cnn;
pub mod conv;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::image::Image;
use crate::rng::RngStream;

pub use cnn::CnnSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DenoiserKind {
    Identity,
    Scaling,
    ConvFilter,
    SoftThreshold,
    SmallCnn,
}

impl DenoiserKind {
    pub fn name(&self) -> &'static str {
        match self {
            DenoiserKind::Identity => "identity",
            DenoiserKind::Scaling => "scaling",
            DenoiserKind::ConvFilter => "conv_filter",
            DenoiserKind::SoftThreshold => "soft_threshold",
            DenoiserKind::SmallCnn => "small_cnn",
        }
    }
}

/// Arithmetic used inside the CNN. The closed-form kinds always run in `f64`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    F32,
    #[default]
    F64,
}

/// Construction recipe for a denoiser.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DenoiserConfig {
    Identity,
    Scaling,
    ConvFilter {
        #[serde(default = "default_kernel")]
        kernel_size: usize,
    },
    SoftThreshold {
        threshold: f64,
    },
    SmallCnn {
        #[serde(flatten, default)]
        spec: CnnSpec,
        #[serde(default)]
        precision: Precision,
    },
}

fn default_kernel() -> usize {
    3
}

/// Network topology plus what the flat parameter vector means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Architecture {
    Identity,
    /// `h(y) = a y`
    Scaling,
    /// Same-size convolution, one shared kernel per channel, zero padding.
    ConvFilter { kernel_size: usize },
    /// `h(y)_i = sign(y_i) max(|y_i| - t, 0)`
    SoftThreshold,
    SmallCnn {
        #[serde(flatten)]
        spec: CnnSpec,
        precision: Precision,
    },
}

impl Architecture {
    pub fn kind(&self) -> DenoiserKind {
        match self {
            Architecture::Identity => DenoiserKind::Identity,
            Architecture::Scaling => DenoiserKind::Scaling,
            Architecture::ConvFilter { .. } => DenoiserKind::ConvFilter,
            Architecture::SoftThreshold => DenoiserKind::SoftThreshold,
            Architecture::SmallCnn { .. } => DenoiserKind::SmallCnn,
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            Architecture::Identity => 0,
            Architecture::Scaling | Architecture::SoftThreshold => 1,
            Architecture::ConvFilter { kernel_size } => kernel_size * kernel_size,
            Architecture::SmallCnn { spec, .. } => spec.param_count(),
        }
    }
}

/// Gradient of a scalar with respect to the denoiser parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamGradient(pub Vec<f64>);

impl ParamGradient {
    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn add_scaled(&mut self, other: &ParamGradient, alpha: f64) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += alpha * b;
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        self.0.iter_mut().for_each(|v| *v *= alpha);
    }

    pub fn all_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

/// Forward-pass state needed by [`Denoiser::vjp`].
#[derive(Debug, Clone)]
pub struct Trace(TraceInner);

#[derive(Debug, Clone)]
enum TraceInner {
    Input(Image),
    CnnF32(Image, cnn::Tape<f32>),
    CnnF64(Image, cnn::Tape<f64>),
}

impl Trace {
    fn input(&self) -> &Image {
        match &self.0 {
            TraceInner::Input(y) | TraceInner::CnnF32(y, _) | TraceInner::CnnF64(y, _) => y,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Denoiser {
    arch: Architecture,
    params: Vec<f64>,
}

/// Builds a denoiser with its documented initialization: `a = 1` for
/// scaling, a centered delta for the filter, the configured threshold, and an
/// identity-start CNN.
pub fn build_denoiser(config: &DenoiserConfig, init_stream: &mut RngStream) -> Result<Denoiser> {
    let (arch, params) = match *config {
        DenoiserConfig::Identity => (Architecture::Identity, vec![]),
        DenoiserConfig::Scaling => (Architecture::Scaling, vec![1.0]),
        DenoiserConfig::ConvFilter { kernel_size } => {
            if kernel_size % 2 == 0 {
                return Err(invalid(format!(
                    "conv_filter kernel size must be odd, got {kernel_size}"
                )));
            }
            let mut k = vec![0.0; kernel_size * kernel_size];
            k[kernel_size * kernel_size / 2] = 1.0;
            (Architecture::ConvFilter { kernel_size }, k)
        }
        DenoiserConfig::SoftThreshold { threshold } => {
            if !(threshold >= 0.0) || !threshold.is_finite() {
                return Err(invalid(format!(
                    "soft threshold must be finite and >= 0, got {threshold}"
                )));
            }
            (Architecture::SoftThreshold, vec![threshold])
        }
        DenoiserConfig::SmallCnn { spec, precision } => {
            spec.validate()?;
            let params = spec.init_params(init_stream);
            (Architecture::SmallCnn { spec, precision }, params)
        }
    };
    Denoiser::new(arch, params)
}

impl Denoiser {
    pub fn new(arch: Architecture, params: Vec<f64>) -> Result<Self> {
        if params.len() != arch.param_count() {
            return Err(Error::LengthMismatch {
                expected: arch.param_count(),
                actual: params.len(),
            });
        }
        if let Architecture::ConvFilter { kernel_size } = arch {
            if kernel_size % 2 == 0 {
                return Err(invalid("conv_filter kernel size must be odd"));
            }
        }
        if let Architecture::SmallCnn { spec, .. } = &arch {
            spec.validate()?;
        }
        Ok(Self { arch, params })
    }

    pub fn identity() -> Self {
        Self::new(Architecture::Identity, vec![]).unwrap()
    }

    pub fn scaling(a: f64) -> Self {
        Self::new(Architecture::Scaling, vec![a]).unwrap()
    }

    pub fn soft_threshold(t: f64) -> Self {
        Self::new(Architecture::SoftThreshold, vec![t]).unwrap()
    }

    /// Filter with an explicit odd square kernel, row-major.
    pub fn conv_filter(kernel: Vec<f64>) -> Result<Self> {
        let k = (kernel.len() as f64).sqrt().round() as usize;
        if k * k != kernel.len() {
            return Err(invalid("conv_filter kernel must be square"));
        }
        Self::new(Architecture::ConvFilter { kernel_size: k }, kernel)
    }

    pub fn kind(&self) -> DenoiserKind {
        self.arch.kind()
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::LengthMismatch {
                expected: self.params.len(),
                actual: params.len(),
            });
        }
        self.params.copy_from_slice(params);
        Ok(())
    }

    pub fn with_params(&self, params: &[f64]) -> Result<Self> {
        let mut d = self.clone();
        d.set_params(params)?;
        Ok(d)
    }

    /// Switches CNN arithmetic; a no-op for the closed-form kinds.
    pub fn set_precision(&mut self, precision: Precision) {
        if let Architecture::SmallCnn { precision: p, .. } = &mut self.arch {
            *p = precision;
        }
    }

    /// Identity, scaling and convolution are linear in `y`.
    pub fn is_linear(&self) -> bool {
        matches!(
            self.kind(),
            DenoiserKind::Identity | DenoiserKind::Scaling | DenoiserKind::ConvFilter
        )
    }

    fn check_input(&self, y: &Image) -> Result<()> {
        if let Architecture::SmallCnn { spec, .. } = &self.arch {
            if y.channels() != spec.channels {
                return Err(Error::ShapeMismatch {
                    expected: (y.height(), y.width(), spec.channels),
                    actual: y.shape().as_tuple(),
                });
            }
        }
        Ok(())
    }

    pub fn forward(&self, y: &Image) -> Result<Image> {
        self.check_input(y)?;
        match &self.arch {
            Architecture::Identity => Ok(y.clone()),
            Architecture::Scaling => Ok(y.scale(self.params[0])),
            Architecture::SoftThreshold => {
                let t = self.params[0];
                Ok(y.map(|v| v.signum() * (v.abs() - t).max(0.0)))
            }
            Architecture::ConvFilter { kernel_size } => Ok(self.filter(y, *kernel_size)),
            Architecture::SmallCnn { .. } => Ok(self.forward_traced(y)?.0),
        }
    }

    /// Forward pass that also returns what the reverse sweep needs.
    pub fn forward_traced(&self, y: &Image) -> Result<(Image, Trace)> {
        self.check_input(y)?;
        match &self.arch {
            Architecture::SmallCnn { spec, precision } => {
                let (h, w) = (y.height(), y.width());
                let planar = y.to_planar();
                match precision {
                    Precision::F64 => {
                        let (out, tape) = cnn::forward(spec, &self.params, &planar, h, w);
                        let img = Image::from_planar(y.shape(), &out)?;
                        Ok((img, Trace(TraceInner::CnnF64(y.clone(), tape))))
                    }
                    Precision::F32 => {
                        let p32: Vec<f32> = self.params.iter().map(|&v| v as f32).collect();
                        let y32: Vec<f32> = planar.iter().map(|&v| v as f32).collect();
                        let (out, tape) = cnn::forward(spec, &p32, &y32, h, w);
                        let out64: Vec<f64> = out.iter().map(|&v| v as f64).collect();
                        let img = Image::from_planar(y.shape(), &out64)?;
                        Ok((img, Trace(TraceInner::CnnF32(y.clone(), tape))))
                    }
                }
            }
            _ => Ok((self.forward(y)?, Trace(TraceInner::Input(y.clone())))),
        }
    }

    /// `u^T dh(y)/dtheta` using a trace from [`Denoiser::forward_traced`].
    pub fn vjp(&self, trace: &Trace, cotangent: &Image) -> Result<ParamGradient> {
        let y = trace.input();
        y.ensure_same_shape(cotangent)?;
        let grad = match (&self.arch, &trace.0) {
            (Architecture::Identity, _) => vec![],
            (Architecture::Scaling, _) => vec![cotangent.dot(y)?],
            (Architecture::SoftThreshold, _) => {
                let t = self.params[0];
                let g = y
                    .data()
                    .iter()
                    .zip(cotangent.data())
                    .filter(|(v, _)| v.abs() > t)
                    .map(|(v, u)| -v.signum() * u)
                    .sum();
                vec![g]
            }
            (Architecture::ConvFilter { kernel_size }, _) => {
                self.filter_vjp(y, cotangent, *kernel_size)
            }
            (Architecture::SmallCnn { spec, .. }, TraceInner::CnnF64(_, tape)) => {
                cnn::vjp(spec, &self.params, tape, &cotangent.to_planar())
            }
            (Architecture::SmallCnn { spec, .. }, TraceInner::CnnF32(_, tape)) => {
                let p32: Vec<f32> = self.params.iter().map(|&v| v as f32).collect();
                let u32_: Vec<f32> = cotangent.to_planar().iter().map(|&v| v as f32).collect();
                cnn::vjp(spec, &p32, tape, &u32_)
                    .into_iter()
                    .map(|v| v as f64)
                    .collect()
            }
            (Architecture::SmallCnn { .. }, TraceInner::Input(_)) => {
                return Err(invalid("trace was not produced by this network"))
            }
        };
        Ok(ParamGradient(grad))
    }

    /// Exact reverse-mode parameter gradient `u^T dh(y)/dtheta`.
    pub fn param_vjp(&self, y: &Image, cotangent: &Image) -> Result<ParamGradient> {
        y.ensure_same_shape(cotangent)?;
        let (_, trace) = self.forward_traced(y)?;
        self.vjp(&trace, cotangent)
    }

    /// `sum_i dh_i(y)/dy_i` for the closed-form kinds. Soft thresholding uses
    /// its weak derivative, the count of entries above the threshold.
    pub fn analytic_divergence(&self, y: &Image) -> Result<f64> {
        let n = y.len() as f64;
        match &self.arch {
            Architecture::Identity => Ok(n),
            Architecture::Scaling => Ok(self.params[0] * n),
            Architecture::ConvFilter { kernel_size } => {
                Ok(n * self.params[kernel_size * kernel_size / 2])
            }
            Architecture::SoftThreshold => {
                let t = self.params[0];
                Ok(y.data().iter().filter(|v| v.abs() > t).count() as f64)
            }
            Architecture::SmallCnn { .. } => Err(Error::UnsupportedDivergence("small_cnn")),
        }
    }

    /// Gradient of [`Denoiser::analytic_divergence`] with respect to the
    /// parameters (zero almost everywhere for the threshold).
    pub fn analytic_divergence_param_grad(&self, y: &Image) -> Result<ParamGradient> {
        let n = y.len() as f64;
        let mut g = ParamGradient::zeros(self.param_count());
        match &self.arch {
            Architecture::Identity | Architecture::SoftThreshold => {}
            Architecture::Scaling => g.0[0] = n,
            Architecture::ConvFilter { kernel_size } => g.0[kernel_size * kernel_size / 2] = n,
            Architecture::SmallCnn { .. } => return Err(Error::UnsupportedDivergence("small_cnn")),
        }
        Ok(g)
    }

    fn filter(&self, y: &Image, k: usize) -> Image {
        let (h, w, c) = y.shape().as_tuple();
        let g = conv::ConvGeometry {
            in_channels: 1,
            out_channels: 1,
            kernel: k,
            height: h,
            width: w,
        };
        let planar = y.to_planar();
        let mut out = vec![0.0; planar.len()];
        for ch in 0..c {
            let r = ch * h * w..(ch + 1) * h * w;
            conv::forward(&g, &planar[r.clone()], &self.params, &[], &mut out[r]);
        }
        Image::from_planar(y.shape(), &out).expect("same shape")
    }

    fn filter_vjp(&self, y: &Image, u: &Image, k: usize) -> Vec<f64> {
        let (h, w, c) = y.shape().as_tuple();
        let g = conv::ConvGeometry {
            in_channels: 1,
            out_channels: 1,
            kernel: k,
            height: h,
            width: w,
        };
        let (py, pu) = (y.to_planar(), u.to_planar());
        let mut grad = vec![0.0; k * k];
        for ch in 0..c {
            let r = ch * h * w..(ch + 1) * h * w;
            conv::backward_params(&g, &py[r.clone()], &pu[r], &mut grad, &mut []);
        }
        grad
    }
}
