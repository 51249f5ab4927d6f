//! Procedural grayscale test images: smooth shading, piecewise-constant
//! shapes with sharp edges, oriented gratings and low-pass texture.

use crate::image::{Image, Shape};
use crate::rng::RngStream;

/// Deterministic image `index` of the corpus named `purpose`.
pub fn synthetic_image(seed: u64, purpose: &str, index: usize, size: usize) -> Image {
    let mut rng = RngStream::derive(seed, &format!("synthetic/{purpose}"), &[index as u64]);
    let n = size as f64;
    let mut img = Image::zeros(Shape::gray(size, size).expect("positive size"));

    // shading
    let base = rng.uniform_range(0.25, 0.75);
    let gx = rng.uniform_range(-0.3, 0.3);
    let gy = rng.uniform_range(-0.3, 0.3);
    for r in 0..size {
        for c in 0..size {
            let v = base + gx * (c as f64 / n - 0.5) + gy * (r as f64 / n - 0.5);
            img.set(r, c, 0, v);
        }
    }

    // low-pass texture
    let amp = rng.uniform_range(0.02, 0.08);
    let mut tex: Vec<f64> = (0..size * size).map(|_| rng.standard_normal()).collect();
    for _ in 0..3 {
        tex = box_blur(&tex, size, 2);
    }
    let scale = amp / std_dev(&tex).max(1e-12);
    for (v, t) in img.data_mut().iter_mut().zip(&tex) {
        *v += scale * t;
    }

    // grating in a disk
    let (cr, cc) = (rng.uniform_range(0.2, 0.8) * n, rng.uniform_range(0.2, 0.8) * n);
    let radius = rng.uniform_range(0.12, 0.3) * n;
    let theta = rng.uniform_range(0.0, std::f64::consts::PI);
    let period = rng.uniform_range(4.0, 12.0);
    let g_amp = rng.uniform_range(0.05, 0.2);
    for r in 0..size {
        for c in 0..size {
            let (dr, dc) = (r as f64 - cr, c as f64 - cc);
            if dr * dr + dc * dc <= radius * radius {
                let phase = (dc * theta.cos() + dr * theta.sin()) * std::f64::consts::TAU / period;
                let i = img.index(r, c, 0);
                img.data_mut()[i] += g_amp * phase.sin();
            }
        }
    }

    // flat shapes
    let shapes = 3 + rng.below(5) as usize;
    for _ in 0..shapes {
        let level = rng.uniform_range(0.0, 1.0);
        let opacity = rng.uniform_range(0.5, 1.0);
        let r0 = rng.uniform_range(0.0, n);
        let c0 = rng.uniform_range(0.0, n);
        let h = rng.uniform_range(0.08, 0.35) * n;
        let w = rng.uniform_range(0.08, 0.35) * n;
        let disk = rng.below(2) == 0;
        for r in 0..size {
            for c in 0..size {
                let (dr, dc) = (r as f64 - r0, c as f64 - c0);
                let inside = if disk {
                    (dr / h).powi(2) + (dc / w).powi(2) <= 1.0
                } else {
                    dr.abs() <= h / 2.0 && dc.abs() <= w / 2.0
                };
                if inside {
                    let i = img.index(r, c, 0);
                    let v = img.data()[i];
                    img.data_mut()[i] = (1.0 - opacity) * v + opacity * level;
                }
            }
        }
    }

    img.map(|v| v.clamp(0.0, 1.0))
}

/// `count` images of side `size`.
pub fn synthetic_corpus(seed: u64, purpose: &str, count: usize, size: usize) -> Vec<Image> {
    (0..count)
        .map(|i| synthetic_image(seed, purpose, i, size))
        .collect()
}

fn box_blur(src: &[f64], size: usize, radius: usize) -> Vec<f64> {
    let pass = |src: &[f64], horizontal: bool| -> Vec<f64> {
        let mut out = vec![0.0; src.len()];
        for r in 0..size {
            for c in 0..size {
                let (mut acc, mut cnt) = (0.0, 0.0);
                let centre = if horizontal { c } else { r };
                let lo = centre.saturating_sub(radius);
                let hi = (centre + radius).min(size - 1);
                for k in lo..=hi {
                    let (rr, cc) = if horizontal { (r, k) } else { (k, c) };
                    acc += src[rr * size + cc];
                    cnt += 1.0;
                }
                out[r * size + c] = acc / cnt;
            }
        }
        out
    };
    pass(&pass(src, true), false)
}

fn std_dev(v: &[f64]) -> f64 {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64).sqrt()
}
