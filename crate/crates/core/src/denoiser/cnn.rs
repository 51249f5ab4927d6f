//! Residual plain CNN: `h(y) = y - f(y)`, where `f` is a stack of 3x3
//! convolutions with ReLU between them and a linear last layer.

use serde::{Deserialize, Serialize};

use super::conv::{self, ConvGeometry, Real};
use crate::error::{invalid, Result};
use crate::rng::RngStream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CnnSpec {
    /// Number of convolution layers, including the first and last.
    pub layers: usize,
    /// Feature channels of the hidden layers.
    pub width: usize,
    pub kernel_size: usize,
    /// Image channels in and out.
    pub channels: usize,
}

impl Default for CnnSpec {
    fn default() -> Self {
        Self {
            layers: 7,
            width: 16,
            kernel_size: 3,
            channels: 1,
        }
    }
}

/// Offsets of one layer's weights and biases inside the flat parameter vector.
#[derive(Debug, Clone, Copy)]
pub(crate) struct LayerSlot {
    pub in_channels: usize,
    pub out_channels: usize,
    pub weight: usize,
    pub bias: usize,
}

impl LayerSlot {
    fn weight_len(&self, k: usize) -> usize {
        self.out_channels * self.in_channels * k * k
    }
}

impl CnnSpec {
    pub fn validate(&self) -> Result<()> {
        if self.layers < 2 {
            return Err(invalid("small_cnn needs at least two layers"));
        }
        if self.width == 0 || self.channels == 0 {
            return Err(invalid("small_cnn width and channels must be positive"));
        }
        if self.kernel_size % 2 == 0 {
            return Err(invalid(format!(
                "kernel size must be odd, got {}",
                self.kernel_size
            )));
        }
        Ok(())
    }

    pub(crate) fn slots(&self) -> Vec<LayerSlot> {
        let k = self.kernel_size;
        let mut offset = 0;
        (0..self.layers)
            .map(|l| {
                let in_channels = if l == 0 { self.channels } else { self.width };
                let out_channels = if l + 1 == self.layers {
                    self.channels
                } else {
                    self.width
                };
                let weight = offset;
                let bias = weight + out_channels * in_channels * k * k;
                offset = bias + out_channels;
                LayerSlot {
                    in_channels,
                    out_channels,
                    weight,
                    bias,
                }
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.slots()
            .last()
            .map(|s| s.bias + s.out_channels)
            .unwrap_or(0)
    }

    /// He-normal hidden weights, zero biases, zero last layer (identity start).
    pub fn init_params(&self, stream: &mut RngStream) -> Vec<f64> {
        let k = self.kernel_size;
        let mut params = vec![0.0; self.param_count()];
        let slots = self.slots();
        for slot in &slots[..slots.len() - 1] {
            let std = (2.0 / (slot.in_channels * k * k) as f64).sqrt();
            for p in &mut params[slot.weight..slot.weight + slot.weight_len(k)] {
                *p = std * stream.standard_normal();
            }
        }
        params
    }

    fn geometry(&self, slot: &LayerSlot, height: usize, width: usize) -> ConvGeometry {
        ConvGeometry {
            in_channels: slot.in_channels,
            out_channels: slot.out_channels,
            kernel: self.kernel_size,
            height,
            width,
        }
    }
}

/// Activations retained by a forward pass for the reverse sweep.
#[derive(Debug, Clone)]
pub struct Tape<T> {
    height: usize,
    width: usize,
    /// Input of each layer: the image for layer 0, post-ReLU features after.
    inputs: Vec<Vec<T>>,
}

/// Runs the network on a planar image; returns `h(y)` (planar) and the tape.
pub fn forward<T: Real>(
    spec: &CnnSpec,
    params: &[T],
    planar: &[T],
    height: usize,
    width: usize,
) -> (Vec<T>, Tape<T>) {
    let slots = spec.slots();
    let plane = height * width;
    let mut inputs = Vec::with_capacity(slots.len());
    let mut current = planar.to_vec();
    for (l, slot) in slots.iter().enumerate() {
        let g = spec.geometry(slot, height, width);
        let mut out = vec![T::zero(); slot.out_channels * plane];
        conv::forward(
            &g,
            &current,
            &params[slot.weight..slot.bias],
            &params[slot.bias..slot.bias + slot.out_channels],
            &mut out,
        );
        if l + 1 < slots.len() {
            for v in &mut out {
                if *v < T::zero() {
                    *v = T::zero();
                }
            }
        }
        inputs.push(std::mem::replace(&mut current, out));
    }
    // current holds the residual f(y)
    let output = planar.iter().zip(&current).map(|(&y, &r)| y - r).collect();
    (
        output,
        Tape {
            height,
            width,
            inputs,
        },
    )
}

/// Parameter gradient `u^T dh/dtheta` for a planar cotangent `u`.
pub fn vjp<T: Real>(spec: &CnnSpec, params: &[T], tape: &Tape<T>, cotangent: &[T]) -> Vec<T> {
    let slots = spec.slots();
    let mut grad = vec![T::zero(); params.len()];
    // h = y - f(y)
    let mut grad_z: Vec<T> = cotangent.iter().map(|&u| -u).collect();
    for (l, slot) in slots.iter().enumerate().rev() {
        let g = spec.geometry(slot, tape.height, tape.width);
        let input = &tape.inputs[l];
        {
            let (gw, gb) = grad[slot.weight..slot.bias + slot.out_channels]
                .split_at_mut(slot.bias - slot.weight);
            conv::backward_params(&g, input, &grad_z, gw, gb);
        }
        if l == 0 {
            break;
        }
        let mut grad_in = vec![T::zero(); input.len()];
        conv::backward_input(&g, &grad_z, &params[slot.weight..slot.bias], &mut grad_in);
        // ReLU mask from the stored post-activation values
        for (gi, &a) in grad_in.iter_mut().zip(input) {
            if a <= T::zero() {
                *gi = T::zero();
            }
        }
        grad_z = grad_in;
    }
    grad
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_counts_parameters() {
        let spec = CnnSpec {
            layers: 3,
            width: 4,
            kernel_size: 3,
            channels: 1,
        };
        // 1->4, 4->4, 4->1 with biases
        assert_eq!(spec.param_count(), (4 * 9 + 4) + (16 * 9 + 4) + (4 * 9 + 1));
        let slots = spec.slots();
        assert_eq!(slots[1].weight, 40);
        assert_eq!(slots[2].bias, 40 + 148 + 36);
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut spec = CnnSpec::default();
        spec.kernel_size = 4;
        assert!(spec.validate().is_err());
        spec.kernel_size = 3;
        spec.layers = 1;
        assert!(spec.validate().is_err());
    }

    #[test]
    fn fresh_network_is_identity() {
        let spec = CnnSpec::default();
        let params = spec.init_params(&mut RngStream::derive(0, "init", &[]));
        let y: Vec<f64> = (0..64).map(|i| (i as f64 * 0.37).sin()).collect();
        let (h, _) = forward(&spec, &params, &y, 8, 8);
        assert_eq!(h, y);
    }
}
