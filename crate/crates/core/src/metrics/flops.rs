//! Floating point operation counts for one per-example inference.
//!
//! Conventions: dense `2·in·out + out`; convolution
//! `2·c_in·kh·kw·c_out·H'·W' + c_out·H'·W'`; batch norm, ReLU and sigmoid one
//! per element; upsampling is a copy and counts zero. A model with Bayesian
//! entries runs `S` sampled forwards plus `2` FLOPs per Bayesian scalar per
//! sample for `μ + σ·ε`.

use crate::error::Result;
use crate::layers::{LayerSpec, ModelSpec};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FlopsCount {
    pub total: u64,
    /// `total` divided by one deterministic forward of the same architecture.
    pub ratio: f64,
}

pub fn forward_flops(spec: &ModelSpec) -> Result<u64> {
    let shapes = spec.layer_output_shapes()?;
    let mut total = 0u64;
    for (layer, out) in spec.layers.iter().zip(&shapes) {
        let elems: u64 = out.iter().product::<usize>() as u64;
        total += match *layer {
            LayerSpec::Dense { input, output } => (2 * input * output + output) as u64,
            LayerSpec::Conv2d {
                c_in,
                c_out,
                kernel,
                ..
            } => {
                let spatial = (out[1] * out[2]) as u64;
                2 * (c_in * kernel * kernel * c_out) as u64 * spatial + c_out as u64 * spatial
            }
            LayerSpec::BatchNorm { .. } | LayerSpec::Relu | LayerSpec::Sigmoid => elems,
            LayerSpec::Upsample2 => 0,
        };
    }
    Ok(total)
}

fn sampled_cost(forward: u64, n_bayes: usize, samples: usize) -> u64 {
    if n_bayes == 0 {
        forward
    } else {
        let s = samples.max(1) as u64;
        s * forward + 2 * n_bayes as u64 * s
    }
}

/// Inference cost of one model with `n_bayes` Bayesian scalars evaluated with `samples` posterior samples.
pub fn flops(spec: &ModelSpec, n_bayes: usize, samples: usize) -> Result<FlopsCount> {
    let forward = forward_flops(spec)?;
    let total = sampled_cost(forward, n_bayes, samples);
    Ok(FlopsCount {
        total,
        ratio: total as f64 / forward as f64,
    })
}

/// Inference cost of an ensemble; `member_bayes[i]` is member `i`'s Bayesian count.
pub fn ensemble_flops(spec: &ModelSpec, member_bayes: &[usize], samples: usize) -> Result<FlopsCount> {
    let forward = forward_flops(spec)?;
    let total = member_bayes.iter().map(|&b| sampled_cost(forward, b, samples)).sum();
    Ok(FlopsCount {
        total,
        ratio: total as f64 / forward as f64,
    })
}
