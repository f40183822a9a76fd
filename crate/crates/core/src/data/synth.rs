use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{Dataset, ShapeMeta, Split, Targets};
use crate::error::{Error, Result};
use crate::rng::{self, Stream};
use crate::tensor::Tensor;

/// Centre of the two-moons point cloud.
pub const MOONS_CENTER: [f64; 2] = [0.5, 0.25];

const FOREGROUND: f64 = 0.8;
const BACKGROUND: f64 = 0.2;
const MAX_SHAPE_RETRIES: usize = 100;

/// Two interleaved half circles. Even indices belong to the upper moon
/// `(cos t, sin t)`, odd ones to the lower moon `(1 − cos t, 0.5 − sin t)`,
/// `t ~ U[0, π]`, both jittered by `N(0, noise_sigma²)`.
pub fn gen_two_moons(n: usize, noise_sigma: f64, seed: u64) -> Result<Dataset> {
    if n % 2 != 0 {
        return Err(Error::contract(format!("two moons needs an even n, got {n}")));
    }
    if !(noise_sigma >= 0.0) {
        return Err(Error::contract("noise_sigma must be >= 0"));
    }
    let mut r = rng::keyed_rng(seed, Stream::Generator, &[0]);
    let noise = Normal::new(0.0, noise_sigma.max(0.0)).expect("finite sigma");
    let mut data = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let t = r.random::<f64>() * PI;
        let label = i % 2;
        let (x, y) = if label == 0 {
            (t.cos(), t.sin())
        } else {
            (1.0 - t.cos(), 0.5 - t.sin())
        };
        let (dx, dy) = if noise_sigma > 0.0 {
            (noise.sample(&mut r), noise.sample(&mut r))
        } else {
            (0.0, 0.0)
        };
        data.push(x + dx);
        data.push(y + dy);
        labels.push(label);
    }
    Ok(Dataset {
        inputs: Tensor::new(vec![n, 2], data)?,
        targets: Targets::Classes { labels, n_classes: 2 },
        split: Split::Train,
        provenance: format!("two_moons n={n} noise={noise_sigma} seed={seed}"),
        shapes: None,
    })
}

/// `n` evenly spaced points on a circle of `radius` around `center`.
pub fn ring_points(n: usize, center: [f64; 2], radius: f64) -> Tensor {
    let data = (0..n)
        .flat_map(|i| {
            let a = 2.0 * PI * i as f64 / n as f64;
            [center[0] + radius * a.cos(), center[1] + radius * a.sin()]
        })
        .collect();
    Tensor::new(vec![n, 2], data).expect("2 coordinates per point")
}

/// Axis-aligned ellipse in pixel coordinates; pixel `(x, y)` has centre `(x + 0.5, y + 0.5)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ellipse {
    pub cx: f64,
    pub cy: f64,
    pub rx: f64,
    pub ry: f64,
}

impl Ellipse {
    /// Same centre, both radii grown by `delta` (shrunk when negative).
    pub fn offset(&self, delta: f64) -> Ellipse {
        Ellipse {
            rx: self.rx + delta,
            ry: self.ry + delta,
            ..*self
        }
    }

    pub fn contains(&self, px: f64, py: f64) -> bool {
        if self.rx <= 0.0 || self.ry <= 0.0 {
            return false;
        }
        let u = (px - self.cx) / self.rx;
        let v = (py - self.cy) / self.ry;
        u * u + v * v <= 1.0
    }

    pub fn rasterize(&self, size: usize) -> Vec<bool> {
        (0..size * size)
            .map(|p| self.contains((p % size) as f64 + 0.5, (p / size) as f64 + 0.5))
            .collect()
    }

    /// Pixels that some rater with radius offset in `[−jitter, jitter]` may
    /// label differently from another: inside the grown ellipse but not the
    /// shrunk one.
    pub fn disagreement_band(&self, size: usize, jitter: f64) -> Vec<bool> {
        let outer = self.offset(jitter);
        let inner = self.offset(-jitter);
        (0..size * size)
            .map(|p| {
                let (x, y) = ((p % size) as f64 + 0.5, (p / size) as f64 + 0.5);
                outer.contains(x, y) && !inner.contains(x, y)
            })
            .collect()
    }
}

/// Noisy single-ellipse images with `raters` masks each. Every rater sees
/// the same ellipse with both radii shifted by an independent
/// `U[−jitter_px, jitter_px]` offset, so disagreement lives near the boundary.
pub fn gen_multirater_shapes(
    n: usize,
    image_size: usize,
    raters: usize,
    jitter_px: f64,
    image_noise: f64,
    seed: u64,
) -> Result<Dataset> {
    if raters == 0 {
        return Err(Error::contract("at least one rater required"));
    }
    if !(jitter_px >= 0.0) || !(image_noise >= 0.0) {
        return Err(Error::contract("jitter_px and image_noise must be >= 0"));
    }
    let s = image_size as f64;
    let noise = Normal::new(0.0, image_noise).expect("finite sigma");
    let mut inputs = Vec::with_capacity(n * image_size * image_size);
    let mut masks = Vec::with_capacity(n);
    let mut ellipses = Vec::with_capacity(n);
    for i in 0..n {
        let mut r = rng::keyed_rng(seed, Stream::Generator, &[1, i as u64]);
        let mut shape = None;
        for _ in 0..MAX_SHAPE_RETRIES {
            let rx = r.random_range(0.15 * s..0.3 * s);
            let ry = r.random_range(0.15 * s..0.3 * s);
            let (mx, my) = (rx + jitter_px + 0.5, ry + jitter_px + 0.5);
            if rx <= jitter_px || ry <= jitter_px || 2.0 * mx >= s || 2.0 * my >= s {
                continue;
            }
            let cx = r.random_range(mx..s - mx);
            let cy = r.random_range(my..s - my);
            shape = Some(Ellipse { cx, cy, rx, ry });
            break;
        }
        let e = shape.ok_or_else(|| {
            Error::contract(format!(
                "could not place an ellipse with jitter {jitter_px} in a {image_size}px image after {MAX_SHAPE_RETRIES} tries"
            ))
        })?;
        let base = e.rasterize(image_size);
        inputs.extend(base.iter().map(|&inside| {
            let v = if inside { FOREGROUND } else { BACKGROUND };
            let n = if image_noise > 0.0 { noise.sample(&mut r) } else { 0.0 };
            (v + n).clamp(0.0, 1.0)
        }));
        let rater_masks = (0..raters)
            .map(|_| {
                let d = if jitter_px > 0.0 {
                    r.random_range(-jitter_px..=jitter_px)
                } else {
                    0.0
                };
                e.offset(d).rasterize(image_size)
            })
            .collect();
        masks.push(rater_masks);
        ellipses.push(e);
    }
    let ds = Dataset {
        inputs: Tensor::new(vec![n, 1, image_size, image_size], inputs)?,
        targets: Targets::RaterMasks { masks, raters },
        split: Split::Train,
        provenance: format!(
            "multirater_shapes n={n} size={image_size} raters={raters} jitter={jitter_px} noise={image_noise} seed={seed}"
        ),
        shapes: Some(ShapeMeta { ellipses, jitter_px }),
    };
    ds.validate()?;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noiseless_moons_lie_on_arcs() {
        let d = gen_two_moons(4, 0.0, 11).unwrap();
        let Targets::Classes { labels, .. } = &d.targets else { panic!() };
        for i in 0..4 {
            let (x, y) = (d.inputs.data()[2 * i], d.inputs.data()[2 * i + 1]);
            let r = if labels[i] == 0 {
                (x * x + y * y).sqrt()
            } else {
                ((x - 1.0).powi(2) + (y - 0.5).powi(2)).sqrt()
            };
            assert!((r - 1.0).abs() < 1e-12);
            if labels[i] == 0 {
                assert!(y >= 0.0);
            } else {
                assert!(y <= 0.5);
            }
        }
        assert_eq!(labels, &[0, 1, 0, 1]);
    }

    #[test]
    fn generators_are_seeded() {
        assert_eq!(gen_two_moons(20, 0.1, 3).unwrap(), gen_two_moons(20, 0.1, 3).unwrap());
        assert_ne!(gen_two_moons(20, 0.1, 3).unwrap(), gen_two_moons(20, 0.1, 4).unwrap());
        assert!(gen_two_moons(3, 0.1, 3).is_err());
        let a = gen_multirater_shapes(3, 16, 4, 2.0, 0.1, 9).unwrap();
        assert_eq!(a, gen_multirater_shapes(3, 16, 4, 2.0, 0.1, 9).unwrap());
    }

    #[test]
    fn zero_jitter_raters_agree() {
        let d = gen_multirater_shapes(5, 16, 4, 0.0, 0.1, 1).unwrap();
        let Targets::RaterMasks { masks, .. } = &d.targets else { panic!() };
        for (i, m) in masks.iter().enumerate() {
            assert!(m.iter().all(|r| r == &m[0]));
            assert_eq!(d.majority_mask(i).unwrap(), m[0]);
        }
    }

    #[test]
    fn impossible_placement_errors() {
        assert!(gen_multirater_shapes(1, 4, 4, 3.0, 0.0, 1).is_err());
    }
}
