//! Dataset containers, batching, IDX loading and synthetic generators.

mod idx;
mod synth;

pub use idx::{load_idx, load_idx_labeled, read_idx};
pub use synth::{gen_multirater_shapes, gen_two_moons, ring_points, Ellipse, MOONS_CENTER};

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::{self, Stream};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Targets {
    Unlabeled,
    Classes { labels: Vec<usize>, n_classes: usize },
    MultiLabel { bits: Vec<Vec<bool>>, n_labels: usize },
    /// `masks[example][rater]` is a flattened `H×W` mask.
    RaterMasks { masks: Vec<Vec<Vec<bool>>>, raters: usize },
}

/// Ground-truth shapes behind a synthetic segmentation dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct ShapeMeta {
    pub ellipses: Vec<Ellipse>,
    pub jitter_px: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// `[N, D]` for tabular data or `[N, C, H, W]` for images.
    pub inputs: Tensor,
    pub targets: Targets,
    pub split: Split,
    pub provenance: String,
    pub shapes: Option<ShapeMeta>,
}

/// One step's worth of example indices plus the rater to train against.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub rater: Option<usize>,
}

/// Targets of one batch in the form the losses consume.
#[derive(Clone, Debug, PartialEq)]
pub enum BatchTargets {
    Classes(Vec<usize>),
    /// Flattened per-element binary targets (multi-label bits or mask pixels).
    Binary(Vec<f64>),
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.inputs.shape().first().copied().unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Per-example input shape.
    pub fn example_shape(&self) -> &[usize] {
        &self.inputs.shape()[1..]
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        match &self.targets {
            Targets::Unlabeled => {}
            Targets::Classes { labels, n_classes } => {
                if labels.len() != n {
                    return Err(Error::contract(format!("{} labels for {n} examples", labels.len())));
                }
                if let Some(bad) = labels.iter().find(|&&l| l >= *n_classes) {
                    return Err(Error::contract(format!("label {bad} out of range for {n_classes} classes")));
                }
            }
            Targets::MultiLabel { bits, n_labels } => {
                if bits.len() != n || bits.iter().any(|b| b.len() != *n_labels) {
                    return Err(Error::contract("multi-label targets do not match examples"));
                }
            }
            Targets::RaterMasks { masks, raters } => {
                let pixels: usize = self.example_shape().iter().skip(1).product();
                if *raters == 0 {
                    return Err(Error::contract("at least one rater required"));
                }
                if masks.len() != n || masks.iter().any(|m| m.len() != *raters || m.iter().any(|r| r.len() != pixels)) {
                    return Err(Error::contract("rater masks must match the input's spatial shape"));
                }
            }
        }
        Ok(())
    }

    /// Keeps the given examples, in order.
    pub fn subset(&self, indices: &[usize], split: Split) -> Result<Dataset> {
        fn pick<T: Clone>(v: &[T], indices: &[usize]) -> Vec<T> {
            indices.iter().map(|&i| v[i].clone()).collect()
        }
        let targets = match &self.targets {
            Targets::Unlabeled => Targets::Unlabeled,
            Targets::Classes { labels, n_classes } => Targets::Classes {
                labels: indices.iter().map(|&i| labels[i]).collect(),
                n_classes: *n_classes,
            },
            Targets::MultiLabel { bits, n_labels } => Targets::MultiLabel {
                bits: pick(bits, indices),
                n_labels: *n_labels,
            },
            Targets::RaterMasks { masks, raters } => Targets::RaterMasks {
                masks: pick(masks, indices),
                raters: *raters,
            },
        };
        Ok(Dataset {
            inputs: self.inputs.gather_rows(indices)?,
            targets,
            split,
            provenance: self.provenance.clone(),
            shapes: self.shapes.as_ref().map(|s| ShapeMeta {
                ellipses: pick(&s.ellipses, indices),
                jitter_px: s.jitter_px,
            }),
        })
    }

    /// Splits off the last `n_test` examples as a test split.
    pub fn split_off_test(&self, n_test: usize) -> Result<(Dataset, Dataset)> {
        let n = self.len();
        if n_test >= n {
            return Err(Error::contract(format!("cannot hold out {n_test} of {n} examples")));
        }
        let train: Vec<usize> = (0..n - n_test).collect();
        let test: Vec<usize> = (n - n_test..n).collect();
        Ok((self.subset(&train, Split::Train)?, self.subset(&test, Split::Test)?))
    }

    pub fn batch_inputs(&self, indices: &[usize]) -> Result<Tensor> {
        self.inputs.gather_rows(indices)
    }

    /// Targets for a batch; `rater` selects which annotator's mask is used.
    pub fn batch_targets(&self, indices: &[usize], rater: Option<usize>) -> Result<BatchTargets> {
        Ok(match &self.targets {
            Targets::Unlabeled => return Err(Error::contract("dataset has no targets")),
            Targets::Classes { labels, .. } => BatchTargets::Classes(indices.iter().map(|&i| labels[i]).collect()),
            Targets::MultiLabel { bits, .. } => BatchTargets::Binary(
                indices
                    .iter()
                    .flat_map(|&i| bits[i].iter().map(|&b| b as u8 as f64))
                    .collect(),
            ),
            Targets::RaterMasks { masks, raters } => {
                let r = rater.unwrap_or(0);
                if r >= *raters {
                    return Err(Error::contract(format!("rater {r} out of range for {raters} raters")));
                }
                BatchTargets::Binary(
                    indices
                        .iter()
                        .flat_map(|&i| masks[i][r].iter().map(|&b| b as u8 as f64))
                        .collect(),
                )
            }
        })
    }

    /// Pixelwise strict-majority vote over raters.
    pub fn majority_mask(&self, example: usize) -> Option<Vec<bool>> {
        match &self.targets {
            Targets::RaterMasks { masks, raters } => {
                let m = &masks[example];
                let pixels = m[0].len();
                Some(
                    (0..pixels)
                        .map(|p| 2 * m.iter().filter(|r| r[p]).count() > *raters)
                        .collect(),
                )
            }
            _ => None,
        }
    }

    /// Inverse class frequency normalized to mean 1.
    ///
    /// Multi-class data yields one weight per class; binary-per-element data
    /// (multi-label, masks) yields `[w_negative, w_positive]`.
    pub fn class_weights(&self) -> Vec<f64> {
        let counts: Vec<f64> = match &self.targets {
            Targets::Unlabeled => return vec![],
            Targets::Classes { labels, n_classes } => {
                let mut c = vec![0.0; *n_classes];
                labels.iter().for_each(|&l| c[l] += 1.0);
                c
            }
            Targets::MultiLabel { bits, .. } => {
                let pos = bits.iter().flatten().filter(|&&b| b).count() as f64;
                let total = bits.iter().map(Vec::len).sum::<usize>() as f64;
                vec![total - pos, pos]
            }
            Targets::RaterMasks { masks, .. } => {
                let pos = masks.iter().flatten().flatten().filter(|&&b| b).count() as f64;
                let total = masks.iter().flatten().map(Vec::len).sum::<usize>() as f64;
                vec![total - pos, pos]
            }
        };
        let inv: Vec<Option<f64>> = counts.iter().map(|&c| (c > 0.0).then(|| 1.0 / c)).collect();
        let present: Vec<f64> = inv.iter().flatten().copied().collect();
        if present.is_empty() {
            return vec![1.0; counts.len()];
        }
        let mean = present.iter().sum::<f64>() / present.len() as f64;
        inv.iter().map(|w| w.map_or(1.0, |w| w / mean)).collect()
    }

    pub fn n_raters(&self) -> Option<usize> {
        match &self.targets {
            Targets::RaterMasks { raters, .. } => Some(*raters),
            _ => None,
        }
    }
}

/// Epoch-keyed shuffled batches covering every example exactly once; the
/// final short batch is kept. Datasets with rater masks get one rater drawn
/// per step from the same keyed generator.
pub fn batches(dataset: &Dataset, batch_size: usize, seed: u64, epoch: usize) -> Result<Vec<Batch>> {
    let n = dataset.len();
    if n == 0 {
        return Err(Error::contract("cannot batch an empty dataset"));
    }
    if batch_size == 0 {
        return Err(Error::contract("batch_size must be >= 1"));
    }
    let mut order: Vec<usize> = (0..n).collect();
    if batch_size < n {
        let mut r = rng::keyed_rng(seed, Stream::Shuffle, &[epoch as u64]);
        order.shuffle(&mut r);
    }
    let raters = dataset.n_raters();
    Ok(order
        .chunks(batch_size)
        .enumerate()
        .map(|(b, chunk)| Batch {
            indices: chunk.to_vec(),
            rater: raters.map(|r| rng::keyed_rng(seed, Stream::Rater, &[epoch as u64, b as u64]).random_range(0..r)),
        })
        .collect())
}
