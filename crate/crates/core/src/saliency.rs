//! Gradient-sensitivity analysis: squared gradients are accumulated per
//! weight and the Top-k entries of each maskable block become Bayesian.

use std::cmp::Ordering;
use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::layers::Model;
use crate::tensor::Tensor;

pub const MASKS_MAGIC: &[u8; 4] = b"SBM1";

/// Accumulated squared gradients, one tensor per maskable block.
#[derive(Clone, Debug, PartialEq)]
pub struct SaliencyMap {
    pub blocks: Vec<Tensor>,
    pub n_batches_seen: usize,
}

impl SaliencyMap {
    pub fn zeros_for(model: &Model) -> Self {
        SaliencyMap {
            blocks: model.maskable_blocks().map(|b| Tensor::zeros(b.mu.shape())).collect(),
            n_batches_seen: 0,
        }
    }

    pub fn from_blocks(blocks: Vec<Tensor>) -> Self {
        SaliencyMap {
            blocks,
            n_batches_seen: 1,
        }
    }

    /// Adds `grad²` elementwise for one batch. `grads` holds one gradient per
    /// maskable block, as produced by a backward pass.
    pub fn accumulate(&mut self, grads: &[&[f64]]) -> Result<()> {
        if grads.is_empty() || grads.iter().all(|g| g.is_empty()) {
            return Err(Error::contract("saliency accumulation called with no gradients"));
        }
        if grads.len() != self.blocks.len() {
            return Err(Error::contract(format!(
                "{} gradient blocks for {} saliency blocks",
                grads.len(),
                self.blocks.len()
            )));
        }
        for (acc, g) in self.blocks.iter_mut().zip(grads) {
            if g.len() != acc.len() {
                return Err(Error::dim(format!(
                    "gradient of length {} for saliency block {:?}",
                    g.len(),
                    acc.shape()
                )));
            }
            for (a, v) in acc.data_mut().iter_mut().zip(g.iter()) {
                *a += v * v;
            }
        }
        self.n_batches_seen += 1;
        Ok(())
    }
}

/// Whether Top-k runs inside each block or across all maskable entries.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TopkScope {
    PerLayer,
    Global,
}

/// Bayesian masks for every maskable block.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskSet {
    pub shapes: Vec<Vec<usize>>,
    pub masks: Vec<Vec<bool>>,
    pub k_per_block: Vec<usize>,
    pub r_bayes: f64,
}

/// `max(1, round(r·n))` for `r > 0`, otherwise 0.
pub fn k_for(r_bayes: f64, n: usize) -> usize {
    if r_bayes <= 0.0 || n == 0 {
        0
    } else {
        ((r_bayes * n as f64).round() as usize).clamp(1, n)
    }
}

/// Descending saliency, ties to the lower index.
fn rank_order(a: (f64, usize), b: (f64, usize)) -> Ordering {
    b.0.total_cmp(&a.0).then(a.1.cmp(&b.1))
}

/// Indices of the `k` largest values, ties broken by lowest index.
pub(crate) fn topk_indices(values: &[f64], k: usize) -> Vec<usize> {
    let mut keyed: Vec<(f64, usize)> = values.iter().copied().zip(0..).collect();
    if k == 0 {
        return vec![];
    }
    if k < keyed.len() {
        keyed.select_nth_unstable_by(k - 1, |a, b| rank_order(*a, *b));
        keyed.truncate(k);
    }
    keyed.into_iter().map(|(_, i)| i).collect()
}

impl MaskSet {
    pub fn from_masks(shapes: Vec<Vec<usize>>, masks: Vec<Vec<bool>>, r_bayes: f64) -> Result<Self> {
        if shapes.len() != masks.len() {
            return Err(Error::contract("one mask per shape required"));
        }
        for (s, m) in shapes.iter().zip(&masks) {
            if s.iter().product::<usize>() != m.len() {
                return Err(Error::dim(format!("mask of length {} for shape {s:?}", m.len())));
            }
        }
        let k_per_block = masks.iter().map(|m| m.iter().filter(|&&b| b).count()).collect();
        Ok(MaskSet {
            shapes,
            masks,
            k_per_block,
            r_bayes,
        })
    }

    /// All-false masks matching the model's maskable blocks.
    pub fn empty_for(model: &Model) -> Self {
        let shapes: Vec<Vec<usize>> = model.maskable_blocks().map(|b| b.mu.shape().to_vec()).collect();
        let masks = model.maskable_blocks().map(|b| vec![false; b.mu.len()]).collect();
        MaskSet {
            k_per_block: vec![0; shapes.len()],
            shapes,
            masks,
            r_bayes: 0.0,
        }
    }

    /// The masks currently installed in a model.
    pub fn from_model(model: &Model) -> Self {
        let shapes = model.maskable_blocks().map(|b| b.mu.shape().to_vec()).collect();
        let masks = model.maskable_blocks().map(|b| b.mask.clone()).collect();
        let total = model.n_maskable_params().max(1);
        let mut set = MaskSet::from_masks(shapes, masks, 0.0).expect("shapes from model");
        set.r_bayes = set.total_bayes() as f64 / total as f64;
        set
    }

    pub fn total_bayes(&self) -> usize {
        self.k_per_block.iter().sum()
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MASKS_MAGIC)?;
        for (shape, mask) in self.shapes.iter().zip(&self.masks) {
            w.write_all(&(shape.len() as u32).to_le_bytes())?;
            for &d in shape {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            let bytes: Vec<u8> = mask.iter().map(|&m| m as u8).collect();
            w.write_all(&bytes)?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut buf = Vec::new();
        r.read_to_end(&mut buf)?;
        let mut cur = crate::pipeline::checkpoint::ByteCursor::new(&buf);
        if cur.take(4)? != MASKS_MAGIC {
            return Err(Error::format(0, "unknown magic, expected SBM1"));
        }
        let mut shapes = Vec::new();
        let mut masks = Vec::new();
        while !cur.at_end() {
            let shape = cur.shape()?;
            let n: usize = shape.iter().product();
            let offset = cur.offset();
            let bytes = cur.take(n)?;
            let mask = bytes
                .iter()
                .enumerate()
                .map(|(i, &b)| match b {
                    0 => Ok(false),
                    1 => Ok(true),
                    _ => Err(Error::format(offset + i as u64, format!("mask byte {b} is not 0/1"))),
                })
                .collect::<Result<Vec<_>>>()?;
            shapes.push(shape);
            masks.push(mask);
        }
        let total: usize = masks.iter().map(Vec::len).sum();
        let mut set = MaskSet::from_masks(shapes, masks, 0.0)?;
        set.r_bayes = set.total_bayes() as f64 / total.max(1) as f64;
        Ok(set)
    }
}

/// Marks the Top-k entries of the saliency as Bayesian.
///
/// Per layer, each block gets `k = max(1, round(r·block_size))` entries
/// (none when `r = 0`). Globally, `k` is computed over all maskable entries.
/// Ties go to the lowest flat index (block order first, for global scope).
pub fn topk_masks(saliency: &SaliencyMap, r_bayes: f64, scope: TopkScope) -> Result<MaskSet> {
    if !(0.0..=1.0).contains(&r_bayes) {
        return Err(Error::contract(format!("r_bayes must be in [0, 1], got {r_bayes}")));
    }
    let shapes: Vec<Vec<usize>> = saliency.blocks.iter().map(|t| t.shape().to_vec()).collect();
    let mut masks: Vec<Vec<bool>> = saliency.blocks.iter().map(|t| vec![false; t.len()]).collect();
    match scope {
        TopkScope::PerLayer => {
            for (block, mask) in saliency.blocks.iter().zip(masks.iter_mut()) {
                for i in topk_indices(block.data(), k_for(r_bayes, block.len())) {
                    mask[i] = true;
                }
            }
        }
        TopkScope::Global => {
            let offsets: Vec<usize> = saliency
                .blocks
                .iter()
                .scan(0, |acc, t| {
                    let o = *acc;
                    *acc += t.len();
                    Some(o)
                })
                .collect();
            let flat: Vec<f64> = saliency.blocks.iter().flat_map(|t| t.data().iter().copied()).collect();
            for i in topk_indices(&flat, k_for(r_bayes, flat.len())) {
                let b = offsets.partition_point(|&o| o <= i) - 1;
                masks[b][i - offsets[b]] = true;
            }
        }
    }
    let mut set = MaskSet::from_masks(shapes, masks, r_bayes)?;
    set.r_bayes = r_bayes;
    Ok(set)
}
