//! Layers whose weight tensors mix deterministic (point-mass) and Bayesian
//! (Gaussian) scalars.
//!
//! Every parameter tensor lives in a [`ParamBlock`] holding the mean `mu`,
//! the pre-softplus scale `rho`, a Bayesian mask and the accumulated squared
//! gradients used for saliency. Only dense and convolution weights are
//! maskable; biases and batch-norm parameters are always deterministic.

use std::fmt;

use crate::error::{Error, Result};
use crate::rng::{self, Stream};
use crate::saliency::MaskSet;
use crate::tensor::{conv2d_output_size, softplus, softplus_inverse, BatchStats, NormMode, Tape, Tensor, Var};

/// σ assigned to deterministic entries; their ρ is frozen at `softplus⁻¹` of this.
pub const DETERMINISTIC_SIGMA: f64 = 1e-12;
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum LayerSpec {
    Dense {
        input: usize,
        output: usize,
    },
    Conv2d {
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    BatchNorm {
        features: usize,
    },
    Relu,
    Sigmoid,
    /// Nearest-neighbour 2× spatial upsampling.
    Upsample2,
}

impl LayerSpec {
    /// True when the layer owns a weight tensor that may carry Bayesian entries.
    pub fn maskable(&self) -> bool {
        matches!(self, LayerSpec::Dense { .. } | LayerSpec::Conv2d { .. })
    }
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerSpec::Dense { input, output } => write!(f, "dense({input},{output})"),
            LayerSpec::Conv2d {
                c_in,
                c_out,
                kernel,
                stride,
                padding,
            } => write!(f, "conv({c_in},{c_out},{kernel},{stride},{padding})"),
            LayerSpec::BatchNorm { features } => write!(f, "bn({features})"),
            LayerSpec::Relu => f.write_str("relu"),
            LayerSpec::Sigmoid => f.write_str("sigmoid"),
            LayerSpec::Upsample2 => f.write_str("up2"),
        }
    }
}

impl std::str::FromStr for LayerSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let (name, args) = match s.split_once('(') {
            Some((n, rest)) => {
                let inner = rest
                    .strip_suffix(')')
                    .ok_or_else(|| Error::config("layers", format!("unbalanced parentheses in `{s}`")))?;
                let args = inner
                    .split(',')
                    .map(|a| a.trim().parse::<usize>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|_| Error::config("layers", format!("bad integer argument in `{s}`")))?;
                (n, args)
            }
            None => (s, vec![]),
        };
        let bad = || Error::config("layers", format!("bad layer `{s}`"));
        Ok(match (name, args.as_slice()) {
            ("dense", &[input, output]) => LayerSpec::Dense { input, output },
            ("conv", &[c_in, c_out, kernel, stride, padding]) => LayerSpec::Conv2d {
                c_in,
                c_out,
                kernel,
                stride,
                padding,
            },
            ("bn", &[features]) => LayerSpec::BatchNorm { features },
            ("relu", []) => LayerSpec::Relu,
            ("sigmoid", []) => LayerSpec::Sigmoid,
            ("up2", []) => LayerSpec::Upsample2,
            _ => return Err(bad()),
        })
    }
}

/// What the logits of a model mean.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Head {
    /// One softmax distribution over `classes` per example.
    Multiclass { classes: usize },
    /// Independent sigmoid per label.
    Multilabel { labels: usize },
    /// One sigmoid per output pixel.
    Segmentation,
}

impl fmt::Display for Head {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Head::Multiclass { classes } => write!(f, "multiclass({classes})"),
            Head::Multilabel { labels } => write!(f, "multilabel({labels})"),
            Head::Segmentation => f.write_str("segmentation"),
        }
    }
}

impl std::str::FromStr for Head {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let num = |p: &str| -> Result<usize> {
            s.strip_prefix(p)
                .and_then(|r| r.strip_suffix(')'))
                .and_then(|r| r.parse().ok())
                .ok_or_else(|| Error::config("head", format!("bad head `{s}`")))
        };
        if s == "segmentation" {
            Ok(Head::Segmentation)
        } else if s.starts_with("multiclass(") {
            Ok(Head::Multiclass { classes: num("multiclass(")? })
        } else if s.starts_with("multilabel(") {
            Ok(Head::Multilabel { labels: num("multilabel(")? })
        } else {
            Err(Error::config("head", format!("bad head `{s}`")))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelSpec {
    pub layers: Vec<LayerSpec>,
    /// Per-example input shape: `[features]` or `[channels, height, width]`.
    pub input_shape: Vec<usize>,
    pub head: Head,
}

impl ModelSpec {
    /// Two hidden layers of 64 units with batch norm and ReLU.
    pub fn reference_mlp(input_dim: usize, head: Head) -> Self {
        let out = match head {
            Head::Multiclass { classes } => classes,
            Head::Multilabel { labels } => labels,
            Head::Segmentation => 1,
        };
        ModelSpec {
            layers: vec![
                LayerSpec::Dense { input: input_dim, output: 64 },
                LayerSpec::BatchNorm { features: 64 },
                LayerSpec::Relu,
                LayerSpec::Dense { input: 64, output: 64 },
                LayerSpec::BatchNorm { features: 64 },
                LayerSpec::Relu,
                LayerSpec::Dense { input: 64, output: out },
            ],
            input_shape: vec![input_dim],
            head,
        }
    }

    /// Three-level encoder/decoder CNN (8/16/32 channels, 3×3 kernels,
    /// stride-2 downsampling, nearest-neighbour upsampling) producing one
    /// logit per pixel. `size` must be divisible by 4.
    pub fn reference_encoder_decoder(channels: usize, size: usize) -> Self {
        let conv = |c_in, c_out, stride| LayerSpec::Conv2d {
            c_in,
            c_out,
            kernel: 3,
            stride,
            padding: 1,
        };
        let bn = |features| LayerSpec::BatchNorm { features };
        ModelSpec {
            layers: vec![
                conv(channels, 8, 1),
                bn(8),
                LayerSpec::Relu,
                conv(8, 16, 2),
                bn(16),
                LayerSpec::Relu,
                conv(16, 32, 2),
                bn(32),
                LayerSpec::Relu,
                LayerSpec::Upsample2,
                conv(32, 16, 1),
                bn(16),
                LayerSpec::Relu,
                LayerSpec::Upsample2,
                conv(16, 8, 1),
                bn(8),
                LayerSpec::Relu,
                conv(8, 1, 1),
            ],
            input_shape: vec![channels, size, size],
            head: Head::Segmentation,
        }
    }

    /// Per-example output shape of every layer; errors if consecutive layers do not compose.
    pub fn layer_output_shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut shape = self.input_shape.clone();
        let mut out = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let mismatch = |want: String| {
                Error::dim(format!("layer {i} ({layer}) expects {want}, receives {shape:?}"))
            };
            shape = match *layer {
                LayerSpec::Dense { input, output } => {
                    if shape != [input] {
                        return Err(mismatch(format!("[{input}]")));
                    }
                    vec![output]
                }
                LayerSpec::Conv2d {
                    c_in,
                    c_out,
                    kernel,
                    stride,
                    padding,
                } => {
                    let [c, h, w] = shape[..] else {
                        return Err(mismatch(format!("[{c_in}, H, W]")));
                    };
                    if c != c_in || kernel > h + 2 * padding || kernel > w + 2 * padding || stride == 0 {
                        return Err(mismatch(format!("[{c_in}, H, W] with H, W >= {kernel}")));
                    }
                    vec![
                        c_out,
                        conv2d_output_size(h, kernel, stride, padding),
                        conv2d_output_size(w, kernel, stride, padding),
                    ]
                }
                LayerSpec::BatchNorm { features } => {
                    if shape.first() != Some(&features) {
                        return Err(mismatch(format!("{features} channels")));
                    }
                    shape.clone()
                }
                LayerSpec::Relu | LayerSpec::Sigmoid => shape.clone(),
                LayerSpec::Upsample2 => {
                    let [c, h, w] = shape[..] else {
                        return Err(mismatch("[C, H, W]".into()));
                    };
                    vec![c, 2 * h, 2 * w]
                }
            };
            out.push(shape.clone());
        }
        let last = out.last().cloned().unwrap_or_else(|| self.input_shape.clone());
        let ok = match self.head {
            Head::Multiclass { classes } => last == [classes],
            Head::Multilabel { labels } => last == [labels],
            Head::Segmentation => {
                last.len() == 3 && last[0] == 1 && last[1..] == self.input_shape[self.input_shape.len() - 2..]
            }
        };
        if !ok {
            return Err(Error::dim(format!(
                "model output {last:?} does not fit head {}",
                self.head
            )));
        }
        Ok(out)
    }

    pub fn output_shape(&self) -> Result<Vec<usize>> {
        Ok(self.layer_output_shapes()?.pop().unwrap_or_else(|| self.input_shape.clone()))
    }

    pub fn layers_descriptor(&self) -> String {
        self.layers.iter().map(ToString::to_string).collect::<Vec<_>>().join(" ")
    }

    pub fn parse_layers(text: &str) -> Result<Vec<LayerSpec>> {
        text.split_whitespace().map(str::parse).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlockRole {
    Weight,
    Bias,
    BnScale,
    BnShift,
    RunningMean,
    RunningVar,
}

impl BlockRole {
    fn suffix(self) -> &'static str {
        match self {
            BlockRole::Weight => "weight",
            BlockRole::Bias => "bias",
            BlockRole::BnScale => "scale",
            BlockRole::BnShift => "shift",
            BlockRole::RunningMean => "running_mean",
            BlockRole::RunningVar => "running_var",
        }
    }
}

/// One parameter tensor: mean μ, pre-softplus scale ρ (σ = softplus(ρ)),
/// Bayesian mask and accumulated squared gradients. All four share a shape.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamBlock {
    pub name: String,
    pub layer: usize,
    pub role: BlockRole,
    pub mu: Tensor,
    pub rho: Tensor,
    pub mask: Vec<bool>,
    pub sq_grad_acc: Tensor,
}

impl ParamBlock {
    fn new(layer: usize, role: BlockRole, mu: Tensor) -> Self {
        let shape = mu.shape().to_vec();
        let n = mu.len();
        ParamBlock {
            name: format!("layer{layer}.{}", role.suffix()),
            layer,
            role,
            rho: Tensor::full(&shape, softplus_inverse(DETERMINISTIC_SIGMA)),
            mask: vec![false; n],
            sq_grad_acc: Tensor::zeros(&shape),
            mu,
        }
    }

    pub fn maskable(&self) -> bool {
        self.role == BlockRole::Weight
    }

    /// Receives gradient updates (running statistics do not).
    pub fn trainable(&self) -> bool {
        !matches!(self.role, BlockRole::RunningMean | BlockRole::RunningVar)
    }

    pub fn decays(&self) -> bool {
        matches!(self.role, BlockRole::Weight | BlockRole::Bias)
    }

    pub fn n_bayes(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn sigma(&self) -> Vec<f64> {
        self.rho.data().iter().map(|&r| softplus(r)).collect()
    }
}

/// Standard-normal noise for each maskable block, zero at deterministic entries.
#[derive(Clone, Debug, PartialEq)]
pub struct EpsilonSet {
    /// Indexed by maskable-block ordinal; `None` for blocks without Bayesian entries.
    pub blocks: Vec<Option<Tensor>>,
}

impl EpsilonSet {
    /// Draws noise for every maskable block that has Bayesian entries; the
    /// stream for block `b` is keyed by `key ++ [b]`.
    pub fn draw(model: &Model, seed: u64, stream: Stream, key: &[u64]) -> Self {
        let blocks = model
            .maskable_blocks()
            .enumerate()
            .map(|(ord, block)| {
                if block.n_bayes() == 0 {
                    return None;
                }
                let mut k = key.to_vec();
                k.push(ord as u64);
                let mut r = rng::keyed_rng(seed, stream, &k);
                let mut eps = rng::standard_normals(&mut r, block.mu.len());
                for (e, &m) in eps.iter_mut().zip(&block.mask) {
                    if !m {
                        *e = 0.0;
                    }
                }
                Some(Tensor::new(block.mu.shape().to_vec(), eps).expect("shape from block"))
            })
            .collect();
        EpsilonSet { blocks }
    }

    pub fn zeros(model: &Model) -> Self {
        EpsilonSet {
            blocks: model
                .maskable_blocks()
                .map(|b| Some(Tensor::zeros(b.mu.shape())))
                .collect(),
        }
    }
}

/// Leaves registered for one forward pass plus the batch statistics it produced.
#[derive(Debug)]
pub struct ForwardPass {
    pub logits: Var,
    /// Tape leaf for μ of each block (trainable blocks only).
    pub mu_vars: Vec<Option<Var>>,
    /// Tape leaf for ρ of each maskable block that was sampled.
    pub rho_vars: Vec<Option<Var>>,
    /// `(layer index, statistics)` for every batch-norm layer in batch mode.
    pub bn_stats: Vec<(usize, BatchStats)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub spec: ModelSpec,
    pub blocks: Vec<ParamBlock>,
    /// First block index of each layer.
    layer_start: Vec<usize>,
}

impl Model {
    /// He-normal weights, zero biases, unit batch-norm scale; all entries deterministic.
    pub fn init(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.layer_output_shapes()?;
        let mut blocks = Vec::new();
        let mut layer_start = Vec::new();
        for (li, layer) in spec.layers.iter().enumerate() {
            layer_start.push(blocks.len());
            let he = |shape: &[usize], fan_in: usize| {
                let n: usize = shape.iter().product();
                let mut r = rng::keyed_rng(seed, Stream::Init, &[li as u64]);
                let std = (2.0 / fan_in as f64).sqrt();
                let data = rng::standard_normals(&mut r, n).into_iter().map(|v| v * std).collect();
                Tensor::new(shape.to_vec(), data).expect("shape")
            };
            match *layer {
                LayerSpec::Dense { input, output } => {
                    blocks.push(ParamBlock::new(li, BlockRole::Weight, he(&[input, output], input)));
                    blocks.push(ParamBlock::new(li, BlockRole::Bias, Tensor::zeros(&[output])));
                }
                LayerSpec::Conv2d {
                    c_in, c_out, kernel, ..
                } => {
                    let w = he(&[c_out, c_in, kernel, kernel], c_in * kernel * kernel);
                    blocks.push(ParamBlock::new(li, BlockRole::Weight, w));
                    blocks.push(ParamBlock::new(li, BlockRole::Bias, Tensor::zeros(&[c_out])));
                }
                LayerSpec::BatchNorm { features } => {
                    blocks.push(ParamBlock::new(li, BlockRole::BnScale, Tensor::full(&[features], 1.0)));
                    blocks.push(ParamBlock::new(li, BlockRole::BnShift, Tensor::zeros(&[features])));
                    blocks.push(ParamBlock::new(li, BlockRole::RunningMean, Tensor::zeros(&[features])));
                    blocks.push(ParamBlock::new(li, BlockRole::RunningVar, Tensor::full(&[features], 1.0)));
                }
                LayerSpec::Relu | LayerSpec::Sigmoid | LayerSpec::Upsample2 => {}
            }
        }
        Ok(Model {
            spec,
            blocks,
            layer_start,
        })
    }

    /// Rebuilds a model from blocks read back from storage, checking every shape.
    pub fn from_blocks(spec: ModelSpec, blocks: Vec<ParamBlock>) -> Result<Self> {
        let mut model = Model::init(spec, 0)?;
        if blocks.len() != model.blocks.len() {
            return Err(Error::contract(format!(
                "architecture has {} parameter blocks, {} supplied",
                model.blocks.len(),
                blocks.len()
            )));
        }
        for (slot, b) in model.blocks.iter_mut().zip(blocks) {
            if slot.mu.shape() != b.mu.shape()
                || b.rho.shape() != b.mu.shape()
                || b.sq_grad_acc.shape() != b.mu.shape()
                || b.mask.len() != b.mu.len()
            {
                return Err(Error::contract(format!(
                    "block {} has shape {:?}, architecture expects {:?}",
                    slot.name,
                    b.mu.shape(),
                    slot.mu.shape()
                )));
            }
            if !slot.maskable() && b.mask.iter().any(|&m| m) {
                return Err(Error::contract(format!("block {} cannot be Bayesian", slot.name)));
            }
            slot.mu = b.mu;
            slot.rho = b.rho;
            slot.mask = b.mask;
            slot.sq_grad_acc = b.sq_grad_acc;
        }
        Ok(model)
    }

    pub fn maskable_blocks(&self) -> impl Iterator<Item = &ParamBlock> {
        self.blocks.iter().filter(|b| b.maskable())
    }

    pub fn maskable_blocks_mut(&mut self) -> impl Iterator<Item = &mut ParamBlock> {
        self.blocks.iter_mut().filter(|b| b.maskable())
    }

    /// Block index of each maskable block, in ordinal order.
    pub fn maskable_indices(&self) -> Vec<usize> {
        (0..self.blocks.len()).filter(|&i| self.blocks[i].maskable()).collect()
    }

    pub fn n_maskable_params(&self) -> usize {
        self.maskable_blocks().map(|b| b.mu.len()).sum()
    }

    pub fn n_bayes(&self) -> usize {
        self.maskable_blocks().map(ParamBlock::n_bayes).sum()
    }

    /// Installs masks and initializes ρ: `softplus⁻¹(sigma_init)` on Bayesian
    /// entries, `softplus⁻¹(1e-12)` elsewhere.
    pub fn apply_maskset(&mut self, masks: &MaskSet, sigma_init: f64) -> Result<()> {
        if !(sigma_init > 0.0) {
            return Err(Error::contract(format!("sigma_init must be positive, got {sigma_init}")));
        }
        let shapes: Vec<Vec<usize>> = self.maskable_blocks().map(|b| b.mu.shape().to_vec()).collect();
        if masks.shapes != shapes {
            return Err(Error::contract(format!(
                "mask set covers blocks {:?}, model has maskable blocks {:?}",
                masks.shapes, shapes
            )));
        }
        let rho_on = softplus_inverse(sigma_init);
        let rho_off = softplus_inverse(DETERMINISTIC_SIGMA);
        for (block, mask) in self.maskable_blocks_mut().zip(&masks.masks) {
            block.mask = mask.clone();
            for (r, &m) in block.rho.data_mut().iter_mut().zip(mask) {
                *r = if m { rho_on } else { rho_off };
            }
        }
        Ok(())
    }

    /// Runs the network on `x` of shape `[N, ...input_shape]`, recording on `tape`.
    ///
    /// With `track`, μ (and ρ for sampled blocks) become tape leaves. With
    /// `noise`, maskable blocks that have Bayesian entries use the
    /// reparameterized weight `μ + softplus(ρ)·ε`.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        x: Var,
        mode: NormMode,
        noise: Option<&EpsilonSet>,
        track: bool,
    ) -> Result<ForwardPass> {
        let xs = tape.value(x).shape();
        if xs.len() != self.spec.input_shape.len() + 1 || xs[1..] != self.spec.input_shape[..] {
            return Err(Error::dim(format!(
                "input of shape {xs:?} does not match model input [N, {}]",
                self.spec
                    .input_shape
                    .iter()
                    .map(ToString::to_string)
                    .collect::<Vec<_>>()
                    .join(", ")
            )));
        }
        if let Some(eps) = noise {
            let n_mask = self.maskable_blocks().count();
            if eps.blocks.len() != n_mask {
                return Err(Error::contract(format!(
                    "noise for {} blocks, model has {n_mask} maskable blocks",
                    eps.blocks.len()
                )));
            }
        }
        let nb = self.blocks.len();
        let mut mu_vars = vec![None; nb];
        let mut rho_vars = vec![None; nb];
        let mut bn_stats = Vec::new();
        let param = |tape: &mut Tape, idx: usize, mu_vars: &mut Vec<Option<Var>>| {
            let t = self.blocks[idx].mu.clone();
            let v = if track { tape.leaf(t) } else { tape.constant(t) };
            mu_vars[idx] = Some(v);
            v
        };
        let mut maskable_ord = 0usize;
        let mut h = x;
        for (li, layer) in self.spec.layers.iter().enumerate() {
            let start = self.layer_start[li];
            h = match *layer {
                LayerSpec::Dense { .. } | LayerSpec::Conv2d { .. } => {
                    let mu = param(tape, start, &mut mu_vars);
                    let block = &self.blocks[start];
                    let w = match noise {
                        Some(eps) if block.n_bayes() > 0 => {
                            let e = eps.blocks[maskable_ord].as_ref().ok_or_else(|| {
                                Error::contract(format!("missing noise for Bayesian block {}", block.name))
                            })?;
                            if e.shape() != block.mu.shape() {
                                return Err(Error::contract(format!(
                                    "noise shape {:?} for block {} of shape {:?}",
                                    e.shape(),
                                    block.name,
                                    block.mu.shape()
                                )));
                            }
                            let rt = block.rho.clone();
                            let rho = if track { tape.leaf(rt) } else { tape.constant(rt) };
                            rho_vars[start] = Some(rho);
                            let masked: Vec<f64> = e
                                .data()
                                .iter()
                                .zip(&block.mask)
                                .map(|(&v, &m)| if m { v } else { 0.0 })
                                .collect();
                            tape.reparam(mu, rho, masked)?
                        }
                        _ => mu,
                    };
                    maskable_ord += 1;
                    let bias = param(tape, start + 1, &mut mu_vars);
                    let y = match *layer {
                        LayerSpec::Dense { .. } => tape.matmul(h, w)?,
                        LayerSpec::Conv2d { stride, padding, .. } => tape.conv2d(h, w, stride, padding)?,
                        _ => unreachable!(),
                    };
                    tape.add_bias(y, bias)?
                }
                LayerSpec::BatchNorm { .. } => {
                    let gamma = param(tape, start, &mut mu_vars);
                    let beta = param(tape, start + 1, &mut mu_vars);
                    let running = (self.blocks[start + 2].mu.data(), self.blocks[start + 3].mu.data());
                    let (y, stats) = tape.batch_norm(h, gamma, beta, mode, Some(running))?;
                    if let Some(s) = stats {
                        bn_stats.push((li, s));
                    }
                    y
                }
                LayerSpec::Relu => tape.relu(h),
                LayerSpec::Sigmoid => tape.sigmoid(h),
                LayerSpec::Upsample2 => tape.upsample2(h)?,
            };
        }
        Ok(ForwardPass {
            logits: h,
            mu_vars,
            rho_vars,
            bn_stats,
        })
    }

    /// Inference-mode forward using μ only; masks are ignored. Returns logits.
    pub fn forward_deterministic(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let pass = self.forward_on_tape(&mut tape, xv, NormMode::Running, None, false)?;
        Ok(tape.value(pass.logits).clone())
    }

    /// Inference-mode forward with reparameterized Bayesian weights.
    pub fn forward_sampled(&self, x: &Tensor, epsilon: &EpsilonSet) -> Result<Tensor> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let pass = self.forward_on_tape(&mut tape, xv, NormMode::Running, Some(epsilon), false)?;
        Ok(tape.value(pass.logits).clone())
    }

    /// Blends batch statistics into the running averages:
    /// `running ← 0.9·running + 0.1·batch`.
    pub fn update_running_stats(&mut self, stats: &[(usize, BatchStats)]) {
        for (layer, s) in stats {
            let start = self.layer_start[*layer];
            for (r, b) in self.blocks[start + 2].mu.data_mut().iter_mut().zip(&s.mean) {
                *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * b;
            }
            for (r, b) in self.blocks[start + 3].mu.data_mut().iter_mut().zip(&s.var) {
                *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * b;
            }
        }
    }
}
