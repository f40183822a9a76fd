//! Wengert-list reverse-mode autodiff.
//!
//! Nodes are appended in construction order, so the node list is already a
//! topological order and `backward` walks it in reverse. Leaves created with
//! [`Tape::leaf`] keep an accumulated gradient that survives across
//! `backward` calls until [`Tape::zero_grad`].

use super::kernels::{self, ConvGeometry};
use super::Tensor;
use crate::error::{Error, Result};

const BN_EPS: f64 = 1e-5;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Whether batch normalization uses the batch's own statistics or stored running ones.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    Batch,
    Running,
}

/// Per-channel statistics of one batch-norm forward in [`NormMode::Batch`].
/// `var` is the unbiased estimate, used for running averages.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Constant,
    MatMul(Var, Var),
    Conv2d {
        input: Var,
        kernel: Var,
        geom: ConvGeometry,
        batch: usize,
        c_out: usize,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Softplus(Var),
    AddBias(Var, Var),
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        mode: NormMode,
        x_hat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Upsample2(Var),
    Sum(Var),
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        weights: Vec<f64>,
        probs: Vec<f64>,
        total_weight: f64,
    },
    SigmoidBce {
        logits: Var,
        targets: Vec<f64>,
        weights: Vec<f64>,
        total_weight: f64,
    },
    Reparam {
        mu: Var,
        rho: Var,
        noise: Vec<f64>,
    },
    KlGaussian {
        mu: Var,
        rho: Var,
        mask: Vec<bool>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
    grad: Option<Vec<f64>>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn channel_layout(shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(Error::dim(format!(
            "expected [batch, channels, ...], got {shape:?}"
        )));
    }
    let inner: usize = shape[2..].iter().product();
    Ok((shape[0], shape[1], inner))
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn tracks(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// A tracked leaf: receives an accumulated gradient on `backward`.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// An untracked input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim(format!("matmul of {sa:?} and {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        kernels::matmul_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let needs = self.tracks(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), needs))
    }

    /// Cross-correlation of `[c_in,H,W]` or `[N,c_in,H,W]` input with a `[c_out,c_in,kh,kw]` kernel.
    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        let si = self.value(input).shape().to_vec();
        let sk = self.value(kernel).shape().to_vec();
        let (batch, c_in, h, w, batched) = match si.as_slice() {
            [c, h, w] => (1, *c, *h, *w, false),
            [n, c, h, w] => (*n, *c, *h, *w, true),
            _ => return Err(Error::dim(format!("conv2d input must be rank 3 or 4, got {si:?}"))),
        };
        let [c_out, kc, kh, kw] = sk[..] else {
            return Err(Error::dim(format!("conv2d kernel must be rank 4, got {sk:?}")));
        };
        if kc != c_in {
            return Err(Error::dim(format!(
                "conv2d input {si:?} has {c_in} channels, kernel {sk:?} expects {kc}"
            )));
        }
        if stride == 0 {
            return Err(Error::contract("conv2d stride must be >= 1"));
        }
        if kh > h + 2 * padding || kw > w + 2 * padding {
            return Err(Error::dim(format!(
                "kernel {sk:?} larger than padded input {si:?} (padding {padding})"
            )));
        }
        let geom = ConvGeometry {
            c_in,
            h,
            w,
            kh,
            kw,
            stride,
            pad: padding,
            out_h: kernels::conv2d_output_size(h, kh, stride, padding),
            out_w: kernels::conv2d_output_size(w, kw, stride, padding),
        };
        let (pl, ol) = (geom.patch_len(), geom.out_len());
        let mut cols = vec![0.0; pl * ol];
        let mut out = vec![0.0; batch * c_out * ol];
        let x = self.value(input).data();
        let k = self.value(kernel).data();
        for b in 0..batch {
            kernels::im2col(&x[b * c_in * h * w..(b + 1) * c_in * h * w], &geom, &mut cols);
            kernels::matmul_acc(k, &cols, &mut out[b * c_out * ol..(b + 1) * c_out * ol], c_out, pl, ol);
        }
        let shape = if batched {
            vec![batch, c_out, geom.out_h, geom.out_w]
        } else {
            vec![c_out, geom.out_h, geom.out_w]
        };
        let needs = self.tracks(&[input, kernel]);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Conv2d {
                input,
                kernel,
                geom,
                batch,
                c_out,
            },
            needs,
        ))
    }

    fn binary(&mut self, a: Var, b: Var, f: fn(f64, f64) -> f64, make: fn(Var, Var) -> Op) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let data: Vec<f64> = if ta.shape() == tb.shape() {
            ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect()
        } else if tb.len() == 1 {
            let y = tb.data()[0];
            ta.data().iter().map(|&x| f(x, y)).collect()
        } else if ta.len() == 1 {
            let x = ta.data()[0];
            tb.data().iter().map(|&y| f(x, y)).collect()
        } else {
            return Err(Error::dim(format!(
                "elementwise op on incompatible shapes {:?} and {:?}",
                ta.shape(),
                tb.shape()
            )));
        };
        let shape = if ta.len() == 1 && tb.len() != 1 {
            tb.shape().to_vec()
        } else {
            ta.shape().to_vec()
        };
        let needs = self.tracks(&[a, b]);
        Ok(self.push(Tensor::new(shape, data)?, make(a, b), needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x * y, Op::Mul)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a);
        let value = Tensor::new(t.shape().to_vec(), t.data().iter().map(|x| x * c).collect())
            .expect("same shape");
        let needs = self.tracks(&[a]);
        self.push(value, Op::Scale(a, c), needs)
    }

    fn unary(&mut self, a: Var, f: fn(f64) -> f64, op: Op) -> Var {
        let t = self.value(a);
        let value = Tensor::new(t.shape().to_vec(), t.data().iter().map(|&x| f(x)).collect())
            .expect("same shape");
        let needs = self.tracks(&[a]);
        self.push(value, op, needs)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, kernels::stable_sigmoid, Op::Sigmoid(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, kernels::softplus, Op::Softplus(a))
    }

    /// Adds `bias[c]` along axis 1 of a `[N, C, ...]` tensor.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (n, c, inner) = channel_layout(self.value(x).shape())?;
        if self.value(bias).len() != c {
            return Err(Error::dim(format!(
                "bias of shape {:?} does not match {c} channels of {:?}",
                self.value(bias).shape(),
                self.value(x).shape()
            )));
        }
        let b = self.value(bias).data();
        let mut out = self.value(x).data().to_vec();
        for i in 0..n {
            for (ch, &bv) in b.iter().enumerate() {
                let off = (i * c + ch) * inner;
                out[off..off + inner].iter_mut().for_each(|v| *v += bv);
            }
        }
        let shape = self.value(x).shape().to_vec();
        let needs = self.tracks(&[x, bias]);
        Ok(self.push(Tensor::new(shape, out)?, Op::AddBias(x, bias), needs))
    }

    /// Batch normalization over axis 1 of `[N, C, ...]`.
    ///
    /// In [`NormMode::Running`] the supplied `running` statistics are used
    /// and no statistics are returned.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: NormMode,
        running: Option<(&[f64], &[f64])>,
    ) -> Result<(Var, Option<BatchStats>)> {
        let (n, c, inner) = channel_layout(self.value(x).shape())?;
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return Err(Error::dim(format!(
                "batch norm parameters do not match {c} channels"
            )));
        }
        let xs = self.value(x).data();
        let m = (n * inner) as f64;
        let (mean, var_biased, stats) = match mode {
            NormMode::Batch => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    let mut s = 0.0;
                    for i in 0..n {
                        let off = (i * c + ch) * inner;
                        s += xs[off..off + inner].iter().sum::<f64>();
                    }
                    mean[ch] = s / m;
                    let mut ss = 0.0;
                    for i in 0..n {
                        let off = (i * c + ch) * inner;
                        ss += xs[off..off + inner].iter().map(|v| (v - mean[ch]).powi(2)).sum::<f64>();
                    }
                    var[ch] = ss / m;
                }
                let unbiased = if m > 1.0 {
                    var.iter().map(|v| v * m / (m - 1.0)).collect()
                } else {
                    var.clone()
                };
                let stats = BatchStats {
                    mean: mean.clone(),
                    var: unbiased,
                };
                (mean, var, Some(stats))
            }
            NormMode::Running => {
                let (rm, rv) = running
                    .ok_or_else(|| Error::contract("running statistics required in Running mode"))?;
                if rm.len() != c || rv.len() != c {
                    return Err(Error::dim("running statistics do not match channel count"));
                }
                (rm.to_vec(), rv.to_vec(), None)
            }
        };
        let inv_std: Vec<f64> = var_biased.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut x_hat = vec![0.0; xs.len()];
        let mut out = vec![0.0; xs.len()];
        for i in 0..n {
            for ch in 0..c {
                let off = (i * c + ch) * inner;
                for j in off..off + inner {
                    x_hat[j] = (xs[j] - mean[ch]) * inv_std[ch];
                    out[j] = g[ch] * x_hat[j] + b[ch];
                }
            }
        }
        let shape = self.value(x).shape().to_vec();
        let needs = self.tracks(&[x, gamma, beta]);
        let v = self.push(
            Tensor::new(shape, out)?,
            Op::BatchNorm {
                input: x,
                gamma,
                beta,
                mode,
                x_hat,
                inv_std,
            },
            needs,
        );
        Ok((v, stats))
    }

    /// Nearest-neighbour 2× upsampling of `[N, C, H, W]`.
    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).shape().to_vec();
        let [n, c, h, w] = s[..] else {
            return Err(Error::dim(format!("upsample2 expects rank 4, got {s:?}")));
        };
        let xs = self.value(x).data();
        let (oh, ow) = (2 * h, 2 * w);
        let mut out = vec![0.0; n * c * oh * ow];
        for p in 0..n * c {
            for y in 0..oh {
                for xx in 0..ow {
                    out[(p * oh + y) * ow + xx] = xs[(p * h + y / 2) * w + xx / 2];
                }
            }
        }
        let needs = self.tracks(&[x]);
        Ok(self.push(Tensor::new(vec![n, c, oh, ow], out)?, Op::Upsample2(x), needs))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let needs = self.tracks(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), needs)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1) as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Weighted softmax cross-entropy over `[N, C]` logits:
    /// `Σᵢ w[yᵢ]·(−ln softmax(zᵢ)[yᵢ]) / Σᵢ w[yᵢ]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize], class_weights: &[f64]) -> Result<Var> {
        let s = self.value(logits).shape().to_vec();
        let [n, c] = s[..] else {
            return Err(Error::dim(format!("cross-entropy expects [N, C] logits, got {s:?}")));
        };
        if labels.len() != n {
            return Err(Error::dim(format!("{} labels for {n} rows", labels.len())));
        }
        if class_weights.len() != c {
            return Err(Error::dim(format!("{} class weights for {c} classes", class_weights.len())));
        }
        let z = self.value(logits).data();
        let mut probs = vec![0.0; n * c];
        let mut loss = 0.0;
        let mut total_weight = 0.0;
        let mut weights = Vec::with_capacity(n);
        for i in 0..n {
            let y = labels[i];
            if y >= c {
                return Err(Error::contract(format!("label {y} out of range for {c} classes")));
            }
            let row = &z[i * c..(i + 1) * c];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for j in 0..c {
                probs[i * c + j] = (row[j] - lse).exp();
            }
            let w = class_weights[y];
            loss += w * (lse - row[y]);
            total_weight += w;
            weights.push(w);
        }
        if total_weight <= 0.0 {
            return Err(Error::contract("cross-entropy total weight must be positive"));
        }
        let needs = self.tracks(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss / total_weight),
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                weights,
                probs,
                total_weight,
            },
            needs,
        ))
    }

    /// Weighted binary cross-entropy with logits, one target in `[0, 1]` per
    /// element. `class_weights = [w_negative, w_positive]`, interpolated for
    /// soft targets. Normalized by the total weight.
    pub fn sigmoid_bce(&mut self, logits: Var, targets: &[f64], class_weights: [f64; 2]) -> Result<Var> {
        let z = self.value(logits).data();
        if targets.len() != z.len() {
            return Err(Error::dim(format!(
                "{} targets for logits of shape {:?}",
                targets.len(),
                self.value(logits).shape()
            )));
        }
        let mut loss = 0.0;
        let mut total_weight = 0.0;
        let mut weights = Vec::with_capacity(z.len());
        for (&zi, &t) in z.iter().zip(targets) {
            let w = class_weights[0] * (1.0 - t) + class_weights[1] * t;
            loss += w * (kernels::softplus(zi) - t * zi);
            total_weight += w;
            weights.push(w);
        }
        if total_weight <= 0.0 {
            return Err(Error::contract("binary cross-entropy total weight must be positive"));
        }
        let needs = self.tracks(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss / total_weight),
            Op::SigmoidBce {
                logits,
                targets: targets.to_vec(),
                weights,
                total_weight,
            },
            needs,
        ))
    }

    /// Reparameterized weight `μ + softplus(ρ)·noise`. Entries where `noise`
    /// is zero (deterministic entries) pass `μ` through unchanged and give `ρ`
    /// a zero gradient.
    pub fn reparam(&mut self, mu: Var, rho: Var, noise: Vec<f64>) -> Result<Var> {
        let (m, r) = (self.value(mu), self.value(rho));
        if m.shape() != r.shape() || noise.len() != m.len() {
            return Err(Error::dim(format!(
                "reparam shapes differ: mu {:?}, rho {:?}, noise len {}",
                m.shape(),
                r.shape(),
                noise.len()
            )));
        }
        let data = m
            .data()
            .iter()
            .zip(r.data())
            .zip(&noise)
            .map(|((&mu, &rho), &e)| if e == 0.0 { mu } else { mu + kernels::softplus(rho) * e })
            .collect();
        let shape = m.shape().to_vec();
        let needs = self.tracks(&[mu, rho]);
        Ok(self.push(Tensor::new(shape, data)?, Op::Reparam { mu, rho, noise }, needs))
    }

    /// Closed-form `KL(N(μ, softplus(ρ)²) ‖ N(0, 1))` summed over masked entries.
    pub fn kl_gaussian(&mut self, mu: Var, rho: Var, mask: &[bool]) -> Result<Var> {
        let (m, r) = (self.value(mu), self.value(rho));
        if m.shape() != r.shape() || mask.len() != m.len() {
            return Err(Error::dim(format!(
                "kl shapes differ: mu {:?}, rho {:?}, mask len {}",
                m.shape(),
                r.shape(),
                mask.len()
            )));
        }
        let value = crate::variational::kl_sum(m.data(), r.data(), mask);
        let needs = self.tracks(&[mu, rho]);
        Ok(self.push(
            Tensor::scalar(value),
            Op::KlGaussian {
                mu,
                rho,
                mask: mask.to_vec(),
            },
            needs,
        ))
    }

    /// Back-propagates from a scalar node, accumulating into every tracked leaf.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        let mut leaf_grads = Vec::new();
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.propagate(i, g, &mut grads, &mut leaf_grads);
        }
        for (i, g) in leaf_grads {
            let slot = &mut self.nodes[i].grad;
            match slot {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                None => *slot = Some(g),
            }
        }
        Ok(())
    }

    fn send(&self, grads: &mut [Option<Vec<f64>>], v: Var, contribution: Vec<f64>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.iter_mut().zip(&contribution).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(contribution),
        }
    }

    /// Gradient for an operand that may have been broadcast from a single element.
    fn reduce_to(&self, v: Var, g: Vec<f64>) -> Vec<f64> {
        if self.value(v).len() == 1 && g.len() != 1 {
            vec![g.iter().sum()]
        } else {
            g
        }
    }

    fn propagate(
        &self,
        i: usize,
        g: Vec<f64>,
        grads: &mut [Option<Vec<f64>>],
        leaf_grads: &mut Vec<(usize, Vec<f64>)>,
    ) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => leaf_grads.push((i, g)),
            Op::Constant => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.value(*a).shape(), self.value(*b).shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.nodes[a.0].needs_grad {
                    let mut da = vec![0.0; m * k];
                    kernels::matmul_a_bt_acc(&g, self.value(*b).data(), &mut da, m, k, n);
                    self.send(grads, *a, da);
                }
                if self.nodes[b.0].needs_grad {
                    let mut db = vec![0.0; k * n];
                    kernels::matmul_at_b_acc(self.value(*a).data(), &g, &mut db, m, k, n);
                    self.send(grads, *b, db);
                }
            }
            Op::Conv2d {
                input,
                kernel,
                geom,
                batch,
                c_out,
            } => {
                let (pl, ol) = (geom.patch_len(), geom.out_len());
                let img_len = geom.c_in * geom.h * geom.w;
                let x = self.value(*input).data();
                let k = self.value(*kernel).data();
                let want_k = self.nodes[kernel.0].needs_grad;
                let want_x = self.nodes[input.0].needs_grad;
                let mut dk = vec![0.0; if want_k { c_out * pl } else { 0 }];
                let mut dx = vec![0.0; if want_x { x.len() } else { 0 }];
                let mut cols = vec![0.0; pl * ol];
                for b in 0..*batch {
                    let gb = &g[b * c_out * ol..(b + 1) * c_out * ol];
                    if want_k {
                        kernels::im2col(&x[b * img_len..(b + 1) * img_len], geom, &mut cols);
                        kernels::matmul_a_bt_acc(gb, &cols, &mut dk, *c_out, pl, ol);
                    }
                    if want_x {
                        cols.iter_mut().for_each(|v| *v = 0.0);
                        kernels::matmul_at_b_acc(k, gb, &mut cols, *c_out, pl, ol);
                        kernels::col2im_acc(&cols, geom, &mut dx[b * img_len..(b + 1) * img_len]);
                    }
                }
                if want_k {
                    self.send(grads, *kernel, dk);
                }
                if want_x {
                    self.send(grads, *input, dx);
                }
            }
            Op::Add(a, b) => {
                self.send(grads, *a, self.reduce_to(*a, g.clone()));
                self.send(grads, *b, self.reduce_to(*b, g));
            }
            Op::Sub(a, b) => {
                self.send(grads, *a, self.reduce_to(*a, g.clone()));
                let neg = g.iter().map(|v| -v).collect();
                self.send(grads, *b, self.reduce_to(*b, neg));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let pick = |t: &Tensor, j: usize| if t.len() == 1 { t.data()[0] } else { t.data()[j] };
                let da = g.iter().enumerate().map(|(j, gj)| gj * pick(tb, j)).collect();
                let db = g.iter().enumerate().map(|(j, gj)| gj * pick(ta, j)).collect();
                self.send(grads, *a, self.reduce_to(*a, da));
                self.send(grads, *b, self.reduce_to(*b, db));
            }
            Op::Scale(a, c) => {
                self.send(grads, *a, g.iter().map(|v| v * c).collect());
            }
            Op::Relu(a) => {
                let x = self.value(*a).data();
                let d = g.iter().zip(x).map(|(gj, &xj)| if xj > 0.0 { *gj } else { 0.0 }).collect();
                self.send(grads, *a, d);
            }
            Op::Sigmoid(a) => {
                let y = node.value.data();
                let d = g.iter().zip(y).map(|(gj, yj)| gj * yj * (1.0 - yj)).collect();
                self.send(grads, *a, d);
            }
            Op::Softplus(a) => {
                let x = self.value(*a).data();
                let d = g
                    .iter()
                    .zip(x)
                    .map(|(gj, &xj)| gj * kernels::stable_sigmoid(xj))
                    .collect();
                self.send(grads, *a, d);
            }
            Op::AddBias(x, bias) => {
                let (n, c, inner) = channel_layout(self.value(*x).shape()).expect("checked in forward");
                let mut db = vec![0.0; c];
                for s in 0..n {
                    for (ch, dbc) in db.iter_mut().enumerate() {
                        let off = (s * c + ch) * inner;
                        *dbc += g[off..off + inner].iter().sum::<f64>();
                    }
                }
                self.send(grads, *bias, db);
                self.send(grads, *x, g);
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                mode,
                x_hat,
                inv_std,
            } => {
                let (n, c, inner) = channel_layout(self.value(*input).shape()).expect("checked in forward");
                let gam = self.value(*gamma).data();
                let m = (n * inner) as f64;
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for s in 0..n {
                    for ch in 0..c {
                        let off = (s * c + ch) * inner;
                        for j in off..off + inner {
                            dgamma[ch] += g[j] * x_hat[j];
                            dbeta[ch] += g[j];
                        }
                    }
                }
                if self.nodes[input.0].needs_grad {
                    let mut dx = vec![0.0; g.len()];
                    for s in 0..n {
                        for ch in 0..c {
                            let off = (s * c + ch) * inner;
                            let k = gam[ch] * inv_std[ch];
                            for j in off..off + inner {
                                dx[j] = match mode {
                                    NormMode::Batch => {
                                        k / m * (m * g[j] - dbeta[ch] - x_hat[j] * dgamma[ch])
                                    }
                                    NormMode::Running => k * g[j],
                                };
                            }
                        }
                    }
                    self.send(grads, *input, dx);
                }
                self.send(grads, *gamma, dgamma);
                self.send(grads, *beta, dbeta);
            }
            Op::Upsample2(x) => {
                let s = self.value(*x).shape();
                let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
                let (oh, ow) = (2 * h, 2 * w);
                let mut dx = vec![0.0; n * c * h * w];
                for p in 0..n * c {
                    for y in 0..oh {
                        for xx in 0..ow {
                            dx[(p * h + y / 2) * w + xx / 2] += g[(p * oh + y) * ow + xx];
                        }
                    }
                }
                self.send(grads, *x, dx);
            }
            Op::Sum(x) => {
                let n = self.value(*x).len();
                self.send(grads, *x, vec![g[0]; n]);
            }
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                weights,
                probs,
                total_weight,
            } => {
                let c = self.value(*logits).shape()[1];
                let mut d = probs.clone();
                for (r, (&y, &w)) in labels.iter().zip(weights).enumerate() {
                    d[r * c + y] -= 1.0;
                    let k = g[0] * w / total_weight;
                    d[r * c..(r + 1) * c].iter_mut().for_each(|v| *v *= k);
                }
                self.send(grads, *logits, d);
            }
            Op::SigmoidBce {
                logits,
                targets,
                weights,
                total_weight,
            } => {
                let z = self.value(*logits).data();
                let d = z
                    .iter()
                    .zip(targets)
                    .zip(weights)
                    .map(|((&zi, &t), &w)| g[0] * w * (kernels::stable_sigmoid(zi) - t) / total_weight)
                    .collect();
                self.send(grads, *logits, d);
            }
            Op::Reparam { mu, rho, noise } => {
                if self.nodes[rho.0].needs_grad {
                    let r = self.value(*rho).data();
                    let d = g
                        .iter()
                        .zip(r)
                        .zip(noise)
                        .map(|((gj, &rj), &e)| if e == 0.0 { 0.0 } else { gj * e * kernels::stable_sigmoid(rj) })
                        .collect();
                    self.send(grads, *rho, d);
                }
                self.send(grads, *mu, g);
            }
            Op::KlGaussian { mu, rho, mask } => {
                let (m, r) = (self.value(*mu).data(), self.value(*rho).data());
                let mut dmu = vec![0.0; m.len()];
                let mut drho = vec![0.0; m.len()];
                for j in 0..m.len() {
                    if mask[j] {
                        let sigma = kernels::softplus(r[j]);
                        dmu[j] = g[0] * m[j];
                        drho[j] = g[0] * (sigma - 1.0 / sigma) * kernels::stable_sigmoid(r[j]);
                    }
                }
                self.send(grads, *mu, dmu);
                self.send(grads, *rho, drho);
            }
        }
    }
}
