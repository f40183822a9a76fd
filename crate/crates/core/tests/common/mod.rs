//! Shared helpers for the integration and acceptance tests: a central
//! finite-difference gradient checker and brute-force metric oracles.
#![allow(dead_code)]

use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sparsebayes::layers::{EpsilonSet, Head, LayerSpec, Model, ModelSpec};
use sparsebayes::data::BatchTargets;
use sparsebayes::pipeline::objective_gradients;
use sparsebayes::rng::Stream;
use sparsebayes::saliency::MaskSet;
use sparsebayes::tensor::{NormMode, Tape, Tensor, Var};
use sparsebayes::Result;

pub const FD_STEP: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-4;
/// Denominator floor of the relative error, so gradients that are zero up to
/// round-off do not blow the ratio up.
pub const GRAD_FLOOR: f64 = 1e-6;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(r: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| r.random_range(lo..hi)).collect()
}

pub fn tensor(r: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), uniform(r, n, lo, hi)).unwrap()
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_FLOOR)
}

/// Worst relative error of one gradient check.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub name: String,
    pub max_rel: f64,
    pub checked: usize,
}

impl GradCheck {
    pub fn ok(&self) -> bool {
        self.max_rel < GRAD_TOL && self.checked > 0
    }
}

type Build = dyn Fn(&mut Tape, &[Var]) -> Result<Var>;

/// Projects the op output onto fixed random weights so every output element
/// contributes to a scalar loss.
fn op_loss(inputs: &[Tensor], build: &Build, proj: &mut Option<Tensor>, seed: u64, track: bool) -> (f64, Vec<Vec<f64>>) {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| if track { tape.leaf(t.clone()) } else { tape.constant(t.clone()) })
        .collect();
    let out = build(&mut tape, &vars).unwrap();
    let shape = tape.value(out).shape().to_vec();
    let w = proj.get_or_insert_with(|| tensor(&mut rng(seed ^ 0x5eed), &shape, -1.0, 1.0)).clone();
    let wv = tape.constant(w);
    let prod = tape.mul(out, wv).unwrap();
    let loss = tape.sum(prod);
    let value = tape.value(loss).item().unwrap();
    if !track {
        return (value, vec![]);
    }
    tape.backward(loss).unwrap();
    let grads = vars
        .iter()
        .map(|&v| tape.grad(v).map_or_else(|| vec![0.0; tape.value(v).len()], <[f64]>::to_vec))
        .collect();
    (value, grads)
}

/// Central differences of a projected op output against the tape's gradients.
pub fn check_op(name: &str, inputs: Vec<Tensor>, build: &Build, seed: u64) -> GradCheck {
    let mut proj = None;
    let (_, grads) = op_loss(&inputs, build, &mut proj, seed, true);
    let mut max_rel: f64 = 0.0;
    let mut checked = 0;
    for (k, t) in inputs.iter().enumerate() {
        for j in 0..t.len() {
            let mut plus = inputs.clone();
            plus[k].data_mut()[j] += FD_STEP;
            let mut minus = inputs.clone();
            minus[k].data_mut()[j] -= FD_STEP;
            let fp = op_loss(&plus, build, &mut proj, seed, false).0;
            let fm = op_loss(&minus, build, &mut proj, seed, false).0;
            let numeric = (fp - fm) / (2.0 * FD_STEP);
            max_rel = max_rel.max(rel_err(grads[k][j], numeric));
            checked += 1;
        }
    }
    GradCheck {
        name: name.into(),
        max_rel,
        checked,
    }
}

/// Values in `[lo, hi]` kept at least `gap` away from zero, for ops with a kink there.
fn away_from_zero(r: &mut ChaCha8Rng, shape: &[usize], gap: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v: f64 = r.random_range(gap..2.0);
            if r.random_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

pub const OP_NAMES: [&str; 19] = [
    "matmul",
    "conv2d",
    "add",
    "sub",
    "mul",
    "scale",
    "relu",
    "sigmoid",
    "softplus",
    "add_bias",
    "batch_norm_batch",
    "batch_norm_running",
    "upsample2",
    "sum",
    "mean",
    "softmax_cross_entropy",
    "sigmoid_bce",
    "reparam",
    "kl_gaussian",
];

/// One randomized gradient check; `case` cycles through [`OP_NAMES`].
pub fn op_case(case: u64) -> GradCheck {
    let mut r = rng(1000 + case);
    let name = OP_NAMES[case as usize % OP_NAMES.len()];
    let dim = |r: &mut ChaCha8Rng| r.random_range(1..5usize);
    let seed = case;
    let d: [usize; 4] = std::array::from_fn(|_| dim(&mut r));
    match name {
        "matmul" => {
            let (m, k, n) = (dim(&mut r), dim(&mut r), dim(&mut r));
            let a = tensor(&mut r, &[m, k], -1.0, 1.0);
            let b = tensor(&mut r, &[k, n], -1.0, 1.0);
            check_op(name, vec![a, b], &|t, v| t.matmul(v[0], v[1]), seed)
        }
        "conv2d" => {
            let (n, ci, co) = (r.random_range(1..3), dim(&mut r).min(3), dim(&mut r).min(3));
            let k = r.random_range(1..4usize);
            let stride = r.random_range(1..3usize);
            let pad = r.random_range(0..2usize);
            let hw = r.random_range(k.max(2)..6usize);
            let x = tensor(&mut r, &[n, ci, hw, hw], -1.0, 1.0);
            let w = tensor(&mut r, &[co, ci, k, k], -1.0, 1.0);
            check_op(name, vec![x, w], &move |t, v| t.conv2d(v[0], v[1], stride, pad), seed)
        }
        "add" | "sub" | "mul" => {
            let shape = [dim(&mut r), dim(&mut r)];
            let a = tensor(&mut r, &shape, -2.0, 2.0);
            let b = tensor(&mut r, &shape, -2.0, 2.0);
            let build: &Build = match name {
                "add" => &|t, v| t.add(v[0], v[1]),
                "sub" => &|t, v| t.sub(v[0], v[1]),
                _ => &|t, v| t.mul(v[0], v[1]),
            };
            check_op(name, vec![a, b], build, seed)
        }
        "scale" => {
            let c: f64 = r.random_range(-3.0..3.0);
            let a = tensor(&mut r, &[d[0], 3], -2.0, 2.0);
            check_op(name, vec![a], &move |t, v| Ok(t.scale(v[0], c)), seed)
        }
        "relu" => {
            let a = away_from_zero(&mut r, &[d[0], 4], 1e-3);
            check_op(name, vec![a], &|t, v| Ok(t.relu(v[0])), seed)
        }
        "sigmoid" => {
            let a = tensor(&mut r, &[d[0], 4], -6.0, 6.0);
            check_op(name, vec![a], &|t, v| Ok(t.sigmoid(v[0])), seed)
        }
        "softplus" => {
            let a = tensor(&mut r, &[d[0], 4], -6.0, 6.0);
            check_op(name, vec![a], &|t, v| Ok(t.softplus(v[0])), seed)
        }
        "add_bias" => {
            let (n, c) = (dim(&mut r), dim(&mut r));
            let x = if r.random_bool(0.5) {
                tensor(&mut r, &[n, c], -1.0, 1.0)
            } else {
                tensor(&mut r, &[n, c, 2, 3], -1.0, 1.0)
            };
            let b = tensor(&mut r, &[c], -1.0, 1.0);
            check_op(name, vec![x, b], &|t, v| t.add_bias(v[0], v[1]), seed)
        }
        "batch_norm_batch" | "batch_norm_running" => {
            let c = dim(&mut r);
            let x = if r.random_bool(0.5) {
                tensor(&mut r, &[d[3] + 2, c], -2.0, 2.0)
            } else {
                tensor(&mut r, &[2, c, 2, 2], -2.0, 2.0)
            };
            let g = tensor(&mut r, &[c], 0.5, 1.5);
            let b = tensor(&mut r, &[c], -0.5, 0.5);
            if name == "batch_norm_batch" {
                check_op(name, vec![x, g, b], &|t, v| Ok(t.batch_norm(v[0], v[1], v[2], NormMode::Batch, None)?.0), seed)
            } else {
                let rm = uniform(&mut r, c, -0.5, 0.5);
                let rv = uniform(&mut r, c, 0.5, 2.0);
                check_op(
                    name,
                    vec![x, g, b],
                    &move |t, v| Ok(t.batch_norm(v[0], v[1], v[2], NormMode::Running, Some((&rm, &rv)))?.0),
                    seed,
                )
            }
        }
        "upsample2" => {
            let x = tensor(&mut r, &[d[0], 2, d[1], d[2]], -1.0, 1.0);
            check_op(name, vec![x], &|t, v| t.upsample2(v[0]), seed)
        }
        "sum" => {
            let x = tensor(&mut r, &[d[0], d[1]], -1.0, 1.0);
            check_op(name, vec![x], &|t, v| Ok(t.sum(v[0])), seed)
        }
        "mean" => {
            let x = tensor(&mut r, &[d[0], d[1]], -1.0, 1.0);
            check_op(name, vec![x], &|t, v| Ok(t.mean(v[0])), seed)
        }
        "softmax_cross_entropy" => {
            let (n, c) = (dim(&mut r), r.random_range(2..5usize));
            let z = tensor(&mut r, &[n, c], -3.0, 3.0);
            let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..c)).collect();
            let weights = uniform(&mut r, c, 0.2, 3.0);
            check_op(name, vec![z], &move |t, v| t.softmax_cross_entropy(v[0], &labels, &weights), seed)
        }
        "sigmoid_bce" => {
            let n = dim(&mut r) * 3;
            let z = tensor(&mut r, &[n], -4.0, 4.0);
            let targets: Vec<f64> = (0..n).map(|_| if r.random_bool(0.5) { 1.0 } else { 0.0 }).collect();
            let w = [r.random_range(0.2..3.0), r.random_range(0.2..3.0)];
            check_op(name, vec![z], &move |t, v| t.sigmoid_bce(v[0], &targets, w), seed)
        }
        "reparam" => {
            let shape = [dim(&mut r), dim(&mut r)];
            let mu = tensor(&mut r, &shape, -1.0, 1.0);
            let rho = tensor(&mut r, &shape, -4.0, 1.0);
            let n = mu.len();
            let noise: Vec<f64> = (0..n)
                .map(|_| if r.random_bool(0.7) { r.random_range(-2.0..2.0) } else { 0.0 })
                .collect();
            check_op(name, vec![mu, rho], &move |t, v| t.reparam(v[0], v[1], noise.clone()), seed)
        }
        "kl_gaussian" => {
            let shape = [dim(&mut r), dim(&mut r)];
            let mu = tensor(&mut r, &shape, -1.0, 1.0);
            let rho = tensor(&mut r, &shape, -4.0, 1.0);
            let mask: Vec<bool> = (0..mu.len()).map(|_| r.random_bool(0.6)).collect();
            check_op(name, vec![mu, rho], &move |t, v| t.kl_gaussian(v[0], v[1], &mask), seed)
        }
        _ => unreachable!(),
    }
}

/// A small model with random Bayesian masks, σ and batch-norm parameters.
/// Even cases are a multiclass MLP, odd cases a strided conv segmenter.
pub fn random_bayes_model(case: u64) -> (Model, Tensor, BatchTargets, Vec<f64>) {
    let mut r = rng(5000 + case);
    let (spec, n) = if case % 2 == 0 {
        (
            ModelSpec {
                layers: vec![
                    LayerSpec::Dense { input: 3, output: 5 },
                    LayerSpec::BatchNorm { features: 5 },
                    LayerSpec::Relu,
                    LayerSpec::Dense { input: 5, output: 3 },
                ],
                input_shape: vec![3],
                head: Head::Multiclass { classes: 3 },
            },
            6,
        )
    } else {
        let conv = |c_in, c_out, stride| LayerSpec::Conv2d {
            c_in,
            c_out,
            kernel: 3,
            stride,
            padding: 1,
        };
        (
            ModelSpec {
                layers: vec![
                    conv(1, 2, 2),
                    LayerSpec::BatchNorm { features: 2 },
                    LayerSpec::Relu,
                    LayerSpec::Upsample2,
                    conv(2, 1, 1),
                ],
                input_shape: vec![1, 4, 4],
                head: Head::Segmentation,
            },
            3,
        )
    };
    let mut model = Model::init(spec.clone(), case).unwrap();
    let shapes: Vec<Vec<usize>> = model.maskable_blocks().map(|b| b.mu.shape().to_vec()).collect();
    let masks: Vec<Vec<bool>> = model
        .maskable_blocks()
        .map(|b| (0..b.mu.len()).map(|_| r.random_bool(0.5)).collect())
        .collect();
    model.apply_maskset(&MaskSet::from_masks(shapes, masks, 0.5).unwrap(), 0.1).unwrap();
    for b in model.blocks.iter_mut() {
        if b.maskable() {
            let mask = b.mask.clone();
            for (rho, m) in b.rho.data_mut().iter_mut().zip(mask) {
                if m {
                    *rho = r.random_range(-3.0..0.5);
                }
            }
        } else if b.trainable() {
            for v in b.mu.data_mut() {
                *v += r.random_range(-0.3..0.3);
            }
        }
    }
    let mut shape = vec![n];
    shape.extend(&spec.input_shape);
    let x = tensor(&mut r, &shape, -1.0, 1.0);
    let (targets, weights) = match spec.head {
        Head::Multiclass { classes } => (
            BatchTargets::Classes((0..n).map(|_| r.random_range(0..classes)).collect()),
            uniform(&mut r, classes, 0.5, 2.0),
        ),
        _ => (
            BatchTargets::Binary((0..n * 16).map(|_| if r.random_bool(0.4) { 1.0 } else { 0.0 }).collect()),
            uniform(&mut r, 2, 0.5, 2.0),
        ),
    };
    (model, x, targets, weights)
}

/// Central differences of the full objective (mean NLL over fixed noise
/// draws plus β·KL) against [`objective_gradients`], over every trainable μ
/// entry and every Bayesian ρ entry.
pub fn elbo_case(case: u64) -> GradCheck {
    let (model, x, targets, weights) = random_bayes_model(case);
    let samples = 1 + (case % 3) as usize;
    let noise: Vec<EpsilonSet> = (0..samples)
        .map(|s| EpsilonSet::draw(&model, case, Stream::TrainNoise, &[s as u64]))
        .collect();
    let beta = rng(case).random_range(0.01..1.0);
    let g = objective_gradients(&model, &x, &targets, &weights, &noise, beta).unwrap();
    let loss_at = |m: &Model| objective_gradients(m, &x, &targets, &weights, &noise, beta).unwrap().loss;
    let mut max_rel: f64 = 0.0;
    let mut checked = 0;
    for (i, b) in model.blocks.iter().enumerate() {
        if !b.trainable() {
            continue;
        }
        for j in 0..b.mu.len() {
            let mut p = model.clone();
            p.blocks[i].mu.data_mut()[j] += FD_STEP;
            let mut m = model.clone();
            m.blocks[i].mu.data_mut()[j] -= FD_STEP;
            let numeric = (loss_at(&p) - loss_at(&m)) / (2.0 * FD_STEP);
            let analytic = g.grads_mu[i].as_ref().map_or(0.0, |v| v[j]);
            max_rel = max_rel.max(rel_err(analytic, numeric));
            checked += 1;
        }
        for j in (0..b.mu.len()).filter(|&j| b.mask[j]) {
            let mut p = model.clone();
            p.blocks[i].rho.data_mut()[j] += FD_STEP;
            let mut m = model.clone();
            m.blocks[i].rho.data_mut()[j] -= FD_STEP;
            let numeric = (loss_at(&p) - loss_at(&m)) / (2.0 * FD_STEP);
            let analytic = g.grads_rho[i].as_ref().map_or(0.0, |v| v[j]);
            max_rel = max_rel.max(rel_err(analytic, numeric));
            checked += 1;
        }
    }
    GradCheck {
        name: format!("elbo[{}]", if case % 2 == 0 { "mlp" } else { "conv" }),
        max_rel,
        checked,
    }
}

// ---- metric oracles ----

pub fn brier_oracle(probs: &[f64], label: usize) -> f64 {
    let mut s = 0.0;
    for (c, p) in probs.iter().enumerate() {
        let target = (c == label) as u8 as f64;
        s += (p - target) * (p - target);
    }
    s / probs.len() as f64
}

/// Entropy through base-2 logs, converted to nats.
pub fn entropy_oracle(probs: &[f64]) -> f64 {
    let mut bits = 0.0;
    for &p in probs {
        if p != 0.0 {
            bits -= p * p.log2();
        }
    }
    bits * std::f64::consts::LN_2
}

/// Scans each bin interval separately instead of indexing into bins.
pub fn ece_oracle(conf: &[f64], correct: &[bool], n_bins: usize) -> f64 {
    let n = conf.len() as f64;
    let mut total = 0.0;
    for b in 0..n_bins {
        let lo = b as f64 / n_bins as f64;
        let hi = (b + 1) as f64 / n_bins as f64;
        let members: Vec<usize> = (0..conf.len())
            .filter(|&i| (conf[i] > lo && conf[i] <= hi) || (b == 0 && conf[i] == 0.0))
            .collect();
        if members.is_empty() {
            continue;
        }
        let k = members.len() as f64;
        let acc = members.iter().filter(|&&i| correct[i]).count() as f64 / k;
        let avg = members.iter().map(|&i| conf[i]).sum::<f64>() / k;
        total += k / n * (acc - avg).abs();
    }
    total
}

fn index_set(mask: &[bool]) -> HashSet<usize> {
    mask.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i).collect()
}

pub fn dice_oracle(a: &[bool], b: &[bool]) -> f64 {
    let (sa, sb) = (index_set(a), index_set(b));
    if sa.is_empty() && sb.is_empty() {
        return 1.0;
    }
    2.0 * sa.intersection(&sb).count() as f64 / (sa.len() + sb.len()) as f64
}

pub fn iou_oracle(a: &[bool], b: &[bool]) -> f64 {
    let (sa, sb) = (index_set(a), index_set(b));
    let union = sa.union(&sb).count();
    if union == 0 {
        return 1.0;
    }
    sa.intersection(&sb).count() as f64 / union as f64
}

/// Fraction of (positive, negative) pairs ranked correctly, ties counting ½.
pub fn auc_oracle(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for i in (0..scores.len()).filter(|&i| labels[i]) {
        for j in (0..scores.len()).filter(|&j| !labels[j]) {
            pairs += 1.0;
            if scores[i] > scores[j] {
                wins += 1.0;
            } else if scores[i] == scores[j] {
                wins += 0.5;
            }
        }
    }
    (pairs > 0.0).then(|| wins / pairs)
}

/// A random probability vector over `c` classes.
pub fn simplex(r: &mut ChaCha8Rng, c: usize) -> Vec<f64> {
    let raw = uniform(r, c, 0.0, 1.0);
    let s: f64 = raw.iter().sum();
    raw.iter().map(|v| v / s).collect()
}
