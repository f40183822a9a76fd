//! The three training steps (deterministic pre-training, saliency selection,
//! masked variational training), the ensemble and fully Bayesian baselines,
//! and sampled prediction.

pub mod checkpoint;

pub use checkpoint::{Checkpoint, StepLabel, CHECKPOINT_MAGIC};

use rayon::prelude::*;

use crate::data::{self, BatchTargets, Dataset};
use crate::error::{Error, Result};
use crate::layers::{EpsilonSet, Head, Model, ModelSpec};
use crate::metrics;
use crate::rng::Stream;
use crate::saliency::{topk_masks, MaskSet, SaliencyMap, TopkScope};
use crate::tensor::{stable_sigmoid, BatchStats, NormMode, Tape, Tensor};
use crate::variational::{beta_at, BetaMode, BetaSchedule};

/// Rows per forward pass at inference; running-statistics batch norm makes
/// chunking exact.
const PREDICT_CHUNK: usize = 256;
const SALIENCY_CHUNK: usize = 64;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub r_bayes: f64,
    pub sigma_init: f64,
    pub beta_mode: BetaMode,
    pub beta_init: f64,
    pub beta_target: f64,
    /// Posterior samples per step and at inference.
    pub samples: usize,
    pub seed: u64,
    /// Loss weights; empty means inverse class frequency of the training split.
    pub class_weights: Vec<f64>,
    /// Only Bayesian entries are updated during variational training.
    pub freeze_deterministic: bool,
    pub saliency_scope: TopkScope,
    pub threads: usize,
}

impl TrainConfig {
    /// Batch size 50 and static β = 0.01 for classification; batch size 10
    /// and β annealed 0.2 → 0.01 for segmentation.
    pub fn default_for(head: Head) -> Self {
        let seg = head == Head::Segmentation;
        TrainConfig {
            epochs: 50,
            lr: 0.01,
            weight_decay: 1e-5,
            batch_size: if seg { 10 } else { 50 },
            r_bayes: 0.05,
            sigma_init: 0.05,
            beta_mode: if seg { BetaMode::LinearAnneal } else { BetaMode::Static },
            beta_init: if seg { 0.2 } else { 0.01 },
            beta_target: 0.01,
            samples: 5,
            seed: 0,
            class_weights: vec![],
            freeze_deterministic: false,
            saliency_scope: TopkScope::PerLayer,
            threads: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, key: &str, msg: &str| if ok { Ok(()) } else { Err(Error::config(key, msg)) };
        check(self.epochs >= 1, "epochs", "must be >= 1")?;
        check(self.lr >= 0.0 && self.lr.is_finite(), "lr", "must be finite and >= 0")?;
        check(self.weight_decay >= 0.0, "weight_decay", "must be >= 0")?;
        check(self.batch_size >= 1, "batch_size", "must be >= 1")?;
        check((0.0..=1.0).contains(&self.r_bayes), "r_bayes", "must be in [0, 1]")?;
        check(self.sigma_init > 0.0, "sigma_init", "must be > 0")?;
        check(self.beta_init >= 0.0, "beta_init", "must be >= 0")?;
        check(self.beta_target >= 0.0, "beta_target", "must be >= 0")?;
        check(self.samples >= 1, "samples", "must be >= 1")?;
        check(self.threads >= 1, "threads", "must be >= 1")?;
        check(
            self.class_weights.iter().all(|&w| w > 0.0 && w.is_finite()),
            "class_weights",
            "weights must be positive",
        )
    }

    /// Reaches `beta_target` on the final epoch.
    pub fn beta_schedule(&self) -> BetaSchedule {
        BetaSchedule {
            mode: self.beta_mode,
            beta_init: self.beta_init,
            beta_target: self.beta_target,
            total_epochs: self.epochs - 1,
        }
    }

    pub fn pairs(&self) -> Vec<(&'static str, String)> {
        let weights = if self.class_weights.is_empty() {
            "auto".to_string()
        } else {
            self.class_weights.iter().map(|w| format!("{w}")).collect::<Vec<_>>().join(",")
        };
        vec![
            ("epochs", self.epochs.to_string()),
            ("lr", format!("{}", self.lr)),
            ("weight_decay", format!("{}", self.weight_decay)),
            ("batch_size", self.batch_size.to_string()),
            ("r_bayes", format!("{}", self.r_bayes)),
            ("sigma_init", format!("{}", self.sigma_init)),
            (
                "beta_mode",
                match self.beta_mode {
                    BetaMode::Static => "static",
                    BetaMode::LinearAnneal => "anneal",
                }
                .into(),
            ),
            ("beta_init", format!("{}", self.beta_init)),
            ("beta_target", format!("{}", self.beta_target)),
            ("samples", self.samples.to_string()),
            ("seed", self.seed.to_string()),
            ("class_weights", weights),
            ("freeze_deterministic", self.freeze_deterministic.to_string()),
            (
                "saliency_scope",
                match self.saliency_scope {
                    TopkScope::PerLayer => "per_layer",
                    TopkScope::Global => "global",
                }
                .into(),
            ),
            ("threads", self.threads.to_string()),
        ]
    }

    /// Sets one field from text. Returns `Ok(false)` for keys this type does not own.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse().map_err(|_| Error::config(key, format!("cannot parse {v:?}")))
        }
        match key {
            "epochs" => self.epochs = num(key, value)?,
            "lr" => self.lr = num(key, value)?,
            "weight_decay" => self.weight_decay = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "r_bayes" => self.r_bayes = num(key, value)?,
            "sigma_init" => self.sigma_init = num(key, value)?,
            "beta_mode" => {
                self.beta_mode = match value {
                    "static" => BetaMode::Static,
                    "anneal" => BetaMode::LinearAnneal,
                    _ => return Err(Error::config(key, "expected static or anneal")),
                }
            }
            "beta" => {
                self.beta_mode = BetaMode::Static;
                self.beta_init = num(key, value)?;
                self.beta_target = self.beta_init;
            }
            "beta_init" => self.beta_init = num(key, value)?,
            "beta_target" => self.beta_target = num(key, value)?,
            "samples" => self.samples = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "class_weights" => {
                self.class_weights = if value == "auto" {
                    vec![]
                } else {
                    value.split(',').map(|w| num(key, w.trim())).collect::<Result<_>>()?
                }
            }
            "freeze_deterministic" => self.freeze_deterministic = num(key, value)?,
            "saliency_scope" => {
                self.saliency_scope = match value {
                    "per_layer" => TopkScope::PerLayer,
                    "global" => TopkScope::Global,
                    _ => return Err(Error::config(key, "expected per_layer or global")),
                }
            }
            "threads" => self.threads = num(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// Copy with `class_weights` filled in from the training split when left on auto.
    pub fn resolved(&self, dataset: &Dataset, head: Head) -> Result<TrainConfig> {
        let mut cfg = self.clone();
        if cfg.class_weights.is_empty() {
            cfg.class_weights = dataset.class_weights();
        }
        let want = match head {
            Head::Multiclass { classes } => classes,
            _ => 2,
        };
        if cfg.class_weights.len() != want {
            return Err(Error::config(
                "class_weights",
                format!("{} weights given, head {head} needs {want}", cfg.class_weights.len()),
            ));
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// One row of a training log.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean over batches of the optimized objective.
    pub loss: f64,
    pub nll: f64,
    pub kl: f64,
    pub beta: f64,
    /// Training accuracy (classification) or Dice (segmentation) of the first
    /// posterior sample, accumulated over the epoch's batches.
    pub metric: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trained {
    pub checkpoint: Checkpoint,
    pub log: Vec<EpochLog>,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Objective {
    Likelihood,
    Variational,
}

struct SamplePass {
    nll: f64,
    grads_mu: Vec<Option<Vec<f64>>>,
    grads_rho: Vec<Option<Vec<f64>>>,
    bn_stats: Vec<(usize, BatchStats)>,
    logits: Tensor,
}

fn loss_on(tape: &mut Tape, logits: crate::tensor::Var, targets: &BatchTargets, weights: &[f64]) -> Result<crate::tensor::Var> {
    match targets {
        BatchTargets::Classes(labels) => tape.softmax_cross_entropy(logits, labels, weights),
        BatchTargets::Binary(t) => tape.sigmoid_bce(logits, t, [weights[0], weights[1]]),
    }
}

fn leaf_grads(tape: &Tape, vars: &[Option<crate::tensor::Var>]) -> Vec<Option<Vec<f64>>> {
    vars.iter()
        .map(|v| v.map(|v| tape.grad(v).map_or_else(|| vec![0.0; tape.value(v).len()], <[f64]>::to_vec)))
        .collect()
}

fn sample_pass(
    model: &Model,
    x: &Tensor,
    targets: &BatchTargets,
    weights: &[f64],
    noise: Option<&EpsilonSet>,
    scale: f64,
) -> Result<SamplePass> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let pass = model.forward_on_tape(&mut tape, xv, NormMode::Batch, noise, true)?;
    let loss = loss_on(&mut tape, pass.logits, targets, weights)?;
    let scaled = tape.scale(loss, scale);
    tape.backward(scaled)?;
    Ok(SamplePass {
        nll: tape.value(loss).item()?,
        grads_mu: leaf_grads(&tape, &pass.mu_vars),
        grads_rho: leaf_grads(&tape, &pass.rho_vars),
        bn_stats: pass.bn_stats,
        logits: tape.value(pass.logits).clone(),
    })
}

/// `β·KL` of every Bayesian block on its own tape. Returns the KL value and
/// the gradients of `β·KL` per block as `(μ, ρ)`.
fn kl_pass(model: &Model, beta: f64) -> Result<(f64, Vec<Option<(Vec<f64>, Vec<f64>)>>)> {
    let mut tape = Tape::new();
    let mut leaves = vec![None; model.blocks.len()];
    let mut total = None;
    for (i, b) in model.blocks.iter().enumerate() {
        if !b.maskable() || b.n_bayes() == 0 {
            continue;
        }
        let mu = tape.leaf(b.mu.clone());
        let rho = tape.leaf(b.rho.clone());
        let kl = tape.kl_gaussian(mu, rho, &b.mask)?;
        total = Some(match total {
            None => kl,
            Some(t) => tape.add(t, kl)?,
        });
        leaves[i] = Some((mu, rho));
    }
    let Some(total) = total else {
        return Ok((0.0, leaves.iter().map(|_| None).collect()));
    };
    let value = tape.value(total).item()?;
    let scaled = tape.scale(total, beta);
    tape.backward(scaled)?;
    let grads = leaves
        .iter()
        .map(|l| {
            l.map(|(mu, rho)| {
                let g = |v| tape.grad(v).map_or_else(|| vec![0.0; tape.value(v).len()], <[f64]>::to_vec);
                (g(mu), g(rho))
            })
        })
        .collect();
    Ok((value, grads))
}

fn add_into(acc: &mut Option<Vec<f64>>, g: &[f64]) {
    match acc {
        Some(a) => a.iter_mut().zip(g).for_each(|(a, g)| *a += g),
        None => *acc = Some(g.to_vec()),
    }
}

fn mean_stats(passes: &[SamplePass]) -> Vec<(usize, BatchStats)> {
    let s = passes.len() as f64;
    let mut out = passes[0].bn_stats.clone();
    for p in &passes[1..] {
        for ((_, acc), (_, st)) in out.iter_mut().zip(&p.bn_stats) {
            acc.mean.iter_mut().zip(&st.mean).for_each(|(a, b)| *a += b);
            acc.var.iter_mut().zip(&st.var).for_each(|(a, b)| *a += b);
        }
    }
    for (_, acc) in out.iter_mut() {
        acc.mean.iter_mut().for_each(|v| *v /= s);
        acc.var.iter_mut().for_each(|v| *v /= s);
    }
    out
}

/// Correct predictions (or summed Dice) and the count it is averaged over.
fn batch_metric(head: Head, logits: &Tensor, targets: &BatchTargets) -> Result<(f64, f64)> {
    Ok(match (head, targets) {
        (Head::Multiclass { classes }, BatchTargets::Classes(labels)) => {
            let hits = labels
                .iter()
                .enumerate()
                .filter(|&(i, &y)| argmax(&logits.data()[i * classes..(i + 1) * classes]) == y)
                .count();
            (hits as f64, labels.len() as f64)
        }
        (Head::Multilabel { .. }, BatchTargets::Binary(t)) => {
            let hits = logits.data().iter().zip(t).filter(|(&z, &y)| (z >= 0.0) == (y >= 0.5)).count();
            (hits as f64, t.len() as f64)
        }
        (Head::Segmentation, BatchTargets::Binary(t)) => {
            let n = logits.shape()[0];
            let px = logits.len() / n;
            let mut sum = 0.0;
            for i in 0..n {
                let pred: Vec<bool> = logits.data()[i * px..(i + 1) * px].iter().map(|&z| z >= 0.0).collect();
                let gt: Vec<bool> = t[i * px..(i + 1) * px].iter().map(|&y| y >= 0.5).collect();
                sum += metrics::dice(&pred, &gt)?;
            }
            (sum, n as f64)
        }
        _ => return Err(Error::contract(format!("head {head} does not fit the dataset's targets"))),
    })
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn thread_pool(threads: usize) -> Result<Option<rayon::ThreadPool>> {
    if threads <= 1 {
        return Ok(None);
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map(Some)
        .map_err(|e| Error::config("threads", e.to_string()))
}

/// Runs `f(0..n)` sequentially or on the pool; results stay in index order.
fn ordered_map<T: Send>(
    pool: Option<&rayon::ThreadPool>,
    n: usize,
    f: impl Fn(usize) -> Result<T> + Sync + Send,
) -> Result<Vec<T>> {
    match pool {
        None => (0..n).map(f).collect(),
        Some(p) => p.install(|| (0..n).into_par_iter().map(f).collect()),
    }
}

/// Value and gradients of one training step's objective.
#[derive(Clone, Debug, PartialEq)]
pub struct ObjectiveGrad {
    /// `nll + β·kl`.
    pub loss: f64,
    /// Mean over posterior samples of the weighted NLL.
    pub nll: f64,
    pub kl: f64,
    /// Gradient per parameter block (`None` for untracked blocks).
    pub grads_mu: Vec<Option<Vec<f64>>>,
    pub grads_rho: Vec<Option<Vec<f64>>>,
    /// Batch-norm statistics averaged over samples.
    pub bn_stats: Vec<(usize, BatchStats)>,
    pub first_logits: Tensor,
}

/// The training objective on one batch with batch-statistics normalization.
///
/// With `noise` empty this is one noiseless forward and the plain NLL.
/// Otherwise it is the mean NLL over one forward per noise set plus
/// `β·KL` of the Bayesian entries. Sample gradients are summed in sample order.
pub fn objective_gradients(
    model: &Model,
    x: &Tensor,
    targets: &BatchTargets,
    class_weights: &[f64],
    noise: &[EpsilonSet],
    beta: f64,
) -> Result<ObjectiveGrad> {
    objective_with(None, model, x, targets, class_weights, noise, beta)
}

fn objective_with(
    pool: Option<&rayon::ThreadPool>,
    model: &Model,
    x: &Tensor,
    targets: &BatchTargets,
    class_weights: &[f64],
    noise: &[EpsilonSet],
    beta: f64,
) -> Result<ObjectiveGrad> {
    let samples = noise.len().max(1);
    let scale = 1.0 / samples as f64;
    let passes = ordered_map(pool, samples, |s| {
        sample_pass(model, x, targets, class_weights, noise.get(s), scale)
    })?;
    let (kl, kl_grads) = if noise.is_empty() {
        (0.0, vec![])
    } else {
        kl_pass(model, beta)?
    };
    let nll = passes.iter().map(|p| p.nll).sum::<f64>() / samples as f64;
    let nb = model.blocks.len();
    let mut grads_mu: Vec<Option<Vec<f64>>> = vec![None; nb];
    let mut grads_rho: Vec<Option<Vec<f64>>> = vec![None; nb];
    for p in &passes {
        for i in 0..nb {
            if let Some(g) = &p.grads_mu[i] {
                add_into(&mut grads_mu[i], g);
            }
            if let Some(g) = &p.grads_rho[i] {
                add_into(&mut grads_rho[i], g);
            }
        }
    }
    for (i, g) in kl_grads.iter().enumerate() {
        if let Some((gm, gr)) = g {
            add_into(&mut grads_mu[i], gm);
            add_into(&mut grads_rho[i], gr);
        }
    }
    Ok(ObjectiveGrad {
        loss: nll + beta * kl,
        nll,
        kl,
        grads_mu,
        grads_rho,
        bn_stats: mean_stats(&passes),
        first_logits: passes[0].logits.clone(),
    })
}

/// The training loop shared by all steps. With [`Objective::Likelihood`], or
/// when the model has no Bayesian entries, one noiseless forward per batch is
/// used and the KL term vanishes, so the variational loop reduces exactly to
/// deterministic training.
fn fit(model: &mut Model, dataset: &Dataset, config: &TrainConfig, objective: Objective) -> Result<Vec<EpochLog>> {
    if dataset.is_empty() {
        return Err(Error::contract("training set is empty"));
    }
    let head = model.spec.head;
    let pool = thread_pool(config.threads)?;
    let variational = objective == Objective::Variational && model.n_bayes() > 0;
    let samples = config.samples;
    let schedule = config.beta_schedule();
    let mut log = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let beta = if objective == Objective::Variational {
            beta_at(&schedule, epoch)?
        } else {
            0.0
        };
        let batches = data::batches(dataset, config.batch_size, config.seed, epoch)?;
        let (mut loss_sum, mut nll_sum, mut kl_sum) = (0.0, 0.0, 0.0);
        let (mut hits, mut count) = (0.0, 0.0);
        for (bi, batch) in batches.iter().enumerate() {
            let x = dataset.batch_inputs(&batch.indices)?;
            let targets = dataset.batch_targets(&batch.indices, batch.rater)?;
            let noise: Vec<EpsilonSet> = if variational {
                (0..samples)
                    .map(|s| EpsilonSet::draw(model, config.seed, Stream::TrainNoise, &[epoch as u64, bi as u64, s as u64]))
                    .collect()
            } else {
                vec![]
            };
            let step = objective_with(pool.as_ref(), model, &x, &targets, &config.class_weights, &noise, beta)?;
            let (loss, nll, kl) = (step.loss, step.nll, step.kl);
            if !loss.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    batch: bi,
                    msg: format!("non-finite loss {loss} (nll {nll}, kl {kl})"),
                });
            }
            if step.grads_mu.iter().chain(&step.grads_rho).flatten().flatten().any(|v| !v.is_finite()) {
                return Err(Error::Divergence {
                    epoch,
                    batch: bi,
                    msg: "non-finite gradient".into(),
                });
            }
            let (h, c) = batch_metric(head, &step.first_logits, &targets)?;
            hits += h;
            count += c;
            sgd_step(model, &step.grads_mu, &step.grads_rho, config, objective);
            model.update_running_stats(&step.bn_stats);
            loss_sum += loss;
            nll_sum += nll;
            kl_sum += kl;
        }
        let nb = batches.len() as f64;
        log.push(EpochLog {
            epoch,
            loss: loss_sum / nb,
            nll: nll_sum / nb,
            kl: kl_sum / nb,
            beta,
            metric: hits / count,
        });
    }
    Ok(log)
}

/// `μ ← μ − lr·(g + wd·μ)` (decay on weights and biases only) and, at
/// Bayesian entries, `ρ ← ρ − lr·g_ρ`.
fn sgd_step(model: &mut Model, g_mu: &[Option<Vec<f64>>], g_rho: &[Option<Vec<f64>>], config: &TrainConfig, objective: Objective) {
    let frozen = objective == Objective::Variational && config.freeze_deterministic;
    let (lr, wd) = (config.lr, config.weight_decay);
    for (i, block) in model.blocks.iter_mut().enumerate() {
        if !block.trainable() {
            continue;
        }
        let decay = if block.decays() { wd } else { 0.0 };
        if let Some(g) = &g_mu[i] {
            let mask = &block.mask;
            for (j, (w, g)) in block.mu.data_mut().iter_mut().zip(g).enumerate() {
                if frozen && !(mask.get(j) == Some(&true)) {
                    continue;
                }
                *w -= lr * (g + decay * *w);
            }
        }
        if let Some(g) = &g_rho[i] {
            for ((r, g), &m) in block.rho.data_mut().iter_mut().zip(g).zip(&block.mask) {
                if m {
                    *r -= lr * g;
                }
            }
        }
    }
}

/// Step 1: trains a freshly initialized network by minimizing the weighted NLL.
pub fn train_deterministic(spec: ModelSpec, dataset: &Dataset, config: &TrainConfig) -> Result<Trained> {
    let config = config.resolved(dataset, spec.head)?;
    let mut model = Model::init(spec, config.seed)?;
    let log = fit(&mut model, dataset, &config, Objective::Likelihood)?;
    Ok(Trained {
        checkpoint: Checkpoint {
            model,
            step: StepLabel::Deterministic,
            epoch: config.epochs,
            rng_seed: config.seed,
            config,
        },
        log,
    })
}

/// More deterministic epochs starting from an existing checkpoint.
pub fn continue_deterministic(checkpoint: &Checkpoint, dataset: &Dataset, config: &TrainConfig) -> Result<Trained> {
    let config = config.resolved(dataset, checkpoint.model.spec.head)?;
    let mut model = checkpoint.model.clone();
    let log = fit(&mut model, dataset, &config, Objective::Likelihood)?;
    Ok(Trained {
        checkpoint: Checkpoint {
            model,
            step: StepLabel::Deterministic,
            epoch: checkpoint.epoch + config.epochs,
            rng_seed: config.seed,
            config,
        },
        log,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sensitivity {
    pub masks: MaskSet,
    pub saliency: SaliencyMap,
    /// The input checkpoint with the saliency stored in each block's accumulator.
    pub checkpoint: Checkpoint,
}

/// Step 2: one pass over the training set without weight updates, summing
/// squared per-example gradients of the training loss, then Top-k selection.
///
/// Examples are processed one at a time with running batch-norm statistics,
/// so each gradient depends only on its own example and the sum is
/// independent of dataset order.
pub fn run_sensitivity(checkpoint: &Checkpoint, dataset: &Dataset, r_bayes: f64, scope: TopkScope) -> Result<Sensitivity> {
    if !(0.0..=1.0).contains(&r_bayes) {
        return Err(Error::contract(format!("r_bayes must be in [0, 1], got {r_bayes}")));
    }
    if dataset.is_empty() {
        return Err(Error::contract("saliency needs a non-empty dataset"));
    }
    let model = &checkpoint.model;
    let config = checkpoint.config.resolved(dataset, model.spec.head)?;
    let pool = thread_pool(config.threads)?;
    let maskable = model.maskable_indices();
    let mut saliency = SaliencyMap::zeros_for(model);
    let n = dataset.len();
    for start in (0..n).step_by(SALIENCY_CHUNK) {
        let end = (start + SALIENCY_CHUNK).min(n);
        let grads = ordered_map(pool.as_ref(), end - start, |k| {
            let i = start + k;
            let x = dataset.batch_inputs(&[i])?;
            let targets = dataset.batch_targets(&[i], None)?;
            let mut tape = Tape::new();
            let xv = tape.constant(x);
            let pass = model.forward_on_tape(&mut tape, xv, NormMode::Running, None, true)?;
            let loss = loss_on(&mut tape, pass.logits, &targets, &config.class_weights)?;
            tape.backward(loss)?;
            let all = leaf_grads(&tape, &pass.mu_vars);
            Ok(maskable.iter().map(|&b| all[b].clone().expect("weights are tracked")).collect::<Vec<_>>())
        })?;
        for g in &grads {
            let refs: Vec<&[f64]> = g.iter().map(Vec::as_slice).collect();
            saliency.accumulate(&refs)?;
        }
    }
    let masks = topk_masks(&saliency, r_bayes, scope)?;
    let mut out = checkpoint.clone();
    for (&b, s) in maskable.iter().zip(&saliency.blocks) {
        out.model.blocks[b].sq_grad_acc = s.clone();
    }
    Ok(Sensitivity {
        masks,
        saliency,
        checkpoint: out,
    })
}

/// Step 3: installs `masks`, initializes σ at Bayesian entries and trains
/// with the ELBO. μ starts at the checkpoint's point estimates.
pub fn train_sparse_bayes(checkpoint: &Checkpoint, masks: &MaskSet, dataset: &Dataset, config: &TrainConfig) -> Result<Trained> {
    let config = config.resolved(dataset, checkpoint.model.spec.head)?;
    let mut model = checkpoint.model.clone();
    model.apply_maskset(masks, config.sigma_init)?;
    let log = fit(&mut model, dataset, &config, Objective::Variational)?;
    Ok(Trained {
        checkpoint: Checkpoint {
            model,
            step: StepLabel::SparseBayes,
            epoch: config.epochs,
            rng_seed: config.seed,
            config,
        },
        log,
    })
}

/// Every maskable scalar Bayesian, trained with the ELBO from a fresh initialization.
pub fn train_full_bayes(spec: ModelSpec, dataset: &Dataset, config: &TrainConfig) -> Result<Trained> {
    let config = config.resolved(dataset, spec.head)?;
    let model = Model::init(spec, config.seed)?;
    let full = MaskSet::from_masks(
        model.maskable_blocks().map(|b| b.mu.shape().to_vec()).collect(),
        model.maskable_blocks().map(|b| vec![true; b.mu.len()]).collect(),
        1.0,
    )?;
    let start = Checkpoint {
        model,
        config: config.clone(),
        step: StepLabel::Deterministic,
        epoch: 0,
        rng_seed: config.seed,
    };
    train_sparse_bayes(&start, &full, dataset, &config)
}

/// Independent deterministic trainings seeded `seed + i`.
pub fn train_ensemble(spec: ModelSpec, dataset: &Dataset, config: &TrainConfig, members: usize) -> Result<Vec<Trained>> {
    if members == 0 {
        return Err(Error::contract("an ensemble needs at least one member"));
    }
    let pool = thread_pool(config.threads)?;
    let mut member_cfg = config.clone();
    member_cfg.threads = 1;
    ordered_map(pool.as_ref(), members, |i| {
        let mut cfg = member_cfg.clone();
        cfg.seed = config.seed.wrapping_add(i as u64);
        let mut t = train_deterministic(spec.clone(), dataset, &cfg)?;
        if members > 1 {
            t.checkpoint.step = StepLabel::Member(i);
        }
        t.checkpoint.config.threads = config.threads;
        Ok(t)
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct PredictiveResult {
    /// Mean over samples of softmax rows (`[N, C]`) or sigmoid outputs.
    pub mean_probs: Tensor,
    /// Entropy of the mean prediction: per example for multi-class, per
    /// element (label or pixel) otherwise. Nats.
    pub entropy: Tensor,
    pub samples: Vec<Tensor>,
}

/// Softmax rows for multi-class heads, elementwise sigmoid otherwise.
pub fn probabilities(head: Head, logits: &Tensor) -> Tensor {
    match head {
        Head::Multiclass { classes } => {
            let mut out = logits.clone();
            for row in out.data_mut().chunks_mut(classes) {
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for v in row.iter_mut() {
                    *v = (*v - max).exp();
                    z += *v;
                }
                row.iter_mut().for_each(|v| *v /= z);
            }
            out
        }
        _ => {
            let mut out = logits.clone();
            out.data_mut().iter_mut().for_each(|v| *v = stable_sigmoid(*v));
            out
        }
    }
}

fn forward_chunked(model: &Model, x: &Tensor, eps: Option<&EpsilonSet>) -> Result<Tensor> {
    let n = x.shape()[0];
    if n <= PREDICT_CHUNK {
        return match eps {
            Some(e) => model.forward_sampled(x, e),
            None => model.forward_deterministic(x),
        };
    }
    let mut data = Vec::new();
    let mut shape = vec![];
    for start in (0..n).step_by(PREDICT_CHUNK) {
        let idx: Vec<usize> = (start..(start + PREDICT_CHUNK).min(n)).collect();
        let part = x.gather_rows(&idx)?;
        let out = match eps {
            Some(e) => model.forward_sampled(&part, e)?,
            None => model.forward_deterministic(&part)?,
        };
        shape = out.shape().to_vec();
        data.extend_from_slice(out.data());
    }
    shape[0] = n;
    Tensor::new(shape, data)
}

fn member_samples(model: &Model, member: usize, x: &Tensor, samples: usize, seed: u64) -> Result<Vec<Tensor>> {
    if samples == 0 {
        return Err(Error::contract("at least one posterior sample required"));
    }
    let head = model.spec.head;
    if model.n_bayes() == 0 {
        let p = probabilities(head, &forward_chunked(model, x, None)?);
        return Ok(vec![p; samples]);
    }
    (0..samples)
        .map(|s| {
            let eps = EpsilonSet::draw(model, seed, Stream::PredictNoise, &[member as u64, s as u64]);
            Ok(probabilities(head, &forward_chunked(model, x, Some(&eps))?))
        })
        .collect()
}

fn summarize(head: Head, samples: Vec<Tensor>) -> Result<PredictiveResult> {
    let mean = if samples.iter().all(|t| t == &samples[0]) {
        samples[0].clone()
    } else {
        let s = samples.len() as f64;
        let mut mean = Tensor::zeros(samples[0].shape());
        for t in &samples {
            mean.data_mut().iter_mut().zip(t.data()).for_each(|(m, v)| *m += v);
        }
        mean.data_mut().iter_mut().for_each(|m| *m /= s);
        mean
    };
    let entropy = match head {
        Head::Multiclass { classes } => {
            let n = mean.shape()[0];
            Tensor::new(vec![n], mean.data().chunks(classes).map(metrics::entropy).collect())?
        }
        _ => Tensor::new(
            mean.shape().to_vec(),
            mean.data().iter().map(|&p| metrics::binary_entropy(p)).collect(),
        )?,
    };
    Ok(PredictiveResult {
        mean_probs: mean,
        entropy,
        samples,
    })
}

/// `samples` posterior forwards averaged. Noise for sample `s` is keyed by
/// `(seed, s, block)`, so every input sees the same weight samples. A model
/// without Bayesian entries runs once and repeats the result.
pub fn predict(model: &Model, x: &Tensor, samples: usize, seed: u64) -> Result<PredictiveResult> {
    summarize(model.spec.head, member_samples(model, 0, x, samples, seed)?)
}

/// Averages all members' sampled probabilities.
pub fn predict_ensemble(models: &[&Model], x: &Tensor, samples: usize, seed: u64) -> Result<PredictiveResult> {
    let first = models.first().ok_or_else(|| Error::contract("ensemble prediction needs a model"))?;
    let mut all = Vec::new();
    for (i, m) in models.iter().enumerate() {
        if m.spec != first.spec {
            return Err(Error::contract("ensemble members must share an architecture"));
        }
        all.extend(member_samples(m, i, x, samples, seed)?);
    }
    summarize(first.spec.head, all)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_two_moons;

    fn quick(epochs: usize) -> TrainConfig {
        let mut c = TrainConfig::default_for(Head::Multiclass { classes: 2 });
        c.epochs = epochs;
        c.seed = 5;
        c
    }

    #[test]
    fn config_pairs_round_trip() {
        let mut c = TrainConfig::default_for(Head::Segmentation);
        c.class_weights = vec![0.25, 1.75];
        c.lr = 0.1 + 0.2;
        let mut back = TrainConfig::default_for(Head::Multiclass { classes: 3 });
        for (k, v) in c.pairs() {
            assert!(back.set(k, &v).unwrap());
        }
        assert_eq!(back, c);
        assert!(!back.set("learning_rte", "1").unwrap());
    }

    #[test]
    fn zero_lr_leaves_parameters_unchanged() {
        let ds = gen_two_moons(40, 0.1, 1).unwrap();
        let spec = ModelSpec::reference_mlp(2, Head::Multiclass { classes: 2 });
        let mut c = quick(3);
        c.lr = 0.0;
        let init = Model::init(spec.clone(), c.seed).unwrap();
        let t = train_deterministic(spec, &ds, &c).unwrap();
        for (a, b) in init.blocks.iter().zip(&t.checkpoint.model.blocks) {
            if a.trainable() {
                assert_eq!(a.mu, b.mu);
            }
        }
    }

    #[test]
    fn deterministic_prediction_repeats_one_forward() {
        let ds = gen_two_moons(40, 0.1, 1).unwrap();
        let spec = ModelSpec::reference_mlp(2, Head::Multiclass { classes: 2 });
        let t = train_deterministic(spec, &ds, &quick(2)).unwrap();
        let p = predict(&t.checkpoint.model, &ds.inputs, 5, 0).unwrap();
        assert!(p.samples.iter().all(|s| s == &p.samples[0]));
        assert_eq!(p.mean_probs, p.samples[0]);
        for row in p.mean_probs.data().chunks(2) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn sigma_stays_positive_and_unmasked_rho_frozen() {
        let ds = gen_two_moons(40, 0.1, 1).unwrap();
        let spec = ModelSpec::reference_mlp(2, Head::Multiclass { classes: 2 });
        let det = train_deterministic(spec, &ds, &quick(2)).unwrap();
        let sens = run_sensitivity(&det.checkpoint, &ds, 0.2, TopkScope::PerLayer).unwrap();
        let bayes = train_sparse_bayes(&det.checkpoint, &sens.masks, &ds, &quick(3)).unwrap();
        let off = crate::tensor::softplus_inverse(crate::layers::DETERMINISTIC_SIGMA);
        for b in bayes.checkpoint.model.maskable_blocks() {
            for (&r, &m) in b.rho.data().iter().zip(&b.mask) {
                assert!(crate::tensor::softplus(r) > 0.0);
                if !m {
                    assert_eq!(r, off);
                }
            }
        }
        assert!(bayes.log.iter().all(|e| e.kl > 0.0));
    }
}
