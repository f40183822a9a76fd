//! The variational objective: Gaussian KL against a standard-normal prior,
//! the ELBO combination, and the KL weight schedule.

use crate::error::{Error, Result};
use crate::tensor::{softplus, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KlEstimator {
    ClosedForm,
    MonteCarlo,
}

#[derive(Clone, Debug, PartialEq)]
pub struct KlTerm {
    /// KL in nats.
    pub value: f64,
    pub n_bayes_params: usize,
    pub estimator: KlEstimator,
    /// Standard error of a Monte Carlo estimate; `None` for closed form.
    pub std_error: Option<f64>,
}

impl KlTerm {
    pub fn zero() -> Self {
        KlTerm {
            value: 0.0,
            n_bayes_params: 0,
            estimator: KlEstimator::ClosedForm,
            std_error: None,
        }
    }
}

/// `Σ_{mask} ½(μ² + σ² − 1) − ln σ` with `σ = softplus(ρ)`.
pub(crate) fn kl_sum(mu: &[f64], rho: &[f64], mask: &[bool]) -> f64 {
    let mut acc = 0.0;
    for ((&m, &r), &on) in mu.iter().zip(rho).zip(mask) {
        if on {
            let sigma = softplus(r);
            acc += 0.5 * (m * m + sigma * sigma - 1.0) - sigma.ln();
        }
    }
    acc
}

fn check_shapes(mu: &Tensor, rho: &Tensor, mask: &[bool]) -> Result<()> {
    if mu.shape() != rho.shape() || mask.len() != mu.len() {
        return Err(Error::dim(format!(
            "mu {:?}, rho {:?} and mask of length {} must agree",
            mu.shape(),
            rho.shape(),
            mask.len()
        )));
    }
    Ok(())
}

pub fn kl_closed_form(mu: &Tensor, rho: &Tensor, mask: &[bool]) -> Result<KlTerm> {
    check_shapes(mu, rho, mask)?;
    let n = mask.iter().filter(|&&m| m).count();
    let value = if n == 0 { 0.0 } else { kl_sum(mu.data(), rho.data(), mask) };
    Ok(KlTerm {
        value,
        n_bayes_params: n,
        estimator: KlEstimator::ClosedForm,
        std_error: None,
    })
}

/// Per-sample `Σ_{mask} [ln q(w) − ln p(w)]` at `w = μ + σ·ε`.
///
/// Each element of `epsilon_samples` is one full noise draw with `mu.len()` entries.
pub fn kl_monte_carlo_samples(
    mu: &Tensor,
    rho: &Tensor,
    mask: &[bool],
    epsilon_samples: &[Vec<f64>],
) -> Result<Vec<f64>> {
    check_shapes(mu, rho, mask)?;
    if epsilon_samples.is_empty() {
        return Err(Error::contract("Monte Carlo KL needs at least one sample"));
    }
    let sigma_log: Vec<(f64, f64)> = rho
        .data()
        .iter()
        .map(|&r| {
            let s = softplus(r);
            (s, s.ln())
        })
        .collect();
    epsilon_samples
        .iter()
        .map(|eps| {
            if eps.len() != mu.len() {
                return Err(Error::dim(format!(
                    "epsilon sample of length {} for {} parameters",
                    eps.len(),
                    mu.len()
                )));
            }
            let mut acc = 0.0;
            for j in 0..eps.len() {
                if mask[j] {
                    let (sigma, ln_sigma) = sigma_log[j];
                    let w = mu.data()[j] + sigma * eps[j];
                    // ln N(w; μ, σ) − ln N(w; 0, 1); the 2π terms cancel.
                    acc += -ln_sigma - 0.5 * eps[j] * eps[j] + 0.5 * w * w;
                }
            }
            Ok(acc)
        })
        .collect()
}

pub fn kl_monte_carlo(mu: &Tensor, rho: &Tensor, mask: &[bool], epsilon_samples: &[Vec<f64>]) -> Result<KlTerm> {
    let per_sample = kl_monte_carlo_samples(mu, rho, mask, epsilon_samples)?;
    let n = per_sample.len() as f64;
    let mean = per_sample.iter().sum::<f64>() / n;
    let std_error = if per_sample.len() > 1 {
        let var = per_sample.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        Some((var / n).sqrt())
    } else {
        None
    };
    Ok(KlTerm {
        value: mean,
        n_bayes_params: mask.iter().filter(|&&m| m).count(),
        estimator: KlEstimator::MonteCarlo,
        std_error,
    })
}

/// `mean(nll) + β·KL`.
pub fn elbo_loss(nll_per_sample: &[f64], kl: &KlTerm, beta: f64) -> Result<f64> {
    if nll_per_sample.is_empty() {
        return Err(Error::contract("ELBO needs at least one likelihood sample"));
    }
    let mean = nll_per_sample.iter().sum::<f64>() / nll_per_sample.len() as f64;
    Ok(mean + beta * kl.value)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BetaMode {
    Static,
    LinearAnneal,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BetaSchedule {
    pub mode: BetaMode,
    pub beta_init: f64,
    pub beta_target: f64,
    /// Index of the final epoch; `beta_at(total_epochs)` returns `beta_target`.
    pub total_epochs: usize,
}

impl BetaSchedule {
    pub fn constant(beta: f64) -> Self {
        BetaSchedule {
            mode: BetaMode::Static,
            beta_init: beta,
            beta_target: beta,
            total_epochs: 0,
        }
    }
}

/// KL weight at `epoch`, moving linearly from `beta_init` (epoch 0) to
/// `beta_target` (epoch `total_epochs`) in annealing mode.
pub fn beta_at(schedule: &BetaSchedule, epoch: usize) -> Result<f64> {
    if epoch > schedule.total_epochs && schedule.mode == BetaMode::LinearAnneal {
        return Err(Error::contract(format!(
            "epoch {epoch} beyond schedule length {}",
            schedule.total_epochs
        )));
    }
    Ok(match schedule.mode {
        BetaMode::Static => schedule.beta_init,
        BetaMode::LinearAnneal if schedule.total_epochs == 0 => schedule.beta_init,
        BetaMode::LinearAnneal => {
            if epoch == schedule.total_epochs {
                schedule.beta_target
            } else {
                let frac = epoch as f64 / schedule.total_epochs as f64;
                schedule.beta_init + (schedule.beta_target - schedule.beta_init) * frac
            }
        }
    })
}
