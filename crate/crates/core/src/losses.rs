//! Training objectives on incidence predictions.
//!
//! `total = mle + beta * emd_sq`, where `emd_sq` is the squared L2 distance
//! between the CDF of the prediction and the CDF of a soft target.
//! [`emd_measure`] is the prefactored 1-D earth mover's distance, kept
//! separate as a diagnostic.

use serde::{Deserialize, Serialize};

use crate::labels::{target_distribution, DiscreteLabel};
use crate::math::{sigmoid, softplus};
use crate::prediction::HeadKind;

pub const LOG_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub beta: f64,
    pub emd_norm_order: u32,
    pub use_emd: bool,
    pub head: HeadKind,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { beta: 1.0, emd_norm_order: 1, use_emd: true, head: HeadKind::Incidence }
    }
}

impl LossConfig {
    /// Weight actually applied to the EMD term.
    pub fn effective_beta(&self) -> f64 {
        if self.use_emd && self.head == HeadKind::Incidence {
            self.beta
        } else {
            0.0
        }
    }
}

fn cdf(p: &[f64]) -> Vec<f64> {
    let mut acc = 0.0;
    p.iter()
        .map(|v| {
            acc += v;
            acc
        })
        .collect()
}

/// Probability mass the likelihood rewards: `y_c` for events,
/// `1 - sum_{i<c} y_i` for censored patients.
fn likelihood_mass(y_hat: &[f64], label: DiscreteLabel) -> f64 {
    if label.event {
        y_hat[label.class - 1]
    } else {
        1.0 - y_hat[..label.class - 1].iter().sum::<f64>()
    }
}

pub fn mle_loss(y_hat: &[f64], label: DiscreteLabel) -> f64 {
    -likelihood_mass(y_hat, label).max(LOG_CLAMP).ln()
}

/// `d mle / d y_hat`; zero where the log clamp is active.
pub fn mle_grad(y_hat: &[f64], label: DiscreteLabel) -> Vec<f64> {
    let mut g = vec![0.0; y_hat.len()];
    let mass = likelihood_mass(y_hat, label);
    if mass <= LOG_CLAMP {
        return g;
    }
    if label.event {
        g[label.class - 1] = -1.0 / mass;
    } else {
        for v in &mut g[..label.class - 1] {
            *v = 1.0 / mass;
        }
    }
    g
}

/// `(1/C)^(1/l) * ||CDF(p) - CDF(q)||_l`.
pub fn emd_measure(p: &[f64], q: &[f64], l: u32) -> f64 {
    let c = p.len() as f64;
    let l = l as f64;
    let s: f64 = cdf(p).iter().zip(cdf(q)).map(|(a, b)| (a - b).abs().powf(l)).sum();
    (1.0 / c).powf(1.0 / l) * s.powf(1.0 / l)
}

/// Squared CDF distance between two distributions (no prefactor).
pub fn emd_sq(p: &[f64], q: &[f64]) -> f64 {
    cdf(p).iter().zip(cdf(q)).map(|(a, b)| (a - b).powi(2)).sum()
}

pub fn emd_sq_grad(p: &[f64], q: &[f64]) -> Vec<f64> {
    let diff: Vec<f64> = cdf(p).iter().zip(cdf(q)).map(|(a, b)| a - b).collect();
    // dL/dp_i = sum_{j >= i} 2 * diff_j
    let mut g = vec![0.0; p.len()];
    let mut acc = 0.0;
    for i in (0..p.len()).rev() {
        acc += 2.0 * diff[i];
        g[i] = acc;
    }
    g
}

pub fn emd_loss(y_hat: &[f64], label: DiscreteLabel, num_classes: usize, tau_prime: f64) -> f64 {
    emd_sq(y_hat, &target_distribution(label, num_classes, tau_prime))
}

pub fn emd_loss_grad(y_hat: &[f64], label: DiscreteLabel, num_classes: usize, tau_prime: f64) -> Vec<f64> {
    emd_sq_grad(y_hat, &target_distribution(label, num_classes, tau_prime))
}

pub fn total_loss(y_hat: &[f64], label: DiscreteLabel, config: &LossConfig, tau_prime: f64) -> f64 {
    let beta = config.effective_beta();
    let mle = mle_loss(y_hat, label);
    if beta == 0.0 {
        return mle;
    }
    mle + beta * emd_loss(y_hat, label, y_hat.len(), tau_prime)
}

pub fn total_loss_grad(y_hat: &[f64], label: DiscreteLabel, config: &LossConfig, tau_prime: f64) -> Vec<f64> {
    let mut g = mle_grad(y_hat, label);
    let beta = config.effective_beta();
    if beta != 0.0 {
        for (a, b) in g.iter_mut().zip(emd_loss_grad(y_hat, label, y_hat.len(), tau_prime)) {
            *a += beta * b;
        }
    }
    g
}

/// Discrete-hazard negative log-likelihood on the scaled scores
/// `logits_c = tau * cos_c`, with its gradient in the logits.
///
/// Events at class `c`: `-[sum_{i<c} log(1-h_i) + log h_c]`.
/// Censored at class `c`: `-sum_{i<=c} log(1-h_i)`.
pub fn hazard_nll(logits: &[f64], label: DiscreteLabel) -> (f64, Vec<f64>) {
    let c = label.class - 1;
    let mut grad = vec![0.0; logits.len()];
    let mut loss = 0.0;
    for i in 0..c {
        // -log(1 - sigmoid(x)) = softplus(x)
        loss += softplus(logits[i]);
        grad[i] = sigmoid(logits[i]);
    }
    if label.event {
        // -log sigmoid(x) = softplus(-x)
        loss += softplus(-logits[c]);
        grad[c] = sigmoid(logits[c]) - 1.0;
    } else {
        loss += softplus(logits[c]);
        grad[c] = sigmoid(logits[c]);
    }
    (loss, grad)
}
