//! Central finite-difference check of every learnable parameter group on a
//! tiny prior-guided problem.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::aggregation::{AggregatorConfig, PriorSet};
use crate::error::Result;
use crate::labels::{DiscreteLabel, GridScheme, TimeGrid};
use crate::losses::LossConfig;
use crate::model::{ModelConfig, ModelState};

pub const STEP: f64 = 1e-6;
pub const TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradcheckConfig {
    pub instances: usize,
    pub priors: usize,
    pub classes: usize,
    pub dim: usize,
    pub token_dim: usize,
    pub seed: u64,
    /// Corrupts the analytic head gradient (negative control).
    pub break_head: bool,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self { instances: 5, priors: 2, classes: 3, dim: 8, token_dim: 16, seed: 0, break_head: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupResult {
    pub group: String,
    pub params: usize,
    pub rel_error: f64,
    pub passed: bool,
}

fn group_of(name: &str) -> &'static str {
    if name == "prior_offsets" {
        "T_prog"
    } else if name == "context" {
        "V_ctx"
    } else if name.starts_with("class_tokens.") {
        "class_tokens"
    } else if name.starts_with("head.") {
        "head"
    } else if name == "log_tau" {
        "log_tau"
    } else {
        "aggregator"
    }
}

fn randn(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || StandardNormal.sample(&mut *rng))
}

/// Runs the check and returns one row per parameter group, in parameter order.
pub fn run(cfg: &GradcheckConfig) -> Result<Vec<GroupResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let cuts: Vec<f64> = (0..=cfg.classes).map(|c| c as f64).collect();
    let grid = TimeGrid::new(GridScheme::Uniform, cuts)?;
    let mut mc = ModelConfig::new(cfg.dim, cfg.priors);
    mc.token_dim = cfg.token_dim;
    mc.aggregator = AggregatorConfig { alpha: 5.0, ..Default::default() };
    let texts = (0..cfg.priors).map(|i| format!("prior {i}")).collect();
    let priors = PriorSet::new(randn(cfg.priors, cfg.dim, &mut rng), texts)?;
    let mut model = ModelState::new(mc, Some(priors), grid, cfg.seed)?;
    // leave the symmetric initialization so every path carries gradient
    for s in model.params_mut() {
        for v in s.iter_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v += 0.1 * z;
        }
    }
    model.log_tau = 1.0;

    let bags = [randn(cfg.instances, cfg.dim, &mut rng), randn(cfg.instances, cfg.dim, &mut rng)];
    let mid = cfg.classes.div_ceil(2);
    let batch = vec![
        (bags[0].view(), DiscreteLabel { class: mid, event: true }),
        (bags[1].view(), DiscreteLabel { class: mid, event: false }),
    ];
    let loss = LossConfig::default();
    let tau_prime = model.tau();
    let mut grads = model.backward(&model.forward(&batch, &loss, Some(tau_prime))?);
    if cfg.break_head {
        grads.head_weight.mapv_inplace(|g| g * 1.5 + 1e-3);
    }

    let names: Vec<String> = model.params().into_iter().map(|(n, _)| n).collect();
    let mut groups: Vec<(String, usize, f64, f64)> = Vec::new();
    for (k, (_, analytic)) in grads.slices().into_iter().enumerate() {
        let group = group_of(&names[k]);
        let (mut diff, mut norm) = (0.0, 0.0);
        for (i, a) in analytic.iter().enumerate() {
            let mut eval = |delta: f64| -> Result<f64> {
                let saved = model.params()[k].1[i];
                model.params_mut()[k][i] = saved + delta;
                let l = model.forward(&batch, &loss, Some(tau_prime))?.mean_loss();
                model.params_mut()[k][i] = saved;
                Ok(l)
            };
            let fd = (eval(STEP)? - eval(-STEP)?) / (2.0 * STEP);
            diff += (fd - a).powi(2);
            norm += fd.powi(2).max(a.powi(2));
        }
        match groups.iter_mut().find(|g| g.0 == group) {
            Some(g) => {
                g.1 += analytic.len();
                g.2 += diff;
                g.3 += norm;
            }
            None => groups.push((group.to_string(), analytic.len(), diff, norm)),
        }
    }
    Ok(groups
        .into_iter()
        .map(|(group, params, diff, norm)| {
            let rel_error = if norm == 0.0 { diff.sqrt() } else { (diff / norm).sqrt() };
            GroupResult { group, params, rel_error, passed: rel_error < TOLERANCE }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_problem_passes() {
        let rows = run(&GradcheckConfig::default()).unwrap();
        let names: Vec<&str> = rows.iter().map(|r| r.group.as_str()).collect();
        assert_eq!(names, ["T_prog", "V_ctx", "class_tokens", "head", "log_tau"]);
        for r in &rows {
            assert!(r.passed, "{r:?}");
        }
    }

    #[test]
    fn broken_head_is_caught() {
        let rows = run(&GradcheckConfig { break_head: true, ..Default::default() }).unwrap();
        for r in &rows {
            assert_eq!(r.passed, r.group != "head", "{r:?}");
        }
    }
}
