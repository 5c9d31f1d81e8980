//! Exact Shapley attribution of the predicted risk to each prior, and the
//! instances each prior attends to most.

use std::io::Write;

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::aggregation::{subset_fuse, top_instances, LinearHead};
use crate::error::{Error, Result};
use crate::model::ModelState;
use crate::prediction::{incidence, risk_score};

/// Largest prior count accepted by exact enumeration.
pub const MAX_PLAYERS: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapleyReport {
    pub contributions: Vec<f64>,
    pub baseline_risk: f64,
    pub full_risk: f64,
    pub prior_texts: Vec<String>,
}

impl ShapleyReport {
    /// `sum(phi) - (full - baseline)`; zero up to rounding.
    pub fn efficiency_gap(&self) -> f64 {
        self.contributions.iter().sum::<f64>() - (self.full_risk - self.baseline_risk)
    }

    /// CSV with one row per prior: `prior_index, prior_text, phi,
    /// baseline_risk, full_risk` (the last two repeat on every row).
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["prior_index", "prior_text", "phi", "baseline_risk", "full_risk"])?;
        for (m, phi) in self.contributions.iter().enumerate() {
            let text = self.prior_texts.get(m).map(String::as_str).unwrap_or("");
            w.write_record([
                m.to_string(),
                text.to_string(),
                format!("{phi:e}"),
                format!("{:e}", self.baseline_risk),
                format!("{:e}", self.full_risk),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Exact Shapley values of a set function over `m` players. The value of
/// every coalition is computed once, in bitmask order.
pub fn shapley_values(m: usize, value: impl Fn(&[usize]) -> Result<f64>) -> Result<(Vec<f64>, f64, f64)> {
    if m > MAX_PLAYERS {
        return Err(Error::CoalitionTooLarge(m));
    }
    let n_masks = 1usize << m;
    let mut values = Vec::with_capacity(n_masks);
    let mut members = Vec::with_capacity(m);
    for mask in 0..n_masks {
        members.clear();
        members.extend((0..m).filter(|i| mask >> i & 1 == 1));
        values.push(value(&members)?);
    }
    // |S|! (M - |S| - 1)! / M!
    let mut weight = vec![0.0; m.max(1)];
    for (s, w) in weight.iter_mut().enumerate().take(m) {
        *w = (ln_factorial(s) + ln_factorial(m - s - 1) - ln_factorial(m)).exp();
    }
    let mut phi = vec![0.0; m];
    for (i, p) in phi.iter_mut().enumerate() {
        let bit = 1usize << i;
        for mask in 0..n_masks {
            if mask & bit == 0 {
                *p += weight[mask.count_ones() as usize] * (values[mask | bit] - values[mask]);
            }
        }
    }
    Ok((phi, values[0], values[n_masks - 1]))
}

fn ln_factorial(n: usize) -> f64 {
    (1..=n).map(|k| (k as f64).ln()).sum()
}

/// Shapley attribution for the incidence head: `f_risk(S)` fuses the pooled
/// rows in `S`, scores them against the prompts and sums the CIF. The empty
/// coalition yields the uniform prediction with risk `(C + 1) / 2`.
pub fn shapley_exact(
    pooled: ArrayView2<'_, f64>,
    head: &LinearHead,
    prompts: ArrayView2<'_, f64>,
    tau: f64,
    prior_texts: &[String],
) -> Result<ShapleyReport> {
    let (contributions, baseline_risk, full_risk) = shapley_values(pooled.nrows(), |subset| {
        let f = subset_fuse(pooled, subset, head);
        Ok(risk_score(&incidence(f.view(), prompts, tau)?))
    })?;
    Ok(ShapleyReport { contributions, baseline_risk, full_risk, prior_texts: prior_texts.to_vec() })
}

/// Shapley report for one bag under a trained model (query aggregators).
pub fn explain(model: &ModelState, bag: ArrayView2<'_, f64>) -> Result<ShapleyReport> {
    let pooled = model.pooled(bag)?;
    let prompts = model.prompt_trace()?.prompts;
    let mut texts = model.prior_texts();
    texts.resize(pooled.nrows(), String::new());
    let (contributions, baseline_risk, full_risk) = shapley_values(pooled.nrows(), |subset| {
        let f = subset_fuse(pooled.view(), subset, &model.head);
        Ok(model.predict_from_image(f, prompts.view())?.risk())
    })?;
    Ok(ShapleyReport { contributions, baseline_risk, full_risk, prior_texts: texts })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evidence {
    pub prior_index: usize,
    pub instance_index: usize,
    pub weight: f64,
}

/// Top-`k` instances for every prior of a query-based model.
pub fn evidence(model: &ModelState, bag: ArrayView2<'_, f64>, top_k: usize) -> Result<Vec<Evidence>> {
    let queries = model
        .queries()?
        .ok_or_else(|| Error::Invalid("attention pooling has no per-prior evidence".into()))?;
    let k = top_k.min(bag.nrows());
    let mut out = Vec::new();
    for m in 0..queries.nrows() {
        for (instance_index, weight) in top_instances(queries.view(), bag, model.config.aggregator.alpha, m, k)? {
            out.push(Evidence { prior_index: m, instance_index, weight });
        }
    }
    Ok(out)
}

pub fn write_evidence_csv<W: Write>(writer: W, rows: &[Evidence]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array1, Array2};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn randn(r: usize, c: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_simple_fn((r, c), || StandardNormal.sample(&mut rng))
    }

    fn head(d: usize, seed: u64) -> LinearHead {
        LinearHead { weight: randn(d, d, seed), bias: Array1::from(randn(1, d, seed + 1).row(0).to_vec()) }
    }

    fn prompts(c: usize, d: usize, seed: u64) -> Array2<f64> {
        let mut p = randn(c, d, seed);
        for mut r in p.rows_mut() {
            let n = r.dot(&r).sqrt();
            r /= n;
        }
        p
    }

    /// Average marginal contribution over all orderings.
    fn permutation_oracle(m: usize, f: &dyn Fn(&[usize]) -> f64) -> Vec<f64> {
        fn perms(items: Vec<usize>) -> Vec<Vec<usize>> {
            if items.len() <= 1 {
                return vec![items];
            }
            let mut out = vec![];
            for i in 0..items.len() {
                let mut rest = items.clone();
                let x = rest.remove(i);
                for mut p in perms(rest) {
                    p.insert(0, x);
                    out.push(p);
                }
            }
            out
        }
        let all = perms((0..m).collect());
        let mut phi = vec![0.0; m];
        for order in &all {
            let mut coalition: Vec<usize> = vec![];
            for &p in order {
                let before = f(&{
                    let mut s = coalition.clone();
                    s.sort_unstable();
                    s
                });
                coalition.push(p);
                let mut s = coalition.clone();
                s.sort_unstable();
                phi[p] += f(&s) - before;
            }
        }
        phi.iter().map(|x| x / all.len() as f64).collect()
    }

    #[test]
    fn single_player() {
        let (f, h, p) = (randn(1, 4, 1), head(4, 2), prompts(3, 4, 3));
        let r = shapley_exact(f.view(), &h, p.view(), 5.0, &["x".into()]).unwrap();
        assert_eq!(r.baseline_risk, 2.0);
        assert!((r.contributions[0] - (r.full_risk - 2.0)).abs() < 1e-15);
    }

    #[test]
    fn matches_permutation_oracle() {
        for seed in 0..5 {
            let m = 3 + seed as usize % 3;
            let (f, h, p) = (randn(m, 5, seed), head(5, seed + 10), prompts(4, 5, seed + 20));
            let r = shapley_exact(f.view(), &h, p.view(), 8.0, &[]).unwrap();
            let value = |s: &[usize]| risk_score(&incidence(subset_fuse(f.view(), s, &h).view(), p.view(), 8.0).unwrap());
            let oracle = permutation_oracle(m, &value);
            for (a, b) in r.contributions.iter().zip(&oracle) {
                assert!((a - b).abs() < 1e-10);
            }
            assert!(r.efficiency_gap().abs() < 1e-10);
        }
    }

    #[test]
    fn identical_rows_share_credit() {
        let mut f = randn(3, 4, 7);
        let row = f.row(0).to_owned();
        f.row_mut(2).assign(&row);
        let r = shapley_exact(f.view(), &head(4, 8), prompts(3, 4, 9).view(), 10.0, &[]).unwrap();
        assert!((r.contributions[0] - r.contributions[2]).abs() < 1e-12);
    }

    #[test]
    fn too_many_players() {
        assert!(matches!(shapley_values(21, |_| Ok(0.0)), Err(Error::CoalitionTooLarge(21))));
    }

    #[test]
    fn csv_has_one_row_per_prior() {
        let r = shapley_exact(randn(4, 3, 1).view(), &head(3, 2), prompts(3, 3, 3).view(), 5.0, &[]).unwrap();
        let mut buf = Vec::new();
        r.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 5);
    }

    proptest! {
        #[test]
        fn relabeling_permutes_phi(seed in 0u64..500) {
            let (f, h, p) = (randn(4, 5, seed), head(5, seed + 1), prompts(3, 5, seed + 2));
            let a = shapley_exact(f.view(), &h, p.view(), 6.0, &[]).unwrap();
            let order = [2usize, 0, 3, 1];
            let g = Array2::from_shape_fn((4, 5), |(i, j)| f[[order[i], j]]);
            let b = shapley_exact(g.view(), &h, p.view(), 6.0, &[]).unwrap();
            for i in 0..4 {
                prop_assert!((b.contributions[i] - a.contributions[order[i]]).abs() < 1e-10);
            }
        }
    }
}
