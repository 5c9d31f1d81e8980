//! Incidence prediction and derived survival quantities.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::aggregation::check_nonzero_rows;
use crate::error::{Error, Result};
use crate::labels::TimeGrid;
use crate::math::{cosine_grad, norm, sigmoid, softmax_in_place};

/// Upper bound applied to the learned temperature.
pub const MAX_TAU: f64 = 100.0;
/// Initial temperature `1 / 0.07`.
pub const INIT_TAU: f64 = 1.0 / 0.07;

/// Which quantity the similarity scores parameterize.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    #[default]
    Incidence,
    Hazard,
}

/// Predicted first-hitting distribution and its derived curves.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IncidenceResult {
    pub y_hat: Vec<f64>,
    pub cif: Vec<f64>,
    pub survival: Vec<f64>,
    pub risk: f64,
}

impl IncidenceResult {
    pub fn from_distribution(y_hat: Vec<f64>) -> Self {
        let mut cif = Vec::with_capacity(y_hat.len());
        let mut acc = 0.0;
        for &p in &y_hat {
            acc += p;
            cif.push(acc);
        }
        let survival = cif.iter().map(|c| 1.0 - c).collect();
        let risk = cif.iter().sum();
        Self { y_hat, cif, survival, risk }
    }

    pub fn num_classes(&self) -> usize {
        self.y_hat.len()
    }
}

/// Temperature from its log parameterization, clamped to `(0, MAX_TAU]`.
pub fn tau_from_log(log_tau: f64) -> f64 {
    log_tau.exp().min(MAX_TAU)
}

/// Cosine similarity of `f_image` to every prompt row. A zero image vector
/// yields all-zero scores.
pub fn similarity_scores(f_image: ArrayView1<'_, f64>, prompts: ArrayView2<'_, f64>) -> Result<Vec<f64>> {
    check_nonzero_rows(prompts)?;
    let ni = norm(f_image);
    if ni == 0.0 {
        return Ok(vec![0.0; prompts.nrows()]);
    }
    Ok(prompts
        .rows()
        .into_iter()
        .map(|p| f_image.dot(&p) / (ni * norm(p)))
        .collect())
}

/// Backpropagates `d_cos` into the image vector and the prompt rows.
pub fn similarity_backward(
    f_image: ArrayView1<'_, f64>,
    prompts: ArrayView2<'_, f64>,
    cosines: &[f64],
    d_cos: &[f64],
) -> (Array1<f64>, Array2<f64>) {
    let mut d_image = Array1::zeros(f_image.len());
    let mut d_prompts = Array2::zeros(prompts.raw_dim());
    if norm(f_image) == 0.0 {
        return (d_image, d_prompts);
    }
    for (c, p) in prompts.rows().into_iter().enumerate() {
        if d_cos[c] == 0.0 {
            continue;
        }
        d_image.scaled_add(d_cos[c], &cosine_grad(f_image, p, cosines[c]));
        d_prompts.row_mut(c).assign(&(cosine_grad(p, f_image, cosines[c]) * d_cos[c]));
    }
    (d_image, d_prompts)
}

pub fn incidence(f_image: ArrayView1<'_, f64>, prompts: ArrayView2<'_, f64>, tau: f64) -> Result<IncidenceResult> {
    let cos = similarity_scores(f_image, prompts)?;
    Ok(incidence_from_scores(&cos, tau))
}

pub fn incidence_from_scores(cosines: &[f64], tau: f64) -> IncidenceResult {
    let mut y: Vec<f64> = cosines.iter().map(|c| tau * c).collect();
    softmax_in_place(&mut y);
    IncidenceResult::from_distribution(y)
}

/// `R = sum_c CIF(c)`.
pub fn risk_score(result: &IncidenceResult) -> f64 {
    result.cif.iter().sum()
}

/// Expectation of the first-hitting distribution with each bin placed at its midpoint.
pub fn expected_time(result: &IncidenceResult, grid: &TimeGrid) -> Result<f64> {
    if result.num_classes() != grid.num_classes() {
        return Err(Error::Shape(format!(
            "{} predicted classes vs {} grid bins",
            result.num_classes(),
            grid.num_classes()
        )));
    }
    Ok(result.y_hat.iter().zip(grid.midpoints()).map(|(p, m)| p * m).sum())
}

/// Discrete hazard prediction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HazardResult {
    pub hazards: Vec<f64>,
    pub survival: Vec<f64>,
    pub risk: f64,
}

impl HazardResult {
    /// Incidence implied by the hazards; the mass surviving past the last
    /// bin is assigned to the last bin so the distribution sums to one.
    pub fn to_incidence(&self) -> IncidenceResult {
        let mut prev = 1.0;
        let mut y: Vec<f64> = self
            .survival
            .iter()
            .map(|&s| {
                let p = prev - s;
                prev = s;
                p
            })
            .collect();
        if let Some(last) = y.last_mut() {
            *last += prev;
        }
        let mut out = IncidenceResult::from_distribution(y);
        out.risk = self.risk;
        out
    }
}

pub fn hazard_from_scores(cosines: &[f64], tau: f64) -> HazardResult {
    let hazards: Vec<f64> = cosines.iter().map(|c| sigmoid(tau * c)).collect();
    let mut s = 1.0;
    let survival: Vec<f64> = hazards
        .iter()
        .map(|h| {
            s *= 1.0 - h;
            s
        })
        .collect();
    let risk = survival.iter().map(|s| 1.0 - s).sum();
    HazardResult { hazards, survival, risk }
}

pub fn hazard_head(f_image: ArrayView1<'_, f64>, prompts: ArrayView2<'_, f64>, tau: f64) -> Result<HazardResult> {
    Ok(hazard_from_scores(&similarity_scores(f_image, prompts)?, tau))
}
