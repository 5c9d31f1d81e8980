//! Bag-level representations from instance features.
//!
//! Three aggregators are provided: prior-guided pooling (each prior queries
//! the bag by cosine similarity), the classic attention pooling baseline and
//! a learnable-prototype variant that reuses prior-guided pooling with fully
//! trainable queries.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{cosine, cosine_grad, norm, softmax_backward, softmax_in_place};

/// Language-encoded prognostic priors: frozen base embeddings plus
/// learnable offsets.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorSet {
    pub base: Array2<f64>,
    pub offsets: Array2<f64>,
    pub texts: Vec<String>,
}

impl PriorSet {
    /// Offsets start at zero so the effective priors equal the base embeddings.
    pub fn new(base: Array2<f64>, texts: Vec<String>) -> Result<Self> {
        if base.nrows() == 0 {
            return Err(Error::Empty("prior set"));
        }
        let offsets = Array2::zeros(base.raw_dim());
        Ok(Self { base, offsets, texts })
    }

    pub fn len(&self) -> usize {
        self.base.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.base.nrows() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregatorKind {
    PriorGuided,
    Attention,
    LearnablePrototypes,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AggregatorConfig {
    pub kind: AggregatorKind,
    pub alpha: f64,
    pub attention_hidden: usize,
}

impl Default for AggregatorConfig {
    fn default() -> Self {
        Self { kind: AggregatorKind::PriorGuided, alpha: 100.0, attention_hidden: 128 }
    }
}

pub fn effective_priors(priors: &PriorSet) -> Result<Array2<f64>> {
    if priors.base.dim() != priors.offsets.dim() {
        return Err(Error::Shape(format!(
            "prior base {:?} vs offsets {:?}",
            priors.base.dim(),
            priors.offsets.dim()
        )));
    }
    Ok(&priors.base + &priors.offsets)
}

/// Forward values of [`prior_guided_pool`] needed for backpropagation.
#[derive(Debug, Clone)]
pub struct PoolTrace {
    /// Pooled representations `F`, `M x D`.
    pub pooled: Array2<f64>,
    /// Softmax weights over instances, `M x K`.
    pub weights: Array2<f64>,
    cosines: Array2<f64>,
    alpha: f64,
}

pub fn prior_guided_pool(
    priors_eff: ArrayView2<'_, f64>,
    bag: ArrayView2<'_, f64>,
    alpha: f64,
) -> Result<PoolTrace> {
    let (m, d) = priors_eff.dim();
    let (k, bd) = bag.dim();
    if k == 0 {
        return Err(Error::Empty("bag"));
    }
    if bd != d {
        return Err(Error::Shape(format!("bag dim {bd} != prior dim {d}")));
    }
    let mut cosines = Array2::zeros((m, k));
    let mut weights = Array2::zeros((m, k));
    for i in 0..m {
        let p = priors_eff.row(i);
        for j in 0..k {
            cosines[[i, j]] = cosine(p, bag.row(j))?;
        }
        let mut row: Vec<f64> = cosines.row(i).iter().map(|c| alpha * c).collect();
        softmax_in_place(&mut row);
        weights.row_mut(i).assign(&Array1::from(row));
    }
    let pooled = weights.dot(&bag);
    Ok(PoolTrace { pooled, weights, cosines, alpha })
}

/// Gradient of the loss with respect to the (effective) priors given
/// `d_pooled`. Instance features are frozen and receive no gradient.
pub fn prior_guided_pool_backward(
    trace: &PoolTrace,
    priors_eff: ArrayView2<'_, f64>,
    bag: ArrayView2<'_, f64>,
    d_pooled: ArrayView2<'_, f64>,
) -> Array2<f64> {
    let (m, d) = priors_eff.dim();
    let mut d_priors = Array2::zeros((m, d));
    // dL/da = dF . X^T
    let d_weights = d_pooled.dot(&bag.t());
    for i in 0..m {
        let a = trace.weights.row(i).to_vec();
        let ds = softmax_backward(&a, d_weights.row(i).as_slice().unwrap());
        let p = priors_eff.row(i);
        let mut acc = Array1::zeros(d);
        for (j, g) in ds.iter().enumerate() {
            if *g == 0.0 {
                continue;
            }
            let grad = cosine_grad(p, bag.row(j), trace.cosines[[i, j]]);
            acc.scaled_add(trace.alpha * g, &grad);
        }
        d_priors.row_mut(i).assign(&acc);
    }
    d_priors
}

/// Affine map `y = W x + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearHead {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl LinearHead {
    pub fn identity(dim: usize) -> Self {
        Self { weight: Array2::eye(dim), bias: Array1::zeros(dim) }
    }

    pub fn apply(&self, x: ArrayView1<'_, f64>) -> Array1<f64> {
        self.weight.dot(&x) + &self.bias
    }

    pub fn out_dim(&self) -> usize {
        self.weight.nrows()
    }
}

/// Gradients of a [`LinearHead`] plus the gradient flowing into its input.
#[derive(Debug, Clone)]
pub struct LinearGrad {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub input: Array1<f64>,
}

pub fn linear_backward(head: &LinearHead, x: ArrayView1<'_, f64>, d_out: ArrayView1<'_, f64>) -> LinearGrad {
    let weight = d_out
        .to_owned()
        .insert_axis(Axis(1))
        .dot(&x.to_owned().insert_axis(Axis(0)));
    LinearGrad { weight, bias: d_out.to_owned(), input: head.weight.t().dot(&d_out) }
}

pub fn fuse(pooled: ArrayView2<'_, f64>, head: &LinearHead) -> Result<Array1<f64>> {
    let mean = pooled.mean_axis(Axis(0)).ok_or(Error::Empty("pooled rows"))?;
    Ok(head.apply(mean.view()))
}

/// Mean of the selected rows of `F` through the head; the empty coalition
/// maps to the zero vector without touching the head.
pub fn subset_fuse(pooled: ArrayView2<'_, f64>, subset: &[usize], head: &LinearHead) -> Array1<f64> {
    if subset.is_empty() {
        return Array1::zeros(head.out_dim());
    }
    let mut mean = Array1::zeros(pooled.ncols());
    for &i in subset {
        mean += &pooled.row(i);
    }
    mean /= subset.len() as f64;
    head.apply(mean.view())
}

/// Two-layer tanh scorer `phi(h) = w2 . tanh(W1 h + b1) + b2`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMlp {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array1<f64>,
    pub b2: f64,
}

#[derive(Debug, Clone)]
pub struct AttentionTrace {
    pub pooled: Array1<f64>,
    pub weights: Vec<f64>,
    hidden: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct AttentionGrad {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array1<f64>,
    pub b2: f64,
}

impl AttentionMlp {
    pub fn scores(&self, bag: ArrayView2<'_, f64>) -> (Vec<f64>, Array2<f64>) {
        let mut hidden = bag.dot(&self.w1.t());
        hidden += &self.b1;
        hidden.mapv_inplace(f64::tanh);
        let scores = hidden.dot(&self.w2).iter().map(|s| s + self.b2).collect();
        (scores, hidden)
    }
}

pub fn attention_pool(bag: ArrayView2<'_, f64>, mlp: &AttentionMlp) -> Result<AttentionTrace> {
    if bag.nrows() == 0 {
        return Err(Error::Empty("bag"));
    }
    let (mut weights, hidden) = mlp.scores(bag);
    softmax_in_place(&mut weights);
    let pooled = Array1::from(weights.clone()).dot(&bag);
    Ok(AttentionTrace { pooled, weights, hidden })
}

pub fn attention_pool_backward(
    trace: &AttentionTrace,
    mlp: &AttentionMlp,
    bag: ArrayView2<'_, f64>,
    d_pooled: ArrayView1<'_, f64>,
) -> AttentionGrad {
    let d_weights: Vec<f64> = bag.rows().into_iter().map(|x| x.dot(&d_pooled)).collect();
    let d_scores = Array1::from(softmax_backward(&trace.weights, &d_weights));
    let b2 = d_scores.sum();
    let w2 = trace.hidden.t().dot(&d_scores);
    // d pre-activation = d_score * w2 * (1 - tanh^2)
    let mut d_pre = trace.hidden.mapv(|h| 1.0 - h * h);
    for (mut row, ds) in d_pre.rows_mut().into_iter().zip(d_scores.iter()) {
        row *= &(&mlp.w2 * *ds);
    }
    let w1 = d_pre.t().dot(&bag);
    let b1 = d_pre.sum_axis(Axis(0));
    AttentionGrad { w1, b1, w2, b2 }
}

/// Weight of every instance for one prior, ranked descending (ties by index).
pub fn top_instances(
    priors_eff: ArrayView2<'_, f64>,
    bag: ArrayView2<'_, f64>,
    alpha: f64,
    prior: usize,
    top_k: usize,
) -> Result<Vec<(usize, f64)>> {
    let k = bag.nrows();
    if top_k == 0 || top_k > k {
        return Err(Error::Invalid(format!("top_k must be in [1, {k}], got {top_k}")));
    }
    if prior >= priors_eff.nrows() {
        return Err(Error::Invalid(format!("prior index {prior} out of range")));
    }
    let trace = prior_guided_pool(priors_eff.slice(ndarray::s![prior..prior + 1, ..]), bag, alpha)?;
    let mut ranked: Vec<(usize, f64)> = trace.weights.row(0).iter().copied().enumerate().collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked.truncate(top_k);
    Ok(ranked)
}

pub(crate) fn check_nonzero_rows(m: ArrayView2<'_, f64>) -> Result<()> {
    if m.rows().into_iter().any(|r| norm(r) == 0.0) {
        return Err(Error::ZeroCosine);
    }
    Ok(())
}
