//! Ordinal survival prompts.
//!
//! `B` learnable base class prompts are interpolated into `C` class prompts
//! with distance-based convex weights; each class prompt is prefixed by a
//! shared learnable context and encoded into one unit vector.

use ndarray::{concatenate, Array1, Array2, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::embeddings::{EncodeTrace, PseudoEncoder};
use crate::error::{Error, Result};
use crate::math::cosine;

pub const DEFAULT_CONTEXT_LEN: usize = 5;
pub const DEFAULT_CLASS_LEN: usize = 4;
pub const DEFAULT_BASES: usize = 4;
/// Standard deviation of the token initialization.
pub const TOKEN_INIT_STD: f64 = 0.02;

/// Phrase metadata for priors and prompts, as shipped in a JSON config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhraseConfig {
    pub context: String,
    pub bases: Vec<String>,
    pub priors: Vec<String>,
}

impl Default for PhraseConfig {
    fn default() -> Self {
        Self {
            context: "a histopathology image suggesting".into(),
            bases: vec![
                "a very poor prognosis".into(),
                "a poor prognosis".into(),
                "a good prognosis".into(),
                "a very good prognosis".into(),
            ],
            priors: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptParams {
    /// `L_ctx x D_emb`
    pub context: Array2<f64>,
    /// `B` base tensors when ordinal, otherwise `C` independent tensors;
    /// each `L_cls x D_emb`.
    pub class_tokens: Vec<Array2<f64>>,
    pub num_classes: usize,
    pub ordinal: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PromptShape {
    pub num_classes: usize,
    pub num_bases: usize,
    pub context_len: usize,
    pub class_len: usize,
    pub token_dim: usize,
    pub ordinal: bool,
}

impl PromptParams {
    pub fn init(shape: PromptShape, seed: u64) -> Result<Self> {
        if shape.context_len == 0 || shape.class_len == 0 {
            return Err(Error::Invalid("context and class lengths must be >= 1".into()));
        }
        if shape.ordinal && shape.num_bases < 2 {
            return Err(Error::Invalid("ordinal prompts need at least 2 bases".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, TOKEN_INIT_STD).unwrap();
        let mut draw = |rows: usize| Array2::from_shape_simple_fn((rows, shape.token_dim), || normal.sample(&mut rng));
        let context = draw(shape.context_len);
        let n = if shape.ordinal { shape.num_bases } else { shape.num_classes };
        let class_tokens = (0..n).map(|_| draw(shape.class_len)).collect();
        Ok(Self { context, class_tokens, num_classes: shape.num_classes, ordinal: shape.ordinal })
    }

    pub fn num_bases(&self) -> usize {
        if self.ordinal {
            self.class_tokens.len()
        } else {
            0
        }
    }
}

/// `C x B` matrix of ordering distances.
#[derive(Debug, Clone, PartialEq)]
pub struct OrderingDistance(pub Array2<f64>);

pub fn default_distance(num_classes: usize, num_bases: usize) -> Result<OrderingDistance> {
    if num_bases < 2 {
        return Err(Error::Invalid("default distance needs B >= 2".into()));
    }
    if num_classes < 2 {
        return Err(Error::Invalid("default distance needs C >= 2".into()));
    }
    let step = (num_classes - 1) as f64 / (num_bases - 1) as f64;
    Ok(OrderingDistance(Array2::from_shape_fn((num_classes, num_bases), |(c, b)| {
        (c as f64 - b as f64 * step).abs()
    })))
}

/// Row-normalized linear interpolation weights `1 - D / (C - 1)`.
pub fn interpolation_weights(dist: &OrderingDistance, num_classes: usize) -> Result<Array2<f64>> {
    let denom = (num_classes - 1) as f64;
    let mut w = dist.0.mapv(|d| 1.0 - d / denom);
    for (c, mut row) in w.rows_mut().into_iter().enumerate() {
        let sum = row.sum();
        if !(sum > 0.0) {
            return Err(Error::DegenerateInterpolation(c + 1));
        }
        row /= sum;
    }
    Ok(w)
}

/// Class token tensors. Ordinal prompts are convex mixtures of the bases;
/// non-ordinal prompts are returned as stored.
pub fn class_prompt_tokens(params: &PromptParams, weights: Option<&Array2<f64>>) -> Result<Vec<Array2<f64>>> {
    if !params.ordinal {
        return Ok(params.class_tokens.clone());
    }
    let w = weights.ok_or_else(|| Error::Invalid("ordinal prompts need interpolation weights".into()))?;
    if w.dim() != (params.num_classes, params.class_tokens.len()) {
        return Err(Error::Shape(format!("weights {:?} for {} classes / {} bases", w.dim(), params.num_classes, params.class_tokens.len())));
    }
    Ok(w.rows()
        .into_iter()
        .map(|row| {
            let mut acc = Array2::zeros(params.class_tokens[0].raw_dim());
            for (wb, base) in row.iter().zip(&params.class_tokens) {
                acc.scaled_add(*wb, base);
            }
            acc
        })
        .collect())
}

/// Encoded prompts with the per-class encoder traces.
#[derive(Debug, Clone)]
pub struct PromptTrace {
    /// `C x D`, unit-norm rows.
    pub prompts: Array2<f64>,
    traces: Vec<EncodeTrace>,
}

/// Gradients for [`PromptParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct PromptGrad {
    pub context: Array2<f64>,
    pub class_tokens: Vec<Array2<f64>>,
}

/// Holds the interpolation weights so they are computed once per model.
#[derive(Debug, Clone)]
pub struct PromptBuilder {
    pub weights: Option<Array2<f64>>,
}

impl PromptBuilder {
    pub fn new(params: &PromptParams) -> Result<Self> {
        let weights = if params.ordinal {
            let dist = default_distance(params.num_classes, params.class_tokens.len())?;
            Some(interpolation_weights(&dist, params.num_classes)?)
        } else {
            None
        };
        Ok(Self { weights })
    }

    pub fn forward(&self, params: &PromptParams, encoder: &PseudoEncoder) -> Result<PromptTrace> {
        let classes = class_prompt_tokens(params, self.weights.as_ref())?;
        let mut prompts = Array2::zeros((classes.len(), encoder.out_dim()));
        let mut traces = Vec::with_capacity(classes.len());
        for (c, tokens) in classes.iter().enumerate() {
            let full = concatenate(Axis(0), &[params.context.view(), tokens.view()])
                .map_err(|e| Error::Shape(e.to_string()))?;
            let t = encoder.encode_traced(full.view())?;
            prompts.row_mut(c).assign(&t.output);
            traces.push(t);
        }
        Ok(PromptTrace { prompts, traces })
    }

    pub fn backward(
        &self,
        params: &PromptParams,
        encoder: &PseudoEncoder,
        trace: &PromptTrace,
        d_prompts: ArrayView2<'_, f64>,
    ) -> PromptGrad {
        let dim = params.context.ncols();
        let mut d_context_row = Array1::zeros(dim);
        let mut class_rows: Vec<Array1<f64>> = Vec::with_capacity(trace.traces.len());
        for (c, t) in trace.traces.iter().enumerate() {
            let row = encoder.backward_row(t, d_prompts.row(c));
            d_context_row += &row;
            class_rows.push(row);
        }
        let broadcast = |row: &Array1<f64>, rows: usize| {
            let mut m = Array2::zeros((rows, dim));
            for mut r in m.rows_mut() {
                r.assign(row);
            }
            m
        };
        let class_len = params.class_tokens[0].nrows();
        let class_tokens = match &self.weights {
            Some(w) => (0..params.class_tokens.len())
                .map(|b| {
                    let mut acc = Array1::zeros(dim);
                    for (c, row) in class_rows.iter().enumerate() {
                        acc.scaled_add(w[[c, b]], row);
                    }
                    broadcast(&acc, class_len)
                })
                .collect(),
            None => class_rows.iter().map(|r| broadcast(r, class_len)).collect(),
        };
        PromptGrad { context: broadcast(&d_context_row, params.context.nrows()), class_tokens }
    }
}

pub fn survival_prompts(params: &PromptParams, encoder: &PseudoEncoder) -> Result<Array2<f64>> {
    Ok(PromptBuilder::new(params)?.forward(params, encoder)?.prompts)
}

/// Normalizes a precomputed `C x D` prompt table (fixed, non-learnable prompts).
pub fn prompts_from_table(table: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    let mut out = table.to_owned();
    for mut row in out.rows_mut() {
        let n = row.dot(&row).sqrt();
        if n == 0.0 {
            return Err(Error::ZeroCosine);
        }
        row /= n;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrdinalityReport {
    /// Pairwise cosine similarities, `C x C` row-major.
    pub heatmap: Vec<Vec<f64>>,
    /// Triples `(c, i, j)` with `|c-i| < |c-j|` and untied similarities.
    pub comparable: usize,
    pub correct: usize,
    pub accuracy: Option<f64>,
}

pub fn prompt_ordinality_report(prompts: ArrayView2<'_, f64>) -> Result<OrdinalityReport> {
    let c = prompts.nrows();
    if c < 3 {
        return Err(Error::Invalid(format!("ordinality report needs C >= 3, got {c}")));
    }
    let mut heat = vec![vec![0.0; c]; c];
    for i in 0..c {
        for j in 0..c {
            heat[i][j] = cosine(prompts.row(i), prompts.row(j))?;
        }
    }
    let (mut comparable, mut correct) = (0, 0);
    for a in 0..c {
        for i in 0..c {
            for j in 0..c {
                if i == a || j == a || a.abs_diff(i) >= a.abs_diff(j) {
                    continue;
                }
                let (near, far) = (heat[a][i], heat[a][j]);
                if (near - far).abs() <= 1e-12 {
                    continue;
                }
                comparable += 1;
                if near > far {
                    correct += 1;
                }
            }
        }
    }
    let accuracy = (comparable > 0).then(|| correct as f64 / comparable as f64);
    Ok(OrdinalityReport { heatmap: heat, comparable, correct, accuracy })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};
    use proptest::prelude::*;
    use rand_distr::StandardNormal;

    fn randn(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_simple_fn((rows, cols), || StandardNormal.sample(&mut rng))
    }

    #[test]
    fn distance_examples() {
        let d = default_distance(8, 4).unwrap().0;
        assert_eq!(d[[0, 0]], 0.0);
        assert!(d[[7, 3]].abs() < 1e-15);
        assert!((d[[3, 1]] - 2.0 / 3.0).abs() < 1e-15);
        let d = default_distance(5, 2).unwrap().0;
        assert_eq!(d[[2, 0]], 2.0);
        assert_eq!(d[[2, 1]], 2.0);
        assert!(default_distance(5, 1).is_err());
    }

    #[test]
    fn weight_examples() {
        let w = interpolation_weights(&default_distance(5, 2).unwrap(), 5).unwrap();
        assert_eq!(w.row(2).to_vec(), vec![0.5, 0.5]);
        let row0 = w.row(0);
        assert!(row0[0] > row0[1]);
    }

    #[test]
    fn weights_match_formula_oracle() {
        let (c, b) = (8usize, 4usize);
        let w = interpolation_weights(&default_distance(c, b).unwrap(), c).unwrap();
        for ci in 1..=c {
            let raw: Vec<f64> = (1..=b)
                .map(|bi| {
                    let d = ((ci - 1) as f64 - (bi - 1) as f64 * (c - 1) as f64 / (b - 1) as f64).abs();
                    1.0 - d / (c - 1) as f64
                })
                .collect();
            let s: f64 = raw.iter().sum();
            for bi in 0..b {
                let want = raw[bi] / s;
                assert!((w[[ci - 1, bi]] - want).abs() <= 1e-12 * want.abs().max(1e-300));
            }
        }
    }

    #[test]
    fn degenerate_row_rejected() {
        let d = OrderingDistance(array![[4.0, 4.0], [0.0, 1.0]]);
        assert!(matches!(interpolation_weights(&d, 5), Err(Error::DegenerateInterpolation(1))));
    }

    #[test]
    fn square_case_is_identity() {
        let w = interpolation_weights(&default_distance(5, 5).unwrap(), 5).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                // off-diagonal raw weights are positive, so "identity" means the
                // diagonal dominates every row
                if i != j {
                    assert!(w[[i, i]] > w[[i, j]]);
                }
            }
        }
    }

    fn params(c: usize, b: usize, dim: usize, seed: u64) -> PromptParams {
        PromptParams::init(
            PromptShape { num_classes: c, num_bases: b, context_len: 2, class_len: 3, token_dim: dim, ordinal: true },
            seed,
        )
        .unwrap()
    }

    #[test]
    fn one_hot_weights_select_bases() {
        let p = params(3, 3, 4, 1);
        let w = array![[0.0, 1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]];
        let cls = class_prompt_tokens(&p, Some(&w)).unwrap();
        assert_eq!(cls[0], p.class_tokens[1]);
        assert_eq!(cls[1], p.class_tokens[0]);
        assert_eq!(cls[2], p.class_tokens[2]);
    }

    #[test]
    fn identical_bases_give_identical_classes() {
        let mut p = params(6, 3, 4, 2);
        let b0 = p.class_tokens[0].clone();
        p.class_tokens = vec![b0.clone(), b0.clone(), b0.clone()];
        let w = PromptBuilder::new(&p).unwrap().weights.unwrap();
        for cls in class_prompt_tokens(&p, Some(&w)).unwrap() {
            for (a, b) in cls.iter().zip(b0.iter()) {
                assert!((a - b).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn two_base_convex_combination() {
        let p = params(5, 2, 4, 3);
        let w = PromptBuilder::new(&p).unwrap().weights.unwrap();
        let cls = class_prompt_tokens(&p, Some(&w)).unwrap();
        for c in 0..5 {
            let lam = c as f64 / 4.0;
            let want = &p.class_tokens[0] * (1.0 - lam) + &p.class_tokens[1] * lam;
            for (a, b) in cls[c].iter().zip(want.iter()) {
                assert!((a - b).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn class_tokens_are_linear_in_bases() {
        let p = params(7, 4, 3, 4);
        let w = PromptBuilder::new(&p).unwrap().weights.unwrap();
        let mut scaled = p.clone();
        for t in &mut scaled.class_tokens {
            *t *= -2.5;
        }
        let a = class_prompt_tokens(&p, Some(&w)).unwrap();
        let b = class_prompt_tokens(&scaled, Some(&w)).unwrap();
        for (x, y) in a.iter().zip(&b) {
            for (u, v) in x.iter().zip(y.iter()) {
                assert!((u * -2.5 - v).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn identical_class_tokens_identical_prompts() {
        let mut p = params(2, 2, 6, 5);
        p.class_tokens[1] = p.class_tokens[0].clone();
        let enc = PseudoEncoder::new(9, 6, 5);
        let f = survival_prompts(&p, &enc).unwrap();
        assert_eq!(f.row(0), f.row(1));
        for row in f.rows() {
            assert!((row.dot(&row) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn swapping_bases_reverses_prompts() {
        let p = params(5, 2, 6, 6);
        let mut swapped = p.clone();
        swapped.class_tokens.swap(0, 1);
        let enc = PseudoEncoder::new(9, 6, 5);
        let a = survival_prompts(&p, &enc).unwrap();
        let b = survival_prompts(&swapped, &enc).unwrap();
        for c in 0..5 {
            for (x, y) in a.row(c).iter().zip(b.row(4 - c).iter()) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn prompt_gradients_match_finite_differences() {
        let p = params(4, 3, 6, 7);
        let enc = PseudoEncoder::new(3, 6, 5);
        let up = randn(4, 5, 8);
        let builder = PromptBuilder::new(&p).unwrap();
        let trace = builder.forward(&p, &enc).unwrap();
        let g = builder.backward(&p, &enc, &trace, up.view());
        let objective = |q: &PromptParams| (&builder.forward(q, &enc).unwrap().prompts * &up).sum();
        let h = 1e-6;
        let rel = |analytic: &Array2<f64>, perturb: &dyn Fn(&mut PromptParams, usize, usize, f64)| {
            let (mut num, mut den) = (0.0, 0.0);
            for i in 0..analytic.nrows() {
                for j in 0..analytic.ncols() {
                    let mut qp = p.clone();
                    perturb(&mut qp, i, j, h);
                    let mut qm = p.clone();
                    perturb(&mut qm, i, j, -h);
                    let fd = (objective(&qp) - objective(&qm)) / (2.0 * h);
                    num += (fd - analytic[[i, j]]).powi(2);
                    den += fd.powi(2).max(analytic[[i, j]].powi(2));
                }
            }
            (num / den).sqrt()
        };
        let e = rel(&g.context, &|q, i, j, h| q.context[[i, j]] += h);
        assert!(e < 1e-4, "context {e}");
        for b in 0..3 {
            let e = rel(&g.class_tokens[b], &|q, i, j, h| q.class_tokens[b][[i, j]] += h);
            assert!(e < 1e-4, "base {b}: {e}");
        }
    }

    #[test]
    fn non_ordinal_has_independent_tokens() {
        let p = PromptParams::init(
            PromptShape { num_classes: 6, num_bases: 4, context_len: 2, class_len: 2, token_dim: 4, ordinal: false },
            1,
        )
        .unwrap();
        assert_eq!(p.class_tokens.len(), 6);
        assert!(PromptBuilder::new(&p).unwrap().weights.is_none());
    }

    #[test]
    fn ramp_prompts_are_perfectly_ordinal() {
        // 2-D prompts sweeping an arc: similarity decays with class distance
        let c = 6;
        let f = Array2::from_shape_fn((c, 2), |(i, j)| {
            let a = i as f64 * 0.5;
            if j == 0 {
                a.cos()
            } else {
                a.sin()
            }
        });
        let r = prompt_ordinality_report(f.view()).unwrap();
        assert_eq!(r.accuracy, Some(1.0));
        assert_eq!(r.comparable, r.correct);
    }

    #[test]
    fn identical_prompts_have_no_comparable_triples() {
        let f = Array2::from_elem((4, 3), 1.0);
        let r = prompt_ordinality_report(f.view()).unwrap();
        assert_eq!(r.comparable, 0);
        assert_eq!(r.accuracy, None);
    }

    #[test]
    fn ranking_accuracy_matches_triple_enumeration() {
        let f = randn(4, 5, 77);
        let r = prompt_ordinality_report(f.view()).unwrap();
        let cos = |a: usize, b: usize| {
            let (x, y) = (f.row(a), f.row(b));
            x.dot(&y) / (x.dot(&x).sqrt() * y.dot(&y).sqrt())
        };
        let (mut n, mut ok) = (0, 0);
        for c in 0..4i32 {
            for i in 0..4i32 {
                for j in 0..4i32 {
                    if i != c && j != c && (c - i).abs() < (c - j).abs() {
                        n += 1;
                        if cos(c as usize, i as usize) > cos(c as usize, j as usize) {
                            ok += 1;
                        }
                    }
                }
            }
        }
        assert_eq!(r.comparable, n);
        assert_eq!(r.correct, ok);
    }

    proptest! {
        #[test]
        fn weight_rows_are_stochastic(c in 2usize..15, b in 2usize..8) {
            let w = interpolation_weights(&default_distance(c, b).unwrap(), c).unwrap();
            for row in w.rows() {
                prop_assert!(row.iter().all(|&v| v >= 0.0));
                prop_assert!((row.sum() - 1.0).abs() < 1e-12);
            }
        }
    }
}
