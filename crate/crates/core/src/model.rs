//! Full model state, batched forward pass and reverse-mode gradients.
//!
//! The chain is: priors -> pooled bag -> fused image vector; tokens ->
//! interpolated class prompts -> encoded prompts; both -> scaled cosine
//! scores -> incidence (or hazard) -> loss. Gradients are derived by hand
//! for every learnable tensor and checked against finite differences in
//! the tests and by `vlsa gradcheck`.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::aggregation::{
    attention_pool, attention_pool_backward, effective_priors, linear_backward, prior_guided_pool,
    prior_guided_pool_backward, AggregatorConfig, AggregatorKind, AttentionMlp, AttentionTrace, LinearHead,
    PoolTrace, PriorSet,
};
use crate::embeddings::PseudoEncoder;
use crate::error::{Error, Result};
use crate::labels::{DiscreteLabel, TimeGrid};
use crate::losses::{hazard_nll, total_loss, total_loss_grad, LossConfig};
use crate::math::softmax_backward;
use crate::prediction::{
    hazard_from_scores, incidence_from_scores, similarity_backward, similarity_scores, tau_from_log, HazardResult,
    HeadKind, IncidenceResult, INIT_TAU, MAX_TAU,
};
use crate::prompts::{PromptBuilder, PromptGrad, PromptParams, PromptShape, PromptTrace};

/// Frozen hyper-parameters that fix the model's shapes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub aggregator: AggregatorConfig,
    /// Number of prior / prototype queries `M`.
    pub num_queries: usize,
    /// Shared embedding width `D`.
    pub embed_dim: usize,
    pub token_dim: usize,
    pub context_len: usize,
    pub class_len: usize,
    pub num_bases: usize,
    pub ordinal_prompts: bool,
    pub head: HeadKind,
    pub encoder_seed: u64,
}

impl ModelConfig {
    pub fn new(embed_dim: usize, num_queries: usize) -> Self {
        Self {
            aggregator: AggregatorConfig::default(),
            num_queries,
            embed_dim,
            token_dim: PseudoEncoder::DEFAULT_TOKEN_DIM,
            context_len: crate::prompts::DEFAULT_CONTEXT_LEN,
            class_len: crate::prompts::DEFAULT_CLASS_LEN,
            num_bases: crate::prompts::DEFAULT_BASES,
            ordinal_prompts: true,
            head: HeadKind::Incidence,
            encoder_seed: 0,
        }
    }
}

/// Learnable part of the bag aggregator.
#[derive(Debug, Clone, PartialEq)]
pub enum Aggregator {
    /// Frozen prior embeddings plus learnable offsets.
    PriorGuided(PriorSet),
    /// Fully learnable query matrix.
    Prototypes(Array2<f64>),
    Attention(AttentionMlp),
}

#[derive(Debug, Clone)]
pub struct ModelState {
    pub config: ModelConfig,
    pub grid: TimeGrid,
    pub aggregator: Aggregator,
    pub prompts: PromptParams,
    pub head: LinearHead,
    pub log_tau: f64,
    encoder: PseudoEncoder,
    builder: PromptBuilder,
}

/// Gradients with the same layout as the learnable parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    /// Offsets / prototypes: one tensor. Attention: `w1`, `b1`, `w2`, `b2`
    /// (vectors stored as single rows).
    pub aggregator: Vec<Array2<f64>>,
    pub context: Array2<f64>,
    pub class_tokens: Vec<Array2<f64>>,
    pub head_weight: Array2<f64>,
    pub head_bias: Array1<f64>,
    pub log_tau: f64,
}

impl Gradients {
    /// Flattened views in the same order as [`ModelState::params_mut`].
    pub fn slices(&self) -> Vec<(String, &[f64])> {
        let mut out: Vec<(String, &[f64])> = Vec::new();
        for (i, t) in self.aggregator.iter().enumerate() {
            out.push((format!("aggregator.{i}"), t.as_slice().unwrap()));
        }
        out.push(("context".into(), self.context.as_slice().unwrap()));
        for (i, t) in self.class_tokens.iter().enumerate() {
            out.push((format!("class_tokens.{i}"), t.as_slice().unwrap()));
        }
        out.push(("head.weight".into(), self.head_weight.as_slice().unwrap()));
        out.push(("head.bias".into(), self.head_bias.as_slice().unwrap()));
        out.push(("log_tau".into(), std::slice::from_ref(&self.log_tau)));
        out
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for t in &mut self.aggregator {
            out.push(t.as_slice_mut().unwrap());
        }
        out.push(self.context.as_slice_mut().unwrap());
        for t in &mut self.class_tokens {
            out.push(t.as_slice_mut().unwrap());
        }
        out.push(self.head_weight.as_slice_mut().unwrap());
        out.push(self.head_bias.as_slice_mut().unwrap());
        out.push(std::slice::from_mut(&mut self.log_tau));
        out
    }

    /// `self += other * scale`
    pub fn add_scaled(&mut self, other: &Gradients, scale: f64) {
        for (a, b) in self.slices_mut().into_iter().zip(other.slices()) {
            for (x, y) in a.iter_mut().zip(b.1) {
                *x += y * scale;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for a in self.slices_mut() {
            a.iter_mut().for_each(|x| *x *= s);
        }
    }

    fn add_prompt_grad(&mut self, g: &PromptGrad) {
        self.context += &g.context;
        for (a, b) in self.class_tokens.iter_mut().zip(&g.class_tokens) {
            *a += b;
        }
    }
}

/// Image-side intermediate values for one bag.
#[derive(Debug, Clone)]
enum ImageTrace {
    Queries { queries: Array2<f64>, pool: PoolTrace, fused_input: Array1<f64> },
    Attention { pool: AttentionTrace },
}

#[derive(Debug, Clone)]
struct BagTrace<'a> {
    bag: ArrayView2<'a, f64>,
    image: ImageTrace,
    f_image: Array1<f64>,
    cosines: Vec<f64>,
    /// `d loss / d logits` for this bag.
    d_logits: Vec<f64>,
}

/// Recorded forward evaluation over a batch of bags.
#[derive(Debug, Clone)]
pub struct ForwardTrace<'a> {
    prompts: PromptTrace,
    tau: f64,
    pub tau_prime: f64,
    bags: Vec<BagTrace<'a>>,
    /// Per-bag loss values in batch order.
    pub losses: Vec<f64>,
}

impl ForwardTrace<'_> {
    pub fn mean_loss(&self) -> f64 {
        self.losses.iter().sum::<f64>() / self.losses.len() as f64
    }
}

/// Model output for one bag.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub incidence: IncidenceResult,
    pub hazard: Option<HazardResult>,
    pub f_image: Array1<f64>,
}

impl Prediction {
    pub fn risk(&self) -> f64 {
        self.hazard.as_ref().map_or(self.incidence.risk, |h| h.risk)
    }

    /// Survival past the end of each bin.
    pub fn survival(&self) -> &[f64] {
        self.hazard.as_ref().map_or(&self.incidence.survival, |h| &h.survival)
    }
}

impl ModelState {
    /// Fresh model. `priors` is required for the prior-guided aggregator and
    /// ignored otherwise.
    pub fn new(config: ModelConfig, priors: Option<PriorSet>, grid: TimeGrid, seed: u64) -> Result<Self> {
        let d = config.embed_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let aggregator = match config.aggregator.kind {
            AggregatorKind::PriorGuided => {
                let p = priors.ok_or_else(|| Error::Invalid("prior-guided aggregation needs priors".into()))?;
                if p.base.ncols() != d {
                    return Err(Error::Shape(format!("prior dim {} != embed dim {d}", p.base.ncols())));
                }
                Aggregator::PriorGuided(p)
            }
            AggregatorKind::LearnablePrototypes => {
                let scale = 1.0 / (d as f64).sqrt();
                Aggregator::Prototypes(Array2::from_shape_simple_fn((config.num_queries, d), || {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    z * scale
                }))
            }
            AggregatorKind::Attention => {
                let h = config.aggregator.attention_hidden;
                let a = 1.0 / (d as f64).sqrt();
                let b = 1.0 / (h as f64).sqrt();
                let u1 = Uniform::new_inclusive(-a, a).unwrap();
                let u2 = Uniform::new_inclusive(-b, b).unwrap();
                Aggregator::Attention(AttentionMlp {
                    w1: Array2::from_shape_simple_fn((h, d), || u1.sample(&mut rng)),
                    b1: Array1::from_shape_simple_fn(h, || u1.sample(&mut rng)),
                    w2: Array1::from_shape_simple_fn(h, || u2.sample(&mut rng)),
                    b2: u2.sample(&mut rng),
                })
            }
        };
        let shape = PromptShape {
            num_classes: grid.num_classes(),
            num_bases: config.num_bases,
            context_len: config.context_len,
            class_len: config.class_len,
            token_dim: config.token_dim,
            ordinal: config.ordinal_prompts,
        };
        let prompts = PromptParams::init(shape, rng.next_seed())?;
        Self::from_parts(config, grid, aggregator, prompts, LinearHead::identity(d), INIT_TAU.ln())
    }

    pub fn from_parts(
        config: ModelConfig,
        grid: TimeGrid,
        aggregator: Aggregator,
        prompts: PromptParams,
        head: LinearHead,
        log_tau: f64,
    ) -> Result<Self> {
        if prompts.num_classes != grid.num_classes() {
            return Err(Error::Shape(format!(
                "{} prompt classes vs {} grid bins",
                prompts.num_classes,
                grid.num_classes()
            )));
        }
        let encoder = PseudoEncoder::new(config.encoder_seed, config.token_dim, config.embed_dim);
        let builder = PromptBuilder::new(&prompts)?;
        Ok(Self { config, grid, aggregator, prompts, head, log_tau, encoder, builder })
    }

    pub fn num_classes(&self) -> usize {
        self.grid.num_classes()
    }

    pub fn tau(&self) -> f64 {
        tau_from_log(self.log_tau)
    }

    pub fn encoder(&self) -> &PseudoEncoder {
        &self.encoder
    }

    pub fn prompt_builder(&self) -> &PromptBuilder {
        &self.builder
    }

    pub fn prior_texts(&self) -> Vec<String> {
        match &self.aggregator {
            Aggregator::PriorGuided(p) => p.texts.clone(),
            _ => Vec::new(),
        }
    }

    /// Learnable tensors as `(name, slice)` pairs in a fixed order.
    pub fn params(&self) -> Vec<(String, &[f64])> {
        let mut out: Vec<(String, &[f64])> = Vec::new();
        match &self.aggregator {
            Aggregator::PriorGuided(p) => out.push(("prior_offsets".into(), p.offsets.as_slice().unwrap())),
            Aggregator::Prototypes(m) => out.push(("prototypes".into(), m.as_slice().unwrap())),
            Aggregator::Attention(a) => {
                out.push(("attention.w1".into(), a.w1.as_slice().unwrap()));
                out.push(("attention.b1".into(), a.b1.as_slice().unwrap()));
                out.push(("attention.w2".into(), a.w2.as_slice().unwrap()));
                out.push(("attention.b2".into(), std::slice::from_ref(&a.b2)));
            }
        }
        out.push(("context".into(), self.prompts.context.as_slice().unwrap()));
        for (i, t) in self.prompts.class_tokens.iter().enumerate() {
            out.push((format!("class_tokens.{i}"), t.as_slice().unwrap()));
        }
        out.push(("head.weight".into(), self.head.weight.as_slice().unwrap()));
        out.push(("head.bias".into(), self.head.bias.as_slice().unwrap()));
        out.push(("log_tau".into(), std::slice::from_ref(&self.log_tau)));
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        match &mut self.aggregator {
            Aggregator::PriorGuided(p) => out.push(p.offsets.as_slice_mut().unwrap()),
            Aggregator::Prototypes(m) => out.push(m.as_slice_mut().unwrap()),
            Aggregator::Attention(a) => {
                out.push(a.w1.as_slice_mut().unwrap());
                out.push(a.b1.as_slice_mut().unwrap());
                out.push(a.w2.as_slice_mut().unwrap());
                out.push(std::slice::from_mut(&mut a.b2));
            }
        }
        out.push(self.prompts.context.as_slice_mut().unwrap());
        for t in &mut self.prompts.class_tokens {
            out.push(t.as_slice_mut().unwrap());
        }
        out.push(self.head.weight.as_slice_mut().unwrap());
        out.push(self.head.bias.as_slice_mut().unwrap());
        out.push(std::slice::from_mut(&mut self.log_tau));
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.params().iter().map(|(_, s)| s.len()).sum()
    }

    pub fn zero_gradients(&self) -> Gradients {
        let aggregator = match &self.aggregator {
            Aggregator::PriorGuided(p) => vec![Array2::zeros(p.offsets.raw_dim())],
            Aggregator::Prototypes(m) => vec![Array2::zeros(m.raw_dim())],
            Aggregator::Attention(a) => vec![
                Array2::zeros(a.w1.raw_dim()),
                Array2::zeros((1, a.b1.len())),
                Array2::zeros((1, a.w2.len())),
                Array2::zeros((1, 1)),
            ],
        };
        Gradients {
            aggregator,
            context: Array2::zeros(self.prompts.context.raw_dim()),
            class_tokens: self.prompts.class_tokens.iter().map(|t| Array2::zeros(t.raw_dim())).collect(),
            head_weight: Array2::zeros(self.head.weight.raw_dim()),
            head_bias: Array1::zeros(self.head.bias.len()),
            log_tau: 0.0,
        }
    }

    /// Query matrix used by query-based pooling (effective priors or prototypes).
    pub fn queries(&self) -> Result<Option<Array2<f64>>> {
        match &self.aggregator {
            Aggregator::PriorGuided(p) => Ok(Some(effective_priors(p)?)),
            Aggregator::Prototypes(m) => Ok(Some(m.clone())),
            Aggregator::Attention(_) => Ok(None),
        }
    }

    /// Encoded survival prompts `C x D` for the current parameters.
    pub fn prompt_trace(&self) -> Result<PromptTrace> {
        self.builder.forward(&self.prompts, &self.encoder)
    }

    fn image_forward(&self, bag: ArrayView2<'_, f64>) -> Result<(ImageTrace, Array1<f64>)> {
        if bag.ncols() != self.config.embed_dim {
            return Err(Error::Shape(format!("bag dim {} != {}", bag.ncols(), self.config.embed_dim)));
        }
        match &self.aggregator {
            Aggregator::Attention(mlp) => {
                let pool = attention_pool(bag, mlp)?;
                let f = self.head.apply(pool.pooled.view());
                Ok((ImageTrace::Attention { pool }, f))
            }
            _ => {
                let queries = self.queries()?.expect("query aggregator");
                let pool = prior_guided_pool(queries.view(), bag, self.config.aggregator.alpha)?;
                let fused_input = pool.pooled.mean_axis(Axis(0)).ok_or(Error::Empty("queries"))?;
                let f = self.head.apply(fused_input.view());
                Ok((ImageTrace::Queries { queries, pool, fused_input }, f))
            }
        }
    }

    /// Pooled per-query representations `F` (query aggregators only).
    pub fn pooled(&self, bag: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        match self.image_forward(bag)?.0 {
            ImageTrace::Queries { pool, .. } => Ok(pool.pooled),
            ImageTrace::Attention { .. } => Err(Error::Invalid("attention pooling has no per-prior representations".into())),
        }
    }

    /// Prediction from an already fused image vector.
    pub fn predict_from_image(&self, f_image: Array1<f64>, prompts: ArrayView2<'_, f64>) -> Result<Prediction> {
        let cos = similarity_scores(f_image.view(), prompts)?;
        let tau = self.tau();
        Ok(match self.config.head {
            HeadKind::Incidence => Prediction { incidence: incidence_from_scores(&cos, tau), hazard: None, f_image },
            HeadKind::Hazard => {
                let h = hazard_from_scores(&cos, tau);
                Prediction { incidence: h.to_incidence(), hazard: Some(h), f_image }
            }
        })
    }

    pub fn predict(&self, bag: ArrayView2<'_, f64>, prompts: ArrayView2<'_, f64>) -> Result<Prediction> {
        let (_, f) = self.image_forward(bag)?;
        self.predict_from_image(f, prompts)
    }

    /// Records a forward evaluation over `batch`. `tau_prime` overrides the
    /// target temperature snapshot (defaults to the current `tau`).
    pub fn forward<'a>(
        &self,
        batch: &[(ArrayView2<'a, f64>, DiscreteLabel)],
        loss: &LossConfig,
        tau_prime: Option<f64>,
    ) -> Result<ForwardTrace<'a>> {
        let prompts = self.prompt_trace()?;
        self.forward_with_prompts(prompts, batch, loss, tau_prime)
    }

    pub fn forward_with_prompts<'a>(
        &self,
        prompts: PromptTrace,
        batch: &[(ArrayView2<'a, f64>, DiscreteLabel)],
        loss: &LossConfig,
        tau_prime: Option<f64>,
    ) -> Result<ForwardTrace<'a>> {
        let tau = self.tau();
        let tau_prime = tau_prime.unwrap_or(tau);
        let c = self.num_classes();
        let mut bags = Vec::with_capacity(batch.len());
        let mut losses = Vec::with_capacity(batch.len());
        for (bag, label) in batch {
            if label.class == 0 || label.class > c {
                return Err(Error::Invalid(format!("label class {} outside [1, {c}]", label.class)));
            }
            let (image, f_image) = self.image_forward(*bag)?;
            let cosines = similarity_scores(f_image.view(), prompts.prompts.view())?;
            let (value, d_logits) = match self.config.head {
                HeadKind::Incidence => {
                    let y = incidence_from_scores(&cosines, tau).y_hat;
                    let value = total_loss(&y, *label, loss, tau_prime);
                    let dy = total_loss_grad(&y, *label, loss, tau_prime);
                    (value, softmax_backward(&y, &dy))
                }
                HeadKind::Hazard => {
                    let logits: Vec<f64> = cosines.iter().map(|c| tau * c).collect();
                    hazard_nll(&logits, *label)
                }
            };
            losses.push(value);
            bags.push(BagTrace { bag: *bag, image, f_image, cosines, d_logits });
        }
        Ok(ForwardTrace { prompts, tau, tau_prime, bags, losses })
    }

    /// Gradient of the batch-mean loss recorded in `trace`.
    pub fn backward(&self, trace: &ForwardTrace<'_>) -> Gradients {
        let mut grads = self.zero_gradients();
        let n = trace.bags.len().max(1) as f64;
        let mut d_prompts = Array2::zeros(trace.prompts.prompts.raw_dim());
        let mut d_tau = 0.0;
        for b in &trace.bags {
            let d_logits: Vec<f64> = b.d_logits.iter().map(|g| g / n).collect();
            d_tau += d_logits.iter().zip(&b.cosines).map(|(g, c)| g * c).sum::<f64>();
            let d_cos: Vec<f64> = d_logits.iter().map(|g| g * trace.tau).collect();
            let (d_image, d_p) = similarity_backward(b.f_image.view(), trace.prompts.prompts.view(), &b.cosines, &d_cos);
            d_prompts += &d_p;
            self.image_backward(b, d_image, &mut grads);
        }
        // tau is clamped at MAX_TAU; no gradient flows through the clamp
        if self.log_tau.exp() < MAX_TAU {
            grads.log_tau = d_tau * trace.tau;
        }
        let pg = self.builder.backward(&self.prompts, &self.encoder, &trace.prompts, d_prompts.view());
        grads.add_prompt_grad(&pg);
        grads
    }

    fn image_backward(&self, b: &BagTrace<'_>, d_image: Array1<f64>, grads: &mut Gradients) {
        match (&b.image, &self.aggregator) {
            (ImageTrace::Queries { queries, pool, fused_input }, _) => {
                let lg = linear_backward(&self.head, fused_input.view(), d_image.view());
                grads.head_weight += &lg.weight;
                grads.head_bias += &lg.bias;
                let m = queries.nrows();
                let mut d_pooled = Array2::zeros((m, queries.ncols()));
                let row = &lg.input / m as f64;
                for mut r in d_pooled.rows_mut() {
                    r.assign(&row);
                }
                let dq = prior_guided_pool_backward(pool, queries.view(), b.bag, d_pooled.view());
                grads.aggregator[0] += &dq;
            }
            (ImageTrace::Attention { pool }, Aggregator::Attention(mlp)) => {
                let lg = linear_backward(&self.head, pool.pooled.view(), d_image.view());
                grads.head_weight += &lg.weight;
                grads.head_bias += &lg.bias;
                let ag = attention_pool_backward(pool, mlp, b.bag, lg.input.view());
                grads.aggregator[0] += &ag.w1;
                grads.aggregator[1].row_mut(0).scaled_add(1.0, &ag.b1);
                grads.aggregator[2].row_mut(0).scaled_add(1.0, &ag.w2);
                grads.aggregator[3][[0, 0]] += ag.b2;
            }
            (ImageTrace::Attention { .. }, _) => unreachable!("attention trace from a query aggregator"),
        }
    }

    /// Batch-mean loss and its gradient in one call.
    pub fn loss_and_gradients(
        &self,
        batch: &[(ArrayView2<'_, f64>, DiscreteLabel)],
        loss: &LossConfig,
    ) -> Result<(f64, Gradients)> {
        let trace = self.forward(batch, loss, None)?;
        Ok((trace.mean_loss(), self.backward(&trace)))
    }
}

trait NextSeed {
    fn next_seed(&mut self) -> u64;
}

impl NextSeed for ChaCha8Rng {
    fn next_seed(&mut self) -> u64 {
        use rand::RngCore;
        self.next_u64()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::labels::GridScheme;

    fn randn(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_simple_fn((rows, cols), || StandardNormal.sample(&mut rng))
    }

    fn tiny(kind: AggregatorKind, head: HeadKind, ordinal: bool) -> ModelState {
        let mut cfg = ModelConfig::new(8, 2);
        cfg.aggregator = AggregatorConfig { kind, alpha: 3.0, attention_hidden: 4 };
        cfg.token_dim = 6;
        cfg.context_len = 2;
        cfg.class_len = 2;
        cfg.num_bases = 2;
        cfg.ordinal_prompts = ordinal;
        cfg.head = head;
        let grid = TimeGrid::new(GridScheme::Uniform, vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let priors = PriorSet::new(randn(2, 8, 1), vec!["a".into(), "b".into()]).unwrap();
        let mut m = ModelState::new(cfg, Some(priors), grid, 5).unwrap();
        // move off the symmetric initialization so every path carries gradient
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for s in m.params_mut() {
            for v in s.iter_mut() {
                let z: f64 = StandardNormal.sample(&mut rng);
                *v += 0.1 * z;
            }
        }
        m.log_tau = 1.0;
        m
    }

    fn check_all(m: &ModelState, loss: &LossConfig) {
        let bags = [randn(5, 8, 10), randn(4, 8, 11)];
        let batch = vec![
            (bags[0].view(), DiscreteLabel { class: 2, event: true }),
            (bags[1].view(), DiscreteLabel { class: 2, event: false }),
        ];
        let tau_prime = m.tau();
        let trace = m.forward(&batch, loss, Some(tau_prime)).unwrap();
        let g = m.backward(&trace);
        let h = 1e-6;
        for (k, (name, analytic)) in g.slices().into_iter().enumerate() {
            let (mut num, mut den) = (0.0, 0.0);
            for i in 0..analytic.len() {
                let eval = |delta: f64| {
                    let mut q = m.clone();
                    q.params_mut()[k][i] += delta;
                    q.forward(&batch, loss, Some(tau_prime)).unwrap().mean_loss()
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                num += (fd - analytic[i]).powi(2);
                den += fd.powi(2).max(analytic[i].powi(2));
            }
            // the attention bias is shift-invariant under softmax: both sides ~0
            if den.sqrt() < 1e-8 {
                assert!(num.sqrt() < 1e-8, "{name}: abs err {}", num.sqrt());
                continue;
            }
            let rel = (num / den).sqrt();
            assert!(rel < 1e-4, "{name}: rel err {rel}");
        }
    }

    #[test]
    fn gradients_prior_guided_incidence() {
        check_all(&tiny(AggregatorKind::PriorGuided, HeadKind::Incidence, true), &LossConfig::default());
    }

    #[test]
    fn gradients_attention_non_ordinal() {
        check_all(&tiny(AggregatorKind::Attention, HeadKind::Incidence, false), &LossConfig::default());
    }

    #[test]
    fn gradients_prototypes_hazard() {
        let loss = LossConfig { head: HeadKind::Hazard, ..Default::default() };
        check_all(&tiny(AggregatorKind::LearnablePrototypes, HeadKind::Hazard, true), &loss);
    }

    #[test]
    fn backward_is_deterministic() {
        let m = tiny(AggregatorKind::PriorGuided, HeadKind::Incidence, true);
        let bag = randn(5, 8, 3);
        let batch = vec![(bag.view(), DiscreteLabel { class: 3, event: true })];
        let trace = m.forward(&batch, &LossConfig::default(), None).unwrap();
        assert_eq!(m.backward(&trace), m.backward(&trace));
    }

    #[test]
    fn beta_zero_makes_target_temperature_irrelevant() {
        let m = tiny(AggregatorKind::PriorGuided, HeadKind::Incidence, true);
        let bag = randn(5, 8, 3);
        let batch = vec![(bag.view(), DiscreteLabel { class: 1, event: true })];
        let loss = LossConfig { beta: 0.0, ..Default::default() };
        let a = m.backward(&m.forward(&batch, &loss, Some(0.5)).unwrap());
        let b = m.backward(&m.forward(&batch, &loss, Some(50.0)).unwrap());
        assert_eq!(a, b);
    }

    #[test]
    fn clamped_tau_has_no_gradient() {
        let mut m = tiny(AggregatorKind::PriorGuided, HeadKind::Incidence, true);
        m.log_tau = 6.0;
        assert_eq!(m.tau(), MAX_TAU);
        let bag = randn(5, 8, 3);
        let batch = vec![(bag.view(), DiscreteLabel { class: 1, event: true })];
        let (_, g) = m.loss_and_gradients(&batch, &LossConfig::default()).unwrap();
        assert_eq!(g.log_tau, 0.0);
    }

    #[test]
    fn param_and_gradient_layouts_agree() {
        for kind in [AggregatorKind::PriorGuided, AggregatorKind::Attention, AggregatorKind::LearnablePrototypes] {
            let m = tiny(kind, HeadKind::Incidence, true);
            let g = m.zero_gradients();
            let p = m.params();
            let gs = g.slices();
            assert_eq!(p.len(), gs.len());
            for (a, b) in p.iter().zip(&gs) {
                assert_eq!(a.1.len(), b.1.len(), "{}", a.0);
            }
        }
    }
}
