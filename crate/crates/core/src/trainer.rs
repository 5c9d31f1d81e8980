//! Adam with decoupled weight decay and gradient accumulation over bags.

use ndarray::ArrayView2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::aggregation::{AggregatorConfig, PriorSet};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::labels::{assign_class, build_time_grid, DiscreteLabel, GridScheme};
use crate::losses::LossConfig;
use crate::metrics::{concordance_index, PatientOutput};
use crate::model::{Gradients, ModelConfig, ModelState};
use crate::prediction::{expected_time, HeadKind};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub accumulation_steps: usize,
    pub seed: u64,
    pub beta: f64,
    pub use_emd: bool,
    pub scheme: GridScheme,
    /// `None` means `floor(sqrt(#events))`.
    pub bins: Option<usize>,
    pub aggregator: AggregatorConfig,
    pub ordinal_prompts: bool,
    pub head: HeadKind,
    pub context_len: usize,
    pub class_len: usize,
    pub num_bases: usize,
    pub token_dim: usize,
    pub encoder_seed: u64,
    /// Number of learnable prototypes (prototype aggregator only).
    pub num_prototypes: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            learning_rate: 2e-4,
            weight_decay: 1e-5,
            accumulation_steps: 32,
            seed: 0,
            beta: 1.0,
            use_emd: true,
            scheme: GridScheme::Uniform,
            bins: None,
            aggregator: AggregatorConfig::default(),
            ordinal_prompts: true,
            head: HeadKind::Incidence,
            context_len: crate::prompts::DEFAULT_CONTEXT_LEN,
            class_len: crate::prompts::DEFAULT_CLASS_LEN,
            num_bases: crate::prompts::DEFAULT_BASES,
            token_dim: crate::embeddings::PseudoEncoder::DEFAULT_TOKEN_DIM,
            encoder_seed: 0,
            num_prototypes: 4,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Invalid("epochs must be >= 1".into()));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Invalid(format!("learning rate {} must be finite and >= 0", self.learning_rate)));
        }
        if self.accumulation_steps == 0 {
            return Err(Error::Invalid("accumulation_steps must be >= 1".into()));
        }
        Ok(())
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig { beta: self.beta, use_emd: self.use_emd, head: self.head, ..LossConfig::default() }
    }

    pub fn model_config(&self, embed_dim: usize, num_queries: usize) -> ModelConfig {
        ModelConfig {
            aggregator: self.aggregator,
            num_queries,
            embed_dim,
            token_dim: self.token_dim,
            context_len: self.context_len,
            class_len: self.class_len,
            num_bases: self.num_bases,
            ordinal_prompts: self.ordinal_prompts,
            head: self.head,
            encoder_seed: self.encoder_seed,
        }
    }
}

/// First and second Adam moments per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(shapes: impl IntoIterator<Item = usize>) -> Self {
        let (m, v) = shapes.into_iter().map(|n| (vec![0.0; n], vec![0.0; n])).unzip();
        Self { m, v, step: 0 }
    }

    pub fn for_model(model: &ModelState) -> Self {
        Self::new(model.params().iter().map(|(_, s)| s.len()))
    }
}

/// One Adam update with decoupled weight decay applied first.
pub fn adam_step(params: Vec<&mut [f64]>, grads: &[&[f64]], opt: &mut OptimizerState, lr: f64, wd: f64) {
    assert_eq!(params.len(), grads.len(), "parameter / gradient count mismatch");
    assert_eq!(params.len(), opt.m.len(), "optimizer state does not match parameters");
    opt.step += 1;
    let t = opt.step as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    for (k, (p, g)) in params.into_iter().zip(grads).enumerate() {
        assert_eq!(p.len(), g.len(), "shape mismatch in tensor {k}");
        let (m, v) = (&mut opt.m[k], &mut opt.v[k]);
        for i in 0..p.len() {
            p[i] -= lr * wd * p[i];
            m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g[i];
            v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g[i] * g[i];
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            p[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub val_ci: Option<f64>,
}

pub fn write_log_csv(path: impl AsRef<std::path::Path>, log: &[EpochLog]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["epoch", "mean_loss", "val_ci"])?;
    for e in log {
        w.write_record([
            e.epoch.to_string(),
            format!("{}", e.mean_loss),
            e.val_ci.map(|c| c.to_string()).unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn labels_for(model: &ModelState, data: &Dataset) -> Result<Vec<DiscreteLabel>> {
    data.patients.iter().map(|p| assign_class(&p.record, &model.grid)).collect()
}

/// Applies one averaged-gradient Adam update.
pub fn apply_update(model: &mut ModelState, grads: &Gradients, opt: &mut OptimizerState, cfg: &TrainConfig) {
    let g: Vec<&[f64]> = grads.slices().into_iter().map(|(_, s)| s).collect();
    adam_step(model.params_mut(), &g, opt, cfg.learning_rate, cfg.weight_decay);
}

/// Trains `model` in place and returns the per-epoch log.
pub fn train(
    model: &mut ModelState,
    data: &Dataset,
    cfg: &TrainConfig,
    validation: Option<&Dataset>,
) -> Result<Vec<EpochLog>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Empty("training set"));
    }
    if !data.patients.iter().any(|p| p.record.event) {
        return Err(Error::NoEvents);
    }
    let labels = labels_for(model, data)?;
    let loss = cfg.loss_config();
    let mut opt = OptimizerState::for_model(model);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut step = 0usize;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for window in order.chunks(cfg.accumulation_steps) {
            let batch: Vec<(ArrayView2<'_, f64>, DiscreteLabel)> =
                window.iter().map(|&i| (data.patients[i].bag.view(), labels[i])).collect();
            let trace = model.forward(&batch, &loss, None)?;
            for (k, l) in trace.losses.iter().enumerate() {
                if !l.is_finite() {
                    return Err(Error::NonFiniteLoss {
                        patient: data.patients[window[k]].record.patient_id.clone(),
                        step: step + k,
                    });
                }
                total += l;
            }
            step += window.len();
            let grads = model.backward(&trace);
            apply_update(model, &grads, &mut opt, cfg);
        }
        let val_ci = match validation {
            Some(v) if !v.is_empty() => {
                let risks: Vec<f64> = predict_outputs(model, v)?.iter().map(|o| o.risk).collect();
                concordance_index(&risks, &v.records()).ok()
            }
            _ => None,
        };
        log.push(EpochLog { epoch, mean_loss: total / data.len() as f64, val_ci });
    }
    Ok(log)
}

/// Trained model plus its log.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: ModelState,
    pub log: Vec<EpochLog>,
}

/// Builds the time grid from `data` alone, initializes a model and trains it.
pub fn fit(
    data: &Dataset,
    priors: Option<PriorSet>,
    cfg: &TrainConfig,
    validation: Option<&Dataset>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let first = data.patients.first().ok_or(Error::Empty("training set"))?;
    let grid = build_time_grid(&data.records(), cfg.scheme, cfg.bins)?;
    let num_queries = priors.as_ref().map_or(cfg.num_prototypes, PriorSet::len);
    let mc = cfg.model_config(first.bag.ncols(), num_queries);
    let mut model = ModelState::new(mc, priors, grid, cfg.seed)?;
    let log = train(&mut model, data, cfg, validation)?;
    Ok(TrainOutcome { model, log })
}

/// Risk, expected time and survival curve for every patient.
pub fn predict_outputs(model: &ModelState, data: &Dataset) -> Result<Vec<PatientOutput>> {
    let prompts = model.prompt_trace()?.prompts;
    data.patients
        .iter()
        .map(|p| {
            let pred = model.predict(p.bag.view(), prompts.view())?;
            Ok(PatientOutput {
                risk: pred.risk(),
                expected_time: expected_time(&pred.incidence, &model.grid)?,
                survival: pred.survival().to_vec(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aggregation::AggregatorKind;
    use crate::data::Patient;
    use crate::labels::SurvivalRecord;
    use crate::model::Aggregator;
    use ndarray::Array2;
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn toy_data(n: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let patients = (0..n)
            .map(|i| {
                let k = rng.random_range(3..7);
                let bag = Array2::from_shape_simple_fn((k, 8), || StandardNormal.sample(&mut rng));
                let time = rng.random_range(1.0..30.0);
                Patient { record: SurvivalRecord::new(format!("p{i}"), time, rng.random_bool(0.7)), bag }
            })
            .collect();
        Dataset { patients }
    }

    fn toy_priors() -> PriorSet {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let base = Array2::from_shape_simple_fn((3, 8), || StandardNormal.sample(&mut rng));
        PriorSet::new(base, vec!["a".into(), "b".into(), "c".into()]).unwrap()
    }

    fn small_cfg() -> TrainConfig {
        TrainConfig {
            epochs: 2,
            learning_rate: 1e-2,
            accumulation_steps: 4,
            token_dim: 12,
            aggregator: AggregatorConfig { alpha: 10.0, attention_hidden: 6, ..Default::default() },
            ..Default::default()
        }
    }

    fn flat(model: &ModelState) -> Vec<f64> {
        model.params().into_iter().flat_map(|(_, s)| s.to_vec()).collect()
    }

    #[test]
    fn adam_zero_gradient_no_decay() {
        let mut p = vec![1.0, -2.0];
        let mut opt = OptimizerState::new([2]);
        adam_step(vec![&mut p], &[&[0.0, 0.0]], &mut opt, 0.1, 0.0);
        assert_eq!(p, vec![1.0, -2.0]);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = vec![0.5];
        let mut opt = OptimizerState::new([1]);
        adam_step(vec![&mut p], &[&[1.0]], &mut opt, 0.1, 0.0);
        // m_hat = 1, v_hat = 1 => delta = 0.1 / (1 + 1e-8)
        assert!((p[0] - (0.5 - 0.1 / (1.0 + 1e-8))).abs() < 1e-15);
    }

    #[test]
    fn adam_two_step_hand_trace() {
        let (lr, wd, g) = (0.01, 0.1, 0.5);
        let mut p = vec![2.0];
        let mut opt = OptimizerState::new([1]);
        adam_step(vec![&mut p], &[&[g]], &mut opt, lr, wd);
        adam_step(vec![&mut p], &[&[g]], &mut opt, lr, wd);
        // step 1
        let mut q = 2.0 - lr * wd * 2.0;
        let (m1, v1) = (0.1 * g, 0.001 * g * g);
        q -= lr * (m1 / 0.1) / ((v1 / 0.001f64).sqrt() + 1e-8);
        // step 2
        q -= lr * wd * q;
        let m2 = 0.9 * m1 + 0.1 * g;
        let v2 = 0.999 * v1 + 0.001 * g * g;
        let c1 = 1.0 - 0.9f64 * 0.9;
        let c2 = 1.0 - 0.999f64 * 0.999;
        q -= lr * (m2 / c1) / ((v2 / c2).sqrt() + 1e-8);
        assert!((p[0] - q).abs() < 1e-15, "{} vs {q}", p[0]);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig { epochs: 0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { accumulation_steps: 0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig::default().validate().is_ok());
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_unchanged() {
        let data = toy_data(10, 1);
        let cfg = TrainConfig { learning_rate: 0.0, epochs: 1, ..small_cfg() };
        let grid = build_time_grid(&data.records(), cfg.scheme, None).unwrap();
        let mut model = ModelState::new(cfg.model_config(8, 3), Some(toy_priors()), grid, 3).unwrap();
        let before = flat(&model);
        train(&mut model, &data, &cfg, None).unwrap();
        assert_eq!(before, flat(&model));
    }

    #[test]
    fn training_is_deterministic() {
        let data = toy_data(12, 2);
        let a = fit(&data, Some(toy_priors()), &small_cfg(), None).unwrap();
        let b = fit(&data, Some(toy_priors()), &small_cfg(), None).unwrap();
        assert_eq!(flat(&a.model), flat(&b.model));
        assert_eq!(a.log, b.log);
    }

    #[test]
    fn frozen_tensors_untouched() {
        let data = toy_data(12, 4);
        let priors = toy_priors();
        let bags: Vec<_> = data.patients.iter().map(|p| p.bag.clone()).collect();
        let grid = build_time_grid(&data.records(), GridScheme::Uniform, None).unwrap();
        let cfg = small_cfg();
        let mut model = ModelState::new(cfg.model_config(8, 3), Some(priors.clone()), grid, 3).unwrap();
        let projection = model.encoder().projection().to_owned();
        train(&mut model, &data, &cfg, None).unwrap();
        let Aggregator::PriorGuided(p) = &model.aggregator else { panic!() };
        assert_eq!(p.base, priors.base);
        assert_ne!(p.offsets, priors.offsets);
        assert_eq!(model.encoder().projection(), projection);
        assert!(data.patients.iter().zip(&bags).all(|(p, b)| &p.bag == b));
    }

    #[test]
    fn accumulation_matches_single_batch() {
        let data = toy_data(6, 5);
        let cfg = small_cfg();
        let grid = build_time_grid(&data.records(), GridScheme::Uniform, None).unwrap();
        let model = ModelState::new(cfg.model_config(8, 3), Some(toy_priors()), grid, 3).unwrap();
        let labels = labels_for(&model, &data).unwrap();
        let loss = cfg.loss_config();
        let batch: Vec<_> = data.patients.iter().zip(&labels).map(|(p, l)| (p.bag.view(), *l)).collect();
        let tau = model.tau();
        let whole = model.backward(&model.forward(&batch, &loss, Some(tau)).unwrap());
        let mut avg = model.zero_gradients();
        for item in &batch {
            let g = model.backward(&model.forward(std::slice::from_ref(item), &loss, Some(tau)).unwrap());
            avg.add_scaled(&g, 1.0 / batch.len() as f64);
        }
        let mut a = model.clone();
        let mut b = model.clone();
        apply_update(&mut a, &whole, &mut OptimizerState::for_model(&model), &cfg);
        apply_update(&mut b, &avg, &mut OptimizerState::for_model(&model), &cfg);
        for (x, y) in flat(&a).iter().zip(flat(&b)) {
            assert!((x - y).abs() < 1e-10);
        }
        for ((_, x), (_, y)) in whole.slices().iter().zip(avg.slices()) {
            for (u, v) in x.iter().zip(y) {
                assert!((u - v).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn coop_ablation_has_independent_class_tokens() {
        let data = toy_data(12, 6);
        let cfg = TrainConfig { beta: 0.0, ordinal_prompts: false, epochs: 1, ..small_cfg() };
        let out = fit(&data, Some(toy_priors()), &cfg, None).unwrap();
        let c = out.model.num_classes();
        let names: Vec<String> = out.model.params().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names.iter().filter(|n| n.starts_with("class_tokens.")).count(), c);
        let ordinal = fit(&data, Some(toy_priors()), &TrainConfig { epochs: 1, ..small_cfg() }, None).unwrap();
        let names: Vec<String> = ordinal.model.params().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names.iter().filter(|n| n.starts_with("class_tokens.")).count(), cfg.num_bases);
    }

    #[test]
    fn other_aggregators_train() {
        let data = toy_data(12, 7);
        for kind in [AggregatorKind::Attention, AggregatorKind::LearnablePrototypes] {
            let cfg = TrainConfig { aggregator: AggregatorConfig { kind, ..small_cfg().aggregator }, ..small_cfg() };
            let out = fit(&data, None, &cfg, Some(&data)).unwrap();
            assert!(out.log.iter().all(|e| e.mean_loss.is_finite() && e.val_ci.is_some()));
        }
    }

    #[test]
    fn rejects_cohort_without_events() {
        let mut data = toy_data(6, 8);
        let cfg = small_cfg();
        let grid = build_time_grid(&data.records(), GridScheme::Uniform, None).unwrap();
        let mut model = ModelState::new(cfg.model_config(8, 3), Some(toy_priors()), grid, 3).unwrap();
        data.patients.iter_mut().for_each(|p| p.record.event = false);
        assert!(matches!(train(&mut model, &data, &cfg, None), Err(Error::NoEvents)));
    }
}
