//! Checkpoint files: `VLSK`, a u32 LE header length, a JSON header, then one
//! 64-bit VLSB blob per tensor in header order.

use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::aggregation::{AttentionMlp, LinearHead, PriorSet};
use crate::embeddings::{decode_vlsb_prefix, encode_vlsb, Precision};
use crate::data::SplitSpec;
use crate::error::{Error, Result};
use crate::labels::TimeGrid;
use crate::model::{Aggregator, ModelConfig, ModelState};
use crate::prompts::PromptParams;
use crate::trainer::{EpochLog, TrainConfig};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"VLSK";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub train_config: TrainConfig,
    pub model_config: ModelConfig,
    pub grid: TimeGrid,
    pub prior_texts: Vec<String>,
    pub log: Vec<EpochLog>,
    #[serde(default)]
    pub split: Option<SplitSpec>,
    pub tensors: Vec<TensorInfo>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub model: ModelState,
}

fn row(v: &Array1<f64>) -> Array2<f64> {
    v.clone().insert_axis(ndarray::Axis(0))
}

fn tensors(model: &ModelState) -> Vec<(String, Array2<f64>)> {
    let mut out = Vec::new();
    match &model.aggregator {
        Aggregator::PriorGuided(p) => {
            out.push(("prior_base".into(), p.base.clone()));
            out.push(("prior_offsets".into(), p.offsets.clone()));
        }
        Aggregator::Prototypes(m) => out.push(("prototypes".into(), m.clone())),
        Aggregator::Attention(a) => {
            out.push(("attention.w1".into(), a.w1.clone()));
            out.push(("attention.b1".into(), row(&a.b1)));
            out.push(("attention.w2".into(), row(&a.w2)));
            out.push(("attention.b2".into(), Array2::from_elem((1, 1), a.b2)));
        }
    }
    out.push(("context".into(), model.prompts.context.clone()));
    for (i, t) in model.prompts.class_tokens.iter().enumerate() {
        out.push((format!("class_tokens.{i}"), t.clone()));
    }
    out.push(("head.weight".into(), model.head.weight.clone()));
    out.push(("head.bias".into(), row(&model.head.bias)));
    out.push(("log_tau".into(), Array2::from_elem((1, 1), model.log_tau)));
    out
}

pub fn to_bytes(
    model: &ModelState,
    train_config: &TrainConfig,
    log: &[EpochLog],
    split: Option<SplitSpec>,
) -> Result<Vec<u8>> {
    let ts = tensors(model);
    let header = CheckpointHeader {
        train_config: train_config.clone(),
        model_config: model.config,
        grid: model.grid.clone(),
        prior_texts: model.prior_texts(),
        log: log.to_vec(),
        split,
        tensors: ts.iter().map(|(n, t)| TensorInfo { name: n.clone(), rows: t.nrows(), cols: t.ncols() }).collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t) in &ts {
        out.extend_from_slice(&encode_vlsb(t.view(), Precision::F64));
    }
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 8 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a checkpoint".into()));
    }
    let len = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let json = bytes.get(8..8 + len).ok_or_else(|| Error::Format("truncated checkpoint header".into()))?;
    let header: CheckpointHeader = serde_json::from_slice(json)?;
    let mut rest = &bytes[8 + len..];
    let mut found = std::collections::BTreeMap::new();
    for info in &header.tensors {
        let (m, used) = decode_vlsb_prefix(rest)?;
        if m.dim() != (info.rows, info.cols) {
            return Err(Error::Shape(format!("{}: {:?} vs header {}x{}", info.name, m.dim(), info.rows, info.cols)));
        }
        found.insert(info.name.clone(), m);
        rest = &rest[used..];
    }
    if !rest.is_empty() {
        return Err(Error::Format(format!("{} trailing bytes", rest.len())));
    }
    let mut take = |name: &str| found.remove(name).ok_or_else(|| Error::Format(format!("missing tensor {name}")));
    let cfg = header.model_config;
    let aggregator = match cfg.aggregator.kind {
        crate::aggregation::AggregatorKind::PriorGuided => {
            let mut p = PriorSet::new(take("prior_base")?, header.prior_texts.clone())?;
            p.offsets = take("prior_offsets")?;
            Aggregator::PriorGuided(p)
        }
        crate::aggregation::AggregatorKind::LearnablePrototypes => Aggregator::Prototypes(take("prototypes")?),
        crate::aggregation::AggregatorKind::Attention => Aggregator::Attention(AttentionMlp {
            w1: take("attention.w1")?,
            b1: take("attention.b1")?.row(0).to_owned(),
            w2: take("attention.w2")?.row(0).to_owned(),
            b2: take("attention.b2")?[[0, 0]],
        }),
    };
    let n_tokens = if cfg.ordinal_prompts { cfg.num_bases } else { header.grid.num_classes() };
    let prompts = PromptParams {
        context: take("context")?,
        class_tokens: (0..n_tokens).map(|i| take(&format!("class_tokens.{i}"))).collect::<Result<_>>()?,
        num_classes: header.grid.num_classes(),
        ordinal: cfg.ordinal_prompts,
    };
    let head = LinearHead { weight: take("head.weight")?, bias: take("head.bias")?.row(0).to_owned() };
    let log_tau = take("log_tau")?[[0, 0]];
    let model = ModelState::from_parts(cfg, header.grid.clone(), aggregator, prompts, head, log_tau)?;
    Ok(Checkpoint { header, model })
}

pub fn save(
    path: impl AsRef<Path>,
    model: &ModelState,
    train_config: &TrainConfig,
    log: &[EpochLog],
    split: Option<SplitSpec>,
) -> Result<()> {
    std::fs::write(path, to_bytes(model, train_config, log, split)?)?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint> {
    from_bytes(&std::fs::read(path)?)
}
