//! Cohort manifests, in-memory datasets and k-fold splits.

use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embeddings::load_embeddings;
use crate::error::{Error, Result};
use crate::labels::SurvivalRecord;

/// One manifest row. `bag_path` is resolved relative to the manifest file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub patient_id: String,
    pub bag_path: String,
    pub time_months: f64,
    pub event: u8,
}

impl ManifestRow {
    pub fn record(&self) -> Result<SurvivalRecord> {
        let event = match self.event {
            0 => false,
            1 => true,
            e => return Err(Error::Invalid(format!("event indicator {e} for {}", self.patient_id))),
        };
        Ok(SurvivalRecord::new(self.patient_id.clone(), self.time_months, event))
    }
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestRow>> {
    let mut reader = csv::Reader::from_path(path)?;
    let rows = reader.deserialize().collect::<std::result::Result<Vec<ManifestRow>, _>>()?;
    Ok(rows)
}

pub fn write_manifest(path: impl AsRef<Path>, rows: &[ManifestRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Patient {
    pub record: SurvivalRecord,
    /// `K x D` frozen instance features.
    pub bag: Array2<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub patients: Vec<Patient>,
}

impl Dataset {
    pub fn load(manifest: impl AsRef<Path>) -> Result<Self> {
        let manifest = manifest.as_ref();
        let base = manifest.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."));
        let mut patients = Vec::new();
        let mut dim = None;
        for row in read_manifest(manifest)? {
            let bag = load_embeddings(base.join(&row.bag_path))?;
            if bag.nrows() == 0 {
                return Err(Error::Empty("bag"));
            }
            match dim {
                None => dim = Some(bag.ncols()),
                Some(d) if d != bag.ncols() => {
                    return Err(Error::Shape(format!("{}: dim {} != {d}", row.patient_id, bag.ncols())))
                }
                _ => {}
            }
            patients.push(Patient { record: row.record()?, bag });
        }
        Ok(Self { patients })
    }

    pub fn len(&self) -> usize {
        self.patients.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patients.is_empty()
    }

    pub fn records(&self) -> Vec<SurvivalRecord> {
        self.patients.iter().map(|p| p.record.clone()).collect()
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        Self { patients: idx.iter().map(|&i| self.patients[i].clone()).collect() }
    }

    pub fn position(&self, patient_id: &str) -> Option<usize> {
        self.patients.iter().position(|p| p.record.patient_id == patient_id)
    }
}

/// Which fold of a seeded k-fold split a run uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub fold: usize,
    pub folds: usize,
    pub seed: u64,
}

impl SplitSpec {
    /// Parses `i/k`.
    pub fn parse(text: &str, seed: u64) -> Result<Self> {
        let (f, k) = text.split_once('/').ok_or_else(|| Error::Invalid(format!("fold `{text}` is not i/k")))?;
        let parse = |v: &str| v.trim().parse::<usize>().map_err(|_| Error::Invalid(format!("fold `{text}` is not i/k")));
        let spec = Self { fold: parse(f)?, folds: parse(k)?, seed };
        if spec.fold >= spec.folds {
            return Err(Error::Invalid(format!("fold index {} must be < fold count {}", spec.fold, spec.folds)));
        }
        Ok(spec)
    }

    pub fn apply(&self, n: usize) -> Result<Fold> {
        Ok(k_fold(n, self.folds, self.seed)?.swap_remove(self.fold))
    }
}

/// Train/test index split for one fold.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fold {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Seeded shuffle of `0..n`, cut into `k` contiguous chunks. The first
/// `n % k` chunks carry one extra element.
pub fn k_fold(n: usize, k: usize, seed: u64) -> Result<Vec<Fold>> {
    if k < 2 || k > n {
        return Err(Error::Invalid(format!("cannot split {n} patients into {k} folds")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (base, extra) = (n / k, n % k);
    let mut folds = Vec::with_capacity(k);
    let mut start = 0;
    for f in 0..k {
        let len = base + usize::from(f < extra);
        let test = order[start..start + len].to_vec();
        let train = order[..start].iter().chain(&order[start + len..]).copied().collect();
        folds.push(Fold { train, test });
        start += len;
    }
    Ok(folds)
}
