//! Seeded synthetic cohorts with a known latent risk.
//!
//! Each patient draws `r ~ N(0, 1)`. A bag holds isotropic noise instances
//! plus a few instances aligned with orthonormal prototype directions. Even
//! prototypes are adverse (amplitude `sigmoid(r * signal_strength)`), odd
//! ones favourable (amplitude `sigmoid(-r * signal_strength)`). Event times are
//! exponential with rate `exp(hazard_slope * r) / baseline_scale`; uniform
//! censoring is tuned to the requested rate.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::aggregation::PriorSet;
use crate::data::{write_manifest, Dataset, ManifestRow, Patient};
use crate::embeddings::save_embeddings;
use crate::error::{Error, Result};
use crate::labels::SurvivalRecord;
use crate::math::sigmoid;
use crate::metrics::concordance_index;
use crate::prompts::PhraseConfig;

/// Peak norm of the prototype-aligned component.
const SIGNAL_AMPLITUDE: f64 = 3.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_patients: usize,
    pub k_min: usize,
    pub k_max: usize,
    pub dim: usize,
    pub n_prototypes: usize,
    pub signal_strength: f64,
    pub censoring_rate: f64,
    /// Mean event time (months) at `r = 0`.
    pub baseline_scale: f64,
    /// Slope of the log event rate in `r`.
    pub hazard_slope: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_patients: 400,
            k_min: 20,
            k_max: 60,
            dim: 64,
            n_prototypes: 4,
            signal_strength: 2.0,
            censoring_rate: 0.3,
            baseline_scale: 24.0,
            hazard_slope: 1.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_patients == 0 {
            return Err(Error::Invalid("n_patients must be >= 1".into()));
        }
        if self.k_min == 0 || self.k_max < self.k_min {
            return Err(Error::Invalid(format!("bad instance range [{}, {}]", self.k_min, self.k_max)));
        }
        if self.n_prototypes == 0 || self.n_prototypes > self.dim {
            return Err(Error::Invalid(format!("need 1 <= prototypes ({}) <= dim ({})", self.n_prototypes, self.dim)));
        }
        if !(0.0..1.0).contains(&self.censoring_rate) {
            return Err(Error::Invalid(format!("censoring rate {} outside [0, 1)", self.censoring_rate)));
        }
        if !(self.signal_strength >= 0.0) || !(self.baseline_scale > 0.0) || !self.hazard_slope.is_finite() {
            return Err(Error::Invalid("signal_strength >= 0, baseline_scale > 0 and finite slope required".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthCohort {
    pub config: SynthConfig,
    pub data: Dataset,
    /// `M x D`, orthonormal rows.
    pub prototypes: Array2<f64>,
    pub latent_risk: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct LatentSidecar {
    patient_id: Vec<String>,
    latent_risk: Vec<f64>,
}

/// Gram-Schmidt on Gaussian draws.
fn orthonormal_rows(m: usize, d: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let mut out = Array2::<f64>::zeros((m, d));
    let mut i = 0;
    while i < m {
        let mut v: Array1<f64> = Array1::from_shape_simple_fn(d, || StandardNormal.sample(&mut *rng));
        for j in 0..i {
            let proj = out.row(j).dot(&v);
            v.scaled_add(-proj, &out.row(j));
        }
        let n = v.dot(&v).sqrt();
        if n < 1e-6 {
            continue;
        }
        out.row_mut(i).assign(&(v / n));
        i += 1;
    }
    out
}

/// Smallest censoring bound `q` whose realized censored fraction does not
/// exceed `rate`, found by bisection on a log scale.
fn tune_censoring(event_times: &[f64], unit: &[f64], rate: f64) -> f64 {
    let frac = |q: f64| {
        event_times.iter().zip(unit).filter(|(t, u)| q * *u < **t).count() as f64 / event_times.len() as f64
    };
    let t_max = event_times.iter().cloned().fold(0.0, f64::max);
    let (mut lo, mut hi) = ((t_max * 1e-9).ln(), (t_max * 1e9).ln());
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if frac(mid.exp()) > rate {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    hi.exp()
}

pub fn generate(config: &SynthConfig) -> Result<SynthCohort> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (d, m) = (config.dim, config.n_prototypes);
    let prototypes = orthonormal_rows(m, d, &mut rng);
    let noise_sd = 1.0 / (d as f64).sqrt();
    let mut latent = Vec::with_capacity(config.n_patients);
    let mut bags = Vec::with_capacity(config.n_patients);
    let mut event_times = Vec::with_capacity(config.n_patients);
    for _ in 0..config.n_patients {
        let r: f64 = StandardNormal.sample(&mut rng);
        let k = rng.random_range(config.k_min..=config.k_max);
        let mut bag = Array2::from_shape_simple_fn((k, d), || {
            let z: f64 = StandardNormal.sample(&mut rng);
            z * noise_sd
        });
        let n_signal = (k / 8).max(m).min(k);
        for i in 0..n_signal {
            let proto = i % m;
            // even prototypes mark adverse patterns, odd ones favourable patterns
            let sign = if proto % 2 == 0 { 1.0 } else { -1.0 };
            let amplitude = SIGNAL_AMPLITUDE * sigmoid(sign * r * config.signal_strength);
            bag.row_mut(i).scaled_add(amplitude, &prototypes.row(proto));
        }
        let rate = (config.hazard_slope * r).exp() / config.baseline_scale;
        let t: f64 = Exp::new(rate).map_err(|e| Error::Invalid(e.to_string()))?.sample(&mut rng);
        latent.push(r);
        bags.push(bag);
        event_times.push(t);
    }
    let unit: Vec<f64> = (0..config.n_patients).map(|_| rng.random::<f64>()).collect();
    let q = if config.censoring_rate > 0.0 {
        Some(tune_censoring(&event_times, &unit, config.censoring_rate))
    } else {
        None
    };
    let patients = bags
        .into_iter()
        .enumerate()
        .map(|(i, bag)| {
            let t = event_times[i];
            let record = match q {
                Some(q) if q * unit[i] < t => SurvivalRecord::new(patient_id(i), q * unit[i], false),
                _ => SurvivalRecord::new(patient_id(i), t, true),
            };
            Patient { record, bag }
        })
        .collect();
    Ok(SynthCohort { config: config.clone(), data: Dataset { patients }, prototypes, latent_risk: latent })
}

fn patient_id(i: usize) -> String {
    format!("P{i:04}")
}

impl SynthCohort {
    /// Concordance of the true latent risk with the observed outcomes.
    pub fn oracle_ci(&self) -> Result<f64> {
        oracle_ci(&self.latent_risk, &self.data.records())
    }

    pub fn censored_fraction(&self) -> f64 {
        self.data.patients.iter().filter(|p| !p.record.event).count() as f64 / self.data.len() as f64
    }

    /// Prior set built from the prototype directions.
    pub fn priors(&self) -> Result<PriorSet> {
        PriorSet::new(self.prototypes.clone(), prior_texts(self.prototypes.nrows()))
    }

    /// Writes `manifest.csv`, `bags/*.vlsb`, `priors.vlsb`, `phrases.json`
    /// and the `latent.json` sidecar into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir.join("bags"))?;
        let mut rows = Vec::with_capacity(self.data.len());
        for p in &self.data.patients {
            let rel = format!("bags/{}.vlsb", p.record.patient_id);
            save_embeddings(dir.join(&rel), p.bag.view())?;
            rows.push(ManifestRow {
                patient_id: p.record.patient_id.clone(),
                bag_path: rel,
                time_months: p.record.time,
                event: u8::from(p.record.event),
            });
        }
        write_manifest(dir.join("manifest.csv"), &rows)?;
        save_embeddings(dir.join("priors.vlsb"), self.prototypes.view())?;
        let phrases = PhraseConfig { priors: prior_texts(self.prototypes.nrows()), ..PhraseConfig::default() };
        fs::write(dir.join("phrases.json"), serde_json::to_string_pretty(&phrases)?)?;
        let sidecar = LatentSidecar { patient_id: self.data.records().into_iter().map(|r| r.patient_id).collect(), latent_risk: self.latent_risk.clone() };
        fs::write(dir.join("latent.json"), serde_json::to_string_pretty(&sidecar)?)?;
        fs::write(dir.join("synth_config.json"), serde_json::to_string_pretty(&self.config)?)?;
        Ok(())
    }
}

fn prior_texts(m: usize) -> Vec<String> {
    (1..=m).map(|i| format!("prognostic pattern {i}")).collect()
}

pub fn oracle_ci(latent_risk: &[f64], records: &[SurvivalRecord]) -> Result<f64> {
    concordance_index(latent_risk, records)
}

/// Reads the latent-risk sidecar written by [`SynthCohort::write`].
pub fn read_latent(path: impl AsRef<Path>) -> Result<(Vec<String>, Vec<f64>)> {
    let s: LatentSidecar = serde_json::from_str(&fs::read_to_string(path)?)?;
    Ok((s.patient_id, s.latent_risk))
}
