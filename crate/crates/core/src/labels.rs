//! Time discretization, discrete labels, target distributions and the
//! Kaplan-Meier machinery used for few-shot class estimation.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One patient's follow-up.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurvivalRecord {
    pub patient_id: String,
    /// Observed time in months.
    pub time: f64,
    /// `true` when the event was observed (δ = 1).
    pub event: bool,
}

impl SurvivalRecord {
    pub fn new(patient_id: impl Into<String>, time: f64, event: bool) -> Self {
        Self { patient_id: patient_id.into(), time, event }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GridScheme {
    Uniform,
    Quantile,
}

/// Ordered cut points `[T_0 = 0, T_1, ..., T_C]` defining `C` survival classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub scheme: GridScheme,
    pub cuts: Vec<f64>,
}

impl TimeGrid {
    pub fn new(scheme: GridScheme, cuts: Vec<f64>) -> Result<Self> {
        if cuts.len() < 3 {
            return Err(Error::TooFewBins(cuts.len().saturating_sub(1)));
        }
        if cuts[0] != 0.0 {
            return Err(Error::Invalid(format!("first cut must be 0, got {}", cuts[0])));
        }
        if cuts.iter().any(|c| !c.is_finite()) || cuts.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Invalid("cuts must be finite and strictly increasing".into()));
        }
        Ok(Self { scheme, cuts })
    }

    /// Number of classes `C`.
    pub fn num_classes(&self) -> usize {
        self.cuts.len() - 1
    }

    /// Bounds `[T_{c-1}, T_c)` of the 1-based class `c`.
    pub fn bounds(&self, class: usize) -> (f64, f64) {
        (self.cuts[class - 1], self.cuts[class])
    }

    pub fn midpoints(&self) -> Vec<f64> {
        self.cuts.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect()
    }

    /// 1-based class of a time. Times at or beyond `T_C` land in class `C`.
    pub fn class_of(&self, time: f64) -> Result<usize> {
        if time < 0.0 || time.is_nan() {
            return Err(Error::NegativeTime(time));
        }
        // number of interior cuts <= time
        let interior = &self.cuts[1..self.cuts.len() - 1];
        let c = interior.partition_point(|&cut| cut <= time) + 1;
        Ok(c)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let raw: TimeGrid = serde_json::from_str(s)?;
        TimeGrid::new(raw.scheme, raw.cuts)
    }
}

/// Time-discrete label `{c, δ}` with `c` 1-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiscreteLabel {
    pub class: usize,
    pub event: bool,
}

/// Default number of bins: `floor(sqrt(N_e))`.
pub fn default_num_bins(num_events: usize) -> usize {
    let mut c = (num_events as f64).sqrt().floor() as usize;
    // guard against sqrt rounding just below an integer
    while (c + 1) * (c + 1) <= num_events {
        c += 1;
    }
    while c * c > num_events {
        c -= 1;
    }
    c
}

/// Empirical quantile with linear interpolation between order statistics.
fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn build_time_grid(
    records: &[SurvivalRecord],
    scheme: GridScheme,
    num_bins: Option<usize>,
) -> Result<TimeGrid> {
    if let Some(r) = records.iter().find(|r| !r.time.is_finite() || r.time < 0.0) {
        return Err(Error::Invalid(format!("invalid time {} for {}", r.time, r.patient_id)));
    }
    let mut event_times: Vec<f64> = records.iter().filter(|r| r.event).map(|r| r.time).collect();
    if event_times.is_empty() {
        return Err(Error::NoEvents);
    }
    let c = num_bins.unwrap_or_else(|| default_num_bins(event_times.len()));
    if c < 2 {
        return Err(Error::TooFewBins(c));
    }
    let max_time = records.iter().map(|r| r.time).fold(0.0_f64, f64::max);
    if max_time <= 0.0 {
        return Err(Error::Invalid("maximum observed time is 0".into()));
    }

    let cuts = match scheme {
        GridScheme::Uniform => (0..=c).map(|i| max_time * i as f64 / c as f64).collect(),
        GridScheme::Quantile => {
            event_times.sort_by(f64::total_cmp);
            let mut cuts = vec![0.0];
            for i in 1..c {
                let q = quantile_sorted(&event_times, i as f64 / c as f64);
                if q > *cuts.last().unwrap() && q < max_time {
                    cuts.push(q);
                }
            }
            cuts.push(max_time);
            if cuts.len() < 3 {
                return Err(Error::TooFewBins(cuts.len() - 1));
            }
            cuts
        }
    };
    TimeGrid::new(scheme, cuts)
}

pub fn assign_class(record: &SurvivalRecord, grid: &TimeGrid) -> Result<DiscreteLabel> {
    Ok(DiscreteLabel { class: grid.class_of(record.time)?, event: record.event })
}

/// Ground-truth distribution `y(c, δ)` used by the squared-EMD objective.
pub fn target_distribution(label: DiscreteLabel, num_classes: usize, tau_prime: f64) -> Vec<f64> {
    let logits: Vec<f64> = (1..=num_classes)
        .map(|i| {
            let hit = if label.event { i == label.class } else { i >= label.class };
            if hit {
                tau_prime
            } else {
                -tau_prime
            }
        })
        .collect();
    softmax(&logits)
}

pub(crate) fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Product-limit estimate of the cohort survival function.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KmCurve {
    /// Distinct event times, ascending.
    pub times: Vec<f64>,
    /// `S(t)` just after each event time.
    pub survival: Vec<f64>,
    pub at_risk: Vec<usize>,
    pub deaths: Vec<usize>,
}

impl KmCurve {
    /// Right-continuous `S(t)`: product over event times `<= t`.
    pub fn survival_at(&self, t: f64) -> f64 {
        let n = self.times.partition_point(|&x| x <= t);
        if n == 0 {
            1.0
        } else {
            self.survival[n - 1]
        }
    }

    /// Left limit `S(t-)`: product over event times `< t`.
    pub fn survival_before(&self, t: f64) -> f64 {
        let n = self.times.partition_point(|&x| x < t);
        if n == 0 {
            1.0
        } else {
            self.survival[n - 1]
        }
    }

    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["time", "survival", "at_risk", "deaths"])?;
        for i in 0..self.times.len() {
            w.write_record([
                self.times[i].to_string(),
                self.survival[i].to_string(),
                self.at_risk[i].to_string(),
                self.deaths[i].to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn kaplan_meier(records: &[SurvivalRecord]) -> Result<KmCurve> {
    if records.is_empty() {
        return Err(Error::Empty("kaplan_meier records"));
    }
    // time -> (deaths, removed)
    let mut table: BTreeMap<u64, (usize, usize, f64)> = BTreeMap::new();
    for r in records {
        if !r.time.is_finite() {
            return Err(Error::Invalid(format!("non-finite time for {}", r.patient_id)));
        }
        let key = ordered_key(r.time);
        let entry = table.entry(key).or_insert((0, 0, r.time));
        entry.1 += 1;
        if r.event {
            entry.0 += 1;
        }
    }
    let mut curve = KmCurve { times: vec![], survival: vec![], at_risk: vec![], deaths: vec![] };
    let mut at_risk = records.len();
    let mut s = 1.0;
    for (_, (deaths, removed, time)) in table {
        if deaths > 0 {
            s *= 1.0 - deaths as f64 / at_risk as f64;
            curve.times.push(time);
            curve.survival.push(s);
            curve.at_risk.push(at_risk);
            curve.deaths.push(deaths);
        }
        at_risk -= removed;
    }
    Ok(curve)
}

/// Monotone bit key for non-negative or negative finite floats.
fn ordered_key(x: f64) -> u64 {
    let bits = x.to_bits();
    if bits >> 63 == 1 {
        !bits
    } else {
        bits | (1 << 63)
    }
}

/// Most likely class of a censored patient given the cohort KM curve:
/// the argmax over classes `c >= class(t)` of `P(T in bin c | T > t)`.
pub fn estimate_censored_class(
    record: &SurvivalRecord,
    grid: &TimeGrid,
    km: &KmCurve,
) -> Result<usize> {
    if record.event {
        return Err(Error::Invalid(format!("{} is not censored", record.patient_id)));
    }
    let start = grid.class_of(record.time)?;
    let big_c = grid.num_classes();
    let s_t = km.survival_at(record.time);
    if s_t <= 0.0 {
        return Ok(big_c);
    }
    let mut best = (start, f64::NEG_INFINITY);
    for c in start..=big_c {
        let (lo, hi) = grid.bounds(c);
        let upper = if c == start { s_t } else { km.survival_before(lo) };
        // class C absorbs everything past T_C
        let lower = if c == big_c { 0.0 } else { km.survival_before(hi) };
        let mass = (upper - lower) / s_t;
        if mass > best.1 {
            best = (c, mass);
        }
    }
    Ok(best.0)
}

/// Outcome of [`few_shot_sample`].
#[derive(Debug, Clone, PartialEq)]
pub struct FewShotSample {
    pub records: Vec<SurvivalRecord>,
    /// 1-based classes that had no members.
    pub empty_classes: Vec<usize>,
}

pub fn few_shot_sample(
    records: &[SurvivalRecord],
    grid: &TimeGrid,
    km: &KmCurve,
    shots_per_class: usize,
    seed: u64,
) -> Result<FewShotSample> {
    if shots_per_class == 0 {
        return Err(Error::Invalid("shots_per_class must be >= 1".into()));
    }
    let mut by_class: Vec<Vec<&SurvivalRecord>> = vec![Vec::new(); grid.num_classes()];
    for r in records {
        let c = if r.event { grid.class_of(r.time)? } else { estimate_censored_class(r, grid, km)? };
        by_class[c - 1].push(r);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = FewShotSample { records: Vec::new(), empty_classes: Vec::new() };
    for (i, members) in by_class.iter_mut().enumerate() {
        if members.is_empty() {
            out.empty_classes.push(i + 1);
            continue;
        }
        members.shuffle(&mut rng);
        out.records.extend(members.iter().take(shots_per_class).map(|r| (*r).clone()));
    }
    Ok(out)
}
