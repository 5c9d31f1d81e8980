//! Survival evaluation: concordance, hinge MAE, D-calibration and a
//! median-split log-rank test.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::{kaplan_meier, KmCurve, SurvivalRecord, TimeGrid};

/// How risk ties among comparable pairs are scored.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TieMode {
    /// Ties score 0 (strict indicator).
    #[default]
    Strict,
    /// Ties score 0.5, as most survival toolkits do.
    Half,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Concordance {
    pub ci: f64,
    pub concordant: f64,
    pub comparable: usize,
}

pub fn concordance(risks: &[f64], records: &[SurvivalRecord], ties: TieMode) -> Result<Concordance> {
    if risks.len() != records.len() {
        return Err(Error::Shape(format!("{} risks for {} records", risks.len(), records.len())));
    }
    let mut concordant = 0.0;
    let mut comparable = 0usize;
    for (i, ri) in records.iter().enumerate() {
        if !ri.event {
            continue;
        }
        for (j, rj) in records.iter().enumerate() {
            if ri.time < rj.time {
                comparable += 1;
                if risks[i] > risks[j] {
                    concordant += 1.0;
                } else if risks[i] == risks[j] && ties == TieMode::Half {
                    concordant += 0.5;
                }
            }
        }
    }
    if comparable == 0 {
        return Err(Error::CiUndefined);
    }
    Ok(Concordance { ci: concordant / comparable as f64, concordant, comparable })
}

/// Concordance index with strict risk comparison.
pub fn concordance_index(risks: &[f64], records: &[SurvivalRecord]) -> Result<f64> {
    Ok(concordance(risks, records, TieMode::Strict)?.ci)
}

/// Hinge absolute error: censored patients are only penalised when the
/// prediction falls before the censoring time.
pub fn mae(predicted: f64, record: &SurvivalRecord) -> f64 {
    if record.event {
        (record.time - predicted).abs()
    } else {
        (record.time - predicted).max(0.0)
    }
}

pub fn cohort_mae(predicted: &[f64], records: &[SurvivalRecord]) -> Result<f64> {
    if predicted.len() != records.len() || records.is_empty() {
        return Err(Error::Shape(format!("{} predictions for {} records", predicted.len(), records.len())));
    }
    Ok(predicted.iter().zip(records).map(|(p, r)| mae(*p, r)).sum::<f64>() / records.len() as f64)
}

/// Step-function survival at time `t`: `survival[c]` on bin `c`.
pub fn survival_at(survival: &[f64], grid: &TimeGrid, t: f64) -> Result<f64> {
    if survival.len() != grid.num_classes() {
        return Err(Error::Shape(format!("{} survival values for {} bins", survival.len(), grid.num_classes())));
    }
    Ok(survival[grid.class_of(t)? - 1])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DCalibration {
    pub statistic: f64,
    pub pvalue: f64,
    pub counts: Vec<usize>,
}

/// Pearson chi-square uniformity test of `S(t_i)` over `bins` equal-width
/// probability intervals. Callers pass uncensored patients only.
pub fn d_calibration(survival_at_event: &[f64], bins: usize) -> Result<DCalibration> {
    if bins < 2 {
        return Err(Error::Invalid(format!("d-calibration needs >= 2 bins, got {bins}")));
    }
    if survival_at_event.is_empty() {
        return Err(Error::NoEvents);
    }
    let mut counts = vec![0usize; bins];
    for &s in survival_at_event {
        if !(0.0..=1.0).contains(&s) {
            return Err(Error::Invalid(format!("survival value {s} outside [0, 1]")));
        }
        counts[((s * bins as f64) as usize).min(bins - 1)] += 1;
    }
    let expected = survival_at_event.len() as f64 / bins as f64;
    let statistic = counts.iter().map(|&o| (o as f64 - expected).powi(2) / expected).sum();
    Ok(DCalibration { statistic, pvalue: chi_square_sf(statistic, (bins - 1) as f64), counts })
}

/// Upper tail of the chi-square distribution with `dof` degrees of freedom.
pub fn chi_square_sf(x: f64, dof: f64) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    gamma_q(dof / 2.0, x / 2.0)
}

/// Lanczos approximation (g = 7, n = 9).
fn ln_gamma(x: f64) -> f64 {
    const G: f64 = 7.0;
    const COEF: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = COEF[0];
    let t = x + G + 0.5;
    for (i, c) in COEF.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// Regularized upper incomplete gamma `Q(a, x)`: series below `a + 1`,
/// Lentz continued fraction above.
pub fn gamma_q(a: f64, x: f64) -> f64 {
    const EPS: f64 = 1e-15;
    const MAX_ITER: usize = 10_000;
    if x <= 0.0 {
        return 1.0;
    }
    let log_prefix = a * x.ln() - x - ln_gamma(a);
    if x < a + 1.0 {
        let mut term = 1.0 / a;
        let mut sum = term;
        let mut n = a;
        for _ in 0..MAX_ITER {
            n += 1.0;
            term *= x / n;
            sum += term;
            if term.abs() < sum.abs() * EPS {
                break;
            }
        }
        (1.0 - sum * log_prefix.exp()).clamp(0.0, 1.0)
    } else {
        let tiny = 1e-300;
        let mut b = x + 1.0 - a;
        let mut c = 1.0 / tiny;
        let mut d = 1.0 / b;
        let mut h = d;
        for i in 1..MAX_ITER {
            let an = -(i as f64) * (i as f64 - a);
            b += 2.0;
            d = an * d + b;
            if d.abs() < tiny {
                d = tiny;
            }
            c = b + an / c;
            if c.abs() < tiny {
                c = tiny;
            }
            d = 1.0 / d;
            let delta = d * c;
            h *= delta;
            if (delta - 1.0).abs() < EPS {
                break;
            }
        }
        (h * log_prefix.exp()).clamp(0.0, 1.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRank {
    pub statistic: f64,
    pub pvalue: f64,
    pub observed: f64,
    pub expected: f64,
    pub variance: f64,
}

/// Two-group log-rank test; `in_group` marks membership of group 1.
pub fn log_rank(records: &[SurvivalRecord], in_group: &[bool]) -> Result<LogRank> {
    if records.len() != in_group.len() {
        return Err(Error::Shape(format!("{} records, {} group flags", records.len(), in_group.len())));
    }
    let mut times: Vec<f64> = records.iter().filter(|r| r.event).map(|r| r.time).collect();
    times.sort_by(f64::total_cmp);
    times.dedup();
    let (mut observed, mut expected, mut variance) = (0.0f64, 0.0f64, 0.0f64);
    for t in times {
        let (mut n, mut n1, mut d, mut d1) = (0.0, 0.0, 0.0, 0.0);
        for (r, &g) in records.iter().zip(in_group) {
            if r.time >= t {
                n += 1.0;
                if g {
                    n1 += 1.0;
                }
                if r.time == t && r.event {
                    d += 1.0;
                    if g {
                        d1 += 1.0;
                    }
                }
            }
        }
        observed += d1;
        expected += d * n1 / n;
        if n > 1.0 {
            variance += d * (n1 / n) * (1.0 - n1 / n) * (n - d) / (n - 1.0);
        }
    }
    let statistic = if variance > 0.0 { (observed - expected).powi(2) / variance } else { 0.0 };
    Ok(LogRank { statistic, pvalue: chi_square_sf(statistic, 1.0), observed, expected, variance })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RiskGrouping {
    /// `true` for the high-risk group.
    pub high_risk: Vec<bool>,
    pub median: f64,
    pub test: LogRank,
    pub low_km: KmCurve,
    pub high_km: KmCurve,
}

/// Splits at the median risk (ties go low) and compares the two groups.
pub fn risk_grouping_logrank(risks: &[f64], records: &[SurvivalRecord]) -> Result<RiskGrouping> {
    if risks.len() != records.len() {
        return Err(Error::Shape(format!("{} risks for {} records", risks.len(), records.len())));
    }
    if risks.is_empty() {
        return Err(Error::Empty("risks"));
    }
    let mut sorted = risks.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let median = if n % 2 == 1 { sorted[n / 2] } else { 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]) };
    let high_risk: Vec<bool> = risks.iter().map(|&r| r > median).collect();
    let n_high = high_risk.iter().filter(|&&h| h).count();
    if n_high < 2 || n - n_high < 2 {
        return Err(Error::Invalid(format!("degenerate risk groups: {} high, {} low", n_high, n - n_high)));
    }
    let pick = |h: bool| -> Vec<SurvivalRecord> {
        records.iter().zip(&high_risk).filter(|(_, &g)| g == h).map(|(r, _)| r.clone()).collect()
    };
    Ok(RiskGrouping {
        test: log_rank(records, &high_risk)?,
        median,
        low_km: kaplan_meier(&pick(false))?,
        high_km: kaplan_meier(&pick(true))?,
        high_risk,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DcalSummary {
    pub statistic: f64,
    pub pvalue: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRankSummary {
    pub statistic: f64,
    pub pvalue: f64,
    pub median_risk: f64,
    pub n_high: usize,
    pub n_low: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub ci: f64,
    pub mae: f64,
    pub dcal: DcalSummary,
    pub n_pairs_comparable: usize,
    pub n_patients: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub logrank: Option<LogRankSummary>,
}

impl EvaluationReport {
    /// Averages fold reports. The log-rank block is dropped because fold
    /// p-values do not average meaningfully.
    pub fn mean(reports: &[EvaluationReport]) -> Result<EvaluationReport> {
        if reports.is_empty() {
            return Err(Error::Empty("reports"));
        }
        let n = reports.len() as f64;
        let avg = |f: fn(&EvaluationReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        Ok(EvaluationReport {
            ci: avg(|r| r.ci),
            mae: avg(|r| r.mae),
            dcal: DcalSummary { statistic: avg(|r| r.dcal.statistic), pvalue: avg(|r| r.dcal.pvalue) },
            n_pairs_comparable: reports.iter().map(|r| r.n_pairs_comparable).sum(),
            n_patients: reports.iter().map(|r| r.n_patients).sum(),
            logrank: None,
        })
    }
}

/// Per-patient model outputs needed for evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct PatientOutput {
    pub risk: f64,
    pub expected_time: f64,
    /// Survival at the end of each bin.
    pub survival: Vec<f64>,
}

pub fn evaluate(
    outputs: &[PatientOutput],
    records: &[SurvivalRecord],
    grid: &TimeGrid,
    dcal_bins: usize,
    ties: TieMode,
) -> Result<(EvaluationReport, Option<RiskGrouping>)> {
    if outputs.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    let risks: Vec<f64> = outputs.iter().map(|o| o.risk).collect();
    let times: Vec<f64> = outputs.iter().map(|o| o.expected_time).collect();
    let c = concordance(&risks, records, ties)?;
    let mut s_event = Vec::new();
    for (o, r) in outputs.iter().zip(records) {
        if r.event {
            s_event.push(survival_at(&o.survival, grid, r.time)?);
        }
    }
    let dcal = d_calibration(&s_event, dcal_bins)?;
    let grouping = risk_grouping_logrank(&risks, records).ok();
    let logrank = grouping.as_ref().map(|g| {
        let n_high = g.high_risk.iter().filter(|&&h| h).count();
        LogRankSummary {
            statistic: g.test.statistic,
            pvalue: g.test.pvalue,
            median_risk: g.median,
            n_high,
            n_low: g.high_risk.len() - n_high,
        }
    });
    let report = EvaluationReport {
        ci: c.ci,
        mae: cohort_mae(&times, records)?,
        dcal: DcalSummary { statistic: dcal.statistic, pvalue: dcal.pvalue },
        n_pairs_comparable: c.comparable,
        n_patients: records.len(),
        logrank,
    };
    Ok((report, grouping))
}
