//! Marginal-effect estimators on top of individual counterfactual
//! predictions: the one-step robust estimator, its covariate-specific
//! version, the plug-in mean, and influence-function confidence intervals.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

use crate::models::{ModelError, PropensityModel, VciModel, DEFAULT_EPS_POS};
use crate::scm::{FullSample, Scm, Treatment};
use crate::tensor::Real;

pub const DEFAULT_CI_LEVEL: f64 = 0.95;

const PREDICTION_CHUNK: usize = 1024;

#[derive(Debug, Error)]
pub enum EstimatorError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("no observations")]
    Empty,
    #[error("influence variance needs at least 2 rows, got {0}")]
    TooFewRows(usize),
    #[error("missing prediction for observation {0}")]
    MissingPrediction(usize),
    #[error("duplicate prediction for observation {0}")]
    DuplicatePrediction(usize),
    #[error("row {row} has width {found}, expected {expected}")]
    Width { row: usize, expected: usize, found: usize },
    #[error("propensity {value} for observation {index} is not positive")]
    Propensity { index: usize, value: f64 },
    #[error("no observations with covariate {0:?}")]
    EmptyStratum(Vec<usize>),
    #[error("ci level {0} outside (0, 1)")]
    CiLevel(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorTag {
    Robust,
    PlugInMean,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimatorOptions {
    pub ci_level: f64,
    pub eps_pos: f64,
}

impl Default for EstimatorOptions {
    fn default() -> Self {
        Self {
            ci_level: DEFAULT_CI_LEVEL,
            eps_pos: DEFAULT_EPS_POS,
        }
    }
}

/// `variance` is the diagonal of the estimator covariance (influence
/// variance divided by `n`). With `n = 1` no variance can be estimated;
/// the report is flagged `degenerate` and the interval collapses to the
/// estimate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimatorReport {
    pub tag: EstimatorTag,
    pub n: usize,
    pub estimate: Vec<f64>,
    pub variance: Vec<f64>,
    pub ci_lower: Vec<f64>,
    pub ci_upper: Vec<f64>,
    pub ci_level: f64,
    pub degenerate: bool,
}

impl EstimatorReport {
    pub fn std_error(&self) -> Vec<f64> {
        self.variance.iter().map(|v| v.sqrt()).collect()
    }
}

/// Mean, covariance diagonal and normal interval of influence rows.
#[derive(Clone, Debug, PartialEq)]
pub struct InfluenceSummary {
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
    pub ci_lower: Vec<f64>,
    pub ci_upper: Vec<f64>,
}

fn check_widths(rows: &[Vec<f64>]) -> Result<usize, EstimatorError> {
    let d = rows.first().ok_or(EstimatorError::Empty)?.len();
    for (i, r) in rows.iter().enumerate() {
        if r.len() != d {
            return Err(EstimatorError::Width {
                row: i,
                expected: d,
                found: r.len(),
            });
        }
    }
    Ok(d)
}

fn column_means(rows: &[Vec<f64>], d: usize) -> Vec<f64> {
    let n = rows.len() as f64;
    (0..d).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n).collect()
}

fn z_value(level: f64) -> Result<f64, EstimatorError> {
    if !(level > 0.0 && level < 1.0) {
        return Err(EstimatorError::CiLevel(level));
    }
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    Ok(normal.inverse_cdf(0.5 + level / 2.0))
}

/// Empirical second moment of the centered rows divided by `n`, with a
/// two-sided normal interval at `level`.
pub fn influence_variance(rows: &[Vec<f64>], level: f64) -> Result<InfluenceSummary, EstimatorError> {
    if rows.len() < 2 {
        return Err(EstimatorError::TooFewRows(rows.len()));
    }
    let d = check_widths(rows)?;
    let z = z_value(level)?;
    let n = rows.len() as f64;
    let mean = column_means(rows, d);
    let variance: Vec<f64> = (0..d)
        .map(|j| rows.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / n / n)
        .collect();
    let half: Vec<f64> = variance.iter().map(|v| z * v.sqrt()).collect();
    Ok(InfluenceSummary {
        ci_lower: mean.iter().zip(&half).map(|(m, h)| m - h).collect(),
        ci_upper: mean.iter().zip(&half).map(|(m, h)| m + h).collect(),
        mean,
        variance,
    })
}

fn report_from_rows(rows: &[Vec<f64>], tag: EstimatorTag, level: f64) -> Result<EstimatorReport, EstimatorError> {
    let d = check_widths(rows)?;
    if rows.len() == 1 {
        z_value(level)?;
        let est = column_means(rows, d);
        return Ok(EstimatorReport {
            tag,
            n: 1,
            variance: vec![0.0; d],
            ci_lower: est.clone(),
            ci_upper: est.clone(),
            estimate: est,
            ci_level: level,
            degenerate: true,
        });
    }
    let s = influence_variance(rows, level)?;
    Ok(EstimatorReport {
        tag,
        n: rows.len(),
        estimate: s.mean,
        variance: s.variance,
        ci_lower: s.ci_lower,
        ci_upper: s.ci_upper,
        ci_level: level,
        degenerate: false,
    })
}

/// Propensity `ê(t | x)`.
pub trait PropensityScore {
    fn score(&self, x: &[usize], t: &Treatment) -> Result<f64, EstimatorError>;
}

impl PropensityScore for PropensityModel {
    fn score(&self, x: &[usize], t: &Treatment) -> Result<f64, EstimatorError> {
        Ok(self.prob(x, t)?)
    }
}

/// The generator's own treatment assignment.
impl PropensityScore for Scm {
    fn score(&self, x: &[usize], t: &Treatment) -> Result<f64, EstimatorError> {
        let l = t.level().ok_or_else(|| ModelError::Treatment(t.clone()))?;
        self.propensity(x, l)
            .ok_or_else(|| ModelError::MissingStratum { x: x.to_vec(), t: l }.into())
    }
}

/// Per-observation rows `φ_k = I(t_k = α)/ê(t_k|x_k)·(y_k − m_k) + m_k`.
/// Their mean is the robust estimate. `1/ê` is capped at `1/eps_pos`.
pub fn robust_rows(
    samples: &[FullSample],
    predictions: &[Vec<f64>],
    propensity: &impl PropensityScore,
    alpha: &Treatment,
    eps_pos: f64,
) -> Result<Vec<Vec<f64>>, EstimatorError> {
    if samples.is_empty() {
        return Err(EstimatorError::Empty);
    }
    if predictions.len() < samples.len() {
        return Err(EstimatorError::MissingPrediction(predictions.len()));
    }
    let cap = 1.0 / eps_pos;
    let d = samples[0].y.len();
    samples
        .iter()
        .zip(predictions)
        .enumerate()
        .map(|(k, (s, m))| {
            if m.len() != d || s.y.len() != d {
                return Err(EstimatorError::Width {
                    row: k,
                    expected: d,
                    found: if m.len() != d { m.len() } else { s.y.len() },
                });
            }
            if s.t != *alpha {
                return Ok(m.clone());
            }
            let e = propensity.score(&s.x, &s.t)?;
            if !(e > 0.0) || !e.is_finite() {
                return Err(EstimatorError::Propensity { index: k, value: e });
            }
            let w = (1.0 / e).min(cap);
            Ok(s.y.iter().zip(m).map(|(y, mk)| w * (y - mk) + mk).collect())
        })
        .collect()
}

/// One-step robust estimate of `E[Y'_{do(T'=α)}]`.
pub fn robust_ate(
    samples: &[FullSample],
    predictions: &[Vec<f64>],
    propensity: &impl PropensityScore,
    alpha: &Treatment,
    opts: &EstimatorOptions,
) -> Result<EstimatorReport, EstimatorError> {
    let rows = robust_rows(samples, predictions, propensity, alpha, opts.eps_pos)?;
    report_from_rows(&rows, EstimatorTag::Robust, opts.ci_level)
}

/// The robust estimator restricted to observations with `x = c`.
pub fn robust_ate_covariate(
    samples: &[FullSample],
    predictions: &[Vec<f64>],
    propensity: &impl PropensityScore,
    alpha: &Treatment,
    c: &[usize],
    opts: &EstimatorOptions,
) -> Result<EstimatorReport, EstimatorError> {
    if predictions.len() < samples.len() {
        return Err(EstimatorError::MissingPrediction(predictions.len()));
    }
    let (sub, preds): (Vec<FullSample>, Vec<Vec<f64>>) = samples
        .iter()
        .zip(predictions)
        .filter(|(s, _)| s.x == c)
        .map(|(s, m)| (s.clone(), m.clone()))
        .unzip();
    if sub.is_empty() {
        return Err(EstimatorError::EmptyStratum(c.to_vec()));
    }
    robust_ate(&sub, &preds, propensity, alpha, opts)
}

/// Componentwise mean of the predictions.
pub fn plug_in_mean(predictions: &[Vec<f64>], opts: &EstimatorOptions) -> Result<EstimatorReport, EstimatorError> {
    report_from_rows(predictions, EstimatorTag::PlugInMean, opts.ci_level)
}

/// `Σ_c (n_c / n) Ξ̂_c` over the observed covariate strata.
pub fn recombine_strata(
    samples: &[FullSample],
    predictions: &[Vec<f64>],
    propensity: &impl PropensityScore,
    alpha: &Treatment,
    opts: &EstimatorOptions,
) -> Result<Vec<f64>, EstimatorError> {
    let mut counts: BTreeMap<&[usize], usize> = BTreeMap::new();
    for s in samples {
        *counts.entry(s.x.as_slice()).or_default() += 1;
    }
    let n = samples.len() as f64;
    let mut out: Option<Vec<f64>> = None;
    for (c, nc) in counts {
        let r = robust_ate_covariate(samples, predictions, propensity, alpha, c, opts)?;
        let acc = out.get_or_insert_with(|| vec![0.0; r.estimate.len()]);
        for (a, e) in acc.iter_mut().zip(&r.estimate) {
            *a += nc as f64 / n * e;
        }
    }
    out.ok_or(EstimatorError::Empty)
}

/// How `m_k = E[Y' | z_k, T' = α]` is computed from the model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum PredictionMode {
    /// `z_k ~ q(z | y_k, t_k, x_k)` drawn with a seeded generator.
    Sampled { seed: u64 },
    /// `z_k` is the posterior mean.
    Mean,
}

/// Model predictions `m_k` at treatment `alpha` for every sample.
pub fn model_predictions<R: Real>(
    model: &VciModel<R>,
    samples: &[FullSample],
    alpha: &Treatment,
    mode: PredictionMode,
) -> Result<Vec<Vec<f64>>, EstimatorError> {
    let mut rng = match mode {
        PredictionMode::Sampled { seed } => Some(ChaCha8Rng::seed_from_u64(seed)),
        PredictionMode::Mean => None,
    };
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(PREDICTION_CHUNK) {
        let y: Vec<Vec<f64>> = chunk.iter().map(|s| s.y.clone()).collect();
        let t: Vec<Treatment> = chunk.iter().map(|s| s.t.clone()).collect();
        let x: Vec<Vec<usize>> = chunk.iter().map(|s| s.x.clone()).collect();
        let mut z = model.encode_mean(&y, &t, &x)?;
        if let Some(rng) = rng.as_mut() {
            for row in &mut z {
                for v in row.iter_mut() {
                    *v += rng.sample::<f64, _>(StandardNormal);
                }
            }
        }
        out.extend(model.decode_mean(&z, &vec![alpha.clone(); chunk.len()])?);
    }
    Ok(out)
}

#[derive(Serialize, Deserialize)]
struct PredictionLine {
    index: usize,
    m: Vec<f64>,
}

/// Writes one `{"index", "m"}` JSON object per line.
pub fn write_predictions(path: &Path, predictions: &[Vec<f64>]) -> Result<(), EstimatorError> {
    let mut out = String::new();
    for (index, m) in predictions.iter().enumerate() {
        out.push_str(&serde_json::to_string(&PredictionLine { index, m: m.clone() })?);
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

/// Reads predictions in any line order; indices must cover `0..len` once.
pub fn read_predictions(path: &Path) -> Result<Vec<Vec<f64>>, EstimatorError> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut slots: Vec<Option<Vec<f64>>> = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let p: PredictionLine = serde_json::from_str(&line)?;
        if p.index >= slots.len() {
            slots.resize(p.index + 1, None);
        }
        if slots[p.index].is_some() {
            return Err(EstimatorError::DuplicatePrediction(p.index));
        }
        slots[p.index] = Some(p.m);
    }
    slots
        .into_iter()
        .enumerate()
        .map(|(i, m)| m.ok_or(EstimatorError::MissingPrediction(i)))
        .collect()
}

/// One CSV row per (estimator, dimension).
pub fn reports_csv(reports: &[EstimatorReport]) -> String {
    let mut out = String::from("estimator,dim,estimate,variance,ci_lower,ci_upper\n");
    for r in reports {
        let tag = match r.tag {
            EstimatorTag::Robust => "robust",
            EstimatorTag::PlugInMean => "plug_in_mean",
        };
        for j in 0..r.estimate.len() {
            let _ = writeln!(
                out,
                "{tag},{j},{},{},{},{}",
                r.estimate[j], r.variance[j], r.ci_lower[j], r.ci_upper[j]
            );
        }
    }
    out
}
