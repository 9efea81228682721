//! Counterfactual error metrics, group R², oracle disentanglement measures,
//! axiomatic metrics and exact enumeration checks of the variational bounds
//! on discrete SCMs.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::models::{ModelError, VciModel};
use crate::objectives::latent_kl_unit_gaussians;
use crate::scm::{blob_attributes, DiscreteScm, FullSample, Scm, ScmError, Treatment};
use crate::tensor::Real;

/// Rows per untaped forward pass.
pub const EVAL_CHUNK: usize = 1024;
/// Largest support size the bound verifiers enumerate.
pub const MAX_ENUM_SUPPORT: usize = 16;
/// Numerical tolerance of the bound checks.
pub const BOUND_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Scm(#[from] ScmError),
    #[error("sample {0} lacks y_prime_true")]
    MissingGroundTruth(usize),
    #[error("no samples")]
    Empty,
    #[error("{0}")]
    Malformed(String),
    #[error("stratum {0} has fewer than 2 components")]
    TooFewComponents(usize),
    #[error("metric needs the blob benchmark")]
    NotBlob,
    #[error("discrete SCM support {0} exceeds the enumeration cap {MAX_ENUM_SUPPORT}")]
    SupportTooLarge(usize),
}

/// Anything that maps `(y, t, x, t')` rows to counterfactual outcomes.
pub trait CounterfactualPredictor {
    fn predict(&self, samples: &[FullSample], t_prime: &[Treatment]) -> Result<Vec<Vec<f64>>, EvalError>;
}

impl<R: Real> CounterfactualPredictor for VciModel<R> {
    fn predict(&self, samples: &[FullSample], t_prime: &[Treatment]) -> Result<Vec<Vec<f64>>, EvalError> {
        let mut out = Vec::with_capacity(samples.len());
        for (chunk, tp) in samples.chunks(EVAL_CHUNK).zip(t_prime.chunks(EVAL_CHUNK)) {
            let y: Vec<Vec<f64>> = chunk.iter().map(|s| s.y.clone()).collect();
            let t: Vec<Treatment> = chunk.iter().map(|s| s.t.clone()).collect();
            let x: Vec<Vec<usize>> = chunk.iter().map(|s| s.x.clone()).collect();
            out.extend(self.counterfactual(&y, &t, &x, tp)?);
        }
        Ok(out)
    }
}

/// Replays the generator's ground truth; only valid at the sample's own `t'`
/// (or at `t`, where it returns `y`).
#[derive(Clone, Copy, Debug, Default)]
pub struct OracleReplay;

impl CounterfactualPredictor for OracleReplay {
    fn predict(&self, samples: &[FullSample], t_prime: &[Treatment]) -> Result<Vec<Vec<f64>>, EvalError> {
        samples
            .iter()
            .zip(t_prime)
            .enumerate()
            .map(|(i, (s, tp))| {
                if *tp == s.t {
                    Ok(s.y.clone())
                } else if *tp == s.t_prime {
                    s.y_prime_true.clone().ok_or(EvalError::MissingGroundTruth(i))
                } else {
                    Err(EvalError::Malformed(format!("oracle replay has no outcome for sample {i} at {tp:?}")))
                }
            })
            .collect()
    }
}

/// Returns the factual outcome for every treatment.
#[derive(Clone, Copy, Debug, Default)]
pub struct IdentityPredictor;

impl CounterfactualPredictor for IdentityPredictor {
    fn predict(&self, samples: &[FullSample], _t_prime: &[Treatment]) -> Result<Vec<Vec<f64>>, EvalError> {
        Ok(samples.iter().map(|s| s.y.clone()).collect())
    }
}

/// Anything that produces latent means for `(y, t, x)` rows.
pub trait LatentEncoder {
    fn encode(&self, y: &[Vec<f64>], t: &[Treatment], x: &[Vec<usize>]) -> Result<Vec<Vec<f64>>, EvalError>;
}

impl<R: Real> LatentEncoder for VciModel<R> {
    fn encode(&self, y: &[Vec<f64>], t: &[Treatment], x: &[Vec<usize>]) -> Result<Vec<Vec<f64>>, EvalError> {
        let mut out = Vec::with_capacity(y.len());
        for start in (0..y.len()).step_by(EVAL_CHUNK) {
            let end = (start + EVAL_CHUNK).min(y.len());
            out.extend(self.encode_mean(&y[start..end], &t[start..end], &x[start..end])?);
        }
        Ok(out)
    }
}

fn mse_rows(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let n = a.len() as f64;
    a.iter()
        .zip(b)
        .map(|(p, q)| p.iter().zip(q).map(|(u, v)| (u - v) * (u - v)).sum::<f64>() / p.len().max(1) as f64)
        .sum::<f64>()
        / n
}

fn ground_truth(samples: &[FullSample]) -> Result<Vec<&Vec<f64>>, EvalError> {
    samples
        .iter()
        .enumerate()
        .map(|(i, s)| s.y_prime_true.as_ref().ok_or(EvalError::MissingGroundTruth(i)))
        .collect()
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CounterfactualErrors {
    /// Mean over samples of the per-dimension squared error.
    pub mse: f64,
    pub thickness_mae: Option<f64>,
    pub intensity_mae: Option<f64>,
}

/// Errors of the predicted counterfactuals at each sample's `t'` against
/// `y_prime_true`. Attribute MAEs compare oracle readouts of prediction and
/// ground truth when `scm` is the blob benchmark.
pub fn counterfactual_errors(
    predictor: &impl CounterfactualPredictor,
    samples: &[FullSample],
    scm: Option<&Scm>,
) -> Result<CounterfactualErrors, EvalError> {
    if samples.is_empty() {
        return Err(EvalError::Empty);
    }
    let truth = ground_truth(samples)?;
    let t_prime: Vec<Treatment> = samples.iter().map(|s| s.t_prime.clone()).collect();
    let pred = predictor.predict(samples, &t_prime)?;
    let truth_owned: Vec<Vec<f64>> = truth.into_iter().cloned().collect();
    let mse = mse_rows(&pred, &truth_owned);
    let (mut thickness_mae, mut intensity_mae) = (None, None);
    if let Some(blob) = scm.and_then(Scm::blob) {
        let res = blob.resolution();
        let (mut th, mut it) = (0.0, 0.0);
        for (p, q) in pred.iter().zip(&truth_owned) {
            let (pt, pi) = blob_attributes(p, res)?;
            let (qt, qi) = blob_attributes(q, res)?;
            th += (pt - qt).abs();
            it += (pi - qi).abs();
        }
        thickness_mae = Some(th / pred.len() as f64);
        intensity_mae = Some(it / pred.len() as f64);
    }
    Ok(CounterfactualErrors {
        mse,
        thickness_mae,
        intensity_mae,
    })
}

pub fn counterfactual_mse(predictor: &impl CounterfactualPredictor, samples: &[FullSample]) -> Result<f64, EvalError> {
    Ok(counterfactual_errors(predictor, samples, None)?.mse)
}

/// Reconstruction error: the counterfactual path with `t' = t`.
pub fn reconstruction_mse(predictor: &impl CounterfactualPredictor, samples: &[FullSample]) -> Result<f64, EvalError> {
    if samples.is_empty() {
        return Err(EvalError::Empty);
    }
    let t: Vec<Treatment> = samples.iter().map(|s| s.t.clone()).collect();
    let pred = predictor.predict(samples, &t)?;
    let y: Vec<Vec<f64>> = samples.iter().map(|s| s.y.clone()).collect();
    Ok(mse_rows(&pred, &y))
}

/// R² of one predicted mean vector against the truth over the listed
/// components.
fn r2(pred: &[f64], truth: &[f64], comps: &[usize]) -> f64 {
    let k = comps.len() as f64;
    let mean = comps.iter().map(|&c| truth[c]).sum::<f64>() / k;
    let ss_tot: f64 = comps.iter().map(|&c| (truth[c] - mean).powi(2)).sum();
    let ss_res: f64 = comps.iter().map(|&c| (truth[c] - pred[c]).powi(2)).sum();
    if ss_tot == 0.0 {
        if ss_res == 0.0 {
            1.0
        } else {
            f64::NEG_INFINITY
        }
    } else {
        1.0 - ss_res / ss_tot
    }
}

/// Mean over strata of the R² between predicted and true stratum mean
/// vectors. `components[s]` restricts stratum `s` to a component subset.
pub fn group_r2(
    predicted: &[Vec<f64>],
    truth: &[Vec<f64>],
    components: Option<&[Vec<usize>]>,
) -> Result<f64, EvalError> {
    if predicted.is_empty() {
        return Err(EvalError::Empty);
    }
    if predicted.len() != truth.len() || components.is_some_and(|c| c.len() != truth.len()) {
        return Err(EvalError::Malformed("predictions, truths and component sets disagree in length".into()));
    }
    let mut total = 0.0;
    for (s, (p, t)) in predicted.iter().zip(truth).enumerate() {
        if p.len() != t.len() {
            return Err(EvalError::Malformed(format!("stratum {s}: prediction and truth widths differ")));
        }
        let comps: Vec<usize> = match components {
            Some(c) => c[s].clone(),
            None => (0..t.len()).collect(),
        };
        if comps.len() < 2 {
            return Err(EvalError::TooFewComponents(s));
        }
        if comps.iter().any(|&c| c >= t.len()) {
            return Err(EvalError::Malformed(format!("stratum {s}: component index out of range")));
        }
        total += r2(p, t, &comps);
    }
    Ok(total / predicted.len() as f64)
}

/// Indices of the `k` components with largest `|effect|`, ties broken by
/// index.
pub fn hard_components(effect: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..effect.len()).collect();
    idx.sort_by(|&a, &b| effect[b].abs().total_cmp(&effect[a].abs()).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// A z-sharing pair from the generator: `(y, t)` and `(y', t')` of one
/// individual.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbePair {
    pub x: Vec<usize>,
    pub t: Treatment,
    pub y: Vec<f64>,
    pub t_prime: Treatment,
    pub y_prime: Vec<f64>,
}

/// Probe pairs from samples with ground truth; pairs with `t' = t` are
/// skipped.
pub fn consistency_probes(samples: &[FullSample]) -> Result<Vec<ProbePair>, EvalError> {
    let mut out = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        let yp = s.y_prime_true.as_ref().ok_or(EvalError::MissingGroundTruth(i))?;
        if s.t_prime != s.t {
            out.push(ProbePair {
                x: s.x.clone(),
                t: s.t.clone(),
                y: s.y.clone(),
                t_prime: s.t_prime.clone(),
                y_prime: yp.clone(),
            });
        }
    }
    Ok(out)
}

/// Mean KL between the unit-variance latent posteriors of the factual and
/// counterfactual halves of each probe pair.
pub fn oracle_consistency_kl(encoder: &impl LatentEncoder, probes: &[ProbePair]) -> Result<f64, EvalError> {
    if probes.is_empty() {
        return Err(EvalError::Empty);
    }
    if let Some(p) = probes.iter().find(|p| p.y.len() != p.y_prime.len()) {
        return Err(EvalError::Malformed(format!(
            "probe outcome widths differ ({} vs {})",
            p.y.len(),
            p.y_prime.len()
        )));
    }
    let x: Vec<Vec<usize>> = probes.iter().map(|p| p.x.clone()).collect();
    let y: Vec<Vec<f64>> = probes.iter().map(|p| p.y.clone()).collect();
    let t: Vec<Treatment> = probes.iter().map(|p| p.t.clone()).collect();
    let yp: Vec<Vec<f64>> = probes.iter().map(|p| p.y_prime.clone()).collect();
    let tp: Vec<Treatment> = probes.iter().map(|p| p.t_prime.clone()).collect();
    let mu = encoder.encode(&y, &t, &x)?;
    let mu_p = encoder.encode(&yp, &tp, &x)?;
    Ok(mu.iter().zip(&mu_p).map(|(a, b)| latent_kl_unit_gaussians(a, b)).sum::<f64>() / probes.len() as f64)
}

/// Treatment readout before and after resampling the latent factor of one
/// record.
#[derive(Clone, Debug, PartialEq)]
pub struct RestrictivenessProbe {
    pub t_before: Treatment,
    pub t_after: Treatment,
}

/// The treatment is passed through as a point mass, so its readout cannot
/// move when the latent is resampled; the discrepancy is 0 by construction.
/// Probes whose two readouts differ are malformed.
pub fn oracle_restrictiveness(probes: &[RestrictivenessProbe]) -> Result<f64, EvalError> {
    if let Some((i, _)) = probes.iter().enumerate().find(|(_, p)| p.t_before != p.t_after) {
        return Err(EvalError::Malformed(format!(
            "probe {i} changes the treatment of one record"
        )));
    }
    Ok(0.0)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AxiomaticMetrics {
    /// MSE after one encode/decode cycle at the factual treatment.
    pub composition: f64,
    /// MSE after `cycles` cycles.
    pub composition_cycles: f64,
    pub cycles: usize,
    /// Mean squared attribute error of the counterfactual vs the target
    /// attributes, averaged over thickness and intensity.
    pub effectiveness: f64,
    pub effectiveness_thickness: f64,
    pub effectiveness_intensity: f64,
    /// MSE after the round trip `t → t' → t`.
    pub reversibility: f64,
}

/// Composition, effectiveness and reversibility on the blob benchmark.
pub fn axiomatic_metrics(
    predictor: &impl CounterfactualPredictor,
    samples: &[FullSample],
    cycles: usize,
    scm: &Scm,
) -> Result<AxiomaticMetrics, EvalError> {
    let blob = scm.blob().ok_or(EvalError::NotBlob)?;
    if samples.is_empty() {
        return Err(EvalError::Empty);
    }
    let cycles = cycles.max(1);
    let res = blob.resolution();
    let y: Vec<Vec<f64>> = samples.iter().map(|s| s.y.clone()).collect();
    let t: Vec<Treatment> = samples.iter().map(|s| s.t.clone()).collect();
    let tp: Vec<Treatment> = samples.iter().map(|s| s.t_prime.clone()).collect();

    let with_outcome = |ys: &[Vec<f64>], ts: &[Treatment]| -> Vec<FullSample> {
        samples
            .iter()
            .zip(ys)
            .zip(ts)
            .map(|((s, yv), tv)| FullSample {
                x: s.x.clone(),
                t: tv.clone(),
                t_prime: s.t_prime.clone(),
                y: yv.clone(),
                z_true: None,
                y_prime_true: None,
            })
            .collect()
    };

    let mut current = y.clone();
    let mut composition = 0.0;
    for c in 0..cycles {
        current = predictor.predict(&with_outcome(&current, &t), &t)?;
        if c == 0 {
            composition = mse_rows(&current, &y);
        }
    }
    let composition_cycles = mse_rows(&current, &y);

    let forward = predictor.predict(samples, &tp)?;
    let back = predictor.predict(&with_outcome(&forward, &tp), &t)?;
    let reversibility = mse_rows(&back, &y);

    let (mut eth, mut ein) = (0.0, 0.0);
    for (img, tv) in forward.iter().zip(&tp) {
        let (th, it) = blob_attributes(img, res)?;
        let (gth, git) = scm
            .blob_target(tv)
            .ok_or_else(|| EvalError::Malformed(format!("treatment {tv:?} has no target attributes")))?;
        eth += (th - gth).powi(2);
        ein += (it - git).powi(2);
    }
    let n = samples.len() as f64;
    let (eth, ein) = (eth / n, ein / n);
    Ok(AxiomaticMetrics {
        composition,
        composition_cycles,
        cycles,
        effectiveness: (eth + ein) / 2.0,
        effectiveness_thickness: eth,
        effectiveness_intensity: ein,
        reversibility,
    })
}

/// Per-dimension variance of the factual outcomes, averaged over dimensions.
pub fn outcome_variance(samples: &[FullSample]) -> f64 {
    let n = samples.len() as f64;
    let d = samples.first().map_or(0, |s| s.y.len());
    if d == 0 {
        return 0.0;
    }
    let mut total = 0.0;
    for j in 0..d {
        let mean = samples.iter().map(|s| s.y[j]).sum::<f64>() / n;
        total += samples.iter().map(|s| (s.y[j] - mean).powi(2)).sum::<f64>() / n;
    }
    total / d as f64
}

/// One checked assignment of a discrete SCM.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    pub x: usize,
    pub t: usize,
    pub t_prime: usize,
    pub y: usize,
    /// `None` when `y'` is integrated out.
    pub y_prime: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundCheckResult {
    pub lhs: f64,
    pub rhs: f64,
    pub gap: f64,
    pub assignment: Assignment,
}

impl BoundCheckResult {
    fn new(lhs: f64, rhs: f64, assignment: Assignment) -> Self {
        Self {
            lhs,
            rhs,
            gap: lhs - rhs,
            assignment,
        }
    }

    pub fn holds(&self) -> bool {
        self.gap >= -BOUND_TOLERANCE
    }
}

fn check_enumerable(scm: &DiscreteScm) -> Result<(), EvalError> {
    scm.validate()?;
    let worst = scm.nx().max(scm.nz()).max(scm.nt()).max(scm.ny());
    if worst > MAX_ENUM_SUPPORT {
        return Err(EvalError::SupportTooLarge(worst));
    }
    Ok(())
}

/// Checks the individual-level lower bound on `log p(y' | y, x, t, t')` for
/// every assignment of positive probability, by full enumeration.
pub fn verify_elbo_discrete(scm: &DiscreteScm) -> Result<Vec<BoundCheckResult>, EvalError> {
    check_enumerable(scm)?;
    let mut out = Vec::new();
    for x in 0..scm.nx() {
        if scm.p_x[x] <= 0.0 {
            continue;
        }
        for t in 0..scm.nt() {
            if scm.p_t_given_x[x][t] <= 0.0 {
                continue;
            }
            for y in 0..scm.ny() {
                let Some(q) = scm.posterior_z(x, t, y) else { continue };
                let p_y = scm.p_y_given_xt(x, t, y);
                let recon: f64 = (0..scm.nz())
                    .filter(|&z| q[z] > 0.0)
                    .map(|z| q[z] * scm.p_y_given_zt[z][t][y].ln())
                    .sum();
                for tp in 0..scm.nt() {
                    for yp in 0..scm.ny() {
                        let Some(qp) = scm.posterior_z(x, tp, yp) else { continue };
                        let joint: f64 = (0..scm.nz()).map(|z| q[z] * scm.p_y_given_zt[z][tp][yp]).sum();
                        if joint <= 0.0 {
                            continue;
                        }
                        let lhs = joint.ln();
                        let mut kl = 0.0;
                        for z in (0..scm.nz()).filter(|&z| q[z] > 0.0) {
                            kl += if qp[z] > 0.0 {
                                q[z] * (q[z].ln() - qp[z].ln())
                            } else {
                                f64::INFINITY
                            };
                        }
                        let rhs = recon - (p_y.ln() - scm.p_y_given_xt(x, tp, yp).ln()) - kl;
                        out.push(BoundCheckResult::new(
                            lhs,
                            rhs,
                            Assignment {
                                x,
                                t,
                                t_prime: tp,
                                y,
                                y_prime: Some(yp),
                            },
                        ));
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Checks the lower bound on `log p(y | x, t)` that treats `y'` as a latent
/// variable, with all expectations enumerated exactly.
pub fn verify_implicit_elbo_discrete(scm: &DiscreteScm) -> Result<Vec<BoundCheckResult>, EvalError> {
    check_enumerable(scm)?;
    let mut out = Vec::new();
    for x in 0..scm.nx() {
        if scm.p_x[x] <= 0.0 {
            continue;
        }
        for t in 0..scm.nt() {
            if scm.p_t_given_x[x][t] <= 0.0 {
                continue;
            }
            for y in 0..scm.ny() {
                let Some(q) = scm.posterior_z(x, t, y) else { continue };
                let lhs = scm.p_y_given_xt(x, t, y).ln();
                let zs: Vec<usize> = (0..scm.nz()).filter(|&z| q[z] > 0.0).collect();
                let recon: f64 = zs.iter().map(|&z| q[z] * scm.p_y_given_zt[z][t][y].ln()).sum();
                for tp in 0..scm.nt() {
                    let mut prior_kl = 0.0;
                    let mut joint_kl = 0.0;
                    for &z in &zs {
                        for yp in 0..scm.ny() {
                            let p = scm.p_y_given_zt[z][tp][yp];
                            if p <= 0.0 {
                                continue;
                            }
                            prior_kl += q[z] * p * (p.ln() - scm.p_y_given_xt(x, tp, yp).ln());
                            let qp = scm.posterior_z(x, tp, yp).expect("p(y'|x,t') ≥ p(z|x)p(y'|z,t') > 0");
                            joint_kl += q[z] * p * (q[z].ln() - qp[z].ln());
                        }
                    }
                    out.push(BoundCheckResult::new(
                        lhs,
                        recon - prior_kl - joint_kl,
                        Assignment {
                            x,
                            t,
                            t_prime: tp,
                            y,
                            y_prime: None,
                        },
                    ));
                }
            }
        }
    }
    Ok(out)
}

/// `count` random discrete SCMs with every support size drawn from
/// `1..=max_support` and Dirichlet(1) tables.
pub fn random_discrete_scms(count: usize, max_support: usize, seed: u64) -> Vec<DiscreteScm> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let mut size = || rng.gen_range(1..=max_support.max(1));
            let (nx, nz, nt, ny) = (size(), size(), size(), size());
            DiscreteScm::random(nx, nz, nt, ny, &mut rng)
        })
        .collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BoundSummary {
    pub scms: usize,
    pub scms_passed: usize,
    pub assignments: usize,
    pub min_gap: f64,
}

/// Runs a verifier over many SCMs.
pub fn summarize_bounds(
    scms: &[DiscreteScm],
    verify: impl Fn(&DiscreteScm) -> Result<Vec<BoundCheckResult>, EvalError>,
) -> Result<BoundSummary, EvalError> {
    let mut s = BoundSummary {
        min_gap: f64::INFINITY,
        ..Default::default()
    };
    for scm in scms {
        let checks = verify(scm)?;
        s.scms += 1;
        s.assignments += checks.len();
        if checks.iter().all(BoundCheckResult::holds) {
            s.scms_passed += 1;
        }
        for c in &checks {
            s.min_gap = s.min_gap.min(c.gap);
        }
    }
    Ok(s)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cf_mse: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reconstruction_mse: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub thickness_mae: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub intensity_mae: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub r2_all: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub r2_hard: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub oracle_consistency_kl: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub oracle_restrictiveness: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub axiomatic: Option<AxiomaticMetrics>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub verify_elbo: Option<BoundSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub verify_implicit_elbo: Option<BoundSummary>,
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    pub per_seed: BTreeMap<u64, BTreeMap<String, f64>>,
}

/// Predicted and true mean outcome per `(x, α)` stratum for the group R²
/// metric. Predictions average the model's counterfactuals at `α` over the
/// validation samples with covariate `x`; truths come from the generator.
/// Strata without validation samples are skipped. Returns
/// `(predicted, truth, hard components)`.
pub fn stratum_means(
    predictor: &impl CounterfactualPredictor,
    scm: &Scm,
    samples: &[FullSample],
    control: &Treatment,
    hard_k: usize,
    mc_draws: usize,
) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<Vec<usize>>), EvalError> {
    let levels = scm
        .treatment_space()
        .levels()
        .ok_or_else(|| EvalError::Malformed("group R² needs categorical treatments".into()))?;
    let cov = scm.covariate_space();
    let (mut pred, mut truth, mut hard) = (Vec::new(), Vec::new(), Vec::new());
    for s in 0..cov.strata() {
        let x = cov.unflat(s);
        let members: Vec<FullSample> = samples.iter().filter(|v| v.x == x).cloned().collect();
        if members.is_empty() {
            continue;
        }
        let base = scm.true_marginal_with(control, Some(&x), mc_draws)?.mean;
        for l in 0..levels {
            let alpha = Treatment::Level(l);
            if alpha == *control {
                continue;
            }
            let tp = vec![alpha.clone(); members.len()];
            let p = predictor.predict(&members, &tp)?;
            let d = p[0].len();
            let mean: Vec<f64> = (0..d).map(|j| p.iter().map(|r| r[j]).sum::<f64>() / p.len() as f64).collect();
            let tru = scm.true_marginal_with(&alpha, Some(&x), mc_draws)?.mean;
            let effect: Vec<f64> = tru.iter().zip(&base).map(|(a, b)| a - b).collect();
            hard.push(hard_components(&effect, hard_k));
            pred.push(mean);
            truth.push(tru);
        }
    }
    Ok((pred, truth, hard))
}
