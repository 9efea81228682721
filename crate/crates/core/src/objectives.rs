//! The VCI evidence lower bound, the semi-autoencoding loss and the ablation
//! presets built from them. Losses follow the minimization convention.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::models::{taped_discriminator_losses, EmpiricalOutcomeModel, Encoder, ModelError, VciModel};
use crate::scm::Treatment;
use crate::tensor::{gradcheck, Graph, Module, Real, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum ObjectiveError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("empty batch")]
    EmptyBatch,
    #[error("batch fields disagree in length")]
    Ragged,
    #[error("non-finite {term} term")]
    NonFinite { term: &'static str },
    #[error("detach mode {0:?} needs a target encoder copy")]
    MissingTarget(DetachMode),
    #[error("adversarial supervision needs a discriminator")]
    MissingDiscriminator,
    #[error("unknown ablation mode `{0}` (expected hae, hae_a, sae or vci)")]
    UnknownMode(String),
}

/// One training record `b = (x, t, t', y)`, stored column-wise for a batch.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Batch {
    pub x: Vec<Vec<usize>>,
    pub t: Vec<Treatment>,
    pub t_prime: Vec<Treatment>,
    pub y: Vec<Vec<f64>>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    fn check(&self) -> Result<(), ObjectiveError> {
        if self.is_empty() {
            return Err(ObjectiveError::EmptyBatch);
        }
        let n = self.len();
        if self.x.len() != n || self.t.len() != n || self.t_prime.len() != n {
            return Err(ObjectiveError::Ragged);
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationMode {
    Hae,
    HaeA,
    Sae,
    Vci,
}

impl AblationMode {
    pub const ALL: [AblationMode; 4] = [AblationMode::Hae, AblationMode::HaeA, AblationMode::Sae, AblationMode::Vci];

    pub fn name(self) -> &'static str {
        match self {
            AblationMode::Hae => "hae",
            AblationMode::HaeA => "hae_a",
            AblationMode::Sae => "sae",
            AblationMode::Vci => "vci",
        }
    }
}

impl fmt::Display for AblationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AblationMode {
    type Err = ObjectiveError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "hae" => Ok(AblationMode::Hae),
            "hae_a" => Ok(AblationMode::HaeA),
            "sae" => Ok(AblationMode::Sae),
            "vci" => Ok(AblationMode::Vci),
            _ => Err(ObjectiveError::UnknownMode(s.to_string())),
        }
    }
}

/// Which loss function a preset trains with.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveKind {
    Elbo,
    SemiAutoencoder,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub omega_cf: f64,
    pub omega_kl: f64,
}

pub const DEFAULT_OMEGA_CF: f64 = 1.0;
pub const DEFAULT_OMEGA_KL: f64 = 0.03;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationPreset {
    pub mode: AblationMode,
    pub weights: LossWeights,
    pub objective: ObjectiveKind,
}

/// HAE drops both extra terms, HAE-A keeps only the latent divergence, SAE
/// keeps only counterfactual supervision (with squared-error
/// reconstruction), VCI keeps both.
pub fn select_ablation(mode: AblationMode) -> AblationPreset {
    let (omega_cf, omega_kl, objective) = match mode {
        AblationMode::Hae => (0.0, 0.0, ObjectiveKind::Elbo),
        AblationMode::HaeA => (0.0, DEFAULT_OMEGA_KL, ObjectiveKind::Elbo),
        AblationMode::Sae => (DEFAULT_OMEGA_CF, 0.0, ObjectiveKind::SemiAutoencoder),
        AblationMode::Vci => (DEFAULT_OMEGA_CF, DEFAULT_OMEGA_KL, ObjectiveKind::Elbo),
    };
    AblationPreset {
        mode,
        weights: LossWeights { omega_cf, omega_kl },
        objective,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetachMode {
    /// Second encoding through a periodically refreshed copy of `q_φ`; the
    /// gradient through `y'` is kept.
    TargetCopy,
    /// Second encoding through the live encoder.
    FullyAttached,
    /// Target copy, and `y'` is decoded from a detached latent mean so the
    /// divergence does not reach `φ` through `y'`.
    DetachYprime,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetachConfig {
    pub mode: DetachMode,
    pub refresh_epochs: usize,
}

impl Default for DetachConfig {
    fn default() -> Self {
        Self {
            mode: DetachMode::TargetCopy,
            refresh_epochs: 1,
        }
    }
}

impl DetachConfig {
    pub fn needs_target(&self) -> bool {
        !matches!(self.mode, DetachMode::FullyAttached)
    }
}

/// Source of the counterfactual supervision score `ℓ`.
#[derive(Clone, Copy, Debug)]
pub enum Supervision<'a> {
    /// `log p̂(y' | x, t')`
    Empirical(&'a EmpiricalOutcomeModel),
    /// `log D(x, t', y')` from the model's discriminator
    Adversarial,
}

/// Batch means of the loss terms. `total = −recon_loglik −
/// ω_cf·cf_supervision + ω_kl·latent_kl`. Terms whose weight is zero are
/// not evaluated and reported as 0.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub recon_loglik: f64,
    pub cf_supervision: f64,
    pub latent_kl: f64,
    pub total: f64,
    pub weights: LossWeights,
}

impl LossBreakdown {
    fn from_parts(recon: f64, cf: f64, kl: f64, weights: LossWeights) -> Self {
        Self {
            recon_loglik: recon,
            cf_supervision: cf,
            latent_kl: kl,
            total: -recon - weights.omega_cf * cf + weights.omega_kl * kl,
            weights,
        }
    }

    pub fn recomputed_total(&self) -> f64 {
        -self.recon_loglik - self.weights.omega_cf * self.cf_supervision + self.weights.omega_kl * self.latent_kl
    }
}

/// `KL[N(μ₁, I) ‖ N(μ₂, I)] = ½‖μ₁ − μ₂‖²`.
pub fn latent_kl_unit_gaussians(mu1: &[f64], mu2: &[f64]) -> f64 {
    assert_eq!(mu1.len(), mu2.len(), "latent dimensions differ");
    0.5 * mu1.iter().zip(mu2).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
}

/// Everything a loss evaluation reads.
pub struct LossInputs<'a, R> {
    pub model: &'a VciModel<R>,
    /// Target copy of the encoder for the divergence term.
    pub target: Option<&'a Encoder<R>>,
    pub supervision: Supervision<'a>,
    pub batch: &'a Batch,
    /// Standard-normal latent noise `[n, latent]`; `None` uses the mean.
    pub noise: Option<&'a Tensor<R>>,
    pub weights: LossWeights,
    pub detach: DetachConfig,
}

/// A loss recorded on a tape.
pub struct TapedLoss {
    pub total: Var,
    pub breakdown: LossBreakdown,
    /// Encoder then decoder parameter handles, in `generator_parameters` order.
    pub generator: Vec<Var>,
    /// Counterfactual means `y'` (for the paired discriminator step).
    pub y_prime: Option<Var>,
}

fn scalar<R: Real>(g: &Graph<R>, v: Var, term: &'static str) -> Result<f64, ObjectiveError> {
    let value = g.value(v).item().f64();
    if value.is_finite() {
        Ok(value)
    } else {
        Err(ObjectiveError::NonFinite { term })
    }
}

/// Records the shared forward pass: encode, sample, reconstruct under `t`,
/// then the counterfactual path under `t'` and the divergence if weighted.
fn forward<R: Real>(
    g: &mut Graph<R>,
    inp: &LossInputs<'_, R>,
    sae: bool,
) -> Result<TapedLoss, ObjectiveError> {
    let b = inp.batch;
    b.check()?;
    inp.model.check_inputs(&b.t, &b.x)?;
    inp.model.check_inputs(&b.t_prime, &b.x)?;
    let n = b.len();
    let enc = inp.model.encoder.bind(g, true)?;
    let dec = inp.model.decoder.bind(g, true, inp.model.config.noise)?;
    let mut generator = enc.vars();
    generator.extend(dec.vars());

    let y_t = Tensor::<R>::from_rows(&b.y).map_err(ModelError::from)?;
    if y_t.cols() != inp.model.config.outcome_dim {
        return Err(TensorError::ShapeMismatch {
            op: "batch outcome",
            lhs: vec![inp.model.config.outcome_dim],
            rhs: vec![y_t.cols()],
        }
        .into());
    }
    let y = g.constant(y_t)?;
    let mu = enc.mean(g, y, &b.t, &b.x)?;
    let z = match inp.noise {
        Some(eps) => {
            let e = g.constant(eps.clone())?;
            g.add(mu, e)?
        }
        None => mu,
    };
    let recon_mean = dec.mean(g, z, &b.t)?;
    let recon = if sae {
        // −L2: per-sample squared error summed over dimensions, batch mean
        let diff = g.sub(recon_mean, y)?;
        let sq = g.square(diff)?;
        let s = g.sum_all(sq)?;
        g.scale(s, R::of(-1.0 / n as f64))?
    } else {
        dec.log_lik(g, recon_mean, y)?
    };

    let w = inp.weights;
    let need_cf_path = w.omega_cf != 0.0 || w.omega_kl != 0.0;
    let (mut cf, mut kl, mut y_prime) = (None, None, None);
    if need_cf_path {
        let mu_for_cf = if matches!(inp.detach.mode, DetachMode::DetachYprime) {
            g.detach(mu)?
        } else {
            mu
        };
        let yp = dec.mean(g, mu_for_cf, &b.t_prime)?;
        y_prime = Some(yp);
        if w.omega_cf != 0.0 {
            cf = Some(match inp.supervision {
                Supervision::Empirical(p_hat) => p_hat.taped_log_lik(g, yp, &b.x, &b.t_prime)?,
                Supervision::Adversarial => {
                    let d = inp
                        .model
                        .discriminator
                        .as_ref()
                        .ok_or(ObjectiveError::MissingDiscriminator)?;
                    let dv = d.bind(g, false)?;
                    let logits = dv.logit(g, &b.x, &b.t_prime, yp)?;
                    taped_discriminator_losses(g, None, logits)?.1
                }
            });
        }
        if w.omega_kl != 0.0 && !sae {
            // consistency: with t' = t the counterfactual outcome is y itself
            let d = inp.model.config.outcome_dim;
            let mut keep = Vec::with_capacity(n * d);
            let mut factual = Vec::with_capacity(n * d);
            for k in 0..n {
                let same = b.t[k] == b.t_prime[k];
                for j in 0..d {
                    keep.push(if same { R::zero() } else { R::one() });
                    factual.push(if same { R::of(b.y[k][j]) } else { R::zero() });
                }
            }
            let keep = g.constant(Tensor::matrix(n, d, keep)?)?;
            let factual = g.constant(Tensor::matrix(n, d, factual)?)?;
            let kept = g.mul(yp, keep)?;
            let y2 = g.add(kept, factual)?;
            let mu2 = match inp.detach.mode {
                DetachMode::FullyAttached => enc.mean(g, y2, &b.t_prime, &b.x)?,
                mode => {
                    let target = inp.target.ok_or(ObjectiveError::MissingTarget(mode))?;
                    let tv = target.bind(g, false)?;
                    tv.mean(g, y2, &b.t_prime, &b.x)?
                }
            };
            let diff = g.sub(mu, mu2)?;
            let sq = g.square(diff)?;
            let s = g.sum_all(sq)?;
            kl = Some(g.scale(s, R::of(0.5 / n as f64))?);
        }
    }

    let mut total = g.scale(recon, R::of(-1.0))?;
    if let Some(c) = cf {
        let t = g.scale(c, R::of(-w.omega_cf))?;
        total = g.add(total, t)?;
    }
    if let Some(k) = kl {
        let t = g.scale(k, R::of(w.omega_kl))?;
        total = g.add(total, t)?;
    }
    let recon_v = scalar(g, recon, "reconstruction")?;
    let cf_v = cf.map(|c| scalar(g, c, "counterfactual supervision")).transpose()?.unwrap_or(0.0);
    let kl_v = kl.map(|k| scalar(g, k, "latent divergence")).transpose()?.unwrap_or(0.0);
    scalar(g, total, "total")?;
    let weights = if sae { LossWeights { omega_kl: 0.0, ..w } } else { w };
    Ok(TapedLoss {
        total,
        breakdown: LossBreakdown::from_parts(recon_v, cf_v, kl_v, weights),
        generator,
        y_prime,
    })
}

/// Records the VCI loss on `g`.
pub fn vci_loss_taped<R: Real>(g: &mut Graph<R>, inp: &LossInputs<'_, R>) -> Result<TapedLoss, ObjectiveError> {
    forward(g, inp, false)
}

/// Records the semi-autoencoding loss `L₂(ŷ, y) − ω·ℓ(y')` on `g`.
/// `inp.weights.omega_kl` is ignored.
pub fn sae_loss_taped<R: Real>(g: &mut Graph<R>, inp: &LossInputs<'_, R>) -> Result<TapedLoss, ObjectiveError> {
    forward(g, inp, true)
}

pub fn vci_loss<R: Real>(inp: &LossInputs<'_, R>) -> Result<LossBreakdown, ObjectiveError> {
    let mut g = Graph::new();
    Ok(vci_loss_taped(&mut g, inp)?.breakdown)
}

pub fn sae_loss<R: Real>(inp: &LossInputs<'_, R>) -> Result<LossBreakdown, ObjectiveError> {
    let mut g = Graph::new();
    Ok(sae_loss_taped(&mut g, inp)?.breakdown)
}

/// Dispatches on the preset's objective.
pub fn preset_loss_taped<R: Real>(
    g: &mut Graph<R>,
    kind: ObjectiveKind,
    inp: &LossInputs<'_, R>,
) -> Result<TapedLoss, ObjectiveError> {
    match kind {
        ObjectiveKind::Elbo => vci_loss_taped(g, inp),
        ObjectiveKind::SemiAutoencoder => sae_loss_taped(g, inp),
    }
}

/// Encoder and decoder of a model viewed as one module, in
/// `generator_parameters` order.
struct Generator<'a>(&'a mut VciModel<f64>);

impl Module<f64> for Generator<'_> {
    fn named_parameters(&self) -> Vec<(String, &Tensor<f64>)> {
        let mut v: Vec<(String, &Tensor<f64>)> = self
            .0
            .encoder
            .named_parameters()
            .into_iter()
            .map(|(n, t)| (format!("encoder.{n}"), t))
            .collect();
        v.extend(self.0.decoder.named_parameters().into_iter().map(|(n, t)| (format!("decoder.{n}"), t)));
        v
    }

    fn parameters_mut(&mut self) -> Vec<&mut Tensor<f64>> {
        self.0.generator_parameters_mut()
    }
}

/// Worst relative error between taped gradients of a preset loss and central
/// finite differences, over every encoder and decoder scalar. `inp.model` is
/// ignored in favour of `model`, which is perturbed in place and restored.
pub fn gradcheck_loss(
    model: &mut VciModel<f64>,
    kind: ObjectiveKind,
    inp: &LossInputs<'_, f64>,
    step: f64,
) -> Result<f64, ObjectiveError> {
    let mut view = Generator(model);
    gradcheck(&mut view, step, |m: &Generator<'_>| -> Result<_, ObjectiveError> {
        let mut g = Graph::new();
        let local = LossInputs {
            model: &*m.0,
            target: inp.target,
            supervision: inp.supervision,
            batch: inp.batch,
            noise: inp.noise,
            weights: inp.weights,
            detach: inp.detach,
        };
        let taped = preset_loss_taped(&mut g, kind, &local)?;
        let grads = g.backward(taped.total)?;
        Ok((g.value(taped.total).item(), grads.collect(&g, &taped.generator)))
    })
}
