//! Stochastic optimization of the estimating models: counterfactual
//! treatment sampling, paired generator/discriminator steps, target-copy
//! refresh, checkpoints and the ablation sweep.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::evaluation::{counterfactual_mse, EvalError};
use crate::models::{
    taped_discriminator_losses, DecoderNoise, EmbeddingDims, EmpiricalOutcomeModel, Encoder, ModelConfig, ModelError,
    VciModel,
};
use crate::objectives::{
    preset_loss_taped, select_ablation, AblationMode, AblationPreset, Batch, DetachConfig, LossBreakdown, LossInputs,
    LossWeights, ObjectiveError, Supervision, DEFAULT_OMEGA_CF, DEFAULT_OMEGA_KL,
};
use crate::scm::{CovariateSpace, FullSample, Treatment, TreatmentSpace};
use crate::tensor::{
    adam_step, clip_grad_norm, AdamConfig, AdamState, Checkpoint, CheckpointError, Graph, Module, OptimError, Tensor,
};

pub const GRAD_CLIP: f64 = 100.0;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("epoch {epoch}, step {step}: {source}")]
    Step {
        epoch: usize,
        step: u64,
        #[source]
        source: Box<TrainError>,
    },
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("covariate value {0:?} never observed in the training data")]
    UnseenStratum(Vec<usize>),
    #[error("empty dataset")]
    EmptyDataset,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SupervisionKind {
    Empirical,
    Adversarial,
}

/// All training hyperparameters. Weights apply only to the terms the
/// ablation mode keeps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VciConfig {
    pub mode: AblationMode,
    pub omega_cf: f64,
    pub omega_kl: f64,
    pub supervision: SupervisionKind,
    pub detach: DetachConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub disc_lr: f64,
    pub weight_decay: f64,
    /// Multiply learning rates by `lr_decay_factor` every this many steps.
    pub lr_decay_steps: Option<u64>,
    pub lr_decay_factor: f64,
    pub seed: u64,
    pub latent_dim: usize,
    pub encoder_hidden: Vec<usize>,
    pub decoder_hidden: Vec<usize>,
    pub discriminator_hidden: Vec<usize>,
    pub embedding: EmbeddingDims,
    pub noise: DecoderNoise,
    /// Bandwidth of the empirical outcome model; `None` for the default.
    pub bandwidth: Option<f64>,
    /// Reparameterized latent sample in the reconstruction term; off uses
    /// the latent mean.
    pub latent_sampling: bool,
    /// Epochs between evaluations and checkpoints.
    pub eval_period: usize,
    pub write_checkpoints: bool,
}

impl Default for VciConfig {
    fn default() -> Self {
        Self {
            mode: AblationMode::Vci,
            omega_cf: DEFAULT_OMEGA_CF,
            omega_kl: DEFAULT_OMEGA_KL,
            supervision: SupervisionKind::Empirical,
            detach: DetachConfig::default(),
            epochs: 30,
            batch_size: 64,
            lr: 3e-4,
            disc_lr: 3e-4,
            weight_decay: 4e-7,
            lr_decay_steps: None,
            lr_decay_factor: 0.1,
            seed: 0,
            latent_dim: 8,
            encoder_hidden: vec![64, 64],
            decoder_hidden: vec![64, 64],
            discriminator_hidden: vec![64],
            embedding: EmbeddingDims::default(),
            noise: DecoderNoise::default(),
            bandwidth: None,
            latent_sampling: true,
            eval_period: 1,
            write_checkpoints: true,
        }
    }
}

impl VciConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.epochs == 0 {
            return bad("epochs must be ≥ 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be ≥ 1");
        }
        if !(self.lr >= 0.0) || !(self.disc_lr >= 0.0) || !self.lr.is_finite() || !self.disc_lr.is_finite() {
            return bad("learning rates must be finite and ≥ 0");
        }
        if self.detach.refresh_epochs == 0 {
            return bad("detach.refresh_epochs must be ≥ 1");
        }
        if self.eval_period == 0 {
            return bad("eval_period must be ≥ 1");
        }
        if !(self.omega_cf >= 0.0) || !(self.omega_kl >= 0.0) {
            return bad("loss weights must be ≥ 0");
        }
        if self.lr_decay_steps == Some(0) {
            return bad("lr_decay_steps must be ≥ 1");
        }
        Ok(())
    }

    /// The ablation preset with this config's weights on the kept terms.
    pub fn preset(&self) -> AblationPreset {
        let mut p = select_ablation(self.mode);
        p.weights = LossWeights {
            omega_cf: if p.weights.omega_cf > 0.0 { self.omega_cf } else { 0.0 },
            omega_kl: if p.weights.omega_kl > 0.0 { self.omega_kl } else { 0.0 },
        };
        p
    }

    pub fn model_config(&self, outcome_dim: usize, treatment: &TreatmentSpace, covariates: &CovariateSpace) -> ModelConfig {
        ModelConfig {
            outcome_dim,
            latent_dim: self.latent_dim,
            treatment: treatment.clone(),
            covariates: covariates.clone(),
            encoder_hidden: self.encoder_hidden.clone(),
            decoder_hidden: self.decoder_hidden.clone(),
            discriminator_hidden: self.discriminator_hidden.clone(),
            embedding: self.embedding,
            noise: self.noise,
            discriminator: self.supervision == SupervisionKind::Adversarial,
        }
    }

    fn lr_at(&self, base: f64, step: u64) -> f64 {
        match self.lr_decay_steps {
            Some(k) => base * self.lr_decay_factor.powi((step / k) as i32),
            None => base,
        }
    }
}

/// Draws `t' ~ p_data(T | x)`: the empirical law of the observed treatments
/// in stratum `x`, or uniform over the box for continuous treatments.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum CounterfactualSampler {
    Categorical {
        covariates: CovariateSpace,
        /// `[flat(x)][t]` observation counts
        counts: Vec<Vec<usize>>,
    },
    Continuous {
        ranges: Vec<[f64; 2]>,
    },
}

impl CounterfactualSampler {
    pub fn fit<'a>(
        treatment: &TreatmentSpace,
        covariates: &CovariateSpace,
        data: impl IntoIterator<Item = (&'a [usize], &'a Treatment)>,
    ) -> Result<Self, TrainError> {
        match treatment {
            TreatmentSpace::Continuous { ranges } => Ok(CounterfactualSampler::Continuous { ranges: ranges.clone() }),
            TreatmentSpace::Categorical { levels } => {
                let mut counts = vec![vec![0usize; *levels]; covariates.strata()];
                for (x, t) in data {
                    let s = covariates.flat(x).ok_or_else(|| ModelError::Covariate(x.to_vec()))?;
                    let l = t.level().filter(|l| l < levels).ok_or_else(|| ModelError::Treatment(t.clone()))?;
                    counts[s][l] += 1;
                }
                Ok(CounterfactualSampler::Categorical {
                    covariates: covariates.clone(),
                    counts,
                })
            }
        }
    }

    pub fn sample(&self, x: &[usize], rng: &mut impl Rng) -> Result<Treatment, TrainError> {
        match self {
            CounterfactualSampler::Continuous { ranges } => Ok(Treatment::Point(
                ranges.iter().map(|r| if r[1] > r[0] { rng.gen_range(r[0]..=r[1]) } else { r[0] }).collect(),
            )),
            CounterfactualSampler::Categorical { covariates, counts } => {
                let s = covariates.flat(x).ok_or_else(|| TrainError::UnseenStratum(x.to_vec()))?;
                let row = &counts[s];
                let total: usize = row.iter().sum();
                if total == 0 {
                    return Err(TrainError::UnseenStratum(x.to_vec()));
                }
                let mut u = rng.gen_range(0..total);
                for (l, &c) in row.iter().enumerate() {
                    if u < c {
                        return Ok(Treatment::Level(l));
                    }
                    u -= c;
                }
                unreachable!("u < total")
            }
        }
    }
}

/// What a training run is given.
#[derive(Clone, Copy, Debug)]
pub struct TrainData<'a> {
    pub samples: &'a [FullSample],
    pub treatment: &'a TreatmentSpace,
    pub covariates: &'a CovariateSpace,
    /// Held-out samples for per-epoch counterfactual error and best-model
    /// selection; needs `y_prime_true`.
    pub validation: Option<&'a [FullSample]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub epoch: usize,
    pub step: u64,
    pub mode: AblationMode,
    pub lr: f64,
    pub loss: LossBreakdown,
    /// Discriminator loss of the paired step (adversarial mode only).
    pub disc_loss: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub epoch: usize,
    pub mean_total: f64,
    pub cf_mse: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BestSnapshot {
    pub epoch: usize,
    pub metric: f64,
    pub model: VciModel<f32>,
}

#[derive(Clone, Debug)]
pub struct TrainState {
    pub model: VciModel<f32>,
    pub target: Encoder<f32>,
    pub opt_gen: AdamState<f32>,
    pub opt_disc: Option<AdamState<f32>>,
    pub epoch: usize,
    pub step: u64,
    pub best: Option<BestSnapshot>,
}

#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub state: TrainState,
    pub log: Vec<LogRow>,
    pub evals: Vec<EvalRow>,
    pub p_hat: Option<EmpiricalOutcomeModel>,
    pub sampler: CounterfactualSampler,
}

fn to_batch(samples: &[&FullSample], t_prime: Vec<Treatment>) -> Batch {
    Batch {
        x: samples.iter().map(|s| s.x.clone()).collect(),
        t: samples.iter().map(|s| s.t.clone()).collect(),
        t_prime,
        y: samples.iter().map(|s| s.y.clone()).collect(),
    }
}

fn normal_tensor(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor<f32> {
    let data = (0..rows * cols).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
    Tensor::matrix(rows, cols, data).expect("positive dims")
}

pub fn log_csv_header() -> &'static str {
    "epoch,step,mode,recon,cf,kl,total,lr,disc\n"
}

pub fn log_csv_row(r: &LogRow) -> String {
    format!(
        "{},{},{},{},{},{},{},{},{}\n",
        r.epoch,
        r.step,
        r.mode,
        r.loss.recon_loglik,
        r.loss.cf_supervision,
        r.loss.latent_kl,
        r.loss.total,
        r.lr,
        r.disc_loss.map(|d| d.to_string()).unwrap_or_default()
    )
}

pub fn eval_csv(evals: &[EvalRow]) -> String {
    let mut s = String::from("epoch,mean_total,cf_mse\n");
    for e in evals {
        let _ = writeln!(
            s,
            "{},{},{}",
            e.epoch,
            e.mean_total,
            e.cf_mse.map(|v| v.to_string()).unwrap_or_default()
        );
    }
    s
}

/// Checkpoint of a model and its target encoder; the manifest config holds
/// both the model and the training configuration.
pub fn model_checkpoint(
    model: &VciModel<f32>,
    target: Option<&Encoder<f32>>,
    config: &VciConfig,
    epoch: usize,
) -> Result<Checkpoint, TrainError> {
    let cfg = serde_json::json!({ "model": model.config, "train": config });
    let mut ck = Checkpoint::new("vci_model", config.seed, epoch as u64, cfg);
    ck.push_module("model.", model);
    if let Some(t) = target {
        ck.push_module("target.", t);
    }
    Ok(ck)
}

/// Rebuilds a model (and target encoder, when stored) from a checkpoint.
pub fn load_model(ck: &Checkpoint) -> Result<(VciModel<f32>, Option<Encoder<f32>>, VciConfig), TrainError> {
    let model_cfg: ModelConfig = serde_json::from_value(
        ck.config
            .get("model")
            .cloned()
            .ok_or_else(|| TrainError::Config("checkpoint lacks a model config".into()))?,
    )?;
    let train_cfg: VciConfig = serde_json::from_value(ck.config.get("train").cloned().unwrap_or_default())?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut model = VciModel::<f32>::new(model_cfg, &mut rng)?;
    ck.load_module("model.", &mut model)?;
    let target = if ck.tensors.iter().any(|(e, _)| e.name.starts_with("target.")) {
        let mut t = model.encoder.clone();
        ck.load_module("target.", &mut t)?;
        Some(t)
    } else {
        None
    };
    Ok((model, target, train_cfg))
}

struct Writer {
    dir: PathBuf,
    log: fs::File,
}

/// Trains one model. With `out_dir`, writes `train_log.csv`, `eval.csv`,
/// `checkpoints/epoch_XXXX.ckpt`, `final.ckpt`, `best.ckpt` and, in
/// empirical mode, `p_hat.json`.
pub fn train(config: &VciConfig, data: TrainData<'_>, out_dir: Option<&Path>) -> Result<TrainOutput, TrainError> {
    config.validate()?;
    if data.samples.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let outcome_dim = data.samples[0].y.len();
    let preset = config.preset();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let model = VciModel::<f32>::new(config.model_config(outcome_dim, data.treatment, data.covariates), &mut rng)?;
    let sampler = CounterfactualSampler::fit(
        data.treatment,
        data.covariates,
        data.samples.iter().map(|s| (s.x.as_slice(), &s.t)),
    )?;
    let p_hat = match (config.supervision, data.treatment) {
        (SupervisionKind::Empirical, TreatmentSpace::Categorical { levels }) => Some(EmpiricalOutcomeModel::fit(
            data.covariates,
            *levels,
            data.samples.iter().map(|s| (s.x.as_slice(), &s.t, s.y.as_slice())),
            config.bandwidth,
        )?),
        (SupervisionKind::Empirical, TreatmentSpace::Continuous { .. }) => {
            return Err(TrainError::Config(
                "empirical supervision needs categorical treatments; use adversarial".into(),
            ))
        }
        _ => None,
    };
    let opt_gen = AdamState::new(&model.generator_parameters());
    let opt_disc = model.discriminator.as_ref().map(|d| AdamState::new(&d.parameters()));
    let mut state = TrainState {
        target: model.encoder.clone(),
        model,
        opt_gen,
        opt_disc,
        epoch: 0,
        step: 0,
        best: None,
    };

    let mut writer = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            if config.write_checkpoints {
                fs::create_dir_all(dir.join("checkpoints"))?;
            }
            let mut log = fs::File::create(dir.join("train_log.csv"))?;
            std::io::Write::write_all(&mut log, log_csv_header().as_bytes())?;
            if let Some(p) = &p_hat {
                fs::write(dir.join("p_hat.json"), serde_json::to_vec(p)?)?;
            }
            Some(Writer {
                dir: dir.to_path_buf(),
                log,
            })
        }
        None => None,
    };

    if let (Some(w), true) = (writer.as_ref(), config.write_checkpoints) {
        model_checkpoint(&state.model, Some(&state.target), config, 0)?
            .write(&w.dir.join("checkpoints").join("epoch_0000.ckpt"))?;
    }

    let mut log = Vec::new();
    let mut evals = Vec::new();
    let mut order: Vec<usize> = (0..data.samples.len()).collect();
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_total = 0.0;
        let mut epoch_batches = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let step = state.step;
            let row = train_step(config, &preset, &mut state, data, &sampler, p_hat.as_ref(), chunk, &mut rng, epoch)
                .map_err(|e| TrainError::Step {
                    epoch,
                    step,
                    source: Box::new(e),
                })?;
            epoch_total += row.loss.total;
            epoch_batches += 1;
            if let Some(w) = writer.as_mut() {
                std::io::Write::write_all(&mut w.log, log_csv_row(&row).as_bytes())?;
            }
            log.push(row);
        }
        state.epoch = epoch + 1;
        if state.epoch % config.detach.refresh_epochs == 0 {
            state.target = state.model.encoder.clone();
        }
        if state.epoch % config.eval_period == 0 || state.epoch == config.epochs {
            let cf_mse = match data.validation {
                Some(v) if v.iter().all(|s| s.y_prime_true.is_some()) && !v.is_empty() => {
                    Some(counterfactual_mse(&state.model, v)?)
                }
                _ => None,
            };
            let mean_total = epoch_total / epoch_batches as f64;
            let metric = cf_mse.unwrap_or(mean_total);
            if state.best.as_ref().map_or(true, |b| metric < b.metric) {
                state.best = Some(BestSnapshot {
                    epoch: state.epoch,
                    metric,
                    model: state.model.clone(),
                });
            }
            evals.push(EvalRow {
                epoch: state.epoch,
                mean_total,
                cf_mse,
            });
            if let (Some(w), true) = (writer.as_ref(), config.write_checkpoints) {
                model_checkpoint(&state.model, Some(&state.target), config, state.epoch)?
                    .write(&w.dir.join("checkpoints").join(format!("epoch_{:04}.ckpt", state.epoch)))?;
            }
        }
    }

    if let Some(w) = writer {
        fs::write(w.dir.join("eval.csv"), eval_csv(&evals))?;
        model_checkpoint(&state.model, Some(&state.target), config, state.epoch)?.write(&w.dir.join("final.ckpt"))?;
        if let Some(b) = &state.best {
            model_checkpoint(&b.model, None, config, b.epoch)?.write(&w.dir.join("best.ckpt"))?;
        }
    }
    Ok(TrainOutput {
        state,
        log,
        evals,
        p_hat,
        sampler,
    })
}

#[allow(clippy::too_many_arguments)]
fn train_step(
    config: &VciConfig,
    preset: &AblationPreset,
    state: &mut TrainState,
    data: TrainData<'_>,
    sampler: &CounterfactualSampler,
    p_hat: Option<&EmpiricalOutcomeModel>,
    chunk: &[usize],
    rng: &mut ChaCha8Rng,
    epoch: usize,
) -> Result<LogRow, TrainError> {
    let samples: Vec<&FullSample> = chunk.iter().map(|&i| &data.samples[i]).collect();
    let t_prime = samples
        .iter()
        .map(|s| sampler.sample(&s.x, rng))
        .collect::<Result<Vec<_>, _>>()?;
    let batch = to_batch(&samples, t_prime);
    let noise = config
        .latent_sampling
        .then(|| normal_tensor(batch.len(), config.latent_dim, rng));
    let supervision = match p_hat {
        Some(p) => Supervision::Empirical(p),
        None => Supervision::Adversarial,
    };
    let lr = config.lr_at(config.lr, state.step);
    let mut g = Graph::new();
    let taped = {
        let inputs = LossInputs {
            model: &state.model,
            target: config.detach.needs_target().then_some(&state.target),
            supervision,
            batch: &batch,
            noise: noise.as_ref(),
            weights: preset.weights,
            detach: config.detach,
        };
        preset_loss_taped(&mut g, preset.objective, &inputs)?
    };
    let grads = g.backward(taped.total).map_err(ObjectiveError::from)?;
    let mut gen_grads = grads.collect(&g, &taped.generator);
    clip_grad_norm(&mut gen_grads, GRAD_CLIP);
    let adam = AdamConfig {
        lr,
        weight_decay: config.weight_decay,
        ..AdamConfig::default()
    };
    adam_step(&mut state.model.generator_parameters_mut(), &gen_grads, &mut state.opt_gen, &adam)?;

    // paired discriminator step on the same batch: factual triplets against
    // the counterfactual triplets just generated
    let mut disc_loss = None;
    if let (Some(disc), Some(opt), Some(yp)) = (
        state.model.discriminator.as_mut(),
        state.opt_disc.as_mut(),
        taped.y_prime.filter(|_| preset.weights.omega_cf > 0.0),
    ) {
        let fake = g.value(yp).clone();
        let mut dg = Graph::<f32>::new();
        let dv = disc.bind(&mut dg, true).map_err(ObjectiveError::from)?;
        let real_y = dg
            .constant(Tensor::from_rows(&batch.y).map_err(ObjectiveError::from)?)
            .map_err(ObjectiveError::from)?;
        let fake_y = dg.constant(fake).map_err(ObjectiveError::from)?;
        let real = dv.logit(&mut dg, &batch.x, &batch.t, real_y).map_err(ObjectiveError::from)?;
        let fake = dv.logit(&mut dg, &batch.x, &batch.t_prime, fake_y).map_err(ObjectiveError::from)?;
        let (ld, _) = taped_discriminator_losses(&mut dg, Some(real), fake).map_err(ObjectiveError::from)?;
        let ld = ld.expect("real logits given");
        let value = dg.value(ld).item() as f64;
        if !value.is_finite() {
            return Err(ObjectiveError::NonFinite { term: "discriminator" }.into());
        }
        let dgrads = dg.backward(ld).map_err(ObjectiveError::from)?;
        let mut dgr = dgrads.collect(&dg, &dv.vars());
        clip_grad_norm(&mut dgr, GRAD_CLIP);
        let dadam = AdamConfig {
            lr: config.lr_at(config.disc_lr, state.step),
            weight_decay: config.weight_decay,
            ..AdamConfig::default()
        };
        adam_step(&mut disc.parameters_mut(), &dgr, opt, &dadam)?;
        disc_loss = Some(value);
    }
    state.step += 1;
    Ok(LogRow {
        epoch,
        step: state.step - 1,
        mode: config.mode,
        lr,
        loss: taped.breakdown,
        disc_loss,
    })
}

/// One row of the ablation table: counterfactual error of one run at one
/// evaluation epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub mode: AblationMode,
    pub seed: u64,
    pub epoch: usize,
    pub cf_mse: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRun {
    pub mode: AblationMode,
    pub seed: u64,
    pub best_mse: f64,
    pub best_epoch: usize,
    pub final_mse: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
    pub runs: Vec<SweepRun>,
    /// Trained models (final epoch), aligned with `runs`.
    pub models: Vec<VciModel<f32>>,
}

impl SweepResult {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("mode,seed,epoch,cf_mse\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{},{}", r.mode, r.seed, r.epoch, r.cf_mse);
        }
        s
    }

    pub fn runs_for(&self, mode: AblationMode) -> impl Iterator<Item = &SweepRun> {
        self.runs.iter().filter(move |r| r.mode == mode)
    }
}

/// Trains every `(mode, seed)` pair on `data` with `jobs` worker threads and
/// evaluates counterfactual MSE on `data.validation` every eval period.
/// Results are ordered by `(modes, seeds)` regardless of scheduling.
pub fn ablation_sweep(
    base: &VciConfig,
    modes: &[AblationMode],
    seeds: &[u64],
    data: TrainData<'_>,
    jobs: usize,
) -> Result<SweepResult, TrainError> {
    let validation = data
        .validation
        .ok_or_else(|| TrainError::Config("ablation sweep needs validation samples".into()))?;
    if validation.is_empty() || validation.iter().any(|s| s.y_prime_true.is_none()) {
        return Err(TrainError::Config("validation samples must carry y_prime_true".into()));
    }
    let tasks: Vec<(AblationMode, u64)> = modes.iter().flat_map(|&m| seeds.iter().map(move |&s| (m, s))).collect();
    let results: Mutex<Vec<Option<Result<(Vec<EvalRow>, VciModel<f32>), TrainError>>>> =
        Mutex::new((0..tasks.len()).map(|_| None).collect());
    let next = AtomicUsize::new(0);
    std::thread::scope(|scope| {
        for _ in 0..jobs.max(1).min(tasks.len().max(1)) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(&(mode, seed)) = tasks.get(i) else { break };
                let cfg = VciConfig {
                    mode,
                    seed,
                    write_checkpoints: false,
                    ..base.clone()
                };
                let r = train(&cfg, data, None).map(|o| (o.evals, o.state.model));
                results.lock().expect("no panics while holding the lock")[i] = Some(r);
            });
        }
    });
    let mut out = SweepResult {
        rows: Vec::new(),
        runs: Vec::new(),
        models: Vec::new(),
    };
    for ((mode, seed), r) in tasks.into_iter().zip(results.into_inner().expect("threads joined")) {
        let (evals, model) = r.expect("every task ran")?;
        let series: Vec<(usize, f64)> = evals.iter().filter_map(|e| e.cf_mse.map(|m| (e.epoch, m))).collect();
        for &(epoch, cf_mse) in &series {
            out.rows.push(SweepRow {
                mode,
                seed,
                epoch,
                cf_mse,
            });
        }
        let (best_epoch, best_mse) = series
            .iter()
            .copied()
            .fold((0, f64::INFINITY), |acc, (e, m)| if m < acc.1 { (e, m) } else { acc });
        out.runs.push(SweepRun {
            mode,
            seed,
            best_mse,
            best_epoch,
            final_mse: series.last().map_or(f64::NAN, |s| s.1),
        });
        out.models.push(model);
    }
    Ok(out)
}
