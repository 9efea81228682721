use std::fs;
use std::path::{Path, PathBuf};
use std::time::SystemTime;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use vcilab::estimators::{
    model_predictions, plug_in_mean, read_predictions, reports_csv, robust_ate, robust_ate_covariate,
    write_predictions, EstimatorOptions, EstimatorReport, PredictionMode,
};
use vcilab::evaluation::{
    axiomatic_metrics, consistency_probes, counterfactual_errors, group_r2, oracle_consistency_kl,
    oracle_restrictiveness, random_discrete_scms, reconstruction_mse, stratum_means, summarize_bounds,
    verify_elbo_discrete, verify_implicit_elbo_discrete, CounterfactualPredictor, EvalError, IdentityPredictor,
    MetricsReport, OracleReplay, RestrictivenessProbe,
};
use vcilab::models::{PropensityModel, VciModel, DEFAULT_EPS_POS};
use vcilab::objectives::AblationMode;
use vcilab::scm::{generate_dataset, read_dataset, read_metadata, write_dataset, FullSample, Scm, ScmSpec, Treatment};
use vcilab::tensor::Checkpoint;
use vcilab::training::{ablation_sweep, load_model, train, SupervisionKind, TrainData, VciConfig};

const OUTPUT_ROOT_ENV: &str = "VCILAB_OUTPUT_ROOT";

const METRICS: &[&str] = &[
    "cf_mse",
    "reconstruction_mse",
    "attribute_mae",
    "r2",
    "oracle_consistency_kl",
    "oracle_restrictiveness",
    "axiomatic",
    "verify_elbo",
    "verify_implicit_elbo",
];

#[derive(Parser)]
#[command(name = "vcilab", version, about = "Counterfactual generative modeling lab")]
struct Cli {
    /// Root for relative output paths.
    #[arg(long, global = true, env = OUTPUT_ROOT_ENV)]
    output_root: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw a dataset from an SCM spec.
    Generate(GenerateArgs),
    /// Train a model on a dataset.
    Train(TrainArgs),
    /// Compute metrics for a checkpoint or run the bound verifiers.
    Evaluate(EvaluateArgs),
    /// Robust and plug-in marginal estimates at a treatment value.
    Estimate(EstimateArgs),
    /// Train several ablation modes and seeds and tabulate counterfactual MSE.
    Ablate(AblateArgs),
}

#[derive(Args)]
struct GenerateArgs {
    /// SCM spec (JSON).
    #[arg(long)]
    spec: PathBuf,
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Dataset path (JSONL); metadata goes to `<out>.meta.json`.
    #[arg(long)]
    out: PathBuf,
}

/// Training flags that override the config file.
#[derive(Args, Clone, Default)]
struct ConfigOverrides {
    #[arg(long)]
    mode: Option<AblationMode>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    disc_lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    omega_cf: Option<f64>,
    #[arg(long)]
    omega_kl: Option<f64>,
    /// empirical or adversarial
    #[arg(long)]
    supervision: Option<String>,
    #[arg(long)]
    latent_dim: Option<usize>,
    #[arg(long)]
    eval_period: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    /// Training config (JSON); omitted fields take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    /// Validation dataset with ground-truth counterfactuals.
    #[arg(long)]
    validation: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    overrides: ConfigOverrides,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Checkpoint path, or `oracle` / `identity` for the reference predictors.
    #[arg(long)]
    checkpoint: Option<String>,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Comma-separated metric names.
    #[arg(long, value_delimiter = ',', default_value = "cf_mse")]
    metrics: Vec<String>,
    /// Report path (JSON).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 3)]
    cycles: usize,
    /// Random discrete SCMs for the bound verifiers.
    #[arg(long, default_value_t = 100)]
    scms: usize,
    #[arg(long, default_value_t = 4)]
    max_support: usize,
    #[arg(long, default_value_t = 0)]
    bound_seed: u64,
    /// Control treatment level for the group R² effects.
    #[arg(long, default_value_t = 0)]
    control: usize,
    #[arg(long, default_value_t = 50)]
    hard_k: usize,
    #[arg(long, default_value_t = 100_000)]
    mc_draws: usize,
}

#[derive(Args)]
struct EstimateArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    /// Treatment level, or comma-separated coordinates for continuous
    /// treatments.
    #[arg(long)]
    alpha: String,
    /// Restrict to one covariate value (comma-separated).
    #[arg(long, value_delimiter = ',')]
    covariate: Option<Vec<usize>>,
    /// Precomputed predictions (JSONL of `{index, m}`) instead of a checkpoint.
    #[arg(long)]
    predictions: Option<PathBuf>,
    /// Decode the latent mean instead of a posterior draw.
    #[arg(long)]
    deterministic: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Laplace smoothing of the fitted propensity.
    #[arg(long, default_value_t = 1.0)]
    lambda: f64,
    #[arg(long, default_value_t = DEFAULT_EPS_POS)]
    eps_pos: f64,
    /// Use the generator's propensity from the dataset metadata.
    #[arg(long)]
    true_propensity: bool,
    #[arg(long, default_value_t = 0.95)]
    ci_level: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    validation: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "hae,hae_a,sae,vci")]
    modes: Vec<AblationMode>,
    #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5")]
    seeds: Vec<u64>,
    /// Worker threads.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    overrides: ConfigOverrides,
}

#[derive(Serialize)]
struct RunManifest {
    command: &'static str,
    tool_version: &'static str,
    config: Value,
    datasets: Vec<DatasetRef>,
    started_at: String,
    finished_at: Option<String>,
    outputs: Vec<PathBuf>,
}

#[derive(Serialize)]
struct DatasetRef {
    path: PathBuf,
    sha256: String,
}

impl RunManifest {
    fn start(command: &'static str, config: Value, datasets: &[&Path]) -> Result<Self> {
        let datasets = datasets
            .iter()
            .map(|p| {
                let bytes = fs::read(p).with_context(|| format!("reading {}", p.display()))?;
                Ok(DatasetRef {
                    path: p.to_path_buf(),
                    sha256: hex::encode(Sha256::digest(bytes)),
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            command,
            tool_version: env!("CARGO_PKG_VERSION"),
            config,
            datasets,
            started_at: now(),
            finished_at: None,
            outputs: Vec::new(),
        })
    }

    fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    fn finish(mut self, dir: &Path, outputs: Vec<PathBuf>) -> Result<()> {
        self.outputs = outputs;
        self.finished_at = Some(now());
        self.write(dir)
    }
}

fn now() -> String {
    humantime::format_rfc3339_seconds(SystemTime::now()).to_string()
}

fn resolve_out(root: &Option<PathBuf>, p: &Path) -> PathBuf {
    match root {
        Some(r) if p.is_relative() => r.join(p),
        _ => p.to_path_buf(),
    }
}

fn load_data(path: &Path) -> Result<(Vec<FullSample>, Scm)> {
    let samples = read_dataset(path).with_context(|| format!("reading dataset {}", path.display()))?;
    let meta = read_metadata(path).with_context(|| format!("reading metadata for {}", path.display()))?;
    let scm = meta.spec.build()?;
    Ok((samples, scm))
}

fn resolve_config(file: Option<&Path>, o: &ConfigOverrides) -> Result<VciConfig> {
    let mut cfg: VciConfig = match file {
        Some(p) => serde_json::from_slice(&fs::read(p).with_context(|| format!("reading {}", p.display()))?)
            .with_context(|| format!("parsing config {}", p.display()))?,
        None => VciConfig::default(),
    };
    if let Some(v) = o.mode {
        cfg.mode = v;
    }
    if let Some(v) = o.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = o.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = o.lr {
        cfg.lr = v;
    }
    if let Some(v) = o.disc_lr {
        cfg.disc_lr = v;
    }
    if let Some(v) = o.seed {
        cfg.seed = v;
    }
    if let Some(v) = o.omega_cf {
        cfg.omega_cf = v;
    }
    if let Some(v) = o.omega_kl {
        cfg.omega_kl = v;
    }
    if let Some(v) = &o.supervision {
        cfg.supervision = serde_json::from_value::<SupervisionKind>(json!(v))
            .map_err(|_| anyhow!("unknown supervision `{v}` (expected empirical or adversarial)"))?;
    }
    if let Some(v) = o.latent_dim {
        cfg.latent_dim = v;
    }
    if let Some(v) = o.eval_period {
        cfg.eval_period = v;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_generate(a: &GenerateArgs, root: &Option<PathBuf>) -> Result<()> {
    let raw = fs::read(&a.spec).with_context(|| format!("reading spec {}", a.spec.display()))?;
    let spec: ScmSpec =
        serde_json::from_slice(&raw).with_context(|| format!("invalid spec {}", a.spec.display()))?;
    spec.build().with_context(|| format!("invalid spec {}", a.spec.display()))?;
    let samples = generate_dataset(&spec, a.n, a.seed)?;
    let out = resolve_out(root, &a.out);
    let meta = write_dataset(&out, &samples, &spec, a.seed)?;
    println!("wrote {} samples to {} (sha256 {})", meta.n, out.display(), meta.sha256);
    Ok(())
}

fn cmd_train(a: &TrainArgs, root: &Option<PathBuf>) -> Result<()> {
    let cfg = resolve_config(a.config.as_deref(), &a.overrides)?;
    let (samples, scm) = load_data(&a.data)?;
    let validation = match &a.validation {
        Some(p) => Some(read_dataset(p).with_context(|| format!("reading {}", p.display()))?),
        None => None,
    };
    let out = resolve_out(root, &a.out);
    let mut inputs: Vec<&Path> = vec![&a.data];
    if let Some(v) = &a.validation {
        inputs.push(v);
    }
    let manifest = RunManifest::start("train", serde_json::to_value(&cfg)?, &inputs)?;
    manifest.write(&out)?;
    let (ts, xs) = (scm.treatment_space(), scm.covariate_space());
    let result = train(
        &cfg,
        TrainData {
            samples: &samples,
            treatment: &ts,
            covariates: &xs,
            validation: validation.as_deref(),
        },
        Some(&out),
    )?;
    let mut outputs: Vec<PathBuf> = ["train_log.csv", "eval.csv", "final.ckpt", "best.ckpt"]
        .iter()
        .map(|f| out.join(f))
        .filter(|p| p.exists())
        .collect();
    if result.p_hat.is_some() {
        outputs.push(out.join("p_hat.json"));
    }
    if cfg.write_checkpoints {
        outputs.push(out.join("checkpoints"));
    }
    manifest.finish(&out, outputs)?;
    if let Some(e) = result.evals.last() {
        println!(
            "epoch {}: mean loss {:.6}{}",
            e.epoch,
            e.mean_total,
            e.cf_mse.map(|m| format!(", cf mse {m:.6}")).unwrap_or_default()
        );
    }
    Ok(())
}

enum Predictor {
    Model(Box<VciModel<f32>>),
    Oracle,
    Identity,
}

impl CounterfactualPredictor for Predictor {
    fn predict(&self, samples: &[FullSample], t_prime: &[Treatment]) -> Result<Vec<Vec<f64>>, EvalError> {
        match self {
            Predictor::Model(m) => m.predict(samples, t_prime),
            Predictor::Oracle => OracleReplay.predict(samples, t_prime),
            Predictor::Identity => IdentityPredictor.predict(samples, t_prime),
        }
    }
}

fn load_predictor(spec: &str) -> Result<Predictor> {
    Ok(match spec {
        "oracle" => Predictor::Oracle,
        "identity" => Predictor::Identity,
        path => {
            let ck = Checkpoint::read(Path::new(path)).with_context(|| format!("reading checkpoint {path}"))?;
            Predictor::Model(Box::new(load_model(&ck)?.0))
        }
    })
}

fn cmd_evaluate(a: &EvaluateArgs, root: &Option<PathBuf>) -> Result<()> {
    if let Some(bad) = a.metrics.iter().find(|m| !METRICS.contains(&m.as_str())) {
        bail!("unknown metric `{bad}`; valid metrics: {}", METRICS.join(", "));
    }
    let wants = |m: &str| a.metrics.iter().any(|x| x == m);
    let mut report = MetricsReport::default();
    if wants("verify_elbo") || wants("verify_implicit_elbo") {
        let scms = random_discrete_scms(a.scms, a.max_support, a.bound_seed);
        if wants("verify_elbo") {
            report.verify_elbo = Some(summarize_bounds(&scms, verify_elbo_discrete)?);
        }
        if wants("verify_implicit_elbo") {
            report.verify_implicit_elbo = Some(summarize_bounds(&scms, verify_implicit_elbo_discrete)?);
        }
    }
    let model_metrics: Vec<&String> = a.metrics.iter().filter(|m| !m.starts_with("verify_")).collect();
    if !model_metrics.is_empty() {
        let ck = a
            .checkpoint
            .as_deref()
            .ok_or_else(|| anyhow!("metrics {model_metrics:?} need --checkpoint"))?;
        let data = a.data.as_ref().ok_or_else(|| anyhow!("metrics {model_metrics:?} need --data"))?;
        let predictor = load_predictor(ck)?;
        let (samples, scm) = load_data(data)?;
        if wants("cf_mse") || wants("attribute_mae") {
            let e = counterfactual_errors(&predictor, &samples, Some(&scm))?;
            if wants("cf_mse") {
                report.cf_mse = Some(e.mse);
            }
            if wants("attribute_mae") {
                report.thickness_mae = e.thickness_mae;
                report.intensity_mae = e.intensity_mae;
            }
        }
        if wants("reconstruction_mse") {
            report.reconstruction_mse = Some(reconstruction_mse(&predictor, &samples)?);
        }
        if wants("r2") {
            let (pred, truth, hard) =
                stratum_means(&predictor, &scm, &samples, &Treatment::Level(a.control), a.hard_k, a.mc_draws)?;
            report.r2_all = Some(group_r2(&pred, &truth, None)?);
            report.r2_hard = Some(group_r2(&pred, &truth, Some(&hard))?);
        }
        if wants("oracle_consistency_kl") {
            let Predictor::Model(m) = &predictor else {
                bail!("oracle_consistency_kl needs a model checkpoint");
            };
            report.oracle_consistency_kl = Some(oracle_consistency_kl(m.as_ref(), &consistency_probes(&samples)?)?);
        }
        if wants("oracle_restrictiveness") {
            // the treatment input passes through untouched when the latent is redrawn
            let probes: Vec<RestrictivenessProbe> = samples
                .iter()
                .map(|s| RestrictivenessProbe {
                    t_before: s.t.clone(),
                    t_after: s.t.clone(),
                })
                .collect();
            report.oracle_restrictiveness = Some(oracle_restrictiveness(&probes)?);
        }
        if wants("axiomatic") {
            report.axiomatic = Some(axiomatic_metrics(&predictor, &samples, a.cycles, &scm)?);
        }
    }
    let text = serde_json::to_string_pretty(&report)?;
    match &a.out {
        Some(p) => {
            let p = resolve_out(root, p);
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir)?;
            }
            fs::write(&p, format!("{text}\n"))?;
        }
        None => println!("{text}"),
    }
    Ok(())
}

fn parse_treatment(s: &str) -> Result<Treatment> {
    if s.contains(',') || s.contains('.') {
        let p = s
            .split(',')
            .map(|v| v.trim().parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .with_context(|| format!("bad treatment `{s}`"))?;
        Ok(Treatment::Point(p))
    } else {
        Ok(Treatment::Level(s.trim().parse().with_context(|| format!("bad treatment `{s}`"))?))
    }
}

#[derive(Serialize)]
struct EstimateOutput<'a> {
    alpha: &'a Treatment,
    covariate: Option<&'a [usize]>,
    robust: &'a EstimatorReport,
    plug_in_mean: &'a EstimatorReport,
}

fn cmd_estimate(a: &EstimateArgs, root: &Option<PathBuf>) -> Result<()> {
    let (samples, scm) = load_data(&a.data)?;
    let alpha = parse_treatment(&a.alpha)?;
    let space = scm.treatment_space();
    if !space.contains(&alpha) {
        bail!("alpha {alpha:?} is outside the treatment support {space:?}");
    }
    let levels = space
        .levels()
        .ok_or_else(|| anyhow!("marginal estimation needs categorical treatments"))?;
    let out = resolve_out(root, &a.out);
    let config = json!({
        "alpha": alpha,
        "covariate": a.covariate,
        "checkpoint": a.checkpoint,
        "predictions": a.predictions,
        "deterministic": a.deterministic,
        "seed": a.seed,
        "lambda": a.lambda,
        "eps_pos": a.eps_pos,
        "true_propensity": a.true_propensity,
        "ci_level": a.ci_level,
    });
    let manifest = RunManifest::start("estimate", config, &[&a.data])?;
    manifest.write(&out)?;
    let mut outputs = Vec::new();

    let predictions = match (&a.predictions, &a.checkpoint) {
        (Some(p), _) => read_predictions(p)?,
        (None, Some(ck)) => {
            let ck = Checkpoint::read(ck).with_context(|| format!("reading checkpoint {}", ck.display()))?;
            let (model, _, _) = load_model(&ck)?;
            let mode = if a.deterministic {
                PredictionMode::Mean
            } else {
                PredictionMode::Sampled { seed: a.seed }
            };
            let m = model_predictions(&model, &samples, &alpha, mode)?;
            let path = out.join("predictions.jsonl");
            write_predictions(&path, &m)?;
            outputs.push(path);
            m
        }
        (None, None) => bail!("need --checkpoint or --predictions"),
    };
    if predictions.len() != samples.len() {
        bail!("{} predictions for {} samples", predictions.len(), samples.len());
    }

    let opts = EstimatorOptions {
        ci_level: a.ci_level,
        eps_pos: a.eps_pos,
    };
    let fitted;
    let robust = if a.true_propensity {
        match &a.covariate {
            Some(c) => robust_ate_covariate(&samples, &predictions, &scm, &alpha, c, &opts)?,
            None => robust_ate(&samples, &predictions, &scm, &alpha, &opts)?,
        }
    } else {
        fitted = PropensityModel::fit(
            &scm.covariate_space(),
            levels,
            samples.iter().map(|s| (s.x.as_slice(), &s.t)),
            a.lambda,
            a.eps_pos,
        )?;
        match &a.covariate {
            Some(c) => robust_ate_covariate(&samples, &predictions, &fitted, &alpha, c, &opts)?,
            None => robust_ate(&samples, &predictions, &fitted, &alpha, &opts)?,
        }
    };
    let subset: Vec<Vec<f64>> = match &a.covariate {
        Some(c) => samples
            .iter()
            .zip(&predictions)
            .filter(|(s, _)| &s.x == c)
            .map(|(_, m)| m.clone())
            .collect(),
        None => predictions.clone(),
    };
    let plug = plug_in_mean(&subset, &opts)?;

    let json_path = out.join("estimate.json");
    let csv_path = out.join("estimate.csv");
    let body = EstimateOutput {
        alpha: &alpha,
        covariate: a.covariate.as_deref(),
        robust: &robust,
        plug_in_mean: &plug,
    };
    fs::write(&json_path, format!("{}\n", serde_json::to_string_pretty(&body)?))?;
    fs::write(&csv_path, reports_csv(&[robust.clone(), plug.clone()]))?;
    outputs.push(json_path);
    outputs.push(csv_path);
    manifest.finish(&out, outputs)?;
    let head = |r: &EstimatorReport| r.estimate.iter().take(4).map(|v| format!("{v:.4}")).collect::<Vec<_>>().join(" ");
    println!("robust       {} (n={})", head(&robust), robust.n);
    println!("plug_in_mean {} (n={})", head(&plug), plug.n);
    Ok(())
}

fn cmd_ablate(a: &AblateArgs, root: &Option<PathBuf>) -> Result<()> {
    let cfg = resolve_config(a.config.as_deref(), &a.overrides)?;
    let (samples, scm) = load_data(&a.data)?;
    let validation = read_dataset(&a.validation).with_context(|| format!("reading {}", a.validation.display()))?;
    let out = resolve_out(root, &a.out);
    let config = json!({
        "base": cfg,
        "modes": a.modes,
        "seeds": a.seeds,
        "jobs": a.jobs,
    });
    let manifest = RunManifest::start("ablate", config, &[&a.data, &a.validation])?;
    manifest.write(&out)?;
    let (ts, xs) = (scm.treatment_space(), scm.covariate_space());
    let sweep = ablation_sweep(
        &cfg,
        &a.modes,
        &a.seeds,
        TrainData {
            samples: &samples,
            treatment: &ts,
            covariates: &xs,
            validation: Some(&validation),
        },
        a.jobs,
    )?;
    let table = out.join("ablation.csv");
    fs::write(&table, sweep.to_csv())?;
    let mut runs = String::from("mode,seed,best_epoch,best_mse,final_mse\n");
    for r in &sweep.runs {
        runs.push_str(&format!("{},{},{},{},{}\n", r.mode, r.seed, r.best_epoch, r.best_mse, r.final_mse));
    }
    let runs_path = out.join("runs.csv");
    fs::write(&runs_path, runs)?;
    manifest.finish(&out, vec![table, runs_path])?;
    for mode in &a.modes {
        let best: Vec<f64> = sweep.runs_for(*mode).map(|r| r.best_mse).collect();
        let mean = best.iter().sum::<f64>() / best.len().max(1) as f64;
        println!("{mode:<6} mean best cf mse {mean:.6}");
    }
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let root = cli.output_root;
    match &cli.command {
        Command::Generate(a) => cmd_generate(a, &root),
        Command::Train(a) => cmd_train(a, &root),
        Command::Evaluate(a) => cmd_evaluate(a, &root),
        Command::Estimate(a) => cmd_estimate(a, &root),
        Command::Ablate(a) => cmd_ablate(a, &root),
    }
}
