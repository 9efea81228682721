mod common;

use common::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vcilab::models::VciModel;
use vcilab::objectives::{vci_loss, AblationMode, DetachConfig, DetachMode, LossInputs, Supervision};
use vcilab::scm::{CovariateSpace, FullSample, Scm, Treatment, TreatmentSpace};
use vcilab::tensor::Checkpoint;
use vcilab::training::*;

fn data_of<'a>(scm_t: &'a TreatmentSpace, scm_x: &'a CovariateSpace, samples: &'a [FullSample]) -> TrainData<'a> {
    TrainData {
        samples,
        treatment: scm_t,
        covariates: scm_x,
        validation: None,
    }
}

fn init_model(cfg: &VciConfig, scm: &Scm) -> VciModel<f32> {
    let mc = cfg.model_config(scm.outcome_dim(), &scm.treatment_space(), &scm.covariate_space());
    VciModel::new(mc, &mut ChaCha8Rng::seed_from_u64(cfg.seed)).unwrap()
}

#[test]
fn sampler_follows_stratum_frequencies() {
    let sampler = CounterfactualSampler::Categorical {
        covariates: CovariateSpace::new(vec![2]),
        counts: vec![vec![1, 3], vec![0, 5]],
    };
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let draws = 10_000;
    let beta = (0..draws)
        .filter(|_| sampler.sample(&[0], &mut rng).unwrap() == Treatment::Level(1))
        .count() as f64;
    let sd = (draws as f64 * 0.75 * 0.25).sqrt();
    assert!((beta - 0.75 * draws as f64).abs() < 3.0 * sd, "{beta}");
    for _ in 0..100 {
        assert_eq!(sampler.sample(&[1], &mut rng).unwrap(), Treatment::Level(1));
    }
    assert!(matches!(sampler.sample(&[2], &mut rng), Err(TrainError::UnseenStratum(_))));
}

#[test]
fn sampler_fit_counts_and_rejects_empty_strata() {
    let space = CovariateSpace::new(vec![2]);
    let x0 = vec![0];
    let ts = [Treatment::Level(0), Treatment::Level(2), Treatment::Level(2)];
    let s = CounterfactualSampler::fit(
        &TreatmentSpace::Categorical { levels: 3 },
        &space,
        ts.iter().map(|t| (x0.as_slice(), t)),
    )
    .unwrap();
    match &s {
        CounterfactualSampler::Categorical { counts, .. } => assert_eq!(counts, &vec![vec![1, 0, 2], vec![0, 0, 0]]),
        other => panic!("{other:?}"),
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(matches!(s.sample(&[1], &mut rng), Err(TrainError::UnseenStratum(_))));
}

#[test]
fn continuous_sampler_stays_in_range() {
    let s = CounterfactualSampler::fit(
        &TreatmentSpace::Continuous {
            ranges: vec![[1.0, 3.0], [0.2, 0.9]],
        },
        &CovariateSpace::new(vec![]),
        std::iter::empty(),
    )
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut lo, mut hi) = (f64::MAX, f64::MIN);
    for _ in 0..2000 {
        let Treatment::Point(p) = s.sample(&[], &mut rng).unwrap() else { panic!() };
        assert!((1.0..=3.0).contains(&p[0]) && (0.2..=0.9).contains(&p[1]));
        lo = lo.min(p[0]);
        hi = hi.max(p[0]);
    }
    assert!(lo < 1.05 && hi > 2.95);
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let (scm, samples) = toy_data(64, 1);
    let (ts, xs) = (scm.treatment_space(), scm.covariate_space());
    for supervision in [SupervisionKind::Empirical, SupervisionKind::Adversarial] {
        let cfg = VciConfig {
            epochs: 1,
            lr: 0.0,
            disc_lr: 0.0,
            seed: 3,
            ..toy_config(supervision)
        };
        let out = train(&cfg, data_of(&ts, &xs, &samples), None).unwrap();
        assert_eq!(out.state.model, init_model(&cfg, &scm), "{supervision:?}");
        assert!(out.log.iter().all(|r| r.loss.total.is_finite()));
    }
}

#[test]
fn identical_seeds_give_identical_runs() {
    let (scm, samples) = toy_data(96, 2);
    let (ts, xs) = (scm.treatment_space(), scm.covariate_space());
    let cfg = VciConfig {
        seed: 9,
        epochs: 3,
        ..toy_config(SupervisionKind::Adversarial)
    };
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ra = train(&cfg, data_of(&ts, &xs, &samples), Some(a.path())).unwrap();
    let rb = train(&cfg, data_of(&ts, &xs, &samples), Some(b.path())).unwrap();
    assert_eq!(ra.state.model, rb.state.model);
    for f in ["train_log.csv", "eval.csv", "final.ckpt", "best.ckpt", "checkpoints/epoch_0002.ckpt"] {
        let fa = std::fs::read(a.path().join(f)).unwrap();
        let fb = std::fs::read(b.path().join(f)).unwrap();
        assert!(fa == fb, "{f} differs");
    }
    let other = train(&VciConfig { seed: 10, ..cfg }, data_of(&ts, &xs, &samples), None).unwrap();
    assert_ne!(other.state.model, ra.state.model);
}

#[test]
fn target_copy_lags_by_at_most_one_refresh() {
    let (scm, samples) = toy_data(64, 3);
    let (ts, xs) = (scm.treatment_space(), scm.covariate_space());
    let stale = VciConfig {
        epochs: 1,
        detach: DetachConfig {
            mode: DetachMode::TargetCopy,
            refresh_epochs: 2,
        },
        ..toy_config(SupervisionKind::Empirical)
    };
    let out = train(&stale, data_of(&ts, &xs, &samples), None).unwrap();
    assert_eq!(out.state.target, init_model(&stale, &scm).encoder);
    assert_ne!(out.state.model.encoder, out.state.target);

    let fresh = VciConfig {
        epochs: 2,
        ..stale
    };
    let out = train(&fresh, data_of(&ts, &xs, &samples), None).unwrap();
    assert_eq!(out.state.target, out.state.model.encoder);
}

#[test]
fn hae_reconstruction_improves_every_epoch_after_warmup() {
    let (scm, samples) = toy_data(512, 4);
    let (ts, xs) = (scm.treatment_space(), scm.covariate_space());
    let cfg = VciConfig {
        mode: AblationMode::Hae,
        epochs: 50,
        batch_size: 64,
        latent_dim: 3,
        encoder_hidden: vec![32, 32],
        decoder_hidden: vec![32, 32],
        seed: 5,
        write_checkpoints: false,
        ..toy_config(SupervisionKind::Empirical)
    };
    let out = train(&cfg, data_of(&ts, &xs, &samples), None).unwrap();
    let mut per_epoch = vec![(0.0, 0usize); cfg.epochs];
    for r in &out.log {
        per_epoch[r.epoch].0 += r.loss.recon_loglik;
        per_epoch[r.epoch].1 += 1;
    }
    let means: Vec<f64> = per_epoch.iter().map(|(s, c)| s / *c as f64).collect();
    for e in 6..means.len() {
        assert!(means[e] > means[e - 1], "epoch {e}: {} -> {}", means[e - 1], means[e]);
    }
    assert!(out.log.iter().all(|r| r.loss.cf_supervision == 0.0 && r.loss.latent_kl == 0.0));
}

#[test]
fn checkpoint_round_trip_preserves_the_loss() {
    let (scm, samples) = toy_data(64, 5);
    let (ts, xs) = (scm.treatment_space(), scm.covariate_space());
    let cfg = VciConfig {
        epochs: 2,
        ..toy_config(SupervisionKind::Empirical)
    };
    let out = train(&cfg, data_of(&ts, &xs, &samples), None).unwrap();
    let ck = model_checkpoint(&out.state.model, Some(&out.state.target), &cfg, 2).unwrap();
    let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
    let (model, target, cfg2) = load_model(&back).unwrap();
    assert_eq!(cfg2, cfg);
    assert_eq!(model, out.state.model);
    let target = target.unwrap();

    let p_hat = out.p_hat.as_ref().unwrap();
    let batch = batch_of(&samples);
    let eval = |m: &VciModel<f32>, t| {
        vci_loss(&LossInputs {
            model: m,
            target: Some(t),
            supervision: Supervision::Empirical(p_hat),
            batch: &batch,
            noise: None,
            weights: cfg.preset().weights,
            detach: cfg.detach,
        })
        .unwrap()
        .total
    };
    let before = eval(&out.state.model, &out.state.target);
    let after = eval(&model, &target);
    assert!((before - after).abs() <= 1e-6 * before.abs().max(1.0));
}

#[test]
fn log_csv_has_one_row_per_step() {
    let (scm, samples) = toy_data(40, 6);
    let (ts, xs) = (scm.treatment_space(), scm.covariate_space());
    let cfg = VciConfig {
        epochs: 2,
        batch_size: 16,
        write_checkpoints: false,
        ..toy_config(SupervisionKind::Empirical)
    };
    let dir = tempfile::tempdir().unwrap();
    let out = train(&cfg, data_of(&ts, &xs, &samples), Some(dir.path())).unwrap();
    assert_eq!(out.log.len(), 6);
    let text = std::fs::read_to_string(dir.path().join("train_log.csv")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], log_csv_header().trim_end());
    assert_eq!(lines.len(), 7);
    assert!(!dir.path().join("checkpoints").exists());
    assert!(dir.path().join("p_hat.json").exists());
}

#[test]
fn invalid_inputs_are_rejected() {
    let (scm, samples) = toy_data(16, 7);
    let (ts, xs) = (scm.treatment_space(), scm.covariate_space());
    let base = toy_config(SupervisionKind::Empirical);
    assert!(matches!(
        train(&base, data_of(&ts, &xs, &[]), None),
        Err(TrainError::EmptyDataset)
    ));
    for bad in [
        VciConfig { epochs: 0, ..base.clone() },
        VciConfig { batch_size: 0, ..base.clone() },
        VciConfig { lr: -1.0, ..base.clone() },
    ] {
        assert!(train(&bad, data_of(&ts, &xs, &samples), None).is_err());
    }
    let continuous = TreatmentSpace::Continuous {
        ranges: vec![[0.0, 1.0]],
    };
    assert!(matches!(
        train(&base, data_of(&continuous, &xs, &samples), None),
        Err(TrainError::Config(_))
    ));
}

#[test]
fn sweep_table_shape() {
    let (scm, samples) = toy_data(64, 8);
    let (_, validation) = toy_data(32, 9);
    let (ts, xs) = (scm.treatment_space(), scm.covariate_space());
    let data = TrainData {
        validation: Some(&validation),
        ..data_of(&ts, &xs, &samples)
    };
    let base = VciConfig {
        epochs: 3,
        write_checkpoints: false,
        ..toy_config(SupervisionKind::Empirical)
    };
    let one = ablation_sweep(&base, &[AblationMode::Hae], &[1], data, 1).unwrap();
    assert_eq!(one.runs.len(), 1);
    assert_eq!(one.rows.len(), 3);
    assert!(one.rows.iter().all(|r| r.mode == AblationMode::Hae && r.seed == 1));

    let modes = [AblationMode::Hae, AblationMode::Vci];
    let serial = ablation_sweep(&base, &modes, &[1, 2], data, 1).unwrap();
    let parallel = ablation_sweep(&base, &modes, &[1, 2], data, 3).unwrap();
    assert_eq!(serial.to_csv(), parallel.to_csv());
    assert_eq!(serial.runs_for(AblationMode::Vci).count(), 2);
    let run = &serial.runs[0];
    let best = serial
        .rows
        .iter()
        .filter(|r| r.mode == run.mode && r.seed == run.seed)
        .map(|r| r.cf_mse)
        .fold(f64::INFINITY, f64::min);
    assert_eq!(run.best_mse, best);

    let no_truth: Vec<FullSample> = validation.iter().cloned().map(|s| FullSample { y_prime_true: None, ..s }).collect();
    let bad = TrainData {
        validation: Some(&no_truth),
        ..data
    };
    assert!(ablation_sweep(&base, &modes, &[1], bad, 1).is_err());
}
