mod common;

use common::*;
use proptest::prelude::*;
use vcilab::evaluation::*;
use vcilab::scm::{blob_attributes, generate_dataset, BlobImageSpec, DiscreteScm, FullSample, ScmSpec, Treatment};
use vcilab::training::SupervisionKind;

fn blob_data(n: usize, seed: u64) -> (vcilab::scm::Scm, Vec<FullSample>) {
    let spec = ScmSpec::BlobImage(BlobImageSpec::default());
    (spec.build().unwrap(), generate_dataset(&spec, n, seed).unwrap())
}

/// Encoder whose latent mean is the treatment level.
struct LeakEncoder;

impl LatentEncoder for LeakEncoder {
    fn encode(&self, y: &[Vec<f64>], t: &[Treatment], _x: &[Vec<usize>]) -> Result<Vec<Vec<f64>>, EvalError> {
        Ok(y.iter().zip(t).map(|(_, t)| vec![t.level().unwrap() as f64]).collect())
    }
}

struct ConstantEncoder;

impl LatentEncoder for ConstantEncoder {
    fn encode(&self, y: &[Vec<f64>], _t: &[Treatment], _x: &[Vec<usize>]) -> Result<Vec<Vec<f64>>, EvalError> {
        Ok(vec![vec![0.3, -1.0]; y.len()])
    }
}

#[test]
fn oracle_replay_has_zero_error() {
    let (scm, samples) = blob_data(64, 1);
    let e = counterfactual_errors(&OracleReplay, &samples, Some(&scm)).unwrap();
    assert_eq!(e.mse, 0.0);
    assert_eq!(e.thickness_mae, Some(0.0));
    assert_eq!(e.intensity_mae, Some(0.0));
}

#[test]
fn identity_error_is_the_dataset_statistic() {
    let (_, samples) = toy_data(200, 2);
    let expected = samples
        .iter()
        .map(|s| {
            let yp = s.y_prime_true.as_ref().unwrap();
            s.y.iter().zip(yp).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / s.y.len() as f64
        })
        .sum::<f64>()
        / samples.len() as f64;
    let got = counterfactual_mse(&IdentityPredictor, &samples).unwrap();
    assert!((got - expected).abs() < 1e-12);
    assert!(got > 0.0);
}

#[test]
fn factual_counterfactual_error_is_reconstruction_error() {
    let (scm, mut samples) = toy_data(50, 3);
    let model = toy_model(&toy_config(SupervisionKind::Empirical), &scm, 3);
    let recon = reconstruction_mse(&model, &samples).unwrap();
    for s in &mut samples {
        s.t_prime = s.t.clone();
        s.y_prime_true = Some(s.y.clone());
    }
    assert_eq!(counterfactual_mse(&model, &samples).unwrap(), recon);
}

#[test]
fn missing_ground_truth_is_an_error() {
    let (_, mut samples) = toy_data(5, 4);
    samples[3].y_prime_true = None;
    assert!(matches!(
        counterfactual_mse(&IdentityPredictor, &samples),
        Err(EvalError::MissingGroundTruth(3))
    ));
    assert!(matches!(consistency_probes(&samples), Err(EvalError::MissingGroundTruth(3))));
}

#[test]
fn group_r2_reference_values() {
    let truth = vec![vec![1.0, 3.0, -2.0, 0.5], vec![0.0, 4.0, 2.0, 1.0]];
    assert_eq!(group_r2(&truth, &truth, None).unwrap(), 1.0);
    let global: Vec<Vec<f64>> = truth
        .iter()
        .map(|t| vec![t.iter().sum::<f64>() / t.len() as f64; t.len()])
        .collect();
    assert!(group_r2(&global, &truth, None).unwrap().abs() < 1e-15);
    assert!(matches!(
        group_r2(&truth, &truth, Some(&[vec![0, 1], vec![2]])),
        Err(EvalError::TooFewComponents(1))
    ));
    assert!(group_r2(&[], &[], None).is_err());
}

#[test]
fn hard_components_rank_by_magnitude() {
    assert_eq!(hard_components(&[0.1, -3.0, 2.0, -2.0, 0.0], 3), vec![1, 2, 3]);
    assert_eq!(hard_components(&[1.0, 2.0], 5), vec![1, 0]);
}

proptest! {
    #[test]
    fn group_r2_permutation_invariant(
        pred in prop::collection::vec(-5.0f64..5.0, 6),
        truth in prop::collection::vec(-5.0f64..5.0, 6),
        perm in Just((0..6usize).collect::<Vec<_>>()).prop_shuffle(),
    ) {
        let p2: Vec<f64> = perm.iter().map(|&i| pred[i]).collect();
        let t2: Vec<f64> = perm.iter().map(|&i| truth[i]).collect();
        let a = group_r2(&[pred.clone()], &[truth.clone()], None).unwrap();
        let b = group_r2(&[p2], &[t2], None).unwrap();
        prop_assert!((a - b).abs() < 1e-9 * a.abs().max(1.0) || (a.is_infinite() && a == b));
        prop_assert!(a <= 1.0);
    }
}

#[test]
fn consistency_kl_reference_encoders() {
    let (_, samples) = toy_data(100, 5);
    let probes = consistency_probes(&samples).unwrap();
    assert!(!probes.is_empty() && probes.len() < samples.len());
    assert_eq!(oracle_consistency_kl(&ConstantEncoder, &probes).unwrap(), 0.0);

    let expected = probes
        .iter()
        .map(|p| 0.5 * (p.t.level().unwrap() as f64 - p.t_prime.level().unwrap() as f64).powi(2))
        .sum::<f64>()
        / probes.len() as f64;
    let got = oracle_consistency_kl(&LeakEncoder, &probes).unwrap();
    assert!(got > 0.0);
    assert!((got - expected).abs() < 1e-12);

    let mut bad = probes.clone();
    bad[0].y_prime.pop();
    assert!(matches!(oracle_consistency_kl(&LeakEncoder, &bad), Err(EvalError::Malformed(_))));
    assert!(matches!(oracle_consistency_kl(&LeakEncoder, &[]), Err(EvalError::Empty)));
}

#[test]
fn restrictiveness_is_zero_and_rejects_moving_treatments() {
    let same = vec![
        RestrictivenessProbe {
            t_before: Treatment::Level(1),
            t_after: Treatment::Level(1),
        };
        3
    ];
    assert_eq!(oracle_restrictiveness(&same).unwrap(), 0.0);
    assert_eq!(oracle_restrictiveness(&[]).unwrap(), 0.0);
    let moved = [RestrictivenessProbe {
        t_before: Treatment::Level(0),
        t_after: Treatment::Level(2),
    }];
    assert!(matches!(oracle_restrictiveness(&moved), Err(EvalError::Malformed(_))));
}

#[test]
fn exact_autoencoder_composes_perfectly() {
    let (scm, samples) = blob_data(40, 6);
    for cycles in [1, 3, 10] {
        // the identity map reproduces y at the factual treatment
        let m = axiomatic_metrics(&IdentityPredictor, &samples, cycles, &scm).unwrap();
        assert_eq!(m.composition, 0.0);
        assert_eq!(m.composition_cycles, 0.0);
        assert_eq!(m.cycles, cycles);
    }
}

#[test]
fn identity_model_axiomatic_statistics() {
    let (scm, samples) = blob_data(40, 7);
    let m = axiomatic_metrics(&IdentityPredictor, &samples, 2, &scm).unwrap();
    assert_eq!(m.composition, 0.0);
    assert_eq!(m.reversibility, 0.0);
    let res = scm.blob().unwrap().resolution();
    let (mut th, mut it) = (0.0, 0.0);
    for s in &samples {
        let (a, b) = blob_attributes(&s.y, res).unwrap();
        let (ga, gb) = scm.blob_target(&s.t_prime).unwrap();
        th += (a - ga).powi(2);
        it += (b - gb).powi(2);
    }
    let n = samples.len() as f64;
    assert!((m.effectiveness_thickness - th / n).abs() < 1e-12);
    assert!((m.effectiveness_intensity - it / n).abs() < 1e-12);
    assert!(m.effectiveness > 0.0);

    let (toy, toy_samples) = toy_data(5, 1);
    assert!(matches!(
        axiomatic_metrics(&IdentityPredictor, &toy_samples, 1, &toy),
        Err(EvalError::NotBlob)
    ));
}

#[test]
fn outcome_variance_matches_hand_value() {
    let mk = |y: Vec<f64>| FullSample {
        x: vec![0],
        t: Treatment::Level(0),
        t_prime: Treatment::Level(0),
        y,
        z_true: None,
        y_prime_true: None,
    };
    let s = [mk(vec![0.0, 1.0]), mk(vec![2.0, 1.0])];
    // per-dimension variances 1 and 0
    assert_eq!(outcome_variance(&s), 0.5);
}

fn degenerate() -> DiscreteScm {
    DiscreteScm {
        p_x: vec![1.0],
        p_z_given_x: vec![vec![1.0]],
        p_t_given_x: vec![vec![1.0]],
        p_y_given_zt: vec![vec![vec![1.0]]],
    }
}

#[test]
fn degenerate_scm_has_zero_gap() {
    for checks in [
        verify_elbo_discrete(&degenerate()).unwrap(),
        verify_implicit_elbo_discrete(&degenerate()).unwrap(),
    ] {
        assert_eq!(checks.len(), 1);
        assert_eq!(checks[0].lhs, 0.0);
        assert_eq!(checks[0].gap, 0.0);
    }
}

#[test]
fn singleton_latent_makes_the_bound_tight() {
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(1);
    let scm = DiscreteScm::random(3, 1, 3, 4, &mut rng);
    let checks = verify_elbo_discrete(&scm).unwrap();
    assert_eq!(checks.len(), 3 * 3 * 4 * 3 * 4);
    for c in &checks {
        assert!(c.gap.abs() < 1e-12, "{c:?}");
        assert_eq!(c.gap, c.lhs - c.rhs);
    }
}

#[test]
fn treatment_free_outcomes_give_t_prime_free_implicit_bound() {
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(2);
    let mut scm = DiscreteScm::random(2, 3, 3, 3, &mut rng);
    for z in 0..3 {
        let row = scm.p_y_given_zt[z][0].clone();
        for t in 0..3 {
            scm.p_y_given_zt[z][t] = row.clone();
        }
    }
    let checks = verify_implicit_elbo_discrete(&scm).unwrap();
    for c in &checks {
        assert!(c.holds());
        let same_row = checks
            .iter()
            .filter(|d| (d.assignment.x, d.assignment.t, d.assignment.y) == (c.assignment.x, c.assignment.t, c.assignment.y));
        for d in same_row {
            assert_eq!(d.lhs, c.lhs);
        }
    }
}

#[test]
fn random_scms_satisfy_both_bounds() {
    let scms = random_discrete_scms(30, 4, 11);
    let s = summarize_bounds(&scms, verify_elbo_discrete).unwrap();
    assert_eq!(s.scms_passed, 30);
    assert!(s.min_gap >= -1e-9);
    let s = summarize_bounds(&scms, verify_implicit_elbo_discrete).unwrap();
    assert_eq!(s.scms_passed, 30);
    assert!(s.min_gap >= -1e-9);
}

#[test]
fn malformed_tables_are_rejected() {
    let mut scm = degenerate();
    scm.p_x = vec![0.7];
    assert!(verify_elbo_discrete(&scm).is_err());
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(3);
    let big = DiscreteScm::random(2, 17, 2, 2, &mut rng);
    assert!(matches!(verify_elbo_discrete(&big), Err(EvalError::SupportTooLarge(17))));
}
