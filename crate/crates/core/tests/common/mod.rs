#![allow(dead_code)]

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vcilab::models::{EmbeddingDims, EmpiricalOutcomeModel, VciModel};
use vcilab::objectives::Batch;
use vcilab::scm::{generate_dataset, FullSample, LinearGaussianSpec, Scm, ScmSpec};
use vcilab::training::{SupervisionKind, VciConfig};

/// Linear-Gaussian toy with an 8-dim outcome, 3 treatment levels and two
/// covariate strata.
pub fn toy_spec(seed: u64) -> ScmSpec {
    ScmSpec::LinearGaussian(LinearGaussianSpec {
        covariate_cards: vec![2],
        treatment_levels: 3,
        latent_dim: 3,
        outcome_dim: 8,
        seed,
        ..LinearGaussianSpec::default()
    })
}

pub fn toy_data(n: usize, seed: u64) -> (Scm, Vec<FullSample>) {
    let spec = toy_spec(7);
    (spec.build().unwrap(), generate_dataset(&spec, n, seed).unwrap())
}

/// Small two-layer networks.
pub fn toy_config(supervision: SupervisionKind) -> VciConfig {
    VciConfig {
        latent_dim: 3,
        encoder_hidden: vec![6],
        decoder_hidden: vec![6],
        discriminator_hidden: vec![5],
        embedding: EmbeddingDims {
            treatment: 3,
            covariate: 2,
            freqs: 2,
        },
        supervision,
        batch_size: 16,
        epochs: 2,
        ..VciConfig::default()
    }
}

pub fn toy_model(cfg: &VciConfig, scm: &Scm, seed: u64) -> VciModel<f64> {
    let mc = cfg.model_config(scm.outcome_dim(), &scm.treatment_space(), &scm.covariate_space());
    VciModel::new(mc, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

pub fn batch_of(samples: &[FullSample]) -> Batch {
    Batch {
        x: samples.iter().map(|s| s.x.clone()).collect(),
        t: samples.iter().map(|s| s.t.clone()).collect(),
        t_prime: samples.iter().map(|s| s.t_prime.clone()).collect(),
        y: samples.iter().map(|s| s.y.clone()).collect(),
    }
}

pub fn p_hat_of(scm: &Scm, samples: &[FullSample]) -> EmpiricalOutcomeModel {
    EmpiricalOutcomeModel::fit(
        &scm.covariate_space(),
        scm.treatment_space().levels().unwrap(),
        samples.iter().map(|s| (s.x.as_slice(), &s.t, s.y.as_slice())),
        None,
    )
    .unwrap()
}

/// p̂ fitted on a sample large enough to cover every stratum.
pub fn reference_p_hat(scm: &Scm) -> EmpiricalOutcomeModel {
    p_hat_of(scm, &toy_data(600, 99).1)
}
