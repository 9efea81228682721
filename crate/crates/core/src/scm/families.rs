use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::blob::{render_blob, BlobTreatment};
use super::discrete::{dirichlet_row, DiscreteScm};
use super::{sample_rng, CovariateSpace, FullSample, ScmError, Treatment, TreatmentSpace};

/// Monte-Carlo draws used for marginals without a closed form.
pub const MC_MARGINAL_DRAWS: usize = 1_000_000;

/// A parameterized SCM. Parameters left out of the JSON are drawn from
/// `seed` when the spec is built.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum ScmSpec {
    LinearGaussian(LinearGaussianSpec),
    NonlinearVector(NonlinearVectorSpec),
    BlobImage(BlobImageSpec),
    Discrete(DiscreteSpec),
}

/// `z = μ_x + σ_z ε`, `y = A z + B_t + σ_y u` with `u` shared by `y` and `y'`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearGaussianSpec {
    pub covariate_cards: Vec<usize>,
    #[serde(default)]
    pub covariate_probs: Option<Vec<Vec<f64>>>,
    pub treatment_levels: usize,
    pub latent_dim: usize,
    pub outcome_dim: usize,
    pub latent_noise: f64,
    pub outcome_noise: f64,
    /// `[stratum][latent]`
    #[serde(default)]
    pub latent_means: Option<Vec<Vec<f64>>>,
    /// `A` as `[outcome][latent]`
    #[serde(default)]
    pub mixing: Option<Vec<Vec<f64>>>,
    /// `B` as `[level][outcome]`
    #[serde(default)]
    pub treatment_effects: Option<Vec<Vec<f64>>>,
    /// `p(t | x)` as `[stratum][level]`
    #[serde(default)]
    pub propensity: Option<Vec<Vec<f64>>>,
    pub seed: u64,
}

/// `y = W₂ tanh(W₁ z + V_t) + b₂ + E_t + σ_y u`. Level 0 is the control
/// (`V_0 = E_0 = 0`); only a random `effect_fraction` of the outcome
/// components carry an additive effect `E_t`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NonlinearVectorSpec {
    pub covariate_cards: Vec<usize>,
    #[serde(default)]
    pub covariate_probs: Option<Vec<Vec<f64>>>,
    pub treatment_levels: usize,
    pub latent_dim: usize,
    pub outcome_dim: usize,
    pub hidden_dim: usize,
    pub latent_noise: f64,
    pub outcome_noise: f64,
    pub effect_scale: f64,
    pub effect_fraction: f64,
    /// Scale of the treatment shift inside the nonlinearity.
    #[serde(default = "default_interaction")]
    pub interaction_scale: f64,
    #[serde(default)]
    pub propensity: Option<Vec<Vec<f64>>>,
    pub seed: u64,
}

fn default_interaction() -> f64 {
    0.5
}

/// Gaussian-bump images. `z_true = (dx, dy, log_aniso)`; the first
/// covariate stratum shifts the centroid horizontally.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlobImageSpec {
    pub resolution: usize,
    pub covariate_cards: Vec<usize>,
    #[serde(default)]
    pub covariate_probs: Option<Vec<Vec<f64>>>,
    pub treatment: BlobTreatment,
    pub offset_noise: f64,
    pub max_offset: f64,
    pub covariate_shift: f64,
    pub aniso_noise: f64,
    pub outcome_noise: f64,
    /// Grid treatments only: `p(t | x)` as `[stratum][level]`.
    #[serde(default)]
    pub propensity: Option<Vec<Vec<f64>>>,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscreteSpec {
    #[serde(default)]
    pub tables: Option<DiscreteScm>,
    /// `(|X|, |Z|, |T|, |Y|)` for Dirichlet(1) tables when `tables` is absent.
    #[serde(default)]
    pub sizes: Option<[usize; 4]>,
    pub seed: u64,
}

impl Default for BlobImageSpec {
    fn default() -> Self {
        Self {
            resolution: 16,
            covariate_cards: vec![2],
            covariate_probs: None,
            treatment: BlobTreatment::Grid {
                thickness: vec![1.2, 1.8, 2.4],
                intensity: vec![0.4, 0.7, 1.0],
            },
            offset_noise: 1.0,
            max_offset: 2.0,
            covariate_shift: 1.0,
            aniso_noise: 0.25,
            outcome_noise: 0.0,
            propensity: None,
            seed: 0,
        }
    }
}

impl Default for NonlinearVectorSpec {
    fn default() -> Self {
        Self {
            covariate_cards: vec![3],
            covariate_probs: None,
            treatment_levels: 4,
            latent_dim: 8,
            outcome_dim: 100,
            hidden_dim: 32,
            latent_noise: 1.0,
            outcome_noise: 0.1,
            effect_scale: 1.0,
            effect_fraction: 0.5,
            interaction_scale: default_interaction(),
            propensity: None,
            seed: 0,
        }
    }
}

impl Default for LinearGaussianSpec {
    fn default() -> Self {
        Self {
            covariate_cards: vec![3],
            covariate_probs: None,
            treatment_levels: 3,
            latent_dim: 3,
            outcome_dim: 3,
            latent_noise: 1.0,
            outcome_noise: 0.5,
            latent_means: None,
            mixing: None,
            treatment_effects: None,
            propensity: None,
            seed: 0,
        }
    }
}

/// A population target: mean vector and, for Monte-Carlo marginals, its
/// standard error.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Marginal {
    pub mean: Vec<f64>,
    pub std_error: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
struct Covariates {
    space: CovariateSpace,
    marginals: Vec<Vec<f64>>,
}

impl Covariates {
    fn build(cards: &[usize], probs: &Option<Vec<Vec<f64>>>) -> Result<Self, ScmError> {
        if cards.is_empty() || cards.iter().any(|&c| c == 0) {
            return Err(ScmError::InvalidSpec(
                "covariate_cards: need at least one covariate, all cardinalities ≥ 1".into(),
            ));
        }
        let marginals = match probs {
            Some(p) => {
                if p.len() != cards.len() {
                    return Err(ScmError::InvalidSpec("covariate_probs: one row per covariate".into()));
                }
                for (row, &c) in p.iter().zip(cards) {
                    check_distribution("covariate_probs", row, c)?;
                }
                p.clone()
            }
            None => cards.iter().map(|&c| vec![1.0 / c as f64; c]).collect(),
        };
        Ok(Self {
            space: CovariateSpace::new(cards.to_vec()),
            marginals,
        })
    }

    fn sample(&self, rng: &mut impl Rng) -> Vec<usize> {
        self.marginals
            .iter()
            .map(|row| DiscreteScm::sample_categorical(row, rng.gen::<f64>()))
            .collect()
    }

    fn prob(&self, x: &[usize]) -> f64 {
        x.iter().zip(&self.marginals).map(|(&v, row)| row[v]).product()
    }
}

fn check_distribution(name: &str, row: &[f64], len: usize) -> Result<(), ScmError> {
    if row.len() != len {
        return Err(ScmError::InvalidSpec(format!("{name}: expected {len} entries, got {}", row.len())));
    }
    if row.iter().any(|p| !(*p >= 0.0)) {
        return Err(ScmError::InvalidSpec(format!("{name}: negative probability")));
    }
    let s: f64 = row.iter().sum();
    if (s - 1.0).abs() > 1e-9 {
        return Err(ScmError::InvalidSpec(format!("{name}: probabilities sum to {s}")));
    }
    Ok(())
}

fn normal_vec(n: usize, scale: f64, rng: &mut impl Rng) -> Vec<f64> {
    (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
}

fn normal_mat(rows: usize, cols: usize, scale: f64, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    (0..rows).map(|_| normal_vec(cols, scale, rng)).collect()
}

/// Half uniform, half Dirichlet(1): confounded but with `p ≥ 0.5/|T|`.
fn default_propensity(strata: usize, levels: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    (0..strata)
        .map(|_| {
            dirichlet_row(levels, rng)
                .into_iter()
                .map(|p| 0.5 / levels as f64 + 0.5 * p)
                .collect()
        })
        .collect()
}

fn propensity_table(
    given: &Option<Vec<Vec<f64>>>,
    strata: usize,
    levels: usize,
    rng: &mut impl Rng,
) -> Result<Vec<Vec<f64>>, ScmError> {
    if levels == 0 {
        return Err(ScmError::InvalidSpec("treatment_levels must be ≥ 1".into()));
    }
    match given {
        Some(p) => {
            if p.len() != strata {
                return Err(ScmError::InvalidSpec(format!("propensity: need {strata} strata rows")));
            }
            for row in p {
                check_distribution("propensity", row, levels)?;
            }
            Ok(p.clone())
        }
        None => Ok(default_propensity(strata, levels, rng)),
    }
}

fn check_matrix(name: &str, m: &[Vec<f64>], rows: usize, cols: usize) -> Result<(), ScmError> {
    if m.len() != rows || m.iter().any(|r| r.len() != cols) {
        return Err(ScmError::InvalidSpec(format!("{name}: expected a {rows}x{cols} matrix")));
    }
    if m.iter().flatten().any(|v| !v.is_finite()) {
        return Err(ScmError::InvalidSpec(format!("{name}: non-finite entry")));
    }
    Ok(())
}

fn check_noise(name: &str, v: f64) -> Result<(), ScmError> {
    if v >= 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(ScmError::InvalidSpec(format!("{name} must be a finite value ≥ 0")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LinearGaussianModel {
    cov: Covariates,
    propensity: Vec<Vec<f64>>,
    latent_means: Vec<Vec<f64>>,
    mixing: Vec<Vec<f64>>,
    effects: Vec<Vec<f64>>,
    latent_noise: f64,
    outcome_noise: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NonlinearModel {
    cov: Covariates,
    propensity: Vec<Vec<f64>>,
    latent_means: Vec<Vec<f64>>,
    w1: Vec<Vec<f64>>,
    shifts: Vec<Vec<f64>>,
    w2: Vec<Vec<f64>>,
    b2: Vec<f64>,
    effects: Vec<Vec<f64>>,
    latent_noise: f64,
    outcome_noise: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlobModel {
    cov: Covariates,
    treatment: BlobTreatment,
    propensity: Option<Vec<Vec<f64>>>,
    resolution: usize,
    offset_noise: f64,
    max_offset: f64,
    covariate_shift: f64,
    aniso_noise: f64,
    outcome_noise: f64,
}

impl BlobModel {
    pub fn resolution(&self) -> usize {
        self.resolution
    }
}

/// A built generator.
#[derive(Clone, Debug, PartialEq)]
pub enum Scm {
    LinearGaussian(LinearGaussianModel),
    Nonlinear(NonlinearModel),
    Blob(BlobModel),
    Discrete(DiscreteScm),
}

impl ScmSpec {
    pub fn seed(&self) -> u64 {
        match self {
            ScmSpec::LinearGaussian(s) => s.seed,
            ScmSpec::NonlinearVector(s) => s.seed,
            ScmSpec::BlobImage(s) => s.seed,
            ScmSpec::Discrete(s) => s.seed,
        }
    }

    pub fn family(&self) -> &'static str {
        match self {
            ScmSpec::LinearGaussian(_) => "linear_gaussian",
            ScmSpec::NonlinearVector(_) => "nonlinear_vector",
            ScmSpec::BlobImage(_) => "blob_image",
            ScmSpec::Discrete(_) => "discrete",
        }
    }

    /// Validates the spec and materializes every parameter.
    pub fn build(&self) -> Result<Scm, ScmError> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed());
        match self {
            ScmSpec::LinearGaussian(s) => {
                let cov = Covariates::build(&s.covariate_cards, &s.covariate_probs)?;
                if s.latent_dim == 0 || s.outcome_dim == 0 {
                    return Err(ScmError::InvalidSpec("latent_dim and outcome_dim must be ≥ 1".into()));
                }
                check_noise("latent_noise", s.latent_noise)?;
                check_noise("outcome_noise", s.outcome_noise)?;
                let strata = cov.space.strata();
                let propensity = propensity_table(&s.propensity, strata, s.treatment_levels, &mut rng)?;
                let latent_means = s
                    .latent_means
                    .clone()
                    .unwrap_or_else(|| normal_mat(strata, s.latent_dim, 1.0, &mut rng));
                check_matrix("latent_means", &latent_means, strata, s.latent_dim)?;
                let mixing = s
                    .mixing
                    .clone()
                    .unwrap_or_else(|| normal_mat(s.outcome_dim, s.latent_dim, 1.0 / (s.latent_dim as f64).sqrt(), &mut rng));
                check_matrix("mixing", &mixing, s.outcome_dim, s.latent_dim)?;
                let effects = s
                    .treatment_effects
                    .clone()
                    .unwrap_or_else(|| normal_mat(s.treatment_levels, s.outcome_dim, 1.0, &mut rng));
                check_matrix("treatment_effects", &effects, s.treatment_levels, s.outcome_dim)?;
                Ok(Scm::LinearGaussian(LinearGaussianModel {
                    cov,
                    propensity,
                    latent_means,
                    mixing,
                    effects,
                    latent_noise: s.latent_noise,
                    outcome_noise: s.outcome_noise,
                }))
            }
            ScmSpec::NonlinearVector(s) => {
                let cov = Covariates::build(&s.covariate_cards, &s.covariate_probs)?;
                if s.latent_dim == 0 || s.outcome_dim == 0 || s.hidden_dim == 0 {
                    return Err(ScmError::InvalidSpec("latent_dim, outcome_dim, hidden_dim must be ≥ 1".into()));
                }
                if !(0.0..=1.0).contains(&s.effect_fraction) {
                    return Err(ScmError::InvalidSpec("effect_fraction must lie in [0, 1]".into()));
                }
                check_noise("latent_noise", s.latent_noise)?;
                check_noise("outcome_noise", s.outcome_noise)?;
                check_noise("effect_scale", s.effect_scale)?;
                let strata = cov.space.strata();
                let propensity = propensity_table(&s.propensity, strata, s.treatment_levels, &mut rng)?;
                let latent_means = normal_mat(strata, s.latent_dim, 1.0, &mut rng);
                let w1 = normal_mat(s.hidden_dim, s.latent_dim, 1.0 / (s.latent_dim as f64).sqrt(), &mut rng);
                let mut shifts = normal_mat(s.treatment_levels, s.hidden_dim, s.interaction_scale, &mut rng);
                shifts[0].iter_mut().for_each(|v| *v = 0.0);
                let w2 = normal_mat(s.outcome_dim, s.hidden_dim, 1.0 / (s.hidden_dim as f64).sqrt(), &mut rng);
                let b2 = normal_vec(s.outcome_dim, 0.5, &mut rng);
                let n_affected = (s.effect_fraction * s.outcome_dim as f64).round() as usize;
                let mut order: Vec<usize> = (0..s.outcome_dim).collect();
                for i in (1..order.len()).rev() {
                    order.swap(i, rng.gen_range(0..=i));
                }
                let mut effects = vec![vec![0.0; s.outcome_dim]; s.treatment_levels];
                for row in effects.iter_mut().skip(1) {
                    for &j in &order[..n_affected] {
                        row[j] = s.effect_scale * rng.sample::<f64, _>(StandardNormal);
                    }
                }
                Ok(Scm::Nonlinear(NonlinearModel {
                    cov,
                    propensity,
                    latent_means,
                    w1,
                    shifts,
                    w2,
                    b2,
                    effects,
                    latent_noise: s.latent_noise,
                    outcome_noise: s.outcome_noise,
                }))
            }
            ScmSpec::BlobImage(s) => {
                let cov = Covariates::build(&s.covariate_cards, &s.covariate_probs)?;
                if s.resolution < 4 {
                    return Err(ScmError::InvalidSpec("resolution must be ≥ 4".into()));
                }
                check_noise("offset_noise", s.offset_noise)?;
                check_noise("max_offset", s.max_offset)?;
                check_noise("aniso_noise", s.aniso_noise)?;
                check_noise("outcome_noise", s.outcome_noise)?;
                let valid_attr = |th: f64, a: f64| th > 0.0 && a > 0.0 && th.is_finite() && a.is_finite();
                let propensity = match &s.treatment {
                    BlobTreatment::Continuous { thickness, intensity } => {
                        if !(thickness[0] <= thickness[1] && intensity[0] <= intensity[1])
                            || !valid_attr(thickness[0], intensity[0])
                        {
                            return Err(ScmError::InvalidSpec("treatment: ranges must be positive and ordered".into()));
                        }
                        if s.propensity.is_some() {
                            return Err(ScmError::InvalidSpec(
                                "propensity: only grid treatments take a propensity table".into(),
                            ));
                        }
                        None
                    }
                    BlobTreatment::Grid { thickness, intensity } => {
                        if thickness.is_empty()
                            || intensity.is_empty()
                            || thickness.iter().any(|&th| !valid_attr(th, 1.0))
                            || intensity.iter().any(|&a| !valid_attr(1.0, a))
                        {
                            return Err(ScmError::InvalidSpec("treatment: grid levels must be positive".into()));
                        }
                        Some(propensity_table(
                            &s.propensity,
                            cov.space.strata(),
                            thickness.len() * intensity.len(),
                            &mut rng,
                        )?)
                    }
                };
                Ok(Scm::Blob(BlobModel {
                    cov,
                    treatment: s.treatment.clone(),
                    propensity,
                    resolution: s.resolution,
                    offset_noise: s.offset_noise,
                    max_offset: s.max_offset,
                    covariate_shift: s.covariate_shift,
                    aniso_noise: s.aniso_noise,
                    outcome_noise: s.outcome_noise,
                }))
            }
            ScmSpec::Discrete(s) => {
                let tables = match (&s.tables, s.sizes) {
                    (Some(t), _) => t.clone(),
                    (None, Some([nx, nz, nt, ny])) => {
                        if nx == 0 || nz == 0 || nt == 0 || ny == 0 {
                            return Err(ScmError::InvalidSpec("sizes: all supports must be ≥ 1".into()));
                        }
                        DiscreteScm::random(nx, nz, nt, ny, &mut rng)
                    }
                    (None, None) => return Err(ScmError::InvalidSpec("discrete: give `tables` or `sizes`".into())),
                };
                tables.validate()?;
                Ok(Scm::Discrete(tables))
            }
        }
    }
}

fn clip(v: f64, bound: f64) -> f64 {
    v.max(-bound).min(bound)
}

impl Scm {
    pub fn covariate_space(&self) -> CovariateSpace {
        match self {
            Scm::LinearGaussian(m) => m.cov.space.clone(),
            Scm::Nonlinear(m) => m.cov.space.clone(),
            Scm::Blob(m) => m.cov.space.clone(),
            Scm::Discrete(d) => CovariateSpace::new(vec![d.nx()]),
        }
    }

    pub fn covariate_prob(&self, x: &[usize]) -> Option<f64> {
        if !self.covariate_space().contains(x) {
            return None;
        }
        Some(match self {
            Scm::LinearGaussian(m) => m.cov.prob(x),
            Scm::Nonlinear(m) => m.cov.prob(x),
            Scm::Blob(m) => m.cov.prob(x),
            Scm::Discrete(d) => d.p_x[x[0]],
        })
    }

    pub fn treatment_space(&self) -> TreatmentSpace {
        match self {
            Scm::LinearGaussian(m) => TreatmentSpace::Categorical {
                levels: m.effects.len(),
            },
            Scm::Nonlinear(m) => TreatmentSpace::Categorical {
                levels: m.effects.len(),
            },
            Scm::Blob(m) => match &m.treatment {
                BlobTreatment::Continuous { thickness, intensity } => TreatmentSpace::Continuous {
                    ranges: vec![*thickness, *intensity],
                },
                g @ BlobTreatment::Grid { .. } => TreatmentSpace::Categorical {
                    levels: g.levels().expect("grid"),
                },
            },
            Scm::Discrete(d) => TreatmentSpace::Categorical { levels: d.nt() },
        }
    }

    pub fn outcome_dim(&self) -> usize {
        match self {
            Scm::LinearGaussian(m) => m.mixing.len(),
            Scm::Nonlinear(m) => m.w2.len(),
            Scm::Blob(m) => m.resolution * m.resolution,
            Scm::Discrete(_) => 1,
        }
    }

    pub fn blob(&self) -> Option<&BlobModel> {
        match self {
            Scm::Blob(b) => Some(b),
            _ => None,
        }
    }

    /// True `p(t | x)` for categorical treatments.
    pub fn propensity(&self, x: &[usize], t: usize) -> Option<f64> {
        let s = self.covariate_space().flat(x)?;
        let table = match self {
            Scm::LinearGaussian(m) => &m.propensity,
            Scm::Nonlinear(m) => &m.propensity,
            Scm::Blob(m) => m.propensity.as_ref()?,
            Scm::Discrete(d) => &d.p_t_given_x,
        };
        table[s].get(t).copied()
    }

    fn sample_x(&self, rng: &mut impl Rng) -> Vec<usize> {
        match self {
            Scm::LinearGaussian(m) => m.cov.sample(rng),
            Scm::Nonlinear(m) => m.cov.sample(rng),
            Scm::Blob(m) => m.cov.sample(rng),
            Scm::Discrete(d) => vec![DiscreteScm::sample_categorical(&d.p_x, rng.gen())],
        }
    }

    fn sample_z(&self, x: &[usize], rng: &mut impl Rng) -> Vec<f64> {
        let s = self.covariate_space().flat(x).expect("x drawn from support");
        match self {
            Scm::LinearGaussian(m) => m.latent_means[s]
                .iter()
                .map(|mu| mu + m.latent_noise * rng.sample::<f64, _>(StandardNormal))
                .collect(),
            Scm::Nonlinear(m) => m.latent_means[s]
                .iter()
                .map(|mu| mu + m.latent_noise * rng.sample::<f64, _>(StandardNormal))
                .collect(),
            Scm::Blob(m) => {
                let strata = m.cov.space.strata() as f64;
                let shift = m.covariate_shift * (s as f64 - (strata - 1.0) / 2.0);
                let dx = clip(shift + m.offset_noise * rng.sample::<f64, _>(StandardNormal), m.max_offset);
                let dy = clip(m.offset_noise * rng.sample::<f64, _>(StandardNormal), m.max_offset);
                let la = clip(m.aniso_noise * rng.sample::<f64, _>(StandardNormal), 2.0 * m.aniso_noise);
                vec![dx, dy, la]
            }
            Scm::Discrete(d) => vec![DiscreteScm::sample_categorical(&d.p_z_given_x[s], rng.gen()) as f64],
        }
    }

    fn sample_t(&self, x: &[usize], rng: &mut impl Rng) -> Treatment {
        match self {
            Scm::Blob(BlobModel {
                treatment: BlobTreatment::Continuous { thickness, intensity },
                ..
            }) => Treatment::Point(vec![
                rng.gen_range(thickness[0]..=thickness[1]),
                rng.gen_range(intensity[0]..=intensity[1]),
            ]),
            _ => {
                let s = self.covariate_space().flat(x).expect("x drawn from support");
                let row = match self {
                    Scm::LinearGaussian(m) => &m.propensity[s],
                    Scm::Nonlinear(m) => &m.propensity[s],
                    Scm::Blob(m) => &m.propensity.as_ref().expect("grid")[s],
                    Scm::Discrete(d) => &d.p_t_given_x[s],
                };
                Treatment::Level(DiscreteScm::sample_categorical(row, rng.gen()))
            }
        }
    }

    /// Exogenous outcome noise shared by the factual and counterfactual
    /// outcome of one individual.
    fn sample_outcome_noise(&self, rng: &mut impl Rng) -> Vec<f64> {
        match self {
            Scm::LinearGaussian(m) => normal_vec(m.mixing.len(), m.outcome_noise, rng),
            Scm::Nonlinear(m) => normal_vec(m.w2.len(), m.outcome_noise, rng),
            Scm::Blob(m) => {
                if m.outcome_noise > 0.0 {
                    normal_vec(m.resolution * m.resolution, m.outcome_noise, rng)
                } else {
                    Vec::new()
                }
            }
            Scm::Discrete(_) => vec![rng.gen::<f64>()],
        }
    }

    /// Blob attributes `(thickness, intensity)` of a treatment value.
    pub fn blob_target(&self, t: &Treatment) -> Option<(f64, f64)> {
        match (self, t) {
            (Scm::Blob(m), Treatment::Level(l)) => m.treatment.level_attributes(*l),
            (Scm::Blob(_), Treatment::Point(p)) if p.len() == 2 => Some((p[0], p[1])),
            _ => None,
        }
    }

    /// Structural outcome `f_Y(z, t, u)`.
    pub fn outcome(&self, z: &[f64], t: &Treatment, noise: &[f64]) -> Vec<f64> {
        match self {
            Scm::LinearGaussian(m) => {
                let l = t.level().expect("categorical");
                m.mixing
                    .iter()
                    .zip(&m.effects[l])
                    .zip(noise)
                    .map(|((row, b), u)| row.iter().zip(z).map(|(a, zi)| a * zi).sum::<f64>() + b + u)
                    .collect()
            }
            Scm::Nonlinear(m) => {
                let l = t.level().expect("categorical");
                let h: Vec<f64> = m
                    .w1
                    .iter()
                    .zip(&m.shifts[l])
                    .map(|(row, v)| (row.iter().zip(z).map(|(w, zi)| w * zi).sum::<f64>() + v).tanh())
                    .collect();
                m.w2
                    .iter()
                    .enumerate()
                    .map(|(j, row)| {
                        row.iter().zip(&h).map(|(w, hi)| w * hi).sum::<f64>() + m.b2[j] + m.effects[l][j] + noise[j]
                    })
                    .collect()
            }
            Scm::Blob(m) => {
                let (th, a) = self.blob_target(t).expect("treatment in space");
                let mut img = render_blob(m.resolution, (z[0], z[1]), z[2], th, a);
                for (p, u) in img.iter_mut().zip(noise) {
                    *p += u;
                }
                img
            }
            Scm::Discrete(d) => {
                let l = t.level().expect("categorical");
                let zi = z[0] as usize;
                vec![DiscreteScm::sample_categorical(&d.p_y_given_zt[zi][l], noise[0]) as f64]
            }
        }
    }

    pub fn sample(&self, rng: &mut impl Rng) -> FullSample {
        let x = self.sample_x(rng);
        let z = self.sample_z(&x, rng);
        let t = self.sample_t(&x, rng);
        let t_prime = self.sample_t(&x, rng);
        let noise = self.sample_outcome_noise(rng);
        let y = self.outcome(&z, &t, &noise);
        let y_prime = if t_prime == t {
            y.clone()
        } else {
            self.outcome(&z, &t_prime, &noise)
        };
        FullSample {
            x,
            t,
            t_prime,
            y,
            z_true: Some(z),
            y_prime_true: Some(y_prime),
        }
    }

    /// `E[Y'_{do(T'=α)}]`, optionally restricted to `X = c`. Closed form for
    /// linear-Gaussian and discrete SCMs, Monte Carlo otherwise.
    pub fn true_marginal(&self, alpha: &Treatment, filter: Option<&[usize]>) -> Result<Marginal, ScmError> {
        self.true_marginal_with(alpha, filter, MC_MARGINAL_DRAWS)
    }

    pub fn true_marginal_with(
        &self,
        alpha: &Treatment,
        filter: Option<&[usize]>,
        mc_draws: usize,
    ) -> Result<Marginal, ScmError> {
        if !self.treatment_space().contains(alpha) {
            return Err(ScmError::TreatmentOutOfSpace(alpha.clone()));
        }
        let space = self.covariate_space();
        if let Some(c) = filter {
            if !space.contains(c) {
                return Err(ScmError::CovariateOutOfSupport(c.to_vec()));
            }
        }
        let weights: Vec<(usize, f64)> = match filter {
            Some(c) => vec![(space.flat(c).expect("checked"), 1.0)],
            None => (0..space.strata())
                .map(|s| (s, self.covariate_prob(&space.unflat(s)).expect("in support")))
                .collect(),
        };
        match self {
            Scm::LinearGaussian(m) => {
                let l = alpha.level().expect("checked");
                let latent_dim = m.latent_means[0].len();
                let mut ez = vec![0.0; latent_dim];
                for &(s, w) in &weights {
                    for (e, mu) in ez.iter_mut().zip(&m.latent_means[s]) {
                        *e += w * mu;
                    }
                }
                let mean = m
                    .mixing
                    .iter()
                    .zip(&m.effects[l])
                    .map(|(row, b)| row.iter().zip(&ez).map(|(a, z)| a * z).sum::<f64>() + b)
                    .collect();
                Ok(Marginal { mean, std_error: None })
            }
            Scm::Discrete(d) => {
                let l = alpha.level().expect("checked");
                let mean = weights
                    .iter()
                    .map(|&(x, w)| w * (0..d.nz()).map(|z| d.p_z_given_x[x][z] * d.mean_y(z, l)).sum::<f64>())
                    .sum();
                Ok(Marginal {
                    mean: vec![mean],
                    std_error: None,
                })
            }
            Scm::Nonlinear(_) | Scm::Blob(_) => Ok(self.monte_carlo_marginal(alpha, filter, mc_draws)),
        }
    }

    fn monte_carlo_marginal(&self, alpha: &Treatment, filter: Option<&[usize]>, draws: usize) -> Marginal {
        let dim = self.outcome_dim();
        let mut mean = vec![0.0; dim];
        let mut m2 = vec![0.0; dim];
        // fixed stream far away from any dataset stream
        let mut rng = sample_rng(0x6d63_6d61_7267 ^ self.covariate_space().strata() as u64, u64::MAX);
        for k in 0..draws {
            let x = match filter {
                Some(c) => c.to_vec(),
                None => self.sample_x(&mut rng),
            };
            let z = self.sample_z(&x, &mut rng);
            let noise = self.sample_outcome_noise(&mut rng);
            let y = self.outcome(&z, alpha, &noise);
            let n = (k + 1) as f64;
            for j in 0..dim {
                let d = y[j] - mean[j];
                mean[j] += d / n;
                m2[j] += d * (y[j] - mean[j]);
            }
        }
        let n = draws as f64;
        let std_error = m2.iter().map(|v| (v / (n - 1.0).max(1.0) / n).sqrt()).collect();
        Marginal {
            mean,
            std_error: Some(std_error),
        }
    }

    /// Row sums of every conditional table of a discrete SCM, for checks.
    pub fn max_row_error(&self) -> Option<f64> {
        let Scm::Discrete(d) = self else { return None };
        let mut worst: f64 = (d.p_x.iter().sum::<f64>() - 1.0).abs();
        for row in d.p_z_given_x.iter().chain(&d.p_t_given_x) {
            worst = worst.max((row.iter().sum::<f64>() - 1.0).abs());
        }
        for per_t in &d.p_y_given_zt {
            for row in per_t {
                worst = worst.max((row.iter().sum::<f64>() - 1.0).abs());
            }
        }
        Some(worst)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scm::generate_dataset;

    #[test]
    fn degenerate_linear_gaussian_is_deterministic_in_x() {
        let spec = ScmSpec::LinearGaussian(LinearGaussianSpec {
            covariate_cards: vec![2],
            treatment_levels: 2,
            latent_dim: 2,
            outcome_dim: 2,
            latent_noise: 0.0,
            outcome_noise: 0.0,
            latent_means: Some(vec![vec![1.0, -1.0], vec![0.5, 2.0]]),
            mixing: Some(vec![vec![1.0, 0.0], vec![0.0, 1.0]]),
            treatment_effects: Some(vec![vec![0.0, 0.0], vec![0.0, 0.0]]),
            ..Default::default()
        });
        let data = generate_dataset(&spec, 50, 1).unwrap();
        for s in &data {
            assert_eq!(&s.y, s.z_true.as_ref().unwrap());
            let expected = if s.x[0] == 0 { vec![1.0, -1.0] } else { vec![0.5, 2.0] };
            assert_eq!(s.y, expected);
        }
    }

    #[test]
    fn linear_gaussian_marginal_closed_form() {
        let spec = ScmSpec::LinearGaussian(LinearGaussianSpec {
            covariate_cards: vec![2],
            covariate_probs: Some(vec![vec![0.25, 0.75]]),
            treatment_levels: 2,
            latent_dim: 2,
            outcome_dim: 1,
            latent_means: Some(vec![vec![1.0, 0.0], vec![0.0, 2.0]]),
            mixing: Some(vec![vec![2.0, 3.0]]),
            treatment_effects: Some(vec![vec![0.0], vec![5.0]]),
            ..Default::default()
        });
        let scm = spec.build().unwrap();
        // E[Z] = (0.25, 1.5); A E[Z] = 0.5 + 4.5 = 5.0; + B_1 = 10.0
        let m = scm.true_marginal(&Treatment::Level(1), None).unwrap();
        assert!((m.mean[0] - 10.0).abs() < 1e-12);
        let c = scm.true_marginal(&Treatment::Level(1), Some(&[0])).unwrap();
        assert!((c.mean[0] - 7.0).abs() < 1e-12);
        assert!(scm.true_marginal(&Treatment::Level(2), None).is_err());
        assert!(scm.true_marginal(&Treatment::Level(0), Some(&[2])).is_err());
    }

    #[test]
    fn consistency_holds_for_every_family() {
        let specs = vec![
            ScmSpec::LinearGaussian(LinearGaussianSpec::default()),
            ScmSpec::NonlinearVector(NonlinearVectorSpec::default()),
            ScmSpec::BlobImage(BlobImageSpec::default()),
            ScmSpec::Discrete(DiscreteSpec {
                tables: None,
                sizes: Some([3, 3, 2, 4]),
                seed: 4,
            }),
        ];
        for spec in specs {
            let data = generate_dataset(&spec, 300, 9).unwrap();
            let mut equal = 0;
            for s in &data {
                if s.t == s.t_prime {
                    equal += 1;
                    assert_eq!(Some(&s.y), s.y_prime_true.as_ref(), "{}", spec.family());
                }
            }
            assert!(equal > 0, "{}", spec.family());
        }
    }

    #[test]
    fn invalid_specs_name_the_field() {
        let bad = ScmSpec::LinearGaussian(LinearGaussianSpec {
            latent_noise: -1.0,
            ..Default::default()
        });
        let msg = bad.build().unwrap_err().to_string();
        assert!(msg.contains("latent_noise"), "{msg}");
        let bad = ScmSpec::LinearGaussian(LinearGaussianSpec {
            covariate_cards: vec![0],
            ..Default::default()
        });
        assert!(bad.build().unwrap_err().to_string().contains("covariate_cards"));
        assert!(generate_dataset(&ScmSpec::LinearGaussian(LinearGaussianSpec::default()), 0, 1).is_err());
    }

    #[test]
    fn blob_counterfactual_rerenders_with_same_jitter() {
        let spec = ScmSpec::BlobImage(BlobImageSpec::default());
        let scm = spec.build().unwrap();
        let data = generate_dataset(&spec, 20, 3).unwrap();
        for s in data {
            let z = s.z_true.unwrap();
            let expected = scm.outcome(&z, &s.t_prime, &[]);
            assert_eq!(s.y_prime_true.unwrap(), expected);
        }
    }

    #[test]
    fn spec_json_round_trip() {
        let spec = ScmSpec::BlobImage(BlobImageSpec::default());
        let json = serde_json::to_string(&spec).unwrap();
        assert!(json.contains("\"family\":\"blob_image\""));
        let back: ScmSpec = serde_json::from_str(&json).unwrap();
        assert_eq!(back, spec);
    }
}
