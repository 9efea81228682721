//! Encoder `q_φ`, decoder `p_θ`, discriminator, empirical outcome model and
//! propensity model.

mod embed;
mod empirical;
mod likelihood;
mod propensity;

pub use embed::{sinusoidal_features, CovariateEmbedding, EmbeddingDims, TreatmentEmbedding, TreatmentVars};
pub use empirical::{EmpiricalOutcomeModel, OutcomeStratum, VARIANCE_FLOOR};
pub use likelihood::{discriminator_losses, gaussian_log_lik, taped_discriminator_losses, LOG_2PI, PROB_CLAMP};
pub use propensity::{PropensityModel, DEFAULT_EPS_POS};

use embed::{prefixed, CovariateVars};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scm::{CovariateSpace, Treatment, TreatmentSpace};
use crate::tensor::{Activation, CheckpointError, Graph, Mlp, MlpVars, Module, Real, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("treatment {0:?} does not fit the model's treatment space")]
    Treatment(Treatment),
    #[error("covariate value {0:?} does not fit the model's covariate space")]
    Covariate(Vec<usize>),
    #[error("no observations for stratum x={x:?}, t={t}")]
    MissingStratum { x: Vec<usize>, t: usize },
    #[error("empty dataset")]
    EmptyDataset,
    #[error("{0}")]
    Config(String),
    #[error("propensity {value} for x={x:?}, t={t} is not positive")]
    NonPositivePropensity { x: Vec<usize>, t: usize, value: f64 },
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

/// Decoder noise model.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum DecoderNoise {
    Fixed { sigma: f64 },
    /// Per-dimension log σ, clamped to `[min_log_sigma, max_log_sigma]`.
    Learned { min_log_sigma: f64, max_log_sigma: f64 },
}

impl Default for DecoderNoise {
    fn default() -> Self {
        DecoderNoise::Fixed { sigma: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub outcome_dim: usize,
    pub latent_dim: usize,
    pub treatment: TreatmentSpace,
    pub covariates: CovariateSpace,
    pub encoder_hidden: Vec<usize>,
    pub decoder_hidden: Vec<usize>,
    pub discriminator_hidden: Vec<usize>,
    #[serde(default)]
    pub embedding: EmbeddingDims,
    #[serde(default)]
    pub noise: DecoderNoise,
    /// Build a discriminator (adversarial counterfactual supervision).
    #[serde(default)]
    pub discriminator: bool,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.outcome_dim == 0 || self.latent_dim == 0 {
            return Err(ModelError::Config("outcome_dim and latent_dim must be ≥ 1".into()));
        }
        if self.embedding.treatment == 0 || self.embedding.covariate == 0 {
            return Err(ModelError::Config("embedding widths must be ≥ 1".into()));
        }
        let hidden = self
            .encoder_hidden
            .iter()
            .chain(&self.decoder_hidden)
            .chain(&self.discriminator_hidden);
        if hidden.into_iter().any(|&h| h == 0) {
            return Err(ModelError::Config("hidden widths must be ≥ 1".into()));
        }
        if let DecoderNoise::Fixed { sigma } = self.noise {
            if !(sigma > 0.0 && sigma.is_finite()) {
                return Err(ModelError::Config("decoder sigma must be positive".into()));
            }
        }
        if let DecoderNoise::Learned {
            min_log_sigma,
            max_log_sigma,
        } = self.noise
        {
            if !(min_log_sigma < max_log_sigma) {
                return Err(ModelError::Config("min_log_sigma must be below max_log_sigma".into()));
            }
        }
        Ok(())
    }
}

fn dims(input: usize, hidden: &[usize], output: usize) -> Vec<usize> {
    let mut d = vec![input];
    d.extend_from_slice(hidden);
    d.push(output);
    d
}

/// `q_φ(z | y, t, x) = N(μ_φ(y, t, x), I)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder<R> {
    pub mlp: Mlp<R>,
    pub t_embed: TreatmentEmbedding<R>,
    pub x_embed: CovariateEmbedding<R>,
}

/// `p_θ(y | z, t) = N(g_θ(z, t), diag σ²)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Decoder<R> {
    pub mlp: Mlp<R>,
    pub t_embed: TreatmentEmbedding<R>,
    pub log_sigma: Option<Tensor<R>>,
}

/// Logit of `D(x, t, y)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Discriminator<R> {
    pub mlp: Mlp<R>,
    pub t_embed: TreatmentEmbedding<R>,
    pub x_embed: CovariateEmbedding<R>,
}

impl<R: Real> Encoder<R> {
    pub fn new(cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let t_embed = TreatmentEmbedding::new(&cfg.treatment, &cfg.embedding, rng);
        let x_embed = CovariateEmbedding::new(&cfg.covariates, cfg.embedding.covariate, rng);
        let input = cfg.outcome_dim + t_embed.dim() + x_embed.dim();
        let mlp = Mlp::new(
            &dims(input, &cfg.encoder_hidden, cfg.latent_dim),
            Activation::Relu,
            Activation::Identity,
            rng,
        );
        Self { mlp, t_embed, x_embed }
    }

    pub fn bind(&self, g: &mut Graph<R>, trainable: bool) -> Result<EncoderVars, ModelError> {
        Ok(EncoderVars {
            mlp: self.mlp.bind(g, trainable)?,
            t: self.t_embed.bind(g, trainable)?,
            x: self.x_embed.bind(g, trainable)?,
        })
    }
}

impl<R: Real> Decoder<R> {
    pub fn new(cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let t_embed = TreatmentEmbedding::new(&cfg.treatment, &cfg.embedding, rng);
        let mlp = Mlp::new(
            &dims(cfg.latent_dim + t_embed.dim(), &cfg.decoder_hidden, cfg.outcome_dim),
            Activation::Relu,
            Activation::Identity,
            rng,
        );
        let log_sigma = match cfg.noise {
            DecoderNoise::Fixed { .. } => None,
            DecoderNoise::Learned { .. } => Some(Tensor::zeros(&[cfg.outcome_dim])),
        };
        Self {
            mlp,
            t_embed,
            log_sigma,
        }
    }

    pub fn bind(&self, g: &mut Graph<R>, trainable: bool, noise: DecoderNoise) -> Result<DecoderVars, ModelError> {
        let log_sigma = match (&self.log_sigma, noise) {
            (Some(ls), DecoderNoise::Learned { .. }) => {
                let v = if trainable { g.param(ls)? } else { g.constant(ls.clone())? };
                Some(v)
            }
            _ => None,
        };
        Ok(DecoderVars {
            mlp: self.mlp.bind(g, trainable)?,
            t: self.t_embed.bind(g, trainable)?,
            log_sigma,
            noise,
        })
    }
}

impl<R: Real> Discriminator<R> {
    pub fn new(cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let t_embed = TreatmentEmbedding::new(&cfg.treatment, &cfg.embedding, rng);
        let x_embed = CovariateEmbedding::new(&cfg.covariates, cfg.embedding.covariate, rng);
        let input = cfg.outcome_dim + t_embed.dim() + x_embed.dim();
        let mlp = Mlp::new(
            &dims(input, &cfg.discriminator_hidden, 1),
            Activation::LeakyRelu { slope: 0.2 },
            Activation::Identity,
            rng,
        );
        Self { mlp, t_embed, x_embed }
    }

    pub fn bind(&self, g: &mut Graph<R>, trainable: bool) -> Result<DiscriminatorVars, ModelError> {
        Ok(DiscriminatorVars {
            mlp: self.mlp.bind(g, trainable)?,
            t: self.t_embed.bind(g, trainable)?,
            x: self.x_embed.bind(g, trainable)?,
        })
    }
}

impl<R: Real> Module<R> for Encoder<R> {
    fn named_parameters(&self) -> Vec<(String, &Tensor<R>)> {
        let mut v = prefixed("mlp", &self.mlp);
        v.extend(prefixed("t_embed", &self.t_embed));
        v.extend(prefixed("x_embed", &self.x_embed));
        v
    }

    fn parameters_mut(&mut self) -> Vec<&mut Tensor<R>> {
        let mut v = self.mlp.parameters_mut();
        v.extend(self.t_embed.parameters_mut());
        v.extend(self.x_embed.parameters_mut());
        v
    }
}

impl<R: Real> Module<R> for Decoder<R> {
    fn named_parameters(&self) -> Vec<(String, &Tensor<R>)> {
        let mut v = prefixed("mlp", &self.mlp);
        v.extend(prefixed("t_embed", &self.t_embed));
        if let Some(ls) = &self.log_sigma {
            v.push(("log_sigma".into(), ls));
        }
        v
    }

    fn parameters_mut(&mut self) -> Vec<&mut Tensor<R>> {
        let mut v = self.mlp.parameters_mut();
        v.extend(self.t_embed.parameters_mut());
        if let Some(ls) = &mut self.log_sigma {
            v.push(ls);
        }
        v
    }
}

impl<R: Real> Module<R> for Discriminator<R> {
    fn named_parameters(&self) -> Vec<(String, &Tensor<R>)> {
        let mut v = prefixed("mlp", &self.mlp);
        v.extend(prefixed("t_embed", &self.t_embed));
        v.extend(prefixed("x_embed", &self.x_embed));
        v
    }

    fn parameters_mut(&mut self) -> Vec<&mut Tensor<R>> {
        let mut v = self.mlp.parameters_mut();
        v.extend(self.t_embed.parameters_mut());
        v.extend(self.x_embed.parameters_mut());
        v
    }
}

#[derive(Clone, Debug)]
pub struct EncoderVars {
    pub mlp: MlpVars,
    pub t: TreatmentVars,
    x: CovariateVars,
}

impl EncoderVars {
    /// Handles in `Module::parameters_mut` order.
    pub fn vars(&self) -> Vec<Var> {
        let mut v = self.mlp.vars();
        v.extend(self.t.vars());
        v.extend(self.x.vars());
        v
    }

    /// Latent mean `[n, latent]`.
    pub fn mean<R: Real>(&self, g: &mut Graph<R>, y: Var, t: &[Treatment], x: &[Vec<usize>]) -> Result<Var, ModelError> {
        let te = self.t.embed(g, t)?;
        let xe = self.x.embed(g, x)?;
        let input = g.concat_cols(&[y, te, xe])?;
        Ok(self.mlp.forward(g, input)?)
    }
}

#[derive(Clone, Debug)]
pub struct DecoderVars {
    pub mlp: MlpVars,
    pub t: TreatmentVars,
    pub log_sigma: Option<Var>,
    pub noise: DecoderNoise,
}

impl DecoderVars {
    /// Handles in `Module::parameters_mut` order.
    pub fn vars(&self) -> Vec<Var> {
        let mut v = self.mlp.vars();
        v.extend(self.t.vars());
        v.extend(self.log_sigma);
        v
    }

    /// Outcome mean `[n, outcome]`.
    pub fn mean<R: Real>(&self, g: &mut Graph<R>, z: Var, t: &[Treatment]) -> Result<Var, ModelError> {
        let te = self.t.embed(g, t)?;
        let input = g.concat_cols(&[z, te])?;
        Ok(self.mlp.forward(g, input)?)
    }

    /// Batch mean of `Σ_d log N(y_d; mean_d, σ_d²)`.
    pub fn log_lik<R: Real>(&self, g: &mut Graph<R>, mean: Var, y: Var) -> Result<Var, ModelError> {
        let (n, d) = {
            let v = g.value(y);
            (v.rows(), v.cols())
        };
        let diff = g.sub(y, mean)?;
        let sq = g.square(diff)?;
        match (self.noise, self.log_sigma) {
            (
                DecoderNoise::Learned {
                    min_log_sigma,
                    max_log_sigma,
                },
                Some(ls),
            ) => {
                let ls = g.clamp(ls, R::of(min_log_sigma), R::of(max_log_sigma))?;
                let m2 = g.scale(ls, R::of(-2.0))?;
                let inv_var = g.exp(m2)?;
                let weighted = g.mul_row(sq, inv_var)?;
                let quad = g.sum_all(weighted)?;
                let quad = g.scale(quad, R::of(-0.5 / n as f64))?;
                let ls_sum = g.sum_all(ls)?;
                let ls_term = g.scale(ls_sum, R::of(-1.0))?;
                let total = g.add(quad, ls_term)?;
                Ok(g.offset(total, R::of(-0.5 * LOG_2PI * d as f64))?)
            }
            (DecoderNoise::Fixed { sigma }, _) => {
                let quad = g.sum_all(sq)?;
                let quad = g.scale(quad, R::of(-0.5 / (sigma * sigma * n as f64)))?;
                Ok(g.offset(quad, R::of(-(d as f64) * (0.5 * LOG_2PI + sigma.ln())))?)
            }
            (DecoderNoise::Learned { .. }, None) => Err(ModelError::Config("learned noise without log_sigma".into())),
        }
    }
}

#[derive(Clone, Debug)]
pub struct DiscriminatorVars {
    pub mlp: MlpVars,
    pub t: TreatmentVars,
    x: CovariateVars,
}

impl DiscriminatorVars {
    /// Handles in `Module::parameters_mut` order.
    pub fn vars(&self) -> Vec<Var> {
        let mut v = self.mlp.vars();
        v.extend(self.t.vars());
        v.extend(self.x.vars());
        v
    }

    /// Logits `[n, 1]`.
    pub fn logit<R: Real>(&self, g: &mut Graph<R>, x: &[Vec<usize>], t: &[Treatment], y: Var) -> Result<Var, ModelError> {
        let te = self.t.embed(g, t)?;
        let xe = self.x.embed(g, x)?;
        let input = g.concat_cols(&[y, te, xe])?;
        Ok(self.mlp.forward(g, input)?)
    }
}

/// All estimating models of one run.
#[derive(Clone, Debug, PartialEq)]
pub struct VciModel<R> {
    pub config: ModelConfig,
    pub encoder: Encoder<R>,
    pub decoder: Decoder<R>,
    pub discriminator: Option<Discriminator<R>>,
}

impl<R: Real> VciModel<R> {
    pub fn new(config: ModelConfig, rng: &mut impl Rng) -> Result<Self, ModelError> {
        config.validate()?;
        let encoder = Encoder::new(&config, rng);
        let decoder = Decoder::new(&config, rng);
        let discriminator = config.discriminator.then(|| Discriminator::new(&config, rng));
        Ok(Self {
            config,
            encoder,
            decoder,
            discriminator,
        })
    }

    /// Encoder and decoder parameters (the generator side), in optimizer order.
    pub fn generator_parameters_mut(&mut self) -> Vec<&mut Tensor<R>> {
        let mut v = self.encoder.parameters_mut();
        v.extend(self.decoder.parameters_mut());
        v
    }

    pub fn generator_parameters(&self) -> Vec<&Tensor<R>> {
        let mut v = self.encoder.parameters();
        v.extend(self.decoder.parameters());
        v
    }

    pub fn check_inputs(&self, t: &[Treatment], x: &[Vec<usize>]) -> Result<(), ModelError> {
        if let Some(bad) = t.iter().find(|tv| !self.config.treatment.contains(tv)) {
            return Err(ModelError::Treatment(bad.clone()));
        }
        if let Some(bad) = x.iter().find(|xv| !self.config.covariates.contains(xv)) {
            return Err(ModelError::Covariate(bad.clone()));
        }
        Ok(())
    }

    fn rows_tensor(&self, rows: &[Vec<f64>], width: usize) -> Result<Tensor<R>, ModelError> {
        if rows.iter().any(|r| r.len() != width) {
            return Err(TensorError::ShapeMismatch {
                op: "batch",
                lhs: vec![width],
                rhs: rows.iter().map(Vec::len).find(|&l| l != width).into_iter().collect(),
            }
            .into());
        }
        Ok(Tensor::from_rows(rows)?)
    }

    /// Untaped latent means for a batch.
    pub fn encode_mean(&self, y: &[Vec<f64>], t: &[Treatment], x: &[Vec<usize>]) -> Result<Vec<Vec<f64>>, ModelError> {
        self.check_inputs(t, x)?;
        let mut g = Graph::new();
        let enc = self.encoder.bind(&mut g, false)?;
        let yv = g.constant(self.rows_tensor(y, self.config.outcome_dim)?)?;
        let mu = enc.mean(&mut g, yv, t, x)?;
        Ok(g.value(mu).to_f64_rows())
    }

    /// Untaped decoder means for a batch of latents.
    pub fn decode_mean(&self, z: &[Vec<f64>], t: &[Treatment]) -> Result<Vec<Vec<f64>>, ModelError> {
        if let Some(bad) = t.iter().find(|tv| !self.config.treatment.contains(tv)) {
            return Err(ModelError::Treatment(bad.clone()));
        }
        let mut g = Graph::new();
        let dec = self.decoder.bind(&mut g, false, self.config.noise)?;
        let zv = g.constant(self.rows_tensor(z, self.config.latent_dim)?)?;
        let m = dec.mean(&mut g, zv, t)?;
        Ok(g.value(m).to_f64_rows())
    }

    /// Decoder log σ per dimension (zeros in fixed mode with σ = 1).
    pub fn log_sigma(&self) -> Vec<f64> {
        match (&self.decoder.log_sigma, self.config.noise) {
            (
                Some(ls),
                DecoderNoise::Learned {
                    min_log_sigma,
                    max_log_sigma,
                },
            ) => ls
                .data()
                .iter()
                .map(|v| v.f64().clamp(min_log_sigma, max_log_sigma))
                .collect(),
            (_, DecoderNoise::Fixed { sigma }) => vec![sigma.ln(); self.config.outcome_dim],
            _ => vec![0.0; self.config.outcome_dim],
        }
    }

    /// `y'_{θ,φ} = g_θ(μ_φ(y, t, x), t')`: the counterfactual under the
    /// deterministic latent mean.
    pub fn counterfactual(
        &self,
        y: &[Vec<f64>],
        t: &[Treatment],
        x: &[Vec<usize>],
        t_prime: &[Treatment],
    ) -> Result<Vec<Vec<f64>>, ModelError> {
        let z = self.encode_mean(y, t, x)?;
        self.decode_mean(&z, t_prime)
    }

    pub fn cast<S: Real>(&self) -> VciModel<S> {
        let mut out = VciModel::<S> {
            config: self.config.clone(),
            encoder: cast_encoder(&self.encoder),
            decoder: Decoder {
                mlp: cast_mlp(&self.decoder.mlp),
                t_embed: cast_t(&self.decoder.t_embed),
                log_sigma: self.decoder.log_sigma.as_ref().map(|t| t.cast()),
            },
            discriminator: self.discriminator.as_ref().map(|d| Discriminator {
                mlp: cast_mlp(&d.mlp),
                t_embed: cast_t(&d.t_embed),
                x_embed: CovariateEmbedding {
                    tables: d.x_embed.tables.iter().map(|t| t.cast()).collect(),
                },
            }),
        };
        out.config = self.config.clone();
        out
    }
}

fn cast_mlp<R: Real, S: Real>(m: &Mlp<R>) -> Mlp<S> {
    Mlp {
        layers: m
            .layers
            .iter()
            .map(|l| crate::tensor::Linear {
                weight: l.weight.cast(),
                bias: l.bias.cast(),
            })
            .collect(),
        activations: m.activations.clone(),
    }
}

fn cast_t<R: Real, S: Real>(t: &TreatmentEmbedding<R>) -> TreatmentEmbedding<S> {
    match t {
        TreatmentEmbedding::Table { table } => TreatmentEmbedding::Table { table: table.cast() },
        TreatmentEmbedding::Sinusoidal { ranges, freqs, proj } => TreatmentEmbedding::Sinusoidal {
            ranges: ranges.clone(),
            freqs: *freqs,
            proj: crate::tensor::Linear {
                weight: proj.weight.cast(),
                bias: proj.bias.cast(),
            },
        },
    }
}

pub fn cast_encoder<R: Real, S: Real>(e: &Encoder<R>) -> Encoder<S> {
    Encoder {
        mlp: cast_mlp(&e.mlp),
        t_embed: cast_t(&e.t_embed),
        x_embed: CovariateEmbedding {
            tables: e.x_embed.tables.iter().map(|t| t.cast()).collect(),
        },
    }
}

impl<R: Real> Module<R> for VciModel<R> {
    fn named_parameters(&self) -> Vec<(String, &Tensor<R>)> {
        let mut v = prefixed("encoder", &self.encoder);
        v.extend(prefixed("decoder", &self.decoder));
        if let Some(d) = &self.discriminator {
            v.extend(prefixed("discriminator", d));
        }
        v
    }

    fn parameters_mut(&mut self) -> Vec<&mut Tensor<R>> {
        let mut v = self.encoder.parameters_mut();
        v.extend(self.decoder.parameters_mut());
        if let Some(d) = &mut self.discriminator {
            v.extend(d.parameters_mut());
        }
        v
    }
}
