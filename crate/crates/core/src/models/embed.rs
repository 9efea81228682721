use rand::Rng;
use serde::{Deserialize, Serialize};

use super::ModelError;
use crate::scm::{CovariateSpace, Treatment, TreatmentSpace};
use crate::tensor::{Graph, Linear, Module, Real, Tensor, Var};

/// Learned table for categorical treatments; sinusoidal features followed by
/// a linear map for continuous ones.
#[derive(Clone, Debug, PartialEq)]
pub enum TreatmentEmbedding<R> {
    Table {
        table: Tensor<R>,
    },
    Sinusoidal {
        ranges: Vec<[f64; 2]>,
        freqs: usize,
        proj: Linear<R>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingDims {
    pub treatment: usize,
    pub covariate: usize,
    /// Sinusoid octaves per continuous treatment coordinate.
    pub freqs: usize,
}

impl Default for EmbeddingDims {
    fn default() -> Self {
        Self {
            treatment: 8,
            covariate: 4,
            freqs: 4,
        }
    }
}

fn uniform_table<R: Real>(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor<R> {
    let data = (0..rows * cols).map(|_| R::of(rng.gen_range(-1.0..1.0))).collect();
    Tensor::matrix(rows, cols, data).expect("positive dims")
}

/// `[u, sin(2^k π u), cos(2^k π u)]` per coordinate, `u` the position inside
/// its range.
pub fn sinusoidal_features(ranges: &[[f64; 2]], freqs: usize, t: &[Treatment]) -> Result<Vec<f64>, ModelError> {
    let width = ranges.len() * (1 + 2 * freqs);
    let mut out = Vec::with_capacity(t.len() * width);
    for tv in t {
        let Treatment::Point(p) = tv else {
            return Err(ModelError::Treatment(tv.clone()));
        };
        if p.len() != ranges.len() {
            return Err(ModelError::Treatment(tv.clone()));
        }
        for (v, r) in p.iter().zip(ranges) {
            let span = r[1] - r[0];
            let u = if span > 0.0 { (v - r[0]) / span } else { 0.0 };
            out.push(u);
            for k in 0..freqs {
                let a = std::f64::consts::PI * (1u64 << k) as f64 * u;
                out.push(a.sin());
                out.push(a.cos());
            }
        }
    }
    Ok(out)
}

impl<R: Real> TreatmentEmbedding<R> {
    pub fn new(space: &TreatmentSpace, dims: &EmbeddingDims, rng: &mut impl Rng) -> Self {
        match space {
            TreatmentSpace::Categorical { levels } => TreatmentEmbedding::Table {
                table: uniform_table(*levels, dims.treatment, rng),
            },
            TreatmentSpace::Continuous { ranges } => TreatmentEmbedding::Sinusoidal {
                ranges: ranges.clone(),
                freqs: dims.freqs,
                proj: Linear::init(ranges.len() * (1 + 2 * dims.freqs), dims.treatment, rng),
            },
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            TreatmentEmbedding::Table { table } => table.cols(),
            TreatmentEmbedding::Sinusoidal { proj, .. } => proj.out_dim(),
        }
    }

    pub fn bind(&self, g: &mut Graph<R>, trainable: bool) -> Result<TreatmentVars, ModelError> {
        let mut put = |t: &Tensor<R>| if trainable { g.param(t) } else { g.constant(t.clone()) };
        Ok(match self {
            TreatmentEmbedding::Table { table } => TreatmentVars::Table(put(table)?),
            TreatmentEmbedding::Sinusoidal { ranges, freqs, proj } => TreatmentVars::Sinusoidal {
                ranges: ranges.clone(),
                freqs: *freqs,
                weight: put(&proj.weight)?,
                bias: put(&proj.bias)?,
            },
        })
    }
}

impl<R: Real> Module<R> for TreatmentEmbedding<R> {
    fn named_parameters(&self) -> Vec<(String, &Tensor<R>)> {
        match self {
            TreatmentEmbedding::Table { table } => vec![("table".into(), table)],
            TreatmentEmbedding::Sinusoidal { proj, .. } => {
                vec![("proj.weight".into(), &proj.weight), ("proj.bias".into(), &proj.bias)]
            }
        }
    }

    fn parameters_mut(&mut self) -> Vec<&mut Tensor<R>> {
        match self {
            TreatmentEmbedding::Table { table } => vec![table],
            TreatmentEmbedding::Sinusoidal { proj, .. } => vec![&mut proj.weight, &mut proj.bias],
        }
    }
}

#[derive(Clone, Debug)]
pub enum TreatmentVars {
    Table(Var),
    Sinusoidal {
        ranges: Vec<[f64; 2]>,
        freqs: usize,
        weight: Var,
        bias: Var,
    },
}

impl TreatmentVars {
    pub fn vars(&self) -> Vec<Var> {
        match self {
            TreatmentVars::Table(v) => vec![*v],
            TreatmentVars::Sinusoidal { weight, bias, .. } => vec![*weight, *bias],
        }
    }

    pub fn embed<R: Real>(&self, g: &mut Graph<R>, t: &[Treatment]) -> Result<Var, ModelError> {
        match self {
            TreatmentVars::Table(table) => {
                let idx = t
                    .iter()
                    .map(|tv| tv.level().ok_or_else(|| ModelError::Treatment(tv.clone())))
                    .collect::<Result<Vec<_>, _>>()?;
                Ok(g.gather(*table, &idx)?)
            }
            TreatmentVars::Sinusoidal {
                ranges,
                freqs,
                weight,
                bias,
            } => {
                let feats = sinusoidal_features(ranges, *freqs, t)?;
                let width = feats.len() / t.len().max(1);
                let f = g.constant(Tensor::matrix(t.len(), width, feats.into_iter().map(R::of).collect())?)?;
                let h = g.matmul(f, *weight)?;
                Ok(g.add_row(h, *bias)?)
            }
        }
    }
}

/// One learned table per covariate; the embeddings are concatenated.
#[derive(Clone, Debug, PartialEq)]
pub struct CovariateEmbedding<R> {
    pub tables: Vec<Tensor<R>>,
}

impl<R: Real> CovariateEmbedding<R> {
    pub fn new(space: &CovariateSpace, dim: usize, rng: &mut impl Rng) -> Self {
        Self {
            tables: space.cards.iter().map(|&c| uniform_table(c, dim, rng)).collect(),
        }
    }

    pub fn dim(&self) -> usize {
        self.tables.iter().map(|t| t.cols()).sum()
    }

    pub fn bind(&self, g: &mut Graph<R>, trainable: bool) -> Result<CovariateVars, ModelError> {
        let tables = self
            .tables
            .iter()
            .map(|t| if trainable { g.param(t) } else { g.constant(t.clone()) })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(CovariateVars { tables })
    }
}

impl<R: Real> Module<R> for CovariateEmbedding<R> {
    fn named_parameters(&self) -> Vec<(String, &Tensor<R>)> {
        self.tables.iter().enumerate().map(|(i, t)| (format!("table{i}"), t)).collect()
    }

    fn parameters_mut(&mut self) -> Vec<&mut Tensor<R>> {
        self.tables.iter_mut().collect()
    }
}

#[derive(Clone, Debug)]
pub struct CovariateVars {
    tables: Vec<Var>,
}

impl CovariateVars {
    pub fn vars(&self) -> Vec<Var> {
        self.tables.clone()
    }

    pub fn embed<R: Real>(&self, g: &mut Graph<R>, x: &[Vec<usize>]) -> Result<Var, ModelError> {
        let mut parts = Vec::with_capacity(self.tables.len());
        for (i, &table) in self.tables.iter().enumerate() {
            let idx = x
                .iter()
                .map(|xv| xv.get(i).copied().ok_or_else(|| ModelError::Covariate(xv.clone())))
                .collect::<Result<Vec<_>, _>>()?;
            parts.push(g.gather(table, &idx)?);
        }
        if x.iter().any(|xv| xv.len() != self.tables.len()) {
            return Err(ModelError::Covariate(
                x.iter().find(|xv| xv.len() != self.tables.len()).cloned().unwrap_or_default(),
            ));
        }
        Ok(if parts.len() == 1 { parts[0] } else { g.concat_cols(&parts)? })
    }
}

/// Prefixes parameter names of a sub-module.
pub(crate) fn prefixed<'a, R: Real>(prefix: &str, m: &'a impl Module<R>) -> Vec<(String, &'a Tensor<R>)> {
    m.named_parameters()
        .into_iter()
        .map(|(n, t)| (format!("{prefix}.{n}"), t))
        .collect()
}
