use serde::{Deserialize, Serialize};

use super::likelihood::LOG_2PI;
use super::ModelError;
use crate::scm::{CovariateSpace, Treatment};
use crate::tensor::{Graph, Real, Tensor, Var};

pub const VARIANCE_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutcomeStratum {
    pub count: usize,
    pub mean: Vec<f64>,
    /// Per-dimension population variance, floored at [`VARIANCE_FLOOR`].
    pub var: Vec<f64>,
}

/// Smoothed empirical `p̂(y | x, t)`: per `(x, t)` stratum a diagonal
/// Gaussian with the stratum mean and variance `var + h²` (Gaussian kernel of
/// bandwidth `h` in outcome space).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalOutcomeModel {
    pub covariates: CovariateSpace,
    pub levels: usize,
    pub bandwidth: f64,
    /// Indexed by `flat(x) * levels + t`.
    pub strata: Vec<Option<OutcomeStratum>>,
}

impl EmpiricalOutcomeModel {
    /// Fits from `(x, t, y)` triplets. `bandwidth = None` uses 0.1 × the
    /// pooled within-stratum standard deviation.
    pub fn fit<'a>(
        covariates: &CovariateSpace,
        levels: usize,
        data: impl IntoIterator<Item = (&'a [usize], &'a Treatment, &'a [f64])>,
        bandwidth: Option<f64>,
    ) -> Result<Self, ModelError> {
        let cells = covariates.strata() * levels;
        let mut sums: Vec<Option<(usize, Vec<f64>, Vec<f64>)>> = vec![None; cells];
        let mut dim = None;
        for (x, t, y) in data {
            let l = t.level().filter(|&l| l < levels).ok_or_else(|| ModelError::Treatment(t.clone()))?;
            let s = covariates.flat(x).ok_or_else(|| ModelError::Covariate(x.to_vec()))?;
            if *dim.get_or_insert(y.len()) != y.len() {
                return Err(ModelError::Config("outcomes have inconsistent dimensions".into()));
            }
            let cell = sums[s * levels + l].get_or_insert_with(|| (0, vec![0.0; y.len()], vec![0.0; y.len()]));
            // Welford per dimension
            cell.0 += 1;
            let n = cell.0 as f64;
            for ((m, m2), &v) in cell.1.iter_mut().zip(cell.2.iter_mut()).zip(y) {
                let d = v - *m;
                *m += d / n;
                *m2 += d * (v - *m);
            }
        }
        let Some(dim) = dim else {
            return Err(ModelError::EmptyDataset);
        };
        let strata: Vec<Option<OutcomeStratum>> = sums
            .into_iter()
            .map(|c| {
                c.map(|(count, mean, m2)| OutcomeStratum {
                    count,
                    var: m2.iter().map(|v| (v / count as f64).max(VARIANCE_FLOOR)).collect(),
                    mean,
                })
            })
            .collect();
        let bandwidth = match bandwidth {
            Some(h) if h >= 0.0 && h.is_finite() => h,
            Some(h) => return Err(ModelError::Config(format!("bandwidth {h} must be finite and ≥ 0"))),
            None => {
                let (mut num, mut total) = (0.0, 0usize);
                for s in strata.iter().flatten() {
                    num += s.count as f64 * s.var.iter().sum::<f64>();
                    total += s.count;
                }
                0.1 * (num / (total * dim) as f64).sqrt()
            }
        };
        Ok(Self {
            covariates: covariates.clone(),
            levels,
            bandwidth,
            strata,
        })
    }

    pub fn stratum(&self, x: &[usize], t: &Treatment) -> Result<&OutcomeStratum, ModelError> {
        let l = t.level().filter(|&l| l < self.levels).ok_or_else(|| ModelError::Treatment(t.clone()))?;
        let s = self.covariates.flat(x).ok_or_else(|| ModelError::Covariate(x.to_vec()))?;
        self.strata[s * self.levels + l]
            .as_ref()
            .ok_or_else(|| ModelError::MissingStratum { x: x.to_vec(), t: l })
    }

    pub fn has_stratum(&self, x: &[usize], t: &Treatment) -> bool {
        self.stratum(x, t).is_ok()
    }

    /// `log p̂(y | x, t)`.
    pub fn log_lik(&self, y: &[f64], x: &[usize], t: &Treatment) -> Result<f64, ModelError> {
        let s = self.stratum(x, t)?;
        if y.len() != s.mean.len() {
            return Err(ModelError::Config("outcome dimension mismatch".into()));
        }
        let h2 = self.bandwidth * self.bandwidth;
        Ok(y.iter()
            .zip(&s.mean)
            .zip(&s.var)
            .map(|((v, m), var)| {
                let s2 = var + h2;
                -0.5 * (LOG_2PI + s2.ln()) - (v - m) * (v - m) / (2.0 * s2)
            })
            .sum())
    }

    /// Batch mean of `log p̂(y'_k | x_k, t'_k)` on the tape.
    pub fn taped_log_lik<R: Real>(
        &self,
        g: &mut Graph<R>,
        y: Var,
        x: &[Vec<usize>],
        t: &[Treatment],
    ) -> Result<Var, ModelError> {
        let n = x.len();
        let d = g.value(y).cols();
        let h2 = self.bandwidth * self.bandwidth;
        let mut means = Vec::with_capacity(n * d);
        let mut weights = Vec::with_capacity(n * d);
        let mut constant = 0.0;
        for (xk, tk) in x.iter().zip(t) {
            let s = self.stratum(xk, tk)?;
            if s.mean.len() != d {
                return Err(ModelError::Config("outcome dimension mismatch".into()));
            }
            for (m, var) in s.mean.iter().zip(&s.var) {
                let s2 = var + h2;
                means.push(R::of(*m));
                weights.push(R::of(-0.5 / (s2 * n as f64)));
                constant += -0.5 * (LOG_2PI + s2.ln());
            }
        }
        let mv = g.constant(Tensor::matrix(n, d, means)?)?;
        let wv = g.constant(Tensor::matrix(n, d, weights)?)?;
        let diff = g.sub(y, mv)?;
        let sq = g.square(diff)?;
        let w = g.mul(sq, wv)?;
        let quad = g.sum_all(w)?;
        Ok(g.offset(quad, R::of(constant / n as f64))?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> Vec<(Vec<usize>, Treatment, Vec<f64>)> {
        vec![
            (vec![0], Treatment::Level(0), vec![0.0, 1.0]),
            (vec![0], Treatment::Level(0), vec![2.0, 3.0]),
            (vec![1], Treatment::Level(1), vec![5.0, 5.0]),
        ]
    }

    fn fit(h: Option<f64>) -> EmpiricalOutcomeModel {
        let d = toy();
        EmpiricalOutcomeModel::fit(
            &CovariateSpace::new(vec![2]),
            2,
            d.iter().map(|(x, t, y)| (x.as_slice(), t, y.as_slice())),
            h,
        )
        .unwrap()
    }

    #[test]
    fn unit_variance_at_mean() {
        let m = fit(Some(0.0));
        // stratum (0,0): mean (1,2), population variance (1,1)
        let v = m.log_lik(&[1.0, 2.0], &[0], &Treatment::Level(0)).unwrap();
        assert!((v + LOG_2PI).abs() < 1e-12);
    }

    #[test]
    fn single_sample_stratum_uses_floor() {
        let m = fit(Some(0.0));
        let s = m.stratum(&[1], &Treatment::Level(1)).unwrap();
        assert_eq!(s.var, vec![VARIANCE_FLOOR; 2]);
        assert!(m.log_lik(&[5.0, 5.1], &[1], &Treatment::Level(1)).unwrap().is_finite());
    }

    #[test]
    fn missing_stratum_is_an_error() {
        let m = fit(None);
        assert!(matches!(
            m.log_lik(&[0.0, 0.0], &[1], &Treatment::Level(0)),
            Err(ModelError::MissingStratum { t: 0, .. })
        ));
    }

    #[test]
    fn wide_bandwidth_flattens_differences() {
        let m = fit(Some(1e6));
        let a = m.log_lik(&[1.0, 2.0], &[0], &Treatment::Level(0)).unwrap();
        let b = m.log_lik(&[-50.0, 80.0], &[0], &Treatment::Level(0)).unwrap();
        assert!((a - b).abs() < 1e-8);
    }

    #[test]
    fn default_bandwidth_is_tenth_of_pooled_std() {
        let m = fit(None);
        // pooled: (2·(1+1) + 1·(2e-6)) / (3·2)
        let expect = 0.1 * ((4.0 + 2e-6) / 6.0f64).sqrt();
        assert!((m.bandwidth - expect).abs() < 1e-15);
    }

    #[test]
    fn maximized_at_stratum_mean() {
        let m = fit(Some(0.1));
        let best = m.log_lik(&[1.0, 2.0], &[0], &Treatment::Level(0)).unwrap();
        for i in -10..=10 {
            for j in -10..=10 {
                let y = [1.0 + 0.1 * i as f64, 2.0 + 0.1 * j as f64];
                assert!(m.log_lik(&y, &[0], &Treatment::Level(0)).unwrap() <= best);
            }
        }
    }

    #[test]
    fn taped_version_matches() {
        let m = fit(Some(0.2));
        let ys = vec![vec![0.5, 1.5], vec![4.0, 6.0]];
        let x = vec![vec![0], vec![1]];
        let t = vec![Treatment::Level(0), Treatment::Level(1)];
        let mut g = Graph::<f64>::new();
        let yv = g.constant(Tensor::from_rows(&ys).unwrap()).unwrap();
        let v = m.taped_log_lik(&mut g, yv, &x, &t).unwrap();
        let expect = (m.log_lik(&ys[0], &x[0], &t[0]).unwrap() + m.log_lik(&ys[1], &x[1], &t[1]).unwrap()) / 2.0;
        assert!((g.value(v).item() - expect).abs() < 1e-9);
    }
}
