use serde::{Deserialize, Serialize};

use super::ModelError;
use crate::scm::{CovariateSpace, Treatment};

pub const DEFAULT_EPS_POS: f64 = 0.01;

/// Smoothed `ê(t | x)` for categorical treatments. Rows of strata never
/// observed are `None`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PropensityModel {
    pub covariates: CovariateSpace,
    pub levels: usize,
    pub lambda: f64,
    pub eps_pos: f64,
    /// `[flat(x)][t]`
    pub table: Vec<Option<Vec<f64>>>,
}

/// Raises support entries below `eps` to `eps` and rescales the others so
/// the row still sums to 1, repeating until no free entry is below `eps`.
fn floor_row(row: &mut [f64], eps: f64) {
    let support: Vec<bool> = row.iter().map(|&p| p > 0.0).collect();
    let mut fixed = vec![false; row.len()];
    loop {
        let mut changed = false;
        for i in 0..row.len() {
            if support[i] && !fixed[i] && row[i] < eps {
                fixed[i] = true;
                row[i] = eps;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let n_fixed = fixed.iter().filter(|&&f| f).count() as f64;
        let free: f64 = (0..row.len()).filter(|&i| support[i] && !fixed[i]).map(|i| row[i]).sum();
        if free <= 0.0 {
            break;
        }
        let target = 1.0 - eps * n_fixed;
        for i in 0..row.len() {
            if support[i] && !fixed[i] {
                row[i] *= target / free;
            }
        }
    }
}

impl PropensityModel {
    /// `ê(t|x) = (count(x,t) + λ) / (count(x) + λ|T|)`, then floored at
    /// `eps_pos` on the support and renormalized.
    pub fn fit<'a>(
        covariates: &CovariateSpace,
        levels: usize,
        data: impl IntoIterator<Item = (&'a [usize], &'a Treatment)>,
        lambda: f64,
        eps_pos: f64,
    ) -> Result<Self, ModelError> {
        if !(lambda >= 0.0) || !(eps_pos >= 0.0) || eps_pos * levels as f64 > 1.0 {
            return Err(ModelError::Config(format!(
                "need λ ≥ 0 and 0 ≤ ε_pos ≤ 1/|T|, got λ={lambda}, ε_pos={eps_pos}"
            )));
        }
        let mut counts = vec![vec![0usize; levels]; covariates.strata()];
        let mut total = 0;
        for (x, t) in data {
            let l = t.level().filter(|&l| l < levels).ok_or_else(|| ModelError::Treatment(t.clone()))?;
            let s = covariates.flat(x).ok_or_else(|| ModelError::Covariate(x.to_vec()))?;
            counts[s][l] += 1;
            total += 1;
        }
        if total == 0 {
            return Err(ModelError::EmptyDataset);
        }
        let table = counts
            .into_iter()
            .map(|row| {
                let n: usize = row.iter().sum();
                if n == 0 {
                    return None;
                }
                let denom = n as f64 + lambda * levels as f64;
                let mut p: Vec<f64> = row.iter().map(|&c| (c as f64 + lambda) / denom).collect();
                floor_row(&mut p, eps_pos);
                Some(p)
            })
            .collect();
        Ok(Self {
            covariates: covariates.clone(),
            levels,
            lambda,
            eps_pos,
            table,
        })
    }

    /// Wraps known propensities (for example the generator's true ones).
    pub fn from_table(covariates: &CovariateSpace, table: Vec<Vec<f64>>, eps_pos: f64) -> Result<Self, ModelError> {
        let levels = table.first().map_or(0, Vec::len);
        if table.len() != covariates.strata() || table.iter().any(|r| r.len() != levels) {
            return Err(ModelError::Config("propensity table shape".into()));
        }
        Ok(Self {
            covariates: covariates.clone(),
            levels,
            lambda: 0.0,
            eps_pos,
            table: table.into_iter().map(Some).collect(),
        })
    }

    pub fn prob(&self, x: &[usize], t: &Treatment) -> Result<f64, ModelError> {
        let l = t.level().filter(|&l| l < self.levels).ok_or_else(|| ModelError::Treatment(t.clone()))?;
        let s = self.covariates.flat(x).ok_or_else(|| ModelError::Covariate(x.to_vec()))?;
        self.table[s]
            .as_ref()
            .map(|row| row[l])
            .ok_or_else(|| ModelError::MissingStratum { x: x.to_vec(), t: l })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn data(rows: &[(usize, usize)]) -> Vec<(Vec<usize>, Treatment)> {
        rows.iter().map(|&(x, t)| (vec![x], Treatment::Level(t))).collect()
    }

    fn fit(rows: &[(usize, usize)], levels: usize, lambda: f64, eps: f64) -> PropensityModel {
        let d = data(rows);
        PropensityModel::fit(
            &CovariateSpace::new(vec![2]),
            levels,
            d.iter().map(|(x, t)| (x.as_slice(), t)),
            lambda,
            eps,
        )
        .unwrap()
    }

    #[test]
    fn laplace_formula() {
        let m = fit(&[(0, 0), (0, 0), (0, 0), (0, 1)], 2, 1.0, 0.01);
        assert!((m.prob(&[0], &Treatment::Level(0)).unwrap() - 4.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn single_level_without_smoothing() {
        let m = fit(&[(0, 1), (1, 1), (0, 1)], 2, 0.0, 0.01);
        assert_eq!(m.prob(&[0], &Treatment::Level(1)).unwrap(), 1.0);
        assert_eq!(m.prob(&[1], &Treatment::Level(0)).unwrap(), 0.0);
    }

    #[test]
    fn uniform_counts_give_uniform_rows() {
        for lambda in [0.0, 0.5, 3.0] {
            let m = fit(&[(0, 0), (0, 1), (0, 2), (1, 0), (1, 1), (1, 2)], 3, lambda, 0.01);
            for t in 0..3 {
                assert!((m.prob(&[1], &Treatment::Level(t)).unwrap() - 1.0 / 3.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn floor_and_normalization() {
        let mut rows = vec![(0, 0); 1000];
        rows.push((0, 1));
        let m = fit(&rows, 3, 0.01, 0.05);
        let row = m.table[0].as_ref().unwrap();
        assert!(row.iter().all(|&p| p >= 0.05 - 1e-15));
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(m.prob(&[1], &Treatment::Level(0)).is_err());
    }

    #[test]
    fn empty_dataset_is_an_error() {
        let r = PropensityModel::fit(&CovariateSpace::new(vec![2]), 2, std::iter::empty(), 1.0, 0.01);
        assert!(matches!(r, Err(ModelError::EmptyDataset)));
    }
}
