use rand::Rng;
use rand_distr::Exp1;
use serde::{Deserialize, Serialize};

use super::ScmError;

/// Row normalization tolerance for conditional tables.
pub const ROW_TOLERANCE: f64 = 1e-12;

/// Fully discrete SCM over finite supports. `Y` takes the values
/// `0..ny` (as reals). The counterfactual pair `(T', Y')` shares the tables
/// of its factual counterpart.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscreteScm {
    pub p_x: Vec<f64>,
    /// `[x][z]`
    pub p_z_given_x: Vec<Vec<f64>>,
    /// `[x][t]`
    pub p_t_given_x: Vec<Vec<f64>>,
    /// `[z][t][y]`
    pub p_y_given_zt: Vec<Vec<Vec<f64>>>,
}

/// A Dirichlet(1) draw of length `k`.
pub fn dirichlet_row(k: usize, rng: &mut impl Rng) -> Vec<f64> {
    let raw: Vec<f64> = (0..k).map(|_| rng.sample::<f64, _>(Exp1)).collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

fn check_row(name: &str, row: &[f64], expected_len: usize) -> Result<(), ScmError> {
    if row.len() != expected_len {
        return Err(ScmError::InvalidSpec(format!(
            "{name}: row has {} entries, expected {expected_len}",
            row.len()
        )));
    }
    if row.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
        return Err(ScmError::InvalidSpec(format!("{name}: negative or non-finite probability")));
    }
    let s: f64 = row.iter().sum();
    if (s - 1.0).abs() > ROW_TOLERANCE {
        return Err(ScmError::InvalidSpec(format!("{name}: row sums to {s}, not 1")));
    }
    Ok(())
}

impl DiscreteScm {
    /// Tables with Dirichlet(1) rows for supports `(nx, nz, nt, ny)`.
    pub fn random(nx: usize, nz: usize, nt: usize, ny: usize, rng: &mut impl Rng) -> Self {
        Self {
            p_x: dirichlet_row(nx, rng),
            p_z_given_x: (0..nx).map(|_| dirichlet_row(nz, rng)).collect(),
            p_t_given_x: (0..nx).map(|_| dirichlet_row(nt, rng)).collect(),
            p_y_given_zt: (0..nz)
                .map(|_| (0..nt).map(|_| dirichlet_row(ny, rng)).collect())
                .collect(),
        }
    }

    pub fn nx(&self) -> usize {
        self.p_x.len()
    }
    pub fn nz(&self) -> usize {
        self.p_z_given_x.first().map_or(0, Vec::len)
    }
    pub fn nt(&self) -> usize {
        self.p_t_given_x.first().map_or(0, Vec::len)
    }
    pub fn ny(&self) -> usize {
        self.p_y_given_zt
            .first()
            .and_then(|r| r.first())
            .map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<(), ScmError> {
        let (nx, nz, nt, ny) = (self.nx(), self.nz(), self.nt(), self.ny());
        if nx == 0 || nz == 0 || nt == 0 || ny == 0 {
            return Err(ScmError::InvalidSpec("all supports must be non-empty".into()));
        }
        check_row("p(X)", &self.p_x, nx)?;
        if self.p_z_given_x.len() != nx || self.p_t_given_x.len() != nx || self.p_y_given_zt.len() != nz {
            return Err(ScmError::InvalidSpec("table outer dimensions disagree".into()));
        }
        for row in &self.p_z_given_x {
            check_row("p(Z|X)", row, nz)?;
        }
        for row in &self.p_t_given_x {
            check_row("p(T|X)", row, nt)?;
        }
        for per_t in &self.p_y_given_zt {
            if per_t.len() != nt {
                return Err(ScmError::InvalidSpec("p(Y|Z,T) treatment dimension".into()));
            }
            for row in per_t {
                check_row("p(Y|Z,T)", row, ny)?;
            }
        }
        Ok(())
    }

    /// `p(y | x, t) = Σ_z p(z|x) p(y|z,t)`
    pub fn p_y_given_xt(&self, x: usize, t: usize, y: usize) -> f64 {
        (0..self.nz())
            .map(|z| self.p_z_given_x[x][z] * self.p_y_given_zt[z][t][y])
            .sum()
    }

    /// Posterior `p(z | y, t, x)` over all `z`; `None` when `p(y|x,t) = 0`.
    pub fn posterior_z(&self, x: usize, t: usize, y: usize) -> Option<Vec<f64>> {
        let joint: Vec<f64> = (0..self.nz())
            .map(|z| self.p_z_given_x[x][z] * self.p_y_given_zt[z][t][y])
            .collect();
        let s: f64 = joint.iter().sum();
        (s > 0.0).then(|| joint.into_iter().map(|v| v / s).collect())
    }

    /// `E[Y | z, t]`
    pub fn mean_y(&self, z: usize, t: usize) -> f64 {
        self.p_y_given_zt[z][t]
            .iter()
            .enumerate()
            .map(|(y, p)| y as f64 * p)
            .sum()
    }

    pub fn sample_categorical(probs: &[f64], u: f64) -> usize {
        let mut acc = 0.0;
        for (i, p) in probs.iter().enumerate() {
            acc += p;
            if u < acc {
                return i;
            }
        }
        // rounding can leave acc slightly below 1; take the last positive entry
        probs.iter().rposition(|&p| p > 0.0).unwrap_or(probs.len() - 1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn random_tables_are_normalized() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let s = DiscreteScm::random(3, 4, 2, 4, &mut rng);
            s.validate().unwrap();
        }
    }

    #[test]
    fn rejects_unnormalized_row() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut s = DiscreteScm::random(2, 2, 2, 2, &mut rng);
        s.p_t_given_x[1][0] += 1e-9;
        assert!(s.validate().is_err());
    }

    #[test]
    fn posterior_sums_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let s = DiscreteScm::random(2, 3, 2, 3, &mut rng);
        let post = s.posterior_z(1, 0, 2).unwrap();
        assert!((post.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn categorical_sampling_edges() {
        assert_eq!(DiscreteScm::sample_categorical(&[0.2, 0.8], 0.0), 0);
        assert_eq!(DiscreteScm::sample_categorical(&[0.2, 0.8], 0.2), 1);
        assert_eq!(DiscreteScm::sample_categorical(&[0.5, 0.5, 0.0], 0.999_999_999_999), 1);
    }
}
