use crate::tensor::{Graph, Real, TensorError, Var};

pub const LOG_2PI: f64 = 1.837_877_066_409_345_5;

/// Probabilities are clamped to `[PROB_CLAMP, 1 − PROB_CLAMP]` before logs.
pub const PROB_CLAMP: f64 = 1e-7;

/// `Σ_d log N(y_d; mean_d, exp(log_sigma_d)²)`.
pub fn gaussian_log_lik(mean: &[f64], log_sigma: &[f64], y: &[f64]) -> f64 {
    assert_eq!(mean.len(), y.len());
    assert_eq!(log_sigma.len(), y.len());
    mean.iter()
        .zip(log_sigma)
        .zip(y)
        .map(|((m, ls), v)| {
            let z = (v - m) / ls.exp();
            -0.5 * LOG_2PI - ls - 0.5 * z * z
        })
        .sum()
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

/// `(L_D, L_G)` from discriminator probabilities, mean over the batch:
/// `L_D = −log D(real) − log(1 − D(fake))`, `L_G = log D(fake)`.
pub fn discriminator_losses(d_real: &[f64], d_fake: &[f64]) -> (f64, f64) {
    assert_eq!(d_real.len(), d_fake.len());
    let n = d_real.len().max(1) as f64;
    let ld = d_real
        .iter()
        .zip(d_fake)
        .map(|(&r, &f)| -clamp_prob(r).ln() - (1.0 - clamp_prob(f)).ln())
        .sum::<f64>()
        / n;
    let lg = d_fake.iter().map(|&f| clamp_prob(f).ln()).sum::<f64>() / n;
    (ld, lg)
}

fn clamped_prob<R: Real>(g: &mut Graph<R>, logits: Var) -> Result<Var, TensorError> {
    let p = g.sigmoid(logits)?;
    g.clamp(p, R::of(PROB_CLAMP), R::of(1.0 - PROB_CLAMP))
}

/// Taped `(L_D, L_G)` from logits `[n, 1]`. Either side may be `None` when
/// only one of the two scores is needed.
pub fn taped_discriminator_losses<R: Real>(
    g: &mut Graph<R>,
    real_logits: Option<Var>,
    fake_logits: Var,
) -> Result<(Option<Var>, Var), TensorError> {
    let pf = clamped_prob(g, fake_logits)?;
    let log_pf = g.log(pf)?;
    let lg = g.mean_all(log_pf)?;
    let ld = match real_logits {
        Some(r) => {
            let pr = clamped_prob(g, r)?;
            let log_pr = g.log(pr)?;
            let real_term = g.mean_all(log_pr)?;
            let neg = g.scale(pf, R::of(-1.0))?;
            let one_minus = g.offset(neg, R::one())?;
            let log_om = g.log(one_minus)?;
            let fake_term = g.mean_all(log_om)?;
            let s = g.add(real_term, fake_term)?;
            Some(g.scale(s, R::of(-1.0))?)
        }
        None => None,
    };
    Ok((ld, lg))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn log_lik_closed_forms() {
        assert!((gaussian_log_lik(&[1.0, -2.0], &[0.0, 0.0], &[1.0, -2.0]) + 1.837_877_066_4).abs() < 1e-9);
        let s: f64 = 1.7;
        let v = gaussian_log_lik(&[0.0], &[s.ln()], &[s]);
        assert!((v - (-0.5 * LOG_2PI - s.ln() - 0.5)).abs() < 1e-12);
        let a = gaussian_log_lik(&[0.0; 3], &[0.0; 3], &[0.0; 3]);
        let b = gaussian_log_lik(&[0.0; 3], &[2f64.ln(); 3], &[0.0; 3]);
        assert!((a - b - 3.0 * 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn discriminator_hand_values() {
        let (ld, _) = discriminator_losses(&[0.9], &[0.1]);
        assert!((ld - 0.210_721_031_3).abs() < 1e-9);
        let (_, lg) = discriminator_losses(&[0.3], &[0.5]);
        assert!((lg + 0.693_147_180_6).abs() < 1e-9);
        let (ld, _) = discriminator_losses(&[0.5], &[0.5]);
        assert!((ld - 1.386_294_361_1).abs() < 1e-9);
        // clamped at the extremes
        let (ld, lg) = discriminator_losses(&[0.0], &[1.0]);
        assert!(ld.is_finite() && lg == (1.0 - 1e-7f64).ln());
    }

    #[test]
    fn taped_matches_scalar_version_and_is_permutation_invariant() {
        let real = [0.3, -1.2, 2.0];
        let fake = [-0.5, 0.4, 1.1];
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let (ld, lg) = discriminator_losses(
            &real.iter().map(|&v| sig(v)).collect::<Vec<_>>(),
            &fake.iter().map(|&v| sig(v)).collect::<Vec<_>>(),
        );
        for perm in [[0, 1, 2], [2, 0, 1]] {
            let mut g = Graph::<f64>::new();
            let r = g
                .constant(Tensor::matrix(3, 1, perm.iter().map(|&i| real[i]).collect()).unwrap())
                .unwrap();
            let f = g
                .constant(Tensor::matrix(3, 1, perm.iter().map(|&i| fake[i]).collect()).unwrap())
                .unwrap();
            let (tld, tlg) = taped_discriminator_losses(&mut g, Some(r), f).unwrap();
            assert!((g.value(tld.unwrap()).item() - ld).abs() < 1e-12);
            assert!((g.value(tlg).item() - lg).abs() < 1e-12);
        }
    }
}
