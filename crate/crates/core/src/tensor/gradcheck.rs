use super::{Module, Tensor};

/// `|a − n| / max(|a|, |n|, floor)`; the floor keeps near-zero gradients from
/// turning rounding noise into large relative errors.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares analytic gradients against central finite differences for every
/// scalar in `module`. `loss_fn` returns the loss and its analytic gradients
/// in `parameters_mut` order; it must be deterministic.
///
/// Returns the worst relative error (see [`relative_error`], floor 1e-6).
pub fn gradcheck<M, F, E>(module: &mut M, step: f64, mut loss_fn: F) -> Result<f64, E>
where
    M: Module<f64>,
    F: FnMut(&M) -> Result<(f64, Vec<Tensor<f64>>), E>,
{
    let (_, analytic) = loss_fn(module)?;
    let mut worst = 0.0f64;
    let n_params = module.parameters_mut().len();
    for pi in 0..n_params {
        let len = module.parameters_mut()[pi].len();
        for j in 0..len {
            let orig = module.parameters_mut()[pi].data()[j];
            module.parameters_mut()[pi].data_mut()[j] = orig + step;
            let (plus, _) = loss_fn(module)?;
            module.parameters_mut()[pi].data_mut()[j] = orig - step;
            let (minus, _) = loss_fn(module)?;
            module.parameters_mut()[pi].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic[pi].data()[j];
            worst = worst.max(relative_error(a, numeric, 1e-6));
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Graph, TensorError};

    struct Params(Vec<Tensor<f64>>);

    impl Module<f64> for Params {
        fn named_parameters(&self) -> Vec<(String, &Tensor<f64>)> {
            self.0.iter().enumerate().map(|(i, t)| (format!("p{i}"), t)).collect()
        }
        fn parameters_mut(&mut self) -> Vec<&mut Tensor<f64>> {
            self.0.iter_mut().collect()
        }
    }

    #[test]
    fn linear_loss_is_exact() {
        let mut m = Params(vec![Tensor::vector(vec![0.3, -1.2, 2.5])]);
        let err = gradcheck(&mut m, 1e-5, |m: &Params| -> Result<_, TensorError> {
            let mut g = Graph::new();
            let w = g.param(&m.0[0])?;
            let s = g.scale(w, 3.0)?;
            let l = g.sum_all(s)?;
            let gr = g.backward(l)?;
            Ok((g.value(l).item(), vec![gr.wrt(&g, w)]))
        })
        .unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn quadratic_loss_within_1e8() {
        let mut m = Params(vec![Tensor::vector(vec![0.3, -1.2, 2.5, 4.0])]);
        let err = gradcheck(&mut m, 1e-5, |m: &Params| -> Result<_, TensorError> {
            let mut g = Graph::new();
            let w = g.param(&m.0[0])?;
            let s = g.square(w)?;
            let l = g.sum_all(s)?;
            let gr = g.backward(l)?;
            Ok((g.value(l).item(), vec![gr.wrt(&g, w)]))
        })
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0, 1e-6), 0.0);
        assert!((relative_error(2.0, 1.0, 1e-6) - 0.5).abs() < 1e-15);
    }
}
