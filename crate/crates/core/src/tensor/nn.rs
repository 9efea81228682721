use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Graph, Real, Tensor, TensorError, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Activation {
    Identity,
    Relu,
    LeakyRelu { slope: f64 },
    Tanh,
}

impl Activation {
    pub fn apply<R: Real>(self, g: &mut Graph<R>, v: Var) -> Result<Var, TensorError> {
        match self {
            Activation::Identity => Ok(v),
            Activation::Relu => g.relu(v),
            Activation::LeakyRelu { slope } => g.leaky_relu(v, R::of(slope)),
            Activation::Tanh => g.tanh(v),
        }
    }
}

/// Anything owning trainable tensors in a fixed order. The order of
/// `named_parameters` and `parameters_mut` must agree; optimizer state and
/// checkpoints rely on it.
pub trait Module<R: Real> {
    fn named_parameters(&self) -> Vec<(String, &Tensor<R>)>;
    fn parameters_mut(&mut self) -> Vec<&mut Tensor<R>>;

    fn parameters(&self) -> Vec<&Tensor<R>> {
        self.named_parameters().into_iter().map(|(_, t)| t).collect()
    }

    fn num_parameters(&self) -> usize {
        self.parameters().iter().map(|t| t.len()).sum()
    }
}

/// Fully connected layer, `y = x W + b` with `W: [in, out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<R> {
    pub weight: Tensor<R>,
    pub bias: Tensor<R>,
}

impl<R: Real> Linear<R> {
    /// Scaled uniform init in ±sqrt(6 / (fan_in + fan_out)), zero bias.
    pub fn init(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let w = (0..fan_in * fan_out)
            .map(|_| R::of(rng.gen_range(-bound..bound)))
            .collect();
        Self {
            weight: Tensor::matrix(fan_in, fan_out, w).expect("positive dims"),
            bias: Tensor::zeros(&[fan_out]),
        }
    }

    pub fn from_parts(weight: Tensor<R>, bias: Tensor<R>) -> Result<Self, TensorError> {
        if weight.rank() != 2 || bias.rank() != 1 || weight.cols() != bias.len() {
            return Err(TensorError::ShapeMismatch {
                op: "linear",
                lhs: weight.shape().to_vec(),
                rhs: bias.shape().to_vec(),
            });
        }
        Ok(Self { weight, bias })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[1]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp<R> {
    pub layers: Vec<Linear<R>>,
    pub activations: Vec<Activation>,
}

/// Parameters of an [`Mlp`] recorded on a tape.
#[derive(Clone, Debug)]
pub struct MlpVars {
    pub layers: Vec<(Var, Var)>,
    pub activations: Vec<Activation>,
}

impl MlpVars {
    pub fn forward<R: Real>(&self, g: &mut Graph<R>, input: Var) -> Result<Var, TensorError> {
        let mut h = input;
        for (&(w, b), act) in self.layers.iter().zip(&self.activations) {
            let xw = g.matmul(h, w)?;
            let pre = g.add_row(xw, b)?;
            h = act.apply(g, pre)?;
        }
        Ok(h)
    }

    pub fn vars(&self) -> Vec<Var> {
        self.layers.iter().flat_map(|&(w, b)| [w, b]).collect()
    }
}

impl<R: Real> Mlp<R> {
    /// `dims = [in, h1, ..., out]`; hidden layers use `hidden`, the last
    /// layer uses `output`.
    pub fn new(dims: &[usize], hidden: Activation, output: Activation, rng: &mut impl Rng) -> Self {
        assert!(dims.len() >= 2, "an MLP needs input and output widths");
        let n = dims.len() - 1;
        let layers = dims.windows(2).map(|w| Linear::init(w[0], w[1], rng)).collect();
        let activations = (0..n).map(|i| if i + 1 == n { output } else { hidden }).collect();
        Self { layers, activations }
    }

    pub fn from_layers(layers: Vec<Linear<R>>, activations: Vec<Activation>) -> Result<Self, TensorError> {
        for pair in layers.windows(2) {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(TensorError::ShapeMismatch {
                    op: "mlp",
                    lhs: pair[0].weight.shape().to_vec(),
                    rhs: pair[1].weight.shape().to_vec(),
                });
            }
        }
        assert_eq!(layers.len(), activations.len());
        Ok(Self { layers, activations })
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().expect("non-empty").out_dim()
    }

    /// Records parameters on `g`; `trainable = false` binds them as constants.
    pub fn bind(&self, g: &mut Graph<R>, trainable: bool) -> Result<MlpVars, TensorError> {
        let mut layers = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            let (w, b) = if trainable {
                (g.param(&l.weight)?, g.param(&l.bias)?)
            } else {
                (g.constant(l.weight.clone())?, g.constant(l.bias.clone())?)
            };
            layers.push((w, b));
        }
        Ok(MlpVars {
            layers,
            activations: self.activations.clone(),
        })
    }

    /// Untaped forward pass. A rank-1 input is treated as a single row and a
    /// rank-1 output is returned.
    pub fn forward(&self, input: &Tensor<R>) -> Result<Tensor<R>, TensorError> {
        let single = input.rank() == 1;
        let x = if single {
            Tensor::matrix(1, input.len(), input.data().to_vec())?
        } else {
            input.clone()
        };
        if x.cols() != self.in_dim() {
            return Err(TensorError::ShapeMismatch {
                op: "forward_mlp",
                lhs: x.shape().to_vec(),
                rhs: self.layers[0].weight.shape().to_vec(),
            });
        }
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false)?;
        let xv = g.constant(x)?;
        let out = vars.forward(&mut g, xv)?;
        let y = g.value(out).clone();
        if single {
            Ok(Tensor::vector(y.into_data()))
        } else {
            Ok(y)
        }
    }
}

impl<R: Real> Module<R> for Mlp<R> {
    fn named_parameters(&self) -> Vec<(String, &Tensor<R>)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| [(format!("layer{i}.weight"), &l.weight), (format!("layer{i}.bias"), &l.bias)])
            .collect()
    }

    fn parameters_mut(&mut self) -> Vec<&mut Tensor<R>> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_layer() {
        let l = Linear::from_parts(
            Tensor::<f64>::matrix(2, 2, vec![1., 0., 0., 1.]).unwrap(),
            Tensor::zeros(&[2]),
        )
        .unwrap();
        let mlp = Mlp::from_layers(vec![l], vec![Activation::Identity]).unwrap();
        let out = mlp.forward(&Tensor::matrix(1, 2, vec![3., 4.]).unwrap()).unwrap();
        assert_eq!(out.data(), &[3., 4.]);
    }

    #[test]
    fn scalar_affine_layer() {
        let l = Linear::from_parts(Tensor::<f64>::matrix(1, 1, vec![2.]).unwrap(), Tensor::vector(vec![1.])).unwrap();
        let mlp = Mlp::from_layers(vec![l], vec![Activation::Identity]).unwrap();
        let out = mlp.forward(&Tensor::vector(vec![5.])).unwrap();
        assert_eq!(out.data(), &[11.]);
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut mlp = Mlp::<f64>::new(&[3, 5, 2], Activation::Relu, Activation::Identity, &mut rng);
        for p in mlp.parameters_mut() {
            p.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let out = mlp.forward(&Tensor::matrix(2, 3, vec![1., -2., 3., 4., 5., -6.]).unwrap()).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
        assert_eq!(out.shape(), &[2, 2]);
    }

    #[test]
    fn input_width_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mlp = Mlp::<f64>::new(&[3, 2], Activation::Relu, Activation::Identity, &mut rng);
        let err = mlp.forward(&Tensor::vector(vec![1.0, 2.0])).unwrap_err();
        assert!(matches!(err, TensorError::ShapeMismatch { .. }));
    }

    #[test]
    fn init_respects_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let l = Linear::<f32>::init(10, 6, &mut rng);
        let bound = (6.0f32 / 16.0).sqrt();
        assert!(l.weight.data().iter().all(|v| v.abs() <= bound));
        assert!(l.bias.data().iter().all(|&v| v == 0.0));
    }
}
