//! Reverse-mode tape. Every forward op appends a node holding its value and
//! parent references; `backward` walks the nodes in reverse insertion order,
//! which is a valid reverse topological order because parents always precede
//! their children.

use super::{matmul_t, Real, Tensor, TensorError};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<R> {
    Leaf,
    MatMul(Var, Var),
    /// `[n, d] + [d]` broadcast over rows.
    AddRow(Var, Var),
    /// `[n, d] * [d]` broadcast over rows.
    MulRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, R),
    Offset(Var),
    Relu(Var),
    LeakyRelu(Var, R),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    Clamp(Var, R, R),
    ConcatCols(Vec<Var>),
    Gather(Var, Vec<usize>),
    /// `[n, d] -> [n, 1]`
    RowSum(Var),
    SumAll(Var),
    MeanAll(Var),
}

#[derive(Clone, Debug)]
struct Node<R> {
    value: Tensor<R>,
    op: Op<R>,
    requires_grad: bool,
}

/// A single-owner computation tape.
#[derive(Clone, Debug, Default)]
pub struct Graph<R> {
    nodes: Vec<Node<R>>,
}

fn check_finite<R: Real>(t: &Tensor<R>, op: &'static str) -> Result<(), TensorError> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(TensorError::NonFinite { op })
    }
}

fn same_shape<R: Real>(op: &'static str, a: &Tensor<R>, b: &Tensor<R>) -> Result<(), TensorError> {
    if a.shape() == b.shape() {
        Ok(())
    } else {
        Err(TensorError::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        })
    }
}

fn zip_map<R: Real>(a: &Tensor<R>, b: &Tensor<R>, f: impl Fn(R, R) -> R) -> Tensor<R> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("shapes checked by caller")
}

impl<R: Real> Graph<R> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<R> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<R>, op: Op<R>, op_name: &'static str) -> Result<Var, TensorError> {
        check_finite(&value, op_name)?;
        let requires_grad = match &op {
            Op::Leaf => value.requires_grad(),
            other => parents(other).iter().any(|p| self.nodes[p.0].requires_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records a leaf. Gradients flow to it iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor<R>) -> Result<Var, TensorError> {
        self.push(tensor, Op::Leaf, "leaf")
    }

    pub fn param(&mut self, tensor: &Tensor<R>) -> Result<Var, TensorError> {
        self.leaf(tensor.clone().with_requires_grad(true))
    }

    pub fn constant(&mut self, tensor: Tensor<R>) -> Result<Var, TensorError> {
        self.leaf(tensor.with_requires_grad(false))
    }

    /// A constant copy of `v`'s current value; gradients stop here.
    pub fn detach(&mut self, v: Var) -> Result<Var, TensorError> {
        let t = self.value(v).clone();
        self.constant(t)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let out = matmul_t(self.value(a), false, self.value(b), false)?;
        self.push(out, Op::MatMul(a, b), "matmul")
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var, TensorError> {
        let (av, rv) = (self.value(a), self.value(row));
        if av.rank() != 2 || rv.rank() != 1 || av.cols() != rv.len() {
            return Err(TensorError::ShapeMismatch {
                op: "add_row",
                lhs: av.shape().to_vec(),
                rhs: rv.shape().to_vec(),
            });
        }
        let cols = av.cols();
        let mut out = av.clone().with_requires_grad(false);
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v = *v + rv.data()[i % cols];
        }
        self.push(out, Op::AddRow(a, row), "add_row")
    }

    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var, TensorError> {
        let (av, rv) = (self.value(a), self.value(row));
        if av.rank() != 2 || rv.rank() != 1 || av.cols() != rv.len() {
            return Err(TensorError::ShapeMismatch {
                op: "mul_row",
                lhs: av.shape().to_vec(),
                rhs: rv.shape().to_vec(),
            });
        }
        let cols = av.cols();
        let mut out = av.clone().with_requires_grad(false);
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v = *v * rv.data()[i % cols];
        }
        self.push(out, Op::MulRow(a, row), "mul_row")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        same_shape("add", self.value(a), self.value(b))?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x + y);
        self.push(out, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        same_shape("sub", self.value(a), self.value(b))?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x - y);
        self.push(out, Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        same_shape("mul", self.value(a), self.value(b))?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x * y);
        self.push(out, Op::Mul(a, b), "mul")
    }

    pub fn scale(&mut self, a: Var, c: R) -> Result<Var, TensorError> {
        let out = self.value(a).map(|x| x * c);
        self.push(out, Op::Scale(a, c), "scale")
    }

    pub fn offset(&mut self, a: Var, c: R) -> Result<Var, TensorError> {
        let out = self.value(a).map(|x| x + c);
        self.push(out, Op::Offset(a), "offset")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, TensorError> {
        let out = self.value(a).map(|x| x.max(R::zero()));
        self.push(out, Op::Relu(a), "relu")
    }

    pub fn leaky_relu(&mut self, a: Var, slope: R) -> Result<Var, TensorError> {
        let out = self
            .value(a)
            .map(|x| if x > R::zero() { x } else { x * slope });
        self.push(out, Op::LeakyRelu(a, slope), "leaky_relu")
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var, TensorError> {
        let out = self.value(a).map(|x| {
            if x >= R::zero() {
                R::one() / (R::one() + (-x).exp())
            } else {
                let e = x.exp();
                e / (R::one() + e)
            }
        });
        self.push(out, Op::Sigmoid(a), "sigmoid")
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var, TensorError> {
        let out = self.value(a).map(|x| x.tanh());
        self.push(out, Op::Tanh(a), "tanh")
    }

    pub fn exp(&mut self, a: Var) -> Result<Var, TensorError> {
        let out = self.value(a).map(|x| x.exp());
        self.push(out, Op::Exp(a), "exp")
    }

    pub fn log(&mut self, a: Var) -> Result<Var, TensorError> {
        let out = self.value(a).map(|x| x.ln());
        self.push(out, Op::Log(a), "log")
    }

    pub fn square(&mut self, a: Var) -> Result<Var, TensorError> {
        let out = self.value(a).map(|x| x * x);
        self.push(out, Op::Square(a), "square")
    }

    /// Clamps into `[lo, hi]`; the gradient is zero outside the interval.
    pub fn clamp(&mut self, a: Var, lo: R, hi: R) -> Result<Var, TensorError> {
        let out = self.value(a).map(|x| x.max(lo).min(hi));
        self.push(out, Op::Clamp(a, lo, hi), "clamp")
    }

    /// Concatenates rank-2 tensors with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let first = self.value(parts[0]);
        let rows = first.rows();
        for &p in parts {
            let v = self.value(p);
            if v.rank() != 2 || v.rows() != rows {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: first.shape().to_vec(),
                    rhs: v.shape().to_vec(),
                });
            }
        }
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let out = Tensor::matrix(rows, total, data)?;
        self.push(out, Op::ConcatCols(parts.to_vec()), "concat_cols")
    }

    /// Row lookup into a `[rows, d]` table, producing `[indices.len(), d]`.
    pub fn gather(&mut self, table: Var, indices: &[usize]) -> Result<Var, TensorError> {
        let t = self.value(table);
        if t.rank() != 2 {
            return Err(TensorError::ShapeMismatch {
                op: "gather",
                lhs: t.shape().to_vec(),
                rhs: vec![indices.len()],
            });
        }
        let (rows, d) = (t.rows(), t.cols());
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            if i >= rows {
                return Err(TensorError::IndexOutOfRange { index: i, rows });
            }
            data.extend_from_slice(t.row(i));
        }
        let out = Tensor::matrix(indices.len(), d, data)?;
        self.push(out, Op::Gather(table, indices.to_vec()), "gather")
    }

    pub fn row_sum(&mut self, a: Var) -> Result<Var, TensorError> {
        let v = self.value(a);
        let data = (0..v.rows()).map(|i| v.row(i).iter().copied().sum()).collect();
        let out = Tensor::matrix(v.rows(), 1, data)?;
        self.push(out, Op::RowSum(a), "row_sum")
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var, TensorError> {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(out, Op::SumAll(a), "sum_all")
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var, TensorError> {
        let v = self.value(a);
        let out = Tensor::scalar(v.sum() / R::of(v.len() as f64));
        self.push(out, Op::MeanAll(a), "mean_all")
    }

    /// Reverse sweep from a rank-0 `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<R>, TensorError> {
        let lv = self.value(loss);
        if lv.rank() != 0 {
            return Err(TensorError::NotScalar(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<R>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(R::one()));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            for p in parents(&node.op) {
                if p.0 >= idx {
                    return Err(TensorError::Cycle {
                        node: idx,
                        parent: p.0,
                    });
                }
            }
            self.propagate(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<R>>], target: Var, delta: Tensor<R>) {
        if !self.nodes[target.0].requires_grad {
            return;
        }
        match &mut grads[target.0] {
            Some(existing) => {
                for (e, d) in existing.data_mut().iter_mut().zip(delta.data()) {
                    *e = *e + *d;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }

    fn propagate(&self, idx: usize, g: &Tensor<R>, grads: &mut [Option<Tensor<R>>]) -> Result<(), TensorError> {
        let node = &self.nodes[idx];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.requires_grad(*a) {
                    let ga = matmul_t(g, false, self.value(*b), true)?;
                    self.accumulate(grads, *a, ga);
                }
                if self.requires_grad(*b) {
                    let gb = matmul_t(self.value(*a), true, g, false)?;
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::AddRow(a, row) => {
                if self.requires_grad(*row) {
                    let cols = g.cols();
                    let mut gr = vec![R::zero(); cols];
                    for (i, &v) in g.data().iter().enumerate() {
                        gr[i % cols] = gr[i % cols] + v;
                    }
                    self.accumulate(grads, *row, Tensor::vector(gr));
                }
                self.accumulate(grads, *a, g.clone());
            }
            Op::MulRow(a, row) => {
                let av = self.value(*a);
                let rv = self.value(*row);
                let cols = g.cols();
                if self.requires_grad(*row) {
                    let mut gr = vec![R::zero(); cols];
                    for (i, (&gv, &x)) in g.data().iter().zip(av.data()).enumerate() {
                        gr[i % cols] = gr[i % cols] + gv * x;
                    }
                    self.accumulate(grads, *row, Tensor::vector(gr));
                }
                if self.requires_grad(*a) {
                    let mut ga = g.clone();
                    for (i, v) in ga.data_mut().iter_mut().enumerate() {
                        *v = *v * rv.data()[i % cols];
                    }
                    self.accumulate(grads, *a, ga);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                if self.requires_grad(*b) {
                    self.accumulate(grads, *b, g.map(|v| -v));
                }
            }
            Op::Mul(a, b) => {
                if self.requires_grad(*a) {
                    self.accumulate(grads, *a, zip_map(g, self.value(*b), |x, y| x * y));
                }
                if self.requires_grad(*b) {
                    self.accumulate(grads, *b, zip_map(g, self.value(*a), |x, y| x * y));
                }
            }
            Op::Scale(a, c) => {
                let c = *c;
                self.accumulate(grads, *a, g.map(|v| v * c));
            }
            Op::Offset(a) => self.accumulate(grads, *a, g.clone()),
            Op::Relu(a) => {
                let ga = zip_map(g, self.value(*a), |gv, x| if x > R::zero() { gv } else { R::zero() });
                self.accumulate(grads, *a, ga);
            }
            Op::LeakyRelu(a, slope) => {
                let s = *slope;
                let ga = zip_map(g, self.value(*a), |gv, x| if x > R::zero() { gv } else { gv * s });
                self.accumulate(grads, *a, ga);
            }
            Op::Sigmoid(a) => {
                let ga = zip_map(g, out, |gv, s| gv * s * (R::one() - s));
                self.accumulate(grads, *a, ga);
            }
            Op::Tanh(a) => {
                let ga = zip_map(g, out, |gv, t| gv * (R::one() - t * t));
                self.accumulate(grads, *a, ga);
            }
            Op::Exp(a) => {
                let ga = zip_map(g, out, |gv, e| gv * e);
                self.accumulate(grads, *a, ga);
            }
            Op::Log(a) => {
                let ga = zip_map(g, self.value(*a), |gv, x| gv / x);
                self.accumulate(grads, *a, ga);
            }
            Op::Square(a) => {
                let two = R::of(2.0);
                let ga = zip_map(g, self.value(*a), |gv, x| gv * two * x);
                self.accumulate(grads, *a, ga);
            }
            Op::Clamp(a, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                let ga = zip_map(g, self.value(*a), |gv, x| {
                    if x < lo || x > hi {
                        R::zero()
                    } else {
                        gv
                    }
                });
                self.accumulate(grads, *a, ga);
            }
            Op::ConcatCols(parts) => {
                let rows = g.rows();
                let total = g.cols();
                let mut start = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.requires_grad(p) {
                        let mut data = Vec::with_capacity(rows * w);
                        for i in 0..rows {
                            data.extend_from_slice(&g.data()[i * total + start..i * total + start + w]);
                        }
                        self.accumulate(grads, p, Tensor::matrix(rows, w, data)?);
                    }
                    start += w;
                }
            }
            Op::Gather(table, indices) => {
                if self.requires_grad(*table) {
                    let t = self.value(*table);
                    let d = t.cols();
                    let mut gt = Tensor::zeros(t.shape());
                    for (r, &i) in indices.iter().enumerate() {
                        let dst = &mut gt.data_mut()[i * d..(i + 1) * d];
                        for (o, &v) in dst.iter_mut().zip(g.row(r)) {
                            *o = *o + v;
                        }
                    }
                    self.accumulate(grads, *table, gt);
                }
            }
            Op::RowSum(a) => {
                let av = self.value(*a);
                let cols = av.cols();
                let mut ga = Tensor::zeros(av.shape());
                for (i, v) in ga.data_mut().iter_mut().enumerate() {
                    *v = g.data()[i / cols];
                }
                self.accumulate(grads, *a, ga);
            }
            Op::SumAll(a) => {
                let ga = Tensor::full(self.value(*a).shape(), g.item());
                self.accumulate(grads, *a, ga);
            }
            Op::MeanAll(a) => {
                let av = self.value(*a);
                let ga = Tensor::full(av.shape(), g.item() / R::of(av.len() as f64));
                self.accumulate(grads, *a, ga);
            }
        }
        Ok(())
    }
}

fn parents<R>(op: &Op<R>) -> Vec<Var> {
    match op {
        Op::Leaf => Vec::new(),
        Op::MatMul(a, b)
        | Op::AddRow(a, b)
        | Op::MulRow(a, b)
        | Op::Add(a, b)
        | Op::Sub(a, b)
        | Op::Mul(a, b) => vec![*a, *b],
        Op::Scale(a, _)
        | Op::Offset(a)
        | Op::Relu(a)
        | Op::LeakyRelu(a, _)
        | Op::Sigmoid(a)
        | Op::Tanh(a)
        | Op::Exp(a)
        | Op::Log(a)
        | Op::Square(a)
        | Op::Clamp(a, _, _)
        | Op::Gather(a, _)
        | Op::RowSum(a)
        | Op::SumAll(a)
        | Op::MeanAll(a) => vec![*a],
        Op::ConcatCols(parts) => parts.clone(),
    }
}

/// Gradients from one backward sweep, indexed by tape node.
#[derive(Clone, Debug)]
pub struct Gradients<R> {
    grads: Vec<Option<Tensor<R>>>,
}

impl<R: Real> Gradients<R> {
    /// Gradient of the loss with respect to `v`; all zeros when `v` was not
    /// reachable from the loss (or does not require gradients).
    pub fn wrt(&self, graph: &Graph<R>, v: Var) -> Tensor<R> {
        match self.grads.get(v.0).and_then(Option::as_ref) {
            Some(g) => g.clone(),
            None => Tensor::zeros(graph.value(v).shape()),
        }
    }

    pub fn collect(&self, graph: &Graph<R>, vars: &[Var]) -> Vec<Tensor<R>> {
        vars.iter().map(|&v| self.wrt(graph, v)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_derivative() {
        let mut g = Graph::<f64>::new();
        let w = g.param(&Tensor::scalar(2.0)).unwrap();
        let x = g.constant(Tensor::scalar(3.0)).unwrap();
        let y = g.mul(w, x).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.wrt(&g, w).item(), 3.0);
        assert_eq!(grads.wrt(&g, x).item(), 0.0);
    }

    #[test]
    fn square_derivative() {
        let mut g = Graph::<f64>::new();
        let w = g.param(&Tensor::scalar(4.0)).unwrap();
        let y = g.square(w).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.wrt(&g, w).item(), 8.0);
    }

    #[test]
    fn disconnected_parameter_gets_exact_zero() {
        let mut g = Graph::<f64>::new();
        let w = g.param(&Tensor::vector(vec![1.0, 2.0])).unwrap();
        let unused = g.param(&Tensor::vector(vec![5.0, 6.0, 7.0])).unwrap();
        let s = g.sum_all(w).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.wrt(&g, unused).data(), &[0.0, 0.0, 0.0]);
        assert_eq!(grads.wrt(&g, w).data(), &[1.0, 1.0]);
    }

    #[test]
    fn fan_out_accumulates() {
        // loss = w*w + 3w at w=2 → 2w + 3 = 7
        let mut g = Graph::<f64>::new();
        let w = g.param(&Tensor::scalar(2.0)).unwrap();
        let sq = g.mul(w, w).unwrap();
        let lin = g.scale(w, 3.0).unwrap();
        let loss = g.add(sq, lin).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.wrt(&g, w).item(), 7.0);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::<f64>::new();
        let w = g.param(&Tensor::vector(vec![1.0, 2.0])).unwrap();
        assert!(matches!(g.backward(w), Err(TensorError::NotScalar(_))));
    }

    #[test]
    fn non_finite_forward_is_an_error() {
        let mut g = Graph::<f64>::new();
        let w = g.constant(Tensor::scalar(0.0)).unwrap();
        assert!(matches!(g.log(w), Err(TensorError::NonFinite { .. })));
    }

    #[test]
    fn gather_scatters_back() {
        let mut g = Graph::<f64>::new();
        let table = g
            .param(&Tensor::matrix(3, 2, vec![1., 2., 3., 4., 5., 6.]).unwrap())
            .unwrap();
        let rows = g.gather(table, &[2, 0, 2]).unwrap();
        assert_eq!(g.value(rows).data(), &[5., 6., 1., 2., 5., 6.]);
        let s = g.sum_all(rows).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.wrt(&g, table).data(), &[1., 1., 0., 0., 2., 2.]);
        assert!(g.gather(table, &[3]).is_err());
    }
}
