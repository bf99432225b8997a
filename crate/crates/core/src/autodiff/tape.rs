//! Dynamic reverse-mode tape.
//!
//! A [`Tape`] is rebuilt for every forward pass. Nodes are appended in
//! evaluation order, so every node's inputs precede it and the backward pass
//! simply walks the node list in reverse.

use statrs::function::gamma::{digamma, ln_gamma};

use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// The primitive operations every model in the harness is built from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Primitive {
    MatMul,
    Add,
    Mul,
    Relu,
    Tanh,
    Exp,
    Log,
    Sin,
    Softplus,
    Sum,
    Mean,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Unary {
    Neg,
    Square,
    Sqrt,
    Relu,
    Tanh,
    Exp,
    Log,
    Sin,
    Softplus,
    Abs,
    Lgamma,
}

impl Unary {
    fn name(self) -> &'static str {
        match self {
            Unary::Neg => "neg",
            Unary::Square => "square",
            Unary::Sqrt => "sqrt",
            Unary::Relu => "relu",
            Unary::Tanh => "tanh",
            Unary::Exp => "exp",
            Unary::Log => "log",
            Unary::Sin => "sin",
            Unary::Softplus => "softplus",
            Unary::Abs => "abs",
            Unary::Lgamma => "lgamma",
        }
    }

    fn eval(self, x: f64) -> f64 {
        match self {
            Unary::Neg => -x,
            Unary::Square => x * x,
            Unary::Sqrt => x.sqrt(),
            Unary::Relu => x.max(0.0),
            Unary::Tanh => x.tanh(),
            Unary::Exp => x.exp(),
            Unary::Log => x.ln(),
            Unary::Sin => x.sin(),
            Unary::Softplus => softplus(x),
            Unary::Abs => x.abs(),
            Unary::Lgamma => {
                if x > 0.0 {
                    ln_gamma(x)
                } else {
                    f64::NAN
                }
            }
        }
    }

    /// Derivative given the input `x` and the output `y`.
    fn deriv(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Neg => -1.0,
            Unary::Square => 2.0 * x,
            Unary::Sqrt => 0.5 / y,
            Unary::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Unary::Tanh => 1.0 - y * y,
            Unary::Exp => y,
            Unary::Log => 1.0 / x,
            Unary::Sin => x.cos(),
            Unary::Softplus => sigmoid(x),
            Unary::Abs => {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
            Unary::Lgamma => digamma(x),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

impl Binary {
    fn name(self) -> &'static str {
        match self {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
            Binary::Div => "div",
        }
    }

    fn eval(self, a: f64, b: f64) -> f64 {
        match self {
            Binary::Add => a + b,
            Binary::Sub => a - b,
            Binary::Mul => a * b,
            Binary::Div => a / b,
        }
    }

    /// Partial derivatives with respect to `a` and `b`.
    fn partials(self, a: f64, b: f64) -> (f64, f64) {
        match self {
            Binary::Add => (1.0, 1.0),
            Binary::Sub => (1.0, -1.0),
            Binary::Mul => (b, a),
            Binary::Div => (1.0 / b, -a / (b * b)),
        }
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Binary(Binary, Var, Var),
    Unary(Unary, Var),
    Scale(Var, f64),
    Offset(Var),
    Clamp(Var, f64, f64),
    RestoringClamp(Var, f64, f64),
    Sum(Var),
    Mean(Var),
    Column(Var, usize),
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Ordered record of operations. Single-threaded; build one per task.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradient accumulators produced by [`Tape::backward`].
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Concatenated gradients of `vars`; unreachable nodes contribute zeros.
    pub fn flat(&self, tape: &Tape, vars: &[Var]) -> Vec<f64> {
        let mut out = Vec::new();
        for &v in vars {
            match self.get(v) {
                Some(g) => out.extend_from_slice(g.data()),
                None => out.extend(std::iter::repeat_n(0.0, tape.value(v).len())),
            }
        }
        out
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn check_finite(t: &Tensor, op: &'static str) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::Numeric { op })
    }
}

/// Output shape of a broadcasting elementwise op: one shape must be a
/// trailing suffix of the other.
fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    if a.ends_with(b) {
        Some(a.to_vec())
    } else if b.ends_with(a) {
        Some(b.to_vec())
    } else {
        None
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> Result<f64> {
        self.value(v).item()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A trainable leaf; gradients are accumulated for it.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A constant leaf; no gradient flows into it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Tensor::scalar(value))
    }

    /// Applies one of the listed primitives to `inputs`.
    pub fn forward_primitive(&mut self, op: Primitive, inputs: &[Var]) -> Result<Var> {
        let arity = match op {
            Primitive::MatMul | Primitive::Add | Primitive::Mul => 2,
            _ => 1,
        };
        if inputs.len() != arity {
            return Err(Error::contract(format!(
                "{op:?} takes {arity} inputs, got {}",
                inputs.len()
            )));
        }
        match op {
            Primitive::MatMul => self.matmul(inputs[0], inputs[1]),
            Primitive::Add => self.add(inputs[0], inputs[1]),
            Primitive::Mul => self.mul(inputs[0], inputs[1]),
            Primitive::Relu => self.relu(inputs[0]),
            Primitive::Tanh => self.tanh(inputs[0]),
            Primitive::Exp => self.exp(inputs[0]),
            Primitive::Log => self.log(inputs[0]),
            Primitive::Sin => self.sin(inputs[0]),
            Primitive::Softplus => self.softplus(inputs[0]),
            Primitive::Sum => self.sum(inputs[0]),
            Primitive::Mean => self.mean(inputs[0]),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let (n, k) = va
            .dims2()
            .ok_or_else(|| Error::contract(format!("matmul lhs must be a matrix, got {:?}", va.shape())))?;
        let (k2, m) = vb
            .dims2()
            .ok_or_else(|| Error::contract(format!("matmul rhs must be a matrix, got {:?}", vb.shape())))?;
        if k != k2 {
            return Err(Error::contract(format!(
                "matmul shape mismatch: {:?} x {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let mut out = vec![0.0; n * m];
        gemm(n, k, m, va.data(), false, vb.data(), false, &mut out, false);
        let t = Tensor::new(vec![n, m], out)?;
        check_finite(&t, "matmul")?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(t, Op::MatMul(a, b), ng))
    }

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let shape = broadcast_shape(va.shape(), vb.shape()).ok_or_else(|| {
            Error::contract(format!(
                "{}: shapes {:?} and {:?} do not broadcast",
                kind.name(),
                va.shape(),
                vb.shape()
            ))
        })?;
        let n: usize = shape.iter().product();
        let (da, db) = (va.data(), vb.data());
        let t = if da.len() == n && db.len() == n {
            let data = da.iter().zip(db).map(|(&x, &y)| kind.eval(x, y)).collect();
            Tensor::new(shape, data)?
        } else {
            let (la, lb) = (da.len(), db.len());
            let data = (0..n).map(|i| kind.eval(da[i % la], db[i % lb])).collect();
            Tensor::new(shape, data)?
        };
        check_finite(&t, kind.name())?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(t, Op::Binary(kind, a, b), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Div, a, b)
    }

    fn unary(&mut self, kind: Unary, a: Var) -> Result<Var> {
        let t = self.value(a).map(|x| kind.eval(x));
        check_finite(&t, kind.name())?;
        let ng = self.needs(a);
        Ok(self.push(t, Op::Unary(kind, a), ng))
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Neg, a)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Square, a)
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Sqrt, a)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Relu, a)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Tanh, a)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Exp, a)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Log, a)
    }

    pub fn sin(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Sin, a)
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Softplus, a)
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Abs, a)
    }

    pub fn lgamma(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Lgamma, a)
    }

    /// `c * a` for a constant `c`.
    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let t = self.value(a).map(|x| c * x);
        check_finite(&t, "scale")?;
        let ng = self.needs(a);
        Ok(self.push(t, Op::Scale(a, c), ng))
    }

    /// `a + c` for a constant `c`.
    pub fn offset(&mut self, a: Var, c: f64) -> Result<Var> {
        let t = self.value(a).map(|x| x + c);
        check_finite(&t, "offset")?;
        let ng = self.needs(a);
        Ok(self.push(t, Op::Offset(a), ng))
    }

    /// Elementwise clamp to `[lo, hi]`; the gradient is zero outside.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        let t = self.value(a).map(|x| x.clamp(lo, hi));
        check_finite(&t, "clamp")?;
        let ng = self.needs(a);
        Ok(self.push(t, Op::Clamp(a, lo, hi), ng))
    }

    /// Clamp to `[lo, hi]` whose gradient outside the interval is kept when a
    /// descent step would move the input back inside, and zeroed otherwise.
    /// A plain clamp traps an input that overshoots, since nothing flows back.
    pub fn restoring_clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        let t = self.value(a).map(|x| x.clamp(lo, hi));
        check_finite(&t, "restoring_clamp")?;
        let ng = self.needs(a);
        Ok(self.push(t, Op::RestoringClamp(a, lo, hi), ng))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let t = Tensor::scalar(self.value(a).data().iter().sum());
        check_finite(&t, "sum")?;
        let ng = self.needs(a);
        Ok(self.push(t, Op::Sum(a), ng))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        if v.is_empty() {
            return Err(Error::contract("mean of an empty tensor"));
        }
        let t = Tensor::scalar(v.data().iter().sum::<f64>() / v.len() as f64);
        check_finite(&t, "mean")?;
        let ng = self.needs(a);
        Ok(self.push(t, Op::Mean(a), ng))
    }

    /// Column `j` of a matrix, as a vector.
    pub fn column(&mut self, a: Var, j: usize) -> Result<Var> {
        let v = self.value(a);
        let (rows, cols) = v
            .dims2()
            .filter(|&(_, c)| j < c)
            .ok_or_else(|| Error::contract(format!("column {j} of tensor with shape {:?}", v.shape())))?;
        let data = (0..rows).map(|i| v.data()[i * cols + j]).collect();
        let ng = self.needs(a);
        Ok(self.push(Tensor::vector(data), Op::Column(a, j), ng))
    }

    /// Reverse pass from a scalar `root`.
    ///
    /// Every node reachable from `root` that depends on a parameter receives
    /// an accumulated gradient; everything else stays empty.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let rv = self.value(root);
        if rv.len() != 1 {
            return Err(Error::contract(format!(
                "backward root must be scalar, got shape {:?}",
                rv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Tensor::filled(rv.shape(), 1.0));

        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let (lower, upper) = grads.split_at_mut(i);
            let Some(g) = upper[0].as_ref() else {
                continue;
            };
            match node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let (va, vb) = (self.value(a), self.value(b));
                    let (n, k) = va.dims2().expect("checked in forward");
                    let m = vb.shape()[1];
                    if self.needs(a) {
                        let mut da = vec![0.0; n * k];
                        gemm(n, m, k, g.data(), false, vb.data(), true, &mut da, false);
                        accumulate(lower, a, Tensor::new(vec![n, k], da)?);
                    }
                    if self.needs(b) {
                        let mut db = vec![0.0; k * m];
                        gemm(k, n, m, va.data(), true, g.data(), false, &mut db, false);
                        accumulate(lower, b, Tensor::new(vec![k, m], db)?);
                    }
                }
                Op::Binary(kind, a, b) => {
                    let (va, vb) = (self.value(a), self.value(b));
                    let (da, db) = (va.data(), vb.data());
                    let (la, lb) = (da.len(), db.len());
                    let mut ga = self.needs(a).then(|| Tensor::zeros(va.shape()));
                    let mut gb = self.needs(b).then(|| Tensor::zeros(vb.shape()));
                    for (idx, &gi) in g.data().iter().enumerate() {
                        let (x, y) = (da[idx % la], db[idx % lb]);
                        let (pa, pb) = kind.partials(x, y);
                        if let Some(ga) = ga.as_mut() {
                            ga.data_mut()[idx % la] += gi * pa;
                        }
                        if let Some(gb) = gb.as_mut() {
                            gb.data_mut()[idx % lb] += gi * pb;
                        }
                    }
                    if let Some(ga) = ga {
                        accumulate(lower, a, ga);
                    }
                    if let Some(gb) = gb {
                        accumulate(lower, b, gb);
                    }
                }
                Op::Unary(kind, a) => {
                    let x = self.value(a);
                    let local = x.zip_map(&node.value, |xi, yi| kind.deriv(xi, yi));
                    accumulate(lower, a, local.zip_map(g, |d, gi| d * gi));
                }
                Op::Scale(a, c) => accumulate(lower, a, g.map(|gi| c * gi)),
                Op::Offset(a) => accumulate(lower, a, g.clone()),
                Op::Clamp(a, lo, hi) => {
                    let x = self.value(a);
                    let ga = x.zip_map(g, |xi, gi| if xi >= lo && xi <= hi { gi } else { 0.0 });
                    accumulate(lower, a, ga);
                }
                Op::RestoringClamp(a, lo, hi) => {
                    let x = self.value(a);
                    let ga = x.zip_map(g, |xi, gi| {
                        if (xi > hi && gi < 0.0) || (xi < lo && gi > 0.0) {
                            0.0
                        } else {
                            gi
                        }
                    });
                    accumulate(lower, a, ga);
                }
                Op::Sum(a) => {
                    let gi = g.data()[0];
                    accumulate(lower, a, Tensor::filled(self.value(a).shape(), gi));
                }
                Op::Mean(a) => {
                    let v = self.value(a);
                    let gi = g.data()[0] / v.len() as f64;
                    accumulate(lower, a, Tensor::filled(v.shape(), gi));
                }
                Op::Column(a, j) => {
                    let v = self.value(a);
                    let cols = v.shape()[1];
                    let mut ga = Tensor::zeros(v.shape());
                    for (r, &gi) in g.data().iter().enumerate() {
                        ga.data_mut()[r * cols + j] = gi;
                    }
                    accumulate(lower, a, ga);
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(slots: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut slots[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vec_param(tape: &mut Tape, v: &[f64]) -> Var {
        tape.param(Tensor::vector(v.to_vec()))
    }

    #[test]
    fn relu_definition() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::vector(vec![-1.0, 0.0, 2.0]));
        let y = t.forward_primitive(Primitive::Relu, &[x]).unwrap();
        assert_eq!(t.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn sin_of_point_two() {
        let mut t = Tape::new();
        let x = t.scalar(0.2);
        let y = t.sin(x).unwrap();
        assert!((t.scalar_value(y).unwrap() - 0.19867).abs() < 1e-5);
    }

    #[test]
    fn identity_matmul() {
        let mut t = Tape::new();
        let a_data: Vec<f64> = (0..9).map(|i| i as f64 * 0.7 - 2.0).collect();
        let i3 = t.constant(Tensor::eye(3));
        let a = t.constant(Tensor::matrix(3, 3, a_data.clone()).unwrap());
        let c = t.matmul(i3, a).unwrap();
        assert_eq!(t.value(c).data(), a_data.as_slice());
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut t = Tape::new();
        let p = vec_param(&mut t, &[0.3, -1.0, 2.0, 5.0]);
        let s = t.sum(p).unwrap();
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(p).unwrap().data(), &[1.0; 4]);
    }

    #[test]
    fn power_rule() {
        let mut t = Tape::new();
        let p = t.param(Tensor::scalar(3.0));
        let sq = t.mul(p, p).unwrap();
        let g = t.backward(sq).unwrap();
        assert_eq!(g.get(p).unwrap().item().unwrap(), 6.0);
    }

    #[test]
    fn non_scalar_root_rejected() {
        let mut t = Tape::new();
        let p = vec_param(&mut t, &[1.0, 2.0]);
        assert!(matches!(t.backward(p), Err(Error::Contract(_))));
    }

    #[test]
    fn shape_mismatch_is_contract_error() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::matrix(2, 3, vec![0.0; 6]).unwrap());
        let b = t.constant(Tensor::matrix(2, 3, vec![0.0; 6]).unwrap());
        assert!(matches!(t.matmul(a, b), Err(Error::Contract(_))));
        let c = t.constant(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(t.add(a, c), Err(Error::Contract(_))));
    }

    #[test]
    fn non_finite_output_names_the_op() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::vector(vec![-1.0]));
        match t.log(x) {
            Err(Error::Numeric { op }) => assert_eq!(op, "log"),
            other => panic!("expected numeric error, got {other:?}"),
        }
    }

    #[test]
    fn trailing_broadcast_reduces_gradient() {
        let mut t = Tape::new();
        let m = t.param(Tensor::matrix(2, 3, vec![1.0; 6]).unwrap());
        let b = vec_param(&mut t, &[1.0, 2.0, 3.0]);
        let s = t.mul(m, b).unwrap();
        let root = t.sum(s).unwrap();
        let g = t.backward(root).unwrap();
        assert_eq!(g.get(b).unwrap().data(), &[2.0, 2.0, 2.0]);
        assert_eq!(g.get(m).unwrap().data(), &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn restoring_clamp_keeps_inward_gradients() {
        for (w, want) in [(1.0, [0.0, 1.0, 1.0]), (-1.0, [-1.0, -1.0, 0.0])] {
            let mut t = Tape::new();
            let x = vec_param(&mut t, &[-5.0, 0.5, 5.0]);
            let c = t.restoring_clamp(x, -1.0, 1.0).unwrap();
            assert_eq!(t.value(c).data(), &[-1.0, 0.5, 1.0]);
            let s = t.scale(c, w).unwrap();
            let root = t.sum(s).unwrap();
            assert_eq!(t.backward(root).unwrap().get(x).unwrap().data(), &want);
        }
    }

    #[test]
    fn unreachable_param_has_no_gradient() {
        let mut t = Tape::new();
        let p = vec_param(&mut t, &[1.0]);
        let q = vec_param(&mut t, &[2.0, 3.0]);
        let s = t.sum(p).unwrap();
        let g = t.backward(s).unwrap();
        assert!(g.get(q).is_none());
        assert_eq!(g.flat(&t, &[p, q]), vec![1.0, 0.0, 0.0]);
    }
}
