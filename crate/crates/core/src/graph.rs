//! Wengert-list reverse-mode differentiation.
//!
//! Every operation appends one node holding its forward value. `backward`
//! walks the list once in reverse; node order is execution order, so the
//! list is already topologically sorted.

use std::fmt;

use crate::error::{Error, Result};
use crate::tensor::{
    matmul_into, matmul_nt_into, matmul_tn_acc, sigmoid, softmax_slice, softplus, Scalar, Tensor,
};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule for an op defined outside this module.
///
/// Receives the input values, the output value and the upstream gradient;
/// returns one gradient buffer per input.
pub type CustomBackward<T> =
    Box<dyn Fn(&[&Tensor<T>], &Tensor<T>, &Tensor<T>) -> Vec<Tensor<T>> + Send + Sync>;

enum Op<T: Scalar> {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Minimum(Var, Var),
    Maximum(Var, Var),
    AddBias(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    MulScalarVar(Var, Var),
    Sigmoid(Var),
    Softplus(Var),
    Relu(Var),
    Abs(Var),
    Exp(Var),
    Log(Var),
    InverseSigmoid(Var, T),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Concat(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    SelectRows {
        x: Var,
        index: Vec<usize>,
    },
    Sum(Var),
    Mean(Var),
    Custom {
        inputs: Vec<Var>,
        backward: CustomBackward<T>,
    },
}

/// Coarse op category, used to target fault injection in the gradient-check harness.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    MatMul,
    Transpose,
    Add,
    Sub,
    Mul,
    Div,
    MinMax,
    AddBias,
    Scale,
    ScalarVar,
    Sigmoid,
    Softplus,
    Relu,
    Abs,
    Exp,
    Log,
    InverseSigmoid,
    Softmax,
    LogSoftmax,
    LayerNorm,
    Concat,
    Slice,
    SelectRows,
    Reduce,
    Custom,
}

impl OpKind {
    pub const ALL: [OpKind; 26] = [
        OpKind::Leaf,
        OpKind::MatMul,
        OpKind::Transpose,
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Div,
        OpKind::MinMax,
        OpKind::AddBias,
        OpKind::Scale,
        OpKind::ScalarVar,
        OpKind::Sigmoid,
        OpKind::Softplus,
        OpKind::Relu,
        OpKind::Abs,
        OpKind::Exp,
        OpKind::Log,
        OpKind::InverseSigmoid,
        OpKind::Softmax,
        OpKind::LogSoftmax,
        OpKind::LayerNorm,
        OpKind::Concat,
        OpKind::Slice,
        OpKind::SelectRows,
        OpKind::Reduce,
        OpKind::Custom,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::MatMul => "mat_mul",
            OpKind::Transpose => "transpose",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Div => "div",
            OpKind::MinMax => "min_max",
            OpKind::AddBias => "add_bias",
            OpKind::Scale => "scale",
            OpKind::ScalarVar => "scalar_var",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Softplus => "softplus",
            OpKind::Relu => "relu",
            OpKind::Abs => "abs",
            OpKind::Exp => "exp",
            OpKind::Log => "log",
            OpKind::InverseSigmoid => "inverse_sigmoid",
            OpKind::Softmax => "softmax",
            OpKind::LogSoftmax => "log_softmax",
            OpKind::LayerNorm => "layer_norm",
            OpKind::Concat => "concat",
            OpKind::Slice => "slice",
            OpKind::SelectRows => "select_rows",
            OpKind::Reduce => "reduce",
            OpKind::Custom => "custom",
        }
    }
}

impl std::str::FromStr for OpKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        OpKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = OpKind::ALL.iter().map(|k| k.name()).collect();
                Error::Config(format!(
                    "unknown op kind {s:?}; expected one of {}",
                    names.join(", ")
                ))
            })
    }
}

impl<T: Scalar> Op<T> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul(..) | Op::MatMulNt(..) => OpKind::MatMul,
            Op::Transpose(_) => OpKind::Transpose,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Div(..) => OpKind::Div,
            Op::Minimum(..) | Op::Maximum(..) => OpKind::MinMax,
            Op::AddBias(..) => OpKind::AddBias,
            Op::Scale(..) | Op::AddScalar(_) => OpKind::Scale,
            Op::MulScalarVar(..) => OpKind::ScalarVar,
            Op::Sigmoid(_) => OpKind::Sigmoid,
            Op::Softplus(_) => OpKind::Softplus,
            Op::Relu(_) => OpKind::Relu,
            Op::Abs(_) => OpKind::Abs,
            Op::Exp(_) => OpKind::Exp,
            Op::Log(_) => OpKind::Log,
            Op::InverseSigmoid(..) => OpKind::InverseSigmoid,
            Op::SoftmaxRows(_) => OpKind::Softmax,
            Op::LogSoftmaxRows(_) => OpKind::LogSoftmax,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Concat(_) => OpKind::Concat,
            Op::SliceCols { .. } => OpKind::Slice,
            Op::SelectRows { .. } => OpKind::SelectRows,
            Op::Sum(_) | Op::Mean(_) => OpKind::Reduce,
            Op::Custom { .. } => OpKind::Custom,
        }
    }
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    leaf_grads: Vec<Option<Tensor<T>>>,
    fault: Option<OpKind>,
    constants: ConstantLog<T>,
}

/// Optional recording or replaying of every untracked leaf, in creation order.
enum ConstantLog<T: Scalar> {
    Off,
    Record(Vec<Tensor<T>>),
    Replay {
        values: Vec<Tensor<T>>,
        next: usize,
        mismatch: Option<String>,
    },
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> fmt::Debug for Graph<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Graph")
            .field("nodes", &self.nodes.len())
            .finish()
    }
}

fn dim_err(op: &str, a: &[usize], b: &[usize]) -> Error {
    Error::Dimension(format!("{op}: incompatible shapes {a:?} and {b:?}"))
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            leaf_grads: Vec::new(),
            fault: None,
            constants: ConstantLog::Off,
        }
    }

    /// Starts keeping a copy of every constant created from now on.
    pub fn record_constants(&mut self) {
        self.constants = ConstantLog::Record(Vec::new());
    }

    pub fn take_recorded_constants(&mut self) -> Vec<Tensor<T>> {
        match std::mem::replace(&mut self.constants, ConstantLog::Off) {
            ConstantLog::Record(v) => v,
            _ => Vec::new(),
        }
    }

    /// Substitutes `values`, in order, for the constants the next forward pass
    /// creates. Anything derived from parameter values and then detached is
    /// thereby frozen at the recorded point.
    pub fn replay_constants(&mut self, values: Vec<Tensor<T>>) {
        self.constants = ConstantLog::Replay {
            values,
            next: 0,
            mismatch: None,
        };
    }

    /// Fails if the replayed forward pass created a different sequence of constants.
    pub fn check_replay(&self) -> Result<()> {
        match &self.constants {
            ConstantLog::Replay {
                mismatch: Some(m), ..
            } => Err(Error::Contract(m.clone())),
            ConstantLog::Replay { values, next, .. } if *next != values.len() => {
                Err(Error::Contract(format!(
                    "replay consumed {next} of {} recorded constants",
                    values.len()
                )))
            }
            _ => Ok(()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Negates the local gradient of every op of `kind` during backward.
    /// Only useful for exercising the gradient checker.
    pub fn inject_fault(&mut self, kind: OpKind) {
        self.fault = Some(kind);
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Tracked leaf: receives a gradient on `backward`.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Untracked leaf.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        let value = match &mut self.constants {
            ConstantLog::Off => value,
            ConstantLog::Record(log) => {
                log.push(value.clone());
                value
            }
            ConstantLog::Replay {
                values,
                next,
                mismatch,
            } => match values.get(*next) {
                Some(v) if v.shape() == value.shape() => {
                    *next += 1;
                    v.clone()
                }
                other => {
                    if mismatch.is_none() {
                        *mismatch = Some(format!(
                            "constant {next}: recorded {:?}, got {:?}",
                            other.map(Tensor::shape),
                            value.shape()
                        ));
                    }
                    *next += 1;
                    value
                }
            },
        };
        self.push(value, Op::Leaf, false)
    }

    /// Copies the current value of `v` into a fresh untracked leaf.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Accumulated gradient of a tracked leaf, if `backward` reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.leaf_grads[v.0].as_ref()
    }

    pub fn zero_grad(&mut self) {
        self.leaf_grads.iter_mut().for_each(|g| *g = None);
    }

    // ---- linear algebra -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let ([m, k], [k2, n]) = (av.dims2()?, bv.dims2()?);
        if k != k2 {
            return Err(dim_err("matmul", av.shape(), bv.shape()));
        }
        let mut out = vec![T::zero(); m * n];
        matmul_into(av.data(), bv.data(), &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ` without materializing the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let ([m, k], [n, k2]) = (av.dims2()?, bv.dims2()?);
        if k != k2 {
            return Err(dim_err("matmul_nt", av.shape(), bv.shape()));
        }
        let mut out = vec![T::zero(); m * n];
        matmul_nt_into(av.data(), bv.data(), &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMulNt(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).transpose()?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::Transpose(a), rg))
    }

    /// `x · w + b` with `b` broadcast over rows.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        self.add_bias(xw, b)
    }

    // ---- elementwise ----------------------------------------------------

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &str,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(dim_err(name, av.shape(), bv.shape()));
        }
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let t = Tensor::new(av.shape(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, op, rg))
    }

    fn unary(&mut self, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let t = self.value(a).map(f);
        let rg = self.rg(a);
        self.push(t, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "div", |x, y| x / y, Op::Div(a, b))
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(
            a,
            b,
            "minimum",
            |x, y| if y < x { y } else { x },
            Op::Minimum(a, b),
        )
    }

    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(
            a,
            b,
            "maximum",
            |x, y| if y > x { y } else { x },
            Op::Maximum(a, b),
        )
    }

    /// `x (…×c) + b (c)`, broadcasting `b` over every row.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(b));
        let c = xv.cols();
        if bv.numel() != c {
            return Err(dim_err("add_bias", xv.shape(), bv.shape()));
        }
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(c) {
            add_into(row, bv.data());
        }
        let t = Tensor::new(xv.shape(), data)?;
        let rg = self.rg(x) || self.rg(b);
        Ok(self.push(t, Op::AddBias(x, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        self.unary(a, |x| x * s, Op::Scale(a, s))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -T::one())
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Var {
        self.unary(a, |x| x + s, Op::AddScalar(a))
    }

    /// `a * s` where `s` is a tracked one-element tensor.
    pub fn mul_scalar_var(&mut self, a: Var, s: Var) -> Result<Var> {
        let sv = self.value(s);
        if sv.numel() != 1 {
            return Err(dim_err("mul_scalar_var", self.shape(a), sv.shape()));
        }
        let k = sv.item();
        let t = self.value(a).map(|x| x * k);
        let rg = self.rg(a) || self.rg(s);
        Ok(self.push(t, Op::MulScalarVar(a, s), rg))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, softplus, Op::Softplus(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(T::zero()), Op::Relu(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.abs(), Op::Abs(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.exp(), Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.ln(), Op::Log(a))
    }

    /// `ln(x / (1 - x))` with `x` clamped to `[0, 1]` and both terms floored at `eps`.
    pub fn inverse_sigmoid(&mut self, a: Var, eps: T) -> Var {
        self.unary(a, |x| inverse_sigmoid(x, eps), Op::InverseSigmoid(a, eps))
    }

    // ---- row-wise -------------------------------------------------------

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let c = av.cols();
        if c == 0 || av.shape().is_empty() {
            return Err(Error::Dimension(format!(
                "softmax over empty last axis {:?}",
                av.shape()
            )));
        }
        let mut out = vec![T::zero(); av.numel()];
        for (row, o) in av.data().chunks(c).zip(out.chunks_mut(c)) {
            softmax_slice(row, o);
        }
        let t = Tensor::new(av.shape(), out)?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::SoftmaxRows(a), rg))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let c = av.cols();
        if c == 0 || av.shape().is_empty() {
            return Err(Error::Dimension(format!(
                "log_softmax over empty last axis {:?}",
                av.shape()
            )));
        }
        let mut out = Vec::with_capacity(av.numel());
        for row in av.data().chunks(c) {
            let max = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
            let lse = row.iter().map(|&x| (x - max).exp()).sum::<T>().ln() + max;
            out.extend(row.iter().map(|&x| x - lse));
        }
        let t = Tensor::new(av.shape(), out)?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::LogSoftmaxRows(a), rg))
    }

    /// Normalizes the last axis to zero mean and unit variance, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
        let c = xv.cols();
        if gv.numel() != c || bv.numel() != c {
            return Err(dim_err("layer_norm", xv.shape(), gv.shape()));
        }
        let n = T::lit(c as f64);
        let mut xhat = Vec::with_capacity(xv.numel());
        let mut rstd = Vec::with_capacity(xv.rows());
        let mut out = Vec::with_capacity(xv.numel());
        for row in xv.data().chunks(c) {
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let r = T::one() / (var + eps).sqrt();
            rstd.push(r);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * r;
                xhat.push(h);
                out.push(h * gv.data()[j] + bv.data()[j]);
            }
        }
        let t = Tensor::new(xv.shape(), out)?;
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Concatenates along the last axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let rows = self.value(*first).rows();
        let lead = self.shape(*first)[..self.shape(*first).len() - 1].to_vec();
        let mut width = 0;
        for &p in parts {
            let s = self.shape(p);
            if s[..s.len() - 1] != lead[..] {
                return Err(dim_err("concat", self.shape(*first), s));
            }
            width += self.value(p).cols();
        }
        let mut out = Vec::with_capacity(rows * width);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        let mut shape = lead;
        shape.push(width);
        let t = Tensor::new(&shape, out)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(t, Op::Concat(parts.to_vec()), rg))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.cols();
        if start + len > c {
            return Err(Error::Dimension(format!(
                "slice_cols {start}..{} out of range for {:?}",
                start + len,
                xv.shape()
            )));
        }
        let mut out = Vec::with_capacity(xv.rows() * len);
        for row in xv.data().chunks(c) {
            out.extend_from_slice(&row[start..start + len]);
        }
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        let t = Tensor::new(&shape, out)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::SliceCols { x, start }, rg))
    }

    /// Gathers rows of a matrix; indices may repeat.
    pub fn select_rows(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let [r, c] = xv.dims2()?;
        let mut out = Vec::with_capacity(index.len() * c);
        for &i in index {
            if i >= r {
                return Err(Error::Dimension(format!(
                    "row {i} out of range for {:?}",
                    xv.shape()
                )));
            }
            out.extend_from_slice(xv.row(i));
        }
        let t = Tensor::new(&[index.len(), c], out)?;
        let rg = self.rg(x);
        Ok(self.push(
            t,
            Op::SelectRows {
                x,
                index: index.to_vec(),
            },
            rg,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum::<T>();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.data().iter().copied().sum::<T>() / T::lit(v.numel().max(1) as f64);
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    /// Records an op whose forward value was computed by the caller.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor<T>, backward: CustomBackward<T>) -> Var {
        let rg = inputs.iter().any(|&v| self.rg(v));
        self.push(
            value,
            Op::Custom {
                inputs: inputs.to_vec(),
                backward,
            },
            rg,
        )
    }

    // ---- backward -------------------------------------------------------

    /// Accumulates `∂loss/∂leaf` into every tracked leaf. Repeated calls add up.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        if !self.rg(loss) {
            return Err(Error::Contract("backward on an untracked value".into()));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![T::one()]);

        for id in (0..=loss.0).rev() {
            let Some(mut g) = grads[id].take() else {
                continue;
            };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            if self.fault == Some(node.op.kind()) {
                g.iter_mut().for_each(|x| *x = -*x);
            }
            if let Op::Leaf = node.op {
                match &mut self.leaf_grads[id] {
                    Some(acc) => add_into(acc.data_mut(), &g),
                    slot @ None => *slot = Some(Tensor::new(node.value.shape(), g)?),
                }
                continue;
            }
            self.propagate(id, &g, &mut grads)?;
        }
        Ok(())
    }

    fn propagate(&self, id: usize, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        let nodes = &self.nodes;
        let node = &nodes[id];
        let y = node.value.data();
        let val = |v: Var| &nodes[v.0].value;
        // Zero-initialized gradient buffer for operand `v`, or None if untracked.
        macro_rules! slot {
            ($v:expr) => {{
                let v: Var = $v;
                if nodes[v.0].requires_grad {
                    let n = nodes[v.0].value.numel();
                    Some(
                        grads[v.0]
                            .get_or_insert_with(|| vec![T::zero(); n])
                            .as_mut_slice(),
                    )
                } else {
                    None
                }
            }};
        }

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let [m, k] = val(*a).dims2()?;
                let n = val(*b).cols();
                if let Some(ga) = slot!(*a) {
                    let mut tmp = vec![T::zero(); m * k];
                    matmul_nt_into(g, val(*b).data(), &mut tmp, m, n, k);
                    add_into(ga, &tmp);
                }
                if let Some(gb) = slot!(*b) {
                    matmul_tn_acc(val(*a).data(), g, gb, m, k, n);
                }
            }
            Op::MatMulNt(a, b) => {
                let [m, k] = val(*a).dims2()?;
                let n = val(*b).rows();
                if let Some(ga) = slot!(*a) {
                    let mut tmp = vec![T::zero(); m * k];
                    matmul_into(g, val(*b).data(), &mut tmp, m, n, k);
                    add_into(ga, &tmp);
                }
                if let Some(gb) = slot!(*b) {
                    matmul_tn_acc(g, val(*a).data(), gb, m, n, k);
                }
            }
            Op::Transpose(a) => {
                if let Some(ga) = slot!(*a) {
                    let [r, c] = val(*a).dims2()?;
                    for i in 0..r {
                        for j in 0..c {
                            ga[i * c + j] = ga[i * c + j] + g[j * r + i];
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                if let Some(ga) = slot!(*a) {
                    add_into(ga, g);
                }
                if let Some(gb) = slot!(*b) {
                    add_into(gb, g);
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = slot!(*a) {
                    add_into(ga, g);
                }
                if let Some(gb) = slot!(*b) {
                    for (d, &s) in gb.iter_mut().zip(g) {
                        *d = *d - s;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a).data(), val(*b).data());
                if let Some(ga) = slot!(*a) {
                    for i in 0..g.len() {
                        ga[i] = ga[i] + g[i] * bv[i];
                    }
                }
                if let Some(gb) = slot!(*b) {
                    for i in 0..g.len() {
                        gb[i] = gb[i] + g[i] * av[i];
                    }
                }
            }
            Op::Div(a, b) => {
                let bv = val(*b).data();
                if let Some(ga) = slot!(*a) {
                    for i in 0..g.len() {
                        ga[i] = ga[i] + g[i] / bv[i];
                    }
                }
                if let Some(gb) = slot!(*b) {
                    for i in 0..g.len() {
                        gb[i] = gb[i] - g[i] * y[i] / bv[i];
                    }
                }
            }
            Op::Minimum(a, b) | Op::Maximum(a, b) => {
                let is_min = matches!(node.op, Op::Minimum(..));
                let (av, bv) = (val(*a).data(), val(*b).data());
                // Ties route the gradient to `a`.
                let picks_b = |i: usize| if is_min { bv[i] < av[i] } else { bv[i] > av[i] };
                if let Some(ga) = slot!(*a) {
                    for i in 0..g.len() {
                        if !picks_b(i) {
                            ga[i] = ga[i] + g[i];
                        }
                    }
                }
                if let Some(gb) = slot!(*b) {
                    for i in 0..g.len() {
                        if picks_b(i) {
                            gb[i] = gb[i] + g[i];
                        }
                    }
                }
            }
            Op::AddBias(x, b) => {
                if let Some(gx) = slot!(*x) {
                    add_into(gx, g);
                }
                let c = val(*x).cols();
                if let Some(gb) = slot!(*b) {
                    for row in g.chunks(c) {
                        add_into(gb, row);
                    }
                }
            }
            Op::Scale(a, s) => {
                if let Some(ga) = slot!(*a) {
                    for (d, &x) in ga.iter_mut().zip(g) {
                        *d = *d + x * *s;
                    }
                }
            }
            Op::AddScalar(a) => {
                if let Some(ga) = slot!(*a) {
                    add_into(ga, g);
                }
            }
            Op::MulScalarVar(a, s) => {
                let k = val(*s).item();
                if let Some(ga) = slot!(*a) {
                    for (d, &x) in ga.iter_mut().zip(g) {
                        *d = *d + x * k;
                    }
                }
                if let Some(gs) = slot!(*s) {
                    let av = val(*a).data();
                    let mut acc = T::zero();
                    for i in 0..g.len() {
                        acc = acc + g[i] * av[i];
                    }
                    gs[0] = gs[0] + acc;
                }
            }
            Op::Sigmoid(a) => {
                if let Some(ga) = slot!(*a) {
                    for i in 0..g.len() {
                        ga[i] = ga[i] + g[i] * y[i] * (T::one() - y[i]);
                    }
                }
            }
            Op::Softplus(a) => {
                let av = val(*a).data();
                if let Some(ga) = slot!(*a) {
                    for i in 0..g.len() {
                        ga[i] = ga[i] + g[i] * sigmoid(av[i]);
                    }
                }
            }
            Op::Relu(a) => {
                let av = val(*a).data();
                if let Some(ga) = slot!(*a) {
                    for i in 0..g.len() {
                        if av[i] > T::zero() {
                            ga[i] = ga[i] + g[i];
                        }
                    }
                }
            }
            Op::Abs(a) => {
                let av = val(*a).data();
                if let Some(ga) = slot!(*a) {
                    for i in 0..g.len() {
                        if av[i] > T::zero() {
                            ga[i] = ga[i] + g[i];
                        } else if av[i] < T::zero() {
                            ga[i] = ga[i] - g[i];
                        }
                    }
                }
            }
            Op::Exp(a) => {
                if let Some(ga) = slot!(*a) {
                    for i in 0..g.len() {
                        ga[i] = ga[i] + g[i] * y[i];
                    }
                }
            }
            Op::Log(a) => {
                let av = val(*a).data();
                if let Some(ga) = slot!(*a) {
                    for i in 0..g.len() {
                        ga[i] = ga[i] + g[i] / av[i];
                    }
                }
            }
            Op::InverseSigmoid(a, eps) => {
                let av = val(*a).data();
                if let Some(ga) = slot!(*a) {
                    for i in 0..g.len() {
                        let x = av[i].max(T::zero()).min(T::one());
                        let mut d = T::zero();
                        if av[i] >= T::zero() && av[i] <= T::one() {
                            if x > *eps {
                                d = d + T::one() / x;
                            }
                            if T::one() - x > *eps {
                                d = d + T::one() / (T::one() - x);
                            }
                        }
                        ga[i] = ga[i] + g[i] * d;
                    }
                }
            }
            Op::SoftmaxRows(a) => {
                let c = val(*a).cols();
                if let Some(ga) = slot!(*a) {
                    for ((gr, yr), dr) in g.chunks(c).zip(y.chunks(c)).zip(ga.chunks_mut(c)) {
                        let dot: T = gr.iter().zip(yr).map(|(&u, &v)| u * v).sum();
                        for j in 0..c {
                            dr[j] = dr[j] + yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::LogSoftmaxRows(a) => {
                let c = val(*a).cols();
                if let Some(ga) = slot!(*a) {
                    for ((gr, yr), dr) in g.chunks(c).zip(y.chunks(c)).zip(ga.chunks_mut(c)) {
                        let total: T = gr.iter().copied().sum();
                        for j in 0..c {
                            dr[j] = dr[j] + gr[j] - yr[j].exp() * total;
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let c = val(*x).cols();
                let gv = val(*gain).data();
                if let Some(gb) = slot!(*bias) {
                    for row in g.chunks(c) {
                        add_into(gb, row);
                    }
                }
                if let Some(gg) = slot!(*gain) {
                    for (gr, hr) in g.chunks(c).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            gg[j] = gg[j] + gr[j] * hr[j];
                        }
                    }
                }
                if let Some(gx) = slot!(*x) {
                    let n = T::lit(c as f64);
                    for (r, ((gr, hr), dr)) in g
                        .chunks(c)
                        .zip(xhat.chunks(c))
                        .zip(gx.chunks_mut(c))
                        .enumerate()
                    {
                        let mut mean_gh = T::zero();
                        let mut mean_ghx = T::zero();
                        for j in 0..c {
                            let gh = gr[j] * gv[j];
                            mean_gh = mean_gh + gh;
                            mean_ghx = mean_ghx + gh * hr[j];
                        }
                        mean_gh = mean_gh / n;
                        mean_ghx = mean_ghx / n;
                        for j in 0..c {
                            let gh = gr[j] * gv[j];
                            dr[j] = dr[j] + rstd[r] * (gh - mean_gh - hr[j] * mean_ghx);
                        }
                    }
                }
            }
            Op::Concat(parts) => {
                let width = node.value.cols();
                let mut offset = 0;
                for &p in parts {
                    let pc = val(p).cols();
                    if let Some(gp) = slot!(p) {
                        for (gr, dr) in g.chunks(width).zip(gp.chunks_mut(pc)) {
                            add_into(dr, &gr[offset..offset + pc]);
                        }
                    }
                    offset += pc;
                }
            }
            Op::SliceCols { x, start } => {
                let c = val(*x).cols();
                let len = node.value.cols();
                if let Some(gx) = slot!(*x) {
                    for (gr, dr) in g.chunks(len).zip(gx.chunks_mut(c)) {
                        add_into(&mut dr[*start..*start + len], gr);
                    }
                }
            }
            Op::SelectRows { x, index } => {
                let c = val(*x).cols();
                if let Some(gx) = slot!(*x) {
                    for (gr, &i) in g.chunks(c).zip(index) {
                        add_into(&mut gx[i * c..(i + 1) * c], gr);
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = slot!(*a) {
                    for d in ga.iter_mut() {
                        *d = *d + g[0];
                    }
                }
            }
            Op::Mean(a) => {
                let scale = g[0] / T::lit(val(*a).numel().max(1) as f64);
                if let Some(ga) = slot!(*a) {
                    for d in ga.iter_mut() {
                        *d = *d + scale;
                    }
                }
            }
            Op::Custom { inputs, backward } => {
                let ins: Vec<&Tensor<T>> = inputs.iter().map(|&v| val(v)).collect();
                let gt = Tensor::new(node.value.shape(), g.to_vec())?;
                let contribs = backward(&ins, &node.value, &gt);
                if contribs.len() != inputs.len() {
                    return Err(Error::Contract(
                        "custom backward returned wrong number of gradients".into(),
                    ));
                }
                for (&v, c) in inputs.iter().zip(&contribs) {
                    if c.numel() != val(v).numel() {
                        return Err(dim_err("custom backward", val(v).shape(), c.shape()));
                    }
                    if let Some(gv) = slot!(v) {
                        add_into(gv, c.data());
                    }
                }
            }
        }
        Ok(())
    }
}

pub(crate) fn inverse_sigmoid<T: Scalar>(x: T, eps: T) -> T {
    let x = x.max(T::zero()).min(T::one());
    x.max(eps).ln() - (T::one() - x).max(eps).ln()
}
