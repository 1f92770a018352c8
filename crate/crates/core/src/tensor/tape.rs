use std::collections::HashMap;
use std::sync::Arc;

use super::kernels::{broadcast_shape, broadcast_strides, gemm, strides, walk1, walk2, MatRef};
use super::Tensor;
use crate::error::{Error, Result};
use crate::params::{EntryKind, ParamId, ParamStore};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum UnaryKind {
    Elu,
    Silu,
    Tanh,
    Sin,
    Cos,
    Square,
    Relu,
    Abs,
    Exp,
    Neg,
    Scale(f64),
    AddScalar(f64),
    Powf(f64),
    ClampMin(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

/// Elementwise ops addressable by name; binary kinds broadcast.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ElementwiseKind {
    Elu,
    Silu,
    Tanh,
    Sin,
    Cos,
    Square,
    Relu,
    Abs,
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Mean,
}

enum Op {
    Leaf,
    Unary {
        x: Var,
        kind: UnaryKind,
    },
    Binary {
        a: Var,
        b: Var,
        kind: BinaryKind,
    },
    MatMul {
        a: Var,
        b: Var,
    },
    Permute {
        x: Var,
        axes: Vec<usize>,
    },
    Reshape {
        x: Var,
    },
    Reduce {
        x: Var,
        /// Input-indexed strides into the (keep-dims) output.
        map: Vec<usize>,
        scale: f64,
    },
    Conv1d {
        x: Var,
        kernels: Var,
        bias: Option<Var>,
    },
    CausalConv {
        x: Var,
        kernels: Var,
        bias: Option<Var>,
        /// Left-padded input, `[N·(T+K−1), Ci]`.
        padded: Vec<f64>,
    },
    PadLeft {
        x: Var,
        amount: usize,
    },
    Concat {
        xs: Vec<Var>,
        axis: usize,
    },
    SoftmaxCe {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    ChannelAffine {
        x: Var,
        scale: Var,
        shift: Var,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Unary { .. } => "unary",
            Op::Binary { .. } => "binary",
            Op::MatMul { .. } => "matmul",
            Op::Permute { .. } => "permute",
            Op::Reshape { .. } => "reshape",
            Op::Reduce { .. } => "reduce",
            Op::Conv1d { .. } => "conv1d",
            Op::CausalConv { .. } => "causal_conv1d",
            Op::PadLeft { .. } => "pad_left",
            Op::Concat { .. } => "concat",
            Op::SoftmaxCe { .. } => "softmax_cross_entropy",
            Op::BatchNorm { .. } => "batch_norm",
            Op::ChannelAffine { .. } => "channel_affine",
            Op::LayerNorm { .. } => "layer_norm",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
    retain: bool,
    grad: Option<Vec<f64>>,
}

/// Batch statistics produced by a training-mode batch norm.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased (population) variance per channel.
    pub var: Vec<f64>,
    pub count: usize,
}

/// Records ops in execution order; [`Tape::backward`] replays them in
/// reverse. Leaf gradients accumulate across backward calls until
/// [`Tape::zero_grad`]; interior gradients are recomputed on every call and
/// kept only for nodes marked with [`Tape::retain_grad`].
pub struct Tape {
    nodes: Vec<Node>,
    bound: HashMap<ParamId, Var>,
    track_params: bool,
    fault: Option<f64>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn unary_value(kind: UnaryKind, x: f64) -> f64 {
    match kind {
        UnaryKind::Elu => {
            if x > 0.0 {
                x
            } else {
                x.exp_m1()
            }
        }
        UnaryKind::Silu => x / (1.0 + (-x).exp()),
        UnaryKind::Tanh => x.tanh(),
        UnaryKind::Sin => x.sin(),
        UnaryKind::Cos => x.cos(),
        UnaryKind::Square => x * x,
        UnaryKind::Relu => x.max(0.0),
        UnaryKind::Abs => x.abs(),
        UnaryKind::Exp => x.exp(),
        UnaryKind::Neg => -x,
        UnaryKind::Scale(s) => s * x,
        UnaryKind::AddScalar(s) => x + s,
        UnaryKind::Powf(p) => x.powf(p),
        UnaryKind::ClampMin(m) => x.max(m),
    }
}

/// Applies `kind` elementwise with the dispatch hoisted out of the loop.
fn map_unary(kind: UnaryKind, xs: &[f64]) -> Vec<f64> {
    fn run(xs: &[f64], f: impl Fn(f64) -> f64) -> Vec<f64> {
        xs.iter().map(|&v| f(v)).collect()
    }
    match kind {
        UnaryKind::Elu => run(xs, |x| unary_value(UnaryKind::Elu, x)),
        UnaryKind::Silu => run(xs, |x| unary_value(UnaryKind::Silu, x)),
        UnaryKind::Relu => run(xs, |x| x.max(0.0)),
        UnaryKind::Square => run(xs, |x| x * x),
        UnaryKind::Scale(s) => run(xs, |x| s * x),
        UnaryKind::AddScalar(s) => run(xs, |x| x + s),
        other => run(xs, |x| unary_value(other, x)),
    }
}

/// d y / d x given input `x` and output `y`.
fn unary_derivative(kind: UnaryKind, x: f64, y: f64) -> f64 {
    match kind {
        UnaryKind::Elu => {
            if x > 0.0 {
                1.0
            } else {
                y + 1.0
            }
        }
        UnaryKind::Silu => {
            let s = 1.0 / (1.0 + (-x).exp());
            s * (1.0 + x * (1.0 - s))
        }
        UnaryKind::Tanh => 1.0 - y * y,
        UnaryKind::Sin => x.cos(),
        UnaryKind::Cos => -x.sin(),
        UnaryKind::Square => 2.0 * x,
        UnaryKind::Relu => {
            if x > 0.0 {
                1.0
            } else {
                0.0
            }
        }
        UnaryKind::Abs => {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        }
        UnaryKind::Exp => y,
        UnaryKind::Neg => -1.0,
        UnaryKind::Scale(s) => s,
        UnaryKind::AddScalar(_) => 1.0,
        UnaryKind::Powf(p) => p * x.powf(p - 1.0),
        UnaryKind::ClampMin(m) => {
            if x > m {
                1.0
            } else {
                0.0
            }
        }
    }
}

fn slot<'g>(grads: &'g mut [Option<Vec<f64>>], nodes: &[Node], v: Var) -> Option<&'g mut Vec<f64>> {
    let node = &nodes[v.0];
    if !node.needs_grad {
        return None;
    }
    let numel = node.value.numel();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; numel]))
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            bound: HashMap::new(),
            track_params: true,
            fault: None,
        }
    }

    /// A tape on which parameters bind as constants; nothing requires grad
    /// unless explicitly created with [`Tape::leaf`].
    pub fn inference() -> Self {
        Self {
            track_params: false,
            ..Self::new()
        }
    }

    /// Verification hook: scales every leaf gradient by `1 + delta`.
    pub(crate) fn set_backward_fault(&mut self, delta: Option<f64>) {
        self.fault = delta;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Result<Var> {
        if !matches!(op, Op::Leaf | Op::Reshape { .. } | Op::Permute { .. } | Op::PadLeft { .. } | Op::Concat { .. }) && !value.is_finite() {
            return Err(Error::NonFinite(op.name().to_string()));
        }
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            retain: false,
            grad: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Records `tensor` as a leaf; it receives gradients iff its
    /// `requires_grad` flag is set.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let needs = tensor.requires_grad();
        let value = Tensor::from_arc(tensor.shape().to_vec(), tensor.data_arc());
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: needs,
            retain: false,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    /// Binds a stored parameter (or buffer) as a leaf, once per tape.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let entry = store.entry(id);
        let trainable = self.track_params && entry.kind == EntryKind::Param && entry.tensor.requires_grad();
        let t = Tensor::from_arc(entry.tensor.shape().to_vec(), entry.tensor.data_arc()).with_requires_grad(trainable);
        let v = self.leaf(t);
        self.bound.insert(id, v);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.needs(v)
    }

    /// Keeps the gradient of an interior node after backward.
    pub fn retain_grad(&mut self, v: Var) {
        self.nodes[v.0].retain = true;
    }

    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let node = &self.nodes[v.0];
        node.grad
            .as_ref()
            .map(|g| Tensor::from_arc(node.value.shape().to_vec(), Arc::new(g.clone())))
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// Adds bound parameter gradients into the store's gradient buffers.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore) -> Result<()> {
        let mut pairs: Vec<_> = self.bound.iter().collect();
        pairs.sort();
        for (&id, &v) in pairs {
            if let Some(g) = &self.nodes[v.0].grad {
                store.get_mut(id).accumulate_grad(g)?;
            }
        }
        Ok(())
    }

    // ----- elementwise -----

    pub fn elementwise(&mut self, kind: ElementwiseKind, inputs: &[Var]) -> Result<Var> {
        use ElementwiseKind as E;
        let unary = match kind {
            E::Elu => Some(UnaryKind::Elu),
            E::Silu => Some(UnaryKind::Silu),
            E::Tanh => Some(UnaryKind::Tanh),
            E::Sin => Some(UnaryKind::Sin),
            E::Cos => Some(UnaryKind::Cos),
            E::Square => Some(UnaryKind::Square),
            E::Relu => Some(UnaryKind::Relu),
            E::Abs => Some(UnaryKind::Abs),
            _ => None,
        };
        match (unary, inputs) {
            (Some(u), [x]) => self.unary(*x, u),
            (None, [a, b]) => {
                let bk = match kind {
                    E::Add => BinaryKind::Add,
                    E::Sub => BinaryKind::Sub,
                    E::Mul => BinaryKind::Mul,
                    _ => BinaryKind::Div,
                };
                self.binary(*a, *b, bk)
            }
            _ => Err(Error::Usage(format!(
                "{kind:?} called with {} inputs",
                inputs.len()
            ))),
        }
    }

    pub fn unary(&mut self, x: Var, kind: UnaryKind) -> Result<Var> {
        let input = self.value(x);
        let data = map_unary(kind, input.data());
        let value = Tensor::from_arc(input.shape().to_vec(), Arc::new(data));
        let needs = self.needs(x);
        self.push(value, Op::Unary { x, kind }, needs)
    }

    pub fn elu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, UnaryKind::Elu)
    }
    pub fn silu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, UnaryKind::Silu)
    }
    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(x, UnaryKind::Tanh)
    }
    pub fn sin(&mut self, x: Var) -> Result<Var> {
        self.unary(x, UnaryKind::Sin)
    }
    pub fn cos(&mut self, x: Var) -> Result<Var> {
        self.unary(x, UnaryKind::Cos)
    }
    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary(x, UnaryKind::Square)
    }
    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, UnaryKind::Relu)
    }
    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.unary(x, UnaryKind::Abs)
    }
    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        self.unary(x, UnaryKind::Scale(s))
    }
    pub fn add_scalar(&mut self, x: Var, s: f64) -> Result<Var> {
        self.unary(x, UnaryKind::AddScalar(s))
    }
    pub fn powf(&mut self, x: Var, p: f64) -> Result<Var> {
        self.unary(x, UnaryKind::Powf(p))
    }
    pub fn clamp_min(&mut self, x: Var, m: f64) -> Result<Var> {
        self.unary(x, UnaryKind::ClampMin(m))
    }

    fn binary(&mut self, a: Var, b: Var, kind: BinaryKind) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let f = match kind {
            BinaryKind::Add => |x: f64, y: f64| x + y,
            BinaryKind::Sub => |x: f64, y: f64| x - y,
            BinaryKind::Mul => |x: f64, y: f64| x * y,
            BinaryKind::Div => |x: f64, y: f64| x / y,
        };
        let value = if ta.shape() == tb.shape() {
            let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::from_arc(ta.shape().to_vec(), Arc::new(data))
        } else {
            let shape = broadcast_shape(ta.shape(), tb.shape())?;
            let sa = broadcast_strides(ta.shape(), &shape);
            let sb = broadcast_strides(tb.shape(), &shape);
            let numel = shape.iter().product();
            let mut data = vec![0.0; numel];
            let (da, db) = (ta.data(), tb.data());
            walk2(&shape, &sa, &sb, |i, ia, ib| data[i] = f(da[ia], db[ib]));
            Tensor::from_arc(shape, Arc::new(data))
        };
        let needs = self.needs(a) || self.needs(b);
        self.push(value, Op::Binary { a, b, kind }, needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Add)
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Sub)
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Mul)
    }
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Div)
    }

    // ----- linear algebra -----

    /// Matrix product of the last two axes. Either operand may carry one
    /// leading batch axis; a rank-2 operand is shared across the batch.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let geom = MatmulGeom::new(&sa, &sb)?;
        let mut out = vec![0.0; geom.batch * geom.m * geom.n];
        let (da, db) = (self.value(a).data(), self.value(b).data());
        for bi in 0..geom.batch {
            let ao = geom.a_off(bi);
            let bo = geom.b_off(bi);
            let co = bi * geom.m * geom.n;
            gemm(
                geom.m,
                geom.k,
                geom.n,
                MatRef::row_major(&da[ao..ao + geom.m * geom.k], geom.k),
                MatRef::row_major(&db[bo..bo + geom.k * geom.n], geom.n),
                0.0,
                &mut out[co..co + geom.m * geom.n],
                geom.n,
            );
        }
        let value = Tensor::from_arc(geom.out_shape(), Arc::new(out));
        let needs = self.needs(a) || self.needs(b);
        self.push(value, Op::MatMul { a, b }, needs)
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len() || axes.iter().any(|&a| a >= shape.len() || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::dim(format!(
                "invalid permutation {axes:?} for shape {shape:?}"
            )));
        }
        let own = strides(&shape);
        let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
        let mapped: Vec<usize> = axes.iter().map(|&a| own[a]).collect();
        let src = self.value(x).data();
        let mut data = vec![0.0; src.len()];
        walk1(&out_shape, &mapped, |i, o| data[i] = src[o]);
        let value = Tensor::from_arc(out_shape, Arc::new(data));
        let needs = self.needs(x);
        self.push(value, Op::Permute { x, axes: axes.to_vec() }, needs)
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let r = self.shape(x).len();
        if r < 2 {
            return Err(Error::dim("transpose needs rank ≥ 2"));
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        self.permute(x, &axes)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        let needs = self.needs(x);
        self.push(value, Op::Reshape { x }, needs)
    }

    pub fn reduce(&mut self, x: Var, axes: &[usize], kind: ReduceKind, keep_dims: bool) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut reduced = vec![false; shape.len()];
        for &a in axes {
            if a >= shape.len() || reduced[a] {
                return Err(Error::dim(format!(
                    "invalid reduction axes {axes:?} for shape {shape:?}"
                )));
            }
            reduced[a] = true;
        }
        let kept: Vec<usize> = shape
            .iter()
            .zip(&reduced)
            .map(|(&d, &r)| if r { 1 } else { d })
            .collect();
        let count: usize = shape.iter().zip(&reduced).filter(|(_, &r)| r).map(|(&d, _)| d).product();
        let kept_strides = strides(&kept);
        let map: Vec<usize> = kept_strides
            .iter()
            .zip(&reduced)
            .map(|(&s, &r)| if r { 0 } else { s })
            .collect();
        let scale = match kind {
            ReduceKind::Sum => 1.0,
            ReduceKind::Mean => 1.0 / count as f64,
        };
        let src = self.value(x).data();
        let mut out = vec![0.0; kept.iter().product()];
        walk1(&shape, &map, |i, o| out[o] += src[i]);
        if scale != 1.0 {
            out.iter_mut().for_each(|v| *v *= scale);
        }
        let out_shape = if keep_dims {
            kept
        } else {
            shape
                .iter()
                .zip(&reduced)
                .filter(|(_, &r)| !r)
                .map(|(&d, _)| d)
                .collect()
        };
        let value = Tensor::from_arc(out_shape, Arc::new(out));
        let needs = self.needs(x);
        self.push(value, Op::Reduce { x, map, scale }, needs)
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.shape(x).len()).collect();
        self.reduce(x, &axes, ReduceKind::Sum, false)
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.shape(x).len()).collect();
        self.reduce(x, &axes, ReduceKind::Mean, false)
    }

    /// Valid (unpadded) 1-D convolution over the last axis. `x` is
    /// `[ch_in, T]` or `[N, ch_in, T]`; `kernels` is `[ch_out, ch_in, k]`.
    pub fn conv1d(&mut self, x: Var, kernels: Var, bias: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ks = self.shape(kernels).to_vec();
        let g = ConvGeom::new(&xs, &ks)?;
        if let Some(b) = bias {
            if self.shape(b) != [g.co] {
                return Err(Error::dim(format!(
                    "conv bias shape {:?}, expected [{}]",
                    self.shape(b),
                    g.co
                )));
            }
        }
        let cols = g.im2col(self.value(x).data());
        let kdata = self.value(kernels).data();
        let rows = g.n * g.t_out;
        let mut tmp = vec![0.0; rows * g.co];
        gemm(
            rows,
            g.ck(),
            g.co,
            MatRef::row_major(&cols, g.ck()),
            MatRef::transposed(kdata, g.ck()),
            0.0,
            &mut tmp,
            g.co,
        );
        let bias_data = bias.map(|b| self.value(b).data());
        let mut out = vec![0.0; g.n * g.co * g.t_out];
        for n in 0..g.n {
            for c in 0..g.co {
                let b0 = bias_data.map_or(0.0, |b| b[c]);
                let dst = &mut out[(n * g.co + c) * g.t_out..][..g.t_out];
                for (t, d) in dst.iter_mut().enumerate() {
                    *d = tmp[(n * g.t_out + t) * g.co + c] + b0;
                }
            }
        }
        let out_shape = if xs.len() == 2 {
            vec![g.co, g.t_out]
        } else {
            vec![g.n, g.co, g.t_out]
        };
        let value = Tensor::from_arc(out_shape, Arc::new(out));
        let needs = self.needs(x) || self.needs(kernels) || bias.is_some_and(|b| self.needs(b));
        self.push(value, Op::Conv1d { x, kernels, bias }, needs)
    }

    /// Causal convolution on a channels-last input: `x` is `[N, T, Ci]`,
    /// `kernels` `[Co, Ci, K]`, output `[N, T, Co]` with
    /// `y[n,t,c] = Σ_{i,τ} w[c,i,τ]·x[n, t+τ−(K−1), i] + b[c]`, taking
    /// `x` as zero before `t = 0`. Equal to `pad_left` then [`Tape::conv1d`]
    /// in the channels-first layout.
    pub fn causal_conv1d_nlc(&mut self, x: Var, kernels: Var, bias: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ks = self.shape(kernels).to_vec();
        let g = CausalGeom::new(&xs, &ks)?;
        if let Some(b) = bias {
            if self.shape(b) != [g.co] {
                return Err(Error::dim(format!(
                    "conv bias shape {:?}, expected [{}]",
                    self.shape(b),
                    g.co
                )));
            }
        }
        let padded = g.pad(self.value(x).data());
        let taps = g.tap_major(self.value(kernels).data());
        let rows = g.rows();
        let mut full = vec![0.0; rows * g.co];
        // Row r of the overlapping view is the K·Ci window starting at row r.
        gemm(
            rows,
            g.k * g.ci,
            g.co,
            MatRef { data: &padded, rs: g.ci, cs: 1 },
            MatRef::row_major(&taps, g.co),
            0.0,
            &mut full,
            g.co,
        );
        let bias_data = bias.map(|b| self.value(b).data());
        let mut out = vec![0.0; g.n * g.t * g.co];
        for n in 0..g.n {
            let src = &full[n * g.tp() * g.co..][..g.t * g.co];
            let dst = &mut out[n * g.t * g.co..][..g.t * g.co];
            match bias_data {
                Some(b) => {
                    for (drow, srow) in dst.chunks_exact_mut(g.co).zip(src.chunks_exact(g.co)) {
                        for ((d, s), bb) in drow.iter_mut().zip(srow).zip(b) {
                            *d = s + bb;
                        }
                    }
                }
                None => dst.copy_from_slice(src),
            }
        }
        let value = Tensor::from_arc(vec![g.n, g.t, g.co], Arc::new(out));
        let needs = self.needs(x) || self.needs(kernels) || bias.is_some_and(|b| self.needs(b));
        let padded = if needs { padded } else { Vec::new() };
        self.push(value, Op::CausalConv { x, kernels, bias, padded }, needs)
    }

    /// Prepends `amount` zeros along the last axis.
    pub fn pad_left(&mut self, x: Var, amount: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let last = *shape.last().ok_or_else(|| Error::dim("pad_left on a scalar"))?;
        if amount == 0 {
            return Ok(x);
        }
        let rows = self.value(x).numel() / last;
        let width = last + amount;
        let src = self.value(x).data();
        let mut out = vec![0.0; rows * width];
        for r in 0..rows {
            out[r * width + amount..(r + 1) * width].copy_from_slice(&src[r * last..(r + 1) * last]);
        }
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = width;
        let value = Tensor::from_arc(out_shape, Arc::new(out));
        let needs = self.needs(x);
        self.push(value, Op::PadLeft { x, amount }, needs)
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*xs.first().ok_or_else(|| Error::Usage("concat of nothing".into()))?)
            .to_vec();
        if axis >= first.len() {
            return Err(Error::dim(format!("concat axis {axis} for rank {}", first.len())));
        }
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            let compatible = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::dim(format!(
                    "concat shape {s:?} incompatible with {first:?} on axis {axis}"
                )));
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let block = self.shape(v)[axis] * inner;
                out.extend_from_slice(&self.value(v).data()[o * block..(o + 1) * block]);
            }
        }
        let mut out_shape = first;
        out_shape[axis] = total;
        let value = Tensor::from_arc(out_shape, Arc::new(out));
        let needs = xs.iter().any(|&v| self.needs(v));
        self.push(value, Op::Concat { xs: xs.to_vec(), axis }, needs)
    }

    // ----- losses and normalisation -----

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        let [b, m] = shape[..] else {
            return Err(Error::dim(format!("logits must be [B, M], got {shape:?}")));
        };
        if labels.len() != b {
            return Err(Error::dim(format!("{} labels for batch of {b}", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= m) {
            return Err(Error::Validation(format!("label {bad} outside [0, {m})")));
        }
        let z = self.value(logits).data();
        let mut probs = vec![0.0; b * m];
        let mut loss = 0.0;
        for r in 0..b {
            let row = &z[r * m..(r + 1) * m];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let log_denom = denom.ln();
            for (j, &v) in row.iter().enumerate() {
                probs[r * m + j] = (v - max).exp() / denom;
            }
            loss += log_denom - (row[labels[r]] - max);
        }
        let value = Tensor::scalar(loss / b as f64);
        let needs = self.needs(logits);
        self.push(
            value,
            Op::SoftmaxCe {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            needs,
        )
    }

    /// Batch normalisation with batch statistics over every axis except
    /// axis 1 of a `[N, Ch]` or `[N, Ch, L]` input.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, BatchStats)> {
        let shape = self.shape(x).to_vec();
        let (n, ch, l) = match shape[..] {
            [n, ch] => (n, ch, 1),
            [n, ch, l] => (n, ch, l),
            _ => return Err(Error::dim(format!("batch norm input must be rank 2 or 3, got {shape:?}"))),
        };
        if self.shape(gamma) != [ch] || self.shape(beta) != [ch] {
            return Err(Error::dim(format!("batch norm affine params must be [{ch}]")));
        }
        let count = n * l;
        if count < 2 {
            return Err(Error::Validation(format!(
                "training-mode batch norm needs at least 2 values per channel, got {count}"
            )));
        }
        let src = self.value(x).data();
        let mut mean = vec![0.0; ch];
        let mut var = vec![0.0; ch];
        if l == 1 {
            for row in src.chunks_exact(ch) {
                mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
            }
        } else {
            for blk in src.chunks_exact(ch * l) {
                for (m, row) in mean.iter_mut().zip(blk.chunks_exact(l)) {
                    *m += row.iter().sum::<f64>();
                }
            }
        }
        mean.iter_mut().for_each(|m| *m /= count as f64);
        if l == 1 {
            for row in src.chunks_exact(ch) {
                for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                    *s += (v - m) * (v - m);
                }
            }
        } else {
            for blk in src.chunks_exact(ch * l) {
                for ((s, row), m) in var.iter_mut().zip(blk.chunks_exact(l)).zip(&mean) {
                    *s += row.iter().map(|v| (v - m) * (v - m)).sum::<f64>();
                }
            }
        }
        var.iter_mut().for_each(|v| *v /= count as f64);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (gd, bd) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; src.len()];
        let mut out = vec![0.0; src.len()];
        if l == 1 {
            let scale: Vec<f64> = gd.iter().zip(&inv_std).map(|(a, b)| a * b).collect();
            let rows = xhat.chunks_exact_mut(ch).zip(out.chunks_exact_mut(ch)).zip(src.chunks_exact(ch));
            for ((xr, or), sr) in rows {
                for c in 0..ch {
                    let d = sr[c] - mean[c];
                    xr[c] = d * inv_std[c];
                    or[c] = d * scale[c] + bd[c];
                }
            }
        } else {
            for (i, (xh, o)) in xhat.chunks_exact_mut(l).zip(out.chunks_exact_mut(l)).enumerate() {
                let c = i % ch;
                let (m, k, gc, bc) = (mean[c], inv_std[c], gd[c], bd[c]);
                for ((xh, o), s) in xh.iter_mut().zip(o).zip(&src[i * l..(i + 1) * l]) {
                    *xh = (s - m) * k;
                    *o = gc * *xh + bc;
                }
            }
        }
        let value = Tensor::from_arc(shape, Arc::new(out));
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        let v = self.push(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            needs,
        )?;
        Ok((v, BatchStats { mean, var, count }))
    }

    /// `y = x·scale[c] + shift[c]` with `c` indexing axis 1 of a `[N, Ch]`
    /// or `[N, Ch, L]` input.
    pub fn channel_affine(&mut self, x: Var, scale: Var, shift: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (ch, l) = match shape[..] {
            [_, ch] => (ch, 1),
            [_, ch, l] => (ch, l),
            _ => return Err(Error::dim(format!("channel affine input must be rank 2 or 3, got {shape:?}"))),
        };
        if self.shape(scale) != [ch] || self.shape(shift) != [ch] {
            return Err(Error::dim(format!("channel affine params must be [{ch}]")));
        }
        let (src, sd, td) = (self.value(x).data(), self.value(scale).data(), self.value(shift).data());
        let mut out = vec![0.0; src.len()];
        for (i, (o, s)) in out.chunks_exact_mut(l).zip(src.chunks_exact(l)).enumerate() {
            let c = i % ch;
            let (a, b) = (sd[c], td[c]);
            o.iter_mut().zip(s).for_each(|(o, s)| *o = s * a + b);
        }
        let value = Tensor::from_arc(shape, Arc::new(out));
        let needs = self.needs(x) || self.needs(scale) || self.needs(shift);
        self.push(value, Op::ChannelAffine { x, scale, shift }, needs)
    }

    /// Normalises each row over the last axis, then applies `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let f = *shape.last().ok_or_else(|| Error::dim("layer norm on a scalar"))?;
        if self.shape(gamma) != [f] || self.shape(beta) != [f] {
            return Err(Error::dim(format!("layer norm affine params must be [{f}]")));
        }
        let src = self.value(x).data();
        let rows = src.len() / f;
        let (gd, bd) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; src.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; src.len()];
        for r in 0..rows {
            let row = &src[r * f..(r + 1) * f];
            let mean = row.iter().sum::<f64>() / f as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / f as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..f {
                let h = (row[j] - mean) * is;
                xhat[r * f + j] = h;
                out[r * f + j] = gd[j] * h + bd[j];
            }
        }
        let value = Tensor::from_arc(shape, Arc::new(out));
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            needs,
        )
    }

    // ----- backward -----

    /// Reverse sweep from a scalar `loss`. Leaf gradients are added to any
    /// gradient already held from earlier calls.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        for n in &mut self.nodes {
            if !matches!(n.op, Op::Leaf) {
                n.grad = None;
            }
        }
        if !self.needs(loss) {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        let mut deposits: Vec<(usize, Vec<f64>)> = Vec::new();
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) || node.retain {
                deposits.push((i, g.clone()));
            }
            if let Some(g) = self.pass_through(i, g, &mut grads) {
                self.propagate(i, &g, &mut grads)?;
            }
        }
        let fault = self.fault;
        for (i, mut g) in deposits {
            let node = &mut self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                if let Some(delta) = fault {
                    g.iter_mut().for_each(|v| *v *= 1.0 + delta);
                }
                match node.grad.as_mut() {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => node.grad = Some(g),
                }
            } else {
                node.grad = Some(g);
            }
        }
        Ok(())
    }

    /// Hands an owned gradient straight to the input of a reshape or unary
    /// node whose input has none yet, saving a buffer. Returns `g` when the
    /// general path is needed.
    fn pass_through(&self, i: usize, mut g: Vec<f64>, grads: &mut [Option<Vec<f64>>]) -> Option<Vec<f64>> {
        let node = &self.nodes[i];
        let x = match node.op {
            Op::Reshape { x } | Op::Unary { x, .. } => x,
            _ => return Some(g),
        };
        if !self.nodes[x.0].needs_grad || grads[x.0].is_some() {
            return Some(g);
        }
        if let Op::Unary { kind, .. } = node.op {
            let (xin, y) = (self.nodes[x.0].value.data(), node.value.data());
            match kind {
                UnaryKind::Elu => {
                    for (gv, (xv, yv)) in g.iter_mut().zip(xin.iter().zip(y)) {
                        if *xv <= 0.0 {
                            *gv *= yv + 1.0;
                        }
                    }
                }
                other => {
                    for (gv, (xv, yv)) in g.iter_mut().zip(xin.iter().zip(y)) {
                        *gv *= unary_derivative(other, *xv, *yv);
                    }
                }
            }
        }
        grads[x.0] = Some(g);
        None
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let nodes = &self.nodes;
        let node = &nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Unary { x, kind } => {
                let xin = nodes[x.0].value.data();
                let y = node.value.data();
                if let Some(gx) = slot(grads, nodes, *x) {
                    let apply = |gx: &mut [f64], d: &dyn Fn(f64, f64) -> f64| {
                        for ((o, g), (x, y)) in gx.iter_mut().zip(g).zip(xin.iter().zip(y)) {
                            *o += g * d(*x, *y);
                        }
                    };
                    match *kind {
                        UnaryKind::Elu => {
                            for ((o, g), (x, y)) in gx.iter_mut().zip(g).zip(xin.iter().zip(y)) {
                                *o += if *x > 0.0 { *g } else { g * (y + 1.0) };
                            }
                        }
                        other => apply(gx, &|x, y| unary_derivative(other, x, y)),
                    }
                }
            }
            Op::Binary { a, b, kind } => {
                let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
                let shape = node.value.shape();
                let sa = broadcast_strides(ta.shape(), shape);
                let sb = broadcast_strides(tb.shape(), shape);
                let (da, db) = (ta.data(), tb.data());
                let kind = *kind;
                if ta.shape() == shape && tb.shape() == shape {
                    if let Some(ga) = slot(grads, nodes, *a) {
                        match kind {
                            BinaryKind::Add | BinaryKind::Sub => ga.iter_mut().zip(g).for_each(|(o, g)| *o += g),
                            BinaryKind::Mul => ga.iter_mut().zip(g).zip(db).for_each(|((o, g), y)| *o += g * y),
                            BinaryKind::Div => ga.iter_mut().zip(g).zip(db).for_each(|((o, g), y)| *o += g / y),
                        }
                    }
                    if let Some(gb) = slot(grads, nodes, *b) {
                        match kind {
                            BinaryKind::Add => gb.iter_mut().zip(g).for_each(|(o, g)| *o += g),
                            BinaryKind::Sub => gb.iter_mut().zip(g).for_each(|(o, g)| *o -= g),
                            BinaryKind::Mul => gb.iter_mut().zip(g).zip(da).for_each(|((o, g), x)| *o += g * x),
                            BinaryKind::Div => {
                                for ((o, g), (x, y)) in gb.iter_mut().zip(g).zip(da.iter().zip(db)) {
                                    *o -= g * x / (y * y);
                                }
                            }
                        }
                    }
                    return Ok(());
                }
                if let Some(ga) = slot(grads, nodes, *a) {
                    walk2(shape, &sa, &sb, |j, ia, ib| {
                        ga[ia] += match kind {
                            BinaryKind::Add | BinaryKind::Sub => g[j],
                            BinaryKind::Mul => g[j] * db[ib],
                            BinaryKind::Div => g[j] / db[ib],
                        }
                    });
                }
                if let Some(gb) = slot(grads, nodes, *b) {
                    walk2(shape, &sa, &sb, |j, ia, ib| {
                        gb[ib] += match kind {
                            BinaryKind::Add => g[j],
                            BinaryKind::Sub => -g[j],
                            BinaryKind::Mul => g[j] * da[ia],
                            BinaryKind::Div => -g[j] * da[ia] / (db[ib] * db[ib]),
                        }
                    });
                }
            }
            Op::MatMul { a, b } => {
                let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
                let geom = MatmulGeom::new(ta.shape(), tb.shape())?;
                let (m, k, n) = (geom.m, geom.k, geom.n);
                if let Some(ga) = slot(grads, nodes, *a) {
                    for bi in 0..geom.batch {
                        let ao = geom.a_off(bi);
                        let bo = geom.b_off(bi);
                        gemm(
                            m,
                            n,
                            k,
                            MatRef::row_major(&g[bi * m * n..(bi + 1) * m * n], n),
                            MatRef::transposed(&tb.data()[bo..bo + k * n], n),
                            1.0,
                            &mut ga[ao..ao + m * k],
                            k,
                        );
                    }
                }
                if let Some(gb) = slot(grads, nodes, *b) {
                    for bi in 0..geom.batch {
                        let ao = geom.a_off(bi);
                        let bo = geom.b_off(bi);
                        gemm(
                            k,
                            m,
                            n,
                            MatRef::transposed(&ta.data()[ao..ao + m * k], k),
                            MatRef::row_major(&g[bi * m * n..(bi + 1) * m * n], n),
                            1.0,
                            &mut gb[bo..bo + k * n],
                            n,
                        );
                    }
                }
            }
            Op::Permute { x, axes } => {
                let in_shape = nodes[x.0].value.shape();
                let own = strides(in_shape);
                let mapped: Vec<usize> = axes.iter().map(|&a| own[a]).collect();
                if let Some(gx) = slot(grads, nodes, *x) {
                    walk1(node.value.shape(), &mapped, |j, o| gx[o] += g[j]);
                }
            }
            Op::Reshape { x } => {
                if let Some(gx) = slot(grads, nodes, *x) {
                    gx.iter_mut().zip(g).for_each(|(a, b)| *a += b);
                }
            }
            Op::Reduce { x, map, scale } => {
                let in_shape = nodes[x.0].value.shape();
                if let Some(gx) = slot(grads, nodes, *x) {
                    walk1(in_shape, map, |j, o| gx[j] += g[o] * scale);
                }
            }
            Op::Conv1d { x, kernels, bias } => {
                let (tx, tk) = (&nodes[x.0].value, &nodes[kernels.0].value);
                let geom = ConvGeom::new(tx.shape(), tk.shape())?;
                let rows = geom.n * geom.t_out;
                let ck = geom.ck();
                // [rows, co] layout of the upstream gradient
                let mut gt = vec![0.0; rows * geom.co];
                for n in 0..geom.n {
                    for c in 0..geom.co {
                        let src = &g[(n * geom.co + c) * geom.t_out..][..geom.t_out];
                        for (t, &v) in src.iter().enumerate() {
                            gt[(n * geom.t_out + t) * geom.co + c] = v;
                        }
                    }
                }
                if let Some(gk) = slot(grads, nodes, *kernels) {
                    let cols = geom.im2col(tx.data());
                    gemm(
                        geom.co,
                        rows,
                        ck,
                        MatRef::transposed(&gt, geom.co),
                        MatRef::row_major(&cols, ck),
                        1.0,
                        gk,
                        ck,
                    );
                }
                if let Some(gx) = slot(grads, nodes, *x) {
                    let mut dcols = vec![0.0; rows * ck];
                    gemm(
                        rows,
                        geom.co,
                        ck,
                        MatRef::row_major(&gt, geom.co),
                        MatRef::row_major(tk.data(), ck),
                        0.0,
                        &mut dcols,
                        ck,
                    );
                    geom.col2im_add(&dcols, gx);
                }
                if let Some(b) = bias {
                    if let Some(gb) = slot(grads, nodes, *b) {
                        for r in 0..rows {
                            for c in 0..geom.co {
                                gb[c] += gt[r * geom.co + c];
                            }
                        }
                    }
                }
            }
            Op::CausalConv { x, kernels, bias, padded } => {
                let (tx, tk) = (&nodes[x.0].value, &nodes[kernels.0].value);
                let geom = CausalGeom::new(tx.shape(), tk.shape())?;
                let (rows, tp) = (geom.rows(), geom.tp());
                let mut gfull = vec![0.0; rows * geom.co];
                for n in 0..geom.n {
                    gfull[n * tp * geom.co..][..geom.t * geom.co].copy_from_slice(&g[n * geom.t * geom.co..][..geom.t * geom.co]);
                }
                if let Some(gk) = slot(grads, nodes, *kernels) {
                    let kc = geom.k * geom.ci;
                    let mut tmp = vec![0.0; kc * geom.co];
                    gemm(
                        kc,
                        rows,
                        geom.co,
                        MatRef { data: padded, rs: 1, cs: geom.ci },
                        MatRef::row_major(&gfull, geom.co),
                        0.0,
                        &mut tmp,
                        geom.co,
                    );
                    for (j, row) in tmp.chunks_exact(geom.co).enumerate() {
                        let (tau, i) = (j / geom.ci, j % geom.ci);
                        for (c, v) in row.iter().enumerate() {
                            gk[(c * geom.ci + i) * geom.k + tau] += v;
                        }
                    }
                }
                if let Some(gx) = slot(grads, nodes, *x) {
                    let mut gp = vec![0.0; geom.n * tp * geom.ci];
                    let kd = tk.data();
                    for tau in 0..geom.k {
                        gemm(
                            rows,
                            geom.co,
                            geom.ci,
                            MatRef::row_major(&gfull, geom.co),
                            MatRef { data: &kd[tau..], rs: geom.ci * geom.k, cs: geom.k },
                            1.0,
                            &mut gp[tau * geom.ci..],
                            geom.ci,
                        );
                    }
                    let lead = (geom.k - 1) * geom.ci;
                    for n in 0..geom.n {
                        let src = &gp[n * tp * geom.ci + lead..][..geom.t * geom.ci];
                        let dst = &mut gx[n * geom.t * geom.ci..][..geom.t * geom.ci];
                        dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
                    }
                }
                if let Some(b) = bias {
                    if let Some(gb) = slot(grads, nodes, *b) {
                        for row in g.chunks_exact(geom.co) {
                            gb.iter_mut().zip(row).for_each(|(a, v)| *a += v);
                        }
                    }
                }
            }
            Op::PadLeft { x, amount } => {
                let width = *node.value.shape().last().unwrap();
                let last = width - amount;
                if let Some(gx) = slot(grads, nodes, *x) {
                    let rows = gx.len() / last;
                    for r in 0..rows {
                        for j in 0..last {
                            gx[r * last + j] += g[r * width + amount + j];
                        }
                    }
                }
            }
            Op::Concat { xs, axis } => {
                let out_shape = node.value.shape();
                let outer: usize = out_shape[..*axis].iter().product();
                let inner: usize = out_shape[axis + 1..].iter().product();
                let total = out_shape[*axis] * inner;
                let mut offset = 0;
                for &v in xs {
                    let block = nodes[v.0].value.shape()[*axis] * inner;
                    if let Some(gv) = slot(grads, nodes, v) {
                        for o in 0..outer {
                            let src = &g[o * total + offset..o * total + offset + block];
                            gv[o * block..(o + 1) * block]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(a, b)| *a += b);
                        }
                    }
                    offset += block;
                }
            }
            Op::SoftmaxCe { logits, labels, probs } => {
                let b = labels.len();
                let m = probs.len() / b;
                let scale = g[0] / b as f64;
                if let Some(gl) = slot(grads, nodes, *logits) {
                    for r in 0..b {
                        for j in 0..m {
                            let onehot = if j == labels[r] { 1.0 } else { 0.0 };
                            gl[r * m + j] += scale * (probs[r * m + j] - onehot);
                        }
                    }
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let shape = node.value.shape();
                let (n, ch) = (shape[0], shape[1]);
                let l = if shape.len() == 3 { shape[2] } else { 1 };
                let count = (n * l) as f64;
                let mut sum_g = vec![0.0; ch];
                let mut sum_gx = vec![0.0; ch];
                if l == 1 {
                    for (gr, xr) in g.chunks_exact(ch).zip(xhat.chunks_exact(ch)) {
                        for (((sg, sgx), gv), xv) in sum_g.iter_mut().zip(sum_gx.iter_mut()).zip(gr).zip(xr) {
                            *sg += gv;
                            *sgx += gv * xv;
                        }
                    }
                } else {
                    for (gb, xb) in g.chunks_exact(ch * l).zip(xhat.chunks_exact(ch * l)) {
                        for (c, (gr, xr)) in gb.chunks_exact(l).zip(xb.chunks_exact(l)).enumerate() {
                            sum_g[c] += gr.iter().sum::<f64>();
                            sum_gx[c] += gr.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>();
                        }
                    }
                }
                let gd = nodes[gamma.0].value.data();
                if let Some(gx) = slot(grads, nodes, *x) {
                    let k: Vec<f64> = gd.iter().zip(inv_std).map(|(a, b)| a * b).collect();
                    let mg: Vec<f64> = sum_g.iter().map(|v| v / count).collect();
                    let mgx: Vec<f64> = sum_gx.iter().map(|v| v / count).collect();
                    if l == 1 {
                        let rows = gx.chunks_exact_mut(ch).zip(g.chunks_exact(ch)).zip(xhat.chunks_exact(ch));
                        for ((gxr, gr), xr) in rows {
                            for c in 0..ch {
                                gxr[c] += k[c] * (gr[c] - mg[c] - xr[c] * mgx[c]);
                            }
                        }
                    } else {
                        for (i, gxr) in gx.chunks_exact_mut(l).enumerate() {
                            let c = i % ch;
                            let span = i * l..(i + 1) * l;
                            for ((o, gv), xv) in gxr.iter_mut().zip(&g[span.clone()]).zip(&xhat[span]) {
                                *o += k[c] * (gv - mg[c] - xv * mgx[c]);
                            }
                        }
                    }
                }
                if let Some(gg) = slot(grads, nodes, *gamma) {
                    gg.iter_mut().zip(&sum_gx).for_each(|(a, b)| *a += b);
                }
                if let Some(gb) = slot(grads, nodes, *beta) {
                    gb.iter_mut().zip(&sum_g).for_each(|(a, b)| *a += b);
                }
            }
            Op::ChannelAffine { x, scale, shift } => {
                let shape = node.value.shape();
                let (ch, l) = (shape[1], if shape.len() == 3 { shape[2] } else { 1 });
                let (xd, sd) = (nodes[x.0].value.data(), nodes[scale.0].value.data());
                if let Some(gx) = slot(grads, nodes, *x) {
                    for (i, (o, gr)) in gx.chunks_exact_mut(l).zip(g.chunks_exact(l)).enumerate() {
                        let a = sd[i % ch];
                        o.iter_mut().zip(gr).for_each(|(o, g)| *o += g * a);
                    }
                }
                if let Some(gs) = slot(grads, nodes, *scale) {
                    for (i, (gr, xr)) in g.chunks_exact(l).zip(xd.chunks_exact(l)).enumerate() {
                        gs[i % ch] += gr.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>();
                    }
                }
                if let Some(gt) = slot(grads, nodes, *shift) {
                    for (i, gr) in g.chunks_exact(l).enumerate() {
                        gt[i % ch] += gr.iter().sum::<f64>();
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let f = *node.value.shape().last().unwrap();
                let rows = g.len() / f;
                let gd = nodes[gamma.0].value.data();
                if let Some(gx) = slot(grads, nodes, *x) {
                    for r in 0..rows {
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for j in 0..f {
                            let dh = g[r * f + j] * gd[j];
                            s1 += dh;
                            s2 += dh * xhat[r * f + j];
                        }
                        let (m1, m2) = (s1 / f as f64, s2 / f as f64);
                        for j in 0..f {
                            let dh = g[r * f + j] * gd[j];
                            gx[r * f + j] += inv_std[r] * (dh - m1 - xhat[r * f + j] * m2);
                        }
                    }
                }
                if let Some(gg) = slot(grads, nodes, *gamma) {
                    for r in 0..rows {
                        for j in 0..f {
                            gg[j] += g[r * f + j] * xhat[r * f + j];
                        }
                    }
                }
                if let Some(gb) = slot(grads, nodes, *beta) {
                    for r in 0..rows {
                        for j in 0..f {
                            gb[j] += g[r * f + j];
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

struct MatmulGeom {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    a_batched: bool,
    b_batched: bool,
    out_rank3: bool,
}

impl MatmulGeom {
    fn new(sa: &[usize], sb: &[usize]) -> Result<Self> {
        let (ab, m, k) = match sa {
            [m, k] => (None, *m, *k),
            [b, m, k] => (Some(*b), *m, *k),
            _ => return Err(Error::dim(format!("matmul lhs must be rank 2 or 3, got {sa:?}"))),
        };
        let (bb, k2, n) = match sb {
            [k, n] => (None, *k, *n),
            [b, k, n] => (Some(*b), *k, *n),
            _ => return Err(Error::dim(format!("matmul rhs must be rank 2 or 3, got {sb:?}"))),
        };
        if k != k2 {
            return Err(Error::dim(format!(
                "matmul inner extents differ: {sa:?} · {sb:?}"
            )));
        }
        let batch = match (ab, bb) {
            (Some(x), Some(y)) if x != y => {
                return Err(Error::dim(format!("matmul batch extents differ: {sa:?} · {sb:?}")))
            }
            (Some(x), _) | (_, Some(x)) => x,
            (None, None) => 1,
        };
        Ok(Self {
            batch,
            m,
            k,
            n,
            a_batched: ab.is_some(),
            b_batched: bb.is_some(),
            out_rank3: ab.is_some() || bb.is_some(),
        })
    }

    fn a_off(&self, bi: usize) -> usize {
        if self.a_batched {
            bi * self.m * self.k
        } else {
            0
        }
    }

    fn b_off(&self, bi: usize) -> usize {
        if self.b_batched {
            bi * self.k * self.n
        } else {
            0
        }
    }

    fn out_shape(&self) -> Vec<usize> {
        if self.out_rank3 {
            vec![self.batch, self.m, self.n]
        } else {
            vec![self.m, self.n]
        }
    }
}

struct ConvGeom {
    n: usize,
    ci: usize,
    t: usize,
    co: usize,
    k: usize,
    t_out: usize,
}

impl ConvGeom {
    fn new(xs: &[usize], ks: &[usize]) -> Result<Self> {
        let (n, ci, t) = match xs {
            [ci, t] => (1, *ci, *t),
            [n, ci, t] => (*n, *ci, *t),
            _ => return Err(Error::dim(format!("conv1d input must be rank 2 or 3, got {xs:?}"))),
        };
        let [co, ci2, k] = ks[..] else {
            return Err(Error::dim(format!("conv1d kernels must be [out, in, k], got {ks:?}")));
        };
        if ci != ci2 {
            return Err(Error::dim(format!(
                "conv1d input has {ci} channels, kernels expect {ci2}"
            )));
        }
        if k > t {
            return Err(Error::dim(format!("conv1d kernel size {k} exceeds length {t}")));
        }
        Ok(Self {
            n,
            ci,
            t,
            co,
            k,
            t_out: t - k + 1,
        })
    }

    fn ck(&self) -> usize {
        self.ci * self.k
    }

    fn im2col(&self, x: &[f64]) -> Vec<f64> {
        let ck = self.ck();
        let mut cols = vec![0.0; self.n * self.t_out * ck];
        for n in 0..self.n {
            for i in 0..self.ci {
                let src = &x[(n * self.ci + i) * self.t..][..self.t];
                for t in 0..self.t_out {
                    let dst = &mut cols[(n * self.t_out + t) * ck + i * self.k..][..self.k];
                    dst.copy_from_slice(&src[t..t + self.k]);
                }
            }
        }
        cols
    }

    fn col2im_add(&self, dcols: &[f64], gx: &mut [f64]) {
        let ck = self.ck();
        for n in 0..self.n {
            for i in 0..self.ci {
                let dst = &mut gx[(n * self.ci + i) * self.t..][..self.t];
                for t in 0..self.t_out {
                    let src = &dcols[(n * self.t_out + t) * ck + i * self.k..][..self.k];
                    for (d, s) in dst[t..t + self.k].iter_mut().zip(src) {
                        *d += s;
                    }
                }
            }
        }
    }
}

/// Geometry of [`Tape::causal_conv1d_nlc`]. All samples are padded and
/// laid end to end so each kernel tap is one product over every row.
struct CausalGeom {
    n: usize,
    t: usize,
    ci: usize,
    co: usize,
    k: usize,
}

impl CausalGeom {
    fn new(xs: &[usize], ks: &[usize]) -> Result<Self> {
        let [n, t, ci] = xs[..] else {
            return Err(Error::dim(format!("causal conv input must be [N, T, Ci], got {xs:?}")));
        };
        let [co, ci2, k] = ks[..] else {
            return Err(Error::dim(format!("conv1d kernels must be [out, in, k], got {ks:?}")));
        };
        if ci != ci2 {
            return Err(Error::dim(format!(
                "conv1d input has {ci} channels, kernels expect {ci2}"
            )));
        }
        if k == 0 {
            return Err(Error::dim("conv1d kernel size must be positive"));
        }
        Ok(Self { n, t, ci, co, k })
    }

    fn tp(&self) -> usize {
        self.t + self.k - 1
    }

    /// Output rows of the flat product, `N·Tp − (K−1)`.
    fn rows(&self) -> usize {
        self.n * self.tp() - (self.k - 1)
    }

    /// Kernels `[Co, Ci, K]` rearranged to `[K·Ci, Co]`.
    fn tap_major(&self, w: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; w.len()];
        for c in 0..self.co {
            for i in 0..self.ci {
                for tau in 0..self.k {
                    out[(tau * self.ci + i) * self.co + c] = w[(c * self.ci + i) * self.k + tau];
                }
            }
        }
        out
    }

    fn pad(&self, x: &[f64]) -> Vec<f64> {
        let (tp, lead) = (self.tp(), self.k - 1);
        let mut out = vec![0.0; self.n * tp * self.ci];
        for n in 0..self.n {
            out[(n * tp + lead) * self.ci..][..self.t * self.ci].copy_from_slice(&x[n * self.t * self.ci..][..self.t * self.ci]);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn elu_and_silu_anchor_values() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[3], &[0.0, -1.0, 2.0]));
        let e = tape.elu(x).unwrap();
        let s = tape.silu(x).unwrap();
        assert_eq!(tape.value(e).data()[0], 0.0);
        assert_abs_diff_eq!(tape.value(e).data()[1], (-1.0f64).exp() - 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(tape.value(e).data()[1], -0.632121, epsilon = 1e-6);
        assert_eq!(tape.value(e).data()[2], 2.0);
        assert_eq!(tape.value(s).data()[0], 0.0);
    }

    #[test]
    fn elementwise_dispatch_checks_arity() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2], &[1.0, 2.0]));
        assert!(tape.elementwise(ElementwiseKind::Add, &[x]).is_err());
        let y = tape.elementwise(ElementwiseKind::Mul, &[x, x]).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 4.0]);
    }

    #[test]
    fn broadcast_mismatch_is_dimension_error() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2, 3], &[0.0; 6]));
        let b = tape.constant(t(&[2], &[0.0; 2]));
        assert!(matches!(tape.add(a, b), Err(Error::Dimension(_))));
        let c = tape.constant(t(&[2, 1], &[1.0, 2.0]));
        let d = tape.add(a, c).unwrap();
        assert_eq!(tape.value(d).data(), &[1.0, 1.0, 1.0, 2.0, 2.0, 2.0]);
    }

    #[test]
    fn matmul_anchors() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.constant(t(&[2, 1], &[1.0, 1.0]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.shape(c), &[2, 1]);
        assert_eq!(tape.value(c).data(), &[3.0, 7.0]);

        let eye = tape.constant(Tensor::eye(3).unwrap());
        let m = tape.constant(t(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let p = tape.matmul(eye, m).unwrap();
        assert_eq!(tape.value(p), tape.value(m));

        let z = tape.constant(Tensor::zeros(&[2, 3]).unwrap());
        let q = tape.matmul(z, m).unwrap();
        assert!(tape.value(q).data().iter().all(|&v| v == 0.0));

        assert!(matches!(tape.matmul(a, m), Err(Error::Dimension(_))));
    }

    #[test]
    fn conv1d_anchors() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 4], &[1.0, 2.0, 3.0, 4.0]));
        let k = tape.constant(t(&[1, 1, 3], &[0.0, 0.0, 1.0]));
        let b = tape.constant(t(&[1], &[0.0]));
        let y = tape.conv1d(x, k, Some(b)).unwrap();
        assert_eq!(tape.shape(y), &[1, 2]);
        assert_eq!(tape.value(y).data(), &[3.0, 4.0]);

        let delta = tape.constant(t(&[1, 1, 1], &[1.0]));
        let id = tape.conv1d(x, delta, None).unwrap();
        assert_eq!(tape.value(id).data(), tape.value(x).data());

        let zk = tape.constant(Tensor::zeros(&[2, 1, 2]).unwrap());
        let zb = tape.constant(Tensor::zeros(&[2]).unwrap());
        let zy = tape.conv1d(x, zk, Some(zb)).unwrap();
        assert!(tape.value(zy).data().iter().all(|&v| v == 0.0));

        let long = tape.constant(Tensor::zeros(&[1, 1, 5]).unwrap());
        assert!(matches!(tape.conv1d(x, long, None), Err(Error::Dimension(_))));
    }

    #[test]
    fn reduce_anchors() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[3], &[1.0, 2.0, 3.0]));
        let s = tape.sum_all(x).unwrap();
        assert_eq!(tape.value(s).item().unwrap(), 6.0);
        let same = tape.reduce(x, &[], ReduceKind::Mean, false).unwrap();
        assert_eq!(tape.value(same).data(), tape.value(x).data());
        let c = tape.constant(t(&[3], &[2.0, 2.0, 2.0]));
        let m = tape.mean_all(c).unwrap();
        assert_eq!(tape.value(m).item().unwrap(), 2.0);
        assert!(tape.reduce(x, &[0, 0], ReduceKind::Sum, false).is_err());
        assert!(tape.reduce(x, &[1], ReduceKind::Sum, false).is_err());
    }

    #[test]
    fn cross_entropy_anchors() {
        let mut tape = Tape::new();
        let u = tape.constant(Tensor::zeros(&[2, 4]).unwrap());
        let l = tape.softmax_cross_entropy(u, &[0, 3]).unwrap();
        assert_abs_diff_eq!(tape.value(l).item().unwrap(), 4f64.ln(), epsilon = 1e-12);

        let sharp = tape.constant(t(&[1, 2], &[50.0, 0.0]));
        let l2 = tape.softmax_cross_entropy(sharp, &[0]).unwrap();
        assert!(tape.value(l2).item().unwrap() < 1e-9);

        let single = tape.constant(t(&[3, 1], &[0.3, -2.0, 7.0]));
        let l3 = tape.softmax_cross_entropy(single, &[0, 0, 0]).unwrap();
        assert_eq!(tape.value(l3).item().unwrap(), 0.0);

        assert!(matches!(
            tape.softmax_cross_entropy(u, &[0, 4]),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn backward_anchors_and_accumulation() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3], &[0.5, -1.0, 2.0]).with_requires_grad(true));
        let s = tape.sum_all(x).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0, 1.0, 1.0]);

        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]).with_requires_grad(true));
        let sq = tape.square(x).unwrap();
        let s = tape.sum_all(sq).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 4.0]);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[4.0, 8.0]);
        tape.zero_grad();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 4.0]);

        assert!(matches!(tape.backward(sq), Err(Error::Usage(_))));
    }

    #[test]
    fn ops_do_not_mutate_inputs() {
        let mut tape = Tape::new();
        let src = t(&[2, 2], &[1.0, -2.0, 3.0, -4.0]);
        let x = tape.leaf(src.clone().with_requires_grad(true));
        let e = tape.elu(x).unwrap();
        let p = tape.transpose(e).unwrap();
        let m = tape.matmul(p, x).unwrap();
        let s = tape.sum_all(m).unwrap();
        tape.backward(s).unwrap();
        assert!(tape.value(x).bit_eq(&src));
    }

    #[test]
    fn non_finite_forward_is_an_error() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1], &[0.0]));
        assert!(matches!(tape.powf(x, -0.5), Err(Error::NonFinite(_))));
    }

    #[test]
    fn retained_interior_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 3.0]).with_requires_grad(true));
        let h = tape.scale(x, 2.0).unwrap();
        tape.retain_grad(h);
        let sq = tape.square(h).unwrap();
        let s = tape.sum_all(sq).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(h).unwrap().data(), &[4.0, 12.0]);
        assert_eq!(tape.grad(x).unwrap().data(), &[8.0, 24.0]);
    }
}
