//! Reverse-mode automatic differentiation over dense matrices, the frame-wise MLP built
//! on it and an Adam optimizer.

use ndarray::{Array2, Axis};
use rand::Rng;

use crate::attractor::{roll_pattern, Topology};
use crate::bytes::Reader;
use crate::error::{GcqError, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Tanh(Var),
    MeanSquares(Var),
    SumSquares(Var),
    StopGradient(Var),
    StraightThrough(Var),
    ConcatCols(Vec<Var>),
    RollGather {
        prototype: Var,
        topology: Topology,
        neurons: usize,
        shifts: Vec<(i64, i64)>,
    },
}

impl Op {
    fn parents(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::AddBias(a, b) | Op::Add(a, b) | Op::Sub(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::Relu(a)
            | Op::Tanh(a)
            | Op::MeanSquares(a)
            | Op::SumSquares(a)
            | Op::StopGradient(a)
            | Op::StraightThrough(a) => vec![*a],
            Op::ConcatCols(vs) => vs.clone(),
            Op::RollGather { prototype, .. } => vec![*prototype],
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Array2<f64>,
    op: Op,
}

/// Records operations in creation order for a single backward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients indexed by [`Var`]; `None` where no gradient reached a node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros of `shape` when nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var, shape: (usize, usize)) -> Array2<f64> {
        self.get(v).cloned().unwrap_or_else(|| Array2::zeros(shape))
    }

    pub fn take(&mut self, v: Var) -> Option<Array2<f64>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
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

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    /// Scalar value of a 1x1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn leaf(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    /// Adds a `1 x c` bias row to every row of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Var {
        let v = self.value(x) + self.value(bias);
        self.push(v, Op::AddBias(x, bias))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        self.push(v, Op::Sub(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) * c;
        self.push(v, Op::Scale(a, c))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    /// Mean of squared entries, as a 1x1 node.
    pub fn mean_squares(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let v = x.iter().map(|e| e * e).sum::<f64>() / x.len() as f64;
        self.push(Array2::from_elem((1, 1), v), Op::MeanSquares(a))
    }

    /// Sum of squared entries, as a 1x1 node.
    pub fn sum_squares(&mut self, a: Var) -> Var {
        let v = self.value(a).iter().map(|e| e * e).sum::<f64>();
        self.push(Array2::from_elem((1, 1), v), Op::SumSquares(a))
    }

    /// Passes the value through and blocks the gradient.
    pub fn stop_gradient(&mut self, a: Var) -> Var {
        let v = self.value(a).clone();
        self.push(v, Op::StopGradient(a))
    }

    /// Forward value `quantized`, backward copies the incoming gradient to `input`.
    pub fn straight_through(&mut self, input: Var, quantized: Array2<f64>) -> Result<Var> {
        if quantized.dim() != self.value(input).dim() {
            return Err(GcqError::DimensionMismatch {
                context: "straight-through shape",
                expected: self.value(input).len(),
                found: quantized.len(),
            });
        }
        Ok(self.push(quantized, Op::StraightThrough(input)))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("row counts agree");
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    /// Row `r` of the output is `prototype` (a `1 x d` row) rolled by `shifts[r]` whole
    /// neurons.
    pub fn roll_gather(&mut self, prototype: Var, topology: Topology, neurons: usize, shifts: Vec<(i64, i64)>) -> Var {
        let proto = self.value(prototype).row(0).to_vec();
        let d = proto.len();
        let mut v = Array2::zeros((shifts.len(), d));
        for (r, &s) in shifts.iter().enumerate() {
            for (k, x) in roll_pattern(&proto, topology, neurons, s).into_iter().enumerate() {
                v[[r, k]] = x;
            }
        }
        self.push(
            v,
            Op::RollGather {
                prototype,
                topology,
                neurons,
                shifts,
            },
        )
    }

    /// Reverse pass from a scalar `loss` node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Array2::ones(self.value(loss).dim()));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].clone() else { continue };
            let node = &self.nodes[idx];
            for p in node.op.parents() {
                if p.0 >= idx {
                    return Err(GcqError::GraphCycle(idx));
                }
            }
            let mut send = |v: Var, delta: Array2<f64>| match &mut grads[v.0] {
                Some(acc) => *acc += &delta,
                slot @ None => *slot = Some(delta),
            };
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    send(*a, g.dot(&self.value(*b).t()));
                    send(*b, self.value(*a).t().dot(&g));
                }
                Op::AddBias(x, b) => {
                    send(*b, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    send(*x, g);
                }
                Op::Add(a, b) => {
                    send(*a, g.clone());
                    send(*b, g);
                }
                Op::Sub(a, b) => {
                    send(*a, g.clone());
                    send(*b, -g);
                }
                Op::Scale(a, c) => send(*a, g * *c),
                Op::Relu(a) => {
                    let mask = self.value(*a).mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
                    send(*a, g * mask);
                }
                Op::Tanh(a) => {
                    let d = node.value.mapv(|y| 1.0 - y * y);
                    send(*a, g * d);
                }
                Op::MeanSquares(a) => {
                    let x = self.value(*a);
                    let c = 2.0 * g[[0, 0]] / x.len() as f64;
                    send(*a, x * c);
                }
                Op::SumSquares(a) => {
                    let c = 2.0 * g[[0, 0]];
                    send(*a, self.value(*a) * c);
                }
                Op::StopGradient(_) => {}
                Op::StraightThrough(a) => send(*a, g),
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let w = self.value(p).ncols();
                        send(p, g.slice(ndarray::s![.., start..start + w]).to_owned());
                        start += w;
                    }
                }
                Op::RollGather {
                    prototype,
                    topology,
                    neurons,
                    shifts,
                } => {
                    let d = self.value(*prototype).ncols();
                    let mut acc = vec![0.0; d];
                    for (r, &(sx, sy)) in shifts.iter().enumerate() {
                        let row = g.row(r).to_vec();
                        let back = roll_pattern(&row, *topology, *neurons, (-sx, -sy));
                        for (a, b) in acc.iter_mut().zip(back) {
                            *a += b;
                        }
                    }
                    send(*prototype, Array2::from_shape_vec((1, d), acc).unwrap());
                }
            }
        }
        Ok(Gradients { grads })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    pub fn id(self) -> u8 {
        match self {
            Activation::Relu => 0,
            Activation::Tanh => 1,
        }
    }

    pub fn from_id(id: u8) -> Option<Self> {
        match id {
            0 => Some(Activation::Relu),
            1 => Some(Activation::Tanh),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "relu" => Some(Activation::Relu),
            "tanh" => Some(Activation::Tanh),
            _ => None,
        }
    }

    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
        }
    }
}

/// Fully connected network applied row by row. Hidden layers use the activation, the
/// output layer is linear.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub activation: Activation,
    /// `in x out` per layer.
    pub weights: Vec<Array2<f64>>,
    /// `1 x out` per layer.
    pub biases: Vec<Array2<f64>>,
}

/// Tape handles of an [`Mlp`]'s parameters, in `weights[0], biases[0], ..` order.
#[derive(Debug, Clone)]
pub struct MlpVars {
    pub params: Vec<Var>,
}

pub const NET_MAGIC: &[u8; 4] = b"GCQN";

impl Mlp {
    /// Glorot-uniform weights, zero biases. `widths` includes input and output sizes.
    pub fn new<R: Rng>(widths: &[usize], activation: Activation, rng: &mut R) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(GcqError::InvalidParameter {
                name: "widths",
                reason: format!("need at least two positive widths, got {widths:?}"),
            });
        }
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for pair in widths.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            weights.push(Array2::from_shape_fn((fan_in, fan_out), |_| {
                rng.gen_range(-limit..limit)
            }));
            biases.push(Array2::zeros((1, fan_out)));
        }
        Ok(Mlp {
            activation,
            weights,
            biases,
        })
    }

    pub fn widths(&self) -> Vec<usize> {
        let mut w: Vec<usize> = self.weights.iter().map(|m| m.nrows()).collect();
        w.push(self.output_dim());
        w
    }

    pub fn input_dim(&self) -> usize {
        self.weights[0].nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.weights.last().unwrap().ncols()
    }

    pub fn parameter_count(&self) -> usize {
        self.weights.iter().map(|w| w.len()).sum::<usize>() + self.biases.iter().map(|b| b.len()).sum::<usize>()
    }

    /// Parameter matrices in the same order as [`MlpVars::params`].
    pub fn params_mut(&mut self) -> Vec<&mut Array2<f64>> {
        self.weights
            .iter_mut()
            .zip(self.biases.iter_mut())
            .flat_map(|(w, b)| [w, b])
            .collect()
    }

    pub fn params(&self) -> Vec<&Array2<f64>> {
        self.weights
            .iter()
            .zip(self.biases.iter())
            .flat_map(|(w, b)| [w, b])
            .collect()
    }

    fn check_input(&self, x: &Array2<f64>) -> Result<()> {
        if x.ncols() != self.input_dim() {
            return Err(GcqError::DimensionMismatch {
                context: "network input width",
                expected: self.input_dim(),
                found: x.ncols(),
            });
        }
        Ok(())
    }

    /// Inference without recording.
    pub fn forward(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        self.check_input(x)?;
        let last = self.weights.len() - 1;
        let mut h = x.clone();
        for (i, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            h = h.dot(w) + b;
            if i < last {
                h.mapv_inplace(|v| self.activation.apply(v));
            }
        }
        if h.iter().any(|v| !v.is_finite()) {
            return Err(GcqError::NonFinite("network output".into()));
        }
        Ok(h)
    }

    /// Records the forward pass and returns the output node plus parameter handles.
    pub fn forward_tape(&self, tape: &mut Tape, x: Var) -> Result<(Var, MlpVars)> {
        self.check_input(tape.value(x))?;
        let last = self.weights.len() - 1;
        let mut params = Vec::with_capacity(2 * self.weights.len());
        let mut h = x;
        for (i, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let wv = tape.leaf(w.clone());
            let bv = tape.leaf(b.clone());
            params.push(wv);
            params.push(bv);
            let z = tape.matmul(h, wv);
            h = tape.add_bias(z, bv);
            if i < last {
                h = match self.activation {
                    Activation::Relu => tape.relu(h),
                    Activation::Tanh => tape.tanh(h),
                };
            }
        }
        if tape.value(h).iter().any(|v| !v.is_finite()) {
            return Err(GcqError::NonFinite("network output".into()));
        }
        Ok((h, MlpVars { params }))
    }

    /// `GCQN` block: magic, layer count, widths, activation id, then each layer's
    /// row-major weights followed by its biases.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 8 * self.parameter_count());
        out.extend_from_slice(NET_MAGIC);
        out.extend_from_slice(&(self.weights.len() as u32).to_le_bytes());
        for w in self.widths() {
            out.extend_from_slice(&(w as u32).to_le_bytes());
        }
        out.push(self.activation.id());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            for v in w.iter().chain(b.iter()) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "GCQN");
        let net = Self::read(&mut r)?;
        r.finish()?;
        Ok(net)
    }

    pub(crate) fn read(r: &mut Reader<'_>) -> Result<Self> {
        r.magic(NET_MAGIC)?;
        let layers = r.u32()? as usize;
        if layers == 0 || layers > 64 {
            return Err(GcqError::decode("GCQN", format!("implausible layer count {layers}")));
        }
        let widths = (0..=layers)
            .map(|_| r.u32().map(|w| w as usize))
            .collect::<Result<Vec<_>>>()?;
        if widths.contains(&0) {
            return Err(GcqError::decode("GCQN", "zero layer width"));
        }
        let activation =
            Activation::from_id(r.u8()?).ok_or_else(|| GcqError::decode("GCQN", "unknown activation id"))?;
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for pair in widths.windows(2) {
            let count = pair[0]
                .checked_mul(pair[1])
                .ok_or_else(|| GcqError::decode("GCQN", "layer size overflow"))?;
            let w = r.f64s(count)?;
            let b = r.f64s(pair[1])?;
            if w.iter().chain(&b).any(|v| !v.is_finite()) {
                return Err(GcqError::decode("GCQN", "non-finite parameter"));
            }
            weights.push(Array2::from_shape_vec((pair[0], pair[1]), w).unwrap());
            biases.push(Array2::from_shape_vec((1, pair[1]), b).unwrap());
        }
        Ok(Mlp {
            activation,
            weights,
            biases,
        })
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub step: u64,
    pub first: Vec<Array2<f64>>,
    pub second: Vec<Array2<f64>>,
}

impl Adam {
    pub fn new(lr: f64, shapes: &[(usize, usize)]) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            first: shapes.iter().map(|&s| Array2::zeros(s)).collect(),
            second: shapes.iter().map(|&s| Array2::zeros(s)).collect(),
        }
    }

    pub fn for_params(lr: f64, params: &[&Array2<f64>]) -> Self {
        let shapes: Vec<_> = params.iter().map(|p| p.dim()).collect();
        Adam::new(lr, &shapes)
    }

    pub fn update(&mut self, params: &mut [&mut Array2<f64>], grads: &[Array2<f64>]) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != params.len() {
            return Err(GcqError::DimensionMismatch {
                context: "adam parameter count",
                expected: self.first.len(),
                found: params.len(),
            });
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.dim() != self.first[i].dim() || g.dim() != p.dim() {
                return Err(GcqError::DimensionMismatch {
                    context: "adam parameter shape",
                    expected: self.first[i].len(),
                    found: g.len(),
                });
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.epsilon);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.first.iter_mut().zip(self.second.iter_mut()))
        {
            ndarray::Zip::from(&mut **p)
                .and(g)
                .and(m)
                .and(v)
                .for_each(|p, &g, m, v| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    let mh = *m / c1;
                    let vh = *v / c2;
                    *p -= lr * mh / (vh.sqrt() + eps);
                });
        }
        Ok(())
    }
}
