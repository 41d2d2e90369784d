//! Wengert-list reverse-mode differentiation.
//!
//! Every primitive appends a node holding its output values plus whatever
//! it needs for the vector-Jacobian product. [`Tape::backward`] replays the
//! nodes in reverse recording order and returns the adjoints of the
//! gradient-requiring leaves.

use super::kernels::{self, ConvGeometry};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddRowBias(Var, Var),
    Conv2d {
        input: Var,
        kernel: Var,
        geo: ConvGeometry,
    },
    AddChannelBias(Var, Var),
    Relu(Var),
    MaxPool2 {
        input: Var,
        argmax: Vec<usize>,
    },
    Reshape(Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    values: Vec<f64>,
    requires_grad: bool,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every recorded node; handles from before the call are invalid.
    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    fn push(&mut self, shape: Vec<usize>, values: Vec<f64>, requires_grad: bool, op: Op) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        self.nodes.push(Node {
            shape,
            values,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a copy of `tensor`. It is differentiated against only when
    /// the tensor itself requires gradients.
    pub fn leaf(&mut self, tensor: &Tensor) -> Var {
        self.push(
            tensor.shape().to_vec(),
            tensor.values().to_vec(),
            tensor.requires_grad(),
            Op::Leaf,
        )
    }

    /// Records a copy of `tensor` as a gradient-requiring leaf, whatever
    /// its own flag says.
    pub fn param(&mut self, tensor: &Tensor) -> Var {
        self.push(
            tensor.shape().to_vec(),
            tensor.values().to_vec(),
            true,
            Op::Leaf,
        )
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].values
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Scalar value of a one-element node.
    pub fn scalar(&self, v: Var) -> Result<f64> {
        match self.value(v) {
            [x] => Ok(*x),
            _ => Err(Error::Usage(format!(
                "expected a scalar, got shape {:?}",
                self.shape(v)
            ))),
        }
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        Tensor::new(self.shape(v).to_vec(), self.value(v).to_vec())
            .expect("recorded node shapes are consistent")
    }

    fn rg(&self, a: Var) -> bool {
        self.nodes[a.0].requires_grad
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Dimension {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let values = kernels::matmul(self.value(a), self.value(b), m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![m, n], values, rg, Op::MatMul(a, b)))
    }

    /// `x[N×D] + bias[D]` broadcast over rows.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(bias));
        if sx.len() != 2 || sb.len() != 1 || sx[1] != sb[0] {
            return Err(Error::Dimension {
                op: "add_row_bias",
                lhs: sx.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let shape = sx.to_vec();
        let b = self.value(bias);
        let values: Vec<f64> = self
            .value(x)
            .chunks(shape[1])
            .flat_map(|row| row.iter().zip(b).map(|(v, bv)| v + bv))
            .collect();
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(shape, values, rg, Op::AddRowBias(x, bias)))
    }

    /// Zero-padded cross-correlation of `input[N×C×H×W]` with
    /// `kernel[F×C×kh×kw]`.
    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (si, sk) = (self.shape(input), self.shape(kernel));
        if si.len() != 4 || sk.len() != 4 || si[1] != sk[1] {
            return Err(Error::Dimension {
                op: "conv2d",
                lhs: si.to_vec(),
                rhs: sk.to_vec(),
            });
        }
        let geo = ConvGeometry::new(si[1], si[2], si[3], sk[2], sk[3], stride, padding).ok_or_else(|| {
            Error::Config(format!(
                "conv2d with input {si:?}, kernel {sk:?}, stride {stride}, padding {padding} has no valid output"
            ))
        })?;
        let (batch, filters) = (si[0], sk[0]);
        let values =
            kernels::conv2d_forward(self.value(input), self.value(kernel), batch, filters, &geo);
        let rg = self.rg(input) || self.rg(kernel);
        Ok(self.push(
            vec![batch, filters, geo.out_h, geo.out_w],
            values,
            rg,
            Op::Conv2d { input, kernel, geo },
        ))
    }

    /// `x[N×F×H×W] + bias[F]` broadcast per channel.
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(bias));
        if sx.len() != 4 || sb.len() != 1 || sx[1] != sb[0] {
            return Err(Error::Dimension {
                op: "add_channel_bias",
                lhs: sx.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let shape = sx.to_vec();
        let plane = shape[2] * shape[3];
        let channels = shape[1];
        let b = self.value(bias);
        let values: Vec<f64> = self
            .value(x)
            .chunks(plane)
            .enumerate()
            .flat_map(|(i, chunk)| {
                let bv = b[i % channels];
                chunk.iter().map(move |v| v + bv)
            })
            .collect();
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(shape, values, rg, Op::AddChannelBias(x, bias)))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let values = self
            .value(x)
            .iter()
            .map(|&v| if v > 0.0 { v } else { 0.0 })
            .collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        self.push(shape, values, rg, Op::Relu(x))
    }

    pub fn maxpool2x2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || s[2] < 2 || s[3] < 2 {
            return Err(Error::Dimension {
                op: "maxpool2x2",
                lhs: s,
                rhs: vec![2, 2],
            });
        }
        let (values, argmax) = kernels::maxpool2x2(self.value(x), &s);
        let rg = self.rg(x);
        Ok(self.push(
            vec![s[0], s[1], s[2] / 2, s[3] / 2],
            values,
            rg,
            Op::MaxPool2 { input: x, argmax },
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(x).len() {
            return Err(Error::Dimension {
                op: "reshape",
                lhs: self.shape(x).to_vec(),
                rhs: shape,
            });
        }
        let values = self.value(x).to_vec();
        let rg = self.rg(x);
        Ok(self.push(shape, values, rg, Op::Reshape(x)))
    }

    /// Elementwise product of equally shaped values.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dimension {
                op: "mul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let values = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(shape, values, rg, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let values = self.value(x).iter().map(|v| v * factor).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        self.push(shape, values, rg, Op::Scale(x, factor))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).iter().sum();
        let rg = self.rg(x);
        self.push(vec![1], vec![total], rg, Op::Sum(x))
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits);
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::Dimension {
                op: "softmax_cross_entropy",
                lhs: s.to_vec(),
                rhs: vec![labels.len()],
            });
        }
        let classes = s[1];
        if let Some(bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Input(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        let (loss, probs) = softmax_cross_entropy_values(self.value(logits), labels, classes);
        let rg = self.rg(logits);
        Ok(self.push(
            vec![1],
            vec![loss],
            rg,
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    /// Reverse sweep from the scalar `loss`. Adjoints of intermediate nodes
    /// are discarded; the returned [`Gradients`] holds one entry per
    /// gradient-requiring leaf reachable from `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let node = &self.nodes[loss.0];
        if node.values.len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                node.shape
            )));
        }
        let mut adjoints: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        let mut visited = Vec::new();
        if node.requires_grad {
            adjoints[loss.0] = Some(vec![1.0]);
        }
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(grad) = adjoints[idx].take() else {
                continue;
            };
            visited.push(idx);
            self.backprop_node(node, &grad, &mut adjoints);
        }
        let grads = adjoints
            .into_iter()
            .enumerate()
            .map(|(i, g)| match self.nodes[i].op {
                Op::Leaf if self.nodes[i].requires_grad => g,
                _ => None,
            })
            .collect();
        Ok(Gradients { grads, visited })
    }

    fn backprop_node(&self, node: &Node, grad: &[f64], adj: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if self.rg(*a) {
                    let da = slot(adj, *a, m * k);
                    kernels::matmul_bt_acc(grad, self.value(*b), m, n, k, da);
                }
                if self.rg(*b) {
                    let db = slot(adj, *b, k * n);
                    kernels::matmul_at_acc(self.value(*a), grad, m, k, n, db);
                }
            }
            Op::AddRowBias(x, bias) => {
                if self.rg(*x) {
                    add_into(slot(adj, *x, grad.len()), grad);
                }
                if self.rg(*bias) {
                    let width = self.shape(*bias)[0];
                    let db = slot(adj, *bias, width);
                    for row in grad.chunks(width) {
                        add_into(db, row);
                    }
                }
            }
            Op::Conv2d { input, kernel, geo } => {
                let batch = self.shape(*input)[0];
                let filters = self.shape(*kernel)[0];
                let (in_len, out_len) = (geo.input_len(), filters * geo.positions());
                let (patch, positions) = (geo.patch_len(), geo.positions());
                let input_values = self.value(*input);
                let kernel_values = self.value(*kernel);
                let mut dkernel = self.rg(*kernel).then(|| vec![0.0; kernel_values.len()]);
                let mut dinput = self.rg(*input).then(|| vec![0.0; input_values.len()]);
                for n in 0..batch {
                    let g = &grad[n * out_len..(n + 1) * out_len];
                    if let Some(dk) = dkernel.as_mut() {
                        let cols = geo.im2col(&input_values[n * in_len..(n + 1) * in_len]);
                        kernels::matmul_bt_acc(g, &cols, filters, positions, patch, dk);
                    }
                    if let Some(di) = dinput.as_mut() {
                        let mut dcols = vec![0.0; patch * positions];
                        kernels::matmul_at_acc(
                            kernel_values,
                            g,
                            filters,
                            patch,
                            positions,
                            &mut dcols,
                        );
                        geo.col2im_acc(&dcols, &mut di[n * in_len..(n + 1) * in_len]);
                    }
                }
                if let Some(dk) = dkernel {
                    add_into(slot(adj, *kernel, dk.len()), &dk);
                }
                if let Some(di) = dinput {
                    add_into(slot(adj, *input, di.len()), &di);
                }
            }
            Op::AddChannelBias(x, bias) => {
                if self.rg(*x) {
                    add_into(slot(adj, *x, grad.len()), grad);
                }
                if self.rg(*bias) {
                    let channels = self.shape(*bias)[0];
                    let plane = node.shape[2] * node.shape[3];
                    let db = slot(adj, *bias, channels);
                    for (i, chunk) in grad.chunks(plane).enumerate() {
                        db[i % channels] += chunk.iter().sum::<f64>();
                    }
                }
            }
            Op::Relu(x) => {
                let xs = self.value(*x);
                let dx = slot(adj, *x, xs.len());
                for ((d, &g), &v) in dx.iter_mut().zip(grad).zip(xs) {
                    if v > 0.0 {
                        *d += g;
                    }
                }
            }
            Op::MaxPool2 { input, argmax } => {
                let dx = slot(adj, *input, self.value(*input).len());
                for (&src, &g) in argmax.iter().zip(grad) {
                    dx[src] += g;
                }
            }
            Op::Reshape(x) => add_into(slot(adj, *x, grad.len()), grad),
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    let other = self.value(*b);
                    let da = slot(adj, *a, grad.len());
                    for ((d, g), o) in da.iter_mut().zip(grad).zip(other) {
                        *d += g * o;
                    }
                }
                if self.rg(*b) {
                    let other = self.value(*a);
                    let db = slot(adj, *b, grad.len());
                    for ((d, g), o) in db.iter_mut().zip(grad).zip(other) {
                        *d += g * o;
                    }
                }
            }
            Op::Scale(x, factor) => {
                let dx = slot(adj, *x, grad.len());
                for (d, g) in dx.iter_mut().zip(grad) {
                    *d += g * factor;
                }
            }
            Op::Sum(x) => {
                let dx = slot(adj, *x, self.value(*x).len());
                dx.iter_mut().for_each(|d| *d += grad[0]);
            }
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let classes = self.shape(*logits)[1];
                let scale = grad[0] / labels.len() as f64;
                let dx = slot(adj, *logits, probs.len());
                for (i, &label) in labels.iter().enumerate() {
                    for c in 0..classes {
                        let onehot = if c == label { 1.0 } else { 0.0 };
                        dx[i * classes + c] += scale * (probs[i * classes + c] - onehot);
                    }
                }
            }
        }
    }
}

fn slot(adj: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut [f64] {
    adj[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Loss value and row-wise softmax probabilities, stabilised by subtracting
/// each row's maximum.
pub(crate) fn softmax_cross_entropy_values(
    logits: &[f64],
    labels: &[usize],
    classes: usize,
) -> (f64, Vec<f64>) {
    let mut probs = Vec::with_capacity(logits.len());
    let mut total = 0.0;
    for (row, &label) in logits.chunks(classes).zip(labels) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        total += z.ln() + max - row[label];
        probs.extend(exps.iter().map(|e| e / z));
    }
    (total / labels.len() as f64, probs)
}

/// Leaf adjoints produced by one [`Tape::backward`] call.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    visited: Vec<usize>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds the adjoint of `v` into `tensor`'s gradient buffer. Leaves that
    /// received no gradient contribute nothing.
    pub fn accumulate_into(&self, v: Var, tensor: &mut Tensor) -> Result<()> {
        match self.get(v) {
            Some(g) => tensor.accumulate_grad(g),
            None => Ok(()),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.grads.iter().all(Option::is_none)
    }

    /// Indices of the non-leaf nodes whose vector-Jacobian products ran,
    /// in execution order.
    pub fn visited(&self) -> &[usize] {
        &self.visited
    }
}
