//! Dense tensors and a tape-style compute graph with reverse-mode
//! differentiation. This is the numeric substrate for the whole crate:
//! every model forward pass is recorded on a [`Graph`] and gradients are
//! obtained by walking the tape backwards.

mod conv;

pub(crate) use conv::{mm_nn, transpose};

/// Benchmark hook for the matmul kernel (not part of the public contract).
#[doc(hidden)]
pub fn bench_mm(a: &[f32], b: &[f32], m: usize, k: usize, n: usize, c: &mut [f32]) {
    mm_nn(a, b, m, k, n, c);
}

use rand::Rng;

use crate::error::{Error, Result};
use crate::loss;
use crate::scalar::Scalar;

/// Dense n-dimensional array in row-major order with an optional gradient
/// buffer of the same shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<E: Scalar = f32> {
    shape: Vec<usize>,
    data: Vec<E>,
    pub grad: Option<Vec<E>>,
    pub requires_grad: bool,
}

impl<E: Scalar> Tensor<E> {
    pub fn new(shape: Vec<usize>, data: Vec<E>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::Dimension(format!(
                "tensor dimensions must be positive, got {shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Dimension(format!(
                "shape {shape:?} implies {numel} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape,
            data,
            grad: None,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![E::ZERO; numel],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn full(shape: Vec<usize>, value: E) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; numel],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn scalar(value: E) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn requires_grad(mut self, flag: bool) -> Self {
        self.requires_grad = flag;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [E] {
        &mut self.data
    }

    pub fn item(&self) -> E {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Reinterpret as a different shape with the same element count.
    pub fn reshaped(mut self, shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() || shape.contains(&0) {
            return Err(Error::Dimension(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    /// Convert elements via f64 (used to move between f32 training tensors
    /// and f64 gradient-check tensors).
    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| T::from_f64(v.to_f64())).collect(),
            grad: None,
            requires_grad: self.requires_grad,
        }
    }
}

/// Identifier of a node on a [`Graph`] tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug)]
pub(crate) enum Op<E: Scalar> {
    Leaf,
    Conv2d {
        input: NodeId,
        kernels: NodeId,
        bias: NodeId,
        stride: usize,
        padding: usize,
    },
    MaxPool2 {
        input: NodeId,
        argmax: Vec<u32>,
    },
    Relu {
        input: NodeId,
    },
    Sigmoid {
        input: NodeId,
    },
    Affine {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
    },
    Dropout {
        input: NodeId,
        mask: Vec<E>,
    },
    Flatten {
        input: NodeId,
    },
    Sum {
        input: NodeId,
    },
    /// Fused sigmoid + weighted binary cross-entropy (see the loss module
    /// for the math). `targets` is b x n row-major, `weights` has length n.
    WeightedBce {
        logits: NodeId,
        targets: Vec<E>,
        weights: Vec<E>,
        batch: usize,
    },
}

struct Node<E: Scalar> {
    value: Tensor<E>,
    op: Op<E>,
    requires_grad: bool,
}

/// Tape of executed ops in topological (creation) order. Backward walks the
/// tape in reverse, visiting each node exactly once; fan-out gradients
/// accumulate additively.
pub struct Graph<E: Scalar = f32> {
    nodes: Vec<Node<E>>,
}

impl<E: Scalar> Default for Graph<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Scalar> Graph<E> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Register an input or parameter tensor.
    pub fn leaf(&mut self, tensor: Tensor<E>) -> NodeId {
        let requires_grad = tensor.requires_grad;
        self.push(tensor, Op::Leaf, requires_grad)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<E> {
        &self.nodes[id.0].value
    }

    /// Gradient buffer of a node, populated by [`Graph::backward`].
    pub fn grad(&self, id: NodeId) -> Option<&[E]> {
        self.nodes[id.0].value.grad.as_deref()
    }

    pub(crate) fn op(&self, id: NodeId) -> &Op<E> {
        &self.nodes[id.0].op
    }

    fn push(&mut self, value: Tensor<E>, op: Op<E>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Cross-correlation of `input` (`c_in x h x w` or `b x c_in x h x w`)
    /// with `kernels` (`c_out x c_in x kh x kw`) plus per-channel `bias`.
    pub fn conv2d(
        &mut self,
        input: NodeId,
        kernels: NodeId,
        bias: NodeId,
        stride: usize,
        padding: usize,
    ) -> Result<NodeId> {
        let x = self.value(input);
        let k = self.value(kernels);
        let bi = self.value(bias);
        if stride < 1 {
            return Err(Error::Parameter("conv2d stride must be >= 1".into()));
        }
        let (b, c_in, h, w, batched) = split_spatial(x.shape())?;
        if k.shape().len() != 4 {
            return Err(Error::Dimension(format!(
                "conv2d kernels must be 4-d, got {:?}",
                k.shape()
            )));
        }
        let (c_out, kc, kh, kw) = (k.shape()[0], k.shape()[1], k.shape()[2], k.shape()[3]);
        if kc != c_in {
            return Err(Error::Dimension(format!(
                "conv2d kernel expects {kc} input channels, input has {c_in}"
            )));
        }
        if bi.shape() != [c_out] {
            return Err(Error::Dimension(format!(
                "conv2d bias must have shape [{c_out}], got {:?}",
                bi.shape()
            )));
        }
        if kh > h + 2 * padding || kw > w + 2 * padding {
            return Err(Error::Dimension(format!(
                "conv2d kernel {kh}x{kw} exceeds padded input {}x{}",
                h + 2 * padding,
                w + 2 * padding
            )));
        }
        if !x.all_finite() || !k.all_finite() {
            return Err(Error::Numeric("conv2d input is not finite".into()));
        }
        let h_out = conv::conv_out_dim(h, kh, stride, padding);
        let w_out = conv::conv_out_dim(w, kw, stride, padding);
        let out = conv::conv2d_forward(
            x.data(),
            b,
            c_in,
            h,
            w,
            k.data(),
            c_out,
            kh,
            kw,
            bi.data(),
            stride,
            padding,
        );
        let shape = if batched {
            vec![b, c_out, h_out, w_out]
        } else {
            vec![c_out, h_out, w_out]
        };
        let requires = self.needs(input) || self.needs(kernels) || self.needs(bias);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Conv2d {
                input,
                kernels,
                bias,
                stride,
                padding,
            },
            requires,
        ))
    }

    /// 2x2 stride-2 max pooling; spatial dims must be even.
    pub fn maxpool2(&mut self, input: NodeId) -> Result<NodeId> {
        let x = self.value(input);
        let (b, c, h, w, batched) = split_spatial(x.shape())?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Dimension(format!(
                "maxpool2 needs even spatial dims, got {h}x{w}"
            )));
        }
        let (out, argmax) = conv::maxpool2_forward(x.data(), b, c, h, w);
        let shape = if batched {
            vec![b, c, h / 2, w / 2]
        } else {
            vec![c, h / 2, w / 2]
        };
        let requires = self.needs(input);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::MaxPool2 { input, argmax },
            requires,
        ))
    }

    /// Elementwise max(0, x). The subgradient at exactly 0 is taken as 0.
    pub fn relu(&mut self, input: NodeId) -> NodeId {
        let x = self.value(input);
        let out: Vec<E> = x.data().iter().map(|&v| v.maximum(E::ZERO)).collect();
        let t = Tensor {
            shape: x.shape().to_vec(),
            data: out,
            grad: None,
            requires_grad: false,
        };
        let requires = self.needs(input);
        self.push(t, Op::Relu { input }, requires)
    }

    /// Numerically stable logistic, clamped strictly inside (0, 1).
    pub fn sigmoid(&mut self, input: NodeId) -> NodeId {
        let x = self.value(input);
        let out: Vec<E> = x.data().iter().map(|&v| sigmoid_scalar(v)).collect();
        let t = Tensor {
            shape: x.shape().to_vec(),
            data: out,
            grad: None,
            requires_grad: false,
        };
        let requires = self.needs(input);
        self.push(t, Op::Sigmoid { input }, requires)
    }

    /// `W x + b` for a single vector or a batch of row vectors.
    pub fn affine(&mut self, input: NodeId, weight: NodeId, bias: NodeId) -> Result<NodeId> {
        let x = self.value(input);
        let w = self.value(weight);
        let bi = self.value(bias);
        if w.shape().len() != 2 {
            return Err(Error::Dimension(format!(
                "affine weight must be 2-d, got {:?}",
                w.shape()
            )));
        }
        let (d_out, d_in) = (w.shape()[0], w.shape()[1]);
        let (batch, batched) = match x.shape() {
            [d] if *d == d_in => (1, false),
            [b, d] if *d == d_in => (*b, true),
            other => {
                return Err(Error::Dimension(format!(
                    "affine input {other:?} incompatible with weight [{d_out}, {d_in}]"
                )))
            }
        };
        if bi.shape() != [d_out] {
            return Err(Error::Dimension(format!(
                "affine bias must have shape [{d_out}], got {:?}",
                bi.shape()
            )));
        }
        let mut w_t = vec![E::ZERO; w.numel()];
        transpose(w.data(), d_out, d_in, &mut w_t);
        let mut out = vec![E::ZERO; batch * d_out];
        for row in out.chunks_mut(d_out) {
            row.copy_from_slice(bi.data());
        }
        mm_nn(x.data(), &w_t, batch, d_in, d_out, &mut out);
        let shape = if batched {
            vec![batch, d_out]
        } else {
            vec![d_out]
        };
        let requires = self.needs(input) || self.needs(weight) || self.needs(bias);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Affine {
                input,
                weight,
                bias,
            },
            requires,
        ))
    }

    /// Inverted dropout: in training mode each element is zeroed with
    /// probability `rate` and survivors are scaled by 1/(1-rate); in eval
    /// mode (or at rate 0) this is the identity.
    pub fn dropout<R: Rng>(
        &mut self,
        input: NodeId,
        rate: f64,
        training: bool,
        rng: &mut R,
    ) -> Result<NodeId> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Parameter(format!(
                "dropout rate must be in [0, 1), got {rate}"
            )));
        }
        if !training || rate == 0.0 {
            return Ok(input);
        }
        let scale = E::from_f64(1.0 / (1.0 - rate));
        let x = self.value(input);
        let mask: Vec<E> = (0..x.numel())
            .map(|_| {
                if rng.gen::<f64>() < rate {
                    E::ZERO
                } else {
                    scale
                }
            })
            .collect();
        let out: Vec<E> = x.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let t = Tensor {
            shape: x.shape().to_vec(),
            data: out,
            grad: None,
            requires_grad: false,
        };
        let requires = self.needs(input);
        Ok(self.push(t, Op::Dropout { input, mask }, requires))
    }

    /// Collapse all trailing axes: `[b, c, h, w]` -> `[b, c*h*w]`,
    /// `[c, h, w]` -> `[c*h*w]`.
    pub fn flatten(&mut self, input: NodeId) -> Result<NodeId> {
        let x = self.value(input);
        let shape = match x.shape() {
            [b, rest @ ..] if !rest.is_empty() => vec![*b, rest.iter().product()],
            other => {
                return Err(Error::Dimension(format!(
                    "flatten expects >= 2 dims, got {other:?}"
                )))
            }
        };
        let t = Tensor {
            shape,
            data: x.data().to_vec(),
            grad: None,
            requires_grad: false,
        };
        let requires = self.needs(input);
        Ok(self.push(t, Op::Flatten { input }, requires))
    }

    /// Sum of all elements, producing a scalar node.
    pub fn sum(&mut self, input: NodeId) -> NodeId {
        let x = self.value(input);
        let total = x.data().iter().fold(E::ZERO, |a, &v| a + v);
        let requires = self.needs(input);
        self.push(Tensor::scalar(total), Op::Sum { input }, requires)
    }

    /// Fused sigmoid + weighted binary cross-entropy over `b x n` logits.
    /// `targets` are mapped labels in [0, 1], `weights` one per class.
    pub fn weighted_bce(
        &mut self,
        logits: NodeId,
        targets: &[E],
        weights: &[E],
    ) -> Result<NodeId> {
        let x = self.value(logits);
        let (b, n) = match x.shape() {
            [b, n] => (*b, *n),
            [n] => (1, *n),
            other => {
                return Err(Error::Dimension(format!(
                    "weighted_bce expects [b, n] logits, got {other:?}"
                )))
            }
        };
        if targets.len() != b * n {
            return Err(Error::Dimension(format!(
                "weighted_bce targets len {} != {b}x{n}",
                targets.len()
            )));
        }
        if weights.len() != n {
            return Err(Error::Dimension(format!(
                "weighted_bce weights len {} != {n} classes",
                weights.len()
            )));
        }
        if !x.all_finite() {
            return Err(Error::Numeric("weighted_bce logits are not finite".into()));
        }
        let value = loss::fused_bce_forward(x.data(), targets, weights, b, n);
        let requires = self.needs(logits);
        Ok(self.push(
            Tensor::scalar(value),
            Op::WeightedBce {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                batch: b,
            },
            requires,
        ))
    }

    /// Reverse-mode sweep from a scalar `loss` node. Populates the `grad`
    /// buffer of every node that requires gradients (leaves included).
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss node, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<E>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![E::ONE]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            if !self.nodes[idx].requires_grad {
                grads[idx] = Some(g);
                continue;
            }
            self.backward_one(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }

        for (node, g) in self.nodes.iter_mut().zip(grads) {
            if node.requires_grad {
                node.value.grad = g;
            }
        }
        Ok(())
    }

    fn accumulate(grads: &mut [Option<Vec<E>>], id: NodeId, contribution: &[E]) {
        match &mut grads[id.0] {
            Some(buf) => {
                for (a, &v) in buf.iter_mut().zip(contribution) {
                    *a += v;
                }
            }
            slot => *slot = Some(contribution.to_vec()),
        }
    }

    fn accumulate_owned(grads: &mut [Option<Vec<E>>], id: NodeId, contribution: Vec<E>) {
        match &mut grads[id.0] {
            Some(buf) => {
                for (a, v) in buf.iter_mut().zip(contribution) {
                    *a += v;
                }
            }
            slot => *slot = Some(contribution),
        }
    }

    fn backward_one(
        &self,
        idx: usize,
        g: &[E],
        grads: &mut [Option<Vec<E>>],
    ) -> Result<()> {
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                kernels,
                bias,
                stride,
                padding,
            } => {
                let x = self.value(*input);
                let k = self.value(*kernels);
                let (b, c_in, h, w, _) = split_spatial(x.shape())?;
                let (c_out, _, kh, kw) =
                    (k.shape()[0], k.shape()[1], k.shape()[2], k.shape()[3]);
                let out = conv::conv2d_backward(
                    x.data(),
                    b,
                    c_in,
                    h,
                    w,
                    k.data(),
                    c_out,
                    kh,
                    kw,
                    g,
                    *stride,
                    *padding,
                    self.needs(*input),
                    self.needs(*kernels),
                    self.needs(*bias),
                );
                if let Some(di) = out.d_input {
                    Self::accumulate_owned(grads, *input, di);
                }
                if let Some(dk) = out.d_kernels {
                    Self::accumulate_owned(grads, *kernels, dk);
                }
                if let Some(db) = out.d_bias {
                    Self::accumulate_owned(grads, *bias, db);
                }
            }
            Op::MaxPool2 { input, argmax } => {
                if self.needs(*input) {
                    let mut di = vec![E::ZERO; self.value(*input).numel()];
                    for (o, &src) in argmax.iter().enumerate() {
                        di[src as usize] += g[o];
                    }
                    Self::accumulate_owned(grads, *input, di);
                }
            }
            Op::Relu { input } => {
                if self.needs(*input) {
                    let x = self.value(*input);
                    let di: Vec<E> = x
                        .data()
                        .iter()
                        .zip(g)
                        .map(|(&v, &go)| if v > E::ZERO { go } else { E::ZERO })
                        .collect();
                    Self::accumulate_owned(grads, *input, di);
                }
            }
            Op::Sigmoid { input } => {
                if self.needs(*input) {
                    let y = &self.nodes[idx].value;
                    let di: Vec<E> = y
                        .data()
                        .iter()
                        .zip(g)
                        .map(|(&s, &go)| go * s * (E::ONE - s))
                        .collect();
                    Self::accumulate_owned(grads, *input, di);
                }
            }
            Op::Affine {
                input,
                weight,
                bias,
            } => {
                let x = self.value(*input);
                let w = self.value(*weight);
                let (d_out, d_in) = (w.shape()[0], w.shape()[1]);
                let batch = x.numel() / d_in;
                if self.needs(*input) {
                    let mut dx = vec![E::ZERO; x.numel()];
                    mm_nn(g, w.data(), batch, d_out, d_in, &mut dx);
                    Self::accumulate_owned(grads, *input, dx);
                }
                if self.needs(*weight) {
                    let mut g_t = vec![E::ZERO; g.len()];
                    transpose(g, batch, d_out, &mut g_t);
                    let mut dw = vec![E::ZERO; w.numel()];
                    mm_nn(&g_t, x.data(), d_out, batch, d_in, &mut dw);
                    Self::accumulate_owned(grads, *weight, dw);
                }
                if self.needs(*bias) {
                    let mut db = vec![E::ZERO; d_out];
                    for row in g.chunks(d_out) {
                        for (a, &v) in db.iter_mut().zip(row) {
                            *a += v;
                        }
                    }
                    Self::accumulate_owned(grads, *bias, db);
                }
            }
            Op::Dropout { input, mask } => {
                if self.needs(*input) {
                    let di: Vec<E> = mask.iter().zip(g).map(|(&m, &go)| m * go).collect();
                    Self::accumulate_owned(grads, *input, di);
                }
            }
            Op::Flatten { input } => {
                if self.needs(*input) {
                    Self::accumulate(grads, *input, g);
                }
            }
            Op::Sum { input } => {
                if self.needs(*input) {
                    let di = vec![g[0]; self.value(*input).numel()];
                    Self::accumulate_owned(grads, *input, di);
                }
            }
            Op::WeightedBce {
                logits,
                targets,
                weights,
                batch,
            } => {
                if self.needs(*logits) {
                    let x = self.value(*logits);
                    let n = x.numel() / batch;
                    let mut di =
                        loss::fused_bce_grad_logits(x.data(), targets, weights, *batch, n);
                    for v in di.iter_mut() {
                        *v *= g[0];
                    }
                    Self::accumulate_owned(grads, *logits, di);
                }
            }
        }
        Ok(())
    }
}

/// Stable logistic: evaluates in the branch that never overflows, then
/// clamps strictly inside (0, 1) so downstream logs stay finite.
pub fn sigmoid_scalar<E: Scalar>(x: E) -> E {
    let s = if x >= E::ZERO {
        E::ONE / (E::ONE + (-x).exp())
    } else {
        let e = x.exp();
        e / (E::ONE + e)
    };
    if s >= E::ONE {
        E::BELOW_ONE
    } else if s <= E::ZERO {
        E::ABOVE_ZERO
    } else {
        s
    }
}

/// Interpret a shape as (batch, channels, height, width); 3-d shapes are a
/// single sample.
fn split_spatial(shape: &[usize]) -> Result<(usize, usize, usize, usize, bool)> {
    match shape {
        [c, h, w] => Ok((1, *c, *h, *w, false)),
        [b, c, h, w] => Ok((*b, *c, *h, *w, true)),
        other => Err(Error::Dimension(format!(
            "expected 3-d or 4-d spatial tensor, got {other:?}"
        ))),
    }
}

/// Central finite differences of a scalar function, the independent oracle
/// used by the gradient test suites. Meaningful only with `E = f64`.
pub fn finite_difference_gradient<E: Scalar>(
    f: &mut dyn FnMut(&Tensor<E>) -> Result<E>,
    x: &Tensor<E>,
    step: f64,
) -> Result<Tensor<E>> {
    let h = E::from_f64(step);
    let mut probe = x.clone();
    let mut grad = vec![E::ZERO; x.numel()];
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let fp = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let fm = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::Numeric(
                "finite differences hit a non-finite evaluation".into(),
            ));
        }
        grad[i] = E::from_f64((fp.to_f64() - fm.to_f64()) / (2.0 * step));
    }
    Tensor::new(x.shape().to_vec(), grad)
}
