use super::kernels::{self, ConvDims};
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};
use crate::geometry::normalized_axis;

/// Slope of the negative half of the leaky ReLU.
pub const LEAKY_SLOPE: f64 = 0.1;

/// Allowed deviation of a probability map's mass from 1 at the DSNT input.
pub const DSNT_MASS_TOL: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    LeakyRelu,
    Sigmoid,
    Tanh,
    Softplus,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceKind {
    Mean,
    MeanAbs,
    Sum,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d { input: Var, kernel: Var, bias: Var },
    MaxPool2 { input: Var, argmax: Vec<usize> },
    Upsample2 { input: Var },
    ConcatChannels { a: Var, b: Var },
    ConcatBatch { inputs: Vec<Var> },
    SelectBatch { input: Var, indices: Vec<usize> },
    Act { input: Var, kind: Activation },
    SpatialSoftmax { input: Var },
    Dsnt { input: Var },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Reduce { input: Var, kind: ReduceKind },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op,
    requires_grad: bool,
}

/// Single-owner reverse-mode tape. Nodes are appended in evaluation order, so the
/// node index is a topological order of the graph.
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Adjoints produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient for `v`; zeros when the loss does not depend on it.
    pub fn get(&self, v: Var) -> Tensor<T> {
        let shape = self.shapes[v.0].clone();
        match &self.grads[v.0] {
            Some(g) => Tensor::new(shape, g.clone()).unwrap(),
            None => Tensor::zeros(shape),
        }
    }

    pub fn take(&mut self, v: Var) -> Vec<T> {
        let n: usize = self.shapes[v.0].iter().product();
        self.grads[v.0].take().unwrap_or_else(|| vec![T::zero(); n])
    }
}

fn check_finite<T: Real>(data: &[T], op: &str) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric {
            layer: op.to_string(),
            detail: format!("non-finite value produced by {op}"),
        })
    }
}

fn same_shape<T: Real>(a: &Tensor<T>, b: &Tensor<T>, op: &str) -> Result<()> {
    if a.shape() == b.shape() {
        Ok(())
    } else {
        Err(Error::shape(format!(
            "{op}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )))
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d = *d + *s;
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op, inputs: &[Var], name: &str) -> Result<Var> {
        check_finite(value.data(), name)?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Stride-1 zero-padded 3×3 cross-correlation. `kernel` is `C_out×C_in×3×3`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var) -> Result<Var> {
        let [n, c_in, h, w] = self.value(input).dims4()?;
        let ks = self.value(kernel).shape().to_vec();
        if ks.len() != 4 || ks[2] != 3 || ks[3] != 3 {
            return Err(Error::shape(format!(
                "conv2d kernel must be C_out×C_in×3×3, got {ks:?}"
            )));
        }
        if ks[1] != c_in {
            return Err(Error::shape(format!(
                "conv2d kernel expects {} input channels, input has {c_in}",
                ks[1]
            )));
        }
        let c_out = ks[0];
        if self.value(bias).shape() != [c_out] {
            return Err(Error::shape(format!(
                "conv2d bias must have shape [{c_out}], got {:?}",
                self.value(bias).shape()
            )));
        }
        let dims = ConvDims {
            n,
            c_in,
            c_out,
            h,
            w,
        };
        let out = kernels::conv2d_forward(
            &dims,
            self.value(input).data(),
            self.value(kernel).data(),
            self.value(bias).data(),
        );
        let value = Tensor::new(vec![n, c_out, h, w], out)?;
        self.push(
            value,
            Op::Conv2d {
                input,
                kernel,
                bias,
            },
            &[input, kernel, bias],
            "conv2d",
        )
    }

    pub fn maxpool2(&mut self, input: Var) -> Result<Var> {
        let [n, c, h, w] = self.value(input).dims4()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape(format!(
                "maxpool2 needs even H and W, got {h}×{w}"
            )));
        }
        let (out, argmax) = kernels::maxpool2_forward(self.value(input).data(), n * c, h, w);
        let value = Tensor::new(vec![n, c, h / 2, w / 2], out)?;
        self.push(value, Op::MaxPool2 { input, argmax }, &[input], "maxpool2")
    }

    pub fn upsample2(&mut self, input: Var) -> Result<Var> {
        let [n, c, h, w] = self.value(input).dims4()?;
        let out = kernels::upsample2_forward(self.value(input).data(), n * c, h, w);
        let value = Tensor::new(vec![n, c, 2 * h, 2 * w], out)?;
        self.push(value, Op::Upsample2 { input }, &[input], "upsample2")
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let [na, ca, ha, wa] = self.value(a).dims4()?;
        let [nb, cb, hb, wb] = self.value(b).dims4()?;
        if (na, ha, wa) != (nb, hb, wb) {
            return Err(Error::shape(format!(
                "concat_channels: {:?} and {:?} disagree outside the channel axis",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let hw = ha * wa;
        let mut out = Vec::with_capacity(na * (ca + cb) * hw);
        let (da, db) = (self.value(a).data(), self.value(b).data());
        for n in 0..na {
            out.extend_from_slice(&da[n * ca * hw..(n + 1) * ca * hw]);
            out.extend_from_slice(&db[n * cb * hw..(n + 1) * cb * hw]);
        }
        let value = Tensor::new(vec![na, ca + cb, ha, wa], out)?;
        self.push(
            value,
            Op::ConcatChannels { a, b },
            &[a, b],
            "concat_channels",
        )
    }

    /// Stacks tensors along the leading (batch) axis.
    pub fn concat_batch(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::invalid("concat_batch of nothing"))?;
        let tail = self.value(*first).shape()[1..].to_vec();
        let mut lead = 0;
        let mut out = Vec::new();
        for v in inputs {
            let t = self.value(*v);
            if t.shape().is_empty() || t.shape()[1..] != tail[..] {
                return Err(Error::shape(format!(
                    "concat_batch: {:?} does not match trailing dims {tail:?}",
                    t.shape()
                )));
            }
            lead += t.shape()[0];
            out.extend_from_slice(t.data());
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        let value = Tensor::new(shape, out)?;
        self.push(
            value,
            Op::ConcatBatch {
                inputs: inputs.to_vec(),
            },
            inputs,
            "concat_batch",
        )
    }

    /// Gathers entries of the leading axis; indices may repeat.
    pub fn select_batch(&mut self, input: Var, indices: &[usize]) -> Result<Var> {
        let t = self.value(input);
        let lead = *t
            .shape()
            .first()
            .ok_or_else(|| Error::shape("select_batch on a scalar"))?;
        let stride: usize = t.shape()[1..].iter().product();
        let mut out = Vec::with_capacity(indices.len() * stride);
        for &i in indices {
            if i >= lead {
                return Err(Error::shape(format!(
                    "select_batch index {i} out of {lead}"
                )));
            }
            out.extend_from_slice(&t.data()[i * stride..(i + 1) * stride]);
        }
        let mut shape = t.shape().to_vec();
        shape[0] = indices.len();
        let value = Tensor::new(shape, out)?;
        self.push(
            value,
            Op::SelectBatch {
                input,
                indices: indices.to_vec(),
            },
            &[input],
            "select_batch",
        )
    }

    pub fn activation(&mut self, kind: Activation, input: Var) -> Result<Var> {
        let x = self.value(input);
        let slope = T::from_f64_lossy(LEAKY_SLOPE);
        let data: Vec<T> = match kind {
            Activation::LeakyRelu => x
                .data()
                .iter()
                .map(|&v| if v > T::zero() { v } else { v * slope })
                .collect(),
            Activation::Sigmoid => x
                .data()
                .iter()
                .map(|&v| T::from_f64_lossy(sigmoid(v.as_f64())))
                .collect(),
            Activation::Tanh => x.data().iter().map(|&v| v.tanh()).collect(),
            Activation::Softplus => x
                .data()
                .iter()
                .map(|&v| T::from_f64_lossy(softplus(v.as_f64())))
                .collect(),
        };
        let value = Tensor::new(x.shape().to_vec(), data)?;
        let name = match kind {
            Activation::LeakyRelu => "leaky_relu",
            Activation::Sigmoid => "sigmoid",
            Activation::Tanh => "tanh",
            Activation::Softplus => "softplus",
        };
        self.push(value, Op::Act { input, kind }, &[input], name)
    }

    /// Softmax over the spatial extent of each `(n, k)` channel.
    pub fn spatial_softmax(&mut self, input: Var) -> Result<Var> {
        let [_, _, h, w] = self.value(input).dims4()?;
        let x = self.value(input);
        let hw = h * w;
        let mut out = Vec::with_capacity(x.len());
        for plane in x.data().chunks_exact(hw) {
            let m = plane.iter().copied().fold(T::neg_infinity(), T::max);
            let start = out.len();
            let mut z = T::zero();
            for &v in plane {
                let e = (v - m).exp();
                z = z + e;
                out.push(e);
            }
            for v in &mut out[start..] {
                *v = *v / z;
            }
        }
        let value = Tensor::new(x.shape().to_vec(), out)?;
        self.push(
            value,
            Op::SpatialSoftmax { input },
            &[input],
            "spatial_softmax",
        )
    }

    /// Expected normalized `(x, y)` coordinate of each probability map: `N×K×H×W → N×K×2`.
    pub fn dsnt(&mut self, input: Var) -> Result<Var> {
        let [n, k, h, w] = self.value(input).dims4()?;
        let x = self.value(input);
        let xs: Vec<T> = (0..w)
            .map(|c| T::from_f64_lossy(normalized_axis(c, w)))
            .collect();
        let ys: Vec<T> = (0..h)
            .map(|r| T::from_f64_lossy(normalized_axis(r, h)))
            .collect();
        let mut out = Vec::with_capacity(n * k * 2);
        for (idx, plane) in x.data().chunks_exact(h * w).enumerate() {
            let mass: f64 = plane.iter().map(|v| v.as_f64()).sum();
            if plane.iter().any(|v| *v < T::zero()) || (mass - 1.0).abs() > DSNT_MASS_TOL {
                return Err(Error::invalid(format!(
                    "dsnt channel {idx} is not a probability map (mass {mass})"
                )));
            }
            let (mut ex, mut ey) = (T::zero(), T::zero());
            for r in 0..h {
                let row = &plane[r * w..(r + 1) * w];
                let mut row_x = T::zero();
                let mut row_mass = T::zero();
                for (c, &p) in row.iter().enumerate() {
                    row_x = row_x + p * xs[c];
                    row_mass = row_mass + p;
                }
                ex = ex + row_x;
                ey = ey + row_mass * ys[r];
            }
            out.push(ex);
            out.push(ey);
        }
        let value = Tensor::new(vec![n, k, 2], out)?;
        self.push(value, Op::Dsnt { input }, &[input], "dsnt")
    }

    fn binary(&mut self, a: Var, b: Var, name: &str, f: impl Fn(T, T) -> T) -> Result<Vec<T>> {
        same_shape(self.value(a), self.value(b), name)?;
        Ok(self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let data = self.binary(a, b, "add", |x, y| x + y)?;
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        self.push(value, Op::Add(a, b), &[a, b], "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let data = self.binary(a, b, "sub", |x, y| x - y)?;
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        self.push(value, Op::Sub(a, b), &[a, b], "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let data = self.binary(a, b, "mul", |x, y| x * y)?;
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        self.push(value, Op::Mul(a, b), &[a, b], "mul")
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let k = T::from_f64_lossy(s);
        let x = self.value(a);
        let value = Tensor::new(
            x.shape().to_vec(),
            x.data().iter().map(|&v| v * k).collect(),
        )?;
        self.push(value, Op::Scale(a, s), &[a], "scale")
    }

    /// Reduces to a rank-0 scalar. Accumulation runs sequentially in `f64`.
    pub fn reduce(&mut self, kind: ReduceKind, input: Var) -> Result<Var> {
        let x = self.value(input);
        if x.is_empty() {
            return Err(Error::invalid("reduce over an empty tensor"));
        }
        let n = x.len() as f64;
        let acc = match kind {
            ReduceKind::Sum => x.data().iter().map(|v| v.as_f64()).sum::<f64>(),
            ReduceKind::Mean => x.data().iter().map(|v| v.as_f64()).sum::<f64>() / n,
            ReduceKind::MeanAbs => x.data().iter().map(|v| v.as_f64().abs()).sum::<f64>() / n,
        };
        let value = Tensor::scalar(T::from_f64_lossy(acc));
        self.push(value, Op::Reduce { input, kind }, &[input], "reduce")
    }

    pub fn sum(&mut self, input: Var) -> Result<Var> {
        self.reduce(ReduceKind::Sum, input)
    }

    pub fn mean(&mut self, input: Var) -> Result<Var> {
        self.reduce(ReduceKind::Mean, input)
    }

    pub fn mean_abs(&mut self, input: Var) -> Result<Var> {
        self.reduce(ReduceKind::MeanAbs, input)
    }

    /// Reverse sweep from a scalar `loss`. Each node is visited once, in decreasing
    /// index order; fan-out adjoints are summed in that fixed order.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else {
                continue;
            };
            self.adjoint(id, &g, &mut grads);
        }
        // Only keep leaf adjoints; interior ones are implementation detail.
        for (id, node) in self.nodes.iter().enumerate() {
            if !(matches!(node.op, Op::Leaf) && node.requires_grad) {
                grads[id] = None;
            }
        }
        Ok(Gradients {
            grads,
            shapes: self
                .nodes
                .iter()
                .map(|n| n.value.shape().to_vec())
                .collect(),
        })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], v: Var, f: impl FnOnce(&mut [T])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let n = self.nodes[v.0].value.len();
        let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); n]);
        f(slot);
    }

    fn adjoint(&self, id: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[id];
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                kernel,
                bias,
            } => {
                let x = self.value(*input);
                let [n, c_in, h, w] = x.dims4().unwrap();
                let c_out = self.value(*kernel).shape()[0];
                let dims = ConvDims {
                    n,
                    c_in,
                    c_out,
                    h,
                    w,
                };
                let mut take = |v: Var| {
                    if self.nodes[v.0].requires_grad {
                        let len = self.nodes[v.0].value.len();
                        Some(grads[v.0].take().unwrap_or_else(|| vec![T::zero(); len]))
                    } else {
                        None
                    }
                };
                let mut dx = take(*input);
                let mut dk = take(*kernel);
                let mut db = take(*bias);
                kernels::conv2d_backward(
                    &dims,
                    x.data(),
                    self.value(*kernel).data(),
                    g,
                    dx.as_deref_mut(),
                    dk.as_deref_mut(),
                    db.as_deref_mut(),
                );
                // Restore in the reverse order of taking so shared vars keep one slot.
                if db.is_some() {
                    grads[bias.0] = db;
                }
                if dk.is_some() {
                    grads[kernel.0] = dk;
                }
                if dx.is_some() {
                    grads[input.0] = dx;
                }
            }
            Op::MaxPool2 { input, argmax } => {
                self.accumulate(grads, *input, |dx| {
                    for (gi, &src) in g.iter().zip(argmax) {
                        dx[src] = dx[src] + *gi;
                    }
                });
            }
            Op::Upsample2 { input } => {
                let [n, c, h, w] = self.value(*input).dims4().unwrap();
                self.accumulate(grads, *input, |dx| {
                    kernels::upsample2_backward(g, n * c, h, w, dx)
                });
            }
            Op::ConcatChannels { a, b } => {
                let [n, ca, h, w] = self.value(*a).dims4().unwrap();
                let cb = self.value(*b).shape()[1];
                let hw = h * w;
                let c = ca + cb;
                self.accumulate(grads, *a, |da| {
                    for i in 0..n {
                        add_into(
                            &mut da[i * ca * hw..(i + 1) * ca * hw],
                            &g[i * c * hw..][..ca * hw],
                        );
                    }
                });
                self.accumulate(grads, *b, |db| {
                    for i in 0..n {
                        add_into(
                            &mut db[i * cb * hw..(i + 1) * cb * hw],
                            &g[(i * c + ca) * hw..][..cb * hw],
                        );
                    }
                });
            }
            Op::ConcatBatch { inputs } => {
                let mut offset = 0;
                for v in inputs {
                    let len = self.value(*v).len();
                    self.accumulate(grads, *v, |dv| add_into(dv, &g[offset..offset + len]));
                    offset += len;
                }
            }
            Op::SelectBatch { input, indices } => {
                let stride: usize = self.value(*input).shape()[1..].iter().product();
                self.accumulate(grads, *input, |dx| {
                    for (k, &i) in indices.iter().enumerate() {
                        add_into(
                            &mut dx[i * stride..(i + 1) * stride],
                            &g[k * stride..][..stride],
                        );
                    }
                });
            }
            Op::Act { input, kind } => {
                let x = self.value(*input).data();
                let slope = T::from_f64_lossy(LEAKY_SLOPE);
                self.accumulate(grads, *input, |dx| match kind {
                    Activation::LeakyRelu => {
                        for ((d, &gi), &xi) in dx.iter_mut().zip(g).zip(x) {
                            *d = *d + if xi > T::zero() { gi } else { gi * slope };
                        }
                    }
                    Activation::Sigmoid => {
                        for ((d, &gi), &y) in dx.iter_mut().zip(g).zip(out) {
                            *d = *d + gi * y * (T::one() - y);
                        }
                    }
                    Activation::Tanh => {
                        for ((d, &gi), &y) in dx.iter_mut().zip(g).zip(out) {
                            *d = *d + gi * (T::one() - y * y);
                        }
                    }
                    Activation::Softplus => {
                        for ((d, &gi), &xi) in dx.iter_mut().zip(g).zip(x) {
                            *d = *d + gi * T::from_f64_lossy(sigmoid(xi.as_f64()));
                        }
                    }
                });
            }
            Op::SpatialSoftmax { input } => {
                let [_, _, h, w] = self.value(*input).dims4().unwrap();
                let hw = h * w;
                self.accumulate(grads, *input, |dx| {
                    for ((dplane, gplane), yplane) in dx
                        .chunks_exact_mut(hw)
                        .zip(g.chunks_exact(hw))
                        .zip(out.chunks_exact(hw))
                    {
                        let dot: T = gplane.iter().zip(yplane).map(|(&a, &b)| a * b).sum();
                        for ((d, &gi), &y) in dplane.iter_mut().zip(gplane).zip(yplane) {
                            *d = *d + y * (gi - dot);
                        }
                    }
                });
            }
            Op::Dsnt { input } => {
                let [_, _, h, w] = self.value(*input).dims4().unwrap();
                let xs: Vec<T> = (0..w)
                    .map(|c| T::from_f64_lossy(normalized_axis(c, w)))
                    .collect();
                let ys: Vec<T> = (0..h)
                    .map(|r| T::from_f64_lossy(normalized_axis(r, h)))
                    .collect();
                self.accumulate(grads, *input, |dx| {
                    for (plane, gxy) in dx.chunks_exact_mut(h * w).zip(g.chunks_exact(2)) {
                        for r in 0..h {
                            let gy = gxy[1] * ys[r];
                            for c in 0..w {
                                let d = &mut plane[r * w + c];
                                *d = *d + gxy[0] * xs[c] + gy;
                            }
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |da| add_into(da, g));
                self.accumulate(grads, *b, |db| add_into(db, g));
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, |da| add_into(da, g));
                self.accumulate(grads, *b, |db| {
                    for (d, &gi) in db.iter_mut().zip(g) {
                        *d = *d - gi;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (xa, xb) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(grads, *a, |da| {
                    for ((d, &gi), &y) in da.iter_mut().zip(g).zip(xb) {
                        *d = *d + gi * y;
                    }
                });
                self.accumulate(grads, *b, |db| {
                    for ((d, &gi), &y) in db.iter_mut().zip(g).zip(xa) {
                        *d = *d + gi * y;
                    }
                });
            }
            Op::Scale(a, s) => {
                let k = T::from_f64_lossy(*s);
                self.accumulate(grads, *a, |da| {
                    for (d, &gi) in da.iter_mut().zip(g) {
                        *d = *d + gi * k;
                    }
                });
            }
            Op::Reduce { input, kind } => {
                let x = self.value(*input).data();
                let n = T::from_f64_lossy(x.len() as f64);
                let g0 = g[0];
                self.accumulate(grads, *input, |dx| match kind {
                    ReduceKind::Sum => dx.iter_mut().for_each(|d| *d = *d + g0),
                    ReduceKind::Mean => {
                        let k = g0 / n;
                        dx.iter_mut().for_each(|d| *d = *d + k);
                    }
                    ReduceKind::MeanAbs => {
                        let k = g0 / n;
                        for (d, &xi) in dx.iter_mut().zip(x) {
                            let s = if xi > T::zero() {
                                T::one()
                            } else if xi < T::zero() {
                                -T::one()
                            } else {
                                T::zero()
                            };
                            *d = *d + k * s;
                        }
                    }
                });
            }
        }
    }
}
