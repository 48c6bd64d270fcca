use std::sync::Arc;

use super::kernels;
use super::{Result, Shape, Tensor, TensorError};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Zero padding of `(k - 1) / 2` on each side; kernel extents must be odd.
    Same,
    Valid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Height,
    Width,
}

/// Fixed convolution weights `(out, in, kh, kw)` with an optional per-output bias.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvKernel {
    pub out_channels: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub weights: Vec<f64>,
    pub bias: Option<Vec<f64>>,
}

impl ConvKernel {
    pub fn new(
        out_channels: usize,
        in_channels: usize,
        height: usize,
        width: usize,
        weights: Vec<f64>,
        bias: Option<Vec<f64>>,
    ) -> Result<Self> {
        if out_channels * in_channels * height * width == 0 {
            return Err(TensorError::InvalidShape("empty convolution kernel".into()));
        }
        if weights.len() != out_channels * in_channels * height * width {
            return Err(TensorError::InvalidArgument {
                op: "conv2d",
                reason: format!(
                    "kernel holds {} weights, expected {out_channels}x{in_channels}x{height}x{width}",
                    weights.len()
                ),
            });
        }
        if let Some(b) = &bias {
            if b.len() != out_channels {
                return Err(TensorError::InvalidArgument {
                    op: "conv2d",
                    reason: format!("bias length {} != {out_channels}", b.len()),
                });
            }
        }
        Ok(Self {
            out_channels,
            in_channels,
            height,
            width,
            weights,
            bias,
        })
    }

    #[inline]
    pub fn weight(&self, co: usize, ci: usize, ky: usize, kx: usize) -> f64 {
        self.weights[((co * self.in_channels + ci) * self.height + ky) * self.width + kx]
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Powf(Var, f64),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Abs(Var),
    Neg(Var),
    Scale(Var, f64),
    Offset(Var),
    Sigmoid(Var),
    Conv2d {
        input: Var,
        kernel: Arc<ConvKernel>,
        stride: usize,
        pad: (usize, usize),
    },
    Filter1d {
        input: Var,
        taps: Arc<[f64]>,
        axis: Axis,
        stride: usize,
    },
    SumAll(Var),
    MeanAll(Var),
    MaxAll {
        input: Var,
        index: usize,
    },
    SumChannels(Var),
    MeanSpatial(Var),
    MaxSpatial {
        input: Var,
        indices: Vec<usize>,
    },
    ChannelWeightedSum(Var, Arc<[f64]>),
    Crop {
        input: Var,
        top: usize,
        left: usize,
    },
    GridMeanPool {
        input: Var,
        cells: usize,
    },
    Reshape(Var),
    Concat(Vec<Var>),
}

impl Op {
    fn for_each_input(&self, mut f: impl FnMut(Var)) {
        match self {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) => {
                f(*a);
                f(*b);
            }
            Op::Powf(a, _)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Sqrt(a)
            | Op::Abs(a)
            | Op::Neg(a)
            | Op::Scale(a, _)
            | Op::Offset(a)
            | Op::Sigmoid(a)
            | Op::SumAll(a)
            | Op::MeanAll(a)
            | Op::SumChannels(a)
            | Op::MeanSpatial(a)
            | Op::ChannelWeightedSum(a, _)
            | Op::Reshape(a) => f(*a),
            Op::Conv2d { input, .. }
            | Op::Filter1d { input, .. }
            | Op::MaxAll { input, .. }
            | Op::MaxSpatial { input, .. }
            | Op::Crop { input, .. }
            | Op::GridMeanPool { input, .. } => f(*input),
            Op::Concat(parts) => parts.iter().copied().for_each(f),
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Tensor,
}

/// Define-by-run tape: every operation is evaluated as it is recorded, and
/// nodes are stored in creation order, which is a topological order.
#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Graph::backward`]; `None` marks nodes the root does not depend on.
#[derive(Debug, Clone)]
pub struct Adjoints {
    grads: Vec<Option<Tensor>>,
}

impl Adjoints {
    pub fn wrt(&self, var: Var) -> Result<&Tensor> {
        self.grads
            .get(var.0)
            .and_then(Option::as_ref)
            .ok_or(TensorError::Unreachable(var.0))
    }

    pub fn take(&mut self, var: Var) -> Result<Tensor> {
        self.grads
            .get_mut(var.0)
            .and_then(Option::take)
            .ok_or(TensorError::Unreachable(var.0))
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    /// Value of a scalar node.
    pub fn forward(&self, root: Var) -> Result<f64> {
        self.value(root).item()
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value)
    }

    pub fn constant(&mut self, value: f64) -> Var {
        self.leaf(Tensor::scalar(value))
    }

    // ---- elementwise ---------------------------------------------------------

    fn binary(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        if sa == sb {
            let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
            return Tensor::new(sa, data);
        }
        let out = Shape::broadcast(op, sa, sb)?;
        let (da, db) = (ta.data(), tb.data());
        let mut data = Vec::with_capacity(out.numel());
        for c in 0..out.channels {
            let (ca, cb) = (c.min(sa.channels - 1), c.min(sb.channels - 1));
            for y in 0..out.height {
                let (ya, yb) = (y.min(sa.height - 1), y.min(sb.height - 1));
                let ra = (ca * sa.height + ya) * sa.width;
                let rb = (cb * sb.height + yb) * sb.width;
                for x in 0..out.width {
                    let xa = if sa.width == 1 { 0 } else { x };
                    let xb = if sb.width == 1 { 0 } else { x };
                    data.push(f(da[ra + xa], db[rb + xb]));
                }
            }
        }
        Tensor::new(out, data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(Op::Add(a, b), v))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary("subtract", a, b, |x, y| x - y)?;
        Ok(self.push(Op::Sub(a, b), v))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary("multiply", a, b, |x, y| x * y)?;
        Ok(self.push(Op::Mul(a, b), v))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary("divide", a, b, |x, y| x / y)?;
        Ok(self.push(Op::Div(a, b), v))
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let v = self.value(a).map(f);
        self.push(op, v)
    }

    pub fn powf(&mut self, a: Var, p: f64) -> Var {
        self.unary(a, Op::Powf(a, p), |x| x.powf(p))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Op::Powf(a, 2.0), |x| x * x)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, Op::Log(a), f64::ln)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sqrt(a), f64::sqrt)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, Op::Abs(a), f64::abs)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(a, Op::Neg(a), |x| -x)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        self.unary(a, Op::Scale(a, k), |x| x * k)
    }

    pub fn offset(&mut self, a: Var, k: f64) -> Var {
        self.unary(a, Op::Offset(a), |x| x + k)
    }

    /// Logistic function `1 / (1 + e^-x)`, evaluated without overflow.
    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), logistic)
    }

    /// Rectifier written as `(x + |x|) / 2`, inheriting the `sign(0) = 0` convention.
    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let m = self.abs(a);
        let s = self.add(a, m)?;
        Ok(self.scale(s, 0.5))
    }

    // ---- windowed ------------------------------------------------------------

    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Arc<ConvKernel>,
        stride: usize,
        padding: Padding,
    ) -> Result<Var> {
        let s = self.shape(input);
        if stride == 0 {
            return Err(TensorError::InvalidArgument {
                op: "conv2d",
                reason: "stride must be at least 1".into(),
            });
        }
        if kernel.in_channels != s.channels {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                lhs: s,
                rhs: Shape::new(kernel.in_channels, kernel.height, kernel.width),
            });
        }
        let pad = match padding {
            Padding::Valid => (0, 0),
            Padding::Same => {
                if kernel.height % 2 == 0 || kernel.width % 2 == 0 {
                    return Err(TensorError::InvalidArgument {
                        op: "conv2d",
                        reason: format!(
                            "same padding needs odd kernel extents, got {}x{}",
                            kernel.height, kernel.width
                        ),
                    });
                }
                ((kernel.height - 1) / 2, (kernel.width - 1) / 2)
            }
        };
        let (oh, ow) = match (
            kernels::window_out(s.height, pad.0, kernel.height, stride),
            kernels::window_out(s.width, pad.1, kernel.width, stride),
        ) {
            (Some(h), Some(w)) => (h, w),
            _ => {
                return Err(TensorError::InvalidArgument {
                    op: "conv2d",
                    reason: format!(
                        "input {s} smaller than kernel {}x{}",
                        kernel.height, kernel.width
                    ),
                })
            }
        };
        let out_shape = Shape::new(kernel.out_channels, oh, ow);
        let value = kernels::conv2d_forward(self.value(input), &kernel, stride, pad, out_shape);
        Ok(self.push(
            Op::Conv2d {
                input,
                kernel,
                stride,
                pad,
            },
            value,
        ))
    }

    /// Depthwise valid correlation along one axis with output stride.
    pub fn filter1d(
        &mut self,
        input: Var,
        taps: Arc<[f64]>,
        axis: Axis,
        stride: usize,
    ) -> Result<Var> {
        let s = self.shape(input);
        let len = match axis {
            Axis::Height => s.height,
            Axis::Width => s.width,
        };
        if stride == 0 || taps.is_empty() || taps.len() > len {
            return Err(TensorError::InvalidArgument {
                op: "filter1d",
                reason: format!("{} taps, stride {stride} on input {s}", taps.len()),
            });
        }
        let out_len = (len - taps.len()) / stride + 1;
        let out_shape = match axis {
            Axis::Height => Shape::new(s.channels, out_len, s.width),
            Axis::Width => Shape::new(s.channels, s.height, out_len),
        };
        let value = kernels::filter1d_forward(self.value(input), &taps, axis, stride, out_shape);
        Ok(self.push(
            Op::Filter1d {
                input,
                taps,
                axis,
                stride,
            },
            value,
        ))
    }

    /// Separable valid window filter: the same taps along width, then height.
    pub fn window_filter(&mut self, input: Var, taps: &Arc<[f64]>, stride: usize) -> Result<Var> {
        let h = self.filter1d(input, taps.clone(), Axis::Width, stride)?;
        self.filter1d(h, taps.clone(), Axis::Height, stride)
    }

    // ---- reductions ----------------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Op::SumAll(a), Tensor::scalar(s))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let m = t.data().iter().sum::<f64>() / t.data().len() as f64;
        self.push(Op::MeanAll(a), Tensor::scalar(m))
    }

    /// Global maximum; the adjoint flows to the first maximizer in scan order.
    pub fn max(&mut self, a: Var) -> Var {
        let (index, value) = argmax(self.value(a).data());
        self.push(Op::MaxAll { input: a, index }, Tensor::scalar(value))
    }

    /// Sum over channels: `(c, h, w) -> (1, h, w)`.
    pub fn sum_channels(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.shape();
        let mut out = vec![0.0; s.plane()];
        for plane in t.data().chunks_exact(s.plane()) {
            for (o, v) in out.iter_mut().zip(plane) {
                *o += v;
            }
        }
        let value = Tensor::new(Shape::new(1, s.height, s.width), out).expect("plane");
        self.push(Op::SumChannels(a), value)
    }

    /// Spatial mean per channel: `(c, h, w) -> (c, 1, 1)`.
    pub fn mean_spatial(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.shape();
        let out = t
            .data()
            .chunks_exact(s.plane())
            .map(|p| p.iter().sum::<f64>() / s.plane() as f64)
            .collect();
        let value = Tensor::new(Shape::vector(s.channels), out).expect("vector");
        self.push(Op::MeanSpatial(a), value)
    }

    /// Spatial maximum per channel: `(c, h, w) -> (c, 1, 1)`.
    pub fn max_spatial(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.shape();
        let (indices, out): (Vec<usize>, Vec<f64>) = t
            .data()
            .chunks_exact(s.plane())
            .enumerate()
            .map(|(c, p)| {
                let (i, v) = argmax(p);
                (c * s.plane() + i, v)
            })
            .unzip();
        let value = Tensor::new(Shape::vector(s.channels), out).expect("vector");
        self.push(Op::MaxSpatial { input: a, indices }, value)
    }

    /// `Σ_c weights[c] · a[c]`: `(c, h, w) -> (1, h, w)`.
    pub fn channel_weighted_sum(&mut self, a: Var, weights: Arc<[f64]>) -> Result<Var> {
        let t = self.value(a);
        let s = t.shape();
        if weights.len() != s.channels {
            return Err(TensorError::InvalidArgument {
                op: "channel_weighted_sum",
                reason: format!("{} weights for input {s}", weights.len()),
            });
        }
        let mut out = vec![0.0; s.plane()];
        for (plane, w) in t.data().chunks_exact(s.plane()).zip(weights.iter()) {
            for (o, v) in out.iter_mut().zip(plane) {
                *o += w * v;
            }
        }
        let value = Tensor::new(Shape::new(1, s.height, s.width), out).expect("plane");
        Ok(self.push(Op::ChannelWeightedSum(a, weights), value))
    }

    // ---- structural ----------------------------------------------------------

    pub fn crop(
        &mut self,
        a: Var,
        top: usize,
        left: usize,
        height: usize,
        width: usize,
    ) -> Result<Var> {
        let t = self.value(a);
        let s = t.shape();
        if height == 0 || width == 0 || top + height > s.height || left + width > s.width {
            return Err(TensorError::InvalidArgument {
                op: "crop",
                reason: format!("window {height}x{width} at ({top}, {left}) outside {s}"),
            });
        }
        let value = Tensor::from_fn(Shape::new(s.channels, height, width), |c, y, x| {
            t.get(c, y + top, x + left)
        });
        Ok(self.push(Op::Crop { input: a, top, left }, value))
    }

    /// Adaptive average pooling onto a `cells x cells` grid.
    pub fn grid_mean_pool(&mut self, a: Var, cells: usize) -> Result<Var> {
        let t = self.value(a);
        let s = t.shape();
        if cells == 0 || cells > s.height || cells > s.width {
            return Err(TensorError::InvalidArgument {
                op: "grid_mean_pool",
                reason: format!("{cells} cells on input {s}"),
            });
        }
        let value = Tensor::from_fn(Shape::new(s.channels, cells, cells), |c, i, j| {
            let (y0, y1) = kernels::cell_bounds(s.height, cells, i);
            let (x0, x1) = kernels::cell_bounds(s.width, cells, j);
            let mut acc = 0.0;
            for y in y0..y1 {
                for x in x0..x1 {
                    acc += t.get(c, y, x);
                }
            }
            acc / ((y1 - y0) * (x1 - x0)) as f64
        });
        Ok(self.push(Op::GridMeanPool { input: a, cells }, value))
    }

    pub fn reshape(&mut self, a: Var, shape: Shape) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        Ok(self.push(Op::Reshape(a), value))
    }

    pub fn flatten(&mut self, a: Var) -> Var {
        let n = self.shape(a).numel();
        self.reshape(a, Shape::vector(n)).expect("same element count")
    }

    /// Concatenation along the channel axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| TensorError::InvalidArgument {
            op: "concat",
            reason: "no inputs".into(),
        })?;
        let s0 = self.shape(first);
        let mut channels = 0;
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            let s = t.shape();
            if (s.height, s.width) != (s0.height, s0.width) {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: s0,
                    rhs: s,
                });
            }
            channels += s.channels;
            data.extend_from_slice(t.data());
        }
        let value = Tensor::new(Shape::new(channels, s0.height, s0.width), data)?;
        Ok(self.push(Op::Concat(parts.to_vec()), value))
    }

    /// `Σ_i weights[i] · a[i]` over a flat node, as a scalar.
    pub fn dot_const(&mut self, a: Var, weights: &[f64]) -> Result<Var> {
        let n = self.shape(a).numel();
        let flat = if self.shape(a).channels == n {
            a
        } else {
            self.flatten(a)
        };
        if weights.len() != n {
            return Err(TensorError::InvalidArgument {
                op: "dot_const",
                reason: format!("{} weights for {n} elements", weights.len()),
            });
        }
        let w = self.leaf(Tensor::vector(weights.to_vec())?);
        let p = self.mul(flat, w)?;
        Ok(self.sum(p))
    }

    // ---- reverse pass --------------------------------------------------------

    /// Gradients of the root behind `adj` with respect to the weights and bias
    /// of the convolution node `conv`, laid out like [`ConvKernel`].
    pub fn conv2d_parameter_gradient(&self, conv: Var, adj: &Adjoints) -> Result<(Vec<f64>, Vec<f64>)> {
        let Op::Conv2d {
            input,
            kernel,
            stride,
            pad,
        } = &self.nodes[conv.0].op
        else {
            return Err(TensorError::InvalidArgument {
                op: "conv2d_parameter_gradient",
                reason: format!("node {} is not a convolution", conv.0),
            });
        };
        let g = adj.wrt(conv)?;
        Ok(kernels::conv2d_parameter_backward(
            self.value(*input),
            g,
            kernel,
            *stride,
            *pad,
        ))
    }

    /// Reverse sweep from a scalar root. Each node is visited once, in reverse creation order.
    pub fn backward(&self, root: Var) -> Result<Adjoints> {
        self.sweep(root, None)
    }

    /// Gradient of a scalar root with respect to one node. Only the nodes
    /// that depend on `wrt` are visited.
    pub fn gradient(&self, root: Var, wrt: Var) -> Result<Tensor> {
        self.sweep(root, Some(wrt))?.take(wrt)
    }

    fn sweep(&self, root: Var, wrt: Option<Var>) -> Result<Adjoints> {
        let rs = self.shape(root);
        if !rs.is_scalar() {
            return Err(TensorError::NonScalarRoot(rs));
        }
        let live = match wrt {
            None => vec![true; root.0 + 1],
            Some(w) => {
                let mut live = vec![false; root.0 + 1];
                if w.0 <= root.0 {
                    live[w.0] = true;
                    for j in w.0 + 1..=root.0 {
                        let mut any = false;
                        self.nodes[j].op.for_each_input(|v| any |= live[v.0]);
                        live[j] = any;
                    }
                }
                live
            }
        };
        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Tensor::full(rs, 1.0));
        for i in (0..=root.0).rev() {
            if !live[i] || wrt.is_some_and(|w| w.0 == i) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if wrt.is_some() {
                // Intermediate adjoints are not returned, so they can be moved.
                self.propagate_owned(i, g, &mut grads, &live);
            } else {
                self.propagate(i, &g, &mut grads, &live);
                grads[i] = Some(g);
            }
        }
        grads.resize(self.nodes.len(), None);
        Ok(Adjoints { grads })
    }

    /// Like [`Self::propagate`], but pass-through adjoints are handed on
    /// without copying.
    fn propagate_owned(&self, i: usize, g: Tensor, grads: &mut [Option<Tensor>], live: &[bool]) {
        match &self.nodes[i].op {
            op @ (Op::Add(a, b) | Op::Sub(a, b))
                if self.shape(*a) == g.shape() && self.shape(*b) == g.shape() =>
            {
                let flip = |t: Tensor| if matches!(op, Op::Sub(..)) { t.scaled(-1.0) } else { t };
                match (live[a.0], live[b.0]) {
                    (true, true) => {
                        let gb = flip(g.clone());
                        accumulate(grads, *a, g);
                        accumulate(grads, *b, gb);
                    }
                    (true, false) => accumulate(grads, *a, g),
                    (false, true) => accumulate(grads, *b, flip(g)),
                    (false, false) => {}
                }
            }
            Op::Offset(a) => accumulate(grads, *a, g),
            _ => self.propagate(i, &g, grads, live),
        }
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>], live: &[bool]) {
        let node = &self.nodes[i];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if live[a.0] {
                    accumulate(grads, *a, reduce_to(g, self.shape(*a)));
                }
                if live[b.0] {
                    accumulate(grads, *b, reduce_to(g, self.shape(*b)));
                }
            }
            Op::Sub(a, b) => {
                if live[a.0] {
                    accumulate(grads, *a, reduce_to(g, self.shape(*a)));
                }
                if live[b.0] {
                    accumulate(grads, *b, reduce_to(&g.scaled(-1.0), self.shape(*b)));
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if live[a.0] {
                    let ga = zip_broadcast(g, vb, |g, y| g * y);
                    accumulate(grads, *a, reduce_to(&ga, va.shape()));
                }
                if live[b.0] {
                    let gb = zip_broadcast(g, va, |g, x| g * x);
                    accumulate(grads, *b, reduce_to(&gb, vb.shape()));
                }
            }
            Op::Div(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if live[a.0] {
                    let ga = zip_broadcast(g, vb, |g, y| g / y);
                    accumulate(grads, *a, reduce_to(&ga, va.shape()));
                }
                if live[b.0] {
                    // d(a/b)/db = -out / b
                    let q = zip_broadcast(out, vb, |o, y| -o / y);
                    let gb = zip_same(g, &q, |g, d| g * d);
                    accumulate(grads, *b, reduce_to(&gb, vb.shape()));
                }
            }
            Op::Powf(a, p) => {
                let p = *p;
                let d = zip_same(g, self.value(*a), |g, x| {
                    if p == 2.0 {
                        2.0 * x * g
                    } else {
                        g * p * x.powf(p - 1.0)
                    }
                });
                accumulate(grads, *a, d);
            }
            Op::Exp(a) => accumulate(grads, *a, zip_same(g, out, |g, y| g * y)),
            Op::Log(a) => accumulate(grads, *a, zip_same(g, self.value(*a), |g, x| g / x)),
            Op::Sqrt(a) => accumulate(grads, *a, zip_same(g, out, |g, y| g * 0.5 / y)),
            Op::Abs(a) => accumulate(
                grads,
                *a,
                zip_same(g, self.value(*a), |g, x| g * sign(x)),
            ),
            Op::Neg(a) => accumulate(grads, *a, g.scaled(-1.0)),
            Op::Scale(a, k) => accumulate(grads, *a, g.scaled(*k)),
            Op::Offset(a) => accumulate(grads, *a, g.clone()),
            Op::Sigmoid(a) => accumulate(grads, *a, zip_same(g, out, |g, y| g * y * (1.0 - y))),
            Op::Conv2d {
                input,
                kernel,
                stride,
                pad,
            } => {
                let d = kernels::conv2d_backward(g, kernel, *stride, *pad, self.shape(*input));
                accumulate(grads, *input, d);
            }
            Op::Filter1d {
                input,
                taps,
                axis,
                stride,
            } => {
                let d = kernels::filter1d_backward(g, taps, *axis, *stride, self.shape(*input));
                accumulate(grads, *input, d);
            }
            Op::SumAll(a) => {
                accumulate(grads, *a, Tensor::full(self.shape(*a), g.data()[0]));
            }
            Op::MeanAll(a) => {
                let s = self.shape(*a);
                accumulate(grads, *a, Tensor::full(s, g.data()[0] / s.numel() as f64));
            }
            Op::MaxAll { input, index } => {
                let mut d = Tensor::zeros(self.shape(*input));
                d.data_mut()[*index] = g.data()[0];
                accumulate(grads, *input, d);
            }
            Op::SumChannels(a) => {
                let s = self.shape(*a);
                let mut d = Vec::with_capacity(s.numel());
                for _ in 0..s.channels {
                    d.extend_from_slice(g.data());
                }
                accumulate(grads, *a, Tensor::new(s, d).expect("shape"));
            }
            Op::MeanSpatial(a) => {
                let s = self.shape(*a);
                let n = s.plane() as f64;
                let d = Tensor::from_fn(s, |c, _, _| g.data()[c] / n);
                accumulate(grads, *a, d);
            }
            Op::MaxSpatial { input, indices } => {
                let mut d = Tensor::zeros(self.shape(*input));
                for (c, &idx) in indices.iter().enumerate() {
                    d.data_mut()[idx] = g.data()[c];
                }
                accumulate(grads, *input, d);
            }
            Op::ChannelWeightedSum(a, w) => {
                let s = self.shape(*a);
                let d = Tensor::from_fn(s, |c, y, x| w[c] * g.get(0, y, x));
                accumulate(grads, *a, d);
            }
            Op::Crop { input, top, left } => {
                let s = self.shape(*input);
                let cs = g.shape();
                let mut d = Tensor::zeros(s);
                for c in 0..cs.channels {
                    for y in 0..cs.height {
                        let src = &g.data()[(c * cs.height + y) * cs.width..][..cs.width];
                        let start = (c * s.height + y + top) * s.width + left;
                        d.data_mut()[start..start + cs.width].copy_from_slice(src);
                    }
                }
                accumulate(grads, *input, d);
            }
            Op::GridMeanPool { input, cells } => {
                let s = self.shape(*input);
                let mut d = Tensor::zeros(s);
                for c in 0..s.channels {
                    for i in 0..*cells {
                        let (y0, y1) = kernels::cell_bounds(s.height, *cells, i);
                        for j in 0..*cells {
                            let (x0, x1) = kernels::cell_bounds(s.width, *cells, j);
                            let share = g.get(c, i, j) / ((y1 - y0) * (x1 - x0)) as f64;
                            for y in y0..y1 {
                                for x in x0..x1 {
                                    d.data_mut()[(c * s.height + y) * s.width + x] += share;
                                }
                            }
                        }
                    }
                }
                accumulate(grads, *input, d);
            }
            Op::Reshape(a) => {
                let d = g.clone().reshape(self.shape(*a)).expect("reshape adjoint");
                accumulate(grads, *a, d);
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let s = self.shape(p);
                    let d = Tensor::new(s, g.data()[offset..offset + s.numel()].to_vec())
                        .expect("concat slice");
                    offset += s.numel();
                    if live[p.0] {
                        accumulate(grads, p, d);
                    }
                }
            }
        }
    }
}

#[inline]
fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub(crate) fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn argmax(data: &[f64]) -> (usize, f64) {
    let mut best = (0, data[0]);
    for (i, &v) in data.iter().enumerate().skip(1) {
        if v > best.1 {
            best = (i, v);
        }
    }
    best
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, d: Tensor) {
    match &mut grads[v.0] {
        Some(acc) => {
            for (a, x) in acc.data_mut().iter_mut().zip(d.data()) {
                *a += x;
            }
        }
        slot @ None => *slot = Some(d),
    }
}

fn zip_same(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    debug_assert_eq!(a.shape(), b.shape());
    let data = a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect();
    Tensor::new(a.shape(), data).expect("same shape")
}

/// Combines a full-shape tensor with a possibly broadcast operand.
fn zip_broadcast(full: &Tensor, part: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let (sf, sp) = (full.shape(), part.shape());
    if sf == sp {
        return zip_same(full, part, f);
    }
    let (df, dp) = (full.data(), part.data());
    let mut data = Vec::with_capacity(sf.numel());
    for c in 0..sf.channels {
        let cp = c.min(sp.channels - 1);
        for y in 0..sf.height {
            let yp = y.min(sp.height - 1);
            let rf = &df[(c * sf.height + y) * sf.width..][..sf.width];
            let rp = &dp[(cp * sp.height + yp) * sp.width..][..sp.width];
            if sp.width == 1 {
                data.extend(rf.iter().map(|v| f(*v, rp[0])));
            } else {
                data.extend(rf.iter().zip(rp).map(|(v, p)| f(*v, *p)));
            }
        }
    }
    Tensor::new(sf, data).expect("broadcast shape")
}

/// Sums an adjoint over the axes an operand was broadcast along.
fn reduce_to(g: &Tensor, target: Shape) -> Tensor {
    let sg = g.shape();
    if sg == target {
        return g.clone();
    }
    let mut out = Tensor::zeros(target);
    let dg = g.data();
    let dt = out.data_mut();
    for c in 0..sg.channels {
        let tc = c.min(target.channels - 1);
        for y in 0..sg.height {
            let ty = y.min(target.height - 1);
            let rg = &dg[(c * sg.height + y) * sg.width..][..sg.width];
            let rt = &mut dt[(tc * target.height + ty) * target.width..][..target.width];
            if target.width == 1 {
                for v in rg {
                    rt[0] += v;
                }
            } else {
                for (t, v) in rt.iter_mut().zip(rg) {
                    *t += v;
                }
            }
        }
    }
    out
}
