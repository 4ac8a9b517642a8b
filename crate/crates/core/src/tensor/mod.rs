//! Dense f64 tensors with tape-based reverse-mode differentiation.
//!
//! A [`Tape`] records every operation applied to the [`Var`] handles it hands
//! out. Values are stored on the tape; [`Tape::backward`] walks the recording
//! in reverse exactly once and accumulates gradients into leaf variables that
//! were created with [`Tape::param`].
//!
//! Shapes are always explicit: elementwise binary operations require equal
//! shapes, and the only broadcast is the per-channel bias add inside
//! [`Tape::conv2d`] and [`Tape::linear`].

mod checkpoint;
mod conv;
mod optim;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use optim::sgd_momentum_step;

use crate::error::{Error, Result};
use conv::ConvGeometry;

/// Lower clamp applied to probabilities before taking a logarithm.
pub const LOG_EPS: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} needs {expected} values, got {}", data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Option<f64> {
        (self.data.len() == 1).then(|| self.data[0])
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::shape("reshape", format!("{:?} -> {shape:?}", self.shape)));
        }
        self.shape = shape;
        Ok(self)
    }

    pub(crate) fn dims4(&self, op: &'static str) -> Result<[usize; 4]> {
        match self.shape[..] {
            [n, c, h, w] => Ok([n, c, h, w]),
            _ => Err(Error::shape(op, format!("expected NCHW, got {:?}", self.shape))),
        }
    }

    pub(crate) fn dims2(&self, op: &'static str) -> Result<[usize; 2]> {
        match self.shape[..] {
            [n, k] => Ok([n, k]),
            _ => Err(Error::shape(op, format!("expected NK, got {:?}", self.shape))),
        }
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Conv2d { input: Var, weight: Var, bias: Var, geom: ConvGeometry },
    Upsample { input: Var, factor: usize },
    Relu(Var),
    LeakyRelu(Var, f64),
    Sigmoid(Var),
    Softplus(Var),
    SoftmaxChannels(Var),
    LogSoftmaxChannels(Var),
    Concat { a: Var, b: Var },
    Linear { input: Var, weight: Var, bias: Var },
    Reshape(Var),
    Mean(Var),
    MeanSpatial(Var),
    Sum(Var),
    Log(Var),
    Clamp { input: Var, lo: f64, hi: f64 },
    Affine { input: Var, scale: f64 },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Recording of one forward computation.
///
/// A tape is owned by a single thread; independent training runs use
/// independent tapes.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf. Gradients accumulate into it on every backward pass.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Non-trainable leaf.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// A constant copy of `v`: later ops on the copy do not propagate gradients
    /// back into `v`'s history.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a trainable leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    fn push(&mut self, op: &'static str, value: Tensor, kind: Op, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op: kind,
            requires_grad,
            grad: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn map_unary(&mut self, op: &'static str, x: Var, kind: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let src = self.value(x);
        let value = Tensor {
            shape: src.shape.clone(),
            data: src.data.iter().map(|&v| f(v)).collect(),
        };
        self.push(op, value, kind, &[x])
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::shape(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    fn zip(&mut self, op: &'static str, a: Var, b: Var, kind: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.same_shape(op, a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let value = Tensor {
            shape: ta.shape.clone(),
            data: ta.data.iter().zip(&tb.data).map(|(&x, &y)| f(x, y)).collect(),
        };
        self.push(op, value, kind, &[a, b])
    }

    /// 2-D cross-correlation over NCHW input with OIHW weights.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, stride: usize, padding: usize) -> Result<Var> {
        let [n, cin, h, w] = self.value(input).dims4("conv2d")?;
        let [cout, wcin, kh, kw] = self.value(weight).dims4("conv2d")?;
        if wcin != cin {
            return Err(Error::shape("conv2d", format!("input has {cin} channels, weight expects {wcin}")));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::shape("conv2d", format!("kernel {kh}x{kw} must be odd")));
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("conv2d stride must be >= 1".into()));
        }
        if self.value(bias).shape() != [cout] {
            return Err(Error::shape("conv2d", format!("bias {:?} for {cout} filters", self.value(bias).shape())));
        }
        let (oh, ow) = match (
            conv::output_extent(h, kh, stride, padding),
            conv::output_extent(w, kw, stride, padding),
        ) {
            (Some(oh), Some(ow)) => (oh, ow),
            _ => return Err(Error::shape("conv2d", format!("{h}x{w} input too small for {kh}x{kw} kernel"))),
        };
        let geom = ConvGeometry {
            n,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            stride,
            padding,
            oh,
            ow,
        };
        let data = conv::forward(&geom, self.value(input).data(), self.value(weight).data(), self.value(bias).data());
        let value = Tensor::new(vec![n, cout, oh, ow], data)?;
        self.push(
            "conv2d",
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            },
            &[input, weight, bias],
        )
    }

    /// Nearest-neighbour upsampling: each pixel becomes a `factor x factor` block.
    pub fn upsample_nearest(&mut self, input: Var, factor: usize) -> Result<Var> {
        if factor < 1 {
            return Err(Error::InvalidArgument("upsample factor must be >= 1".into()));
        }
        let [n, c, h, w] = self.value(input).dims4("upsample_nearest")?;
        let (oh, ow) = (h * factor, w * factor);
        let src = self.value(input).data();
        let mut data = vec![0.0; n * c * oh * ow];
        for plane in 0..n * c {
            let s = &src[plane * h * w..(plane + 1) * h * w];
            let d = &mut data[plane * oh * ow..(plane + 1) * oh * ow];
            for y in 0..oh {
                for x in 0..ow {
                    d[y * ow + x] = s[(y / factor) * w + x / factor];
                }
            }
        }
        let value = Tensor::new(vec![n, c, oh, ow], data)?;
        self.push("upsample_nearest", value, Op::Upsample { input, factor }, &[input])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.map_unary("relu", x, Op::Relu(x), |v| if v > 0.0 { v } else { 0.0 })
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        self.map_unary("leaky_relu", x, Op::LeakyRelu(x, slope), |v| if v > 0.0 { v } else { slope * v })
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.map_unary("sigmoid", x, Op::Sigmoid(x), sigmoid)
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.map_unary("softplus", x, Op::Softplus(x), softplus)
    }

    fn channel_map(
        &mut self,
        op: &'static str,
        x: Var,
        kind: Op,
        f: impl Fn(&[f64], &mut [f64]),
    ) -> Result<Var> {
        let [n, c, h, w] = self.value(x).dims4(op)?;
        if c < 2 {
            return Err(Error::shape(op, format!("needs at least 2 channels, got {c}")));
        }
        let src = self.value(x).data();
        let plane = h * w;
        let mut data = vec![0.0; src.len()];
        let mut inp = vec![0.0; c];
        let mut out = vec![0.0; c];
        for b in 0..n {
            let base = b * c * plane;
            for p in 0..plane {
                for ch in 0..c {
                    inp[ch] = src[base + ch * plane + p];
                }
                f(&inp, &mut out);
                for ch in 0..c {
                    data[base + ch * plane + p] = out[ch];
                }
            }
        }
        let value = Tensor::new(vec![n, c, h, w], data)?;
        self.push(op, value, kind, &[x])
    }

    /// Per-pixel softmax across the channel axis.
    pub fn softmax_channels(&mut self, x: Var) -> Result<Var> {
        self.channel_map("softmax_channels", x, Op::SoftmaxChannels(x), |inp, out| {
            let m = inp.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for (o, &v) in out.iter_mut().zip(inp) {
                *o = (v - m).exp();
                total += *o;
            }
            out.iter_mut().for_each(|o| *o /= total);
        })
    }

    /// Per-pixel log-softmax across the channel axis.
    pub fn log_softmax_channels(&mut self, x: Var) -> Result<Var> {
        self.channel_map("log_softmax_channels", x, Op::LogSoftmaxChannels(x), |inp, out| {
            let m = inp.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + inp.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
            for (o, &v) in out.iter_mut().zip(inp) {
                *o = v - lse;
            }
        })
    }

    /// Channels of `a` followed by channels of `b`.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let [n, ca, h, w] = self.value(a).dims4("concat_channels")?;
        let [nb, cb, hb, wb] = self.value(b).dims4("concat_channels")?;
        if (n, h, w) != (nb, hb, wb) {
            return Err(Error::shape(
                "concat_channels",
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        let plane = h * w;
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut data = Vec::with_capacity(n * (ca + cb) * plane);
        for i in 0..n {
            data.extend_from_slice(&da[i * ca * plane..(i + 1) * ca * plane]);
            data.extend_from_slice(&db[i * cb * plane..(i + 1) * cb * plane]);
        }
        let value = Tensor::new(vec![n, ca + cb, h, w], data)?;
        self.push("concat_channels", value, Op::Concat { a, b }, &[a, b])
    }

    /// `x[N,K] * weight[M,K]^T + bias[M]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let [n, k] = self.value(input).dims2("linear")?;
        let [m, wk] = self.value(weight).dims2("linear")?;
        if wk != k || self.value(bias).shape() != [m] {
            return Err(Error::shape(
                "linear",
                format!(
                    "input {:?}, weight {:?}, bias {:?}",
                    self.value(input).shape(),
                    self.value(weight).shape(),
                    self.value(bias).shape()
                ),
            ));
        }
        let (x, wt, b) = (self.value(input).data(), self.value(weight).data(), self.value(bias).data());
        let mut data = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                let row = &wt[j * k..(j + 1) * k];
                data[i * m + j] = b[j] + row.iter().zip(&x[i * k..(i + 1) * k]).map(|(a, c)| a * c).sum::<f64>();
            }
        }
        let value = Tensor::new(vec![n, m], data)?;
        self.push("linear", value, Op::Linear { input, weight, bias }, &[input, weight, bias])
    }

    /// Collapses all but the leading axis.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let shape = self.value(x).shape();
        let n = *shape.first().ok_or_else(|| Error::shape("flatten", "scalar input"))?;
        let k = shape[1..].iter().product();
        self.reshape(x, vec![n, k])
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        self.push("reshape", value, Op::Reshape(x), &[x])
    }

    /// Mean of all elements, as a scalar.
    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.is_empty() {
            return Err(Error::shape("mean", "empty tensor"));
        }
        let value = Tensor::scalar(t.data.iter().sum::<f64>() / t.len() as f64);
        self.push("mean", value, Op::Mean(x), &[x])
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(x).data.iter().sum());
        self.push("sum", value, Op::Sum(x), &[x])
    }

    /// Global average pool: `[N,C,H,W] -> [N,C]`.
    pub fn mean_spatial(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = self.value(x).dims4("mean_spatial")?;
        let plane = h * w;
        let data = self
            .value(x)
            .data()
            .chunks(plane)
            .map(|p| p.iter().sum::<f64>() / plane as f64)
            .collect();
        let value = Tensor::new(vec![n, c], data)?;
        self.push("mean_spatial", value, Op::MeanSpatial(x), &[x])
    }

    /// Natural logarithm. Inputs must be strictly positive; losses clamp first.
    pub fn log(&mut self, x: Var) -> Result<Var> {
        if self.value(x).data.iter().any(|&v| v <= 0.0) {
            return Err(Error::InvalidArgument("log of a non-positive value".into()));
        }
        self.map_unary("log", x, Op::Log(x), f64::ln)
    }

    /// Clamp into `[lo, hi]`; the gradient is zero where clamping was active.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        self.map_unary("clamp", x, Op::Clamp { input: x, lo, hi }, |v| v.clamp(lo, hi))
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Result<Var> {
        self.map_unary("affine", x, Op::Affine { input: x, scale }, |v| scale * v + shift)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        self.affine(x, factor, 0.0)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// Reverse pass from a scalar `loss`.
    ///
    /// Gradients of trainable leaves accumulate across calls until
    /// [`Tape::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.value(loss).shape().to_vec();
        if self.value(loss).len() != 1 {
            return Err(Error::NonScalarLoss(shape));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let contributions = self.local_grads(idx, &g);
            for (target, contribution) in contributions {
                if !self.nodes[target.0].requires_grad {
                    continue;
                }
                match &mut grads[target.0] {
                    Some(acc) => acc.iter_mut().zip(&contribution).for_each(|(a, c)| *a += c),
                    slot => *slot = Some(contribution),
                }
            }
            if matches!(self.nodes[idx].op, Op::Leaf) {
                let node = &mut self.nodes[idx];
                match &mut node.grad {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, c)| *a += c),
                    slot => *slot = Some(g),
                }
            }
        }
        Ok(())
    }

    /// Fingerprint of which side of every non-differentiable point (ReLU
    /// hinge, clamp bound) each recorded input lies on. Two evaluations with
    /// equal signatures took the same piecewise-smooth branch.
    pub fn kink_signature(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut mix = |bit: u64| {
            h ^= bit;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        };
        for node in &self.nodes {
            match node.op {
                Op::Relu(x) | Op::LeakyRelu(x, _) => {
                    for &v in self.value(x).data() {
                        mix((v > 0.0) as u64);
                    }
                }
                Op::Clamp { input, lo, hi } => {
                    for &v in self.value(input).data() {
                        mix(if v < lo { 0 } else if v > hi { 2 } else { 1 });
                    }
                }
                _ => {}
            }
        }
        h
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Vector-Jacobian products of node `idx` with respect to each of its inputs.
    fn local_grads(&self, idx: usize, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[idx];
        let out = node.value.data();
        let val = |v: Var| self.nodes[v.0].value.data();
        let elementwise = |x: Var, f: &dyn Fn(usize) -> f64| -> Vec<(Var, Vec<f64>)> {
            vec![(x, (0..g.len()).map(|i| g[i] * f(i)).collect())]
        };
        match node.op {
            Op::Leaf => vec![],
            Op::Conv2d {
                input,
                weight,
                bias,
                ref geom,
            } => {
                let grads = conv::backward(
                    geom,
                    val(input),
                    val(weight),
                    g,
                    self.wants(input),
                    self.wants(weight),
                    self.wants(bias),
                );
                let mut res = Vec::with_capacity(3);
                if let Some(d) = grads.input {
                    res.push((input, d));
                }
                if let Some(d) = grads.weight {
                    res.push((weight, d));
                }
                if let Some(d) = grads.bias {
                    res.push((bias, d));
                }
                res
            }
            Op::Upsample { input, factor } => {
                let shape = self.nodes[input.0].value.shape();
                let (h, w) = (shape[2], shape[3]);
                let (oh, ow) = (h * factor, w * factor);
                let mut d = vec![0.0; self.nodes[input.0].value.len()];
                for plane in 0..shape[0] * shape[1] {
                    let go = &g[plane * oh * ow..(plane + 1) * oh * ow];
                    let di = &mut d[plane * h * w..(plane + 1) * h * w];
                    for y in 0..oh {
                        for x in 0..ow {
                            di[(y / factor) * w + x / factor] += go[y * ow + x];
                        }
                    }
                }
                vec![(input, d)]
            }
            Op::Relu(x) => {
                let xv = val(x);
                elementwise(x, &|i| if xv[i] > 0.0 { 1.0 } else { 0.0 })
            }
            Op::LeakyRelu(x, slope) => {
                let xv = val(x);
                elementwise(x, &|i| if xv[i] > 0.0 { 1.0 } else { slope })
            }
            Op::Sigmoid(x) => elementwise(x, &|i| out[i] * (1.0 - out[i])),
            Op::Softplus(x) => {
                let xv = val(x);
                elementwise(x, &|i| sigmoid(xv[i]))
            }
            Op::SoftmaxChannels(x) | Op::LogSoftmaxChannels(x) => {
                let log_form = matches!(node.op, Op::LogSoftmaxChannels(_));
                let s = &node.value.shape;
                let (n, c, plane) = (s[0], s[1], s[2] * s[3]);
                let mut d = vec![0.0; g.len()];
                for b in 0..n {
                    let base = b * c * plane;
                    for p in 0..plane {
                        let at = |ch: usize| base + ch * plane + p;
                        if log_form {
                            let gsum: f64 = (0..c).map(|ch| g[at(ch)]).sum();
                            for ch in 0..c {
                                d[at(ch)] = g[at(ch)] - out[at(ch)].exp() * gsum;
                            }
                        } else {
                            let dot: f64 = (0..c).map(|ch| g[at(ch)] * out[at(ch)]).sum();
                            for ch in 0..c {
                                d[at(ch)] = out[at(ch)] * (g[at(ch)] - dot);
                            }
                        }
                    }
                }
                vec![(x, d)]
            }
            Op::Concat { a, b } => {
                let sa = self.nodes[a.0].value.shape();
                let sb = self.nodes[b.0].value.shape();
                let plane = sa[2] * sa[3];
                let (ca, cb) = (sa[1], sb[1]);
                let mut da = Vec::with_capacity(self.nodes[a.0].value.len());
                let mut db = Vec::with_capacity(self.nodes[b.0].value.len());
                for i in 0..sa[0] {
                    let base = i * (ca + cb) * plane;
                    da.extend_from_slice(&g[base..base + ca * plane]);
                    db.extend_from_slice(&g[base + ca * plane..base + (ca + cb) * plane]);
                }
                vec![(a, da), (b, db)]
            }
            Op::Linear { input, weight, bias } => {
                let [n, k] = [self.nodes[input.0].value.shape[0], self.nodes[input.0].value.shape[1]];
                let m = self.nodes[weight.0].value.shape[0];
                let (x, wt) = (val(input), val(weight));
                let mut res = Vec::with_capacity(3);
                if self.wants(input) {
                    let mut dx = vec![0.0; n * k];
                    for i in 0..n {
                        for j in 0..m {
                            let gij = g[i * m + j];
                            for t in 0..k {
                                dx[i * k + t] += gij * wt[j * k + t];
                            }
                        }
                    }
                    res.push((input, dx));
                }
                if self.wants(weight) {
                    let mut dw = vec![0.0; m * k];
                    for i in 0..n {
                        for j in 0..m {
                            let gij = g[i * m + j];
                            for t in 0..k {
                                dw[j * k + t] += gij * x[i * k + t];
                            }
                        }
                    }
                    res.push((weight, dw));
                }
                if self.wants(bias) {
                    let mut db = vec![0.0; m];
                    for i in 0..n {
                        for j in 0..m {
                            db[j] += g[i * m + j];
                        }
                    }
                    res.push((bias, db));
                }
                res
            }
            Op::Reshape(x) => vec![(x, g.to_vec())],
            Op::Mean(x) => {
                let len = self.nodes[x.0].value.len();
                vec![(x, vec![g[0] / len as f64; len])]
            }
            Op::Sum(x) => vec![(x, vec![g[0]; self.nodes[x.0].value.len()])],
            Op::MeanSpatial(x) => {
                let s = self.nodes[x.0].value.shape();
                let plane = s[2] * s[3];
                let mut d = Vec::with_capacity(self.nodes[x.0].value.len());
                for &gi in g {
                    d.extend(std::iter::repeat_n(gi / plane as f64, plane));
                }
                vec![(x, d)]
            }
            Op::Log(x) => {
                let xv = val(x);
                elementwise(x, &|i| 1.0 / xv[i])
            }
            Op::Clamp { input, lo, hi } => {
                let xv = val(input);
                elementwise(input, &|i| if xv[i] < lo || xv[i] > hi { 0.0 } else { 1.0 })
            }
            Op::Affine { input, scale } => elementwise(input, &|_| scale),
            Op::Add(a, b) => vec![(a, g.to_vec()), (b, g.to_vec())],
            Op::Sub(a, b) => vec![(a, g.to_vec()), (b, g.iter().map(|v| -v).collect())],
            Op::Mul(a, b) => {
                let (av, bv) = (val(a), val(b));
                vec![
                    (a, g.iter().zip(bv).map(|(g, y)| g * y).collect()),
                    (b, g.iter().zip(av).map(|(g, x)| g * x).collect()),
                ]
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}
