//! A small reverse-mode tape covering exactly the operation set the codec needs.
//!
//! Every op evaluates eagerly and appends a node; [`Tape::backward`] walks the
//! nodes in reverse creation order. Nodes that do not depend on a parameter are
//! never differentiated.

use crate::error::{Error, Result};
use crate::gauss::{interval_mass, phi_pdf};
use crate::kernels;
use crate::motion::warp as warp_kernel;
use crate::tensor::Tensor;
use std::f64::consts::LN_2;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// Leaky-ReLU negative slope used by every network in the codec.
pub const LEAKY_SLOPE: f64 = 0.2;

/// Lower bound on modelled symbol probabilities.
pub const P_MIN: f64 = 1.0 / 65536.0;

#[derive(Clone, Debug)]
pub(crate) enum Op {
    Constant,
    Param(usize),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MulChannels(Var, Var),
    Conv { x: Var, w: Var, b: Var, stride: usize },
    LeakyRelu(Var),
    Sigmoid(Var),
    Softplus(Var),
    Exp(Var),
    Clamp01(Var),
    Concat(Vec<Var>),
    Slice { x: Var, start: usize },
    SpaceToDepth(Var, usize),
    DepthToSpace(Var, usize),
    Upsample(Var),
    ChannelNorm { x: Var, inv_std: Vec<f64> },
    RoundSte(Var),
    Warp { prev: Var, flow: Var, pyramid: Vec<Tensor>, sigmas: Vec<f64> },
    Codelength { y: Var, mu: Var, sigma: Var, width: Var },
    RowMix { x: Var, weights: Vec<f64> },
    Sum(Var),
    Mse(Var, Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Constant => "constant",
            Op::Param(_) => "param",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::MulChannels(..) => "mul_channels",
            Op::Conv { .. } => "conv2d",
            Op::LeakyRelu(_) => "leaky_relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Softplus(_) => "softplus",
            Op::Exp(_) => "exp",
            Op::Clamp01(_) => "clamp01",
            Op::Concat(_) => "concat",
            Op::Slice { .. } => "slice",
            Op::SpaceToDepth(..) => "space_to_depth",
            Op::DepthToSpace(..) => "depth_to_space",
            Op::Upsample(_) => "upsample",
            Op::ChannelNorm { .. } => "channel_norm",
            Op::RoundSte(_) => "round_ste",
            Op::Warp { .. } => "warp",
            Op::Codelength { .. } => "codelength",
            Op::RowMix { .. } => "row_mix",
            Op::Sum(_) => "sum",
            Op::Mse(..) => "mse",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// One recorded operation, for structural inspection in tests and tooling.
#[derive(Clone, Debug)]
pub struct TraceEntry {
    pub op: &'static str,
    pub output_shape: Vec<usize>,
    /// Shape of the first operand, when there is one.
    pub input_shape: Option<Vec<usize>>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients indexed by parameter id.
pub struct Gradients {
    pub by_param: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: usize) -> Option<&Tensor> {
        self.by_param.get(id).and_then(|g| g.as_ref())
    }
}

#[inline]
fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + libm::exp(-v))
    } else {
        let e = libm::exp(v);
        e / (1.0 + e)
    }
}

#[inline]
fn softplus(v: f64) -> f64 {
    if v > 30.0 {
        v
    } else {
        libm::log1p(libm::exp(v))
    }
}

#[inline]
pub(crate) fn round_half_away(v: f64) -> f64 {
    libm::round(v)
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Constant, false)
    }

    pub fn param(&mut self, id: usize, t: Tensor) -> Var {
        self.push(t, Op::Param(id), true)
    }

    /// Number of coded elements whose probability sits below `P_MIN`, over
    /// every codelength on the tape. Those elements cost a flat 16 bits.
    pub fn floored_elements(&self) -> usize {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Codelength { y, mu, sigma, width } => Some((y, mu, sigma, width)),
                _ => None,
            })
            .map(|(y, mu, sigma, width)| {
                let (yv, mv, sv, wv) = (self.value(y), self.value(mu), self.value(sigma), self.value(width));
                let plane = yv.numel() / wv.numel();
                (0..yv.numel())
                    .filter(|&i| interval_mass(yv.data()[i] - mv.data()[i], sv.data()[i], wv.data()[i / plane]) < P_MIN)
                    .count()
            })
            .sum()
    }

    /// Operation trace in creation order.
    pub fn trace(&self) -> Vec<TraceEntry> {
        self.nodes
            .iter()
            .map(|n| {
                let first = match &n.op {
                    Op::Constant | Op::Param(_) => None,
                    Op::Add(a, _)
                    | Op::Sub(a, _)
                    | Op::Mul(a, _)
                    | Op::Scale(a, _)
                    | Op::AddScalar(a)
                    | Op::MulChannels(a, _)
                    | Op::LeakyRelu(a)
                    | Op::Sigmoid(a)
                    | Op::Softplus(a)
                    | Op::Exp(a)
                    | Op::Clamp01(a)
                    | Op::SpaceToDepth(a, _)
                    | Op::DepthToSpace(a, _)
                    | Op::Upsample(a)
                    | Op::RoundSte(a)
                    | Op::Sum(a)
                    | Op::Mse(a, _) => Some(*a),
                    Op::Conv { x, .. }
                    | Op::Slice { x, .. }
                    | Op::ChannelNorm { x, .. }
                    | Op::RowMix { x, .. } => Some(*x),
                    Op::Warp { prev, .. } => Some(*prev),
                    Op::Codelength { y, .. } => Some(*y),
                    Op::Concat(parts) => parts.first().copied(),
                };
                TraceEntry {
                    op: n.op.name(),
                    output_shape: n.value.shape().to_vec(),
                    input_shape: first.map(|v| self.nodes[v.0].value.shape().to_vec()),
                }
            })
            .collect()
    }

    fn check_same(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::shape(op, sa, sb));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same("add", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same("sub", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same("mul", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).scale(s);
        let rg = self.rg(a);
        self.push(v, Op::Scale(a, s), rg)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|x| x + s);
        let rg = self.rg(a);
        self.push(v, Op::AddScalar(a), rg)
    }

    /// `x[c, ..] * v[c]` for a CxHxW `x` and a length-C `v`.
    pub fn mul_channels(&mut self, x: Var, v: Var) -> Result<Var> {
        let (c, h, w) = self.value(x).dims3();
        if self.value(v).shape() != [c] {
            return Err(Error::shape("mul_channels", self.value(x).shape(), self.value(v).shape()));
        }
        let plane = h * w;
        let vv = self.value(v).data().to_vec();
        let mut out = self.value(x).clone();
        for (i, o) in out.data_mut().iter_mut().enumerate() {
            *o *= vv[i / plane];
        }
        let rg = self.rg(x) || self.rg(v);
        Ok(self.push(out, Op::MulChannels(x, v), rg))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Result<Var> {
        let out = kernels::conv2d(self.value(x), self.value(w), self.value(b), stride)?;
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(out, Op::Conv { x, w, b, stride }, rg))
    }

    pub fn leaky_relu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| if a >= 0.0 { a } else { LEAKY_SLOPE * a });
        let rg = self.rg(x);
        self.push(v, Op::LeakyRelu(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.value(x).map(sigmoid);
        let rg = self.rg(x);
        self.push(v, Op::Sigmoid(x), rg)
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        let v = self.value(x).map(softplus);
        let rg = self.rg(x);
        self.push(v, Op::Softplus(x), rg)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let v = self.value(x).map(libm::exp);
        let rg = self.rg(x);
        self.push(v, Op::Exp(x), rg)
    }

    pub fn clamp01(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| a.clamp(0.0, 1.0));
        let rg = self.rg(x);
        self.push(v, Op::Clamp01(x), rg)
    }

    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let refs: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Tensor::concat_channels(&refs)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(v, Op::Concat(parts.to_vec()), rg))
    }

    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Var {
        let v = self.value(x).slice_channels(start, len);
        let rg = self.rg(x);
        self.push(v, Op::Slice { x, start }, rg)
    }

    pub fn space_to_depth(&mut self, x: Var, f: usize) -> Result<Var> {
        let v = kernels::space_to_depth(self.value(x), f)?;
        let rg = self.rg(x);
        Ok(self.push(v, Op::SpaceToDepth(x, f), rg))
    }

    pub fn depth_to_space(&mut self, x: Var, f: usize) -> Result<Var> {
        let v = kernels::depth_to_space(self.value(x), f)?;
        let rg = self.rg(x);
        Ok(self.push(v, Op::DepthToSpace(x, f), rg))
    }

    /// Nearest 2x upsampling cropped to `(h, w)`.
    pub fn upsample2(&mut self, x: Var, h: usize, w: usize) -> Var {
        let v = kernels::upsample2_nearest(self.value(x), h, w);
        let rg = self.rg(x);
        self.push(v, Op::Upsample(x), rg)
    }

    /// Affine per-channel normalization with constant statistics.
    pub fn channel_affine_norm(&mut self, x: Var, mean: &[f64], inv_std: &[f64]) -> Result<Var> {
        let (c, h, w) = self.value(x).dims3();
        if mean.len() != c || inv_std.len() != c {
            return Err(Error::shape("channel_norm", self.value(x).shape(), &[mean.len()]));
        }
        let plane = h * w;
        let mut out = self.value(x).clone();
        for (i, o) in out.data_mut().iter_mut().enumerate() {
            let ch = i / plane;
            *o = (*o - mean[ch]) * inv_std[ch];
        }
        let rg = self.rg(x);
        Ok(self.push(
            out,
            Op::ChannelNorm {
                x,
                inv_std: inv_std.to_vec(),
            },
            rg,
        ))
    }

    /// `width[c] * round(x / width[c])` with an identity (straight-through) gradient.
    pub fn round_ste(&mut self, x: Var, width: Var) -> Result<Var> {
        let (c, h, w) = self.value(x).dims3();
        if self.value(width).shape() != [c] {
            return Err(Error::shape("round_ste", self.value(x).shape(), self.value(width).shape()));
        }
        let plane = h * w;
        let qw = self.value(width).data().to_vec();
        let mut out = self.value(x).clone();
        for (i, o) in out.data_mut().iter_mut().enumerate() {
            let q = qw[i / plane];
            *o = q * round_half_away(*o / q);
        }
        let rg = self.rg(x);
        Ok(self.push(out, Op::RoundSte(x), rg))
    }

    /// Scale-space warp of `prev` (CxHxW) by `flow` (3xHxW: dx, dy, sigma index).
    pub fn warp(&mut self, prev: Var, flow: Var, sigmas: &[f64]) -> Result<Var> {
        let pyramid = warp_kernel::build_pyramid(self.value(prev), sigmas);
        let out = warp_kernel::sample(&pyramid, self.value(flow))?;
        let rg = self.rg(prev) || self.rg(flow);
        Ok(self.push(
            out,
            Op::Warp {
                prev,
                flow,
                pyramid,
                sigmas: sigmas.to_vec(),
            },
            rg,
        ))
    }

    /// Total `-log2 p(y | mu, sigma, width)` over all elements (a 1-element tensor).
    pub fn codelength(&mut self, y: Var, mu: Var, sigma: Var, width: Var) -> Result<Var> {
        self.check_same("codelength", y, mu)?;
        self.check_same("codelength", y, sigma)?;
        let (c, h, w) = self.value(y).dims3();
        if self.value(width).shape() != [c] {
            return Err(Error::shape("codelength", self.value(y).shape(), self.value(width).shape()));
        }
        let plane = h * w;
        let (yv, mv, sv, wv) = (
            self.value(y).data(),
            self.value(mu).data(),
            self.value(sigma).data(),
            self.value(width).data(),
        );
        let mut bits = 0.0;
        for i in 0..yv.len() {
            let p = interval_mass(yv[i] - mv[i], sv[i], wv[i / plane]).max(P_MIN);
            bits -= libm::log2(p);
        }
        let rg = self.rg(y) || self.rg(mu) || self.rg(sigma) || self.rg(width);
        Ok(self.push(Tensor::scalar(bits), Op::Codelength { y, mu, sigma, width }, rg))
    }

    /// `sum_r weights[r] * x[r, :]` for a 2-D `x`, giving a 1-D result.
    pub fn row_mix(&mut self, x: Var, weights: &[f64]) -> Result<Var> {
        let shape = self.value(x).shape();
        if shape.len() != 2 || shape[0] != weights.len() {
            return Err(Error::shape("row_mix", shape, &[weights.len()]));
        }
        let cols = shape[1];
        let xv = self.value(x).data();
        let mut out = vec![0.0; cols];
        for (r, wr) in weights.iter().enumerate() {
            for (o, v) in out.iter_mut().zip(&xv[r * cols..(r + 1) * cols]) {
                *o += wr * v;
            }
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::from_parts(vec![cols], out),
            Op::RowMix {
                x,
                weights: weights.to_vec(),
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let m = self.value(a).mse(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::scalar(m), Op::Mse(a, b), rg))
    }

    /// Reverse pass from a scalar `loss`. Returns gradients for every parameter
    /// leaf that the loss depends on.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::scalar(1.0));
        let mut max_param = 0;
        for n in &self.nodes {
            if let Op::Param(id) = n.op {
                max_param = max_param.max(id + 1);
            }
        }
        let mut by_param = vec![None; max_param];

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let mut acc = |v: Var, t: Tensor| {
                if !self.nodes[v.0].requires_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(e) => e.add_assign(&t),
                    slot @ None => *slot = Some(t),
                }
            };
            match &node.op {
                Op::Constant => {}
                Op::Param(id) => {
                    by_param[*id] = Some(g);
                }
                Op::Add(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g);
                }
                Op::Sub(a, b) => {
                    acc(*b, g.scale(-1.0));
                    acc(*a, g);
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    acc(*a, g.zip_map(vb, |x, y| x * y)?);
                    acc(*b, g.zip_map(va, |x, y| x * y)?);
                }
                Op::Scale(a, s) => acc(*a, g.scale(*s)),
                Op::AddScalar(a) => acc(*a, g),
                Op::MulChannels(x, v) => {
                    let (_, h, w) = self.value(*x).dims3();
                    let plane = h * w;
                    let vv = self.value(*v).data();
                    let xv = self.value(*x).data();
                    let mut gv = vec![0.0; vv.len()];
                    let mut gx = g.clone();
                    for (idx, gi) in gx.data_mut().iter_mut().enumerate() {
                        gv[idx / plane] += *gi * xv[idx];
                        *gi *= vv[idx / plane];
                    }
                    acc(*x, gx);
                    acc(*v, Tensor::from_parts(vec![vv.len()], gv));
                }
                Op::Conv { x, w, b, stride } => {
                    let (gx, gw, gb) = kernels::conv2d_backward(
                        self.value(*x),
                        self.value(*w),
                        self.value(*b),
                        *stride,
                        &g,
                        self.rg(*x),
                    )?;
                    if let Some(gx) = gx {
                        acc(*x, gx);
                    }
                    acc(*w, gw);
                    acc(*b, gb);
                }
                Op::LeakyRelu(x) => {
                    let gx = g.zip_map(self.value(*x), |gi, a| if a >= 0.0 { gi } else { LEAKY_SLOPE * gi })?;
                    acc(*x, gx);
                }
                Op::Sigmoid(x) => {
                    let gx = g.zip_map(&node.value, |gi, s| gi * s * (1.0 - s))?;
                    acc(*x, gx);
                }
                Op::Softplus(x) => {
                    let gx = g.zip_map(self.value(*x), |gi, a| gi * sigmoid(a))?;
                    acc(*x, gx);
                }
                Op::Exp(x) => {
                    let gx = g.zip_map(&node.value, |gi, e| gi * e)?;
                    acc(*x, gx);
                }
                Op::Clamp01(x) => {
                    let gx = g.zip_map(self.value(*x), |gi, a| if (0.0..=1.0).contains(&a) { gi } else { 0.0 })?;
                    acc(*x, gx);
                }
                Op::Concat(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let c = self.value(*p).shape()[0];
                        acc(*p, g.slice_channels(start, c));
                        start += c;
                    }
                }
                Op::Slice { x, start } => {
                    let (c, h, w) = self.value(*x).dims3();
                    let plane = h * w;
                    let mut gx = Tensor::zeros(&[c, h, w]);
                    gx.data_mut()[start * plane..start * plane + g.numel()].copy_from_slice(g.data());
                    acc(*x, gx);
                }
                Op::SpaceToDepth(x, f) => acc(*x, kernels::depth_to_space(&g, *f)?),
                Op::DepthToSpace(x, f) => acc(*x, kernels::space_to_depth(&g, *f)?),
                Op::Upsample(x) => {
                    let (_, h, w) = self.value(*x).dims3();
                    acc(*x, kernels::upsample2_nearest_backward(&g, h, w));
                }
                Op::ChannelNorm { x, inv_std } => {
                    let (_, h, w) = self.value(*x).dims3();
                    let plane = h * w;
                    let mut gx = g;
                    for (idx, gi) in gx.data_mut().iter_mut().enumerate() {
                        *gi *= inv_std[idx / plane];
                    }
                    acc(*x, gx);
                }
                Op::RoundSte(x) => acc(*x, g),
                Op::Warp {
                    prev,
                    flow,
                    pyramid,
                    sigmas,
                } => {
                    let (gp, gf) =
                        warp_kernel::sample_backward(pyramid, sigmas, self.value(*flow), &g, self.rg(*prev))?;
                    if let Some(gp) = gp {
                        acc(*prev, gp);
                    }
                    acc(*flow, gf);
                }
                Op::Codelength { y, mu, sigma, width } => {
                    let g0 = g.data()[0];
                    let (c, h, w) = self.value(*y).dims3();
                    let plane = h * w;
                    let (yv, mv, sv, wv) = (
                        self.value(*y).data(),
                        self.value(*mu).data(),
                        self.value(*sigma).data(),
                        self.value(*width).data(),
                    );
                    let n = yv.len();
                    let (mut gy, mut gm, mut gs) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
                    let mut gw = vec![0.0; c];
                    for i in 0..n {
                        let (d, s, q) = (yv[i] - mv[i], sv[i], wv[i / plane]);
                        let p = interval_mass(d, s, q);
                        let (pa, pb) = ((d + 0.5 * q) / s, (d - 0.5 * q) / s);
                        let (fa, fb) = (phi_pdf(pa), phi_pdf(pb));
                        // dL/dp; below the floor only let gradients through that raise p
                        let dldp = -g0 / (p.max(P_MIN) * LN_2);
                        let dldp = if p < P_MIN && dldp > 0.0 { 0.0 } else { dldp };
                        let dp_dd = (fa - fb) / s;
                        gy[i] = dldp * dp_dd;
                        gm[i] = -dldp * dp_dd;
                        gs[i] = dldp * (-pa * fa + pb * fb) / s;
                        gw[i / plane] += dldp * (fa + fb) / (2.0 * s);
                    }
                    let shape = vec![c, h, w];
                    acc(*y, Tensor::from_parts(shape.clone(), gy));
                    acc(*mu, Tensor::from_parts(shape.clone(), gm));
                    acc(*sigma, Tensor::from_parts(shape, gs));
                    acc(*width, Tensor::from_parts(vec![c], gw));
                }
                Op::RowMix { x, weights } => {
                    let cols = g.numel();
                    let mut gx = Vec::with_capacity(weights.len() * cols);
                    for wr in weights {
                        gx.extend(g.data().iter().map(|v| wr * v));
                    }
                    acc(*x, Tensor::from_parts(vec![weights.len(), cols], gx));
                }
                Op::Sum(x) => {
                    let shape = self.value(*x).shape().to_vec();
                    acc(*x, Tensor::full(&shape, g.data()[0]));
                }
                Op::Mse(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    let k = 2.0 * g.data()[0] / va.numel() as f64;
                    let d = va.zip_map(vb, |x, y| k * (x - y))?;
                    acc(*b, d.scale(-1.0));
                    acc(*a, d);
                }
            }
        }
        Ok(Gradients { by_param })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_params_has_unit_gradient() {
        let mut t = Tape::new();
        let p = t.param(0, Tensor::full(&[2, 3, 3], 0.7));
        let s = t.sum(p);
        let g = t.backward(s).unwrap();
        assert!(g.get(0).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn zero_scaled_loss_has_zero_gradient() {
        let mut t = Tape::new();
        let p = t.param(0, Tensor::full(&[4], 2.0));
        let e = t.exp(p);
        let s = t.sum(e);
        let z = t.scale(s, 0.0);
        let g = t.backward(z).unwrap();
        assert!(g.get(0).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut t = Tape::new();
        let p = t.param(0, Tensor::zeros(&[2]));
        assert!(t.backward(p).is_err());
    }

    #[test]
    fn repeated_backward_is_bitwise_identical() {
        let mut t = Tape::new();
        let p = t.param(0, Tensor::from_fn3(1, 3, 3, |_, y, x| (y * 3 + x) as f64 * 0.1 - 0.4));
        let a = t.leaky_relu(p);
        let b = t.sigmoid(a);
        let m = t.mul(a, b).unwrap();
        let s = t.sum(m);
        let g1 = t.backward(s).unwrap();
        let g2 = t.backward(s).unwrap();
        assert_eq!(g1.get(0), g2.get(0));
    }

    #[test]
    fn floored_elements_counts_far_tail_symbols() {
        let mut t = Tape::new();
        let y = t.constant(Tensor::new(vec![1, 1, 3], vec![0.0, 1.0, 9.0]).unwrap());
        let mu = t.constant(Tensor::zeros(&[1, 1, 3]));
        let sigma = t.constant(Tensor::full(&[1, 1, 3], 1.0));
        let width = t.constant(Tensor::full(&[1], 1.0));
        let bits = t.codelength(y, mu, sigma, width).unwrap();
        assert_eq!(t.floored_elements(), 1);
        // the floored symbol costs exactly 16 bits
        let rest = -(interval_mass(0.0, 1.0, 1.0).log2() + interval_mass(1.0, 1.0, 1.0).log2());
        assert!((t.scalar(bits) - rest - 16.0).abs() < 1e-12);
    }
}
