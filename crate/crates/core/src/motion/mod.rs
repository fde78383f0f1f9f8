//! Scale-space flow: the blur-stack warp, flow combination, and the zero-bit
//! in-loop flow predictor.

pub mod warp;

use crate::autodiff::{Tape, Var};
use crate::backbone::{attach_level_map, dm_block, DMBlock, DMBlockConfig, Feature, PIXEL_FACTOR};
use crate::error::{Error, Result};
use crate::norm::{channel_normalize, ChannelStats};
use crate::params::{Bound, Conv2dLayer, ParamStore};
use crate::rateflex::LevelEmbedding;
use crate::tensor::Tensor;
use rand::Rng;

/// Depth of the blur stack.
pub const PYRAMID_LEVELS: usize = 5;
pub const BASE_SIGMA: f64 = 1.0;

/// Per-pixel `(dx, dy, sigma index)`.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField(Tensor);

impl FlowField {
    pub fn new(t: Tensor) -> Result<Self> {
        if t.shape().len() != 3 || t.shape()[0] != 3 {
            return Err(Error::shape("flow field", t.shape(), &[3]));
        }
        if !t.all_finite() {
            return Err(Error::NonFinite("flow field".into()));
        }
        Ok(Self(t))
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        Self(Tensor::zeros(&[3, h, w]))
    }

    /// Constant displacement with zero blur.
    pub fn translation(h: usize, w: usize, dx: f64, dy: f64) -> Self {
        Self(Tensor::from_fn3(3, h, w, |c, _, _| match c {
            0 => dx,
            1 => dy,
            _ => 0.0,
        }))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    /// Mean endpoint error of the displacement channels against `other`.
    pub fn endpoint_error(&self, other: &FlowField) -> Result<f64> {
        if self.0.shape() != other.0.shape() {
            return Err(Error::shape("endpoint_error", self.0.shape(), other.0.shape()));
        }
        let (_, h, w) = self.0.dims3();
        let plane = h * w;
        let (a, b) = (self.0.data(), other.0.data());
        let total: f64 = (0..plane)
            .map(|i| {
                let ex = a[i] - b[i];
                let ey = a[plane + i] - b[plane + i];
                (ex * ex + ey * ey).sqrt()
            })
            .sum();
        Ok(total / plane as f64)
    }
}

/// Pre-blurred copies of a frame; level 0 is the frame itself.
#[derive(Clone, Debug)]
pub struct ScaleSpaceVolume {
    pub levels: Vec<Tensor>,
    pub sigmas: Vec<f64>,
}

impl ScaleSpaceVolume {
    pub fn new(frame: &Tensor, sigmas: &[f64]) -> Self {
        Self {
            levels: warp::build_pyramid(frame, sigmas),
            sigmas: sigmas.to_vec(),
        }
    }

    pub fn sample(&self, flow: &FlowField) -> Result<Tensor> {
        warp::sample(&self.levels, flow.tensor())
    }
}

pub fn default_sigmas() -> Vec<f64> {
    warp::pyramid_sigmas(PYRAMID_LEVELS, BASE_SIGMA)
}

/// Samples `prev` at `(x + dx, y + dy, sigma)` with clamp-to-edge borders.
pub fn scale_space_warp(prev: &Tensor, flow: &FlowField) -> Result<Tensor> {
    ScaleSpaceVolume::new(prev, &default_sigmas()).sample(flow)
}

/// `mask * base + delta` on all three flow channels.
pub fn combine_flow(base: &FlowField, mask: &Tensor, delta: &FlowField) -> Result<FlowField> {
    let mut tape = Tape::new();
    let b = tape.constant(base.tensor().clone());
    let m = tape.constant(mask.clone());
    let d = tape.constant(delta.tensor().clone());
    let f = combine_flow_on_tape(&mut tape, b, m, d)?;
    FlowField::new(tape.value(f).clone())
}

pub fn combine_flow_on_tape(tape: &mut Tape, base: Var, mask: Var, delta: Var) -> Result<Var> {
    let (_, h, w) = tape.value(base).dims3();
    if tape.value(mask).shape() != [1, h, w] {
        return Err(Error::shape("combine_flow", tape.value(mask).shape(), &[1, h, w]));
    }
    let m3 = tape.concat(&[mask, mask, mask])?;
    let mb = tape.mul(m3, base)?;
    tape.add(mb, delta)
}

/// Two-scale DM network mapping (previous flow, two reconstructions, level)
/// to a base flow. Its output head starts at zero, so an untrained predictor
/// repeats the previous flow.
#[derive(Clone, Debug)]
pub struct Predictor {
    blocks4: Vec<DMBlock>,
    blocks8: Vec<DMBlock>,
    downs: Vec<Conv2dLayer>,
    ups: Vec<Conv2dLayer>,
    head: Conv2dLayer,
    pub channels: usize,
}

pub const PREDICTOR_PIXEL_IN: usize = 9;

impl Predictor {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        channels: usize,
        depth: usize,
        inner_convs: usize,
        level_dims: usize,
    ) -> Result<Self> {
        let input = PREDICTOR_PIXEL_IN * PIXEL_FACTOR * PIXEL_FACTOR + level_dims;
        let c = channels;
        let mut s = Self {
            blocks4: Vec::new(),
            blocks8: Vec::new(),
            downs: Vec::new(),
            ups: Vec::new(),
            head: Conv2dLayer::new(store, rng, &format!("{name}.head"), 2 * c, 3 * 16, 1, 1, 0.0),
            channels,
        };
        for d in 0..depth {
            let cin = if d == 0 { input } else { 2 * c };
            s.blocks4
                .push(DMBlock::new(store, rng, &format!("{name}.p4_{d}"), cin, DMBlockConfig::new(c, inner_convs, 4))?);
            s.downs
                .push(Conv2dLayer::new(store, rng, &format!("{name}.down{d}"), cin, c, 3, 2, 1.0));
            s.blocks8
                .push(DMBlock::new(store, rng, &format!("{name}.p8_{d}"), c, DMBlockConfig::new(c, inner_convs, 8))?);
            s.ups.push(Conv2dLayer::new(store, rng, &format!("{name}.up{d}"), c, c, 3, 1, 1.0));
        }
        Ok(s)
    }

    /// Base flow `prev_flow + correction` from already-decoded data only.
    #[allow(clippy::too_many_arguments)]
    pub fn predict(
        &self,
        tape: &mut Tape,
        p: &Bound,
        prev_flow: Var,
        recon_tm2: Var,
        recon_tm1: Var,
        level: &LevelEmbedding,
        stats: &mut ChannelStats,
        training: bool,
    ) -> Result<Var> {
        let (_, h, w) = tape.value(prev_flow).dims3();
        let parts = [prev_flow, recon_tm2, recon_tm1];
        let mut s2d = Vec::with_capacity(3);
        for v in parts {
            s2d.push(tape.space_to_depth(v, PIXEL_FACTOR)?);
        }
        let x = tape.concat(&s2d)?;
        let x = channel_normalize(tape, x, stats, training)?;
        let mut x = attach_level_map(tape, x, level)?;
        let (h4, w4) = (h.div_ceil(PIXEL_FACTOR), w.div_ceil(PIXEL_FACTOR));
        for d in 0..self.blocks4.len() {
            let a = dm_block(tape, p, &self.blocks4[d], Feature { var: x, scale: 4 })?;
            let dn = self.downs[d].forward(tape, p, x)?;
            let dn = tape.leaky_relu(dn);
            let b = dm_block(tape, p, &self.blocks8[d], Feature { var: dn, scale: 8 })?;
            let b = tape.leaky_relu(b.var);
            let up = tape.upsample2(b, h4, w4);
            let up = self.ups[d].forward(tape, p, up)?;
            let a = tape.leaky_relu(a.var);
            x = tape.concat(&[a, up])?;
        }
        let corr = self.head.forward(tape, p, x)?;
        let corr = tape.depth_to_space(corr, PIXEL_FACTOR)?;
        tape.add(prev_flow, corr)
    }
}
