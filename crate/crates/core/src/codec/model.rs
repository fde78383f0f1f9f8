//! The I-frame and P-frame networks and their shared forward passes.
//!
//! Encoder and decoder run the same code: the only difference is where each
//! block's quantized main codelayer comes from (see [`Latents`]).

use super::config::ModelConfig;
use crate::autodiff::{Tape, Var};
use crate::backbone::{build_coder_stack, CoderStack, CoderStackConfig, StackIo, PIXEL_FACTOR};
use crate::codelayer::{hyper_decode, hyperprior_code, level_widths, sigma1_map, HyperOutput, Hyperprior, QuantMode};
use crate::error::Result;
use crate::kernels::conv_out_dim;
use crate::motion::{combine_flow_on_tape, warp::pyramid_sigmas, Predictor, PREDICTOR_PIXEL_IN};
use crate::norm::ChannelStats;
use crate::params::{Bound, ParamStore};
use crate::rateflex::LevelEmbedding;
use crate::tensor::Tensor;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Flow displacement head gain: raw decoder outputs are scaled to pixels.
const FLOW_GAIN: f64 = 4.0;
/// Offset on the raw blur channel so a fresh model starts nearly unblurred.
const SIGMA_BIAS: f64 = -4.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlockKind {
    Intra,
    Flow,
    Residue,
}

impl BlockKind {
    pub fn name(self) -> &'static str {
        match self {
            BlockKind::Intra => "intra",
            BlockKind::Flow => "flow",
            BlockKind::Residue => "residue",
        }
    }
}

#[derive(Clone, Debug)]
pub struct Block {
    pub stack: CoderStack,
    pub hyper: Hyperprior,
}

/// Normalization statistics of every normalized input.
#[derive(Clone, Debug, PartialEq)]
pub struct NormSet {
    pub intra: ChannelStats,
    pub flow: ChannelStats,
    pub residue: ChannelStats,
    pub predictor: ChannelStats,
}

impl NormSet {
    pub fn iter_named(&self) -> [(&'static str, &ChannelStats); 4] {
        [
            ("intra", &self.intra),
            ("flow", &self.flow),
            ("residue", &self.residue),
            ("predictor", &self.predictor),
        ]
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ChannelStats> {
        match name {
            "intra" => Some(&mut self.intra),
            "flow" => Some(&mut self.flow),
            "residue" => Some(&mut self.residue),
            "predictor" => Some(&mut self.predictor),
            _ => None,
        }
    }

    pub fn freeze_all(&mut self) {
        for s in [&mut self.intra, &mut self.flow, &mut self.residue, &mut self.predictor] {
            s.freeze();
        }
    }
}

#[derive(Clone, Debug)]
pub struct Architecture {
    pub intra: Block,
    pub flow: Block,
    pub residue: Block,
    pub predictor: Predictor,
    pub sigmas: Vec<f64>,
    pub config: ModelConfig,
}

impl Architecture {
    pub fn block(&self, kind: BlockKind) -> &Block {
        match kind {
            BlockKind::Intra => &self.intra,
            BlockKind::Flow => &self.flow,
            BlockKind::Residue => &self.residue,
        }
    }
}

/// Weights, normalization statistics and network structure.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub norms: NormSet,
    pub arch: Architecture,
}

fn build_block<R: Rng + ?Sized>(
    store: &mut ParamStore,
    rng: &mut R,
    name: &str,
    cfg: &ModelConfig,
    dec_channels: usize,
    io: StackIo,
) -> Result<Block> {
    let stack_cfg = CoderStackConfig::three_scale(
        cfg.enc_channels,
        dec_channels,
        cfg.inner_convs,
        cfg.q0_channels,
        cfg.q1_channels,
    );
    let stack = build_coder_stack(store, rng, name, &stack_cfg, io)?;
    let hyper = Hyperprior::new(
        store,
        rng,
        &format!("{name}.hyper"),
        cfg.q0_channels,
        cfg.q1_channels,
        cfg.level_dims,
        cfg.hyper_channels,
    );
    Ok(Block { stack, hyper })
}

impl Model {
    /// Freshly initialized model, seeded by `config.init_seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut store = ParamStore::new();
        let s = config.state_channels;
        let le = config.level_dims;
        let ff = PIXEL_FACTOR * PIXEL_FACTOR;
        let intra = build_block(
            &mut store,
            &mut rng,
            "intra",
            &config,
            config.iframe_dec_channels,
            StackIo {
                pixel_in: 3,
                side_in: 0,
                level_dims: le,
                decoder_side_in: 0,
                pixel_out: 3,
                side_out: s,
            },
        )?;
        let flow = build_block(
            &mut store,
            &mut rng,
            "flow",
            &config,
            config.flow_dec_channels,
            StackIo {
                pixel_in: 12,
                side_in: s,
                level_dims: le,
                decoder_side_in: s + 3 * ff,
                pixel_out: 4,
                side_out: s,
            },
        )?;
        let residue = build_block(
            &mut store,
            &mut rng,
            "residue",
            &config,
            config.residue_dec_channels,
            StackIo {
                pixel_in: 3,
                side_in: s,
                level_dims: le,
                decoder_side_in: s,
                pixel_out: 3,
                side_out: s,
            },
        )?;
        let predictor = Predictor::new(
            &mut store,
            &mut rng,
            "predictor",
            config.predictor_channels,
            config.predictor_depth,
            config.inner_convs,
            le,
        )?;
        let norms = NormSet {
            intra: ChannelStats::new(intra.stack.encoder_in_channels()),
            flow: ChannelStats::new(flow.stack.encoder_in_channels()),
            residue: ChannelStats::new(residue.stack.encoder_in_channels()),
            predictor: ChannelStats::new(PREDICTOR_PIXEL_IN * ff),
        };
        let arch = Architecture {
            intra,
            flow,
            residue,
            predictor,
            sigmas: pyramid_sigmas(config.pyramid_levels, config.base_sigma),
            config: config.clone(),
        };
        Ok(Self {
            config,
            params: store,
            norms,
            arch,
        })
    }

    pub fn levels(&self) -> usize {
        self.config.levels
    }
}

/// Decoder-known inputs available when a block's latent is requested.
#[derive(Clone, Copy, Debug, Default)]
pub struct Known {
    pub prev_recon: Option<Var>,
    pub base_flow: Option<Var>,
    pub warped_base: Option<Var>,
    pub compensated: Option<Var>,
    pub state: Option<Var>,
}

/// Source of each block's quantized main codelayer.
pub trait Latents {
    fn latent(
        &mut self,
        tape: &mut Tape,
        p: &Bound,
        arch: &Architecture,
        kind: BlockKind,
        known: &Known,
        level: &LevelEmbedding,
    ) -> Result<Var>;
}

/// Encoder side: runs the analysis networks and the hyperprior on the source frame.
pub struct EncodeLatents<'a, R: Rng + ?Sized> {
    pub x: Var,
    pub mode: QuantMode,
    pub training: bool,
    pub norms: &'a mut NormSet,
    pub rng: &'a mut R,
    pub outputs: Vec<(BlockKind, HyperOutput)>,
}

impl<R: Rng + ?Sized> Latents for EncodeLatents<'_, R> {
    fn latent(
        &mut self,
        tape: &mut Tape,
        p: &Bound,
        arch: &Architecture,
        kind: BlockKind,
        known: &Known,
        level: &LevelEmbedding,
    ) -> Result<Var> {
        let missing = || crate::error::Error::InvalidArgument(format!("{} block input missing", kind.name()));
        let block = arch.block(kind);
        let y0 = match kind {
            BlockKind::Intra => block
                .stack
                .encode(tape, p, self.x, &[], level, &mut self.norms.intra, self.training)?,
            BlockKind::Flow => {
                let prev = known.prev_recon.ok_or_else(missing)?;
                let base = known.base_flow.ok_or_else(missing)?;
                let warped = known.warped_base.ok_or_else(missing)?;
                let state = known.state.ok_or_else(missing)?;
                let pixels = tape.concat(&[self.x, prev, base, warped])?;
                block
                    .stack
                    .encode(tape, p, pixels, &[state], level, &mut self.norms.flow, self.training)?
            }
            BlockKind::Residue => {
                let comp = known.compensated.ok_or_else(missing)?;
                let state = known.state.ok_or_else(missing)?;
                let diff = tape.sub(self.x, comp)?;
                block
                    .stack
                    .encode(tape, p, diff, &[state], level, &mut self.norms.residue, self.training)?
            }
        };
        let out = hyperprior_code(tape, p, &block.hyper, y0.var, level, self.mode, self.rng)?;
        self.outputs.push((kind, out));
        Ok(out.q0.recon)
    }
}

/// Shapes of the two codelayers of a block for an `h x w` frame.
pub fn codelayer_dims(cfg: &ModelConfig, h: usize, w: usize) -> ((usize, usize, usize), (usize, usize, usize)) {
    let (h0, w0) = (h.div_ceil(16), w.div_ceil(16));
    let (h1, w1) = (
        conv_out_dim(conv_out_dim(h0, 2), 2),
        conv_out_dim(conv_out_dim(w0, 2), 2),
    );
    ((cfg.q0_channels, h0, w0), (cfg.q1_channels, h1, w1))
}

/// Reconstructed intra frame and the state it seeds.
#[derive(Clone, Copy, Debug)]
pub struct IntraVars {
    pub recon: Var,
    pub state: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct InterVars {
    pub recon: Var,
    pub flow: Var,
    pub base_flow: Var,
    pub mask: Var,
    pub compensated: Var,
    pub state: Var,
}

/// Tape handles of the running P-frame context.
#[derive(Clone, Copy, Debug)]
pub struct ContextVars {
    pub prev_recon: Var,
    pub prev_prev_recon: Var,
    pub prev_flow: Var,
    pub state: Var,
}

fn decode_block(
    tape: &mut Tape,
    p: &Bound,
    block: &Block,
    q0: Var,
    side: Option<Var>,
    level: &LevelEmbedding,
    h: usize,
    w: usize,
) -> Result<(Var, Var)> {
    let out = block
        .stack
        .decode(tape, p, q0, side, level, h / PIXEL_FACTOR, w / PIXEL_FACTOR)?;
    let pixel = out.pixel.expect("every block has a pixel head");
    let state = out.side.expect("every block has a state head");
    Ok((pixel, state))
}

pub fn intra_forward(
    tape: &mut Tape,
    p: &Bound,
    arch: &Architecture,
    latents: &mut dyn Latents,
    level: &LevelEmbedding,
    h: usize,
    w: usize,
) -> Result<IntraVars> {
    let q0 = latents.latent(tape, p, arch, BlockKind::Intra, &Known::default(), level)?;
    let (pixel, state) = decode_block(tape, p, &arch.intra, q0, None, level, h, w)?;
    let shifted = tape.add_scalar(pixel, 0.5);
    let recon = tape.clamp01(shifted);
    Ok(IntraVars { recon, state })
}

#[allow(clippy::too_many_arguments)]
pub fn inter_forward(
    tape: &mut Tape,
    p: &Bound,
    arch: &Architecture,
    latents: &mut dyn Latents,
    ctx: ContextVars,
    level: &LevelEmbedding,
    predictor_stats: &mut ChannelStats,
    training: bool,
) -> Result<InterVars> {
    let (_, h, w) = tape.value(ctx.prev_recon).dims3();
    let enabled = arch.config.predictor_enabled;
    let base_flow = if enabled {
        arch.predictor.predict(
            tape,
            p,
            ctx.prev_flow,
            ctx.prev_prev_recon,
            ctx.prev_recon,
            level,
            predictor_stats,
            training,
        )?
    } else {
        tape.constant(Tensor::zeros(&[3, h, w]))
    };
    let warped_base = tape.warp(ctx.prev_recon, base_flow, &arch.sigmas)?;
    let known = Known {
        prev_recon: Some(ctx.prev_recon),
        base_flow: Some(base_flow),
        warped_base: Some(warped_base),
        compensated: None,
        state: Some(ctx.state),
    };
    let q0 = latents.latent(tape, p, arch, BlockKind::Flow, &known, level)?;
    let base_s2d = tape.space_to_depth(base_flow, PIXEL_FACTOR)?;
    let side = tape.concat(&[ctx.state, base_s2d])?;
    let (raw, state1) = decode_block(tape, p, &arch.flow, q0, Some(side), level, h, w)?;

    let mask_raw = tape.slice_channels(raw, 0, 1);
    let disp = tape.slice_channels(raw, 1, 2);
    let disp = tape.scale(disp, FLOW_GAIN);
    let sig_raw = tape.slice_channels(raw, 3, 1);
    let sig_raw = tape.add_scalar(sig_raw, SIGMA_BIAS);
    let sig = tape.sigmoid(sig_raw);
    let sig = tape.scale(sig, (arch.sigmas.len() - 1) as f64);
    let delta = tape.concat(&[disp, sig])?;
    let (mask, flow) = if enabled {
        let mask = tape.sigmoid(mask_raw);
        (mask, combine_flow_on_tape(tape, base_flow, mask, delta)?)
    } else {
        (tape.constant(Tensor::zeros(&[1, h, w])), delta)
    };

    let compensated = tape.warp(ctx.prev_recon, flow, &arch.sigmas)?;
    let known = Known {
        compensated: Some(compensated),
        state: Some(state1),
        ..known
    };
    let q0 = latents.latent(tape, p, arch, BlockKind::Residue, &known, level)?;
    let (residue, state) = decode_block(tape, p, &arch.residue, q0, Some(state1), level, h, w)?;
    let sum = tape.add(compensated, residue)?;
    let recon = tape.clamp01(sum);
    Ok(InterVars {
        recon,
        flow,
        base_flow,
        mask,
        compensated,
        state,
    })
}

/// Widths of both codelayers of a block at `level`, as plain values.
pub fn block_widths(tape: &mut Tape, p: &Bound, block: &Block, level: &LevelEmbedding) -> Result<(Vec<f64>, Vec<f64>)> {
    let w0 = level_widths(tape, p.var(block.hyper.log_width0), level)?;
    let w1 = level_widths(tape, p.var(block.hyper.log_width1), level)?;
    Ok((tape.value(w0).data().to_vec(), tape.value(w1).data().to_vec()))
}

/// Decoder-side Gaussian parameters for a block's side codelayer.
pub fn side_params(
    tape: &mut Tape,
    p: &Bound,
    block: &Block,
    dims1: (usize, usize, usize),
) -> Result<crate::codelayer::GaussianParams> {
    let s1 = sigma1_map(tape, p, &block.hyper, dims1)?;
    Ok(crate::codelayer::GaussianParams {
        mu: Tensor::zeros(&[dims1.0, dims1.1, dims1.2]),
        sigma: tape.value(s1).clone(),
    })
}

/// Decoder-side Gaussian parameters for the main codelayer given the side one.
pub fn main_params(
    tape: &mut Tape,
    p: &Bound,
    block: &Block,
    q1: Var,
    level: &LevelEmbedding,
    dims0: (usize, usize, usize),
) -> Result<crate::codelayer::GaussianParams> {
    let (mu, sigma) = hyper_decode(tape, p, &block.hyper, q1, level, dims0)?;
    Ok(crate::codelayer::GaussianParams {
        mu: tape.value(mu).clone(),
        sigma: tape.value(sigma).clone(),
    })
}
