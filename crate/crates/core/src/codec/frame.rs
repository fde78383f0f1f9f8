//! Per-frame encode/decode and the frame record format.

use super::model::{
    block_widths, codelayer_dims, inter_forward, intra_forward, main_params, side_params, Architecture, BlockKind,
    ContextVars, EncodeLatents, Known, Latents, Model,
};
use crate::autodiff::{Tape, Var};
use crate::codelayer::{
    codelayer_from_tape, codelength, params_from_tape, range_decode, range_encode, Codelayer, GaussianParams,
    HyperOutput, QuantMode,
};
use crate::error::{Error, Result};
use crate::motion::FlowField;
use crate::params::Bound;
use crate::rateflex::{embed_level, level_from_fixed, level_to_fixed, LevelEmbedding};
use crate::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Propagated 4x-scale feature tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState(pub Tensor);

/// Everything a P-frame needs from the past; identical on both sides.
#[derive(Clone, Debug, PartialEq)]
pub struct PFrameContext {
    pub prev_recon: Tensor,
    pub prev_prev_recon: Tensor,
    pub prev_flow: FlowField,
    pub state: ModelState,
    pub frame_index: usize,
}

impl PFrameContext {
    /// Context for the first P-frame after an I-frame: zero flow and the
    /// I-frame reconstruction standing in for both previous frames.
    pub fn after_iframe(recon: &Tensor, state: &ModelState) -> Self {
        let (_, h, w) = recon.dims3();
        Self {
            prev_recon: recon.clone(),
            prev_prev_recon: recon.clone(),
            prev_flow: FlowField::zeros(h, w),
            state: state.clone(),
            frame_index: 1,
        }
    }

    /// Context after decoding a P-frame with this context.
    pub fn advance(&self, recon: &Tensor, flow: &FlowField, state: &ModelState) -> Self {
        Self {
            prev_recon: recon.clone(),
            prev_prev_recon: self.prev_recon.clone(),
            prev_flow: flow.clone(),
            state: state.clone(),
            frame_index: self.frame_index + 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FrameType {
    I = 0,
    P = 1,
}

/// Coded payloads of one block: side codelayer first.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockPayload {
    pub q1: Vec<u8>,
    pub q0: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedFrame {
    pub frame_type: FrameType,
    /// 8.8 fixed point.
    pub level: u16,
    pub blocks: Vec<BlockPayload>,
}

impl EncodedFrame {
    pub fn level(&self) -> f64 {
        level_from_fixed(self.level)
    }

    /// Serialized record including the trailing CRC32.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = vec![self.frame_type as u8];
        out.extend_from_slice(&self.level.to_le_bytes());
        for b in &self.blocks {
            out.extend_from_slice(&(b.q1.len() as u32).to_le_bytes());
            out.extend_from_slice(&b.q1);
            out.extend_from_slice(&(b.q0.len() as u32).to_le_bytes());
            out.extend_from_slice(&b.q0);
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    /// Parses one record from the front of `bytes`, returning it and its length.
    pub fn parse(bytes: &[u8]) -> Result<(Self, usize)> {
        let mut r = Reader { bytes, pos: 0 };
        let frame_type = match r.u8()? {
            0 => FrameType::I,
            1 => FrameType::P,
            t => return Err(Error::Corrupt(format!("unknown frame type {t}"))),
        };
        let level = r.u16()?;
        let n = if frame_type == FrameType::I { 1 } else { 2 };
        let mut blocks = Vec::with_capacity(n);
        for _ in 0..n {
            let l1 = r.u32()? as usize;
            let q1 = r.take(l1)?.to_vec();
            let l0 = r.u32()? as usize;
            let q0 = r.take(l0)?.to_vec();
            blocks.push(BlockPayload { q1, q0 });
        }
        let body = r.pos;
        let crc = r.u32()?;
        if crc32fast::hash(&bytes[..body]) != crc {
            return Err(Error::Corrupt("frame checksum mismatch".into()));
        }
        Ok((
            Self {
                frame_type,
                level,
                blocks,
            },
            r.pos,
        ))
    }

    pub fn byte_len(&self) -> usize {
        3 + self.blocks.iter().map(|b| 8 + b.q1.len() + b.q0.len()).sum::<usize>() + 4
    }
}

pub(crate) struct Reader<'a> {
    pub bytes: &'a [u8],
    pub pos: usize,
}

impl<'a> Reader<'a> {
    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Corrupt(format!(
                "truncated: need {n} bytes at offset {}, {} left",
                self.pos,
                self.bytes.len() - self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Result of coding one frame, as seen by the encoder.
#[derive(Clone, Debug)]
pub struct FrameCoding {
    pub frame: EncodedFrame,
    pub recon: Tensor,
    pub flow: Option<FlowField>,
    pub base_flow: Option<FlowField>,
    pub state: ModelState,
    /// Ideal codelength of all codelayers.
    pub estimated_bits: f64,
    /// Per-block codelayers and their models, in payload order.
    pub codelayers: Vec<(BlockKind, [(Codelayer, GaussianParams); 2])>,
}

impl FrameCoding {
    pub fn bpp(&self) -> f64 {
        let (_, h, w) = self.recon.dims3();
        self.frame.byte_len() as f64 * 8.0 / (h * w) as f64
    }
}

fn check_frame(x: &Tensor) -> Result<(usize, usize)> {
    if x.shape().len() != 3 || x.shape()[0] != 3 {
        return Err(Error::shape("frame", x.shape(), &[3]));
    }
    let (_, h, w) = x.dims3();
    if h == 0 || w == 0 || h % 4 != 0 || w % 4 != 0 {
        return Err(Error::InvalidArgument(format!("frame {w}x{h} must have dimensions divisible by 4")));
    }
    Ok((h, w))
}

fn level_embedding(model: &Model, level: f64) -> Result<(u16, LevelEmbedding)> {
    let fixed = level_to_fixed(level.clamp(0.0, (model.levels() - 1) as f64));
    let lv = embed_level(level_from_fixed(fixed), model.levels(), model.config.level_dims)?;
    Ok((fixed, lv))
}

fn entropy_code(
    tape: &Tape,
    outputs: &[(BlockKind, HyperOutput)],
) -> Result<(Vec<BlockPayload>, f64, Vec<(BlockKind, [(Codelayer, GaussianParams); 2])>)> {
    let mut blocks = Vec::with_capacity(outputs.len());
    let mut bits = 0.0;
    let mut layers = Vec::with_capacity(outputs.len());
    for (kind, out) in outputs {
        let q1 = codelayer_from_tape(tape, &out.q1)?;
        let mu1 = Tensor::zeros(tape.value(out.sigma1).shape());
        let p1 = GaussianParams {
            mu: mu1,
            sigma: tape.value(out.sigma1).clone(),
        };
        let q0 = codelayer_from_tape(tape, &out.q0)?;
        let p0 = params_from_tape(tape, out.mu0, out.sigma0);
        bits += codelength(&q1, &p1)? + codelength(&q0, &p0)?;
        blocks.push(BlockPayload {
            q1: range_encode(&q1, &p1)?,
            q0: range_encode(&q0, &p0)?,
        });
        layers.push((*kind, [(q1, p1), (q0, p0)]));
    }
    Ok((blocks, bits, layers))
}

fn context_vars(tape: &mut Tape, ctx: &PFrameContext) -> ContextVars {
    ContextVars {
        prev_recon: tape.constant(ctx.prev_recon.clone()),
        prev_prev_recon: tape.constant(ctx.prev_prev_recon.clone()),
        prev_flow: tape.constant(ctx.prev_flow.tensor().clone()),
        state: tape.constant(ctx.state.0.clone()),
    }
}

/// Codes an I-frame at a continuous `level`.
pub fn encode_iframe(model: &Model, x: &Tensor, level: f64) -> Result<FrameCoding> {
    let (h, w) = check_frame(x)?;
    let (fixed, lv) = level_embedding(model, level)?;
    let mut tape = Tape::new();
    let p = model.params.bind(&mut tape);
    let xv = tape.constant(x.clone());
    let mut norms = model.norms.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut lat = EncodeLatents {
        x: xv,
        mode: QuantMode::Hard,
        training: false,
        norms: &mut norms,
        rng: &mut rng,
        outputs: Vec::new(),
    };
    let out = intra_forward(&mut tape, &p, &model.arch, &mut lat, &lv, h, w)?;
    let outputs = std::mem::take(&mut lat.outputs);
    let (blocks, estimated_bits, codelayers) = entropy_code(&tape, &outputs)?;
    Ok(FrameCoding {
        frame: EncodedFrame {
            frame_type: FrameType::I,
            level: fixed,
            blocks,
        },
        recon: tape.value(out.recon).clone(),
        flow: None,
        base_flow: None,
        state: ModelState(tape.value(out.state).clone()),
        estimated_bits,
        codelayers,
    })
}

/// Codes a P-frame given the shared context.
pub fn encode_pframe(model: &Model, x: &Tensor, ctx: &PFrameContext, level: f64) -> Result<FrameCoding> {
    let (h, w) = check_frame(x)?;
    if ctx.prev_recon.shape() != x.shape() {
        return Err(Error::shape("encode_pframe", x.shape(), ctx.prev_recon.shape()));
    }
    let (fixed, lv) = level_embedding(model, level)?;
    let mut tape = Tape::new();
    let p = model.params.bind(&mut tape);
    let xv = tape.constant(x.clone());
    let cv = context_vars(&mut tape, ctx);
    let mut norms = model.norms.clone();
    let mut pred_stats = norms.predictor.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut lat = EncodeLatents {
        x: xv,
        mode: QuantMode::Hard,
        training: false,
        norms: &mut norms,
        rng: &mut rng,
        outputs: Vec::new(),
    };
    let out = inter_forward(&mut tape, &p, &model.arch, &mut lat, cv, &lv, &mut pred_stats, false)?;
    let outputs = std::mem::take(&mut lat.outputs);
    let (blocks, estimated_bits, codelayers) = entropy_code(&tape, &outputs)?;
    let _ = (h, w);
    Ok(FrameCoding {
        frame: EncodedFrame {
            frame_type: FrameType::P,
            level: fixed,
            blocks,
        },
        recon: tape.value(out.recon).clone(),
        flow: Some(FlowField::new(tape.value(out.flow).clone())?),
        base_flow: Some(FlowField::new(tape.value(out.base_flow).clone())?),
        state: ModelState(tape.value(out.state).clone()),
        estimated_bits,
        codelayers,
    })
}

/// Decoder side: entropy-decodes each block's codelayers in payload order.
struct DecodeLatents<'a> {
    blocks: &'a [BlockPayload],
    next: usize,
    h: usize,
    w: usize,
    codelayers: Vec<(BlockKind, [(Codelayer, GaussianParams); 2])>,
}

impl Latents for DecodeLatents<'_> {
    fn latent(
        &mut self,
        tape: &mut Tape,
        p: &Bound,
        arch: &Architecture,
        kind: BlockKind,
        _known: &Known,
        level: &LevelEmbedding,
    ) -> Result<Var> {
        let payload = self
            .blocks
            .get(self.next)
            .ok_or_else(|| Error::Corrupt("frame has too few blocks".into()))?;
        self.next += 1;
        let block = arch.block(kind);
        let (dims0, dims1) = codelayer_dims(&arch.config, self.h, self.w);
        let (w0, w1) = block_widths(tape, p, block, level)?;
        let p1 = side_params(tape, p, block, dims1)?;
        let q1 = range_decode(&payload.q1, &p1, &w1)?;
        let q1v = tape.constant(q1.values());
        let p0 = main_params(tape, p, block, q1v, level, dims0)?;
        let q0 = range_decode(&payload.q0, &p0, &w0)?;
        let q0v = tape.constant(q0.values());
        self.codelayers.push((kind, [(q1, p1), (q0, p0)]));
        Ok(q0v)
    }
}

/// Decoder output for one frame.
#[derive(Clone, Debug)]
pub struct DecodedFrame {
    pub recon: Tensor,
    pub flow: Option<FlowField>,
    pub state: ModelState,
    pub codelayers: Vec<(BlockKind, [(Codelayer, GaussianParams); 2])>,
}

/// Mirrors the encoder's synthesis path from the coded payloads.
pub fn decode_frame(
    model: &Model,
    frame: &EncodedFrame,
    ctx: Option<&PFrameContext>,
    height: usize,
    width: usize,
) -> Result<DecodedFrame> {
    let expected = match frame.frame_type {
        FrameType::I => 1,
        FrameType::P => 2,
    };
    if frame.blocks.len() != expected {
        return Err(Error::Corrupt(format!(
            "{:?}-frame carries {} blocks",
            frame.frame_type,
            frame.blocks.len()
        )));
    }
    if frame.level() > (model.levels() - 1) as f64 {
        return Err(Error::Corrupt(format!("level {} out of range", frame.level())));
    }
    let lv = embed_level(frame.level(), model.levels(), model.config.level_dims)?;
    let mut tape = Tape::new();
    let p = model.params.bind(&mut tape);
    let mut lat = DecodeLatents {
        blocks: &frame.blocks,
        next: 0,
        h: height,
        w: width,
        codelayers: Vec::new(),
    };
    match (frame.frame_type, ctx) {
        (FrameType::I, _) => {
            let out = intra_forward(&mut tape, &p, &model.arch, &mut lat, &lv, height, width)?;
            Ok(DecodedFrame {
                recon: tape.value(out.recon).clone(),
                flow: None,
                state: ModelState(tape.value(out.state).clone()),
                codelayers: lat.codelayers,
            })
        }
        (FrameType::P, Some(ctx)) => {
            if ctx.prev_recon.shape() != [3, height, width] {
                return Err(Error::shape("decode_frame", ctx.prev_recon.shape(), &[3, height, width]));
            }
            let cv = context_vars(&mut tape, ctx);
            let mut pred_stats = model.norms.predictor.clone();
            let out = inter_forward(&mut tape, &p, &model.arch, &mut lat, cv, &lv, &mut pred_stats, false)?;
            Ok(DecodedFrame {
                recon: tape.value(out.recon).clone(),
                flow: Some(FlowField::new(tape.value(out.flow).clone())?),
                state: ModelState(tape.value(out.state).clone()),
                codelayers: lat.codelayers,
            })
        }
        (FrameType::P, None) => Err(Error::InvalidArgument("P-frame decode needs a context".into())),
    }
}

/// Parses and decodes one frame record.
pub fn decode_frame_bytes(
    model: &Model,
    bytes: &[u8],
    ctx: Option<&PFrameContext>,
    height: usize,
    width: usize,
) -> Result<DecodedFrame> {
    if bytes.is_empty() {
        return Err(Error::Corrupt("empty frame record".into()));
    }
    let (frame, _) = EncodedFrame::parse(bytes)?;
    decode_frame(model, &frame, ctx, height, width)
}
