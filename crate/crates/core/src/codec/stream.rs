//! `ELFV` container and whole-clip encode/decode with GOP structure and rate control.

use super::frame::{
    decode_frame, encode_iframe, encode_pframe, DecodedFrame, EncodedFrame, FrameCoding, FrameType, PFrameContext,
    Reader,
};
use super::model::Model;
use super::weights::model_hash;
use crate::error::{Error, Result};
use crate::rateflex::{rate_control, ProbeResult, RateMode};
use crate::tensor::Tensor;
use crate::tools::metrics::psnr;

pub const STREAM_MAGIC: &[u8; 4] = b"ELFV";
pub const STREAM_VERSION: u8 = 1;
pub const HEADER_BYTES: usize = 4 + 1 + 2 + 2 + 1 + 1 + 1 + 4 + 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StreamHeader {
    pub width: u16,
    pub height: u16,
    pub levels: u8,
    pub level_dims: u8,
    pub gop: u8,
    pub frame_count: u32,
    pub model_hash: u64,
}

impl StreamHeader {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_BYTES);
        out.extend_from_slice(STREAM_MAGIC);
        out.push(STREAM_VERSION);
        out.extend_from_slice(&self.width.to_le_bytes());
        out.extend_from_slice(&self.height.to_le_bytes());
        out.push(self.levels);
        out.push(self.level_dims);
        out.push(self.gop);
        out.extend_from_slice(&self.frame_count.to_le_bytes());
        out.extend_from_slice(&self.model_hash.to_le_bytes());
        out
    }

    fn parse(r: &mut Reader) -> Result<Self> {
        if r.take(4)? != STREAM_MAGIC {
            return Err(Error::Format("not an ELFV stream".into()));
        }
        let version = r.u8()?;
        if version != STREAM_VERSION {
            return Err(Error::Format(format!("unsupported stream version {version}")));
        }
        let h = Self {
            width: r.u16()?,
            height: r.u16()?,
            levels: r.u8()?,
            level_dims: r.u8()?,
            gop: r.u8()?,
            frame_count: r.u32()?,
            model_hash: r.u64()?,
        };
        if h.gop == 0 {
            return Err(Error::Format("GOP size 0".into()));
        }
        Ok(h)
    }

    /// Frame type at position `t`: an I-frame opens every GOP.
    pub fn frame_type(&self, t: usize) -> FrameType {
        gop_frame_type(t, self.gop as usize)
    }
}

pub fn gop_frame_type(t: usize, gop: usize) -> FrameType {
    if t % gop == 0 {
        FrameType::I
    } else {
        FrameType::P
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VideoStream {
    pub header: StreamHeader,
    pub frames: Vec<EncodedFrame>,
}

impl VideoStream {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = self.header.to_bytes();
        for f in &self.frames {
            out.extend_from_slice(&f.to_bytes());
        }
        out
    }

    pub fn parse(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let header = StreamHeader::parse(&mut r).map_err(|e| match e {
            Error::Corrupt(m) => Error::Format(format!("stream header: {m}")),
            e => e,
        })?;
        let mut frames = Vec::new();
        for t in 0..header.frame_count as usize {
            if r.pos == bytes.len() {
                return Err(Error::Corrupt(format!(
                    "stream ends after {t} of {} frames",
                    header.frame_count
                )));
            }
            let (f, n) = EncodedFrame::parse(&bytes[r.pos..])?;
            if f.frame_type != header.frame_type(t) {
                return Err(Error::Corrupt(format!("frame {t} has type {:?} against the GOP", f.frame_type)));
            }
            r.pos += n;
            frames.push(f);
        }
        if r.pos != bytes.len() {
            return Err(Error::Corrupt("trailing bytes after the last frame".into()));
        }
        Ok(Self { header, frames })
    }

    pub fn byte_len(&self) -> usize {
        HEADER_BYTES + self.frames.iter().map(EncodedFrame::byte_len).sum::<usize>()
    }
}

/// Per-frame outcome of encoding.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameReport {
    pub index: usize,
    pub frame_type: FrameType,
    pub level: f64,
    pub bytes: usize,
    pub bpp: f64,
    pub psnr: f64,
    /// The rate constraint could not be met for this frame.
    pub violated: bool,
    /// Bytes of the flow block's payloads (P-frames only).
    pub flow_bytes: usize,
}

#[derive(Clone, Debug)]
pub struct VideoEncoding {
    pub stream: VideoStream,
    pub recons: Vec<Tensor>,
    pub reports: Vec<FrameReport>,
}

impl VideoEncoding {
    pub fn mean_bpp(&self) -> f64 {
        mean(self.reports.iter().map(|r| r.bpp))
    }

    pub fn mean_psnr(&self) -> f64 {
        mean(self.reports.iter().map(|r| r.psnr))
    }
}

fn mean(it: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = it.collect();
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

fn dims_of(frames: &[Tensor]) -> Result<(usize, usize)> {
    let first = frames
        .first()
        .ok_or_else(|| Error::InvalidArgument("no frames to encode".into()))?;
    if first.shape().len() != 3 || first.shape()[0] != 3 {
        return Err(Error::shape("encode_video", first.shape(), &[3]));
    }
    let (_, h, w) = first.dims3();
    for (t, f) in frames.iter().enumerate() {
        if f.shape() != first.shape() {
            return Err(Error::InvalidArgument(format!(
                "frame {t} is {:?}, expected {:?}",
                f.shape(),
                first.shape()
            )));
        }
    }
    if h > u16::MAX as usize || w > u16::MAX as usize {
        return Err(Error::InvalidArgument("frame too large for the container".into()));
    }
    Ok((h, w))
}

/// Encodes a clip: I-frame every `gop` frames, levels chosen by `mode`.
pub fn encode_video(model: &Model, frames: &[Tensor], gop: usize, mode: RateMode) -> Result<VideoEncoding> {
    let (h, w) = dims_of(frames)?;
    if gop == 0 || gop > u8::MAX as usize {
        return Err(Error::InvalidArgument(format!("GOP size {gop} outside 1..=255")));
    }
    let header = StreamHeader {
        width: w as u16,
        height: h as u16,
        levels: model.levels() as u8,
        level_dims: model.config.level_dims as u8,
        gop: gop as u8,
        frame_count: frames.len() as u32,
        model_hash: model_hash(model)?,
    };
    let mut ctx: Option<PFrameContext> = None;
    let mut out = VideoEncoding {
        stream: VideoStream {
            header,
            frames: Vec::with_capacity(frames.len()),
        },
        recons: Vec::with_capacity(frames.len()),
        reports: Vec::with_capacity(frames.len()),
    };
    for (t, x) in frames.iter().enumerate() {
        let ftype = gop_frame_type(t, gop);
        let code = |level: f64| -> Result<FrameCoding> {
            match (ftype, &ctx) {
                (FrameType::P, Some(c)) => encode_pframe(model, x, c, level),
                _ => encode_iframe(model, x, level),
            }
        };
        let mut cache: Vec<(f64, FrameCoding)> = Vec::new();
        let decision = rate_control(mode, ftype == FrameType::I, model.levels(), &mut |level: f64| {
            let c = code(level)?;
            let r = ProbeResult {
                bpp: c.bpp(),
                psnr: psnr(x, &c.recon)?,
            };
            cache.push((level, c));
            Ok(r)
        })?;
        let coding = match cache.into_iter().rev().find(|(l, _)| *l == decision.level) {
            Some((_, c)) => c,
            None => code(decision.level)?,
        };
        let flow_bytes = match ftype {
            FrameType::P => coding.frame.blocks[0].q1.len() + coding.frame.blocks[0].q0.len(),
            FrameType::I => 0,
        };
        out.reports.push(FrameReport {
            index: t,
            frame_type: ftype,
            level: coding.frame.level(),
            bytes: coding.frame.byte_len(),
            bpp: coding.bpp(),
            psnr: psnr(x, &coding.recon)?,
            violated: decision.violated,
            flow_bytes,
        });
        ctx = Some(match (ftype, &ctx) {
            (FrameType::P, Some(c)) => c.advance(&coding.recon, coding.flow.as_ref().unwrap(), &coding.state),
            _ => PFrameContext::after_iframe(&coding.recon, &coding.state),
        });
        out.recons.push(coding.recon);
        out.stream.frames.push(coding.frame);
    }
    Ok(out)
}

/// Decodes every frame, threading the context exactly as the encoder did.
pub fn decode_video(model: &Model, stream: &VideoStream) -> Result<Vec<DecodedFrame>> {
    let hd = &stream.header;
    if hd.model_hash != model_hash(model)? {
        return Err(Error::Format("stream was encoded with different weights".into()));
    }
    if hd.levels as usize != model.levels() || hd.level_dims as usize != model.config.level_dims {
        return Err(Error::Format(format!(
            "stream expects L={} L_e={}, model has L={} L_e={}",
            hd.levels,
            hd.level_dims,
            model.levels(),
            model.config.level_dims
        )));
    }
    if stream.frames.len() != hd.frame_count as usize {
        return Err(Error::Format("frame count does not match the header".into()));
    }
    let (h, w) = (hd.height as usize, hd.width as usize);
    let mut ctx: Option<PFrameContext> = None;
    let mut out = Vec::with_capacity(stream.frames.len());
    for (t, f) in stream.frames.iter().enumerate() {
        if f.frame_type != hd.frame_type(t) {
            return Err(Error::Corrupt(format!("frame {t} has type {:?} against the GOP", f.frame_type)));
        }
        let d = decode_frame(model, f, ctx.as_ref(), h, w)?;
        ctx = Some(match (&ctx, f.frame_type) {
            (Some(c), FrameType::P) => c.advance(&d.recon, d.flow.as_ref().unwrap(), &d.state),
            _ => PFrameContext::after_iframe(&d.recon, &d.state),
        });
        out.push(d);
    }
    Ok(out)
}

pub fn decode_video_bytes(model: &Model, bytes: &[u8]) -> Result<Vec<DecodedFrame>> {
    decode_video(model, &VideoStream::parse(bytes)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::config::ModelConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn clip(n: usize) -> Vec<Tensor> {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        (0..n)
            .map(|_| Tensor::rand_uniform(&[3, 16, 16], 0.0, 1.0, &mut rng))
            .collect()
    }

    #[test]
    fn gop_structure_and_accounting() {
        let model = Model::new(ModelConfig::tiny()).unwrap();
        let enc = encode_video(&model, &clip(5), 2, RateMode::ConstantLevel(1.5)).unwrap();
        let types: Vec<_> = enc.reports.iter().map(|r| r.frame_type).collect();
        use FrameType::*;
        assert_eq!(types, [I, P, I, P, I]);
        let bytes = enc.stream.to_bytes();
        assert_eq!(bytes.len(), enc.stream.byte_len());
        assert_eq!(
            bytes.len(),
            HEADER_BYTES + enc.reports.iter().map(|r| r.bytes).sum::<usize>()
        );
        for r in &enc.reports {
            assert_eq!(r.bpp, r.bytes as f64 * 8.0 / 256.0);
        }
        let dec = decode_video_bytes(&model, &bytes).unwrap();
        for (d, e) in dec.iter().zip(&enc.recons) {
            assert_eq!(&d.recon, e);
        }
    }

    #[test]
    fn header_layout() {
        let h = StreamHeader {
            width: 64,
            height: 48,
            levels: 4,
            level_dims: 4,
            gop: 8,
            frame_count: 16,
            model_hash: 0x0102030405060708,
        };
        let b = h.to_bytes();
        assert_eq!(b.len(), HEADER_BYTES);
        assert_eq!(&b[..5], b"ELFV\x01");
        assert_eq!(&b[5..9], &[64, 0, 48, 0]);
        assert_eq!(&b[9..12], &[4, 4, 8]);
        assert_eq!(&b[12..16], &16u32.to_le_bytes());
        assert_eq!(&b[16..], &[8, 7, 6, 5, 4, 3, 2, 1]);
    }

    #[test]
    fn mismatched_weights_and_truncation_rejected() {
        let model = Model::new(ModelConfig::tiny()).unwrap();
        let enc = encode_video(&model, &clip(2), 8, RateMode::ConstantLevel(0.0)).unwrap();
        let bytes = enc.stream.to_bytes();
        let other = Model::new(ModelConfig {
            init_seed: 2,
            ..ModelConfig::tiny()
        })
        .unwrap();
        assert!(matches!(decode_video_bytes(&other, &bytes), Err(Error::Format(_))));
        assert!(decode_video_bytes(&model, &bytes[..bytes.len() - 1]).is_err());
        assert!(decode_video_bytes(&model, &bytes[..10]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode_video_bytes(&model, &extra).is_err());
    }
}
