//! Constant-level evaluation over a set of clips.

use super::frame::FrameType;
use super::model::Model;
use super::stream::encode_video;
use crate::error::{Error, Result};
use crate::rateflex::RateMode;
use crate::tensor::Tensor;
use crate::tools::rd::RDPoint;

#[derive(Clone, Debug, PartialEq)]
pub struct LevelEval {
    pub level: f64,
    /// Mean over all frames of actual bytes * 8 / pixels.
    pub bpp: f64,
    /// Mean per-frame PSNR.
    pub psnr: f64,
    pub iframe_bpp: f64,
    pub pframe_bpp: f64,
    /// Flow-block share of the P-frame bpp.
    pub flow_bpp: f64,
    pub pframe_psnr: f64,
}

impl LevelEval {
    pub fn rd_point(&self, tag: &str) -> RDPoint {
        RDPoint::new(tag, self.level, self.bpp, self.psnr)
    }
}

/// Encodes every clip at each level with the given GOP and averages.
pub fn evaluate(model: &Model, clips: &[Vec<Tensor>], levels: &[f64], gop: usize) -> Result<Vec<LevelEval>> {
    if clips.is_empty() {
        return Err(Error::InvalidArgument("no clips to evaluate".into()));
    }
    levels
        .iter()
        .map(|&level| {
            let mut all = (0.0, 0.0, 0usize);
            let mut i_bpp = (0.0, 0usize);
            let mut p = (0.0, 0.0, 0.0, 0usize);
            for clip in clips {
                let enc = encode_video(model, clip, gop, RateMode::ConstantLevel(level))?;
                let (_, h, w) = clip[0].dims3();
                let pixels = (h * w) as f64;
                for r in &enc.reports {
                    all.0 += r.bpp;
                    all.1 += r.psnr;
                    all.2 += 1;
                    match r.frame_type {
                        FrameType::I => {
                            i_bpp.0 += r.bpp;
                            i_bpp.1 += 1;
                        }
                        FrameType::P => {
                            p.0 += r.bpp;
                            p.1 += r.flow_bytes as f64 * 8.0 / pixels;
                            p.2 += r.psnr;
                            p.3 += 1;
                        }
                    }
                }
            }
            let div = |a: f64, n: usize| if n == 0 { f64::NAN } else { a / n as f64 };
            Ok(LevelEval {
                level,
                bpp: div(all.0, all.2),
                psnr: div(all.1, all.2),
                iframe_bpp: div(i_bpp.0, i_bpp.1),
                pframe_bpp: div(p.0, p.3),
                flow_bpp: div(p.1, p.3),
                pframe_psnr: div(p.2, p.3),
            })
        })
        .collect()
}
