//! Delayed-Merge blocks and the asymmetric multi-scale coder stacks built from them.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::norm::{channel_normalize, ChannelStats};
use crate::params::{Bound, Conv2dLayer, ParamStore};
use crate::rateflex::LevelEmbedding;
use crate::tensor::Tensor;
use rand::Rng;

/// Pixel space to the first learned scale.
pub const PIXEL_FACTOR: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DMBlockConfig {
    pub channels: usize,
    pub inner_convs: usize,
    /// Downsampling factor relative to pixel space.
    pub scale: usize,
}

impl DMBlockConfig {
    pub fn new(channels: usize, inner_convs: usize, scale: usize) -> Self {
        Self {
            channels,
            inner_convs,
            scale,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.inner_convs == 0 {
            return Err(Error::Config(format!(
                "DM block needs channels >= 1 and inner convs >= 1, got {self:?}"
            )));
        }
        if self.scale < PIXEL_FACTOR || !self.scale.is_power_of_two() {
            return Err(Error::Config(format!(
                "DM block scale must be a power of two >= {PIXEL_FACTOR}, got {}",
                self.scale
            )));
        }
        Ok(())
    }
}

/// A tape value tagged with its downsampling factor relative to pixel space.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Feature {
    pub var: Var,
    pub scale: usize,
}

#[derive(Clone, Debug)]
pub struct DMBlock {
    pub cfg: DMBlockConfig,
    proj: Conv2dLayer,
    inner: Vec<Conv2dLayer>,
    merge: Conv2dLayer,
}

impl DMBlock {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        in_channels: usize,
        cfg: DMBlockConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.channels;
        let proj = Conv2dLayer::new(store, rng, &format!("{name}.proj"), in_channels, c, 1, 1, 1.0);
        let inner = (0..cfg.inner_convs)
            .map(|i| Conv2dLayer::new(store, rng, &format!("{name}.inner{i}"), c, c, 3, 1, 0.5))
            .collect();
        let merge = Conv2dLayer::new(
            store,
            rng,
            &format!("{name}.merge"),
            c * cfg.inner_convs,
            c,
            1,
            1,
            1.0 / (cfg.inner_convs as f64).sqrt(),
        );
        Ok(Self { cfg, proj, inner, merge })
    }

    pub fn in_channels(&self) -> usize {
        self.proj.in_channels
    }

    pub fn param_count(&self) -> usize {
        self.proj.param_count() + self.inner.iter().map(Conv2dLayer::param_count).sum::<usize>() + self.merge.param_count()
    }
}

/// Runs one DM block: project to C, accumulate `a_i = a_{i-1} + conv(act(a_{i-1}))`,
/// concatenate `a_1..a_n` once and merge back to C with a 1x1 conv.
pub fn dm_block(tape: &mut Tape, p: &Bound, block: &DMBlock, input: Feature) -> Result<Feature> {
    if input.scale != block.cfg.scale {
        return Err(Error::InvalidArgument(format!(
            "DM block at {}x received input at {}x",
            block.cfg.scale, input.scale
        )));
    }
    let mut a = block.proj.forward(tape, p, input.var)?;
    let mut stages = Vec::with_capacity(block.inner.len());
    for conv in &block.inner {
        let act = tape.leaky_relu(a);
        let r = conv.forward(tape, p, act)?;
        a = tape.add(a, r)?;
        stages.push(a);
    }
    let cat = tape.concat(&stages)?;
    let out = block.merge.forward(tape, p, cat)?;
    Ok(Feature {
        var: out,
        scale: input.scale,
    })
}

/// Appends the level vector as constant channels.
pub fn attach_level_map(tape: &mut Tape, x: Var, level: &LevelEmbedding) -> Result<Var> {
    let (_, h, w) = tape.value(x).dims3();
    let slab = tape.constant(level_slab(&level.vector, h, w));
    tape.concat(&[x, slab])
}

pub fn attach_level_map_tensor(x: &Tensor, level: &LevelEmbedding) -> Result<Tensor> {
    let (_, h, w) = x.dims3();
    Tensor::concat_channels(&[x, &level_slab(&level.vector, h, w)])
}

fn level_slab(v: &[f64], h: usize, w: usize) -> Tensor {
    Tensor::from_fn3(v.len(), h, w, |c, _, _| v[c])
}

/// Channel plan of one encoder/decoder pair.
#[derive(Clone, Debug, PartialEq)]
pub struct CoderStackConfig {
    pub encoder: Vec<DMBlockConfig>,
    pub decoder: Vec<DMBlockConfig>,
    pub q0_channels: usize,
    pub q1_channels: usize,
}

impl CoderStackConfig {
    /// Encoder DM-`enc` and decoder DM-`dec` at 4x, 8x, 16x.
    pub fn three_scale(enc: usize, dec: usize, inner_convs: usize, q0: usize, q1: usize) -> Self {
        Self {
            encoder: [4, 8, 16].iter().map(|&s| DMBlockConfig::new(enc, inner_convs, s)).collect(),
            decoder: [16, 8, 4].iter().map(|&s| DMBlockConfig::new(dec, inner_convs, s)).collect(),
            q0_channels: q0,
            q1_channels: q1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.encoder.is_empty() || self.decoder.is_empty() {
            return Err(Error::Config("coder stack needs encoder and decoder blocks".into()));
        }
        if self.q0_channels == 0 || self.q1_channels == 0 {
            return Err(Error::Config("codelayer channel counts must be positive".into()));
        }
        for b in self.encoder.iter().chain(&self.decoder) {
            b.validate()?;
        }
        let enc: Vec<usize> = self.encoder.iter().map(|b| b.scale).collect();
        let dec: Vec<usize> = self.decoder.iter().map(|b| b.scale).collect();
        if enc[0] != PIXEL_FACTOR || enc.windows(2).any(|w| w[1] != 2 * w[0]) {
            return Err(Error::Config(format!(
                "encoder scales must start at {PIXEL_FACTOR}x and double, got {enc:?}"
            )));
        }
        if dec.iter().rev().ne(enc.iter()) {
            return Err(Error::Config(format!(
                "decoder scales {dec:?} must reverse encoder scales {enc:?}"
            )));
        }
        let enc_c = self.encoder.iter().map(|b| b.channels).max().unwrap_or(0);
        if self.decoder.iter().any(|b| b.channels > enc_c) {
            return Err(Error::Config("decoder base channels must not exceed encoder channels".into()));
        }
        Ok(())
    }

    /// Stride of the main codelayer relative to pixels.
    pub fn q0_stride(&self) -> usize {
        self.encoder.last().map_or(PIXEL_FACTOR, |b| b.scale)
    }
}

/// Channel counts at the pixel and 4x boundaries of a stack.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StackIo {
    /// Pixel-space channels entering the encoder (space-to-depth'd by 4).
    pub pixel_in: usize,
    /// Extra 4x-scale channels concatenated to the encoder input.
    pub side_in: usize,
    pub level_dims: usize,
    /// Extra 4x-scale channels concatenated inside the decoder at 4x.
    pub decoder_side_in: usize,
    /// Pixel-space output channels (depth-to-space'd by 4).
    pub pixel_out: usize,
    /// 4x-scale output channels.
    pub side_out: usize,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    blocks: Vec<DMBlock>,
    downs: Vec<Conv2dLayer>,
    head: Conv2dLayer,
}

impl Encoder {
    pub fn param_count(&self) -> usize {
        self.blocks.iter().map(DMBlock::param_count).sum::<usize>()
            + self.downs.iter().map(Conv2dLayer::param_count).sum::<usize>()
            + self.head.param_count()
    }

    /// 4x features to the (unquantized) latent.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, input: Feature) -> Result<Feature> {
        let mut f = dm_block(tape, p, &self.blocks[0], input)?;
        for (block, down) in self.blocks[1..].iter().zip(&self.downs) {
            let act = tape.leaky_relu(f.var);
            let d = down.forward(tape, p, act)?;
            f = dm_block(tape, p, block, Feature { var: d, scale: f.scale * 2 })?;
        }
        let act = tape.leaky_relu(f.var);
        let var = self.head.forward(tape, p, act)?;
        Ok(Feature { var, scale: f.scale })
    }
}

#[derive(Clone, Debug)]
pub struct Decoder {
    blocks: Vec<DMBlock>,
    ups: Vec<Conv2dLayer>,
    pixel_head: Option<Conv2dLayer>,
    side_head: Option<Conv2dLayer>,
}

/// Decoder outputs: pixel-resolution head and 4x side head.
#[derive(Clone, Copy, Debug)]
pub struct DecoderOutput {
    pub pixel: Option<Var>,
    pub side: Option<Var>,
}

impl Decoder {
    pub fn param_count(&self) -> usize {
        self.blocks.iter().map(DMBlock::param_count).sum::<usize>()
            + self.ups.iter().map(Conv2dLayer::param_count).sum::<usize>()
            + self.pixel_head.as_ref().map_or(0, Conv2dLayer::param_count)
            + self.side_head.as_ref().map_or(0, Conv2dLayer::param_count)
    }

    /// `latent` already carries its level map. `side` (4x) joins at the last
    /// upsampling step; `(h4, w4)` is the 4x-scale target size.
    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &Bound,
        latent: Feature,
        side: Option<Var>,
        h4: usize,
        w4: usize,
    ) -> Result<DecoderOutput> {
        let mut f = dm_block(tape, p, &self.blocks[0], latent)?;
        for (block, up) in self.blocks[1..].iter().zip(&self.ups) {
            let scale = f.scale / 2;
            let div = scale / PIXEL_FACTOR;
            let (th, tw) = (h4.div_ceil(div), w4.div_ceil(div));
            let act = tape.leaky_relu(f.var);
            let u = tape.upsample2(act, th, tw);
            let mut x = up.forward(tape, p, u)?;
            if scale == PIXEL_FACTOR {
                if let Some(s) = side {
                    x = tape.concat(&[x, s])?;
                }
            }
            f = dm_block(tape, p, block, Feature { var: x, scale })?;
        }
        let act = tape.leaky_relu(f.var);
        let pixel = match &self.pixel_head {
            Some(h) => {
                let v = h.forward(tape, p, act)?;
                Some(tape.depth_to_space(v, PIXEL_FACTOR)?)
            }
            None => None,
        };
        let side = match &self.side_head {
            Some(h) => Some(h.forward(tape, p, act)?),
            None => None,
        };
        Ok(DecoderOutput { pixel, side })
    }
}

/// A built encoder/decoder pair.
#[derive(Clone, Debug)]
pub struct CoderStack {
    pub cfg: CoderStackConfig,
    pub io: StackIo,
    pub encoder: Encoder,
    pub decoder: Decoder,
}

impl CoderStack {
    pub fn encoder_in_channels(&self) -> usize {
        self.io.pixel_in * PIXEL_FACTOR * PIXEL_FACTOR + self.io.side_in
    }

    /// Pixels (and 4x side inputs) to the unquantized main latent. The input
    /// is normalized by `stats` before the level map is attached.
    #[allow(clippy::too_many_arguments)]
    pub fn encode(
        &self,
        tape: &mut Tape,
        p: &Bound,
        pixels: Var,
        side: &[Var],
        level: &LevelEmbedding,
        stats: &mut ChannelStats,
        training: bool,
    ) -> Result<Feature> {
        let s2d = tape.space_to_depth(pixels, PIXEL_FACTOR)?;
        let mut parts = vec![s2d];
        parts.extend_from_slice(side);
        let x = if parts.len() == 1 { s2d } else { tape.concat(&parts)? };
        let x = channel_normalize(tape, x, stats, training)?;
        let x = attach_level_map(tape, x, level)?;
        self.encoder.forward(
            tape,
            p,
            Feature {
                var: x,
                scale: PIXEL_FACTOR,
            },
        )
    }

    /// Quantized latent to outputs; attaches the level map itself.
    #[allow(clippy::too_many_arguments)]
    pub fn decode(
        &self,
        tape: &mut Tape,
        p: &Bound,
        q0: Var,
        side: Option<Var>,
        level: &LevelEmbedding,
        h4: usize,
        w4: usize,
    ) -> Result<DecoderOutput> {
        let x = attach_level_map(tape, q0, level)?;
        self.decoder.forward(
            tape,
            p,
            Feature {
                var: x,
                scale: self.cfg.q0_stride(),
            },
            side,
            h4,
            w4,
        )
    }
}

/// Builds the encoder and decoder branches with strided convs between scales.
pub fn build_coder_stack<R: Rng + ?Sized>(
    store: &mut ParamStore,
    rng: &mut R,
    name: &str,
    cfg: &CoderStackConfig,
    io: StackIo,
) -> Result<CoderStack> {
    cfg.validate()?;
    let enc_in = io.pixel_in * PIXEL_FACTOR * PIXEL_FACTOR + io.side_in + io.level_dims;
    let mut blocks = Vec::new();
    let mut downs = Vec::new();
    let mut prev = enc_in;
    for (i, b) in cfg.encoder.iter().enumerate() {
        let block_in = if i == 0 {
            prev
        } else {
            downs.push(Conv2dLayer::new(store, rng, &format!("{name}.enc.down{i}"), prev, b.channels, 3, 2, 1.0));
            b.channels
        };
        blocks.push(DMBlock::new(store, rng, &format!("{name}.enc.dm{i}"), block_in, *b)?);
        prev = b.channels;
    }
    let head = Conv2dLayer::new(store, rng, &format!("{name}.enc.head"), prev, cfg.q0_channels, 1, 1, 1.0);
    let encoder = Encoder { blocks, downs, head };

    let mut blocks = Vec::new();
    let mut ups = Vec::new();
    let mut prev = cfg.q0_channels + io.level_dims;
    for (i, b) in cfg.decoder.iter().enumerate() {
        let block_in = if i == 0 {
            prev
        } else {
            ups.push(Conv2dLayer::new(store, rng, &format!("{name}.dec.up{i}"), prev, b.channels, 3, 1, 1.0));
            if b.scale == PIXEL_FACTOR {
                b.channels + io.decoder_side_in
            } else {
                b.channels
            }
        };
        blocks.push(DMBlock::new(store, rng, &format!("{name}.dec.dm{i}"), block_in, *b)?);
        prev = b.channels;
    }
    let pixel_head = (io.pixel_out > 0).then(|| {
        Conv2dLayer::new(
            store,
            rng,
            &format!("{name}.dec.pixel"),
            prev,
            io.pixel_out * PIXEL_FACTOR * PIXEL_FACTOR,
            1,
            1,
            0.1,
        )
    });
    let side_head =
        (io.side_out > 0).then(|| Conv2dLayer::new(store, rng, &format!("{name}.dec.side"), prev, io.side_out, 1, 1, 0.5));
    let decoder = Decoder {
        blocks,
        ups,
        pixel_head,
        side_head,
    };
    Ok(CoderStack {
        cfg: cfg.clone(),
        io,
        encoder,
        decoder,
    })
}
