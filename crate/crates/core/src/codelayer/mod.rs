//! Quantized codelayers, their discretized-Gaussian model, the hyperprior
//! wiring and the entropy coder.

pub mod entropy;
pub mod range;

use crate::autodiff::{round_half_away, Tape, Var};
use crate::backbone::attach_level_map;
use crate::error::{Error, Result};
use crate::gauss::interval_mass;
use crate::params::{Bound, Conv2dLayer, ParamStore};
use crate::rateflex::LevelEmbedding;
use crate::tensor::Tensor;
use entropy::ElementModel;
use rand::Rng;

/// Lower bound added to every modelled standard deviation.
pub const SIGMA_MIN: f64 = 1e-3;

/// Integer symbols on a per-channel quantization grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Codelayer {
    pub symbols: Vec<i64>,
    pub shape: [usize; 3],
    /// Quantization width per channel.
    pub widths: Vec<f64>,
}

impl Codelayer {
    pub fn new(symbols: Vec<i64>, shape: [usize; 3], widths: Vec<f64>) -> Result<Self> {
        if symbols.len() != shape.iter().product::<usize>() || widths.len() != shape[0] {
            return Err(Error::shape("codelayer", &shape, &[symbols.len(), widths.len()]));
        }
        if widths.iter().any(|w| !(*w > 0.0 && w.is_finite())) {
            return Err(Error::InvalidArgument("quantization widths must be positive".into()));
        }
        Ok(Self { symbols, shape, widths })
    }

    pub fn plane(&self) -> usize {
        self.shape[1] * self.shape[2]
    }

    /// Grid values `width[c] * k`.
    pub fn values(&self) -> Tensor {
        let plane = self.plane();
        let data = self
            .symbols
            .iter()
            .enumerate()
            .map(|(i, &k)| self.widths[i / plane] * k as f64)
            .collect();
        Tensor::from_parts(self.shape.to_vec(), data)
    }
}

/// `width * round(x / width)` with ties away from zero.
pub fn quantize_value(x: f64, width: f64) -> f64 {
    width * round_half_away(x / width)
}

/// Quantizes a CxHxW tensor with one width per channel.
pub fn quantize(x: &Tensor, widths: &[f64]) -> Result<Codelayer> {
    let (c, h, w) = x.dims3();
    if widths.len() != c {
        return Err(Error::shape("quantize", x.shape(), &[widths.len()]));
    }
    if !x.all_finite() {
        return Err(Error::NonFinite("codelayer input".into()));
    }
    let plane = h * w;
    let limit = i32::MAX as f64;
    let symbols = x
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| round_half_away(v / widths[i / plane]).clamp(-limit, limit) as i64)
        .collect();
    Codelayer::new(symbols, [c, h, w], widths.to_vec())
}

/// Mean and standard deviation of the Gaussian modelling each element.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianParams {
    pub mu: Tensor,
    pub sigma: Tensor,
}

impl GaussianParams {
    fn element_models(&self, widths: &[f64]) -> Vec<ElementModel> {
        let (_, h, w) = self.mu.dims3();
        let plane = h * w;
        self.mu
            .data()
            .iter()
            .zip(self.sigma.data())
            .enumerate()
            .map(|(i, (&mu, &sigma))| ElementModel {
                mu,
                sigma,
                width: widths[i / plane],
            })
            .collect()
    }

    fn check(&self, shape: &[usize]) -> Result<()> {
        if self.mu.shape() != shape || self.sigma.shape() != shape {
            return Err(Error::shape("gaussian params", self.mu.shape(), shape));
        }
        if self.sigma.data().iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(Error::InvalidArgument("sigma must be positive and finite".into()));
        }
        if !self.mu.all_finite() {
            return Err(Error::NonFinite("gaussian mean".into()));
        }
        Ok(())
    }
}

/// Probability of grid value `q` (unfloored).
pub fn discrete_gaussian_prob(q: f64, mu: f64, sigma: f64, width: f64) -> f64 {
    interval_mass(q - mu, sigma, width)
}

/// Per-element codelengths in bits, `-log2 max(p, p_min)`.
pub fn element_bits(q: &Codelayer, params: &GaussianParams) -> Result<Tensor> {
    params.check(&q.shape)?;
    let models = params.element_models(&q.widths);
    let data = q
        .symbols
        .iter()
        .zip(&models)
        .map(|(&k, m)| entropy::symbol_bits(k, *m))
        .collect();
    Ok(Tensor::from_parts(q.shape.to_vec(), data))
}

/// Total estimated codelength in bits.
pub fn codelength(q: &Codelayer, params: &GaussianParams) -> Result<f64> {
    Ok(element_bits(q, params)?.sum())
}

/// Entropy-codes a codelayer into the framed group payload.
pub fn range_encode(q: &Codelayer, params: &GaussianParams) -> Result<Vec<u8>> {
    params.check(&q.shape)?;
    let models = params.element_models(&q.widths);
    entropy::encode_payload(&q.symbols, &models, q.shape[0], q.plane())
}

pub fn range_decode(bytes: &[u8], params: &GaussianParams, widths: &[f64]) -> Result<Codelayer> {
    let shape = params.mu.shape().to_vec();
    params.check(&shape)?;
    if shape.len() != 3 || widths.len() != shape[0] {
        return Err(Error::shape("range_decode", &shape, &[widths.len()]));
    }
    let models = params.element_models(widths);
    let symbols = entropy::decode_payload(bytes, &models, shape[0], shape[1] * shape[2])?;
    Codelayer::new(symbols, [shape[0], shape[1], shape[2]], widths.to_vec())
}

/// Estimated bits per pixel: per-codelayer channel sums spread evenly over
/// the pixels each cell covers, then added. Sums to the total codelength.
pub fn spatial_bit_map(layers: &[(&Codelayer, &GaussianParams)], height: usize, width: usize) -> Result<Tensor> {
    let mut map = Tensor::zeros(&[1, height, width]);
    for (q, params) in layers {
        let bits = element_bits(q, params)?;
        let [c, h, w] = q.shape;
        let sy = height.div_ceil(h);
        let sx = width.div_ceil(w);
        if h.saturating_sub(1) * sy >= height || w.saturating_sub(1) * sx >= width {
            return Err(Error::shape("spatial_bit_map", &q.shape, &[height, width]));
        }
        for cy in 0..h {
            for cx in 0..w {
                let cell: f64 = (0..c).map(|ci| bits.at3(ci, cy, cx)).sum();
                let (y0, y1) = (cy * sy, ((cy + 1) * sy).min(height));
                let (x0, x1) = (cx * sx, ((cx + 1) * sx).min(width));
                let share = cell / ((y1 - y0) * (x1 - x0)) as f64;
                for y in y0..y1 {
                    for x in x0..x1 {
                        let v = map.at3(0, y, x) + share;
                        map.set3(0, y, x, v);
                    }
                }
            }
        }
    }
    Ok(map)
}

/// How quantization is realized on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QuantMode {
    /// Additive uniform noise on both the rate and reconstruction paths.
    Noise,
    /// Noise on the rate path, straight-through rounding on reconstruction.
    Mixed,
    /// Hard rounding everywhere (inference).
    Hard,
}

/// Hyperprior networks and learned tables for one block.
#[derive(Clone, Debug)]
pub struct Hyperprior {
    pub q0_channels: usize,
    pub q1_channels: usize,
    pub level_dims: usize,
    e1a: Conv2dLayer,
    e1b: Conv2dLayer,
    d1a: Conv2dLayer,
    d1b: Conv2dLayer,
    /// Per-channel log sigma of q1.
    pub log_sigma1: usize,
    /// `L_e x C0` log quantization widths.
    pub log_width0: usize,
    pub log_width1: usize,
}

impl Hyperprior {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        q0: usize,
        q1: usize,
        level_dims: usize,
        hidden: usize,
    ) -> Self {
        let e1a = Conv2dLayer::new(store, rng, &format!("{name}.e1a"), q0 + level_dims, hidden, 3, 2, 1.0);
        let e1b = Conv2dLayer::new(store, rng, &format!("{name}.e1b"), hidden, q1, 3, 2, 1.0);
        let d1a = Conv2dLayer::new(store, rng, &format!("{name}.d1a"), q1 + level_dims, hidden, 3, 1, 1.0);
        let d1b = Conv2dLayer::new(store, rng, &format!("{name}.d1b"), hidden, 2 * q0, 3, 1, 0.5);
        let log_sigma1 = store.add(format!("{name}.log_sigma1"), Tensor::zeros(&[q1]));
        let log_width0 = store.add(format!("{name}.log_width0"), default_log_widths(level_dims, q0));
        let log_width1 = store.add(format!("{name}.log_width1"), default_log_widths(level_dims, q1));
        Self {
            q0_channels: q0,
            q1_channels: q1,
            level_dims,
            e1a,
            e1b,
            d1a,
            d1b,
            log_sigma1,
            log_width0,
            log_width1,
        }
    }
}

/// Widths shrinking geometrically from 2 at the lowest slot to 1/2 at the top.
fn default_log_widths(slots: usize, channels: usize) -> Tensor {
    let ln2 = std::f64::consts::LN_2;
    let rows: Vec<f64> = (0..slots)
        .flat_map(|i| {
            let t = i as f64 / (slots - 1).max(1) as f64;
            std::iter::repeat_n(ln2 * (1.0 - 2.0 * t), channels)
        })
        .collect();
    Tensor::from_parts(vec![slots, channels], rows)
}

/// Quantization widths of one codelayer at `level`, as a differentiable value.
pub fn level_widths(tape: &mut Tape, table: Var, level: &LevelEmbedding) -> Result<Var> {
    let mix = tape.row_mix(table, &level.vector)?;
    Ok(tape.exp(mix))
}

/// A quantized codelayer on the tape.
#[derive(Clone, Copy, Debug)]
pub struct TapeCodelayer {
    /// Value seen by the rate term.
    pub rate: Var,
    /// Value seen by downstream decoders.
    pub recon: Var,
    pub widths: Var,
}

pub fn quantize_on_tape<R: Rng + ?Sized>(
    tape: &mut Tape,
    y: Var,
    widths: Var,
    mode: QuantMode,
    rng: &mut R,
) -> Result<TapeCodelayer> {
    let noisy = |tape: &mut Tape, rng: &mut R| -> Result<Var> {
        let shape = tape.value(y).shape().to_vec();
        let u = tape.constant(Tensor::rand_uniform(&shape, -0.5, 0.5, rng));
        let scaled = tape.mul_channels(u, widths)?;
        tape.add(y, scaled)
    };
    Ok(match mode {
        QuantMode::Noise => {
            let n = noisy(tape, rng)?;
            TapeCodelayer {
                rate: n,
                recon: n,
                widths,
            }
        }
        QuantMode::Mixed => {
            let n = noisy(tape, rng)?;
            let r = tape.round_ste(y, widths)?;
            TapeCodelayer {
                rate: n,
                recon: r,
                widths,
            }
        }
        QuantMode::Hard => {
            let r = tape.round_ste(y, widths)?;
            TapeCodelayer {
                rate: r,
                recon: r,
                widths,
            }
        }
    })
}

/// Everything the hyperprior produces for one block.
#[derive(Clone, Copy, Debug)]
pub struct HyperOutput {
    pub q0: TapeCodelayer,
    pub q1: TapeCodelayer,
    pub mu0: Var,
    pub sigma0: Var,
    pub sigma1: Var,
    pub bits0: Var,
    pub bits1: Var,
}

/// `q0 = Q(y0)`, `q1 = Q(E1(q0))`, `(mu0, sigma0) = D1(q1)` plus both codelengths.
/// The caller runs `D0` on `q0.recon`.
pub fn hyperprior_code<R: Rng + ?Sized>(
    tape: &mut Tape,
    p: &Bound,
    hp: &Hyperprior,
    y0: Var,
    level: &LevelEmbedding,
    mode: QuantMode,
    rng: &mut R,
) -> Result<HyperOutput> {
    let w0 = level_widths(tape, p.var(hp.log_width0), level)?;
    let w1 = level_widths(tape, p.var(hp.log_width1), level)?;
    let q0 = quantize_on_tape(tape, y0, w0, mode, rng)?;
    let x = attach_level_map(tape, q0.recon, level)?;
    let h = hp.e1a.forward(tape, p, x)?;
    let h = tape.leaky_relu(h);
    let y1 = hp.e1b.forward(tape, p, h)?;
    let q1 = quantize_on_tape(tape, y1, w1, mode, rng)?;
    let (mu0, sigma0) = hyper_decode(tape, p, hp, q1.recon, level, tape.value(y0).dims3())?;
    let sigma1 = sigma1_map(tape, p, hp, tape.value(y1).dims3())?;
    let bits0 = tape.codelength(q0.rate, mu0, sigma0, w0)?;
    let zeros = tape.constant(Tensor::zeros(tape.value(y1).shape()));
    let bits1 = tape.codelength(q1.rate, zeros, sigma1, w1)?;
    Ok(HyperOutput {
        q0,
        q1,
        mu0,
        sigma0,
        sigma1,
        bits0,
        bits1,
    })
}

/// `D1`: side codelayer to the mean and scale of the main codelayer.
pub fn hyper_decode(
    tape: &mut Tape,
    p: &Bound,
    hp: &Hyperprior,
    q1: Var,
    level: &LevelEmbedding,
    q0_dims: (usize, usize, usize),
) -> Result<(Var, Var)> {
    let (c0, h0, w0) = q0_dims;
    let x = attach_level_map(tape, q1, level)?;
    let u = tape.upsample2(x, h0.div_ceil(2), w0.div_ceil(2));
    let h = hp.d1a.forward(tape, p, u)?;
    let h = tape.leaky_relu(h);
    let u = tape.upsample2(h, h0, w0);
    let out = hp.d1b.forward(tape, p, u)?;
    let mu = tape.slice_channels(out, 0, c0);
    let raw = tape.slice_channels(out, c0, c0);
    let sp = tape.softplus(raw);
    let sigma = tape.add_scalar(sp, SIGMA_MIN);
    Ok((mu, sigma))
}

/// Per-channel q1 scale broadcast over its spatial extent.
pub fn sigma1_map(tape: &mut Tape, p: &Bound, hp: &Hyperprior, q1_dims: (usize, usize, usize)) -> Result<Var> {
    let (c, h, w) = q1_dims;
    let s = tape.exp(p.var(hp.log_sigma1));
    let s = tape.add_scalar(s, SIGMA_MIN);
    let ones = tape.constant(Tensor::ones(&[c, h, w]));
    tape.mul_channels(ones, s)
}

/// Reads a tape-quantized value back as integer symbols.
pub fn codelayer_from_tape(tape: &Tape, q: &TapeCodelayer) -> Result<Codelayer> {
    let widths = tape.value(q.widths).data().to_vec();
    quantize(tape.value(q.recon), &widths)
}

pub fn params_from_tape(tape: &Tape, mu: Var, sigma: Var) -> GaussianParams {
    GaussianParams {
        mu: tape.value(mu).clone(),
        sigma: tape.value(sigma).clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rateflex::embed_level;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn quantize_examples() {
        assert_eq!(quantize_value(0.0, 0.37), 0.0);
        assert_eq!(quantize_value(0.74, 0.5), 0.5);
        assert_eq!(quantize_value(-0.25, 0.5), -0.5);
        assert_eq!(quantize_value(0.25, 0.5), 0.5);
    }

    #[test]
    fn probability_at_mean() {
        let p = discrete_gaussian_prob(0.0, 0.0, 1.0, 1.0);
        assert!((p - 0.382924922548026).abs() < 1e-12);
        let q = Codelayer::new(vec![0], [1, 1, 1], vec![1.0]).unwrap();
        let g = GaussianParams {
            mu: Tensor::zeros(&[1, 1, 1]),
            sigma: Tensor::ones(&[1, 1, 1]),
        };
        assert!((codelength(&q, &g).unwrap() - 1.384866534).abs() < 1e-8);
    }

    #[test]
    fn bit_map_conserves_and_localizes() {
        let q = Codelayer::new(vec![0; 8 * 4], [8, 2, 2], vec![1.0; 8]).unwrap();
        let mut sigma = Tensor::full(&[8, 2, 2], 0.2);
        sigma.set3(3, 1, 0, 20.0);
        let g = GaussianParams {
            mu: Tensor::zeros(&[8, 2, 2]),
            sigma,
        };
        let map = spatial_bit_map(&[(&q, &g)], 32, 32).unwrap();
        let total = codelength(&q, &g).unwrap();
        assert!((map.sum() - total).abs() <= 1e-9 * total);
        let argmax = map.data().iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
        assert!(argmax / 32 >= 16 && argmax % 32 < 16);
    }

    #[test]
    fn hyperprior_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let hp = Hyperprior::new(&mut store, &mut rng, "hp", 32, 16, 4, 16);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let y0 = tape.constant(Tensor::randn(&[32, 4, 4], 2.0, &mut rng));
        let lv = embed_level(2.0, 4, 4).unwrap();
        let out = hyperprior_code(&mut tape, &p, &hp, y0, &lv, QuantMode::Hard, &mut rng).unwrap();
        assert_eq!(tape.value(out.mu0).shape(), &[32, 4, 4]);
        assert_eq!(tape.value(out.sigma0).shape(), &[32, 4, 4]);
        assert_eq!(tape.value(out.q1.recon).shape(), &[16, 1, 1]);
        assert!(tape.value(out.sigma0).data().iter().all(|&s| s >= SIGMA_MIN));
    }
}
