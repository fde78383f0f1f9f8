//! Flexible-rate machinery: level embeddings, level/channel-dependent
//! quantization widths, the multi-level loss with its modulator, level-sequence
//! sampling for training, and per-frame rate controllers.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// A (possibly interpolated) level vector plus the intermediate quantities of
/// its derivation.
#[derive(Clone, Debug, PartialEq)]
pub struct LevelEmbedding {
    pub vector: Vec<f64>,
    pub source_level: f64,
    pub s: f64,
    pub u: i64,
    pub v: i64,
    pub d_u: f64,
    pub d_v: f64,
    pub alpha: f64,
    pub beta: f64,
}

impl LevelEmbedding {
    pub fn dims(&self) -> usize {
        self.vector.len()
    }

    /// Elementwise blend `a * self + b * other` of two embedding vectors.
    pub fn blend(&self, a: f64, other: &LevelEmbedding, b: f64) -> Vec<f64> {
        self.vector.iter().zip(&other.vector).map(|(x, y)| a * x + b * y).collect()
    }
}

fn onehot(index: i64, dims: usize) -> Vec<f64> {
    let mut v = vec![0.0; dims];
    if index >= 0 && (index as usize) < dims {
        v[index as usize] = 1.0;
    }
    v
}

/// Embeds a continuous level `l` in `[0, levels - 1]` into `dims` slots.
///
/// Out-of-range levels are clamped (with a warning) since rate controllers
/// may probe the edges.
pub fn embed_level(l: f64, levels: usize, dims: usize) -> Result<LevelEmbedding> {
    if levels < 2 || dims < 2 {
        return Err(Error::InvalidArgument(format!(
            "level embedding needs L >= 2 and L_e >= 2, got L={levels}, L_e={dims}"
        )));
    }
    if !l.is_finite() {
        return Err(Error::InvalidArgument(format!("level {l} is not finite")));
    }
    let top = (levels - 1) as f64;
    let l = if (0.0..=top).contains(&l) {
        l
    } else {
        log::warn!("level {l} outside [0, {top}], clamping");
        l.clamp(0.0, top)
    };
    let s = l * (dims - 1) as f64 / top;
    let u = s.floor() as i64;
    let v = u + 1;
    let d_u = s - u as f64;
    let d_v = v as f64 - s;
    let alpha = d_v / (d_u + d_v);
    let beta = 1.0 - alpha;
    let vector = onehot(u, dims)
        .iter()
        .zip(onehot(v, dims))
        .map(|(a, b)| alpha * a + beta * b)
        .collect();
    Ok(LevelEmbedding {
        vector,
        source_level: l,
        s,
        u,
        v,
        d_u,
        d_v,
        alpha,
        beta,
    })
}

/// Learned log quantization widths, one row per embedding slot and one column
/// per codelayer channel.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantWidthTable {
    pub log_widths: Tensor,
}

impl QuantWidthTable {
    pub fn new(log_widths: Tensor) -> Result<Self> {
        if log_widths.shape().len() != 2 {
            return Err(Error::InvalidArgument(format!(
                "quant width table must be 2-D, got {:?}",
                log_widths.shape()
            )));
        }
        Ok(Self { log_widths })
    }

    pub fn slots(&self) -> usize {
        self.log_widths.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.log_widths.shape()[1]
    }
}

/// `exp(sum_i v[i] * log_width[i, c])`: a geometric blend of slot widths.
pub fn quant_width(level: &LevelEmbedding, table: &QuantWidthTable, channel: usize) -> f64 {
    quant_width_from_log_table(&level.vector, &table.log_widths, channel)
}

pub(crate) fn quant_width_from_log_table(weights: &[f64], log_widths: &Tensor, channel: usize) -> f64 {
    let c = log_widths.shape()[1];
    let e: f64 = weights
        .iter()
        .enumerate()
        .map(|(i, w)| w * log_widths.data()[i * c + channel])
        .sum();
    libm::exp(e)
}

/// Per-level rate weights, log-linear between the two endpoints.
#[derive(Clone, Debug, PartialEq)]
pub struct LambdaSchedule {
    pub values: Vec<f64>,
}

impl LambdaSchedule {
    /// `first` applies to level 0, `last` to level `levels - 1`.
    pub fn log_linear(levels: usize, first: f64, last: f64) -> Result<Self> {
        if levels < 2 || first <= 0.0 || last <= 0.0 || first == last {
            return Err(Error::InvalidArgument(format!(
                "lambda schedule needs >= 2 levels and distinct positive endpoints, got {levels}, {first}, {last}"
            )));
        }
        let (a, b) = (first.log10(), last.log10());
        let values = (0..levels)
            .map(|l| 10f64.powf(a + (b - a) * l as f64 / (levels - 1) as f64))
            .collect();
        Ok(Self { values })
    }

    pub fn get(&self, level: usize) -> f64 {
        self.values[level]
    }
}

/// Per-frame terms entering the multi-level loss.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FrameTerms {
    /// Distortion (MSE) of the reconstruction.
    pub distortion: f64,
    /// Rate of the frame in the units the lambdas are calibrated for.
    pub rate: f64,
    pub level: usize,
}

/// `(1/T) sum_t [ mu_t^(l_t) D_t + lambda^(l_t) R_t ]` with one sampled level per frame.
pub fn multi_level_loss(frames: &[FrameTerms], lambda: &LambdaSchedule, modulator: &ModulatorState) -> f64 {
    if frames.is_empty() {
        return 0.0;
    }
    let total: f64 = frames
        .iter()
        .enumerate()
        .map(|(t, f)| modulator.weight(t, f.level) * f.distortion + lambda.get(f.level) * f.rate)
        .sum();
    total / frames.len() as f64
}

/// Converts a PSNR slack `delta` (dB) into the equivalent MSE ratio.
pub fn mse_factor_from_delta(delta_db: f64) -> f64 {
    10f64.powf(delta_db / 10.0)
}

pub fn delta_from_mse_factor(factor: f64) -> f64 {
    10.0 * factor.log10()
}

/// Dynamic per-(frame, level) reconstruction weights.
#[derive(Clone, Debug, PartialEq)]
pub struct ModulatorState {
    /// `mu[t][l]`; row 0 (the I-frame) stays at 1.
    pub mu: Vec<Vec<f64>>,
    /// Moving-average MSE per (t, l).
    pub avg_mse: Vec<Vec<f64>>,
    pub observations: Vec<Vec<u64>>,
    pub mse_factor: f64,
    pub step: f64,
    pub decay: f64,
    pub warmup: u64,
    pub min_weight: f64,
    pub max_weight: f64,
    pub enabled: bool,
}

impl ModulatorState {
    pub fn new(frames: usize, levels: usize) -> Self {
        Self {
            mu: vec![vec![1.0; levels]; frames],
            avg_mse: vec![vec![0.0; levels]; frames],
            observations: vec![vec![0; levels]; frames],
            mse_factor: 1.5,
            step: 0.01,
            decay: 0.99,
            warmup: 200,
            min_weight: 1.0,
            max_weight: 10.0,
            enabled: true,
        }
    }

    /// A modulator that keeps every weight at 1.
    pub fn disabled(frames: usize, levels: usize) -> Self {
        Self {
            enabled: false,
            ..Self::new(frames, levels)
        }
    }

    pub fn weight(&self, t: usize, level: usize) -> f64 {
        if !self.enabled {
            return 1.0;
        }
        let t = t.min(self.mu.len() - 1);
        self.mu[t][level]
    }

    pub fn psnr_slack_db(&self) -> f64 {
        delta_from_mse_factor(self.mse_factor)
    }

    /// Feeds one observed MSE for frame `t` at `level`.
    pub fn observe_mse(&mut self, t: usize, level: usize, mse: f64) {
        let t = t.min(self.mu.len() - 1);
        let n = &mut self.observations[t][level];
        let avg = &mut self.avg_mse[t][level];
        *avg = if *n == 0 { mse } else { self.decay * *avg + (1.0 - self.decay) * mse };
        *n += 1;
        if t == 0 || !self.enabled {
            return;
        }
        if self.observations[t][level] < self.warmup || self.observations[0][level] < self.warmup {
            return;
        }
        let underperforming = self.avg_mse[t][level] > self.avg_mse[0][level] * self.mse_factor;
        let mu = &mut self.mu[t][level];
        *mu += if underperforming { self.step } else { -self.step };
        *mu = mu.clamp(self.min_weight, self.max_weight);
    }
}

/// Feeds an observed PSNR (dB, peak 1) into the modulator.
pub fn update_modulator(state: &mut ModulatorState, t: usize, level: usize, psnr_db: f64) {
    state.observe_mse(t, level, 10f64.powf(-psnr_db / 10.0));
}

/// Training-time level trajectory: `l_0` uniform, then a rounded, clipped
/// Gaussian random walk with standard deviation 0.5.
pub fn sample_level_sequence<R: Rng + ?Sized>(levels: usize, frames: usize, rng: &mut R) -> Vec<usize> {
    if frames == 0 {
        return Vec::new();
    }
    let l0 = rng.random_range(0..levels);
    let normal = Normal::new(0.0, 0.5).expect("valid normal");
    let steps: Vec<f64> = (1..frames).map(|_| normal.sample(rng)).collect();
    level_walk(levels, l0, &steps)
}

/// Applies `l_t = clip(round(l_{t-1} + v_t), 0, L-1)` to explicit increments.
pub fn level_walk(levels: usize, start: usize, increments: &[f64]) -> Vec<usize> {
    let top = (levels - 1) as f64;
    let mut out = Vec::with_capacity(increments.len() + 1);
    let mut l = start.min(levels - 1);
    out.push(l);
    for v in increments {
        l = libm::round(l as f64 + v).clamp(0.0, top) as usize;
        out.push(l);
    }
    out
}

/// Levels travel as 8.8 fixed point; encoders snap to that grid before use.
pub fn quantize_level(level: f64) -> f64 {
    level_from_fixed(level_to_fixed(level))
}

pub fn level_to_fixed(level: f64) -> u16 {
    libm::round(level.clamp(0.0, 255.0) * 256.0).min(u16::MAX as f64) as u16
}

pub fn level_from_fixed(v: u16) -> f64 {
    v as f64 / 256.0
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum RateMode {
    ConstantLevel(f64),
    MaxBpp { cap_i: f64, cap_p: f64 },
    MinQuality { target_psnr: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProbeResult {
    pub bpp: f64,
    pub psnr: f64,
}

/// Evaluates the current frame at a candidate level, given the committed past.
pub trait FrameProbe {
    fn probe(&mut self, level: f64) -> Result<ProbeResult>;
}

impl<F: FnMut(f64) -> Result<ProbeResult>> FrameProbe for F {
    fn probe(&mut self, level: f64) -> Result<ProbeResult> {
        self(level)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RateDecision {
    pub level: f64,
    /// The constraint could not be met; `level` is the best-effort fallback.
    pub violated: bool,
    pub result: ProbeResult,
}

pub const BISECTION_STEPS: usize = 8;

/// Picks the level for one frame.
///
/// Max-bpp returns the highest level whose bpp fits the cap; min-quality the
/// lowest level reaching the PSNR target. Both bisect on the 8.8 level grid and
/// assume monotone behaviour in the level.
pub fn rate_control<P: FrameProbe + ?Sized>(
    mode: RateMode,
    is_iframe: bool,
    levels: usize,
    probe: &mut P,
) -> Result<RateDecision> {
    let top = (levels - 1) as f64;
    match mode {
        RateMode::ConstantLevel(l) => {
            let level = quantize_level(l.clamp(0.0, top));
            let result = probe.probe(level)?;
            Ok(RateDecision {
                level,
                violated: false,
                result,
            })
        }
        RateMode::MaxBpp { cap_i, cap_p } => {
            let cap = if is_iframe { cap_i } else { cap_p };
            bisect(levels, probe, |r| r.bpp <= cap, true)
        }
        RateMode::MinQuality { target_psnr } => bisect(levels, probe, |r| r.psnr >= target_psnr, false),
    }
}

/// `prefer_high`: feasible set is `[0, x*]` (find the highest feasible level);
/// otherwise it is `[x*, top]` (find the lowest).
fn bisect<P: FrameProbe + ?Sized>(
    levels: usize,
    probe: &mut P,
    feasible: impl Fn(&ProbeResult) -> bool,
    prefer_high: bool,
) -> Result<RateDecision> {
    let top = quantize_level((levels - 1) as f64);
    let (best_edge, worst_edge) = if prefer_high { (top, 0.0) } else { (0.0, top) };
    let r = probe.probe(best_edge)?;
    if feasible(&r) {
        return Ok(RateDecision {
            level: best_edge,
            violated: false,
            result: r,
        });
    }
    let r = probe.probe(worst_edge)?;
    if !feasible(&r) {
        return Ok(RateDecision {
            level: worst_edge,
            violated: true,
            result: r,
        });
    }
    let (mut ok, mut ok_res, mut bad) = (worst_edge, r, best_edge);
    for _ in 0..BISECTION_STEPS {
        let mid = quantize_level(0.5 * (ok + bad));
        if mid == ok || mid == bad {
            break;
        }
        let r = probe.probe(mid)?;
        if feasible(&r) {
            ok = mid;
            ok_res = r;
        } else {
            bad = mid;
        }
    }
    Ok(RateDecision {
        level: ok,
        violated: false,
        result: ok_res,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn embedding_worked_examples() {
        let e = embed_level(3.0, 8, 8).unwrap();
        assert_eq!(e.vector, onehot(3, 8));

        let e = embed_level(1.0, 5, 3).unwrap();
        assert_eq!(e.s, 0.5);
        assert_eq!(e.alpha, 0.5);
        assert_eq!(e.vector, vec![0.5, 0.5, 0.0]);

        let e = embed_level(1.0, 3, 5).unwrap();
        assert_eq!(e.s, 2.0);
        assert_eq!(e.d_u, 0.0);
        assert_eq!(e.alpha, 1.0);
        assert_eq!(e.vector, onehot(2, 5));
    }

    #[test]
    fn top_level_is_last_onehot() {
        let e = embed_level(3.0, 4, 4).unwrap();
        assert_eq!(e.vector, vec![0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn out_of_range_level_is_clamped() {
        assert_eq!(embed_level(9.0, 4, 4).unwrap().source_level, 3.0);
        assert_eq!(embed_level(-1.0, 4, 4).unwrap().vector, onehot(0, 4));
        assert!(embed_level(1.0, 1, 4).is_err());
    }

    #[test]
    fn quant_width_is_geometric_blend() {
        let table = QuantWidthTable::new(Tensor::new(vec![2, 1], vec![0.5f64.ln(), 2.0f64.ln()]).unwrap()).unwrap();
        let one = embed_level(0.0, 2, 2).unwrap();
        assert!((quant_width(&one, &table, 0) - 0.5).abs() < 1e-15);
        let half = embed_level(0.5, 2, 2).unwrap();
        assert!((quant_width(&half, &table, 0) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn loss_worked_example() {
        let mut m = ModulatorState::new(2, 4);
        m.mu[0][1] = 2.0;
        let lam = LambdaSchedule { values: vec![0.0, 1e-3, 0.0, 0.0] };
        let loss = multi_level_loss(
            &[FrameTerms {
                distortion: 0.01,
                rate: 100.0,
                level: 1,
            }],
            &lam,
            &m,
        );
        assert!((loss - 0.12).abs() < 1e-12);
    }

    #[test]
    fn lambda_schedule_endpoints_and_monotonicity() {
        let s = LambdaSchedule::log_linear(4, 10f64.powf(-1.5), 10f64.powf(-3.5)).unwrap();
        assert!((s.values[0] - 10f64.powf(-1.5)).abs() < 1e-15);
        assert!((s.values[3] - 10f64.powf(-3.5)).abs() < 1e-15);
        assert!(s.values.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn factor_to_delta() {
        assert!((delta_from_mse_factor(1.5) - 1.7609).abs() < 1e-4);
        assert!((mse_factor_from_delta(delta_from_mse_factor(1.5)) - 1.5).abs() < 1e-12);
    }

    #[test]
    fn modulator_waits_for_warmup() {
        let mut m = ModulatorState::new(2, 1);
        for _ in 0..199 {
            update_modulator(&mut m, 0, 0, 40.0);
            update_modulator(&mut m, 1, 0, 30.0);
        }
        assert_eq!(m.mu[1][0], 1.0 + 0.0);
        update_modulator(&mut m, 0, 0, 40.0);
        update_modulator(&mut m, 1, 0, 30.0);
        assert!((m.mu[1][0] - 1.01).abs() < 1e-12);
    }

    #[test]
    fn threshold_equality_counts_as_not_underperforming() {
        let mut m = ModulatorState::new(2, 1);
        m.warmup = 1;
        m.mu[1][0] = 5.0;
        m.observe_mse(0, 0, 0.002);
        m.observe_mse(1, 0, 0.003);
        assert!((m.mu[1][0] - 4.99).abs() < 1e-12);
    }

    #[test]
    fn forced_zero_increments_hold_level() {
        assert_eq!(level_walk(4, 2, &[0.0; 5]), vec![2; 6]);
        assert_eq!(level_walk(4, 3, &[2.0]), vec![3, 3]);
        assert_eq!(level_walk(4, 0, &[-0.7]), vec![0, 0]);
    }

    #[test]
    fn sampled_sequences_are_seeded_and_in_range() {
        let a = sample_level_sequence(4, 16, &mut ChaCha8Rng::seed_from_u64(9));
        let b = sample_level_sequence(4, 16, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
        assert!(a.iter().all(|&l| l < 4));
    }

    #[test]
    fn fixed_point_levels() {
        assert_eq!(level_to_fixed(1.5), 384);
        assert_eq!(level_from_fixed(384), 1.5);
        assert_eq!(quantize_level(0.3), 77.0 / 256.0);
    }

    fn linear_probe(level: f64) -> Result<ProbeResult> {
        Ok(ProbeResult {
            bpp: 0.02 + 0.03 * level,
            psnr: 30.0 + 3.0 * level,
        })
    }

    #[test]
    fn constant_mode_returns_level() {
        let d = rate_control(RateMode::ConstantLevel(2.0), false, 4, &mut linear_probe).unwrap();
        assert_eq!(d.level, 2.0);
    }

    #[test]
    fn max_bpp_finds_highest_fitting_level() {
        let d = rate_control(RateMode::MaxBpp { cap_i: 0.081, cap_p: 0.037 }, true, 4, &mut linear_probe).unwrap();
        assert!(!d.violated);
        assert!(d.result.bpp <= 0.081);
        assert!(d.level > 1.9 && d.level <= 2.034, "{}", d.level);
        let d = rate_control(RateMode::MaxBpp { cap_i: 0.081, cap_p: 0.01 }, false, 4, &mut linear_probe).unwrap();
        assert!(d.violated);
        assert_eq!(d.level, 0.0);
    }

    #[test]
    fn min_quality_finds_lowest_sufficient_level() {
        let d = rate_control(RateMode::MinQuality { target_psnr: 37.0 }, false, 4, &mut linear_probe).unwrap();
        assert!(!d.violated && d.result.psnr >= 37.0);
        assert!(d.level >= 2.333 && d.level < 2.36, "{}", d.level);
        let d = rate_control(RateMode::MinQuality { target_psnr: 80.0 }, false, 4, &mut linear_probe).unwrap();
        assert!(d.violated);
        assert_eq!(d.level, 3.0);
    }
}
