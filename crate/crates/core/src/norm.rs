//! Channel normalization with moving-average statistics that freeze after a
//! fixed number of training calls.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const NORM_EPS: f64 = 1e-5;
pub const STATS_DECAY: f64 = 0.99;
pub const FREEZE_AFTER: u64 = 2000;

#[derive(Clone, Debug, PartialEq)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
    pub step_count: u64,
    pub frozen: bool,
}

impl ChannelStats {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            variance: vec![1.0; channels],
            step_count: 0,
            frozen: false,
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    fn observe(&mut self, x: &Tensor) {
        let (c, h, w) = x.dims3();
        let n = (h * w) as f64;
        for ci in 0..c {
            let plane = x.channel(ci);
            let m = plane.iter().sum::<f64>() / n;
            let v = plane.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / n;
            self.mean[ci] = STATS_DECAY * self.mean[ci] + (1.0 - STATS_DECAY) * m;
            self.variance[ci] = STATS_DECAY * self.variance[ci] + (1.0 - STATS_DECAY) * v;
        }
        self.step_count += 1;
        if self.step_count >= FREEZE_AFTER {
            self.frozen = true;
        }
    }

    fn inv_std(&self) -> Vec<f64> {
        self.variance.iter().map(|v| 1.0 / (v + NORM_EPS).sqrt()).collect()
    }
}

/// `(x[c] - mean[c]) / sqrt(var[c] + eps)`.
///
/// In training mode, unfrozen statistics absorb the batch moments first. The
/// statistics are treated as constants by the reverse pass.
pub fn channel_normalize(tape: &mut Tape, x: Var, stats: &mut ChannelStats, training: bool) -> Result<Var> {
    let c = tape.value(x).dims3().0;
    if c != stats.channels() {
        return Err(Error::shape("channel_normalize", tape.value(x).shape(), &[stats.channels()]));
    }
    if training && !stats.frozen {
        stats.observe(tape.value(x));
    }
    tape.channel_affine_norm(x, &stats.mean, &stats.inv_std())
}

/// Read-only normalization of a plain tensor.
pub fn normalize_tensor(x: &Tensor, stats: &ChannelStats) -> Result<Tensor> {
    let mut tape = Tape::new();
    let v = tape.constant(x.clone());
    let mut s = stats.clone();
    let out = channel_normalize(&mut tape, v, &mut s, false)?;
    Ok(tape.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn unit_stats_are_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::randn(&[3, 4, 4], 1.0, &mut rng);
        let mut s = ChannelStats::new(3);
        s.freeze();
        let y = normalize_tensor(&x, &s).unwrap();
        for (a, b) in x.data().iter().zip(y.data()) {
            assert!((a - b).abs() <= NORM_EPS * a.abs() + 1e-12);
        }
    }

    #[test]
    fn constant_input_at_its_own_mean_is_zero() {
        let x = Tensor::full(&[2, 3, 3], 0.625);
        let mut s = ChannelStats::new(2);
        s.mean = vec![0.625; 2];
        s.variance = vec![0.3; 2];
        s.freeze();
        let y = normalize_tensor(&x, &s).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn stats_freeze_at_threshold() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut s = ChannelStats::new(2);
        let mut tape = Tape::new();
        for i in 0..FREEZE_AFTER {
            let x = tape.constant(Tensor::randn(&[2, 3, 3], 2.0, &mut rng));
            channel_normalize(&mut tape, x, &mut s, true).unwrap();
            assert_eq!(s.frozen, i + 1 >= FREEZE_AFTER);
        }
        let before = s.clone();
        let x = tape.constant(Tensor::randn(&[2, 3, 3], 5.0, &mut rng));
        channel_normalize(&mut tape, x, &mut s, true).unwrap();
        assert_eq!(s, before);
        assert!(s.variance.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn inference_never_touches_stats() {
        let mut s = ChannelStats::new(1);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[1, 2, 2], 3.0));
        channel_normalize(&mut tape, x, &mut s, false).unwrap();
        assert_eq!(s, ChannelStats::new(1));
    }
}
