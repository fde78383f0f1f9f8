//! Multi-level training over IPPP unrolls.

use super::config::TrainConfig;
use super::model::{inter_forward, intra_forward, Architecture, ContextVars, EncodeLatents, Model, NormSet};
use crate::autodiff::{Tape, Var};
use crate::codelayer::QuantMode;
use crate::error::{Error, Result};
use crate::optim::{adam_step, AdamState};
use crate::params::Bound;
use crate::rateflex::{embed_level, sample_level_sequence, LambdaSchedule, ModulatorState};
use crate::tensor::Tensor;
use crate::tools::metrics::psnr_from_mse;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Per-frame measurements from one unrolled clip.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FrameStat {
    pub level: usize,
    pub mse: f64,
    /// Estimated bits per pixel from the differentiable codelengths.
    pub bpp: f64,
}

pub struct ClipLoss {
    pub loss: Var,
    pub frames: Vec<FrameStat>,
}

/// Builds `(1/T) sum_t [mu * MSE_t + lambda * R_t]` for one clip on `tape`.
///
/// Frame 0 is coded as an I-frame, the rest as P-frames that see the previous
/// reconstructions through the tape, so gradients flow along the unroll.
#[allow(clippy::too_many_arguments)]
pub fn clip_loss<R: Rng + ?Sized>(
    tape: &mut Tape,
    p: &Bound,
    arch: &Architecture,
    norms: &mut NormSet,
    clip: &[Tensor],
    levels: &[usize],
    mode: QuantMode,
    training: bool,
    lambda: &LambdaSchedule,
    modulator: &ModulatorState,
    rng: &mut R,
) -> Result<ClipLoss> {
    if clip.is_empty() || clip.len() != levels.len() {
        return Err(Error::InvalidArgument(format!(
            "clip of {} frames with {} levels",
            clip.len(),
            levels.len()
        )));
    }
    let (_, h, w) = clip[0].dims3();
    let pixels = (h * w) as f64;
    let mut terms = Vec::with_capacity(clip.len());
    let mut stats = Vec::with_capacity(clip.len());
    let mut ctx: Option<ContextVars> = None;
    let mut pred_stats = norms.predictor.clone();
    for (t, (x, &l)) in clip.iter().zip(levels).enumerate() {
        let lv = embed_level(l as f64, arch.config.levels, arch.config.level_dims)?;
        let xv = tape.constant(x.clone());
        let mut lat = EncodeLatents {
            x: xv,
            mode,
            training,
            norms: &mut *norms,
            rng: &mut *rng,
            outputs: Vec::new(),
        };
        let (recon, next) = match ctx {
            None => {
                let o = intra_forward(tape, p, arch, &mut lat, &lv, h, w)?;
                let zero = tape.constant(Tensor::zeros(&[3, h, w]));
                (
                    o.recon,
                    ContextVars {
                        prev_recon: o.recon,
                        prev_prev_recon: o.recon,
                        prev_flow: zero,
                        state: o.state,
                    },
                )
            }
            Some(c) => {
                let o = inter_forward(tape, p, arch, &mut lat, c, &lv, &mut pred_stats, training)?;
                (
                    o.recon,
                    ContextVars {
                        prev_recon: o.recon,
                        prev_prev_recon: c.prev_recon,
                        prev_flow: o.flow,
                        state: o.state,
                    },
                )
            }
        };
        let outputs = std::mem::take(&mut lat.outputs);
        let mut bits: Option<Var> = None;
        for (_, o) in &outputs {
            let b = tape.add(o.bits0, o.bits1)?;
            bits = Some(match bits {
                Some(acc) => tape.add(acc, b)?,
                None => b,
            });
        }
        let bits = bits.expect("every frame codes at least one block");
        let bpp = tape.scale(bits, 1.0 / pixels);
        let mse = tape.mse(recon, xv)?;
        stats.push(FrameStat {
            level: l,
            mse: tape.scalar(mse),
            bpp: tape.scalar(bpp),
        });
        let d = tape.scale(mse, modulator.weight(t, l));
        let r = tape.scale(bpp, lambda.get(l));
        terms.push(tape.add(d, r)?);
        ctx = Some(next);
    }
    norms.predictor = pred_stats;
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = tape.add(total, t)?;
    }
    let loss = tape.scale(total, 1.0 / clip.len() as f64);
    Ok(ClipLoss { loss, frames: stats })
}

/// Learning rate at `step`: dropped 5x at 80% and again at 95% of the run.
pub fn learning_rate(base: f64, step: usize, total: usize) -> f64 {
    let f = step as f64 / total as f64;
    if f >= 0.95 {
        base * 0.04
    } else if f >= 0.8 {
        base * 0.2
    } else {
        base
    }
}

/// Random `crop x crop` window of `frames` consecutive frames.
pub fn sample_crop<R: Rng + ?Sized>(clip: &[Tensor], frames: usize, crop: usize, rng: &mut R) -> Result<Vec<Tensor>> {
    if clip.len() < frames {
        return Err(Error::InvalidArgument(format!("clip has {} frames, need {frames}", clip.len())));
    }
    let (c, h, w) = clip[0].dims3();
    if h < crop || w < crop {
        return Err(Error::InvalidArgument(format!("{w}x{h} frames are smaller than the {crop} crop")));
    }
    let start = rng.random_range(0..=clip.len() - frames);
    let y0 = rng.random_range(0..=h - crop);
    let x0 = rng.random_range(0..=w - crop);
    Ok(clip[start..start + frames]
        .iter()
        .map(|f| Tensor::from_fn3(c, crop, crop, |ci, y, x| f.at3(ci, y0 + y, x0 + x)))
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
    pub learning_rate: f64,
    /// Mean estimated bpp and PSNR per level over the epoch's frames (NaN if unseen).
    pub level_bpp: Vec<f64>,
    pub level_psnr: Vec<f64>,
    /// Modulator table, `[frame][level]`.
    pub mu: Vec<Vec<f64>>,
}

impl EpochLog {
    pub fn to_line(&self) -> String {
        let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.4}")).collect::<Vec<_>>().join(",");
        let mu = self.mu.iter().map(|r| fmt(r)).collect::<Vec<_>>().join(";");
        format!(
            "epoch {} step {} loss {:.6} lr {:.2e} bpp [{}] psnr [{}] mu [{}]",
            self.epoch,
            self.step,
            self.loss,
            self.learning_rate,
            fmt(&self.level_bpp),
            fmt(&self.level_psnr),
            mu
        )
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Final weights, or the last good ones when the run aborted.
    pub model: Model,
    pub epochs: Vec<EpochLog>,
    pub modulator: ModulatorState,
    /// Set when a non-finite loss or gradient stopped the run.
    pub aborted: Option<String>,
}

#[derive(Default)]
struct EpochAcc {
    loss: f64,
    clips: usize,
    bpp: Vec<(f64, usize)>,
    mse: Vec<(f64, usize)>,
}

/// Trains a fresh model on `clips`, calling `on_epoch` after every epoch.
pub fn train(cfg: &TrainConfig, clips: &[Vec<Tensor>], mut on_epoch: impl FnMut(&EpochLog)) -> Result<TrainOutcome> {
    cfg.validate()?;
    if clips.is_empty() {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    let mut model = Model::new(cfg.model.clone())?;
    let levels = model.levels();
    let lambda = LambdaSchedule::log_linear(levels, cfg.lambda_first, cfg.lambda_last)?;
    let mut modulator = if cfg.modulator {
        ModulatorState::new(cfg.clip_frames, levels)
    } else {
        ModulatorState::disabled(cfg.clip_frames, levels)
    };
    modulator.warmup = cfg.modulator_warmup;
    let mut adam = AdamState::new(model.params.values(), cfg.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut epochs = Vec::new();
    let mut acc = EpochAcc::default();
    let reset = |acc: &mut EpochAcc| {
        *acc = EpochAcc {
            bpp: vec![(0.0, 0); levels],
            mse: vec![(0.0, 0); levels],
            ..Default::default()
        }
    };
    reset(&mut acc);
    for step in 0..cfg.steps {
        adam.learning_rate = learning_rate(cfg.learning_rate, step, cfg.steps);
        let mut grads: Vec<Tensor> = model.params.values().iter().map(|t| Tensor::zeros(t.shape())).collect();
        let norms_before = model.norms.clone();
        let mut observed = Vec::new();
        let mut step_loss = 0.0;
        for _ in 0..cfg.batch {
            let ci = rng.random_range(0..clips.len());
            let clip = sample_crop(&clips[ci], cfg.clip_frames, cfg.crop, &mut rng)?;
            let lv = sample_level_sequence(levels, cfg.clip_frames, &mut rng);
            let mut tape = Tape::new();
            let p = model.params.bind(&mut tape);
            let cl = clip_loss(
                &mut tape,
                &p,
                &model.arch,
                &mut model.norms,
                &clip,
                &lv,
                QuantMode::Mixed,
                true,
                &lambda,
                &modulator,
                &mut rng,
            )?;
            let loss = tape.scalar(cl.loss);
            if !loss.is_finite() {
                model.norms = norms_before;
                return Ok(abort(model, epochs, modulator, format!("non-finite loss at step {step}")));
            }
            let g = tape.backward(cl.loss)?;
            for (id, acc_g) in grads.iter_mut().enumerate() {
                if let Some(gi) = g.get(id) {
                    acc_g.add_assign(gi);
                }
            }
            step_loss += loss;
            observed.extend(cl.frames.iter().enumerate().map(|(t, f)| (t, *f)));
        }
        if let Err(e) = adam_step(model.params.values_mut(), &grads, &mut adam) {
            model.norms = norms_before;
            return Ok(abort(model, epochs, modulator, format!("step {step}: {e}")));
        }
        for (t, f) in observed {
            modulator.observe_mse(t, f.level, f.mse);
            acc.bpp[f.level].0 += f.bpp;
            acc.bpp[f.level].1 += 1;
            acc.mse[f.level].0 += f.mse;
            acc.mse[f.level].1 += 1;
        }
        acc.loss += step_loss;
        acc.clips += cfg.batch;
        if (step + 1) % cfg.epoch_steps == 0 || step + 1 == cfg.steps {
            let avg = |v: &(f64, usize)| if v.1 == 0 { f64::NAN } else { v.0 / v.1 as f64 };
            let log = EpochLog {
                epoch: epochs.len() + 1,
                step: step + 1,
                loss: acc.loss / acc.clips as f64,
                learning_rate: adam.learning_rate,
                level_bpp: acc.bpp.iter().map(avg).collect(),
                level_psnr: acc.mse.iter().map(|v| psnr_from_mse(avg(v))).collect(),
                mu: modulator.mu.clone(),
            };
            log::debug!("{}", log.to_line());
            on_epoch(&log);
            epochs.push(log);
            reset(&mut acc);
        }
    }
    Ok(TrainOutcome {
        model,
        epochs,
        modulator,
        aborted: None,
    })
}

fn abort(model: Model, epochs: Vec<EpochLog>, modulator: ModulatorState, why: String) -> TrainOutcome {
    log::warn!("training aborted: {why}");
    TrainOutcome {
        model,
        epochs,
        modulator,
        aborted: Some(why),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::config::ModelConfig;

    #[test]
    fn lr_schedule_drops_twice() {
        assert_eq!(learning_rate(1e-4, 0, 100), 1e-4);
        assert_eq!(learning_rate(1e-4, 79, 100), 1e-4);
        assert!((learning_rate(1e-4, 80, 100) - 2e-5).abs() < 1e-18);
        assert!((learning_rate(1e-4, 95, 100) - 4e-6).abs() < 1e-18);
    }

    #[test]
    fn crops_come_from_the_clip() {
        let clip: Vec<Tensor> = (0..5)
            .map(|t| Tensor::from_fn3(3, 20, 24, |c, y, x| (t * 10000 + c * 1000 + y * 30 + x) as f64))
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let c = sample_crop(&clip, 3, 16, &mut rng).unwrap();
        assert_eq!(c.len(), 3);
        let v = c[1].at3(0, 0, 0) - c[0].at3(0, 0, 0);
        assert_eq!(v, 10000.0);
        assert!(sample_crop(&clip, 6, 16, &mut rng).is_err());
        assert!(sample_crop(&clip, 2, 32, &mut rng).is_err());
    }

    #[test]
    fn short_run_is_finite_and_logs_epochs() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let clips: Vec<Vec<Tensor>> = (0..2)
            .map(|_| (0..3).map(|_| Tensor::rand_uniform(&[3, 16, 16], 0.0, 1.0, &mut rng)).collect())
            .collect();
        let cfg = TrainConfig {
            model: ModelConfig::tiny(),
            steps: 4,
            batch: 1,
            crop: 16,
            clip_frames: 3,
            epoch_steps: 2,
            ..TrainConfig::default()
        };
        let mut lines = 0;
        let out = train(&cfg, &clips, |_| lines += 1).unwrap();
        assert!(out.aborted.is_none());
        assert_eq!(out.epochs.len(), 2);
        assert_eq!(lines, 2);
        assert!(out.epochs.iter().all(|e| e.loss.is_finite()));
        assert!(out.model.norms.intra.step_count > 0);
        assert!(out.model.norms.predictor.step_count > 0);
    }
}
