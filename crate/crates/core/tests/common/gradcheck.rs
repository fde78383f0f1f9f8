//! Central-difference gradient checks against the tape.

use elfvc::autodiff::{Tape, Var};
use elfvc::backbone::{dm_block, DMBlock, DMBlockConfig, Feature};
use elfvc::codec::config::ModelConfig;
use elfvc::codec::model::Model;
use elfvc::codec::train::clip_loss;
use elfvc::codelayer::{hyperprior_code, level_widths, Hyperprior, QuantMode};
use elfvc::motion::default_sigmas;
use elfvc::norm::{channel_normalize, ChannelStats};
use elfvc::params::ParamStore;
use elfvc::rateflex::{embed_level, LambdaSchedule, ModulatorState};
use elfvc::{Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const TOLERANCE: f64 = 1e-4;

/// Most coordinates probed per input tensor.
const MAX_PROBES: usize = 48;

#[derive(Debug, Clone)]
pub struct CaseResult {
    pub name: String,
    pub rel_err: f64,
    pub probes: usize,
}

impl CaseResult {
    pub fn passed(&self) -> bool {
        self.rel_err < TOLERANCE
    }
}

/// `||analytic - numeric|| / max(||analytic||, ||numeric||)` over probed coordinates.
pub fn check<F>(name: &str, inputs: &[Tensor], seed: u64, f: F) -> CaseResult
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().enumerate().map(|(i, t)| tape.param(i, t.clone())).collect();
        let out = f(&mut tape, &vars).expect("forward");
        tape.scalar(out)
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().enumerate().map(|(i, t)| tape.param(i, t.clone())).collect();
    let out = f(&mut tape, &vars).expect("forward");
    let grads = tape.backward(out).expect("backward");

    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let (mut diff2, mut a2, mut n2, mut probes) = (0.0, 0.0, 0.0, 0);
    let mut xs = inputs.to_vec();
    for (i, t) in inputs.iter().enumerate() {
        let n = t.numel();
        let picks: Vec<usize> = if n <= MAX_PROBES {
            (0..n).collect()
        } else {
            (0..MAX_PROBES).map(|_| rng.random_range(0..n)).collect()
        };
        for j in picks {
            let x0 = t.data()[j];
            let h = 1e-6 * x0.abs().max(1.0);
            xs[i].data_mut()[j] = x0 + h;
            let up = eval(&xs);
            xs[i].data_mut()[j] = x0 - h;
            let down = eval(&xs);
            xs[i].data_mut()[j] = x0;
            let numeric = (up - down) / (2.0 * h);
            let analytic = grads.get(i).map_or(0.0, |g| g.data()[j]);
            diff2 += (analytic - numeric) * (analytic - numeric);
            a2 += analytic * analytic;
            n2 += numeric * numeric;
            probes += 1;
        }
    }
    let scale = a2.sqrt().max(n2.sqrt());
    let rel_err = if scale == 0.0 { 0.0 } else { diff2.sqrt() / scale };
    CaseResult {
        name: name.to_string(),
        rel_err,
        probes,
    }
}

/// Contracts a tensor output with fixed random weights so every element matters.
fn project(tape: &mut Tape, out: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(31).wrapping_add(7));
    let shape = tape.value(out).shape().to_vec();
    let r = tape.constant(Tensor::rand_uniform(&shape, -1.0, 1.0, &mut rng));
    let m = tape.mul(out, r)?;
    Ok(tape.sum(m))
}

fn rand(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::rand_uniform(shape, lo, hi, rng)
}

/// Flow whose sigma channel stays away from pyramid level boundaries.
fn rand_flow(h: usize, w: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let m = default_sigmas().len() as f64;
    Tensor::from_fn3(3, h, w, |c, _, _| match c {
        2 => {
            let k = rng.random_range(0..(m as usize - 1)) as f64;
            k + rng.random_range(0.1..0.9)
        }
        _ => rng.random_range(-2.7..2.7),
    })
}

pub fn conv_case(seed: u64) -> CaseResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let stride = 1 + (seed % 2) as usize;
    let k = if seed % 3 == 0 { 1 } else { 3 };
    let (ci, co) = (rng.random_range(1..4), rng.random_range(1..4));
    let inputs = [
        rand(&[ci, 6, 7], -1.0, 1.0, &mut rng),
        rand(&[co, ci, k, k], -0.5, 0.5, &mut rng),
        rand(&[co], -0.2, 0.2, &mut rng),
    ];
    check(&format!("conv k{k} s{stride} #{seed}"), &inputs, seed, |t, v| {
        let y = t.conv2d(v[0], v[1], v[2], stride)?;
        project(t, y, seed)
    })
}

pub fn normalize_case(seed: u64) -> CaseResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = rng.random_range(1..5);
    let mut stats = ChannelStats::new(c);
    for ci in 0..c {
        stats.mean[ci] = rng.random_range(-0.5..0.5);
        stats.variance[ci] = rng.random_range(0.2..2.0);
    }
    stats.freeze();
    let inputs = [rand(&[c, 5, 4], -2.0, 2.0, &mut rng)];
    check(&format!("normalize #{seed}"), &inputs, seed, |t, v| {
        let mut s = stats.clone();
        let y = channel_normalize(t, v[0], &mut s, true)?;
        project(t, y, seed)
    })
}

pub fn warp_case(seed: u64) -> CaseResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (8, 9);
    let c = rng.random_range(1..4);
    let inputs = [rand(&[c, h, w], 0.0, 1.0, &mut rng), rand_flow(h, w, &mut rng)];
    let sigmas = default_sigmas();
    check(&format!("warp #{seed}"), &inputs, seed, |t, v| {
        let y = t.warp(v[0], v[1], &sigmas)?;
        project(t, y, seed)
    })
}

/// Warp with only one flow channel free, so each channel gets its own verdict.
pub fn warp_channel_case(seed: u64, channel: usize) -> CaseResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (7, 8);
    let prev = rand(&[2, h, w], 0.0, 1.0, &mut rng);
    let flow = rand_flow(h, w, &mut rng);
    let fixed = flow.clone();
    let inputs = [flow.slice_channels(channel, 1)];
    let sigmas = default_sigmas();
    check(&format!("warp flow[{channel}] #{seed}"), &inputs, seed, |t, v| {
        let parts: Vec<Var> = (0..3)
            .map(|c| if c == channel { v[0] } else { t.constant(fixed.slice_channels(c, 1)) })
            .collect();
        let f = t.concat(&parts)?;
        let p = t.constant(prev.clone());
        let y = t.warp(p, f, &sigmas)?;
        project(t, y, seed)
    })
}

pub fn codelength_case(seed: u64) -> CaseResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = rng.random_range(1..4);
    let shape = [c, 3, 4];
    let mu = rand(&shape, -1.0, 1.0, &mut rng);
    let sigma = rand(&shape, 0.3, 2.5, &mut rng);
    // within 2.5 sigma of the mean, so no element sits on the probability floor
    let z = rand(&shape, -2.5, 2.5, &mut rng);
    let y = Tensor::new(
        shape.to_vec(),
        (0..z.numel()).map(|i| mu.data()[i] + sigma.data()[i] * z.data()[i]).collect(),
    )
    .unwrap();
    let inputs = [y, mu, sigma, rand(&[c], 0.5, 2.0, &mut rng)];
    check(&format!("codelength #{seed}"), &inputs, seed, |t, v| t.codelength(v[0], v[1], v[2], v[3]))
}

pub fn mse_case(seed: u64) -> CaseResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs = [rand(&[3, 4, 5], 0.0, 1.0, &mut rng), rand(&[3, 4, 5], 0.0, 1.0, &mut rng)];
    check(&format!("mse #{seed}"), &inputs, seed, |t, v| t.mse(v[0], v[1]))
}

/// Pointwise nonlinearities and the shape plumbing ops, chained.
pub fn elementwise_case(seed: u64) -> CaseResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs = [rand(&[4, 4, 6], -2.0, 2.0, &mut rng), rand(&[4], -1.0, 1.0, &mut rng)];
    check(&format!("pointwise #{seed}"), &inputs, seed, |t, v| {
        let a = t.leaky_relu(v[0]);
        let b = t.sigmoid(v[0]);
        let c = t.softplus(a);
        let e = t.scale(v[0], 0.3);
        let e = t.exp(e);
        let m = t.mul_channels(b, v[1])?;
        let s = t.add(c, m)?;
        let s = t.sub(s, e)?;
        let s = t.add_scalar(s, 0.4);
        let k = t.clamp01(s);
        let d = t.space_to_depth(k, 2)?;
        let u = t.depth_to_space(d, 2)?;
        let half = t.slice_channels(u, 1, 2);
        let up = t.upsample2(half, 7, 11);
        project(t, up, seed)
    })
}

pub fn level_width_case(seed: u64) -> CaseResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lv = embed_level(rng.random_range(0.0..3.0), 4, 4).unwrap();
    let inputs = [rand(&[4, 5], -0.7, 0.7, &mut rng)];
    check(&format!("level widths #{seed}"), &inputs, seed, |t, v| {
        let w = level_widths(t, v[0], &lv)?;
        project(t, w, seed)
    })
}

/// A full DM block with its parameters as the checked inputs.
pub fn dm_block_case(seed: u64) -> CaseResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let block = DMBlock::new(&mut store, &mut rng, "b", 3, DMBlockConfig::new(3, 2, 4)).unwrap();
    let x = rand(&[3, 5, 5], -1.0, 1.0, &mut rng);
    let mut inputs = store.values().to_vec();
    inputs.push(x);
    let xi = inputs.len() - 1;
    check(&format!("dm block #{seed}"), &inputs, seed, |t, v| {
        let p = bind_slice(&store, v);
        let out = dm_block(t, &p, &block, Feature { var: v[xi], scale: 4 })?;
        project(t, out.var, seed)
    })
}

/// Hyperprior coding with noise quantization: both codelengths and the decoded mean.
pub fn hyperprior_case(seed: u64) -> CaseResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let hp = Hyperprior::new(&mut store, &mut rng, "hp", 3, 2, 4, 3);
    let lv = embed_level(rng.random_range(0.0..3.0), 4, 4).unwrap();
    let mut inputs = store.values().to_vec();
    inputs.push(Tensor::zeros(&[3, 4, 4]));
    let yi = inputs.len() - 1;
    let f = |t: &mut Tape, v: &[Var]| {
        let p = bind_slice(&store, v);
        let mut noise = ChaCha8Rng::seed_from_u64(seed + 99);
        let o = hyperprior_code(t, &p, &hp, v[yi], &lv, QuantMode::Noise, &mut noise)?;
        let bits = t.add(o.bits0, o.bits1)?;
        let mu = project(t, o.mu0, seed)?;
        t.add(bits, mu)
    };
    loop {
        inputs[yi] = rand(&[3, 4, 4], -2.0, 2.0, &mut rng);
        if floor_free(&inputs, &f) {
            break;
        }
    }
    check(&format!("hyperprior #{seed}"), &inputs, seed, f)
}

/// True when no coded element of `f` at `inputs` sits on the probability floor,
/// where the backward pass deliberately departs from the true derivative.
fn floor_free<F>(inputs: &[Tensor], f: &F) -> bool
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut t = Tape::new();
    let vars: Vec<Var> = inputs.iter().enumerate().map(|(i, x)| t.param(i, x.clone())).collect();
    f(&mut t, &vars).expect("forward");
    t.floored_elements() == 0
}

/// The training loss of a tiny model over a 3-frame IPP clip, with frozen
/// normalization and fixed noise draws.
pub fn clip_loss_case(seed: u64) -> CaseResult {
    let mut model = Model::new(ModelConfig::tiny()).unwrap();
    model.norms.freeze_all();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lambda = LambdaSchedule::log_linear(4, 10f64.powf(-1.5), 10f64.powf(-3.5)).unwrap();
    let modulator = ModulatorState::new(3, 4);
    let inputs = model.params.values().to_vec();
    let store = model.params.clone();
    let arch = model.arch.clone();
    let norms = model.norms.clone();
    let loss = |clip: &[Tensor], levels: &[usize], t: &mut Tape, v: &[Var]| {
        let p = bind_slice(&store, v);
        let mut n = norms.clone();
        let mut noise = ChaCha8Rng::seed_from_u64(seed + 7);
        let cl = clip_loss(t, &p, &arch, &mut n, clip, levels, QuantMode::Noise, false, &lambda, &modulator, &mut noise)?;
        Ok(cl.loss)
    };
    let (clip, levels) = loop {
        let clip: Vec<Tensor> = (0..3).map(|_| rand(&[3, 16, 16], 0.0, 1.0, &mut rng)).collect();
        let levels: Vec<usize> = (0..3).map(|_| rng.random_range(0..4)).collect();
        if floor_free(&inputs, &|t: &mut Tape, v: &[Var]| loss(&clip, &levels, t, v)) {
            break (clip, levels);
        }
    };
    check(&format!("clip loss #{seed}"), &inputs, seed, |t, v| loss(&clip, &levels, t, v))
}

fn bind_slice(store: &ParamStore, vars: &[Var]) -> elfvc::params::Bound {
    elfvc::params::Bound::from_vars(vars[..store.len()].to_vec())
}

/// The whole randomized suite.
pub fn suite() -> Vec<CaseResult> {
    let mut out = Vec::new();
    for s in 0..16 {
        out.push(conv_case(s));
    }
    for s in 0..12 {
        out.push(normalize_case(100 + s));
        out.push(warp_case(200 + s));
        out.push(codelength_case(300 + s));
    }
    for s in 0..8 {
        for c in 0..3 {
            out.push(warp_channel_case(400 + s, c));
        }
        out.push(mse_case(500 + s));
        out.push(elementwise_case(600 + s));
        out.push(level_width_case(700 + s));
    }
    for s in 0..4 {
        out.push(dm_block_case(800 + s));
        out.push(hyperprior_case(900 + s));
    }
    for s in 0..2 {
        out.push(clip_loss_case(1000 + s));
    }
    out
}
