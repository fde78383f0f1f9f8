//! Behaviour of the committed desk model on fresh synthetic clips.

use elfvc::autodiff::Tape;
use elfvc::codec::model::Model;
use elfvc::codec::stream::{decode_video, encode_video};
use elfvc::codec::weights::load_model;
use elfvc::motion::FlowField;
use elfvc::rateflex::{embed_level, RateMode};
use elfvc::tools::image::quantize_8bit;
use elfvc::tools::synth::{Motion, SyntheticClipSpec, Texture};
use elfvc::Tensor;
use std::path::PathBuf;

fn desk() -> Model {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/data/desk.elfw");
    load_model(&path).unwrap()
}

fn clip(size: usize, frames: usize, vx: f64, vy: f64, seed: u64) -> Vec<Tensor> {
    let spec = SyntheticClipSpec {
        width: size,
        height: size,
        frames,
        motion: Motion::Translate { vx, vy },
        texture: Texture::Gradient,
        seed,
    };
    spec.render().iter().map(quantize_8bit).collect()
}

#[test]
fn top_level_beats_bottom_level() {
    let model = desk();
    let top = model.levels() as f64 - 1.0;
    for seed in [3, 4, 5] {
        let frames = clip(64, 1, 0.0, 0.0, seed);
        let lo = encode_video(&model, &frames, 1, RateMode::ConstantLevel(0.0)).unwrap();
        let hi = encode_video(&model, &frames, 1, RateMode::ConstantLevel(top)).unwrap();
        assert!(
            hi.mean_psnr() > lo.mean_psnr(),
            "seed {seed}: level {top} {:.2} dB, level 0 {:.2} dB",
            hi.mean_psnr(),
            lo.mean_psnr()
        );
        assert!(hi.mean_bpp() > lo.mean_bpp());
    }
}

#[test]
fn static_scene_p_frames_cost_far_less_than_the_i_frame() {
    let model = desk();
    let frames = clip(128, 5, 0.0, 0.0, 8);
    let enc = encode_video(&model, &frames, 5, RateMode::ConstantLevel(1.5)).unwrap();
    let i_bytes = enc.reports[0].bytes as f64;
    let p_bytes = enc.reports[1..].iter().map(|r| r.bytes as f64).sum::<f64>() / 4.0;
    assert!(p_bytes <= i_bytes / 4.0, "I {i_bytes} bytes, mean P {p_bytes:.1} bytes");
}

#[test]
fn predicted_flow_beats_zero_flow_on_constant_velocity() {
    let model = desk();
    let top = model.levels() as f64 - 1.0;
    let (vx, vy) = (2.0, 1.0);
    let (size, n) = (64, 6);
    let frames = clip(size, n, vx, vy, 12);
    let enc = encode_video(&model, &frames, n, RateMode::ConstantLevel(top)).unwrap();
    let dec = decode_video(&model, &enc.stream).unwrap();
    let truth = FlowField::translation(size, size, vx, vy);
    let zero = FlowField::zeros(size, size);
    let lv = embed_level(top, model.levels(), model.config.level_dims).unwrap();

    let (mut pred_err, mut zero_err) = (0.0, 0.0);
    for t in 2..n {
        let prev_flow = dec[t - 1].flow.as_ref().unwrap();
        let mut tape = Tape::new();
        let p = model.params.bind(&mut tape);
        let f = tape.constant(prev_flow.tensor().clone());
        let r2 = tape.constant(dec[t - 2].recon.clone());
        let r1 = tape.constant(dec[t - 1].recon.clone());
        let mut stats = model.norms.predictor.clone();
        let out = model.arch.predictor.predict(&mut tape, &p, f, r2, r1, &lv, &mut stats, false).unwrap();
        let predicted = FlowField::new(tape.value(out).clone()).unwrap();
        pred_err += predicted.endpoint_error(&truth).unwrap();
        zero_err += zero.endpoint_error(&truth).unwrap();
    }
    let k = (n - 2) as f64;
    assert!(
        pred_err < zero_err,
        "predicted endpoint error {:.3} px, zero flow {:.3} px",
        pred_err / k,
        zero_err / k
    );
}
