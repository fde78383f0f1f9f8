//! Regenerates the golden stream under tests/data/golden.
//!
//! cargo run --release -p elfvc --example golden

use elfvc::codec::config::ModelConfig;
use elfvc::codec::model::Model;
use elfvc::codec::stream::encode_video;
use elfvc::rateflex::RateMode;
use elfvc::codec::weights::{load_model, save_model};
use elfvc::tools::image::{quantize_8bit, write_frames};
use elfvc::tools::synth::{Motion, SyntheticClipSpec, Texture};
use std::path::Path;

const LEVEL: f64 = 1.75;
const GOP: usize = 3;

fn main() -> elfvc::Result<()> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data/golden");
    std::fs::create_dir_all(&dir)?;

    let cfg = ModelConfig { init_seed: 5, ..ModelConfig::tiny() };
    save_model(&Model::new(cfg)?, &dir.join("weights.elfw"))?;
    // stored weights are f32, so encode with what a reader will load
    let model = load_model(&dir.join("weights.elfw"))?;

    let clip = SyntheticClipSpec {
        width: 32,
        height: 32,
        frames: 5,
        motion: Motion::Translate { vx: 1.0, vy: -2.0 },
        texture: Texture::Gradient,
        seed: 19,
    }
    .render();
    let clip: Vec<_> = clip.iter().map(quantize_8bit).collect();
    write_frames(&dir.join("clip"), &clip)?;

    let enc = encode_video(&model, &clip, GOP, RateMode::ConstantLevel(LEVEL))?;
    std::fs::write(dir.join("stream.elfv"), enc.stream.to_bytes())?;
    std::fs::write(dir.join("params.txt"), format!("level = {LEVEL}\ngop = {GOP}\n"))?;
    let recon: Vec<_> = enc.recons.iter().map(quantize_8bit).collect();
    write_frames(&dir.join("recon"), &recon)?;
    println!("wrote {}", dir.display());
    Ok(())
}
