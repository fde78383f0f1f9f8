//! Deterministic synthetic clips with analytic motion.
//!
//! A clip samples a continuous texture through a per-frame coordinate map.
//! Translate clips read frame `t` at `(x + vx*t, y + vy*t)`, so the flow that
//! warps frame `t-1` onto frame `t` is the constant `(vx, vy)`.

use super::image::{quantize_8bit, write_frames};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Motion {
    Translate { vx: f64, vy: f64 },
    /// Radians per frame about the frame centre.
    Rotate { omega: f64 },
    /// Relative scale change per frame about the frame centre.
    Zoom { rate: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Texture {
    Gradient,
    Noise,
    /// One seeded colour, no structure.
    Flat,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticClipSpec {
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    pub motion: Motion,
    pub texture: Texture,
    pub seed: u64,
}

/// One sinusoid per channel component: `amp * sin(kx*x + ky*y + phase)`.
struct Wave {
    kx: f64,
    ky: f64,
    phase: f64,
    amp: [f64; 3],
}

struct TextureField {
    base: [f64; 3],
    slope: [[f64; 2]; 3],
    waves: Vec<Wave>,
}

impl TextureField {
    fn new(texture: Texture, seed: u64, size: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let base = [0.0; 3].map(|_: f64| rng.random_range(0.3..0.7));
        let (n, kmax, amp, slope) = match texture {
            Texture::Gradient => (3, 2.0 * PI * 1.5 / size, 0.12, 0.25 / size),
            Texture::Noise => (12, 2.0 * PI / 10.0, 0.06, 0.05 / size),
            Texture::Flat => (0, 0.0, 0.0, 0.0),
        };
        let slope = if slope > 0.0 {
            [[0.0; 2]; 3].map(|_| [rng.random_range(-slope..slope), rng.random_range(-slope..slope)])
        } else {
            [[0.0; 2]; 3]
        };
        let waves = (0..n)
            .map(|_| {
                let k = rng.random_range(0.2 * kmax..kmax);
                let a = rng.random_range(0.0..2.0 * PI);
                Wave {
                    kx: k * a.cos(),
                    ky: k * a.sin(),
                    phase: rng.random_range(0.0..2.0 * PI),
                    amp: [0.0; 3].map(|_: f64| rng.random_range(0.3 * amp..amp)),
                }
            })
            .collect();
        Self { base, slope, waves }
    }

    fn eval(&self, c: usize, x: f64, y: f64) -> f64 {
        let mut v = self.base[c] + self.slope[c][0] * x + self.slope[c][1] * y;
        for w in &self.waves {
            v += w.amp[c] * libm::sin(w.kx * x + w.ky * y + w.phase);
        }
        v.clamp(0.0, 1.0)
    }
}

impl SyntheticClipSpec {
    /// Source coordinate of pixel `(x, y)` in frame `t`.
    fn source(&self, t: usize, x: f64, y: f64) -> (f64, f64) {
        let (cx, cy) = ((self.width as f64 - 1.0) / 2.0, (self.height as f64 - 1.0) / 2.0);
        let tf = t as f64;
        match self.motion {
            Motion::Translate { vx, vy } => (x + vx * tf, y + vy * tf),
            Motion::Rotate { omega } => {
                let (s, c) = libm::sincos(omega * tf);
                let (dx, dy) = (x - cx, y - cy);
                (cx + c * dx - s * dy, cy + s * dx + c * dy)
            }
            Motion::Zoom { rate } => {
                let k = libm::pow(1.0 + rate, -tf);
                (cx + (x - cx) * k, cy + (y - cy) * k)
            }
        }
    }

    /// Frames in `[0, 1]`, already rounded through 8-bit storage.
    pub fn render(&self) -> Vec<Tensor> {
        let field = TextureField::new(self.texture, self.seed, self.width.max(self.height) as f64);
        (0..self.frames)
            .map(|t| {
                let f = Tensor::from_fn3(3, self.height, self.width, |c, y, x| {
                    let (sx, sy) = self.source(t, x as f64, y as f64);
                    field.eval(c, sx, sy)
                });
                quantize_8bit(&f)
            })
            .collect()
    }

    /// Ground-truth `(dx, dy)` for frames `1..frames`, translate clips only.
    pub fn flow(&self) -> Option<Vec<(f64, f64)>> {
        match self.motion {
            Motion::Translate { vx, vy } => Some(vec![(vx, vy); self.frames.saturating_sub(1)]),
            _ => None,
        }
    }
}

/// Dataset description: `count` clips sharing size and length.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSpec {
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    pub count: usize,
    /// `translate`, `rotate`, `zoom` or `mixed` (cycles through all three).
    pub motion: String,
    /// `gradient`, `noise`, `flat` or `mixed` (alternates gradient and noise).
    pub texture: String,
    pub vx: f64,
    pub vy: f64,
    /// When positive, translate velocities are drawn per clip as integers in
    /// `[-max_velocity, max_velocity]` instead of `(vx, vy)`.
    pub max_velocity: f64,
    pub omega: f64,
    pub zoom: f64,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            width: 64,
            height: 64,
            frames: 16,
            count: 10,
            motion: "translate".into(),
            texture: "mixed".into(),
            vx: 2.0,
            vy: 0.0,
            max_velocity: 0.0,
            omega: 0.02,
            zoom: 0.02,
            seed: 1,
        }
    }
}

impl DatasetSpec {
    pub fn parse(text: &str) -> Result<Self> {
        let mut s = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            let bad = || Error::Config(format!("line {}: bad value for {k}: {v:?}", n + 1));
            let int = || v.parse::<usize>().map_err(|_| bad());
            let num = || v.parse::<f64>().ok().filter(|x| x.is_finite()).ok_or_else(bad);
            match k {
                "width" => s.width = int()?,
                "height" => s.height = int()?,
                "frames" => s.frames = int()?,
                "count" => s.count = int()?,
                "motion" => s.motion = v.to_string(),
                "texture" => s.texture = v.to_string(),
                "vx" => s.vx = num()?,
                "vy" => s.vy = num()?,
                "max_velocity" => s.max_velocity = num()?,
                "omega" => s.omega = num()?,
                "zoom" => s.zoom = num()?,
                "seed" => s.seed = v.parse().map_err(|_| bad())?,
                _ => return Err(Error::Config(format!("line {}: unknown key {k:?}", n + 1))),
            }
        }
        s.clip_specs()?;
        Ok(s)
    }

    /// Per-clip specs, derived deterministically from the dataset seed.
    pub fn clip_specs(&self) -> Result<Vec<SyntheticClipSpec>> {
        if self.width == 0 || self.height == 0 || self.frames == 0 {
            return Err(Error::Config("width, height and frames must be positive".into()));
        }
        let motions: &[&str] = match self.motion.as_str() {
            "mixed" => &["translate", "rotate", "zoom"],
            "translate" => &["translate"],
            "rotate" => &["rotate"],
            "zoom" => &["zoom"],
            m => return Err(Error::Config(format!("unknown motion {m:?}"))),
        };
        let textures: &[Texture] = match self.texture.as_str() {
            "mixed" => &[Texture::Gradient, Texture::Noise],
            "gradient" => &[Texture::Gradient],
            "noise" => &[Texture::Noise],
            "flat" => &[Texture::Flat],
            t => return Err(Error::Config(format!("unknown texture {t:?}"))),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        Ok((0..self.count)
            .map(|i| {
                let clip_seed: u64 = rng.random();
                let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                let (vx, vy) = if self.max_velocity > 0.0 {
                    let m = self.max_velocity.floor() as i64;
                    (rng.random_range(-m..=m) as f64, rng.random_range(-m..=m) as f64)
                } else {
                    (self.vx, self.vy)
                };
                let motion = match motions[i % motions.len()] {
                    "translate" => Motion::Translate { vx, vy },
                    "rotate" => Motion::Rotate {
                        omega: sign * self.omega,
                    },
                    _ => Motion::Zoom { rate: sign * self.zoom },
                };
                SyntheticClipSpec {
                    width: self.width,
                    height: self.height,
                    frames: self.frames,
                    motion,
                    texture: textures[(i / motions.len()) % textures.len()],
                    seed: clip_seed,
                }
            })
            .collect())
    }
}

/// Flow sidecar: `frame,dx,dy` rows for frames `1..`.
pub fn flow_csv(flow: &[(f64, f64)]) -> String {
    let mut s = String::from("frame,dx,dy\n");
    for (t, (dx, dy)) in flow.iter().enumerate() {
        writeln!(s, "{},{},{}", t + 1, dx, dy).unwrap();
    }
    s
}

/// Writes `clip_NNN/frame_MMM.ppm` and, for translate clips, `clip_NNN/flow.csv`.
pub fn synth_dataset(spec: &DatasetSpec, out: &Path) -> Result<Vec<SyntheticClipSpec>> {
    let clips = spec.clip_specs()?;
    for (i, c) in clips.iter().enumerate() {
        let dir = out.join(format!("clip_{i:03}"));
        write_frames(&dir, &c.render())?;
        if let Some(f) = c.flow() {
            std::fs::write(dir.join("flow.csv"), flow_csv(&f))?;
        }
    }
    Ok(clips)
}

/// Loads every `clip_*` directory (or the directory itself if it holds frames).
pub fn load_dataset(dir: &Path) -> Result<Vec<Vec<Tensor>>> {
    let mut subdirs: Vec<_> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    subdirs.sort();
    if subdirs.is_empty() {
        return Ok(vec![super::image::read_frames(dir)?]);
    }
    subdirs.iter().map(|d| super::image::read_frames(d)).collect()
}
