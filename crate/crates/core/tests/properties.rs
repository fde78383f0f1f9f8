use elfvc::codec::frame::EncodedFrame;
use elfvc::codelayer::entropy::{decode_payload, encode_payload, ElementModel};
use elfvc::codelayer::quantize_value;
use elfvc::motion::{scale_space_warp, FlowField};
use elfvc::rateflex::{embed_level, level_from_fixed, level_to_fixed, level_walk, quantize_level, ModulatorState};
use elfvc::tools::rd::{bd_rate, consolidate_rd, RDPoint};
use elfvc::tools::synth::{Motion, SyntheticClipSpec, Texture};
use proptest::prelude::*;

proptest! {
    #[test]
    fn quantization_is_idempotent_and_close(x in -1e3f64..1e3, w in 0.01f64..8.0) {
        let q = quantize_value(x, w);
        prop_assert_eq!(quantize_value(q, w), q);
        prop_assert!((x - q).abs() <= w / 2.0 + 1e-9 * x.abs().max(1.0));
        let k = q / w;
        prop_assert!((k - k.round()).abs() < 1e-9);
    }

    #[test]
    fn payload_roundtrips(
        elems in prop::collection::vec((-4.0f64..4.0, 0.05f64..6.0, 0.1f64..3.0, -5.0f64..5.0), 1..90),
        channels in 1usize..20,
        escapes in prop::collection::vec((0usize..1000, any::<i32>()), 0..4),
    ) {
        let plane = elems.len().div_ceil(channels);
        let n = channels * plane;
        let models: Vec<ElementModel> = (0..n)
            .map(|i| {
                let (mu, sigma, width, _) = elems[i % elems.len()];
                ElementModel { mu, sigma, width }
            })
            .collect();
        let mut symbols: Vec<i64> = (0..n)
            .map(|i| {
                let (mu, sigma, width, z) = elems[i % elems.len()];
                ((mu + sigma * z) / width).round() as i64
            })
            .collect();
        for (pos, v) in escapes {
            symbols[pos % n] = v as i64;
        }
        let bytes = encode_payload(&symbols, &models, channels, plane).unwrap();
        let back = decode_payload(&bytes, &models, channels, plane).unwrap();
        prop_assert_eq!(back, symbols);
    }

    #[test]
    fn level_embedding_is_a_two_hot_blend(levels in 2usize..12, dims in 2usize..12, t in 0.0f64..1.0) {
        let l = t * (levels - 1) as f64;
        let e = embed_level(l, levels, dims).unwrap();
        prop_assert_eq!(e.vector.len(), dims);
        prop_assert!(e.vector.iter().all(|&v| (0.0..=1.0).contains(&v)));
        prop_assert!((e.vector.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(e.vector.iter().filter(|&&v| v > 0.0).count() <= 2);
        // the weighted slot index recovers the scaled level
        let centre: f64 = e.vector.iter().enumerate().map(|(i, v)| i as f64 * v).sum();
        prop_assert!((centre - l * (dims - 1) as f64 / (levels - 1) as f64).abs() < 1e-9);
    }

    #[test]
    fn integer_levels_are_one_hot_when_slots_match(levels in 2usize..16, pick in 0usize..16) {
        let l = pick % levels;
        let e = embed_level(l as f64, levels, levels).unwrap();
        for (i, v) in e.vector.iter().enumerate() {
            prop_assert_eq!(*v, if i == l { 1.0 } else { 0.0 });
        }
    }

    #[test]
    fn fixed_point_levels_roundtrip(raw in 0u16..=(3 * 256)) {
        let l = level_from_fixed(raw);
        prop_assert_eq!(level_to_fixed(l), raw);
        prop_assert_eq!(quantize_level(l), l);
    }

    #[test]
    fn level_walk_stays_in_range(levels in 2usize..10, start in 0usize..10, steps in prop::collection::vec(-3.0f64..3.0, 0..40)) {
        let w = level_walk(levels, start, &steps);
        prop_assert_eq!(w.len(), steps.len() + 1);
        prop_assert!(w.iter().all(|&l| l < levels));
    }

    #[test]
    fn modulator_weights_stay_clipped(updates in prop::collection::vec((0usize..4, 0usize..4, 1e-6f64..0.5), 1..600)) {
        let mut m = ModulatorState::new(4, 4);
        m.warmup = 0;
        for (t, l, mse) in updates {
            m.observe_mse(t, l, mse);
            for row in &m.mu {
                prop_assert!(row.iter().all(|&v| (1.0..=10.0).contains(&v)));
            }
        }
        prop_assert!(m.mu[0].iter().all(|&v| v == 1.0));
    }

    #[test]
    fn hull_is_a_concave_increasing_subset(pts in prop::collection::vec((0.01f64..4.0, 20.0f64..45.0), 1..25)) {
        let input: Vec<RDPoint> = pts.iter().enumerate().map(|(i, &(b, q))| RDPoint::new("p", i as f64, b, q)).collect();
        let hull = consolidate_rd(&input);
        prop_assert!(!hull.is_empty());
        for p in &hull {
            prop_assert!(input.contains(p));
        }
        for w in hull.windows(2) {
            prop_assert!(w[0].bpp < w[1].bpp);
            prop_assert!(w[0].psnr < w[1].psnr);
        }
        for w in hull.windows(3) {
            let (x0, x1, x2) = (w[0].bpp.ln(), w[1].bpp.ln(), w[2].bpp.ln());
            let chord = w[0].psnr + (w[2].psnr - w[0].psnr) * (x1 - x0) / (x2 - x0);
            prop_assert!(w[1].psnr > chord - 1e-9);
        }
        // nothing in the input rises above the hull's piecewise-linear envelope
        for p in &input {
            let x = p.bpp.ln();
            for w in hull.windows(2) {
                let (x0, x1) = (w[0].bpp.ln(), w[1].bpp.ln());
                if x0 <= x && x <= x1 {
                    let env = w[0].psnr + (w[1].psnr - w[0].psnr) * (x - x0) / (x1 - x0);
                    prop_assert!(p.psnr <= env + 1e-9);
                }
            }
        }
    }

    #[test]
    fn bd_rate_of_a_scaled_curve_depends_only_on_the_scale(
        base in prop::collection::vec(0.05f64..0.5, 4..7),
        gains in prop::collection::vec(0.5f64..3.0, 4..7),
        r in 0.2f64..5.0,
    ) {
        let n = base.len().min(gains.len());
        let mut bpp = 0.02;
        let mut q = 25.0;
        let mut reference = Vec::new();
        for i in 0..n {
            bpp += base[i];
            q += gains[i];
            reference.push(RDPoint::new("ref", i as f64, bpp, q));
        }
        let test: Vec<RDPoint> = reference.iter().map(|p| RDPoint::new("test", p.level, p.bpp * r, p.psnr)).collect();
        let v = bd_rate(&reference, &test).unwrap();
        prop_assert!((v - (r - 1.0) * 100.0).abs() < 1e-6 * (1.0 + (r - 1.0).abs() * 100.0));
    }

    #[test]
    fn translate_clips_obey_their_sidecar_flow(vx in -3i32..=3, vy in -3i32..=3, seed in 0u64..1000, noise in any::<bool>()) {
        let spec = SyntheticClipSpec {
            width: 24,
            height: 20,
            frames: 3,
            motion: Motion::Translate { vx: vx as f64, vy: vy as f64 },
            texture: if noise { Texture::Noise } else { Texture::Gradient },
            seed,
        };
        let frames = spec.render();
        let flow = spec.flow().unwrap();
        prop_assert_eq!(flow.len(), 2);
        for t in 1..3 {
            let (dx, dy) = flow[t - 1];
            let field = FlowField::translation(20, 24, dx, dy);
            let warped = scale_space_warp(&frames[t - 1], &field).unwrap();
            let m = 3;
            for c in 0..3 {
                for y in m..20 - m {
                    for x in m..24 - m {
                        prop_assert_eq!(warped.at3(c, y, x), frames[t].at3(c, y, x));
                    }
                }
            }
        }
    }

    #[test]
    fn frame_parser_never_panics(bytes in prop::collection::vec(any::<u8>(), 0..200)) {
        let _ = EncodedFrame::parse(&bytes);
    }
}
