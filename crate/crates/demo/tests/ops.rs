use elfvc_demo::{level_vector, level_width, symbol_bits, warp_rgba};

#[test]
fn widths_interpolate_geometrically() {
    let w = level_width(1.5, 4, 4, 2.0, 0.5).unwrap();
    let lo = level_width(1.0, 4, 4, 2.0, 0.5).unwrap();
    let hi = level_width(2.0, 4, 4, 2.0, 0.5).unwrap();
    assert!((w - (lo * hi).sqrt()).abs() < 1e-12);
    assert!((level_width(0.0, 4, 4, 2.0, 0.5).unwrap() - 2.0).abs() < 1e-12);
    assert!((level_width(3.0, 4, 4, 2.0, 0.5).unwrap() - 0.5).abs() < 1e-12);
}

#[test]
fn level_vectors_match_the_worked_cases() {
    assert_eq!(level_vector(2.0, 3, 3).unwrap(), vec![0.0, 0.0, 1.0]);
    let v = level_vector(0.5, 2, 3).unwrap();
    assert!(v.iter().zip([0.0, 1.0, 0.0]).all(|(a, b)| (a - b).abs() < 1e-12));
}

#[test]
fn zero_flow_is_identity_and_unit_shift_moves_one_pixel() {
    let base = warp_rgba(16, 0.0, 0.0, 0.0).unwrap();
    assert_eq!(base.len(), 16 * 16 * 4);
    assert!(base.chunks(4).all(|px| px[3] == 255));
    let moved = warp_rgba(16, 1.0, 0.0, 0.0).unwrap();
    for y in 0..16 {
        let row = y * 16 * 4;
        assert_eq!(&moved[row..row + 15 * 4], &base[row + 4..row + 16 * 4]);
    }
}

#[test]
fn symbol_table_matches_the_normal_cdf() {
    let t = symbol_bits(0.0, 1.0, 1.0, 2).unwrap();
    assert_eq!(t.len(), 15);
    // P(|z| < 0.5) for a standard normal
    assert!((t[7] - 0.382_924_922_548_026).abs() < 1e-9);
    assert!((t[8] + t[7].log2()).abs() < 1e-12);
    let total: f64 = symbol_bits(0.3, 1.0, 1.0, 10).unwrap().chunks(3).map(|r| r[1]).sum();
    assert!((total - 1.0).abs() < 1e-9);
}

#[test]
fn bad_inputs_are_rejected() {
    assert!(level_width(1.0, 4, 4, 0.0, 0.5).is_err());
    assert!(level_width(1.0, 4, 0, 2.0, 0.5).is_err());
    assert!(level_vector(f64::NAN, 4, 4).is_err());
    assert_eq!(level_vector(5.0, 4, 4).unwrap(), level_vector(3.0, 4, 4).unwrap());
    assert!(warp_rgba(0, 0.0, 0.0, 0.0).is_err());
    assert!(warp_rgba(1000, 0.0, 0.0, 0.0).is_err());
    assert!(symbol_bits(0.0, 0.0, 1.0, 2).is_err());
    assert!(symbol_bits(f64::NAN, 1.0, 1.0, 2).is_err());
    assert!(symbol_bits(0.0, 1.0, 1.0, 100).is_err());
}
