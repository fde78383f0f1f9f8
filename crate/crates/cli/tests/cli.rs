use elfvc::codec::config::ModelConfig;
use elfvc::codec::model::Model;
use elfvc::codec::weights::save_model;
use std::path::Path;
use std::process::{Command, Output};

fn elfvc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_elfvc"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("run elfvc")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn setup(dir: &Path) -> (std::path::PathBuf, std::path::PathBuf) {
    let weights = dir.join("tiny.elfw");
    save_model(&Model::new(ModelConfig::tiny()).unwrap(), &weights).unwrap();
    let spec = dir.join("clip.spec");
    std::fs::write(
        &spec,
        "width = 32\nheight = 32\nframes = 5\ncount = 1\nmotion = translate\nvx = 1\nvy = -1\nseed = 3\n",
    )
    .unwrap();
    let data = dir.join("data");
    let out = elfvc(&["synth", "--spec", p(&spec), "--out", p(&data)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    (weights, data.join("clip_000"))
}

fn read_dir_sorted(dir: &Path) -> Vec<Vec<u8>> {
    let mut names: Vec<_> = std::fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
    names.sort();
    names.iter().map(|n| std::fs::read(n).unwrap()).collect()
}

#[test]
fn encode_decode_roundtrip_matches_encoder_recon() {
    let tmp = tempfile::tempdir().unwrap();
    let (weights, clip) = setup(tmp.path());
    let stream = tmp.path().join("clip.elfv");
    let recon = tmp.path().join("recon");
    let out = elfvc(&[
        "encode", "--input", p(&clip), "--weights", p(&weights), "--level", "1.5", "--gop", "4", "--out", p(&stream),
        "--recon", p(&recon),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report = String::from_utf8(out.stdout).unwrap();
    assert_eq!(report.lines().count(), 6, "{report}");

    let decoded = tmp.path().join("decoded");
    let out = elfvc(&["decode", "--in", p(&stream), "--weights", p(&weights), "--out", p(&decoded)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let (a, b) = (read_dir_sorted(&recon), read_dir_sorted(&decoded));
    assert_eq!(a.len(), 5);
    assert_eq!(a, b);
}

#[test]
fn bdrate_against_itself_is_zero() {
    let tmp = tempfile::tempdir().unwrap();
    let csv = tmp.path().join("rd.csv");
    std::fs::write(
        &csv,
        "tag,level,bpp,psnr_db\na,0,0.05,28\na,1,0.1,31\na,2,0.2,33.5\na,3,0.4,35.5\n",
    )
    .unwrap();
    let out = elfvc(&["bdrate", "--ref", p(&csv), "--test", p(&csv)]);
    assert!(out.status.success());
    assert_eq!(String::from_utf8(out.stdout).unwrap().trim(), "0.0%");
}

#[test]
fn eval_and_bitmap_write_their_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let (weights, clip) = setup(tmp.path());
    let csv = tmp.path().join("rd.csv");
    let out = elfvc(&[
        "eval", "--weights", p(&weights), "--data", p(&clip), "--levels", "0,1.5,3", "--gop", "4", "--out", p(&csv),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(&csv).unwrap();
    assert!(text.starts_with("tag,level,bpp,psnr_db\n"));
    assert_eq!(text.lines().count(), 4);

    let stream = tmp.path().join("s.elfv");
    let out = elfvc(&["encode", "--input", p(&clip), "--weights", p(&weights), "--level", "2", "--out", p(&stream)]);
    assert!(out.status.success());
    let pgm = tmp.path().join("bits.pgm");
    let out = elfvc(&["bitmap", "--in", p(&stream), "--weights", p(&weights), "--frame", "2", "--out", p(&pgm)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let img = std::fs::read(&pgm).unwrap();
    assert!(img.starts_with(b"P5"));
    let side = std::fs::read_to_string(pgm.with_extension("txt")).unwrap();
    assert!(side.contains("max_bits_per_pixel") && side.contains("total_bits"));
}

#[test]
fn failures_map_to_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let (weights, _) = setup(tmp.path());
    let missing = elfvc(&["decode", "--in", p(&tmp.path().join("nope")), "--weights", p(&weights), "--out", "x"]);
    assert_eq!(missing.status.code(), Some(2));

    let junk = tmp.path().join("junk.elfv");
    std::fs::write(&junk, b"not a stream at all").unwrap();
    let out = elfvc(&["decode", "--in", p(&junk), "--weights", p(&weights), "--out", p(&tmp.path().join("o"))]);
    assert!(matches!(out.status.code(), Some(3) | Some(4)), "{:?}", out.status);
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("elfvc: "));

    let bad_weights = tmp.path().join("bad.elfw");
    std::fs::write(&bad_weights, b"ELFW\x09").unwrap();
    let out = elfvc(&["decode", "--in", p(&junk), "--weights", p(&bad_weights), "--out", "x"]);
    assert_eq!(out.status.code(), Some(3));
}
