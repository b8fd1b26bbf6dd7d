use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use g4g::audio::{write_wav, AudioClip, SAMPLE_RATE};

fn g4g(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_g4g")).args(args).output().expect("binary runs")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const SMALL: &str = "# tiny run\nimage_size = 32\nchannels = 8\nfeature-dim = 16\nbatch_size = 2\nsamples = 2\nsteps = 3\nexpert_steps = 5\n";

#[test]
fn unknown_flag_exits_2() {
    let out = g4g(&["train", "--bogus"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn contract_error_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let out = g4g(&["train", "--out", p(dir.path()), "--batch-size", "1"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error:"));

    let out = g4g(&["warp-demo", "--out", p(&dir.path().join("w.ppm")), "--padding", "mirror"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn gradcheck_passes() {
    let out = g4g(&["gradcheck", "--seeds", "2"]);
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("affine_warp/theta") && text.contains("max rel error"));
}

#[test]
fn melspec_text_and_binary() {
    let dir = tempfile::tempdir().unwrap();
    let wav = dir.path().join("a.wav");
    let tone = (0..3200).map(|i| 0.3 * (i as f64 * 0.2).sin()).collect();
    write_wav(&wav, &AudioClip::from_samples(tone, SAMPLE_RATE).unwrap()).unwrap();
    let txt = dir.path().join("a.txt");
    assert!(g4g(&["melspec", "--audio", p(&wav), "--out", p(&txt), "--text"]).status.success());
    let body = fs::read_to_string(&txt).unwrap();
    let rows: Vec<&str> = body.lines().filter(|l| !l.trim().is_empty()).collect();
    assert_eq!(rows.len(), 16);
    assert_eq!(rows[0].split_whitespace().count(), 80);

    let bin = dir.path().join("a.mel");
    assert!(g4g(&["melspec", "--audio", p(&wav), "--out", p(&bin)]).status.success());
    assert_eq!(g4g::audio::read_mel(&bin).unwrap().frames, 16);
}

#[test]
fn synth_data_writes_clip() {
    let dir = tempfile::tempdir().unwrap();
    let out = g4g(&["synth-data", "--out", p(dir.path()), "--frames", "12", "--image-size", "32"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(g4g::image::read_frame_dir(dir.path().join("frames")).unwrap().len(), 12);
    assert!(dir.path().join("audio.wav").exists());
    assert_eq!(fs::read_to_string(dir.path().join("openings.csv")).unwrap().lines().count(), 13);
}

#[test]
fn train_is_deterministic_and_evaluable() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("small.cfg");
    fs::write(&cfg, SMALL).unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for run in [&a, &b] {
        let out = g4g(&["train", "--config", p(&cfg), "--seed", "7", "--out", p(run)]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    assert_eq!(fs::read(a.join("model.ckpt")).unwrap(), fs::read(b.join("model.ckpt")).unwrap());
    let csv = fs::read_to_string(a.join("losses.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
    assert_eq!(csv, fs::read_to_string(b.join("losses.csv")).unwrap());
    assert!(fs::read_to_string(a.join("config.txt")).unwrap().contains("seed = 7"));

    let report = dir.path().join("metrics.csv");
    let svg = dir.path().join("metrics.svg");
    let out = g4g(&[
        "eval",
        "--generated",
        p(&a.join("generated")),
        "--reference",
        p(&a.join("truth")),
        "--out",
        p(&report),
        "--plot",
        p(&svg),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(fs::read_to_string(&report).unwrap().starts_with("frame,psnr,ssim,mse"));
    assert!(fs::read_to_string(&svg).unwrap().contains("<svg"));
    assert!(String::from_utf8_lossy(&out.stdout).contains("LSE-D n/a"));
}

#[test]
fn warp_demo_identity_keeps_image() {
    let dir = tempfile::tempdir().unwrap();
    let (id, moved) = (dir.path().join("id.ppm"), dir.path().join("moved.ppm"));
    assert!(g4g(&["warp-demo", "--out", p(&id)]).status.success());
    assert!(g4g(&["warp-demo", "--out", p(&moved), "--theta", "-0.3", "--scale", "1.2"]).status.success());
    let frame = g4g::pipeline::synth::render_frame(64, 0.5, &g4g::pipeline::synth::FaceStyle::from_seed(0));
    let back = g4g::image::Image::read_pnm(&id).unwrap();
    let err = back.data.iter().zip(&frame.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(err <= 1.0 / 255.0, "{err}");
    assert_ne!(fs::read(&id).unwrap(), fs::read(&moved).unwrap());
}
