use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use vqdiff_core::codec::{write_pnm, Image};
use vqdiff_core::TokenGrid;

fn vqdiff(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vqdiff"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_dataset(dir: &Path) {
    fs::create_dir_all(dir).unwrap();
    for (i, t) in [[0, 1, 2, 3], [3, 3, 0, 0]].iter().enumerate() {
        TokenGrid::new(2, 2, 4, t.to_vec()).unwrap().write(dir.join(format!("g{i}.tok"))).unwrap();
    }
    fs::write(dir.join("conditions.txt"), "g0.tok 0\ng1.tok 1\n").unwrap();
}

fn manifest_value(dir: &Path, key: &str) -> String {
    let text = fs::read_to_string(dir.join("manifest.txt")).unwrap();
    text.lines()
        .find_map(|l| l.strip_prefix(&format!("{key} = ")).map(str::to_string))
        .unwrap_or_else(|| panic!("{key} missing from manifest:\n{text}"))
}

#[test]
fn missing_image_directory_fails() {
    let tmp = tempfile::tempdir().unwrap();
    let out = vqdiff(&["fit-codec", "--images", "/nonexistent/dir", "--k", "4", "--out", path(tmp.path())]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("/nonexistent/dir"));
}

#[test]
fn codec_round_trip_through_cli() {
    let tmp = tempfile::tempdir().unwrap();
    let images = tmp.path().join("images");
    fs::create_dir_all(&images).unwrap();
    for i in 0..3 {
        let data = (0..16).map(|p| ((p + i) % 4) as f64 / 3.0).collect();
        write_pnm(&Image::new(4, 4, 1, data).unwrap(), images.join(format!("img{i}.pgm"))).unwrap();
    }
    let codec = tmp.path().join("codec");
    let out = vqdiff(&["fit-codec", "--images", path(&images), "--k", "4", "--seed", "1", "--out", path(&codec)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let cb = codec.join("codebook.txt");
    let tokens = tmp.path().join("tokens");
    assert!(vqdiff(&["encode", "--codebook", path(&cb), "--images", path(&images), "--out", path(&tokens)]).status.success());
    assert!(tokens.join("img0.tok").exists());
    let decoded = tmp.path().join("decoded");
    assert!(vqdiff(&["decode", "--codebook", path(&cb), "--tokens", path(&tokens), "--out", path(&decoded)]).status.success());
    // four gray levels, four entries: reconstruction is exact up to 8-bit output
    let a = fs::read(images.join("img1.pgm")).unwrap();
    let b = fs::read(decoded.join("decoded_001.pgm")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn unknown_config_key_is_named() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    write_dataset(&data);
    let cfg = tmp.path().join("cfg.txt");
    fs::write(&cfg, "steps = 10\nlearning_rate = 0.1\n").unwrap();
    let out = vqdiff(&["train", "--config", path(&cfg), "--data", path(&data), "--out", path(&tmp.path().join("run"))]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rate"));
}

#[test]
fn train_then_sample_and_inpaint() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    write_dataset(&data);
    let cfg = tmp.path().join("cfg.txt");
    fs::write(&cfg, "steps = 12\niterations = 30\nwarmup = 5\nwidth = 8\nffn_hidden = 16\ncond_vocab = 2\nbatch_size = 4\n").unwrap();
    let run = tmp.path().join("run");
    let out = vqdiff(&["train", "--config", path(&cfg), "--data", path(&data), "--out", path(&run)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(run.join("loss.csv")).unwrap();
    assert!(csv.starts_with("iteration,t,vlb,aux,total,lr\n"));
    assert_eq!(csv.lines().count(), 1 + 30 * 4);

    let ckpt = run.join("state.ckpt");
    for (stride, passes) in [("1", "12"), ("4", "3")] {
        let dir = tmp.path().join(format!("sample{stride}"));
        let out = vqdiff(&["sample", "--ckpt", path(&ckpt), "--n", "3", "--stride", stride, "--cond", "1", "--out", path(&dir)]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        assert_eq!(manifest_value(&dir, "config.forward_passes_per_sample"), passes);
        assert_eq!(manifest_value(&dir, "config.trunc"), "0.86");
        let g = TokenGrid::read(dir.join("sample_002.tok")).unwrap();
        assert_eq!((g.height(), g.width()), (2, 2));
        assert!(fs::read_to_string(dir.join("trace.csv")).unwrap().starts_with("sample,t,entropy,masks\n"));
    }

    let stencil = tmp.path().join("stencil.pgm");
    write_pnm(&Image::new(2, 2, 1, vec![1.0, 1.0, 0.0, 0.0]).unwrap(), &stencil).unwrap();
    let dir = tmp.path().join("inpaint");
    let partial = data.join("g0.tok");
    let out = vqdiff(&["inpaint", "--ckpt", path(&ckpt), "--tokens", path(&partial), "--stencil", path(&stencil), "--cond", "0", "--out", path(&dir)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let g = TokenGrid::read(dir.join("inpaint_000.tok")).unwrap();
    assert_eq!(&g.tokens()[..2], &[0, 1]);

    let bad = tmp.path().join("bad.pgm");
    write_pnm(&Image::new(3, 2, 1, vec![1.0; 6]).unwrap(), &bad).unwrap();
    let out = vqdiff(&["inpaint", "--ckpt", path(&ckpt), "--tokens", path(&partial), "--stencil", path(&bad), "--out", path(&dir)]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("stencil"));
}

#[test]
fn oracle_sampling_reproduces_single_member() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    fs::create_dir_all(&data).unwrap();
    TokenGrid::new(1, 3, 5, vec![4, 0, 2]).unwrap().write(data.join("only.tok")).unwrap();
    let dir = tmp.path().join("out");
    let out = vqdiff(&["sample", "--oracle", path(&data), "--n", "5", "--stride", "4", "--out", path(&dir)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(manifest_value(&dir, "config.forward_passes_per_sample"), "25");
    for i in 0..5 {
        assert_eq!(TokenGrid::read(dir.join(format!("sample_{i:03}.tok"))).unwrap().tokens(), &[4, 0, 2]);
    }
}

#[test]
fn verify_passes_and_reports_corruption() {
    let tmp = tempfile::tempdir().unwrap();
    let out = vqdiff(&["verify", "--fuzz", "30", "--out", path(tmp.path())]);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(out.status.success(), "{stdout}");
    assert!(stdout.lines().all(|l| l.starts_with("PASS")));
    assert!(stdout.contains("max_error="));

    let out = vqdiff(&["verify", "--fuzz", "5", "--corrupt-schedule", "7", "--out", path(tmp.path())]);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(!out.status.success());
    assert!(stdout.contains("FAIL schedule invariants"), "{stdout}");
    assert!(stdout.contains("alpha + K beta + gamma = 1"), "{stdout}");
}

#[test]
fn sweep_rejects_unknown_axis() {
    let out = vqdiff(&["sweep", "--axis", "temperature"]);
    assert!(!out.status.success());
}

#[test]
fn sweep_stride_csv() {
    let tmp = tempfile::tempdir().unwrap();
    let out = vqdiff(&["sweep", "--axis", "stride", "--samples", "200", "--out", path(tmp.path())]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(tmp.path().join("sweep.csv")).unwrap();
    let passes: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').nth(1).unwrap()).collect();
    assert_eq!(passes, ["100", "50", "25", "10"]);
}

#[test]
fn default_output_root_from_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_vqdiff"))
        .args(["verify", "--fuzz", "2"])
        .env("VQDIFF_OUT", tmp.path())
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(tmp.path().join("verify/report.txt").exists());
    assert!(tmp.path().join("verify/manifest.txt").exists());
}
