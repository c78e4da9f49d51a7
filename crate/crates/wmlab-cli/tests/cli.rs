//! End-to-end tests that drive the compiled `wmlab` binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use wmlab::io::save_image;
use wmlab::{Image, RngStream};

fn wmlab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_wmlab")).args(args).output().expect("binary runs")
}

fn run_ok(args: &[&str]) -> String {
    let out = wmlab(args);
    assert!(
        out.status.success(),
        "wmlab {:?} failed\nstdout: {}\nstderr: {}",
        args,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn write_config(dir: &Path) -> PathBuf {
    let out = dir.join("out");
    let text = format!(
        r#"seed = 11
output = "{}"

[dataset]
mode = "synthetic"
count = 6
width = 8
height = 8

[watermark]
k = 4
beta = 0.5

[diffusion]
t_max = 100

[[attack]]
kind = "gaussian_noise"
sigma = 0.02

[[attack]]
kind = "jpeg_sim"
quality = 85

[sweep]
strengths = [0.0, 0.5]
substeps = 8
"#,
        out.display()
    );
    let path = dir.join("lab.toml");
    std::fs::write(&path, text).unwrap();
    path
}

fn write_host(dir: &Path) -> PathBuf {
    let mut rng = RngStream::new(5, "cli-test/host");
    let data = (0..64).map(|_| 0.5 + 0.1 * rng.next_standard_normal()).collect();
    let img = Image::from_vec(8, 8, 1, data).unwrap();
    let path = dir.join("host.pgm");
    save_image(&path, &img).unwrap();
    path
}

#[test]
fn help_prints_usage() {
    let stdout = run_ok(&["--help"]);
    assert!(stdout.contains("wmlab"), "{stdout}");
}

#[test]
fn run_then_report_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let stdout = run_ok(&["run", "--config", cfg.to_str().unwrap()]);
    assert!(stdout.contains("no_attack"), "{stdout}");

    let out = dir.path().join("out");
    for name in ["trials.csv", "report.csv", "run_meta.txt"] {
        assert!(out.join(name).is_file(), "{name} missing");
    }
    let report = std::fs::read_to_string(out.join("report.csv")).unwrap();
    let control = report.lines().nth(1).expect("control row");
    assert!(control.starts_with("informed,no_attack,6,1,1,"), "control row: {control}");

    // Rebuilding the report from trials.csv reproduces it byte for byte.
    std::fs::remove_file(out.join("report.csv")).unwrap();
    run_ok(&["report", "--config", cfg.to_str().unwrap()]);
    let rebuilt = std::fs::read_to_string(out.join("report.csv")).unwrap();
    assert_eq!(rebuilt, report);
}

#[test]
fn sweep_writes_strength_rows() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    run_ok(&["sweep", "--config", cfg.to_str().unwrap()]);
    let text = std::fs::read_to_string(dir.path().join("out").join("sweep.csv")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 3, "header plus one row per strength: {text}");
    assert!(lines[1].starts_with("unguided,0,6,1,"), "strength 0 row: {}", lines[1]);
}

#[test]
fn embed_then_decode_recovers_the_message() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let host = write_host(dir.path());
    let key = dir.path().join("lab.wmk");
    let marked = dir.path().join("marked.wmf");

    let stdout = run_ok(&[
        "embed",
        "--config",
        cfg.to_str().unwrap(),
        "--key",
        key.to_str().unwrap(),
        "--image",
        host.to_str().unwrap(),
        "--message",
        "1011",
        "--save",
        marked.to_str().unwrap(),
    ]);
    assert!(stdout.contains("created key"), "{stdout}");
    assert!(stdout.contains("message 1011"), "{stdout}");

    let stdout = run_ok(&[
        "decode",
        "--key",
        key.to_str().unwrap(),
        "--image",
        marked.to_str().unwrap(),
        "--message",
        "1011",
    ]);
    assert!(stdout.contains("bits 1011"), "{stdout}");
    assert!(stdout.contains("bit_accuracy 1"), "{stdout}");
    assert!(stdout.contains("exact_match true"), "{stdout}");
}

#[test]
fn attack_subcommand_writes_the_attacked_image() {
    let dir = tempfile::tempdir().unwrap();
    let host = write_host(dir.path());
    let save = dir.path().join("blurred.wmf");
    let stdout = run_ok(&[
        "attack",
        "--image",
        host.to_str().unwrap(),
        "--save",
        save.to_str().unwrap(),
        "--spec",
        "kind = \"blur\"\nsigma = 1.0",
    ]);
    assert!(stdout.contains("attack kind=blur"), "{stdout}");
    assert!(save.is_file());
}

#[test]
fn theory_writes_the_grid_csv() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("tout");
    run_ok(&[
        "theory",
        "--beta",
        "1.0",
        "--sigma",
        "0.5,1.0",
        "--k",
        "1",
        "--trials",
        "4000",
        "--seed",
        "3",
        "--out",
        out.to_str().unwrap(),
    ]);
    let text = std::fs::read_to_string(out.join("theory.csv")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 3, "header plus two sigma rows: {text}");
    assert!(lines[0].starts_with("beta,sigma,k,"), "{}", lines[0]);
}

#[test]
fn fit_prior_saves_a_loadable_mixture() {
    let dir = tempfile::tempdir().unwrap();
    let images = dir.path().join("imgs");
    std::fs::create_dir(&images).unwrap();
    let mut rng = RngStream::new(9, "cli-test/fit");
    for i in 0..6 {
        let data = (0..16).map(|_| 0.5 + 0.05 * rng.next_standard_normal()).collect();
        let img = Image::from_vec(4, 4, 1, data).unwrap();
        save_image(&images.join(format!("im{i}.pgm")), &img).unwrap();
    }
    let prior = dir.path().join("prior.wmp");
    let stdout = run_ok(&[
        "fit-prior",
        "--images",
        images.to_str().unwrap(),
        "--components",
        "1",
        "--save",
        prior.to_str().unwrap(),
    ]);
    assert!(stdout.contains("fit 1 components over 6 images"), "{stdout}");
    assert!(wmlab::prior::load_prior(&prior).is_ok());
}

#[test]
fn missing_config_is_a_clean_error() {
    let out = wmlab(&["run", "--config", "/nonexistent/lab.toml"]);
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.starts_with("error:"), "stderr: {stderr}");
}
