use std::path::Path;
use std::process::{Command, Output};

use iac::io::save_png;
use iac::synth;

fn iac(args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_iac")).args(args).output().expect("spawn iac");
    if !out.status.success() {
        panic!("iac {args:?} failed:\n{}", String::from_utf8_lossy(&out.stderr));
    }
    out
}

fn write_frames(dir: &Path, frames: &[iac::Tensor]) {
    std::fs::create_dir_all(dir).unwrap();
    for (i, f) in frames.iter().enumerate() {
        save_png(&dir.join(format!("{i:03}.png")), f).unwrap();
    }
}

fn metrics_line(out: &Output) -> String {
    let text = String::from_utf8_lossy(&out.stdout).into_owned();
    let line = text.lines().next().unwrap();
    line.split_once(": ").unwrap().1.to_string()
}

#[test]
fn train_finetune_encode_decode_eval() {
    let tmp = tempfile::tempdir().unwrap();
    let p = |s: &str| tmp.path().join(s).to_string_lossy().into_owned();
    write_frames(&tmp.path().join("data"), &synth::stills(1, 3, 64, 64));
    write_frames(&tmp.path().join("inst"), &synth::instance(2, 2, 40, 48));

    iac(&["train", "--data", &p("data"), "--steps", "3", "--out", &p("global")]);
    let model = p("global/model.ckpt");
    assert!(Path::new(&p("global/train_curve.csv")).exists());

    iac(&[
        "finetune", "--instance", &p("inst"), "--model", &model, "--beta", "1e-3", "--steps", "4",
        "--eval-interval", "2", "--out", &p("ft"),
    ]);
    let delta = p("ft/finetuned.iacf");
    let evals = std::fs::read_to_string(p("ft/evals.csv")).unwrap();
    assert_eq!(evals.lines().count(), 1 + 3);

    let enc = iac(&["encode", "--instance", &p("inst"), "--model", &model, "--delta", &delta, "--beta", "1e-3", "--out", &p("v.iac")]);
    assert!(!Path::new(&p("v.iac.tmp")).exists());
    iac(&["decode", &p("v.iac"), "--model", &model, "--out", &p("frames")]);
    assert_eq!(std::fs::read_dir(p("frames")).unwrap().count(), 2);
    let ev = iac(&["eval", &p("v.iac"), "--model", &model, "--ref", &p("inst")]);
    assert_eq!(metrics_line(&enc), metrics_line(&ev));

    let hist = iac(&["report-histograms", &delta, "--model", &model, "--prior", "sigma=0.05,t=0.005,alpha=1000", "--out", &p("hist")]);
    let csv = std::fs::read_to_string(p("hist/histograms.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 5 * 59);
    assert!(String::from_utf8_lossy(&hist.stdout).contains("total,"));
}

#[test]
fn failures_exit_nonzero_without_output() {
    let tmp = tempfile::tempdir().unwrap();
    let out_file = tmp.path().join("v.iac");
    let status = Command::new(env!("CARGO_BIN_EXE_iac"))
        .args(["encode", "--instance", "missing", "--model", "missing.ckpt", "--delta", "d", "--out"])
        .arg(&out_file)
        .output()
        .unwrap();
    assert!(!status.status.success());
    assert!(!String::from_utf8_lossy(&status.stderr).is_empty());
    assert!(!out_file.exists());

    let garbage = tmp.path().join("g.iac");
    std::fs::write(&garbage, b"not a stream").unwrap();
    let status = Command::new(env!("CARGO_BIN_EXE_iac"))
        .args(["decode"])
        .arg(&garbage)
        .args(["--model", "missing.ckpt", "--out"])
        .arg(tmp.path().join("o"))
        .output()
        .unwrap();
    assert!(!status.status.success());
}

#[test]
fn ablate_and_select_write_reports() {
    let tmp = tempfile::tempdir().unwrap();
    let p = |s: &str| tmp.path().join(s).to_string_lossy().into_owned();
    write_frames(&tmp.path().join("data"), &synth::stills(1, 2, 64, 64));
    iac(&["train", "--data", &p("data"), "--steps", "1", "--out", &p("g")]);
    let model = p("g/model.ckpt");
    write_frames(&tmp.path().join("inst"), &synth::instance(3, 2, 32, 32));
    iac(&["ablate", "--instance", &p("inst"), "--model", &model, "--steps", "2", "--cases", "I,V,VI", "--out", &p("abl")]);
    let csv = std::fs::read_to_string(p("abl/ablation.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);

    iac(&["temporal-ablate", "--instance", &p("inst"), "--model", &model, "--steps", "1", "--f", "1,2", "--out", &p("tmp")]);
    let csv = std::fs::read_to_string(p("tmp/temporal.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2 * 2);

    for i in 0..3 {
        write_frames(&tmp.path().join(format!("pool/v{i}")), &synth::instance(10 + i, 1, 32, 32));
    }
    iac(&["select", "--pool", &p("pool"), "--models", &model, "--betas", "1e-3", "--n", "1", "--out", &p("sel")]);
    let csv = std::fs::read_to_string(p("sel/selection.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2);
}
