mod common;

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn advdiff(args: &[&str], out: Option<&Path>) -> Output {
    let mut c = Command::new(env!("CARGO_BIN_EXE_advdiff"));
    c.args(args).env_remove("ADVDIFF_OUT");
    if let Some(o) = out {
        c.arg("--out").arg(o);
    }
    c.output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn manifest_file(dir: &Path) -> String {
    let p = dir.join("m.cfg");
    fs::write(&p, common::SMALL).unwrap();
    p.to_string_lossy().into_owned()
}

#[test]
fn every_verb_has_help() {
    for verb in [
        "synth", "train", "invert", "attack", "eval", "ablate", "report", "keys",
    ] {
        let o = advdiff(&[verb, "--help"], None);
        assert!(o.status.success(), "{verb}");
        assert!(stdout(&o).contains("--manifest"), "{verb}");
    }
    let o = advdiff(&["attack", "--help"], None);
    for flag in [
        "--seed",
        "--out",
        "--t-s",
        "--n-a",
        "--eta",
        "--kappa",
        "--lambda",
        "--norm",
        "--objective",
        "--steps",
        "--structure-layers",
        "--set",
    ] {
        assert!(stdout(&o).contains(flag), "{flag}");
    }
}

#[test]
fn bad_flag_prints_usage() {
    let o = advdiff(&["attack", "--no-such-flag"], None);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("Usage"), "{}", stderr(&o));
}

#[test]
fn missing_manifest_names_the_path() {
    let d = tempfile::tempdir().unwrap();
    let o = advdiff(&["attack", "--manifest", "/no/such/m.cfg"], Some(d.path()));
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.starts_with("error kind=missing_file "), "{err}");
    assert!(err.contains("/no/such/m.cfg"));
}

#[test]
fn unknown_override_lists_valid_keys() {
    let d = tempfile::tempdir().unwrap();
    let o = advdiff(&["synth", "--set", "kapa=0.1"], Some(d.path()));
    assert!(!o.status.success());
    let err = stderr(&o);
    assert!(err.starts_with("error kind=manifest "));
    assert!(
        err.contains("kapa") && err.contains("kappa") && err.contains("structure_layers"),
        "{err}"
    );
    assert!(!d.path().join(".lock").exists());
}

#[test]
fn invert_then_attack_reuses_trajectories_and_applies_overrides() {
    let d = tempfile::tempdir().unwrap();
    let m = manifest_file(d.path());
    let run = d.path().join("run");
    let o = advdiff(&["invert", "--manifest", &m], Some(&run));
    assert!(o.status.success(), "{}", stderr(&o));
    let traj = run.join("trajectories/src_000.traj");
    let before = fs::metadata(&traj).unwrap().modified().unwrap();
    std::thread::sleep(std::time::Duration::from_millis(20));

    let o = advdiff(
        &["attack", "--manifest", &m, "--set", "t_s=3", "--eta", "2.5"],
        Some(&run),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(fs::metadata(&traj).unwrap().modified().unwrap(), before);
    let cfg = fs::read_to_string(run.join("manifest.cfg")).unwrap();
    assert!(
        cfg.contains("t_s = 3\n") && cfg.contains("eta = 2.5\n"),
        "{cfg}"
    );
    let trace = fs::read_to_string(run.join("attack/trace_000.csv")).unwrap();
    // t_s · N_a rows plus the header.
    assert_eq!(trace.lines().count(), 1 + 3 * 3);
}

#[test]
fn report_matches_csv_and_handles_empty_dirs() {
    let d = tempfile::tempdir().unwrap();
    let o = advdiff(&["report"], Some(d.path()));
    assert!(o.status.success());
    assert!(stdout(&o).contains("no stages found"));

    let m = manifest_file(d.path());
    let run = d.path().join("run");
    let o = advdiff(&["eval", "--manifest", &m], Some(&run));
    assert!(o.status.success(), "{}", stderr(&o));
    let o = advdiff(&["report"], Some(&run));
    let printed = stdout(&o);
    let csv = fs::read_to_string(run.join("eval/summary.csv")).unwrap();
    for line in csv.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let row = printed
            .lines()
            .find(|l| {
                let w: Vec<&str> = l.split_whitespace().collect();
                w.len() == 4 && w[0] == f[0] && w[1] == f[1]
            })
            .unwrap_or_else(|| panic!("{line} not printed"));
        assert!(row.ends_with(f[3]), "{row} vs {line}");
    }
    for metric in [
        "asr_adv",
        "rank1_adv",
        "rank5_adv",
        "psnr_mean",
        "ssim_mean",
    ] {
        assert!(printed.contains(metric), "{metric}");
    }
    assert!(printed.contains("eval/verification.csv"));
}

#[test]
fn output_root_comes_from_the_environment() {
    let d = tempfile::tempdir().unwrap();
    let m = manifest_file(d.path());
    let o = Command::new(env!("CARGO_BIN_EXE_advdiff"))
        .args(["synth", "--manifest", &m])
        .env("ADVDIFF_OUT", d.path().join("envrun"))
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(d.path().join("envrun/data/dataset.bin").exists());
}

#[test]
fn ablate_rejects_unknown_axis() {
    let d = tempfile::tempdir().unwrap();
    let m = manifest_file(d.path());
    let o = advdiff(
        &["ablate", "--manifest", &m, "--axis", "dropout"],
        Some(&d.path().join("run")),
    );
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("dropout"));
}
