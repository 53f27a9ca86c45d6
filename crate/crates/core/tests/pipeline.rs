mod common;

use std::fs;

use advdiff::diffusion::{edit_friendly_invert, reconstruct};
use advdiff::eval::psnr;
use advdiff::models::{DenoiserConfig, DenoiserNet};
use advdiff::pipeline::{
    self, attack_batch, decode_results, encode_results, plan, run_ablation, run_all,
    run_attack_stage, run_eval_stage, run_invert_stage, run_training_stage, summarize, RunDir,
};
use common::{mtimes, small, small_with, snapshot};

#[test]
fn training_is_reproducible_and_regenerates_missing_data() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let m = small();
    let ta = run_training_stage(&m, &RunDir::open(a.path()).unwrap()).unwrap();
    run_training_stage(&m, &RunDir::open(b.path()).unwrap()).unwrap();
    for f in [
        "denoiser.ckpt",
        "codec.bin",
        "embedder_0.ckpt",
        "embedder_3.ckpt",
        "training.csv",
    ] {
        let (x, y) = (
            a.path().join("models").join(f),
            b.path().join("models").join(f),
        );
        assert_eq!(fs::read(&x).unwrap(), fs::read(&y).unwrap(), "{f}");
    }
    let csv = fs::read_to_string(a.path().join("models/training.csv")).unwrap();
    for e in &ta.embedders {
        assert!(csv.contains(&format!("accuracy={:.4}", e.accuracy)));
    }

    fs::remove_file(a.path().join("data/dataset.bin")).unwrap();
    let t = run_training_stage(&m, &RunDir::open(a.path()).unwrap()).unwrap();
    assert!(a.path().join("data/dataset.bin").exists());
    assert_eq!(t.dataset, ta.dataset);
}

#[test]
fn low_accuracy_names_the_model() {
    let d = tempfile::tempdir().unwrap();
    let m = small_with(&[
        "embedders.epochs=1",
        "embedders.min_accuracy=0",
        "embedders.target_accuracy=0.999",
    ]);
    let err = run_training_stage(&m, &RunDir::open(d.path()).unwrap())
        .err()
        .unwrap()
        .to_string();
    assert!(err.contains("embedder_0"), "{err}");
}

#[test]
fn completed_stages_are_not_rewritten() {
    let d = tempfile::tempdir().unwrap();
    let m = small();
    run_all(&m, &RunDir::open(d.path()).unwrap()).unwrap();
    let (before, times) = (snapshot(d.path()), mtimes(d.path()));
    std::thread::sleep(std::time::Duration::from_millis(20));
    run_all(&m, &RunDir::open(d.path()).unwrap()).unwrap();
    assert_eq!(snapshot(d.path()), before);
    assert_eq!(mtimes(d.path()), times);
}

#[test]
fn runs_reproduce_bit_exactly_across_directories_and_worker_counts() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    run_all(&small(), &RunDir::open(a.path()).unwrap()).unwrap();
    run_all(
        &small_with(&["attack.workers=3"]),
        &RunDir::open(b.path()).unwrap(),
    )
    .unwrap();
    let (sa, sb) = (snapshot(a.path()), snapshot(b.path()));
    assert_eq!(sa.keys().collect::<Vec<_>>(), sb.keys().collect::<Vec<_>>());
    for (k, v) in &sa {
        let s = k.to_string_lossy();
        // The manifest copies record the worker count; the attack stamp hash
        // excludes it.
        if s == "manifest.cfg" || s == "eval/report.txt" {
            continue;
        }
        assert_eq!(v, &sb[k], "{s}");
    }
}

#[test]
fn empty_source_set_gives_no_results_and_eval_refuses() {
    let d = tempfile::tempdir().unwrap();
    let dir = RunDir::open(d.path()).unwrap();
    let m = small_with(&["attack.sources=0"]);
    let t = run_training_stage(&m, &dir).unwrap();
    let p = plan(&m, &t.dataset).unwrap();
    let trajs = run_invert_stage(&m, &dir, &t, &p).unwrap();
    let out = run_attack_stage(&m, &dir, &t, &p, &trajs).unwrap();
    assert!(out.is_empty());
    assert!(run_eval_stage(&m, &dir, &t, &p, &out).is_err());
}

#[test]
fn zero_kappa_returns_the_reconstruction() {
    let d = tempfile::tempdir().unwrap();
    let dir = RunDir::open(d.path()).unwrap();
    let m = small_with(&["kappa=0"]);
    let t = run_training_stage(&m, &dir).unwrap();
    let p = plan(&m, &t.dataset).unwrap();
    let trajs = run_invert_stage(&m, &dir, &t, &p).unwrap();
    let out = run_attack_stage(&m, &dir, &t, &p, &trajs).unwrap();
    for ((i, o), traj) in out.iter().zip(&trajs) {
        let r = o.as_ref().unwrap();
        let rec = reconstruct(traj, &t.denoiser)
            .unwrap()
            .map(|v| v.clamp(0.0, 1.0));
        let err = r.adv_image.max_abs_diff(&rec).unwrap();
        assert!(err <= 1e-5 * (1.0 + rec.max_abs()), "source {i}: {err}");
        assert!(psnr(&p.sources[*i].image, &r.adv_image).unwrap() >= 40.0);
    }
}

#[test]
fn default_like_run_is_finite_and_complete() {
    let d = tempfile::tempdir().unwrap();
    let dir = RunDir::open(d.path()).unwrap();
    let m = small();
    let t = run_training_stage(&m, &dir).unwrap();
    let p = plan(&m, &t.dataset).unwrap();
    assert_eq!(p.sources.len(), 6);
    assert_eq!(p.targets.len(), 2);
    for s in &p.sources {
        assert_ne!(s.label, s.target_label);
    }
    let trajs = run_invert_stage(&m, &dir, &t, &p).unwrap();
    let out = run_attack_stage(&m, &dir, &t, &p, &trajs).unwrap();
    for (i, o) in &out {
        let r = o.as_ref().unwrap();
        assert!(r.adv_image.data().iter().all(|v| v.is_finite()));
        assert_eq!(r.trace_rows, m.guidance.t_s * m.guidance.n_a);
        assert!(d.path().join(format!("attack/adv_{i:03}.pgm")).exists());
        let trace = fs::read_to_string(d.path().join(format!("attack/trace_{i:03}.csv"))).unwrap();
        assert_eq!(trace.lines().count(), 1 + r.trace_rows);
    }
    let report = run_eval_stage(&m, &dir, &t, &p, &out).unwrap();
    let rows = |f: &str| {
        fs::read_to_string(d.path().join("eval").join(f))
            .unwrap()
            .lines()
            .count()
            - 1
    };
    let models = t.embedders.len();
    assert_eq!(rows("verification.csv"), p.sources.len() * models);
    assert_eq!(rows("identification.csv"), p.sources.len() * models);
    assert_eq!(rows("quality.csv"), p.sources.len());
    assert_eq!(
        rows("robustness.csv"),
        p.sources.len() * models * m.lossy.len()
    );
    assert_eq!(rows("summary.csv"), report.summary_rows().len());
    let txt = fs::read_to_string(d.path().join("eval/report.txt")).unwrap();
    assert!(txt.contains(&m.to_text()));
}

#[test]
fn failing_sources_are_isolated() {
    let d = tempfile::tempdir().unwrap();
    let dir = RunDir::open(d.path()).unwrap();
    let m = small();
    let t = run_training_stage(&m, &dir).unwrap();
    let p = plan(&m, &t.dataset).unwrap();
    let mut trajs = run_invert_stage(&m, &dir, &t, &p).unwrap();
    let stranger = DenoiserNet::new(DenoiserConfig {
        seed: 999,
        ..m.denoiser_config()
    })
    .unwrap();
    trajs[2] = edit_friendly_invert(&p.sources[2].image, &t.schedule, &stranger, 1).unwrap();
    let white = t.white_box();
    let sources: Vec<_> = p.sources.iter().collect();
    let refs: Vec<_> = trajs.iter().collect();
    let out = attack_batch(&t, &white, &sources, &refs, &m.guidance, 2);
    assert_eq!(out.len(), 6);
    for (i, o, _) in &out {
        assert_eq!(o.is_err(), *i == 2, "source {i}");
    }
}

#[test]
fn results_container_round_trips() {
    let d = tempfile::tempdir().unwrap();
    let m = small();
    run_all(&m, &RunDir::open(d.path()).unwrap()).unwrap();
    let bytes = fs::read(d.path().join("attack/results.bin")).unwrap();
    let decoded = decode_results(&bytes).unwrap();
    assert_eq!(decoded.len(), 6);
    assert_eq!(encode_results(&decoded), bytes);
    let mut failed = decoded.clone();
    failed[1].1 = Err("boom".into());
    assert_eq!(decode_results(&encode_results(&failed)).unwrap(), failed);
    assert!(decode_results(&bytes[..bytes.len() - 3]).is_err());
    assert!(decode_results(b"not a results file").is_err());
}

#[test]
fn ablation_axes() {
    let d = tempfile::tempdir().unwrap();
    let dir = RunDir::open(d.path()).unwrap();
    let m = small();
    let t = run_training_stage(&m, &dir).unwrap();
    let p = plan(&m, &t.dataset).unwrap();
    let trajs = run_invert_stage(&m, &dir, &t, &p).unwrap();

    let r = run_ablation(&m, &dir, &t, &p, &trajs, "t_s").unwrap();
    assert_eq!(r.rows.len(), 5);
    let settings: Vec<&str> = r.rows.iter().map(|r| r.setting.as_str()).collect();
    assert_eq!(settings, ["2", "4", "6", "10", "20"]);
    let csv = fs::read_to_string(d.path().join("ablation/t_s.csv")).unwrap();
    assert_eq!(csv.lines().count(), 6);

    let r = run_ablation(&m, &dir, &t, &p, &trajs, "lambda").unwrap();
    let sources = |s: &str| {
        r.paired
            .iter()
            .filter(|x| x.0 == s)
            .map(|x| x.1)
            .collect::<Vec<_>>()
    };
    assert_eq!(sources("0"), sources("0.1"));
    assert_eq!(sources("0").len(), m.ablation_sources);

    for axis in ["sem-div", "naive", "ensemble"] {
        let r = run_ablation(&m, &dir, &t, &p, &trajs, axis).unwrap();
        assert_eq!(r.rows.len(), 2, "{axis}");
        assert!(r.rows.iter().all(|row| row.asr.len() == t.embedders.len()));
    }
    let err = run_ablation(&m, &dir, &t, &p, &trajs, "dropout")
        .unwrap_err()
        .to_string();
    assert!(err.contains("dropout") && err.contains("sem-div"), "{err}");
}

#[test]
fn run_directory_lock_is_exclusive() {
    let d = tempfile::tempdir().unwrap();
    let first = RunDir::open(d.path()).unwrap();
    assert!(RunDir::open(d.path()).is_err());
    drop(first);
    assert!(RunDir::open(d.path()).is_ok());
}

#[test]
fn summary_reflects_csv_and_reports_gaps() {
    let d = tempfile::tempdir().unwrap();
    assert!(summarize(d.path())
        .unwrap()
        .render()
        .contains("no stages found"));

    let m = small();
    let dir = RunDir::open(d.path()).unwrap();
    run_training_stage(&m, &dir).unwrap();
    let partial = summarize(d.path()).unwrap();
    assert_eq!(partial.gaps, ["attack", "eval"]);
    assert!(partial.render().contains("missing: eval"));

    let report = pipeline::run_all(&m, &dir).unwrap();
    let s = summarize(d.path()).unwrap();
    assert!(s.gaps.is_empty());
    let want = advdiff::eval::fmt_metric(report.models[0].asr_adv);
    assert_eq!(s.value("asr_adv", "embedder_0"), Some(want.as_str()));
    for f in [
        "eval/verification.csv",
        "eval/summary.csv",
        "attack/summary.csv",
    ] {
        assert!(s.csv_files.contains(&d.path().join(f)), "{f}");
    }
}

#[test]
fn ensemble_score_rises_over_guided_steps() {
    let d = tempfile::tempdir().unwrap();
    let dir = RunDir::open(d.path()).unwrap();
    let m = small_with(&["dataset.renders=20", "attack.sources=20"]);
    let t = run_training_stage(&m, &dir).unwrap();
    let p = plan(&m, &t.dataset).unwrap();
    let trajs = run_invert_stage(&m, &dir, &t, &p).unwrap();
    let white = t.white_box();
    let ctx = t.context(&white);
    let ensemble = |row: &advdiff::attack::TraceRow| -> f64 {
        row.scores
            .iter()
            .zip(&row.weights)
            .map(|(s, w)| s * w)
            .sum()
    };
    let (mut first, mut last) = (0.0, 0.0);
    for (s, traj) in p.sources.iter().zip(&trajs) {
        let r =
            advdiff::attack::run_attack_on(traj, &s.image, &s.target, &ctx, &m.guidance).unwrap();
        let at = |step: usize| r.trace.iter().rfind(|row| row.t == step).unwrap();
        first += ensemble(at(m.guidance.t_s));
        last += ensemble(at(1));
    }
    assert!(last > first, "mean score at t=1 {last} vs t_s {first}");
}
