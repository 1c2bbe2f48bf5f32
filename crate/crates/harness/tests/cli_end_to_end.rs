//! End-to-end runs of the library commands and the binary on the smoke
//! config. One training run is shared by all tests.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::OnceLock;
use std::time::Instant;

use recttt_core::baselines::Method;
use recttt_core::data::Split;
use recttt_harness::cli;
use recttt_harness::config::ExperimentConfig;
use recttt_harness::dataset;
use recttt_harness::experiment::{self, Axis};
use recttt_harness::report::{Report, AVERAGE};

fn smoke_path() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke.json")
}

fn smoke(overrides: &[&str]) -> ExperimentConfig {
    let o: Vec<String> = overrides.iter().map(|s| s.to_string()).collect();
    ExperimentConfig::load(&smoke_path(), &o).unwrap()
}

struct Trained {
    dir: PathBuf,
    ckpt: PathBuf,
    secs: f64,
}

fn trained() -> &'static Trained {
    static T: OnceLock<Trained> = OnceLock::new();
    T.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap().keep();
        let start = Instant::now();
        let ckpt = cli::cmd_train(&smoke(&[]), &dir).unwrap();
        Trained {
            dir,
            ckpt,
            secs: start.elapsed().as_secs_f64(),
        }
    })
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_recttt"))
}

#[test]
fn smoke_training_is_fast_and_learns() {
    let t = trained();
    assert!(t.secs < 60.0, "{}s", t.secs);
    assert!(t.ckpt.exists());
    let log = std::fs::read_to_string(t.dir.join("train_log.csv")).unwrap();
    let mut lines = log.lines();
    assert_eq!(
        lines.next().unwrap(),
        "stage,seed,epoch,lr,steps,total,ce1,ce2,aux,kl"
    );
    let ce: Vec<f64> = log
        .lines()
        .filter(|l| l.starts_with("recttt,"))
        .map(|l| l.split(',').nth(6).unwrap().parse().unwrap())
        .collect();
    assert_eq!(ce.len(), 5);
    assert!(ce.last().unwrap() < ce.first().unwrap(), "{ce:?}");
}

#[test]
fn source_equals_zero_iteration_adaptation() {
    let t = trained();
    let source = cli::cmd_eval(&smoke(&[]), &t.ckpt, Method::Source).unwrap();
    let t0 = cli::cmd_eval(&smoke(&["adapt.iterations=0"]), &t.ckpt, Method::Recttt).unwrap();
    for (a, b) in source.records.iter().zip(&t0.records) {
        assert_eq!(a.corruption, b.corruption);
        assert_eq!(a.accuracy, b.accuracy);
    }
}

#[test]
fn sweep_rows_match_grid() {
    let t = trained();
    for (axis, per_seed_kind) in [
        (Axis::Iterations, 6),
        (Axis::BatchSize, 8),
        (Axis::Depth, 3),
        (Axis::Ensemble, 3),
    ] {
        let cfg = smoke(&["adapt.iterations=1", "ablation.iterations=[0,1,2,3,4,5]"]);
        let jobs = experiment::sweep_jobs(&cfg, axis);
        let report = cli::cmd_sweep(&cfg, &t.ckpt, axis).unwrap();
        assert_eq!(report.records.len(), experiment::grid_size(&cfg, &jobs));
        assert_eq!(report.records.len(), per_seed_kind * 2, "{axis:?}");
    }
}

#[test]
fn iteration_sweep_zero_row_is_source() {
    let t = trained();
    let cfg = smoke(&["ablation.iterations=[0]"]);
    let sweep = cli::cmd_sweep(&cfg, &t.ckpt, Axis::Iterations).unwrap();
    let source = cli::cmd_eval(&cfg, &t.ckpt, Method::Source).unwrap();
    assert_eq!(
        sweep.mean_accuracy("recttt", "T=0", AVERAGE),
        source.mean_accuracy("source", "default", AVERAGE)
    );
}

#[test]
fn three_seed_report_has_std() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = smoke(&[
        "seeds=[0,1,2]",
        "data.train_size=64",
        "train.epochs=1",
        "train.pretrain_epochs=1",
        "train.with_simsiam=false",
        "train.with_single_encoder=false",
    ]);
    let ckpt = cli::cmd_train(&cfg, dir.path()).unwrap();
    let r: Report = cli::cmd_eval(&cfg, &ckpt, Method::Ptbn).unwrap();
    let mean = r
        .rows
        .iter()
        .filter(|x| x.seed == "mean")
        .collect::<Vec<_>>();
    assert_eq!(mean.len(), 3);
    assert!(mean.iter().all(|x| x.accuracy_std.is_some()));
}

#[test]
fn config_mismatch_is_a_config_error() {
    let t = trained();
    let cfg = smoke(&["model.widths=[8,16,16]"]);
    let e = cli::cmd_eval(&cfg, &t.ckpt, Method::Source).unwrap_err();
    assert_eq!(e.exit_code(), 2, "{e}");
    let e = cli::cmd_eval(&smoke(&["seeds=[5]"]), &t.ckpt, Method::Source).unwrap_err();
    assert_eq!(e.exit_code(), 2, "{e}");
}

#[test]
fn feature_dump_layout() {
    let t = trained();
    let out = tempfile::tempdir().unwrap();
    let cfg = smoke(&[]);
    let bundles = experiment::from_checkpoint(
        &cfg,
        &recttt_harness::checkpoint::Checkpoint::load(&t.ckpt).unwrap(),
    )
    .unwrap();
    let files = experiment::dump_features(&cfg, &bundles[0], out.path()).unwrap();
    assert_eq!(files.len(), 2);
    let text = std::fs::read_to_string(&files[0]).unwrap();
    let header: Vec<&str> = text.lines().next().unwrap().split(',').collect();
    assert_eq!(&header[..3], ["id", "label", "iteration"]);
    assert_eq!(header.len(), 3 + 32);
    // One row per sample per captured iteration.
    assert_eq!(text.lines().count(), 1 + 64 * 2);
    let iters: std::collections::BTreeSet<&str> = text
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(2).unwrap())
        .collect();
    assert_eq!(iters.into_iter().collect::<Vec<_>>(), ["0", "5"]);
}

#[test]
fn dataset_export_round_trip() {
    let out = tempfile::tempdir().unwrap();
    let cfg = smoke(&["data.train_size=10", "data.test_size=5"]);
    let index = cli::cmd_export_data(&cfg, out.path()).unwrap();
    assert_eq!(index.samples.len(), 15);
    assert_eq!(index.image_shape, vec![3, 16, 16]);
    let back = dataset::import(out.path()).unwrap();
    let train = experiment::train_set(&cfg, 0).unwrap();
    let test = experiment::test_set(&cfg, 0).unwrap();
    let orig: Vec<_> = train
        .iter()
        .map(|s| (Split::Train, s))
        .chain(test.iter().map(|s| (Split::Test, s)))
        .collect();
    assert_eq!(back.len(), orig.len());
    for ((sa, a), (sb, b)) in back.iter().zip(orig) {
        assert_eq!(*sa, sb);
        assert_eq!((a.id, a.label), (b.id, b.label));
        assert!(a.image.bitwise_eq(&b.image));
    }
    let raw = std::fs::read(out.path().join(&index.samples[0].file)).unwrap();
    assert_eq!(raw.len(), 3 * 16 * 16 * 4);
}

#[test]
fn binary_exit_codes() {
    let t = trained();
    let dir = tempfile::tempdir().unwrap();

    let ok = bin()
        .arg("gradcheck")
        .arg("--instances")
        .arg("2")
        .output()
        .unwrap();
    assert_eq!(
        ok.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&ok.stderr)
    );
    assert!(String::from_utf8_lossy(&ok.stdout).contains("stop_gradient_contract"));

    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"adapt": {"iters": 3}}"#).unwrap();
    let code = |args: &[&str]| bin().args(args).output().unwrap().status.code();
    assert_eq!(code(&["train", "--config", bad.to_str().unwrap()]), Some(2));
    assert_eq!(
        code(&["train", "--config", "/nonexistent/cfg.json"]),
        Some(4)
    );
    assert_eq!(code(&["frobnicate"]), Some(2));
    let smoke = smoke_path();
    let s = smoke.to_str().unwrap();
    assert_eq!(
        code(&[
            "sweep",
            "--axis",
            "width",
            "--ckpt",
            t.ckpt.to_str().unwrap(),
            "--config",
            s
        ]),
        Some(2)
    );
    assert_eq!(
        code(&["eval", "--ckpt", "/nonexistent.ckpt", "--config", s]),
        Some(4)
    );
    let junk = dir.path().join("junk.ckpt");
    std::fs::write(&junk, b"not a checkpoint").unwrap();
    assert_eq!(
        code(&["eval", "--ckpt", junk.to_str().unwrap(), "--config", s]),
        Some(4)
    );

    let out = dir.path().join("eval");
    let run = bin()
        .args([
            "eval",
            "--ckpt",
            t.ckpt.to_str().unwrap(),
            "--config",
            s,
            "--method",
            "ptbn",
            "--out",
        ])
        .arg(&out)
        .output()
        .unwrap();
    assert_eq!(
        run.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&run.stderr)
    );
    assert!(out.join("report.csv").exists() && out.join("report.json").exists());
}

#[test]
fn non_finite_training_exits_numerical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = smoke(&[
        "train.lr=1e30",
        "train.pretrain_epochs=1",
        "train.with_simsiam=false",
        "train.with_single_encoder=false",
    ]);
    let e = cli::cmd_train(&cfg, dir.path()).unwrap_err();
    assert_eq!(e.exit_code(), 3, "{e}");
}
