//! End-to-end tests of the `lanm` binary: every subcommand, the exit-code
//! contract, and bit-identical re-runs.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use lanm::config::ExperimentConfig;
use lanm::eval::EvalReport;
use lanm::model::{LanmModel, ModelConfig};
use lanm::scm::{gen_dataset, GenOptions, Mixing, ScmSpec};

fn lanm_bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_lanm"));
    cmd.env_remove("LANM_THREADS");
    cmd
}

fn run_args(args: &[&str]) -> Output {
    lanm_bin().args(args).output().expect("spawn lanm")
}

#[track_caller]
fn assert_code(out: &Output, code: i32) {
    assert_eq!(
        out.status.code(),
        Some(code),
        "stdout:\n{}\nstderr:\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn read(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

/// A two-node chain small enough for debug-build training in tests.
fn small_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.scm = ScmSpec::chain(2);
    cfg.noise.segments = 4;
    cfg.noise.samples_per_segment = 40;
    cfg.mixing.d = Some(3);
    cfg.model.hidden = 16;
    cfg.train.epochs = 2;
    cfg.train.batch_size = 64;
    cfg
}

fn write_config(cfg: &ExperimentConfig, dir: &Path) -> PathBuf {
    let path = dir.join("exp.json");
    lanm::io::write_json(&path, cfg).unwrap();
    path
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn gen_is_reproducible_and_respects_force() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(&small_config(), tmp.path());
    let out_a = tmp.path().join("a");
    let out_b = tmp.path().join("b");

    let first = run_args(&[
        "gen",
        "--config",
        path_str(&cfg),
        "--out",
        path_str(&out_a),
    ]);
    assert_code(&first, 0);
    assert!(stdout(&first).contains("wrote synthetic dataset"));
    for file in ["manifest.json", "config.json", "x.lanm", "z.lanm"] {
        assert!(out_a.join(file).is_file(), "missing {file}");
    }

    // A non-empty output directory is refused without --force.
    let refused = run_args(&[
        "gen",
        "--config",
        path_str(&cfg),
        "--out",
        path_str(&out_a),
    ]);
    assert_code(&refused, 2);
    assert!(stderr(&refused).contains("--force"));
    let forced = run_args(&[
        "gen",
        "--config",
        path_str(&cfg),
        "--out",
        path_str(&out_a),
        "--force",
    ]);
    assert_code(&forced, 0);

    // Same config, fresh directory: bit-identical artifacts.
    let second = run_args(&[
        "gen",
        "--config",
        path_str(&cfg),
        "--out",
        path_str(&out_b),
    ]);
    assert_code(&second, 0);
    for file in ["manifest.json", "config.json", "x.lanm", "z.lanm", "n.lanm"] {
        assert_eq!(
            read(&out_a.join(file)),
            read(&out_b.join(file)),
            "{file} differs between identical runs"
        );
    }
}

#[test]
fn config_errors_and_missing_out_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.json");
    std::fs::write(&bad, r#"{"nois": {}}"#).unwrap();
    let out = run_args(&[
        "gen",
        "--config",
        path_str(&bad),
        "--out",
        path_str(&tmp.path().join("x")),
    ]);
    assert_code(&out, 2);

    let no_out = run_args(&["gen"]);
    assert_code(&no_out, 2);
    assert!(stderr(&no_out).contains("--out"));

    // clap usage errors share the configuration exit code.
    let usage = run_args(&["no-such-command"]);
    assert_code(&usage, 2);
}

#[test]
fn missing_dataset_exits_3() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run_args(&[
        "train",
        path_str(&tmp.path().join("nope")),
        "--out",
        path_str(&tmp.path().join("run")),
    ]);
    assert_code(&out, 3);
}

#[test]
fn dry_run_validates_without_writing() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(&small_config(), tmp.path());
    let out_dir = tmp.path().join("never");
    let out = run_args(&[
        "gen",
        "--config",
        path_str(&cfg),
        "--out",
        path_str(&out_dir),
        "--dry-run",
    ]);
    assert_code(&out, 0);
    assert!(stdout(&out).contains("dry run"));
    assert!(!out_dir.exists(), "dry run created the output directory");
}

#[test]
fn pipeline_gen_train_eval_traverse_check() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(&small_config(), tmp.path());
    let ds = tmp.path().join("ds");
    let run = tmp.path().join("run");
    let ev = tmp.path().join("eval");
    let tr = tmp.path().join("trav");

    assert_code(
        &run_args(&["gen", "--config", path_str(&cfg), "--out", path_str(&ds)]),
        0,
    );

    let trained = run_args(&[
        "train",
        path_str(&ds),
        "--config",
        path_str(&cfg),
        "--out",
        path_str(&run),
    ]);
    assert_code(&trained, 0);
    assert!(stdout(&trained).contains("seed 0: 2 epochs"));
    let log = String::from_utf8(read(&run.join("log.csv"))).unwrap();
    let mut lines = log.lines();
    assert_eq!(lines.next().unwrap(), "epoch,recon,kl,l1,total");
    assert_eq!(lines.count(), 2);
    assert!(run.join("manifest.json").is_file());
    assert!(run.join("config.json").is_file());

    let evaled = run_args(&[
        "eval",
        path_str(&ds),
        path_str(&run),
        "--config",
        path_str(&cfg),
        "--out",
        path_str(&ev),
    ]);
    assert_code(&evaled, 0);
    assert!(stdout(&evaled).contains("mpc="));
    let report: EvalReport = lanm::io::read_json(&ev.join("report.json")).unwrap();
    assert_eq!(report.nodes.len(), 2);
    assert!((0.0..=1.0).contains(&report.mpc));
    let csv = String::from_utf8(read(&ev.join("report.csv"))).unwrap();
    assert!(csv.starts_with("node,r,r_squared,rho,verdict"));

    let traversed = run_args(&[
        "traverse",
        path_str(&run),
        "--node",
        "2",
        "--lo",
        "-2",
        "--hi",
        "2",
        "--steps",
        "5",
        "--out",
        path_str(&tr),
    ]);
    assert_code(&traversed, 0);
    let table = String::from_utf8(read(&tr.join("traverse.csv"))).unwrap();
    let mut lines = table.lines();
    assert_eq!(
        lines.next().unwrap(),
        "step,value,z_mean_1,z_mean_2,x_delta_1,x_delta_2,x_delta_3"
    );
    assert_eq!(lines.count(), 5);
    assert!(tr.join("config.json").is_file());

    let checked = run_args(&["check", path_str(&ds)]);
    assert_code(&checked, 0);
    assert!(stdout(&checked).contains("overall:"));
}

#[test]
fn train_rerun_is_bit_identical_and_resume_extends_steps() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = small_config();
    cfg.train.epochs = 1;
    let cfg_path = write_config(&cfg, tmp.path());
    let ds = tmp.path().join("ds");
    assert_code(
        &run_args(&["gen", "--config", path_str(&cfg_path), "--out", path_str(&ds)]),
        0,
    );

    let run_a = tmp.path().join("a");
    let run_b = tmp.path().join("b");
    for dir in [&run_a, &run_b] {
        assert_code(
            &run_args(&[
                "train",
                path_str(&ds),
                "--config",
                path_str(&cfg_path),
                "--out",
                path_str(dir),
            ]),
            0,
        );
    }
    for file in ["manifest.json", "log.csv", "enc.l0.w.lanm", "dec.l2.w.lanm"] {
        assert_eq!(
            read(&run_a.join(file)),
            read(&run_b.join(file)),
            "{file} differs between identical training runs"
        );
    }

    let (_, fresh) = LanmModel::load_checkpoint(&run_a).unwrap();
    assert!(fresh.step > 0);

    let resumed_dir = tmp.path().join("resumed");
    let resumed = run_args(&[
        "train",
        path_str(&ds),
        "--config",
        path_str(&cfg_path),
        "--resume",
        path_str(&run_a),
        "--out",
        path_str(&resumed_dir),
    ]);
    assert_code(&resumed, 0);
    let (_, extended) = LanmModel::load_checkpoint(&resumed_dir).unwrap();
    assert_eq!(extended.step, 2 * fresh.step);
}

#[test]
fn multi_seed_train_fans_out_and_eval_aggregates() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = small_config();
    cfg.seeds = vec![1, 2];
    let cfg_path = write_config(&cfg, tmp.path());
    let ds = tmp.path().join("ds");
    assert_code(
        &run_args(&["gen", "--config", path_str(&cfg_path), "--out", path_str(&ds)]),
        0,
    );

    let run = tmp.path().join("run");
    let trained = run_args(&[
        "train",
        path_str(&ds),
        "--config",
        path_str(&cfg_path),
        "--out",
        path_str(&run),
        "--threads",
        "2",
    ]);
    assert_code(&trained, 0);
    for seed in [1, 2] {
        let sub = run.join(format!("seed-{seed}"));
        for file in ["manifest.json", "log.csv", "config.json"] {
            assert!(sub.join(file).is_file(), "seed-{seed} missing {file}");
        }
    }

    let ev = tmp.path().join("eval");
    let evaled = run_args(&[
        "eval",
        path_str(&ds),
        path_str(&run),
        "--config",
        path_str(&cfg_path),
        "--out",
        path_str(&ev),
    ]);
    assert_code(&evaled, 0);
    assert!(stdout(&evaled).contains("aggregate over 2 seeds"));
    for seed in [1, 2] {
        assert!(ev.join(format!("seed-{seed}/report.json")).is_file());
    }
    let summary = String::from_utf8(read(&ev.join("summary.csv"))).unwrap();
    let lines: Vec<&str> = summary.lines().collect();
    assert_eq!(lines[0], "seed,mpc,shd,identified");
    assert_eq!(lines.len(), 5, "expected 2 seeds + mean + stderr rows");
    assert!(lines[3].starts_with("mean,"));
    assert!(lines[4].starts_with("stderr,"));
}

/// With slope-1 activations the model is affine; wiring the encoder and
/// posterior heads to copy the observations makes the posterior mean the
/// identity map. Against an identity-mixing dataset the estimated latents
/// equal the true ones, so the evaluation must report a perfect matching.
#[test]
fn identity_model_on_identity_mixing_scores_perfect_mpc() {
    let tmp = tempfile::tempdir().unwrap();
    let opts = GenOptions {
        spec: ScmSpec::chain(2),
        segments: 3,
        samples_per_segment: 30,
        d: 2,
        ..GenOptions::default()
    };
    let mut ds = gen_dataset(&opts).unwrap();
    ds.x = ds.z.clone();
    ds.mixing = Mixing::identity(2);
    let ds_dir = tmp.path().join("ds");
    std::fs::create_dir_all(&ds_dir).unwrap();
    ds.save(&ds_dir).unwrap();

    let mut mc = ModelConfig::new(2, 2, 3);
    mc.hidden = 8;
    mc.leaky_slope = 1.0;
    let mut model = LanmModel::new(mc, 0).unwrap();
    let names: Vec<String> = model.params().iter().map(|(n, _)| n.clone()).collect();
    for name in &names {
        for v in model.param_mut(name).unwrap().data_mut() {
            *v = 0.0;
        }
    }
    for (name, row, col) in [
        ("enc.l0.w", 0, 0),
        ("enc.l0.w", 1, 1),
        ("enc.l1.w", 0, 0),
        ("enc.l1.w", 1, 1),
        ("enc.l2.w", 0, 0),
        ("enc.l2.w", 1, 1),
        ("node1.post.l0.w", 0, 0),
        ("node1.post.l1.w", 0, 0),
        ("node1.post.l2.w", 0, 0),
        ("node2.post.l0.w", 1, 0),
        ("node2.post.l1.w", 0, 0),
        ("node2.post.l2.w", 0, 0),
    ] {
        model.param_mut(name).unwrap().set(row, col, 1.0);
    }
    let ck_dir = tmp.path().join("ckpt");
    std::fs::create_dir_all(&ck_dir).unwrap();
    model.save_checkpoint(&ck_dir, 0, 0).unwrap();

    let ev = tmp.path().join("eval");
    let evaled = run_args(&[
        "eval",
        path_str(&ds_dir),
        path_str(&ck_dir),
        "--out",
        path_str(&ev),
    ]);
    assert_code(&evaled, 0);
    let report: EvalReport = lanm::io::read_json(&ev.join("report.json")).unwrap();
    assert!(
        report.mpc > 1.0 - 1e-12,
        "identity model should match perfectly, got mpc {}",
        report.mpc
    );
    for node in &report.nodes {
        assert_eq!(node.verdict.to_string(), "IDENTIFIED-AFFINE");
        assert!(node.r_squared > 1.0 - 1e-9);
    }
    assert_eq!(report.assignment, vec![1, 2]);
}

#[test]
fn counterexample_matches_observations_and_decorrelates_latents() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("ce");
    let ran = run_args(&[
        "counterexample",
        "--segments",
        "10",
        "--samples",
        "400",
        "--seed",
        "7",
        "--out",
        path_str(&out),
    ]);
    assert_code(&ran, 0);
    let report: serde_json::Value = lanm::io::read_json(&out.join("report.json")).unwrap();
    assert!(report["max_observation_gap"].as_f64().unwrap() < 1e-12);
    assert!(report["latent_correlation"].as_f64().unwrap().abs() < 0.99);
    for file in ["z.lanm", "z_alt.lanm", "x.lanm", "x_alt.lanm"] {
        assert!(out.join(file).is_file(), "missing {file}");
    }

    let anchored = tmp.path().join("ce-const");
    let ran = run_args(&[
        "counterexample",
        "--segments",
        "10",
        "--samples",
        "400",
        "--seed",
        "7",
        "--mlp2-constant",
        "--out",
        path_str(&anchored),
    ]);
    assert_code(&ran, 0);
    let report: serde_json::Value =
        lanm::io::read_json(&anchored.join("report.json")).unwrap();
    assert!(report["latent_correlation"].as_f64().unwrap().abs() > 0.99);
}

#[test]
fn numerical_blowup_during_training_exits_4() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = small_config();
    cfg.train.epochs = 3;
    cfg.train.learning_rate = 1e308;
    let cfg_path = write_config(&cfg, tmp.path());
    let ds = tmp.path().join("ds");
    assert_code(
        &run_args(&["gen", "--config", path_str(&cfg_path), "--out", path_str(&ds)]),
        0,
    );
    let out = run_args(&[
        "train",
        path_str(&ds),
        "--config",
        path_str(&cfg_path),
        "--out",
        path_str(&tmp.path().join("run")),
    ]);
    assert_code(&out, 4);
    assert!(stderr(&out).contains("training aborted"));
}

#[test]
fn traverse_rejects_bad_nodes_and_grids() {
    let tmp = tempfile::tempdir().unwrap();
    let mut mc = ModelConfig::new(2, 3, 4);
    mc.hidden = 8;
    let model = LanmModel::new(mc, 0).unwrap();
    let ck = tmp.path().join("ckpt");
    std::fs::create_dir_all(&ck).unwrap();
    model.save_checkpoint(&ck, 0, 0).unwrap();

    for args in [
        vec!["--node", "0"],
        vec!["--node", "3"],
        vec!["--node", "1", "--steps", "0"],
        vec!["--node", "1", "--lo", "2", "--hi", "-2"],
    ] {
        let mut full = vec!["traverse", path_str(&ck)];
        full.extend(args.iter().copied());
        let out_dir = tmp.path().join("t");
        full.extend(["--out", path_str(&out_dir)]);
        let out = lanm_bin().args(&full).output().unwrap();
        assert_code(&out, 2);
    }
}

#[test]
fn check_flags_a_constructed_violation() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = small_config();
    cfg.scm = ScmSpec::chain(3);
    cfg.scm.violation_nodes = vec![2];
    cfg.mixing.d = Some(3);
    cfg.noise.segments = 8;
    cfg.noise.samples_per_segment = 50;
    let cfg_path = write_config(&cfg, tmp.path());

    let out_dir = tmp.path().join("report");
    let out = run_args(&[
        "check",
        path_str(&cfg_path),
        "--out",
        path_str(&out_dir),
    ]);
    assert_code(&out, 0);
    let text = stdout(&out);
    assert!(text.contains("parent influence: FAIL"), "stdout:\n{text}");
    assert!(text.contains("node 2: FAIL"), "stdout:\n{text}");
    assert!(text.contains("overall: FAIL"), "stdout:\n{text}");
    let report: serde_json::Value = lanm::io::read_json(&out_dir.join("report.json")).unwrap();
    assert_eq!(report["pass"], serde_json::Value::Bool(false));
    assert!(out_dir.join("config.json").is_file());
}

#[test]
fn gen_ingests_signal_tables() {
    let tmp = tempfile::tempdir().unwrap();
    let csv = tmp.path().join("signals.csv");
    let mut text = String::from("day,PRC,PHC,ERC,Sub,CA1,DG\n");
    let mut v = 0.3f64;
    for day in [0usize, 1, 2] {
        for _ in 0..4 {
            let row: Vec<String> = (0..6)
                .map(|k| {
                    v = (v * 997.0 + 13.7 + k as f64).sin();
                    format!("{v}")
                })
                .collect();
            text.push_str(&format!("{day},{}\n", row.join(",")));
        }
    }
    std::fs::write(&csv, text).unwrap();

    let out_dir = tmp.path().join("ds");
    let out = run_args(&[
        "gen",
        "--fmri",
        path_str(&csv),
        "--out",
        path_str(&out_dir),
    ]);
    assert_code(&out, 0);
    assert!(stdout(&out).contains("wrote signal dataset"));

    let ds = lanm::scm::Dataset::load(&out_dir).unwrap();
    assert_eq!(ds.x.cols(), 6);
    assert_eq!(ds.m, 3);
    assert_eq!(ds.rows(), 12);

    // The checker runs on ingested datasets too, with skips noted.
    let checked = run_args(&["check", path_str(&out_dir)]);
    assert_code(&checked, 0);
    assert!(stdout(&checked).contains("parent influence: skipped"));
}
