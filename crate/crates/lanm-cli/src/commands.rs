//! Implementations of the `lanm` subcommands.
//!
//! Shared conventions: `--out` names a run directory that must be empty
//! unless `--force` is passed; every run embeds the fully resolved
//! configuration it actually used; `--dry-run` validates inputs and prints
//! the plan without writing; multi-seed work fans out over scoped threads
//! capped by `--threads` and the `LANM_THREADS` environment variable.

use std::path::{Path, PathBuf};

use lanm::config::ExperimentConfig;
use lanm::eval::{evaluate, EvalReport};
use lanm::io;
use lanm::model::{CheckpointManifest, LanmModel, ModelConfig, CHECKPOINT_MANIFEST};
use lanm::oracles::{build_counterexample, check_dataset, AssumptionReport, CheckOptions};
use lanm::scm::{gen_dataset, gen_fmri_dataset, ingest_fmri, Dataset, DatasetKind};
use lanm::train::train;
use lanm::{Error, Result};

use crate::traverse::{self, TraverseOptions};
use crate::{Cli, Command};

/// Resolved configuration written next to every run's outputs.
pub const CONFIG_FILE: &str = "config.json";
/// Per-epoch training statistics.
pub const LOG_FILE: &str = "log.csv";
/// Structured result of an evaluation, check, or counterexample run.
pub const REPORT_FILE: &str = "report.json";
/// Per-node evaluation table.
pub const REPORT_CSV_FILE: &str = "report.csv";
/// Traversal table.
pub const TRAVERSE_FILE: &str = "traverse.csv";
/// Cross-seed aggregate table.
pub const SUMMARY_FILE: &str = "summary.csv";

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Gen { fmri } => cmd_gen(cli, fmri.as_deref()),
        Command::Train { dataset, resume } => cmd_train(cli, dataset, resume.as_deref()),
        Command::Eval {
            dataset,
            checkpoint,
        } => cmd_eval(cli, dataset, checkpoint),
        Command::Traverse {
            checkpoint,
            node,
            lo,
            hi,
            steps,
        } => cmd_traverse(cli, checkpoint, *node, *lo, *hi, *steps),
        Command::Check { target } => cmd_check(cli, target),
        Command::Counterexample {
            segments,
            samples,
            mlp2_constant,
        } => cmd_counterexample(cli, *segments, *samples, *mlp2_constant),
    }
}

// ── Shared plumbing ──────────────────────────────────────────────────────

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::from_path(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seeds = vec![seed];
    }
    cfg.validate()?;
    Ok(cfg)
}

fn required_out(cli: &Cli) -> Result<&Path> {
    cli.out
        .as_deref()
        .ok_or_else(|| Error::Config("this command writes a run directory; pass --out <dir>".into()))
}

/// Create the run directory, refusing to write into a non-empty one
/// without `--force`.
fn prepare_out(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        if !dir.is_dir() {
            return Err(Error::Config(format!(
                "{}: exists and is not a directory",
                dir.display()
            )));
        }
        let mut entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
        if entries.next().is_some() && !force {
            return Err(Error::Config(format!(
                "{}: output directory is not empty (pass --force to overwrite)",
                dir.display()
            )));
        }
    } else {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Effective concurrency: `--threads`, else `LANM_THREADS`, else 1; the
/// environment variable always caps the flag.
fn thread_cap(cli: &Cli) -> Result<usize> {
    let env = match std::env::var("LANM_THREADS") {
        Ok(raw) => Some(
            raw.parse::<usize>()
                .ok()
                .filter(|&n| n >= 1)
                .ok_or_else(|| {
                    Error::Config(format!(
                        "LANM_THREADS must be a positive integer, got {raw:?}"
                    ))
                })?,
        ),
        Err(_) => None,
    };
    if cli.threads == Some(0) {
        return Err(Error::Config("--threads must be at least 1".into()));
    }
    let base = cli.threads.or(env).unwrap_or(1);
    Ok(match env {
        Some(cap) => base.min(cap),
        None => base,
    })
}

fn kind_name(kind: DatasetKind) -> &'static str {
    match kind {
        DatasetKind::Synthetic => "synthetic",
        DatasetKind::Fmri => "signal",
    }
}

// ── gen ──────────────────────────────────────────────────────────────────

fn cmd_gen(cli: &Cli, fmri: Option<&Path>) -> Result<()> {
    let mut cfg = load_config(cli)?;
    let out = required_out(cli)?;
    let seed = cfg.seeds[0];

    if cli.dry_run {
        match fmri {
            Some(path) => {
                let table = ingest_fmri(path)?;
                for w in &table.warnings {
                    eprintln!("warning: {w}");
                }
                let d = cfg.mixing.d.unwrap_or(table.z.cols());
                println!(
                    "dry run: would mix {} signal rows across {} segments into D={} observations at {}",
                    table.z.rows(),
                    table.days.len(),
                    d,
                    out.display()
                );
            }
            None => {
                println!(
                    "dry run: would generate {} rows (ell={}, D={}, M={}, seed={}) at {}",
                    cfg.noise.segments * cfg.noise.samples_per_segment,
                    cfg.scm.ell,
                    cfg.d(),
                    cfg.noise.segments,
                    seed,
                    out.display()
                );
            }
        }
        return Ok(());
    }

    let ds = match fmri {
        Some(path) => {
            let table = ingest_fmri(path)?;
            for w in &table.warnings {
                eprintln!("warning: {w}");
            }
            let d = cfg.mixing.d.unwrap_or(table.z.cols());
            gen_fmri_dataset(&table, d, cfg.mixing.slope, cfg.mixing.seed.unwrap_or(seed))?
        }
        None => gen_dataset(&cfg.gen_options(seed))?,
    };

    // Resolve the configuration to what was actually produced so the same
    // file drives training and evaluation unchanged.
    cfg.scm = ds.spec.clone();
    cfg.noise.segments = ds.m;
    cfg.mixing.d = Some(ds.x.cols());

    prepare_out(out, cli.force)?;
    ds.save(out)?;
    io::write_json(&out.join(CONFIG_FILE), &cfg)?;
    println!(
        "wrote {} dataset: {} rows, ell={}, D={}, M={} segments, seed={} -> {}",
        kind_name(ds.kind),
        ds.rows(),
        ds.spec.ell,
        ds.x.cols(),
        ds.m,
        ds.seed,
        out.display()
    );
    Ok(())
}

// ── train ────────────────────────────────────────────────────────────────

fn cmd_train(cli: &Cli, dataset_dir: &Path, resume: Option<&Path>) -> Result<()> {
    let cfg = load_config(cli)?;
    let out = required_out(cli)?;
    let ds = Dataset::load(dataset_dir)?;

    if cfg.scm.ell != ds.spec.ell {
        return Err(Error::Dimension(format!(
            "configuration describes {} latent nodes but the dataset has {}",
            cfg.scm.ell, ds.spec.ell
        )));
    }
    if cfg.noise.segments != ds.m {
        return Err(Error::Dimension(format!(
            "configuration describes {} segments but the dataset has {}",
            cfg.noise.segments, ds.m
        )));
    }
    if let Some(d) = cfg.mixing.d {
        if d != ds.x.cols() {
            return Err(Error::Dimension(format!(
                "configuration describes D={} observed columns but the dataset has {}",
                d,
                ds.x.cols()
            )));
        }
    }
    let mc = cfg.model_config(ds.x.cols());
    mc.validate()?;
    let cap = thread_cap(cli)?;

    let resume_state = match resume {
        Some(dir) => {
            if cfg.seeds.len() != 1 {
                return Err(Error::Config(
                    "--resume continues a single run; configure exactly one seed".into(),
                ));
            }
            let (model, manifest) = LanmModel::load_checkpoint(dir)?;
            if *model.config() != mc {
                return Err(Error::Config(format!(
                    "checkpoint at {} does not match the configured architecture",
                    dir.display()
                )));
            }
            Some((model, manifest.step))
        }
        None => None,
    };

    if cli.dry_run {
        println!(
            "dry run: would train {} run(s) of {} epochs on {} rows (ell={}, D={}, M={}, hidden={}) into {}",
            cfg.seeds.len(),
            cfg.train.epochs,
            ds.rows(),
            mc.ell,
            mc.x_dim,
            mc.u_dim,
            mc.hidden,
            out.display()
        );
        return Ok(());
    }

    prepare_out(out, cli.force)?;
    io::write_json(&out.join(CONFIG_FILE), &cfg)?;

    let multi = cfg.seeds.len() > 1;
    let mut results: Vec<(u64, Result<String>)> = Vec::new();
    for wave in cfg.seeds.chunks(cap.max(1)) {
        let mut wave_results: Vec<(u64, Result<String>)> = std::thread::scope(|scope| {
            let handles: Vec<_> = wave
                .iter()
                .map(|&seed| {
                    let run_dir = if multi {
                        out.join(format!("seed-{seed}"))
                    } else {
                        out.to_path_buf()
                    };
                    let ds = &ds;
                    let cfg = &cfg;
                    let mc = mc.clone();
                    let resume_state = &resume_state;
                    scope.spawn(move || {
                        (seed, run_seed(seed, &run_dir, ds, mc, cfg, resume_state, multi))
                    })
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("training thread panicked"))
                .collect()
        });
        results.append(&mut wave_results);
    }

    let mut first_err = None;
    for (seed, outcome) in results {
        match outcome {
            Ok(line) => println!("{line}"),
            Err(err) => {
                if first_err.is_none() {
                    first_err = Some(err);
                } else {
                    eprintln!("seed {seed}: {err}");
                }
            }
        }
    }
    match first_err {
        Some(err) => Err(err),
        None => Ok(()),
    }
}

#[allow(clippy::too_many_arguments)]
fn run_seed(
    seed: u64,
    run_dir: &Path,
    ds: &Dataset,
    mc: ModelConfig,
    cfg: &ExperimentConfig,
    resume: &Option<(LanmModel, u64)>,
    multi: bool,
) -> Result<String> {
    std::fs::create_dir_all(run_dir).map_err(|e| Error::io(run_dir, e))?;
    let (mut model, start_step) = match resume {
        Some((model, step)) => (model.clone(), *step),
        None => (LanmModel::new(mc, seed)?, 0),
    };
    let mut tc = cfg.train.clone();
    tc.seed = seed;
    let log = train(&mut model, ds, &tc, Some(run_dir), start_step)?;
    write_text(&run_dir.join(LOG_FILE), &log.to_csv())?;
    if multi {
        let mut sub = cfg.clone();
        sub.seeds = vec![seed];
        io::write_json(&run_dir.join(CONFIG_FILE), &sub)?;
    }
    Ok(match log.epochs.last() {
        Some(last) => format!(
            "seed {seed}: {} epochs in {:.1}s, total={:.4} (recon={:.4}, kl={:.4}, l1={:.4})",
            log.epochs.len(),
            log.wall_clock.as_secs_f64(),
            last.total,
            last.recon,
            last.kl,
            last.l1
        ),
        None => format!("seed {seed}: 0 epochs (checkpoint written unchanged)"),
    })
}

// ── eval ─────────────────────────────────────────────────────────────────

/// Locate checkpoints under `root`: either the directory itself or its
/// `seed-<n>` children.
fn discover_checkpoints(root: &Path) -> Result<Vec<(Option<u64>, PathBuf)>> {
    let manifest = root.join(CHECKPOINT_MANIFEST);
    if manifest.is_file() {
        io::read_json::<CheckpointManifest>(&manifest)?;
        return Ok(vec![(None, root.to_path_buf())]);
    }
    let mut found: Vec<(u64, PathBuf)> = Vec::new();
    if root.is_dir() {
        for entry in std::fs::read_dir(root).map_err(|e| Error::io(root, e))? {
            let entry = entry.map_err(|e| Error::io(root, e))?;
            let name = entry.file_name().to_string_lossy().into_owned();
            let Some(rest) = name.strip_prefix("seed-") else {
                continue;
            };
            let Ok(seed) = rest.parse::<u64>() else {
                continue;
            };
            let dir = entry.path();
            if dir.join(CHECKPOINT_MANIFEST).is_file() {
                found.push((seed, dir));
            }
        }
    }
    if found.is_empty() {
        return Err(Error::Config(format!(
            "{}: no checkpoint found (expected {CHECKPOINT_MANIFEST} or seed-<n> subdirectories)",
            root.display()
        )));
    }
    found.sort();
    Ok(found.into_iter().map(|(s, d)| (Some(s), d)).collect())
}

fn check_model_matches_dataset(model: &LanmModel, ds: &Dataset, origin: &Path) -> Result<()> {
    let mc = model.config();
    if mc.ell != ds.spec.ell || mc.x_dim != ds.x.cols() || mc.u_dim != ds.m {
        return Err(Error::Dimension(format!(
            "checkpoint at {} expects ell={}, D={}, M={} but the dataset has ell={}, D={}, M={}",
            origin.display(),
            mc.ell,
            mc.x_dim,
            mc.u_dim,
            ds.spec.ell,
            ds.x.cols(),
            ds.m
        )));
    }
    Ok(())
}

fn mean_and_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

fn cmd_eval(cli: &Cli, dataset_dir: &Path, checkpoint: &Path) -> Result<()> {
    let cfg = load_config(cli)?;
    let out = required_out(cli)?;
    let ds = Dataset::load(dataset_dir)?;
    let checkpoints = discover_checkpoints(checkpoint)?;

    if cli.dry_run {
        println!(
            "dry run: would evaluate {} checkpoint(s) against {} rows into {}",
            checkpoints.len(),
            ds.rows(),
            out.display()
        );
        return Ok(());
    }

    prepare_out(out, cli.force)?;
    io::write_json(&out.join(CONFIG_FILE), &cfg)?;

    let mut per_seed: Vec<(u64, EvalReport)> = Vec::new();
    for (seed, dir) in &checkpoints {
        let (model, manifest) = LanmModel::load_checkpoint(dir)?;
        check_model_matches_dataset(&model, &ds, dir)?;
        let report = evaluate(&model, &ds, &cfg.eval)?;
        let run_dir = match seed {
            Some(s) => out.join(format!("seed-{s}")),
            None => out.to_path_buf(),
        };
        std::fs::create_dir_all(&run_dir).map_err(|e| Error::io(&run_dir, e))?;
        io::write_json(&run_dir.join(REPORT_FILE), &report)?;
        write_text(&run_dir.join(REPORT_CSV_FILE), &report.to_csv())?;
        let identified = report
            .nodes
            .iter()
            .filter(|n| n.verdict.identified())
            .count();
        let label = match seed {
            Some(s) => format!("seed {s}"),
            None => format!("checkpoint (step {})", manifest.step),
        };
        println!(
            "{label}: mpc={:.4}, shd={}, identified {}/{}",
            report.mpc,
            report.shd,
            identified,
            report.nodes.len()
        );
        if let Some(s) = seed {
            per_seed.push((*s, report));
        }
    }

    if !per_seed.is_empty() {
        let mut csv = String::from("seed,mpc,shd,identified\n");
        let mut mpcs = Vec::new();
        let mut shds = Vec::new();
        let mut idents = Vec::new();
        for (s, r) in &per_seed {
            let identified = r.nodes.iter().filter(|n| n.verdict.identified()).count();
            csv.push_str(&format!("{s},{},{},{}\n", r.mpc, r.shd, identified));
            mpcs.push(r.mpc);
            shds.push(r.shd as f64);
            idents.push(identified as f64);
        }
        let (m_mpc, se_mpc) = mean_and_stderr(&mpcs);
        let (m_shd, se_shd) = mean_and_stderr(&shds);
        let (m_id, se_id) = mean_and_stderr(&idents);
        csv.push_str(&format!("mean,{m_mpc},{m_shd},{m_id}\n"));
        csv.push_str(&format!("stderr,{se_mpc},{se_shd},{se_id}\n"));
        write_text(&out.join(SUMMARY_FILE), &csv)?;
        if per_seed.len() > 1 {
            println!(
                "aggregate over {} seeds: mpc={:.4} +/- {:.4}, shd={:.2} +/- {:.2} (stderr)",
                per_seed.len(),
                m_mpc,
                se_mpc,
                m_shd,
                se_shd
            );
        }
    }
    Ok(())
}

// ── traverse ─────────────────────────────────────────────────────────────

fn cmd_traverse(
    cli: &Cli,
    checkpoint: &Path,
    node: usize,
    lo: f64,
    hi: f64,
    steps: usize,
) -> Result<()> {
    let out = required_out(cli)?;
    let (model, _manifest) = LanmModel::load_checkpoint(checkpoint)?;
    let opts = TraverseOptions {
        node,
        lo,
        hi,
        steps,
        seed: cli.seed.unwrap_or(0),
    };
    opts.validate(model.config())?;

    if cli.dry_run {
        println!(
            "dry run: would sweep node {node} over [{lo}, {hi}] in {steps} step(s) and write {TRAVERSE_FILE} to {}",
            out.display()
        );
        return Ok(());
    }

    let table = traverse::traverse(&model, &opts)?;
    prepare_out(out, cli.force)?;
    write_text(&out.join(TRAVERSE_FILE), &table.to_csv())?;
    io::write_json(&out.join(CONFIG_FILE), &opts)?;
    println!(
        "wrote node-{} traversal over [{lo}, {hi}] in {steps} step(s) -> {}",
        table.node,
        out.display()
    );
    Ok(())
}

// ── check ────────────────────────────────────────────────────────────────

fn pass_str(pass: bool) -> &'static str {
    if pass {
        "PASS"
    } else {
        "FAIL"
    }
}

fn print_check_report(report: &AssumptionReport) {
    let v = &report.variability;
    println!("variability: {} ({})", pass_str(v.pass), v.message);
    match &report.influence {
        Some(influence) => {
            println!("parent influence: {}", pass_str(influence.pass));
            for node in &influence.nodes {
                if !node.pass {
                    println!("  node {}: FAIL ({})", node.node, node.message);
                }
            }
        }
        None => println!("parent influence: skipped"),
    }
    match &report.jacobian {
        Some(j) => println!(
            "jacobian structure: {} (max upper {:.2e}, max diag gap {:.2e}, max det gap {:.2e})",
            pass_str(j.pass),
            j.max_upper,
            j.max_diag_gap,
            j.max_det_gap
        ),
        None => println!("jacobian structure: skipped"),
    }
    for notice in &report.notices {
        println!("note: {notice}");
    }
    println!("overall: {}", pass_str(report.pass));
}

fn cmd_check(cli: &Cli, target: &Path) -> Result<()> {
    let opts = CheckOptions {
        seed: cli.seed.unwrap_or(0),
        ..CheckOptions::default()
    };

    let (ds, resolved_cfg) = if target.is_dir() {
        let ds = Dataset::load(target)?;
        if cli.dry_run {
            println!(
                "dry run: would check {} rows across {} segments",
                ds.rows(),
                ds.m
            );
            return Ok(());
        }
        (ds, None)
    } else {
        let mut cfg = ExperimentConfig::from_path(target)?;
        if let Some(seed) = cli.seed {
            cfg.seeds = vec![seed];
        }
        cfg.validate()?;
        if cli.dry_run {
            println!(
                "dry run: would generate {} rows in memory and run the assumption checks",
                cfg.noise.segments * cfg.noise.samples_per_segment
            );
            return Ok(());
        }
        let ds = gen_dataset(&cfg.gen_options(cfg.seeds[0]))?;
        (ds, Some(cfg))
    };

    let report = check_dataset(&ds, &opts)?;
    print_check_report(&report);
    if let Some(out) = cli.out.as_deref() {
        prepare_out(out, cli.force)?;
        io::write_json(&out.join(REPORT_FILE), &report)?;
        if let Some(cfg) = &resolved_cfg {
            io::write_json(&out.join(CONFIG_FILE), cfg)?;
        }
        println!("wrote {REPORT_FILE} -> {}", out.display());
    }
    Ok(())
}

// ── counterexample ───────────────────────────────────────────────────────

fn cmd_counterexample(cli: &Cli, segments: usize, samples: usize, mlp2_constant: bool) -> Result<()> {
    let out = required_out(cli)?;
    let seed = cli.seed.unwrap_or(0);

    if cli.dry_run {
        println!(
            "dry run: would probe {} rows ({} segments x {} samples) and write {REPORT_FILE} to {}",
            segments * samples,
            segments,
            samples,
            out.display()
        );
        return Ok(());
    }

    let pair = build_counterexample(segments, samples, mlp2_constant, seed)?;
    prepare_out(out, cli.force)?;
    io::write_json(&out.join(REPORT_FILE), &pair.report)?;
    io::write_tensor(&out.join("z.lanm"), &pair.z)?;
    io::write_tensor(&out.join("z_alt.lanm"), &pair.z_alt)?;
    io::write_tensor(&out.join("x.lanm"), &pair.x)?;
    io::write_tensor(&out.join("x_alt.lanm"), &pair.x_alt)?;
    println!(
        "max |x - x'| = {:.3e} over {} probes; corr(z2, z2') = {:.4} -> {}",
        pair.report.max_observation_gap,
        pair.z.rows(),
        pair.report.latent_correlation,
        out.display()
    );
    Ok(())
}
