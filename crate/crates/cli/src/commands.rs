use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use cro_core::problems::{
    data::save_csv, synth_battery_data, BatterySynthConfig, Dataset, GmmSpec,
};
use cro_core::train::{evaluate, infer, train, write_metrics_csv, MetricsRow, TrainReport};
use cro_core::CroError;
use log::info;
use serde::Serialize;

use crate::args::{BenchArgs, CalibrateArgs, EvalArgs, GenDataArgs, SolveArgs, TrainArgs};
use crate::checkpoint::{Checkpoint, Metadata};
use crate::config::{hex_digest, load_dataset, RunConfig, TaskKind};
use crate::error::{CliError, Result};

fn guard_file(path: &Path, force: bool) -> Result<()> {
    if path.exists() && !force {
        return Err(CliError::Usage(format!(
            "{} already exists (use --force to overwrite)",
            path.display()
        )));
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    Ok(())
}

fn guard_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.is_file() {
        return Err(CliError::Usage(format!(
            "{} is a file, expected a directory",
            dir.display()
        )));
    }
    if dir.exists() && fs::read_dir(dir)?.next().is_some() && !force {
        return Err(CliError::Usage(format!(
            "{} is not empty (use --force to overwrite)",
            dir.display()
        )));
    }
    fs::create_dir_all(dir)?;
    Ok(())
}

fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path
        .file_name()
        .map(|n| n.to_os_string())
        .unwrap_or_default();
    name.push(suffix);
    path.with_file_name(name)
}

#[derive(Serialize)]
struct BuildInfo<'a> {
    build: String,
    command: &'a str,
    config_sha256: String,
}

/// Writes the resolved config and the build identifier under `base`
/// (`base.config.toml`, `base.build.json`).
fn write_provenance(base: &Path, command: &str, resolved_toml: &str) -> Result<()> {
    fs::write(sidecar(base, ".config.toml"), resolved_toml)?;
    let info = BuildInfo {
        build: crate::build_id(),
        command,
        config_sha256: hex_digest(resolved_toml.as_bytes()),
    };
    fs::write(
        sidecar(base, ".build.json"),
        serde_json::to_string_pretty(&info)?,
    )?;
    Ok(())
}

fn apply_overrides(
    cfg: &mut RunConfig,
    seed: Option<u64>,
    threads: Option<usize>,
    epochs: Option<usize>,
) {
    if let Some(s) = seed {
        cfg.seeds = vec![s];
    }
    if let Some(t) = threads {
        cfg.train.threads = t;
    }
    if let Some(e) = epochs {
        cfg.train.epochs = e;
        cfg.train.pretrain_epochs = e;
    }
}

#[derive(Serialize)]
struct GenConfig {
    task: TaskKind,
    rows: usize,
    seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    gmm: Option<GmmSpec>,
    #[serde(skip_serializing_if = "Option::is_none")]
    battery: Option<BatterySynthConfig>,
}

fn summarize(ds: &Dataset) -> String {
    let n = ds.len() as f64;
    let cols: Vec<String> = (0..ds.y_dim())
        .map(|j| {
            let col: Vec<f64> = (0..ds.len()).map(|i| ds.y.get(i, j)).collect();
            let mean = col.iter().sum::<f64>() / n;
            let sd =
                (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0)).sqrt();
            format!("{mean:.3}±{sd:.3}")
        })
        .collect();
    let shown = if cols.len() > 4 {
        format!("{} ... {}", cols[..2].join(" "), cols[cols.len() - 1])
    } else {
        cols.join(" ")
    };
    format!(
        "{} rows, {} features, {} targets (mean±sd: {shown})",
        ds.len(),
        ds.x_dim(),
        ds.y_dim()
    )
}

pub fn gen_data(a: &GenDataArgs) -> Result<()> {
    let out = a.out.clone().unwrap_or_else(|| {
        PathBuf::from(match a.task {
            TaskKind::Portfolio => "portfolio.csv",
            TaskKind::Battery => "battery.csv",
        })
    });
    guard_file(&out, a.force)?;
    let (ds, gen) = match a.task {
        TaskKind::Portfolio => {
            let spec = GmmSpec::default();
            let ds = spec.sample(a.n, a.seed)?;
            (
                ds,
                GenConfig {
                    task: a.task,
                    rows: a.n,
                    seed: a.seed,
                    gmm: Some(spec),
                    battery: None,
                },
            )
        }
        TaskKind::Battery => {
            let synth = BatterySynthConfig::default();
            let ds = synth_battery_data(a.seed, a.days, &synth)?;
            (
                ds,
                GenConfig {
                    task: a.task,
                    rows: a.days,
                    seed: a.seed,
                    gmm: None,
                    battery: Some(synth),
                },
            )
        }
    };
    save_csv(&ds, &out, a.task.schema())?;
    write_provenance(&out, "gen-data", &toml::to_string(&gen)?)?;
    println!("{}: {}", out.display(), summarize(&ds));
    Ok(())
}

fn write_history(path: &Path, report: &TrainReport) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(CroError::from)?;
    for h in &report.history {
        w.serialize(h).map_err(CroError::from)?;
    }
    w.flush()?;
    Ok(())
}

pub fn train_cmd(a: &TrainArgs) -> Result<()> {
    let mut cfg = RunConfig::load(&a.config)?;
    apply_overrides(&mut cfg, a.seed, a.threads, a.epochs);
    let seed = cfg.seeds[0];
    cfg.seeds = vec![seed];
    cfg.train.seed = seed;
    cfg.validate()?;
    let ds = cfg.load_data(&a.data)?;
    let sp = cfg.split.apply(&ds, seed)?;
    let task = cfg.task_spec(ds.y_dim())?;
    guard_dir(&a.out, a.force)?;

    let (tr, cal, te) = (
        ds.subset(&sp.train),
        ds.subset(&sp.cal),
        ds.subset(&sp.test),
    );
    let schema = cfg.task.schema();
    save_csv(&tr, &a.out.join("train.csv"), schema)?;
    save_csv(&cal, &a.out.join("cal.csv"), schema)?;
    save_csv(&te, &a.out.join("test.csv"), schema)?;

    let start = Instant::now();
    let (pred, report) = train(&cfg.train, &tr, &task)?;
    let ckpt = Checkpoint {
        predictor: pred,
        metadata: Metadata::new(&cfg, seed, &report)?,
    };
    let path = a.out.join("model.ckpt");
    ckpt.save(&path)?;
    write_history(&a.out.join("history.csv"), &report)?;
    write_provenance(&a.out.join("run"), "train", &cfg.to_toml()?)?;
    println!(
        "trained {} {} on {} rows in {:.1}s ({} epochs); wrote {}",
        cfg.train.method,
        cfg.train.representation,
        tr.len(),
        start.elapsed().as_secs_f64(),
        report.epochs_run(),
        path.display()
    );
    Ok(())
}

pub fn calibrate_cmd(a: &CalibrateArgs) -> Result<()> {
    let mut ckpt = Checkpoint::load(&a.checkpoint)?;
    let alpha = a.alpha.unwrap_or(ckpt.metadata.config.alphas[0]);
    let out = a.out.clone().unwrap_or_else(|| a.checkpoint.clone());
    guard_file(&out, a.force)?;
    let cal = load_dataset(&a.data, ckpt.metadata.config.task)?;
    let rec = ckpt.predictor.calibrate(&cal, alpha)?;
    rec.finite_q()?;
    ckpt.save(&out)?;
    write_provenance(&out, "calibrate", &ckpt.metadata.config.to_toml()?)?;
    println!(
        "alpha {alpha}: q = {:.6} (rank {} of {}); wrote {}",
        rec.q,
        rec.k,
        rec.m,
        out.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct SolveOutput {
    alpha: f64,
    q: f64,
    q_raised: bool,
    robust_value: f64,
    z: Vec<f64>,
}

fn parse_row(text: &str) -> Result<Vec<f64>> {
    text.split(',')
        .map(|t| {
            t.trim()
                .parse::<f64>()
                .map_err(|e| CliError::Usage(format!("bad feature value `{t}`: {e}")))
        })
        .collect()
}

pub fn solve_cmd(a: &SolveArgs) -> Result<()> {
    let mut ckpt = Checkpoint::load(&a.checkpoint)?;
    let task_kind = ckpt.metadata.config.task;
    let x = match (&a.x, &a.x_csv, a.row) {
        (Some(text), _, _) => parse_row(text)?,
        (None, Some(path), Some(row)) => {
            let ds = load_dataset(path, task_kind)?;
            if row >= ds.len() {
                return Err(CliError::Usage(format!(
                    "row {row} out of range ({} rows)",
                    ds.len()
                )));
            }
            ds.x.row_slice(row).to_vec()
        }
        _ => return Err(CliError::Usage("give --x or --x-csv with --row".into())),
    };
    if let Some(out) = &a.out {
        guard_file(out, a.force)?;
    }
    let cal = load_dataset(&a.cal, task_kind)?;
    ckpt.predictor.calibrate(&cal, a.alpha)?;
    let task = ckpt.task()?;
    let d = infer(
        &ckpt.predictor,
        &task,
        &x,
        &ckpt.metadata.config.train.solver,
    )?;
    let json = serde_json::to_string_pretty(&SolveOutput {
        alpha: a.alpha,
        q: d.q,
        q_raised: d.q_raised,
        robust_value: d.robust_value,
        z: d.z,
    })?;
    match &a.out {
        Some(out) => {
            fs::write(out, json)?;
            write_provenance(out, "solve", &ckpt.metadata.config.to_toml()?)?;
        }
        None => println!("{json}"),
    }
    Ok(())
}

fn print_metrics(m: &MetricsRow, violations: usize, raised: usize) {
    println!(
        "{} {} alpha {} seed {}: task loss {:.4} ± {:.4}, coverage {:.4}, robust value {:.4}, \
         {violations} bound violations, {raised} raised thresholds, {:.1}s",
        m.method,
        m.representation,
        m.alpha,
        m.seed,
        m.task_loss_mean,
        m.task_loss_std,
        m.coverage,
        m.robust_value_mean,
        m.wall_time_s
    );
}

pub fn eval_cmd(a: &EvalArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    ckpt.predictor.record()?;
    guard_file(&a.out, a.force)?;
    let test = load_dataset(&a.data, ckpt.metadata.config.task)?;
    let task = ckpt.task()?;
    let seed = a.seed.unwrap_or(ckpt.metadata.seed);
    let cfg = &ckpt.metadata.config;
    let r = evaluate(
        &ckpt.predictor,
        &test,
        &task,
        &cfg.train.solver,
        seed,
        a.threads,
    )?;
    write_metrics_csv(&a.out, std::slice::from_ref(&r.metrics))?;
    write_provenance(&a.out, "eval", &cfg.to_toml()?)?;
    print_metrics(&r.metrics, r.bound_violations, r.raised);
    Ok(())
}

pub fn bench_cmd(a: &BenchArgs) -> Result<()> {
    let mut cfg = RunConfig::load(&a.config)?;
    apply_overrides(&mut cfg, a.seed, a.threads, a.epochs);
    cfg.validate()?;
    let ds = cfg.load_data(&a.data)?;
    let task = cfg.task_spec(ds.y_dim())?;
    guard_dir(&a.out, a.force)?;
    write_provenance(&a.out.join("run"), "bench", &cfg.to_toml()?)?;
    let mut rows = Vec::new();
    let mut violations = 0;
    for &seed in &cfg.seeds {
        let sp = cfg.split.apply(&ds, seed)?;
        let (tr, cal, te) = (
            ds.subset(&sp.train),
            ds.subset(&sp.cal),
            ds.subset(&sp.test),
        );
        for run in cfg.bench_runs() {
            for &alpha in &cfg.alphas {
                let mut tc = cfg.train.clone();
                tc.method = run.method;
                tc.representation = run.representation;
                tc.alpha = alpha;
                tc.seed = seed;
                info!(
                    "bench: seed {seed} {} {} alpha {alpha}",
                    run.method, run.representation
                );
                let (mut pred, _) = train(&tc, &tr, &task)?;
                pred.calibrate(&cal, alpha)?;
                let r = evaluate(&pred, &te, &task, &tc.solver, seed, tc.threads)?;
                print_metrics(&r.metrics, r.bound_violations, r.raised);
                violations += r.bound_violations;
                rows.push(r.metrics);
            }
        }
    }
    let path = a.out.join("metrics.csv");
    write_metrics_csv(&path, &rows)?;
    println!(
        "{} runs, {violations} bound violations; wrote {}",
        rows.len(),
        path.display()
    );
    Ok(())
}
