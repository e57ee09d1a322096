//! Command-line front end: `train`, `eval` and `report`.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::config;
use crate::error::{Error, Result};
use crate::eval::{self, Level};
use crate::persist::{self, RunManifest};
use crate::trainer::{self, ablate, Component, Report, RunConfig, RunSink, Summary};

pub const OUT_ENV: &str = "IUF_OUT";

#[derive(Parser, Debug)]
#[command(name = "iuf", version, about = "Object-incremental defect inspection")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train through every protocol step and write a run directory.
    Train {
        /// key=value configuration file; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        protocol: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        /// Comma-separated components to switch off: oasa, scl, us.
        #[arg(long, value_delimiter = ',')]
        ablate: Vec<String>,
        /// Run directory. Defaults to a name under $IUF_OUT (or ./runs).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Re-evaluate one step of a finished run from its checkpoint.
    Eval {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        step: usize,
    },
    /// Compare ACC and FM across runs of the same protocol.
    Report {
        runs: Vec<PathBuf>,
        /// Where to write the JSON summary (default: summary.json next to the first run).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Parse arguments, run the command and return the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let result = match cli.command {
        Command::Train {
            config,
            protocol,
            seed,
            ablate,
            out,
            epochs,
        } => cmd_train(config.as_deref(), protocol, seed, &ablate, out, epochs).map(|_| ()),
        Command::Eval { run, step } => cmd_eval(&run, step),
        Command::Report { runs, out } => cmd_report(&runs, out.as_deref()),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn default_run_dir(cfg: &RunConfig) -> PathBuf {
    let root = std::env::var_os(OUT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"));
    let mut name = format!(
        "{}_seed{}",
        cfg.protocol.replace(['×', 'x', 'X'], "x"),
        cfg.seed
    );
    for a in cfg.ablation.names() {
        name.push_str("_wo-");
        name.push_str(&a);
    }
    root.join(name)
}

fn prepare_dir(dir: &Path) -> Result<()> {
    if dir.exists() {
        let empty = std::fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .next()
            .is_none();
        if !empty {
            if !dir.join("config.snapshot").exists() {
                return Err(Error::config(
                    "--out",
                    format!("{} exists and is not a run directory", dir.display()),
                ));
            }
            std::fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn label(cfg: &RunConfig) -> String {
    let names = cfg.ablation.names();
    if names.is_empty() {
        "full".into()
    } else {
        format!("w/o {}", names.join("+"))
    }
}

fn write_report(
    root: &Path,
    cfg: &RunConfig,
    steps: Vec<trainer::StepRecord>,
    scores: eval::ScoreMatrix,
) -> Result<Summary> {
    let summary = trainer::summarize(&scores);
    let report = Report {
        protocol: cfg.protocol.clone(),
        seed: cfg.seed,
        ablated: cfg.ablation.names(),
        steps,
        scores,
        summary: summary.clone(),
    };
    persist::write_json_file(&root.join("report.json"), &report)?;
    Ok(summary)
}

fn write_manifest(root: &Path, cfg: &RunConfig, started: u64) -> Result<()> {
    let mut files = persist::inventory(root)?;
    if !files.iter().any(|f| f == "manifest.json") {
        files.push("manifest.json".into());
        files.sort();
    }
    let manifest = RunManifest {
        config_hash: config::config_hash(cfg),
        seed: cfg.seed,
        derived_seeds: trainer::derived_seeds(cfg.seed),
        version: env!("CARGO_PKG_VERSION").to_string(),
        ablated: cfg.ablation.names(),
        started_unix: started,
        finished_unix: persist::unix_now(),
        files,
    };
    persist::write_run_manifest(root, &manifest)
}

/// Build the effective config from a file plus command-line overrides.
pub fn resolve_config(
    config_path: Option<&Path>,
    protocol: Option<String>,
    seed: Option<u64>,
    ablations: &[String],
    epochs: Option<usize>,
) -> Result<RunConfig> {
    let (mut cfg, file_sets_out) = match config_path {
        Some(p) => {
            let bytes = persist::read_file(p)?;
            let text = String::from_utf8(bytes).map_err(|e| Error::Format {
                path: p.to_path_buf(),
                message: e.to_string(),
            })?;
            let map = config::parse_kv(&text)?;
            (config::from_map(&map)?, map.contains_key("run.out"))
        }
        None => (RunConfig::default(), false),
    };
    if let Some(p) = protocol {
        cfg.protocol = p;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(e) = epochs {
        cfg.epochs = e;
    }
    for name in ablations.iter().filter(|a| !a.trim().is_empty()) {
        let c: Component = name.parse()?;
        cfg = ablate(&cfg, c);
    }
    if !file_sets_out {
        cfg.out_dir = default_run_dir(&cfg);
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn cmd_train(
    config_path: Option<&Path>,
    protocol: Option<String>,
    seed: Option<u64>,
    ablations: &[String],
    out: Option<PathBuf>,
    epochs: Option<usize>,
) -> Result<PathBuf> {
    let mut cfg = resolve_config(config_path, protocol, seed, ablations, epochs)?;
    if let Some(o) = out {
        cfg.out_dir = o;
    }
    train_into(&cfg)?;
    Ok(cfg.out_dir)
}

/// Run `cfg` and populate `cfg.out_dir`.
pub fn train_into(cfg: &RunConfig) -> Result<Summary> {
    let started = persist::unix_now();
    // fail on data or protocol problems before touching the output directory
    trainer::load_data(cfg)?;
    let root = cfg.out_dir.as_path();
    prepare_dir(root)?;
    let snapshot = config::snapshot(cfg);
    persist::write_file(&root.join("config.snapshot"), snapshot.as_bytes())?;
    let hash = config::config_hash(cfg);
    let outcome = trainer::run_incremental(
        cfg,
        Some(RunSink {
            root,
            config_hash: &hash,
        }),
    )?;
    let summary = write_report(root, cfg, outcome.records, outcome.scores)?;
    write_manifest(root, cfg, started)?;
    println!("run written to {}", root.display());
    print_table(&cfg.protocol, &[(label(cfg), summary.clone())]);
    Ok(summary)
}

fn load_run_config(run: &Path) -> Result<RunConfig> {
    let path = run.join("config.snapshot");
    if !path.exists() {
        return Err(Error::config(
            "--run",
            format!("{} is not a run directory", run.display()),
        ));
    }
    let text = String::from_utf8(persist::read_file(&path)?).map_err(|e| Error::Format {
        path: path.clone(),
        message: e.to_string(),
    })?;
    let mut cfg = config::parse(&text)?;
    cfg.out_dir = run.to_path_buf();
    Ok(cfg)
}

pub fn cmd_eval(run: &Path, step: usize) -> Result<()> {
    let started = persist::unix_now();
    let cfg = load_run_config(run)?;
    let (objects, plan) = trainer::load_data(&cfg)?;
    if step == 0 || step > plan.len() {
        return Err(Error::config(
            "--step",
            format!(
                "step {step} outside 1..={} for protocol {}",
                plan.len(),
                cfg.protocol
            ),
        ));
    }
    let dir = trainer::step_dir(run, step);
    let (model, _) = persist::load_checkpoint(&dir.join("checkpoint"))?;
    if !dir.join("basis").join("manifest.json").exists() {
        return Err(Error::config(
            "--step",
            format!("no basis stored for step {step}"),
        ));
    }
    let seen = plan.seen_through(step - 1);
    let data = trainer::LoggedDataset::new(objects);
    let test = data.test_objects(step, &seen)?;
    let evaluation = eval::evaluate_step(&model, &test, !cfg.ablation.oasa)?;

    let metrics_path = run.join("metrics.csv");
    let mut scores = persist::read_metrics(&metrics_path)?;
    if scores.rows.len() < step {
        return Err(Error::config(
            "--step",
            format!("metrics.csv has no row for step {step}"),
        ));
    }
    scores.rows[step - 1] = evaluation.cells.clone();
    persist::write_file(&metrics_path, persist::render_metrics(&scores).as_bytes())?;
    if cfg.heatmaps {
        trainer::write_heatmaps(run, &evaluation)?;
    }
    let steps = match persist::read_json_file::<Report>(&run.join("report.json")) {
        Ok(r) => r.steps,
        Err(_) => Vec::new(),
    };
    let summary = write_report(run, &cfg, steps, scores)?;
    let manifest_started = persist::read_run_manifest(run)
        .map(|m| m.started_unix)
        .unwrap_or(started);
    write_manifest(run, &cfg, manifest_started)?;
    for c in &evaluation.cells {
        println!(
            "step {step} object {}: pixel {} image {}",
            c.object_id,
            fmt_opt(c.pixel),
            fmt_opt(c.image)
        );
    }
    print_table(&cfg.protocol, &[(label(&cfg), summary)]);
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |x| format!("{:.4}", x))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunSummary {
    pub run: PathBuf,
    pub label: String,
    pub seed: u64,
    pub summary: Summary,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Comparison {
    pub protocol: String,
    pub runs: Vec<RunSummary>,
}

pub fn compare(runs: &[PathBuf]) -> Result<Comparison> {
    if runs.is_empty() {
        return Err(Error::config(
            "runs",
            "at least one run directory is required",
        ));
    }
    let mut protocol: Option<String> = None;
    let mut out = Vec::new();
    for run in runs {
        let cfg = load_run_config(run)?;
        match &protocol {
            None => protocol = Some(cfg.protocol.clone()),
            Some(p) if *p != cfg.protocol => {
                return Err(Error::config(
                    "runs",
                    format!(
                        "{} uses protocol {} but earlier runs use {p}",
                        run.display(),
                        cfg.protocol
                    ),
                ))
            }
            Some(_) => {}
        }
        let scores = persist::read_metrics(&run.join("metrics.csv"))?;
        out.push(RunSummary {
            run: run.clone(),
            label: label(&cfg),
            seed: cfg.seed,
            summary: trainer::summarize(&scores),
        });
    }
    Ok(Comparison {
        protocol: protocol.expect("non-empty"),
        runs: out,
    })
}

pub fn cmd_report(runs: &[PathBuf], out: Option<&Path>) -> Result<()> {
    let cmp = compare(runs)?;
    let cols: Vec<(String, Summary)> = cmp
        .runs
        .iter()
        .map(|r| (format!("{} s{}", r.label, r.seed), r.summary.clone()))
        .collect();
    print_table(&cmp.protocol, &cols);
    let path = match out {
        Some(p) => p.to_path_buf(),
        None => runs[0]
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_default()
            .join("summary.json"),
    };
    persist::write_json_file(&path, &cmp)?;
    println!("summary written to {}", path.display());
    Ok(())
}

/// ACC (higher is better) and FM (lower is better) per level, one column per run.
pub fn render_table(protocol: &str, cols: &[(String, Summary)]) -> String {
    let width = cols.iter().map(|(l, _)| l.len()).max().unwrap_or(0).max(8);
    let mut s = format!("{:<12}", protocol);
    for (l, _) in cols {
        s.push_str(&format!("  {l:>width$}"));
    }
    s.push('\n');
    let rows: [(&str, Level, bool); 4] = [
        ("pixel ACC ↑", Level::Pixel, true),
        ("pixel FM ↓", Level::Pixel, false),
        ("image ACC ↑", Level::Image, true),
        ("image FM ↓", Level::Image, false),
    ];
    for (name, level, is_acc) in rows {
        s.push_str(&format!("{:<12}", name));
        for (_, sum) in cols {
            let l = match level {
                Level::Pixel => &sum.pixel,
                Level::Image => &sum.image,
            };
            let v = if is_acc { l.acc } else { l.fm };
            let cell = v.map_or_else(|| "n/a".to_string(), |x| format!("{:.2}", 100.0 * x));
            s.push_str(&format!("  {cell:>width$}"));
        }
        s.push('\n');
    }
    s
}

fn print_table(protocol: &str, cols: &[(String, Summary)]) {
    print!("{}", render_table(protocol, cols));
}
