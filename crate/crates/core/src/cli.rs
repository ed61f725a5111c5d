//! Command-line front end. `main.rs` only parses arguments and maps errors to
//! exit codes; everything else lives here so tests can drive it directly.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::bench::{self, EncoderKind, ScalingSample};
use crate::config::RunConfig;
use crate::dataset::{load_dataset, Dataset, EvalMode, NegativeMode};
use crate::error::{Error, Result};
use crate::evaluator::{evaluate, evaluate_groups, EvalSettings, GroupRule, MetricReport};
use crate::model::{checkpoint_schedule, Ablations, Model};
use crate::numerics::{self, checkpoint, Tensor};
use crate::trainer::{fit, write_log, TrainOutcome};

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const RESOLVED_CONFIG_FILE: &str = "resolved_config.conf";
pub const TRAIN_LOG_FILE: &str = "train_log.csv";
pub const METRICS_FILE: &str = "metrics.csv";
pub const RANKS_FILE: &str = "ranks.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Parser)]
#[command(name = "convrec", version, about = "Train, evaluate and benchmark the ConvRec recommender")]
pub struct Cli {
    /// Configuration file with `key = value` lines.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Built-in hyperparameter preset: beauty, games, fashion or men.
    #[arg(long, global = true)]
    pub preset: Option<String>,
    /// Seed for initialisation, sampling and dropout.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Worker threads for matrix products.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Extra `key=value` overrides applied after the config file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone, Default)]
pub struct DataArgs {
    /// Interaction file in JSON lines.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// JSON lines of `{"item", "attrs"}` overriding per-interaction attributes.
    #[arg(long)]
    pub item_attributes: Option<PathBuf>,
    /// JSON object mapping each user to its validation and test positions.
    #[arg(long)]
    pub split_manifest: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
#[value(rename_all = "snake_case")]
pub enum SweepAxis {
    Embedding,
    Dropout,
    KernelSchedule,
    SeqLength,
}

impl SweepAxis {
    fn key(self) -> &'static str {
        match self {
            SweepAxis::Embedding => "embedding_dim",
            SweepAxis::Dropout => "dropout",
            SweepAxis::KernelSchedule => "schedule",
            SweepAxis::SeqLength => "seq_len",
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write the best checkpoint, log and test metrics.
    Train {
        #[command(flatten)]
        data: DataArgs,
    },
    /// Score a saved checkpoint.
    Evaluate {
        #[command(flatten)]
        data: DataArgs,
        /// Checkpoint written by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// `sampled:N` or `all_items`.
        #[arg(long)]
        protocol: Option<String>,
        /// Cut-off for HR@k and NDCG@k.
        #[arg(long)]
        k: Option<usize>,
        /// `top_bottom:<q>` or `seq_length:<L>,<L>,...`.
        #[arg(long)]
        groups: Option<String>,
    },
    /// Time and measure memory of the pyramid against an attention block.
    Bench,
    /// Train each ablated variant and the base model with the same seed.
    Ablate {
        #[command(flatten)]
        data: DataArgs,
        /// Comma list of ablation flags.
        #[arg(long, default_value = "no_intervals,no_residuals,single_conv,avgpool_only")]
        flags: String,
    },
    /// Train and evaluate once per value of one hyperparameter.
    Sweep {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, value_enum)]
        axis: SweepAxis,
        /// Values separated by commas, or by semicolons for schedules.
        #[arg(long, num_args = 1..)]
        values: Vec<String>,
    },
    /// Print parameter shapes, residual weights and schedule of a checkpoint.
    Inspect {
        /// Checkpoint to summarise.
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    command: &'a str,
    seed: u64,
    files: Vec<String>,
}

/// Tracks the files a command writes under the output directory.
pub struct Output {
    dir: PathBuf,
    files: Vec<String>,
}

impl Output {
    pub fn create(dir: &Path) -> Result<Output> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
        Ok(Output {
            dir: dir.to_path_buf(),
            files: Vec::new(),
        })
    }

    pub fn path(&mut self, name: &str) -> PathBuf {
        if !self.files.iter().any(|f| f == name) {
            self.files.push(name.to_string());
        }
        self.dir.join(name)
    }

    pub fn write(&mut self, name: &str, contents: &str) -> Result<()> {
        let path = self.path(name);
        std::fs::write(&path, contents).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn finish(mut self, command: &str, seed: u64) -> Result<()> {
        let manifest = Manifest {
            command,
            seed,
            files: self.files.clone(),
        };
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        self.write(MANIFEST_FILE, &(text + "\n"))
    }
}

/// Resolves the configuration: defaults, preset, file, `--set`, then flags.
pub fn resolve_config(cli: &Cli, data: Option<&DataArgs>, fallback_file: Option<&Path>) -> Result<RunConfig> {
    let mut cfg = match &cli.preset {
        Some(name) => RunConfig::preset(name)?,
        None => RunConfig::default(),
    };
    match (&cli.config, fallback_file) {
        (Some(path), _) => cfg.apply_file(path)?,
        (None, Some(path)) if path.exists() => cfg.apply_file(path)?,
        _ => {}
    }
    for o in &cli.overrides {
        cfg.apply_override(o)?;
    }
    if let Some(seed) = cli.seed {
        cfg.set("seed", &seed.to_string())?;
    }
    if let Some(t) = cli.threads {
        cfg.threads = t;
    }
    if let Some(d) = data {
        if let Some(p) = &d.data {
            cfg.data = Some(p.clone());
        }
        if let Some(p) = &d.item_attributes {
            cfg.item_attributes = Some(p.clone());
        }
        if let Some(p) = &d.split_manifest {
            cfg.split_manifest = Some(p.clone());
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Train { data } => {
            let cfg = resolve_config(cli, Some(data), None)?;
            numerics::set_threads(cfg.threads);
            let ds = load_dataset(&cfg.data_paths()?, &cfg.dataset_options())?;
            let report = cmd_train(&cfg, &ds, &cli.out)?;
            println!("{}", report.pretty());
            Ok(())
        }
        Command::Evaluate {
            data,
            checkpoint,
            protocol,
            k,
            groups,
        } => {
            let fallback = checkpoint.parent().map(|d| d.join(RESOLVED_CONFIG_FILE));
            let mut cfg = resolve_config(cli, Some(data), fallback.as_deref())?;
            if let Some(p) = protocol {
                cfg.protocol = NegativeMode::parse(p)?;
            }
            if let Some(k) = k {
                cfg.set("k", &k.to_string())?;
            }
            cfg.validate()?;
            let groups = groups.as_deref().map(GroupRule::parse).transpose()?;
            numerics::set_threads(cfg.threads);
            let ds = load_dataset(&cfg.data_paths()?, &cfg.dataset_options())?;
            let report = cmd_evaluate(&cfg, &ds, checkpoint, groups.as_ref(), &cli.out)?;
            println!("{}", report.pretty());
            Ok(())
        }
        Command::Bench => {
            let cfg = resolve_config(cli, None, None)?;
            numerics::set_threads(cfg.threads);
            let (_, fits) = cmd_bench(&cfg, &cli.out)?;
            for (encoder, metric, fit) in fits {
                println!("{encoder:>9} {metric:<12} slope {:.3} (R² {:.3})", fit.slope, fit.r_squared);
            }
            Ok(())
        }
        Command::Ablate { data, flags } => {
            let cfg = resolve_config(cli, Some(data), None)?;
            numerics::set_threads(cfg.threads);
            let flags = Ablations::parse_names(flags)?;
            let ds = load_dataset(&cfg.data_paths()?, &cfg.dataset_options())?;
            for row in cmd_ablate(&cfg, &ds, &flags, &cli.out)? {
                println!("{:<16} HR@{k} {:.4}  NDCG@{k} {:.4}", row.label, row.hr, row.ndcg, k = cfg.k);
            }
            Ok(())
        }
        Command::Sweep { data, axis, values } => {
            let cfg = resolve_config(cli, Some(data), None)?;
            numerics::set_threads(cfg.threads);
            let values = split_sweep_values(*axis, values)?;
            let ds = load_dataset(&cfg.data_paths()?, &cfg.dataset_options())?;
            for row in cmd_sweep(&cfg, &ds, *axis, &values, &cli.out)? {
                println!("{:<28} HR@{k} {:.4}  NDCG@{k} {:.4}", row.label, row.hr, row.ndcg, k = cfg.k);
            }
            Ok(())
        }
        Command::Inspect { checkpoint } => {
            let summary = cmd_inspect(checkpoint, &cli.out, cli.seed.unwrap_or(RunConfig::default().seed()))?;
            print!("{summary}");
            Ok(())
        }
    }
}

pub fn test_settings(cfg: &RunConfig) -> EvalSettings {
    EvalSettings {
        mode: EvalMode::Test,
        negatives: cfg.protocol,
        k: cfg.k,
        seq_len: cfg.model.seq_len,
        seed: cfg.seed(),
    }
}

/// Fits a fresh model and scores it on the test positions.
pub fn train_and_evaluate(cfg: &RunConfig, ds: &Dataset) -> Result<(Model, TrainOutcome, MetricReport)> {
    let mut model = Model::for_dataset(cfg.model.clone(), ds, cfg.seed())?;
    log::info!(
        "model with {} parameters, ablations: {}",
        model.param_count(),
        cfg.model.ablations
    );
    let outcome = fit(&mut model, ds, &cfg.train, |_| {})?;
    let report = evaluate(&model, ds, &test_settings(cfg))?;
    Ok((model, outcome, report))
}

pub fn cmd_train(cfg: &RunConfig, ds: &Dataset, out_dir: &Path) -> Result<MetricReport> {
    let mut out = Output::create(out_dir)?;
    out.write(RESOLVED_CONFIG_FILE, &cfg.to_text())?;
    let (model, outcome, report) = train_and_evaluate(cfg, ds)?;
    model.save(&out.path(CHECKPOINT_FILE))?;
    write_log(&outcome.log, &out.path(TRAIN_LOG_FILE))?;
    report.write_csv(&out.path(METRICS_FILE))?;
    report.write_ranks(ds, &out.path(RANKS_FILE))?;
    out.finish("train", cfg.seed())?;
    Ok(report)
}

pub fn cmd_evaluate(
    cfg: &RunConfig,
    ds: &Dataset,
    checkpoint: &Path,
    groups: Option<&GroupRule>,
    out_dir: &Path,
) -> Result<MetricReport> {
    let mut model = Model::for_dataset(cfg.model.clone(), ds, cfg.seed())?;
    model.load(checkpoint)?;
    let settings = test_settings(cfg);
    let report = match groups {
        Some(rule) => evaluate_groups(&model, ds, &settings, rule)?,
        None => evaluate(&model, ds, &settings)?,
    };
    let mut out = Output::create(out_dir)?;
    out.write(RESOLVED_CONFIG_FILE, &cfg.to_text())?;
    report.write_csv(&out.path(METRICS_FILE))?;
    report.write_ranks(ds, &out.path(RANKS_FILE))?;
    out.finish("evaluate", cfg.seed())?;
    Ok(report)
}

pub type SlopeLine = (&'static str, &'static str, bench::LogLogFit);

pub fn cmd_bench(cfg: &RunConfig, out_dir: &Path) -> Result<(Vec<ScalingSample>, Vec<SlopeLine>)> {
    let samples = bench::measure_scaling(&cfg.bench, |s| {
        log::info!(
            "{} L={} {:.4}s peak {} bytes{}",
            s.encoder.name(),
            s.len,
            s.wall_seconds,
            s.peak_bytes,
            if s.out_of_memory { " (out of memory)" } else { "" }
        )
    })?;
    let mut fits = Vec::new();
    let mut slopes = String::from("encoder,metric,slope,r_squared\n");
    for kind in [EncoderKind::Cds, EncoderKind::Attention] {
        let metrics: [(&str, fn(&ScalingSample) -> f64); 3] = [
            ("wall_seconds", |s| s.wall_seconds),
            ("peak_bytes", |s| s.peak_bytes as f64),
            ("mac_count", |s| s.mac_count as f64),
        ];
        for (name, metric) in metrics {
            match bench::fit_loglog_slope(&bench::series(&samples, kind, metric)) {
                Ok(fit) => {
                    writeln!(slopes, "{},{name},{},{}", kind.name(), fit.slope, fit.r_squared).expect("string write");
                    fits.push((kind.name(), name, fit));
                }
                Err(e) => log::warn!("no {name} slope for {}: {e}", kind.name()),
            }
        }
    }
    let mut out = Output::create(out_dir)?;
    out.write(RESOLVED_CONFIG_FILE, &cfg.to_text())?;
    bench::write_csv(&samples, &out.path("bench.csv"))?;
    bench::write_dat(&samples, &out.path("bench.dat"))?;
    out.write("slopes.csv", &slopes)?;
    out.finish("bench", cfg.seed())?;
    Ok((samples, fits))
}

/// One line of an ablation or sweep table.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub label: String,
    pub hr: f64,
    pub ndcg: f64,
}

/// Variants in table order, each with the base ablations plus one flag.
/// The base model comes last.
pub fn ablation_variants(base: &Ablations, flags: &[&str]) -> Result<Vec<(String, Ablations)>> {
    let mut rows = Vec::new();
    for &name in flags {
        let mut a = *base;
        a.set(name)?;
        a.validate()?;
        let label = match name {
            "no_intervals" => "w/o Intervals",
            "no_residuals" => "w/o Residuals",
            "single_conv" => "w/ one Conv",
            _ => "w/ AvgPool",
        };
        rows.push((label.to_string(), a));
    }
    rows.push(("ConvRec".to_string(), *base));
    Ok(rows)
}

fn write_rows(out: &mut Output, name: &str, header: &str, rows: &[ResultRow]) -> Result<()> {
    let path = out.path(name);
    let mut w = csv::Writer::from_path(&path).map_err(|e| crate::evaluator::csv_error(&path, e))?;
    w.write_record([header, "hr@10", "ndcg@10"]).map_err(|e| crate::evaluator::csv_error(&path, e))?;
    for r in rows {
        w.write_record([r.label.clone(), r.hr.to_string(), r.ndcg.to_string()])
            .map_err(|e| crate::evaluator::csv_error(&path, e))?;
    }
    w.flush().map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

fn ranked_at_ten(cfg: &RunConfig, ds: &Dataset) -> Result<(f64, f64)> {
    let mut c = cfg.clone();
    c.k = 10;
    let (_, _, report) = train_and_evaluate(&c, ds)?;
    Ok((report.hr_at_k, report.ndcg_at_k))
}

pub fn cmd_ablate(cfg: &RunConfig, ds: &Dataset, flags: &[&str], out_dir: &Path) -> Result<Vec<ResultRow>> {
    let variants = ablation_variants(&cfg.model.ablations, flags)?;
    let mut out = Output::create(out_dir)?;
    out.write(RESOLVED_CONFIG_FILE, &cfg.to_text())?;
    let mut rows = Vec::new();
    for (label, ablations) in variants {
        log::info!("ablation row {label}");
        let mut c = cfg.clone();
        c.model.ablations = ablations;
        let (hr, ndcg) = ranked_at_ten(&c, ds)?;
        rows.push(ResultRow { label, hr, ndcg });
    }
    write_rows(&mut out, "ablation.csv", "variant", &rows)?;
    out.finish("ablate", cfg.seed())?;
    Ok(rows)
}

/// Splits raw `--values` arguments. Schedules are separated by `;` since
/// they contain commas themselves.
pub fn split_sweep_values(axis: SweepAxis, raw: &[String]) -> Result<Vec<String>> {
    let values: Vec<String> = if axis == SweepAxis::KernelSchedule {
        raw.iter().flat_map(|r| r.split(';')).map(|v| v.trim().to_string()).collect()
    } else {
        raw.iter()
            .flat_map(|r| r.split(','))
            .map(|v| v.trim_matches(|c: char| c.is_whitespace() || c == '[' || c == ']').to_string())
            .collect()
    };
    let values: Vec<String> = values.into_iter().filter(|v| !v.is_empty()).collect();
    if values.is_empty() {
        return Err(Error::Config("sweep needs at least one value in --values".into()));
    }
    Ok(values)
}

pub fn cmd_sweep(cfg: &RunConfig, ds: &Dataset, axis: SweepAxis, values: &[String], out_dir: &Path) -> Result<Vec<ResultRow>> {
    if values.is_empty() {
        return Err(Error::Config("sweep needs at least one value in --values".into()));
    }
    let mut configs = Vec::new();
    for v in values {
        let mut c = cfg.clone();
        c.set(axis.key(), v)?;
        c.validate()?;
        configs.push((v.clone(), c));
    }
    let mut out = Output::create(out_dir)?;
    out.write(RESOLVED_CONFIG_FILE, &cfg.to_text())?;
    let mut rows = Vec::new();
    for (label, c) in configs {
        log::info!("sweep {} = {label}", axis.key());
        let (hr, ndcg) = ranked_at_ten(&c, ds)?;
        rows.push(ResultRow { label, hr, ndcg });
    }
    write_rows(&mut out, "sweep.csv", "value", &rows)?;
    out.finish("sweep", cfg.seed())?;
    Ok(rows)
}

/// Human-readable summary of checkpoint records.
pub fn summarize_checkpoint(records: &[(String, Tensor)]) -> String {
    let mut s = String::new();
    let mut total = 0usize;
    let mut alphas = Vec::new();
    for (name, t) in records.iter().filter(|(n, _)| !n.starts_with("meta.")) {
        total += t.len();
        writeln!(s, "{name:<24} {:?}", t.shape()).expect("string write");
        if name.ends_with(".alpha1") || name.ends_with(".alpha2") {
            alphas.push((name.as_str(), t.data()[0]));
        }
    }
    writeln!(s, "parameters: {total}").expect("string write");
    for (name, v) in alphas {
        writeln!(s, "{name} = {v}").expect("string write");
    }
    match checkpoint_schedule(records) {
        Some((len, layers)) if layers.is_empty() => writeln!(s, "seq_len: {len}, no pyramid"),
        Some((len, layers)) => writeln!(s, "seq_len: {len}, schedule: {}", crate::config::format_schedule(&layers)),
        None => writeln!(s, "schedule: unknown"),
    }
    .expect("string write");
    s
}

pub fn cmd_inspect(path: &Path, out_dir: &Path, seed: u64) -> Result<String> {
    let records = checkpoint::read(path)?;
    let summary = summarize_checkpoint(&records);
    let mut out = Output::create(out_dir)?;
    out.write("inspect.txt", &summary)?;
    out.finish("inspect", seed)?;
    Ok(summary)
}
