use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use pmeta::config::ExperimentConfig;
use pmeta::cost::{self, CostQuery, Scenario};
use pmeta::runtime::{few_shot_adapt, AdaptOptions};
use pmeta::spec::NetworkSpec;
use pmeta::tasks::{Batch, TaskStream};
use pmeta::train::{meta_train_with, Mode, METRICS_HEADER};
use pmeta::{checkpoint, report, Error, Result};

/// Few-shot meta-learning with sparse adaptation, plus a memory and compute profiler.
#[derive(Parser)]
#[command(name = "pmeta", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Meta-train a plan from a `key = value` config file.
    MetaTrain(MetaTrainArgs),
    /// Adapt a checkpoint to a support set and report measured costs.
    Adapt(AdaptArgs),
    /// Print resource tables for presets, methods or a network spec file.
    Profile(ProfileArgs),
    /// Summarize a checkpoint and its adaptation cost.
    Report(ReportArgs),
    /// Write a synthetic task's support and query sets as batch files.
    GenTask(GenTaskArgs),
}

#[derive(Args)]
struct MetaTrainArgs {
    /// Experiment config.
    config: PathBuf,
    /// Checkpoint to write.
    #[arg(long, short)]
    out: PathBuf,
    /// Per-epoch metrics CSV.
    #[arg(long)]
    metrics: Option<PathBuf>,
    /// Overrides the config's `seed`.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct AdaptArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Support batch file.
    #[arg(long)]
    support: PathBuf,
    /// Adapted checkpoint to write.
    #[arg(long, short)]
    out: PathBuf,
    /// Session report CSV; printed to stdout when absent.
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    partial_batch: usize,
    #[arg(long)]
    rho_fw: Option<f64>,
    #[arg(long)]
    rho_bw: Option<f64>,
}

#[derive(Args)]
struct ProfileArgs {
    /// Network spec file.
    spec: Option<PathBuf>,
    /// Resource table of the three reference models.
    #[arg(long)]
    table1: bool,
    /// Dense-method rows of the few-shot image table.
    #[arg(long)]
    table2: bool,
    /// Method for a single row: maml, maml++, anil or boil.
    #[arg(long)]
    method: Option<Mode>,
    /// Preset for a single row: 4conv, resnet12, mlp-100-100 or sinusoid.
    #[arg(long)]
    model: Option<String>,
    /// Shots per class over 5 ways.
    #[arg(long, default_value_t = 5)]
    shots: usize,
    /// Per-layer detail CSV.
    #[arg(long)]
    detail: Option<PathBuf>,
    /// Term-by-term memory breakdown CSV.
    #[arg(long)]
    breakdown: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Support batch; when given, ratios come from a real session.
    #[arg(long)]
    support: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    partial_batch: usize,
}

#[derive(Args)]
struct GenTaskArgs {
    /// sinusoid or clusters.
    #[arg(long, default_value = "sinusoid")]
    family: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Skip this many tasks of the stream first.
    #[arg(long, default_value_t = 0)]
    index: usize,
    #[arg(long, default_value_t = 5)]
    shots: usize,
    #[arg(long, default_value_t = 5)]
    n_way: usize,
    #[arg(long, default_value_t = 1)]
    k_shot: usize,
    #[arg(long, default_value_t = 8)]
    dim: usize,
    #[arg(long)]
    support: PathBuf,
    #[arg(long)]
    query: Option<PathBuf>,
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

fn load_batch(path: &Path, spec: &NetworkSpec) -> Result<Batch> {
    Batch::from_text(&read(path)?, &spec.input.dims())
}

fn meta_train(a: MetaTrainArgs) -> Result<()> {
    let mut cfg: ExperimentConfig = read(&a.config)?.parse()?;
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    let spec = cfg.network()?;
    let mut stream = cfg.train_stream()?;
    let val = cfg.val_tasks()?;
    let mut csv = format!("{METRICS_HEADER}\n");
    let out = meta_train_with(&cfg.train, &spec, &mut stream, &val, |m| {
        csv.push_str(&m.csv_row());
        csv.push('\n');
    })?;
    checkpoint::save(&out.plan, &a.out)?;
    if let Some(p) = &a.metrics {
        write(p, &csv)?;
    }
    println!("best_epoch={} alpha_sparsity={:.4}", out.best_epoch, out.plan.alpha_sparsity());
    Ok(())
}

fn adapt(a: AdaptArgs) -> Result<()> {
    let mut plan = checkpoint::load(&a.checkpoint)?;
    let support = load_batch(&a.support, &plan.spec)?;
    let opts = AdaptOptions { partial_batch: a.partial_batch, rho_fw: a.rho_fw, rho_bw: a.rho_bw };
    let (params, session) = few_shot_adapt(&plan, &support, &opts)?;
    let csv = report::session_csv(&plan, &session)?;
    let bad = report::session_checks(&plan, &session)?.into_iter().filter(|c| !c.exact()).count();
    if bad > 0 {
        return Err(Error::State(format!("{bad} layer counters disagree with the cost formulas")));
    }
    plan.params = params;
    checkpoint::save(&plan, &a.out)?;
    match &a.report {
        Some(p) => write(p, &csv)?,
        None => print!("{csv}"),
    }
    Ok(())
}

fn spec_scenario(name: &str, spec: NetworkSpec, mode: Mode, shots: usize) -> Result<Scenario> {
    let q = CostQuery::for_method(&spec, mode, 1, 1)?;
    Ok(Scenario {
        model: name.to_string(),
        method: mode.to_string(),
        setting: format!("5-way {shots}-shot"),
        spec,
        inference_mem_batch: 1,
        inference_mac_batch: 5 * shots,
        adapt_mem_batch: 1,
        adapt_mac_batch: 5 * shots,
        alpha_hat: q.alpha_hat,
        mu_fw: q.mu_fw,
        mu_bw: q.mu_bw,
    })
}

fn profile(a: ProfileArgs) -> Result<()> {
    if a.shots == 0 {
        return Err(Error::Invalid("shots must be at least 1".into()));
    }
    let mut rows = Vec::new();
    if a.table1 {
        rows.extend(cost::table1()?);
    }
    if a.table2 {
        rows.extend(cost::table2(a.shots)?);
    }
    let mode = a.method.unwrap_or(Mode::Maml);
    if let Some(m) = &a.model {
        rows.push(Scenario::method(m, mode, a.shots)?);
    }
    if let Some(p) = &a.spec {
        let spec: NetworkSpec = read(p)?.parse()?;
        let name = p.file_stem().map_or("spec".into(), |s| s.to_string_lossy().into_owned());
        rows.push(spec_scenario(&name, spec, mode, a.shots)?);
    }
    if rows.is_empty() && a.method.is_some() {
        return Err(Error::Invalid("--method needs --model or a spec file".into()));
    }
    let r = cost::table_report(&rows)?;
    print!("{}", r.to_csv());
    if let Some(p) = &a.detail {
        write(p, &r.detail_csv())?;
    }
    if let Some(p) = &a.breakdown {
        write(p, &r.breakdown_csv())?;
    }
    Ok(())
}

fn report_cmd(a: ReportArgs) -> Result<()> {
    let plan = checkpoint::load(&a.checkpoint)?;
    print!("{}", report::plan_summary(&plan));
    let name = a.checkpoint.file_stem().map_or("plan".into(), |s| s.to_string_lossy().into_owned());
    let (row, n) = match &a.support {
        Some(p) => {
            let support = load_batch(p, &plan.spec)?;
            let opts = AdaptOptions { partial_batch: a.partial_batch, ..Default::default() };
            let (_, session) = few_shot_adapt(&plan, &support, &opts)?;
            (report::plan_scenario(&name, &plan, Some(&session), support.len())?, support.len())
        }
        None => (report::plan_scenario(&name, &plan, None, 1)?, 1),
    };
    let r = cost::table_report(&[row])?;
    println!("support_samples={n}");
    print!("{}", r.to_csv());
    Ok(())
}

fn gen_task(a: GenTaskArgs) -> Result<()> {
    let mut stream = match a.family.as_str() {
        "sinusoid" => TaskStream::sinusoid(a.seed, a.shots)?,
        "clusters" => TaskStream::clusters(a.seed, a.n_way, a.k_shot, a.dim)?,
        other => return Err(Error::Invalid(format!("unknown task family `{other}`"))),
    };
    let task = stream.take(a.index + 1).pop().expect("one task");
    write(&a.support, &task.support.to_text())?;
    if let Some(q) = &a.query {
        write(q, &task.query.to_text())?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match cli.cmd {
        Cmd::MetaTrain(a) => meta_train(a),
        Cmd::Adapt(a) => adapt(a),
        Cmd::Profile(a) => profile(a),
        Cmd::Report(a) => report_cmd(a),
        Cmd::GenTask(a) => gen_task(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error kind={} message={msg:?}", e.kind());
            ExitCode::FAILURE
        }
    }
}
