use std::collections::BTreeSet;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;
use serde::{Deserialize, Serialize};

use mome::config::ExperimentConfig;
use mome::corruption::{split_scenarios, CorruptionSpec};
use mome::decoder::Modality;
use mome::experiment::{bench_cost, route_scenario, run_method, synth_scenes, CostReport, Method, MethodResult};
use mome::model::{sidecar_path, Model};
use mome::scene::{read_dataset, write_dataset, DatasetHeader, Scene};
use mome::train::{train_stage1, train_stage2, LogRow};

#[derive(Parser)]
#[command(
    name = "mome",
    version,
    about = "Multi-expert decoding with adaptive query routing on synthetic scenes"
)]
struct Cli {
    /// Experiment config (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set train.lr=5e-4`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene dataset.
    Synth(SynthArgs),
    /// Apply one corruption to every scene of a dataset.
    Corrupt(CorruptArgs),
    /// Train the expert decoders and encoders (router frozen).
    TrainStage1(Stage1Args),
    /// Train the router on simulated sensor drops (everything else frozen).
    TrainStage2(Stage2Args),
    /// Score decoding methods under corruption scenarios.
    Eval(EvalArgs),
    /// Percentage of queries routed to each expert per scenario.
    RouteStats(RouteArgs),
    /// Attended key/value counts of single, parallel and routed decoding.
    BenchCost(BenchArgs),
    /// Merge eval reports into a tidy CSV.
    PlotData(PlotArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    count: usize,
    /// Defaults to `data.seed`.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 0)]
    first_id: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CorruptArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    spec: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Stage1Args {
    /// Training scenes; synthesised from `data` when absent.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Training log (CSV).
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct Stage2Args {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Test scenes; synthesised held-out scenes when absent.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Comma-separated corruption specs; defaults to `scenarios` in the config.
    #[arg(long)]
    scenarios: Option<String>,
    /// Comma-separated: med, confidence, single_l, single_c, single_lc.
    #[arg(long, default_value = "med,confidence,single_lc")]
    methods: String,
    /// Summary table (CSV).
    #[arg(long)]
    out: PathBuf,
    /// Full report (JSON); defaults to `--out` with a `.json` extension.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args)]
struct RouteArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    scenarios: Option<String>,
    /// CSV output.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    scenarios: Option<String>,
    /// JSON output.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PlotArgs {
    /// Eval reports (the JSON written by `eval`).
    #[arg(required = true)]
    reports: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

const DEFAULT_SCENARIOS: &str = "clean,lidardrop,camdrop";

#[derive(Serialize, Deserialize)]
struct EvalReport {
    config_hash: String,
    results: Vec<MethodResult>,
}

#[derive(Serialize, Deserialize)]
struct CostFile {
    config_hash: String,
    reports: Vec<CostReport>,
}

#[derive(Serialize)]
struct LogCsvRow {
    stage: u8,
    step: usize,
    l_l: Option<f64>,
    l_c: Option<f64>,
    l_lc: Option<f64>,
    l_2nd: Option<f64>,
    route_accuracy: Option<f64>,
    config_hash: String,
}

#[derive(Serialize)]
struct EvalCsvRow<'a> {
    scenario: &'a str,
    method: &'a str,
    map: f64,
    nds: f64,
    mate: f64,
    mase: f64,
    maoe: f64,
    cost: u64,
    config_hash: &'a str,
}

#[derive(Serialize)]
struct RouteCsvRow<'a> {
    scenario: &'a str,
    lc: f64,
    l: f64,
    c: f64,
    queries: usize,
    config_hash: &'a str,
}

#[derive(Serialize)]
struct TidyRow {
    scenario: String,
    method: String,
    metric: String,
    value: f64,
    config_hash: String,
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    let cfg = ExperimentConfig::resolve(cli.config.as_deref(), &cli.overrides)?;
    match cli.command {
        Command::Synth(a) => synth(cfg, a),
        Command::Corrupt(a) => corrupt(cfg, a),
        Command::TrainStage1(a) => stage1(cfg, a),
        Command::TrainStage2(a) => stage2(cfg, a),
        Command::Eval(a) => eval(cfg, a),
        Command::RouteStats(a) => route_stats(cfg, a),
        Command::BenchCost(a) => bench(cfg, a),
        Command::PlotData(a) => plot_data(a),
    }
}

fn log_config(cfg: &ExperimentConfig) -> String {
    let hash = cfg.hash();
    info!("resolved config (hash {hash}):\n{}", cfg.to_toml());
    hash
}

/// Replace the model section with the one a checkpoint was trained with.
fn load_checkpoint(cfg: &mut ExperimentConfig, path: &Path) -> Result<Model> {
    let model = Model::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    if cfg.model != model.config {
        info!("using the model section stored with {}", path.display());
        cfg.model = model.config.clone();
    }
    cfg.validate()?;
    Ok(model)
}

fn save_checkpoint(model: &Model, path: &Path, hash: &str) -> Result<()> {
    model.save_tagged(path, Some(hash))?;
    Model::load(path).with_context(|| format!("re-reading {}", path.display()))?;
    info!("wrote {} and {}", path.display(), sidecar_path(path).display());
    Ok(())
}

fn check_rig(model: &Model, scenes: &[Scene]) -> Result<()> {
    if let Some(s) = scenes.iter().find(|s| s.rig != model.rig) {
        bail!(
            "scene {} was generated with a different camera rig than the model",
            s.scene_id
        );
    }
    Ok(())
}

/// Scenes from `path`, or `count` synthesised scenes starting at `first_id`.
fn scenes_or_synth(
    cfg: &ExperimentConfig,
    model: &Model,
    path: Option<&Path>,
    count: usize,
    first_id: u64,
) -> Result<Vec<Scene>> {
    let scenes = match path {
        Some(p) => read_dataset(p).with_context(|| format!("reading {}", p.display()))?.1,
        None => synth_scenes(&cfg.scene, model, count, first_id, cfg.data.seed)?,
    };
    check_rig(model, &scenes)?;
    Ok(scenes)
}

fn test_scenes(cfg: &ExperimentConfig, model: &Model, path: Option<&Path>) -> Result<Vec<Scene>> {
    scenes_or_synth(cfg, model, path, cfg.data.test_scenes, cfg.data.train_scenes as u64)
}

fn scenario_list(cfg: &ExperimentConfig, arg: Option<&str>, views: usize) -> Result<Vec<CorruptionSpec>> {
    let raw: Vec<String> = match arg {
        Some(s) => split_scenarios(s),
        None if !cfg.scenarios.is_empty() => cfg.scenarios.clone(),
        None => split_scenarios(DEFAULT_SCENARIOS),
    };
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for s in raw {
        let spec = CorruptionSpec::parse(&s)?;
        spec.validate(Some(views))?;
        ensure!(seen.insert(spec.to_string()), "scenario {spec} listed twice");
        out.push(spec);
    }
    Ok(out)
}

fn parse_method(s: &str) -> Result<Method> {
    Ok(match s.trim() {
        "med" => Method::Med,
        "confidence" => Method::Confidence,
        "single_l" => Method::Single(Modality::Lidar),
        "single_c" => Method::Single(Modality::Camera),
        "single_lc" => Method::Single(Modality::Fused),
        other => bail!("unknown method {other:?}"),
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    serde_json::to_writer_pretty(BufWriter::new(File::create(path)?), value)?;
    Ok(())
}

fn write_log(path: &Path, rows: &[LogRow], hash: &str) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(LogCsvRow {
            stage: r.stage,
            step: r.step,
            l_l: r.l_l,
            l_c: r.l_c,
            l_lc: r.l_lc,
            l_2nd: r.l_2nd,
            route_accuracy: r.route_accuracy,
            config_hash: hash.to_string(),
        })?;
    }
    w.flush()?;
    Ok(())
}

fn synth(cfg: ExperimentConfig, a: SynthArgs) -> Result<()> {
    let hash = log_config(&cfg);
    let model = Model::new(cfg.model.clone())?;
    let seed = a.seed.unwrap_or(cfg.data.seed);
    let scenes = synth_scenes(&cfg.scene, &model, a.count, a.first_id, seed)?;
    write_dataset(&a.out, &DatasetHeader::new(&hash), &scenes)?;
    let (_, back) = read_dataset(&a.out)?;
    ensure!(back == scenes, "dataset did not survive a round trip");
    let boxes: usize = scenes.iter().map(|s| s.boxes.len()).sum();
    let points: usize = scenes.iter().map(|s| s.points.len()).sum();
    println!("scenes {} boxes {boxes} points {points}", scenes.len());
    Ok(())
}

fn corrupt(cfg: ExperimentConfig, a: CorruptArgs) -> Result<()> {
    let hash = log_config(&cfg);
    let (header, scenes) = read_dataset(&a.data).with_context(|| format!("reading {}", a.data.display()))?;
    let spec = CorruptionSpec::parse(&a.spec)?;
    let views = scenes.first().map(|s| s.rig.views());
    spec.validate(views)?;
    let out: Vec<Scene> = scenes.iter().map(|s| spec.apply(s)).collect::<mome::Result<_>>()?;
    let corruption = match header.corruption {
        Some(prev) => format!("{prev};{spec}"),
        None => spec.to_string(),
    };
    let header = DatasetHeader {
        corruption: Some(corruption),
        ..DatasetHeader::new(hash)
    };
    write_dataset(&a.out, &header, &out)?;
    ensure!(read_dataset(&a.out)?.1 == out, "dataset did not survive a round trip");
    let points: usize = out.iter().map(|s| s.points.len()).sum();
    println!("scenes {} points {points} corruption {spec}", out.len());
    Ok(())
}

fn stage1(cfg: ExperimentConfig, a: Stage1Args) -> Result<()> {
    let hash = log_config(&cfg);
    let mut model = Model::new(cfg.model.clone())?;
    let scenes = scenes_or_synth(&cfg, &model, a.data.as_deref(), cfg.data.train_scenes, 0)?;
    let rows = train_stage1(&mut model, &scenes, &cfg.train, |r| {
        info!(
            "stage 1 step {} L_l {:.4} L_c {:.4} L_lc {:.4}",
            r.step,
            r.l_l.unwrap_or(f64::NAN),
            r.l_c.unwrap_or(f64::NAN),
            r.l_lc.unwrap_or(f64::NAN)
        )
    })?;
    save_checkpoint(&model, &a.out, &hash)?;
    if let Some(p) = a.log {
        write_log(&p, &rows, &hash)?;
    }
    Ok(())
}

fn stage2(mut cfg: ExperimentConfig, a: Stage2Args) -> Result<()> {
    let mut model = load_checkpoint(&mut cfg, &a.ckpt)?;
    let hash = log_config(&cfg);
    let scenes = scenes_or_synth(&cfg, &model, a.data.as_deref(), cfg.data.train_scenes, 0)?;
    let rows = train_stage2(&mut model, &scenes, &cfg.train, |r| {
        info!(
            "stage 2 step {} L_2nd {:.4} route accuracy {:.3}",
            r.step,
            r.l_2nd.unwrap_or(f64::NAN),
            r.route_accuracy.unwrap_or(f64::NAN)
        )
    })?;
    save_checkpoint(&model, &a.out, &hash)?;
    if let Some(p) = a.log {
        write_log(&p, &rows, &hash)?;
    }
    Ok(())
}

fn eval(mut cfg: ExperimentConfig, a: EvalArgs) -> Result<()> {
    let model = load_checkpoint(&mut cfg, &a.ckpt)?;
    let hash = log_config(&cfg);
    let scenes = test_scenes(&cfg, &model, a.data.as_deref())?;
    let scenarios = scenario_list(&cfg, a.scenarios.as_deref(), model.rig.views())?;
    let methods: Vec<Method> = a.methods.split(',').map(parse_method).collect::<Result<_>>()?;
    let mut results = Vec::new();
    for spec in &scenarios {
        for &m in &methods {
            let r = run_method(&model, &scenes, spec, m, &cfg.eval)?;
            println!(
                "{:<24} {:<12} mAP {:.4} NDS {:.4}",
                r.scenario, r.method, r.report.map, r.report.nds
            );
            results.push(r);
        }
    }
    let mut w = csv::Writer::from_path(&a.out)?;
    for r in &results {
        w.serialize(EvalCsvRow {
            scenario: &r.scenario,
            method: &r.method,
            map: r.report.map,
            nds: r.report.nds,
            mate: r.report.mate,
            mase: r.report.mase,
            maoe: r.report.maoe,
            cost: r.cost,
            config_hash: &hash,
        })?;
    }
    w.flush()?;
    let json = a.json.unwrap_or_else(|| a.out.with_extension("json"));
    write_json(
        &json,
        &EvalReport {
            config_hash: hash,
            results,
        },
    )?;
    let back: EvalReport = serde_json::from_reader(File::open(&json)?)?;
    ensure!(
        back.results.len() == scenarios.len() * methods.len(),
        "report is incomplete"
    );
    Ok(())
}

fn route_stats(mut cfg: ExperimentConfig, a: RouteArgs) -> Result<()> {
    let model = load_checkpoint(&mut cfg, &a.ckpt)?;
    let hash = log_config(&cfg);
    let scenes = test_scenes(&cfg, &model, a.data.as_deref())?;
    let scenarios = scenario_list(&cfg, a.scenarios.as_deref(), model.rig.views())?;
    let mut w = csv::Writer::from_path(&a.out)?;
    for spec in &scenarios {
        let s = route_scenario(&model, &scenes, spec)?;
        let name = spec.to_string();
        println!("{name:<24} lc {:6.2}%  l {:6.2}%  c {:6.2}%", s.lc, s.l, s.c);
        w.serialize(RouteCsvRow {
            scenario: &name,
            lc: s.lc,
            l: s.l,
            c: s.c,
            queries: s.queries,
            config_hash: &hash,
        })?;
    }
    w.flush()?;
    Ok(())
}

fn bench(mut cfg: ExperimentConfig, a: BenchArgs) -> Result<()> {
    let model = load_checkpoint(&mut cfg, &a.ckpt)?;
    let hash = log_config(&cfg);
    let scenes = test_scenes(&cfg, &model, a.data.as_deref())?;
    let scenarios = scenario_list(&cfg, a.scenarios.as_deref(), model.rig.views())?;
    let mut reports = Vec::new();
    for spec in &scenarios {
        let r = bench_cost(&model, &scenes, spec)?;
        println!(
            "{:<24} single {} parallel {} ({:.3}x) routed {} ({:.3}x)",
            r.scenario, r.single, r.parallel, r.parallel_ratio, r.med, r.med_ratio
        );
        reports.push(r);
    }
    write_json(
        &a.out,
        &CostFile {
            config_hash: hash,
            reports,
        },
    )?;
    Ok(())
}

fn tidy_rows(report: &EvalReport) -> Vec<TidyRow> {
    report
        .results
        .iter()
        .flat_map(|r| {
            [("map", r.report.map), ("nds", r.report.nds)].map(|(metric, value)| TidyRow {
                scenario: r.scenario.clone(),
                method: r.method.clone(),
                metric: metric.into(),
                value,
                config_hash: report.config_hash.clone(),
            })
        })
        .collect()
}

fn plot_data(a: PlotArgs) -> Result<()> {
    let mut seen = BTreeSet::new();
    let mut rows = Vec::new();
    for p in &a.reports {
        let report: EvalReport =
            serde_json::from_reader(File::open(p).with_context(|| format!("opening {}", p.display()))?)
                .with_context(|| format!("parsing {}", p.display()))?;
        for r in &report.results {
            ensure!(
                seen.insert((r.scenario.clone(), r.method.clone())),
                "duplicate scenario {:?} for method {:?} in {}",
                r.scenario,
                r.method,
                p.display()
            );
        }
        rows.extend(tidy_rows(&report));
    }
    let mut w = csv::Writer::from_path(&a.out)?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush()?;
    println!("rows {}", rows.len());
    Ok(())
}
