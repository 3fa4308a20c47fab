use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use defnet::gradcheck::{run_gradcheck, GradcheckOptions};
use defnet::net::{load_checkpoint, save_checkpoint, Network, Pooling, PretrainScheme, TrainConfig};
use defnet::pipeline::detect::{class_detections, write_jsonl, ScoreTable};
use defnet::pipeline::ensemble::ensemble_map;
use defnet::pipeline::experiment::{
    finetune_samples, pretrain_trunks, regress_table, run_on_dataset, scene_proposals, score_scenes, table_map,
    train_variant, Stages, Variant,
};
use defnet::pipeline::{
    generate_dataset, greedy_ensemble, load_dataset, save_dataset, BoxRegressor, ContextModel, Dataset, DatasetSpec,
    ExperimentConfig, SyntheticScene,
};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

/// Exit status 1: a check ran and failed (gradient threshold, ensemble
/// invariant).
#[derive(Debug)]
struct CheckFailed(String);

impl std::fmt::Display for CheckFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for CheckFailed {}

#[derive(Parser)]
#[command(name = "defnet", version, about = "Def-pooling networks on synthetic detection scenes")]
#[command(args_override_self = true)]
struct Cli {
    /// JSON file supplying flag values; flags given on the command line win.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Gen(GenArgs),
    /// Compare analytic gradients with finite differences.
    Gradcheck(GradcheckArgs),
    /// Pretrain and fine-tune one model variant.
    Train(TrainArgs),
    /// Score a split with a trained model and report mAP.
    Eval(EvalArgs),
    /// Greedy model averaging over trained models.
    Ensemble(EnsembleArgs),
    /// Train every variant and report the component ladder.
    Ablate(AblateArgs),
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 4)]
    classes: usize,
    /// Training scenes.
    #[arg(long, default_value_t = 200)]
    scenes: usize,
    /// Validation scenes; defaults to half the training scenes.
    #[arg(long)]
    val_scenes: Option<usize>,
    #[arg(long, default_value_t = 1.0)]
    deformation: f64,
    #[arg(long, default_value_t = 3)]
    clutter: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-5)]
    eps: f64,
    #[arg(long, hide = true)]
    corrupt_backward: bool,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Scheme {
    Image,
    Object,
    None,
}

impl Scheme {
    fn to_lib(self) -> Option<PretrainScheme> {
        match self {
            Scheme::Image => Some(PretrainScheme::ImageLevel),
            Scheme::Object => Some(PretrainScheme::ObjectLevel),
            Scheme::None => None,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Split {
    Train,
    Val,
    Val1,
    Val2,
}

#[derive(Args, Clone)]
struct TrainingFlags {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 400)]
    iterations: usize,
    #[arg(long, default_value_t = 300)]
    pretrain_iterations: usize,
    #[arg(long, default_value_t = 200)]
    pretrain_scenes: usize,
    #[arg(long, default_value_t = 16)]
    batch_size: usize,
    #[arg(long, default_value_t = 0.01)]
    learning_rate: f64,
    #[arg(long, default_value_t = 0.3)]
    keep_fraction: f64,
}

impl TrainingFlags {
    fn experiment(&self, ds: &Dataset) -> ExperimentConfig {
        let mut cfg = ExperimentConfig::toy(self.seed);
        cfg.dataset = ds.spec.clone();
        cfg.pretrain_scenes = self.pretrain_scenes;
        cfg.pretrain = TrainConfig {
            learning_rate: self.learning_rate,
            ..TrainConfig::scaled(self.pretrain_iterations, self.batch_size, self.seed)
        };
        cfg.finetune = TrainConfig {
            learning_rate: self.learning_rate,
            ..TrainConfig::scaled(self.iterations, self.batch_size, self.seed)
        };
        cfg.keep_fraction = self.keep_fraction;
        cfg
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = Switch::On)]
    defpool: Switch,
    #[arg(long, value_enum, default_value_t = Scheme::Object)]
    scheme: Scheme,
    #[command(flatten)]
    training: TrainingFlags,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long, value_enum, default_value_t = Split::Val)]
    split: Split,
    /// Overrides the fraction stored with the model.
    #[arg(long)]
    keep_fraction: Option<f64>,
    /// Refine scores with a context model trained on the first validation half.
    #[arg(long, value_enum, default_value_t = Switch::Off)]
    context: Switch,
    /// Apply box regression trained on the training split.
    #[arg(long, value_enum, default_value_t = Switch::Off)]
    regress: Switch,
    /// Write the final detections as JSON lines.
    #[arg(long)]
    detections: Option<PathBuf>,
}

#[derive(Args)]
struct EnsembleArgs {
    #[arg(long)]
    data: PathBuf,
    /// Model directory; repeat for every candidate.
    #[arg(long = "model", required = true)]
    models: Vec<PathBuf>,
    #[arg(long, value_enum, default_value_t = Split::Val2)]
    split: Split,
    #[arg(long)]
    keep_fraction: Option<f64>,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    training: TrainingFlags,
}

/// Stored next to a checkpoint so evaluation reuses the training setup.
#[derive(Serialize, Deserialize)]
struct RunRecord {
    variant: Variant,
    experiment: ExperimentConfig,
}

fn emit(value: &Value) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn open_dataset(dir: &Path) -> Result<Dataset> {
    if !dir.join("manifest.json").is_file() {
        bail!("no dataset at {}", dir.display());
    }
    load_dataset(dir).with_context(|| format!("loading dataset {}", dir.display()))
}

fn open_model(dir: &Path) -> Result<(Network, RunRecord)> {
    let (net, _) = load_checkpoint(dir).with_context(|| format!("loading model {}", dir.display()))?;
    let run = fs::read_to_string(dir.join("run.json")).with_context(|| format!("no run.json in {}", dir.display()))?;
    Ok((net, serde_json::from_str(&run)?))
}

fn split_scenes(ds: &Dataset, split: Split) -> &[SyntheticScene] {
    match split {
        Split::Train => &ds.train,
        Split::Val => &ds.val,
        Split::Val1 => ds.val1(),
        Split::Val2 => ds.val2(),
    }
}

fn split_name(split: Split) -> &'static str {
    match split {
        Split::Train => "train",
        Split::Val => "val",
        Split::Val1 => "val1",
        Split::Val2 => "val2",
    }
}

fn cmd_gen(a: &GenArgs) -> Result<Value> {
    let mut spec = DatasetSpec::toy(a.classes, a.scenes, a.val_scenes.unwrap_or(a.scenes / 2), a.seed);
    spec.deformation = a.deformation;
    spec.clutter = a.clutter;
    let ds = generate_dataset(&spec)?;
    save_dataset(&ds, &a.out)?;
    let objects: usize = ds.train.iter().chain(&ds.val).map(|s| s.objects.len()).sum();
    eprintln!(
        "wrote {} train and {} val scenes ({objects} objects, {} classes)",
        ds.train.len(),
        ds.val.len(),
        spec.classes
    );
    Ok(json!({
        "command": "gen",
        "classes": spec.classes,
        "train_scenes": ds.train.len(),
        "val_scenes": ds.val.len(),
        "objects": objects,
        "seed": spec.seed,
    }))
}

fn cmd_gradcheck(a: &GradcheckArgs) -> Result<Value> {
    let report = run_gradcheck(&GradcheckOptions {
        seed: a.seed,
        eps: a.eps,
        corrupt: a.corrupt_backward,
    })?;
    eprintln!("{:<40} {:>12} {:>10}", "group", "max rel err", "threshold");
    for g in &report.groups {
        let mark = if g.passed() { "" } else { "  FAIL" };
        eprintln!("{:<40} {:>12.3e} {:>10.0e}{mark}", g.group, g.max_rel_err, g.threshold);
    }
    let value = json!({ "command": "gradcheck", "passed": report.passed(), "report": report });
    if !report.passed() {
        emit(&value)?;
        return Err(CheckFailed("gradient check failed".into()).into());
    }
    Ok(value)
}

fn cmd_train(a: &TrainArgs) -> Result<Value> {
    let ds = open_dataset(&a.data)?;
    let cfg = a.training.experiment(&ds);
    let pooling = if a.defpool == Switch::On { Pooling::Def } else { Pooling::Max };
    let variant = Variant {
        pooling,
        scheme: a.scheme.to_lib(),
    };
    let base = defnet::net::Architecture::toy(ds.spec.classes, Pooling::Max);
    let trunks = if variant.scheme.is_some() { pretrain_trunks(&cfg, &base)? } else { vec![] };
    let samples = finetune_samples(&ds.train, ds.spec.classes, base.input[1], &cfg);
    let (net, report) = train_variant(variant, &ds, &trunks, &samples, &cfg)?;
    save_checkpoint(&net, cfg.seed, Some(cfg.finetune), &a.out)?;
    let record = RunRecord {
        variant,
        experiment: cfg,
    };
    fs::write(a.out.join("run.json"), serde_json::to_string_pretty(&record)?)?;
    for (i, l) in report.epoch_losses.iter().enumerate() {
        eprintln!("epoch {i:>3}  loss {l:.4}");
    }
    Ok(json!({
        "command": "train",
        "model": variant.name(),
        "samples": samples.len(),
        "epoch_losses": report.epoch_losses,
    }))
}

/// Proposal boxes after rejection, shared by every model scored on `scenes`.
fn proposals_for(ds: &Dataset, cfg: &ExperimentConfig, keep: f64, scenes: &[SyntheticScene]) -> Result<(Stages, Vec<Vec<defnet::pipeline::BoundingBox>>)> {
    let stages = Stages::train(ds, &cfg.svm)?;
    let boxes = scene_proposals(scenes, Some(&stages.rejector), keep)?;
    Ok((stages, boxes))
}

fn cmd_eval(a: &EvalArgs) -> Result<Value> {
    let ds = open_dataset(&a.data)?;
    let (net, run) = open_model(&a.model)?;
    let cfg = &run.experiment;
    let k = ds.spec.classes;
    if net.classes() != k {
        bail!("model has {} classes, dataset {k}", net.classes());
    }
    let keep = a.keep_fraction.unwrap_or(cfg.keep_fraction);
    let scenes = split_scenes(&ds, a.split);
    let (stages, boxes) = proposals_for(&ds, cfg, keep, scenes)?;
    let mut table = score_scenes(&net, scenes, &boxes)?;
    let before = table_map(&table, scenes, k, cfg.nms_iou);
    if a.context == Switch::On {
        let val1 = ds.val1();
        let val1_boxes = scene_proposals(val1, Some(&stages.rejector), keep)?;
        let val1_table = score_scenes(&net, val1, &val1_boxes)?;
        let context = ContextModel::train(&val1_table, &stages.scene_scores(val1)?, val1, k, &cfg.svm)?;
        context.apply(&mut table, &stages.scene_scores(scenes)?)?;
    }
    if a.regress == Switch::On {
        let reg = BoxRegressor::train_on_scenes(&net, &ds.train, cfg.regression_iou, cfg.ridge_lambda)?;
        regress_table(&mut table, &net, &reg, scenes)?;
    }
    let dets = class_detections(&table, k, cfg.nms_iou);
    let report = defnet::pipeline::evaluate_map(&dets, &defnet::pipeline::experiment::ground_truth(scenes), k, 0.5);
    if let Some(path) = &a.detections {
        let names: Vec<String> = (0..scenes.len()).map(|i| format!("{}_{i:05}", split_name(a.split))).collect();
        write_jsonl(&dets, &names, fs::File::create(path)?)?;
    }
    for (c, ap) in report.ap.iter().enumerate() {
        match ap {
            Some(v) => eprintln!("class{c:<3} AP {v:.4}"),
            None => eprintln!("class{c:<3} AP  n/a"),
        }
    }
    eprintln!("mAP {:.4} (before context/regression {:.4})", report.map, before.map);
    Ok(json!({
        "command": "eval",
        "model": run.variant.name(),
        "split": split_name(a.split),
        "keep_fraction": keep,
        "context": a.context == Switch::On,
        "regress": a.regress == Switch::On,
        "map": report.map,
        "map_before_refinement": before.map,
        "ap": report.ap,
    }))
}

fn cmd_ensemble(a: &EnsembleArgs) -> Result<Value> {
    if a.models.len() < 2 {
        bail!("the ensemble needs at least two models");
    }
    let ds = open_dataset(&a.data)?;
    let loaded = a.models.iter().map(|m| open_model(m)).collect::<Result<Vec<_>>>()?;
    let cfg = &loaded[0].1.experiment;
    let k = ds.spec.classes;
    let keep = a.keep_fraction.unwrap_or(cfg.keep_fraction);
    let scenes = split_scenes(&ds, a.split);
    let (_, boxes) = proposals_for(&ds, cfg, keep, scenes)?;
    let tables = loaded
        .iter()
        .map(|(net, _)| score_scenes(net, scenes, &boxes))
        .collect::<defnet::Result<Vec<ScoreTable>>>()?;
    let gt = defnet::pipeline::experiment::ground_truth(scenes);
    let sel = greedy_ensemble(&tables, &gt, k, cfg.nms_iou)?;
    let remeasured = ensemble_map(&tables, &sel.selected, &gt, k, cfg.nms_iou)?;
    let names: Vec<String> = loaded.iter().map(|(_, r)| r.variant.name()).collect();
    for (i, m) in sel.single_maps.iter().enumerate() {
        let mark = if sel.selected.contains(&i) { "*" } else { " " };
        eprintln!("{mark} {:<14} mAP {m:.4}", names[i]);
    }
    eprintln!("ensemble mAP {:.4} (best single {:.4})", sel.map, sel.best_single());
    let holds = remeasured >= sel.best_single();
    let value = json!({
        "command": "ensemble",
        "split": split_name(a.split),
        "models": names,
        "selection": sel,
        "remeasured_map": remeasured,
        "invariant_holds": holds,
    });
    if !holds {
        emit(&value)?;
        return Err(CheckFailed("ensemble mAP below best single model".into()).into());
    }
    Ok(value)
}

fn cmd_ablate(a: &AblateArgs) -> Result<Value> {
    let ds = open_dataset(&a.data)?;
    let cfg = a.training.experiment(&ds);
    let report = run_on_dataset(&ds, &cfg)?;
    eprintln!("{:<28} {:>8}", "step", "mAP");
    for row in &report.ablation {
        eprintln!("{:<28} {:>8.4}", row.step, row.map);
    }
    Ok(json!({ "command": "ablate", "report": report }))
}

/// Turns a JSON object of flag values into `--flag value` arguments.
fn config_args(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    let Value::Object(map) = serde_json::from_str::<Value>(&text)? else {
        bail!("config file must hold a JSON object");
    };
    let mut out = Vec::new();
    for (key, value) in map {
        let flag = format!("--{}", key.replace('_', "-"));
        match value {
            Value::Bool(true) => out.push(flag),
            Value::Bool(false) | Value::Null => {}
            Value::Array(items) => {
                for item in items {
                    out.push(flag.clone());
                    out.push(scalar(&item)?);
                }
            }
            other => {
                out.push(flag);
                out.push(scalar(&other)?);
            }
        }
    }
    Ok(out)
}

fn scalar(v: &Value) -> Result<String> {
    Ok(match v {
        Value::String(s) => s.clone(),
        Value::Number(n) => n.to_string(),
        Value::Bool(b) => b.to_string(),
        _ => bail!("unsupported config value {v}"),
    })
}

fn config_path(argv: &[String]) -> Option<PathBuf> {
    argv.iter().enumerate().find_map(|(i, a)| match a.strip_prefix("--config") {
        Some("") => argv.get(i + 1).map(PathBuf::from),
        Some(rest) => rest.strip_prefix('=').map(PathBuf::from),
        None => None,
    })
}

/// Parses argv with config-file flags inserted right after the subcommand so
/// that command-line occurrences, which come later, override them.
fn parse() -> Result<Cli, clap::Error> {
    let argv: Vec<String> = std::env::args().collect();
    let Some(path) = config_path(&argv) else {
        return Cli::try_parse_from(&argv);
    };
    let extra = config_args(&path)
        .map_err(|e| clap::Error::raw(clap::error::ErrorKind::ValueValidation, format!("{e:#}\n")))?;
    let pos = argv
        .iter()
        .position(|a| ["gen", "gradcheck", "train", "eval", "ensemble", "ablate"].contains(&a.as_str()))
        .map_or(argv.len(), |p| p + 1);
    let mut merged = argv[..pos].to_vec();
    merged.extend(extra);
    merged.extend_from_slice(&argv[pos..]);
    Cli::try_parse_from(merged)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let result = match &cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Ensemble(a) => cmd_ensemble(a),
        Command::Ablate(a) => cmd_ablate(a),
    };
    match result.and_then(|v| emit(&v)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.is::<CheckFailed>() => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
