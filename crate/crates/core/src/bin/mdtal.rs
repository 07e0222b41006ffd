//! `mdtal` command-line entry point.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::{json, Value};

use mdtal::checkpoint::{self, LoadedModel};
use mdtal::denoiser::ModelDenoiser;
use mdtal::metrics::{self, EvalReport, Grid};
use mdtal::sampler::{self, DecodeConfig};
use mdtal::synthgen::{self, Example, Profile, SynthConfig};
use mdtal::trainkit::{self, AblationCell, AblationInputs, EvalSpec, RunConfig, Trainer};

const TASK_FILE: &str = "task.json";
const TRAIN_FILE: &str = "train.jsonl";
const EVAL_FILE: &str = "eval.jsonl";

#[derive(Parser)]
#[command(
    name = "mdtal",
    version,
    about = "Masked-diffusion temporal action localization toolkit"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset (train/eval split, 1 in 6 held out).
    GenData(GenDataArgs),
    /// Train a denoiser.
    Train(TrainArgs),
    /// Decode predictions with a trained model.
    Infer(InferArgs),
    /// Score predictions (or a model) against a dataset.
    Eval(EvalArgs),
    /// Train and score an ablation grid.
    Ablate(AblateArgs),
    /// Write the per-step soft IoU of one decoded example as CSV.
    DumpTraj(DumpTrajArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long, default_value = "rtl", value_parser = ["rtl", "closed-set"])]
    profile: String,
    /// Total number of videos.
    #[arg(long, default_value_t = 600)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Generator settings as JSON; `--profile` and `--seed` override it.
    #[arg(short = 'c', long)]
    config: Option<PathBuf>,
    #[arg(short = 'o', long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(short = 'c', long)]
    config: Option<PathBuf>,
    /// Dataset directory; overrides the config's `data`.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Continue from a training-state file.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(short = 'o', long)]
    out: PathBuf,
}

#[derive(Args, Clone)]
struct DecodeArgs {
    /// Reverse denoising steps.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    block_length: Option<usize>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Dataset file or directory (uses its eval split).
    #[arg(long)]
    data: Option<PathBuf>,
    #[command(flatten)]
    decode: DecodeArgs,
    /// Directory receiving one trajectory CSV per video.
    #[arg(long)]
    dump_trajectory: Option<PathBuf>,
    #[arg(short = 'o', long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Predictions as detection JSONL.
    #[arg(long, conflicts_with = "ckpt", required_unless_present = "ckpt")]
    pred: Option<PathBuf>,
    /// Decode with this model instead of reading predictions.
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Ground-truth dataset file or directory.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, value_parser = ["rtl", "closed-set"])]
    profile: Option<String>,
    #[arg(long, default_value = "thumos", value_parser = ["thumos", "anet"])]
    grid: String,
    #[command(flatten)]
    decode: DecodeArgs,
    /// Report path; stdout when absent.
    #[arg(short = 'o', long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    /// `table3`, `table4`, or a JSON file of `{name, overrides}` cells.
    #[arg(long, default_value = "table3")]
    grid: String,
    #[arg(short = 'c', long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    seeds: Vec<u64>,
    #[arg(short = 'o', long)]
    out: PathBuf,
}

#[derive(Args)]
struct DumpTrajArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Index into the eval split.
    #[arg(long, default_value_t = 0)]
    example: usize,
    #[arg(long)]
    data: Option<PathBuf>,
    #[command(flatten)]
    decode: DecodeArgs,
    #[arg(short = 'o', long)]
    out: Option<PathBuf>,
}

fn deterministic() -> bool {
    std::env::var("MDTAL_DETERMINISTIC").is_ok_and(|v| v == "1")
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn file_entry(path: &Path) -> Result<Value> {
    Ok(json!({"path": path.display().to_string(), "sha256": checkpoint::file_sha256(path)?}))
}

/// Write `manifest` with hashes of every input and output file.
fn write_manifest(
    path: &Path,
    command: &str,
    config: Value,
    inputs: &[PathBuf],
    outputs: &[PathBuf],
) -> Result<()> {
    let manifest = json!({
        "command": command,
        "version": env!("CARGO_PKG_VERSION"),
        "deterministic": deterministic(),
        "config": config,
        "inputs": inputs.iter().map(|p| file_entry(p)).collect::<Result<Vec<_>>>()?,
        "outputs": outputs.iter().map(|p| file_entry(p)).collect::<Result<Vec<_>>>()?,
    });
    write_json(path, &manifest)
}

fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

/// Resolve a dataset argument to a JSONL file; directories use `default_file`.
fn dataset_file(path: &Path, default_file: &str) -> PathBuf {
    if path.is_dir() {
        path.join(default_file)
    } else {
        path.to_path_buf()
    }
}

fn load_examples(path: &Path) -> Result<Vec<Example>> {
    synthgen::read_dataset(path).with_context(|| format!("reading dataset {}", path.display()))
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let mut task: SynthConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => SynthConfig::default(),
    };
    task.profile = a.profile.parse::<Profile>()?;
    if task.profile == Profile::ClosedSet && a.config.is_none() {
        task = SynthConfig::closed_set(4);
    }
    task.seed = a.seed;
    task.validate()?;
    if a.n < 2 {
        bail!("--n must be at least 2 to form a train/eval split");
    }
    let n_eval = ((a.n as f64) / 6.0).round().max(1.0) as usize;
    let n_train = a.n - n_eval;
    std::fs::create_dir_all(&a.out)?;
    let train = synthgen::generate_dataset(&task, n_train, 0)?;
    let eval = synthgen::generate_dataset(&task, n_eval, n_train)?;
    let (tp, ep, cp) = (
        a.out.join(TRAIN_FILE),
        a.out.join(EVAL_FILE),
        a.out.join(TASK_FILE),
    );
    synthgen::write_dataset(&train, &tp)?;
    synthgen::write_dataset(&eval, &ep)?;
    write_json(&cp, &task)?;
    let config = json!({"task": task, "n": a.n, "n_train": n_train, "n_eval": n_eval});
    write_manifest(
        &a.out.join("manifest.json"),
        "gen-data",
        config,
        &[],
        &[tp, ep, cp],
    )?;
    eprintln!(
        "wrote {n_train} train / {n_eval} eval videos to {}",
        a.out.display()
    );
    Ok(())
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut text = String::new();
    for r in rows {
        text.push_str(&serde_json::to_string(r)?);
        text.push('\n');
    }
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// Report written by `train` and `eval`.
#[derive(Serialize)]
struct EvalOutput {
    #[serde(flatten)]
    report: EvalReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    dropped: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    time_later_fraction: Option<f64>,
}

impl From<&trainkit::Evaluation> for EvalOutput {
    fn from(e: &trainkit::Evaluation) -> Self {
        Self {
            report: e.report.clone(),
            dropped: Some(e.dropped),
            time_later_fraction: Some(e.time_later_fraction()),
        }
    }
}

fn train(a: TrainArgs) -> Result<()> {
    let mut inputs = Vec::new();
    let mut run: RunConfig = match &a.config {
        Some(p) => {
            inputs.push(p.clone());
            read_json(p)?
        }
        None => RunConfig::default(),
    };
    if let Some(d) = a.data {
        run.data = Some(d);
    }
    let data_dir = run
        .data
        .clone()
        .context("no dataset: pass --data or set `data` in the config")?;
    let task: SynthConfig = read_json(&data_dir.join(TASK_FILE))?;
    let train_path = data_dir.join(TRAIN_FILE);
    let eval_path = data_dir.join(EVAL_FILE);
    inputs.extend([data_dir.join(TASK_FILE), train_path.clone()]);

    let (mut trainer, run) = match &a.resume {
        Some(p) => {
            inputs.push(p.clone());
            let raw = checkpoint::read_raw(p)?;
            let (tr, saved_task) = Trainer::from_state(&raw)?;
            if saved_task != task {
                bail!("training state was produced for a different dataset");
            }
            let run = RunConfig {
                model: tr.params.config.clone(),
                train: tr.cfg.clone(),
                ..run
            };
            (tr, run)
        }
        None => {
            run.resolve(&task, a.seed)?;
            (Trainer::new(run.model.clone(), run.train.clone())?, run)
        }
    };
    let vocab = task.vocabulary()?;
    let n_ctx = run.model.n_ctx;
    let train_set = trainkit::prepare(&load_examples(&train_path)?, &task, n_ctx)?;
    let eval_set = if eval_path.exists() {
        inputs.push(eval_path.clone());
        trainkit::prepare(&load_examples(&eval_path)?, &task, n_ctx)?
    } else {
        Vec::new()
    };
    let spec = EvalSpec {
        data: &eval_set,
        task: &task,
        decode: &run.decode,
        grid: run.grid,
    };
    trainer.run(
        &train_set,
        &vocab,
        None,
        (!eval_set.is_empty()).then_some(&spec),
    )?;

    std::fs::create_dir_all(&a.out)?;
    let model_path = a.out.join("model.bin");
    let state_path = a.out.join("state.bin");
    let log_path = a.out.join("log.jsonl");
    let meta = json!({"run": run});
    checkpoint::save_model(&model_path, &trainer.params, &task, meta)?;
    trainer.save_state(&state_path, &task)?;
    write_jsonl(&log_path, &trainer.log)?;
    let mut outputs = vec![model_path, state_path, log_path];
    if !trainer.evals.is_empty() {
        let p = a.out.join("evals.jsonl");
        write_jsonl(&p, &trainer.evals)?;
        outputs.push(p);
    }
    if !eval_set.is_empty() {
        let ev = trainkit::evaluate(&trainer.params, &eval_set, &task, &run.decode, run.grid)?;
        let p = a.out.join("eval.json");
        write_json(&p, &EvalOutput::from(&ev))?;
        outputs.push(p);
    }
    if trainer.opt.skipped > 0 {
        eprintln!(
            "warning: {} updates skipped on non-finite gradients",
            trainer.opt.skipped
        );
    }
    let config =
        json!({"run": run, "resumed": a.resume.is_some(), "skipped_updates": trainer.opt.skipped});
    write_manifest(
        &a.out.join("manifest.json"),
        "train",
        config,
        &inputs,
        &outputs,
    )?;
    eprintln!(
        "trained {} updates, wrote {}",
        trainer.log.len(),
        a.out.display()
    );
    Ok(())
}

fn decode_config(model: &LoadedModel, a: &DecodeArgs) -> Result<DecodeConfig> {
    let mut cfg = model.decode_config()?;
    if let Some(s) = a.steps {
        cfg.n_steps = s;
    }
    if a.block_length.is_some() {
        cfg.block_length = a.block_length;
    }
    if let Some(t) = a.temperature {
        cfg.temperature = t;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if cfg.n_steps > model.params.config.n_steps {
        bail!(
            "model was built for at most {} steps, {} requested",
            model.params.config.n_steps,
            cfg.n_steps
        );
    }
    Ok(cfg)
}

/// Dataset path from the flag, falling back to the checkpoint's training data.
fn data_for(model: &LoadedModel, flag: Option<&Path>) -> Result<PathBuf> {
    if let Some(p) = flag {
        return Ok(dataset_file(p, EVAL_FILE));
    }
    let dir = model
        .meta
        .get("run")
        .and_then(|r| r.get("data"))
        .and_then(Value::as_str)
        .context("no dataset: pass --data")?;
    Ok(Path::new(dir).join(EVAL_FILE))
}

fn infer(a: InferArgs) -> Result<()> {
    let model = checkpoint::load_model(&a.ckpt)?;
    let data_path = data_for(&model, a.data.as_deref())?;
    let mut decode = decode_config(&model, &a.decode)?;
    decode.record_trajectory = a.dump_trajectory.is_some();
    let task = &model.task;
    let vocab = task.vocabulary()?;
    let grid = task.grid()?;
    let data = trainkit::prepare(&load_examples(&data_path)?, task, model.params.config.n_ctx)?;
    let mut preds = Vec::new();
    let mut outputs = vec![a.out.clone()];
    if let Some(dir) = &a.dump_trajectory {
        std::fs::create_dir_all(dir)?;
    }
    for ex in &data {
        let d = trainkit::decode_video(
            &model.params,
            &ex.context,
            &ex.video_id,
            task,
            &vocab,
            &grid,
            &decode,
        )?;
        preds.extend(d.detections);
        let gen = d.generation;
        if let (Some(dir), Some(trace)) = (&a.dump_trajectory, &gen.trace) {
            let records = sampler::trace_records(
                trace,
                &ex.target,
                &vocab,
                mdtal::losses::GateMode::Both,
                1e-8,
            )?;
            let p = dir.join(format!("{}.csv", ex.video_id));
            std::fs::write(&p, sampler::trajectory_csv(trace, &records, vocab.mask_id))?;
            outputs.push(p);
        }
    }
    metrics::write_detections(&a.out, &preds)?;
    let config = json!({"decode": decode});
    write_manifest(
        &sidecar(&a.out),
        "infer",
        config,
        &[a.ckpt, data_path],
        &outputs,
    )?;
    eprintln!("wrote {} predictions to {}", preds.len(), a.out.display());
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let grid: Grid = a.grid.parse()?;
    let mut inputs = Vec::new();
    let output = if let Some(ckpt) = &a.ckpt {
        let model = checkpoint::load_model(ckpt)?;
        let data_path = data_for(&model, a.data.as_deref())?;
        let decode = decode_config(&model, &a.decode)?;
        let data = trainkit::prepare(
            &load_examples(&data_path)?,
            &model.task,
            model.params.config.n_ctx,
        )?;
        let ev = trainkit::evaluate(&model.params, &data, &model.task, &decode, grid)?;
        inputs.extend([ckpt.clone(), data_path]);
        EvalOutput::from(&ev)
    } else {
        let pred_path = a.pred.clone().expect("clap requires --pred without --ckpt");
        let data = a
            .data
            .as_deref()
            .context("--pred needs --data with the ground truth")?;
        let data_path = dataset_file(data, EVAL_FILE);
        let profile = match &a.profile {
            Some(p) => p.parse::<Profile>()?,
            None => {
                let task_path = data_path.parent().unwrap_or(Path::new(".")).join(TASK_FILE);
                if task_path.exists() {
                    read_json::<SynthConfig>(&task_path)?.profile
                } else {
                    Profile::Rtl
                }
            }
        };
        let preds = metrics::read_detections(&pred_path)?;
        let gts: Vec<_> = load_examples(&data_path)?
            .iter()
            .flat_map(Example::ground_truth)
            .collect();
        let report = trainkit::score(&preds, &gts, profile, grid);
        inputs.extend([pred_path, data_path]);
        EvalOutput {
            report,
            dropped: None,
            time_later_fraction: None,
        }
    };
    match &a.out {
        Some(p) => {
            write_json(p, &output)?;
            write_manifest(
                &sidecar(p),
                "eval",
                json!({"grid": grid}),
                &inputs,
                std::slice::from_ref(p),
            )?;
        }
        None => println!("{}", serde_json::to_string_pretty(&output)?),
    }
    Ok(())
}

fn merge_json(base: &mut Value, patch: &Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                merge_json(b.entry(k.clone()).or_insert(Value::Null), v);
            }
        }
        (b, p) => *b = p.clone(),
    }
}

fn ablation_cells(grid: &str, base: &trainkit::TrainConfig) -> Result<Vec<AblationCell>> {
    match grid {
        "table3" => Ok(trainkit::table3_grid(base)),
        "table4" => Ok(trainkit::table4_grid(base)),
        path => {
            #[derive(serde::Deserialize)]
            struct CellSpec {
                name: String,
                #[serde(default)]
                overrides: Value,
            }
            let specs: Vec<CellSpec> = read_json(Path::new(path))?;
            specs
                .into_iter()
                .map(|c| {
                    let mut v = serde_json::to_value(base)?;
                    merge_json(&mut v, &c.overrides);
                    let train =
                        serde_json::from_value(v).with_context(|| format!("cell `{}`", c.name))?;
                    Ok(AblationCell {
                        name: c.name,
                        train,
                    })
                })
                .collect()
        }
    }
}

fn ablate(a: AblateArgs) -> Result<()> {
    let mut inputs = Vec::new();
    let mut run: RunConfig = match &a.config {
        Some(p) => {
            inputs.push(p.clone());
            read_json(p)?
        }
        None => RunConfig::default(),
    };
    if let Some(d) = a.data {
        run.data = Some(d);
    }
    if a.seeds.is_empty() {
        bail!("--seeds must list at least one seed");
    }
    let data_dir = run
        .data
        .clone()
        .context("no dataset: pass --data or set `data` in the config")?;
    let task: SynthConfig = read_json(&data_dir.join(TASK_FILE))?;
    run.resolve(&task, None)?;
    let cells = ablation_cells(&a.grid, &run.train)?;
    if Path::new(&a.grid).is_file() {
        inputs.push(PathBuf::from(&a.grid));
    }
    let (tp, ep) = (data_dir.join(TRAIN_FILE), data_dir.join(EVAL_FILE));
    let n_ctx = run.model.n_ctx;
    let train_set = trainkit::prepare(&load_examples(&tp)?, &task, n_ctx)?;
    let eval_set = trainkit::prepare(&load_examples(&ep)?, &task, n_ctx)?;
    inputs.extend([data_dir.join(TASK_FILE), tp, ep]);
    let ai = AblationInputs {
        train: &train_set,
        eval: &eval_set,
        task: &task,
        model: &run.model,
        decode: &run.decode,
        grid: run.grid,
    };
    let report = trainkit::run_ablation(&cells, &a.seeds, &ai);
    std::fs::create_dir_all(&a.out)?;
    let (jp, mp) = (a.out.join("report.json"), a.out.join("report.md"));
    write_json(&jp, &report)?;
    std::fs::write(&mp, report.to_markdown())?;
    let config = json!({"run": run, "cells": cells, "seeds": a.seeds});
    write_manifest(
        &a.out.join("manifest.json"),
        "ablate",
        config,
        &inputs,
        &[jp, mp.clone()],
    )?;
    print!("{}", report.to_markdown());
    let failed: usize = report.rows.iter().map(|r| r.errors.len()).sum();
    if failed > 0 {
        for r in &report.rows {
            for e in &r.errors {
                eprintln!("{}: {e}", r.name);
            }
        }
        bail!("{failed} ablation run(s) failed");
    }
    Ok(())
}

fn dump_traj(a: DumpTrajArgs) -> Result<()> {
    let model = checkpoint::load_model(&a.ckpt)?;
    let data_path = data_for(&model, a.data.as_deref())?;
    let mut decode = decode_config(&model, &a.decode)?;
    decode.record_trajectory = true;
    let task = &model.task;
    let vocab = task.vocabulary()?;
    let examples = load_examples(&data_path)?;
    let ex = examples.get(a.example).with_context(|| {
        format!(
            "example {} out of range ({} available)",
            a.example,
            examples.len()
        )
    })?;
    let prepared = trainkit::prepare(std::slice::from_ref(ex), task, model.params.config.n_ctx)?;
    let p = &prepared[0];
    let den = ModelDenoiser {
        params: &model.params,
        context: &p.context,
    };
    let gen = sampler::generate(&den, &vocab, p.target.len(), &decode)?;
    let trace = gen.trace.context("decoder returned no trajectory")?;
    let records = sampler::trace_records(
        &trace,
        &p.target,
        &vocab,
        mdtal::losses::GateMode::Both,
        1e-8,
    )?;
    let csv = sampler::trajectory_csv(&trace, &records, vocab.mask_id);
    match &a.out {
        Some(o) => {
            std::fs::write(o, csv)?;
            let config = json!({"decode": decode, "example": a.example});
            write_manifest(
                &sidecar(o),
                "dump-traj",
                config,
                &[a.ckpt.clone(), data_path],
                std::slice::from_ref(o),
            )?;
        }
        None => print!("{csv}"),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Infer(a) => infer(a),
        Command::Eval(a) => eval(a),
        Command::Ablate(a) => ablate(a),
        Command::DumpTraj(a) => dump_traj(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
