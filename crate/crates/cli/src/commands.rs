use std::fs;
use std::io::{self, BufRead, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use makgcn::data::{
    load_manifest, parse_frame_header, parse_frame_line, synth_generate, windows_for_all, write_frame_file,
    PipelineConfig, Sample, StreamAssembler, SynthSpec,
};
use makgcn::model::{count_macs, count_params, Model, ModelConfig, Variant};
use makgcn::tensor::{DType, Element};
use makgcn::train::{evaluate, fit, history_csv, predict, Averaging, Checkpoint, CheckpointSink, Metrics};
use serde::Serialize;
use serde_json::json;

use crate::args::{parse_sweep, Command, CostArgs, EvalArgs, InferArgs, SplitName, SynthArgs, TrainArgs};
use crate::manifest::{build_splits, RunManifest, Splits};
use crate::{CliError, CliResult};

pub fn dispatch(command: Command) -> CliResult<()> {
    match command {
        Command::Train(a) => train(&a),
        Command::Ablate(a) => ablate(&a),
        Command::Eval(a) => eval(&a),
        Command::Infer(a) => infer(&a),
        Command::Cost(a) => cost(&a),
        Command::Synth(a) => synth(&a),
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> CliResult<()> {
    fs::write(path, contents).map_err(|e| CliError::data(format!("{}: {e}", path.display())))
}

fn create_dir(path: &Path) -> CliResult<()> {
    fs::create_dir_all(path).map_err(|e| CliError::data(format!("{}: {e}", path.display())))
}

fn echo_manifest(value: &impl Serialize) {
    eprintln!("manifest: {}", serde_json::to_string(value).expect("manifest serializes"));
}

fn confusion_csv(confusion: &[Vec<u64>]) -> String {
    confusion
        .iter()
        .map(|row| row.iter().map(u64::to_string).collect::<Vec<_>>().join(",") + "\n")
        .collect()
}

fn metrics_table(m: &Metrics) -> String {
    format!(
        "{:<8}{:<8}{:<8}{}\n{:<8.2}{:<8.2}{:<8.2}{:.2}\n",
        "Acc",
        "Pre",
        "Rec",
        "F1",
        100.0 * m.accuracy,
        100.0 * m.precision,
        100.0 * m.recall,
        100.0 * m.f1
    )
}

/// Result of one seeded training run.
#[derive(Debug, Clone, Serialize)]
struct RunOutcome {
    seed: u64,
    best_epoch: usize,
    epochs_run: usize,
    stopped_early: bool,
    best_val_loss: f64,
    test: Metrics,
}

fn run_one<T: Element>(m: &RunManifest, model_cfg: &ModelConfig, splits: &Splits, seed: u64, dir: &Path) -> CliResult<(RunOutcome, f64)> {
    create_dir(dir)?;
    let layout = &m.layout;
    let mut cfg = m.train.clone();
    cfg.seed = seed;
    let mut model = Model::<T>::build(model_cfg, seed)?;
    let sink = CheckpointSink {
        path: dir.join(&layout.checkpoint),
        extra: json!({ "run": m, "seed": seed }),
    };
    let start = Instant::now();
    let report = fit(&mut model, &splits.train, &splits.val, &cfg, Some(&sink))?;
    let elapsed = start.elapsed().as_secs_f64();
    write_file(&dir.join(&layout.history), history_csv(&report.history))?;
    let (_, test) = evaluate(&model, &splits.test, cfg.batch_size, Averaging::Weighted)?;
    write_file(&dir.join(&layout.confusion), confusion_csv(&test.confusion))?;
    let outcome = RunOutcome {
        seed,
        best_epoch: report.best_epoch,
        epochs_run: report.history.len(),
        stopped_early: report.stopped_early,
        best_val_loss: report.best_val_loss,
        test,
    };
    write_file(&dir.join(&layout.metrics), serde_json::to_string_pretty(&outcome).expect("serializes") + "\n")?;
    write_file(&dir.join("timing.json"), format!("{{\"elapsed_secs\": {elapsed}}}\n"))?;
    Ok((outcome, elapsed))
}

fn run_seed(m: &RunManifest, model_cfg: &ModelConfig, splits: &Splits, seed: u64, dir: &Path) -> CliResult<(RunOutcome, f64)> {
    match m.train.dtype {
        DType::F32 => run_one::<f32>(m, model_cfg, splits, seed, dir),
        DType::F64 => run_one::<f64>(m, model_cfg, splits, seed, dir),
    }
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = if values.len() > 1 {
        values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

/// Validates the manifest, prepares data and records the manifest in `out`.
fn prepare(command: &str, a: &TrainArgs) -> CliResult<(RunManifest, Splits)> {
    let mut m = RunManifest::from_args(command, a)?;
    m.validate()?;
    let splits = build_splits(&mut m)?;
    create_dir(&a.out)?;
    m.write(&a.out)?;
    echo_manifest(&m);
    log::info!(
        "{} windows from {} sequences ({} too short): {}/{}/{} train/val/test",
        splits.summary.windows,
        splits.summary.sequences,
        splits.summary.short_sequences,
        splits.train.len(),
        splits.val.len(),
        splits.test.len()
    );
    Ok((m, splits))
}

fn train(a: &TrainArgs) -> CliResult<()> {
    let (m, splits) = prepare("train", a)?;
    let multi = m.seeds.len() > 1;
    let mut accuracies = Vec::new();
    let mut f1s = Vec::new();
    let mut runs = Vec::new();
    for &seed in &m.seeds {
        let dir = if multi { a.out.join(m.layout.seed_dir(seed)) } else { a.out.clone() };
        let (o, elapsed) = run_seed(&m, &m.model, &splits, seed, &dir)?;
        println!(
            "seed {seed}: best epoch {}/{}  test Acc {:.2}  Pre {:.2}  Rec {:.2}  F1 {:.2}  ({elapsed:.1} s)",
            o.best_epoch,
            o.epochs_run,
            100.0 * o.test.accuracy,
            100.0 * o.test.precision,
            100.0 * o.test.recall,
            100.0 * o.test.f1
        );
        accuracies.push(100.0 * o.test.accuracy);
        f1s.push(100.0 * o.test.f1);
        runs.push(json!({ "seed": seed, "accuracy": o.test.accuracy, "f1": o.test.f1, "elapsed_secs": elapsed,
                          "epochs_run": o.epochs_run, "best_epoch": o.best_epoch }));
    }
    let (acc_mean, acc_std) = mean_std(&accuracies);
    let (f1_mean, f1_std) = mean_std(&f1s);
    println!("test accuracy over {} seed(s): {acc_mean:.2} ± {acc_std:.2} %", m.seeds.len());
    let summary = json!({
        "seeds": m.seeds,
        "runs": runs,
        "accuracy_mean": acc_mean,
        "accuracy_std": acc_std,
        "f1_mean": f1_mean,
        "f1_std": f1_std,
    });
    write_file(&a.out.join(&m.layout.summary), serde_json::to_string_pretty(&summary).expect("serializes") + "\n")
}

fn ablate(a: &TrainArgs) -> CliResult<()> {
    let (m, splits) = prepare("ablate", a)?;
    let seed = m.seeds[0];
    let n = m.pipeline.n_points();
    let mut rows = Vec::new();
    for variant in Variant::ALL {
        let cfg = ModelConfig { variant, ..m.model.clone() };
        let macs = count_macs(&cfg, n)?;
        let params = count_params(&cfg)?;
        let (o, _) = run_seed(&m, &cfg, &splits, seed, &a.out.join(variant.name().to_lowercase()))?;
        rows.push((variant, macs, params, 100.0 * o.test.accuracy));
    }
    let mut table = format!(
        "{:<14}{:>16}{:>10}{:>12}{:>11}{:>10}\n",
        "Method", "MACs", "MACs(G)", "Params", "Params(M)", "Accuracy"
    );
    let mut csv = String::from("method,macs,params,accuracy\n");
    for (v, macs, params, acc) in &rows {
        table += &format!(
            "{:<14}{:>16}{:>10.3}{:>12}{:>11.3}{:>10.2}\n",
            v.name(),
            macs,
            *macs as f64 / 1e9,
            params,
            *params as f64 / 1e6,
            acc
        );
        csv += &format!("{},{macs},{params},{acc:.2}\n", v.name());
    }
    print!("{table}");
    write_file(&a.out.join("ablation.csv"), csv)
}

/// The run manifest a checkpoint was trained under, if it records one.
fn run_of(ck: &Checkpoint) -> Option<RunManifest> {
    serde_json::from_value(ck.manifest.extra.get("run")?.clone()).ok()
}

fn load_checkpoint(path: &Path) -> CliResult<Checkpoint> {
    let ck = Checkpoint::load(path).map_err(|e| CliError::data(e.to_string()))?;
    echo_manifest(&ck.manifest);
    Ok(ck)
}

/// Builds the model, reporting any name or shape mismatch as a
/// configuration error.
fn restore<T: Element>(ck: &Checkpoint) -> CliResult<Model<T>> {
    ck.to_model::<T>().map_err(|e| CliError::config(e.to_string()))
}

fn eval_samples(ck: &Checkpoint, a: &EvalArgs) -> CliResult<Vec<Sample>> {
    let run = run_of(ck);
    match &a.data {
        Some(list) => {
            let pipeline: PipelineConfig = run
                .map(|r| r.pipeline)
                .ok_or_else(|| CliError::config("checkpoint records no pipeline settings"))?;
            let seqs = load_manifest(list).map_err(|e| CliError::data(e.to_string()))?;
            let (samples, _) = windows_for_all(&seqs, &pipeline)?;
            if samples.is_empty() {
                return Err(CliError::data("no sequence is long enough for one window"));
            }
            Ok(samples)
        }
        None => {
            let mut run = run.ok_or_else(|| CliError::config("checkpoint records no run; pass --data"))?;
            run.model.num_classes = ck.manifest.model.num_classes;
            let s = build_splits(&mut run)?;
            Ok(match a.split {
                SplitName::Train => s.train,
                SplitName::Val => s.val,
                SplitName::Test => s.test,
            })
        }
    }
}

fn eval_as<T: Element>(ck: &Checkpoint, samples: &[Sample], a: &EvalArgs) -> CliResult<(f64, Metrics)> {
    let model = restore::<T>(ck)?;
    Ok(evaluate(&model, samples, a.batch, a.averaging.into())?)
}

fn eval(a: &EvalArgs) -> CliResult<()> {
    let ck = load_checkpoint(&a.checkpoint)?;
    let samples = eval_samples(&ck, a)?;
    let (loss, metrics) = match ck.manifest.dtype {
        DType::F32 => eval_as::<f32>(&ck, &samples, a)?,
        DType::F64 => eval_as::<f64>(&ck, &samples, a)?,
    };
    print!("{}", metrics_table(&metrics));
    let csv = confusion_csv(&metrics.confusion);
    match &a.confusion {
        Some(path) => write_file(path, csv)?,
        None => print!("\n{csv}"),
    }
    if let Some(path) = &a.json {
        let raw = json!({
            "samples": samples.len(),
            "loss": loss,
            "accuracy": metrics.accuracy,
            "precision": metrics.precision,
            "recall": metrics.recall,
            "f1": metrics.f1,
            "confusion": metrics.confusion,
        });
        write_file(path, serde_json::to_string_pretty(&raw).expect("serializes") + "\n")?;
    }
    Ok(())
}

fn infer_as<T: Element>(ck: &Checkpoint, a: &InferArgs) -> CliResult<()> {
    let model = restore::<T>(ck)?;
    let run = run_of(ck);
    let pick = |flag: Option<usize>, recorded: Option<usize>, name: &str| {
        flag.or(recorded)
            .ok_or_else(|| CliError::config(format!("checkpoint records no `{name}`; pass --{name}")))
    };
    let window = pick(a.window, run.as_ref().map(|r| r.pipeline.window_frames), "window")?;
    let points = pick(a.points, run.as_ref().map(|r| r.pipeline.points_per_frame), "points")?;
    let seed = a.data_seed.or(run.as_ref().map(|r| r.pipeline.seed)).unwrap_or(0);
    if window * points < model.config().k {
        return Err(CliError::config(format!(
            "invalid configuration: `k` = {} exceeds the {} points per window",
            model.config().k,
            window * points
        )));
    }

    let source = PathBuf::from("<stdin>");
    let stdin = io::stdin();
    let stdout = io::stdout();
    let mut out = stdout.lock();
    let mut lines = stdin.lock().lines().enumerate();
    let mut assembler: Option<StreamAssembler> = None;
    let mut last_index: Option<usize> = None;
    let mut emitted = 0usize;
    while let Some((i, line)) = lines.next() {
        let line = line.map_err(|e| CliError::data(format!("<stdin>: {e}")))?;
        if line.trim().is_empty() {
            continue;
        }
        let Some(asm) = assembler.as_mut() else {
            let header = parse_frame_header(&source, i + 1, &line)?;
            if header.channels != model.config().in_channels {
                return Err(CliError::data(format!(
                    "stream has {} channels, model expects {}",
                    header.channels,
                    model.config().in_channels
                )));
            }
            assembler = Some(StreamAssembler::new(header.channels, window, points, seed, a.sequence_id, header.label)?);
            continue;
        };
        let (index, values) = match parse_frame_line(&source, i + 1, &line, model.config().in_channels) {
            Ok(parsed) => parsed,
            Err(e) => {
                eprintln!("warning: skipping frame: {e}");
                continue;
            }
        };
        if last_index.is_some_and(|l| index <= l) {
            eprintln!("warning: skipping frame: <stdin>: line {}: frame index {index} is not increasing", i + 1);
            continue;
        }
        last_index = Some(index);
        if let Some(sample) = asm.push(&values)? {
            let (class, scores) = predict(&model, &[sample], 1)?.remove(0);
            let scores: Vec<String> = scores.iter().map(|s| format!("{s:.4}")).collect();
            writeln!(out, "{index} {class} {}", scores.join(" ")).map_err(|e| CliError::data(format!("<stdout>: {e}")))?;
            emitted += 1;
        }
    }
    log::info!("{emitted} predictions");
    Ok(())
}

fn infer(a: &InferArgs) -> CliResult<()> {
    let ck = load_checkpoint(&a.checkpoint)?;
    match ck.manifest.dtype {
        DType::F32 => infer_as::<f32>(&ck, a),
        DType::F64 => infer_as::<f64>(&ck, a),
    }
}

fn cost(a: &CostArgs) -> CliResult<()> {
    let base = ModelConfig {
        variant: a.variant,
        num_classes: a.classes,
        emb_dims: a.emb_dims.unwrap_or(ModelConfig::default().emb_dims),
        ..ModelConfig::default()
    };
    let ks = match &a.k_sweep {
        Some(s) => parse_sweep("k", s).map_err(CliError::config)?,
        None => vec![base.k],
    };
    let hs = match &a.head_sweep {
        Some(s) => parse_sweep("heads", s).map_err(CliError::config)?,
        None => vec![base.num_heads],
    };
    echo_manifest(&json!({ "model": base, "points": a.points, "k": ks, "heads": hs }));
    println!(
        "{:<6}{:<7}{:<14}{:>16}{:>10}{:>12}{:>11}",
        "k", "heads", "variant", "MACs", "MACs(G)", "params", "params(M)"
    );
    for &k in &ks {
        for &h in &hs {
            let cfg = ModelConfig { k, num_heads: h, ..base.clone() };
            if k > a.points {
                return Err(CliError::config(format!(
                    "invalid configuration: `k` = {k} exceeds the {} points per sample",
                    a.points
                )));
            }
            let macs = count_macs(&cfg, a.points)?;
            let params = count_params(&cfg)?;
            println!(
                "{:<6}{:<7}{:<14}{:>16}{:>10.3}{:>12}{:>11.3}",
                k,
                h,
                cfg.variant.name(),
                macs,
                macs as f64 / 1e9,
                params,
                params as f64 / 1e6
            );
        }
    }
    Ok(())
}

fn synth(a: &SynthArgs) -> CliResult<()> {
    let mut spec = SynthSpec::default();
    if let Some(v) = a.classes {
        spec.classes = v;
    }
    if let Some(v) = a.sequences_per_class {
        spec.sequences_per_class = v;
    }
    if let Some(v) = a.frames {
        spec.frames = v;
    }
    if let Some(v) = a.points {
        spec.points = v;
    }
    if let Some(v) = a.noise {
        spec.noise = v;
    }
    if let Some(v) = a.seed {
        spec.seed = v;
    }
    echo_manifest(&spec);
    let seqs = synth_generate(&spec)?;
    create_dir(&a.out)?;
    write_file(&a.out.join("synth.json"), serde_json::to_string_pretty(&spec).expect("serializes") + "\n")?;
    let mut listing = String::new();
    for (i, seq) in seqs.iter().enumerate() {
        let name = format!("seq-{i:05}.txt");
        write_frame_file(&a.out.join(&name), seq)?;
        listing += &name;
        listing.push('\n');
    }
    let list = a.out.join("data.list");
    write_file(&list, listing)?;
    println!("wrote {} sequences to {}", seqs.len(), list.display());
    Ok(())
}
