//! ctxdiff: generate toy data, train, sample, evaluate the NELBO and run the
//! verification suite. Every command writes a manifest.json next to its
//! outputs.

mod config;
mod manifest;
mod svg;

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde_json::{json, Value};

use ctxdiff::nn::Checkpoint;
use ctxdiff::training::{self, compare_nelbo, embedded_config, write_metrics_csv};
use ctxdiff::verify::{self, SuiteOptions};
use ctxdiff::{
    DatasetSpec, Fault, NelboOptions, SamplerConfig, SamplerMode, ToyDataset, ToyModel, TrainConfig, TrainState,
};

use config::{read_object, resolve, set};
use manifest::RunManifest;

#[derive(Debug, Parser)]
#[command(name = "ctxdiff", version, about = "Contextualized diffusion on toy data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// JSON config for the chosen command; flags override its fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed; overrides the config's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory [default: runs/<command>].
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads for parallel sections; results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum GeneratorKind {
    ToyGaussian,
    TwoMoons,
    SwissRoll,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a labeled dataset CSV (header x_1..x_d,class).
    GenData {
        #[arg(long)]
        count: Option<usize>,
        /// Replaces the config's generator; toy-gaussian uses μ = (±2, 0), σ = 0.5.
        #[arg(long, value_enum)]
        generator: Option<GeneratorKind>,
        /// Noise level for two-moons and swiss-roll.
        #[arg(long)]
        noise: Option<f64>,
    },
    /// Train a model; writes checkpoint.ckpt and metrics.csv.
    Train {
        /// Dataset CSV; overrides the config's dataset field.
        #[arg(long)]
        dataset: Option<String>,
        #[arg(long)]
        steps: Option<u64>,
    },
    /// Draw samples from a checkpoint; writes samples.csv.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Training config the checkpoint must match.
        #[arg(long)]
        train_config: Option<PathBuf>,
        #[arg(long, value_parser = parse_serde::<SamplerMode>)]
        sampler: Option<SamplerMode>,
        #[arg(long)]
        stride: Option<usize>,
        #[arg(long)]
        eta: Option<f64>,
        /// Samples drawn for each class.
        #[arg(long, default_value_t = 1000)]
        per_class: usize,
        /// Also write samples.svg (2-D models only).
        #[arg(long)]
        svg: bool,
    },
    /// Variational bound in bits/dim; paired comparison with --baseline.
    Nelbo {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Baseline checkpoint evaluated on the same records and noise.
        #[arg(long)]
        baseline: Option<PathBuf>,
        #[arg(long)]
        dataset: PathBuf,
        /// Training config the checkpoint must match.
        #[arg(long)]
        train_config: Option<PathBuf>,
        /// Evaluate only the first N records.
        #[arg(long)]
        records: Option<usize>,
        #[arg(long)]
        mc_samples: Option<usize>,
        #[arg(long, default_value_t = 2000)]
        resamples: usize,
    },
    /// Run the verification suite; exits 1 if any check fails.
    Verify {
        #[arg(long, value_parser = parse_serde::<Fault>)]
        fault: Option<Fault>,
        /// Zero adapter only.
        #[arg(long)]
        zero_only: bool,
        /// Monte-Carlo draws per toy-oracle grid point.
        #[arg(long)]
        mc_samples: Option<usize>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenData { .. } => "gen-data",
            Command::Train { .. } => "train",
            Command::Sample { .. } => "sample",
            Command::Nelbo { .. } => "nelbo",
            Command::Verify { .. } => "verify",
        }
    }
}

/// Parses a flag through the type's serde representation.
fn parse_serde<T: DeserializeOwned>(s: &str) -> std::result::Result<T, String> {
    serde_json::from_value(Value::String(s.to_string())).map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

/// Ok(false) means the command ran but reported a failure.
fn run(cli: Cli) -> Result<bool> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().context("configuring thread pool")?;
    }
    let out = cli.out.clone().unwrap_or_else(|| Path::new("runs").join(cli.command.name()));
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let doc = read_object(cli.config.as_deref())?;
    match cli.command {
        Command::GenData { count, generator, noise } => gen_data(doc, cli.seed, &out, count, generator, noise),
        Command::Train { dataset, steps } => train(doc, cli.seed, &out, dataset, steps),
        Command::Sample {
            checkpoint,
            train_config,
            sampler,
            stride,
            eta,
            per_class,
            svg,
        } => {
            let mut doc = doc;
            set(&mut doc, "mode", sampler)?;
            set(&mut doc, "stride", stride)?;
            set(&mut doc, "eta", eta)?;
            set(&mut doc, "seed", cli.seed)?;
            let cfg: SamplerConfig = resolve(doc, "sampler")?;
            sample(&checkpoint, train_config.as_deref(), cfg, per_class, svg, &out)
        }
        Command::Nelbo {
            checkpoint,
            baseline,
            dataset,
            train_config,
            records,
            mc_samples,
            resamples,
        } => {
            let mut doc = doc;
            set(&mut doc, "seed", cli.seed)?;
            set(&mut doc, "mc_samples", mc_samples)?;
            let opts: NelboOptions = resolve(doc, "nelbo")?;
            let inputs = NelboInputs {
                checkpoint: &checkpoint,
                baseline: baseline.as_deref(),
                dataset: &dataset,
                train_config: train_config.as_deref(),
                records,
                resamples,
            };
            nelbo(inputs, opts, &out)
        }
        Command::Verify {
            fault,
            zero_only,
            mc_samples,
        } => {
            let mut doc = doc;
            set(&mut doc, "seed", cli.seed)?;
            set(&mut doc, "fault", fault)?;
            set(&mut doc, "mc_samples", mc_samples)?;
            if zero_only {
                set(&mut doc, "zero_only", Some(true))?;
            }
            let opts: SuiteOptions = resolve(doc, "verify")?;
            run_verify(opts, &out)
        }
    }
}

fn gen_data(
    mut doc: serde_json::Map<String, Value>,
    seed: Option<u64>,
    out: &Path,
    count: Option<usize>,
    generator: Option<GeneratorKind>,
    noise: Option<f64>,
) -> Result<bool> {
    if let Some(kind) = generator {
        let g = match kind {
            GeneratorKind::ToyGaussian => json!({"kind": "toy-gaussian", "model": ToyModel::two_class()}),
            GeneratorKind::TwoMoons => json!({"kind": "two-moons", "noise": noise.unwrap_or(0.1)}),
            GeneratorKind::SwissRoll => json!({"kind": "swiss-roll", "noise": noise.unwrap_or(0.1)}),
        };
        doc.insert("generator".into(), g);
    } else if let (Some(n), Some(Value::Object(g))) = (noise, doc.get_mut("generator")) {
        g.insert("noise".into(), json!(n));
    }
    if !doc.contains_key("generator") {
        doc.insert("generator".into(), json!({"kind": "toy-gaussian", "model": ToyModel::two_class()}));
    }
    set(&mut doc, "count", count)?;
    set(&mut doc, "seed", seed)?;
    let spec: DatasetSpec = resolve(doc, "dataset")?;
    let data = ToyDataset::generate(&spec)?;
    let path = out.join("data.csv");
    data.save(&path)?;
    let mut m = RunManifest::new("gen-data", &spec, spec.seed)?;
    m.dataset_fingerprint = Some(data.fingerprint());
    m.output(&path)?;
    m.write(out)?;
    println!("wrote {} records to {}", data.len(), path.display());
    Ok(true)
}

fn train(
    mut doc: serde_json::Map<String, Value>,
    seed: Option<u64>,
    out: &Path,
    dataset: Option<String>,
    steps: Option<u64>,
) -> Result<bool> {
    set(&mut doc, "dataset", dataset)?;
    set(&mut doc, "steps", steps)?;
    set(&mut doc, "seed", seed)?;
    let cfg: TrainConfig = resolve(doc, "train")?;
    let data_path = Path::new(&cfg.dataset);
    if !data_path.is_file() {
        bail!("dataset: no such file {}", data_path.display());
    }
    let data = ToyDataset::load(data_path, Some(cfg.denoiser.classes)).context("dataset")?;
    let started = Instant::now();
    let outcome = training::train(&cfg, &data).context("training failed")?;
    let ckpt_path = out.join("checkpoint.ckpt");
    outcome.state.to_checkpoint(&cfg).save(&ckpt_path)?;
    let metrics_path = out.join("metrics.csv");
    write_metrics_csv(&outcome.metrics, BufWriter::new(File::create(&metrics_path)?))?;
    let mut m = RunManifest::new("train", &cfg, cfg.seed)?;
    m.dataset_fingerprint = Some(data.fingerprint());
    m.checkpoint(&ckpt_path)?;
    m.output(&metrics_path)?;
    m.write(out)?;
    println!(
        "trained {} steps in {:.1}s, final loss {:.6}, checkpoint {}",
        outcome.state.step,
        started.elapsed().as_secs_f64(),
        outcome.state.last_loss,
        ckpt_path.display()
    );
    Ok(true)
}

/// Loads a checkpoint, checking it against `train_config` when given.
fn load_state(checkpoint: &Path, train_config: Option<&Path>) -> Result<(TrainConfig, TrainState, Checkpoint)> {
    let ckpt = Checkpoint::load(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    let cfg = match train_config {
        Some(p) => resolve::<TrainConfig>(read_object(Some(p))?, "train")?,
        None => embedded_config(&ckpt)?,
    };
    let state = TrainState::from_checkpoint(&cfg, &ckpt).with_context(|| format!("restoring {}", checkpoint.display()))?;
    Ok((cfg, state, ckpt))
}

fn sample(
    checkpoint: &Path,
    train_config: Option<&Path>,
    cfg: SamplerConfig,
    per_class: usize,
    want_svg: bool,
    out: &Path,
) -> Result<bool> {
    let (train_cfg, state, _) = load_state(checkpoint, train_config)?;
    let model = &state.model;
    let (dim, classes) = (train_cfg.denoiser.dim, train_cfg.denoiser.classes);
    let labels: Vec<usize> = (0..classes).flat_map(|c| std::iter::repeat_n(c, per_class)).collect();
    let set = model.reverse().sample_chain_classes(&labels, &cfg)?;
    let path = out.join("samples.csv");
    set.write_csv(dim, BufWriter::new(File::create(&path)?))?;
    let mut m = RunManifest::new("sample", &cfg, cfg.seed)?;
    m.checkpoint_hash = Some(manifest::blob_hash(&fs::read(checkpoint)?));
    m.output(&path)?;
    if want_svg {
        if dim == 2 {
            let points: Vec<_> = (0..set.len()).map(|i| (set.samples[[i, 0]], set.samples[[i, 1]], set.classes[i])).collect();
            let svg_path = out.join("samples.svg");
            fs::write(&svg_path, svg::scatter(&points, &format!("{} samples, seed {}", cfg.mode.as_str(), cfg.seed)))?;
            m.output(&svg_path)?;
        } else {
            eprintln!("warning: --svg needs a 2-D model, got d = {dim}; skipped");
        }
    }
    m.write(out)?;
    for c in 0..classes {
        if let Some(mean) = set.class_mean(c) {
            println!("class {c}: mean {mean:?}");
        }
    }
    println!("wrote {} samples to {}", set.len(), path.display());
    Ok(true)
}

struct NelboInputs<'a> {
    checkpoint: &'a Path,
    baseline: Option<&'a Path>,
    dataset: &'a Path,
    train_config: Option<&'a Path>,
    records: Option<usize>,
    resamples: usize,
}

fn nelbo(inp: NelboInputs<'_>, opts: NelboOptions, out: &Path) -> Result<bool> {
    let (cfg, state, _) = load_state(inp.checkpoint, inp.train_config)?;
    let mut data = ToyDataset::load(inp.dataset, Some(cfg.denoiser.classes)).context("dataset")?;
    if let Some(n) = inp.records {
        data = data.head(n);
    }
    let eval = |st: &TrainState| {
        let m = &st.model;
        training::nelbo(&m.schedule, &m.adapter, &m.denoiser, &data, &opts)
    };
    let ctx = eval(&state)?;
    let mut report = json!({"options": opts, "contextdiff": ctx});
    println!("contextdiff: {:.6} bits/dim", ctx.bits_per_dim);
    if let Some(b) = inp.baseline {
        let (_, base_state, _) = load_state(b, None)?;
        let base = eval(&base_state)?;
        let paired = compare_nelbo(&ctx, &base, inp.resamples, opts.seed)?;
        println!("baseline:    {:.6} bits/dim", base.bits_per_dim);
        println!(
            "difference:  {:+.6} bits/dim, 95% CI [{:+.6}, {:+.6}]",
            paired.difference, paired.ci.lo, paired.ci.hi
        );
        report["baseline"] = serde_json::to_value(&base)?;
        report["paired"] = serde_json::to_value(paired)?;
    }
    let path = out.join("nelbo.json");
    fs::write(&path, format!("{}\n", serde_json::to_string_pretty(&report)?))?;
    let mut m = RunManifest::new("nelbo", &opts, opts.seed)?;
    m.dataset_fingerprint = Some(data.fingerprint());
    m.checkpoint_hash = Some(manifest::blob_hash(&fs::read(inp.checkpoint)?));
    m.output(&path)?;
    m.write(out)?;
    Ok(true)
}

fn run_verify(opts: SuiteOptions, out: &Path) -> Result<bool> {
    let (report, sweep) = verify::run_suite(&opts)?;
    for c in &report.checks {
        println!(
            "{} {:<58} dev {:.3e} tol {:.1e}",
            if c.pass { "PASS" } else { "FAIL" },
            c.check,
            c.max_deviation,
            c.tolerance
        );
    }
    let failed = report.checks.iter().filter(|c| !c.pass).count();
    println!("{} checks, {} failed", report.checks.len(), failed);
    let path = out.join("verify.json");
    fs::write(&path, format!("{}\n", serde_json::to_string_pretty(&report)?))?;
    let sweep_path = out.join("toy_sweep.csv");
    verify::write_sweep_csv(&sweep, BufWriter::new(File::create(&sweep_path)?))?;
    let mut m = RunManifest::new("verify", &opts, opts.seed)?;
    m.output(&path)?;
    m.output(&sweep_path)?;
    m.write(out)?;
    Ok(report.pass)
}
