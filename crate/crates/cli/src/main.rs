use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use edgeuda::edgelabel::CannyConfig;
use edgeuda::metrics::{evaluate, HausdorffMode, MetricsReport};
use edgeuda::pgm;
use edgeuda::synthdata::{self, derive_seed, Domain, SynthConfig};
use edgeuda::trainer::{self, Arm, Event, ModelBundle, TrainConfig};
use edgeuda::Error;

mod manifest;

use manifest::RunManifest;

fn config_help() -> String {
    let mut s = String::from("CONFIG FILE (one `key = value` per line, '#' starts a comment):\n");
    for (key, doc) in trainer::CONFIG_KEYS {
        s.push_str(&format!("  {key:<22} {doc}\n"));
    }
    s.push_str("A manifest.run written by `train` is also accepted as a config file.");
    s
}

const BENCH_HELP: &str = "OUTPUT: <out>/bench.csv with one row per (arm, seed, class):
  arm             no-uda | feat | edge | full
  seed            training seed
  class           c1 (core) | c2 (enhancing) | c3 (edema) | whole (union)
  source_dice     mean Dice on held-out source images after the last step
  target_dice     mean Dice on held-out target images after the last step
  source_hd       mean Hausdorff distance (pixels) over defined cases, NaN if none
  target_hd       as source_hd, on target images
  source_entropy  mean per-pixel prediction entropy (nats), source
  target_entropy  mean per-pixel prediction entropy (nats), target
Each run also writes its loss curve, metrics CSVs and checkpoint to <out>/<arm>_seed<seed>/.";

/// Edge-guided unsupervised domain adaptation for segmentation.
///
/// Exit codes: 0 success, 1 usage or config error, 2 data error, 3 numerical abort.
/// EDGEUDA_THREADS caps the worker threads.
#[derive(Parser, Debug)]
#[command(name = "edgeuda", version = manifest::VERSION)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic two-domain dataset as PGM files.
    Gen {
        #[arg(long)]
        out: PathBuf,
        /// Images per domain.
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train one arm, writing checkpoints, loss curve and metrics CSVs.
    #[command(after_help = config_help())]
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Ablation preset: no-uda, feat, edge or full.
        #[arg(long)]
        arm: Option<String>,
        /// Resume from a checkpoint.
        #[arg(long)]
        from: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a labelled PGM dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Replace the edge channel with zeros.
        #[arg(long)]
        no_edge_conditioning: bool,
        /// max or p<percentile>, e.g. p95.
        #[arg(long, default_value = "max")]
        hausdorff: String,
    },
    /// Segment one image and write _seg, _edge and _entropy PGMs.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out_prefix: PathBuf,
        #[arg(long)]
        no_edge_conditioning: bool,
    },
    /// Run all four arms over several seeds and compare them.
    #[command(after_help = BENCH_HELP)]
    Bench {
        #[arg(long, default_value_t = 3)]
        seeds: u64,
        #[arg(long)]
        out: PathBuf,
        /// Base config; defaults to the built-in benchmark settings.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override the number of training steps.
        #[arg(long)]
        steps: Option<u64>,
    },
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

fn load_config(path: &Path) -> anyhow::Result<TrainConfig> {
    let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    let body = RunManifest::config_section(&text).unwrap_or(&text);
    Ok(TrainConfig::parse(body)?)
}

fn parse_hausdorff(s: &str) -> anyhow::Result<HausdorffMode> {
    match s {
        "max" => Ok(HausdorffMode::Max),
        p if p.starts_with('p') => Ok(HausdorffMode::Percentile(
            p[1..].parse().map_err(|_| Error::Config(format!("bad hausdorff mode {s:?}")))?,
        )),
        _ => Err(Error::Config(format!("bad hausdorff mode {s:?}")).into()),
    }
}

fn cmd_gen(out: &Path, n: usize, size: usize, seed: u64) -> anyhow::Result<()> {
    let started = now();
    synthdata::check_dims(size, size)?;
    let synth = SynthConfig {
        height: size,
        width: size,
        ..SynthConfig::default()
    };
    let mut manifest = RunManifest::new("gen", seed, started);
    manifest.arg("n", n).arg("size", size);
    for domain in [Domain::Source, Domain::Target] {
        let name = match domain {
            Domain::Source => "source",
            Domain::Target => "target",
        };
        let samples = edgeuda::parallel::map_indexed(n, |i| synth.sample(domain, derive_seed(&[seed, i as u64])))
            .into_iter()
            .collect::<Result<Vec<_>, _>>()?;
        let dir = out.join(name);
        if dir.exists() {
            fs::remove_dir_all(&dir).with_context(|| format!("clearing {}", dir.display()))?;
        }
        for p in synthdata::export_pgm_dataset(&dir, &samples)? {
            manifest.output(&p, out);
        }
    }
    manifest.finish(out)
}

fn cmd_train(config: &Path, out: &Path, arm: Option<&str>, from: Option<&Path>) -> anyhow::Result<()> {
    let started = now();
    let mut cfg = load_config(config)?;
    if let Some(name) = arm {
        let arm = Arm::from_name(name).ok_or_else(|| Error::Config(format!("unknown arm {name:?}")))?;
        cfg.apply_arm(arm);
    }
    let start = from.map(ModelBundle::load).transpose()?;
    fs::create_dir_all(out)?;
    let mut manifest = RunManifest::new("train", cfg.seed, started);
    if let Some(a) = arm {
        manifest.arg("arm", a);
    }
    if let Some(f) = from {
        manifest.arg("from", f.display());
    }
    trainer::run_experiment_with(&cfg, start, Some(out), &mut |e| {
        if let Event::Eval { step, source, target } = e {
            eprintln!(
                "step {step}: source whole dice {:.3}, target whole dice {:.3}, target entropy {:.3}",
                source.whole_dice(),
                target.whole_dice(),
                target.mean_entropy
            );
        }
    })?;
    for f in [trainer::LOSS_CSV, trainer::SOURCE_METRICS_CSV, trainer::TARGET_METRICS_CSV, trainer::CHECKPOINT_FILE] {
        manifest.output(&out.join(f), out);
    }
    manifest.config = Some(cfg.to_text());
    manifest.finish(out)
}

fn cmd_eval(checkpoint: &Path, data: &Path, out: &Path, no_edge: bool, hausdorff: &str) -> anyhow::Result<()> {
    let mode = parse_hausdorff(hausdorff)?;
    let bundle = ModelBundle::load(checkpoint)?;
    let classes = bundle.spec().classes;
    let samples = synthdata::load_pgm_dataset(data, classes, &CannyConfig::default())?;
    if samples.iter().any(|s| s.label.is_none()) {
        bail!(Error::Data(format!("{}: evaluation needs a label for every image", data.display())));
    }
    let report = evaluate(&bundle, &samples, bundle.step, mode, !no_edge)?;
    let csv = format!("{}\n{}\n", MetricsReport::csv_header(classes), report.csv_row());
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(out, csv)?;
    println!("whole-tumour dice {:.4} over {} images", report.whole_dice(), report.samples);
    Ok(())
}

fn prefixed(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn cmd_infer(checkpoint: &Path, image: &Path, prefix: &Path, no_edge: bool) -> anyhow::Result<()> {
    let bundle = ModelBundle::load(checkpoint)?;
    let gray = pgm::read_pgm(image)?;
    let img = synthdata::normalize_intensity(&pgm::gray_to_signed(&gray));
    let out = trainer::infer_images(&bundle, &[&img], !no_edge)?;
    let classes = bundle.spec().classes;
    let seg = out.classes[0].map(|c| (c as usize * 255 / (classes - 1)) as u8);
    let edge = pgm::quantize_range(&out.edge_map(0), 0.0, 1.0);
    let entropy = pgm::quantize_range(&out.entropy_map(0), 0.0, (classes as f64).ln());
    if let Some(parent) = prefix.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    for (suffix, grid) in [("_seg.pgm", &seg), ("_edge.pgm", &edge), ("_entropy.pgm", &entropy)] {
        pgm::write_pgm(&prefixed(prefix, suffix), grid)?;
    }
    Ok(())
}

fn cmd_bench(seeds: u64, out: &Path, config: Option<&Path>, steps: Option<u64>) -> anyhow::Result<()> {
    let started = now();
    if seeds == 0 {
        bail!(Error::Config("--seeds must be at least 1".into()));
    }
    let mut base = match config {
        Some(p) => load_config(p)?,
        None => TrainConfig::benchmark(),
    };
    if let Some(s) = steps {
        base.steps = s;
        base.eval_every = base.eval_every.min(s);
        base.validate()?;
    }
    fs::create_dir_all(out)?;
    let seed_list: Vec<u64> = (0..seeds).collect();
    let runs = trainer::run_benchmark(&base, &Arm::ALL, &seed_list, Some(out))?;
    let csv_path = out.join("bench.csv");
    fs::write(&csv_path, trainer::benchmark_csv(&runs))?;
    for arm in Arm::ALL {
        let mine: Vec<_> = runs.iter().filter(|r| r.arm == arm).collect();
        let mean = |f: &dyn Fn(&trainer::ArmRun) -> f64| mine.iter().map(|r| f(r)).sum::<f64>() / mine.len() as f64;
        println!(
            "{arm:>7}: source whole dice {:.3}, target whole dice {:.3}, target entropy {:.3}",
            mean(&|r| r.source.whole_dice()),
            mean(&|r| r.target.whole_dice()),
            mean(&|r| r.target.mean_entropy)
        );
    }
    let mut manifest = RunManifest::new("bench", 0, started);
    manifest.arg("seeds", seeds);
    manifest.output(&csv_path, out);
    manifest.config = Some(base.to_text());
    manifest.finish(out)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Gen { out, n, size, seed } => cmd_gen(&out, n, size, seed),
        Command::Train { config, out, arm, from } => cmd_train(&config, &out, arm.as_deref(), from.as_deref()),
        Command::Eval {
            checkpoint,
            data,
            out,
            no_edge_conditioning,
            hausdorff,
        } => cmd_eval(&checkpoint, &data, &out, no_edge_conditioning, &hausdorff),
        Command::Infer {
            checkpoint,
            image,
            out_prefix,
            no_edge_conditioning,
        } => cmd_infer(&checkpoint, &image, &out_prefix, no_edge_conditioning),
        Command::Bench { seeds, out, config, steps } => cmd_bench(seeds, &out, config.as_deref(), steps),
    }
}

/// 1 usage/config, 2 data, 3 numerical.
fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::Config(_)) | Some(Error::InvalidArgument(_)) => 1,
        Some(Error::NumericalAbort { .. }) | Some(Error::NonFinite { .. }) => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    edgeuda::parallel::init_from_env();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
