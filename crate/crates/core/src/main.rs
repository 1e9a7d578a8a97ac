use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ivnet::config::TrainConfig;
use ivnet::data::Dataset;
use ivnet::error::{Error, Result};
use ivnet::eval::evaluate;
use ivnet::harness::{ablate, export_attention, run_checks, seeds_from, Metric, DEFAULT_SEEDS};
use ivnet::ingest::UncertainPolicy;
use ivnet::scmgen::{generate_dataset, ScmConfig};
use ivnet::train::{train, Checkpoint};

#[derive(Parser, Debug)]
#[command(name = "ivnet", version, about = "Deconfounded multi-label image classification")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(clap::Args, Debug)]
struct Common {
    /// key=value config file
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the seed in the config
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory
    #[arg(long)]
    out: Option<PathBuf>,
    /// Uncertain-label policy: u-ones or u-zeros
    #[arg(long)]
    policy: Option<UncertainPolicy>,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Generate the synthetic confounded dataset
    Gen(Common),
    /// Train a model; writes checkpoint.json, metrics.csv and eval.csv
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from this checkpoint
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Per-class and mean AUC of a checkpoint on a manifest
    Eval {
        checkpoint: PathBuf,
        manifest: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Train the 8-configuration toggle grid; writes ablation.csv
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = DEFAULT_SEEDS)]
        seeds: usize,
        /// Report the AUC of this class instead of the mean AUC
        #[arg(long)]
        class: Option<usize>,
    },
    /// Export the attention heatmap of one sample and class
    Viz {
        checkpoint: PathBuf,
        manifest: PathBuf,
        #[arg(long, default_value_t = 0)]
        index: usize,
        #[arg(long, default_value_t = 0)]
        class: usize,
        #[command(flatten)]
        common: Common,
    },
    /// Run the gradient and invariant checks
    Check,
}

fn need<'a>(p: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
    p.as_deref().ok_or_else(|| Error::contract(format!("--{flag} is required")))
}

fn out_dir(c: &Common) -> Result<PathBuf> {
    let dir = need(&c.out, "out")?.to_path_buf();
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    Ok(dir)
}

fn train_config(c: &Common) -> Result<(TrainConfig, PathBuf)> {
    let path = need(&c.config, "config")?;
    let mut cfg = TrainConfig::read(path)?;
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(p) = c.policy {
        cfg.data.policy = p;
    }
    let base = path.parent().unwrap_or(Path::new(".")).to_path_buf();
    Ok((cfg, base))
}

fn load_split(cfg: &TrainConfig, base: &Path, p: &str, key: &str) -> Result<Dataset> {
    let path = cfg
        .resolve(base, p)
        .ok_or_else(|| Error::Config(format!("data.{key} is not set")))?;
    let d = &cfg.data;
    Dataset::load(&path, d.policy, d.resize_to, d.crop_to)
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn print_report(classes: &[String], r: &ivnet::eval::EvalReport) {
    for (c, a) in classes.iter().zip(&r.per_class) {
        match a {
            Some(v) => println!("{c}\t{v:.4}"),
            None => println!("{c}\tskipped"),
        }
    }
    println!("mean\t{:.4}", r.mean);
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Gen(c) => {
            let mut scm = ScmConfig::read(need(&c.config, "config")?)?;
            if let Some(s) = c.seed {
                scm.seed = s;
            }
            let dir = out_dir(&c)?;
            let w = generate_dataset(&scm)?.write(&dir)?;
            println!("{}\n{}\n{}", w.train_manifest.display(), w.test_manifest.display(), w.summary.display());
        }
        Cmd::Train { common, resume } => {
            let (cfg, base) = train_config(&common)?;
            let dir = out_dir(&common)?;
            let data = load_split(&cfg, &base, &cfg.data.train_manifest, "train_manifest")?;
            let eval = match cfg.data.eval_manifest.as_str() {
                "" => None,
                p => Some(load_split(&cfg, &base, p, "eval_manifest")?),
            };
            let ck = resume.as_deref().map(Checkpoint::load).transpose()?;
            let (state, log) = train(&cfg, &data, eval.as_ref(), ck.as_ref())?;
            Checkpoint::capture(&cfg, &data.classes, &state)?.save(&dir.join("checkpoint.json"))?;
            log.write(&dir)?;
            if let Some(r) = log.evals.last() {
                println!("step {} mean AUC {:.4}", r.step, r.mean);
            }
        }
        Cmd::Eval {
            checkpoint,
            manifest,
            common,
        } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let d = &ck.config.data;
            let data = Dataset::load(&manifest, common.policy.unwrap_or(d.policy), d.resize_to, d.crop_to)?;
            let r = evaluate(&ck.model()?, &data)?;
            print_report(&data.classes, &r);
        }
        Cmd::Ablate { common, seeds, class } => {
            let (cfg, base) = train_config(&common)?;
            let dir = out_dir(&common)?;
            let data = load_split(&cfg, &base, &cfg.data.train_manifest, "train_manifest")?;
            let ood = load_split(&cfg, &base, &cfg.data.eval_manifest, "eval_manifest")?;
            let metric = class.map_or(Metric::MeanAuc, Metric::ClassAuc);
            let grid = ablate(&cfg, &data, &ood, &seeds_from(cfg.seed, seeds), metric, |r| match &r.outcome {
                Ok(o) => eprintln!("model {} seed {}: {:.4}", r.model, r.seed, o.value),
                Err(e) => eprintln!("model {} seed {}: failed: {e}", r.model, r.seed),
            });
            let csv = grid.csv();
            write(&dir.join("ablation.csv"), &csv)?;
            print!("{csv}");
        }
        Cmd::Viz {
            checkpoint,
            manifest,
            index,
            class,
            common,
        } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let d = &ck.config.data;
            let data = Dataset::load(&manifest, common.policy.unwrap_or(d.policy), d.resize_to, d.crop_to)?;
            let sample = data
                .samples
                .get(index)
                .ok_or_else(|| Error::contract(format!("sample {index} out of range ({} samples)", data.len())))?;
            let dir = out_dir(&common)?;
            let path = dir.join(format!("attention_{index}_class{class}.ivr"));
            export_attention(&ck.model()?, sample, class, &path)?;
            println!("{}", path.display());
        }
        Cmd::Check => {
            let results = run_checks();
            let mut failed = 0;
            for r in &results {
                println!("{} {}: {}", if r.passed { "ok  " } else { "FAIL" }, r.name, r.detail);
                failed += usize::from(!r.passed);
            }
            if failed > 0 {
                return Err(Error::contract(format!("{failed} check(s) failed")));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
