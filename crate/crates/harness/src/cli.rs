//! Command-line interface.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use recttt_core::baselines::Method;
use recttt_core::data::Split;
use recttt_core::gradcheck::{self, Tolerance};

use crate::checkpoint::Checkpoint;
use crate::config::ExperimentConfig;
use crate::dataset;
use crate::error::{HarnessError, Result};
use crate::experiment::{self, Axis, StageLog};
use crate::report::Report;

#[derive(Debug, Parser)]
#[command(
    name = "recttt",
    about = "Test-time training by cross-reconstruction on a synthetic shift benchmark"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// JSON config file.
    #[arg(long)]
    pub config: PathBuf,
    /// Dotted-path override, e.g. `adapt.iterations=5`. Repeatable.
    #[arg(long = "set", value_name = "K=V")]
    pub overrides: Vec<String>,
}

impl ConfigArgs {
    pub fn load(&self) -> Result<ExperimentConfig> {
        ExperimentConfig::load(&self.config, &self.overrides)
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Pretrain the source backbone, train the joint model and baselines,
    /// write `model.ckpt` and `train_log.csv`.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value = "run")]
        out: PathBuf,
    },
    /// Evaluate one method over the corruption suite; writes report.csv and
    /// report.json.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
        /// recttt, source, ptbn or simsiam_ttt. Defaults to the config's.
        #[arg(long)]
        method: Option<String>,
        /// Output directory; defaults to the checkpoint's directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Grid evaluation along one axis; writes sweep_<axis>.csv/.json.
    Sweep {
        /// iterations, batch_size, depth or ensemble.
        #[arg(long)]
        axis: String,
        #[arg(long)]
        ckpt: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of every op and loss.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        instances: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Pooled features before and during adaptation, one CSV per corruption.
    DumpFeatures {
        #[arg(long)]
        ckpt: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the clean train and test sets of the first seed as raw f32
    /// files plus index.json.
    ExportData {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
}

fn out_dir(out: &Option<PathBuf>, ckpt: &Path) -> PathBuf {
    out.clone()
        .unwrap_or_else(|| ckpt.parent().map(Path::to_path_buf).unwrap_or_default())
}

fn load_ckpt(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).map_err(|e| match e {
        crate::checkpoint::CheckpointError::Io(io) => HarnessError::io(path, io),
        other => other.into(),
    })
}

/// Trains every configured seed and writes the checkpoint and loss log.
pub fn cmd_train(cfg: &ExperimentConfig, out: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(out).map_err(|e| HarnessError::io(out, e))?;
    let mut log = String::from("stage,seed,epoch,lr,steps,total,ce1,ce2,aux,kl\n");
    let bundles = experiment::train_all(cfg, &mut |s: StageLog| {
        let m = &s.log.mean;
        let _ = writeln!(
            log,
            "{},{},{},{},{},{},{},{},{},{}",
            s.stage, s.seed, s.log.epoch, s.log.lr, s.log.steps, m.total, m.ce1, m.ce2, m.aux, m.kl
        );
        eprintln!(
            "[{} seed {}] epoch {:>3} lr {:.4} loss {:.4} ce {:.4} aux {:.4} kl {:.4}",
            s.stage, s.seed, s.log.epoch, s.log.lr, m.total, m.ce1, m.aux, m.kl
        );
    })?;
    let log_path = out.join("train_log.csv");
    std::fs::write(&log_path, log).map_err(|e| HarnessError::io(&log_path, e))?;
    let ckpt_path = out.join("model.ckpt");
    experiment::to_checkpoint(cfg, &bundles)
        .save(&ckpt_path)
        .map_err(|e| match e {
            crate::checkpoint::CheckpointError::Io(io) => HarnessError::io(&ckpt_path, io),
            other => other.into(),
        })?;
    Ok(ckpt_path)
}

pub fn cmd_eval(cfg: &ExperimentConfig, ckpt: &Path, method: Method) -> Result<Report> {
    let bundles = experiment::from_checkpoint(cfg, &load_ckpt(ckpt)?)?;
    let jobs = experiment::eval_jobs(cfg, method);
    Ok(Report::new(
        &cfg.hash(),
        experiment::run_jobs(cfg, &bundles, &jobs)?,
    ))
}

pub fn cmd_sweep(cfg: &ExperimentConfig, ckpt: &Path, axis: Axis) -> Result<Report> {
    let bundles = experiment::from_checkpoint(cfg, &load_ckpt(ckpt)?)?;
    let jobs = experiment::sweep_jobs(cfg, axis);
    Ok(Report::new(
        &cfg.hash(),
        experiment::run_jobs(cfg, &bundles, &jobs)?,
    ))
}

/// Prints one line per case; fails with a numerical error if any case or
/// the stop-gradient contract fails.
pub fn cmd_gradcheck(instances: usize, seed: u64) -> Result<String> {
    let reports = gradcheck::run_suite(instances, Tolerance::default(), seed)?;
    let mut text = format!(
        "{:<28} {:>6} {:>12} {:>12}  result\n",
        "case", "elems", "max_rel", "max_abs"
    );
    let mut failed = Vec::new();
    for r in &reports {
        let ok = r.passed();
        let _ = writeln!(
            text,
            "{:<28} {:>6} {:>12.3e} {:>12.3e}  {}",
            r.name,
            r.elements,
            r.max_rel_err,
            r.max_abs_err,
            if ok { "pass" } else { "FAIL" }
        );
        if !ok {
            failed.push(r.name.clone());
        }
    }
    let (blocked, open) = gradcheck::stop_gradient_contract(seed)?;
    let sg_ok = blocked == 0.0 && open > 0.0;
    let _ = writeln!(
        text,
        "{:<28} blocked {blocked:e} unblocked {open:.3e}  {}",
        "stop_gradient_contract",
        if sg_ok { "pass" } else { "FAIL" }
    );
    if !sg_ok {
        failed.push("stop_gradient_contract".into());
    }
    if failed.is_empty() {
        Ok(text)
    } else {
        print!("{text}");
        Err(HarnessError::Numerical(format!(
            "gradient check failed: {}",
            failed.join(", ")
        )))
    }
}

pub fn cmd_export_data(cfg: &ExperimentConfig, out: &Path) -> Result<dataset::Index> {
    let seed = cfg.seeds[0];
    let train = experiment::train_set(cfg, seed)?;
    let test = experiment::test_set(cfg, seed)?;
    dataset::export(out, &[(Split::Train, &train), (Split::Test, &test)])
}

fn parse_method(s: &str) -> Result<Method> {
    s.parse()
        .map_err(|e: recttt_core::Error| HarnessError::Config(e.to_string()))
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { cfg, out } => {
            let cfg = cfg.load()?;
            let path = cmd_train(&cfg, &out)?;
            println!("wrote {}", path.display());
        }
        Command::Eval {
            ckpt,
            cfg,
            method,
            out,
        } => {
            let cfg = cfg.load()?;
            let method = parse_method(method.as_deref().unwrap_or(&cfg.method))?;
            let report = cmd_eval(&cfg, &ckpt, method)?;
            let dir = out_dir(&out, &ckpt);
            report.write(&dir, "report")?;
            print!("{}", report.to_csv()?);
        }
        Command::Sweep {
            axis,
            ckpt,
            cfg,
            out,
        } => {
            let cfg = cfg.load()?;
            let axis: Axis = axis.parse()?;
            let report = cmd_sweep(&cfg, &ckpt, axis)?;
            report.write(&out_dir(&out, &ckpt), &format!("sweep_{}", axis.name()))?;
            print!("{}", report.to_csv()?);
        }
        Command::Gradcheck { instances, seed } => {
            print!("{}", cmd_gradcheck(instances, seed)?);
        }
        Command::DumpFeatures { ckpt, cfg, out } => {
            let cfg = cfg.load()?;
            let bundles = experiment::from_checkpoint(&cfg, &load_ckpt(&ckpt)?)?;
            for p in experiment::dump_features(&cfg, &bundles[0], &out)? {
                println!("wrote {}", p.display());
            }
        }
        Command::ExportData { cfg, out } => {
            let cfg = cfg.load()?;
            let index = cmd_export_data(&cfg, &out)?;
            println!("wrote {} samples to {}", index.samples.len(), out.display());
        }
    }
    Ok(())
}
