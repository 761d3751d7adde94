//! `kattn`: train, evaluate, verify, sweep and count parameters.
//!
//! Exit status is 0 on success, 1 when a requested check fails and 2 on any
//! other error. Files go to `$KATTN_OUT_DIR` (default `kattn-out`).

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use kattn::harness::{
    evaluate, load_checkpoint, run_experiment, ExperimentConfig, LogRecord, Model, Split, Task, TrainOptions,
};
use kattn::verify::sweep::{rows_csv, summary_csv};
use kattn::verify::{run_suite, run_sweep, summarize, Suite, SweepSpec};
use kattn::Execution;
use serde_json::json;

const OUT_DIR_VAR: &str = "KATTN_OUT_DIR";

#[derive(Parser)]
#[command(name = "kattn", version, about = "Attention as a kernel smoother")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum SuiteArg {
    Equivalence,
    Equivariance,
    Smoother,
    Gradients,
    Params,
    All,
}

impl From<SuiteArg> for Suite {
    fn from(s: SuiteArg) -> Self {
        match s {
            SuiteArg::Equivalence => Suite::Equivalence,
            SuiteArg::Equivariance => Suite::Equivariance,
            SuiteArg::Smoother => Suite::Smoother,
            SuiteArg::Gradients => Suite::Gradients,
            SuiteArg::Params => Suite::Params,
            SuiteArg::All => Suite::All,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Validation,
    Test,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a config; streams the JSON-lines run log to stdout.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `train.seed`.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a checkpoint on a held-out split.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
    },
    /// Run a verification suite; prints one JSON report per line.
    Verify {
        #[arg(long, value_enum)]
        suite: SuiteArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Run trials on one thread.
        #[arg(long)]
        sequential: bool,
    },
    /// Train every variant × seed of a sweep spec; prints the CSV table.
    Sweep {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Parameter counts of the model a config describes.
    ParamCount {
        #[arg(long)]
        config: PathBuf,
    },
}

fn out_dir() -> Result<PathBuf> {
    let dir = std::env::var_os(OUT_DIR_VAR).map_or_else(|| PathBuf::from("kattn-out"), PathBuf::from);
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map_or_else(|| "run".into(), |s| s.to_string_lossy().into_owned())
}

fn train(config: &Path, seed: Option<u64>) -> Result<bool> {
    let mut cfg = ExperimentConfig::load(config)?;
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    let dir = out_dir()?;
    let name = format!("{}-seed{}", stem(config), cfg.train.seed);
    let log_path = dir.join(format!("{name}.jsonl"));
    let ckpt = dir.join(format!("{name}.ckpt"));
    let mut log = BufWriter::new(File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?);
    let mut io_err = None;
    let mut on_record = |r: &LogRecord| {
        let line = serde_json::to_string(r).expect("records serialize");
        println!("{line}");
        if let Err(e) = writeln!(log, "{line}").and_then(|_| log.flush()) {
            io_err.get_or_insert(e);
        }
    };
    let opts = TrainOptions {
        exec: Execution::Parallel,
        on_record: Some(&mut on_record),
    };
    let (model, run) = run_experiment(&cfg, Some(&ckpt), opts)?;
    if let Some(e) = io_err {
        return Err(e).context(format!("writing {}", log_path.display()));
    }
    let summary = json!({
        "config": config,
        "seed": run.seed,
        "outcome": run.outcome,
        "steps_run": run.steps_run,
        "final_loss": run.final_loss,
        "validation": run.validation,
        "test": run.test,
        "param_count": model.param_count(),
        "wall_s": run.wall_s,
        "init": run.init,
        "log": log_path,
        "checkpoint": ckpt,
    });
    let text = serde_json::to_string_pretty(&summary)?;
    fs::write(dir.join(format!("{name}.summary.json")), &text)?;
    eprintln!("{text}");
    Ok(true)
}

fn eval(config: &Path, ckpt: &Path, split: SplitArg) -> Result<bool> {
    let cfg = ExperimentConfig::load(config)?;
    let model = load_checkpoint(ckpt, &cfg.model_config()?)?;
    let task = Task::new(&cfg.task)?;
    let split = match split {
        SplitArg::Validation => Split::Validation,
        SplitArg::Test => Split::Test,
    };
    let m = evaluate(
        &model,
        &task,
        split,
        cfg.train.eval_size,
        cfg.train.eval_seed,
        Execution::Parallel,
    )?;
    println!("{}", serde_json::to_string(&m)?);
    Ok(true)
}

fn verify(suite: Suite, seed: u64, sequential: bool) -> Result<bool> {
    let exec = if sequential {
        Execution::Sequential
    } else {
        Execution::Parallel
    };
    eprintln!("verify suite={suite} seed={seed}");
    let reports = run_suite(suite, seed, exec)?;
    let dir = out_dir()?;
    let path = dir.join(format!("verify-{suite}-seed{seed}.jsonl"));
    let mut file = BufWriter::new(File::create(&path).with_context(|| format!("creating {}", path.display()))?);
    for r in &reports {
        let line = serde_json::to_string(r)?;
        println!("{line}");
        writeln!(file, "{line}")?;
        eprintln!("{}", r.summary_line());
    }
    file.flush()?;
    Ok(reports.iter().all(|r| r.passed))
}

fn sweep(spec_path: &Path, jobs: usize) -> Result<bool> {
    let spec = SweepSpec::load(spec_path)?;
    let rows = run_sweep(&spec, jobs)?;
    let table = rows_csv(&rows)?;
    let summary = summary_csv(&summarize(&rows))?;
    let dir = out_dir()?;
    let name = stem(spec_path);
    fs::write(dir.join(format!("{name}.csv")), &table)?;
    fs::write(dir.join(format!("{name}.summary.csv")), &summary)?;
    print!("{table}");
    eprint!("{summary}");
    Ok(true)
}

fn param_count(config: &Path) -> Result<bool> {
    let cfg = ExperimentConfig::load(config)?;
    let mc = cfg.model_config()?;
    let model = Model::init(&mc, 0)?;
    let per_layer = mc.attention(kattn::harness::Role::Decoder)?;
    let out = json!({
        "total": model.param_count(),
        "attention_kernel": model.attention_kernel_params(),
        "attention_kernel_per_layer": per_layer.kernel_param_count(),
        "pe_mode": mc.pe.mode.name(),
        "d_model": mc.d_model,
        "d_k": mc.d_k,
        "params": model.params.iter().map(|(n, t)| json!({"name": n, "shape": t.shape()})).collect::<Vec<_>>(),
    });
    println!("{}", serde_json::to_string(&out)?);
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train { config, seed } => train(&config, seed),
        Command::Eval { config, ckpt, split } => eval(&config, &ckpt, split),
        Command::Verify {
            suite,
            seed,
            sequential,
        } => verify(suite.into(), seed, sequential),
        Command::Sweep { spec, jobs } => sweep(&spec, jobs),
        Command::ParamCount { config } => param_count(&config),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
