//! Variant × seed training sweeps.
//!
//! ```toml
//! axis = "pe_removal"
//! seeds = [0, 1, 2, 3, 4]
//!
//! [base.task]
//! kind = "position_probe"
//!
//! [[variants]]
//! name = "symmetric_product"
//! pe.mode = "symmetric_product"
//!
//! [[variants]]
//! name = "none"
//! pe.mode = "none"
//! ```
//!
//! Each variant is the base config with its tables merged on top. A variant
//! may only touch the sections its axis names.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::{with_jobs, Execution};
use crate::harness::config::ExperimentConfig;
use crate::harness::model::Model;
use crate::harness::task::Task;
use crate::harness::train::{train, TrainOptions};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    PeIntegration,
    KernelType,
    PeRemoval,
    ValuePe,
}

impl SweepAxis {
    /// Config sections a variant on this axis may override.
    pub fn sections(self) -> &'static [&'static str] {
        match self {
            SweepAxis::PeIntegration | SweepAxis::PeRemoval => &["pe"],
            SweepAxis::KernelType => &["kernel"],
            SweepAxis::ValuePe => &["value"],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSpec {
    axis: SweepAxis,
    seeds: Vec<u64>,
    #[serde(default)]
    base: toml::Table,
    variants: Vec<toml::Table>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Variant {
    pub name: String,
    pub config: ExperimentConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepSpec {
    pub axis: SweepAxis,
    pub seeds: Vec<u64>,
    pub base: ExperimentConfig,
    pub variants: Vec<Variant>,
}

fn merge(into: &mut toml::Table, from: &toml::Table) {
    for (k, v) in from {
        match (into.get_mut(k), v) {
            (Some(toml::Value::Table(a)), toml::Value::Table(b)) => merge(a, b),
            _ => {
                into.insert(k.clone(), v.clone());
            }
        }
    }
}

fn as_table(cfg: &ExperimentConfig) -> Result<toml::Table> {
    toml::Table::try_from(cfg).map_err(|e| Error::Config(format!("cannot serialize config: {e}")))
}

fn parse_config(table: toml::Table, what: &str) -> Result<ExperimentConfig> {
    ExperimentConfig::deserialize(toml::Value::Table(table))
        .map_err(|e| Error::Config(format!("{what}: {}", e.message())))
}

impl SweepSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        let raw: RawSpec = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let base = parse_config(raw.base.clone(), "base")?;
        let mut variants = Vec::with_capacity(raw.variants.len());
        for (i, mut over) in raw.variants.into_iter().enumerate() {
            let name = match over.remove("name") {
                Some(toml::Value::String(s)) => s,
                Some(_) => return Err(Error::Config(format!("variant {i}: name must be a string"))),
                None => format!("variant{i}"),
            };
            let mut table = raw.base.clone();
            merge(&mut table, &over);
            let config = parse_config(table, &format!("variant {name}"))?;
            variants.push(Variant { name, config });
        }
        let spec = Self {
            axis: raw.axis,
            seeds: raw.seeds,
            base,
            variants,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    /// Checks that variants are valid and differ from the base only along
    /// the axis.
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() || self.variants.is_empty() {
            return Err(Error::Config("a sweep needs at least one seed and one variant".into()));
        }
        let mut names: Vec<&str> = self.variants.iter().map(|v| v.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("variant names must be unique".into()));
        }
        let base = as_table(&self.base)?;
        let allowed = self.axis.sections();
        for v in &self.variants {
            let table = as_table(&v.config)?;
            for key in base.keys().chain(table.keys()) {
                if base.get(key) != table.get(key) && !allowed.contains(&key.as_str()) {
                    return Err(Error::Config(format!(
                        "variant {} changes [{key}], but a {:?} sweep may only change {allowed:?}",
                        v.name, self.axis
                    )));
                }
            }
            v.config
                .validate()
                .map_err(|e| Error::Config(format!("variant {}: {e}", v.name)))?;
        }
        Ok(())
    }
}

/// One (variant, seed) cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub variant: String,
    pub seed: u64,
    /// Final training loss.
    pub loss: f64,
    /// Test split.
    pub perplexity: f64,
    pub accuracy: f64,
    pub val_accuracy: f64,
    pub diverged: bool,
    pub param_count: usize,
    pub wall_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantSummary {
    pub variant: String,
    pub runs: usize,
    pub diverged: usize,
    pub param_count: usize,
    pub loss_mean: f64,
    pub loss_sd: f64,
    pub perplexity_mean: f64,
    pub perplexity_sd: f64,
    pub accuracy_mean: f64,
    pub accuracy_sd: f64,
    pub val_accuracy_mean: f64,
    /// Seed of the converged run with the highest validation accuracy.
    pub best_seed: Option<u64>,
    pub best_val_accuracy: f64,
    pub best_test_accuracy: f64,
}

/// Mean and sample standard deviation of the finite entries.
pub fn mean_sd(xs: impl IntoIterator<Item = f64>) -> (f64, f64) {
    let xs: Vec<f64> = xs.into_iter().filter(|x| x.is_finite()).collect();
    let n = xs.len() as f64;
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, f64::NAN);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub fn summarize(rows: &[SweepRow]) -> Vec<VariantSummary> {
    let mut order: Vec<&str> = Vec::new();
    for r in rows {
        if !order.contains(&r.variant.as_str()) {
            order.push(&r.variant);
        }
    }
    order
        .into_iter()
        .map(|name| {
            let rs: Vec<&SweepRow> = rows.iter().filter(|r| r.variant == name).collect();
            let ok: Vec<&&SweepRow> = rs.iter().filter(|r| !r.diverged).collect();
            let (loss_mean, loss_sd) = mean_sd(ok.iter().map(|r| r.loss));
            let (perplexity_mean, perplexity_sd) = mean_sd(ok.iter().map(|r| r.perplexity));
            let (accuracy_mean, accuracy_sd) = mean_sd(ok.iter().map(|r| r.accuracy));
            let (val_accuracy_mean, _) = mean_sd(ok.iter().map(|r| r.val_accuracy));
            let best = ok
                .iter()
                .filter(|r| r.val_accuracy.is_finite())
                .fold(None::<&&&SweepRow>, |b, r| match b {
                    Some(b) if b.val_accuracy >= r.val_accuracy => Some(b),
                    _ => Some(r),
                });
            VariantSummary {
                variant: name.to_string(),
                runs: rs.len(),
                diverged: rs.len() - ok.len(),
                param_count: rs.first().map_or(0, |r| r.param_count),
                loss_mean,
                loss_sd,
                perplexity_mean,
                perplexity_sd,
                accuracy_mean,
                accuracy_sd,
                val_accuracy_mean,
                best_seed: best.map(|r| r.seed),
                best_val_accuracy: best.map_or(f64::NAN, |r| r.val_accuracy),
                best_test_accuracy: best.map_or(f64::NAN, |r| r.accuracy),
            }
        })
        .collect()
}

/// Trains one cell; divergence becomes a flagged row.
pub fn run_cell(variant: &Variant, seed: u64) -> Result<SweepRow> {
    let mut cfg = variant.config.clone();
    cfg.train.seed = seed;
    let mc = cfg.model_config()?;
    let mut model = Model::init(&mc, seed)?;
    let task = Task::new(&cfg.task)?;
    let opts = TrainOptions {
        exec: Execution::Sequential,
        on_record: None,
    };
    let log = train(&mut model, &task, &cfg.train, opts)?;
    let diverged = log.outcome.diverged();
    let test = log.test.filter(|_| !diverged);
    Ok(SweepRow {
        variant: variant.name.clone(),
        seed,
        loss: log.final_loss,
        perplexity: test.map_or(f64::NAN, |m| m.perplexity),
        accuracy: test.map_or(f64::NAN, |m| m.accuracy),
        val_accuracy: log.validation.filter(|_| !diverged).map_or(f64::NAN, |m| m.accuracy),
        diverged,
        param_count: model.param_count(),
        wall_s: log.wall_s,
    })
}

/// Runs every cell on up to `jobs` threads. Rows come back in
/// (variant, seed) order whatever the completion order.
pub fn run_sweep(spec: &SweepSpec, jobs: usize) -> Result<Vec<SweepRow>> {
    let cells: Vec<(&Variant, u64)> = spec
        .variants
        .iter()
        .flat_map(|v| spec.seeds.iter().map(move |&s| (v, s)))
        .collect();
    let exec = if jobs > 1 {
        Execution::Parallel
    } else {
        Execution::Sequential
    };
    with_jobs(jobs, || exec.map(&cells, |&(v, s)| run_cell(v, s)))
        .into_iter()
        .collect()
}

fn write_csv<T: Serialize>(rows: &[T], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r).map_err(|e| Error::Config(format!("csv: {e}")))?;
    }
    w.flush().map_err(|e| Error::Config(format!("csv: {e}")))
}

/// Column order of the per-cell table.
pub const ROW_COLUMNS: [&str; 9] = [
    "variant",
    "seed",
    "loss",
    "perplexity",
    "accuracy",
    "val_accuracy",
    "diverged",
    "param_count",
    "wall_s",
];

/// Per-cell CSV. The header is written even when there are no rows.
pub fn rows_csv(rows: &[SweepRow]) -> Result<String> {
    let mut buf = Vec::new();
    if rows.is_empty() {
        writeln!(buf, "{}", ROW_COLUMNS.join(",")).expect("write to Vec");
    } else {
        write_csv(rows, &mut buf)?;
    }
    Ok(String::from_utf8(buf).expect("csv is UTF-8"))
}

pub fn summary_csv(summaries: &[VariantSummary]) -> Result<String> {
    let mut buf = Vec::new();
    write_csv(summaries, &mut buf)?;
    Ok(String::from_utf8(buf).expect("csv is UTF-8"))
}
