//! Randomized checks of the smoother's defining properties.
//!
//! Every trial draws from its own ChaCha8 stream, derived from the command
//! seed, a per-check tag and the trial index, so results do not depend on
//! how trials are scheduled across threads.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::layer::standard_normal;
use crate::attention::{
    attend, attention_forward, attention_weights, build_mask, reference_softmax_attention, AttentionConfig,
    AttentionInputs, AttentionParams, AttnInput, FilterKind, FilterSpec, ValueMode,
};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::gradcheck::{finite_diff_grad, relative_error};
use crate::kernel::KernelForm;
use crate::positional::{attention_param_count, sinusoidal_pe, PeIntegration, PeMode, PeTable};
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::verify::report::{VerifyReport, Witness};

pub const EQUIVALENCE_TOL: f64 = 1e-6;
pub const EQUIVARIANCE_TOL: f64 = 1e-10;
/// Smallest output change that counts as a violation of equivariance.
pub const WITNESS_MIN_DEVIATION: f64 = 1e-3;
pub const MAX_WITNESS_ATTEMPTS: usize = 1000;
pub const STOCHASTIC_TOL: f64 = 1e-10;
pub const FD_STEP: f64 = 1e-5;
pub const GRADIENT_TOL: f64 = 1e-4;
/// Linear-kernel trials that must be rejected, out of 100.
pub const LINEAR_REJECTIONS: usize = 99;

/// Kernels admissible in the smoother.
pub const SMOOTHER_FORMS: [KernelForm; 3] = [KernelForm::Polynomial, KernelForm::Exponential, KernelForm::Rbf];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    Equivalence,
    Equivariance,
    Smoother,
    Gradients,
    Params,
    All,
}

impl Suite {
    pub const ALL: [Suite; 6] = [
        Suite::Equivalence,
        Suite::Equivariance,
        Suite::Smoother,
        Suite::Gradients,
        Suite::Params,
        Suite::All,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Equivalence => "equivalence",
            Suite::Equivariance => "equivariance",
            Suite::Smoother => "smoother",
            Suite::Gradients => "gradients",
            Suite::Params => "params",
            Suite::All => "all",
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown suite {s:?}")))
    }
}

/// Runs `suite` from `seed`.
pub fn run_suite(suite: Suite, seed: u64, exec: Execution) -> Result<Vec<VerifyReport>> {
    Ok(match suite {
        Suite::Equivalence => vec![
            equivalence(seed, 100, FilterKind::Full, exec)?,
            equivalence(seed, 100, FilterKind::Causal, exec)?,
        ],
        Suite::Equivariance => vec![
            full_equivariance(seed, 100, exec)?,
            key_set_invariance(seed, 100, exec)?,
            causal_witness(seed, 20, exec)?,
        ],
        Suite::Smoother => vec![smoother_invariants(seed, 20, exec)?, linear_rejection(seed, 100, exec)?],
        Suite::Gradients => vec![gradients(seed, exec)?],
        Suite::Params => params_checks(seed),
        Suite::All => {
            let mut out = Vec::new();
            for s in &Suite::ALL[..5] {
                out.extend(run_suite(*s, seed, exec)?);
            }
            out
        }
    })
}

fn trial_rng(seed: u64, tag: u64, trial: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((tag << 32) | trial as u64);
    rng
}

fn positions(from: i64, to: i64) -> Vec<i64> {
    (from..to).collect()
}

/// Even width in `2..=2·half_max`.
fn draw_width(rng: &mut ChaCha8Rng, half_max: usize) -> usize {
    2 * rng.gen_range(1..=half_max)
}

fn permutation(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(rng);
    p
}

struct Tally {
    report: VerifyReport,
    worst: f64,
}

impl Tally {
    fn new(report: VerifyReport) -> Self {
        Self { report, worst: 0.0 }
    }

    /// Records one trial; `ok` says whether it satisfied the property.
    fn record(&mut self, ok: bool, deviation: f64, witness: impl FnOnce() -> Witness) {
        self.report.trials += 1;
        if deviation.is_nan() || deviation > self.worst {
            self.worst = deviation;
        }
        if !ok {
            self.report.failures += 1;
            if self.report.witness.is_none() {
                self.report.witness = Some(witness());
            }
        }
    }

    fn finish(mut self, stat: &str, detail: String) -> VerifyReport {
        self.report.observe(stat, self.worst);
        self.report.passed = self.report.failures == 0 && self.report.trials > 0;
        self.report.detail = detail;
        self.report
    }
}

/// Kernel-smoother layer (exponential, asymmetric, direct sum, value with
/// PE) against textbook softmax attention on the same `x = f + t`.
pub fn equivalence(seed: u64, trials: usize, kind: FilterKind, exec: Execution) -> Result<VerifyReport> {
    let name = match kind {
        FilterKind::Full => "equivalence",
        _ => "equivalence_causal",
    };
    let tag = 10 + kind as u64;
    let results = exec.map_range(trials, |i| -> Result<(f64, Tensor)> {
        let mut rng = trial_rng(seed, tag, i);
        let d = draw_width(&mut rng, 8);
        let t_q = rng.gen_range(1..=8);
        let cross = i % 2 == 1;
        let t_k = if cross && kind == FilterKind::Full {
            rng.gen_range(1..=8)
        } else {
            t_q
        };
        let cfg = AttentionConfig::new(
            d,
            d,
            d,
            1,
            KernelForm::Exponential,
            false,
            PeIntegration::new(PeMode::DirectSum, 16),
            FilterSpec::of(kind),
            ValueMode::WithPe,
        )?;
        let params = AttentionParams::init(&cfg, &mut rng);
        let table = sinusoidal_pe(16, d)?;
        let f_q = standard_normal(t_q, d, &mut rng);
        let f_k = if cross {
            standard_normal(t_k, d, &mut rng)
        } else {
            f_q.clone()
        };
        let x = AttentionInputs::new(
            f_q,
            f_k,
            Some(&table),
            positions(0, t_q as i64),
            positions(0, t_k as i64),
        )?;
        let ours = attention_forward(&cfg, &params, &x)?;
        let xq = x.f_q.add(x.t_q.as_ref().expect("table given"))?;
        let xk = x.f_k.add(x.t_k.as_ref().expect("table given"))?;
        let w_k = params.w_k.as_ref().expect("asymmetric");
        let want = reference_softmax_attention(
            &params.w_q,
            w_k,
            &params.w_v,
            &params.w_o,
            &xq,
            &xk,
            1,
            kind == FilterKind::Causal,
        )?;
        Ok((ours.max_abs_diff(&want), xq))
    });
    let report = VerifyReport::new(name, seed).tolerance("max_abs_diff", EQUIVALENCE_TOL);
    let mut tally = Tally::new(report);
    for (i, r) in results.into_iter().enumerate() {
        let (dev, x) = r?;
        tally.record(dev <= EQUIVALENCE_TOL, dev, || {
            Witness::new(format!("trial {i}: layer and softmax reference disagree"), dev).with_input(&x)
        });
    }
    let detail = format!(
        "{} filter, T ≤ 8, d_model ≤ 16; max |Δ| = {:.3e}",
        kind.name(),
        tally.worst
    );
    Ok(tally.finish("max_abs_diff", detail))
}

/// Random single-head layer without positional information: any
/// admissible kernel, either symmetry, content-only values.
fn order_free_layer(rng: &mut ChaCha8Rng, filter: FilterSpec) -> Result<(AttentionConfig, AttentionParams)> {
    let d = draw_width(rng, 8);
    let form = *SMOOTHER_FORMS.choose(rng).expect("non-empty");
    let symmetric = rng.gen_bool(0.5);
    let cfg = AttentionConfig::new(
        d,
        d,
        d,
        1,
        form,
        symmetric,
        PeIntegration::new(PeMode::None, 16),
        filter,
        ValueMode::ContentOnly,
    )?;
    let params = AttentionParams::init(&cfg, rng);
    Ok((cfg, params))
}

fn self_out(cfg: &AttentionConfig, params: &AttentionParams, x: &Tensor) -> Result<Tensor> {
    attention_forward(cfg, params, &AttentionInputs::self_attention(x.clone(), None)?)
}

/// Rows of `x` reordered by `perm`, with each row keeping its embedding and
/// position.
fn permute_inputs(x: &AttentionInputs, perm: &[usize]) -> Result<AttentionInputs> {
    let t = x.t_q.as_ref().map(|t| t.gather_rows(perm)).transpose()?;
    let f = x.f_q.gather_rows(perm)?;
    let pos: Vec<i64> = perm.iter().map(|&i| x.pos_q[i]).collect();
    Ok(AttentionInputs {
        f_q: f.clone(),
        f_k: f,
        t_q: t.clone(),
        t_k: t,
        pos_q: pos.clone(),
        pos_k: pos,
    })
}

/// `Attention(πx) = π Attention(x)` for self-attention with a full filter.
/// Each row's embedding and position travel with it, so every PE mode is
/// covered; under `None` positions play no part at all.
pub fn full_equivariance(seed: u64, trials: usize, exec: Execution) -> Result<VerifyReport> {
    let results = exec.map_range(trials, |i| -> Result<(f64, Vec<usize>, Tensor)> {
        let mut rng = trial_rng(seed, 20, i);
        let d = draw_width(&mut rng, 8);
        let form = *SMOOTHER_FORMS.choose(&mut rng).expect("non-empty");
        let mode = if i % 2 == 0 {
            PeMode::None
        } else {
            *PeMode::ALL.choose(&mut rng).expect("non-empty")
        };
        let value = if rng.gen_bool(0.5) {
            ValueMode::WithPe
        } else {
            ValueMode::ContentOnly
        };
        let cfg = AttentionConfig::new(
            d,
            d,
            d,
            1,
            form,
            rng.gen_bool(0.5),
            PeIntegration::new(mode, 16),
            FilterSpec::full(),
            value,
        )?;
        let params = AttentionParams::init(&cfg, &mut rng);
        let t = rng.gen_range(2..=8);
        let x = AttentionInputs::self_attention(standard_normal(t, d, &mut rng), Some(&sinusoidal_pe(16, d)?))?;
        let perm = permutation(t, &mut rng);
        let lhs = attention_forward(&cfg, &params, &permute_inputs(&x, &perm)?)?;
        let rhs = attention_forward(&cfg, &params, &x)?.gather_rows(&perm)?;
        Ok((lhs.max_abs_diff(&rhs), perm, x.f_q))
    });
    let report = VerifyReport::new("equivariance_full", seed).tolerance("max_abs_diff", EQUIVARIANCE_TOL);
    let mut tally = Tally::new(report);
    for (i, r) in results.into_iter().enumerate() {
        let (dev, perm, x) = r?;
        tally.record(dev <= EQUIVARIANCE_TOL, dev, || {
            Witness::new(format!("trial {i}: permuted input did not permute the output"), dev)
                .with_permutation(&perm)
                .with_input(&x)
        });
    }
    let detail = format!(
        "full filter, rows permuted with their positions; max |Δ| = {:.3e}",
        tally.worst
    );
    Ok(tally.finish("max_abs_diff", detail))
}

/// A fixed query's output does not depend on the order of a fully visible
/// key set.
pub fn key_set_invariance(seed: u64, trials: usize, exec: Execution) -> Result<VerifyReport> {
    let results = exec.map_range(trials, |i| -> Result<(f64, Vec<usize>, Tensor)> {
        let mut rng = trial_rng(seed, 21, i);
        let (cfg, params) = order_free_layer(&mut rng, FilterSpec::full())?;
        let (t_q, t_k) = (rng.gen_range(1..=8), rng.gen_range(2..=8));
        let x_q = standard_normal(t_q, cfg.d_model, &mut rng);
        let x_k = standard_normal(t_k, cfg.d_model, &mut rng);
        let perm = permutation(t_k, &mut rng);
        let run = |k: Tensor| {
            let x = AttentionInputs::new(x_q.clone(), k, None, positions(0, t_q as i64), positions(0, t_k as i64))?;
            attention_forward(&cfg, &params, &x)
        };
        let dev = run(x_k.gather_rows(&perm)?)?.max_abs_diff(&run(x_k.clone())?);
        Ok((dev, perm, x_k))
    });
    let report = VerifyReport::new("key_set_invariance_full", seed).tolerance("max_abs_diff", EQUIVARIANCE_TOL);
    let mut tally = Tally::new(report);
    for (i, r) in results.into_iter().enumerate() {
        let (dev, perm, x) = r?;
        tally.record(dev <= EQUIVARIANCE_TOL, dev, || {
            Witness::new(format!("trial {i}: reordering the keys changed the output"), dev)
                .with_permutation(&perm)
                .with_input(&x)
        });
    }
    let detail = format!("full filter, permuted keys; max |Δ| = {:.3e}", tally.worst);
    Ok(tally.finish("max_abs_diff", detail))
}

struct Search {
    found: Option<(Vec<usize>, f64)>,
    attempts: usize,
    x: Tensor,
}

/// Looks for `π` with `|Attention(πx) − π Attention(x)| > WITNESS_MIN_DEVIATION`
/// under a causal filter. Adjacent transpositions come first: swapping keys
/// `i` and `i + 1` moves a key query `i` cannot see into its visible set.
fn witness_search(rng: &mut ChaCha8Rng) -> Result<Search> {
    let (cfg, params) = order_free_layer(rng, FilterSpec::causal())?;
    let t = rng.gen_range(2..=8);
    let x = standard_normal(t, cfg.d_model, rng);
    let base = self_out(&cfg, &params, &x)?;
    let mut attempts = 0;
    let mut candidates = (0..t - 1).map(|i| {
        let mut p: Vec<usize> = (0..t).collect();
        p.swap(i, i + 1);
        p
    });
    while attempts < MAX_WITNESS_ATTEMPTS {
        let perm = match candidates.next() {
            Some(p) => p,
            None => permutation(t, rng),
        };
        attempts += 1;
        let dev = self_out(&cfg, &params, &x.gather_rows(&perm)?)?.max_abs_diff(&base.gather_rows(&perm)?);
        if dev > WITNESS_MIN_DEVIATION {
            return Ok(Search {
                found: Some((perm, dev)),
                attempts,
                x,
            });
        }
    }
    Ok(Search {
        found: None,
        attempts,
        x,
    })
}

/// Every random causal layer admits a permutation that breaks
/// equivariance.
pub fn causal_witness(seed: u64, draws: usize, exec: Execution) -> Result<VerifyReport> {
    let results = exec.map_range(draws, |i| witness_search(&mut trial_rng(seed, 22, i)));
    let mut report = VerifyReport::new("non_equivariance_causal", seed)
        .tolerance("min_deviation", WITNESS_MIN_DEVIATION)
        .tolerance("max_attempts", MAX_WITNESS_ATTEMPTS as f64);
    let mut weakest: Option<(usize, Vec<usize>, f64, Tensor)> = None;
    let mut max_attempts = 0;
    for (i, r) in results.into_iter().enumerate() {
        let s = r?;
        report.trials += 1;
        max_attempts = max_attempts.max(s.attempts);
        match s.found {
            Some((perm, dev)) => {
                if weakest.as_ref().is_none_or(|w| dev < w.2) {
                    weakest = Some((i, perm, dev, s.x));
                }
            }
            None => {
                report.failures += 1;
                if report.witness.is_none() {
                    report.witness = Some(
                        Witness::new(
                            format!("draw {i}: no violating permutation in {} attempts", s.attempts),
                            0.0,
                        )
                        .with_input(&s.x),
                    );
                }
            }
        }
    }
    report.passed = report.failures == 0 && report.trials > 0;
    report.observe("max_attempts_used", max_attempts as f64);
    if let Some((i, perm, dev, x)) = weakest {
        report.observe("weakest_deviation", dev);
        if report.passed {
            report.witness = Some(
                Witness::new(
                    format!("draw {i}: weakest violation among {} draws", report.trials),
                    dev,
                )
                .with_permutation(&perm)
                .with_input(&x),
            );
        }
        report.detail = format!(
            "causal filter, no positions; every violation > {:.3e}, at most {max_attempts} attempts",
            dev
        );
    } else {
        report.detail = "causal filter: no violation found".into();
    }
    Ok(report)
}

/// Draws a filter of `kind` with random shape parameters.
fn draw_filter(kind: FilterKind, rng: &mut ChaCha8Rng) -> FilterSpec {
    match kind {
        FilterKind::CausalWithMemory => FilterSpec::with_memory(rng.gen_range(1..=3)),
        FilterKind::Strided => FilterSpec::strided(rng.gen_range(1..=3), rng.gen_range(1..=2)),
        k => FilterSpec::of(k),
    }
}

/// Self-attention over `t` fresh rows preceded by the filter's memory rows.
/// Query content is the last `t` rows of the key content.
fn segment(filter: &FilterSpec, t: usize, x: &Tensor, table: &PeTable) -> Result<AttentionInputs> {
    let mem = filter.memory();
    AttentionInputs::new(
        x.slice_rows(mem, t)?,
        x.clone(),
        Some(table),
        positions(0, t as i64),
        positions(-(mem as i64), t as i64),
    )
}

fn weight_violation(weights: &[Tensor], filter: &FilterSpec, t_q: usize, t_k: usize) -> Result<f64> {
    let mask = build_mask(filter, t_q, t_k)?;
    let mut worst: f64 = 0.0;
    for w in weights {
        for i in 0..t_q {
            let mut sum = 0.0;
            for j in 0..t_k {
                let v = w.get(i, j);
                if mask.get(i, j) {
                    worst = worst.max(-v);
                    sum += v;
                } else {
                    worst = worst.max(v.abs());
                }
            }
            worst = worst.max((sum - 1.0).abs());
        }
    }
    Ok(worst)
}

type Cell = (KernelForm, bool, PeMode, FilterKind);

fn smoother_cells() -> Vec<Cell> {
    let mut cells = Vec::new();
    for form in SMOOTHER_FORMS {
        for symmetric in [false, true] {
            for mode in PeMode::ALL {
                for kind in FilterKind::ALL {
                    cells.push((form, symmetric, mode, kind));
                }
            }
        }
    }
    cells
}

fn cell_name((form, symmetric, mode, kind): Cell) -> String {
    format!(
        "{}/{}/{}/{}",
        form.name(),
        if symmetric { "symmetric" } else { "asymmetric" },
        mode.name(),
        kind.name()
    )
}

/// Smoothing weights are non-negative, vanish off the filter and sum to one
/// on it, for every admissible kernel, symmetry, PE mode and filter.
pub fn smoother_invariants(seed: u64, per_cell: usize, exec: Execution) -> Result<VerifyReport> {
    let cells = smoother_cells();
    let results = exec.map_range(cells.len() * per_cell, |n| -> Result<(f64, Option<String>)> {
        let cell = cells[n / per_cell];
        let (form, symmetric, mode, kind) = cell;
        let mut rng = trial_rng(seed, 30, n);
        let d = draw_width(&mut rng, 4);
        let filter = draw_filter(kind, &mut rng);
        let value = if rng.gen_bool(0.5) {
            ValueMode::WithPe
        } else {
            ValueMode::ContentOnly
        };
        let cfg = AttentionConfig::new(d, d, d, 1, form, symmetric, PeIntegration::new(mode, 8), filter, value)?;
        let params = AttentionParams::init(&cfg, &mut rng);
        let t = rng.gen_range(1..=6);
        let t_k = t + filter.memory();
        let x = standard_normal(t_k, d, &mut rng);
        let inputs = segment(&filter, t, &x, &sinusoidal_pe(16, d)?)?;
        match attention_weights(&cfg, &params, &inputs) {
            Ok(w) => Ok((weight_violation(&w, &filter, t, t_k)?, None)),
            Err(e @ (Error::InvalidKernel { .. } | Error::DegenerateDenominator { .. })) => {
                Ok((f64::INFINITY, Some(format!("{}: {e}", cell_name(cell)))))
            }
            Err(e) => Err(e),
        }
    });
    let report = VerifyReport::new("smoother_invariants", seed).tolerance("row_sum_and_sign", STOCHASTIC_TOL);
    let mut tally = Tally::new(report);
    for (n, r) in results.into_iter().enumerate() {
        let (dev, err) = r?;
        let cell = cells[n / per_cell];
        tally.record(dev <= STOCHASTIC_TOL, dev, || {
            let what = err.unwrap_or_else(|| format!("{}: weights off by {dev:.3e}", cell_name(cell)));
            Witness::new(format!("trial {n}, {what}"), dev)
        });
    }
    let detail = format!(
        "{} cells × {per_cell} trials; worst violation {:.3e}",
        cells.len(),
        tally.worst
    );
    Ok(tally.finish("worst_violation", detail))
}

/// The linear kernel takes negative values, which the smoother rejects.
pub fn linear_rejection(seed: u64, trials: usize, exec: Execution) -> Result<VerifyReport> {
    let results = exec.map_range(trials, |i| -> Result<bool> {
        let mut rng = trial_rng(seed, 31, i);
        let d = draw_width(&mut rng, 4);
        let cfg = AttentionConfig::new(
            d,
            d,
            d,
            1,
            KernelForm::Linear,
            rng.gen_bool(0.5),
            PeIntegration::new(PeMode::None, 16),
            FilterSpec::full(),
            ValueMode::ContentOnly,
        )?;
        let params = AttentionParams::init(&cfg, &mut rng);
        let x = standard_normal(8, d, &mut rng);
        match attention_weights(&cfg, &params, &AttentionInputs::self_attention(x, None)?) {
            Err(Error::InvalidKernel { .. }) => Ok(true),
            Ok(_) | Err(Error::DegenerateDenominator { .. }) => Ok(false),
            Err(e) => Err(e),
        }
    });
    let mut report =
        VerifyReport::new("linear_kernel_rejected", seed).tolerance("min_rejections_per_100", LINEAR_REJECTIONS as f64);
    let mut rejected = 0;
    for r in results {
        report.trials += 1;
        if r? {
            rejected += 1;
        }
    }
    let rate = rejected as f64 / report.trials.max(1) as f64;
    report.failures = report.trials - rejected;
    report.observe("rejection_rate", rate);
    report.passed = rate * 100.0 >= LINEAR_REJECTIONS as f64;
    report.detail = format!("{rejected}/{} linear-kernel trials rejected as invalid", report.trials);
    if report.passed {
        report.failures = 0;
    } else {
        report.witness = Some(Witness::new("linear kernel accepted too often", rate));
    }
    Ok(report)
}

/// Every cell the gradient check covers, single head: admissible kernel × symmetry × PE
/// mode × filter × value mode.
pub fn gradient_cells() -> Vec<(Cell, ValueMode)> {
    smoother_cells()
        .into_iter()
        .flat_map(|c| [(c, ValueMode::ContentOnly), (c, ValueMode::WithPe)])
        .collect()
}

/// Largest relative gradient error of `Σ R ⊙ Attention(x)` over every
/// parameter and the input content, for one cell at T = 4, d_model = 8
/// with one head.
pub fn gradient_error(cell: Cell, value: ValueMode, rng: &mut ChaCha8Rng) -> Result<f64> {
    let (form, symmetric, mode, kind) = cell;
    let (t, d) = (4, 8);
    let filter = match kind {
        FilterKind::CausalWithMemory => FilterSpec::with_memory(2),
        k => FilterSpec::of(k),
    };
    let mem = filter.memory();
    let cfg = AttentionConfig::new(d, d, d, 1, form, symmetric, PeIntegration::new(mode, 8), filter, value)?;
    let params = AttentionParams::init(&cfg, rng);
    let table = sinusoidal_pe(16, d)?;
    let x = standard_normal(t + mem, d, rng);
    let r = standard_normal(t, d, rng);
    let objective = |p: &AttentionParams, x: &Tensor| -> Result<f64> {
        let out = attention_forward(&cfg, p, &segment(&filter, t, x, &table)?)?;
        Ok(out.mul(&r)?.sum())
    };

    let mut tape = Tape::new();
    let vars = params.attach(&mut tape, true);
    let xv = tape.leaf(x.clone());
    let f_q = if mem > 0 { tape.slice_rows(xv, mem, t)? } else { xv };
    let seg = segment(&filter, t, &x, &table)?;
    let t_q = seg.t_q.as_ref().map(|v| tape.constant(v.clone()));
    let t_k = if mem > 0 {
        seg.t_k.as_ref().map(|v| tape.constant(v.clone()))
    } else {
        t_q
    };
    let input = AttnInput {
        f_q,
        f_k: xv,
        t_q,
        t_k,
        pos_q: &seg.pos_q,
        pos_k: &seg.pos_k,
        batch: 1,
    };
    let out = attend(&mut tape, &cfg, &vars, &input)?;
    let rv = tape.constant(r.clone());
    let prod = tape.mul(out.out, rv)?;
    let loss = tape.sum(prod)?;
    tape.backward(loss)?;

    let mut worst: f64 = 0.0;
    for (k, (_, &v)) in vars.named().into_iter().enumerate() {
        let analytic = tape.grad_or_zeros(v);
        let numeric = finite_diff_grad(
            |w| {
                let mut p = params.clone();
                *p.named_mut()[k].1 = w.clone();
                objective(&p, &x)
            },
            params.named()[k].1,
            FD_STEP,
        )?;
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    let numeric = finite_diff_grad(|w| objective(&params, w), &x, FD_STEP)?;
    worst = worst.max(relative_error(&tape.grad_or_zeros(xv), &numeric));
    Ok(worst)
}

pub fn gradients(seed: u64, exec: Execution) -> Result<VerifyReport> {
    let cells = gradient_cells();
    let results = exec.map_range(cells.len(), |n| {
        let (cell, value) = cells[n];
        gradient_error(cell, value, &mut trial_rng(seed, 40, n))
    });
    let report = VerifyReport::new("gradients", seed)
        .tolerance("relative_error", GRADIENT_TOL)
        .tolerance("fd_step", FD_STEP);
    let mut tally = Tally::new(report);
    for (n, r) in results.into_iter().enumerate() {
        let err = r?;
        let (cell, value) = cells[n];
        tally.record(err < GRADIENT_TOL, err, || {
            Witness::new(format!("{}/{value:?}: relative error {err:.3e}", cell_name(cell)), err)
        });
    }
    let detail = format!(
        "{} cells at T=4, d_model=8; worst relative error {:.3e}",
        cells.len(),
        tally.worst
    );
    Ok(tally.finish("worst_relative_error", detail))
}

/// Exact parameter-count claims: the product kernels save a third, and the
/// value mode never changes the count.
pub fn params_checks(seed: u64) -> Vec<VerifyReport> {
    let mut ratio = VerifyReport::new("params_xl_vs_symmetric", seed).tolerance("ratio", 1.5);
    for d_model in (2..=64).step_by(2) {
        for d_k in (2..=64).step_by(2) {
            let xl = attention_param_count(&PeIntegration::new(PeMode::XlProduct, 16), false, d_model, d_k);
            let sym = attention_param_count(&PeIntegration::new(PeMode::SymmetricProduct, 16), false, d_model, d_k);
            ratio.trials += 1;
            if 2 * xl != 3 * sym {
                ratio.failures += 1;
                if ratio.witness.is_none() {
                    ratio.witness = Some(Witness::new(
                        format!("d_model={d_model}, d_k={d_k}: {xl} vs {sym}"),
                        xl as f64 / sym as f64,
                    ));
                }
            }
        }
    }
    let xl = attention_param_count(&PeIntegration::new(PeMode::XlProduct, 16), false, 512, 512);
    let sym = attention_param_count(&PeIntegration::new(PeMode::SymmetricProduct, 16), false, 512, 512);
    ratio.observe("xl_512", xl as f64);
    ratio.observe("symmetric_512", sym as f64);
    ratio.passed = ratio.failures == 0;
    ratio.detail = format!("ratio 3:2 on every grid point; d=512: {xl} vs {sym}");

    let mut parity = VerifyReport::new("params_value_mode_parity", seed);
    for mode in PeMode::ALL {
        for symmetric in [false, true] {
            let count = |value| -> Result<usize> {
                let cfg = AttentionConfig::new(
                    16,
                    8,
                    8,
                    2,
                    KernelForm::Exponential,
                    symmetric,
                    PeIntegration::new(mode, 16),
                    FilterSpec::causal(),
                    value,
                )?;
                Ok(AttentionParams::zeros(&cfg).param_count())
            };
            parity.trials += 1;
            let (a, b) = (count(ValueMode::WithPe), count(ValueMode::ContentOnly));
            if a.is_err() || a.as_ref().ok() != b.as_ref().ok() {
                parity.failures += 1;
                if parity.witness.is_none() {
                    parity.witness = Some(Witness::new(format!("{mode}: {a:?} vs {b:?}"), 0.0));
                }
            }
        }
    }
    parity.passed = parity.failures == 0;
    parity.detail = "value mode leaves the parameter count unchanged".into();
    vec![ratio, parity]
}
