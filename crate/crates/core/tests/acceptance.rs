//! Acceptance criteria, one PASS/FAIL line each. Exits non-zero if any fail.

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use kattn::harness::{
    evaluate, load_checkpoint, run_experiment, save_checkpoint, ExperimentConfig, Model, ModelInputs, Split, Task,
    TrainOptions,
};
use kattn::verify::{run_suite, Suite, VerifyReport};
use kattn::{Execution, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEED: u64 = 0;

struct Line {
    id: usize,
    name: &'static str,
    pass: bool,
    detail: String,
    elapsed: Duration,
    budget: Duration,
}

impl Line {
    fn print(&self) {
        let ok = self.pass && self.elapsed <= self.budget;
        println!(
            "{} criterion {:>2} {:<28} {:>8.2}s (budget {}s)  {}",
            if ok { "PASS" } else { "FAIL" },
            self.id,
            self.name,
            self.elapsed.as_secs_f64(),
            self.budget.as_secs(),
            self.detail
        );
    }

    fn ok(&self) -> bool {
        self.pass && self.elapsed <= self.budget
    }
}

fn timed<F: FnOnce() -> (bool, String)>(id: usize, name: &'static str, budget_s: u64, f: F) -> Line {
    let start = Instant::now();
    let (pass, detail) = f();
    let line = Line {
        id,
        name,
        pass,
        detail,
        elapsed: start.elapsed(),
        budget: Duration::from_secs(budget_s),
    };
    line.print();
    line
}

fn suite(s: Suite) -> Vec<VerifyReport> {
    run_suite(s, SEED, Execution::Parallel).expect("suite runs")
}

fn find<'a>(reports: &'a [VerifyReport], name: &str) -> &'a VerifyReport {
    reports
        .iter()
        .find(|r| r.check_name == name)
        .unwrap_or_else(|| panic!("no report {name}"))
}

/// Passed, with at least `trials` trials run.
fn judged(r: &VerifyReport, trials: usize) -> (bool, String) {
    let observed: Vec<String> = r.observed.iter().map(|(k, v)| format!("{k}={v:.3e}")).collect();
    (
        r.passed && r.trials >= trials,
        format!(
            "{}/{} trials; {}",
            r.trials - r.failures.min(r.trials),
            r.trials,
            observed.join(" ")
        ),
    )
}

fn config(name: &str) -> ExperimentConfig {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs")
        .join(name);
    ExperimentConfig::load(&path).expect("shipped config loads")
}

/// Test accuracy of one training run per seed.
fn accuracies(cfg: &ExperimentConfig, seeds: &[u64]) -> Vec<f64> {
    Execution::Parallel.map(seeds, |&seed| {
        let mut c = cfg.clone();
        c.train.seed = seed;
        let opts = TrainOptions {
            exec: Execution::Sequential,
            on_record: None,
        };
        let (_, log) = run_experiment(&c, None, opts).expect("training runs");
        log.test.map_or(f64::NAN, |m| m.accuracy)
    })
}

fn fmt(xs: &[f64]) -> String {
    xs.iter().map(|x| format!("{x:.4}")).collect::<Vec<_>>().join(",")
}

fn causality() -> (bool, String) {
    let filters = [
        "kind = \"causal\"",
        "kind = \"causal_with_memory\"\nmem_len = 4",
        "kind = \"strided\"\nstride = 3\nwindow = 2",
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let mut worst = 0.0f64;
    let mut cases = 0;
    let mut failures = 0;
    for filter in filters {
        for _ in 0..50 {
            let t: usize = rng.gen_range(2..=16);
            let text = format!(
                "[model]\nd_model = 16\nd_ff = 32\nn_layers = 2\nn_heads = 2\n[filter]\n{filter}\n\
                 [task]\nkind = \"char_lm\"\nseq_len = {t}\ncorpus_path = \"unused\"\n"
            );
            let mc = ExperimentConfig::from_toml(&text).unwrap().model_config().unwrap();
            let mut model = Model::init(&mc, rng.gen()).unwrap();
            for p in model.params.tensors_mut() {
                *p = p.add(&Tensor::randn(p.shape(), 0.3, &mut rng)).unwrap();
            }
            let tokens: Vec<usize> = (0..t).map(|_| rng.gen_range(0..256)).collect();
            let idx = rng.gen_range(0..t);
            let mut moved = tokens.clone();
            moved[idx] = (moved[idx] + rng.gen_range(1..256)) % 256;
            let a = model.logits(&ModelInputs::Lm { tokens: vec![tokens] }).unwrap();
            let b = model.logits(&ModelInputs::Lm { tokens: vec![moved] }).unwrap();
            let before = (0..idx)
                .flat_map(|r| a.row(r).iter().zip(b.row(r)).map(|(x, y)| (x - y).abs()))
                .fold(0.0, f64::max);
            worst = worst.max(before);
            cases += 1;
            if before != 0.0 {
                failures += 1;
            }
        }
    }
    (
        failures == 0,
        format!("{cases} cases, {failures} leaks, max change before index {worst:e}"),
    )
}

fn round_trip() -> (bool, String) {
    let mut cfg = config("copy.toml");
    cfg.train.steps = 20;
    cfg.train.eval_every = 20;
    cfg.train.eval_size = 32;
    cfg.train.target_accuracy = None;
    let (model, _) = run_experiment(&cfg, None, TrainOptions::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("copy.ckpt");
    save_checkpoint(&model, &path).unwrap();
    let back = load_checkpoint(&path, &model.config).unwrap();
    let task = Task::new(&cfg.task).unwrap();
    let eval = |m: &Model| evaluate(m, &task, Split::Test, 256, 11, Execution::Parallel).unwrap();
    let (a, b) = (eval(&model), eval(&back));
    let rel = |x: f64, y: f64| (x - y).abs() / x.abs().max(f64::MIN_POSITIVE);
    let worst = rel(a.cross_entropy, b.cross_entropy)
        .max(rel(a.perplexity, b.perplexity))
        .max(rel(a.accuracy, b.accuracy));
    (worst < 1e-6, format!("max relative metric change {worst:.3e}"))
}

fn main() -> ExitCode {
    let seeds: Vec<u64> = (0..5).collect();
    let lines = vec![
        timed(1, "softmax_equivalence", 5, || {
            judged(find(&suite(Suite::Equivalence), "equivalence"), 100)
        }),
        timed(2, "full_filter_equivariance", 10, || {
            judged(find(&suite(Suite::Equivariance), "equivariance_full"), 100)
        }),
        timed(3, "causal_non_equivariance", 30, || {
            judged(find(&suite(Suite::Equivariance), "non_equivariance_causal"), 20)
        }),
        timed(4, "smoother_invariants", 60, || {
            let r = suite(Suite::Smoother);
            let (a, da) = judged(find(&r, "smoother_invariants"), 120 * 20);
            let (b, db) = judged(find(&r, "linear_kernel_rejected"), 100);
            (a && b, format!("{da} | linear: {db}"))
        }),
        timed(5, "gradients", 120, || {
            judged(find(&suite(Suite::Gradients), "gradients"), 1)
        }),
        timed(6, "parameter_saving", 1, || {
            judged(find(&suite(Suite::Params), "params_xl_vs_symmetric"), 1)
        }),
        timed(7, "copy_task", 600, || {
            let acc = accuracies(&config("copy.toml"), &seeds);
            let hits = acc.iter().filter(|&&a| a >= 0.99).count();
            (
                hits >= 4,
                format!("{hits}/5 seeds reach 0.99; test accuracy [{}]", fmt(&acc)),
            )
        }),
        timed(8, "pe_removal_probe", 900, || {
            let chance = 1.0 / 16.0;
            let none = accuracies(&config("probe_no_pe.toml"), &seeds);
            let sym = accuracies(&config("probe.toml"), &seeds);
            let none_ok = none.iter().all(|a| (a - chance).abs() <= 0.05);
            let sym_ok = sym.iter().all(|&a| a > 0.9);
            (
                none_ok && sym_ok,
                format!(
                    "none [{}] vs chance {chance}; symmetric_product [{}]",
                    fmt(&none),
                    fmt(&sym)
                ),
            )
        }),
        timed(9, "lm_causality", 10, causality),
        timed(10, "checkpoint_round_trip", 5, round_trip),
    ];
    let failed = lines.iter().filter(|l| !l.ok()).count();
    println!("acceptance: {}/{} criteria pass", lines.len() - failed, lines.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
