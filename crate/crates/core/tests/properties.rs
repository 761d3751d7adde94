//! Randomized invariants of tensors, kernels, positional integration and
//! the smoother.

use kattn::attention::layer::standard_normal;
use kattn::attention::{attention_weights, AttentionParams};
use kattn::kernel::kernel_factor;
use kattn::{
    attention_forward, build_mask, joint_scores, kernel_scores, reference_softmax_attention, sinusoidal_pe,
    AttentionConfig, AttentionInputs, Error, FilterKind, FilterSpec, KernelForm, KernelParams, KernelSpec,
    PeIntegration, PeMode, Tape, Tensor, ValueMode,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn form() -> impl Strategy<Value = KernelForm> {
    prop::sample::select(KernelForm::ALL.to_vec())
}

fn smoother_form() -> impl Strategy<Value = KernelForm> {
    prop::sample::select(vec![KernelForm::Polynomial, KernelForm::Exponential, KernelForm::Rbf])
}

fn pe_mode() -> impl Strategy<Value = PeMode> {
    prop::sample::select(PeMode::ALL.to_vec())
}

fn filter() -> impl Strategy<Value = FilterSpec> {
    prop_oneof![
        Just(FilterSpec::full()),
        Just(FilterSpec::causal()),
        (1usize..4).prop_map(FilterSpec::with_memory),
        (1usize..4, 1usize..3).prop_map(|(s, w)| FilterSpec::strided(s, w)),
    ]
}

fn single(
    d: usize,
    form: KernelForm,
    sym: bool,
    mode: PeMode,
    filter: FilterSpec,
    value: ValueMode,
) -> AttentionConfig {
    AttentionConfig::single_head(d, form, sym, PeIntegration::new(mode, 8), filter, value).unwrap()
}

/// Self-attention over `t` rows after the filter's memory prefix.
fn inputs(filter: &FilterSpec, t: usize, d: usize, seed: u64) -> AttentionInputs {
    let mem = filter.memory();
    let x = standard_normal(t + mem, d, &mut rng(seed));
    let q: Vec<i64> = (0..t as i64).collect();
    let k: Vec<i64> = (-(mem as i64)..t as i64).collect();
    AttentionInputs::new(
        x.slice_rows(mem, t).unwrap(),
        x,
        Some(&sinusoidal_pe(16, d).unwrap()),
        q,
        k,
    )
    .unwrap()
}

// ---- tensor-core ----

#[test]
fn matmul_examples() {
    let a = Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap();
    let b = Tensor::from_rows(&[&[0.0], &[1.0]]).unwrap();
    assert_eq!(a.matmul(&b).unwrap().data(), &[2.0, 4.0]);
    assert_eq!(Tensor::identity(2).matmul(&a).unwrap(), a);
    let bad = Tensor::zeros(&[4, 2]);
    assert!(matches!(Tensor::zeros(&[2, 3]).matmul(&bad), Err(Error::Shape { .. })));
}

#[test]
fn elementwise_examples() {
    let z = Tensor::vector(vec![0.0, 0.0]).unwrap();
    assert_eq!(z.exp().unwrap().data(), &[1.0, 1.0]);
    let a = Tensor::vector(vec![1.0, 2.0]).unwrap();
    let b = Tensor::vector(vec![3.0, 4.0]).unwrap();
    assert_eq!(a.add(&b).unwrap().data(), &[4.0, 6.0]);
    let big = Tensor::vector(vec![800.0]).unwrap();
    assert!(matches!(big.exp(), Err(Error::Overflow { .. })));
    let mut tape = Tape::new();
    let v = tape.leaf(big);
    assert!(matches!(tape.exp(v), Err(Error::Overflow { .. })));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn shape_matches_length(rows in 1usize..6, cols in 1usize..6, seed in any::<u64>()) {
        let t = Tensor::randn(&[rows, cols], 1.0, &mut rng(seed));
        prop_assert_eq!(t.shape().iter().product::<usize>(), t.len());
        prop_assert!(Tensor::new(vec![rows, cols], vec![0.0; rows * cols + 1]).is_err());
    }

    #[test]
    fn matmul_is_associative(m in 1usize..5, k in 1usize..5, n in 1usize..5, p in 1usize..5, seed in any::<u64>()) {
        let mut r = rng(seed);
        let a = Tensor::randn(&[m, k], 1.0, &mut r);
        let b = Tensor::randn(&[k, n], 1.0, &mut r);
        let c = Tensor::randn(&[n, p], 1.0, &mut r);
        let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
        let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
        prop_assert!(left.max_abs_diff(&right) < 1e-10);
    }

    #[test]
    fn backward_is_deterministic(seed in any::<u64>()) {
        let x = Tensor::randn(&[4, 8], 1.0, &mut rng(seed));
        let run = || {
            let mut tape = Tape::new();
            let v = tape.leaf(x.clone());
            let s = tape.matmul_t(v, v).unwrap();
            let e = tape.scale(s, 0.1).unwrap();
            let e = tape.exp(e).unwrap();
            let l = tape.sum(e).unwrap();
            tape.backward(l).unwrap();
            tape.grad_or_zeros(v)
        };
        let (a, b) = (run(), run());
        prop_assert!(a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
    }

    #[test]
    fn forward_on_finite_inputs_has_no_nan(seed in any::<u64>()) {
        let x = Tensor::randn(&[3, 4], 1.0, &mut rng(seed));
        let mut tape = Tape::new();
        let v = tape.leaf(x);
        let s = tape.sq_dist(v, v).unwrap();
        let n = tape.scale(s, -1.0).unwrap();
        let e = tape.exp(n).unwrap();
        prop_assert!(tape.value(e).data().iter().all(|v| v.is_finite()));
    }
}

// ---- kernel-bank ----

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn kernel_positivity(form in smoother_form(), sym in any::<bool>(), d in 1usize..6, seed in any::<u64>()) {
        let mut r = rng(seed);
        let spec = KernelSpec::new(form, sym, d, d).unwrap();
        let w_k = (!sym).then(|| Tensor::randn(&[d, d], 1.0, &mut r));
        let params = KernelParams::new(&spec, Tensor::randn(&[d, d], 1.0, &mut r), w_k).unwrap();
        let f = Tensor::randn(&[5, d], 1.0, &mut r);
        let s = kernel_scores(&spec, &params, &f, &f).unwrap();
        match form {
            KernelForm::Polynomial => prop_assert!(s.data().iter().all(|&v| v >= 0.0)),
            _ => prop_assert!(s.data().iter().all(|&v| v > 0.0)),
        }
    }

    #[test]
    fn symmetric_kernels_are_symmetric(form in form(), d in 1usize..6, seed in any::<u64>()) {
        let mut r = rng(seed);
        let spec = KernelSpec::new(form, true, d, d).unwrap();
        let params = KernelParams::new(&spec, Tensor::randn(&[d, d], 0.5, &mut r), None).unwrap();
        let f = Tensor::randn(&[6, d], 1.0, &mut r);
        let s = kernel_scores(&spec, &params, &f, &f).unwrap();
        prop_assert!(s.max_abs_diff(&s.transpose().unwrap()) < 1e-10);
    }

    #[test]
    fn exponential_matches_scalar_evaluation(d in 1usize..6, seed in any::<u64>()) {
        let mut r = rng(seed);
        let spec = KernelSpec::new(KernelForm::Exponential, false, d, d).unwrap();
        let (wq, wk) = (Tensor::randn(&[d, d], 0.5, &mut r), Tensor::randn(&[d, d], 0.5, &mut r));
        let params = KernelParams::new(&spec, wq.clone(), Some(wk.clone())).unwrap();
        let (fq, fk) = (Tensor::randn(&[3, d], 1.0, &mut r), Tensor::randn(&[4, d], 1.0, &mut r));
        let s = kernel_scores(&spec, &params, &fq, &fk).unwrap();
        let (q, k) = (fq.matmul(&wq).unwrap(), fk.matmul(&wk).unwrap());
        for i in 0..3 {
            for j in 0..4 {
                let dot: f64 = q.row(i).iter().zip(k.row(j)).map(|(a, b)| a * b).sum();
                let want = (dot / (d as f64).sqrt()).exp();
                prop_assert!((s.get(i, j) - want).abs() <= 1e-12 * want.max(1.0));
            }
        }
    }
}

#[test]
fn linear_kernel_goes_negative() {
    let d = 8;
    let spec = KernelSpec::new(KernelForm::Linear, true, d, d).unwrap();
    let params = KernelParams::new(&spec, Tensor::identity(d), None).unwrap();
    let mut r = rng(7);
    let hits = (0..100)
        .filter(|_| {
            let f = Tensor::randn(&[8, d], 1.0, &mut r);
            kernel_scores(&spec, &params, &f, &f)
                .unwrap()
                .data()
                .iter()
                .any(|&v| v < 0.0)
        })
        .count();
    assert!(hits > 99, "{hits}/100");
}

#[test]
fn polynomial_is_the_unscaled_square() {
    let mut tape = Tape::new();
    let q = tape.constant(Tensor::from_rows(&[&[1.0, 2.0]]).unwrap());
    let k = tape.constant(Tensor::from_rows(&[&[3.0, -1.0]]).unwrap());
    let s = kernel_factor(&mut tape, KernelForm::Polynomial, q, k, 10.0).unwrap();
    assert_eq!(tape.value(s).data(), &[1.0]);
}

// ---- positional ----

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn sinusoid_formula(t in 1usize..20, half in 1usize..8) {
        let d = 2 * half;
        let pe = sinusoidal_pe(t, d).unwrap();
        for i in 0..t {
            for p in 0..half {
                let a = i as f64 / 10000f64.powf(2.0 * p as f64 / d as f64);
                prop_assert_eq!(pe.values.get(i, 2 * p), a.sin());
                prop_assert_eq!(pe.values.get(i, 2 * p + 1), a.cos());
            }
        }
    }

    #[test]
    fn direct_sum_anchor(half in 1usize..5, seed in any::<u64>()) {
        let d = 2 * half;
        let mut r = rng(seed);
        let cfg = single(d, KernelForm::Exponential, false, PeMode::DirectSum, FilterSpec::full(), ValueMode::WithPe);
        let params = AttentionParams::init(&cfg, &mut r);
        let table = sinusoidal_pe(16, d).unwrap();
        let (fq, fk) = (standard_normal(3, d, &mut r), standard_normal(4, d, &mut r));
        let (pq, pk) = (vec![0, 1, 2], vec![3, 0, 5, 1]);
        let s = joint_scores(&cfg, &params, &table, &fq, &fk, &pq, &pk).unwrap();
        let xq = fq.add(&table.rows(&pq).unwrap()).unwrap();
        let xk = fk.add(&table.rows(&pk).unwrap()).unwrap();
        let q = xq.matmul(&params.w_q).unwrap();
        let k = xk.matmul(params.w_k.as_ref().unwrap()).unwrap();
        let want = q.matmul_t(&k).unwrap().scale(1.0 / (d as f64).sqrt()).unwrap().exp().unwrap();
        prop_assert!(s.max_abs_diff(&want) <= 1e-12 * want.max_abs().max(1.0));
    }

    #[test]
    fn product_kernels_factorize(mode in prop::sample::select(vec![PeMode::XlProduct, PeMode::SymmetricProduct]),
                                 form in smoother_form(), half in 1usize..5, seed in any::<u64>()) {
        let d = 2 * half;
        let mut r = rng(seed);
        let cfg = single(d, form, false, mode, FilterSpec::full(), ValueMode::ContentOnly);
        let params = AttentionParams::init(&cfg, &mut r);
        let table = sinusoidal_pe(16, d).unwrap();
        let f = standard_normal(4, d, &mut r);
        let pos = vec![0, 1, 2, 3];
        let joint = joint_scores(&cfg, &params, &table, &f, &f, &pos, &pos).unwrap();
        let content_only = AttentionParams { w_r: None, w_t: None, ..params.clone() };
        let none = single(d, form, cfg.shares_projection(), PeMode::None, FilterSpec::full(), ValueMode::ContentOnly);
        let content = joint_scores(&none, &content_only, &table, &f, &f, &pos, &pos).unwrap();
        let time = match mode {
            PeMode::SymmetricProduct => {
                let t = table.rows(&pos).unwrap().matmul(params.w_t.as_ref().unwrap()).unwrap();
                t.matmul_t(&t).unwrap().scale(1.0 / (d as f64).sqrt()).unwrap().exp().unwrap()
            }
            _ => {
                let mut out = Tensor::zeros(&[4, 4]);
                for i in 0..4 {
                    for j in 0..4 {
                        let row = f.slice_rows(i, 1).unwrap();
                        let v = kattn::xl_time_kernel(&row, i as i64 - j as i64, &params.w_q, params.w_r.as_ref().unwrap(), d, cfg.pe.freq).unwrap();
                        out.set(i, j, v);
                    }
                }
                out
            }
        };
        for i in 0..4 {
            for j in 0..4 {
                let recovered = joint.get(i, j) / content.get(i, j);
                prop_assert!((recovered - time.get(i, j)).abs() <= 1e-10 * time.get(i, j).max(1.0),
                    "({}, {}): {} vs {}", i, j, recovered, time.get(i, j));
            }
        }
    }

    #[test]
    fn relative_modes_are_translation_invariant(mode in prop::sample::select(vec![PeMode::LookupTable, PeMode::XlProduct]),
                                                shift in 0i64..6, half in 1usize..5, seed in any::<u64>()) {
        let d = 2 * half;
        let mut r = rng(seed);
        let cfg = single(d, KernelForm::Exponential, false, mode, FilterSpec::full(), ValueMode::ContentOnly);
        let params = AttentionParams::init(&cfg, &mut r);
        let table = sinusoidal_pe(16, d).unwrap();
        let (fq, fk) = (standard_normal(3, d, &mut r), standard_normal(4, d, &mut r));
        let (pq, pk): (Vec<i64>, Vec<i64>) = (vec![0, 2, 4], vec![1, 0, 3, 2]);
        let a = joint_scores(&cfg, &params, &table, &fq, &fk, &pq, &pk).unwrap();
        let sq: Vec<i64> = pq.iter().map(|p| p + shift).collect();
        let sk: Vec<i64> = pk.iter().map(|p| p + shift).collect();
        let b = joint_scores(&cfg, &params, &table, &fq, &fk, &sq, &sk).unwrap();
        prop_assert!(a.max_abs_diff(&b) <= 1e-12 * a.max_abs().max(1.0));
    }

    #[test]
    fn exponential_family_scores_are_positive(mode in pe_mode(), form in prop::sample::select(vec![KernelForm::Exponential, KernelForm::Rbf]),
                                              half in 1usize..5, seed in any::<u64>()) {
        let d = 2 * half;
        let mut r = rng(seed);
        let cfg = single(d, form, false, mode, FilterSpec::full(), ValueMode::ContentOnly);
        let params = AttentionParams::init(&cfg, &mut r);
        let f = standard_normal(4, d, &mut r);
        let pos = vec![0, 1, 2, 3];
        let s = joint_scores(&cfg, &params, &sinusoidal_pe(16, d).unwrap(), &f, &f, &pos, &pos).unwrap();
        prop_assert!(s.data().iter().all(|&v| v > 0.0));
    }
}

#[test]
fn symmetric_product_with_zero_projections_is_one() {
    let cfg = single(
        4,
        KernelForm::Exponential,
        true,
        PeMode::SymmetricProduct,
        FilterSpec::full(),
        ValueMode::ContentOnly,
    );
    let params = AttentionParams::zeros(&cfg);
    let f = standard_normal(3, 4, &mut rng(1));
    let pos = vec![0, 1, 2];
    let s = joint_scores(&cfg, &params, &sinusoidal_pe(8, 4).unwrap(), &f, &f, &pos, &pos).unwrap();
    assert!(s.data().iter().all(|&v| v == 1.0));
}

#[test]
fn direct_sum_with_zero_embeddings_is_the_content_kernel() {
    let d = 4;
    let mut r = rng(3);
    let cfg = single(
        d,
        KernelForm::Rbf,
        false,
        PeMode::DirectSum,
        FilterSpec::full(),
        ValueMode::ContentOnly,
    );
    let params = AttentionParams::init(&cfg, &mut r);
    let zeros = kattn::PeTable::learned(Tensor::zeros(&[8, d]));
    let (fq, fk) = (standard_normal(2, d, &mut r), standard_normal(3, d, &mut r));
    let s = joint_scores(&cfg, &params, &zeros, &fq, &fk, &[0, 1], &[0, 1, 2]).unwrap();
    let spec = KernelSpec::new(KernelForm::Rbf, false, d, d).unwrap();
    let kp = KernelParams::new(&spec, params.w_q.clone(), params.w_k.clone()).unwrap();
    assert!(s.max_abs_diff(&kernel_scores(&spec, &kp, &fq, &fk).unwrap()) < 1e-15);
}

// ---- attention-smoother ----

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn mask_sets(kind in prop::sample::select(FilterKind::ALL.to_vec()), t in 1usize..9, mem in 0usize..4,
                 stride in 1usize..4, window in 1usize..3) {
        let f = FilterSpec { kind, mem_len: mem, stride, window, include_self: true };
        let t_k = t + f.memory();
        let m = build_mask(&f, t, t_k).unwrap();
        let causal = build_mask(&FilterSpec::causal(), t, t_k).unwrap();
        for i in 0..t {
            for j in 0..t_k {
                match kind {
                    FilterKind::Full => prop_assert!(m.get(i, j)),
                    FilterKind::Causal => prop_assert_eq!(m.get(i, j), j <= i),
                    FilterKind::CausalWithMemory => prop_assert!(!causal.get(i, j) || m.get(i, j)),
                    FilterKind::Strided => prop_assert!(!m.get(i, j) || causal.get(i, j)),
                }
            }
        }
        if kind == FilterKind::CausalWithMemory {
            prop_assert!(m.row_counts().iter().zip(causal.row_counts()).all(|(a, b)| *a >= b));
        }
    }

    #[test]
    fn strict_causal_excludes_self(t in 2usize..8) {
        let strict = FilterSpec { include_self: false, ..FilterSpec::causal() };
        let empty_first_row = matches!(build_mask(&strict, t, t), Err(Error::EmptyVisibility { row: 0 }));
        prop_assert!(empty_first_row);
        let f = FilterSpec { include_self: false, ..FilterSpec::with_memory(1) };
        let m = build_mask(&f, t, t + 1).unwrap();
        for i in 0..t {
            for j in 0..=t {
                prop_assert_eq!(m.get(i, j), j == 0 || j - 1 < i);
            }
        }
    }

    #[test]
    fn weights_are_row_stochastic(form in smoother_form(), sym in any::<bool>(), mode in pe_mode(), filter in filter(),
                                  value in prop::sample::select(vec![ValueMode::WithPe, ValueMode::ContentOnly]),
                                  t in 1usize..7, seed in any::<u64>()) {
        let d = 4;
        let cfg = AttentionConfig::new(d, d, d, 2, form, sym, PeIntegration::new(mode, 8), filter, value).unwrap();
        let params = AttentionParams::init(&cfg, &mut rng(seed));
        let x = inputs(&filter, t, d, seed ^ 1);
        let mask = build_mask(&filter, t, x.pos_k.len()).unwrap();
        for w in attention_weights(&cfg, &params, &x).unwrap() {
            for i in 0..t {
                let mut sum = 0.0;
                for j in 0..x.pos_k.len() {
                    let v = w.get(i, j);
                    prop_assert!(v >= 0.0);
                    if mask.get(i, j) { sum += v } else { prop_assert_eq!(v, 0.0) }
                }
                prop_assert!((sum - 1.0).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn single_key_returns_its_value(form in smoother_form(), mode in pe_mode(), seed in any::<u64>()) {
        let d = 4;
        let cfg = single(d, form, false, mode, FilterSpec::full(), ValueMode::ContentOnly);
        let params = AttentionParams::init(&cfg, &mut rng(seed));
        let x = inputs(&FilterSpec::full(), 1, d, seed);
        let out = attention_forward(&cfg, &params, &x).unwrap();
        let want = x.f_k.matmul(&params.w_v).unwrap().matmul(&params.w_o).unwrap();
        prop_assert!(out.max_abs_diff(&want) < 1e-12);
    }

    /// Rows whose visible set is the same under two filters get the same
    /// output.
    #[test]
    fn outputs_change_only_where_visibility_does(form in smoother_form(), mode in pe_mode(), t in 2usize..8,
                                                 stride in 2usize..4, seed in any::<u64>()) {
        let d = 4;
        let wide = FilterSpec::causal();
        let narrow = FilterSpec::strided(stride, 1);
        let a = single(d, form, false, mode, wide, ValueMode::WithPe);
        let b = AttentionConfig { filter: narrow, ..a };
        let params = AttentionParams::init(&a, &mut rng(seed));
        let x = inputs(&wide, t, d, seed ^ 2);
        let (oa, ob) = (attention_forward(&a, &params, &x).unwrap(), attention_forward(&b, &params, &x).unwrap());
        let (ma, mb) = (build_mask(&wide, t, t).unwrap(), build_mask(&narrow, t, t).unwrap());
        for i in 0..t {
            let diff: f64 = oa.row(i).iter().zip(ob.row(i)).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
            if ma.row(i) == mb.row(i) {
                prop_assert!(diff < 1e-12, "row {} changed by {}", i, diff);
            }
        }
    }

    #[test]
    fn multi_head_matches_reference(heads in prop::sample::select(vec![1usize, 2, 4]), t_q in 1usize..6, t_k in 1usize..6,
                                    causal in any::<bool>(), seed in any::<u64>()) {
        let d = 8;
        let t_k = if causal { t_q.max(t_k) } else { t_k };
        let filter = if causal { FilterSpec::causal() } else { FilterSpec::full() };
        let cfg = AttentionConfig::new(d, d, d, heads, KernelForm::Exponential, false,
                                       PeIntegration::new(PeMode::DirectSum, 16), filter, ValueMode::WithPe).unwrap();
        let mut r = rng(seed);
        let params = AttentionParams::init(&cfg, &mut r);
        let (fq, fk) = (standard_normal(t_q, d, &mut r), standard_normal(t_k, d, &mut r));
        let table = sinusoidal_pe(16, d).unwrap();
        let pq: Vec<i64> = (0..t_q as i64).collect();
        let pk: Vec<i64> = (0..t_k as i64).collect();
        let x = AttentionInputs::new(fq, fk, Some(&table), pq, pk).unwrap();
        let ours = attention_forward(&cfg, &params, &x).unwrap();
        let xq = x.f_q.add(x.t_q.as_ref().unwrap()).unwrap();
        let xk = x.f_k.add(x.t_k.as_ref().unwrap()).unwrap();
        let want = reference_softmax_attention(&params.w_q, params.w_k.as_ref().unwrap(), &params.w_v, &params.w_o,
                                               &xq, &xk, heads, causal).unwrap();
        prop_assert!(ours.max_abs_diff(&want) < 1e-9);
    }
}

#[test]
fn smooth_examples() {
    let scores = Tensor::from_rows(&[&[2.0, 6.0]]).unwrap();
    let values = Tensor::identity(2);
    let mask = build_mask(&FilterSpec::full(), 1, 2).unwrap();
    let out = kattn::smooth(&scores, &mask, &values, 1e-12).unwrap();
    assert_eq!(out.data(), &[0.25, 0.75]);
}

#[test]
fn zero_weights_give_zero_output() {
    let cfg = single(
        4,
        KernelForm::Exponential,
        false,
        PeMode::XlProduct,
        FilterSpec::causal(),
        ValueMode::ContentOnly,
    );
    let x = inputs(&FilterSpec::causal(), 3, 4, 5);
    let out = attention_forward(&cfg, &AttentionParams::zeros(&cfg), &x).unwrap();
    assert!(out.data().iter().all(|&v| v == 0.0));
}
