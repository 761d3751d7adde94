//! Every tape operation against central finite differences.

use kattn::{finite_diff_grad, relative_error, Result, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;
const TOL: f64 = 1e-6;

type Build<'a> = dyn Fn(&mut Tape, &[Var]) -> Result<Var> + 'a;

/// Value of `Σ R ⊙ f(inputs)` with `R` fixed by `seed`.
fn project(tape: &mut Tape, out: Var, seed: u64) -> Result<Var> {
    let shape = tape.value(out).shape().to_vec();
    let r = Tensor::randn(&shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed));
    let rv = tape.constant(r);
    let p = tape.mul(out, rv)?;
    tape.sum(p)
}

fn check(name: &str, inputs: &[Tensor], f: &Build<'_>) {
    let seed = 99;
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars).unwrap();
    let loss = project(&mut tape, out, seed).unwrap();
    tape.backward(loss).unwrap();
    for (k, x) in inputs.iter().enumerate() {
        let numeric = finite_diff_grad(
            |xk| {
                let mut t = Tape::new();
                let vs: Vec<Var> = inputs
                    .iter()
                    .enumerate()
                    .map(|(i, v)| t.constant(if i == k { xk.clone() } else { v.clone() }))
                    .collect();
                let o = f(&mut t, &vs)?;
                let l = project(&mut t, o, seed)?;
                Ok(t.value(l).data()[0])
            },
            x,
            H,
        )
        .unwrap();
        let analytic = tape.grad_or_zeros(vars[k]);
        let err = relative_error(&analytic, &numeric);
        assert!(err < TOL, "{name}: input {k} relative error {err:e}");
    }
}

fn randn(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Entries bounded away from zero, for kinks and positivity.
fn positive(shape: &[usize], seed: u64) -> Tensor {
    randn(shape, seed).map(|v| 0.5 + v.abs())
}

#[test]
fn products() {
    check("matmul", &[randn(&[3, 4], 1), randn(&[4, 2], 2)], &|t, v| {
        t.matmul(v[0], v[1])
    });
    check("matmul_t", &[randn(&[3, 4], 3), randn(&[5, 4], 4)], &|t, v| {
        t.matmul_t(v[0], v[1])
    });
    check("matmul shared", &[randn(&[3, 3], 5)], &|t, v| t.matmul(v[0], v[0]));
    check("transpose", &[randn(&[2, 5], 6)], &|t, v| t.transpose(v[0]));
}

#[test]
fn elementwise_with_broadcast() {
    for (shape_b, seed) in [(vec![3, 4], 10), (vec![1, 4], 11), (vec![1, 1], 12)] {
        let a = randn(&[3, 4], seed);
        let b = positive(&shape_b, seed + 100);
        check("add", &[a.clone(), b.clone()], &|t, v| t.add(v[0], v[1]));
        check("sub", &[a.clone(), b.clone()], &|t, v| t.sub(v[0], v[1]));
        check("mul", &[a.clone(), b.clone()], &|t, v| t.mul(v[0], v[1]));
    }
    check("scale", &[randn(&[2, 3], 13)], &|t, v| t.scale(v[0], -1.7));
    check("exp", &[randn(&[2, 3], 14)], &|t, v| t.exp(v[0]));
    check("square", &[randn(&[2, 3], 15)], &|t, v| t.square(v[0]));
    let away_from_kink = randn(&[3, 3], 16).map(|v| if v.abs() < 0.1 { v + 0.3 } else { v });
    check("relu", &[away_from_kink], &|t, v| t.relu(v[0]));
    check("sum", &[randn(&[2, 3], 17)], &|t, v| t.sum(v[0]));
}

#[test]
fn slicing_and_joining() {
    check("slice_rows", &[randn(&[5, 3], 20)], &|t, v| t.slice_rows(v[0], 1, 3));
    check("slice_cols", &[randn(&[3, 6], 21)], &|t, v| t.slice_cols(v[0], 2, 3));
    check("concat_rows", &[randn(&[2, 3], 22), randn(&[1, 3], 23)], &|t, v| {
        t.concat_rows(&[v[0], v[1], v[0]])
    });
    check("concat_cols", &[randn(&[2, 3], 24), randn(&[2, 1], 25)], &|t, v| {
        t.concat_cols(&[v[1], v[0]])
    });
    check("gather_rows", &[randn(&[4, 3], 26)], &|t, v| {
        t.gather_rows(v[0], &[3, 0, 3, 1, 3])
    });
}

#[test]
fn attention_primitives() {
    let index = [0, 1, 2, 1, 2, 3, 2, 3, 4];
    check("rel_dot", &[randn(&[3, 4], 30), randn(&[5, 4], 31)], &|t, v| {
        t.rel_dot(v[0], v[1], &index, 3)
    });
    check("sq_dist", &[randn(&[3, 4], 32), randn(&[2, 4], 33)], &|t, v| {
        t.sq_dist(v[0], v[1])
    });
    check("sq_dist self", &[randn(&[3, 4], 34)], &|t, v| t.sq_dist(v[0], v[0]));
    let mask = [true, false, true, true, true, true, false, false, true];
    check("normalize_masked", &[positive(&[3, 3], 35)], &|t, v| {
        t.normalize_masked(v[0], &mask, 1e-12)
    });
}

#[test]
fn norm_and_loss() {
    let x = randn(&[3, 5], 40);
    let g = positive(&[5], 41);
    let b = randn(&[5], 42);
    check("layer_norm", &[x, g, b], &|t, v| t.layer_norm(v[0], v[1], v[2], 1e-5));
    let logits = randn(&[4, 6], 43);
    check("cross_entropy", &[logits], &|t, v| {
        t.cross_entropy(v[0], &[1, 5, 0, 2], &[1.0, 0.5, 0.0, 2.0])
    });
}

#[test]
fn composite_graph() {
    // A small two-layer block mixing most ops, with a shared input.
    check("composite", &[randn(&[4, 3], 50), randn(&[3, 3], 51)], &|t, v| {
        let h = t.matmul(v[0], v[1])?;
        let s = t.matmul_t(h, v[0])?;
        let e = t.scale(s, 0.3)?;
        let e = t.exp(e)?;
        let mask: Vec<bool> = (0..16).map(|i| i % 4 <= i / 4).collect();
        let w = t.normalize_masked(e, &mask, 1e-12)?;
        let o = t.matmul(w, h)?;
        t.add(o, v[0])
    });
}
