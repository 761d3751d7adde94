//! Textbook softmax attention, written with plain loops and no tape. It is
//! the oracle for the kernel-smoother layer and never used in training.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn project(x: &Tensor, w: &Tensor) -> Result<Vec<Vec<f64>>> {
    if x.cols() != w.rows() {
        return Err(Error::shape(
            "reference_softmax_attention",
            format!("{:?} × {:?}", x.shape(), w.shape()),
        ));
    }
    let (n, d, m) = (x.rows(), x.cols(), w.cols());
    let mut out = vec![vec![0.0; m]; n];
    for (i, row) in out.iter_mut().enumerate() {
        for (c, cell) in row.iter_mut().enumerate() {
            for r in 0..d {
                *cell += x.get(i, r) * w.get(r, c);
            }
        }
    }
    Ok(out)
}

/// `softmax(x_q W_q (x_k W_k)ᵀ / √d_h) x_k W_v`, per head, concatenated and
/// multiplied by `W_o`. With `causal`, query `i` (the `i`-th of the last
/// `T_q` keys) sees keys up to and including itself and nothing before the
/// aligned block.
#[allow(clippy::too_many_arguments)]
pub fn reference_softmax_attention(
    w_q: &Tensor,
    w_k: &Tensor,
    w_v: &Tensor,
    w_o: &Tensor,
    x_q: &Tensor,
    x_k: &Tensor,
    n_heads: usize,
    causal: bool,
) -> Result<Tensor> {
    let q = project(x_q, w_q)?;
    let k = project(x_k, w_k)?;
    let v = project(x_k, w_v)?;
    let (tq, tk) = (q.len(), k.len());
    let (dk, dv) = (w_q.cols(), w_v.cols());
    if n_heads == 0 || dk % n_heads != 0 || dv % n_heads != 0 || w_k.cols() != dk || w_o.rows() != dv {
        return Err(Error::shape("reference_softmax_attention", "inconsistent head split"));
    }
    if causal && tk < tq {
        return Err(Error::shape("reference_softmax_attention", "causal needs T_k ≥ T_q"));
    }
    let (hk, hv) = (dk / n_heads, dv / n_heads);
    let off = tk - tq.min(tk);
    let mut heads = vec![vec![0.0; dv]; tq];
    for h in 0..n_heads {
        for i in 0..tq {
            let visible: Vec<usize> = (0..tk).filter(|&j| !causal || (j >= off && j - off <= i)).collect();
            let logits: Vec<f64> = visible
                .iter()
                .map(|&j| {
                    let dot: f64 = (0..hk).map(|c| q[i][h * hk + c] * k[j][h * hk + c]).sum();
                    dot / (hk as f64).sqrt()
                })
                .collect();
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
            let z: f64 = e.iter().sum();
            for (&j, ej) in visible.iter().zip(&e) {
                for c in 0..hv {
                    heads[i][h * hv + c] += ej / z * v[j][h * hv + c];
                }
            }
        }
    }
    let cat = Tensor::matrix(tq, dv, heads.concat())?;
    let out = project(&cat, w_o)?;
    Tensor::matrix(tq, w_o.cols(), out.concat())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_average_values() {
        // zero query projection → equal logits → mean of value rows
        let x = Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 1.0], &[1.0, 1.0]]).unwrap();
        let zero = Tensor::zeros(&[2, 2]);
        let eye = Tensor::identity(2);
        let out = reference_softmax_attention(&zero, &eye, &eye, &eye, &x, &x, 1, false).unwrap();
        for i in 0..3 {
            assert!((out.get(i, 0) - 2.0 / 3.0).abs() < 1e-15);
            assert!((out.get(i, 1) - 2.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn one_key_gets_all_weight() {
        let xq = Tensor::from_rows(&[&[3.0, -1.0]]).unwrap();
        let xk = Tensor::from_rows(&[&[0.5, 2.0]]).unwrap();
        let eye = Tensor::identity(2);
        let out = reference_softmax_attention(&eye, &eye, &eye, &eye, &xq, &xk, 1, false).unwrap();
        assert_eq!(out.data(), xk.data());
    }
}
