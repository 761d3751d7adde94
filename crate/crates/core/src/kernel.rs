//! Non-positional kernels on the content space: linear, polynomial,
//! exponential and RBF, each with an asymmetric (`W_q ≠ W_k`) and a symmetric
//! (`W_q = W_k`) variant.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// The polynomial kernel is the square of the projected dot product.
pub const POLY_DEGREE: u32 = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelForm {
    Linear,
    Polynomial,
    Exponential,
    #[serde(rename = "rbf")]
    Rbf,
}

impl KernelForm {
    pub const ALL: [KernelForm; 4] = [
        KernelForm::Linear,
        KernelForm::Polynomial,
        KernelForm::Exponential,
        KernelForm::Rbf,
    ];

    pub fn name(self) -> &'static str {
        match self {
            KernelForm::Linear => "linear",
            KernelForm::Polynomial => "polynomial",
            KernelForm::Exponential => "exponential",
            KernelForm::Rbf => "rbf",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct KernelSpec {
    pub form: KernelForm,
    pub symmetric: bool,
    pub d_model: usize,
    pub d_k: usize,
}

impl KernelSpec {
    pub fn new(form: KernelForm, symmetric: bool, d_model: usize, d_k: usize) -> Result<Self> {
        if d_model == 0 || d_k == 0 {
            return Err(Error::Config("kernel widths must be positive".into()));
        }
        Ok(Self {
            form,
            symmetric,
            d_model,
            d_k,
        })
    }

    pub fn poly_degree(&self) -> Option<u32> {
        (self.form == KernelForm::Polynomial).then_some(POLY_DEGREE)
    }
}

/// Scores are non-negative by construction for every form but the linear one.
pub fn is_valid_smoother_kernel(spec: &KernelSpec) -> bool {
    spec.form != KernelForm::Linear
}

/// Query/key projections. In the symmetric case there is a single matrix
/// and `w_k` is `None`.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelParams {
    pub w_q: Tensor,
    pub w_k: Option<Tensor>,
}

impl KernelParams {
    pub fn new(spec: &KernelSpec, w_q: Tensor, w_k: Option<Tensor>) -> Result<Self> {
        let want = [spec.d_model, spec.d_k];
        let check = |t: &Tensor, name: &str| {
            if t.shape() != want {
                Err(Error::shape(
                    "kernel params",
                    format!("{name} is {:?}, expected {want:?}", t.shape()),
                ))
            } else {
                Ok(())
            }
        };
        check(&w_q, "W_q")?;
        match (&w_k, spec.symmetric) {
            (None, true) => {}
            (Some(k), false) => check(k, "W_k")?,
            (Some(_), true) => return Err(Error::Config("symmetric kernel takes a single projection".into())),
            (None, false) => return Err(Error::Config("asymmetric kernel needs W_k".into())),
        }
        Ok(Self { w_q, w_k })
    }

    pub fn w_k(&self) -> &Tensor {
        self.w_k.as_ref().unwrap_or(&self.w_q)
    }
}

/// `log k(q, k)` for the forms that are exponentials (exponential, RBF);
/// `None` for the others.
pub fn kernel_logit(tape: &mut Tape, form: KernelForm, q: Var, k: Var, scale: f64) -> Result<Option<Var>> {
    Ok(match form {
        KernelForm::Linear | KernelForm::Polynomial => None,
        KernelForm::Exponential => {
            let dot = tape.matmul_t(q, k)?;
            Some(tape.scale(dot, 1.0 / scale)?)
        }
        KernelForm::Rbf => {
            let d = tape.sq_dist(q, k)?;
            Some(tape.scale(d, -1.0 / scale)?)
        }
    })
}

/// Kernel of `form` between already-projected rows `q` [T_q×w] and
/// `k` [T_k×w]; `scale` is the √d denominator of the exponential and RBF
/// forms.
pub fn kernel_factor(tape: &mut Tape, form: KernelForm, q: Var, k: Var, scale: f64) -> Result<Var> {
    if let Some(l) = kernel_logit(tape, form, q, k, scale)? {
        return tape.exp(l);
    }
    let dot = tape.matmul_t(q, k)?;
    match form {
        KernelForm::Polynomial => tape.square(dot),
        _ => Ok(dot),
    }
}

/// `score[i][j] = k(f_q[i], f_k[j])` for a single head of width `d_k`.
pub fn kernel_scores(spec: &KernelSpec, params: &KernelParams, f_q: &Tensor, f_k: &Tensor) -> Result<Tensor> {
    for f in [f_q, f_k] {
        if f.cols() != spec.d_model {
            return Err(Error::shape(
                "kernel_scores",
                format!("features {:?} for d_model {}", f.shape(), spec.d_model),
            ));
        }
    }
    let mut tape = Tape::new();
    let fq = tape.constant(f_q.clone());
    let fk = tape.constant(f_k.clone());
    let wq = tape.constant(params.w_q.clone());
    let wk = match &params.w_k {
        Some(w) => tape.constant(w.clone()),
        None => wq,
    };
    let q = tape.matmul(fq, wq)?;
    let k = tape.matmul(fk, wk)?;
    let s = kernel_factor(&mut tape, spec.form, q, k, (spec.d_k as f64).sqrt())?;
    Ok(tape.value(s).clone())
}
