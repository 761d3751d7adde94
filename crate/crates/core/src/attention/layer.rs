//! One multi-head kernel-smoother attention layer.
//!
//! Per head: joint scores over content and position, a filter mask, masked
//! normalization, and a weighted average of values. Heads are concatenated
//! and projected back to `d_model` by `W_o`.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::attention::mask::{build_mask, FilterSpec};
use crate::attention::smoother::DEFAULT_EPS;
use crate::error::{Error, Result};
use crate::kernel::{kernel_factor, kernel_logit, KernelForm, KernelSpec};
use crate::positional::{
    attention_param_count, lookup_index, xl_relative_table, PeIntegration, PeMode, PeTable, PeTableKind,
};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueMode {
    /// `v(x_k) = (f_k + t_k) W_v`
    WithPe,
    /// `v(x_k) = f_k W_v`
    #[default]
    ContentOnly,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AttentionConfig {
    pub d_model: usize,
    pub d_k: usize,
    pub d_v: usize,
    pub n_heads: usize,
    pub kernel: KernelSpec,
    pub pe: PeIntegration,
    pub filter: FilterSpec,
    pub value: ValueMode,
    /// Smallest admissible normalizer.
    pub eps: f64,
}

impl AttentionConfig {
    /// Square single-head layer (`d_k = d_v = d_model`).
    pub fn single_head(
        d_model: usize,
        form: KernelForm,
        symmetric: bool,
        pe: PeIntegration,
        filter: FilterSpec,
        value: ValueMode,
    ) -> Result<Self> {
        Self::new(d_model, d_model, d_model, 1, form, symmetric, pe, filter, value)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn new(
        d_model: usize,
        d_k: usize,
        d_v: usize,
        n_heads: usize,
        form: KernelForm,
        symmetric: bool,
        pe: PeIntegration,
        filter: FilterSpec,
        value: ValueMode,
    ) -> Result<Self> {
        let cfg = Self {
            d_model,
            d_k,
            d_v,
            n_heads,
            kernel: KernelSpec::new(form, symmetric, d_model, d_k)?,
            pe,
            filter,
            value,
            eps: DEFAULT_EPS,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let h = self.n_heads;
        if h == 0 || self.d_model == 0 || self.d_k == 0 || self.d_v == 0 {
            return Err(Error::Config("attention widths and head count must be positive".into()));
        }
        for (name, w) in [("d_model", self.d_model), ("d_k", self.d_k), ("d_v", self.d_v)] {
            if w % h != 0 {
                return Err(Error::Config(format!("{name} = {w} is not divisible by n_heads = {h}")));
            }
        }
        if self.kernel.d_model != self.d_model || self.kernel.d_k != self.d_k {
            return Err(Error::Config("kernel widths disagree with the layer".into()));
        }
        if self.pe.mode == PeMode::XlProduct {
            for w in [self.d_k, self.d_model] {
                if w % 2 != 0 {
                    return Err(Error::OddDimension(w));
                }
            }
        }
        if self.pe.mode == PeMode::SymmetricProduct && self.pe.table == PeTableKind::Learned {
            return Err(Error::Config(
                "the symmetric product kernel uses fixed sinusoidal embeddings".into(),
            ));
        }
        if self.pe.mode == PeMode::LookupTable && self.pe.t_max == 0 {
            return Err(Error::Config("look-up table needs t_max ≥ 1".into()));
        }
        if self.eps.is_nan() || self.eps <= 0.0 {
            return Err(Error::Config("eps must be positive".into()));
        }
        self.filter.validate()
    }

    /// One projection serves both queries and keys.
    pub fn shares_projection(&self) -> bool {
        self.kernel.symmetric || self.pe.mode == PeMode::SymmetricProduct
    }

    /// Whether the forward pass reads positional embeddings `t`.
    pub fn uses_embeddings(&self) -> bool {
        matches!(self.pe.mode, PeMode::DirectSum | PeMode::SymmetricProduct) || self.value == ValueMode::WithPe
    }

    pub fn head_dims(&self) -> (usize, usize) {
        (self.d_k / self.n_heads, self.d_v / self.n_heads)
    }

    /// Kernel-side parameter count of this layer.
    pub fn kernel_param_count(&self) -> usize {
        attention_param_count(&self.pe, self.shares_projection(), self.d_model, self.d_k)
    }

    /// `(name, shape)` of every parameter, in a fixed order.
    pub fn param_shapes(&self) -> Vec<(&'static str, Vec<usize>)> {
        let (d, k, v) = (self.d_model, self.d_k, self.d_v);
        let mut out = vec![("w_q", vec![d, k])];
        if !self.shares_projection() {
            out.push(("w_k", vec![d, k]));
        }
        match self.pe.mode {
            PeMode::XlProduct => out.push(("w_r", vec![d, k])),
            PeMode::SymmetricProduct => out.push(("w_t", vec![d, k])),
            PeMode::LookupTable => out.push(("lookup", vec![2 * self.pe.t_max - 1, k])),
            PeMode::None | PeMode::DirectSum => {}
        }
        out.push(("w_v", vec![d, v]));
        out.push(("w_o", vec![v, d]));
        out
    }
}

/// Slots shared by [`AttentionParams`] (tensors) and [`AttentionVars`]
/// (tape handles).
#[derive(Clone, Debug, PartialEq)]
pub struct Slots<T> {
    /// Query projection; also the key projection when shared, and `W_F`
    /// under the symmetric product kernel.
    pub w_q: T,
    pub w_k: Option<T>,
    /// Transformer-XL relative coefficients.
    pub w_r: Option<T>,
    /// Time projection of the symmetric product kernel.
    pub w_t: Option<T>,
    /// Relative-offset vectors, `[(2·t_max − 1) × d_k]`.
    pub lookup: Option<T>,
    pub w_v: T,
    pub w_o: T,
}

pub type AttentionParams = Slots<Tensor>;
pub type AttentionVars = Slots<Var>;

impl<T> Slots<T> {
    /// Builds every slot `cfg` needs from `make(name, shape)`.
    pub fn build(cfg: &AttentionConfig, mut make: impl FnMut(&'static str, &[usize]) -> T) -> Self {
        let mut w_q = None;
        let mut w_k = None;
        let mut w_r = None;
        let mut w_t = None;
        let mut lookup = None;
        let mut w_v = None;
        let mut w_o = None;
        for (name, shape) in cfg.param_shapes() {
            let t = Some(make(name, &shape));
            match name {
                "w_q" => w_q = t,
                "w_k" => w_k = t,
                "w_r" => w_r = t,
                "w_t" => w_t = t,
                "lookup" => lookup = t,
                "w_v" => w_v = t,
                _ => w_o = t,
            }
        }
        Self {
            w_q: w_q.expect("w_q is always present"),
            w_k,
            w_r,
            w_t,
            lookup,
            w_v: w_v.expect("w_v is always present"),
            w_o: w_o.expect("w_o is always present"),
        }
    }

    /// Present slots, in the same order as [`AttentionConfig::param_shapes`].
    pub fn named(&self) -> Vec<(&'static str, &T)> {
        let mut out = vec![("w_q", &self.w_q)];
        let opt = [
            ("w_k", &self.w_k),
            ("w_r", &self.w_r),
            ("w_t", &self.w_t),
            ("lookup", &self.lookup),
        ];
        out.extend(opt.into_iter().filter_map(|(n, t)| t.as_ref().map(|t| (n, t))));
        out.push(("w_v", &self.w_v));
        out.push(("w_o", &self.w_o));
        out
    }

    pub fn named_mut(&mut self) -> Vec<(&'static str, &mut T)> {
        let mut out = vec![("w_q", &mut self.w_q)];
        let opt = [
            ("w_k", &mut self.w_k),
            ("w_r", &mut self.w_r),
            ("w_t", &mut self.w_t),
            ("lookup", &mut self.lookup),
        ];
        out.extend(opt.into_iter().filter_map(|(n, t)| t.as_mut().map(|t| (n, t))));
        out.push(("w_v", &mut self.w_v));
        out.push(("w_o", &mut self.w_o));
        out
    }
}

impl AttentionParams {
    /// Gaussian init with variance `1/fan_in`, fan-in being the first axis
    /// for projections and the row width for the look-up table.
    pub fn init<R: Rng + ?Sized>(cfg: &AttentionConfig, rng: &mut R) -> Self {
        Self::build(cfg, |name, shape| {
            let fan_in = if name == "lookup" { shape[1] } else { shape[0] };
            Tensor::randn(shape, 1.0 / (fan_in as f64).sqrt(), rng)
        })
    }

    /// Every entry drawn from N(0, std²).
    pub fn gaussian<R: Rng + ?Sized>(cfg: &AttentionConfig, std: f64, rng: &mut R) -> Self {
        Self::build(cfg, |_, shape| Tensor::randn(shape, std, rng))
    }

    pub fn zeros(cfg: &AttentionConfig) -> Self {
        Self::build(cfg, |_, shape| Tensor::zeros(shape))
    }

    /// Kernel-side parameters actually held (everything but `W_v`, `W_o`).
    pub fn kernel_param_count(&self) -> usize {
        self.named()
            .into_iter()
            .filter(|(n, _)| !matches!(*n, "w_v" | "w_o"))
            .map(|(_, t)| t.len())
            .sum()
    }

    pub fn param_count(&self) -> usize {
        self.named().into_iter().map(|(_, t)| t.len()).sum()
    }

    /// Records every tensor on `tape`, as leaves or as constants.
    pub fn attach(&self, tape: &mut Tape, trainable: bool) -> AttentionVars {
        let mut put = |t: &Tensor| {
            if trainable {
                tape.leaf(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        Slots {
            w_q: put(&self.w_q),
            w_k: self.w_k.as_ref().map(&mut put),
            w_r: self.w_r.as_ref().map(&mut put),
            w_t: self.w_t.as_ref().map(&mut put),
            lookup: self.lookup.as_ref().map(&mut put),
            w_v: put(&self.w_v),
            w_o: put(&self.w_o),
        }
    }

    pub fn check_shapes(&self, cfg: &AttentionConfig) -> Result<()> {
        let want = cfg.param_shapes();
        let have = self.named();
        if want.len() != have.len() {
            return Err(Error::Config(
                "attention parameter set does not match its config".into(),
            ));
        }
        for ((wn, ws), (hn, ht)) in want.iter().zip(&have) {
            if wn != hn || ws.as_slice() != ht.shape() {
                return Err(Error::DimensionMismatch {
                    name: (*wn).to_string(),
                    expected: ws.clone(),
                    found: ht.shape().to_vec(),
                });
            }
        }
        Ok(())
    }
}

/// Inputs of one attention call recorded on a tape.
///
/// `batch` independent sequences may be stacked row-wise: content and
/// embeddings then hold `batch · T` rows and every item shares `pos_q` /
/// `pos_k`. Items never attend across each other.
#[derive(Clone, Copy, Debug)]
pub struct AttnInput<'a> {
    /// Query content `[batch·T_q × d_model]`.
    pub f_q: Var,
    /// Key content `[batch·T_k × d_model]`.
    pub f_k: Var,
    /// Positional embeddings at the query / key positions, same shapes as
    /// the content; required when [`AttentionConfig::uses_embeddings`].
    pub t_q: Option<Var>,
    pub t_k: Option<Var>,
    pub pos_q: &'a [i64],
    pub pos_k: &'a [i64],
    pub batch: usize,
}

#[derive(Clone, Debug)]
pub struct AttnOutput {
    /// `[batch·T_q × d_model]`.
    pub out: Var,
    /// Smoothing weights `[T_q × T_k]`, item-major then head.
    pub weights: Vec<Var>,
}

struct Prepared {
    q: Var,
    k: Var,
    v: Var,
    rel_index: Vec<usize>,
    xl_table: Option<Var>,
    tq: Option<Var>,
    tk: Option<Var>,
}

fn head_cols(tape: &mut Tape, x: Var, h: usize, width: usize, n_heads: usize) -> Result<Var> {
    if n_heads == 1 {
        Ok(x)
    } else {
        tape.slice_cols(x, h * width, width)
    }
}

fn item_rows(tape: &mut Tape, x: Var, b: usize, len: usize, batch: usize) -> Result<Var> {
    if batch == 1 {
        Ok(x)
    } else {
        tape.slice_rows(x, b * len, len)
    }
}

fn prepare(tape: &mut Tape, cfg: &AttentionConfig, p: &AttentionVars, x: &AttnInput) -> Result<Prepared> {
    if x.batch == 0 {
        return Err(Error::shape("attention", "empty batch"));
    }
    for (f, t, pos, what) in [(x.f_q, x.t_q, x.pos_q, "query"), (x.f_k, x.t_k, x.pos_k, "key")] {
        let fv = tape.value(f);
        if fv.cols() != cfg.d_model || pos.len() * x.batch != fv.rows() {
            return Err(Error::shape(
                "attention",
                format!(
                    "{what} content {:?} for {} × {} positions, d_model {}",
                    fv.shape(),
                    x.batch,
                    pos.len(),
                    cfg.d_model
                ),
            ));
        }
        if cfg.uses_embeddings() {
            let tv = t
                .map(|t| tape.value(t))
                .ok_or_else(|| Error::Config(format!("{what} positional embeddings are required by this layer")))?;
            if tv.shape() != fv.shape() {
                return Err(Error::shape("attention", format!("{what} embeddings {:?}", tv.shape())));
            }
        }
    }
    let direct = cfg.pe.mode == PeMode::DirectSum;
    let same_input = x.f_q == x.f_k && x.t_q == x.t_k;
    let (xq, xk) = if direct {
        let (tq, tk) = (x.t_q.expect("checked"), x.t_k.expect("checked"));
        let xq = tape.add(x.f_q, tq)?;
        let xk = if same_input { xq } else { tape.add(x.f_k, tk)? };
        (xq, xk)
    } else {
        (x.f_q, x.f_k)
    };
    let q = tape.matmul(xq, p.w_q)?;
    let k = if same_input && cfg.shares_projection() {
        q
    } else {
        tape.matmul(xk, p.w_k.unwrap_or(p.w_q))?
    };
    let vin = match cfg.value {
        ValueMode::WithPe if direct => xk,
        ValueMode::WithPe => tape.add(x.f_k, x.t_k.expect("checked"))?,
        ValueMode::ContentOnly => x.f_k,
    };
    let v = tape.matmul(vin, p.w_v)?;
    let mut prep = Prepared {
        q,
        k,
        v,
        rel_index: Vec::new(),
        xl_table: None,
        tq: None,
        tk: None,
    };
    match cfg.pe.mode {
        PeMode::LookupTable => prep.rel_index = lookup_index(x.pos_q, x.pos_k, cfg.pe.t_max),
        PeMode::XlProduct => {
            let (table, index) = xl_relative_table(x.pos_q, x.pos_k, cfg.d_model, cfg.pe.freq.width(cfg.d_k))?;
            prep.xl_table = Some(tape.constant(table));
            prep.rel_index = index;
        }
        PeMode::SymmetricProduct => {
            let w_t = p.w_t.ok_or_else(|| Error::Config("missing W_T".into()))?;
            let tq = tape.matmul(x.t_q.expect("checked"), w_t)?;
            let tk = if x.t_q == x.t_k {
                tq
            } else {
                tape.matmul(x.t_k.expect("checked"), w_t)?
            };
            prep.tq = Some(tq);
            prep.tk = Some(tk);
        }
        PeMode::None | PeMode::DirectSum => {}
    }
    Ok(prep)
}

/// Per-item views of the prepared projections.
struct Item {
    q: Var,
    k: Var,
    tq: Option<Var>,
    tk: Option<Var>,
}

fn item(tape: &mut Tape, prep: &Prepared, b: usize, t_q: usize, t_k: usize, batch: usize) -> Result<Item> {
    let q = item_rows(tape, prep.q, b, t_q, batch)?;
    let k = if prep.k == prep.q {
        q
    } else {
        item_rows(tape, prep.k, b, t_k, batch)?
    };
    let (tq, tk) = match (prep.tq, prep.tk) {
        (Some(a), Some(c)) => {
            let ta = item_rows(tape, a, b, t_q, batch)?;
            let tb = if a == c { ta } else { item_rows(tape, c, b, t_k, batch)? };
            (Some(ta), Some(tb))
        }
        _ => (None, None),
    };
    Ok(Item { q, k, tq, tk })
}

/// For each row, the largest visible entry of `logit`; masked entries get
/// their own value so they exponentiate to one and stay finite.
fn row_shift(logit: &Tensor, mask: &[bool]) -> Tensor {
    let (rows, cols) = (logit.rows(), logit.cols());
    let mut out = logit.clone();
    for i in 0..rows {
        let vis = &mask[i * cols..(i + 1) * cols];
        let m = (0..cols)
            .filter(|&j| vis[j])
            .map(|j| logit.get(i, j))
            .fold(f64::NEG_INFINITY, f64::max);
        let m = if m.is_finite() { m } else { 0.0 };
        for (j, &v) in vis.iter().enumerate() {
            if v {
                out.set(i, j, m);
            }
        }
    }
    out
}

/// Joint scores of head `h` for one item.
///
/// The exponential factors (content and time) are summed in log space. With
/// `mask`, each row's log-score is shifted down by its largest visible
/// entry before exponentiating; that rescales the row by a constant, which
/// normalization removes, and keeps scores away from underflow and
/// overflow. Without `mask` the raw kernel values are returned.
#[allow(clippy::too_many_arguments)]
fn head_scores(
    tape: &mut Tape,
    cfg: &AttentionConfig,
    p: &AttentionVars,
    prep: &Prepared,
    it: &Item,
    h: usize,
    t_k: usize,
    mask: Option<&[bool]>,
) -> Result<Var> {
    let (dh, _) = cfg.head_dims();
    let n = cfg.n_heads;
    let scale = (dh as f64).sqrt();
    let q = head_cols(tape, it.q, h, dh, n)?;
    let k = if it.k == it.q {
        q
    } else {
        head_cols(tape, it.k, h, dh, n)?
    };
    let content_logit = kernel_logit(tape, cfg.kernel.form, q, k, scale)?;
    let content = match content_logit {
        Some(_) => None,
        None => Some(kernel_factor(tape, cfg.kernel.form, q, k, scale)?),
    };
    let time_logit = match cfg.pe.mode {
        PeMode::None | PeMode::DirectSum => None,
        PeMode::LookupTable => {
            let table = p.lookup.ok_or_else(|| Error::Config("missing look-up table".into()))?;
            let a = head_cols(tape, table, h, dh, n)?;
            Some(tape.rel_dot(q, a, &prep.rel_index, t_k)?)
        }
        PeMode::XlProduct => {
            let w_r = p.w_r.ok_or_else(|| Error::Config("missing W_R".into()))?;
            let w_r = head_cols(tape, w_r, h, dh, n)?;
            let c = tape.matmul_t(q, w_r)?;
            Some(tape.rel_dot(c, prep.xl_table.expect("prepared"), &prep.rel_index, t_k)?)
        }
        PeMode::SymmetricProduct => {
            let (tq, tk) = (it.tq.expect("prepared"), it.tk.expect("prepared"));
            let a = head_cols(tape, tq, h, dh, n)?;
            let b = if tk == tq { a } else { head_cols(tape, tk, h, dh, n)? };
            kernel_logit(tape, KernelForm::Exponential, a, b, scale)?
        }
    };
    let logit = match (content_logit, time_logit) {
        (Some(a), Some(b)) => tape.add(a, b)?,
        (Some(l), None) | (None, Some(l)) => l,
        (None, None) => return Ok(content.expect("non-exponential content")),
    };
    let logit = match mask {
        Some(mask) => {
            let shift = tape.constant(row_shift(tape.value(logit), mask));
            tape.sub(logit, shift)?
        }
        None => logit,
    };
    let e = tape.exp(logit)?;
    match content {
        Some(c) => tape.mul(c, e),
        None => Ok(e),
    }
}

/// Forward pass of one layer on `tape`.
pub fn attend(tape: &mut Tape, cfg: &AttentionConfig, p: &AttentionVars, x: &AttnInput) -> Result<AttnOutput> {
    let prep = prepare(tape, cfg, p, x)?;
    let (t_q, t_k) = (x.pos_q.len(), x.pos_k.len());
    let mask = build_mask(&cfg.filter, t_q, t_k)?;
    let (_, dv) = cfg.head_dims();
    let mut items = Vec::with_capacity(x.batch);
    let mut weights = Vec::with_capacity(x.batch * cfg.n_heads);
    for b in 0..x.batch {
        let it = item(tape, &prep, b, t_q, t_k, x.batch)?;
        let v = item_rows(tape, prep.v, b, t_k, x.batch)?;
        let mut heads = Vec::with_capacity(cfg.n_heads);
        for h in 0..cfg.n_heads {
            let s = head_scores(tape, cfg, p, &prep, &it, h, t_k, Some(mask.data()))?;
            let w = tape.normalize_masked(s, mask.data(), cfg.eps)?;
            let vh = head_cols(tape, v, h, dv, cfg.n_heads)?;
            heads.push(tape.matmul(w, vh)?);
            weights.push(w);
        }
        items.push(if heads.len() == 1 {
            heads[0]
        } else {
            tape.concat_cols(&heads)?
        });
    }
    let cat = if items.len() == 1 {
        items[0]
    } else {
        tape.concat_rows(&items)?
    };
    let out = tape.matmul(cat, p.w_o)?;
    Ok(AttnOutput { out, weights })
}

/// Plain-tensor inputs for one attention call.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionInputs {
    pub f_q: Tensor,
    pub f_k: Tensor,
    pub t_q: Option<Tensor>,
    pub t_k: Option<Tensor>,
    pub pos_q: Vec<i64>,
    pub pos_k: Vec<i64>,
}

impl AttentionInputs {
    /// Queries and keys with embeddings read from `table` (if any).
    pub fn new(f_q: Tensor, f_k: Tensor, table: Option<&PeTable>, pos_q: Vec<i64>, pos_k: Vec<i64>) -> Result<Self> {
        let (t_q, t_k) = match table {
            Some(t) => (Some(t.rows(&pos_q)?), Some(t.rows(&pos_k)?)),
            None => (None, None),
        };
        Ok(Self {
            f_q,
            f_k,
            t_q,
            t_k,
            pos_q,
            pos_k,
        })
    }

    /// Self-attention over `f` at positions `0..T`.
    pub fn self_attention(f: Tensor, table: Option<&PeTable>) -> Result<Self> {
        let pos: Vec<i64> = (0..f.rows() as i64).collect();
        Self::new(f.clone(), f, table, pos.clone(), pos)
    }

    /// Records the inputs as tape constants.
    pub fn attach<'a>(&'a self, tape: &mut Tape) -> AttnInput<'a> {
        let f_q = tape.constant(self.f_q.clone());
        let f_k = if self.f_k == self.f_q {
            f_q
        } else {
            tape.constant(self.f_k.clone())
        };
        let t_q = self.t_q.as_ref().map(|t| tape.constant(t.clone()));
        let t_k = match (&self.t_k, &self.t_q) {
            (Some(k), Some(q)) if k == q => t_q,
            (Some(k), _) => Some(tape.constant(k.clone())),
            (None, _) => None,
        };
        AttnInput {
            f_q,
            f_k,
            t_q,
            t_k,
            pos_q: &self.pos_q,
            pos_k: &self.pos_k,
            batch: 1,
        }
    }
}

/// Output `[T_q × d_model]` of one layer.
pub fn attention_forward(cfg: &AttentionConfig, params: &AttentionParams, x: &AttentionInputs) -> Result<Tensor> {
    let mut tape = Tape::new();
    let p = params.attach(&mut tape, false);
    let input = x.attach(&mut tape);
    let out = attend(&mut tape, cfg, &p, &input)?;
    Ok(tape.value(out.out).clone())
}

/// Per-head smoothing weights of one layer.
pub fn attention_weights(cfg: &AttentionConfig, params: &AttentionParams, x: &AttentionInputs) -> Result<Vec<Tensor>> {
    let mut tape = Tape::new();
    let p = params.attach(&mut tape, false);
    let input = x.attach(&mut tape);
    let out = attend(&mut tape, cfg, &p, &input)?;
    Ok(out.weights.iter().map(|&w| tape.value(w).clone()).collect())
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn joint_scores_single(
    cfg: &AttentionConfig,
    params: &AttentionParams,
    f_q: &Tensor,
    f_k: &Tensor,
    t_q: &Tensor,
    t_k: &Tensor,
    pos_q: &[i64],
    pos_k: &[i64],
) -> Result<Tensor> {
    if cfg.n_heads != 1 {
        return Err(Error::Config(
            "joint scores are defined per head; use n_heads = 1".into(),
        ));
    }
    let x = AttentionInputs {
        f_q: f_q.clone(),
        f_k: f_k.clone(),
        t_q: Some(t_q.clone()),
        t_k: Some(t_k.clone()),
        pos_q: pos_q.to_vec(),
        pos_k: pos_k.to_vec(),
    };
    let mut tape = Tape::new();
    let p = params.attach(&mut tape, false);
    let input = x.attach(&mut tape);
    let prep = prepare(&mut tape, cfg, &p, &input)?;
    let it = item(&mut tape, &prep, 0, f_q.rows(), f_k.rows(), 1)?;
    let s = head_scores(&mut tape, cfg, &p, &prep, &it, 0, f_k.rows(), None)?;
    Ok(tape.value(s).clone())
}

/// Draws `[rows × cols]` from N(0, 1).
pub fn standard_normal<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    let n = Normal::new(0.0, 1.0).expect("unit normal");
    let data = (0..rows * cols).map(|_| n.sample(rng)).collect();
    Tensor::matrix(rows, cols, data).expect("positive dims")
}
