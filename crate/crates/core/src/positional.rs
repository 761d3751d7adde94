//! Positional embeddings and the ways time enters the joint kernel on
//! content × position: not at all, summed into the content (direct sum), a
//! learned relative look-up factor, the Transformer-XL relative product, and
//! the symmetric product of a content kernel and a time kernel.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::attention::{AttentionConfig, AttentionParams};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PeMode {
    None,
    DirectSum,
    LookupTable,
    XlProduct,
    SymmetricProduct,
}

impl PeMode {
    pub const ALL: [PeMode; 5] = [
        PeMode::None,
        PeMode::DirectSum,
        PeMode::LookupTable,
        PeMode::XlProduct,
        PeMode::SymmetricProduct,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PeMode::None => "none",
            PeMode::DirectSum => "direct_sum",
            PeMode::LookupTable => "lookup_table",
            PeMode::XlProduct => "xl_product",
            PeMode::SymmetricProduct => "symmetric_product",
        }
    }

    /// Modes whose scores depend on positions only through `t_q − t_k`.
    pub fn is_relative(self) -> bool {
        matches!(self, PeMode::LookupTable | PeMode::XlProduct)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PeTableKind {
    #[default]
    Sinusoidal,
    Learned,
}

/// Width `D` in the relative-kernel frequencies `10000^(2p/D)`: the fixed
/// 512 or the head's `d_k`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "FreqRaw", into = "FreqRaw")]
pub enum FreqDenominator {
    #[default]
    Fixed512,
    Dk,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum FreqRaw {
    Int(i64),
    Str(String),
}

impl TryFrom<FreqRaw> for FreqDenominator {
    type Error = String;
    fn try_from(raw: FreqRaw) -> Result<Self, String> {
        match raw {
            FreqRaw::Int(512) => Ok(FreqDenominator::Fixed512),
            FreqRaw::Str(s) if s == "512" => Ok(FreqDenominator::Fixed512),
            FreqRaw::Str(s) if s == "dk" => Ok(FreqDenominator::Dk),
            FreqRaw::Int(n) => Err(format!("freq_denominator must be 512 or \"dk\", got {n}")),
            FreqRaw::Str(s) => Err(format!("freq_denominator must be 512 or \"dk\", got {s:?}")),
        }
    }
}

impl From<FreqDenominator> for FreqRaw {
    fn from(f: FreqDenominator) -> Self {
        match f {
            FreqDenominator::Fixed512 => FreqRaw::Int(512),
            FreqDenominator::Dk => FreqRaw::Str("dk".into()),
        }
    }
}

impl FreqDenominator {
    pub fn width(self, d_k: usize) -> f64 {
        match self {
            FreqDenominator::Fixed512 => 512.0,
            FreqDenominator::Dk => d_k as f64,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PeIntegration {
    pub mode: PeMode,
    pub table: PeTableKind,
    pub freq: FreqDenominator,
    /// Longest sequence the embeddings cover; look-up offsets are clipped to
    /// `±(t_max − 1)`.
    pub t_max: usize,
}

impl PeIntegration {
    pub fn new(mode: PeMode, t_max: usize) -> Self {
        Self {
            mode,
            table: PeTableKind::Sinusoidal,
            freq: FreqDenominator::Fixed512,
            t_max,
        }
    }
}

impl fmt::Display for PeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// `[sin(pos/10000^(0/D)), cos(pos/10000^(0/D)), sin(pos/10000^(2/D)), …]`
/// truncated to `width` entries.
pub fn sinusoid(pos: f64, width: usize, denom_width: f64) -> Vec<f64> {
    (0..width)
        .map(|j| {
            let p = (j / 2) as f64;
            let angle = pos / 10000f64.powf(2.0 * p / denom_width);
            if j % 2 == 0 {
                angle.sin()
            } else {
                angle.cos()
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct PeTable {
    pub kind: PeTableKind,
    /// `[t_max × d_model]`.
    pub values: Tensor,
}

/// Fixed sine/cosine embeddings for positions `0..t`.
pub fn sinusoidal_pe(t: usize, d_model: usize) -> Result<PeTable> {
    if !d_model.is_multiple_of(2) {
        return Err(Error::OddDimension(d_model));
    }
    if t == 0 || d_model == 0 {
        return Err(Error::Config("empty positional table".into()));
    }
    let data = (0..t)
        .flat_map(|i| sinusoid(i as f64, d_model, d_model as f64))
        .collect();
    Ok(PeTable {
        kind: PeTableKind::Sinusoidal,
        values: Tensor::matrix(t, d_model, data)?,
    })
}

impl PeTable {
    pub fn learned(values: Tensor) -> Self {
        Self {
            kind: PeTableKind::Learned,
            values,
        }
    }

    pub fn t_max(&self) -> usize {
        self.values.rows()
    }

    pub fn d_model(&self) -> usize {
        self.values.cols()
    }

    /// Embeddings at `positions`. Sinusoidal tables also answer negative
    /// positions (memory slots) from the closed form; learned tables only
    /// have rows `0..t_max`.
    pub fn rows(&self, positions: &[i64]) -> Result<Tensor> {
        let t_max = self.t_max();
        let d = self.d_model();
        let mut data = Vec::with_capacity(positions.len() * d);
        for &p in positions {
            check_position(p, t_max, self.kind)?;
            if p >= 0 {
                data.extend_from_slice(self.values.row(p as usize));
            } else {
                data.extend(sinusoid(p as f64, d, d as f64));
            }
        }
        Tensor::matrix(positions.len(), d, data)
    }
}

pub(crate) fn check_position(p: i64, t_max: usize, kind: PeTableKind) -> Result<()> {
    let lo = match kind {
        PeTableKind::Sinusoidal => -(t_max as i64),
        PeTableKind::Learned => 0,
    };
    if p < lo || p >= t_max as i64 {
        return Err(Error::PositionOutOfRange {
            position: p,
            limit: t_max,
        });
    }
    Ok(())
}

/// Row of the look-up table for each (query, key) pair, row-major
/// `[T_q × T_k]`: offset `t_q − t_k` clipped to `±(t_max − 1)`, shifted to
/// start at zero.
pub fn lookup_index(pos_q: &[i64], pos_k: &[i64], t_max: usize) -> Vec<usize> {
    let lim = t_max as i64 - 1;
    pos_q
        .iter()
        .flat_map(|&q| pos_k.iter().map(move |&k| ((q - k).clamp(-lim, lim) + lim) as usize))
        .collect()
}

/// Relative sine/cosine vectors `R(r)` for every offset that occurs between
/// `pos_q` and `pos_k`, and each pair's row in that table.
pub fn xl_relative_table(pos_q: &[i64], pos_k: &[i64], width: usize, denom_width: f64) -> Result<(Tensor, Vec<usize>)> {
    let rels = pos_q.iter().flat_map(|&q| pos_k.iter().map(move |&k| q - k));
    let (lo, hi) = rels.fold((i64::MAX, i64::MIN), |(lo, hi), r| (lo.min(r), hi.max(r)));
    if lo > hi {
        return Err(Error::shape("xl_relative_table", "no positions"));
    }
    let n = (hi - lo + 1) as usize;
    let data = (lo..=hi).flat_map(|r| sinusoid(r as f64, width, denom_width)).collect();
    let index = pos_q
        .iter()
        .flat_map(|&q| pos_k.iter().map(move |&k| (q - k - lo) as usize))
        .collect();
    Ok((Tensor::matrix(n, width, data)?, index))
}

/// The Transformer-XL time factor for one query row:
/// `exp(Σ_p c_{2p}·sin(rel/10000^{2p/D}) + c_{2p+1}·cos(rel/10000^{2p/D}))`
/// with `c = f_q W_q W_Rᵀ` and `D` from `freq`.
pub fn xl_time_kernel(
    f_q_row: &Tensor,
    rel: i64,
    w_q: &Tensor,
    w_r: &Tensor,
    d_k: usize,
    freq: FreqDenominator,
) -> Result<f64> {
    if !d_k.is_multiple_of(2) {
        return Err(Error::OddDimension(d_k));
    }
    let q = f_q_row.clone().reshape(vec![1, f_q_row.len()])?.matmul(w_q)?;
    let c = q.matmul_t(w_r)?;
    let width = c.len();
    if width % 2 != 0 {
        return Err(Error::OddDimension(width));
    }
    let r = sinusoid(rel as f64, width, freq.width(d_k));
    let log: f64 = c.data().iter().zip(&r).map(|(a, b)| a * b).sum();
    let out = Tensor::scalar(log).exp()?;
    Ok(out.data()[0])
}

/// Kernel-side projection parameters of one attention layer (everything that
/// shapes the scores; the value and output projections are excluded).
pub fn attention_param_count(pe: &PeIntegration, symmetric: bool, d_model: usize, d_k: usize) -> usize {
    let proj = d_model * d_k;
    let base = if symmetric { proj } else { 2 * proj };
    match pe.mode {
        PeMode::None | PeMode::DirectSum => base,
        PeMode::LookupTable => base + (2 * pe.t_max - 1) * d_k,
        PeMode::XlProduct => base + proj,
        PeMode::SymmetricProduct => 2 * proj,
    }
}

/// Single-head joint scores `k((f_q, t_q), (f_k, t_k))` for the layer
/// described by `cfg`, with embeddings read from `table`.
pub fn joint_scores(
    cfg: &AttentionConfig,
    params: &AttentionParams,
    table: &PeTable,
    f_q: &Tensor,
    f_k: &Tensor,
    pos_q: &[i64],
    pos_k: &[i64],
) -> Result<Tensor> {
    let t_q = table.rows(pos_q)?;
    let t_k = table.rows(pos_k)?;
    crate::attention::layer::joint_scores_single(cfg, params, f_q, f_k, &t_q, &t_k, pos_q, pos_k)
}
