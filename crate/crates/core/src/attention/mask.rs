//! Set filtering: which keys each query may attend to.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterKind {
    Full,
    Causal,
    CausalWithMemory,
    Strided,
}

impl FilterKind {
    pub const ALL: [FilterKind; 4] = [
        FilterKind::Full,
        FilterKind::Causal,
        FilterKind::CausalWithMemory,
        FilterKind::Strided,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FilterKind::Full => "full",
            FilterKind::Causal => "causal",
            FilterKind::CausalWithMemory => "causal_with_memory",
            FilterKind::Strided => "strided",
        }
    }

    /// Never lets a query see a later position.
    pub fn is_causal(self) -> bool {
        self != FilterKind::Full
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FilterSpec {
    pub kind: FilterKind,
    pub mem_len: usize,
    pub stride: usize,
    pub window: usize,
    pub include_self: bool,
}

impl FilterSpec {
    pub fn full() -> Self {
        Self::of(FilterKind::Full)
    }

    pub fn causal() -> Self {
        Self::of(FilterKind::Causal)
    }

    pub fn with_memory(mem_len: usize) -> Self {
        Self {
            mem_len,
            ..Self::of(FilterKind::CausalWithMemory)
        }
    }

    pub fn strided(stride: usize, window: usize) -> Self {
        Self {
            stride,
            window,
            ..Self::of(FilterKind::Strided)
        }
    }

    /// `kind` with defaults: no memory, stride 2, window 1, self included.
    pub fn of(kind: FilterKind) -> Self {
        Self {
            kind,
            mem_len: 0,
            stride: 2,
            window: 1,
            include_self: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind == FilterKind::Strided && (self.stride == 0 || self.window == 0) {
            return Err(Error::Config("strided filter needs positive stride and window".into()));
        }
        Ok(())
    }

    /// Memory keys this filter expects in front of the segment.
    pub fn memory(&self) -> usize {
        match self.kind {
            FilterKind::CausalWithMemory => self.mem_len,
            _ => 0,
        }
    }
}

/// Row-major boolean visibility matrix `[T_q × T_k]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    rows: usize,
    cols: usize,
    data: Vec<bool>,
}

impl Mask {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.data[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[bool] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_counts(&self) -> Vec<usize> {
        (0..self.rows)
            .map(|i| self.row(i).iter().filter(|&&v| v).count())
            .collect()
    }
}

/// Visibility of `T_k` keys from `T_q` queries.
///
/// For the causal kinds the last `T_q` keys are the queries' own positions
/// and anything before them is a prefix (memory). Query `i` sits at key
/// index `T_k − T_q + i`. Plain causal filtering ignores the prefix; the
/// memory variant additionally sees the `mem_len` keys just before the
/// segment.
pub fn build_mask(filter: &FilterSpec, t_q: usize, t_k: usize) -> Result<Mask> {
    filter.validate()?;
    if t_q == 0 || t_k == 0 {
        return Err(Error::shape("build_mask", "empty query or key set"));
    }
    if filter.kind.is_causal() && t_k < t_q {
        return Err(Error::shape(
            "build_mask",
            format!("causal filtering needs T_k ≥ T_q, got {t_k} < {t_q}"),
        ));
    }
    let off = t_k.saturating_sub(t_q);
    let mut data = vec![false; t_q * t_k];
    for i in 0..t_q {
        for j in 0..t_k {
            let own = |j: usize| -> bool {
                if j < off {
                    return false;
                }
                let kj = j - off;
                if filter.include_self {
                    kj <= i
                } else {
                    kj < i
                }
            };
            data[i * t_k + j] = match filter.kind {
                FilterKind::Full => true,
                FilterKind::Causal => own(j),
                FilterKind::CausalWithMemory => own(j) || (j < off && j + filter.mem_len >= off),
                FilterKind::Strided => {
                    own(j) && {
                        let d = i - (j - off);
                        d.is_multiple_of(filter.stride) || d < filter.window
                    }
                }
            };
        }
        if !data[i * t_k..(i + 1) * t_k].iter().any(|&v| v) {
            return Err(Error::EmptyVisibility { row: i });
        }
    }
    Ok(Mask {
        rows: t_q,
        cols: t_k,
        data,
    })
}
