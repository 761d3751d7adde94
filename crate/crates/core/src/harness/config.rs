//! Experiment configuration, read from TOML. Unknown keys are rejected.
//!
//! ```toml
//! [model]
//! d_model = 64
//! n_heads = 4
//!
//! [kernel]
//! form = "exponential"
//! symmetric = true
//!
//! [pe]
//! mode = "symmetric_product"
//!
//! [filter]
//! kind = "causal"
//!
//! [value]
//! mode = "content_only"
//!
//! [task]
//! kind = "copy"
//!
//! [train]
//! steps = 2000
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attention::{AttentionConfig, FilterKind, FilterSpec, ValueMode};
use crate::error::{Error, Result};
use crate::kernel::{KernelForm, KernelSpec};
use crate::positional::{FreqDenominator, PeIntegration, PeMode, PeTableKind};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub kernel: KernelSection,
    #[serde(default)]
    pub pe: PeSection,
    #[serde(default)]
    pub filter: FilterSection,
    #[serde(default)]
    pub value: ValueSection,
    #[serde(default)]
    pub task: TaskSpec,
    #[serde(default)]
    pub train: TrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub d_model: usize,
    pub d_ff: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    /// Defaults to `d_model`.
    pub d_k: Option<usize>,
    /// Defaults to `d_model`.
    pub d_v: Option<usize>,
    pub dropout: f64,
    /// Longest position the embeddings cover; defaults to the task length.
    pub t_max: Option<usize>,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            d_model: 64,
            d_ff: 256,
            n_layers: 2,
            n_heads: 4,
            d_k: None,
            d_v: None,
            dropout: 0.0,
            t_max: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KernelSection {
    pub form: KernelForm,
    pub symmetric: bool,
}

impl Default for KernelSection {
    fn default() -> Self {
        Self {
            form: KernelForm::Exponential,
            symmetric: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PeSection {
    pub mode: PeMode,
    pub table: PeTableKind,
    pub freq_denominator: FreqDenominator,
}

impl Default for PeSection {
    fn default() -> Self {
        Self {
            mode: PeMode::DirectSum,
            table: PeTableKind::Sinusoidal,
            freq_denominator: FreqDenominator::Fixed512,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterSection {
    pub kind: FilterKind,
    pub mem_len: usize,
    pub stride: usize,
    pub window: usize,
    pub include_self: bool,
}

impl Default for FilterSection {
    fn default() -> Self {
        let f = FilterSpec::causal();
        Self {
            kind: f.kind,
            mem_len: f.mem_len,
            stride: f.stride,
            window: f.window,
            include_self: f.include_self,
        }
    }
}

impl FilterSection {
    pub fn spec(&self) -> FilterSpec {
        FilterSpec {
            kind: self.kind,
            mem_len: self.mem_len,
            stride: self.stride,
            window: self.window,
            include_self: self.include_self,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ValueSection {
    pub mode: ValueMode,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Copy,
    Reverse,
    PositionProbe,
    CharLm,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub seq_len: usize,
    /// Ignored by `char_lm`, whose vocabulary is the 256 byte values.
    pub vocab_size: usize,
    pub corpus_path: Option<PathBuf>,
    /// Lag of the position probe: target `i` is source token `i − offset`.
    pub offset: usize,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self {
            kind: TaskKind::Copy,
            seq_len: 10,
            vocab_size: 16,
            corpus_path: None,
            offset: 3,
        }
    }
}

impl TaskSpec {
    pub fn vocab(&self) -> usize {
        match self.kind {
            TaskKind::CharLm => 256,
            _ => self.vocab_size,
        }
    }

    pub fn arch(&self) -> Arch {
        match self.kind {
            TaskKind::CharLm => Arch::Lm,
            _ => Arch::Seq2Seq,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Global-norm clipping threshold; 0 disables clipping.
    pub grad_clip: f64,
    pub eval_every: usize,
    /// Held-out sequences per evaluation split.
    pub eval_size: usize,
    /// Seed of the held-out splits, independent of the run seed.
    pub eval_seed: u64,
    /// Stop once validation accuracy reaches this value.
    pub target_accuracy: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.3,
            steps: 1000,
            batch_size: 16,
            seed: 0,
            grad_clip: 1.0,
            eval_every: 250,
            eval_size: 256,
            eval_seed: 0x5eed_e7a1,
            target_accuracy: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    /// Decoder-only language model.
    Lm,
    /// Encoder–decoder.
    Seq2Seq,
}

/// Everything that fixes the parameter shapes and the forward pass.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub arch: Arch,
    pub vocab: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_k: usize,
    pub d_v: usize,
    pub dropout: f64,
    pub t_max: usize,
    pub kernel: KernelSection,
    pub pe: PeSection,
    pub filter: FilterSection,
    pub value: ValueSection,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let t = &self.task;
        if t.seq_len == 0 {
            return Err(Error::Config("task.seq_len must be positive".into()));
        }
        if t.kind != TaskKind::CharLm && t.vocab_size < 2 {
            return Err(Error::Config("task.vocab_size must be at least 2".into()));
        }
        if t.kind == TaskKind::PositionProbe {
            if t.seq_len > t.vocab_size {
                return Err(Error::Config(
                    "position_probe draws distinct tokens, so seq_len must not exceed vocab_size".into(),
                ));
            }
            if t.offset == 0 || t.offset >= t.seq_len {
                return Err(Error::Config("position_probe offset must lie in 1..seq_len".into()));
            }
        }
        if t.kind == TaskKind::CharLm && t.corpus_path.is_none() {
            return Err(Error::Config("char_lm needs task.corpus_path".into()));
        }
        let tr = &self.train;
        if tr.batch_size == 0 || tr.eval_every == 0 || tr.eval_size == 0 {
            return Err(Error::Config(
                "train.batch_size, eval_every and eval_size must be positive".into(),
            ));
        }
        if tr.lr.is_nan() || tr.lr < 0.0 || tr.grad_clip.is_nan() || tr.grad_clip < 0.0 {
            return Err(Error::Config(
                "train.lr and train.grad_clip must be non-negative".into(),
            ));
        }
        self.model_config()?.validate()
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let m = &self.model;
        let t_max = m.t_max.unwrap_or(self.task.seq_len);
        Ok(ModelConfig {
            arch: self.task.arch(),
            vocab: self.task.vocab(),
            d_model: m.d_model,
            d_ff: m.d_ff,
            n_layers: m.n_layers,
            n_heads: m.n_heads,
            d_k: m.d_k.unwrap_or(m.d_model),
            d_v: m.d_v.unwrap_or(m.d_model),
            dropout: m.dropout,
            t_max,
            kernel: self.kernel.clone(),
            pe: self.pe.clone(),
            filter: self.filter.clone(),
            value: self.value.clone(),
        })
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_layers == 0 || self.vocab == 0 {
            return Err(Error::Config(
                "model.d_model, n_layers and the vocabulary must be positive".into(),
            ));
        }
        if self.d_ff < self.d_model {
            return Err(Error::Config(format!(
                "model.d_ff = {} must be at least d_model = {}",
                self.d_ff, self.d_model
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("model.dropout must lie in [0, 1)".into()));
        }
        if self.t_max == 0 {
            return Err(Error::Config("model.t_max must be positive".into()));
        }
        if self.pe.table == PeTableKind::Sinusoidal && !self.d_model.is_multiple_of(2) {
            return Err(Error::OddDimension(self.d_model));
        }
        let kind = self.filter.kind;
        if self.arch == Arch::Lm && !kind.is_causal() {
            return Err(Error::Config(format!(
                "a language model needs a causal filter, got filter.kind = {}",
                kind.name()
            )));
        }
        if self.arch == Arch::Seq2Seq && kind == FilterKind::Full {
            return Err(Error::Config(
                "decoder self-attention needs a causal filter; filter.kind = full is reserved for the encoder".into(),
            ));
        }
        if kind == FilterKind::CausalWithMemory && self.pe.table == PeTableKind::Learned {
            return Err(Error::Config(
                "memory slots sit at negative positions, which a learned table cannot embed".into(),
            ));
        }
        for role in [Role::Encoder, Role::Decoder, Role::Cross] {
            if self.arch == Arch::Lm && role != Role::Decoder {
                continue;
            }
            self.attention(role)?;
        }
        Ok(())
    }

    /// Configuration of the attention layers playing `role`.
    pub fn attention(&self, role: Role) -> Result<AttentionConfig> {
        let filter = match role {
            Role::Encoder | Role::Cross => FilterSpec::full(),
            Role::Decoder => self.filter.spec(),
        };
        let pe = PeIntegration {
            mode: self.pe.mode,
            table: self.pe.table,
            freq: self.pe.freq_denominator,
            t_max: self.t_max,
        };
        let cfg = AttentionConfig {
            d_model: self.d_model,
            d_k: self.d_k,
            d_v: self.d_v,
            n_heads: self.n_heads,
            kernel: KernelSpec::new(self.kernel.form, self.kernel.symmetric, self.d_model, self.d_k)?,
            pe,
            filter,
            value: self.value.mode,
            eps: crate::attention::DEFAULT_EPS,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// SHA-256 of the canonical JSON form; stored in checkpoints.
    pub fn digest(&self) -> [u8; 32] {
        let json = serde_json::to_vec(self).expect("model config serializes");
        Sha256::digest(&json).into()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Encoder,
    Decoder,
    Cross,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        ExperimentConfig::default().validate().unwrap();
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let e = ExperimentConfig::from_toml("[model]\nd_modle = 8\n").unwrap_err();
        assert!(e.to_string().contains("d_modle"), "{e}");
        assert!(ExperimentConfig::from_toml("[bogus]\n").is_err());
    }

    #[test]
    fn round_trip() {
        let mut c = ExperimentConfig::default();
        c.pe.freq_denominator = FreqDenominator::Dk;
        c.train.target_accuracy = Some(0.99);
        let back = ExperimentConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn lm_rejects_full_filter() {
        let c = ExperimentConfig::from_toml(
            "[task]\nkind = \"char_lm\"\ncorpus_path = \"x.txt\"\n[filter]\nkind = \"full\"\n",
        );
        assert!(matches!(c, Err(Error::Config(_))));
    }

    #[test]
    fn learned_table_with_memory_rejected() {
        let c = ExperimentConfig::from_toml(
            "[pe]\ntable = \"learned\"\n[filter]\nkind = \"causal_with_memory\"\nmem_len = 2\n",
        );
        assert!(matches!(c, Err(Error::Config(_))));
    }

    #[test]
    fn probe_needs_distinct_tokens() {
        let c = ExperimentConfig::from_toml("[task]\nkind = \"position_probe\"\nseq_len = 20\nvocab_size = 16\n");
        assert!(matches!(c, Err(Error::Config(_))));
    }

    #[test]
    fn digest_tracks_model_fields_only() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        b.train.lr = 0.01;
        assert_eq!(a.model_config().unwrap().digest(), b.model_config().unwrap().digest());
        b.model.d_model = 32;
        assert_ne!(a.model_config().unwrap().digest(), b.model_config().unwrap().digest());
    }
}
