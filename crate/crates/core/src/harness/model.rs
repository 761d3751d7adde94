//! Small pre-norm transformer stacks built from kernel-smoother attention.
//!
//! * [`Arch::Seq2Seq`]: encoder (full self-attention) and decoder (filtered
//!   self-attention, then full attention over the encoder output).
//! * [`Arch::Lm`]: decoder-only. Under `causal_with_memory` the window is
//!   processed in segments of `mem_len` tokens; each segment also attends to
//!   the previous segment's hidden states, which are detached from the graph.
//!
//! Attention layers receive the content stream `f` and, separately, the
//! positional embeddings `t`; how `t` enters is decided by the PE mode.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{attend, AttentionConfig, AttentionParams, AttentionVars, AttnInput, FilterKind};
use crate::error::{Error, Result};
use crate::harness::config::{Arch, ModelConfig, Role};
use crate::positional::{sinusoidal_pe, PeTable, PeTableKind};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const LN_EPS: f64 = 1e-5;
pub const EMBED_STD: f64 = 0.5;

/// Named parameter tensors in a fixed order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(t);
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    /// Scalar parameter count.
    pub fn total(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }
}

/// A [`ParamSet`] recorded on one tape.
pub struct Bound<'a> {
    set: &'a ParamSet,
    pub vars: Vec<Var>,
}

impl Bound<'_> {
    pub fn get(&self, name: &str) -> Var {
        let i = self
            .set
            .position(name)
            .unwrap_or_else(|| panic!("parameter {name} is not part of this model"));
        self.vars[i]
    }

    fn attention(&self, cfg: &AttentionConfig, prefix: &str) -> AttentionVars {
        AttentionVars::build(cfg, |slot, _| self.get(&format!("{prefix}.{slot}")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamSet,
    sinusoids: Option<PeTable>,
}

/// Inverted dropout applied during training.
pub struct Dropout<'r> {
    pub rate: f64,
    pub rng: &'r mut ChaCha8Rng,
}

impl Model {
    /// Fresh parameters drawn from `seed`.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = config;
        let d = c.d_model;
        let mut p = ParamSet::default();
        let in_vocab = match c.arch {
            Arch::Seq2Seq => c.vocab + 1,
            Arch::Lm => c.vocab,
        };
        p.push("embed", Tensor::randn(&[in_vocab, d], EMBED_STD, &mut rng));
        if c.pe.table == PeTableKind::Learned {
            p.push("pe", Tensor::randn(&[c.t_max, d], EMBED_STD, &mut rng));
        }
        let ln = |p: &mut ParamSet, name: &str| {
            p.push(format!("{name}.g"), Tensor::filled(&[d], 1.0));
            p.push(format!("{name}.b"), Tensor::zeros(&[d]));
        };
        let attn = |p: &mut ParamSet, name: &str, cfg: &AttentionConfig, rng: &mut ChaCha8Rng| {
            for (slot, t) in AttentionParams::init(cfg, rng).named() {
                p.push(format!("{name}.{slot}"), t.clone());
            }
        };
        let ff = |p: &mut ParamSet, name: &str, rng: &mut ChaCha8Rng| {
            p.push(
                format!("{name}.w1"),
                Tensor::randn(&[d, c.d_ff], 1.0 / (d as f64).sqrt(), rng),
            );
            p.push(format!("{name}.b1"), Tensor::zeros(&[c.d_ff]));
            p.push(
                format!("{name}.w2"),
                Tensor::randn(&[c.d_ff, d], 1.0 / (c.d_ff as f64).sqrt(), rng),
            );
            p.push(format!("{name}.b2"), Tensor::zeros(&[d]));
        };
        if c.arch == Arch::Seq2Seq {
            let enc = c.attention(Role::Encoder)?;
            for l in 0..c.n_layers {
                ln(&mut p, &format!("enc.{l}.ln1"));
                attn(&mut p, &format!("enc.{l}.self"), &enc, &mut rng);
                ln(&mut p, &format!("enc.{l}.ln2"));
                ff(&mut p, &format!("enc.{l}.ff"), &mut rng);
            }
            ln(&mut p, "enc.ln");
        }
        let dec = c.attention(Role::Decoder)?;
        let cross = c.attention(Role::Cross)?;
        for l in 0..c.n_layers {
            ln(&mut p, &format!("dec.{l}.ln1"));
            attn(&mut p, &format!("dec.{l}.self"), &dec, &mut rng);
            if c.arch == Arch::Seq2Seq {
                ln(&mut p, &format!("dec.{l}.ln2"));
                attn(&mut p, &format!("dec.{l}.cross"), &cross, &mut rng);
            }
            ln(&mut p, &format!("dec.{l}.ln3"));
            ff(&mut p, &format!("dec.{l}.ff"), &mut rng);
        }
        ln(&mut p, "dec.ln");
        p.push("out", Tensor::zeros(&[d, c.vocab]));
        Self::assemble(config.clone(), p)
    }

    /// Wraps existing parameters after checking names and shapes against
    /// the layout `config` prescribes.
    pub fn from_params(config: ModelConfig, params: ParamSet) -> Result<Self> {
        let template = Self::init(&config, 0)?;
        template.check_layout(&params)?;
        Ok(Self { params, ..template })
    }

    /// Errors with [`Error::DimensionMismatch`] unless `params` has exactly
    /// this model's names and shapes.
    pub fn check_layout(&self, params: &ParamSet) -> Result<()> {
        for (name, t) in self.params.iter() {
            let found = params.get(name).map(|p| p.shape().to_vec()).unwrap_or_default();
            if found != t.shape() {
                return Err(Error::DimensionMismatch {
                    name: name.to_string(),
                    expected: t.shape().to_vec(),
                    found,
                });
            }
        }
        if let Some(extra) = params.names().iter().find(|n| self.params.get(n).is_none()) {
            return Err(Error::DimensionMismatch {
                name: extra.clone(),
                expected: Vec::new(),
                found: params.get(extra).map(|p| p.shape().to_vec()).unwrap_or_default(),
            });
        }
        Ok(())
    }

    fn assemble(config: ModelConfig, params: ParamSet) -> Result<Self> {
        let sinusoids = match config.pe.table {
            PeTableKind::Sinusoidal => Some(sinusoidal_pe(config.t_max, config.d_model)?),
            PeTableKind::Learned => None,
        };
        Ok(Self {
            config,
            params,
            sinusoids,
        })
    }

    pub fn param_count(&self) -> usize {
        self.params.total()
    }

    /// Kernel-side attention parameters summed over every layer.
    pub fn attention_kernel_params(&self) -> usize {
        self.params
            .iter()
            .filter(|(n, _)| {
                let slot = n.rsplit('.').next().unwrap_or("");
                (n.contains(".self.") || n.contains(".cross.")) && !matches!(slot, "w_v" | "w_o")
            })
            .map(|(_, t)| t.len())
            .sum()
    }

    pub fn bind<'a>(&'a self, tape: &mut Tape, trainable: bool) -> Bound<'a> {
        let vars = self
            .params
            .tensors()
            .iter()
            .map(|t| {
                if trainable {
                    tape.leaf(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect();
        Bound {
            set: &self.params,
            vars,
        }
    }

    /// Positional embeddings at `positions`, repeated for `batch` items, if
    /// any attention layer reads them.
    fn embeddings(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        positions: &[i64],
        batch: usize,
        cfg: &AttentionConfig,
    ) -> Result<Option<Var>> {
        if !cfg.uses_embeddings() {
            return Ok(None);
        }
        match &self.sinusoids {
            Some(table) => {
                let rows = table.rows(positions)?;
                let stacked = Tensor::concat_rows(&vec![&rows; batch])?;
                Ok(Some(tape.constant(stacked)))
            }
            None => {
                let t_max = self.config.t_max;
                let mut idx = Vec::with_capacity(positions.len() * batch);
                for _ in 0..batch {
                    for &p in positions {
                        crate::positional::check_position(p, t_max, PeTableKind::Learned)?;
                        idx.push(p as usize);
                    }
                }
                Ok(Some(tape.gather_rows(bound.get("pe"), &idx)?))
            }
        }
    }

    fn layer_norm(&self, tape: &mut Tape, bound: &Bound, x: Var, name: &str) -> Result<Var> {
        let g = bound.get(&format!("{name}.g"));
        let b = bound.get(&format!("{name}.b"));
        tape.layer_norm(x, g, b, LN_EPS)
    }

    fn feed_forward(&self, tape: &mut Tape, bound: &Bound, x: Var, name: &str) -> Result<Var> {
        let h = tape.matmul(x, bound.get(&format!("{name}.w1")))?;
        let h = tape.add(h, bound.get(&format!("{name}.b1")))?;
        let h = tape.relu(h)?;
        let o = tape.matmul(h, bound.get(&format!("{name}.w2")))?;
        tape.add(o, bound.get(&format!("{name}.b2")))
    }

    fn embed(&self, tape: &mut Tape, bound: &Bound, tokens: &[Vec<usize>]) -> Result<(Var, usize)> {
        let len = check_rectangular(tokens)?;
        let rows = bound.set.get("embed").map(Tensor::rows).unwrap_or(0);
        let flat: Vec<usize> = tokens.concat();
        if let Some(&bad) = flat.iter().find(|&&t| t >= rows) {
            return Err(Error::shape(
                "embed",
                format!("token {bad} outside a vocabulary of {rows}"),
            ));
        }
        Ok((tape.gather_rows(bound.get("embed"), &flat)?, len))
    }

    fn residual(tape: &mut Tape, x: Var, y: Var, dropout: &mut Option<Dropout>) -> Result<Var> {
        let y = match dropout {
            Some(d) if d.rate > 0.0 => {
                let keep = 1.0 - d.rate;
                let shape = tape.value(y).shape().to_vec();
                let n: usize = shape.iter().product();
                let mask = (0..n)
                    .map(|_| if d.rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
                    .collect();
                let m = tape.constant(Tensor::new(shape, mask)?);
                tape.mul(y, m)?
            }
            _ => y,
        };
        tape.add(x, y)
    }

    /// Decoder-side logits `[B·T_t × vocab]` of the encoder–decoder.
    pub fn seq2seq_logits(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        src: &[Vec<usize>],
        tgt_in: &[Vec<usize>],
        mut dropout: Option<Dropout>,
    ) -> Result<Var> {
        let c = &self.config;
        if c.arch != Arch::Seq2Seq {
            return Err(Error::Config("seq2seq_forward needs an encoder–decoder model".into()));
        }
        if src.len() != tgt_in.len() {
            return Err(Error::shape("seq2seq_forward", "source and target batch sizes differ"));
        }
        let batch = src.len();
        let enc_cfg = c.attention(Role::Encoder)?;
        let dec_cfg = c.attention(Role::Decoder)?;
        let cross_cfg = c.attention(Role::Cross)?;

        let (mut x, ts) = self.embed(tape, bound, src)?;
        let pos_s: Vec<i64> = (0..ts as i64).collect();
        let t_src = self.embeddings(tape, bound, &pos_s, batch, &enc_cfg)?;
        for l in 0..c.n_layers {
            let y = self.layer_norm(tape, bound, x, &format!("enc.{l}.ln1"))?;
            let p = bound.attention(&enc_cfg, &format!("enc.{l}.self"));
            let input = AttnInput {
                f_q: y,
                f_k: y,
                t_q: t_src,
                t_k: t_src,
                pos_q: &pos_s,
                pos_k: &pos_s,
                batch,
            };
            let a = attend(tape, &enc_cfg, &p, &input)?;
            x = Self::residual(tape, x, a.out, &mut dropout)?;
            let y = self.layer_norm(tape, bound, x, &format!("enc.{l}.ln2"))?;
            let f = self.feed_forward(tape, bound, y, &format!("enc.{l}.ff"))?;
            x = Self::residual(tape, x, f, &mut dropout)?;
        }
        let memory = self.layer_norm(tape, bound, x, "enc.ln")?;

        let (mut z, tt) = self.embed(tape, bound, tgt_in)?;
        let pos_t: Vec<i64> = (0..tt as i64).collect();
        let t_tgt = self.embeddings(tape, bound, &pos_t, batch, &dec_cfg)?;
        for l in 0..c.n_layers {
            let y = self.layer_norm(tape, bound, z, &format!("dec.{l}.ln1"))?;
            let p = bound.attention(&dec_cfg, &format!("dec.{l}.self"));
            let input = AttnInput {
                f_q: y,
                f_k: y,
                t_q: t_tgt,
                t_k: t_tgt,
                pos_q: &pos_t,
                pos_k: &pos_t,
                batch,
            };
            let a = attend(tape, &dec_cfg, &p, &input)?;
            z = Self::residual(tape, z, a.out, &mut dropout)?;

            let y = self.layer_norm(tape, bound, z, &format!("dec.{l}.ln2"))?;
            let p = bound.attention(&cross_cfg, &format!("dec.{l}.cross"));
            let input = AttnInput {
                f_q: y,
                f_k: memory,
                t_q: t_tgt,
                t_k: t_src,
                pos_q: &pos_t,
                pos_k: &pos_s,
                batch,
            };
            let a = attend(tape, &cross_cfg, &p, &input)?;
            z = Self::residual(tape, z, a.out, &mut dropout)?;

            let y = self.layer_norm(tape, bound, z, &format!("dec.{l}.ln3"))?;
            let f = self.feed_forward(tape, bound, y, &format!("dec.{l}.ff"))?;
            z = Self::residual(tape, z, f, &mut dropout)?;
        }
        let h = self.layer_norm(tape, bound, z, "dec.ln")?;
        tape.matmul(h, bound.get("out"))
    }

    /// Next-token logits `[B·T × vocab]` of the language model.
    pub fn lm_logits(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        tokens: &[Vec<usize>],
        mut dropout: Option<Dropout>,
    ) -> Result<Var> {
        let c = &self.config;
        if c.arch != Arch::Lm {
            return Err(Error::Config("lm_forward needs a decoder-only model".into()));
        }
        let cfg = c.attention(Role::Decoder)?;
        if !cfg.filter.kind.is_causal() {
            return Err(Error::Config("a language model needs a causal filter".into()));
        }
        let batch = tokens.len();
        let len = check_rectangular(tokens)?;
        let seg = match cfg.filter.kind {
            FilterKind::CausalWithMemory if cfg.filter.mem_len > 0 => cfg.filter.mem_len.min(len),
            _ => len,
        };
        // Detached per-layer attention inputs of the previous segment,
        // one [mem × d_model] block per item.
        let mut memory: Vec<Vec<Tensor>> = vec![Vec::new(); c.n_layers];
        let mut outputs = Vec::new();
        let mut start = 0;
        while start < len {
            let end = (start + seg).min(len);
            let chunk: Vec<Vec<usize>> = tokens.iter().map(|t| t[start..end].to_vec()).collect();
            let (mut x, s) = self.embed(tape, bound, &chunk)?;
            let pos_q: Vec<i64> = (0..s as i64).collect();
            let t_q = self.embeddings(tape, bound, &pos_q, batch, &cfg)?;
            #[allow(clippy::needless_range_loop)]
            for l in 0..c.n_layers {
                let y = self.layer_norm(tape, bound, x, &format!("dec.{l}.ln1"))?;
                let mem = &memory[l];
                let m = mem.first().map_or(0, Tensor::rows);
                let (f_k, pos_k, t_k) = if m == 0 {
                    (y, pos_q.clone(), t_q)
                } else {
                    let mut parts = Vec::with_capacity(2 * batch);
                    for (b, block) in mem.iter().enumerate() {
                        parts.push(tape.constant(block.clone()));
                        parts.push(if batch == 1 { y } else { tape.slice_rows(y, b * s, s)? });
                    }
                    let f_k = tape.concat_rows(&parts)?;
                    let pos_k: Vec<i64> = (-(m as i64)..s as i64).collect();
                    let t_k = self.embeddings(tape, bound, &pos_k, batch, &cfg)?;
                    (f_k, pos_k, t_k)
                };
                let p = bound.attention(&cfg, &format!("dec.{l}.self"));
                let input = AttnInput {
                    f_q: y,
                    f_k,
                    t_q,
                    t_k,
                    pos_q: &pos_q,
                    pos_k: &pos_k,
                    batch,
                };
                let a = attend(tape, &cfg, &p, &input)?;
                if seg < len {
                    let keep = cfg.filter.mem_len.min(s);
                    let yv = tape.value(y);
                    memory[l] = (0..batch)
                        .map(|b| yv.slice_rows(b * s + s - keep, keep))
                        .collect::<Result<_>>()?;
                }
                x = Self::residual(tape, x, a.out, &mut dropout)?;
                let y = self.layer_norm(tape, bound, x, &format!("dec.{l}.ln3"))?;
                let f = self.feed_forward(tape, bound, y, &format!("dec.{l}.ff"))?;
                x = Self::residual(tape, x, f, &mut dropout)?;
            }
            let h = self.layer_norm(tape, bound, x, "dec.ln")?;
            outputs.push(tape.matmul(h, bound.get("out"))?);
            start = end;
        }
        if outputs.len() == 1 {
            return Ok(outputs[0]);
        }
        // Segments are segment-major; reorder rows to item-major.
        let segs = outputs.len();
        let mut rows = Vec::with_capacity(batch * segs);
        for b in 0..batch {
            for (k, &o) in outputs.iter().enumerate() {
                let s = (len - k * seg).min(seg);
                rows.push(if batch == 1 { o } else { tape.slice_rows(o, b * s, s)? });
            }
        }
        tape.concat_rows(&rows)
    }

    /// Logits as a plain `[B·T × vocab]` tensor, no gradients.
    pub fn logits(&self, inputs: &ModelInputs) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let v = match inputs {
            ModelInputs::Seq2Seq { src, tgt_in } => self.seq2seq_logits(&mut tape, &bound, src, tgt_in, None)?,
            ModelInputs::Lm { tokens } => self.lm_logits(&mut tape, &bound, tokens, None)?,
        };
        Ok(tape.value(v).clone())
    }
}

/// Token inputs of one forward pass.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ModelInputs {
    Seq2Seq {
        src: Vec<Vec<usize>>,
        tgt_in: Vec<Vec<usize>>,
    },
    Lm {
        tokens: Vec<Vec<usize>>,
    },
}

fn check_rectangular(tokens: &[Vec<usize>]) -> Result<usize> {
    let len = tokens.first().map(Vec::len).unwrap_or(0);
    if len == 0 || tokens.iter().any(|t| t.len() != len) {
        return Err(Error::shape("forward", "token batch must be non-empty and rectangular"));
    }
    Ok(len)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::config::ExperimentConfig;

    fn small(arch_toml: &str) -> ModelConfig {
        let text = format!("[model]\nd_model = 8\nd_ff = 16\nn_layers = 1\nn_heads = 2\n{arch_toml}");
        ExperimentConfig::from_toml(&text).unwrap().model_config().unwrap()
    }

    #[test]
    fn fresh_model_gives_zero_logits() {
        let cfg = small("");
        let m = Model::init(&cfg, 0).unwrap();
        let x = ModelInputs::Seq2Seq {
            src: vec![vec![1, 2, 3]],
            tgt_in: vec![vec![16, 1]],
        };
        let l = m.logits(&x).unwrap();
        assert_eq!(l.shape(), &[2, 16]);
        assert_eq!(l.max_abs(), 0.0);
    }

    #[test]
    fn init_is_deterministic() {
        let cfg = small("");
        assert_eq!(Model::init(&cfg, 5).unwrap(), Model::init(&cfg, 5).unwrap());
        assert_ne!(Model::init(&cfg, 5).unwrap(), Model::init(&cfg, 6).unwrap());
    }

    #[test]
    fn lm_shape() {
        let cfg = small("[task]\nkind = \"char_lm\"\ncorpus_path = \"unused\"\n");
        let m = Model::init(&cfg, 0).unwrap();
        let l = m.logits(&ModelInputs::Lm { tokens: vec![vec![65]] }).unwrap();
        assert_eq!(l.shape(), &[1, 256]);
    }
}
