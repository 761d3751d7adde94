//! Synthetic sequence tasks and byte-level text.
//!
//! * `copy` / `reverse`: the decoder reproduces the source (reversed), with
//!   teacher forcing from a BOS token.
//! * `position_probe`: the source holds distinct tokens and every decoder
//!   input is BOS, so target `i` (source token `i − offset`) can only be
//!   found by position. The first `offset` targets carry zero weight.
//! * `char_lm`: next-byte prediction on a text corpus split 90/5/5 into
//!   train, validation and test.

use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::harness::config::{TaskKind, TaskSpec};
use crate::harness::model::ModelInputs;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Validation,
    Test,
}

/// One batch: model inputs plus per-position targets and loss weights,
/// flattened item-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub inputs: ModelInputs,
    pub targets: Vec<usize>,
    pub weights: Vec<f64>,
}

impl Batch {
    pub fn len(&self) -> usize {
        match &self.inputs {
            ModelInputs::Seq2Seq { src, .. } => src.len(),
            ModelInputs::Lm { tokens } => tokens.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Items `range` as a batch of their own.
    pub fn slice(&self, range: std::ops::Range<usize>) -> Batch {
        let per = self.targets.len() / self.len().max(1);
        let rows = range.start * per..range.end * per;
        let inputs = match &self.inputs {
            ModelInputs::Seq2Seq { src, tgt_in } => ModelInputs::Seq2Seq {
                src: src[range.clone()].to_vec(),
                tgt_in: tgt_in[range].to_vec(),
            },
            ModelInputs::Lm { tokens } => ModelInputs::Lm {
                tokens: tokens[range].to_vec(),
            },
        };
        Batch {
            inputs,
            targets: self.targets[rows.clone()].to_vec(),
            weights: self.weights[rows].to_vec(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Task {
    pub spec: TaskSpec,
    corpus: Option<Corpus>,
}

#[derive(Clone, Debug)]
struct Corpus {
    train: Vec<u8>,
    validation: Vec<u8>,
    test: Vec<u8>,
}

impl Corpus {
    fn load(path: &Path, window: usize) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let n = bytes.len();
        let (a, b) = (n * 90 / 100, n * 95 / 100);
        let corpus = Self {
            train: bytes[..a].to_vec(),
            validation: bytes[a..b].to_vec(),
            test: bytes[b..].to_vec(),
        };
        let shortest = corpus.train.len().min(corpus.validation.len()).min(corpus.test.len());
        if shortest < window {
            return Err(Error::Config(format!(
                "{}: {n} bytes is too short; every 5% split needs at least {window} bytes",
                path.display()
            )));
        }
        Ok(corpus)
    }

    fn split(&self, split: Split) -> &[u8] {
        match split {
            Split::Train => &self.train,
            Split::Validation => &self.validation,
            Split::Test => &self.test,
        }
    }
}

impl Task {
    pub fn new(spec: &TaskSpec) -> Result<Self> {
        let corpus = match spec.kind {
            TaskKind::CharLm => {
                let path = spec
                    .corpus_path
                    .as_ref()
                    .ok_or_else(|| Error::Config("char_lm needs task.corpus_path".into()))?;
                Some(Corpus::load(path, spec.seq_len + 1)?)
            }
            _ => None,
        };
        Ok(Self {
            spec: spec.clone(),
            corpus,
        })
    }

    /// Begin-of-sequence token of the encoder–decoder tasks.
    pub fn bos(&self) -> usize {
        self.spec.vocab_size
    }

    pub fn sample<R: Rng + ?Sized>(&self, split: Split, n: usize, rng: &mut R) -> Batch {
        let t = self.spec.seq_len;
        let v = self.spec.vocab_size;
        let bos = self.bos();
        let mut targets = Vec::with_capacity(n * t);
        let mut weights = Vec::with_capacity(n * t);
        match self.spec.kind {
            TaskKind::Copy | TaskKind::Reverse => {
                let mut src = Vec::with_capacity(n);
                let mut tgt_in = Vec::with_capacity(n);
                for _ in 0..n {
                    let s: Vec<usize> = (0..t).map(|_| rng.gen_range(0..v)).collect();
                    let mut tgt = s.clone();
                    if self.spec.kind == TaskKind::Reverse {
                        tgt.reverse();
                    }
                    let mut inp = vec![bos];
                    inp.extend_from_slice(&tgt[..t - 1]);
                    targets.extend_from_slice(&tgt);
                    weights.extend(std::iter::repeat_n(1.0, t));
                    src.push(s);
                    tgt_in.push(inp);
                }
                Batch {
                    inputs: ModelInputs::Seq2Seq { src, tgt_in },
                    targets,
                    weights,
                }
            }
            TaskKind::PositionProbe => {
                let off = self.spec.offset;
                let mut src = Vec::with_capacity(n);
                for _ in 0..n {
                    let s = sample(rng, v, t).into_vec();
                    for i in 0..t {
                        if i >= off {
                            targets.push(s[i - off]);
                            weights.push(1.0);
                        } else {
                            targets.push(0);
                            weights.push(0.0);
                        }
                    }
                    src.push(s);
                }
                Batch {
                    inputs: ModelInputs::Seq2Seq {
                        src,
                        tgt_in: vec![vec![bos; t]; n],
                    },
                    targets,
                    weights,
                }
            }
            TaskKind::CharLm => {
                let text = self.corpus.as_ref().expect("loaded in new").split(split);
                let mut tokens = Vec::with_capacity(n);
                for _ in 0..n {
                    let start = rng.gen_range(0..=text.len() - (t + 1));
                    let w = &text[start..start + t + 1];
                    tokens.push(w[..t].iter().map(|&b| b as usize).collect());
                    targets.extend(w[1..].iter().map(|&b| b as usize));
                    weights.extend(std::iter::repeat_n(1.0, t));
                }
                Batch {
                    inputs: ModelInputs::Lm { tokens },
                    targets,
                    weights,
                }
            }
        }
    }

    /// A fixed held-out batch: synthetic tasks draw from `seed` (validation
    /// and test use different streams); text tasks read their own split.
    pub fn heldout(&self, split: Split, n: usize, seed: u64) -> Batch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(match split {
            Split::Train => 0,
            Split::Validation => 1,
            Split::Test => 2,
        });
        self.sample(split, n, &mut rng)
    }
}
