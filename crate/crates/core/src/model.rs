//! A full recognizer: encoder plus classification and extraction heads for
//! one decoding order.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{AnnotatedSentence, Tag, Vocabulary};
use crate::encoder::{EncodedInput, Encoder, EncoderConfig, EncoderError, NodeStates};
use crate::heads::{self, Role, SpanPrediction};
use crate::hetgraph::{build_graph_with, GraphOptions, HeteroGraph};
use crate::tensor::{Matrix, ParamStore, Tape, Var};

/// Decoding order of the extraction head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ModelKind {
    #[serde(rename = "p")]
    Parallel,
    #[serde(rename = "t")]
    TenorFirst,
    #[serde(rename = "v")]
    VehicleFirst,
}

impl ModelKind {
    pub const ALL: [ModelKind; 3] = [ModelKind::Parallel, ModelKind::TenorFirst, ModelKind::VehicleFirst];

    pub fn short(self) -> &'static str {
        match self {
            ModelKind::Parallel => "p",
            ModelKind::TenorFirst => "t",
            ModelKind::VehicleFirst => "v",
        }
    }

    /// Component extracted first, for sequential models.
    pub fn first_role(self) -> Option<Role> {
        match self {
            ModelKind::Parallel => None,
            ModelKind::TenorFirst => Some(Role::Tenor),
            ModelKind::VehicleFirst => Some(Role::Vehicle),
        }
    }

    fn seed_offset(self) -> u64 {
        match self {
            ModelKind::Parallel => 0,
            ModelKind::TenorFirst => 1,
            ModelKind::VehicleFirst => 2,
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short())
    }
}

impl FromStr for ModelKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "p" => Ok(ModelKind::Parallel),
            "t" => Ok(ModelKind::TenorFirst),
            "v" => Ok(ModelKind::VehicleFirst),
            other => Err(format!("unknown model `{other}` (expected p, t or v)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub label_emb_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            label_emb_dim: 100,
        }
    }
}

/// A sentence with everything the models consume, prepared once.
#[derive(Debug, Clone)]
pub struct Instance {
    pub sentence: AnnotatedSentence,
    pub graph: HeteroGraph,
    pub input: EncodedInput,
}

impl Instance {
    pub fn new(sentence: AnnotatedSentence, vocab: &Vocabulary, opts: &GraphOptions) -> Self {
        let graph = build_graph_with(&sentence, vocab, opts);
        let input = EncodedInput::new(&sentence, vocab);
        Self {
            sentence,
            graph,
            input,
        }
    }

    pub fn prepare(corpus: &[AnnotatedSentence], vocab: &Vocabulary, opts: &GraphOptions) -> Vec<Self> {
        corpus
            .iter()
            .map(|s| Instance::new(s.clone(), vocab, opts))
            .collect()
    }
}

/// Handles into one forward pass.
#[derive(Debug, Clone)]
pub struct Outputs {
    pub states: NodeStates,
    /// 1×2, column 0 = simile.
    pub class_probs: Var,
    /// N×3 final tagger.
    pub tag_logits: Var,
    pub tag_probs: Var,
    /// N×2 first-stage tagger of sequential models.
    pub first_probs: Option<Var>,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub kind: ModelKind,
    pub cfg: ModelConfig,
    encoder: Encoder,
    pub store: ParamStore,
}

impl Model {
    pub fn new(kind: ModelKind, cfg: ModelConfig, vocab_size: usize, seed: u64) -> Result<Self, EncoderError> {
        let encoder = Encoder::new(cfg.encoder.clone())?;
        if cfg.label_emb_dim == 0 {
            return Err(EncoderError::Config("label_emb_dim must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(1_000_003).wrapping_add(kind.seed_offset()));
        let mut store = ParamStore::new();
        encoder.init_params(&mut store, vocab_size, &mut rng)?;
        let d = cfg.encoder.d_model;
        store.insert_glorot("cls.w", 3 * d, cfg.label_emb_dim, &mut rng)?;
        store.insert_glorot("cls.label_emb", 2, cfg.label_emb_dim, &mut rng)?;
        match kind {
            ModelKind::Parallel => {
                store.insert_glorot("tag.w", d, 3, &mut rng)?;
                store.insert("tag.b", Matrix::zeros(1, 3))?;
            }
            ModelKind::TenorFirst | ModelKind::VehicleFirst => {
                store.insert_glorot("first.w", d, 2, &mut rng)?;
                store.insert("first.b", Matrix::zeros(1, 2))?;
                store.insert_glorot("second.w", 2 * d, 3, &mut rng)?;
                store.insert("second.b", Matrix::zeros(1, 3))?;
            }
        }
        Ok(Self {
            kind,
            cfg,
            encoder,
            store,
        })
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    /// Forward pass. With `teacher` set, sequential models pool the first
    /// component from those gold tags; otherwise from their own first stage.
    pub fn forward(&self, tape: &mut Tape, inst: &Instance, teacher: Option<&[Tag]>) -> Result<Outputs, EncoderError> {
        let states = self.encoder.encode_graph(tape, &inst.input, &inst.graph)?;
        let g = states.last();
        let (li, ri) = inst.graph.subsentence_ids();
        let left = tape.pick_rows(g, &[li])?;
        let right = tape.pick_rows(g, &[ri])?;
        let w_c = tape.param_named("cls.w")?;
        let e_c = tape.param_named("cls.label_emb")?;
        let class_probs = heads::classify(tape, left, right, w_c, e_c)?;

        let n = inst.graph.word_count();
        let words: Vec<usize> = (1..=n).collect();
        let word_states = tape.pick_rows(g, &words)?;
        let (tag_logits, tag_probs, first_probs) = match self.kind.first_role() {
            None => {
                let (w, b) = (tape.param_named("tag.w")?, tape.param_named("tag.b")?);
                let (l, p) = heads::tag_parallel(tape, word_states, w, b)?;
                (l, p, None)
            }
            Some(role) => {
                let (wf, bf) = (tape.param_named("first.w")?, tape.param_named("first.b")?);
                let (_, pf) = heads::tag_first(tape, word_states, wf, bf)?;
                let first_tags = match teacher {
                    Some(gold) => gold.to_vec(),
                    None => heads::argmax_first(tape.value(pf), role),
                };
                let comp = heads::pool_component(tape, word_states, &first_tags, role)?;
                let (w2, b2) = (tape.param_named("second.w")?, tape.param_named("second.b")?);
                let (l, p) = heads::tag_second(tape, word_states, comp, w2, b2)?;
                (l, p, Some(pf))
            }
        };
        Ok(Outputs {
            states,
            class_probs,
            tag_logits,
            tag_probs,
            first_probs,
        })
    }

    /// Verdict plus spans; spans are suppressed for a literal verdict.
    pub fn predict(&self, inst: &Instance) -> Result<SpanPrediction, EncoderError> {
        let mut tape = Tape::new(&self.store);
        let out = self.forward(&mut tape, inst, None)?;
        let p_simile = tape.value(out.class_probs).get(0, 0);
        let label = heads::verdict(p_simile);
        let spans = match label {
            crate::corpus::Label::Simile => heads::decode_spans(tape.value(out.tag_probs)),
            crate::corpus::Label::Literal => Vec::new(),
        };
        Ok(SpanPrediction {
            label,
            p_simile,
            spans,
        })
    }

    /// Final-tagger distribution in inference mode.
    pub fn tag_distribution(&self, inst: &Instance) -> Result<Matrix, EncoderError> {
        let mut tape = Tape::new(&self.store);
        let out = self.forward(&mut tape, inst, None)?;
        Ok(tape.value(out.tag_probs).clone())
    }
}
