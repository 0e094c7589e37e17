//! Contextual token states, gloss fusion and the graph attention stack.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{AnnotatedSentence, Vocabulary, CLS, MAX_TOKENS, SEP};
use crate::hetgraph::{EdgeLabel, HeteroGraph};
use crate::tensor::{Matrix, ParamStore, TensorError, Tape, Var};

#[derive(Debug, Error, PartialEq)]
pub enum EncoderError {
    #[error("sentence of {len} tokens exceeds the limit of {max}")]
    TooLong { len: usize, max: usize },
    #[error("invalid encoder config: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, EncoderError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    /// Width of graph node states.
    pub d_model: usize,
    /// Width of the token encoder; projected to `d_model` when different.
    pub token_dim: usize,
    pub n_selfattn_layers: usize,
    pub n_gat_layers: usize,
    pub gat_heads: usize,
    pub edge_emb_dim: usize,
    pub leaky_slope: f64,
    pub max_tokens: usize,
    pub max_positions: usize,
    pub use_definitions: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            d_model: 300,
            token_dim: 300,
            n_selfattn_layers: 2,
            n_gat_layers: 2,
            gat_heads: 1,
            edge_emb_dim: 50,
            leaky_slope: 0.01,
            max_tokens: MAX_TOKENS,
            max_positions: 128,
            use_definitions: true,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [self.d_model, self.token_dim, self.edge_emb_dim, self.gat_heads];
        if dims.contains(&0) {
            return Err(EncoderError::Config("dimensions must be positive".into()));
        }
        if self.d_model % self.gat_heads != 0 {
            return Err(EncoderError::Config(format!(
                "d_model {} not divisible by {} heads",
                self.d_model, self.gat_heads
            )));
        }
        if self.max_tokens + 2 > self.max_positions {
            return Err(EncoderError::Config(
                "max_positions must cover max_tokens plus two markers".into(),
            ));
        }
        Ok(())
    }
}

/// Token ids of one sentence framed by the CLS/SEP markers, plus gloss ids per noun.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedInput {
    pub ids: Vec<usize>,
    pub glosses: Vec<(usize, Vec<usize>)>,
}

impl EncodedInput {
    pub fn new(sentence: &AnnotatedSentence, vocab: &Vocabulary) -> Self {
        let mut ids = Vec::with_capacity(sentence.len() + 2);
        ids.push(CLS);
        ids.extend(sentence.tokens.iter().map(|t| vocab.token_id(&t.surface)));
        ids.push(SEP);
        let glosses = sentence
            .glosses
            .iter()
            .filter(|(_, g)| !g.is_empty())
            .map(|(&i, g)| (i, g.iter().map(|w| vocab.token_id(w)).collect()))
            .collect();
        Self { ids, glosses }
    }

    pub fn n_words(&self) -> usize {
        self.ids.len() - 2
    }
}

/// Edge arrays of a graph in the layout the attention kernel consumes.
#[derive(Debug, Clone)]
struct EdgeArrays {
    src: Vec<usize>,
    dst: Vec<usize>,
    label: Vec<usize>,
}

impl EdgeArrays {
    fn of(graph: &HeteroGraph) -> Self {
        Self {
            src: graph.edges.iter().map(|e| e.src).collect(),
            dst: graph.edges.iter().map(|e| e.dst).collect(),
            label: graph.edges.iter().map(|e| e.label.index()).collect(),
        }
    }
}

/// Node states after each GAT layer; `layers[0]` is the initial state.
#[derive(Debug, Clone)]
pub struct NodeStates {
    pub layers: Vec<Var>,
    /// Attention weights per layer and head, one entry per graph edge.
    pub attention: Vec<Vec<Var>>,
    /// Token states before node initialization, rows `0..=N+1`.
    pub tokens: Var,
}

impl NodeStates {
    pub fn last(&self) -> Var {
        *self.layers.last().expect("at least the initial layer")
    }
}

#[derive(Debug, Clone)]
pub struct Encoder {
    pub cfg: EncoderConfig,
}

fn p(name: &str) -> String {
    format!("enc.{name}")
}

impl Encoder {
    pub fn new(cfg: EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg })
    }

    pub fn init_params<R: Rng>(
        &self,
        store: &mut ParamStore,
        vocab_size: usize,
        rng: &mut R,
    ) -> Result<()> {
        let c = &self.cfg;
        let t = c.token_dim;
        store.insert("enc.tok_emb", Matrix::uniform(vocab_size, t, 0.1, rng))?;
        store.insert("enc.pos_emb", Matrix::uniform(c.max_positions, t, 0.1, rng))?;
        for l in 0..c.n_selfattn_layers {
            for w in ["wq", "wk", "wv"] {
                store.insert_glorot(&p(&format!("sa{l}.{w}")), t, t, rng)?;
            }
        }
        if t != c.d_model {
            store.insert_glorot("enc.proj", t, c.d_model, rng)?;
        }
        store.insert_glorot("enc.gloss", t, c.d_model, rng)?;
        store.insert(
            "enc.edge_emb",
            Matrix::uniform(EdgeLabel::COUNT, c.edge_emb_dim, 0.1, rng),
        )?;
        let dh = c.d_model / c.gat_heads;
        for l in 0..c.n_gat_layers {
            for h in 0..c.gat_heads {
                let pre = format!("gat{l}.h{h}");
                for w in ["wq", "wk", "wv"] {
                    store.insert_glorot(&p(&format!("{pre}.{w}")), c.d_model, dh, rng)?;
                }
                store.insert_glorot(&p(&format!("{pre}.a_q")), dh, 1, rng)?;
                store.insert_glorot(&p(&format!("{pre}.a_k")), dh, 1, rng)?;
                store.insert_glorot(&p(&format!("{pre}.a_e")), c.edge_emb_dim, 1, rng)?;
            }
        }
        Ok(())
    }

    /// Rows `0..=N+1`: CLS marker, the N tokens, SEP marker.
    pub fn encode_tokens(&self, tape: &mut Tape, input: &EncodedInput) -> Result<Var> {
        let n = input.n_words();
        if n > self.cfg.max_tokens {
            return Err(EncoderError::TooLong {
                len: n,
                max: self.cfg.max_tokens,
            });
        }
        let tok = tape.param_named("enc.tok_emb")?;
        let pos = tape.param_named("enc.pos_emb")?;
        let positions: Vec<usize> = (0..input.ids.len()).collect();
        let te = tape.pick_rows(tok, &input.ids)?;
        let pe = tape.pick_rows(pos, &positions)?;
        let mut x = tape.add(te, pe)?;
        let scale = 1.0 / (self.cfg.token_dim as f64).sqrt();
        for l in 0..self.cfg.n_selfattn_layers {
            let wq = tape.param_named(&p(&format!("sa{l}.wq")))?;
            let wk = tape.param_named(&p(&format!("sa{l}.wk")))?;
            let wv = tape.param_named(&p(&format!("sa{l}.wv")))?;
            let q = tape.matmul(x, wq)?;
            let k = tape.matmul(x, wk)?;
            let v = tape.matmul(x, wv)?;
            let kt = tape.transpose(k)?;
            let scores = tape.matmul(q, kt)?;
            let scores = tape.scale(scores, scale)?;
            let attn = tape.softmax(scores, 1)?;
            let mixed = tape.matmul(attn, v)?;
            x = tape.add(x, mixed)?;
        }
        if self.cfg.token_dim != self.cfg.d_model {
            let proj = tape.param_named("enc.proj")?;
            x = tape.matmul(x, proj)?;
        }
        Ok(x)
    }

    /// Adds a projected mean gloss embedding to each glossed noun's row.
    pub fn fuse_definitions(&self, tape: &mut Tape, states: Var, input: &EncodedInput) -> Result<Var> {
        if input.glosses.is_empty() || !self.cfg.use_definitions {
            return Ok(states);
        }
        let tok = tape.param_named("enc.tok_emb")?;
        let mut pooled = Vec::with_capacity(input.glosses.len());
        let mut rows = Vec::with_capacity(input.glosses.len());
        for (i, ids) in &input.glosses {
            let emb = tape.pick_rows(tok, ids)?;
            let all: Vec<usize> = (0..ids.len()).collect();
            pooled.push(tape.mean_pool(emb, &all)?);
            rows.push(*i);
        }
        let pooled = tape.concat(&pooled, 0)?;
        let w = tape.param_named("enc.gloss")?;
        let deltas = tape.matmul(pooled, w)?;
        let n_rows = tape.shape(states).0;
        let placed = tape.scatter_rows(deltas, &rows, n_rows)?;
        Ok(tape.add(states, placed)?)
    }

    /// Word nodes copy their token row; subsentence nodes mean-pool their side
    /// (zero when the side is empty); a merged global node takes the CLS row.
    pub fn init_node_states(&self, tape: &mut Tape, states: Var, graph: &HeteroGraph) -> Result<Var> {
        let n = graph.word_count();
        let words: Vec<usize> = (1..=n).collect();
        let word_rows = tape.pick_rows(states, &words)?;
        if graph.is_merged() {
            let global = tape.pick_rows(states, &[0])?;
            return Ok(tape.concat(&[global, word_rows], 0)?);
        }
        let left = tape.mean_pool(states, graph.left_tokens())?;
        let right = tape.mean_pool(states, graph.right_tokens())?;
        Ok(tape.concat(&[left, word_rows, right], 0)?)
    }

    /// One attention layer over incoming edges. Returns the new states and
    /// the per-head attention weights.
    pub fn gat_layer(
        &self,
        tape: &mut Tape,
        states: Var,
        graph: &HeteroGraph,
        layer: usize,
    ) -> Result<(Var, Vec<Var>)> {
        let edges = EdgeArrays::of(graph);
        self.gat_layer_arrays(tape, states, &edges, graph.node_count(), layer)
    }

    fn gat_layer_arrays(
        &self,
        tape: &mut Tape,
        states: Var,
        edges: &EdgeArrays,
        n_nodes: usize,
        layer: usize,
    ) -> Result<(Var, Vec<Var>)> {
        let edge_emb = tape.param_named("enc.edge_emb")?;
        let mut heads = Vec::with_capacity(self.cfg.gat_heads);
        let mut attention = Vec::with_capacity(self.cfg.gat_heads);
        for h in 0..self.cfg.gat_heads {
            let pre = format!("gat{layer}.h{h}");
            let param = |tape: &mut Tape, w: &str| tape.param_named(&p(&format!("{pre}.{w}")));
            let (wq, wk, wv) = (param(tape, "wq")?, param(tape, "wk")?, param(tape, "wv")?);
            let (aq, ak, ae) = (param(tape, "a_q")?, param(tape, "a_k")?, param(tape, "a_e")?);
            // W_a·[W_q g_i; W_k g_j; e_ij] split into its three blocks
            let q = tape.matmul(states, wq)?;
            let sq = tape.matmul(q, aq)?;
            let k = tape.matmul(states, wk)?;
            let sk = tape.matmul(k, ak)?;
            let se = tape.matmul(edge_emb, ae)?;
            let zq = tape.pick_rows(sq, &edges.dst)?;
            let zk = tape.pick_rows(sk, &edges.src)?;
            let ze = tape.pick_rows(se, &edges.label)?;
            let z = tape.add(zq, zk)?;
            let z = tape.add(z, ze)?;
            let z = tape.leaky_relu(z, self.cfg.leaky_slope)?;
            let alpha = tape.segment_softmax(z, &edges.dst)?;
            let v = tape.matmul(states, wv)?;
            heads.push(tape.weighted_gather(alpha, v, &edges.src, &edges.dst, n_nodes)?);
            attention.push(alpha);
        }
        let joined = if heads.len() == 1 {
            heads[0]
        } else {
            tape.concat(&heads, 1)?
        };
        Ok((tape.sigmoid(joined)?, attention))
    }

    pub fn encode_graph(&self, tape: &mut Tape, input: &EncodedInput, graph: &HeteroGraph) -> Result<NodeStates> {
        let h = self.encode_tokens(tape, input)?;
        let h = self.fuse_definitions(tape, h, input)?;
        let g0 = self.init_node_states(tape, h, graph)?;
        let edges = EdgeArrays::of(graph);
        let mut layers = vec![g0];
        let mut attention = Vec::with_capacity(self.cfg.n_gat_layers);
        for l in 0..self.cfg.n_gat_layers {
            let prev = *layers.last().expect("nonempty");
            let (next, att) = self.gat_layer_arrays(tape, prev, &edges, graph.node_count(), l)?;
            layers.push(next);
            attention.push(att);
        }
        Ok(NodeStates {
            layers,
            attention,
            tokens: h,
        })
    }
}
