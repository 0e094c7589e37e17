//! Heterogeneous sentence graph: word nodes typed noun / non-noun, two
//! subsentence nodes split at the comparator, dependency edges and
//! noun→subsentence edges.
//!
//! Node ids: `0` is the left subsentence, `1..=N` are the words, `N+1` is
//! the right subsentence. With `no_subsentence_nodes` the two subsentence
//! nodes collapse into a single global node at id `0`.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{AnnotatedSentence, NounTags, Vocabulary, TOP_RELATIONS};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum GraphError {
    #[error("node {id} out of range for a graph of {len} nodes")]
    NodeOutOfRange { id: usize, len: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NodeKind {
    Noun,
    NonNoun,
    Subsentence,
}

impl NodeKind {
    pub fn name(self) -> &'static str {
        match self {
            NodeKind::Noun => "noun",
            NodeKind::NonNoun => "non-noun",
            NodeKind::Subsentence => "subsentence",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum EdgeLabel {
    /// Rank of a top relation in the training-frequency ranking.
    Dep(u8),
    DepOther,
    NsCon,
    NsNotCon,
    SelfLoop,
}

impl EdgeLabel {
    /// Size of the edge-label embedding table.
    pub const COUNT: usize = TOP_RELATIONS + 4;

    pub fn index(self) -> usize {
        match self {
            EdgeLabel::Dep(r) => r as usize,
            EdgeLabel::DepOther => TOP_RELATIONS,
            EdgeLabel::NsCon => TOP_RELATIONS + 1,
            EdgeLabel::NsNotCon => TOP_RELATIONS + 2,
            EdgeLabel::SelfLoop => TOP_RELATIONS + 3,
        }
    }

    pub fn is_dep(self) -> bool {
        matches!(self, EdgeLabel::Dep(_) | EdgeLabel::DepOther)
    }

    pub fn is_ns(self) -> bool {
        matches!(self, EdgeLabel::NsCon | EdgeLabel::NsNotCon)
    }
}

/// What a node stands for in the sentence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Anchor {
    Word(usize),
    Left,
    Right,
    Global,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Node {
    pub id: usize,
    pub kind: NodeKind,
    pub anchor: Anchor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Edge {
    pub src: usize,
    pub dst: usize,
    pub label: EdgeLabel,
}

/// Structural ablations.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GraphOptions {
    /// Fully connect word nodes instead of following dependency arcs.
    pub no_dependency: bool,
    /// Connect every word (not only nouns) to the subsentence nodes.
    pub no_pos: bool,
    /// Merge both subsentence nodes into one global node.
    pub no_subsentence_nodes: bool,
    pub noun_tags: NounTags,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeteroGraph {
    pub nodes: Vec<Node>,
    pub edges: Vec<Edge>,
    n_words: usize,
    merged: bool,
    left_tokens: Vec<usize>,
    right_tokens: Vec<usize>,
    relations: Vec<String>,
}

impl HeteroGraph {
    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn word_count(&self) -> usize {
        self.n_words
    }

    pub fn is_merged(&self) -> bool {
        self.merged
    }

    /// Ids of the nodes read by the classifier: `(left, right)`, or the
    /// global node twice when merged.
    pub fn subsentence_ids(&self) -> (usize, usize) {
        if self.merged {
            (0, 0)
        } else {
            (0, self.n_words + 1)
        }
    }

    pub fn left_tokens(&self) -> &[usize] {
        &self.left_tokens
    }

    pub fn right_tokens(&self) -> &[usize] {
        &self.right_tokens
    }

    pub fn count_kind(&self, kind: NodeKind) -> usize {
        self.nodes.iter().filter(|n| n.kind == kind).count()
    }

    pub fn edges_with(&self, pred: impl Fn(EdgeLabel) -> bool) -> impl Iterator<Item = &Edge> {
        self.edges.iter().filter(move |e| pred(e.label))
    }

    /// Sources of edges into `id`, with the edge label.
    pub fn neighbors(&self, id: usize) -> Result<Vec<(usize, EdgeLabel)>, GraphError> {
        if id >= self.nodes.len() {
            return Err(GraphError::NodeOutOfRange {
                id,
                len: self.nodes.len(),
            });
        }
        Ok(self
            .edges
            .iter()
            .filter(|e| e.dst == id)
            .map(|e| (e.src, e.label))
            .collect())
    }

    pub fn label_name(&self, label: EdgeLabel) -> String {
        match label {
            EdgeLabel::Dep(r) => self.relations[r as usize].clone(),
            EdgeLabel::DepOther => "other".into(),
            EdgeLabel::NsCon => "con".into(),
            EdgeLabel::NsNotCon => "not-con".into(),
            EdgeLabel::SelfLoop => "self".into(),
        }
    }
}

pub fn build_graph(sentence: &AnnotatedSentence, vocab: &Vocabulary) -> HeteroGraph {
    build_graph_with(sentence, vocab, &GraphOptions::default())
}

pub fn build_graph_with(
    sentence: &AnnotatedSentence,
    vocab: &Vocabulary,
    opts: &GraphOptions,
) -> HeteroGraph {
    let n = sentence.len();
    let merged = opts.no_subsentence_nodes;
    let is_noun = |i: usize| opts.noun_tags.is_noun(&sentence.token(i).pos);

    let mut nodes = Vec::with_capacity(n + 2);
    nodes.push(Node {
        id: 0,
        kind: NodeKind::Subsentence,
        anchor: if merged { Anchor::Global } else { Anchor::Left },
    });
    for i in 1..=n {
        nodes.push(Node {
            id: i,
            kind: if is_noun(i) {
                NodeKind::Noun
            } else {
                NodeKind::NonNoun
            },
            anchor: Anchor::Word(i),
        });
    }
    if !merged {
        nodes.push(Node {
            id: n + 1,
            kind: NodeKind::Subsentence,
            anchor: Anchor::Right,
        });
    }

    let mut edges = Vec::new();
    if opts.no_dependency {
        for i in 1..=n {
            for j in 1..=n {
                if i != j {
                    edges.push(Edge {
                        src: i,
                        dst: j,
                        label: EdgeLabel::DepOther,
                    });
                }
            }
        }
    } else {
        for i in 1..=n {
            let t = sentence.token(i);
            if t.head == 0 {
                continue;
            }
            let label = match vocab.relation_rank(&t.deprel) {
                Some(r) => EdgeLabel::Dep(r as u8),
                None => EdgeLabel::DepOther,
            };
            edges.push(Edge {
                src: i,
                dst: t.head,
                label,
            });
            edges.push(Edge {
                src: t.head,
                dst: i,
                label,
            });
        }
    }

    let left: Vec<usize> = sentence.left_range().collect();
    let right: Vec<usize> = sentence.right_range().collect();
    for i in 1..=n {
        if !(opts.no_pos || is_noun(i)) {
            continue;
        }
        if merged {
            edges.push(Edge {
                src: i,
                dst: 0,
                label: EdgeLabel::NsCon,
            });
            continue;
        }
        let in_left = sentence.left_range().contains(&i);
        let in_right = sentence.right_range().contains(&i);
        let side = |contains: bool| {
            if contains {
                EdgeLabel::NsCon
            } else {
                EdgeLabel::NsNotCon
            }
        };
        edges.push(Edge {
            src: i,
            dst: 0,
            label: side(in_left),
        });
        edges.push(Edge {
            src: i,
            dst: n + 1,
            label: side(in_right),
        });
    }

    for node in &nodes {
        edges.push(Edge {
            src: node.id,
            dst: node.id,
            label: EdgeLabel::SelfLoop,
        });
    }

    HeteroGraph {
        nodes,
        edges,
        n_words: n,
        merged,
        left_tokens: left,
        right_tokens: right,
        relations: vocab.top_relations().to_vec(),
    }
}

fn escape(s: &str) -> String {
    s.replace('\\', "\\\\").replace('"', "\\\"")
}

/// Deterministic Graphviz rendering.
pub fn to_dot(graph: &HeteroGraph, sentence: &AnnotatedSentence) -> String {
    let mut out = String::from("digraph hetgraph {\n  rankdir=LR;\n");
    for node in &graph.nodes {
        let (label, shape, color) = match node.anchor {
            Anchor::Word(i) => (
                sentence.token(i).surface.clone(),
                "ellipse",
                if node.kind == NodeKind::Noun {
                    "blue"
                } else {
                    "darkgreen"
                },
            ),
            Anchor::Left => ("<left>".to_string(), "box", "orange"),
            Anchor::Right => ("<right>".to_string(), "box", "orange"),
            Anchor::Global => ("<global>".to_string(), "box", "orange"),
        };
        let _ = writeln!(
            out,
            "  n{} [label=\"{}\", kind=\"{}\", shape={}, color={}];",
            node.id,
            escape(&label),
            node.kind.name(),
            shape,
            color
        );
    }
    for e in &graph.edges {
        let style = if e.label.is_ns() { ", style=dashed" } else { "" };
        let _ = writeln!(
            out,
            "  n{} -> n{} [label=\"{}\"{}];",
            e.src,
            e.dst,
            escape(&graph.label_name(e.label)),
            style
        );
    }
    out.push_str("}\n");
    out
}
