//! Annotated sentences, the JSON Lines corpus format, vocabularies and the
//! synthetic corpus generator.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

pub const MAX_TOKENS: usize = 100;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("line {line}: field `{field}`: {message}")]
    Field {
        line: usize,
        field: &'static str,
        message: String,
    },
    #[error("line {line}: {message}")]
    Invariant { line: usize, message: String },
    #[error("corpus is empty")]
    Empty,
    #[error("cannot split {len} sentences into {k} folds")]
    Folds { len: usize, k: usize },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Tag {
    T,
    V,
    O,
}

impl Tag {
    pub const ALL: [Tag; 3] = [Tag::T, Tag::V, Tag::O];

    pub fn index(self) -> usize {
        match self {
            Tag::T => 0,
            Tag::V => 1,
            Tag::O => 2,
        }
    }

    pub fn from_index(i: usize) -> Tag {
        Tag::ALL[i]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Simile,
    Literal,
}

impl Label {
    pub fn index(self) -> usize {
        match self {
            Label::Simile => 0,
            Label::Literal => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TokenAnn {
    pub surface: String,
    pub pos: String,
    pub head: usize,
    pub deprel: String,
}

/// POS tags that make a token a noun node.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NounTags(BTreeSet<String>);

impl Default for NounTags {
    fn default() -> Self {
        Self(
            ["NN", "NR", "NT", "n", "nh", "ns"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
        )
    }
}

impl NounTags {
    pub fn new<I: IntoIterator<Item = S>, S: Into<String>>(tags: I) -> Self {
        Self(tags.into_iter().map(Into::into).collect())
    }

    pub fn is_noun(&self, pos: &str) -> bool {
        self.0.contains(pos)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatedSentence {
    pub tokens: Vec<TokenAnn>,
    /// 1-based.
    pub comparator_index: usize,
    /// 1-based noun index → gloss tokens.
    pub glosses: BTreeMap<usize, Vec<String>>,
    pub label: Label,
    pub tags: Vec<Tag>,
}

impl AnnotatedSentence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// 1-based token indices strictly left of the comparator.
    pub fn left_range(&self) -> std::ops::Range<usize> {
        1..self.comparator_index
    }

    /// 1-based token indices strictly right of the comparator.
    pub fn right_range(&self) -> std::ops::Range<usize> {
        self.comparator_index + 1..self.len() + 1
    }

    pub fn token(&self, index: usize) -> &TokenAnn {
        &self.tokens[index - 1]
    }

    /// Checks every record invariant; the message names the violated rule.
    pub fn validate(&self, nouns: &NounTags) -> Result<(), String> {
        let n = self.tokens.len();
        if n == 0 || n > MAX_TOKENS {
            return Err(format!("token count {n} outside [1, {MAX_TOKENS}]"));
        }
        for (i, t) in self.tokens.iter().enumerate() {
            if t.head > n {
                return Err(format!("token {}: head {} out of range", i + 1, t.head));
            }
            if t.head == i + 1 {
                return Err(format!("token {}: self-dependency", i + 1));
            }
        }
        if self.comparator_index < 1 || self.comparator_index > n {
            return Err("comparator_index out of range".into());
        }
        if self.tags.len() != n {
            return Err(format!("{} tags for {n} tokens", self.tags.len()));
        }
        if self.label == Label::Literal && self.tags.iter().any(|t| *t != Tag::O) {
            return Err("literal sentence with non-O tags".into());
        }
        for &k in self.glosses.keys() {
            if k < 1 || k > n {
                return Err(format!("gloss key {k} out of range"));
            }
            if !nouns.is_noun(&self.token(k).pos) {
                return Err(format!("gloss key {k} is not a noun token"));
            }
        }
        Ok(())
    }
}

#[derive(Serialize)]
struct RecordOut<'a> {
    tokens: &'a [TokenAnn],
    comparator_index: usize,
    glosses: BTreeMap<String, &'a Vec<String>>,
    label: Label,
    tags: &'a [Tag],
}

pub fn to_json_line(s: &AnnotatedSentence) -> String {
    let rec = RecordOut {
        tokens: &s.tokens,
        comparator_index: s.comparator_index,
        glosses: s.glosses.iter().map(|(k, v)| (k.to_string(), v)).collect(),
        label: s.label,
        tags: &s.tags,
    };
    serde_json::to_string(&rec).expect("record serializes")
}

fn field<T: for<'de> Deserialize<'de>>(
    obj: &mut serde_json::Map<String, Value>,
    name: &'static str,
    line: usize,
) -> Result<T, CorpusError> {
    let v = obj.remove(name).ok_or(CorpusError::Field {
        line,
        field: name,
        message: "missing".into(),
    })?;
    serde_json::from_value(v).map_err(|e| CorpusError::Field {
        line,
        field: name,
        message: e.to_string(),
    })
}

/// Parse and validate one JSON Lines record.
pub fn parse_line(text: &str, line: usize, nouns: &NounTags) -> Result<AnnotatedSentence, CorpusError> {
    parse_record(text, line, nouns, true)
}

/// Like [`parse_line`], but `label` and `tags` may be omitted; missing gold
/// defaults to a literal sentence with all-`O` tags.
pub fn parse_unlabeled(text: &str, line: usize, nouns: &NounTags) -> Result<AnnotatedSentence, CorpusError> {
    parse_record(text, line, nouns, false)
}

fn parse_record(text: &str, line: usize, nouns: &NounTags, gold: bool) -> Result<AnnotatedSentence, CorpusError> {
    let value: Value = serde_json::from_str(text).map_err(|e| CorpusError::Field {
        line,
        field: "<record>",
        message: e.to_string(),
    })?;
    let Value::Object(mut obj) = value else {
        return Err(CorpusError::Field {
            line,
            field: "<record>",
            message: "expected a JSON object".into(),
        });
    };
    let tokens: Vec<TokenAnn> = field(&mut obj, "tokens", line)?;
    let comparator_index: usize = field(&mut obj, "comparator_index", line)?;
    let raw_glosses: BTreeMap<String, Vec<String>> = if obj.contains_key("glosses") {
        field(&mut obj, "glosses", line)?
    } else {
        BTreeMap::new()
    };
    let label: Label = if gold || obj.contains_key("label") {
        field(&mut obj, "label", line)?
    } else {
        Label::Literal
    };
    let tags: Vec<Tag> = if gold || obj.contains_key("tags") {
        field(&mut obj, "tags", line)?
    } else {
        vec![Tag::O; tokens.len()]
    };
    if let Some(extra) = obj.keys().next() {
        return Err(CorpusError::Field {
            line,
            field: "<record>",
            message: format!("unknown field `{extra}`"),
        });
    }
    let mut glosses = BTreeMap::new();
    for (k, v) in raw_glosses {
        let idx: usize = k.parse().map_err(|_| CorpusError::Field {
            line,
            field: "glosses",
            message: format!("key `{k}` is not a decimal token index"),
        })?;
        glosses.insert(idx, v);
    }
    let s = AnnotatedSentence {
        tokens,
        comparator_index,
        glosses,
        label,
        tags,
    };
    s.validate(nouns)
        .map_err(|message| CorpusError::Invariant { line, message })?;
    Ok(s)
}

pub fn load_corpus(path: &Path) -> Result<Vec<AnnotatedSentence>, CorpusError> {
    load_corpus_with(path, &NounTags::default())
}

pub fn load_corpus_with(path: &Path, nouns: &NounTags) -> Result<Vec<AnnotatedSentence>, CorpusError> {
    read_lines(path, nouns, true)
}

/// Sentences to predict on; gold fields are optional.
pub fn load_unlabeled(path: &Path, nouns: &NounTags) -> Result<Vec<AnnotatedSentence>, CorpusError> {
    read_lines(path, nouns, false)
}

fn read_lines(path: &Path, nouns: &NounTags, gold: bool) -> Result<Vec<AnnotatedSentence>, CorpusError> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse_record(&line, i + 1, nouns, gold)?);
    }
    Ok(out)
}

pub fn write_corpus<W: Write>(mut w: W, corpus: &[AnnotatedSentence]) -> std::io::Result<()> {
    for s in corpus {
        writeln!(w, "{}", to_json_line(s))?;
    }
    Ok(())
}

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const CLS: usize = 2;
pub const SEP: usize = 3;
const RESERVED: [&str; 4] = ["<pad>", "<unk>", "<cls>", "<sep>"];

/// Number of dependency relations that keep their own edge label.
pub const TOP_RELATIONS: usize = 8;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    tokens: Vec<String>,
    #[serde(skip)]
    token_ids: HashMap<String, usize>,
    pos: Vec<String>,
    /// Relations by training frequency, descending; ties lexicographic.
    pub deprel_ranking: Vec<String>,
}

impl Vocabulary {
    fn from_parts(tokens: Vec<String>, pos: Vec<String>, deprel_ranking: Vec<String>) -> Self {
        let token_ids = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Self {
            tokens,
            token_ids,
            pos,
            deprel_ranking,
        }
    }

    /// Only for tests and tooling that need a hand-picked relation ranking.
    pub fn with_ranking(mut self, ranking: Vec<String>) -> Self {
        self.deprel_ranking = ranking;
        self
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn token_id(&self, surface: &str) -> usize {
        self.token_ids.get(surface).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn pos_id(&self, pos: &str) -> Option<usize> {
        self.pos.iter().position(|p| p == pos)
    }

    /// Rank of `rel` if it is among the top relations.
    pub fn relation_rank(&self, rel: &str) -> Option<usize> {
        self.deprel_ranking
            .iter()
            .take(TOP_RELATIONS)
            .position(|r| r == rel)
    }

    pub fn top_relations(&self) -> &[String] {
        let k = self.deprel_ranking.len().min(TOP_RELATIONS);
        &self.deprel_ranking[..k]
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("vocabulary serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        let v: Vocabulary = serde_json::from_str(text)?;
        Ok(Self::from_parts(v.tokens, v.pos, v.deprel_ranking))
    }
}

fn ranked(counts: HashMap<&str, usize>) -> Vec<String> {
    let mut items: Vec<(&str, usize)> = counts.into_iter().collect();
    items.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    items.into_iter().map(|(s, _)| s.to_string()).collect()
}

/// Token vocabulary (sentence and gloss tokens), POS inventory and relation ranking.
pub fn build_vocab(corpus: &[AnnotatedSentence], min_freq: usize) -> Result<Vocabulary, CorpusError> {
    if corpus.is_empty() {
        return Err(CorpusError::Empty);
    }
    let mut tok_counts: HashMap<&str, usize> = HashMap::new();
    let mut pos: BTreeSet<&str> = BTreeSet::new();
    let mut rel_counts: HashMap<&str, usize> = HashMap::new();
    for s in corpus {
        for t in &s.tokens {
            *tok_counts.entry(&t.surface).or_default() += 1;
            *rel_counts.entry(&t.deprel).or_default() += 1;
            pos.insert(&t.pos);
        }
        for g in s.glosses.values().flatten() {
            *tok_counts.entry(g).or_default() += 1;
        }
    }
    let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
    let mut kept: Vec<&str> = tok_counts
        .iter()
        .filter(|(t, c)| **c >= min_freq && !RESERVED.contains(t))
        .map(|(t, _)| *t)
        .collect();
    kept.sort_unstable();
    tokens.extend(kept.into_iter().map(String::from));
    Ok(Vocabulary::from_parts(
        tokens,
        pos.into_iter().map(String::from).collect(),
        ranked(rel_counts),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub n_sentences: usize,
    pub seed: u64,
    /// Per filler-token probability of swapping in a random noise word.
    pub noise_rate: f64,
}

struct Category {
    name: &'static str,
    nouns: &'static [(&'static str, &'static str)],
}

const CATEGORIES: &[Category] = &[
    Category {
        name: "animal",
        nouns: &[
            ("sheep", "woolly"),
            ("horse", "galloping"),
            ("cat", "whiskered"),
            ("rabbit", "burrowing"),
            ("tiger", "striped"),
            ("swan", "feathered"),
        ],
    },
    Category {
        name: "weather",
        nouns: &[
            ("clouds", "floating"),
            ("snow", "frozen"),
            ("rain", "falling"),
            ("fog", "misty"),
            ("storm", "thundering"),
            ("wind", "blowing"),
        ],
    },
    Category {
        name: "plant",
        nouns: &[
            ("flower", "blooming"),
            ("tree", "leafy"),
            ("rose", "thorny"),
            ("bamboo", "hollow"),
            ("lotus", "aquatic"),
            ("willow", "drooping"),
        ],
    },
    Category {
        name: "object",
        nouns: &[
            ("mirror", "reflective"),
            ("lamp", "glowing"),
            ("bell", "ringing"),
            ("coin", "metal"),
            ("knife", "sharp"),
            ("pearl", "lustrous"),
        ],
    },
    Category {
        name: "landform",
        nouns: &[
            ("mountain", "towering"),
            ("hill", "grassy"),
            ("river", "flowing"),
            ("sea", "salty"),
            ("island", "isolated"),
            ("valley", "low"),
        ],
    },
    Category {
        name: "person",
        nouns: &[
            ("child", "young"),
            ("soldier", "armed"),
            ("king", "royal"),
            ("mother", "caring"),
            ("dancer", "graceful"),
            ("monk", "devout"),
        ],
    },
];

const DETS: &[&str] = &["the", "a", "this"];
const ADJS: &[&str] = &["white", "small", "bright", "quiet", "huge", "soft", "pale"];
const ADVS: &[&str] = &["slowly", "quietly", "gently", "softly"];
const PREPS: &[&str] = &["on", "in", "near", "under", "over"];
const NOISE: &[&str] = &["um", "so", "very", "really", "quite"];
const COPULAS: &[&str] = &["is", "are", "looks", "seems"];
const COMPARATOR: &str = "like";

/// Slot kinds of a sentence template.
#[derive(Clone, Copy, PartialEq)]
enum Slot {
    Det,
    Adj,
    Adv,
    Prep,
    Copula,
    Comparator,
    Tenor,
    Vehicle,
    Distractor,
}

/// (slot, 1-based head, relation); head 0 is the root.
type Template = &'static [(Slot, usize, &'static str)];

const TEMPLATES: &[Template] = &[
    // the sheep are like white clouds
    &[
        (Slot::Det, 2, "det"),
        (Slot::Tenor, 3, "nsubj"),
        (Slot::Copula, 0, "root"),
        (Slot::Comparator, 3, "prep"),
        (Slot::Adj, 6, "amod"),
        (Slot::Vehicle, 4, "pobj"),
    ],
    // the sheep on the hill are like the clouds
    &[
        (Slot::Det, 2, "det"),
        (Slot::Tenor, 6, "nsubj"),
        (Slot::Prep, 2, "prep"),
        (Slot::Det, 5, "det"),
        (Slot::Distractor, 3, "pobj"),
        (Slot::Copula, 0, "root"),
        (Slot::Comparator, 6, "prep"),
        (Slot::Det, 9, "det"),
        (Slot::Vehicle, 7, "pobj"),
    ],
    // sheep quietly are like the white clouds over the sea
    &[
        (Slot::Tenor, 3, "nsubj"),
        (Slot::Adv, 3, "advmod"),
        (Slot::Copula, 0, "root"),
        (Slot::Comparator, 3, "prep"),
        (Slot::Det, 7, "det"),
        (Slot::Adj, 7, "amod"),
        (Slot::Vehicle, 4, "pobj"),
        (Slot::Prep, 3, "prep"),
        (Slot::Det, 10, "det"),
        (Slot::Distractor, 8, "pobj"),
    ],
    // white sheep are like clouds
    &[
        (Slot::Adj, 2, "amod"),
        (Slot::Tenor, 3, "nsubj"),
        (Slot::Copula, 0, "root"),
        (Slot::Comparator, 3, "prep"),
        (Slot::Vehicle, 4, "pobj"),
    ],
];

fn pick<'a, R: Rng>(rng: &mut R, items: &'a [&'a str]) -> &'a str {
    items[rng.gen_range(0..items.len())]
}

fn gloss_of(cat: &Category, noun: (&str, &str)) -> Vec<String> {
    vec![noun.1.to_string(), cat.name.to_string()]
}

fn synth_sentence<R: Rng>(rng: &mut R, label: Label, noise_rate: f64) -> AnnotatedSentence {
    let template = TEMPLATES[rng.gen_range(0..TEMPLATES.len())];
    let ncat = CATEGORIES.len();
    let tenor_cat = rng.gen_range(0..ncat);
    let vehicle_cat = match label {
        Label::Literal => tenor_cat,
        Label::Simile => {
            let shift = rng.gen_range(1..ncat);
            (tenor_cat + shift) % ncat
        }
    };
    let tenor_i = rng.gen_range(0..CATEGORIES[tenor_cat].nouns.len());
    let vehicle_i = loop {
        let i = rng.gen_range(0..CATEGORIES[vehicle_cat].nouns.len());
        if vehicle_cat != tenor_cat || i != tenor_i {
            break i;
        }
    };
    // A distractor shares the category of the component on its side of the
    // comparator, so the label still depends only on the tenor/vehicle pair.
    let comparator_slot = template
        .iter()
        .position(|&(slot, _, _)| slot == Slot::Comparator)
        .expect("every template has a comparator");
    let distractor_slot = template.iter().position(|&(slot, _, _)| slot == Slot::Distractor);
    let distractor_cat = match distractor_slot {
        Some(i) if i > comparator_slot => vehicle_cat,
        _ => tenor_cat,
    };
    let distractor = loop {
        let i = rng.gen_range(0..CATEGORIES[distractor_cat].nouns.len());
        let c = (distractor_cat, i);
        if c != (tenor_cat, tenor_i) && c != (vehicle_cat, vehicle_i) {
            break c;
        }
    };

    let mut tokens = Vec::with_capacity(template.len());
    let mut tags = Vec::with_capacity(template.len());
    let mut glosses = BTreeMap::new();
    let mut comparator_index = 0;
    for (i, &(slot, head, rel)) in template.iter().enumerate() {
        let noun = |cat: usize, idx: usize, glosses: &mut BTreeMap<usize, Vec<String>>| {
            let c = &CATEGORIES[cat];
            glosses.insert(i + 1, gloss_of(c, c.nouns[idx]));
            (c.nouns[idx].0, "NN")
        };
        let filler = |rng: &mut R, items: &'static [&'static str]| {
            if rng.gen_bool(noise_rate) {
                pick(rng, NOISE)
            } else {
                pick(rng, items)
            }
        };
        let (surface, pos) = match slot {
            Slot::Det => (filler(rng, DETS), "DT"),
            Slot::Adj => (filler(rng, ADJS), "JJ"),
            Slot::Adv => (filler(rng, ADVS), "AD"),
            Slot::Prep => (pick(rng, PREPS), "P"),
            Slot::Copula => (pick(rng, COPULAS), "VV"),
            Slot::Comparator => {
                comparator_index = i + 1;
                (COMPARATOR, "P")
            }
            Slot::Tenor => noun(tenor_cat, tenor_i, &mut glosses),
            Slot::Vehicle => noun(vehicle_cat, vehicle_i, &mut glosses),
            Slot::Distractor => noun(distractor.0, distractor.1, &mut glosses),
        };
        tokens.push(TokenAnn {
            surface: surface.to_string(),
            pos: pos.to_string(),
            head,
            deprel: rel.to_string(),
        });
        tags.push(match (label, slot) {
            (Label::Simile, Slot::Tenor) => Tag::T,
            (Label::Simile, Slot::Vehicle) => Tag::V,
            _ => Tag::O,
        });
    }
    AnnotatedSentence {
        tokens,
        comparator_index,
        glosses,
        label,
        tags,
    }
}

/// Deterministic, label-balanced synthetic corpus.
pub fn generate_synthetic(config: &SyntheticConfig) -> Result<Vec<AnnotatedSentence>, CorpusError> {
    if config.n_sentences < 2 {
        return Err(CorpusError::Invariant {
            line: 0,
            message: format!("n_sentences must be at least 2, got {}", config.n_sentences),
        });
    }
    if !(0.0..=1.0).contains(&config.noise_rate) {
        return Err(CorpusError::Invariant {
            line: 0,
            message: format!("noise_rate {} outside [0, 1]", config.noise_rate),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let n_simile = config.n_sentences.div_ceil(2);
    let mut labels: Vec<Label> = (0..config.n_sentences)
        .map(|i| if i < n_simile { Label::Simile } else { Label::Literal })
        .collect();
    labels.shuffle(&mut rng);
    Ok(labels
        .into_iter()
        .map(|l| synth_sentence(&mut rng, l, config.noise_rate))
        .collect())
}

/// One cross-validation fold.
#[derive(Debug, Clone, PartialEq)]
pub struct Fold<T> {
    pub train: Vec<T>,
    pub test: Vec<T>,
}

/// `k` disjoint test partitions covering `items`, sizes within one of each other.
pub fn split_folds<T: Clone>(items: &[T], k: usize, seed: u64) -> Result<Vec<Fold<T>>, CorpusError> {
    if k < 2 || k > items.len() {
        return Err(CorpusError::Folds {
            len: items.len(),
            k,
        });
    }
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok((0..k)
        .map(|f| {
            let mut fold = Fold {
                train: Vec::new(),
                test: Vec::new(),
            };
            for (pos, &i) in order.iter().enumerate() {
                if pos % k == f {
                    fold.test.push(items[i].clone());
                } else {
                    fold.train.push(items[i].clone());
                }
            }
            fold
        })
        .collect())
}
