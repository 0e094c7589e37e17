//! Sentence classifier, component taggers and span decoding.

use serde::{Deserialize, Serialize};

use crate::corpus::{Label, Tag};
use crate::tensor::{Matrix, Result, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Tenor,
    Vehicle,
}

impl Role {
    pub fn tag(self) -> Tag {
        match self {
            Role::Tenor => Tag::T,
            Role::Vehicle => Tag::V,
        }
    }
}

/// Inclusive 1-based token span.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
    pub role: Role,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpanPrediction {
    pub label: Label,
    pub p_simile: f64,
    pub spans: Vec<Span>,
}

pub const SIMILE_THRESHOLD: f64 = 0.5;

pub fn verdict(p_simile: f64) -> Label {
    if p_simile > SIMILE_THRESHOLD {
        Label::Simile
    } else {
        Label::Literal
    }
}

/// `softmax(W_c [g_l; g_r; |g_l − g_r|] E_cᵀ)`; column 0 is the simile probability.
pub fn classify(tape: &mut Tape, left: Var, right: Var, w_c: Var, label_emb: Var) -> Result<Var> {
    let diff = tape.sub(left, right)?;
    let diff = tape.abs(diff)?;
    let feat = tape.concat(&[left, right, diff], 1)?;
    let proj = tape.matmul(feat, w_c)?;
    let et = tape.transpose(label_emb)?;
    let logits = tape.matmul(proj, et)?;
    tape.softmax(logits, 1)
}

/// Per-row affine map followed by softmax; returns `(logits, probs)`.
pub fn affine_softmax(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<(Var, Var)> {
    let z = tape.matmul(x, w)?;
    let logits = tape.add_row(z, b)?;
    let probs = tape.softmax(logits, 1)?;
    Ok((logits, probs))
}

/// Three-way {T, V, O} tagger over word states.
pub fn tag_parallel(tape: &mut Tape, words: Var, w_e: Var, b_e: Var) -> Result<(Var, Var)> {
    affine_softmax(tape, words, w_e, b_e)
}

/// Two-way {C1, O} tagger for the first component of a sequential model.
pub fn tag_first(tape: &mut Tape, words: Var, w_f: Var, b_f: Var) -> Result<(Var, Var)> {
    affine_softmax(tape, words, w_f, b_f)
}

/// Three-way tagger over `[g_i; g_c1]`.
pub fn tag_second(tape: &mut Tape, words: Var, component: Var, w: Var, b: Var) -> Result<(Var, Var)> {
    let n = tape.shape(words).0;
    let ones = tape.input(Matrix::filled(n, 1, 1.0))?;
    let repeated = tape.matmul(ones, component)?;
    let joined = tape.concat(&[words, repeated], 1)?;
    affine_softmax(tape, joined, w, b)
}

/// Mean word state over tokens tagged with `role`; zero when none are.
pub fn pool_component(tape: &mut Tape, words: Var, tags: &[Tag], role: Role) -> Result<Var> {
    let rows: Vec<usize> = tags
        .iter()
        .enumerate()
        .filter(|(_, t)| **t == role.tag())
        .map(|(i, _)| i)
        .collect();
    tape.mean_pool(words, &rows)
}

/// First-stage gold labels: 0 = component, 1 = other.
pub fn project_first(tags: &[Tag], role: Role) -> Vec<usize> {
    tags.iter()
        .map(|t| if *t == role.tag() { 0 } else { 1 })
        .collect()
}

/// Row argmax over {T, V, O}; any tie involving O resolves to O, a T/V tie to T.
pub fn argmax_tags(dist: &Matrix) -> Vec<Tag> {
    (0..dist.rows())
        .map(|r| {
            let row = dist.row(r);
            let o = row[Tag::O.index()];
            let (t, v) = (row[Tag::T.index()], row[Tag::V.index()]);
            if o >= t && o >= v {
                Tag::O
            } else if t >= v {
                Tag::T
            } else {
                Tag::V
            }
        })
        .collect()
}

/// Row argmax of a {C1, O} distribution; ties go to O.
pub fn argmax_first(dist: &Matrix, role: Role) -> Vec<Tag> {
    (0..dist.rows())
        .map(|r| {
            if dist.get(r, 0) > dist.get(r, 1) {
                role.tag()
            } else {
                Tag::O
            }
        })
        .collect()
}

/// Maximal runs of identical non-O tags.
pub fn tags_to_spans(tags: &[Tag]) -> Vec<Span> {
    let mut spans = Vec::new();
    let mut i = 0;
    while i < tags.len() {
        let role = match tags[i] {
            Tag::T => Role::Tenor,
            Tag::V => Role::Vehicle,
            Tag::O => {
                i += 1;
                continue;
            }
        };
        let start = i;
        while i + 1 < tags.len() && tags[i + 1] == tags[start] {
            i += 1;
        }
        spans.push(Span {
            start: start + 1,
            end: i + 1,
            role,
        });
        i += 1;
    }
    spans
}

pub fn decode_spans(dist: &Matrix) -> Vec<Span> {
    tags_to_spans(&argmax_tags(dist))
}

/// One-hot {T, V, O} distribution of a tag sequence.
pub fn one_hot(tags: &[Tag]) -> Matrix {
    let mut m = Matrix::zeros(tags.len(), 3);
    for (r, t) in tags.iter().enumerate() {
        m.set(r, t.index(), 1.0);
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ParamStore;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn grad_check(store: &mut ParamStore, f: impl Fn(&mut Tape) -> Result<Var>) -> f64 {
        let grads = {
            let mut t = Tape::new(store);
            let l = f(&mut t).unwrap();
            t.backward(l).unwrap()
        };
        let eval = |s: &ParamStore| {
            let mut t = Tape::new(s);
            let l = f(&mut t).unwrap();
            t.value(l).get(0, 0)
        };
        let mut worst: f64 = 0.0;
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            for i in 0..store.value(id).as_slice().len() {
                let orig = store.value(id).as_slice()[i];
                store.value_mut(id).as_mut_slice()[i] = orig + 1e-5;
                let up = eval(store);
                store.value_mut(id).as_mut_slice()[i] = orig - 1e-5;
                let down = eval(store);
                store.value_mut(id).as_mut_slice()[i] = orig;
                let num = (up - down) / 2e-5;
                let ana = grads.get(id).map_or(0.0, |g| g.as_slice()[i]);
                worst = worst.max((num - ana).abs() / num.abs().max(ana.abs()).max(1e-6));
            }
        }
        worst
    }

    fn store_with(shapes: &[(&str, usize, usize)]) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut s = ParamStore::new();
        for (n, r, c) in shapes {
            s.insert(n, Matrix::uniform(*r, *c, 1.0, &mut rng)).unwrap();
        }
        s
    }

    #[test]
    fn classify_with_equal_sides() {
        let store = store_with(&[("g", 1, 4), ("w", 12, 5), ("e", 2, 5)]);
        let mut t = Tape::new(&store);
        let g = t.param_named("g").unwrap();
        let (w, e) = (t.param_named("w").unwrap(), t.param_named("e").unwrap());
        let d = t.sub(g, g).unwrap();
        let d = t.abs(d).unwrap();
        assert!(t.value(d).as_slice().iter().all(|v| *v == 0.0));
        let p = classify(&mut t, g, g, w, e).unwrap();
        let s: f64 = t.value(p).as_slice().iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn classify_gradient() {
        let mut store = store_with(&[("l", 1, 4), ("r", 1, 4), ("w", 12, 5), ("e", 2, 5)]);
        let worst = grad_check(&mut store, |t| {
            let (l, r) = (t.param_named("l")?, t.param_named("r")?);
            let (w, e) = (t.param_named("w")?, t.param_named("e")?);
            let p = classify(t, l, r, w, e)?;
            t.cross_entropy(p, &[0])
        });
        assert!(worst < 1e-5, "{worst}");
    }

    #[test]
    fn zero_tagger_is_uniform_and_pointwise() {
        let mut store = store_with(&[("g", 3, 4)]);
        store.insert("w", Matrix::zeros(4, 3)).unwrap();
        store.insert("b", Matrix::zeros(1, 3)).unwrap();
        let id = store.id("g").unwrap();
        let row0 = store.value(id).row(0).to_vec();
        let gm = store.value_mut(id);
        for c in 0..4 {
            gm.set(1, c, row0[c]);
        }
        let mut t = Tape::new(&store);
        let (g, w, b) = (t.param_named("g").unwrap(), t.param_named("w").unwrap(), t.param_named("b").unwrap());
        let (_, p) = tag_parallel(&mut t, g, w, b).unwrap();
        assert!(t.value(p).as_slice().iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-15));

        let store2 = store_with(&[("g", 2, 4), ("w", 4, 3), ("b", 1, 3)]);
        let mut t2 = Tape::new(&store2);
        let g = t2.param_named("g").unwrap();
        let same = t2.pick_rows(g, &[0, 0]).unwrap();
        let (w, b) = (t2.param_named("w").unwrap(), t2.param_named("b").unwrap());
        let (_, p) = tag_parallel(&mut t2, same, w, b).unwrap();
        assert_eq!(t2.value(p).row(0), t2.value(p).row(1));
    }

    #[test]
    fn tagger_gradients() {
        let mut store = store_with(&[
            ("g", 4, 3),
            ("we", 3, 3),
            ("be", 1, 3),
            ("wf", 3, 2),
            ("bf", 1, 2),
            ("w2", 6, 3),
            ("b2", 1, 3),
        ]);
        let tags = [Tag::O, Tag::T, Tag::T, Tag::V];
        let worst = grad_check(&mut store, |t| {
            let g = t.param_named("g")?;
            let (we, be) = (t.param_named("we")?, t.param_named("be")?);
            let (_, p) = tag_parallel(t, g, we, be)?;
            let l1 = t.cross_entropy(p, &[2, 0, 0, 1])?;
            let (wf, bf) = (t.param_named("wf")?, t.param_named("bf")?);
            let (_, pf) = tag_first(t, g, wf, bf)?;
            let l2 = t.cross_entropy(pf, &project_first(&tags, Role::Tenor))?;
            let c1 = pool_component(t, g, &tags, Role::Tenor)?;
            let (w2, b2) = (t.param_named("w2")?, t.param_named("b2")?);
            let (_, p2) = tag_second(t, g, c1, w2, b2)?;
            let l3 = t.cross_entropy(p2, &[2, 0, 0, 1])?;
            let all = t.concat(&[l1, l2, l3], 1)?;
            t.sum(all)
        });
        assert!(worst < 1e-5, "{worst}");
    }

    #[test]
    fn pooling_rules() {
        let store = store_with(&[("g", 3, 2)]);
        let mut t = Tape::new(&store);
        let g = t.param_named("g").unwrap();
        let gv = store.value(store.id("g").unwrap()).clone();
        let one = pool_component(&mut t, g, &[Tag::O, Tag::T, Tag::O], Role::Tenor).unwrap();
        assert_eq!(t.value(one).row(0), gv.row(1));
        let none = pool_component(&mut t, g, &[Tag::O, Tag::T, Tag::O], Role::Vehicle).unwrap();
        assert!(t.value(none).as_slice().iter().all(|v| *v == 0.0));
        let two = pool_component(&mut t, g, &[Tag::V, Tag::O, Tag::V], Role::Vehicle).unwrap();
        for c in 0..2 {
            assert!((t.value(two).get(0, c) - (gv.get(0, c) + gv.get(2, c)) / 2.0).abs() < 1e-15);
        }
    }

    #[test]
    fn first_stage_projection() {
        assert_eq!(project_first(&[Tag::O, Tag::T, Tag::O], Role::Tenor), vec![1, 0, 1]);
        assert_eq!(project_first(&[Tag::O, Tag::T, Tag::V], Role::Vehicle), vec![1, 1, 0]);
        assert_eq!(project_first(&[Tag::O, Tag::O], Role::Tenor), vec![1, 1]);
    }

    #[test]
    fn second_stage_reduces_to_parallel_with_zero_component_block() {
        let mut store = store_with(&[("g", 3, 4), ("we", 4, 3), ("be", 1, 3)]);
        let we = store.value(store.id("we").unwrap()).clone();
        let mut stacked = Matrix::zeros(8, 3);
        for r in 0..4 {
            for c in 0..3 {
                stacked.set(r, c, we.get(r, c));
                stacked.set(r + 4, c, 0.37 * (r as f64 - c as f64));
            }
        }
        store.insert("w2", stacked).unwrap();
        let mut t = Tape::new(&store);
        let g = t.param_named("g").unwrap();
        let (we, be, w2) = (t.param_named("we").unwrap(), t.param_named("be").unwrap(), t.param_named("w2").unwrap());
        let zero = t.input(Matrix::zeros(1, 4)).unwrap();
        let (_, seq) = tag_second(&mut t, g, zero, w2, be).unwrap();
        let (_, par) = tag_parallel(&mut t, g, we, be).unwrap();
        for (a, b) in t.value(seq).as_slice().iter().zip(t.value(par).as_slice()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn span_decoding() {
        use Tag::*;
        let spans = tags_to_spans(&[O, T, T, O, V]);
        assert_eq!(
            spans,
            vec![
                Span { start: 2, end: 3, role: Role::Tenor },
                Span { start: 5, end: 5, role: Role::Vehicle }
            ]
        );
        assert!(tags_to_spans(&[O, O, O]).is_empty());
        assert_eq!(tags_to_spans(&[T, V]).len(), 2);
        // ties resolve toward O
        let tie = Matrix::from_rows(&[vec![0.4, 0.2, 0.4], vec![0.45, 0.45, 0.1]]).unwrap();
        assert_eq!(argmax_tags(&tie), vec![O, T]);
        assert_eq!(argmax_first(&Matrix::from_rows(&[vec![0.5, 0.5]]).unwrap(), Role::Tenor), vec![O]);
    }

    #[test]
    fn threshold() {
        assert_eq!(verdict(0.97), Label::Simile);
        assert_eq!(verdict(0.5), Label::Literal);
    }

    fn arb_tags() -> impl Strategy<Value = Vec<Tag>> {
        proptest::collection::vec(prop_oneof![Just(Tag::T), Just(Tag::V), Just(Tag::O)], 1..20)
    }

    proptest! {
        #[test]
        fn decoding_is_idempotent(tags in arb_tags()) {
            let spans = tags_to_spans(&tags);
            let redecoded = decode_spans(&one_hot(&argmax_tags(&one_hot(&tags))));
            prop_assert_eq!(&spans, &redecoded);
            for w in spans.windows(2) {
                prop_assert!(w[0].end < w[1].start);
            }
            for s in &spans {
                prop_assert!(s.start >= 1 && s.end <= tags.len() && s.start <= s.end);
            }
        }
    }
}
