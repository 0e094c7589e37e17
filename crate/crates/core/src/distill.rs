//! Joint training of the three decoding orders with distillation toward their
//! summed-logit ensemble, and dev-set model selection.

use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Label;
use crate::encoder::EncoderError;
use crate::evalkit::{score_classification, score_extraction, Report};
use crate::heads::{self, Span};
use crate::model::{Instance, Model, ModelConfig, ModelKind, Outputs};
use crate::tensor::{AdamConfig, Matrix, ParamStore, Tape, TensorError, Var};

#[derive(Debug, Error)]
pub enum DistillError {
    #[error("non-finite loss in epoch {epoch}, batch {batch} (model {model}): {source}")]
    NonFinite {
        epoch: usize,
        batch: usize,
        model: ModelKind,
        source: TensorError,
    },
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("dev set is empty")]
    EmptyDev,
    #[error("training set is empty")]
    EmptyTrain,
    #[error("bundle has no models")]
    EmptyBundle,
    #[error(transparent)]
    Model(#[from] EncoderError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, DistillError>;

/// How the supervised weight λ moves over training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LambdaDirection {
    /// λ rises from 0 to 1: distillation-heavy first.
    #[default]
    Increasing,
    /// λ falls from 1 to 0: supervision first.
    Decreasing,
    /// λ fixed at 1; no distillation.
    SupervisedOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Classification share of the supervised loss.
    pub alpha: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    /// Weight of the first-stage tagger loss in sequential models.
    pub aux_weight: f64,
    pub lambda_direction: LambdaDirection,
    /// Restore each model to its best dev epoch at the end.
    pub keep_best: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            epochs: 30,
            batch_size: 8,
            adam: AdamConfig::default(),
            seed: 13,
            aux_weight: 1.0,
            lambda_direction: LambdaDirection::Increasing,
            keep_best: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(DistillError::Config(format!("alpha {} not in [0, 1]", self.alpha)));
        }
        if self.batch_size == 0 {
            return Err(DistillError::Config("batch_size must be at least 1".into()));
        }
        if self.epochs == 0 {
            return Err(DistillError::Config("epochs must be at least 1".into()));
        }
        if !(self.adam.lr > 0.0) || self.aux_weight < 0.0 {
            return Err(DistillError::Config("lr must be positive and aux_weight non-negative".into()));
        }
        Ok(())
    }

    pub fn lambda(&self, step: usize, total: usize) -> f64 {
        match self.lambda_direction {
            LambdaDirection::Increasing => lambda_at(step, total),
            LambdaDirection::Decreasing => 1.0 - lambda_at(step, total),
            LambdaDirection::SupervisedOnly => 1.0,
        }
    }
}

/// `step / total`, clamped to `[0, 1]`.
pub fn lambda_at(step: usize, total: usize) -> f64 {
    let total = total.max(1);
    step.min(total) as f64 / total as f64
}

pub fn interpolate(alpha: f64, j_sc: f64, j_ce: f64) -> f64 {
    alpha * j_sc + (1.0 - alpha) * j_ce
}

/// Models trained together; one per enabled decoding order, ordered p, t, v.
#[derive(Debug, Clone)]
pub struct ModelBundle {
    pub models: Vec<Model>,
}

impl ModelBundle {
    pub fn new(kinds: &[ModelKind], cfg: &ModelConfig, vocab_size: usize, seed: u64) -> Result<Self> {
        let mut kinds = kinds.to_vec();
        kinds.sort();
        kinds.dedup();
        if kinds.is_empty() {
            return Err(DistillError::EmptyBundle);
        }
        let models = kinds
            .into_iter()
            .map(|k| Model::new(k, cfg.clone(), vocab_size, seed))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(Self { models })
    }

    pub fn kinds(&self) -> Vec<ModelKind> {
        self.models.iter().map(|m| m.kind).collect()
    }

    pub fn get(&self, kind: ModelKind) -> Option<&Model> {
        self.models.iter().find(|m| m.kind == kind)
    }
}

/// `α·J_sc + (1−α)·J_ce` for one sentence, on the tape.
pub fn supervised_loss(
    tape: &mut Tape,
    model: &Model,
    out: &Outputs,
    inst: &Instance,
    alpha: f64,
    aux_weight: f64,
) -> std::result::Result<Var, TensorError> {
    let class = inst.sentence.label.index();
    let j_sc = tape.cross_entropy(out.class_probs, &[class])?;
    let gold: Vec<usize> = inst.sentence.tags.iter().map(|t| t.index()).collect();
    let mut j_ce = tape.cross_entropy(out.tag_probs, &gold)?;
    if let (Some(first), Some(role)) = (out.first_probs, model.kind.first_role()) {
        let gold_first = heads::project_first(&inst.sentence.tags, role);
        let aux = tape.cross_entropy(first, &gold_first)?;
        let aux = tape.scale(aux, aux_weight)?;
        j_ce = tape.add(j_ce, aux)?;
    }
    let a = tape.scale(j_sc, alpha)?;
    let b = tape.scale(j_ce, 1.0 - alpha)?;
    tape.add(a, b)
}

/// Row-wise softmax of the summed logits.
pub fn ensemble_distribution(logits: &[&Matrix]) -> std::result::Result<Matrix, TensorError> {
    let first = logits
        .first()
        .ok_or_else(|| TensorError::Invalid("ensemble of zero models".into()))?;
    let mut sum = (*first).clone();
    for z in &logits[1..] {
        if z.shape() != sum.shape() {
            return Err(TensorError::Shape {
                op: "ensemble_distribution",
                lhs: sum.shape(),
                rhs: z.shape(),
            });
        }
        for (s, v) in sum.as_mut_slice().iter_mut().zip(z.as_slice()) {
            *s += v;
        }
    }
    Ok(sum.softmax(1))
}

/// Mean over tokens of `KL(ensemble ‖ model)`; the ensemble is a constant.
pub fn kl_to_ensemble(tape: &mut Tape, model_probs: Var, ensemble: &Matrix) -> std::result::Result<Var, TensorError> {
    let n = ensemble.rows().max(1);
    let kl = tape.kl_divergence(ensemble, model_probs)?;
    tape.scale(kl, 1.0 / n as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelEpochLog {
    pub model: ModelKind,
    /// Mean per-sentence objective `λ·sup + (1−λ)·kl`.
    pub loss: f64,
    pub supervised: f64,
    pub kl: f64,
    pub dev: Report,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// λ at the last step of the epoch.
    pub lambda: f64,
    pub models: Vec<ModelEpochLog>,
}

impl fmt::Display for EpochLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "epoch {:>3} λ={:.3}", self.epoch, self.lambda)?;
        for m in &self.models {
            write!(
                f,
                " | {} loss={:.4} cls={:.3} ext={:.3}",
                m.model, m.loss, m.dev.classification.f1, m.dev.extraction.f1
            )?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub log: Vec<EpochLog>,
    /// Epoch (1-based) each model was restored to, in bundle order.
    pub best_epochs: Vec<(ModelKind, usize)>,
}

struct Running {
    loss: f64,
    supervised: f64,
    kl: f64,
}

/// Trains every model of the bundle in place. `on_epoch` sees each log line as
/// it is produced.
pub fn train(
    bundle: &mut ModelBundle,
    train_set: &[Instance],
    dev_set: &[Instance],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(DistillError::EmptyTrain);
    }
    if dev_set.is_empty() {
        return Err(DistillError::EmptyDev);
    }
    if bundle.models.is_empty() {
        return Err(DistillError::EmptyBundle);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let batches_per_epoch = train_set.len().div_ceil(cfg.batch_size);
    let total_steps = cfg.epochs * batches_per_epoch;
    let n_models = bundle.models.len();
    let mut best: Vec<Option<(f64, f64, usize, Vec<Matrix>)>> = vec![None; n_models];
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut step = 0usize;
    let mut lambda = cfg.lambda(0, total_steps);

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut running: Vec<Running> = (0..n_models)
            .map(|_| Running {
                loss: 0.0,
                supervised: 0.0,
                kl: 0.0,
            })
            .collect();
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            lambda = cfg.lambda(step, total_steps);
            let items: Vec<&Instance> = batch.iter().map(|&i| &train_set[i]).collect();
            let stats = train_batch(bundle, &items, lambda, cfg).map_err(|(model, source)| {
                DistillError::NonFinite {
                    epoch,
                    batch: b,
                    model,
                    source,
                }
            })?;
            for (r, s) in running.iter_mut().zip(stats) {
                r.loss += s.loss;
                r.supervised += s.supervised;
                r.kl += s.kl;
            }
            step += 1;
        }

        let n = train_set.len() as f64;
        let mut models = Vec::with_capacity(n_models);
        for (i, model) in bundle.models.iter().enumerate() {
            let dev = evaluate_model(model, dev_set)?;
            let r = &running[i];
            models.push(ModelEpochLog {
                model: model.kind,
                loss: r.loss / n,
                supervised: r.supervised / n,
                kl: r.kl / n,
                dev,
            });
            let key = (dev.extraction.f1, dev.classification.f1);
            let better = match &best[i] {
                None => true,
                Some((e, c, _, _)) => key.0 > *e || (key.0 == *e && key.1 > *c),
            };
            if better {
                best[i] = Some((key.0, key.1, epoch, model.store.values()));
            }
        }
        let entry = EpochLog { epoch, lambda, models };
        log::debug!("{entry}");
        on_epoch(&entry);
        log.push(entry);
    }

    let mut best_epochs = Vec::with_capacity(n_models);
    for (model, slot) in bundle.models.iter_mut().zip(best) {
        let (_, _, epoch, values) = slot.expect("every model is scored each epoch");
        if cfg.keep_best {
            model.store.restore_values(values)?;
            best_epochs.push((model.kind, epoch));
        } else {
            best_epochs.push((model.kind, cfg.epochs));
        }
    }
    Ok(TrainOutcome { log, best_epochs })
}

/// Per-model summed stats for one batch, after one Adam step each.
fn train_batch(
    bundle: &mut ModelBundle,
    items: &[&Instance],
    lambda: f64,
    cfg: &TrainConfig,
) -> std::result::Result<Vec<Running>, (ModelKind, TensorError)> {
    let n_models = bundle.models.len();
    let mut stats: Vec<Running> = (0..n_models)
        .map(|_| Running {
            loss: 0.0,
            supervised: 0.0,
            kl: 0.0,
        })
        .collect();
    let inv_batch = 1.0 / items.len() as f64;
    let mut grads = Vec::with_capacity(items.len() * n_models);
    {
        let models = &bundle.models;
        for inst in items {
            let teacher = Some(inst.sentence.tags.as_slice());
            let mut tapes: Vec<Tape> = Vec::with_capacity(n_models);
            let mut outs = Vec::with_capacity(n_models);
            for m in models {
                let mut tape = Tape::new(&m.store);
                let out = m.forward(&mut tape, inst, teacher).map_err(|e| (m.kind, tensor_of(e)))?;
                tapes.push(tape);
                outs.push(out);
            }
            let logits: Vec<&Matrix> = tapes.iter().zip(&outs).map(|(t, o)| t.value(o.tag_logits)).collect();
            let ensemble = ensemble_distribution(&logits).map_err(|e| (models[0].kind, e))?;
            for (i, m) in models.iter().enumerate() {
                let tape = &mut tapes[i];
                let out = &outs[i];
                let fail = |e| (m.kind, e);
                let sup = supervised_loss(tape, m, out, inst, cfg.alpha, cfg.aux_weight).map_err(fail)?;
                let kl = kl_to_ensemble(tape, out.tag_probs, &ensemble).map_err(fail)?;
                let a = tape.scale(sup, lambda).map_err(fail)?;
                let b = tape.scale(kl, 1.0 - lambda).map_err(fail)?;
                let total = tape.add(a, b).map_err(fail)?;
                let total = tape.scale(total, inv_batch).map_err(fail)?;
                let s = &mut stats[i];
                s.supervised += tape.value(sup).get(0, 0);
                s.kl += tape.value(kl).get(0, 0);
                s.loss += tape.value(total).get(0, 0) * items.len() as f64;
                grads.push((i, tape.backward(total).map_err(fail)?));
            }
        }
    }
    for (i, g) in &grads {
        bundle.models[*i].store.accumulate(g);
    }
    for m in &mut bundle.models {
        m.store.adam_step(&cfg.adam);
    }
    Ok(stats)
}

fn tensor_of(e: EncoderError) -> TensorError {
    match e {
        EncoderError::Tensor(t) => t,
        other => TensorError::Invalid(other.to_string()),
    }
}

/// Inference-mode predictions of one model.
pub fn predict_all(model: &Model, data: &[Instance]) -> Result<Vec<heads::SpanPrediction>> {
    data.iter().map(|inst| Ok(model.predict(inst)?)).collect()
}

pub fn evaluate_model(model: &Model, data: &[Instance]) -> Result<Report> {
    let preds = predict_all(model, data)?;
    let pred_labels: Vec<Label> = preds.iter().map(|p| p.label).collect();
    let gold_labels: Vec<Label> = data.iter().map(|i| i.sentence.label).collect();
    let pred_spans: Vec<Vec<Span>> = preds.into_iter().map(|p| p.spans).collect();
    let gold_spans: Vec<Vec<Span>> = data.iter().map(|i| heads::tags_to_spans(&i.sentence.tags)).collect();
    Ok(Report {
        classification: score_classification(&pred_labels, &gold_labels).expect("aligned by construction"),
        extraction: score_extraction(&pred_spans, &gold_spans).expect("aligned by construction"),
    })
}

/// Highest extraction F1, then classification F1, then the order p < t < v.
pub fn select_from_reports(reports: &[(ModelKind, Report)]) -> Option<ModelKind> {
    let mut sorted: Vec<&(ModelKind, Report)> = reports.iter().collect();
    sorted.sort_by_key(|(k, _)| *k);
    let mut best: Option<&(ModelKind, Report)> = None;
    for cand in sorted {
        let wins = match best {
            None => true,
            Some((_, b)) => {
                let (e, c) = (cand.1.extraction.f1, cand.1.classification.f1);
                e > b.extraction.f1 || (e == b.extraction.f1 && c > b.classification.f1)
            }
        };
        if wins {
            best = Some(cand);
        }
    }
    best.map(|(k, _)| *k)
}

pub fn select_best(bundle: &ModelBundle, dev_set: &[Instance]) -> Result<(ModelKind, Vec<(ModelKind, Report)>)> {
    if dev_set.is_empty() {
        return Err(DistillError::EmptyDev);
    }
    let reports = bundle
        .models
        .iter()
        .map(|m| Ok((m.kind, evaluate_model(m, dev_set)?)))
        .collect::<Result<Vec<_>>>()?;
    let kind = select_from_reports(&reports).ok_or(DistillError::EmptyBundle)?;
    Ok((kind, reports))
}

/// Mean per-token `KL(ensemble ‖ model)` for each model, all in inference mode.
pub fn mean_kl_to_ensemble(bundle: &ModelBundle, data: &[Instance]) -> Result<Vec<(ModelKind, f64)>> {
    let mut sums = vec![0.0; bundle.models.len()];
    let mut tokens = 0usize;
    for inst in data {
        let mut logits = Vec::with_capacity(bundle.models.len());
        let mut probs = Vec::with_capacity(bundle.models.len());
        for m in &bundle.models {
            let mut tape = Tape::new(&m.store);
            let out = m.forward(&mut tape, inst, None)?;
            logits.push(tape.value(out.tag_logits).clone());
            probs.push(tape.value(out.tag_probs).clone());
        }
        let refs: Vec<&Matrix> = logits.iter().collect();
        let ens = ensemble_distribution(&refs)?;
        for (s, p) in sums.iter_mut().zip(&probs) {
            *s += crate::tensor::kl_value(&ens, p);
        }
        tokens += ens.rows();
    }
    let tokens = tokens.max(1) as f64;
    Ok(bundle
        .models
        .iter()
        .zip(sums)
        .map(|(m, s)| (m.kind, s / tokens))
        .collect())
}

/// Gradient a model receives from its KL term against a fixed target.
pub fn kl_gradient(model: &Model, inst: &Instance, ensemble: &Matrix) -> Result<Vec<Matrix>> {
    let mut tape = Tape::new(&model.store);
    let out = model.forward(&mut tape, inst, Some(&inst.sentence.tags))?;
    let kl = kl_to_ensemble(&mut tape, out.tag_probs, ensemble)?;
    let grads = tape.backward(kl)?;
    Ok(grads_in_order(&model.store, &grads))
}

fn grads_in_order(store: &ParamStore, grads: &crate::tensor::Gradients) -> Vec<Matrix> {
    store
        .ids()
        .map(|id| {
            grads.get(id).cloned().unwrap_or_else(|| {
                let (r, c) = store.value(id).shape();
                Matrix::zeros(r, c)
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_vocab, generate_synthetic, SyntheticConfig};
    use crate::encoder::EncoderConfig;
    use crate::evalkit::Prf;
    use crate::hetgraph::GraphOptions;
    use proptest::prelude::*;
    use rand::Rng;

    fn tiny() -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig {
                d_model: 8,
                token_dim: 8,
                edge_emb_dim: 4,
                n_selfattn_layers: 1,
                n_gat_layers: 1,
                ..Default::default()
            },
            label_emb_dim: 4,
        }
    }

    fn data(n: usize, seed: u64) -> (crate::corpus::Vocabulary, Vec<Instance>) {
        let corpus = generate_synthetic(&SyntheticConfig {
            n_sentences: n,
            seed,
            noise_rate: 0.0,
        })
        .unwrap();
        let vocab = build_vocab(&corpus, 1).unwrap();
        let inst = Instance::prepare(&corpus, &vocab, &GraphOptions::default());
        (vocab, inst)
    }

    fn report(cls: f64, ext: f64) -> Report {
        let mut r = Report {
            classification: Prf::from_counts(0, 0, 0),
            extraction: Prf::from_counts(0, 0, 0),
        };
        r.classification.f1 = cls;
        r.extraction.f1 = ext;
        r
    }

    #[test]
    fn lambda_endpoints_and_midpoint() {
        assert_eq!(lambda_at(0, 100), 0.0);
        assert_eq!(lambda_at(100, 100), 1.0);
        assert_eq!(lambda_at(50, 100), 0.5);
        let cfg = TrainConfig {
            lambda_direction: LambdaDirection::Decreasing,
            ..Default::default()
        };
        assert_eq!(cfg.lambda(0, 10), 1.0);
    }

    #[test]
    fn interpolation_arithmetic() {
        assert!((interpolate(0.1, 1.0, 2.0) - 1.9).abs() < 1e-12);
        assert_eq!(interpolate(1.0, 0.7, 5.0), 0.7);
    }

    #[test]
    fn zero_logits_give_uniform_ensemble() {
        let z = Matrix::zeros(4, 3);
        let e = ensemble_distribution(&[&z, &z, &z]).unwrap();
        assert!(e.as_slice().iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-15));
        assert!(ensemble_distribution(&[&z, &Matrix::zeros(3, 3)]).is_err());
    }

    #[test]
    fn identical_logits_sharpen() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let z = Matrix::uniform(1, 3, 2.0, &mut rng);
            let single = z.softmax(1);
            let triple = ensemble_distribution(&[&z, &z, &z]).unwrap();
            let max = |m: &Matrix| m.as_slice().iter().cloned().fold(0.0, f64::max);
            assert!(max(&triple) > max(&single));
        }
    }

    #[test]
    fn selection_rules() {
        let r = vec![
            (ModelKind::Parallel, report(0.9, 0.80)),
            (ModelKind::TenorFirst, report(0.9, 0.85)),
            (ModelKind::VehicleFirst, report(0.9, 0.83)),
        ];
        assert_eq!(select_from_reports(&r), Some(ModelKind::TenorFirst));
        let tie: Vec<_> = ModelKind::ALL.iter().rev().map(|k| (*k, report(0.5, 0.5))).collect();
        assert_eq!(select_from_reports(&tie), Some(ModelKind::Parallel));
        let cls_break = vec![
            (ModelKind::Parallel, report(0.7, 0.5)),
            (ModelKind::VehicleFirst, report(0.8, 0.5)),
        ];
        assert_eq!(select_from_reports(&cls_break), Some(ModelKind::VehicleFirst));
    }

    #[test]
    fn empty_dev_is_rejected() {
        let (vocab, inst) = data(4, 1);
        let bundle = ModelBundle::new(&ModelKind::ALL, &tiny(), vocab.len(), 1).unwrap();
        assert!(matches!(select_best(&bundle, &[]), Err(DistillError::EmptyDev)));
        let mut b2 = bundle.clone();
        let r = train(&mut b2, &inst, &[], &TrainConfig::default(), |_| {});
        assert!(matches!(r, Err(DistillError::EmptyDev)));
    }

    #[test]
    fn perfect_predictions_have_zero_supervised_loss() {
        let (vocab, inst) = data(2, 5);
        let mut model = Model::new(ModelKind::Parallel, tiny(), vocab.len(), 0).unwrap();
        let tape_loss = {
            let mut tape = Tape::new(&model.store);
            let out = model.forward(&mut tape, &inst[0], None).unwrap();
            let l = supervised_loss(&mut tape, &model, &out, &inst[0], 0.1, 1.0).unwrap();
            let cp = tape.value(out.class_probs).clone();
            let tp = tape.value(out.tag_probs).clone();
            let j_sc = -cp.get(0, inst[0].sentence.label.index()).ln();
            let j_ce: f64 = inst[0]
                .sentence
                .tags
                .iter()
                .enumerate()
                .map(|(i, t)| -tp.get(i, t.index()).ln())
                .sum();
            (tape.value(l).get(0, 0), interpolate(0.1, j_sc, j_ce))
        };
        assert!((tape_loss.0 - tape_loss.1).abs() < 1e-9);
        // A saturated O bias makes every literal sentence's tagging exact.
        let lit = inst.iter().find(|i| i.sentence.label == Label::Literal).unwrap();
        let b = model.store.id("tag.b").unwrap();
        model.store.value_mut(b).set(0, 2, 200.0);
        let mut tape = Tape::new(&model.store);
        let out = model.forward(&mut tape, lit, None).unwrap();
        let l = supervised_loss(&mut tape, &model, &out, lit, 0.0, 1.0).unwrap();
        assert!(tape.value(l).get(0, 0) < 1e-12);
    }

    #[test]
    fn kl_gradient_matches_finite_differences() {
        let (vocab, inst) = data(2, 9);
        let model = Model::new(ModelKind::TenorFirst, tiny(), vocab.len(), 4).unwrap();
        let n = inst[0].graph.word_count();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let target = Matrix::uniform(n, 3, 1.0, &mut rng).softmax(1);
        let analytic = kl_gradient(&model, &inst[0], &target).unwrap();
        let value = |store: &ParamStore| {
            let mut m = model.clone();
            m.store = store.clone();
            let mut tape = Tape::new(&m.store);
            let out = m.forward(&mut tape, &inst[0], Some(&inst[0].sentence.tags)).unwrap();
            let kl = kl_to_ensemble(&mut tape, out.tag_probs, &target).unwrap();
            tape.value(kl).get(0, 0)
        };
        let eps = 1e-5;
        for (k, id) in model.store.ids().enumerate() {
            let len = model.store.value(id).as_slice().len();
            for _ in 0..3 {
                let j = rng.gen_range(0..len);
                let mut plus = model.store.clone();
                plus.value_mut(id).as_mut_slice()[j] += eps;
                let mut minus = model.store.clone();
                minus.value_mut(id).as_mut_slice()[j] -= eps;
                let fd = (value(&plus) - value(&minus)) / (2.0 * eps);
                let an = analytic[k].as_slice()[j];
                assert!(
                    (fd - an).abs() < 1e-5,
                    "{}[{j}]: fd {fd} analytic {an}",
                    model.store.name(id)
                );
            }
        }
    }

    #[test]
    fn no_gradient_leaks_through_the_target() {
        let (vocab, inst) = data(2, 2);
        let mut bundle = ModelBundle::new(&ModelKind::ALL, &tiny(), vocab.len(), 7).unwrap();
        let inst = &inst[0];
        let snapshot = {
            let logits: Vec<Matrix> = bundle
                .models
                .iter()
                .map(|m| {
                    let mut t = Tape::new(&m.store);
                    let o = m.forward(&mut t, inst, Some(&inst.sentence.tags)).unwrap();
                    t.value(o.tag_logits).clone()
                })
                .collect();
            ensemble_distribution(&logits.iter().collect::<Vec<_>>()).unwrap()
        };
        let before = kl_gradient(&bundle.models[0], inst, &snapshot).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ids: Vec<_> = bundle.models[1].store.ids().collect();
        for id in ids {
            for v in bundle.models[1].store.value_mut(id).as_mut_slice() {
                *v += rng.gen_range(-0.5..0.5);
            }
        }
        let after = kl_gradient(&bundle.models[0], inst, &snapshot).unwrap();
        assert_eq!(before, after);
    }

    #[test]
    fn supervised_only_matches_independent_training() {
        let (vocab, inst) = data(12, 4);
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 4,
            lambda_direction: LambdaDirection::SupervisedOnly,
            keep_best: false,
            ..Default::default()
        };
        let mut joint = ModelBundle::new(&ModelKind::ALL, &tiny(), vocab.len(), 3).unwrap();
        train(&mut joint, &inst[..8], &inst[8..], &cfg, |_| {}).unwrap();
        let mut alone = ModelBundle::new(&[ModelKind::VehicleFirst], &tiny(), vocab.len(), 3).unwrap();
        train(&mut alone, &inst[..8], &inst[8..], &cfg, |_| {}).unwrap();
        assert_eq!(
            joint.get(ModelKind::VehicleFirst).unwrap().store.values(),
            alone.models[0].store.values()
        );
    }

    #[test]
    fn training_is_deterministic() {
        let (vocab, inst) = data(12, 6);
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 4,
            ..Default::default()
        };
        let run = || {
            let mut b = ModelBundle::new(&ModelKind::ALL, &tiny(), vocab.len(), 3).unwrap();
            let out = train(&mut b, &inst[..8], &inst[8..], &cfg, |_| {}).unwrap();
            serde_json::to_string(&out.log).unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn non_finite_loss_names_the_batch() {
        let (vocab, inst) = data(8, 6);
        let mut b = ModelBundle::new(&[ModelKind::Parallel], &tiny(), vocab.len(), 3).unwrap();
        let id = b.models[0].store.id("tag.b").unwrap();
        b.models[0].store.value_mut(id).set(0, 0, f64::NAN);
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 4,
            ..Default::default()
        };
        let err = train(&mut b, &inst[..4], &inst[4..], &cfg, |_| {}).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("epoch 1") && msg.contains("batch 0"), "{msg}");
    }

    proptest! {
        #[test]
        fn ensemble_is_normalized_product(v in proptest::collection::vec(-5.0f64..5.0, 9)) {
            let zs: Vec<Matrix> = v.chunks(3).map(Matrix::row_vector).collect();
            let ens = ensemble_distribution(&zs.iter().collect::<Vec<_>>()).unwrap();
            let ps: Vec<Matrix> = zs.iter().map(|z| z.softmax(1)).collect();
            let prod: Vec<f64> = (0..3).map(|j| ps.iter().map(|p| p.get(0, j)).product()).collect();
            let norm: f64 = prod.iter().sum();
            for j in 0..3 {
                prop_assert!((ens.get(0, j) - prod[j] / norm).abs() < 1e-9);
            }
        }
    }
}
