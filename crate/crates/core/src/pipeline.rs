//! Fine-tuning after pretraining: classifier construction with inherited
//! weights, supervised cross-entropy training, pseudo-labeling of the
//! unlabeled pool, and the iterative self-training loop.

use std::cmp::Ordering;
use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::byol::LossTrace;
use crate::data::LabeledSet;
use crate::error::{Error, Result};
use crate::model::{classifier_logits, forward_classifier, init_head, Component, HeadInput, NetworkSpec, ParamSet, ParamVars};
use crate::optim::sgd_step;
use crate::rng::Rng;
use crate::tensor::{argmax, one_hot, softmax_rows, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub eta: f64,
    /// Pseudo-labels added per self-training round.
    pub pseudo_k: usize,
    /// Total rounds including the labeled-only round 0.
    pub rounds: usize,
    /// Pseudo-labels below this confidence are dropped after top-K selection.
    pub min_confidence: f64,
    pub seed: Option<u64>,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            epochs: 30,
            batch_size: 32,
            eta: 0.05,
            pseudo_k: 500,
            rounds: 3,
            min_confidence: 0.0,
            seed: None,
        }
    }
}

impl FinetuneConfig {
    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.rounds == 0 {
            return Err(Error::validation("finetune batch_size and rounds must be positive"));
        }
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::validation(format!("finetune eta {} must be > 0", self.eta)));
        }
        if !(0.0..=1.0).contains(&self.min_confidence) {
            return Err(Error::validation("min_confidence must be in [0, 1]"));
        }
        Ok(())
    }
}

/// An unlabeled pool member with its model-assigned class.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PseudoExample {
    pub index: usize,
    pub assigned_label: usize,
    /// Maximum softmax probability of the prediction.
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    /// Zero for classes absent from the evaluated set.
    pub per_class_accuracy: Vec<f64>,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<u64>>,
}

impl EvalReport {
    pub fn total(&self) -> u64 {
        self.confusion.iter().flatten().sum()
    }
}

/// Copies the pretrained encoder (plus the projector when the head reads the
/// projection), drops the predictor, and appends a fresh head.
pub fn build_classifier(pretrained: &ParamSet, spec: &NetworkSpec, seed: u64) -> Result<ParamSet> {
    spec.validate()?;
    let mut inherited = vec![Component::Encoder];
    if spec.head_input == HeadInput::Projection {
        inherited.push(Component::Projector);
    }
    for &c in &inherited {
        if !pretrained.has(c) {
            return Err(Error::contract(format!("pretrained parameters have no {c} group")));
        }
    }
    let mut params = pretrained.subset(&inherited);
    params.check_against(spec)?;
    params.extend(init_head(spec, seed)?);
    Ok(params)
}

fn check_inputs(params: &ParamSet, images: &Tensor) -> Result<()> {
    let width = images.numel() / images.rows();
    let expected = params
        .get(&Component::Encoder.weight_name(0))
        .ok_or_else(|| Error::contract("parameters have no encoder"))?
        .shape()[0];
    if width != expected {
        return Err(Error::contract(format!(
            "images have {width} values each, encoder expects {expected}"
        )));
    }
    Ok(())
}

/// Supervised SGD on mean cross-entropy; one seeded shuffle per epoch, the
/// last batch of an epoch may be partial.
pub fn finetune(params: &ParamSet, data: &LabeledSet, cfg: &FinetuneConfig) -> Result<(ParamSet, LossTrace)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::validation("cannot fine-tune on an empty dataset"));
    }
    check_inputs(params, &data.images)?;
    let mut params = params.clone();
    let mut trace = LossTrace::default();
    let shuffle = Rng::new(cfg.seed());
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let order = shuffle.derive(epoch as u64).permutation(data.len());
        for batch in order.chunks(cfg.batch_size) {
            let x = data.images.select_rows(batch)?.flatten_rows();
            let labels: Vec<usize> = batch.iter().map(|&i| data.labels[i]).collect();
            let target = one_hot(&labels, data.num_classes)?;

            let mut g = Graph::new();
            let vars = ParamVars::trainable(&mut g, &params, "");
            let input = g.constant(x);
            let logits = forward_classifier(&mut g, &vars, input)?;
            let loss = g.cross_entropy(logits, &target)?;
            let grads = g.backward(loss)?;
            sgd_step(&mut params, &grads, cfg.eta)?;
            trace.push(step, g.value(loss).item()?);
            step += 1;
        }
    }
    Ok((params, trace))
}

/// Descending confidence, then ascending pool index.
fn selection_order(a: &PseudoExample, b: &PseudoExample) -> Ordering {
    b.confidence
        .total_cmp(&a.confidence)
        .then(a.index.cmp(&b.index))
}

/// Top-`k` pseudo-labels from `N×C` logits, sorted by confidence descending.
/// Examples under `min_confidence` are dropped after selection.
pub fn pseudo_labels_from_logits(logits: &Tensor, k: usize, min_confidence: f64) -> Result<Vec<PseudoExample>> {
    let pool = logits.rows();
    if k > pool {
        return Err(Error::validation(format!(
            "cannot select {k} pseudo-labels from a pool of {pool}"
        )));
    }
    if k == 0 {
        return Ok(Vec::new());
    }
    let probs = softmax_rows(logits);
    let mut candidates: Vec<PseudoExample> = (0..pool)
        .map(|i| {
            let row = probs.row(i);
            let label = argmax(row);
            PseudoExample {
                index: i,
                assigned_label: label,
                confidence: row[label],
            }
        })
        .collect();
    if k < pool {
        candidates.select_nth_unstable_by(k - 1, selection_order);
        candidates.truncate(k);
    }
    candidates.sort_unstable_by(selection_order);
    candidates.retain(|p| p.confidence >= min_confidence);
    Ok(candidates)
}

/// Predicts every unlabeled image (no augmentation) and keeps the `k` most
/// confident.
pub fn generate_pseudo_labels(params: &ParamSet, unlabeled: &Tensor, k: usize, min_confidence: f64) -> Result<Vec<PseudoExample>> {
    if k > unlabeled.rows() {
        return Err(Error::validation(format!(
            "cannot select {k} pseudo-labels from a pool of {}",
            unlabeled.rows()
        )));
    }
    if k == 0 {
        return Ok(Vec::new());
    }
    check_inputs(params, unlabeled)?;
    let logits = classifier_logits(params, unlabeled)?;
    pseudo_labels_from_logits(&logits, k, min_confidence)
}

/// Labeled examples first and unchanged, then the pseudo-labeled images.
pub fn merge_datasets(labeled: &LabeledSet, unlabeled: Option<&Tensor>, pseudo: &[PseudoExample]) -> Result<LabeledSet> {
    if pseudo.is_empty() {
        return Ok(labeled.clone());
    }
    let pool = unlabeled.ok_or_else(|| Error::validation("pseudo-labels given without an unlabeled pool"))?;
    let mut seen = BTreeSet::new();
    for p in pseudo {
        if p.index >= pool.rows() {
            return Err(Error::validation(format!(
                "pseudo-label index {} outside pool of {}",
                p.index,
                pool.rows()
            )));
        }
        if !seen.insert(p.index) {
            return Err(Error::validation(format!("duplicate pseudo-label index {}", p.index)));
        }
    }
    let indices: Vec<usize> = pseudo.iter().map(|p| p.index).collect();
    let extra = pool.select_rows(&indices)?;
    let images = Tensor::concat_rows(&[&labeled.images, &extra])?;
    let mut labels = labeled.labels.clone();
    labels.extend(pseudo.iter().map(|p| p.assigned_label));
    LabeledSet::new(images, labels, labeled.num_classes)
}

/// Argmax-of-logits accuracy (ties to the lower class) with a confusion matrix.
pub fn evaluate(params: &ParamSet, test: &LabeledSet) -> Result<EvalReport> {
    if test.is_empty() {
        return Err(Error::validation("cannot evaluate on an empty set"));
    }
    check_inputs(params, &test.images)?;
    let logits = classifier_logits(params, &test.images)?;
    if logits.shape()[1] != test.num_classes {
        return Err(Error::contract(format!(
            "head emits {} classes, test set has {}",
            logits.shape()[1],
            test.num_classes
        )));
    }
    let predictions: Vec<usize> = (0..test.len()).map(|i| argmax(logits.row(i))).collect();
    Ok(report_from_predictions(&test.labels, &predictions, test.num_classes))
}

pub fn report_from_predictions(labels: &[usize], predictions: &[usize], num_classes: usize) -> EvalReport {
    let mut confusion = vec![vec![0u64; num_classes]; num_classes];
    for (&t, &p) in labels.iter().zip(predictions) {
        confusion[t][p] += 1;
    }
    let correct: u64 = (0..num_classes).map(|c| confusion[c][c]).sum();
    let per_class_accuracy = confusion
        .iter()
        .enumerate()
        .map(|(c, row)| {
            let n: u64 = row.iter().sum();
            if n == 0 {
                0.0
            } else {
                row[c] as f64 / n as f64
            }
        })
        .collect();
    EvalReport {
        accuracy: correct as f64 / labels.len() as f64,
        per_class_accuracy,
        confusion,
    }
}

#[derive(Debug, Clone)]
pub struct SelfTrainOutcome {
    /// Parameters from the round with the best validation accuracy.
    pub best: ParamSet,
    pub best_round: usize,
    /// Validation report after every round.
    pub reports: Vec<EvalReport>,
}

/// Round 0 fine-tunes the inherited classifier on labeled data only. Each
/// later round pseudo-labels the pool with the current model, merges, and
/// fine-tunes the current model on the merged set. The earliest round with
/// the highest validation accuracy wins.
pub fn self_train(
    pretrained: &ParamSet,
    spec: &NetworkSpec,
    labeled: &LabeledSet,
    unlabeled: Option<&Tensor>,
    val: &LabeledSet,
    cfg: &FinetuneConfig,
) -> Result<SelfTrainOutcome> {
    cfg.validate()?;
    let seed = cfg.seed();
    let rounds = Rng::new(seed);
    let round_cfg = |r: usize| FinetuneConfig {
        seed: Some(rounds.derive(r as u64).next_u64()),
        ..cfg.clone()
    };

    let initial = build_classifier(pretrained, spec, seed)?;
    let (mut params, _) = finetune(&initial, labeled, &round_cfg(0))?;
    let mut reports = vec![evaluate(&params, val)?];
    let mut best = (0, params.clone());

    for r in 1..cfg.rounds {
        let pseudo = match unlabeled {
            Some(pool) => generate_pseudo_labels(&params, pool, cfg.pseudo_k, cfg.min_confidence)?,
            None if cfg.pseudo_k == 0 => Vec::new(),
            None => return Err(Error::validation("pseudo_k > 0 but there is no unlabeled pool")),
        };
        let merged = merge_datasets(labeled, unlabeled, &pseudo)?;
        params = finetune(&params, &merged, &round_cfg(r))?.0;
        let report = evaluate(&params, val)?;
        if report.accuracy > reports[best.0].accuracy {
            best = (r, params.clone());
        }
        reports.push(report);
    }
    Ok(SelfTrainOutcome {
        best: best.1,
        best_round: best.0,
        reports,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_params;

    fn spec() -> NetworkSpec {
        NetworkSpec {
            input_dim: 4,
            encoder_dims: vec![6, 3],
            projector_dims: vec![3],
            predictor_dims: vec![3],
            num_classes: 2,
            head_input: HeadInput::Representation,
        }
    }

    fn toy_set(n: usize) -> LabeledSet {
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let c = i % 2;
            let base = if c == 0 { 0.2 } else { 0.8 };
            rows.extend((0..4).map(|j| base + 0.01 * ((i + j) % 5) as f64));
            labels.push(c);
        }
        LabeledSet::new(Tensor::new(vec![n, 2, 2, 1], rows).unwrap(), labels, 2).unwrap()
    }

    #[test]
    fn classifier_inherits_encoder_and_gets_head() {
        let pre = init_params(&spec(), 1).unwrap();
        let clf = build_classifier(&pre, &spec(), 9).unwrap();
        for (name, t) in pre.subset(&[Component::Encoder]).iter() {
            assert_eq!(clf.get(name).unwrap(), t);
        }
        assert!(!clf.has(Component::Predictor));
        assert!(!clf.has(Component::Projector));
        assert_eq!(clf.get("head.0.weight").unwrap().shape(), &[3, 2]);

        let other = build_classifier(&pre, &spec(), 10).unwrap();
        for (name, t) in clf.iter() {
            let same = other.get(name).unwrap() == t;
            // Head biases start at zero regardless of seed.
            assert_eq!(same, name != "head.0.weight", "{name}");
        }
    }

    #[test]
    fn projection_head_keeps_projector() {
        let s = NetworkSpec {
            head_input: HeadInput::Projection,
            ..spec()
        };
        let pre = init_params(&s, 1).unwrap();
        let clf = build_classifier(&pre, &s, 2).unwrap();
        assert_eq!(clf.get("projector.0.weight"), pre.get("projector.0.weight"));
        let logits = classifier_logits(&clf, &toy_set(3).images).unwrap();
        assert_eq!(logits.shape(), &[3, 2]);
    }

    #[test]
    fn mismatched_spec_is_a_contract_error() {
        let pre = init_params(&spec(), 1).unwrap();
        let wider = NetworkSpec {
            encoder_dims: vec![7, 3],
            ..spec()
        };
        assert!(matches!(build_classifier(&pre, &wider, 0), Err(Error::Contract(_))));
    }

    #[test]
    fn zero_epochs_leaves_params() {
        let clf = build_classifier(&init_params(&spec(), 1).unwrap(), &spec(), 2).unwrap();
        let cfg = FinetuneConfig {
            epochs: 0,
            ..Default::default()
        };
        let (out, trace) = finetune(&clf, &toy_set(4), &cfg).unwrap();
        assert_eq!(out, clf);
        assert!(trace.is_empty());
    }

    #[test]
    fn memorizes_a_single_example() {
        let big = NetworkSpec {
            encoder_dims: vec![32, 16],
            ..spec()
        };
        let clf = build_classifier(&init_params(&big, 3).unwrap(), &big, 4).unwrap();
        let one = toy_set(1);
        let cfg = FinetuneConfig {
            epochs: 300,
            eta: 0.1,
            ..Default::default()
        };
        let (_, trace) = finetune(&clf, &one, &cfg).unwrap();
        assert!(trace.losses().all(|l| l >= 0.0));
        assert!(trace.entries.last().unwrap().loss < 0.01);
    }

    #[test]
    fn pseudo_label_edge_cases() {
        let logits = Tensor::from_rows(&[vec![0.0, 2.0], vec![1.0, 1.0], vec![3.0, 0.0]]).unwrap();
        assert!(pseudo_labels_from_logits(&logits, 0, 0.0).unwrap().is_empty());
        assert!(matches!(
            pseudo_labels_from_logits(&logits, 4, 0.0),
            Err(Error::Validation(_))
        ));
        let all = pseudo_labels_from_logits(&logits, 3, 0.0).unwrap();
        assert_eq!(all.iter().map(|p| p.index).collect::<Vec<_>>(), vec![2, 0, 1]);
        assert_eq!(all[0].assigned_label, 0);
        assert_eq!(all[1].assigned_label, 1);
        // Tied logits pick the lower class.
        assert_eq!(all[2].assigned_label, 0);
        assert_eq!(all[2].confidence, 0.5);
    }

    #[test]
    fn forced_logits_match_sort_oracle() {
        let logits = Tensor::from_rows(&[vec![0.5, 0.1, 0.0], vec![4.0, 0.0, 0.0], vec![0.0, 0.0, 4.0]]).unwrap();
        // Oracle: rank every image by its max softmax probability.
        let probs = softmax_rows(&logits);
        let mut oracle: Vec<(usize, f64)> = (0..3)
            .map(|i| (i, probs.row(i).iter().copied().fold(f64::MIN, f64::max)))
            .collect();
        oracle.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        for k in 0..=3 {
            let got = pseudo_labels_from_logits(&logits, k, 0.0).unwrap();
            let idx: Vec<usize> = got.iter().map(|p| p.index).collect();
            let expected: Vec<usize> = oracle.iter().take(k).map(|o| o.0).collect();
            assert_eq!(idx, expected);
        }
    }

    #[test]
    fn confidence_floor_drops_uncertain() {
        let logits = Tensor::from_rows(&[vec![5.0, 0.0], vec![0.0, 0.0]]).unwrap();
        let kept = pseudo_labels_from_logits(&logits, 2, 0.9).unwrap();
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].index, 0);
    }

    #[test]
    fn merge_behaviour() {
        let labeled = toy_set(10);
        let pool = toy_set(6).images;
        assert_eq!(merge_datasets(&labeled, Some(&pool), &[]).unwrap(), labeled);
        let pseudo: Vec<PseudoExample> = [5, 0, 2, 3]
            .iter()
            .map(|&i| PseudoExample {
                index: i,
                assigned_label: 1,
                confidence: 0.9,
            })
            .collect();
        let merged = merge_datasets(&labeled, Some(&pool), &pseudo).unwrap();
        assert_eq!(merged.len(), 14);
        assert_eq!(&merged.labels[..10], &labeled.labels[..]);
        assert!(merged.labels[10..].iter().all(|&l| l == 1));
        assert_eq!(merged.images.row(10), pool.row(5));
        let dup = [pseudo[0], pseudo[0]];
        assert!(matches!(
            merge_datasets(&labeled, Some(&pool), &dup),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn evaluate_counts() {
        let labels = vec![0, 1, 2, 3, 0, 1, 2, 3];
        let constant = report_from_predictions(&labels, &[0; 8], 4);
        assert_eq!(constant.accuracy, 0.25);
        let perfect = report_from_predictions(&labels, &labels, 4);
        assert_eq!(perfect.accuracy, 1.0);
        for (i, row) in perfect.confusion.iter().enumerate() {
            for (j, &n) in row.iter().enumerate() {
                assert_eq!(n, if i == j { 2 } else { 0 });
            }
        }
    }

    #[test]
    fn evaluate_rejects_empty_and_reports_consistently() {
        let clf = build_classifier(&init_params(&spec(), 1).unwrap(), &spec(), 2).unwrap();
        let set = toy_set(9);
        let r = evaluate(&clf, &set).unwrap();
        let diag: u64 = (0..2).map(|c| r.confusion[c][c]).sum();
        assert!((r.accuracy - diag as f64 / r.total() as f64).abs() <= 1e-12);
        for (c, row) in r.confusion.iter().enumerate() {
            assert_eq!(row.iter().sum::<u64>() as usize, set.class_counts()[c]);
        }
    }

    #[test]
    fn single_round_without_pseudo_labels_is_plain_finetune() {
        let pre = init_params(&spec(), 5).unwrap();
        let cfg = FinetuneConfig {
            epochs: 5,
            rounds: 1,
            pseudo_k: 0,
            seed: Some(3),
            ..Default::default()
        };
        let labeled = toy_set(8);
        let val = toy_set(4);
        let out = self_train(&pre, &spec(), &labeled, None, &val, &cfg).unwrap();
        assert_eq!(out.best_round, 0);
        assert_eq!(out.reports.len(), 1);

        let clf = build_classifier(&pre, &spec(), 3).unwrap();
        let round0 = FinetuneConfig {
            seed: Some(Rng::new(3).derive(0).next_u64()),
            ..cfg
        };
        let (plain, _) = finetune(&clf, &labeled, &round0).unwrap();
        assert_eq!(out.best, plain);
    }

    #[test]
    fn best_round_has_max_validation_accuracy() {
        let pre = init_params(&spec(), 6).unwrap();
        let cfg = FinetuneConfig {
            epochs: 3,
            rounds: 4,
            pseudo_k: 4,
            seed: Some(1),
            ..Default::default()
        };
        let pool = toy_set(10).images;
        let out = self_train(&pre, &spec(), &toy_set(6), Some(&pool), &toy_set(5), &cfg).unwrap();
        let max = out.reports.iter().map(|r| r.accuracy).fold(0.0, f64::max);
        assert_eq!(out.reports[out.best_round].accuracy, max);
        assert!(out.reports[..out.best_round].iter().all(|r| r.accuracy < max));
        assert_eq!(evaluate(&out.best, &toy_set(5)).unwrap().accuracy, max);
    }
}
