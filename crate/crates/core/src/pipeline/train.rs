//! SGD training on class-weighted NLL, prediction, evaluation and four-fold
//! cross-validation.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::dataset::Dataset;
use super::{PipelineError, Result, RunConfig};
use crate::augment::{self, AugmentKind};
use crate::catalog::{self, Label};
use crate::evaluation::{self, ConfusionMatrix, CrossValidationSummary, PredictionRecord, SkillReport};
use crate::model::{self, Model};
use crate::tensor::{BackwardMode, Tape, Tensor};

/// Copies added per FL training sample.
pub const AUGMENT_KINDS: [AugmentKind; 3] = AugmentKind::ALL;

/// One entry of an epoch's training list: an original sample or an augmented copy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrainingItem {
    pub sample: usize,
    pub augment: Option<AugmentKind>,
}

/// Every training sample once, plus one copy per augmentation for each FL
/// sample when `augment` is set.
pub fn expand_training_set(train: &Dataset, augment: bool) -> Vec<TrainingItem> {
    let mut items = Vec::new();
    for (i, s) in train.samples.iter().enumerate() {
        items.push(TrainingItem { sample: i, augment: None });
        if augment && s.label == Label::Fl {
            items.extend(AUGMENT_KINDS.iter().map(|&k| TrainingItem { sample: i, augment: Some(k) }));
        }
    }
    items
}

fn item_seed(seed: u64, sample: usize) -> u64 {
    seed ^ (sample as u64).wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

fn load_item(ds: &Dataset, item: TrainingItem, seed: u64) -> Result<Tensor> {
    let img = ds.image(item.sample)?;
    match item.augment {
        None => Ok(img),
        Some(kind) => {
            // the rotation angle depends only on (seed, sample)
            let copies = augment::augment(&img, &[AugmentKind::Rotate], item_seed(seed, item.sample))?;
            Ok(match kind {
                AugmentKind::Vflip => augment::vflip(&img)?,
                AugmentKind::Hflip => augment::hflip(&img)?,
                AugmentKind::Rotate => copies.into_iter().next().expect("one copy"),
            })
        }
    }
}

fn stack(images: Vec<Tensor>) -> Result<Tensor> {
    let mut shape = vec![images.len()];
    shape.extend_from_slice(images[0].shape());
    let data = images.into_iter().flat_map(Tensor::into_data).collect();
    Ok(Tensor::new(shape, data)?)
}

fn confusion_from(labels: &[Label], probs: &[f64], threshold: f64) -> ConfusionMatrix {
    ConfusionMatrix::from_labels(
        labels.iter().zip(probs).map(|(&t, &p)| (t, if p >= threshold { Label::Fl } else { Label::Nf })),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub learning_rate: f64,
    /// Mean class-weighted loss over the epoch's batches.
    pub loss: f64,
    /// Online confusion over the augmented epoch, before each update.
    pub train: ConfusionMatrix,
    pub train_tss: Option<f64>,
    pub train_hss: Option<f64>,
    pub validation: Option<ConfusionMatrix>,
    pub val_tss: Option<f64>,
    pub val_hss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingHistory {
    pub config: RunConfig,
    /// Items per class after augmentation.
    pub class_counts: BTreeMap<Label, usize>,
    pub class_weights: BTreeMap<Label, f64>,
    pub epochs: Vec<EpochStats>,
}

/// Trains a freshly initialised model on `train`, scoring `validation` after
/// every epoch when given.
pub fn train(config: &RunConfig, train: &Dataset, validation: Option<&Dataset>) -> Result<(Model, TrainingHistory)> {
    config.validate()?;
    let spec = config.architecture()?;
    let mut model = Model::init(spec, config.init_scheme()?, config.seed)?;
    let items = expand_training_set(train, config.augment);
    let mut counts: BTreeMap<Label, usize> = Label::ALL.iter().map(|&l| (l, 0)).collect();
    for it in &items {
        *counts.entry(train.samples[it.sample].label).or_default() += 1;
    }
    if let Some((&label, _)) = counts.iter().find(|(_, &c)| c == 0) {
        return Err(PipelineError::EmptyClass(label));
    }
    let weights = if config.class_weighting {
        catalog::class_weights(&counts)?
    } else {
        Label::ALL.iter().map(|&l| (l, 1.0)).collect()
    };
    let weight_vec: Vec<f64> = Label::ALL.iter().map(|l| weights[l]).collect();
    let frozen: Vec<bool> = model.params().iter().map(|p| config.is_frozen(&p.name)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    let mut order = items.clone();
    let mut epochs = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        let lr = config.learning_rate_at(epoch);
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        let mut cm = ConfusionMatrix::default();
        for batch in order.chunks(config.batch_size) {
            let images: Vec<Tensor> =
                batch.par_iter().map(|&it| load_item(train, it, config.seed)).collect::<Result<_>>()?;
            let targets: Vec<usize> = batch.iter().map(|it| train.samples[it.sample].label.index()).collect();
            let mut tape = Tape::new();
            let x = tape.leaf(stack(images)?, false);
            let dup = tape.channel_duplicate(x, model.spec().input.channels)?;
            let pass = model.record(&mut tape, dup, true)?;
            let logp = tape.log_softmax(pass.logits)?;
            let loss = tape.nll_loss(logp, &targets, &weight_vec)?;
            let loss_value = tape.value(loss).data()[0];
            if !loss_value.is_finite() {
                return Err(PipelineError::Property(format!("non-finite loss at epoch {epoch}")));
            }
            let probs: Vec<f64> = model::softmax_rows(tape.value(pass.logits)).iter().map(|p| p[0]).collect();
            let labels: Vec<Label> = batch.iter().map(|it| train.samples[it.sample].label).collect();
            cm = cm.merge(&confusion_from(&labels, &probs, config.threshold));
            let mut grads = tape.backward(loss, None, BackwardMode::Standard)?;
            for (i, &var) in pass.params.iter().enumerate() {
                if frozen[i] {
                    continue;
                }
                let g = grads.take(var)?;
                let updated = model.params()[i].value.zip_map(&g, |w, g| w - lr * g)?;
                model.set_param(i, updated)?;
            }
            loss_sum += loss_value;
            batches += 1;
        }
        let val_cm = match validation {
            Some(v) if !v.is_empty() => {
                let probs = predict(&model, v, config.batch_size)?;
                let labels: Vec<Label> = v.samples.iter().map(|s| s.label).collect();
                Some(confusion_from(&labels, &probs, config.threshold))
            }
            _ => None,
        };
        let stats = EpochStats {
            epoch,
            learning_rate: lr,
            loss: loss_sum / batches as f64,
            train: cm,
            train_tss: evaluation::tss(&cm).ok(),
            train_hss: evaluation::hss(&cm).ok(),
            validation: val_cm,
            val_tss: val_cm.and_then(|c| evaluation::tss(&c).ok()),
            val_hss: val_cm.and_then(|c| evaluation::hss(&c).ok()),
        };
        log::info!(
            "epoch {epoch}: lr {lr:.2e} loss {:.4} train TSS {:?} val TSS {:?}",
            stats.loss,
            stats.train_tss,
            stats.val_tss
        );
        epochs.push(stats);
    }
    Ok((model, TrainingHistory { config: config.clone(), class_counts: counts, class_weights: weights, epochs }))
}

/// FL probability for every sample, in order.
pub fn predict(model: &Model, ds: &Dataset, batch: usize) -> Result<Vec<f64>> {
    let idx: Vec<usize> = (0..ds.len()).collect();
    let parts: Vec<Vec<f64>> = idx
        .par_chunks(batch.max(1))
        .map(|chunk| -> Result<Vec<f64>> {
            let images = chunk.iter().map(|&i| ds.image(i)).collect::<Result<Vec<_>>>()?;
            let out = model.forward_gray(&stack(images)?)?;
            Ok(model::softmax_rows(&out.logits).iter().map(|p| p[0]).collect())
        })
        .collect::<Result<_>>()?;
    Ok(parts.into_iter().flatten().collect())
}

pub fn prediction_records(ds: &Dataset, probs: &[f64], threshold: f64, fold: u8) -> Vec<PredictionRecord> {
    ds.samples
        .iter()
        .zip(probs)
        .map(|(s, &p)| PredictionRecord {
            timestamp: s.timestamp,
            true_label: s.label,
            predicted_label: if p >= threshold { Label::Fl } else { Label::Nf },
            fl_probability: p,
            event_class: s.event_class,
            hgs_latitude: s.hgs_latitude,
            hgs_longitude: s.hgs_longitude,
            fold,
        })
        .collect()
}

/// Prediction records and skill report for `ds`.
pub fn evaluate(
    model: &Model,
    ds: &Dataset,
    threshold: f64,
    fold: u8,
    batch: usize,
) -> Result<(Vec<PredictionRecord>, SkillReport)> {
    let probs = predict(model, ds, batch)?;
    let records = prediction_records(ds, &probs, threshold, fold);
    let report = SkillReport::from_records(&records, threshold)?;
    Ok((records, report))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FoldOutcome {
    pub fold: u8,
    pub train_size: usize,
    pub validation_size: usize,
    pub history: Option<TrainingHistory>,
    pub report: Option<SkillReport>,
    pub error: Option<String>,
    #[serde(skip)]
    pub records: Vec<PredictionRecord>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CrossValidation {
    pub config: RunConfig,
    pub folds: Vec<FoldOutcome>,
    pub summary: CrossValidationSummary,
}

/// Four folds: fold `i` validates on partition `i` and trains on the rest.
pub fn cross_validate(config: &RunConfig, ds: &Dataset) -> Result<CrossValidation> {
    let mut folds = Vec::with_capacity(4);
    for fold in 1..=4u8 {
        let (train_set, val_set) = ds.fold(fold);
        let mut outcome = FoldOutcome {
            fold,
            train_size: train_set.len(),
            validation_size: val_set.len(),
            history: None,
            report: None,
            error: None,
            records: Vec::new(),
        };
        let run = (|| -> Result<_> {
            if val_set.is_empty() {
                return Err(PipelineError::Data(format!("partition {fold} is empty")));
            }
            let cfg = RunConfig { validation_partition: fold, ..config.clone() };
            let (model, history) = train(&cfg, &train_set, None)?;
            let (records, report) = evaluate(&model, &val_set, cfg.threshold, fold, cfg.batch_size)?;
            Ok((history, records, report))
        })();
        match run {
            Ok((h, r, rep)) => {
                outcome.history = Some(h);
                outcome.records = r;
                outcome.report = Some(rep);
            }
            Err(e) => {
                log::warn!("fold {fold} failed: {e}");
                outcome.error = Some(e.to_string());
            }
        }
        folds.push(outcome);
    }
    let scored: Vec<(u8, ConfusionMatrix)> =
        folds.iter().filter_map(|f| f.report.as_ref().map(|r| (f.fold, r.confusion))).collect();
    if scored.is_empty() {
        return Err(PipelineError::Data("every fold failed".into()));
    }
    let summary = evaluation::cross_validation_summary(&scored)?;
    Ok(CrossValidation { config: config.clone(), folds, summary })
}
