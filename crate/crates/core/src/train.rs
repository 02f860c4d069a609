//! Batching and the training loop.
//!
//! [`fit`] owns the epoch loop, early stopping and best-weight restore; the
//! per-epoch work is delegated to an [`EpochRunner`]. [`SupervisedRunner`]
//! is the standard runner: seeded shuffled mini-batches, optional
//! augmentation, focal loss or BCE, RMSProp.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::early_stop::{Decision, EarlyStopConfig, EarlyStopState};
use crate::image::{augment, resize_bilinear, to_tensor, AugmentationConfig, ImageBuffer};
use crate::loss::{loss_on_tape, LossKind};
use crate::model::{is_positive, ForwardOptions, ModelGraph, ParamStore};
use crate::optim::{RmsPropConfig, RmsPropState};
use crate::rng::{epoch_order, purpose, stream, SeededRng};
use crate::tensor::stack;
use crate::{Error, Result, Tape, Tensor};

/// Indexed labelled images. Labels are class ids; binary tasks use
/// 0 = NORMAL, 1 = PNEUMONIA.
pub trait SampleSource {
    fn len(&self) -> usize;
    fn label(&self, index: usize) -> u8;
    fn image(&self, index: usize) -> Result<ImageBuffer>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Default)]
pub struct InMemorySource {
    pub images: Vec<ImageBuffer>,
    pub labels: Vec<u8>,
}

impl InMemorySource {
    pub fn push(&mut self, image: ImageBuffer, label: u8) {
        self.images.push(image);
        self.labels.push(label);
    }

    /// Subset by index.
    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            images: indices.iter().map(|&i| self.images[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

impl SampleSource for InMemorySource {
    fn len(&self) -> usize {
        self.images.len()
    }

    fn label(&self, index: usize) -> u8 {
        self.labels[index]
    }

    fn image(&self, index: usize) -> Result<ImageBuffer> {
        Ok(self.images[index].clone())
    }
}

/// Index subset of another source.
pub struct Subset<'a, S: ?Sized> {
    pub source: &'a S,
    pub indices: Vec<usize>,
}

impl<S: SampleSource + ?Sized> SampleSource for Subset<'_, S> {
    fn len(&self) -> usize {
        self.indices.len()
    }

    fn label(&self, index: usize) -> u8 {
        self.source.label(self.indices[index])
    }

    fn image(&self, index: usize) -> Result<ImageBuffer> {
        self.source.image(self.indices[index])
    }
}

/// Seeded split of `0..n` into `(train, validation)` index lists, with
/// `round(n * fraction)` validation samples (at least one when `n >= 2`).
pub fn split_indices(n: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut order: Vec<usize> = (0..n).collect();
    crate::rng::shuffle(&mut order, &mut stream(seed, purpose::SPLIT, 0));
    let mut k = libm::round(n as f64 * fraction) as usize;
    if n >= 2 && fraction > 0.0 {
        k = k.clamp(1, n - 1);
    }
    let val = order.split_off(n - k);
    let (mut train, mut val) = (order, val);
    train.sort_unstable();
    val.sort_unstable();
    (train, val)
}

/// Model input geometry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Preprocess {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Preprocess {
    pub fn for_model(model: &ModelGraph) -> Self {
        let [channels, height, width] = model.input_shape();
        Self {
            channels,
            height,
            width,
        }
    }

    /// Resize, optionally augment, then scale into a `[C, H, W]` tensor.
    pub fn apply(
        &self,
        img: &ImageBuffer,
        augmentation: Option<(&AugmentationConfig, &mut SeededRng)>,
    ) -> Result<Tensor<f32>> {
        let mut img = resize_bilinear(img, self.width, self.height)?;
        if let Some((cfg, rng)) = augmentation {
            img = augment(&img, cfg, rng);
        }
        to_tensor(&img, self.channels)
    }
}

/// Mini-batch index lists for one epoch; the last batch may be partial.
/// Passing `shuffle = Some((seed, epoch))` applies the seeded epoch order.
pub fn batch_indices(
    n: usize,
    batch_size: usize,
    shuffle: Option<(u64, usize)>,
) -> Vec<Vec<usize>> {
    let order: Vec<usize> = match shuffle {
        Some((seed, epoch)) => epoch_order(n, seed, epoch),
        None => (0..n).collect(),
    };
    order
        .chunks(batch_size.max(1))
        .map(<[usize]>::to_vec)
        .collect()
}

pub struct Batch {
    /// `[N, C, H, W]`.
    pub inputs: Tensor<f32>,
    pub labels: Vec<u8>,
    pub indices: Vec<usize>,
}

pub fn make_batch<S: SampleSource + ?Sized>(
    source: &S,
    indices: &[usize],
    prep: &Preprocess,
    mut augmentation: Option<(&AugmentationConfig, &mut SeededRng)>,
) -> Result<Batch> {
    let mut items = Vec::with_capacity(indices.len());
    let mut labels = Vec::with_capacity(indices.len());
    for &i in indices {
        let img = source.image(i)?;
        let aug = augmentation.as_mut().map(|(c, r)| (*c, &mut **r));
        items.push(prep.apply(&img, aug)?);
        labels.push(source.label(i));
    }
    Ok(Batch {
        inputs: stack(&items)?,
        labels,
        indices: indices.to_vec(),
    })
}

/// All batches of one epoch over a split. The train split is shuffled by
/// `(seed, epoch)`; evaluation splits keep their index order.
pub fn batches<'a, S: SampleSource + ?Sized>(
    source: &'a S,
    prep: Preprocess,
    batch_size: usize,
    shuffle: Option<(u64, usize)>,
    augmentation: Option<AugmentationConfig>,
) -> Result<impl Iterator<Item = Result<Batch>> + 'a> {
    if source.is_empty() {
        return Err(Error::Empty("split"));
    }
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch_size must be >= 1".into()));
    }
    let plan = batch_indices(source.len(), batch_size, shuffle);
    let (seed, epoch) = shuffle.unwrap_or((0, 0));
    let mut rng = stream(seed, purpose::AUGMENT, epoch as u64);
    Ok(plan.into_iter().map(move |idx| {
        let aug = augmentation.as_ref().map(|c| (c, &mut rng));
        make_batch(source, &idx, &prep, aug)
    }))
}

/// Per-element targets for a batch: the label itself for a single output,
/// a one-vs-rest encoding for `outputs > 1`.
fn targets(labels: &[u8], outputs: usize) -> Result<Vec<u8>> {
    if outputs == 1 {
        return Ok(labels.to_vec());
    }
    let mut t = Vec::with_capacity(labels.len() * outputs);
    for &l in labels {
        if l as usize >= outputs {
            return Err(Error::InvalidArgument(format!(
                "label {l} out of range for {outputs} outputs"
            )));
        }
        t.extend((0..outputs).map(|k| u8::from(k == l as usize)));
    }
    Ok(t)
}

/// Whether a row of outputs predicts `label`: threshold rule for a single
/// output, argmax otherwise.
pub fn prediction_correct(row: &[f32], label: u8, threshold: f32) -> bool {
    if row.len() == 1 {
        return is_positive(row[0], threshold) == (label == 1);
    }
    let mut best = 0;
    for (k, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = k;
        }
    }
    best == label as usize
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    pub seed: u64,
    pub loss: LossKind,
    pub optimizer: RmsPropConfig,
    /// `None` trains for `max_epochs`; best weights are restored either way.
    pub early_stop: Option<EarlyStopConfig>,
    pub augmentation: Option<AugmentationConfig>,
    /// Share of the training split held out for validation.
    pub validation_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            max_epochs: 100,
            seed: 0,
            loss: LossKind::default(),
            optimizer: RmsPropConfig::default(),
            early_stop: Some(EarlyStopConfig::default()),
            augmentation: Some(AugmentationConfig::default()),
            validation_fraction: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::InvalidArgument(
                "batch_size and max_epochs must be >= 1".into(),
            ));
        }
        if let LossKind::Focal(p) = &self.loss {
            p.validate()?;
        }
        if let Some(a) = &self.augmentation {
            a.validate()?;
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::InvalidArgument(
                "validation_fraction must be in [0, 1)".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
}

impl TrainHistory {
    /// Records without wall time, for determinism comparisons.
    pub fn without_timing(&self) -> Vec<EpochRecord> {
        self.records
            .iter()
            .map(|r| EpochRecord {
                wall_time_s: 0.0,
                ..*r
            })
            .collect()
    }
}

pub trait EpochRunner {
    /// Runs one training epoch (1-based `epoch`), returning training stats.
    fn train_epoch(&mut self, model: &mut ModelGraph, epoch: usize) -> Result<EpochStats>;
    fn validate(&mut self, model: &ModelGraph) -> Result<EpochStats>;
}

/// Hooks for the host: a clock and per-epoch persistence.
pub trait TrainObserver {
    fn elapsed_seconds(&mut self) -> f64 {
        0.0
    }

    fn on_epoch_end(
        &mut self,
        _record: &EpochRecord,
        _model: &ModelGraph,
        _improved: bool,
    ) -> Result<()> {
        Ok(())
    }
}

pub struct NoObserver;

impl TrainObserver for NoObserver {}

#[derive(Debug, Clone, PartialEq)]
pub struct FitOutcome {
    pub history: TrainHistory,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stopped_early: bool,
}

/// Epoch loop with early stopping on the validation loss. On return the
/// model holds the weights of the best validation epoch.
pub fn fit<R: EpochRunner + ?Sized, O: TrainObserver + ?Sized>(
    model: &mut ModelGraph,
    runner: &mut R,
    max_epochs: usize,
    early_stop: Option<EarlyStopConfig>,
    observer: &mut O,
) -> Result<FitOutcome> {
    if max_epochs == 0 {
        return Err(Error::InvalidArgument("max_epochs must be >= 1".into()));
    }
    let mut stopper = EarlyStopState::new(early_stop.unwrap_or(EarlyStopConfig {
        patience: usize::MAX,
        min_delta: 0.0,
    }));
    let mut best: Option<ParamStore> = None;
    let mut history = TrainHistory::default();
    let mut stopped_early = false;
    for epoch in 1..=max_epochs {
        let start = observer.elapsed_seconds();
        let train = runner.train_epoch(model, epoch)?;
        if !train.loss.is_finite() {
            return Err(Error::Diverged { epoch });
        }
        let val = runner.validate(model)?;
        if !val.loss.is_finite() {
            return Err(Error::Diverged { epoch });
        }
        let record = EpochRecord {
            epoch,
            train_loss: train.loss,
            train_acc: train.accuracy,
            val_loss: val.loss,
            val_acc: val.accuracy,
            wall_time_s: observer.elapsed_seconds() - start,
        };
        history.records.push(record);
        let decision = stopper.update(val.loss);
        let improved = matches!(decision, Decision::Continue { improved: true });
        if improved {
            best = Some(model.params().clone());
        }
        observer.on_epoch_end(&record, model, improved)?;
        if let Decision::Stop { .. } = decision {
            stopped_early = true;
            break;
        }
    }
    if let Some(best) = best {
        *model.params_mut() = best;
    }
    Ok(FitOutcome {
        history,
        best_epoch: stopper.best_epoch,
        best_val_loss: stopper.best_loss,
        stopped_early,
    })
}

/// Eval-mode predictions, mean loss and accuracy over a whole split.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    /// One row of sigmoid outputs per sample, in split order.
    pub outputs: Vec<Vec<f32>>,
    pub labels: Vec<u8>,
    pub loss: f64,
    pub accuracy: f64,
}

impl Evaluation {
    /// Positive-class scores for a binary model.
    pub fn scores(&self) -> Vec<f64> {
        self.outputs.iter().map(|r| r[0] as f64).collect()
    }
}

pub fn evaluate<S: SampleSource + ?Sized>(
    model: &ModelGraph,
    source: &S,
    batch_size: usize,
    loss: &LossKind,
) -> Result<Evaluation> {
    let prep = Preprocess::for_model(model);
    let plan =
        batches(source, prep, batch_size, None, None)?.map(|b| b.map(|b| (b.inputs, b.labels)));
    evaluate_inputs(model, plan, 0, loss)
}

/// Eval-mode pass over prepared batches `(inputs, labels)`; `inputs` are the
/// outputs of layer `start - 1` (raw images for `start = 0`).
fn evaluate_inputs<I>(
    model: &ModelGraph,
    plan: I,
    start: usize,
    loss: &LossKind,
) -> Result<Evaluation>
where
    I: Iterator<Item = Result<(Tensor<f32>, Vec<u8>)>>,
{
    let threshold = model.threshold();
    let mut out = Evaluation {
        outputs: Vec::new(),
        labels: Vec::new(),
        loss: 0.0,
        accuracy: 0.0,
    };
    let mut loss_sum = 0.0;
    let mut correct = 0usize;
    let mut rng = stream(0, 0, 0);
    for batch in plan {
        let (inputs, labels) = batch?;
        let mut tape = Tape::new();
        let x = tape.constant(inputs);
        let pass = if start == 0 {
            model.forward(&mut tape, x, ForwardOptions::eval(), &mut rng)?
        } else {
            model.forward_from(&mut tape, x, start, ForwardOptions::eval(), &mut rng)?
        };
        let k = tape.shape(pass.probs)[1];
        let t = targets(&labels, k)?;
        let l = loss_on_tape(&mut tape, loss, pass.probs, &t)?;
        loss_sum += tape.value(l).data()[0] as f64 * labels.len() as f64;
        for (row, &label) in tape.value(pass.probs).data().chunks(k).zip(&labels) {
            correct += usize::from(prediction_correct(row, label, threshold));
            out.outputs.push(row.to_vec());
            out.labels.push(label);
        }
    }
    if out.labels.is_empty() {
        return Err(Error::Empty("split"));
    }
    let n = out.labels.len() as f64;
    out.loss = loss_sum / n;
    out.accuracy = correct as f64 / n;
    Ok(out)
}

/// Per-sample outputs of a model's frozen prefix (see
/// [`ModelGraph::frozen_prefix`]). Only valid while the backbone stays frozen
/// and inputs are not augmented.
#[derive(Debug, Clone)]
pub struct FeatureCache {
    /// First layer run on top of the cached rows.
    pub start: usize,
    pub rows: Vec<Tensor<f32>>,
    pub labels: Vec<u8>,
}

impl FeatureCache {
    pub fn build<S: SampleSource + ?Sized>(
        model: &ModelGraph,
        source: &S,
        batch_size: usize,
    ) -> Result<Self> {
        let start = model
            .frozen_prefix()
            .ok_or_else(|| Error::InvalidArgument("backbone is not frozen".into()))?;
        let prep = Preprocess::for_model(model);
        let mut rows = Vec::with_capacity(source.len());
        let mut labels = Vec::with_capacity(source.len());
        for batch in batches(source, prep, batch_size, None, None)? {
            let batch = batch?;
            let out = model.forward_prefix(&batch.inputs, start)?;
            let per = out.len() / batch.labels.len();
            let shape = &out.shape()[1..];
            for chunk in out.data().chunks(per) {
                rows.push(Tensor::from_vec(shape, chunk.to_vec())?);
            }
            labels.extend(batch.labels);
        }
        Ok(Self {
            start,
            rows,
            labels,
        })
    }

    fn batch(&self, indices: &[usize]) -> Result<(Tensor<f32>, Vec<u8>)> {
        let items: Vec<Tensor<f32>> = indices.iter().map(|&i| self.rows[i].clone()).collect();
        Ok((
            stack(&items)?,
            indices.iter().map(|&i| self.labels[i]).collect(),
        ))
    }
}

/// Input rows and labels, either cached backbone outputs or images.
type BatchIter<'a> = alloc::boxed::Box<dyn Iterator<Item = Result<(Tensor<f32>, Vec<u8>)>> + 'a>;

/// Standard supervised runner over in-memory or on-disk samples.
///
/// With a frozen backbone and no augmentation the backbone output of every
/// sample is computed once and reused across epochs; the results are the
/// same as running the full network each step.
pub struct SupervisedRunner<'a, S: ?Sized, V: ?Sized> {
    pub train: &'a S,
    pub val: &'a V,
    pub config: TrainConfig,
    optimizer: RmsPropState,
    cache: Option<(FeatureCache, FeatureCache)>,
    use_cache: bool,
}

impl<'a, S: SampleSource + ?Sized, V: SampleSource + ?Sized> SupervisedRunner<'a, S, V> {
    pub fn new(train: &'a S, val: &'a V, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if train.is_empty() {
            return Err(Error::Empty("training split"));
        }
        if val.is_empty() {
            return Err(Error::Empty("validation split"));
        }
        Ok(Self {
            train,
            val,
            optimizer: RmsPropState::new(config.optimizer),
            config,
            cache: None,
            use_cache: true,
        })
    }

    /// Always run the full network (mainly for tests of the cache itself).
    pub fn without_cache(mut self) -> Self {
        self.use_cache = false;
        self
    }

    fn ensure_cache(&mut self, model: &ModelGraph) -> Result<()> {
        if self.cache.is_none()
            && self.use_cache
            && self.config.augmentation.is_none()
            && model.frozen_prefix().is_some()
        {
            let bs = self.config.batch_size;
            self.cache = Some((
                FeatureCache::build(model, self.train, bs)?,
                FeatureCache::build(model, self.val, bs)?,
            ));
        }
        Ok(())
    }
}

impl<S: SampleSource + ?Sized, V: SampleSource + ?Sized> EpochRunner
    for SupervisedRunner<'_, S, V>
{
    fn train_epoch(&mut self, model: &mut ModelGraph, epoch: usize) -> Result<EpochStats> {
        self.ensure_cache(model)?;
        let cfg = self.config;
        let threshold = model.threshold();
        let mut dropout_rng = stream(cfg.seed, purpose::DROPOUT, epoch as u64);
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        let mut seen = 0usize;
        let shuffle = Some((cfg.seed, epoch));
        let (start, plan): (usize, BatchIter<'_>) = match &self.cache {
            Some((train, _)) => {
                let idx = batch_indices(train.rows.len(), cfg.batch_size, shuffle);
                (
                    train.start,
                    alloc::boxed::Box::new(idx.into_iter().map(move |i| train.batch(&i))),
                )
            }
            None => {
                let prep = Preprocess::for_model(model);
                let it = batches(self.train, prep, cfg.batch_size, shuffle, cfg.augmentation)?;
                (
                    0,
                    alloc::boxed::Box::new(it.map(|b| b.map(|b| (b.inputs, b.labels)))),
                )
            }
        };
        for batch in plan {
            let (inputs, labels) = batch?;
            let mut tape = Tape::new();
            let x = tape.constant(inputs);
            let pass = if start == 0 {
                model.forward(&mut tape, x, ForwardOptions::train(), &mut dropout_rng)?
            } else {
                model.forward_from(
                    &mut tape,
                    x,
                    start,
                    ForwardOptions::train(),
                    &mut dropout_rng,
                )?
            };
            let k = tape.shape(pass.probs)[1];
            let t = targets(&labels, k)?;
            let loss = loss_on_tape(&mut tape, &cfg.loss, pass.probs, &t)?;
            let loss_value = tape.value(loss).data()[0] as f64;
            if !loss_value.is_finite() {
                return Err(Error::Diverged { epoch });
            }
            for (row, &label) in tape.value(pass.probs).data().chunks(k).zip(&labels) {
                correct += usize::from(prediction_correct(row, label, threshold));
            }
            let n = labels.len();
            loss_sum += loss_value * n as f64;
            seen += n;

            let grads = tape.backward(loss)?;
            let mut by_param = BTreeMap::new();
            for (i, v) in pass.bindings.iter() {
                if model.params().by_index(i).trainable {
                    if let Some(g) = grads.get(v) {
                        by_param.insert(i, g.clone());
                    }
                }
            }
            self.optimizer.step(model, &by_param)?;
            model.apply_batch_stats(&pass.batch_stats)?;
        }
        Ok(EpochStats {
            loss: loss_sum / seen as f64,
            accuracy: correct as f64 / seen as f64,
        })
    }

    fn validate(&mut self, model: &ModelGraph) -> Result<EpochStats> {
        let e = match &self.cache {
            Some((_, val)) => {
                let idx = batch_indices(val.rows.len(), self.config.batch_size, None);
                evaluate_inputs(
                    model,
                    idx.iter().map(|i| val.batch(i)),
                    val.start,
                    &self.config.loss,
                )?
            }
            None => evaluate(model, self.val, self.config.batch_size, &self.config.loss)?,
        };
        Ok(EpochStats {
            loss: e.loss,
            accuracy: e.accuracy,
        })
    }
}

/// Trains `model` on `train`, validating on `val` every epoch.
pub fn train<S, V, O>(
    model: &mut ModelGraph,
    train: &S,
    val: &V,
    config: TrainConfig,
    observer: &mut O,
) -> Result<FitOutcome>
where
    S: SampleSource + ?Sized,
    V: SampleSource + ?Sized,
    O: TrainObserver + ?Sized,
{
    let mut runner = SupervisedRunner::new(train, val, config)?;
    fit(
        model,
        &mut runner,
        config.max_epochs,
        config.early_stop,
        observer,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn partial_and_exact_batch_counts() {
        let b = batch_indices(10, 16, None);
        assert_eq!(b.len(), 1);
        assert_eq!(b[0].len(), 10);
        assert_eq!(batch_indices(5216, 16, Some((1, 0))).len(), 326);
    }

    #[test]
    fn epoch_batches_cover_split_once() {
        let b = batch_indices(37, 5, Some((9, 2)));
        let mut all: Vec<usize> = b.concat();
        all.sort_unstable();
        assert_eq!(all, (0..37).collect::<Vec<_>>());
        assert_eq!(b, batch_indices(37, 5, Some((9, 2))));
    }

    #[test]
    fn split_is_disjoint_and_sized() {
        let (t, v) = split_indices(100, 0.1, 3);
        assert_eq!(v.len(), 10);
        assert_eq!(t.len(), 90);
        assert!(v.iter().all(|i| !t.contains(i)));
    }

    #[test]
    fn one_vs_rest_targets() {
        assert_eq!(targets(&[2, 0], 3).unwrap(), vec![0, 0, 1, 1, 0, 0]);
        assert!(targets(&[3], 3).is_err());
        assert_eq!(targets(&[1, 0], 1).unwrap(), vec![1, 0]);
    }

    #[test]
    fn empty_sources_are_rejected() {
        let empty = InMemorySource::default();
        let prep = Preprocess {
            channels: 1,
            height: 4,
            width: 4,
        };
        assert!(batches(&empty, prep, 4, None, None).is_err());
    }

    fn toy_source(n: usize, seed: u64) -> InMemorySource {
        let mut rng = stream(seed, 0, 0);
        let mut src = InMemorySource::default();
        for i in 0..n {
            let label = (i % 2) as u8;
            let px = (0..32 * 32)
                .map(|_| (crate::rng::unit_f64(&mut rng) * 100.0) as u8 + 100 * label)
                .collect();
            src.push(ImageBuffer::gray(32, 32, px).unwrap(), label);
        }
        src
    }

    #[test]
    fn feature_cache_matches_full_forward() {
        let cfg = crate::model::ModelConfig {
            input_shape: [1, 32, 32],
            ..Default::default()
        };
        let (train, val) = (toy_source(12, 1), toy_source(6, 2));
        let tc = TrainConfig {
            batch_size: 4,
            max_epochs: 2,
            augmentation: None,
            early_stop: None,
            ..Default::default()
        };
        let mut runs = Vec::new();
        for cached in [true, false] {
            let mut model = ModelGraph::build(&cfg, 5).unwrap();
            model.freeze_backbone();
            let mut runner = SupervisedRunner::new(&train, &val, tc).unwrap();
            if !cached {
                runner = runner.without_cache();
            }
            let out = fit(&mut model, &mut runner, 2, None, &mut NoObserver).unwrap();
            assert_eq!(runner.cache.is_some(), cached);
            runs.push((out.history.without_timing(), model.params().clone()));
        }
        assert_eq!(runs[0], runs[1]);
    }
}
