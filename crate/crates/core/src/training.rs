//! Training loop, evaluation metrics and TTA parameter sweeps.
//!
//! Each step computes ground-truth-sign CAMs for the batch, builds one
//! SnapMix virtual sample per image (partner: the next image in the batch),
//! and minimizes `mixed BCE + CPE`, averaged over the batch, with SGD and
//! momentum. Per-sample work runs in parallel; gradients are reduced in
//! sample order so results do not depend on the thread count.

use std::f64::consts::PI;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::cam::{compute_cam, signed_cam, ClassSign, Heatmap};
use crate::cpe::{cpe_loss_on_map, select_cells};
use crate::data::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::snapmix::{mixed_bce_var, snapmix, VirtualSample};
use crate::tensor::{bce_with_logit, Tensor};
use crate::tta::{make_masked_images, rank_patches, vote, TtaConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    /// Beta(α, α) parameter for the SnapMix draws.
    pub alpha: f64,
    pub cpe_enabled: bool,
    pub snapmix_enabled: bool,
    pub seed: u64,
    /// Rescales the batch gradient to at most this global L2 norm.
    #[serde(default = "default_grad_clip")]
    pub grad_clip: Option<f64>,
    #[serde(default)]
    pub eval_tta: Option<TtaConfig>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 4,
            learning_rate: 0.01,
            momentum: 0.9,
            alpha: 1.0,
            cpe_enabled: true,
            snapmix_enabled: true,
            seed: 0,
            grad_clip: default_grad_clip(),
            eval_tta: None,
        }
    }
}

fn default_grad_clip() -> Option<f64> {
    Some(1.0)
}

impl TrainConfig {
    /// Plain BCE training with both contributions disabled.
    pub fn baseline() -> Self {
        Self { cpe_enabled: false, snapmix_enabled: false, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate {} must be positive", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("alpha {} must be positive", self.alpha)));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0 && c.is_finite()) {
                return Err(Error::Config(format!("grad_clip {c} must be positive")));
            }
        }
        Ok(())
    }

    /// Cosine-decayed rate for `epoch` (0-based).
    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        0.5 * self.learning_rate * (1.0 + (PI * epoch as f64 / self.epochs as f64).cos())
    }
}

/// Confusion counts and the derived scores. Undefined ratios are 0 and set
/// `degenerate`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Metrics {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub degenerate: bool,
}

impl Metrics {
    pub fn from_counts(tp: usize, fp: usize, tn: usize, fn_: usize) -> Self {
        let mut degenerate = false;
        let mut ratio = |num: f64, den: f64| {
            if den == 0.0 {
                degenerate = true;
                0.0
            } else {
                num / den
            }
        };
        let accuracy = ratio((tp + tn) as f64, (tp + fp + tn + fn_) as f64);
        let precision = ratio(tp as f64, (tp + fp) as f64);
        let recall = ratio(tp as f64, (tp + fn_) as f64);
        let f1 = ratio(2.0 * precision * recall, precision + recall);
        Self { tp, fp, tn, fn_, accuracy, precision, recall, f1, degenerate }
    }

    pub fn from_predictions(labels: &[u8], predicted: &[u8]) -> Self {
        let (mut tp, mut fp, mut tn, mut fn_) = (0, 0, 0, 0);
        for (&y, &p) in labels.iter().zip(predicted) {
            match (y, p) {
                (1, 1) => tp += 1,
                (0, 1) => fp += 1,
                (0, 0) => tn += 1,
                _ => fn_ += 1,
            }
        }
        Self::from_counts(tp, fp, tn, fn_)
    }
}

/// SGD with classical momentum: `v ← μ v + g`, `θ ← θ − η v`.
#[derive(Debug, Clone)]
pub struct Sgd {
    momentum: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(model: &Model, momentum: f64) -> Self {
        Self { momentum, velocity: model.params().iter().map(|p| vec![0.0; p.value.len()]).collect() }
    }

    pub fn step(&mut self, model: &mut Model, grads: &[Vec<f64>], lr: f64) -> Result<()> {
        let mut values = Vec::with_capacity(grads.len());
        for ((p, g), v) in model.params().iter().zip(grads).zip(&mut self.velocity) {
            let data = p
                .value
                .data()
                .iter()
                .zip(g)
                .zip(v.iter_mut())
                .map(|((&w, &g), v)| {
                    *v = self.momentum * *v + g;
                    w - lr * *v
                })
                .collect();
            values.push(Tensor::new(p.value.shape().to_vec(), data).map_err(|_| {
                Error::Training(format!("parameter {} became non-finite", p.name))
            })?);
        }
        model.set_param_values(values)
    }
}

/// Loss and per-parameter gradients for one (possibly mixed) sample.
fn sample_objective(model: &Model, sample: &VirtualSample, cpe: bool) -> Result<(f64, Vec<Vec<f64>>)> {
    let tape = Tape::new();
    let fwd = model.forward_on_tape(&tape, &sample.image, true)?;
    let mut loss = mixed_bce_var(fwd.logit, sample)?;
    if cpe {
        let cfg = model.config();
        let features = fwd.feature_map.value().reshape(&[cfg.channels, cfg.grid_size, cfg.grid_size])?;
        let signed = signed_cam(&features, model.head_weights())?;
        let sign = sample.dominant_sign();
        let scores = signed.map(|v| (sign.value() * v).max(0.0))?;
        let cells = select_cells(&scores)?;
        loss = loss.add(cpe_loss_on_map(fwd.feature_map, &cells)?)?;
    }
    let grads = tape.backward(loss)?;
    Ok((loss.item(), fwd.params.iter().map(|&p| grads.wrt(p).into_data()).collect()))
}

/// Default [`SampleBuilder`]: SnapMix with the next sample in the batch, or
/// the unmixed image when SnapMix is disabled.
pub fn virtual_sample(
    batch: &[&Sample],
    heats: &[Heatmap],
    i: usize,
    config: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<VirtualSample> {
    let a = batch[i];
    if !config.snapmix_enabled {
        return Ok(VirtualSample::unmixed(a.image.clone(), a.label));
    }
    let j = (i + 1) % batch.len();
    let b = batch[j];
    snapmix(&a.image, a.label, &b.image, b.label, &heats[i], &heats[j], rng, config.alpha)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    /// Mean per-sample objective over the batch.
    pub loss: f64,
    pub mixed_samples: usize,
}

/// Scales every gradient by `max_norm / ‖g‖` when the global norm exceeds
/// `max_norm`.
pub fn clip_global_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= scale);
    }
    norm
}

fn sample_rng(step_seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(step_seed);
    rng.set_stream(index as u64);
    rng
}

/// One optimizer step on `batch`. `rng` supplies a single seed from which
/// per-sample streams are derived.
pub fn train_step<R: Rng + ?Sized>(
    model: &mut Model,
    optimizer: &mut Sgd,
    batch: &[&Sample],
    config: &TrainConfig,
    lr: f64,
    rng: &mut R,
) -> Result<StepReport> {
    train_step_with(model, optimizer, batch, config, lr, rng, virtual_sample)
}

/// Produces the training sample for batch position `i` from the batch, its
/// ground-truth-sign heatmaps (empty when SnapMix is off) and a per-sample RNG.
pub type SampleBuilder = fn(&[&Sample], &[Heatmap], usize, &TrainConfig, &mut ChaCha8Rng) -> Result<VirtualSample>;

/// [`train_step`] with a custom virtual-sample builder.
pub fn train_step_with<R: Rng + ?Sized>(
    model: &mut Model,
    optimizer: &mut Sgd,
    batch: &[&Sample],
    config: &TrainConfig,
    lr: f64,
    rng: &mut R,
    build: SampleBuilder,
) -> Result<StepReport> {
    if batch.is_empty() {
        return Err(Error::contract("empty batch"));
    }
    let step_seed: u64 = rng.gen();
    let heats = if config.snapmix_enabled {
        batch
            .par_iter()
            .map(|s| compute_cam(model, &s.image, ClassSign::from_label(s.label)))
            .collect::<Result<Vec<_>>>()?
    } else {
        Vec::new()
    };
    let frozen: &Model = model;
    let per_sample = (0..batch.len())
        .into_par_iter()
        .map(|i| {
            let vs = build(batch, &heats, i, config, &mut sample_rng(step_seed, i))?;
            let mixed = vs.is_mixed();
            sample_objective(frozen, &vs, config.cpe_enabled).map(|(l, g)| (l, g, mixed))
        })
        .collect::<Vec<Result<_>>>();

    let n = batch.len() as f64;
    let mut total = 0.0;
    let mut mixed_samples = 0;
    let mut grads: Vec<Vec<f64>> = model.params().iter().map(|p| vec![0.0; p.value.len()]).collect();
    for (i, r) in per_sample.into_iter().enumerate() {
        let (loss, g, mixed) = r.map_err(|e| Error::Training(format!("sample {i} of batch: {e}")))?;
        if !loss.is_finite() {
            return Err(Error::Training(format!("non-finite loss on sample {i}")));
        }
        total += loss;
        mixed_samples += usize::from(mixed);
        for (acc, gi) in grads.iter_mut().zip(g) {
            acc.iter_mut().zip(gi).for_each(|(a, b)| *a += b);
        }
    }
    grads.iter_mut().flatten().for_each(|g| *g /= n);
    if let Some(max_norm) = config.grad_clip {
        clip_global_norm(&mut grads, max_norm);
    }
    optimizer.step(model, &grads, lr)?;
    Ok(StepReport { loss: total / n, mixed_samples })
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl EpochLog {
    fn new(epoch: usize, split: &str, loss: f64, m: &Metrics) -> Self {
        Self {
            epoch,
            split: split.to_string(),
            loss,
            accuracy: m.accuracy,
            precision: m.precision,
            recall: m.recall,
            f1: m.f1,
        }
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("log line serializes")
    }
}

/// Trains `model` for `config.epochs` epochs. After each epoch `on_epoch`
/// receives a `train` line and, when `test` is given, a `test` line.
pub fn train(
    model: &mut Model,
    train_set: &Dataset,
    test: Option<&Dataset>,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<Vec<EpochLog>> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::contract("empty training set"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut optimizer = Sgd::new(model, config.momentum);
    let mut logs = Vec::new();
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let lr = config.learning_rate_at(epoch);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &train_set.samples[i]).collect();
            let report = train_step(model, &mut optimizer, &batch, config, lr, &mut rng)
                .map_err(|e| Error::Training(format!("epoch {epoch}: {e}")))?;
            loss_sum += report.loss * batch.len() as f64;
        }
        let train_metrics = evaluate(model, train_set, None)?;
        let line = EpochLog::new(epoch, "train", loss_sum / train_set.len() as f64, &train_metrics);
        on_epoch(&line);
        logs.push(line);
        if let Some(test) = test {
            let metrics = evaluate(model, test, config.eval_tta.as_ref())?;
            let line = EpochLog::new(epoch, "test", mean_bce(model, test)?, &metrics);
            on_epoch(&line);
            logs.push(line);
        }
    }
    Ok(logs)
}

/// Mean plain BCE of `model` over `dataset`.
pub fn mean_bce(model: &Model, dataset: &Dataset) -> Result<f64> {
    let losses = dataset
        .samples
        .par_iter()
        .map(|s| model.forward(&s.image).and_then(|r| bce_with_logit(r.logit, f64::from(s.label))))
        .collect::<Result<Vec<f64>>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len().max(1) as f64)
}

/// Original probability plus the probabilities of the first `k` cumulatively
/// masked images.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedScores {
    pub label: u8,
    pub original_prob: f64,
    pub masked_probs: Vec<f64>,
}

/// Scores for every sample with `k` masked images each. Prefixes of the
/// result are exactly the scores for smaller `k`.
pub fn masked_scores(model: &Model, dataset: &Dataset, k: usize, tta: &TtaConfig) -> Result<Vec<MaskedScores>> {
    let cfg = TtaConfig { k, ..tta.clone() };
    cfg.validate(model.config().input_size)?;
    dataset
        .samples
        .par_iter()
        .map(|s| {
            let original_prob = model.forward(&s.image)?.prob;
            let heat = compute_cam(model, &s.image, ClassSign::from_prob(original_prob))?;
            let ranked = rank_patches(&heat, cfg.mask_patch_px)?;
            let masked = make_masked_images(&s.image, &ranked, k, cfg.mask_patch_px, cfg.mask_fill)?;
            let masked_probs = masked
                .iter()
                .map(|m| model.forward(m).map(|r| r.prob))
                .collect::<Result<Vec<_>>>()?;
            Ok(MaskedScores { label: s.label, original_prob, masked_probs })
        })
        .collect()
}

/// Per-sample outcome of [`predict`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub label: u8,
    pub prob: f64,
    pub predicted: u8,
    pub flipped: bool,
}

/// Predictions with or without masked voting.
pub fn predict(model: &Model, dataset: &Dataset, tta: Option<&TtaConfig>) -> Result<Vec<Prediction>> {
    match tta {
        None => dataset
            .samples
            .par_iter()
            .map(|s| {
                let prob = model.forward(&s.image)?.prob;
                Ok(Prediction { label: s.label, prob, predicted: u8::from(prob > 0.5), flipped: false })
            })
            .collect(),
        Some(cfg) => Ok(masked_scores(model, dataset, cfg.k, cfg)?
            .iter()
            .map(|m| {
                let r = vote(m.original_prob, &m.masked_probs, cfg.theta);
                Prediction { label: m.label, prob: m.original_prob, predicted: r.final_label, flipped: r.flipped }
            })
            .collect()),
    }
}

/// Labels are `prob > 0.5` without `tta`, the voted label with it.
pub fn evaluate(model: &Model, dataset: &Dataset, tta: Option<&TtaConfig>) -> Result<Metrics> {
    if dataset.is_empty() {
        return Err(Error::contract("cannot evaluate on an empty dataset"));
    }
    let preds = predict(model, dataset, tta)?;
    Ok(metrics_of(&preds))
}

fn metrics_of(preds: &[Prediction]) -> Metrics {
    let labels: Vec<u8> = preds.iter().map(|p| p.label).collect();
    let predicted: Vec<u8> = preds.iter().map(|p| p.predicted).collect();
    Metrics::from_predictions(&labels, &predicted)
}

/// One sweep grid point; `param` is `baseline` for the no-voting row.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub param: String,
    pub metrics: Metrics,
}

fn voted_metrics(scores: &[MaskedScores], k: usize, theta: f64) -> Metrics {
    let labels: Vec<u8> = scores.iter().map(|s| s.label).collect();
    let predicted: Vec<u8> = scores
        .iter()
        .map(|s| vote(s.original_prob, &s.masked_probs[..k], theta).final_label)
        .collect();
    Metrics::from_predictions(&labels, &predicted)
}

fn baseline_row(scores: &[MaskedScores]) -> SweepRow {
    let labels: Vec<u8> = scores.iter().map(|s| s.label).collect();
    let predicted: Vec<u8> = scores.iter().map(|s| u8::from(s.original_prob > 0.5)).collect();
    SweepRow { param: "baseline".into(), metrics: Metrics::from_predictions(&labels, &predicted) }
}

/// Voting metrics for each `k` at fixed `theta`, after a baseline row.
pub fn sweep_k(model: &Model, dataset: &Dataset, k_values: &[usize], theta: f64, tta: &TtaConfig) -> Result<Vec<SweepRow>> {
    let k_max = k_values.iter().copied().max().ok_or_else(|| Error::contract("empty k sweep"))?;
    for &k in k_values {
        TtaConfig { k, theta, ..tta.clone() }.validate(model.config().input_size)?;
    }
    let scores = masked_scores(model, dataset, k_max, tta)?;
    let mut rows = vec![baseline_row(&scores)];
    rows.extend(k_values.iter().map(|&k| SweepRow { param: k.to_string(), metrics: voted_metrics(&scores, k, theta) }));
    Ok(rows)
}

/// Voting metrics for each `theta` at fixed `k`, after a baseline row.
pub fn sweep_theta(model: &Model, dataset: &Dataset, k: usize, theta_values: &[f64], tta: &TtaConfig) -> Result<Vec<SweepRow>> {
    if theta_values.is_empty() {
        return Err(Error::contract("empty theta sweep"));
    }
    for &theta in theta_values {
        TtaConfig { k, theta, ..tta.clone() }.validate(model.config().input_size)?;
    }
    let scores = masked_scores(model, dataset, k, tta)?;
    let mut rows = vec![baseline_row(&scores)];
    rows.extend(
        theta_values
            .iter()
            .map(|&theta| SweepRow { param: theta.to_string(), metrics: voted_metrics(&scores, k, theta) }),
    );
    Ok(rows)
}

pub const SWEEP_CSV_HEADER: &str = "param,accuracy,precision,recall,f1";

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from(SWEEP_CSV_HEADER);
    out.push('\n');
    for r in rows {
        let m = &r.metrics;
        let _ = writeln!(out, "{},{},{},{},{}", r.param, m.accuracy, m.precision, m.recall, m.f1);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn metric_formulas() {
        let m = Metrics::from_counts(93, 1, 98, 8);
        assert!((m.precision - 93.0 / 94.0).abs() < 1e-12);
        assert!((m.precision - 0.9894).abs() < 1e-4);
        assert!((m.recall - 0.9208).abs() < 1e-4);
        assert!((m.f1 - 0.9538).abs() < 1e-4);
        assert!(!m.degenerate);

        let perfect = Metrics::from_counts(10, 0, 10, 0);
        assert_eq!((perfect.accuracy, perfect.precision, perfect.recall, perfect.f1), (1.0, 1.0, 1.0, 1.0));

        let all_pos = Metrics::from_predictions(&[1, 1, 0, 0], &[1, 1, 1, 1]);
        assert_eq!((all_pos.accuracy, all_pos.recall, all_pos.precision), (0.5, 1.0, 0.5));
    }

    #[test]
    fn zero_denominators_flagged() {
        let m = Metrics::from_counts(0, 0, 5, 0);
        assert!(m.degenerate);
        assert_eq!((m.precision, m.recall, m.f1), (0.0, 0.0, 0.0));
        assert_eq!(m.accuracy, 1.0);
    }

    #[test]
    fn cosine_schedule_endpoints() {
        let cfg = TrainConfig { epochs: 10, learning_rate: 0.1, ..TrainConfig::default() };
        assert_eq!(cfg.learning_rate_at(0), 0.1);
        assert!((cfg.learning_rate_at(5) - 0.05).abs() < 1e-15);
        assert!(cfg.learning_rate_at(9) > 0.0);
    }

    #[test]
    fn config_validation() {
        TrainConfig::default().validate().unwrap();
        assert!(TrainConfig { alpha: 0.0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { epochs: 0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { learning_rate: -1.0, ..TrainConfig::default() }.validate().is_err());
    }

    #[test]
    fn csv_layout() {
        let rows = vec![SweepRow { param: "baseline".into(), metrics: Metrics::from_counts(1, 0, 1, 0) }];
        assert_eq!(sweep_csv(&rows), "param,accuracy,precision,recall,f1\nbaseline,1,1,1,1\n");
    }
}
