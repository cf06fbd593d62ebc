//! Intermediate-supervision loss, Adam with a step schedule, and the
//! training and evaluation loops.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::STEM_STRIDE;
use crate::cascade::{CascadeModel, CascadeOutput};
use crate::error::{CfaError, Result};
use crate::graph::{apply_stat_updates, Graph, Mode, Value};
use crate::heatmap::{decode, encode, flip_average, fuse, FusionMode, Heatmap, HeatmapGeometry};
use crate::metrics::{pckh, PckhReport, DEFAULT_ALPHA};
use crate::params::ParamStore;
use crate::schema::{PersonAnnotation, PoseSample, PredictionRecord, SkeletonSpec};
use crate::synth::{augment, AugmentRanges};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub lr_decay_factor: f64,
    /// 1-indexed epochs after which the rate is multiplied by the decay factor.
    pub lr_decay_epochs: Vec<usize>,
    pub epochs: usize,
    /// Optional hard cap on optimizer steps across all epochs.
    pub max_iterations: Option<usize>,
    /// One weight per stage; empty means every stage weighs 1.
    pub stage_loss_weights: Vec<f64>,
    pub seed: u64,
    /// Gaussian width of training targets, in heatmap cells.
    pub target_sigma: f64,
    pub augment: AugmentRanges,
    /// Leading stages (with their aggregators) kept fixed during training.
    pub freeze_stages: usize,
    pub bn_momentum: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 64,
            lr: 5e-4,
            lr_decay_factor: 0.3,
            lr_decay_epochs: vec![6, 10, 13],
            epochs: 16,
            max_iterations: None,
            stage_loss_weights: Vec::new(),
            seed: 0,
            target_sigma: 2.0,
            augment: AugmentRanges::default(),
            freeze_stages: 0,
            bn_momentum: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(CfaError::Config(m));
        if self.batch_size == 0 {
            return fail("train.batch_size must be at least 1".into());
        }
        if !(self.lr > 0.0) {
            return fail(format!("train.lr must be positive, got {}", self.lr));
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor < 1.0) {
            return fail(format!(
                "train.lr_decay_factor must lie in (0, 1), got {}",
                self.lr_decay_factor
            ));
        }
        if self.stage_loss_weights.iter().any(|w| !(*w >= 0.0)) {
            return fail("train.stage_loss_weights must be nonnegative".into());
        }
        if !self.stage_loss_weights.is_empty() && self.stage_loss_weights.iter().all(|w| *w == 0.0) {
            return fail("train.stage_loss_weights needs at least one positive entry".into());
        }
        if !(self.target_sigma > 0.0) || !(0.0..=1.0).contains(&self.bn_momentum) {
            return fail("train.target_sigma must be positive and train.bn_momentum in [0, 1]".into());
        }
        self.augment.validate()
    }

    /// Learning rate used throughout 1-indexed `epoch`.
    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        let decays = self.lr_decay_epochs.iter().filter(|&&d| d < epoch).count();
        self.lr * self.lr_decay_factor.powi(decays as i32)
    }

    /// Per-stage weights for an `m`-stage model.
    pub fn weights_for(&self, m: usize) -> Result<Vec<f64>> {
        if self.stage_loss_weights.is_empty() {
            return Ok(vec![1.0; m]);
        }
        if self.stage_loss_weights.len() != m {
            return Err(CfaError::Config(format!(
                "{} stage loss weights given for a {m}-stage model",
                self.stage_loss_weights.len()
            )));
        }
        Ok(self.stage_loss_weights.clone())
    }
}

fn check_loss_inputs(weights: &[f64], stages: usize, visibility: &[bool]) -> Result<()> {
    if weights.len() != stages {
        return Err(CfaError::shape(format!(
            "{} loss weights for {stages} stages",
            weights.len()
        )));
    }
    if weights.iter().all(|w| *w == 0.0) {
        return Err(CfaError::domain("all stage loss weights are zero"));
    }
    if !visibility.iter().any(|v| *v) {
        return Err(CfaError::domain("no visible joints to supervise"));
    }
    Ok(())
}

/// Records `Σ_j w_j · MSE(y_j, target)` onto the graph, averaging each MSE over
/// the `(sample, joint)` planes marked visible.
pub fn stage_loss(
    g: &mut Graph,
    heatmaps: &[Value],
    target: &Tensor,
    visibility: &[bool],
    weights: &[f64],
) -> Result<Value> {
    check_loss_inputs(weights, heatmaps.len(), visibility)?;
    let mut terms = Vec::with_capacity(heatmaps.len());
    for (&y, &w) in heatmaps.iter().zip(weights) {
        terms.push((g.masked_mse(y, target, visibility)?, w));
    }
    g.weighted_sum(&terms)
}

/// Loss value of materialized stage outputs; the fused map does not enter.
pub fn loss(output: &CascadeOutput, target: &Tensor, weights: &[f64], visibility: &[bool]) -> Result<f64> {
    let store = ParamStore::new();
    let mut g = Graph::new(&store, Mode::Eval);
    let ys: Vec<Value> = output.stage_heatmaps.iter().map(|t| g.input(t.clone())).collect();
    let root = stage_loss(&mut g, &ys, target, visibility, weights)?;
    Ok(g.value(root).data()[0])
}

/// Adam over the trainable entries of a parameter store.
#[derive(Clone, Debug)]
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    first: Vec<Option<Vec<f64>>>,
    second: Vec<Option<Vec<f64>>>,
}

impl Adam {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam {
            beta1,
            beta2,
            eps,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One bias-corrected update; `grads` is indexed by parameter id.
    pub fn update(&mut self, store: &mut ParamStore, grads: &[Option<Tensor>], lr: f64) {
        self.step += 1;
        if self.first.len() < store.len() {
            self.first.resize(store.len(), None);
            self.second.resize(store.len(), None);
        }
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        let ids: Vec<_> = store.trainable_ids().collect();
        for id in ids {
            let Some(grad) = grads.get(id.index()).and_then(Option::as_ref) else {
                continue;
            };
            let n = grad.len();
            let m = self.first[id.index()].get_or_insert_with(|| vec![0.0; n]);
            let v = self.second[id.index()].get_or_insert_with(|| vec![0.0; n]);
            let param = store.get_mut(id).data_mut();
            for k in 0..n {
                let gk = grad.data()[k];
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * gk;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * gk * gk;
                param[k] -= lr * (m[k] / c1) / ((v[k] / c2).sqrt() + self.eps);
            }
        }
    }
}

/// A training batch: images `[N, 3, H, W]`, targets `[N, p, Hm, Wm]` and the
/// `N·p` visibility mask.
pub struct Batch {
    pub images: Tensor,
    pub targets: Tensor,
    pub visibility: Vec<bool>,
}

pub fn make_batch(samples: &[PoseSample], target_sigma: f64) -> Result<Batch> {
    let first = samples.first().ok_or_else(|| CfaError::domain("empty batch"))?;
    let (h, w) = first.size();
    let geom = HeatmapGeometry::for_image(h, w, STEM_STRIDE, target_sigma)?;
    let mut images = Vec::with_capacity(samples.len());
    let mut targets = Vec::with_capacity(samples.len());
    let mut visibility = Vec::new();
    for s in samples {
        if s.size() != (h, w) {
            return Err(CfaError::shape(format!(
                "sample {} is {:?}, batch expects {:?}",
                s.annotation.image_id,
                s.size(),
                (h, w)
            )));
        }
        images.push(s.image.clone());
        let a = &s.annotation;
        targets.push(encode(&a.keypoints, &a.visibility, &geom)?.to_tensor());
        visibility.extend_from_slice(&a.visibility);
    }
    Ok(Batch {
        images: Tensor::stack(&images)?,
        targets: Tensor::stack(&targets)?,
        visibility,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub epoch: usize,
    pub iteration: usize,
    pub lr: f64,
    pub loss: f64,
}

impl LogEntry {
    /// `epoch, iteration, lr, loss`
    pub fn line(&self) -> String {
        format!("{}, {}, {:e}, {:.8e}", self.epoch, self.iteration, self.lr, self.loss)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub lr: f64,
    pub mean_loss: f64,
    pub iterations: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub entries: Vec<LogEntry>,
    pub epochs: Vec<EpochSummary>,
}

/// Stage index owning a parameter name (`stage{j}.…` or `agg{j}.…`).
fn owning_stage(name: &str) -> Option<usize> {
    let rest = name.strip_prefix("stage").or_else(|| name.strip_prefix("agg"))?;
    rest.split('.').next()?.parse().ok()
}

fn frozen_params(store: &ParamStore, freeze_stages: usize) -> Vec<bool> {
    store
        .entries()
        .iter()
        .map(|e| owning_stage(&e.name).is_some_and(|j| j < freeze_stages))
        .collect()
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    rng
}

fn sample_rng(seed: u64, epoch: usize, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((epoch as u64) << 32) ^ 0x5A17_AB1E);
    rng.set_stream(index as u64);
    rng
}

/// Trains in place. `on_epoch` runs after every completed epoch and receives
/// that epoch's log entries.
pub fn train_with(
    model: &mut CascadeModel,
    dataset: &[PoseSample],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&CascadeModel, &EpochSummary, &[LogEntry]) -> Result<()>,
) -> Result<TrainLog> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(CfaError::domain("training set is empty"));
    }
    let weights = cfg.weights_for(model.num_stages())?;
    if cfg.freeze_stages >= model.num_stages() && cfg.epochs > 0 {
        return Err(CfaError::Config(format!(
            "train.freeze_stages = {} leaves nothing to train in a {}-stage model",
            cfg.freeze_stages,
            model.num_stages()
        )));
    }
    let frozen = frozen_params(model.store(), cfg.freeze_stages);
    let skel = SkeletonSpec::mpii();
    let mut adam = Adam::new(cfg.beta1, cfg.beta2, cfg.adam_eps);
    let mut log = TrainLog::default();
    let mut iteration = 0;
    'epochs: for epoch in 1..=cfg.epochs {
        let lr = cfg.lr_at_epoch(epoch);
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        order.shuffle(&mut epoch_rng(cfg.seed, epoch));
        let (mut sum, mut steps) = (0.0, 0);
        let first_entry = log.entries.len();
        for chunk in order.chunks(cfg.batch_size) {
            if cfg.max_iterations.is_some_and(|cap| iteration >= cap) {
                break;
            }
            let samples = chunk
                .iter()
                .map(|&i| {
                    let params = cfg.augment.sample(&mut sample_rng(cfg.seed, epoch, i));
                    augment(&dataset[i], &params, &skel)
                })
                .collect::<Result<Vec<_>>>()?;
            let batch = make_batch(&samples, cfg.target_sigma)?;
            let (value, grads, stats) = {
                let mut g = Graph::new(model.store(), Mode::Train);
                let x = g.input(batch.images);
                let nodes = model.forward(&mut g, x)?;
                let root = stage_loss(&mut g, &nodes.heatmaps(), &batch.targets, &batch.visibility, &weights)?;
                let value = g.value(root).data()[0];
                iteration += 1;
                if !value.is_finite() {
                    return Err(CfaError::Divergence {
                        epoch,
                        iteration,
                        loss: value,
                    });
                }
                let mut grads = g.backward(root)?.into_params();
                for (slot, fixed) in grads.iter_mut().zip(&frozen) {
                    if *fixed {
                        *slot = None;
                    }
                }
                let mut stats = g.take_stat_updates();
                stats.retain(|u| !frozen[u.running_mean.index()]);
                (value, grads, stats)
            };
            adam.update(model.store_mut(), &grads, lr);
            apply_stat_updates(model.store_mut(), &stats, cfg.bn_momentum);
            let entry = LogEntry {
                epoch,
                iteration,
                lr,
                loss: value,
            };
            log::debug!("{}", entry.line());
            log.entries.push(entry);
            sum += value;
            steps += 1;
        }
        if steps == 0 {
            break 'epochs;
        }
        let summary = EpochSummary {
            epoch,
            lr,
            mean_loss: sum / steps as f64,
            iterations: steps,
        };
        log::info!(
            "epoch {} lr {:e} mean loss {:.6e} ({} iterations)",
            summary.epoch,
            summary.lr,
            summary.mean_loss,
            summary.iterations
        );
        on_epoch(model, &summary, &log.entries[first_entry..])?;
        log.epochs.push(summary);
    }
    Ok(log)
}

pub fn train(model: &mut CascadeModel, dataset: &[PoseSample], cfg: &TrainConfig) -> Result<TrainLog> {
    train_with(model, dataset, cfg, |_, _, _| Ok(()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub use_flip_test: bool,
    /// Defaults to the model's configured window.
    pub fusion_window: Option<usize>,
    /// Defaults to the model's configured mode.
    pub fusion_mode: Option<FusionMode>,
    pub alpha: f64,
    pub batch_size: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            use_flip_test: true,
            fusion_window: None,
            fusion_mode: None,
            alpha: DEFAULT_ALPHA,
            batch_size: 16,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub stage_reports: Vec<PckhReport>,
    pub fused_report: PckhReport,
    /// Decoded from the fused map.
    pub predictions: Vec<PredictionRecord>,
    pub stage_predictions: Vec<Vec<PredictionRecord>>,
}

impl Evaluation {
    /// Rows labelled `stage 1`, …, `stage M`, `fused`.
    pub fn rows(&self) -> Vec<(String, PckhReport)> {
        self.stage_reports
            .iter()
            .enumerate()
            .map(|(j, r)| (format!("stage {}", j + 1), r.clone()))
            .chain(std::iter::once(("fused".to_string(), self.fused_report.clone())))
            .collect()
    }
}

fn record(image_id: &str, hm: &Heatmap, geom: &HeatmapGeometry) -> PredictionRecord {
    let (keypoints, scores) = decode(hm, geom);
    PredictionRecord {
        image_id: image_id.to_string(),
        keypoints,
        scores: scores.into_iter().map(|s| s.max(0.0)).collect(),
    }
}

/// Scores per-sample stage heatmaps (`maps[i][j]` is stage `j` of sample `i`):
/// each stage is decoded on its own, and the last `window` stages are fused
/// before decoding the final prediction.
pub fn evaluate_heatmaps(
    maps: &[Vec<Heatmap>],
    annotations: &[PersonAnnotation],
    geom: &HeatmapGeometry,
    window: usize,
    mode: FusionMode,
    skel: &SkeletonSpec,
    alpha: f64,
) -> Result<Evaluation> {
    if maps.len() != annotations.len() {
        return Err(CfaError::shape(format!(
            "{} heatmap sets for {} annotations",
            maps.len(),
            annotations.len()
        )));
    }
    let stages = maps.first().map_or(0, Vec::len);
    if stages == 0 || maps.iter().any(|m| m.len() != stages) {
        return Err(CfaError::shape("every sample needs the same nonzero number of stage maps"));
    }
    if window == 0 || window > stages {
        return Err(CfaError::Config(format!("fusion window {window} must lie in 1..={stages}")));
    }
    let mut stage_predictions = vec![Vec::with_capacity(maps.len()); stages];
    let mut predictions = Vec::with_capacity(maps.len());
    for (sample, ann) in maps.iter().zip(annotations) {
        for (j, hm) in sample.iter().enumerate() {
            stage_predictions[j].push(record(&ann.image_id, hm, geom));
        }
        let fused = fuse(&sample[stages - window..], mode)?;
        predictions.push(record(&ann.image_id, &fused, geom));
    }
    let stage_reports = stage_predictions
        .iter()
        .map(|preds| pckh(preds, annotations, skel, alpha))
        .collect::<Result<Vec<_>>>()?;
    let fused_report = pckh(&predictions, annotations, skel, alpha)?;
    Ok(Evaluation {
        stage_reports,
        fused_report,
        predictions,
        stage_predictions,
    })
}

/// Per-sample stage heatmaps from the model, flip-averaged when requested.
pub fn stage_heatmaps(
    model: &CascadeModel,
    dataset: &[PoseSample],
    use_flip_test: bool,
    batch_size: usize,
    skel: &SkeletonSpec,
) -> Result<Vec<Vec<Heatmap>>> {
    let mut maps = Vec::with_capacity(dataset.len());
    for chunk in dataset.chunks(batch_size.max(1)) {
        let images = Tensor::stack(&chunk.iter().map(|s| s.image.clone()).collect::<Vec<_>>())?;
        let out = model.predict(&images)?;
        let flipped = if use_flip_test {
            Some(model.predict(&images.flip_last_axis())?)
        } else {
            None
        };
        for n in 0..chunk.len() {
            let mut per_stage = Vec::with_capacity(model.num_stages());
            for (j, t) in out.stage_heatmaps.iter().enumerate() {
                let hm = Heatmap::from_batch(t, n)?;
                per_stage.push(match &flipped {
                    Some(f) => flip_average(&hm, &Heatmap::from_batch(&f.stage_heatmaps[j], n)?, skel)?,
                    None => hm,
                });
            }
            maps.push(per_stage);
        }
    }
    Ok(maps)
}

/// Fused, decoded predictions without scoring; annotations only supply ids.
pub fn predict_records(
    model: &CascadeModel,
    dataset: &[PoseSample],
    cfg: &EvalConfig,
    skel: &SkeletonSpec,
) -> Result<Vec<PredictionRecord>> {
    let first = dataset.first().ok_or_else(|| CfaError::domain("nothing to predict"))?;
    let (h, w) = first.size();
    let geom = HeatmapGeometry::for_image(h, w, STEM_STRIDE, 2.0)?;
    let window = cfg.fusion_window.unwrap_or(model.config().fusion_window);
    let mode = cfg.fusion_mode.unwrap_or(model.config().fusion_mode);
    if window == 0 || window > model.num_stages() {
        return Err(CfaError::Config(format!(
            "fusion window {window} must lie in 1..={}",
            model.num_stages()
        )));
    }
    let maps = stage_heatmaps(model, dataset, cfg.use_flip_test, cfg.batch_size, skel)?;
    maps.iter()
        .zip(dataset)
        .map(|(m, s)| Ok(record(&s.annotation.image_id, &fuse(&m[m.len() - window..], mode)?, &geom)))
        .collect()
}

pub fn evaluate(
    model: &CascadeModel,
    dataset: &[PoseSample],
    cfg: &EvalConfig,
    skel: &SkeletonSpec,
) -> Result<Evaluation> {
    let first = dataset.first().ok_or_else(|| CfaError::domain("evaluation set is empty"))?;
    let (h, w) = first.size();
    let geom = HeatmapGeometry::for_image(h, w, STEM_STRIDE, 2.0)?;
    let window = cfg.fusion_window.unwrap_or(model.config().fusion_window);
    let mode = cfg.fusion_mode.unwrap_or(model.config().fusion_mode);
    let maps = stage_heatmaps(model, dataset, cfg.use_flip_test, cfg.batch_size, skel)?;
    let annotations: Vec<PersonAnnotation> = dataset.iter().map(|s| s.annotation.clone()).collect();
    evaluate_heatmaps(&maps, &annotations, &geom, window, mode, skel, cfg.alpha)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::Preset;
    use crate::cascade::CascadeConfig;
    use crate::synth::{generate_dataset, SynthConfig};

    #[test]
    fn default_schedule() {
        let cfg = TrainConfig::default();
        let lrs: Vec<f64> = (1..=15).map(|e| cfg.lr_at_epoch(e)).collect();
        assert!(lrs[..6].iter().all(|&l| l == 5e-4));
        assert!((lrs[6] - 1.5e-4).abs() < 1e-18);
        assert!((lrs[10] - 4.5e-5).abs() < 1e-18);
        assert!((lrs[13] - 1.35e-5).abs() < 1e-18);
    }

    #[test]
    fn constant_residual_loss() {
        let target = Tensor::full(&[1, 2, 3, 3], 0.2);
        let out = CascadeOutput {
            stage_heatmaps: vec![Tensor::full(&[1, 2, 3, 3], 0.3)],
            fused: Tensor::full(&[1, 2, 3, 3], 0.3),
        };
        let l = loss(&out, &target, &[1.0], &[true, true]).unwrap();
        assert!((l - 0.01).abs() < 1e-15);
        assert!(loss(&out, &target, &[0.0], &[true, true]).is_err());
        assert!(loss(&out, &target, &[1.0], &[false, false]).is_err());
    }

    #[test]
    fn zero_epochs_leave_parameters_unchanged() {
        let mut model = CascadeModel::new(CascadeConfig::uniform(Preset::Mini, 1, 16)).unwrap();
        let before = model.store().clone();
        let data = generate_dataset(&SynthConfig {
            count: 2,
            ..SynthConfig::default()
        })
        .unwrap();
        let log = train(
            &mut model,
            &data,
            &TrainConfig {
                epochs: 0,
                ..TrainConfig::default()
            },
        )
        .unwrap();
        assert!(log.entries.is_empty());
        assert_eq!(model.store(), &before);
    }

    #[test]
    fn nan_loss_is_reported() {
        let mut model = CascadeModel::new(CascadeConfig::uniform(Preset::Mini, 1, 16)).unwrap();
        let mut data = generate_dataset(&SynthConfig {
            count: 2,
            ..SynthConfig::default()
        })
        .unwrap();
        data[0].image.data_mut()[0] = f64::NAN;
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 2,
            augment: AugmentRanges::none(),
            ..TrainConfig::default()
        };
        match train(&mut model, &data, &cfg) {
            Err(CfaError::Divergence { epoch: 1, iteration: 1, .. }) => {}
            other => panic!("expected divergence, got {other:?}"),
        }
    }
}
