//! Helpers shared by the integration tests.
#![allow(dead_code)]

use cfa::backbone::Preset;
use cfa::cascade::{CascadeConfig, CascadeModel};
use cfa::graph::{Graph, Mode};
use cfa::params::{ParamId, ParamKind, ParamStore};
use cfa::tensor::Tensor;
use cfa::trainer::stage_loss;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(shape: &[usize], lo: f64, hi: f64, rng: &mut impl Rng) -> Tensor {
    let len = shape.iter().product();
    Tensor::from_vec(shape, (0..len).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

pub fn mini_cascade(stages: usize, seed: u64) -> CascadeModel {
    let mut cfg = CascadeConfig::uniform(Preset::Mini, stages, 16);
    cfg.seed = seed;
    CascadeModel::new(cfg).unwrap()
}

/// Moves every trainable parameter off its structured initialization
/// (identity maps, zero gammas, zero biases) so no gradient vanishes by
/// construction.
pub fn jitter(store: &mut ParamStore, seed: u64) {
    let mut r = rng(seed);
    let ids: Vec<ParamId> = store.trainable_ids().collect();
    for id in ids {
        let is_gamma = store.entry(id).name.ends_with(".gamma");
        let t = store.get_mut(id);
        let rms = (t.data().iter().map(|v| v * v).sum::<f64>() / t.len() as f64).sqrt();
        for v in t.data_mut() {
            if is_gamma {
                *v = r.random_range(0.5..1.5);
            } else {
                *v += r.random_range(-1.0..1.0) * 0.2 * (rms + 0.05);
            }
        }
    }
}

/// Training-mode loss of the cascade on one batch.
pub struct LossProblem {
    pub images: Tensor,
    pub targets: Tensor,
    pub mask: Vec<bool>,
    pub weights: Vec<f64>,
}

impl LossProblem {
    pub fn random(model: &CascadeModel, batch: usize, size: usize, seed: u64) -> Self {
        let mut r = rng(seed);
        let p = model.config().num_joints();
        let hm = size / 4;
        LossProblem {
            images: random_tensor(&[batch, 3, size, size], 0.0, 1.0, &mut r),
            targets: random_tensor(&[batch, p, hm, hm], 0.0, 1.0, &mut r),
            mask: vec![true; batch * p],
            weights: vec![1.0; model.num_stages()],
        }
    }

    /// Loss value and the activation pattern it was computed under.
    pub fn loss(&self, model: &CascadeModel) -> (f64, u64) {
        let mut g = Graph::new(model.store(), Mode::Train);
        let x = g.input(self.images.clone());
        let nodes = model.forward(&mut g, x).unwrap();
        let root = stage_loss(&mut g, &nodes.heatmaps(), &self.targets, &self.mask, &self.weights).unwrap();
        (g.value(root).data()[0], g.switch_pattern())
    }

    pub fn gradients(&self, model: &CascadeModel) -> Vec<Option<Tensor>> {
        let mut g = Graph::new(model.store(), Mode::Train);
        let x = g.input(self.images.clone());
        let nodes = model.forward(&mut g, x).unwrap();
        let root = stage_loss(&mut g, &nodes.heatmaps(), &self.targets, &self.mask, &self.weights).unwrap();
        g.backward(root).unwrap().into_params()
    }
}

#[derive(Debug, Clone)]
pub struct GradCheck {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    /// Step of the accepted estimate; `None` when every step tried still
    /// straddled a ReLU or max-pool switch.
    pub step: Option<f64>,
    pub rel_error: f64,
}

/// Largest relative step tried for central differences.
pub const FD_STEP: f64 = 1e-4;
/// Smallest relative step tried before a sample is declared to sit on a kink.
pub const FD_MIN_STEP: f64 = 1e-9;
/// Denominator floor for relative errors of near-zero gradients.
pub const FD_FLOOR: f64 = 1e-6;

/// Central-difference estimate of `d loss / d θ[k]`, using the largest step
/// whose two probes share the activation pattern of the unperturbed point.
/// Inside one pattern the network is smooth, so the estimate never averages
/// across a kink. Returns `(estimate, Some(step))`, or the smallest-step
/// estimate with `None` if no kink-free step exists.
pub fn numeric_gradient(
    model: &mut CascadeModel,
    loss: &impl Fn(&CascadeModel) -> (f64, u64),
    id: ParamId,
    k: usize,
) -> (f64, Option<f64>) {
    let orig = model.store().get(id).data()[k];
    let (_, center) = loss(model);
    let scale = orig.abs().max(1.0);
    let mut h = FD_STEP * scale;
    let mut estimate = f64::NAN;
    while h >= FD_MIN_STEP * scale {
        model.store_mut().get_mut(id).data_mut()[k] = orig + h;
        let (up, p_up) = loss(model);
        model.store_mut().get_mut(id).data_mut()[k] = orig - h;
        let (down, p_down) = loss(model);
        model.store_mut().get_mut(id).data_mut()[k] = orig;
        estimate = (up - down) / (2.0 * h);
        if p_up == center && p_down == center {
            return (estimate, Some(h));
        }
        h /= 2.0;
    }
    (estimate, None)
}

/// Compares analytic gradients with central differences at the listed scalars.
pub fn finite_difference_check(
    model: &mut CascadeModel,
    loss: impl Fn(&CascadeModel) -> (f64, u64),
    analytic: &[Option<Tensor>],
    picks: &[(ParamId, usize)],
) -> Vec<GradCheck> {
    picks
        .iter()
        .map(|&(id, k)| {
            let (numeric, step) = numeric_gradient(model, &loss, id, k);
            let a = analytic[id.index()].as_ref().map_or(0.0, |t| t.data()[k]);
            GradCheck {
                name: model.store().entry(id).name.clone(),
                index: k,
                analytic: a,
                numeric,
                step,
                rel_error: (a - numeric).abs() / a.abs().max(numeric.abs()).max(FD_FLOOR),
            }
        })
        .collect()
}

/// `per_group` random scalar entries from trainable tensors whose names
/// contain each pattern.
pub fn sample_params(store: &ParamStore, patterns: &[&str], per_group: usize, seed: u64) -> Vec<(ParamId, usize)> {
    let mut r = rng(seed);
    let mut picks = Vec::new();
    for pat in patterns {
        let ids: Vec<ParamId> = store
            .ids()
            .filter(|id| {
                let e = store.entry(*id);
                e.kind == ParamKind::Trainable && e.name.contains(pat)
            })
            .collect();
        assert!(!ids.is_empty(), "no parameters match {pat}");
        let mut taken = 0;
        while taken < per_group {
            let id = ids[r.random_range(0..ids.len())];
            let k = r.random_range(0..store.get(id).len());
            if !picks.contains(&(id, k)) {
                picks.push((id, k));
                taken += 1;
            }
        }
    }
    picks
}

/// Parameter groups spanning every component of a two-stage cascade.
pub const CASCADE_GROUPS: [&str; 7] = [
    "stage0.stem.",
    ".trunk.",
    ".head.",
    ".phi1.",
    ".phi2.",
    ".phi3.",
    ".phi4.",
];
