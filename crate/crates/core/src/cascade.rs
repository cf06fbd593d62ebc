//! Multi-stage wiring: input aggregation, heatmap recurrence, fusion and
//! progressive stage growth.
//!
//! For stage `j ≥ 2`:
//!
//! ```text
//! a_j1 = φ1(a_{j-1,1}) + φ2(a_{j-1,2}) + φ3(y_{j-1})
//! y_j  = f_j3(f_j2(a_j1)) + φ4(y_{j-1})
//! ```
//!
//! Stage 1 owns the only stem; later stages run their trunk and head on the
//! aggregated input.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::{Backbone, BackboneConfig, FeatureTriple, Preset, STEM_STRIDE, TOTAL_DOWNSAMPLING};
use crate::error::{CfaError, Result};
use crate::graph::{Graph, Mode, StatUpdate, Value};
use crate::heatmap::FusionMode;
use crate::layers::{Conv2d, ConvInit, ConvTranspose2d};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phi4Init {
    #[default]
    Identity,
    Zero,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CascadeConfig {
    pub stages: Vec<BackboneConfig>,
    pub fusion_window: usize,
    pub fusion_mode: FusionMode,
    pub phi4_rectified: bool,
    pub phi4_init: Phi4Init,
    pub seed: u64,
}

impl CascadeConfig {
    /// A deeper first stage followed by shallower refinement stages.
    pub fn new(num_stages: usize, first: Preset, rest: Preset, num_joints: usize) -> Self {
        let stages = (0..num_stages)
            .map(|j| BackboneConfig::preset(if j == 0 { first } else { rest }, num_joints))
            .collect();
        CascadeConfig {
            stages,
            fusion_window: num_stages.max(1),
            fusion_mode: FusionMode::Eq5,
            phi4_rectified: true,
            phi4_init: Phi4Init::Identity,
            seed: 0,
        }
    }

    pub fn uniform(preset: Preset, num_stages: usize, num_joints: usize) -> Self {
        CascadeConfig::new(num_stages, preset, preset, num_joints)
    }

    pub fn num_stages(&self) -> usize {
        self.stages.len()
    }

    pub fn num_joints(&self) -> usize {
        self.stages[0].num_joints
    }

    pub fn validate(&self) -> Result<()> {
        let first = self
            .stages
            .first()
            .ok_or_else(|| CfaError::Config("a cascade needs at least one stage".into()))?;
        for (j, s) in self.stages.iter().enumerate() {
            s.validate()?;
            check_stage_compatible(first, s, j)?;
        }
        if self.fusion_window == 0 || self.fusion_window > self.stages.len() {
            return Err(CfaError::Config(format!(
                "fusion window {} must lie in 1..={}",
                self.fusion_window,
                self.stages.len()
            )));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

fn check_stage_compatible(first: &BackboneConfig, s: &BackboneConfig, j: usize) -> Result<()> {
    if s.stem_channels != first.stem_channels || s.num_joints != first.num_joints {
        return Err(CfaError::shape(format!(
            "stage {} has C1={} and p={}, but stage 1 has C1={} and p={}",
            j + 1,
            s.stem_channels,
            s.num_joints,
            first.stem_channels,
            first.num_joints
        )));
    }
    Ok(())
}

/// Learnable maps that feed stage `j` from stage `j − 1`.
#[derive(Clone, Debug)]
pub struct AggregatorSet {
    phi1: Conv2d,
    phi2_ups: Vec<ConvTranspose2d>,
    phi2_out: Conv2d,
    phi3: Conv2d,
    phi4: Conv2d,
    rectified: bool,
}

impl AggregatorSet {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        prev: &BackboneConfig,
        config: &CascadeConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let c1 = prev.stem_channels;
        let p = prev.num_joints;
        let phi1 = Conv2d::new(store, &format!("{prefix}.phi1"), c1, c1, 1, 1, 0, true, ConvInit::Identity, rng)?;
        let steps = (TOTAL_DOWNSAMPLING / STEM_STRIDE).trailing_zeros() as usize;
        let mut phi2_ups = Vec::with_capacity(steps);
        let mut in_ch = prev.bottleneck_channels();
        for s in 0..steps {
            phi2_ups.push(ConvTranspose2d::new(
                store,
                &format!("{prefix}.phi2.up{s}"),
                in_ch,
                c1,
                prev.deconv_kernel,
                2,
                prev.deconv_pad(),
                false,
                rng,
            )?);
            in_ch = c1;
        }
        let phi2_out = Conv2d::new(store, &format!("{prefix}.phi2.out"), c1, c1, 1, 1, 0, true, ConvInit::He, rng)?;
        let phi3 = Conv2d::new(store, &format!("{prefix}.phi3"), p, c1, 1, 1, 0, true, ConvInit::He, rng)?;
        let phi4_init = match config.phi4_init {
            Phi4Init::Identity => ConvInit::Identity,
            Phi4Init::Zero => ConvInit::Zero,
        };
        let phi4 = Conv2d::new(store, &format!("{prefix}.phi4"), p, p, 1, 1, 0, true, phi4_init, rng)?;
        Ok(AggregatorSet {
            phi1,
            phi2_ups,
            phi2_out,
            phi3,
            phi4,
            rectified: config.phi4_rectified,
        })
    }

    /// a_j1 = φ1(a_{j−1,1}) + φ2(a_{j−1,2}) + φ3(y_{j−1}).
    pub fn stage_input(&self, g: &mut Graph, prev: &FeatureTriple) -> Result<Value> {
        let target = g.value(prev.a1).shape().to_vec();
        let low = self.phi1.forward(g, prev.a1)?;
        let mid = self.phi2(g, prev.a2)?;
        let high = self.phi3.forward(g, prev.y)?;
        for (name, v) in [("phi1", low), ("phi2", mid), ("phi3", high)] {
            if g.value(v).shape() != target.as_slice() {
                return Err(CfaError::shape(format!(
                    "{name} produced {:?}, expected a1 shape {target:?}",
                    g.value(v).shape()
                )));
            }
        }
        let s = g.add(low, mid)?;
        g.add(s, high)
    }

    /// y_j = a_j3 + φ4(y_{j−1}), with φ4 a 1×1 map optionally rectified.
    pub fn stage_output(&self, g: &mut Graph, a3: Value, prev_y: Value) -> Result<Value> {
        if g.value(a3).shape() != g.value(prev_y).shape() {
            return Err(CfaError::shape(format!(
                "stage output {:?} and previous heatmap {:?} differ",
                g.value(a3).shape(),
                g.value(prev_y).shape()
            )));
        }
        let mut r = self.phi4.forward(g, prev_y)?;
        if self.rectified {
            r = g.relu(r);
        }
        g.add(a3, r)
    }

    /// Upsamples the bottleneck back to stem resolution.
    pub fn phi2(&self, g: &mut Graph, a2: Value) -> Result<Value> {
        let mut mid = a2;
        for up in &self.phi2_ups {
            mid = up.forward(g, mid)?;
        }
        self.phi2_out.forward(g, mid)
    }

    pub fn phi3(&self) -> &Conv2d {
        &self.phi3
    }

    pub fn phi4(&self) -> &Conv2d {
        &self.phi4
    }

    pub fn phi1(&self) -> &Conv2d {
        &self.phi1
    }
}

/// Tape handles for every stage of one forward pass.
#[derive(Clone, Debug)]
pub struct CascadeNodes {
    pub triples: Vec<FeatureTriple>,
}

impl CascadeNodes {
    pub fn heatmaps(&self) -> Vec<Value> {
        self.triples.iter().map(|t| t.y).collect()
    }
}

/// Materialized per-stage heatmaps `[N, p, Hm, Wm]` and their fusion.
#[derive(Clone, Debug, PartialEq)]
pub struct CascadeOutput {
    pub stage_heatmaps: Vec<Tensor>,
    pub fused: Tensor,
}

#[derive(Clone, Debug)]
pub struct CascadeModel {
    config: CascadeConfig,
    store: ParamStore,
    stages: Vec<Backbone>,
    /// `aggregators[j − 1]` feeds stage `j` (0-based).
    aggregators: Vec<AggregatorSet>,
}

fn stage_rng(seed: u64, stage: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stage as u64);
    rng
}

impl CascadeModel {
    pub fn new(config: CascadeConfig) -> Result<Self> {
        config.validate()?;
        let mut model = CascadeModel {
            config: CascadeConfig {
                stages: Vec::new(),
                ..config.clone()
            },
            store: ParamStore::new(),
            stages: Vec::new(),
            aggregators: Vec::new(),
        };
        for stage in &config.stages {
            model.push_stage(stage)?;
        }
        model.config.fusion_window = config.fusion_window;
        Ok(model)
    }

    /// Appends a freshly initialized stage and its aggregators; parameters
    /// are drawn from a stream keyed by (seed, stage index) only.
    fn push_stage(&mut self, stage: &BackboneConfig) -> Result<()> {
        let j = self.stages.len();
        let mut rng = stage_rng(self.config.seed, j);
        if let Some(prev) = self.config.stages.last() {
            check_stage_compatible(&self.config.stages[0], stage, j)?;
            let agg = AggregatorSet::new(&mut self.store, &format!("agg{j}"), prev, &self.config, &mut rng)?;
            self.aggregators.push(agg);
        }
        let bb = Backbone::new(&mut self.store, &format!("stage{j}"), stage, j == 0, &mut rng)?;
        self.stages.push(bb);
        self.config.stages.push(stage.clone());
        self.config.fusion_window = self.config.fusion_window.clamp(1, self.stages.len());
        Ok(())
    }

    /// Returns an (M+1)-stage cascade whose first M stages keep their exact
    /// parameters (and normalization statistics).
    pub fn grow(&self, new_stage: &BackboneConfig) -> Result<CascadeModel> {
        new_stage.validate()?;
        let mut grown = self.clone();
        let window = grown.config.fusion_window;
        grown.push_stage(new_stage)?;
        grown.config.fusion_window = window;
        Ok(grown)
    }

    pub fn config(&self) -> &CascadeConfig {
        &self.config
    }

    pub fn num_stages(&self) -> usize {
        self.stages.len()
    }

    pub fn stage(&self, j: usize) -> &Backbone {
        &self.stages[j]
    }

    pub fn aggregator(&self, j: usize) -> Option<&AggregatorSet> {
        j.checked_sub(1).and_then(|k| self.aggregators.get(k))
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn set_fusion(&mut self, window: usize, mode: FusionMode) -> Result<()> {
        if window == 0 || window > self.stages.len() {
            return Err(CfaError::Config(format!(
                "fusion window {window} must lie in 1..={}",
                self.stages.len()
            )));
        }
        self.config.fusion_window = window;
        self.config.fusion_mode = mode;
        Ok(())
    }

    /// Records the full cascade onto `g`.
    pub fn forward(&self, g: &mut Graph, image: Value) -> Result<CascadeNodes> {
        let mut triples = Vec::with_capacity(self.stages.len());
        let first = self.stages[0].forward(g, image)?;
        triples.push(first);
        for (k, agg) in self.aggregators.iter().enumerate() {
            let prev = *triples.last().expect("at least one stage");
            let a1 = agg.stage_input(g, &prev)?;
            let t = self.stages[k + 1].forward_from_a1(g, a1)?;
            let y = agg.stage_output(g, t.y, prev.y)?;
            triples.push(FeatureTriple { a1, a2: t.a2, y });
        }
        Ok(CascadeNodes { triples })
    }

    /// Records the fusion of the last `fusion_window` stage heatmaps.
    pub fn fused(&self, g: &mut Graph, nodes: &CascadeNodes) -> Result<Value> {
        let maps = nodes.heatmaps();
        let n = self.config.fusion_window;
        g.fuse(&maps[maps.len() - n..], self.config.fusion_mode)
    }

    /// Runs a batch `[N, 3, H, W]`; returns heatmaps and any normalization
    /// statistics observed in training mode.
    pub fn run(&self, images: &Tensor, mode: Mode) -> Result<(CascadeOutput, Vec<StatUpdate>)> {
        let mut g = Graph::new(&self.store, mode);
        let x = g.input(images.clone());
        let nodes = self.forward(&mut g, x)?;
        let stage_heatmaps: Vec<Tensor> = nodes.heatmaps().iter().map(|v| g.value(*v).clone()).collect();
        let fused = self.fused(&mut g, &nodes)?;
        let fused = g.value(fused).clone();
        Ok((
            CascadeOutput {
                stage_heatmaps,
                fused,
            },
            g.take_stat_updates(),
        ))
    }

    /// Evaluation-mode forward pass.
    pub fn predict(&self, images: &Tensor) -> Result<CascadeOutput> {
        Ok(self.run(images, Mode::Eval)?.0)
    }

    pub fn num_trainable(&self) -> usize {
        self.store.num_trainable()
    }
}
