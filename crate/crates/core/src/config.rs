//! Run configuration: flat `key = value` text with dotted sections.
//!
//! ```text
//! # comment
//! seed = 7
//! model.stages = 3
//! train.lr = 0.0005
//! train.lr_decay_epochs = 6, 10, 13
//! ```

use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::backbone::{BackboneConfig, Preset};
use crate::cascade::{CascadeConfig, Phi4Init};
use crate::error::{CfaError, Result};
use crate::heatmap::FusionMode;
use crate::synth::{Background, SynthConfig};
use crate::trainer::{EvalConfig, TrainConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct ModelSection {
    pub stages: usize,
    pub first_preset: Preset,
    pub rest_preset: Preset,
    pub num_joints: usize,
    /// `None` fuses every stage.
    pub fusion_window: Option<usize>,
    pub fusion_mode: FusionMode,
    pub phi4_rectified: bool,
    pub phi4_init: Phi4Init,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            stages: 3,
            first_preset: Preset::Mini,
            rest_preset: Preset::Mini,
            num_joints: 16,
            fusion_window: None,
            fusion_mode: FusionMode::Eq5,
            phi4_rectified: true,
            phi4_init: Phi4Init::Identity,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Paths {
    pub data: PathBuf,
    pub out: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            data: PathBuf::from("data"),
            out: PathBuf::from("out"),
        }
    }
}

/// Everything a subcommand needs, after merging file values and flags.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub deterministic: bool,
    pub synth: SynthConfig,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub paths: Paths,
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value
        .parse()
        .map_err(|e| CfaError::Config(format!("invalid value `{value}` for {key}: {e}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(CfaError::Config(format!("invalid boolean `{value}` for {key}"))),
    }
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>>
where
    T::Err: Display,
{
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect()
}

fn parse_optional<T: FromStr>(key: &str, value: &str) -> Result<Option<T>>
where
    T::Err: Display,
{
    match value {
        "auto" | "none" | "" => Ok(None),
        v => parse(key, v).map(Some),
    }
}

fn parse_phi4_init(key: &str, value: &str) -> Result<Phi4Init> {
    match value {
        "identity" => Ok(Phi4Init::Identity),
        "zero" => Ok(Phi4Init::Zero),
        _ => Err(CfaError::Config(format!(
            "invalid value `{value}` for {key} (expected identity or zero)"
        ))),
    }
}

fn join<T: Display>(items: &[T]) -> String {
    items.iter().map(ToString::to_string).collect::<Vec<_>>().join(", ")
}

fn optional<T: Display>(v: &Option<T>, none: &str) -> String {
    v.as_ref().map_or_else(|| none.to_string(), ToString::to_string)
}

impl RunConfig {
    /// Sets one dotted key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let (s, m, t, e) = (&mut self.synth, &mut self.model, &mut self.train, &mut self.eval);
        match key.trim() {
            "seed" => self.seed = parse(key, v)?,
            "deterministic" => self.deterministic = parse_bool(key, v)?,
            "synth.count" => s.count = parse(key, v)?,
            "synth.image_size" => s.image_size = parse(key, v)?,
            "synth.occlusion_prob" => s.occlusion_prob = parse(key, v)?,
            "synth.limb_width" => s.limb_width = parse(key, v)?,
            "synth.pose_jitter" => s.pose_jitter = parse(key, v)?,
            "synth.background" => s.background = parse::<Background>(key, v)?,
            "model.stages" => m.stages = parse(key, v)?,
            "model.first_preset" => m.first_preset = parse(key, v)?,
            "model.rest_preset" => m.rest_preset = parse(key, v)?,
            "model.num_joints" => m.num_joints = parse(key, v)?,
            "model.fusion_window" => m.fusion_window = parse_optional(key, v)?,
            "model.fusion_mode" => m.fusion_mode = parse(key, v)?,
            "model.phi4_rectified" => m.phi4_rectified = parse_bool(key, v)?,
            "model.phi4_init" => m.phi4_init = parse_phi4_init(key, v)?,
            "train.batch_size" => t.batch_size = parse(key, v)?,
            "train.lr" => t.lr = parse(key, v)?,
            "train.lr_decay_factor" => t.lr_decay_factor = parse(key, v)?,
            "train.lr_decay_epochs" => t.lr_decay_epochs = parse_list(key, v)?,
            "train.epochs" => t.epochs = parse(key, v)?,
            "train.max_iterations" => t.max_iterations = parse_optional(key, v)?,
            "train.stage_loss_weights" => t.stage_loss_weights = parse_list(key, v)?,
            "train.target_sigma" => t.target_sigma = parse(key, v)?,
            "train.freeze_stages" => t.freeze_stages = parse(key, v)?,
            "train.bn_momentum" => t.bn_momentum = parse(key, v)?,
            "train.augment.max_rotation_deg" => t.augment.max_rotation_deg = parse(key, v)?,
            "train.augment.scale_min" => t.augment.scale_min = parse(key, v)?,
            "train.augment.scale_max" => t.augment.scale_max = parse(key, v)?,
            "train.augment.flip_prob" => t.augment.flip_prob = parse(key, v)?,
            "train.augment.color_jitter" => t.augment.color_jitter = parse(key, v)?,
            "eval.flip_test" => e.use_flip_test = parse_bool(key, v)?,
            "eval.fusion_window" => e.fusion_window = parse_optional(key, v)?,
            "eval.fusion_mode" => e.fusion_mode = parse_optional(key, v)?,
            "eval.alpha" => e.alpha = parse(key, v)?,
            "eval.batch_size" => e.batch_size = parse(key, v)?,
            "paths.data" => self.paths.data = PathBuf::from(v),
            "paths.out" => self.paths.out = PathBuf::from(v),
            other => return Err(CfaError::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| CfaError::Config(format!("line {}: expected `key = value`", n + 1)))?;
            self.set(key, value)
                .map_err(|e| CfaError::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| CfaError::io(path, e))?;
        RunConfig::from_text(&text)
    }

    /// Fully resolved configuration; parsing it back yields an equal value.
    pub fn to_text(&self) -> String {
        let (s, m, t, e) = (&self.synth, &self.model, &self.train, &self.eval);
        let a = &t.augment;
        let rows: Vec<(&str, String)> = vec![
            ("seed", self.seed.to_string()),
            ("deterministic", self.deterministic.to_string()),
            ("synth.count", s.count.to_string()),
            ("synth.image_size", s.image_size.to_string()),
            ("synth.occlusion_prob", format!("{:?}", s.occlusion_prob)),
            ("synth.limb_width", format!("{:?}", s.limb_width)),
            ("synth.pose_jitter", format!("{:?}", s.pose_jitter)),
            ("synth.background", s.background.to_string()),
            ("model.stages", m.stages.to_string()),
            ("model.first_preset", m.first_preset.to_string()),
            ("model.rest_preset", m.rest_preset.to_string()),
            ("model.num_joints", m.num_joints.to_string()),
            ("model.fusion_window", optional(&m.fusion_window, "auto")),
            ("model.fusion_mode", m.fusion_mode.to_string()),
            ("model.phi4_rectified", m.phi4_rectified.to_string()),
            (
                "model.phi4_init",
                match m.phi4_init {
                    Phi4Init::Identity => "identity".into(),
                    Phi4Init::Zero => "zero".into(),
                },
            ),
            ("train.batch_size", t.batch_size.to_string()),
            ("train.lr", format!("{:?}", t.lr)),
            ("train.lr_decay_factor", format!("{:?}", t.lr_decay_factor)),
            ("train.lr_decay_epochs", join(&t.lr_decay_epochs)),
            ("train.epochs", t.epochs.to_string()),
            ("train.max_iterations", optional(&t.max_iterations, "none")),
            (
                "train.stage_loss_weights",
                join(&t.stage_loss_weights.iter().map(|w| format!("{w:?}")).collect::<Vec<_>>()),
            ),
            ("train.target_sigma", format!("{:?}", t.target_sigma)),
            ("train.freeze_stages", t.freeze_stages.to_string()),
            ("train.bn_momentum", format!("{:?}", t.bn_momentum)),
            ("train.augment.max_rotation_deg", format!("{:?}", a.max_rotation_deg)),
            ("train.augment.scale_min", format!("{:?}", a.scale_min)),
            ("train.augment.scale_max", format!("{:?}", a.scale_max)),
            ("train.augment.flip_prob", format!("{:?}", a.flip_prob)),
            ("train.augment.color_jitter", format!("{:?}", a.color_jitter)),
            ("eval.flip_test", e.use_flip_test.to_string()),
            ("eval.fusion_window", optional(&e.fusion_window, "auto")),
            ("eval.fusion_mode", optional(&e.fusion_mode, "auto")),
            ("eval.alpha", format!("{:?}", e.alpha)),
            ("eval.batch_size", e.batch_size.to_string()),
            ("paths.data", self.paths.data.display().to_string()),
            ("paths.out", self.paths.out.display().to_string()),
        ];
        rows.into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig {
            seed: self.seed,
            ..self.synth.clone()
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    pub fn cascade_config(&self) -> Result<CascadeConfig> {
        let m = &self.model;
        if m.stages == 0 {
            return Err(CfaError::Config("model.stages must be at least 1".into()));
        }
        let mut cfg = CascadeConfig::new(m.stages, m.first_preset, m.rest_preset, m.num_joints);
        cfg.fusion_window = m.fusion_window.unwrap_or(m.stages);
        cfg.fusion_mode = m.fusion_mode;
        cfg.phi4_rectified = m.phi4_rectified;
        cfg.phi4_init = m.phi4_init;
        cfg.seed = self.seed;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Configuration of a stage appended by growth.
    pub fn growth_stage(&self) -> BackboneConfig {
        BackboneConfig::preset(self.model.rest_preset, self.model.num_joints)
    }

    pub fn validate(&self) -> Result<()> {
        self.synth_config().validate()?;
        self.train_config().validate()?;
        self.cascade_config()?;
        if !(self.eval.alpha > 0.0) || self.eval.batch_size == 0 {
            return Err(CfaError::Config(
                "eval.alpha must be positive and eval.batch_size at least 1".into(),
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_sections_comments_and_lists() {
        let cfg = RunConfig::from_text(
            "# header\nseed = 9\ntrain.lr = 1e-3  # faster\ntrain.lr_decay_epochs = 2, 4\n\nmodel.fusion_window = 2\n",
        )
        .unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.train.lr, 1e-3);
        assert_eq!(cfg.train.lr_decay_epochs, vec![2, 4]);
        assert_eq!(cfg.model.fusion_window, Some(2));
    }

    #[test]
    fn echo_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.set("train.lr", "0.000123456789").unwrap();
        cfg.set("train.stage_loss_weights", "0.5, 1, 2").unwrap();
        cfg.set("eval.fusion_mode", "mean").unwrap();
        cfg.set("synth.background", "clutter").unwrap();
        cfg.set("train.max_iterations", "17").unwrap();
        let back = RunConfig::from_text(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(RunConfig::from_text(&RunConfig::default().to_text()).unwrap(), RunConfig::default());
    }

    #[test]
    fn errors_name_the_problem() {
        let err = RunConfig::from_text("train.nope = 1").unwrap_err().to_string();
        assert!(err.contains("train.nope"));
        let err = RunConfig::from_text("seed = x").unwrap_err().to_string();
        assert!(err.contains("line 1") && err.contains("seed"));
        assert!(RunConfig::from_text("just words").is_err());
    }
}
