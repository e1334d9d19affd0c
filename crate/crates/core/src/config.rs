//! Flat `key=value` run configuration with dotted keys.
//!
//! Blank lines and lines starting with `#` are ignored. A `preset=desk|paper`
//! line, if present, must come first and selects the base values.

use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::error::{io_err, Error, Result};
use crate::model::{Ablations, ModelConfig};
use crate::mtl::Weighting;
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub preset: String,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn preset(name: &str) -> Result<Self> {
        let model = match name {
            "desk" => ModelConfig::desk(),
            "paper" => ModelConfig::paper(),
            other => return Err(Error::Config(format!("unknown preset '{other}' (expected desk or paper)"))),
        };
        Ok(Self {
            preset: name.to_string(),
            model,
            train: TrainConfig::default(),
        })
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg: Option<Self> = None;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got '{line}'", lineno + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if key == "preset" {
                if cfg.is_some() {
                    return Err(Error::Config(format!("line {}: preset must be the first setting", lineno + 1)));
                }
                cfg = Some(Self::preset(value)?);
                continue;
            }
            let c = cfg.get_or_insert_with(|| Self::preset("desk").expect("desk preset exists"));
            c.set(key, value)
                .map_err(|e| Error::Config(format!("line {}: {e}", lineno + 1)))?;
        }
        let cfg = cfg.unwrap_or_else(|| Self::preset("desk").expect("desk preset exists"));
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()
    }

    /// Applies one setting; unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let m = &mut self.model;
        let t = &mut self.train;
        match key {
            "model.image_size" => m.image_size = scalar(key, value)?,
            "model.c_seg" => m.c_seg = scalar(key, value)?,
            "model.frames" => m.frames = scalar(key, value)?,
            "model.init_seed" => m.init_seed = scalar(key, value)?,
            "backbone.stage_dims" => m.backbone.dims = list(key, value)?,
            "backbone.strides" => m.backbone.strides = list(key, value)?,
            "backbone.blocks" => m.backbone.blocks = list(key, value)?,
            "backbone.heads" => m.backbone.heads = list(key, value)?,
            "backbone.grids" => m.backbone.grids = list(key, value)?,
            "neck.dim" => m.neck.dim = scalar(key, value)?,
            "neck.heads" => m.neck.heads = scalar(key, value)?,
            "neck.grids" => m.neck.grids = list(key, value)?,
            "neck.aspp_rates" => m.neck.aspp_rates = list(key, value)?,
            "fusion.irc_groups" => m.irc_groups = scalar(key, value)?,
            "head.dim" => m.head_dim = scalar(key, value)?,
            "head.seg_hidden" => m.seg_hidden = scalar(key, value)?,
            "train.steps" => t.steps = scalar(key, value)?,
            "train.batch_size" => t.batch_size = scalar(key, value)?,
            "train.lr" => t.lr = scalar(key, value)?,
            "train.momentum" => t.momentum = scalar(key, value)?,
            "train.weight_decay" => t.weight_decay = scalar(key, value)?,
            "train.warmup_steps" => t.warmup_steps = scalar(key, value)?,
            "train.grad_clip" => {
                t.grad_clip = if value == "none" { None } else { Some(scalar(key, value)?) };
            }
            "train.seed" => t.seed = scalar(key, value)?,
            "train.weighting" => t.weighting = value.parse::<Weighting>()?,
            _ => match key.strip_prefix("ablation.") {
                Some(name) => *m.ablations.flag_mut(name)? = scalar(key, value)?,
                None => return Err(Error::Config(format!("unknown key '{key}'"))),
            },
        }
        Ok(())
    }

    /// Canonical text form; `parse(to_text(c)) == c`.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let t = &self.train;
        let join = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        let mut lines = vec![
            format!("preset={}", self.preset),
            format!("model.image_size={}", m.image_size),
            format!("model.c_seg={}", m.c_seg),
            format!("model.frames={}", m.frames),
            format!("model.init_seed={}", m.init_seed),
            format!("backbone.stage_dims={}", join(&m.backbone.dims)),
            format!("backbone.strides={}", join(&m.backbone.strides)),
            format!("backbone.blocks={}", join(&m.backbone.blocks)),
            format!("backbone.heads={}", join(&m.backbone.heads)),
            format!("backbone.grids={}", join(&m.backbone.grids)),
            format!("neck.dim={}", m.neck.dim),
            format!("neck.heads={}", m.neck.heads),
            format!("neck.grids={}", join(&m.neck.grids)),
            format!("neck.aspp_rates={}", join(&m.neck.aspp_rates)),
            format!("fusion.irc_groups={}", m.irc_groups),
            format!("head.dim={}", m.head_dim),
            format!("head.seg_hidden={}", m.seg_hidden),
        ];
        for name in Ablations::NAMES {
            lines.push(format!("ablation.{name}={}", m.ablations.flag(name).expect("known toggle")));
        }
        lines.extend([
            format!("train.steps={}", t.steps),
            format!("train.batch_size={}", t.batch_size),
            format!("train.lr={}", t.lr),
            format!("train.momentum={}", t.momentum),
            format!("train.weight_decay={}", t.weight_decay),
            format!("train.warmup_steps={}", t.warmup_steps),
            format!(
                "train.grad_clip={}",
                t.grad_clip.map_or_else(|| "none".to_string(), |c| c.to_string())
            ),
            format!("train.seed={}", t.seed),
            format!("train.weighting={}", t.weighting),
        ]);
        let mut s = lines.join("\n");
        s.push('\n');
        s
    }
}

fn scalar<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("{key}: cannot parse '{value}': {e}")))
}

fn list(key: &str, value: &str) -> Result<Vec<usize>> {
    value.split(',').map(|v| scalar(key, v.trim())).collect()
}
