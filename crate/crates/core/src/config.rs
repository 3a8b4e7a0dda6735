//! Flat `key = value` configuration with `#` comments.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Components that can be removed for ablation runs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Ablation {
    pub no_reasoning: bool,
    pub no_decoder: bool,
    pub no_reconstruction: bool,
    pub no_ssm_loss: bool,
}

impl Ablation {
    pub fn all() -> Self {
        Self {
            no_reasoning: true,
            no_decoder: true,
            no_reconstruction: true,
            no_ssm_loss: true,
        }
    }

    /// Predicted target features exist only with both reasoning and
    /// reconstruction in place.
    pub fn predicts_features(&self) -> bool {
        !self.no_reasoning && !self.no_reconstruction
    }

    pub fn is_noop(&self) -> bool {
        *self == Self::default()
    }
}

impl FromStr for Ablation {
    type Err = Error;

    /// Comma list of `no-reasoning`, `no-decoder`, `no-reconstruction`,
    /// `no-ssm-loss`, or `none` / `all`.
    fn from_str(s: &str) -> Result<Self> {
        let mut a = Ablation::default();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            match part {
                "none" => {}
                "all" => a = Ablation::all(),
                "no-reasoning" => a.no_reasoning = true,
                "no-decoder" => a.no_decoder = true,
                "no-reconstruction" => a.no_reconstruction = true,
                "no-ssm-loss" => a.no_ssm_loss = true,
                other => return Err(Error::Config(format!("unknown ablation component `{other}`"))),
            }
        }
        Ok(a)
    }
}

impl std::fmt::Display for Ablation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let mut parts = Vec::new();
        if self.no_reasoning {
            parts.push("no-reasoning");
        }
        if self.no_decoder {
            parts.push("no-decoder");
        }
        if self.no_reconstruction {
            parts.push("no-reconstruction");
        }
        if self.no_ssm_loss {
            parts.push("no-ssm-loss");
        }
        if parts.is_empty() {
            f.write_str("none")
        } else {
            f.write_str(&parts.join(","))
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub canvas: usize,
    pub template_size: usize,
    pub dim: usize,
    pub heads: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub decoder_heads: usize,
    pub ssm_layers: usize,
    pub ssm_state: usize,
    pub spatial_groups: usize,
    pub mlp_ratio: usize,
    pub head_hidden: usize,
    pub context_factor: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            canvas: 128,
            template_size: 64,
            dim: 64,
            heads: 4,
            encoder_layers: 4,
            decoder_layers: 3,
            decoder_heads: 4,
            ssm_layers: 3,
            ssm_state: 8,
            spatial_groups: 4,
            mlp_ratio: 2,
            head_hidden: 32,
            context_factor: 2.0,
        }
    }
}

/// Loss weights.
#[derive(Clone, Debug, PartialEq)]
pub struct LossWeights {
    pub alpha_state: f64,
    pub beta_recon: f64,
    pub lambda_iou: f64,
    pub lambda_l1: f64,
    pub lambda_ssm: f64,
    pub focal_alpha: f64,
    pub focal_beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha_state: 0.5,
            beta_recon: 1.0,
            lambda_iou: 2.0,
            lambda_l1: 5.0,
            lambda_ssm: 4.0,
            focal_alpha: 2.0,
            focal_beta: 4.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub steps: usize,
    pub batch_size: usize,
    pub search_frames: usize,
    pub lr_encoder: f64,
    pub lr_head: f64,
    pub weight_decay: f64,
    /// Fraction of the run after which learning rates are multiplied by
    /// `lr_decay_factor`.
    pub lr_decay_at: f64,
    pub lr_decay_factor: f64,
    /// Largest frame gap between consecutive sampled frames.
    pub max_frame_gap: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            steps: 200,
            batch_size: 8,
            search_frames: 4,
            lr_encoder: 4e-5,
            lr_head: 4e-4,
            weight_decay: 1e-4,
            lr_decay_at: 0.8,
            lr_decay_factor: 0.1,
            max_frame_gap: 4,
        }
    }
}

/// Parameters of the synthetic training/evaluation scenes.
#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub seed: u64,
    pub sequences: usize,
    pub frames: usize,
    pub hue_drift: f64,
    pub scale_drift: f64,
    pub distractors: usize,
    pub occlusion_rate: f64,
    pub min_size: f64,
    pub max_size: f64,
    pub speed: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            seed: 1000,
            sequences: 32,
            frames: 40,
            hue_drift: 0.008,
            scale_drift: 0.004,
            distractors: 2,
            occlusion_rate: 0.3,
            min_size: 26.0,
            max_size: 40.0,
            speed: 2.0,
        }
    }
}

/// Which frames refresh the history with a compressed observed state.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum CompressSchedule {
    #[default]
    Even,
    Odd,
    Always,
    Never,
}

impl CompressSchedule {
    pub fn compresses(self, frame: usize) -> bool {
        match self {
            CompressSchedule::Even => frame % 2 == 0,
            CompressSchedule::Odd => frame % 2 == 1,
            CompressSchedule::Always => true,
            CompressSchedule::Never => false,
        }
    }
}

impl FromStr for CompressSchedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "even" => Ok(Self::Even),
            "odd" => Ok(Self::Odd),
            "always" => Ok(Self::Always),
            "never" => Ok(Self::Never),
            other => Err(Error::Config(format!(
                "parity must be even, odd, always or never, got `{other}`"
            ))),
        }
    }
}

impl std::fmt::Display for CompressSchedule {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Even => "even",
            Self::Odd => "odd",
            Self::Always => "always",
            Self::Never => "never",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrackConfig {
    pub threshold: f64,
    pub interval: usize,
    pub window: usize,
    pub parity: CompressSchedule,
}

impl Default for TrackConfig {
    fn default() -> Self {
        Self {
            threshold: 0.4,
            interval: 60,
            window: 500,
            parity: CompressSchedule::Even,
        }
    }
}

impl TrackConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::Config(format!("threshold {} outside [0, 1]", self.threshold)));
        }
        if self.interval == 0 || self.window == 0 {
            return Err(Error::Config("interval and window must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Config {
    pub model: ModelConfig,
    pub loss: LossWeights,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub track: TrackConfig,
    pub ablation: Ablation,
}

macro_rules! config_keys {
    ($($key:literal => $($field:ident).+),* $(,)?) => {
        const KEYS: &[&str] = &[$($key),*];

        fn set_field(cfg: &mut Config, key: &str, value: &str) -> Result<bool> {
            match key {
                $($key => cfg.$($field).+ = parse_value(key, value)?,)*
                _ => return Ok(false),
            }
            Ok(true)
        }

        fn field_text(cfg: &Config, key: &str) -> String {
            match key {
                $($key => cfg.$($field).+.to_string(),)*
                _ => unreachable!(),
            }
        }
    };
}

config_keys! {
    "model.canvas" => model.canvas,
    "model.template_size" => model.template_size,
    "model.dim" => model.dim,
    "model.heads" => model.heads,
    "model.encoder_layers" => model.encoder_layers,
    "model.decoder_layers" => model.decoder_layers,
    "model.decoder_heads" => model.decoder_heads,
    "model.ssm_layers" => model.ssm_layers,
    "model.ssm_state" => model.ssm_state,
    "model.spatial_groups" => model.spatial_groups,
    "model.mlp_ratio" => model.mlp_ratio,
    "model.head_hidden" => model.head_hidden,
    "model.context_factor" => model.context_factor,
    "loss.alpha_state" => loss.alpha_state,
    "loss.beta_recon" => loss.beta_recon,
    "loss.lambda_iou" => loss.lambda_iou,
    "loss.lambda_l1" => loss.lambda_l1,
    "loss.lambda_ssm" => loss.lambda_ssm,
    "loss.focal_alpha" => loss.focal_alpha,
    "loss.focal_beta" => loss.focal_beta,
    "train.seed" => train.seed,
    "train.steps" => train.steps,
    "train.batch_size" => train.batch_size,
    "train.search_frames" => train.search_frames,
    "train.lr_encoder" => train.lr_encoder,
    "train.lr_head" => train.lr_head,
    "train.weight_decay" => train.weight_decay,
    "train.lr_decay_at" => train.lr_decay_at,
    "train.lr_decay_factor" => train.lr_decay_factor,
    "train.max_frame_gap" => train.max_frame_gap,
    "data.seed" => data.seed,
    "data.sequences" => data.sequences,
    "data.frames" => data.frames,
    "data.hue_drift" => data.hue_drift,
    "data.scale_drift" => data.scale_drift,
    "data.distractors" => data.distractors,
    "data.occlusion_rate" => data.occlusion_rate,
    "data.min_size" => data.min_size,
    "data.max_size" => data.max_size,
    "data.speed" => data.speed,
    "track.threshold" => track.threshold,
    "track.interval" => track.interval,
    "track.window" => track.window,
    "track.parity" => track.parity,
    "ablate" => ablation,
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for key `{key}`")))
}

impl Config {
    /// Small model used by the gradient suite and fast tests.
    pub fn micro() -> Self {
        let mut c = Config::default();
        c.model = ModelConfig {
            canvas: 64,
            template_size: 32,
            dim: 16,
            heads: 2,
            encoder_layers: 1,
            decoder_layers: 1,
            decoder_heads: 2,
            ssm_layers: 3,
            ssm_state: 4,
            spatial_groups: 4,
            mlp_ratio: 2,
            head_hidden: 8,
            context_factor: 2.0,
        };
        c.data.min_size = 14.0;
        c.data.max_size = 22.0;
        c
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Config::default();
        let mut unknown = Vec::new();
        let mut seen = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", lineno + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if seen.insert(key.to_string(), lineno).is_some() {
                return Err(Error::Config(format!("duplicate key `{key}`")));
            }
            if !set_field(&mut cfg, key, value)? {
                unknown.push(key.to_string());
            }
        }
        if !unknown.is_empty() {
            return Err(Error::Config(format!("unknown keys: {}", unknown.join(", "))));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    /// Every key in canonical order; `parse(to_text())` reproduces `self`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for key in KEYS {
            let _ = writeln!(out, "{key} = {}", field_text(self, key));
        }
        out
    }

    pub fn keys() -> &'static [&'static str] {
        KEYS
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        let stride = crate::encoder::PATCH_STRIDE;
        if m.canvas % stride != 0 || m.template_size % stride != 0 {
            return Err(Error::Config(format!(
                "canvas {} and template_size {} must be divisible by {stride}",
                m.canvas, m.template_size
            )));
        }
        if m.canvas <= m.template_size {
            return Err(Error::Config("canvas must be larger than the template".into()));
        }
        if m.dim == 0 || m.heads == 0 || m.dim % m.heads != 0 || m.dim % m.decoder_heads.max(1) != 0 {
            return Err(Error::Config(format!("dim {} not divisible by the head counts", m.dim)));
        }
        if m.spatial_groups == 0 || m.dim % m.spatial_groups != 0 {
            return Err(Error::Config(format!(
                "dim {} not divisible into {} spatial groups",
                m.dim, m.spatial_groups
            )));
        }
        if m.dim % 4 != 0 {
            return Err(Error::Config("dim must be divisible by 4 for group norm".into()));
        }
        if self.train.batch_size == 0 || self.train.search_frames == 0 {
            return Err(Error::Config("batch_size and search_frames must be positive".into()));
        }
        self.track.validate()
    }
}
