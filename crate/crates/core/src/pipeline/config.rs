//! INI configuration with `[model]`, `[train]`, `[providers]` and `[video]`
//! sections. Every key has a default; unknown sections and keys are errors.

use std::path::Path;
use std::str::FromStr;

use ini::Ini;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{HmScope, LossWeights};
use crate::nets::GeneratorConfig;
use crate::perception::ProviderKeys;
use crate::video::{FlowMode, FtAggregation};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub resolution: usize,
    pub latent_width: usize,
    pub channel_cap: usize,
    pub channel_budget: usize,
    pub channel_scale: f64,
    pub noise: bool,
    /// Structure rows; `None` applies the proportional split rule.
    pub structure_k: Option<usize>,
    pub num_landmarks: usize,
    pub heatmap_grid: usize,
    pub heatmap_sigma: f64,
    /// Threshold downsampled masks at 0.5 instead of blending fractionally.
    pub hard_mask: bool,
    /// Keep the source appearance rows (and drop the style loss).
    pub disable_appearance_swap: bool,
    /// Composite the side output over the target at pixel level.
    pub disable_background_transfer: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let g = GeneratorConfig::toy(64);
        Self {
            resolution: g.resolution,
            latent_width: g.latent_width,
            channel_cap: g.channel_cap,
            channel_budget: g.channel_budget,
            channel_scale: g.channel_scale,
            noise: false,
            structure_k: None,
            num_landmarks: 68,
            heatmap_grid: 32,
            heatmap_sigma: 1.0,
            hard_mask: false,
            disable_appearance_swap: false,
            disable_background_transfer: false,
        }
    }
}

impl ModelConfig {
    pub fn generator(&self, seed: u64) -> GeneratorConfig {
        GeneratorConfig {
            resolution: self.resolution,
            latent_width: self.latent_width,
            channel_cap: self.channel_cap,
            channel_budget: self.channel_budget,
            channel_scale: self.channel_scale,
            noise: self.noise,
            noise_seed: seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.generator(0).validate()?;
        if self.num_landmarks == 0 {
            return Err(Error::InvalidConfig("num_landmarks must be positive".into()));
        }
        if !self.heatmap_grid.is_power_of_two() || self.heatmap_grid < 8 {
            return Err(Error::InvalidConfig(format!(
                "heatmap_grid must be a power of two >= 8, got {}",
                self.heatmap_grid
            )));
        }
        if !(self.heatmap_sigma > 0.0 && self.heatmap_sigma.is_finite()) {
            return Err(Error::InvalidConfig("heatmap_sigma must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub iterations: usize,
    pub weights: LossWeights,
    pub alpha: f64,
    pub p_same: f64,
    pub seed: u64,
    pub hm_scope: HmScope,
    /// Update the generator weights during swap training.
    pub train_generator: bool,
    pub train_inverter: bool,
    /// Weight of the optional discriminator gradient penalty; 0 disables it.
    pub r1_gamma: f64,
    pub pretrain_iterations: usize,
    pub pretrain_learning_rate: f64,
    /// Write an intermediate checkpoint every this many iterations (0: only at the end).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            batch_size: 4,
            iterations: 1000,
            weights: LossWeights::default(),
            alpha: 0.8,
            p_same: 0.2,
            seed: 0,
            hm_scope: HmScope::Mask,
            train_generator: false,
            train_inverter: true,
            r1_gamma: 0.0,
            pretrain_iterations: 500,
            pretrain_learning_rate: 1e-3,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("learning_rate", self.learning_rate),
            ("epsilon", self.epsilon),
            ("pretrain_learning_rate", self.pretrain_learning_rate),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidConfig(format!("{name} must be positive, got {v}")));
            }
        }
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::InvalidConfig(format!("{name} must lie in [0, 1), got {v}")));
            }
        }
        if !(0.0..=1.0).contains(&self.p_same) {
            return Err(Error::InvalidConfig(format!("p_same must lie in [0, 1], got {}", self.p_same)));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be positive".into()));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) || !(self.r1_gamma >= 0.0 && self.r1_gamma.is_finite()) {
            return Err(Error::InvalidConfig("alpha and r1_gamma must be finite and >= 0".into()));
        }
        self.weights.validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum VideoMode {
    #[default]
    Independent,
    Temporal,
}

impl FromStr for VideoMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "independent" => Ok(Self::Independent),
            "temporal" => Ok(Self::Temporal),
            other => Err(Error::InvalidConfig(format!(
                "video mode must be independent or temporal, got `{other}`"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoConfig {
    pub mode: VideoMode,
    /// Optimization steps over the per-frame structure codes in temporal mode.
    pub steps: usize,
    pub learning_rate: f64,
    pub lambda_ct: f64,
    pub lambda_ft: f64,
    pub lambda_id: f64,
    pub lambda_lmk: f64,
    pub flow_mode: FlowMode,
    pub ft_aggregation: FtAggregation,
}

impl Default for VideoConfig {
    fn default() -> Self {
        let w = LossWeights::default();
        Self {
            mode: VideoMode::Independent,
            steps: 10,
            learning_rate: 0.05,
            lambda_ct: 1.0,
            lambda_ft: 1.0,
            lambda_id: w.id,
            lambda_lmk: w.lmk,
            flow_mode: FlowMode::Literal,
            ft_aggregation: FtAggregation::Group,
        }
    }
}

impl VideoConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_ct", self.lambda_ct),
            ("lambda_ft", self.lambda_ft),
            ("lambda_id", self.lambda_id),
            ("lambda_lmk", self.lambda_lmk),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidConfig(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig("video learning_rate must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
pub struct Config {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub providers: ProviderKeys,
    pub video: VideoConfig,
}

fn parse<T: FromStr>(section: &str, key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::InvalidConfig(format!("[{section}] {key}: cannot parse `{value}`")))
}

fn parse_bool(section: &str, key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "yes" | "1" | "on" => Ok(true),
        "false" | "no" | "0" | "off" => Ok(false),
        other => Err(Error::InvalidConfig(format!("[{section}] {key}: expected a boolean, got `{other}`"))),
    }
}

fn unknown(section: &str, key: &str) -> Error {
    Error::InvalidConfig(format!("unknown key `{key}` in [{section}]"))
}

impl Config {
    pub fn from_ini_str(text: &str) -> Result<Self> {
        let ini = Ini::load_from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        let mut cfg = Config::default();
        for (section, props) in ini.iter() {
            let Some(section) = section else {
                if let Some((key, _)) = props.iter().next() {
                    return Err(Error::InvalidConfig(format!("key `{key}` outside of any section")));
                }
                continue;
            };
            for (key, value) in props.iter() {
                match section {
                    "model" => cfg.set_model(key, value)?,
                    "train" => cfg.set_train(key, value)?,
                    "providers" => cfg.set_provider(key, value)?,
                    "video" => cfg.set_video(key, value)?,
                    other => return Err(Error::InvalidConfig(format!("unknown section [{other}]"))),
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_ini_str(&text).map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.video.validate()
    }

    fn set_model(&mut self, key: &str, v: &str) -> Result<()> {
        let m = &mut self.model;
        let s = "model";
        match key {
            "resolution" => m.resolution = parse(s, key, v)?,
            "latent_width" => m.latent_width = parse(s, key, v)?,
            "channel_cap" => m.channel_cap = parse(s, key, v)?,
            "channel_budget" => m.channel_budget = parse(s, key, v)?,
            "channel_scale" => m.channel_scale = parse(s, key, v)?,
            "noise" => m.noise = parse_bool(s, key, v)?,
            "structure_k" => {
                m.structure_k = match v.trim() {
                    "auto" | "" => None,
                    n => Some(parse(s, key, n)?),
                }
            }
            "num_landmarks" => m.num_landmarks = parse(s, key, v)?,
            "heatmap_grid" => m.heatmap_grid = parse(s, key, v)?,
            "heatmap_sigma" => m.heatmap_sigma = parse(s, key, v)?,
            "hard_mask" => m.hard_mask = parse_bool(s, key, v)?,
            "disable_appearance_swap" => m.disable_appearance_swap = parse_bool(s, key, v)?,
            "disable_background_transfer" => m.disable_background_transfer = parse_bool(s, key, v)?,
            _ => return Err(unknown(s, key)),
        }
        Ok(())
    }

    fn set_train(&mut self, key: &str, v: &str) -> Result<()> {
        let t = &mut self.train;
        let s = "train";
        match key {
            "learning_rate" => t.learning_rate = parse(s, key, v)?,
            "beta1" => t.beta1 = parse(s, key, v)?,
            "beta2" => t.beta2 = parse(s, key, v)?,
            "epsilon" => t.epsilon = parse(s, key, v)?,
            "batch_size" => t.batch_size = parse(s, key, v)?,
            "iterations" => t.iterations = parse(s, key, v)?,
            "lambda_adv" => t.weights.adv = parse(s, key, v)?,
            "lambda_id" => t.weights.id = parse(s, key, v)?,
            "lambda_lmk" => t.weights.lmk = parse(s, key, v)?,
            "lambda_rec" => t.weights.rec = parse(s, key, v)?,
            "lambda_st" => t.weights.st = parse(s, key, v)?,
            "alpha" => t.alpha = parse(s, key, v)?,
            "p_same" => t.p_same = parse(s, key, v)?,
            "seed" => t.seed = parse(s, key, v)?,
            "hm_scope" => t.hm_scope = v.trim().parse()?,
            "train_generator" => t.train_generator = parse_bool(s, key, v)?,
            "train_inverter" => t.train_inverter = parse_bool(s, key, v)?,
            "r1_gamma" => t.r1_gamma = parse(s, key, v)?,
            "pretrain_iterations" => t.pretrain_iterations = parse(s, key, v)?,
            "pretrain_learning_rate" => t.pretrain_learning_rate = parse(s, key, v)?,
            "checkpoint_every" => t.checkpoint_every = parse(s, key, v)?,
            _ => return Err(unknown(s, key)),
        }
        Ok(())
    }

    fn set_provider(&mut self, key: &str, v: &str) -> Result<()> {
        let p = &mut self.providers;
        let v = v.trim().to_string();
        match key {
            "identity" => p.identity = v,
            "landmarks" => p.landmarks = v,
            "perceptual" => p.perceptual = v,
            "flow" => p.flow = v,
            "pose" => p.pose = v,
            "expression" => p.expression = v,
            _ => return Err(unknown("providers", key)),
        }
        Ok(())
    }

    fn set_video(&mut self, key: &str, v: &str) -> Result<()> {
        let c = &mut self.video;
        let s = "video";
        match key {
            "mode" => c.mode = v.trim().parse()?,
            "steps" => c.steps = parse(s, key, v)?,
            "learning_rate" => c.learning_rate = parse(s, key, v)?,
            "lambda_ct" => c.lambda_ct = parse(s, key, v)?,
            "lambda_ft" => c.lambda_ft = parse(s, key, v)?,
            "lambda_id" => c.lambda_id = parse(s, key, v)?,
            "lambda_lmk" => c.lambda_lmk = parse(s, key, v)?,
            "flow_mode" => c.flow_mode = v.trim().parse()?,
            "ft_aggregation" => c.ft_aggregation = v.trim().parse()?,
            _ => return Err(unknown(s, key)),
        }
        Ok(())
    }

    /// Every key with its current value, in the file layout read by
    /// [`Config::from_ini_str`].
    pub fn to_ini_string(&self) -> String {
        let (m, t, p, v) = (&self.model, &self.train, &self.providers, &self.video);
        let mut ini = Ini::new();
        ini.with_section(Some("model"))
            .set("resolution", m.resolution.to_string())
            .set("latent_width", m.latent_width.to_string())
            .set("channel_cap", m.channel_cap.to_string())
            .set("channel_budget", m.channel_budget.to_string())
            .set("channel_scale", m.channel_scale.to_string())
            .set("noise", m.noise.to_string())
            .set("structure_k", m.structure_k.map_or("auto".to_string(), |k| k.to_string()))
            .set("num_landmarks", m.num_landmarks.to_string())
            .set("heatmap_grid", m.heatmap_grid.to_string())
            .set("heatmap_sigma", m.heatmap_sigma.to_string())
            .set("hard_mask", m.hard_mask.to_string())
            .set("disable_appearance_swap", m.disable_appearance_swap.to_string())
            .set("disable_background_transfer", m.disable_background_transfer.to_string());
        ini.with_section(Some("train"))
            .set("learning_rate", t.learning_rate.to_string())
            .set("beta1", t.beta1.to_string())
            .set("beta2", t.beta2.to_string())
            .set("epsilon", t.epsilon.to_string())
            .set("batch_size", t.batch_size.to_string())
            .set("iterations", t.iterations.to_string())
            .set("lambda_adv", t.weights.adv.to_string())
            .set("lambda_id", t.weights.id.to_string())
            .set("lambda_lmk", t.weights.lmk.to_string())
            .set("lambda_rec", t.weights.rec.to_string())
            .set("lambda_st", t.weights.st.to_string())
            .set("alpha", t.alpha.to_string())
            .set("p_same", t.p_same.to_string())
            .set("seed", t.seed.to_string())
            .set("hm_scope", if t.hm_scope == HmScope::Mask { "mask" } else { "global" })
            .set("train_generator", t.train_generator.to_string())
            .set("train_inverter", t.train_inverter.to_string())
            .set("r1_gamma", t.r1_gamma.to_string())
            .set("pretrain_iterations", t.pretrain_iterations.to_string())
            .set("pretrain_learning_rate", t.pretrain_learning_rate.to_string())
            .set("checkpoint_every", t.checkpoint_every.to_string());
        ini.with_section(Some("providers"))
            .set("identity", p.identity.clone())
            .set("landmarks", p.landmarks.clone())
            .set("perceptual", p.perceptual.clone())
            .set("flow", p.flow.clone())
            .set("pose", p.pose.clone())
            .set("expression", p.expression.clone());
        ini.with_section(Some("video"))
            .set("mode", if v.mode == VideoMode::Independent { "independent" } else { "temporal" })
            .set("steps", v.steps.to_string())
            .set("learning_rate", v.learning_rate.to_string())
            .set("lambda_ct", v.lambda_ct.to_string())
            .set("lambda_ft", v.lambda_ft.to_string())
            .set("lambda_id", v.lambda_id.to_string())
            .set("lambda_lmk", v.lambda_lmk.to_string())
            .set("flow_mode", if v.flow_mode == FlowMode::Literal { "literal" } else { "midpoint" })
            .set(
                "ft_aggregation",
                if v.ft_aggregation == FtAggregation::Group { "group" } else { "plain_mse" },
            );
        let mut buf = Vec::new();
        ini.write_to(&mut buf).expect("writing to memory cannot fail");
        String::from_utf8(buf).expect("ini output is utf-8")
    }
}
