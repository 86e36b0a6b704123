//! Experiment configuration in a flat `key = value` text form.
//!
//! Keys are namespaced (`model.phi`, `panel.n_firms`, ...). Blank lines and
//! lines starting with `#` are ignored; unknown or repeated keys are errors.
//! Omitted keys keep their defaults, and [`ExperimentConfig::to_text`] writes
//! every key so a config round-trips exactly.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::dgp::ModelParams;
use crate::error::{Error, Result};
use crate::forecast::DEFAULT_MIN_WINDOW;
use crate::pricing::DEFAULT_HORIZON;
use crate::stats::{DEFAULT_BINS, DEFAULT_BOOT, DEFAULT_DEGREE, DEFAULT_LEVEL, DEFAULT_TAIL_LEVEL};
use crate::strategy::{WeightForm, DEFAULT_GRID_STEP};

#[derive(Debug, Clone, PartialEq)]
pub struct PanelConfig {
    pub n_firms: usize,
    pub t_len: usize,
    pub master_seed: u64,
    pub min_window: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnalysisConfig {
    pub n_bins: usize,
    pub n_boot: usize,
    pub level: f64,
    pub degree: usize,
    pub tail_level: f64,
    /// MAD-normalize growth and forecast quantities before binning.
    pub normalize: bool,
}

/// The priced panel reuses the model's persistence, tails, lag order and
/// discount rate but has its own shock scales and size: dividend growth
/// must be small relative to the discount rate for prices to exist.
#[derive(Debug, Clone, PartialEq)]
pub struct PricingConfig {
    pub sigma_u: f64,
    pub sigma_eps: f64,
    pub n_firms: usize,
    pub t_len: usize,
    pub horizon: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StrategyConfig {
    pub grid_step: f64,
    pub weight_form: WeightForm,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub model: ModelParams,
    pub panel: PanelConfig,
    pub analysis: AnalysisConfig,
    pub pricing: PricingConfig,
    pub strategy: StrategyConfig,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            model: ModelParams::default(),
            panel: PanelConfig {
                n_firms: 200,
                t_len: 500,
                master_seed: 1,
                min_window: DEFAULT_MIN_WINDOW,
            },
            analysis: AnalysisConfig {
                n_bins: DEFAULT_BINS,
                n_boot: DEFAULT_BOOT,
                level: DEFAULT_LEVEL,
                degree: DEFAULT_DEGREE,
                tail_level: DEFAULT_TAIL_LEVEL,
                normalize: false,
            },
            pricing: PricingConfig {
                sigma_u: 0.01,
                sigma_eps: 0.01,
                n_firms: 200,
                t_len: 340,
                horizon: DEFAULT_HORIZON,
            },
            strategy: StrategyConfig {
                grid_step: DEFAULT_GRID_STEP,
                weight_form: WeightForm::Continuous,
            },
            output_dir: PathBuf::from("out"),
        }
    }
}

const KEYS: &[&str] = &[
    "model.phi",
    "model.g_bar",
    "model.nu",
    "model.sigma_u",
    "model.sigma_eps",
    "model.ar_order",
    "model.discount_rate",
    "panel.n_firms",
    "panel.t",
    "panel.master_seed",
    "panel.min_window",
    "analysis.n_bins",
    "analysis.n_boot",
    "analysis.level",
    "analysis.loess_degree",
    "analysis.tail_level",
    "analysis.normalize",
    "pricing.sigma_u",
    "pricing.sigma_eps",
    "pricing.n_firms",
    "pricing.t",
    "pricing.horizon",
    "strategy.grid_step",
    "strategy.weight_form",
    "output.dir",
];

fn parse_value<T: FromStr>(key: &str, value: &str, line: usize) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("line {line}: cannot parse `{value}` for {key}")))
}

fn parse_bool(key: &str, value: &str, line: usize) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::Config(format!("line {line}: {key} must be true or false, got `{value}`"))),
    }
}

fn parse_form(value: &str, line: usize) -> Result<WeightForm> {
    match value {
        "continuous" => Ok(WeightForm::Continuous),
        "verbatim" => Ok(WeightForm::Verbatim),
        _ => Err(Error::Config(format!(
            "line {line}: strategy.weight_form must be continuous or verbatim, got `{value}`"
        ))),
    }
}

pub fn form_name(form: WeightForm) -> &'static str {
    match form {
        WeightForm::Continuous => "continuous",
        WeightForm::Verbatim => "verbatim",
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = std::collections::HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let trimmed = raw.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let (key, value) = trimmed
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {line}: expected key = value")))?;
            let (key, value) = (key.trim(), value.trim());
            if !KEYS.contains(&key) {
                return Err(Error::Config(format!("line {line}: unknown key `{key}`")));
            }
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("line {line}: duplicate key `{key}`")));
            }
            cfg.set(key, value, line)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, key: &str, value: &str, line: usize) -> Result<()> {
        let m = &mut self.model;
        match key {
            "model.phi" => m.phi = parse_value(key, value, line)?,
            "model.g_bar" => m.g_bar = parse_value(key, value, line)?,
            "model.nu" => m.nu = parse_value(key, value, line)?,
            "model.sigma_u" => m.sigma_u = parse_value(key, value, line)?,
            "model.sigma_eps" => m.sigma_eps = parse_value(key, value, line)?,
            "model.ar_order" => m.ar_order = parse_value(key, value, line)?,
            "model.discount_rate" => m.discount_rate = parse_value(key, value, line)?,
            "panel.n_firms" => self.panel.n_firms = parse_value(key, value, line)?,
            "panel.t" => self.panel.t_len = parse_value(key, value, line)?,
            "panel.master_seed" => self.panel.master_seed = parse_value(key, value, line)?,
            "panel.min_window" => self.panel.min_window = parse_value(key, value, line)?,
            "analysis.n_bins" => self.analysis.n_bins = parse_value(key, value, line)?,
            "analysis.n_boot" => self.analysis.n_boot = parse_value(key, value, line)?,
            "analysis.level" => self.analysis.level = parse_value(key, value, line)?,
            "analysis.loess_degree" => self.analysis.degree = parse_value(key, value, line)?,
            "analysis.tail_level" => self.analysis.tail_level = parse_value(key, value, line)?,
            "analysis.normalize" => self.analysis.normalize = parse_bool(key, value, line)?,
            "pricing.sigma_u" => self.pricing.sigma_u = parse_value(key, value, line)?,
            "pricing.sigma_eps" => self.pricing.sigma_eps = parse_value(key, value, line)?,
            "pricing.n_firms" => self.pricing.n_firms = parse_value(key, value, line)?,
            "pricing.t" => self.pricing.t_len = parse_value(key, value, line)?,
            "pricing.horizon" => self.pricing.horizon = parse_value(key, value, line)?,
            "strategy.grid_step" => self.strategy.grid_step = parse_value(key, value, line)?,
            "strategy.weight_form" => self.strategy.weight_form = parse_form(value, line)?,
            "output.dir" => {
                if value.is_empty() {
                    return Err(Error::Config(format!("line {line}: output.dir is empty")));
                }
                self.output_dir = PathBuf::from(value)
            }
            _ => unreachable!("key list checked"),
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Parameter checks that do not need data; module-specific checks run again where used.
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.pricing_params().validate()?;
        let bad = |msg: String| Err(Error::Config(msg));
        if self.panel.n_firms < 1 || self.pricing.n_firms < 1 {
            return bad("n_firms must be at least 1".into());
        }
        if self.panel.min_window < self.model.ar_order + 2 {
            return bad(format!(
                "panel.min_window {} is below ar_order + 2",
                self.panel.min_window
            ));
        }
        if self.panel.t_len < 1 || self.pricing.t_len < 1 {
            return bad("panel lengths must be at least 1".into());
        }
        if self.analysis.n_bins < 4 {
            return bad("analysis.n_bins must be at least 4".into());
        }
        if !(self.analysis.level > 0.0 && self.analysis.level < 1.0) {
            return bad("analysis.level must be in (0, 1)".into());
        }
        if !(self.analysis.tail_level > 0.0 && self.analysis.tail_level < 1.0) {
            return bad("analysis.tail_level must be in (0, 1)".into());
        }
        if self.pricing.horizon < 1 {
            return bad("pricing.horizon must be at least 1".into());
        }
        crate::strategy::inflection_grid(self.strategy.grid_step)?;
        Ok(())
    }

    /// Model parameters of the priced panel.
    pub fn pricing_params(&self) -> ModelParams {
        ModelParams {
            sigma_u: self.pricing.sigma_u,
            sigma_eps: self.pricing.sigma_eps,
            ..self.model.clone()
        }
    }

    /// Every key in canonical order, numbers in shortest round-trip form.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        put("model.phi", m.phi.to_string());
        put("model.g_bar", m.g_bar.to_string());
        put("model.nu", m.nu.to_string());
        put("model.sigma_u", m.sigma_u.to_string());
        put("model.sigma_eps", m.sigma_eps.to_string());
        put("model.ar_order", m.ar_order.to_string());
        put("model.discount_rate", m.discount_rate.to_string());
        put("panel.n_firms", self.panel.n_firms.to_string());
        put("panel.t", self.panel.t_len.to_string());
        put("panel.master_seed", self.panel.master_seed.to_string());
        put("panel.min_window", self.panel.min_window.to_string());
        put("analysis.n_bins", self.analysis.n_bins.to_string());
        put("analysis.n_boot", self.analysis.n_boot.to_string());
        put("analysis.level", self.analysis.level.to_string());
        put("analysis.loess_degree", self.analysis.degree.to_string());
        put("analysis.tail_level", self.analysis.tail_level.to_string());
        put("analysis.normalize", self.analysis.normalize.to_string());
        put("pricing.sigma_u", self.pricing.sigma_u.to_string());
        put("pricing.sigma_eps", self.pricing.sigma_eps.to_string());
        put("pricing.n_firms", self.pricing.n_firms.to_string());
        put("pricing.t", self.pricing.t_len.to_string());
        put("pricing.horizon", self.pricing.horizon.to_string());
        put("strategy.grid_step", self.strategy.grid_step.to_string());
        put("strategy.weight_form", form_name(self.strategy.weight_form).to_string());
        put("output.dir", self.output_dir.display().to_string());
        s
    }

    /// SHA-256 of the canonical text.
    pub fn hash(&self) -> String {
        hex_digest(self.to_text().as_bytes())
    }
}

pub fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .fold(String::with_capacity(64), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
}
