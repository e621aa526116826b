//! Run configuration, loadable from TOML or JSON. Every field has a default
//! so partial files work; [`HybridConfig::paper_literal`] switches every
//! constant to its theoretical formula.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::imitate::{EtaRule, ImitationParams, InnerSolverParams, InnerStep};
use crate::occupancy::XiRule;
use crate::offline_density::CutoffMode;
use crate::vilcb::PAPER_TRIM_CONSTANT;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HybridConfig {
    pub k_off: usize,
    pub k_on: usize,
    pub delta: f64,
    pub seed: u64,
    pub c_off: f64,
    pub cutoff_mode: CutoffMode,
    pub xi: XiRule,
    pub c_b: f64,
    /// Trimming constant of the two-fold subsampling.
    pub c_trim: f64,
    pub eta: EtaRule,
    /// FTRL rounds; `None` means `⌈2 (K^on H)² ln A⌉`.
    pub t_max_ftrl: Option<usize>,
    pub inner_step: InnerStep,
    /// Inner Frank-Wolfe cap; `None` means `⌈cap_scale · (K^on H)⁴ / S²⌉`.
    pub inner_cap: Option<usize>,
    pub cap_scale: f64,
    pub warm_start: bool,
    /// Overrides for the coverage Frank-Wolfe caps (`None` = `⌊50 n ln(K^on H)⌋`).
    pub stage1_cap: Option<usize>,
    pub explore_cap: Option<usize>,
}

impl Default for HybridConfig {
    fn default() -> Self {
        Self {
            k_off: 2000,
            k_on: 2000,
            delta: 0.1,
            seed: 0,
            c_off: 2.0,
            cutoff_mode: CutoffMode::Desk,
            xi: XiRule::Desk { xi_scale: 1.0 },
            c_b: DESK_C_B,
            c_trim: DESK_C_TRIM,
            eta: EtaRule::Adaptive,
            t_max_ftrl: Some(50),
            inner_step: InnerStep::LineSearch,
            inner_cap: Some(2000),
            cap_scale: 1.0,
            warm_start: true,
            stage1_cap: None,
            explore_cap: None,
        }
    }
}

pub const DESK_C_B: f64 = 0.5;
pub const DESK_C_TRIM: f64 = 1.0;

impl HybridConfig {
    /// Same budgets, delta and seed, with every constant at its theoretical value.
    pub fn paper_literal(&self) -> Self {
        Self {
            k_off: self.k_off,
            k_on: self.k_on,
            delta: self.delta,
            seed: self.seed,
            c_off: self.c_off,
            cutoff_mode: CutoffMode::PaperLiteral,
            xi: XiRule::PaperLiteral { c_xi: 1.0 },
            c_b: 16.0,
            c_trim: PAPER_TRIM_CONSTANT,
            eta: EtaRule::PaperLiteral,
            t_max_ftrl: None,
            inner_step: InnerStep::Constant { step_scale: 1.0 },
            inner_cap: None,
            cap_scale: 1.0,
            warm_start: false,
            stage1_cap: None,
            explore_cap: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return invalid(format!("delta must lie in (0, 1), got {}", self.delta));
        }
        let nonneg = [("c_off", self.c_off), ("c_b", self.c_b), ("c_trim", self.c_trim), ("cap_scale", self.cap_scale)];
        if let Some((name, v)) = nonneg.iter().find(|(_, v)| !(*v >= 0.0) || !v.is_finite()) {
            return invalid(format!("{name} must be a finite non-negative number, got {v}"));
        }
        if self.t_max_ftrl == Some(0) {
            return invalid("t_max_ftrl must be at least 1");
        }
        match self.xi {
            XiRule::Desk { xi_scale: x } | XiRule::PaperLiteral { c_xi: x } if !(x >= 0.0) => {
                return invalid("xi constant must be non-negative")
            }
            _ => {}
        }
        Ok(())
    }

    /// Budget checks for the hybrid split.
    pub fn validate_hybrid(&self, horizon: usize) -> Result<()> {
        self.validate()?;
        if self.k_on < 3 * horizon {
            return invalid(format!("k_on = {} is below 3H = {}", self.k_on, 3 * horizon));
        }
        if self.k_off < 2 {
            return invalid(format!("k_off = {} is below 2", self.k_off));
        }
        Ok(())
    }

    pub fn ftrl_rounds(&self, horizon: usize, num_actions: usize) -> usize {
        self.t_max_ftrl.unwrap_or_else(|| {
            let kh = (self.k_on * horizon) as f64;
            (2.0 * kh * kh * (num_actions as f64).ln()).ceil().max(1.0) as usize
        })
    }

    pub fn imitation_params(&self, horizon: usize, num_states: usize, num_actions: usize) -> ImitationParams {
        let inner = match self.inner_cap {
            Some(cap) => InnerSolverParams { step: self.inner_step, cap },
            None => {
                let literal = InnerSolverParams::constant_step(1.0, self.cap_scale, self.k_on, horizon, num_states);
                InnerSolverParams { step: self.inner_step, cap: literal.cap }
            }
        };
        ImitationParams { eta: self.eta, t_max: self.ftrl_rounds(horizon, num_actions), warm_start: self.warm_start, inner }
    }

    pub fn threshold_xi(&self, horizon: usize, num_states: usize, num_actions: usize) -> f64 {
        self.xi.value(horizon, num_states, num_actions, self.delta)
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Toml(e.to_string()))
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Format chosen by extension (`.toml` or `.json`); anything else is tried as JSON, then TOML.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::load_over(path, &Self::default())
    }

    /// Like [`HybridConfig::load`], but fields missing from the file come from `base`
    /// instead of the defaults.
    pub fn load_over(path: impl AsRef<Path>, base: &Self) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        let parse_toml = |t: &str| toml::from_str::<serde_json::Value>(t).map_err(|e| Error::Toml(e.to_string()));
        let overlay = match path.extension().and_then(|e| e.to_str()) {
            Some("toml") => parse_toml(&text)?,
            Some("json") => serde_json::from_str(&text)?,
            _ => serde_json::from_str(&text).or_else(|_| parse_toml(&text))?,
        };
        let cfg = Self::overlay(base, overlay)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Replace the top-level fields of `base` present in `overlay`.
    pub fn overlay(base: &Self, overlay: serde_json::Value) -> Result<Self> {
        let serde_json::Value::Object(fields) = overlay else {
            return invalid("config must be a table of fields");
        };
        let mut merged = serde_json::to_value(base)?;
        if let serde_json::Value::Object(target) = &mut merged {
            target.extend(fields);
        }
        Ok(serde_json::from_value(merged)?)
    }
}
