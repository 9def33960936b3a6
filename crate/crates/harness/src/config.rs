//! Experiment configuration.

use std::path::{Path, PathBuf};

use repp_core::geometry::{BilliardTable, PhasePoint, TableSpec};
use repp_core::induced::InducingSpec;
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("invalid config JSON: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    FullMap,
    Induced,
}

/// Declared horizon class; selects the exponent in the annulus bound.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum HorizonClass {
    #[default]
    Finite,
    Infinite,
}

impl HorizonClass {
    pub fn xi(self) -> f64 {
        match self {
            HorizonClass::Finite => 1.0,
            HorizonClass::Infinite => 0.8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Targets {
    /// Draw this many targets from `mu` (or `mu_M` in induced mode).
    Random(usize),
    Explicit(Vec<PhasePoint>),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct Levels {
    /// Largest accepted total variation distance to `Poisson(t)`.
    pub tv_max: f64,
    /// Significance level of the inter-arrival KS test.
    pub ks_alpha: f64,
    /// Fraction of non-flagged targets that must pass.
    pub pass_fraction: f64,
    /// Largest accepted Kac z-score.
    pub kac_z_max: f64,
}

impl Default for Levels {
    fn default() -> Self {
        Self { tv_max: 0.05, ks_alpha: 0.01, pass_fraction: 0.9, kac_z_max: 3.0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct InducedSettings {
    pub return_cap: u64,
    /// Samples of the Kac check; 0 skips it.
    pub kac_samples: usize,
    /// Samples of the return-time tail; 0 skips it.
    pub tail_samples: usize,
    pub tail_n_max: u64,
    /// Returns per start in the lifted comparison.
    pub lifted_returns: usize,
    /// Starts per cell of the lifted comparison; 0 skips it.
    pub lifted_starts: usize,
}

impl Default for InducedSettings {
    fn default() -> Self {
        Self {
            return_cap: repp_core::induced::DEFAULT_RETURN_CAP,
            kac_samples: 100_000,
            tail_samples: 100_000,
            tail_n_max: 100,
            lifted_returns: 10,
            lifted_starts: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct DprimeSettings {
    pub k_values: Vec<u64>,
    pub samples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct D3Settings {
    pub gaps: Vec<u64>,
    /// Index intervals `[a, b)` forming the set `A`.
    pub window: Vec<(u64, u64)>,
    pub samples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct CorrelationSettings {
    pub lags: Vec<u64>,
    pub samples: usize,
    /// Width of the bump test functions in chart units.
    pub bump_width: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct AnnulusSettings {
    pub cases: usize,
    pub eps_min: f64,
    pub eps_max: f64,
    pub samples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct ShortReturnSettings {
    pub k_values: Vec<u64>,
    pub samples: usize,
    pub seeds: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct Diagnostics {
    pub dprime: Option<DprimeSettings>,
    pub d3: Option<D3Settings>,
    pub correlation: Option<CorrelationSettings>,
    pub annulus: Option<AnnulusSettings>,
    pub short_returns: Option<ShortReturnSettings>,
}

impl Diagnostics {
    pub fn is_empty(&self) -> bool {
        self == &Diagnostics::default()
    }
}

/// One experiment grid: table, targets, `(n, tau)` cells and windows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub table: TableSpec,
    #[serde(default)]
    pub horizon_class: HorizonClass,
    #[serde(default)]
    pub mode: Mode,
    /// Required in induced mode.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inducing: Option<InducingSpec>,
    pub targets: Targets,
    pub n_values: Vec<u64>,
    pub tau_values: Vec<f64>,
    pub realizations_per_cell: usize,
    /// Window lengths `t` of `[0, t)` in rescaled time.
    pub windows: Vec<f64>,
    /// Master seed; the CLI `--seed` flag overrides it.
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub levels: Levels,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub induced: InducedSettings,
    #[serde(default, skip_serializing_if = "Diagnostics::is_empty")]
    pub diagnostics: Diagnostics,
    /// Orbit length `N0` for the near-periodicity check of targets.
    #[serde(default = "default_separation_steps")]
    pub separation_steps: usize,
    /// Orbits are extended up to this multiple of `v_n` to observe a second event.
    #[serde(default = "default_gap_horizon")]
    pub gap_horizon: f64,
}

fn default_separation_steps() -> usize {
    10
}

fn default_gap_horizon() -> f64 {
    50.0
}

fn positive(name: &str, ok: bool) -> Result<(), ConfigError> {
    if ok {
        Ok(())
    } else {
        Err(ConfigError::Invalid(format!("{name} must be positive")))
    }
}

fn level(name: &str, x: f64) -> Result<(), ConfigError> {
    if x > 0.0 && x < 1.0 {
        Ok(())
    } else {
        Err(ConfigError::Invalid(format!("{name} must lie in (0, 1), got {x}")))
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn build_table(&self) -> Result<BilliardTable, ConfigError> {
        BilliardTable::from_spec(&self.table).map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let table = self.build_table()?;
        match &self.targets {
            Targets::Random(k) => positive("targets.random", *k > 0)?,
            Targets::Explicit(v) => {
                positive("number of explicit targets", !v.is_empty())?;
                for p in v {
                    table.validate_point(p).map_err(|e| ConfigError::Invalid(format!("target: {e}")))?;
                }
            }
        }
        positive("n_values", !self.n_values.is_empty() && self.n_values.iter().all(|&n| n > 0))?;
        positive(
            "tau_values",
            !self.tau_values.is_empty() && self.tau_values.iter().all(|&t| t > 0.0 && t.is_finite()),
        )?;
        positive("realizations_per_cell", self.realizations_per_cell > 0)?;
        positive("windows", !self.windows.is_empty() && self.windows.iter().all(|&t| t > 0.0 && t.is_finite()))?;
        level("levels.tv_max", self.levels.tv_max)?;
        level("levels.ks_alpha", self.levels.ks_alpha)?;
        level("levels.pass_fraction", self.levels.pass_fraction)?;
        positive("levels.kac_z_max", self.levels.kac_z_max > 0.0)?;
        positive("separation_steps", self.separation_steps >= 2)?;
        positive("gap_horizon", self.gap_horizon > 0.0)?;
        let ind = &self.induced;
        positive("induced.return_cap", ind.return_cap > 0)?;
        if ind.kac_samples == 1 {
            return Err(ConfigError::Invalid("induced.kac_samples must be 0 (skip) or at least 2".into()));
        }
        positive("induced.lifted_returns", ind.lifted_returns > 0)?;
        match (self.mode, &self.inducing) {
            (Mode::Induced, None) => {
                return Err(ConfigError::Invalid("induced mode needs an inducing set".into()));
            }
            (_, Some(spec)) => {
                repp_core::induced::InducedSystem::new(&table, spec.clone())
                    .map_err(|e| ConfigError::Invalid(e.to_string()))?;
            }
            _ => {}
        }
        let d = &self.diagnostics;
        if let Some(s) = &d.dprime {
            positive("diagnostics.dprime.samples", s.samples > 1)?;
            positive("diagnostics.dprime.k_values", !s.k_values.is_empty() && s.k_values.iter().all(|&k| k >= 2))?;
        }
        if let Some(s) = &d.d3 {
            positive("diagnostics.d3.samples", s.samples > 1)?;
            positive("diagnostics.d3.gaps", !s.gaps.is_empty())?;
        }
        if let Some(s) = &d.correlation {
            positive("diagnostics.correlation.samples", s.samples > 1)?;
            positive("diagnostics.correlation.bump_width", s.bump_width > 0.0)?;
            positive("diagnostics.correlation.lags", s.lags.windows(2).all(|w| w[0] < w[1]))?;
        }
        if let Some(s) = &d.annulus {
            positive("diagnostics.annulus.samples", s.samples > 1 && s.cases > 0)?;
            positive("diagnostics.annulus.eps range", s.eps_min > 0.0 && s.eps_min <= s.eps_max)?;
        }
        if let Some(s) = &d.short_returns {
            positive("diagnostics.short_returns.samples", s.samples > 0 && s.seeds > 0)?;
            positive("diagnostics.short_returns.k_values", s.k_values.iter().all(|&k| k >= 3))?;
        }
        Ok(())
    }
}

/// JSON schema of [`ExperimentConfig`].
pub fn config_schema() -> String {
    serde_json::to_string_pretty(&schemars::schema_for!(ExperimentConfig)).expect("schema serializes")
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) const SMOKE: &str = r#"{
        "table": {"kind": "lorentz", "scatterers": [
            {"cx": 0.25, "cy": 0.5, "radius": 0.2},
            {"cx": 0.75, "cy": 0.5, "radius": 0.2}]},
        "horizon_class": "infinite",
        "targets": {"random": 1},
        "n_values": [10000],
        "tau_values": [1.0],
        "realizations_per_cell": 500,
        "windows": [1.0]
    }"#;

    #[test]
    fn parses_with_defaults_and_round_trips() {
        let cfg = ExperimentConfig::from_json(SMOKE).unwrap();
        assert_eq!(cfg.mode, Mode::FullMap);
        assert_eq!(cfg.levels, Levels::default());
        assert_eq!(cfg.separation_steps, 10);
        let back = ExperimentConfig::from_json(&cfg.to_json()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn rejects_bad_configs() {
        let mut v: serde_json::Value = serde_json::from_str(SMOKE).unwrap();
        v["realizations_per_cell"] = 0.into();
        assert!(matches!(ExperimentConfig::from_json(&v.to_string()), Err(ConfigError::Invalid(_))));
        let mut v: serde_json::Value = serde_json::from_str(SMOKE).unwrap();
        v["levels"] = serde_json::json!({"ks_alpha": 1.5});
        assert!(ExperimentConfig::from_json(&v.to_string()).is_err());
        let mut v: serde_json::Value = serde_json::from_str(SMOKE).unwrap();
        v["mode"] = "induced".into();
        assert!(ExperimentConfig::from_json(&v.to_string()).is_err());
        v["inducing"] = serde_json::json!({"name": "stadium_arcs"});
        assert!(ExperimentConfig::from_json(&v.to_string()).is_err());
        let mut v: serde_json::Value = serde_json::from_str(SMOKE).unwrap();
        v["bogus"] = 1.into();
        assert!(matches!(ExperimentConfig::from_json(&v.to_string()), Err(ConfigError::Parse(_))));
    }

    #[test]
    fn schema_names_every_field() {
        let schema = config_schema();
        for key in ["table", "targets", "n_values", "tau_values", "realizations_per_cell", "windows", "inducing"] {
            assert!(schema.contains(key), "{key}");
        }
    }
}
