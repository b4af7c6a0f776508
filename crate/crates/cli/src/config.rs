//! Tolerances and simulation settings, overridable from a TOML file.

use std::path::Path;

use anyhow::Context;
use perpetua::quadrature::VerdictOptions;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub verdict: VerdictOptions,
    pub sim: SimSettings,
    pub validate: ValidateSettings,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimSettings {
    pub dt: f64,
    pub paths: usize,
    pub seed: u64,
    pub t_max: f64,
    pub boundary_guard: f64,
}

impl Default for SimSettings {
    fn default() -> Self {
        SimSettings {
            dt: 1e-4,
            paths: 10_000,
            seed: 0,
            t_max: 1e3,
            boundary_guard: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ValidateSettings {
    /// KS significance level.
    pub alpha: f64,
    /// Both samples are compared after censoring at this functional value.
    pub functional_cap: f64,
    /// Horizons of the growth diagnostic.
    pub horizons: Vec<f64>,
    pub growth_paths: usize,
    pub growth_dt: f64,
}

impl Default for ValidateSettings {
    fn default() -> Self {
        ValidateSettings {
            alpha: 0.01,
            functional_cap: 4.0,
            horizons: vec![1.0, 4.0, 16.0, 64.0],
            growth_paths: 1000,
            growth_dt: 1e-2,
        }
    }
}

impl Config {
    pub fn load(path: &Path) -> anyhow::Result<Config> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_file_keeps_defaults() {
        let c: Config = toml::from_str("[sim]\npaths = 50\n[verdict]\ntheta = 0.7\n").unwrap();
        assert_eq!(c.sim.paths, 50);
        assert_eq!(c.sim.dt, 1e-4);
        assert_eq!(c.verdict.theta, 0.7);
        assert_eq!(c.verdict.window, VerdictOptions::default().window);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<Config>("[sim]\npath = 50\n").is_err());
        assert!(toml::from_str::<Config>("[simulation]\n").is_err());
    }
}
