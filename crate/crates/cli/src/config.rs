//! Experiment configuration files (TOML, strict schema).

use std::collections::BTreeMap;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use sdg_core::catalog;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("config parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config field `{field}`: {reason}")]
    Field { field: String, reason: String },
}

fn field(field: &str, reason: impl Into<String>) -> ConfigError {
    ConfigError::Field {
        field: field.into(),
        reason: reason.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Tree,
    Lsmc,
    Residual,
    DppCheck,
    Isaacs,
    ItoVerify,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Tree => "tree",
            Method::Lsmc => "lsmc",
            Method::Residual => "residual",
            Method::DppCheck => "dpp_check",
            Method::Isaacs => "isaacs",
            Method::ItoVerify => "ito_verify",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SideChoice {
    #[default]
    Lower,
    Upper,
    Both,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ItoFunctional {
    Identity,
    #[default]
    Square,
    Integral,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstanceConfig {
    pub name: String,
    #[serde(default)]
    pub params: BTreeMap<String, f64>,
}

/// Numerical settings; fields irrelevant to the chosen method are ignored
/// but still recorded in the report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Numerics {
    pub n_steps: usize,
    pub branching: usize,
    /// Grid points per control axis when `u_grid`/`v_grid` are absent.
    pub grid_points: usize,
    pub u_grid: Option<Vec<f64>>,
    pub v_grid: Option<Vec<f64>>,
    pub side: SideChoice,
    pub initial_state: f64,
    pub t0: f64,
    pub split_step: usize,
    pub n_paths: usize,
    pub levels: Vec<usize>,
    pub functional: ItoFunctional,
    pub samples: usize,
    pub refine_points: usize,
    /// Hölder ball `(kappa, mu, mu0)` for sampled paths.
    pub ball: [f64; 3],
    pub path_grid: usize,
    /// Constant added to the Riccati candidate in `residual` runs.
    pub candidate_offset: f64,
    pub strategies: StrategyConfig,
}

impl Default for Numerics {
    fn default() -> Self {
        Self {
            n_steps: 2,
            branching: 2,
            grid_points: 3,
            u_grid: None,
            v_grid: None,
            side: SideChoice::Lower,
            initial_state: 0.0,
            t0: 0.0,
            split_step: 1,
            n_paths: 10_000,
            levels: vec![64, 128, 256],
            functional: ItoFunctional::Square,
            samples: 100,
            refine_points: 0,
            ball: [0.4, 2.0, 1.5],
            path_grid: 6,
            candidate_offset: 0.0,
            strategies: StrategyConfig::default(),
        }
    }
}

/// Linear feedback families for `lsmc`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StrategyConfig {
    pub response: Vec<f64>,
    pub state: Vec<f64>,
    pub offset: Vec<f64>,
    pub opponent_state: Vec<f64>,
    pub opponent_offset: Vec<f64>,
}

impl Default for StrategyConfig {
    fn default() -> Self {
        Self {
            response: vec![-1.0, 0.0],
            state: vec![0.0],
            offset: vec![0.0],
            opponent_state: vec![0.0, 1.0],
            opponent_offset: vec![0.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    pub directory: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub method: Method,
    pub instance: InstanceConfig,
    #[serde(default)]
    pub numerics: Numerics,
    #[serde(default)]
    pub output: OutputConfig,
}

const MAX_SAMPLE_STEPS: f64 = 5e7;

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let n = &self.numerics;
        catalog::resolve_params(&self.instance.name, &self.instance.params).map_err(|e| field("instance", e.to_string()))?;
        if n.n_steps == 0 {
            return Err(field("numerics.n_steps", "must be positive"));
        }
        if n.branching < 2 {
            return Err(field("numerics.branching", "must be at least 2"));
        }
        if n.grid_points == 0 {
            return Err(field("numerics.grid_points", "must be positive"));
        }
        for (name, g) in [("numerics.u_grid", &n.u_grid), ("numerics.v_grid", &n.v_grid)] {
            if let Some(g) = g {
                if g.is_empty() || g.iter().any(|x| !x.is_finite()) {
                    return Err(field(name, "must be a nonempty list of finite numbers"));
                }
            }
        }
        if !n.initial_state.is_finite() || n.t0 < 0.0 {
            return Err(field("numerics.t0", "start time and initial state must be finite, t0 >= 0"));
        }
        let [kappa, mu, mu0] = n.ball;
        if !(kappa > 0.0 && kappa < 0.5 && mu > 0.0 && mu0 > 0.0) {
            return Err(field(
                "numerics.ball",
                "expects [kappa, mu, mu0] with 0 < kappa < 1/2 and mu, mu0 > 0",
            ));
        }
        match self.method {
            Method::DppCheck if n.split_step == 0 || n.split_step > n.n_steps => {
                return Err(field("numerics.split_step", format!("must lie in 1..={}", n.n_steps)));
            }
            Method::Lsmc | Method::ItoVerify if n.n_paths < 2 => {
                return Err(field("numerics.n_paths", "needs at least 2 paths"));
            }
            Method::ItoVerify => {
                if n.levels.is_empty() || n.levels.contains(&0) {
                    return Err(field("numerics.levels", "must be a nonempty list of positive step counts"));
                }
                let fine = *n.levels.iter().max().unwrap();
                if let Some(l) = n.levels.iter().find(|&&l| fine % l != 0) {
                    return Err(field("numerics.levels", format!("{l} does not divide the finest level {fine}")));
                }
            }
            Method::Residual if self.instance.name != "lq" => {
                return Err(field(
                    "method",
                    "residual runs need the lq instance, whose Riccati solution is the candidate",
                ));
            }
            Method::Residual | Method::Isaacs if n.samples == 0 => {
                return Err(field("numerics.samples", "must be positive"));
            }
            _ => {}
        }
        if n.path_grid < 2 {
            return Err(field("numerics.path_grid", "must be at least 2"));
        }
        let s = &n.strategies;
        for (name, g) in [
            ("numerics.strategies.response", &s.response),
            ("numerics.strategies.state", &s.state),
            ("numerics.strategies.offset", &s.offset),
            ("numerics.strategies.opponent_state", &s.opponent_state),
            ("numerics.strategies.opponent_offset", &s.opponent_offset),
        ] {
            if g.is_empty() {
                return Err(field(name, "must not be empty"));
            }
        }
        Ok(())
    }

    /// Simulated `(path, step)` pairs, checked against the memory budget.
    pub fn sample_steps(&self) -> f64 {
        let n = &self.numerics;
        match self.method {
            Method::Lsmc => (n.n_paths * n.n_steps) as f64,
            Method::ItoVerify => (n.n_paths * n.levels.iter().max().copied().unwrap_or(0)) as f64,
            _ => 0.0,
        }
    }

    pub fn sample_budget() -> f64 {
        MAX_SAMPLE_STEPS
    }

    /// Hex SHA-256 of the normalized config (output settings excluded).
    pub fn content_hash(&self) -> String {
        let mut normalized = self.clone();
        normalized.output = OutputConfig::default();
        let json = serde_json::to_string(&normalized).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
seed = 3
method = "tree"
[instance]
name = "linear"
"#;

    #[test]
    fn minimal_config_takes_defaults() {
        let c = ExperimentConfig::from_toml(MINIMAL).unwrap();
        assert_eq!(c.numerics, Numerics::default());
        assert_eq!(c.seed, 3);
    }

    #[test]
    fn missing_seed_is_named() {
        let e = ExperimentConfig::from_toml("method = \"tree\"\n[instance]\nname = \"linear\"\n").unwrap_err();
        assert!(e.to_string().contains("seed"), "{e}");
    }

    #[test]
    fn unknown_keys_rejected() {
        let e = ExperimentConfig::from_toml(&format!("{MINIMAL}\n[numerics]\nn_step = 3\n")).unwrap_err();
        assert!(e.to_string().contains("n_step"), "{e}");
        let e = ExperimentConfig::from_toml(&format!("{MINIMAL}params = {{ sigm = 1.0 }}\n")).unwrap_err();
        assert!(e.to_string().contains("sigm"), "{e}");
    }

    #[test]
    fn unknown_instance_rejected() {
        let e = ExperimentConfig::from_toml("seed = 1\nmethod = \"tree\"\n[instance]\nname = \"nope\"\n").unwrap_err();
        assert!(e.to_string().contains("instance"), "{e}");
    }

    #[test]
    fn method_specific_checks() {
        let dpp = "seed = 1\nmethod = \"dpp_check\"\n[instance]\nname = \"linear\"\n[numerics]\nsplit_step = 5\n";
        assert!(ExperimentConfig::from_toml(dpp).unwrap_err().to_string().contains("split_step"));
        let ito = "seed = 1\nmethod = \"ito_verify\"\n[instance]\nname = \"linear\"\n[numerics]\nlevels = [3, 8]\n";
        assert!(ExperimentConfig::from_toml(ito).unwrap_err().to_string().contains("levels"));
        let res = "seed = 1\nmethod = \"residual\"\n[instance]\nname = \"linear\"\n";
        assert!(ExperimentConfig::from_toml(res).unwrap_err().to_string().contains("method"));
    }

    #[test]
    fn hash_ignores_output_and_formatting() {
        let a = ExperimentConfig::from_toml(MINIMAL).unwrap();
        let b = ExperimentConfig::from_toml(&format!("{MINIMAL}\n[output]\ndirectory = \"x\"\n[numerics]\nn_steps = 2\n")).unwrap();
        assert_eq!(a.content_hash(), b.content_hash());
        let c = ExperimentConfig::from_toml(&MINIMAL.replace("seed = 3", "seed = 4")).unwrap();
        assert_ne!(a.content_hash(), c.content_hash());
    }
}
