//! Run configuration: defaults, TOML files and command-line overrides.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use fracmf::core_model::{affine, geometric, riccati, AffineParams, ModelSpec};
use fracmf::finance_apps::{ThetaConvention, VarSwapParams, VolLoading, VolModelParams, VolPayoff};
use fracmf::Payoff;
use serde::{Deserialize, Serialize};

/// Errors in the configuration or its preconditions; these exit with status 2.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

pub fn config_error(msg: impl Into<String>) -> anyhow::Error {
    ConfigError(msg.into()).into()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Command {
    Validate,
    Simulate,
    Greeks,
    Varswap,
    Volmodel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    Operators,
    Fbm,
    Solver,
    Sensitivity,
    All,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelConfig {
    Geometric { hurst: f64, x: f64, mu: f64, alpha: f64 },
    Riccati { hurst: f64, x: f64, mu: f64, q: f64, alpha: f64 },
    Affine { hurst: f64, x: f64, params: AffineParams },
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::Riccati { hurst: 0.7, x: 0.2, mu: 0.5, q: 1.0, alpha: 0.3 }
    }
}

impl ModelConfig {
    pub fn named(name: &str) -> anyhow::Result<Self> {
        Ok(match name {
            "geometric" => Self::Geometric { hurst: 0.7, x: 1.0, mu: 0.2, alpha: 0.3 },
            "riccati" => Self::default(),
            "affine" => Self::Affine {
                hurst: 0.7,
                x: 1.0,
                params: AffineParams { b0: 0.1, b1: -0.2, beta0: 0.05, beta1: 0.1, a0: 0.02, a1: 0.05, c0: 0.3, c1: 0.1 },
            },
            other => return Err(config_error(format!("unknown model '{other}' (geometric, riccati, affine)"))),
        })
    }

    pub fn hurst(&self) -> f64 {
        match *self {
            Self::Geometric { hurst, .. } | Self::Riccati { hurst, .. } | Self::Affine { hurst, .. } => hurst,
        }
    }

    pub fn hurst_mut(&mut self) -> &mut f64 {
        match self {
            Self::Geometric { hurst, .. } | Self::Riccati { hurst, .. } | Self::Affine { hurst, .. } => hurst,
        }
    }

    pub fn x_mut(&mut self) -> &mut f64 {
        match self {
            Self::Geometric { x, .. } | Self::Riccati { x, .. } | Self::Affine { x, .. } => x,
        }
    }

    pub fn build(&self, horizon: f64) -> anyhow::Result<ModelSpec> {
        let spec = match *self {
            Self::Geometric { hurst, x, mu, alpha } => geometric(hurst, x, mu, alpha),
            Self::Riccati { hurst, x, mu, q, alpha } => riccati(hurst, x, mu, q, alpha),
            Self::Affine { hurst, x, params } => affine(hurst, x, params, horizon),
        };
        spec.map_err(|e| config_error(e.to_string()))
    }
}

/// Closed payoff catalog: `linear`, `constant:c`, `power:p`, `smooth-call:strike:width`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PayoffConfig {
    Linear,
    Constant { value: f64 },
    Power { exponent: f64 },
    SmoothCall { strike: f64, width: f64 },
}

impl PayoffConfig {
    pub fn payoff(&self) -> Payoff {
        match *self {
            Self::Linear => Payoff::Linear,
            Self::Constant { value } => Payoff::Constant { value },
            Self::Power { exponent } => Payoff::Power { exponent },
            Self::SmoothCall { strike, width } => Payoff::SmoothCall { strike, width },
        }
    }
}

impl FromStr for PayoffConfig {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let parts: Vec<&str> = s.split(':').collect();
        let num = |i: usize| -> Result<f64, String> {
            parts.get(i).ok_or_else(|| format!("payoff '{s}' is missing a parameter"))?.parse::<f64>().map_err(|e| format!("payoff '{s}': {e}"))
        };
        let arity = |k: usize| if parts.len() == k + 1 { Ok(()) } else { Err(format!("payoff '{s}' takes {k} parameter(s)")) };
        match parts[0] {
            "linear" => arity(0).map(|_| Self::Linear),
            "constant" => arity(1).and_then(|_| Ok(Self::Constant { value: num(1)? })),
            "power" => arity(1).and_then(|_| Ok(Self::Power { exponent: num(1)? })),
            "smooth-call" => {
                arity(2)?;
                let width = num(2)?;
                if !(width > 0.0) {
                    return Err("smooth-call width must be positive".into());
                }
                Ok(Self::SmoothCall { strike: num(1)?, width })
            }
            other => Err(format!("unknown payoff '{other}' (linear, constant:c, power:p, smooth-call:k:w)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub n: usize,
    pub horizon: f64,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self { n: 256, horizon: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MonteCarloConfig {
    pub paths: usize,
    pub seed: u64,
    /// Worker threads; resolved from the environment when absent.
    pub workers: Option<usize>,
}

impl Default for MonteCarloConfig {
    fn default() -> Self {
        Self { paths: 10_000, seed: 7, workers: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToleranceConfig {
    pub picard: f64,
    pub max_iter: usize,
    /// Finite-difference step relative to the initial point.
    pub fd_rel_step: f64,
}

impl Default for ToleranceConfig {
    fn default() -> Self {
        Self { picard: 1e-10, max_iter: 200, fd_rel_step: 1e-4 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub report: Option<PathBuf>,
    pub csv: Option<PathBuf>,
    /// Paths written to the CSV dump of `simulate`.
    pub dump_paths: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GreeksConfig {
    pub payoff: PayoffConfig,
    /// Evaluation time; the horizon when absent.
    pub time: Option<f64>,
}

impl Default for GreeksConfig {
    fn default() -> Self {
        Self { payoff: PayoffConfig::Power { exponent: 2.0 }, time: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SwapConfig {
    pub x: f64,
    pub mu: f64,
    pub q: f64,
    pub alpha: f64,
    pub r_rate: f64,
    pub convention: ThetaConvention,
    pub sub_points: usize,
}

impl Default for SwapConfig {
    fn default() -> Self {
        let d = VarSwapParams::default();
        Self { x: d.x, mu: d.mu, q: d.q, alpha: d.alpha, r_rate: d.r_rate, convention: d.convention, sub_points: d.sub_points }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VolConfig {
    pub x1: f64,
    pub x2: f64,
    pub mu: f64,
    pub q: f64,
    pub alpha: f64,
    pub loading: VolLoading,
    pub payoff: VolPayoff,
}

impl Default for VolConfig {
    fn default() -> Self {
        let d = VolModelParams::default();
        Self { x1: d.x1, x2: d.x2, mu: d.mu, q: d.q, alpha: d.alpha, loading: d.loading, payoff: d.payoff }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub command: Command,
    pub suite: Suite,
    pub model: ModelConfig,
    pub grid: GridConfig,
    pub monte_carlo: MonteCarloConfig,
    pub tolerances: ToleranceConfig,
    pub output: OutputConfig,
    pub greeks: GreeksConfig,
    pub varswap: SwapConfig,
    pub volmodel: VolConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            command: Command::Validate,
            suite: Suite::All,
            model: ModelConfig::default(),
            grid: GridConfig::default(),
            monte_carlo: MonteCarloConfig::default(),
            tolerances: ToleranceConfig::default(),
            output: OutputConfig { dump_paths: 10, ..Default::default() },
            greeks: GreeksConfig::default(),
            varswap: SwapConfig::default(),
            volmodel: VolConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> anyhow::Result<Self> {
        toml::from_str(text).map_err(|e| config_error(format!("config: {e}")))
    }

    pub fn to_toml(&self) -> anyhow::Result<String> {
        toml::to_string(self).map_err(|e| config_error(format!("config: {e}")))
    }

    pub fn hurst(&self) -> f64 {
        self.model.hurst()
    }

    pub fn varswap_params(&self) -> VarSwapParams {
        let s = &self.varswap;
        VarSwapParams {
            x: s.x,
            mu: s.mu,
            q: s.q,
            alpha: s.alpha,
            r_rate: s.r_rate,
            hurst: self.hurst(),
            horizon: self.grid.horizon,
            n: self.grid.n,
            paths: self.monte_carlo.paths,
            seed: self.monte_carlo.seed,
            convention: s.convention,
            sub_points: s.sub_points,
            fd_rel_step: self.tolerances.fd_rel_step,
        }
    }

    pub fn volmodel_params(&self) -> VolModelParams {
        let v = &self.volmodel;
        VolModelParams {
            x1: v.x1,
            x2: v.x2,
            mu: v.mu,
            q: v.q,
            alpha: v.alpha,
            hurst: self.hurst(),
            horizon: self.grid.horizon,
            n: self.grid.n,
            paths: self.monte_carlo.paths,
            seed: self.monte_carlo.seed,
            loading: v.loading,
            payoff: v.payoff,
            fd_rel_step: self.tolerances.fd_rel_step,
        }
    }

    /// Checks that do not need a model build.
    pub fn check(&self) -> anyhow::Result<()> {
        if self.grid.n == 0 || !(self.grid.horizon > 0.0) {
            return Err(config_error("grid needs n >= 1 and a positive horizon"));
        }
        if self.monte_carlo.paths < 2 {
            return Err(config_error("at least 2 paths are needed"));
        }
        if self.monte_carlo.workers == Some(0) {
            return Err(config_error("workers must be at least 1"));
        }
        let t = &self.tolerances;
        if !(t.picard > 0.0) || t.max_iter == 0 || !(t.fd_rel_step > 0.0) {
            return Err(config_error("tolerances must be positive"));
        }
        if let Some(time) = self.greeks.time {
            if !(time > 0.0 && time <= self.grid.horizon) {
                return Err(config_error("greeks time must lie in (0, horizon]"));
            }
        }
        Ok(())
    }
}
