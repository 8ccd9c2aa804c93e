//! Experiment configuration: TOML file with one section per concern.
//!
//! ```toml
//! [geometry]
//! m = 30
//! n_x = 6
//! n_y = 5
//! k = 2
//!
//! [channel]
//! model = "geometric"
//! d_h = 2
//! d_g = 5
//!
//! [training]
//! plan = "dft"
//! t = 62
//! snr_db = 5.0
//!
//! [sweep]
//! snr_db = [0.0, 5.0, 10.0]
//!
//! [mc]
//! seed = 7
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::channel::{GainRule, PathCounts, SystemGeometry};
use crate::manifold::{ArraySpec, DEFAULT_GRID_1D, DEFAULT_GRID_2D};

/// Invalid or unreadable configuration. Every violated constraint is listed.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("configuration error:\n  {}", .problems.join("\n  "))]
pub struct ConfigError {
    pub problems: Vec<String>,
}

impl ConfigError {
    fn one(msg: impl Into<String>) -> Self {
        ConfigError {
            problems: vec![msg.into()],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeometryConfig {
    /// BS antennas (half-wavelength ULA).
    pub m: usize,
    /// RIS elements along x and y; `n_y = 1` gives a ULA.
    pub n_x: usize,
    #[serde(default = "one")]
    pub n_y: usize,
    /// UE antennas per user.
    #[serde(default = "one")]
    pub k: usize,
    #[serde(default = "one")]
    pub users: usize,
    /// RIS element spacing in wavelengths.
    #[serde(default = "half")]
    pub spacing: f64,
}

fn one() -> usize {
    1
}

fn half() -> f64 {
    0.5
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelModel {
    Unstructured,
    Geometric,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelConfig {
    pub model: ChannelModel,
    #[serde(default = "one")]
    pub d_h: usize,
    #[serde(default = "one")]
    pub d_g: usize,
    #[serde(default)]
    pub d_f: usize,
    #[serde(default = "unit")]
    pub gain_rule: GainRule,
}

fn unit() -> GainRule {
    GainRule::Unit
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanKind {
    /// DFT RIS states, orthogonal pilots repeated per state.
    Dft,
    /// Sylvester-Hadamard RIS states (power-of-two state count).
    Hadamard,
    /// I.i.d. uniform RIS phases, orthogonal pilots repeated per state.
    Random,
    /// One RIS element on per state.
    OneHot,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    #[serde(default = "dft")]
    pub plan: PlanKind,
    /// Training samples; defaults to `K(N+1)`.
    pub t: Option<usize>,
    #[serde(default)]
    pub include_direct: bool,
    #[serde(default = "five")]
    pub snr_db: f64,
}

fn dft() -> PlanKind {
    PlanKind::Dft
}

fn five() -> f64 {
    5.0
}

/// Exactly one list must be present.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub snr_db: Option<Vec<f64>>,
    pub t: Option<Vec<usize>>,
    pub d_h: Option<Vec<usize>>,
    pub d_g: Option<Vec<usize>>,
    pub d_f: Option<Vec<usize>>,
    /// RIS element count; `n_x` follows as `n / n_y`.
    pub n: Option<Vec<usize>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    Ls,
    Lmmse,
    Decoupled,
}

impl EstimatorKind {
    pub fn name(self) -> &'static str {
        match self {
            EstimatorKind::Ls => "ls",
            EstimatorKind::Lmmse => "lmmse",
            EstimatorKind::Decoupled => "decoupled",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McConfig {
    #[serde(default = "default_trials")]
    pub trials: usize,
    pub seed: Option<u64>,
    #[serde(default = "ls_only")]
    pub estimators: Vec<EstimatorKind>,
    /// Overrides the SNR-derived noise variance (e.g. 0 for noiseless runs).
    pub sigma2: Option<f64>,
}

fn default_trials() -> usize {
    200
}

fn ls_only() -> Vec<EstimatorKind> {
    vec![EstimatorKind::Ls]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    #[serde(default = "grid_1d")]
    pub points_1d: usize,
    #[serde(default = "grid_2d")]
    pub points_2d: usize,
}

fn grid_1d() -> usize {
    DEFAULT_GRID_1D
}

fn grid_2d() -> usize {
    DEFAULT_GRID_2D
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            points_1d: DEFAULT_GRID_1D,
            points_2d: DEFAULT_GRID_2D,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    pub path: Option<String>,
}

/// A validated experiment with defaults applied.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub geometry: GeometryConfig,
    pub channel: ChannelConfig,
    #[serde(default = "default_training")]
    pub training: TrainingConfig,
    pub sweep: SweepConfig,
    pub mc: McConfig,
    #[serde(default)]
    pub grid: GridConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

fn default_training() -> TrainingConfig {
    TrainingConfig {
        plan: PlanKind::Dft,
        t: None,
        include_direct: false,
        snr_db: 5.0,
    }
}

/// The swept quantity and its values.
#[derive(Debug, Clone, PartialEq)]
pub enum Sweep {
    SnrDb(Vec<f64>),
    T(Vec<usize>),
    DH(Vec<usize>),
    DG(Vec<usize>),
    DF(Vec<usize>),
    N(Vec<usize>),
}

impl Sweep {
    pub fn name(&self) -> &'static str {
        match self {
            Sweep::SnrDb(_) => "snr_db",
            Sweep::T(_) => "t",
            Sweep::DH(_) => "d_h",
            Sweep::DG(_) => "d_g",
            Sweep::DF(_) => "d_f",
            Sweep::N(_) => "n",
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Sweep::SnrDb(v) => v.len(),
            Sweep::T(v) | Sweep::DH(v) | Sweep::DG(v) | Sweep::DF(v) | Sweep::N(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Value `i` as printed in the CSV.
    pub fn value(&self, i: usize) -> f64 {
        match self {
            Sweep::SnrDb(v) => v[i],
            Sweep::T(v) | Sweep::DH(v) | Sweep::DG(v) | Sweep::DF(v) | Sweep::N(v) => v[i] as f64,
        }
    }
}

/// Everything that changes along the sweep, resolved for one point.
#[derive(Debug, Clone, PartialEq)]
pub struct Point {
    pub geometry: SystemGeometry,
    pub counts: PathCounts,
    pub t: usize,
    pub snr_db: f64,
}

impl ExperimentConfig {
    pub fn sweep(&self) -> Sweep {
        let s = &self.sweep;
        if let Some(v) = &s.snr_db {
            Sweep::SnrDb(v.clone())
        } else if let Some(v) = &s.t {
            Sweep::T(v.clone())
        } else if let Some(v) = &s.d_h {
            Sweep::DH(v.clone())
        } else if let Some(v) = &s.d_g {
            Sweep::DG(v.clone())
        } else if let Some(v) = &s.d_f {
            Sweep::DF(v.clone())
        } else {
            Sweep::N(s.n.clone().unwrap_or_default())
        }
    }

    pub fn seed(&self) -> u64 {
        self.mc.seed.expect("validated configs carry a seed")
    }

    fn sweep_keys(&self) -> Vec<&'static str> {
        let s = &self.sweep;
        [
            ("snr_db", s.snr_db.is_some()),
            ("t", s.t.is_some()),
            ("d_h", s.d_h.is_some()),
            ("d_g", s.d_g.is_some()),
            ("d_f", s.d_f.is_some()),
            ("n", s.n.is_some()),
        ]
        .into_iter()
        .filter_map(|(k, on)| on.then_some(k))
        .collect()
    }

    /// Geometry, path counts, training length and SNR at sweep index `i`.
    pub fn point(&self, i: usize) -> Point {
        let g = &self.geometry;
        let c = &self.channel;
        let (mut n_x, mut d_h, mut d_g, mut d_f) = (g.n_x, c.d_h, c.d_g, c.d_f);
        let mut t = self.training.t;
        let mut snr_db = self.training.snr_db;
        match self.sweep() {
            Sweep::SnrDb(v) => snr_db = v[i],
            Sweep::T(v) => t = Some(v[i]),
            Sweep::DH(v) => d_h = v[i],
            Sweep::DG(v) => d_g = v[i],
            Sweep::DF(v) => d_f = v[i],
            Sweep::N(v) => n_x = v[i] / g.n_y,
        }
        let ris = if g.n_y == 1 {
            ArraySpec::ula(n_x, g.spacing).expect("validated")
        } else {
            ArraySpec::ura(n_x, g.n_y, g.spacing, g.spacing).expect("validated")
        };
        let power = 10f64.powf(snr_db / 10.0);
        let geometry = SystemGeometry {
            bs: ArraySpec::half_wave_ula(g.m),
            ris,
            users: vec![ArraySpec::half_wave_ula(g.k); g.users],
            powers: vec![power; g.users],
            sigma2: self.mc.sigma2.unwrap_or(1.0),
        };
        let n = n_x * g.n_y;
        let t = t.unwrap_or(g.k * g.users * (n + 1));
        Point {
            geometry,
            counts: PathCounts::uniform(d_h, d_g, d_f, g.users),
            t,
            snr_db,
        }
    }

    /// Collects every violated constraint.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let mut p = Vec::new();
        let g = &self.geometry;
        if g.m == 0 || g.n_x == 0 || g.n_y == 0 || g.k == 0 || g.users == 0 {
            p.push("geometry: m, n_x, n_y, k and users must be positive".to_string());
        }
        if !(g.spacing > 0.0) {
            p.push(format!("geometry.spacing must be positive (got {})", g.spacing));
        }
        let keys = self.sweep_keys();
        match keys.len() {
            0 => p.push("sweep: exactly one variable required, none given".to_string()),
            1 => {}
            _ => p.push(format!("sweep: exactly one variable allowed, got {}", keys.join(" and "))),
        }
        if keys.len() == 1 && self.sweep().is_empty() {
            p.push(format!("sweep.{} is empty", keys[0]));
        }
        if let Some(v) = &self.sweep.n {
            if let Some(bad) = v.iter().find(|&&n| n == 0 || n % g.n_y != 0) {
                p.push(format!("sweep.n value {bad} is not a positive multiple of n_y = {}", g.n_y));
            }
        }
        if self.mc.seed.is_none() {
            p.push("mc.seed is required".to_string());
        }
        if self.mc.trials == 0 {
            p.push("mc.trials must be at least 1".to_string());
        }
        if self.mc.estimators.is_empty() {
            p.push("mc.estimators must name at least one estimator".to_string());
        }
        if let Some(s) = self.mc.sigma2 {
            if !(s >= 0.0) {
                p.push(format!("mc.sigma2 must be nonnegative (got {s})"));
            }
        }
        if self.grid.points_1d == 0 || self.grid.points_2d == 0 {
            p.push("grid sizes must be positive".to_string());
        }
        if self.channel.model == ChannelModel::Geometric && self.channel.d_h == 0 {
            p.push("channel.d_h must be at least 1".to_string());
        }
        if self.channel.d_f > 0 && !self.training.include_direct {
            p.push("channel.d_f > 0 requires training.include_direct = true".to_string());
        }
        if p.is_empty() {
            Ok(())
        } else {
            Err(ConfigError { problems: p })
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        Self::from_toml_with_seed(text, None)
    }

    /// Parses and validates, with `seed` (when given) replacing `mc.seed`.
    pub fn from_toml_with_seed(text: &str, seed: Option<u64>) -> Result<Self, ConfigError> {
        let mut cfg: ExperimentConfig = toml::from_str(text).map_err(|e| ConfigError::one(e.to_string()))?;
        if seed.is_some() {
            cfg.mc.seed = seed;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Effective configuration (defaults filled) as TOML.
    pub fn echo(&self) -> String {
        toml::to_string(self).expect("configs serialize")
    }
}

/// Reads a config file; `seed` overrides the file's `mc.seed`.
pub fn load_config(path: &Path, seed: Option<u64>) -> Result<ExperimentConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|e| ConfigError::one(format!("{}: {e}", path.display())))?;
    ExperimentConfig::from_toml_with_seed(&text, seed).map_err(|mut e| {
        for msg in &mut e.problems {
            *msg = format!("{}: {msg}", path.display());
        }
        e
    })
}
