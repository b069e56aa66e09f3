//! Run configuration: TOML file with documented keys, defaults for
//! anything omitted, and strict rejection of unknown keys.

use crate::error::{Error, Result};
use crate::grid::AnnulusGrid;
use crate::solver::SolverParams;
use serde::{Deserialize, Serialize};

fn default_r_outer() -> f64 {
    2.0
}
fn default_r_inner() -> f64 {
    0.5
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Geometry {
    pub r_outer: f64,
    pub r_inner: f64,
}

impl Default for Geometry {
    fn default() -> Self {
        Geometry { r_outer: default_r_outer(), r_inner: default_r_inner() }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Physics {
    pub mu: f64,
    pub beta: f64,
}

impl Default for Physics {
    fn default() -> Self {
        Physics { mu: 0.05, beta: 1.0 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridCfg {
    pub n_r: usize,
    pub n_theta: usize,
}

impl Default for GridCfg {
    fn default() -> Self {
        GridCfg { n_r: 64, n_theta: 128 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TimeCfg {
    /// 0 selects the stability limit automatically.
    pub dt: f64,
    pub t_end: f64,
}

impl Default for TimeCfg {
    fn default() -> Self {
        TimeCfg { dt: 0.0, t_end: 1.0 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunCfg {
    pub seed: u64,
    /// Minimum body-wall clearance; 0 selects a tenth of the gap width.
    pub delta0: f64,
}

impl Default for RunCfg {
    fn default() -> Self {
        RunCfg { seed: 0, delta0: 0.0 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverCfg {
    pub proj_tol: f64,
}

impl Default for SolverCfg {
    fn default() -> Self {
        SolverCfg { proj_tol: 1e-10 }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    pub geometry: Geometry,
    pub physics: Physics,
    pub grid: GridCfg,
    pub time: TimeCfg,
    pub run: RunCfg,
    pub solver: SolverCfg,
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let g = &self.geometry;
        if !(g.r_inner > 0.0 && g.r_outer > g.r_inner) {
            return Err(Error::Config(format!(
                "geometry requires 0 < r_inner < r_outer, got r_inner = {}, r_outer = {}",
                g.r_inner, g.r_outer
            )));
        }
        if !(self.physics.mu > 0.0) {
            return Err(Error::Config(format!("physics.mu must satisfy mu > 0, got {}", self.physics.mu)));
        }
        if !(self.physics.beta > 0.0) {
            return Err(Error::Config(format!(
                "physics.beta must satisfy beta > 0, got {}",
                self.physics.beta
            )));
        }
        if self.grid.n_r < 4 || self.grid.n_theta < 8 {
            return Err(Error::Config(format!(
                "grid too coarse: n_r = {}, n_theta = {}",
                self.grid.n_r, self.grid.n_theta
            )));
        }
        if self.time.dt < 0.0 || self.time.t_end < 0.0 {
            return Err(Error::Config("time.dt and time.t_end must be nonnegative".into()));
        }
        if self.run.delta0 < 0.0 || self.run.delta0 >= self.geometry.r_outer - self.geometry.r_inner {
            return Err(Error::Config(format!(
                "run.delta0 must lie in [0, r_outer - r_inner), got {}",
                self.run.delta0
            )));
        }
        if !(self.solver.proj_tol > 0.0) {
            return Err(Error::Config(format!(
                "solver.proj_tol must be positive, got {}",
                self.solver.proj_tol
            )));
        }
        Ok(())
    }

    pub fn make_grid(&self) -> Result<AnnulusGrid> {
        AnnulusGrid::new(self.grid.n_r, self.grid.n_theta, self.geometry.r_inner, self.geometry.r_outer)
    }

    /// Effective proximity floor (default: a tenth of the gap width).
    pub fn delta0(&self) -> f64 {
        if self.run.delta0 > 0.0 {
            self.run.delta0
        } else {
            0.1 * (self.geometry.r_outer - self.geometry.r_inner)
        }
    }

    pub fn solver_params(&self, pinned: bool) -> SolverParams {
        SolverParams {
            mu: self.physics.mu,
            beta: self.physics.beta,
            proj_tol: self.solver.proj_tol,
            delta0: self.delta0(),
            pinned,
        }
    }

    /// Canonical serialized form: fixed section and key order.
    pub fn to_canonical_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("serialize: {e}")))
    }
}

pub fn parse_config_str(text: &str) -> Result<SimConfig> {
    let cfg: SimConfig = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn parse_config(path: &std::path::Path) -> Result<SimConfig> {
    let text = std::fs::read_to_string(path)?;
    parse_config_str(&text)
}
