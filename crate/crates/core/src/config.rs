//! Run configuration: one TOML file fixes the flux, the window, the
//! problem, the grid, the schedule and the seed.

use crate::densify::{iterate, DensifyError, DensifyOptions, Level, Rebuild, RunOutcome};
use crate::flux::{
    build_modified_flux, build_window, validate_flux, FluxDescription, FluxError, FluxModel, KPrime, ModifiedFlux,
    PhaseWindow,
};
use crate::grid::{Grid, GridError};
use crate::parabolic::{build_base, BaseOptions, BaseSubsolution, ParabolicError};
use crate::verify::Reference;
use crate::problem::{validate_problem, ProblemError, ProblemSpec, RawProblem};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use thiserror::Error;

/// The configuration shipped with the repository.
pub const DEFAULT_CONFIG: &str = include_str!("../../../configs/default.toml");

/// Each variant renders its inner error in full, so none is exposed as a
/// `source` and chained printing does not repeat it.
#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config.read: {path}: {err}")]
    Read { path: PathBuf, err: std::io::Error },
    #[error("config.parse: {0}")]
    Parse(toml::de::Error),
    #[error("flux.{0}")]
    Flux(FluxError),
    #[error("problem.{0}")]
    Problem(ProblemError),
    #[error("grid.{0}")]
    Grid(GridError),
}

macro_rules! config_from {
    ($($v:ident($t:ty)),*) => {$(
        impl From<$t> for ConfigError {
            fn from(e: $t) -> Self {
                ConfigError::$v(e)
            }
        }
    )*};
}

config_from!(Parse(toml::de::Error), Flux(FluxError), Problem(ProblemError), Grid(GridError));

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WindowConfig {
    pub r1: f64,
    pub r2: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub nx: usize,
    pub nt: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub flux: FluxDescription,
    pub window: WindowConfig,
    pub problem: RawProblem,
    pub grid: GridConfig,
    #[serde(default)]
    pub base: BaseOptions,
    #[serde(default)]
    pub densify: DensifyOptions,
    #[serde(default = "default_out")]
    pub output: PathBuf,
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

/// Validated pieces every pipeline stage needs.
#[derive(Debug, Clone)]
pub struct Pipeline {
    pub config: RunConfig,
    pub model: FluxModel,
    pub window: PhaseWindow,
    pub sig: ModifiedFlux,
    pub kprime: KPrime,
    pub spec: ProblemSpec,
    pub grid: Grid,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<RunConfig, ConfigError> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<RunConfig, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|err| ConfigError::Read { path: path.into(), err })?;
        RunConfig::parse(&text)
    }

    pub fn default_config() -> RunConfig {
        RunConfig::parse(DEFAULT_CONFIG).expect("shipped config parses")
    }

    pub fn prepare(self) -> Result<Pipeline, ConfigError> {
        let model = validate_flux(&self.flux)?;
        let window = build_window(&model, self.window.r1, self.window.r2)?;
        let sig = build_modified_flux(&model, &window)?;
        let kprime = KPrime::new(&model, &window);
        let spec = validate_problem(&self.problem, &window)?;
        let grid = Grid::new(self.grid.nx, self.grid.nt, spec.t_final)?;
        Ok(Pipeline { config: self, model, window, sig, kprime, spec, grid })
    }
}

impl Pipeline {
    pub fn base_on(&self, grid: &Grid) -> Result<BaseSubsolution, ParabolicError> {
        build_base(&self.spec, &self.sig, &self.window, grid, self.config.base)
    }

    pub fn base(&self) -> Result<BaseSubsolution, ParabolicError> {
        self.base_on(&self.grid)
    }

    pub fn rebuild(&self) -> Rebuild<'_> {
        Rebuild { spec: &self.spec, sig: &self.sig, kprime: &self.kprime, base_options: self.config.base }
    }

    /// Base solve plus the delta-schedule.
    pub fn run(&self) -> Result<RunOutcome, DensifyError> {
        iterate(self.base()?, self.rebuild(), &self.config.densify)
    }

    pub fn level(&self, base: BaseSubsolution) -> Level {
        Level::new(base, &self.spec, &self.kprime)
    }

    pub fn reference<'a>(&'a self, level: &'a Level) -> Reference<'a> {
        Reference {
            spec: &self.spec,
            model: &self.model,
            sig: &self.sig,
            window: &self.window,
            base: &level.base,
            reference_gauge: level.base_state.gauge.gauge_value,
        }
    }
}
