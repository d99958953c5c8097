//! Experiment configuration, read from TOML.
//!
//! ```toml
//! [plant]
//! kind = "pendulum"
//! g = 9.8
//! l = 0.5
//! mu = 0.1
//! dt = 0.04
//!
//! [plant.excitation]
//! kind = "uniform_random"
//! lo = -1.0
//! hi = 1.0
//! length = 500
//!
//! [kernel]
//! input = [{ weight = 1.0, factors = [{ type = "linear" }] }]
//! output = [{ weight = 1.0, factors = [{ type = "linear" }] }]
//!
//! [problem]
//! t_m = 10
//! t_p = 60
//!
//! [io]
//! seed = 1
//! ```

use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::controller::{MpcSettings, StageCost};
use crate::error::{Error, Result};
use crate::kernels::{KernelSpec, NoiseModel};
use crate::linear::BoxBounds;
use crate::plants::{ExcitationKind, ExcitationSpec, PlantModel};
use crate::predictor::SolverSettings;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub plant: PlantSection,
    pub kernel: KernelSection,
    pub problem: ProblemSection,
    #[serde(default)]
    pub solver: SolverSection,
    #[serde(default)]
    pub noise: NoiseSection,
    #[serde(default)]
    pub io: IoSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlantSection {
    #[serde(flatten)]
    pub model: PlantModel,
    /// Initial state; the plant's default when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x0: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub excitation: Option<ExcitationSection>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExcitationSection {
    #[serde(flatten)]
    pub kind: ExcitationKind,
    pub length: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelSection {
    pub input: KernelSpec,
    pub output: KernelSpec,
}

/// A weight matrix given either as a scalar multiple of the identity or in full.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Weight {
    Scalar(f64),
    Matrix(Vec<Vec<f64>>),
}

impl Weight {
    pub fn matrix(&self, dim: usize) -> Result<DMatrix<f64>> {
        match self {
            Weight::Scalar(s) => Ok(DMatrix::identity(dim, dim) * *s),
            Weight::Matrix(rows) => {
                if rows.len() != dim || rows.iter().any(|r| r.len() != dim) {
                    return Err(Error::Config(format!("weight matrix must be {dim} × {dim}")));
                }
                Ok(DMatrix::from_row_iterator(dim, dim, rows.iter().flatten().copied()))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferenceStep {
    pub level: Vec<f64>,
    pub length: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Reference {
    /// The same output sample at every step.
    Constant(Vec<f64>),
    /// Piecewise-constant levels held for the given number of steps.
    Steps(Vec<ReferenceStep>),
    /// CSV file with header `yref1..`.
    Path(PathBuf),
}

impl Reference {
    /// Reference samples, flattened, and their count.
    pub fn samples(&self, n_y: usize) -> Result<(Vec<f64>, usize)> {
        let (values, dim) = match self {
            Reference::Constant(v) => (v.clone(), v.len()),
            Reference::Steps(steps) => {
                let dim = steps.first().map_or(0, |s| s.level.len());
                if steps.iter().any(|s| s.level.len() != dim || s.length == 0) {
                    return Err(Error::Config("reference steps need equal dimensions and positive lengths".into()));
                }
                (steps.iter().flat_map(|s| s.level.repeat(s.length)).collect(), dim)
            }
            Reference::Path(p) => crate::io::load_reference(p)?,
        };
        if dim != n_y || values.is_empty() {
            return Err(Error::Config(format!("reference has dimension {dim}, outputs have {n_y}")));
        }
        let count = values.len() / n_y;
        Ok((values, count))
    }
}

fn default_weight() -> Weight {
    Weight::Scalar(1.0)
}

fn default_input_weight() -> Weight {
    Weight::Scalar(0.01)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemSection {
    /// Measured context length.
    #[serde(alias = "t_ini")]
    pub t_m: usize,
    /// Prediction or control horizon.
    #[serde(alias = "n_h")]
    pub t_p: usize,
    #[serde(default = "default_weight")]
    pub q: Weight,
    #[serde(default = "default_input_weight")]
    pub r: Weight,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<Reference>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub u_box: Option<BoxBounds>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub y_box: Option<BoxBounds>,
    /// Closed-loop steps; defaults to the reference length.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub steps: Option<usize>,
}

impl ProblemSection {
    pub fn depth(&self) -> usize {
        self.t_m + self.t_p
    }

    pub fn stage_cost(&self, n_u: usize, n_y: usize) -> Result<StageCost> {
        StageCost::new(self.q.matrix(n_y)?, self.r.matrix(n_u)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverSection {
    pub restarts: usize,
    pub max_iters: usize,
    pub grad_tol: f64,
    pub ridge: f64,
    pub penalties: Vec<f64>,
    pub tol_bilevel: f64,
    pub y_box_weight: f64,
    pub candidates: usize,
}

impl Default for SolverSection {
    fn default() -> Self {
        let s = SolverSettings::default();
        let m = MpcSettings::default();
        Self {
            restarts: s.restarts,
            max_iters: s.max_iters,
            grad_tol: s.grad_tol,
            ridge: s.ridge,
            penalties: m.penalties,
            tol_bilevel: m.tol_bilevel,
            y_box_weight: m.y_box_weight,
            candidates: m.candidates,
        }
    }
}

impl SolverSection {
    pub fn settings(&self, seed: u64) -> SolverSettings {
        SolverSettings {
            restarts: self.restarts,
            max_iters: self.max_iters,
            grad_tol: self.grad_tol,
            ridge: self.ridge,
            seed,
        }
    }

    pub fn mpc_settings(&self, seed: u64) -> MpcSettings {
        MpcSettings {
            penalties: self.penalties.clone(),
            inner: self.settings(seed),
            tol_bilevel: self.tol_bilevel,
            y_box_weight: self.y_box_weight,
            candidates: self.candidates,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseSection {
    /// Noise assumed on the recorded data when building the Gram matrix.
    pub model: NoiseModel,
    /// Std of Gaussian noise added to outputs by `gen-data`.
    pub measurement_std: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IoSection {
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub query: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let cfg_err = |e: Error| match e {
            Error::Argument(m) => Error::Config(m),
            other => other,
        };
        self.plant.model.validate().map_err(cfg_err)?;
        if let Some(x0) = &self.plant.x0 {
            if x0.len() != self.plant.model.n_x() {
                return Err(Error::Config(format!("x0 must have {} entries", self.plant.model.n_x())));
            }
        }
        if let Some(e) = &self.plant.excitation {
            self.excitation_spec(e).validate().map_err(cfg_err)?;
        }
        if self.problem.t_m == 0 || self.problem.t_p == 0 {
            return Err(Error::Config("t_m and t_p must be positive".into()));
        }
        let (nu, ny) = (self.plant.model.n_u(), self.plant.model.n_y());
        self.problem.stage_cost(nu, ny).map_err(cfg_err)?;
        if let Some(b) = &self.problem.u_box {
            b.validate(nu).map_err(cfg_err)?;
        }
        if let Some(b) = &self.problem.y_box {
            b.validate(ny).map_err(cfg_err)?;
        }
        self.noise.model.validate().map_err(cfg_err)?;
        if !(self.noise.measurement_std >= 0.0) {
            return Err(Error::Config("measurement_std must be >= 0".into()));
        }
        self.solver.mpc_settings(self.io.seed).validate().map_err(cfg_err)
    }

    fn excitation_spec(&self, e: &ExcitationSection) -> ExcitationSpec {
        ExcitationSpec { kind: e.kind.clone(), length: e.length, seed: self.io.seed }
    }

    /// Excitation seeded from the `io.seed` field.
    pub fn excitation(&self) -> Result<ExcitationSpec> {
        let e = self.plant.excitation.as_ref().ok_or_else(|| Error::Config("plant.excitation is missing".into()))?;
        Ok(self.excitation_spec(e))
    }

    pub fn x0(&self) -> Vec<f64> {
        self.plant.x0.clone().unwrap_or_else(|| self.plant.model.default_x0())
    }
}
