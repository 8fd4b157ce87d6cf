//! Run configuration: one JSON document shared by every subcommand. Every
//! field has a default, so `{}` is a valid config; the effective values are
//! echoed into the run provenance.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use wfr::cone_space::{ConeAtom, DomainBox};
use wfr::energy::EnergyParams;
use wfr::inverse_solver::{ExtremalityCaps, SolverConfig};
use wfr::superposition::LiftOptions;

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub domain: DomainBox,
    pub energy: EnergyBlock,
    pub seed: u64,
    pub inputs: Inputs,
    pub dist: Option<DistConfig>,
    pub simulate: SimulateConfig,
    pub lift: LiftConfig,
    pub solve: SolveConfig,
    pub check_extremal: CheckConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            domain: DomainBox::unit(2),
            energy: EnergyBlock::default(),
            seed: 0,
            inputs: Inputs::default(),
            dist: None,
            simulate: SimulateConfig::default(),
            lift: LiftConfig::default(),
            solve: SolveConfig::default(),
            check_extremal: CheckConfig::default(),
        }
    }
}

/// `α`, `β`, `δ` as plain numbers so that range errors can name the field.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnergyBlock {
    pub alpha: f64,
    pub beta: f64,
    pub delta: f64,
}

impl Default for EnergyBlock {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 1.0,
            delta: 1.0,
        }
    }
}

impl EnergyBlock {
    pub fn params(&self) -> EnergyParams {
        EnergyParams::new(self.alpha, self.beta, self.delta).expect("validated energy block")
    }
}

/// Input files, relative to the config file's directory.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Inputs {
    /// A weighted curve, `.csv` (`t,h,x1..xd`) or JSON.
    pub curve: Option<PathBuf>,
    /// A field grid header.
    pub field: Option<PathBuf>,
    /// A curve ensemble (JSON).
    pub ensemble: Option<PathBuf>,
    /// An observation model (JSON), with or without data.
    pub observations: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistConfig {
    pub a: ConeAtom,
    pub b: ConeAtom,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FieldSource {
    /// Field grid read from a header file.
    File { path: PathBuf },
    /// `v = ω·(−(x₂−c₂), x₁−c₁)` about the box centre, constant `g`; 2-D only.
    Rotation {
        cells: usize,
        time_steps: usize,
        angular_speed: f64,
        growth: f64,
    },
    /// Constant `v` and `g`.
    Uniform {
        cells: usize,
        time_steps: usize,
        velocity: Vec<f64>,
        growth: f64,
    },
}

impl Default for FieldSource {
    fn default() -> Self {
        FieldSource::Rotation {
            cells: 16,
            time_steps: 8,
            angular_speed: 1.0,
            growth: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Start {
    pub position: Vec<f64>,
    pub mass: f64,
    #[serde(default = "one")]
    pub weight: f64,
}

fn one() -> f64 {
    1.0
}

/// Rasterisation of the simulated ensemble into a grid solution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RasterConfig {
    pub cells: usize,
    pub time_steps: usize,
    pub kernel_width: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateConfig {
    pub field: FieldSource,
    /// Integrator steps over `[0,1]`.
    pub steps: usize,
    pub starts: Vec<Start>,
    /// Extra unit-mass starts drawn uniformly from the middle of the box.
    pub random_starts: usize,
    pub raster: Option<RasterConfig>,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        Self {
            field: FieldSource::default(),
            steps: 100,
            starts: Vec::new(),
            random_starts: 4,
            raster: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LiftConfig {
    pub epsilon: f64,
    pub samples_per_axis: usize,
    pub steps_per_slice: usize,
}

impl Default for LiftConfig {
    fn default() -> Self {
        Self {
            epsilon: 1e-3,
            samples_per_axis: 32,
            steps_per_slice: 1,
        }
    }
}

impl LiftConfig {
    pub fn options(&self) -> LiftOptions {
        LiftOptions {
            epsilon: self.epsilon,
            samples_per_axis: self.samples_per_axis,
            steps_per_slice: self.steps_per_slice,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolveConfig {
    /// `solver.seed` is replaced by the run seed.
    pub solver: SolverConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CheckConfig {
    /// Rescale the curve to unit energy before checking.
    pub normalize: bool,
    pub caps: ExtremalityCaps,
}

impl Default for CheckConfig {
    fn default() -> Self {
        Self {
            normalize: true,
            caps: ExtremalityCaps::default(),
        }
    }
}

/// Parses and validates a config document.
pub fn parse_config(text: &str) -> Result<RunConfig, CliError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| CliError::Schema {
        path: e.path().to_string(),
        message: e.inner().to_string(),
    })?;
    cfg.validate()?;
    Ok(cfg)
}

fn positive(field: &str, value: f64) -> Result<(), CliError> {
    if value.is_finite() && value > 0.0 {
        Ok(())
    } else {
        Err(CliError::Range {
            field: field.into(),
            value,
            requirement: "finite and > 0".into(),
        })
    }
}

fn at_least_one(field: &str, value: usize) -> Result<(), CliError> {
    if value >= 1 {
        Ok(())
    } else {
        Err(CliError::Range {
            field: field.into(),
            value: value as f64,
            requirement: ">= 1".into(),
        })
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        positive("energy.alpha", self.energy.alpha)?;
        positive("energy.beta", self.energy.beta)?;
        positive("energy.delta", self.energy.delta)?;
        let d = self.domain.dim();
        let dim_check = |field: &str, len: usize| -> Result<(), CliError> {
            if len == d {
                Ok(())
            } else {
                Err(CliError::Range {
                    field: field.into(),
                    value: len as f64,
                    requirement: "length equal to the domain dimension".into(),
                })
            }
        };
        if let Some(dist) = &self.dist {
            for (name, atom) in [("dist.a", &dist.a), ("dist.b", &dist.b)] {
                if !(atom.mass.is_finite() && atom.mass >= 0.0) {
                    return Err(CliError::Range {
                        field: format!("{name}.mass"),
                        value: atom.mass,
                        requirement: "finite and >= 0".into(),
                    });
                }
                dim_check(&format!("{name}.position"), atom.position.len())?;
            }
        }
        let sim = &self.simulate;
        at_least_one("simulate.steps", sim.steps)?;
        match &sim.field {
            FieldSource::File { .. } => {}
            FieldSource::Rotation { cells, time_steps, .. } => {
                at_least_one("simulate.field.cells", *cells)?;
                at_least_one("simulate.field.time_steps", *time_steps)?;
                dim_check("domain.lower", 2)?;
            }
            FieldSource::Uniform {
                cells,
                time_steps,
                velocity,
                ..
            } => {
                at_least_one("simulate.field.cells", *cells)?;
                at_least_one("simulate.field.time_steps", *time_steps)?;
                dim_check("simulate.field.velocity", velocity.len())?;
            }
        }
        for (i, s) in sim.starts.iter().enumerate() {
            dim_check(&format!("simulate.starts[{i}].position"), s.position.len())?;
            if !self.domain.contains(&s.position) {
                return Err(CliError::Range {
                    field: format!("simulate.starts[{i}].position"),
                    value: f64::NAN,
                    requirement: "inside the domain".into(),
                });
            }
            if !(s.mass.is_finite() && s.mass >= 0.0) {
                return Err(CliError::Range {
                    field: format!("simulate.starts[{i}].mass"),
                    value: s.mass,
                    requirement: "finite and >= 0".into(),
                });
            }
            positive(&format!("simulate.starts[{i}].weight"), s.weight)?;
        }
        if let Some(r) = &sim.raster {
            at_least_one("simulate.raster.cells", r.cells)?;
            at_least_one("simulate.raster.time_steps", r.time_steps)?;
            positive("simulate.raster.kernel_width", r.kernel_width)?;
        }
        positive("lift.epsilon", self.lift.epsilon)?;
        at_least_one("lift.samples_per_axis", self.lift.samples_per_axis)?;
        at_least_one("lift.steps_per_slice", self.lift.steps_per_slice)?;
        let s = &self.solve.solver;
        if !(s.tol.is_finite() && s.tol >= 0.0) {
            return Err(CliError::Range {
                field: "solve.solver.tol".into(),
                value: s.tol,
                requirement: "finite and >= 0".into(),
            });
        }
        s.insertion.validate().map_err(|e| CliError::Range {
            field: "solve.solver.insertion".into(),
            value: f64::NAN,
            requirement: e.to_string(),
        })?;
        positive("check_extremal.caps.energy_tol", self.check_extremal.caps.energy_tol)?;
        Ok(())
    }
}
