//! Subcommand dispatch. Every run writes `provenance.json` into the output
//! directory, including failed runs when the directory can be created.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use wfr::characteristics::{integrate_characteristic, ode_residual, FieldGrid};
use wfr::cone_space::{flat_distance, hk_cone_distance_squared, ConeAtom, WeightedCurve};
use wfr::energy::{coercivity_bounds, curve_energy, fisher_information, mass_integral, normalize_to_unit_energy, CoercivityReport};
use wfr::inverse_solver::{extremality_check, gcg_solve, observe, ExtremalityReport, ObservationModel, StopReason};
use wfr::superposition::{
    grid_solution_from_ensemble, lift, superpose, CurveEnsemble, EnsembleAtom, GridSpec, LiftReport,
};

use crate::config::{FieldSource, RunConfig};
use crate::error::CliError;
use crate::io::{read_curve, read_field, read_json, trajectories_csv, OutDir};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    Dist,
    Energy,
    Simulate,
    Lift,
    Solve,
    CheckExtremal,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Dist => "dist",
            Command::Energy => "energy",
            Command::Simulate => "simulate",
            Command::Lift => "lift",
            Command::Solve => "solve",
            Command::CheckExtremal => "check-extremal",
        }
    }
}

pub struct Invocation {
    pub command: Command,
    pub config: RunConfig,
    /// Relative input paths are resolved against this directory.
    pub base_dir: PathBuf,
    pub out: PathBuf,
    pub threads: Option<usize>,
}

#[derive(Serialize)]
struct Provenance<'a> {
    tool: &'static str,
    cli_version: &'static str,
    core_version: &'static str,
    subcommand: &'static str,
    seed: u64,
    threads: Option<usize>,
    config: &'a RunConfig,
    started_unix_s: f64,
    wall_time_s: f64,
    outputs: &'a [String],
    error: Option<serde_json::Value>,
}

/// Runs the subcommand; returns the text to print on stdout.
pub fn run(inv: &Invocation) -> Result<String, CliError> {
    let started = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0.0, |d| d.as_secs_f64());
    let clock = Instant::now();
    let mut out = OutDir::create(&inv.out)?;
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = inv.threads {
        builder = builder.num_threads(n);
    }
    let pool = builder.build().map_err(CliError::runtime)?;
    let result = pool.install(|| dispatch(inv, &mut out));
    let prov = Provenance {
        tool: "wfr",
        cli_version: env!("CARGO_PKG_VERSION"),
        core_version: wfr::VERSION,
        subcommand: inv.command.name(),
        seed: inv.config.seed,
        threads: inv.threads,
        config: &inv.config,
        started_unix_s: started,
        wall_time_s: clock.elapsed().as_secs_f64(),
        outputs: out.written(),
        error: result.as_ref().err().map(CliError::to_json),
    };
    let mut text = serde_json::to_string_pretty(&prov).map_err(CliError::runtime)?;
    text.push('\n');
    let path = out.path("provenance.json");
    std::fs::write(&path, text).map_err(|source| CliError::Io { path, source })?;
    result
}

fn dispatch(inv: &Invocation, out: &mut OutDir) -> Result<String, CliError> {
    match inv.command {
        Command::Dist => dist(inv, out),
        Command::Energy => energy(inv, out),
        Command::Simulate => simulate(inv, out),
        Command::Lift => lift_cmd(inv, out),
        Command::Solve => solve(inv, out),
        Command::CheckExtremal => check_extremal(inv, out),
    }
}

fn resolve(inv: &Invocation, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        inv.base_dir.join(p)
    }
}

fn input(inv: &Invocation, p: &Option<PathBuf>, name: &'static str) -> Result<PathBuf, CliError> {
    p.as_deref().map(|p| resolve(inv, p)).ok_or(CliError::MissingInput(name))
}

fn write_ensemble(out: &mut OutDir, e: &CurveEnsemble) -> Result<(), CliError> {
    out.write_json("ensemble.json", e)?;
    out.write_text("trajectories.csv", &trajectories_csv(e))
}

#[derive(Serialize)]
struct DistOutput<'a> {
    a: &'a ConeAtom,
    b: &'a ConeAtom,
    flat_distance: f64,
    hk_distance: f64,
    hk_distance_squared: f64,
}

fn dist(inv: &Invocation, out: &mut OutDir) -> Result<String, CliError> {
    let cfg = inv.config.dist.as_ref().ok_or(CliError::MissingSection("dist"))?;
    let flat = flat_distance(&cfg.a, &cfg.b);
    let h2 = hk_cone_distance_squared(&cfg.a, &cfg.b);
    out.write_json(
        "dist.json",
        &DistOutput {
            a: &cfg.a,
            b: &cfg.b,
            flat_distance: flat,
            hk_distance: h2.sqrt(),
            hk_distance_squared: h2,
        },
    )?;
    Ok(format!("{flat:?}\n"))
}

#[derive(Serialize)]
struct EnergyOutput {
    energy: f64,
    mass_integral: f64,
    fisher_information: f64,
    coercivity: CoercivityReport,
}

fn energy(inv: &Invocation, out: &mut OutDir) -> Result<String, CliError> {
    let curve = read_curve(&input(inv, &inv.config.inputs.curve, "curve")?)?;
    let params = inv.config.energy.params();
    let energy = curve_energy(&curve, &params).map_err(CliError::runtime)?;
    out.write_json(
        "energy.json",
        &EnergyOutput {
            energy,
            mass_integral: mass_integral(&curve),
            fisher_information: fisher_information(&curve),
            coercivity: coercivity_bounds(&curve, &params).map_err(CliError::runtime)?,
        },
    )?;
    Ok(format!("{energy:?}\n"))
}

fn field_from_source(inv: &Invocation, src: &FieldSource) -> Result<FieldGrid, CliError> {
    let domain = inv.config.domain.clone();
    let grid = match src {
        FieldSource::File { path } => return read_field(&resolve(inv, path)),
        FieldSource::Rotation {
            cells,
            time_steps,
            angular_speed,
            growth,
        } => {
            let c = domain.center();
            let (w, g) = (*angular_speed, *growth);
            FieldGrid::from_fn(
                domain,
                *cells,
                *time_steps,
                move |_, x| vec![-w * (x[1] - c[1]), w * (x[0] - c[0])],
                move |_, _| g,
                None,
            )
        }
        FieldSource::Uniform {
            cells,
            time_steps,
            velocity,
            growth,
        } => {
            let g = *growth;
            FieldGrid::from_fn(domain, *cells, *time_steps, |_, _| velocity.clone(), move |_, _| g, None)
        }
    };
    grid.map_err(CliError::runtime)
}

#[derive(Serialize)]
struct SimulateOutput {
    atoms: usize,
    steps: usize,
    max_position_residual: f64,
    max_mass_residual: f64,
    mass_at_start: f64,
    mass_at_end: f64,
    space_time_mass: f64,
    raster: Option<RasterOutput>,
}

#[derive(Serialize)]
struct RasterOutput {
    header: &'static str,
    cells: usize,
    time_steps: usize,
    space_time_mass: Option<f64>,
}

fn simulate(inv: &Invocation, out: &mut OutDir) -> Result<String, CliError> {
    let cfg = &inv.config.simulate;
    let fg = field_from_source(inv, &cfg.field)?;
    let domain = fg.domain().clone();
    let mut starts: Vec<(Vec<f64>, f64, f64)> =
        cfg.starts.iter().map(|s| (s.position.clone(), s.mass, s.weight)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(inv.config.seed);
    for _ in 0..cfg.random_starts {
        let x = (0..domain.dim())
            .map(|a| {
                let (lo, ext) = (domain.lower()[a], domain.extent(a));
                lo + ext * rng.gen_range(0.2..0.8)
            })
            .collect();
        starts.push((x, 1.0, 1.0));
    }
    if starts.is_empty() {
        return Err(CliError::Range {
            field: "simulate.starts".into(),
            value: 0.0,
            requirement: "nonempty, or random_starts >= 1".into(),
        });
    }
    let mut atoms = Vec::with_capacity(starts.len());
    let (mut pos_res, mut mass_res) = (0.0f64, 0.0f64);
    for (i, (x, m, w)) in starts.iter().enumerate() {
        if x.len() != domain.dim() || !domain.contains(x) {
            return Err(CliError::Range {
                field: format!("simulate.starts[{i}].position"),
                value: f64::NAN,
                requirement: "inside the field's domain".into(),
            });
        }
        let curve = integrate_characteristic(&fg, x, *m, cfg.steps).map_err(CliError::runtime)?;
        let r = ode_residual(&curve, &fg);
        pos_res = pos_res.max(r.pos_residual);
        mass_res = mass_res.max(r.mass_residual);
        atoms.push(EnsembleAtom {
            coefficient: *w,
            curve,
        });
    }
    let ensemble = CurveEnsemble::new(atoms).map_err(CliError::runtime)?;
    write_ensemble(out, &ensemble)?;
    let raster = match &cfg.raster {
        Some(r) => {
            let spec = GridSpec {
                domain,
                cells: r.cells,
                time_steps: r.time_steps,
            };
            let grid = grid_solution_from_ensemble(&ensemble, r.kernel_width, &spec).map_err(|e| CliError::Range {
                field: "simulate.raster.kernel_width".into(),
                value: r.kernel_width,
                requirement: e.to_string(),
            })?;
            out.write_field("grid", &grid)?;
            Some(RasterOutput {
                header: "grid.json",
                cells: r.cells,
                time_steps: r.time_steps,
                space_time_mass: grid.space_time_mass(),
            })
        }
        None => None,
    };
    let report = SimulateOutput {
        atoms: ensemble.len(),
        steps: cfg.steps,
        max_position_residual: pos_res,
        max_mass_residual: mass_res,
        mass_at_start: ensemble.total_mass_at(0.0),
        mass_at_end: ensemble.total_mass_at(1.0),
        space_time_mass: ensemble.space_time_mass(),
        raster,
    };
    out.write_json("simulate.json", &report)?;
    Ok(format!("{} curves, mass {:?} -> {:?}\n", report.atoms, report.mass_at_start, report.mass_at_end))
}

#[derive(Serialize)]
struct LiftOutput {
    report: LiftReport,
    comparison: Option<Comparison>,
}

#[derive(Serialize)]
struct Comparison {
    /// Max over grid times of the centroid distance to the reference.
    max_centroid_error: f64,
    /// Max over grid times of the total-mass difference to the reference.
    max_mass_error: f64,
}

fn centroids_csv(e: &CurveEnsemble, times: &[f64], dim: usize) -> String {
    let mut s = String::from("t,mass");
    for j in 1..=dim {
        let _ = write!(s, ",c{j}");
    }
    s.push('\n');
    for &t in times {
        let slice = superpose(e, t);
        let _ = write!(s, "{t:?},{:?}", slice.total_mass());
        match slice.centroid() {
            Some(c) => c.iter().for_each(|x| {
                let _ = write!(s, ",{x:?}");
            }),
            None => (0..dim).for_each(|_| s.push(',')),
        }
        s.push('\n');
    }
    s
}

fn lift_cmd(inv: &Invocation, out: &mut OutDir) -> Result<String, CliError> {
    let fg = read_field(&input(inv, &inv.config.inputs.field, "field")?)?;
    let (lifted, report) = lift(&fg, &inv.config.lift.options()).map_err(CliError::runtime)?;
    write_ensemble(out, &lifted)?;
    let times: Vec<f64> = (0..=fg.time_steps()).map(|k| fg.time(k)).collect();
    out.write_text("centroids.csv", &centroids_csv(&lifted, &times, fg.dim()))?;
    let comparison = match &inv.config.inputs.ensemble {
        Some(p) => {
            let reference: CurveEnsemble = read_json(&resolve(inv, p))?;
            let (mut dc, mut dm) = (0.0f64, 0.0f64);
            for &t in &times {
                let (a, b) = (superpose(&lifted, t), superpose(&reference, t));
                dm = dm.max((a.total_mass() - b.total_mass()).abs());
                if let (Some(ca), Some(cb)) = (a.centroid(), b.centroid()) {
                    let d2: f64 = ca.iter().zip(&cb).map(|(x, y)| (x - y) * (x - y)).sum();
                    dc = dc.max(d2.sqrt());
                }
            }
            Some(Comparison {
                max_centroid_error: dc,
                max_mass_error: dm,
            })
        }
        None => None,
    };
    let text = format!(
        "{} curves, total coefficient {:?} <= bound {:?}: {}\n",
        report.atoms, report.total_coefficient, report.bound, report.bound_satisfied
    );
    out.write_json("lift.json", &LiftOutput { report, comparison })?;
    Ok(text)
}

#[derive(Serialize)]
struct SolveOutput {
    data_source: &'static str,
    stop: StopReason,
    iterations: usize,
    atoms: usize,
    residual_norm: f64,
    data_norm: f64,
    relative_residual: f64,
    objective_trace: Vec<f64>,
    certificate_trace: Vec<f64>,
    extremal: Vec<bool>,
}

fn solve(inv: &Invocation, out: &mut OutDir) -> Result<String, CliError> {
    let mut model: ObservationModel = read_json(&input(inv, &inv.config.inputs.observations, "observations")?)?;
    let mut data_source = "file";
    if let Some(p) = &inv.config.inputs.ensemble {
        let truth: CurveEnsemble = read_json(&resolve(inv, p))?;
        let y = observe(&truth, &model);
        model = model.with_data(y).map_err(CliError::runtime)?;
        data_source = "synthetic";
        out.write_json("observations.json", &model)?;
    }
    if model.dim() != inv.config.domain.dim() {
        return Err(CliError::Range {
            field: "domain.lower".into(),
            value: inv.config.domain.dim() as f64,
            requirement: format!("dimension {} to match the detectors", model.dim()),
        });
    }
    let params = inv.config.energy.params();
    let mut cfg = inv.config.solve.solver;
    cfg.seed = inv.config.seed;
    let sol = gcg_solve(&model, &inv.config.domain, &params, &cfg).map_err(CliError::runtime)?;
    write_ensemble(out, &sol.ensemble)?;
    let mut trace = String::from("iteration,objective,certificate\n");
    for (i, f) in sol.objective_trace.iter().enumerate() {
        let _ = write!(trace, "{i},{f:?},");
        if i > 0 {
            if let Some(c) = sol.certificate_trace.get(i - 1) {
                let _ = write!(trace, "{c:?}");
            }
        }
        trace.push('\n');
    }
    out.write_text("trace.csv", &trace)?;
    let relative = if sol.data_norm > 0.0 { sol.residual_norm / sol.data_norm } else { 0.0 };
    let report = SolveOutput {
        data_source,
        stop: sol.stop,
        iterations: sol.iterations,
        atoms: sol.ensemble.len(),
        residual_norm: sol.residual_norm,
        data_norm: sol.data_norm,
        relative_residual: relative,
        extremal: sol
            .ensemble
            .atoms()
            .iter()
            .map(|a| extremality_check(&a.curve, &params, &cfg.caps).passed)
            .collect(),
        objective_trace: sol.objective_trace,
        certificate_trace: sol.certificate_trace,
    };
    out.write_json("solve.json", &report)?;
    Ok(format!(
        "{} atoms, residual/|y| {:e}, stop {:?}\n",
        report.atoms, report.relative_residual, report.stop
    ))
}

#[derive(Serialize)]
struct CheckOutput {
    energy_before: f64,
    normalized: bool,
    report: ExtremalityReport,
}

fn check_extremal(inv: &Invocation, out: &mut OutDir) -> Result<String, CliError> {
    let cfg = &inv.config.check_extremal;
    let curve = read_curve(&input(inv, &inv.config.inputs.curve, "curve")?)?;
    let params = inv.config.energy.params();
    let energy_before = curve_energy(&curve, &params).map_err(CliError::runtime)?;
    let checked: WeightedCurve = if cfg.normalize {
        let unit = normalize_to_unit_energy(&curve, &params).map_err(CliError::runtime)?;
        out.write_text("unit_curve.csv", &unit.to_csv())?;
        unit
    } else {
        curve
    };
    let report = extremality_check(&checked, &params, &cfg.caps);
    let passed = report.passed;
    out.write_json(
        "extremality.json",
        &CheckOutput {
            energy_before,
            normalized: cfg.normalize,
            report,
        },
    )?;
    Ok(format!("{passed}\n"))
}
