//! Superposition at grid scale, in both directions.
//!
//! * [`superpose`] turns a finite ensemble of weighted curves into the
//!   measure slices `ρ_t = Σ cᵢ hᵢ(t) δ_{γᵢ(t)}` and
//!   [`continuity_residual`] tests them against the weak continuity
//!   equation.
//! * [`mollify`] and [`lift`] go the other way: a gridded solution is
//!   regularised, its characteristics are integrated from every sample
//!   point, and each becomes an atom of an ensemble with `‖h‖₁ = 1`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::characteristics::{integrate_characteristic, CharacteristicsError, FieldGrid};
use crate::cone_space::{ConeAtom, CurveError, DomainBox, WeightedCurve};
use crate::energy::mass_integral;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SuperpositionError {
    #[error("coefficient {0} is negative or not finite")]
    InvalidCoefficient(usize),
    #[error("ensemble curves must share one time grid and dimension")]
    MismatchedGrids,
    #[error("epsilon must be positive and finite, got {0}")]
    InvalidEpsilon(f64),
    #[error("field grid carries no density")]
    MissingDensity,
    #[error("kernel width {width} is smaller than one cell ({cell})")]
    InvalidKernelWidth { width: f64, cell: f64 },
    #[error("sampling density must be positive")]
    InvalidSampling,
    #[error("test function support must lie inside (0,1) × Ω")]
    InvalidTestFunction,
    #[error(transparent)]
    Characteristics(#[from] CharacteristicsError),
    #[error(transparent)]
    Curve(#[from] CurveError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleAtom {
    pub coefficient: f64,
    pub curve: WeightedCurve,
}

/// `σ = Σ cᵢ δ_{curveᵢ}` with `cᵢ ≥ 0` and a shared time grid.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(try_from = "RawEnsemble", into = "RawEnsemble")]
pub struct CurveEnsemble {
    atoms: Vec<EnsembleAtom>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawEnsemble {
    atoms: Vec<EnsembleAtom>,
}

impl TryFrom<RawEnsemble> for CurveEnsemble {
    type Error = SuperpositionError;
    fn try_from(r: RawEnsemble) -> Result<Self, Self::Error> {
        CurveEnsemble::new(r.atoms)
    }
}

impl From<CurveEnsemble> for RawEnsemble {
    fn from(e: CurveEnsemble) -> Self {
        RawEnsemble { atoms: e.atoms }
    }
}

impl CurveEnsemble {
    pub fn new(atoms: Vec<EnsembleAtom>) -> Result<Self, SuperpositionError> {
        if let Some(i) = atoms
            .iter()
            .position(|a| !(a.coefficient.is_finite() && a.coefficient >= 0.0))
        {
            return Err(SuperpositionError::InvalidCoefficient(i));
        }
        if let Some(first) = atoms.first() {
            let same = atoms.iter().all(|a| {
                a.curve.times() == first.curve.times() && a.curve.dim() == first.curve.dim()
            });
            if !same {
                return Err(SuperpositionError::MismatchedGrids);
            }
        }
        Ok(Self { atoms })
    }

    pub fn single(coefficient: f64, curve: WeightedCurve) -> Result<Self, SuperpositionError> {
        Self::new(vec![EnsembleAtom { coefficient, curve }])
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn atoms(&self) -> &[EnsembleAtom] {
        &self.atoms
    }

    pub fn into_atoms(self) -> Vec<EnsembleAtom> {
        self.atoms
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    pub fn times(&self) -> Option<&[f64]> {
        self.atoms.first().map(|a| a.curve.times())
    }

    /// Disjoint union `e₁ ⊎ e₂`.
    pub fn union(&self, other: &CurveEnsemble) -> Result<Self, SuperpositionError> {
        Self::new(self.atoms.iter().chain(&other.atoms).cloned().collect())
    }

    /// `Σ cᵢ hᵢ(t)`.
    pub fn total_mass_at(&self, t: f64) -> f64 {
        self.atoms
            .iter()
            .map(|a| a.coefficient * a.curve.sample(t).mass)
            .sum()
    }

    /// `‖ρ‖ = Σ cᵢ ∫ hᵢ dt`.
    pub fn space_time_mass(&self) -> f64 {
        self.atoms
            .iter()
            .map(|a| a.coefficient * mass_integral(&a.curve))
            .sum()
    }

    pub fn coefficient_sum(&self) -> f64 {
        self.atoms.iter().map(|a| a.coefficient).sum()
    }
}

/// A finite nonnegative measure `Σ mⱼ δ_{xⱼ}` at time `t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasureSlice {
    pub time: f64,
    pub atoms: Vec<ConeAtom>,
}

impl MeasureSlice {
    pub fn total_mass(&self) -> f64 {
        self.atoms.iter().map(|a| a.mass).sum()
    }

    /// `∫ φ dρ_t`.
    pub fn pair(&self, phi: impl Fn(&[f64]) -> f64) -> f64 {
        self.atoms.iter().map(|a| a.mass * phi(&a.position)).sum()
    }

    /// Mass-weighted mean position; `None` for the zero measure.
    pub fn centroid(&self) -> Option<Vec<f64>> {
        let m = self.total_mass();
        if m <= 0.0 {
            return None;
        }
        let d = self.atoms[0].position.len();
        let mut c = vec![0.0; d];
        for a in &self.atoms {
            for (cj, xj) in c.iter_mut().zip(&a.position) {
                *cj += a.mass * xj;
            }
        }
        c.iter_mut().for_each(|x| *x /= m);
        Some(c)
    }
}

/// `ρ_t` of the ensemble: atoms `(cᵢ hᵢ(t), γᵢ(t))` with `hᵢ(t)` above the
/// curve's support threshold.
pub fn superpose(e: &CurveEnsemble, t: f64) -> MeasureSlice {
    let atoms = e
        .atoms
        .iter()
        .filter_map(|a| {
            let s = a.curve.sample(t);
            (s.mass > a.curve.support_threshold() && a.coefficient > 0.0).then(|| ConeAtom {
                mass: a.coefficient * s.mass,
                position: s.position,
            })
        })
        .collect();
    MeasureSlice { time: t, atoms }
}

fn bump(u: f64) -> (f64, f64) {
    if u.abs() >= 1.0 {
        return (0.0, 0.0);
    }
    let s = 1.0 - u * u;
    let s3 = s * s * s;
    (s3 * s, -8.0 * u * s3)
}

/// Tensor-product polynomial bump `φ(t,x) = b((t−t_c)/r_t) Πⱼ b((xⱼ−cⱼ)/rⱼ)`
/// with `b(u) = (1−u²)⁴` on `|u| < 1`, a `C³` function with compact support.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestFunction {
    pub time_center: f64,
    pub time_radius: f64,
    pub center: Vec<f64>,
    pub radius: Vec<f64>,
}

impl TestFunction {
    /// Checks that the support closure lies inside `(0,1) × Ω`.
    pub fn new(
        time_center: f64,
        time_radius: f64,
        center: Vec<f64>,
        radius: Vec<f64>,
        domain: &DomainBox,
    ) -> Result<Self, SuperpositionError> {
        let ok_time = time_radius > 0.0 && time_center - time_radius > 0.0 && time_center + time_radius < 1.0;
        let ok_space = center.len() == domain.dim()
            && radius.len() == domain.dim()
            && (0..domain.dim()).all(|j| {
                radius[j] > 0.0
                    && center[j] - radius[j] >= domain.lower()[j]
                    && center[j] + radius[j] <= domain.upper()[j]
            });
        if ok_time && ok_space {
            Ok(Self {
                time_center,
                time_radius,
                center,
                radius,
            })
        } else {
            Err(SuperpositionError::InvalidTestFunction)
        }
    }

    /// `(φ, ∂_tφ, ∇φ)` at `(t, x)`.
    pub fn evaluate(&self, t: f64, x: &[f64]) -> (f64, f64, Vec<f64>) {
        let d = x.len();
        let (bt, dbt) = bump((t - self.time_center) / self.time_radius);
        let factors: Vec<(f64, f64)> = (0..d)
            .map(|j| {
                let (b, db) = bump((x[j] - self.center[j]) / self.radius[j]);
                (b, db / self.radius[j])
            })
            .collect();
        let space: f64 = factors.iter().map(|f| f.0).product();
        let grad = (0..d)
            .map(|j| {
                bt * factors
                    .iter()
                    .enumerate()
                    .map(|(i, f)| if i == j { f.1 } else { f.0 })
                    .product::<f64>()
            })
            .collect();
        (bt * space, dbt / self.time_radius * space, grad)
    }

    pub fn value(&self, t: f64, x: &[f64]) -> f64 {
        self.evaluate(t, x).0
    }
}

/// For each test function, `Σᵢ cᵢ ∫ hᵢ [∂_tφ + ∇φ·v + φ g](t, γᵢ(t)) dt` by
/// the trapezoid rule on the ensemble grid.
pub fn continuity_residuals(e: &CurveEnsemble, fg: &FieldGrid, tests: &[TestFunction]) -> Vec<f64> {
    tests
        .iter()
        .map(|phi| {
            e.atoms
                .iter()
                .map(|a| {
                    let c = &a.curve;
                    let mut v = vec![0.0; c.dim()];
                    let n = c.len();
                    let mut total = 0.0;
                    for k in 0..n {
                        let h = c.masses()[k];
                        if h == 0.0 {
                            continue;
                        }
                        let t = c.times()[k];
                        let x = c.position(k);
                        let g = fg.sample_into(t, x, &mut v);
                        let (f, ft, grad) = phi.evaluate(t, x);
                        let integrand =
                            h * (ft + grad.iter().zip(&v).map(|(a, b)| a * b).sum::<f64>() + f * g);
                        let w = match k {
                            0 => 0.5 * (c.times()[1] - c.times()[0]),
                            k if k == n - 1 => 0.5 * (c.times()[k] - c.times()[k - 1]),
                            k => 0.5 * (c.times()[k + 1] - c.times()[k - 1]),
                        };
                        total += w * integrand;
                    }
                    a.coefficient * total
                })
                .sum()
        })
        .collect()
}

/// Largest absolute weak-form residual over `tests` (`0` for no tests).
pub fn continuity_residual(e: &CurveEnsemble, fg: &FieldGrid, tests: &[TestFunction]) -> f64 {
    continuity_residuals(e, fg, tests)
        .into_iter()
        .map(f64::abs)
        .fold(0.0, f64::max)
}

/// Discrete 1-D weights of `(1−(s/ε)²)³` at offsets `j·h`, normalised to sum 1.
fn mollifier_weights(epsilon: f64, spacing: f64) -> Vec<f64> {
    let r = (epsilon / spacing).floor() as isize;
    let mut w: Vec<f64> = (-r..=r)
        .map(|j| {
            let u = j as f64 * spacing / epsilon;
            if u.abs() < 1.0 {
                let s = 1.0 - u * u;
                s * s * s
            } else {
                0.0
            }
        })
        .collect();
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|x| *x /= total);
    w
}

/// Convolves `channels` interleaved values per node along one axis, zero
/// outside the grid.
fn convolve_axis(data: &[f64], channels: usize, cells: usize, dim: usize, axis: usize, w: &[f64]) -> Vec<f64> {
    let r = (w.len() / 2) as isize;
    let stride = cells.pow((dim - 1 - axis) as u32);
    let nodes = data.len() / channels;
    let mut out = vec![0.0; data.len()];
    for node in 0..nodes {
        let i = ((node / stride) % cells) as isize;
        for (jj, wj) in w.iter().enumerate() {
            let j = jj as isize - r;
            let src = i + j;
            if src < 0 || src >= cells as isize || *wj == 0.0 {
                continue;
            }
            let src_node = (node as isize + j * stride as isize) as usize;
            for c in 0..channels {
                out[node * channels + c] += wj * data[src_node * channels + c];
            }
        }
    }
    out
}

/// `ρ^ε = ρ⁎ξ_ε + ε`, `v^ε = (vρ)⁎ξ_ε / ρ^ε`, `g^ε = (gρ)⁎ξ_ε / ρ^ε`, with a
/// discretely normalised tensor-product kernel `(1−(x/ε)²)³`. The grid box
/// plays the role of the enlarged domain; values outside it are zero. The
/// result samples density-weighted, so off-node velocities are
/// `I((vρ)⁎ξ_ε) / I(ρ^ε)`.
pub fn mollify(fg: &FieldGrid, epsilon: f64) -> Result<FieldGrid, SuperpositionError> {
    if !(epsilon.is_finite() && epsilon > 0.0) {
        return Err(SuperpositionError::InvalidEpsilon(epsilon));
    }
    let rho = fg.density().ok_or(SuperpositionError::MissingDensity)?;
    let d = fg.dim();
    let n = fg.cells();
    let nodes = fg.node_count();
    let channels = d + 2;
    let kernels: Vec<Vec<f64>> = (0..d).map(|a| mollifier_weights(epsilon, fg.spacing(a))).collect();
    let slices: Vec<(Vec<f64>, Vec<f64>, Vec<f64>)> = (0..=fg.time_steps())
        .into_par_iter()
        .map(|k| {
            let mut data = vec![0.0; nodes * channels];
            for node in 0..nodes {
                let i = k * nodes + node;
                let r = rho[i];
                data[node * channels] = r;
                for j in 0..d {
                    data[node * channels + 1 + j] = fg.velocity()[i * d + j] * r;
                }
                data[node * channels + d + 1] = fg.growth()[i] * r;
            }
            for (axis, w) in kernels.iter().enumerate() {
                data = convolve_axis(&data, channels, n, d, axis, w);
            }
            let mut r_out = Vec::with_capacity(nodes);
            let mut v_out = Vec::with_capacity(nodes * d);
            let mut g_out = Vec::with_capacity(nodes);
            for node in 0..nodes {
                let re = data[node * channels] + epsilon;
                r_out.push(re);
                for j in 0..d {
                    v_out.push(data[node * channels + 1 + j] / re);
                }
                g_out.push(data[node * channels + d + 1] / re);
            }
            (r_out, v_out, g_out)
        })
        .collect();
    let mut density = Vec::with_capacity(rho.len());
    let mut velocity = Vec::with_capacity(rho.len() * d);
    let mut growth = Vec::with_capacity(rho.len());
    for (r, v, g) in slices {
        density.extend(r);
        velocity.extend(v);
        growth.extend(g);
    }
    Ok(FieldGrid::new(
        fg.domain().clone(),
        n,
        fg.time_steps(),
        velocity,
        growth,
        Some(density),
    )?
    .density_weighted()?)
}

/// `Σ_t Σ_nodes |v|²ρ·cell` and `Σ_t Σ_nodes g²ρ·cell` summed over every
/// time slice; used to check that mollification does not increase energy.
pub fn grid_kinetic_energies(fg: &FieldGrid) -> Option<(f64, f64)> {
    let rho = fg.density()?;
    let d = fg.dim();
    let cv = fg.cell_volume();
    let mut ev = 0.0;
    let mut eg = 0.0;
    for (i, r) in rho.iter().enumerate() {
        let v2: f64 = fg.velocity()[i * d..(i + 1) * d].iter().map(|x| x * x).sum();
        ev += v2 * r * cv;
        eg += fg.growth()[i] * fg.growth()[i] * r * cv;
    }
    Some((ev, eg))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LiftOptions {
    pub epsilon: f64,
    pub samples_per_axis: usize,
    /// Integrator steps per time slice of the field grid.
    #[serde(default = "one")]
    pub steps_per_slice: usize,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LiftReport {
    pub atoms: usize,
    /// `Σ cᵢ`.
    pub total_coefficient: f64,
    /// `‖ρ‖` of the input grid solution.
    pub input_mass: f64,
    /// `ε|V|`.
    pub background_mass: f64,
    pub bound: f64,
    pub bound_satisfied: bool,
    /// `max |∫hᵢ − 1|` over emitted curves.
    pub max_normalization_error: f64,
}

/// Slack added to the total-variation bound check.
pub const LIFT_BOUND_SLACK: f64 = 1e-8;

/// Integrates the regularised characteristic from every sample point `x`
/// (cell centres of a `samples_per_axis^d` grid, weight `w` = cell volume),
/// starting from mass `ρ₀^ε(x)`, and emits the atom
/// `(w·∫R_x, R_x / ∫R_x)`.
pub fn lift(fg: &FieldGrid, opts: &LiftOptions) -> Result<(CurveEnsemble, LiftReport), SuperpositionError> {
    if opts.samples_per_axis == 0 || opts.steps_per_slice == 0 {
        return Err(SuperpositionError::InvalidSampling);
    }
    let input_mass = fg.space_time_mass().ok_or(SuperpositionError::MissingDensity)?;
    let smooth = mollify(fg, opts.epsilon)?;
    let domain = fg.domain();
    let d = domain.dim();
    let s = opts.samples_per_axis;
    let count = s.pow(d as u32);
    let spacing: Vec<f64> = (0..d).map(|a| domain.extent(a) / s as f64).collect();
    let weight: f64 = spacing.iter().product();
    let steps = fg.time_steps() * opts.steps_per_slice;

    let atoms: Vec<Result<EnsembleAtom, SuperpositionError>> = (0..count)
        .into_par_iter()
        .map(|idx| {
            let mut x = vec![0.0; d];
            let mut rest = idx;
            for axis in (0..d).rev() {
                let i = rest % s;
                rest /= s;
                x[axis] = domain.lower()[axis] + (i as f64 + 0.5) * spacing[axis];
            }
            let r0 = smooth.sample_density(0.0, &x).expect("mollified grid has density");
            let curve = integrate_characteristic(&smooth, &x, r0, steps)?;
            let total = mass_integral(&curve);
            Ok(EnsembleAtom {
                coefficient: weight * total,
                curve: curve.scaled(1.0 / total),
            })
        })
        .collect();
    let atoms = atoms.into_iter().collect::<Result<Vec<_>, _>>()?;
    let max_normalization_error = atoms
        .iter()
        .map(|a| (mass_integral(&a.curve) - 1.0).abs())
        .fold(0.0, f64::max);
    let ensemble = CurveEnsemble::new(atoms)?;
    let total_coefficient = ensemble.coefficient_sum();
    let background_mass = opts.epsilon * domain.volume();
    let bound = input_mass + background_mass;
    let report = LiftReport {
        atoms: ensemble.len(),
        total_coefficient,
        input_mass,
        background_mass,
        bound,
        bound_satisfied: total_coefficient <= bound + LIFT_BOUND_SLACK,
        max_normalization_error,
    };
    Ok((ensemble, report))
}

/// Spatial box, cells per axis and time steps of a grid to rasterise onto.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub domain: DomainBox,
    pub cells: usize,
    pub time_steps: usize,
}

/// Tensor-product `(1−(s/w)²)³` weights of the grid nodes around `p`,
/// normalised to sum 1 over the nodes inside the grid.
fn deposit_weights(spec: &GridSpec, p: &[f64], width: f64) -> Vec<(usize, f64)> {
    let d = spec.domain.dim();
    let n = spec.cells;
    let per_axis: Vec<Vec<(usize, f64)>> = (0..d)
        .map(|a| {
            let h = spec.domain.extent(a) / n as f64;
            let lo = spec.domain.lower()[a];
            let centre = (p[a] - lo) / h - 0.5;
            let reach = (width / h).ceil() as isize + 1;
            let c = centre.round() as isize;
            ((c - reach)..=(c + reach))
                .filter(|&i| i >= 0 && i < n as isize)
                .filter_map(|i| {
                    let x = lo + (i as f64 + 0.5) * h;
                    let u = (x - p[a]) / width;
                    (u.abs() < 1.0).then(|| {
                        let s = 1.0 - u * u;
                        (i as usize, s * s * s)
                    })
                })
                .collect()
        })
        .collect();
    let mut out = vec![(0usize, 1.0f64)];
    for axis in per_axis {
        let mut next = Vec::with_capacity(out.len() * axis.len());
        for (idx, w) in &out {
            for (i, wi) in &axis {
                next.push((idx * n + i, w * wi));
            }
        }
        out = next;
    }
    let total: f64 = out.iter().map(|x| x.1).sum();
    out.iter_mut().for_each(|x| x.1 /= total);
    out
}

/// Rasterises an ensemble into a `(ρ, v, g)` grid solution: each atom's
/// mass `cᵢhᵢ(t)`, momentum `cᵢhᵢγ̇ᵢ` and source `cᵢḣᵢ` are deposited with a
/// normalised compact kernel of the given width, and `v = m/ρ`, `g = μ/ρ`
/// where `ρ > 0`.
pub fn grid_solution_from_ensemble(
    e: &CurveEnsemble,
    kernel_width: f64,
    spec: &GridSpec,
) -> Result<FieldGrid, SuperpositionError> {
    let d = spec.domain.dim();
    let cell = (0..d)
        .map(|a| spec.domain.extent(a) / spec.cells as f64)
        .fold(0.0, f64::max);
    if !(kernel_width >= cell) {
        return Err(SuperpositionError::InvalidKernelWidth {
            width: kernel_width,
            cell,
        });
    }
    if e.atoms().iter().any(|a| a.curve.dim() != d) {
        return Err(SuperpositionError::MismatchedGrids);
    }
    let n = spec.cells;
    let nodes = n.pow(d as u32);
    let m = spec.time_steps;
    let cv: f64 = (0..d).map(|a| spec.domain.extent(a) / n as f64).product();
    let half = 0.5 / m as f64;
    let slices: Vec<(Vec<f64>, Vec<f64>, Vec<f64>)> = (0..=m)
        .into_par_iter()
        .map(|k| {
            let t = k as f64 / m as f64;
            let (ta, tb) = ((t - half).max(0.0), (t + half).min(1.0));
            let mut rho = vec![0.0; nodes];
            let mut mom = vec![0.0; nodes * d];
            let mut src = vec![0.0; nodes];
            for a in e.atoms() {
                let now = a.curve.sample(t);
                let mass = a.coefficient * now.mass;
                if mass <= 0.0 {
                    continue;
                }
                let (before, after) = (a.curve.sample(ta), a.curve.sample(tb));
                let velocity: Vec<f64> = (0..d)
                    .map(|j| (after.position[j] - before.position[j]) / (tb - ta))
                    .collect();
                let hdot = a.coefficient * (after.mass - before.mass) / (tb - ta);
                let mut p = now.position.clone();
                spec.domain.clamp_in_place(&mut p);
                for (node, w) in deposit_weights(spec, &p, kernel_width) {
                    rho[node] += mass * w / cv;
                    for j in 0..d {
                        mom[node * d + j] += mass * velocity[j] * w / cv;
                    }
                    src[node] += hdot * w / cv;
                }
            }
            let mut v = vec![0.0; nodes * d];
            let mut g = vec![0.0; nodes];
            for node in 0..nodes {
                if rho[node] > 0.0 {
                    for j in 0..d {
                        v[node * d + j] = mom[node * d + j] / rho[node];
                    }
                    g[node] = src[node] / rho[node];
                }
            }
            (rho, v, g)
        })
        .collect();
    let mut density = Vec::with_capacity((m + 1) * nodes);
    let mut velocity = Vec::with_capacity((m + 1) * nodes * d);
    let mut growth = Vec::with_capacity((m + 1) * nodes);
    for (r, v, g) in slices {
        density.extend(r);
        velocity.extend(v);
        growth.extend(g);
    }
    Ok(FieldGrid::new(
        spec.domain.clone(),
        n,
        m,
        velocity,
        growth,
        Some(density),
    )?)
}
