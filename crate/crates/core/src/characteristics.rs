//! Characteristic system `γ̇ = v(t,γ)`, `ḣ = g(t,γ)h` for gridded fields,
//! plus the vanishing-time map and the cutoff operator.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cone_space::{euclidean, DomainBox, WeightedCurve};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CharacteristicsError {
    #[error("field grid: {0}")]
    InvalidGrid(String),
    #[error("non-finite field value along the path at t = {0}")]
    NonFiniteField(f64),
    #[error("initial point is outside the domain box")]
    OutsideDomain,
    #[error("initial mass must be finite and nonnegative")]
    InvalidMass,
    #[error("step count must be positive")]
    ZeroSteps,
}

/// Space-time samples of velocity `v`, growth `g` and optionally density
/// `ρ` on a uniform cell-centred grid over a [`DomainBox`].
///
/// Each axis is split into `cells` equal cells and values live at the cell
/// centres; time nodes are `k/M`, `k = 0..=M`. Node indices are row-major
/// with the last axis fastest.
///
/// By default `v` and `g` are interpolated directly. A density-weighted
/// grid (see [`FieldGrid::density_weighted`]) instead interpolates `ρ`, `vρ`
/// and `gρ` and returns the quotients.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldGrid {
    domain: DomainBox,
    cells: usize,
    time_steps: usize,
    velocity: Vec<f64>,
    growth: Vec<f64>,
    density: Option<Vec<f64>>,
    /// Interleaved `[ρ, v₁ρ, …, v_dρ, gρ]` per node when density-weighted.
    fluxes: Option<Vec<f64>>,
}

impl FieldGrid {
    pub fn new(
        domain: DomainBox,
        cells: usize,
        time_steps: usize,
        velocity: Vec<f64>,
        growth: Vec<f64>,
        density: Option<Vec<f64>>,
    ) -> Result<Self, CharacteristicsError> {
        if cells == 0 || time_steps == 0 {
            return Err(CharacteristicsError::InvalidGrid(
                "need at least one cell per axis and one time step".into(),
            ));
        }
        let d = domain.dim();
        let nodes = cells
            .checked_pow(d as u32)
            .ok_or_else(|| CharacteristicsError::InvalidGrid("grid too large".into()))?;
        let slices = time_steps + 1;
        let check = |name: &str, got: usize, want: usize| {
            if got == want {
                Ok(())
            } else {
                Err(CharacteristicsError::InvalidGrid(format!(
                    "{name}: {got} values, expected {want}"
                )))
            }
        };
        check("velocity", velocity.len(), slices * nodes * d)?;
        check("growth", growth.len(), slices * nodes)?;
        if let Some(rho) = &density {
            check("density", rho.len(), slices * nodes)?;
            if rho.iter().any(|r| !(r.is_finite() && *r >= 0.0)) {
                return Err(CharacteristicsError::InvalidGrid(
                    "density must be finite and nonnegative".into(),
                ));
            }
        }
        if velocity.iter().chain(&growth).any(|x| !x.is_finite()) {
            return Err(CharacteristicsError::InvalidGrid("non-finite field entry".into()));
        }
        Ok(Self {
            domain,
            cells,
            time_steps,
            velocity,
            growth,
            density,
            fluxes: None,
        })
    }

    /// Switches sampling to `v = I(vρ)/I(ρ)`, `g = I(gρ)/I(ρ)` with `I` the
    /// grid interpolant (both zero where `I(ρ) = 0`).
    pub fn density_weighted(mut self) -> Result<Self, CharacteristicsError> {
        let rho = self
            .density
            .as_ref()
            .ok_or_else(|| CharacteristicsError::InvalidGrid("density-weighted sampling needs a density".into()))?;
        let d = self.dim();
        let mut fluxes = Vec::with_capacity(rho.len() * (d + 2));
        for (i, r) in rho.iter().enumerate() {
            fluxes.push(*r);
            fluxes.extend(self.velocity[i * d..(i + 1) * d].iter().map(|v| v * r));
            fluxes.push(self.growth[i] * r);
        }
        self.fluxes = Some(fluxes);
        Ok(self)
    }

    pub fn is_density_weighted(&self) -> bool {
        self.fluxes.is_some()
    }

    /// Grid filled from closures `v(t,x)`, `g(t,x)` and optional `ρ(t,x)`.
    pub fn from_fn(
        domain: DomainBox,
        cells: usize,
        time_steps: usize,
        v: impl Fn(f64, &[f64]) -> Vec<f64>,
        g: impl Fn(f64, &[f64]) -> f64,
        rho: Option<&dyn Fn(f64, &[f64]) -> f64>,
    ) -> Result<Self, CharacteristicsError> {
        let d = domain.dim();
        let nodes = cells.pow(d as u32);
        let mut velocity = Vec::with_capacity((time_steps + 1) * nodes * d);
        let mut growth = Vec::with_capacity((time_steps + 1) * nodes);
        let mut density = rho.map(|_| Vec::with_capacity((time_steps + 1) * nodes));
        let skeleton = Self {
            domain: domain.clone(),
            cells,
            time_steps,
            velocity: Vec::new(),
            growth: Vec::new(),
            density: None,
            fluxes: None,
        };
        let mut x = vec![0.0; d];
        for k in 0..=time_steps {
            let t = skeleton.time(k);
            for node in 0..nodes {
                skeleton.node_position_into(node, &mut x);
                let vv = v(t, &x);
                if vv.len() != d {
                    return Err(CharacteristicsError::InvalidGrid("velocity dimension".into()));
                }
                velocity.extend(vv);
                growth.push(g(t, &x));
                if let (Some(f), Some(out)) = (rho, density.as_mut()) {
                    out.push(f(t, &x));
                }
            }
        }
        Self::new(domain, cells, time_steps, velocity, growth, density)
    }

    pub fn domain(&self) -> &DomainBox {
        &self.domain
    }

    pub fn dim(&self) -> usize {
        self.domain.dim()
    }

    pub fn cells(&self) -> usize {
        self.cells
    }

    pub fn time_steps(&self) -> usize {
        self.time_steps
    }

    pub fn node_count(&self) -> usize {
        self.cells.pow(self.dim() as u32)
    }

    pub fn time(&self, k: usize) -> f64 {
        k as f64 / self.time_steps as f64
    }

    pub fn spacing(&self, axis: usize) -> f64 {
        self.domain.extent(axis) / self.cells as f64
    }

    pub fn cell_volume(&self) -> f64 {
        (0..self.dim()).map(|a| self.spacing(a)).product()
    }

    pub fn velocity(&self) -> &[f64] {
        &self.velocity
    }

    pub fn growth(&self) -> &[f64] {
        &self.growth
    }

    pub fn density(&self) -> Option<&[f64]> {
        self.density.as_deref()
    }

    /// Replaces the density; sampling goes back to direct interpolation.
    pub fn with_density(self, density: Option<Vec<f64>>) -> Result<Self, CharacteristicsError> {
        Self::new(
            self.domain,
            self.cells,
            self.time_steps,
            self.velocity,
            self.growth,
            density,
        )
    }

    /// Multi-index of a flat node index.
    pub fn node_index(&self, mut node: usize, out: &mut [usize]) {
        for axis in (0..self.dim()).rev() {
            out[axis] = node % self.cells;
            node /= self.cells;
        }
    }

    pub fn node_position_into(&self, node: usize, out: &mut [f64]) {
        let mut rest = node;
        for axis in (0..self.dim()).rev() {
            let i = rest % self.cells;
            rest /= self.cells;
            out[axis] = self.domain.lower()[axis] + (i as f64 + 0.5) * self.spacing(axis);
        }
    }

    pub fn node_position(&self, node: usize) -> Vec<f64> {
        let mut x = vec![0.0; self.dim()];
        self.node_position_into(node, &mut x);
        x
    }

    /// Total mass `Σ ρ·cell volume` of slice `k`.
    pub fn slice_mass(&self, k: usize) -> Option<f64> {
        let n = self.node_count();
        self.density
            .as_ref()
            .map(|r| r[k * n..(k + 1) * n].iter().sum::<f64>() * self.cell_volume())
    }

    /// `∫₀¹ ‖ρ_t‖ dt` by the trapezoid rule over the time nodes.
    pub fn space_time_mass(&self) -> Option<f64> {
        let m = self.time_steps;
        let masses: Option<Vec<f64>> = (0..=m).map(|k| self.slice_mass(k)).collect();
        masses.map(|ms| {
            let inner: f64 = ms[1..m].iter().sum();
            (inner + 0.5 * (ms[0] + ms[m])) / m as f64
        })
    }

    /// Multilinear interpolation in space, linear in time, of `comps`
    /// interleaved components stored per node. Points are clamped to the
    /// hull of the cell centres.
    fn interpolate(&self, data: &[f64], comps: usize, t: f64, x: &[f64], out: &mut [f64]) {
        let d = self.dim();
        let n = self.cells;
        let nodes = self.node_count();
        let tau = (t.clamp(0.0, 1.0)) * self.time_steps as f64;
        let k0 = (tau.floor() as usize).min(self.time_steps - 1);
        let ft = tau - k0 as f64;

        let mut base = [0usize; 8];
        let mut frac = [0f64; 8];
        let mut base_v;
        let mut frac_v;
        let (base, frac): (&mut [usize], &mut [f64]) = if d <= 8 {
            (&mut base[..d], &mut frac[..d])
        } else {
            base_v = vec![0usize; d];
            frac_v = vec![0f64; d];
            (&mut base_v[..], &mut frac_v[..])
        };
        for axis in 0..d {
            if n == 1 {
                base[axis] = 0;
                frac[axis] = 0.0;
                continue;
            }
            let s = ((x[axis] - self.domain.lower()[axis]) / self.spacing(axis) - 0.5)
                .clamp(0.0, (n - 1) as f64);
            let i0 = (s.floor() as usize).min(n - 2);
            base[axis] = i0;
            frac[axis] = s - i0 as f64;
        }
        out.iter_mut().for_each(|o| *o = 0.0);
        let corners = 1usize << d;
        for corner in 0..corners {
            let mut w = 1.0;
            let mut idx = 0usize;
            let mut skip = false;
            for axis in 0..d {
                let hi = (corner >> (d - 1 - axis)) & 1 == 1;
                let (wi, i) = if hi {
                    (frac[axis], base[axis] + 1)
                } else {
                    (1.0 - frac[axis], base[axis])
                };
                if wi == 0.0 {
                    skip = true;
                    break;
                }
                w *= wi;
                idx = idx * n + i;
            }
            if skip {
                continue;
            }
            for (slice, ws) in [(k0, 1.0 - ft), (k0 + 1, ft)] {
                if ws == 0.0 {
                    continue;
                }
                let off = (slice * nodes + idx) * comps;
                for c in 0..comps {
                    out[c] += w * ws * data[off + c];
                }
            }
        }
    }

    /// `(v(t,x), g(t,x))`.
    pub fn sample_fields(&self, t: f64, x: &[f64]) -> (Vec<f64>, f64) {
        let mut v = vec![0.0; self.dim()];
        let g = self.sample_into(t, x, &mut v);
        (v, g)
    }

    /// Writes `v(t,x)` into `v` and returns `g(t,x)`.
    pub fn sample_into(&self, t: f64, x: &[f64], v: &mut [f64]) -> f64 {
        if let Some(fluxes) = &self.fluxes {
            let d = self.dim();
            let mut buf = [0.0; 10];
            let mut heap;
            let out: &mut [f64] = if d + 2 <= buf.len() {
                &mut buf[..d + 2]
            } else {
                heap = vec![0.0; d + 2];
                &mut heap
            };
            self.interpolate(fluxes, d + 2, t, x, out);
            let r = out[0];
            if r > 0.0 {
                for j in 0..d {
                    v[j] = out[1 + j] / r;
                }
                return out[d + 1] / r;
            }
            v.iter_mut().for_each(|x| *x = 0.0);
            return 0.0;
        }
        self.interpolate(&self.velocity, self.dim(), t, x, v);
        let mut g = [0.0];
        self.interpolate(&self.growth, 1, t, x, &mut g);
        g[0]
    }

    pub fn sample_density(&self, t: f64, x: &[f64]) -> Option<f64> {
        self.density.as_ref().map(|rho| {
            let mut r = [0.0];
            self.interpolate(rho, 1, t, x, &mut r);
            r[0]
        })
    }
}

/// Classical RK4 for `γ̇ = v(t,γ)` with every stage clamped to the box, and
/// `h(t) = r₀·exp(∫₀ᵗ g(s,γ(s)) ds)` with the trapezoid rule along the path.
///
/// With `r₀ = 0` the mass stays zero and `γ` is frozen at `x₀`.
pub fn integrate_characteristic(
    fg: &FieldGrid,
    x0: &[f64],
    r0: f64,
    steps: usize,
) -> Result<WeightedCurve, CharacteristicsError> {
    if steps == 0 {
        return Err(CharacteristicsError::ZeroSteps);
    }
    if !(r0.is_finite() && r0 >= 0.0) {
        return Err(CharacteristicsError::InvalidMass);
    }
    let domain = fg.domain();
    if x0.len() != domain.dim() || !domain.contains(x0) {
        return Err(CharacteristicsError::OutsideDomain);
    }
    let d = x0.len();
    let times = WeightedCurve::uniform_times(steps);
    if r0 == 0.0 {
        let curve = WeightedCurve::new(times, vec![0.0; steps + 1], x0.repeat(steps + 1), d)
            .expect("frozen curve is well formed");
        return Ok(curve);
    }
    let dt = 1.0 / steps as f64;
    let mut positions = Vec::with_capacity((steps + 1) * d);
    let mut masses = Vec::with_capacity(steps + 1);
    let mut x = x0.to_vec();
    let mut stage = vec![0.0; d];
    let (mut k1, mut k2, mut k3, mut k4) = (vec![0.0; d], vec![0.0; d], vec![0.0; d], vec![0.0; d]);
    let mut integrated = 0.0;
    let mut g_prev = fg.sample_into(0.0, &x, &mut k1);
    positions.extend_from_slice(&x);
    masses.push(r0);
    for step in 0..steps {
        let t = times[step];
        if step > 0 {
            g_prev = fg.sample_into(t, &x, &mut k1);
        }
        for j in 0..d {
            stage[j] = x[j] + 0.5 * dt * k1[j];
        }
        domain.clamp_in_place(&mut stage);
        fg.sample_into(t + 0.5 * dt, &stage, &mut k2);
        for j in 0..d {
            stage[j] = x[j] + 0.5 * dt * k2[j];
        }
        domain.clamp_in_place(&mut stage);
        fg.sample_into(t + 0.5 * dt, &stage, &mut k3);
        for j in 0..d {
            stage[j] = x[j] + dt * k3[j];
        }
        domain.clamp_in_place(&mut stage);
        fg.sample_into(times[step + 1], &stage, &mut k4);
        for j in 0..d {
            x[j] += dt / 6.0 * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j]);
        }
        domain.clamp_in_place(&mut x);
        let g_next = fg.sample_into(times[step + 1], &x, &mut k1);
        if !(x.iter().all(|v| v.is_finite()) && g_next.is_finite() && g_prev.is_finite()) {
            return Err(CharacteristicsError::NonFiniteField(times[step + 1]));
        }
        integrated += 0.5 * dt * (g_prev + g_next);
        let h = r0 * integrated.exp();
        if !h.is_finite() {
            return Err(CharacteristicsError::NonFiniteField(times[step + 1]));
        }
        masses.push(h);
        positions.extend_from_slice(&x);
    }
    WeightedCurve::new(times, masses, positions, d)
        .map_err(|e| CharacteristicsError::InvalidGrid(e.to_string()))
}

/// First time at which the mass reaches the support threshold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum VanishingTime {
    At(f64),
    Never,
}

impl VanishingTime {
    pub fn time(self) -> Option<f64> {
        match self {
            Self::At(t) => Some(t),
            Self::Never => None,
        }
    }
}

fn first_vanishing_index(c: &WeightedCurve) -> Option<usize> {
    let thr = c.support_threshold();
    c.masses().iter().position(|&h| h <= thr)
}

/// Smallest time with `h ≤ threshold`, linearly interpolated inside the
/// bracketing step.
pub fn vanishing_time(c: &WeightedCurve) -> VanishingTime {
    let thr = c.support_threshold();
    match first_vanishing_index(c) {
        None => VanishingTime::Never,
        Some(0) => VanishingTime::At(0.0),
        Some(k) => {
            let (ha, hb) = (c.masses()[k - 1], c.masses()[k]);
            let (ta, tb) = (c.times()[k - 1], c.times()[k]);
            let s = ((ha - thr) / (ha - hb)).clamp(0.0, 1.0);
            VanishingTime::At(ta + s * (tb - ta))
        }
    }
}

/// `G(γ, h) = (γ, h·χ_{[0,τ)})`: masses zeroed from the first node with
/// `h ≤ threshold` on. Positions are kept, and the original threshold is
/// pinned so that a second application is the identity.
pub fn cutoff(c: &WeightedCurve) -> WeightedCurve {
    let thr = c.support_threshold();
    let mut masses = c.masses().to_vec();
    if let Some(k) = first_vanishing_index(c) {
        masses[k..].iter_mut().for_each(|h| *h = 0.0);
    }
    c.with_masses(masses)
        .and_then(|out| out.with_threshold(thr))
        .expect("zeroing masses keeps the curve valid")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OdeResidual {
    pub pos_residual: f64,
    pub mass_residual: f64,
}

/// Midpoint residuals `|Δγ/Δt − v(t_m,γ_m)|` and `|Δh/Δt − g(t_m,γ_m)h_m|`,
/// maximised over steps with both nodes supported.
pub fn ode_residual(c: &WeightedCurve, fg: &FieldGrid) -> OdeResidual {
    let d = c.dim();
    let mut v = vec![0.0; d];
    let mut mid = vec![0.0; d];
    let mut out = OdeResidual {
        pos_residual: 0.0,
        mass_residual: 0.0,
    };
    for k in 0..c.len() - 1 {
        if !(c.in_support(k) && c.in_support(k + 1)) {
            continue;
        }
        let (ta, tb) = (c.times()[k], c.times()[k + 1]);
        let dt = tb - ta;
        let (xa, xb) = (c.position(k), c.position(k + 1));
        for j in 0..d {
            mid[j] = 0.5 * (xa[j] + xb[j]);
        }
        let g = fg.sample_into(0.5 * (ta + tb), &mid, &mut v);
        let pos: f64 = (0..d)
            .map(|j| {
                let e = (xb[j] - xa[j]) / dt - v[j];
                e * e
            })
            .sum::<f64>()
            .sqrt();
        let (ha, hb) = (c.masses()[k], c.masses()[k + 1]);
        let mass = ((hb - ha) / dt - g * 0.5 * (ha + hb)).abs();
        out.pos_residual = out.pos_residual.max(pos);
        out.mass_residual = out.mass_residual.max(mass);
    }
    out
}

/// Largest field speed on the grid.
pub fn max_speed(fg: &FieldGrid) -> f64 {
    fg.velocity()
        .chunks(fg.dim())
        .map(|v| euclidean(v, &vec![0.0; v.len()]))
        .fold(0.0, f64::max)
}
