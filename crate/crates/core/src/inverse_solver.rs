//! Sparse dynamic inverse problems.
//!
//! Observations `K ρ = (K₁ρ_{t₁}, …, K_Nρ_{t_N})` with
//! `(K_iρ)_j = ∫ k(x, p_{ij}) dρ(x)`, the Tikhonov functional
//! `½‖Kρ − y‖² + J(ρ)`, and a generalized conditional-gradient solver whose
//! iterates are finite sums `Σ cᵢ δ_{curveᵢ}` of unit-energy curves with
//! connected support.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::characteristics::cutoff;
use crate::cone_space::{support_components, CurveError, DomainBox, WeightedCurve};
use crate::energy::{curve_energy, EnergyError, EnergyParams};
use crate::superposition::{superpose, CurveEnsemble, EnsembleAtom, SuperpositionError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum InverseError {
    #[error("invalid observation model: {0}")]
    InvalidModel(String),
    #[error("invalid solver configuration: {0}")]
    InvalidConfig(String),
    #[error("no curve with positive certificate value")]
    NoImprovingCurve,
    #[error("no candidate solutions")]
    EmptyInput,
    #[error("candidate {0} has a different initial slice")]
    InitialSliceMismatch(usize),
    #[error(transparent)]
    Curve(#[from] CurveError),
    #[error(transparent)]
    Energy(#[from] EnergyError),
    #[error(transparent)]
    Superposition(#[from] SuperpositionError),
}

/// A bounded continuous observation kernel with spatial gradient.
pub trait Kernel: Send + Sync {
    fn value(&self, x: &[f64], p: &[f64]) -> f64;
    /// Writes `∇ₓ k(x, p)` into `grad` and returns `k(x, p)`.
    fn value_and_grad(&self, x: &[f64], p: &[f64], grad: &mut [f64]) -> f64;
}

/// `k(x, p) = exp(−|x − p|² / (2σ²))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianKernel {
    pub width: f64,
}

impl Kernel for GaussianKernel {
    fn value(&self, x: &[f64], p: &[f64]) -> f64 {
        let r2: f64 = x.iter().zip(p).map(|(a, b)| (a - b) * (a - b)).sum();
        (-r2 / (2.0 * self.width * self.width)).exp()
    }

    fn value_and_grad(&self, x: &[f64], p: &[f64], grad: &mut [f64]) -> f64 {
        let k = self.value(x, p);
        let s2 = self.width * self.width;
        for ((g, a), b) in grad.iter_mut().zip(x).zip(p) {
            *g = -k * (a - b) / s2;
        }
        k
    }
}

/// Sample times, detector points per time, a kernel and the data `y`.
/// Vectors indexed by observation are flat, concatenated over times.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationModel<K = GaussianKernel> {
    times: Vec<f64>,
    offsets: Vec<usize>,
    points: Vec<f64>,
    dim: usize,
    kernel: K,
    data: Vec<f64>,
}

impl<K: Kernel> ObservationModel<K> {
    /// `data` may be empty, meaning `y = 0`.
    pub fn new(
        times: Vec<f64>,
        detectors: Vec<Vec<Vec<f64>>>,
        kernel: K,
        data: Vec<Vec<f64>>,
    ) -> Result<Self, InverseError> {
        let bad = |m: &str| Err(InverseError::InvalidModel(m.to_string()));
        if times.is_empty() {
            return bad("at least one sample time is required");
        }
        if times.len() != detectors.len() {
            return bad("one detector list per sample time is required");
        }
        if times.iter().any(|t| !(0.0..=1.0).contains(t)) || times.windows(2).any(|w| w[0] >= w[1]) {
            return bad("sample times must be strictly increasing in [0, 1]");
        }
        let dim = detectors.iter().flatten().next().map_or(0, Vec::len);
        if dim == 0 {
            return bad("detectors must be nonempty points");
        }
        let mut offsets = vec![0];
        let mut points = Vec::new();
        for list in &detectors {
            for p in list {
                if p.len() != dim || p.iter().any(|x| !x.is_finite()) {
                    return bad("detector points must be finite and share one dimension");
                }
                points.extend_from_slice(p);
            }
            offsets.push(offsets.last().unwrap() + list.len());
        }
        let len = *offsets.last().unwrap();
        let data = if data.is_empty() {
            vec![0.0; len]
        } else {
            if data.len() != times.len()
                || data.iter().zip(&detectors).any(|(y, d)| y.len() != d.len())
            {
                return bad("data must have one value per detector");
            }
            data.concat()
        };
        if data.iter().any(|y| !y.is_finite()) {
            return bad("data must be finite");
        }
        Ok(Self {
            times,
            offsets,
            points,
            dim,
            kernel,
            data,
        })
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn sample_count(&self) -> usize {
        self.times.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// `dim H = Σᵢ mᵢ`.
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn kernel(&self) -> &K {
        &self.kernel
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn range(&self, i: usize) -> std::ops::Range<usize> {
        self.offsets[i]..self.offsets[i + 1]
    }

    pub fn detector(&self, j: usize) -> &[f64] {
        &self.points[j * self.dim..(j + 1) * self.dim]
    }

    pub fn detectors_at(&self, i: usize) -> impl Iterator<Item = &[f64]> {
        self.range(i).map(move |j| self.detector(j))
    }

    /// Replaces `y` (flat, one value per detector).
    pub fn with_data(mut self, data: Vec<f64>) -> Result<Self, InverseError> {
        if data.len() != self.len() || data.iter().any(|y| !y.is_finite()) {
            return Err(InverseError::InvalidModel("data must have one finite value per detector".into()));
        }
        self.data = data;
        Ok(self)
    }

    /// Adds `h·k(x, p_{ij})` to `out[j]` for the detectors of time `i`.
    fn accumulate(&self, i: usize, h: f64, x: &[f64], out: &mut [f64]) {
        for j in self.range(i) {
            out[j] += h * self.kernel.value(x, self.detector(j));
        }
    }

    /// `K` applied to the single elementary solution `h δ_γ`.
    pub fn observe_curve(&self, c: &WeightedCurve) -> Vec<f64> {
        let mut out = vec![0.0; self.len()];
        for (i, &t) in self.times.iter().enumerate() {
            let a = c.sample(t);
            if a.mass > 0.0 {
                self.accumulate(i, a.mass, &a.position, &mut out);
            }
        }
        out
    }
}

impl ObservationModel<GaussianKernel> {
    pub fn gaussian(
        times: Vec<f64>,
        detectors: Vec<Vec<Vec<f64>>>,
        width: f64,
        data: Vec<Vec<f64>>,
    ) -> Result<Self, InverseError> {
        if !(width.is_finite() && width > 0.0) {
            return Err(InverseError::InvalidModel("kernel width must be positive".into()));
        }
        Self::new(times, detectors, GaussianKernel { width }, data)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawObservationModel {
    times: Vec<f64>,
    detectors: Vec<Vec<Vec<f64>>>,
    kernel_width: f64,
    #[serde(default)]
    data: Vec<Vec<f64>>,
}

impl Serialize for ObservationModel<GaussianKernel> {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let n = self.sample_count();
        RawObservationModel {
            times: self.times.clone(),
            detectors: (0..n).map(|i| self.detectors_at(i).map(<[f64]>::to_vec).collect()).collect(),
            kernel_width: self.kernel.width,
            data: (0..n).map(|i| self.data[self.range(i)].to_vec()).collect(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for ObservationModel<GaussianKernel> {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let r = RawObservationModel::deserialize(d)?;
        Self::gaussian(r.times, r.detectors, r.kernel_width, r.data).map_err(serde::de::Error::custom)
    }
}

/// `K σ`, linear in the coefficients.
pub fn observe<K: Kernel>(e: &CurveEnsemble, om: &ObservationModel<K>) -> Vec<f64> {
    let mut out = vec![0.0; om.len()];
    for a in e.atoms() {
        for (o, v) in out.iter_mut().zip(om.observe_curve(&a.curve)) {
            *o += a.coefficient * v;
        }
    }
    out
}

fn half_sq_dist(a: &[f64], b: &[f64]) -> f64 {
    0.5 * a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>()
}

fn norm(a: &[f64]) -> f64 {
    a.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `½‖Kσ − y‖² + Σ cᵢ J(curveᵢ)`.
pub fn tikhonov_value<K: Kernel>(
    e: &CurveEnsemble,
    om: &ObservationModel<K>,
    params: &EnergyParams,
) -> Result<f64, InverseError> {
    let mut reg = 0.0;
    for a in e.atoms() {
        reg += a.coefficient * curve_energy(&a.curve, params)?;
    }
    Ok(half_sq_dist(&observe(e, om), om.data()) + reg)
}

/// `wᵢ(x) = Σⱼ rᵢⱼ k(x, p_{ij})` for a residual `r = y − Kσ`.
#[derive(Debug, Clone)]
pub struct DualCertificate<'a, K = GaussianKernel> {
    model: &'a ObservationModel<K>,
    residual: Vec<f64>,
}

impl<'a, K: Kernel> DualCertificate<'a, K> {
    pub fn from_residual(model: &'a ObservationModel<K>, residual: Vec<f64>) -> Self {
        assert_eq!(residual.len(), model.len(), "residual length");
        Self { model, residual }
    }

    pub fn model(&self) -> &ObservationModel<K> {
        self.model
    }

    pub fn residual(&self) -> &[f64] {
        &self.residual
    }

    pub fn is_zero(&self) -> bool {
        self.residual.iter().all(|r| *r == 0.0)
    }

    pub fn value(&self, i: usize, x: &[f64]) -> f64 {
        self.model
            .range(i)
            .map(|j| self.residual[j] * self.model.kernel.value(x, self.model.detector(j)))
            .sum()
    }

    /// Writes `∇wᵢ(x)` into `grad` and returns `wᵢ(x)`.
    pub fn value_and_grad(&self, i: usize, x: &[f64], grad: &mut [f64]) -> f64 {
        grad.iter_mut().for_each(|g| *g = 0.0);
        let mut tmp = vec![0.0; x.len()];
        let mut w = 0.0;
        for j in self.model.range(i) {
            let r = self.residual[j];
            w += r * self.model.kernel.value_and_grad(x, self.model.detector(j), &mut tmp);
            for (g, t) in grad.iter_mut().zip(&tmp) {
                *g += r * t;
            }
        }
        w
    }

    /// `Σᵢ h(tᵢ) wᵢ(γ(tᵢ))`, the first-order decrease of the fidelity along
    /// the curve.
    pub fn pairing(&self, c: &WeightedCurve) -> f64 {
        self.model
            .times
            .iter()
            .enumerate()
            .map(|(i, &t)| {
                let a = c.sample(t);
                if a.mass > 0.0 {
                    a.mass * self.value(i, &a.position)
                } else {
                    0.0
                }
            })
            .sum()
    }
}

pub fn dual_certificate<'a, K: Kernel>(e: &CurveEnsemble, om: &'a ObservationModel<K>) -> DualCertificate<'a, K> {
    let k = observe(e, om);
    let residual = om.data().iter().zip(&k).map(|(y, v)| y - v).collect();
    DualCertificate::from_residual(om, residual)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InsertionConfig {
    /// Lattice points per spatial axis (cell centres of the domain).
    pub lattice_cells: usize,
    /// Number of nonzero `√h` levels `r^l`, `l = 0..z_levels`.
    pub z_levels: usize,
    pub z_ratio: f64,
    /// Largest per-axis displacement, in lattice cells, per time step.
    pub displacement_stencil: usize,
    /// Largest change of `√h` level per time step.
    pub mass_stencil: usize,
    /// Uniform time steps; observation times are added to this grid.
    pub time_steps: usize,
    pub dinkelbach_iters: usize,
    pub refine_iters: usize,
    /// Perturbed refinement restarts besides the unperturbed one.
    pub restarts: usize,
}

impl Default for InsertionConfig {
    fn default() -> Self {
        Self {
            lattice_cells: 16,
            z_levels: 8,
            z_ratio: 0.6,
            displacement_stencil: 2,
            mass_stencil: 2,
            time_steps: 10,
            dinkelbach_iters: 30,
            refine_iters: 300,
            restarts: 2,
        }
    }
}

impl InsertionConfig {
    pub fn validate(&self) -> Result<(), InverseError> {
        let bad = |m: &str| Err(InverseError::InvalidConfig(m.to_string()));
        if self.lattice_cells == 0 || self.z_levels == 0 || self.time_steps == 0 {
            return bad("lattice_cells, z_levels and time_steps must be positive");
        }
        if !(self.z_ratio > 0.0 && self.z_ratio < 1.0) {
            return bad("z_ratio must lie in (0, 1)");
        }
        if self.z_ratio.powi(2 * (self.z_levels as i32 - 1)) < 1e-9 {
            return bad("lowest mass level is too close to the support threshold");
        }
        Ok(())
    }
}

/// Union of the uniform grid `k/steps` and the observation times; returns
/// the grid and the node index of every observation time. Grid nodes within
/// `1e-9` of an observation time are snapped onto it.
pub fn solver_time_grid(obs_times: &[f64], steps: usize) -> (Vec<f64>, Vec<usize>) {
    let mut grid: Vec<f64> = WeightedCurve::uniform_times(steps)
        .into_iter()
        .filter(|t| obs_times.iter().all(|s| (s - t).abs() > 1e-9))
        .chain(obs_times.iter().copied())
        .collect();
    grid.sort_by(f64::total_cmp);
    if grid[0] != 0.0 {
        grid.insert(0, 0.0);
    }
    if *grid.last().unwrap() != 1.0 {
        grid.push(1.0);
    }
    let idx = obs_times
        .iter()
        .map(|s| grid.iter().position(|t| t == s).expect("observation time on grid"))
        .collect();
    (grid, idx)
}

/// A curve on the solver grid as per-node `√h` and positions. Nodes outside
/// the support have `z = 0`.
#[derive(Debug, Clone, PartialEq)]
struct Track {
    z: Vec<f64>,
    x: Vec<f64>,
}

struct Problem<'c, 'm, K> {
    cert: &'c DualCertificate<'m, K>,
    times: Vec<f64>,
    obs_nodes: Vec<usize>,
    domain: DomainBox,
    params: EnergyParams,
}

impl<K: Kernel> Problem<'_, '_, K> {
    fn dim(&self) -> usize {
        self.domain.dim()
    }

    /// `(J, ∂J/∂z, ∂J/∂x)`, matching `curve_energy` on the same nodes.
    fn energy_grad(&self, tr: &Track) -> (f64, Vec<f64>, Vec<f64>) {
        let d = self.dim();
        let (a, b, dl) = (self.params.alpha(), self.params.beta(), self.params.delta());
        let n = self.times.len();
        let mut gz = vec![0.0; n];
        let mut gx = vec![0.0; n * d];
        let mut j = 0.0;
        for k in 0..n - 1 {
            let (za, zb) = (tr.z[k], tr.z[k + 1]);
            if za == 0.0 && zb == 0.0 {
                continue;
            }
            let dt = self.times[k + 1] - self.times[k];
            let q = (za * za + za * zb + zb * zb) / 3.0;
            let transport = za > 0.0 && zb > 0.0;
            let dx: Vec<f64> = (0..d).map(|i| tr.x[(k + 1) * d + i] - tr.x[k * d + i]).collect();
            let v2 = if transport {
                dx.iter().map(|v| v * v).sum::<f64>() / (dt * dt)
            } else {
                0.0
            };
            let lin = 0.5 * b * v2 + a;
            let dz = zb - za;
            j += dt * q * lin + 2.0 * b * dl * dl * dz * dz / dt;
            gz[k] += dt * (2.0 * za + zb) / 3.0 * lin - 4.0 * b * dl * dl * dz / dt;
            gz[k + 1] += dt * (za + 2.0 * zb) / 3.0 * lin + 4.0 * b * dl * dl * dz / dt;
            if transport {
                for i in 0..d {
                    let g = b * q * dx[i] / dt;
                    gx[(k + 1) * d + i] += g;
                    gx[k * d + i] -= g;
                }
            }
        }
        (j, gz, gx)
    }

    /// `(P, ∂P/∂z, ∂P/∂x)` for `P = Σᵢ z(tᵢ)² wᵢ(x(tᵢ))`.
    fn pairing_grad(&self, tr: &Track) -> (f64, Vec<f64>, Vec<f64>) {
        let d = self.dim();
        let n = self.times.len();
        let mut gz = vec![0.0; n];
        let mut gx = vec![0.0; n * d];
        let mut grad = vec![0.0; d];
        let mut p = 0.0;
        for (i, &k) in self.obs_nodes.iter().enumerate() {
            let z = tr.z[k];
            if z == 0.0 {
                continue;
            }
            let w = self.cert.value_and_grad(i, &tr.x[k * d..(k + 1) * d], &mut grad);
            p += z * z * w;
            gz[k] += 2.0 * z * w;
            for c in 0..d {
                gx[k * d + c] += z * z * grad[c];
            }
        }
        (p, gz, gx)
    }

    fn pairing(&self, tr: &Track) -> f64 {
        let d = self.dim();
        self.obs_nodes
            .iter()
            .enumerate()
            .filter(|(_, &k)| tr.z[k] > 0.0)
            .map(|(i, &k)| tr.z[k] * tr.z[k] * self.cert.value(i, &tr.x[k * d..(k + 1) * d]))
            .sum()
    }

    fn energy(&self, tr: &Track) -> f64 {
        self.energy_grad(tr).0
    }

    fn to_curve(&self, tr: &Track) -> Result<WeightedCurve, InverseError> {
        let masses = tr.z.iter().map(|z| z * z).collect();
        Ok(WeightedCurve::new(self.times.clone(), masses, tr.x.clone(), self.dim())?)
    }
}

fn z_floor(tr: &Track) -> f64 {
    1e-5 * tr.z.iter().copied().fold(0.0, f64::max)
}

/// Flattens the supported nodes of several tracks into one vector of
/// `(z, z₀·x)` blocks, with `z₀` the node's initial `z`, so that position
/// and mass variables are on comparable scales.
struct Packing {
    /// `(track, node, z₀)`.
    entries: Vec<(usize, usize, f64)>,
    floors: Vec<f64>,
    dim: usize,
}

impl Packing {
    fn new(tracks: &[Track], dim: usize) -> Self {
        let mut entries = Vec::new();
        for (a, tr) in tracks.iter().enumerate() {
            for (k, &z) in tr.z.iter().enumerate() {
                if z > 0.0 {
                    entries.push((a, k, z));
                }
            }
        }
        Self {
            entries,
            floors: tracks.iter().map(z_floor).collect(),
            dim,
        }
    }

    fn pack(&self, tracks: &[Track]) -> Vec<f64> {
        let d = self.dim;
        let mut v = Vec::with_capacity(self.entries.len() * (d + 1));
        for &(a, k, s) in &self.entries {
            v.push(tracks[a].z[k]);
            v.extend(tracks[a].x[k * d..(k + 1) * d].iter().map(|x| x * s));
        }
        v
    }

    fn unpack(&self, v: &[f64], tracks: &mut [Track]) {
        let d = self.dim;
        for (e, &(a, k, s)) in self.entries.iter().enumerate() {
            let block = &v[e * (d + 1)..(e + 1) * (d + 1)];
            tracks[a].z[k] = block[0];
            for c in 0..d {
                tracks[a].x[k * d + c] = block[1 + c] / s;
            }
        }
    }

    fn pack_grad(&self, grads: &[(Vec<f64>, Vec<f64>)]) -> Vec<f64> {
        let d = self.dim;
        let mut v = Vec::with_capacity(self.entries.len() * (d + 1));
        for &(a, k, s) in &self.entries {
            v.push(grads[a].0[k]);
            v.extend(grads[a].1[k * d..(k + 1) * d].iter().map(|g| g / s));
        }
        v
    }

    fn project(&self, v: &mut [f64], domain: &DomainBox) {
        let d = self.dim;
        let mut x = vec![0.0; d];
        for (e, &(a, _, s)) in self.entries.iter().enumerate() {
            let block = &mut v[e * (d + 1)..(e + 1) * (d + 1)];
            block[0] = block[0].max(self.floors[a]);
            for c in 0..d {
                x[c] = block[1 + c] / s;
            }
            domain.clamp_in_place(&mut x);
            for c in 0..d {
                block[1 + c] = x[c] * s;
            }
        }
    }
}

const LBFGS_MEMORY: usize = 10;

/// Maximises `P/J` by projected L-BFGS on `−P/J`; the result has `J = 1`
/// and a ratio no smaller than the start.
fn refine_ratio<K: Kernel>(pb: &Problem<K>, start: Track, iters: usize) -> (Track, f64) {
    let mut start = start;
    let j0 = pb.energy(&start);
    start.z.iter_mut().for_each(|z| *z /= j0.sqrt());
    let ratio0 = pb.pairing(&start) / pb.energy(&start);
    let packing = Packing::new(std::slice::from_ref(&start), pb.dim());
    let mut work = vec![start.clone()];
    let f = |v: &[f64]| {
        packing.unpack(v, &mut work);
        let tr = &work[0];
        let (p, pz, px) = pb.pairing_grad(tr);
        let (j, jz, jx) = pb.energy_grad(tr);
        let r = p / j;
        let gz = pz.iter().zip(&jz).map(|(a, b)| -(a - r * b) / j).collect();
        let gx = px.iter().zip(&jx).map(|(a, b)| -(a - r * b) / j).collect();
        (-r, packing.pack_grad(&[(gz, gx)]))
    };
    let m = crate::optim::minimize(
        f,
        |v: &mut [f64]| packing.project(v, &pb.domain),
        packing.pack(std::slice::from_ref(&start)),
        iters,
        LBFGS_MEMORY,
    );
    let mut out = vec![start.clone()];
    packing.unpack(&m.x, &mut out);
    let mut tr = out.pop().expect("one track");
    let j = pb.energy(&tr);
    tr.z.iter_mut().for_each(|z| *z /= j.sqrt());
    let ratio = pb.pairing(&tr) / pb.energy(&tr);
    if ratio > ratio0 {
        (tr, ratio)
    } else {
        (start, ratio0)
    }
}

/// Spatial lattice of cell centres, row-major with the last axis fastest.
struct Lattice {
    cells: usize,
    dim: usize,
    points: Vec<f64>,
    offsets: Vec<Vec<isize>>,
}

impl Lattice {
    fn new(domain: &DomainBox, cells: usize, stencil: usize) -> Self {
        let d = domain.dim();
        let count = cells.pow(d as u32);
        let mut points = Vec::with_capacity(count * d);
        for node in 0..count {
            let mut idx = vec![0; d];
            let mut rest = node;
            for a in (0..d).rev() {
                idx[a] = rest % cells;
                rest /= cells;
            }
            for (a, &i) in idx.iter().enumerate() {
                points.push(domain.lower()[a] + (i as f64 + 0.5) * domain.extent(a) / cells as f64);
            }
        }
        let s = stencil as isize;
        let mut offsets = vec![vec![]];
        for _ in 0..d {
            offsets = offsets
                .into_iter()
                .flat_map(|o: Vec<isize>| {
                    (-s..=s).map(move |j| {
                        let mut o = o.clone();
                        o.push(j);
                        o
                    })
                })
                .collect();
        }
        Self {
            cells,
            dim: d,
            points,
            offsets,
        }
    }

    fn len(&self) -> usize {
        self.points.len() / self.dim
    }

    fn point(&self, node: usize) -> &[f64] {
        &self.points[node * self.dim..(node + 1) * self.dim]
    }

    fn shifted(&self, node: usize, off: &[isize]) -> Option<usize> {
        let mut rest = node;
        let mut stride = 1;
        let mut out = node as isize;
        for a in (0..self.dim).rev() {
            let i = (rest % self.cells) as isize;
            rest /= self.cells;
            let j = i + off[a];
            if j < 0 || j >= self.cells as isize {
                return None;
            }
            out += off[a] * stride as isize;
            stride *= self.cells;
        }
        Some(out as usize)
    }
}

const UNBORN: u32 = 0;
const DEAD: u32 = 1;
const ALIVE: u32 = 2;

/// Best lattice path for `P − λJ` at a fixed `λ`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatticePath {
    /// `P − λJ` of the path (0 for the empty path).
    pub value: f64,
    /// `None` when the empty path is optimal.
    pub curve: Option<WeightedCurve>,
}

struct LatticeSearch<'p, 'c, 'm, K> {
    pb: &'p Problem<'c, 'm, K>,
    lattice: Lattice,
    levels: Vec<f64>,
    mass_stencil: usize,
    /// `wᵢ` at every lattice point, per observation.
    weights: Vec<Vec<f64>>,
}

impl<'p, 'c, 'm, K: Kernel> LatticeSearch<'p, 'c, 'm, K> {
    fn new(pb: &'p Problem<'c, 'm, K>, cfg: &InsertionConfig) -> Self {
        let lattice = Lattice::new(&pb.domain, cfg.lattice_cells, cfg.displacement_stencil);
        let levels = (0..cfg.z_levels).map(|l| cfg.z_ratio.powi(l as i32)).collect();
        let weights = (0..pb.obs_nodes.len())
            .map(|i| {
                (0..lattice.len())
                    .into_par_iter()
                    .map(|n| pb.cert.value(i, lattice.point(n)))
                    .collect()
            })
            .collect();
        Self {
            pb,
            lattice,
            levels,
            mass_stencil: cfg.mass_stencil,
            weights,
        }
    }

    fn run(&self, lambda: f64) -> Result<LatticePath, InverseError> {
        let pb = self.pb;
        let (a, b, dl) = (pb.params.alpha(), pb.params.beta(), pb.params.delta());
        let nt = pb.times.len();
        let nl = self.levels.len();
        let ns = self.lattice.len() * nl;
        let obs_at: Vec<Option<usize>> = (0..nt).map(|k| pb.obs_nodes.iter().position(|&n| n == k)).collect();
        let gain = |k: usize, s: usize| -> f64 {
            match obs_at[k] {
                Some(i) => {
                    let z = self.levels[s % nl];
                    z * z * self.weights[i][s / nl]
                }
                None => 0.0,
            }
        };
        let edge = |z: f64, dt: f64| dt * z * z / 3.0 * a + 2.0 * b * dl * dl * z * z / dt;

        let unborn = 0.0;
        let mut dead = f64::NEG_INFINITY;
        let mut alive: Vec<f64> = (0..ns).map(|s| gain(0, s)).collect();
        // Per step: predecessor of each alive state, and of the dead state.
        let mut back: Vec<Vec<u32>> = Vec::with_capacity(nt - 1);
        let mut back_dead: Vec<u32> = Vec::with_capacity(nt - 1);

        for k in 0..nt - 1 {
            let dt = pb.times[k + 1] - pb.times[k];
            let (next, from): (Vec<f64>, Vec<u32>) = (0..ns)
                .into_par_iter()
                .map(|s| {
                    let node = s / nl;
                    let l = s % nl;
                    let z1 = self.levels[l];
                    let x1 = self.lattice.point(node);
                    let mut best = unborn - lambda * edge(z1, dt);
                    let mut arg = UNBORN;
                    let lo = l.saturating_sub(self.mass_stencil);
                    let hi = (l + self.mass_stencil).min(nl - 1);
                    for off in &self.lattice.offsets {
                        let Some(src) = self.lattice.shifted(node, off) else {
                            continue;
                        };
                        let x0 = self.lattice.point(src);
                        let v2: f64 = x0.iter().zip(x1).map(|(p, q)| (q - p) * (q - p)).sum::<f64>() / (dt * dt);
                        let lin = 0.5 * b * v2 + a;
                        for l0 in lo..=hi {
                            let prev = alive[src * nl + l0];
                            if prev == f64::NEG_INFINITY {
                                continue;
                            }
                            let z0 = self.levels[l0];
                            let cost = dt * (z0 * z0 + z0 * z1 + z1 * z1) / 3.0 * lin
                                + 2.0 * b * dl * dl * (z1 - z0) * (z1 - z0) / dt;
                            let v = prev - lambda * cost;
                            if v > best {
                                best = v;
                                arg = ALIVE + (src * nl + l0) as u32;
                            }
                        }
                    }
                    (best + gain(k + 1, s), arg)
                })
                .unzip();
            let mut best_dead = dead;
            let mut arg_dead = DEAD;
            for (s, &v) in alive.iter().enumerate() {
                let c = v - lambda * edge(self.levels[s % nl], dt);
                if c > best_dead {
                    best_dead = c;
                    arg_dead = ALIVE + s as u32;
                }
            }
            dead = best_dead;
            back_dead.push(arg_dead);
            back.push(from);
            alive = next;
        }

        let mut best = unborn.max(dead);
        let mut state = if dead > unborn { DEAD } else { UNBORN };
        for (s, &v) in alive.iter().enumerate() {
            if v > best {
                best = v;
                state = ALIVE + s as u32;
            }
        }
        if state == UNBORN || best <= 0.0 {
            return Ok(LatticePath {
                value: 0.0,
                curve: None,
            });
        }
        let tr = self.backtrack(state, &back, &back_dead);
        Ok(LatticePath {
            value: best,
            curve: Some(self.pb.to_curve(&tr)?),
        })
    }

    fn backtrack(&self, mut state: u32, back: &[Vec<u32>], back_dead: &[u32]) -> Track {
        let nt = self.pb.times.len();
        let d = self.lattice.dim;
        let nl = self.levels.len();
        let mut states = vec![UNBORN; nt];
        for k in (0..nt).rev() {
            states[k] = state;
            if k == 0 {
                break;
            }
            state = match state {
                UNBORN => UNBORN,
                DEAD => back_dead[k - 1],
                s => back[k - 1][(s - ALIVE) as usize],
            };
        }
        let mut z = vec![0.0; nt];
        let mut x = vec![f64::NAN; nt * d];
        for (k, &s) in states.iter().enumerate() {
            if s >= ALIVE {
                let s = (s - ALIVE) as usize;
                z[k] = self.levels[s % nl];
                x[k * d..(k + 1) * d].copy_from_slice(self.lattice.point(s / nl));
            }
        }
        fill_positions(&z, &mut x, d);
        Track { z, x }
    }
}

/// Copies the nearest supported position into unsupported nodes.
fn fill_positions(z: &[f64], x: &mut [f64], d: usize) {
    let alive: Vec<usize> = (0..z.len()).filter(|&k| z[k] > 0.0).collect();
    let (Some(&first), Some(&last)) = (alive.first(), alive.last()) else {
        return;
    };
    for k in 0..z.len() {
        if z[k] == 0.0 {
            let src = if k < first { first } else { last };
            let p = x[src * d..(src + 1) * d].to_vec();
            x[k * d..(k + 1) * d].copy_from_slice(&p);
        }
    }
}

fn track_of(c: &WeightedCurve) -> Track {
    Track {
        z: c.masses().iter().map(|h| h.sqrt()).collect(),
        x: c.positions_flat().to_vec(),
    }
}

/// Best lattice path for `P − λJ`, exposed for brute-force checks.
pub fn lattice_argmax<K: Kernel>(
    cert: &DualCertificate<K>,
    domain: &DomainBox,
    params: &EnergyParams,
    cfg: &InsertionConfig,
    lambda: f64,
) -> Result<LatticePath, InverseError> {
    cfg.validate()?;
    let pb = problem(cert, domain, params, cfg)?;
    LatticeSearch::new(&pb, cfg).run(lambda)
}

fn problem<'c, 'm, K: Kernel>(
    cert: &'c DualCertificate<'m, K>,
    domain: &DomainBox,
    params: &EnergyParams,
    cfg: &InsertionConfig,
) -> Result<Problem<'c, 'm, K>, InverseError> {
    if domain.dim() != cert.model().dim() {
        return Err(InverseError::InvalidModel("domain and detectors differ in dimension".into()));
    }
    let (times, obs_nodes) = solver_time_grid(cert.model().times(), cfg.time_steps);
    Ok(Problem {
        cert,
        times,
        obs_nodes,
        domain: domain.clone(),
        params: *params,
    })
}

/// A unit-energy curve returned by [`insertion_step`].
#[derive(Debug, Clone, PartialEq)]
pub struct Insertion {
    pub curve: WeightedCurve,
    /// Certificate pairing of the unit-energy curve, `⟨w, curve⟩ / J`.
    pub value: f64,
    /// Best ratio found on the lattice before refinement.
    pub lattice_value: f64,
    pub dinkelbach_iters: usize,
}

/// Searches unit-energy curves with connected support for the largest
/// certificate pairing: a Dinkelbach iteration over lattice dynamic programs
/// for `max P − λJ`, then projected-gradient refinement of the ratio from
/// the best lattice curve and `restarts` seeded perturbations of it.
pub fn insertion_step<K: Kernel>(
    cert: &DualCertificate<K>,
    domain: &DomainBox,
    params: &EnergyParams,
    cfg: &InsertionConfig,
    seed: u64,
) -> Result<Insertion, InverseError> {
    cfg.validate()?;
    if cert.is_zero() {
        return Err(InverseError::NoImprovingCurve);
    }
    let pb = problem(cert, domain, params, cfg)?;
    let search = LatticeSearch::new(&pb, cfg);
    let mut lambda = 0.0;
    let mut best: Option<(f64, Track)> = None;
    let mut iters = 0;
    for _ in 0..cfg.dinkelbach_iters.max(1) {
        iters += 1;
        let path = search.run(lambda)?;
        let Some(curve) = path.curve else { break };
        let tr = track_of(&curve);
        let ratio = pb.pairing(&tr) / pb.energy(&tr);
        if best.as_ref().map_or(true, |b| ratio > b.0) {
            best = Some((ratio, tr));
        }
        if ratio <= lambda * (1.0 + 1e-12) {
            break;
        }
        lambda = ratio;
    }
    let Some((lattice_value, start)) = best else {
        return Err(InverseError::NoImprovingCurve);
    };
    if lattice_value <= 0.0 {
        return Err(InverseError::NoImprovingCurve);
    }

    let cell: Vec<f64> = (0..domain.dim())
        .map(|a| domain.extent(a) / cfg.lattice_cells as f64)
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut starts = vec![start.clone()];
    for _ in 0..cfg.restarts {
        let mut tr = start.clone();
        let d = domain.dim();
        for k in 0..tr.z.len() {
            if tr.z[k] > 0.0 {
                tr.z[k] *= rng.gen_range(0.9..1.1);
            }
        }
        let shift: Vec<f64> = cell.iter().map(|h| rng.gen_range(-0.5..0.5) * h).collect();
        for k in 0..tr.z.len() {
            for a in 0..d {
                tr.x[k * d + a] += shift[a];
            }
            domain.clamp_in_place(&mut tr.x[k * d..(k + 1) * d]);
        }
        starts.push(tr);
    }
    let (mut tr, mut value) = (start.clone(), lattice_value);
    for s in starts {
        let (t, r) = refine_ratio(&pb, s, cfg.refine_iters);
        if r > value {
            tr = t;
            value = r;
        }
    }
    let j = pb.energy(&tr);
    let curve = pb.to_curve(&tr)?.scaled(1.0 / j);
    Ok(Insertion {
        curve,
        value,
        lattice_value,
        dinkelbach_iters: iters,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CoefficientConfig {
    pub max_iters: usize,
    /// Atoms with `c ≤ prune_tol` are removed.
    pub prune_tol: f64,
}

impl Default for CoefficientConfig {
    fn default() -> Self {
        Self {
            max_iters: 200_000,
            prune_tol: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientStep {
    /// One coefficient per input atom.
    pub coefficients: Vec<f64>,
    /// Indices of atoms with `c > prune_tol`.
    pub kept: Vec<usize>,
    pub objective: f64,
}

/// `min_{c ≥ 0} ½‖Σ cᵢ aᵢ − y‖² + Σ cᵢ` by projected gradient with step
/// `1/tr(AᵀA)`, warm-started from `warm` (zeros when `None`).
pub fn coefficient_step_columns(
    columns: &[Vec<f64>],
    y: &[f64],
    warm: Option<&[f64]>,
    cfg: &CoefficientConfig,
) -> CoefficientStep {
    let n = columns.len();
    let gram: Vec<f64> = (0..n * n)
        .map(|ij| {
            let (i, j) = (ij / n, ij % n);
            columns[i].iter().zip(&columns[j]).map(|(a, b)| a * b).sum()
        })
        .collect();
    let rhs: Vec<f64> = columns.iter().map(|a| a.iter().zip(y).map(|(p, q)| p * q).sum()).collect();
    let yy: f64 = y.iter().map(|v| v * v).sum();
    let objective = |c: &[f64]| -> f64 {
        let mut q = 0.0;
        for i in 0..n {
            for j in 0..n {
                q += c[i] * gram[i * n + j] * c[j];
            }
        }
        0.5 * q - c.iter().zip(&rhs).map(|(a, b)| a * b).sum::<f64>() + 0.5 * yy + c.iter().sum::<f64>()
    };
    let trace: f64 = (0..n).map(|i| gram[i * n + i]).sum();
    let mut c: Vec<f64> = match warm {
        Some(w) => w.iter().map(|v| v.max(0.0)).collect(),
        None => vec![0.0; n],
    };
    if trace > 0.0 {
        let step = 1.0 / trace;
        for _ in 0..cfg.max_iters {
            let mut change = 0.0;
            let mut scale = 0.0;
            let next: Vec<f64> = (0..n)
                .map(|i| {
                    let g = (0..n).map(|j| gram[i * n + j] * c[j]).sum::<f64>() - rhs[i] + 1.0;
                    (c[i] - step * g).max(0.0)
                })
                .collect();
            for i in 0..n {
                change += (next[i] - c[i]).abs();
                scale += next[i].abs();
            }
            c = next;
            if change <= 1e-15 * (1.0 + scale) {
                break;
            }
        }
    } else {
        c.iter_mut().for_each(|v| *v = 0.0);
    }
    let kept = (0..n).filter(|&i| c[i] > cfg.prune_tol).collect();
    let objective = objective(&c);
    CoefficientStep {
        coefficients: c,
        kept,
        objective,
    }
}

/// Coefficient step for unit-energy atoms against the model's data.
pub fn coefficient_step<K: Kernel>(
    atoms: &[WeightedCurve],
    om: &ObservationModel<K>,
    warm: Option<&[f64]>,
    cfg: &CoefficientConfig,
) -> CoefficientStep {
    let columns: Vec<Vec<f64>> = atoms.iter().map(|c| om.observe_curve(c)).collect();
    coefficient_step_columns(&columns, om.data(), warm, cfg)
}

/// Caps on the discrete regularity norms and the unit-energy tolerance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtremalityCaps {
    pub mass_derivative: f64,
    pub sqrt_mass_derivative: f64,
    pub momentum_derivative: f64,
    pub energy_tol: f64,
}

impl Default for ExtremalityCaps {
    fn default() -> Self {
        Self {
            mass_derivative: 1e6,
            sqrt_mass_derivative: 1e6,
            momentum_derivative: 1e6,
            energy_tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtremalityReport {
    /// `L²` norms of the difference quotients of `h`, `√h` and `√h γ`.
    pub mass_derivative_norm: f64,
    pub sqrt_mass_derivative_norm: f64,
    pub momentum_derivative_norm: f64,
    pub regularity: bool,
    pub components: usize,
    pub connected: bool,
    pub energy: f64,
    pub unit_energy: bool,
    pub passed: bool,
}

/// Checks that a curve is an extremal point of the unit energy ball:
/// (i) finite discrete norms of `ḣ`, `(√h)′`, `(√h γ)′` below the caps;
/// (ii) at most one support component; (iii) `|J − 1| ≤ energy_tol`.
pub fn extremality_check(c: &WeightedCurve, params: &EnergyParams, caps: &ExtremalityCaps) -> ExtremalityReport {
    let d = c.dim();
    let t = c.times();
    let h = c.masses();
    let zg = |k: usize| -> Vec<f64> {
        if c.in_support(k) {
            c.position(k).iter().map(|x| h[k].sqrt() * x).collect()
        } else {
            vec![0.0; d]
        }
    };
    let (mut a, mut b, mut m) = (0.0, 0.0, 0.0);
    for k in 0..c.len() - 1 {
        let dt = t[k + 1] - t[k];
        a += (h[k + 1] - h[k]).powi(2) / dt;
        b += (h[k + 1].sqrt() - h[k].sqrt()).powi(2) / dt;
        let (p, q) = (zg(k), zg(k + 1));
        m += p.iter().zip(&q).map(|(x, y)| (y - x) * (y - x)).sum::<f64>() / dt;
    }
    let (a, b, m) = (a.sqrt(), b.sqrt(), m.sqrt());
    let regularity = a.is_finite()
        && b.is_finite()
        && m.is_finite()
        && a <= caps.mass_derivative
        && b <= caps.sqrt_mass_derivative
        && m <= caps.momentum_derivative;
    let components = support_components(c).len();
    let connected = components <= 1;
    let energy = curve_energy(c, params).unwrap_or(f64::INFINITY);
    let unit_energy = (energy - 1.0).abs() <= caps.energy_tol;
    ExtremalityReport {
        mass_derivative_norm: a,
        sqrt_mass_derivative_norm: b,
        momentum_derivative_norm: m,
        regularity,
        components,
        connected,
        energy,
        unit_energy,
        passed: regularity && connected && unit_energy,
    }
}

/// Applies the cutoff to every curve of every candidate and returns the
/// index and cut ensemble with the smallest `‖ρ‖ = Σ cᵢ ∫ hᵢ`. Ties (within
/// `1e-12` relative) go to the smaller uncut `‖ρ‖`, then to the first.
/// Candidates must agree at `t = 0` in total mass and centroid up to `1e-9`
/// relative.
pub fn minimal_tv_select(solutions: &[CurveEnsemble]) -> Result<(usize, CurveEnsemble), InverseError> {
    let first = solutions.first().ok_or(InverseError::EmptyInput)?;
    let s0 = superpose(first, 0.0);
    for (i, e) in solutions.iter().enumerate().skip(1) {
        let s = superpose(e, 0.0);
        let scale = 1.0 + s0.total_mass().abs();
        let same_mass = (s.total_mass() - s0.total_mass()).abs() <= 1e-9 * scale;
        let same_centroid = match (s.centroid(), s0.centroid()) {
            (Some(a), Some(b)) => a.iter().zip(&b).all(|(x, y)| (x - y).abs() <= 1e-9 * (1.0 + y.abs())),
            (None, None) => true,
            _ => false,
        };
        if !(same_mass && same_centroid) {
            return Err(InverseError::InitialSliceMismatch(i));
        }
    }
    let mut best: Option<(usize, CurveEnsemble, f64, f64)> = None;
    for (i, e) in solutions.iter().enumerate() {
        let cut = CurveEnsemble::new(
            e.atoms()
                .iter()
                .map(|a| EnsembleAtom {
                    coefficient: a.coefficient,
                    curve: cutoff(&a.curve),
                })
                .collect(),
        )?;
        let mass = cut.space_time_mass();
        let uncut = e.space_time_mass();
        let better = best.as_ref().map_or(true, |b| {
            let tie = (mass - b.2).abs() <= 1e-12 * mass.abs().max(b.2.abs());
            if tie {
                uncut < b.3
            } else {
                mass < b.2
            }
        });
        if better {
            best = Some((i, cut, mass, uncut));
        }
    }
    let (i, e, _, _) = best.expect("nonempty input");
    Ok((i, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub max_iters: usize,
    /// Stop when the best certificate value is at most `1 + tol`.
    pub tol: f64,
    /// Joint gradient steps on all atoms after each coefficient step.
    pub sliding_iters: usize,
    /// Atoms whose paths stay this close wherever both carry mass are
    /// merged before sliding; 0 disables merging.
    pub merge_radius: f64,
    pub seed: u64,
    pub insertion: InsertionConfig,
    pub coefficients: CoefficientConfig,
    pub caps: ExtremalityCaps,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            max_iters: 20,
            tol: 1e-6,
            sliding_iters: 300,
            merge_radius: 0.02,
            seed: 0,
            insertion: InsertionConfig::default(),
            coefficients: CoefficientConfig::default(),
            caps: ExtremalityCaps::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    /// Best certificate value at most `1 + tol`.
    Converged,
    /// Certificate nowhere positive along any curve.
    NoImprovingCurve,
    MaxIterations,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparseSolution {
    pub ensemble: CurveEnsemble,
    /// Tikhonov value before the first and after every accepted iteration.
    pub objective_trace: Vec<f64>,
    /// Best certificate value found by each insertion step.
    pub certificate_trace: Vec<f64>,
    pub iterations: usize,
    pub stop: StopReason,
    pub residual_norm: f64,
    pub data_norm: f64,
}

/// Joint projected L-BFGS descent of `½‖Σ K uₐ − y‖² + Σ J(uₐ)` over the
/// unnormalised atoms `uₐ = cₐ·curveₐ`; returns the new `(cₐ, curveₐ)`.
fn slide<K: Kernel>(
    om: &ObservationModel<K>,
    domain: &DomainBox,
    params: &EnergyParams,
    cfg: &InsertionConfig,
    atoms: &[EnsembleAtom],
    iters: usize,
) -> Result<Vec<EnsembleAtom>, InverseError> {
    if atoms.is_empty() || iters == 0 {
        return Ok(atoms.to_vec());
    }
    let (times, obs_nodes) = solver_time_grid(om.times(), cfg.time_steps);
    let mut tracks: Vec<Track> = atoms
        .iter()
        .map(|a| {
            let mut t = track_of(&a.curve);
            let s = a.coefficient.sqrt();
            t.z.iter_mut().for_each(|z| *z *= s);
            t
        })
        .collect();
    if atoms.iter().any(|a| a.curve.times() != times.as_slice()) {
        return Ok(atoms.to_vec());
    }
    let d = domain.dim();
    let observe_tracks = |tracks: &[Track]| -> Vec<f64> {
        let mut out = vec![0.0; om.len()];
        for tr in tracks {
            for (i, &k) in obs_nodes.iter().enumerate() {
                if tr.z[k] > 0.0 {
                    om.accumulate(i, tr.z[k] * tr.z[k], &tr.x[k * d..(k + 1) * d], &mut out);
                }
            }
        }
        out
    };
    let zero_cert = DualCertificate::from_residual(om, vec![0.0; om.len()]);
    let energy_pb = Problem {
        cert: &zero_cert,
        times: times.clone(),
        obs_nodes: obs_nodes.clone(),
        domain: domain.clone(),
        params: *params,
    };
    let objective = |tracks: &[Track]| -> f64 {
        half_sq_dist(&observe_tracks(tracks), om.data()) + tracks.iter().map(|t| energy_pb.energy(t)).sum::<f64>()
    };
    let packing = Packing::new(&tracks, d);
    let mut work = tracks.clone();
    let f = |v: &[f64]| {
        packing.unpack(v, &mut work);
        let k = observe_tracks(&work);
        let residual: Vec<f64> = om.data().iter().zip(&k).map(|(y, v)| y - v).collect();
        let value = 0.5 * residual.iter().map(|r| r * r).sum::<f64>();
        let cert = DualCertificate::from_residual(om, residual);
        let pb = Problem {
            cert: &cert,
            times: times.clone(),
            obs_nodes: obs_nodes.clone(),
            domain: domain.clone(),
            params: *params,
        };
        let mut total = value;
        let grads: Vec<(Vec<f64>, Vec<f64>)> = work
            .iter()
            .map(|tr| {
                let (_, pz, px) = pb.pairing_grad(tr);
                let (j, jz, jx) = pb.energy_grad(tr);
                total += j;
                (
                    jz.iter().zip(&pz).map(|(a, b)| a - b).collect(),
                    jx.iter().zip(&px).map(|(a, b)| a - b).collect(),
                )
            })
            .collect();
        (total, packing.pack_grad(&grads))
    };
    let start = packing.pack(&tracks);
    let f0 = objective(&tracks);
    let m = crate::optim::minimize(f, |v: &mut [f64]| packing.project(v, domain), start, iters, LBFGS_MEMORY);
    if m.value < f0 {
        packing.unpack(&m.x, &mut tracks);
    }
    tracks
        .iter()
        .map(|tr| {
            let c = energy_pb.energy(tr);
            Ok(EnsembleAtom {
                coefficient: c,
                curve: energy_pb.to_curve(tr)?.scaled(1.0 / c),
            })
        })
        .collect()
}

fn close_paths(a: &WeightedCurve, b: &WeightedCurve, radius: f64) -> bool {
    let mut shared = false;
    for k in 0..a.len() {
        if a.masses()[k] > 0.0 && b.masses()[k] > 0.0 {
            shared = true;
            let d2: f64 = a.position(k).iter().zip(b.position(k)).map(|(x, y)| (x - y) * (x - y)).sum();
            if d2 > radius * radius {
                return false;
            }
        }
    }
    shared
}

/// Greedily fuses atoms with close paths into `Σ cₐhₐ` at the mass-weighted
/// mean position, renormalised to unit energy; `None` if nothing merges.
fn merge_close(
    atoms: &[EnsembleAtom],
    params: &EnergyParams,
    radius: f64,
) -> Result<Option<Vec<EnsembleAtom>>, InverseError> {
    let mut order: Vec<usize> = (0..atoms.len()).collect();
    order.sort_by(|&i, &j| atoms[j].coefficient.total_cmp(&atoms[i].coefficient));
    let mut used = vec![false; atoms.len()];
    let mut out = Vec::with_capacity(atoms.len());
    let mut merged_any = false;
    for (n, &i) in order.iter().enumerate() {
        if used[i] {
            continue;
        }
        used[i] = true;
        let group: Vec<usize> = std::iter::once(i)
            .chain(order[n + 1..].iter().copied().filter(|&j| {
                !used[j] && close_paths(&atoms[i].curve, &atoms[j].curve, radius)
            }))
            .collect();
        if group.len() == 1 {
            out.push(atoms[i].clone());
            continue;
        }
        merged_any = true;
        group.iter().for_each(|&j| used[j] = true);
        let first = &atoms[i].curve;
        let d = first.dim();
        let mut masses = vec![0.0; first.len()];
        let mut positions = first.positions_flat().to_vec();
        for k in 0..first.len() {
            let mut moment = vec![0.0; d];
            for &j in &group {
                let m = atoms[j].coefficient * atoms[j].curve.masses()[k];
                masses[k] += m;
                moment.iter_mut().zip(atoms[j].curve.position(k)).for_each(|(s, x)| *s += m * x);
            }
            if masses[k] > 0.0 {
                for a in 0..d {
                    positions[k * d + a] = moment[a] / masses[k];
                }
            }
        }
        let curve = WeightedCurve::new(first.times().to_vec(), masses, positions, d)?;
        let c = curve_energy(&curve, params)?;
        out.push(EnsembleAtom {
            coefficient: c,
            curve: curve.scaled(1.0 / c),
        });
    }
    Ok(merged_any.then_some(out))
}

/// Generalized conditional gradient for `min ½‖Kσ − y‖² + Σ cᵢ` over
/// ensembles of unit-energy curves: insert the best curve for the current
/// certificate, re-fit the coefficients, merge atoms with close paths,
/// slide all atoms jointly, re-fit, until the certificate value drops to `1 + tol`.
pub fn gcg_solve<K: Kernel>(
    om: &ObservationModel<K>,
    domain: &DomainBox,
    params: &EnergyParams,
    cfg: &SolverConfig,
) -> Result<SparseSolution, InverseError> {
    cfg.insertion.validate()?;
    let mut atoms: Vec<EnsembleAtom> = Vec::new();
    let mut objective_trace = vec![half_sq_dist(&vec![0.0; om.len()], om.data())];
    let mut certificate_trace = Vec::new();
    let mut stop = StopReason::MaxIterations;
    let mut iterations = 0;
    let refit = |atoms: Vec<EnsembleAtom>| -> (Vec<EnsembleAtom>, f64) {
        let curves: Vec<WeightedCurve> = atoms.iter().map(|a| a.curve.clone()).collect();
        let warm: Vec<f64> = atoms.iter().map(|a| a.coefficient).collect();
        let step = coefficient_step(&curves, om, Some(&warm), &cfg.coefficients);
        let kept = step
            .kept
            .iter()
            .map(|&i| EnsembleAtom {
                coefficient: step.coefficients[i],
                curve: curves[i].clone(),
            })
            .collect();
        (kept, step.objective)
    };
    for it in 0..cfg.max_iters {
        let ensemble = CurveEnsemble::new(atoms.clone())?;
        let cert = dual_certificate(&ensemble, om);
        let ins = match insertion_step(&cert, domain, params, &cfg.insertion, cfg.seed.wrapping_add(it as u64)) {
            Ok(ins) => ins,
            Err(InverseError::NoImprovingCurve) => {
                stop = StopReason::NoImprovingCurve;
                break;
            }
            Err(e) => return Err(e),
        };
        certificate_trace.push(ins.value);
        if ins.value <= 1.0 + cfg.tol {
            stop = StopReason::Converged;
            break;
        }
        iterations += 1;
        atoms.push(EnsembleAtom {
            coefficient: 0.0,
            curve: ins.curve,
        });
        let (fitted, _) = refit(atoms);
        let previous = *objective_trace.last().expect("initial objective");
        let mut accepted = None;
        if cfg.merge_radius > 0.0 {
            if let Some(merged) = merge_close(&fitted, params, cfg.merge_radius)? {
                let slid = slide(om, domain, params, &cfg.insertion, &merged, cfg.sliding_iters)?;
                let (refitted, objective) = refit(slid);
                if objective <= previous {
                    accepted = Some((refitted, objective));
                }
            }
        }
        let (fitted, objective) = match accepted {
            Some(x) => x,
            None => {
                let slid = slide(om, domain, params, &cfg.insertion, &fitted, cfg.sliding_iters)?;
                refit(slid)
            }
        };
        atoms = fitted;
        objective_trace.push(objective);
    }
    let ensemble = CurveEnsemble::new(atoms)?;
    let k = observe(&ensemble, om);
    let residual: Vec<f64> = om.data().iter().zip(&k).map(|(y, v)| y - v).collect();
    Ok(SparseSolution {
        ensemble,
        objective_trace,
        certificate_trace,
        iterations,
        stop,
        residual_norm: norm(&residual),
        data_norm: norm(om.data()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(a: f64, b: f64, d: f64) -> EnergyParams {
        EnergyParams::new(a, b, d).unwrap()
    }

    fn grid_detectors(n: usize) -> Vec<Vec<f64>> {
        (0..n * n)
            .map(|k| vec![(k / n) as f64 / (n - 1) as f64, (k % n) as f64 / (n - 1) as f64])
            .collect()
    }

    fn model(times: &[f64], data: Vec<Vec<f64>>) -> ObservationModel {
        ObservationModel::gaussian(
            times.to_vec(),
            vec![grid_detectors(3); times.len()],
            0.2,
            data,
        )
        .unwrap()
    }

    #[test]
    fn coincident_atoms_merge_and_distant_ones_do_not() {
        let p = params(1.0, 0.5, 1.0);
        let unit = |x0: f64| {
            let c = WeightedCurve::from_fn(10, 2, |_| 1.0, move |t| vec![x0 + 0.2 * t, 0.5]).unwrap();
            let j = curve_energy(&c, &p).unwrap();
            c.scaled(1.0 / j)
        };
        let atoms = vec![
            EnsembleAtom { coefficient: 1.0, curve: unit(0.2) },
            EnsembleAtom { coefficient: 2.0, curve: unit(0.2) },
            EnsembleAtom { coefficient: 0.5, curve: unit(0.6) },
        ];
        let merged = merge_close(&atoms, &p, 0.01).unwrap().unwrap();
        assert_eq!(merged.len(), 2);
        assert!((merged[0].coefficient - 3.0).abs() < 1e-12);
        assert!((curve_energy(&merged[0].curve, &p).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(merged[1], atoms[2]);
        assert!(merge_close(&atoms[1..], &p, 0.01).unwrap().is_none());
    }

    #[test]
    fn observation_of_empty_and_centred_atoms() {
        let om = model(&[0.25, 0.75], vec![]);
        assert!(observe(&CurveEnsemble::empty(), &om).iter().all(|v| *v == 0.0));
        let c = WeightedCurve::from_fn(8, 2, |t| 1.0 + t, |_| vec![0.5, 0.5]).unwrap();
        let obs = observe(&CurveEnsemble::single(1.0, c).unwrap(), &om);
        // Detector 4 of each time sits at the centre, k₀ = 1.
        assert!((obs[4] - 1.25).abs() < 1e-14);
        assert!((obs[9 + 4] - 1.75).abs() < 1e-14);
    }

    #[test]
    fn tikhonov_value_of_empty_ensemble() {
        let om = model(&[0.5], vec![vec![1.0, 2.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 2.0]]);
        let v = tikhonov_value(&CurveEnsemble::empty(), &om, &params(1.0, 1.0, 1.0)).unwrap();
        assert_eq!(v, 4.5);
    }

    #[test]
    fn certificate_of_single_detector() {
        let om = ObservationModel::gaussian(vec![0.5], vec![vec![vec![0.2, 0.3]]], 0.1, vec![vec![1.0]]).unwrap();
        let w = dual_certificate(&CurveEnsemble::empty(), &om);
        let x = [0.27, 0.21];
        assert!((w.value(0, &x) - om.kernel().value(&x, &[0.2, 0.3])).abs() < 1e-15);
    }

    #[test]
    fn certificate_gradient_matches_finite_differences() {
        let om = model(&[0.3, 0.6], vec![vec![0.3, -1.0, 2.0, 0.5, 0.1, 0.0, 1.0, 1.0, -0.4]; 2]);
        let w = dual_certificate(&CurveEnsemble::empty(), &om);
        let x = [0.37, 0.61];
        let mut g = [0.0; 2];
        w.value_and_grad(1, &x, &mut g);
        for a in 0..2 {
            let (mut p, mut m) = (x, x);
            p[a] += 1e-6;
            m[a] -= 1e-6;
            let fd = (w.value(1, &p) - w.value(1, &m)) / 2e-6;
            assert!((fd - g[a]).abs() < 1e-7);
        }
    }

    #[test]
    fn zero_certificate_has_no_improving_curve() {
        let om = model(&[0.5], vec![]);
        let w = dual_certificate(&CurveEnsemble::empty(), &om);
        let r = insertion_step(&w, &DomainBox::unit(2), &params(1.0, 1.0, 1.0), &InsertionConfig::default(), 0);
        assert_eq!(r, Err(InverseError::NoImprovingCurve));
    }

    #[test]
    fn time_grid_contains_observation_times() {
        let (g, idx) = solver_time_grid(&[0.25, 0.3, 1.0], 4);
        assert_eq!(g, vec![0.0, 0.25, 0.3, 0.5, 0.75, 1.0]);
        assert_eq!(idx, vec![1, 2, 5]);
    }

    #[test]
    fn lattice_path_energy_matches_curve_energy() {
        let om = model(&[0.3, 0.7], vec![vec![0.0, 0.0, 0.0, 0.0, 5.0, 1.0, 0.0, 0.0, 0.0]; 2]);
        let w = dual_certificate(&CurveEnsemble::empty(), &om);
        let p = params(1.0, 0.5, 0.7);
        let cfg = InsertionConfig { lattice_cells: 5, time_steps: 5, ..Default::default() };
        let lambda = 0.8;
        let path = lattice_argmax(&w, &DomainBox::unit(2), &p, &cfg, lambda).unwrap();
        let c = path.curve.unwrap();
        let direct = w.pairing(&c) - lambda * curve_energy(&c, &p).unwrap();
        assert!((direct - path.value).abs() < 1e-12, "{direct} vs {}", path.value);
    }

    #[test]
    fn energy_gradient_matches_finite_differences() {
        let om = model(&[0.4], vec![vec![1.0; 9]]);
        let w = dual_certificate(&CurveEnsemble::empty(), &om);
        let p = params(1.3, 0.7, 0.9);
        let cfg = InsertionConfig { time_steps: 5, ..Default::default() };
        let pb = problem(&w, &DomainBox::unit(2), &p, &cfg).unwrap();
        let n = pb.times.len();
        let tr = Track {
            z: (0..n).map(|k| if k == 0 { 0.0 } else { 0.5 + 0.1 * k as f64 }).collect(),
            x: (0..2 * n).map(|i| 0.1 + 0.05 * i as f64 % 0.7).collect(),
        };
        let c = pb.to_curve(&tr).unwrap();
        let (j, gz, gx) = pb.energy_grad(&tr);
        assert!((j - curve_energy(&c, &p).unwrap()).abs() < 1e-12);
        let eps = 1e-6;
        for k in 1..n {
            let mut a = tr.clone();
            let mut b = tr.clone();
            a.z[k] += eps;
            b.z[k] -= eps;
            let fd = (pb.energy(&a) - pb.energy(&b)) / (2.0 * eps);
            assert!((fd - gz[k]).abs() < 1e-6);
            let mut a = tr.clone();
            let mut b = tr.clone();
            a.x[2 * k] += eps;
            b.x[2 * k] -= eps;
            let fd = (pb.energy(&a) - pb.energy(&b)) / (2.0 * eps);
            assert!((fd - gx[2 * k]).abs() < 1e-6);
        }
    }

    #[test]
    fn single_atom_coefficient_closed_form() {
        let a = vec![1.0, 2.0, 0.5];
        let y = vec![3.0, 4.0, 1.0];
        let step = coefficient_step_columns(&[a.clone()], &y, None, &CoefficientConfig::default());
        let ay: f64 = a.iter().zip(&y).map(|(p, q)| p * q).sum();
        let aa: f64 = a.iter().map(|p| p * p).sum();
        let exact = ((ay - 1.0) / aa).max(0.0);
        assert!((step.coefficients[0] - exact).abs() < 1e-12);

        let zero = coefficient_step_columns(&[a.clone()], &[0.0; 3], None, &CoefficientConfig::default());
        assert_eq!(zero.coefficients, vec![0.0]);
        assert!(zero.kept.is_empty());

        let dup = coefficient_step_columns(&[a.clone(), a], &y, None, &CoefficientConfig::default());
        assert!((dup.coefficients.iter().sum::<f64>() - exact).abs() < 1e-10);
    }

    #[test]
    fn extremality_items() {
        let p = params(1.0, 1.0, 1.0);
        let caps = ExtremalityCaps::default();
        let smooth = WeightedCurve::from_fn(40, 2, |t| 1.0 + 0.5 * (3.0 * t).sin(), |t| vec![t, t * t]).unwrap();
        let unit = crate::energy::normalize_to_unit_energy(&smooth, &p).unwrap();
        assert!(extremality_check(&unit, &p, &caps).passed);

        let gap = WeightedCurve::from_nested(
            vec![0.0, 0.5, 1.0],
            vec![1.0, 0.0, 1.0],
            vec![vec![0.0, 0.0]; 3],
        )
        .unwrap();
        let gap = crate::energy::normalize_to_unit_energy(&gap, &p).unwrap();
        let r = extremality_check(&gap, &p, &caps);
        assert!(!r.connected && r.unit_energy);

        let r = extremality_check(&unit.scaled(2.0), &p, &caps);
        assert!(!r.unit_energy && (r.energy - 2.0).abs() < 1e-12);
    }

    #[test]
    fn minimal_tv_prefers_cutoff_twin() {
        let revive = WeightedCurve::from_nested(
            vec![0.0, 0.25, 0.5, 0.75, 1.0],
            vec![1.0, 0.5, 0.0, 0.5, 1.0],
            vec![vec![0.3]; 5],
        )
        .unwrap();
        let a = CurveEnsemble::single(1.0, revive.clone()).unwrap();
        let b = CurveEnsemble::single(1.0, cutoff(&revive)).unwrap();
        let (i, e) = minimal_tv_select(&[a.clone(), b]).unwrap();
        assert_eq!(i, 1);
        assert!(e.space_time_mass() < a.space_time_mass());
        assert_eq!(minimal_tv_select(&[]), Err(InverseError::EmptyInput));
    }

    #[test]
    fn zero_data_gives_zero_solution() {
        let om = model(&[0.3, 0.6], vec![]);
        let s = gcg_solve(&om, &DomainBox::unit(2), &params(1.0, 1.0, 1.0), &SolverConfig::default()).unwrap();
        assert!(s.ensemble.is_empty());
        assert_eq!(s.iterations, 0);
        assert_eq!(s.stop, StopReason::NoImprovingCurve);
    }
}
