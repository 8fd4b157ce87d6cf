//! The Wasserstein–Fisher–Rao integrand, its discrete quadrature on
//! `(ρ, v, g)` samples, and the coercive curve energy
//!
//! ```text
//! J(γ, h) = ∫_{h>0} (β/2)|γ̇|² h + (βδ²/2) ḣ²/h + α h dt
//! ```
//!
//! evaluated in the variable `z = √h`, where `ḣ²/h = 4ż²`.
//!
//! A curve is read as the piecewise-linear interpolant of `(z, γ)` on its
//! grid, and every integral below is the exact integral of that interpolant.
//! This makes the discrete energy exactly one-homogeneous in the mass and
//! exactly additive over any partition of `[0,1]`.

use std::cmp::Ordering;
use std::ops::Add;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cone_space::{validate_curve, ContinuityBound, WeightedCurve};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnergyError {
    #[error("energy parameter `{name}` must be positive and finite, got {value}")]
    InvalidParameter { name: &'static str, value: f64 },
    #[error("curve failed validation: {0}")]
    InvalidCurve(String),
    #[error("invalid interval [{0}, {1}]")]
    InvalidInterval(f64, f64),
    #[error("curve has zero energy")]
    ZeroEnergy,
    #[error("momentum or source is nonzero where the density vanishes (cell {0})")]
    NonAbsolutelyContinuous(usize),
    #[error("triple arrays have inconsistent lengths")]
    ShapeMismatch,
}

/// `[0, ∞]`-valued result.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ExtendedReal {
    Finite(f64),
    Infinite,
}

impl ExtendedReal {
    pub fn is_finite(self) -> bool {
        matches!(self, Self::Finite(_))
    }

    pub fn finite(self) -> Option<f64> {
        match self {
            Self::Finite(v) => Some(v),
            Self::Infinite => None,
        }
    }

    pub fn scale(self, factor: f64) -> Self {
        match self {
            Self::Finite(v) => Self::Finite(v * factor),
            Self::Infinite if factor == 0.0 => Self::Finite(0.0),
            Self::Infinite => Self::Infinite,
        }
    }
}

impl Add for ExtendedReal {
    type Output = Self;
    fn add(self, rhs: Self) -> Self {
        match (self, rhs) {
            (Self::Finite(a), Self::Finite(b)) => Self::Finite(a + b),
            _ => Self::Infinite,
        }
    }
}

impl PartialOrd for ExtendedReal {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        match (self, other) {
            (Self::Finite(a), Self::Finite(b)) => a.partial_cmp(b),
            (Self::Finite(_), Self::Infinite) => Some(Ordering::Less),
            (Self::Infinite, Self::Finite(_)) => Some(Ordering::Greater),
            (Self::Infinite, Self::Infinite) => Some(Ordering::Equal),
        }
    }
}

/// `α` (mass penalty), `β` (kinetic weight), `δ` (growth/transport trade-off).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawParams", into = "RawParams")]
pub struct EnergyParams {
    alpha: f64,
    beta: f64,
    delta: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawParams {
    alpha: f64,
    beta: f64,
    delta: f64,
}

impl TryFrom<RawParams> for EnergyParams {
    type Error = EnergyError;
    fn try_from(r: RawParams) -> Result<Self, Self::Error> {
        EnergyParams::new(r.alpha, r.beta, r.delta)
    }
}

impl From<EnergyParams> for RawParams {
    fn from(p: EnergyParams) -> Self {
        RawParams {
            alpha: p.alpha,
            beta: p.beta,
            delta: p.delta,
        }
    }
}

impl EnergyParams {
    pub fn new(alpha: f64, beta: f64, delta: f64) -> Result<Self, EnergyError> {
        for (name, value) in [("alpha", alpha), ("beta", beta), ("delta", delta)] {
            if !(value.is_finite() && value > 0.0) {
                return Err(EnergyError::InvalidParameter { name, value });
            }
        }
        Ok(Self { alpha, beta, delta })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    /// `C = min{2α, β·min{1, δ²}}` of the coercivity estimate.
    pub fn coercivity_constant(&self) -> f64 {
        (2.0 * self.alpha).min(self.beta * 1f64.min(self.delta * self.delta))
    }
}

/// `Ψ_δ(t, x, y)`: `(|x|²+δ²y²)/(2t)` for `t > 0`, `0` at the origin,
/// `+∞` otherwise.
pub fn psi_delta(t: f64, x: &[f64], y: f64, delta: f64) -> ExtendedReal {
    let x2: f64 = x.iter().map(|v| v * v).sum();
    if t > 0.0 {
        ExtendedReal::Finite((x2 + delta * delta * y * y) / (2.0 * t))
    } else if t == 0.0 && x2 == 0.0 && y == 0.0 {
        ExtendedReal::Finite(0.0)
    } else {
        ExtendedReal::Infinite
    }
}

/// Samples of `(ρ, v, g)` representing `m = vρ`, `μ = gρ`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteTriple {
    pub density: Vec<f64>,
    /// Row-major `len × dim`.
    pub velocity: Vec<f64>,
    pub growth: Vec<f64>,
    pub dim: usize,
}

/// Samples of raw `(ρ, m, μ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct RawTriple {
    pub density: Vec<f64>,
    pub momentum: Vec<f64>,
    pub source: Vec<f64>,
    pub dim: usize,
}

impl DiscreteTriple {
    pub fn len(&self) -> usize {
        self.density.len()
    }

    pub fn is_empty(&self) -> bool {
        self.density.is_empty()
    }

    fn check(&self) -> Result<(), EnergyError> {
        let n = self.density.len();
        if self.growth.len() != n || self.velocity.len() != n * self.dim {
            return Err(EnergyError::ShapeMismatch);
        }
        Ok(())
    }

    pub fn to_raw(&self) -> RawTriple {
        let d = self.dim;
        RawTriple {
            density: self.density.clone(),
            momentum: self
                .velocity
                .iter()
                .enumerate()
                .map(|(i, v)| v * self.density[i / d])
                .collect(),
            source: self
                .growth
                .iter()
                .zip(&self.density)
                .map(|(g, r)| g * r)
                .collect(),
            dim: d,
        }
    }
}

impl RawTriple {
    /// Recovers `(v, g)`; fails if `m` or `μ` charge a cell with `ρ = 0`.
    pub fn to_velocity_form(&self) -> Result<DiscreteTriple, EnergyError> {
        let d = self.dim;
        let n = self.density.len();
        if self.source.len() != n || self.momentum.len() != n * d {
            return Err(EnergyError::ShapeMismatch);
        }
        let mut velocity = vec![0.0; n * d];
        let mut growth = vec![0.0; n];
        for i in 0..n {
            let rho = self.density[i];
            let m = &self.momentum[i * d..(i + 1) * d];
            if rho > 0.0 {
                for (v, mj) in velocity[i * d..(i + 1) * d].iter_mut().zip(m) {
                    *v = mj / rho;
                }
                growth[i] = self.source[i] / rho;
            } else if m.iter().any(|x| *x != 0.0) || self.source[i] != 0.0 {
                return Err(EnergyError::NonAbsolutelyContinuous(i));
            }
        }
        Ok(DiscreteTriple {
            density: self.density.clone(),
            velocity,
            growth,
            dim: d,
        })
    }
}

/// `½ Σ (|v|² + δ² g²) ρ w`. Always finite for a well-formed triple.
pub fn b_delta(triple: &DiscreteTriple, weights: &[f64], delta: f64) -> Result<f64, EnergyError> {
    triple.check()?;
    if weights.len() != triple.len() {
        return Err(EnergyError::ShapeMismatch);
    }
    let d = triple.dim;
    Ok(0.5
        * (0..triple.len())
            .map(|i| {
                let v2: f64 = triple.velocity[i * d..(i + 1) * d]
                    .iter()
                    .map(|x| x * x)
                    .sum();
                let g = triple.growth[i];
                (v2 + delta * delta * g * g) * triple.density[i] * weights[i]
            })
            .sum::<f64>())
}

/// `Σ Ψ_δ(ρ, m, μ) w` on raw samples; `+∞` if some cell is not absolutely
/// continuous.
pub fn b_delta_raw(triple: &RawTriple, weights: &[f64], delta: f64) -> Result<ExtendedReal, EnergyError> {
    let d = triple.dim;
    let n = triple.density.len();
    if triple.source.len() != n || triple.momentum.len() != n * d || weights.len() != n {
        return Err(EnergyError::ShapeMismatch);
    }
    let mut total = ExtendedReal::Finite(0.0);
    for i in 0..n {
        let cell = psi_delta(
            triple.density[i],
            &triple.momentum[i * d..(i + 1) * d],
            triple.source[i],
            delta,
        );
        total = total + cell.scale(weights[i]);
    }
    Ok(total)
}

/// One grid step with positive mass somewhere, on which `z` is linear.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Piece {
    pub start: f64,
    pub len: f64,
    pub z0: f64,
    pub z1: f64,
    /// `z₀²`, `z₀z₁` and `z₁²`, taken from the masses where possible so
    /// that constant masses integrate without rounding.
    pub squares: [f64; 3],
    /// `ż` on the whole step.
    pub slope: f64,
    /// Grid step index; velocity is read from it unless `transport` is false.
    pub step: usize,
    /// False unless both endpoints are above the support threshold; the
    /// position is undefined elsewhere.
    pub transport: bool,
}

impl Piece {
    /// `∫ z²` over the piece.
    pub fn z2_integral(&self) -> f64 {
        let [a, b, c] = self.squares;
        self.len * ((a + b + c) / 3.0)
    }

    /// `∫ ż²` over the piece.
    pub fn dz2_integral(&self) -> f64 {
        self.slope * self.slope * self.len
    }

    fn restricted(&self, a: f64, b: f64) -> Option<Piece> {
        let lo = self.start.max(a);
        let hi = (self.start + self.len).min(b);
        if hi <= lo {
            return None;
        }
        let z_at = |t: f64| self.z0 + self.slope * (t - self.start);
        let z0 = if lo == self.start { self.z0 } else { z_at(lo).max(0.0) };
        let z1 = if hi == self.start + self.len { self.z1 } else { z_at(hi).max(0.0) };
        let squares = [
            if z0 == self.z0 { self.squares[0] } else { z0 * z0 },
            z0 * z1,
            if z1 == self.z1 { self.squares[2] } else { z1 * z1 },
        ];
        Some(Piece {
            start: lo,
            len: hi - lo,
            z0,
            z1,
            squares,
            ..*self
        })
    }
}

/// Every grid step not identically zero. The mass terms cover all of
/// `{h > 0}`; the transport term needs both endpoints in the support.
pub(crate) fn pieces(c: &WeightedCurve) -> Vec<Piece> {
    let thr = c.support_threshold();
    let t = c.times();
    let h = c.masses();
    let mut out = Vec::with_capacity(c.len());
    for k in 0..c.len() - 1 {
        if h[k] == 0.0 && h[k + 1] == 0.0 {
            continue;
        }
        let dt = t[k + 1] - t[k];
        let (za, zb) = (h[k].sqrt(), h[k + 1].sqrt());
        out.push(Piece {
            start: t[k],
            len: dt,
            z0: za,
            z1: zb,
            squares: [h[k], (h[k] * h[k + 1]).sqrt(), h[k + 1]],
            slope: (zb - za) / dt,
            step: k,
            transport: h[k] > thr && h[k + 1] > thr,
        });
    }
    out
}

fn step_velocity_sq(c: &WeightedCurve, p: &Piece) -> f64 {
    if !p.transport {
        return 0.0;
    }
    let k = p.step;
    let dt = c.times()[k + 1] - c.times()[k];
    c.position(k)
        .iter()
        .zip(c.position(k + 1))
        .map(|(a, b)| {
            let v = (b - a) / dt;
            v * v
        })
        .sum()
}

fn piece_energy(c: &WeightedCurve, p: &Piece, params: &EnergyParams) -> f64 {
    let (a, b, d) = (params.alpha, params.beta, params.delta);
    let z2 = p.z2_integral();
    0.5 * b * step_velocity_sq(c, p) * z2 + 2.0 * b * d * d * p.dz2_integral() + a * z2
}

fn ensure_valid(c: &WeightedCurve) -> Result<(), EnergyError> {
    let report = validate_curve(c, ContinuityBound::Unbounded);
    if report.passed {
        Ok(())
    } else {
        Err(EnergyError::InvalidCurve(format!(
            "{} continuity violations",
            report.violations.len()
        )))
    }
}

/// `J_{α,β,δ}` of a curve.
pub fn curve_energy(c: &WeightedCurve, params: &EnergyParams) -> Result<f64, EnergyError> {
    ensure_valid(c)?;
    Ok(compensated_sum(pieces(c).iter().map(|p| piece_energy(c, p, params))))
}

/// Neumaier-compensated sum.
fn compensated_sum(terms: impl Iterator<Item = f64>) -> f64 {
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for x in terms {
        let t = sum + x;
        comp += if sum.abs() >= x.abs() { (sum - t) + x } else { (x - t) + sum };
        sum = t;
    }
    sum + comp
}

/// The same integrand restricted to `[a, b] ∩ {h > 0}`.
pub fn curve_energy_localized(
    c: &WeightedCurve,
    params: &EnergyParams,
    a: f64,
    b: f64,
) -> Result<f64, EnergyError> {
    if !(0.0 <= a && a < b && b <= 1.0) {
        return Err(EnergyError::InvalidInterval(a, b));
    }
    ensure_valid(c)?;
    Ok(compensated_sum(
        pieces(c)
            .iter()
            .filter_map(|p| p.restricted(a, b))
            .map(|p| piece_energy(c, &p, params)),
    ))
}

/// Masses divided by the curve energy, so that the result has `J = 1`.
pub fn normalize_to_unit_energy(
    c: &WeightedCurve,
    params: &EnergyParams,
) -> Result<WeightedCurve, EnergyError> {
    let j = curve_energy(c, params)?;
    if !(j > 0.0) {
        return Err(EnergyError::ZeroEnergy);
    }
    Ok(c.scaled(1.0 / j))
}

/// `∫_{h>0} h dt` on the interpolant (the mass norm `‖ρ‖`).
pub fn mass_integral(c: &WeightedCurve) -> f64 {
    pieces(c).iter().map(Piece::z2_integral).sum()
}

/// `∫_{[a,b]∩{h>0}} h dt`.
pub fn mass_integral_between(c: &WeightedCurve, a: f64, b: f64) -> f64 {
    pieces(c)
        .iter()
        .filter_map(|p| p.restricted(a, b))
        .map(|p| p.z2_integral())
        .sum()
}

/// `∫_{h>0} ḣ²/h dt = 4∫ ż² dt`.
pub fn fisher_information(c: &WeightedCurve) -> f64 {
    4.0 * pieces(c).iter().map(Piece::dz2_integral).sum::<f64>()
}

/// `‖m‖ = ∫ h|γ̇| dt`.
pub fn momentum_norm(c: &WeightedCurve) -> f64 {
    pieces(c)
        .iter()
        .map(|p| step_velocity_sq(c, p).sqrt() * p.z2_integral())
        .sum()
}

/// `‖μ‖ = ∫ |ḣ| dt`: total variation of the mass along the supported pieces.
pub fn source_norm(c: &WeightedCurve) -> f64 {
    pieces(c)
        .iter()
        .map(|p| (p.squares[2] - p.squares[0]).abs())
        .sum()
}

/// The `(ρ, v, g)` samples induced by a curve, `ρ = h dt⊗δ_γ`, `v = γ̇`,
/// `g = ḣ/h`, at two Gauss–Legendre points per supported piece, together
/// with their quadrature weights. Two points integrate the quadratic
/// `z²` exactly, so `β·B_δ + α‖ρ‖` of the result reproduces [`curve_energy`].
pub fn induced_triple(c: &WeightedCurve) -> (DiscreteTriple, Vec<f64>) {
    let d = c.dim();
    let node = 0.5 / 3f64.sqrt();
    let mut density = Vec::new();
    let mut velocity = Vec::new();
    let mut growth = Vec::new();
    let mut weights = Vec::new();
    for p in pieces(c) {
        let v: Vec<f64> = if p.transport {
            let k = p.step;
            let dt = c.times()[k + 1] - c.times()[k];
            c.position(k)
                .iter()
                .zip(c.position(k + 1))
                .map(|(a, b)| (b - a) / dt)
                .collect()
        } else {
            vec![0.0; d]
        };
        for s in [0.5 - node, 0.5 + node] {
            let z = p.z0 + (p.z1 - p.z0) * s;
            density.push(z * z);
            velocity.extend_from_slice(&v);
            growth.push(if z > 0.0 { 2.0 * p.slope / z } else { 0.0 });
            weights.push(0.5 * p.len);
        }
    }
    (
        DiscreteTriple {
            density,
            velocity,
            growth,
            dim: d,
        },
        weights,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoercivityReport {
    pub mass_norm: f64,
    pub momentum_norm: f64,
    pub source_norm: f64,
    pub energy: f64,
    pub constant: f64,
    /// `max{α‖ρ‖, C‖m‖, C‖μ‖}`.
    pub lower_bound: f64,
    pub holds: bool,
}

impl CoercivityReport {
    fn new(params: &EnergyParams, mass: f64, momentum: f64, source: f64, energy: f64) -> Self {
        let c = params.coercivity_constant();
        let lower_bound = (params.alpha * mass).max(c * momentum).max(c * source);
        Self {
            mass_norm: mass,
            momentum_norm: momentum,
            source_norm: source,
            energy,
            constant: c,
            lower_bound,
            holds: lower_bound <= energy * (1.0 + 1e-12),
        }
    }
}

/// Checks `max{α‖ρ‖, C‖m‖, C‖μ‖} ≤ J` on a curve.
pub fn coercivity_bounds(c: &WeightedCurve, params: &EnergyParams) -> Result<CoercivityReport, EnergyError> {
    let energy = curve_energy(c, params)?;
    Ok(CoercivityReport::new(
        params,
        mass_integral(c),
        momentum_norm(c),
        source_norm(c),
        energy,
    ))
}

/// Same check on `(ρ, v, g)` samples, with `J = β·B_δ + α‖ρ‖`.
pub fn coercivity_bounds_triple(
    triple: &DiscreteTriple,
    weights: &[f64],
    params: &EnergyParams,
) -> Result<CoercivityReport, EnergyError> {
    let b = b_delta(triple, weights, params.delta)?;
    let d = triple.dim;
    let mut mass = 0.0;
    let mut momentum = 0.0;
    let mut source = 0.0;
    for i in 0..triple.len() {
        let w = weights[i] * triple.density[i];
        let speed: f64 = triple.velocity[i * d..(i + 1) * d]
            .iter()
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt();
        mass += w;
        momentum += speed * w;
        source += triple.growth[i].abs() * w;
    }
    let energy = params.beta * b + params.alpha * mass;
    Ok(CoercivityReport::new(params, mass, momentum, source, energy))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(a: f64, b: f64, d: f64) -> EnergyParams {
        EnergyParams::new(a, b, d).unwrap()
    }

    #[test]
    fn psi_delta_branches() {
        assert_eq!(psi_delta(1.0, &[3.0, 4.0], 2.0, 0.5), ExtendedReal::Finite((25.0 + 1.0) / 2.0));
        assert_eq!(psi_delta(0.0, &[0.0, 0.0], 0.0, 2.0), ExtendedReal::Finite(0.0));
        assert_eq!(psi_delta(0.0, &[1.0, 0.0], 0.0, 2.0), ExtendedReal::Infinite);
        assert_eq!(psi_delta(-1.0, &[0.0], 0.0, 2.0), ExtendedReal::Infinite);
    }

    #[test]
    fn psi_delta_is_one_homogeneous() {
        let base = psi_delta(0.7, &[0.3, -1.2], 0.4, 1.3).finite().unwrap();
        let lam = 3.25;
        let scaled = psi_delta(0.7 * lam, &[0.3 * lam, -1.2 * lam], 0.4 * lam, 1.3)
            .finite()
            .unwrap();
        assert!((scaled - lam * base).abs() <= 1e-14 * scaled);
    }

    #[test]
    fn b_delta_examples() {
        let n = 10;
        let w = vec![1.0 / n as f64; n];
        let still = DiscreteTriple {
            density: vec![3.0; n],
            velocity: vec![0.0; 2 * n],
            growth: vec![0.0; n],
            dim: 2,
        };
        assert_eq!(b_delta(&still, &w, 0.7).unwrap(), 0.0);

        // unit total mass moving with v = e₁
        let moving = DiscreteTriple {
            density: vec![1.0; n],
            velocity: (0..n).flat_map(|_| [1.0, 0.0]).collect(),
            growth: vec![0.0; n],
            dim: 2,
        };
        let oracle: f64 = (0..n).map(|i| 0.5 * 1.0 * moving.density[i] * w[i]).sum();
        let b = b_delta(&moving, &w, 5.0).unwrap();
        assert!((b - 0.5).abs() < 1e-15 && (b - oracle).abs() < 1e-15);
    }

    #[test]
    fn raw_momentum_without_density_is_infinite() {
        let raw = RawTriple {
            density: vec![1.0, 0.0],
            momentum: vec![0.5, 0.2],
            source: vec![0.0, 0.0],
            dim: 1,
        };
        assert_eq!(b_delta_raw(&raw, &[1.0, 1.0], 1.0).unwrap(), ExtendedReal::Infinite);
        assert_eq!(
            raw.to_velocity_form(),
            Err(EnergyError::NonAbsolutelyContinuous(1))
        );
    }

    #[test]
    fn stationary_atom_energy() {
        let c = WeightedCurve::stationary(16, 2.0, &[0.3, 0.3]).unwrap();
        let j = curve_energy(&c, &params(1.0, 1.0, 1.0)).unwrap();
        assert!((j - 2.0).abs() < 1e-14);
    }

    #[test]
    fn quadratic_mass_energy() {
        // h = t², ḣ²/h ≡ 4: J = 2βδ² + α/3
        let c = WeightedCurve::from_fn(1000, 1, |t| t * t, |_| vec![0.0]).unwrap();
        let j = curve_energy(&c, &params(3.0, 1.0, 1.0)).unwrap();
        assert!((j - 3.0).abs() < 1e-6, "{j}");
    }

    #[test]
    fn moving_atom_energy() {
        let c = WeightedCurve::from_fn(50, 2, |_| 1.0, |t| vec![t, 0.0]).unwrap();
        let j = curve_energy(&c, &params(1.0, 2.0, 1.0)).unwrap();
        assert!((j - 2.0).abs() < 1e-12);
    }

    #[test]
    fn localized_examples() {
        let p = params(2.0, 1.0, 1.0);
        let c = WeightedCurve::stationary(10, 1.0, &[0.0]).unwrap();
        let half = curve_energy_localized(&c, &p, 0.0, 0.5).unwrap();
        assert!((half - 1.0).abs() < 1e-14);
        let full = curve_energy_localized(&c, &p, 0.0, 1.0).unwrap();
        assert_eq!(full, curve_energy(&c, &p).unwrap());
        assert_eq!(
            curve_energy_localized(&c, &p, 0.6, 0.2),
            Err(EnergyError::InvalidInterval(0.6, 0.2))
        );
    }

    #[test]
    fn normalization() {
        let p = params(1.0, 1.0, 1.0);
        let c = WeightedCurve::stationary(8, 4.0, &[0.0]).unwrap();
        let u = normalize_to_unit_energy(&c, &p).unwrap();
        assert!(u.masses().iter().all(|h| (h - 1.0).abs() < 1e-15));
        let again = normalize_to_unit_energy(&u, &p).unwrap();
        assert!((curve_energy(&again, &p).unwrap() - 1.0).abs() < 1e-14);
        let zero = c.with_masses(vec![0.0; 9]).unwrap();
        assert_eq!(normalize_to_unit_energy(&zero, &p), Err(EnergyError::ZeroEnergy));
    }

    #[test]
    fn coercivity_examples() {
        let p = params(1.0, 1.0, 1.0);
        let still = WeightedCurve::stationary(8, 1.0, &[0.0]).unwrap();
        let r = coercivity_bounds(&still, &p).unwrap();
        assert!(r.holds);
        assert!((r.lower_bound - 1.0).abs() < 1e-14 && (r.energy - 1.0).abs() < 1e-14);

        let moving = WeightedCurve::from_fn(20, 1, |_| 1.0, |t| vec![t]).unwrap();
        let r = coercivity_bounds(&moving, &p).unwrap();
        assert_eq!(r.constant, 1.0);
        assert!((r.momentum_norm - 1.0).abs() < 1e-14);
        assert!((r.energy - 1.5).abs() < 1e-14);
        assert!(r.holds);
    }

    #[test]
    fn leaving_the_support_drops_transport_only() {
        let p = params(1.0, 1.0, 1.0);
        let c = WeightedCurve::from_nested(
            vec![0.0, 0.5, 1.0],
            vec![1.0, 0.0, 0.0],
            vec![vec![0.0], vec![50.0], vec![-3.0]],
        )
        .unwrap();
        // z falls linearly from 1 to 0 over [0, 0.5]: no transport term,
        // growth 2·(1/0.5)²·0.5 = 4, mass 0.5/3.
        let j = curve_energy(&c, &p).unwrap();
        assert!((j - (4.0 + 0.5 / 3.0)).abs() < 1e-14, "{j}");
    }

    #[test]
    fn params_reject_nonpositive() {
        assert!(matches!(
            EnergyParams::new(1.0, 1.0, -1.0),
            Err(EnergyError::InvalidParameter { name: "delta", .. })
        ));
        assert!(serde_json::from_str::<EnergyParams>(r#"{"alpha":1,"beta":1}"#).is_err());
    }
}
