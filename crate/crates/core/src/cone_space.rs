//! Weighted Diracs `h·δ_γ`, time-sampled curves of them, and the metrics
//! used on both: the flat distance, the supremum-in-time distance and the
//! Hellinger–Kantorovich cone distance.
//!
//! A position carried by a zero-mass atom (or a curve node outside the
//! discrete support) is a sentinel. Every metric branches on the mass first,
//! so sentinels never influence a distance.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::ops::RangeInclusive;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Relative factor applied to `max(h)` to obtain the default support threshold.
pub const DEFAULT_RELATIVE_THRESHOLD: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CurveError {
    #[error("curve needs at least two time nodes, got {0}")]
    TooShort(usize),
    #[error("time grid must start at 0 and end at 1")]
    GridEndpoints,
    #[error("time grid is not strictly increasing at index {0}")]
    NonIncreasingTimes(usize),
    #[error("length mismatch: {what} has {got} entries, expected {expected}")]
    LengthMismatch {
        what: &'static str,
        got: usize,
        expected: usize,
    },
    #[error("mass at index {0} is negative or not finite")]
    InvalidMass(usize),
    #[error("position at index {0} is not finite")]
    InvalidPosition(usize),
    #[error("support threshold must be finite and nonnegative")]
    InvalidThreshold,
    #[error("dimension must be at least 1")]
    ZeroDimension,
    #[error("time grids differ")]
    MismatchedGrids,
    #[error("dimensions differ: {0} vs {1}")]
    MismatchedDimensions(usize, usize),
    #[error("invalid domain box: {0}")]
    InvalidBox(String),
    #[error("csv: {0}")]
    Csv(String),
}

/// Axis-aligned box `Ω = [lower, upper] ⊂ ℝ^d`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawBox", into = "RawBox")]
pub struct DomainBox {
    lower: Vec<f64>,
    upper: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawBox {
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl TryFrom<RawBox> for DomainBox {
    type Error = CurveError;
    fn try_from(raw: RawBox) -> Result<Self, Self::Error> {
        DomainBox::new(raw.lower, raw.upper)
    }
}

impl From<DomainBox> for RawBox {
    fn from(b: DomainBox) -> Self {
        RawBox {
            lower: b.lower,
            upper: b.upper,
        }
    }
}

impl DomainBox {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self, CurveError> {
        if lower.is_empty() {
            return Err(CurveError::ZeroDimension);
        }
        if lower.len() != upper.len() {
            return Err(CurveError::InvalidBox(format!(
                "corner lengths {} and {}",
                lower.len(),
                upper.len()
            )));
        }
        for (axis, (l, u)) in lower.iter().zip(&upper).enumerate() {
            if !(l.is_finite() && u.is_finite() && l < u) {
                return Err(CurveError::InvalidBox(format!(
                    "axis {axis}: need finite lower < upper, got [{l}, {u}]"
                )));
            }
        }
        Ok(Self { lower, upper })
    }

    /// The unit cube `[0,1]^d`.
    pub fn unit(dim: usize) -> Self {
        Self::new(vec![0.0; dim], vec![1.0; dim]).expect("unit box is valid")
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn extent(&self, axis: usize) -> f64 {
        self.upper[axis] - self.lower[axis]
    }

    pub fn center(&self) -> Vec<f64> {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(l, u)| 0.5 * (l + u))
            .collect()
    }

    pub fn volume(&self) -> f64 {
        (0..self.dim()).map(|a| self.extent(a)).product()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim()
            && x
                .iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(v, (l, u))| *l <= *v && *v <= *u)
    }

    pub fn clamp_in_place(&self, x: &mut [f64]) {
        for ((v, l), u) in x.iter_mut().zip(&self.lower).zip(&self.upper) {
            *v = v.clamp(*l, *u);
        }
    }

    /// Box grown by `margin` on every side.
    pub fn inflated(&self, margin: f64) -> Result<Self, CurveError> {
        Self::new(
            self.lower.iter().map(|l| l - margin).collect(),
            self.upper.iter().map(|u| u + margin).collect(),
        )
    }
}

pub(crate) fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// A single measure `h·δ_γ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConeAtom {
    pub mass: f64,
    pub position: Vec<f64>,
}

impl ConeAtom {
    pub fn new(mass: f64, position: Vec<f64>) -> Self {
        debug_assert!(mass >= 0.0, "cone atom mass must be nonnegative");
        Self { mass, position }
    }

    pub fn zero(dim: usize) -> Self {
        Self {
            mass: 0.0,
            position: vec![0.0; dim],
        }
    }

    pub fn is_zero(&self) -> bool {
        self.mass == 0.0
    }
}

/// Flat (bounded-Lipschitz) distance between two weighted Diracs.
///
/// `|h₁−h₂| + min(h₁,h₂)|γ₁−γ₂|` when the atoms are at most 2 apart,
/// `h₁+h₂` otherwise. With a zero mass both branches reduce to the other
/// mass, so the sentinel position is never read.
pub fn flat_distance(a: &ConeAtom, b: &ConeAtom) -> f64 {
    let (h1, h2) = (a.mass, b.mass);
    if h1 == 0.0 || h2 == 0.0 {
        return h1 + h2;
    }
    let sep = euclidean(&a.position, &b.position);
    if sep <= 2.0 {
        (h1 - h2).abs() + h1.min(h2) * sep
    } else {
        h1 + h2
    }
}

/// Hellinger–Kantorovich cone distance `H` (not squared).
pub fn hk_cone_distance(a: &ConeAtom, b: &ConeAtom) -> f64 {
    hk_cone_distance_squared(a, b).sqrt()
}

pub fn hk_cone_distance_squared(a: &ConeAtom, b: &ConeAtom) -> f64 {
    let (h1, h2) = (a.mass, b.mass);
    if h1 == 0.0 || h2 == 0.0 {
        return h1 + h2;
    }
    let sep = euclidean(&a.position, &b.position);
    let cross = 2.0 * (h1 * h2).sqrt();
    let sq = if sep <= PI {
        h1 + h2 - cross * sep.cos()
    } else {
        h1 + h2 + cross
    };
    sq.max(0.0)
}

/// A time-sampled narrowly continuous curve `t ↦ h(t)·δ_{γ(t)}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawCurve", into = "RawCurve")]
pub struct WeightedCurve {
    times: Vec<f64>,
    masses: Vec<f64>,
    /// Row-major `len × dim`.
    positions: Vec<f64>,
    dim: usize,
    threshold: Option<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawCurve {
    times: Vec<f64>,
    masses: Vec<f64>,
    positions: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    support_threshold: Option<f64>,
}

impl TryFrom<RawCurve> for WeightedCurve {
    type Error = CurveError;
    fn try_from(raw: RawCurve) -> Result<Self, Self::Error> {
        let curve = WeightedCurve::from_nested(raw.times, raw.masses, raw.positions)?;
        match raw.support_threshold {
            Some(thr) => curve.with_threshold(thr),
            None => Ok(curve),
        }
    }
}

impl From<WeightedCurve> for RawCurve {
    fn from(c: WeightedCurve) -> Self {
        let positions = c.positions.chunks(c.dim).map(<[f64]>::to_vec).collect();
        RawCurve {
            times: c.times,
            masses: c.masses,
            positions,
            support_threshold: c.threshold,
        }
    }
}

impl WeightedCurve {
    /// Builds a curve from flat row-major positions.
    pub fn new(
        times: Vec<f64>,
        masses: Vec<f64>,
        positions: Vec<f64>,
        dim: usize,
    ) -> Result<Self, CurveError> {
        if dim == 0 {
            return Err(CurveError::ZeroDimension);
        }
        let n = times.len();
        if n < 2 {
            return Err(CurveError::TooShort(n));
        }
        if masses.len() != n {
            return Err(CurveError::LengthMismatch {
                what: "masses",
                got: masses.len(),
                expected: n,
            });
        }
        if positions.len() != n * dim {
            return Err(CurveError::LengthMismatch {
                what: "positions",
                got: positions.len(),
                expected: n * dim,
            });
        }
        if times[0] != 0.0 || times[n - 1] != 1.0 {
            return Err(CurveError::GridEndpoints);
        }
        if let Some(k) = (1..n).find(|&k| !(times[k] > times[k - 1])) {
            return Err(CurveError::NonIncreasingTimes(k));
        }
        if let Some(k) = masses.iter().position(|h| !(h.is_finite() && *h >= 0.0)) {
            return Err(CurveError::InvalidMass(k));
        }
        if let Some(i) = positions.iter().position(|x| !x.is_finite()) {
            return Err(CurveError::InvalidPosition(i / dim));
        }
        Ok(Self {
            times,
            masses,
            positions,
            dim,
            threshold: None,
        })
    }

    pub fn from_nested(
        times: Vec<f64>,
        masses: Vec<f64>,
        positions: Vec<Vec<f64>>,
    ) -> Result<Self, CurveError> {
        let dim = positions.first().map_or(0, Vec::len);
        if let Some(k) = positions.iter().position(|p| p.len() != dim) {
            return Err(CurveError::LengthMismatch {
                what: "position",
                got: positions[k].len(),
                expected: dim,
            });
        }
        Self::new(times, masses, positions.concat(), dim)
    }

    /// Uniform grid `k/steps`, `k = 0..=steps`.
    pub fn uniform_times(steps: usize) -> Vec<f64> {
        (0..=steps).map(|k| k as f64 / steps as f64).collect()
    }

    /// Stationary curve with constant mass on a uniform grid.
    pub fn stationary(steps: usize, mass: f64, position: &[f64]) -> Result<Self, CurveError> {
        let times = Self::uniform_times(steps);
        let n = times.len();
        Self::new(
            times,
            vec![mass; n],
            position.repeat(n),
            position.len(),
        )
    }

    /// Samples `(h(t), γ(t))` from closures on a uniform grid.
    pub fn from_fn(
        steps: usize,
        dim: usize,
        mass: impl Fn(f64) -> f64,
        position: impl Fn(f64) -> Vec<f64>,
    ) -> Result<Self, CurveError> {
        let times = Self::uniform_times(steps);
        let masses = times.iter().map(|&t| mass(t)).collect();
        let mut positions = Vec::with_capacity(times.len() * dim);
        for &t in &times {
            let p = position(t);
            if p.len() != dim {
                return Err(CurveError::MismatchedDimensions(p.len(), dim));
            }
            positions.extend(p);
        }
        Self::new(times, masses, positions, dim)
    }

    /// Overrides the support threshold (otherwise `1e-12·max h`).
    pub fn with_threshold(mut self, threshold: f64) -> Result<Self, CurveError> {
        if !(threshold.is_finite() && threshold >= 0.0) {
            return Err(CurveError::InvalidThreshold);
        }
        self.threshold = Some(threshold);
        Ok(self)
    }

    pub fn threshold_override(&self) -> Option<f64> {
        self.threshold
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn masses(&self) -> &[f64] {
        &self.masses
    }

    pub fn positions_flat(&self) -> &[f64] {
        &self.positions
    }

    pub fn position(&self, k: usize) -> &[f64] {
        &self.positions[k * self.dim..(k + 1) * self.dim]
    }

    pub fn max_mass(&self) -> f64 {
        self.masses.iter().copied().fold(0.0, f64::max)
    }

    pub fn support_threshold(&self) -> f64 {
        self.threshold
            .unwrap_or_else(|| DEFAULT_RELATIVE_THRESHOLD * self.max_mass())
    }

    /// Whether node `k` lies in the discrete support `{h > threshold}`.
    pub fn in_support(&self, k: usize) -> bool {
        self.masses[k] > self.support_threshold()
    }

    pub fn atom(&self, k: usize) -> ConeAtom {
        ConeAtom {
            mass: self.masses[k],
            position: self.position(k).to_vec(),
        }
    }

    /// Same curve with masses multiplied by `factor` (threshold override
    /// scaled along so the support is unchanged).
    pub fn scaled(&self, factor: f64) -> Self {
        assert!(factor.is_finite() && factor >= 0.0, "scale must be finite and nonnegative");
        Self {
            times: self.times.clone(),
            masses: self.masses.iter().map(|h| h * factor).collect(),
            positions: self.positions.clone(),
            dim: self.dim,
            threshold: self.threshold.map(|t| t * factor),
        }
    }

    /// Replaces the masses, keeping grid, positions and threshold override.
    pub fn with_masses(&self, masses: Vec<f64>) -> Result<Self, CurveError> {
        let mut out = Self::new(self.times.clone(), masses, self.positions.clone(), self.dim)?;
        out.threshold = self.threshold;
        Ok(out)
    }

    /// Locates `t` on the grid: index `k` and fraction `θ` with
    /// `t = (1−θ)t_k + θ t_{k+1}`.
    pub fn locate(&self, t: f64) -> (usize, f64) {
        locate(&self.times, t)
    }

    /// Interpolated atom at time `t`.
    ///
    /// Mass is interpolated linearly. The position is interpolated between two
    /// supported nodes; if only one endpoint is supported its position is used.
    pub fn sample(&self, t: f64) -> ConeAtom {
        let (k, theta) = self.locate(t);
        if theta == 0.0 || k + 1 == self.len() {
            return self.atom(k);
        }
        let mass = (1.0 - theta) * self.masses[k] + theta * self.masses[k + 1];
        let (a, b) = (self.in_support(k), self.in_support(k + 1));
        let position = match (a, b) {
            (true, false) => self.position(k).to_vec(),
            (false, true) => self.position(k + 1).to_vec(),
            _ => self
                .position(k)
                .iter()
                .zip(self.position(k + 1))
                .map(|(x, y)| (1.0 - theta) * x + theta * y)
                .collect(),
        };
        ConeAtom { mass, position }
    }

    /// Linear resampling onto another grid with the same endpoints.
    pub fn resample(&self, times: &[f64]) -> Result<Self, CurveError> {
        let mut masses = Vec::with_capacity(times.len());
        let mut positions = Vec::with_capacity(times.len() * self.dim);
        for &t in times {
            let a = self.sample(t);
            masses.push(a.mass);
            positions.extend(a.position);
        }
        let mut out = Self::new(times.to_vec(), masses, positions, self.dim)?;
        out.threshold = self.threshold;
        Ok(out)
    }

    /// Replaces positions at nodes outside the support by the last supported
    /// position, or by `fallback` before the first supported node.
    pub fn fill_sentinels(&self, fallback: &[f64]) -> Self {
        let mut out = self.clone();
        let mut last: Option<Vec<f64>> = None;
        for k in 0..self.len() {
            if self.in_support(k) {
                last = Some(self.position(k).to_vec());
            } else {
                let p = last.as_deref().unwrap_or(fallback);
                out.positions[k * self.dim..(k + 1) * self.dim].copy_from_slice(p);
            }
        }
        out
    }

    /// CSV form: header `t,h,x1..xd`, one row per node.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("t,h");
        for j in 1..=self.dim {
            let _ = write!(s, ",x{j}");
        }
        s.push('\n');
        for k in 0..self.len() {
            let _ = write!(s, "{:?},{:?}", self.times[k], self.masses[k]);
            for x in self.position(k) {
                let _ = write!(s, ",{x:?}");
            }
            s.push('\n');
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self, CurveError> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| CurveError::Csv("empty input".into()))?;
        let cols: Vec<&str> = header.split(',').map(str::trim).collect();
        if cols.len() < 3 || cols[0] != "t" || cols[1] != "h" {
            return Err(CurveError::Csv(format!("bad header `{header}`")));
        }
        let dim = cols.len() - 2;
        let (mut times, mut masses, mut positions) = (Vec::new(), Vec::new(), Vec::new());
        for (row, line) in lines.enumerate() {
            let vals: Vec<f64> = line
                .split(',')
                .map(|f| f.trim().parse::<f64>())
                .collect::<Result<_, _>>()
                .map_err(|e| CurveError::Csv(format!("row {row}: {e}")))?;
            if vals.len() != dim + 2 {
                return Err(CurveError::Csv(format!(
                    "row {row}: expected {} fields, got {}",
                    dim + 2,
                    vals.len()
                )));
            }
            times.push(vals[0]);
            masses.push(vals[1]);
            positions.extend_from_slice(&vals[2..]);
        }
        Self::new(times, masses, positions, dim)
    }
}

pub(crate) fn locate(times: &[f64], t: f64) -> (usize, f64) {
    let n = times.len();
    if t <= times[0] {
        return (0, 0.0);
    }
    if t >= times[n - 1] {
        return (n - 1, 0.0);
    }
    // first index with times[i] > t
    let upper = times.partition_point(|&s| s <= t);
    let k = upper - 1;
    let theta = (t - times[k]) / (times[k + 1] - times[k]);
    (k, theta)
}

/// `sup_t D_F(c₁(t), c₂(t))` over the shared time grid.
pub fn sup_distance(c1: &WeightedCurve, c2: &WeightedCurve) -> Result<f64, CurveError> {
    if c1.times != c2.times {
        return Err(CurveError::MismatchedGrids);
    }
    if c1.dim != c2.dim {
        return Err(CurveError::MismatchedDimensions(c1.dim, c2.dim));
    }
    Ok((0..c1.len())
        .map(|k| flat_distance(&c1.atom(k), &c2.atom(k)))
        .fold(0.0, f64::max))
}

/// As [`sup_distance`], resampling `c2` onto the grid of `c1` first when the
/// grids differ.
pub fn sup_distance_resampled(c1: &WeightedCurve, c2: &WeightedCurve) -> Result<f64, CurveError> {
    if c1.times == c2.times {
        sup_distance(c1, c2)
    } else {
        sup_distance(c1, &c2.resample(&c1.times)?)
    }
}

/// Maximal runs of consecutive supported nodes, in increasing order.
pub fn support_components(c: &WeightedCurve) -> Vec<RangeInclusive<usize>> {
    let thr = c.support_threshold();
    let mut out = Vec::new();
    let mut start = None;
    for (k, &h) in c.masses.iter().enumerate() {
        match (h > thr, start) {
            (true, None) => start = Some(k),
            (false, Some(s)) => {
                out.push(s..=k - 1);
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        out.push(s..=c.len() - 1);
    }
    out
}

/// Per-step position bound used by [`validate_curve`].
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum ContinuityBound {
    /// Report the largest observed speed as a warning, never fail on it.
    #[default]
    Unbounded,
    /// `|γ_{k+1} − γ_k| ≤ L·Δt` on supported steps.
    Lipschitz(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ContinuityViolation {
    pub step: usize,
    pub increment: f64,
    pub bound: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationReport {
    pub passed: bool,
    /// `h_{k+1} − h_k` for every step.
    pub mass_increments: Vec<f64>,
    /// `|γ_{k+1} − γ_k|` for steps with both nodes supported.
    pub position_increments: Vec<Option<f64>>,
    pub violations: Vec<ContinuityViolation>,
    pub warnings: Vec<String>,
}

/// Discrete narrow-continuity check. Positions are compared only between
/// consecutive supported nodes; jumps across a zero-mass gap are free.
pub fn validate_curve(c: &WeightedCurve, bound: ContinuityBound) -> ValidationReport {
    let steps = c.len() - 1;
    let mut mass_increments = Vec::with_capacity(steps);
    let mut position_increments = Vec::with_capacity(steps);
    let mut violations = Vec::new();
    let mut max_speed: f64 = 0.0;
    for k in 0..steps {
        mass_increments.push(c.masses[k + 1] - c.masses[k]);
        if c.in_support(k) && c.in_support(k + 1) {
            let inc = euclidean(c.position(k), c.position(k + 1));
            let dt = c.times[k + 1] - c.times[k];
            max_speed = max_speed.max(inc / dt);
            if let ContinuityBound::Lipschitz(l) = bound {
                let allowed = l * dt;
                if inc > allowed {
                    violations.push(ContinuityViolation {
                        step: k,
                        increment: inc,
                        bound: allowed,
                    });
                }
            }
            position_increments.push(Some(inc));
        } else {
            position_increments.push(None);
        }
    }
    let mut warnings = Vec::new();
    if bound == ContinuityBound::Unbounded && max_speed > 0.0 {
        warnings.push(format!(
            "no continuity bound configured; largest discrete speed on the support is {max_speed:?}"
        ));
    }
    ValidationReport {
        passed: violations.is_empty(),
        mass_increments,
        position_increments,
        violations,
        warnings,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn atom(mass: f64, x: f64) -> ConeAtom {
        ConeAtom::new(mass, vec![x, 0.0])
    }

    #[test]
    fn flat_distance_examples() {
        assert_eq!(flat_distance(&atom(1.0, 0.3), &atom(1.0, 0.3)), 0.0);
        assert_eq!(flat_distance(&atom(1.0, 0.0), &atom(2.0, 1.0)), 2.0);
        assert_eq!(flat_distance(&atom(1.0, 0.0), &atom(3.0, 5.0)), 4.0);
        assert_eq!(flat_distance(&ConeAtom::zero(2), &atom(0.0, 7.0)), 0.0);
    }

    #[test]
    fn flat_distance_ignores_sentinel_position() {
        let a = ConeAtom::new(0.0, vec![100.0, -3.0]);
        let b = atom(2.5, 0.1);
        assert_eq!(flat_distance(&a, &b), 2.5);
        assert_eq!(flat_distance(&b, &a), 2.5);
    }

    #[test]
    fn hk_examples() {
        assert!((hk_cone_distance(&atom(4.0, 0.2), &atom(1.0, 0.2)) - 1.0).abs() < 1e-15);
        assert!((hk_cone_distance(&atom(9.0, 0.0), &atom(0.0, 3.0)) - 3.0).abs() < 1e-15);
        let h = hk_cone_distance(&atom(1.0, 0.0), &atom(1.0, 4.0));
        assert!((h - 2.0).abs() < 1e-15);
    }

    #[test]
    fn support_components_examples() {
        let c = WeightedCurve::stationary(4, 1.0, &[0.5]).unwrap();
        assert_eq!(support_components(&c), vec![0..=4]);
        let z = c.with_masses(vec![0.0; 5]).unwrap();
        assert!(support_components(&z).is_empty());
        let gap = c.with_masses(vec![1.0, 1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(support_components(&gap), vec![0..=1, 4..=4]);
    }

    #[test]
    fn validate_detects_jump_inside_support() {
        let bound = 0.5;
        let steps = 10;
        let dt = 1.0 / steps as f64;
        let c = WeightedCurve::from_fn(steps, 1, |_| 1.0, |t| {
            vec![if t > 0.55 { 10.0 * bound * dt } else { 0.0 }]
        })
        .unwrap();
        let report = validate_curve(&c, ContinuityBound::Lipschitz(bound));
        assert!(!report.passed);
        assert_eq!(report.violations.len(), 1);
        assert_eq!(report.violations[0].step, 5);

        let constant = WeightedCurve::stationary(steps, 1.0, &[0.0]).unwrap();
        assert!(validate_curve(&constant, ContinuityBound::Lipschitz(bound)).passed);
    }

    #[test]
    fn validate_allows_jump_across_zero_mass_gap() {
        let c = WeightedCurve::from_nested(
            vec![0.0, 0.25, 0.5, 0.75, 1.0],
            vec![1.0, 1.0, 0.0, 1.0, 1.0],
            vec![vec![0.0], vec![0.0], vec![-50.0], vec![9.0], vec![9.0]],
        )
        .unwrap();
        let report = validate_curve(&c, ContinuityBound::Lipschitz(0.1));
        assert!(report.passed, "{report:?}");
        assert_eq!(report.position_increments[1], None);
        assert_eq!(report.position_increments[2], None);
    }

    #[test]
    fn unbounded_validation_only_warns() {
        let c = WeightedCurve::from_fn(4, 1, |_| 1.0, |t| vec![100.0 * t]).unwrap();
        let report = validate_curve(&c, ContinuityBound::Unbounded);
        assert!(report.passed);
        assert_eq!(report.warnings.len(), 1);
    }

    #[test]
    fn sup_distance_examples() {
        let c = WeightedCurve::from_fn(8, 2, |t| 1.0 + t, |t| vec![t, 1.0 - t]).unwrap();
        assert_eq!(sup_distance(&c, &c).unwrap(), 0.0);
        let eps = 0.125;
        let shifted = c
            .with_masses(c.masses().iter().map(|h| h + eps).collect())
            .unwrap();
        assert!((sup_distance(&c, &shifted).unwrap() - eps).abs() < 1e-15);
        let other = WeightedCurve::stationary(4, 1.0, &[0.0, 0.0]).unwrap();
        assert_eq!(sup_distance(&c, &other), Err(CurveError::MismatchedGrids));
        assert!(sup_distance_resampled(&c, &other).is_ok());
    }

    #[test]
    fn construction_errors() {
        assert_eq!(
            WeightedCurve::new(vec![0.0, 0.5], vec![1.0, 1.0], vec![0.0, 0.0], 1),
            Err(CurveError::GridEndpoints)
        );
        assert_eq!(
            WeightedCurve::new(vec![0.0, 0.6, 0.5, 1.0], vec![1.0; 4], vec![0.0; 4], 1),
            Err(CurveError::NonIncreasingTimes(2))
        );
        assert_eq!(
            WeightedCurve::new(vec![0.0, 1.0], vec![1.0, -1.0], vec![0.0; 2], 1),
            Err(CurveError::InvalidMass(1))
        );
        assert!(DomainBox::new(vec![0.0, 1.0], vec![1.0, 1.0]).is_err());
    }

    #[test]
    fn sample_interpolates_inside_support_only() {
        let c = WeightedCurve::from_nested(
            vec![0.0, 0.5, 1.0],
            vec![2.0, 0.0, 2.0],
            vec![vec![1.0], vec![99.0], vec![3.0]],
        )
        .unwrap();
        let a = c.sample(0.25);
        assert_eq!(a.mass, 1.0);
        assert_eq!(a.position, vec![1.0]);
        let b = c.sample(0.75);
        assert_eq!(b.position, vec![3.0]);
    }

    #[test]
    fn fill_sentinels_uses_last_valid_or_fallback() {
        let c = WeightedCurve::from_nested(
            vec![0.0, 0.5, 1.0],
            vec![0.0, 1.0, 0.0],
            vec![vec![7.0], vec![2.0], vec![9.0]],
        )
        .unwrap();
        let f = c.fill_sentinels(&[0.5]);
        assert_eq!(f.position(0), &[0.5]);
        assert_eq!(f.position(2), &[2.0]);
    }

    #[test]
    fn json_and_csv_forms() {
        let c = WeightedCurve::from_fn(3, 2, |t| 0.1 + t / 3.0, |t| vec![t.sin(), 1.0 / 3.0])
            .unwrap();
        let json = serde_json::to_string(&c).unwrap();
        assert!(json.starts_with("{\"times\":"));
        let back: WeightedCurve = serde_json::from_str(&json).unwrap();
        assert_eq!(back, c);
        let csv = c.to_csv();
        assert!(csv.starts_with("t,h,x1,x2\n"));
        assert_eq!(WeightedCurve::from_csv(&csv).unwrap(), c);
    }
}
