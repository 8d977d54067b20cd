//! The disk-like global surface of section `{p2 = 0, q2 > 0}` on the invariant
//! sphere, its return map, rotation numbers and circle diagnostics.
//!
//! Disk coordinates are `(J, theta) = (I1, phi1)`; the boundary `J = J_max`
//! is the circle chi^1 and the centre `J = 0` is pierced by chi^2.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::integrate::{integrate_to_event, Hamiltonian, Tolerances};
use crate::model::{self, ActionAngle, PhaseState};
use crate::{Params, Pert};

/// Normal coordinates `(p3, q3)` of an approximation of the invariant sphere
/// as a graph over `(I1, phi1, phi2)`.
pub trait NormalGraph: Sync {
    fn normal(&self, i1: f64, phi1: f64, phi2: f64) -> (f64, f64);
}

/// The unperturbed sphere `{p3 = q3 = 0}`.
pub struct FlatSphere;

impl NormalGraph for FlatSphere {
    fn normal(&self, _i1: f64, _phi1: f64, _phi2: f64) -> (f64, f64) {
        (0.0, 0.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SectionPoint {
    pub j: f64,
    pub theta: f64,
    pub lift: PhaseState<f64>,
    pub c: f64,
    pub eps: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RotationEstimate {
    pub rho: f64,
    pub uncertainty: f64,
    pub n_iterates: usize,
    pub regular: bool,
}

#[derive(Clone, Copy, Debug)]
pub struct ReturnStep {
    pub point: SectionPoint,
    pub time: f64,
    /// Distance between the integrated crossing and its re-projection.
    pub displacement: f64,
}

/// Disk coordinates of a phase-space point.
pub fn disk_coordinates(x: &PhaseState<f64>) -> (f64, f64) {
    let (aa, _) = model::to_action_angle(&x.osc());
    (aa.i1, aa.phi1)
}

/// Return map of the section together with the data it needs.
pub struct SectionMap<'a> {
    pub params: Params,
    pub pert: &'a Pert,
    pub graph: &'a dyn NormalGraph,
    pub tol: Tolerances<f64>,
    /// Normal distance from the graph beyond which an orbit counts as escaped.
    pub escape_tol: f64,
}

static FLAT: FlatSphere = FlatSphere;

impl<'a> SectionMap<'a> {
    pub fn new(params: Params, pert: &'a Pert) -> Self {
        SectionMap { params, pert, graph: &FLAT, tol: Tolerances::new(1e-12, 1e-14), escape_tol: 1e-4 }
    }

    pub fn with_graph(mut self, graph: &'a dyn NormalGraph) -> Self {
        self.graph = graph;
        self
    }

    pub fn with_tol(mut self, tol: Tolerances<f64>) -> Self {
        self.tol = tol;
        self
    }

    pub fn j_max(&self) -> f64 {
        self.params.j_max()
    }

    /// Lift of `(J, theta)`: on the graph, on the section and on `{H = c}`.
    pub fn embed(&self, j: f64, theta: f64) -> Result<SectionPoint> {
        let jmax = self.params.j_max();
        if !(j > 0.0 && j < jmax) || !theta.is_finite() {
            return domain(format!("J = {j} outside (0, {jmax})"));
        }
        let theta = model::wrap_angle(theta);
        let (p3, q3) = self.graph.normal(j, theta, 0.0);
        let lift = lift_with_normal(&self.params, self.pert, j, theta, 0.0, p3, q3)?;
        Ok(SectionPoint { j, theta, lift, c: self.params.c, eps: self.params.eps })
    }

    /// Next positive crossing of the section.
    pub fn step(&self, sp: &SectionPoint) -> Result<ReturnStep> {
        let prm = &self.params;
        let sys = Hamiltonian::new(prm, self.pert);
        let g = |x: &[f64]| -x[2];
        let (a0, _) = model::to_action_angle(&sp.lift.osc());
        let w2 = prm.a2 + prm.b2 * a0.i2;
        let period = std::f64::consts::TAU / w2;
        let t_max = 4.0 * std::f64::consts::TAU / prm.a2;
        let hit = integrate_to_event(&sys, 0.0, &sp.lift.to_array(), t_max, &g, 1, 0.5 * period, self.tol)?
            .ok_or(Error::Escape { iterates: 0, distance: f64::NAN })?;
        let x = PhaseState::from_array(&hit.y);
        let (aa, _) = model::to_action_angle(&x.osc());
        let (n3p, n3q) = self.graph.normal(aa.i1, aa.phi1, aa.phi2);
        let dist = ((x.p[2] - n3p).powi(2) + (x.q[2] - n3q).powi(2)).sqrt();
        if dist > self.escape_tol || !(aa.i1 > 0.0 && aa.i1 < self.j_max()) {
            return Err(Error::Escape { iterates: 0, distance: dist });
        }
        let point = self.embed(aa.i1, aa.phi1)?;
        let d = point.lift.to_array();
        let displacement = (0..6).map(|k| (d[k] - hit.y[k]).powi(2)).sum::<f64>().sqrt();
        Ok(ReturnStep { point, time: hit.t, displacement })
    }

    pub fn ret(&self, sp: &SectionPoint) -> Result<SectionPoint> {
        Ok(self.step(sp)?.point)
    }

    /// `n` iterates after `sp` (not including `sp`).
    pub fn orbit(&self, sp: &SectionPoint, n: usize) -> Result<Vec<SectionPoint>> {
        let mut out = Vec::with_capacity(n);
        let mut cur = *sp;
        for k in 0..n {
            cur = match self.ret(&cur) {
                Ok(p) => p,
                Err(Error::Escape { distance, .. }) => return Err(Error::Escape { iterates: k, distance }),
                Err(e) => return Err(e),
            };
            out.push(cur);
        }
        Ok(out)
    }

    /// `f^n` on disk coordinates.
    pub fn iterate(&self, j: f64, theta: f64, n: usize) -> Result<(f64, f64)> {
        let mut sp = self.embed(j, theta)?;
        for k in 0..n {
            sp = match self.ret(&sp) {
                Ok(p) => p,
                Err(Error::Escape { distance, .. }) => return Err(Error::Escape { iterates: k, distance }),
                Err(e) => return Err(e),
            };
        }
        Ok((sp.j, sp.theta))
    }

    pub fn rotation_number(&self, sp: &SectionPoint, n: usize) -> Result<RotationEstimate> {
        if n < 100 {
            return domain("rotation number needs N >= 100");
        }
        let orbit = self.orbit(sp, n)?;
        let mut th = Vec::with_capacity(n + 1);
        th.push(sp.theta);
        th.extend(orbit.iter().map(|p| p.theta));
        Ok(weighted_rotation(&th))
    }
}

/// Phase-space point with actions `I1`, angles `(phi1, phi2)` and the given
/// normal coordinates, with `I2` solved from `H = c`.
pub fn lift_with_normal(
    params: &Params,
    pert: &Pert,
    i1: f64,
    phi1: f64,
    phi2: f64,
    p3: f64,
    q3: f64,
) -> Result<PhaseState<f64>> {
    let mut i2 = params.i2_on_sphere(i1).ok_or_else(|| Error::Domain("I1 beyond the sphere".into()))?;
    let lift_of = |i2: f64| {
        let osc = model::from_action_angle(&ActionAngle { i1, i2, phi1, phi2 });
        PhaseState::with_osc(osc, p3, q3)
    };
    let exact = (params.eps == 0.0 || pert.is_empty()) && p3 == 0.0 && q3 == 0.0;
    if exact {
        return Ok(lift_of(i2));
    }
    let mut res = f64::INFINITY;
    for _ in 0..50 {
        let x = lift_of(i2);
        res = model::energy_unchecked(params, pert, &x) - params.c;
        if res.abs() <= 1e-14 * (1.0 + params.c) {
            break;
        }
        let h = 1e-7 * (1.0 + i2);
        let lo = (i2 - h).max(0.0);
        let d = (model::energy_unchecked(params, pert, &lift_of(i2 + h))
            - model::energy_unchecked(params, pert, &lift_of(lo)))
            / (i2 + h - lo);
        if d.abs() < 1e-12 {
            break;
        }
        i2 = (i2 - res / d).max(0.0);
    }
    if res.abs() > 1e-10 {
        return Err(Error::Convergence(format!("energy projection residual {res:e}")));
    }
    Ok(lift_of(i2))
}

pub fn section_embed(params: &Params, pert: &Pert, j: f64, theta: f64) -> Result<SectionPoint> {
    SectionMap::new(*params, pert).embed(j, theta)
}

pub fn return_map(params: &Params, pert: &Pert, sp: &SectionPoint) -> Result<SectionPoint> {
    SectionMap::new(*params, pert).ret(sp)
}

pub fn rotation_number(params: &Params, pert: &Pert, sp: &SectionPoint, n: usize) -> Result<RotationEstimate> {
    SectionMap::new(*params, pert).rotation_number(sp, n)
}

/// Closed-form rotation number `omega1/omega2 mod 1` of the unperturbed map at action `J`.
pub fn integrable_rotation(params: &Params, j: f64) -> Option<f64> {
    let i2 = params.i2_on_sphere(j)?;
    let (w1, w2) = params.omega(j, i2);
    Some((w1 / w2).rem_euclid(1.0))
}

/// `d(omega1/omega2)/dJ` along the energy level, using `dI2/dJ = -omega1/omega2`.
pub fn integrable_twist(params: &Params, j: f64) -> Option<f64> {
    let i2 = params.i2_on_sphere(j)?;
    let (w1, w2) = params.omega(j, i2);
    Some(params.b1 / w2 + params.b2 * w1 * w1 / (w2 * w2 * w2))
}

fn bump(t: f64) -> f64 {
    if t <= 0.0 || t >= 1.0 {
        0.0
    } else {
        (-1.0 / (t * (1.0 - t))).exp()
    }
}

/// Weighted Birkhoff average of angle increments `theta[k+1] - theta[k]` (mod 2pi),
/// the result as a fraction of a turn.
fn weighted_mean_increment(theta: &[f64]) -> f64 {
    let n = theta.len() - 1;
    let mut s = 0.0;
    let mut w = 0.0;
    for k in 0..n {
        let d = (theta[k + 1] - theta[k]).rem_euclid(std::f64::consts::TAU);
        let wk = bump((k as f64 + 0.5) / n as f64);
        s += wk * d;
        w += wk;
    }
    s / (w * std::f64::consts::TAU)
}

/// Rotation estimate from an angle sequence. The uncertainty is the
/// disagreement between the full-length and half-length averages; the orbit
/// counts as regular when the two halves of the sequence agree to `1e-6`.
pub fn weighted_rotation(theta: &[f64]) -> RotationEstimate {
    let n = theta.len() - 1;
    let full = weighted_mean_increment(theta);
    let half = weighted_mean_increment(&theta[..=n / 2]);
    let second = weighted_mean_increment(&theta[n / 2..]);
    let uncertainty = (full - half).abs().max(1e-15);
    let regular = (half - second).abs() <= 1e-6;
    RotationEstimate { rho: full.rem_euclid(1.0), uncertainty, n_iterates: n, regular }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TwistReport {
    pub min_abs: f64,
    /// `+1` or `-1` when all grid points agree, `0` otherwise.
    pub sign: i8,
    /// Set when `min_abs < 1e-3`.
    pub weak: bool,
}

/// Minimum of `|d theta' / dJ|` over the grid by centred differences at `theta = 0`.
pub fn twist_check(map: &SectionMap<'_>, jgrid: &[f64]) -> Result<TwistReport> {
    let jmax = map.j_max();
    let h = 1e-5 * jmax;
    let vals: Vec<Result<f64>> = jgrid
        .par_iter()
        .map(|&j| {
            let (_, tp) = map.iterate(j + h, 0.0, 1)?;
            let (_, tm) = map.iterate(j - h, 0.0, 1)?;
            let d = (tp - tm + std::f64::consts::PI).rem_euclid(std::f64::consts::TAU) - std::f64::consts::PI;
            Ok(d / (2.0 * h))
        })
        .collect();
    let mut min_abs = f64::INFINITY;
    let mut pos = 0usize;
    let mut neg = 0usize;
    for v in vals {
        let v = v?;
        min_abs = min_abs.min(v.abs());
        if v > 0.0 {
            pos += 1;
        } else {
            neg += 1;
        }
    }
    let sign = if neg == 0 { 1 } else if pos == 0 { -1 } else { 0 };
    let weak = min_abs < 1e-3;
    if weak {
        log_warn(&format!("twist nearly degenerate: min |dtheta'/dJ| = {min_abs:e}"));
    }
    Ok(TwistReport { min_abs, sign, weak })
}

pub(crate) fn log_warn(msg: &str) {
    if std::env::var_os("TSD_QUIET").is_none() {
        eprintln!("warning: {msg}");
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CircleLabel {
    Circle,
    Resonant,
    Scattered,
    ScatteredEscaping,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScanEntry {
    pub j: f64,
    pub label: CircleLabel,
    pub dispersion: f64,
    pub rho: f64,
    pub regular: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CircleScan {
    pub entries: Vec<ScanEntry>,
    /// Maximal runs of grid actions with no circle label.
    pub bzi_candidates: Vec<(f64, f64)>,
}

/// Label each grid action by iterating `n` returns from `theta = 0`.
pub fn circle_scan(map: &SectionMap<'_>, jgrid: &[f64], n: usize, disp_tol: Option<f64>) -> Result<CircleScan> {
    if n < 1000 {
        return domain("circle scan needs N >= 1000");
    }
    let tol = disp_tol.unwrap_or((10.0 * map.params.eps).max(1e-8));
    let entries: Vec<Result<ScanEntry>> = jgrid
        .par_iter()
        .map(|&j| {
            let sp = map.embed(j, 0.0)?;
            match map.orbit(&sp, n) {
                Ok(orbit) => {
                    let mean = orbit.iter().map(|p| p.j).sum::<f64>() / n as f64;
                    let dispersion = orbit.iter().map(|p| (p.j - mean).abs()).fold(0.0, f64::max);
                    let mut th = vec![sp.theta];
                    th.extend(orbit.iter().map(|p| p.theta));
                    let rot = weighted_rotation(&th);
                    let label = if !rot.regular {
                        CircleLabel::Scattered
                    } else if dispersion < tol {
                        CircleLabel::Circle
                    } else {
                        CircleLabel::Resonant
                    };
                    Ok(ScanEntry { j, label, dispersion, rho: rot.rho, regular: rot.regular })
                }
                Err(Error::Escape { .. }) => Ok(ScanEntry {
                    j,
                    label: CircleLabel::ScatteredEscaping,
                    dispersion: f64::INFINITY,
                    rho: f64::NAN,
                    regular: false,
                }),
                Err(e) => Err(e),
            }
        })
        .collect();
    let entries = entries.into_iter().collect::<Result<Vec<_>>>()?;
    let mut bzi = Vec::new();
    let mut start: Option<f64> = None;
    let mut last = 0.0;
    for e in &entries {
        if e.label == CircleLabel::Circle {
            if let Some(s) = start.take() {
                bzi.push((s, last));
            }
        } else if start.is_none() {
            start = Some(e.j);
        }
        last = e.j;
    }
    if let Some(s) = start {
        bzi.push((s, last));
    }
    Ok(CircleScan { entries, bzi_candidates: bzi })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetOrbit {
    pub point: SectionPoint,
    pub achieved: RotationEstimate,
}

/// Bisection on the initial action at fixed `theta0` for an orbit of rotation number `rho`.
pub fn target_rotation_orbit(
    map: &SectionMap<'_>,
    rho: f64,
    bracket: (f64, f64),
    theta0: f64,
    n: usize,
) -> Result<TargetOrbit> {
    let rot = |j: f64| -> Result<(SectionPoint, RotationEstimate)> {
        let sp = map.embed(j, theta0)?;
        let r = map.rotation_number(&sp, n)?;
        Ok((sp, r))
    };
    let (mut lo, mut hi) = bracket;
    let (_, r_lo) = rot(lo)?;
    let (_, r_hi) = rot(hi)?;
    let (s_lo, s_hi) = (r_lo.rho - rho, r_hi.rho - rho);
    if !(s_lo * s_hi < 0.0) {
        return domain(format!(
            "rotation numbers at the bracket ({}, {}) do not straddle {rho}",
            r_lo.rho, r_hi.rho
        ));
    }
    let increasing = s_hi > 0.0;
    let mut best: Option<(SectionPoint, RotationEstimate)> = None;
    for _ in 0..80 {
        let mid = 0.5 * (lo + hi);
        let (sp, r) = rot(mid)?;
        let err = r.rho - rho;
        let better = best.as_ref().map_or(true, |b| (b.1.rho - rho).abs() > err.abs());
        if better {
            best = Some((sp, r));
        }
        if err.abs() <= 2.0 * r.uncertainty || (hi - lo).abs() < 1e-15 {
            break;
        }
        if (err > 0.0) == increasing {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    let (point, achieved) = best.expect("at least one bisection step");
    Ok(TargetOrbit { point, achieved })
}

/// Signed area of a closed polygon in the `(J, theta)` plane.
pub fn polygon_area(pts: &[(f64, f64)]) -> f64 {
    let n = pts.len();
    let mut s = 0.0;
    for k in 0..n {
        let (x0, y0) = pts[k];
        let (x1, y1) = pts[(k + 1) % n];
        s += x0 * y1 - x1 * y0;
    }
    0.5 * s
}
