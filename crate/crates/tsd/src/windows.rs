//! Correctly aligned windows on the section annulus `(J, theta)`: the window
//! type, a sampled alignment checker with Brouwer-degree verification,
//! scattering-chain itineraries, the shadowing search and flow-box thickening.
//!
//! A window is an affine image of `[0,1]^2`; `u` is the exit coordinate and
//! `v` the entry coordinate. Images are compared in the parameters of the
//! target window after lifting `theta` continuously along the sampled curves.

use std::f64::consts::{PI, TAU};

use nalgebra::Matrix2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::manifold::{self, NhimApprox, ShootConfig};
use crate::melnikov::{self, Base};
use crate::model::{self, Branch};
use crate::section::{self, SectionMap, SectionPoint};
use crate::{Params, Pert};

/// A point `(J, theta)` of the section.
pub type Point = (f64, f64);

pub const DEFAULT_MARGIN_TOL: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Axis {
    J,
    Theta,
}

/// With `x = 2u - 1`, `y = 2v - 1` a J-exit window is
/// `(Jc + hJ (x + sJ y), thc + hth (y + sth x))`; a theta-exit window is the
/// unskewed `(Jc + hJ y, thc + hth x)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Window2 {
    pub center: Point,
    pub half: (f64, f64),
    pub exit: Axis,
    #[serde(default)]
    pub skew: (f64, f64),
}

fn wrap_pi(a: f64) -> f64 {
    let r = (a + PI).rem_euclid(TAU) - PI;
    if r <= -PI {
        r + TAU
    } else {
        r
    }
}

fn lift_near(theta: f64, reference: f64) -> f64 {
    theta + TAU * ((reference - theta) / TAU).round()
}

impl Window2 {
    pub fn new(center: Point, half: (f64, f64), exit: Axis) -> Result<Self> {
        Self::skewed(center, half, exit, (0.0, 0.0))
    }

    pub fn skewed(center: Point, half: (f64, f64), exit: Axis, skew: (f64, f64)) -> Result<Self> {
        let ok = |x: f64| x.is_finite();
        if !(ok(center.0) && ok(center.1) && ok(skew.0) && ok(skew.1)) {
            return domain("window data must be finite");
        }
        if !(half.0 > 0.0 && half.1 > 0.0 && half.0.is_finite() && half.1.is_finite()) {
            return domain(format!("window half-widths must be positive, got {half:?}"));
        }
        if half.1 >= PI {
            return domain("theta half-width must be below pi");
        }
        if exit == Axis::Theta && skew != (0.0, 0.0) {
            return domain("theta-exit windows are not skewed");
        }
        if (1.0 - skew.0 * skew.1).abs() < 1e-6 {
            return domain("degenerate window frame");
        }
        if center.0 - half.0 * (1.0 + skew.0.abs()) <= 0.0 {
            return domain("window reaches J <= 0");
        }
        Ok(Window2 { center, half, exit, skew })
    }

    /// J-exit window with exit half-vector `a` and entry half-vector `b`.
    fn from_vectors(center: Point, a: (f64, f64), b: (f64, f64)) -> Result<Self> {
        let a = if a.0 < 0.0 { (-a.0, -a.1) } else { a };
        let b = if b.1 < 0.0 { (-b.0, -b.1) } else { b };
        if !(a.0 > 0.0 && b.1 > 0.0) {
            return domain("degenerate image frame");
        }
        Self::skewed(center, (a.0, b.1), Axis::J, (b.0 / a.0, a.1 / b.1))
    }

    /// Unwrapped `(J, theta)` at parameters `(u, v)`.
    pub fn point(&self, u: f64, v: f64) -> Point {
        let (x, y) = (2.0 * u - 1.0, 2.0 * v - 1.0);
        let (hj, ht) = self.half;
        match self.exit {
            Axis::J => (
                self.center.0 + hj * (x + self.skew.0 * y),
                self.center.1 + ht * (y + self.skew.1 * x),
            ),
            Axis::Theta => (self.center.0 + hj * y, self.center.1 + ht * x),
        }
    }

    /// Parameters of `(J, theta)` with `theta` taken as given.
    pub fn coords_raw(&self, j: f64, theta: f64) -> (f64, f64) {
        let dj = (j - self.center.0) / self.half.0;
        let dt = (theta - self.center.1) / self.half.1;
        let (x, y) = match self.exit {
            Axis::J => {
                let (sj, st) = self.skew;
                let det = 1.0 - sj * st;
                ((dj - sj * dt) / det, (dt - st * dj) / det)
            }
            Axis::Theta => (dt, dj),
        };
        (0.5 * (x + 1.0), 0.5 * (y + 1.0))
    }

    /// Parameters of the lift of `p` nearest the centre.
    pub fn coords(&self, p: Point) -> (f64, f64) {
        self.coords_raw(p.0, lift_near(p.1, self.center.1))
    }

    pub fn contains(&self, p: Point) -> bool {
        let (u, v) = self.coords(p);
        (0.0..=1.0).contains(&u) && (0.0..=1.0).contains(&v)
    }

    pub fn diameter(&self) -> f64 {
        let d = |a: Point, b: Point| ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt();
        d(self.point(0.0, 0.0), self.point(1.0, 1.0)).max(d(self.point(1.0, 0.0), self.point(0.0, 1.0)))
    }

    /// Shift in `u` of consecutive lifts of a theta-exit window.
    fn u_period(&self) -> f64 {
        PI / self.half.1
    }

    /// Does the exit-axis segment through the centre cross the circle `J = j`?
    pub fn straddles(&self, j: f64) -> bool {
        let (a, b) = (self.point(0.0, 0.5).0, self.point(1.0, 0.5).0);
        j >= a.min(b) && j <= a.max(b)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Aligned,
    NotAligned,
    Inconclusive,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentReport {
    pub aligned: bool,
    pub verdict: Verdict,
    /// Smallest clearance of the avoidance conditions after the sampling
    /// correction, in parameters of the target window.
    pub margin: f64,
    pub degree: i32,
    /// Winding of the boundary image about the points where the centre-line
    /// image crosses the middle of the target, weighted by crossing direction
    /// and by the orientation of the image frame. Zero when such a point lies
    /// on the boundary image.
    pub winding: i32,
    pub samples_used: usize,
    pub reason: Option<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckOptions {
    pub n_boundary: usize,
    pub n_interior: usize,
    pub margin_tol: f64,
}

impl Default for CheckOptions {
    fn default() -> Self {
        CheckOptions { n_boundary: 64, n_interior: 9, margin_tol: DEFAULT_MARGIN_TOL }
    }
}

/// Sample parameters: the boundary loop (counter-clockwise from `(0,0)`), the
/// centre line `v = 1/2` and an interior grid.
#[derive(Clone, Debug)]
pub(crate) struct SamplePlan {
    m: usize,
    nc: usize,
    uv: Vec<(f64, f64)>,
}

impl SamplePlan {
    pub(crate) fn new(n_boundary: usize, n_interior: usize) -> Result<Self> {
        if n_boundary < 64 {
            return domain(format!("nBoundary must be at least 64, got {n_boundary}"));
        }
        let mut m = n_boundary.div_ceil(4);
        m += m % 2;
        let s = |k: usize| k as f64 / m as f64;
        let mut uv = Vec::new();
        (0..m).for_each(|k| uv.push((s(k), 0.0)));
        (0..m).for_each(|k| uv.push((1.0, s(k))));
        (0..m).for_each(|k| uv.push((1.0 - s(k), 1.0)));
        (0..m).for_each(|k| uv.push((0.0, 1.0 - s(k))));
        let nc = m;
        (0..=nc).for_each(|k| uv.push((k as f64 / nc as f64, 0.5)));
        let ni = (n_interior as f64).sqrt().ceil() as usize;
        for a in 0..ni {
            for b in 0..ni {
                uv.push(((a as f64 + 0.5) / ni as f64, (b as f64 + 0.5) / ni as f64));
            }
        }
        Ok(SamplePlan { m, nc, uv })
    }

    fn nb(&self) -> usize {
        4 * self.m
    }

    fn center_range(&self) -> std::ops::Range<usize> {
        self.nb()..self.nb() + self.nc + 1
    }

    fn center_index(&self) -> usize {
        self.nb() + self.nc / 2
    }

    /// Loop indices of the exit edges `u = 0` (from `v = 1` down) and `u = 1`.
    fn exit_edges(&self) -> (Vec<usize>, Vec<usize>) {
        let m = self.m;
        let mut e0: Vec<usize> = (3 * m..4 * m).collect();
        e0.push(0);
        (e0, (m..=2 * m).collect())
    }

    fn points(&self, w: &Window2) -> Vec<Point> {
        self.uv.iter().map(|&(u, v)| w.point(u, v)).collect()
    }
}

fn max_second_diff(v: &[f64]) -> f64 {
    v.windows(3).map(|w| (w[0] - 2.0 * w[1] + w[2]).abs()).fold(0.0, f64::max)
}

/// Largest second difference along the four sides of the boundary loop.
fn loop_second_diff(v: &[f64], m: usize) -> f64 {
    (0..4)
        .map(|e| {
            let side: Vec<f64> = (e * m..=(e + 1) * m).map(|k| v[k % (4 * m)]).collect();
            max_second_diff(&side)
        })
        .fold(0.0, f64::max)
}

fn report(verdict: Verdict, margin: f64, degree: i32, winding: i32, n: usize, reason: Option<String>) -> AlignmentReport {
    AlignmentReport { aligned: verdict == Verdict::Aligned, verdict, margin, degree, winding, samples_used: n, reason }
}

/// Winding number of a closed polyline about `c`; `None` when `c` lies on it.
fn winding_about(pts: &[(f64, f64)], c: (f64, f64)) -> Option<i32> {
    let mut total = 0.0;
    let n = pts.len();
    for k in 0..n {
        let (a, b) = (pts[k], pts[(k + 1) % n]);
        let d = wrap_pi((b.1 - c.1).atan2(b.0 - c.0) - (a.1 - c.1).atan2(a.0 - c.0));
        if d.abs() > PI - 1e-9 {
            return None;
        }
        total += d;
    }
    Some((total / TAU).round() as i32)
}

/// Points where the polyline crosses the vertical line `u = x`, with the
/// crossing direction.
fn crossings(line: &[(f64, f64)], x: f64) -> Vec<((f64, f64), i32)> {
    let mut out = Vec::new();
    for w in line.windows(2) {
        let (a, b) = (w[0], w[1]);
        if (a.0 < x) != (b.0 < x) {
            let s = (x - a.0) / (b.0 - a.0);
            out.push(((x, a.1 + s * (b.1 - a.1)), if b.0 > a.0 { 1 } else { -1 }));
        }
    }
    out
}

/// Winding of the boundary image about each crossing of the centre-line
/// image with the target's middle line (all lifts for theta-exit targets),
/// weighted by the crossing direction.
fn crossing_winding(loop_uv: &[(f64, f64)], center_uv: &[(f64, f64)], xs: &[f64]) -> Option<i32> {
    let mut w = 0;
    for &x in xs {
        for (q, dir) in crossings(center_uv, x) {
            w += dir * winding_about(loop_uv, q)?;
        }
    }
    Some(w)
}

/// Verdict of the sufficient conditions on precomputed images of `plan`.
fn evaluate(w2: &Window2, plan: &SamplePlan, img: &[Option<Point>], margin_tol: f64) -> AlignmentReport {
    let n = img.len();
    if let Some(k) = img.iter().position(|p| p.is_none()) {
        let (u, v) = plan.uv[k];
        return report(Verdict::Inconclusive, 0.0, 0, 0, n, Some(format!("map not evaluable at ({u}, {v})")));
    }
    let pts: Vec<Point> = img.iter().map(|p| p.unwrap()).collect();
    let (m, nb) = (plan.m, plan.nb());
    let mut unresolved = None;
    let mut th = vec![0.0; nb];
    th[0] = lift_near(pts[0].1, w2.center.1);
    for k in 1..nb {
        let d = wrap_pi(pts[k].1 - pts[k - 1].1);
        if d.abs() > 0.5 * PI {
            unresolved = Some("boundary image under-resolved in theta");
        }
        th[k] = th[k - 1] + d;
    }
    let closure = th[nb - 1] + wrap_pi(pts[0].1 - pts[nb - 1].1) - th[0];
    if closure.abs() > PI {
        return report(Verdict::NotAligned, 0.0, 0, 0, n, Some("boundary image winds around the annulus".into()));
    }
    let cr = plan.center_range();
    let mid0 = 3 * m + m / 2;
    let mut thc = vec![lift_near(pts[cr.start].1, th[mid0])];
    for k in cr.clone().skip(1) {
        let d = wrap_pi(pts[k].1 - pts[k - 1].1);
        if d.abs() > 0.5 * PI {
            unresolved = Some("centre-line image under-resolved in theta");
        }
        thc.push(thc.last().unwrap() + d);
    }
    let mid1 = m + m / 2;
    let shift = TAU * ((thc.last().unwrap() - th[mid1]) / TAU).round();

    let uv_loop: Vec<(f64, f64)> = (0..nb).map(|k| w2.coords_raw(pts[k].0, th[k])).collect();
    let uv_center: Vec<(f64, f64)> = cr.clone().zip(&thc).map(|(k, &t)| w2.coords_raw(pts[k].0, t)).collect();

    // (E) the image avoids the entry edges
    let clear_v = |v: f64| v.min(1.0 - v);
    let mut e_raw = uv_loop.iter().map(|p| clear_v(p.1)).fold(f64::INFINITY, f64::min);
    e_raw = uv_center.iter().map(|p| clear_v(p.1)).fold(e_raw, f64::min);
    for p in &pts[cr.end..] {
        e_raw = e_raw.min(clear_v(w2.coords(*p).1));
    }
    let vs: Vec<f64> = uv_loop.iter().map(|p| p.1).collect();
    let e_corr = 0.5 * loop_second_diff(&vs, m);

    // (X) the exit edges map beyond the target, on opposite sides
    let (e0, e1) = plan.exit_edges();
    let u0: Vec<f64> = e0.iter().map(|&k| uv_loop[k].0).collect();
    let u1: Vec<f64> = e1.iter().map(|&k| w2.coords_raw(pts[k].0, th[k] + shift).0).collect();
    let a0 = uv_center[0].0;
    let a1 = uv_center.last().unwrap().0;
    let x_corr = 0.5 * max_second_diff(&u0).max(max_second_diff(&u1));
    let (lo0, hi0) = (u0.iter().cloned().fold(f64::INFINITY, f64::min), u0.iter().cloned().fold(f64::NEG_INFINITY, f64::max));
    let (lo1, hi1) = (u1.iter().cloned().fold(f64::INFINITY, f64::min), u1.iter().cloned().fold(f64::NEG_INFINITY, f64::max));
    let (x0, x1, degree, winding) = match w2.exit {
        Axis::J => {
            let side = |a: f64, lo: f64, hi: f64| {
                if a < 0.0 {
                    -hi
                } else if a > 1.0 {
                    lo - 1.0
                } else {
                    -a.min(1.0 - a)
                }
            };
            let deg = if a0 < 0.0 && a1 > 1.0 {
                1
            } else if a0 > 1.0 && a1 < 0.0 {
                -1
            } else {
                0
            };
            let w = crossing_winding(&uv_loop, &uv_center, &[0.5]);
            (side(a0, lo0, hi0), side(a1, lo1, hi1), deg, w)
        }
        Axis::Theta => {
            let p = w2.u_period();
            let gap = |a: f64, lo: f64, hi: f64| -> (f64, i64) {
                let k = (a / p).floor();
                let r = a - k * p;
                if r <= 1.0 {
                    (-r.min(1.0 - r), k as i64)
                } else {
                    ((lo - (k * p + 1.0)).min((k + 1.0) * p - hi), k as i64)
                }
            };
            let (c0, k0) = gap(a0, lo0, hi0);
            let (c1, k1) = gap(a1, lo1, hi1);
            let lo = uv_center.iter().map(|q| q.0).fold(f64::INFINITY, f64::min);
            let hi = uv_center.iter().map(|q| q.0).fold(f64::NEG_INFINITY, f64::max);
            let xs: Vec<f64> = ((lo / p).floor() as i64 - 1..=(hi / p).ceil() as i64 + 1).map(|k| 0.5 + k as f64 * p).collect();
            let w = crossing_winding(&uv_loop, &uv_center, &xs);
            (c0, c1, (k1 - k0) as i32, w)
        }
    };
    // orientation of the image frame at the centre
    let du = (uv_center[uv_center.len() - 1].0 - uv_center[0].0, uv_center[uv_center.len() - 1].1 - uv_center[0].1);
    let dv = (uv_loop[2 * m + m / 2].0 - uv_loop[m / 2].0, uv_loop[2 * m + m / 2].1 - uv_loop[m / 2].1);
    let orientation = if du.0 * dv.1 - du.1 * dv.0 < 0.0 { -1 } else { 1 };
    let winding = match winding {
        Some(w) => w * orientation,
        None => 0,
    };
    let raw = e_raw.min(x0).min(x1);
    let margin = (e_raw - e_corr).min(x0 - x_corr).min(x1 - x_corr);
    if raw <= 0.0 {
        let why = if e_raw <= 0.0 { "image meets an entry edge" } else { "exit edge image meets the target window" };
        return report(Verdict::NotAligned, margin, degree, winding, n, Some(why.into()));
    }
    if degree == 0 {
        return report(Verdict::NotAligned, margin, 0, winding, n, Some("exit edges map to the same side: degree 0".into()));
    }
    if let Some(why) = unresolved {
        return report(Verdict::Inconclusive, margin, degree, winding, n, Some(why.into()));
    }
    if margin < margin_tol {
        return report(
            Verdict::Inconclusive,
            margin,
            degree,
            winding,
            n,
            Some(format!("sampling margin {margin:.3e} below {margin_tol:e}")),
        );
    }
    report(Verdict::Aligned, margin, degree, winding, n, None)
}

fn sample_images<F>(plan: &SamplePlan, w1: &Window2, map: &F) -> Vec<Option<Point>>
where
    F: Fn(Point) -> Result<Point> + Sync,
{
    plan.points(w1).par_iter().map(|&p| map((p.0, model::wrap_angle(p.1))).ok()).collect()
}

/// Is `w1` correctly aligned with `w2` under `map`? Uses the default margin tolerance.
pub fn check_alignment<F>(w1: &Window2, w2: &Window2, map: F, n_boundary: usize, n_interior: usize) -> Result<AlignmentReport>
where
    F: Fn(Point) -> Result<Point> + Sync,
{
    check_alignment_with(w1, w2, map, &CheckOptions { n_boundary, n_interior, margin_tol: DEFAULT_MARGIN_TOL })
}

pub fn check_alignment_with<F>(w1: &Window2, w2: &Window2, map: F, opts: &CheckOptions) -> Result<AlignmentReport>
where
    F: Fn(Point) -> Result<Point> + Sync,
{
    let plan = SamplePlan::new(opts.n_boundary, opts.n_interior)?;
    let img = sample_images(&plan, w1, &map);
    Ok(evaluate(w2, &plan, &img, opts.margin_tol))
}

/// The integrable shear `(J, theta) -> (J, theta + 2 pi n rho(J))` with
/// `rho(J) = rho0 + twist J` in turns.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Shear {
    pub rho0: f64,
    pub twist: f64,
    pub n: u32,
}

impl Shear {
    pub fn rho(&self, j: f64) -> f64 {
        self.rho0 + self.twist * j
    }

    fn advance(&self, j: f64) -> f64 {
        TAU * self.n as f64 * self.rho(j)
    }

    pub fn apply(&self, p: Point) -> Point {
        (p.0, model::wrap_angle(p.1 + self.advance(p.0)))
    }

    fn apply_unwrapped(&self, p: Point) -> Point {
        (p.0, p.1 + self.advance(p.0))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShearPredicate {
    pub aligned: bool,
    pub degree: i32,
}

/// Exact alignment predicate for the shear and unskewed windows: the image is
/// affine in the parameters, so corners and edge midpoints decide it.
pub fn shear_predicate(w1: &Window2, w2: &Window2, f: &Shear) -> Result<ShearPredicate> {
    if w1.skew != (0.0, 0.0) || w2.skew != (0.0, 0.0) {
        return domain("shear predicate needs unskewed windows");
    }
    let img = |u: f64, v: f64| {
        let q = f.apply_unwrapped(w1.point(u, v));
        w2.coords_raw(q.0, q.1)
    };
    let corners = [img(0.0, 0.0), img(1.0, 0.0), img(1.0, 1.0), img(0.0, 1.0)];
    let inside = |x: f64| x > 0.0 && x < 1.0;
    let no = ShearPredicate { aligned: false, degree: 0 };
    match w2.exit {
        Axis::J => {
            let pv = PI / w2.half.1;
            let k = ((0.5 - img(0.5, 0.5).1) / pv).round();
            if !corners.iter().all(|c| inside(c.1 + k * pv)) {
                return Ok(no);
            }
            let side = |a: f64, b: f64| {
                if a < 0.0 && b < 0.0 {
                    -1
                } else if a > 1.0 && b > 1.0 {
                    1
                } else {
                    0
                }
            };
            let s0 = side(corners[0].0, corners[3].0);
            let s1 = side(corners[1].0, corners[2].0);
            let degree = if s0 != 0 && s1 != 0 { (s1 - s0) / 2 } else { 0 };
            Ok(ShearPredicate { aligned: degree != 0, degree })
        }
        Axis::Theta => {
            if !corners.iter().all(|c| inside(c.1)) {
                return Ok(no);
            }
            let p = w2.u_period();
            let gap = |a: f64, b: f64| -> Option<i64> {
                let k = (a / p).floor();
                let same = (b / p).floor() == k;
                (same && a - k * p > 1.0 && b - k * p > 1.0).then_some(k as i64)
            };
            match (gap(corners[0].0, corners[3].0), gap(corners[1].0, corners[2].0)) {
                (Some(k0), Some(k1)) => {
                    let degree = (k1 - k0) as i32;
                    Ok(ShearPredicate { aligned: degree != 0, degree })
                }
                _ => Ok(no),
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Target {
    Circle { j: f64 },
    /// Orbit of rotation number `rho` with initial action in `bracket`.
    Rotation { rho: f64, bracket: (f64, f64) },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Connector {
    Inner { n: usize },
    Scattering { branch: Branch, tau_center: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Link {
    pub from: usize,
    pub connector: Connector,
    pub report: AlignmentReport,
    /// Transit time of the centre and its range over the samples.
    pub transit_center: f64,
    pub transit: (f64, f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetVisit {
    pub target: Target,
    /// Action of the target object on the section.
    pub j: f64,
    pub window: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Itinerary {
    pub params: Params,
    pub pert: Pert,
    pub graph: NhimApprox,
    pub shoot: ShootConfig,
    pub windows: Vec<Window2>,
    pub links: Vec<Link>,
    pub targets: Vec<TargetVisit>,
}

impl Itinerary {
    pub fn min_margin(&self) -> f64 {
        self.links.iter().map(|l| l.report.margin).fold(f64::INFINITY, f64::min)
    }

    pub fn max_diameter(&self) -> f64 {
        self.windows.iter().map(|w| w.diameter()).fold(0.0, f64::max)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ItineraryConfig {
    /// Half-width in `J` of the first window; `eps / 4` when unset.
    pub h_j: Option<f64>,
    pub h_theta: f64,
    /// Angle of the first window; chosen for the largest predicted shift when unset.
    pub theta0: Option<f64>,
    pub n_boundary: usize,
    pub n_interior: usize,
    pub margin_tol: f64,
    pub max_windows: usize,
    pub branches: Vec<Branch>,
    pub shoot: ShootConfig,
    /// Iterates per rotation-number estimate for rotation targets.
    pub rotation_iterates: usize,
}

impl Default for ItineraryConfig {
    fn default() -> Self {
        ItineraryConfig {
            h_j: None,
            h_theta: 0.1,
            theta0: None,
            n_boundary: 64,
            n_interior: 9,
            margin_tol: DEFAULT_MARGIN_TOL,
            max_windows: 400,
            branches: vec![Branch::Plus, Branch::Minus],
            shoot: ShootConfig::default(),
            rotation_iterates: 400,
        }
    }
}

/// Section action of a target object.
pub fn resolve_target(params: &Params, pert: &Pert, g: &NhimApprox, t: &Target, theta0: f64, n: usize) -> Result<f64> {
    let jmax = params.j_max();
    match *t {
        Target::Circle { j } => {
            if !(j > 0.0 && j < jmax) {
                return domain(format!("target circle J = {j} outside (0, {jmax})"));
            }
            Ok(j)
        }
        Target::Rotation { rho, bracket: (lo, hi) } => {
            if !(lo > 0.0 && hi < jmax && lo < hi) {
                return domain(format!("rotation bracket ({lo}, {hi}) not inside (0, {jmax})"));
            }
            if g.exact && (params.eps == 0.0 || pert.keeps_sphere_exact()) {
                let f = |j: f64| section::integrable_rotation(params, j).unwrap_or(f64::NAN) - rho;
                let (mut a, mut b) = (lo, hi);
                let (fa, fb) = (f(a), f(b));
                if !(fa * fb < 0.0) {
                    return domain(format!("rotation number {rho} not attained in ({lo}, {hi})"));
                }
                for _ in 0..200 {
                    let c = 0.5 * (a + b);
                    if (f(c) < 0.0) == (fa < 0.0) {
                        a = c;
                    } else {
                        b = c;
                    }
                    if b - a < 1e-15 * jmax {
                        break;
                    }
                }
                Ok(0.5 * (a + b))
            } else {
                let map = SectionMap::new(*params, pert).with_graph(g);
                Ok(section::target_rotation_orbit(&map, rho, (lo, hi), theta0, n)?.point.j)
            }
        }
    }
}

/// Channel `(branch, tau*, dir * dJ)` with the largest predicted shift in direction `dir`.
fn best_channel(params: &Params, pert: &Pert, p: Point, dir: f64, branches: &[Branch]) -> Result<Option<(Branch, f64, f64)>> {
    let mut best: Option<(Branch, f64, f64)> = None;
    for &br in branches {
        let shifts = match melnikov::scattering_shifts(params, pert, p.0, model::wrap_angle(p.1), 0.0, br, params.eps) {
            Ok(s) => s,
            Err(Error::NoCriticalPoint(_)) | Err(Error::Degenerate(_)) => continue,
            Err(e) => return Err(e),
        };
        for s in shifts {
            let gain = dir * s.reduced;
            if best.map_or(true, |b| gain > b.2) {
                best = Some((br, s.tau_star, gain));
            }
        }
    }
    Ok(best.filter(|b| b.2 > 0.0))
}

fn lstsq_frame(plan: &SamplePlan, c: Point, img: &[(f64, f64)]) -> Matrix2<f64> {
    let mut xtx = Matrix2::zeros();
    let mut ytx = Matrix2::zeros();
    for (&(u, v), &(j, t)) in plan.uv.iter().zip(img) {
        let x = nalgebra::Vector2::new(2.0 * u - 1.0, 2.0 * v - 1.0);
        let y = nalgebra::Vector2::new(j - c.0, t - c.1);
        xtx += x * x.transpose();
        ytx += y * x.transpose();
    }
    ytx * xtx.try_inverse().unwrap_or_else(Matrix2::identity)
}

/// Next window of a chain: the image of `w1` under a near-identity map,
/// linearized, shrunk along the exit direction and grown along the entry
/// direction until the sampled conditions hold with twice the tolerance.
fn fit_successor(w1: &Window2, plan: &SamplePlan, img: &[Point], tol: f64) -> Result<Window2> {
    let ci = plan.center_index();
    let c = (img[ci].0, lift_near(img[ci].1, w1.center.1));
    let lifted: Vec<Point> = img.iter().map(|p| (p.0, lift_near(p.1, c.1))).collect();
    let a = lstsq_frame(plan, c, &lifted);
    let pre = Window2::from_vectors(c, (a[(0, 0)], a[(1, 0)]), (a[(0, 1)], a[(1, 1)]))?;
    let xy: Vec<(f64, f64)> = lifted
        .iter()
        .map(|p| {
            let (u, v) = pre.coords_raw(p.0, p.1);
            (2.0 * u - 1.0, 2.0 * v - 1.0)
        })
        .collect();
    let (e0, e1) = plan.exit_edges();
    let x0: Vec<f64> = e0.iter().map(|&k| xy[k].0).collect();
    let x1: Vec<f64> = e1.iter().map(|&k| xy[k].0).collect();
    let s = x1.iter().sum::<f64>().signum();
    let xmin = x1.iter().map(|x| s * x).chain(x0.iter().map(|x| -s * x)).fold(f64::INFINITY, f64::min);
    let xcorr = 0.5 * max_second_diff(&x0).max(max_second_diff(&x1));
    let alpha = (xmin - 2.0 * xcorr) / (1.0 + 8.0 * tol);
    let ys: Vec<f64> = xy[..plan.nb()].iter().map(|p| p.1).collect();
    let ymax = xy.iter().map(|p| p.1.abs()).fold(0.0, f64::max);
    let beta = (ymax + loop_second_diff(&ys, plan.m)) * (1.0 + 8.0 * tol);
    if !(alpha > 0.0) {
        return Err(Error::Convergence("image does not stretch across its linearization".into()));
    }
    let (ex, en) = ((a[(0, 0)], a[(1, 0)]), (a[(0, 1)], a[(1, 1)]));
    Window2::from_vectors(c, (alpha * ex.0, alpha * ex.1), (beta * en.0, beta * en.1))
}

/// Chain of J-exit windows joined by scattering links from the first target
/// to the last; every link is checked before it is accepted.
pub fn build_itinerary(params: &Params, pert: &Pert, g: &NhimApprox, targets: &[Target], cfg: &ItineraryConfig) -> Result<Itinerary> {
    if targets.is_empty() {
        return domain("no targets");
    }
    let eps = params.eps;
    let hj = cfg.h_j.unwrap_or(eps / 4.0);
    let theta_probe = cfg.theta0.unwrap_or(0.0);
    let js: Vec<f64> = targets
        .iter()
        .map(|t| resolve_target(params, pert, g, t, theta_probe, cfg.rotation_iterates))
        .collect::<Result<_>>()?;
    let dirs: Vec<f64> = js.windows(2).map(|w| (w[1] - w[0]).signum()).collect();
    if dirs.iter().any(|&d| d == 0.0) || dirs.windows(2).any(|d| d[0] != d[1]) {
        return domain("targets must be ordered strictly monotonically in J");
    }
    let base = Itinerary {
        params: *params,
        pert: pert.clone(),
        graph: g.clone(),
        shoot: cfg.shoot,
        windows: vec![],
        links: vec![],
        targets: vec![],
    };
    if targets.len() == 1 {
        let hj = if hj > 0.0 { hj } else { 1e-3 * params.j_max() };
        let w = Window2::new((js[0], cfg.theta0.unwrap_or(0.0)), (hj, cfg.h_theta), Axis::J)?;
        return Ok(Itinerary {
            windows: vec![w],
            targets: vec![TargetVisit { target: targets[0], j: js[0], window: 0 }],
            ..base
        });
    }
    let (jlo, jhi) = (js[0].min(js[js.len() - 1]), js[0].max(js[js.len() - 1]));
    let grid: Vec<f64> = (0..5).map(|k| jlo + (jhi - jlo) * k as f64 / 4.0).collect();
    let cov = melnikov::coverage_report(params, pert, eps, &grid, 8, 2)?;
    if let Some(row) = cov.iter().find(|r| !r.both_signs()) {
        return domain(format!(
            "no scattering channel can cross invariant circles: shifts of both signs missing at J = {:.6}",
            row.i1
        ));
    }
    let dir = dirs[0];
    let theta0 = match cfg.theta0 {
        Some(t) => t,
        None => {
            let mut best = (0.0, f64::NEG_INFINITY);
            for k in 0..72 {
                let t = TAU * k as f64 / 72.0;
                if let Some((_, _, gain)) = best_channel(params, pert, (js[0], t), dir, &cfg.branches)? {
                    if gain > best.1 {
                        best = (t, gain);
                    }
                }
            }
            best.0
        }
    };
    let plan = SamplePlan::new(cfg.n_boundary, cfg.n_interior)?;
    let mut windows = vec![Window2::new((js[0], theta0), (hj, cfg.h_theta), Axis::J)?];
    let mut links = Vec::new();
    let mut visits = vec![TargetVisit { target: targets[0], j: js[0], window: 0 }];
    let mut next = 1;
    while next < js.len() {
        let w = *windows.last().unwrap();
        let k = windows.len() - 1;
        if w.straddles(js[next]) {
            visits.push(TargetVisit { target: targets[next], j: js[next], window: k });
            next += 1;
            continue;
        }
        if (js[next] - w.center.0) * dir < 0.0 {
            return Err(Error::Convergence(format!("window {k} stepped past target {next} without straddling it")));
        }
        if windows.len() >= cfg.max_windows {
            return Err(Error::Convergence(format!("itinerary exceeds {} windows before target {next}", cfg.max_windows)));
        }
        let (branch, tau, _) = best_channel(params, pert, w.center, dir, &cfg.branches)?
            .ok_or_else(|| Error::Convergence(format!("no channel moves J from window {k}")))?;
        let map = |p: Point| manifold::section_scattering_timed(params, pert, g, p.0, p.1, branch, tau, &cfg.shoot);
        let raw: Vec<Result<(f64, f64, f64)>> =
            plan.points(&w).par_iter().map(|&p| map((p.0, model::wrap_angle(p.1)))).collect();
        let mut img = Vec::with_capacity(raw.len());
        let mut times = Vec::with_capacity(raw.len());
        for r in raw {
            let (j, t, dt) = r.map_err(|e| Error::Convergence(format!("link {k} -> {}: scattering map failed: {e}", k + 1)))?;
            img.push((j, t));
            times.push(dt);
        }
        let w2 = fit_successor(&w, &plan, &img, cfg.margin_tol)
            .map_err(|e| Error::Convergence(format!("link {k} -> {}: {e}", k + 1)))?;
        let opt: Vec<Option<Point>> = img.iter().map(|&p| Some(p)).collect();
        let rep = evaluate(&w2, &plan, &opt, cfg.margin_tol);
        if !rep.aligned {
            return Err(Error::Convergence(format!(
                "link {k} -> {} {:?}: {}",
                k + 1,
                rep.verdict,
                rep.reason.clone().unwrap_or_default()
            )));
        }
        let tc = times[plan.center_index()];
        let tr = times.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |a, &t| (a.0.min(t), a.1.max(t)));
        links.push(Link { from: k, connector: Connector::Scattering { branch, tau_center: tau }, report: rep, transit_center: tc, transit: tr });
        windows.push(w2);
    }
    Ok(Itinerary { windows, links, targets: visits, ..base })
}

/// `n` returns of the inner map with the total return time.
pub fn inner_iterate(params: &Params, pert: &Pert, g: &NhimApprox, p: Point, n: usize, shoot: &ShootConfig) -> Result<(f64, f64, f64)> {
    if g.exact && (params.eps == 0.0 || pert.keeps_sphere_exact()) {
        let i2 = params.i2_on_sphere(p.0).ok_or_else(|| Error::Domain("J beyond the sphere".into()))?;
        let (_, w2) = params.omega(p.0, i2);
        let t = n as f64 * TAU / w2;
        let b = melnikov::inner_flow(params, &Base { i1: p.0, phi1: p.1, phi2: 0.0 }, t)?;
        return Ok((b.i1, model::wrap_angle(b.phi1), t));
    }
    let map = SectionMap::new(*params, pert).with_graph(g).with_tol(shoot.tol());
    let mut sp = map.embed(p.0, p.1)?;
    let mut t = 0.0;
    for _ in 0..n {
        let s = map.step(&sp)?;
        t += s.time;
        sp = s.point;
    }
    Ok((sp.j, sp.theta, t))
}

fn link_step(it: &Itinerary, c: &Connector, p: Point, shoot: &ShootConfig) -> Result<(f64, f64, f64)> {
    match *c {
        Connector::Inner { n } => inner_iterate(&it.params, &it.pert, &it.graph, p, n, shoot),
        Connector::Scattering { branch, tau_center } => {
            manifold::section_scattering_timed(&it.params, &it.pert, &it.graph, p.0, p.1, branch, tau_center, shoot)
        }
    }
}

/// Checked inner-map link from `w1` to `w2` with return times over the samples.
pub fn inner_link(it: &Itinerary, from: usize, to: &Window2, n: usize, opts: &CheckOptions) -> Result<Link> {
    let w1 = it.windows.get(from).ok_or_else(|| Error::Domain(format!("no window {from}")))?;
    let plan = SamplePlan::new(opts.n_boundary, opts.n_interior)?;
    let c = Connector::Inner { n };
    let raw: Vec<Option<(f64, f64, f64)>> =
        plan.points(w1).par_iter().map(|&p| link_step(it, &c, (p.0, model::wrap_angle(p.1)), &it.shoot).ok()).collect();
    let img: Vec<Option<Point>> = raw.iter().map(|r| r.map(|(j, t, _)| (j, t))).collect();
    let rep = evaluate(to, &plan, &img, opts.margin_tol);
    let times: Vec<f64> = raw.iter().flatten().map(|r| r.2).collect();
    let tc = raw[plan.center_index()].map_or(f64::NAN, |r| r.2);
    let tr = times.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |a, &t| (a.0.min(t), a.1.max(t)));
    Ok(Link { from, connector: c, report: rep, transit_center: tc, transit: tr })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchOutcome {
    /// Exit parameter of the candidate on the centre line of the first window.
    pub u: f64,
    pub points: Vec<Point>,
    pub full_pass: bool,
    /// Index of the last window the candidate orbit entered.
    pub deepest: usize,
    /// Number of nested sub-interval refinements performed.
    pub depth_used: usize,
}

pub type SectionFn<'a> = dyn Fn(Point) -> Result<Point> + Sync + 'a;

struct Probe {
    points: Vec<Point>,
    /// First window not entered.
    fail: Option<usize>,
}

fn probe(windows: &[Window2], maps: &[&SectionFn<'_>], u: f64, upto: usize) -> Probe {
    let mut p = windows[0].point(u, 0.5);
    p.1 = model::wrap_angle(p.1);
    let mut points = vec![p];
    for k in 1..=upto {
        match maps[k - 1](p) {
            Ok(q) if q.0.is_finite() && q.1.is_finite() => {
                p = q;
                points.push(q);
                if !windows[k].contains(q) {
                    return Probe { points, fail: Some(k) };
                }
            }
            _ => return Probe { points, fail: Some(k) },
        }
    }
    Probe { points, fail: None }
}

/// Exit parameter of the level-`f` image, lifted near `reference` for theta-exit windows.
fn level_u(windows: &[Window2], pr: &Probe, f: usize, reference: Option<f64>) -> Option<f64> {
    let q = *pr.points.get(f)?;
    let w = &windows[f];
    let u = w.coords(q).0;
    match (w.exit, reference) {
        (Axis::Theta, Some(r)) => {
            let p = w.u_period();
            Some(u + p * ((r - u) / p).round())
        }
        _ => Some(u),
    }
}

/// Sub-interval of `[lo, hi]` whose level-`f` image runs across window `f`.
fn bracket(windows: &[Window2], maps: &[&SectionFn<'_>], f: usize, lo: f64, hi: f64) -> Option<(f64, f64)> {
    let per = match windows[f].exit {
        Axis::Theta => windows[f].u_period(),
        Axis::J => 0.0,
    };
    let (mut lo, mut hi) = (lo, hi);
    for _ in 0..8 {
        let k = 64;
        let us: Vec<f64> = (0..=k).map(|i| lo + (hi - lo) * i as f64 / k as f64).collect();
        let probes: Vec<Probe> = us.par_iter().map(|&u| probe(windows, maps, u, f)).collect();
        if !probes.iter().all(|p| p.points.len() > f && p.fail.map_or(true, |x| x >= f)) {
            return None;
        }
        let mut g: Vec<f64> = Vec::with_capacity(probes.len());
        for p in &probes {
            let prev = g.last().copied();
            g.push(level_u(windows, p, f, prev)?);
        }
        let copy = |x: f64| if per > 0.0 { (x / per).floor() } else { 0.0 };
        let pos = |x: f64, kc: f64| x - kc * per;
        let inside = |x: f64, kc: f64| (0.0..=1.0).contains(&pos(x, kc));
        let mut i = 1;
        while i < g.len() {
            let kc = copy(g[i]);
            if !(inside(g[i], kc) && !inside(g[i - 1], kc)) {
                i += 1;
                continue;
            }
            let mut j = i;
            while j + 1 < g.len() && inside(g[j + 1], kc) {
                j += 1;
            }
            if j + 1 >= g.len() {
                break;
            }
            if (pos(g[i - 1], kc) < 0.0) != (pos(g[j + 1], kc) < 0.0) {
                let ins = |x: f64| inside(x, kc);
                let a = refine_edge(windows, maps, f, (us[i - 1], g[i - 1]), (us[i], g[i]), &ins);
                let b = refine_edge(windows, maps, f, (us[j + 1], g[j + 1]), (us[j], g[j]), &ins);
                return Some((a.min(b), a.max(b)));
            }
            i = j + 1;
        }
        // the strip may sit between two samples: zoom on a pair that jumps across it
        let jump = (1..g.len()).find(|&i| {
            let (a, b) = (g[i - 1].min(g[i]), g[i - 1].max(g[i]));
            let kc = if per > 0.0 { copy(a) + 1.0 } else { 0.0 };
            let kc = if per > 0.0 && pos(a, copy(a)) < 0.0 { copy(a) } else { kc };
            pos(a, kc) < 0.0 && pos(b, kc) > 1.0
        })?;
        lo = us[jump - 1];
        hi = us[jump];
    }
    None
}

/// Bisection between an outside and an inside parameter; returns the inside
/// end of the final bracket.
fn refine_edge(
    windows: &[Window2],
    maps: &[&SectionFn<'_>],
    f: usize,
    out: (f64, f64),
    inn: (f64, f64),
    inside: &dyn Fn(f64) -> bool,
) -> f64 {
    let (mut o, mut i) = (out, inn);
    for _ in 0..48 {
        let mu = 0.5 * (o.0 + i.0);
        if mu == o.0 || mu == i.0 {
            break;
        }
        let p = probe(windows, maps, mu, f);
        let g = match level_u(windows, &p, f, Some(0.5 * (o.1 + i.1))) {
            Some(g) if p.points.len() > f && p.fail.map_or(true, |x| x >= f) => g,
            _ => break,
        };
        if inside(g) {
            i = (mu, g);
        } else {
            o = (mu, g);
        }
    }
    i.0
}

/// Nested subdivision along the exit coordinate of the first window for a
/// point whose orbit under `maps` enters every window in turn.
pub fn shadowing_search(windows: &[Window2], maps: &[&SectionFn<'_>], search_depth: usize) -> Result<SearchOutcome> {
    if windows.is_empty() || maps.len() + 1 != windows.len() {
        return domain("need one map per consecutive window pair");
    }
    let n = maps.len();
    let mut u = 0.5;
    let mut pr = probe(windows, maps, u, n);
    let mut deepest = pr.fail.map_or(n, |f| f - 1);
    let (mut lo, mut hi) = (0.0, 1.0);
    let mut depth = 0;
    // levels whose strip [lo, hi] already runs across
    let mut nested = 0;
    'search: while let Some(f) = pr.fail {
        if nested >= f {
            break;
        }
        for k in nested + 1..=f {
            if depth >= search_depth {
                break 'search;
            }
            depth += 1;
            match bracket(windows, maps, k, lo, hi) {
                Some((a, b)) => {
                    lo = a;
                    hi = b;
                    nested = k;
                }
                None => break 'search,
            }
        }
        u = 0.5 * (lo + hi);
        pr = probe(windows, maps, u, n);
        deepest = deepest.max(pr.fail.map_or(n, |f| f - 1));
    }
    Ok(SearchOutcome { u, full_pass: pr.fail.is_none(), points: pr.points, deepest, depth_used: depth })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Witness {
    pub start: Point,
    pub state: SectionPoint,
    pub points: Vec<Point>,
    pub visit_times: Vec<f64>,
    pub full_pass: bool,
    pub deepest: usize,
    pub depth_used: usize,
    /// Every window entered again at tenfold tighter integration tolerances.
    pub revalidated: Option<bool>,
    /// Largest window diameter.
    pub delta: f64,
    pub target_windows: Vec<usize>,
}

/// Shadowing witness of an itinerary: an initial condition in the first
/// window whose orbit under the link maps enters every window.
pub fn verify_shadowing(it: &Itinerary, search_depth: usize) -> Result<Witness> {
    if it.windows.is_empty() || it.links.len() + 1 != it.windows.len() {
        return domain("itinerary needs one link per consecutive window pair");
    }
    let closures: Vec<Box<SectionFn<'_>>> = it
        .links
        .iter()
        .map(|l| {
            let c = l.connector;
            Box::new(move |p: Point| link_step(it, &c, p, &it.shoot).map(|(j, t, _)| (j, t))) as Box<SectionFn<'_>>
        })
        .collect();
    let maps: Vec<&SectionFn<'_>> = closures.iter().map(|b| b.as_ref()).collect();
    let out = shadowing_search(&it.windows, &maps, search_depth)?;
    let start = out.points[0];
    let mut times = vec![0.0];
    let mut revalidated = None;
    if out.full_pass {
        let mut p = start;
        for l in &it.links {
            let (j, t, dt) = link_step(it, &l.connector, p, &it.shoot)?;
            p = (j, t);
            times.push(times.last().unwrap() + dt);
        }
        // The shooting match target is a Newton threshold, not an integration
        // tolerance; its roundoff floor sits near 1e-9 on long chains.
        let tight = ShootConfig { rel_tol: it.shoot.rel_tol / 10.0, abs_tol: it.shoot.abs_tol / 10.0, ..it.shoot };
        let mut p = start;
        let mut ok = true;
        for (k, l) in it.links.iter().enumerate() {
            match link_step(it, &l.connector, p, &tight) {
                Ok((j, t, _)) if it.windows[k + 1].contains((j, t)) => p = (j, t),
                _ => {
                    ok = false;
                    break;
                }
            }
        }
        revalidated = Some(ok);
    }
    let state = section::section_embed(&it.params, &it.pert, start.0, start.1)?;
    Ok(Witness {
        start,
        state,
        points: out.points,
        visit_times: times,
        full_pass: out.full_pass,
        deepest: out.deepest,
        depth_used: out.depth_used,
        revalidated,
        delta: it.max_diameter(),
        target_windows: it.targets.iter().map(|t| t.window).collect(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowWindow {
    pub window: Window2,
    /// Flow-time interval `[t1, t2]` of the product window.
    pub time: (f64, f64),
    /// Integer time `n'` of the outgoing link and the nesting margin
    /// `h - max |T(z) - n'|`; absent for the last window.
    pub n_prime: Option<i64>,
    pub nesting_margin: Option<f64>,
}

/// Flow-box product windows `R x [-h, h]` and the time-one nesting check
/// `t1 + n' < t1'`, `t2' < t2 + n'` for every link.
pub fn thicken_to_flow_windows(it: &Itinerary, half_time: f64) -> Result<Vec<FlowWindow>> {
    if !(half_time > 0.0 && half_time.is_finite()) {
        return domain(format!("flow-box half time must be positive, got {half_time}"));
    }
    let mut out: Vec<FlowWindow> = it
        .windows
        .iter()
        .map(|w| FlowWindow { window: *w, time: (-half_time, half_time), n_prime: None, nesting_margin: None })
        .collect();
    for l in &it.links {
        let np = l.transit_center.round();
        let dev = (l.transit.0 - np).abs().max((l.transit.1 - np).abs());
        let margin = half_time - dev;
        if !(margin > 0.0) {
            return Err(Error::Domain(format!(
                "time-interval nesting violated on link {} -> {}: transit {:?} vs n' = {np}",
                l.from,
                l.from + 1,
                l.transit
            )));
        }
        out[l.from].n_prime = Some(np as i64);
        out[l.from].nesting_margin = Some(margin);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelParams;
    use proptest::prelude::*;

    fn rect(j: f64, t: f64, hj: f64, ht: f64, exit: Axis) -> Window2 {
        Window2::new((j, t), (hj, ht), exit).unwrap()
    }

    fn shear_pair() -> (Window2, Window2, Shear) {
        let f = Shear { rho0: 0.6, twist: 0.44, n: 150 };
        let w1 = rect(0.1, 1.0, 0.01, 0.05, Axis::J);
        let c = f.apply(w1.center);
        (w1, rect(c.0, c.1, 0.015, 0.05, Axis::Theta), f)
    }

    #[test]
    fn frame_roundtrip() {
        let w = Window2::skewed((0.1, 6.2), (0.01, 0.2), Axis::J, (0.3, -0.1)).unwrap();
        for &(u, v) in &[(0.0, 0.0), (0.3, 0.9), (1.0, 0.5)] {
            let p = w.point(u, v);
            let (a, b) = w.coords((p.0, model::wrap_angle(p.1)));
            assert!((a - u).abs() < 1e-12 && (b - v).abs() < 1e-12);
        }
        assert!(w.contains((0.1, 0.05)));
        assert!(Window2::new((0.1, 0.0), (0.0, 0.1), Axis::J).is_err());
        assert!(Window2::skewed((0.1, 0.0), (0.01, 0.1), Axis::Theta, (0.1, 0.0)).is_err());
    }

    #[test]
    fn one_dimensional_stretch() {
        let w = rect(0.1, 1.0, 0.01, 0.1, Axis::J);
        let map = |p: Point| {
            let (u, v) = w.coords(p);
            Ok(w.point(3.0 * u - 1.0, 0.5 + 0.5 * (v - 0.5)))
        };
        let r = check_alignment(&w, &w, map, 64, 9).unwrap();
        assert_eq!(r.verdict, Verdict::Aligned);
        assert_eq!(r.degree, 1);
        assert_eq!(r.winding, 1);
        assert!(r.margin > 0.2);
    }

    #[test]
    fn shear_wraps_across() {
        let (w1, w2, f) = shear_pair();
        let r = check_alignment(&w1, &w2, |p| Ok(f.apply(p)), 64, 9).unwrap();
        assert_eq!(r.verdict, Verdict::Aligned, "{r:?}");
        assert!(r.degree.abs() >= 1);
        assert_eq!(r.degree, r.winding);
        assert_eq!(shear_predicate(&w1, &w2, &f).unwrap(), ShearPredicate { aligned: true, degree: r.degree });
    }

    #[test]
    fn identity_is_not_aligned() {
        let w = rect(0.1, 1.0, 0.01, 0.1, Axis::J);
        let r = check_alignment(&w, &w, Ok, 64, 9).unwrap();
        assert_eq!(r.verdict, Verdict::NotAligned);
        assert!(!r.aligned);
        assert!(check_alignment(&w, &w, Ok, 32, 9).is_err());
    }

    #[test]
    fn failing_map_is_inconclusive() {
        let (w1, w2, f) = shear_pair();
        let r = check_alignment(&w1, &w2, |p| if p.0 > 0.109 { domain("off") } else { Ok(f.apply(p)) }, 64, 9).unwrap();
        assert_eq!(r.verdict, Verdict::Inconclusive);
    }

    fn random_pair(rng_vals: &[f64]) -> (Window2, Window2, Shear) {
        let r = |k: usize| rng_vals[k];
        let f = Shear { rho0: 0.5 + 0.2 * r(0), twist: 0.2 + 0.4 * r(1), n: 1 + (r(2) * 300.0) as u32 };
        let e1 = if r(3) < 0.5 { Axis::J } else { Axis::Theta };
        let e2 = if r(4) < 0.5 { Axis::J } else { Axis::Theta };
        let w1 = rect(0.1 + 0.05 * r(5), TAU * r(6), 0.001 + 0.01 * r(7), 0.01 + 0.2 * r(8), e1);
        let c = f.apply(w1.center);
        let w2 = rect(
            c.0 + 0.01 * (r(9) - 0.5),
            c.1 + 0.4 * (r(10) - 0.5),
            0.001 + 0.015 * r(11),
            0.01 + 0.3 * r(12),
            e2,
        );
        (w1, w2, f)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(256))]
        #[test]
        fn no_false_positive_on_shear(v in proptest::collection::vec(0.0f64..1.0, 13)) {
            let (w1, w2, f) = random_pair(&v);
            let r = check_alignment(&w1, &w2, |p| Ok(f.apply(p)), 64, 9).unwrap();
            let truth = shear_predicate(&w1, &w2, &f).unwrap();
            if r.aligned {
                prop_assert!(truth.aligned, "{r:?} {w1:?} {w2:?} {f:?}");
                prop_assert_eq!(r.degree, truth.degree);
                prop_assert_eq!(r.degree, r.winding);
                prop_assert!(r.margin > 0.0 && r.degree != 0);
            }
        }

        #[test]
        fn refinement_never_flips_aligned(v in proptest::collection::vec(0.0f64..1.0, 13), k in 0.0f64..2e-3) {
            let (w1, w2, f) = random_pair(&v);
            let map = |p: Point| {
                let j = p.0 + k * p.1.sin();
                Ok(f.apply((j, p.1)))
            };
            let mut seen_aligned = false;
            for nb in [64, 128, 256, 512] {
                let r = check_alignment(&w1, &w2, map, nb, 9).unwrap();
                if seen_aligned {
                    prop_assert!(r.verdict != Verdict::NotAligned, "flipped at {nb}");
                }
                seen_aligned |= r.aligned;
            }
        }
    }

    #[test]
    fn shear_predicate_mix() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let (mut yes, mut no) = (0, 0);
        for _ in 0..400 {
            let v: Vec<f64> = (0..13).map(|_| rng.gen()).collect();
            let (w1, w2, f) = random_pair(&v);
            if shear_predicate(&w1, &w2, &f).unwrap().aligned {
                yes += 1;
            } else {
                no += 1;
            }
        }
        assert!(yes > 20 && no > 20, "{yes} {no}");
    }

    fn shear_chain() -> (Vec<Window2>, Shear, Shear) {
        let (w0, w1, f) = shear_pair();
        let g = Shear { rho0: 0.6, twist: 0.44, n: 1 };
        let c = g.apply(w1.center);
        let w2 = rect(c.0, c.1 + 0.007, 0.02, 0.001, Axis::Theta);
        (vec![w0, w1, w2], f, g)
    }

    #[test]
    fn shear_chain_witness() {
        let (ws, f, g) = shear_chain();
        let r = check_alignment(&ws[1], &ws[2], |p| Ok(g.apply(p)), 64, 9).unwrap();
        assert!(r.aligned, "{r:?}");
        let ff = |p: Point| Ok(f.apply(p));
        let gg = |p: Point| Ok(g.apply(p));
        let maps: Vec<&SectionFn<'_>> = vec![&ff, &gg];
        let out = shadowing_search(&ws, &maps, 30).unwrap();
        assert!(out.full_pass, "{out:?}");
        assert!(out.depth_used >= 1 && out.depth_used <= 30);
        let p0 = ws[0].point(out.u, 0.5);
        let p1 = f.apply(p0);
        let p2 = g.apply(p1);
        assert!(ws[0].contains(p0) && ws[1].contains(p1) && ws[2].contains(p2));
    }

    #[test]
    fn search_reports_partial_pass() {
        let (mut ws, f, g) = shear_chain();
        ws[2] = rect(0.3, 1.0, 0.01, 0.01, Axis::J);
        let ff = |p: Point| Ok(f.apply(p));
        let gg = |p: Point| Ok(g.apply(p));
        let maps: Vec<&SectionFn<'_>> = vec![&ff, &gg];
        let out = shadowing_search(&ws, &maps, 30).unwrap();
        assert!(!out.full_pass);
        assert_eq!(out.deepest, 1);
    }

    fn unperturbed() -> (Params, Pert, NhimApprox) {
        let p = ModelParams::default();
        (p, Pert::none(), NhimApprox::flat(&p))
    }

    #[test]
    fn single_target_itinerary() {
        let (p, pert, g) = unperturbed();
        let cfg = ItineraryConfig { h_j: Some(1e-3), ..Default::default() };
        let it = build_itinerary(&p, &pert, &g, &[Target::Circle { j: 0.05 }], &cfg).unwrap();
        assert_eq!(it.windows.len(), 1);
        assert!(it.links.is_empty());
        let w = verify_shadowing(&it, 10).unwrap();
        assert_eq!(w.points.len(), 1);
        assert!((w.start.0 - 0.05).abs() < 1e-15);
        assert_eq!(w.visit_times, vec![0.0]);
        assert!(w.full_pass);
    }

    #[test]
    fn integrable_obstruction() {
        let (p, _, g) = unperturbed();
        let pert = Pert::two_harmonic();
        let cfg = ItineraryConfig { h_j: Some(1e-3), ..Default::default() };
        let e = build_itinerary(&p, &pert, &g, &[Target::Circle { j: 0.05 }, Target::Circle { j: 0.06 }], &cfg).unwrap_err();
        assert!(e.to_string().contains("no scattering channel"), "{e}");
    }

    #[test]
    fn rotation_target_resolves() {
        let (p, pert, g) = unperturbed();
        let jm = p.j_max();
        let rho = section::integrable_rotation(&p, 0.4 * jm).unwrap();
        let j = resolve_target(&p, &pert, &g, &Target::Rotation { rho, bracket: (0.3 * jm, 0.6 * jm) }, 0.0, 100).unwrap();
        assert!((j - 0.4 * jm).abs() < 1e-12);
    }

    #[test]
    fn flow_boxes_nest_at_unperturbed_return_time() {
        let (p, pert, g) = unperturbed();
        let cfg = ItineraryConfig { h_j: Some(2e-3), h_theta: 0.05, theta0: Some(1.0), ..Default::default() };
        let mut it = build_itinerary(&p, &pert, &g, &[Target::Circle { j: 0.08 }], &cfg).unwrap();
        let opts = CheckOptions::default();
        for k in 0..3 {
            let w = it.windows[k];
            let (j, t, _) = inner_iterate(&p, &pert, &g, w.center, 1, &it.shoot).unwrap();
            let next = rect(j, t, 0.95 * w.half.0, w.half.1 + 0.02, Axis::J);
            let link = inner_link(&it, k, &next, 1, &opts).unwrap();
            assert!(link.report.aligned, "{:?}", link.report);
            it.windows.push(next);
            it.links.push(link);
        }
        let fw = thicken_to_flow_windows(&it, 1.0).unwrap();
        assert_eq!(fw.len(), 4);
        let i2 = p.i2_on_sphere(0.08).unwrap();
        let period = TAU / p.omega(0.08, i2).1;
        for (k, w) in fw.iter().take(3).enumerate() {
            assert_eq!(w.n_prime, Some(period.round() as i64), "link {k}");
            assert!(w.nesting_margin.unwrap() >= 0.5);
        }
        assert!(thicken_to_flow_windows(&it, 0.0).is_err());
        assert!(thicken_to_flow_windows(&it, 0.01).is_err());
        let wit = verify_shadowing(&it, 10).unwrap();
        assert!(wit.full_pass && wit.revalidated == Some(true));
        assert!((wit.visit_times[3] - 3.0 * period).abs() < 1e-3);
    }

    #[test]
    fn itinerary_json_roundtrip() {
        let (p, pert, g) = unperturbed();
        let cfg = ItineraryConfig { h_j: Some(1e-3), ..Default::default() };
        let it = build_itinerary(&p, &pert, &g, &[Target::Circle { j: 0.05 }], &cfg).unwrap();
        let s = serde_json::to_string(&it).unwrap();
        let back: Itinerary = serde_json::from_str(&s).unwrap();
        assert_eq!(back.windows, it.windows);
    }
}
