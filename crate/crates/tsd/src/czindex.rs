//! Conley-Zehnder index of periodic orbits on the star-shaped level of the
//! restricted oscillator system.
//!
//! The linearized flow is projected onto the contact planes and written in
//! the quaternionic frame `{j z, k z}`; the index then follows from the
//! winding interval of the resulting arc in `Sp(1)`.

use nalgebra::{Matrix4, Vector4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::integrate::{integrate_orbit, OrbitRecord, Stepper, Tolerances, Variational};
use crate::model::{self, PhaseState};
use crate::{Float, Params, Pert};

pub type Mat2<T> = [[T; 2]; 2];

/// Smallest admissible `|lambda - 1|` over the spectrum of `Phi(T)`.
pub const NONDEGENERACY_GAP: f64 = 1e-8;
/// Largest admissible raw determinant drift of a reduced arc.
pub const DET_DRIFT_TOL: f64 = 1e-8;
/// An integer this close to an endpoint of the winding interval counts as inside.
pub const INTEGER_SNAP: f64 = 1e-9;

const MAX_REFINE: u32 = 12;

fn mat_mul<T: Float>(a: &Mat2<T>, b: &Mat2<T>) -> Mat2<T> {
    let mut c = [[T::zero(); 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            c[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j];
        }
    }
    c
}

fn det<T: Float>(a: &Mat2<T>) -> T {
    a[0][0] * a[1][1] - a[0][1] * a[1][0]
}

fn identity<T: Float>() -> Mat2<T> {
    [[T::one(), T::zero()], [T::zero(), T::one()]]
}

fn lerp<T: Float>(a: &Mat2<T>, b: &Mat2<T>, x: T) -> Mat2<T> {
    let mut c = *a;
    for i in 0..2 {
        for j in 0..2 {
            c[i][j] = a[i][j] + (b[i][j] - a[i][j]) * x;
        }
    }
    c
}

/// Scale to unit determinant.
fn normalize_det<T: Float>(a: &Mat2<T>) -> Result<Mat2<T>> {
    let d = det(a);
    if !(d > T::zero()) {
        return Err(Error::Degenerate(format!("non-positive determinant {d} in a symplectic arc")));
    }
    let s = d.sqrt().recip();
    Ok([[a[0][0] * s, a[0][1] * s], [a[1][0] * s, a[1][1] * s]])
}

/// Time-sampled arc `Phi: [0, T] -> Sp(1)` with `Phi(0) = id`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SymplecticArc<T> {
    pub times: Vec<T>,
    pub matrices: Vec<Mat2<T>>,
    /// Largest `|det Phi(t) - 1|` before renormalization.
    pub det_drift: T,
}

impl<T: Float> SymplecticArc<T> {
    /// Arc from samples; `matrices[0]` is replaced by the identity after
    /// checking it is one, the rest are scaled to unit determinant.
    pub fn new(times: Vec<T>, matrices: Vec<Mat2<T>>) -> Result<Self> {
        if times.len() < 2 || times.len() != matrices.len() {
            return domain("an arc needs at least two samples and one matrix per time");
        }
        if times.windows(2).any(|w| !(w[1] > w[0])) {
            return domain("arc times must increase strictly");
        }
        let id = identity::<T>();
        let tol = T::lit(1e-12).max(T::epsilon() * T::lit(16.0));
        let m0 = &matrices[0];
        if (0..2).any(|i| (0..2).any(|j| (m0[i][j] - id[i][j]).abs() > tol)) {
            return domain("arc must start at the identity");
        }
        let mut drift = T::zero();
        let mut out = Vec::with_capacity(matrices.len());
        out.push(id);
        for m in &matrices[1..] {
            drift = drift.max((det(m) - T::one()).abs());
            out.push(normalize_det(m)?);
        }
        Ok(SymplecticArc { times, matrices: out, det_drift: drift })
    }

    pub fn period(&self) -> T {
        self.times[self.times.len() - 1] - self.times[0]
    }

    pub fn end(&self) -> &Mat2<T> {
        &self.matrices[self.matrices.len() - 1]
    }

    /// Rotation by `2 pi rho t / T` sampled at `n + 1` points.
    pub fn rotation(rho: T, period: T, n: usize) -> Result<Self> {
        Self::sampled(period, n, |x| {
            let a = T::TAU() * rho * x;
            let (s, c) = a.sin_cos();
            [[c, -s], [s, c]]
        })
    }

    /// `diag(e^{mu t}, e^{-mu t})` on `[0, T]`.
    pub fn hyperbolic(mu: T, period: T, n: usize) -> Result<Self> {
        Self::sampled(period, n, |x| {
            let e = (mu * period * x).exp();
            [[e, T::zero()], [T::zero(), e.recip()]]
        })
    }

    fn sampled(period: T, n: usize, f: impl Fn(T) -> Mat2<T>) -> Result<Self> {
        if n < 1 || !(period > T::zero()) {
            return domain("need a positive period and at least one interval");
        }
        let nt = T::from_usize(n).unwrap();
        let times: Vec<T> = (0..=n).map(|k| period * T::from_usize(k).unwrap() / nt).collect();
        let mut mats: Vec<Mat2<T>> = (0..=n).map(|k| f(T::from_usize(k).unwrap() / nt)).collect();
        mats[0] = identity();
        Self::new(times, mats)
    }

    /// Linearized flow of the periodic Hamiltonian `S(t)`, `Phi' = J S Phi`,
    /// by classical RK4 with `substeps` steps per output interval.
    pub fn from_hamiltonian_loop(s: impl Fn(T) -> Mat2<T>, period: T, n: usize, substeps: usize) -> Result<Self> {
        if n < 1 || substeps < 1 || !(period > T::zero()) {
            return domain("need a positive period and at least one step");
        }
        let rhs = |t: T, m: &Mat2<T>| -> Mat2<T> {
            let a = s(t);
            // J = [[0, -1], [1, 0]]
            let js = [[-a[1][0], -a[1][1]], [a[0][0], a[0][1]]];
            mat_mul(&js, m)
        };
        let add = |m: &Mat2<T>, k: &Mat2<T>, h: T| -> Mat2<T> {
            let mut r = *m;
            for i in 0..2 {
                for j in 0..2 {
                    r[i][j] += k[i][j] * h;
                }
            }
            r
        };
        let h = period / T::from_usize(n * substeps).unwrap();
        let half = T::lit(0.5);
        let sixth = T::lit(1.0 / 6.0);
        let mut m = identity::<T>();
        let mut t = T::zero();
        let mut times = vec![T::zero()];
        let mut mats = vec![m];
        for k in 1..=n {
            for _ in 0..substeps {
                let k1 = rhs(t, &m);
                let k2 = rhs(t + half * h, &add(&m, &k1, half * h));
                let k3 = rhs(t + half * h, &add(&m, &k2, half * h));
                let k4 = rhs(t + h, &add(&m, &k3, h));
                for i in 0..2 {
                    for j in 0..2 {
                        m[i][j] += h * sixth * (k1[i][j] + T::lit(2.0) * (k2[i][j] + k3[i][j]) + k4[i][j]);
                    }
                }
                t += h;
            }
            m = normalize_det(&m)?;
            times.push(period * T::from_usize(k).unwrap() / T::from_usize(n).unwrap());
            mats.push(m);
        }
        Self::new(times, mats)
    }

    /// `other` run after `self`: `Phi(t) = other(t - T1) self(T1)` past `T1`.
    pub fn catenate(&self, other: &Self) -> Result<Self> {
        let t1 = *self.times.last().unwrap();
        let a = *self.end();
        let mut times = self.times.clone();
        let mut mats = self.matrices.clone();
        let o0 = other.times[0];
        for (t, m) in other.times.iter().zip(&other.matrices).skip(1) {
            times.push(t1 + (*t - o0));
            mats.push(mat_mul(m, &a));
        }
        let mut arc = Self::new(times, mats)?;
        arc.det_drift = arc.det_drift.max(self.det_drift).max(other.det_drift);
        Ok(arc)
    }

    /// `k`-fold iterate of a periodic arc.
    pub fn iterate(&self, k: usize) -> Result<Self> {
        if k == 0 {
            return domain("iterate count must be positive");
        }
        let mut arc = self.clone();
        for _ in 1..k {
            arc = arc.catenate(self)?;
        }
        Ok(arc)
    }
}

/// Smallest `|lambda - 1|` over the eigenvalues of a real `2 x 2` matrix.
pub fn spectrum_gap<T: Float>(m: &Mat2<T>) -> T {
    let half = T::lit(0.5);
    let tr = m[0][0] + m[1][1];
    let disc = tr * tr * half * half - det(m);
    if disc >= T::zero() {
        let r = disc.sqrt();
        (tr * half + r - T::one()).abs().min((tr * half - r - T::one()).abs())
    } else {
        let x = tr * half - T::one();
        (x * x - disc).sqrt()
    }
}

fn angle_step<T: Float>(a: &Mat2<T>, b: &Mat2<T>, v: (T, T)) -> T {
    let u0 = (a[0][0] * v.0 + a[0][1] * v.1, a[1][0] * v.0 + a[1][1] * v.1);
    let u1 = (b[0][0] * v.0 + b[0][1] * v.1, b[1][0] * v.0 + b[1][1] * v.1);
    let tiny = T::epsilon() * T::lit(1e3);
    if u0.0.hypot(u0.1) < tiny || u1.0.hypot(u1.1) < tiny {
        return T::nan();
    }
    let cross = u0.0 * u1.1 - u0.1 * u1.0;
    let dot = u0.0 * u1.0 + u0.1 * u1.1;
    cross.atan2(dot)
}

/// Winding of `Phi(t) v` over one sample interval, refined by interpolation
/// until every sub-step turns by less than a quarter turn.
fn interval_winding<T: Float>(a: &Mat2<T>, b: &Mat2<T>, v: (T, T)) -> Option<T> {
    let limit = T::FRAC_PI_2();
    let d = angle_step(a, b, v);
    if d.abs() < limit {
        return Some(d);
    }
    for level in 1..=MAX_REFINE {
        let n = 1usize << level;
        let nt = T::from_usize(n).unwrap();
        let mut total = T::zero();
        let mut prev = *a;
        let mut ok = true;
        for k in 1..=n {
            let next = if k == n { *b } else { lerp(a, b, T::from_usize(k).unwrap() / nt) };
            let d = angle_step(&prev, &next, v);
            if !(d.abs() < limit) {
                ok = false;
                break;
            }
            total += d;
            prev = next;
        }
        if ok {
            return Some(total);
        }
    }
    None
}

/// `Delta(s)` in turns for the direction `e^{2 pi i s}`.
pub fn winding_of<T: Float>(arc: &SymplecticArc<T>, s: T) -> Result<T> {
    let (sin, cos) = (T::TAU() * s).sin_cos();
    let v = (cos, sin);
    let mut total = T::zero();
    for (k, w) in arc.matrices.windows(2).enumerate() {
        total += interval_winding(&w[0], &w[1], v).ok_or_else(|| {
            Error::Convergence(format!(
                "winding of direction s = {s} is ambiguous on [{}, {}] after maximal refinement",
                arc.times[k],
                arc.times[k + 1]
            ))
        })?;
    }
    Ok(total / T::TAU())
}

/// `[min_s Delta(s), max_s Delta(s)]` over `n_s` equally spaced directions.
pub fn winding_interval<T: Float>(arc: &SymplecticArc<T>, n_s: usize) -> Result<(T, T)> {
    if n_s < 32 {
        return domain(format!("winding interval needs at least 32 directions, got {n_s}"));
    }
    let ns = T::from_usize(n_s).unwrap();
    let mut lo = T::infinity();
    let mut hi = T::neg_infinity();
    for k in 0..n_s {
        let d = winding_of(arc, T::from_usize(k).unwrap() / ns)?;
        lo = lo.min(d);
        hi = hi.max(d);
    }
    Ok((lo, hi))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CzResult {
    pub winding_interval: (f64, f64),
    pub index: i64,
    pub nondegenerate: bool,
    pub spectrum_gap: f64,
}

/// Index rule: `2k` when an integer `k` lies in the interval, otherwise
/// `2k + 1` for the interval inside `(k, k + 1)`.
pub fn index_from_interval(lo: f64, hi: f64) -> i64 {
    let k = (lo - INTEGER_SNAP).ceil();
    if k <= hi + INTEGER_SNAP {
        2 * k as i64
    } else {
        2 * lo.floor() as i64 + 1
    }
}

/// Winding interval, index and spectral gap without the nondegeneracy check.
pub fn evaluate_cz<T: Float>(arc: &SymplecticArc<T>, n_s: usize) -> Result<CzResult> {
    let (lo, hi) = winding_interval(arc, n_s)?;
    let (lo, hi) = (lo.to_f64_lossy(), hi.to_f64_lossy());
    if hi - lo >= 0.5 + 1e-6 {
        return Err(Error::Convergence(format!("winding interval [{lo}, {hi}] is longer than 1/2")));
    }
    let gap = spectrum_gap(arc.end()).to_f64_lossy();
    Ok(CzResult {
        winding_interval: (lo, hi),
        index: index_from_interval(lo, hi),
        nondegenerate: gap >= NONDEGENERACY_GAP,
        spectrum_gap: gap,
    })
}

/// Conley-Zehnder index of a nondegenerate arc, 64 directions.
pub fn cz_index<T: Float>(arc: &SymplecticArc<T>) -> Result<CzResult> {
    let r = evaluate_cz(arc, 64)?;
    if !r.nondegenerate {
        return Err(Error::Degenerate(format!(
            "Phi(T) has an eigenvalue within {:e} of 1",
            r.spectrum_gap
        )));
    }
    Ok(r)
}

// Real 4-vectors in (p1, q1, p2, q2); with w = q - i p the quaternion
// products of z = w1 + w2 j read as below.
fn quat_j(x: &[f64; 4]) -> [f64; 4] {
    [x[2], -x[3], -x[0], x[1]]
}

fn quat_k(x: &[f64; 4]) -> [f64; 4] {
    [x[3], x[2], -x[1], -x[0]]
}

fn dot4(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn restricted_field(params: &Params, pert: &Pert, x: &[f64; 4]) -> ([f64; 4], [f64; 4]) {
    let full = PhaseState::with_osc(*x, 0.0, 0.0).to_array();
    let mut f = [0.0; 6];
    model::rhs(params, pert, &full, &mut f);
    let xh = [f[0], f[1], f[2], f[3]];
    // grad H = (dH/dp, dH/dq) = (qdot, -pdot)
    let grad = [f[1], -f[0], f[3], -f[2]];
    (xh, grad)
}

fn restricted_energy(params: &Params, pert: &Pert, x: &[f64; 4]) -> f64 {
    model::energy_unchecked(params, pert, &PhaseState::with_osc(*x, 0.0, 0.0))
}

/// Tangent frame of the level through `x`, radially over `{j z, k z}`.
fn contact_frame(params: &Params, pert: &Pert, x: &[f64; 4]) -> Result<Matrix4<f64>> {
    let (xh, n) = restricted_field(params, pert, x);
    let nx = dot4(&n, x);
    if !(nx > 0.0) {
        return Err(Error::Degenerate(format!("level not transverse to the radial direction (x . grad H = {nx:e})")));
    }
    let mut cols = [[0.0; 4]; 4];
    for (c, v) in [quat_j(x), quat_k(x)].iter().enumerate() {
        let coef = dot4(&n, v) / nx;
        for i in 0..4 {
            cols[c][i] = v[i] - coef * x[i];
        }
    }
    cols[2] = xh;
    cols[3] = n;
    Ok(Matrix4::from_fn(|i, j| cols[j][i]))
}

fn check_restricted(pert: &Pert) -> Result<()> {
    for t in &pert.terms {
        let (gp, gq) = t.factor.grad(0.0, 0.0);
        if gp != 0.0 || gq != 0.0 {
            return domain(format!("perturbation factor {:?} does not leave the pendulum rest point invariant", t.factor));
        }
    }
    Ok(())
}

/// Ray-transversality test of `{H = c}` for the restricted system: every
/// ray meets the level once, with `x . grad H > 0` there.
pub fn check_star_shaped(params: &Params, pert: &Pert, c: f64, n_dirs: usize, seed: u64) -> Result<()> {
    if !(c > 0.0) {
        return domain(format!("energy level c = {c} must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_r = 64;
    for _ in 0..n_dirs {
        let mut u = [0.0f64; 4];
        loop {
            for v in &mut u {
                *v = rng.gen_range(-1.0..1.0);
            }
            let nn = dot4(&u, &u);
            if nn > 1e-4 && nn <= 1.0 {
                let s = nn.sqrt();
                u.iter_mut().for_each(|v| *v /= s);
                break;
            }
        }
        let h = |r: f64| restricted_energy(params, pert, &u.map(|v| v * r)) - c;
        let mut hi = 1.0;
        let mut grow = 0;
        while h(hi) <= 0.0 {
            hi *= 2.0;
            grow += 1;
            if grow > 60 {
                return domain(format!("ray {u:?} never reaches the level {c}"));
            }
        }
        let (mut a, mut b) = (0.0, hi);
        for _ in 0..80 {
            let m = 0.5 * (a + b);
            if h(m) > 0.0 {
                b = m;
            } else {
                a = m;
            }
        }
        let r = 0.5 * (a + b);
        let mut prev = h(0.0);
        for k in 1..=n_r {
            let v = h(r * 1.25 * k as f64 / n_r as f64);
            if k as f64 / n_r as f64 * 1.25 < 0.999 && v > 0.0 {
                return domain(format!("ray {u:?} meets the level more than once"));
            }
            if v < prev - 1e-14 * (1.0 + c) {
                return domain(format!("energy decreases along the ray {u:?}"));
            }
            prev = v;
        }
        let x = u.map(|v| v * r);
        let (_, n) = restricted_field(params, pert, &x);
        if !(dot4(&n, &x) > 0.0) {
            return domain(format!("ray {u:?} is tangent to the level"));
        }
    }
    Ok(())
}

/// Time-grid size used by [`reduce_to_contact_arc`].
pub fn default_arc_samples(period: f64) -> usize {
    256.max((period * 48.0).ceil() as usize)
}

/// Linearized restricted flow along a closed orbit on `{H = c}`, projected
/// onto the contact planes in the quaternionic frame.
pub fn reduce_to_contact_arc(params: &Params, pert: &Pert, orbit: &OrbitRecord<f64>, c: f64) -> Result<SymplecticArc<f64>> {
    let period = orbit.times.last().copied().unwrap_or(0.0) - orbit.times.first().copied().unwrap_or(0.0);
    reduce_to_contact_arc_with(params, pert, orbit, c, default_arc_samples(period))
}

pub fn reduce_to_contact_arc_with(
    params: &Params,
    pert: &Pert,
    orbit: &OrbitRecord<f64>,
    c: f64,
    n_samples: usize,
) -> Result<SymplecticArc<f64>> {
    if orbit.times.len() < 2 {
        return domain("periodic orbit record is empty");
    }
    if n_samples < 2 {
        return domain("need at least two arc samples");
    }
    check_restricted(pert)?;
    let t0 = orbit.times[0];
    let period = orbit.times[orbit.times.len() - 1] - t0;
    if !(period > 0.0) {
        return domain("periodic orbit needs a positive period");
    }
    let first = orbit.states[0];
    let last = orbit.states[orbit.states.len() - 1];
    if first.p[2] != 0.0 || first.q[2] != 0.0 {
        return domain("periodic orbit must lie on the pendulum rest point p3 = q3 = 0");
    }
    let x0 = first.osc();
    let gap: f64 = first.to_array().iter().zip(last.to_array()).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let scale = 1.0 + dot4(&x0, &x0).sqrt();
    if gap > 1e-9 * scale {
        return domain(format!("orbit does not close: |x(T) - x(0)| = {gap:e}"));
    }
    let h = restricted_energy(params, pert, &x0);
    if (h - c).abs() > 1e-8 * (1.0 + c.abs()) {
        return domain(format!("orbit energy {h} is not on the level c = {c}"));
    }
    check_star_shaped(params, pert, c, 64, 0x5eed)?;

    let sys = Variational { params, pert };
    let mut y0 = vec![0.0; 42];
    y0[..6].copy_from_slice(&first.to_array());
    for k in 0..6 {
        y0[6 + 7 * k] = 1.0;
    }
    let tol = Tolerances::new(1e-13, 1e-14);
    let mut st = Stepper::new(&sys, 0.0, &y0, period, tol)?;
    let frame0 = contact_frame(params, pert, &x0)?;
    let r0 = dot4(&x0, &x0).sqrt();
    let e0: [[f64; 4]; 2] = [0, 1].map(|c| [0, 1, 2, 3].map(|i| frame0[(i, c)]));

    let times: Vec<f64> = (0..=n_samples).map(|k| period * k as f64 / n_samples as f64).collect();
    let mut mats = Vec::with_capacity(times.len());
    mats.push(identity::<f64>());
    let mut next = 1;
    let mut y = vec![0.0; 42];
    while next < times.len() {
        st.step()?;
        let seg = st.dense();
        while next < times.len() && (times[next] <= st.t || st.finished() && next == times.len() - 1) {
            let t = times[next].min(st.t);
            if next == times.len() - 1 && st.finished() {
                y.copy_from_slice(&st.y);
            } else {
                seg.eval_into(t, &mut y);
            }
            mats.push(project(params, pert, &y, &e0, r0)?);
            next += 1;
        }
    }
    SymplecticArc::new(times, mats)
}

fn project(params: &Params, pert: &Pert, y: &[f64], e0: &[[f64; 4]; 2], r0: f64) -> Result<Mat2<f64>> {
    let x = [y[0], y[1], y[2], y[3]];
    let frame = contact_frame(params, pert, &x)?;
    let lu = frame.lu();
    let scale = frame.abs().max();
    if lu.determinant().abs() <= 1e-12 * scale.powi(4) {
        return Err(Error::Degenerate("contact frame lost rank".into()));
    }
    // column-major 6 x 6 fundamental matrix after the state
    let phi = |row: usize, col: usize| y[6 + 6 * col + row];
    let mut m = [[0.0; 2]; 2];
    for (c, e) in e0.iter().enumerate() {
        let w = Vector4::from_fn(|i, _| (0..4).map(|k| phi(i, k) * e[k]).sum());
        let coef = lu.solve(&w).ok_or_else(|| Error::Degenerate("contact frame lost rank".into()))?;
        m[0][c] = coef[0];
        m[1][c] = coef[1];
    }
    let s = dot4(&x, &x).sqrt() / r0;
    Ok([[m[0][0] * s, m[0][1] * s], [m[1][0] * s, m[1][1] * s]])
}

/// One of the critical circles of the restricted system: `chi^1` has
/// `I2 = 0`, `chi^2` has `I1 = 0`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Circle {
    Chi1,
    Chi2,
}

impl Circle {
    pub fn id(self) -> &'static str {
        match self {
            Circle::Chi1 => "chi1",
            Circle::Chi2 => "chi2",
        }
    }
}

/// `covers`-fold traversal of a critical circle at level `c`, integrated
/// from `phi = 0`. Needs a perturbation that vanishes on the circle.
pub fn critical_orbit(params: &Params, pert: &Pert, c: f64, circle: Circle, covers: u32) -> Result<OrbitRecord<f64>> {
    if covers == 0 {
        return domain("cover count must be positive");
    }
    check_restricted(pert)?;
    let which = if circle == Circle::Chi1 { 1 } else { 2 };
    let i = model::critical_circle_action(params, c, which);
    let r = (2.0 * i).sqrt();
    let x = match circle {
        Circle::Chi1 => [0.0, r, 0.0, 0.0],
        Circle::Chi2 => [0.0, 0.0, 0.0, r],
    };
    let (f, _) = restricted_field(params, pert, &x);
    let (dw1, dw2) = params.omega(if which == 1 { i } else { 0.0 }, if which == 2 { i } else { 0.0 });
    let omega = if which == 1 { dw1 } else { dw2 };
    let idx = if which == 1 { 0 } else { 2 };
    // on the circle the field must be the bare rotation
    let expect = omega * r;
    if (f[idx + 1]).abs() > 1e-12 * (1.0 + expect.abs()) || (f[idx] + expect).abs() > 1e-12 * (1.0 + expect.abs()) {
        return domain(format!("{} is not a periodic orbit of the perturbed system", circle.id()));
    }
    let period = covers as f64 * std::f64::consts::TAU / omega;
    integrate_orbit(params, pert, &PhaseState::with_osc(x, 0.0, 0.0), (0.0, period), 1e-13, 1e-15)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CzRow {
    pub id: String,
    pub period: f64,
    pub result: CzResult,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvexityReport {
    pub c: f64,
    pub rows: Vec<CzRow>,
    /// Orbits left out, with the reason.
    pub excluded: Vec<(String, String)>,
    /// Every included orbit has index at least 3.
    pub convex: bool,
    /// Whether the orbit labelled `chi1` has index exactly 3, when present.
    pub chi1_index_three: Option<bool>,
}

/// Index of each supplied orbit and the dynamical-convexity verdict.
pub fn dynamical_convexity_scan(params: &Params, pert: &Pert, c: f64, orbits: &[(String, OrbitRecord<f64>)]) -> Result<ConvexityReport> {
    check_star_shaped(params, pert, c, 256, 0xc0ffee)?;
    let out: Vec<(String, Result<CzRow>)> = orbits
        .par_iter()
        .map(|(id, orb)| {
            let r = reduce_to_contact_arc(params, pert, orb, c).and_then(|arc| {
                let res = cz_index(&arc)?;
                Ok(CzRow { id: id.clone(), period: arc.period(), result: res })
            });
            (id.clone(), r)
        })
        .collect();
    let mut rows = Vec::new();
    let mut excluded = Vec::new();
    for (id, r) in out {
        match r {
            Ok(row) => rows.push(row),
            Err(e @ Error::Degenerate(_)) => excluded.push((id, e.to_string())),
            Err(e) => return Err(e),
        }
    }
    let convex = !rows.is_empty() && rows.iter().all(|r| r.result.index >= 3);
    let chi1_index_three = rows.iter().find(|r| r.id == Circle::Chi1.id()).map(|r| r.result.index == 3);
    Ok(ConvexityReport { c, rows, excluded, convex, chi1_index_three })
}

/// Both critical circles, once around, as scan input.
pub fn critical_orbits(params: &Params, pert: &Pert, c: f64) -> Result<Vec<(String, OrbitRecord<f64>)>> {
    [Circle::Chi1, Circle::Chi2]
        .iter()
        .map(|&k| Ok((k.id().to_string(), critical_orbit(params, pert, c, k, 1)?)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::Rng;

    fn swapped() -> Params {
        Params::new(1.6, 1.0, 0.8, 0.4, 1.0, 0.2, 0.0).unwrap()
    }

    #[test]
    fn rigid_rotation_indices() {
        for (rho, mu) in [(1.0, 2), (1.3, 3), (0.5, 1), (0.2, 1), (2.0, 4)] {
            let arc = SymplecticArc::rotation(rho, 2.0, 40).unwrap();
            let (lo, hi) = winding_interval(&arc, 64).unwrap();
            assert_abs_diff_eq!(lo, rho, epsilon = 1e-12);
            assert_abs_diff_eq!(hi, rho, epsilon = 1e-12);
            assert_eq!(evaluate_cz(&arc, 64).unwrap().index, mu, "rho {rho}");
        }
    }

    #[test]
    fn degenerate_end_is_refused() {
        let arc = SymplecticArc::rotation(1.0, 1.0, 16).unwrap();
        assert!(matches!(cz_index(&arc), Err(Error::Degenerate(_))));
        let r = cz_index(&SymplecticArc::rotation(1.3, 1.0, 16).unwrap()).unwrap();
        assert!(r.nondegenerate && r.index == 3);
    }

    #[test]
    fn coarse_grid_is_refined() {
        // a quarter turn and more per sample forces subdivision
        let arc = SymplecticArc::rotation(1.3, 1.0, 4).unwrap();
        let (lo, hi) = winding_interval(&arc, 32).unwrap();
        assert_abs_diff_eq!(lo, 1.3, epsilon = 1e-12);
        assert_abs_diff_eq!(hi, 1.3, epsilon = 1e-12);
    }

    #[test]
    fn half_turn_jump_is_ambiguous() {
        let m: Mat2<f64> = [[-1.0, 0.0], [0.0, -1.0]];
        let arc = SymplecticArc::new(vec![0.0, 1.0], vec![identity(), m]).unwrap();
        assert!(winding_interval(&arc, 32).is_err());
        assert!(winding_interval(&SymplecticArc::rotation(0.3, 1.0, 8).unwrap(), 16).is_err());
    }

    #[test]
    fn hyperbolic_arc_does_not_wind() {
        let arc = SymplecticArc::hyperbolic(0.7, 3.0, 200).unwrap();
        assert_abs_diff_eq!(winding_of(&arc, 0.0).unwrap(), 0.0, epsilon = 1e-14);
        assert_abs_diff_eq!(winding_of(&arc, 0.25).unwrap(), 0.0, epsilon = 1e-14);
        let (lo, hi) = winding_interval(&arc, 128).unwrap();
        assert!(lo > -0.5 && hi < 0.5 && hi - lo < 0.5);
        let r = cz_index(&arc).unwrap();
        assert_eq!(r.index, 0);
    }

    #[test]
    fn catenation_adds_rotation() {
        let a = SymplecticArc::rotation(0.65, 1.0, 50).unwrap();
        let whole = a.catenate(&a).unwrap();
        let full = SymplecticArc::rotation(1.3, 2.0, 100).unwrap();
        let d = |arc: &SymplecticArc<f64>| winding_of(arc, 0.1).unwrap();
        assert_abs_diff_eq!(d(&whole), 2.0 * d(&a), epsilon = 1e-9);
        assert_abs_diff_eq!(d(&whole), d(&full), epsilon = 1e-9);
        assert_eq!(a.iterate(2).unwrap(), whole);
    }

    #[test]
    fn single_precision_arc() {
        let arc = SymplecticArc::<f32>::rotation(1.3, 1.0, 64).unwrap();
        let (lo, hi) = winding_interval(&arc, 32).unwrap();
        assert!((lo - 1.3).abs() < 1e-5 && (hi - 1.3).abs() < 1e-5);
        assert_eq!(evaluate_cz(&arc, 32).unwrap().index, 3);
    }

    #[test]
    fn arc_must_start_at_identity() {
        let m: Mat2<f64> = [[2.0, 0.0], [0.0, 0.5]];
        assert!(SymplecticArc::new(vec![0.0, 1.0], vec![m, m]).is_err());
        assert!(SymplecticArc::new(vec![0.0, 0.0], vec![identity(), m]).is_err());
    }

    fn random_loop(seed: u64) -> SymplecticArc<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut sym = || {
            let a: f64 = rng.gen_range(-3.0..3.0);
            let b: f64 = rng.gen_range(-3.0..3.0);
            let d: f64 = rng.gen_range(-3.0..3.0);
            [[a, b], [b, d]]
        };
        let (s0, s1, s2) = (sym(), sym(), sym());
        let s = move |t: f64| {
            let (sn, cs) = (std::f64::consts::TAU * t).sin_cos();
            let mut m = s0;
            for i in 0..2 {
                for j in 0..2 {
                    m[i][j] += s1[i][j] * cs + s2[i][j] * sn;
                }
            }
            m
        };
        SymplecticArc::from_hamiltonian_loop(s, 1.0, 64, 8).unwrap()
    }

    #[test]
    fn thousand_random_arcs_are_short() {
        let mut worst = 0.0f64;
        for seed in 0..1000 {
            let arc = random_loop(seed);
            assert!(arc.det_drift < 1e-6);
            let (lo, hi) = winding_interval(&arc, 32).unwrap();
            worst = worst.max(hi - lo);
            assert!(hi - lo < 0.5, "seed {seed}: [{lo}, {hi}]");
        }
        assert!(worst > 0.05);
    }

    proptest! {
        #[test]
        fn parity_follows_interval(seed in 0u64..100_000) {
            let arc = random_loop(seed);
            let r = evaluate_cz(&arc, 64).unwrap();
            let (lo, hi) = r.winding_interval;
            let has_int = (lo - INTEGER_SNAP).ceil() <= hi + INTEGER_SNAP;
            prop_assert_eq!(r.index % 2 == 0, has_int);
            prop_assert!(r.index as f64 >= 2.0 * lo - 1.0 - 1e-9 && r.index as f64 <= 2.0 * hi + 1.0 + 1e-9);
        }
    }

    #[test]
    fn chi2_arc_is_a_rotation() {
        let p = Params::default().with_eps(0.0);
        let pert = Pert::none();
        let c = p.c;
        let orb = critical_orbit(&p, &pert, c, Circle::Chi2, 1).unwrap();
        let arc = reduce_to_contact_arc(&p, &pert, &orb, c).unwrap();
        let i2 = model::critical_circle_action(&p, c, 2);
        let w2 = p.a2 + p.b2 * i2;
        let rate = p.a1 + w2;
        assert_eq!(arc.matrices[0], identity::<f64>());
        assert!(arc.det_drift < DET_DRIFT_TOL, "drift {:e}", arc.det_drift);
        for (t, m) in arc.times.iter().zip(&arc.matrices) {
            let (s, co) = (rate * t).sin_cos();
            let expect = [[co, -s], [s, co]];
            for i in 0..2 {
                for j in 0..2 {
                    assert_abs_diff_eq!(m[i][j], expect[i][j], epsilon = 1e-7);
                }
            }
        }
        let r = cz_index(&arc).unwrap();
        assert_abs_diff_eq!(r.winding_interval.0, 1.0 + p.a1 / w2, epsilon = 1e-9);
        assert_eq!(r.index, 3);
    }

    #[test]
    fn default_indices() {
        let p = Params::default().with_eps(0.0);
        let pert = Pert::none();
        let orbits = critical_orbits(&p, &pert, p.c).unwrap();
        let rep = dynamical_convexity_scan(&p, &pert, p.c, &orbits).unwrap();
        let idx: Vec<i64> = rep.rows.iter().map(|r| r.result.index).collect();
        assert_eq!(idx, vec![5, 3]);
        assert!(rep.convex);
        assert_eq!(rep.chi1_index_three, Some(false));
    }

    #[test]
    fn swapped_roles_give_spanning_index_three() {
        let p = swapped();
        let pert = Pert::two_harmonic();
        for c in [0.01, 0.2] {
            let orbits = critical_orbits(&p, &pert, c).unwrap();
            let rep = dynamical_convexity_scan(&p, &pert, c, &orbits).unwrap();
            assert!(rep.convex, "c = {c}");
            assert_eq!(rep.chi1_index_three, Some(true), "c = {c}");
            assert!(rep.rows[1].result.index >= 3);
            assert!(rep.excluded.is_empty());
        }
    }

    #[test]
    fn double_cover_index_grows() {
        for p in [Params::default().with_eps(0.0), swapped()] {
            let pert = Pert::none();
            let once = critical_orbit(&p, &pert, p.c, Circle::Chi1, 1).unwrap();
            let twice = critical_orbit(&p, &pert, p.c, Circle::Chi1, 2).unwrap();
            let a1 = reduce_to_contact_arc(&p, &pert, &once, p.c).unwrap();
            let a2 = reduce_to_contact_arc(&p, &pert, &twice, p.c).unwrap();
            let r1 = cz_index(&a1).unwrap();
            let r2 = cz_index(&a2).unwrap();
            let i1 = model::critical_circle_action(&p, p.c, 1);
            let delta = 1.0 + p.a2 / (p.a1 + p.b1 * i1);
            assert_abs_diff_eq!(r1.winding_interval.0, delta, epsilon = 1e-9);
            assert_abs_diff_eq!(r2.winding_interval.1, 2.0 * delta, epsilon = 1e-9);
            assert!(r2.index >= 5);
            let r3 = cz_index(&a1.iterate(2).unwrap()).unwrap();
            assert_eq!(r3.index, r2.index);
        }
    }

    #[test]
    fn grid_refinement_moves_interval_little() {
        let p = Params::default().with_eps(0.0);
        let pert = Pert::two_harmonic();
        let orb = critical_orbit(&p, &pert, p.c, Circle::Chi1, 1).unwrap();
        let n = default_arc_samples(orb.times[orb.times.len() - 1]);
        let a = reduce_to_contact_arc_with(&p, &pert, &orb, p.c, n).unwrap();
        let b = reduce_to_contact_arc_with(&p, &pert, &orb, p.c, 4 * n).unwrap();
        let ia = winding_interval(&a, 64).unwrap();
        let ib = winding_interval(&b, 64).unwrap();
        assert!((ia.0 - ib.0).abs() < 1e-6 && (ia.1 - ib.1).abs() < 1e-6);
    }

    #[test]
    fn open_orbit_is_rejected() {
        let p = Params::default().with_eps(0.0);
        let pert = Pert::none();
        let mut orb = critical_orbit(&p, &pert, p.c, Circle::Chi2, 1).unwrap();
        orb.states.pop();
        orb.times.pop();
        assert!(matches!(reduce_to_contact_arc(&p, &pert, &orb, p.c), Err(Error::Domain(_))));
    }

    #[test]
    fn forcing_terms_are_rejected() {
        let p = Params::default().with_eps(1e-3);
        let pert = Pert::none().with_term(model::Term::new(1.0, model::PendulumFactor::Sin, [0, 1, 0, 0]));
        assert!(critical_orbit(&p, &pert, p.c, Circle::Chi1, 1).is_err());
    }

    #[test]
    fn level_is_star_shaped() {
        let p = Params::default();
        check_star_shaped(&p, &Pert::two_harmonic(), p.c, 500, 1).unwrap();
        assert!(check_star_shaped(&p, &Pert::none(), -0.1, 10, 1).is_err());
    }
}
