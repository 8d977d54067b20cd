//! Adaptive Dormand-Prince 8(5,3) integration with dense output, event
//! location, variational equations and finite-time Lyapunov rates.

mod tableau;

use crate::error::{domain, Error, Result};
use crate::model::{self, ModelParams, PendulumFactor, Perturbation, PhaseState};
use crate::Float;

/// Autonomous or time-dependent first-order system on `R^n`.
pub trait OdeSystem<T: Float>: Sync {
    fn dim(&self) -> usize;
    fn eval(&self, t: T, x: &[T], out: &mut [T]);
}

impl<T: Float, F> OdeSystem<T> for (usize, F)
where
    F: Fn(T, &[T], &mut [T]) + Sync,
{
    fn dim(&self) -> usize {
        self.0
    }
    fn eval(&self, t: T, x: &[T], out: &mut [T]) {
        (self.1)(t, x, out)
    }
}

/// Hamilton's equations for `H00 + H01 + eps H1`.
pub struct Hamiltonian<'a, T> {
    pub params: &'a ModelParams<T>,
    pub pert: &'a Perturbation<T>,
}

impl<'a, T: Float> Hamiltonian<'a, T> {
    pub fn new(params: &'a ModelParams<T>, pert: &'a Perturbation<T>) -> Self {
        Hamiltonian { params, pert }
    }
}

impl<T: Float> OdeSystem<T> for Hamiltonian<'_, T> {
    fn dim(&self) -> usize {
        6
    }
    fn eval(&self, _t: T, x: &[T], out: &mut [T]) {
        model::rhs(self.params, self.pert, x, out)
    }
}

/// State plus a `6 x 6` fundamental matrix stored column-major after it.
pub struct Variational<'a, T> {
    pub params: &'a ModelParams<T>,
    pub pert: &'a Perturbation<T>,
}

impl<T: Float> OdeSystem<T> for Variational<'_, T> {
    fn dim(&self) -> usize {
        42
    }
    fn eval(&self, _t: T, x: &[T], out: &mut [T]) {
        model::rhs(self.params, self.pert, &x[..6], &mut out[..6]);
        let a = jacobian(self.params, self.pert, &x[..6]);
        for col in 0..6 {
            let v = &x[6 + 6 * col..12 + 6 * col];
            for row in 0..6 {
                let mut s = T::zero();
                for k in 0..6 {
                    s += a[row][k] * v[k];
                }
                out[6 + 6 * col + row] = s;
            }
        }
    }
}

fn factor_hessian<T: Float>(f: PendulumFactor, p3: T, q3: T) -> [[T; 2]; 2] {
    let z = T::zero();
    let _ = p3;
    match f {
        PendulumFactor::CosMinusOne => [[z, z], [z, -q3.cos()]],
        PendulumFactor::Sin => [[z, z], [z, -q3.sin()]],
        PendulumFactor::P => [[z, z], [z, z]],
        PendulumFactor::P2 => [[T::lit(2.0), z], [z, z]],
        PendulumFactor::One => [[z, z], [z, z]],
    }
}

/// Hessian of the full Hamiltonian in `(p1, q1, p2, q2, p3, q3)` ordering.
pub fn hessian<T: Float>(params: &ModelParams<T>, pert: &Perturbation<T>, x: &[T]) -> [[T; 6]; 6] {
    let mut h = [[T::zero(); 6]; 6];
    let half = T::lit(0.5);
    for (k, (a, b)) in [(params.a1, params.b1), (params.a2, params.b2)].into_iter().enumerate() {
        let (p, q) = (x[2 * k], x[2 * k + 1]);
        let w = a + b * half * (p * p + q * q);
        h[2 * k][2 * k] = w + b * p * p;
        h[2 * k + 1][2 * k + 1] = w + b * q * q;
        h[2 * k][2 * k + 1] = b * p * q;
        h[2 * k + 1][2 * k] = b * p * q;
    }
    h[4][4] = T::one();
    h[5][5] = -params.lambda * params.lambda * x[5].cos();
    if params.eps == T::zero() {
        return h;
    }
    let osc = [x[0], x[1], x[2], x[3]];
    let (p3, q3) = (x[4], x[5]);
    for t in &pert.terms {
        let f = t.factor.eval(p3, q3);
        let (fp, fq) = t.factor.grad(p3, q3);
        let fh = factor_hessian(t.factor, p3, q3);
        let m = t.monomial(&osc);
        let mg = t.monomial_grad(&osc);
        let mh = monomial_hessian(&t.exps, &osc);
        let c = t.coef * params.eps;
        for i in 0..4 {
            for j in 0..4 {
                h[i][j] += c * f * mh[i][j];
            }
            h[i][4] += c * fp * mg[i];
            h[4][i] += c * fp * mg[i];
            h[i][5] += c * fq * mg[i];
            h[5][i] += c * fq * mg[i];
        }
        h[4][4] += c * fh[0][0] * m;
        h[4][5] += c * fh[0][1] * m;
        h[5][4] += c * fh[1][0] * m;
        h[5][5] += c * fh[1][1] * m;
    }
    h
}

fn monomial_hessian<T: Float>(e: &[u32; 4], x: &[T; 4]) -> [[T; 4]; 4] {
    let mut h = [[T::zero(); 4]; 4];
    let pw = |k: usize, d: u32| -> T {
        if e[k] < d {
            return T::zero();
        }
        let mut c = T::one();
        for j in 0..d {
            c *= T::from_u32(e[k] - j).unwrap();
        }
        c * x[k].powi((e[k] - d) as i32)
    };
    for i in 0..4 {
        for j in 0..4 {
            let mut v = T::one();
            for k in 0..4 {
                let d = (i == k) as u32 + (j == k) as u32;
                v *= pw(k, d);
            }
            h[i][j] = v;
        }
    }
    h
}

/// Jacobian of the vector field, `J * Hess(H)`.
pub fn jacobian<T: Float>(params: &ModelParams<T>, pert: &Perturbation<T>, x: &[T]) -> [[T; 6]; 6] {
    let h = hessian(params, pert, x);
    let mut a = [[T::zero(); 6]; 6];
    for k in 0..3 {
        for j in 0..6 {
            a[2 * k][j] = -h[2 * k + 1][j];
            a[2 * k + 1][j] = h[2 * k][j];
        }
    }
    a
}

#[derive(Clone, Copy, Debug)]
pub struct Tolerances<T> {
    pub rel: T,
    pub abs: T,
    /// Upper bound on step length; infinite by default.
    pub max_step: T,
    pub max_steps: usize,
}

impl<T: Float> Tolerances<T> {
    pub fn new(rel: T, abs: T) -> Self {
        Tolerances { rel, abs, max_step: T::infinity(), max_steps: 5_000_000 }
    }

    pub fn tight() -> Self {
        Self::new(T::lit(1e-12), T::lit(1e-14))
    }

    pub fn scaled(&self, k: T) -> Self {
        Tolerances { rel: self.rel * k, abs: self.abs * k, ..*self }
    }

    fn validate(&self) -> Result<()> {
        let lo = T::lit(1e-14) * T::lit(0.999);
        let hi = T::lit(1e-3) * T::lit(1.001);
        if !(self.rel >= lo && self.rel <= hi) {
            return domain(format!("relative tolerance {} outside [1e-14, 1e-3]", self.rel));
        }
        if !(self.abs > T::zero() && self.abs <= hi) {
            return domain(format!("absolute tolerance {} outside (0, 1e-3]", self.abs));
        }
        Ok(())
    }
}

/// Interpolating polynomial over one accepted step.
#[derive(Clone, Debug)]
pub struct DenseSegment<T> {
    pub t_old: T,
    pub t_new: T,
    y_old: Vec<T>,
    f: Vec<Vec<T>>,
}

impl<T: Float> DenseSegment<T> {
    pub fn eval_into(&self, t: T, out: &mut [T]) {
        let h = self.t_new - self.t_old;
        let x = (t - self.t_old) / h;
        let n = self.y_old.len();
        for v in out.iter_mut().take(n) {
            *v = T::zero();
        }
        for (i, fi) in self.f.iter().rev().enumerate() {
            for k in 0..n {
                out[k] += fi[k];
                out[k] *= if i % 2 == 0 { x } else { T::one() - x };
            }
        }
        for k in 0..n {
            out[k] += self.y_old[k];
        }
    }

    pub fn eval(&self, t: T) -> Vec<T> {
        let mut out = vec![T::zero(); self.y_old.len()];
        self.eval_into(t, &mut out);
        out
    }

    pub fn contains(&self, t: T) -> bool {
        let (a, b) = if self.t_old <= self.t_new { (self.t_old, self.t_new) } else { (self.t_new, self.t_old) };
        t >= a && t <= b
    }

    pub fn y_old(&self) -> &[T] {
        &self.y_old
    }
}

/// Single-trajectory DOP853 stepper.
pub struct Stepper<'s, T: Float, S: OdeSystem<T> + ?Sized> {
    sys: &'s S,
    tol: Tolerances<T>,
    pub t: T,
    pub y: Vec<T>,
    f: Vec<T>,
    h: T,
    dir: T,
    t_bound: T,
    k: Vec<Vec<T>>,
    y_old: Vec<T>,
    t_old: T,
    h_prev: T,
    pub n_steps: usize,
    pub n_eval: usize,
}

const SAFETY: f64 = 0.9;
const MIN_FACTOR: f64 = 0.2;
const MAX_FACTOR: f64 = 10.0;

impl<'s, T: Float, S: OdeSystem<T> + ?Sized> Stepper<'s, T, S> {
    pub fn new(sys: &'s S, t0: T, y0: &[T], t_bound: T, tol: Tolerances<T>) -> Result<Self> {
        tol.validate()?;
        let n = sys.dim();
        if y0.len() != n {
            return domain("state dimension mismatch");
        }
        if y0.iter().any(|v| !v.is_finite()) || !t0.is_finite() || t_bound.is_nan() {
            return domain("non-finite initial data");
        }
        let mut f = vec![T::zero(); n];
        sys.eval(t0, y0, &mut f);
        let dir = if t_bound >= t0 { T::one() } else { -T::one() };
        let mut s = Stepper {
            sys,
            tol,
            t: t0,
            y: y0.to_vec(),
            f,
            h: T::zero(),
            dir,
            t_bound,
            k: vec![vec![T::zero(); n]; tableau::N_STAGES_EXTENDED],
            y_old: y0.to_vec(),
            t_old: t0,
            h_prev: T::zero(),
            n_steps: 0,
            n_eval: 1,
        };
        s.h = s.initial_step();
        Ok(s)
    }

    fn rms(v: &[T]) -> T {
        let n = T::from_usize(v.len()).unwrap();
        (v.iter().map(|x| *x * *x).sum::<T>() / n).sqrt()
    }

    fn initial_step(&mut self) -> T {
        let n = self.y.len();
        if self.t_bound == self.t {
            return T::zero();
        }
        let scale: Vec<T> = self.y.iter().map(|v| self.tol.abs + v.abs() * self.tol.rel).collect();
        let d0 = Self::rms(&self.y.iter().zip(&scale).map(|(a, s)| *a / *s).collect::<Vec<_>>());
        let d1 = Self::rms(&self.f.iter().zip(&scale).map(|(a, s)| *a / *s).collect::<Vec<_>>());
        let small = T::lit(1e-5);
        let h0 = if d0 < small || d1 < small { T::lit(1e-6) } else { T::lit(0.01) * d0 / d1 };
        let h0 = h0.min((self.t_bound - self.t).abs());
        let y1: Vec<T> = (0..n).map(|k| self.y[k] + self.dir * h0 * self.f[k]).collect();
        let mut f1 = vec![T::zero(); n];
        self.sys.eval(self.t + self.dir * h0, &y1, &mut f1);
        self.n_eval += 1;
        let d2 = Self::rms(&(0..n).map(|k| (f1[k] - self.f[k]) / scale[k]).collect::<Vec<_>>()) / h0;
        let h1 = if d1 <= T::lit(1e-15) && d2 <= T::lit(1e-15) {
            (T::lit(1e-6)).max(h0 * T::lit(1e-3))
        } else {
            (T::lit(0.01) / d1.max(d2)).powf(T::one() / T::lit(8.0))
        };
        (T::lit(100.0) * h0).min(h1).min(self.tol.max_step).min((self.t_bound - self.t).abs())
    }

    /// Attempt one step of signed size `h` from the current state; returns
    /// `(y_new, f_new, err_norm)`. Stage derivatives are left in `self.k`.
    fn trial(&mut self, h: T) -> (Vec<T>, Vec<T>, T) {
        let n = self.y.len();
        let mut ytmp = vec![T::zero(); n];
        self.k[0].copy_from_slice(&self.f);
        for s in 1..tableau::N_STAGES {
            for i in 0..n {
                let mut acc = T::zero();
                for j in 0..s {
                    let a = tableau::A[s][j];
                    if a != 0.0 {
                        acc += T::lit(a) * self.k[j][i];
                    }
                }
                ytmp[i] = self.y[i] + h * acc;
            }
            let (head, tail) = self.k.split_at_mut(s);
            let _ = head;
            self.sys.eval(self.t + T::lit(tableau::C[s]) * h, &ytmp, &mut tail[0]);
        }
        let mut y_new = vec![T::zero(); n];
        for i in 0..n {
            let mut acc = T::zero();
            for j in 0..tableau::N_STAGES {
                acc += T::lit(tableau::B[j]) * self.k[j][i];
            }
            y_new[i] = self.y[i] + h * acc;
        }
        let mut f_new = vec![T::zero(); n];
        self.sys.eval(self.t + h, &y_new, &mut f_new);
        self.k[tableau::N_STAGES].copy_from_slice(&f_new);
        self.n_eval += tableau::N_STAGES;

        let mut e5 = T::zero();
        let mut e3 = T::zero();
        for i in 0..n {
            let sc = self.tol.abs + self.y[i].abs().max(y_new[i].abs()) * self.tol.rel;
            let mut a5 = T::zero();
            let mut a3 = T::zero();
            for j in 0..=tableau::N_STAGES {
                a5 += T::lit(tableau::E5[j]) * self.k[j][i];
                a3 += T::lit(tableau::E3[j]) * self.k[j][i];
            }
            e5 += (a5 / sc) * (a5 / sc);
            e3 += (a3 / sc) * (a3 / sc);
        }
        let err = if e5 == T::zero() && e3 == T::zero() {
            T::zero()
        } else {
            let denom = e5 + T::lit(0.01) * e3;
            h.abs() * e5 / (denom * T::from_usize(n).unwrap()).sqrt()
        };
        (y_new, f_new, err)
    }

    pub fn finished(&self) -> bool {
        (self.t - self.t_bound) * self.dir >= T::zero()
    }

    /// Take one accepted step (not beyond `t_bound`).
    pub fn step(&mut self) -> Result<()> {
        if self.finished() {
            return Ok(());
        }
        if self.n_steps >= self.tol.max_steps {
            return Err(self.fail("maximum number of steps exceeded"));
        }
        let min_step = T::lit(10.0) * (self.t.abs().max(T::one()) * T::epsilon());
        let mut h_abs = self.h.abs().min(self.tol.max_step).max(min_step);
        let mut rejected = false;
        loop {
            if rejected && h_abs < min_step {
                return Err(self.fail("step size underflow"));
            }
            let mut h = h_abs * self.dir;
            let mut t_new = self.t + h;
            if (t_new - self.t_bound) * self.dir > T::zero() {
                t_new = self.t_bound;
            }
            h = t_new - self.t;
            h_abs = h.abs();
            let (y_new, f_new, err) = self.trial(h);
            let bad = !err.is_finite() || y_new.iter().any(|v| !v.is_finite());
            if !bad && err < T::one() {
                let factor = if err == T::zero() {
                    T::lit(MAX_FACTOR)
                } else {
                    T::lit(MAX_FACTOR).min(T::lit(SAFETY) * err.powf(-T::one() / T::lit(8.0)))
                };
                let factor = if rejected { factor.min(T::one()) } else { factor };
                self.y_old = std::mem::replace(&mut self.y, y_new);
                self.f = f_new;
                self.t_old = self.t;
                self.t = t_new;
                self.h_prev = h;
                self.h = h_abs * factor;
                self.n_steps += 1;
                return Ok(());
            }
            let shrink = if bad {
                T::lit(MIN_FACTOR)
            } else {
                T::lit(MIN_FACTOR).max(T::lit(SAFETY) * err.powf(-T::one() / T::lit(8.0)))
            };
            h_abs *= shrink;
            rejected = true;
        }
    }

    fn fail(&self, reason: &str) -> Error {
        Error::Integration {
            t: self.t.to_f64_lossy(),
            reason: reason.to_string(),
            last: self.y.iter().map(|v| v.to_f64_lossy()).collect(),
        }
    }

    /// Interpolant over the last accepted step.
    pub fn dense(&mut self) -> DenseSegment<T> {
        let n = self.y.len();
        let h = self.h_prev;
        let mut ytmp = vec![T::zero(); n];
        for s in (tableau::N_STAGES + 1)..tableau::N_STAGES_EXTENDED {
            for i in 0..n {
                let mut acc = T::zero();
                for j in 0..s {
                    let a = tableau::A[s][j];
                    if a != 0.0 {
                        acc += T::lit(a) * self.k[j][i];
                    }
                }
                ytmp[i] = self.y_old[i] + h * acc;
            }
            let (_, tail) = self.k.split_at_mut(s);
            self.sys.eval(self.t_old + T::lit(tableau::C[s]) * h, &ytmp, &mut tail[0]);
        }
        self.n_eval += 3;
        let mut f = vec![vec![T::zero(); n]; tableau::INTERPOLATOR_POWER];
        let two = T::lit(2.0);
        for i in 0..n {
            let dy = self.y[i] - self.y_old[i];
            let f_old = self.k[0][i];
            f[0][i] = dy;
            f[1][i] = h * f_old - dy;
            f[2][i] = two * dy - h * (self.f[i] + f_old);
            for r in 0..4 {
                let mut acc = T::zero();
                for j in 0..tableau::N_STAGES_EXTENDED {
                    let d = tableau::D[r][j];
                    if d != 0.0 {
                        acc += T::lit(d) * self.k[j][i];
                    }
                }
                f[3 + r][i] = h * acc;
            }
        }
        DenseSegment { t_old: self.t_old, t_new: self.t, y_old: self.y_old.clone(), f }
    }

    pub fn t_old(&self) -> T {
        self.t_old
    }

    pub fn y_old(&self) -> &[T] {
        &self.y_old
    }

    /// Advance to `t_end` exactly, without recording.
    pub fn run_to_end(&mut self) -> Result<()> {
        while !self.finished() {
            self.step()?;
        }
        Ok(())
    }
}

/// Integrate `sys` from `t0` to `t1`, returning the final state.
pub fn flow<T: Float, S: OdeSystem<T> + ?Sized>(sys: &S, t0: T, y0: &[T], t1: T, tol: Tolerances<T>) -> Result<Vec<T>> {
    if t1 == t0 {
        return Ok(y0.to_vec());
    }
    let mut st = Stepper::new(sys, t0, y0, t1, tol)?;
    st.run_to_end()?;
    Ok(st.y)
}

#[derive(Clone, Debug)]
pub struct OrbitRecord<T> {
    pub times: Vec<T>,
    pub states: Vec<PhaseState<T>>,
    pub energy_drift: T,
    /// Set when `energy_drift` exceeds the budget passed to [`integrate_orbit`].
    pub drift_flagged: bool,
    pub segments: Vec<DenseSegment<T>>,
}

impl<T: Float> OrbitRecord<T> {
    /// Dense-output state at `t`.
    pub fn at(&self, t: T) -> Option<PhaseState<T>> {
        let forward = self.times.len() < 2 || self.times[self.times.len() - 1] >= self.times[0];
        let idx = self.segments.partition_point(|s| if forward { s.t_new < t } else { s.t_new > t });
        let seg = self.segments.get(idx)?;
        if !seg.contains(t) {
            return None;
        }
        Some(PhaseState::from_array(&seg.eval(t)))
    }
}

/// Integrate Hamilton's equations over `t_span`; energy drift above
/// `100 * rel_tol * (1 + |H0|) * steps` is flagged.
pub fn integrate_orbit<T: Float>(
    params: &ModelParams<T>,
    pert: &Perturbation<T>,
    x0: &PhaseState<T>,
    t_span: (T, T),
    rel_tol: T,
    abs_tol: T,
) -> Result<OrbitRecord<T>> {
    let sys = Hamiltonian::new(params, pert);
    let tol = Tolerances::new(rel_tol, abs_tol);
    let h0 = model::energy(params, pert, x0)?;
    let mut st = Stepper::new(&sys, t_span.0, &x0.to_array(), t_span.1, tol)?;
    let mut times = vec![t_span.0];
    let mut states = vec![*x0];
    let mut segments = Vec::new();
    let mut drift = T::zero();
    while !st.finished() {
        st.step()?;
        segments.push(st.dense());
        let x = PhaseState::from_array(&st.y);
        drift = drift.max((model::energy_unchecked(params, pert, &x) - h0).abs());
        times.push(st.t);
        states.push(x);
    }
    let budget = T::lit(100.0) * rel_tol * (T::one() + h0.abs()) * T::from_usize(times.len()).unwrap();
    Ok(OrbitRecord { times, states, energy_drift: drift, drift_flagged: drift > budget, segments })
}

pub struct EventSpec<'a, T> {
    pub g: Box<dyn Fn(&PhaseState<T>) -> T + Sync + 'a>,
    /// `+1`, `-1`, or `0` for either sign of `g'`.
    pub direction: i8,
    pub refine_tol: T,
}

impl<'a, T: Float> EventSpec<'a, T> {
    pub fn new(g: impl Fn(&PhaseState<T>) -> T + Sync + 'a, direction: i8) -> Self {
        EventSpec { g: Box::new(g), direction, refine_tol: T::lit(1e-12) }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Crossing<T> {
    pub t: T,
    pub state: PhaseState<T>,
    /// `|g'|` was below `1e-10` at the root.
    pub tangential: bool,
}

/// Root of `g` along one dense segment inside `[ta, tb]` with `g(ta)`, `g(tb)` of opposite sign,
/// by Illinois bracketing followed by secant polishing.
fn refine_root<T: Float>(g: &dyn Fn(T) -> T, mut ta: T, mut tb: T, mut ga: T, mut gb: T, tol: T) -> (T, T) {
    let mut side = 0i8;
    let mut best = if ga.abs() < gb.abs() { (ta, ga) } else { (tb, gb) };
    for _ in 0..200 {
        if best.1.abs() <= tol * T::lit(0.01) {
            break;
        }
        let tm = (ta * gb - tb * ga) / (gb - ga);
        let tm = if tm.is_finite() && tm > ta.min(tb) && tm < ta.max(tb) { tm } else { T::lit(0.5) * (ta + tb) };
        let gm = g(tm);
        if gm.abs() < best.1.abs() {
            best = (tm, gm);
        }
        if gm == T::zero() {
            break;
        }
        if (gm > T::zero()) == (gb > T::zero()) {
            tb = tm;
            gb = gm;
            if side == -1 {
                ga = ga * T::lit(0.5);
            }
            side = -1;
        } else {
            ta = tm;
            ga = gm;
            if side == 1 {
                gb = gb * T::lit(0.5);
            }
            side = 1;
        }
        if (tb - ta).abs() <= T::lit(4.0) * T::epsilon() * ta.abs().max(T::one()) {
            break;
        }
    }
    best
}

fn slope<T: Float>(g: &dyn Fn(T) -> T, t: T, span: T) -> T {
    let d = span.abs() * T::lit(1e-4) + T::epsilon();
    (g(t + d) - g(t - d)) / (T::lit(2.0) * d)
}

fn sign_ok<T: Float>(ga: T, gb: T, direction: i8) -> bool {
    let up = ga < T::zero() && gb >= T::zero();
    let down = ga > T::zero() && gb <= T::zero();
    match direction {
        1 => up,
        -1 => down,
        _ => up || down,
    }
}

fn roots_in_segment<T: Float>(
    seg: &DenseSegment<T>,
    g: &dyn Fn(&[T]) -> T,
    direction: i8,
    tol: T,
    dir_time: T,
) -> Vec<(T, Vec<T>, bool)> {
    let mut out = Vec::new();
    let sub = 8;
    let span = seg.t_new - seg.t_old;
    let mut buf = vec![T::zero(); seg.y_old.len()];
    let mut gt = |t: T| -> T {
        seg.eval_into(t, &mut buf);
        g(&buf)
    };
    let mut prev_t = seg.t_old;
    let mut prev_g = g(&seg.y_old);
    for i in 1..=sub {
        let t = seg.t_old + span * T::from_usize(i).unwrap() / T::from_usize(sub).unwrap();
        let gv = gt(t);
        // orient by increasing time so that direction refers to dg/dt
        let (ga, gb) = if dir_time > T::zero() { (prev_g, gv) } else { (gv, prev_g) };
        if sign_ok(ga, gb, direction) && !(prev_g == T::zero() && i > 1) {
            let cell = std::cell::RefCell::new(vec![T::zero(); seg.y_old.len()]);
            let f = |s: T| -> T {
                let mut b = cell.borrow_mut();
                seg.eval_into(s, &mut b);
                g(&b)
            };
            let (tr, _) = refine_root(&f, prev_t, t, prev_g, gv, tol);
            let d = slope(&f, tr, span);
            let y = seg.eval(tr);
            out.push((tr, y, d.abs() < T::lit(1e-10)));
        }
        prev_t = t;
        prev_g = gv;
    }
    out
}

/// All crossings of `ev.g = 0` along a recorded orbit, in time order.
pub fn find_crossings<T: Float>(record: &OrbitRecord<T>, ev: &EventSpec<'_, T>) -> Vec<Crossing<T>> {
    let g = |x: &[T]| (ev.g)(&PhaseState::from_array(x));
    let mut out: Vec<Crossing<T>> = Vec::new();
    for seg in &record.segments {
        let dir = if seg.t_new >= seg.t_old { T::one() } else { -T::one() };
        for (t, y, tangential) in roots_in_segment(seg, &g, ev.direction, ev.refine_tol, dir) {
            if let Some(last) = out.last() {
                if (last.t - t).abs() <= T::lit(1e-12) * t.abs().max(T::one()) {
                    continue;
                }
            }
            out.push(Crossing { t, state: PhaseState::from_array(&y), tangential });
        }
    }
    out
}

/// Result of [`integrate_to_event`].
#[derive(Clone, Debug)]
pub struct EventHit<T> {
    pub t: T,
    pub y: Vec<T>,
    pub tangential: bool,
    pub steps: usize,
}

/// Integrate until the first crossing of `g` with the given direction whose time
/// differs from `t0` by more than `min_time`; `Ok(None)` if `t_max` is reached first.
#[allow(clippy::too_many_arguments)]
pub fn integrate_to_event<T: Float, S: OdeSystem<T> + ?Sized>(
    sys: &S,
    t0: T,
    y0: &[T],
    t_max: T,
    g: &dyn Fn(&[T]) -> T,
    direction: i8,
    min_time: T,
    tol: Tolerances<T>,
) -> Result<Option<EventHit<T>>> {
    let mut st = Stepper::new(sys, t0, y0, t_max, tol)?;
    let dir = if t_max >= t0 { T::one() } else { -T::one() };
    while !st.finished() {
        st.step()?;
        let ga = g(st.y_old());
        let gb = g(&st.y);
        let (ea, eb) = if dir > T::zero() { (ga, gb) } else { (gb, ga) };
        let maybe = sign_ok(ea, eb, direction) || ga.signum() != gb.signum();
        if !maybe {
            continue;
        }
        let seg = st.dense();
        for (t, _y, tangential) in roots_in_segment(&seg, g, direction, T::lit(1e-13), dir) {
            if (t - t0).abs() > min_time {
                // recompute the state by an exact partial step from the segment start
                let y_exact = flow(sys, seg.t_old, seg.y_old(), t, tol)?;
                let y = polish_event(sys, t, y_exact, g, tol)?;
                return Ok(Some(EventHit { t: y.0, y: y.1, tangential, steps: st.n_steps }));
            }
        }
    }
    Ok(None)
}

/// Newton correction of an event time using the vector field for `dg/dt`.
fn polish_event<T: Float, S: OdeSystem<T> + ?Sized>(
    sys: &S,
    mut t: T,
    mut y: Vec<T>,
    g: &dyn Fn(&[T]) -> T,
    tol: Tolerances<T>,
) -> Result<(T, Vec<T>)> {
    let n = y.len();
    let mut f = vec![T::zero(); n];
    for _ in 0..3 {
        let gv = g(&y);
        if gv.abs() <= T::lit(1e-14) {
            break;
        }
        sys.eval(t, &y, &mut f);
        let d = T::lit(1e-7);
        let yp: Vec<T> = (0..n).map(|k| y[k] + d * f[k]).collect();
        let ym: Vec<T> = (0..n).map(|k| y[k] - d * f[k]).collect();
        let dg = (g(&yp) - g(&ym)) / (T::lit(2.0) * d);
        if dg.abs() < T::lit(1e-12) {
            break;
        }
        let dt = -gv / dg;
        if dt.abs() > T::lit(1e-3) {
            break;
        }
        y = flow(sys, t, &y, t + dt, tol)?;
        t += dt;
    }
    Ok((t, y))
}

/// Finite-time exponents `(alpha_hat, beta_hat)`: the leading normal rate and
/// the leading rate tangent to `{p3 = q3 = 0}`, with QR renormalisation every unit of time.
pub fn finite_time_lyapunov<T: Float>(
    params: &ModelParams<T>,
    pert: &Perturbation<T>,
    x0: &PhaseState<T>,
    t_total: T,
) -> Result<(T, T)> {
    if x0.p[2].abs() > T::lit(1e-6) || x0.q[2].abs() > T::lit(1e-6) {
        return domain("initial point is not on the invariant sphere");
    }
    if t_total < T::lit(50.0) {
        return domain("need T >= 50");
    }
    let sys = Variational { params, pert };
    let tol = Tolerances::new(T::lit(1e-11), T::lit(1e-13));
    let mut y = vec![T::zero(); 42];
    y[..6].copy_from_slice(&x0.to_array());
    for k in 0..6 {
        y[6 + 7 * k] = T::one();
    }
    let mut sums = [T::zero(); 6];
    let n = (t_total.to_f64_lossy()).ceil() as usize;
    let mut t = T::zero();
    for _ in 0..n {
        y = flow(&sys, t, &y, t + T::one(), tol)?;
        t += T::one();
        // modified Gram-Schmidt in column order: tangential columns first
        for i in 0..6 {
            for j in 0..i {
                let mut d = T::zero();
                for r in 0..6 {
                    d += y[6 + 6 * i + r] * y[6 + 6 * j + r];
                }
                for r in 0..6 {
                    let vj = y[6 + 6 * j + r];
                    y[6 + 6 * i + r] -= d * vj;
                }
            }
            let mut nrm = T::zero();
            for r in 0..6 {
                nrm += y[6 + 6 * i + r] * y[6 + 6 * i + r];
            }
            let nrm = nrm.sqrt();
            if !nrm.is_finite() || nrm == T::zero() {
                return Err(Error::Integration {
                    t: t.to_f64_lossy(),
                    reason: "tangent frame renormalisation overflow".into(),
                    last: y[..6].iter().map(|v| v.to_f64_lossy()).collect(),
                });
            }
            sums[i] += nrm.ln();
            for r in 0..6 {
                y[6 + 6 * i + r] /= nrm;
            }
        }
    }
    let tt = t;
    let beta = (0..4).map(|i| sums[i] / tt).fold(T::neg_infinity(), T::max);
    let alpha = (4..6).map(|i| sums[i] / tt).fold(T::neg_infinity(), T::max);
    Ok((alpha, beta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ActionAngle, Branch};
    use approx::assert_relative_eq;

    fn p() -> ModelParams<f64> {
        ModelParams::default()
    }

    fn on_sphere(i1: f64, phi1: f64, phi2: f64) -> PhaseState<f64> {
        let prm = p();
        let i2 = prm.i2_on_sphere(i1).unwrap();
        let osc = model::from_action_angle(&ActionAngle { i1, i2, phi1, phi2 });
        PhaseState::with_osc(osc, 0.0, 0.0)
    }

    #[test]
    fn harmonic_oscillator_exact() {
        let sys = (2usize, |_t: f64, x: &[f64], o: &mut [f64]| {
            o[0] = x[1];
            o[1] = -x[0];
        });
        let y = flow(&sys, 0.0, &[1.0, 0.0], 10.0, Tolerances::new(1e-12, 1e-14)).unwrap();
        assert!((y[0] - 10f64.cos()).abs() < 1e-10);
        assert!((y[1] + 10f64.sin()).abs() < 1e-10);
    }

    #[test]
    fn dense_output_accuracy() {
        let sys = (2usize, |_t: f64, x: &[f64], o: &mut [f64]| {
            o[0] = x[1];
            o[1] = -x[0];
        });
        let mut st = Stepper::new(&sys, 0.0, &[1.0, 0.0], 20.0, Tolerances::new(1e-10, 1e-12)).unwrap();
        while !st.finished() {
            st.step().unwrap();
            let seg = st.dense();
            for k in 0..5 {
                let t = seg.t_old + (seg.t_new - seg.t_old) * k as f64 / 4.0;
                let y = seg.eval(t);
                assert!((y[0] - t.cos()).abs() < 1e-8, "t={t}");
            }
        }
    }

    #[test]
    fn actions_constant_on_lambda() {
        let x0 = on_sphere(0.05, 0.3, 1.0);
        let rec = integrate_orbit(&p(), &Perturbation::none(), &x0, (0.0, 1000.0), 1e-12, 1e-14).unwrap();
        let (a0, _) = model::to_action_angle(&x0.osc());
        for s in rec.states.iter().step_by(7) {
            let (a, _) = model::to_action_angle(&s.osc());
            assert!((a.i1 - a0.i1).abs() < 1e-10);
            assert!((a.i2 - a0.i2).abs() < 1e-10);
        }
        assert!(rec.energy_drift <= 1e-10);
        assert!(!rec.drift_flagged);
    }

    #[test]
    fn energy_drift_with_perturbation() {
        let prm = p().with_eps(1e-2);
        let pert = Perturbation::two_harmonic();
        let x0 = on_sphere(0.08, 0.3, 1.0);
        let rec = integrate_orbit(&prm, &pert, &x0, (0.0, 1000.0), 1e-12, 1e-14).unwrap();
        assert!(rec.energy_drift <= 1e-10, "{}", rec.energy_drift);
    }

    #[test]
    fn matches_unperturbed_flow() {
        let prm = p();
        let x0 = on_sphere(0.07, 0.1, 2.0);
        let y = flow(&Hamiltonian::new(&prm, &Perturbation::none()), 0.0, &x0.to_array(), 100.0, Tolerances::tight()).unwrap();
        let (aa, _) = model::to_action_angle(&x0.osc());
        let exact = model::from_action_angle(&model::unperturbed_flow(&prm, &aa, 100.0));
        for k in 0..4 {
            assert!((y[k] - exact[k]).abs() < 1e-9, "{k}: {} vs {}", y[k], exact[k]);
        }
    }

    #[test]
    fn separatrix_following() {
        // start on the separatrix at t = -5 and compare over |t| <= 5
        let prm = p();
        let (p3, q3) = model::pendulum_separatrix(1.0, -5.0, Branch::Plus);
        let x0 = PhaseState::with_osc([0.0; 4], p3, q3);
        let rec = integrate_orbit(&prm, &Perturbation::none(), &x0, (-5.0, 5.0), 1e-13, 1e-15).unwrap();
        for t in [-4.0, -2.0, 0.0, 1.5, 3.0, 5.0] {
            let s = rec.at(t).unwrap();
            let (ep, eq) = model::pendulum_separatrix(1.0, t, Branch::Plus);
            assert!((s.p[2] - ep).abs() < 1e-9 && (s.q[2] - eq).abs() < 1e-9, "t={t}");
        }
    }

    #[test]
    fn time_reversal() {
        let prm = p().with_eps(1e-3);
        let pert = Perturbation::two_harmonic();
        let x0 = PhaseState::from_array(&[0.1, 0.2, -0.3, 0.1, 0.05, 0.02]);
        let sys = Hamiltonian::new(&prm, &pert);
        let tol = Tolerances::new(1e-12, 1e-14);
        let y = flow(&sys, 0.0, &x0.to_array(), 100.0, tol).unwrap();
        let back = flow(&sys, 100.0, &y, 0.0, tol).unwrap();
        // the saddle amplifies errors like exp(lambda t); use a point whose
        // pendulum part stays bounded
        let x1 = on_sphere(0.06, 0.4, 0.2);
        let y1 = flow(&sys, 0.0, &x1.to_array(), 100.0, tol).unwrap();
        let b1 = flow(&sys, 100.0, &y1, 0.0, tol).unwrap();
        for k in 0..6 {
            assert!((b1[k] - x1.to_array()[k]).abs() < 1e-9);
        }
        assert!(back.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn crossing_spacing() {
        let prm = p();
        let x0 = on_sphere(0.05, 0.0, 0.5);
        let (aa, _) = model::to_action_angle(&x0.osc());
        let w2 = prm.a2 + prm.b2 * aa.i2;
        let rec = integrate_orbit(&prm, &Perturbation::none(), &x0, (0.0, 60.0), 1e-12, 1e-14).unwrap();
        let ev = EventSpec::new(|x: &PhaseState<f64>| -x.p[1], 1);
        let cr = find_crossings(&rec, &ev);
        assert!(cr.len() >= 5);
        for c in &cr {
            assert!(c.state.p[1].abs() <= 1e-12);
            assert!(c.state.q[1] > 0.0);
            assert!(!c.tangential);
        }
        for w in cr.windows(2) {
            assert!((w[1].t - w[0].t - std::f64::consts::TAU / w2).abs() < 1e-8);
        }
        let never = EventSpec::new(|_x: &PhaseState<f64>| 1.0, 0);
        assert!(find_crossings(&rec, &never).is_empty());
    }

    #[test]
    fn crossing_time_converges() {
        let prm = p();
        let x0 = on_sphere(0.05, 0.0, 0.5);
        let ev = EventSpec::new(|x: &PhaseState<f64>| -x.p[1], 1);
        let r1 = integrate_orbit(&prm, &Perturbation::none(), &x0, (0.0, 20.0), 1e-11, 1e-13).unwrap();
        let r2 = integrate_orbit(&prm, &Perturbation::none(), &x0, (0.0, 20.0), 2e-11, 2e-13).unwrap();
        let c1 = find_crossings(&r1, &ev);
        let c2 = find_crossings(&r2, &ev);
        assert_eq!(c1.len(), c2.len());
        for (a, b) in c1.iter().zip(&c2) {
            assert!((a.t - b.t).abs() < 1e-8);
        }
    }

    #[test]
    fn event_stepping_matches_record() {
        let prm = p();
        let x0 = on_sphere(0.05, 0.0, 0.5);
        let none = Perturbation::none();
        let sys = Hamiltonian::new(&prm, &none);
        let g = |x: &[f64]| -x[2];
        let hit = integrate_to_event(&sys, 0.0, &x0.to_array(), 50.0, &g, 1, 1e-6, Tolerances::tight()).unwrap().unwrap();
        let (aa, _) = model::to_action_angle(&x0.osc());
        let w2 = prm.a2 + prm.b2 * aa.i2;
        let expect = (std::f64::consts::TAU - 0.5) / w2;
        assert!((hit.t - expect).abs() < 1e-10, "{} vs {}", hit.t, expect);
        assert!(hit.y[2].abs() < 1e-13);
    }

    #[test]
    fn tolerance_range_enforced() {
        let prm = p();
        let x0 = PhaseState::zero();
        assert!(integrate_orbit(&prm, &Perturbation::none(), &x0, (0.0, 1.0), 1e-2, 1e-6).is_err());
        assert!(integrate_orbit(&prm, &Perturbation::none(), &x0, (0.0, 1.0), 1e-16, 1e-16).is_err());
    }

    #[test]
    fn convergence_order() {
        let prm = p();
        let x0 = on_sphere(0.07, 0.1, 2.0);
        let (aa, _) = model::to_action_angle(&x0.osc());
        let exact = model::from_action_angle(&model::unperturbed_flow(&prm, &aa, 50.0));
        let none = Perturbation::none();
        let sys = Hamiltonian::new(&prm, &none);
        let mut pts = Vec::new();
        for tol in [1e-5, 1e-6, 1e-7, 1e-8] {
            let mut st = Stepper::new(&sys, 0.0, &x0.to_array(), 50.0, Tolerances::new(tol, tol * 1e-2)).unwrap();
            st.run_to_end().unwrap();
            let err = (0..4).map(|k| (st.y[k] - exact[k]).abs()).fold(0.0, f64::max);
            pts.push(((st.n_eval as f64).ln(), err.ln()));
        }
        // error ~ cost^(-order)
        let n = pts.len() as f64;
        let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
        let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
        let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
        let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
        let slope = -sxy / sxx;
        assert!(slope >= 7.0, "measured order {slope}");
    }

    #[test]
    fn jacobian_matches_fd() {
        let prm = p().with_eps(0.05);
        let pert = Perturbation::two_harmonic()
            .with_term(model::Term::new(0.4, PendulumFactor::Sin, [1, 0, 0, 2]))
            .with_term(model::Term::new(0.3, PendulumFactor::P2, [0, 2, 1, 0]))
            .with_term(model::Term::new(0.2, PendulumFactor::P, [1, 1, 0, 0]));
        let x = [0.3, -0.2, 0.1, 0.4, 0.5, 1.1];
        let a = jacobian(&prm, &pert, &x);
        for j in 0..6 {
            let h = 1e-6;
            let mut xp = x;
            let mut xm = x;
            xp[j] += h;
            xm[j] -= h;
            let mut fp = [0.0; 6];
            let mut fm = [0.0; 6];
            model::rhs(&prm, &pert, &xp, &mut fp);
            model::rhs(&prm, &pert, &xm, &mut fm);
            for i in 0..6 {
                let fd = (fp[i] - fm[i]) / (2.0 * h);
                assert!((a[i][j] - fd).abs() < 1e-7 * (1.0 + fd.abs()), "({i},{j}) {} vs {}", a[i][j], fd);
            }
        }
    }

    #[test]
    fn lyapunov_rates() {
        let prm = p();
        let x0 = on_sphere(0.06, 0.2, 0.7);
        let (alpha, beta) = finite_time_lyapunov(&prm, &Perturbation::none(), &x0, 200.0).unwrap();
        assert_relative_eq!(alpha, 1.0, max_relative = 0.01);
        assert!(beta <= 0.05, "{beta}");
        assert!(beta < alpha);
    }

    #[test]
    fn f32_integration() {
        let prm = ModelParams::<f32>::default();
        let none = Perturbation::none();
        let sys = Hamiltonian::new(&prm, &none);
        let x0 = [0.0f32, 0.3, 0.2, 0.0, 0.0, 0.0];
        let y = flow(&sys, 0.0, &x0, 5.0, Tolerances::new(1e-6, 1e-7)).unwrap();
        let prm64 = p();
        let x64: Vec<f64> = x0.iter().map(|v| *v as f64).collect();
        let y64 = flow(&Hamiltonian::new(&prm64, &Perturbation::none()), 0.0, &x64, 5.0, Tolerances::tight()).unwrap();
        for k in 0..6 {
            assert!((y[k] as f64 - y64[k]).abs() < 1e-4);
        }
    }
}
