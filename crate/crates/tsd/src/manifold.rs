//! The normally hyperbolic sphere `Lambda_{eps,c}` as a graph over
//! `(I1, phi1, phi2)`, its stable and unstable fibers, homoclinic shooting,
//! the scattering map computed by direct integration and transversality.

use nalgebra::{Matrix4, Matrix6, SymmetricEigen, Vector4, Vector6};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use std::f64::consts::{PI, TAU};

use crate::error::{domain, Error, Result};
use crate::integrate::{flow, integrate_orbit, integrate_to_event, Hamiltonian, OdeSystem, OrbitRecord, Stepper, Tolerances, Variational};
use crate::melnikov::{self, Base};
use crate::model::{self, ActionAngle, Branch, PhaseState};
use crate::section::{self, lift_with_normal, NormalGraph};
use crate::{Params, Pert, State};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridSpec {
    pub n_i1: usize,
    pub n_phi1: usize,
    pub n_phi2: usize,
    /// Iterate the correction until the residual stops decreasing.
    pub refine: bool,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec { n_i1: 24, n_phi1: 32, n_phi2: 32, refine: true }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NhimOrder {
    Zero,
    One,
    Refined,
}

/// Tabulated graph `(p3, q3) = P(I1, phi1, phi2)`: Fourier coefficients in the
/// angles at a set of `I1` nodes, cubic interpolation in between.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NhimApprox {
    pub order: NhimOrder,
    pub i1_nodes: Vec<f64>,
    harmonics: Vec<(i32, i32)>,
    /// `[node][harmonic]` as `(re, im)` pairs for `p3` then `q3`.
    p_coef: Vec<Vec<(f64, f64)>>,
    q_coef: Vec<Vec<(f64, f64)>>,
    /// Sup-norm of the flow-tangency defect on a grid offset from the nodes.
    pub invariance_residual: f64,
    /// Set when the refined residual exceeds `10 eps^2`.
    pub flagged: bool,
    /// The sphere `{p3 = q3 = 0}` is invariant with unperturbed inner flow.
    pub exact: bool,
    params: Params,
}

impl NhimApprox {
    pub fn flat(params: &Params) -> Self {
        NhimApprox {
            order: NhimOrder::Zero,
            i1_nodes: vec![0.5 * params.j_max()],
            harmonics: Vec::new(),
            p_coef: vec![Vec::new()],
            q_coef: vec![Vec::new()],
            invariance_residual: 0.0,
            flagged: false,
            exact: true,
            params: *params,
        }
    }

    /// Node coefficients are stored divided by `r1^|k1| r2^|k2|`, which makes
    /// them smooth in `I1` up to the poles of the sphere.
    /// Returns the factor and its `I1` derivative.
    fn radial(&self, i1: f64, k1: i32, k2: i32) -> (f64, f64) {
        let i1 = i1.max(1e-300);
        let i2 = self.params.i2_on_sphere(i1).unwrap_or(0.0).max(1e-300);
        let (w1, w2) = self.params.omega(i1, i2);
        let (m, n) = (k1.unsigned_abs() as f64, k2.unsigned_abs() as f64);
        let f = (2.0 * i1).powf(0.5 * m) * (2.0 * i2).powf(0.5 * n);
        let df = f * (0.5 * m / i1 - 0.5 * n / i2 * w1 / w2);
        (f, df)
    }

    pub fn n_harmonics(&self) -> usize {
        self.harmonics.len()
    }

    /// Lagrange weights and their derivatives over the (up to) four nodes nearest `i1`.
    fn stencil(&self, i1: f64) -> (usize, Vec<f64>, Vec<f64>) {
        let n = self.i1_nodes.len();
        let m = n.min(4);
        let pos = self.i1_nodes.partition_point(|&x| x < i1);
        let start = pos.saturating_sub(m / 2).min(n - m);
        let xs = &self.i1_nodes[start..start + m];
        let mut w = vec![0.0; m];
        let mut dw = vec![0.0; m];
        for a in 0..m {
            let mut l = 1.0;
            let mut d = 0.0;
            for b in 0..m {
                if b == a {
                    continue;
                }
                let den = xs[a] - xs[b];
                let mut term = 1.0 / den;
                for c in 0..m {
                    if c != a && c != b {
                        term *= (i1 - xs[c]) / (xs[a] - xs[c]);
                    }
                }
                d += term;
                l *= (i1 - xs[b]) / den;
            }
            w[a] = l;
            dw[a] = d;
        }
        (start, w, dw)
    }

    /// `[value, d/dI1, d/dphi1, d/dphi2]` for `p3` and `q3`.
    fn eval_full(&self, i1: f64, phi1: f64, phi2: f64) -> ([f64; 4], [f64; 4]) {
        let mut p = [0.0; 4];
        let mut q = [0.0; 4];
        if self.harmonics.is_empty() {
            return (p, q);
        }
        let (start, w, dw) = self.stencil(i1);
        for (h, &(k1, k2)) in self.harmonics.iter().enumerate() {
            let arg = k1 as f64 * phi1 + k2 as f64 * phi2;
            let (s, c) = arg.sin_cos();
            let (f, df) = self.radial(i1, k1, k2);
            for (out, coef) in [(&mut p, &self.p_coef), (&mut q, &self.q_coef)] {
                let (mut re, mut im, mut dre, mut dim) = (0.0, 0.0, 0.0, 0.0);
                for a in 0..w.len() {
                    let (r, i) = coef[start + a][h];
                    re += w[a] * r;
                    im += w[a] * i;
                    dre += dw[a] * r;
                    dim += dw[a] * i;
                }
                (dre, dim) = (f * dre + df * re, f * dim + df * im);
                (re, im) = (f * re, f * im);
                // Re((re + i im) e^{i arg})
                let v = re * c - im * s;
                let dv_darg = -re * s - im * c;
                out[0] += v;
                out[1] += dre * c - dim * s;
                out[2] += k1 as f64 * dv_darg;
                out[3] += k2 as f64 * dv_darg;
            }
        }
        (p, q)
    }
}

impl NormalGraph for NhimApprox {
    fn normal(&self, i1: f64, phi1: f64, phi2: f64) -> (f64, f64) {
        let (p, q) = self.eval_full(i1, phi1, phi2);
        (p[0], q[0])
    }
}

fn harmonic_index(m: usize, n: usize) -> Option<i32> {
    if 2 * m == n {
        None
    } else if 2 * m < n {
        Some(m as i32)
    } else {
        Some(m as i32 - n as i32)
    }
}

fn fft2(data: &mut [Complex<f64>], n1: usize, n2: usize, planner: &mut FftPlanner<f64>) {
    let f2 = planner.plan_fft_forward(n2);
    for row in data.chunks_mut(n2) {
        f2.process(row);
    }
    let f1 = planner.plan_fft_forward(n1);
    let mut col = vec![Complex::new(0.0, 0.0); n1];
    for j in 0..n2 {
        for i in 0..n1 {
            col[i] = data[i * n2 + j];
        }
        f1.process(&mut col);
        for i in 0..n1 {
            data[i * n2 + j] = col[i];
        }
    }
}

/// Flow-tangency defect `(R_p, R_q)` of the graph at one base point:
/// predicted minus actual normal velocity.
fn defect(params: &Params, pert: &Pert, g: &NhimApprox, i1: f64, phi1: f64, phi2: f64) -> Result<(f64, f64)> {
    let (p, q) = g.eval_full(i1, phi1, phi2);
    let x = lift_with_normal(params, pert, i1, phi1, phi2, p[0], q[0])?;
    let v = model::vector_field(params, pert, &x)?;
    let (di1, dphi1, dphi2) = inner_rates(&x, &v);
    let rp = p[1] * di1 + p[2] * dphi1 + p[3] * dphi2 - v.p[2];
    let rq = q[1] * di1 + q[2] * dphi1 + q[3] * dphi2 - v.q[2];
    Ok((rp, rq))
}

/// `(dI1/dt, dphi1/dt, dphi2/dt)` from a state and its velocity.
fn inner_rates(x: &State, v: &State) -> (f64, f64, f64) {
    let di1 = x.p[0] * v.p[0] + x.q[0] * v.q[0];
    let r1 = x.p[0] * x.p[0] + x.q[0] * x.q[0];
    let r2 = x.p[1] * x.p[1] + x.q[1] * x.q[1];
    let dphi1 = (x.p[0] * v.q[0] - x.q[0] * v.p[0]) / r1;
    let dphi2 = (x.p[1] * v.q[1] - x.q[1] * v.p[1]) / r2;
    (di1, dphi1, dphi2)
}

/// Sup-norm of the defect on the grid shifted by half a cell in every direction.
pub fn invariance_residual(params: &Params, pert: &Pert, g: &NhimApprox, spec: &GridSpec) -> Result<f64> {
    let jmax = params.j_max();
    let mut worst = 0.0f64;
    for k in 0..spec.n_i1.saturating_sub(1).max(1) {
        let i1 = if spec.n_i1 > 1 { jmax * (k as f64 + 1.0) / spec.n_i1 as f64 } else { 0.5 * jmax };
        for a in 0..spec.n_phi1 {
            for b in 0..spec.n_phi2 {
                let phi1 = TAU * (a as f64 + 0.5) / spec.n_phi1 as f64;
                let phi2 = TAU * (b as f64 + 0.5) / spec.n_phi2 as f64;
                let (rp, rq) = defect(params, pert, g, i1, phi1, phi2)?;
                worst = worst.max(rp.abs()).max(rq.abs());
            }
        }
    }
    Ok(worst)
}

/// Build the graph by Fourier-diagonal solves of the linearized invariance
/// equation, starting from the flat sphere; the first solve is the order-one
/// correction.
pub fn nhim_build(params: &Params, pert: &Pert, spec: &GridSpec) -> Result<NhimApprox> {
    if params.eps > 1e-2 {
        return domain("NHIM construction needs eps <= 1e-2");
    }
    if spec.n_i1 < 4 || spec.n_phi1 < 4 || spec.n_phi2 < 4 {
        return domain("grid needs at least 4 nodes per direction");
    }
    let exact = params.eps == 0.0 || pert.is_empty() || pert.keeps_sphere_exact();
    if exact {
        let mut g = NhimApprox::flat(params);
        g.invariance_residual = invariance_residual(params, pert, &g, &GridSpec { n_i1: 3, n_phi1: 8, n_phi2: 8, refine: false })?;
        return Ok(g);
    }
    let jmax = params.j_max();
    let (n1, n2) = (spec.n_phi1, spec.n_phi2);
    let nodes: Vec<f64> = (0..spec.n_i1).map(|k| jmax * (k as f64 + 0.5) / spec.n_i1 as f64).collect();
    let mut harmonics = Vec::new();
    for a in 0..n1 {
        for b in 0..n2 {
            if let (Some(k1), Some(k2)) = (harmonic_index(a, n1), harmonic_index(b, n2)) {
                harmonics.push((k1, k2));
            }
        }
    }
    let nh = harmonics.len();
    let mut g = NhimApprox {
        order: NhimOrder::One,
        i1_nodes: nodes.clone(),
        harmonics: harmonics.clone(),
        p_coef: vec![vec![(0.0, 0.0); nh]; nodes.len()],
        q_coef: vec![vec![(0.0, 0.0); nh]; nodes.len()],
        invariance_residual: f64::INFINITY,
        flagged: false,
        exact: false,
        params: *params,
    };
    let lam2 = params.lambda * params.lambda;
    let mut planner = FftPlanner::new();
    let mut prev: Option<(NhimApprox, f64)> = None;
    let max_iter = if spec.refine { 8 } else { 1 };
    for iter in 0..max_iter {
        let mut next = g.clone();
        for (k, &i1) in nodes.iter().enumerate() {
            let i2 = params.i2_on_sphere(i1).ok_or_else(|| Error::Domain("node beyond the sphere".into()))?;
            let (w1, w2) = params.omega(i1, i2);
            let mut rp = vec![Complex::new(0.0, 0.0); n1 * n2];
            let mut rq = rp.clone();
            for a in 0..n1 {
                for b in 0..n2 {
                    let phi1 = TAU * a as f64 / n1 as f64;
                    let phi2 = TAU * b as f64 / n2 as f64;
                    let (dp, dq) = defect(params, pert, &g, i1, phi1, phi2)?;
                    rp[a * n2 + b] = Complex::new(dp, 0.0);
                    rq[a * n2 + b] = Complex::new(dq, 0.0);
                }
            }
            fft2(&mut rp, n1, n2, &mut planner);
            fft2(&mut rq, n1, n2, &mut planner);
            let norm = 1.0 / (n1 * n2) as f64;
            let floor = 1e-14 * rp.iter().chain(rq.iter()).map(|c| c.norm()).fold(0.0, f64::max) * norm;
            for (h, &(k1, k2)) in harmonics.iter().enumerate() {
                let a = k1.rem_euclid(n1 as i32) as usize;
                let b = k2.rem_euclid(n2 as i32) as usize;
                let rph = rp[a * n2 + b] * norm;
                let rqh = rq[a * n2 + b] * norm;
                if rph.norm() + rqh.norm() <= floor {
                    continue;
                }
                let nu = k1 as f64 * w1 + k2 as f64 * w2;
                let den = lam2 + nu * nu;
                if den < 1e-6 {
                    return Err(Error::Degenerate(format!("small divisor at harmonic ({k1}, {k2})")));
                }
                let inu = Complex::new(0.0, nu);
                let dq = (rph + inu * rqh) / den;
                let dp = inu * dq + rqh;
                let f = g.radial(i1, k1, k2).0;
                let (dq, dp) = (dq / f, dp / f);
                let (pr, pi) = next.p_coef[k][h];
                let (qr, qi) = next.q_coef[k][h];
                next.p_coef[k][h] = (pr + dp.re, pi + dp.im);
                next.q_coef[k][h] = (qr + dq.re, qi + dq.im);
            }
        }
        let res = invariance_residual(params, pert, &next, &GridSpec { n_i1: spec.n_i1, n_phi1: 16, n_phi2: 16, refine: false })?;
        next.invariance_residual = res;
        next.order = if iter == 0 { NhimOrder::One } else { NhimOrder::Refined };
        if let Some((best, best_res)) = &prev {
            if res >= 0.9 * best_res {
                g = if res < *best_res { next } else { best.clone() };
                prev = None;
                break;
            }
        }
        g = next.clone();
        prev = Some((next, res));
    }
    if let Some((best, _)) = prev {
        g = best;
    }
    prune(&mut g);
    g.flagged = g.order == NhimOrder::Refined && g.invariance_residual > 10.0 * params.eps * params.eps;
    Ok(g)
}

/// Drop harmonics negligible at every node.
fn prune(g: &mut NhimApprox) {
    let mag = |c: &(f64, f64)| c.0.abs() + c.1.abs();
    let max = g
        .p_coef
        .iter()
        .chain(g.q_coef.iter())
        .flat_map(|row| row.iter().map(mag))
        .fold(0.0, f64::max);
    let keep: Vec<usize> = (0..g.harmonics.len())
        .filter(|&h| {
            g.p_coef.iter().chain(g.q_coef.iter()).any(|row| mag(&row[h]) > 1e-13 * max && mag(&row[h]) > 1e-300)
        })
        .collect();
    g.harmonics = keep.iter().map(|&h| g.harmonics[h]).collect();
    for row in g.p_coef.iter_mut().chain(g.q_coef.iter_mut()) {
        *row = keep.iter().map(|&h| row[h]).collect();
    }
}

/// Oscillator dynamics restricted to the graph.
struct InnerSystem<'a> {
    params: &'a Params,
    pert: &'a Pert,
    graph: &'a NhimApprox,
}

impl OdeSystem<f64> for InnerSystem<'_> {
    fn dim(&self) -> usize {
        4
    }
    fn eval(&self, _t: f64, x: &[f64], out: &mut [f64]) {
        let osc = [x[0], x[1], x[2], x[3]];
        let (aa, _) = model::to_action_angle(&osc);
        let (p3, q3) = self.graph.normal(aa.i1, aa.phi1, aa.phi2);
        let full = PhaseState::with_osc(osc, p3, q3).to_array();
        let mut f = [0.0; 6];
        model::rhs(self.params, self.pert, &full, &mut f);
        out[..4].copy_from_slice(&f[..4]);
    }
}

fn base_of(x: &State) -> Base {
    let (aa, _) = model::to_action_angle(&x.osc());
    Base { i1: aa.i1, phi1: aa.phi1, phi2: aa.phi2 }
}

/// Inner flow on the manifold for time `t`.
pub fn inner_flow(params: &Params, pert: &Pert, g: &NhimApprox, base: &Base, t: f64, tol: Tolerances<f64>) -> Result<Base> {
    if g.exact && (params.eps == 0.0 || pert.keeps_sphere_exact()) {
        return melnikov::inner_flow(params, base, t);
    }
    let (p3, q3) = g.normal(base.i1, base.phi1, base.phi2);
    let x = lift_with_normal(params, pert, base.i1, base.phi1, base.phi2, p3, q3)?;
    let sys = InnerSystem { params, pert, graph: g };
    let y = flow(&sys, 0.0, &x.osc(), t, tol)?;
    let (aa, _) = model::to_action_angle(&[y[0], y[1], y[2], y[3]]);
    Ok(Base { i1: aa.i1, phi1: aa.phi1, phi2: aa.phi2 })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FiberKind {
    Stable,
    Unstable,
}

/// Time the unperturbed separatrix takes from `q3 = delta` to `q3 = pi`.
pub fn separatrix_flight_time(lambda: f64, delta: f64) -> f64 {
    -(delta / 4.0).tan().ln() / lambda
}

/// Point at pendulum distance `delta` from the saddle on the separatrix lift
/// over `base`: `q3 = delta` on the unstable side, `q3 = 2pi - delta` on the
/// stable side (negated on the minus branch), on `{H = c}`.
pub fn fiber_point(
    params: &Params,
    pert: &Pert,
    g: &NhimApprox,
    base: &Base,
    branch: Branch,
    kind: FiberKind,
    delta: f64,
) -> Result<State> {
    let s: f64 = branch.sign();
    let p = s * 2.0 * params.lambda * (0.5 * delta).sin();
    let q = match kind {
        FiberKind::Unstable => s * delta,
        FiberKind::Stable => s * (TAU - delta),
    };
    let (p3, q3) = g.normal(base.i1, base.phi1, base.phi2);
    lift_with_normal(params, pert, base.i1, base.phi1, base.phi2, p + p3, q + q3)
}

/// Integrate to the matching section `{q3 = +-pi}` forward (`dir > 0`) or backward.
fn to_matching_section(params: &Params, pert: &Pert, x: &State, branch: Branch, dir: f64, tol: Tolerances<f64>) -> Result<(f64, State)> {
    let s: f64 = branch.sign();
    let sys = Hamiltonian::new(params, pert);
    let g = move |y: &[f64]| s * (y[5] - s * PI);
    let t_max = dir * 200.0 / params.lambda;
    let hit = integrate_to_event(&sys, 0.0, &x.to_array(), t_max, &g, 1, 0.0, tol)?
        .ok_or_else(|| Error::Convergence("orbit never reached the matching section".into()))?;
    Ok((hit.t, PhaseState::from_array(&hit.y)))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FootpointResult {
    pub base: Base,
    pub error_estimate: f64,
    /// Time spent reaching the manifold.
    pub time: f64,
}

#[cfg(test)]
fn normal_distance(g: &NhimApprox, x: &[f64]) -> f64 {
    let st = PhaseState::from_array(x);
    let b = base_of(&st);
    let (p3, q3) = g.normal(b.i1, b.phi1, b.phi2);
    let dq = (x[5] - q3 + PI).rem_euclid(TAU) - PI;
    ((x[4] - p3).powi(2) + dq * dq).sqrt()
}

/// Lengths of the unstable and stable components of the normal displacement
/// in the saddle's linear eigenbasis.
fn hyperbolic_parts(g: &NhimApprox, lambda: f64, x: &[f64]) -> (f64, f64) {
    let b = base_of(&PhaseState::from_array(x));
    let (p3, q3) = g.normal(b.i1, b.phi1, b.phi2);
    let dq = (x[5] - q3 + PI).rem_euclid(TAU) - PI;
    let dp = x[4] - p3;
    let k = 0.5 * (1.0 + lambda * lambda).sqrt();
    ((dq + dp / lambda).abs() * k, (dq - dp / lambda).abs() * k)
}

/// Contracting and expanding components for the integration direction of `kind`.
fn fiber_parts(g: &NhimApprox, lambda: f64, kind: FiberKind, x: &[f64]) -> (f64, f64) {
    let (u, s) = hyperbolic_parts(g, lambda, x);
    match kind {
        FiberKind::Stable => (s, u),
        FiberKind::Unstable => (u, s),
    }
}

/// Roundoff feeds the expanding direction, so arrival is judged on the
/// contracting component while the expanding one stays below this bound.
const EXPANDING_BOUND: f64 = 1e-3;

fn footpoint_once(params: &Params, pert: &Pert, g: &NhimApprox, x: &State, kind: FiberKind, threshold: f64, tol: Tolerances<f64>) -> Result<(Base, f64)> {
    let dir = match kind {
        FiberKind::Stable => 1.0,
        FiberKind::Unstable => -1.0,
    };
    let lam = params.lambda;
    let arrived = |y: &[f64]| {
        let (c, e) = fiber_parts(g, lam, kind, y);
        c <= threshold && e <= EXPANDING_BOUND.max(threshold)
    };
    let sys = Hamiltonian::new(params, pert);
    let t_max = dir * 80.0 / lam;
    let y0 = x.to_array();
    if arrived(&y0) {
        return Ok((base_of(x), 0.0));
    }
    let mut st = Stepper::new(&sys, 0.0, &y0, t_max, tol)?;
    while !st.finished() {
        st.step()?;
        if arrived(&st.y) {
            let seg = st.dense();
            let (mut a, mut b) = (seg.t_old, seg.t_new);
            for _ in 0..60 {
                let m = 0.5 * (a + b);
                if arrived(&seg.eval(m)) {
                    b = m;
                } else {
                    a = m;
                }
            }
            let y = flow(&sys, seg.t_old, seg.y_old(), b, tol)?;
            let b0 = base_of(&PhaseState::from_array(&y));
            let back = inner_flow(params, pert, g, &b0, -b, tol)?;
            return Ok((back, b));
        }
    }
    Err(Error::Convergence("not on the local invariant manifold's fiber".into()))
}

/// Point on the `kind` fiber of `base` at moderate distance from the manifold:
/// a seed at distance `delta` over the inner image of `base` at time `t`
/// carried back by time `t` (forward for unstable fibers). Seeding errors in the
/// expanding direction are damped by `e^{-lambda t}`.
#[allow(clippy::too_many_arguments)]
pub fn seed_fiber_point(
    params: &Params,
    pert: &Pert,
    g: &NhimApprox,
    base: &Base,
    branch: Branch,
    kind: FiberKind,
    delta: f64,
    t: f64,
    tol: Tolerances<f64>,
) -> Result<State> {
    let t = t.abs();
    let dir = match kind {
        FiberKind::Stable => 1.0,
        FiberKind::Unstable => -1.0,
    };
    let b = inner_flow(params, pert, g, base, dir * t, tol)?;
    let s: f64 = branch.sign();
    let (p3, q3) = g.normal(b.i1, b.phi1, b.phi2);
    // the stable seed is taken at -delta rather than 2pi - delta to keep small delta exact
    let (p, q) = match kind {
        FiberKind::Unstable => (s * 2.0 * params.lambda * (0.5 * delta).sin(), s * delta),
        FiberKind::Stable => (s * 2.0 * params.lambda * (0.5 * delta).sin(), -s * delta),
    };
    let x = lift_with_normal(params, pert, b.i1, b.phi1, b.phi2, p + p3, q + q3)?;
    let y = flow(&Hamiltonian::new(params, pert), 0.0, &x.to_array(), -dir * t, tol)?;
    Ok(PhaseState::from_array(&y))
}

/// Base point whose stable (unstable) fiber contains `x`.
pub fn fiber_footpoint(
    params: &Params,
    pert: &Pert,
    g: &NhimApprox,
    x: &State,
    kind: FiberKind,
    threshold: f64,
    tol: Tolerances<f64>,
) -> Result<FootpointResult> {
    let b = base_of(x);
    let (p3, q3) = g.normal(b.i1, b.phi1, b.phi2);
    let dq = (x.q[2] - q3 + PI).rem_euclid(TAU) - PI;
    if ((x.p[2] - p3).powi(2) + dq * dq).sqrt() > 0.5 {
        return domain("point outside the hyperbolic neighbourhood");
    }
    let (base, t) = footpoint_once(params, pert, g, x, kind, threshold, tol)?;
    let (half, _) = footpoint_once(params, pert, g, x, kind, 0.5 * threshold, tol)?;
    let err = ((base.i1 - half.i1).powi(2) + ang(base.phi1 - half.phi1).powi(2) + ang(base.phi2 - half.phi2).powi(2)).sqrt();
    Ok(FootpointResult { base, error_estimate: err, time: t })
}

fn ang(a: f64) -> f64 {
    (a + PI).rem_euclid(TAU) - PI
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ShootConfig {
    pub delta: f64,
    pub rel_tol: f64,
    pub abs_tol: f64,
    pub max_iter: usize,
    pub match_tol: f64,
}

impl Default for ShootConfig {
    fn default() -> Self {
        ShootConfig { delta: 1e-6, rel_tol: 1e-12, abs_tol: 1e-14, max_iter: 20, match_tol: 1e-9 }
    }
}

impl ShootConfig {
    pub fn tol(&self) -> Tolerances<f64> {
        Tolerances::new(self.rel_tol, self.abs_tol)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HomoclinicOrbit {
    pub branch: Branch,
    pub tau_seed: f64,
    /// Base point the unstable footpoint orbit passes through at reference time 0.
    pub reference: Base,
    /// Inner-orbit time offset of the unstable launch.
    pub s: f64,
    pub launch_up: Base,
    pub launch_down: Base,
    /// Flight time from the unstable launch to the matching section.
    pub t_up: f64,
    /// Flight time from the matching section to the stable launch.
    pub t_down: f64,
    /// Wave-map footpoints at the matching-section time.
    pub foot_up: Base,
    pub foot_down: Base,
    /// Scattering image of `reference`, read at reference time 0.
    pub scattered: Base,
    pub x_match: State,
    pub match_residual: f64,
    pub iterations: usize,
    /// Reciprocal condition number of the final shooting Jacobian.
    pub jacobian_rcond: f64,
    pub delta: f64,
}

impl HomoclinicOrbit {
    /// Time series from the unstable launch through the excursion to the stable launch.
    pub fn trajectory(&self, params: &Params, pert: &Pert, g: &NhimApprox, cfg: &ShootConfig) -> Result<OrbitRecord<f64>> {
        let x0 = fiber_point(params, pert, g, &self.launch_up, self.branch, FiberKind::Unstable, self.delta)?;
        integrate_orbit(params, pert, &x0, (0.0, self.t_up + self.t_down), cfg.rel_tol, cfg.abs_tol)
    }
}

struct Shooter<'a> {
    params: &'a Params,
    pert: &'a Pert,
    g: &'a NhimApprox,
    z: Base,
    branch: Branch,
    cfg: ShootConfig,
}

impl Shooter<'_> {
    fn tol(&self) -> Tolerances<f64> {
        self.cfg.tol()
    }

    fn up(&self, s: f64) -> Result<(Base, f64, State)> {
        let b = inner_flow(self.params, self.pert, self.g, &self.z, s, self.tol())?;
        let x = fiber_point(self.params, self.pert, self.g, &b, self.branch, FiberKind::Unstable, self.cfg.delta)?;
        let (t, y) = to_matching_section(self.params, self.pert, &x, self.branch, 1.0, self.tol())?;
        Ok((b, t, y))
    }

    fn down(&self, w: &Base) -> Result<(f64, State)> {
        let x = fiber_point(self.params, self.pert, self.g, w, self.branch, FiberKind::Stable, self.cfg.delta)?;
        let (t, y) = to_matching_section(self.params, self.pert, &x, self.branch, -1.0, self.tol())?;
        Ok((-t, y))
    }
}

fn osc_vec(x: &State) -> Vector4<f64> {
    let o = x.osc();
    Vector4::new(o[0], o[1], o[2], o[3])
}

/// Newton shooting for the homoclinic orbit through the unstable fiber of the
/// inner orbit of `z`, seeded by a Melnikov critical time `tau_guess`.
pub fn homoclinic_shoot(
    params: &Params,
    pert: &Pert,
    g: &NhimApprox,
    z: &Base,
    tau_guess: f64,
    branch: Branch,
    cfg: &ShootConfig,
) -> Result<HomoclinicOrbit> {
    let sh = Shooter { params, pert, g, z: *z, branch, cfg: *cfg };
    let t0 = separatrix_flight_time(params.lambda, cfg.delta);
    let mut s = -tau_guess - t0;
    let (_, t_up, _) = sh.up(s)?;
    let mut w = inner_flow(params, pert, g, z, s + t_up + t0, sh.tol())?;
    let degenerate = params.eps == 0.0 || pert.is_empty();
    let mut residual = f64::INFINITY;
    let mut iterations = 0;
    let mut rcond = 0.0;
    for it in 0..=cfg.max_iter {
        iterations = it;
        let (_, _, u) = sh.up(s)?;
        let (_, v) = sh.down(&w)?;
        let r = osc_vec(&u) - osc_vec(&v);
        residual = r.norm();
        if residual <= cfg.match_tol || degenerate || it == cfg.max_iter {
            break;
        }
        let mut jac = Matrix4::zeros();
        let hs = 1e-6;
        let (_, _, up) = sh.up(s + hs)?;
        let (_, _, um) = sh.up(s - hs)?;
        jac.set_column(0, &((osc_vec(&up) - osc_vec(&um)) / (2.0 * hs)));
        for k in 0..3 {
            let h = 1e-7;
            let mut wp = w;
            let mut wm = w;
            match k {
                0 => {
                    wp.i1 += h;
                    wm.i1 -= h;
                }
                1 => {
                    wp.phi1 += h;
                    wm.phi1 -= h;
                }
                _ => {
                    wp.phi2 += h;
                    wm.phi2 -= h;
                }
            }
            let (_, vp) = sh.down(&wp)?;
            let (_, vm) = sh.down(&wm)?;
            jac.set_column(k + 1, &(-(osc_vec(&vp) - osc_vec(&vm)) / (2.0 * h)));
        }
        let sv = jac.singular_values();
        rcond = sv.min() / sv.max();
        if rcond < 1e-12 {
            section::log_warn(&format!("near-singular shooting Jacobian (rcond {rcond:e}): possible tangency"));
        }
        let du = jac.lu().solve(&(-r)).ok_or_else(|| Error::Degenerate("singular shooting Jacobian".into()))?;
        // damp very large steps
        let scale = (0.5 / du.amax()).min(1.0);
        s += scale * du[0];
        w.i1 += scale * du[1];
        w.phi1 += scale * du[2];
        w.phi2 += scale * du[3];
        if !(w.i1 > 0.0 && w.i1 < params.j_max()) {
            return domain("shooting left the action range");
        }
    }
    if residual > cfg.match_tol && !degenerate {
        return Err(Error::Convergence(format!("homoclinic shooting stagnated at residual {residual:e}")));
    }
    let (launch_up, t_up, x_match) = sh.up(s)?;
    let (t_down, _) = sh.down(&w)?;
    let tol = sh.tol();
    let foot_up = inner_flow(params, pert, g, &launch_up, t_up, tol)?;
    let foot_down = inner_flow(params, pert, g, &w, -t_down, tol)?;
    let scattered = inner_flow(params, pert, g, &w, -(s + t_up + t_down), tol)?;
    Ok(HomoclinicOrbit {
        branch,
        tau_seed: tau_guess,
        reference: *z,
        s,
        launch_up,
        launch_down: w,
        t_up,
        t_down,
        foot_up,
        foot_down,
        scattered: Base { phi1: model::wrap_angle(scattered.phi1), phi2: model::wrap_angle(scattered.phi2), ..scattered },
        x_match,
        match_residual: residual,
        iterations,
        jacobian_rcond: rcond,
        delta: cfg.delta,
    })
}

/// Scattering image of `base` along the homoclinic family whose Melnikov
/// critical time is nearest `tau_center`.
#[allow(clippy::too_many_arguments)]
pub fn scattering_map_direct(
    params: &Params,
    pert: &Pert,
    g: &NhimApprox,
    base: &Base,
    branch: Branch,
    tau_center: f64,
    cfg: &ShootConfig,
) -> Result<HomoclinicOrbit> {
    let cps = match melnikov::critical_taus_near(params, pert, base.i1, base.phi1, base.phi2, branch, tau_center) {
        Ok(c) => c,
        Err(Error::NoCriticalPoint(m)) | Err(Error::Degenerate(m)) => {
            return domain(format!("base point outside every homoclinic channel: {m}"))
        }
        Err(e) => return Err(e),
    };
    if params.eps == 0.0 || pert.is_empty() {
        let mut orbit = homoclinic_shoot(params, pert, g, base, cps[0].tau, branch, cfg)?;
        orbit.scattered = *base;
        return Ok(orbit);
    }
    homoclinic_shoot(params, pert, g, base, cps[0].tau, branch, cfg)
}

/// Scattering map on the section `phi2 = 0`: the direct scattering image of
/// `(J, theta, 0)` carried back to `phi2 = 0` by the inner flow.
pub fn section_scattering(
    params: &Params,
    pert: &Pert,
    g: &NhimApprox,
    j: f64,
    theta: f64,
    branch: Branch,
    tau_center: f64,
    cfg: &ShootConfig,
) -> Result<(f64, f64)> {
    section_scattering_timed(params, pert, g, j, theta, branch, tau_center, cfg).map(|(j, th, _)| (j, th))
}

/// As [`section_scattering`], also returning the inner-flow time used to
/// bring the image back to `phi2 = 0`.
pub fn section_scattering_timed(
    params: &Params,
    pert: &Pert,
    g: &NhimApprox,
    j: f64,
    theta: f64,
    branch: Branch,
    tau_center: f64,
    cfg: &ShootConfig,
) -> Result<(f64, f64, f64)> {
    let base = Base { i1: j, phi1: theta, phi2: 0.0 };
    let orbit = scattering_map_direct(params, pert, g, &base, branch, tau_center, cfg)?;
    let mut b = orbit.scattered;
    let mut total = 0.0;
    for _ in 0..3 {
        let i2 = params.i2_on_sphere(b.i1).ok_or_else(|| Error::Domain("image beyond the sphere".into()))?;
        let (_, w2) = params.omega(b.i1, i2);
        let dt = -ang(b.phi2) / w2;
        if dt.abs() < 1e-13 {
            break;
        }
        b = inner_flow(params, pert, g, &b, dt, cfg.tol())?;
        total += dt;
    }
    Ok((b.i1, model::wrap_angle(b.phi1), total))
}

/// Direct splitting `H01(x^u) - H01(x^s)` at the matching section between the
/// unstable and stable fibers of the inner orbit of `base`, with separatrix
/// phase `tau` (first order: `-eps dM/dtau`).
pub fn splitting_direct(params: &Params, pert: &Pert, g: &NhimApprox, base: &Base, tau: f64, branch: Branch, cfg: &ShootConfig) -> Result<f64> {
    let tol = cfg.tol();
    let t0 = separatrix_flight_time(params.lambda, cfg.delta);
    let bu = inner_flow(params, pert, g, base, -tau - t0, tol)?;
    let bs = inner_flow(params, pert, g, base, -tau + t0, tol)?;
    let xu = fiber_point(params, pert, g, &bu, branch, FiberKind::Unstable, cfg.delta)?;
    let xs = fiber_point(params, pert, g, &bs, branch, FiberKind::Stable, cfg.delta)?;
    let (_, u) = to_matching_section(params, pert, &xu, branch, 1.0, tol)?;
    let (_, v) = to_matching_section(params, pert, &xs, branch, -1.0, tol)?;
    Ok(model::h01(params, u.p[2], u.q[2]) - model::h01(params, v.p[2], v.q[2]))
}

fn grad_h(params: &Params, pert: &Pert, x: &State) -> Result<Vector6<f64>> {
    let v = model::vector_field(params, pert, x)?;
    Ok(Vector6::new(v.q[0], -v.p[0], v.q[1], -v.p[1], v.q[2], -v.p[2]))
}

fn state_vec(x: &State) -> Vector6<f64> {
    Vector6::from_column_slice(&x.to_array())
}

/// Tangent vectors of the launch set, the flow and the energy gradient mapped to
/// the matching section; returns the unit normal of the resulting hyperplane.
fn manifold_normal(params: &Params, pert: &Pert, g: &NhimApprox, launch: &Base, branch: Branch, kind: FiberKind, t: f64, cfg: &ShootConfig) -> Result<(Vector6<f64>, State)> {
    let x0 = fiber_point(params, pert, g, launch, branch, kind, cfg.delta)?;
    let h = 1e-6;
    let mut vecs = Vec::with_capacity(5);
    for k in 0..3 {
        let mut bp = *launch;
        let mut bm = *launch;
        match k {
            0 => {
                bp.i1 += h;
                bm.i1 -= h;
            }
            1 => {
                bp.phi1 += h;
                bm.phi1 -= h;
            }
            _ => {
                bp.phi2 += h;
                bm.phi2 -= h;
            }
        }
        let xp = fiber_point(params, pert, g, &bp, branch, kind, cfg.delta)?;
        let xm = fiber_point(params, pert, g, &bm, branch, kind, cfg.delta)?;
        vecs.push((state_vec(&xp) - state_vec(&xm)) / (2.0 * h));
    }
    let mut y0 = vec![0.0; 42];
    y0[..6].copy_from_slice(&x0.to_array());
    for c in 0..6 {
        y0[6 + 6 * c + c] = 1.0;
    }
    let sys = Variational { params, pert };
    let y = flow(&sys, 0.0, &y0, t, cfg.tol())?;
    let phi = Matrix6::from_column_slice(&y[6..42]);
    let end = PhaseState::from_array(&y[..6]);
    let mut span: Vec<Vector6<f64>> = vecs.into_iter().map(|v| phi * v).collect();
    span.push(state_vec(&model::vector_field(params, pert, &end)?));
    span.push(grad_h(params, pert, &end)?);
    // smallest eigenvector of the projector sum
    let mut m = Matrix6::zeros();
    let mut basis: Vec<Vector6<f64>> = Vec::new();
    for v in span {
        let mut u = v;
        for b in &basis {
            u -= b * b.dot(&u);
        }
        let n = u.norm();
        if n > 1e-300 {
            basis.push(u / n);
        }
    }
    for b in &basis {
        m += b * b.transpose();
    }
    let eig = SymmetricEigen::new(m);
    let (imin, _) = eig.eigenvalues.iter().enumerate().min_by(|a, b| a.1.total_cmp(b.1)).expect("six eigenvalues");
    Ok((eig.eigenvectors.column(imin).into_owned(), end))
}

/// Angle between the tangent hyperplanes (inside the energy level) of the
/// unstable and stable manifolds at the matching point.
pub fn transversality_angle(params: &Params, pert: &Pert, g: &NhimApprox, orbit: &HomoclinicOrbit, cfg: &ShootConfig) -> Result<f64> {
    let (nu, _) = manifold_normal(params, pert, g, &orbit.launch_up, orbit.branch, FiberKind::Unstable, orbit.t_up, cfg)?;
    let (ns, _) = manifold_normal(params, pert, g, &orbit.launch_down, orbit.branch, FiberKind::Stable, -orbit.t_down, cfg)?;
    let c = nu.dot(&ns).abs();
    let perp = (nu - ns * nu.dot(&ns)).norm();
    Ok(perp.atan2(c))
}

/// Lift of a base point to the manifold.
pub fn lift_base(params: &Params, pert: &Pert, g: &NhimApprox, b: &Base) -> Result<State> {
    let (p3, q3) = g.normal(b.i1, b.phi1, b.phi2);
    lift_with_normal(params, pert, b.i1, b.phi1, b.phi2, p3, q3)
}

/// Base point of the inner orbit of `b` after time `t` when the manifold is
/// exactly invariant with unperturbed inner flow.
pub fn unperturbed_base_flow(params: &Params, b: &Base, t: f64) -> Result<Base> {
    let i2 = params.i2_on_sphere(b.i1).ok_or_else(|| Error::Domain("I1 beyond the sphere".into()))?;
    let aa = model::unperturbed_flow(params, &ActionAngle { i1: b.i1, i2, phi1: b.phi1, phi2: b.phi2 }, t);
    Ok(Base { i1: aa.i1, phi1: aa.phi1, phi2: aa.phi2 })
}
