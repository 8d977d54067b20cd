//! Melnikov potential along the pendulum separatrices, its critical points,
//! first-order splitting and the predicted scattering shift of `I1`.
//!
//! The integral is taken in the separatrix time `u = tau + t`, so the pendulum
//! factors are fixed functions of `u` and `tau` enters only through the inner
//! orbit evaluated at `u - tau`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::model::{self, ActionAngle, Branch, PendulumFactor, Term};
use crate::{Params, Pert};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MelnikovSample {
    pub i1: f64,
    pub phi1: f64,
    pub phi2: f64,
    pub tau: f64,
    pub branch: Branch,
    pub value: f64,
    pub d_tau: f64,
    pub d2_tau: f64,
    pub d_phi1: f64,
    /// `d^2 M / (d tau d phi1)`
    pub d_tau_phi1: f64,
    pub quad_error: f64,
}

/// `int sech^2(lambda s) cos(omega s) ds` over the real line.
pub fn sech2_transform(omega: f64, lambda: f64) -> f64 {
    let x = std::f64::consts::PI * omega / (2.0 * lambda);
    if x.abs() < 1e-8 {
        return 2.0 / lambda;
    }
    std::f64::consts::PI * omega / (lambda * lambda * x.sinh())
}

/// Value and time derivatives `(f, f', f'')` of a pendulum factor along the
/// separatrix at time `u`, with the unperturbed value at the saddle removed.
fn factor_along(f: PendulumFactor, lambda: f64, u: f64, branch: Branch) -> [f64; 3] {
    let lu = lambda * u;
    let s = 1.0 / lu.cosh();
    let t = lu.tanh();
    let sg: f64 = branch.sign();
    let (l, l2) = (lambda, lambda * lambda);
    match f {
        PendulumFactor::CosMinusOne => {
            [-2.0 * s * s, 4.0 * l * s * s * t, 4.0 * l2 * s * s * (s * s - 2.0 * t * t)]
        }
        PendulumFactor::Sin => [
            -2.0 * sg * s * t,
            -2.0 * sg * l * s * (s * s - t * t),
            -2.0 * sg * l2 * (s * t * t * t - 5.0 * s * s * s * t),
        ],
        PendulumFactor::P => [
            2.0 * sg * l * s,
            -2.0 * sg * l2 * s * t,
            -2.0 * sg * l2 * l * s * (s * s - t * t),
        ],
        PendulumFactor::P2 => [
            4.0 * l2 * s * s,
            -8.0 * l2 * l * s * s * t,
            -8.0 * l2 * l2 * s * s * (s * s - 2.0 * t * t),
        ],
        PendulumFactor::One => [0.0; 3],
    }
}

/// Inner orbit data needed by the integrand.
struct Inner {
    r1: f64,
    r2: f64,
    w1: f64,
    w2: f64,
    phi1: f64,
    phi2: f64,
}

impl Inner {
    fn new(params: &Params, i1: f64, phi1: f64, phi2: f64) -> Result<Self> {
        let jmax = params.j_max();
        if !(i1 > 0.0 && i1 < jmax) {
            return domain(format!("I1 = {i1} outside (0, {jmax})"));
        }
        let i2 = params.i2_on_sphere(i1).ok_or_else(|| Error::Domain("I1 beyond the sphere".into()))?;
        let (w1, w2) = params.omega(i1, i2);
        Ok(Inner { r1: (2.0 * i1).sqrt(), r2: (2.0 * i2).sqrt(), w1, w2, phi1, phi2 })
    }

    fn osc(&self, t: f64) -> [f64; 4] {
        let a1 = self.phi1 + self.w1 * t;
        let a2 = self.phi2 + self.w2 * t;
        [-self.r1 * a1.sin(), self.r1 * a1.cos(), -self.r2 * a2.sin(), self.r2 * a2.cos()]
    }
}

const NV: usize = 5;

/// Integrand `[M, M_tau, M_tautau, M_phi1, M_tauphi1]` at separatrix time `u`.
fn integrand(terms: &[Term<f64>], lambda: f64, inner: &Inner, tau: f64, branch: Branch, u: f64) -> [f64; NV] {
    let osc = inner.osc(u - tau);
    let mut out = [0.0; NV];
    for term in terms {
        let [f, f1, f2] = factor_along(term.factor, lambda, u, branch);
        if f == 0.0 && f1 == 0.0 && f2 == 0.0 {
            continue;
        }
        let m = term.coef * term.monomial(&osc);
        let g = term.monomial_grad(&osc);
        let m_phi = term.coef * (g[1] * osc[0] - g[0] * osc[1]);
        out[0] += f * m;
        out[1] += f1 * m;
        out[2] += f2 * m;
        out[3] += f * m_phi;
        out[4] += f1 * m_phi;
    }
    out
}

// Gauss-Kronrod 7-15 nodes and weights on [-1, 1].
const XGK: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_2,
    0.140_653_259_715_525_9,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_727_8,
];
const WG: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

fn gk15(f: &dyn Fn(f64) -> [f64; NV], a: f64, b: f64) -> ([f64; NV], f64) {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let mut k = [0.0; NV];
    let mut g = [0.0; NV];
    let fc = f(c);
    for v in 0..NV {
        k[v] = WGK[7] * fc[v];
        g[v] = WG[3] * fc[v];
    }
    for j in 0..7 {
        let x = h * XGK[j];
        let f1 = f(c - x);
        let f2 = f(c + x);
        for v in 0..NV {
            k[v] += WGK[j] * (f1[v] + f2[v]);
            if j % 2 == 1 {
                g[v] += WG[j / 2] * (f1[v] + f2[v]);
            }
        }
    }
    let mut err = 0.0f64;
    for v in 0..NV {
        k[v] *= h;
        g[v] *= h;
        err = err.max((k[v] - g[v]).abs());
    }
    (k, err)
}

/// Globally adaptive GK15 on `[a, b]` until the summed error estimate is below `tol`.
fn adaptive(f: &dyn Fn(f64) -> [f64; NV], a: f64, b: f64, pieces: usize, tol: f64) -> Result<([f64; NV], f64)> {
    let mut segs: Vec<(f64, f64, [f64; NV], f64)> = (0..pieces)
        .map(|k| {
            let x0 = a + (b - a) * k as f64 / pieces as f64;
            let x1 = a + (b - a) * (k + 1) as f64 / pieces as f64;
            let (v, e) = gk15(f, x0, x1);
            (x0, x1, v, e)
        })
        .collect();
    for _ in 0..4000 {
        let total: f64 = segs.iter().map(|s| s.3).sum();
        if total <= tol {
            break;
        }
        let (idx, _) = segs
            .iter()
            .enumerate()
            .max_by(|x, y| x.1 .3.total_cmp(&y.1 .3))
            .expect("non-empty");
        let (x0, x1, _, _) = segs.swap_remove(idx);
        let xm = 0.5 * (x0 + x1);
        let (v0, e0) = gk15(f, x0, xm);
        let (v1, e1) = gk15(f, xm, x1);
        segs.push((x0, xm, v0, e0));
        segs.push((xm, x1, v1, e1));
    }
    let total: f64 = segs.iter().map(|s| s.3).sum();
    if total > tol && total > 1e-13 {
        return Err(Error::Convergence(format!("quadrature error {total:e} above {tol:e}")));
    }
    let mut sum = [0.0; NV];
    for s in &segs {
        for v in 0..NV {
            sum[v] += s.2[v];
        }
    }
    Ok((sum, total))
}

/// Bound on `|factor^(k)(u)| e^{lambda |u|}` for `k <= 2`, both branches.
fn factor_envelope(f: PendulumFactor, lambda: f64) -> f64 {
    let l = lambda.max(1.0);
    match f {
        PendulumFactor::One => 0.0,
        PendulumFactor::P2 => 96.0 * l.powi(4),
        _ => 48.0 * l.powi(3),
    }
}

/// Bound on the inner monomial and its `phi1` derivative along the orbit.
fn monomial_bound(term: &Term<f64>, inner: &Inner) -> f64 {
    let e = term.exps;
    let m = inner.r1.max(1e-300).powi((e[0] + e[1]) as i32) * inner.r2.max(1e-300).powi((e[2] + e[3]) as i32);
    term.coef.abs() * m * (1.0 + (e[0] + e[1]) as f64)
}

fn tail_constant(pert: &Pert, lambda: f64, inner: &Inner) -> f64 {
    pert.terms.iter().map(|t| factor_envelope(t.factor, lambda) * monomial_bound(t, inner)).sum()
}

/// Cutoff `T` with the tail bound `2 K e^{-lambda T} / lambda` below `tol`, capped at `60/lambda`.
fn cutoff(k: f64, lambda: f64, tol: f64) -> Result<(f64, f64)> {
    let cap = 60.0 / lambda;
    let tail = |t: f64| 2.0 * k * (-lambda * t).exp() / lambda;
    if k == 0.0 {
        return Ok((1.0 / lambda, 0.0));
    }
    let want = ((2.0 * k / (lambda * 0.1 * tol)).ln() / lambda).max(1.0 / lambda);
    if want <= cap {
        Ok((want, tail(want)))
    } else if tail(cap) <= tol {
        Ok((cap, tail(cap)))
    } else {
        Err(Error::Tail(format!("tail bound {:e} exceeds {tol:e} at T = {cap}", tail(cap))))
    }
}

#[allow(clippy::too_many_arguments)]
pub fn melnikov_potential(
    params: &Params,
    pert: &Pert,
    i1: f64,
    phi1: f64,
    phi2: f64,
    tau: f64,
    branch: Branch,
    tol: f64,
) -> Result<MelnikovSample> {
    if !(tol >= 1e-12) {
        return domain("quadrature tolerance must be >= 1e-12");
    }
    let inner = Inner::new(params, i1, phi1, phi2)?;
    let lambda = params.lambda;
    let k = tail_constant(pert, lambda, &inner);
    let (tcut, tail) = cutoff(k, lambda, tol)?;
    let f = |u: f64| integrand(&pert.terms, lambda, &inner, tau, branch, u);
    // resolve the inner oscillation: a few nodes per fastest period
    let wmax = pert
        .terms
        .iter()
        .map(|t| ((t.exps[0] + t.exps[1]) as f64) * inner.w1 + ((t.exps[2] + t.exps[3]) as f64) * inner.w2)
        .fold(lambda, f64::max);
    let pieces = ((2.0 * tcut * wmax / std::f64::consts::PI).ceil() as usize).clamp(8, 2000);
    let (v, err) = adaptive(&f, -tcut, tcut, pieces, (tol - tail).max(0.5 * tol))?;
    Ok(MelnikovSample {
        i1,
        phi1,
        phi2,
        tau,
        branch,
        value: v[0],
        d_tau: v[1],
        d2_tau: v[2],
        d_phi1: v[3],
        d_tau_phi1: v[4],
        quad_error: err + tail,
    })
}

/// Closed form for perturbations made of `(cos q3 - 1)` times `q1`, `q2` or `q1 q2`
/// monomials; `None` if another term is present.
pub fn closed_form_cos_terms(params: &Params, pert: &Pert, i1: f64, phi1: f64, phi2: f64, tau: f64) -> Option<f64> {
    let inner = Inner::new(params, i1, phi1, phi2).ok()?;
    let lam = params.lambda;
    let (a1, a2) = (phi1 - inner.w1 * tau, phi2 - inner.w2 * tau);
    let mut m = 0.0;
    for t in &pert.terms {
        if t.factor != PendulumFactor::CosMinusOne {
            return None;
        }
        let v = match t.exps {
            [0, 1, 0, 0] => inner.r1 * a1.cos() * sech2_transform(inner.w1, lam),
            [0, 0, 0, 1] => inner.r2 * a2.cos() * sech2_transform(inner.w2, lam),
            [0, 1, 0, 1] => {
                0.5 * inner.r1
                    * inner.r2
                    * ((a1 + a2).cos() * sech2_transform(inner.w1 + inner.w2, lam)
                        + (a1 - a2).cos() * sech2_transform(inner.w1 - inner.w2, lam))
            }
            _ => return None,
        };
        m += -2.0 * t.coef * v;
    }
    Some(m)
}

const TAU_NODES: usize = 64;
const MEL_TOL: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CriticalPoint {
    pub tau: f64,
    pub d2_tau: f64,
    pub sample: MelnikovSample,
}

/// All nondegenerate critical points of `tau -> M` in `[-pi/omega1, pi/omega1)`,
/// sorted by `|tau|`.
pub fn critical_taus(
    params: &Params,
    pert: &Pert,
    i1: f64,
    phi1: f64,
    phi2: f64,
    branch: Branch,
) -> Result<Vec<CriticalPoint>> {
    critical_taus_near(params, pert, i1, phi1, phi2, branch, 0.0)
}

/// Critical points in the window of length `2pi/omega1` centred at `center`,
/// sorted by distance to `center`.
#[allow(clippy::too_many_arguments)]
pub fn critical_taus_near(
    params: &Params,
    pert: &Pert,
    i1: f64,
    phi1: f64,
    phi2: f64,
    branch: Branch,
    center: f64,
) -> Result<Vec<CriticalPoint>> {
    let inner = Inner::new(params, i1, phi1, phi2)?;
    let period = std::f64::consts::TAU / inner.w1;
    let t0 = center - 0.5 * period;
    let eval = |tau: f64| melnikov_potential(params, pert, i1, phi1, phi2, tau, branch, MEL_TOL);
    let grid: Vec<MelnikovSample> = (0..=TAU_NODES)
        .map(|k| eval(t0 + period * k as f64 / TAU_NODES as f64))
        .collect::<Result<_>>()?;
    let scale = grid.iter().map(|s| s.d_tau.abs()).fold(0.0, f64::max);
    let vscale = grid.iter().map(|s| s.value.abs()).fold(0.0, f64::max);
    if scale <= 1e-12 * (1.0 + vscale) {
        return Err(Error::NoCriticalPoint("no critical point in window: M is constant in tau".into()));
    }
    let mut out = Vec::new();
    for k in 0..TAU_NODES {
        let (a, b) = (&grid[k], &grid[k + 1]);
        if a.d_tau == 0.0 || a.d_tau.signum() != b.d_tau.signum() {
            let cp = refine_root(&eval, a, b, scale, inner.w1)?;
            out.push(cp);
        }
    }
    if out.is_empty() {
        return Err(Error::NoCriticalPoint("no critical point in window".into()));
    }
    out.sort_by(|x, y| (x.tau - center).abs().total_cmp(&(y.tau - center).abs()));
    Ok(out)
}

fn refine_root(
    eval: &dyn Fn(f64) -> Result<MelnikovSample>,
    a: &MelnikovSample,
    b: &MelnikovSample,
    scale: f64,
    w1: f64,
) -> Result<CriticalPoint> {
    let (mut lo, mut hi) = (a.tau, b.tau);
    let (mut flo, _) = (a.d_tau, b.d_tau);
    let mut s = eval(lo - flo * (hi - lo) / (b.d_tau - flo))?;
    for _ in 0..60 {
        if s.d_tau.abs() <= 1e-10 * scale {
            break;
        }
        if s.d_tau.signum() == flo.signum() {
            lo = s.tau;
            flo = s.d_tau;
        } else {
            hi = s.tau;
        }
        let newton = s.tau - s.d_tau / s.d2_tau;
        let next = if s.d2_tau != 0.0 && newton > lo && newton < hi { newton } else { 0.5 * (lo + hi) };
        s = eval(next)?;
    }
    if s.d_tau.abs() > 1e-10 * scale {
        return Err(Error::Convergence(format!("critical tau residual {:e}", s.d_tau)));
    }
    if s.d2_tau.abs() < 1e-8 * scale * w1 {
        return Err(Error::Degenerate(format!("degenerate critical point at tau = {}", s.tau)));
    }
    Ok(CriticalPoint { tau: s.tau, d2_tau: s.d2_tau, sample: s })
}

/// The critical point nearest `tau = 0` and its second derivative.
pub fn critical_tau(params: &Params, pert: &Pert, i1: f64, phi1: f64, phi2: f64, branch: Branch) -> Result<(f64, f64)> {
    let v = critical_taus(params, pert, i1, phi1, phi2, branch)?;
    Ok((v[0].tau, v[0].d2_tau))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Base {
    pub i1: f64,
    pub phi1: f64,
    pub phi2: f64,
}

/// First-order transversal splitting `-eps dM/dtau` through `gamma(tau)`.
pub fn splitting_distance(params: &Params, pert: &Pert, base: &Base, tau: f64, branch: Branch, eps: f64) -> Result<f64> {
    let s = melnikov_potential(params, pert, base.i1, base.phi1, base.phi2, tau, branch, MEL_TOL)?;
    Ok(-eps * s.d_tau)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShiftPair {
    pub tau_star: f64,
    /// `-eps dM/dphi1` at `tau*`.
    pub reduced: f64,
    /// `-eps d/dtau {I1, M}` at `tau*` with `{I1, M} = -dM/dphi1`.
    pub literal: f64,
}

fn shift_of(cp: &CriticalPoint, eps: f64) -> ShiftPair {
    ShiftPair { tau_star: cp.tau, reduced: -eps * cp.sample.d_phi1, literal: eps * cp.sample.d_tau_phi1 }
}

/// First-order change of `I1` under the scattering map of the family nearest `tau = 0`.
pub fn scattering_shift(
    params: &Params,
    pert: &Pert,
    i1: f64,
    phi1: f64,
    phi2: f64,
    branch: Branch,
    eps: f64,
) -> Result<ShiftPair> {
    Ok(scattering_shifts(params, pert, i1, phi1, phi2, branch, eps)?[0])
}

/// Shifts of every homoclinic family in the window.
pub fn scattering_shifts(
    params: &Params,
    pert: &Pert,
    i1: f64,
    phi1: f64,
    phi2: f64,
    branch: Branch,
    eps: f64,
) -> Result<Vec<ShiftPair>> {
    if eps == 0.0 {
        let cps = critical_taus(params, pert, i1, phi1, phi2, branch)?;
        return Ok(cps.iter().map(|c| ShiftPair { tau_star: c.tau, reduced: 0.0, literal: 0.0 }).collect());
    }
    let cps = critical_taus(params, pert, i1, phi1, phi2, branch)?;
    Ok(cps.iter().map(|c| shift_of(c, eps)).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoverageRow {
    pub i1: f64,
    /// Number of nondegenerate families found over the angle samples.
    pub n_families: usize,
    pub max_up: f64,
    pub max_down: f64,
    pub up: bool,
    pub down: bool,
}

impl CoverageRow {
    pub fn both_signs(&self) -> bool {
        self.up && self.down
    }
}

/// For each action in the grid, whether some family raises and some lowers `I1`.
/// Angles are sampled on an `n_phi1 x n_phi2` grid over both branches.
pub fn coverage_report(
    params: &Params,
    pert: &Pert,
    eps: f64,
    i1_grid: &[f64],
    n_phi1: usize,
    n_phi2: usize,
) -> Result<Vec<CoverageRow>> {
    let tau = std::f64::consts::TAU;
    i1_grid
        .par_iter()
        .map(|&i1| {
            let mut row = CoverageRow { i1, n_families: 0, max_up: 0.0, max_down: 0.0, up: false, down: false };
            let mut dphi_scale = 0.0f64;
            let mut shifts = Vec::new();
            for a in 0..n_phi1 {
                for b in 0..n_phi2 {
                    let phi1 = tau * a as f64 / n_phi1 as f64;
                    let phi2 = tau * b as f64 / n_phi2 as f64;
                    for br in [Branch::Plus, Branch::Minus] {
                        match critical_taus(params, pert, i1, phi1, phi2, br) {
                            Ok(cps) => {
                                for cp in &cps {
                                    dphi_scale = dphi_scale.max(cp.sample.value.abs());
                                    shifts.push(-eps * cp.sample.d_phi1);
                                }
                            }
                            Err(Error::NoCriticalPoint(_)) | Err(Error::Degenerate(_)) => {}
                            Err(e) => return Err(e),
                        }
                    }
                }
            }
            let thresh = 1e-7 * eps * dphi_scale.max(1e-300);
            row.n_families = shifts.len();
            for s in shifts {
                row.max_up = row.max_up.max(s);
                row.max_down = row.max_down.min(s);
            }
            row.up = eps > 0.0 && row.max_up > thresh;
            row.down = eps > 0.0 && row.max_down < -thresh;
            Ok(row)
        })
        .collect()
}

/// Inner base point of the unperturbed orbit after time `t`.
pub fn inner_flow(params: &Params, base: &Base, t: f64) -> Result<Base> {
    let i2 = params.i2_on_sphere(base.i1).ok_or_else(|| Error::Domain("I1 beyond the sphere".into()))?;
    let aa = model::unperturbed_flow(params, &ActionAngle { i1: base.i1, i2, phi1: base.phi1, phi2: base.phi2 }, t);
    Ok(Base { i1: aa.i1, phi1: aa.phi1, phi2: aa.phi2 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelParams;
    use proptest::prelude::*;
    use std::f64::consts::{PI, TAU};

    fn p() -> Params {
        ModelParams::default()
    }

    /// a1 = b1 = 1, I1 = 0.5 gives omega1 = 1.5
    fn p15() -> Params {
        ModelParams::new(1.0, 2.0, 1.0, 0.5, 1.0, 1.6875, 0.0).unwrap()
    }

    fn single() -> Pert {
        Pert::single_harmonic()
    }

    #[test]
    fn transform_constant() {
        assert!((sech2_transform(1.0, 1.0) - 1.3651).abs() < 1e-4);
        assert!((sech2_transform(1e-10, 2.0) - 1.0).abs() < 1e-12);
        assert_eq!(sech2_transform(-0.7, 1.0), sech2_transform(0.7, 1.0));
    }

    #[test]
    fn factor_derivatives_fd() {
        let h = 1e-5;
        for f in [PendulumFactor::CosMinusOne, PendulumFactor::Sin, PendulumFactor::P, PendulumFactor::P2] {
            for br in [Branch::Plus, Branch::Minus] {
                for &u in &[-2.0, -0.3, 0.0, 0.7, 3.0] {
                    let lam = 1.3;
                    let [v, d1, d2] = factor_along(f, lam, u, br);
                    let (p3, q3) = model::pendulum_separatrix(lam, u, br);
                    let direct = f.eval(p3, q3);
                    assert!((v - direct).abs() < 1e-12, "{f:?} {br:?} {u}");
                    let vp = factor_along(f, lam, u + h, br);
                    let vm = factor_along(f, lam, u - h, br);
                    assert!((d1 - (vp[0] - vm[0]) / (2.0 * h)).abs() < 1e-7);
                    assert!((d2 - (vp[1] - vm[1]) / (2.0 * h)).abs() < 1e-7);
                }
            }
        }
    }

    #[test]
    fn single_harmonic_closed_form() {
        let prm = ModelParams::new(1.6, 1.0, 0.8, 0.4, 1.0, 0.2, 0.0).unwrap();
        let pert = single();
        for &(i1, phi1, tau) in &[(0.05, 0.3, 0.0), (0.1, 1.0, 0.4), (0.02, -2.0, 3.0)] {
            let s = melnikov_potential(&prm, &pert, i1, phi1, 0.4, tau, Branch::Plus, 1e-12).unwrap();
            let exact = closed_form_cos_terms(&prm, &pert, i1, phi1, 0.4, tau).unwrap();
            assert!((s.value - exact).abs() <= 1e-8 * exact.abs().max(1e-3), "{} {}", s.value, exact);
            assert!(s.quad_error <= 1e-12);
        }
        // omega1 = 1, lambda = 1: C = 1.3651
        let prm1 = ModelParams::new(0.9, 1.6, 0.2, 0.8, 1.0, 0.2, 0.0).unwrap();
        let i1 = 0.5f64;
        let prm1 = prm1.with_c(0.9 * i1 + 0.1 * i1 * i1 + 0.01);
        let i2 = prm1.i2_on_sphere(i1).unwrap();
        let (w1, _) = prm1.omega(i1, i2);
        assert!((w1 - 1.0).abs() < 1e-14);
        let s = melnikov_potential(&prm1, &pert, i1, 0.0, 0.0, 0.0, Branch::Plus, 1e-12).unwrap();
        let expect = -2.0 * (2.0 * i1).sqrt() * sech2_transform(1.0, 1.0);
        assert!((s.value - expect).abs() < 1e-8 * expect.abs());
    }

    #[test]
    fn two_harmonic_closed_form() {
        let pert = Pert::two_harmonic();
        for &(i1, phi1, phi2, tau) in &[(0.05, 0.3, 1.1, 0.0), (0.12, 2.0, -0.4, 1.3)] {
            let s = melnikov_potential(&p(), &pert, i1, phi1, phi2, tau, Branch::Minus, 1e-12).unwrap();
            let exact = closed_form_cos_terms(&p(), &pert, i1, phi1, phi2, tau).unwrap();
            assert!((s.value - exact).abs() <= 1e-8 * exact.abs(), "{} {}", s.value, exact);
        }
    }

    #[test]
    fn pendulum_only_is_constant() {
        let pert = Pert { terms: vec![Term::new(1.0, PendulumFactor::CosMinusOne, [0, 0, 0, 0])] };
        for &tau in &[-1.0, 0.0, 2.5] {
            let s = melnikov_potential(&p(), &pert, 0.1, 0.2, 0.3, tau, Branch::Plus, 1e-12).unwrap();
            assert!(s.d_tau.abs() <= 1e-9);
            assert!((s.value + 4.0 / p().lambda).abs() < 1e-10);
        }
        assert!(matches!(critical_tau(&p(), &pert, 0.1, 0.2, 0.3, Branch::Plus), Err(Error::NoCriticalPoint(_))));
        let cov = coverage_report(&p(), &pert, 1e-3, &[0.05, 0.1], 4, 2).unwrap();
        assert!(cov.iter().all(|r| r.n_families == 0 && !r.up && !r.down));
    }

    #[test]
    fn branch_symmetry_p_factor() {
        let pert = Pert { terms: vec![Term::new(1.0, PendulumFactor::P, [0, 1, 0, 0])] };
        let a = melnikov_potential(&p(), &pert, 0.1, 0.7, 0.2, 0.3, Branch::Plus, 1e-12).unwrap();
        let b = melnikov_potential(&p(), &pert, 0.1, 0.7, 0.2, 0.3, Branch::Minus, 1e-12).unwrap();
        assert!((a.value + b.value).abs() < 1e-11);
        assert!(a.value.abs() > 1e-3);
        // cos-type factors are even under the branch swap
        let s = single();
        let a = melnikov_potential(&p(), &s, 0.1, 0.7, 0.2, 0.3, Branch::Plus, 1e-12).unwrap();
        let b = melnikov_potential(&p(), &s, 0.1, 0.7, 0.2, 0.3, Branch::Minus, 1e-12).unwrap();
        assert!((a.value - b.value).abs() < 1e-12);
    }

    #[test]
    fn direct_quadrature_oracle() {
        // brute-force trapezoid on the raw integrand with the phase-space separatrix
        let pert = Pert::two_harmonic().with_term(Term::new(0.3, PendulumFactor::Sin, [1, 0, 0, 0]));
        let prm = p();
        let (i1, phi1, phi2, tau) = (0.08, 0.4, 1.9, -0.6);
        let s = melnikov_potential(&prm, &pert, i1, phi1, phi2, tau, Branch::Plus, 1e-12).unwrap();
        let inner = Inner::new(&prm, i1, phi1, phi2).unwrap();
        let h = 1e-3;
        let mut sum = 0.0;
        let n = 80_000;
        for k in -n..=n {
            let t = k as f64 * h;
            let osc = inner.osc(t);
            let (p3, q3) = model::pendulum_separatrix(prm.lambda, tau + t, Branch::Plus);
            let x = model::PhaseState::with_osc(osc, p3, q3);
            let x0 = model::PhaseState::with_osc(osc, 0.0, 0.0);
            sum += pert.value(&x) - pert.value(&x0);
        }
        let trap = sum * h;
        assert!((trap - s.value).abs() < 1e-9, "{trap} {}", s.value);
    }

    #[test]
    fn critical_tau_example() {
        let prm = p15();
        let i2 = prm.i2_on_sphere(0.5).unwrap();
        let (w1, w2) = prm.omega(0.5, i2);
        assert!((w1 - 1.5).abs() < 1e-14 && (w2 - 2.25).abs() < 1e-14);
        let (tau, d2) = critical_tau(&prm, &single(), 0.5, 0.3, 0.0, Branch::Plus).unwrap();
        assert!((tau - 0.2).abs() < 1e-9, "{tau}");
        let h = 1e-4;
        let sp = melnikov_potential(&prm, &single(), 0.5, 0.3, 0.0, tau + h, Branch::Plus, 1e-12).unwrap();
        let sm = melnikov_potential(&prm, &single(), 0.5, 0.3, 0.0, tau - h, Branch::Plus, 1e-12).unwrap();
        let fd = (sp.d_tau - sm.d_tau) / (2.0 * h);
        assert!((fd - d2).abs() <= 1e-5 * d2.abs());
        let all = critical_taus(&prm, &single(), 0.5, 0.3, 0.0, Branch::Plus).unwrap();
        assert_eq!(all.len(), 2);
        assert!((all[1].tau - (0.3 - PI) / 1.5).abs() < 1e-9);
    }

    #[test]
    fn splitting_examples() {
        let prm = p15();
        let pert = single();
        let (tau, _) = critical_tau(&prm, &pert, 0.5, 0.3, 0.0, Branch::Plus).unwrap();
        let base = Base { i1: 0.5, phi1: 0.3, phi2: 0.0 };
        assert!(splitting_distance(&prm, &pert, &base, tau, Branch::Plus, 1e-3).unwrap().abs() < 1e-12);
        // sin(phi1 - omega1 tau) = 1
        let t1 = (0.3 - PI / 2.0) / 1.5;
        let d = splitting_distance(&prm, &pert, &base, t1, Branch::Plus, 1e-3).unwrap();
        let c = sech2_transform(1.5, 1.0);
        let expect = 1e-3 * 2.0 * 1.0 * 1.5 * c;
        assert!((d - expect).abs() < 1e-10 * expect, "{d} {expect}");
        let d2 = splitting_distance(&prm, &pert, &base, t1, Branch::Plus, 2e-3).unwrap();
        assert_eq!(d2, 2.0 * d);
    }

    #[test]
    fn shift_examples() {
        let prm = p();
        let s = single();
        for &phi1 in &[0.1, 1.0, 2.5] {
            for sh in scattering_shifts(&prm, &s, 0.08, phi1, 0.5, Branch::Plus, 1e-3).unwrap() {
                assert!(sh.reduced.abs() < 1e-12, "{sh:?}");
            }
        }
        let two = Pert::two_harmonic();
        let sh = scattering_shift(&prm, &two, 0.08, 0.5, 1.0, Branch::Plus, 0.0).unwrap();
        assert_eq!((sh.reduced, sh.literal), (0.0, 0.0));
        let mut nonzero = 0;
        for k in 0..8 {
            let phi2 = 0.8 * k as f64;
            let sh = scattering_shift(&prm, &two, 0.08, 0.5, phi2, Branch::Plus, 1e-3).unwrap();
            if sh.reduced.abs() > 1e-6 {
                nonzero += 1;
            }
        }
        assert!(nonzero >= 6);
    }

    #[test]
    fn coverage_examples() {
        let prm = p();
        let jmax = prm.j_max();
        let grid = [0.2 * jmax, 0.5 * jmax, 0.8 * jmax];
        let two = coverage_report(&prm, &Pert::two_harmonic(), 1e-3, &grid, 8, 4).unwrap();
        assert!(two.iter().all(|r| r.both_signs()), "{two:?}");
        let one = coverage_report(&prm, &single(), 1e-3, &grid, 4, 2).unwrap();
        assert!(one.iter().all(|r| r.n_families > 0 && !r.both_signs()));
    }

    #[test]
    fn envelope_property() {
        let prm = p();
        let two = Pert::two_harmonic();
        let (i1, phi1, phi2) = (0.08, 0.5, 1.2);
        let reduced = |phi1: f64| {
            let (t, _) = critical_tau(&prm, &two, i1, phi1, phi2, Branch::Plus).unwrap();
            melnikov_potential(&prm, &two, i1, phi1, phi2, t, Branch::Plus, 1e-12).unwrap().value
        };
        let h = 1e-4;
        let fd = (reduced(phi1 + h) - reduced(phi1 - h)) / (2.0 * h);
        let (t, _) = critical_tau(&prm, &two, i1, phi1, phi2, Branch::Plus).unwrap();
        let s = melnikov_potential(&prm, &two, i1, phi1, phi2, t, Branch::Plus, 1e-12).unwrap();
        assert!((fd - s.d_phi1).abs() <= 1e-4 * s.d_phi1.abs(), "{fd} {}", s.d_phi1);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(melnikov_potential(&p(), &single(), 0.0, 0.0, 0.0, 0.0, Branch::Plus, 1e-10).is_err());
        assert!(melnikov_potential(&p(), &single(), 1.0, 0.0, 0.0, 0.0, Branch::Plus, 1e-10).is_err());
        assert!(melnikov_potential(&p(), &single(), 0.1, 0.0, 0.0, 0.0, Branch::Plus, 1e-13).is_err());
    }

    #[test]
    fn tail_cutoff_too_strict() {
        // a huge coefficient makes the tail bound at the cap exceed the tolerance
        let pert = Pert { terms: vec![Term::new(1e40, PendulumFactor::Sin, [0, 1, 0, 0])] };
        let prm = p().with_c(0.2);
        let r = melnikov_potential(&prm, &pert, 0.1, 0.0, 0.0, 0.0, Branch::Plus, 1e-12);
        assert!(matches!(r, Err(Error::Tail(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn tail_increase_within_error(i1f in 0.05f64..0.95, phi1 in 0.0f64..TAU, phi2 in 0.0f64..TAU, tau in -3.0f64..3.0) {
            let prm = p();
            let pert = Pert::two_harmonic();
            let i1 = i1f * prm.j_max();
            let s = melnikov_potential(&prm, &pert, i1, phi1, phi2, tau, Branch::Plus, 1e-10).unwrap();
            let inner = Inner::new(&prm, i1, phi1, phi2).unwrap();
            let k = tail_constant(&pert, prm.lambda, &inner);
            let (tcut, _) = cutoff(k, prm.lambda, 1e-10).unwrap();
            let f = |u: f64| integrand(&pert.terms, prm.lambda, &inner, tau, Branch::Plus, u);
            let (v, _) = adaptive(&f, -1.5 * tcut, 1.5 * tcut, 200, 1e-13).unwrap();
            prop_assert!((v[0] - s.value).abs() <= s.quad_error + 1e-13);
        }

        #[test]
        fn shift_covariance(i1f in 0.05f64..0.95, phi1 in 0.0f64..TAU, phi2 in 0.0f64..TAU, tau in -2.0f64..2.0, s in 0.0f64..5.0) {
            let prm = p();
            let pert = Pert::two_harmonic();
            let i1 = i1f * prm.j_max();
            let i2 = prm.i2_on_sphere(i1).unwrap();
            let (w1, w2) = prm.omega(i1, i2);
            let a = melnikov_potential(&prm, &pert, i1, phi1, phi2, tau, Branch::Minus, 1e-12).unwrap();
            let b = melnikov_potential(&prm, &pert, i1, phi1 + w1 * s, phi2 + w2 * s, tau + s, Branch::Minus, 1e-12).unwrap();
            prop_assert!((a.value - b.value).abs() < 1e-9);
        }

        #[test]
        fn derivatives_match_fd(i1f in 0.05f64..0.95, phi1 in 0.0f64..TAU, phi2 in 0.0f64..TAU, tau in -2.0f64..2.0) {
            let prm = p();
            let pert = Pert::two_harmonic().with_term(Term::new(0.5, PendulumFactor::P, [0, 0, 1, 0]));
            let i1 = i1f * prm.j_max();
            let m = |ph: f64, t: f64| melnikov_potential(&prm, &pert, i1, ph, phi2, t, Branch::Plus, 1e-12).unwrap();
            let s = m(phi1, tau);
            let h = 1e-4;
            let dt = (m(phi1, tau + h).value - m(phi1, tau - h).value) / (2.0 * h);
            let dp = (m(phi1 + h, tau).value - m(phi1 - h, tau).value) / (2.0 * h);
            let scale = s.value.abs().max(1e-2);
            prop_assert!((dt - s.d_tau).abs() <= 1e-5 * scale.max(s.d_tau.abs()));
            prop_assert!((dp - s.d_phi1).abs() <= 1e-5 * scale.max(s.d_phi1.abs()));
            let dtp = (m(phi1 + h, tau).d_tau - m(phi1 - h, tau).d_tau) / (2.0 * h);
            prop_assert!((dtp - s.d_tau_phi1).abs() <= 1e-5 * scale.max(s.d_tau_phi1.abs()));
        }
    }
}
