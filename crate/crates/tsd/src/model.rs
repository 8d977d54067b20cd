//! The Hamiltonian family `H = H00 + H01 + eps * H1`, its vector field,
//! action-angle coordinates and closed-form structural quantities.
//!
//! Phase-space ordering used throughout the crate is
//! `(p1, q1, p2, q2, p3, q3)`.
//!
//! Angles follow the convention `q = sqrt(2I) cos(phi)`, `p = -sqrt(2I) sin(phi)`
//! so that `phi` advances at `+(a + b I)` under the flow of `H00`.

use serde::{Deserialize, Serialize};

use crate::error::{domain, Result};
use crate::Float;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams<T> {
    pub a1: T,
    pub a2: T,
    pub b1: T,
    pub b2: T,
    pub lambda: T,
    pub c: T,
    pub eps: T,
}

impl<T: Float> ModelParams<T> {
    pub fn new(a1: T, a2: T, b1: T, b2: T, lambda: T, c: T, eps: T) -> Result<Self> {
        let p = ModelParams { a1, a2, b1, b2, lambda, c, eps };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.a1, self.a2, self.b1, self.b2, self.lambda, self.c, self.eps];
        if all.iter().any(|v| !v.is_finite()) {
            return domain("non-finite parameter");
        }
        let zero = T::zero();
        if self.a1 <= zero || self.a2 <= zero || self.b1 <= zero || self.b2 <= zero {
            return domain("a1, a2, b1, b2 must be positive");
        }
        if self.lambda <= zero {
            return domain("lambda must be positive");
        }
        if self.a1 == self.a2 || self.b1 == self.b2 {
            return domain("need a1 != a2 and b1 != b2");
        }
        if self.c <= zero {
            return domain("energy c must be positive");
        }
        if self.eps < zero {
            return domain("eps must be non-negative");
        }
        Ok(())
    }

    pub fn with_c(mut self, c: T) -> Self {
        self.c = c;
        self
    }

    pub fn with_eps(mut self, eps: T) -> Self {
        self.eps = eps;
        self
    }

    /// Oscillator frequencies `(a1 + b1 I1, a2 + b2 I2)`.
    pub fn omega(&self, i1: T, i2: T) -> (T, T) {
        (self.a1 + self.b1 * i1, self.a2 + self.b2 * i2)
    }

    /// Largest admissible `I1` on the sphere `H00 = c`: the action of the circle chi^1.
    pub fn j_max(&self) -> T {
        critical_circle_action(self, self.c, 1)
    }

    /// `I2` such that `H00(I1, I2) = c`; `None` outside `[0, j_max]`.
    pub fn i2_on_sphere(&self, i1: T) -> Option<T> {
        let rest = self.c - (self.a1 * i1 + self.b1 * i1 * i1 / T::lit(2.0));
        if rest < -T::epsilon() * self.c.max(T::one()) * T::lit(8.0) {
            return None;
        }
        Some(positive_quadratic_root(self.a2, self.b2, rest.max(T::zero())))
    }
}

impl Default for ModelParams<f64> {
    fn default() -> Self {
        ModelParams { a1: 1.0, a2: 1.6, b1: 0.4, b2: 0.8, lambda: 1.0, c: 0.2, eps: 0.0 }
    }
}

impl Default for ModelParams<f32> {
    fn default() -> Self {
        ModelParams { a1: 1.0, a2: 1.6, b1: 0.4, b2: 0.8, lambda: 1.0, c: 0.2, eps: 0.0 }
    }
}

/// Root `I >= 0` of `a I + (b/2) I^2 = r`, in a form that stays accurate as `b -> 0`.
fn positive_quadratic_root<T: Float>(a: T, b: T, r: T) -> T {
    let two = T::lit(2.0);
    two * r / (a + (a * a + two * b * r).sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseState<T> {
    pub p: [T; 3],
    pub q: [T; 3],
}

impl<T: Float> PhaseState<T> {
    pub fn zero() -> Self {
        PhaseState { p: [T::zero(); 3], q: [T::zero(); 3] }
    }

    pub fn from_array(x: &[T]) -> Self {
        PhaseState { p: [x[0], x[2], x[4]], q: [x[1], x[3], x[5]] }
    }

    pub fn to_array(&self) -> [T; 6] {
        [self.p[0], self.q[0], self.p[1], self.q[1], self.p[2], self.q[2]]
    }

    pub fn is_finite(&self) -> bool {
        self.p.iter().chain(self.q.iter()).all(|v| v.is_finite())
    }

    /// Oscillator part `(p1, q1, p2, q2)`.
    pub fn osc(&self) -> [T; 4] {
        [self.p[0], self.q[0], self.p[1], self.q[1]]
    }

    pub fn with_osc(osc: [T; 4], p3: T, q3: T) -> Self {
        PhaseState { p: [osc[0], osc[2], p3], q: [osc[1], osc[3], q3] }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActionAngle<T> {
    pub i1: T,
    pub i2: T,
    pub phi1: T,
    pub phi2: T,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PendulumFactor {
    /// `cos q3 - 1`
    CosMinusOne,
    /// `sin q3`
    Sin,
    /// `p3`
    P,
    /// `p3^2`
    P2,
    /// The constant 1: a purely oscillator term.
    One,
}

impl PendulumFactor {
    pub fn eval<T: Float>(self, p3: T, q3: T) -> T {
        match self {
            PendulumFactor::CosMinusOne => q3.cos() - T::one(),
            PendulumFactor::Sin => q3.sin(),
            PendulumFactor::P => p3,
            PendulumFactor::P2 => p3 * p3,
            PendulumFactor::One => T::one(),
        }
    }

    /// `(d/dp3, d/dq3)`
    pub fn grad<T: Float>(self, p3: T, q3: T) -> (T, T) {
        let z = T::zero();
        match self {
            PendulumFactor::CosMinusOne => (z, -q3.sin()),
            PendulumFactor::Sin => (z, q3.cos()),
            PendulumFactor::P => (T::one(), z),
            PendulumFactor::P2 => (T::lit(2.0) * p3, z),
            PendulumFactor::One => (z, z),
        }
    }

    /// Whether the factor and its gradient vanish on `p3 = q3 = 0`, which keeps
    /// `{p3 = q3 = 0}` invariant and leaves the flow on it unperturbed.
    pub fn vanishes_to_second_order(self) -> bool {
        matches!(self, PendulumFactor::CosMinusOne | PendulumFactor::P2)
    }
}

/// `coef * factor(p3, q3) * p1^e1 q1^e2 p2^e3 q2^e4`
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Term<T> {
    pub coef: T,
    pub factor: PendulumFactor,
    pub exps: [u32; 4],
}

impl<T: Float> Term<T> {
    pub fn new(coef: T, factor: PendulumFactor, exps: [u32; 4]) -> Self {
        Term { coef, factor, exps }
    }

    /// Value of the oscillator monomial at `(p1, q1, p2, q2)`.
    pub fn monomial(&self, osc: &[T; 4]) -> T {
        let mut m = T::one();
        for k in 0..4 {
            m *= osc[k].powi(self.exps[k] as i32);
        }
        m
    }

    pub fn monomial_grad(&self, osc: &[T; 4]) -> [T; 4] {
        let mut g = [T::zero(); 4];
        for (k, gk) in g.iter_mut().enumerate() {
            let e = self.exps[k];
            if e == 0 {
                continue;
            }
            let mut v = T::from_u32(e).unwrap() * osc[k].powi(e as i32 - 1);
            for j in 0..4 {
                if j != k {
                    v *= osc[j].powi(self.exps[j] as i32);
                }
            }
            *gk = v;
        }
        g
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Perturbation<T> {
    pub terms: Vec<Term<T>>,
}

impl<T: Float> Perturbation<T> {
    pub fn none() -> Self {
        Perturbation { terms: Vec::new() }
    }

    /// `(cos q3 - 1) q1`
    pub fn single_harmonic() -> Self {
        Perturbation { terms: vec![Term::new(T::one(), PendulumFactor::CosMinusOne, [0, 1, 0, 0])] }
    }

    /// `(cos q3 - 1)(q1 + q1 q2)`
    pub fn two_harmonic() -> Self {
        Perturbation {
            terms: vec![
                Term::new(T::one(), PendulumFactor::CosMinusOne, [0, 1, 0, 0]),
                Term::new(T::one(), PendulumFactor::CosMinusOne, [0, 1, 0, 1]),
            ],
        }
    }

    pub fn with_term(mut self, t: Term<T>) -> Self {
        self.terms.push(t);
        self
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    /// True when `{p3 = q3 = 0}` stays invariant with unperturbed inner dynamics.
    pub fn keeps_sphere_exact(&self) -> bool {
        self.terms.iter().all(|t| t.factor.vanishes_to_second_order())
    }

    pub fn value(&self, x: &PhaseState<T>) -> T {
        let osc = x.osc();
        self.terms
            .iter()
            .map(|t| t.coef * t.factor.eval(x.p[2], x.q[2]) * t.monomial(&osc))
            .sum()
    }

    /// Gradient ordered as `(p1, q1, p2, q2, p3, q3)`.
    pub fn gradient(&self, x: &PhaseState<T>) -> [T; 6] {
        let osc = x.osc();
        let mut g = [T::zero(); 6];
        for t in &self.terms {
            let f = t.factor.eval(x.p[2], x.q[2]);
            let (fp, fq) = t.factor.grad(x.p[2], x.q[2]);
            let m = t.monomial(&osc);
            let mg = t.monomial_grad(&osc);
            for k in 0..4 {
                g[k] += t.coef * f * mg[k];
            }
            g[4] += t.coef * fp * m;
            g[5] += t.coef * fq * m;
        }
        g
    }
}

fn check_finite<T: Float>(x: &PhaseState<T>) -> Result<()> {
    if x.is_finite() {
        Ok(())
    } else {
        domain("non-finite phase state")
    }
}

pub fn h00<T: Float>(params: &ModelParams<T>, osc: &[T; 4]) -> T {
    let half = T::lit(0.5);
    let i1 = half * (osc[0] * osc[0] + osc[1] * osc[1]);
    let i2 = half * (osc[2] * osc[2] + osc[3] * osc[3]);
    h00_actions(params, i1, i2)
}

pub fn h01<T: Float>(params: &ModelParams<T>, p3: T, q3: T) -> T {
    T::lit(0.5) * p3 * p3 + params.lambda * params.lambda * (q3.cos() - T::one())
}

pub fn energy<T: Float>(params: &ModelParams<T>, pert: &Perturbation<T>, x: &PhaseState<T>) -> Result<T> {
    check_finite(x)?;
    Ok(energy_unchecked(params, pert, x))
}

pub(crate) fn energy_unchecked<T: Float>(params: &ModelParams<T>, pert: &Perturbation<T>, x: &PhaseState<T>) -> T {
    let mut h = h00(params, &x.osc()) + h01(params, x.p[2], x.q[2]);
    if params.eps != T::zero() {
        h += params.eps * pert.value(x);
    }
    h
}

/// Right-hand side of Hamilton's equations, `qdot = dH/dp`, `pdot = -dH/dq`.
pub fn vector_field<T: Float>(
    params: &ModelParams<T>,
    pert: &Perturbation<T>,
    x: &PhaseState<T>,
) -> Result<PhaseState<T>> {
    check_finite(x)?;
    let mut out = [T::zero(); 6];
    rhs(params, pert, &x.to_array(), &mut out);
    Ok(PhaseState::from_array(&out))
}

/// Vector field on the flat `(p1, q1, p2, q2, p3, q3)` layout.
pub fn rhs<T: Float>(params: &ModelParams<T>, pert: &Perturbation<T>, x: &[T], out: &mut [T]) {
    let half = T::lit(0.5);
    let (p1, q1, p2, q2, p3, q3) = (x[0], x[1], x[2], x[3], x[4], x[5]);
    let w1 = params.a1 + params.b1 * half * (p1 * p1 + q1 * q1);
    let w2 = params.a2 + params.b2 * half * (p2 * p2 + q2 * q2);
    out[0] = -w1 * q1;
    out[1] = w1 * p1;
    out[2] = -w2 * q2;
    out[3] = w2 * p2;
    out[4] = params.lambda * params.lambda * q3.sin();
    out[5] = p3;
    if params.eps != T::zero() && !pert.is_empty() {
        let g = pert.gradient(&PhaseState::from_array(x));
        let e = params.eps;
        // g is ordered (p1, q1, p2, q2, p3, q3)
        out[0] -= e * g[1];
        out[1] += e * g[0];
        out[2] -= e * g[3];
        out[3] += e * g[2];
        out[4] -= e * g[5];
        out[5] += e * g[4];
    }
}

/// Action-angle coordinates of one oscillator pair; `degenerate` when `I = 0`.
pub fn pair_to_action_angle<T: Float>(p: T, q: T) -> (T, T, bool) {
    let i = T::lit(0.5) * (p * p + q * q);
    if i == T::zero() {
        return (T::zero(), T::zero(), true);
    }
    (i, wrap_angle((-p).atan2(q)), false)
}

pub fn pair_from_action_angle<T: Float>(i: T, phi: T) -> (T, T) {
    let r = (T::lit(2.0) * i.max(T::zero())).sqrt();
    (-r * phi.sin(), r * phi.cos())
}

/// `(p1, q1, p2, q2)` to action-angle form, with per-oscillator degenerate-angle flags.
pub fn to_action_angle<T: Float>(x4: &[T; 4]) -> (ActionAngle<T>, [bool; 2]) {
    let (i1, phi1, d1) = pair_to_action_angle(x4[0], x4[1]);
    let (i2, phi2, d2) = pair_to_action_angle(x4[2], x4[3]);
    (ActionAngle { i1, i2, phi1, phi2 }, [d1, d2])
}

pub fn from_action_angle<T: Float>(aa: &ActionAngle<T>) -> [T; 4] {
    let (p1, q1) = pair_from_action_angle(aa.i1, aa.phi1);
    let (p2, q2) = pair_from_action_angle(aa.i2, aa.phi2);
    [p1, q1, p2, q2]
}

pub fn wrap_angle<T: Float>(a: T) -> T {
    let tau = T::TAU();
    let r = a % tau;
    let r = if r < T::zero() { r + tau } else { r };
    if r >= tau {
        T::zero()
    } else {
        r
    }
}

pub fn h00_actions<T: Float>(params: &ModelParams<T>, i1: T, i2: T) -> T {
    let half = T::lit(0.5);
    params.a1 * i1 + params.a2 * i2 + half * params.b1 * i1 * i1 + half * params.b2 * i2 * i2
}

/// Axis-aligned box of `(p1, q1, p2, q2)` sample points.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleBox<T> {
    pub lo: [T; 4],
    pub hi: [T; 4],
}

/// Eigenvalues of the 2x2 block `D_i` of the Hessian of `H00`.
pub fn hessian_block_eigenvalues<T: Float>(a: T, b: T, p: T, q: T) -> (T, T) {
    let half = T::lit(0.5);
    let d11 = a + half * b * (T::lit(3.0) * p * p + q * q);
    let d22 = a + half * b * (p * p + T::lit(3.0) * q * q);
    let d12 = b * p * q;
    let m = half * (d11 + d22);
    let r = (half * half * (d11 - d22) * (d11 - d22) + d12 * d12).sqrt();
    (m - r, m + r)
}

/// Smallest Hessian eigenvalue of `H00` over `n_samples` points drawn from `sample_box`.
pub fn convexity_margin(params: &ModelParams<f64>, sample_box: &SampleBox<f64>, n_samples: usize, seed: u64) -> f64 {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut worst = f64::INFINITY;
    for _ in 0..n_samples.max(1) {
        let mut x = [0.0; 4];
        for k in 0..4 {
            let (lo, hi) = (sample_box.lo[k], sample_box.hi[k]);
            x[k] = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
        }
        let (e1, _) = hessian_block_eigenvalues(params.a1, params.b1, x[0], x[1]);
        let (e2, _) = hessian_block_eigenvalues(params.a2, params.b2, x[2], x[3]);
        worst = worst.min(e1.min(e2));
    }
    assert!(
        worst >= params.a1.min(params.a2) - 1e-10,
        "convexity bound violated: {worst}"
    );
    worst
}

/// Determinant of the Hessian of `H00(I)` bordered by its gradient.
pub fn isoenergetic_determinant<T: Float>(params: &ModelParams<T>, i1: T, i2: T) -> T {
    let (w1, w2) = params.omega(i1, i2);
    let d = -params.b2 * w1 * w1 - params.b1 * w2 * w2;
    debug_assert!(d < T::zero());
    d
}

/// Action of the elliptic circle chi^1 (`which = 1`) or chi^2 (`which = 2`) at energy `c`.
pub fn critical_circle_action<T: Float>(params: &ModelParams<T>, c: T, which: u8) -> T {
    let (a, b) = if which == 1 { (params.a1, params.b1) } else { (params.a2, params.b2) };
    positive_quadratic_root(a, b, c)
}

pub fn unperturbed_flow<T: Float>(params: &ModelParams<T>, aa: &ActionAngle<T>, t: T) -> ActionAngle<T> {
    let (w1, w2) = params.omega(aa.i1, aa.i2);
    ActionAngle {
        i1: aa.i1,
        i2: aa.i2,
        phi1: wrap_angle(aa.phi1 + w1 * t),
        phi2: wrap_angle(aa.phi2 + w2 * t),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Branch {
    Plus,
    Minus,
}

impl Branch {
    pub fn sign<T: Float>(self) -> T {
        match self {
            Branch::Plus => T::one(),
            Branch::Minus => -T::one(),
        }
    }
}

/// Homoclinic loop of the pendulum through the saddle, `q3(0) = +-pi`.
pub fn pendulum_separatrix<T: Float>(lambda: T, t: T, branch: Branch) -> (T, T) {
    let s: T = branch.sign();
    let lt = lambda * t;
    let q3 = T::lit(4.0) * lt.exp().atan();
    let p3 = T::lit(2.0) * lambda / lt.cosh();
    (s * p3, s * q3)
}

/// `(cos q3 - 1, sin q3)` along the `+` separatrix, computed without cancellation.
pub fn separatrix_trig<T: Float>(lambda: T, t: T) -> (T, T) {
    let lt = lambda * t;
    let sech = T::one() / lt.cosh();
    let th = lt.tanh();
    let two = T::lit(2.0);
    (-two * sech * sech, -two * sech * th)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn p() -> ModelParams<f64> {
        ModelParams::default()
    }

    fn fd_grad(params: &ModelParams<f64>, pert: &Perturbation<f64>, x: &[f64; 6]) -> [f64; 6] {
        let mut g = [0.0; 6];
        for k in 0..6 {
            let h = 1e-6 * (1.0 + x[k].abs());
            let mut xp = *x;
            let mut xm = *x;
            xp[k] += h;
            xm[k] -= h;
            let ep = energy(params, pert, &PhaseState::from_array(&xp)).unwrap();
            let em = energy(params, pert, &PhaseState::from_array(&xm)).unwrap();
            g[k] = (ep - em) / (2.0 * h);
        }
        g
    }

    #[test]
    fn energy_examples() {
        let z = PhaseState::zero();
        assert_eq!(energy(&p(), &Perturbation::none(), &z).unwrap(), 0.0);
        let mut x = PhaseState::zero();
        x.q[2] = std::f64::consts::PI;
        assert_relative_eq!(energy(&p(), &Perturbation::none(), &x).unwrap(), -2.0, epsilon = 1e-15);
        let q = ModelParams::new(1.0, 2.0, 1.0, 0.5, 1.0, 1.0, 0.0).unwrap();
        let mut y = PhaseState::zero();
        y.p[0] = 0.6;
        y.q[0] = 0.8;
        // independent: I = 1/2, a I + b/2 I^2
        assert_relative_eq!(energy(&q, &Perturbation::none(), &y).unwrap(), 0.625, epsilon = 1e-15);
        y.p[0] = f64::NAN;
        assert!(energy(&q, &Perturbation::none(), &y).is_err());
    }

    #[test]
    fn rejects_bad_params() {
        assert!(ModelParams::new(1.0, 1.0, 0.4, 0.8, 1.0, 0.2, 0.0).is_err());
        assert!(ModelParams::new(1.0, 1.6, 0.4, 0.4, 1.0, 0.2, 0.0).is_err());
        assert!(ModelParams::new(1.0, 1.6, 0.4, 0.8, 0.0, 0.2, 0.0).is_err());
        assert!(ModelParams::new(1.0, 1.6, 0.4, 0.8, 1.0, 0.0, 0.0).is_err());
        assert!(ModelParams::new(1.0, 1.6, 0.4, 0.8, 1.0, 0.2, -1e-3).is_err());
        assert!(ModelParams::new(-1.0, 1.6, 0.4, 0.8, 1.0, 0.2, 0.0).is_err());
    }

    #[test]
    fn equilibria() {
        let v = vector_field(&p(), &Perturbation::none(), &PhaseState::zero()).unwrap();
        assert_eq!(v.to_array(), [0.0; 6]);
        let mut x = PhaseState::zero();
        x.q[2] = std::f64::consts::PI;
        let v = vector_field(&p(), &Perturbation::none(), &x).unwrap();
        assert_eq!(v.q[2], 0.0);
        assert!(v.p[2].abs() < 1e-15);
    }

    #[test]
    fn vector_field_is_symplectic_gradient() {
        let pert = Perturbation::<f64>::two_harmonic()
            .with_term(Term::new(0.7, PendulumFactor::Sin, [1, 0, 2, 0]))
            .with_term(Term::new(-0.3, PendulumFactor::P, [0, 0, 1, 1]))
            .with_term(Term::new(0.2, PendulumFactor::P2, [2, 1, 0, 0]))
            .with_term(Term::new(0.5, PendulumFactor::One, [0, 3, 0, 2]));
        let params = p().with_eps(0.01);
        let x = [0.3, -0.2, 0.1, 0.4, 0.5, 1.1];
        let g = fd_grad(&params, &pert, &x);
        let v = vector_field(&params, &pert, &PhaseState::from_array(&x)).unwrap().to_array();
        let expect = [-g[1], g[0], -g[3], g[2], -g[5], g[4]];
        for k in 0..6 {
            assert_relative_eq!(v[k], expect[k], max_relative = 1e-7, epsilon = 1e-9);
        }
    }

    #[test]
    fn perturbation_gradient_matches_fd() {
        let pert = Perturbation::<f64>::two_harmonic()
            .with_term(Term::new(1.3, PendulumFactor::Sin, [2, 0, 0, 1]))
            .with_term(Term::new(0.5, PendulumFactor::P2, [0, 2, 1, 0]));
        let x = PhaseState::from_array(&[0.2, 0.7, -0.4, 0.3, 0.9, 2.0]);
        let g = pert.gradient(&x);
        let a = x.to_array();
        for k in 0..6 {
            let h = 1e-6;
            let mut xp = a;
            let mut xm = a;
            xp[k] += h;
            xm[k] -= h;
            let fd = (pert.value(&PhaseState::from_array(&xp)) - pert.value(&PhaseState::from_array(&xm))) / (2.0 * h);
            assert_relative_eq!(g[k], fd, max_relative = 1e-7, epsilon = 1e-10);
        }
    }

    #[test]
    fn action_angle_examples() {
        let (aa, deg) = to_action_angle(&[0.0, 1.0, 0.0, 0.0]);
        assert_relative_eq!(aa.i1, 0.5);
        assert_eq!(aa.phi1, 0.0);
        assert!(deg[1] && !deg[0]);
        assert_eq!(aa.phi2, 0.0);
        let (aa, _) = to_action_angle(&[1.0, 0.0, 0.0, 0.0]);
        assert_relative_eq!(aa.i1, 0.5);
        assert_relative_eq!(aa.phi1, 1.5 * std::f64::consts::PI, epsilon = 1e-15);
    }

    #[test]
    fn h00_examples() {
        let q = ModelParams::new(1.0, 2.0, 1.0, 0.5, 1.0, 1.0, 0.0).unwrap();
        assert_eq!(h00_actions(&q, 0.0, 0.0), 0.0);
        assert_relative_eq!(h00_actions(&q, 1.0, 0.0), 1.5);
        let r = ModelParams::new(1.0, 2.0, 1.0, 1.5, 1.0, 1.0, 0.0).unwrap();
        let r = ModelParams { b2: 1.0, ..r };
        assert_relative_eq!(h00_actions(&r, 1.0, 1.0), 4.0);
        let lift = from_action_angle(&ActionAngle { i1: 1.0, i2: 1.0, phi1: 0.3, phi2: 2.0 });
        assert_relative_eq!(h00(&r, &lift), 4.0, epsilon = 1e-12);
    }

    #[test]
    fn convexity_examples() {
        let q = ModelParams::new(1.0, 2.0, 0.4, 0.8, 1.0, 0.2, 0.0).unwrap();
        let bx = SampleBox { lo: [-2.0; 4], hi: [2.0; 4] };
        assert!(convexity_margin(&q, &bx, 500, 7) >= 1.0 - 1e-10);
        let origin = SampleBox { lo: [0.0; 4], hi: [0.0; 4] };
        assert_eq!(convexity_margin(&q, &origin, 1, 0), 1.0);
        assert_eq!(hessian_block_eigenvalues(2.0, 0.8, 0.0, 0.0), (2.0, 2.0));
    }

    #[test]
    fn hessian_eigenvalues_match_fd() {
        let params = p();
        let x = [0.4, -0.3, 0.2, 0.6];
        let h = 1e-4;
        let f = |y: &[f64; 4]| h00(&params, y);
        let mut hess = nalgebra::Matrix4::<f64>::zeros();
        for i in 0..4 {
            for j in 0..4 {
                let mut pp = x;
                let mut pm = x;
                let mut mp = x;
                let mut mm = x;
                pp[i] += h;
                pp[j] += h;
                pm[i] += h;
                pm[j] -= h;
                mp[i] -= h;
                mp[j] += h;
                mm[i] -= h;
                mm[j] -= h;
                hess[(i, j)] = (f(&pp) - f(&pm) - f(&mp) + f(&mm)) / (4.0 * h * h);
            }
        }
        let mut fd: Vec<f64> = hess.symmetric_eigen().eigenvalues.iter().copied().collect();
        fd.sort_by(f64::total_cmp);
        let (e1, e2) = hessian_block_eigenvalues(params.a1, params.b1, x[0], x[1]);
        let (e3, e4) = hessian_block_eigenvalues(params.a2, params.b2, x[2], x[3]);
        let mut an = vec![e1, e2, e3, e4];
        an.sort_by(f64::total_cmp);
        for k in 0..4 {
            assert!((fd[k] - an[k]).abs() < 1e-6, "{fd:?} vs {an:?}");
        }
    }

    fn bordered(params: &ModelParams<f64>, i1: f64, i2: f64) -> f64 {
        let (w1, w2) = params.omega(i1, i2);
        let m = nalgebra::Matrix3::new(params.b1, 0.0, w1, 0.0, params.b2, w2, w1, w2, 0.0);
        m.determinant()
    }

    #[test]
    fn isoenergetic_examples() {
        let q = ModelParams::new(1.0, 2.0, 1.0, 1.5, 1.0, 1.0, 0.0).unwrap();
        let q = ModelParams { b2: 1.0, ..q };
        assert_relative_eq!(isoenergetic_determinant(&q, 1.0, 0.0), -8.0, epsilon = 1e-14);
        assert_relative_eq!(bordered(&q, 1.0, 0.0), -8.0, epsilon = 1e-12);
        let d = p();
        assert_relative_eq!(
            isoenergetic_determinant(&d, 0.0, 0.0),
            -d.b2 * d.a1 * d.a1 - d.b1 * d.a2 * d.a2
        );
    }

    #[test]
    fn isoenergetic_negative_on_grid() {
        let d = p();
        for i in 0..100 {
            for j in 0..100 {
                let (i1, i2) = (5.0 * i as f64 / 99.0, 5.0 * j as f64 / 99.0);
                assert!(isoenergetic_determinant(&d, i1, i2) < 0.0);
            }
        }
    }

    #[test]
    fn critical_circle_examples() {
        let q = ModelParams::new(1.0, 1.6, 2.0, 0.8, 1.0, 1.5, 0.0).unwrap();
        let i = critical_circle_action(&q, 1.5, 1);
        assert_relative_eq!(i, (-1.0 + 7f64.sqrt()) / 2.0, epsilon = 1e-14);
        assert_relative_eq!(h00_actions(&q, i, 0.0), 1.5, epsilon = 1e-12);
        assert!(critical_circle_action(&q, 1e-12, 1) < 1e-11);
        let lin = ModelParams::new(1.0, 1.6, 1e-8, 0.8, 1.0, 1.0, 0.0).unwrap();
        assert_relative_eq!(critical_circle_action(&lin, 1.0, 1), 1.0, epsilon = 1e-7);
        let j2 = critical_circle_action(&p(), 0.2, 2);
        assert_relative_eq!(h00_actions(&p(), 0.0, j2), 0.2, epsilon = 1e-12);
    }

    #[test]
    fn flow_examples() {
        let q = ModelParams::new(1.0, 1.6, 1.0, 0.8, 1.0, 0.2, 0.0).unwrap();
        let aa = ActionAngle { i1: 1.0, i2: 0.1, phi1: 0.2, phi2: 0.0 };
        assert_eq!(unperturbed_flow(&q, &aa, 0.0), aa);
        let f = unperturbed_flow(&q, &aa, 0.5);
        assert_relative_eq!(f.phi1, 1.2, epsilon = 1e-15);
    }

    #[test]
    fn separatrix_properties() {
        let (p3, q3) = pendulum_separatrix(1.0, 0.0, Branch::Plus);
        assert_relative_eq!(p3, 2.0);
        assert_relative_eq!(q3, std::f64::consts::PI);
        let (p3, q3) = pendulum_separatrix(1.0f64, 10.0, Branch::Plus);
        assert!(p3.abs() < 1e-4 * 2.0);
        assert!((q3 - std::f64::consts::TAU).abs() < 1e-3);
        let (_, q3) = pendulum_separatrix(1.0f64, -10.0, Branch::Minus);
        assert!(q3.abs() < 1e-3);
        let prm = p();
        for lam in [0.5, 1.0, 2.0] {
            let prm = ModelParams { lambda: lam, ..prm };
            for t in [-3.0, -1.0, 0.0, 1.0, 3.0] {
                let (p3, q3) = pendulum_separatrix(lam, t, Branch::Plus);
                assert!(h01(&prm, p3, q3).abs() < 1e-13);
                // analytic derivatives
                let s = 1.0 / (lam * t).cosh();
                let dq = 4.0 * lam * (lam * t).exp() / (1.0 + (2.0 * lam * t).exp());
                let dp = -2.0 * lam * lam * s * (lam * t).tanh();
                assert!((dq - p3).abs() < 1e-12);
                assert!((dp - lam * lam * q3.sin()).abs() < 1e-12);
                let (cm1, sn) = separatrix_trig(lam, t);
                assert!((cm1 - (q3.cos() - 1.0)).abs() < 1e-14);
                assert!((sn - q3.sin()).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn generic_f32_agrees() {
        let p32 = ModelParams::<f32>::default();
        let x = PhaseState::<f32>::from_array(&[0.1, 0.2, 0.3, -0.1, 0.0, 0.0]);
        let e32 = energy(&p32, &Perturbation::none(), &x).unwrap();
        let x64 = PhaseState::<f64>::from_array(&[0.1, 0.2, 0.3, -0.1, 0.0, 0.0]);
        let e64 = energy(&p(), &Perturbation::none(), &x64).unwrap();
        assert!((e32 as f64 - e64).abs() < 1e-6);
    }

    proptest! {
        #[test]
        fn round_trip(x in proptest::array::uniform4(-2.0f64..2.0)) {
            let (aa, _) = to_action_angle(&x);
            prop_assume!(aa.i1 > 1e-6 && aa.i2 > 1e-6);
            let y = from_action_angle(&aa);
            for k in 0..4 {
                prop_assert!((x[k] - y[k]).abs() < 1e-12);
            }
        }

        #[test]
        fn convexity_bound_any_box(lo in proptest::array::uniform4(-3.0f64..0.0), w in 0.0f64..3.0, seed in 0u64..1000) {
            let bx = SampleBox { lo, hi: [lo[0] + w, lo[1] + w, lo[2] + w, lo[3] + w] };
            let m = convexity_margin(&p(), &bx, 50, seed);
            prop_assert!(m >= 1.0 - 1e-10);
        }

        #[test]
        fn isoenergetic_matches_bordered(i1 in 0.0f64..5.0, i2 in 0.0f64..5.0, a1 in 0.1f64..3.0, b1 in 0.1f64..3.0) {
            let prm = ModelParams { a1, b1, ..p() };
            let d = isoenergetic_determinant(&prm, i1, i2);
            let o = bordered(&prm, i1, i2);
            prop_assert!((d - o).abs() <= 1e-10 * d.abs());
        }

        #[test]
        fn energy_rate_vanishes(x in proptest::array::uniform6(-1.0f64..1.0)) {
            let prm = p().with_eps(0.01);
            let pert = Perturbation::two_harmonic();
            let v = vector_field(&prm, &pert, &PhaseState::from_array(&x)).unwrap().to_array();
            let g = fd_grad(&prm, &pert, &x);
            let dh: f64 = (0..6).map(|k| g[k] * v[k]).sum();
            let scale: f64 = 1.0 + x.iter().map(|v| v * v).sum::<f64>().powi(2);
            prop_assert!(dh.abs() <= 1e-8 * scale);
        }
    }
}
