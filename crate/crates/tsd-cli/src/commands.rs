//! One function per subcommand; each writes its artifacts through a [`Writer`].

use std::f64::consts::{PI, TAU};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use tsd::czindex::{self, Circle};
use tsd::integrate::{integrate_orbit, Tolerances};
use tsd::manifold::{self, GridSpec, NhimApprox};
use tsd::melnikov::{self, Base};
use tsd::model::{self, Branch, PhaseState};
use tsd::section::{self, SectionMap};
use tsd::windows::{self, ItineraryConfig, Target};
use tsd::{Error, Params, Pert};

use crate::config::{RunConfig, TargetCfg};
use crate::output::{Cell, Writer};
use crate::{row, CliError};

pub struct Ctx<'a> {
    pub cfg: &'a RunConfig,
    pub params: Params,
    pub pert: Pert,
    pub verbose: bool,
}

impl Ctx<'_> {
    fn note(&self, msg: &str) {
        if self.verbose {
            eprintln!("tsd: {msg}");
        }
    }
}

fn branch_name(b: Branch) -> &'static str {
    match b {
        Branch::Plus => "plus",
        Branch::Minus => "minus",
    }
}

/// Invariant-manifold approximation for `params`: the flat sphere when it
/// is exactly invariant, the refined graph otherwise.
pub fn graph_for(params: &Params, pert: &Pert) -> Result<NhimApprox, Error> {
    if params.eps == 0.0 || pert.keeps_sphere_exact() {
        Ok(NhimApprox::flat(params))
    } else {
        manifold::nhim_build(params, pert, &GridSpec::default())
    }
}

fn grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![0.5 * (lo + hi)];
    }
    (0..n).map(|k| lo + (hi - lo) * k as f64 / (n - 1) as f64).collect()
}

pub fn simulate(ctx: &Ctx<'_>, w: &mut Writer) -> Result<(), CliError> {
    let s = &ctx.cfg.simulate;
    let p = &ctx.params;
    let x0 = match s.x0 {
        Some(x) => PhaseState::from_array(&x),
        None => section::section_embed(p, &ctx.pert, s.j_frac * p.j_max(), s.theta)?.lift,
    };
    let orb = integrate_orbit(p, &ctx.pert, &x0, (0.0, s.t_end), s.rel_tol, s.abs_tol)?;
    let h0 = model::energy(p, &ctx.pert, &x0)?;
    let mut rows = Vec::new();
    for (k, (t, x)) in orb.times.iter().zip(&orb.states).enumerate() {
        if k % s.stride != 0 && k + 1 != orb.times.len() {
            continue;
        }
        let a = x.to_array();
        let e = model::energy(p, &ctx.pert, x)?;
        rows.push(row![*t, a[0], a[1], a[2], a[3], a[4], a[5], e, e - h0]);
    }
    w.csv("orbit.csv", &["t", "p1", "q1", "p2", "q2", "p3", "q3", "energy", "energy_error"], &rows)?;
    #[derive(Serialize)]
    struct Summary {
        steps: usize,
        t_end: f64,
        energy: f64,
        energy_drift: f64,
        drift_flagged: bool,
    }
    w.json(
        "simulate.json",
        &Summary {
            steps: orb.times.len() - 1,
            t_end: *orb.times.last().unwrap(),
            energy: h0,
            energy_drift: orb.energy_drift,
            drift_flagged: orb.drift_flagged,
        },
    )
}

pub fn section_cmd(ctx: &Ctx<'_>, w: &mut Writer) -> Result<(), CliError> {
    let s = &ctx.cfg.section;
    let p = ctx.params;
    let g = graph_for(&p, &ctx.pert)?;
    let map = SectionMap::new(p, &ctx.pert).with_graph(&g).with_tol(Tolerances::new(s.rel_tol, s.abs_tol));
    let jm = p.j_max();
    let jgrid: Vec<f64> = grid(s.j_range.0 * jm, s.j_range.1 * jm, s.n_j);

    ctx.note("scatter orbits");
    let starts = grid(s.j_range.0 * jm, s.j_range.1 * jm, s.scatter_orbits.max(1));
    let orbits: Vec<Result<Vec<(f64, f64)>, Error>> = starts
        .par_iter()
        .map(|&j| {
            let sp = map.embed(j, 0.0)?;
            let mut pts = vec![(sp.j, sp.theta)];
            let mut cur = sp;
            for _ in 0..s.scatter_iterates {
                match map.ret(&cur) {
                    Ok(n) => {
                        pts.push((n.j, n.theta));
                        cur = n;
                    }
                    Err(Error::Escape { .. }) => break,
                    Err(e) => return Err(e),
                }
            }
            Ok(pts)
        })
        .collect();
    let mut rows = Vec::new();
    for (o, r) in orbits.into_iter().enumerate() {
        for (k, (j, th)) in r?.into_iter().enumerate() {
            let (x, y) = ((2.0 * j).sqrt() * th.cos(), (2.0 * j).sqrt() * th.sin());
            rows.push(row![o, k, j, th, x, y]);
        }
    }
    w.csv("section_scatter.csv", &["orbit", "iterate", "J", "theta", "x", "y"], &rows)?;

    ctx.note("rotation numbers");
    let rots: Vec<Result<Vec<Cell>, Error>> = jgrid
        .par_iter()
        .map(|&j| {
            let sp = map.embed(j, 0.0)?;
            let r = map.rotation_number(&sp, s.rotation_iterates);
            let integ = section::integrable_rotation(&p, j).unwrap_or(f64::NAN);
            Ok(match r {
                Ok(r) => row![j, j / jm, r.rho, r.uncertainty, r.regular, integ, "ok"],
                Err(Error::Escape { .. }) => row![j, j / jm, f64::NAN, f64::NAN, false, integ, "escaped"],
                Err(e) => return Err(e),
            })
        })
        .collect();
    let rots = rots.into_iter().collect::<Result<Vec<_>, _>>()?;
    w.csv("rotation.csv", &["J", "J_frac", "rho", "uncertainty", "regular", "rho_integrable", "status"], &rots)?;

    ctx.note("circle scan");
    let scan = section::circle_scan(&map, &jgrid, s.scan_iterates, s.dispersion_tol)?;
    let rows: Vec<Vec<Cell>> = scan
        .entries
        .iter()
        .map(|e| {
            let label = serde_json::to_value(e.label).unwrap().as_str().unwrap().to_string();
            row![e.j, e.j / jm, label, e.dispersion, e.rho, e.regular]
        })
        .collect();
    w.csv("circle_scan.csv", &["J", "J_frac", "label", "dispersion", "rho", "regular"], &rows)?;
    w.json("bzi.json", &scan)
}

pub fn melnikov_cmd(ctx: &Ctx<'_>, w: &mut Writer) -> Result<(), CliError> {
    let m = &ctx.cfg.melnikov;
    let p = ctx.params;
    let pert = &ctx.pert;
    let jm = p.j_max();
    let i1 = m.i1_frac * jm;
    let i2 = p.i2_on_sphere(i1).ok_or_else(|| CliError::Config("melnikov.i1_frac beyond the sphere".into()))?;
    let (w1, _) = p.omega(i1, i2);
    let taus = grid(-PI / w1, PI / w1, m.n_tau);
    let branches = [Branch::Plus, Branch::Minus];
    let mut rows = Vec::new();
    for b in branches {
        let samples: Vec<Result<melnikov::MelnikovSample, Error>> =
            taus.par_iter().map(|&t| melnikov::melnikov_potential(&p, pert, i1, m.phi1, m.phi2, t, b, m.quad_tol)).collect();
        for s in samples {
            let s = s?;
            rows.push(row![branch_name(b), s.tau, s.value, s.d_tau, s.d2_tau, s.d_phi1, s.quad_error]);
        }
    }
    w.csv("melnikov_potential.csv", &["branch", "tau", "M", "dM_dtau", "d2M_dtau2", "dM_dphi1", "quad_error"], &rows)?;

    ctx.note("critical times");
    let eps = p.eps;
    let phis: Vec<f64> = (0..m.n_phi1).map(|k| TAU * k as f64 / m.n_phi1 as f64).collect();
    let mut rows = Vec::new();
    for b in branches {
        let out: Vec<Result<Vec<Vec<Cell>>, Error>> = phis
            .par_iter()
            .map(|&phi1| match melnikov::critical_taus(&p, pert, i1, phi1, m.phi2, b) {
                Ok(cps) => Ok(cps
                    .iter()
                    .enumerate()
                    .map(|(k, c)| {
                        row![
                            phi1,
                            branch_name(b),
                            k,
                            c.tau,
                            c.d2_tau,
                            c.sample.value,
                            -eps * c.sample.d_phi1,
                            eps * c.sample.d_tau_phi1
                        ]
                    })
                    .collect()),
                Err(Error::NoCriticalPoint(_)) | Err(Error::Degenerate(_)) => Ok(Vec::new()),
                Err(e) => Err(e),
            })
            .collect();
        for r in out {
            rows.extend(r?);
        }
    }
    w.csv(
        "critical_taus.csv",
        &["phi1", "branch", "family", "tau_star", "d2M_dtau2", "M", "shift_reduced", "shift_literal"],
        &rows,
    )?;

    ctx.note("coverage");
    let i1_grid = grid(0.05 * jm, 0.95 * jm, m.coverage_n_i1.max(1));
    let cov = melnikov::coverage_report(&p, pert, eps, &i1_grid, m.coverage_n_phi1, m.coverage_n_phi2)?;
    let rows: Vec<Vec<Cell>> = cov
        .iter()
        .map(|r| row![r.i1, r.i1 / jm, r.n_families, r.max_up, r.max_down, r.up, r.down, r.both_signs()])
        .collect();
    w.csv("coverage.csv", &["I1", "I1_frac", "families", "max_up", "max_down", "up", "down", "both"], &rows)
}

pub fn scattering_cmd(ctx: &Ctx<'_>, w: &mut Writer) -> Result<(), CliError> {
    let s = &ctx.cfg.scattering;
    let jm = ctx.params.j_max();
    let mut rng = ChaCha8Rng::seed_from_u64(ctx.cfg.seed);
    let bases: Vec<Base> = (0..s.n_bases)
        .map(|_| Base {
            i1: jm * rng.gen_range(s.i1_range.0..=s.i1_range.1),
            phi1: rng.gen_range(0.0..TAU),
            phi2: 0.0,
        })
        .collect();
    let mut rows = Vec::new();
    for &eps in &ctx.cfg.eps_list {
        ctx.note(&format!("scattering at eps = {eps:e}"));
        let p = ctx.params.with_eps(eps);
        let g = graph_for(&p, &ctx.pert)?;
        let out: Vec<Result<Vec<Cell>, Error>> = bases
            .par_iter()
            .enumerate()
            .map(|(k, b)| {
                let bound = 5.0 * eps.powf(1.5);
                let skip = |why: String| row![eps, k, b.i1, b.phi1, b.phi2, "plus", f64::NAN, f64::NAN, f64::NAN, f64::NAN, bound, false, why];
                let pred = match melnikov::scattering_shift(&p, &ctx.pert, b.i1, b.phi1, b.phi2, Branch::Plus, eps) {
                    Ok(x) => x,
                    Err(Error::NoCriticalPoint(m)) | Err(Error::Degenerate(m)) => return Ok(skip(m)),
                    Err(e) => return Err(e),
                };
                let orb = match manifold::scattering_map_direct(&p, &ctx.pert, &g, b, Branch::Plus, pred.tau_star, &s.shoot) {
                    Ok(o) => o,
                    Err(Error::Domain(m)) => return Ok(skip(m)),
                    Err(e) => return Err(e),
                };
                let direct = orb.scattered.i1 - b.i1;
                let diff = (direct - pred.reduced).abs();
                Ok(row![eps, k, b.i1, b.phi1, b.phi2, "plus", pred.tau_star, direct, pred.reduced, diff, bound, diff <= bound, "ok"])
            })
            .collect();
        for r in out {
            rows.push(r?);
        }
    }
    w.csv(
        "scattering.csv",
        &["eps", "base", "I1", "phi1", "phi2", "branch", "tau_star", "dI1_direct", "dI1_predicted", "abs_diff", "bound", "within", "status"],
        &rows,
    )
}

pub fn cz_cmd(ctx: &Ctx<'_>, w: &mut Writer) -> Result<(), CliError> {
    let c_list = if ctx.cfg.cz.c_list.is_empty() { vec![ctx.params.c] } else { ctx.cfg.cz.c_list.clone() };
    let mut rows = Vec::new();
    let mut reports = Vec::new();
    for c in c_list {
        let p = ctx.params.with_c(c);
        p.validate()?;
        let mut orbits = Vec::new();
        for circle in [Circle::Chi1, Circle::Chi2] {
            for &k in &ctx.cfg.cz.covers {
                let id = if k == 1 { circle.id().to_string() } else { format!("{}x{k}", circle.id()) };
                orbits.push((id, czindex::critical_orbit(&p, &ctx.pert, c, circle, k)?));
            }
        }
        let rep = czindex::dynamical_convexity_scan(&p, &ctx.pert, c, &orbits)?;
        for r in &rep.rows {
            let (lo, hi) = r.result.winding_interval;
            rows.push(row![c, r.id.as_str(), r.period, lo, hi, r.result.index, r.result.nondegenerate, r.result.spectrum_gap]);
        }
        reports.push(rep);
    }
    w.csv("cz.csv", &["c", "orbit", "period", "delta_min", "delta_max", "index", "nondegenerate", "spectrum_gap"], &rows)?;
    w.json("cz.json", &reports)
}

/// Rotation number of the section map on the circle `J = j`.
fn rotation_at(ctx: &Ctx<'_>, g: &NhimApprox, j: f64) -> Result<f64, CliError> {
    if g.exact {
        return section::integrable_rotation(&ctx.params, j).ok_or_else(|| CliError::Config(format!("J = {j} beyond the sphere")));
    }
    let map = SectionMap::new(ctx.params, &ctx.pert).with_graph(g);
    let sp = map.embed(j, 0.0)?;
    Ok(map.rotation_number(&sp, ctx.cfg.windows.rotation_iterates)?.rho)
}

/// Golden-mean fraction used by rotation targets between two circles.
fn golden() -> f64 {
    (5f64.sqrt() - 1.0) / 2.0
}

fn targets(ctx: &Ctx<'_>, g: &NhimApprox) -> Result<Vec<Target>, CliError> {
    let jm = ctx.params.j_max();
    ctx.cfg
        .windows
        .targets
        .iter()
        .map(|t| {
            Ok(match *t {
                TargetCfg::Circle { j_frac } => Target::Circle { j: j_frac * jm },
                TargetCfg::Rotation { rho, between: (a, b) } => Target::Rotation { rho, bracket: (a * jm, b * jm) },
                TargetCfg::GoldenRotation { between: (a, b) } => {
                    let (ra, rb) = (rotation_at(ctx, g, a * jm)?, rotation_at(ctx, g, b * jm)?);
                    Target::Rotation { rho: ra + (rb - ra) * golden(), bracket: (a * jm, b * jm) }
                }
            })
        })
        .collect()
}

fn itinerary_config(ctx: &Ctx<'_>) -> ItineraryConfig {
    let c = &ctx.cfg.windows;
    ItineraryConfig {
        h_j: c.h_j,
        h_theta: c.h_theta,
        theta0: c.theta0,
        n_boundary: c.n_boundary,
        n_interior: c.n_interior,
        margin_tol: c.margin_tol,
        max_windows: c.max_windows,
        shoot: c.shoot,
        rotation_iterates: c.rotation_iterates,
        ..Default::default()
    }
}

#[derive(Serialize)]
struct ItinerarySummary {
    n_windows: usize,
    min_margin: f64,
    max_diameter: f64,
    target_actions: Vec<f64>,
}

fn build(ctx: &Ctx<'_>, w: &mut Writer) -> Result<windows::Itinerary, CliError> {
    let g = graph_for(&ctx.params, &ctx.pert)?;
    let ts = targets(ctx, &g)?;
    ctx.note(&format!("building itinerary through {} targets", ts.len()));
    let it = windows::build_itinerary(&ctx.params, &ctx.pert, &g, &ts, &itinerary_config(ctx))?;
    let mut rows = Vec::new();
    for (k, win) in it.windows.iter().enumerate() {
        let exit = serde_json::to_value(win.exit).unwrap().as_str().unwrap_or("").to_string();
        let (margin, degree, connector) = match it.links.get(k) {
            Some(l) => (l.report.margin, l.report.degree as i64, serde_json::to_string(&l.connector).unwrap()),
            None => (f64::NAN, 0, String::new()),
        };
        let target = it.targets.iter().position(|t| t.window == k).map_or(-1, |i| i as i64);
        rows.push(row![
            k, win.center.0, win.center.1, win.half.0, win.half.1, win.skew.0, win.skew.1, exit, margin, degree, target, connector
        ]);
    }
    w.csv(
        "windows.csv",
        &["window", "J", "theta", "half_J", "half_theta", "skew_J", "skew_theta", "exit", "margin", "degree", "target", "connector"],
        &rows,
    )?;
    #[derive(Serialize)]
    struct Doc<'a> {
        summary: ItinerarySummary,
        itinerary: &'a windows::Itinerary,
    }
    let summary = ItinerarySummary {
        n_windows: it.windows.len(),
        min_margin: it.min_margin(),
        max_diameter: it.max_diameter(),
        target_actions: it.targets.iter().map(|t| t.j).collect(),
    };
    w.json("itinerary.json", &Doc { summary, itinerary: &it })?;
    Ok(it)
}

pub fn windows_cmd(ctx: &Ctx<'_>, w: &mut Writer) -> Result<(), CliError> {
    build(ctx, w).map(|_| ())
}

pub fn diffuse(ctx: &Ctx<'_>, w: &mut Writer) -> Result<(), CliError> {
    let d = &ctx.cfg.diffuse;
    let it = build(ctx, w)?;
    ctx.note("shadowing search");
    let wit = windows::verify_shadowing(&it, d.search_depth)?;
    let boxes = windows::thicken_to_flow_windows(&it, d.flow_half_time)?;
    let mut rows = Vec::new();
    let mut visited = vec![false; it.targets.len()];
    for (k, q) in wit.points.iter().enumerate() {
        let t = wit.visit_times.get(k).copied().unwrap_or(f64::NAN);
        let target = it.targets.iter().position(|v| v.window == k);
        let near = target.map_or(false, |i| (q.0 - it.targets[i].j).abs() <= d.delta && it.windows[k].contains(*q));
        if let Some(i) = target {
            visited[i] |= near;
        }
        rows.push(row![k, q.0, q.1, t, target.map_or(-1, |i| i as i64), near]);
    }
    w.csv("visits.csv", &["window", "J", "theta", "section_time", "target", "within_delta"], &rows)?;
    #[derive(Serialize)]
    struct Doc<'a> {
        witness: &'a windows::Witness,
        flow_windows: &'a [windows::FlowWindow],
        delta: f64,
        covers_all_targets: bool,
        verified: bool,
    }
    let in_order = it.targets.windows(2).all(|p| p[0].window <= p[1].window);
    let covers = in_order && visited.iter().all(|v| *v);
    let verified = wit.full_pass && wit.revalidated == Some(true) && covers;
    w.json("witness.json", &Doc { witness: &wit, flow_windows: &boxes, delta: d.delta, covers_all_targets: covers, verified })?;
    if !verified {
        return Err(CliError::Numerical(format!(
            "witness not verified: full pass {}, revalidated {:?}, targets covered {covers}",
            wit.full_pass, wit.revalidated
        )));
    }
    Ok(())
}

fn slope(xs: &[f64], ys: &[f64]) -> f64 {
    let pts: Vec<(f64, f64)> =
        xs.iter().zip(ys).filter(|(x, y)| **x > 0.0 && **y > 0.0 && y.is_finite()).map(|(x, y)| (x.ln(), y.ln())).collect();
    if pts.len() < 2 {
        return f64::NAN;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    sxy / sxx
}

pub fn sweep(ctx: &Ctx<'_>, w: &mut Writer) -> Result<(), CliError> {
    let s = &ctx.cfg.sweep;
    let jm = ctx.params.j_max();
    let base = Base { i1: s.i1_frac * jm, phi1: s.phi1, phi2: s.phi2 };
    let mut rows = Vec::new();
    let mut cols: Vec<[f64; 6]> = Vec::new();
    for &eps in &ctx.cfg.eps_list {
        ctx.note(&format!("sweep at eps = {eps:e}"));
        let p = ctx.params.with_eps(eps);
        let g = graph_for(&p, &ctx.pert)?;
        let split = manifold::splitting_direct(&p, &ctx.pert, &g, &base, s.tau, Branch::Plus, &s.shoot)?;
        let pred = melnikov::splitting_distance(&p, &ctx.pert, &base, s.tau, Branch::Plus, eps)?;
        let shift = melnikov::scattering_shift(&p, &ctx.pert, base.i1, base.phi1, base.phi2, Branch::Plus, eps)?;
        let orb = manifold::scattering_map_direct(&p, &ctx.pert, &g, &base, Branch::Plus, shift.tau_star, &s.shoot)?;
        let angle = manifold::transversality_angle(&p, &ctx.pert, &g, &orb, &s.shoot)?;
        let di = orb.scattered.i1 - base.i1;
        let r = [eps, split, pred, angle, di, shift.reduced];
        rows.push(row![eps, split, pred, (split - pred).abs(), angle, di, shift.reduced, (di - shift.reduced).abs(), g.invariance_residual]);
        cols.push(r);
    }
    w.csv(
        "sweep.csv",
        &[
            "eps",
            "splitting_direct",
            "splitting_predicted",
            "splitting_diff",
            "transversality_angle",
            "dI1_direct",
            "dI1_predicted",
            "shift_diff",
            "nhim_residual",
        ],
        &rows,
    )?;
    let e: Vec<f64> = cols.iter().map(|c| c[0]).collect();
    let col = |f: &dyn Fn(&[f64; 6]) -> f64| cols.iter().map(f).collect::<Vec<f64>>();
    #[derive(Serialize)]
    struct Fits {
        splitting_slope: f64,
        angle_slope: f64,
        splitting_disagreement_slope: f64,
        shift_disagreement_slope: f64,
    }
    let fits = Fits {
        splitting_slope: slope(&e, &col(&|c| c[1].abs())),
        angle_slope: slope(&e, &col(&|c| c[3])),
        splitting_disagreement_slope: slope(&e, &col(&|c| (c[1] - c[2]).abs())),
        shift_disagreement_slope: slope(&e, &col(&|c| (c[4] - c[5]).abs())),
    };
    w.json("sweep_fit.json", &fits)
}
