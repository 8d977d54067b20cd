use tsd::manifold::NhimApprox;
use tsd::windows::{build_itinerary, thicken_to_flow_windows, verify_shadowing, Connector, ItineraryConfig, Target, Verdict};
use tsd::{Params, Pert};

#[test]
fn short_perturbed_itinerary_shadows() {
    let p = Params::default().with_eps(1e-3);
    let pert = Pert::two_harmonic();
    let g = NhimApprox::flat(&p);
    let jm = p.j_max();
    let cfg = ItineraryConfig { h_theta: 0.03, ..Default::default() };
    let targets = [Target::Circle { j: 0.45 * jm }, Target::Circle { j: 0.452 * jm }];
    let it = build_itinerary(&p, &pert, &g, &targets, &cfg).unwrap();

    assert!(it.windows.len() >= 2 && it.windows.len() <= 10, "{} windows", it.windows.len());
    assert_eq!(it.links.len() + 1, it.windows.len());
    for l in &it.links {
        assert_eq!(l.report.verdict, Verdict::Aligned, "{:?}", l.report);
        assert!(l.report.margin > 1e-4);
        assert_ne!(l.report.degree, 0);
        assert!(matches!(l.connector, Connector::Scattering { .. }));
    }
    assert!(it.min_margin() > 1e-4);
    let last = it.windows.last().unwrap();
    assert!(last.straddles(0.452 * jm));
    assert!(it.windows[0].straddles(0.45 * jm));

    let w = verify_shadowing(&it, 16).unwrap();
    assert!(w.full_pass);
    assert_eq!(w.revalidated, Some(true));
    for (k, q) in w.points.iter().enumerate() {
        assert!(it.windows[k].contains(*q), "point {k} outside its window");
    }
    assert_eq!(w.target_windows.first(), Some(&0));
    assert_eq!(w.target_windows.last(), Some(&(it.windows.len() - 1)));

    let boxes = thicken_to_flow_windows(&it, 0.5).unwrap();
    assert_eq!(boxes.len(), it.windows.len());
    for b in &boxes[..boxes.len() - 1] {
        assert!(b.nesting_margin.unwrap() > 0.0);
    }
}
