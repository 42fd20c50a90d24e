use fbci::flux::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn reference() -> (FluxModel, PhaseWindow, KPrime) {
    let m = validate_flux(&FluxDescription::reference()).unwrap();
    let w = build_window(&m, 1.2, 1.8).unwrap();
    let k = KPrime::new(&m, &w);
    (m, w, k)
}

#[test]
fn conjugate_points_of_the_reference_flux() {
    let (m, _, _) = reference();
    // sigma(s) = 2 at s = 1 on the left piece 2s and on the right piece 2s - 3
    assert!((m.s1_star - 0.5).abs() < 1e-12);
    assert!((m.s2_star - 2.5).abs() < 1e-12);
}

#[test]
fn window_endpoints_match_closed_form() {
    let (_, w, _) = reference();
    assert!((w.s_minus_r1 - 0.6).abs() < 1e-12);
    assert!((w.s_minus_r2 - 0.9).abs() < 1e-12);
    assert!((w.s_plus_r1 - 2.1).abs() < 1e-12);
    assert!((w.s_plus_r2 - 2.4).abs() < 1e-12);
}

#[test]
fn branch_inverses_at_one_hundred_levels() {
    let (m, _, _) = reference();
    for j in 0..100 {
        let r = 1.0 + j as f64 / 99.0;
        let lo = m.branch_inverse(r, Branch::Left).unwrap();
        let hi = m.branch_inverse(r, Branch::Right).unwrap();
        assert!((m.eval(lo) - r).abs() <= 1e-10, "left r = {r}");
        assert!((m.eval(hi) - r).abs() <= 1e-10, "right r = {r}");
        assert!(lo <= 1.0 && hi >= 2.0);
        assert!((lo - 0.5 * r).abs() < 1e-10);
        assert!((hi - 0.5 * (r + 3.0)).abs() < 1e-10);
    }
}

#[test]
fn levels_outside_the_range_are_rejected() {
    let (m, _, _) = reference();
    assert!(m.branch_inverse(0.5, Branch::Left).is_err());
    assert!(m.branch_inverse(2.5, Branch::Right).is_err());
}

/// Minimum distance to `10^6` points sampled on the two arcs of K'.
fn brute_force(m: &FluxModel, w: &PhaseWindow, p: (f64, f64)) -> f64 {
    let per_arc = 500_000;
    let mut best = f64::INFINITY;
    for (a, b) in [(w.s_minus_r1, w.s_minus_r2), (w.s_plus_r1, w.s_plus_r2)] {
        for j in 0..per_arc {
            let s = a + (b - a) * j as f64 / (per_arc - 1) as f64;
            let d = (p.0 - s).powi(2) + (p.1 - m.eval(s)).powi(2);
            best = best.min(d);
        }
    }
    best.sqrt()
}

#[test]
fn projection_matches_brute_force_sampling() {
    let (m, w, k) = reference();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..100 {
        let p = (rng.gen_range(0.0..3.0), rng.gen_range(0.8..2.2));
        let fast = distance_to_kprime(&k, p.0, p.1).distance;
        let slow = brute_force(&m, &w, p);
        assert!((fast - slow).abs() <= 1e-6, "{p:?}: {fast} vs {slow}");
    }
}

/// Closed form for the straight arcs of the reference flux.
fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let d = (b.0 - a.0, b.1 - a.1);
    let t = (((p.0 - a.0) * d.0 + (p.1 - a.1) * d.1) / (d.0 * d.0 + d.1 * d.1)).clamp(0.0, 1.0);
    ((p.0 - a.0 - t * d.0).powi(2) + (p.1 - a.1 - t * d.1).powi(2)).sqrt()
}

proptest! {
    #[test]
    fn projection_agrees_with_line_segments(s in -1.0f64..4.0, g in 0.0f64..3.0) {
        let (_, _, k) = reference();
        let exact = segment_distance((s, g), (0.6, 1.2), (0.9, 1.8))
            .min(segment_distance((s, g), (2.1, 1.2), (2.4, 1.8)));
        prop_assert!((k.distance(s, g) - exact).abs() < 1e-12);
    }

    #[test]
    fn lens_membership_is_the_open_quadrilateral(s in 0.0f64..3.0, g in 1.0f64..2.0) {
        let (_, _, k) = reference();
        let inside = g > 1.2 && g < 1.8 && s > 0.5 * g && s < 0.5 * (g + 3.0);
        // skip points within roundoff of the boundary
        let margin = (g - 1.2).abs().min((g - 1.8).abs()).min((s - 0.5 * g).abs()).min((s - 0.5 * (g + 3.0)).abs());
        prop_assume!(margin > 1e-9);
        prop_assert_eq!(k.inside_u(s, g), inside);
    }

    #[test]
    fn modified_flux_is_monotone_and_matches_outside_the_blend(a in -0.5f64..3.5, d in 1e-4f64..0.5) {
        let (m, w, _) = reference();
        let sig = build_modified_flux(&m, &w).unwrap();
        prop_assert!(sig.eval(a + d) > sig.eval(a));
        prop_assert!(sig.slope(a) > 0.0);
        if a < w.s_minus_r1 - 0.05 || a > w.s_plus_r2 + 0.05 {
            prop_assert!((sig.eval(a) - m.eval(a)).abs() < 1e-12);
        }
    }
}
