use fbci::config::RunConfig;
use fbci::densify::Level;
use fbci::grid::{Field, Grid};
use fbci::oscillate::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Case {
    q: Rect,
    l1: f64,
    l2: f64,
    eps: f64,
}

fn random_case(rng: &mut impl Rng, g: &Grid) -> Case {
    let w = 2 * rng.gen_range(16..=128);
    let ht = rng.gen_range(32..=128);
    let i0 = rng.gen_range(0..=g.nx - w);
    let n0 = rng.gen_range(0..=g.nt - ht);
    Case {
        q: Rect { i0, i1: i0 + w, n0, n1: n0 + ht },
        l1: rng.gen_range(0.2..2.0),
        l2: rng.gen_range(0.2..2.0),
        eps: rng.gen_range(0.1..0.5),
    }
}

/// Cell-averaged derivatives straight from the dense node fields.
fn cell_dx(f: &Field, i: usize, n: usize) -> f64 {
    let g = f.grid;
    0.5 * (f.at(i + 1, n) - f.at(i, n) + f.at(i + 1, n + 1) - f.at(i, n + 1)) / g.h()
}

fn cell_dt(f: &Field, i: usize, n: usize) -> f64 {
    let g = f.grid;
    0.5 * (f.at(i, n + 1) - f.at(i, n) + f.at(i + 1, n + 1) - f.at(i + 1, n)) / g.dt()
}

#[test]
fn twenty_random_rectangles_satisfy_all_five_properties() {
    let g = Grid::new(1024, 256, 1.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(61);
    for k in 0..20 {
        let c = random_case(&mut rng, &g);
        let p = build_profile(c.q, c.l1, c.l2, c.eps, &g, &mut rng).unwrap_or_else(|e| panic!("case {k}: {e}"));
        let (phi, psi) = p.fields(&g);
        let q = c.q;
        let inside = |i: usize, n: usize| q.contains_cell(i, n);

        // support: nothing outside Q or on its boundary nodes
        for n in 0..=g.nt {
            for i in 0..=g.nx {
                let interior = i > q.i0 && i < q.i1 && n > q.n0 && n < q.n1;
                if !interior {
                    assert_eq!(phi.at(i, n), 0.0, "case {k}: phi leaks at ({i}, {n})");
                    assert_eq!(psi.at(i, n), 0.0, "case {k}: psi leaks at ({i}, {n})");
                }
            }
        }

        // (a) sup bounds on omega, phi_t, psi_t
        assert!(phi.max_abs() < c.eps && psi.max_abs() < c.eps, "case {k}: (a) amplitude");
        let (mut minus, mut plus) = (0usize, 0usize);
        for n in q.n0..q.n1 {
            for i in q.i0..q.i1 {
                assert!(inside(i, n));
                assert!(cell_dt(&phi, i, n).abs() < c.eps, "case {k}: (a) phi_t");
                assert!(cell_dt(&psi, i, n).abs() < c.eps, "case {k}: (a) psi_t");
                // (b) slope bounds
                let s = cell_dx(&phi, i, n);
                assert!(s >= -c.l1 - 1e-12 && s <= c.l2 + 1e-12, "case {k}: (b) slope {s}");
                if (s + c.l1).abs() <= 1e-9 {
                    minus += 1;
                } else if (s - c.l2).abs() <= 1e-9 {
                    plus += 1;
                }
            }
        }

        // (c) plateau measures against lambda-weighted shares of |Q|
        let area = q.cells() as f64 * g.cell_area();
        let dm = (minus as f64 * g.cell_area() - c.l2 / (c.l1 + c.l2) * area).abs();
        let dp = (plus as f64 * g.cell_area() - c.l1 / (c.l1 + c.l2) * area).abs();
        assert!(dm < c.eps && dp < c.eps, "case {k}: (c) defects {dm} {dp}");
        let (pm, pp) = plateau_defects(&p, &g);
        assert!((pm - dm).abs() < 1e-12 && (pp - dp).abs() < 1e-12, "case {k}: reported plateaus");

        for n in q.n0..=q.n1 {
            // (d) psi_x = phi: trapezoid increments of psi reproduce phi
            for i in q.i0..q.i1 {
                let inc = psi.at(i + 1, n) - psi.at(i, n);
                let trap = 0.5 * g.h() * (phi.at(i, n) + phi.at(i + 1, n));
                assert!((inc - trap).abs() <= 1e-14, "case {k}: (d) at ({i}, {n})");
            }
            // (e) zero row mean, exactly in the trapezoid sense
            let mut sum = 0.0;
            for i in q.i0..=q.i1 {
                let w = if i == q.i0 || i == q.i1 { 0.5 } else { 1.0 };
                sum += w * phi.at(i, n);
            }
            assert!((sum * g.h()).abs() < 1e-12, "case {k}: (e) row {n}");
            assert!(psi.at(q.i1, n).abs() < 1e-12, "case {k}: psi at the right edge");
        }
        assert!(p.row_mean_defect(&g) < 1e-12);
    }
}

#[test]
fn unit_square_with_equal_slopes_splits_evenly() {
    let g = Grid::new(4096, 1024, 1.0).unwrap();
    let q = Rect { i0: 0, i1: 4096, n0: 0, n1: 1024 };
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let p = build_profile(q, 1.0, 1.0, 0.05, &g, &mut rng).unwrap();
    assert!((p.plateau_minus_measure - 0.5).abs() < 0.05);
    assert!((p.plateau_plus_measure - 0.5).abs() < 0.05);
}

#[test]
fn degenerate_inputs_are_rejected() {
    let g = Grid::new(64, 64, 1.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let q = Rect { i0: 0, i1: 16, n0: 0, n1: 16 };
    assert!(matches!(build_profile(q, 1.0, 1.0, 0.0, &g, &mut rng), Err(OscillateError::BudgetInfeasible(_))));
    assert!(matches!(build_profile(q, -1.0, 1.0, 0.1, &g, &mut rng), Err(OscillateError::BudgetInfeasible(_))));
    let thin = Rect { i0: 0, i1: 6, n0: 0, n1: 16 };
    assert!(matches!(build_profile(thin, 1.0, 1.0, 0.1, &g, &mut rng), Err(OscillateError::TooSmall(_))));
    // a tiny budget cannot fit a four-cell period
    assert!(matches!(
        build_profile(q, 1.0, 1.0, 1e-4, &g, &mut rng),
        Err(OscillateError::UnresolvableSawtooth(_))
    ));
}

fn slopes() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, f64)> {
    (4usize..40).prop_flat_map(|m| {
        (
            prop::collection::vec(0.1f64..3.0, 2 * m),
            prop::collection::vec(0.1f64..3.0, 2 * m),
            0.0f64..1.0,
        )
    })
}

proptest! {
    #[test]
    fn closed_sawtooth_is_odd_closed_and_within_slopes((l1, l2, phase) in slopes()) {
        let h = 1.0 / 512.0;
        let (f, u1, u2) = closed_sawtooth(&l1, &l2, h, phase);
        let w = l1.len();
        prop_assert_eq!(f[0], 0.0);
        prop_assert_eq!(f[w], 0.0);
        for j in 0..=w {
            prop_assert_eq!(f[w - j], -f[j]);
        }
        let mean: f64 = (0..=w).map(|j| if j == 0 || j == w { 0.5 * f[j] } else { f[j] }).sum::<f64>() * h;
        prop_assert!(mean.abs() < 1e-15);
        for c in 0..w {
            let s = (f[c + 1] - f[c]) / h;
            prop_assert!(s >= -l1[c] * (1.0 + 1e-12) && s <= l2[c] * (1.0 + 1e-12));
            prop_assert!(u1[c] <= l1[c] && u2[c] <= l2[c]);
        }
    }
}

#[test]
fn superposition_is_additive_and_local() {
    let p = RunConfig::default_config().prepare().unwrap();
    let grid = Grid::new(256, 256, p.spec.t_final).unwrap();
    let level = Level::new(p.base_on(&grid).unwrap(), &p.spec, &p.kprime);
    let set = level.setting(&p.kprime);
    let base = &level.base_state;
    let g = grid;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    // two disjoint rectangles in the middle of the transition region
    let om = level.base.omega2();
    let inside = |q: &Rect| (q.n0..q.n1).all(|n| (q.i0..q.i1).all(|i| om.get(i, n)));
    // the transition region is a thin layer above t = 0
    let fits = |i0: usize, n0: usize| {
        let q = Rect { i0, i1: i0 + 16, n0, n1: n0 + 6 };
        inside(&q).then_some(q)
    };
    let qa = (0..g.nx - 16).find_map(|i| fits(i, 1)).unwrap();
    let qb = (qa.i1..g.nx - 16).find_map(|i| fits(i, 1)).unwrap();
    let profile = |q: Rect, a: f64, b: f64, rng: &mut ChaCha8Rng| {
        let (l1, l2) = (vec![a; q.width()], vec![b; q.width()]);
        let (f, l1, l2) = closed_sawtooth(&l1, &l2, g.h(), rng.gen());
        let time = vec![0.0, 0.5, 1.0, 1.0, 1.0, 0.5, 0.0];
        OscillationProfile::from_parts(q, l1, l2, f, 0.0, time, &g)
    };
    let pa = profile(qa, 0.5, 0.5, &mut rng);
    let pb = profile(qb, 0.3, 0.7, &mut rng);
    let same = superpose(base, &[], &set).unwrap();
    assert_eq!(same.u.values, base.u.values);

    let one = superpose(base, std::slice::from_ref(&pa), &set).unwrap();
    let both = superpose(base, &[pa.clone(), pb.clone()], &set).unwrap();
    let (fa, _) = pa.fields(&g);
    let (fb, _) = pb.fields(&g);
    for k in 0..base.u.values.len() {
        let want = base.u.values[k] + fa.values[k] + fb.values[k];
        assert!((both.u.values[k] - want).abs() < 1e-15);
    }
    assert_eq!(one.escaped_nodes(&level.base), 0);
    assert_eq!(both.escaped_nodes(&level.base), 0);
    assert_eq!(both.omega_w.count(), qa.cells() + qb.cells());
    // v_x = u for the perturbation in the trapezoid sense
    for n in 0..=g.nt {
        for i in 0..g.nx {
            let du = |i: usize| both.u.at(i, n) - base.u.at(i, n);
            let dv = both.v.at(i + 1, n) - base.v.at(i + 1, n) - both.v.at(i, n) + base.v.at(i, n);
            assert!((dv - 0.5 * g.h() * (du(i) + du(i + 1))).abs() < 1e-14);
        }
    }

    assert!(matches!(superpose(base, &[pa.clone(), pa.clone()], &set), Err(OscillateError::OverlapViolation(..))));
    let outside = profile(Rect { i0: 0, i1: 16, n0: 0, n1: 6 }, 0.5, 0.5, &mut rng);
    assert!(matches!(superpose(base, &[outside], &set), Err(OscillateError::SupportEscape(_))));
}
