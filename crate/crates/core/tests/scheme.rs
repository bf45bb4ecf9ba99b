//! Path-level invariants of the Euler scheme with edge-dependent diffusion.

use proptest::prelude::*;

use spider::simulator::{simulate_path, SimConfig, SpiderState, VertexPolicy};
use spider::verify::scattering_distribution;
use spider::{Bounds, CoefficientSet, EdgeIndex};

fn bounds() -> Bounds {
    Bounds { a_lower: 0.1, sigma_lower: 0.3, b_bound: 3.0, sigma_bound: 2.0, alpha_lip: 1.0 }
}

fn cfg(h: f64, horizon: f64, n_paths: usize, seed: u64) -> SimConfig {
    SimConfig { h, horizon, delta_shell: 0.005, policy: VertexPolicy::ScaledReflection, n_paths, seed, store_paths: true }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn step_identity_with_unequal_sigma(
        s1 in 0.3f64..2.0, s2 in 0.3f64..2.0, b1 in -1.0f64..1.0, b2 in -1.0f64..1.0,
        a1 in 0.1f64..0.9, x0 in 0.0f64..0.5, seed in 0u64..1000,
    ) {
        let c = CoefficientSet::constant(&[b1, b2], &[s1, s2], &[a1, 1.0 - a1], bounds()).unwrap();
        let init = SpiderState::new(0.0, x0, EdgeIndex::from_one_based(1), 0.0);
        let p = simulate_path(&c, &init, &cfg(1e-3, 0.5, 1, seed), 0).unwrap();
        let h = p.meta.h;
        for k in 0..p.len() - 1 {
            let (b, s) = if p.edge[k].get() == 1 { (b1, s1) } else { (b2, s2) };
            let rhs = p.x[k] + b * h + s * h.sqrt() * p.gaussians[k] + (p.l[k + 1] - p.l[k]);
            prop_assert!((p.x[k + 1] - rhs).abs() <= 1e-12 * (1.0 + p.x[k].abs()));
            prop_assert!(p.x[k + 1] >= 0.0);
            prop_assert!(p.l[k + 1] >= p.l[k]);
            prop_assert_eq!(p.l[k + 1] > p.l[k], p.contact[k + 1]);
        }
    }
}

#[test]
fn scaled_reflection_matches_reflection_for_equal_sigma() {
    let c = CoefficientSet::constant(&[0.2, -0.1], &[0.7, 0.7], &[0.3, 0.7], bounds()).unwrap();
    let init = SpiderState::vertex(0.0, 0.0);
    let scaled = simulate_path(&c, &init, &cfg(1e-3, 1.0, 1, 5), 0).unwrap();
    let plain = simulate_path(&c, &init, &SimConfig { policy: VertexPolicy::Reflection, ..cfg(1e-3, 1.0, 1, 5) }, 0).unwrap();
    assert_eq!(scaled.x, plain.x);
    assert_eq!(scaled.l, plain.l);
    assert_eq!(scaled.edge, plain.edge);
}

#[test]
fn scaled_exit_law_is_alpha_when_sigma_differs() {
    let c = CoefficientSet::constant(&[0.0, 0.0], &[1.0, 0.4], &[0.6, 0.4], bounds()).unwrap();
    let sc = scattering_distribution(&c, 0.0, 0.0, 0.05, &cfg(1e-5, 1.0, 20_000, 31)).unwrap();
    assert_eq!(sc.censored, 0);
    for (row, target) in sc.rows.iter().zip([0.6, 0.4]) {
        assert!((row.freq - target).abs() <= 3.0 * row.stderr, "edge {}: {} vs {target}", row.edge, row.freq);
    }
}
