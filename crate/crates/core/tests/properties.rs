use gmpf_core::dynamics::{number_transition_probs, DipoleState, LocationMode, TransitionModel};
use gmpf_core::filter::residual_resample;
use gmpf_core::mesh::{planar_grid, CorticalMesh, SurfacePoint};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn grid() -> CorticalMesh {
    planar_grid(6, 5, 4.0).unwrap()
}

proptest! {
    #[test]
    fn resampling_keeps_floor_copies(weights in prop::collection::vec(0.0f64..1.0, 1..60), seed in any::<u64>()) {
        prop_assume!(weights.iter().sum::<f64>() > 1e-9);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let idx = residual_resample(&weights, &mut rng);
        let n = weights.len();
        prop_assert_eq!(idx.len(), n);
        prop_assert!(idx.windows(2).all(|w| w[0] <= w[1]));
        let total: f64 = weights.iter().sum();
        for (i, &w) in weights.iter().enumerate() {
            let count = idx.iter().filter(|&&j| j == i).count();
            let expected = n as f64 * w / total;
            // Floors are copied deterministically; a zero weight is never drawn.
            prop_assert!(count as f64 >= expected.floor() - 1e-9);
            if w == 0.0 {
                prop_assert_eq!(count, 0);
            }
        }
    }

    #[test]
    fn barycentric_round_trip(face in 0usize..40, a in 0.0f64..1.0, b in 0.0f64..1.0) {
        let mesh = grid();
        let (phi, varphi) = if a + b > 1.0 { (1.0 - a, 1.0 - b) } else { (a, b) };
        let r = mesh.point_from_coeffs(face, phi, varphi);
        let (p2, v2) = mesh.barycentric_coeffs(face, &r).unwrap();
        prop_assert!((p2 - phi).abs() < 1e-10 && (v2 - varphi).abs() < 1e-10);
    }

    #[test]
    fn propagation_stays_on_the_surface(
        face in 0usize..40,
        scale in 0.01f64..=1.0,
        vertex in any::<bool>(),
        seed in any::<u64>(),
    ) {
        let mesh = grid();
        let t = TransitionModel {
            amplitude_sigma: 0.2,
            mode: if vertex { LocationMode::Vertex } else { LocationMode::Continuous },
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = DipoleState::new(SurfacePoint::new(face, 0.3, 0.3), 1.0);
        for _ in 0..20 {
            let y = t.propagate(&x, &mesh, &mut rng, scale);
            prop_assert!(y.location.is_valid());
            prop_assert!(y.location.face == x.location.face || mesh.adjacency(x.location.face).contains(&y.location.face));
            prop_assert!(y.amplitude.is_finite());
            x = y;
        }
    }

    #[test]
    fn count_transition_is_a_distribution(n in 0usize..12, p_b in 0.0f64..2.0, p_d in 0.0f64..2.0) {
        let t = number_transition_probs(n, p_b, p_d).unwrap();
        prop_assert!((t.plus + t.zero + t.minus - 1.0).abs() < 1e-12);
        prop_assert!(t.plus >= 0.0 && t.zero >= 0.0 && t.minus >= 0.0);
        if n == 0 {
            prop_assert_eq!(t.minus, 0.0);
        }
    }
}
