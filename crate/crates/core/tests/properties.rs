//! Property tests for the measure operations, the transport distances and
//! the derivative calculus.

use proptest::prelude::*;

use p2flow_core::calculus::{
    laplacian, lions_derivative_closed, lions_derivative_numeric, square_field,
};
use p2flow_core::functionals::{CylindricalFunctional, Linear, NormSquared, Poly3};
use p2flow_core::mat::Mat;
use p2flow_core::measures::ParticleEnsemble;
use p2flow_core::wasserstein::{
    index_coupling_cost, w2_1d, w2_assignment, w2_bruteforce,
};

fn ensemble_strategy(
    n: usize,
    d: usize,
) -> impl Strategy<Value = ParticleEnsemble> {
    proptest::collection::vec(-5.0f64..5.0, n * d)
        .prop_map(move |xs| ParticleEnsemble::new(d, xs).unwrap())
}

fn pair_strategy() -> impl Strategy<Value = (ParticleEnsemble, ParticleEnsemble)> {
    (1usize..=7, 1usize..=3).prop_flat_map(|(n, d)| {
        (ensemble_strategy(n, d), ensemble_strategy(n, d))
    })
}

fn triple_strategy(
) -> impl Strategy<Value = (ParticleEnsemble, ParticleEnsemble, ParticleEnsemble)> {
    (1usize..=6, 1usize..=3).prop_flat_map(|(n, d)| {
        (
            ensemble_strategy(n, d),
            ensemble_strategy(n, d),
            ensemble_strategy(n, d),
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn assignment_equals_bruteforce((mu, nu) in pair_strategy()) {
        let (da, _) = w2_assignment(&mu, &nu).unwrap();
        let (db, _) = w2_bruteforce(&mu, &nu).unwrap();
        prop_assert!((da - db).abs() < 1e-12, "{da} vs {db}");
    }

    #[test]
    fn w2_is_symmetric((mu, nu) in pair_strategy()) {
        let ab = w2_assignment(&mu, &nu).unwrap().0;
        let ba = w2_assignment(&nu, &mu).unwrap().0;
        prop_assert!((ab - ba).abs() < 1e-9);
    }

    #[test]
    fn w2_triangle_inequality((mu, nu, rho) in triple_strategy()) {
        let ab = w2_assignment(&mu, &nu).unwrap().0;
        let bc = w2_assignment(&nu, &rho).unwrap().0;
        let ac = w2_assignment(&mu, &rho).unwrap().0;
        prop_assert!(ac <= ab + bc + 1e-9, "{ac} > {ab} + {bc}");
    }

    #[test]
    fn index_coupling_dominates_w2((mu, nu) in pair_strategy()) {
        let w2sq = w2_assignment(&mu, &nu).unwrap().1.cost;
        let idx = index_coupling_cost(&mu, &nu).unwrap();
        prop_assert!(w2sq <= idx + 1e-12);
    }

    #[test]
    fn w2_scales_with_dilation((mu, nu) in pair_strategy(), c in -3.0f64..3.0) {
        let base = w2_assignment(&mu, &nu).unwrap().0;
        let mu_c = mu.pushforward(|x, out| {
            for (o, v) in out.iter_mut().zip(x.iter()) { *o = c * v; }
        }).unwrap();
        let nu_c = nu.pushforward(|x, out| {
            for (o, v) in out.iter_mut().zip(x.iter()) { *o = c * v; }
        }).unwrap();
        let scaled = w2_assignment(&mu_c, &nu_c).unwrap().0;
        prop_assert!((scaled - c.abs() * base).abs() < 1e-9);
    }

    #[test]
    fn w2_1d_matches_assignment(
        (mu, nu) in (1usize..=32).prop_flat_map(|n| (ensemble_strategy(n, 1), ensemble_strategy(n, 1)))
    ) {
        let sorted = w2_1d(&mu, &nu).unwrap();
        let assigned = w2_assignment(&mu, &nu).unwrap().0;
        prop_assert!((sorted - assigned).abs() < 1e-12);
    }

    #[test]
    fn pushforward_preserves_shape_and_moment_scaling(
        mu in (1usize..=8, 1usize..=3).prop_flat_map(|(n, d)| ensemble_strategy(n, d)),
        c in -3.0f64..3.0,
    ) {
        let scaled = mu.pushforward(|x, out| {
            for (o, v) in out.iter_mut().zip(x.iter()) { *o = c * v; }
        }).unwrap();
        prop_assert_eq!(scaled.len(), mu.len());
        prop_assert_eq!(scaled.dim(), mu.dim());
        // order preserved: particle i is the image of particle i
        for i in 0..mu.len() {
            for j in 0..mu.dim() {
                prop_assert_eq!(scaled.position(i)[j], c * mu.position(i)[j]);
            }
        }
        let m2 = mu.second_moment();
        prop_assert!((scaled.second_moment() - c * c * m2).abs() < 1e-9 * (1.0 + m2));
    }

    #[test]
    fn zero_perturbation_is_identity(
        mu in (1usize..=8, 1usize..=3).prop_flat_map(|(n, d)| ensemble_strategy(n, d)),
    ) {
        let same = mu.perturb(|x, out| out.copy_from_slice(x), 0.0).unwrap();
        prop_assert_eq!(same, mu);
    }
}

/// Random smooth cylindrical functional on 1-d state with a genuinely
/// nonzero third derivative (for the order study).
fn random_cylindrical(
    lin: f64,
    quad: f64,
    cubic: f64,
    h_quad: f64,
) -> CylindricalFunctional {
    CylindricalFunctional::new(
        Box::new(Poly3 {
            c0: 0.0,
            c1: vec![lin, 0.5],
            quad: Mat::from_rows(2, 2, vec![quad, 0.3, 0.3, 1.0]),
            c3: vec![cubic, 0.1],
        }),
        vec![
            Box::new(Poly3 {
                c0: 0.0,
                c1: vec![1.0],
                quad: Mat::from_rows(1, 1, vec![h_quad]),
                c3: vec![0.2],
            }),
            Box::new(NormSquared { dim: 1 }),
        ],
    )
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn numeric_derivative_has_second_order(
        lin in 0.3f64..1.5,
        quad in 0.3f64..1.5,
        cubic in 0.2f64..0.8,
        h_quad in 0.3f64..1.2,
        xs in proptest::collection::vec(-1.5f64..1.5, 4),
        phi_scale in 0.4f64..1.2,
    ) {
        let f = random_cylindrical(lin, quad, cubic, h_quad);
        let mu = ParticleEnsemble::new(1, xs).unwrap();
        let phi = |x: &[f64], out: &mut [f64]| {
            out[0] = phi_scale * (1.0 + 0.5 * x[0]);
        };
        // closed-form pairing <Df, phi>_{L^2(mu)}
        let mut df = [0.0];
        let mut shift = [0.0];
        let mut closed = 0.0;
        for x in mu.iter() {
            lions_derivative_closed(&f, &mu, x, &mut df);
            phi(x, &mut shift);
            closed += df[0] * shift[0];
        }
        closed /= mu.len() as f64;

        let coarse =
            lions_derivative_numeric(|m| f.eval(m), &mu, phi, 1e-3).unwrap();
        let fine =
            lions_derivative_numeric(|m| f.eval(m), &mu, phi, 1e-4).unwrap();
        let e_coarse = (coarse - closed).abs();
        let e_fine = (fine - closed).abs();
        // skip degenerate cases where the cubic term cancels
        prop_assume!(e_coarse > 1e-11);
        let order = (e_coarse / e_fine).log10();
        prop_assert!(order >= 1.9, "observed order {order}");
    }

    #[test]
    fn square_field_chain_rule(
        a in 0.2f64..1.0,
        b in 0.2f64..1.0,
        xs in proptest::collection::vec(-1.5f64..1.5, 5),
    ) {
        // Gamma(f,g) = (Delta(fg) - f Delta g - g Delta f) / 2
        let f = CylindricalFunctional::new(
            Box::new(Poly3 {
                c0: 0.1,
                c1: vec![a],
                quad: Mat::from_rows(1, 1, vec![0.8]),
                c3: vec![0.3],
            }),
            vec![Box::new(NormSquared { dim: 1 })],
        )
        .unwrap();
        let g = CylindricalFunctional::new(
            Box::new(Poly3 {
                c0: -0.2,
                c1: vec![b],
                quad: Mat::from_rows(1, 1, vec![1.1]),
                c3: vec![0.2]
            }),
            vec![Box::new(Linear::coordinate(1, 0))],
        )
        .unwrap();
        let mu = ParticleEnsemble::new(1, xs).unwrap();

        let gamma = square_field(&f, &g, &mu);
        let f2 = CylindricalFunctional::new(
            Box::new(Poly3 {
                c0: 0.1,
                c1: vec![a],
                quad: Mat::from_rows(1, 1, vec![0.8]),
                c3: vec![0.3],
            }),
            vec![Box::new(NormSquared { dim: 1 })],
        )
        .unwrap();
        let g2 = CylindricalFunctional::new(
            Box::new(Poly3 {
                c0: -0.2,
                c1: vec![b],
                quad: Mat::from_rows(1, 1, vec![1.1]),
                c3: vec![0.2]
            }),
            vec![Box::new(Linear::coordinate(1, 0))],
        )
        .unwrap();
        let fg = CylindricalFunctional::product(f2, g2).unwrap();
        let chain =
            0.5 * (laplacian(&fg, &mu) - f.eval(&mu) * laplacian(&g, &mu)
                - g.eval(&mu) * laplacian(&f, &mu));
        let scale = 1.0 + gamma.abs() + chain.abs();
        prop_assert!((gamma - chain).abs() < 1e-10 * scale, "{gamma} vs {chain}");
    }

    #[test]
    fn square_field_is_nonnegative(
        a in 0.2f64..1.0,
        xs in proptest::collection::vec(-1.5f64..1.5, 4),
    ) {
        let f = CylindricalFunctional::new(
            Box::new(Poly3 {
                c0: 0.0,
                c1: vec![a],
                quad: Mat::from_rows(1, 1, vec![0.9]),
                c3: vec![0.15],
            }),
            vec![Box::new(NormSquared { dim: 1 })],
        )
        .unwrap();
        let mu = ParticleEnsemble::new(1, xs).unwrap();
        prop_assert!(square_field(&f, &f, &mu) >= 0.0);
    }
}
