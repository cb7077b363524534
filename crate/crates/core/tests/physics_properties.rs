//! Dispersion-solver properties checked against independent oracles.

use std::f64::consts::PI;

use num_complex::Complex64;
use proptest::prelude::*;
use spp_cascade::physics::{
    drude_permittivity, single_interface_beta, thin_film_beta, thin_film_solve,
    ComplexPermittivity, DrudeParams, FilmDispersion, ModeParity, SolverSettings,
};

const NM: f64 = 1e-9;
const GRID_THICKNESSES: [f64; 9] = [36.0, 42.0, 48.0, 54.0, 60.0, 72.0, 84.0, 96.0, 128.0];

/// Winding number of `f` around the rectangle [re0, re1] x [im0, im1],
/// sampling each edge adaptively so that no phase increment exceeds π/8.
fn winding_number(
    f: &dyn Fn(Complex64) -> Complex64,
    re0: f64,
    re1: f64,
    im0: f64,
    im1: f64,
) -> i64 {
    let corners = [
        Complex64::new(re0, im0),
        Complex64::new(re1, im0),
        Complex64::new(re1, im1),
        Complex64::new(re0, im1),
    ];
    let mut total = 0.0;
    for k in 0..4 {
        total += edge_phase(f, corners[k], corners[(k + 1) % 4], 0);
    }
    (total / (2.0 * PI)).round() as i64
}

fn edge_phase(f: &dyn Fn(Complex64) -> Complex64, a: Complex64, b: Complex64, depth: u32) -> f64 {
    let fa = f(a);
    let fb = f(b);
    let d = (fb / fa).arg();
    if d.abs() < PI / 8.0 || depth > 40 {
        return d;
    }
    let mid = (a + b) * 0.5;
    edge_phase(f, a, mid, depth + 1) + edge_phase(f, mid, b, depth + 1)
}

/// Quadsection root enumeration: keeps every box with non-zero winding
/// number until its side is below `resolution`.
fn enumerate_roots(
    f: &dyn Fn(Complex64) -> Complex64,
    re: (f64, f64),
    im: (f64, f64),
    resolution: f64,
) -> Vec<Complex64> {
    let mut stack = vec![(re.0, re.1, im.0, im.1)];
    let mut roots = Vec::new();
    while let Some((r0, r1, i0, i1)) = stack.pop() {
        if winding_number(f, r0, r1, i0, i1) == 0 {
            continue;
        }
        if (r1 - r0).max(i1 - i0) < resolution {
            roots.push(Complex64::new(0.5 * (r0 + r1), 0.5 * (i0 + i1)));
            continue;
        }
        let rm = 0.5 * (r0 + r1);
        let im_mid = 0.5 * (i0 + i1);
        stack.push((r0, rm, i0, im_mid));
        stack.push((rm, r1, i0, im_mid));
        stack.push((r0, rm, im_mid, i1));
        stack.push((rm, r1, im_mid, i1));
    }
    roots
}

#[test]
fn thin_film_root_agrees_with_argument_principle_scan() {
    let lambda0 = 500.0 * NM;
    let eps = drude_permittivity(lambda0, &DrudeParams::molybdenum()).unwrap();
    for parity in [ModeParity::Antisymmetric, ModeParity::Symmetric] {
        let eq = FilmDispersion {
            eps_d: 1.0,
            eps_m: eps.as_complex(),
            thickness_ratio: 36.0 / 500.0,
            parity,
        };
        // Boxes sit off grid-aligned values so no root lands on an edge.
        let roots = enumerate_roots(
            &|n| eq.evaluate(n).0,
            (1.000_013, 1.613),
            (1.3e-7, 0.0517),
            1e-9,
        );
        assert_eq!(
            roots.len(),
            1,
            "{parity}: expected one bound root, found {roots:?}"
        );
        let w = thin_film_beta(1.0, eps, 36.0 * NM, lambda0, parity).unwrap();
        let n = w.effective_index();
        assert!(
            (n - roots[0]).norm() < 2e-9,
            "{parity}: newton {n} vs scan {}",
            roots[0]
        );
    }
}

#[test]
fn thick_film_convergence_is_monotone_on_the_grid() {
    let mo = DrudeParams::molybdenum();
    for parity in [ModeParity::Antisymmetric, ModeParity::Symmetric] {
        for k in 0..31 {
            let lambda0 = (400.0 + 10.0 * k as f64) * NM;
            let eps = drude_permittivity(lambda0, &mo).unwrap();
            let single = single_interface_beta(1.0, eps, lambda0).unwrap();
            let gaps: Vec<f64> = GRID_THICKNESSES
                .iter()
                .filter(|&&t| t >= 60.0)
                .map(|&t| {
                    (thin_film_beta(1.0, eps, t * NM, lambda0, parity)
                        .unwrap()
                        .beta
                        - single.beta)
                        .norm()
                })
                .collect();
            for w in gaps.windows(2) {
                assert!(w[1] < w[0], "{parity} at {} nm: {gaps:?}", lambda0 / NM);
            }
        }
    }
}

#[test]
fn grid_solutions_are_forward_and_accurate() {
    let mo = DrudeParams::molybdenum();
    let settings = SolverSettings::default();
    for parity in [ModeParity::Antisymmetric, ModeParity::Symmetric] {
        for k in 0..=30 {
            let lambda0 = (400.0 + 10.0 * k as f64) * NM;
            let eps = drude_permittivity(lambda0, &mo).unwrap();
            for t in GRID_THICKNESSES {
                let sol = thin_film_solve(1.0, eps, t * NM, lambda0, parity, &settings).unwrap();
                assert!(sol.wavevector.bound);
                assert!(sol.wavevector.beta.re > 0.0 && sol.wavevector.beta.im >= 0.0);
                assert!(sol.residual < 1e-10);
                let eq = FilmDispersion {
                    eps_d: 1.0,
                    eps_m: eps.as_complex(),
                    thickness_ratio: t / (lambda0 / NM),
                    parity,
                };
                assert!(eq.normalized_residual(sol.wavevector.effective_index()) < 1e-10);
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn joint_rescaling_leaves_beta_lambda_invariant(
        s in 0.05f64..20.0,
        lambda_nm in 400.0f64..700.0,
        t_nm in 30.0f64..150.0,
        eps_re in -30.0f64..-3.0,
        eps_im in 0.0f64..3.0,
        symmetric in any::<bool>(),
    ) {
        let parity = if symmetric { ModeParity::Symmetric } else { ModeParity::Antisymmetric };
        let eps = ComplexPermittivity::new(eps_re, eps_im);
        let a = thin_film_beta(1.0, eps, t_nm * NM, lambda_nm * NM, parity).unwrap();
        let b = thin_film_beta(1.0, eps, s * t_nm * NM, s * lambda_nm * NM, parity).unwrap();
        let na = a.beta * (lambda_nm * NM);
        let nb = b.beta * (s * lambda_nm * NM);
        prop_assert!((na - nb).norm() <= 1e-9 * na.norm());
    }

    #[test]
    fn interface_branch_is_forward_for_passive_metals(
        eps_d in 1.0f64..4.0,
        eps_re in -50.0f64..-4.1,
        eps_im in 0.0f64..10.0,
        lambda_nm in 300.0f64..1500.0,
    ) {
        let w = single_interface_beta(eps_d, ComplexPermittivity::new(eps_re, eps_im), lambda_nm * NM).unwrap();
        prop_assert!(w.bound);
        prop_assert!(w.beta.re > 0.0);
        prop_assert!(w.beta.im >= 0.0);
        // bound mode is slower than light in the dielectric
        prop_assert!(w.beta.re > w.k0 * eps_d.sqrt());
    }
}
