//! Cross-module checks of the gradient oracles against dense linear algebra.

use approx::assert_relative_eq;
use phantom_grad::densemath::{dense_solve, Mat, Vector};
use phantom_grad::diagnostics::{exact_matrix, npg_matrix, standard_normal_vector, upg_matrix};
use phantom_grad::fpsolvers::{solve, SolverSpec};
use phantom_grad::gradoracles::{bptt_exact, compute, ift_exact, npg, upg, GradMethod, GradOracleSpec};
use phantom_grad::{EqModule, ModuleKind};

fn rel(a: &Vector, b: &Vector) -> f64 {
    a.sub(b).unwrap().norm2() / b.norm2()
}

fn setup(kind: ModuleKind, d: usize, l: f64, seed: u64) -> (EqModule, Vector, Vector, Vector) {
    let m = EqModule::synthetic(kind, d, l, seed).unwrap();
    let u = standard_normal_vector(d, seed, "u");
    let h = solve(&m, &u, &SolverSpec::picard(1e-15, 20_000), None).unwrap().h_star;
    let v = standard_normal_vector(d, seed, "v");
    (m, u, h, v)
}

#[test]
fn ift_matches_dense_inverse_for_both_families() {
    for kind in [ModuleKind::LinearContraction, ModuleKind::AffineTanh] {
        for seed in 0..4 {
            let (m, u, h, v) = setup(kind, 10, 0.95, seed);
            let (jh, jt) = m.materialize_jacobians(&h, &u).unwrap();
            let g = dense_solve(&Mat::identity(10).sub(&jh).unwrap(), &v).unwrap();
            let want = jt.matvec(&g).unwrap();
            let got = ift_exact(&m, &h, &u, &v, &GradOracleSpec::ift()).unwrap();
            assert!(rel(&got.grad_theta, &want) < 1e-8, "{kind:?} seed {seed}");
            let broyden = ift_exact(&m, &h, &u, &v, &GradOracleSpec::ift_broyden(60)).unwrap();
            assert!(rel(&broyden.grad_theta, &want) < 1e-8, "{kind:?} seed {seed}");
        }
    }
}

#[test]
fn matrix_forms_agree_with_matrix_free_oracles() {
    let (m, u, h, v) = setup(ModuleKind::AffineTanh, 6, 0.8, 7);
    let (jh, jt) = m.materialize_jacobians(&h, &u).unwrap();
    for (k, lambda) in [(1, 1.0), (4, 0.5), (9, 0.25)] {
        let a = npg_matrix(&jh, &jt, k, lambda).unwrap();
        let g = npg(&m, &h, &u, &v, k, lambda).unwrap();
        assert!(rel(&g.grad_theta, &a.matvec(&v).unwrap()) < 1e-12);
        let a = upg_matrix(&m, &h, &u, k, lambda).unwrap();
        let g = upg(&m, &h, &u, &v, k, lambda).unwrap();
        assert!(rel(&g.grad_theta, &a.matvec(&v).unwrap()) < 1e-10);
    }
    let exact = exact_matrix(&jh, &jt).unwrap().matvec(&v).unwrap();
    let far = npg(&m, &h, &u, &v, 400, 1.0).unwrap();
    assert!(rel(&far.grad_theta, &exact) < 1e-12);
}

#[test]
fn bptt_converges_to_ift_with_forward_precision() {
    let m = EqModule::synthetic(ModuleKind::AffineTanh, 16, 0.9, 3).unwrap();
    let u = standard_normal_vector(16, 3, "u");
    let v = standard_normal_vector(16, 3, "v");
    let mut last = f64::INFINITY;
    for tol in [1e-3, 1e-6, 1e-10] {
        let fwd = solve(&m, &u, &SolverSpec::picard(tol, 1000).with_trajectory(), None).unwrap();
        let b = bptt_exact(&m, &fwd, &u, &v, 1.0).unwrap();
        let i = ift_exact(&m, &fwd.h_star, &u, &v, &GradOracleSpec::ift()).unwrap();
        let err = rel(&b.joint(), &i.joint());
        assert!(err < last, "{err} after {last}");
        last = err;
    }
    assert!(last < 1e-8);
}

#[test]
fn compute_dispatches_every_method() {
    let m = EqModule::synthetic(ModuleKind::AffineTanh, 5, 0.7, 1).unwrap();
    let u = standard_normal_vector(5, 1, "u");
    let v = standard_normal_vector(5, 1, "v");
    let fwd = solve(&m, &u, &SolverSpec::picard(1e-13, 500).with_trajectory(), None).unwrap();
    let exact = ift_exact(&m, &fwd.h_star, &u, &v, &GradOracleSpec::ift())
        .unwrap()
        .joint();
    for method in [
        GradMethod::IFTExact,
        GradMethod::BPTT,
        GradMethod::UPG,
        GradMethod::NPG,
        GradMethod::OneStep,
    ] {
        let spec = GradOracleSpec::phantom(method, 60, 1.0);
        let g = compute(&m, &fwd, &u, &v, &spec, 1.0).unwrap();
        assert_eq!(g.method.method, method);
        let tol = if method == GradMethod::OneStep { 1.0 } else { 1e-7 };
        assert!(rel(&g.joint(), &exact) < tol, "{method:?}");
    }
}

#[test]
fn scalar_linear_case_has_closed_form() {
    // F = a (h + u) + c: h* = (a u + c) / (1 − a), dL/da = v (h* + u) / (1 − a).
    let (a, c, u0, v0) = (0.6, 0.2, 1.5, 2.0);
    let m = EqModule::scalar(ModuleKind::LinearContraction, a, c, 0.9).unwrap();
    let u = Vector::from(vec![u0]);
    let v = Vector::from(vec![v0]);
    let h = solve(&m, &u, &SolverSpec::picard(1e-15, 1000), None).unwrap().h_star;
    let hs = (a * u0 + c) / (1.0 - a);
    assert_relative_eq!(h[0], hs, max_relative = 1e-13);
    let g = ift_exact(&m, &h, &u, &v, &GradOracleSpec::ift()).unwrap();
    assert_relative_eq!(g.grad_theta[0], v0 * (hs + u0) / (1.0 - a), max_relative = 1e-9);
    assert_relative_eq!(g.grad_theta[1], v0 / (1.0 - a), max_relative = 1e-9);
    assert_relative_eq!(g.grad_u[0], v0 * a / (1.0 - a), max_relative = 1e-9);
}
