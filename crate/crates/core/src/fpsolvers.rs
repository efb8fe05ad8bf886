//! Equilibrium solvers for `h = F(h, z)`.
//!
//! Both solvers are generic over the fixed-point map so the same code serves
//! the forward pass (`h ↦ F(h, u)`) and the linear adjoint system
//! (`g ↦ v + (∂F/∂h) g`) of the backward pass.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::densemath::Vector;
use crate::eqmodule::{EqModule, ModuleError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SolverMethod {
    Picard,
    DampedPicard,
    Broyden,
}

impl SolverMethod {
    pub fn name(self) -> &'static str {
        match self {
            SolverMethod::Picard => "Picard",
            SolverMethod::DampedPicard => "DampedPicard",
            SolverMethod::Broyden => "Broyden",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "picard" => Some(SolverMethod::Picard),
            "dampedpicard" => Some(SolverMethod::DampedPicard),
            "broyden" => Some(SolverMethod::Broyden),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverSpec {
    pub method: SolverMethod,
    pub tol: f64,
    pub max_iters: usize,
    /// Forward damping `λ_fwd ∈ (0, 1]`; only read by `DampedPicard`.
    pub damping: f64,
    pub broyden_memory: usize,
    pub store_trajectory: bool,
}

impl Default for SolverSpec {
    fn default() -> Self {
        SolverSpec {
            method: SolverMethod::Picard,
            tol: 1e-5,
            max_iters: 100,
            damping: 1.0,
            broyden_memory: 30,
            store_trajectory: false,
        }
    }
}

impl SolverSpec {
    pub fn picard(tol: f64, max_iters: usize) -> Self {
        SolverSpec {
            tol,
            max_iters,
            ..Default::default()
        }
    }

    pub fn damped(damping: f64, tol: f64, max_iters: usize) -> Self {
        SolverSpec {
            method: SolverMethod::DampedPicard,
            damping,
            ..Self::picard(tol, max_iters)
        }
    }

    pub fn broyden(tol: f64, max_iters: usize) -> Self {
        SolverSpec {
            method: SolverMethod::Broyden,
            ..Self::picard(tol, max_iters)
        }
    }

    pub fn with_trajectory(mut self) -> Self {
        self.store_trajectory = true;
        self
    }

    /// Damping actually applied by the Picard loop.
    pub fn effective_damping(&self) -> f64 {
        match self.method {
            SolverMethod::DampedPicard => self.damping,
            _ => 1.0,
        }
    }

    pub fn validate(&self) -> Result<(), SolverError> {
        let bad = |reason: String| Err(SolverError::InvalidSpec(reason));
        if !(self.tol > 0.0) {
            return bad(format!("tol must be > 0, got {}", self.tol));
        }
        if self.max_iters == 0 {
            return bad("max_iters must be >= 1".into());
        }
        if !(self.damping > 0.0 && self.damping <= 1.0) {
            return bad(format!("damping must lie in (0, 1], got {}", self.damping));
        }
        if self.method == SolverMethod::Broyden && self.broyden_memory == 0 {
            return bad("broyden_memory must be >= 1".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FixedPointSolution {
    pub h_star: Vector,
    /// `‖h − F(h)‖ / ‖h‖` at `h_star`.
    pub rel_residual: f64,
    pub iterations: usize,
    pub converged: bool,
    /// `h_0 … h_T`, present when requested.
    pub trajectory: Option<Vec<Vector>>,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolverError {
    #[error("solver diverged at iteration {iteration} (non-finite iterate)")]
    Diverged {
        iteration: usize,
        last_finite: Vector,
        residual_trace: Vec<f64>,
    },
    #[error("invalid solver spec: {0}")]
    InvalidSpec(String),
    #[error("method {0:?} is not handled by this solver")]
    WrongMethod(SolverMethod),
    #[error("relative residual undefined at h = 0")]
    ZeroState,
    #[error(transparent)]
    Module(#[from] ModuleError),
}

/// `‖r‖ / ‖h‖`, with `0/0 = 0` and `x/0 = ∞` so that a zero start never
/// looks converged unless the map fixes it.
fn rel_ratio(r: f64, h: f64) -> f64 {
    if h == 0.0 {
        if r == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        r / h
    }
}

fn diff_norm(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Per-iteration observer: `(iteration, iterate, relative residual)`.
pub trait IterObserver {
    fn observe(&mut self, iteration: usize, iterate: &Vector, rel_residual: f64);
}

impl<F: FnMut(usize, &Vector, f64)> IterObserver for F {
    fn observe(&mut self, iteration: usize, iterate: &Vector, rel_residual: f64) {
        self(iteration, iterate, rel_residual)
    }
}

/// No-op observer.
pub struct Silent;

impl IterObserver for Silent {
    fn observe(&mut self, _: usize, _: &Vector, _: f64) {}
}

/// Damped fixed-point iteration `h ← λ f(h) + (1 − λ) h` on an arbitrary map.
pub fn picard_iterate<M, O>(
    mut map: M,
    h0: Vector,
    spec: &SolverSpec,
    observer: &mut O,
) -> Result<FixedPointSolution, SolverError>
where
    M: FnMut(&Vector) -> Vector,
    O: IterObserver + ?Sized,
{
    spec.validate()?;
    let lambda = spec.effective_damping();
    let mut trajectory = spec.store_trajectory.then(|| vec![h0.clone()]);
    let mut trace = Vec::new();
    let mut h = h0;
    let mut iterations = 0;
    loop {
        let f = map(&h);
        if !f.is_finite() {
            return Err(SolverError::Diverged {
                iteration: iterations + 1,
                last_finite: h,
                residual_trace: trace,
            });
        }
        let rel = rel_ratio(diff_norm(&h, &f), h.norm2());
        trace.push(rel);
        observer.observe(iterations, &h, rel);
        if rel <= spec.tol || iterations == spec.max_iters {
            return Ok(FixedPointSolution {
                h_star: h,
                rel_residual: rel,
                iterations,
                converged: rel <= spec.tol,
                trajectory,
            });
        }
        let next: Vector = if lambda == 1.0 {
            f
        } else {
            f.iter()
                .zip(h.iter())
                .map(|(fi, hi)| lambda * fi + (1.0 - lambda) * hi)
                .collect()
        };
        iterations += 1;
        if let Some(t) = trajectory.as_mut() {
            t.push(next.clone());
        }
        h = next;
    }
}

/// Limited-memory inverse-Jacobian estimate `H = −I + Σ a_i b_iᵀ`.
struct InverseJacobian {
    factors: std::collections::VecDeque<(Vector, Vector)>,
    memory: usize,
}

impl InverseJacobian {
    fn new(memory: usize) -> Self {
        InverseJacobian {
            factors: Default::default(),
            memory,
        }
    }

    fn apply(&self, x: &[f64]) -> Vector {
        let mut out: Vector = x.iter().map(|v| -v).collect();
        for (a, b) in &self.factors {
            let c = crate::densemath::dot_unchecked(b, x);
            out.iter_mut().zip(a.iter()).for_each(|(o, ai)| *o += c * ai);
        }
        out
    }

    fn apply_transpose(&self, x: &[f64]) -> Vector {
        let mut out: Vector = x.iter().map(|v| -v).collect();
        for (a, b) in &self.factors {
            let c = crate::densemath::dot_unchecked(a, x);
            out.iter_mut().zip(b.iter()).for_each(|(o, bi)| *o += c * bi);
        }
        out
    }

    /// "Good" Broyden rank-one update from step `s` and residual change `y`.
    fn update(&mut self, s: &[f64], y: &[f64]) {
        let hy = self.apply(y);
        let denom = crate::densemath::dot_unchecked(s, &hy);
        if denom.abs() < 1e-14 || !denom.is_finite() {
            self.factors.clear();
            return;
        }
        let a: Vector = s.iter().zip(hy.iter()).map(|(si, hi)| (si - hi) / denom).collect();
        let b = self.apply_transpose(s);
        self.factors.push_back((a, b));
        if self.factors.len() > self.memory {
            self.factors.pop_front();
        }
    }
}

/// Broyden's method on `g(h) = f(h) − h`, starting from `H = −I` (so the first
/// step is a plain fixed-point step), no line search, steps clipped to
/// `‖Δh‖ ≤ 10 ‖g‖`.
pub fn broyden_iterate<M, O>(
    mut map: M,
    h0: Vector,
    spec: &SolverSpec,
    observer: &mut O,
) -> Result<FixedPointSolution, SolverError>
where
    M: FnMut(&Vector) -> Vector,
    O: IterObserver + ?Sized,
{
    spec.validate()?;
    let residual = |h: &Vector, f: &Vector| -> Vector { f.iter().zip(h.iter()).map(|(a, b)| a - b).collect() };
    let mut trajectory = spec.store_trajectory.then(|| vec![h0.clone()]);
    let mut trace = Vec::new();
    let mut inv = InverseJacobian::new(spec.broyden_memory);

    let mut h = h0;
    let f = map(&h);
    if !f.is_finite() {
        return Err(SolverError::Diverged {
            iteration: 1,
            last_finite: h,
            residual_trace: trace,
        });
    }
    let mut g = residual(&h, &f);
    let mut iterations = 0;
    loop {
        let gnorm = g.norm2();
        let rel = rel_ratio(gnorm, h.norm2());
        trace.push(rel);
        observer.observe(iterations, &h, rel);
        if rel <= spec.tol || iterations == spec.max_iters {
            return Ok(FixedPointSolution {
                h_star: h,
                rel_residual: rel,
                iterations,
                converged: rel <= spec.tol,
                trajectory,
            });
        }
        let mut step = inv.apply(&g);
        step.iter_mut().for_each(|x| *x = -*x);
        let snorm = step.norm2();
        if snorm > 10.0 * gnorm && snorm > 0.0 {
            let c = 10.0 * gnorm / snorm;
            step.iter_mut().for_each(|x| *x *= c);
        }
        let next: Vector = h.iter().zip(step.iter()).map(|(a, b)| a + b).collect();
        let f_next = map(&next);
        iterations += 1;
        if !next.is_finite() || !f_next.is_finite() {
            return Err(SolverError::Diverged {
                iteration: iterations,
                last_finite: h,
                residual_trace: trace,
            });
        }
        let g_next = residual(&next, &f_next);
        let dg: Vector = g_next.iter().zip(g.iter()).map(|(a, b)| a - b).collect();
        inv.update(&step, &dg);
        if let Some(t) = trajectory.as_mut() {
            t.push(next.clone());
        }
        h = next;
        g = g_next;
    }
}

fn check_input(m: &EqModule, u: &Vector, h0: &Vector) -> Result<(), SolverError> {
    for (what, got) in [("input u", u.len()), ("initial state h0", h0.len())] {
        if got != m.dim() {
            return Err(ModuleError::Dimension {
                what,
                expected: m.dim(),
                got,
            }
            .into());
        }
    }
    Ok(())
}

/// Plain or damped fixed-point iteration on `F(·, u)`.
pub fn picard_solve(
    m: &EqModule,
    u: &Vector,
    spec: &SolverSpec,
    h0: Vector,
) -> Result<FixedPointSolution, SolverError> {
    if spec.method == SolverMethod::Broyden {
        return Err(SolverError::WrongMethod(spec.method));
    }
    check_input(m, u, &h0)?;
    picard_iterate(|h| m.forward_unchecked(h, u), h0, spec, &mut Silent)
}

pub fn broyden_solve(
    m: &EqModule,
    u: &Vector,
    spec: &SolverSpec,
    h0: Vector,
) -> Result<FixedPointSolution, SolverError> {
    if spec.method != SolverMethod::Broyden {
        return Err(SolverError::WrongMethod(spec.method));
    }
    check_input(m, u, &h0)?;
    broyden_iterate(|h| m.forward_unchecked(h, u), h0, spec, &mut Silent)
}

/// Dispatches on `spec.method`; `h0 = None` starts from zero.
pub fn solve(
    m: &EqModule,
    u: &Vector,
    spec: &SolverSpec,
    h0: Option<Vector>,
) -> Result<FixedPointSolution, SolverError> {
    let h0 = h0.unwrap_or_else(|| Vector::zeros(m.dim()));
    match spec.method {
        SolverMethod::Broyden => broyden_solve(m, u, spec, h0),
        _ => picard_solve(m, u, spec, h0),
    }
}

/// `‖h − F(h, u)‖₂ / ‖h‖₂`.
pub fn relative_residual(m: &EqModule, h: &Vector, u: &Vector) -> Result<f64, SolverError> {
    let f = m.forward(h, u)?;
    let hn = h.norm2();
    if hn == 0.0 {
        return Err(SolverError::ZeroState);
    }
    Ok(diff_norm(h, &f) / hn)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::densemath::{dense_solve, Mat};
    use crate::eqmodule::ModuleKind;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn scalar_module() -> EqModule {
        EqModule::scalar(ModuleKind::LinearContraction, 0.5, 1.0, 0.5).unwrap()
    }

    fn data(d: usize, seed: u64) -> Vector {
        use rand::Rng;
        let mut rng = crate::config::rng_stream(seed, "solver-test-u");
        (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn picard_scalar_root() {
        let m = scalar_module();
        let sol = solve(&m, &Vector::zeros(1), &SolverSpec::picard(1e-10, 200), None).unwrap();
        assert!(sol.converged);
        assert!((sol.h_star[0] - 2.0).abs() <= 1e-9);
    }

    #[test]
    fn damping_keeps_root_but_costs_iterations() {
        let m = scalar_module();
        let u = Vector::zeros(1);
        let plain = solve(&m, &u, &SolverSpec::picard(1e-10, 500), None).unwrap();
        let damped = solve(&m, &u, &SolverSpec::damped(0.5, 1e-10, 500), None).unwrap();
        assert!(damped.converged);
        assert!((damped.h_star[0] - 2.0).abs() <= 1e-9);
        assert!(damped.iterations > plain.iterations);
    }

    #[test]
    fn picard_full_scale_residual() {
        let m = EqModule::synthetic(ModuleKind::AffineTanh, 128, 0.9, 1).unwrap();
        let u = data(128, 1);
        let sol = solve(&m, &u, &SolverSpec::picard(1e-5, 100), None).unwrap();
        assert!(sol.rel_residual < 1e-5, "{}", sol.rel_residual);
        assert!(sol.converged);
    }

    #[test]
    fn broyden_scalar_root() {
        let m = scalar_module();
        let sol = solve(&m, &Vector::zeros(1), &SolverSpec::broyden(1e-10, 50), None).unwrap();
        assert!(sol.converged);
        assert!(sol.iterations <= 3, "{}", sol.iterations);
        assert_abs_diff_eq!(sol.h_star[0], 2.0, epsilon = 1e-9);
    }

    #[test]
    fn broyden_beats_picard_on_synthetic() {
        let m = EqModule::synthetic(ModuleKind::AffineTanh, 128, 0.9, 2).unwrap();
        let u = data(128, 2);
        let b = solve(&m, &u, &SolverSpec::broyden(1e-5, 100), None).unwrap();
        let p = solve(&m, &u, &SolverSpec::picard(1e-5, 200), None).unwrap();
        assert!(b.converged && p.converged);
        assert!(b.rel_residual < 1e-5);
        assert!(b.iterations < p.iterations, "{} vs {}", b.iterations, p.iterations);
    }

    #[test]
    fn broyden_from_exact_root_takes_no_steps() {
        let m = scalar_module();
        let sol = solve(
            &m,
            &Vector::zeros(1),
            &SolverSpec::broyden(1e-10, 50),
            Some(Vector::from(vec![2.0])),
        )
        .unwrap();
        assert!(sol.converged);
        assert_eq!(sol.iterations, 0);
    }

    #[test]
    fn relative_residual_cases() {
        let m = scalar_module();
        let u = Vector::zeros(1);
        assert_eq!(relative_residual(&m, &Vector::from(vec![2.0]), &u).unwrap(), 0.0);
        assert_eq!(
            relative_residual(&m, &Vector::zeros(1), &u),
            Err(SolverError::ZeroState)
        );
        // 3 vs F(3) = 2.5
        assert_abs_diff_eq!(
            relative_residual(&m, &Vector::from(vec![3.0]), &u).unwrap(),
            0.5 / 3.0,
            epsilon = 1e-16
        );

        let lin = EqModule::synthetic(ModuleKind::LinearContraction, 8, 0.9, 3).unwrap();
        let u = data(8, 3);
        // h* = (I − W)⁻¹ (W u + b)
        let a = Mat::identity(8).sub(lin.weight()).unwrap();
        let rhs = lin.weight().matvec(&u).unwrap().add(lin.bias()).unwrap();
        let h = dense_solve(&a, &rhs).unwrap();
        assert!(relative_residual(&lin, &h, &u).unwrap() <= 1e-10);
    }

    #[test]
    fn trajectory_ends_at_solution() {
        let m = EqModule::synthetic(ModuleKind::AffineTanh, 16, 0.8, 4).unwrap();
        let u = data(16, 4);
        for spec in [
            SolverSpec::picard(1e-8, 300).with_trajectory(),
            SolverSpec::damped(0.6, 1e-8, 300).with_trajectory(),
            SolverSpec::broyden(1e-8, 300).with_trajectory(),
        ] {
            let sol = solve(&m, &u, &spec, None).unwrap();
            let t = sol.trajectory.as_ref().unwrap();
            assert_eq!(t.len(), sol.iterations + 1);
            assert_eq!(t.last().unwrap(), &sol.h_star);
            let recomputed = relative_residual(&m, &sol.h_star, &u).unwrap();
            assert!((recomputed - sol.rel_residual).abs() <= 1e-12);
        }
    }

    #[test]
    fn divergence_is_reported() {
        // Expansive linear map, as if the contraction guard were bypassed.
        let map = |h: &Vector| h.scaled(1e200).add(&Vector::from(vec![1.0])).unwrap();
        let err = picard_iterate(map, Vector::zeros(1), &SolverSpec::picard(1e-10, 50), &mut Silent).unwrap_err();
        match err {
            SolverError::Diverged { last_finite, .. } => assert!(last_finite.is_finite()),
            e => panic!("unexpected {e:?}"),
        }
    }

    #[test]
    fn invalid_specs() {
        let m = scalar_module();
        let u = Vector::zeros(1);
        assert!(solve(&m, &u, &SolverSpec::picard(0.0, 10), None).is_err());
        assert!(solve(&m, &u, &SolverSpec::picard(1e-8, 0), None).is_err());
        assert!(solve(&m, &u, &SolverSpec::damped(1.5, 1e-8, 10), None).is_err());
        assert!(matches!(
            picard_solve(&m, &u, &SolverSpec::broyden(1e-8, 10), Vector::zeros(1)),
            Err(SolverError::WrongMethod(_))
        ));
    }

    proptest! {
        #[test]
        fn damped_and_plain_agree(seed in 0u64..1000, lambda in 0.2f64..=1.0) {
            let m = EqModule::synthetic(ModuleKind::AffineTanh, 6, 0.7, seed).unwrap();
            let u = data(6, seed);
            let tol = 1e-10;
            let a = solve(&m, &u, &SolverSpec::picard(tol, 5000), None).unwrap();
            let b = solve(&m, &u, &SolverSpec::damped(lambda, tol, 5000), None).unwrap();
            prop_assert!(a.converged && b.converged);
            let diff = a.h_star.sub(&b.h_star).unwrap().norm2() / a.h_star.norm2();
            prop_assert!(diff <= 10.0 * tol);
        }

        #[test]
        fn picard_residual_contracts(seed in 0u64..1000) {
            let m = EqModule::synthetic(ModuleKind::LinearContraction, 6, 0.9, seed).unwrap();
            let u = data(6, seed);
            let mut abs = Vec::new();
            let mut obs = |_: usize, h: &Vector, _: f64| {
                let f = m.forward(h, &u).unwrap();
                abs.push(diff_norm(h, &f));
            };
            picard_iterate(|h| m.forward_unchecked(h, &u), Vector::zeros(6),
                &SolverSpec::picard(1e-300, 40), &mut obs).unwrap();
            for w in abs.windows(2) {
                if w[0] > 1e-13 {
                    prop_assert!(w[1] <= (0.9 + 1e-9) * w[0]);
                }
            }
        }
    }
}
