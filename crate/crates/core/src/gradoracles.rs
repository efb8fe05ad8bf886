//! Backward passes through a fixed point.
//!
//! Given the upstream gradient `v = ∂L/∂h` at the equilibrium, every oracle
//! returns `(∂L/∂θ, ∂L/∂u)` or an approximation of it:
//!
//! | method    | matrix replacing `∂h*/∂θ`                         | memory |
//! |-----------|---------------------------------------------------|--------|
//! | `IFTExact`| `J_θ (I − J_h)⁻¹`, via an iterative adjoint solve | O(1)   |
//! | `BPTT`    | reverse sweep over the stored forward trajectory  | O(T)   |
//! | `UPG`     | `λ Σ_t J_θ(h_t) Π_{s>t} (λ J_h(h_s) + (1−λ) I)`    | O(k)   |
//! | `NPG`     | `λ J_θ(h*) Σ_{t<k} Bᵗ`, `B = λ J_h + (1−λ) I`      | O(1)   |
//! | `OneStep` | `J_θ(h*)`                                          | O(1)   |
//!
//! Matrices are in the transposed Jacobian layout described in
//! [`crate::eqmodule`]; every product is evaluated as a chain of VJPs.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::densemath::Vector;
use crate::diagnostics::DiagnosticsRecord;
use crate::eqmodule::{EqModule, Linearization, ModuleError};
use crate::fpsolvers::{
    broyden_iterate, picard_iterate, relative_residual, FixedPointSolution, IterObserver, Silent, SolverError,
    SolverSpec,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum GradMethod {
    IFTExact,
    BPTT,
    UPG,
    NPG,
    OneStep,
}

impl GradMethod {
    pub fn name(self) -> &'static str {
        match self {
            GradMethod::IFTExact => "IFTExact",
            GradMethod::BPTT => "BPTT",
            GradMethod::UPG => "UPG",
            GradMethod::NPG => "NPG",
            GradMethod::OneStep => "OneStep",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "iftexact" | "ift" => Some(GradMethod::IFTExact),
            "bptt" => Some(GradMethod::BPTT),
            "upg" => Some(GradMethod::UPG),
            "npg" => Some(GradMethod::NPG),
            "onestep" | "one_step" | "one-step" => Some(GradMethod::OneStep),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AdjointSolver {
    PicardAdjoint,
    BroydenAdjoint,
}

impl AdjointSolver {
    pub fn name(self) -> &'static str {
        match self {
            AdjointSolver::PicardAdjoint => "PicardAdjoint",
            AdjointSolver::BroydenAdjoint => "BroydenAdjoint",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "picardadjoint" | "picard" => Some(AdjointSolver::PicardAdjoint),
            "broydenadjoint" | "broyden" => Some(AdjointSolver::BroydenAdjoint),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradOracleSpec {
    pub method: GradMethod,
    pub k: usize,
    pub lambda: f64,
    pub adjoint_solver: AdjointSolver,
    pub adjoint_tol: f64,
    pub adjoint_max_iters: usize,
    /// Damping of the Picard adjoint iteration.
    pub adjoint_damping: f64,
}

impl Default for GradOracleSpec {
    fn default() -> Self {
        GradOracleSpec {
            method: GradMethod::IFTExact,
            k: 1,
            lambda: 1.0,
            adjoint_solver: AdjointSolver::PicardAdjoint,
            adjoint_tol: 1e-10,
            adjoint_max_iters: 500,
            adjoint_damping: 1.0,
        }
    }
}

impl GradOracleSpec {
    pub fn ift() -> Self {
        Self::default()
    }

    /// IFT with a Broyden adjoint of `iters` iterations.
    pub fn ift_broyden(iters: usize) -> Self {
        GradOracleSpec {
            adjoint_solver: AdjointSolver::BroydenAdjoint,
            adjoint_max_iters: iters,
            ..Self::default()
        }
    }

    pub fn phantom(method: GradMethod, k: usize, lambda: f64) -> Self {
        GradOracleSpec {
            method,
            k,
            lambda,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), OracleError> {
        if self.k == 0 {
            return Err(OracleError::InvalidSpec("k must be >= 1".into()));
        }
        if !(self.lambda > 0.0 && self.lambda <= 1.0) {
            return Err(OracleError::InvalidSpec(format!(
                "lambda must lie in (0, 1], got {}",
                self.lambda
            )));
        }
        if !(self.adjoint_tol > 0.0) || self.adjoint_max_iters == 0 {
            return Err(OracleError::InvalidSpec("adjoint budget must be positive".into()));
        }
        if !(self.adjoint_damping > 0.0 && self.adjoint_damping <= 1.0) {
            return Err(OracleError::InvalidSpec(format!(
                "adjoint_damping must lie in (0, 1], got {}",
                self.adjoint_damping
            )));
        }
        Ok(())
    }

    pub fn label(&self) -> String {
        match self.method {
            GradMethod::UPG | GradMethod::NPG => {
                format!("{}(k={},lambda={})", self.method.name(), self.k, self.lambda)
            }
            GradMethod::IFTExact => format!("IFTExact({})", self.adjoint_solver.name()),
            m => m.name().to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomGradient {
    pub grad_theta: Vector,
    pub grad_u: Vector,
    pub method: GradOracleSpec,
    pub aux: Option<DiagnosticsRecord>,
}

impl PhantomGradient {
    /// `[∂L/∂θ; ∂L/∂u]`.
    pub fn joint(&self) -> Vector {
        self.grad_theta.concat(&self.grad_u)
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OracleError {
    #[error("adjoint solve diverged after {iterations} iterations")]
    AdjointDiverged {
        iterations: usize,
        partial: Vector,
        residual_trace: Vec<f64>,
    },
    #[error("{method} produced a non-finite value at step {step}")]
    Diverged { method: &'static str, step: usize },
    #[error("BPTT needs a stored forward trajectory")]
    MissingTrajectory,
    #[error("invalid oracle spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Module(#[from] ModuleError),
    #[error(transparent)]
    Solver(#[from] SolverError),
}

fn check_dims(m: &EqModule, h: &Vector, u: &Vector, v: &Vector) -> Result<(), OracleError> {
    for (what, got) in [("state h", h.len()), ("input u", u.len()), ("cotangent v", v.len())] {
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

/// Result of solving the adjoint system `g = v + (∂F/∂h) g`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdjointSolution {
    pub g_hat: Vector,
    pub iterations: usize,
    pub rel_residual: f64,
    pub converged: bool,
}

/// Solves `(I − J_h) ĝ = v` at a frozen linearization, from `ĝ = 0`.
pub fn adjoint_solve<O: IterObserver + ?Sized>(
    lin: &Linearization<'_>,
    v: &Vector,
    spec: &GradOracleSpec,
    observer: &mut O,
) -> Result<AdjointSolution, OracleError> {
    let map = |g: &Vector| -> Vector {
        let mut out = lin.vjp_h(g);
        out.iter_mut().zip(v.iter()).for_each(|(o, vi)| *o += vi);
        out
    };
    let g0 = Vector::zeros(v.len());
    let result = match spec.adjoint_solver {
        AdjointSolver::PicardAdjoint => picard_iterate(
            map,
            g0,
            &SolverSpec::damped(spec.adjoint_damping, spec.adjoint_tol, spec.adjoint_max_iters),
            observer,
        ),
        AdjointSolver::BroydenAdjoint => broyden_iterate(
            map,
            g0,
            &SolverSpec::broyden(spec.adjoint_tol, spec.adjoint_max_iters),
            observer,
        ),
    };
    match result {
        Ok(FixedPointSolution {
            h_star,
            rel_residual,
            iterations,
            converged,
            ..
        }) => Ok(AdjointSolution {
            g_hat: h_star,
            iterations,
            rel_residual,
            converged,
        }),
        Err(SolverError::Diverged {
            iteration,
            last_finite,
            residual_trace,
        }) => Err(OracleError::AdjointDiverged {
            iterations: iteration,
            partial: last_finite,
            residual_trace,
        }),
        Err(e) => Err(e.into()),
    }
}

/// Exact implicit gradient: `ĝ = (I − J_h)⁻¹ v` by the configured adjoint
/// solver, then `(J_θ ĝ, J_u ĝ)`. The forward residual at `h_star` and the
/// adjoint statistics are recorded in `aux`.
pub fn ift_exact(
    m: &EqModule,
    h_star: &Vector,
    u: &Vector,
    v: &Vector,
    spec: &GradOracleSpec,
) -> Result<PhantomGradient, OracleError> {
    spec.validate()?;
    check_dims(m, h_star, u, v)?;
    let lin = m.linearize_unchecked(h_star, u);
    let adj = adjoint_solve(&lin, v, spec, &mut Silent)?;
    let aux = DiagnosticsRecord {
        forward_residual: relative_residual(m, h_star, u).ok(),
        adjoint_iterations: Some(adj.iterations),
        adjoint_residual: Some(adj.rel_residual),
        ..Default::default()
    };
    Ok(PhantomGradient {
        grad_theta: lin.vjp_theta(&adj.g_hat),
        grad_u: lin.vjp_u(&adj.g_hat),
        method: GradOracleSpec {
            method: GradMethod::IFTExact,
            ..spec.clone()
        },
        aux: Some(aux),
    })
}

/// Reverse sweep `a ← v`, for `t = T−1 … 0`:
/// `grad += λ J(h_t) a`, `a ← λ J_h(h_t) a + (1 − λ) a`.
///
/// `states` are the inputs `h_0 … h_{T−1}` of the `T` unrolled steps.
/// The accumulators start from the first term rather than from zero so that
/// a single undamped step reproduces the one-step gradient bit for bit.
fn reverse_sweep(
    m: &EqModule,
    states: &[Vector],
    u: &Vector,
    v: &Vector,
    lambda: f64,
    method: &'static str,
) -> Result<(Vector, Vector, Vector), OracleError> {
    let mut a = v.clone();
    let mut grad_theta: Option<Vector> = None;
    let mut grad_u: Option<Vector> = None;
    let mut adjoint_sum = Vector::zeros(v.len());
    for (t, h) in states.iter().enumerate().rev() {
        let lin = m.linearize_unchecked(h, u);
        let gt = lin.vjp_theta(&a).scaled(lambda);
        let gu = lin.vjp_u(&a).scaled(lambda);
        adjoint_sum
            .iter_mut()
            .zip(a.iter())
            .for_each(|(s, ai)| *s += lambda * ai);
        match (&mut grad_theta, &mut grad_u) {
            (Some(acc_t), Some(acc_u)) => {
                acc_t.iter_mut().zip(gt.iter()).for_each(|(x, y)| *x += y);
                acc_u.iter_mut().zip(gu.iter()).for_each(|(x, y)| *x += y);
            }
            _ => {
                grad_theta = Some(gt);
                grad_u = Some(gu);
            }
        }
        if t > 0 {
            a = lin.damped_vjp_h(&a, lambda);
            if !a.is_finite() {
                return Err(OracleError::Diverged { method, step: t });
            }
        }
    }
    let d = v.len();
    let gt = grad_theta.unwrap_or_else(|| Vector::zeros(d * d + d));
    let gu = grad_u.unwrap_or_else(|| Vector::zeros(d));
    if !gt.is_finite() || !gu.is_finite() {
        return Err(OracleError::Diverged { method, step: 0 });
    }
    Ok((gt, gu, adjoint_sum))
}

/// Backpropagation through the stored forward trajectory (`T` steps with
/// forward damping `lambda_fwd`). Serves as the reference gradient when the
/// forward solve ran long enough.
pub fn bptt_exact(
    m: &EqModule,
    sol: &FixedPointSolution,
    u: &Vector,
    v: &Vector,
    lambda_fwd: f64,
) -> Result<PhantomGradient, OracleError> {
    let traj = sol.trajectory.as_ref().ok_or(OracleError::MissingTrajectory)?;
    check_dims(m, &sol.h_star, u, v)?;
    if !(lambda_fwd > 0.0 && lambda_fwd <= 1.0) {
        return Err(OracleError::InvalidSpec(format!(
            "forward damping must lie in (0, 1], got {lambda_fwd}"
        )));
    }
    let steps = &traj[..traj.len() - 1];
    let d = m.dim();
    let (grad_theta, grad_u) = if steps.is_empty() {
        (Vector::zeros(m.param_dim()), Vector::zeros(d))
    } else {
        let (gt, gu, _) = reverse_sweep(m, steps, u, v, lambda_fwd, "BPTT")?;
        (gt, gu)
    };
    Ok(PhantomGradient {
        grad_theta,
        grad_u,
        method: GradOracleSpec {
            method: GradMethod::BPTT,
            k: steps.len().max(1),
            lambda: lambda_fwd,
            ..GradOracleSpec::default()
        },
        aux: None,
    })
}

/// The `k + 1` states `h_0 = h*, …, h_k` of a damped unroll.
#[derive(Debug, Clone, PartialEq)]
pub struct Unroll {
    pub states: Vec<Vector>,
    pub lambda: f64,
}

impl Unroll {
    /// `h_k`, the value that flows to the loss.
    pub fn output(&self) -> &Vector {
        self.states.last().expect("unroll holds at least h_0")
    }

    pub fn steps(&self) -> usize {
        self.states.len() - 1
    }
}

/// Forward half of UPG: `h_{t+1} = (1 − λ) h_t + λ F(h_t)` from `h_0 = h_star`.
pub fn upg_unroll(m: &EqModule, h_star: &Vector, u: &Vector, k: usize, lambda: f64) -> Result<Unroll, OracleError> {
    GradOracleSpec::phantom(GradMethod::UPG, k, lambda).validate()?;
    check_dims(m, h_star, u, h_star)?;
    let mut states = Vec::with_capacity(k + 1);
    states.push(h_star.clone());
    for t in 0..k {
        let h = &states[t];
        let f = m.forward_unchecked(h, u);
        let next: Vector = if lambda == 1.0 {
            f
        } else {
            f.iter()
                .zip(h.iter())
                .map(|(fi, hi)| lambda * fi + (1.0 - lambda) * hi)
                .collect()
        };
        if !next.is_finite() {
            return Err(OracleError::Diverged {
                method: "UPG",
                step: t + 1,
            });
        }
        states.push(next);
    }
    Ok(Unroll { states, lambda })
}

/// Backward half of UPG. Also returns `λ Σ_t a_t`, the effective adjoint
/// vector, which matches `(I − J_h)⁻¹ v` as `k → ∞` at an exact fixed point.
pub fn upg_backward(
    m: &EqModule,
    unroll: &Unroll,
    u: &Vector,
    v: &Vector,
) -> Result<(PhantomGradient, Vector), OracleError> {
    check_dims(m, &unroll.states[0], u, v)?;
    let k = unroll.steps();
    let (grad_theta, grad_u, adjoint) = reverse_sweep(m, &unroll.states[..k], u, v, unroll.lambda, "UPG")?;
    Ok((
        PhantomGradient {
            grad_theta,
            grad_u,
            method: GradOracleSpec::phantom(GradMethod::UPG, k, unroll.lambda),
            aux: None,
        },
        adjoint,
    ))
}

/// Unrolling-based phantom gradient with `v` held fixed across the unroll.
pub fn upg(
    m: &EqModule,
    h_star: &Vector,
    u: &Vector,
    v: &Vector,
    k: usize,
    lambda: f64,
) -> Result<PhantomGradient, OracleError> {
    let unroll = upg_unroll(m, h_star, u, k, lambda)?;
    Ok(upg_backward(m, &unroll, u, v)?.0)
}

/// `ĝ ← v`, then `k − 1` times `ĝ ← v + B ĝ` with `B = λ J_h + (1 − λ) I`.
/// Returns the raw Neumann sum `Σ_{t<k} Bᵗ v`.
pub fn neumann_sum(lin: &Linearization<'_>, v: &Vector, k: usize, lambda: f64) -> Result<Vector, OracleError> {
    let mut g = v.clone();
    for step in 1..k {
        let mut next = lin.damped_vjp_h(&g, lambda);
        next.iter_mut().zip(v.iter()).for_each(|(n, vi)| *n += vi);
        if !next.is_finite() {
            return Err(OracleError::Diverged { method: "NPG", step });
        }
        g = next;
    }
    Ok(g)
}

/// Neumann-series phantom gradient, `λ J_θ(h*) Σ_{t<k} Bᵗ v`, in constant memory.
pub fn npg(
    m: &EqModule,
    h_star: &Vector,
    u: &Vector,
    v: &Vector,
    k: usize,
    lambda: f64,
) -> Result<PhantomGradient, OracleError> {
    let spec = GradOracleSpec::phantom(GradMethod::NPG, k, lambda);
    spec.validate()?;
    check_dims(m, h_star, u, v)?;
    let lin = m.linearize_unchecked(h_star, u);
    let g = neumann_sum(&lin, v, k, lambda)?.scaled(lambda);
    let grad_theta = lin.vjp_theta(&g);
    let grad_u = lin.vjp_u(&g);
    if !grad_theta.is_finite() || !grad_u.is_finite() {
        return Err(OracleError::Diverged { method: "NPG", step: k });
    }
    Ok(PhantomGradient {
        grad_theta,
        grad_u,
        method: spec,
        aux: None,
    })
}

/// `(J_θ v, J_u v)` at `h*`: the Jacobian inverse replaced by the identity.
pub fn one_step(m: &EqModule, h_star: &Vector, u: &Vector, v: &Vector) -> Result<PhantomGradient, OracleError> {
    check_dims(m, h_star, u, v)?;
    let lin = m.linearize_unchecked(h_star, u);
    Ok(PhantomGradient {
        grad_theta: lin.vjp_theta(v),
        grad_u: lin.vjp_u(v),
        method: GradOracleSpec::phantom(GradMethod::OneStep, 1, 1.0),
        aux: None,
    })
}

/// Dispatches on `spec.method`. `BPTT` needs `forward` to carry a trajectory
/// and uses `forward_damping` for the sweep.
pub fn compute(
    m: &EqModule,
    forward: &FixedPointSolution,
    u: &Vector,
    v: &Vector,
    spec: &GradOracleSpec,
    forward_damping: f64,
) -> Result<PhantomGradient, OracleError> {
    spec.validate()?;
    let h = &forward.h_star;
    match spec.method {
        GradMethod::IFTExact => ift_exact(m, h, u, v, spec),
        GradMethod::BPTT => bptt_exact(m, forward, u, v, forward_damping),
        GradMethod::UPG => upg(m, h, u, v, spec.k, spec.lambda),
        GradMethod::NPG => npg(m, h, u, v, spec.k, spec.lambda),
        GradMethod::OneStep => one_step(m, h, u, v),
    }
}
