//! Dense checks of the phantom-gradient theory on small instances.
//!
//! All matrices use the transposed Jacobian layout of [`crate::eqmodule`]:
//! `J_h` is `d × d`, `J_θ` is `(d² + d) × d`, and a backward matrix `A`
//! maps an upstream gradient `v` to `A v`, a parameter gradient.
//!
//! The ascent condition checked here is
//! `‖A (I − J_h) − J_θ‖₂ < σ_min²(J_θ) / σ_max(J_θ)`, which guarantees
//! `⟨A v, J_θ (I − J_h)⁻¹ v⟩ > 0` for every nonzero `v`.

use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::config::{fmt_f64, fmt_opt, rng_stream};
use crate::densemath::{
    cosine_similarity, dense_inverse, gemm, power_iteration_rho, svd_extremes, LinalgError, Mat, Vector,
};
use crate::eqmodule::{EqModule, Linearization, ModuleError};
use crate::gradoracles::{adjoint_solve, upg_unroll, GradOracleSpec, OracleError, PhantomGradient};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiagError {
    #[error("exact gradient is zero, cosine undefined")]
    ZeroExact,
    #[error("gradients have different lengths ({0} vs {1})")]
    Length(usize, usize),
    #[error(transparent)]
    Module(#[from] ModuleError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
}

/// One row of an iterative adjoint-solve trace.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub iteration: usize,
    /// `‖(I − J_h) ĝ − v‖₂`
    pub objective: f64,
    /// `‖ĝ − ĝ_exact‖₂ / ‖ĝ_exact‖₂`
    pub rel_error: f64,
    /// Cosine of `ĝ` against the exact adjoint; 0 when either is zero.
    pub cosine: f64,
    pub l1_norm: f64,
}

/// Bag of diagnostics; each check fills the fields it computes.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DiagnosticsRecord {
    pub cosine_vs_exact: Option<f64>,
    /// `‖phantom − exact‖₂`
    pub eps_error: Option<f64>,
    /// `‖A(I − J_h) − J_θ‖₂` for the Neumann matrix.
    pub lhs_ascent: Option<f64>,
    /// Same left-hand side with the unrolled matrix.
    pub lhs_ascent_upg: Option<f64>,
    /// Frobenius counterpart of `lhs_ascent`.
    pub lhs_ascent_fro: Option<f64>,
    /// `σ_min²(J_θ) / σ_max(J_θ)`
    pub rhs_ascent: Option<f64>,
    /// `‖D(I − J_h) − I‖₂` with `D = λ Σ Bᵗ`.
    pub reduced_lhs: Option<f64>,
    /// `1 / κ²(J_θ)`
    pub reduced_rhs: Option<f64>,
    /// `⟨A v, J_θ (I − J_h)⁻¹ v⟩`
    pub inner_product: Option<f64>,
    /// Set when `σ_min(J_θ)` vanished and the right-hand side was forced to 0.
    pub rhs_degenerate: bool,
    pub rho_f: Option<f64>,
    pub rho_f_lambda: Option<f64>,
    pub l1_exact: Option<f64>,
    pub l1_phantom: Option<f64>,
    pub forward_residual: Option<f64>,
    pub adjoint_iterations: Option<usize>,
    pub adjoint_residual: Option<f64>,
    pub solver_trace: Option<Vec<TraceRow>>,
}

impl DiagnosticsRecord {
    pub const CSV_HEADER: [&'static str; 17] = [
        "cosine_vs_exact",
        "eps_error",
        "lhs_ascent",
        "lhs_ascent_upg",
        "lhs_ascent_fro",
        "rhs_ascent",
        "reduced_lhs",
        "reduced_rhs",
        "inner_product",
        "rhs_degenerate",
        "rho_f",
        "rho_f_lambda",
        "l1_exact",
        "l1_phantom",
        "forward_residual",
        "adjoint_iterations",
        "adjoint_residual",
    ];

    /// Cells in [`Self::CSV_HEADER`] order; missing values are empty.
    pub fn csv_row(&self) -> Vec<String> {
        vec![
            fmt_opt(self.cosine_vs_exact),
            fmt_opt(self.eps_error),
            fmt_opt(self.lhs_ascent),
            fmt_opt(self.lhs_ascent_upg),
            fmt_opt(self.lhs_ascent_fro),
            fmt_opt(self.rhs_ascent),
            fmt_opt(self.reduced_lhs),
            fmt_opt(self.reduced_rhs),
            fmt_opt(self.inner_product),
            self.rhs_degenerate.to_string(),
            fmt_opt(self.rho_f),
            fmt_opt(self.rho_f_lambda),
            fmt_opt(self.l1_exact),
            fmt_opt(self.l1_phantom),
            fmt_opt(self.forward_residual),
            self.adjoint_iterations.map(|n| n.to_string()).unwrap_or_default(),
            fmt_opt(self.adjoint_residual),
        ]
    }

    /// True when the ascent condition holds strictly.
    pub fn ascent_guaranteed(&self) -> bool {
        matches!((self.lhs_ascent, self.rhs_ascent), (Some(l), Some(r)) if l < r)
    }
}

/// `Σ_{t<k} Bᵗ` with `B = λ J_h + (1 − λ) I`.
pub fn neumann_partial_sum(jh: &Mat, k: usize, lambda: f64) -> Result<Mat, LinalgError> {
    let n = jh.rows();
    let b = jh.scaled(lambda).add(&Mat::identity(n).scaled(1.0 - lambda))?;
    let mut sum = Mat::identity(n);
    let mut pow = Mat::identity(n);
    for _ in 1..k {
        pow = gemm(&pow, &b)?;
        sum = sum.add(&pow)?;
    }
    Ok(sum)
}

/// Neumann backward matrix `λ J_θ Σ_{t<k} Bᵗ`.
pub fn npg_matrix(jh: &Mat, jt: &Mat, k: usize, lambda: f64) -> Result<Mat, LinalgError> {
    Ok(gemm(jt, &neumann_partial_sum(jh, k, lambda)?)?.scaled(lambda))
}

/// Unrolled backward matrix `λ Σ_t J_θ(h_t) B(h_{t+1}) ⋯ B(h_{k−1})` over the
/// damped unroll started at `h_star`.
pub fn upg_matrix(m: &EqModule, h_star: &Vector, u: &Vector, k: usize, lambda: f64) -> Result<Mat, DiagError> {
    let d = m.dim();
    if d > crate::eqmodule::MAX_DENSE_DIM {
        return Err(ModuleError::TooLarge {
            d,
            limit: crate::eqmodule::MAX_DENSE_DIM,
        }
        .into());
    }
    let unroll = upg_unroll(m, h_star, u, k, lambda)?;
    let mut tail = Mat::identity(d);
    let mut a = Mat::zeros(m.param_dim(), d);
    for h in unroll.states[..k].iter().rev() {
        let (jh, jt) = m.linearize_unchecked(h, u).dense();
        a = a.add(&gemm(&jt, &tail)?.scaled(lambda))?;
        let b = jh.scaled(lambda).add(&Mat::identity(d).scaled(1.0 - lambda))?;
        tail = gemm(&b, &tail)?;
    }
    Ok(a)
}

/// `J_θ (I − J_h)⁻¹`.
pub fn exact_matrix(jh: &Mat, jt: &Mat) -> Result<Mat, LinalgError> {
    let n = jh.rows();
    gemm(jt, &dense_inverse(&Mat::identity(n).sub(jh)?)?)
}

/// `(‖A(I − J_h) − J_θ‖₂, ‖·‖_F)`.
pub fn descent_lhs(a: &Mat, jh: &Mat, jt: &Mat) -> Result<(f64, f64), LinalgError> {
    let n = jh.rows();
    let e = gemm(a, &Mat::identity(n).sub(jh)?)?.sub(jt)?;
    Ok((svd_extremes(&e)?.sigma_max, e.frobenius_norm()))
}

/// `(σ_min² / σ_max, 1 / κ², degenerate)` for `J_θ`.
pub fn descent_rhs(jt: &Mat) -> Result<(f64, f64, bool), LinalgError> {
    let s = svd_extremes(jt)?;
    if s.sigma_min < 1e-300 || s.sigma_max == 0.0 {
        Ok((0.0, 0.0, true))
    } else {
        Ok((
            s.sigma_min * s.sigma_min / s.sigma_max,
            1.0 / (s.kappa * s.kappa),
            false,
        ))
    }
}

pub fn standard_normal_vector(d: usize, seed: u64, label: &str) -> Vector {
    let mut rng = rng_stream(seed, label);
    (0..d).map(|_| StandardNormal.sample(&mut rng)).collect()
}

/// `⟨A v, E v⟩` for `n` standard-normal draws of `v`.
pub fn sampled_inner_products(a: &Mat, exact: &Mat, n: usize, seed: u64) -> Result<Vec<f64>, LinalgError> {
    (0..n)
        .map(|i| {
            let v = standard_normal_vector(a.cols(), seed, &format!("inner-product/{i}"));
            a.matvec(&v)?.dot(&exact.matvec(&v)?)
        })
        .collect()
}

/// Ascent-condition check for the Neumann matrix at `(h_star, u)`, with the
/// unrolled matrix, the Frobenius value and the reduced condition alongside.
/// The inner product uses one standard-normal `v` drawn from `seed`.
pub fn descent_condition_check(
    m: &EqModule,
    h_star: &Vector,
    u: &Vector,
    k: usize,
    lambda: f64,
    seed: u64,
) -> Result<DiagnosticsRecord, DiagError> {
    GradOracleSpec::phantom(crate::gradoracles::GradMethod::NPG, k, lambda).validate()?;
    let (jh, jt) = m.materialize_jacobians(h_star, u)?;
    let n = m.dim();
    let d_mat = neumann_partial_sum(&jh, k, lambda)?.scaled(lambda);
    let a = gemm(&jt, &d_mat)?;
    let a_upg = upg_matrix(m, h_star, u, k, lambda)?;
    let exact = exact_matrix(&jh, &jt)?;
    let (lhs, lhs_fro) = descent_lhs(&a, &jh, &jt)?;
    let (lhs_upg, _) = descent_lhs(&a_upg, &jh, &jt)?;
    let (rhs, reduced_rhs, degenerate) = descent_rhs(&jt)?;
    let reduced = gemm(&d_mat, &Mat::identity(n).sub(&jh)?)?.sub(&Mat::identity(n))?;
    let inner = sampled_inner_products(&a, &exact, 1, seed)?[0];
    Ok(DiagnosticsRecord {
        lhs_ascent: Some(lhs),
        lhs_ascent_upg: Some(lhs_upg),
        lhs_ascent_fro: Some(lhs_fro),
        rhs_ascent: Some(rhs),
        reduced_lhs: Some(svd_extremes(&reduced)?.sigma_max),
        reduced_rhs: Some(reduced_rhs),
        inner_product: Some(inner),
        rhs_degenerate: degenerate,
        ..Default::default()
    })
}

/// `‖λ Σ_{t<k} Bᵗ − (I − J_h)⁻¹‖₂`.
pub fn neumann_truncation_error(
    m: &EqModule,
    h_star: &Vector,
    u: &Vector,
    k: usize,
    lambda: f64,
) -> Result<f64, DiagError> {
    GradOracleSpec::phantom(crate::gradoracles::GradMethod::NPG, k, lambda).validate()?;
    let (jh, _) = m.materialize_jacobians(h_star, u)?;
    let n = m.dim();
    let approx = neumann_partial_sum(&jh, k, lambda)?.scaled(lambda);
    let inv = dense_inverse(&Mat::identity(n).sub(&jh)?)?;
    Ok(svd_extremes(&approx.sub(&inv)?)?.sigma_max)
}

/// Power-iteration estimates of `ρ(J_h)` and `ρ(λ J_h + (1 − λ) I)`.
pub fn spectral_radius_report(
    m: &EqModule,
    h_star: &Vector,
    u: &Vector,
    lambda: f64,
    seed: u64,
) -> Result<(f64, f64), DiagError> {
    let (jh, _) = m.materialize_jacobians(h_star, u)?;
    let rho_f = power_iteration_rho(&jh, 2000, 1e-12, seed)?.estimate;
    if lambda == 1.0 {
        return Ok((rho_f, rho_f));
    }
    let b = jh.scaled(lambda).add(&Mat::identity(m.dim()).scaled(1.0 - lambda))?;
    let rho_b = power_iteration_rho(&b, 2000, 1e-12, seed)?.estimate;
    Ok((rho_f, rho_b))
}

/// Cosine, error norm and L1 norms of `candidate` against `exact`, over the
/// concatenated `[∂L/∂θ; ∂L/∂u]`.
pub fn compare_gradients(exact: &PhantomGradient, candidate: &PhantomGradient) -> Result<DiagnosticsRecord, DiagError> {
    let e = exact.joint();
    let c = candidate.joint();
    if e.len() != c.len() {
        return Err(DiagError::Length(e.len(), c.len()));
    }
    if e.norm2() == 0.0 {
        return Err(DiagError::ZeroExact);
    }
    let cosine = if c.norm2() == 0.0 {
        0.0
    } else {
        cosine_similarity(&c, &e)?
    };
    Ok(DiagnosticsRecord {
        cosine_vs_exact: Some(cosine),
        eps_error: Some(c.sub(&e)?.norm2()),
        l1_exact: Some(e.norm1()),
        l1_phantom: Some(c.norm1()),
        ..Default::default()
    })
}

/// Cosine that reads as 0 when either side is zero or non-finite.
pub(crate) fn soft_cosine(a: &Vector, b: &Vector) -> f64 {
    if !a.is_finite() || !b.is_finite() || a.norm2() == 0.0 || b.norm2() == 0.0 {
        return 0.0;
    }
    cosine_similarity(a, b).unwrap_or(0.0)
}

/// Trace row for an adjoint iterate `g` against the exact adjoint.
pub fn adjoint_trace_row(
    lin: &Linearization<'_>,
    iteration: usize,
    g: &Vector,
    v: &Vector,
    exact: &Vector,
) -> TraceRow {
    let jg = lin.vjp_h(g);
    let objective = g
        .iter()
        .zip(jg.iter())
        .zip(v.iter())
        .map(|((gi, ji), vi)| (gi - ji - vi).powi(2))
        .sum::<f64>()
        .sqrt();
    let en = exact.norm2();
    let diff = g
        .iter()
        .zip(exact.iter())
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        .sqrt();
    TraceRow {
        iteration,
        objective,
        rel_error: if en == 0.0 { diff } else { diff / en },
        cosine: soft_cosine(g, exact),
        l1_norm: g.norm1(),
    }
}

/// Per-iteration trace of the adjoint solve configured in `spec`, measured
/// against the dense adjoint `(I − J_h)⁻¹ v`. On divergence the trace holds
/// every finite iterate and the flag is set.
pub fn adjoint_solver_trace(
    m: &EqModule,
    h_star: &Vector,
    u: &Vector,
    v: &Vector,
    spec: &GradOracleSpec,
) -> Result<(Vec<TraceRow>, bool), DiagError> {
    let lin = m.linearize(h_star, u)?;
    let (jh, _) = lin.dense();
    let exact = crate::densemath::dense_solve(&Mat::identity(m.dim()).sub(&jh)?, v)?;
    let mut rows = Vec::new();
    let mut observer = |t: usize, g: &Vector, _: f64| {
        rows.push(adjoint_trace_row(&lin, t, g, v, &exact));
    };
    let diverged = match adjoint_solve(&lin, v, spec, &mut observer) {
        Ok(_) => false,
        Err(OracleError::AdjointDiverged { .. }) => true,
        Err(e) => return Err(e.into()),
    };
    Ok((rows, diverged))
}

/// Formats a trace row with norms capped at `cap` so CSV readers never see
/// overflowing values.
pub fn capped(x: f64, cap: f64) -> String {
    if x.is_nan() {
        fmt_f64(cap)
    } else {
        fmt_f64(x.clamp(-cap, cap))
    }
}
