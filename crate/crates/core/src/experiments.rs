//! Experiment runners behind the CLI.
//!
//! Every runner returns a [`Table`] whose rows are keyed by
//! `(seed, instance, config_hash)` plus the grid coordinates. Instances draw
//! their data from [`rng_stream`] labels that depend only on the instance's
//! own coordinates, and the worker pool collects results in grid order, so
//! the table is identical for any number of workers.

use std::collections::BTreeMap;

use rand::Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::config::{fmt_f64, rng_stream, ConfigError, ConfigReader, FromConfig, Table};
use crate::densemath::{dense_solve, svd_extremes, Mat, Vector};
use crate::diagnostics::{
    adjoint_trace_row, capped, compare_gradients, descent_condition_check, exact_matrix, neumann_truncation_error,
    npg_matrix, sampled_inner_products, soft_cosine, standard_normal_vector, DiagError, TraceRow,
};
use crate::eqmodule::{EqModule, ModuleError, ModuleKind};
use crate::fpsolvers::{solve, FixedPointSolution, SolverSpec};
use crate::gradoracles::{
    adjoint_solve, bptt_exact, ift_exact, neumann_sum, npg, upg, upg_backward, upg_unroll, GradMethod, GradOracleSpec,
    OracleError,
};
use crate::training::{finite_difference_check, sgd_run, TrainConfig, TrainError, TrainTrace};

/// Cap applied to norms written by the stability study.
pub const NORM_CAP: f64 = 1e30;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid experiment spec: {0}")]
    InvalidSpec(String),
    #[error("could not build worker pool: {0}")]
    Pool(String),
    #[error(transparent)]
    Module(#[from] ModuleError),
    #[error(transparent)]
    Diag(#[from] DiagError),
}

/// Grid of synthetic instances shared by the sweep-style runners.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepSpec {
    pub d: usize,
    pub n_problems: usize,
    pub lh_levels: Vec<f64>,
    pub k_values: Vec<usize>,
    pub lambda_values: Vec<f64>,
    pub forward_tol: f64,
    pub forward_iters: usize,
    pub seed: u64,
    pub kind: ModuleKind,
}

impl SweepSpec {
    /// Precision-sweep defaults.
    pub fn precision_defaults() -> Self {
        let mut k_values: Vec<usize> = (1..=10).collect();
        k_values.extend([20, 50, 100]);
        SweepSpec {
            d: 128,
            n_problems: 16,
            lh_levels: vec![0.9],
            k_values,
            lambda_values: vec![0.25, 0.5, 0.75, 1.0],
            forward_tol: 1e-5,
            forward_iters: 100,
            seed: 0,
            kind: ModuleKind::AffineTanh,
        }
    }

    /// Stability-study defaults: the near-singular levels.
    pub fn stability_defaults() -> Self {
        SweepSpec {
            n_problems: 4,
            lh_levels: vec![0.9, 0.99, 0.999, 0.9999],
            k_values: vec![5],
            lambda_values: vec![0.5, 1.0],
            ..Self::precision_defaults()
        }
    }

    /// Theory-grid defaults: small dense instances.
    pub fn theory_defaults() -> Self {
        let mut k_values: Vec<usize> = (1..=10).collect();
        k_values.extend([20, 50]);
        SweepSpec {
            d: 8,
            n_problems: 32,
            k_values,
            lambda_values: vec![0.25, 0.5, 1.0],
            forward_tol: 1e-13,
            forward_iters: 2000,
            ..Self::precision_defaults()
        }
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        let bad = |m: &str| Err(ExperimentError::InvalidSpec(m.to_string()));
        if self.d == 0 || self.n_problems == 0 {
            return bad("d and n_problems must be >= 1");
        }
        if self.lh_levels.is_empty() || self.lh_levels.iter().any(|l| !(*l > 0.0 && *l < 1.0)) {
            return bad("every L_h level must lie in (0, 1)");
        }
        if self.lambda_values.is_empty() || self.lambda_values.iter().any(|l| !(*l > 0.0 && *l <= 1.0)) {
            return bad("every lambda must lie in (0, 1]");
        }
        if self.k_values.is_empty() || self.k_values.contains(&0) {
            return bad("every k must be >= 1");
        }
        if !(self.forward_tol > 0.0) || self.forward_iters == 0 {
            return bad("forward budget must be positive");
        }
        Ok(())
    }

    fn forward_spec(&self) -> SolverSpec {
        SolverSpec::picard(self.forward_tol, self.forward_iters)
    }

    /// `(level index, instance index)` in grid order.
    fn cells(&self) -> Vec<(usize, usize)> {
        (0..self.lh_levels.len())
            .flat_map(|l| (0..self.n_problems).map(move |i| (l, i)))
            .collect()
    }
}

/// Reads sweep keys with the given defaults.
pub fn read_sweep(r: &mut ConfigReader<'_>, d: &SweepSpec) -> Result<SweepSpec, ConfigError> {
    let spec = SweepSpec {
        d: r.usize("d", d.d)?,
        n_problems: r.usize("n_problems", d.n_problems)?,
        lh_levels: r.f64_list("lh_levels", &d.lh_levels)?,
        k_values: r.usize_list("k_values", &d.k_values)?,
        lambda_values: r.f64_list("lambda_values", &d.lambda_values)?,
        forward_tol: r.f64("forward_tol", d.forward_tol)?,
        forward_iters: r.usize("forward_iters", d.forward_iters)?,
        seed: r.u64("seed", d.seed)?,
        kind: r.choice(
            "kind",
            d.kind,
            "LinearContraction or AffineTanh",
            ModuleKind::parse,
            ModuleKind::name,
        )?,
    };
    for (key, v) in [
        ("d", spec.d),
        ("n_problems", spec.n_problems),
        ("forward_iters", spec.forward_iters),
    ] {
        if v == 0 {
            return Err(r.range_error(key, v, "[1, inf)"));
        }
    }
    if let Some(l) = spec.lh_levels.iter().find(|l| !(**l > 0.0 && **l < 1.0)) {
        return Err(r.range_error("lh_levels", fmt_f64(*l), "(0, 1)"));
    }
    if let Some(l) = spec.lambda_values.iter().find(|l| !(**l > 0.0 && **l <= 1.0)) {
        return Err(r.range_error("lambda_values", fmt_f64(*l), "(0, 1]"));
    }
    if spec.k_values.contains(&0) {
        return Err(r.range_error("k_values", 0, "[1, inf)"));
    }
    if !(spec.forward_tol > 0.0) {
        return Err(r.range_error("forward_tol", fmt_f64(spec.forward_tol), "(0, inf)"));
    }
    Ok(spec)
}

impl FromConfig for SweepSpec {
    fn read(r: &mut ConfigReader<'_>) -> Result<Self, ConfigError> {
        read_sweep(r, &SweepSpec::precision_defaults())
    }
}

/// One synthetic problem: module, injection `u`, target `y`.
#[derive(Debug, Clone)]
pub struct Instance {
    pub level: f64,
    pub index: usize,
    pub module: EqModule,
    pub u: Vector,
    pub y: Vector,
}

/// Instance `index` at Lipschitz level `level`. Depends only on
/// `(seed, kind, d, level, index)`.
pub fn make_instance(spec: &SweepSpec, level: f64, index: usize) -> Result<Instance, ExperimentError> {
    let label = format!("instance/{}/{}", fmt_f64(level), index);
    let module_seed: u64 = rng_stream(spec.seed, &label).random();
    Ok(Instance {
        level,
        index,
        module: EqModule::synthetic(spec.kind, spec.d, level, module_seed)?,
        u: standard_normal_vector(spec.d, spec.seed, &format!("{label}/u")),
        y: standard_normal_vector(spec.d, spec.seed, &format!("{label}/y")),
    })
}

/// Maps `f` over `items` on a pool of `workers` threads; output keeps input order.
pub fn run_pool<T, R, F>(items: &[T], workers: usize, f: F) -> Result<Vec<R>, ExperimentError>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| ExperimentError::Pool(e.to_string()))?;
    Ok(pool.install(|| items.par_iter().map(&f).collect()))
}

/// Rows plus the number of flagged failures among them.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunOutput {
    pub table: Table,
    pub flagged: usize,
}

fn bool_cell(b: bool) -> String {
    b.to_string()
}

// ---------------------------------------------------------------- precision

pub const PRECISION_HEADER: [&str; 19] = [
    "seed",
    "lh",
    "instance",
    "config_hash",
    "method",
    "k",
    "lambda",
    "cosine_vs_exact",
    "eps_error",
    "l1_exact",
    "l1_phantom",
    "reference_cross_cosine",
    "reference_ift_iterations",
    "forward_iterations",
    "forward_residual",
    "forward_converged",
    "failed",
    "note",
    "status",
];

/// Phantom gradients against the BPTT reference, for every `(k, λ)` and both
/// UPG and NPG. The reference is cross-checked against IFT with a
/// 20-iteration Broyden adjoint; their cosine is repeated on every row.
pub fn run_precision_sweep(spec: &SweepSpec, config_hash: &str, workers: usize) -> Result<RunOutput, ExperimentError> {
    spec.validate()?;
    let cells = spec.cells();
    let results = run_pool(&cells, workers, |&(l, i)| precision_instance(spec, l, i, config_hash))?;
    let mut out = RunOutput {
        table: Table::new(&PRECISION_HEADER),
        flagged: 0,
    };
    for r in results {
        let (rows, flagged) = r?;
        out.flagged += flagged;
        rows.into_iter().for_each(|row| out.table.push(row));
    }
    Ok(out)
}

fn precision_instance(
    spec: &SweepSpec,
    level_idx: usize,
    index: usize,
    hash: &str,
) -> Result<(Vec<Vec<String>>, usize), ExperimentError> {
    let level = spec.lh_levels[level_idx];
    let inst = make_instance(spec, level, index)?;
    let key = |method: &str, k: String, lambda: String| {
        vec![
            spec.seed.to_string(),
            fmt_f64(level),
            index.to_string(),
            hash.to_string(),
            method.to_string(),
            k,
            lambda,
        ]
    };
    let failure = |note: String, fwd: Option<&FixedPointSolution>| {
        let mut row = key("-", String::new(), String::new());
        row.extend(vec![String::new(); 6]);
        row.push(fwd.map(|f| f.iterations.to_string()).unwrap_or_default());
        row.push(fwd.map(|f| fmt_f64(f.rel_residual)).unwrap_or_default());
        row.push(fwd.map(|f| bool_cell(f.converged)).unwrap_or_default());
        row.push(bool_cell(true));
        row.push(note);
        row.push("failed".into());
        (vec![row], 1)
    };

    let fwd = match solve(&inst.module, &inst.u, &spec.forward_spec().with_trajectory(), None) {
        Ok(f) => f,
        Err(e) => return Ok(failure(format!("forward: {e}"), None)),
    };
    let v = fwd.h_star.sub(&inst.y).expect("same dimension");
    let reference = match bptt_exact(&inst.module, &fwd, &inst.u, &v, 1.0) {
        Ok(g) => g,
        Err(e) => return Ok(failure(format!("reference: {e}"), Some(&fwd))),
    };
    let ift = match ift_exact(&inst.module, &fwd.h_star, &inst.u, &v, &GradOracleSpec::ift_broyden(20)) {
        Ok(g) => g,
        Err(e) => return Ok(failure(format!("cross-check: {e}"), Some(&fwd))),
    };
    let cross = soft_cosine(&reference.joint(), &ift.joint());
    let ift_iters = ift.aux.as_ref().and_then(|a| a.adjoint_iterations).unwrap_or(0);

    let mut rows = Vec::new();
    let mut flagged = 0;
    for &k in &spec.k_values {
        for &lambda in &spec.lambda_values {
            for method in [GradMethod::UPG, GradMethod::NPG] {
                let g = match method {
                    GradMethod::UPG => upg(&inst.module, &fwd.h_star, &inst.u, &v, k, lambda),
                    _ => npg(&inst.module, &fwd.h_star, &inst.u, &v, k, lambda),
                };
                let mut row = key(method.name(), k.to_string(), fmt_f64(lambda));
                let (cells, failed, note) = match g
                    .map_err(DiagError::from)
                    .and_then(|g| compare_gradients(&reference, &g))
                {
                    Ok(rec) => (
                        vec![
                            fmt_f64(rec.cosine_vs_exact.unwrap_or(0.0)),
                            fmt_f64(rec.eps_error.unwrap_or(f64::NAN)),
                            fmt_f64(rec.l1_exact.unwrap_or(f64::NAN)),
                            fmt_f64(rec.l1_phantom.unwrap_or(f64::NAN)),
                        ],
                        false,
                        String::new(),
                    ),
                    Err(e) => (vec![String::new(); 4], true, e.to_string()),
                };
                flagged += failed as usize;
                row.extend(cells);
                row.push(fmt_f64(cross));
                row.push(ift_iters.to_string());
                row.push(fwd.iterations.to_string());
                row.push(fmt_f64(fwd.rel_residual));
                row.push(bool_cell(fwd.converged));
                row.push(bool_cell(failed));
                row.push(note);
                row.push(if failed { "failed" } else { "ok" }.into());
                rows.push(row);
            }
        }
    }
    Ok((rows, flagged))
}

// ---------------------------------------------------------------- stability

#[derive(Debug, Clone, PartialEq)]
pub struct StabilitySpec {
    pub sweep: SweepSpec,
    pub broyden_backward_iters: usize,
}

impl Default for StabilitySpec {
    fn default() -> Self {
        StabilitySpec {
            sweep: SweepSpec::stability_defaults(),
            broyden_backward_iters: 30,
        }
    }
}

impl FromConfig for StabilitySpec {
    fn read(r: &mut ConfigReader<'_>) -> Result<Self, ConfigError> {
        let d = StabilitySpec::default();
        let sweep = read_sweep(r, &d.sweep)?;
        let iters = r.usize("broyden_backward_iters", d.broyden_backward_iters)?;
        if iters == 0 {
            return Err(r.range_error("broyden_backward_iters", 0, "[1, inf)"));
        }
        Ok(StabilitySpec {
            sweep,
            broyden_backward_iters: iters,
        })
    }
}

pub const STABILITY_HEADER: [&str; 16] = [
    "seed",
    "lh",
    "instance",
    "config_hash",
    "solver",
    "lambda",
    "iteration",
    "objective",
    "rel_error",
    "cosine",
    "l1_norm",
    "grad_l1",
    "exact_grad_l1",
    "diverged",
    "note",
    "status",
];

/// Per-iteration trace of a Broyden adjoint solve of `(I − J_h) ĝ = v`
/// against the dense solution, next to the NPG and UPG adjoint vectors at the
/// same number of `J_h` products.
///
/// For budget `t` the NPG row holds `λ Σ_{s<t} Bˢ v` and the UPG row the
/// accumulated adjoint of a `t`-step unroll; `grad_l1` is the L1 norm of the
/// parameter gradient `J_θ ĝ` each of them implies.
pub fn run_stability_study(
    spec: &StabilitySpec,
    config_hash: &str,
    workers: usize,
) -> Result<RunOutput, ExperimentError> {
    spec.sweep.validate()?;
    let cells = spec.sweep.cells();
    let results = run_pool(&cells, workers, |&(l, i)| stability_instance(spec, l, i, config_hash))?;
    let mut out = RunOutput {
        table: Table::new(&STABILITY_HEADER),
        flagged: 0,
    };
    for r in results {
        let (rows, flagged) = r?;
        out.flagged += flagged;
        rows.into_iter().for_each(|row| out.table.push(row));
    }
    Ok(out)
}

fn stability_instance(
    spec: &StabilitySpec,
    level_idx: usize,
    index: usize,
    hash: &str,
) -> Result<(Vec<Vec<String>>, usize), ExperimentError> {
    let sweep = &spec.sweep;
    let level = sweep.lh_levels[level_idx];
    let inst = make_instance(sweep, level, index)?;
    let m = &inst.module;
    let row =
        |solver: &str, lambda: Option<f64>, tr: &TraceRow, grad_l1: f64, exact_l1: f64, diverged: bool, note: &str| {
            vec![
                sweep.seed.to_string(),
                fmt_f64(level),
                index.to_string(),
                hash.to_string(),
                solver.to_string(),
                lambda.map(fmt_f64).unwrap_or_default(),
                tr.iteration.to_string(),
                capped(tr.objective, NORM_CAP),
                capped(tr.rel_error, NORM_CAP),
                fmt_f64(tr.cosine),
                capped(tr.l1_norm, NORM_CAP),
                capped(grad_l1, NORM_CAP),
                capped(exact_l1, NORM_CAP),
                bool_cell(diverged),
                note.to_string(),
                if diverged { "flagged" } else { "ok" }.to_string(),
            ]
        };

    let fwd = match solve(m, &inst.u, &sweep.forward_spec(), None) {
        Ok(f) => f,
        Err(e) => {
            let blank = TraceRow {
                iteration: 0,
                objective: f64::NAN,
                rel_error: f64::NAN,
                cosine: 0.0,
                l1_norm: f64::NAN,
            };
            return Ok((
                vec![row("forward", None, &blank, f64::NAN, f64::NAN, true, &e.to_string())],
                1,
            ));
        }
    };
    let h = &fwd.h_star;
    let v = h.sub(&inst.y).expect("same dimension");
    let lin = m.linearize(h, &inst.u)?;
    let (jh, _) = lin.dense();
    let exact = dense_solve(&Mat::identity(m.dim()).sub(&jh).map_err(DiagError::from)?, &v).map_err(DiagError::from)?;
    let grad_l1 = |g: &Vector| -> f64 {
        if g.is_finite() {
            lin.vjp_theta(g).norm1()
        } else {
            f64::INFINITY
        }
    };
    let exact_l1 = grad_l1(&exact);

    let mut rows = Vec::new();
    let mut flagged = 0;

    // Broyden adjoint, run for the full budget.
    let iters = spec.broyden_backward_iters;
    let broyden = GradOracleSpec {
        adjoint_tol: f64::MIN_POSITIVE,
        ..GradOracleSpec::ift_broyden(iters)
    };
    let mut trace: Vec<(TraceRow, f64)> = Vec::new();
    let mut observe = |t: usize, g: &Vector, _: f64| {
        trace.push((adjoint_trace_row(&lin, t, g, &v, &exact), grad_l1(g)));
    };
    let diverged = match adjoint_solve(&lin, &v, &broyden, &mut observe) {
        Ok(_) => false,
        Err(OracleError::AdjointDiverged { .. }) => true,
        Err(e) => return Err(DiagError::from(e).into()),
    };
    flagged += diverged as usize;
    let n_trace = trace.len();
    for (j, (tr, gl1)) in trace.iter().enumerate() {
        let last = j + 1 == n_trace;
        let note = if diverged && last {
            "diverged after this iterate"
        } else {
            ""
        };
        rows.push(row("BroydenAdjoint", None, tr, *gl1, exact_l1, diverged && last, note));
    }

    // Phantom adjoints at matched budgets: t products of J_h.
    for &lambda in &sweep.lambda_values {
        for t in 1..=iters {
            let (tr, gl1) = match neumann_sum(&lin, &v, t, lambda) {
                Ok(g) => {
                    let g = g.scaled(lambda);
                    (adjoint_trace_row(&lin, t, &g, &v, &exact), grad_l1(&g))
                }
                Err(_) => (nonfinite_row(t), f64::INFINITY),
            };
            rows.push(row("NPG", Some(lambda), &tr, gl1, exact_l1, false, ""));
        }
        for t in 1..=iters {
            let res = upg_unroll(m, h, &inst.u, t, lambda).and_then(|un| upg_backward(m, &un, &inst.u, &v));
            let (tr, gl1) = match res {
                Ok((g, adj)) => (adjoint_trace_row(&lin, t, &adj, &v, &exact), g.grad_theta.norm1()),
                Err(_) => (nonfinite_row(t), f64::INFINITY),
            };
            rows.push(row("UPG", Some(lambda), &tr, gl1, exact_l1, false, ""));
        }
    }
    Ok((rows, flagged))
}

fn nonfinite_row(iteration: usize) -> TraceRow {
    TraceRow {
        iteration,
        objective: f64::INFINITY,
        rel_error: f64::INFINITY,
        cosine: 0.0,
        l1_norm: f64::INFINITY,
    }
}

// ---------------------------------------------------------------- theory grid

pub const THEORY_HEADER: [&str; 22] = [
    "seed",
    "lh",
    "instance",
    "config_hash",
    "k",
    "lambda",
    "lhs",
    "lhs_upg",
    "lhs_fro",
    "rhs",
    "reduced_lhs",
    "reduced_rhs",
    "satisfied",
    "positive_draws",
    "n_draws",
    "min_inner_product",
    "truncation_error",
    "norm_b",
    "smallest_k_satisfied",
    "forward_residual",
    "rhs_degenerate",
    "status",
];

/// Number of random upstream gradients per satisfied cell.
pub const THEORY_DRAWS: usize = 100;

/// Ascent-condition and Neumann-error grid. Each instance also gets one
/// `k = inf` row for the exact backward matrix.
pub fn run_theory_grid(spec: &SweepSpec, config_hash: &str, workers: usize) -> Result<RunOutput, ExperimentError> {
    spec.validate()?;
    let cells = spec.cells();
    let results = run_pool(&cells, workers, |&(l, i)| theory_instance(spec, l, i, config_hash))?;
    let mut out = RunOutput {
        table: Table::new(&THEORY_HEADER),
        flagged: 0,
    };
    for r in results {
        let (rows, flagged) = r?;
        out.flagged += flagged;
        rows.into_iter().for_each(|row| out.table.push(row));
    }
    Ok(out)
}

fn theory_instance(
    spec: &SweepSpec,
    level_idx: usize,
    index: usize,
    hash: &str,
) -> Result<(Vec<Vec<String>>, usize), ExperimentError> {
    let level = spec.lh_levels[level_idx];
    let inst = make_instance(spec, level, index)?;
    let m = &inst.module;
    let prefix = vec![
        spec.seed.to_string(),
        fmt_f64(level),
        index.to_string(),
        hash.to_string(),
    ];
    let fwd = match solve(m, &inst.u, &spec.forward_spec(), None) {
        Ok(f) => f,
        Err(e) => {
            let mut row = prefix.clone();
            row.extend(vec![String::new(); 17]);
            row.push(format!("failed: {e}"));
            return Ok((vec![row], 1));
        }
    };
    let h = &fwd.h_star;
    let (jh, jt) = m.materialize_jacobians(h, &inst.u)?;
    let exact = exact_matrix(&jh, &jt).map_err(DiagError::from)?;
    let draw_seed: u64 = rng_stream(spec.seed, &format!("draws/{}/{}", fmt_f64(level), index)).random();
    let mut rows = Vec::new();
    let mut flagged = 0;

    for &lambda in &spec.lambda_values {
        let b = jh
            .scaled(lambda)
            .add(&Mat::identity(m.dim()).scaled(1.0 - lambda))
            .map_err(DiagError::from)?;
        let norm_b = svd_extremes(&b).map_err(DiagError::from)?.sigma_max;
        let mut group = Vec::new();
        let mut smallest: Option<usize> = None;
        for &k in &spec.k_values {
            let rec = descent_condition_check(m, h, &inst.u, k, lambda, draw_seed)?;
            let trunc = neumann_truncation_error(m, h, &inst.u, k, lambda)?;
            let satisfied = rec.ascent_guaranteed();
            let (positive, n_draws, min_ip) = if satisfied {
                let a = npg_matrix(&jh, &jt, k, lambda).map_err(DiagError::from)?;
                let ips = sampled_inner_products(&a, &exact, THEORY_DRAWS, draw_seed).map_err(DiagError::from)?;
                let pos = ips.iter().filter(|x| **x > 0.0).count();
                (pos, ips.len(), ips.iter().cloned().fold(f64::INFINITY, f64::min))
            } else {
                (0, 0, f64::NAN)
            };
            if satisfied {
                smallest = Some(smallest.map_or(k, |s: usize| s.min(k)));
                if positive < n_draws {
                    flagged += 1;
                }
            }
            group.push((k, rec, trunc, satisfied, positive, n_draws, min_ip));
        }
        for (k, rec, trunc, satisfied, positive, n_draws, min_ip) in group {
            let mut row = prefix.clone();
            let violated = satisfied && positive < n_draws;
            row.extend([
                k.to_string(),
                fmt_f64(lambda),
                fmt_f64(rec.lhs_ascent.unwrap_or(f64::NAN)),
                fmt_f64(rec.lhs_ascent_upg.unwrap_or(f64::NAN)),
                fmt_f64(rec.lhs_ascent_fro.unwrap_or(f64::NAN)),
                fmt_f64(rec.rhs_ascent.unwrap_or(f64::NAN)),
                fmt_f64(rec.reduced_lhs.unwrap_or(f64::NAN)),
                fmt_f64(rec.reduced_rhs.unwrap_or(f64::NAN)),
                bool_cell(satisfied),
                positive.to_string(),
                n_draws.to_string(),
                if n_draws > 0 { fmt_f64(min_ip) } else { String::new() },
                fmt_f64(trunc),
                fmt_f64(norm_b),
                smallest.map(|s| s.to_string()).unwrap_or_default(),
                fmt_f64(fwd.rel_residual),
                bool_cell(rec.rhs_degenerate),
                if violated { "flagged" } else { "ok" }.to_string(),
            ]);
            rows.push(row);
        }
    }

    // Exact backward matrix: zero left-hand side.
    let (lhs, lhs_fro) = crate::diagnostics::descent_lhs(&exact, &jh, &jt).map_err(DiagError::from)?;
    let (rhs, reduced_rhs, degenerate) = crate::diagnostics::descent_rhs(&jt).map_err(DiagError::from)?;
    let ips = sampled_inner_products(&exact, &exact, THEORY_DRAWS, draw_seed).map_err(DiagError::from)?;
    let positive = ips.iter().filter(|x| **x > 0.0).count();
    let mut row = prefix;
    row.extend([
        "inf".to_string(),
        String::new(),
        fmt_f64(lhs),
        String::new(),
        fmt_f64(lhs_fro),
        fmt_f64(rhs),
        "0".to_string(),
        fmt_f64(reduced_rhs),
        bool_cell(lhs < rhs),
        positive.to_string(),
        ips.len().to_string(),
        fmt_f64(ips.iter().cloned().fold(f64::INFINITY, f64::min)),
        "0".to_string(),
        String::new(),
        String::new(),
        fmt_f64(fwd.rel_residual),
        bool_cell(degenerate),
        "ok".to_string(),
    ]);
    rows.push(row);
    Ok((rows, flagged))
}

// ---------------------------------------------------------------- training

/// Shared training settings and the oracles to compare.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainBenchSpec {
    pub base: TrainConfig,
    pub oracles: Vec<GradOracleSpec>,
    /// Window for the reported final loss.
    pub smoothing_window: usize,
}

impl TrainBenchSpec {
    pub fn configs(&self) -> Vec<TrainConfig> {
        self.oracles
            .iter()
            .map(|o| TrainConfig {
                oracle: o.clone(),
                ..self.base.clone()
            })
            .collect()
    }
}

/// Parses `IFTExact`, `NPG:5:0.5`, `UPG:5:0.5`, `OneStep`, `BPTT`.
pub fn parse_oracle_entry(entry: &str, template: &GradOracleSpec) -> Option<GradOracleSpec> {
    let mut parts = entry.trim().split(':');
    let method = GradMethod::parse(parts.next()?.trim())?;
    let k = match parts.next() {
        Some(s) => s.trim().parse().ok()?,
        None => 1,
    };
    let lambda = match parts.next() {
        Some(s) => s.trim().parse().ok()?,
        None => 1.0,
    };
    if parts.next().is_some() {
        return None;
    }
    let spec = GradOracleSpec {
        method,
        k,
        lambda,
        ..template.clone()
    };
    spec.validate().ok().map(|_| spec)
}

fn oracle_entry_name(o: &GradOracleSpec) -> String {
    match o.method {
        GradMethod::UPG | GradMethod::NPG => format!("{}:{}:{}", o.method.name(), o.k, fmt_f64(o.lambda)),
        m => m.name().to_string(),
    }
}

impl FromConfig for TrainBenchSpec {
    fn read(r: &mut ConfigReader<'_>) -> Result<Self, ConfigError> {
        let base = TrainConfig::read(r)?;
        let default_list = [
            GradOracleSpec::ift(),
            GradOracleSpec::phantom(GradMethod::NPG, 5, 0.5),
            GradOracleSpec::phantom(GradMethod::UPG, 5, 0.5),
        ]
        .map(|o| o_with_adjoint(&o, &base.oracle));
        let default_text = default_list.iter().map(oracle_entry_name).collect::<Vec<_>>().join(",");
        let text = r.string("oracles", &default_text)?;
        let mut oracles = Vec::new();
        for entry in text.split(',').filter(|e| !e.trim().is_empty()) {
            match parse_oracle_entry(entry, &base.oracle) {
                Some(o) => oracles.push(o),
                None => {
                    return Err(r.range_error(
                        "oracles",
                        entry.trim(),
                        "METHOD[:k[:lambda]] with k >= 1, lambda in (0, 1]",
                    ))
                }
            }
        }
        if oracles.is_empty() {
            return Err(r.range_error("oracles", "", "a non-empty list"));
        }
        let smoothing_window = r.usize("smoothing_window", 50)?;
        if smoothing_window == 0 {
            return Err(r.range_error("smoothing_window", 0, "[1, inf)"));
        }
        Ok(TrainBenchSpec {
            base,
            oracles,
            smoothing_window,
        })
    }
}

fn o_with_adjoint(o: &GradOracleSpec, template: &GradOracleSpec) -> GradOracleSpec {
    GradOracleSpec {
        method: o.method,
        k: o.k,
        lambda: o.lambda,
        ..template.clone()
    }
}

pub const TRAIN_HEADER: [&str; 12] = [
    "seed",
    "instance",
    "config_hash",
    "oracle",
    "step",
    "eta",
    "loss",
    "grad_norm",
    "eps_error",
    "cosine_vs_exact",
    "rho_f_lambda",
    "status",
];

pub const TIMING_HEADER: [&str; 9] = [
    "seed",
    "instance",
    "config_hash",
    "oracle",
    "final_loss",
    "mean_forward_time",
    "mean_backward_time",
    "backward_speedup_vs_ift",
    "status",
];

/// Result of a training benchmark: per-step rows (deterministic) and a
/// summary with wall-times.
#[derive(Debug, Clone, Default)]
pub struct TrainBenchOutput {
    pub rows: RunOutput,
    pub timings: Table,
    pub traces: Vec<Option<TrainTrace>>,
}

/// Trains each config; configs run concurrently on the pool.
pub fn run_training_benchmark(
    cfgs: &[TrainConfig],
    config_hash: &str,
    workers: usize,
    smoothing_window: usize,
) -> Result<TrainBenchOutput, ExperimentError> {
    let runs = run_pool(cfgs, workers, sgd_run)?;
    let mut rows = RunOutput {
        table: Table::new(&TRAIN_HEADER),
        flagged: 0,
    };
    let ift_backward: Option<f64> = cfgs
        .iter()
        .zip(&runs)
        .find(|(c, r)| c.oracle.method == GradMethod::IFTExact && r.is_ok())
        .and_then(|(_, r)| r.as_ref().ok().map(|t| t.mean_backward_time()));
    let mut timings = Table::new(&TIMING_HEADER);
    let mut traces = Vec::new();
    for (i, (cfg, run)) in cfgs.iter().zip(runs).enumerate() {
        let label = oracle_entry_name(&cfg.oracle);
        let prefix = vec![
            cfg.dataset_seed.to_string(),
            i.to_string(),
            config_hash.to_string(),
            label,
        ];
        let (trace, status, partial) = match run {
            Ok(t) => (t, "ok".to_string(), false),
            Err(TrainError::Aborted { step, reason, partial }) => {
                rows.flagged += 1;
                (*partial, format!("aborted at step {step}: {reason}"), true)
            }
            Err(e) => {
                rows.flagged += 1;
                let mut row = prefix.clone();
                row.extend(vec![String::new(); 7]);
                row.push(format!("failed: {e}"));
                rows.table.push(row);
                let mut trow = prefix;
                trow.extend(vec![String::new(); 4]);
                trow.push(format!("failed: {e}"));
                timings.push(trow);
                traces.push(None);
                continue;
            }
        };
        for row in trace.to_table(false).rows {
            let mut r = prefix.clone();
            r.extend(row);
            r.push(if partial { "partial" } else { "ok" }.to_string());
            rows.table.push(r);
        }
        let bwd = trace.mean_backward_time();
        let speedup = ift_backward.filter(|_| bwd > 0.0).map(|ift| ift / bwd);
        let mut trow = prefix;
        trow.extend([
            if trace.steps.is_empty() {
                String::new()
            } else {
                fmt_f64(trace.final_loss(smoothing_window))
            },
            fmt_f64(trace.mean_forward_time()),
            fmt_f64(bwd),
            speedup.map(fmt_f64).unwrap_or_default(),
            status,
        ]);
        timings.push(trow);
        traces.push(Some(trace));
    }
    Ok(TrainBenchOutput { rows, timings, traces })
}

// ---------------------------------------------------------------- fd check

#[derive(Debug, Clone, PartialEq)]
pub struct FdCheckSpec {
    pub oracle: GradOracleSpec,
    pub d: usize,
    pub target_l: f64,
    pub n_seeds: usize,
    pub seed: u64,
    pub eps_fd: f64,
    pub threshold: f64,
    pub kind: ModuleKind,
}

impl Default for FdCheckSpec {
    fn default() -> Self {
        FdCheckSpec {
            oracle: GradOracleSpec::ift(),
            d: 8,
            target_l: 0.5,
            n_seeds: 8,
            seed: 0,
            eps_fd: 1e-5,
            threshold: 1e-4,
            kind: ModuleKind::AffineTanh,
        }
    }
}

impl FromConfig for FdCheckSpec {
    fn read(r: &mut ConfigReader<'_>) -> Result<Self, ConfigError> {
        let d = FdCheckSpec::default();
        let oracle = GradOracleSpec::read(r)?;
        let dim = r.usize("d", d.d)?;
        if dim == 0 || dim > 32 {
            return Err(r.range_error("d", dim, "[1, 32]"));
        }
        let target_l = r.f64("target_l", d.target_l)?;
        if !(target_l > 0.0 && target_l < 1.0) {
            return Err(r.range_error("target_l", fmt_f64(target_l), "(0, 1)"));
        }
        let n_seeds = r.usize("n_seeds", d.n_seeds)?;
        if n_seeds == 0 {
            return Err(r.range_error("n_seeds", 0, "[1, inf)"));
        }
        let seed = r.u64("seed", d.seed)?;
        let eps_fd = r.f64("eps_fd", d.eps_fd)?;
        if !(eps_fd > 0.0) {
            return Err(r.range_error("eps_fd", fmt_f64(eps_fd), "(0, inf)"));
        }
        let threshold = r.f64("threshold", d.threshold)?;
        if !(threshold > 0.0) {
            return Err(r.range_error("threshold", fmt_f64(threshold), "(0, inf)"));
        }
        let kind = r.choice(
            "kind",
            d.kind,
            "LinearContraction or AffineTanh",
            ModuleKind::parse,
            ModuleKind::name,
        )?;
        Ok(FdCheckSpec {
            oracle,
            d: dim,
            target_l,
            n_seeds,
            seed,
            eps_fd,
            threshold,
            kind,
        })
    }
}

pub const FD_HEADER: [&str; 8] = [
    "seed",
    "instance",
    "config_hash",
    "oracle",
    "max_rel_error",
    "threshold",
    "passed",
    "status",
];

/// Finite-difference check of the configured oracle on `n_seeds` instances.
/// Instances above the threshold are flagged.
pub fn run_fd_check(spec: &FdCheckSpec, config_hash: &str, workers: usize) -> Result<RunOutput, ExperimentError> {
    let sweep = SweepSpec {
        d: spec.d,
        n_problems: spec.n_seeds,
        lh_levels: vec![spec.target_l],
        seed: spec.seed,
        kind: spec.kind,
        ..SweepSpec::precision_defaults()
    };
    let idx: Vec<usize> = (0..spec.n_seeds).collect();
    let results = run_pool(&idx, workers, |&i| -> Result<Result<f64, String>, ExperimentError> {
        let inst = make_instance(&sweep, spec.target_l, i)?;
        Ok(
            finite_difference_check(&inst.module, &inst.u, &inst.y, &spec.oracle, spec.eps_fd)
                .map_err(|e| e.to_string()),
        )
    })?;
    let mut out = RunOutput {
        table: Table::new(&FD_HEADER),
        flagged: 0,
    };
    for (i, r) in results.into_iter().enumerate() {
        let mut row = vec![
            spec.seed.to_string(),
            i.to_string(),
            config_hash.to_string(),
            spec.oracle.label(),
        ];
        match r? {
            Ok(err) => {
                let passed = err <= spec.threshold;
                out.flagged += (!passed) as usize;
                row.extend([
                    fmt_f64(err),
                    fmt_f64(spec.threshold),
                    bool_cell(passed),
                    if passed { "ok" } else { "flagged" }.to_string(),
                ]);
            }
            Err(e) => {
                out.flagged += 1;
                row.extend([
                    String::new(),
                    fmt_f64(spec.threshold),
                    bool_cell(false),
                    format!("failed: {e}"),
                ]);
            }
        }
        out.table.push(row);
    }
    Ok(out)
}

/// Per-group mean and population standard deviation of a numeric column.
pub fn group_stats(table: &Table, keys: &[&str], value: &str) -> BTreeMap<Vec<String>, (f64, f64, usize)> {
    let key_idx: Vec<usize> = keys.iter().filter_map(|k| table.column(k)).collect();
    let vi = match table.column(value) {
        Some(i) => i,
        None => return BTreeMap::new(),
    };
    let mut groups: BTreeMap<Vec<String>, Vec<f64>> = BTreeMap::new();
    for row in &table.rows {
        if let Ok(x) = row[vi].parse::<f64>() {
            groups
                .entry(key_idx.iter().map(|i| row[*i].clone()).collect())
                .or_default()
                .push(x);
        }
    }
    groups
        .into_iter()
        .map(|(k, xs)| {
            let n = xs.len() as f64;
            let mean = xs.iter().sum::<f64>() / n;
            let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
            (k, (mean, var.sqrt(), xs.len()))
        })
        .collect()
}
