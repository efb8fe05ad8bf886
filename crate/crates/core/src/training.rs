//! Minibatch SGD on the synthetic regression task `h*(u) ≈ y`.
//!
//! The loss of a pair is `½‖h − y‖²`, averaged over the batch. Each step
//! solves the forward fixed point per pair, asks the configured oracle for
//! the parameter gradient, takes `θ ← θ − η_n (g + wd·θ)` and projects `W`
//! back onto the spectral ball `‖W‖₂ ≤ L`.

use std::time::Instant;

use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::config::{fmt_f64, fmt_opt, read_solver, rng_stream, ConfigError, ConfigReader, FromConfig, Table};
use crate::densemath::Vector;
use crate::diagnostics::{soft_cosine, spectral_radius_report};
use crate::eqmodule::{EqModule, ModuleError, ModuleKind};
use crate::fpsolvers::{solve, FixedPointSolution, SolverError, SolverSpec};
use crate::gradoracles::{compute, ift_exact, upg_backward, upg_unroll, GradMethod, GradOracleSpec, OracleError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Schedule {
    /// `η_n = η₀ / √n`
    InvSqrt,
    Constant,
}

impl Schedule {
    pub fn name(self) -> &'static str {
        match self {
            Schedule::InvSqrt => "InvSqrt",
            Schedule::Constant => "Constant",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "invsqrt" | "inv_sqrt" => Some(Schedule::InvSqrt),
            "constant" => Some(Schedule::Constant),
            _ => None,
        }
    }

    /// Step size at the 1-based step `n`.
    pub fn eta(self, eta0: f64, n: usize) -> f64 {
        match self {
            Schedule::InvSqrt => eta0 / (n as f64).sqrt(),
            Schedule::Constant => eta0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub oracle: GradOracleSpec,
    pub solver: SolverSpec,
    pub eta0: f64,
    pub schedule: Schedule,
    pub weight_decay: f64,
    pub steps: usize,
    pub batch_size: usize,
    /// Seeds the dataset, the initial module and the batch order.
    pub dataset_seed: u64,
    pub d: usize,
    pub n_pairs: usize,
    pub target_l: f64,
    pub kind: ModuleKind,
    /// Also evaluate the exact gradient each step and log cosine and error.
    pub track_exact: bool,
    /// Log `ρ(λ J_h + (1 − λ) I)` at the first pair of each batch.
    pub track_rho: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            oracle: GradOracleSpec::default(),
            solver: SolverSpec::picard(1e-8, 300),
            eta0: 0.5,
            schedule: Schedule::InvSqrt,
            weight_decay: 0.0,
            steps: 2000,
            batch_size: 8,
            dataset_seed: 0,
            d: 16,
            n_pairs: 400,
            target_l: 0.9,
            kind: ModuleKind::AffineTanh,
            track_exact: false,
            track_rho: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::InvalidConfig(m));
        if !(self.eta0 >= 0.0 && self.eta0.is_finite()) {
            return bad(format!("eta0 must be finite and >= 0, got {}", self.eta0));
        }
        if self.steps == 0 || self.batch_size == 0 || self.n_pairs == 0 || self.d == 0 {
            return bad("steps, batch_size, n_pairs and d must be >= 1".into());
        }
        if self.batch_size > self.n_pairs {
            return bad(format!(
                "batch_size {} exceeds n_pairs {}",
                self.batch_size, self.n_pairs
            ));
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay must be >= 0".into());
        }
        if !(self.target_l > 0.0 && self.target_l < 1.0) {
            return bad(format!("target_l must lie in (0, 1), got {}", self.target_l));
        }
        self.oracle
            .validate()
            .map_err(|e| TrainError::InvalidConfig(e.to_string()))?;
        self.solver
            .validate()
            .map_err(|e| TrainError::InvalidConfig(e.to_string()))?;
        Ok(())
    }
}

impl FromConfig for TrainConfig {
    fn read(r: &mut ConfigReader<'_>) -> Result<Self, ConfigError> {
        let d = TrainConfig::default();
        let oracle = GradOracleSpec::read(r)?;
        let solver = read_solver(r, &d.solver)?;
        let eta0 = r.f64("eta0", d.eta0)?;
        if !(eta0 >= 0.0 && eta0.is_finite()) {
            return Err(r.range_error("eta0", fmt_f64(eta0), "[0, inf)"));
        }
        let schedule = r.choice(
            "schedule",
            d.schedule,
            "InvSqrt or Constant",
            Schedule::parse,
            Schedule::name,
        )?;
        let weight_decay = r.f64("weight_decay", d.weight_decay)?;
        if !(weight_decay >= 0.0 && weight_decay.is_finite()) {
            return Err(r.range_error("weight_decay", fmt_f64(weight_decay), "[0, inf)"));
        }
        let steps = r.usize("steps", d.steps)?;
        let batch_size = r.usize("batch_size", d.batch_size)?;
        let dataset_seed = r.u64("dataset_seed", d.dataset_seed)?;
        let dim = r.usize("d", d.d)?;
        let n_pairs = r.usize("n_pairs", d.n_pairs)?;
        for (key, v) in [
            ("steps", steps),
            ("batch_size", batch_size),
            ("d", dim),
            ("n_pairs", n_pairs),
        ] {
            if v == 0 {
                return Err(r.range_error(key, v, "[1, inf)"));
            }
        }
        let target_l = r.f64("target_l", d.target_l)?;
        if !(target_l > 0.0 && target_l < 1.0) {
            return Err(r.range_error("target_l", fmt_f64(target_l), "(0, 1)"));
        }
        let kind = r.choice(
            "kind",
            d.kind,
            "LinearContraction or AffineTanh",
            ModuleKind::parse,
            ModuleKind::name,
        )?;
        let track_exact = r.bool("track_exact", d.track_exact)?;
        let track_rho = r.bool("track_rho", d.track_rho)?;
        Ok(TrainConfig {
            oracle,
            solver,
            eta0,
            schedule,
            weight_decay,
            steps,
            batch_size,
            dataset_seed,
            d: dim,
            n_pairs,
            target_l,
            kind,
            track_exact,
            track_rho,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainStep {
    /// 1-based step index.
    pub step: usize,
    pub eta: f64,
    /// Batch-mean loss before the update.
    pub loss: f64,
    /// `‖g‖₂` of the batch-mean oracle gradient, weight decay excluded.
    pub grad_norm: f64,
    pub eps_error: Option<f64>,
    pub cosine_vs_exact: Option<f64>,
    pub rho_f_lambda: Option<f64>,
    pub forward_wall_time: f64,
    pub backward_wall_time: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainTrace {
    pub steps: Vec<TrainStep>,
    pub final_params: Vector,
}

impl TrainTrace {
    pub const HEADER: [&'static str; 9] = [
        "step",
        "eta",
        "loss",
        "grad_norm",
        "eps_error",
        "cosine_vs_exact",
        "rho_f_lambda",
        "forward_wall_time",
        "backward_wall_time",
    ];

    pub fn losses(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.loss).collect()
    }

    /// Means over consecutive non-overlapping windows; a short tail is dropped.
    pub fn window_means(&self, window: usize) -> Vec<f64> {
        self.losses()
            .chunks_exact(window.max(1))
            .map(|c| c.iter().sum::<f64>() / c.len() as f64)
            .collect()
    }

    /// Mean loss of the last `window` steps.
    pub fn final_loss(&self, window: usize) -> f64 {
        let l = self.losses();
        let tail = &l[l.len().saturating_sub(window.max(1))..];
        tail.iter().sum::<f64>() / tail.len().max(1) as f64
    }

    pub fn mean_forward_time(&self) -> f64 {
        self.steps.iter().map(|s| s.forward_wall_time).sum::<f64>() / self.steps.len().max(1) as f64
    }

    pub fn mean_backward_time(&self) -> f64 {
        self.steps.iter().map(|s| s.backward_wall_time).sum::<f64>() / self.steps.len().max(1) as f64
    }

    /// One row per step. Wall-times are left out when `timings` is false so
    /// that the table is reproducible bit for bit.
    pub fn to_table(&self, timings: bool) -> Table {
        let header: Vec<&str> = if timings {
            Self::HEADER.to_vec()
        } else {
            Self::HEADER[..7].to_vec()
        };
        let mut t = Table::new(&header);
        for s in &self.steps {
            let mut row = vec![
                s.step.to_string(),
                fmt_f64(s.eta),
                fmt_f64(s.loss),
                fmt_f64(s.grad_norm),
                fmt_opt(s.eps_error),
                fmt_opt(s.cosine_vs_exact),
                fmt_opt(s.rho_f_lambda),
            ];
            if timings {
                row.push(fmt_f64(s.forward_wall_time));
                row.push(fmt_f64(s.backward_wall_time));
            }
            t.push(row);
        }
        t
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("training aborted at step {step}: {reason}")]
    Aborted {
        step: usize,
        reason: String,
        partial: Box<TrainTrace>,
    },
    #[error(transparent)]
    Module(#[from] ModuleError),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
}

pub type Dataset = Vec<(Vector, Vector)>;

/// `n_pairs` pairs `(u, y)` with iid standard-normal entries.
pub fn make_dataset(d: usize, n_pairs: usize, seed: u64) -> Result<Dataset, TrainError> {
    if d == 0 || n_pairs == 0 {
        return Err(TrainError::InvalidConfig("d and n_pairs must be >= 1".into()));
    }
    let mut rng = rng_stream(seed, "dataset");
    Ok((0..n_pairs)
        .map(|_| {
            let u: Vector = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
            let y: Vector = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
            (u, y)
        })
        .collect())
}

/// Batch order: one seeded shuffle, then cycled.
fn batch_order(n: usize, seed: u64) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng_stream(seed, "batch-order"));
    idx
}

/// Initial module for `cfg`.
pub fn initial_module(cfg: &TrainConfig) -> Result<EqModule, TrainError> {
    Ok(EqModule::synthetic(cfg.kind, cfg.d, cfg.target_l, cfg.dataset_seed)?)
}

struct PairGrad {
    loss: f64,
    grad_theta: Vector,
    exact_theta: Option<Vector>,
    forward_time: f64,
    backward_time: f64,
}

fn pair_gradient(
    m: &EqModule,
    u: &Vector,
    y: &Vector,
    cfg: &TrainConfig,
    inv_batch: f64,
) -> Result<PairGrad, TrainError> {
    let solver = if cfg.oracle.method == GradMethod::BPTT {
        cfg.solver.clone().with_trajectory()
    } else {
        cfg.solver.clone()
    };
    let t0 = Instant::now();
    let sol: FixedPointSolution = solve(m, u, &solver, None)?;
    let forward_time = t0.elapsed().as_secs_f64();

    let t1 = Instant::now();
    let (loss, grad_theta) = if cfg.oracle.method == GradMethod::UPG {
        // The unrolled output is what the loss sees.
        let unroll = upg_unroll(m, &sol.h_star, u, cfg.oracle.k, cfg.oracle.lambda)?;
        let r = unroll.output().sub(y).expect("same dimension");
        let v = r.scaled(inv_batch);
        let (g, _) = upg_backward(m, &unroll, u, &v)?;
        (0.5 * r.dot(&r).expect("same dimension"), g.grad_theta)
    } else {
        let r = sol.h_star.sub(y).expect("same dimension");
        let v = r.scaled(inv_batch);
        let g = compute(m, &sol, u, &v, &cfg.oracle, cfg.solver.effective_damping())?;
        (0.5 * r.dot(&r).expect("same dimension"), g.grad_theta)
    };
    let backward_time = t1.elapsed().as_secs_f64();

    let exact_theta = if cfg.track_exact {
        let r = sol.h_star.sub(y).expect("same dimension").scaled(inv_batch);
        Some(ift_exact(m, &sol.h_star, u, &r, &GradOracleSpec::ift())?.grad_theta)
    } else {
        None
    };
    Ok(PairGrad {
        loss,
        grad_theta,
        exact_theta,
        forward_time,
        backward_time,
    })
}

fn accumulate(acc: &mut Option<Vector>, g: &Vector) {
    match acc {
        Some(a) => a.iter_mut().zip(g.iter()).for_each(|(x, y)| *x += y),
        None => *acc = Some(g.clone()),
    }
}

/// Runs `cfg.steps` SGD steps from [`initial_module`] on [`make_dataset`].
pub fn sgd_run(cfg: &TrainConfig) -> Result<TrainTrace, TrainError> {
    cfg.validate()?;
    let data = make_dataset(cfg.d, cfg.n_pairs, cfg.dataset_seed)?;
    let module = initial_module(cfg)?;
    sgd_run_on(cfg, module, &data)
}

/// SGD from a given module on a given dataset.
pub fn sgd_run_on(cfg: &TrainConfig, mut module: EqModule, data: &Dataset) -> Result<TrainTrace, TrainError> {
    cfg.validate()?;
    if data.len() < cfg.batch_size {
        return Err(TrainError::InvalidConfig("dataset smaller than one batch".into()));
    }
    let order = batch_order(data.len(), cfg.dataset_seed);
    let inv_batch = 1.0 / cfg.batch_size as f64;
    let mut trace = TrainTrace {
        steps: Vec::with_capacity(cfg.steps),
        final_params: module.params(),
    };
    let mut cursor = 0;
    for n in 1..=cfg.steps {
        let batch: Vec<usize> = (0..cfg.batch_size).map(|i| order[(cursor + i) % order.len()]).collect();
        cursor = (cursor + cfg.batch_size) % order.len();

        let mut loss = 0.0;
        let mut grad: Option<Vector> = None;
        let mut exact: Option<Vector> = None;
        let (mut fwd, mut bwd) = (0.0, 0.0);
        for &i in &batch {
            let (u, y) = &data[i];
            let pg = pair_gradient(&module, u, y, cfg, inv_batch).map_err(|e| TrainError::Aborted {
                step: n,
                reason: e.to_string(),
                partial: Box::new(trace.clone()),
            })?;
            loss += pg.loss * inv_batch;
            accumulate(&mut grad, &pg.grad_theta);
            if let Some(e) = &pg.exact_theta {
                accumulate(&mut exact, e);
            }
            fwd += pg.forward_time;
            bwd += pg.backward_time;
        }
        let grad = grad.expect("batch is non-empty");
        let (eps_error, cosine) = match &exact {
            Some(e) => (
                Some(grad.sub(e).expect("same length").norm2()),
                Some(soft_cosine(&grad, e)),
            ),
            None => (None, None),
        };
        let rho_f_lambda = if cfg.track_rho {
            let (u, _) = &data[batch[0]];
            let h = solve(&module, u, &cfg.solver, None).map(|s| s.h_star);
            match h {
                Ok(h) => spectral_radius_report(&module, &h, u, cfg.oracle.lambda, cfg.dataset_seed)
                    .ok()
                    .map(|r| r.1),
                Err(_) => None,
            }
        } else {
            None
        };

        let eta = cfg.schedule.eta(cfg.eta0, n);
        let theta = module.params();
        let updated: Vector = theta
            .iter()
            .zip(grad.iter())
            .map(|(t, g)| t - eta * (g + cfg.weight_decay * t))
            .collect();
        let abort = |reason: String, trace: &TrainTrace| TrainError::Aborted {
            step: n,
            reason,
            partial: Box::new(trace.clone()),
        };
        if !updated.is_finite() {
            return Err(abort("non-finite parameters after update".into(), &trace));
        }
        let mut next = module.with_params(&updated).map_err(|e| abort(e.to_string(), &trace))?;
        next.project_spectral().map_err(|e| abort(e.to_string(), &trace))?;
        module = next;

        trace.steps.push(TrainStep {
            step: n,
            eta,
            loss,
            grad_norm: grad.norm2(),
            eps_error,
            cosine_vs_exact: cosine,
            rho_f_lambda,
            forward_wall_time: fwd,
            backward_wall_time: bwd,
        });
        trace.final_params = module.params();
    }
    Ok(trace)
}

/// Number of plain fixed-point steps that bring a contraction with factor
/// `l` from `O(1)` error to below roundoff.
fn roundoff_iterations(l: f64) -> usize {
    ((1e-17f64).ln() / l.ln()).ceil().max(0.0) as usize + 50
}

fn probe_solution(m: &EqModule, u: &Vector, trajectory: bool) -> Result<FixedPointSolution, TrainError> {
    let mut spec = SolverSpec::picard(f64::MIN_POSITIVE, roundoff_iterations(m.target_lipschitz()));
    spec.store_trajectory = trajectory;
    Ok(solve(m, u, &spec, None)?)
}

fn probe_loss(m: &EqModule, u: &Vector, y: &Vector) -> Result<f64, TrainError> {
    let h = probe_solution(m, u, false)?.h_star;
    let r = h.sub(y).expect("same dimension");
    Ok(0.5 * r.dot(&r).expect("same dimension"))
}

/// Maximum relative error between the oracle gradient of `½‖h*(θ) − y‖²` and
/// central finite differences that re-solve the fixed point at each probe.
///
/// Every solve runs plain Picard until roundoff. The relative error of entry
/// `i` is `|g_i − fd_i| / max(|fd_i|, |g_i|, 1e-6 ‖fd‖∞)`.
pub fn finite_difference_check(
    m: &EqModule,
    u: &Vector,
    y: &Vector,
    oracle: &GradOracleSpec,
    eps_fd: f64,
) -> Result<f64, TrainError> {
    oracle.validate()?;
    if !(eps_fd > 0.0) {
        return Err(TrainError::InvalidConfig("eps_fd must be positive".into()));
    }
    let base = probe_solution(m, u, oracle.method == GradMethod::BPTT)?;
    let v = base
        .h_star
        .sub(y)
        .map_err(|e| TrainError::InvalidConfig(e.to_string()))?;
    let g = compute(m, &base, u, &v, oracle, 1.0)?.grad_theta;

    let theta = m.params();
    let mut fd = Vec::with_capacity(theta.len());
    for i in 0..theta.len() {
        let mut plus = theta.clone();
        plus[i] += eps_fd;
        let mut minus = theta.clone();
        minus[i] -= eps_fd;
        let lp = probe_loss(&m.with_params(&plus)?, u, y)?;
        let lm = probe_loss(&m.with_params(&minus)?, u, y)?;
        fd.push((lp - lm) / (2.0 * eps_fd));
    }
    let fd = Vector::from(fd);
    let floor = 1e-6 * fd.norm_inf();
    Ok(g.iter()
        .zip(fd.iter())
        .map(|(gi, fi)| {
            let denom = fi.abs().max(gi.abs()).max(floor);
            if denom == 0.0 {
                0.0
            } else {
                (gi - fi).abs() / denom
            }
        })
        .fold(0.0, f64::max))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::parse_config;
    use crate::diagnostics::standard_normal_vector;
    use approx::assert_abs_diff_eq;

    fn small(method: GradOracleSpec, steps: usize) -> TrainConfig {
        TrainConfig {
            oracle: method,
            steps,
            d: 4,
            n_pairs: 16,
            batch_size: 4,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn dataset_is_seeded() {
        let a = make_dataset(16, 64, 3).unwrap();
        assert_eq!(a.len(), 64);
        assert!(a.iter().all(|(u, y)| u.len() == 16 && y.len() == 16));
        assert_eq!(a, make_dataset(16, 64, 3).unwrap());
        assert_ne!(a, make_dataset(16, 64, 4).unwrap());
        assert!(make_dataset(16, 0, 3).is_err());
    }

    #[test]
    fn inv_sqrt_schedule() {
        for n in 1..500 {
            let eta = Schedule::InvSqrt.eta(0.3, n);
            assert_abs_diff_eq!(eta * (n as f64).sqrt(), 0.3, epsilon = 1e-12);
        }
        assert_eq!(Schedule::Constant.eta(0.3, 77), 0.3);
    }

    #[test]
    fn zero_step_size_keeps_parameters_bitwise() {
        let mut cfg = small(GradOracleSpec::phantom(GradMethod::NPG, 3, 0.5), 20);
        cfg.eta0 = 0.0;
        let init = initial_module(&cfg).unwrap().params();
        let trace = sgd_run(&cfg).unwrap();
        assert_eq!(trace.steps.len(), 20);
        let bits = |v: &Vector| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&trace.final_params), bits(&init));
        assert!(trace.steps[0].loss > 0.0);
    }

    #[test]
    fn spectral_constraint_holds_every_step() {
        let mut cfg = small(GradOracleSpec::ift(), 1);
        cfg.eta0 = 5.0;
        let data = make_dataset(cfg.d, cfg.n_pairs, 0).unwrap();
        let mut m = initial_module(&cfg).unwrap();
        for _ in 0..30 {
            let tr = sgd_run_on(&cfg, m.clone(), &data).unwrap();
            m = m.with_params(&tr.final_params).unwrap();
            let sigma = crate::densemath::power_iteration_sigma(m.weight(), 1000, 1e-12, 0).estimate;
            assert!(sigma <= cfg.target_l * (1.0 + 1e-6), "{sigma}");
        }
    }

    #[test]
    fn scalar_linear_loss_decreases_under_ift() {
        // h* = (a u + c)/(1 − a); with u ≡ 1, y ≡ 1 the loss is a bowl in (a, c).
        let m = EqModule::scalar(ModuleKind::LinearContraction, 0.2, 0.0, 0.9).unwrap();
        let data: Dataset = vec![(Vector::from(vec![1.0]), Vector::from(vec![1.0]))];
        let cfg = TrainConfig {
            oracle: GradOracleSpec::ift(),
            steps: 50,
            batch_size: 1,
            n_pairs: 1,
            d: 1,
            eta0: 0.05,
            kind: ModuleKind::LinearContraction,
            ..TrainConfig::default()
        };
        let losses = sgd_run_on(&cfg, m, &data).unwrap().losses();
        assert!(losses.windows(2).all(|w| w[1] < w[0]), "{losses:?}");
    }

    #[test]
    fn deterministic_runs() {
        let cfg = small(GradOracleSpec::phantom(GradMethod::UPG, 3, 0.5), 10);
        let a = sgd_run(&cfg).unwrap();
        let b = sgd_run(&cfg).unwrap();
        assert_eq!(a.to_table(false), b.to_table(false));
        assert_eq!(a.steps.len(), 10);
    }

    #[test]
    fn tracked_exact_matches_itself_for_ift() {
        let mut cfg = small(GradOracleSpec::ift(), 3);
        cfg.track_exact = true;
        let t = sgd_run(&cfg).unwrap();
        for s in &t.steps {
            assert!(s.eps_error.unwrap() < 1e-8);
            assert!(s.cosine_vs_exact.unwrap() > 1.0 - 1e-12);
            assert!(s.rho_f_lambda.unwrap() <= 0.9 + 1e-6);
        }
    }

    #[test]
    fn fd_ift_exact_small() {
        let m = EqModule::synthetic(ModuleKind::AffineTanh, 8, 0.5, 1).unwrap();
        let u = standard_normal_vector(8, 1, "u");
        let y = standard_normal_vector(8, 1, "y");
        let err = finite_difference_check(&m, &u, &y, &GradOracleSpec::ift(), 1e-5).unwrap();
        assert!(err <= 1e-5, "{err}");
    }

    #[test]
    fn fd_upg_long_unroll() {
        let m = EqModule::synthetic(ModuleKind::AffineTanh, 8, 0.5, 2).unwrap();
        let u = standard_normal_vector(8, 2, "u");
        let y = standard_normal_vector(8, 2, "y");
        let spec = GradOracleSpec::phantom(GradMethod::UPG, 100, 1.0);
        assert!(finite_difference_check(&m, &u, &y, &spec, 1e-5).unwrap() <= 1e-4);
    }

    #[test]
    fn fd_exposes_one_step_bias() {
        let m = EqModule::scalar(ModuleKind::LinearContraction, 0.5, 1.0, 0.5).unwrap();
        let (u, y) = (Vector::from(vec![0.0]), Vector::from(vec![0.0]));
        let spec = GradOracleSpec::phantom(GradMethod::OneStep, 1, 1.0);
        let err = finite_difference_check(&m, &u, &y, &spec, 1e-5).unwrap();
        assert_abs_diff_eq!(err, 0.5, epsilon = 1e-6);
    }

    #[test]
    fn config_text() {
        let (cfg, echo) = parse_config::<TrainConfig>("method=NPG\nk=5\nlambda=0.5\nsteps=10").unwrap();
        assert_eq!(cfg.oracle.k, 5);
        assert_eq!(cfg.steps, 10);
        assert_eq!(cfg.solver, TrainConfig::default().solver);
        assert_eq!(echo["solver_tol"], "1e-8");
        assert!(parse_config::<TrainConfig>("target_l=1").is_err());
    }

    #[test]
    fn trace_table_shapes() {
        let t = sgd_run(&small(GradOracleSpec::ift(), 4)).unwrap();
        assert_eq!(t.to_table(true).header.len(), 9);
        assert_eq!(t.to_table(false).rows.len(), 4);
        assert_eq!(t.window_means(2).len(), 2);
    }
}
