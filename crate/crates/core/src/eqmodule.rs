//! The equilibrium map `F(h, z)` with `z = [u, θ]`.
//!
//! Two families are supported, both acting on `h + u`:
//!
//! * `LinearContraction`: `F(h, u) = W (h + u) + b`
//! * `AffineTanh`: `F(h, u) = tanh(W (h + u) + b)`
//!
//! # Jacobian convention
//!
//! Dense Jacobians returned by [`EqModule::materialize_jacobians`] use the
//! *transposed* layout `(∂a/∂b)[i][j] = ∂a_j/∂b_i`. With that layout the
//! backward formulas read as plain products, e.g. `∂L/∂θ = J_θ (I − J_h)⁻¹ v`.
//! Concretely `J_h · v` equals [`EqModule::vjp_h`]`(v)`, which is `Jᵀ v` for
//! the ordinary Jacobian `J[j][i] = ∂F_j/∂h_i`. All code paths go through the
//! VJPs; the dense matrices are for diagnostics only.
//!
//! Parameters are flattened as `θ = [W row-major; b]`.

use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{fmt_f64, rng_stream};
use crate::densemath::{svd_extremes, LinalgError, Mat, Vector};

/// Largest state dimension for which dense Jacobians are built.
pub const MAX_DENSE_DIM: usize = 256;

/// Relative excess of `‖W‖₂` over the target tolerated without rescaling.
const PROJECTION_SLACK: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModuleError {
    #[error("{what}: expected dimension {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("target Lipschitz constant {0} outside (0, 1)")]
    Lipschitz(f64),
    #[error("weight spectral norm {sigma} exceeds target Lipschitz constant {target}")]
    NotContractive { sigma: f64, target: f64 },
    #[error("dimension {d} exceeds dense limit {limit}")]
    TooLarge { d: usize, limit: usize },
    #[error("state dimension must be at least 1")]
    Empty,
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error("module text line {line}: {reason}")]
    Parse { line: usize, reason: String },
}

pub type Result<T> = std::result::Result<T, ModuleError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ModuleKind {
    LinearContraction,
    AffineTanh,
}

impl ModuleKind {
    pub fn name(self) -> &'static str {
        match self {
            ModuleKind::LinearContraction => "LinearContraction",
            ModuleKind::AffineTanh => "AffineTanh",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "linearcontraction" | "linear" => Some(ModuleKind::LinearContraction),
            "affinetanh" | "tanh" => Some(ModuleKind::AffineTanh),
            _ => None,
        }
    }
}

/// Spectrally normalized single-layer equilibrium map.
#[derive(Debug, Clone, PartialEq)]
pub struct EqModule {
    kind: ModuleKind,
    w: Mat,
    b: Vector,
    target_lipschitz: f64,
    /// Spectral norm of the weight before the last normalization.
    sigma_cache: f64,
    seed: Option<u64>,
}

fn check_dim(what: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(ModuleError::Dimension { what, expected, got });
    }
    Ok(())
}

fn check_lipschitz(l: f64) -> Result<()> {
    if !(l > 0.0 && l < 1.0) {
        return Err(ModuleError::Lipschitz(l));
    }
    Ok(())
}

impl EqModule {
    /// Builds a module from explicit weights. The weight must already satisfy
    /// `‖W‖₂ ≤ target_lipschitz`; use [`EqModule::project_spectral`] to enforce it.
    pub fn new(kind: ModuleKind, w: Mat, b: Vector, target_lipschitz: f64) -> Result<Self> {
        check_lipschitz(target_lipschitz)?;
        let d = b.len();
        if d == 0 {
            return Err(ModuleError::Empty);
        }
        check_dim("weight rows", d, w.rows())?;
        check_dim("weight cols", d, w.cols())?;
        if !b.is_finite() {
            return Err(LinalgError::NonFinite { index: 0 }.into());
        }
        let sigma = svd_extremes(&w)?.sigma_max;
        if sigma > target_lipschitz * (1.0 + 1e-9) {
            return Err(ModuleError::NotContractive {
                sigma,
                target: target_lipschitz,
            });
        }
        Ok(EqModule {
            kind,
            w,
            b,
            target_lipschitz,
            sigma_cache: sigma,
            seed: None,
        })
    }

    /// Scalar module `F(h, u) = a (h + u) + c` (or its tanh counterpart).
    pub fn scalar(kind: ModuleKind, a: f64, c: f64, target_lipschitz: f64) -> Result<Self> {
        Self::new(kind, Mat::new(1, 1, vec![a])?, Vector::from(vec![c]), target_lipschitz)
    }

    /// Synthetic instance: a seeded random symmetric weight
    /// `S = (R + Rᵀ)/2`, `R_ij ~ U[−1, 1]`, rescaled so that `‖W‖₂ = target_L`
    /// exactly, and a bias with entries `~ U[−0.1, 0.1]`.
    pub fn synthetic(kind: ModuleKind, d: usize, target_l: f64, seed: u64) -> Result<Self> {
        check_lipschitz(target_l)?;
        if d == 0 {
            return Err(ModuleError::Empty);
        }
        let mut rng = rng_stream(seed, "eqmodule/weights");
        let r: Vec<f64> = (0..d * d).map(|_| rng.random_range(-1.0..=1.0)).collect();
        let mut s = Mat::zeros(d, d);
        for i in 0..d {
            for j in 0..d {
                s[(i, j)] = 0.5 * (r[i * d + j] + r[j * d + i]);
            }
        }
        let mut rng = rng_stream(seed, "eqmodule/bias");
        let b: Vector = (0..d).map(|_| rng.random_range(-0.1..=0.1)).collect();
        let sigma = svd_extremes(&s)?.sigma_max;
        let w = s.scaled(target_l / sigma);
        Ok(EqModule {
            kind,
            w,
            b,
            target_lipschitz: target_l,
            sigma_cache: sigma,
            seed: Some(seed),
        })
    }

    pub fn kind(&self) -> ModuleKind {
        self.kind
    }

    pub fn dim(&self) -> usize {
        self.b.len()
    }

    pub fn param_dim(&self) -> usize {
        self.dim() * self.dim() + self.dim()
    }

    pub fn weight(&self) -> &Mat {
        &self.w
    }

    pub fn bias(&self) -> &Vector {
        &self.b
    }

    pub fn target_lipschitz(&self) -> f64 {
        self.target_lipschitz
    }

    pub fn sigma_cache(&self) -> f64 {
        self.sigma_cache
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    /// Flattened `θ = [W; b]`.
    pub fn params(&self) -> Vector {
        let mut p = self.w.data().to_vec();
        p.extend_from_slice(&self.b);
        Vector::from(p)
    }

    /// Copy of the module with new parameters, without renormalization.
    pub fn with_params(&self, theta: &[f64]) -> Result<Self> {
        check_dim("parameter vector", self.param_dim(), theta.len())?;
        let d = self.dim();
        let w = Mat::new(d, d, theta[..d * d].to_vec())?;
        let b = Vector::from(theta[d * d..].to_vec());
        if !b.is_finite() {
            return Err(LinalgError::NonFinite { index: d * d }.into());
        }
        Ok(EqModule { w, b, ..self.clone() })
    }

    /// Rescales `W` so that `‖W‖₂ ≤ target_lipschitz`; a weight already inside
    /// the ball (up to SVD roundoff) is left untouched bit for bit. Returns the
    /// pre-projection spectral norm.
    pub fn project_spectral(&mut self) -> Result<f64> {
        let sigma = svd_extremes(&self.w)?.sigma_max;
        self.sigma_cache = sigma;
        if sigma > self.target_lipschitz * (1.0 + PROJECTION_SLACK) {
            self.w = self.w.scaled(self.target_lipschitz / sigma);
        }
        Ok(sigma)
    }

    fn check_state(&self, h: &[f64], u: &[f64]) -> Result<()> {
        check_dim("state h", self.dim(), h.len())?;
        check_dim("input u", self.dim(), u.len())
    }

    fn preactivation(&self, h: &[f64], u: &[f64]) -> Vector {
        let x: Vector = h.iter().zip(u).map(|(a, b)| a + b).collect();
        let mut z = self.w.matvec_unchecked(&x);
        z.iter_mut().zip(self.b.iter()).for_each(|(z, b)| *z += b);
        z
    }

    pub fn forward(&self, h: &[f64], u: &[f64]) -> Result<Vector> {
        self.check_state(h, u)?;
        Ok(self.forward_unchecked(h, u))
    }

    pub(crate) fn forward_unchecked(&self, h: &[f64], u: &[f64]) -> Vector {
        let mut z = self.preactivation(h, u);
        if self.kind == ModuleKind::AffineTanh {
            z.iter_mut().for_each(|x| *x = x.tanh());
        }
        z
    }

    /// Freezes the local derivative information at `(h, u)` so that repeated
    /// VJPs at the same point cost one matrix-vector product each.
    pub fn linearize(&self, h: &[f64], u: &[f64]) -> Result<Linearization<'_>> {
        self.check_state(h, u)?;
        Ok(self.linearize_unchecked(h, u))
    }

    pub(crate) fn linearize_unchecked(&self, h: &[f64], u: &[f64]) -> Linearization<'_> {
        let input: Vector = h.iter().zip(u).map(|(a, b)| a + b).collect();
        let slope = match self.kind {
            ModuleKind::LinearContraction => None,
            ModuleKind::AffineTanh => Some(
                self.preactivation(h, u)
                    .iter()
                    .map(|z| {
                        let t = z.tanh();
                        1.0 - t * t
                    })
                    .collect(),
            ),
        };
        Linearization {
            module: self,
            input,
            slope,
        }
    }

    /// `(∂F/∂h) v` in the transposed convention, i.e. `Wᵀ (φ′ ⊙ v)`.
    pub fn vjp_h(&self, h: &[f64], u: &[f64], v: &[f64]) -> Result<Vector> {
        check_dim("cotangent v", self.dim(), v.len())?;
        Ok(self.linearize(h, u)?.vjp_h(v))
    }

    /// Same as [`EqModule::vjp_h`]: `F` only sees `h + u`.
    pub fn vjp_u(&self, h: &[f64], u: &[f64], v: &[f64]) -> Result<Vector> {
        check_dim("cotangent v", self.dim(), v.len())?;
        Ok(self.linearize(h, u)?.vjp_u(v))
    }

    /// `(∂F/∂θ) v`, flattened as `[grad_W; grad_b]`.
    pub fn vjp_theta(&self, h: &[f64], u: &[f64], v: &[f64]) -> Result<Vector> {
        check_dim("cotangent v", self.dim(), v.len())?;
        Ok(self.linearize(h, u)?.vjp_theta(v))
    }

    /// Dense `(J_h, J_θ)` at `(h, u)` in the transposed convention:
    /// `J_h` is `d × d`, `J_θ` is `(d² + d) × d`. Column `j` of each is the
    /// VJP of the basis vector `e_j`.
    pub fn materialize_jacobians(&self, h: &[f64], u: &[f64]) -> Result<(Mat, Mat)> {
        let d = self.dim();
        if d > MAX_DENSE_DIM {
            return Err(ModuleError::TooLarge {
                d,
                limit: MAX_DENSE_DIM,
            });
        }
        let lin = self.linearize(h, u)?;
        Ok(lin.dense())
    }

    /// Text serialization: a header line, `d` weight rows, one bias line.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let seed = self.seed.map_or_else(|| "none".to_string(), |s| s.to_string());
        let _ = writeln!(
            out,
            "eqmodule v1 kind={} d={} lipschitz={} sigma={} seed={}",
            self.kind.name(),
            self.dim(),
            fmt_f64(self.target_lipschitz),
            fmt_f64(self.sigma_cache),
            seed
        );
        for r in 0..self.dim() {
            let row: Vec<String> = self.w.row(r).iter().map(|x| fmt_f64(*x)).collect();
            let _ = writeln!(out, "{}", row.join(" "));
        }
        let b: Vec<String> = self.b.iter().map(|x| fmt_f64(*x)).collect();
        let _ = writeln!(out, "{}", b.join(" "));
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let perr = |line: usize, reason: String| ModuleError::Parse { line, reason };
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, header) = lines.next().ok_or_else(|| perr(1, "empty input".into()))?;
        let mut fields = header.split_whitespace();
        if fields.next() != Some("eqmodule") || fields.next() != Some("v1") {
            return Err(perr(1, "missing 'eqmodule v1' header".into()));
        }
        let (mut kind, mut d, mut lip, mut sigma, mut seed) = (None, None, None, None, None);
        for f in fields {
            let (k, v) = f
                .split_once('=')
                .ok_or_else(|| perr(1, format!("bad header field '{f}'")))?;
            match k {
                "kind" => kind = ModuleKind::parse(v),
                "d" => d = v.parse::<usize>().ok(),
                "lipschitz" => lip = v.parse::<f64>().ok(),
                "sigma" => sigma = v.parse::<f64>().ok(),
                "seed" => seed = Some(if v == "none" { None } else { v.parse::<u64>().ok() }),
                _ => return Err(perr(1, format!("unknown header field '{k}'"))),
            }
        }
        let kind = kind.ok_or_else(|| perr(1, "missing or bad kind".into()))?;
        let d = d.ok_or_else(|| perr(1, "missing or bad d".into()))?;
        let lip = lip.ok_or_else(|| perr(1, "missing or bad lipschitz".into()))?;
        let mut parse_row = |what: &str| -> Result<Vec<f64>> {
            let (i, l) = lines
                .next()
                .ok_or_else(|| perr(0, format!("truncated input, expected {what}")))?;
            let row = l
                .split_whitespace()
                .map(|x| x.parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| perr(i + 1, e.to_string()))?;
            if row.len() != d {
                return Err(perr(i + 1, format!("expected {d} values, got {}", row.len())));
            }
            Ok(row)
        };
        let mut w = Vec::with_capacity(d * d);
        for _ in 0..d {
            w.extend(parse_row("weight row")?);
        }
        let b = parse_row("bias")?;
        let mut m = EqModule::new(kind, Mat::new(d, d, w)?, Vector::from(b), lip)?;
        m.seed = seed.flatten();
        if let Some(s) = sigma {
            m.sigma_cache = s;
        }
        Ok(m)
    }
}

/// Derivative information of an [`EqModule`] frozen at one point `(h, u)`.
#[derive(Debug, Clone)]
pub struct Linearization<'m> {
    module: &'m EqModule,
    /// `h + u`
    input: Vector,
    /// `φ′(W (h + u) + b)`; `None` for the linear family.
    slope: Option<Vector>,
}

impl Linearization<'_> {
    pub fn dim(&self) -> usize {
        self.input.len()
    }

    fn gated(&self, v: &[f64]) -> Vector {
        match &self.slope {
            None => Vector::from(v.to_vec()),
            Some(s) => s.iter().zip(v).map(|(a, b)| a * b).collect(),
        }
    }

    pub fn vjp_h(&self, v: &[f64]) -> Vector {
        self.module.w.matvec_transpose_unchecked(&self.gated(v))
    }

    pub fn vjp_u(&self, v: &[f64]) -> Vector {
        self.vjp_h(v)
    }

    pub fn vjp_theta(&self, v: &[f64]) -> Vector {
        let g = self.gated(v);
        let d = self.dim();
        let mut out = Vec::with_capacity(d * d + d);
        for gi in g.iter() {
            out.extend(self.input.iter().map(|x| gi * x));
        }
        out.extend_from_slice(&g);
        Vector::from(out)
    }

    /// `λ vjp_h(v) + (1 − λ) v`: the VJP of the damped map `F_λ`.
    pub fn damped_vjp_h(&self, v: &[f64], lambda: f64) -> Vector {
        let mut out = self.vjp_h(v);
        if lambda != 1.0 {
            out.iter_mut()
                .zip(v)
                .for_each(|(o, vi)| *o = lambda * *o + (1.0 - lambda) * vi);
        }
        out
    }

    pub fn dense(&self) -> (Mat, Mat) {
        let d = self.dim();
        let (mut jh, mut jt) = (Vec::with_capacity(d), Vec::with_capacity(d));
        for j in 0..d {
            let e = Vector::basis(d, j);
            jh.push(self.vjp_h(&e));
            jt.push(self.vjp_theta(&e));
        }
        let p = d * d + d;
        (
            Mat::from_columns(d, &jh).expect("columns have length d"),
            Mat::from_columns(p, &jt).expect("columns have length d^2 + d"),
        )
    }
}
