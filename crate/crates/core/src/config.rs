//! Run configuration, seeded random streams and output formatting.
//!
//! Config files are flat `key=value` lines with `#` comments. Every typed
//! config reads its keys through a [`ConfigReader`], which records the value
//! actually used (including defaults) and rejects keys nobody asked for.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::io::Write;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::fpsolvers::{SolverMethod, SolverSpec};
use crate::gradoracles::{AdjointSolver, GradMethod, GradOracleSpec};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Independent generator for `(master_seed, label)`.
///
/// The ChaCha key is derived by hashing the seed together with the label, so
/// a stream depends only on its own name and never on how many draws other
/// streams made or which thread created it.
pub fn rng_stream(master_seed: u64, label: &str) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(master_seed.to_le_bytes());
    hasher.update(label.as_bytes());
    let key: [u8; 32] = hasher.finalize().into();
    ChaCha8Rng::from_seed(key)
}

/// Shortest decimal that parses back to the same `f64`.
pub fn fmt_f64(x: f64) -> String {
    if x.is_nan() {
        "NaN".to_string()
    } else if x.is_infinite() {
        if x > 0.0 { "inf" } else { "-inf" }.to_string()
    } else if x == 0.0 || (1e-5..1e16).contains(&x.abs()) {
        format!("{x}")
    } else {
        format!("{x:e}")
    }
}

pub fn fmt_opt(x: Option<f64>) -> String {
    x.map(fmt_f64).unwrap_or_default()
}

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: expected `key=value`, got `{text}`")]
    Syntax { line: usize, text: String },
    #[error("line {line}: duplicate key `{key}`")]
    Duplicate { line: usize, key: String },
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: key `{key}`: cannot parse `{value}` as {expected}")]
    BadValue {
        line: usize,
        key: String,
        value: String,
        expected: &'static str,
    },
    #[error("{}key `{key}` = {value}: must lie in {range}", line.map(|l| format!("line {l}: ")).unwrap_or_default())]
    Range {
        line: Option<usize>,
        key: String,
        value: String,
        range: String,
    },
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConfigMap {
    entries: BTreeMap<String, (usize, String)>,
}

impl ConfigMap {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut entries = BTreeMap::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line,
                text: content.to_string(),
            })?;
            let key = key.trim();
            if key.is_empty() {
                return Err(ConfigError::Syntax {
                    line,
                    text: content.to_string(),
                });
            }
            if entries
                .insert(key.to_string(), (line, value.trim().to_string()))
                .is_some()
            {
                return Err(ConfigError::Duplicate {
                    line,
                    key: key.to_string(),
                });
            }
        }
        Ok(ConfigMap { entries })
    }

    /// Sets or overrides a key, as done for `--seed`.
    pub fn set(&mut self, key: &str, value: impl Display) {
        let line = self.entries.get(key).map(|e| e.0).unwrap_or(0);
        self.entries.insert(key.to_string(), (line, value.to_string()));
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|(_, v)| v.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn reader(&self) -> ConfigReader<'_> {
        ConfigReader {
            map: self,
            used: BTreeMap::new(),
        }
    }
}

/// Typed access to a [`ConfigMap`] that remembers every value it hands out.
#[derive(Debug)]
pub struct ConfigReader<'a> {
    map: &'a ConfigMap,
    used: BTreeMap<String, String>,
}

fn line_of(map: &ConfigMap, key: &str) -> Option<usize> {
    map.entries.get(key).map(|e| e.0).filter(|l| *l > 0)
}

impl<'a> ConfigReader<'a> {
    fn raw(&self, key: &str) -> Option<(usize, &'a str)> {
        self.map.entries.get(key).map(|(l, v)| (*l, v.as_str()))
    }

    fn parsed<T>(
        &mut self,
        key: &str,
        default: T,
        expected: &'static str,
        parse: impl Fn(&str) -> Option<T>,
        show: impl Fn(&T) -> String,
    ) -> Result<T, ConfigError> {
        let value = match self.raw(key) {
            None => default,
            Some((line, text)) => parse(text).ok_or_else(|| ConfigError::BadValue {
                line,
                key: key.to_string(),
                value: text.to_string(),
                expected,
            })?,
        };
        self.used.insert(key.to_string(), show(&value));
        Ok(value)
    }

    pub fn f64(&mut self, key: &str, default: f64) -> Result<f64, ConfigError> {
        self.parsed(key, default, "a number", |s| s.parse().ok(), |v| fmt_f64(*v))
    }

    pub fn usize(&mut self, key: &str, default: usize) -> Result<usize, ConfigError> {
        self.parsed(
            key,
            default,
            "a non-negative integer",
            |s| s.parse().ok(),
            |v| v.to_string(),
        )
    }

    pub fn u64(&mut self, key: &str, default: u64) -> Result<u64, ConfigError> {
        self.parsed(
            key,
            default,
            "a non-negative integer",
            |s| s.parse().ok(),
            |v| v.to_string(),
        )
    }

    pub fn bool(&mut self, key: &str, default: bool) -> Result<bool, ConfigError> {
        self.parsed(
            key,
            default,
            "true or false",
            |s| match s {
                "true" | "1" | "yes" => Some(true),
                "false" | "0" | "no" => Some(false),
                _ => None,
            },
            |v| v.to_string(),
        )
    }

    pub fn f64_list(&mut self, key: &str, default: &[f64]) -> Result<Vec<f64>, ConfigError> {
        self.parsed(
            key,
            default.to_vec(),
            "a comma-separated list of numbers",
            |s| s.split(',').map(|p| p.trim().parse().ok()).collect(),
            |v| v.iter().map(|x| fmt_f64(*x)).collect::<Vec<_>>().join(","),
        )
    }

    pub fn usize_list(&mut self, key: &str, default: &[usize]) -> Result<Vec<usize>, ConfigError> {
        self.parsed(
            key,
            default.to_vec(),
            "a comma-separated list of integers",
            |s| s.split(',').map(|p| p.trim().parse().ok()).collect(),
            |v| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(","),
        )
    }

    /// Enumerated value via `parse`, echoed through `name`.
    pub fn choice<T: Copy>(
        &mut self,
        key: &str,
        default: T,
        expected: &'static str,
        parse: impl Fn(&str) -> Option<T>,
        name: impl Fn(T) -> &'static str,
    ) -> Result<T, ConfigError> {
        self.parsed(key, default, expected, parse, |v| name(*v).to_string())
    }

    pub fn string(&mut self, key: &str, default: &str) -> Result<String, ConfigError> {
        self.parsed(key, default.to_string(), "text", |s| Some(s.to_string()), |v| v.clone())
    }

    /// Range failure for `key`, citing its line when it came from the file.
    pub fn range_error(&self, key: &str, value: impl Display, range: &str) -> ConfigError {
        ConfigError::Range {
            line: line_of(self.map, key),
            key: key.to_string(),
            value: value.to_string(),
            range: range.to_string(),
        }
    }

    /// Rejects keys that no typed config consumed; returns the resolved echo.
    pub fn finish(self) -> Result<BTreeMap<String, String>, ConfigError> {
        let mut unknown: Vec<(usize, &String)> = self
            .map
            .entries
            .iter()
            .filter(|(k, _)| !self.used.contains_key(*k))
            .map(|(k, (l, _))| (*l, k))
            .collect();
        unknown.sort();
        if let Some((line, key)) = unknown.first() {
            return Err(ConfigError::UnknownKey {
                line: *line,
                key: key.to_string(),
            });
        }
        Ok(self.used)
    }
}

/// A config type readable from `key=value` text.
pub trait FromConfig: Sized {
    fn read(r: &mut ConfigReader<'_>) -> Result<Self, ConfigError>;
}

/// Parses `text` as `T`, failing on unknown keys. Also returns the full echo
/// of resolved values, defaults included.
pub fn parse_config<T: FromConfig>(text: &str) -> Result<(T, BTreeMap<String, String>), ConfigError> {
    let map = ConfigMap::parse(text)?;
    from_map(&map)
}

pub fn from_map<T: FromConfig>(map: &ConfigMap) -> Result<(T, BTreeMap<String, String>), ConfigError> {
    let mut reader = map.reader();
    let value = T::read(&mut reader)?;
    Ok((value, reader.finish()?))
}

fn check_unit_interval(r: &ConfigReader<'_>, key: &str, v: f64, closed_low: bool) -> Result<(), ConfigError> {
    let ok = if closed_low {
        (0.0..=1.0).contains(&v)
    } else {
        v > 0.0 && v <= 1.0
    };
    if ok {
        Ok(())
    } else {
        Err(r.range_error(key, fmt_f64(v), if closed_low { "[0, 1]" } else { "(0, 1]" }))
    }
}

fn check_positive(r: &ConfigReader<'_>, key: &str, v: f64) -> Result<(), ConfigError> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(r.range_error(key, fmt_f64(v), "(0, inf)"))
    }
}

fn check_nonzero(r: &ConfigReader<'_>, key: &str, v: usize) -> Result<(), ConfigError> {
    if v >= 1 {
        Ok(())
    } else {
        Err(r.range_error(key, v, "[1, inf)"))
    }
}

impl FromConfig for GradOracleSpec {
    fn read(r: &mut ConfigReader<'_>) -> Result<Self, ConfigError> {
        let d = GradOracleSpec::default();
        let method = r.choice(
            "method",
            d.method,
            "one of IFTExact, BPTT, UPG, NPG, OneStep",
            GradMethod::parse,
            GradMethod::name,
        )?;
        let k = r.usize("k", d.k)?;
        check_nonzero(r, "k", k)?;
        let lambda = r.f64("lambda", d.lambda)?;
        check_unit_interval(r, "lambda", lambda, false)?;
        let adjoint_solver = r.choice(
            "adjoint_solver",
            d.adjoint_solver,
            "PicardAdjoint or BroydenAdjoint",
            AdjointSolver::parse,
            AdjointSolver::name,
        )?;
        let adjoint_tol = r.f64("adjoint_tol", d.adjoint_tol)?;
        check_positive(r, "adjoint_tol", adjoint_tol)?;
        let adjoint_max_iters = r.usize("adjoint_max_iters", d.adjoint_max_iters)?;
        check_nonzero(r, "adjoint_max_iters", adjoint_max_iters)?;
        let adjoint_damping = r.f64("adjoint_damping", d.adjoint_damping)?;
        check_unit_interval(r, "adjoint_damping", adjoint_damping, false)?;
        Ok(GradOracleSpec {
            method,
            k,
            lambda,
            adjoint_solver,
            adjoint_tol,
            adjoint_max_iters,
            adjoint_damping,
        })
    }
}

impl FromConfig for SolverSpec {
    fn read(r: &mut ConfigReader<'_>) -> Result<Self, ConfigError> {
        read_solver(r, &SolverSpec::default())
    }
}

/// Forward-solver keys, falling back to `defaults`.
pub fn read_solver(r: &mut ConfigReader<'_>, defaults: &SolverSpec) -> Result<SolverSpec, ConfigError> {
    let method = r.choice(
        "solver",
        defaults.method,
        "one of Picard, DampedPicard, Broyden",
        SolverMethod::parse,
        SolverMethod::name,
    )?;
    let tol = r.f64("solver_tol", defaults.tol)?;
    check_positive(r, "solver_tol", tol)?;
    let max_iters = r.usize("solver_max_iters", defaults.max_iters)?;
    check_nonzero(r, "solver_max_iters", max_iters)?;
    let damping = r.f64("solver_damping", defaults.damping)?;
    check_unit_interval(r, "solver_damping", damping, false)?;
    let broyden_memory = r.usize("broyden_memory", defaults.broyden_memory)?;
    check_nonzero(r, "broyden_memory", broyden_memory)?;
    Ok(SolverSpec {
        method,
        tol,
        max_iters,
        damping,
        broyden_memory,
        store_trajectory: defaults.store_trajectory,
    })
}

/// First 16 hex digits of SHA-256 over the sorted `key=value` echo.
pub fn config_hash(echo: &BTreeMap<String, String>) -> String {
    let mut hasher = Sha256::new();
    for (k, v) in echo {
        hasher.update(k.as_bytes());
        hasher.update(b"=");
        hasher.update(v.as_bytes());
        hasher.update(b"\n");
    }
    let digest = hasher.finalize();
    digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

pub fn unix_millis() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    pub build_id: String,
    pub seed: u64,
    pub config_hash: String,
    /// Every key the run resolved, defaults included.
    pub config: BTreeMap<String, String>,
    pub started_unix_ms: u64,
    pub finished_unix_ms: u64,
    pub rows: usize,
    pub flagged_failures: usize,
}

impl RunManifest {
    pub fn new(command: &str, seed: u64, config: BTreeMap<String, String>) -> Self {
        RunManifest {
            command: command.to_string(),
            tool_version: TOOL_VERSION.to_string(),
            build_id: format!("{}-{}", env!("CARGO_PKG_NAME"), TOOL_VERSION),
            seed,
            config_hash: config_hash(&config),
            config,
            started_unix_ms: unix_millis(),
            finished_unix_ms: 0,
            rows: 0,
            flagged_failures: 0,
        }
    }

    /// The config echo as `key=value` text; feeding it back reproduces the run.
    pub fn config_text(&self) -> String {
        self.config.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }
}

/// A rectangular table with a fixed header, written as CSV.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(header: &[&str]) -> Self {
        Table {
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len(), "row width");
        self.rows.push(row);
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name)
    }

    pub fn write_to<W: Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(out);
        w.write_record(&self.header)?;
        for row in &self.rows {
            w.write_record(row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("in-memory CSV");
        String::from_utf8(buf).expect("CSV is UTF-8")
    }

    pub fn write_file(&self, path: &Path) -> std::io::Result<()> {
        std::fs::write(path, self.to_csv_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn rng_streams_are_reproducible_and_distinct() {
        let a: Vec<u64> = rng_stream(7, "x").random_iter().take(1000).collect();
        let b: Vec<u64> = rng_stream(7, "x").random_iter().take(1000).collect();
        let c: Vec<u64> = rng_stream(7, "y").random_iter().take(1000).collect();
        let d: Vec<u64> = rng_stream(8, "x").random_iter().take(1000).collect();
        assert_eq!(a, b);
        assert!(a.iter().zip(&c).all(|(x, y)| x != y));
        assert_ne!(a, d);
    }

    #[test]
    fn stream_independent_of_creation_order() {
        let first: f64 = rng_stream(1, "instance/3").random();
        let _ = rng_stream(1, "instance/0").random::<f64>();
        let again: f64 = rng_stream(1, "instance/3").random();
        assert_eq!(first.to_bits(), again.to_bits());
    }

    #[test]
    fn float_format_round_trips() {
        for x in [
            0.1,
            1.0 / 3.0,
            1e-300,
            5e-324,
            1e20,
            -2.5,
            123456.789,
            1e-5,
            9.99e-6,
            f64::MAX,
        ] {
            let s = fmt_f64(x);
            assert_eq!(s.parse::<f64>().unwrap().to_bits(), x.to_bits(), "{s}");
        }
        assert_eq!(fmt_f64(0.5), "0.5");
        assert_eq!(fmt_f64(1e-7), "1e-7");
        assert_eq!(fmt_f64(f64::NAN), "NaN");
        assert_eq!(fmt_f64(f64::NEG_INFINITY), "-inf");
    }

    #[test]
    fn oracle_spec_from_text() {
        let (spec, echo) = parse_config::<GradOracleSpec>("lambda=0.5\nk=5").unwrap();
        assert_eq!(spec.k, 5);
        assert_eq!(spec.lambda, 0.5);
        assert_eq!(spec.method, GradMethod::IFTExact);
        assert_eq!(echo["adjoint_max_iters"], "500");
        assert_eq!(echo["method"], "IFTExact");
    }

    #[test]
    fn empty_file_gives_defaults() {
        let (spec, _) = parse_config::<GradOracleSpec>("").unwrap();
        assert_eq!(spec, GradOracleSpec::default());
        let (solver, _) = parse_config::<SolverSpec>("# only a comment\n\n").unwrap();
        assert_eq!(solver, SolverSpec::default());
    }

    #[test]
    fn lambda_out_of_range() {
        let err = parse_config::<GradOracleSpec>("lambda=1.5").unwrap_err();
        assert!(matches!(err, ConfigError::Range { line: Some(1), .. }));
        assert!(err.to_string().contains("(0, 1]"), "{err}");
    }

    #[test]
    fn unknown_key_cites_line() {
        let err = parse_config::<GradOracleSpec>("k=2\n# c\nlamda=0.5").unwrap_err();
        assert_eq!(
            err,
            ConfigError::UnknownKey {
                line: 3,
                key: "lamda".into()
            }
        );
    }

    #[test]
    fn bad_values_cite_line_and_key() {
        let err = parse_config::<GradOracleSpec>("\nk=two").unwrap_err();
        assert!(matches!(err, ConfigError::BadValue { line: 2, .. }));
        assert!(err.to_string().contains("`k`"));
        assert!(matches!(
            ConfigMap::parse("novalue"),
            Err(ConfigError::Syntax { line: 1, .. })
        ));
        assert!(matches!(
            ConfigMap::parse("k=1\nk=2"),
            Err(ConfigError::Duplicate { line: 2, .. })
        ));
    }

    #[test]
    fn echo_reparses_to_same_config() {
        let (spec, echo) = parse_config::<GradOracleSpec>("method=npg\nk=5\nlambda=0.5").unwrap();
        let text: String = echo.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
        let (again, echo2) = parse_config::<GradOracleSpec>(&text).unwrap();
        assert_eq!(spec, again);
        assert_eq!(config_hash(&echo), config_hash(&echo2));
    }

    #[test]
    fn manifest_round_trips() {
        let (_, echo) = parse_config::<SolverSpec>("solver_tol=1e-7").unwrap();
        let mut m = RunManifest::new("fd-check", 42, echo);
        m.finished_unix_ms = m.started_unix_ms + 5;
        let back = RunManifest::from_json(&m.to_json()).unwrap();
        assert_eq!(back, m);
        assert_eq!(m.config_hash.len(), 16);
    }

    #[test]
    fn csv_quotes_when_needed() {
        let mut t = Table::new(&["a", "b"]);
        t.push(vec!["x,y".into(), fmt_f64(0.25)]);
        assert_eq!(t.to_csv_string(), "a,b\n\"x,y\",0.25\n");
    }
}
