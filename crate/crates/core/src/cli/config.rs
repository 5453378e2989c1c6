//! Experiment configuration files.
//!
//! A configuration is a TOML file of flat key-value pairs grouped under
//! section headers:
//!
//! ```text
//! [experiment]  kind, seed, replications, parallel, checkpoints, scan
//! [problem]     kind = "quadratic" | "regression"; a, b (inline) or csv
//! [schedule]    step, eta, mu, delta, start_time, iterations
//! [delay]       kind = "none" | "constant" | "uniform" | "pmf"; max, pmf, warmup
//! [noise]       batch, sampling, model = "sampled" | "zero" | "constant"; matrix
//! [initial]     x0, history
//! [bounds]      envelope, radius, lambda, calibration_replications
//! ```
//!
//! Unknown keys and missing required keys are all reported at once, with the
//! line they appear on where there is one.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use sha2::{Digest, Sha256};
use toml::{Table, Value};

use crate::discrete::{DelayKind, DelaySchedule, StepKind, StepSchedule};
use crate::harness::{BoundSettings, EnvelopeKind, Execution, ExperimentConfig, StudyKind};
use crate::problems::{quadratic_example, LinearRegression, NoiseModel, Problem, Sampling};
use crate::trajectory::HistorySegment;

const SCHEMA: &[(&str, &[&str])] = &[
    ("experiment", &["kind", "seed", "replications", "parallel", "checkpoints", "scan"]),
    ("problem", &["kind", "a", "b", "csv"]),
    ("schedule", &["step", "eta", "mu", "delta", "start_time", "iterations"]),
    ("delay", &["kind", "max", "pmf", "warmup"]),
    ("noise", &["batch", "sampling", "model", "matrix"]),
    ("initial", &["x0", "history"]),
    ("bounds", &["envelope", "radius", "lambda", "calibration_replications"]),
];

/// Every problem found in a configuration file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError {
    pub problems: Vec<String>,
}

impl ConfigError {
    fn one(msg: impl Into<String>) -> Self {
        ConfigError {
            problems: vec![msg.into()],
        }
    }
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "invalid configuration:")?;
        for p in &self.problems {
            writeln!(f, "  - {p}")?;
        }
        Ok(())
    }
}

impl std::error::Error for ConfigError {}

/// Where the objective comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum ProblemSource {
    /// `F(x) = ½(x+1)² + ½(x−1)²` averaged, i.e. `a = [1, 1]`, `b = [−1, 1]`.
    Quadratic,
    Inline { a: DMatrix<f64>, b: DVector<f64> },
    /// CSV rows `a_i…, b_i`; relative paths resolve against the config file.
    Csv(PathBuf),
}

/// A parsed configuration with everything resolved.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: ExperimentConfig,
    pub source: ProblemSource,
    /// Seed given in the file, if any.
    pub seed: Option<u64>,
    /// SHA-256 of the file contents, hex encoded.
    pub sha256: String,
}

/// Reads and validates a configuration file.
pub fn load_config(path: &Path) -> Result<LoadedConfig, ConfigError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| ConfigError::one(format!("cannot read {}: {e}", path.display())))?;
    let base = path.parent().unwrap_or(Path::new("."));
    parse_config(&text, base)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Parses configuration text; `base` resolves relative CSV paths.
pub fn parse_config(text: &str, base: &Path) -> Result<LoadedConfig, ConfigError> {
    let root: Table = text
        .parse()
        .map_err(|e: toml::de::Error| ConfigError::one(format!("syntax error: {e}")))?;
    let mut r = Reader {
        text,
        root: &root,
        errors: Vec::new(),
    };
    r.check_schema();
    let parsed = r.build(base);
    match parsed {
        Some((config, source, seed)) if r.errors.is_empty() => {
            if let Err(e) = config.validate() {
                return Err(ConfigError::one(e.to_string()));
            }
            Ok(LoadedConfig {
                config,
                source,
                seed,
                sha256: sha256_hex(text.as_bytes()),
            })
        }
        _ => Err(ConfigError { problems: r.errors }),
    }
}

struct Reader<'a> {
    text: &'a str,
    root: &'a Table,
    errors: Vec<String>,
}

fn type_name(v: &Value) -> &'static str {
    v.type_str()
}

impl<'a> Reader<'a> {
    /// Line (1-based) where `key` is assigned inside `[section]`.
    fn line_of(&self, section: &str, key: Option<&str>) -> Option<usize> {
        let mut current = String::new();
        for (i, line) in self.text.lines().enumerate() {
            let t = line.trim();
            if let Some(rest) = t.strip_prefix('[') {
                current = rest.trim_end_matches(']').trim().to_string();
                if key.is_none() && current == section {
                    return Some(i + 1);
                }
                continue;
            }
            if let Some(k) = key {
                if current == section {
                    if let Some((lhs, _)) = t.split_once('=') {
                        if lhs.trim().trim_matches('"') == k {
                            return Some(i + 1);
                        }
                    }
                }
            }
        }
        None
    }

    fn err(&mut self, section: &str, key: &str, msg: impl fmt::Display) {
        let at = match self.line_of(section, Some(key)) {
            Some(l) => format!("line {l}: "),
            None => String::new(),
        };
        self.errors.push(format!("{at}[{section}] {key}: {msg}"));
    }

    fn check_schema(&mut self) {
        let mut unknown = Vec::new();
        for (name, value) in self.root {
            let Some((_, keys)) = SCHEMA.iter().find(|(s, _)| s == name) else {
                let line = if value.is_table() {
                    self.line_of(name, None)
                } else {
                    self.line_of("", Some(name))
                };
                let at = line.map(|l| format!("line {l}: ")).unwrap_or_default();
                unknown.push(format!("{at}unknown section or key `{name}`"));
                continue;
            };
            let Some(table) = value.as_table() else {
                unknown.push(format!("`{name}` must be a section"));
                continue;
            };
            for key in table.keys() {
                if !keys.contains(&key.as_str()) {
                    let at = self
                        .line_of(name, Some(key))
                        .map(|l| format!("line {l}: "))
                        .unwrap_or_default();
                    unknown.push(format!(
                        "{at}unknown key `{key}` in [{name}] (allowed: {})",
                        keys.join(", ")
                    ));
                }
            }
        }
        self.errors.extend(unknown);
    }

    fn get(&self, section: &str, key: &str) -> Option<&'a Value> {
        self.root.get(section)?.as_table()?.get(key)
    }

    fn missing(&mut self, section: &str, key: &str) {
        self.errors.push(format!("missing required key [{section}] {key}"));
    }

    fn string(&mut self, section: &str, key: &str) -> Option<&'a str> {
        let v = self.get(section, key)?;
        match v.as_str() {
            Some(s) => Some(s),
            None => {
                self.err(section, key, format!("expected a string, found {}", type_name(v)));
                None
            }
        }
    }

    fn float(&mut self, section: &str, key: &str) -> Option<f64> {
        let v = self.get(section, key)?;
        match as_float(v) {
            Some(x) => Some(x),
            None => {
                self.err(section, key, format!("expected a number, found {}", type_name(v)));
                None
            }
        }
    }

    fn count(&mut self, section: &str, key: &str) -> Option<usize> {
        let v = self.get(section, key)?;
        match v.as_integer() {
            Some(i) if i >= 0 => Some(i as usize),
            _ => {
                self.err(section, key, "expected a nonnegative integer");
                None
            }
        }
    }

    fn flag(&mut self, section: &str, key: &str) -> Option<bool> {
        let v = self.get(section, key)?;
        match v.as_bool() {
            Some(b) => Some(b),
            None => {
                self.err(section, key, format!("expected true or false, found {}", type_name(v)));
                None
            }
        }
    }

    fn floats(&mut self, section: &str, key: &str) -> Option<Vec<f64>> {
        let v = self.get(section, key)?;
        let out: Option<Vec<f64>> = v.as_array().and_then(|a| a.iter().map(as_float).collect());
        if out.is_none() {
            self.err(section, key, "expected an array of numbers");
        }
        out
    }

    fn counts(&mut self, section: &str, key: &str) -> Option<Vec<usize>> {
        let v = self.get(section, key)?;
        let out: Option<Vec<usize>> = v.as_array().and_then(|a| {
            a.iter()
                .map(|x| x.as_integer().filter(|i| *i >= 0).map(|i| i as usize))
                .collect()
        });
        if out.is_none() {
            self.err(section, key, "expected an array of nonnegative integers");
        }
        out
    }

    fn rows(&mut self, section: &str, key: &str) -> Option<Vec<Vec<f64>>> {
        let v = self.get(section, key)?;
        let out: Option<Vec<Vec<f64>>> = v.as_array().and_then(|rows| {
            rows.iter()
                .map(|row| row.as_array().and_then(|r| r.iter().map(as_float).collect()))
                .collect()
        });
        match out {
            Some(rows) if !rows.is_empty() && rows.iter().all(|r| r.len() == rows[0].len() && !r.is_empty()) => {
                Some(rows)
            }
            _ => {
                self.err(section, key, "expected a non-empty rectangular array of number arrays");
                None
            }
        }
    }

    fn choice<T: Copy>(&mut self, section: &str, key: &str, options: &[(&str, T)]) -> Option<T> {
        let s = self.string(section, key)?;
        match options.iter().find(|(n, _)| *n == s) {
            Some((_, v)) => Some(*v),
            None => {
                let names: Vec<&str> = options.iter().map(|(n, _)| *n).collect();
                self.err(section, key, format!("unknown value `{s}` (expected one of {})", names.join(", ")));
                None
            }
        }
    }

    fn build(&mut self, base: &Path) -> Option<(ExperimentConfig, ProblemSource, Option<u64>)> {
        let kinds: Vec<(&str, StudyKind)> = StudyKind::ALL.iter().map(|k| (k.name(), *k)).collect();
        let kind = self.choice("experiment", "kind", &kinds);
        if self.get("experiment", "kind").is_none() {
            self.missing("experiment", "kind");
        }
        let seed = self.get("experiment", "seed").and_then(|v| match v.as_integer() {
            Some(i) if i >= 0 => Some(i as u64),
            _ => None,
        });
        if self.get("experiment", "seed").is_some() && seed.is_none() {
            self.err("experiment", "seed", "expected a nonnegative integer");
        }
        let replications = self.count("experiment", "replications").unwrap_or(1);
        let parallel = self.flag("experiment", "parallel").unwrap_or(true);
        let checkpoints = self.floats("experiment", "checkpoints").unwrap_or_default();
        let scan = self.counts("experiment", "scan").unwrap_or_default();

        let problem = self.problem(base);
        let dim = problem.as_ref().map(|(p, _)| p.dim());
        let step = self.step(problem.as_ref().map(|(p, _)| p.strong_convexity()));
        let delta = self.float("schedule", "delta");
        let start_time = self.float("schedule", "start_time");
        let iterations = self.count("schedule", "iterations");
        if self.get("schedule", "iterations").is_none() {
            self.missing("schedule", "iterations");
        }

        let delay = self.delay();
        let batch = self.count("noise", "batch").unwrap_or(1);
        let sampling = self
            .choice(
                "noise",
                "sampling",
                &[
                    ("with-replacement", Sampling::WithReplacement),
                    ("without-replacement", Sampling::WithoutReplacement),
                ],
            )
            .unwrap_or_default();
        let noise = self.noise(dim, batch);
        let history = self.history(dim);
        let bounds = self.bounds();
        let (problem, source) = problem?;

        let mut cfg = ExperimentConfig::new(kind?, problem, step?, history.as_ref()?.initial().clone(), iterations?);
        cfg.history = history?;
        cfg.delay = delay?;
        cfg.batch = batch;
        cfg.sampling = sampling;
        cfg.noise = noise?;
        cfg.delta = delta;
        cfg.start_time = start_time;
        cfg.replications = replications;
        cfg.seed = seed.unwrap_or(0);
        cfg.checkpoints = checkpoints;
        cfg.scan = scan;
        cfg.execution = if parallel { Execution::Parallel } else { Execution::Serial };
        cfg.bounds = bounds?;
        Some((cfg, source, seed))
    }

    fn problem(&mut self, base: &Path) -> Option<(LinearRegression, ProblemSource)> {
        let kind = self.string("problem", "kind");
        if self.get("problem", "kind").is_none() {
            self.missing("problem", "kind");
            return None;
        }
        match kind? {
            "quadratic" => Some((quadratic_example(), ProblemSource::Quadratic)),
            "regression" => {
                if let Some(path) = self.string("problem", "csv") {
                    let full = base.join(path);
                    let file = match std::fs::File::open(&full) {
                        Ok(f) => f,
                        Err(e) => {
                            self.err("problem", "csv", format!("cannot open {}: {e}", full.display()));
                            return None;
                        }
                    };
                    return match LinearRegression::from_csv_reader(file) {
                        Ok(p) => Some((p, ProblemSource::Csv(PathBuf::from(path)))),
                        Err(e) => {
                            self.err("problem", "csv", e);
                            None
                        }
                    };
                }
                let a = self.rows("problem", "a");
                let b = self.floats("problem", "b");
                if self.get("problem", "a").is_none() {
                    self.missing("problem", "a (or csv)");
                }
                if self.get("problem", "b").is_none() {
                    self.missing("problem", "b (or csv)");
                }
                let (a, b) = (a?, b?);
                let a = DMatrix::from_row_iterator(a.len(), a[0].len(), a.into_iter().flatten());
                let b = DVector::from_vec(b);
                match LinearRegression::new(a.clone(), b.clone()) {
                    Ok(p) => Some((p, ProblemSource::Inline { a, b })),
                    Err(e) => {
                        self.err("problem", "a", e);
                        None
                    }
                }
            }
            other => {
                self.err("problem", "kind", format!("unknown value `{other}` (expected quadratic, regression)"));
                None
            }
        }
    }

    fn step(&mut self, problem_mu: Option<f64>) -> Option<StepSchedule> {
        let name = self.string("schedule", "step");
        if self.get("schedule", "step").is_none() {
            self.missing("schedule", "step");
        }
        let eta = self.float("schedule", "eta");
        let mu = self.float("schedule", "mu");
        let kind = match name? {
            "constant" => StepKind::ConstantUnit,
            "one-over-k" => StepKind::OneOverK,
            "one-over-sqrt-k" => StepKind::OneOverSqrtK,
            "strongly-convex" => StepKind::StronglyConvex {
                mu: mu.or(problem_mu)?,
            },
            other => {
                self.err(
                    "schedule",
                    "step",
                    format!("unknown value `{other}` (expected constant, one-over-k, one-over-sqrt-k, strongly-convex)"),
                );
                return None;
            }
        };
        let eta = match (kind, eta) {
            (StepKind::StronglyConvex { .. }, None) => 1.0,
            (_, Some(e)) => e,
            (_, None) => {
                self.missing("schedule", "eta");
                return None;
            }
        };
        match StepSchedule::new(kind, eta) {
            Ok(s) => Some(s),
            Err(e) => {
                self.err("schedule", "eta", e);
                None
            }
        }
    }

    fn delay(&mut self) -> Option<DelaySchedule> {
        let kind = self.string("delay", "kind").unwrap_or("none");
        let max = self.count("delay", "max");
        let pmf = self.floats("delay", "pmf");
        let warmup = self.flag("delay", "warmup").unwrap_or(true);
        let needs_max = |r: &mut Self| -> Option<usize> {
            if max.is_none() && r.get("delay", "max").is_none() {
                r.missing("delay", "max");
            }
            max
        };
        let kind = match kind {
            "none" => DelayKind::Constant(0),
            "constant" => DelayKind::Constant(needs_max(self)?),
            "uniform" => DelayKind::UniformBounded(needs_max(self)?),
            "pmf" => match pmf {
                Some(q) => DelayKind::CustomPmf(q),
                None => {
                    self.missing("delay", "pmf");
                    return None;
                }
            },
            other => {
                self.err("delay", "kind", format!("unknown value `{other}` (expected none, constant, uniform, pmf)"));
                return None;
            }
        };
        match DelaySchedule::new(kind, warmup) {
            Ok(d) => Some(d),
            Err(e) => {
                self.err("delay", "pmf", e);
                None
            }
        }
    }

    fn noise(&mut self, dim: Option<usize>, batch: usize) -> Option<NoiseModel> {
        let model = self.string("noise", "model").unwrap_or("sampled");
        match model {
            "sampled" => Some(NoiseModel::Sampled { batch }),
            "zero" => Some(NoiseModel::Zero),
            "constant" => {
                if self.get("noise", "matrix").is_none() {
                    self.missing("noise", "matrix");
                    return None;
                }
                let rows = self.rows("noise", "matrix")?;
                let dim = dim?;
                if rows.len() != dim || rows[0].len() != dim {
                    self.err("noise", "matrix", format!("expected a {dim}x{dim} matrix"));
                    return None;
                }
                Some(NoiseModel::Constant(DMatrix::from_row_iterator(
                    dim,
                    dim,
                    rows.into_iter().flatten(),
                )))
            }
            other => {
                self.err("noise", "model", format!("unknown value `{other}` (expected sampled, zero, constant)"));
                None
            }
        }
    }

    fn history(&mut self, dim: Option<usize>) -> Option<HistorySegment> {
        if self.get("initial", "history").is_some() {
            let rows = self.rows("initial", "history")?;
            let dim = dim?;
            if rows[0].len() != dim {
                self.err("initial", "history", format!("samples must have dimension {dim}"));
                return None;
            }
            if self.get("initial", "x0").is_some() {
                self.err("initial", "x0", "give either x0 or history, not both");
                return None;
            }
            return Some(HistorySegment::GridSamples(rows.into_iter().map(DVector::from_vec).collect()));
        }
        if self.get("initial", "x0").is_none() {
            self.missing("initial", "x0");
            return None;
        }
        let x0 = self.floats("initial", "x0")?;
        let dim = dim?;
        if x0.len() != dim {
            self.err("initial", "x0", format!("expected {dim} entries, found {}", x0.len()));
            return None;
        }
        Some(HistorySegment::constant(DVector::from_vec(x0)))
    }

    fn bounds(&mut self) -> Option<BoundSettings> {
        let defaults = BoundSettings::default();
        let envelope = match self.string("bounds", "envelope") {
            None => defaults.envelope,
            Some(s) => match EnvelopeKind::from_name(s) {
                Some(e) => e,
                None => {
                    self.err("bounds", "envelope", format!("unknown value `{s}` (expected energy, moment-decay)"));
                    return None;
                }
            },
        };
        Some(BoundSettings {
            envelope,
            radius: self.float("bounds", "radius"),
            lambda: self.float("bounds", "lambda"),
            calibration_replications: self
                .count("bounds", "calibration_replications")
                .unwrap_or(defaults.calibration_replications),
        })
    }
}

fn as_float(v: &Value) -> Option<f64> {
    match v {
        Value::Float(f) => Some(*f),
        Value::Integer(i) => Some(*i as f64),
        _ => None,
    }
}

/// The configuration with every default filled in, as TOML.
pub fn render(loaded: &LoadedConfig) -> String {
    let cfg = &loaded.config;
    let mut s: BTreeMap<&str, Vec<(String, String)>> = BTreeMap::new();
    let mut put = |section: &'static str, key: &str, value: String| {
        s.entry(section).or_default().push((key.to_string(), value));
    };
    let list = |v: &[f64]| format!("[{}]", v.iter().map(|x| fmt_f(*x)).collect::<Vec<_>>().join(", "));
    let matrix = |m: &DMatrix<f64>| {
        let rows: Vec<String> = (0..m.nrows())
            .map(|i| list(&m.row(i).iter().copied().collect::<Vec<_>>()))
            .collect();
        format!("[{}]", rows.join(", "))
    };

    put("experiment", "kind", quote(cfg.kind.name()));
    put("experiment", "seed", cfg.seed.to_string());
    put("experiment", "replications", cfg.replications.to_string());
    put("experiment", "parallel", (cfg.execution == Execution::Parallel).to_string());
    put("experiment", "checkpoints", list(&cfg.checkpoints));
    put(
        "experiment",
        "scan",
        format!("[{}]", cfg.scan.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(", ")),
    );

    match &loaded.source {
        ProblemSource::Quadratic => put("problem", "kind", quote("quadratic")),
        ProblemSource::Inline { a, b } => {
            put("problem", "kind", quote("regression"));
            put("problem", "a", matrix(a));
            put("problem", "b", list(b.as_slice()));
        }
        ProblemSource::Csv(p) => {
            put("problem", "kind", quote("regression"));
            put("problem", "csv", quote(&p.display().to_string()));
        }
    }

    let (step, mu) = match cfg.step.kind {
        StepKind::ConstantUnit => ("constant", None),
        StepKind::OneOverK => ("one-over-k", None),
        StepKind::OneOverSqrtK => ("one-over-sqrt-k", None),
        StepKind::StronglyConvex { mu } => ("strongly-convex", Some(mu)),
    };
    put("schedule", "step", quote(step));
    put("schedule", "eta", fmt_f(cfg.step.eta));
    if let Some(mu) = mu {
        put("schedule", "mu", fmt_f(mu));
    }
    if let Ok(delta) = cfg.grid_step() {
        put("schedule", "delta", fmt_f(delta));
    }
    if let (Ok(start), Ok(delta)) = (cfg.start_index(), cfg.grid_step()) {
        put("schedule", "start_time", fmt_f(start as f64 * delta));
    }
    put("schedule", "iterations", cfg.iterations.to_string());

    match &cfg.delay.kind {
        DelayKind::Constant(0) => put("delay", "kind", quote("none")),
        DelayKind::Constant(l) => {
            put("delay", "kind", quote("constant"));
            put("delay", "max", l.to_string());
        }
        DelayKind::UniformBounded(l) => {
            put("delay", "kind", quote("uniform"));
            put("delay", "max", l.to_string());
        }
        DelayKind::CustomPmf(q) => {
            put("delay", "kind", quote("pmf"));
            put("delay", "pmf", list(q));
        }
    }
    put("delay", "warmup", cfg.delay.warmup.to_string());

    put("noise", "batch", cfg.batch.to_string());
    put(
        "noise",
        "sampling",
        quote(match cfg.sampling {
            Sampling::WithReplacement => "with-replacement",
            Sampling::WithoutReplacement => "without-replacement",
        }),
    );
    match &cfg.noise {
        NoiseModel::Sampled { .. } => put("noise", "model", quote("sampled")),
        NoiseModel::Zero => put("noise", "model", quote("zero")),
        NoiseModel::Constant(g) => {
            put("noise", "model", quote("constant"));
            put("noise", "matrix", matrix(g));
        }
    }

    match &cfg.history {
        HistorySegment::Constant(x0) => put("initial", "x0", list(x0.as_slice())),
        HistorySegment::GridSamples(v) => {
            let rows: Vec<String> = v.iter().map(|x| list(x.as_slice())).collect();
            put("initial", "history", format!("[{}]", rows.join(", ")));
        }
    }

    put("bounds", "envelope", quote(cfg.bounds.envelope.name()));
    if let Some(d) = cfg.bounds.radius {
        put("bounds", "radius", fmt_f(d));
    }
    if let Some(l) = cfg.bounds.lambda {
        put("bounds", "lambda", fmt_f(l));
    }
    put(
        "bounds",
        "calibration_replications",
        cfg.bounds.calibration_replications.to_string(),
    );

    let mut out = String::new();
    for (section, _) in SCHEMA {
        if let Some(entries) = s.get(section) {
            out.push_str(&format!("[{section}]\n"));
            for (k, v) in entries {
                out.push_str(&format!("{k} = {v}\n"));
            }
            out.push('\n');
        }
    }
    out
}

fn quote(s: &str) -> String {
    format!("\"{s}\"")
}

/// Floats always carry a decimal point so TOML reads them back as floats.
fn fmt_f(x: f64) -> String {
    let s = format!("{x:?}");
    if s.contains(['.', 'e', 'E', 'i', 'N']) {
        s
    } else {
        format!("{s}.0")
    }
}
