//! Command-line front end: loads a configuration, runs a study and writes
//! its CSV artifacts plus a `manifest` into the output directory.
//!
//! Exit status is 0 on success, 1 for invalid input and 2 for numerical
//! failures.

pub mod config;

use std::ffi::OsString;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{ArgAction, Parser, Subcommand};
use nalgebra::{DMatrix, DVector};

use crate::analytic::{characteristic_root_sup, ou_mean, ou_variance, OuParams};
use crate::discrete::{draw_normals, run_asgd_with_delays, sample_delays};
use crate::error::Error;
use crate::harness::{
    self, energy_monotonicity_check, envelope_check, moment_check, ou_params, path_error_study,
    replication_gaps, write_gaps_csv, BoundReport, EnvelopeKind, ExperimentConfig, StudyKind,
};
use crate::problems::{quadratic_example, Problem, ProblemDynamics};
use crate::sdde::{couple_paths, euler_maruyama_replay};
use crate::streams::{derive_stream, StreamRole};
use crate::trajectory::{write_delay_csv, NoiseLog, Trajectory};

pub use config::{load_config, parse_config, render, ConfigError, LoadedConfig, ProblemSource};

/// Environment variable consulted for the seed when neither `--seed` nor the
/// configuration gives one.
pub const SEED_ENV: &str = "SDDE_OPTLAB_SEED";

#[derive(Debug, Parser)]
#[command(name = "sdde-optlab", version, about = "Asynchronous SGD against its delay-SDE approximation")]
struct Cli {
    /// Experiment configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Directory receiving the CSV artifacts and the manifest.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Progress messages on stderr; repeat for more.
    #[arg(short, long, global = true, action = ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// One ASGD path: asgd.csv, delays.csv.
    SimulateAsgd {
        #[arg(long, default_value_t = 0)]
        replication: u64,
    },
    /// One Euler–Maruyama path: sdde.csv, noise.csv.
    SimulateSdde {
        #[arg(long, default_value_t = 0)]
        replication: u64,
    },
    /// Coupled ASGD, surrogate and SDDE paths, or the delay ordering study.
    Compare,
    /// Closed-form OU mean and variance; with a moment-check config also the
    /// Monte-Carlo comparison.
    OuMoments {
        /// Times at which to evaluate the moments.
        #[arg(long = "t", num_args = 1.., default_values_t = [1.0])]
        t: Vec<f64>,
    },
    /// Characteristic-root exponent V for eigenvalues `--a` and delay `--tau`.
    CharRoot {
        #[arg(long = "a", num_args = 1.., allow_negative_numbers = true)]
        a: Vec<f64>,
        #[arg(long, allow_negative_numbers = true)]
        tau: Option<f64>,
    },
    /// Monotonicity of the expected energy function.
    EnergyCheck,
    /// Monte-Carlo estimates against the convergence envelope.
    EnvelopeCheck,
    /// Scaling of the coupled error in b or K.
    Scaling,
    /// Prints the configuration with all defaults resolved.
    Validate,
}

#[derive(Debug)]
enum Failure {
    Validation(String),
    Numerical(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        if e.is_numerical() {
            Failure::Numerical(e.to_string())
        } else {
            Failure::Validation(e.to_string())
        }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Validation(e.to_string())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Validation(format!("i/o error: {e}"))
    }
}

type Outcome<T = ()> = std::result::Result<T, Failure>;

/// Runs the command line `args` (program name first) and returns the exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match dispatch(&cli) {
        Ok(()) => 0,
        Err(Failure::Validation(msg)) => {
            eprintln!("error: {}", msg.trim_end());
            1
        }
        Err(Failure::Numerical(msg)) => {
            eprintln!("numerical failure: {}", msg.trim_end());
            2
        }
    }
}

struct Session<'a> {
    cli: &'a Cli,
    name: &'static str,
}

impl Session<'_> {
    fn note(&self, msg: impl AsRef<str>) {
        if self.cli.verbose > 0 {
            eprintln!("[{}] {}", self.name, msg.as_ref());
        }
    }

    fn config_path(&self) -> Outcome<&Path> {
        self.cli
            .config
            .as_deref()
            .ok_or_else(|| Failure::Validation(format!("{} needs --config", self.name)))
    }

    /// Loads the configuration and applies the seed precedence.
    fn load(&self) -> Outcome<(LoadedConfig, SeedChoice)> {
        let path = self.config_path()?;
        let mut loaded = load_config(path)?;
        let seed = resolve_seed(self.cli.seed, loaded.seed)?;
        loaded.config.seed = seed.value;
        self.note(format!("config {} (sha256 {}), seed {}", path.display(), loaded.sha256, seed.value));
        Ok((loaded, seed))
    }

    fn out_dir(&self) -> Outcome<&Path> {
        std::fs::create_dir_all(&self.cli.out)?;
        Ok(&self.cli.out)
    }

    fn create(&self, file: &str) -> Outcome<BufWriter<File>> {
        let path = self.out_dir()?.join(file);
        self.note(format!("writing {}", path.display()));
        Ok(BufWriter::new(File::create(path)?))
    }

    fn manifest(&self, loaded: &LoadedConfig, seed: &SeedChoice, artifacts: &[&str]) -> Outcome {
        let mut w = self.create("manifest")?;
        writeln!(w, "tool = sdde-optlab")?;
        writeln!(w, "version = {}", env!("CARGO_PKG_VERSION"))?;
        writeln!(w, "command = {}", self.name)?;
        writeln!(w, "config_sha256 = {}", loaded.sha256)?;
        writeln!(w, "seed = {}", seed.value)?;
        writeln!(w, "seed_source = {}", seed.source)?;
        writeln!(w, "stream_scheme = sdde-optlab/stream/v1 chacha8")?;
        writeln!(w, "artifacts = {}", artifacts.join(","))?;
        w.flush()?;
        Ok(())
    }

    fn expect_kind(&self, cfg: &ExperimentConfig, allowed: &[StudyKind]) -> Outcome {
        if allowed.contains(&cfg.kind) {
            return Ok(());
        }
        let names: Vec<&str> = allowed.iter().map(|k| k.name()).collect();
        Err(Failure::Validation(format!(
            "{} expects experiment.kind {}, the config has {}",
            self.name,
            names.join(" or "),
            cfg.kind.name()
        )))
    }
}

struct SeedChoice {
    value: u64,
    source: &'static str,
}

fn resolve_seed(flag: Option<u64>, file: Option<u64>) -> Outcome<SeedChoice> {
    if let Some(v) = flag {
        return Ok(SeedChoice { value: v, source: "command line" });
    }
    if let Some(v) = file {
        return Ok(SeedChoice { value: v, source: "config" });
    }
    match std::env::var(SEED_ENV) {
        Ok(s) => s
            .trim()
            .parse()
            .map(|value| SeedChoice {
                value,
                source: "environment",
            })
            .map_err(|_| Failure::Validation(format!("{SEED_ENV}={s:?} is not an unsigned integer"))),
        Err(_) => Ok(SeedChoice { value: 0, source: "default" }),
    }
}

fn dispatch(cli: &Cli) -> Outcome {
    let name = match &cli.command {
        Command::SimulateAsgd { .. } => "simulate-asgd",
        Command::SimulateSdde { .. } => "simulate-sdde",
        Command::Compare => "compare",
        Command::OuMoments { .. } => "ou-moments",
        Command::CharRoot { .. } => "char-root",
        Command::EnergyCheck => "energy-check",
        Command::EnvelopeCheck => "envelope-check",
        Command::Scaling => "scaling",
        Command::Validate => "validate",
    };
    let s = Session { cli, name };
    match &cli.command {
        Command::SimulateAsgd { replication } => simulate_asgd(&s, *replication),
        Command::SimulateSdde { replication } => simulate_sdde(&s, *replication),
        Command::Compare => compare(&s),
        Command::OuMoments { t } => ou_moments(&s, t),
        Command::CharRoot { a, tau } => char_root(&s, a, *tau),
        Command::EnergyCheck => energy_check(&s),
        Command::EnvelopeCheck => envelope(&s),
        Command::Scaling => scaling(&s),
        Command::Validate => validate(&s),
    }
}

fn write_trajectory(s: &Session, file: &str, traj: &Trajectory) -> Outcome {
    let mut w = s.create(file)?;
    traj.write_csv(&mut w)?;
    w.flush()?;
    Ok(())
}

fn write_noise(s: &Session, noise: &NoiseLog) -> Outcome {
    let mut w = s.create("noise.csv")?;
    noise.write_csv(&mut w)?;
    w.flush()?;
    Ok(())
}

fn write_report(s: &Session, file: &str, report: &BoundReport) -> Outcome {
    let mut w = s.create(file)?;
    report.write_csv(&mut w)?;
    w.flush()?;
    Ok(())
}

fn verdict(pass: bool) -> &'static str {
    if pass {
        "PASS"
    } else {
        "FAIL"
    }
}

/// Same streams as the ASGD leg of `compare`.
fn simulate_asgd(s: &Session, replication: u64) -> Outcome {
    let (loaded, seed) = s.load()?;
    let cfg = &loaded.config;
    let spec = cfg.coupling()?.discrete_spec()?;
    let mut delay_rng = derive_stream(cfg.seed, replication, StreamRole::Delay);
    let mut batch_rng = derive_stream(cfg.seed, replication, StreamRole::Minibatch);
    let delays = sample_delays(&cfg.delay, cfg.iterations, &mut delay_rng);
    let mut traj = run_asgd_with_delays(&cfg.problem, &spec, &delays, &mut batch_rng)?;
    traj.seed = Some(cfg.seed);
    write_trajectory(s, "asgd.csv", &traj)?;
    let mut w = s.create("delays.csv")?;
    write_delay_csv(&delays, &mut w)?;
    w.flush()?;
    s.manifest(&loaded, &seed, &["asgd.csv", "delays.csv"])?;
    println!("x_K = {:?}", traj.terminal().as_slice());
    Ok(())
}

/// Same streams as the SDDE leg of `compare`.
fn simulate_sdde(s: &Session, replication: u64) -> Outcome {
    let (loaded, seed) = s.load()?;
    let cfg = &loaded.config;
    let coupling = cfg.coupling()?;
    let mut delay_rng = derive_stream(cfg.seed, replication, StreamRole::Delay);
    let mut gauss_rng = derive_stream(cfg.seed, replication, StreamRole::Gaussian);
    let delays = sample_delays(&cfg.delay, cfg.iterations, &mut delay_rng);
    let normals = draw_normals(cfg.problem.dim(), cfg.iterations, &mut gauss_rng);
    let noise = NoiseLog::new(delays, normals)?;
    let dynamics = ProblemDynamics::new(&cfg.problem, coupling.noise.clone())?;
    let mut traj = euler_maruyama_replay(&dynamics, &coupling.sdde_spec()?, &noise)?;
    traj.seed = Some(cfg.seed);
    write_trajectory(s, "sdde.csv", &traj)?;
    write_noise(s, &noise)?;
    s.manifest(&loaded, &seed, &["sdde.csv", "noise.csv"])?;
    println!("X(t_K) = {:?}", traj.terminal().as_slice());
    Ok(())
}

fn compare(s: &Session) -> Outcome {
    let (loaded, seed) = s.load()?;
    let cfg = &loaded.config;
    s.expect_kind(cfg, &[StudyKind::PathCompare, StudyKind::DelayOrdering])?;
    if cfg.kind == StudyKind::DelayOrdering {
        let report = path_error_study(cfg)?;
        write_report(s, "report.csv", &report)?;
        s.manifest(&loaded, &seed, &["report.csv"])?;
        let o = report.ordering.expect("ordering study");
        println!(
            "constant delay gap {:.6} ± {:.6}, random delay gap {:.6} ± {:.6}: {}",
            o.constant.mean,
            o.constant.stderr,
            o.random.mean,
            o.random.stderr,
            verdict(o.pass)
        );
        return Ok(());
    }
    let paths = couple_paths(&cfg.problem, &cfg.coupling()?, cfg.seed, 0)?;
    write_trajectory(s, "asgd.csv", &paths.asgd)?;
    write_trajectory(s, "surrogate.csv", &paths.surrogate)?;
    write_trajectory(s, "sdde.csv", &paths.sdde)?;
    write_noise(s, &paths.noise)?;
    let gaps = replication_gaps(cfg)?;
    let mut w = s.create("gaps.csv")?;
    write_gaps_csv(&gaps, &mut w)?;
    w.flush()?;
    let report = path_error_study(cfg)?;
    write_report(s, "report.csv", &report)?;
    s.manifest(
        &loaded,
        &seed,
        &["asgd.csv", "surrogate.csv", "sdde.csv", "noise.csv", "gaps.csv", "report.csv"],
    )?;
    let terminal = report.rows.last().expect("terminal row");
    println!(
        "{} replications: max pathwise gap {:.6}, mean terminal gap {:.6} ± {:.6}",
        cfg.replications,
        report.max_gap.unwrap_or(f64::NAN),
        terminal.estimate,
        terminal.stderr
    );
    Ok(())
}

fn quadratic_ou() -> OuParams {
    let p = quadratic_example();
    let x_star = p.optimum().expect("invertible").clone();
    let g = p.noise_factor(&x_star, 1).expect("PSD covariance");
    OuParams::new(p.a_tilde().clone(), x_star, 0.005, g).expect("valid OU parameters")
}

fn ou_moments(s: &Session, times: &[f64]) -> Outcome {
    let (ou, x0, loaded) = match &s.cli.config {
        Some(_) => {
            let (loaded, seed) = s.load()?;
            let ou = ou_params(&loaded.config)?;
            let x0 = loaded.config.x0().clone();
            (ou, x0, Some((loaded, seed)))
        }
        None => (quadratic_ou(), DVector::from_element(1, 4.0), None),
    };
    let d = x0.len();
    let mut w = s.create("ou_moments.csv")?;
    let mut header = vec!["t".to_string()];
    header.extend((0..d).map(|i| format!("mean_{i}")));
    for i in 0..d {
        header.extend((0..d).map(|j| format!("cov_{i}_{j}")));
    }
    writeln!(w, "{}", header.join(","))?;
    for &t in times {
        let m = ou_mean(&ou, &x0, t)?;
        let v = ou_variance(&ou, t)?;
        let mut row = vec![t.to_string()];
        row.extend(m.iter().map(|x| x.to_string()));
        row.extend(v.transpose().iter().map(|x| x.to_string()));
        writeln!(w, "{}", row.join(","))?;
        println!("t = {t}: mean = {}, variance = {}", fmt_vec(&m), fmt_mat(&v));
    }
    w.flush()?;
    let mut artifacts = vec!["ou_moments.csv"];
    if let Some((loaded, seed)) = loaded {
        if loaded.config.kind == StudyKind::MomentCheck {
            let report = moment_check(&loaded.config)?;
            write_report(s, "moment_mean.csv", &report.mean)?;
            write_report(s, "moment_variance.csv", &report.variance)?;
            artifacts.extend(["moment_mean.csv", "moment_variance.csv"]);
            for (m, v) in report.mean.rows.iter().zip(&report.variance.rows) {
                println!(
                    "t = {}: sample mean {:.6} ± {:.6} vs {:.6} [{}], sample variance {:.6} ± {:.6} vs {:.6} [{}]",
                    m.t,
                    m.estimate,
                    m.stderr,
                    m.envelope.unwrap_or(f64::NAN),
                    verdict(m.pass),
                    v.estimate,
                    v.stderr,
                    v.envelope.unwrap_or(f64::NAN),
                    verdict(v.pass)
                );
            }
        }
        s.manifest(&loaded, &seed, &artifacts)?;
    }
    Ok(())
}

fn fmt_vec(v: &DVector<f64>) -> String {
    let parts: Vec<String> = v.iter().map(|x| format!("{x:.6}")).collect();
    format!("[{}]", parts.join(", "))
}

fn fmt_mat(m: &DMatrix<f64>) -> String {
    let rows: Vec<String> = (0..m.nrows())
        .map(|i| fmt_vec(&m.row(i).transpose()))
        .collect();
    format!("[{}]", rows.join(", "))
}

fn char_root(s: &Session, a: &[f64], tau: Option<f64>) -> Outcome {
    let (matrix, tau) = if !a.is_empty() {
        (DMatrix::from_diagonal(&DVector::from_column_slice(a)), tau.unwrap_or(0.0))
    } else if s.cli.config.is_some() {
        let (loaded, _) = s.load()?;
        let cfg = &loaded.config;
        (cfg.problem.a_tilde().clone(), tau.map_or_else(|| cfg.tau(), Ok)?)
    } else {
        return Err(Failure::Validation("char-root needs --a or --config".into()));
    };
    let roots = characteristic_root_sup(&matrix, tau)?;
    println!("V = {}", roots.v);
    for (a, b) in roots.eigenvalues.iter().zip(&roots.roots) {
        println!(
            "a = {a}: beta = {} {:+}i (residual {:e})",
            b.re,
            b.im,
            crate::analytic::characteristic_residual(*b, *a, tau)
        );
    }
    Ok(())
}

fn energy_check(s: &Session) -> Outcome {
    let (loaded, seed) = s.load()?;
    s.expect_kind(&loaded.config, &[StudyKind::EnergyCheck])?;
    let report = energy_monotonicity_check(&loaded.config)?;
    write_report(s, "energy.csv", &report)?;
    s.manifest(&loaded, &seed, &["energy.csv"])?;
    print_bounds(&report);
    for r in &report.rows {
        println!("t = {}: smoothed E[E(t)] = {:.6} ± {:.6} [{}]", r.t, r.estimate, r.stderr, verdict(r.pass));
    }
    println!("energy monotonicity: {}", verdict(report.passed()));
    Ok(())
}

fn print_bounds(report: &BoundReport) {
    match (report.bounds, report.decay) {
        (Some(b), None) => println!(
            "mu = {}, L = {}, D = {:.6}, tau = {}, delta = {}, H = {:.6}",
            b.mu, b.lipschitz, b.radius, b.tau, b.delta, b.noise_bound
        ),
        (Some(b), Some(_)) => println!(
            "tau = {}, lambda = {:.6}, epsilon = {:e}, C5 = {:.6}, C6 = {:.6}",
            b.tau, b.lambda, b.epsilon, b.c5, b.c6
        ),
        _ => {}
    }
}

fn envelope(s: &Session) -> Outcome {
    let (loaded, seed) = s.load()?;
    s.expect_kind(&loaded.config, &[StudyKind::EnvelopeCheck])?;
    let report = envelope_check(&loaded.config)?;
    write_report(s, "envelope.csv", &report)?;
    let mut artifacts = vec!["envelope.csv"];
    if let Some(d) = report.decay {
        let mut w = s.create("decay.csv")?;
        writeln!(w, "rate,lambda,v,points,pass\n{},{},{},{},{}", d.rate, d.lambda, d.v, d.points, d.pass)?;
        w.flush()?;
        artifacts.push("decay.csv");
    }
    s.manifest(&loaded, &seed, &artifacts)?;
    print_bounds(&report);
    for r in &report.rows {
        println!(
            "t = {}: E|X - x*|^2 = {:.6} ± {:.6}, envelope {:.6} [{}]",
            r.t,
            r.estimate,
            r.stderr,
            r.envelope.unwrap_or(f64::NAN),
            verdict(r.pass)
        );
    }
    if let Some(d) = report.decay {
        println!(
            "fitted decay rate {:.6} vs lambda {:.6} (V = {:.6}) [{}]",
            d.rate,
            d.lambda,
            d.v,
            verdict(d.pass)
        );
    }
    if loaded.config.bounds.envelope == EnvelopeKind::Energy {
        println!("energy envelope: {}", verdict(report.passed()));
    } else {
        println!("moment envelope: {}", verdict(report.passed()));
    }
    Ok(())
}

fn scaling(s: &Session) -> Outcome {
    let (loaded, seed) = s.load()?;
    s.expect_kind(&loaded.config, &[StudyKind::ScalingInB, StudyKind::ScalingInK])?;
    let report = harness::path_error_study(&loaded.config)?;
    let mut w = s.create("scaling.csv")?;
    report.write_scaling_csv(&mut w)?;
    w.flush()?;
    let mut w = s.create("scaling_fit.csv")?;
    report.write_fit_csv(&mut w)?;
    w.flush()?;
    s.manifest(&loaded, &seed, &["scaling.csv", "scaling_fit.csv"])?;
    for p in &report.scaling {
        println!("{} = {}: mean gap {:.6} ± {:.6}", param_name(loaded.config.kind), p.param, p.mean_error, p.stderr);
    }
    let fit = report.fit.expect("scaling fit");
    println!("log-log slope {:.4} (intercept {:.4}, r2 {:.4})", fit.slope, fit.intercept, fit.r2);
    Ok(())
}

fn param_name(kind: StudyKind) -> &'static str {
    if kind == StudyKind::ScalingInB {
        "b"
    } else {
        "K"
    }
}

fn validate(s: &Session) -> Outcome {
    let (loaded, _) = s.load()?;
    print!("{}", render(&loaded));
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seed_precedence() {
        assert_eq!(resolve_seed(Some(3), Some(4)).unwrap().value, 3);
        assert_eq!(resolve_seed(None, Some(4)).unwrap().source, "config");
    }

    #[test]
    fn usage_errors_exit_one() {
        assert_eq!(run(["sdde-optlab", "no-such-command"]), 1);
        assert_eq!(run(["sdde-optlab", "char-root"]), 1);
        assert_eq!(run(["sdde-optlab", "compare"]), 1);
    }

    #[test]
    fn char_root_rejects_negative_tau() {
        assert_eq!(run(["sdde-optlab", "char-root", "--a", "1", "--tau", "-1"]), 1);
        assert_eq!(run(["sdde-optlab", "char-root", "--a", "1", "--tau", "0"]), 0);
    }
}
