//! Discrete-time iterations: asynchronous SGD with stale reads, sequential
//! SGD, and the Gaussian surrogate that replaces mini-batch noise by `σ z`.
//!
//! All asynchronous runs follow
//! `x_{k+1} = x_k − η u_k g(x_{k − l_k})` with consistent reads: the delayed
//! read returns a complete stored iterate.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::problems::{Dynamics, Problem, Sampling};
use crate::trajectory::March;
pub use crate::trajectory::{HistorySegment, NoiseLog, Recording, Trajectory};

/// Distribution of the staleness `l_k`.
#[derive(Debug, Clone, PartialEq)]
pub enum DelayKind {
    /// `l_k = l`.
    Constant(usize),
    /// `l_k` uniform on `{0, …, l}`.
    UniformBounded(usize),
    /// `P(l_k = j) = q_j` for `j = 0..=l`.
    CustomPmf(Vec<f64>),
}

/// The process generating `l_k`.
///
/// With `warmup` set no read goes before the initial point: random delays are
/// capped at the number of completed steps, and a constant delay `l` reads the
/// current iterate (plain SGD) for the first `l` steps.
#[derive(Debug, Clone, PartialEq)]
pub struct DelaySchedule {
    pub kind: DelayKind,
    pub warmup: bool,
}

impl DelaySchedule {
    pub fn new(kind: DelayKind, warmup: bool) -> Result<Self> {
        if let DelayKind::CustomPmf(q) = &kind {
            if q.is_empty() {
                return Err(Error::invalid("delay pmf must list at least q_0"));
            }
            if q.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
                return Err(Error::invalid("delay pmf entries must be nonnegative"));
            }
            let total: f64 = q.iter().sum();
            if (total - 1.0).abs() > 1e-12 {
                return Err(Error::invalid(format!("delay pmf sums to {total}, not 1")));
            }
        }
        Ok(DelaySchedule { kind, warmup })
    }

    /// No delay: sequential SGD.
    pub fn none() -> Self {
        DelaySchedule {
            kind: DelayKind::Constant(0),
            warmup: true,
        }
    }

    pub fn constant(l: usize) -> Self {
        DelaySchedule {
            kind: DelayKind::Constant(l),
            warmup: true,
        }
    }

    pub fn uniform(l: usize) -> Self {
        DelaySchedule {
            kind: DelayKind::UniformBounded(l),
            warmup: true,
        }
    }

    pub fn with_warmup(mut self, warmup: bool) -> Self {
        self.warmup = warmup;
        self
    }

    /// Upper bound `l`.
    pub fn max_delay(&self) -> usize {
        match &self.kind {
            DelayKind::Constant(l) | DelayKind::UniformBounded(l) => *l,
            DelayKind::CustomPmf(q) => q.len() - 1,
        }
    }

    /// Largest delay allowed at step `j` (counted from the initial point).
    pub fn cap(&self, j: usize) -> usize {
        if self.warmup {
            self.max_delay().min(j)
        } else {
            self.max_delay()
        }
    }

    /// Rejects any delay outside `[0, cap(j)]`.
    pub fn check(&self, delays: &[usize]) -> Result<()> {
        for (j, &l) in delays.iter().enumerate() {
            if l > self.cap(j) {
                return Err(Error::DelayOutOfRange {
                    step: j,
                    delay: l,
                    index: j as i64 - l as i64,
                });
            }
        }
        Ok(())
    }
}

/// Draws `l_j` for step `j` (counted from the initial point).
pub fn sample_delay<R: Rng + ?Sized>(schedule: &DelaySchedule, j: usize, rng: &mut R) -> usize {
    let raw = match &schedule.kind {
        DelayKind::Constant(l) => {
            if schedule.warmup && j < *l {
                return 0;
            }
            *l
        }
        DelayKind::UniformBounded(l) => rng.random_range(0..=*l),
        DelayKind::CustomPmf(q) => {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut pick = q.len() - 1;
            for (i, p) in q.iter().enumerate() {
                acc += p;
                if u < acc {
                    pick = i;
                    break;
                }
            }
            pick
        }
    };
    if schedule.warmup {
        raw.min(j)
    } else {
        raw
    }
}

/// The delay sequence `l_0, …, l_{K−1}`.
pub fn sample_delays<R: Rng + ?Sized>(
    schedule: &DelaySchedule,
    iterations: usize,
    rng: &mut R,
) -> Vec<usize> {
    (0..iterations)
        .map(|j| sample_delay(schedule, j, rng))
        .collect()
}

/// `K` i.i.d. standard normal `d`-vectors as the columns of a `d × K` matrix.
pub fn draw_normals<R: Rng + ?Sized>(dim: usize, iterations: usize, rng: &mut R) -> DMatrix<f64> {
    DMatrix::from_fn(dim, iterations, |_, _| rng.sample(StandardNormal))
}

/// Learning-rate adjustment `u_k`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepKind {
    /// `u_k = 1`.
    ConstantUnit,
    /// `u_k = 1/k`.
    OneOverK,
    /// `u_k = 1/√k`.
    OneOverSqrtK,
    /// `η_k = 1/(μk)`, i.e. `η = 1` and `u_k = 1/(μk)`.
    StronglyConvex { mu: f64 },
}

/// Learning rate `η_k = η u_k`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepSchedule {
    pub kind: StepKind,
    pub eta: f64,
}

impl StepSchedule {
    pub fn new(kind: StepKind, eta: f64) -> Result<Self> {
        if !(eta.is_finite() && eta > 0.0) {
            return Err(Error::invalid(format!("base rate η must be positive, got {eta}")));
        }
        if let StepKind::StronglyConvex { mu } = kind {
            if !(mu.is_finite() && mu > 0.0) {
                return Err(Error::invalid(format!(
                    "strong convexity μ must be positive, got {mu}"
                )));
            }
            if eta != 1.0 {
                return Err(Error::invalid("the 1/(μk) schedule fixes η = 1"));
            }
        }
        Ok(StepSchedule { kind, eta })
    }

    pub fn constant(eta: f64) -> Result<Self> {
        Self::new(StepKind::ConstantUnit, eta)
    }

    pub fn strongly_convex(mu: f64) -> Result<Self> {
        Self::new(StepKind::StronglyConvex { mu }, 1.0)
    }

    /// Smallest admissible iteration index (the decaying schedules start at 1).
    pub fn first_index(&self) -> usize {
        match self.kind {
            StepKind::ConstantUnit => 0,
            _ => 1,
        }
    }

    /// `u_k`.
    pub fn adjustment(&self, k: usize) -> f64 {
        let k = k as f64;
        match self.kind {
            StepKind::ConstantUnit => 1.0,
            StepKind::OneOverK => 1.0 / k,
            StepKind::OneOverSqrtK => 1.0 / k.sqrt(),
            StepKind::StronglyConvex { mu } => 1.0 / (mu * k),
        }
    }

    /// `η u_k`.
    pub fn rate(&self, k: usize) -> f64 {
        self.eta * self.adjustment(k)
    }

    /// Checks `u_k ∈ [0, 1]` from `start` on (every `u_k` is non-increasing).
    pub fn check_start(&self, start: usize) -> Result<()> {
        if start < self.first_index() {
            return Err(Error::invalid(format!(
                "{:?} needs iterations to start at k ≥ {}",
                self.kind,
                self.first_index()
            )));
        }
        let u = self.adjustment(start);
        if !(0.0..=1.0).contains(&u) {
            return Err(Error::invalid(format!(
                "adjustment u_{start} = {u} lies outside [0, 1]"
            )));
        }
        Ok(())
    }
}

/// Configuration of a discrete run.
#[derive(Debug, Clone)]
pub struct DiscreteSpec {
    pub step: StepSchedule,
    pub delay: DelaySchedule,
    pub batch: usize,
    pub sampling: Sampling,
    pub iterations: usize,
    /// Initial point `x_0 = ξ(0)` and, without warmup, the values read
    /// before it.
    pub history: HistorySegment,
    /// Time step `δ` relating iterations to time, `t_k = kδ`.
    pub delta: f64,
    /// Index of the initial iterate; defaults to the schedule's first index.
    pub start_index: Option<usize>,
    pub record: Recording,
}

impl DiscreteSpec {
    pub fn new(step: StepSchedule, x0: DVector<f64>, iterations: usize) -> Self {
        DiscreteSpec {
            step,
            delay: DelaySchedule::none(),
            batch: 1,
            sampling: Sampling::WithReplacement,
            iterations,
            history: HistorySegment::constant(x0),
            delta: step.eta,
            start_index: None,
            record: Recording::Full,
        }
    }

    pub fn start(&self) -> usize {
        self.start_index.unwrap_or_else(|| self.step.first_index())
    }

    fn validate(&self, dim: usize) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::invalid("need at least one iteration"));
        }
        if self.batch == 0 {
            return Err(Error::invalid("batch size must be at least 1"));
        }
        if !(self.delta.is_finite() && self.delta > 0.0) {
            return Err(Error::invalid(format!("time step δ must be positive, got {}", self.delta)));
        }
        self.history.validate()?;
        if self.history.dim() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: self.history.dim(),
            });
        }
        self.step.check_start(self.start())
    }

    fn march<'a>(&'a self, delays: &'a [usize], label: &'a str) -> March<'a> {
        March {
            history: &self.history,
            start_index: self.start(),
            iterations: self.iterations,
            spacing: self.delta,
            offsets: delays,
            record: &self.record,
            label,
            seed: None,
        }
    }
}

/// Asynchronous SGD with delays drawn from `rng` and then mini-batches drawn
/// from the same stream. Returns the trajectory and the realized delays.
pub fn run_asgd<P: Problem, R: Rng + ?Sized>(
    problem: &P,
    spec: &DiscreteSpec,
    rng: &mut R,
) -> Result<(Trajectory, Vec<usize>)> {
    let delays = sample_delays(&spec.delay, spec.iterations, rng);
    let traj = run_asgd_with_delays(problem, spec, &delays, rng)?;
    Ok((traj, delays))
}

/// Asynchronous SGD driven by a given delay sequence.
pub fn run_asgd_with_delays<P: Problem, R: Rng + ?Sized>(
    problem: &P,
    spec: &DiscreteSpec,
    delays: &[usize],
    rng: &mut R,
) -> Result<Trajectory> {
    spec.validate(problem.dim())?;
    spec.delay.check(delays)?;
    spec.march(delays, "asgd").run(|_, k, delayed| {
        let g = problem.minibatch_gradient(delayed, spec.batch, spec.sampling, rng)?;
        Ok(g * -spec.step.rate(k))
    })
}

/// Sequential mini-batch SGD, `x_{k+1} = x_k − η u_k g(x_k)`, written without
/// any delay machinery.
pub fn run_sgd<P: Problem, R: Rng + ?Sized>(
    problem: &P,
    spec: &DiscreteSpec,
    rng: &mut R,
) -> Result<Trajectory> {
    spec.validate(problem.dim())?;
    let start = spec.start();
    let record = spec.record.normalized(spec.iterations)?;
    let mut x = spec.history.initial().clone();
    let mut steps = Vec::new();
    let mut states = Vec::new();
    for j in 0..=spec.iterations {
        let keep = match &record {
            Recording::Full => true,
            Recording::Steps(s) => s.binary_search(&j).is_ok(),
            Recording::Terminal => j == spec.iterations,
        };
        if keep {
            steps.push(start + j);
            states.push(x.clone());
        }
        if j == spec.iterations {
            break;
        }
        let g = problem.minibatch_gradient(&x, spec.batch, spec.sampling, rng)?;
        x.axpy(-spec.step.rate(start + j), &g, 1.0);
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { step: start + j + 1 });
        }
    }
    Ok(Trajectory {
        steps,
        states,
        spacing: spec.delta,
        start_index: start,
        iterations: spec.iterations,
        seed: None,
        label: "sgd".into(),
    })
}

/// Gaussian surrogate with fresh delays and normals from `rng`.
pub fn run_gaussian_surrogate<D: Dynamics, R: Rng + ?Sized>(
    dynamics: &D,
    spec: &DiscreteSpec,
    rng: &mut R,
) -> Result<(Trajectory, NoiseLog)> {
    let delays = sample_delays(&spec.delay, spec.iterations, rng);
    let normals = draw_normals(dynamics.dim(), spec.iterations, rng);
    let log = NoiseLog::new(delays, normals)?;
    let traj = run_gaussian_surrogate_replay(dynamics, spec, &log)?;
    Ok((traj, log))
}

/// `x_{k+1} = x_k − η u_k ∇F(x_{k−l_k}) + η u_k σ(x_{k−l_k}) z_k` with the
/// delays and normals taken from `log`.
pub fn run_gaussian_surrogate_replay<D: Dynamics>(
    dynamics: &D,
    spec: &DiscreteSpec,
    log: &NoiseLog,
) -> Result<Trajectory> {
    spec.validate(dynamics.dim())?;
    if log.len() != spec.iterations || log.dim() != dynamics.dim() {
        return Err(Error::invalid(format!(
            "noise log is {}x{}, run needs {}x{}",
            log.dim(),
            log.len(),
            dynamics.dim(),
            spec.iterations
        )));
    }
    spec.delay.check(&log.delays)?;
    spec.march(&log.delays, "surrogate").run(|j, k, delayed| {
        let rate = spec.step.rate(k);
        let grad = dynamics.gradient(delayed)?;
        let sigma = dynamics.diffusion(delayed)?;
        let noise = sigma.as_ref() * log.normal(j);
        Ok(grad * -rate + noise * rate)
    })
}
