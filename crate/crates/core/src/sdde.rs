//! Euler–Maruyama integration of
//!
//! ```text
//! dX(t) = −(η/δ) U(t) ∇F(X(t − θ(t))) dt + (η/δ) √δ U(t) σ(X(t − θ(t))) dB(t)
//! ```
//!
//! on a uniform grid with grid-aligned delays `θ(t_k) = l_k δ`, plus the
//! coupling of the three paths (ASGD, Gaussian surrogate, SDDE) that share one
//! realization of the randomness.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::discrete::{
    draw_normals, run_asgd_with_delays, run_gaussian_surrogate_replay, sample_delays,
    DelaySchedule, DiscreteSpec, StepKind, StepSchedule,
};
use crate::error::{Error, Result};
use crate::problems::{Dynamics, NoiseModel, Problem, ProblemDynamics, Sampling};
use crate::streams::{derive_stream, StreamRole};
use crate::trajectory::March;
pub use crate::trajectory::{HistorySegment, NoiseLog, Recording, Trajectory};

/// The adjustment `U(t)` of the continuous learning rate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Adjustment {
    /// `U(t) = 1`.
    Unit,
    /// `U(t) = δ/t`.
    InverseTime,
    /// `U(t) = √δ/√t`.
    InverseSqrtTime,
    /// `U(t) = δ/(μt)`.
    StronglyConvex { mu: f64 },
}

/// Rate `η`, precision `δ` and adjustment `U(t)` of the SDDE.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeStep {
    pub eta: f64,
    pub delta: f64,
    pub adjustment: Adjustment,
}

impl TimeStep {
    /// `U(t)`.
    pub fn adjustment_at(&self, t: f64) -> f64 {
        match self.adjustment {
            Adjustment::Unit => 1.0,
            Adjustment::InverseTime => self.delta / t,
            Adjustment::InverseSqrtTime => self.delta.sqrt() / t.sqrt(),
            Adjustment::StronglyConvex { mu } => self.delta / (mu * t),
        }
    }

    /// Integration has to start at `t₀ = δ` when `U` is singular at 0.
    pub fn singular_at_zero(&self) -> bool {
        !matches!(self.adjustment, Adjustment::Unit)
    }
}

/// Picks `δ` and `U(t)` for a discrete schedule.
///
/// Constant and `1/√k` rates use `δ = η₀`; the `1/k` schedule accepts any
/// precision and needs `delta`; the `1/(μk)` schedule runs with `η = 1` and
/// takes `delta` when given, else `η₀`.
pub fn time_step_for_schedule(schedule: &StepSchedule, delta: Option<f64>) -> Result<TimeStep> {
    let eta = schedule.eta;
    if !(eta.is_finite() && eta > 0.0) {
        return Err(Error::invalid(format!("η₀ must be positive, got {eta}")));
    }
    if let Some(d) = delta {
        if !(d.is_finite() && d > 0.0) {
            return Err(Error::invalid(format!("δ must be positive, got {d}")));
        }
    }
    let pinned = |what: &str| -> Result<f64> {
        match delta {
            Some(d) if (d - eta).abs() > 1e-15 * eta => Err(Error::invalid(format!(
                "{what} requires δ = η₀ = {eta}, got {d}"
            ))),
            _ => Ok(eta),
        }
    };
    let step = match schedule.kind {
        StepKind::ConstantUnit => TimeStep {
            eta,
            delta: pinned("a constant rate")?,
            adjustment: Adjustment::Unit,
        },
        StepKind::OneOverK => TimeStep {
            eta,
            delta: delta.ok_or_else(|| Error::invalid("the 1/k schedule needs an explicit δ"))?,
            adjustment: Adjustment::InverseTime,
        },
        StepKind::OneOverSqrtK => TimeStep {
            eta,
            delta: pinned("the 1/√k schedule")?,
            adjustment: Adjustment::InverseSqrtTime,
        },
        StepKind::StronglyConvex { mu } => TimeStep {
            eta: 1.0,
            delta: delta.unwrap_or(eta),
            adjustment: Adjustment::StronglyConvex { mu },
        },
    };
    Ok(step)
}

/// Full description of one Euler–Maruyama run.
#[derive(Debug, Clone)]
pub struct SddeSpec {
    pub time: TimeStep,
    /// Grid step is `h = δ / refinement`.
    pub refinement: usize,
    /// Generates `l_k` (in units of `δ`) when the delays are not replayed.
    pub delay: DelaySchedule,
    /// Number of grid steps `K`.
    pub iterations: usize,
    /// Grid index of the initial point; `t₀ = start_index · h`.
    pub start_index: usize,
    /// `ξ` on the grid, `X(t₀) = ξ(0)`.
    pub history: HistorySegment,
    pub record: Recording,
}

impl SddeSpec {
    pub fn new(time: TimeStep, x0: DVector<f64>, iterations: usize) -> Self {
        SddeSpec {
            time,
            refinement: 1,
            delay: DelaySchedule::none(),
            iterations,
            start_index: usize::from(time.singular_at_zero()),
            history: HistorySegment::constant(x0),
            record: Recording::Full,
        }
    }

    /// Grid spacing `h`.
    pub fn spacing(&self) -> f64 {
        self.time.delta / self.refinement as f64
    }

    /// `τ = l δ`.
    pub fn horizon(&self) -> f64 {
        self.delay.max_delay() as f64 * self.time.delta
    }

    fn validate(&self, dim: usize) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::invalid("need at least one step"));
        }
        if self.refinement == 0 {
            return Err(Error::invalid("refinement must be at least 1"));
        }
        let t = self.time;
        if !(t.delta.is_finite() && t.delta > 0.0 && t.eta.is_finite() && t.eta > 0.0) {
            return Err(Error::invalid("η and δ must be positive"));
        }
        if t.singular_at_zero() && self.start_index == 0 {
            return Err(Error::invalid("U(t) is singular at t = 0; start at t₀ ≥ δ"));
        }
        if let Adjustment::StronglyConvex { mu } = t.adjustment {
            if !(mu > 0.0) {
                return Err(Error::invalid("μ must be positive"));
            }
        }
        self.history.validate()?;
        if self.history.dim() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: self.history.dim(),
            });
        }
        Ok(())
    }

    /// Converts per-step delays (units of `δ`) into grid offsets, enforcing
    /// `θ(t_k) ≤ min(t_k − t₀, τ)` under warmup.
    fn offsets(&self, delays: &[usize]) -> Result<Vec<usize>> {
        if delays.len() != self.iterations {
            return Err(Error::invalid(format!(
                "{} delays supplied for {} steps",
                delays.len(),
                self.iterations
            )));
        }
        let l = self.delay.max_delay();
        delays
            .iter()
            .enumerate()
            .map(|(j, &d)| {
                let offset = d * self.refinement;
                let warm = self.delay.warmup && offset > j;
                if d > l || warm {
                    Err(Error::DelayOutOfRange {
                        step: self.start_index + j,
                        delay: d,
                        index: j as i64 - offset as i64,
                    })
                } else {
                    Ok(offset)
                }
            })
            .collect()
    }
}

/// Where the Brownian increments and delays come from.
pub enum NoiseSource<'a, R: Rng + ?Sized> {
    /// Fresh delays and standard normals drawn from the stream.
    Fresh(&'a mut R),
    /// A recorded `(z_k, l_k)` log, e.g. from a discrete run.
    Replay(&'a NoiseLog),
}

/// Integrates the SDDE; returns the path and the noise it consumed.
pub fn euler_maruyama<D: Dynamics, R: Rng + ?Sized>(
    dynamics: &D,
    spec: &SddeSpec,
    noise: NoiseSource<'_, R>,
) -> Result<(Trajectory, NoiseLog)> {
    let log = match noise {
        NoiseSource::Fresh(rng) => {
            let delays = sample_delays(&spec.delay, spec.iterations, rng);
            let normals = draw_normals(dynamics.dim(), spec.iterations, rng);
            NoiseLog::new(delays, normals)?
        }
        NoiseSource::Replay(log) => log.clone(),
    };
    let traj = euler_maruyama_replay(dynamics, spec, &log)?;
    Ok((traj, log))
}

/// Integrates the SDDE with the increments `ΔB_k = √h z_k` from `log`.
pub fn euler_maruyama_replay<D: Dynamics>(
    dynamics: &D,
    spec: &SddeSpec,
    log: &NoiseLog,
) -> Result<Trajectory> {
    spec.validate(dynamics.dim())?;
    if log.dim() != dynamics.dim() || log.len() != spec.iterations {
        return Err(Error::invalid(format!(
            "noise log is {}x{}, integration needs {}x{}",
            log.dim(),
            log.len(),
            dynamics.dim(),
            spec.iterations
        )));
    }
    let offsets = spec.offsets(&log.delays)?;
    let h = spec.spacing();
    let TimeStep { eta, delta, .. } = spec.time;
    let drift_scale = eta / delta;
    let diffusion_scale = drift_scale * delta.sqrt() * h.sqrt();
    let march = March {
        history: &spec.history,
        start_index: spec.start_index,
        iterations: spec.iterations,
        spacing: h,
        offsets: &offsets,
        record: &spec.record,
        label: "sdde",
        seed: None,
    };
    march.run(|j, k, delayed| {
        let u = spec.time.adjustment_at(k as f64 * h);
        let grad = dynamics.gradient(delayed)?;
        let sigma = dynamics.diffusion(delayed)?;
        let noise = sigma.as_ref() * log.normal(j);
        Ok(grad * -(drift_scale * u * h) + noise * (diffusion_scale * u))
    })
}

/// Inputs shared by the three coupled paths.
#[derive(Debug, Clone)]
pub struct CouplingSpec {
    pub step: StepSchedule,
    pub delay: DelaySchedule,
    pub batch: usize,
    pub sampling: Sampling,
    pub noise: NoiseModel,
    pub iterations: usize,
    pub history: HistorySegment,
    /// Precision `δ`; required only by the `1/k` schedule.
    pub delta: Option<f64>,
    /// Grid index of the initial point; defaults to the schedule's first index.
    pub start_index: Option<usize>,
    pub record: Recording,
}

impl CouplingSpec {
    pub fn new(step: StepSchedule, x0: DVector<f64>, iterations: usize) -> Self {
        CouplingSpec {
            step,
            delay: DelaySchedule::none(),
            batch: 1,
            sampling: Sampling::WithReplacement,
            noise: NoiseModel::Sampled { batch: 1 },
            iterations,
            history: HistorySegment::constant(x0),
            delta: None,
            start_index: None,
            record: Recording::Full,
        }
    }

    /// Sets the batch size of both the sampler and the noise model.
    pub fn with_batch(mut self, batch: usize) -> Self {
        self.batch = batch;
        if let NoiseModel::Sampled { .. } = self.noise {
            self.noise = NoiseModel::Sampled { batch };
        }
        self
    }

    pub fn time_step(&self) -> Result<TimeStep> {
        time_step_for_schedule(&self.step, self.delta)
    }

    pub fn discrete_spec(&self) -> Result<DiscreteSpec> {
        let time = self.time_step()?;
        Ok(DiscreteSpec {
            step: self.step,
            delay: self.delay.clone(),
            batch: self.batch,
            sampling: self.sampling,
            iterations: self.iterations,
            history: self.history.clone(),
            delta: time.delta,
            start_index: Some(self.start()),
            record: self.record.clone(),
        })
    }

    pub fn sdde_spec(&self) -> Result<SddeSpec> {
        Ok(SddeSpec {
            time: self.time_step()?,
            refinement: 1,
            delay: self.delay.clone(),
            iterations: self.iterations,
            start_index: self.start(),
            history: self.history.clone(),
            record: self.record.clone(),
        })
    }

    fn start(&self) -> usize {
        self.start_index.unwrap_or_else(|| self.step.first_index())
    }
}

/// ASGD, Gaussian surrogate and SDDE paths driven by one realization.
#[derive(Debug, Clone)]
pub struct CoupledPaths {
    pub asgd: Trajectory,
    pub surrogate: Trajectory,
    pub sdde: Trajectory,
    pub noise: NoiseLog,
}

impl CoupledPaths {
    /// `‖X(t_K) − x_K‖` between the SDDE and ASGD endpoints.
    pub fn terminal_gap(&self) -> f64 {
        (self.sdde.terminal() - self.asgd.terminal()).norm()
    }
}

/// Runs the three coupled paths for replication `replication` of `seed`.
///
/// All three share the delay sequence; the surrogate and the SDDE share the
/// normals; ASGD draws its mini-batches from its own stream of the same seed.
pub fn couple_paths<P: Problem>(
    problem: &P,
    spec: &CouplingSpec,
    seed: u64,
    replication: u64,
) -> Result<CoupledPaths> {
    let mut delay_rng = derive_stream(seed, replication, StreamRole::Delay);
    let mut gauss_rng = derive_stream(seed, replication, StreamRole::Gaussian);
    let mut batch_rng = derive_stream(seed, replication, StreamRole::Minibatch);

    let delays = sample_delays(&spec.delay, spec.iterations, &mut delay_rng);
    let normals = draw_normals(problem.dim(), spec.iterations, &mut gauss_rng);
    let noise = NoiseLog::new(delays, normals)?;

    let dynamics = ProblemDynamics::new(problem, spec.noise.clone())?;
    let discrete = spec.discrete_spec()?;
    let mut asgd = run_asgd_with_delays(problem, &discrete, &noise.delays, &mut batch_rng)?;
    let mut surrogate = run_gaussian_surrogate_replay(&dynamics, &discrete, &noise)?;
    let mut sdde = euler_maruyama_replay(&dynamics, &spec.sdde_spec()?, &noise)?;
    for t in [&mut asgd, &mut surrogate, &mut sdde] {
        t.seed = Some(seed);
    }
    Ok(CoupledPaths {
        asgd,
        surrogate,
        sdde,
        noise,
    })
}

/// Brownian increments of a fine grid summed onto a grid `factor` times
/// coarser, returned as standard normals of the coarse grid.
pub fn coarsen_normals(fine: &DMatrix<f64>, factor: usize) -> Result<DMatrix<f64>> {
    if factor == 0 || !fine.ncols().is_multiple_of(factor) {
        return Err(Error::invalid(format!(
            "{} fine steps do not split into blocks of {factor}",
            fine.ncols()
        )));
    }
    let coarse = fine.ncols() / factor;
    let scale = 1.0 / (factor as f64).sqrt();
    Ok(DMatrix::from_fn(fine.nrows(), coarse, |i, c| {
        let mut s = 0.0;
        for f in 0..factor {
            s += fine[(i, c * factor + f)];
        }
        s * scale
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problems::quadratic_example;
    use std::borrow::Cow;

    fn v(x: f64) -> DVector<f64> {
        DVector::from_element(1, x)
    }

    struct Scripted {
        gradient: fn(&DVector<f64>) -> DVector<f64>,
        sigma: DMatrix<f64>,
    }

    impl Dynamics for Scripted {
        fn dim(&self) -> usize {
            self.sigma.nrows()
        }
        fn gradient(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
            Ok((self.gradient)(x))
        }
        fn diffusion(&self, _x: &DVector<f64>) -> Result<Cow<'_, DMatrix<f64>>> {
            Ok(Cow::Borrowed(&self.sigma))
        }
    }

    fn unit_step(delta: f64) -> TimeStep {
        TimeStep {
            eta: delta,
            delta,
            adjustment: Adjustment::Unit,
        }
    }

    #[test]
    fn schedule_time_steps() {
        let ts = time_step_for_schedule(&StepSchedule::constant(0.005).unwrap(), None).unwrap();
        assert_eq!(ts.delta, 0.005);
        assert_eq!(ts.adjustment, Adjustment::Unit);
        assert_eq!(ts.adjustment_at(123.0), 1.0);

        let k = StepSchedule::new(StepKind::OneOverK, 0.3).unwrap();
        assert!(time_step_for_schedule(&k, None).is_err());
        let ts = time_step_for_schedule(&k, Some(0.01)).unwrap();
        assert_eq!(ts.adjustment_at(1.0), 0.01);

        let sc = StepSchedule::strongly_convex(1.0).unwrap();
        let ts = time_step_for_schedule(&sc, Some(0.005)).unwrap();
        assert_eq!(ts.eta, 1.0);
        assert!((ts.adjustment_at(0.5) - 0.01).abs() < 1e-17);

        let sq = StepSchedule::new(StepKind::OneOverSqrtK, 0.04).unwrap();
        let ts = time_step_for_schedule(&sq, None).unwrap();
        assert!((ts.adjustment_at(0.16) - 0.5).abs() < 1e-15);
        assert!(time_step_for_schedule(&sq, Some(0.01)).is_err());

        let bad = StepSchedule {
            kind: StepKind::ConstantUnit,
            eta: -1.0,
        };
        assert!(time_step_for_schedule(&bad, None).is_err());
    }

    #[test]
    fn explicit_euler_step() {
        let p = quadratic_example();
        let dyn_ = ProblemDynamics::new(&p, NoiseModel::Zero).unwrap();
        let spec = SddeSpec::new(unit_step(0.005), v(4.0), 1);
        let mut rng = derive_stream(0, 0, StreamRole::Gaussian);
        let (traj, _) = euler_maruyama(&dyn_, &spec, NoiseSource::Fresh(&mut rng)).unwrap();
        assert!((traj.terminal()[0] - 3.98).abs() < 1e-15);
    }

    #[test]
    fn first_step_reads_history() {
        let p = quadratic_example();
        let dyn_ = ProblemDynamics::new(&p, NoiseModel::Zero).unwrap();
        let mut spec = SddeSpec::new(unit_step(0.005), v(4.0), 3);
        spec.delay = DelaySchedule::constant(2).with_warmup(false);
        spec.history = HistorySegment::GridSamples(vec![v(4.0), v(4.0), v(4.0)]);
        let mut rng = derive_stream(0, 0, StreamRole::Gaussian);
        let (traj, log) = euler_maruyama(&dyn_, &spec, NoiseSource::Fresh(&mut rng)).unwrap();
        assert_eq!(log.delays, vec![2, 2, 2]);
        assert!((traj.states[1][0] - 3.98).abs() < 1e-15);
        // All three first steps read ξ ≡ 4.
        assert!((traj.states[3][0] - (4.0 - 3.0 * 0.02)).abs() < 1e-14);
    }

    #[test]
    fn zero_field_keeps_initial_value_and_stays_in_history() {
        let dynamics = Scripted {
            gradient: |x| DVector::zeros(x.len()),
            sigma: DMatrix::zeros(2, 2),
        };
        let samples: Vec<DVector<f64>> = (0..=5)
            .map(|j| DVector::from_vec(vec![j as f64, -(j as f64)]))
            .collect();
        let x0 = samples.last().unwrap().clone();
        let mut spec = SddeSpec::new(unit_step(0.1), x0.clone(), 50);
        spec.delay = DelaySchedule::uniform(5).with_warmup(false);
        spec.history = HistorySegment::GridSamples(samples);
        let mut rng = derive_stream(4, 0, StreamRole::Delay);
        let (traj, log) = euler_maruyama(&dynamics, &spec, NoiseSource::Fresh(&mut rng)).unwrap();
        assert!(log.delays.contains(&5));
        for s in &traj.states {
            assert_eq!(s, &x0);
        }
        // A delay beyond the history depth is rejected.
        let mut bad = log.clone();
        bad.delays[0] = 6;
        assert!(euler_maruyama_replay(&dynamics, &spec, &bad).is_err());
    }

    #[test]
    fn warmup_violation_rejected() {
        let p = quadratic_example();
        let dyn_ = ProblemDynamics::new(&p, NoiseModel::Zero).unwrap();
        let mut spec = SddeSpec::new(unit_step(0.005), v(4.0), 3);
        spec.delay = DelaySchedule::constant(2);
        let log = NoiseLog::new(vec![1, 1, 2], DMatrix::zeros(1, 3)).unwrap();
        assert!(matches!(
            euler_maruyama_replay(&dyn_, &spec, &log),
            Err(Error::DelayOutOfRange { .. })
        ));
    }

    #[test]
    fn surrogate_and_sdde_coincide_for_every_schedule() {
        let p = quadratic_example();
        let x0 = v(4.0);
        let cases = [
            (StepSchedule::constant(0.005).unwrap(), None),
            (StepSchedule::new(StepKind::OneOverK, 0.5).unwrap(), Some(0.01)),
            (StepSchedule::new(StepKind::OneOverSqrtK, 0.01).unwrap(), None),
            (StepSchedule::strongly_convex(1.0).unwrap(), Some(0.01)),
        ];
        for (step, delta) in cases {
            let mut spec = CouplingSpec::new(step, x0.clone(), 400);
            spec.delay = DelaySchedule::uniform(6);
            spec.delta = delta;
            let paths = couple_paths(&p, &spec, 9, 0).unwrap();
            let gap = paths.surrogate.max_gap(&paths.sdde).unwrap();
            assert!(gap <= 1e-12, "{step:?}: gap {gap}");
            assert_eq!(paths.asgd.steps, paths.sdde.steps);
        }
    }

    #[test]
    fn deterministic_coupling_is_exact() {
        let p = quadratic_example();
        let mut spec = CouplingSpec::new(StepSchedule::constant(0.005).unwrap(), v(4.0), 500);
        spec.batch = 2;
        spec.sampling = Sampling::WithoutReplacement;
        spec.noise = NoiseModel::Zero;
        let paths = couple_paths(&p, &spec, 1, 0).unwrap();
        assert!(paths.asgd.max_gap(&paths.sdde).unwrap() <= 1e-12);
        assert!(paths.asgd.max_gap(&paths.surrogate).unwrap() <= 1e-12);
    }

    #[test]
    fn coarsened_normals_are_standard() {
        let mut rng = derive_stream(0, 0, StreamRole::Gaussian);
        let fine = draw_normals(1, 64_000, &mut rng);
        let coarse = coarsen_normals(&fine, 16).unwrap();
        assert_eq!(coarse.ncols(), 4000);
        let n = coarse.ncols() as f64;
        let mean = coarse.sum() / n;
        let var = coarse.iter().map(|z| (z - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!(mean.abs() < 4.0 / n.sqrt());
        assert!((var - 1.0).abs() < 5.0 * (2.0 / n).sqrt());
        assert!(coarsen_normals(&fine, 7).is_err());
    }
}
