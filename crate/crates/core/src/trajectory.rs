//! Paths on a uniform time grid, the initial history segment, noise logs and
//! the shared delayed-recursion driver used by every simulator.

use std::fmt::Write as _;
use std::io::{self, Write};

use nalgebra::{DMatrix, DVector, DVectorView};

use crate::error::{Error, Result};

/// Initial function `ξ` on `[−τ, 0]`, sampled on the integration grid.
#[derive(Debug, Clone, PartialEq)]
pub enum HistorySegment {
    /// `ξ(s) = value` for every `s ≤ 0`.
    Constant(DVector<f64>),
    /// Values at grid points `−m, …, −1, 0` (oldest first).
    GridSamples(Vec<DVector<f64>>),
}

impl HistorySegment {
    pub fn constant(value: DVector<f64>) -> Self {
        HistorySegment::Constant(value)
    }

    pub fn dim(&self) -> usize {
        self.initial().len()
    }

    /// `ξ(0)`, the initial state.
    pub fn initial(&self) -> &DVector<f64> {
        match self {
            HistorySegment::Constant(v) => v,
            HistorySegment::GridSamples(v) => v.last().expect("validated non-empty"),
        }
    }

    /// Value `j` grid steps before the initial point.
    pub fn lookback(&self, j: usize) -> Option<&DVector<f64>> {
        match self {
            HistorySegment::Constant(v) => Some(v),
            HistorySegment::GridSamples(v) => {
                if j < v.len() {
                    Some(&v[v.len() - 1 - j])
                } else {
                    None
                }
            }
        }
    }

    /// Number of grid steps covered before 0 (`None` when unbounded).
    pub fn depth(&self) -> Option<usize> {
        match self {
            HistorySegment::Constant(_) => None,
            HistorySegment::GridSamples(v) => Some(v.len() - 1),
        }
    }

    pub(crate) fn validate(&self) -> Result<()> {
        match self {
            HistorySegment::Constant(v) => {
                if v.is_empty() {
                    return Err(Error::invalid("history value must be non-empty"));
                }
            }
            HistorySegment::GridSamples(v) => {
                let first = v
                    .first()
                    .ok_or_else(|| Error::invalid("history needs at least the value at 0"))?;
                if first.is_empty() || v.iter().any(|s| s.len() != first.len()) {
                    return Err(Error::invalid("history samples must share one dimension"));
                }
            }
        }
        if self.iter_values().any(|x| !x.is_finite()) {
            return Err(Error::invalid("history holds non-finite values"));
        }
        Ok(())
    }

    fn iter_values(&self) -> Box<dyn Iterator<Item = f64> + '_> {
        match self {
            HistorySegment::Constant(v) => Box::new(v.iter().copied()),
            HistorySegment::GridSamples(v) => Box::new(v.iter().flat_map(|s| s.iter().copied())),
        }
    }
}

/// Which iterates a run keeps.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub enum Recording {
    /// Every iterate `k = 0..=K`.
    #[default]
    Full,
    /// Only the listed step offsets (relative to the first iterate).
    Steps(Vec<usize>),
    /// Only the final iterate.
    Terminal,
}

impl Recording {
    fn wants(&self, j: usize, total: usize) -> bool {
        match self {
            Recording::Full => true,
            Recording::Steps(s) => s.binary_search(&j).is_ok(),
            Recording::Terminal => j == total,
        }
    }

    pub(crate) fn normalized(&self, total: usize) -> Result<Recording> {
        match self {
            Recording::Steps(s) => {
                let mut s = s.clone();
                s.sort_unstable();
                s.dedup();
                if let Some(&last) = s.last() {
                    if last > total {
                        return Err(Error::invalid(format!(
                            "recording step {last} beyond the {total} iterations"
                        )));
                    }
                }
                Ok(Recording::Steps(s))
            }
            other => Ok(other.clone()),
        }
    }
}

/// A time-indexed sequence of iterates `x_k ≈ X(kδ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    /// Absolute grid index of each recorded iterate.
    pub steps: Vec<usize>,
    pub states: Vec<DVector<f64>>,
    /// Grid spacing; `time = step * spacing`.
    pub spacing: f64,
    /// Grid index of the initial point.
    pub start_index: usize,
    pub iterations: usize,
    pub seed: Option<u64>,
    pub label: String,
}

impl Trajectory {
    pub fn dim(&self) -> usize {
        self.states.first().map_or(0, |s| s.len())
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn time(&self, i: usize) -> f64 {
        self.steps[i] as f64 * self.spacing
    }

    pub fn times(&self) -> Vec<f64> {
        (0..self.len()).map(|i| self.time(i)).collect()
    }

    pub fn terminal(&self) -> &DVector<f64> {
        self.states.last().expect("trajectory holds at least one state")
    }

    /// State at absolute grid index `step`, if recorded.
    pub fn at_step(&self, step: usize) -> Option<&DVector<f64>> {
        self.steps
            .binary_search(&step)
            .ok()
            .map(|i| &self.states[i])
    }

    /// Largest Euclidean distance between aligned states of two trajectories.
    pub fn max_gap(&self, other: &Trajectory) -> Result<f64> {
        if self.steps != other.steps {
            return Err(Error::invalid("trajectories are not aligned"));
        }
        Ok(self
            .states
            .iter()
            .zip(&other.states)
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max))
    }

    /// CSV with header `step,time,x_0,...,x_{d-1}`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        let mut header = String::from("step,time");
        for i in 0..self.dim() {
            write!(header, ",x_{i}").unwrap();
        }
        writeln!(w, "{header}")?;
        for (i, state) in self.states.iter().enumerate() {
            write!(w, "{},{}", self.steps[i], self.time(i))?;
            for v in state.iter() {
                write!(w, ",{v}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("csv is utf-8")
    }
}

/// The realized randomness of one run: delay `l_k` and standard normal
/// vector `z_k` for every step, in step order.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseLog {
    pub delays: Vec<usize>,
    /// `d × K`; column `k` is `z_k`.
    pub normals: DMatrix<f64>,
}

impl NoiseLog {
    pub fn new(delays: Vec<usize>, normals: DMatrix<f64>) -> Result<Self> {
        if delays.len() != normals.ncols() {
            return Err(Error::invalid(format!(
                "noise log has {} delays but {} normal draws",
                delays.len(),
                normals.ncols()
            )));
        }
        Ok(NoiseLog { delays, normals })
    }

    pub fn len(&self) -> usize {
        self.delays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.delays.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.normals.nrows()
    }

    pub fn normal(&self, k: usize) -> DVectorView<'_, f64> {
        self.normals.column(k)
    }

    /// CSV `step,z_0..z_{d-1},delay`; `step` counts from 0.
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        let mut header = String::from("step");
        for i in 0..self.dim() {
            write!(header, ",z_{i}").unwrap();
        }
        writeln!(w, "{header},delay")?;
        for k in 0..self.len() {
            write!(w, "{k}")?;
            for v in self.normal(k).iter() {
                write!(w, ",{v}")?;
            }
            writeln!(w, ",{}", self.delays[k])?;
        }
        Ok(())
    }

    /// Parses the format written by [`NoiseLog::write_csv`].
    pub fn read_csv<R: io::Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().from_reader(reader);
        let headers = rdr
            .headers()
            .map_err(|e| Error::invalid(format!("noise log header: {e}")))?
            .clone();
        if headers.len() < 3 || &headers[0] != "step" || &headers[headers.len() - 1] != "delay" {
            return Err(Error::invalid("noise log header must be step,z_0..,delay"));
        }
        let d = headers.len() - 2;
        let mut delays = Vec::new();
        let mut normals = Vec::new();
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| Error::invalid(format!("noise log row {}: {e}", line + 2)))?;
            let bad = |what: &str| Error::invalid(format!("noise log row {}: bad {what}", line + 2));
            let step: usize = rec[0].parse().map_err(|_| bad("step"))?;
            if step != line {
                return Err(bad("step index"));
            }
            for i in 0..d {
                normals.push(rec[1 + i].parse::<f64>().map_err(|_| bad("normal"))?);
            }
            delays.push(rec[d + 1].parse().map_err(|_| bad("delay"))?);
        }
        let k = delays.len();
        NoiseLog::new(delays, DMatrix::from_vec(d, k, normals))
    }
}

/// CSV `step,delay`.
pub fn write_delay_csv<W: Write>(delays: &[usize], mut w: W) -> io::Result<()> {
    writeln!(w, "step,delay")?;
    for (k, l) in delays.iter().enumerate() {
        writeln!(w, "{k},{l}")?;
    }
    Ok(())
}

/// Ring buffer holding the most recent `depth + 1` states.
pub(crate) struct PathBuffer {
    slots: Vec<DVector<f64>>,
    newest: usize,
}

impl PathBuffer {
    fn new(history: &HistorySegment, depth: usize) -> Self {
        let mut slots = Vec::with_capacity(depth + 1);
        for j in (0..=depth).rev() {
            // Entries older than a bounded history are never read: every
            // lookup is checked against the history depth first.
            let v = history
                .lookback(j)
                .unwrap_or_else(|| history.initial())
                .clone();
            slots.push(v);
        }
        PathBuffer {
            slots,
            newest: depth,
        }
    }

    fn current(&self) -> &DVector<f64> {
        &self.slots[self.newest]
    }

    fn back(&self, offset: usize) -> &DVector<f64> {
        let cap = self.slots.len();
        &self.slots[(self.newest + cap - offset) % cap]
    }

    fn push(&mut self, state: DVector<f64>) {
        self.newest = (self.newest + 1) % self.slots.len();
        self.slots[self.newest] = state;
    }
}

/// Grid geometry shared by the delayed recursions.
pub(crate) struct March<'a> {
    pub history: &'a HistorySegment,
    pub start_index: usize,
    pub iterations: usize,
    pub spacing: f64,
    /// Read offset (in grid steps) for each step.
    pub offsets: &'a [usize],
    pub record: &'a Recording,
    pub label: &'a str,
    pub seed: Option<u64>,
}

impl March<'_> {
    /// Runs `x_{k+1} = x_k + increment(j, k, x_{k − offset_j})` for
    /// `j = 0..K`, where `k = start_index + j`.
    pub fn run<F>(&self, mut increment: F) -> Result<Trajectory>
    where
        F: FnMut(usize, usize, &DVector<f64>) -> Result<DVector<f64>>,
    {
        self.history.validate()?;
        if self.offsets.len() != self.iterations {
            return Err(Error::invalid(format!(
                "{} delays supplied for {} iterations",
                self.offsets.len(),
                self.iterations
            )));
        }
        let record = self.record.normalized(self.iterations)?;
        let depth = self.offsets.iter().copied().max().unwrap_or(0);
        let mut buffer = PathBuffer::new(self.history, depth);
        let mut steps = Vec::new();
        let mut states = Vec::new();
        if record.wants(0, self.iterations) {
            steps.push(self.start_index);
            states.push(buffer.current().clone());
        }
        for (j, &offset) in self.offsets.iter().enumerate() {
            let k = self.start_index + j;
            if offset > j {
                let before = offset - j;
                if self.history.depth().is_some_and(|m| before > m) {
                    return Err(Error::DelayOutOfRange {
                        step: k,
                        delay: offset,
                        index: j as i64 - offset as i64,
                    });
                }
            }
            let inc = increment(j, k, buffer.back(offset))?;
            let next = buffer.current() + inc;
            if next.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { step: k + 1 });
            }
            if record.wants(j + 1, self.iterations) {
                steps.push(k + 1);
                states.push(next.clone());
            }
            buffer.push(next);
        }
        Ok(Trajectory {
            steps,
            states,
            spacing: self.spacing,
            start_index: self.start_index,
            iterations: self.iterations,
            seed: self.seed,
            label: self.label.to_string(),
        })
    }
}
