//! Empirical-risk objectives `F(x) = (1/n) Σ f_i(x)`, their gradients and the
//! statistics of mini-batch gradient noise.

use std::borrow::Cow;

use nalgebra::{DMatrix, DVector};
use rand::seq::index;
use rand::Rng;

use crate::error::{Error, Result};
use crate::linalg::{self, check_dim};

/// How a mini-batch is drawn from the `n` examples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Sampling {
    /// i.i.d. uniform indices.
    #[default]
    WithReplacement,
    /// Distinct indices; with `b = n` this is the full batch in index order.
    WithoutReplacement,
}

/// A finite-sum objective with per-example gradients and known curvature
/// constants.
pub trait Problem: Send + Sync {
    fn dim(&self) -> usize;

    fn num_examples(&self) -> usize;

    fn example_loss(&self, i: usize, x: &DVector<f64>) -> f64;

    /// Adds `scale * ∇f_i(x)` to `out`.
    fn accumulate_example_gradient(
        &self,
        i: usize,
        x: &DVector<f64>,
        scale: f64,
        out: &mut DVector<f64>,
    );

    /// Gradient Lipschitz constant `L`.
    fn lipschitz(&self) -> f64;

    /// Strong convexity modulus `μ` (0 when not strongly convex).
    fn strong_convexity(&self) -> f64;

    fn optimum(&self) -> Option<&DVector<f64>>;

    /// True when `Σ(x)` does not depend on `x`.
    fn covariance_is_constant(&self) -> bool {
        false
    }

    fn example_gradient(&self, i: usize, x: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.dim());
        self.accumulate_example_gradient(i, x, 1.0, &mut out);
        out
    }

    fn loss(&self, x: &DVector<f64>) -> Result<f64> {
        check_dim(x, self.dim())?;
        let n = self.num_examples();
        let total: f64 = (0..n).map(|i| self.example_loss(i, x)).sum();
        Ok(total / n as f64)
    }

    /// `∇F(x) = (1/n) Σ ∇f_i(x)`.
    fn full_gradient(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim(x, self.dim())?;
        let n = self.num_examples();
        let mut out = DVector::zeros(self.dim());
        for i in 0..n {
            self.accumulate_example_gradient(i, x, 1.0, &mut out);
        }
        out /= n as f64;
        Ok(out)
    }

    /// Average of `b` sampled per-example gradients.
    fn minibatch_gradient<R: Rng + ?Sized>(
        &self,
        x: &DVector<f64>,
        batch: usize,
        sampling: Sampling,
        rng: &mut R,
    ) -> Result<DVector<f64>>
    where
        Self: Sized,
    {
        check_dim(x, self.dim())?;
        if batch == 0 {
            return Err(Error::invalid("batch size must be at least 1"));
        }
        let n = self.num_examples();
        let mut out = DVector::zeros(self.dim());
        match sampling {
            Sampling::WithReplacement => {
                for _ in 0..batch {
                    let i = rng.random_range(0..n);
                    self.accumulate_example_gradient(i, x, 1.0, &mut out);
                }
            }
            Sampling::WithoutReplacement if batch == n => {
                for i in 0..n {
                    self.accumulate_example_gradient(i, x, 1.0, &mut out);
                }
            }
            Sampling::WithoutReplacement => {
                if batch > n {
                    return Err(Error::invalid(format!(
                        "batch {batch} exceeds {n} examples without replacement"
                    )));
                }
                for i in index::sample(rng, n, batch).iter() {
                    self.accumulate_example_gradient(i, x, 1.0, &mut out);
                }
            }
        }
        out /= batch as f64;
        Ok(out)
    }

    /// Exact covariance `Σ(x)` of a single uniformly drawn `∇f_i(x)`.
    fn gradient_covariance(&self, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        let mean = self.full_gradient(x)?;
        let n = self.num_examples();
        let d = self.dim();
        let mut cov = DMatrix::zeros(d, d);
        for i in 0..n {
            let dev = self.example_gradient(i, x) - &mean;
            cov.ger(1.0, &dev, &dev, 1.0);
        }
        cov /= n as f64;
        Ok(cov)
    }

    /// Symmetric PSD square root of `Σ(x)/b`.
    fn noise_factor(&self, x: &DVector<f64>, batch: usize) -> Result<DMatrix<f64>> {
        if batch == 0 {
            return Err(Error::invalid("batch size must be at least 1"));
        }
        let cov = self.gradient_covariance(x)? / batch as f64;
        linalg::psd_sqrt(&cov)
    }
}

/// Least squares `F(x) = (1/2n) ‖Ax − B‖²`, i.e. `f_i(x) = ½(a_iᵀx − b_i)²`.
#[derive(Debug, Clone)]
pub struct LinearRegression {
    rows: Vec<DVector<f64>>,
    targets: DVector<f64>,
    a_tilde: DMatrix<f64>,
    b_tilde: DVector<f64>,
    lipschitz: f64,
    strong_convexity: f64,
    optimum: Option<DVector<f64>>,
    constant_covariance: bool,
}

impl LinearRegression {
    /// Builds the problem from the `n×d` input matrix and the `n` targets.
    pub fn new(a: DMatrix<f64>, b: DVector<f64>) -> Result<Self> {
        let (n, d) = a.shape();
        if n == 0 || d == 0 {
            return Err(Error::invalid("need at least one example and one feature"));
        }
        if b.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: b.len(),
            });
        }
        if a.iter().chain(b.iter()).any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite entry in A or B"));
        }
        let a_tilde = a.transpose() * &a / n as f64;
        let b_tilde = a.transpose() * &b / n as f64;
        let eig = linalg::sym_eigenvalues(&a_tilde);
        let lipschitz = eig.last().copied().unwrap_or(0.0).max(0.0);
        let smallest = eig.first().copied().unwrap_or(0.0).max(0.0);
        let rows: Vec<DVector<f64>> = (0..n).map(|i| a.row(i).transpose()).collect();

        let scale = 1.0 + a_tilde.amax();
        let constant_covariance = rows
            .iter()
            .all(|r| (r * r.transpose() - &a_tilde).amax() <= 1e-14 * scale);

        let invertible = smallest > 1e-12 * lipschitz.max(1e-300);
        let strong_convexity = if invertible { smallest } else { 0.0 };
        let mut problem = LinearRegression {
            rows,
            targets: b,
            a_tilde,
            b_tilde,
            lipschitz,
            strong_convexity,
            optimum: None,
            constant_covariance,
        };
        if invertible {
            let x_star = problem
                .a_tilde
                .clone()
                .cholesky()
                .map(|c| c.solve(&problem.b_tilde))
                .ok_or_else(|| Error::invalid("Ã is not positive definite"))?;
            problem.optimum = Some(x_star);
        }
        Ok(problem)
    }

    /// Parses rows `a_i1, ..., a_id, b_i` (no header).
    pub fn from_csv_reader<R: std::io::Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(false)
            .trim(csv::Trim::All)
            .comment(Some(b'#'))
            .from_reader(reader);
        let mut data = Vec::new();
        let mut width = None;
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| Error::invalid(format!("csv row {}: {e}", line + 1)))?;
            if rec.len() < 2 {
                return Err(Error::invalid(format!(
                    "csv row {}: need at least one input column and the target",
                    line + 1
                )));
            }
            if *width.get_or_insert(rec.len()) != rec.len() {
                return Err(Error::invalid(format!("csv row {}: ragged row", line + 1)));
            }
            for field in rec.iter() {
                let v: f64 = field.parse().map_err(|_| {
                    Error::invalid(format!("csv row {}: cannot parse {field:?}", line + 1))
                })?;
                data.push(v);
            }
        }
        let width = width.ok_or_else(|| Error::invalid("csv holds no examples"))?;
        let n = data.len() / width;
        let full = DMatrix::from_row_slice(n, width, &data);
        let a = full.columns(0, width - 1).into_owned();
        let b = full.column(width - 1).into_owned();
        Self::new(a, b)
    }

    /// `Ã = AᵀA/n`.
    pub fn a_tilde(&self) -> &DMatrix<f64> {
        &self.a_tilde
    }

    /// `B̃ = AᵀB/n`.
    pub fn b_tilde(&self) -> &DVector<f64> {
        &self.b_tilde
    }

    pub fn targets(&self) -> &DVector<f64> {
        &self.targets
    }

    pub fn inputs(&self) -> DMatrix<f64> {
        let d = self.dim();
        DMatrix::from_fn(self.rows.len(), d, |i, j| self.rows[i][j])
    }
}

/// The scalar two-example objective `½(x+1)²` and `½(x−1)²` averaged; `∇F(x) = x`.
pub fn quadratic_example() -> LinearRegression {
    LinearRegression::new(
        DMatrix::from_element(2, 1, 1.0),
        DVector::from_vec(vec![-1.0, 1.0]),
    )
    .expect("quadratic example is well formed")
}

impl Problem for LinearRegression {
    fn dim(&self) -> usize {
        self.a_tilde.nrows()
    }

    fn num_examples(&self) -> usize {
        self.rows.len()
    }

    fn example_loss(&self, i: usize, x: &DVector<f64>) -> f64 {
        let r = self.rows[i].dot(x) - self.targets[i];
        0.5 * r * r
    }

    fn accumulate_example_gradient(
        &self,
        i: usize,
        x: &DVector<f64>,
        scale: f64,
        out: &mut DVector<f64>,
    ) {
        let row = &self.rows[i];
        let r = row.dot(x) - self.targets[i];
        out.axpy(scale * r, row, 1.0);
    }

    fn lipschitz(&self) -> f64 {
        self.lipschitz
    }

    fn strong_convexity(&self) -> f64 {
        self.strong_convexity
    }

    fn optimum(&self) -> Option<&DVector<f64>> {
        self.optimum.as_ref()
    }

    fn covariance_is_constant(&self) -> bool {
        self.constant_covariance
    }
}

/// Source of the diffusion factor `σ` used by the Gaussian surrogate and the
/// SDDE integrator.
#[derive(Debug, Clone, PartialEq)]
pub enum NoiseModel {
    /// `σ(x) = (Σ(x)/b)^{1/2}` from the problem's per-example gradients.
    Sampled { batch: usize },
    /// A fixed diffusion matrix `G`.
    Constant(DMatrix<f64>),
    /// No noise.
    Zero,
}

impl NoiseModel {
    /// Covariance `σσᵀ` of the noise at `x`.
    pub fn covariance<P: Problem>(&self, problem: &P, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        match self {
            NoiseModel::Sampled { batch } => {
                if *batch == 0 {
                    return Err(Error::invalid("batch size must be at least 1"));
                }
                Ok(problem.gradient_covariance(x)? / *batch as f64)
            }
            NoiseModel::Constant(g) => Ok(g * g.transpose()),
            NoiseModel::Zero => Ok(DMatrix::zeros(problem.dim(), problem.dim())),
        }
    }

    pub fn factor<P: Problem>(&self, problem: &P, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        match self {
            NoiseModel::Sampled { batch } => problem.noise_factor(x, *batch),
            NoiseModel::Constant(g) => Ok(g.clone()),
            NoiseModel::Zero => Ok(DMatrix::zeros(problem.dim(), problem.dim())),
        }
    }
}

/// Drift gradient and diffusion factor of a (delayed) gradient flow.
pub trait Dynamics: Sync {
    fn dim(&self) -> usize;

    fn gradient(&self, x: &DVector<f64>) -> Result<DVector<f64>>;

    fn diffusion(&self, x: &DVector<f64>) -> Result<Cow<'_, DMatrix<f64>>>;
}

/// A problem paired with a noise model. State-independent factors are
/// computed once.
#[derive(Debug)]
pub struct ProblemDynamics<'a, P: Problem> {
    problem: &'a P,
    noise: NoiseModel,
    cached: Option<DMatrix<f64>>,
}

impl<'a, P: Problem> ProblemDynamics<'a, P> {
    pub fn new(problem: &'a P, noise: NoiseModel) -> Result<Self> {
        let d = problem.dim();
        let cached = match &noise {
            NoiseModel::Sampled { batch } => {
                if *batch == 0 {
                    return Err(Error::invalid("batch size must be at least 1"));
                }
                if problem.covariance_is_constant() {
                    Some(noise.factor(problem, &DVector::zeros(d))?)
                } else {
                    None
                }
            }
            NoiseModel::Constant(g) => {
                if g.shape() != (d, d) {
                    return Err(Error::invalid(format!(
                        "diffusion matrix must be {d}x{d}, got {}x{}",
                        g.nrows(),
                        g.ncols()
                    )));
                }
                Some(g.clone())
            }
            NoiseModel::Zero => Some(DMatrix::zeros(d, d)),
        };
        Ok(ProblemDynamics {
            problem,
            noise,
            cached,
        })
    }

    pub fn problem(&self) -> &'a P {
        self.problem
    }

    pub fn noise(&self) -> &NoiseModel {
        &self.noise
    }
}

impl<P: Problem> Dynamics for ProblemDynamics<'_, P> {
    fn dim(&self) -> usize {
        self.problem.dim()
    }

    fn gradient(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        self.problem.full_gradient(x)
    }

    fn diffusion(&self, x: &DVector<f64>) -> Result<Cow<'_, DMatrix<f64>>> {
        match &self.cached {
            Some(m) => Ok(Cow::Borrowed(m)),
            None => Ok(Cow::Owned(self.noise.factor(self.problem, x)?)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::streams::{derive_stream, StreamRole};
    use proptest::prelude::*;

    fn v(x: &[f64]) -> DVector<f64> {
        DVector::from_row_slice(x)
    }

    fn identity_regression() -> LinearRegression {
        LinearRegression::new(DMatrix::identity(2, 2), DVector::zeros(2)).unwrap()
    }

    #[test]
    fn quadratic_full_gradient() {
        let p = quadratic_example();
        assert_eq!(p.full_gradient(&v(&[0.0])).unwrap()[0], 0.0);
        assert_eq!(p.full_gradient(&v(&[4.0])).unwrap()[0], 4.0);
        assert_eq!(p.lipschitz(), 1.0);
        assert_eq!(p.strong_convexity(), 1.0);
        assert_eq!(p.optimum().unwrap()[0], 0.0);
        assert!(p.covariance_is_constant());
    }

    #[test]
    fn identity_regression_gradient() {
        // With A = I₂ the 1/n averaging gives Ã = I/2, so ∇F(x) = x/2.
        let p = identity_regression();
        let g = p.full_gradient(&v(&[1.0, 2.0])).unwrap();
        assert!((g - v(&[0.5, 1.0])).amax() < 1e-15);

        // Rows scaled by √2 give the identity Hessian and ∇F(x) = x.
        let p = LinearRegression::new(
            DMatrix::identity(2, 2) * 2f64.sqrt(),
            DVector::zeros(2),
        )
        .unwrap();
        let g = p.full_gradient(&v(&[1.0, 2.0])).unwrap();
        assert!((g - v(&[1.0, 2.0])).amax() < 1e-14);
        assert!((p.a_tilde() - DMatrix::identity(2, 2)).amax() < 1e-14);
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let p = quadratic_example();
        assert_eq!(
            p.full_gradient(&v(&[1.0, 2.0])),
            Err(Error::DimensionMismatch {
                expected: 1,
                got: 2
            })
        );
    }

    #[test]
    fn zero_batch_rejected() {
        let p = quadratic_example();
        let mut rng = derive_stream(0, 0, StreamRole::Minibatch);
        assert!(p
            .minibatch_gradient(&v(&[1.0]), 0, Sampling::WithReplacement, &mut rng)
            .is_err());
    }

    #[test]
    fn full_batch_without_replacement_is_exact() {
        let p = quadratic_example();
        let mut rng = derive_stream(0, 0, StreamRole::Minibatch);
        let g = p
            .minibatch_gradient(&v(&[4.0]), 2, Sampling::WithoutReplacement, &mut rng)
            .unwrap();
        assert_eq!(g[0], 4.0);
    }

    #[test]
    fn single_example_any_batch() {
        let p = LinearRegression::new(DMatrix::from_element(1, 1, 2.0), v(&[3.0])).unwrap();
        let x = v(&[0.7]);
        let exact = p.example_gradient(0, &x);
        let mut rng = derive_stream(1, 0, StreamRole::Minibatch);
        for b in [1, 3, 17] {
            let g = p
                .minibatch_gradient(&x, b, Sampling::WithReplacement, &mut rng)
                .unwrap();
            assert!((g[0] - exact[0]).abs() < 1e-14);
        }
        assert_eq!(p.gradient_covariance(&x).unwrap()[(0, 0)], 0.0);
    }

    #[test]
    fn quadratic_single_draw_frequencies() {
        // Enumerating the two examples at x = 0 gives gradients +1 and −1.
        let p = quadratic_example();
        let mut rng = derive_stream(11, 0, StreamRole::Minibatch);
        let draws = 10_000;
        let mut plus = 0usize;
        for _ in 0..draws {
            let g = p
                .minibatch_gradient(&v(&[0.0]), 1, Sampling::WithReplacement, &mut rng)
                .unwrap()[0];
            assert!(g == 1.0 || g == -1.0);
            if g == 1.0 {
                plus += 1;
            }
        }
        let freq = plus as f64 / draws as f64;
        assert!((freq - 0.5).abs() <= 0.02, "frequency {freq}");
    }

    #[test]
    fn quadratic_covariance_is_one() {
        let p = quadratic_example();
        for x in [-3.0, 0.0, 2.5] {
            assert!((p.gradient_covariance(&v(&[x])).unwrap()[(0, 0)] - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn identity_covariance_by_enumeration() {
        let p = identity_regression();
        let x = v(&[0.0, 0.0]);
        // ∇f_i(x) = a_i (a_iᵀx − b_i) = 0 for both rows at the origin.
        let grads: Vec<DVector<f64>> = (0..2).map(|i| p.example_gradient(i, &x)).collect();
        let mean = (&grads[0] + &grads[1]) / 2.0;
        let mut brute = DMatrix::zeros(2, 2);
        for g in &grads {
            let dev = g - &mean;
            brute += &dev * dev.transpose() / 2.0;
        }
        let cov = p.gradient_covariance(&x).unwrap();
        assert!((cov - brute).amax() < 1e-15);

        // Away from the origin the enumeration is no longer trivial.
        let x = v(&[0.3, -1.2]);
        let g0 = p.example_gradient(0, &x);
        let g1 = p.example_gradient(1, &x);
        let m = (&g0 + &g1) / 2.0;
        let brute = ((&g0 - &m) * (&g0 - &m).transpose() + (&g1 - &m) * (&g1 - &m).transpose())
            / 2.0;
        assert!((p.gradient_covariance(&x).unwrap() - brute).amax() < 1e-15);
    }

    #[test]
    fn noise_factor_examples() {
        let p = quadratic_example();
        let s = p.noise_factor(&v(&[1.0]), 4).unwrap();
        assert!((s[(0, 0)] - 0.5).abs() < 1e-15);

        let single = LinearRegression::new(DMatrix::from_element(1, 1, 1.0), v(&[0.0])).unwrap();
        assert_eq!(single.noise_factor(&v(&[5.0]), 3).unwrap()[(0, 0)], 0.0);

        let diag = linalg::psd_sqrt(&DMatrix::from_diagonal(&v(&[4.0, 9.0]))).unwrap();
        assert!((diag - DMatrix::from_diagonal(&v(&[2.0, 3.0]))).amax() < 1e-14);
    }

    #[test]
    fn minibatch_is_unbiased_and_has_scaled_covariance() {
        let a = DMatrix::from_row_slice(4, 2, &[1.0, 0.5, -0.3, 2.0, 0.7, -1.1, 1.5, 0.2]);
        let b = v(&[1.0, -0.5, 0.25, 2.0]);
        let p = LinearRegression::new(a, b).unwrap();
        let x = v(&[0.4, -0.8]);
        let batch = 3;
        let exact = p.full_gradient(&x).unwrap();
        let target_cov = p.gradient_covariance(&x).unwrap() / batch as f64;
        let mut rng = derive_stream(99, 0, StreamRole::Minibatch);
        let draws = 100_000;
        let samples: Vec<DVector<f64>> = (0..draws)
            .map(|_| {
                p.minibatch_gradient(&x, batch, Sampling::WithReplacement, &mut rng)
                    .unwrap()
            })
            .collect();
        let r = draws as f64;
        let mean = samples.iter().fold(DVector::zeros(2), |acc, s| acc + s) / r;
        let mut cov = DMatrix::zeros(2, 2);
        for s in &samples {
            let dev = s - &mean;
            cov += &dev * dev.transpose();
        }
        cov /= r - 1.0;
        for i in 0..2 {
            let sd = cov[(i, i)].sqrt();
            assert!((mean[i] - exact[i]).abs() <= 4.0 * sd / r.sqrt());
        }
        // Standard error of the (i, j) covariance entry from the fourth moments.
        for i in 0..2 {
            for j in 0..2 {
                let mut m4 = 0.0;
                for s in &samples {
                    let p_ij = (s[i] - mean[i]) * (s[j] - mean[j]);
                    m4 += (p_ij - cov[(i, j)]).powi(2);
                }
                let se = (m4 / r).sqrt() / r.sqrt();
                assert!(
                    (cov[(i, j)] - target_cov[(i, j)]).abs() <= 5.0 * se,
                    "entry ({i},{j}): {} vs {}",
                    cov[(i, j)],
                    target_cov[(i, j)]
                );
            }
        }
    }

    #[test]
    fn csv_loading() {
        let text = "# a, b\n1.0, -1.0\n1.0, 1.0\n";
        let p = LinearRegression::from_csv_reader(text.as_bytes()).unwrap();
        assert_eq!(p.num_examples(), 2);
        assert_eq!(p.full_gradient(&v(&[4.0])).unwrap()[0], 4.0);
        assert!(LinearRegression::from_csv_reader("1.0\n".as_bytes()).is_err());
        assert!(LinearRegression::from_csv_reader("1,2\n1,2,3\n".as_bytes()).is_err());
    }

    fn regression_strategy() -> impl Strategy<Value = (LinearRegression, DVector<f64>, usize)> {
        (1usize..4, 1usize..7, 1usize..6).prop_flat_map(|(d, n, b)| {
            (
                prop::collection::vec(-2.0f64..2.0, n * d),
                prop::collection::vec(-2.0f64..2.0, n),
                prop::collection::vec(-3.0f64..3.0, d),
            )
                .prop_map(move |(a, t, x)| {
                    let p = LinearRegression::new(
                        DMatrix::from_row_slice(n, d, &a),
                        DVector::from_vec(t),
                    )
                    .unwrap();
                    (p, DVector::from_vec(x), b)
                })
        })
    }

    proptest! {
        #[test]
        fn noise_factor_reconstructs_covariance((p, x, b) in regression_strategy()) {
            let sigma = p.noise_factor(&x, b).unwrap();
            let target = p.gradient_covariance(&x).unwrap() / b as f64;
            let err = (&sigma * sigma.transpose() - &target).norm();
            prop_assert!(err <= 1e-10, "frobenius error {err}");
            let eig = linalg::sym_eigenvalues(&p.gradient_covariance(&x).unwrap());
            prop_assert!(eig[0] >= -1e-12);
        }

        #[test]
        fn regression_gradient_is_affine((p, x, _b) in regression_strategy()) {
            let g = p.full_gradient(&x).unwrap();
            let affine = p.a_tilde() * &x - p.b_tilde();
            prop_assert!((g - affine).amax() <= 1e-12);
        }

        #[test]
        fn optimum_has_vanishing_gradient((p, _x, _b) in regression_strategy()) {
            if let Some(x_star) = p.optimum() {
                if p.strong_convexity() > 1e-3 {
                    prop_assert!(p.full_gradient(x_star).unwrap().norm() < 1e-10);
                }
            }
            prop_assert!(p.lipschitz() >= p.strong_convexity());
        }
    }
}
