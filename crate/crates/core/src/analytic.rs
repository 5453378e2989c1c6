//! Closed-form oracles: Ornstein–Uhlenbeck moments, the principal Lambert-W
//! branch, the characteristic-root exponent of the linear delay equation,
//! and the convergence envelopes.

use std::f64::consts::E;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::linalg::{self, check_dim};
use crate::problems::{NoiseModel, Problem};

const SYMMETRY_TOL: f64 = 1e-12;

/// Linear SDE `dX = −Ã(X − x*) dt + √η G dB`.
#[derive(Debug, Clone, PartialEq)]
pub struct OuParams {
    pub a_tilde: DMatrix<f64>,
    pub x_star: DVector<f64>,
    pub eta: f64,
    pub g: DMatrix<f64>,
}

impl OuParams {
    pub fn new(a_tilde: DMatrix<f64>, x_star: DVector<f64>, eta: f64, g: DMatrix<f64>) -> Result<Self> {
        linalg::ensure_symmetric(&a_tilde, SYMMETRY_TOL)?;
        let d = a_tilde.nrows();
        check_dim(&x_star, d)?;
        if g.shape() != (d, d) {
            return Err(Error::invalid(format!("G must be {d}x{d}")));
        }
        if !(eta.is_finite() && eta > 0.0) {
            return Err(Error::invalid(format!("η must be positive, got {eta}")));
        }
        if let Some(&lo) = linalg::sym_eigenvalues(&a_tilde).first() {
            if lo < -linalg::PSD_CLAMP {
                return Err(Error::NotPositiveSemidefinite { eigenvalue: lo });
            }
        }
        Ok(OuParams {
            a_tilde,
            x_star,
            eta,
            g,
        })
    }

    fn modes(&self) -> (Vec<f64>, DMatrix<f64>) {
        let eig = linalg::sym_eigen(&self.a_tilde);
        let vals = eig.eigenvalues.iter().map(|a| a.max(0.0)).collect();
        (vals, eig.eigenvectors)
    }
}

/// `E[X(t)] = x* + e^{−Ãt}(x0 − x*)`.
pub fn ou_mean(params: &OuParams, x0: &DVector<f64>, t: f64) -> Result<DVector<f64>> {
    check_dim(x0, params.x_star.len())?;
    if !(t >= 0.0) {
        return Err(Error::invalid(format!("time must be nonnegative, got {t}")));
    }
    let (vals, q) = params.modes();
    let mut modal = q.transpose() * (x0 - &params.x_star);
    for (m, a) in modal.iter_mut().zip(&vals) {
        *m *= (-a * t).exp();
    }
    Ok(&params.x_star + q * modal)
}

/// `Cov[X(t)] = ∫₀ᵗ e^{−Ã(t−s)} ηGGᵀ e^{−Ã(t−s)} ds`, evaluated mode by mode.
pub fn ou_variance(params: &OuParams, t: f64) -> Result<DMatrix<f64>> {
    if !(t >= 0.0) {
        return Err(Error::invalid(format!("time must be nonnegative, got {t}")));
    }
    let (vals, q) = params.modes();
    let source = q.transpose() * (&params.g * params.g.transpose()) * &q * params.eta;
    let d = vals.len();
    let modal = DMatrix::from_fn(d, d, |i, j| {
        let rate = vals[i] + vals[j];
        let weight = if rate * t < 1e-12 {
            // (1 − e^{−rt})/r → t as r → 0
            t * (1.0 - 0.5 * rate * t)
        } else {
            -(-rate * t).exp_m1() / rate
        };
        source[(i, j)] * weight
    });
    Ok(&q * modal * q.transpose())
}

/// Principal branch `W₀(z)` of `W e^W = z`, refined by Halley's method.
///
/// On the cut `z < −1/e` the branch with positive imaginary part is returned.
pub fn lambert_w0(z: Complex64) -> Result<Complex64> {
    const MAX_ITER: usize = 100;
    if !(z.re.is_finite() && z.im.is_finite()) {
        return Err(Error::invalid("lambert_w0 needs a finite argument"));
    }
    if z == Complex64::new(0.0, 0.0) {
        return Ok(z);
    }
    let near_branch = z * E + 1.0;
    if near_branch.norm() <= 4.0 * f64::EPSILON {
        return Ok(Complex64::new(-1.0, 0.0));
    }

    let mut w = if (z + 1.0 / E).norm() <= 0.7 {
        // Series about the branch point in p = √(2(ez + 1)).
        let mut p = (near_branch * 2.0).sqrt();
        if z.im == 0.0 && p.im < 0.0 {
            p = -p;
        }
        -1.0 + p - p * p / 3.0 + p * p * p * (11.0 / 72.0)
    } else if z.norm() <= 2.0 && z.re > -0.5 {
        (z + 1.0).ln()
    } else {
        let l1 = z.ln();
        let l2 = l1.ln();
        l1 - l2 + l2 / l1
    };

    let tol = 1e-12 * z.norm().max(1.0);
    let mut residual = f64::INFINITY;
    for _ in 0..MAX_ITER {
        let ew = w.exp();
        let f = w * ew - z;
        residual = f.norm();
        let w1 = w + 1.0;
        let denom = ew * w1 - (w + 2.0) * f / (w1 * 2.0);
        let step = f / denom;
        if !(step.re.is_finite() && step.im.is_finite()) {
            break;
        }
        w -= step;
        if step.norm() <= 4.0 * f64::EPSILON * (1.0 + w.norm()) {
            residual = (w * w.exp() - z).norm();
            if residual <= tol {
                return Ok(w);
            }
        }
    }
    let final_residual = (w * w.exp() - z).norm();
    if final_residual <= tol {
        return Ok(w);
    }
    Err(Error::NoConvergence {
        method: "lambert_w0 Halley iteration",
        iterations: MAX_ITER,
        residual: residual.min(final_residual),
    })
}

/// Roots `β` of `det(βI + Ã e^{−βτ}) = 0` with the largest real part per
/// eigenvalue of `Ã`.
#[derive(Debug, Clone, PartialEq)]
pub struct CharacteristicRoots {
    pub eigenvalues: Vec<f64>,
    pub roots: Vec<Complex64>,
    /// `V = sup Re β`.
    pub v: f64,
}

/// Residual tolerance every returned root satisfies.
pub const ROOT_RESIDUAL_TOL: f64 = 1e-10;

/// `|β + a e^{−βτ}|`.
pub fn characteristic_residual(beta: Complex64, a: f64, tau: f64) -> f64 {
    (beta + (-beta * tau).exp() * a).norm()
}

/// Computes `V` by diagonalizing `Ã`: each eigenvalue `a` gives the scalar
/// equation `β + a e^{−βτ} = 0`, whose rightmost root is `W₀(−aτ)/τ`.
pub fn characteristic_root_sup(a_tilde: &DMatrix<f64>, tau: f64) -> Result<CharacteristicRoots> {
    linalg::ensure_symmetric(a_tilde, SYMMETRY_TOL)?;
    if !(tau.is_finite() && tau >= 0.0) {
        return Err(Error::invalid(format!("delay bound τ must be nonnegative, got {tau}")));
    }
    let eigenvalues = linalg::sym_eigenvalues(a_tilde);
    let mut roots = Vec::with_capacity(eigenvalues.len());
    for &a in &eigenvalues {
        if a < -linalg::PSD_CLAMP {
            return Err(Error::NotPositiveSemidefinite { eigenvalue: a });
        }
        let a = a.max(0.0);
        let beta = if tau == 0.0 {
            Complex64::new(-a, 0.0)
        } else if a == 0.0 {
            Complex64::new(0.0, 0.0)
        } else {
            lambert_w0(Complex64::new(-a * tau, 0.0))? / tau
        };
        let residual = characteristic_residual(beta, a, tau);
        if residual > ROOT_RESIDUAL_TOL {
            return Err(Error::NoConvergence {
                method: "characteristic root",
                iterations: 0,
                residual,
            });
        }
        roots.push(beta);
    }
    let v = roots
        .iter()
        .map(|b| b.re)
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(CharacteristicRoots {
        eigenvalues,
        roots,
        v,
    })
}

/// Constants of the convergence envelopes.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BoundParams {
    /// Strong convexity `μ`.
    pub mu: f64,
    /// Gradient Lipschitz constant `L`.
    pub lipschitz: f64,
    /// Radius `D` of the ball the path stays in.
    pub radius: f64,
    /// Delay bound `τ`.
    pub tau: f64,
    pub delta: f64,
    /// Noise bound `H ≥ E Tr(σσᵀ) + 2μLD²`.
    pub noise_bound: f64,
    pub lambda: f64,
    pub epsilon: f64,
    /// Characteristic-root exponent `V`.
    pub v: f64,
    pub c5: f64,
    pub c6: f64,
}

impl BoundParams {
    /// `(δ+1)(H + 2L²D²τ)`.
    fn energy_numerator(&self) -> f64 {
        (self.delta + 1.0)
            * (self.noise_bound
                + 2.0 * self.lipschitz * self.lipschitz * self.radius * self.radius * self.tau)
    }

    /// Rejects `λ ∉ (0, −V)`.
    pub fn check_decay_rate(&self) -> Result<()> {
        if !(self.v < 0.0) {
            return Err(Error::UnstableRoot { v: self.v });
        }
        if !(self.lambda > 0.0 && self.lambda < -self.v) {
            return Err(Error::invalid(format!(
                "λ = {} must lie in (0, {})",
                self.lambda, -self.v
            )));
        }
        Ok(())
    }
}

/// `C₅ e^{−2λ(t−τ)} + C₆ ε/(λτ²)`, the moment-estimation envelope for the
/// linear delay equation.
pub fn delayed_moment_envelope(t: f64, p: &BoundParams) -> Result<f64> {
    p.check_decay_rate()?;
    if !(p.tau > 0.0) {
        return Err(Error::invalid("the moment envelope needs τ > 0"));
    }
    if !(t >= 0.0) {
        return Err(Error::invalid(format!("time must be nonnegative, got {t}")));
    }
    Ok(p.c5 * (-2.0 * p.lambda * (t - p.tau)).exp()
        + p.c6 * p.epsilon / (p.lambda * p.tau * p.tau))
}

/// `(δ+1)(H + 2L²D²τ) ln t / ((t−1)μ²)`.
pub fn energy_envelope(t: f64, p: &BoundParams) -> Result<f64> {
    if !(t > 1.0) {
        return Err(Error::invalid(format!("the envelope needs t > 1, got {t}")));
    }
    if !(p.mu > 0.0) {
        return Err(Error::invalid("the envelope needs μ > 0"));
    }
    Ok(p.energy_numerator() * t.ln() / ((t - 1.0) * p.mu * p.mu))
}

/// `E(t) = ((t−1)/2)‖x − x*‖² − (δ+1)(H + 2L²D²τ) ln t / (2μ²)`.
pub fn energy_function(t: f64, x: &DVector<f64>, p: &BoundParams, x_star: &DVector<f64>) -> Result<f64> {
    check_dim(x, x_star.len())?;
    if !(t >= 1.0) {
        return Err(Error::invalid(format!("the energy is defined for t ≥ 1, got {t}")));
    }
    if !(p.mu > 0.0) {
        return Err(Error::invalid("the energy needs μ > 0"));
    }
    let dist2 = (x - x_star).norm_squared();
    Ok(0.5 * (t - 1.0) * dist2 - p.energy_numerator() * t.ln() / (2.0 * p.mu * p.mu))
}

/// Number of quasi-random points sampled by [`estimate_noise_bound`].
pub const NOISE_BOUND_SAMPLES: usize = 1000;
/// Inflation applied to the sampled supremum.
pub const NOISE_BOUND_SAFETY: f64 = 1.1;

/// `H = 1.1 · (sup Tr(σσᵀ) + 2μLD²)`, the supremum taken over the centre and
/// 1000 Halton points of the ball of radius `D` around `center`.
pub fn estimate_noise_bound<P: Problem>(
    problem: &P,
    noise: &NoiseModel,
    radius: f64,
    center: &DVector<f64>,
) -> Result<f64> {
    check_dim(center, problem.dim())?;
    if !(radius.is_finite() && radius > 0.0) {
        return Err(Error::invalid(format!("radius D must be positive, got {radius}")));
    }
    let d = problem.dim();
    let trace = |x: &DVector<f64>| -> Result<f64> { Ok(noise.covariance(problem, x)?.trace()) };
    let mut sup = trace(center)?;
    if !problem.covariance_is_constant() || !matches!(noise, NoiseModel::Sampled { .. }) {
        for point in halton_ball(d, NOISE_BOUND_SAMPLES)? {
            let x = center + point * radius;
            sup = sup.max(trace(&x)?);
        }
    }
    let curvature = 2.0 * problem.strong_convexity() * problem.lipschitz() * radius * radius;
    Ok(NOISE_BOUND_SAFETY * (sup + curvature))
}

const PRIMES: [u32; 16] = [2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53];

fn radical_inverse(mut i: u64, base: u32) -> f64 {
    let b = base as u64;
    let inv = 1.0 / base as f64;
    let mut f = inv;
    let mut r = 0.0;
    while i > 0 {
        r += (i % b) as f64 * f;
        i /= b;
        f *= inv;
    }
    r
}

/// `count` Halton points inside the closed unit ball in `d` dimensions.
pub fn halton_ball(d: usize, count: usize) -> Result<Vec<DVector<f64>>> {
    if d == 0 || d > PRIMES.len() {
        return Err(Error::invalid(format!("Halton sampling supports 1..={} dims", PRIMES.len())));
    }
    let mut out = Vec::with_capacity(count);
    let mut i = 1u64;
    let limit = 1u64 << 32;
    while out.len() < count && i < limit {
        let p = DVector::from_fn(d, |j, _| 2.0 * radical_inverse(i, PRIMES[j]) - 1.0);
        if p.norm() <= 1.0 {
            out.push(p);
        }
        i += 1;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problems::{quadratic_example, LinearRegression};

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn scalar(x: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, x)
    }

    fn ou(a: f64, g: f64, eta: f64) -> OuParams {
        OuParams::new(scalar(a), DVector::zeros(1), eta, scalar(g)).unwrap()
    }

    #[test]
    fn ou_mean_examples() {
        let p = ou(1.0, 1.0, 0.005);
        let x0 = DVector::from_element(1, 4.0);
        assert_eq!(ou_mean(&p, &x0, 0.0).unwrap()[0], 4.0);
        assert!((ou_mean(&p, &x0, 1.0).unwrap()[0] - 1.471_517_764_685_769).abs() < 1e-12);
        assert!(ou_mean(&p, &x0, 100.0).unwrap()[0].abs() < 1e-10);
        assert!(ou_mean(&p, &x0, -1.0).is_err());
    }

    #[test]
    fn ou_variance_examples() {
        assert_eq!(ou_variance(&ou(1.0, 1.0, 0.005), 0.0).unwrap()[(0, 0)], 0.0);
        assert!((ou_variance(&ou(1.0, 1.0, 0.005), 200.0).unwrap()[(0, 0)] - 0.0025).abs() < 1e-15);
        assert!((ou_variance(&ou(0.0, 1.0, 0.005), 2.0).unwrap()[(0, 0)] - 0.01).abs() < 1e-15);
        let t: f64 = 1.3;
        let expect = 0.005 * 4.0 * (1.0 - (-2.0 * 0.7 * t).exp()) / (2.0 * 0.7);
        assert!((ou_variance(&ou(0.7, 2.0, 0.005), t).unwrap()[(0, 0)] - expect).abs() < 1e-15);
    }

    #[test]
    fn ou_variance_matches_quadrature() {
        // Non-commuting Ã and G; compare with a midpoint rule on the integrand.
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 0.5]);
        let g = DMatrix::from_row_slice(2, 2, &[0.2, 0.0, 0.7, 0.4]);
        let p = OuParams::new(a.clone(), DVector::zeros(2), 0.01, g.clone()).unwrap();
        let t = 2.0;
        let n = 20_000;
        let h = t / n as f64;
        let eig = linalg::sym_eigen(&a);
        let expm = |s: f64| {
            let q = &eig.eigenvectors;
            let dvals = DVector::from_iterator(2, eig.eigenvalues.iter().map(|l| (-l * s).exp()));
            q * DMatrix::from_diagonal(&dvals) * q.transpose()
        };
        let mut acc = DMatrix::zeros(2, 2);
        for i in 0..n {
            let s = (i as f64 + 0.5) * h;
            let m = expm(t - s);
            acc += &m * (&g * g.transpose()) * &m * (0.01 * h);
        }
        assert!((ou_variance(&p, t).unwrap() - acc).amax() < 1e-9);
    }

    #[test]
    fn ou_rejects_asymmetric() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.1, 0.0, 1.0]);
        assert!(OuParams::new(a, DVector::zeros(2), 0.1, DMatrix::identity(2, 2)).is_err());
    }

    #[test]
    fn lambert_w_special_values() {
        assert_eq!(lambert_w0(c(0.0, 0.0)).unwrap(), c(0.0, 0.0));
        assert!((lambert_w0(c(E, 0.0)).unwrap() - c(1.0, 0.0)).norm() < 1e-15);
        assert_eq!(lambert_w0(c(-1.0 / E, 0.0)).unwrap(), c(-1.0, 0.0));
    }

    #[test]
    fn lambert_w_reference_values() {
        // 30-digit reference values.
        let cases = [
            (c(1.0, 0.0), c(0.567_143_290_409_783_9, 0.0)),
            (c(-0.5, 0.0), c(-0.794_023_632_344_689_4, 0.770_111_750_510_379_1)),
            (c(-2.0 / E, 0.0), c(-0.530_646_364_341_726_1, 1.132_672_497_604_881_1)),
            (c(-0.05, 0.0), c(-0.052_705_983_551_546_35, 0.0)),
            (c(-1.1, 0.0), c(-0.251_522_204_302_977, 1.392_038_801_181_596)),
            (c(-5.0, 0.0), c(0.844_844_605_432_169_7, 1.975_008_754_889_033_7)),
            (c(0.5, 0.5), c(0.404_316_123_531_212_8, 0.243_437_756_884_253_96)),
            (c(-0.3, -0.2), c(-0.262_533_712_437_773_2, -0.388_394_796_424_373_8)),
            (c(0.0, 10.0), c(1.643_649_599_167_290_9, 1.016_796_961_030_668_1)),
            (c(-100.0, 0.0), c(3.205_380_786_307_449_4, 2.482_590_531_815_923_6)),
        ];
        for (z, w) in cases {
            let got = lambert_w0(z).unwrap();
            assert!((got - w).norm() < 1e-13, "W0({z}) = {got}, want {w}");
            assert!((got * got.exp() - z).norm() <= 1e-12 * z.norm().max(1.0));
        }
    }

    #[test]
    fn lambert_w_residual_on_grid() {
        for i in -20..=20 {
            for j in -20..=20 {
                let z = c(i as f64 * 0.37, j as f64 * 0.41);
                let w = lambert_w0(z).unwrap();
                assert!((w * w.exp() - z).norm() <= 1e-12 * z.norm().max(1.0), "z = {z}");
                assert!(w.im.abs() < std::f64::consts::PI, "z = {z} left the principal strip");
            }
        }
    }

    #[test]
    fn roots_without_delay() {
        let a = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 2.0]));
        let r = characteristic_root_sup(&a, 0.0).unwrap();
        assert_eq!(r.v, -1.0);
    }

    #[test]
    fn root_at_branch_point() {
        let r = characteristic_root_sup(&scalar(1.0), 1.0 / E).unwrap();
        assert!((r.v + E).abs() < 1e-12);
    }

    #[test]
    fn root_beyond_branch_point_matches_newton() {
        let tau = 2.0 / E;
        let r = characteristic_root_sup(&scalar(1.0), tau).unwrap();
        assert!((r.v - (-0.721_223_184_763_986)).abs() < 1e-12);
        // Independent complex Newton iteration on β + e^{−βτ} = 0.
        let mut beta = c(-0.5, 2.0);
        for _ in 0..100 {
            let f = beta + (-beta * tau).exp();
            let df = c(1.0, 0.0) - (-beta * tau).exp() * tau;
            beta -= f / df;
        }
        assert!(characteristic_residual(beta, 1.0, tau) < 1e-10);
        assert!((beta.re - r.v).abs() < 1e-10);
    }

    #[test]
    fn zero_eigenvalue_gives_zero_root() {
        let a = DMatrix::from_diagonal(&DVector::from_vec(vec![0.0, 1.0]));
        let r = characteristic_root_sup(&a, 0.3).unwrap();
        assert_eq!(r.v, 0.0);
    }

    #[test]
    fn exponent_is_continuous_at_zero_delay() {
        let mut last = f64::INFINITY;
        for tau in [1e-1, 1e-2, 1e-3] {
            let v = characteristic_root_sup(&scalar(1.0), tau).unwrap().v;
            let gap = (v + 1.0).abs();
            assert!(gap < last);
            last = gap;
        }
        assert!(last < 2e-3);
    }

    fn bounds() -> BoundParams {
        BoundParams {
            mu: 1.0,
            lipschitz: 1.0,
            radius: 1.0,
            tau: 0.5,
            delta: 1.0,
            noise_bound: 2.0,
            ..Default::default()
        }
    }

    #[test]
    fn moment_envelope_examples() {
        let p = BoundParams {
            c5: 1.0,
            c6: 1.0,
            lambda: 0.5,
            epsilon: 0.01,
            tau: 0.1,
            v: -1.0,
            ..Default::default()
        };
        assert!((delayed_moment_envelope(1.1, &p).unwrap() - 2.367_879_441_171_442).abs() < 1e-12);
        assert!((delayed_moment_envelope(0.1, &p).unwrap() - 3.0).abs() < 1e-12);
        assert!((delayed_moment_envelope(1e3, &p).unwrap() - 2.0).abs() < 1e-12);
        let bad = BoundParams { lambda: 1.5, ..p };
        assert!(delayed_moment_envelope(1.0, &bad).is_err());
        let unstable = BoundParams { v: 0.1, ..p };
        assert!(matches!(
            delayed_moment_envelope(1.0, &unstable),
            Err(Error::UnstableRoot { .. })
        ));
    }

    #[test]
    fn energy_envelope_examples() {
        let p = bounds();
        let t = E + 1.0;
        // (δ+1)(H + 2L²D²τ) = 2 · 3 = 6.
        let expect = 6.0 * t.ln() / E;
        assert!((energy_envelope(t, &p).unwrap() - expect).abs() < 1e-12);
        assert!((expect - 2.898_731_854_296_415).abs() < 1e-12);
        let no_delay = BoundParams { tau: 0.0, ..p };
        assert!((energy_envelope(t, &no_delay).unwrap() - 2.0 * 2.0 * t.ln() / E).abs() < 1e-12);
        assert!(energy_envelope(1.0, &p).is_err());
        // ln t/(t−1) → 1, so the bound stays finite as t → 1.
        assert!((energy_envelope(1.0 + 1e-9, &p).unwrap() - 6.0).abs() < 1e-6);
    }

    #[test]
    fn energy_envelope_decreases() {
        let p = bounds();
        let mut prev = f64::INFINITY;
        for i in 1..2000 {
            let t = 1.0 + 0.01 * i as f64;
            let h = 1e-6;
            let slope = (energy_envelope(t + h, &p).unwrap() - energy_envelope(t - h.min(t - 1.0) / 2.0, &p).unwrap()) / h;
            let e = energy_envelope(t, &p).unwrap();
            assert!(e < prev && slope < 0.0, "t = {t}");
            prev = e;
        }
    }

    #[test]
    fn energy_function_examples() {
        let x_star = DVector::zeros(2);
        let p = BoundParams { tau: 0.0, ..bounds() };
        let x = DVector::from_vec(vec![1.0, 1.0]);
        assert_eq!(energy_function(1.0, &x, &p, &x_star).unwrap(), 0.0);
        assert!((energy_function(E, &x, &p, &x_star).unwrap() - (-0.281_718_171_540_954_8)).abs() < 1e-12);
        let at_opt = energy_function(3.0, &x_star, &bounds(), &x_star).unwrap();
        assert!((at_opt + 6.0 * 3f64.ln() / 2.0).abs() < 1e-12);
        assert!(energy_function(0.5, &x, &p, &x_star).is_err());
    }

    #[test]
    fn noise_bound_examples() {
        let p = quadratic_example();
        let center = DVector::zeros(1);
        let h = estimate_noise_bound(&p, &NoiseModel::Sampled { batch: 1 }, 4.0, &center).unwrap();
        assert!((h - 36.3).abs() < 1e-12);

        let doubled = estimate_noise_bound(&p, &NoiseModel::Sampled { batch: 1 }, 8.0, &center).unwrap();
        assert!((doubled / 1.1 - 1.0 - 4.0 * (h / 1.1 - 1.0)).abs() < 1e-12);

        // One example in two dimensions: no sampling noise and μ = 0.
        let flat = LinearRegression::new(
            DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
            DVector::from_element(1, 0.5),
        )
        .unwrap();
        let h0 = estimate_noise_bound(&flat, &NoiseModel::Sampled { batch: 1 }, 3.0, &DVector::zeros(2)).unwrap();
        assert_eq!(h0, 0.0);
    }

    #[test]
    fn noise_bound_tracks_state_dependent_noise() {
        // Σ(x) grows with x for inputs of different scales.
        let a = DMatrix::from_row_slice(2, 1, &[1.0, 3.0]);
        let p = LinearRegression::new(a, DVector::from_vec(vec![0.0, 0.0])).unwrap();
        let radius = 2.0;
        let h = estimate_noise_bound(&p, &NoiseModel::Sampled { batch: 1 }, radius, &DVector::zeros(1)).unwrap();
        // ∇f_i = a_i² x, deviations ±4x, so Tr Σ(x) = 16x², maximal at |x| = D.
        let exact = 16.0 * radius * radius + 2.0 * p.strong_convexity() * p.lipschitz() * radius * radius;
        assert!(h <= 1.1 * exact + 1e-9);
        assert!(h >= 1.1 * (0.98 * 16.0 * radius * radius + exact - 16.0 * radius * radius));
    }

    #[test]
    fn halton_points_fill_the_ball() {
        let pts = halton_ball(2, 1000).unwrap();
        assert_eq!(pts.len(), 1000);
        assert!(pts.iter().all(|p| p.norm() <= 1.0));
        let far = pts.iter().filter(|p| p.norm() > 0.9).count();
        assert!(far > 100);
    }
}
