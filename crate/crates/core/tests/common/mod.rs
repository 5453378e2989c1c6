#![allow(dead_code)]

use std::path::PathBuf;

use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use sdde_optlab::cli::{load_config, LoadedConfig};
use sdde_optlab::streams::{derive_stream, StreamRole};

pub fn repo_root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}

pub fn recipe_path(name: &str) -> PathBuf {
    repo_root().join("recipes").join(name)
}

pub fn recipe(name: &str) -> LoadedConfig {
    let path = recipe_path(name);
    load_config(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

pub fn golden_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden/coupled_gaps.csv")
}

/// Gaps of one coupled replication on the two-point quadratic.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleGap {
    pub max_gap: f64,
    pub terminal_gap: f64,
}

/// Scalar re-implementation of the coupled ASGD / Euler–Maruyama pair for
/// f_0(x) = ½(x+1)², f_1(x) = ½(x−1)², batch 1, constant delay `l` with
/// warmup, constant rate `eta = δ`. Shares only the stream derivation with
/// the library.
pub fn scalar_coupled_gaps(seed: u64, replications: u64, eta: f64, iterations: usize, l: usize, x0: f64) -> Vec<OracleGap> {
    (0..replications)
        .map(|r| {
            let mut gauss = derive_stream(seed, r, StreamRole::Gaussian);
            let z: Vec<f64> = (0..iterations).map(|_| gauss.sample(StandardNormal)).collect();
            let mut batch = derive_stream(seed, r, StreamRole::Minibatch);
            let mut x = vec![x0];
            let mut y = vec![x0];
            let mut max_gap: f64 = 0.0;
            for j in 0..iterations {
                let read = if j < l { j } else { j - l };
                let grad = if batch.random_range(0..2usize) == 0 {
                    x[read] + 1.0
                } else {
                    x[read] - 1.0
                };
                x.push(x[j] - eta * grad);
                // ∇F(y) = y and σ = 1 for this objective.
                y.push(y[j] - eta * y[read] + eta * z[j]);
                max_gap = max_gap.max((x[j + 1] - y[j + 1]).abs());
            }
            OracleGap {
                max_gap,
                terminal_gap: (x[iterations] - y[iterations]).abs(),
            }
        })
        .collect()
}

pub fn format_gaps(gaps: &[OracleGap]) -> String {
    let mut s = String::from("replication,max_gap,terminal_gap\n");
    for (r, g) in gaps.iter().enumerate() {
        s.push_str(&format!("{r},{:?},{:?}\n", g.max_gap, g.terminal_gap));
    }
    s
}

pub fn read_golden() -> Vec<OracleGap> {
    let text = std::fs::read_to_string(golden_path()).expect("golden gaps file");
    text.lines()
        .skip(1)
        .map(|line| {
            let f: Vec<f64> = line.split(',').map(|v| v.parse().unwrap()).collect();
            OracleGap {
                max_gap: f[1],
                terminal_gap: f[2],
            }
        })
        .collect()
}

/// Rightmost root of `β + a e^{−βτ} = 0` by plain complex Newton iteration
/// from a grid of starting points.
pub fn newton_rightmost_root(a: f64, tau: f64) -> Complex64 {
    let mut best: Option<Complex64> = None;
    let scale = 1.0 / tau;
    for i in 0..=12 {
        for j in 0..=12 {
            let mut beta = Complex64::new(scale * (-6.0 + 0.5 * i as f64), scale * 0.25 * j as f64);
            let mut converged = false;
            for _ in 0..200 {
                let e = (-beta * tau).exp();
                let f = beta + e * a;
                let df = Complex64::new(1.0, 0.0) - e * (a * tau);
                let step = f / df;
                if !(step.re.is_finite() && step.im.is_finite()) {
                    break;
                }
                beta -= step;
                if step.norm() < 1e-15 * (1.0 + beta.norm()) {
                    converged = true;
                    break;
                }
            }
            let residual = (beta + (-beta * tau).exp() * a).norm();
            if converged && residual < 1e-10 && best.is_none_or(|b| beta.re > b.re + 1e-12) {
                best = Some(beta);
            }
        }
    }
    best.expect("Newton found no root")
}
