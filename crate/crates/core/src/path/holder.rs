//! κ-Hölder moduli, Hölder balls `C^{κ,μ,μ0}` and the path perturbation
//! used to localize touching points in viscosity checks.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{dist, Path, TimePath};
use crate::error::{Error, Result};
use crate::rng::stream_rng;

/// The ball of paths with κ-Hölder modulus at most `mu` and sup-norm at most `mu0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HolderBall {
    pub kappa: f64,
    pub mu: f64,
    pub mu0: f64,
}

impl HolderBall {
    pub fn new(kappa: f64, mu: f64, mu0: f64) -> Result<Self> {
        if !(kappa > 0.0 && kappa <= 1.0) {
            return Err(Error::invalid(format!("kappa must lie in (0, 1], got {kappa}")));
        }
        if !(mu > 0.0 && mu.is_finite()) || !(mu0 > 0.0 && mu0.is_finite()) {
            return Err(Error::invalid(format!(
                "mu and mu0 must be positive and finite, got mu = {mu}, mu0 = {mu0}"
            )));
        }
        Ok(Self { kappa, mu, mu0 })
    }

    pub fn contains(&self, p: &Path) -> bool {
        in_holder_ball(p, self)
    }
}

/// Largest `|a_s - a_r| / |s - r|^κ` over grid pairs.
///
/// For piecewise-linear paths and κ ≤ 1 this is the exact supremum: for a
/// fixed `r` the ratio is quasi-convex in `s` on each segment, so it peaks at
/// segment endpoints. Single-point paths have modulus 0.
pub fn holder_modulus(p: &Path, kappa: f64) -> f64 {
    let g = p.grid();
    let mut best = 0.0f64;
    for i in 0..g.len() {
        let a = p.point(i);
        for j in i + 1..g.len() {
            let r = dist(a, p.point(j)) / (g[j] - g[i]).powf(kappa);
            best = best.max(r);
        }
    }
    best
}

pub fn in_holder_ball(p: &Path, ball: &HolderBall) -> bool {
    p.sup_norm() <= ball.mu0 && holder_modulus(p, ball.kappa) <= ball.mu
}

/// The perturbation `A_t^ε`: points too far from the terminal value relative
/// to `(μ - ε)|t - r|^κ` are pulled radially toward it; the terminal value
/// is kept.
pub fn perturb_path(p: &Path, ball: &HolderBall, epsilon: f64) -> Result<Path> {
    if !(epsilon > 0.0 && epsilon <= 0.5 * ball.mu) {
        return Err(Error::invalid(format!(
            "epsilon must lie in (0, mu/2] = (0, {}], got {epsilon}",
            0.5 * ball.mu
        )));
    }
    if !in_holder_ball(p, ball) {
        return Err(Error::HypothesisViolated("perturb_path needs a path inside the Hölder ball".into()));
    }
    let t = p.t_end();
    let at = p.terminal().to_vec();
    let radius = ball.mu - epsilon;
    p.map_values(|r, ar| {
        let gap = dist(ar, &at);
        let cap = radius * (t - r).powf(ball.kappa);
        if gap <= cap {
            ar.to_vec()
        } else {
            at.iter().zip(ar).map(|(a, b)| a + cap * (b - a) / gap).collect()
        }
    })
}

/// Scales `p` toward the origin just enough to land inside `ball`.
///
/// The modulus and sup-norm are both 1-homogeneous, so one scaling suffices.
pub fn project_into_ball(p: &Path, ball: &HolderBall) -> Path {
    if in_holder_ball(p, ball) {
        return p.clone();
    }
    let m = holder_modulus(p, ball.kappa);
    let s = p.sup_norm();
    let lambda = (ball.mu / m).min(ball.mu0 / s).min(1.0) * (1.0 - 1e-12);
    let mut out = p.clone();
    for v in out.values_mut() {
        *v *= lambda;
    }
    out
}

/// Reproducible sampler of paths inside a Hölder ball.
///
/// Raw paths alternate between Brownian motion with drift and random
/// low-frequency Fourier sums, then get scaled into the ball by a random
/// fraction of the largest admissible factor, so samples reach the boundary
/// as well as the interior.
#[derive(Debug, Clone)]
pub struct BallSampler {
    pub ball: HolderBall,
    pub dim: usize,
    pub t_end: f64,
    pub horizon: f64,
    pub grid_size: usize,
    pub max_attempts: usize,
}

impl BallSampler {
    pub fn new(ball: HolderBall, dim: usize, t_end: f64, grid_size: usize) -> Self {
        Self {
            ball,
            dim,
            t_end,
            horizon: t_end,
            grid_size,
            max_attempts: 64,
        }
    }

    pub fn horizon(mut self, horizon: f64) -> Self {
        self.horizon = horizon;
        self
    }

    pub fn max_attempts(mut self, attempts: usize) -> Self {
        self.max_attempts = attempts;
        self
    }

    /// Draws the `index`-th path of the stream identified by `seed`.
    pub fn sample(&self, seed: u64, index: u64) -> Result<Path> {
        if self.grid_size < 2 || !(self.t_end > 0.0) {
            return Err(Error::invalid("ball sampling needs grid_size >= 2 and t_end > 0"));
        }
        let mut rng = stream_rng(seed, index);
        let n = self.grid_size;
        let grid: Vec<f64> = (0..n)
            .map(|k| {
                if k == n - 1 {
                    self.t_end
                } else {
                    self.t_end * k as f64 / (n - 1) as f64
                }
            })
            .collect();
        for _ in 0..self.max_attempts {
            let values = if rng.random_bool(0.5) {
                self.brownian(&grid, &mut rng)
            } else {
                self.fourier(&grid, &mut rng)
            };
            let raw = Path::new(grid.clone(), values, self.dim, self.horizon)?;
            let m = holder_modulus(&raw, self.ball.kappa);
            let s = raw.sup_norm();
            if !(s > 0.0) || !m.is_finite() {
                continue;
            }
            let cap = (self.ball.mu0 / s).min(if m > 0.0 { self.ball.mu / m } else { f64::INFINITY });
            let fraction = if rng.random_bool(0.25) { 1.0 } else { rng.random_range(0.05..1.0) };
            let lambda = cap * fraction * (1.0 - 1e-12);
            let mut out = raw;
            for v in out.values_mut() {
                *v *= lambda;
            }
            if in_holder_ball(&out, &self.ball) {
                return Ok(out);
            }
        }
        Err(Error::SamplerExhausted {
            attempts: self.max_attempts,
        })
    }

    fn brownian(&self, grid: &[f64], rng: &mut impl Rng) -> Vec<f64> {
        let d = self.dim;
        let mut values = Vec::with_capacity(grid.len() * d);
        let drift: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let mut x: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        values.extend_from_slice(&x);
        for w in grid.windows(2) {
            let h = w[1] - w[0];
            for (k, xk) in x.iter_mut().enumerate() {
                *xk += drift[k] * h + h.sqrt() * rng.sample::<f64, _>(StandardNormal);
            }
            values.extend_from_slice(&x);
        }
        values
    }

    fn fourier(&self, grid: &[f64], rng: &mut impl Rng) -> Vec<f64> {
        let d = self.dim;
        let modes = 4;
        let coef: Vec<(f64, f64)> = (0..d * (modes + 1))
            .map(|_| (rng.sample::<f64, _>(StandardNormal), rng.random_range(0.0..std::f64::consts::TAU)))
            .collect();
        let mut values = Vec::with_capacity(grid.len() * d);
        for &t in grid {
            let u = t / self.t_end;
            for k in 0..d {
                let c = &coef[k * (modes + 1)..(k + 1) * (modes + 1)];
                let mut v = c[0].0;
                for (j, &(a, phase)) in c.iter().enumerate().skip(1) {
                    v += a / j as f64 * (std::f64::consts::PI * j as f64 * u + phase).sin();
                }
                values.push(v);
            }
        }
        values
    }
}

/// Scalar path in `ball` on `[0, t_end]`, deterministic in `seed`.
pub fn sample_holder_ball(ball: &HolderBall, t_end: f64, grid_size: usize, seed: u64) -> Result<Path> {
    BallSampler::new(*ball, 1, t_end, grid_size).sample(seed, 0)
}
