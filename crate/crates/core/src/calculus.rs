//! Horizontal and vertical derivatives of path functionals by finite
//! differences, predictable-dependence checks, Hölder seminorm estimates and
//! a pathwise Monte Carlo check of the functional Itô formula.

use std::sync::Arc;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{simulate_sde, BrownianBatch, GameCoefficients};
use crate::error::{Error, Result};
use crate::path::{d_infty, BallSampler, CadlagPath, HolderBall, Path, TimePath};
use crate::rng::stream_rng;

/// Declared regularity of a functional.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Smoothness {
    #[default]
    None,
    /// Once horizontally and twice vertically differentiable.
    C12,
    /// `C12` with κ-Hölder derivatives.
    C12Kappa(f64),
}

impl Smoothness {
    pub fn is_c12(self) -> bool {
        !matches!(self, Smoothness::None)
    }
}

/// A real functional of a state path and two control paths.
pub trait PathFunctional: Send + Sync {
    fn eval(&self, a: &Path, z: &CadlagPath, w: &CadlagPath) -> f64;

    fn smoothness(&self) -> Smoothness {
        Smoothness::None
    }
}

impl<F> PathFunctional for F
where
    F: Fn(&Path, &CadlagPath, &CadlagPath) -> f64 + Send + Sync,
{
    fn eval(&self, a: &Path, z: &CadlagPath, w: &CadlagPath) -> f64 {
        self(a, z, w)
    }
}

/// Closure-backed functional with a declared smoothness.
#[derive(Clone)]
pub struct FnFunctional {
    f: Arc<dyn Fn(&Path, &CadlagPath, &CadlagPath) -> f64 + Send + Sync>,
    smoothness: Smoothness,
}

impl FnFunctional {
    pub fn new(f: impl Fn(&Path, &CadlagPath, &CadlagPath) -> f64 + Send + Sync + 'static) -> Self {
        Self {
            f: Arc::new(f),
            smoothness: Smoothness::None,
        }
    }

    /// Functional of the state path only.
    pub fn of_state(f: impl Fn(&Path) -> f64 + Send + Sync + 'static) -> Self {
        Self::new(move |a, _, _| f(a))
    }

    pub fn smooth(mut self, s: Smoothness) -> Self {
        self.smoothness = s;
        self
    }
}

impl PathFunctional for FnFunctional {
    fn eval(&self, a: &Path, z: &CadlagPath, w: &CadlagPath) -> f64 {
        (self.f)(a, z, w)
    }

    fn smoothness(&self) -> Smoothness {
        self.smoothness
    }
}

/// The argument `(A_t; Z_t, W_t)` of a functional.
#[derive(Debug, Clone, PartialEq)]
pub struct PathTriple {
    pub a: Path,
    pub z: CadlagPath,
    pub w: CadlagPath,
}

impl PathTriple {
    pub fn new(a: Path, z: CadlagPath, w: CadlagPath) -> Self {
        Self { a, z, w }
    }

    pub fn t(&self) -> f64 {
        self.a.t_end()
    }

    pub fn eval<F: PathFunctional + ?Sized>(&self, f: &F) -> f64 {
        f.eval(&self.a, &self.z, &self.w)
    }

    /// Simultaneous flat extension of all three paths.
    pub fn flat_extend(&self, delta: f64) -> Result<Self> {
        Ok(Self {
            a: self.a.flat_extend(delta)?,
            z: self.z.flat_extend(delta)?,
            w: self.w.flat_extend(delta)?,
        })
    }

    fn with_state(&self, a: Path) -> Self {
        Self {
            a,
            z: self.z.clone(),
            w: self.w.clone(),
        }
    }
}

/// Finite-difference steps. `dt_rel` is relative to the path horizon, `h_rel`
/// to `max(1, |a_t^i|)` per coordinate. Steps must be decreasing; the last two
/// are combined by one Richardson extrapolation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepConfig {
    pub dt_rel: Vec<f64>,
    pub h_rel: Vec<f64>,
}

impl Default for StepConfig {
    fn default() -> Self {
        Self {
            dt_rel: vec![1e-3, 5e-4],
            h_rel: vec![1e-3, 5e-4, 2.5e-4],
        }
    }
}

/// Steps used and the spread between the two finest extrapolated estimates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub dt_steps: Vec<f64>,
    pub h_steps: Vec<Vec<f64>>,
    pub dt_residual: f64,
    pub dx_residual: f64,
    pub dxx_residual: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FunctionalDerivatives {
    pub value: f64,
    pub dt: f64,
    pub dx: Vec<f64>,
    pub dxx: DMatrix<f64>,
    pub report: StepReport,
}

fn finite(x: f64, what: &str) -> Result<f64> {
    if x.is_finite() {
        Ok(x)
    } else {
        Err(Error::Derivative {
            index: 0,
            reason: format!("non-finite functional value in {what}"),
        })
    }
}

/// Richardson extrapolation of estimates `d[i]` taken at steps `s[i]` with
/// error `~ s^order`; returns the finest extrapolated value and its spread.
fn richardson(d: &[f64], s: &[f64], order: i32) -> (f64, f64) {
    match d.len() {
        0 => (f64::NAN, f64::NAN),
        1 => (d[0], 0.0),
        n => {
            let extrap = |i: usize| {
                let r = (s[i - 1] / s[i]).powi(order);
                (r * d[i] - d[i - 1]) / (r - 1.0)
            };
            let last = extrap(n - 1);
            let spread = if n > 2 {
                (last - extrap(n - 2)).abs()
            } else {
                (d[n - 1] - d[n - 2]).abs()
            };
            (last, spread)
        }
    }
}

fn check_steps(steps: &[f64]) -> Result<()> {
    if steps.is_empty() || steps.iter().any(|&s| !(s > 0.0)) || steps.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::invalid("finite-difference steps must be positive and decreasing"));
    }
    Ok(())
}

fn horizontal_with_base<F: PathFunctional + ?Sized>(f: &F, at: &PathTriple, base: f64, dt_rel: &[f64]) -> Result<(f64, f64, Vec<f64>)> {
    check_steps(dt_rel)?;
    let scale = at.a.horizon();
    let steps: Vec<f64> = dt_rel.iter().map(|r| r * scale).collect();
    let mut d = Vec::with_capacity(steps.len());
    for &h in &steps {
        let v = finite(at.flat_extend(h)?.eval(f), "horizontal derivative")?;
        d.push((v - base) / h);
    }
    let (est, spread) = richardson(&d, &steps, 1);
    Ok((est, spread, steps))
}

/// `∂_t f`: forward differences under simultaneous flat extension of state
/// and controls, with one Richardson level.
pub fn horizontal_derivative<F: PathFunctional + ?Sized>(f: &F, at: &PathTriple, dt_rel: &[f64]) -> Result<f64> {
    let base = finite(at.eval(f), "horizontal derivative")?;
    Ok(horizontal_with_base(f, at, base, dt_rel)?.0)
}

fn coord_steps(at: &PathTriple, h_rel: &[f64]) -> Vec<Vec<f64>> {
    at.a.terminal()
        .iter()
        .map(|x| h_rel.iter().map(|r| r * x.abs().max(1.0)).collect())
        .collect()
}

fn bumped<F: PathFunctional + ?Sized>(f: &F, at: &PathTriple, h: &[f64]) -> Result<f64> {
    finite(at.with_state(at.a.vertical_extend(h)?).eval(f), "vertical derivative")
}

fn unit(n: usize, i: usize, h: f64) -> Vec<f64> {
    let mut e = vec![0.0; n];
    e[i] = h;
    e
}

fn gradient_impl<F: PathFunctional + ?Sized>(f: &F, at: &PathTriple, h_rel: &[f64]) -> Result<(Vec<f64>, f64, Vec<Vec<f64>>)> {
    check_steps(h_rel)?;
    let n = at.a.dim();
    let steps = coord_steps(at, h_rel);
    let mut grad = vec![0.0; n];
    let mut spread = 0.0f64;
    for i in 0..n {
        let mut d = Vec::with_capacity(h_rel.len());
        for &h in &steps[i] {
            let up = bumped(f, at, &unit(n, i, h))?;
            let dn = bumped(f, at, &unit(n, i, -h))?;
            d.push((up - dn) / (2.0 * h));
        }
        let (g, s) = richardson(&d, &steps[i], 2);
        grad[i] = g;
        spread = spread.max(s);
    }
    Ok((grad, spread, steps))
}

/// `∂_x f`: central differences of vertical bumps per coordinate.
pub fn vertical_gradient<F: PathFunctional + ?Sized>(f: &F, at: &PathTriple, h_rel: &[f64]) -> Result<Vec<f64>> {
    Ok(gradient_impl(f, at, h_rel)?.0)
}

fn hessian_impl<F: PathFunctional + ?Sized>(f: &F, at: &PathTriple, base: f64, h_rel: &[f64]) -> Result<(DMatrix<f64>, f64)> {
    check_steps(h_rel)?;
    let n = at.a.dim();
    let steps = coord_steps(at, h_rel);
    let mut hess = DMatrix::zeros(n, n);
    let mut spread = 0.0f64;
    for i in 0..n {
        for j in i..n {
            let mut d = Vec::with_capacity(h_rel.len());
            let mut s = Vec::with_capacity(h_rel.len());
            for k in 0..h_rel.len() {
                let (hi, hj) = (steps[i][k], steps[j][k]);
                let v = if i == j {
                    let up = bumped(f, at, &unit(n, i, hi))?;
                    let dn = bumped(f, at, &unit(n, i, -hi))?;
                    (up - 2.0 * base + dn) / (hi * hi)
                } else {
                    let mut e = vec![0.0; n];
                    let mut corner = |si: f64, sj: f64| {
                        e[i] = si * hi;
                        e[j] = sj * hj;
                        bumped(f, at, &e)
                    };
                    let pp = corner(1.0, 1.0)?;
                    let pm = corner(1.0, -1.0)?;
                    let mp = corner(-1.0, 1.0)?;
                    let mm = corner(-1.0, -1.0)?;
                    (pp - pm - mp + mm) / (4.0 * hi * hj)
                };
                d.push(v);
                s.push(h_rel[k]);
            }
            let (v, r) = richardson(&d, &s, 2);
            hess[(i, j)] = v;
            hess[(j, i)] = v;
            spread = spread.max(r);
        }
    }
    Ok((hess, spread))
}

/// `∂_xx f`: second-order central stencils of vertical bumps, symmetric by construction.
pub fn vertical_hessian<F: PathFunctional + ?Sized>(f: &F, at: &PathTriple, h_rel: &[f64]) -> Result<DMatrix<f64>> {
    let base = finite(at.eval(f), "vertical hessian")?;
    Ok(hessian_impl(f, at, base, h_rel)?.0)
}

/// Value, horizontal derivative, vertical gradient and Hessian in one pass.
pub fn derivatives<F: PathFunctional + ?Sized>(f: &F, at: &PathTriple, cfg: &StepConfig) -> Result<FunctionalDerivatives> {
    let value = finite(at.eval(f), "functional value")?;
    let (dt, dt_residual, dt_steps) = horizontal_with_base(f, at, value, &cfg.dt_rel)?;
    let (dx, dx_residual, h_steps) = gradient_impl(f, at, &cfg.h_rel)?;
    let (dxx, dxx_residual) = hessian_impl(f, at, value, &cfg.h_rel)?;
    Ok(FunctionalDerivatives {
        value,
        dt,
        dx,
        dxx,
        report: StepReport {
            dt_steps,
            h_steps,
            dt_residual,
            dx_residual,
            dxx_residual,
        },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictableReport {
    pub predictable: bool,
    pub max_deviation_z: f64,
    pub max_deviation_w: f64,
}

/// Absolute tolerance for predictable dependence at functional value `v`.
pub fn predictable_tolerance(v: f64) -> f64 {
    1e-10 * (1.0 + v.abs())
}

/// Substitutes random terminal values into `Z` and `W` separately and
/// checks that `f` does not move beyond round-off.
pub fn check_predictable_dependence<F: PathFunctional + ?Sized>(
    f: &F,
    at: &PathTriple,
    probes: usize,
    seed: u64,
) -> Result<PredictableReport> {
    if probes == 0 {
        return Err(Error::invalid("predictable dependence check needs probes >= 1"));
    }
    let base = finite(at.eval(f), "predictable dependence")?;
    let tol = predictable_tolerance(base);
    let mut rng = stream_rng(seed, 0);
    let mut dz = 0.0f64;
    let mut dw = 0.0f64;
    let jitter = |x: &[f64], rng: &mut rand_chacha::ChaCha8Rng| -> Vec<f64> {
        x.iter()
            .map(|v| v + (1.0 + v.abs()) * rng.sample::<f64, _>(StandardNormal))
            .collect()
    };
    for _ in 0..probes {
        let u = jitter(at.z.terminal(), &mut rng);
        let z = at.z.with_terminal(&u)?;
        dz = dz.max((f.eval(&at.a, &z, &at.w) - base).abs());
        let v = jitter(at.w.terminal(), &mut rng);
        let w = at.w.with_terminal(&v)?;
        dw = dw.max((f.eval(&at.a, &at.z, &w) - base).abs());
    }
    Ok(PredictableReport {
        predictable: dz <= tol && dw <= tol,
        max_deviation_z: dz,
        max_deviation_w: dw,
    })
}

/// Sample-max lower estimate of `sup |f(A) - f(A')| / d_infty(A, A')^κ`
/// over state paths drawn from `ball` with random end times in
/// `[horizon / 4, horizon]`. Control arguments are held at zero.
///
/// This is a lower bound on the seminorm, never a certified value.
#[allow(clippy::too_many_arguments)]
pub fn holder_seminorm_estimate<F: PathFunctional + ?Sized>(
    f: &F,
    kappa: f64,
    ball: &HolderBall,
    dims: (usize, usize, usize),
    horizon: f64,
    grid_size: usize,
    samples: usize,
    seed: u64,
) -> Result<f64> {
    if samples < 2 {
        return Err(Error::invalid("seminorm estimate needs samples >= 2"));
    }
    let (n, m, l) = (dims.0, dims.1, dims.2);
    let mut rng = stream_rng(seed, u64::MAX);
    let mut pts = Vec::with_capacity(samples);
    for i in 0..samples {
        let t = rng.random_range(0.25 * horizon..=horizon);
        let a = BallSampler::new(*ball, n, t, grid_size).horizon(horizon).sample(seed, i as u64)?;
        let z = CadlagPath::constant(&vec![0.0; m], 0.0, t, horizon)?;
        let w = CadlagPath::constant(&vec![0.0; l], 0.0, t, horizon)?;
        let v = f.eval(&a, &z, &w);
        pts.push((a, v));
    }
    let mut best = 0.0f64;
    for i in 0..samples {
        for j in i + 1..samples {
            let d = d_infty(&pts[i].0, &pts[j].0)?;
            if d > 0.0 {
                best = best.max((pts[i].1 - pts[j].1).abs() / d.powf(kappa));
            }
        }
    }
    Ok(best)
}

/// Pathwise comparison of both sides of the functional Itô formula.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItoReport {
    pub n_paths: usize,
    pub n_steps: usize,
    pub max_err: f64,
    pub p50_err: f64,
    pub p95_err: f64,
    pub seed: u64,
    /// `max_err / max_paths |f(X_T) - f(X_t)|`.
    pub relative_err: f64,
    #[serde(skip)]
    pub per_path_errors: Vec<f64>,
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let idx = ((sorted.len() - 1) as f64 * q).round() as usize;
    sorted[idx]
}

/// Simulates `bb` under the deterministic controls `u`, `v` and compares
/// `f(X_T) - f(X_t)` with the left-point sums
/// `Σ ∂_t f Δt + ∂_x f Δx + ½ Tr(∂_xx f σσᵀ) Δt`, derivatives taken numerically.
///
/// The quadratic-variation increment is the model covariance `σσᵀ Δt`, so
/// the discrepancy measures genuine discretization error. Paths are treated
/// as living on an extended horizon `2T` so horizontal differences are
/// available at the last step.
pub fn verify_functional_ito<F: PathFunctional + ?Sized>(
    f: &F,
    c: &GameCoefficients,
    initial: &Path,
    u: &CadlagPath,
    v: &CadlagPath,
    bb: &BrownianBatch,
    cfg: &StepConfig,
) -> Result<ItoReport> {
    if !f.smoothness().is_c12() {
        return Err(Error::HypothesisViolated(
            "functional Itô check needs a functional declared C^{1,2}".into(),
        ));
    }
    let sim = simulate_sde(c, initial, u, v, bb)?;
    let t_ext = 2.0 * c.horizon;
    let dt = bb.dt();
    let cfg = StepConfig {
        dt_rel: cfg.dt_rel.iter().map(|r| r * c.horizon / t_ext).collect(),
        h_rel: cfg.h_rel.clone(),
    };
    let n = c.dims.n;
    let offset = sim.offset;
    let results: Vec<Result<(f64, f64)>> = (0..sim.n_paths())
        .into_par_iter()
        .map(|i| {
            let x = &sim.states[i];
            let (uf, vf) = &sim.controls[i];
            let uf = uf.clone().with_horizon(t_ext)?;
            let vf = vf.clone().with_horizon(t_ext)?;
            let mut rhs = 0.0;
            let mut first = f64::NAN;
            let mut last = f64::NAN;
            for k in 0..=bb.n_steps() {
                let j = offset + k;
                let a = Path::new(x.grid()[..=j].to_vec(), x.raw_values()[..(j + 1) * n].to_vec(), n, t_ext)?;
                let t = sim.times[k];
                let at = PathTriple::new(a, uf.prefix(t)?, vf.prefix(t)?);
                if k == bb.n_steps() {
                    last = at.eval(f);
                    break;
                }
                let d = derivatives(f, &at, &cfg).map_err(|e| Error::Derivative {
                    index: k,
                    reason: e.to_string(),
                })?;
                if k == 0 {
                    first = d.value;
                }
                let s = c.diffusion_at(&at.a, &at.z, &at.w)?;
                let cov = &s * s.transpose();
                let dxv: Vec<f64> = (0..n).map(|r| x.point(j + 1)[r] - x.point(j)[r]).collect();
                let mut step = d.dt * dt;
                for r in 0..n {
                    step += d.dx[r] * dxv[r];
                }
                step += 0.5 * (&d.dxx * &cov).trace() * dt;
                rhs += step;
            }
            let lhs = last - first;
            if !lhs.is_finite() || !rhs.is_finite() {
                return Err(Error::NonFinite {
                    context: "verify_functional_ito",
                    step: bb.n_steps(),
                    path: i,
                });
            }
            Ok(((lhs - rhs).abs(), lhs.abs()))
        })
        .collect();
    let mut errors = Vec::with_capacity(results.len());
    let mut scale = 0.0f64;
    for r in results {
        let (e, s) = r?;
        errors.push(e);
        scale = scale.max(s);
    }
    let mut sorted = errors.clone();
    sorted.sort_by(f64::total_cmp);
    let max_err = sorted.last().copied().unwrap_or(0.0);
    Ok(ItoReport {
        n_paths: errors.len(),
        n_steps: bb.n_steps(),
        max_err,
        p50_err: quantile(&sorted, 0.5),
        p95_err: quantile(&sorted, 0.95),
        seed: bb.spec.seed,
        relative_err: if scale > 0.0 { max_err / scale } else { max_err },
        per_path_errors: errors,
    })
}

/// [`verify_functional_ito`] on coupled refinements: the fine batch is
/// aggregated to each requested step count, so all levels share one
/// Brownian path per sample.
#[allow(clippy::too_many_arguments)]
pub fn verify_functional_ito_refinement<F: PathFunctional + ?Sized>(
    f: &F,
    c: &GameCoefficients,
    initial: &Path,
    u: &CadlagPath,
    v: &CadlagPath,
    fine: &BrownianBatch,
    levels: &[usize],
    cfg: &StepConfig,
) -> Result<Vec<ItoReport>> {
    levels
        .iter()
        .map(|&n| {
            if n == 0 || fine.n_steps() % n != 0 {
                return Err(Error::invalid(format!(
                    "refinement level {n} does not divide the fine step count {}",
                    fine.n_steps()
                )));
            }
            let bb = fine.aggregate(fine.n_steps() / n)?;
            verify_functional_ito(f, c, initial, u, v, &bb, cfg)
        })
        .collect()
}
