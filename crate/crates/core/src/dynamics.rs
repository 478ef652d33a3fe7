//! Forward dynamics: game coefficients, reproducible Brownian batches and
//! Euler–Maruyama simulation of the path-dependent state equation
//! `dx = f(X, U, V) ds + σ(X, U, V) dB`.

use std::io::Write;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::path::{d_infty, sup_distance, time_eps, BallSampler, CadlagPath, ControlSet, HolderBall, Path, TimePath};
use crate::rng::stream_rng;

pub type DriftFn = dyn Fn(&Path, &CadlagPath, &CadlagPath) -> DVector<f64> + Send + Sync;
pub type DiffusionFn = dyn Fn(&Path, &CadlagPath, &CadlagPath) -> DMatrix<f64> + Send + Sync;
/// Running cost `l(X, y, q, U, V)`; `q` is the `1 x p` row as a slice.
pub type DriverFn = dyn Fn(&Path, f64, &[f64], &CadlagPath, &CadlagPath) -> f64 + Send + Sync;
pub type TerminalFn = dyn Fn(&Path) -> f64 + Send + Sync;

/// State dimension `n`, noise dimension `p`, control dimensions `m` and `l`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub n: usize,
    pub p: usize,
    pub m: usize,
    pub l: usize,
}

impl Dims {
    pub fn scalar() -> Self {
        Self { n: 1, p: 1, m: 1, l: 1 }
    }
}

/// Declared growth and regularity constants of the coefficients.
///
/// `lipschitz` is the common constant `L`. The driver's Lipschitz constants in
/// `y` and `q` may be declared separately (they default to `L`): the implicit
/// backward step needs `y_lipschitz * dt < 1`, and tree comparison needs
/// `q_lipschitz * sqrt(dt) <= 1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub bound: f64,
    pub lipschitz: f64,
    pub y_lipschitz: f64,
    pub q_lipschitz: f64,
}

impl Bounds {
    pub fn new(bound: f64, lipschitz: f64) -> Self {
        Self {
            bound,
            lipschitz,
            y_lipschitz: lipschitz,
            q_lipschitz: lipschitz,
        }
    }

    pub fn with_driver_lipschitz(mut self, y: f64, q: f64) -> Self {
        self.y_lipschitz = y;
        self.q_lipschitz = q;
        self
    }
}

/// Coefficients `f, σ, l, m` of a game together with its control sets.
///
/// Callbacks must be pure; they are invoked concurrently.
#[derive(Clone)]
pub struct GameCoefficients {
    pub name: String,
    pub dims: Dims,
    pub horizon: f64,
    pub bounds: Bounds,
    pub u_set: ControlSet,
    pub v_set: ControlSet,
    pub drift: Arc<DriftFn>,
    pub diffusion: Arc<DiffusionFn>,
    pub driver: Arc<DriverFn>,
    pub terminal: Arc<TerminalFn>,
}

impl std::fmt::Debug for GameCoefficients {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("GameCoefficients")
            .field("name", &self.name)
            .field("dims", &self.dims)
            .field("horizon", &self.horizon)
            .field("bounds", &self.bounds)
            .finish_non_exhaustive()
    }
}

impl GameCoefficients {
    /// Zero drift, zero diffusion, zero costs; fill in with the `with_*` setters.
    pub fn new(name: impl Into<String>, dims: Dims, horizon: f64, bounds: Bounds, u_set: ControlSet, v_set: ControlSet) -> Result<Self> {
        if dims.n == 0 || dims.p == 0 || dims.m == 0 || dims.l == 0 {
            return Err(Error::invalid("all game dimensions must be positive"));
        }
        if u_set.dim() != dims.m {
            return Err(Error::dims("player 1 control set", dims.m, u_set.dim()));
        }
        if v_set.dim() != dims.l {
            return Err(Error::dims("player 2 control set", dims.l, v_set.dim()));
        }
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(Error::invalid(format!("horizon must be positive, got {horizon}")));
        }
        let b = bounds;
        for (name, v) in [
            ("bound", b.bound),
            ("lipschitz", b.lipschitz),
            ("y_lipschitz", b.y_lipschitz),
            ("q_lipschitz", b.q_lipschitz),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("declared {name} must be finite and >= 0, got {v}")));
            }
        }
        let (n, p) = (dims.n, dims.p);
        Ok(Self {
            name: name.into(),
            dims,
            horizon,
            bounds,
            u_set,
            v_set,
            drift: Arc::new(move |_, _, _| DVector::zeros(n)),
            diffusion: Arc::new(move |_, _, _| DMatrix::zeros(n, p)),
            driver: Arc::new(|_, _, _, _, _| 0.0),
            terminal: Arc::new(|_| 0.0),
        })
    }

    pub fn with_drift(mut self, f: impl Fn(&Path, &CadlagPath, &CadlagPath) -> DVector<f64> + Send + Sync + 'static) -> Self {
        self.drift = Arc::new(f);
        self
    }

    pub fn with_diffusion(mut self, f: impl Fn(&Path, &CadlagPath, &CadlagPath) -> DMatrix<f64> + Send + Sync + 'static) -> Self {
        self.diffusion = Arc::new(f);
        self
    }

    pub fn with_driver(mut self, f: impl Fn(&Path, f64, &[f64], &CadlagPath, &CadlagPath) -> f64 + Send + Sync + 'static) -> Self {
        self.driver = Arc::new(f);
        self
    }

    pub fn with_terminal(mut self, f: impl Fn(&Path) -> f64 + Send + Sync + 'static) -> Self {
        self.terminal = Arc::new(f);
        self
    }

    pub fn with_bounds(mut self, bounds: Bounds) -> Self {
        self.bounds = bounds;
        self
    }

    pub fn with_control_sets(mut self, u_set: ControlSet, v_set: ControlSet) -> Result<Self> {
        if u_set.dim() != self.dims.m || v_set.dim() != self.dims.l {
            return Err(Error::invalid("control set dimensions do not match the game"));
        }
        self.u_set = u_set;
        self.v_set = v_set;
        Ok(self)
    }

    pub fn drift_at(&self, x: &Path, u: &CadlagPath, v: &CadlagPath) -> Result<DVector<f64>> {
        let f = (self.drift)(x, u, v);
        if f.len() != self.dims.n {
            return Err(Error::dims("drift output", self.dims.n, f.len()));
        }
        Ok(f)
    }

    pub fn diffusion_at(&self, x: &Path, u: &CadlagPath, v: &CadlagPath) -> Result<DMatrix<f64>> {
        let s = (self.diffusion)(x, u, v);
        if s.shape() != (self.dims.n, self.dims.p) {
            return Err(Error::dims("diffusion output rows*cols", self.dims.n * self.dims.p, s.len()));
        }
        Ok(s)
    }

    pub fn driver_at(&self, x: &Path, y: f64, q: &[f64], u: &CadlagPath, v: &CadlagPath) -> f64 {
        (self.driver)(x, y, q, u, v)
    }

    pub fn terminal_at(&self, x: &Path) -> f64 {
        (self.terminal)(x)
    }
}

/// Uniform time grid `t_k = t0 + k (T - t0) / n` with the last point exactly `T`.
pub fn time_grid(t0: f64, horizon: f64, n_steps: usize) -> Vec<f64> {
    let dt = (horizon - t0) / n_steps.max(1) as f64;
    (0..=n_steps)
        .map(|k| if k == n_steps { horizon } else { t0 + k as f64 * dt })
        .collect()
}

/// Distribution of the per-step Brownian increments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IncrementLaw {
    #[default]
    Gaussian,
    /// `±sqrt(dt)` with probability 1/2 each, matching the binomial scenario tree.
    Rademacher,
}

/// Reproducibility record of a [`BrownianBatch`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BatchSpec {
    pub seed: u64,
    pub n_paths: usize,
    pub n_steps: usize,
    pub t0: f64,
    pub horizon: f64,
    pub p: usize,
    #[serde(default)]
    pub law: IncrementLaw,
}

/// Brownian increments for `n_paths` paths on a uniform grid over `[t0, T]`.
///
/// Path `i` draws from its own stream `(seed, i)`, so batches are identical
/// regardless of thread count, and a batch with more paths extends one with
/// fewer.
#[derive(Debug, Clone, PartialEq)]
pub struct BrownianBatch {
    pub spec: BatchSpec,
    increments: Vec<f64>,
}

impl BrownianBatch {
    pub fn new(spec: BatchSpec) -> Result<Self> {
        if spec.n_paths == 0 || spec.n_steps == 0 || spec.p == 0 {
            return Err(Error::invalid("Brownian batch needs n_paths, n_steps, p > 0"));
        }
        if !(spec.horizon > spec.t0) {
            return Err(Error::invalid(format!(
                "Brownian batch needs t0 < T, got [{}, {}]",
                spec.t0, spec.horizon
            )));
        }
        let per_path = spec.n_steps * spec.p;
        let sd = ((spec.horizon - spec.t0) / spec.n_steps as f64).sqrt();
        let mut increments = vec![0.0; spec.n_paths * per_path];
        increments.par_chunks_mut(per_path).enumerate().for_each(|(i, chunk)| {
            let mut rng = stream_rng(spec.seed, i as u64);
            for x in chunk.iter_mut() {
                *x = match spec.law {
                    IncrementLaw::Gaussian => sd * rng.sample::<f64, _>(StandardNormal),
                    IncrementLaw::Rademacher => {
                        if rng.random_bool(0.5) {
                            sd
                        } else {
                            -sd
                        }
                    }
                };
            }
        });
        Ok(Self { spec, increments })
    }

    pub fn dt(&self) -> f64 {
        (self.spec.horizon - self.spec.t0) / self.spec.n_steps as f64
    }

    pub fn times(&self) -> Vec<f64> {
        time_grid(self.spec.t0, self.spec.horizon, self.spec.n_steps)
    }

    pub fn n_paths(&self) -> usize {
        self.spec.n_paths
    }

    pub fn n_steps(&self) -> usize {
        self.spec.n_steps
    }

    /// Increment `ΔB_k` of path `i` (length `p`).
    pub fn increment(&self, i: usize, k: usize) -> &[f64] {
        let p = self.spec.p;
        let base = (i * self.spec.n_steps + k) * p;
        &self.increments[base..base + p]
    }

    /// Coarser batch whose increments are sums of `factor` consecutive ones.
    pub fn aggregate(&self, factor: usize) -> Result<Self> {
        if factor == 0 || self.spec.n_steps % factor != 0 {
            return Err(Error::invalid(format!(
                "cannot aggregate {} steps by a factor of {factor}",
                self.spec.n_steps
            )));
        }
        let p = self.spec.p;
        let n_coarse = self.spec.n_steps / factor;
        let mut increments = vec![0.0; self.spec.n_paths * n_coarse * p];
        for i in 0..self.spec.n_paths {
            for k in 0..n_coarse {
                for j in 0..factor {
                    let fine = self.increment(i, k * factor + j);
                    let base = (i * n_coarse + k) * p;
                    for d in 0..p {
                        increments[base + d] += fine[d];
                    }
                }
            }
        }
        let mut spec = self.spec;
        spec.n_steps = n_coarse;
        Ok(Self { spec, increments })
    }
}

/// What a feedback policy sees at step `k`: the state prefix up to `t_k` and
/// the control histories on `[0, t_k]` (their value at `t_k` is the control
/// used on the previous step).
pub struct PolicyInput<'a> {
    pub path_index: usize,
    pub step: usize,
    pub time: f64,
    pub state: &'a Path,
    pub z: &'a CadlagPath,
    pub w: &'a CadlagPath,
}

pub type Policy<'a> = dyn Fn(&PolicyInput) -> (Vec<f64>, Vec<f64>) + Sync + 'a;

/// Simulated state paths and the control paths that drove them.
#[derive(Debug, Clone)]
pub struct SimulatedPaths {
    pub times: Vec<f64>,
    pub states: Vec<Path>,
    pub controls: Vec<(CadlagPath, CadlagPath)>,
    pub batch: BatchSpec,
    /// Grid index of the initial time within each state path.
    pub offset: usize,
}

impl SimulatedPaths {
    pub fn n_paths(&self) -> usize {
        self.states.len()
    }

    /// State prefix of path `i` up to step `k` (a borrowed-grid copy).
    pub fn prefix(&self, i: usize, k: usize) -> Result<Path> {
        self.states[i].prefix(self.times[k])
    }

    /// Long-format CSV: `path_id, time, v0, .., v{n-1}` for the simulated steps.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let n = self.states.first().map_or(0, |p| p.dim());
        let mut header = vec!["path_id".to_string(), "time".to_string()];
        header.extend((0..n).map(|k| format!("v{k}")));
        w.write_record(&header)?;
        for (i, p) in self.states.iter().enumerate() {
            for j in self.offset..p.len() {
                let mut row = vec![i.to_string(), p.grid()[j].to_string()];
                row.extend(p.point(j).iter().map(f64::to_string));
                w.write_record(&row)?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

fn check_start(initial: &Path, z: &CadlagPath, w: &CadlagPath, c: &GameCoefficients, t0: f64) -> Result<()> {
    let eps = time_eps(c.horizon);
    if initial.dim() != c.dims.n {
        return Err(Error::dims("initial path", c.dims.n, initial.dim()));
    }
    if z.dim() != c.dims.m {
        return Err(Error::dims("player 1 control history", c.dims.m, z.dim()));
    }
    if w.dim() != c.dims.l {
        return Err(Error::dims("player 2 control history", c.dims.l, w.dim()));
    }
    for (ctx, t) in [
        ("initial path end vs simulation start", initial.t_end()),
        ("player 1 history end vs simulation start", z.t_end()),
        ("player 2 history end vs simulation start", w.t_end()),
    ] {
        if (t - t0).abs() > eps {
            return Err(Error::TimeMismatch {
                context: ctx,
                left: t,
                right: t0,
            });
        }
    }
    if (initial.horizon() - c.horizon).abs() > eps && initial.horizon() < c.horizon {
        return Err(Error::invalid(format!(
            "initial path horizon {} is shorter than the game horizon {}",
            initial.horizon(),
            c.horizon
        )));
    }
    Ok(())
}

/// One Euler–Maruyama step from the end of `x`, appending the new point at `t_next`.
pub(crate) fn euler_step(
    c: &GameCoefficients,
    x: &mut Path,
    u: &CadlagPath,
    v: &CadlagPath,
    db: &[f64],
    t_next: f64,
    dt: f64,
) -> Result<bool> {
    let f = c.drift_at(x, u, v)?;
    let s = c.diffusion_at(x, u, v)?;
    let mut next = x.terminal().to_vec();
    for (r, xr) in next.iter_mut().enumerate() {
        let mut noise = 0.0;
        for (j, b) in db.iter().enumerate() {
            noise += s[(r, j)] * b;
        }
        *xr += f[r] * dt + noise;
    }
    let finite = next.iter().all(|v| v.is_finite());
    if finite {
        x.push(t_next, &next)?;
    }
    Ok(finite)
}

/// Simulates every path of `bb` under the feedback `policy`.
///
/// `initial`, `z0` and `w0` must end at the batch start time. At step `k`
/// the policy's controls are substituted as the terminal values of the
/// histories, which then drive one Euler step.
pub fn simulate_with_policy(
    c: &GameCoefficients,
    initial: &Path,
    z0: &CadlagPath,
    w0: &CadlagPath,
    bb: &BrownianBatch,
    policy: &Policy,
) -> Result<SimulatedPaths> {
    let spec = bb.spec;
    check_start(initial, z0, w0, c, spec.t0)?;
    if spec.p != c.dims.p {
        return Err(Error::dims("Brownian batch noise dimension", c.dims.p, spec.p));
    }
    if (spec.horizon - c.horizon).abs() > time_eps(c.horizon) {
        return Err(Error::TimeMismatch {
            context: "Brownian batch horizon vs game horizon",
            left: spec.horizon,
            right: c.horizon,
        });
    }
    let times = bb.times();
    let dt = bb.dt();
    let results: Vec<Result<(Path, (CadlagPath, CadlagPath))>> = (0..spec.n_paths)
        .into_par_iter()
        .map(|i| {
            let mut x = initial.clone();
            let mut z = z0.clone();
            let mut w = w0.clone();
            for k in 0..spec.n_steps {
                if k > 0 {
                    z.extend_to_in_place(times[k])?;
                    w.extend_to_in_place(times[k])?;
                }
                let (u, v) = policy(&PolicyInput {
                    path_index: i,
                    step: k,
                    time: times[k],
                    state: &x,
                    z: &z,
                    w: &w,
                });
                c.u_set.check(&u)?;
                c.v_set.check(&v)?;
                z.set_terminal(&u)?;
                w.set_terminal(&v)?;
                if !euler_step(c, &mut x, &z, &w, bb.increment(i, k), times[k + 1], dt)? {
                    return Err(Error::NonFinite {
                        context: "simulate_sde",
                        step: k,
                        path: i,
                    });
                }
            }
            Ok((x, (z.extend_to(spec.horizon)?, w.extend_to(spec.horizon)?)))
        })
        .collect();
    let mut states = Vec::with_capacity(spec.n_paths);
    let mut controls = Vec::with_capacity(spec.n_paths);
    for r in results {
        let (x, uv) = r?;
        states.push(x);
        controls.push(uv);
    }
    Ok(SimulatedPaths {
        times,
        states,
        controls,
        batch: spec,
        offset: initial.len() - 1,
    })
}

/// Euler–Maruyama under deterministic control paths `u`, `v` on `[0, T]`.
///
/// The state equals `initial` on `[0, t]` and the controls used at step `k`
/// are `u`, `v` restricted to `[0, t_k]`.
pub fn simulate_sde(c: &GameCoefficients, initial: &Path, u: &CadlagPath, v: &CadlagPath, bb: &BrownianBatch) -> Result<SimulatedPaths> {
    let eps = time_eps(c.horizon);
    if u.t_end() < c.horizon - eps || v.t_end() < c.horizon - eps {
        return Err(Error::invalid("simulate_sde needs control paths defined on [0, T]"));
    }
    let t0 = bb.spec.t0;
    let z0 = u.prefix(t0)?;
    let w0 = v.prefix(t0)?;
    let policy = |inp: &PolicyInput| (u.eval(inp.time), v.eval(inp.time));
    simulate_with_policy(c, initial, &z0, &w0, bb, &policy)
}

/// Sampling configuration for [`validate_coefficient_bounds`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeSpec {
    /// State paths are drawn from this Hölder ball.
    pub ball: HolderBall,
    pub grid_size: usize,
    /// Standard deviation of the sampled `y` and `q` arguments of the driver.
    pub yq_scale: f64,
}

impl Default for ProbeSpec {
    fn default() -> Self {
        Self {
            ball: HolderBall {
                kappa: 0.5,
                mu: 4.0,
                mu0: 2.0,
            },
            grid_size: 9,
            yq_scale: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientBoundsReport {
    pub probes: usize,
    pub max_ratio_f: f64,
    pub max_ratio_sigma: f64,
    pub max_ratio_l: f64,
    pub max_ratio_m: f64,
    /// Probes whose coefficient outputs exceed the declared bound `M`.
    pub bound_violations: usize,
    /// Probes whose Lipschitz ratio exceeds the declared `L`.
    pub lipschitz_violations: usize,
}

fn random_control(set: &ControlSet, t_end: f64, horizon: f64, rng: &mut impl Rng) -> Result<CadlagPath> {
    let jumps = rng.random_range(0..3usize);
    let mut times: Vec<f64> = (0..jumps).map(|_| rng.random_range(0.0..t_end.max(1e-12))).collect();
    times.sort_by(f64::total_cmp);
    times.dedup();
    times.retain(|&t| t > 0.0);
    let mut grid = vec![0.0];
    grid.extend(times);
    let points: Vec<Vec<f64>> = grid.iter().map(|_| set.sample(rng)).collect();
    CadlagPath::from_points(grid, &points, t_end, horizon)
}

fn random_vec(n: usize, scale: f64, rng: &mut impl Rng) -> Vec<f64> {
    (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Samples input pairs and measures the Lipschitz ratios and bounds of the
/// coefficients against the metrics of the standing assumption.
///
/// Half of the pairs are independent draws, half are small perturbations of
/// one draw, so both global and local behavior is probed.
pub fn validate_coefficient_bounds(c: &GameCoefficients, probes: usize, seed: u64, spec: &ProbeSpec) -> Result<CoefficientBoundsReport> {
    if probes < 2 {
        return Err(Error::invalid("validate_coefficient_bounds needs probes >= 2"));
    }
    let t = c.horizon;
    let d = c.dims;
    let tol = 1e-9;
    let mut report = CoefficientBoundsReport {
        probes,
        max_ratio_f: 0.0,
        max_ratio_sigma: 0.0,
        max_ratio_l: 0.0,
        max_ratio_m: 0.0,
        bound_violations: 0,
        lipschitz_violations: 0,
    };
    for i in 0..probes {
        let mut rng = stream_rng(seed, i as u64);
        let s1 = rng.random_range(0.25 * t..=t);
        let local = i % 2 == 1;
        let s2 = if local {
            (s1 - rng.random_range(0.0..0.01 * t)).max(1e-6 * t)
        } else {
            rng.random_range(0.25 * t..=t)
        };
        let sampler = |s: f64| BallSampler::new(spec.ball, d.n, s, spec.grid_size).horizon(t);
        let x1 = sampler(s1).sample(seed, 2 * i as u64)?;
        let x2 = if local {
            let shift = 0.01 * rng.random_range(-1.0..1.0);
            let mut p = x1.clone().prefix(s2.min(x1.t_end()))?;
            for v in p.values_mut() {
                *v += shift;
            }
            p
        } else {
            sampler(s2).sample(seed, 2 * i as u64 + 1)?
        };
        let u1 = random_control(&c.u_set, s1, t, &mut rng)?;
        let v1 = random_control(&c.v_set, s1, t, &mut rng)?;
        let (u2, v2) = if local {
            (u1.prefix(s2)?, v1.prefix(s2)?)
        } else {
            (
                random_control(&c.u_set, s2, t, &mut rng)?,
                random_control(&c.v_set, s2, t, &mut rng)?,
            )
        };
        let dist = d_infty(&x1, &x2)? + d_infty(&u1, &u2)? + d_infty(&v1, &v2)?;

        let f1 = c.drift_at(&x1, &u1, &v1)?;
        let f2 = c.drift_at(&x2, &u2, &v2)?;
        let g1 = c.diffusion_at(&x1, &u1, &v1)?;
        let g2 = c.diffusion_at(&x2, &u2, &v2)?;
        let (y1, y2) = (
            spec.yq_scale * rng.sample::<f64, _>(StandardNormal),
            spec.yq_scale * rng.sample::<f64, _>(StandardNormal),
        );
        let q1 = random_vec(d.p, spec.yq_scale, &mut rng);
        let q2 = random_vec(d.p, spec.yq_scale, &mut rng);
        let l1 = c.driver_at(&x1, y1, &q1, &u1, &v1);
        let l2 = c.driver_at(&x2, y2, &q2, &u2, &v2);
        let qd: f64 = q1.iter().zip(&q2).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();

        let xt1 = sampler(t).sample(seed ^ 0x5eed, 2 * i as u64)?;
        let xt2 = sampler(t).sample(seed ^ 0x5eed, 2 * i as u64 + 1)?;
        let m1 = c.terminal_at(&xt1);
        let m2 = c.terminal_at(&xt2);

        let outputs = [f1.norm(), f2.norm(), g1.norm(), g2.norm(), l1.abs(), l2.abs(), m1.abs(), m2.abs()];
        if outputs.iter().any(|o| !o.is_finite()) {
            return Err(Error::NonFinite {
                context: "validate_coefficient_bounds",
                step: 0,
                path: i,
            });
        }
        if outputs.iter().any(|&o| o > c.bounds.bound * (1.0 + tol)) {
            report.bound_violations += 1;
        }
        let ratio = |num: f64, den: f64| {
            if den > 0.0 {
                num / den
            } else if num > 0.0 {
                f64::INFINITY
            } else {
                0.0
            }
        };
        let rf = ratio((&f1 - &f2).norm(), dist);
        let rs = ratio((&g1 - &g2).norm(), dist);
        let rl = ratio((l1 - l2).abs(), dist + (y1 - y2).abs() + qd);
        let rm = ratio((m1 - m2).abs(), sup_distance(&xt1, &xt2)?);
        report.max_ratio_f = report.max_ratio_f.max(rf);
        report.max_ratio_sigma = report.max_ratio_sigma.max(rs);
        report.max_ratio_l = report.max_ratio_l.max(rl);
        report.max_ratio_m = report.max_ratio_m.max(rm);
        if [rf, rs, rl, rm].iter().any(|&r| r > c.bounds.lipschitz * (1.0 + tol)) {
            report.lipschitz_violations += 1;
        }
    }
    Ok(report)
}

/// Sample moments used to monitor the a-priori state estimates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentReport {
    /// `E ||X_T||_inf^2`.
    pub sup_sq: f64,
    /// `E ||X_T||_inf^2 / (1 + ||A_t||_inf^2)`.
    pub growth_ratio: f64,
    /// `(t2 - t1, E ||X_{t2} - X_{t1, t2 - t1}||_inf^2 / (t2 - t1))` for
    /// `t1` the start time and dyadic `t2`.
    pub increment_rates: Vec<(f64, f64)>,
    /// `E ||X^1_T - X^2_T||_inf^2` against a perturbed input, when supplied.
    pub stability_distance: Option<f64>,
    /// `||A^1 - A^2||_inf + E int ||U^1 - U^2||^2 + ||V^1 - V^2||^2 dr` for the same pair.
    pub stability_input: Option<f64>,
}

/// `E ||X_{t_k} - X_{t_j, t_k - t_j}||_inf^2` over the simulated paths.
pub fn increment_moment(sim: &SimulatedPaths, j: usize, k: usize) -> Result<f64> {
    let mut acc = 0.0;
    for x in &sim.states {
        let a = x.prefix(sim.times[j])?;
        let b = x.prefix(sim.times[k])?;
        let gap = sup_distance(&a, &b)?;
        acc += gap * gap;
    }
    Ok(acc / sim.n_paths() as f64)
}

fn control_gap_integral(a: &CadlagPath, b: &CadlagPath, times: &[f64]) -> Result<f64> {
    let mut acc = 0.0;
    for w in times.windows(2) {
        let g = sup_distance(&a.prefix(w[0])?, &b.prefix(w[0])?)?;
        acc += g * g * (w[1] - w[0]);
    }
    Ok(acc)
}

/// Moment estimates for the state under deterministic controls; with
/// `perturbed = Some((A2, U2, V2))` also the stability distance between the
/// two solutions driven by the same noise.
pub fn estimate_moment_bounds(
    c: &GameCoefficients,
    initial: &Path,
    u: &CadlagPath,
    v: &CadlagPath,
    bb: &BrownianBatch,
    perturbed: Option<(&Path, &CadlagPath, &CadlagPath)>,
) -> Result<MomentReport> {
    let sim = simulate_sde(c, initial, u, v, bb)?;
    let n = sim.n_paths() as f64;
    let sup_sq = sim.states.iter().map(|x| x.sup_norm().powi(2)).sum::<f64>() / n;
    let a = initial.sup_norm();
    let mut increment_rates = Vec::new();
    let mut k = bb.n_steps();
    while k >= 1 {
        let h = sim.times[k] - sim.times[0];
        increment_rates.push((h, increment_moment(&sim, 0, k)? / h));
        if k % 2 != 0 {
            break;
        }
        k /= 2;
    }
    let (stability_distance, stability_input) = match perturbed {
        Some((a2, u2, v2)) => {
            let sim2 = simulate_sde(c, a2, u2, v2, bb)?;
            let mut acc = 0.0;
            for (x1, x2) in sim.states.iter().zip(&sim2.states) {
                let g = sup_distance(x1, x2)?;
                acc += g * g;
            }
            let input = sup_distance(initial, a2)? + control_gap_integral(u, u2, &sim.times)? + control_gap_integral(v, v2, &sim.times)?;
            (Some(acc / n), Some(input))
        }
        None => (None, None),
    };
    Ok(MomentReport {
        sup_sq,
        growth_ratio: sup_sq / (1.0 + a * a),
        increment_rates,
        stability_distance,
        stability_input,
    })
}
