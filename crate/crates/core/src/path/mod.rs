//! Path containers for state and control histories.
//!
//! A [`Path`] is a continuous path on `[0, t]`, stored as a piecewise-linear
//! function on an explicit time grid. A [`CadlagPath`] is a right-continuous,
//! piecewise-constant path with left limits, used for control histories.
//! Both carry the global horizon `T` so that flat extensions can be checked.
//!
//! The operations needed by the game machinery live in the submodules:
//! metrics ([`metric`]), Hölder moduli and balls ([`holder`]), control sets
//! ([`control`]) and CSV/JSON serialization ([`io`]).

pub mod control;
pub mod holder;
pub mod io;
pub mod metric;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use control::ControlSet;
pub use holder::{holder_modulus, in_holder_ball, perturb_path, project_into_ball, sample_holder_ball, BallSampler, HolderBall};
pub use metric::{d_infty, skorohod_d, sup_distance};

/// Absolute tolerance used when comparing grid times.
pub fn time_eps(horizon: f64) -> f64 {
    1e-12 * horizon.abs().max(1.0)
}

/// Width of the pre-terminal cell used to represent a vertical bump.
pub fn vertical_eps(horizon: f64) -> f64 {
    1e-9 * horizon.abs().max(f64::MIN_POSITIVE)
}

/// Shared read access to grid-based paths.
pub trait TimePath {
    fn grid(&self) -> &[f64];
    fn raw_values(&self) -> &[f64];
    fn dim(&self) -> usize;
    fn t_end(&self) -> f64;
    fn horizon(&self) -> f64;

    /// Value of the path at time `s`. Times past `t_end` return the terminal
    /// value (flat extension), times before the first grid point the first value.
    fn eval_into(&self, s: f64, out: &mut [f64]);

    fn len(&self) -> usize {
        self.grid().len()
    }

    fn is_empty(&self) -> bool {
        self.grid().is_empty()
    }

    fn start(&self) -> f64 {
        self.grid()[0]
    }

    fn point(&self, i: usize) -> &[f64] {
        let d = self.dim();
        &self.raw_values()[i * d..(i + 1) * d]
    }

    fn terminal(&self) -> &[f64] {
        self.point(self.len() - 1)
    }

    fn eval(&self, s: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        self.eval_into(s, &mut out);
        out
    }

    fn sup_norm(&self) -> f64 {
        (0..self.len()).map(|i| norm(self.point(i))).fold(0.0, f64::max)
    }
}

pub(crate) fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub(crate) fn dist(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
}

fn validate_grid(grid: &[f64], values: &[f64], dim: usize, horizon: f64) -> Result<()> {
    if dim == 0 {
        return Err(Error::invalid("path dimension must be positive"));
    }
    if grid.is_empty() {
        return Err(Error::invalid("path grid must be nonempty"));
    }
    if values.len() != grid.len() * dim {
        return Err(Error::dims("path values", grid.len() * dim, values.len()));
    }
    if !horizon.is_finite() || horizon < 0.0 {
        return Err(Error::invalid(format!("horizon must be finite and >= 0, got {horizon}")));
    }
    if grid.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::invalid("path grid must be strictly increasing"));
    }
    if grid.iter().chain(values).any(|v| !v.is_finite()) {
        return Err(Error::invalid("path grid and values must be finite"));
    }
    let last = *grid.last().unwrap();
    if last > horizon + time_eps(horizon) {
        return Err(Error::HorizonOverflow {
            horizon,
            t_end: last,
            delta: 0.0,
        });
    }
    Ok(())
}

/// Index of the last grid point `<= s` (0 if `s` precedes the grid).
fn segment_index(grid: &[f64], s: f64) -> usize {
    match grid.partition_point(|&g| g <= s) {
        0 => 0,
        k => k - 1,
    }
}

/// Continuous path on `[0, t_end]`, linear between grid points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Path {
    grid: Vec<f64>,
    values: Vec<f64>,
    dim: usize,
    horizon: f64,
}

impl Path {
    /// Builds a path from a grid starting at 0 and row-major values.
    pub fn new(grid: Vec<f64>, values: Vec<f64>, dim: usize, horizon: f64) -> Result<Self> {
        validate_grid(&grid, &values, dim, horizon)?;
        if grid[0] != 0.0 {
            return Err(Error::invalid("continuous path grid must start at 0"));
        }
        Ok(Self {
            grid,
            values,
            dim,
            horizon,
        })
    }

    pub fn from_points(grid: Vec<f64>, points: &[Vec<f64>], horizon: f64) -> Result<Self> {
        let dim = points.first().map_or(0, Vec::len);
        if points.iter().any(|p| p.len() != dim) {
            return Err(Error::invalid("all path points must share one dimension"));
        }
        Self::new(grid, points.concat(), dim, horizon)
    }

    pub fn scalar(grid: Vec<f64>, values: Vec<f64>, horizon: f64) -> Result<Self> {
        Self::new(grid, values, 1, horizon)
    }

    /// Constant path equal to `x` on `[0, t_end]`.
    pub fn constant(x: &[f64], t_end: f64, horizon: f64) -> Result<Self> {
        if t_end > 0.0 {
            Self::new(vec![0.0, t_end], [x, x].concat(), x.len(), horizon)
        } else {
            Self::new(vec![0.0], x.to_vec(), x.len(), horizon)
        }
    }

    /// Appends a grid point; used by forward simulation.
    pub fn push(&mut self, t: f64, x: &[f64]) -> Result<()> {
        if x.len() != self.dim {
            return Err(Error::dims("Path::push", self.dim, x.len()));
        }
        let last = self.t_end();
        if !(t > last) {
            return Err(Error::TimeMismatch {
                context: "Path::push requires increasing time",
                left: last,
                right: t,
            });
        }
        if t > self.horizon + time_eps(self.horizon) {
            return Err(Error::HorizonOverflow {
                horizon: self.horizon,
                t_end: last,
                delta: t - last,
            });
        }
        self.grid.push(t);
        self.values.extend_from_slice(x);
        Ok(())
    }

    pub fn with_horizon(mut self, horizon: f64) -> Result<Self> {
        validate_grid(&self.grid, &self.values, self.dim, horizon)?;
        self.horizon = horizon;
        Ok(self)
    }

    /// `A_{t,delta}`: holds the terminal value constant on `[t_end, t_end + delta]`.
    pub fn flat_extend(&self, delta: f64) -> Result<Self> {
        check_extension(self.t_end(), delta, self.horizon)?;
        let mut out = self.clone();
        if delta > 0.0 {
            let t = (self.t_end() + delta).min(self.horizon);
            if t > self.t_end() {
                let x = self.terminal().to_vec();
                out.grid.push(t);
                out.values.extend_from_slice(&x);
            }
        }
        Ok(out)
    }

    /// `A_t^h`: bumps the terminal value by `h`, leaving `[0, t_end - eps_v]` unchanged.
    ///
    /// The bump is represented by a pre-terminal grid point at `t_end - eps_v`
    /// carrying the original interpolated value, followed by the bumped
    /// terminal point. Repeated bumps reuse the same pre-terminal point.
    pub fn vertical_extend(&self, h: &[f64]) -> Result<Self> {
        if h.len() != self.dim {
            return Err(Error::dims("vertical_extend", self.dim, h.len()));
        }
        let mut out = self.clone();
        let n = out.grid.len();
        let t = self.t_end();
        let eps = vertical_eps(self.horizon);
        if n >= 2 && t > 0.0 {
            let prev = out.grid[n - 2];
            if t - prev > eps * (1.0 + 1e-6) && t - eps > prev {
                let mid = self.eval(t - eps);
                let last = out.values.split_off((n - 1) * self.dim);
                out.grid.insert(n - 1, t - eps);
                out.values.extend_from_slice(&mid);
                out.values.extend_from_slice(&last);
            }
        }
        let k = out.grid.len() - 1;
        for (v, dh) in out.values[k * self.dim..].iter_mut().zip(h) {
            *v += dh;
        }
        Ok(out)
    }

    /// Restriction to `[0, t]`, interpolating at `t` when it is not a grid point.
    pub fn prefix(&self, t: f64) -> Result<Self> {
        let eps = time_eps(self.horizon);
        if t < -eps || t > self.t_end() + eps {
            return Err(Error::TimeMismatch {
                context: "Path::prefix",
                left: t,
                right: self.t_end(),
            });
        }
        let k = self.grid.partition_point(|&g| g <= t + eps);
        let mut grid = self.grid[..k].to_vec();
        let mut values = self.values[..k * self.dim].to_vec();
        let last = *grid.last().unwrap();
        if t - last > eps {
            let x = self.eval(t);
            grid.push(t);
            values.extend_from_slice(&x);
        }
        Ok(Self {
            grid,
            values,
            dim: self.dim,
            horizon: self.horizon,
        })
    }

    /// In-place [`Path::prefix`]; cheap when `t` is a grid point.
    pub(crate) fn truncate_to(&mut self, t: f64) -> Result<()> {
        let eps = time_eps(self.horizon);
        let k = self.grid.partition_point(|&g| g <= t + eps);
        if k > 0 && t - self.grid[k - 1] <= eps && t <= self.t_end() + eps {
            self.grid.truncate(k);
            self.values.truncate(k * self.dim);
            Ok(())
        } else {
            *self = self.prefix(t)?;
            Ok(())
        }
    }

    /// Maps every value through `g(time, value)`.
    pub fn map_values(&self, mut g: impl FnMut(f64, &[f64]) -> Vec<f64>) -> Result<Self> {
        let mut values = Vec::with_capacity(self.values.len());
        for i in 0..self.len() {
            let y = g(self.grid[i], self.point(i));
            if y.len() != self.dim {
                return Err(Error::dims("Path::map_values", self.dim, y.len()));
            }
            values.extend(y);
        }
        Self::new(self.grid.clone(), values, self.dim, self.horizon)
    }

    /// Trapezoidal integral of the path over `[0, t_end]` (exact for this path class).
    pub fn integral(&self) -> Vec<f64> {
        let mut acc = vec![0.0; self.dim];
        for i in 1..self.len() {
            let h = self.grid[i] - self.grid[i - 1];
            for (d, a) in acc.iter_mut().enumerate() {
                *a += 0.5 * h * (self.values[(i - 1) * self.dim + d] + self.values[i * self.dim + d]);
            }
        }
        acc
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }
}

impl TimePath for Path {
    fn grid(&self) -> &[f64] {
        &self.grid
    }

    fn raw_values(&self) -> &[f64] {
        &self.values
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn t_end(&self) -> f64 {
        *self.grid.last().unwrap()
    }

    fn horizon(&self) -> f64 {
        self.horizon
    }

    fn eval_into(&self, s: f64, out: &mut [f64]) {
        let n = self.grid.len();
        let i = segment_index(&self.grid, s);
        if i + 1 >= n || s <= self.grid[0] {
            let j = if s <= self.grid[0] { 0 } else { n - 1 };
            out.copy_from_slice(self.point(j));
            return;
        }
        let (t0, t1) = (self.grid[i], self.grid[i + 1]);
        let w = (s - t0) / (t1 - t0);
        let (a, b) = (self.point(i), self.point(i + 1));
        for d in 0..self.dim {
            out[d] = a[d] + w * (b[d] - a[d]);
        }
    }
}

fn check_extension(t_end: f64, delta: f64, horizon: f64) -> Result<()> {
    if !(delta >= 0.0) || !delta.is_finite() {
        return Err(Error::invalid(format!("flat extension needs delta >= 0, got {delta}")));
    }
    if t_end + delta > horizon + time_eps(horizon) {
        return Err(Error::HorizonOverflow { horizon, t_end, delta });
    }
    Ok(())
}

/// Right-continuous piecewise-constant path on `[grid[0], t_end]`.
///
/// The value at `s` is `values[i]` for the largest `grid[i] <= s`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CadlagPath {
    grid: Vec<f64>,
    values: Vec<f64>,
    dim: usize,
    t_end: f64,
    horizon: f64,
}

impl CadlagPath {
    pub fn new(grid: Vec<f64>, values: Vec<f64>, dim: usize, t_end: f64, horizon: f64) -> Result<Self> {
        validate_grid(&grid, &values, dim, horizon)?;
        let last = *grid.last().unwrap();
        if t_end < last || t_end > horizon + time_eps(horizon) {
            return Err(Error::invalid(format!("cadlag t_end {t_end} must lie in [{last}, {horizon}]")));
        }
        Ok(Self {
            grid,
            values,
            dim,
            t_end,
            horizon,
        })
    }

    pub fn from_points(grid: Vec<f64>, points: &[Vec<f64>], t_end: f64, horizon: f64) -> Result<Self> {
        let dim = points.first().map_or(0, Vec::len);
        if points.iter().any(|p| p.len() != dim) {
            return Err(Error::invalid("all path points must share one dimension"));
        }
        Self::new(grid, points.concat(), dim, t_end, horizon)
    }

    /// Constant control `u` on `[start, t_end]`.
    pub fn constant(u: &[f64], start: f64, t_end: f64, horizon: f64) -> Result<Self> {
        Self::new(vec![start], u.to_vec(), u.len(), t_end, horizon)
    }

    /// Flat extension: only the right end moves.
    pub fn flat_extend(&self, delta: f64) -> Result<Self> {
        check_extension(self.t_end, delta, self.horizon)?;
        let mut out = self.clone();
        out.t_end = (self.t_end + delta).min(self.horizon).max(self.t_end);
        Ok(out)
    }

    pub fn with_horizon(mut self, horizon: f64) -> Result<Self> {
        validate_grid(&self.grid, &self.values, self.dim, horizon)?;
        if self.t_end > horizon + time_eps(horizon) {
            return Err(Error::invalid("cadlag t_end exceeds the new horizon"));
        }
        self.horizon = horizon;
        Ok(self)
    }

    /// Flat extension up to the absolute time `t`, avoiding the roundoff of
    /// `t_end + (t - t_end)`.
    pub fn extend_to(&self, t: f64) -> Result<Self> {
        let mut out = self.clone();
        out.extend_to_in_place(t)?;
        Ok(out)
    }

    pub(crate) fn extend_to_in_place(&mut self, t: f64) -> Result<()> {
        check_extension(self.t_end, t - self.t_end, self.horizon)?;
        self.t_end = t;
        Ok(())
    }

    /// Replaces the value at `t_end` by `x`, keeping the path on `[start, t_end)`.
    pub fn with_terminal(&self, x: &[f64]) -> Result<Self> {
        let mut out = self.clone();
        out.set_terminal(x)?;
        Ok(out)
    }

    pub(crate) fn set_terminal(&mut self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim {
            return Err(Error::dims("cadlag terminal substitution", self.dim, x.len()));
        }
        let n = self.grid.len();
        let eps = time_eps(self.horizon);
        if self.t_end - self.grid[n - 1] <= eps {
            if n >= 2 && self.point(n - 2) == x {
                self.grid.pop();
                self.values.truncate((n - 1) * self.dim);
            } else {
                self.values[(n - 1) * self.dim..].copy_from_slice(x);
            }
        } else if self.point(n - 1) != x {
            self.grid.push(self.t_end);
            self.values.extend_from_slice(x);
        }
        Ok(())
    }

    /// Vertical bump of the terminal value by `h`.
    pub fn vertical_extend(&self, h: &[f64]) -> Result<Self> {
        if h.len() != self.dim {
            return Err(Error::dims("cadlag vertical_extend", self.dim, h.len()));
        }
        let x: Vec<f64> = self.terminal().iter().zip(h).map(|(a, b)| a + b).collect();
        self.with_terminal(&x)
    }

    /// Restriction to `[start, t]` (value at `t` included).
    pub fn prefix(&self, t: f64) -> Result<Self> {
        let eps = time_eps(self.horizon);
        if t < self.start() - eps || t > self.t_end + eps {
            return Err(Error::TimeMismatch {
                context: "CadlagPath::prefix",
                left: t,
                right: self.t_end,
            });
        }
        let k = self.grid.partition_point(|&g| g <= t + eps).max(1);
        Ok(Self {
            grid: self.grid[..k].to_vec(),
            values: self.values[..k * self.dim].to_vec(),
            dim: self.dim,
            t_end: t.max(self.grid[k - 1]),
            horizon: self.horizon,
        })
    }

    /// In-place [`CadlagPath::prefix`].
    pub(crate) fn truncate_to(&mut self, t: f64) -> Result<()> {
        let eps = time_eps(self.horizon);
        if t < self.start() - eps || t > self.t_end + eps {
            return Err(Error::TimeMismatch {
                context: "CadlagPath::truncate_to",
                left: t,
                right: self.t_end,
            });
        }
        let k = self.grid.partition_point(|&g| g <= t + eps).max(1);
        self.grid.truncate(k);
        self.values.truncate(k * self.dim);
        self.t_end = t.max(self.grid[k - 1]);
        Ok(())
    }

    /// Restriction to `[t, t_end]`, starting with a grid point at `t`.
    pub fn suffix(&self, t: f64) -> Result<Self> {
        let eps = time_eps(self.horizon);
        if t < self.start() - eps || t > self.t_end + eps {
            return Err(Error::TimeMismatch {
                context: "CadlagPath::suffix",
                left: t,
                right: self.t_end,
            });
        }
        let mut grid = vec![t];
        let mut values = self.eval(t);
        let k = self.grid.partition_point(|&g| g <= t + eps);
        grid.extend_from_slice(&self.grid[k..]);
        values.extend_from_slice(&self.values[k * self.dim..]);
        Ok(Self {
            grid,
            values,
            dim: self.dim,
            t_end: self.t_end.max(t),
            horizon: self.horizon,
        })
    }

    /// Indices of grid points where the value changes, always including the first.
    pub(crate) fn jump_indices(&self) -> Vec<usize> {
        let mut out = vec![0];
        for i in 1..self.len() {
            if self.point(i) != self.point(i - 1) {
                out.push(i);
            }
        }
        out
    }
}

impl TimePath for CadlagPath {
    fn grid(&self) -> &[f64] {
        &self.grid
    }

    fn raw_values(&self) -> &[f64] {
        &self.values
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn t_end(&self) -> f64 {
        self.t_end
    }

    fn horizon(&self) -> f64 {
        self.horizon
    }

    fn eval_into(&self, s: f64, out: &mut [f64]) {
        let i = segment_index(&self.grid, s);
        out.copy_from_slice(self.point(i));
    }
}

/// Flat extension for either path kind.
pub fn flat_extend<P: FlatExtend>(p: &P, delta: f64) -> Result<P> {
    p.flat_extend_by(delta)
}

pub trait FlatExtend: Sized {
    fn flat_extend_by(&self, delta: f64) -> Result<Self>;
}

impl FlatExtend for Path {
    fn flat_extend_by(&self, delta: f64) -> Result<Self> {
        self.flat_extend(delta)
    }
}

impl FlatExtend for CadlagPath {
    fn flat_extend_by(&self, delta: f64) -> Result<Self> {
        self.flat_extend(delta)
    }
}

/// `Z_t ⊗ u`: `init` on `[0, t)` followed by `tail` on `[t, T]`.
pub fn concat(init: &CadlagPath, tail: &CadlagPath, set: Option<&ControlSet>) -> Result<CadlagPath> {
    if init.dim != tail.dim {
        return Err(Error::dims("concat", init.dim, tail.dim));
    }
    let t = tail.start();
    let eps = time_eps(init.horizon.max(tail.horizon));
    if (init.t_end - t).abs() > eps {
        return Err(Error::TimeMismatch {
            context: "concat: init end vs tail start",
            left: init.t_end,
            right: t,
        });
    }
    if let Some(set) = set {
        for p in [init, tail] {
            for i in 0..p.len() {
                set.check(p.point(i))?;
            }
        }
    }
    let k = init.grid.partition_point(|&g| g < t - eps);
    let mut grid = init.grid[..k].to_vec();
    let mut values = init.values[..k * init.dim].to_vec();
    grid.extend_from_slice(&tail.grid);
    values.extend_from_slice(&tail.values);
    CadlagPath::new(grid, values, init.dim, tail.t_end, tail.horizon.max(init.horizon))
}

/// `Z_t^u`: the path `z` on `[0, t)` with terminal value `u` at `t`.
pub fn vertical_control_sub(z: &CadlagPath, u: &[f64], set: Option<&ControlSet>) -> Result<CadlagPath> {
    if let Some(set) = set {
        set.check(u)?;
    }
    z.with_terminal(u)
}
