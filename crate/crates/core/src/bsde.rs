//! Backward solvers for `dy = -l(X, y, q, U, V) ds + q dB`, `y_T = m(X_T)`:
//! exact recursion on scenario trees and least-squares Monte Carlo on
//! simulated batches, plus the truncated backward semigroup and the
//! objective functional built on them.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{euler_step, time_grid, BrownianBatch, DriverFn, GameCoefficients, SimulatedPaths};
use crate::error::{Error, Result};
use crate::path::{time_eps, CadlagPath, Path, TimePath};

/// Node budget for materialized trees.
pub const DEFAULT_NODE_BUDGET: usize = 1 << 20;

const FIXED_POINT_MAX_ITER: usize = 50;
const FIXED_POINT_TOL: f64 = 1e-12;

/// Slack used when comparing backward solutions: `1e-10 (1 + |y|)`.
pub fn comparison_slack(y: f64) -> f64 {
    1e-10 * (1.0 + y.abs())
}

/// Shape of a scenario tree over `[t0, t_end]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TreeSpec {
    pub n_steps: usize,
    /// Increment values per noise coordinate: 2 (`±sqrt(dt)`) or 3
    /// (`0, ±sqrt(3 dt)` with probabilities `2/3, 1/6, 1/6`).
    pub branching: usize,
    pub t0: f64,
    pub t_end: f64,
    pub node_budget: usize,
}

impl TreeSpec {
    pub fn new(n_steps: usize, branching: usize, t0: f64, t_end: f64) -> Self {
        Self {
            n_steps,
            branching,
            t0,
            t_end,
            node_budget: DEFAULT_NODE_BUDGET,
        }
    }

    pub fn dt(&self) -> f64 {
        if self.n_steps == 0 {
            0.0
        } else {
            (self.t_end - self.t0) / self.n_steps as f64
        }
    }

    pub fn times(&self) -> Vec<f64> {
        time_grid(self.t0, self.t_end, self.n_steps)
    }

    fn validate(&self) -> Result<()> {
        if !(self.branching == 2 || self.branching == 3) {
            return Err(Error::invalid(format!("tree branching must be 2 or 3, got {}", self.branching)));
        }
        if self.n_steps > 0 && !(self.t_end > self.t0) {
            return Err(Error::invalid(format!("tree needs t0 < t_end, got [{}, {}]", self.t0, self.t_end)));
        }
        Ok(())
    }
}

/// Per-step increment distribution of a tree: `B = branching^p` outcomes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Increments {
    pub values: Vec<Vec<f64>>,
    pub probs: Vec<f64>,
}

impl Increments {
    pub fn new(branching: usize, p: usize, dt: f64) -> Result<Self> {
        let (vals, probs): (Vec<f64>, Vec<f64>) = match branching {
            2 => (vec![-dt.sqrt(), dt.sqrt()], vec![0.5, 0.5]),
            3 => {
                let a = (3.0 * dt).sqrt();
                (vec![-a, 0.0, a], vec![1.0 / 6.0, 2.0 / 3.0, 1.0 / 6.0])
            }
            _ => return Err(Error::invalid(format!("unsupported branching {branching}"))),
        };
        let count = branching
            .checked_pow(p as u32)
            .ok_or_else(|| Error::invalid("branching^p overflows"))?;
        let mut values = Vec::with_capacity(count);
        let mut out_p = Vec::with_capacity(count);
        for j in 0..count {
            let mut rest = j;
            let mut v = vec![0.0; p];
            let mut pr = 1.0;
            for d in (0..p).rev() {
                let digit = rest % branching;
                rest /= branching;
                v[d] = vals[digit];
                pr *= probs[digit];
            }
            values.push(v);
            out_p.push(pr);
        }
        Ok(Self { values, probs: out_p })
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

/// State and control histories at a tree node.
///
/// For a non-leaf node at time `t_k` the control histories end with the
/// controls applied on `[t_k, t_{k+1})`; at a leaf they are flat
/// extensions of the last applied controls.
#[derive(Debug, Clone, PartialEq)]
pub struct TreeNode {
    pub x: Path,
    pub z: CadlagPath,
    pub w: CadlagPath,
}

/// Children of `(x, z, w)` after one Euler step; `z`, `w` must already carry
/// the applied controls at `t_k`.
pub(crate) fn step_children(c: &GameCoefficients, node: &TreeNode, inc: &Increments, t_next: f64, dt: f64) -> Result<Vec<TreeNode>> {
    let z = node.z.extend_to(t_next)?;
    let w = node.w.extend_to(t_next)?;
    inc.values
        .iter()
        .map(|db| {
            let mut x = node.x.clone();
            if !euler_step(c, &mut x, &node.z, &node.w, db, t_next, dt)? {
                return Err(Error::NonFinite {
                    context: "scenario tree forward step",
                    step: 0,
                    path: 0,
                });
            }
            Ok(TreeNode {
                x,
                z: z.clone(),
                w: w.clone(),
            })
        })
        .collect()
}

/// Solves `y = ey + l(x, y, q, z, w) dt` by fixed-point iteration.
pub fn implicit_driver_step(driver: &DriverFn, y_lipschitz: f64, node: &TreeNode, ey: f64, q: &[f64], dt: f64) -> Result<f64> {
    let factor = y_lipschitz * dt;
    if factor >= 1.0 {
        return Err(Error::NonContraction { factor });
    }
    let mut y = ey;
    let mut residual = f64::INFINITY;
    for _ in 0..FIXED_POINT_MAX_ITER {
        let next = ey + driver(&node.x, y, q, &node.z, &node.w) * dt;
        if !next.is_finite() {
            return Err(Error::NonFinite {
                context: "implicit driver step",
                step: 0,
                path: 0,
            });
        }
        residual = (next - y).abs();
        y = next;
        if residual <= FIXED_POINT_TOL * (1.0 + y.abs()) {
            return Ok(y);
        }
    }
    Err(Error::NoConvergence {
        iterations: FIXED_POINT_MAX_ITER,
        residual,
    })
}

/// One backward step at `node` from its children's values:
/// `q = E[y' ΔBᵀ] / dt`, `y = E[y'] + l(X, y, q, U, V) dt`.
pub fn backward_step(
    driver: &DriverFn,
    y_lipschitz: f64,
    node: &TreeNode,
    child_y: &[f64],
    inc: &Increments,
    dt: f64,
) -> Result<(f64, Vec<f64>)> {
    let p = inc.values.first().map_or(0, Vec::len);
    let mut ey = 0.0;
    let mut q = vec![0.0; p];
    for ((y, db), pr) in child_y.iter().zip(&inc.values).zip(&inc.probs) {
        ey += pr * y;
        for (qd, b) in q.iter_mut().zip(db) {
            *qd += pr * y * b;
        }
    }
    for qd in q.iter_mut() {
        *qd /= dt;
    }
    let y = implicit_driver_step(driver, y_lipschitz, node, ey, &q, dt)?;
    Ok((y, q))
}

/// Materialized scenario tree with controls attached per node.
///
/// The children of node `i` at level `k` are `i * B + j`, `j < B`.
#[derive(Debug, Clone)]
pub struct ScenarioTree {
    pub spec: TreeSpec,
    pub inc: Increments,
    pub times: Vec<f64>,
    pub levels: Vec<Vec<TreeNode>>,
}

/// Chooses the controls `(u, v)` at a node from its level, index and histories
/// (whose terminal values are the previous controls).
pub type ControlAssignment<'a> = dyn Fn(usize, usize, &TreeNode) -> (Vec<f64>, Vec<f64>) + Sync + 'a;

fn tree_size(b: usize, k: usize) -> Option<usize> {
    let mut total: usize = 0;
    let mut level: usize = 1;
    for _ in 0..=k {
        total = total.checked_add(level)?;
        level = level.checked_mul(b)?;
    }
    Some(total)
}

fn check_initial(c: &GameCoefficients, initial: &Path, z0: &CadlagPath, w0: &CadlagPath, t0: f64) -> Result<()> {
    let eps = time_eps(c.horizon);
    if initial.dim() != c.dims.n || z0.dim() != c.dims.m || w0.dim() != c.dims.l {
        return Err(Error::invalid(format!(
            "initial data dimensions ({}, {}, {}) do not match the game ({}, {}, {})",
            initial.dim(),
            z0.dim(),
            w0.dim(),
            c.dims.n,
            c.dims.m,
            c.dims.l
        )));
    }
    for (ctx, t) in [
        ("initial path end vs tree start", initial.t_end()),
        ("player 1 history end vs tree start", z0.t_end()),
        ("player 2 history end vs tree start", w0.t_end()),
    ] {
        if (t - t0).abs() > eps {
            return Err(Error::TimeMismatch {
                context: ctx,
                left: t,
                right: t0,
            });
        }
    }
    Ok(())
}

/// Builds a tree whose controls come from `assign` at every non-leaf node.
pub fn build_tree_with(
    c: &GameCoefficients,
    initial: &Path,
    z0: &CadlagPath,
    w0: &CadlagPath,
    spec: TreeSpec,
    assign: &ControlAssignment,
) -> Result<ScenarioTree> {
    spec.validate()?;
    check_initial(c, initial, z0, w0, spec.t0)?;
    let inc = Increments::new(spec.branching, c.dims.p, spec.dt())?;
    let nodes = tree_size(inc.len(), spec.n_steps).unwrap_or(usize::MAX);
    if nodes > spec.node_budget {
        return Err(Error::BudgetExceeded {
            what: "scenario tree nodes",
            required: nodes as f64,
            budget: spec.node_budget as f64,
            hint: "use fewer steps or a smaller branching",
        });
    }
    let times = spec.times();
    let dt = spec.dt();
    let mut levels: Vec<Vec<TreeNode>> = vec![vec![TreeNode {
        x: initial.clone(),
        z: z0.clone(),
        w: w0.clone(),
    }]];
    for k in 0..spec.n_steps {
        let current = levels.last_mut().unwrap();
        for (i, node) in current.iter_mut().enumerate() {
            let (u, v) = assign(k, i, node);
            c.u_set.check(&u)?;
            c.v_set.check(&v)?;
            node.z = node.z.with_terminal(&u)?;
            node.w = node.w.with_terminal(&v)?;
        }
        let next: Vec<Vec<TreeNode>> = current
            .par_iter()
            .map(|node| step_children(c, node, &inc, times[k + 1], dt))
            .collect::<Result<_>>()?;
        levels.push(next.into_iter().flatten().collect());
    }
    Ok(ScenarioTree { spec, inc, times, levels })
}

/// Tree driven by deterministic control paths `u`, `v` on `[0, T]`.
pub fn build_tree(c: &GameCoefficients, initial: &Path, u: &CadlagPath, v: &CadlagPath, spec: TreeSpec) -> Result<ScenarioTree> {
    let z0 = u.prefix(spec.t0)?;
    let w0 = v.prefix(spec.t0)?;
    let times = spec.times();
    build_tree_with(c, initial, &z0, &w0, spec, &|k, _, _| (u.eval(times[k]), v.eval(times[k])))
}

impl ScenarioTree {
    pub fn leaves(&self) -> &[TreeNode] {
        self.levels.last().unwrap()
    }

    pub fn depth(&self) -> usize {
        self.spec.n_steps
    }

    /// Probability of reaching node `i` at level `k`.
    pub fn node_probability(&self, k: usize, i: usize) -> f64 {
        let b = self.inc.len();
        let mut rest = i;
        let mut p = 1.0;
        for _ in 0..k {
            p *= self.inc.probs[rest % b];
            rest /= b;
        }
        p
    }

    /// `m` evaluated at every leaf.
    pub fn terminal_costs(&self, c: &GameCoefficients) -> Vec<f64> {
        self.leaves().iter().map(|n| c.terminal_at(&n.x)).collect()
    }

    /// Debugging dump: per node its level, index, time, terminal state and controls.
    pub fn to_json(&self) -> Result<String> {
        #[derive(Serialize)]
        struct NodeDump<'a> {
            level: usize,
            index: usize,
            time: f64,
            state: &'a [f64],
            u: &'a [f64],
            v: &'a [f64],
        }
        let mut out = Vec::new();
        for (k, level) in self.levels.iter().enumerate() {
            for (i, n) in level.iter().enumerate() {
                out.push(NodeDump {
                    level: k,
                    index: i,
                    time: self.times[k],
                    state: n.x.terminal(),
                    u: n.z.terminal(),
                    v: n.w.terminal(),
                });
            }
        }
        Ok(serde_json::to_string(&serde_json::json!({
            "spec": self.spec,
            "increments": self.inc,
            "nodes": out,
        }))?)
    }
}

/// Backward solution on a tree: `y[k][i]`, `q[k][i]` per level and node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BsdeSolution {
    pub times: Vec<f64>,
    pub y: Vec<Vec<f64>>,
    pub q: Vec<Vec<Vec<f64>>>,
}

impl BsdeSolution {
    pub fn root(&self) -> f64 {
        self.y[0][0]
    }

    /// CSV with columns `level, node_id, time, y, q_0, ..`; leaves have no `q`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let p = self.q.first().and_then(|l| l.first()).map_or(0, Vec::len);
        let mut header = vec!["level".to_string(), "node_id".into(), "time".into(), "y".into()];
        header.extend((0..p).map(|d| format!("q_{d}")));
        w.write_record(&header)?;
        for (k, ys) in self.y.iter().enumerate() {
            for (i, y) in ys.iter().enumerate() {
                let mut row = vec![k.to_string(), i.to_string(), self.times[k].to_string(), y.to_string()];
                match self.q.get(k).and_then(|l| l.get(i)) {
                    Some(q) => row.extend(q.iter().map(f64::to_string)),
                    None => row.extend((0..p).map(|_| String::new())),
                }
                w.write_record(&row)?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

fn backward_levels(
    tree: &ScenarioTree,
    driver: &DriverFn,
    y_lipschitz: f64,
    from: usize,
    to: usize,
    terminal: &[f64],
) -> Result<(Vec<Vec<f64>>, Vec<Vec<Vec<f64>>>)> {
    if from > to || to > tree.depth() {
        return Err(Error::invalid(format!(
            "backward pass needs 0 <= from <= to <= depth, got {from}, {to}, {}",
            tree.depth()
        )));
    }
    if terminal.len() != tree.levels[to].len() {
        return Err(Error::dims("terminal data per node", tree.levels[to].len(), terminal.len()));
    }
    let b = tree.inc.len();
    let dt = tree.spec.dt();
    let mut ys = vec![terminal.to_vec()];
    let mut qs = Vec::new();
    for k in (from..to).rev() {
        let child = ys.last().unwrap();
        let solved: Vec<(f64, Vec<f64>)> = tree.levels[k]
            .par_iter()
            .enumerate()
            .map(|(i, node)| backward_step(driver, y_lipschitz, node, &child[i * b..(i + 1) * b], &tree.inc, dt))
            .collect::<Result<_>>()?;
        let (y, q): (Vec<f64>, Vec<Vec<f64>>) = solved.into_iter().unzip();
        ys.push(y);
        qs.push(q);
    }
    ys.reverse();
    qs.reverse();
    Ok((ys, qs))
}

/// Exact backward recursion with terminal data given per leaf.
pub fn solve_bsde_tree(tree: &ScenarioTree, c: &GameCoefficients, terminal: &[f64]) -> Result<BsdeSolution> {
    solve_bsde_tree_with(tree, c.driver.as_ref(), c.bounds.y_lipschitz, terminal)
}

/// [`solve_bsde_tree`] with an explicit driver.
pub fn solve_bsde_tree_with(tree: &ScenarioTree, driver: &DriverFn, y_lipschitz: f64, terminal: &[f64]) -> Result<BsdeSolution> {
    let (y, q) = backward_levels(tree, driver, y_lipschitz, 0, tree.depth(), terminal)?;
    Ok(BsdeSolution {
        times: tree.times.clone(),
        y,
        q,
    })
}

/// Truncated backward semigroup: solves on levels `[from, to]` with terminal
/// data `b` at level `to` and returns `y` at every node of level `from`.
pub fn semigroup_pi(tree: &ScenarioTree, c: &GameCoefficients, from: usize, to: usize, b: &[f64]) -> Result<Vec<f64>> {
    let (y, _) = backward_levels(tree, c.driver.as_ref(), c.bounds.y_lipschitz, from, to, b)?;
    Ok(y.into_iter().next().unwrap())
}

/// `J(t, A_t; U, V)` on a tree driven by the deterministic controls `u`, `v`.
pub fn objective_j_tree(c: &GameCoefficients, initial: &Path, u: &CadlagPath, v: &CadlagPath, spec: TreeSpec) -> Result<f64> {
    let tree = build_tree(c, initial, u, v, spec)?;
    let m = tree.terminal_costs(c);
    Ok(solve_bsde_tree(&tree, c, &m)?.root())
}

/// Outcome of a comparison test on one tree.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub holds: bool,
    pub violations: usize,
    /// Smallest `y1 - y2` over all nodes.
    pub min_gap: f64,
    pub root_gap: f64,
}

/// Solves both equations on `tree` and checks `y1 >= y2 - slack` at every node.
///
/// The hypotheses are verified first: `terminal1 >= terminal2` at every leaf,
/// `driver1 >= driver2` at every node along both solutions, and the discrete
/// monotonicity conditions `L_y dt < 1` and `L_q max|ΔB| <= 1` of the scheme.
pub fn check_comparison(
    tree: &ScenarioTree,
    c: &GameCoefficients,
    driver1: &DriverFn,
    driver2: &DriverFn,
    terminal1: &[f64],
    terminal2: &[f64],
) -> Result<ComparisonReport> {
    let lq = c.bounds.q_lipschitz * tree.inc.max_abs();
    if lq > 1.0 + 1e-12 {
        return Err(Error::HypothesisViolated(format!(
            "discrete comparison needs L_q * max|dB| <= 1, got {lq}"
        )));
    }
    if terminal1.len() != terminal2.len() {
        return Err(Error::dims("comparison terminals", terminal1.len(), terminal2.len()));
    }
    if let Some(i) = terminal1.iter().zip(terminal2).position(|(a, b)| a < b) {
        return Err(Error::HypothesisViolated(format!("terminal ordering fails at leaf {i}")));
    }
    let s1 = solve_bsde_tree_with(tree, driver1, c.bounds.y_lipschitz, terminal1)?;
    let s2 = solve_bsde_tree_with(tree, driver2, c.bounds.y_lipschitz, terminal2)?;
    for k in 0..tree.depth() {
        for (i, node) in tree.levels[k].iter().enumerate() {
            for s in [&s1, &s2] {
                let (y, q) = (s.y[k][i], &s.q[k][i]);
                let l1 = driver1(&node.x, y, q, &node.z, &node.w);
                let l2 = driver2(&node.x, y, q, &node.z, &node.w);
                if l1 < l2 {
                    return Err(Error::HypothesisViolated(format!(
                        "driver ordering fails at level {k}, node {i}: {l1} < {l2}"
                    )));
                }
            }
        }
    }
    let mut violations = 0;
    let mut min_gap = f64::INFINITY;
    for (y1, y2) in s1.y.iter().flatten().zip(s2.y.iter().flatten()) {
        let gap = y1 - y2;
        min_gap = min_gap.min(gap);
        if gap < -comparison_slack(*y2) {
            violations += 1;
        }
    }
    Ok(ComparisonReport {
        holds: violations == 0,
        violations,
        min_gap,
        root_gap: s1.root() - s2.root(),
    })
}

/// Path features available to the regression basis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Feature {
    /// Current state coordinates.
    Terminal,
    /// Running integral of each state coordinate from time 0.
    Integral,
    /// Running maximum of each state coordinate.
    RunningMax,
}

/// Polynomial regression basis of total degree at most `degree` (≤ 2) in
/// standardized path features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasisSpec {
    pub features: Vec<Feature>,
    pub degree: usize,
}

impl Default for BasisSpec {
    fn default() -> Self {
        Self {
            features: vec![Feature::Terminal, Feature::Integral],
            degree: 2,
        }
    }
}

impl BasisSpec {
    fn n_raw(&self, n: usize) -> usize {
        self.features.len() * n
    }

    /// Dimension of the basis with `k` non-constant features.
    pub fn dim_for(&self, k: usize) -> usize {
        match self.degree {
            0 => 1,
            1 => 1 + k,
            _ => 1 + k + k * (k + 1) / 2,
        }
    }
}

/// Least-squares Monte Carlo solution on a simulated batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LsmcSolution {
    pub y0: f64,
    pub q0: Vec<f64>,
    /// Standard error of the pathwise estimates `m + Σ l dt` around `y0`.
    pub stderr: f64,
    pub times: Vec<f64>,
    /// `y[k][i]` for step `k` and path `i`.
    pub y: Vec<Vec<f64>>,
    /// Basis columns dropped per step as numerically dependent.
    pub dropped_columns: Vec<usize>,
    pub basis_dim: usize,
}

impl LsmcSolution {
    /// CSV with columns `path_id, time, y`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["path_id", "time", "y"])?;
        let n = self.y.first().map_or(0, Vec::len);
        for i in 0..n {
            for (k, t) in self.times.iter().enumerate() {
                w.write_record(&[i.to_string(), t.to_string(), self.y[k][i].to_string()])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Raw features per path and step: `out[i][k * n_raw + f]`.
fn raw_features(sim: &SimulatedPaths, basis: &BasisSpec) -> Vec<Vec<f64>> {
    let n_raw = basis.n_raw(sim.states.first().map_or(0, |p| p.dim()));
    let steps = sim.times.len();
    sim.states
        .par_iter()
        .map(|x| {
            let n = x.dim();
            let mut out = vec![0.0; steps * n_raw];
            let mut integral = vec![0.0; n];
            let mut running_max: Vec<f64> = x.point(0).to_vec();
            for j in 0..x.len() {
                if j > 0 {
                    let h = x.grid()[j] - x.grid()[j - 1];
                    for d in 0..n {
                        integral[d] += 0.5 * h * (x.point(j - 1)[d] + x.point(j)[d]);
                        running_max[d] = running_max[d].max(x.point(j)[d]);
                    }
                }
                if j < sim.offset {
                    continue;
                }
                let k = j - sim.offset;
                let row = &mut out[k * n_raw..(k + 1) * n_raw];
                let mut col = 0;
                for f in &basis.features {
                    let src = match f {
                        Feature::Terminal => x.point(j),
                        Feature::Integral => &integral[..],
                        Feature::RunningMax => &running_max[..],
                    };
                    row[col..col + n].copy_from_slice(src);
                    col += n;
                }
            }
            out
        })
        .collect()
}

struct Regression {
    fitted: Vec<Vec<f64>>,
    dropped: usize,
    dim: usize,
}

/// Least-squares projection of each target column onto the polynomial basis
/// of the standardized features `feats[i]`.
///
/// The basis columns are orthonormalized by modified Gram-Schmidt with one
/// reorthogonalization pass; columns numerically dependent on earlier ones
/// are dropped, so targets in the span are reproduced to round-off.
fn regress(feats: &[&[f64]], targets: &[Vec<f64>], degree: usize) -> Result<Regression> {
    let n = feats.len();
    let f = feats.first().map_or(0, |r| r.len());
    let mut mean = vec![0.0; f];
    for r in feats {
        for (m, v) in mean.iter_mut().zip(r.iter()) {
            *m += v;
        }
    }
    for m in mean.iter_mut() {
        *m /= n as f64;
    }
    let mut sd = vec![0.0; f];
    for r in feats {
        for d in 0..f {
            sd[d] += (r[d] - mean[d]).powi(2);
        }
    }
    for s in sd.iter_mut() {
        *s = (*s / n as f64).sqrt();
    }
    let active: Vec<usize> = (0..f).filter(|&d| sd[d] > 1e-12 * (1.0 + mean[d].abs())).collect();
    let k = active.len();
    let std = |i: usize, a: usize| (feats[i][active[a]] - mean[active[a]]) / sd[active[a]];
    let mut columns: Vec<Vec<f64>> = vec![vec![1.0; n]];
    if degree >= 1 {
        for a in 0..k {
            columns.push((0..n).map(|i| std(i, a)).collect());
        }
    }
    if degree >= 2 {
        for a in 0..k {
            for b in a..k {
                columns.push((0..n).map(|i| std(i, a) * std(i, b)).collect());
            }
        }
    }
    let dot = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(a, b)| a * b).sum::<f64>();
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(columns.len());
    for mut col in columns {
        let norm0 = dot(&col, &col).sqrt();
        for _ in 0..2 {
            for q in &basis {
                let c = dot(q, &col);
                for (x, qv) in col.iter_mut().zip(q) {
                    *x -= c * qv;
                }
            }
        }
        let norm = dot(&col, &col).sqrt();
        if norm > 1e-10 * norm0 && norm > 0.0 {
            for x in col.iter_mut() {
                *x /= norm;
            }
            basis.push(col);
        }
    }
    let dim = basis.len();
    let requested = match degree {
        0 => 1,
        1 => 1 + k,
        _ => 1 + k + k * (k + 1) / 2,
    };
    let dropped = requested - dim;
    if dropped > 0 {
        log::debug!("LSMC regression dropped {dropped} dependent basis columns");
    }
    let fitted = targets
        .iter()
        .map(|t| {
            let mut out = vec![0.0; n];
            for q in &basis {
                let c = dot(q, t);
                for (o, qv) in out.iter_mut().zip(q) {
                    *o += c * qv;
                }
            }
            out
        })
        .collect();
    Ok(Regression { fitted, dropped, dim })
}

/// Least-squares Monte Carlo backward recursion on `sim` (driven by `bb`).
///
/// Conditional expectations of `y_{k+1}` and `y_{k+1} ΔB_k` are replaced by
/// regressions on `basis`; `y_k` is then solved implicitly per path.
pub fn solve_bsde_lsmc(
    sim: &SimulatedPaths,
    bb: &BrownianBatch,
    c: &GameCoefficients,
    terminal: &[f64],
    basis: &BasisSpec,
) -> Result<LsmcSolution> {
    let n_paths = sim.n_paths();
    if terminal.len() != n_paths {
        return Err(Error::dims("LSMC terminal data", n_paths, terminal.len()));
    }
    if basis.degree > 2 {
        return Err(Error::invalid("LSMC basis degree must be at most 2"));
    }
    let full_dim = basis.dim_for(basis.n_raw(c.dims.n));
    if n_paths < 10 * full_dim {
        return Err(Error::invalid(format!(
            "LSMC needs at least 10 paths per basis function ({} < 10 * {full_dim})",
            n_paths
        )));
    }
    let n_raw = basis.n_raw(c.dims.n);
    let feats = raw_features(sim, basis);
    let steps = bb.n_steps();
    let dt = bb.dt();
    let p = c.dims.p;
    let mut ys: Vec<Vec<f64>> = vec![Vec::new(); steps + 1];
    ys[steps] = terminal.to_vec();
    let mut qs: Vec<Vec<Vec<f64>>> = vec![Vec::new(); steps];
    // per-path histories, truncated in place as the backward sweep proceeds
    let mut nodes: Vec<TreeNode> = (0..n_paths)
        .map(|i| TreeNode {
            x: sim.states[i].clone(),
            z: sim.controls[i].0.clone(),
            w: sim.controls[i].1.clone(),
        })
        .collect();
    let mut dropped_columns = vec![0; steps];
    let mut basis_dim = 1;
    for k in (0..steps).rev() {
        let rows: Vec<&[f64]> = feats.iter().map(|f| &f[k * n_raw..(k + 1) * n_raw]).collect();
        let next = &ys[k + 1];
        let mut targets = vec![next.clone()];
        for d in 0..p {
            targets.push((0..n_paths).map(|i| next[i] * bb.increment(i, k)[d]).collect());
        }
        let reg = regress(&rows, &targets, basis.degree)?;
        dropped_columns[k] = reg.dropped;
        basis_dim = basis_dim.max(reg.dim);
        let t = sim.times[k];
        let solved: Vec<(f64, Vec<f64>)> = nodes
            .par_iter_mut()
            .enumerate()
            .map(|(i, node)| {
                let q: Vec<f64> = (0..p).map(|d| reg.fitted[1 + d][i] / dt).collect();
                node.x.truncate_to(t)?;
                node.z.truncate_to(t)?;
                node.w.truncate_to(t)?;
                let y = implicit_driver_step(c.driver.as_ref(), c.bounds.y_lipschitz, node, reg.fitted[0][i], &q, dt)?;
                Ok((y, q))
            })
            .collect::<Result<_>>()?;
        let (y, q): (Vec<f64>, Vec<Vec<f64>>) = solved.into_iter().unzip();
        ys[k] = y;
        qs[k] = q;
    }
    // pathwise estimates m + Σ l dt along the fitted solution
    let estimates: Vec<f64> = (0..n_paths)
        .into_par_iter()
        .map(|i| {
            let mut acc = terminal[i];
            let mut x = sim.states[i].clone();
            let mut z = sim.controls[i].0.clone();
            let mut w = sim.controls[i].1.clone();
            for k in (0..steps).rev() {
                let t = sim.times[k];
                x.truncate_to(t)?;
                z.truncate_to(t)?;
                w.truncate_to(t)?;
                acc += c.driver_at(&x, ys[k][i], &qs[k][i], &z, &w) * dt;
            }
            Ok(acc)
        })
        .collect::<Result<_>>()?;
    let mean = estimates.iter().sum::<f64>() / n_paths as f64;
    let var = estimates.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (n_paths as f64 - 1.0).max(1.0);
    Ok(LsmcSolution {
        y0: ys[0][0],
        q0: qs[0][0].clone(),
        stderr: (var / n_paths as f64).sqrt(),
        times: sim.times.clone(),
        y: ys,
        dropped_columns,
        basis_dim,
    })
}

/// `J` by least-squares Monte Carlo under deterministic controls.
pub fn objective_j_lsmc(
    c: &GameCoefficients,
    initial: &Path,
    u: &CadlagPath,
    v: &CadlagPath,
    bb: &BrownianBatch,
    basis: &BasisSpec,
) -> Result<(f64, f64)> {
    let sim = crate::dynamics::simulate_sde(c, initial, u, v, bb)?;
    let m: Vec<f64> = sim.states.iter().map(|x| c.terminal_at(x)).collect();
    let sol = solve_bsde_lsmc(&sim, bb, c, &m, basis)?;
    Ok((sol.y0, sol.stderr))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{BatchSpec, Bounds, Dims, IncrementLaw};
    use crate::path::ControlSet;
    use nalgebra::DMatrix;

    fn game() -> GameCoefficients {
        GameCoefficients::new(
            "t",
            Dims::scalar(),
            1.0,
            Bounds::new(10.0, 1.0),
            ControlSet::interval(-1.0, 1.0),
            ControlSet::interval(-1.0, 1.0),
        )
        .unwrap()
        .with_diffusion(|_, _, _| DMatrix::from_element(1, 1, 1.0))
    }

    fn zero() -> (Path, CadlagPath, CadlagPath) {
        (
            Path::constant(&[0.0], 0.0, 1.0).unwrap(),
            CadlagPath::constant(&[0.0], 0.0, 1.0, 1.0).unwrap(),
            CadlagPath::constant(&[0.0], 0.0, 1.0, 1.0).unwrap(),
        )
    }

    #[test]
    fn increments_are_martingale_with_unit_variance_rate() {
        for b in [2, 3] {
            for p in [1, 2] {
                let inc = Increments::new(b, p, 0.25).unwrap();
                assert_eq!(inc.len(), b.pow(p as u32));
                assert!((inc.probs.iter().sum::<f64>() - 1.0).abs() < 1e-15);
                for d in 0..p {
                    let mean: f64 = inc.values.iter().zip(&inc.probs).map(|(v, pr)| pr * v[d]).sum();
                    let var: f64 = inc.values.iter().zip(&inc.probs).map(|(v, pr)| pr * v[d] * v[d]).sum();
                    assert!(mean.abs() < 1e-15);
                    assert!((var - 0.25).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn tree_shapes() {
        let c = game();
        let (a, u, v) = zero();
        let t0 = build_tree(&c, &a, &u, &v, TreeSpec::new(0, 2, 0.0, 1.0)).unwrap();
        assert_eq!(t0.levels.len(), 1);

        let t2 = build_tree(&c, &a, &u, &v, TreeSpec::new(2, 2, 0.0, 1.0)).unwrap();
        let s = 0.5f64.sqrt();
        let leaves: Vec<f64> = t2.leaves().iter().map(|n| n.x.terminal()[0]).collect();
        assert_eq!(leaves.len(), 4);
        for (got, want) in leaves.iter().zip([-2.0 * s, 0.0, 0.0, 2.0 * s]) {
            assert!((got - want).abs() < 1e-15);
        }
        assert!((t2.node_probability(2, 3) - 0.25).abs() < 1e-15);

        let still = c.clone().with_diffusion(|_, _, _| DMatrix::zeros(1, 1));
        let t = build_tree(&still, &a, &u, &v, TreeSpec::new(2, 3, 0.0, 1.0)).unwrap();
        assert!(t.leaves().iter().all(|n| n.x == t.leaves()[0].x));
    }

    #[test]
    fn node_budget_is_enforced() {
        let c = game();
        let (a, u, v) = zero();
        let mut spec = TreeSpec::new(10, 2, 0.0, 1.0);
        spec.node_budget = 100;
        assert!(matches!(build_tree(&c, &a, &u, &v, spec), Err(Error::BudgetExceeded { .. })));
    }

    #[test]
    fn tree_solver_examples() {
        let (a, u, v) = zero();
        let c = game().with_terminal(|x| x.terminal()[0].powi(2));
        let tree = build_tree(&c, &a, &u, &v, TreeSpec::new(3, 2, 0.0, 1.0)).unwrap();
        let m = tree.terminal_costs(&c);
        // martingale: E[B_1^2] = 1 on the binomial tree
        assert!((solve_bsde_tree(&tree, &c, &m).unwrap().root() - 1.0).abs() < 1e-14);

        let unit = game().with_driver(|_, _, _, _, _| 1.0);
        let zeros = vec![0.0; tree.leaves().len()];
        assert!((solve_bsde_tree(&tree, &unit, &zeros).unwrap().root() - 1.0).abs() < 1e-14);

        let cc = 0.7;
        let decay = game().with_driver(move |_, y, _, _, _| -cc * y);
        for n in [4, 8, 16] {
            let tree = build_tree(&decay, &a, &u, &v, TreeSpec::new(n, 2, 0.0, 1.0)).unwrap();
            let ones = vec![1.0; tree.leaves().len()];
            let y = solve_bsde_tree(&tree, &decay, &ones).unwrap().root();
            let dt = 1.0 / n as f64;
            assert!((y - (1.0 + cc * dt).powi(-(n as i32))).abs() < 1e-12);
            assert!((y - (-cc).exp()).abs() < 0.3 * dt);
        }
    }

    #[test]
    fn backward_identity_holds_at_every_node() {
        let (a, u, v) = zero();
        let c = game()
            .with_driver(|x, y, q, _, _| 0.3 * y.sin() + 0.5 * q[0].tanh() + x.terminal()[0])
            .with_terminal(|x| x.terminal()[0].cos());
        let tree = build_tree(&c, &a, &u, &v, TreeSpec::new(3, 3, 0.0, 1.0)).unwrap();
        let sol = solve_bsde_tree(&tree, &c, &tree.terminal_costs(&c)).unwrap();
        let b = tree.inc.len();
        let dt = tree.spec.dt();
        for k in 0..3 {
            for (i, node) in tree.levels[k].iter().enumerate() {
                let ey: f64 = (0..b).map(|j| tree.inc.probs[j] * sol.y[k + 1][i * b + j]).sum();
                let y = sol.y[k][i];
                let l = c.driver_at(&node.x, y, &sol.q[k][i], &node.z, &node.w);
                assert!((y - ey - l * dt).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn non_contraction_is_reported() {
        let (a, u, v) = zero();
        let c = game().with_bounds(Bounds::new(10.0, 5.0));
        let tree = build_tree(&c, &a, &u, &v, TreeSpec::new(2, 2, 0.0, 1.0)).unwrap();
        let err = solve_bsde_tree(&tree, &c, &[0.0; 4]).unwrap_err();
        assert!(matches!(err, Error::NonContraction { .. }), "{err}");
    }

    #[test]
    fn semigroup_flow_on_three_steps() {
        let (a, u, v) = zero();
        let c = game()
            .with_driver(|x, y, q, _, _| 0.2 * y + 0.3 * q[0] - x.terminal()[0].abs())
            .with_terminal(|x| x.terminal()[0].max(0.0));
        let tree = build_tree(&c, &a, &u, &v, TreeSpec::new(3, 2, 0.0, 1.0)).unwrap();
        let m = tree.terminal_costs(&c);
        let single = semigroup_pi(&tree, &c, 0, 3, &m).unwrap();
        let inner = semigroup_pi(&tree, &c, 1, 3, &m).unwrap();
        let nested = semigroup_pi(&tree, &c, 0, 1, &inner).unwrap();
        assert!((single[0] - nested[0]).abs() < 1e-12);
        assert_eq!(single[0], solve_bsde_tree(&tree, &c, &m).unwrap().root());

        let plain = game();
        let b: Vec<f64> = tree.levels[2].iter().map(|n| n.x.terminal()[0].exp()).collect();
        let pi = semigroup_pi(&tree, &plain, 0, 2, &b).unwrap()[0];
        let mean: f64 = b.iter().sum::<f64>() / 4.0;
        assert!((pi - mean).abs() < 1e-14);
    }

    #[test]
    fn objective_at_horizon_is_terminal_cost() {
        let c = game().with_terminal(|x| 2.0 + x.terminal()[0]);
        let a = Path::scalar(vec![0.0, 1.0], vec![0.0, 0.5], 1.0).unwrap();
        let u = CadlagPath::constant(&[0.0], 0.0, 1.0, 1.0).unwrap();
        let j = objective_j_tree(&c, &a, &u, &u, TreeSpec::new(0, 2, 1.0, 1.0)).unwrap();
        assert_eq!(j, 2.5);
    }

    #[test]
    fn comparison_examples() {
        let (a, u, v) = zero();
        let c = game().with_driver(|x, y, q, _, _| 0.5 * y - 0.4 * q[0] + x.terminal()[0]);
        let tree = build_tree(&c, &a, &u, &v, TreeSpec::new(2, 2, 0.0, 1.0)).unwrap();
        let m: Vec<f64> = tree.leaves().iter().map(|n| n.x.terminal()[0]).collect();
        let r = check_comparison(&tree, &c, c.driver.as_ref(), c.driver.as_ref(), &m, &m).unwrap();
        assert!(r.holds && r.min_gap == 0.0);
        let m1: Vec<f64> = m.iter().map(|v| v + 1.0).collect();
        let r = check_comparison(&tree, &c, c.driver.as_ref(), c.driver.as_ref(), &m1, &m).unwrap();
        assert!(r.holds && r.root_gap > 0.0);
        let err = check_comparison(&tree, &c, c.driver.as_ref(), c.driver.as_ref(), &m, &m1).unwrap_err();
        assert!(matches!(err, Error::HypothesisViolated(_)));
    }

    fn batch(n_paths: usize, n_steps: usize, law: IncrementLaw) -> BrownianBatch {
        BrownianBatch::new(BatchSpec {
            seed: 9,
            n_paths,
            n_steps,
            t0: 0.0,
            horizon: 1.0,
            p: 1,
            law,
        })
        .unwrap()
    }

    #[test]
    fn lsmc_constant_and_deterministic_drivers() {
        let (a, u, v) = zero();
        let c = game().with_terminal(|_| 3.0);
        let (y, se) = objective_j_lsmc(&c, &a, &u, &v, &batch(500, 8, IncrementLaw::Gaussian), &BasisSpec::default()).unwrap();
        assert!((y - 3.0).abs() < 1e-12 && se < 1e-12, "{y} {se}");
        let d = game().with_driver(|_, _, _, _, _| 1.0);
        let (y, _) = objective_j_lsmc(&d, &a, &u, &v, &batch(500, 8, IncrementLaw::Gaussian), &BasisSpec::default()).unwrap();
        assert!((y - 1.0).abs() < 1e-12);
    }

    #[test]
    fn lsmc_matches_tree_on_binomial_compatible_problem() {
        let (a, u, v) = zero();
        let c = game()
            .with_driver(|x, y, _, _, _| 0.5 * x.terminal()[0].powi(2) - 0.3 * y)
            .with_terminal(|x| x.terminal()[0].powi(2));
        let tree = objective_j_tree(&c, &a, &u, &v, TreeSpec::new(4, 2, 0.0, 1.0)).unwrap();
        let bb = batch(20000, 4, IncrementLaw::Rademacher);
        let (y, se) = objective_j_lsmc(&c, &a, &u, &v, &bb, &BasisSpec::default()).unwrap();
        assert!((y - tree).abs() < 3.0 * se.max(1e-3), "lsmc {y} ± {se}, tree {tree}");
    }
}
