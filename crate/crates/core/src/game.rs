//! Lower and upper game values.
//!
//! On scenario trees the values are computed exactly over finite control
//! grids, either by backward induction (the strategist best-responds to the
//! opponent's current control at every node) or by brute-force enumeration
//! of all nonanticipative strategy tables against all adapted opponent
//! processes. On simulated batches, min-max is taken over parametric
//! feedback families with common random numbers.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bsde::{backward_step, solve_bsde_lsmc, step_children, BasisSpec, Increments, TreeNode, TreeSpec};
use crate::dynamics::{simulate_with_policy, BrownianBatch, GameCoefficients, PolicyInput};
use crate::error::{Error, Result};
use crate::path::{d_infty, CadlagPath, Path, TimePath};

pub const DEFAULT_ENUMERATION_BUDGET: f64 = 1e7;

/// Which value functional: `Lower` is inf over Player 1 strategies of sup over
/// Player 2 controls, `Upper` is sup over Player 2 strategies of inf over
/// Player 1 controls.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Lower,
    Upper,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Enumeration {
    BackwardInduction,
    BruteForce,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueMethod {
    TreeExact,
    Lsmc,
}

/// Finite control grids used for enumeration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GameGrids {
    pub u: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl GameGrids {
    pub fn new(u: Vec<Vec<f64>>, v: Vec<Vec<f64>>) -> Self {
        Self { u, v }
    }

    pub fn scalar(u: &[f64], v: &[f64]) -> Self {
        Self {
            u: u.iter().map(|x| vec![*x]).collect(),
            v: v.iter().map(|x| vec![*x]).collect(),
        }
    }

    /// Tensor grids with `per_axis` points from the game's control sets.
    pub fn from_sets(c: &GameCoefficients, per_axis: usize) -> Self {
        Self {
            u: c.u_set.points(per_axis),
            v: c.v_set.points(per_axis),
        }
    }

    pub fn validate(&self, c: &GameCoefficients) -> Result<()> {
        if self.u.is_empty() || self.v.is_empty() {
            return Err(Error::invalid("control grids must be nonempty"));
        }
        for u in &self.u {
            c.u_set.check(u)?;
        }
        for v in &self.v {
            c.v_set.check(v)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueMetadata {
    pub side: Side,
    pub algorithm: String,
    pub n_steps: usize,
    pub branching: usize,
    pub u_grid_size: usize,
    pub v_grid_size: usize,
    pub n_paths: Option<usize>,
    pub seed: Option<u64>,
    /// Evaluations charged against the enumeration budget.
    pub evaluations: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueEstimate {
    pub value: f64,
    pub stderr: Option<f64>,
    pub method: ValueMethod,
    pub metadata: ValueMetadata,
}

/// Terminal data of a tree game at its last level.
pub type LeafFn<'a> = dyn Fn(&TreeNode) -> Result<f64> + Sync + 'a;

/// Nonanticipative strategy table of the strategist of `side` (Player 1 for
/// `Lower`, Player 2 for `Upper`).
///
/// The entry for step `k`, noise node `i` and opponent history `h` (grid
/// indices of the opponent controls at steps `0..=k`) is an index into
/// `own_grid`. Entries depend on nothing else, so nonanticipativity holds
/// structurally.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyMap {
    pub side: Side,
    pub n_steps: usize,
    pub children: usize,
    pub opponent_grid_size: usize,
    pub own_grid: Vec<Vec<f64>>,
    pub table: Vec<Option<usize>>,
}

#[derive(Debug, Clone, Copy)]
struct Layout {
    k: usize,
    b: usize,
    no: usize,
}

impl Layout {
    fn n_keys(&self) -> f64 {
        (0..self.k)
            .map(|j| (self.b as f64).powi(j as i32) * (self.no as f64).powi(j as i32 + 1))
            .sum()
    }

    fn n_nodes(&self) -> usize {
        (0..self.k).map(|j| self.b.pow(j as u32)).sum()
    }

    fn key(&self, k: usize, i: usize, h: usize) -> usize {
        let mut off = 0;
        for j in 0..k {
            off += self.b.pow(j as u32) * self.no.pow(j as u32 + 1);
        }
        off + i * self.no.pow(k as u32 + 1) + h
    }

    fn position(&self, k: usize, i: usize) -> usize {
        (0..k).map(|j| self.b.pow(j as u32)).sum::<usize>() + i
    }
}

fn encode_history(history: &[usize], no: usize) -> usize {
    history.iter().fold(0, |acc, h| acc * no + h)
}

impl StrategyMap {
    fn layout(&self) -> Layout {
        Layout {
            k: self.n_steps,
            b: self.children,
            no: self.opponent_grid_size,
        }
    }

    /// Grid index of the strategist's control, if the entry was filled.
    pub fn index(&self, k: usize, node: usize, history: &[usize]) -> Option<usize> {
        if k >= self.n_steps || history.len() != k + 1 || node >= self.children.pow(k as u32) {
            return None;
        }
        if history.iter().any(|&h| h >= self.opponent_grid_size) {
            return None;
        }
        let key = self.layout().key(k, node, encode_history(history, self.opponent_grid_size));
        self.table.get(key).copied().flatten()
    }

    pub fn control(&self, k: usize, node: usize, history: &[usize]) -> Option<&[f64]> {
        self.index(k, node, history).map(|s| self.own_grid[s].as_slice())
    }

    pub fn is_complete(&self) -> bool {
        self.table.iter().all(Option::is_some)
    }
}

struct Entry {
    key: usize,
    control: usize,
}

/// Game on a scenario tree over `[spec.t0, spec.t_end]` with finite grids.
pub struct TreeGame<'a> {
    c: &'a GameCoefficients,
    spec: TreeSpec,
    inc: Increments,
    times: Vec<f64>,
    grids: &'a GameGrids,
    side: Side,
    leaf: Option<&'a LeafFn<'a>>,
    budget: f64,
}

impl<'a> TreeGame<'a> {
    pub fn new(c: &'a GameCoefficients, spec: TreeSpec, grids: &'a GameGrids, side: Side) -> Result<Self> {
        grids.validate(c)?;
        if !(spec.branching == 2 || spec.branching == 3) {
            return Err(Error::invalid(format!("tree branching must be 2 or 3, got {}", spec.branching)));
        }
        Ok(Self {
            c,
            spec,
            inc: Increments::new(spec.branching, c.dims.p, spec.dt())?,
            times: spec.times(),
            grids,
            side,
            leaf: None,
            budget: DEFAULT_ENUMERATION_BUDGET,
        })
    }

    /// Replaces the terminal cost `m` by `leaf` at the last level.
    pub fn with_leaf(mut self, leaf: &'a LeafFn<'a>) -> Self {
        self.leaf = Some(leaf);
        self
    }

    pub fn with_budget(mut self, budget: f64) -> Self {
        self.budget = budget;
        self
    }

    fn n_opp(&self) -> usize {
        match self.side {
            Side::Lower => self.grids.v.len(),
            Side::Upper => self.grids.u.len(),
        }
    }

    fn n_str(&self) -> usize {
        match self.side {
            Side::Lower => self.grids.u.len(),
            Side::Upper => self.grids.v.len(),
        }
    }

    fn own_grid(&self) -> &[Vec<f64>] {
        match self.side {
            Side::Lower => &self.grids.u,
            Side::Upper => &self.grids.v,
        }
    }

    /// `(u, v)` for opponent index `o` and strategist index `s`.
    fn pair(&self, o: usize, s: usize) -> (&[f64], &[f64]) {
        match self.side {
            Side::Lower => (&self.grids.u[s], &self.grids.v[o]),
            Side::Upper => (&self.grids.u[o], &self.grids.v[s]),
        }
    }

    /// Strict improvement for the strategist (Player 1 minimizes).
    fn strategist_prefers(&self, a: f64, b: f64) -> bool {
        match self.side {
            Side::Lower => a < b,
            Side::Upper => a > b,
        }
    }

    fn opponent_prefers(&self, a: f64, b: f64) -> bool {
        !self.strategist_prefers(a, b) && a != b
    }

    fn layout(&self) -> Layout {
        Layout {
            k: self.spec.n_steps,
            b: self.inc.len(),
            no: self.n_opp(),
        }
    }

    fn leaf_value(&self, node: &TreeNode) -> Result<f64> {
        match self.leaf {
            Some(f) => f(node),
            None => Ok(self.c.terminal_at(&node.x)),
        }
    }

    /// Evaluations performed by backward induction.
    pub fn induction_cost(&self) -> f64 {
        let pairs = (self.n_opp() * self.n_str() * self.inc.len()) as f64;
        (1..=self.spec.n_steps).map(|k| pairs.powi(k as i32)).sum::<f64>()
    }

    /// `(#strategy tables, #opponent processes)` of brute-force enumeration.
    pub fn brute_force_counts(&self) -> (f64, f64) {
        let l = self.layout();
        let tables = (self.n_str() as f64).powf(l.n_keys());
        let procs = (self.n_opp() as f64).powi(l.n_nodes() as i32);
        (tables, procs)
    }

    fn check_start(&self, initial: &Path, z0: &CadlagPath, w0: &CadlagPath) -> Result<TreeNode> {
        let eps = crate::path::time_eps(self.c.horizon);
        if initial.dim() != self.c.dims.n || z0.dim() != self.c.dims.m || w0.dim() != self.c.dims.l {
            return Err(Error::invalid("initial data dimensions do not match the game"));
        }
        for (ctx, t) in [
            ("initial path end vs game start", initial.t_end()),
            ("player 1 history end vs game start", z0.t_end()),
            ("player 2 history end vs game start", w0.t_end()),
        ] {
            if (t - self.spec.t0).abs() > eps {
                return Err(Error::TimeMismatch {
                    context: ctx,
                    left: t,
                    right: self.spec.t0,
                });
            }
        }
        Ok(TreeNode {
            x: initial.clone(),
            z: z0.clone(),
            w: w0.clone(),
        })
    }

    fn child_values(
        &self,
        k: usize,
        i: usize,
        node: &TreeNode,
        u: &[f64],
        v: &[f64],
        next: &(dyn Fn(usize, &TreeNode) -> Result<f64> + Sync),
    ) -> Result<f64> {
        let here = TreeNode {
            x: node.x.clone(),
            z: node.z.with_terminal(u)?,
            w: node.w.with_terminal(v)?,
        };
        let children = step_children(self.c, &here, &self.inc, self.times[k + 1], self.spec.dt())?;
        let b = self.inc.len();
        let ys: Vec<f64> = children
            .par_iter()
            .enumerate()
            .map(|(j, ch)| next(i * b + j, ch))
            .collect::<Result<_>>()?;
        let (y, _) = backward_step(
            self.c.driver.as_ref(),
            self.c.bounds.y_lipschitz,
            &here,
            &ys,
            &self.inc,
            self.spec.dt(),
        )?;
        Ok(y)
    }

    fn induction(&self, k: usize, i: usize, node: &TreeNode, history: usize, record: bool) -> Result<(f64, Vec<Entry>)> {
        if k == self.spec.n_steps {
            return Ok((self.leaf_value(node)?, Vec::new()));
        }
        let layout = self.layout();
        let per_opp: Vec<(f64, Vec<Entry>)> = (0..self.n_opp())
            .into_par_iter()
            .map(|o| {
                let h = history * layout.no + o;
                let mut best: Option<(f64, usize, Vec<Entry>)> = None;
                for s in 0..self.n_str() {
                    let (u, v) = self.pair(o, s);
                    let entries = std::sync::Mutex::new(Vec::new());
                    let y = self.child_values(k, i, node, u, v, &|ci, ch| {
                        let (y, e) = self.induction(k + 1, ci, ch, h, record)?;
                        if record {
                            entries.lock().unwrap().push((ci, e));
                        }
                        Ok(y)
                    })?;
                    if best.as_ref().is_none_or(|(b, _, _)| self.strategist_prefers(y, *b)) {
                        let mut e = entries.into_inner().unwrap();
                        e.sort_by_key(|(ci, _)| *ci);
                        best = Some((y, s, e.into_iter().flat_map(|(_, e)| e).collect()));
                    }
                }
                let (y, s, mut entries) = best.expect("nonempty strategist grid");
                if record {
                    entries.push(Entry {
                        key: layout.key(k, i, h),
                        control: s,
                    });
                }
                Ok((y, entries))
            })
            .collect::<Result<_>>()?;
        let mut value = per_opp[0].0;
        for (y, _) in &per_opp[1..] {
            if self.opponent_prefers(*y, value) {
                value = *y;
            }
        }
        let entries = per_opp.into_iter().flat_map(|(_, e)| e).collect();
        Ok((value, entries))
    }

    fn metadata(&self, algorithm: &str, evaluations: f64) -> ValueMetadata {
        ValueMetadata {
            side: self.side,
            algorithm: algorithm.into(),
            n_steps: self.spec.n_steps,
            branching: self.spec.branching,
            u_grid_size: self.grids.u.len(),
            v_grid_size: self.grids.v.len(),
            n_paths: None,
            seed: None,
            evaluations,
        }
    }

    fn check_induction_budget(&self) -> Result<f64> {
        let cost = self.induction_cost();
        if cost > self.budget {
            return Err(Error::BudgetExceeded {
                what: "backward-induction node evaluations",
                required: cost,
                budget: self.budget,
                hint: "use fewer steps, a binomial tree or smaller control grids",
            });
        }
        Ok(cost)
    }

    /// Value by backward induction together with the strategist's table.
    pub fn solve_with_strategy(&self, initial: &Path, z0: &CadlagPath, w0: &CadlagPath) -> Result<(ValueEstimate, StrategyMap)> {
        let cost = self.check_induction_budget()?;
        let root = self.check_start(initial, z0, w0)?;
        let (value, entries) = self.induction(0, 0, &root, 0, true)?;
        let layout = self.layout();
        let mut table = vec![None; layout.n_keys() as usize];
        for e in entries {
            table[e.key] = Some(e.control);
        }
        Ok((
            self.estimate(value, "backward_induction", cost)?,
            StrategyMap {
                side: self.side,
                n_steps: self.spec.n_steps,
                children: layout.b,
                opponent_grid_size: layout.no,
                own_grid: self.own_grid().to_vec(),
                table,
            },
        ))
    }

    fn estimate(&self, value: f64, algorithm: &str, evaluations: f64) -> Result<ValueEstimate> {
        if !value.is_finite() {
            return Err(Error::NonFinite {
                context: "tree game value",
                step: 0,
                path: 0,
            });
        }
        Ok(ValueEstimate {
            value,
            stderr: None,
            method: ValueMethod::TreeExact,
            metadata: self.metadata(algorithm, evaluations),
        })
    }

    pub fn solve(&self, initial: &Path, z0: &CadlagPath, w0: &CadlagPath, how: Enumeration) -> Result<ValueEstimate> {
        match how {
            Enumeration::BackwardInduction => {
                let cost = self.check_induction_budget()?;
                let root = self.check_start(initial, z0, w0)?;
                let (value, _) = self.induction(0, 0, &root, 0, false)?;
                self.estimate(value, "backward_induction", cost)
            }
            Enumeration::BruteForce => self.brute_force(initial, z0, w0),
        }
    }

    /// `J` for one strategy table against one opponent process (one control
    /// index per noise node, in breadth-first order).
    fn evaluate_pair(&self, root: &TreeNode, table: &[usize], opponent: &[usize]) -> Result<f64> {
        let layout = self.layout();
        self.eval_rec(&layout, 0, 0, root, 0, table, opponent)
    }

    #[allow(clippy::too_many_arguments)]
    fn eval_rec(
        &self,
        layout: &Layout,
        k: usize,
        i: usize,
        node: &TreeNode,
        history: usize,
        table: &[usize],
        opponent: &[usize],
    ) -> Result<f64> {
        if k == self.spec.n_steps {
            return self.leaf_value(node);
        }
        let o = opponent[layout.position(k, i)];
        let h = history * layout.no + o;
        let s = table[layout.key(k, i, h)];
        let (u, v) = self.pair(o, s);
        self.child_values(k, i, node, u, v, &|ci, ch| self.eval_rec(layout, k + 1, ci, ch, h, table, opponent))
    }

    fn brute_force(&self, initial: &Path, z0: &CadlagPath, w0: &CadlagPath) -> Result<ValueEstimate> {
        let (tables, procs) = self.brute_force_counts();
        let evaluations = tables * procs;
        if evaluations > self.budget {
            return Err(Error::BudgetExceeded {
                what: "brute-force strategy/control pairs",
                required: evaluations,
                budget: self.budget,
                hint: "use backward induction, fewer steps or 2-point grids",
            });
        }
        let root = self.check_start(initial, z0, w0)?;
        let layout = self.layout();
        let n_keys = layout.n_keys() as usize;
        let n_nodes = layout.n_nodes();
        let (ns, no) = (self.n_str(), layout.no);
        let procs: Vec<Vec<usize>> = (0..procs as usize).map(|b| digits(b, no, n_nodes)).collect();
        let per_table: Vec<f64> = (0..tables as usize)
            .into_par_iter()
            .map(|a| {
                let table = digits(a, ns, n_keys);
                let mut best: Option<f64> = None;
                for opp in &procs {
                    let y = self.evaluate_pair(&root, &table, opp)?;
                    if best.is_none_or(|b| self.opponent_prefers(y, b)) {
                        best = Some(y);
                    }
                }
                Ok(best.expect("nonempty opponent grid"))
            })
            .collect::<Result<_>>()?;
        let mut value = per_table[0];
        for y in &per_table[1..] {
            if self.strategist_prefers(*y, value) {
                value = *y;
            }
        }
        self.estimate(value, "brute_force", evaluations)
    }

    /// Opponent's best value against a fixed strategy table, by enumeration
    /// of all adapted opponent processes.
    pub fn value_against(&self, strategy: &StrategyMap, initial: &Path, z0: &CadlagPath, w0: &CadlagPath) -> Result<f64> {
        if strategy.side != self.side || strategy.n_steps != self.spec.n_steps || !strategy.is_complete() {
            return Err(Error::invalid("strategy table does not fit this game"));
        }
        let layout = self.layout();
        let procs = (layout.no as f64).powi(layout.n_nodes() as i32);
        if procs > self.budget {
            return Err(Error::BudgetExceeded {
                what: "opponent control processes",
                required: procs,
                budget: self.budget,
                hint: "use fewer steps or smaller grids",
            });
        }
        let root = self.check_start(initial, z0, w0)?;
        let table: Vec<usize> = strategy.table.iter().map(|e| e.unwrap()).collect();
        let ys: Vec<f64> = (0..procs as usize)
            .into_par_iter()
            .map(|b| self.evaluate_pair(&root, &table, &digits(b, layout.no, layout.n_nodes())))
            .collect::<Result<_>>()?;
        let mut value = ys[0];
        for y in &ys[1..] {
            if self.opponent_prefers(*y, value) {
                value = *y;
            }
        }
        Ok(value)
    }
}

/// Base-`base` digits of `x`, most significant first.
fn digits(mut x: usize, base: usize, len: usize) -> Vec<usize> {
    let mut out = vec![0; len];
    for d in out.iter_mut().rev() {
        *d = x % base;
        x /= base;
    }
    out
}

/// Lower value `inf_α sup_v J(t, A_t; Z_t ⊗ α(v), W_t ⊗ v)` on a tree.
pub fn lower_value_tree(
    c: &GameCoefficients,
    initial: &Path,
    z0: &CadlagPath,
    w0: &CadlagPath,
    spec: TreeSpec,
    grids: &GameGrids,
    how: Enumeration,
) -> Result<ValueEstimate> {
    TreeGame::new(c, spec, grids, Side::Lower)?.solve(initial, z0, w0, how)
}

/// Upper value `sup_β inf_u J(t, A_t; Z_t ⊗ u, W_t ⊗ β(u))` on a tree.
pub fn upper_value_tree(
    c: &GameCoefficients,
    initial: &Path,
    z0: &CadlagPath,
    w0: &CadlagPath,
    spec: TreeSpec,
    grids: &GameGrids,
    how: Enumeration,
) -> Result<ValueEstimate> {
    TreeGame::new(c, spec, grids, Side::Upper)?.solve(initial, z0, w0, how)
}

pub fn value_tree(
    c: &GameCoefficients,
    initial: &Path,
    z0: &CadlagPath,
    w0: &CadlagPath,
    spec: TreeSpec,
    grids: &GameGrids,
    side: Side,
    how: Enumeration,
) -> Result<ValueEstimate> {
    TreeGame::new(c, spec, grids, side)?.solve(initial, z0, w0, how)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DppReport {
    pub side: Side,
    pub split_step: usize,
    pub split_time: f64,
    pub lhs: f64,
    pub rhs: f64,
    pub abs_gap: f64,
    /// How the min-max over `[t, t + τ]` was enumerated.
    pub outer: Enumeration,
}

/// Dynamic programming check at tree level `split_step`.
///
/// The left side is the value over the whole tree. The right side solves,
/// at every node of level `split_step` and for every control history that
/// reaches it, a fresh game over the remaining steps with that node's state
/// and control paths as initial data, then min-maxes the backward semigroup
/// over the first `split_step` steps with those values as terminal data.
/// The outer min-max uses brute-force enumeration when within budget.
#[allow(clippy::too_many_arguments)]
pub fn check_dpp(
    c: &GameCoefficients,
    initial: &Path,
    z0: &CadlagPath,
    w0: &CadlagPath,
    spec: TreeSpec,
    split_step: usize,
    grids: &GameGrids,
    side: Side,
) -> Result<DppReport> {
    if split_step == 0 || split_step > spec.n_steps {
        return Err(Error::invalid(format!(
            "DPP split step must lie in 1..={}, got {split_step}",
            spec.n_steps
        )));
    }
    let full = TreeGame::new(c, spec, grids, side)?;
    let lhs = full.solve(initial, z0, w0, Enumeration::BackwardInduction)?.value;
    let times = spec.times();
    let split_time = times[split_step];
    let outer_spec = TreeSpec {
        n_steps: split_step,
        t_end: split_time,
        ..spec
    };
    let inner_spec = TreeSpec {
        n_steps: spec.n_steps - split_step,
        t0: split_time,
        ..spec
    };
    // brute force revisits the same split nodes many times
    let cache: std::sync::Mutex<std::collections::HashMap<Vec<u64>, f64>> = Default::default();
    let leaf = |node: &TreeNode| -> Result<f64> {
        if inner_spec.n_steps == 0 {
            return Ok(c.terminal_at(&node.x));
        }
        let key: Vec<u64> = [
            node.x.raw_values(),
            node.z.raw_values(),
            node.z.grid(),
            node.w.raw_values(),
            node.w.grid(),
        ]
        .iter()
        .flat_map(|s| s.iter().map(|v| v.to_bits()).chain([u64::MAX]))
        .collect();
        if let Some(&y) = cache.lock().unwrap().get(&key) {
            return Ok(y);
        }
        let y = TreeGame::new(c, inner_spec, grids, side)?
            .solve(&node.x, &node.z, &node.w, Enumeration::BackwardInduction)?
            .value;
        cache.lock().unwrap().insert(key, y);
        Ok(y)
    };
    let outer_game = TreeGame::new(c, outer_spec, grids, side)?.with_leaf(&leaf);
    let (tables, procs) = outer_game.brute_force_counts();
    let outer = if tables * procs <= DEFAULT_ENUMERATION_BUDGET / 10.0 {
        Enumeration::BruteForce
    } else {
        Enumeration::BackwardInduction
    };
    let rhs = outer_game.solve(initial, z0, w0, outer)?.value;
    Ok(DppReport {
        side,
        split_step,
        split_time,
        lhs,
        rhs,
        abs_gap: (lhs - rhs).abs(),
        outer,
    })
}

/// Perturbation direction for [`value_regularity_probe`]: shifts added to the
/// state path and control histories (same grids as the base data).
#[derive(Debug, Clone, PartialEq)]
pub struct Perturbation {
    pub state: Option<Path>,
    pub z: Option<CadlagPath>,
    pub w: Option<CadlagPath>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleRatio {
    pub scale: f64,
    pub input_distance: f64,
    pub value_diff: f64,
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeRatio {
    pub shift: f64,
    pub value_diff: f64,
    /// `|ΔG| / (sqrt(τ) (1 + ‖A‖∞))`.
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegularityReport {
    pub side: Side,
    pub base_value: f64,
    pub lipschitz: Vec<ScaleRatio>,
    pub time: Vec<TimeRatio>,
    /// Largest ratio between consecutive scales (`ratio[k+1] / ratio[k]`);
    /// zero ratios are skipped.
    pub max_growth: f64,
}

fn add_path(base: &Path, shift: &Path, s: f64) -> Result<Path> {
    if base.grid() != shift.grid() || base.dim() != shift.dim() {
        return Err(Error::invalid("state perturbation must share the base grid"));
    }
    let mut out = base.clone();
    for (v, d) in out.values_mut().iter_mut().zip(shift.raw_values()) {
        *v += s * d;
    }
    Ok(out)
}

fn add_cadlag(base: &CadlagPath, shift: &CadlagPath, s: f64, set: &crate::path::ControlSet) -> Result<CadlagPath> {
    if base.grid() != shift.grid() || base.dim() != shift.dim() {
        return Err(Error::invalid("control perturbation must share the base grid"));
    }
    let n = base.dim();
    let mut values = Vec::with_capacity(base.raw_values().len());
    for i in 0..base.len() {
        let moved: Vec<f64> = base.point(i).iter().zip(shift.point(i)).map(|(a, b)| a + s * b).collect();
        values.extend(set.project(&moved));
    }
    CadlagPath::new(base.grid().to_vec(), values, n, base.t_end(), base.horizon())
}

/// Empirical regularity of the tree value: ratios of value differences to
/// `d∞` input distances over the perturbation `scales`, and to
/// `sqrt(τ) (1 + ‖A‖∞)` over the start-time `time_shifts` (data flat-extended).
#[allow(clippy::too_many_arguments)]
pub fn value_regularity_probe(
    c: &GameCoefficients,
    base: (&Path, &CadlagPath, &CadlagPath),
    direction: &Perturbation,
    scales: &[f64],
    time_shifts: &[f64],
    spec: TreeSpec,
    grids: &GameGrids,
    side: Side,
) -> Result<RegularityReport> {
    let (a, z, w) = base;
    let value = |a: &Path, z: &CadlagPath, w: &CadlagPath, spec: TreeSpec| {
        value_tree(c, a, z, w, spec, grids, side, Enumeration::BackwardInduction).map(|v| v.value)
    };
    let base_value = value(a, z, w, spec)?;
    let mut lipschitz = Vec::with_capacity(scales.len());
    for &s in scales {
        let a2 = match &direction.state {
            Some(d) => add_path(a, d, s)?,
            None => a.clone(),
        };
        let z2 = match &direction.z {
            Some(d) => add_cadlag(z, d, s, &c.u_set)?,
            None => z.clone(),
        };
        let w2 = match &direction.w {
            Some(d) => add_cadlag(w, d, s, &c.v_set)?,
            None => w.clone(),
        };
        let dist = d_infty(a, &a2)? + d_infty(z, &z2)? + d_infty(w, &w2)?;
        let diff = (value(&a2, &z2, &w2, spec)? - base_value).abs();
        lipschitz.push(ScaleRatio {
            scale: s,
            input_distance: dist,
            value_diff: diff,
            ratio: if dist > 0.0 { diff / dist } else { 0.0 },
        });
    }
    let mut time = Vec::with_capacity(time_shifts.len());
    let a_norm = a.sup_norm();
    for &tau in time_shifts {
        let shifted = TreeSpec { t0: spec.t0 + tau, ..spec };
        let v = value(&a.flat_extend(tau)?, &z.flat_extend(tau)?, &w.flat_extend(tau)?, shifted)?;
        let diff = (v - base_value).abs();
        time.push(TimeRatio {
            shift: tau,
            value_diff: diff,
            ratio: if tau > 0.0 { diff / (tau.sqrt() * (1.0 + a_norm)) } else { 0.0 },
        });
    }
    let max_growth = lipschitz
        .windows(2)
        .filter(|w| w[0].ratio > 0.0)
        .map(|w| w[1].ratio / w[0].ratio)
        .fold(0.0, f64::max);
    Ok(RegularityReport {
        side,
        base_value,
        lipschitz,
        time,
        max_growth,
    })
}

/// Strategist response: sees the policy input and the opponent's current control.
pub type ResponseFn = dyn Fn(&PolicyInput, &[f64]) -> Vec<f64> + Send + Sync;
/// Opponent feedback control.
pub type FeedbackFn = dyn Fn(&PolicyInput) -> Vec<f64> + Send + Sync;

/// Finite parametric families for the Monte Carlo min-max.
#[derive(Clone)]
pub struct StrategyFamily {
    pub strategies: Vec<(String, Arc<ResponseFn>)>,
    pub opponents: Vec<(String, Arc<FeedbackFn>)>,
}

impl StrategyFamily {
    /// Linear feedback families projected onto the control sets.
    ///
    /// Strategist: `s_j = proj(r · o_j + a · x_{j mod n} + b)` over the grids
    /// `(r, a, b)`, where `o` is the opponent's current control (`o_j = 0` past
    /// its dimension). Opponent: `o_j = proj(a · x_{j mod n} + b)`.
    pub fn linear(
        c: &GameCoefficients,
        side: Side,
        response: &[f64],
        state: &[f64],
        offset: &[f64],
        opponent_state: &[f64],
        opponent_offset: &[f64],
    ) -> Self {
        let (own_set, opp_set) = match side {
            Side::Lower => (c.u_set.clone(), c.v_set.clone()),
            Side::Upper => (c.v_set.clone(), c.u_set.clone()),
        };
        let mut strategies: Vec<(String, Arc<ResponseFn>)> = Vec::new();
        for &r in response {
            for &a in state {
                for &b in offset {
                    let set = own_set.clone();
                    let f = move |inp: &PolicyInput, o: &[f64]| {
                        let x = inp.state.terminal();
                        let raw: Vec<f64> = (0..set.dim())
                            .map(|j| r * o.get(j).copied().unwrap_or(0.0) + a * x[j % x.len()] + b)
                            .collect();
                        set.project(&raw)
                    };
                    strategies.push((format!("response={r},state={a},offset={b}"), Arc::new(f)));
                }
            }
        }
        let mut opponents: Vec<(String, Arc<FeedbackFn>)> = Vec::new();
        for &a in opponent_state {
            for &b in opponent_offset {
                let set = opp_set.clone();
                let f = move |inp: &PolicyInput| {
                    let x = inp.state.terminal();
                    let raw: Vec<f64> = (0..set.dim()).map(|j| a * x[j % x.len()] + b).collect();
                    set.project(&raw)
                };
                opponents.push((format!("state={a},offset={b}"), Arc::new(f)));
            }
        }
        Self { strategies, opponents }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OuterStep {
    pub strategy: String,
    pub best_opponent: String,
    pub value: f64,
    pub stderr: f64,
}

/// Optimizer traces of the Monte Carlo min-max.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LsmcTrace {
    /// Per strategist candidate: the opponent's best reply and its value.
    pub outer: Vec<OuterStep>,
    /// `inner[s][o]`: objective of strategist `s` against opponent `o`.
    pub inner: Vec<Vec<f64>>,
    pub chosen_strategy: usize,
}

/// Objective `J` by LSMC for the pair `(s, o)` of `family` on `bb`.
pub fn objective_lsmc_pair(
    c: &GameCoefficients,
    initial: &Path,
    z0: &CadlagPath,
    w0: &CadlagPath,
    bb: &BrownianBatch,
    family: &StrategyFamily,
    side: Side,
    s: usize,
    o: usize,
    basis: &BasisSpec,
) -> Result<(f64, f64)> {
    let strat = family.strategies[s].1.clone();
    let opp = family.opponents[o].1.clone();
    let policy = move |inp: &PolicyInput| {
        let oc = opp(inp);
        let sc = strat(inp, &oc);
        match side {
            Side::Lower => (sc, oc),
            Side::Upper => (oc, sc),
        }
    };
    let sim = simulate_with_policy(c, initial, z0, w0, bb, &policy)?;
    let m: Vec<f64> = sim.states.iter().map(|x| c.terminal_at(x)).collect();
    let sol = solve_bsde_lsmc(&sim, bb, c, &m, basis)?;
    Ok((sol.y0, sol.stderr))
}

/// Approximate value by min-max over the parametric `family` with common
/// random numbers (all pairs use the batch `bb`).
///
/// The result bounds the family-restricted optimization only: the strategist
/// optimizes over a subset of strategies and the opponent over a subset of
/// controls.
#[allow(clippy::too_many_arguments)]
pub fn value_lsmc(
    c: &GameCoefficients,
    initial: &Path,
    z0: &CadlagPath,
    w0: &CadlagPath,
    bb: &BrownianBatch,
    family: &StrategyFamily,
    side: Side,
    basis: &BasisSpec,
) -> Result<(ValueEstimate, LsmcTrace)> {
    if family.strategies.is_empty() || family.opponents.is_empty() {
        return Err(Error::invalid("strategy family must be nonempty on both sides"));
    }
    let strategist_prefers = |a: f64, b: f64| match side {
        Side::Lower => a < b,
        Side::Upper => a > b,
    };
    let mut inner = Vec::with_capacity(family.strategies.len());
    let mut outer = Vec::with_capacity(family.strategies.len());
    let mut best: Option<(f64, f64, usize)> = None;
    for s in 0..family.strategies.len() {
        let mut row = Vec::with_capacity(family.opponents.len());
        let mut reply: Option<(f64, f64, usize)> = None;
        for o in 0..family.opponents.len() {
            let (y, se) = objective_lsmc_pair(c, initial, z0, w0, bb, family, side, s, o, basis)?;
            row.push(y);
            if reply.is_none_or(|(r, _, _)| !strategist_prefers(y, r) && y != r) {
                reply = Some((y, se, o));
            }
        }
        let (y, se, o) = reply.unwrap();
        outer.push(OuterStep {
            strategy: family.strategies[s].0.clone(),
            best_opponent: family.opponents[o].0.clone(),
            value: y,
            stderr: se,
        });
        inner.push(row);
        if best.is_none_or(|(b, _, _)| strategist_prefers(y, b)) {
            best = Some((y, se, s));
        }
    }
    let (value, stderr, chosen) = best.unwrap();
    let spec = bb.spec;
    Ok((
        ValueEstimate {
            value,
            stderr: Some(stderr),
            method: ValueMethod::Lsmc,
            metadata: ValueMetadata {
                side,
                algorithm: "lsmc_family_minmax".into(),
                n_steps: spec.n_steps,
                branching: 0,
                u_grid_size: match side {
                    Side::Lower => family.strategies.len(),
                    Side::Upper => family.opponents.len(),
                },
                v_grid_size: match side {
                    Side::Lower => family.opponents.len(),
                    Side::Upper => family.strategies.len(),
                },
                n_paths: Some(spec.n_paths),
                seed: Some(spec.seed),
                evaluations: (family.strategies.len() * family.opponents.len()) as f64,
            },
        },
        LsmcTrace {
            outer,
            inner,
            chosen_strategy: chosen,
        },
    ))
}

#[allow(clippy::too_many_arguments)]
pub fn lower_value_lsmc(
    c: &GameCoefficients,
    initial: &Path,
    z0: &CadlagPath,
    w0: &CadlagPath,
    bb: &BrownianBatch,
    family: &StrategyFamily,
    basis: &BasisSpec,
) -> Result<(ValueEstimate, LsmcTrace)> {
    value_lsmc(c, initial, z0, w0, bb, family, Side::Lower, basis)
}

#[allow(clippy::too_many_arguments)]
pub fn upper_value_lsmc(
    c: &GameCoefficients,
    initial: &Path,
    z0: &CadlagPath,
    w0: &CadlagPath,
    bb: &BrownianBatch,
    family: &StrategyFamily,
    basis: &BasisSpec,
) -> Result<(ValueEstimate, LsmcTrace)> {
    value_lsmc(c, initial, z0, w0, bb, family, Side::Upper, basis)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{BatchSpec, Bounds, Dims, IncrementLaw};
    use crate::path::ControlSet;
    use nalgebra::{DMatrix, DVector};

    fn sum_squared(sigma: f64) -> GameCoefficients {
        GameCoefficients::new(
            "sum_squared",
            Dims::scalar(),
            1.0,
            Bounds::new(10.0, 1.0).with_driver_lipschitz(0.5, 0.5),
            ControlSet::interval(-1.0, 1.0),
            ControlSet::interval(-1.0, 1.0),
        )
        .unwrap()
        .with_drift(|_, u, v| DVector::from_element(1, u.terminal()[0] + v.terminal()[0]))
        .with_diffusion(move |_, _, _| DMatrix::from_element(1, 1, sigma))
        .with_terminal(|x| x.terminal()[0].powi(2))
    }

    fn start() -> (Path, CadlagPath, CadlagPath) {
        (
            Path::constant(&[0.0], 0.0, 1.0).unwrap(),
            CadlagPath::constant(&[0.0], 0.0, 0.0, 1.0).unwrap(),
            CadlagPath::constant(&[0.0], 0.0, 0.0, 1.0).unwrap(),
        )
    }

    fn both(c: &GameCoefficients, spec: TreeSpec, g: &GameGrids, side: Side) -> (f64, f64) {
        let (a, z, w) = start();
        let bi = value_tree(c, &a, &z, &w, spec, g, side, Enumeration::BackwardInduction).unwrap();
        let bf = value_tree(c, &a, &z, &w, spec, g, side, Enumeration::BruteForce).unwrap();
        (bi.value, bf.value)
    }

    #[test]
    fn one_step_saddle_example() {
        let c = sum_squared(0.0);
        let g = GameGrids::scalar(&[-1.0, 0.0, 1.0], &[-1.0, 0.0, 1.0]);
        let spec = TreeSpec::new(1, 2, 0.0, 1.0);
        let game = TreeGame::new(&c, spec, &g, Side::Lower).unwrap();
        assert_eq!(game.brute_force_counts(), (27.0, 3.0));
        let (bi, bf) = both(&c, spec, &g, Side::Lower);
        assert_eq!((bi, bf), (0.0, 0.0));
        // Player 2 moves second in the upper game and answers u = 0 with v = ±1
        let (bi, bf) = both(&c, spec, &g, Side::Upper);
        assert_eq!((bi, bf), (1.0, 1.0));
        // best response maps v to -v
        let (a, z, w) = start();
        let (_, alpha) = game.solve_with_strategy(&a, &z, &w).unwrap();
        for o in 0..3 {
            assert_eq!(alpha.control(0, 0, &[o]).unwrap()[0], -g.v[o][0], "{alpha:?}");
        }
    }

    #[test]
    fn hand_enumeration_of_one_step_values() {
        // min over the 27 maps alpha of max over v of (alpha(v) + v)^2, by hand
        let grid = [-1.0f64, 0.0, 1.0];
        let mut best = f64::INFINITY;
        for a in 0..27usize {
            let alpha = [grid[a / 9], grid[(a / 3) % 3], grid[a % 3]];
            let worst = (0..3).map(|i| (alpha[i] + grid[i]).powi(2)).fold(f64::NEG_INFINITY, f64::max);
            best = best.min(worst);
        }
        let c = sum_squared(0.0);
        let g = GameGrids::scalar(&grid, &grid);
        let (_, bf) = both(&c, TreeSpec::new(1, 2, 0.0, 1.0), &g, Side::Lower);
        assert_eq!(bf, best);
        // sup over the 27 maps beta of min over u of (u + beta(u))^2
        let mut best = f64::NEG_INFINITY;
        for b in 0..27usize {
            let beta = [grid[b / 9], grid[(b / 3) % 3], grid[b % 3]];
            let easiest = (0..3).map(|i| (grid[i] + beta[i]).powi(2)).fold(f64::INFINITY, f64::min);
            best = best.max(easiest);
        }
        let (_, bf) = both(&c, TreeSpec::new(1, 2, 0.0, 1.0), &g, Side::Upper);
        assert_eq!(bf, best);
    }

    #[test]
    fn induction_matches_brute_force_on_two_steps() {
        let g = GameGrids::scalar(&[-1.0, 1.0], &[-0.5, 1.0]);
        for sigma in [0.0, 0.7] {
            let c = sum_squared(sigma).with_driver(|x, y, _, u, _| 0.3 * x.terminal()[0] - 0.2 * y + 0.1 * u.terminal()[0]);
            let spec = TreeSpec::new(2, 2, 0.0, 1.0);
            assert_eq!(
                TreeGame::new(&c, spec, &g, Side::Lower).unwrap().brute_force_counts(),
                (1024.0, 8.0)
            );
            for side in [Side::Lower, Side::Upper] {
                let (bi, bf) = both(&c, spec, &g, side);
                assert_eq!(bi, bf, "{side:?} sigma {sigma}");
            }
        }
    }

    #[test]
    fn extracted_strategy_attains_the_value() {
        let c = sum_squared(0.5).with_driver(|x, _, _, _, w| x.terminal()[0] * w.terminal()[0]);
        let g = GameGrids::scalar(&[-1.0, 1.0], &[-1.0, 0.0, 1.0]);
        let spec = TreeSpec::new(2, 2, 0.0, 1.0);
        let (a, z, w) = start();
        for side in [Side::Lower, Side::Upper] {
            let game = TreeGame::new(&c, spec, &g, side).unwrap();
            let (v, map) = game.solve_with_strategy(&a, &z, &w).unwrap();
            assert!(map.is_complete());
            assert_eq!(game.value_against(&map, &a, &z, &w).unwrap(), v.value);
            assert!(v.stderr.is_none());
        }
    }

    #[test]
    fn constant_terminal_and_degenerate_players() {
        let (a, z, w) = start();
        let g = GameGrids::scalar(&[-1.0, 0.0, 1.0], &[-1.0, 1.0]);
        let spec = TreeSpec::new(2, 3, 0.0, 1.0);
        let c = sum_squared(1.0).with_terminal(|_| 4.5);
        for side in [Side::Lower, Side::Upper] {
            assert_eq!(
                value_tree(&c, &a, &z, &w, spec, &g, side, Enumeration::BackwardInduction)
                    .unwrap()
                    .value,
                4.5
            );
        }
        // only Player 2 matters: both values equal the best adapted v
        let c = sum_squared(0.0).with_drift(|_, _, v| DVector::from_element(1, v.terminal()[0]));
        let spec = TreeSpec::new(2, 2, 0.0, 1.0);
        let lo = value_tree(&c, &a, &z, &w, spec, &g, Side::Lower, Enumeration::BruteForce)
            .unwrap()
            .value;
        let hi = value_tree(&c, &a, &z, &w, spec, &g, Side::Upper, Enumeration::BackwardInduction)
            .unwrap()
            .value;
        assert_eq!(lo, 1.0);
        assert_eq!(hi, 1.0);
    }

    #[test]
    fn budget_errors_carry_counts() {
        let (a, z, w) = start();
        let c = sum_squared(1.0);
        let g = GameGrids::scalar(&[-1.0, 0.0, 1.0], &[-1.0, 0.0, 1.0]);
        let err = lower_value_tree(&c, &a, &z, &w, TreeSpec::new(3, 2, 0.0, 1.0), &g, Enumeration::BruteForce).unwrap_err();
        assert!(matches!(err, Error::BudgetExceeded { required, .. } if required > 1e7));
    }

    #[test]
    fn dpp_gap_on_two_step_instance() {
        let (a, z, w) = start();
        let c = sum_squared(0.6).with_driver(|x, y, _, _, _| x.terminal()[0].sin() - 0.4 * y);
        let g = GameGrids::scalar(&[-1.0, 1.0], &[-1.0, 1.0]);
        let spec = TreeSpec::new(2, 2, 0.0, 1.0);
        for side in [Side::Lower, Side::Upper] {
            for split in [1, 2] {
                let r = check_dpp(&c, &a, &z, &w, spec, split, &g, side).unwrap();
                assert!(r.abs_gap <= 1e-12, "{r:?}");
                assert_eq!(r.outer, Enumeration::BruteForce);
            }
        }
    }

    #[test]
    fn dpp_without_controls_is_the_tower_property() {
        let (a, z, w) = start();
        let c = sum_squared(1.0)
            .with_drift(|_, _, _| DVector::zeros(1))
            .with_terminal(|x| x.terminal()[0].exp());
        let g = GameGrids::scalar(&[0.0], &[0.0]);
        let r = check_dpp(&c, &a, &z, &w, TreeSpec::new(3, 3, 0.0, 1.0), 1, &g, Side::Lower).unwrap();
        assert!(r.abs_gap <= 1e-12);
    }

    #[test]
    fn regularity_probe_examples() {
        let (a, _, _) = start();
        let a = a.flat_extend(0.25).unwrap();
        let z = CadlagPath::constant(&[0.0], 0.0, 0.25, 1.0).unwrap();
        let c = sum_squared(0.8);
        let g = GameGrids::scalar(&[-1.0, 1.0], &[-1.0, 1.0]);
        let spec = TreeSpec::new(2, 2, 0.25, 1.0);
        let dir = Perturbation {
            state: Some(a.map_values(|t, _| vec![1.0 + t]).unwrap()),
            z: None,
            w: None,
        };
        let zero = value_regularity_probe(&c, (&a, &z, &z), &dir, &[0.0], &[0.0], spec, &g, Side::Lower).unwrap();
        assert_eq!(zero.lipschitz[0].value_diff, 0.0);
        assert_eq!(zero.time[0].value_diff, 0.0);
        let scales = [0.2, 0.1, 0.05, 0.025];
        let shifts = [0.1, 0.01, 0.001];
        let r = value_regularity_probe(&c, (&a, &z, &z), &dir, &scales, &shifts, spec, &g, Side::Lower).unwrap();
        assert!(r.max_growth <= 2.0, "{r:?}");
        assert!(r.time[2].value_diff < r.time[0].value_diff);
    }

    #[test]
    fn tree_values_do_not_depend_on_thread_count() {
        let (a, z, w) = start();
        let c = sum_squared(0.9).with_driver(|x, y, _, u, v| x.terminal()[0].cos() * u.terminal()[0] - v.terminal()[0] * y * 0.1);
        let g = GameGrids::scalar(&[-1.0, 0.0, 1.0], &[-1.0, 0.5]);
        let spec = TreeSpec::new(2, 3, 0.0, 1.0);
        let run = |threads| {
            rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap().install(|| {
                lower_value_tree(&c, &a, &z, &w, spec, &g, Enumeration::BackwardInduction)
                    .unwrap()
                    .value
            })
        };
        assert_eq!(run(1).to_bits(), run(4).to_bits());
    }

    fn rademacher(n_paths: usize, n_steps: usize, seed: u64) -> BrownianBatch {
        BrownianBatch::new(BatchSpec {
            seed,
            n_paths,
            n_steps,
            t0: 0.0,
            horizon: 1.0,
            p: 1,
            law: IncrementLaw::Rademacher,
        })
        .unwrap()
    }

    #[test]
    fn lsmc_family_examples() {
        let (a, z, w) = start();
        let basis = BasisSpec::default();
        let c = sum_squared(1.0).with_terminal(|_| 2.0);
        let fam = StrategyFamily::linear(&c, Side::Lower, &[0.0, -1.0], &[0.0], &[0.0], &[0.0], &[-1.0, 1.0]);
        let bb = rademacher(400, 4, 1);
        let (v, trace) = lower_value_lsmc(&c, &a, &z, &w, &bb, &fam, &basis).unwrap();
        assert!((v.value - 2.0).abs() < 1e-12);
        assert!(v.stderr.unwrap() < 1e-12);
        assert_eq!(trace.inner.len(), 2);

        // singleton family equals J of that pair
        let c = sum_squared(1.0);
        let single = StrategyFamily::linear(&c, Side::Lower, &[0.5], &[0.0], &[0.1], &[0.0], &[0.3]);
        let (v, _) = lower_value_lsmc(&c, &a, &z, &w, &bb, &single, &basis).unwrap();
        let j = objective_lsmc_pair(&c, &a, &z, &w, &bb, &single, Side::Lower, 0, 0, &basis).unwrap();
        assert_eq!(v.value, j.0);
    }

    #[test]
    fn lsmc_family_with_mirror_response_matches_tree() {
        let (a, z, w) = start();
        let c = sum_squared(1.0);
        let g = GameGrids::scalar(&[-1.0, 1.0], &[-1.0, 1.0]);
        let tree = lower_value_tree(&c, &a, &z, &w, TreeSpec::new(3, 2, 0.0, 1.0), &g, Enumeration::BackwardInduction).unwrap();
        let fam = StrategyFamily::linear(&c, Side::Lower, &[-1.0, 0.0], &[0.0], &[0.0], &[0.0], &[-1.0, 1.0]);
        let bb = rademacher(20000, 3, 5);
        let (v, _) = lower_value_lsmc(&c, &a, &z, &w, &bb, &fam, &BasisSpec::default()).unwrap();
        let se = v.stderr.unwrap();
        assert!((v.value - tree.value).abs() <= 3.0 * se, "{} vs {} ± {se}", v.value, tree.value);
    }
}
