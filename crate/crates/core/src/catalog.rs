//! Built-in game instances and the Riccati oracle for the scalar
//! linear-quadratic game.

use std::collections::BTreeMap;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::calculus::{FnFunctional, FunctionalDerivatives, PathTriple, Smoothness, StepReport};
use crate::dynamics::{Bounds, Dims, GameCoefficients};
use crate::error::{Error, Result};
use crate::hji::CandidateSolution;
use crate::path::{ControlSet, TimePath};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub default: f64,
    pub description: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CatalogEntry {
    pub name: String,
    pub description: String,
    pub params: Vec<ParamSpec>,
}

fn p(name: &str, default: f64, description: &str) -> ParamSpec {
    ParamSpec {
        name: name.into(),
        default,
        description: description.into(),
    }
}

/// All instances with their parameter schemas.
pub fn catalog() -> Vec<CatalogEntry> {
    vec![
        CatalogEntry {
            name: "linear".into(),
            description: "dx = (u + v) ds + sigma dB, no running cost, terminal cost x^2".into(),
            params: vec![
                p("sigma", 0.0, "diffusion coefficient"),
                p("horizon", 1.0, "terminal time T"),
                p("control_bound", 1.0, "controls take values in [-b, b]"),
            ],
        },
        CatalogEntry {
            name: "lq".into(),
            description: "scalar linear-quadratic game: dx = (a x + b1 u + b2 v) ds + sigma dB, \
                          l = q x^2 + r1 u^2 - r2 v^2, m = qt x^2"
                .into(),
            params: LqParams::default().specs(),
        },
        CatalogEntry {
            name: "delay".into(),
            description: "delayed controls and state: dx = [f1 x(s-r) + f2 (u(s) + u(s-r) - v(s) - v(s-r))/2] ds + sigma dB, \
                          l = l1 (cos x - 0.1 y) + l2 (u(s)^2 - v(s)^2 + u(s-r) v(s-r)/2), m = x^2"
                .into(),
            params: vec![
                p("r", 0.25, "delay"),
                p("f1", -0.5, "state feedback on the delayed state"),
                p("f2", 1.0, "control gain"),
                p("l1", 1.0, "state cost weight"),
                p("l2", 1.0, "control cost weight"),
                p("sigma", 0.3, "diffusion coefficient"),
                p("horizon", 1.0, "terminal time T"),
                p("control_bound", 1.0, "controls take values in [-b, b]"),
            ],
        },
        CatalogEntry {
            name: "separated_hamiltonian".into(),
            description: "dx = (u - v/2) ds + 0.4 (1 + 0.5 sin x) dB, l = 0.5 cos x + u^2 - 0.5 v^2 - 0.2 y, m = cos x".into(),
            params: vec![
                p("horizon", 1.0, "terminal time T"),
                p("control_bound", 1.0, "controls take values in [-b, b]"),
            ],
        },
        CatalogEntry {
            name: "bilinear".into(),
            description: "dx = sigma dB, l = u v, m = 0; the Isaacs condition fails".into(),
            params: vec![
                p("sigma", 0.5, "diffusion coefficient"),
                p("horizon", 1.0, "terminal time T"),
                p("control_bound", 1.0, "controls take values in [-b, b]"),
            ],
        },
    ]
}

/// Fills defaults and rejects unknown parameter names.
pub fn resolve_params(name: &str, given: &BTreeMap<String, f64>) -> Result<BTreeMap<String, f64>> {
    let entry = catalog()
        .into_iter()
        .find(|e| e.name == name)
        .ok_or_else(|| Error::invalid(format!("unknown instance {name:?}")))?;
    let mut out: BTreeMap<String, f64> = entry.params.iter().map(|s| (s.name.clone(), s.default)).collect();
    for (k, v) in given {
        if !out.contains_key(k) {
            return Err(Error::invalid(format!("instance {name:?} has no parameter {k:?}")));
        }
        if !v.is_finite() {
            return Err(Error::invalid(format!("parameter {k:?} must be finite")));
        }
        out.insert(k.clone(), *v);
    }
    Ok(out)
}

/// Builds the named instance; missing parameters take their defaults.
pub fn build(name: &str, given: &BTreeMap<String, f64>) -> Result<GameCoefficients> {
    let ps = resolve_params(name, given)?;
    let g = |k: &str| ps[k];
    let positive = |k: &str| -> Result<f64> {
        let v = g(k);
        if v > 0.0 {
            Ok(v)
        } else {
            Err(Error::invalid(format!("parameter {k:?} must be positive, got {v}")))
        }
    };
    match name {
        "linear" => linear(g("sigma"), positive("horizon")?, positive("control_bound")?),
        "lq" => LqParams::from_map(&ps)?.coefficients(),
        "delay" => delay(
            DelayParams {
                r: positive("r")?,
                f1: g("f1"),
                f2: g("f2"),
                l1: g("l1"),
                l2: g("l2"),
                sigma: g("sigma"),
            },
            positive("horizon")?,
            positive("control_bound")?,
        ),
        "separated_hamiltonian" => separated_hamiltonian(positive("horizon")?, positive("control_bound")?),
        "bilinear" => bilinear(g("sigma"), positive("horizon")?, positive("control_bound")?),
        _ => unreachable!("resolve_params rejects unknown names"),
    }
}

/// Declared growth and Lipschitz constants hold for states with `|x| <= 2`,
/// the sup-norm radius of the default probe ball.
pub const STATE_RADIUS: f64 = 2.0;

fn scalar(name: &str, horizon: f64, bounds: Bounds, b: f64) -> Result<GameCoefficients> {
    GameCoefficients::new(
        name,
        Dims::scalar(),
        horizon,
        bounds,
        ControlSet::interval(-b, b),
        ControlSet::interval(-b, b),
    )
}

fn x(a: &crate::path::Path) -> f64 {
    a.terminal()[0]
}

fn cur(z: &crate::path::CadlagPath) -> f64 {
    z.terminal()[0]
}

/// Controlled drift `u + v`, terminal cost `x²`.
pub fn linear(sigma: f64, horizon: f64, b: f64) -> Result<GameCoefficients> {
    let bounds = Bounds::new((2.0 * b).max(sigma.abs()).max(STATE_RADIUS.powi(2)), 2.0 * STATE_RADIUS).with_driver_lipschitz(0.0, 0.0);
    Ok(scalar("linear", horizon, bounds, b)?
        .with_drift(|_, u, v| DVector::from_element(1, cur(u) + cur(v)))
        .with_diffusion(move |_, _, _| DMatrix::from_element(1, 1, sigma))
        .with_terminal(|a| x(a).powi(2)))
}

/// Zero drift, running cost `u v`.
pub fn bilinear(sigma: f64, horizon: f64, b: f64) -> Result<GameCoefficients> {
    Ok(scalar(
        "bilinear",
        horizon,
        Bounds::new(b * b + sigma.abs(), 2.0 * b).with_driver_lipschitz(0.0, 0.0),
        b,
    )?
    .with_diffusion(move |_, _, _| DMatrix::from_element(1, 1, sigma))
    .with_driver(|_, _, _, u, v| cur(u) * cur(v)))
}

/// Player-separated Hamiltonian with bounded smooth coefficients.
pub fn separated_hamiltonian(horizon: f64, b: f64) -> Result<GameCoefficients> {
    Ok(scalar(
        "separated_hamiltonian",
        horizon,
        Bounds::new(1.0 + 1.5 * b * b, 1.0 + 2.0 * b).with_driver_lipschitz(0.2, 0.0),
        b,
    )?
    .with_drift(|_, u, v| DVector::from_element(1, cur(u) - 0.5 * cur(v)))
    .with_diffusion(|a, _, _| DMatrix::from_element(1, 1, 0.4 * (1.0 + 0.5 * x(a).sin())))
    .with_driver(|a, y, _, u, v| 0.5 * x(a).cos() + cur(u).powi(2) - 0.5 * cur(v).powi(2) - 0.2 * y)
    .with_terminal(|a| x(a).cos()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DelayParams {
    pub r: f64,
    pub f1: f64,
    pub f2: f64,
    pub l1: f64,
    pub l2: f64,
    pub sigma: f64,
}

/// Delay game: drift and running cost read the state and controls `r`
/// earlier. Before time 0 the initial values are held.
///
/// The declared Lipschitz constant covers the current-time dependence only:
/// a pointwise lag lookup is not Lipschitz in `d∞` (a control jump inside
/// the lag window moves the drift by `f2 b` at vanishing input distance).
pub fn delay(dp: DelayParams, horizon: f64, b: f64) -> Result<GameCoefficients> {
    let DelayParams { r, f1, f2, l1, l2, sigma } = dp;
    let lip = f1.abs() + f2.abs() + l1.abs() + 3.0 * l2.abs() * b;
    Ok(scalar(
        "delay",
        horizon,
        Bounds::new(lip + sigma.abs() + 1.0, lip.max(1.0)).with_driver_lipschitz(0.1 * l1.abs(), 0.0),
        b,
    )?
    .with_drift(move |a, u, v| {
        let t = a.t_end();
        let lag = |z: &crate::path::CadlagPath| z.eval(t - r)[0];
        DVector::from_element(1, f1 * a.eval(t - r)[0] + 0.5 * f2 * (cur(u) + lag(u) - cur(v) - lag(v)))
    })
    .with_diffusion(move |_, _, _| DMatrix::from_element(1, 1, sigma))
    .with_driver(move |a, y, _, u, v| {
        let t = u.t_end();
        let (ul, vl) = (u.eval(t - r)[0], v.eval(t - r)[0]);
        l1 * (x(a).cos() - 0.1 * y) + l2 * (cur(u).powi(2) - cur(v).powi(2) + 0.5 * ul * vl)
    })
    .with_terminal(|a| x(a).powi(2)))
}

/// Scalar linear-quadratic game
/// `dx = (a x + b1 u + b2 v) ds + sigma dB`, `l = q x² + r1 u² - r2 v²`,
/// `m = qt x²`, with Player 1 minimizing.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LqParams {
    pub a: f64,
    pub b1: f64,
    pub b2: f64,
    pub q: f64,
    pub r1: f64,
    pub r2: f64,
    pub qt: f64,
    pub sigma: f64,
    pub horizon: f64,
    pub control_bound: f64,
}

impl Default for LqParams {
    /// Stable drift and equal control weights.
    fn default() -> Self {
        Self {
            a: -0.3,
            b1: 1.0,
            b2: 1.0,
            q: 1.0,
            r1: 1.0,
            r2: 1.0,
            qt: 1.0,
            sigma: 0.5,
            horizon: 1.0,
            control_bound: 4.0,
        }
    }
}

impl LqParams {
    fn specs(&self) -> Vec<ParamSpec> {
        vec![
            p("a", self.a, "state feedback in the drift"),
            p("b1", self.b1, "Player 1 control gain"),
            p("b2", self.b2, "Player 2 control gain"),
            p("q", self.q, "running state cost"),
            p("r1", self.r1, "Player 1 control cost (> 0)"),
            p("r2", self.r2, "Player 2 control reward (> 0)"),
            p("qt", self.qt, "terminal state cost"),
            p("sigma", self.sigma, "diffusion coefficient"),
            p("horizon", self.horizon, "terminal time T"),
            p("control_bound", self.control_bound, "controls take values in [-b, b]"),
        ]
    }

    pub fn from_map(m: &BTreeMap<String, f64>) -> Result<Self> {
        let out = Self {
            a: m["a"],
            b1: m["b1"],
            b2: m["b2"],
            q: m["q"],
            r1: m["r1"],
            r2: m["r2"],
            qt: m["qt"],
            sigma: m["sigma"],
            horizon: m["horizon"],
            control_bound: m["control_bound"],
        };
        out.validate()?;
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        for (k, v) in [
            ("r1", self.r1),
            ("r2", self.r2),
            ("horizon", self.horizon),
            ("control_bound", self.control_bound),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("lq parameter {k:?} must be positive, got {v}")));
            }
        }
        Ok(())
    }

    /// `b1²/r1 - b2²/r2`.
    pub fn kappa(&self) -> f64 {
        self.b1 * self.b1 / self.r1 - self.b2 * self.b2 / self.r2
    }

    pub fn coefficients(&self) -> Result<GameCoefficients> {
        self.validate()?;
        let Self {
            a,
            b1,
            b2,
            q,
            r1,
            r2,
            qt,
            sigma,
            horizon,
            control_bound: b,
        } = *self;
        let rad = STATE_RADIUS;
        let drift_lip = a.abs() + b1.abs() + b2.abs();
        let cost_lip = (2.0 * rad * q.abs() + 2.0 * b * (r1 + r2)).max(2.0 * rad * qt.abs());
        let bound = (a.abs() * rad + (b1.abs() + b2.abs()) * b)
            .max(sigma.abs())
            .max(q.abs() * rad * rad + (r1 + r2) * b * b)
            .max(qt.abs() * rad * rad);
        let bounds = Bounds::new(bound, drift_lip.max(cost_lip)).with_driver_lipschitz(0.0, 0.0);
        Ok(scalar("lq", horizon, bounds, b)?
            .with_drift(move |x0, u, v| DVector::from_element(1, a * x(x0) + b1 * cur(u) + b2 * cur(v)))
            .with_diffusion(move |_, _, _| DMatrix::from_element(1, 1, sigma))
            .with_driver(move |x0, _, _, u, v| q * x(x0).powi(2) + r1 * cur(u).powi(2) - r2 * cur(v).powi(2))
            .with_terminal(move |x0| qt * x(x0).powi(2)))
    }

    /// Feedback saddle point `(u*, v*) = (-b1 π x / r1, b2 π x / r2)`.
    pub fn saddle_controls(&self, ric: &RiccatiSolution, t: f64, x: f64) -> (f64, f64) {
        let pi = ric.pi(t);
        (-self.b1 * pi * x / self.r1, self.b2 * pi * x / self.r2)
    }
}

/// `π' = -(2 a π + q - κ π²)`, `π(T) = qt`, and `ρ' = -σ² π`, `ρ(T) = 0`,
/// integrated backward by classical RK4 on a uniform grid; the value of the
/// game is `π(t) x² + ρ(t)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiccatiSolution {
    pub params: LqParams,
    pub times: Vec<f64>,
    pub pi: Vec<f64>,
    pub rho: Vec<f64>,
}

impl RiccatiSolution {
    pub const DEFAULT_STEPS: usize = 4000;

    pub fn solve(params: LqParams, steps: usize) -> Result<Self> {
        params.validate()?;
        if steps == 0 {
            return Err(Error::invalid("Riccati solve needs at least one step"));
        }
        let h = params.horizon / steps as f64;
        // state (π, ρ) in reversed time τ = T - t
        let rhs = |s: [f64; 2]| -> [f64; 2] {
            let pi = s[0];
            [
                2.0 * params.a * pi + params.q - params.kappa() * pi * pi,
                params.sigma * params.sigma * pi,
            ]
        };
        let mut s = [params.qt, 0.0];
        let mut pi = vec![0.0; steps + 1];
        let mut rho = vec![0.0; steps + 1];
        pi[steps] = s[0];
        rho[steps] = s[1];
        for k in (0..steps).rev() {
            let k1 = rhs(s);
            let k2 = rhs([s[0] + 0.5 * h * k1[0], s[1] + 0.5 * h * k1[1]]);
            let k3 = rhs([s[0] + 0.5 * h * k2[0], s[1] + 0.5 * h * k2[1]]);
            let k4 = rhs([s[0] + h * k3[0], s[1] + h * k3[1]]);
            for i in 0..2 {
                s[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
            }
            if !s[0].is_finite() || !s[1].is_finite() {
                return Err(Error::NonFinite {
                    context: "Riccati solve (finite escape time)",
                    step: k,
                    path: 0,
                });
            }
            pi[k] = s[0];
            rho[k] = s[1];
        }
        let times = (0..=steps)
            .map(|k| if k == steps { params.horizon } else { k as f64 * h })
            .collect();
        Ok(Self { params, times, pi, rho })
    }

    fn dpi(&self, pi: f64) -> f64 {
        let p = &self.params;
        -(2.0 * p.a * pi + p.q - p.kappa() * pi * pi)
    }

    fn drho(&self, pi: f64) -> f64 {
        -self.params.sigma * self.params.sigma * pi
    }

    /// Cubic Hermite interpolation with the ODE slopes at the nodes.
    fn hermite(&self, t: f64, ys: &[f64], slope: impl Fn(usize) -> f64) -> f64 {
        let t = t.clamp(0.0, self.params.horizon);
        let n = self.times.len() - 1;
        let h = self.params.horizon / n as f64;
        let k = ((t / h).floor() as usize).min(n - 1);
        let s = (t - self.times[k]) / h;
        let (h00, h10, h01, h11) = (
            (1.0 + 2.0 * s) * (1.0 - s) * (1.0 - s),
            s * (1.0 - s) * (1.0 - s),
            s * s * (3.0 - 2.0 * s),
            s * s * (s - 1.0),
        );
        h00 * ys[k] + h10 * h * slope(k) + h01 * ys[k + 1] + h11 * h * slope(k + 1)
    }

    pub fn pi(&self, t: f64) -> f64 {
        self.hermite(t, &self.pi, |k| self.dpi(self.pi[k]))
    }

    pub fn rho(&self, t: f64) -> f64 {
        self.hermite(t, &self.rho, |k| self.drho(self.pi[k]))
    }

    pub fn value(&self, t: f64, x: f64) -> f64 {
        self.pi(t) * x * x + self.rho(t)
    }

    /// `V(A_t) = π(t) a_t² + ρ(t) + offset (1 + T - t)` with exact
    /// derivatives from the ODEs. `offset = 0` is the classical solution;
    /// solving with shifted `q`, `qt` and a nonzero offset gives strict sub-
    /// and super-solutions.
    pub fn candidate(self, name: impl Into<String>, offset: f64) -> CandidateSolution {
        let me = Arc::new(self);
        let t_end = me.params.horizon;
        let f = {
            let me = me.clone();
            FnFunctional::of_state(move |a| {
                let t = a.t_end();
                me.value(t, x(a)) + offset * (1.0 + t_end - t)
            })
            .smooth(Smoothness::C12)
        };
        let d = move |at: &PathTriple| -> Result<FunctionalDerivatives> {
            let t = at.t();
            let xt = x(&at.a);
            let pi = me.pi(t);
            Ok(FunctionalDerivatives {
                value: pi * xt * xt + me.rho(t) + offset * (1.0 + t_end - t),
                dt: me.dpi(pi) * xt * xt + me.drho(pi) - offset,
                dx: vec![2.0 * pi * xt],
                dxx: DMatrix::from_element(1, 1, 2.0 * pi),
                report: StepReport {
                    dt_steps: Vec::new(),
                    h_steps: Vec::new(),
                    dt_residual: 0.0,
                    dx_residual: 0.0,
                    dxx_residual: 0.0,
                },
            })
        };
        CandidateSolution::analytic(name, Arc::new(f), Arc::new(d))
    }
}

/// Closed form for `κ = 0`, `σ = 0`: `π(t) = (qt + q/(2a)) e^{2a(T-t)} - q/(2a)`.
pub fn riccati_closed_form_kappa_zero(p: &LqParams, t: f64) -> f64 {
    let tau = p.horizon - t;
    if p.a == 0.0 {
        p.qt + p.q * tau
    } else {
        (p.qt + p.q / (2.0 * p.a)) * (2.0 * p.a * tau).exp() - p.q / (2.0 * p.a)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::game::{GameGrids, Side};
    use crate::hji::{phji_residual, Minimax};
    use crate::path::{CadlagPath, Path};

    #[test]
    fn catalog_contains_required_instances() {
        let names: Vec<String> = catalog().into_iter().map(|e| e.name).collect();
        for n in ["lq", "delay", "separated_hamiltonian", "linear", "bilinear"] {
            assert!(names.iter().any(|m| m == n), "{n}");
            build(n, &BTreeMap::new()).unwrap();
        }
    }

    #[test]
    fn unknown_names_and_params_rejected() {
        assert!(build("nope", &BTreeMap::new()).is_err());
        let mut m = BTreeMap::new();
        m.insert("typo".to_string(), 1.0);
        assert!(build("lq", &m).is_err());
        let mut m = BTreeMap::new();
        m.insert("r1".to_string(), 0.0);
        assert!(build("lq", &m).is_err());
    }

    #[test]
    fn riccati_matches_closed_form_without_quadratic_term() {
        let p = LqParams {
            a: -0.7,
            b1: 1.0,
            b2: 1.0,
            r1: 2.0,
            r2: 2.0,
            q: 0.8,
            qt: 1.5,
            sigma: 0.0,
            ..LqParams::default()
        };
        let ric = RiccatiSolution::solve(p, 200).unwrap();
        for t in [0.0, 0.123, 0.5, 0.999, 1.0] {
            let exact = riccati_closed_form_kappa_zero(&p, t);
            assert!((ric.pi(t) - exact).abs() < 1e-10, "{t}: {} vs {exact}", ric.pi(t));
            assert!(ric.rho(t).abs() < 1e-15);
        }
    }

    #[test]
    fn riccati_scalar_logistic_case() {
        // a = 0, q = 0: π' = κ π², so π(t) = qt / (1 + κ qt (T - t))
        let p = LqParams {
            a: 0.0,
            q: 0.0,
            b2: 0.5,
            sigma: 0.3,
            ..LqParams::default()
        };
        let ric = RiccatiSolution::solve(p, 400).unwrap();
        let k = p.kappa();
        for t in [0.0, 0.3, 0.77] {
            let exact = p.qt / (1.0 + k * p.qt * (p.horizon - t));
            assert!((ric.pi(t) - exact).abs() < 1e-11);
            // ρ(t) = σ² ∫_t^T π = σ² ln(1 + κ qt (T - t)) / κ
            let rho = p.sigma * p.sigma * (1.0 + k * p.qt * (p.horizon - t)).ln() / k;
            assert!((ric.rho(t) - rho).abs() < 1e-11);
        }
    }

    #[test]
    fn default_lq_value() {
        let ric = RiccatiSolution::solve(LqParams::default(), RiccatiSolution::DEFAULT_STEPS).unwrap();
        // coarse independent integration of the same ODE by explicit Euler with tiny steps
        let p = LqParams::default();
        let n = 200_000;
        let h = 1.0 / n as f64;
        let (mut pi, mut rho) = (p.qt, 0.0);
        for _ in 0..n {
            rho += h * p.sigma * p.sigma * pi;
            pi += h * (2.0 * p.a * pi + p.q - p.kappa() * pi * pi);
        }
        assert!((ric.value(0.0, 1.0) - (pi + rho)).abs() < 1e-4);
    }

    fn at(t: f64, xs: &[f64], grid: &[f64]) -> PathTriple {
        PathTriple::new(
            Path::scalar(grid.to_vec(), xs.to_vec(), 1.0).unwrap(),
            CadlagPath::constant(&[0.0], 0.0, t, 1.0).unwrap(),
            CadlagPath::constant(&[0.0], 0.0, t, 1.0).unwrap(),
        )
    }

    #[test]
    fn riccati_candidate_solves_lq_equation() {
        let p = LqParams::default();
        let c = p.coefficients().unwrap();
        let cand = RiccatiSolution::solve(p, RiccatiSolution::DEFAULT_STEPS)
            .unwrap()
            .candidate("v", 0.0);
        let grids = GameGrids::from_sets(&c, 41);
        let mm = Minimax::grid(grids).refined(21);
        for (t, xv) in [(0.2, 0.7), (0.55, -1.1), (0.9, 0.3)] {
            let a = at(t, &[0.1, xv], &[0.0, t]);
            for side in [Side::Lower, Side::Upper] {
                let r = phji_residual(&c, &cand, &a, side, &mm).unwrap();
                assert!(r.residual.abs() < 1e-4, "{t} {xv} {:?} {}", side, r.residual);
            }
            // numerical derivatives agree with the analytic supplier
            let num = crate::calculus::derivatives(cand.functional.as_ref(), &a, &Default::default()).unwrap();
            let ana = cand.derivatives_at(&a).unwrap();
            assert!((num.dt - ana.dt).abs() < 1e-5 && (num.dx[0] - ana.dx[0]).abs() < 1e-6);
        }
    }

    #[test]
    fn delay_instance_reads_lagged_controls() {
        let c = build("delay", &BTreeMap::new()).unwrap();
        let a = Path::scalar(vec![0.0, 0.5], vec![0.0, 1.0], 1.0).unwrap();
        let u = CadlagPath::from_points(vec![0.0, 0.2, 0.4], &[vec![1.0], vec![-1.0], vec![0.5]], 0.5, 1.0).unwrap();
        let v = CadlagPath::constant(&[0.0], 0.0, 0.5, 1.0).unwrap();
        // f1 a(0.25) + f2 (u(0.5) + u(0.25)) / 2 with a(0.25) = 0.5, u(0.25) = -1
        let f = c.drift_at(&a, &u, &v).unwrap()[0];
        assert!((f - (-0.5 * 0.5 + 0.5 * (0.5 - 1.0))).abs() < 1e-15);
    }
}
