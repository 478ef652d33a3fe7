use rand::Rng;
use serde::{Deserialize, Serialize};

use super::dist;
use crate::error::{Error, Result};

const MEMBERSHIP_TOL: f64 = 1e-12;

/// Compact control set: either an explicit finite set of points or an
/// axis-aligned box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ControlSet {
    Grid { points: Vec<Vec<f64>> },
    Box { lo: Vec<f64>, hi: Vec<f64> },
}

impl ControlSet {
    pub fn grid(points: Vec<Vec<f64>>) -> Result<Self> {
        let dim = points.first().map(Vec::len).unwrap_or(0);
        if dim == 0 || points.iter().any(|p| p.len() != dim) {
            return Err(Error::invalid("control grid must be nonempty with one common dimension"));
        }
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::invalid("control grid points must be finite"));
        }
        Ok(Self::Grid { points })
    }

    /// Scalar finite control set.
    pub fn scalar_grid(values: &[f64]) -> Result<Self> {
        Self::grid(values.iter().map(|&v| vec![v]).collect())
    }

    pub fn bounds(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        if lo.is_empty() || lo.len() != hi.len() {
            return Err(Error::invalid("box bounds must be nonempty and of equal length"));
        }
        if lo.iter().zip(&hi).any(|(a, b)| !(a.is_finite() && b.is_finite() && a <= b)) {
            return Err(Error::invalid("box bounds must be finite with lo <= hi"));
        }
        Ok(Self::Box { lo, hi })
    }

    /// Scalar interval `[lo, hi]`.
    ///
    /// # Panics
    /// Panics on non-finite or reversed bounds.
    pub fn interval(lo: f64, hi: f64) -> Self {
        Self::bounds(vec![lo], vec![hi]).expect("valid interval")
    }

    pub fn dim(&self) -> usize {
        match self {
            Self::Grid { points } => points[0].len(),
            Self::Box { lo, .. } => lo.len(),
        }
    }

    pub fn contains(&self, u: &[f64]) -> bool {
        if u.len() != self.dim() {
            return false;
        }
        match self {
            Self::Grid { points } => points.iter().any(|p| dist(p, u) <= MEMBERSHIP_TOL),
            Self::Box { lo, hi } => u
                .iter()
                .zip(lo.iter().zip(hi))
                .all(|(x, (a, b))| *x >= a - MEMBERSHIP_TOL && *x <= b + MEMBERSHIP_TOL),
        }
    }

    pub fn check(&self, u: &[f64]) -> Result<()> {
        if u.len() != self.dim() {
            return Err(Error::dims("control value", self.dim(), u.len()));
        }
        if self.contains(u) {
            Ok(())
        } else {
            Err(Error::OutsideControlSet { value: u.to_vec() })
        }
    }

    /// Finite points used for enumeration: the grid itself, or a tensor grid
    /// with `per_axis` equally spaced points per box axis (lexicographic order).
    pub fn points(&self, per_axis: usize) -> Vec<Vec<f64>> {
        match self {
            Self::Grid { points } => points.clone(),
            Self::Box { lo, hi } => {
                let axes: Vec<Vec<f64>> = lo.iter().zip(hi).map(|(&a, &b)| linspace(a, b, per_axis)).collect();
                let mut out = vec![Vec::new()];
                for axis in &axes {
                    out = out
                        .into_iter()
                        .flat_map(|prefix| {
                            axis.iter().map(move |&x| {
                                let mut p = prefix.clone();
                                p.push(x);
                                p
                            })
                        })
                        .collect();
                }
                out
            }
        }
    }

    /// Nearest member of the set (first in order on ties).
    pub fn project(&self, u: &[f64]) -> Vec<f64> {
        match self {
            Self::Grid { points } => {
                let mut best = &points[0];
                let mut bd = f64::INFINITY;
                for p in points {
                    let d = dist(p, u);
                    if d < bd {
                        bd = d;
                        best = p;
                    }
                }
                best.clone()
            }
            Self::Box { lo, hi } => u.iter().zip(lo.iter().zip(hi)).map(|(x, (a, b))| x.clamp(*a, *b)).collect(),
        }
    }

    pub fn sample(&self, rng: &mut impl Rng) -> Vec<f64> {
        match self {
            Self::Grid { points } => points[rng.random_range(0..points.len())].clone(),
            Self::Box { lo, hi } => lo
                .iter()
                .zip(hi)
                .map(|(&a, &b)| if b > a { rng.random_range(a..=b) } else { a })
                .collect(),
        }
    }
}

fn linspace(a: f64, b: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![0.5 * (a + b)],
        _ => (0..n)
            .map(|k| if k == n - 1 { b } else { a + (b - a) * k as f64 / (n - 1) as f64 })
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;

    #[test]
    fn box_points_are_lexicographic() {
        let set = ControlSet::bounds(vec![-1.0, 0.0], vec![1.0, 1.0]).unwrap();
        let pts = set.points(3);
        assert_eq!(pts.len(), 9);
        assert_eq!(pts[0], vec![-1.0, 0.0]);
        assert_eq!(pts[1], vec![-1.0, 0.5]);
        assert_eq!(pts[8], vec![1.0, 1.0]);
        assert!(pts.iter().all(|p| set.contains(p)));
    }

    #[test]
    fn grid_membership_and_projection() {
        let set = ControlSet::scalar_grid(&[-1.0, 0.0, 1.0]).unwrap();
        assert!(set.contains(&[0.0]));
        assert!(!set.contains(&[0.5]));
        assert_eq!(set.project(&[0.4]), vec![0.0]);
        assert_eq!(set.project(&[0.5]), vec![0.0]);
        assert!(matches!(set.check(&[2.0]), Err(Error::OutsideControlSet { .. })));
        assert!(matches!(set.check(&[0.0, 1.0]), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn samples_stay_inside() {
        let set = ControlSet::bounds(vec![-2.0, 3.0], vec![-1.0, 3.0]).unwrap();
        let mut rng = stream_rng(1, 0);
        for _ in 0..100 {
            assert!(set.contains(&set.sample(&mut rng)));
        }
    }

    #[test]
    fn rejects_degenerate_sets() {
        assert!(ControlSet::grid(vec![]).is_err());
        assert!(ControlSet::bounds(vec![1.0], vec![0.0]).is_err());
        assert!(ControlSet::bounds(vec![0.0], vec![f64::INFINITY]).is_err());
    }
}
