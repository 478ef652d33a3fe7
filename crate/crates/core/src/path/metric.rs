//! Path metrics: the flat-extension metric `d_infty` and a grid upper bound
//! for the Skorohod distance between càdlàg paths.

use super::{dist, time_eps, CadlagPath, TimePath};
use crate::error::{Error, Result};

/// Maximum number of skipped knots per alignment step in [`skorohod_d`].
const ALIGN_WINDOW: usize = 4;

fn union_grid<P: TimePath + ?Sized, Q: TimePath + ?Sized>(p: &P, q: &Q) -> Vec<f64> {
    let mut g: Vec<f64> = p.grid().iter().chain(q.grid()).copied().collect();
    g.push(p.t_end());
    g.push(q.t_end());
    g.sort_by(f64::total_cmp);
    g.dedup();
    g
}

/// Sup-distance between the flat extensions of `p` and `q` to the later end time.
///
/// Evaluated on the union of both grids, which is exact for piecewise-linear
/// and piecewise-constant paths alike.
pub fn sup_distance<P: TimePath + ?Sized, Q: TimePath + ?Sized>(p: &P, q: &Q) -> Result<f64> {
    if p.dim() != q.dim() {
        return Err(Error::dims("path distance", p.dim(), q.dim()));
    }
    let mut a = vec![0.0; p.dim()];
    let mut b = vec![0.0; q.dim()];
    let mut sup = 0.0f64;
    for s in union_grid(p, q) {
        p.eval_into(s, &mut a);
        q.eval_into(s, &mut b);
        sup = sup.max(dist(&a, &b));
    }
    Ok(sup)
}

/// `|t - t'| + ||A_{t,t'-t} - B_{t'}||_inf`.
pub fn d_infty<P: TimePath + ?Sized, Q: TimePath + ?Sized>(p: &P, q: &Q) -> Result<f64> {
    Ok((p.t_end() - q.t_end()).abs() + sup_distance(p, q)?)
}

/// Interior knots of a piecewise-constant path: the times where it jumps.
fn knots(p: &CadlagPath, start: f64, end: f64, eps: f64) -> Vec<f64> {
    let mut out = vec![start];
    for i in p.jump_indices().into_iter().skip(1) {
        let t = p.grid()[i];
        if t > start + eps && t < end - eps {
            out.push(t);
        }
    }
    out.push(end);
    out
}

/// Sup over `[a0, a1)` of `|p(r) - q(iota(r))|` where `iota` maps `[a0, a1]`
/// linearly onto `[b0, b1]`.
#[allow(clippy::too_many_arguments)]
fn segment_cost(
    p: &CadlagPath,
    q: &CadlagPath,
    pk: &[f64],
    qk: &[f64],
    (i0, i1): (usize, usize),
    (j0, j1): (usize, usize),
    x: &mut [f64],
    y: &mut [f64],
) -> f64 {
    let (a0, a1, b0, b1) = (pk[i0], pk[i1], qk[j0], qk[j1]);
    let scale = (a1 - a0) / (b1 - b0);
    let mut cuts: Vec<f64> = Vec::with_capacity(i1 - i0 + j1 - j0 + 2);
    cuts.push(a0);
    cuts.extend_from_slice(&pk[i0 + 1..i1]);
    cuts.extend(qk[j0 + 1..j1].iter().map(|&b| a0 + (b - b0) * scale));
    cuts.push(a1);
    cuts.sort_by(f64::total_cmp);
    let mut sup = 0.0f64;
    for w in cuts.windows(2) {
        if w[1] <= w[0] {
            continue;
        }
        // both paths are constant on each cell; midpoints avoid roundoff at the jumps
        let r = 0.5 * (w[0] + w[1]);
        let s = b0 + (r - a0) / scale;
        p.eval_into(r, x);
        q.eval_into(s, y);
        sup = sup.max(dist(x, y));
    }
    sup
}

/// Upper bound on the Skorohod distance `d°` between two càdlàg paths.
///
/// The shorter path is flat-extended to the common end time. The infimum over
/// time changes is restricted to piecewise-linear deformations that map jump
/// times of `p` onto jump times of `q` monotonically, solved by dynamic
/// programming over knot pairs; the identity deformation is always included,
/// so the result never exceeds [`sup_distance`].
pub fn skorohod_d(p: &CadlagPath, q: &CadlagPath) -> Result<f64> {
    let identity = sup_distance(p, q)?;
    let start = p.start().min(q.start());
    let end = p.t_end().max(q.t_end());
    let eps = time_eps(end);
    if end - start <= eps {
        return Ok(identity);
    }
    let pk = knots(p, start, end, eps);
    let qk = knots(q, start, end, eps);
    let (np, nq) = (pk.len(), qk.len());
    let mut x = vec![0.0; p.dim()];
    let mut y = vec![0.0; q.dim()];

    // best[i][j]: smallest cost of a deformation of [start, pk[i]] onto [start, qk[j]]
    let mut best = vec![f64::INFINITY; np * nq];
    best[0] = 0.0;
    for i in 1..np {
        for j in 1..nq {
            let last = i == np - 1 && j == nq - 1;
            if (i == np - 1) != (j == nq - 1) {
                continue;
            }
            let shift = (pk[i] - qk[j]).abs();
            if shift >= identity {
                continue;
            }
            let mut cell = f64::INFINITY;
            let lo_i = if last { 0 } else { i.saturating_sub(ALIGN_WINDOW) };
            let lo_j = if last { 0 } else { j.saturating_sub(ALIGN_WINDOW) };
            for i0 in lo_i..i {
                for j0 in lo_j..j {
                    let prev = best[i0 * nq + j0];
                    if prev >= cell {
                        continue;
                    }
                    let seg = segment_cost(p, q, &pk, &qk, (i0, i), (j0, j), &mut x, &mut y);
                    cell = cell.min(prev.max(seg));
                }
            }
            best[i * nq + j] = cell.max(shift);
        }
    }
    p.eval_into(end, &mut x);
    q.eval_into(end, &mut y);
    let aligned = best[np * nq - 1].max(dist(&x, &y));
    Ok(aligned.min(identity))
}

#[cfg(test)]
mod tests {
    use super::super::Path;
    use super::*;

    fn step(at: f64) -> CadlagPath {
        CadlagPath::new(vec![0.0, at], vec![0.0, 1.0], 1, 1.0, 1.0).unwrap()
    }

    #[test]
    fn d_infty_examples() {
        let p = Path::scalar(vec![0.0, 0.4, 1.0], vec![0.0, 1.0, -1.0], 2.0).unwrap();
        assert_eq!(d_infty(&p, &p).unwrap(), 0.0);

        let zero = Path::constant(&[0.0], 1.0, 2.0).unwrap();
        let one = Path::constant(&[1.0], 1.0, 2.0).unwrap();
        assert_eq!(d_infty(&zero, &one).unwrap(), 1.0);

        let long = Path::constant(&[0.0], 2.0, 2.0).unwrap();
        assert_eq!(d_infty(&zero, &long).unwrap(), 1.0);
        assert_eq!(d_infty(&long, &zero).unwrap(), 1.0);
    }

    #[test]
    fn d_infty_uses_flat_extension() {
        // p ends at 1 with value 2; q keeps rising to 3 on [1, 2]
        let p = Path::scalar(vec![0.0, 1.0], vec![0.0, 2.0], 2.0).unwrap();
        let q = Path::scalar(vec![0.0, 1.0, 2.0], vec![0.0, 2.0, 3.0], 2.0).unwrap();
        assert_eq!(d_infty(&p, &q).unwrap(), 2.0);
    }

    #[test]
    fn d_infty_dimension_mismatch() {
        let p = Path::constant(&[0.0], 1.0, 1.0).unwrap();
        let q = Path::constant(&[0.0, 0.0], 1.0, 1.0).unwrap();
        assert!(matches!(d_infty(&p, &q), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn skorohod_steps() {
        let (a, b) = (step(0.50), step(0.51));
        assert_eq!(skorohod_d(&a, &a).unwrap(), 0.0);
        let d = skorohod_d(&a, &b).unwrap();
        assert!(d <= 0.01 + 1e-12, "d = {d}");
        assert!(d > 0.0);
        // equal end times, so only the sup term contributes
        assert_eq!(d_infty(&a, &b).unwrap(), 1.0);
        assert!(d < d_infty(&a, &b).unwrap());
    }

    #[test]
    fn skorohod_constants() {
        let c = CadlagPath::constant(&[2.5, -1.0], 0.0, 1.0, 1.0).unwrap();
        assert_eq!(skorohod_d(&c, &c.clone()).unwrap(), 0.0);
    }

    #[test]
    fn skorohod_matches_multiple_jumps() {
        let p = CadlagPath::new(vec![0.0, 0.2, 0.6], vec![0.0, 1.0, 3.0], 1, 1.0, 1.0).unwrap();
        let q = CadlagPath::new(vec![0.0, 0.25, 0.58], vec![0.0, 1.0, 3.0], 1, 1.0, 1.0).unwrap();
        let d = skorohod_d(&p, &q).unwrap();
        assert!((d - 0.05).abs() < 1e-12, "d = {d}");
    }

    #[test]
    fn skorohod_cannot_fix_different_levels() {
        let p = CadlagPath::new(vec![0.0, 0.5], vec![0.0, 1.0], 1, 1.0, 1.0).unwrap();
        let q = CadlagPath::new(vec![0.0, 0.5], vec![0.0, 1.5], 1, 1.0, 1.0).unwrap();
        assert!((skorohod_d(&p, &q).unwrap() - 0.5).abs() < 1e-15);
    }
}
