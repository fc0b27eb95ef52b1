//! Euclidean projection onto `{u | Gu ≤ g}` by a primal active-set method.

use nalgebra::{DMatrix, DVector};

use crate::error::{dim_err, Error, Result};
use crate::geometry::Polytope;
use crate::lp::{solve_lp, LpProblem, LpStatus};

#[derive(Clone, Debug)]
pub struct Projection {
    pub u: DVector<f64>,
    /// Rows in the final working set, ascending.
    pub active: Vec<usize>,
    /// One multiplier per row of `G` (zero off the active set).
    pub multipliers: DVector<f64>,
    pub kkt_residual: f64,
}

/// Constraint data of `Ω(x) = {u | F_X(Ax + Bu) ≤ h_X, C_u u ≤ d_u}`.
pub fn projection_constraints(
    x: &DVector<f64>,
    roi: &Polytope,
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    input_set: &Polytope,
) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let m = b.ncols();
    if input_set.dim() != m || roi.dim() != a.nrows() || x.len() != a.ncols() {
        return Err(dim_err("projection data dimensions disagree"));
    }
    let fb = roi.f() * b;
    let rx = roi.h() - roi.f() * (a * x);
    let k = roi.num_rows();
    let l = input_set.num_rows();
    let mut g = DMatrix::zeros(k + l, m);
    g.rows_mut(0, k).copy_from(&fb);
    g.rows_mut(k, l).copy_from(input_set.f());
    let mut rhs = DVector::zeros(k + l);
    rhs.rows_mut(0, k).copy_from(&rx);
    rhs.rows_mut(k, l).copy_from(input_set.h());
    Ok((g, rhs))
}

pub fn solve_projection_qp(
    x: &DVector<f64>,
    net_output: &DVector<f64>,
    roi: &Polytope,
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    input_set: &Polytope,
) -> Result<DVector<f64>> {
    let (g, rhs) = projection_constraints(x, roi, a, b, input_set)?;
    Ok(project_onto(net_output, &g, &rhs)?.u)
}

/// `argmin ½‖u − target‖² s.t. Gu ≤ g`.
pub fn project_onto(target: &DVector<f64>, g: &DMatrix<f64>, rhs: &DVector<f64>) -> Result<Projection> {
    let m = target.len();
    let k = g.nrows();
    if g.ncols() != m || rhs.len() != k {
        return Err(dim_err("projection constraint shape"));
    }
    // normalize rows; zero rows are either vacuous or make the set empty
    let mut rows = Vec::new();
    let mut norms = vec![0.0; k];
    for i in 0..k {
        let nrm = g.row(i).norm();
        norms[i] = nrm;
        if nrm < 1e-14 {
            if rhs[i] < -1e-9 {
                return Err(Error::EmptyProjectionSet);
            }
            continue;
        }
        rows.push(i);
    }
    let gn = DMatrix::from_fn(rows.len(), m, |r, j| g[(rows[r], j)] / norms[rows[r]]);
    let hn = DVector::from_fn(rows.len(), |r, _| rhs[rows[r]] / norms[rows[r]]);
    let nr = rows.len();

    let feasible = |u: &DVector<f64>| (&gn * u - &hn).iter().all(|v| *v <= 1e-12);
    let mut u = target.clone();
    let mut work: Vec<usize> = Vec::new();
    if !feasible(&u) {
        let sol = solve_lp(&LpProblem {
            objective: DVector::zeros(m),
            constraints: Polytope::new(gn.clone(), hn.clone())?,
            equalities: None,
        })?;
        if sol.status != LpStatus::Optimal {
            return Err(Error::EmptyProjectionSet);
        }
        u = sol.x;
        let slack = &hn - &gn * &u;
        for i in 0..nr {
            if slack[i].abs() <= 1e-10 && independent_of(&gn, &work, i) {
                work.push(i);
            }
        }
    }

    let mut lambda_w = DVector::zeros(0);
    let cap = 100 + 10 * nr;
    let mut converged = false;
    for _ in 0..cap {
        let gw = DMatrix::from_fn(work.len(), m, |r, j| gn[(work[r], j)]);
        let d = &u - target;
        let (p, lam) = if work.is_empty() {
            (-d.clone(), DVector::zeros(0))
        } else {
            let gram = &gw * gw.transpose();
            let inv = gram
                .clone()
                .try_inverse()
                .ok_or_else(|| Error::NumericalFailure("dependent working set in projection".into()))?;
            let lam = -(&inv * (&gw * &d));
            let p = -(&d + gw.transpose() * &lam);
            (p, lam)
        };
        if p.norm() <= 1e-13 * (1.0 + u.norm() + target.norm()) {
            let (imin, lmin) = lam
                .iter()
                .enumerate()
                .fold((usize::MAX, 0.0), |(bi, bv), (i, &v)| if v < bv { (i, v) } else { (bi, bv) });
            if lmin >= -1e-12 {
                lambda_w = lam;
                converged = true;
                break;
            }
            work.remove(imin);
            continue;
        }
        let mut alpha = 1.0;
        let mut blocking = None;
        for i in 0..nr {
            if work.contains(&i) {
                continue;
            }
            let gp = gn.row(i).dot(&p.transpose());
            if gp > 1e-14 {
                let step = ((hn[i] - gn.row(i).dot(&u.transpose())) / gp).max(0.0);
                if step < alpha {
                    alpha = step;
                    blocking = Some(i);
                }
            }
        }
        u += &p * alpha;
        if let Some(i) = blocking {
            work.push(i);
        }
    }
    if !converged {
        return Err(Error::NumericalFailure("projection active-set iteration did not converge".into()));
    }

    let mut multipliers = DVector::zeros(k);
    let mut active = Vec::new();
    for (r, &w) in work.iter().enumerate() {
        let orig = rows[w];
        multipliers[orig] = lambda_w[r] / norms[orig];
        active.push(orig);
    }
    active.sort_unstable();
    let kkt_residual = kkt_residual(target, g, rhs, &u, &multipliers);
    Ok(Projection {
        u,
        active,
        multipliers,
        kkt_residual,
    })
}

fn independent_of(g: &DMatrix<f64>, work: &[usize], i: usize) -> bool {
    if work.len() >= g.ncols() {
        return false;
    }
    let mut idx = work.to_vec();
    idx.push(i);
    let sub = DMatrix::from_fn(idx.len(), g.ncols(), |r, j| g[(idx[r], j)]);
    let sv = sub.singular_values();
    sv.iter().all(|s| *s > 1e-9)
}

pub fn kkt_residual(
    target: &DVector<f64>,
    g: &DMatrix<f64>,
    rhs: &DVector<f64>,
    u: &DVector<f64>,
    lam: &DVector<f64>,
) -> f64 {
    let stat = (u - target + g.transpose() * lam).amax();
    let slack = rhs - g * u;
    let primal = slack.iter().fold(0.0f64, |m, s| m.max(-s));
    let dual = lam.iter().fold(0.0f64, |m, l| m.max(-l));
    let comp = slack.iter().zip(lam.iter()).fold(0.0f64, |m, (s, l)| m.max((s * l).abs()));
    stat.max(primal).max(dual).max(comp)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(x: &[f64]) -> DVector<f64> {
        DVector::from_vec(x.to_vec())
    }

    #[test]
    fn interior_target_is_fixed() {
        let g = DMatrix::from_row_slice(2, 1, &[1.0, -1.0]);
        let p = project_onto(&v(&[0.3]), &g, &v(&[1.0, 1.0])).unwrap();
        assert_eq!(p.u, v(&[0.3]));
        assert!(p.active.is_empty());
    }

    #[test]
    fn clamps_to_interval() {
        let g = DMatrix::from_row_slice(2, 1, &[1.0, -1.0]);
        let p = project_onto(&v(&[2.0]), &g, &v(&[1.0, 1.0])).unwrap();
        assert!((p.u[0] - 1.0).abs() < 1e-14);
        assert_eq!(p.active, vec![0]);
        assert!((p.multipliers[0] - 1.0).abs() < 1e-12);
        assert!(p.kkt_residual <= 1e-8);
    }

    #[test]
    fn corner_of_triangle() {
        // project (2, 2) onto {u >= 0, u1 + u2 <= 1, u1 - u2 <= 0.5}
        let g = DMatrix::from_row_slice(4, 2, &[-1.0, 0.0, 0.0, -1.0, 1.0, 1.0, 1.0, -1.0]);
        let h = v(&[0.0, 0.0, 1.0, 0.5]);
        let p = project_onto(&v(&[2.0, 2.0]), &g, &h).unwrap();
        assert!((p.u - v(&[0.5, 0.5])).norm() < 1e-12);
        let p = project_onto(&v(&[3.0, -1.0]), &g, &h).unwrap();
        assert!((&p.u - v(&[0.75, 0.25])).norm() < 1e-12, "{}", p.u);
        assert!(p.kkt_residual <= 1e-8);
    }

    #[test]
    fn empty_set_is_reported() {
        let g = DMatrix::from_row_slice(2, 1, &[1.0, -1.0]);
        assert!(matches!(
            project_onto(&v(&[0.0]), &g, &v(&[-1.0, -1.0])),
            Err(Error::EmptyProjectionSet)
        ));
    }
}
