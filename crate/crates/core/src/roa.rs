//! Sublevel-set estimates of the region of attraction and invariant sets.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::dynamics::ClosedLoop;
use crate::error::{dim_err, Error, Result};
use crate::geometry::Polytope;
use crate::learner::{CandidateKind, CandidateParam};
use crate::lp::TAU_LP;
use crate::qp_exact::{extremize, QuadraticForm, Sense};
use crate::verifier::{Objective, Verifier, VerifyOptions};

/// `{x | V(x) ≤ α}` for a certified candidate.
#[derive(Clone, Debug)]
pub enum RoaEstimate {
    Ellipse { p: DMatrix<f64>, alpha: f64 },
    /// `V(x) = (x, f_cl(x))ᵀ P (x, f_cl(x))`.
    PwqContour { p: DMatrix<f64>, alpha: f64 },
}

impl RoaEstimate {
    pub fn new(cand: &CandidateParam, alpha: f64) -> Self {
        match cand.kind {
            CandidateKind::Quadratic => RoaEstimate::Ellipse {
                p: cand.p.clone(),
                alpha,
            },
            CandidateKind::Pwq => RoaEstimate::PwqContour {
                p: cand.p.clone(),
                alpha,
            },
        }
    }

    pub fn alpha(&self) -> f64 {
        match self {
            RoaEstimate::Ellipse { alpha, .. } | RoaEstimate::PwqContour { alpha, .. } => *alpha,
        }
    }

    pub fn value(&self, cl: &ClosedLoop, x: &DVector<f64>) -> Result<f64> {
        candidate_value(
            &CandidateParam {
                p: match self {
                    RoaEstimate::Ellipse { p, .. } | RoaEstimate::PwqContour { p, .. } => p.clone(),
                },
                kind: match self {
                    RoaEstimate::Ellipse { .. } => CandidateKind::Quadratic,
                    RoaEstimate::PwqContour { .. } => CandidateKind::Pwq,
                },
            },
            cl,
            x,
        )
    }

    pub fn contains(&self, cl: &ClosedLoop, x: &DVector<f64>) -> Result<bool> {
        Ok(self.value(cl, x)? <= self.alpha())
    }
}

pub fn candidate_value(cand: &CandidateParam, cl: &ClosedLoop, x: &DVector<f64>) -> Result<f64> {
    match cand.kind {
        CandidateKind::Quadratic => {
            if cand.p.nrows() != x.len() {
                return Err(dim_err("P does not match the state"));
            }
            Ok((&cand.p * x).dot(x))
        }
        CandidateKind::Pwq => {
            Objective::PwqValue(cand.p.clone()).evaluate(cl, x)
        }
    }
}

/// Minimum of `V` over the boundary of `roi`: the largest `α` with `{V ≤ α}` inside `roi`.
pub fn sublevel_alpha(cand: &CandidateParam, cl: &ClosedLoop, roi: &Polytope) -> Result<f64> {
    let n = roi.dim();
    let mut alpha = f64::INFINITY;
    for (_, facet) in roi.facets()? {
        let v = match cand.kind {
            CandidateKind::Quadratic => {
                let q = QuadraticForm::new(cand.p.clone(), DVector::zeros(n), 0.0)?;
                extremize(&q, &facet, Sense::Min)?.1
            }
            CandidateKind::Pwq => {
                let ver = Verifier::new(cl, &facet, None, 1, false)?;
                ver.optimize(&Objective::PwqValue(cand.p.clone()), Sense::Min, &VerifyOptions::default())?
                    .p_star
            }
        };
        alpha = alpha.min(v);
    }
    if !alpha.is_finite() {
        return Err(Error::InvalidInput("region of interest has no facets".into()));
    }
    Ok(alpha)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct InvarianceCheck {
    pub invariant: bool,
    /// `max_k max_{x ∈ X} F_k f_cl(x) − h_k`.
    pub worst_margin: f64,
    pub worst_row: usize,
}

/// Exact check of `f_cl(X) ⊆ X`, one verifier call per row of `X`.
pub fn is_positive_invariant(cl: &ClosedLoop, x: &Polytope) -> Result<InvarianceCheck> {
    x.bounding_box()?;
    let ver = Verifier::new(cl, x, None, 1, false)?;
    let mut worst = f64::NEG_INFINITY;
    let mut worst_row = 0;
    for k in 0..x.num_rows() {
        let c = x.f().row(k).transpose();
        let r = ver.maximize(&Objective::Linear(c, x.h()[k]), &VerifyOptions::default())?;
        if r.p_star > worst {
            worst = r.p_star;
            worst_row = k;
        }
    }
    Ok(InvarianceCheck {
        invariant: worst <= TAU_LP,
        worst_margin: worst,
        worst_row,
    })
}

/// `{x | ∃u ∈ U: Ax + Bu ∈ S}`.
pub fn pre_set(a: &DMatrix<f64>, b: &DMatrix<f64>, s: &Polytope, u: &Polytope) -> Result<Polytope> {
    let n = a.nrows();
    let m = b.ncols();
    if a.ncols() != n || b.nrows() != n || s.dim() != n || u.dim() != m {
        return Err(dim_err("pre-set data dimensions disagree"));
    }
    let ks = s.num_rows();
    let ku = u.num_rows();
    let mut f = DMatrix::zeros(ks + ku, n + m);
    f.view_mut((0, 0), (ks, n)).copy_from(&(s.f() * a));
    f.view_mut((0, n), (ks, m)).copy_from(&(s.f() * b));
    f.view_mut((ks, n), (ku, m)).copy_from(u.f());
    let mut h = DVector::zeros(ks + ku);
    h.rows_mut(0, ks).copy_from(s.h());
    h.rows_mut(ks, ku).copy_from(u.h());
    let mut lifted = Polytope::new(f, h)?;
    for k in (n..n + m).rev() {
        lifted = lifted.fourier_motzkin_project(k)?;
    }
    Ok(lifted)
}

/// `inner ⊆ outer` up to `tol`, by one LP per row of `outer`.
pub fn contains_polytope(outer: &Polytope, inner: &Polytope, tol: f64) -> Result<bool> {
    for k in 0..outer.num_rows() {
        let c = outer.f().row(k).transpose();
        let sol = inner.maximize(&c)?;
        match sol.status {
            crate::lp::LpStatus::Optimal => {
                if sol.value > outer.h()[k] + tol {
                    return Ok(false);
                }
            }
            crate::lp::LpStatus::Infeasible => return Ok(true),
            crate::lp::LpStatus::Unbounded => return Ok(false),
        }
    }
    Ok(true)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct InvariantSet {
    pub set: Polytope,
    pub iterations: usize,
    pub converged: bool,
    /// `S ⊆ Pre(S)` re-checked on the result, up to the LP tolerance.
    pub fixed_point_verified: bool,
}

/// Iterates `S ← S ∩ Pre(S)` from `S = X` until two iterates contain each other.
pub fn control_invariant_set(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    x: &Polytope,
    u: &Polytope,
    max_iter: usize,
) -> Result<InvariantSet> {
    x.bounding_box()?;
    u.bounding_box()?;
    let mut s = x.remove_redundant()?;
    for it in 1..=max_iter {
        let next = s.intersect(&pre_set(a, b, &s, u)?)?.remove_redundant()?;
        if next.is_empty()? {
            return Err(Error::EmptyPolytope);
        }
        if contains_polytope(&next, &s, TAU_LP)? {
            let fixed = contains_polytope(&pre_set(a, b, &next, u)?, &next, TAU_LP)?;
            return Ok(InvariantSet {
                set: next,
                iterations: it,
                converged: true,
                fixed_point_verified: fixed,
            });
        }
        s = next;
    }
    Ok(InvariantSet {
        set: s,
        iterations: max_iter,
        converged: false,
        fixed_point_verified: false,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ContourPoint {
    pub x1: f64,
    pub x2: f64,
    pub v: f64,
    pub inside: bool,
}

#[derive(Clone, Debug)]
pub enum ContourData {
    /// Closed polyline on `V = α`.
    Polyline(Vec<[f64; 2]>),
    Grid(Vec<ContourPoint>),
}

/// Points `√α · P^{-1/2} (cos θ, sin θ)` on the ellipse boundary.
pub fn ellipse_boundary(p: &DMatrix<f64>, alpha: f64, resolution: usize) -> Result<Vec<[f64; 2]>> {
    if p.nrows() != 2 || p.ncols() != 2 {
        return Err(Error::DimensionUnsupported(p.nrows()));
    }
    let eig = SymmetricEigen::new(p.clone());
    if eig.eigenvalues.min() <= 0.0 {
        return Err(Error::InvalidInput("P must be positive definite to draw its ellipse".into()));
    }
    let scale = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| (alpha / l).sqrt()));
    let map = &eig.eigenvectors * scale;
    let k = resolution.max(3);
    Ok((0..=k)
        .map(|i| {
            let th = 2.0 * std::f64::consts::PI * (i % k) as f64 / k as f64;
            let x = &map * DVector::from_vec(vec![th.cos(), th.sin()]);
            [x[0], x[1]]
        })
        .collect())
}

/// `V` on a `resolution × resolution` grid over the bounding box of `roi`.
/// Points where the closed loop cannot be evaluated are skipped.
pub fn value_grid(est: &RoaEstimate, cl: &ClosedLoop, roi: &Polytope, resolution: usize) -> Result<Vec<ContourPoint>> {
    if roi.dim() != 2 {
        return Err(Error::DimensionUnsupported(roi.dim()));
    }
    let bb = roi.bounding_box()?;
    let r = resolution.max(2);
    let mut out = Vec::with_capacity(r * r);
    for i in 0..r {
        for j in 0..r {
            let x1 = bb.lower[0] + (bb.upper[0] - bb.lower[0]) * i as f64 / (r - 1) as f64;
            let x2 = bb.lower[1] + (bb.upper[1] - bb.lower[1]) * j as f64 / (r - 1) as f64;
            let x = DVector::from_vec(vec![x1, x2]);
            let Ok(v) = est.value(cl, &x) else { continue };
            out.push(ContourPoint {
                x1,
                x2,
                v,
                inside: v <= est.alpha(),
            });
        }
    }
    Ok(out)
}

pub fn export_contours(est: &RoaEstimate, cl: &ClosedLoop, roi: &Polytope, resolution: usize) -> Result<ContourData> {
    if cl.state_dim() != 2 {
        return Err(Error::DimensionUnsupported(cl.state_dim()));
    }
    match est {
        RoaEstimate::Ellipse { p, alpha } => Ok(ContourData::Polyline(ellipse_boundary(p, *alpha, resolution)?)),
        RoaEstimate::PwqContour { .. } => Ok(ContourData::Grid(value_grid(est, cl, roi, resolution)?)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{ControllerSpec, Layer, PwaSystem, ReluNetwork};

    fn zero_loop(a: DMatrix<f64>, domain: Polytope) -> ClosedLoop {
        let n = a.nrows();
        let plant = PwaSystem::lti(a, DMatrix::zeros(n, 1), domain).unwrap();
        let net = ReluNetwork::new(vec![Layer {
            weights: DMatrix::zeros(1, n),
            bias: DVector::zeros(1),
        }])
        .unwrap();
        ClosedLoop::new(plant, ControllerSpec::Raw { network: net }).unwrap()
    }

    #[test]
    fn alpha_examples() {
        let cl = zero_loop(DMatrix::identity(2, 2) * 0.5, Polytope::cube(2, 2.0));
        let roi = Polytope::cube(2, 1.0);
        let quad = |p: DMatrix<f64>| CandidateParam {
            p,
            kind: CandidateKind::Quadratic,
        };
        let a = sublevel_alpha(&quad(DMatrix::identity(2, 2)), &cl, &roi).unwrap();
        assert!((a - 1.0).abs() < 1e-12);
        let a = sublevel_alpha(&quad(DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 4.0]))), &cl, &roi).unwrap();
        assert!((a - 1.0).abs() < 1e-12);
    }

    #[test]
    fn invariance_examples() {
        let x = Polytope::cube(1, 1.0);
        let cl = zero_loop(DMatrix::from_element(1, 1, 0.5), Polytope::cube(1, 10.0));
        let c = is_positive_invariant(&cl, &x).unwrap();
        assert!(c.invariant);
        assert!((c.worst_margin + 0.5).abs() < 1e-12);
        let cl = zero_loop(DMatrix::from_element(1, 1, 2.0), Polytope::cube(1, 10.0));
        let c = is_positive_invariant(&cl, &x).unwrap();
        assert!(!c.invariant);
        assert!((c.worst_margin - 1.0).abs() < 1e-12);
    }

    #[test]
    fn stable_autonomous_set_is_its_own_fixed_point() {
        let a = DMatrix::identity(2, 2) * 0.5;
        let b = DMatrix::zeros(2, 1);
        let s = control_invariant_set(&a, &b, &Polytope::cube(2, 1.0), &Polytope::cube(1, 1.0), 10).unwrap();
        assert!(s.converged && s.fixed_point_verified);
        assert_eq!(s.iterations, 1);
        assert!(contains_polytope(&s.set, &Polytope::cube(2, 1.0), 1e-12).unwrap());
    }

    #[test]
    fn ellipse_points_lie_on_level_set() {
        let p = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 4.0]));
        let pts = ellipse_boundary(&p, 1.0, 64).unwrap();
        let mut max1 = 0.0f64;
        let mut max2 = 0.0f64;
        for q in &pts {
            let v = q[0] * q[0] + 4.0 * q[1] * q[1];
            assert!((v - 1.0).abs() < 1e-12);
            max1 = max1.max(q[0].abs());
            max2 = max2.max(q[1].abs());
        }
        assert!((max1 - 1.0).abs() < 1e-12 && (max2 - 0.5).abs() < 1e-12);
    }
}
