//! Exact extremization of a quadratic over a bounded polytope.
//!
//! An optimizer lies in the relative interior of some face, where the gradient
//! restricted to the face's affine hull vanishes. Enumerating faces and solving
//! each restricted stationary system therefore yields a finite candidate set
//! that contains a global optimizer.

use std::cmp::Ordering;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::geometry::{AxisBox, Face, FaceLattice, Polytope};
use crate::lp::{solve_lp, LpProblem, LpStatus};

const SINGULAR_TOL: f64 = 1e-10;
const MEMBERSHIP_TOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sense {
    Max,
    Min,
}

/// `xᵀQx + qᵀx + c` with `Q` symmetric.
#[derive(Clone, Debug, PartialEq)]
pub struct QuadraticForm {
    q2: DMatrix<f64>,
    q1: DVector<f64>,
    c: f64,
}

impl QuadraticForm {
    pub fn new(q2: DMatrix<f64>, q1: DVector<f64>, c: f64) -> Result<Self> {
        if !q2.is_square() || q2.nrows() != q1.len() {
            return Err(dim_err("quadratic form blocks disagree"));
        }
        let q2 = (&q2 + q2.transpose()) * 0.5;
        Ok(QuadraticForm { q2, q1, c })
    }

    pub fn linear(q1: DVector<f64>, c: f64) -> Self {
        let n = q1.len();
        QuadraticForm {
            q2: DMatrix::zeros(n, n),
            q1,
            c,
        }
    }

    pub fn dim(&self) -> usize {
        self.q1.len()
    }

    pub fn quad(&self) -> &DMatrix<f64> {
        &self.q2
    }

    pub fn lin(&self) -> &DVector<f64> {
        &self.q1
    }

    pub fn constant(&self) -> f64 {
        self.c
    }

    pub fn value(&self, x: &DVector<f64>) -> f64 {
        (&self.q2 * x).dot(x) + self.q1.dot(x) + self.c
    }

    pub fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.q2 * x * 2.0 + &self.q1
    }

    pub fn negated(&self) -> QuadraticForm {
        QuadraticForm {
            q2: -&self.q2,
            q1: -&self.q1,
            c: -self.c,
        }
    }

    /// `t ↦ f(Mt + m)`.
    pub fn compose(&self, mat: &DMatrix<f64>, offset: &DVector<f64>) -> QuadraticForm {
        let qm = &self.q2 * mat;
        let q2 = mat.transpose() * &qm;
        let q1 = mat.transpose() * (&self.q2 * offset * 2.0 + &self.q1);
        let c = self.value(offset);
        QuadraticForm {
            q2: (&q2 + q2.transpose()) * 0.5,
            q1,
            c,
        }
    }

    /// Difference `V(y) − V(x)` for `V(z) = zᵀPz` and `y = Mx + m`.
    pub fn lyapunov_difference(p: &DMatrix<f64>, mat: &DMatrix<f64>, offset: &DVector<f64>) -> QuadraticForm {
        let pm = p * mat;
        let q2 = mat.transpose() * &pm - p;
        let q1 = mat.transpose() * (p * offset) * 2.0;
        let c = (p * offset).dot(offset);
        QuadraticForm {
            q2: (&q2 + q2.transpose()) * 0.5,
            q1,
            c,
        }
    }

    /// Upper bound over a box by interval arithmetic on every monomial.
    pub fn upper_bound_on_box(&self, b: &AxisBox) -> f64 {
        let n = self.dim();
        let mut ub = self.c;
        for i in 0..n {
            let (l, u) = (b.lower[i], b.upper[i]);
            ub += (self.q1[i] * l).max(self.q1[i] * u);
            let qii = self.q2[(i, i)];
            let sq_max = (l * l).max(u * u);
            let sq_min = if l <= 0.0 && u >= 0.0 { 0.0 } else { (l * l).min(u * u) };
            ub += if qii >= 0.0 { qii * sq_max } else { qii * sq_min };
            for j in i + 1..n {
                let w = 2.0 * self.q2[(i, j)];
                if w == 0.0 {
                    continue;
                }
                let (lj, uj) = (b.lower[j], b.upper[j]);
                let corners = [l * lj, l * uj, u * lj, u * uj];
                ub += corners.iter().map(|p| w * p).fold(f64::NEG_INFINITY, f64::max);
            }
        }
        ub
    }
}

/// Lexicographic order on points, used to break ties deterministically.
pub fn lex_cmp(a: &DVector<f64>, b: &DVector<f64>) -> Ordering {
    for (x, y) in a.iter().zip(b.iter()) {
        match x.total_cmp(y) {
            Ordering::Equal => continue,
            o => return o,
        }
    }
    Ordering::Equal
}

/// Tracks the best candidate; near-ties go to the lexicographically smaller point.
#[derive(Clone, Debug)]
pub(crate) struct Best {
    pub x: Option<DVector<f64>>,
    pub value: f64,
}

impl Best {
    pub fn new() -> Self {
        Best {
            x: None,
            value: f64::NEG_INFINITY,
        }
    }

    pub fn offer(&mut self, x: DVector<f64>, value: f64) {
        let tol = 1e-12 * (1.0 + value.abs().max(self.value.abs()));
        let take = match &self.x {
            None => true,
            Some(bx) => value > self.value + tol || (value >= self.value - tol && lex_cmp(&x, bx) == Ordering::Less),
        };
        if take {
            self.x = Some(x);
            self.value = value;
        }
    }
}

pub fn extremize(f: &QuadraticForm, p: &Polytope, sense: Sense) -> Result<(DVector<f64>, f64)> {
    if f.dim() != p.dim() {
        return Err(dim_err("quadratic and polytope dimensions differ"));
    }
    let lattice = p.enumerate_faces()?;
    extremize_on_faces(f, &lattice, sense)
}

/// Same as [`extremize`] with a precomputed face lattice.
pub fn extremize_on_faces(f: &QuadraticForm, lattice: &FaceLattice, sense: Sense) -> Result<(DVector<f64>, f64)> {
    let g = match sense {
        Sense::Max => f.clone(),
        Sense::Min => f.negated(),
    };
    let mut best = Best::new();
    for face in &lattice.faces {
        if let Some(x) = face_candidate(&g, &lattice.polytope, face)? {
            let v = g.value(&x);
            best.offer(x, v);
        }
    }
    let x = best.x.ok_or(Error::EmptyPolytope)?;
    let v = f.value(&x);
    Ok((x, v))
}

/// The stationary point of `g` on the affine hull of `face`, if one lies in the face.
fn face_candidate(g: &QuadraticForm, p: &Polytope, face: &Face) -> Result<Option<DVector<f64>>> {
    if face.dim == 0 {
        return Ok(Some(face.witness.clone()));
    }
    let z = &face.directions;
    let x0 = &face.witness;
    let h = z.transpose() * g.quad() * z;
    let h = (&h + h.transpose()) * 0.5;
    let g0 = z.transpose() * g.gradient(x0);
    // 2 H t + g0 = 0
    let eig = SymmetricEigen::new(h.clone());
    let scale = eig.eigenvalues.amax().max(1.0);
    let d = face.dim;
    let mut t = DVector::zeros(d);
    let mut null = Vec::new();
    for k in 0..d {
        let lam = eig.eigenvalues[k];
        let v = eig.eigenvectors.column(k);
        if lam.abs() > SINGULAR_TOL * scale {
            t -= v * (v.dot(&g0) / (2.0 * lam));
        } else {
            null.push(v.into_owned());
        }
    }
    let resid = (&h * &t * 2.0 + &g0).norm();
    if resid > 1e-9 * (1.0 + g0.norm()) {
        return Ok(None);
    }
    let x = x0 + z * &t;
    if p.max_violation(&x) <= MEMBERSHIP_TOL {
        return Ok(Some(x));
    }
    if null.is_empty() {
        return Ok(None);
    }
    // g is constant on the stationary set x + Z N s; any point of it inside P will do
    let zn = z * DMatrix::from_columns(&null);
    let k = zn.ncols();
    let cons = Polytope::new(p.f() * &zn, p.h() - p.f() * &x)?;
    let sol = solve_lp(&LpProblem {
        objective: DVector::zeros(k),
        constraints: cons,
        equalities: None,
    })?;
    Ok((sol.status == LpStatus::Optimal).then(|| &x + &zn * &sol.x))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(x: &[f64]) -> DVector<f64> {
        DVector::from_vec(x.to_vec())
    }

    #[test]
    fn saddle_on_square() {
        let f = QuadraticForm::new(DMatrix::from_diagonal(&v(&[1.0, -1.0])), v(&[0.0, 0.0]), 0.0).unwrap();
        let (x, val) = extremize(&f, &Polytope::cube(2, 1.0), Sense::Max).unwrap();
        assert!((val - 1.0).abs() < 1e-12);
        assert!(x[1].abs() < 1e-12 && (x[0].abs() - 1.0).abs() < 1e-12);
        // lexicographic tie-break picks (-1, 0)
        assert!((x[0] + 1.0).abs() < 1e-12);
    }

    #[test]
    fn convex_min_on_offset_box() {
        let f = QuadraticForm::new(DMatrix::identity(2, 2), v(&[0.0, 0.0]), 0.0).unwrap();
        let p = Polytope::from_box(&v(&[1.0, -1.0]), &v(&[2.0, 1.0]));
        let (x, val) = extremize(&f, &p, Sense::Min).unwrap();
        assert!((val - 1.0).abs() < 1e-12);
        assert!((x - v(&[1.0, 0.0])).norm() < 1e-12);
    }

    #[test]
    fn flat_direction_is_handled() {
        // f = -(x1 - 0.3)^2 is flat along x2 and peaks on the line x1 = 0.3
        let f = QuadraticForm::new(DMatrix::from_diagonal(&v(&[-1.0, 0.0])), v(&[0.6, 0.0]), -0.09).unwrap();
        let (x, val) = extremize(&f, &Polytope::cube(2, 1.0), Sense::Max).unwrap();
        assert!(val.abs() < 1e-12, "{val}");
        assert!((x[0] - 0.3).abs() < 1e-12);
    }

    #[test]
    fn interval_bound_dominates() {
        let f = QuadraticForm::new(
            DMatrix::from_row_slice(2, 2, &[0.3, -1.2, -1.2, -0.5]),
            v(&[0.1, -0.4]),
            0.2,
        )
        .unwrap();
        let b = AxisBox::new(v(&[-1.0, 0.5]), v(&[0.5, 2.0])).unwrap();
        let (_, exact) = extremize(&f, &b.to_polytope(), Sense::Max).unwrap();
        assert!(f.upper_bound_on_box(&b) >= exact - 1e-12);
    }

    #[test]
    fn lyapunov_difference_matches_direct() {
        let p = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]);
        let m = DMatrix::from_row_slice(2, 2, &[0.5, 0.1, -0.2, 0.9]);
        let off = v(&[0.05, -0.1]);
        let f = QuadraticForm::lyapunov_difference(&p, &m, &off);
        let x = v(&[0.7, -0.4]);
        let y = &m * &x + &off;
        let direct = (&p * &y).dot(&y) - (&p * &x).dot(&x);
        assert!((f.value(&x) - direct).abs() < 1e-14);
    }
}
