//! H-polytopes `{x | Fx ≤ h}` and the LP-based operations on them.

use std::collections::{BTreeSet, VecDeque};

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::lp::{solve_lp, LpProblem, LpSolution, LpStatus, TAU_LP};
use crate::serde_util::{mat_to_rows, rows_to_mat};

/// Largest ambient dimension accepted by face enumeration.
pub const FACE_DIM_CAP: usize = 4;

const RANK_TOL: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PolytopeRepr", into = "PolytopeRepr")]
pub struct Polytope {
    f: DMatrix<f64>,
    h: DVector<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
#[serde(expecting = "a polytope {\"F\": rows, \"h\": vector}")]
struct PolytopeRepr {
    #[serde(rename = "F")]
    f: Vec<Vec<f64>>,
    h: Vec<f64>,
}

impl TryFrom<PolytopeRepr> for Polytope {
    type Error = String;

    fn try_from(r: PolytopeRepr) -> std::result::Result<Self, String> {
        let f = rows_to_mat(&r.f, 0)?;
        Polytope::new(f, DVector::from_vec(r.h)).map_err(|e| e.to_string())
    }
}

impl From<Polytope> for PolytopeRepr {
    fn from(p: Polytope) -> Self {
        PolytopeRepr {
            f: mat_to_rows(&p.f),
            h: p.h.as_slice().to_vec(),
        }
    }
}

/// Axis-aligned box `lower ≤ x ≤ upper`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AxisBox {
    #[serde(with = "crate::serde_util::vector")]
    pub lower: DVector<f64>,
    #[serde(with = "crate::serde_util::vector")]
    pub upper: DVector<f64>,
}

impl AxisBox {
    pub fn new(lower: DVector<f64>, upper: DVector<f64>) -> Result<Self> {
        if lower.len() != upper.len() {
            return Err(dim_err("box bounds differ in length"));
        }
        if lower.iter().zip(upper.iter()).any(|(l, u)| !(l <= u)) {
            return Err(Error::InvalidInput("box lower bound exceeds upper bound".into()));
        }
        Ok(AxisBox { lower, upper })
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn widths(&self) -> DVector<f64> {
        &self.upper - &self.lower
    }

    pub fn center(&self) -> DVector<f64> {
        (&self.upper + &self.lower) * 0.5
    }

    pub fn contains(&self, x: &DVector<f64>, tol: f64) -> bool {
        (0..self.dim()).all(|i| x[i] >= self.lower[i] - tol && x[i] <= self.upper[i] + tol)
    }

    pub fn inflate(&self, margin: f64) -> AxisBox {
        AxisBox {
            lower: self.lower.add_scalar(-margin),
            upper: self.upper.add_scalar(margin),
        }
    }

    pub fn to_polytope(&self) -> Polytope {
        Polytope::from_box(&self.lower, &self.upper)
    }

    /// All 2ⁿ corners, in binary counting order over the coordinates.
    pub fn corners(&self) -> Vec<DVector<f64>> {
        let n = self.dim();
        (0..1usize << n)
            .map(|mask| {
                DVector::from_fn(n, |i, _| {
                    if mask >> i & 1 == 1 {
                        self.upper[i]
                    } else {
                        self.lower[i]
                    }
                })
            })
            .collect()
    }
}

/// A nonempty face, identified by the maximal set of rows tight on it.
#[derive(Clone, Debug)]
pub struct Face {
    pub tight: Vec<usize>,
    pub dim: usize,
    /// Relative-interior point; exact vertex coordinates when `dim == 0`.
    pub witness: DVector<f64>,
    /// Orthonormal basis (columns) of the direction space of the affine hull.
    pub directions: DMatrix<f64>,
}

/// All faces of a polytope, with indices referring to `polytope`'s rows.
#[derive(Clone, Debug)]
pub struct FaceLattice {
    pub polytope: Polytope,
    pub faces: Vec<Face>,
}

impl FaceLattice {
    pub fn vertices(&self) -> Vec<DVector<f64>> {
        self.faces
            .iter()
            .filter(|f| f.dim == 0)
            .map(|f| f.witness.clone())
            .collect()
    }

    pub fn count_of_dim(&self, d: usize) -> usize {
        self.faces.iter().filter(|f| f.dim == d).count()
    }
}

impl Polytope {
    pub fn new(f: DMatrix<f64>, h: DVector<f64>) -> Result<Self> {
        if f.nrows() != h.len() {
            return Err(dim_err(format!("F has {} rows but h has {} entries", f.nrows(), h.len())));
        }
        if f.nrows() == 0 || f.ncols() == 0 {
            return Err(Error::InvalidInput("polytope needs at least one row and one column".into()));
        }
        if !f.iter().chain(h.iter()).all(|v| v.is_finite()) {
            return Err(Error::InvalidInput("polytope data must be finite".into()));
        }
        Ok(Polytope { f, h })
    }

    pub fn from_rows(rows: Vec<Vec<f64>>, h: Vec<f64>) -> Result<Self> {
        let f = rows_to_mat(&rows, 0).map_err(Error::InvalidInput)?;
        Polytope::new(f, DVector::from_vec(h))
    }

    pub fn from_box(lower: &DVector<f64>, upper: &DVector<f64>) -> Self {
        let n = lower.len();
        let mut f = DMatrix::zeros(2 * n, n);
        let mut h = DVector::zeros(2 * n);
        for i in 0..n {
            f[(2 * i, i)] = 1.0;
            h[2 * i] = upper[i];
            f[(2 * i + 1, i)] = -1.0;
            h[2 * i + 1] = -lower[i];
        }
        Polytope { f, h }
    }

    /// `[-r, r]ⁿ`.
    pub fn cube(n: usize, r: f64) -> Self {
        Polytope::from_box(&DVector::from_element(n, -r), &DVector::from_element(n, r))
    }

    /// The whole space, encoded by the trivial row `0·x ≤ 1`.
    pub fn universe(n: usize) -> Self {
        Polytope {
            f: DMatrix::zeros(1, n),
            h: DVector::from_element(1, 1.0),
        }
    }

    pub fn f(&self) -> &DMatrix<f64> {
        &self.f
    }

    pub fn h(&self) -> &DVector<f64> {
        &self.h
    }

    pub fn dim(&self) -> usize {
        self.f.ncols()
    }

    pub fn num_rows(&self) -> usize {
        self.f.nrows()
    }

    /// `F x ≤ h + tol·‖F_i‖` for every row.
    pub fn contains(&self, x: &DVector<f64>, tol: f64) -> bool {
        let fx = &self.f * x;
        (0..self.num_rows()).all(|i| fx[i] <= self.h[i] + tol * self.f.row(i).norm().max(1.0))
    }

    /// Largest normalized violation `max_i (F_i x − h_i)/‖F_i‖`.
    pub fn max_violation(&self, x: &DVector<f64>) -> f64 {
        let fx = &self.f * x;
        (0..self.num_rows())
            .map(|i| {
                let nrm = self.f.row(i).norm();
                if nrm > 0.0 {
                    (fx[i] - self.h[i]) / nrm
                } else {
                    -self.h[i]
                }
            })
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn with_rows(&self, f: &DMatrix<f64>, h: &DVector<f64>) -> Result<Polytope> {
        if f.ncols() != self.dim() || f.nrows() != h.len() {
            return Err(dim_err("appended rows do not match polytope dimension"));
        }
        if f.nrows() == 0 {
            return Ok(self.clone());
        }
        let m = self.num_rows();
        let mut nf = DMatrix::zeros(m + f.nrows(), self.dim());
        nf.rows_mut(0, m).copy_from(&self.f);
        nf.rows_mut(m, f.nrows()).copy_from(f);
        let mut nh = DVector::zeros(m + h.len());
        nh.rows_mut(0, m).copy_from(&self.h);
        nh.rows_mut(m, h.len()).copy_from(h);
        Polytope::new(nf, nh)
    }

    pub fn with_row(&self, a: &DVector<f64>, b: f64) -> Result<Polytope> {
        self.with_rows(&DMatrix::from_row_slice(1, a.len(), a.as_slice()), &DVector::from_element(1, b))
    }

    pub fn intersect(&self, other: &Polytope) -> Result<Polytope> {
        self.with_rows(&other.f, &other.h)
    }

    pub fn select_rows(&self, rows: &[usize]) -> Result<Polytope> {
        let f = DMatrix::from_fn(rows.len(), self.dim(), |i, j| self.f[(rows[i], j)]);
        let h = DVector::from_fn(rows.len(), |i, _| self.h[rows[i]]);
        Polytope::new(f, h)
    }

    /// `{x | F(Mx + m) ≤ h}`.
    pub fn preimage(&self, mat: &DMatrix<f64>, offset: &DVector<f64>) -> Result<Polytope> {
        if mat.nrows() != self.dim() || offset.len() != self.dim() {
            return Err(dim_err("affine map does not land in the polytope's space"));
        }
        Polytope::new(&self.f * mat, &self.h - &self.f * offset)
    }

    pub fn scale_about_origin(&self, gamma: f64) -> Result<Polytope> {
        if !(gamma > 0.0) || !gamma.is_finite() {
            return Err(Error::InvalidInput(format!("scaling factor must be positive, got {gamma}")));
        }
        Ok(Polytope {
            f: self.f.clone(),
            h: &self.h * gamma,
        })
    }

    pub fn maximize(&self, c: &DVector<f64>) -> Result<LpSolution> {
        solve_lp(&LpProblem {
            objective: c.clone(),
            constraints: self.clone(),
            equalities: None,
        })
    }

    pub fn is_empty(&self) -> Result<bool> {
        Ok(self.maximize(&DVector::zeros(self.dim()))?.status == LpStatus::Infeasible)
    }

    /// Chebyshev center and radius, computed with the radius capped at 1.
    /// A negative radius means the polytope is empty by at least that margin.
    pub fn chebyshev(&self) -> Result<(DVector<f64>, f64)> {
        let n = self.dim();
        let m = self.num_rows();
        let mut f = DMatrix::zeros(m + 1, n + 1);
        let mut h = DVector::zeros(m + 1);
        for i in 0..m {
            for j in 0..n {
                f[(i, j)] = self.f[(i, j)];
            }
            f[(i, n)] = self.f.row(i).norm();
            h[i] = self.h[i];
        }
        f[(m, n)] = 1.0;
        h[m] = 1.0;
        let mut c = DVector::zeros(n + 1);
        c[n] = 1.0;
        let sol = solve_lp(&LpProblem {
            objective: c,
            constraints: Polytope { f, h },
            equalities: None,
        })?;
        match sol.status {
            LpStatus::Optimal => Ok((sol.x.rows(0, n).into_owned(), sol.x[n])),
            // the shifted problem is always feasible, so this only happens when
            // every row is zero and infeasible at once
            LpStatus::Infeasible => Ok((DVector::zeros(n), f64::NEG_INFINITY)),
            LpStatus::Unbounded => Err(Error::LpNumericalFailure("Chebyshev LP unbounded".into())),
        }
    }

    pub fn interior_point(&self) -> Result<Option<(DVector<f64>, f64)>> {
        let (c, r) = self.chebyshev()?;
        Ok((r > TAU_LP).then_some((c, r)))
    }

    pub fn bounding_box(&self) -> Result<AxisBox> {
        let n = self.dim();
        let mut lower = DVector::zeros(n);
        let mut upper = DVector::zeros(n);
        for i in 0..n {
            let mut e = DVector::zeros(n);
            e[i] = 1.0;
            let hi = self.maximize(&e)?;
            let lo = self.maximize(&(-&e))?;
            match (hi.status, lo.status) {
                (LpStatus::Infeasible, _) | (_, LpStatus::Infeasible) => return Err(Error::EmptyPolytope),
                (LpStatus::Unbounded, _) | (_, LpStatus::Unbounded) => return Err(Error::Unbounded),
                _ => {}
            }
            upper[i] = hi.value;
            lower[i] = -lo.value;
            if lower[i] > upper[i] {
                let mid = 0.5 * (lower[i] + upper[i]);
                lower[i] = mid;
                upper[i] = mid;
            }
        }
        AxisBox::new(lower, upper)
    }

    /// Drops rows implied by the others, scanning in order.
    pub fn remove_redundant(&self) -> Result<Polytope> {
        let m = self.num_rows();
        let mut keep: Vec<bool> = vec![true; m];
        // zero rows that hold everywhere, and exact duplicates, are dropped up front
        for i in 0..m {
            let nrm = self.f.row(i).norm();
            if nrm < 1e-14 && self.h[i] >= -TAU_LP {
                keep[i] = false;
            }
        }
        for i in 0..m {
            if !keep[i] {
                continue;
            }
            let others: Vec<usize> = (0..m).filter(|&j| j != i && keep[j]).collect();
            if others.is_empty() {
                continue;
            }
            let rest = self.select_rows(&others)?;
            let row = self.f.row(i).transpose();
            let sol = rest.maximize(&row)?;
            match sol.status {
                LpStatus::Optimal => {
                    let nrm = row.norm().max(1.0);
                    if sol.value <= self.h[i] + TAU_LP * nrm {
                        keep[i] = false;
                    }
                }
                LpStatus::Unbounded => {}
                // the other rows alone are empty; keep the input as is
                LpStatus::Infeasible => return Ok(self.clone()),
            }
        }
        let idx: Vec<usize> = (0..m).filter(|&i| keep[i]).collect();
        if idx.is_empty() {
            return Ok(Polytope::universe(self.dim()));
        }
        self.select_rows(&idx)
    }

    /// Projects out coordinate `drop` by Fourier–Motzkin elimination.
    pub fn fourier_motzkin_project(&self, drop: usize) -> Result<Polytope> {
        let n = self.dim();
        if drop >= n || n < 2 {
            return Err(Error::InvalidInput(format!("cannot drop coordinate {drop} of a {n}-D polytope")));
        }
        let mut pos = Vec::new();
        let mut neg = Vec::new();
        let mut rows: Vec<(Vec<f64>, f64)> = Vec::new();
        let strip = |row: &[f64]| -> Vec<f64> {
            row.iter().enumerate().filter(|(j, _)| *j != drop).map(|(_, v)| *v).collect()
        };
        for i in 0..self.num_rows() {
            let row: Vec<f64> = self.f.row(i).iter().copied().collect();
            let a = row[drop];
            let scale = row.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            if a.abs() <= 1e-12 * scale.max(1.0) {
                rows.push((strip(&row), self.h[i]));
            } else if a > 0.0 {
                pos.push(i);
            } else {
                neg.push(i);
            }
        }
        for &p in &pos {
            for &q in &neg {
                let ap = self.f[(p, drop)];
                let aq = -self.f[(q, drop)];
                let row: Vec<f64> = (0..n).map(|j| self.f[(p, j)] / ap + self.f[(q, j)] / aq).collect();
                rows.push((strip(&row), self.h[p] / ap + self.h[q] / aq));
            }
        }
        if rows.is_empty() {
            return Ok(Polytope::universe(n - 1));
        }
        let (r, h): (Vec<Vec<f64>>, Vec<f64>) = rows.into_iter().unzip();
        Polytope::from_rows(r, h)?.remove_redundant()
    }

    /// Nonredundant facets as polytopes `{x ∈ P | F_k x = h_k}`, with the row index.
    pub fn facets(&self) -> Result<Vec<(usize, Polytope)>> {
        let mut out = Vec::new();
        for k in 0..self.num_rows() {
            let row = self.f.row(k).transpose();
            if row.norm() < 1e-14 {
                continue;
            }
            let facet = self.with_row(&(-&row), -self.h[k])?;
            if facet.relint_dimension_point()?.is_some() {
                out.push((k, facet));
            }
        }
        Ok(out)
    }

    fn relint_dimension_point(&self) -> Result<Option<DVector<f64>>> {
        let (x, r) = self.chebyshev()?;
        if r < -TAU_LP {
            return Ok(None);
        }
        Ok(Some(x))
    }

    /// Smallest face containing the points where the rows in `tight` hold with
    /// equality. Returns its full tight set and a relative-interior point, or
    /// `None` when that face is empty.
    fn face_closure(&self, tight: &BTreeSet<usize>) -> Result<Option<(BTreeSet<usize>, DVector<f64>)>> {
        let n = self.dim();
        let m = self.num_rows();
        let free: Vec<usize> = (0..m).filter(|i| !tight.contains(i)).collect();
        let eq = if tight.is_empty() {
            None
        } else {
            let t: Vec<usize> = tight.iter().copied().collect();
            let a = DMatrix::from_fn(t.len(), n + 1, |i, j| if j < n { self.f[(t[i], j)] } else { 0.0 });
            let b = DVector::from_fn(t.len(), |i, _| self.h[t[i]]);
            Some((a, b))
        };
        let mut f = DMatrix::zeros(free.len() + 1, n + 1);
        let mut h = DVector::zeros(free.len() + 1);
        for (r, &i) in free.iter().enumerate() {
            let nrm = self.f.row(i).norm().max(1e-300);
            for j in 0..n {
                f[(r, j)] = self.f[(i, j)] / nrm;
            }
            f[(r, n)] = 1.0;
            h[r] = self.h[i] / nrm;
        }
        f[(free.len(), n)] = 1.0;
        h[free.len()] = 1.0;
        let mut c = DVector::zeros(n + 1);
        c[n] = 1.0;
        let sol = solve_lp(&LpProblem {
            objective: c,
            constraints: Polytope { f, h },
            equalities: eq.clone(),
        })?;
        if sol.status != LpStatus::Optimal {
            return Ok(None);
        }
        let t_star = sol.x[n];
        if t_star < -TAU_LP {
            return Ok(None);
        }
        if t_star > TAU_LP {
            return Ok(Some((tight.clone(), sol.x.rows(0, n).into_owned())));
        }
        // some free rows are implicit equalities on this face
        let eq_n = eq.map(|(a, b)| (a.columns(0, n).into_owned(), b));
        let mut closure = tight.clone();
        let mut acc = DVector::zeros(n);
        let mut count = 0usize;
        let mut fallback = sol.x.rows(0, n).into_owned();
        for &i in &free {
            let row = self.f.row(i).transpose();
            let s = solve_lp(&LpProblem {
                objective: -row.clone(),
                constraints: self.clone(),
                equalities: eq_n.clone(),
            })?;
            match s.status {
                LpStatus::Infeasible => return Ok(None),
                LpStatus::Unbounded => return Err(Error::Unbounded),
                LpStatus::Optimal => {
                    let slack = self.h[i] + s.value;
                    fallback = s.x.clone();
                    if slack <= TAU_LP * row.norm().max(1.0) {
                        closure.insert(i);
                    } else {
                        acc += &s.x;
                        count += 1;
                    }
                }
            }
        }
        let witness = if count > 0 { acc / count as f64 } else { fallback };
        Ok(Some((closure, witness)))
    }

    /// Every nonempty face, after redundancy removal.
    pub fn enumerate_faces(&self) -> Result<FaceLattice> {
        let n = self.dim();
        if n > FACE_DIM_CAP {
            return Err(Error::DimensionCapExceeded { dim: n, cap: FACE_DIM_CAP });
        }
        let p = self.remove_redundant()?;
        let m = p.num_rows();
        let Some((top, w)) = p.face_closure(&BTreeSet::new())? else {
            return Err(Error::EmptyPolytope);
        };
        let mut seen: BTreeSet<Vec<usize>> = BTreeSet::new();
        let mut faces = Vec::new();
        let mut queue = VecDeque::new();
        seen.insert(top.iter().copied().collect());
        queue.push_back((top, w));
        while let Some((tight, witness)) = queue.pop_front() {
            let face = p.make_face(&tight, witness)?;
            let dim = face.dim;
            faces.push(face);
            if dim == 0 {
                continue;
            }
            for j in 0..m {
                if tight.contains(&j) {
                    continue;
                }
                let mut t = tight.clone();
                t.insert(j);
                if let Some((cl, w)) = p.face_closure(&t)? {
                    let key: Vec<usize> = cl.iter().copied().collect();
                    if seen.insert(key) {
                        queue.push_back((cl, w));
                    }
                }
            }
        }
        if faces.iter().all(|f| f.dim > 0) {
            // a nonempty polytope without vertices contains a line
            return Err(Error::Unbounded);
        }
        faces.sort_by(|a, b| a.dim.cmp(&b.dim).then_with(|| a.tight.cmp(&b.tight)));
        Ok(FaceLattice { polytope: p, faces })
    }

    fn make_face(&self, tight: &BTreeSet<usize>, witness: DVector<f64>) -> Result<Face> {
        let n = self.dim();
        let t: Vec<usize> = tight.iter().copied().collect();
        let (directions, rank) = null_space(&self.f, &t, n);
        let dim = n - rank;
        let witness = if dim == 0 {
            let a = DMatrix::from_fn(t.len(), n, |i, j| self.f[(t[i], j)]);
            let b = DVector::from_fn(t.len(), |i, _| self.h[t[i]]);
            a.svd(true, true)
                .solve(&b, 1e-12)
                .map_err(|e| Error::NumericalFailure(e.to_string()))?
        } else {
            witness
        };
        Ok(Face {
            tight: t,
            dim,
            witness,
            directions,
        })
    }

    /// A point of `self` not covered by the union of `pieces` (up to a margin),
    /// or `None` when the pieces cover it.
    pub fn uncovered_point(&self, pieces: &[Polytope], margin: f64) -> Result<Option<DVector<f64>>> {
        let (c, r) = self.chebyshev()?;
        if r < -TAU_LP {
            return Ok(None);
        }
        self.uncovered_rec(pieces, margin, c)
    }

    fn uncovered_rec(&self, pieces: &[Polytope], margin: f64, center: DVector<f64>) -> Result<Option<DVector<f64>>> {
        let Some((piece, rest)) = pieces.split_first() else {
            return Ok(Some(center));
        };
        let mut region = self.clone();
        for k in 0..piece.num_rows() {
            let row = piece.f.row(k).transpose();
            let nrm = row.norm();
            if nrm < 1e-14 {
                if piece.h[k] < 0.0 {
                    // this piece is empty; nothing of `region` is covered by it
                    return region.uncovered_rec(rest, margin, center);
                }
                continue;
            }
            let outside = region.with_row(&(-&row), -(piece.h[k] + margin * nrm))?;
            let (c, r) = outside.chebyshev()?;
            if r >= -TAU_LP {
                if let Some(x) = outside.uncovered_rec(rest, margin, c)? {
                    return Ok(Some(x));
                }
            }
            region = region.with_row(&row, piece.h[k])?;
        }
        Ok(None)
    }
}

/// Orthonormal basis of `{d | F_T d = 0}` and the rank of `F_T`.
fn null_space(f: &DMatrix<f64>, rows: &[usize], n: usize) -> (DMatrix<f64>, usize) {
    if rows.is_empty() {
        return (DMatrix::identity(n, n), 0);
    }
    let mut gram = DMatrix::zeros(n, n);
    for &i in rows {
        let r = f.row(i);
        let nrm = r.norm();
        if nrm == 0.0 {
            continue;
        }
        let r = r / nrm;
        gram += r.transpose() * r;
    }
    let eig = SymmetricEigen::new(gram);
    let mut cols = Vec::new();
    for k in 0..n {
        if eig.eigenvalues[k] <= RANK_TOL {
            cols.push(eig.eigenvectors.column(k).into_owned());
        }
    }
    let rank = n - cols.len();
    let basis = if cols.is_empty() {
        DMatrix::zeros(n, 0)
    } else {
        DMatrix::from_columns(&cols)
    };
    (basis, rank)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(x: &[f64]) -> DVector<f64> {
        DVector::from_vec(x.to_vec())
    }

    #[test]
    fn emptiness() {
        let p = Polytope::from_rows(vec![vec![1.0], vec![-1.0]], vec![1.0, 1.0]).unwrap();
        assert!(!p.is_empty().unwrap());
        let q = Polytope::from_rows(vec![vec![1.0], vec![-1.0]], vec![-1.0, -1.0]).unwrap();
        assert!(q.is_empty().unwrap());
    }

    #[test]
    fn boxes() {
        let sq = Polytope::cube(2, 1.0);
        let b = sq.bounding_box().unwrap();
        assert_eq!(b.lower, v(&[-1.0, -1.0]));
        assert_eq!(b.upper, v(&[1.0, 1.0]));
        let tri = Polytope::from_rows(
            vec![vec![-1.0, 0.0], vec![0.0, -1.0], vec![1.0, 1.0]],
            vec![0.0, 0.0, 1.0],
        )
        .unwrap();
        let b = tri.bounding_box().unwrap();
        assert!((b.lower - v(&[0.0, 0.0])).amax() < 1e-12);
        assert!((b.upper - v(&[1.0, 1.0])).amax() < 1e-12);
        let half = Polytope::from_rows(vec![vec![1.0, 0.0]], vec![1.0]).unwrap();
        assert!(matches!(half.bounding_box(), Err(Error::Unbounded)));
    }

    #[test]
    fn square_faces() {
        let lat = Polytope::cube(2, 1.0).enumerate_faces().unwrap();
        assert_eq!(lat.faces.len(), 9);
        assert_eq!(lat.count_of_dim(0), 4);
        assert_eq!(lat.count_of_dim(1), 4);
        assert_eq!(lat.count_of_dim(2), 1);
        let interval = Polytope::cube(1, 1.0).enumerate_faces().unwrap();
        assert_eq!(interval.faces.len(), 3);
        let mut vs: Vec<f64> = interval.vertices().iter().map(|x| x[0]).collect();
        vs.sort_by(f64::total_cmp);
        assert_eq!(vs, vec![-1.0, 1.0]);
    }

    #[test]
    fn faces_of_cube_and_flat_set() {
        let lat = Polytope::cube(3, 1.0).enumerate_faces().unwrap();
        assert_eq!(lat.count_of_dim(0), 8);
        assert_eq!(lat.count_of_dim(1), 12);
        assert_eq!(lat.count_of_dim(2), 6);
        assert_eq!(lat.count_of_dim(3), 1);
        // a segment embedded in the plane
        let seg = Polytope::cube(2, 1.0).with_row(&v(&[0.0, 1.0]), 0.0).unwrap().with_row(&v(&[0.0, -1.0]), 0.0).unwrap();
        let lat = seg.enumerate_faces().unwrap();
        assert_eq!(lat.count_of_dim(0), 2);
        assert_eq!(lat.count_of_dim(1), 1);
        assert_eq!(lat.faces.len(), 3);
        assert!(matches!(Polytope::cube(5, 1.0).enumerate_faces(), Err(Error::DimensionCapExceeded { .. })));
    }

    #[test]
    fn projection_examples() {
        let p = Polytope::from_box(&v(&[0.0, 0.0]), &v(&[1.0, 1.0])).fourier_motzkin_project(1).unwrap();
        let b = p.bounding_box().unwrap();
        assert!((b.lower[0]).abs() < 1e-12 && (b.upper[0] - 1.0).abs() < 1e-12);
        assert_eq!(p.num_rows(), 2);
        let q = Polytope::from_rows(
            vec![vec![1.0, 1.0], vec![1.0, -1.0], vec![-1.0, 0.0]],
            vec![1.0, 1.0, 0.0],
        )
        .unwrap()
        .fourier_motzkin_project(1)
        .unwrap();
        let b = q.bounding_box().unwrap();
        assert!(b.lower[0].abs() < 1e-12 && (b.upper[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn redundancy_examples() {
        let p = Polytope::from_rows(vec![vec![1.0], vec![1.0], vec![-1.0]], vec![1.0, 1.0, 0.0]).unwrap();
        assert_eq!(p.remove_redundant().unwrap().num_rows(), 2);
        let q = Polytope::from_rows(vec![vec![1.0], vec![1.0], vec![-1.0]], vec![1.0, 2.0, 0.0]).unwrap();
        let r = q.remove_redundant().unwrap();
        assert_eq!(r.num_rows(), 2);
        assert!(r.h().iter().all(|&x| x != 2.0));
    }

    #[test]
    fn scaling() {
        let sq = Polytope::cube(2, 1.0);
        assert_eq!(sq.scale_about_origin(1.0).unwrap(), sq);
        let half = sq.scale_about_origin(0.5).unwrap();
        assert_eq!(half, Polytope::cube(2, 0.5));
        let g = sq.scale_about_origin(0.89).unwrap();
        for i in 0..4 {
            assert_eq!(g.h()[i], 0.89 * sq.h()[i]);
        }
    }

    #[test]
    fn coverage() {
        let sq = Polytope::cube(2, 1.0);
        let left = Polytope::from_box(&v(&[-1.0, -1.0]), &v(&[0.0, 1.0]));
        let right = Polytope::from_box(&v(&[0.0, -1.0]), &v(&[1.0, 1.0]));
        assert!(sq.uncovered_point(&[left.clone(), right], 1e-7).unwrap().is_none());
        let gap = Polytope::from_box(&v(&[0.1, -1.0]), &v(&[1.0, 1.0]));
        let x = sq.uncovered_point(&[left, gap], 1e-7).unwrap().unwrap();
        assert!(x[0] > 0.0 && x[0] < 0.1);
    }

    #[test]
    fn json_roundtrip() {
        let p = Polytope::cube(2, 1.0);
        let s = serde_json::to_string(&p).unwrap();
        assert!(s.contains("\"F\""));
        let q: Polytope = serde_json::from_str(&s).unwrap();
        assert_eq!(p, q);
        assert!(serde_json::from_str::<Polytope>(r#"{"F": [[1.0]], "h": [1.0, 2.0]}"#).is_err());
    }
}
