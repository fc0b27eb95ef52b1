//! Localization set of Lyapunov parameters and its analytic center.
//!
//! Parameters live in `{P | 0 ⪯ P ⪯ I, ⟨D_j, P⟩ ≤ c_j}`. The center minimizes
//! `φ(P) = −Σ log(c_j − ⟨D_j,P⟩) − log det P − log det(I − P)` and is found by
//! damped Newton in an orthonormal basis of symmetric matrices.

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::dynamics::ClosedLoop;
use crate::error::{dim_err, Error, Result};

/// Margin used by the feasibility search.
pub const PHASE_ONE_DELTA: f64 = 1e-6;
pub const PHASE_ONE_SWEEPS: usize = 10_000;
const NEWTON_DECREMENT_TOL: f64 = 1e-8;
const GRADIENT_TOL: f64 = 1e-6;
const NEWTON_CAP: usize = 500;
const ZERO_CUT: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CandidateKind {
    Quadratic,
    Pwq,
}

impl CandidateKind {
    /// Size of `P` for an `n`-dimensional state.
    pub fn param_dim(self, n: usize) -> usize {
        match self {
            CandidateKind::Quadratic => n,
            CandidateKind::Pwq => 2 * n,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CutMode {
    /// `c = 0`.
    Strict,
    /// `c = ⟨D, P_current⟩`: the cut passes through the current center.
    Relaxed,
}

#[derive(Clone, Debug)]
pub struct Cut {
    /// Symmetric with unit Frobenius norm.
    pub d: DMatrix<f64>,
    pub c: f64,
    pub source: DVector<f64>,
    /// Frobenius norm before normalization.
    pub scale: f64,
}

impl Cut {
    pub fn slack(&self, p: &DMatrix<f64>) -> f64 {
        self.c - inner(&self.d, p)
    }
}

#[derive(Clone, Debug)]
pub struct CandidateParam {
    pub p: DMatrix<f64>,
    pub kind: CandidateKind,
}

#[derive(Clone, Debug)]
pub struct LocalizationSet {
    dim: usize,
    cuts: Vec<Cut>,
}

#[derive(Clone, Debug)]
pub enum CenterOutcome {
    Center {
        p: DMatrix<f64>,
        newton_steps: usize,
        decrement: f64,
        gradient_norm: f64,
    },
    Infeasible,
}

#[derive(Clone, Debug)]
pub enum PhaseOne {
    Found(DMatrix<f64>),
    NotFound,
}

pub fn inner(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.dot(b)
}

fn sym(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Orthonormal coordinates of a symmetric matrix: diagonal, then `√2·m_ij` for `i < j`.
pub fn svec(m: &DMatrix<f64>) -> DVector<f64> {
    let n = m.nrows();
    let mut v = DVector::zeros(n * (n + 1) / 2);
    let mut k = 0;
    for i in 0..n {
        v[k] = m[(i, i)];
        k += 1;
    }
    for i in 0..n {
        for j in i + 1..n {
            v[k] = std::f64::consts::SQRT_2 * 0.5 * (m[(i, j)] + m[(j, i)]);
            k += 1;
        }
    }
    v
}

pub fn smat(v: &DVector<f64>, n: usize) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(n, n);
    let mut k = 0;
    for i in 0..n {
        m[(i, i)] = v[k];
        k += 1;
    }
    for i in 0..n {
        for j in i + 1..n {
            let x = v[k] / std::f64::consts::SQRT_2;
            m[(i, j)] = x;
            m[(j, i)] = x;
            k += 1;
        }
    }
    m
}

/// Cut from a counterexample `x*`.
///
/// Quadratic: `D = f fᵀ − x xᵀ`. Piecewise quadratic: `D = v₁v₁ᵀ − v₀v₀ᵀ` with
/// `v₀ = (x, f(x))`, `v₁ = (f(x), f²(x))`.
pub fn make_cut(
    x_star: &DVector<f64>,
    cl: &ClosedLoop,
    kind: CandidateKind,
    mode: CutMode,
    p_current: Option<&DMatrix<f64>>,
) -> Result<Cut> {
    if x_star.amax() == 0.0 {
        return Err(Error::InvalidInput("counterexample at the origin".into()));
    }
    let x1 = cl.step(x_star)?;
    let (v0, v1) = match kind {
        CandidateKind::Quadratic => (x_star.clone(), x1),
        CandidateKind::Pwq => {
            let x2 = cl.step(&x1)?;
            (concat(x_star, &x1), concat(&x1, &x2))
        }
    };
    let raw = &v1 * v1.transpose() - &v0 * v0.transpose();
    let scale = raw.norm();
    if scale < ZERO_CUT {
        return Err(Error::ZeroCut(x_star.iter().copied().collect()));
    }
    let d = raw / scale;
    let c = match mode {
        CutMode::Strict => 0.0,
        CutMode::Relaxed => {
            let p = p_current.ok_or_else(|| Error::InvalidInput("relaxed cut needs the current center".into()))?;
            if p.shape() != d.shape() {
                return Err(dim_err("current center has the wrong size"));
            }
            inner(&d, p)
        }
    };
    Ok(Cut {
        d,
        c,
        source: x_star.clone(),
        scale,
    })
}

fn concat(a: &DVector<f64>, b: &DVector<f64>) -> DVector<f64> {
    DVector::from_iterator(a.len() + b.len(), a.iter().chain(b.iter()).copied())
}

/// `(P⁻¹, (I−P)⁻¹)` if `0 ≺ P ≺ I`.
fn barrier_inverses(p: &DMatrix<f64>) -> Option<(DMatrix<f64>, DMatrix<f64>, f64)> {
    let n = p.nrows();
    let c1 = Cholesky::new(p.clone())?;
    let c2 = Cholesky::new(DMatrix::identity(n, n) - p)?;
    let logdet = 2.0 * (c1.l_dirty().diagonal().map(f64::ln).sum() + c2.l_dirty().diagonal().map(f64::ln).sum());
    Some((c1.inverse(), c2.inverse(), logdet))
}

impl LocalizationSet {
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(dim_err("localization set needs a positive dimension"));
        }
        Ok(LocalizationSet { dim, cuts: Vec::new() })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn cuts(&self) -> &[Cut] {
        &self.cuts
    }

    pub fn push(&mut self, cut: Cut) -> Result<()> {
        if cut.d.nrows() != self.dim || cut.d.ncols() != self.dim {
            return Err(dim_err(format!("cut of size {} in a set of size {}", cut.d.nrows(), self.dim)));
        }
        self.cuts.push(cut);
        Ok(())
    }

    /// Smallest cut slack and eigenvalue margin; positive iff `P` is strictly inside.
    pub fn margin(&self, p: &DMatrix<f64>) -> f64 {
        let eig = SymmetricEigen::new(sym(p)).eigenvalues;
        let mut m = eig.min().min(1.0 - eig.max());
        for cut in &self.cuts {
            m = m.min(cut.slack(p));
        }
        m
    }

    pub fn is_strictly_feasible(&self, p: &DMatrix<f64>) -> bool {
        self.margin(p) > 0.0
    }

    pub fn potential_value(&self, p: &DMatrix<f64>) -> Result<f64> {
        if p.nrows() != self.dim || p.ncols() != self.dim {
            return Err(dim_err("P has the wrong size"));
        }
        let (_, _, logdet) = barrier_inverses(&sym(p))
            .ok_or_else(|| Error::DomainError("P is not strictly between 0 and I".into()))?;
        let mut phi = -logdet;
        for (j, cut) in self.cuts.iter().enumerate() {
            let s = cut.slack(p);
            if !(s > 0.0) {
                return Err(Error::DomainError(format!("cut {j} has slack {s}")));
            }
            phi -= s.ln();
        }
        Ok(phi)
    }

    /// Gradient of the potential as a symmetric matrix.
    pub fn potential_gradient(&self, p: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let (pi, qi, _) = barrier_inverses(&sym(p))
            .ok_or_else(|| Error::DomainError("P is not strictly between 0 and I".into()))?;
        let mut g = qi - pi;
        for cut in &self.cuts {
            let s = cut.slack(p);
            if !(s > 0.0) {
                return Err(Error::DomainError("cut slack is not positive".into()));
            }
            g += &cut.d / s;
        }
        Ok(sym(&g))
    }

    /// Alternating projections onto the shrunken spectral box and each shifted cut.
    pub fn phase_one(&self) -> PhaseOne {
        self.phase_one_from(None)
    }

    fn phase_one_from(&self, start: Option<&DMatrix<f64>>) -> PhaseOne {
        let n = self.dim;
        let half = DMatrix::identity(n, n) * 0.5;
        if self.cuts.is_empty() {
            return PhaseOne::Found(half);
        }
        let delta = PHASE_ONE_DELTA;
        let mut p = start.cloned().unwrap_or(half);
        for _ in 0..PHASE_ONE_SWEEPS {
            for cut in &self.cuts {
                let excess = inner(&cut.d, &p) - (cut.c - delta);
                if excess > 0.0 {
                    p -= &cut.d * excess;
                }
            }
            p = clamp_spectrum(&p, delta, 1.0 - delta);
            let ok = self.cuts.iter().all(|c| c.slack(&p) >= 0.5 * delta);
            if ok {
                return PhaseOne::Found(p);
            }
        }
        PhaseOne::NotFound
    }

    /// Analytic center by damped Newton; `warm_start` is typically the previous center.
    pub fn analytic_center(&self, warm_start: Option<&DMatrix<f64>>) -> Result<CenterOutcome> {
        let n = self.dim;
        if self.cuts.is_empty() {
            return Ok(CenterOutcome::Center {
                p: DMatrix::identity(n, n) * 0.5,
                newton_steps: 0,
                decrement: 0.0,
                gradient_norm: 0.0,
            });
        }
        if let Some(w) = warm_start {
            if w.shape() != (n, n) {
                return Err(dim_err("warm start has the wrong size"));
            }
        }
        let start = match warm_start.and_then(|w| self.warm_point(w)) {
            Some(p) => p,
            None => match self.phase_one() {
                PhaseOne::Found(p) => p,
                PhaseOne::NotFound => return Ok(CenterOutcome::Infeasible),
            },
        };
        self.newton(start)
    }

    /// Moves the warm start against the newest cut until it is strictly inside.
    fn warm_point(&self, w: &DMatrix<f64>) -> Option<DMatrix<f64>> {
        let w = sym(w);
        if self.is_strictly_feasible(&w) {
            return Some(w);
        }
        let last = self.cuts.last()?;
        // cut slacks are affine in σ along P(σ) = W − σD
        let (mut lo, mut hi) = (0.0f64, f64::INFINITY);
        for cut in &self.cuts {
            let s0 = cut.slack(&w);
            let rate = inner(&cut.d, &last.d);
            if rate.abs() < 1e-15 {
                if s0 <= 0.0 {
                    return None;
                }
            } else if rate > 0.0 {
                lo = lo.max(-s0 / rate);
            } else {
                hi = hi.min(-s0 / rate);
            }
        }
        // the spectral box allows at most σ ≤ 1 for a unit-norm D
        hi = hi.min(1.0);
        if !(hi > lo) {
            return None;
        }
        let mut best: Option<(f64, DMatrix<f64>)> = None;
        for k in 1..40 {
            let sigma = lo + (hi - lo) * k as f64 / 40.0;
            let p = &w - &last.d * sigma;
            let m = self.margin(&p);
            if m > 0.0 && best.as_ref().is_none_or(|(bm, _)| m > *bm) {
                best = Some((m, p));
            }
        }
        best.map(|(_, p)| p)
    }

    fn newton(&self, mut p: DMatrix<f64>) -> Result<CenterOutcome> {
        let n = self.dim;
        let mut phi = self.potential_value(&p)?;
        let mut steps = 0;
        let mut stalls = 0;
        loop {
            let (g, h) = self.derivatives(&p)?;
            let gnorm = g.norm();
            let chol = Cholesky::new(h.clone())
                .ok_or_else(|| Error::NumericalFailure("potential Hessian is not positive definite".into()))?;
            let dir = -chol.solve(&g);
            let decrement = -g.dot(&dir);
            if (decrement <= NEWTON_DECREMENT_TOL && gnorm <= GRADIENT_TOL) || stalls >= 3 {
                return Ok(CenterOutcome::Center {
                    p,
                    newton_steps: steps,
                    decrement,
                    gradient_norm: gnorm,
                });
            }
            if steps >= NEWTON_CAP {
                return Err(Error::NumericalFailure(format!(
                    "Newton did not converge: decrement {decrement:e}, gradient {gnorm:e}"
                )));
            }
            let step = smat(&dir, n);
            // inside the quadratic-convergence region the full step stays strictly
            // feasible (self-concordance), and φ is too flat to line-search on
            if decrement < 0.25 {
                let cand = sym(&(&p + &step));
                if let Ok(v) = self.potential_value(&cand) {
                    // below this φ carries no information; the gradient is rounding noise
                    if cand == p || decrement < f64::EPSILON * phi.abs().max(1.0) {
                        stalls += 1;
                    }
                    p = cand;
                    phi = v;
                    steps += 1;
                    continue;
                }
            }
            let mut t = 1.0 / (1.0 + decrement.sqrt());
            let mut accepted = false;
            for _ in 0..60 {
                let cand = sym(&(&p + &step * t));
                if let Ok(v) = self.potential_value(&cand) {
                    if v <= phi - 0.25 * t * decrement || (v <= phi && decrement < 1e-12) {
                        p = cand;
                        phi = v;
                        accepted = true;
                        break;
                    }
                }
                t *= 0.5;
            }
            if !accepted {
                // rounding floor: φ cannot be decreased any further
                if decrement < 1e-10 {
                    stalls += 1;
                    continue;
                }
                return Err(Error::NumericalFailure("line search could not keep P strictly feasible".into()));
            }
            steps += 1;
        }
    }

    /// Gradient and Hessian of φ in `svec` coordinates.
    fn derivatives(&self, p: &DMatrix<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let n = self.dim;
        let m = n * (n + 1) / 2;
        let (pi, qi, _) = barrier_inverses(p).ok_or_else(|| Error::DomainError("P left the spectral box".into()))?;
        let g = svec(&self.potential_gradient(p)?);
        let mut h = DMatrix::zeros(m, m);
        let mut e = DVector::zeros(m);
        for k in 0..m {
            e.fill(0.0);
            e[k] = 1.0;
            let ek = smat(&e, n);
            let col = svec(&(&pi * &ek * &pi + &qi * &ek * &qi));
            h.set_column(k, &col);
        }
        for cut in &self.cuts {
            let d = svec(&cut.d);
            let s = cut.slack(p);
            h += &d * d.transpose() / (s * s);
        }
        Ok((g, sym(&h)))
    }
}

fn clamp_spectrum(p: &DMatrix<f64>, lo: f64, hi: f64) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(sym(p));
    let vals = eig.eigenvalues.map(|v| v.clamp(lo, hi));
    let v = &eig.eigenvectors;
    sym(&(v * DMatrix::from_diagonal(&vals) * v.transpose()))
}
