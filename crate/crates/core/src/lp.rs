//! Dense two-phase tableau simplex.
//!
//! Problems are `maximize cᵀx s.t. Fx ≤ h, Ax = b` with `x` free. Free variables
//! are split as `x = p − q`; inequality rows get slacks and rows with a negative
//! right-hand side are flipped and given an artificial variable.

use std::cell::Cell;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::geometry::Polytope;

/// Feasibility tolerance shared by every LP-based decision.
pub const TAU_LP: f64 = 1e-8;

const PIVOT_TOL: f64 = 1e-11;
const COST_TOL: f64 = 1e-10;
const DEGENERATE_RUN: usize = 30;

thread_local! {
    static CALLS: Cell<usize> = const { Cell::new(0) };
}

/// Number of LPs solved on the current thread so far.
pub fn call_count() -> usize {
    CALLS.with(|c| c.get())
}

#[derive(Clone, Debug)]
pub struct LpProblem {
    pub objective: DVector<f64>,
    pub constraints: Polytope,
    pub equalities: Option<(DMatrix<f64>, DVector<f64>)>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LpStatus {
    Optimal,
    Infeasible,
    Unbounded,
}

#[derive(Clone, Debug)]
pub struct LpSolution {
    pub status: LpStatus,
    pub x: DVector<f64>,
    pub value: f64,
    /// Multipliers of the inequality rows (nonnegative at an optimum).
    pub dual_ineq: DVector<f64>,
    /// Multipliers of the equality rows.
    pub dual_eq: DVector<f64>,
    /// `yᵀh + wᵀb`, an upper bound on the primal value when the duals are feasible.
    pub dual_bound: f64,
    /// `‖Fᵀy + Aᵀw − c‖∞`.
    pub dual_residual: f64,
    pub pivots: usize,
}

impl LpSolution {
    pub fn is_optimal(&self) -> bool {
        self.status == LpStatus::Optimal
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LpOptions {
    pub max_pivots: usize,
    pub feasibility_tol: f64,
}

impl Default for LpOptions {
    fn default() -> Self {
        LpOptions {
            max_pivots: 50_000,
            feasibility_tol: TAU_LP,
        }
    }
}

pub fn solve_lp(p: &LpProblem) -> Result<LpSolution> {
    solve_lp_with(p, &LpOptions::default())
}

pub fn solve_lp_with(p: &LpProblem, opts: &LpOptions) -> Result<LpSolution> {
    CALLS.with(|c| c.set(c.get() + 1));
    let n = p.constraints.dim();
    if p.objective.len() != n {
        return Err(crate::error::dim_err(format!(
            "objective has length {}, constraints have dimension {n}",
            p.objective.len()
        )));
    }
    if let Some((a, b)) = &p.equalities {
        if a.ncols() != n || a.nrows() != b.len() {
            return Err(crate::error::dim_err("equality block shape"));
        }
    }
    if !p.objective.iter().all(|v| v.is_finite()) {
        return Err(Error::InvalidInput("non-finite objective".into()));
    }
    Simplex::build(p, opts)?.run(p, opts)
}

/// A constraint row after normalization, remembering how to map its dual back.
struct RowInfo {
    /// index into the original inequality (false) or equality (true) block
    source: usize,
    equality: bool,
    /// scale applied: stored row = original * scale (scale may be negative when flipped)
    scale: f64,
    slack: Option<usize>,
    artificial: Option<usize>,
}

struct Simplex {
    n: usize,
    ncols: usize,
    art_start: usize,
    rows: Vec<RowInfo>,
    // row-major, each row has ncols + 1 entries (last one is the rhs)
    t: Vec<f64>,
    obj: Vec<f64>,
    basis: Vec<usize>,
    pivots: usize,
    trivially_infeasible: bool,
    m_ineq: usize,
    m_eq: usize,
}

impl Simplex {
    fn build(p: &LpProblem, opts: &LpOptions) -> Result<Self> {
        let n = p.constraints.dim();
        let f = p.constraints.f();
        let h = p.constraints.h();
        let m_ineq = f.nrows();
        let m_eq = p.equalities.as_ref().map_or(0, |(a, _)| a.nrows());

        let mut trivially_infeasible = false;
        let mut kept: Vec<(Vec<f64>, f64, RowInfo)> = Vec::new();
        let mut push_row = |row: Vec<f64>, rhs: f64, source: usize, equality: bool| -> Result<()> {
            if !row.iter().all(|v| v.is_finite()) || !rhs.is_finite() {
                return Err(Error::InvalidInput(format!("non-finite constraint row {source}")));
            }
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm < 1e-14 {
                let bad = if equality {
                    rhs.abs() > opts.feasibility_tol
                } else {
                    rhs < -opts.feasibility_tol
                };
                if bad {
                    trivially_infeasible = true;
                }
                return Ok(());
            }
            let mut scale = 1.0 / norm;
            if rhs * scale < 0.0 {
                scale = -scale;
            }
            let row: Vec<f64> = row.iter().map(|v| v * scale).collect();
            kept.push((
                row,
                rhs * scale,
                RowInfo {
                    source,
                    equality,
                    scale,
                    slack: None,
                    artificial: None,
                },
            ));
            Ok(())
        };
        for i in 0..m_ineq {
            push_row(f.row(i).iter().copied().collect(), h[i], i, false)?;
        }
        if let Some((a, b)) = &p.equalities {
            for i in 0..a.nrows() {
                push_row(a.row(i).iter().copied().collect(), b[i], i, true)?;
            }
        }

        let m = kept.len();
        let n_slack = kept.iter().filter(|(_, _, r)| !r.equality).count();
        // a flipped inequality has slack coefficient -1 and needs an artificial
        let n_art = kept
            .iter()
            .filter(|(_, _, r)| r.equality || r.scale < 0.0)
            .count();
        let art_start = 2 * n + n_slack;
        let ncols = art_start + n_art;
        let width = ncols + 1;
        let mut t = vec![0.0; m * width];
        let mut basis = vec![0usize; m];
        let mut next_slack = 2 * n;
        let mut next_art = art_start;
        let mut rows = Vec::with_capacity(m);
        for (r, (row, rhs, mut info)) in kept.into_iter().enumerate() {
            let base = r * width;
            for j in 0..n {
                t[base + j] = row[j];
                t[base + n + j] = -row[j];
            }
            t[base + ncols] = rhs;
            if !info.equality {
                let s = next_slack;
                next_slack += 1;
                t[base + s] = info.scale.signum();
                info.slack = Some(s);
                if info.scale > 0.0 {
                    basis[r] = s;
                }
            }
            if info.equality || info.scale < 0.0 {
                let a = next_art;
                next_art += 1;
                t[base + a] = 1.0;
                info.artificial = Some(a);
                basis[r] = a;
            }
            rows.push(info);
        }
        Ok(Simplex {
            n,
            ncols,
            art_start,
            rows,
            t,
            obj: vec![0.0; width],
            basis,
            pivots: 0,
            trivially_infeasible,
            m_ineq,
            m_eq,
        })
    }

    #[inline]
    fn width(&self) -> usize {
        self.ncols + 1
    }

    fn set_objective(&mut self, cost: &[f64]) {
        let w = self.width();
        for j in 0..w {
            self.obj[j] = if j < self.ncols { cost[j] } else { 0.0 };
        }
        for (r, &b) in self.basis.iter().enumerate() {
            let cb = cost[b];
            if cb != 0.0 {
                let base = r * w;
                for j in 0..w {
                    self.obj[j] -= cb * self.t[base + j];
                }
            }
        }
    }

    fn pivot(&mut self, r: usize, j: usize) {
        let w = self.width();
        let base = r * w;
        let piv = self.t[base + j];
        for k in 0..w {
            self.t[base + k] /= piv;
        }
        self.t[base + j] = 1.0;
        let prow: Vec<f64> = self.t[base..base + w].to_vec();
        let m = self.rows.len();
        for i in 0..m {
            if i == r {
                continue;
            }
            let bi = i * w;
            let factor = self.t[bi + j];
            if factor != 0.0 {
                for k in 0..w {
                    self.t[bi + k] -= factor * prow[k];
                }
                self.t[bi + j] = 0.0;
                if self.t[bi + w - 1] < 0.0 && self.t[bi + w - 1] > -1e-13 {
                    self.t[bi + w - 1] = 0.0;
                }
            }
        }
        let factor = self.obj[j];
        if factor != 0.0 {
            for k in 0..w {
                self.obj[k] -= factor * prow[k];
            }
            self.obj[j] = 0.0;
        }
        self.basis[r] = j;
        self.pivots += 1;
    }

    /// Runs primal simplex on the current objective row; returns false on unboundedness.
    fn iterate(&mut self, allowed: usize, opts: &LpOptions) -> Result<bool> {
        let w = self.width();
        let m = self.rows.len();
        let mut degenerate = 0usize;
        let mut bland = false;
        loop {
            if self.pivots >= opts.max_pivots {
                return Err(Error::IterationCapExceeded(opts.max_pivots));
            }
            let mut enter = None;
            let mut best = COST_TOL;
            for j in 0..allowed {
                let rc = self.obj[j];
                if rc > best {
                    enter = Some(j);
                    if bland {
                        break;
                    }
                    best = rc;
                }
            }
            let Some(j) = enter else { return Ok(true) };

            let mut leave: Option<(usize, f64, f64)> = None;
            for i in 0..m {
                let a = self.t[i * w + j];
                if a > PIVOT_TOL {
                    let ratio = self.t[i * w + w - 1].max(0.0) / a;
                    let better = match leave {
                        None => true,
                        Some((li, lr, la)) => {
                            if ratio < lr - 1e-12 {
                                true
                            } else if ratio <= lr + 1e-12 {
                                if bland {
                                    self.basis[i] < self.basis[li]
                                } else {
                                    a > la
                                }
                            } else {
                                false
                            }
                        }
                    };
                    if better {
                        leave = Some((i, ratio, a));
                    }
                }
            }
            let Some((r, ratio, _)) = leave else { return Ok(false) };
            if ratio < 1e-12 {
                degenerate += 1;
                if degenerate > DEGENERATE_RUN {
                    bland = true;
                }
            } else {
                degenerate = 0;
            }
            self.pivot(r, j);
        }
    }

    fn value_of(&self, col: usize) -> f64 {
        let w = self.width();
        self.basis
            .iter()
            .position(|&b| b == col)
            .map_or(0.0, |r| self.t[r * w + w - 1])
    }

    fn run(mut self, p: &LpProblem, opts: &LpOptions) -> Result<LpSolution> {
        let n = self.n;
        if self.trivially_infeasible {
            return Ok(self.infeasible());
        }
        let w = self.width();
        let m = self.rows.len();
        if self.ncols > self.art_start {
            let mut cost = vec![0.0; self.ncols];
            for c in cost.iter_mut().skip(self.art_start) {
                *c = -1.0;
            }
            self.set_objective(&cost);
            self.iterate(self.ncols, opts)?;
            let infeas = self.obj[w - 1];
            if infeas > opts.feasibility_tol {
                return Ok(self.infeasible());
            }
            // drive remaining artificials out of the basis
            for r in 0..m {
                if self.basis[r] < self.art_start {
                    continue;
                }
                let base = r * w;
                let mut best: Option<(usize, f64)> = None;
                for j in 0..self.art_start {
                    let a = self.t[base + j].abs();
                    if a > 1e-9 && best.is_none_or(|(_, b)| a > b) {
                        best = Some((j, a));
                    }
                }
                if let Some((j, _)) = best {
                    self.pivot(r, j);
                }
                // otherwise the row is redundant; its artificial stays basic at zero
                // and can never re-enter since artificials are barred in phase 2.
            }
        }

        let scale = p.objective.amax().max(1e-300);
        let mut cost = vec![0.0; self.ncols];
        for j in 0..n {
            cost[j] = p.objective[j] / scale;
            cost[n + j] = -p.objective[j] / scale;
        }
        self.set_objective(&cost);
        let bounded = self.iterate(self.art_start, opts)?;

        let mut x = DVector::zeros(n);
        for j in 0..n {
            x[j] = self.value_of(j) - self.value_of(n + j);
        }
        let value = p.objective.dot(&x);
        if !bounded {
            return Ok(LpSolution {
                status: LpStatus::Unbounded,
                x,
                value: f64::INFINITY,
                dual_ineq: DVector::zeros(self.m_ineq),
                dual_eq: DVector::zeros(self.m_eq),
                dual_bound: f64::INFINITY,
                dual_residual: f64::NAN,
                pivots: self.pivots,
            });
        }

        // duals from the final objective row: obj[s_i] = -y_i (scaled row), and for
        // artificial columns obj[a_r] = -w_r in the scaled system.
        let mut dual_ineq = DVector::zeros(self.m_ineq);
        let mut dual_eq = DVector::zeros(self.m_eq);
        for info in &self.rows {
            let y_scaled = if let Some(s) = info.slack.filter(|_| info.scale > 0.0) {
                -self.obj[s]
            } else if let Some(a) = info.artificial {
                -self.obj[a]
            } else {
                0.0
            };
            let y = y_scaled * info.scale * scale;
            if info.equality {
                dual_eq[info.source] = y;
            } else {
                dual_ineq[info.source] = y;
            }
        }
        let f = p.constraints.f();
        let h = p.constraints.h();
        let mut grad = f.transpose() * &dual_ineq;
        let mut dual_bound = dual_ineq.dot(h);
        if let Some((a, b)) = &p.equalities {
            grad += a.transpose() * &dual_eq;
            dual_bound += dual_eq.dot(b);
        }
        let dual_residual = (grad - &p.objective).amax();
        Ok(LpSolution {
            status: LpStatus::Optimal,
            x,
            value,
            dual_ineq,
            dual_eq,
            dual_bound,
            dual_residual,
            pivots: self.pivots,
        })
    }

    fn infeasible(&self) -> LpSolution {
        LpSolution {
            status: LpStatus::Infeasible,
            x: DVector::zeros(self.n),
            value: f64::NEG_INFINITY,
            dual_ineq: DVector::zeros(self.m_ineq),
            dual_eq: DVector::zeros(self.m_eq),
            dual_bound: f64::NAN,
            dual_residual: f64::NAN,
            pivots: self.pivots,
        }
    }
}
