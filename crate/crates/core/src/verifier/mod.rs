//! Exact counterexample search.
//!
//! The region is partitioned once by the closed loop's discrete structure (see
//! [`tree`]); every leaf turns the objective into a quadratic in `x⁰` that is
//! maximized exactly over the leaf's faces. Leaves are visited best-first by an
//! interval upper bound and pruned against the incumbent.

pub mod oracle;
pub mod projection;
pub mod tree;

use std::sync::atomic::{AtomicU64, Ordering as AtomicOrdering};
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{ClosedLoop, ControllerSpec};
use crate::error::{dim_err, Error, Result};
use crate::geometry::Polytope;
use crate::qp_exact::{extremize_on_faces, Best, QuadraticForm, Sense};

pub use oracle::{grid_oracle, GridOracle};
pub use projection::{project_onto, solve_projection_qp, Projection};
pub use tree::{build_partition, Affine, Leaf, Partition, PartitionSpec, StepDecision};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerifierStatus {
    Certified,
    Counterexample,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct VerifierStats {
    pub nodes: usize,
    /// Leaves whose quadratic was solved exactly.
    pub leaves: usize,
    pub total_leaves: usize,
    pub pruned: usize,
    pub lp_calls: usize,
    pub singular_kkt: usize,
    pub time_s: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct VerifierResult {
    pub status: VerifierStatus,
    #[serde(with = "crate::serde_util::opt_vector")]
    pub x_star: Option<DVector<f64>>,
    /// Global maximum of the objective; `-inf` when the searched region is empty.
    pub p_star: f64,
    pub stats: VerifierStats,
}

impl VerifierResult {
    /// `{"status", "p_star", "x_star", "nodes", "leaves", "time_s"}`.
    pub fn summary_json(&self) -> serde_json::Value {
        serde_json::json!({
            "status": self.status,
            "p_star": if self.p_star.is_finite() { serde_json::json!(self.p_star) } else { serde_json::Value::Null },
            "x_star": self.x_star.as_ref().map(|x| x.as_slice().to_vec()),
            "nodes": self.stats.nodes,
            "leaves": self.stats.leaves,
            "time_s": self.stats.time_s,
        })
    }
}

/// What a leaf maximizes, in terms of the states `x⁰, x¹, x²` along the horizon.
#[derive(Clone, Debug)]
pub enum Objective {
    /// `V(x¹) − V(x⁰)` with `V(z) = zᵀPz`.
    Decrease(DMatrix<f64>),
    /// `V(x¹, x²) − V(x⁰, x¹)` with `V(v) = vᵀPv`, `P` of size `2n`.
    PwqDecrease(DMatrix<f64>),
    /// `V(x⁰, x¹)`.
    PwqValue(DMatrix<f64>),
    /// `cᵀx¹ − d`.
    Linear(DVector<f64>, f64),
}

impl Objective {
    fn steps_needed(&self) -> usize {
        match self {
            Objective::PwqDecrease(_) => 2,
            _ => 1,
        }
    }

    fn check(&self, n: usize) -> Result<()> {
        let want = match self {
            Objective::Decrease(p) => (p.nrows(), p.ncols(), n),
            Objective::PwqDecrease(p) | Objective::PwqValue(p) => (p.nrows(), p.ncols(), 2 * n),
            Objective::Linear(c, _) => (c.len(), c.len(), n),
        };
        if want.0 != want.2 || want.1 != want.2 {
            return Err(dim_err(format!("objective has size {}×{}, expected {}", want.0, want.1, want.2)));
        }
        Ok(())
    }

    /// The objective on a leaf as a quadratic in `x⁰`.
    pub fn leaf_form(&self, leaf: &Leaf) -> QuadraticForm {
        match self {
            Objective::Decrease(p) => {
                let x1 = &leaf.states[1];
                QuadraticForm::lyapunov_difference(p, &x1.mat, &x1.off)
            }
            Objective::PwqDecrease(p) => {
                let v0 = stack(&leaf.states[0], &leaf.states[1]);
                let v1 = stack(&leaf.states[1], &leaf.states[2]);
                difference(p, &v1, &v0)
            }
            Objective::PwqValue(p) => {
                let v0 = stack(&leaf.states[0], &leaf.states[1]);
                let n = p.nrows();
                QuadraticForm::new(p.clone(), DVector::zeros(n), 0.0)
                    .expect("square")
                    .compose(&v0.mat, &v0.off)
            }
            Objective::Linear(c, d) => {
                let x1 = &leaf.states[1];
                QuadraticForm::linear(x1.mat.transpose() * c, c.dot(&x1.off) - d)
            }
        }
    }

    /// Direct evaluation by simulating the closed loop.
    pub fn evaluate(&self, cl: &ClosedLoop, x: &DVector<f64>) -> Result<f64> {
        let x1 = cl.step(x)?;
        Ok(match self {
            Objective::Decrease(p) => (p * &x1).dot(&x1) - (p * x).dot(x),
            Objective::PwqDecrease(p) => {
                let x2 = cl.step(&x1)?;
                let v0 = concat(x, &x1);
                let v1 = concat(&x1, &x2);
                (p * &v1).dot(&v1) - (p * &v0).dot(&v0)
            }
            Objective::PwqValue(p) => {
                let v0 = concat(x, &x1);
                (p * &v0).dot(&v0)
            }
            Objective::Linear(c, d) => c.dot(&x1) - d,
        })
    }
}

fn concat(a: &DVector<f64>, b: &DVector<f64>) -> DVector<f64> {
    DVector::from_iterator(a.len() + b.len(), a.iter().chain(b.iter()).copied())
}

fn stack(top: &Affine, bottom: &Affine) -> Affine {
    let n = top.mat.ncols();
    let (a, b) = (top.mat.nrows(), bottom.mat.nrows());
    let mut mat = DMatrix::zeros(a + b, n);
    mat.rows_mut(0, a).copy_from(&top.mat);
    mat.rows_mut(a, b).copy_from(&bottom.mat);
    Affine {
        mat,
        off: concat(&top.off, &bottom.off),
    }
}

fn difference(p: &DMatrix<f64>, v1: &Affine, v0: &Affine) -> QuadraticForm {
    let base = QuadraticForm::new(p.clone(), DVector::zeros(p.nrows()), 0.0).expect("square");
    let f1 = base.compose(&v1.mat, &v1.off);
    let f0 = base.compose(&v0.mat, &v0.off);
    QuadraticForm::new(f1.quad() - f0.quad(), f1.lin() - f0.lin(), f1.constant() - f0.constant()).expect("same size")
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct VerifyOptions {
    /// Skip leaves whose interval bound is below the incumbent.
    pub prune: bool,
    /// Stop at the first leaf with a nonnegative optimum.
    pub early_exit: bool,
    pub parallel: bool,
    pub seed: u64,
    /// Random points evaluated before the search to seed the incumbent.
    pub incumbent_samples: usize,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        VerifyOptions {
            prune: true,
            early_exit: false,
            parallel: false,
            seed: 0,
            incumbent_samples: 100,
        }
    }
}

/// A partition of `roi ∖ B_ε` bound to one closed loop, reusable across objectives.
#[derive(Clone, Debug)]
pub struct Verifier {
    cl: ClosedLoop,
    region: Polytope,
    epsilon: Option<f64>,
    partition: Partition,
    build_time: f64,
}

impl Verifier {
    pub fn new(cl: &ClosedLoop, region: &Polytope, epsilon: Option<f64>, steps: usize, check_final_domain: bool) -> Result<Self> {
        if let Some(e) = epsilon {
            if !(e > 0.0) {
                return Err(Error::InvalidInput(format!("epsilon must be positive, got {e}")));
            }
        }
        let t0 = Instant::now();
        let partition = build_partition(
            cl,
            PartitionSpec {
                region,
                epsilon,
                steps,
                check_final_domain,
            },
        )?;
        Ok(Verifier {
            cl: cl.clone(),
            region: region.clone(),
            epsilon,
            partition,
            build_time: t0.elapsed().as_secs_f64(),
        })
    }

    pub fn partition(&self) -> &Partition {
        &self.partition
    }

    pub fn closed_loop(&self) -> &ClosedLoop {
        &self.cl
    }

    pub fn region(&self) -> &Polytope {
        &self.region
    }

    pub fn epsilon(&self) -> Option<f64> {
        self.epsilon
    }

    /// Exact global optimum of `objective` over the partitioned region.
    pub fn optimize(&self, objective: &Objective, sense: Sense, opts: &VerifyOptions) -> Result<VerifierResult> {
        objective.check(self.cl.state_dim())?;
        if objective.steps_needed() > self.partition.steps {
            return Err(Error::InvalidInput("partition horizon too short for this objective".into()));
        }
        let t0 = Instant::now();
        let sign = match sense {
            Sense::Max => 1.0,
            Sense::Min => -1.0,
        };
        let mut scored: Vec<(usize, QuadraticForm, f64)> = self
            .partition
            .leaves
            .iter()
            .enumerate()
            .map(|(i, leaf)| {
                let f = objective.leaf_form(leaf);
                let f = if sign > 0.0 { f } else { f.negated() };
                let ub = f.upper_bound_on_box(&leaf.bbox);
                (i, f, ub)
            })
            .collect();
        scored.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)));

        let incumbent = if opts.prune { self.initial_incumbent(objective, sign, opts)? } else { f64::NEG_INFINITY };
        let mut stats = VerifierStats {
            nodes: self.partition.nodes,
            total_leaves: self.partition.leaves.len(),
            lp_calls: self.partition.lp_calls,
            singular_kkt: self.partition.singular_kkt,
            ..Default::default()
        };
        let tol = |v: f64| 1e-9 * (1.0 + v.abs());
        let mut best = Best::new();
        if opts.parallel && !opts.early_exit {
            let shared = AtomicU64::new(incumbent.to_bits());
            let results: Vec<Option<(DVector<f64>, f64)>> = scored
                .par_iter()
                .map(|(i, f, ub)| {
                    let inc = f64::from_bits(shared.load(AtomicOrdering::Acquire));
                    if opts.prune && *ub < inc - tol(inc) {
                        return Ok(None);
                    }
                    let (x, v) = extremize_on_faces(f, &self.partition.leaves[*i].faces, Sense::Max)?;
                    raise(&shared, v);
                    Ok(Some((x, v)))
                })
                .collect::<Result<_>>()?;
            for r in results {
                match r {
                    Some((x, v)) => {
                        stats.leaves += 1;
                        best.offer(x, v);
                    }
                    None => stats.pruned += 1,
                }
            }
        } else {
            let mut inc = incumbent;
            for (pos, (i, f, ub)) in scored.iter().enumerate() {
                if opts.prune && *ub < inc.max(best.value) - tol(inc.max(best.value)) {
                    // leaves are sorted by bound, so the rest are dominated too
                    stats.pruned += scored.len() - pos;
                    break;
                }
                let (x, v) = extremize_on_faces(f, &self.partition.leaves[*i].faces, Sense::Max)?;
                stats.leaves += 1;
                inc = inc.max(v);
                best.offer(x, v);
                if opts.early_exit && v >= 0.0 {
                    stats.pruned += scored.len() - pos - 1;
                    break;
                }
            }
        }
        stats.time_s = t0.elapsed().as_secs_f64() + self.build_time;
        let p_star = if best.x.is_some() { sign * best.value } else { sign * f64::NEG_INFINITY };
        let status = if best.x.is_some() && p_star >= 0.0 {
            VerifierStatus::Counterexample
        } else {
            VerifierStatus::Certified
        };
        Ok(VerifierResult {
            status,
            x_star: best.x,
            p_star,
            stats,
        })
    }

    pub fn maximize(&self, objective: &Objective, opts: &VerifyOptions) -> Result<VerifierResult> {
        self.optimize(objective, Sense::Max, opts)
    }

    fn initial_incumbent(&self, objective: &Objective, sign: f64, opts: &VerifyOptions) -> Result<f64> {
        let mut pts: Vec<DVector<f64>> = Vec::new();
        let eps = self.epsilon.unwrap_or(0.0);
        let outside = |x: &DVector<f64>| x.amax() >= eps;
        if let Ok(lat) = self.region.enumerate_faces() {
            pts.extend(lat.vertices().into_iter().filter(|x| outside(x)));
        }
        if let Ok(b) = self.region.bounding_box() {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
            let mut tries = 0;
            let mut found = 0;
            while found < opts.incumbent_samples && tries < 50 * opts.incumbent_samples {
                tries += 1;
                let x = DVector::from_fn(b.dim(), |i, _| {
                    if b.upper[i] > b.lower[i] {
                        rng.gen_range(b.lower[i]..=b.upper[i])
                    } else {
                        b.lower[i]
                    }
                });
                if self.region.contains(&x, 0.0) && outside(&x) {
                    pts.push(x);
                    found += 1;
                }
            }
        }
        let mut inc = f64::NEG_INFINITY;
        for x in &pts {
            if let Ok(v) = objective.evaluate(&self.cl, x) {
                inc = inc.max(sign * v);
            }
        }
        // incumbents only prune; back them off by a hair to absorb rounding
        Ok(inc - 1e-9 * (1.0 + inc.abs()))
    }
}

/// Sizes the global thread pool used by parallel verification. Only the first call takes effect.
pub fn set_thread_count(n: usize) -> Result<()> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::InvalidInput(format!("thread pool: {e}")))
}

fn raise(cell: &AtomicU64, v: f64) {
    let mut cur = cell.load(AtomicOrdering::Acquire);
    while f64::from_bits(cur) < v {
        match cell.compare_exchange_weak(cur, v.to_bits(), AtomicOrdering::AcqRel, AtomicOrdering::Acquire) {
            Ok(_) => break,
            Err(actual) => cur = actual,
        }
    }
}

/// Exact maximum of `V(f_cl(x)) − V(x)` over `roi ∖ B_ε` for `V(x) = xᵀPx`.
pub fn verify_quadratic(cl: &ClosedLoop, p: &DMatrix<f64>, roi: &Polytope, epsilon: f64) -> Result<VerifierResult> {
    check_psd(p)?;
    Verifier::new(cl, roi, Some(epsilon), 1, true)?.maximize(&Objective::Decrease(p.clone()), &VerifyOptions::default())
}

/// Exact maximum of the two-step difference of `V(x, f_cl(x))` over `roi ∖ B_ε`.
pub fn verify_pwq(cl: &ClosedLoop, p: &DMatrix<f64>, roi: &Polytope, epsilon: f64) -> Result<VerifierResult> {
    check_psd(p)?;
    Verifier::new(cl, roi, Some(epsilon), 2, true)?.maximize(&Objective::PwqDecrease(p.clone()), &VerifyOptions::default())
}

/// As [`verify_quadratic`], for a loop closed through the state-dependent projection.
pub fn verify_projected(cl: &ClosedLoop, p: &DMatrix<f64>, roi: &Polytope, epsilon: f64) -> Result<VerifierResult> {
    if !matches!(cl.controller(), ControllerSpec::ProjectedStateDependent { .. }) {
        return Err(Error::InvalidInput("verify_projected needs a state-dependent projected controller".into()));
    }
    verify_quadratic(cl, p, roi, epsilon)
}

/// Exact maximum of `cᵀf_cl(x) − d` over `roi`.
pub fn verify_linear_objective(cl: &ClosedLoop, roi: &Polytope, c: &DVector<f64>, d: f64) -> Result<f64> {
    let v = Verifier::new(cl, roi, None, 1, false)?;
    Ok(v.maximize(&Objective::Linear(c.clone(), d), &VerifyOptions::default())?.p_star)
}

fn check_psd(p: &DMatrix<f64>) -> Result<()> {
    if !p.is_square() {
        return Err(dim_err("P must be square"));
    }
    if (p - p.transpose()).amax() > 1e-9 * (1.0 + p.amax()) {
        return Err(Error::InvalidInput("P must be symmetric".into()));
    }
    let eig = nalgebra::SymmetricEigen::new(p.clone()).eigenvalues;
    if eig.min() < -1e-9 {
        return Err(Error::InvalidInput("P must be positive semidefinite".into()));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{Layer, PwaSystem, ReluNetwork};

    fn scalar_loop(a: f64, domain: f64) -> ClosedLoop {
        let plant = PwaSystem::lti(
            DMatrix::from_element(1, 1, a),
            DMatrix::from_element(1, 1, 1.0),
            Polytope::cube(1, domain),
        )
        .unwrap();
        let net = ReluNetwork::new(vec![Layer {
            weights: DMatrix::zeros(1, 1),
            bias: DVector::zeros(1),
        }])
        .unwrap();
        ClosedLoop::new(plant, ControllerSpec::Raw { network: net }).unwrap()
    }

    #[test]
    fn expansion_counterexample() {
        let cl = scalar_loop(2.0, 10.0);
        let r = verify_quadratic(&cl, &DMatrix::identity(1, 1), &Polytope::cube(1, 1.0), 0.1).unwrap();
        assert_eq!(r.status, VerifierStatus::Counterexample);
        assert!((r.p_star - 3.0).abs() < 1e-12);
        assert!((r.x_star.unwrap()[0].abs() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn contraction_certified() {
        let cl = scalar_loop(0.5, 1.0);
        let r = verify_quadratic(&cl, &DMatrix::identity(1, 1), &Polytope::cube(1, 1.0), 0.1).unwrap();
        assert_eq!(r.status, VerifierStatus::Certified);
        assert!((r.p_star + 0.0075).abs() < 1e-12, "{}", r.p_star);
    }

    #[test]
    fn domain_gap_is_reported() {
        let cl = scalar_loop(2.0, 1.0);
        let e = verify_quadratic(&cl, &DMatrix::identity(1, 1), &Polytope::cube(1, 1.0), 0.1);
        assert!(matches!(e, Err(Error::DomainGap(_))));
    }

    #[test]
    fn linear_objective_examples() {
        let c = DVector::from_element(1, 1.0);
        let cl = scalar_loop(0.5, 1.0);
        assert!((verify_linear_objective(&cl, &Polytope::cube(1, 1.0), &c, 1.0).unwrap() + 0.5).abs() < 1e-12);
        let cl = scalar_loop(2.0, 10.0);
        assert!((verify_linear_objective(&cl, &Polytope::cube(1, 1.0), &c, 1.0).unwrap() - 1.0).abs() < 1e-12);
    }
}
