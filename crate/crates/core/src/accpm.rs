//! The cutting-plane loop: propose a center, verify it, cut on failure.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dynamics::{local_linearization, ClosedLoop};
use crate::error::{Error, Result};
use crate::geometry::Polytope;
use crate::learner::{make_cut, CandidateKind, CandidateParam, CenterOutcome, CutMode, LocalizationSet};
use crate::roa::sublevel_alpha;
use crate::verifier::{Objective, Verifier, VerifierStats, VerifierStatus, VerifyOptions};

pub const SCHEMA_VERSION: u32 = 1;
pub const EPSILON_SAFETY: f64 = 0.95;
/// Spectral radii at or above this count as unstable.
pub const STABILITY_MARGIN: f64 = 1.0 - 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AutoKeyword {
    Auto,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum EpsilonChoice {
    Fixed(f64),
    Auto(AutoKeyword),
}

impl Default for EpsilonChoice {
    fn default() -> Self {
        EpsilonChoice::Auto(AutoKeyword::Auto)
    }
}

impl FromStr for EpsilonChoice {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        if s.eq_ignore_ascii_case("auto") {
            return Ok(EpsilonChoice::default());
        }
        let v: f64 = s.parse().map_err(|_| format!("expected 'auto' or a number, got '{s}'"))?;
        if !(v > 0.0 && v.is_finite()) {
            return Err(format!("epsilon must be positive, got {v}"));
        }
        Ok(EpsilonChoice::Fixed(v))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum GammaChoice {
    Fixed(f64),
    Bisect { lo: f64, hi: f64, tol: f64 },
}

impl Default for GammaChoice {
    fn default() -> Self {
        GammaChoice::Fixed(1.0)
    }
}

impl FromStr for GammaChoice {
    type Err = String;
    /// `<γ>` or `bisect:lo,hi,tol`.
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        if let Some(rest) = s.strip_prefix("bisect:") {
            let parts: Vec<f64> = rest
                .split(',')
                .map(|p| p.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| format!("bad bisection range '{rest}'"))?;
            let [lo, hi, tol] = parts[..] else {
                return Err("bisection needs lo,hi,tol".into());
            };
            let g = GammaChoice::Bisect { lo, hi, tol };
            g.validate().map_err(|e| e.to_string())?;
            return Ok(g);
        }
        let v: f64 = s.parse().map_err(|_| format!("expected a number or bisect:lo,hi,tol, got '{s}'"))?;
        let g = GammaChoice::Fixed(v);
        g.validate().map_err(|e| e.to_string())?;
        Ok(g)
    }
}

impl GammaChoice {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            GammaChoice::Fixed(g) => g > 0.0 && g <= 1.0,
            GammaChoice::Bisect { lo, hi, tol } => lo > 0.0 && lo < hi && hi <= 1.0 && tol > 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidInput(format!("invalid gamma setting {self:?}")))
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AccpmConfig {
    pub candidate: CandidateKind,
    pub epsilon: EpsilonChoice,
    pub gamma: GammaChoice,
    pub max_iterations: usize,
    pub cut_mode: CutMode,
    pub verifier: VerifyOptions,
}

impl Default for AccpmConfig {
    fn default() -> Self {
        AccpmConfig {
            candidate: CandidateKind::Quadratic,
            epsilon: EpsilonChoice::default(),
            gamma: GammaChoice::default(),
            max_iterations: 200,
            cut_mode: CutMode::Strict,
            verifier: VerifyOptions::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthesisStatus {
    Feasible,
    PresumedInfeasible,
    MaxIterations,
}

impl SynthesisStatus {
    pub fn exit_code(self) -> i32 {
        match self {
            SynthesisStatus::Feasible => 0,
            SynthesisStatus::PresumedInfeasible => 2,
            SynthesisStatus::MaxIterations => 3,
        }
    }
}

impl fmt::Display for SynthesisStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            SynthesisStatus::Feasible => "feasible",
            SynthesisStatus::PresumedInfeasible => "presumed_infeasible",
            SynthesisStatus::MaxIterations => "max_iterations",
        };
        f.write_str(s)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpsilonInfo {
    pub epsilon: f64,
    #[serde(rename = "A_cl", with = "crate::serde_util::matrix")]
    pub a_cl: DMatrix<f64>,
    pub spectral_radius: f64,
    /// `(re, im)` pairs.
    pub eigenvalues: Vec<(f64, f64)>,
}

/// Eigenvalues of a real square matrix as `(re, im)` pairs.
pub fn eigenvalues(a: &DMatrix<f64>) -> Vec<(f64, f64)> {
    let ev = a.clone().complex_eigenvalues();
    let mut out: Vec<(f64, f64)> = ev.iter().map(|z| (z.re, z.im)).collect();
    out.sort_by(|p, q| p.0.total_cmp(&q.0).then(p.1.total_cmp(&q.1)));
    out
}

pub fn spectral_radius(a: &DMatrix<f64>) -> f64 {
    eigenvalues(a).iter().map(|(r, i)| r.hypot(*i)).fold(0.0, f64::max)
}

/// Radius of the largest ∞-norm ball around the origin inside `{Fx ≤ h}`.
pub fn inscribed_box_radius(p: &Polytope) -> f64 {
    let mut r = f64::INFINITY;
    for k in 0..p.num_rows() {
        let l1 = p.f().row(k).iter().map(|v| v.abs()).sum::<f64>();
        if l1 > 0.0 {
            r = r.min(p.h()[k] / l1);
        }
    }
    r
}

fn linearization_info(cl: &ClosedLoop, require_stable: bool) -> Result<(EpsilonInfo, Polytope)> {
    let lin = local_linearization(cl)?;
    let eig = eigenvalues(&lin.a_cl);
    let rho = eig.iter().map(|(r, i)| r.hypot(*i)).fold(0.0, f64::max);
    if require_stable && rho >= STABILITY_MARGIN {
        return Err(Error::UnstableLinearization {
            radius: rho,
            eigenvalues: eig,
        });
    }
    Ok((
        EpsilonInfo {
            epsilon: f64::NAN,
            a_cl: lin.a_cl,
            spectral_radius: rho,
            eigenvalues: eig,
        },
        lin.region,
    ))
}

/// `ε = 0.95 · min_k h_k/‖F_k‖₁` over the region where the loop is linear at the origin.
pub fn choose_epsilon(cl: &ClosedLoop) -> Result<EpsilonInfo> {
    let (mut info, region) = linearization_info(cl, true)?;
    let r = inscribed_box_radius(&region);
    if !r.is_finite() || r <= 0.0 {
        return Err(Error::DegenerateOrigin(format!("linear region around the origin has radius {r}")));
    }
    info.epsilon = EPSILON_SAFETY * r;
    Ok(info)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    #[serde(rename = "P", with = "crate::serde_util::matrix")]
    pub p: DMatrix<f64>,
    /// `None` when the searched region is empty.
    pub p_star: Option<f64>,
    pub x_star: Option<Vec<f64>>,
    pub potential: Option<f64>,
    pub newton_steps: usize,
    pub nodes: usize,
    pub leaves: usize,
    pub time_s: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CutRecord {
    pub iteration: usize,
    #[serde(rename = "D", with = "crate::serde_util::matrix")]
    pub d: DMatrix<f64>,
    pub c: f64,
    pub source: Vec<f64>,
    /// `c − ⟨D, P⟩` at the center that produced the cut.
    pub slack_at_center: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Certificate {
    pub schema_version: u32,
    pub status: SynthesisStatus,
    pub kind: CandidateKind,
    /// Certified `P` when feasible, otherwise the last center (if any).
    #[serde(rename = "P", with = "crate::serde_util::opt_matrix")]
    pub p: Option<DMatrix<f64>>,
    pub epsilon: f64,
    #[serde(rename = "A_cl", with = "crate::serde_util::matrix")]
    pub a_cl: DMatrix<f64>,
    pub spectral_radius: f64,
    pub eigenvalues: Vec<(f64, f64)>,
    pub alpha: Option<f64>,
    pub gamma: f64,
    pub roi: Polytope,
    pub cut_mode: CutMode,
    pub iterations: Vec<IterationRecord>,
    pub cuts: Vec<CutRecord>,
    pub verifier: VerifierStats,
    /// The termination bound assumes a ball inside the valid parameter set; never checked.
    pub interior_ball_assumption_verified: bool,
    pub note: Option<String>,
}

impl Certificate {
    pub fn candidate(&self) -> Option<CandidateParam> {
        self.p.as_ref().map(|p| CandidateParam {
            p: p.clone(),
            kind: self.kind,
        })
    }

    /// Zeroes wall-clock fields so repeated runs serialize identically.
    pub fn without_timings(mut self) -> Self {
        for r in &mut self.iterations {
            r.time_s = 0.0;
        }
        self.verifier.time_s = 0.0;
        self
    }

    pub fn final_p_star(&self) -> Option<f64> {
        self.iterations.last().and_then(|r| r.p_star)
    }
}

fn objective_for(kind: CandidateKind, p: &DMatrix<f64>) -> Objective {
    match kind {
        CandidateKind::Quadratic => Objective::Decrease(p.clone()),
        CandidateKind::Pwq => Objective::PwqDecrease(p.clone()),
    }
}

/// Builds the verifier matching a candidate kind.
pub fn verifier_for(cl: &ClosedLoop, roi: &Polytope, epsilon: f64, kind: CandidateKind) -> Result<Verifier> {
    let steps = match kind {
        CandidateKind::Quadratic => 1,
        CandidateKind::Pwq => 2,
    };
    Verifier::new(cl, roi, Some(epsilon), steps, true)
}

/// Runs the cutting-plane loop on a fixed region of interest.
pub fn synthesize(cl: &ClosedLoop, roi: &Polytope, cfg: &AccpmConfig) -> Result<Certificate> {
    synthesize_scaled(cl, roi, cfg, 1.0)
}

fn synthesize_scaled(cl: &ClosedLoop, roi: &Polytope, cfg: &AccpmConfig, gamma: f64) -> Result<Certificate> {
    let n = cl.state_dim();
    if roi.dim() != n {
        return Err(crate::error::dim_err("region of interest has the wrong dimension"));
    }
    if roi.h().iter().zip(roi.f().row_iter()).any(|(h, r)| *h <= 0.0 && r.norm() > 0.0) {
        return Err(Error::InvalidInput("the origin must be interior to the region of interest".into()));
    }
    let info = match cfg.epsilon {
        EpsilonChoice::Auto(_) => choose_epsilon(cl)?,
        EpsilonChoice::Fixed(e) => {
            if !(e > 0.0) {
                return Err(Error::InvalidInput(format!("epsilon must be positive, got {e}")));
            }
            // an unstable linearization is recorded; it only blocks a feasible verdict
            let (mut info, _) = linearization_info(cl, false)?;
            info.epsilon = e;
            info
        }
    };
    let eps = info.epsilon;
    let verifier = verifier_for(cl, roi, eps, cfg.candidate)?;
    let mut ls = LocalizationSet::new(cfg.candidate.param_dim(n))?;
    let mut iterations = Vec::new();
    let mut cuts = Vec::new();
    let mut last_p: Option<DMatrix<f64>> = None;
    let mut last_stats = VerifierStats::default();
    let mut status = SynthesisStatus::MaxIterations;
    let mut note = None;

    for it in 1..=cfg.max_iterations {
        let t0 = Instant::now();
        let (p, newton_steps) = match ls.analytic_center(last_p.as_ref())? {
            CenterOutcome::Center { p, newton_steps, .. } => (p, newton_steps),
            CenterOutcome::Infeasible => {
                status = SynthesisStatus::PresumedInfeasible;
                break;
            }
        };
        let potential = ls.potential_value(&p).ok();
        let res = verifier.maximize(&objective_for(cfg.candidate, &p), &cfg.verifier)?;
        last_stats = res.stats.clone();
        iterations.push(IterationRecord {
            iteration: it,
            p: p.clone(),
            p_star: res.p_star.is_finite().then_some(res.p_star),
            x_star: res.x_star.as_ref().map(|x| x.as_slice().to_vec()),
            potential,
            newton_steps,
            nodes: res.stats.nodes,
            leaves: res.stats.leaves,
            time_s: t0.elapsed().as_secs_f64(),
        });
        last_p = Some(p.clone());
        if res.status == VerifierStatus::Certified {
            if info.spectral_radius >= STABILITY_MARGIN {
                note = Some(format!(
                    "decrease certified outside the ε-ball but the local linear map has spectral radius {}",
                    info.spectral_radius
                ));
                status = SynthesisStatus::PresumedInfeasible;
            } else {
                status = SynthesisStatus::Feasible;
            }
            break;
        }
        let x_star = res.x_star.clone().expect("counterexample carries a state");
        let cut = match make_cut(&x_star, cl, cfg.candidate, cfg.cut_mode, Some(&p)) {
            Ok(c) => c,
            Err(Error::ZeroCut(x)) => {
                // ΔV(x*) = 0 for every P: no candidate of this kind can decrease there
                note = Some(format!("zero cut at {x:?}: the decrease condition is unattainable"));
                status = SynthesisStatus::PresumedInfeasible;
                break;
            }
            Err(e) => return Err(e),
        };
        cuts.push(CutRecord {
            iteration: it,
            d: cut.d.clone(),
            c: cut.c,
            source: cut.source.as_slice().to_vec(),
            slack_at_center: cut.slack(&p),
        });
        ls.push(cut)?;
    }

    let alpha = match (&status, &last_p) {
        (SynthesisStatus::Feasible, Some(p)) => Some(sublevel_alpha(
            &CandidateParam {
                p: p.clone(),
                kind: cfg.candidate,
            },
            cl,
            roi,
        )?),
        _ => None,
    };
    Ok(Certificate {
        schema_version: SCHEMA_VERSION,
        status,
        kind: cfg.candidate,
        p: last_p,
        epsilon: eps,
        a_cl: info.a_cl,
        spectral_radius: info.spectral_radius,
        eigenvalues: info.eigenvalues,
        alpha,
        gamma,
        roi: roi.clone(),
        cut_mode: cfg.cut_mode,
        iterations,
        cuts,
        verifier: last_stats,
        interior_ball_assumption_verified: false,
        note,
    })
}

#[derive(Clone, Debug)]
pub struct BisectionTrial {
    pub gamma: f64,
    pub success: bool,
}

#[derive(Clone, Debug)]
pub struct Bisection<T> {
    pub gamma: f64,
    pub value: T,
    pub trials: Vec<BisectionTrial>,
}

/// Largest `γ ∈ [lo, hi]` on the bisection grid for which `trial` succeeds.
///
/// `hi` is tried first; then the bracket `[lo, hi]` is halved until narrower than `tol`,
/// and `lo` itself is tried only if no midpoint succeeded.
pub fn bisect_largest<T>(
    lo: f64,
    hi: f64,
    tol: f64,
    mut trial: impl FnMut(f64) -> Result<Option<T>>,
) -> Result<Bisection<T>> {
    GammaChoice::Bisect { lo, hi, tol }.validate()?;
    let mut trials = Vec::new();
    let record = |g: f64, ok: bool, trials: &mut Vec<BisectionTrial>| trials.push(BisectionTrial { gamma: g, success: ok });
    if let Some(v) = trial(hi)? {
        record(hi, true, &mut trials);
        return Ok(Bisection { gamma: hi, value: v, trials });
    }
    record(hi, false, &mut trials);
    let (mut a, mut b) = (lo, hi);
    let mut best: Option<(f64, T)> = None;
    while b - a > tol {
        let mid = 0.5 * (a + b);
        match trial(mid)? {
            Some(v) => {
                record(mid, true, &mut trials);
                best = Some((mid, v));
                a = mid;
            }
            None => {
                record(mid, false, &mut trials);
                b = mid;
            }
        }
    }
    if best.is_none() {
        let v = trial(lo)?;
        record(lo, v.is_some(), &mut trials);
        best = v.map(|v| (lo, v));
    }
    match best {
        Some((gamma, value)) => Ok(Bisection { gamma, value, trials }),
        None => Err(Error::NoFeasibleGamma { lo, hi }),
    }
}

/// Bisection on the scale of `roi0` about the origin.
pub fn bisect_gamma(cl: &ClosedLoop, roi0: &Polytope, cfg: &AccpmConfig, lo: f64, hi: f64, tol: f64) -> Result<Bisection<Certificate>> {
    bisect_largest(lo, hi, tol, |g| {
        let roi = roi0.scale_about_origin(g)?;
        let cert = synthesize_scaled(cl, &roi, cfg, g)?;
        Ok((cert.status == SynthesisStatus::Feasible).then_some(cert))
    })
}

/// Runs synthesis with the configured gamma, bisecting when asked.
pub fn run(cl: &ClosedLoop, roi0: &Polytope, cfg: &AccpmConfig) -> Result<Certificate> {
    cfg.gamma.validate()?;
    match cfg.gamma {
        GammaChoice::Fixed(g) => synthesize_scaled(cl, &roi0.scale_about_origin(g)?, cfg, g),
        GammaChoice::Bisect { lo, hi, tol } => Ok(bisect_gamma(cl, roi0, cfg, lo, hi, tol)?.value),
    }
}

/// Checks a state-space point against the certificate: `ΔV(x) < 0`.
pub fn decrease_at(cl: &ClosedLoop, cand: &CandidateParam, x: &DVector<f64>) -> Result<f64> {
    objective_for(cand.kind, &cand.p).evaluate(cl, x)
}
