//! `pwalyap`: synthesize, verify and inspect Lyapunov certificates from problem files.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use pwa_lyapunov::accpm::{self, AccpmConfig, Certificate, EpsilonChoice, GammaChoice};
use pwa_lyapunov::dynamics::{sample_polytope, Rollout};
use pwa_lyapunov::geometry::Polytope;
use pwa_lyapunov::io::{self, ProblemSpec};
use pwa_lyapunov::learner::{CandidateKind, CandidateParam, CutMode};
use pwa_lyapunov::roa::{self, RoaEstimate};
use pwa_lyapunov::verifier::{self, Objective};
use pwa_lyapunov::{Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Parser)]
#[command(name = "pwalyap", version, about = "Lyapunov certificates for PWA plants with ReLU network controllers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the cutting-plane synthesis loop.
    Synthesize(SynthArgs),
    /// Run one verifier call on a given P.
    Verify(VerifyArgs),
    /// Sublevel-set estimate of the region of attraction from a certificate.
    Roa(RoaArgs),
    /// Closed-loop trajectories.
    Simulate(SimArgs),
    /// Maximal control invariant set of an LTI plant under input constraints.
    InvariantSet(InvArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Candidate {
    Quadratic,
    Pwq,
}

impl From<Candidate> for CandidateKind {
    fn from(c: Candidate) -> Self {
        match c {
            Candidate::Quadratic => CandidateKind::Quadratic,
            Candidate::Pwq => CandidateKind::Pwq,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Cuts {
    Strict,
    Relaxed,
}

#[derive(Args)]
struct Common {
    /// Problem file (JSON).
    spec: PathBuf,
    /// `auto` or a positive number.
    #[arg(long)]
    epsilon: Option<EpsilonChoice>,
    /// `<γ>` or `bisect:lo,hi,tol`.
    #[arg(long)]
    gamma: Option<GammaChoice>,
    #[arg(long)]
    seed: Option<u64>,
    /// Serial verification and zeroed timing fields, for byte-identical output.
    #[arg(long)]
    deterministic: bool,
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

#[derive(Args)]
struct SynthArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, value_enum)]
    candidate: Option<Candidate>,
    #[arg(long, value_enum)]
    cut_mode: Option<Cuts>,
    #[arg(long)]
    max_iters: Option<usize>,
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Args)]
struct VerifyArgs {
    #[command(flatten)]
    common: Common,
    /// JSON matrix (list of rows) or a certificate file.
    #[arg(long = "P")]
    p: PathBuf,
}

#[derive(Args)]
struct RoaArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    certificate: PathBuf,
    /// Boundary points (ellipse) or grid points per axis (contour).
    #[arg(long, default_value_t = 200)]
    resolution: usize,
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Args)]
struct SimArgs {
    #[command(flatten)]
    common: Common,
    /// Grid of initial states over the region of interest's bounding box, e.g. `10x10`.
    #[arg(long, conflicts_with = "samples")]
    grid: Option<String>,
    /// Random initial states in the region of interest (uses --seed).
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long, default_value_t = 200)]
    horizon: usize,
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Args)]
struct InvArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, default_value_t = 200)]
    max_iter: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> Result<u8> {
    match cli.command {
        Command::Synthesize(a) => synthesize(a),
        Command::Verify(a) => verify(a),
        Command::Roa(a) => roa_cmd(a),
        Command::Simulate(a) => simulate(a),
        Command::InvariantSet(a) => invariant_set(a),
    }
}

/// Loads the problem and folds command-line overrides into its options.
fn setup(c: &Common) -> Result<(ProblemSpec, AccpmConfig)> {
    let spec = io::load_problem(&c.spec)?;
    let mut cfg = spec.options.clone();
    if let Some(e) = c.epsilon {
        cfg.epsilon = e;
    }
    if let Some(g) = c.gamma {
        cfg.gamma = g;
    }
    if let Some(s) = c.seed {
        cfg.verifier.seed = s;
    }
    if c.threads == 0 {
        return Err(Error::InvalidInput("--threads must be positive".into()));
    }
    if c.threads > 1 && !c.deterministic {
        verifier::set_thread_count(c.threads)?;
        cfg.verifier.parallel = true;
    }
    if c.deterministic {
        cfg.verifier.parallel = false;
    }
    Ok((spec, cfg))
}

fn scaled_roi(spec: &ProblemSpec, cfg: &AccpmConfig) -> Result<Polytope> {
    cfg.gamma.validate()?;
    match cfg.gamma {
        GammaChoice::Fixed(g) => spec.roi0.scale_about_origin(g),
        GammaChoice::Bisect { .. } => Err(Error::InvalidInput("this command needs a fixed --gamma".into())),
    }
}

fn ensure_dir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p)?;
    Ok(())
}

fn synthesize(a: SynthArgs) -> Result<u8> {
    let (spec, mut cfg) = setup(&a.common)?;
    if let Some(c) = a.candidate {
        cfg.candidate = c.into();
    }
    if let Some(m) = a.cut_mode {
        cfg.cut_mode = match m {
            Cuts::Strict => CutMode::Strict,
            Cuts::Relaxed => CutMode::Relaxed,
        };
    }
    if let Some(m) = a.max_iters {
        cfg.max_iterations = m;
    }
    let cl = spec.closed_loop()?;
    let mut cert = accpm::run(&cl, &spec.roi0, &cfg)?;
    if a.common.deterministic {
        cert = cert.without_timings();
    }
    ensure_dir(&a.out)?;
    io::write_json(&a.out.join("certificate.json"), &cert)?;
    io::write_history_csv(&a.out.join("history.csv"), &cert)?;
    io::write_cuts_csv(&a.out.join("cuts.csv"), &cert)?;
    println!(
        "{} after {} iterations (gamma {}, epsilon {})",
        cert.status,
        cert.iterations.len(),
        io::fmt_f64(cert.gamma),
        io::fmt_f64(cert.epsilon)
    );
    Ok(cert.status.exit_code() as u8)
}

/// A matrix file, or the `P` of a certificate together with the certificate itself.
fn read_p(path: &Path) -> Result<(DMatrix<f64>, Option<Certificate>)> {
    let text = std::fs::read_to_string(path)?;
    let value: serde_json::Value = io::parse_json(&text)?;
    if value.is_object() {
        let cert: Certificate = io::parse_json(&text)?;
        let p = cert
            .p
            .clone()
            .ok_or_else(|| Error::InvalidInput("certificate carries no P".into()))?;
        return Ok((p, Some(cert)));
    }
    let rows: Vec<Vec<f64>> = io::parse_json(&text)?;
    let n = rows.len();
    if n == 0 || rows.iter().any(|r| r.len() != n) {
        return Err(Error::DimensionMismatch("P must be a non-empty square matrix".into()));
    }
    Ok((DMatrix::from_fn(n, n, |i, j| rows[i][j]), None))
}

fn check_positive_definite(p: &DMatrix<f64>) -> Result<()> {
    if (p - p.transpose()).amax() > 1e-9 * (1.0 + p.amax()) {
        return Err(Error::InvalidInput("P must be symmetric".into()));
    }
    let min = SymmetricEigen::new(p.clone()).eigenvalues.min();
    if !(min > 0.0) {
        return Err(Error::InvalidInput(format!(
            "P must be positive definite (smallest eigenvalue {min})"
        )));
    }
    Ok(())
}

fn kind_for(p: &DMatrix<f64>, n: usize) -> Result<CandidateKind> {
    if p.nrows() == n {
        Ok(CandidateKind::Quadratic)
    } else if p.nrows() == 2 * n {
        Ok(CandidateKind::Pwq)
    } else {
        Err(Error::DimensionMismatch(format!(
            "P is {}×{}, expected {n}×{n} or {}×{}",
            p.nrows(),
            p.ncols(),
            2 * n,
            2 * n
        )))
    }
}

fn verify(a: VerifyArgs) -> Result<u8> {
    let (spec, cfg) = setup(&a.common)?;
    let cl = spec.closed_loop()?;
    let (p, cert) = read_p(&a.p)?;
    let kind = kind_for(&p, cl.state_dim())?;
    check_positive_definite(&p)?;
    let (roi, default_eps) = match &cert {
        Some(c) if a.common.gamma.is_none() => (c.roi.clone(), Some(c.epsilon)),
        _ => (scaled_roi(&spec, &cfg)?, None),
    };
    let eps = match (a.common.epsilon, default_eps) {
        (Some(EpsilonChoice::Fixed(e)), _) => e,
        (None, Some(e)) => e,
        _ => accpm::choose_epsilon(&cl)?.epsilon,
    };
    let ver = accpm::verifier_for(&cl, &roi, eps, kind)?;
    let obj = match kind {
        CandidateKind::Quadratic => Objective::Decrease(p.clone()),
        CandidateKind::Pwq => Objective::PwqDecrease(p.clone()),
    };
    let mut res = ver.maximize(&obj, &cfg.verifier)?;
    if a.common.deterministic {
        res.stats.time_s = 0.0;
    }
    let mut out = res.summary_json();
    out["kind"] = serde_json::json!(kind);
    out["epsilon"] = serde_json::json!(eps);
    print!("{}", io::to_json_string(&out)?);
    Ok(0)
}

fn roa_cmd(a: RoaArgs) -> Result<u8> {
    let (spec, _) = setup(&a.common)?;
    let cl = spec.closed_loop()?;
    let text = std::fs::read_to_string(&a.certificate)?;
    let cert: Certificate = io::parse_json(&text)?;
    let cand: CandidateParam = cert
        .candidate()
        .ok_or_else(|| Error::InvalidInput("certificate carries no P".into()))?;
    let alpha = match cert.alpha {
        Some(al) => al,
        None => roa::sublevel_alpha(&cand, &cl, &cert.roi)?,
    };
    let est = RoaEstimate::new(&cand, alpha);
    ensure_dir(&a.out)?;
    if let RoaEstimate::Ellipse { p, alpha } = &est {
        let pts = roa::ellipse_boundary(p, *alpha, a.resolution)?;
        io::write_boundary_csv(&a.out.join("roa_boundary.csv"), &pts)?;
    }
    let grid = roa::value_grid(&est, &cl, &cert.roi, a.resolution.min(400))?;
    io::write_contour_csv(&a.out.join("roa_contour.csv"), &grid)?;
    let summary = serde_json::json!({
        "schema_version": accpm::SCHEMA_VERSION,
        "kind": cand.kind,
        "alpha": alpha,
        "status": cert.status,
    });
    io::write_json(&a.out.join("roa.json"), &summary)?;
    println!("alpha {}", io::fmt_f64(alpha));
    Ok(0)
}

fn parse_grid(s: &str, n: usize) -> Result<Vec<usize>> {
    let parts: Vec<usize> = s
        .split('x')
        .map(|p| p.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::InvalidInput(format!("bad grid '{s}', expected e.g. 10x10")))?;
    if parts.len() != n || parts.iter().any(|&k| k == 0) {
        return Err(Error::InvalidInput(format!("grid needs {n} positive counts")));
    }
    Ok(parts)
}

fn simulate(a: SimArgs) -> Result<u8> {
    let (spec, cfg) = setup(&a.common)?;
    let cl = spec.closed_loop()?;
    let roi = scaled_roi(&spec, &cfg)?;
    let n = cl.state_dim();
    let starts: Vec<DVector<f64>> = if let Some(count) = a.samples {
        let mut rng = ChaCha8Rng::seed_from_u64(a.common.seed.unwrap_or(0));
        sample_polytope(&roi, count, &mut rng)?
    } else {
        let counts = parse_grid(a.grid.as_deref().unwrap_or(&vec!["10"; n].join("x")), n)?;
        let bb = roi.bounding_box()?;
        let total: usize = counts.iter().product();
        (0..total)
            .map(|mut idx| {
                DVector::from_fn(n, |k, _| {
                    let i = idx % counts[k];
                    idx /= counts[k];
                    if counts[k] == 1 {
                        bb.center()[k]
                    } else {
                        bb.lower[k] + (bb.upper[k] - bb.lower[k]) * i as f64 / (counts[k] - 1) as f64
                    }
                })
            })
            .collect()
    };
    let rollouts: Vec<Rollout> = starts.iter().map(|x| cl.rollout(x, a.horizon)).collect();
    ensure_dir(&a.out)?;
    io::write_trajectories_csv(&a.out.join("trajectories.csv"), &rollouts)?;
    println!("{} trajectories", rollouts.len());
    Ok(0)
}

fn invariant_set(a: InvArgs) -> Result<u8> {
    let (spec, _) = setup(&a.common)?;
    let plant = &spec.plant;
    if !plant.is_lti() {
        return Err(Error::InvalidInput("invariant sets need an LTI plant".into()));
    }
    let u = spec
        .input_constraints()
        .ok_or_else(|| Error::InvalidInput("problem has no input constraints".into()))?;
    let mode = &plant.modes()[0];
    let res = roa::control_invariant_set(&mode.a, &mode.b, &mode.region, u, a.max_iter)?;
    let text = io::to_json_string(&res)?;
    if let Some(out) = &a.out {
        ensure_dir(out)?;
        std::fs::write(out.join("invariant_set.json"), &text)?;
    }
    print!("{text}");
    Ok(if res.converged { 0 } else { 3 })
}
