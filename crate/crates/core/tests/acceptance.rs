//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any failure.
//!
//! Runs without the libtest harness so every criterion is reported even when an
//! earlier one fails.

mod common;

use std::time::{Duration, Instant};

use common::*;
use nalgebra::{DMatrix, DVector};
use pwa_lyapunov::accpm::{self, eigenvalues, AccpmConfig, Certificate, EpsilonChoice, GammaChoice, SynthesisStatus};
use pwa_lyapunov::dynamics::{sample_polytope, ClosedLoop, ControllerSpec};
use pwa_lyapunov::learner::{CandidateKind, CenterOutcome, CutMode, LocalizationSet};
use pwa_lyapunov::roa::{candidate_value, control_invariant_set, is_positive_invariant};
use pwa_lyapunov::verifier::{grid_oracle, verify_pwq, verify_quadratic, Objective, Verifier};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

struct Criterion {
    name: &'static str,
    limit: Duration,
    run: fn() -> Outcome,
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn e2s<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn center_baseline() -> Outcome {
    let mut worst = 0.0f64;
    for n in [2, 4] {
        let ls = LocalizationSet::new(n).map_err(e2s)?;
        let CenterOutcome::Center { p, .. } = ls.analytic_center(None).map_err(e2s)? else {
            return Err(format!("no center in dimension {n}"));
        };
        let err = (p - DMatrix::identity(n, n) * 0.5).amax();
        worst = worst.max(err);
        ensure(err <= 1e-10, || format!("dimension {n}: ‖P − I/2‖ = {err:e}"))?;
    }
    Ok(format!("max deviation {worst:.1e}"))
}

fn spectral_fixture() -> Outcome {
    let a = m(2, 2, &[0.50355752, 0.02697626, -0.29822124, 0.56348813]);
    let ev = eigenvalues(&a);
    ensure(ev.len() == 2, || format!("{} eigenvalues", ev.len()))?;
    let want = [(0.53352282, -0.08453977), (0.53352282, 0.08453977)];
    for (got, w) in ev.iter().zip(want) {
        ensure((got.0 - w.0).abs() <= 1e-6 && (got.1 - w.1).abs() <= 1e-6, || {
            format!("got {got:?}, want {w:?}")
        })?;
    }
    Ok(format!("{:.8} ± {:.8}i", ev[1].0, ev[1].1))
}

fn verifier_exactness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let roi = pwa_lyapunov::geometry::Polytope::cube(2, 1.0);
    let eps = 0.1;
    let mut worst_gap = 0.0f64;
    for inst in 0..50 {
        let cl = random_clamp_instance(&mut rng);
        let p = random_psd(2, &mut rng);
        let res = verify_quadratic(&cl, &p, &roi, eps).map_err(e2s)?;
        let obj = Objective::Decrease(p.clone());
        let grid = grid_oracle(&cl, &obj, &roi, Some(eps), 500).map_err(e2s)?;
        let bound = grid.bound.ok_or("no Lipschitz bound for a raw controller")?;
        let tiny = 1e-9 * (1.0 + grid.max.abs());
        ensure(res.p_star >= grid.max - tiny, || {
            format!("instance {inst}: p* = {} below grid max {}", res.p_star, grid.max)
        })?;
        ensure(res.p_star <= grid.max + bound + tiny, || {
            format!("instance {inst}: p* = {} above grid max {} + bound {bound}", res.p_star, grid.max)
        })?;
        for x in sample_outside_ball(&roi, eps, 2000, &mut rng) {
            let dv = obj.evaluate(&cl, &x).map_err(e2s)?;
            ensure(dv <= res.p_star + tiny, || format!("instance {inst}: ΔV({x:?}) = {dv} exceeds p* = {}", res.p_star))?;
        }
        worst_gap = worst_gap.max(res.p_star - grid.max);
    }
    Ok(format!("50 instances, largest p* − grid max = {worst_gap:.2e}"))
}

fn leaf_reproduces_step(name: &str, count: usize, rng: &mut ChaCha8Rng) -> Result<f64, String> {
    let (spec, cl) = fixture_loop(name);
    let roi = &spec.roi0;
    let ver = Verifier::new(&cl, roi, None, 1, false).map_err(e2s)?;
    let part = ver.partition();
    let mut worst = 0.0f64;
    for x in sample_polytope(roi, count, rng).map_err(e2s)? {
        let idx = part.locate(&cl, &x).ok_or_else(|| format!("{name}: no leaf for {:?}", x.as_slice()))?;
        let leaf = &part.leaves[idx];
        let want = cl.step(&x).map_err(e2s)?;
        let err = (leaf.states[1].apply(&x) - want).amax();
        worst = worst.max(err);
        ensure(err <= 1e-9, || format!("{name}: leaf map off by {err:e} at {:?}", x.as_slice()))?;
    }
    Ok(worst)
}

fn encoding_faithfulness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut parts = Vec::new();
    for name in ["double_integrator.json", "pendulum.json", "double_integrator_projected.json"] {
        let worst = leaf_reproduces_step(name, 10_000, &mut rng)?;
        parts.push(format!("{name} {worst:.1e}"));
    }
    Ok(parts.join(", "))
}

fn sublevel_rollouts(cl: &ClosedLoop, cert: &Certificate, count: usize, rng: &mut ChaCha8Rng) -> Result<usize, String> {
    let cand = cert.candidate().ok_or("no candidate")?;
    let alpha = cert.alpha.ok_or("no sublevel level")?;
    let starts: Vec<DVector<f64>> = sample_polytope(&cert.roi, 50 * count, rng)
        .map_err(e2s)?
        .into_iter()
        .filter(|x| candidate_value(&cand, cl, x).map(|v| v <= alpha).unwrap_or(false))
        .take(count)
        .collect();
    ensure(starts.len() == count, || format!("only {} start points inside the sublevel set", starts.len()))?;
    let mut longest = 0;
    for x0 in &starts {
        let r = cl.rollout(x0, 2000);
        let hit = r.states.iter().position(|x| x.amax() < cert.epsilon);
        let k = hit.ok_or_else(|| format!("rollout from {:?} never entered the ε-ball", x0.as_slice()))?;
        longest = longest.max(k);
    }
    Ok(longest)
}

fn double_integrator_end_to_end() -> Outcome {
    let (spec, cl) = fixture_loop("double_integrator.json");
    ensure(matches!(spec.options.epsilon, EpsilonChoice::Auto(_)), || "fixture must use automatic ε".into())?;
    let cert = accpm::run(&cl, &spec.roi0, &spec.options).map_err(e2s)?;
    ensure(cert.status == SynthesisStatus::Feasible, || format!("status {}", cert.status))?;
    ensure(cert.iterations.len() <= 50, || format!("{} iterations", cert.iterations.len()))?;
    let p = cert.p.clone().ok_or("no P")?;

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let obj = Objective::Decrease(p.clone());
    let mut worst = f64::NEG_INFINITY;
    for x in sample_outside_ball(&cert.roi, cert.epsilon, 100_000, &mut rng) {
        let dv = obj.evaluate(&cl, &x).map_err(e2s)?;
        worst = worst.max(dv);
        ensure(dv < 0.0, || format!("ΔV = {dv} ≥ 0 at {:?}", x.as_slice()))?;
    }
    let grid = grid_oracle(&cl, &obj, &cert.roi, Some(cert.epsilon), 500).map_err(e2s)?;
    ensure(grid.max < 0.0, || format!("grid maximum of ΔV is {}", grid.max))?;
    let longest = sublevel_rollouts(&cl, &cert, 100, &mut rng)?;
    Ok(format!(
        "feasible in {} iterations, γ = {}, ε = {:.4}, sampled max ΔV = {worst:.3e}, slowest rollout {longest} steps",
        cert.iterations.len(),
        cert.gamma,
        cert.epsilon
    ))
}

fn pendulum_end_to_end() -> Outcome {
    let (spec, cl) = fixture_loop("pendulum.json");
    let GammaChoice::Bisect { lo, hi, tol } = spec.options.gamma else {
        return Err("fixture must request γ bisection".into());
    };
    let quad = AccpmConfig {
        candidate: CandidateKind::Quadratic,
        ..spec.options.clone()
    };
    let bq = accpm::bisect_gamma(&cl, &spec.roi0, &quad, lo, hi, tol).map_err(e2s)?;
    ensure(bq.gamma > 0.0 && bq.gamma <= 1.0, || format!("γ*_quad = {}", bq.gamma))?;
    ensure(bq.value.status == SynthesisStatus::Feasible, || "quadratic certificate not feasible".into())?;
    let pwq = AccpmConfig {
        candidate: CandidateKind::Pwq,
        ..spec.options.clone()
    };
    let bp = accpm::bisect_gamma(&cl, &spec.roi0, &pwq, lo, hi, tol).map_err(e2s)?;
    ensure(bp.gamma >= bq.gamma, || format!("γ*_pwq = {} < γ*_quad = {}", bp.gamma, bq.gamma))?;
    Ok(format!("γ*_quad = {:.4}, γ*_pwq = {:.4}", bq.gamma, bp.gamma))
}

fn fixture_region(spec: &pwa_lyapunov::io::ProblemSpec) -> Result<pwa_lyapunov::geometry::Polytope, String> {
    match spec.options.gamma {
        GammaChoice::Fixed(g) => spec.roi0.scale_about_origin(g).map_err(e2s),
        GammaChoice::Bisect { .. } => Ok(spec.roi0.clone()),
    }
}

fn pwq_identity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = 0.0f64;
    let mut count = 0;
    for name in ["double_integrator.json", "pendulum.json", "double_integrator_projected.json", "contraction_1d.json", "expansion_1d.json"] {
        let (spec, cl) = fixture_loop(name);
        let roi = fixture_region(&spec)?;
        let n = cl.state_dim();
        let eps = match spec.options.epsilon {
            EpsilonChoice::Fixed(e) => e,
            EpsilonChoice::Auto(_) => accpm::choose_epsilon(&cl).map_err(e2s)?.epsilon,
        };
        for trial in 0..3 {
            let pq = if trial == 0 { DMatrix::identity(n, n) } else { random_psd(n, &mut rng) };
            let big = blkdiag(&pq, &DMatrix::zeros(n, n));
            let q = verify_quadratic(&cl, &pq, &roi, eps).map_err(e2s)?;
            let w = verify_pwq(&cl, &big, &roi, eps).map_err(e2s)?;
            // both -inf when the region outside the ball is empty
            let diff = if q.p_star == w.p_star { 0.0 } else { (q.p_star - w.p_star).abs() };
            worst = worst.max(diff);
            count += 1;
            ensure(diff <= 1e-8, || format!("{name}: quadratic {} vs PWQ {}", q.p_star, w.p_star))?;
        }
    }
    Ok(format!("{count} comparisons, max |Δp*| = {worst:.1e}"))
}

fn projection_consistency() -> Outcome {
    let (_, cl0) = fixture_loop("double_integrator_projected.json");
    let ControllerSpec::ProjectedStateDependent { network, input_set, .. } = cl0.controller().clone() else {
        return Err("fixture is not a state-dependent projection".into());
    };
    let mode = &cl0.plant().modes()[0];
    let cis = control_invariant_set(&mode.a, &mode.b, &mode.region, &input_set, 200).map_err(e2s)?;
    ensure(cis.converged, || "invariant-set iteration did not converge".into())?;
    let c = cis.set.clone();
    let cl = ClosedLoop::new(
        cl0.plant().clone(),
        ControllerSpec::ProjectedStateDependent {
            network,
            roi: c.clone(),
            input_set,
        },
    )
    .map_err(e2s)?;

    let ver = Verifier::new(&cl, &c, None, 1, false).map_err(e2s)?;
    let part = ver.partition();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut worst = 0.0f64;
    for x in sample_polytope(&c, 10_000, &mut rng).map_err(e2s)? {
        let idx = part.locate(&cl, &x).ok_or_else(|| format!("no leaf for {:?}", x.as_slice()))?;
        let u_leaf = part.leaves[idx].controls[0].apply(&x);
        let u_qp = cl.control(&x).map_err(e2s)?;
        let err = (u_leaf - u_qp).amax();
        worst = worst.max(err);
        ensure(err <= 1e-6, || format!("leaf control off by {err:e} at {:?}", x.as_slice()))?;
    }
    let inv = is_positive_invariant(&cl, &c).map_err(e2s)?;
    ensure(inv.invariant, || format!("not invariant: worst margin {} on row {}", inv.worst_margin, inv.worst_row))?;
    Ok(format!(
        "{} rows in C, max |u_leaf − u_qp| = {worst:.1e}, invariance margin {:.1e}",
        c.num_rows(),
        inv.worst_margin
    ))
}

fn negative_control() -> Outcome {
    let (spec, cl) = fixture_loop("expansion_1d.json");
    let mut runs = 0;
    let mut refused = 0;
    for kind in [CandidateKind::Quadratic, CandidateKind::Pwq] {
        for mode in [CutMode::Strict, CutMode::Relaxed] {
            for eps in [EpsilonChoice::Fixed(0.1), EpsilonChoice::Fixed(0.5), EpsilonChoice::Fixed(1e-3), EpsilonChoice::default()] {
                let cfg = AccpmConfig {
                    candidate: kind,
                    cut_mode: mode,
                    epsilon: eps,
                    ..spec.options.clone()
                };
                runs += 1;
                match accpm::run(&cl, &spec.roi0, &cfg) {
                    Ok(cert) => ensure(cert.status != SynthesisStatus::Feasible, || {
                        format!("{kind:?}/{mode:?}/{:?}: feasible certificate for an expanding plant", cfg.epsilon)
                    })?,
                    Err(_) => refused += 1,
                }
            }
        }
    }
    Ok(format!("{runs} runs, none feasible ({refused} refused up front)"))
}

fn check_cuts(label: &str, cert: &Certificate) -> Result<usize, String> {
    let p_final = cert.p.as_ref().ok_or("no P")?;
    let slack = |d: &DMatrix<f64>, c: f64, p: &DMatrix<f64>| c - d.component_mul(p).sum();
    for cut in &cert.cuts {
        let s = slack(&cut.d, cut.c, p_final);
        ensure(s > 0.0, || format!("{label}: cut from iteration {} has slack {s} at P*", cut.iteration))?;
    }
    let mut checked = 0;
    for rec in &cert.iterations {
        for cut in cert.cuts.iter().filter(|c| c.iteration < rec.iteration) {
            let s = slack(&cut.d, cut.c, &rec.p);
            checked += 1;
            ensure(s > 0.0, || {
                format!("{label}: center {} violates cut {} (slack {s})", rec.iteration, cut.iteration)
            })?;
        }
    }
    Ok(checked + cert.cuts.len())
}

fn cut_consistency() -> Outcome {
    let mut certs = Vec::new();
    let (di, di_cl) = fixture_loop("double_integrator.json");
    for kind in [CandidateKind::Quadratic, CandidateKind::Pwq] {
        for mode in [CutMode::Strict, CutMode::Relaxed] {
            let cfg = AccpmConfig {
                candidate: kind,
                cut_mode: mode,
                ..di.options.clone()
            };
            certs.push((format!("double integrator {kind:?}/{mode:?}"), accpm::run(&di_cl, &di.roi0, &cfg).map_err(e2s)?));
        }
    }
    let (pe, pe_cl) = fixture_loop("pendulum.json");
    for kind in [CandidateKind::Quadratic, CandidateKind::Pwq] {
        let cfg = AccpmConfig {
            candidate: kind,
            ..pe.options.clone()
        };
        let b = accpm::bisect_gamma(&pe_cl, &pe.roi0, &cfg, 0.1, 1.0, 0.01).map_err(e2s)?;
        for (i, t) in b.trials.iter().enumerate() {
            let roi = pe.roi0.scale_about_origin(t.gamma).map_err(e2s)?;
            let cert = accpm::synthesize(&pe_cl, &roi, &cfg).map_err(e2s)?;
            certs.push((format!("pendulum {kind:?} trial {i}"), cert));
        }
    }
    let (c1, c1_cl) = fixture_loop("contraction_1d.json");
    certs.push(("contraction".into(), accpm::run(&c1_cl, &c1.roi0, &c1.options).map_err(e2s)?));

    let mut feasible = 0;
    let mut checks = 0;
    for (label, cert) in &certs {
        if cert.status == SynthesisStatus::Feasible {
            feasible += 1;
            checks += check_cuts(label, cert)?;
        }
    }
    ensure(feasible > 0, || "no feasible run to check".into())?;
    Ok(format!("{feasible} feasible runs of {}, {checks} cut checks", certs.len()))
}

fn main() {
    let criteria = [
        Criterion {
            name: "analytic center without cuts is I/2",
            limit: Duration::from_secs(1),
            run: center_baseline,
        },
        Criterion {
            name: "closed-loop eigenvalues of the double integrator",
            limit: Duration::from_secs(1),
            run: spectral_fixture,
        },
        Criterion {
            name: "verifier matches the 500x500 grid oracle",
            limit: Duration::from_secs(300),
            run: verifier_exactness,
        },
        Criterion {
            name: "leaf affine maps reproduce the closed loop",
            limit: Duration::from_secs(600),
            run: encoding_faithfulness,
        },
        Criterion {
            name: "double integrator certificate end to end",
            limit: Duration::from_secs(600),
            run: double_integrator_end_to_end,
        },
        Criterion {
            name: "pendulum gamma bisection, PWQ at least as large",
            limit: Duration::from_secs(1800),
            run: pendulum_end_to_end,
        },
        Criterion {
            name: "PWQ with zero lower block equals quadratic",
            limit: Duration::from_secs(600),
            run: pwq_identity,
        },
        Criterion {
            name: "projected control matches active-set solve; C invariant",
            limit: Duration::from_secs(600),
            run: projection_consistency,
        },
        Criterion {
            name: "expanding plant never certified",
            limit: Duration::from_secs(600),
            run: negative_control,
        },
        Criterion {
            name: "cuts hold at P* and at every later center",
            limit: Duration::from_secs(1800),
            run: cut_consistency,
        },
    ];

    let mut failed = 0;
    for (i, c) in criteria.iter().enumerate() {
        let t0 = Instant::now();
        let outcome = std::panic::catch_unwind(c.run).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let dt = t0.elapsed();
        let outcome = match outcome {
            Ok(d) if dt > c.limit => Err(format!("{d}; took {:.1}s, limit {}s", dt.as_secs_f64(), c.limit.as_secs())),
            o => o,
        };
        match outcome {
            Ok(detail) => println!("PASS A{:<2} {} ({:.2}s): {detail}", i + 1, c.name, dt.as_secs_f64()),
            Err(detail) => {
                failed += 1;
                println!("FAIL A{:<2} {} ({:.2}s): {detail}", i + 1, c.name, dt.as_secs_f64());
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
