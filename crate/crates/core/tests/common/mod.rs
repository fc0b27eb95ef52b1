#![allow(dead_code)]

use std::path::PathBuf;

use nalgebra::{DMatrix, DVector};
use pwa_lyapunov::dynamics::{saturated_linear_controller, ClosedLoop, ControllerSpec, Layer, PwaSystem, ReluNetwork};
use pwa_lyapunov::geometry::Polytope;
use pwa_lyapunov::io::{load_problem, ProblemSpec};
use rand::Rng;

pub fn fixture_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures").join(name)
}

pub fn fixture(name: &str) -> ProblemSpec {
    load_problem(&fixture_path(name)).unwrap_or_else(|e| panic!("{name}: {e}"))
}

pub fn fixture_loop(name: &str) -> (ProblemSpec, ClosedLoop) {
    let spec = fixture(name);
    let cl = spec.closed_loop().unwrap();
    (spec, cl)
}

pub fn v(x: &[f64]) -> DVector<f64> {
    DVector::from_vec(x.to_vec())
}

pub fn m(rows: usize, cols: usize, data: &[f64]) -> DMatrix<f64> {
    DMatrix::from_row_slice(rows, cols, data)
}

/// `x₊ = a·x` in one dimension with a zero controller.
pub fn scalar_loop(a: f64, domain: f64) -> ClosedLoop {
    let plant = PwaSystem::lti(m(1, 1, &[a]), m(1, 1, &[1.0]), Polytope::cube(1, domain)).unwrap();
    let net = ReluNetwork::new(vec![Layer {
        weights: DMatrix::zeros(1, 1),
        bias: DVector::zeros(1),
    }])
    .unwrap();
    ClosedLoop::new(plant, ControllerSpec::Raw { network: net }).unwrap()
}

/// `x₊ = A x` on `[-domain, domain]^n` with a zero controller.
pub fn autonomous_loop(a: DMatrix<f64>, domain: f64) -> ClosedLoop {
    let n = a.nrows();
    let plant = PwaSystem::lti(a, DMatrix::zeros(n, 1), Polytope::cube(n, domain)).unwrap();
    let net = ReluNetwork::new(vec![Layer {
        weights: DMatrix::zeros(1, n),
        bias: DVector::zeros(1),
    }])
    .unwrap();
    ClosedLoop::new(plant, ControllerSpec::Raw { network: net }).unwrap()
}

/// Random single-mode 2-D plant with a saturated linear controller; the domain
/// is wide enough that one step from `[-1, 1]²` stays inside it.
pub fn random_clamp_instance(rng: &mut impl Rng) -> ClosedLoop {
    random_clamp_instance_for(rng, 1)
}

/// Same, with room for `steps` steps.
pub fn random_clamp_instance_for(rng: &mut impl Rng, steps: usize) -> ClosedLoop {
    let a = DMatrix::from_fn(2, 2, |_, _| rng.gen_range(-1.2..1.2));
    let b = DMatrix::from_fn(2, 1, |_, _| rng.gen_range(-1.0..1.0));
    let k = DMatrix::from_fn(1, 2, |_, _| rng.gen_range(-1.0..1.0));
    let umax = rng.gen_range(0.2..1.0);
    let gain = a.abs().column_sum().max();
    let mut reach = 1.0;
    for _ in 0..steps {
        reach = gain * reach + b.abs().max() * umax;
    }
    let domain = Polytope::cube(2, reach + 1.0);
    let plant = PwaSystem::lti(a, b, domain).unwrap();
    let net = saturated_linear_controller(&k, &v(&[-umax]), &v(&[umax])).unwrap();
    ClosedLoop::new(plant, ControllerSpec::Raw { network: net }).unwrap()
}

pub fn random_psd(n: usize, rng: &mut impl Rng) -> DMatrix<f64> {
    let g = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
    let p = g.transpose() * &g;
    let s = p.norm();
    p / s
}

pub fn blkdiag(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let (n, k) = (a.nrows(), b.nrows());
    let mut out = DMatrix::zeros(n + k, n + k);
    out.view_mut((0, 0), (n, n)).copy_from(a);
    out.view_mut((n, n), (k, k)).copy_from(b);
    out
}

/// Rejection sample of `roi ∖ B_ε`.
pub fn sample_outside_ball(roi: &Polytope, eps: f64, count: usize, rng: &mut impl Rng) -> Vec<DVector<f64>> {
    let bb = roi.bounding_box().unwrap();
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let x = DVector::from_fn(bb.dim(), |i, _| rng.gen_range(bb.lower[i]..=bb.upper[i]));
        if roi.contains(&x, 0.0) && x.amax() >= eps {
            out.push(x);
        }
    }
    out
}
