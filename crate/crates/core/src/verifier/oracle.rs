//! Dense-grid evaluation of a verifier objective, used as an independent check.

use nalgebra::{DMatrix, DVector};

use super::Objective;
use crate::dynamics::{ClosedLoop, ControllerSpec};
use crate::error::{Error, Result};
use crate::geometry::Polytope;

#[derive(Clone, Debug)]
pub struct GridOracle {
    pub max: f64,
    pub argmax: Option<DVector<f64>>,
    /// `L·h·√n`: for a box region, the true maximum is at most `max + bound`.
    /// `None` when no Lipschitz constant is available (state-dependent projection).
    pub bound: Option<f64>,
    pub lipschitz: Option<f64>,
    pub samples: usize,
}

/// Evaluates `objective` on the grid with `resolution` cells per axis over the
/// bounding box of `roi`, keeping points in `roi` with `‖x‖∞ ≥ ε`.
pub fn grid_oracle(
    cl: &ClosedLoop,
    objective: &Objective,
    roi: &Polytope,
    epsilon: Option<f64>,
    resolution: usize,
) -> Result<GridOracle> {
    let n = roi.dim();
    if n > 3 {
        return Err(Error::InvalidInput(format!("grid oracle supports up to 3 dimensions, got {n}")));
    }
    if resolution == 0 {
        return Err(Error::InvalidInput("resolution must be positive".into()));
    }
    let b = roi.bounding_box()?;
    let w = b.widths();
    let eps = epsilon.unwrap_or(0.0);
    let per_axis = resolution + 1;
    let total = per_axis.pow(n as u32);
    let mut best = f64::NEG_INFINITY;
    let mut arg = None;
    let mut samples = 0;
    for idx in 0..total {
        let mut rem = idx;
        let mut x = DVector::zeros(n);
        for k in (0..n).rev() {
            let i = rem % per_axis;
            rem /= per_axis;
            x[k] = b.lower[k] + (i as f64 / resolution as f64) * w[k];
        }
        if !roi.contains(&x, 1e-12) || x.amax() < eps {
            continue;
        }
        let Ok(v) = objective.evaluate(cl, &x) else { continue };
        samples += 1;
        if v > best {
            best = v;
            arg = Some(x);
        }
    }
    let lipschitz = lipschitz_bound(cl, objective, roi)?;
    let h = w.max() / resolution as f64;
    Ok(GridOracle {
        max: best,
        argmax: arg,
        bound: lipschitz.map(|l| l * h * (n as f64).sqrt()),
        lipschitz,
        samples,
    })
}

fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.singular_values().max()
}

/// A Lipschitz constant of the objective on `roi` from operator norms.
pub fn lipschitz_bound(cl: &ClosedLoop, objective: &Objective, roi: &Polytope) -> Result<Option<f64>> {
    let net = cl.controller().network();
    let l_pi: f64 = match cl.controller() {
        ControllerSpec::ProjectedStateDependent { .. } => return Ok(None),
        // projection onto a fixed convex set is nonexpansive
        _ => net.layers().iter().map(|l| spectral_norm(&l.weights)).product(),
    };
    let l_f = cl
        .plant()
        .modes()
        .iter()
        .map(|m| spectral_norm(&m.a) + spectral_norm(&m.b) * l_pi)
        .fold(0.0, f64::max);
    let b = roi.bounding_box()?;
    let r0 = b.corners().iter().map(|c| c.norm()).fold(0.0, f64::max);
    let zero = DVector::zeros(cl.state_dim());
    let f0 = cl.step(&zero).map(|y| y.norm()).unwrap_or(0.0);
    let r1 = l_f * r0 + f0;
    let r2 = l_f * r1 + f0;
    let l = match objective {
        Objective::Decrease(p) => 2.0 * spectral_norm(p) * (r1 * l_f + r0),
        Objective::PwqDecrease(p) => {
            let lip0 = (1.0 + l_f * l_f).sqrt();
            let lip1 = l_f * lip0;
            let n0 = (r0 * r0 + r1 * r1).sqrt();
            let n1 = (r1 * r1 + r2 * r2).sqrt();
            2.0 * spectral_norm(p) * (n1 * lip1 + n0 * lip0)
        }
        Objective::PwqValue(p) => {
            let lip0 = (1.0 + l_f * l_f).sqrt();
            2.0 * spectral_norm(p) * (r0 * r0 + r1 * r1).sqrt() * lip0
        }
        Objective::Linear(c, _) => c.norm() * l_f,
    };
    Ok(Some(l))
}
