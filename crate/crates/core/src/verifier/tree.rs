//! Exhaustive partition of a region by the discrete structure of the closed loop.
//!
//! Branching fixes, in order, the side of the excluded ℓ∞ ball, the plant mode,
//! every ambiguous neuron (layer by layer), and the active set of the projection.
//! Once everything is fixed, each state along the horizon is affine in `x⁰`.

use nalgebra::{DMatrix, DVector};

use crate::dynamics::{ActivationPattern, ClosedLoop, ControllerSpec};
use crate::error::{Error, Result};
use crate::geometry::{AxisBox, FaceLattice, Polytope};
use crate::lp::{LpStatus, TAU_LP};

/// Threshold below which a pre-activation range counts as decided.
const NEURON_TOL: f64 = 1e-10;
/// Radius under which a child of a full-dimensional node is a sliver and dropped.
const SLIVER: f64 = 1e-9;
const COVER_MARGIN: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq)]
pub struct Affine {
    pub mat: DMatrix<f64>,
    pub off: DVector<f64>,
}

impl Affine {
    pub fn identity(n: usize) -> Self {
        Affine {
            mat: DMatrix::identity(n, n),
            off: DVector::zeros(n),
        }
    }

    pub fn apply(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.mat * x + &self.off
    }

    /// `W·self + b`.
    pub fn then(&self, w: &DMatrix<f64>, b: &DVector<f64>) -> Affine {
        Affine {
            mat: w * &self.mat,
            off: w * &self.off + b,
        }
    }

    fn row_le(&self, i: usize) -> (DVector<f64>, f64) {
        (self.mat.row(i).transpose(), -self.off[i])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepDecision {
    pub mode: usize,
    pub pattern: ActivationPattern,
    /// Active rows of the projection system, `None` for raw controllers.
    pub active_set: Option<Vec<usize>>,
}

#[derive(Clone, Debug)]
pub struct Leaf {
    pub region: Polytope,
    /// Index `2k` for `x_k ≥ ε`, `2k + 1` for `x_k ≤ −ε`.
    pub exclusion: Option<usize>,
    pub steps: Vec<StepDecision>,
    /// `x⁰, x¹, …` as affine functions of `x⁰`.
    pub states: Vec<Affine>,
    pub controls: Vec<Affine>,
    pub bbox: AxisBox,
    pub faces: FaceLattice,
}

#[derive(Clone, Debug)]
pub struct Partition {
    pub leaves: Vec<Leaf>,
    pub nodes: usize,
    pub lp_calls: usize,
    pub singular_kkt: usize,
    pub steps: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct PartitionSpec<'a> {
    pub region: &'a Polytope,
    pub epsilon: Option<f64>,
    pub steps: usize,
    /// Require the last state of the horizon to stay in the plant domain.
    pub check_final_domain: bool,
}

struct Node {
    region: Polytope,
    radius: f64,
    exclusion: Option<usize>,
    steps: Vec<StepDecision>,
    states: Vec<Affine>,
    controls: Vec<Affine>,
}

impl Node {
    fn child(&self, region: Polytope, radius: f64) -> Node {
        Node {
            region,
            radius,
            exclusion: self.exclusion,
            steps: self.steps.clone(),
            states: self.states.clone(),
            controls: self.controls.clone(),
        }
    }
}

struct Builder<'a> {
    cl: &'a ClosedLoop,
    steps: usize,
    check_final: bool,
    leaves: Vec<Leaf>,
    nodes: usize,
    singular: usize,
}

pub fn build_partition(cl: &ClosedLoop, spec: PartitionSpec<'_>) -> Result<Partition> {
    let n = cl.state_dim();
    if spec.region.dim() != n {
        return Err(crate::error::dim_err("region dimension differs from state dimension"));
    }
    let lp0 = crate::lp::call_count();
    let mut b = Builder {
        cl,
        steps: spec.steps,
        check_final: spec.check_final_domain,
        leaves: Vec::new(),
        nodes: 0,
        singular: 0,
    };
    let (_, r0) = spec.region.chebyshev()?;
    b.nodes += 1;
    if r0 >= -TAU_LP {
        let root = Node {
            region: spec.region.clone(),
            radius: r0,
            exclusion: None,
            steps: Vec::new(),
            states: vec![Affine::identity(n)],
            controls: Vec::new(),
        };
        match spec.epsilon {
            None => b.expand(root)?,
            Some(eps) => {
                for k in 0..n {
                    for (side, sign) in [(0usize, 1.0), (1usize, -1.0)] {
                        let mut a = DVector::zeros(n);
                        a[k] = -sign;
                        let region = root.region.with_row(&a, -eps)?;
                        if let Some(r) = b.admit(&region, root.radius)? {
                            let mut child = root.child(region, r);
                            child.exclusion = Some(2 * k + side);
                            b.expand(child)?;
                        }
                    }
                }
            }
        }
    }
    Ok(Partition {
        leaves: b.leaves,
        nodes: b.nodes,
        lp_calls: crate::lp::call_count() - lp0,
        singular_kkt: b.singular,
        steps: spec.steps,
    })
}

impl Builder<'_> {
    fn admit(&mut self, region: &Polytope, parent_radius: f64) -> Result<Option<f64>> {
        self.nodes += 1;
        let (_, r) = region.chebyshev()?;
        if r < -TAU_LP {
            return Ok(None);
        }
        if parent_radius > SLIVER && r <= SLIVER {
            return Ok(None);
        }
        Ok(Some(r))
    }

    fn expand(&mut self, node: Node) -> Result<()> {
        let k = node.steps.len();
        let xk = node.states[k].clone();
        let plant = self.cl.plant();
        let pieces: Vec<Polytope> = plant
            .modes()
            .iter()
            .map(|m| m.region.preimage(&xk.mat, &xk.off))
            .collect::<Result<_>>()?;
        if k == self.steps {
            if self.check_final {
                if let Some(x) = node.region.uncovered_point(&pieces, COVER_MARGIN)? {
                    return Err(Error::DomainGap(x.as_slice().to_vec()));
                }
            }
            return self.finish(node);
        }
        if let Some(x) = node.region.uncovered_point(&pieces, COVER_MARGIN)? {
            return Err(Error::DomainGap(x.as_slice().to_vec()));
        }
        for (i, piece) in pieces.iter().enumerate() {
            let region = node.region.intersect(piece)?;
            if let Some(r) = self.admit(&region, node.radius)? {
                let child = node.child(region, r);
                let width = self.cl.controller().network().hidden().first().map_or(0, |l| l.weights.nrows());
                self.decide_layer(child, i, 0, xk.clone(), Vec::new(), vec![None; width])?;
            }
        }
        Ok(())
    }

    fn decide_layer(
        &mut self,
        node: Node,
        mode: usize,
        layer: usize,
        z: Affine,
        mut pattern: ActivationPattern,
        mut state: Vec<Option<bool>>,
    ) -> Result<()> {
        let net = self.cl.controller().network();
        if layer == net.hidden().len() {
            let u = z.then(&net.output_layer().weights, &net.output_layer().bias);
            return self.project(node, mode, pattern, u);
        }
        let l = &net.hidden()[layer];
        let pre = z.then(&l.weights, &l.bias);
        let mut widest: Option<(usize, f64)> = None;
        for j in 0..state.len() {
            if state[j].is_some() {
                continue;
            }
            let (row, neg_off) = pre.row_le(j);
            let off = -neg_off;
            let (lo, hi) = if row.amax() == 0.0 {
                (off, off)
            } else {
                let mx = node.region.maximize(&row)?;
                let mn = node.region.maximize(&(-&row))?;
                if mx.status != LpStatus::Optimal || mn.status != LpStatus::Optimal {
                    return Err(Error::LpNumericalFailure("neuron bound LP failed on a nonempty node".into()));
                }
                (-mn.value + off, mx.value + off)
            };
            if hi <= NEURON_TOL {
                state[j] = Some(false);
            } else if lo >= -NEURON_TOL {
                state[j] = Some(true);
            } else if widest.is_none_or(|(_, w)| hi - lo > w) {
                widest = Some((j, hi - lo));
            }
        }
        match widest {
            None => {
                let on: Vec<bool> = state.iter().map(|s| s.expect("decided")).collect();
                let mut next = pre;
                for (j, &a) in on.iter().enumerate() {
                    if !a {
                        next.mat.row_mut(j).fill(0.0);
                        next.off[j] = 0.0;
                    }
                }
                pattern.push(on);
                let width = net.layers()[layer + 1].weights.nrows();
                let next_state = if layer + 1 < net.hidden().len() { vec![None; width] } else { Vec::new() };
                self.decide_layer(node, mode, layer + 1, next, pattern, next_state)
            }
            Some((j, _)) => {
                let (row, rhs) = pre.row_le(j);
                for on in [true, false] {
                    let region = if on {
                        node.region.with_row(&(-&row), -rhs)?
                    } else {
                        node.region.with_row(&row, rhs)?
                    };
                    if let Some(r) = self.admit(&region, node.radius)? {
                        let mut s = state.clone();
                        s[j] = Some(on);
                        self.decide_layer(node.child(region, r), mode, layer, z.clone(), pattern.clone(), s)?;
                    }
                }
                Ok(())
            }
        }
    }

    fn project(&mut self, node: Node, mode: usize, pattern: ActivationPattern, u: Affine) -> Result<()> {
        let k = node.steps.len();
        let xk = node.states[k].clone();
        let n = self.cl.state_dim();
        let (g, rhs): (DMatrix<f64>, Affine) = match self.cl.controller() {
            ControllerSpec::Raw { .. } => return self.advance(node, mode, pattern, None, u),
            ControllerSpec::ProjectedInputOnly { input_set, .. } => (
                input_set.f().clone(),
                Affine {
                    mat: DMatrix::zeros(input_set.num_rows(), n),
                    off: input_set.h().clone(),
                },
            ),
            ControllerSpec::ProjectedStateDependent { roi, input_set, .. } => {
                let md = &self.cl.plant().modes()[0];
                let kx = roi.num_rows();
                let ku = input_set.num_rows();
                let mut g = DMatrix::zeros(kx + ku, u.off.len());
                g.rows_mut(0, kx).copy_from(&(roi.f() * &md.b));
                g.rows_mut(kx, ku).copy_from(input_set.f());
                // h_X − F_X A x^k, as an affine function of x⁰
                let fa = roi.f() * &md.a;
                let mut mat = DMatrix::zeros(kx + ku, n);
                mat.rows_mut(0, kx).copy_from(&(-(&fa * &xk.mat)));
                let mut off = DVector::zeros(kx + ku);
                off.rows_mut(0, kx).copy_from(&(roi.h() - &fa * &xk.off));
                off.rows_mut(kx, ku).copy_from(input_set.h());
                (g, Affine { mat, off })
            }
        };
        let m = u.off.len();
        let rows = g.nrows();
        for set in subsets_up_to(rows, m) {
            let s = set.len();
            let mut kkt = DMatrix::zeros(m + s, m + s);
            kkt.view_mut((0, 0), (m, m)).fill_with_identity();
            for (r, &i) in set.iter().enumerate() {
                for j in 0..m {
                    kkt[(m + r, j)] = g[(i, j)];
                    kkt[(j, m + r)] = g[(i, j)];
                }
            }
            let mut rmat = DMatrix::zeros(m + s, n);
            let mut roff = DVector::zeros(m + s);
            rmat.rows_mut(0, m).copy_from(&u.mat);
            roff.rows_mut(0, m).copy_from(&u.off);
            for (r, &i) in set.iter().enumerate() {
                rmat.row_mut(m + r).copy_from(&rhs.mat.row(i));
                roff[m + r] = rhs.off[i];
            }
            let svd = kkt.clone().svd(true, true);
            let smax = svd.singular_values.max();
            let singular = svd.singular_values.min() <= 1e-10 * smax.max(1.0);
            let inv = svd
                .pseudo_inverse(1e-10 * smax.max(1.0))
                .map_err(|e| Error::NumericalFailure(e.to_string()))?;
            let sol = Affine {
                mat: &inv * &rmat,
                off: &inv * &roff,
            };
            if singular {
                // only keep rank-deficient systems that are consistent for every x
                let res_m = &kkt * &sol.mat - &rmat;
                let res_o = &kkt * &sol.off - &roff;
                if res_m.amax() > 1e-9 || res_o.amax() > 1e-9 {
                    continue;
                }
            }
            let up = Affine {
                mat: sol.mat.rows(0, m).into_owned(),
                off: sol.off.rows(0, m).into_owned(),
            };
            let mut extra_f = Vec::new();
            let mut extra_h = Vec::new();
            for r in 0..s {
                // μ_r(x) ≥ 0
                extra_f.push(-sol.mat.row(m + r).transpose());
                extra_h.push(sol.off[m + r]);
            }
            for i in 0..rows {
                if set.contains(&i) {
                    continue;
                }
                // G_i u(x) ≤ g_i(x)
                let gi = g.row(i);
                let a = (gi * &up.mat - rhs.mat.row(i)).transpose();
                extra_f.push(a);
                extra_h.push(rhs.off[i] - (gi * &up.off)[0]);
            }
            let f = DMatrix::from_fn(extra_f.len(), n, |i, j| extra_f[i][j]);
            let h = DVector::from_vec(extra_h);
            let region = if f.nrows() == 0 { node.region.clone() } else { node.region.with_rows(&f, &h)? };
            if let Some(r) = self.admit(&region, node.radius)? {
                if singular {
                    self.singular += 1;
                }
                let child = node.child(region, r);
                self.advance(child, mode, pattern.clone(), Some(set.clone()), up)?;
            }
        }
        Ok(())
    }

    fn advance(
        &mut self,
        mut node: Node,
        mode: usize,
        pattern: ActivationPattern,
        active_set: Option<Vec<usize>>,
        u: Affine,
    ) -> Result<()> {
        let k = node.steps.len();
        let md = &self.cl.plant().modes()[mode];
        let xk = &node.states[k];
        let next = Affine {
            mat: &md.a * &xk.mat + &md.b * &u.mat,
            off: &md.a * &xk.off + &md.b * &u.off + &md.c,
        };
        node.states.push(next);
        node.controls.push(u);
        node.steps.push(StepDecision {
            mode,
            pattern,
            active_set,
        });
        self.expand(node)
    }

    fn finish(&mut self, node: Node) -> Result<()> {
        let faces = node.region.enumerate_faces()?;
        let bbox = node.region.bounding_box()?;
        self.leaves.push(Leaf {
            region: faces.polytope.clone(),
            exclusion: node.exclusion,
            steps: node.steps,
            states: node.states,
            controls: node.controls,
            bbox,
            faces,
        });
        Ok(())
    }
}

/// All subsets of `0..n` with at most `k` elements, by size then lexicographically.
fn subsets_up_to(n: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new()];
    let mut frontier = vec![Vec::new()];
    for _ in 0..k.min(n) {
        let mut next = Vec::new();
        for s in &frontier {
            let start = s.last().map_or(0, |&l| l + 1);
            for i in start..n {
                let mut t: Vec<usize> = s.clone();
                t.push(i);
                next.push(t);
            }
        }
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out
}

impl Partition {
    /// Index of a leaf whose region contains `x` and whose decisions agree with
    /// the closed loop's actual modes and activations along the horizon.
    pub fn locate(&self, cl: &ClosedLoop, x: &DVector<f64>) -> Option<usize> {
        let net = cl.controller().network();
        let mut traj = vec![x.clone()];
        for _ in 0..self.steps {
            let next = cl.step(traj.last().expect("nonempty")).ok()?;
            traj.push(next);
        }
        'leaf: for (idx, leaf) in self.leaves.iter().enumerate() {
            if !leaf.region.contains(x, 1e-9) {
                continue;
            }
            for (k, dec) in leaf.steps.iter().enumerate() {
                let xk = &traj[k];
                if !cl.plant().modes()[dec.mode].region.contains(xk, 1e-9) {
                    continue 'leaf;
                }
                let mut z = xk.clone();
                for (layer, pat) in net.hidden().iter().zip(&dec.pattern) {
                    let pre = layer.apply(&z);
                    for (j, &on) in pat.iter().enumerate() {
                        if (pre[j] > 0.0) != on && pre[j].abs() > 1e-9 {
                            continue 'leaf;
                        }
                    }
                    z = pre.map(|v| v.max(0.0));
                }
            }
            return Some(idx);
        }
        None
    }

    pub fn is_empty(&self) -> bool {
        self.leaves.is_empty()
    }
}
