//! PWA plants, ReLU controllers and their closed loop.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::geometry::{AxisBox, Polytope};
use crate::lp::{solve_lp, LpProblem, LpStatus, TAU_LP};
use crate::verifier::projection::{project_onto, projection_constraints};

/// Inflation applied to the controller output box.
pub const OUTPUT_BOX_MARGIN: f64 = 1e-6;

const EQUILIBRIUM_TOL: f64 = 1e-9;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(try_from = "ModeRepr", into = "ModeRepr")]
pub struct Mode {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DVector<f64>,
    /// `R_i = {x | Fx ≤ h}`.
    pub region: Polytope,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
#[serde(expecting = "a plant mode {\"A\", \"B\", \"c\", \"F\", \"h\"}")]
struct ModeRepr {
    #[serde(rename = "A", with = "crate::serde_util::matrix")]
    a: DMatrix<f64>,
    #[serde(rename = "B", with = "crate::serde_util::matrix")]
    b: DMatrix<f64>,
    #[serde(with = "crate::serde_util::vector")]
    c: DVector<f64>,
    #[serde(rename = "F", with = "crate::serde_util::matrix")]
    f: DMatrix<f64>,
    #[serde(with = "crate::serde_util::vector")]
    h: DVector<f64>,
}

impl TryFrom<ModeRepr> for Mode {
    type Error = String;

    fn try_from(r: ModeRepr) -> std::result::Result<Self, String> {
        Ok(Mode {
            a: r.a,
            b: r.b,
            c: r.c,
            region: Polytope::new(r.f, r.h).map_err(|e| e.to_string())?,
        })
    }
}

impl From<Mode> for ModeRepr {
    fn from(m: Mode) -> Self {
        ModeRepr {
            a: m.a,
            b: m.b,
            c: m.c,
            f: m.region.f().clone(),
            h: m.region.h().clone(),
        }
    }
}

impl Mode {
    pub fn apply(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        &self.a * x + &self.b * u + &self.c
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(try_from = "PwaSystemRepr", into = "PwaSystemRepr")]
pub struct PwaSystem {
    modes: Vec<Mode>,
    state_dim: usize,
    input_dim: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
#[serde(expecting = "a plant {\"modes\": [...]}")]
struct PwaSystemRepr {
    modes: Vec<Mode>,
}

impl TryFrom<PwaSystemRepr> for PwaSystem {
    type Error = String;

    fn try_from(r: PwaSystemRepr) -> std::result::Result<Self, String> {
        PwaSystem::new(r.modes).map_err(|e| e.to_string())
    }
}

impl From<PwaSystem> for PwaSystemRepr {
    fn from(s: PwaSystem) -> Self {
        PwaSystemRepr { modes: s.modes }
    }
}

impl PwaSystem {
    pub fn new(modes: Vec<Mode>) -> Result<Self> {
        let first = modes.first().ok_or_else(|| Error::InvalidInput("plant has no modes".into()))?;
        let n = first.a.nrows();
        let m = first.b.ncols();
        for (i, md) in modes.iter().enumerate() {
            if md.a.nrows() != n || md.a.ncols() != n || md.b.nrows() != n || md.b.ncols() != m || md.c.len() != n {
                return Err(dim_err(format!("mode {i} has inconsistent A/B/c shapes")));
            }
            if md.region.dim() != n {
                return Err(dim_err(format!("mode {i} region has dimension {}", md.region.dim())));
            }
            md.region.bounding_box().map_err(|e| match e {
                Error::Unbounded => Error::InvalidInput(format!("mode {i} region is unbounded")),
                e => e,
            })?;
        }
        let sys = PwaSystem {
            modes,
            state_dim: n,
            input_dim: m,
        };
        let zero = DVector::zeros(n);
        let i0 = sys
            .mode_of(&zero)
            .ok_or_else(|| Error::InvalidInput("no plant region contains the origin".into()))?;
        if sys.modes[i0].c.norm() > EQUILIBRIUM_TOL {
            return Err(Error::InvalidInput(format!(
                "origin is not an equilibrium: mode {i0} has a nonzero offset"
            )));
        }
        sys.check_well_posed(1000)?;
        Ok(sys)
    }

    /// Single-mode plant `x₊ = Ax + Bu` on `region`.
    pub fn lti(a: DMatrix<f64>, b: DMatrix<f64>, region: Polytope) -> Result<Self> {
        let n = a.nrows();
        PwaSystem::new(vec![Mode {
            a,
            b,
            c: DVector::zeros(n),
            region,
        }])
    }

    pub fn modes(&self) -> &[Mode] {
        &self.modes
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn is_lti(&self) -> bool {
        self.modes.len() == 1
    }

    /// Lowest-index mode whose region contains `x` within `TAU_LP`.
    pub fn mode_of(&self, x: &DVector<f64>) -> Option<usize> {
        self.modes.iter().position(|m| m.region.contains(x, TAU_LP))
    }

    pub fn step(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>> {
        if x.len() != self.state_dim || u.len() != self.input_dim {
            return Err(dim_err("state or input length"));
        }
        let i = self.mode_of(x).ok_or_else(|| Error::OutOfDomain(x.as_slice().to_vec()))?;
        Ok(self.modes[i].apply(x, u))
    }

    /// Bounding box of the union of all regions.
    pub fn domain_box(&self) -> Result<AxisBox> {
        let mut lo = DVector::from_element(self.state_dim, f64::INFINITY);
        let mut hi = DVector::from_element(self.state_dim, f64::NEG_INFINITY);
        for m in &self.modes {
            let b = m.region.bounding_box()?;
            lo = lo.zip_map(&b.lower, f64::min);
            hi = hi.zip_map(&b.upper, f64::max);
        }
        AxisBox::new(lo, hi)
    }

    /// Samples overlaps of regions and checks that overlapping modes agree there.
    pub fn check_well_posed(&self, samples: usize) -> Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
        for i in 0..self.modes.len() {
            for j in i + 1..self.modes.len() {
                let both = self.modes[i].region.intersect(&self.modes[j].region)?;
                if both.chebyshev()?.1 < -TAU_LP {
                    continue;
                }
                let verts = both.enumerate_faces()?.vertices();
                for _ in 0..samples {
                    let w: Vec<f64> = (0..verts.len()).map(|_| rng.gen::<f64>()).collect();
                    let total: f64 = w.iter().sum();
                    let x = verts.iter().zip(&w).fold(DVector::zeros(self.state_dim), |acc, (v, wk)| acc + v * (wk / total));
                    let u = DVector::from_fn(self.input_dim, |_, _| rng.gen_range(-1.0..1.0));
                    let d = (self.modes[i].apply(&x, &u) - self.modes[j].apply(&x, &u)).amax();
                    if d > 1e-9 * (1.0 + x.amax()) {
                        return Err(Error::InvalidInput(format!(
                            "modes {i} and {j} disagree on their common boundary (gap {d:.3e})"
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Layer {
    #[serde(rename = "W", with = "crate::serde_util::matrix")]
    pub weights: DMatrix<f64>,
    #[serde(rename = "b", with = "crate::serde_util::vector")]
    pub bias: DVector<f64>,
}

impl Layer {
    pub fn apply(&self, z: &DVector<f64>) -> DVector<f64> {
        &self.weights * z + &self.bias
    }
}

/// `z_{ℓ+1} = max(W_ℓ z_ℓ + b_ℓ, 0)` for every layer but the last, which is affine.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(try_from = "NetworkRepr", into = "NetworkRepr")]
pub struct ReluNetwork {
    layers: Vec<Layer>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
#[serde(expecting = "a network {\"layers\": [{\"W\", \"b\"}, ...]}")]
struct NetworkRepr {
    layers: Vec<Layer>,
}

impl TryFrom<NetworkRepr> for ReluNetwork {
    type Error = String;

    fn try_from(r: NetworkRepr) -> std::result::Result<Self, String> {
        ReluNetwork::new(r.layers).map_err(|e| e.to_string())
    }
}

impl From<ReluNetwork> for NetworkRepr {
    fn from(n: ReluNetwork) -> Self {
        NetworkRepr { layers: n.layers }
    }
}

/// Per hidden layer, per neuron: `true` when the pre-activation is positive.
pub type ActivationPattern = Vec<Vec<bool>>;

impl ReluNetwork {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidInput("network has no layers".into()));
        }
        for (l, layer) in layers.iter().enumerate() {
            if layer.weights.nrows() != layer.bias.len() {
                return Err(dim_err(format!("layer {l}: W has {} rows, b has {}", layer.weights.nrows(), layer.bias.len())));
            }
            if l > 0 && layers[l - 1].weights.nrows() != layer.weights.ncols() {
                return Err(dim_err(format!("layer {l} does not chain with layer {}", l - 1)));
            }
        }
        Ok(ReluNetwork { layers })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn hidden(&self) -> &[Layer] {
        &self.layers[..self.layers.len() - 1]
    }

    pub fn output_layer(&self) -> &Layer {
        self.layers.last().expect("nonempty")
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weights.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.output_layer().weights.nrows()
    }

    pub fn forward(&self, x: &DVector<f64>) -> (DVector<f64>, ActivationPattern) {
        let mut z = x.clone();
        let mut pattern = Vec::with_capacity(self.layers.len() - 1);
        for layer in self.hidden() {
            let pre = layer.apply(&z);
            pattern.push(pre.iter().map(|v| *v > 0.0).collect());
            z = pre.map(|v| v.max(0.0));
        }
        (self.output_layer().apply(&z), pattern)
    }

    pub fn eval(&self, x: &DVector<f64>) -> DVector<f64> {
        self.forward(x).0
    }

    /// Affine map `x ↦ Mx + m` of the network on the region of `pattern`.
    pub fn affine_on_pattern(&self, pattern: &ActivationPattern) -> (DMatrix<f64>, DVector<f64>) {
        let n = self.input_dim();
        let mut mat = DMatrix::identity(n, n);
        let mut off = DVector::zeros(n);
        for (layer, pat) in self.hidden().iter().zip(pattern) {
            let mut nm = &layer.weights * &mat;
            let mut no = &layer.weights * &off + &layer.bias;
            for (j, on) in pat.iter().enumerate() {
                if !on {
                    nm.row_mut(j).fill(0.0);
                    no[j] = 0.0;
                }
            }
            mat = nm;
            off = no;
        }
        let out = self.output_layer();
        (&out.weights * &mat, &out.weights * &off + &out.bias)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "snake_case")]
pub enum ControllerSpec {
    Raw {
        network: ReluNetwork,
    },
    ProjectedStateDependent {
        network: ReluNetwork,
        roi: Polytope,
        input_set: Polytope,
    },
    ProjectedInputOnly {
        network: ReluNetwork,
        input_set: Polytope,
    },
}

impl ControllerSpec {
    pub fn network(&self) -> &ReluNetwork {
        match self {
            ControllerSpec::Raw { network }
            | ControllerSpec::ProjectedStateDependent { network, .. }
            | ControllerSpec::ProjectedInputOnly { network, .. } => network,
        }
    }

    pub fn is_projected(&self) -> bool {
        !matches!(self, ControllerSpec::Raw { .. })
    }
}

#[derive(Clone, Debug)]
pub struct ClosedLoop {
    plant: PwaSystem,
    controller: ControllerSpec,
    input_box: Polytope,
}

#[derive(Clone, Debug)]
pub struct Rollout {
    pub states: Vec<DVector<f64>>,
    /// Set when the trajectory stopped early because it left the plant domain.
    pub left_domain: bool,
}

impl ClosedLoop {
    /// Composes plant and controller and checks that the origin is an equilibrium.
    pub fn new(plant: PwaSystem, controller: ControllerSpec) -> Result<Self> {
        let cl = ClosedLoop::new_unchecked(plant, controller)?;
        let zero = DVector::zeros(cl.state_dim());
        let pi0 = cl.controller.network().eval(&zero);
        if pi0.amax() > EQUILIBRIUM_TOL {
            return Err(Error::InvalidInput(format!("controller output at the origin is {:?}, not 0", pi0.as_slice())));
        }
        let f0 = cl.step(&zero)?;
        if f0.amax() > EQUILIBRIUM_TOL {
            return Err(Error::InvalidInput("closed loop does not fix the origin".into()));
        }
        Ok(cl)
    }

    /// Like [`ClosedLoop::new`] without the equilibrium checks; for loops used
    /// purely as test maps.
    pub fn new_unchecked(plant: PwaSystem, controller: ControllerSpec) -> Result<Self> {
        let net = controller.network();
        if net.input_dim() != plant.state_dim() || net.output_dim() != plant.input_dim() {
            return Err(dim_err("controller does not match plant dimensions"));
        }
        let input_box = match &controller {
            ControllerSpec::Raw { network } => output_range_box(network, &plant.domain_box()?.to_polytope())?,
            ControllerSpec::ProjectedStateDependent { roi, input_set, .. } => {
                if !plant.is_lti() {
                    return Err(Error::InvalidInput(
                        "state-dependent projection needs a single-mode plant".into(),
                    ));
                }
                if roi.dim() != plant.state_dim() || input_set.dim() != plant.input_dim() {
                    return Err(dim_err("projection sets do not match plant dimensions"));
                }
                input_set.bounding_box()?.inflate(OUTPUT_BOX_MARGIN).to_polytope()
            }
            ControllerSpec::ProjectedInputOnly { input_set, .. } => {
                if input_set.dim() != plant.input_dim() {
                    return Err(dim_err("input set does not match plant input dimension"));
                }
                input_set.bounding_box()?.inflate(OUTPUT_BOX_MARGIN).to_polytope()
            }
        };
        Ok(ClosedLoop {
            plant,
            controller,
            input_box,
        })
    }

    pub fn plant(&self) -> &PwaSystem {
        &self.plant
    }

    pub fn controller(&self) -> &ControllerSpec {
        &self.controller
    }

    pub fn input_box(&self) -> &Polytope {
        &self.input_box
    }

    pub fn state_dim(&self) -> usize {
        self.plant.state_dim()
    }

    pub fn control(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        let pi = self.controller.network().eval(x);
        match &self.controller {
            ControllerSpec::Raw { .. } => Ok(pi),
            ControllerSpec::ProjectedStateDependent { roi, input_set, .. } => {
                let md = &self.plant.modes()[0];
                let (g, rhs) = projection_constraints(x, roi, &md.a, &md.b, input_set)?;
                Ok(project_onto(&pi, &g, &rhs)?.u)
            }
            ControllerSpec::ProjectedInputOnly { input_set, .. } => {
                Ok(project_onto(&pi, input_set.f(), input_set.h())?.u)
            }
        }
    }

    pub fn step(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        let u = self.control(x)?;
        self.plant.step(x, &u)
    }

    pub fn rollout(&self, x0: &DVector<f64>, k: usize) -> Rollout {
        let mut states = vec![x0.clone()];
        let mut x = x0.clone();
        for _ in 0..k {
            match self.step(&x) {
                Ok(next) => {
                    x = next;
                    states.push(x.clone());
                }
                Err(_) => {
                    return Rollout {
                        states,
                        left_domain: true,
                    }
                }
            }
        }
        let left_domain = self.plant.mode_of(&x).is_none();
        Rollout { states, left_domain }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BoundMethod {
    Interval,
    Lp,
}

/// Bounds on the pre-activations of every layer (the last entry is the output).
pub fn preactivation_bounds(net: &ReluNetwork, input: &Polytope, method: BoundMethod) -> Result<Vec<AxisBox>> {
    if input.dim() != net.input_dim() {
        return Err(dim_err("input polytope dimension"));
    }
    let ibox = input.bounding_box()?;
    let mut out = Vec::with_capacity(net.layers().len());
    let mut zl = ibox.lower.clone();
    let mut zu = ibox.upper.clone();
    // triangle relaxation rows over the stacked variables (x, z_1, …, z_ℓ)
    let n0 = net.input_dim();
    let mut rel_rows: Vec<(Vec<f64>, f64)> = Vec::new();
    for i in 0..input.num_rows() {
        rel_rows.push((input.f().row(i).iter().copied().collect(), input.h()[i]));
    }
    let mut nvars = n0;
    let mut z_offset = 0usize;
    for (l, layer) in net.layers().iter().enumerate() {
        let wp = layer.weights.map(|v| v.max(0.0));
        let wn = layer.weights.map(|v| v.min(0.0));
        let mut lo = &wp * &zl + &wn * &zu + &layer.bias;
        let mut hi = &wp * &zu + &wn * &zl + &layer.bias;
        if method == BoundMethod::Lp {
            let (f, h): (Vec<Vec<f64>>, Vec<f64>) = rel_rows.iter().cloned().unzip();
            let poly = Polytope::from_rows(f, h)?;
            for j in 0..layer.weights.nrows() {
                let mut c = DVector::zeros(nvars);
                for k in 0..layer.weights.ncols() {
                    c[z_offset + k] = layer.weights[(j, k)];
                }
                let mx = solve_lp(&LpProblem { objective: c.clone(), constraints: poly.clone(), equalities: None })?;
                let mn = solve_lp(&LpProblem { objective: -c, constraints: poly.clone(), equalities: None })?;
                if mx.status == LpStatus::Optimal {
                    hi[j] = hi[j].min(mx.value + layer.bias[j] + TAU_LP);
                }
                if mn.status == LpStatus::Optimal {
                    lo[j] = lo[j].max(-mn.value + layer.bias[j] - TAU_LP);
                }
                if lo[j] > hi[j] {
                    let mid = 0.5 * (lo[j] + hi[j]);
                    lo[j] = mid;
                    hi[j] = mid;
                }
            }
        }
        out.push(AxisBox::new(lo.clone(), hi.clone())?);
        if l + 1 == net.layers().len() {
            break;
        }
        if method == BoundMethod::Lp {
            // append z_{l+1} variables and their relaxation
            let width = layer.weights.nrows();
            let new_n = nvars + width;
            for row in rel_rows.iter_mut() {
                row.0.resize(new_n, 0.0);
            }
            let prev_off = if l == 0 { 0 } else { z_offset };
            for j in 0..width {
                let mut pre = vec![0.0; new_n];
                for k in 0..layer.weights.ncols() {
                    pre[prev_off + k] = layer.weights[(j, k)];
                }
                let b = layer.bias[j];
                let zi = nvars + j;
                let mut unit = vec![0.0; new_n];
                unit[zi] = 1.0;
                let neg = |v: &[f64]| v.iter().map(|x| -x).collect::<Vec<f64>>();
                let sub = |a: &[f64], c: &[f64]| a.iter().zip(c).map(|(x, y)| x - y).collect::<Vec<f64>>();
                if hi[j] <= 0.0 {
                    rel_rows.push((unit.clone(), 0.0));
                    rel_rows.push((neg(&unit), 0.0));
                } else if lo[j] >= 0.0 {
                    // z = pre + b
                    rel_rows.push((sub(&unit, &pre), b));
                    rel_rows.push((sub(&pre, &unit), -b));
                } else {
                    rel_rows.push((neg(&unit), 0.0));
                    // z ≥ pre + b
                    rel_rows.push((sub(&pre, &unit), -b));
                    // z ≤ s (pre + b − lo), s = hi/(hi − lo)
                    let s = hi[j] / (hi[j] - lo[j]);
                    let row: Vec<f64> = unit.iter().zip(&pre).map(|(u, p)| u - s * p).collect();
                    rel_rows.push((row, s * (b - lo[j])));
                }
            }
            z_offset = nvars;
            nvars = new_n;
        }
        zl = lo.map(|v| v.max(0.0));
        zu = hi.map(|v| v.max(0.0));
    }
    Ok(out)
}

/// Activation regions enumerated before [`output_range_box`] settles for the relaxation.
const EXACT_RANGE_LEAVES: usize = 4096;

/// A box containing `π(roi)`, inflated by [`OUTPUT_BOX_MARGIN`].
///
/// Exact (up to the LP tolerance) when the activation regions of `net` over `roi`
/// number at most a few thousand; otherwise the triangle-relaxation bounds.
pub fn output_range_box(net: &ReluNetwork, roi: &Polytope) -> Result<Polytope> {
    let bounds = preactivation_bounds(net, roi, BoundMethod::Lp)?;
    let mut out = bounds.last().expect("at least one layer").clone();
    let mut range = ExactRange {
        net,
        lo: DVector::from_element(net.output_dim(), f64::INFINITY),
        hi: DVector::from_element(net.output_dim(), f64::NEG_INFINITY),
        leaves: 0,
    };
    let n = net.input_dim();
    if range.layer(roi.clone(), 0, DMatrix::identity(n, n), DVector::zeros(n))? {
        for i in 0..out.dim() {
            if range.lo[i] <= range.hi[i] {
                out.lower[i] = out.lower[i].max(range.lo[i] - TAU_LP);
                out.upper[i] = out.upper[i].min(range.hi[i] + TAU_LP);
            }
        }
    }
    Ok(out.inflate(OUTPUT_BOX_MARGIN).to_polytope())
}

/// Depth-first enumeration of activation regions; `z = mat·x + off` is the current layer input.
struct ExactRange<'a> {
    net: &'a ReluNetwork,
    lo: DVector<f64>,
    hi: DVector<f64>,
    leaves: usize,
}

impl ExactRange<'_> {
    /// `false` once the leaf cap is hit.
    fn layer(&mut self, region: Polytope, l: usize, mat: DMatrix<f64>, off: DVector<f64>) -> Result<bool> {
        let layer = &self.net.layers()[l];
        let pm = &layer.weights * &mat;
        let po = &layer.weights * &off + &layer.bias;
        if l + 1 == self.net.layers().len() {
            self.leaves += 1;
            if self.leaves > EXACT_RANGE_LEAVES {
                return Ok(false);
            }
            for i in 0..pm.nrows() {
                let c = pm.row(i).transpose();
                let mx = region.maximize(&c)?;
                let mn = region.maximize(&-&c)?;
                if mx.is_optimal() && mn.is_optimal() {
                    self.hi[i] = self.hi[i].max(mx.value + po[i]);
                    self.lo[i] = self.lo[i].min(-mn.value + po[i]);
                }
            }
            return Ok(true);
        }
        let mut mask = vec![false; pm.nrows()];
        self.neuron(region, l, &pm, &po, 0, &mut mask)
    }

    fn neuron(
        &mut self,
        region: Polytope,
        l: usize,
        pm: &DMatrix<f64>,
        po: &DVector<f64>,
        j: usize,
        mask: &mut Vec<bool>,
    ) -> Result<bool> {
        if j == pm.nrows() {
            let d = DVector::from_iterator(mask.len(), mask.iter().map(|&on| if on { 1.0 } else { 0.0 }));
            let mat = DMatrix::from_diagonal(&d) * pm;
            let off = po.component_mul(&d);
            return self.layer(region, l + 1, mat, off);
        }
        let c = pm.row(j).transpose();
        let mx = region.maximize(&c)?;
        if !mx.is_optimal() {
            return Ok(true);
        }
        let mn = region.maximize(&-&c)?;
        let (top, bottom) = (mx.value + po[j], -mn.value + po[j]);
        if top <= 0.0 {
            mask[j] = false;
            return self.neuron(region, l, pm, po, j + 1, mask);
        }
        if bottom >= 0.0 {
            mask[j] = true;
            return self.neuron(region, l, pm, po, j + 1, mask);
        }
        mask[j] = false;
        if !self.neuron(region.with_row(&c, -po[j])?, l, pm, po, j + 1, mask)? {
            return Ok(false);
        }
        mask[j] = true;
        self.neuron(region.with_row(&-&c, po[j])?, l, pm, po, j + 1, mask)
    }
}

#[derive(Clone, Debug)]
pub struct LocalLinearization {
    pub a_cl: DMatrix<f64>,
    /// Region around the origin on which `f_cl(x) = A_cl x`.
    pub region: Polytope,
    pub mode: usize,
}

pub fn local_linearization(cl: &ClosedLoop) -> Result<LocalLinearization> {
    let plant = cl.plant();
    let n = plant.state_dim();
    let zero = DVector::zeros(n);
    let i0 = plant.mode_of(&zero).ok_or_else(|| Error::OutOfDomain(vec![0.0; n]))?;
    let md = &plant.modes()[i0];
    let region = &md.region;
    for k in 0..region.num_rows() {
        if region.f().row(k).norm() > 0.0 && region.h()[k] <= 0.0 {
            return Err(Error::DegenerateOrigin(format!("origin lies on the boundary of plant region {i0}")));
        }
    }
    let net = cl.controller().network();
    let mut rows: Vec<(DVector<f64>, f64)> = Vec::new();
    let mut mat = DMatrix::identity(n, n);
    let mut off = DVector::zeros(n);
    for (l, layer) in net.hidden().iter().enumerate() {
        let mut pm = &layer.weights * &mat;
        let mut po = &layer.weights * &off + &layer.bias;
        for j in 0..layer.weights.nrows() {
            let row = pm.row(j).transpose();
            let at0 = po[j];
            let flat = row.amax() <= 1e-14;
            if at0.abs() <= 1e-12 && !flat {
                return Err(Error::DegenerateOrigin(format!(
                    "neuron {j} of layer {l} has zero pre-activation at the origin"
                )));
            }
            if at0 > 0.0 {
                // stays on while -(row·x) ≤ at0
                if !flat {
                    rows.push((-row, at0));
                }
            } else {
                if !flat {
                    rows.push((row, -at0));
                }
                pm.row_mut(j).fill(0.0);
                po[j] = 0.0;
            }
        }
        mat = pm;
        off = po;
    }
    let out = net.output_layer();
    let k = &out.weights * &mat;
    let k0 = &out.weights * &off + &out.bias;
    match cl.controller() {
        ControllerSpec::Raw { .. } => {}
        ControllerSpec::ProjectedStateDependent { roi, input_set, .. } => {
            // no projection constraint is active at the origin, and none becomes
            // active while F_X(A + BK)x ≤ h_X and C_u K x ≤ d_u hold
            let fx = roi.f() * (&md.a + &md.b * &k);
            let rhs = roi.h() - roi.f() * (&md.b * &k0);
            push_slack_rows(&mut rows, &fx, &rhs)?;
            let fu = input_set.f() * &k;
            let rhs = input_set.h() - input_set.f() * &k0;
            push_slack_rows(&mut rows, &fu, &rhs)?;
        }
        ControllerSpec::ProjectedInputOnly { input_set, .. } => {
            let fu = input_set.f() * &k;
            let rhs = input_set.h() - input_set.f() * &k0;
            push_slack_rows(&mut rows, &fu, &rhs)?;
        }
    }
    let a_cl = &md.a + &md.b * &k;
    let mut d0 = region.clone();
    if !rows.is_empty() {
        let f = DMatrix::from_fn(rows.len(), n, |i, j| rows[i].0[j]);
        let h = DVector::from_fn(rows.len(), |i, _| rows[i].1);
        d0 = d0.with_rows(&f, &h)?;
    }
    Ok(LocalLinearization {
        a_cl,
        region: d0,
        mode: i0,
    })
}

fn push_slack_rows(rows: &mut Vec<(DVector<f64>, f64)>, f: &DMatrix<f64>, h: &DVector<f64>) -> Result<()> {
    for i in 0..f.nrows() {
        let row = f.row(i).transpose();
        if row.amax() <= 1e-14 {
            if h[i] < 0.0 {
                return Err(Error::DegenerateOrigin("projection set excludes the origin's input".into()));
            }
            continue;
        }
        if h[i] <= 1e-12 {
            return Err(Error::DegenerateOrigin("a projection constraint is tight at the origin".into()));
        }
        rows.push((row, h[i]));
    }
    Ok(())
}

/// Network computing `clamp(Kx, lower, upper)` exactly:
/// `lower + ReLU(Kx − lower) − ReLU(Kx − upper)`.
pub fn saturated_linear_controller(k: &DMatrix<f64>, lower: &DVector<f64>, upper: &DVector<f64>) -> Result<ReluNetwork> {
    let m = k.nrows();
    let n = k.ncols();
    if lower.len() != m || upper.len() != m {
        return Err(dim_err("limits must have one entry per input"));
    }
    if lower.iter().zip(upper.iter()).any(|(l, u)| !(l <= u)) || !k.iter().all(|v| v.is_finite()) {
        return Err(Error::InvalidInput("limits must satisfy lower ≤ upper and K must be finite".into()));
    }
    let mut w0 = DMatrix::zeros(2 * m, n);
    w0.rows_mut(0, m).copy_from(k);
    w0.rows_mut(m, m).copy_from(k);
    let mut b0 = DVector::zeros(2 * m);
    b0.rows_mut(0, m).copy_from(&(-lower));
    b0.rows_mut(m, m).copy_from(&(-upper));
    let mut w1 = DMatrix::zeros(m, 2 * m);
    for i in 0..m {
        w1[(i, i)] = 1.0;
        w1[(i, m + i)] = -1.0;
    }
    ReluNetwork::new(vec![
        Layer { weights: w0, bias: b0 },
        Layer { weights: w1, bias: lower.clone() },
    ])
}

/// Uniform samples from a bounded polytope by rejection from its bounding box.
pub fn sample_polytope(p: &Polytope, count: usize, rng: &mut impl Rng) -> Result<Vec<DVector<f64>>> {
    let b = p.bounding_box()?;
    let mut out = Vec::with_capacity(count);
    let mut tries = 0usize;
    while out.len() < count {
        tries += 1;
        if tries > 1000 * count.max(1) + 100_000 {
            return Err(Error::NumericalFailure("rejection sampling found too few points".into()));
        }
        let x = DVector::from_fn(b.dim(), |i, _| {
            if b.upper[i] > b.lower[i] {
                rng.gen_range(b.lower[i]..=b.upper[i])
            } else {
                b.lower[i]
            }
        });
        if p.contains(&x, 0.0) {
            out.push(x);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(x: &[f64]) -> DVector<f64> {
        DVector::from_vec(x.to_vec())
    }

    fn double_integrator() -> PwaSystem {
        PwaSystem::lti(
            DMatrix::from_row_slice(2, 2, &[1.1, 1.1, 0.0, 1.1]),
            DMatrix::from_row_slice(2, 1, &[1.0, 0.5]),
            Polytope::cube(2, 5.0),
        )
        .unwrap()
    }

    fn pendulum() -> PwaSystem {
        let m1 = Mode {
            a: DMatrix::from_row_slice(2, 2, &[1.0, 0.01, 0.1, 1.0]),
            b: DMatrix::from_row_slice(2, 1, &[0.0, 0.01]),
            c: v(&[0.0, 0.0]),
            region: Polytope::from_box(&v(&[-0.2, -1.5]), &v(&[0.1, 1.5])),
        };
        let m2 = Mode {
            a: DMatrix::from_row_slice(2, 2, &[1.0, 0.01, -0.9, 1.0]),
            b: DMatrix::from_row_slice(2, 1, &[0.0, 0.01]),
            c: v(&[0.0, 0.1]),
            region: Polytope::from_box(&v(&[0.1, -1.5]), &v(&[0.2, 1.5])),
        };
        PwaSystem::new(vec![m1, m2]).unwrap()
    }

    #[test]
    fn plant_steps() {
        let di = double_integrator();
        assert_eq!(di.step(&v(&[1.0, 0.0]), &v(&[0.0])).unwrap(), v(&[1.1, 0.0]));
        assert_eq!(di.step(&v(&[0.0, 0.0]), &v(&[0.0])).unwrap(), v(&[0.0, 0.0]));
        let pend = pendulum();
        let y = pend.step(&v(&[0.15, 0.0]), &v(&[0.0])).unwrap();
        assert!((y - v(&[0.15, -0.035])).norm() < 1e-15);
        assert!(matches!(pend.step(&v(&[0.3, 0.0]), &v(&[0.0])), Err(Error::OutOfDomain(_))));
        let r1 = pend.modes()[0].region.bounding_box().unwrap();
        assert_eq!(r1.lower, v(&[-0.2, -1.5]));
        assert_eq!(r1.upper, v(&[0.1, 1.5]));
    }

    #[test]
    fn ill_posed_plant_is_rejected() {
        let m1 = Mode {
            a: DMatrix::identity(1, 1) * 0.5,
            b: DMatrix::zeros(1, 1),
            c: v(&[0.0]),
            region: Polytope::from_box(&v(&[-1.0]), &v(&[0.5])),
        };
        let mut m2 = m1.clone();
        m2.region = Polytope::from_box(&v(&[0.5]), &v(&[1.0]));
        m2.c = v(&[0.1]);
        assert!(PwaSystem::new(vec![m1, m2]).is_err());
    }

    #[test]
    fn relu_pattern_convention() {
        let net = ReluNetwork::new(vec![
            Layer { weights: DMatrix::identity(2, 2), bias: v(&[0.0, 0.0]) },
            Layer { weights: DMatrix::identity(2, 2), bias: v(&[0.0, 0.0]) },
        ])
        .unwrap();
        let (y, pat) = net.forward(&v(&[1.0, -1.0]));
        assert_eq!(y, v(&[1.0, 0.0]));
        assert_eq!(pat, vec![vec![true, false]]);
        let (_, pat0) = net.forward(&v(&[0.0, 0.0]));
        assert_eq!(pat0, vec![vec![false, false]]);
    }

    #[test]
    fn clamp_network() {
        let net = saturated_linear_controller(&DMatrix::from_row_slice(1, 1, &[1.0]), &v(&[-1.0]), &v(&[1.0])).unwrap();
        assert_eq!(net.eval(&v(&[0.5])), v(&[0.5]));
        assert_eq!(net.eval(&v(&[3.0])), v(&[1.0]));
        assert_eq!(net.eval(&v(&[-7.0])), v(&[-1.0]));
        assert_eq!(net.eval(&v(&[0.0])), v(&[0.0]));
    }

    #[test]
    fn bounds_examples() {
        let one = ReluNetwork::new(vec![Layer { weights: DMatrix::identity(1, 1), bias: v(&[0.0]) }]).unwrap();
        let b = preactivation_bounds(&one, &Polytope::cube(1, 1.0), BoundMethod::Interval).unwrap();
        assert_eq!((b[0].lower[0], b[0].upper[0]), (-1.0, 1.0));
        let two = ReluNetwork::new(vec![
            Layer { weights: DMatrix::identity(1, 1), bias: v(&[0.0]) },
            Layer { weights: DMatrix::identity(1, 1), bias: v(&[0.0]) },
        ])
        .unwrap();
        for method in [BoundMethod::Interval, BoundMethod::Lp] {
            let b = preactivation_bounds(&two, &Polytope::cube(1, 1.0), method).unwrap();
            assert!(b[1].lower[0].abs() <= 1e-7 && (b[1].upper[0] - 1.0).abs() <= 1e-7);
        }
        let zero = ReluNetwork::new(vec![Layer { weights: DMatrix::zeros(1, 2), bias: v(&[0.0]) }]).unwrap();
        let bx = output_range_box(&zero, &Polytope::cube(2, 1.0)).unwrap().bounding_box().unwrap();
        assert!((bx.upper[0] - OUTPUT_BOX_MARGIN).abs() < 1e-15);
        assert!((bx.lower[0] + OUTPUT_BOX_MARGIN).abs() < 1e-15);
    }

    #[test]
    fn linear_controller_linearization() {
        let plant = double_integrator();
        let k = DMatrix::from_row_slice(1, 2, &[-0.5, -1.0]);
        let net = ReluNetwork::new(vec![Layer { weights: k.clone(), bias: v(&[0.0]) }]).unwrap();
        let cl = ClosedLoop::new(plant.clone(), ControllerSpec::Raw { network: net }).unwrap();
        let lin = local_linearization(&cl).unwrap();
        let expect = &plant.modes()[0].a + &plant.modes()[0].b * &k;
        assert!((lin.a_cl - expect).amax() < 1e-15);
        assert_eq!(lin.region, plant.modes()[0].region);
    }
}
