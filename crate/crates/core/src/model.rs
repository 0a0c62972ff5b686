//! Two-head network: a shared representation `z(x)`, an outcome head
//! `μ(x, a)` built from varying-coefficient layers, a treatment-density head
//! `π(a | x)`, and the perturbation coefficients `ε(a) = Σₖ cₖ Bₖ(a)`.

use std::ops::Range;

use ndarray::{Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::basis::{kn_for_sample_size, Basis, BasisConfig};
use crate::edf::{sigmoid, softplus, FamilyKind, FamilySpec};
use crate::error::{Error, Result};
use crate::netcore::{basis_matrix, Activation, ForwardCache, Graph, GraphSpec, LayerKind, ParamStore};

pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TreatmentKind {
    Binary,
    Continuous,
}

impl TreatmentKind {
    pub fn check_dose(self, a: f64) -> Result<()> {
        let ok = match self {
            TreatmentKind::Binary => a == 0.0 || a == 1.0,
            TreatmentKind::Continuous => (0.0..=1.0).contains(&a),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Domain(format!("treatment value {a} outside the {self:?} domain")))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub treatment: TreatmentKind,
    pub family: FamilySpec,
    pub input_dim: usize,
    #[serde(default = "default_rep_dims")]
    pub rep_dims: Vec<usize>,
    #[serde(default = "default_outcome_dims")]
    pub outcome_dims: Vec<usize>,
    #[serde(default)]
    pub density_dims: Vec<usize>,
    #[serde(default = "default_density_grid")]
    pub density_grid: usize,
    /// Basis of the varying-coefficient outcome layers. Defaults to the arm
    /// indicator basis (binary) or a degree-2 spline with 2 interior knots.
    #[serde(default)]
    pub outcome_basis: Option<BasisConfig>,
    /// Basis of `ε(a)`. Defaults to the arm indicator basis (binary) or a
    /// degree-2 spline sized by [`kn_for_sample_size`] on the training set.
    #[serde(default)]
    pub eps_basis: Option<BasisConfig>,
    #[serde(default = "default_hidden")]
    pub hidden_activation: Activation,
    /// Mean activation of the outcome head; defaults per family.
    #[serde(default)]
    pub outcome_activation: Option<Activation>,
    /// Stop density-head gradients from reaching the shared representation.
    #[serde(default)]
    pub density_stop_grad: bool,
}

fn default_rep_dims() -> Vec<usize> {
    vec![50, 50]
}
fn default_outcome_dims() -> Vec<usize> {
    vec![50]
}
fn default_density_grid() -> usize {
    10
}
fn default_hidden() -> Activation {
    Activation::Relu
}

impl ModelConfig {
    pub fn new(treatment: TreatmentKind, family: FamilySpec, input_dim: usize) -> Self {
        ModelConfig {
            treatment,
            family,
            input_dim,
            rep_dims: default_rep_dims(),
            outcome_dims: default_outcome_dims(),
            density_dims: Vec::new(),
            density_grid: default_density_grid(),
            outcome_basis: None,
            eps_basis: None,
            hidden_activation: default_hidden(),
            outcome_activation: None,
            density_stop_grad: false,
        }
    }

    /// Fill every defaulted field, using `n_train` to size the ε basis.
    pub fn resolved(&self, n_train: usize) -> ModelConfig {
        let mut c = self.clone();
        let binary = c.treatment == TreatmentKind::Binary;
        if c.outcome_basis.is_none() {
            c.outcome_basis = Some(if binary {
                BasisConfig::Arms
            } else {
                BasisConfig::Spline { degree: 2, interior_knots: 2 }
            });
        }
        if c.eps_basis.is_none() {
            c.eps_basis = Some(if binary {
                BasisConfig::Arms
            } else {
                let k = kn_for_sample_size(n_train, 2);
                BasisConfig::Spline { degree: 2, interior_knots: k - 3 }
            });
        }
        if c.outcome_activation.is_none() {
            c.outcome_activation = Some(match c.family.kind {
                FamilyKind::Bernoulli => Activation::Sigmoid,
                FamilyKind::Poisson => Activation::Exp,
                FamilyKind::Gaussian => Activation::Identity,
            });
        }
        c
    }

    pub fn validate(&self) -> Result<()> {
        self.family.validate()?;
        if self.input_dim == 0 {
            return Err(Error::Config("model.input_dim must be positive".into()));
        }
        if self.rep_dims.is_empty() || self.rep_dims.contains(&0) {
            return Err(Error::Config("model.rep_dims must be nonempty and positive".into()));
        }
        if self.outcome_dims.contains(&0) || self.density_dims.contains(&0) {
            return Err(Error::Config("model head widths must be positive".into()));
        }
        if self.treatment == TreatmentKind::Continuous && self.density_grid < 2 {
            return Err(Error::Config(format!("model.density_grid must be >= 2, got {}", self.density_grid)));
        }
        if let Some(act) = self.outcome_activation {
            let ok = match self.family.kind {
                FamilyKind::Bernoulli => act == Activation::Sigmoid,
                FamilyKind::Poisson => matches!(act, Activation::Exp | Activation::Softplus),
                FamilyKind::Gaussian => act == Activation::Identity,
            };
            if !ok {
                return Err(Error::Config(format!(
                    "model.outcome_activation {act:?} does not map into the {:?} mean domain",
                    self.family.kind
                )));
            }
        }
        if self.treatment == TreatmentKind::Continuous {
            for (field, b) in [("outcome_basis", self.outcome_basis), ("eps_basis", self.eps_basis)] {
                if b == Some(BasisConfig::Arms) {
                    return Err(Error::Config(format!("model.{field}: arm basis needs a binary treatment")));
                }
            }
        }
        Ok(())
    }
}

/// Training record stored alongside the parameters.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub seed: u64,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub best_val_base_loss: f64,
    pub final_train_loss: f64,
    pub eps_stationarity: Option<f64>,
    pub eps_polish_iterations: Option<usize>,
}

/// Observations fed to the network.
#[derive(Debug, Clone)]
pub struct Batch {
    pub x: Array2<f64>,
    pub a: Vec<f64>,
    pub y: Vec<f64>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.a.len()
    }

    pub fn is_empty(&self) -> bool {
        self.a.is_empty()
    }

    pub fn rows(&self, idx: &[usize]) -> Batch {
        Batch {
            x: crate::netcore::gather_rows(self.x.view(), idx),
            a: idx.iter().map(|&i| self.a[i]).collect(),
            y: idx.iter().map(|&i| self.y[i]).collect(),
        }
    }
}

/// Per-row quantities of a batched forward pass plus the caches needed to
/// backpropagate through it.
#[derive(Debug, Clone)]
pub struct ModelForward {
    /// Outcome pre-activation.
    pub eta: Vec<f64>,
    /// Fitted mean, unclamped.
    pub mu: Vec<f64>,
    /// Canonical parameter implied by `eta` (used by the likelihood).
    pub theta: Vec<f64>,
    /// `dθ/dη`.
    pub dtheta_deta: Vec<f64>,
    /// `π̂(aᵢ | xᵢ)`, unclamped.
    pub pi: Vec<f64>,
    /// `−log π̂(aᵢ | xᵢ)`.
    pub neg_log_pi: Vec<f64>,
    density_raw: Array2<f64>,
    outcome_basis: Option<Array2<f64>>,
    trunk_cache: ForwardCache,
    outcome_cache: ForwardCache,
    density_cache: ForwardCache,
}

#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    store: ParamStore,
    trunk: Graph,
    outcome: Graph,
    density: Graph,
    eps_basis: Basis,
    eps_range: Range<usize>,
    pub meta: TrainingMeta,
}

impl Model {
    /// Build the architecture from a resolved config with zero parameters.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let (Some(ob), Some(eb), Some(_)) = (config.outcome_basis, config.eps_basis, config.outcome_activation) else {
            return Err(Error::Config("model config is not resolved".into()));
        };
        let outcome_basis = ob.build()?;
        let eps_basis = eb.build()?;
        let mut store = ParamStore::new();
        let hidden = config.hidden_activation;

        let mut dims = vec![config.input_dim];
        dims.extend(&config.rep_dims);
        let trunk = Graph::build("trunk", GraphSpec::mlp(LayerKind::Dense, &dims, hidden, hidden, None), &mut store)?;
        let rep = *config.rep_dims.last().unwrap();

        let mut dims = vec![rep];
        dims.extend(&config.outcome_dims);
        dims.push(1);
        let outcome = Graph::build(
            "outcome",
            GraphSpec::mlp(LayerKind::VaryingCoeff, &dims, hidden, Activation::Identity, Some(outcome_basis)),
            &mut store,
        )?;

        let out = match config.treatment {
            TreatmentKind::Binary => 1,
            TreatmentKind::Continuous => config.density_grid + 1,
        };
        let mut dims = vec![rep];
        dims.extend(&config.density_dims);
        dims.push(out);
        let density = Graph::build(
            "density",
            GraphSpec::mlp(LayerKind::Dense, &dims, hidden, Activation::Identity, None),
            &mut store,
        )?;
        let eps_range = store.register("eps", eps_basis.size());
        Ok(Model { config, store, trunk, outcome, density, eps_basis, eps_range, meta: TrainingMeta::default() })
    }

    /// Build and initialize from `rng`.
    pub fn initialized<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        let mut m = Model::new(config)?;
        let mut v = m.store.values().to_vec();
        m.trunk.init(&mut v, rng);
        m.outcome.init(&mut v, rng);
        m.density.init(&mut v, rng);
        m.store.set_values(v)?;
        Ok(m)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn family(&self) -> FamilySpec {
        self.config.family
    }

    pub fn treatment(&self) -> TreatmentKind {
        self.config.treatment
    }

    pub fn params(&self) -> &[f64] {
        self.store.values()
    }

    pub fn set_params(&mut self, values: Vec<f64>) -> Result<()> {
        self.store.set_values(values)
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        self.store.values_mut()
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn eps_range(&self) -> Range<usize> {
        self.eps_range.clone()
    }

    pub fn eps_basis(&self) -> &Basis {
        &self.eps_basis
    }

    pub fn eps_coefficients(&self) -> &[f64] {
        &self.store.values()[self.eps_range.clone()]
    }

    pub fn set_eps_coefficients(&mut self, c: &[f64]) {
        let r = self.eps_range.clone();
        self.store.values_mut()[r].copy_from_slice(c);
    }

    /// Parameter ranges of the outcome head, density head and trunk.
    pub fn head_ranges(&self) -> (Vec<Range<usize>>, Vec<Range<usize>>, Vec<Range<usize>>) {
        (self.outcome.param_ranges(), self.density.param_ranges(), self.trunk.param_ranges())
    }

    fn outcome_activation(&self) -> Activation {
        self.config.outcome_activation.unwrap()
    }

    /// Mean, canonical parameter and `dθ/dη` for an outcome pre-activation.
    #[inline]
    fn mean_and_theta(&self, eta: f64) -> (f64, f64, f64) {
        match self.outcome_activation() {
            Activation::Softplus => {
                let mu = softplus(eta);
                (mu, mu.ln(), sigmoid(eta) / mu)
            }
            act => (act.apply(eta), eta, 1.0),
        }
    }

    /// `ε̂(a) = Σₖ cₖ Bₖ(a)`.
    pub fn eval_eps(&self, a: f64) -> Result<f64> {
        let b = self.eps_basis.eval(a)?;
        Ok(b.iter().zip(self.eps_coefficients()).map(|(b, c)| b * c).sum())
    }

    fn check_x(&self, x: ArrayView2<f64>) -> Result<()> {
        if x.ncols() != self.config.input_dim {
            return Err(Error::Config(format!(
                "covariates have {} columns, model expects {}",
                x.ncols(),
                self.config.input_dim
            )));
        }
        Ok(())
    }

    /// Batched forward pass at the observed doses, with caches.
    pub fn forward(&self, params: &[f64], x: ArrayView2<f64>, a: &[f64]) -> Result<ModelForward> {
        self.check_x(x)?;
        if a.len() != x.nrows() {
            return Err(Error::Config("dose vector and covariate rows differ in length".into()));
        }
        for &ai in a {
            self.config.treatment.check_dose(ai)?;
        }
        let (z, trunk_cache) = self.trunk.forward_batch(params, x, None)?;
        let phi = basis_matrix(self.outcome.basis().unwrap(), a)?;
        let (eta_m, outcome_cache) = self.outcome.forward_batch(params, z.view(), Some(phi.view()))?;
        let (density_raw, density_cache) = self.density.forward_batch(params, z.view(), None)?;
        let n = a.len();
        let mut eta = Vec::with_capacity(n);
        let mut mu = Vec::with_capacity(n);
        let mut theta = Vec::with_capacity(n);
        let mut dtheta = Vec::with_capacity(n);
        for &e in eta_m.column(0) {
            let (m, t, d) = self.mean_and_theta(e);
            eta.push(e);
            mu.push(m);
            theta.push(t);
            dtheta.push(d);
        }
        let mut pi = Vec::with_capacity(n);
        let mut nlp = Vec::with_capacity(n);
        for (row, &ai) in density_raw.axis_iter(Axis(0)).zip(a) {
            let (p, l) = self.density_at(row.as_slice().unwrap(), ai);
            pi.push(p);
            nlp.push(l);
        }
        Ok(ModelForward {
            eta,
            mu,
            theta,
            dtheta_deta: dtheta,
            pi,
            neg_log_pi: nlp,
            density_raw,
            outcome_basis: Some(phi),
            trunk_cache,
            outcome_cache,
            density_cache,
        })
    }

    /// `(π̂(a|x), −log π̂(a|x))` from one row of density-head outputs.
    fn density_at(&self, raw: &[f64], a: f64) -> (f64, f64) {
        match self.config.treatment {
            TreatmentKind::Binary => {
                let s = 2.0 * a - 1.0;
                (sigmoid(s * raw[0]), softplus(-s * raw[0]))
            }
            TreatmentKind::Continuous => {
                let g = GridDensity::new(raw);
                let p = g.value(a);
                (p, -p.ln())
            }
        }
    }

    /// Backpropagate per-row gradients w.r.t. the outcome pre-activation
    /// `eta` and w.r.t. the density-head outputs into `grad`.
    pub fn backward(&self, params: &[f64], fwd: &ModelForward, g_eta: &[f64], g_density: Array2<f64>, grad: &mut [f64]) {
        let n = g_eta.len();
        let g_out = Array2::from_shape_vec((n, 1), g_eta.to_vec()).unwrap();
        let phi = fwd.outcome_basis.as_ref().map(|p| p.view());
        let mut gz = self.outcome.backward_batch(params, &fwd.outcome_cache, phi, g_out, grad);
        let gz_d = self.density.backward_batch(params, &fwd.density_cache, None, g_density, grad);
        if !self.config.density_stop_grad {
            gz += &gz_d;
        }
        self.trunk.backward_batch(params, &fwd.trunk_cache, None, gz, grad);
    }

    /// Gradient of a per-row loss `L(π̂ᵢ)` w.r.t. the density-head outputs,
    /// given `dL/dπ̂ᵢ` and (separately, for numerical stability) a weight
    /// `wᵢ` on the `−log π̂ᵢ` term.
    pub fn density_output_grad(&self, fwd: &ModelForward, a: &[f64], g_pi: &[f64], w_nlp: &[f64]) -> Array2<f64> {
        let mut g = Array2::zeros(fwd.density_raw.raw_dim());
        for (i, (mut grow, raw)) in g.axis_iter_mut(Axis(0)).zip(fwd.density_raw.axis_iter(Axis(0))).enumerate() {
            let raw = raw.as_slice().unwrap();
            let gr = grow.as_slice_mut().unwrap();
            match self.config.treatment {
                TreatmentKind::Binary => {
                    let s = 2.0 * a[i] - 1.0;
                    let p = fwd.pi[i];
                    // d(−log σ(sℓ))/dℓ = −s(1 − π), dπ/dℓ = sπ(1 − π)
                    gr[0] = w_nlp[i] * (-s * (1.0 - p)) + g_pi[i] * s * p * (1.0 - p);
                }
                TreatmentKind::Continuous => {
                    let dens = GridDensity::new(raw);
                    let total = g_pi[i] - w_nlp[i] / fwd.pi[i];
                    dens.backward(a[i], total, gr);
                }
            }
        }
        g
    }

    /// Per-row `μ̂` (clamped) and `π̂` (unclamped) at a common dose `a`.
    pub fn predict_at_dose(&self, x: ArrayView2<f64>, a: f64) -> Result<(Vec<f64>, Vec<f64>)> {
        let e = self.evaluator(x)?;
        e.at_dose(a)
    }

    /// Per-row `μ̂` (clamped) and `π̂` (unclamped) at per-row doses.
    pub fn predict_rows(&self, x: ArrayView2<f64>, a: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let f = self.forward(self.params(), x, a)?;
        let fam = self.family();
        Ok((f.mu.iter().map(|&m| fam.clamp_mean(m)).collect(), f.pi))
    }

    /// Precompute the representation and density outputs for repeated
    /// evaluation at many doses.
    pub fn evaluator(&self, x: ArrayView2<f64>) -> Result<DoseEvaluator<'_>> {
        self.check_x(x)?;
        let p = self.params();
        let z = self.trunk.forward_batch_at_dose(p, x, None)?;
        let density_raw = self.density.forward_batch_at_dose(p, z.view(), None)?;
        Ok(DoseEvaluator { model: self, z, density_raw })
    }

    pub fn predict_mu(&self, x: &[f64], a: f64) -> Result<f64> {
        let xv = self.single_row(x)?;
        Ok(self.predict_at_dose(xv.view(), a)?.0[0])
    }

    pub fn predict_pi(&self, x: &[f64], a: f64) -> Result<f64> {
        let xv = self.single_row(x)?;
        Ok(self.predict_at_dose(xv.view(), a)?.1[0])
    }

    pub fn predict_theta(&self, x: &[f64], a: f64) -> Result<f64> {
        Ok(self.family().h(self.predict_mu(x, a)?))
    }

    fn single_row(&self, x: &[f64]) -> Result<Array2<f64>> {
        if x.len() != self.config.input_dim {
            return Err(Error::Config(format!("covariate vector has {} entries, model expects {}", x.len(), self.config.input_dim)));
        }
        Ok(Array2::from_shape_vec((1, x.len()), x.to_vec()).unwrap())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            schema_version: CHECKPOINT_SCHEMA_VERSION,
            config: self.config.clone(),
            params: self.params().to_vec(),
            meta: self.meta.clone(),
        }
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        if ck.schema_version != CHECKPOINT_SCHEMA_VERSION {
            return Err(Error::Config(format!("unsupported checkpoint schema version {}", ck.schema_version)));
        }
        let mut m = Model::new(ck.config)?;
        m.set_params(ck.params)?;
        m.meta = ck.meta;
        Ok(m)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub schema_version: u32,
    pub config: ModelConfig,
    pub params: Vec<f64>,
    pub meta: TrainingMeta,
}

/// Piecewise-linear density on the grid `{0, 1/B, …, 1}` built from softmax
/// scores renormalized by their trapezoid integral.
#[derive(Debug, Clone)]
pub struct GridDensity {
    scores: Vec<f64>,
    z: f64,
}

impl GridDensity {
    pub fn new(raw: &[f64]) -> Self {
        let m = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut scores: Vec<f64> = raw.iter().map(|r| (r - m).exp()).collect();
        let sum: f64 = scores.iter().sum();
        scores.iter_mut().for_each(|s| *s /= sum);
        let b = (scores.len() - 1) as f64;
        let z = (1.0 - 0.5 * (scores[0] + scores[scores.len() - 1])) / b;
        assert!(z > 0.0, "trapezoid normalizer must be positive");
        GridDensity { scores, z }
    }

    pub fn bins(&self) -> usize {
        self.scores.len() - 1
    }

    /// Density values at the grid points.
    pub fn grid_values(&self) -> Vec<f64> {
        self.scores.iter().map(|s| s / self.z).collect()
    }

    /// Segment index and interpolation weight; `a = 1` maps onto the last
    /// segment with weight 1.
    fn locate(&self, a: f64) -> (usize, f64) {
        let b = self.bins();
        let t = a * b as f64;
        let j = (t.floor() as usize).min(b - 1);
        (j, t - j as f64)
    }

    pub fn value(&self, a: f64) -> f64 {
        let (j, u) = self.locate(a);
        ((1.0 - u) * self.scores[j] + u * self.scores[j + 1]) / self.z
    }

    /// Accumulate `dL/d raw` given `dL/dπ̂(a)` into `out`.
    fn backward(&self, a: f64, g_pi: f64, out: &mut [f64]) {
        let (j, u) = self.locate(a);
        let nb = self.scores.len();
        let b = self.bins() as f64;
        let mut gv = vec![0.0; nb];
        gv[j] += g_pi * (1.0 - u);
        gv[j + 1] += g_pi * u;
        // v = s / Z, Z = (1 − (s₀ + s_B)/2)/B with Σs = 1 folded in: treat Z
        // as a function of all s through Σs, so dZ/ds_b = (1 − ½[edge])/B.
        let gz: f64 = gv.iter().zip(&self.scores).map(|(g, s)| g * s).sum::<f64>() / (self.z * self.z);
        let mut gs = vec![0.0; nb];
        for k in 0..nb {
            let edge = if k == 0 || k == nb - 1 { 0.5 } else { 1.0 };
            gs[k] = gv[k] / self.z - gz * edge / b;
        }
        let dot: f64 = gs.iter().zip(&self.scores).map(|(g, s)| g * s).sum();
        for k in 0..nb {
            out[k] += self.scores[k] * (gs[k] - dot);
        }
    }
}

/// Cached representation for evaluating one set of covariates at many doses.
pub struct DoseEvaluator<'m> {
    model: &'m Model,
    z: Array2<f64>,
    density_raw: Array2<f64>,
}

impl DoseEvaluator<'_> {
    pub fn len(&self) -> usize {
        self.z.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.z.nrows() == 0
    }

    /// `(μ̂ clamped, π̂ unclamped)` for every row at dose `a`.
    pub fn at_dose(&self, a: f64) -> Result<(Vec<f64>, Vec<f64>)> {
        let m = self.model;
        m.config.treatment.check_dose(a)?;
        let eta = m.outcome.forward_batch_at_dose(m.params(), self.z.view(), Some(a))?;
        let fam = m.family();
        let mu = eta.column(0).iter().map(|&e| fam.clamp_mean(m.mean_and_theta(e).0)).collect();
        let pi = self
            .density_raw
            .axis_iter(Axis(0))
            .map(|r| m.density_at(r.as_slice().unwrap(), a).0)
            .collect();
        Ok((mu, pi))
    }

    /// Density values at the grid points for each row (continuous only).
    pub fn density_grids(&self) -> Vec<Vec<f64>> {
        self.density_raw
            .axis_iter(Axis(0))
            .map(|r| GridDensity::new(r.as_slice().unwrap()).grid_values())
            .collect()
    }
}
