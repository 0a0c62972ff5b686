//! Minimal differentiable-network engine.
//!
//! Parameters live in one flat `f64` vector ([`ParamStore`]) with named,
//! disjoint slices. A [`Graph`] is an ordered stack of dense or
//! varying-coefficient layers bound to slices of that vector; forward passes
//! are batched (rows are samples) and gradients are computed by closed-form
//! per-layer backpropagation. Everything is double precision.

use std::ops::Range;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::basis::Basis;
use crate::edf::{sigmoid, softplus};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamSlice {
    pub name: String,
    pub range: Range<usize>,
}

/// Flat parameter vector plus a registry of named slices.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore {
    values: Vec<f64>,
    registry: Vec<ParamSlice>,
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore { values: Vec::new(), registry: Vec::new() }
    }

    /// Append a zero-initialized slice of `len` parameters.
    pub fn register(&mut self, name: impl Into<String>, len: usize) -> Range<usize> {
        let start = self.values.len();
        self.values.resize(start + len, 0.0);
        let range = start..start + len;
        self.registry.push(ParamSlice { name: name.into(), range: range.clone() });
        range
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn set_values(&mut self, values: Vec<f64>) -> Result<()> {
        if values.len() != self.values.len() {
            return Err(Error::Config(format!(
                "parameter vector has {} entries, architecture needs {}",
                values.len(),
                self.values.len()
            )));
        }
        self.values = values;
        Ok(())
    }

    pub fn registry(&self) -> &[ParamSlice] {
        &self.registry
    }

    pub fn range(&self, name: &str) -> Option<Range<usize>> {
        self.registry.iter().find(|s| s.name == name).map(|s| s.range.clone())
    }

    pub fn slice(&self, name: &str) -> Option<&[f64]> {
        self.range(name).map(|r| &self.values[r])
    }

    /// All ranges whose name starts with `prefix`.
    pub fn ranges_with_prefix(&self, prefix: &str) -> Vec<Range<usize>> {
        self.registry
            .iter()
            .filter(|s| s.name.starts_with(prefix))
            .map(|s| s.range.clone())
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Sigmoid,
    Exp,
    Identity,
    Softplus,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Sigmoid => sigmoid(x),
            Activation::Exp => x.exp(),
            Activation::Identity => x,
            Activation::Softplus => softplus(x),
        }
    }

    /// Derivative given the pre-activation `x` and the output `y = apply(x)`.
    #[inline]
    pub fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Exp => y,
            Activation::Identity => 1.0,
            Activation::Softplus => sigmoid(x),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Dense,
    /// Dense layer whose weight and bias are `Σₗ φₗ(a) αₗ` over the graph basis.
    VaryingCoeff,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GraphSpec {
    pub layers: Vec<LayerSpec>,
    /// Basis shared by every varying-coefficient layer.
    pub basis: Option<Basis>,
}

impl GraphSpec {
    /// Stack of layers `dims[0] → dims[1] → …`, hidden activation on every
    /// layer but the last.
    pub fn mlp(kind: LayerKind, dims: &[usize], hidden: Activation, last: Activation, basis: Option<Basis>) -> Self {
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| LayerSpec {
                kind,
                in_dim: w[0],
                out_dim: w[1],
                activation: if i + 2 == dims.len() { last } else { hidden },
            })
            .collect();
        GraphSpec { layers, basis }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Config("graph has no layers".into()));
        }
        for w in self.layers.windows(2) {
            if w[0].out_dim != w[1].in_dim {
                return Err(Error::Config(format!(
                    "layer dims incompatible: {} -> {}",
                    w[0].out_dim, w[1].in_dim
                )));
            }
        }
        let varying = self.layers.iter().any(|l| l.kind == LayerKind::VaryingCoeff);
        if varying && self.basis.is_none() {
            return Err(Error::Config("varying-coefficient layer without a basis".into()));
        }
        if self.layers.iter().any(|l| l.in_dim == 0 || l.out_dim == 0) {
            return Err(Error::Config("zero-width layer".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
struct BoundLayer {
    spec: LayerSpec,
    weight: Range<usize>,
    bias: Range<usize>,
}

/// A [`GraphSpec`] bound to slices of a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    name: String,
    spec: GraphSpec,
    layers: Vec<BoundLayer>,
}

/// Intermediate values kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    inputs: Vec<Array2<f64>>,
    pre: Vec<Array2<f64>>,
    outputs: Vec<Array2<f64>>,
}

impl Graph {
    /// Register this graph's parameters under `name/…` in `store`.
    pub fn build(name: &str, spec: GraphSpec, store: &mut ParamStore) -> Result<Self> {
        spec.validate()?;
        let nb = spec.basis.as_ref().map(|b| b.size()).unwrap_or(1);
        let layers = spec
            .layers
            .iter()
            .enumerate()
            .map(|(i, l)| {
                let blocks = match l.kind {
                    LayerKind::Dense => 1,
                    LayerKind::VaryingCoeff => nb,
                };
                let weight = store.register(format!("{name}/{i}/weight"), blocks * l.out_dim * l.in_dim);
                let bias = store.register(format!("{name}/{i}/bias"), blocks * l.out_dim);
                BoundLayer { spec: *l, weight, bias }
            })
            .collect();
        Ok(Graph { name: name.to_string(), spec, layers })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn spec(&self) -> &GraphSpec {
        &self.spec
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].spec.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().unwrap().spec.out_dim
    }

    pub fn basis(&self) -> Option<&Basis> {
        self.spec.basis.as_ref()
    }

    pub fn needs_dose(&self) -> bool {
        self.layers.iter().any(|l| l.spec.kind == LayerKind::VaryingCoeff)
    }

    pub fn param_ranges(&self) -> Vec<Range<usize>> {
        self.layers.iter().flat_map(|l| [l.weight.clone(), l.bias.clone()]).collect()
    }

    /// Fan-in scaled uniform initialization. ReLU layers use bound
    /// `√(6/fan_in)`, all others `√(3/fan_in)`; biases start at zero. Every
    /// coefficient block of a varying-coefficient layer gets the same draw
    /// when the basis is a partition of unity (so `W(a)` starts
    /// dose-constant); for a polynomial basis only the constant block is
    /// drawn and higher blocks start at zero.
    pub fn init<R: Rng + ?Sized>(&self, params: &mut [f64], rng: &mut R) {
        let nb = self.spec.basis.as_ref().map(|b| b.size()).unwrap_or(1);
        let pou = self.spec.basis.as_ref().map(|b| b.is_partition_of_unity()).unwrap_or(true);
        for l in &self.layers {
            let fan_in = l.spec.in_dim as f64;
            let bound = match l.spec.activation {
                Activation::Relu => (6.0 / fan_in).sqrt(),
                _ => (3.0 / fan_in).sqrt(),
            };
            let block = l.spec.out_dim * l.spec.in_dim;
            let draw: Vec<f64> = (0..block).map(|_| rng.random_range(-bound..bound)).collect();
            let w = &mut params[l.weight.clone()];
            match l.spec.kind {
                LayerKind::Dense => w.copy_from_slice(&draw),
                LayerKind::VaryingCoeff => {
                    for b in 0..nb {
                        let dst = &mut w[b * block..(b + 1) * block];
                        if pou || b == 0 {
                            dst.copy_from_slice(&draw);
                        } else {
                            dst.iter_mut().for_each(|v| *v = 0.0);
                        }
                    }
                }
            }
            params[l.bias.clone()].iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Batched forward pass. `x` is `n × in_dim`; `basis_values` is
    /// `n × L` and required iff the graph has a varying-coefficient layer.
    pub fn forward_batch(
        &self,
        params: &[f64],
        x: ArrayView2<f64>,
        basis_values: Option<ArrayView2<f64>>,
    ) -> Result<(Array2<f64>, ForwardCache)> {
        if x.ncols() != self.in_dim() {
            return Err(Error::Config(format!(
                "{}: input has {} columns, expected {}",
                self.name,
                x.ncols(),
                self.in_dim()
            )));
        }
        if self.needs_dose() {
            match basis_values {
                Some(b) if b.nrows() == x.nrows() && Some(b.ncols()) == self.basis().map(|b| b.size()) => {}
                _ => return Err(Error::Config(format!("{}: missing or malformed basis values", self.name))),
            }
        }
        let mut cache = ForwardCache { inputs: Vec::new(), pre: Vec::new(), outputs: Vec::new() };
        let mut h = x.to_owned();
        for l in &self.layers {
            let pre = self.layer_pre(l, params, h.view(), basis_values);
            let act = l.spec.activation;
            let out = pre.mapv(|v| act.apply(v));
            cache.inputs.push(h);
            cache.pre.push(pre);
            cache.outputs.push(out.clone());
            h = out;
        }
        Ok((h, cache))
    }

    fn layer_pre(&self, l: &BoundLayer, params: &[f64], x: ArrayView2<f64>, basis: Option<ArrayView2<f64>>) -> Array2<f64> {
        let (o, i) = (l.spec.out_dim, l.spec.in_dim);
        let w = &params[l.weight.clone()];
        let b = &params[l.bias.clone()];
        match l.spec.kind {
            LayerKind::Dense => {
                let wm = ArrayView2::from_shape((o, i), w).unwrap();
                let mut pre = x.dot(&wm.t());
                let bv = ndarray::ArrayView1::from(b);
                pre += &bv;
                pre
            }
            LayerKind::VaryingCoeff => {
                let phi = basis.unwrap();
                let nb = phi.ncols();
                let mut pre = Array2::<f64>::zeros((x.nrows(), o));
                for blk in 0..nb {
                    let wm = ArrayView2::from_shape((o, i), &w[blk * o * i..(blk + 1) * o * i]).unwrap();
                    let mut part = x.dot(&wm.t());
                    let bv = ndarray::ArrayView1::from(&b[blk * o..(blk + 1) * o]);
                    part += &bv;
                    let col = phi.column(blk);
                    part.axis_iter_mut(Axis(0)).zip(col.iter()).for_each(|(mut row, &c)| row *= c);
                    pre += &part;
                }
                pre
            }
        }
    }

    /// Backpropagate `grad_out` (`n × out_dim`, the loss gradient w.r.t. the
    /// graph output). Parameter gradients are added into `grad` (full-length
    /// vector); the gradient w.r.t. the graph input is returned.
    pub fn backward_batch(
        &self,
        params: &[f64],
        cache: &ForwardCache,
        basis_values: Option<ArrayView2<f64>>,
        grad_out: Array2<f64>,
        grad: &mut [f64],
    ) -> Array2<f64> {
        let mut g = grad_out;
        for (idx, l) in self.layers.iter().enumerate().rev() {
            let act = l.spec.activation;
            if act != Activation::Identity {
                let pre = &cache.pre[idx];
                let out = &cache.outputs[idx];
                ndarray::Zip::from(&mut g).and(pre).and(out).for_each(|gv, &p, &y| *gv *= act.derivative(p, y));
            }
            let input = &cache.inputs[idx];
            let (o, i) = (l.spec.out_dim, l.spec.in_dim);
            let w = &params[l.weight.clone()];
            match l.spec.kind {
                LayerKind::Dense => {
                    let wm = ArrayView2::from_shape((o, i), w).unwrap();
                    let dw = g.t().dot(input);
                    add_into(&mut grad[l.weight.clone()], dw.as_slice().unwrap());
                    let db = g.sum_axis(Axis(0));
                    add_into(&mut grad[l.bias.clone()], db.as_slice().unwrap());
                    g = g.dot(&wm);
                }
                LayerKind::VaryingCoeff => {
                    let phi = basis_values.unwrap();
                    let nb = phi.ncols();
                    let mut gin = Array2::<f64>::zeros((g.nrows(), i));
                    for blk in 0..nb {
                        let mut gl = g.clone();
                        gl.axis_iter_mut(Axis(0))
                            .zip(phi.column(blk).iter())
                            .for_each(|(mut row, &c)| row *= c);
                        let wm = ArrayView2::from_shape((o, i), &w[blk * o * i..(blk + 1) * o * i]).unwrap();
                        let dw = gl.t().dot(input);
                        let wr = l.weight.start + blk * o * i;
                        add_into(&mut grad[wr..wr + o * i], dw.as_slice().unwrap());
                        let db: Array1<f64> = gl.sum_axis(Axis(0));
                        let br = l.bias.start + blk * o;
                        add_into(&mut grad[br..br + o], db.as_slice().unwrap());
                        gin += &gl.dot(&wm);
                    }
                    g = gin;
                }
            }
        }
        g
    }

    /// Single-sample forward pass.
    pub fn forward(&self, params: &[f64], x: &[f64], a: Option<f64>) -> Result<Vec<f64>> {
        let xv = ArrayView2::from_shape((1, x.len()), x).map_err(|e| Error::Config(e.to_string()))?;
        let phi = match (self.needs_dose(), a) {
            (true, Some(a)) => {
                let v = self.basis().unwrap().eval(a)?;
                Some(Array2::from_shape_vec((1, v.len()), v).unwrap())
            }
            (true, None) => return Err(Error::Config(format!("{}: dose required", self.name))),
            (false, Some(_)) => return Err(Error::Config(format!("{}: graph takes no dose", self.name))),
            (false, None) => None,
        };
        let (out, _) = self.forward_batch(params, xv, phi.as_ref().map(|p| p.view()))?;
        Ok(out.row(0).to_vec())
    }

    /// Batched forward pass with every row at the same dose `a`. Each
    /// varying-coefficient layer is materialized once, so the cost is that
    /// of a dense network.
    pub fn forward_batch_at_dose(&self, params: &[f64], x: ArrayView2<f64>, a: Option<f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.in_dim() {
            return Err(Error::Config(format!("{}: input has {} columns, expected {}", self.name, x.ncols(), self.in_dim())));
        }
        let phi = match (self.needs_dose(), a) {
            (true, Some(a)) => Some(self.basis().unwrap().eval(a)?),
            (true, None) => return Err(Error::Config(format!("{}: dose required", self.name))),
            _ => None,
        };
        let mut h = x.to_owned();
        for l in &self.layers {
            let (o, i) = (l.spec.out_dim, l.spec.in_dim);
            let w = &params[l.weight.clone()];
            let b = &params[l.bias.clone()];
            let (wm, bv) = match (l.spec.kind, &phi) {
                (LayerKind::VaryingCoeff, Some(phi)) => {
                    let mut wm = vec![0.0; o * i];
                    let mut bv = vec![0.0; o];
                    for (blk, &c) in phi.iter().enumerate() {
                        if c == 0.0 {
                            continue;
                        }
                        add_scaled(&mut wm, &w[blk * o * i..(blk + 1) * o * i], c);
                        add_scaled(&mut bv, &b[blk * o..(blk + 1) * o], c);
                    }
                    (wm, bv)
                }
                _ => (w.to_vec(), b.to_vec()),
            };
            let wm = Array2::from_shape_vec((o, i), wm).unwrap();
            let mut pre = h.dot(&wm.t());
            pre += &Array1::from(bv);
            let act = l.spec.activation;
            pre.mapv_inplace(|v| act.apply(v));
            h = pre;
        }
        Ok(h)
    }

    /// `W(a) = Σₗ φₗ(a) αₗ` for layer `idx`, row-major `out × in`.
    pub fn materialize_weight(&self, params: &[f64], idx: usize, a: Option<f64>) -> Result<Vec<f64>> {
        let l = &self.layers[idx];
        let w = &params[l.weight.clone()];
        match l.spec.kind {
            LayerKind::Dense => Ok(w.to_vec()),
            LayerKind::VaryingCoeff => {
                let a = a.ok_or_else(|| Error::Config("dose required".into()))?;
                let phi = self.basis().unwrap().eval(a)?;
                let blk = l.spec.out_dim * l.spec.in_dim;
                let mut out = vec![0.0; blk];
                for (b, &c) in phi.iter().enumerate() {
                    for (o, &v) in out.iter_mut().zip(&w[b * blk..(b + 1) * blk]) {
                        *o += c * v;
                    }
                }
                Ok(out)
            }
        }
    }
}

#[inline]
fn add_scaled(dst: &mut [f64], src: &[f64], c: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += c * s;
    }
}

#[inline]
fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Gather the rows of `x` named by `rows`.
pub fn gather_rows(x: ArrayView2<f64>, rows: &[usize]) -> Array2<f64> {
    let mut out = Array2::zeros((rows.len(), x.ncols()));
    for (mut dst, &r) in out.axis_iter_mut(Axis(0)).zip(rows) {
        dst.assign(&x.row(r));
    }
    out
}

/// Basis values for every dose in `a`, as an `n × L` matrix.
pub fn basis_matrix(basis: &Basis, a: &[f64]) -> Result<Array2<f64>> {
    let l = basis.size();
    let mut out = Array2::zeros((a.len(), l));
    for (mut row, &ai) in out.axis_iter_mut(Axis(0)).zip(a) {
        basis.eval_into(ai, row.as_slice_mut().unwrap())?;
    }
    Ok(out)
}

/// Inputs for a single-graph loss.
#[derive(Debug, Clone)]
pub struct GraphBatch {
    pub x: Array2<f64>,
    pub a: Option<Vec<f64>>,
    pub y: Vec<f64>,
}

/// Evaluate a scalar loss of a single graph's outputs and its exact gradient
/// w.r.t. every parameter in `params`. `closure` returns the loss and its
/// gradient w.r.t. the `n × out_dim` output matrix.
pub fn loss_and_grad<F>(graph: &Graph, params: &[f64], batch: &GraphBatch, closure: F) -> Result<(f64, Vec<f64>)>
where
    F: Fn(ArrayView2<f64>, &GraphBatch) -> Result<(f64, Array2<f64>)>,
{
    let phi = match (&batch.a, graph.basis()) {
        (Some(a), Some(b)) => Some(basis_matrix(b, a)?),
        _ => None,
    };
    let (out, cache) = graph.forward_batch(params, batch.x.view(), phi.as_ref().map(|p| p.view()))?;
    let (loss, gout) = closure(out.view(), batch)?;
    if !loss.is_finite() {
        let bad = out
            .axis_iter(Axis(0))
            .position(|r| r.iter().any(|v| !v.is_finite()))
            .unwrap_or(0);
        return Err(Error::Numeric(format!("non-finite loss (first suspicious batch row {bad})")));
    }
    let mut grad = vec![0.0; params.len()];
    graph.backward_batch(params, &cache, phi.as_ref().map(|p| p.view()), gout, &mut grad);
    Ok((loss, grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_coordinate: usize,
    pub tol: f64,
    pub passed: bool,
}

/// Denominator floor in the relative error `|g − ĝ| / max(|g|, |ĝ|, floor)`.
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

/// Compare an analytic gradient with central differences of `loss`.
pub fn grad_check<F>(loss: F, params: &[f64], analytic: &[f64], step: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    let mut p = params.to_vec();
    let mut worst = (0.0f64, 0usize);
    for k in 0..p.len() {
        let orig = p[k];
        p[k] = orig + step;
        let up = loss(&p)?;
        p[k] = orig - step;
        let dn = loss(&p)?;
        p[k] = orig;
        let fd = (up - dn) / (2.0 * step);
        let a = analytic[k];
        let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(GRAD_CHECK_FLOOR);
        if rel > worst.0 || rel.is_nan() {
            worst = (if rel.is_nan() { f64::INFINITY } else { rel }, k);
        }
    }
    Ok(GradCheckReport { max_rel_err: worst.0, worst_coordinate: worst.1, tol, passed: worst.0 <= tol })
}

/// [`grad_check`] for a single-graph closure.
pub fn grad_check_graph<F>(graph: &Graph, params: &[f64], batch: &GraphBatch, closure: F, step: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(ArrayView2<f64>, &GraphBatch) -> Result<(f64, Array2<f64>)> + Copy,
{
    let (_, g) = loss_and_grad(graph, params, batch, closure)?;
    grad_check(|p| loss_and_grad(graph, p, batch, closure).map(|r| r.0), params, &g, step, tol)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    SgdMomentum,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_adam_eps")]
    pub eps: f64,
}

fn default_momentum() -> f64 {
    0.9
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_adam_eps() -> f64 {
    1e-8
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Adam,
            lr: 1e-3,
            momentum: default_momentum(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_adam_eps(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct OptimState {
    pub config: OptimizerConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl OptimState {
    pub fn new(config: OptimizerConfig, len: usize) -> Self {
        OptimState { config, m: vec![0.0; len], v: vec![0.0; len], t: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grad.len() != self.m.len() {
            return Err(Error::Config("optimizer buffers and parameters differ in length".into()));
        }
        self.t += 1;
        let c = self.config;
        match c.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grad) {
                    *p -= c.lr * g;
                }
            }
            OptimizerKind::SgdMomentum => {
                for ((p, g), m) in params.iter_mut().zip(grad).zip(self.m.iter_mut()) {
                    *m = c.momentum * *m + g;
                    *p -= c.lr * *m;
                }
            }
            OptimizerKind::Adam => {
                let t = self.t as i32;
                let bc1 = 1.0 - c.beta1.powi(t);
                let bc2 = 1.0 - c.beta2.powi(t);
                for (((p, g), m), v) in params.iter_mut().zip(grad).zip(self.m.iter_mut()).zip(self.v.iter_mut()) {
                    *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                    *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                    let mh = *m / bc1;
                    let vh = *v / bc2;
                    *p -= c.lr * mh / (vh.sqrt() + c.eps);
                }
            }
        }
        Ok(())
    }
}
