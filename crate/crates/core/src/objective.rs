//! Training objectives: the joint likelihood of outcome and treatment, the
//! targeted regularizer built on the fluctuated canonical parameter, and the
//! convex refit of the perturbation coefficients.

use nalgebra::{DMatrix, DVector};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::edf::FamilySpec;
use crate::error::{Error, Result};
use crate::model::{Batch, Model, ModelForward};
use crate::netcore::{basis_matrix, Activation};

/// Lower bound applied to `π̂` inside every `1/π̂`.
pub const OVERLAP_CLAMP: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default = "default_true")]
    pub treg_enabled: bool,
    /// Let the regularizer update only `ε`, not the nuisance heads.
    #[serde(default = "default_true")]
    pub detach_nuisances_in_treg: bool,
    #[serde(default = "default_clamp")]
    pub overlap_clamp: f64,
}

fn default_beta() -> f64 {
    1.0
}
fn default_true() -> bool {
    true
}
fn default_clamp() -> f64 {
    OVERLAP_CLAMP
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { beta: 1.0, treg_enabled: true, detach_nuisances_in_treg: true, overlap_clamp: OVERLAP_CLAMP }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::Config(format!("loss.beta must be finite and >= 0, got {}", self.beta)));
        }
        if !(self.overlap_clamp > 0.0 && self.overlap_clamp < 0.5) {
            return Err(Error::Config(format!("loss.overlap_clamp must be in (0, 0.5), got {}", self.overlap_clamp)));
        }
        Ok(())
    }

    /// Whether the regularizer contributes to the objective.
    pub fn treg_active(&self) -> bool {
        self.treg_enabled && self.beta > 0.0
    }
}

/// `(1/n) Σ [ℓ(yᵢ, μᵢ) − log πᵢ]` from fitted values.
pub fn base_loss(family: &FamilySpec, y: &[f64], mu: &[f64], pi: &[f64]) -> Result<f64> {
    if y.is_empty() || y.len() != mu.len() || y.len() != pi.len() {
        return Err(Error::Data("base_loss: empty or mismatched inputs".into()));
    }
    let mut total = 0.0;
    for i in 0..y.len() {
        let term = family.nll(y[i], mu[i])? - pi[i].ln();
        if !term.is_finite() {
            return Err(Error::Numeric(format!("base_loss: non-finite term at batch index {i}")));
        }
        total += term;
    }
    Ok(total / y.len() as f64)
}

/// `θ̃ = θ + ε(a) h′(μ) / π`.
#[inline]
pub fn fluctuated_theta(theta: f64, eps_a: f64, pi: f64, h_prime_mu: f64) -> f64 {
    theta + eps_a / pi * h_prime_mu
}

/// `(1/n) Σ [−yᵢ θ̃ᵢ + κ(θ̃ᵢ)] / φ` from fitted values; `mu` is clamped into
/// the mean domain and `pi` floored at `clamp`.
pub fn treg_loss(family: &FamilySpec, y: &[f64], mu: &[f64], pi: &[f64], eps_a: &[f64], clamp: f64) -> Result<f64> {
    let n = y.len();
    if n == 0 || mu.len() != n || pi.len() != n || eps_a.len() != n {
        return Err(Error::Data("treg_loss: empty or mismatched inputs".into()));
    }
    let mut total = 0.0;
    for i in 0..n {
        let m = family.clamp_mean(mu[i]);
        let t = fluctuated_theta(family.h(m), eps_a[i], pi[i].max(clamp), family.h_prime(m));
        let term = family.nll_theta(y[i], t);
        if !term.is_finite() {
            return Err(Error::Numeric(format!("treg_loss: non-finite term at batch index {i}")));
        }
        total += term;
    }
    Ok(total / n as f64)
}

/// The regularizer as a function of the perturbation coefficients alone,
/// with the nuisance fits frozen: `θ̃ᵢ(c) = θᵢ + wᵢ · B(aᵢ)ᵀc` where
/// `θᵢ = h(μ̂ᵢ)` and `wᵢ = h′(μ̂ᵢ)/max(π̂ᵢ, c)`.
#[derive(Debug, Clone)]
pub struct FrozenTreg {
    family: FamilySpec,
    theta: Vec<f64>,
    weight: Vec<f64>,
    basis: Array2<f64>,
    y: Vec<f64>,
    pub clamp_hits: usize,
    pub mean_clamp_hits: usize,
}

impl FrozenTreg {
    pub fn from_values(family: FamilySpec, y: &[f64], mu: &[f64], pi: &[f64], basis: Array2<f64>, clamp: f64) -> Result<Self> {
        let n = y.len();
        if n == 0 || mu.len() != n || pi.len() != n || basis.nrows() != n {
            return Err(Error::Data("regularizer inputs are empty or mismatched".into()));
        }
        let mut theta = Vec::with_capacity(n);
        let mut weight = Vec::with_capacity(n);
        let mut clamp_hits = 0;
        let mut mean_clamp_hits = 0;
        for i in 0..n {
            if family.mean_is_clamped(mu[i]) {
                mean_clamp_hits += 1;
            }
            let m = family.clamp_mean(mu[i]);
            if pi[i] < clamp {
                clamp_hits += 1;
            }
            theta.push(family.h(m));
            weight.push(family.h_prime(m) / pi[i].max(clamp));
        }
        Ok(FrozenTreg { family, theta, weight, basis, y: y.to_vec(), clamp_hits, mean_clamp_hits })
    }

    pub fn from_model(model: &Model, batch: &Batch, clamp: f64) -> Result<Self> {
        let (mu, pi) = model.predict_rows(batch.x.view(), &batch.a)?;
        let basis = basis_matrix(model.eps_basis(), &batch.a)?;
        FrozenTreg::from_values(model.family(), &batch.y, &mu, &pi, basis, clamp)
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.basis.ncols()
    }

    fn fluctuated(&self, c: &[f64]) -> Vec<f64> {
        self.basis
            .outer_iter()
            .zip(self.theta.iter().zip(&self.weight))
            .map(|(b, (t, w))| t + w * b.iter().zip(c).map(|(b, c)| b * c).sum::<f64>())
            .collect()
    }

    pub fn loss(&self, c: &[f64]) -> f64 {
        let th = self.fluctuated(c);
        let s: f64 = th.iter().zip(&self.y).map(|(&t, &y)| self.family.nll_theta(y, t)).sum();
        s / self.len() as f64
    }

    /// `∂R/∂cₖ = (1/n) Σ Bₖ(aᵢ) (κ′(θ̃ᵢ) − yᵢ) wᵢ / φ`.
    pub fn gradient(&self, c: &[f64]) -> Vec<f64> {
        let th = self.fluctuated(c);
        let phi = self.family.dispersion;
        let mut g = vec![0.0; self.dim()];
        for ((b, &t), (&y, &w)) in self.basis.outer_iter().zip(&th).zip(self.y.iter().zip(&self.weight)) {
            let r = (self.family.kappa_prime(t) - y) * w / phi;
            for (gk, bk) in g.iter_mut().zip(b.iter()) {
                *gk += bk * r;
            }
        }
        let n = self.len() as f64;
        g.iter_mut().for_each(|v| *v /= n);
        g
    }

    pub fn hessian(&self, c: &[f64]) -> DMatrix<f64> {
        let th = self.fluctuated(c);
        let k = self.dim();
        let phi = self.family.dispersion;
        let mut h = DMatrix::zeros(k, k);
        for ((b, &t), &w) in self.basis.outer_iter().zip(&th).zip(&self.weight) {
            let s = self.family.kappa_second(t) * w * w / phi;
            for p in 0..k {
                if b[p] == 0.0 {
                    continue;
                }
                for q in 0..k {
                    h[(p, q)] += s * b[p] * b[q];
                }
            }
        }
        h / self.len() as f64
    }

    /// Damped Newton minimization of the convex regularizer in `c`, started
    /// at `c0`, until `‖∇‖∞ ≤ tol`.
    pub fn minimize(&self, c0: &[f64], tol: f64, max_iter: usize) -> PolishReport {
        let k = self.dim();
        let mut c = c0.to_vec();
        let mut f = self.loss(&c);
        let mut g = self.gradient(&c);
        let mut it = 0;
        while it < max_iter && inf_norm(&g) > tol {
            it += 1;
            let mut h = self.hessian(&c);
            let ridge = 1e-12 * (0..k).map(|i| h[(i, i)]).fold(0.0, f64::max).max(1e-300);
            for i in 0..k {
                h[(i, i)] += ridge;
            }
            let gv = DVector::from_vec(g.clone());
            let step = match h.clone().cholesky() {
                Some(ch) => ch.solve(&(-&gv)),
                None => -&gv,
            };
            let slope: f64 = step.dot(&gv);
            let mut t = 1.0;
            let mut accepted = false;
            for _ in 0..60 {
                let trial: Vec<f64> = c.iter().zip(step.iter()).map(|(ci, si)| ci + t * si).collect();
                let ft = self.loss(&trial);
                // near the optimum the loss difference drowns in rounding;
                // a full step that shrinks the gradient is then accepted
                let armijo = ft.is_finite() && ft <= f + 1e-4 * t * slope;
                let shrinks = t == 1.0 && ft.is_finite() && inf_norm(&self.gradient(&trial)) < 0.5 * inf_norm(&g);
                if armijo || shrinks {
                    c = trial;
                    f = ft;
                    accepted = true;
                    break;
                }
                t *= 0.5;
            }
            g = self.gradient(&c);
            if !accepted {
                break;
            }
        }
        let norm = inf_norm(&g);
        PolishReport { coefficients: c, iterations: it, grad_inf_norm: norm, converged: norm <= tol, loss: f }
    }
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolishReport {
    pub coefficients: Vec<f64>,
    pub iterations: usize,
    pub grad_inf_norm: f64,
    pub converged: bool,
    pub loss: f64,
}

/// Gradient of the regularizer w.r.t. the perturbation coefficients at the
/// model's current parameters.
pub fn treg_eps_gradient(model: &Model, batch: &Batch, clamp: f64) -> Result<Vec<f64>> {
    Ok(FrozenTreg::from_model(model, batch, clamp)?.gradient(model.eps_coefficients()))
}

/// Refit `ε` alone to stationarity on `batch` and store it in the model.
pub fn polish_eps(model: &mut Model, batch: &Batch, cfg: &LossConfig, tol: f64, max_iter: usize) -> Result<PolishReport> {
    let frozen = FrozenTreg::from_model(model, batch, cfg.overlap_clamp)?;
    let rep = frozen.minimize(model.eps_coefficients(), tol, max_iter);
    if rep.coefficients.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("perturbation refit produced non-finite coefficients".into()));
    }
    model.set_eps_coefficients(&rep.coefficients);
    model.meta.eps_stationarity = Some(rep.grad_inf_norm);
    model.meta.eps_polish_iterations = Some(rep.iterations);
    Ok(rep)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    /// Mean outcome negative log-likelihood.
    pub nll: f64,
    /// Mean `−log π̂`.
    pub neg_log_density: f64,
    /// `nll + neg_log_density`.
    pub base: f64,
    /// Regularizer value when active.
    pub treg: Option<f64>,
    /// `base + β · treg`.
    pub total: f64,
}

/// Evaluate the training objective at `params` and, if requested, its exact
/// gradient w.r.t. every parameter.
pub fn evaluate(model: &Model, params: &[f64], batch: &Batch, cfg: &LossConfig, want_grad: bool) -> Result<(LossParts, Option<Vec<f64>>)> {
    let n = batch.len();
    if n == 0 {
        return Err(Error::Data("empty batch".into()));
    }
    let fwd = model.forward(params, batch.x.view(), &batch.a)?;
    let fam = model.family();
    let phi = fam.dispersion;
    let nf = n as f64;

    let mut nll = 0.0;
    let mut nlp = 0.0;
    for i in 0..n {
        let l = fam.nll_theta(batch.y[i], fwd.theta[i]);
        if !l.is_finite() || !fwd.neg_log_pi[i].is_finite() {
            return Err(Error::Numeric(format!("non-finite loss at batch index {i}")));
        }
        nll += l;
        nlp += fwd.neg_log_pi[i];
    }
    nll /= nf;
    nlp /= nf;
    let base = nll + nlp;

    let active = cfg.treg_active();
    let mut parts = LossParts { nll, neg_log_density: nlp, base, treg: None, total: base };
    let eps_c = &params[model.eps_range()];
    let eps_basis = if active { Some(basis_matrix(model.eps_basis(), &batch.a)?) } else { None };
    let mut treg_rows: Option<TregRows> = None;
    if let Some(eb) = &eps_basis {
        let rows = treg_rows_from(model, &fwd, batch, eb, eps_c, cfg.overlap_clamp)?;
        let r = rows.loss / nf;
        parts.treg = Some(r);
        parts.total = base + cfg.beta * r;
        treg_rows = Some(rows);
    }
    if !want_grad {
        return Ok((parts, None));
    }

    let mut grad = vec![0.0; params.len()];
    let mut g_eta = vec![0.0; n];
    let mut g_pi = vec![0.0; n];
    let w_nlp = vec![1.0 / nf; n];
    for i in 0..n {
        g_eta[i] = (fam.kappa_prime(fwd.theta[i]) - batch.y[i]) / phi * fwd.dtheta_deta[i] / nf;
    }
    if let (Some(rows), Some(eb)) = (&treg_rows, &eps_basis) {
        let eps_r = model.eps_range();
        let beta = cfg.beta;
        for i in 0..n {
            let r = rows.resid[i] / nf;
            for (k, b) in eb.row(i).iter().enumerate() {
                grad[eps_r.start + k] += beta * b * r * rows.weight[i];
            }
            if !cfg.detach_nuisances_in_treg {
                g_eta[i] += beta * r * rows.dtheta_dmu[i] * mean_derivative(model, &fwd, i);
                g_pi[i] += beta * r * rows.dtheta_dpi[i];
            }
        }
    }
    let g_density = model.density_output_grad(&fwd, &batch.a, &g_pi, &w_nlp);
    model.backward(params, &fwd, &g_eta, g_density, &mut grad);
    Ok((parts, Some(grad)))
}

struct TregRows {
    loss: f64,
    /// `(κ′(θ̃) − y)/φ` per row.
    resid: Vec<f64>,
    /// `h′(μ̂)/π̂c` per row.
    weight: Vec<f64>,
    dtheta_dmu: Vec<f64>,
    dtheta_dpi: Vec<f64>,
}

fn treg_rows_from(model: &Model, fwd: &ModelForward, batch: &Batch, eb: &Array2<f64>, c: &[f64], clamp: f64) -> Result<TregRows> {
    let fam = model.family();
    let n = batch.len();
    let mut out = TregRows {
        loss: 0.0,
        resid: Vec::with_capacity(n),
        weight: Vec::with_capacity(n),
        dtheta_dmu: Vec::with_capacity(n),
        dtheta_dpi: Vec::with_capacity(n),
    };
    for i in 0..n {
        let raw_mu = fwd.mu[i];
        let m = fam.clamp_mean(raw_mu);
        let pic = fwd.pi[i].max(clamp);
        let eps_a: f64 = eb.row(i).iter().zip(c).map(|(b, c)| b * c).sum();
        let hp = fam.h_prime(m);
        let t = fluctuated_theta(fam.h(m), eps_a, pic, hp);
        let l = fam.nll_theta(batch.y[i], t);
        if !l.is_finite() {
            return Err(Error::Numeric(format!("non-finite regularizer at batch index {i}")));
        }
        out.loss += l;
        out.resid.push((fam.kappa_prime(t) - batch.y[i]) / fam.dispersion);
        out.weight.push(hp / pic);
        out.dtheta_dmu.push(if fam.mean_is_clamped(raw_mu) { 0.0 } else { hp + eps_a / pic * fam.h_second(m) });
        out.dtheta_dpi.push(if fwd.pi[i] > clamp { -eps_a * hp / (pic * pic) } else { 0.0 });
    }
    Ok(out)
}

/// `dμ/dη` for row `i`.
fn mean_derivative(model: &Model, fwd: &ModelForward, i: usize) -> f64 {
    let act = model.config().outcome_activation.unwrap_or(Activation::Identity);
    act.derivative(fwd.eta[i], fwd.mu[i])
}
