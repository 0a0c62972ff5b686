//! Estimators of the average dose canonical function: plug-in, doubly robust
//! and targeted, together with the efficient influence function, the
//! second-order remainder and a Monte-Carlo check of the expansion linking
//! them.

use ndarray::ArrayView2;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::dgp::{Dataset, Dgp};
use crate::edf::{sigmoid, FamilySpec};
use crate::error::{Error, Result};
use crate::model::{Model, TreatmentKind};
use crate::seeds::substream;

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Clamp-hit rate above which a report is flagged.
pub const CLAMP_FLAG_RATE: f64 = 0.01;

/// Stationarity residual above which the targeted estimate carries a warning.
pub const STATIONARITY_WARN: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "description")]
pub enum Provenance {
    Oracle,
    Fitted,
    Corrupted(String),
}

/// Outcome mean and treatment probability/density as functions of `(x, a)`.
pub trait Nuisance: Sync {
    fn family(&self) -> FamilySpec;
    fn treatment(&self) -> TreatmentKind;
    fn provenance(&self) -> Provenance;

    /// `(μ clamped into the mean domain, π unclamped)` at per-row doses.
    fn eval(&self, x: ArrayView2<f64>, a: &[f64]) -> Result<(Vec<f64>, Vec<f64>)>;

    /// As [`Nuisance::eval`] with one dose for every row.
    fn eval_at(&self, x: ArrayView2<f64>, a: f64) -> Result<(Vec<f64>, Vec<f64>)> {
        self.eval(x, &vec![a; x.nrows()])
    }
}

/// The data-generating process's own nuisances.
pub struct OracleNuisance<'a> {
    pub dgp: &'a Dgp,
}

impl Nuisance for OracleNuisance<'_> {
    fn family(&self) -> FamilySpec {
        self.dgp.family()
    }

    fn treatment(&self) -> TreatmentKind {
        self.dgp.treatment()
    }

    fn provenance(&self) -> Provenance {
        Provenance::Oracle
    }

    fn eval(&self, x: ArrayView2<f64>, a: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let fam = self.family();
        let mut mu = Vec::with_capacity(a.len());
        let mut pi = Vec::with_capacity(a.len());
        for (row, &ai) in x.rows().into_iter().zip(a) {
            let r = row.to_vec();
            mu.push(fam.clamp_mean(self.dgp.mu(&r, ai)));
            pi.push(self.dgp.pi(&r, ai)?);
        }
        Ok((mu, pi))
    }
}

/// Nuisances read off a trained model.
pub struct FittedNuisance<'a> {
    pub model: &'a Model,
}

impl Nuisance for FittedNuisance<'_> {
    fn family(&self) -> FamilySpec {
        self.model.family()
    }

    fn treatment(&self) -> TreatmentKind {
        self.model.treatment()
    }

    fn provenance(&self) -> Provenance {
        Provenance::Fitted
    }

    fn eval(&self, x: ArrayView2<f64>, a: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        self.model.predict_rows(x, a)
    }

    fn eval_at(&self, x: ArrayView2<f64>, a: f64) -> Result<(Vec<f64>, Vec<f64>)> {
        self.model.predict_at_dose(x, a)
    }
}

/// Deliberately misspecified nuisances: the canonical parameter shifted by a
/// constant and/or the treatment probability replaced by a constant.
pub struct CorruptedNuisance<'a> {
    pub inner: &'a dyn Nuisance,
    pub theta_shift: f64,
    /// Constant `P(A = 1 | x)` for binary treatment, constant density for
    /// continuous treatment.
    pub pi_const: Option<f64>,
}

impl Nuisance for CorruptedNuisance<'_> {
    fn family(&self) -> FamilySpec {
        self.inner.family()
    }

    fn treatment(&self) -> TreatmentKind {
        self.inner.treatment()
    }

    fn provenance(&self) -> Provenance {
        let mut parts = Vec::new();
        if self.theta_shift != 0.0 {
            parts.push(format!("theta shifted by {}", self.theta_shift));
        }
        if let Some(p) = self.pi_const {
            parts.push(format!("pi fixed at {p}"));
        }
        Provenance::Corrupted(parts.join(", "))
    }

    fn eval(&self, x: ArrayView2<f64>, a: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let (mut mu, mut pi) = self.inner.eval(x, a)?;
        let fam = self.family();
        if self.theta_shift != 0.0 {
            for m in &mut mu {
                *m = fam.clamp_mean(fam.kappa_prime(fam.h(*m) + self.theta_shift));
            }
        }
        if let Some(p) = self.pi_const {
            for (v, &ai) in pi.iter_mut().zip(a) {
                *v = match self.treatment() {
                    TreatmentKind::Binary if ai == 1.0 => p,
                    TreatmentKind::Binary => 1.0 - p,
                    TreatmentKind::Continuous => p,
                };
            }
        }
        Ok((mu, pi))
    }
}

/// Smooth path through nuisance space: `θ̄ = θ + δ·s(x)` and, for binary
/// treatment, `logit π̄(1|x) = logit π(1|x) + δ·c(x)`.
pub struct PerturbedNuisance<'a> {
    pub inner: &'a dyn Nuisance,
    pub delta: f64,
    pub mu_direction: fn(&[f64]) -> f64,
    pub pi_direction: fn(&[f64]) -> f64,
}

/// Default outcome direction `(1 + x₁)/2`.
pub fn default_mu_direction(x: &[f64]) -> f64 {
    0.5 * (1.0 + x[0])
}

/// Default propensity direction `1 + x₂`.
pub fn default_pi_direction(x: &[f64]) -> f64 {
    1.0 + x.get(1).copied().unwrap_or(0.0)
}

fn no_direction(_: &[f64]) -> f64 {
    0.0
}

impl<'a> PerturbedNuisance<'a> {
    pub fn new(inner: &'a dyn Nuisance, delta: f64) -> Self {
        PerturbedNuisance { inner, delta, mu_direction: default_mu_direction, pi_direction: default_pi_direction }
    }

    /// Perturb only the outcome mean.
    pub fn mu_only(inner: &'a dyn Nuisance, delta: f64) -> Self {
        PerturbedNuisance { inner, delta, mu_direction: default_mu_direction, pi_direction: no_direction }
    }
}

impl Nuisance for PerturbedNuisance<'_> {
    fn family(&self) -> FamilySpec {
        self.inner.family()
    }

    fn treatment(&self) -> TreatmentKind {
        self.inner.treatment()
    }

    fn provenance(&self) -> Provenance {
        Provenance::Corrupted(format!("smooth perturbation with delta {}", self.delta))
    }

    fn eval(&self, x: ArrayView2<f64>, a: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let (mut mu, mut pi) = self.inner.eval(x, a)?;
        let fam = self.family();
        let pi_moves = (0..x.nrows()).any(|i| (self.pi_direction)(&x.row(i).to_vec()) != 0.0);
        if pi_moves && self.treatment() == TreatmentKind::Continuous {
            return Err(Error::Config("propensity perturbation is defined for binary treatment only".into()));
        }
        let p1 = if pi_moves { Some(self.inner.eval_at(x, 1.0)?.1) } else { None };
        for i in 0..x.nrows() {
            let r = x.row(i).to_vec();
            mu[i] = fam.clamp_mean(fam.kappa_prime(fam.h(mu[i]) + self.delta * (self.mu_direction)(&r)));
            if let Some(p1) = &p1 {
                let p = p1[i].clamp(1e-300, 1.0 - 1e-16);
                let q = sigmoid((p / (1.0 - p)).ln() + self.delta * (self.pi_direction)(&r));
                pi[i] = if a[i] == 1.0 { q } else { 1.0 - q };
            }
        }
        Ok((mu, pi))
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn sample_var(v: &[f64]) -> f64 {
    let m = mean(v);
    if v.len() < 2 {
        return 0.0;
    }
    v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64
}

fn require_binary(t: TreatmentKind, what: &str) -> Result<()> {
    if t != TreatmentKind::Binary {
        return Err(Error::Config(format!("{what} is defined for binary treatment only")));
    }
    Ok(())
}

/// `(1/n) Σ h(μ̂(xᵢ, a))`.
pub fn psi_plugin(nuis: &dyn Nuisance, x: ArrayView2<f64>, a: f64) -> Result<f64> {
    if x.nrows() == 0 {
        return Err(Error::Data("evaluation covariates are empty".into()));
    }
    let fam = nuis.family();
    let (mu, _) = nuis.eval_at(x, a)?;
    let theta: Vec<f64> = mu.iter().map(|&m| fam.h(m)).collect();
    Ok(mean(&theta))
}

/// Efficient influence function of `ψ_a` at one observation.
#[allow(clippy::too_many_arguments)]
pub fn eif(family: &FamilySpec, y: f64, a_obs: f64, mu: f64, pi: f64, a: f64, psi: f64, clamp: f64) -> f64 {
    let theta = family.h(mu);
    if a_obs == a {
        (y - mu) * family.h_prime(mu) / pi.max(clamp) + theta - psi
    } else {
        theta - psi
    }
}

/// Influence-function values over a dataset plus the count of clamped `π`.
#[derive(Debug, Clone)]
pub struct EifValues {
    pub values: Vec<f64>,
    pub clamp_hits: usize,
}

pub fn eif_values(nuis: &dyn Nuisance, data: &Dataset, a: f64, psi: f64, clamp: f64) -> Result<EifValues> {
    require_binary(nuis.treatment(), "the influence function")?;
    let fam = nuis.family();
    let (mu, pi) = nuis.eval_at(data.x.view(), a)?;
    let mut hits = 0;
    let values = (0..data.len())
        .map(|i| {
            if data.a[i] == a && pi[i] < clamp {
                hits += 1;
            }
            eif(&fam, data.y[i], data.a[i], mu[i], pi[i], a, psi, clamp)
        })
        .collect();
    Ok(EifValues { values, clamp_hits: hits })
}

/// Sample variance of the influence function.
pub fn eif_variance(nuis: &dyn Nuisance, data: &Dataset, a: f64, psi: f64, clamp: f64) -> Result<f64> {
    Ok(sample_var(&eif_values(nuis, data, a, psi, clamp)?.values))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DrEstimate {
    pub value: f64,
    /// `sd(φ̂)/√n`.
    pub se: f64,
    pub eif_variance: f64,
    pub clamp_hits: usize,
    pub n: usize,
}

/// Plug-in plus the average influence-function correction.
pub fn psi_dr(nuis: &dyn Nuisance, data: &Dataset, a: f64, clamp: f64) -> Result<DrEstimate> {
    require_binary(nuis.treatment(), "the doubly robust estimator")?;
    if !data.a.iter().any(|&v| v == a) {
        return Err(Error::Data(format!("no units observed at arm {a}")));
    }
    let fam = nuis.family();
    let (mu, pi) = nuis.eval_at(data.x.view(), a)?;
    let n = data.len();
    let mut hits = 0;
    let terms: Vec<f64> = (0..n)
        .map(|i| {
            let theta = fam.h(mu[i]);
            if data.a[i] == a {
                if pi[i] < clamp {
                    hits += 1;
                }
                theta + (data.y[i] - mu[i]) * fam.h_prime(mu[i]) / pi[i].max(clamp)
            } else {
                theta
            }
        })
        .collect();
    let value = mean(&terms);
    let var = sample_var(&terms);
    Ok(DrEstimate { value, se: (var / n as f64).sqrt(), eif_variance: var, clamp_hits: hits, n })
}

/// Two-fold cross-fitted doubly robust estimate: nuisances fitted on one
/// half are evaluated on the other, and the two half estimates averaged.
pub fn psi_dr_crossfit<'n, F>(data: &Dataset, a: f64, clamp: f64, seed: u64, fit: F) -> Result<DrEstimate>
where
    F: Fn(&Dataset) -> Result<Box<dyn Nuisance + 'n>>,
{
    let mut idx: Vec<usize> = (0..data.len()).collect();
    idx.shuffle(&mut substream(seed, "crossfit"));
    let half = data.len() / 2;
    let folds = [idx[..half].to_vec(), idx[half..].to_vec()];
    let mut parts = Vec::with_capacity(2);
    for k in 0..2 {
        let train = data.subset(&folds[1 - k]);
        let eval = data.subset(&folds[k]);
        let nuis = fit(&train)?;
        parts.push(psi_dr(nuis.as_ref(), &eval, a, clamp)?);
    }
    let n = data.len();
    let w0 = parts[0].n as f64 / n as f64;
    let w1 = parts[1].n as f64 / n as f64;
    let var = w0 * parts[0].eif_variance + w1 * parts[1].eif_variance;
    Ok(DrEstimate {
        value: 0.5 * (parts[0].value + parts[1].value),
        se: (var / n as f64).sqrt(),
        eif_variance: var,
        clamp_hits: parts[0].clamp_hits + parts[1].clamp_hits,
        n,
    })
}

/// Targeted estimate `(1/n) Σ [h(μ̂) + ε̂(a) h′(μ̂)/π̂]` at dose `a`.
pub fn psi_tr(model: &Model, x: ArrayView2<f64>, a: f64, clamp: f64) -> Result<f64> {
    if x.nrows() == 0 {
        return Err(Error::Data("evaluation covariates are empty".into()));
    }
    let (mu, pi) = model.predict_at_dose(x, a)?;
    Ok(tr_from_values(&model.family(), &mu, &pi, model.eval_eps(a)?, clamp))
}

fn tr_from_values(fam: &FamilySpec, mu: &[f64], pi: &[f64], eps: f64, clamp: f64) -> f64 {
    let v: Vec<f64> = mu.iter().zip(pi).map(|(&m, &p)| fam.h(m) + eps / p.max(clamp) * fam.h_prime(m)).collect();
    mean(&v)
}

/// Monte-Carlo second-order remainder between `bar` and `truth` over the
/// covariate rows `x`. The mean-value point of the Taylor term is replaced
/// by the midpoint of `μ` and `μ̄`.
pub fn remainder_r2(bar: &dyn Nuisance, truth: &dyn Nuisance, x: ArrayView2<f64>, a: f64, clamp: f64) -> Result<f64> {
    let terms = remainder_terms(bar, truth, x, a, clamp)?;
    Ok(mean(&terms))
}

fn remainder_terms(bar: &dyn Nuisance, truth: &dyn Nuisance, x: ArrayView2<f64>, a: f64, clamp: f64) -> Result<Vec<f64>> {
    let fam = truth.family();
    let (mb, pb) = bar.eval_at(x, a)?;
    let (m, p) = truth.eval_at(x, a)?;
    Ok((0..x.nrows())
        .map(|i| {
            let cross = fam.h_prime(mb[i]) * (p[i] / pb[i].max(clamp) - 1.0) * (m[i] - mb[i]);
            let mid = 0.5 * (m[i] + mb[i]);
            cross - 0.5 * fam.h_second(mid) * (mb[i] - m[i]).powi(2)
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VonMisesReport {
    /// `ψ(P̄) − ψ(P) + ∫φ(z; P̄) dP` from fresh draws of `(X, A, Y)`.
    pub lhs: f64,
    pub lhs_se: f64,
    /// The same quantity with `A, Y` integrated out analytically.
    pub lhs_conditional: f64,
    /// Midpoint-surrogate remainder.
    pub rhs: f64,
    pub gap: f64,
    /// Standard error of the per-draw difference behind `gap`.
    pub gap_se: f64,
}

/// Compare both sides of the first-order expansion of `ψ_a` by Monte Carlo
/// over `n_mc` fresh draws of the oracle process.
pub fn von_mises_check(bar: &dyn Nuisance, dgp: &Dgp, a: f64, n_mc: usize, seed: u64, clamp: f64) -> Result<VonMisesReport> {
    require_binary(dgp.treatment(), "the von Mises check")?;
    let truth = OracleNuisance { dgp };
    let data = if dgp.is_synthetic() {
        dgp.generate_synthetic(n_mc, seed)?
    } else {
        return Err(Error::Config("the von Mises check needs the synthetic scenario".into()));
    };
    let fam = dgp.family();
    let x = data.x.view();
    let (mb, pb) = bar.eval_at(x, a)?;
    let (m, p) = truth.eval_at(x, a)?;
    let r2 = remainder_terms(bar, &truth, x, a, clamp)?;
    let n = data.len();
    let mut full = Vec::with_capacity(n);
    let mut cond = Vec::with_capacity(n);
    let mut diff = Vec::with_capacity(n);
    for i in 0..n {
        let theta = fam.h(m[i]);
        let tb = fam.h(mb[i]);
        let w = fam.h_prime(mb[i]) / pb[i].max(clamp);
        let resid = if data.a[i] == a { data.y[i] - mb[i] } else { 0.0 };
        let f = tb + w * resid - theta;
        full.push(f);
        cond.push(tb + w * p[i] * (m[i] - mb[i]) - theta);
        diff.push(f - r2[i]);
    }
    let lhs = mean(&full);
    let rhs = mean(&r2);
    Ok(VonMisesReport {
        lhs,
        lhs_se: (sample_var(&full) / n as f64).sqrt(),
        lhs_conditional: mean(&cond),
        rhs,
        gap: (lhs - rhs).abs(),
        gap_se: (sample_var(&diff) / n as f64).sqrt(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DoseEstimate {
    pub a: f64,
    pub psi_plugin: f64,
    pub psi_tr: f64,
    pub psi_dr: Option<f64>,
    pub dr_se: Option<f64>,
    pub eif_variance: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AteEstimate {
    pub plugin: f64,
    pub tr: f64,
    pub dr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub eps_stationarity_norm: Option<f64>,
    pub clamp_hit_rate: f64,
    pub clamp_flagged: bool,
    pub stationarity_warning: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateReport {
    pub schema_version: u32,
    pub treatment: TreatmentKind,
    pub n: usize,
    pub doses: Vec<DoseEstimate>,
    pub ate: Option<AteEstimate>,
    pub diagnostics: Diagnostics,
    pub config_hash: Option<String>,
}

/// Evaluate every estimator of a trained model on `data`. Binary models are
/// reported at both arms; continuous models on `dose_grid`.
pub fn estimate_report(model: &Model, data: &Dataset, dose_grid: &[f64], clamp: f64) -> Result<EstimateReport> {
    if data.is_empty() {
        return Err(Error::Data("estimation data is empty".into()));
    }
    let fitted = FittedNuisance { model };
    let fam = model.family();
    let binary = model.treatment() == TreatmentKind::Binary;
    let doses: Vec<f64> = if binary { vec![0.0, 1.0] } else { dose_grid.to_vec() };
    let eval = model.evaluator(data.x.view())?;
    let mut out = Vec::with_capacity(doses.len());
    let mut hits = 0usize;
    let mut checked = 0usize;
    for &a in &doses {
        let (mu, pi) = eval.at_dose(a)?;
        let theta: Vec<f64> = mu.iter().map(|&m| fam.h(m)).collect();
        let plug = mean(&theta);
        let tr = tr_from_values(&fam, &mu, &pi, model.eval_eps(a)?, clamp);
        let (dr, se, var) = if binary {
            let d = psi_dr(&fitted, data, a, clamp)?;
            hits += d.clamp_hits;
            checked += data.a.iter().filter(|&&v| v == a).count();
            (Some(d.value), Some(d.se), Some(d.eif_variance))
        } else {
            hits += pi.iter().filter(|&&p| p < clamp).count();
            checked += pi.len();
            (None, None, None)
        };
        out.push(DoseEstimate { a, psi_plugin: plug, psi_tr: tr, psi_dr: dr, dr_se: se, eif_variance: var });
    }
    let ate = binary.then(|| AteEstimate {
        plugin: out[1].psi_plugin - out[0].psi_plugin,
        tr: out[1].psi_tr - out[0].psi_tr,
        dr: out[1].psi_dr.unwrap() - out[0].psi_dr.unwrap(),
    });
    let rate = hits as f64 / checked.max(1) as f64;
    let stat = model.meta.eps_stationarity;
    Ok(EstimateReport {
        schema_version: REPORT_SCHEMA_VERSION,
        treatment: model.treatment(),
        n: data.len(),
        doses: out,
        ate,
        diagnostics: Diagnostics {
            eps_stationarity_norm: stat,
            clamp_hit_rate: rate,
            clamp_flagged: rate > CLAMP_FLAG_RATE,
            stationarity_warning: stat.is_some_and(|s| s > STATIONARITY_WARN),
        },
        config_hash: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dgp::{synthetic_index, DatasetMeta};
    use crate::edf::FamilyKind;
    use crate::model::ModelConfig;
    use ndarray::Array2;

    struct Constant {
        fam: FamilySpec,
        mu: f64,
        p1: f64,
    }

    impl Nuisance for Constant {
        fn family(&self) -> FamilySpec {
            self.fam
        }
        fn treatment(&self) -> TreatmentKind {
            TreatmentKind::Binary
        }
        fn provenance(&self) -> Provenance {
            Provenance::Corrupted("constant".into())
        }
        fn eval(&self, _x: ArrayView2<f64>, a: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
            Ok((vec![self.mu; a.len()], a.iter().map(|&v| if v == 1.0 { self.p1 } else { 1.0 - self.p1 }).collect()))
        }
    }

    fn synth(fam: FamilySpec) -> Dgp {
        Dgp::synthetic(TreatmentKind::Binary, fam)
    }

    fn slope(xs: &[f64], ys: &[f64]) -> f64 {
        let n = xs.len() as f64;
        let mx = xs.iter().sum::<f64>() / n;
        let my = ys.iter().sum::<f64>() / n;
        let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
        let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
        sxy / sxx
    }

    #[test]
    fn plugin_with_oracle_recovers_index_means() {
        for fam in [FamilySpec::bernoulli(), FamilySpec::poisson()] {
            let g = synth(fam);
            let d = g.generate_synthetic(2000, 1).unwrap();
            let o = OracleNuisance { dgp: &g };
            for a in [0.0, 1.0] {
                let want: Vec<f64> = d
                    .x
                    .rows()
                    .into_iter()
                    .map(|r| synthetic_index(&r.to_vec(), a, fam.kind).clamp(-4.0, 4.0))
                    .collect();
                let want = want.iter().sum::<f64>() / want.len() as f64;
                let got = psi_plugin(&o, d.x.view(), a).unwrap();
                assert!((got - want).abs() < 1e-12, "{fam:?} a={a}: {got} vs {want}");
            }
        }
        let c = Constant { fam: FamilySpec::bernoulli(), mu: 0.5, p1: 0.5 };
        let x = Array2::zeros((5, 6));
        assert_eq!(psi_plugin(&c, x.view(), 1.0).unwrap(), 0.0);
        assert!(psi_plugin(&c, Array2::zeros((0, 6)).view(), 1.0).is_err());
    }

    #[test]
    fn eif_pointwise_cases() {
        let f = FamilySpec::bernoulli();
        let mu = 0.3;
        let psi = f.h(mu);
        assert_eq!(eif(&f, mu, 1.0, mu, 0.4, 1.0, psi, 1e-3), 0.0);
        assert_eq!(eif(&f, 1.0, 0.0, mu, 0.4, 1.0, 0.2, 1e-3), f.h(mu) - 0.2);
        // clamp replaces tiny probabilities
        let v = eif(&f, 1.0, 1.0, 0.5, 1e-9, 1.0, 0.0, 1e-3);
        assert!((v - 0.5 * 4.0 / 1e-3).abs() < 1e-9);
    }

    #[test]
    fn eif_has_mean_zero_at_truth() {
        for fam in [FamilySpec::bernoulli(), FamilySpec::poisson()] {
            let g = synth(fam);
            let o = OracleNuisance { dgp: &g };
            // ψ from an independent large sample of covariates
            let big = g.generate_synthetic(400_000, 90).unwrap();
            let d = g.generate_synthetic(100_000, 91).unwrap();
            for a in [0.0, 1.0] {
                let psi = g.adcf(big.x.view(), a, 90);
                let e = eif_values(&o, &d, a, psi.value, 1e-3).unwrap();
                let n = e.values.len() as f64;
                let m = mean(&e.values);
                let se = (sample_var(&e.values) / n).sqrt();
                let tol = 3.0 * (se * se + psi.mc_se * psi.mc_se).sqrt();
                assert!(m.abs() <= tol, "{fam:?} a={a}: mean {m} tol {tol}");
            }
        }
    }

    #[test]
    fn dr_matches_oracle_and_survives_propensity_corruption() {
        let g = synth(FamilySpec::bernoulli());
        let o = OracleNuisance { dgp: &g };
        let d = g.generate_synthetic(100_000, 5).unwrap();
        let psi1 = g.adcf(d.x.view(), 1.0, 5).value;
        let dr = psi_dr(&o, &d, 1.0, 1e-3).unwrap();
        assert!((dr.value - psi1).abs() <= 5.0 * dr.se, "{} vs {psi1} se {}", dr.value, dr.se);
        let bad_pi = CorruptedNuisance { inner: &o, theta_shift: 0.0, pi_const: Some(0.5) };
        let dr = psi_dr(&bad_pi, &d, 1.0, 1e-3).unwrap();
        assert!((dr.value - psi1).abs() <= 5.0 * dr.se, "{} vs {psi1} se {}", dr.value, dr.se);
        let mut only0 = d.clone();
        only0.a.iter_mut().for_each(|a| *a = 0.0);
        assert!(psi_dr(&o, &only0, 1.0, 1e-3).is_err());
    }

    #[test]
    fn crossfit_with_oracle_equals_full_sample_up_to_fold_split() {
        let g = synth(FamilySpec::bernoulli());
        let d = g.generate_synthetic(20_000, 8).unwrap();
        let full = psi_dr(&OracleNuisance { dgp: &g }, &d, 1.0, 1e-3).unwrap();
        let cf = psi_dr_crossfit(&d, 1.0, 1e-3, 3, |_| Ok(Box::new(OracleNuisance { dgp: &g }))).unwrap();
        // with nuisances that ignore the training fold the two halves
        // partition the full sample
        assert!((cf.value - full.value).abs() < 2.0 * full.se);
        assert_eq!(cf.n, d.len());
    }

    fn constant_model(eps: f64) -> Model {
        let cfg = ModelConfig::new(TreatmentKind::Binary, FamilySpec::bernoulli(), 3).resolved(100);
        let mut m = Model::new(cfg).unwrap();
        let n = m.params().len();
        m.set_params(vec![0.0; n]).unwrap();
        let k = m.eps_coefficients().len();
        m.set_eps_coefficients(&vec![eps; k]);
        m
    }

    #[test]
    fn targeted_estimate_reductions() {
        let m = constant_model(0.1);
        let x = Array2::from_elem((4, 3), 0.3);
        let v = psi_tr(&m, x.view(), 1.0, 1e-3).unwrap();
        assert!((v - 0.8).abs() < 1e-12, "{v}");
        let m0 = constant_model(0.0);
        let f = FittedNuisance { model: &m0 };
        assert_eq!(psi_tr(&m0, x.view(), 1.0, 1e-3).unwrap().to_bits(), psi_plugin(&f, x.view(), 1.0).unwrap().to_bits());
    }

    #[test]
    fn remainder_vanishes_at_truth_and_for_gaussian_mean_shifts() {
        let g = synth(FamilySpec::bernoulli());
        let o = OracleNuisance { dgp: &g };
        let d = g.generate_synthetic(3000, 2).unwrap();
        assert_eq!(remainder_r2(&o, &o, d.x.view(), 1.0, 1e-3).unwrap(), 0.0);
        let gg = synth(FamilySpec::gaussian(1.0).unwrap());
        let og = OracleNuisance { dgp: &gg };
        for delta in [0.5, 0.1] {
            let bar = PerturbedNuisance::mu_only(&og, delta);
            assert!(remainder_r2(&bar, &og, d.x.view(), 1.0, 1e-3).unwrap().abs() < 1e-14);
        }
    }

    #[test]
    fn remainder_decays_quadratically() {
        for fam in [FamilySpec::bernoulli(), FamilySpec::poisson()] {
            let g = synth(fam);
            let o = OracleNuisance { dgp: &g };
            let d = g.generate_synthetic(50_000, 4).unwrap();
            let (mut lx, mut ly) = (vec![], vec![]);
            for k in 1..=8 {
                let delta = 0.5f64.powi(k);
                let r = remainder_r2(&PerturbedNuisance::new(&o, delta), &o, d.x.view(), 1.0, 1e-3).unwrap();
                lx.push(delta.ln());
                ly.push(r.abs().ln());
            }
            let s = slope(&lx, &ly);
            assert!((s - 2.0).abs() <= 0.15, "{fam:?}: slope {s}");
        }
    }

    #[test]
    fn von_mises_sides_agree() {
        let g = synth(FamilySpec::bernoulli());
        let o = OracleNuisance { dgp: &g };
        let zero = von_mises_check(&o, &g, 1.0, 50_000, 12, 1e-3).unwrap();
        assert_eq!(zero.rhs, 0.0);
        assert!(zero.lhs.abs() <= 3.0 * zero.lhs_se);
        assert!(zero.lhs_conditional.abs() < 1e-12);

        let bar = PerturbedNuisance::new(&o, 0.25);
        let r = von_mises_check(&bar, &g, 1.0, 1_000_000, 13, 1e-3).unwrap();
        assert!(r.gap <= 3.0 * r.gap_se + 0.25f64.powi(3), "{r:?}");
        // analytic inner integral leaves only the midpoint surrogate error
        assert!((r.lhs_conditional - r.rhs).abs() <= 0.25f64.powi(3));

        let gg = synth(FamilySpec::gaussian(1.0).unwrap());
        let og = OracleNuisance { dgp: &gg };
        let r = von_mises_check(&PerturbedNuisance::mu_only(&og, 0.3), &gg, 1.0, 200_000, 14, 1e-3).unwrap();
        assert!(r.lhs.abs() <= 3.0 * r.lhs_se, "{r:?}");
        assert!(r.rhs.abs() < 1e-14);
    }

    #[test]
    fn eif_variance_cases() {
        // deterministic outcome equal to a constant mean
        let c = Constant { fam: FamilySpec::gaussian(1.0).unwrap(), mu: 2.0, p1: 0.5 };
        let d = Dataset {
            x: Array2::zeros((50, 6)),
            a: (0..50).map(|i| (i % 2) as f64).collect(),
            y: vec![2.0; 50],
            meta: DatasetMeta::default(),
        };
        assert_eq!(eif_variance(&c, &d, 1.0, 2.0, 1e-3).unwrap(), 0.0);

        let g = synth(FamilySpec::bernoulli());
        let o = OracleNuisance { dgp: &g };
        let d1 = g.generate_synthetic(100_000, 21).unwrap();
        let d2 = g.generate_synthetic(100_000, 22).unwrap();
        let psi = g.adcf(d1.x.view(), 1.0, 21).value;
        let var_se = |v: &[f64]| {
            let m = mean(v);
            let s2 = sample_var(v);
            let m4 = v.iter().map(|x| (x - m).powi(4)).sum::<f64>() / v.len() as f64;
            (s2, ((m4 - s2 * s2) / v.len() as f64).sqrt())
        };
        let (v1, s1) = var_se(&eif_values(&o, &d1, 1.0, psi, 1e-3).unwrap().values);
        let (v2, s2) = var_se(&eif_values(&o, &d2, 1.0, psi, 1e-3).unwrap().values);
        assert!((v1 - v2).abs() <= 3.0 * (s1 * s1 + s2 * s2).sqrt(), "{v1} vs {v2}");

        // pushing π̄(1|x) down inflates the inverse weights
        let small = PerturbedNuisance { inner: &o, delta: -1.0, mu_direction: no_direction, pi_direction: default_pi_direction };
        let large = PerturbedNuisance { inner: &o, delta: -2.0, mu_direction: no_direction, pi_direction: default_pi_direction };
        let vs = eif_variance(&small, &d1, 1.0, psi, 1e-3).unwrap();
        let vl = eif_variance(&large, &d1, 1.0, psi, 1e-3).unwrap();
        assert!(vl > vs && vs > v1, "{v1} {vs} {vl}");
    }

    #[test]
    fn binary_only_operations_reject_continuous() {
        let g = Dgp::synthetic(TreatmentKind::Continuous, FamilySpec::bernoulli());
        let o = OracleNuisance { dgp: &g };
        let d = g.generate_synthetic(10, 1).unwrap();
        assert!(psi_dr(&o, &d, 0.5, 1e-3).is_err());
        assert!(matches!(o.family().kind, FamilyKind::Bernoulli));
    }
}
