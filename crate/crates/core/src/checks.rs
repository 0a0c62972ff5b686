//! Numerical invariant checks behind the `selfcheck` and `gradcheck`
//! commands and the acceptance suite.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bench::{ols_slope, split, train, RunConfig};
use crate::dgp::{synthetic_covariates, Dgp, DgpSpec};
use crate::edf::{FamilyKind, FamilySpec, EPS_MEAN};
use crate::estimators::{eif_values, psi_plugin, psi_tr, remainder_r2, von_mises_check, FittedNuisance, OracleNuisance, PerturbedNuisance};
use crate::model::{Batch, Model, ModelConfig, TreatmentKind};
use crate::netcore::grad_check;
use crate::objective::{evaluate, treg_eps_gradient, treg_loss, LossConfig, OVERLAP_CLAMP};
use crate::seeds::substream;
use crate::Result;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: impl Into<String>, passed: bool, detail: String) -> Self {
        Check { name: name.into(), passed, detail }
    }
}

pub const FAMILIES: [FamilyKind; 2] = [FamilyKind::Bernoulli, FamilyKind::Poisson];

/// Perturbation sizes `2⁻¹ … 2⁻⁸` of the remainder-decay checks.
pub fn remainder_deltas() -> Vec<f64> {
    (1..=8).map(|k| 0.5f64.powi(k)).collect()
}

fn mean_se(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
    (m, (var / n).sqrt())
}

/// Influence function at oracle nuisances and oracle `psi` averages to zero
/// within three Monte-Carlo standard errors.
pub fn eif_mean_zero(family: FamilySpec, arm: f64, n_mc: usize, psi: f64, seed: u64) -> Result<Check> {
    let dgp = Dgp::synthetic(TreatmentKind::Binary, family);
    let data = dgp.generate_synthetic(n_mc, seed)?;
    let v = eif_values(&OracleNuisance { dgp: &dgp }, &data, arm, psi, OVERLAP_CLAMP)?.values;
    let (m, se) = mean_se(&v);
    Ok(Check::new(
        format!("eif mean zero ({:?}, a={arm})", family.kind),
        m.abs() <= 3.0 * se,
        format!("mean {m:.3e}, se {se:.3e}, z {:.2}", m / se),
    ))
}

/// Oracle `ψ_a` on fresh synthetic covariates.
pub fn oracle_psi(family: FamilySpec, arm: f64, rows: usize, seed: u64) -> f64 {
    let dgp = Dgp::synthetic(TreatmentKind::Binary, family);
    let x = synthetic_covariates(rows, &mut substream(seed, "mc"));
    dgp.adcf(x.view(), arm, seed).value
}

/// Log-log slope of `|R₂|` against `δ` along the default perturbation path.
pub fn remainder_slope(family: FamilySpec, arm: f64, n: usize, seed: u64) -> Result<(f64, Check)> {
    let dgp = Dgp::synthetic(TreatmentKind::Binary, family);
    let oracle = OracleNuisance { dgp: &dgp };
    let x = synthetic_covariates(n, &mut substream(seed, "mc"));
    let (mut lx, mut ly) = (vec![], vec![]);
    for delta in remainder_deltas() {
        let r = remainder_r2(&PerturbedNuisance::new(&oracle, delta), &oracle, x.view(), arm, OVERLAP_CLAMP)?;
        lx.push(delta.ln());
        ly.push(r.abs().ln());
    }
    let s = ols_slope(&lx, &ly);
    Ok((s, Check::new(format!("remainder slope ({:?}, a={arm})", family.kind), (s - 2.0).abs() <= 0.15, format!("slope {s:.4}"))))
}

/// Both sides of the first-order expansion agree within
/// `max(3 SE, C δ³)`, with `C` fit from the two largest `δ`.
pub fn von_mises_agreement(family: FamilySpec, arm: f64, n_mc: usize, seed: u64) -> Result<Check> {
    let dgp = Dgp::synthetic(TreatmentKind::Binary, family);
    let oracle = OracleNuisance { dgp: &dgp };
    let deltas = remainder_deltas();
    let reps = deltas
        .iter()
        .enumerate()
        .map(|(k, &d)| von_mises_check(&PerturbedNuisance::new(&oracle, d), &dgp, arm, n_mc, seed.wrapping_add(k as u64), OVERLAP_CLAMP))
        .collect::<Result<Vec<_>>>()?;
    let c = reps.iter().zip(&deltas).take(2).map(|(r, d)| r.gap / d.powi(3)).fold(0.0, f64::max);
    let mut worst = (0.0f64, 0.0);
    for (r, &d) in reps.iter().zip(&deltas) {
        let ratio = r.gap / (3.0 * r.gap_se).max(c * d.powi(3));
        if ratio > worst.0 {
            worst = (ratio, d);
        }
    }
    Ok(Check::new(
        format!("von Mises sides ({:?}, a={arm})", family.kind),
        worst.0 <= 1.0,
        format!("C {c:.3e}; worst gap/allowance {:.3} at delta {}", worst.0, worst.1),
    ))
}

/// A small model with generic parameters and a random batch.
pub fn probe_model(treatment: TreatmentKind, family: FamilySpec, seed: u64) -> Result<(Model, Batch)> {
    let mut c = ModelConfig::new(treatment, family, 3);
    c.rep_dims = vec![5];
    c.outcome_dims = vec![4];
    c.density_dims = vec![3];
    c.density_grid = 5;
    let mut m = Model::initialized(c.resolved(100), &mut substream(seed, "init"))?;
    let mut r = substream(seed, "data");
    let k = m.eps_coefficients().len();
    let eps: Vec<f64> = (0..k).map(|_| r.random_range(-0.05..0.05)).collect();
    m.set_eps_coefficients(&eps);
    // move off the initializer so biases and ReLU kinks are generic
    for v in m.params_mut() {
        *v += r.random_range(-0.3..0.3);
    }
    let n = 20;
    let x = Array2::from_shape_fn((n, 3), |_| r.random_range(-1.0..1.0));
    let a: Vec<f64> = (0..n)
        .map(|_| match treatment {
            TreatmentKind::Binary => (r.random_range(0.0..1.0) < 0.5) as u8 as f64,
            TreatmentKind::Continuous => r.random_range(0.0..1.0),
        })
        .collect();
    let y: Vec<f64> = (0..n).map(|_| family.sample(0.4, &mut r)).collect();
    Ok((m, Batch { x, a, y }))
}

/// Central-difference checks of the base loss and of the total loss with
/// the regularizer coupled to every parameter.
pub fn grad_checks(seed: u64, tol: f64) -> Result<Vec<Check>> {
    let mut out = Vec::new();
    let base = LossConfig { beta: 0.0, treg_enabled: false, ..Default::default() };
    let total = LossConfig { beta: 1.0, detach_nuisances_in_treg: false, ..Default::default() };
    for (i, t) in [TreatmentKind::Binary, TreatmentKind::Continuous].into_iter().enumerate() {
        for (j, kind) in FAMILIES.into_iter().enumerate() {
            let (m, batch) = probe_model(t, FamilySpec::new(kind), seed + 10 * i as u64 + j as u64)?;
            let p = m.params().to_vec();
            for (label, cfg) in [("base loss", base), ("total loss", total)] {
                let g = evaluate(&m, &p, &batch, &cfg, true)?.1.expect("gradient requested");
                let rep = grad_check(|q| Ok(evaluate(&m, q, &batch, &cfg, false)?.0.total), &p, &g, 1e-5, tol)?;
                out.push(Check::new(
                    format!("gradient of {label} ({t:?}, {kind:?})"),
                    rep.passed,
                    format!("max rel err {:.3e} at coordinate {}", rep.max_rel_err, rep.worst_coordinate),
                ));
            }
        }
    }
    Ok(out)
}

/// The continuous density head integrates to one for random parameters.
pub fn density_normalization(seed: u64) -> Result<Check> {
    let mut worst = 0.0f64;
    for k in 0..3u64 {
        let c = ModelConfig::new(TreatmentKind::Continuous, FamilySpec::bernoulli(), 6).resolved(10_000);
        let mut m = Model::initialized(c, &mut substream(seed + k, "init"))?;
        let mut r = substream(seed + k, "perturb");
        for v in m.params_mut() {
            *v += r.random_range(-2.0..2.0);
        }
        let x = synthetic_covariates(200, &mut r);
        for grid in m.evaluator(x.view())?.density_grids() {
            let b = (grid.len() - 1) as f64;
            // exact integral of the piecewise-linear interpolant
            let integral: f64 = grid.windows(2).map(|w| 0.5 * (w[0] + w[1]) / b).sum();
            worst = worst.max((integral - 1.0).abs());
        }
    }
    Ok(Check::new("density head integrates to one", worst <= 1e-10, format!("max |integral - 1| {worst:.3e}")))
}

/// `κ′(h(μ)) = μ` across each family's mean domain.
pub fn edf_inverse_pair() -> Check {
    let mut worst = 0.0f64;
    for kind in [FamilyKind::Bernoulli, FamilyKind::Poisson, FamilyKind::Gaussian] {
        let f = FamilySpec::new(kind);
        for i in 0..=400 {
            let u = i as f64 / 400.0;
            let mu = match kind {
                FamilyKind::Bernoulli => EPS_MEAN + u * (1.0 - 2.0 * EPS_MEAN),
                FamilyKind::Poisson => EPS_MEAN * (1e3 / EPS_MEAN).powf(u),
                FamilyKind::Gaussian => -20.0 + 40.0 * u,
            };
            worst = worst.max((f.kappa_prime(f.h(mu)) - mu).abs() / mu.abs().max(1.0));
        }
    }
    Check::new("edf inverse pair", worst <= 1e-12, format!("max rel err {worst:.3e}"))
}

fn tiny_run(family: FamilySpec) -> RunConfig {
    let mut run = RunConfig::new(DgpSpec::synthetic(1000, TreatmentKind::Binary, family));
    run.train.epochs = 30;
    run
}

/// Exact reductions: zero perturbation gives the plug-in and the outcome
/// likelihood, and β = 0 or a detached regularizer leave the nuisance
/// trajectory of the unregularized baseline untouched.
pub fn reductions(seed: u64) -> Result<Vec<Check>> {
    let mut out = Vec::new();
    for kind in FAMILIES {
        let fam = FamilySpec::new(kind);
        for t in [TreatmentKind::Binary, TreatmentKind::Continuous] {
            let (mut m, batch) = probe_model(t, fam, seed)?;
            let k = m.eps_coefficients().len();
            m.set_eps_coefficients(&vec![0.0; k]);
            let doses = match t {
                TreatmentKind::Binary => vec![0.0, 1.0],
                TreatmentKind::Continuous => vec![0.1, 0.5, 0.9],
            };
            let mut same = true;
            for &a in &doses {
                let tr = psi_tr(&m, batch.x.view(), a, OVERLAP_CLAMP)?;
                let pl = psi_plugin(&FittedNuisance { model: &m }, batch.x.view(), a)?;
                same &= tr.to_bits() == pl.to_bits();
            }
            out.push(Check::new(format!("targeted equals plug-in at zero perturbation ({t:?}, {kind:?})"), same, String::new()));

            let (mu, pi) = m.predict_rows(batch.x.view(), &batch.a)?;
            let zeros = vec![0.0; batch.len()];
            let reg = treg_loss(&fam, &batch.y, &mu, &pi, &zeros, OVERLAP_CLAMP)?;
            let nll = batch.y.iter().zip(&mu).map(|(&y, &u)| fam.nll(y, u)).collect::<Result<Vec<_>>>()?;
            let nll = nll.iter().sum::<f64>() / nll.len() as f64;
            out.push(Check::new(
                format!("regularizer at zero perturbation is the outcome likelihood ({t:?}, {kind:?})"),
                (reg - nll).abs() <= 1e-12,
                format!("difference {:.3e}", (reg - nll).abs()),
            ));
        }

        let run = tiny_run(fam);
        let (_, data) = crate::dgp::generate(&run.dgp, seed)?;
        let sp = split(data.len(), run.fractions(), seed)?;
        let est = data.batch();
        let plain = LossConfig { treg_enabled: false, ..run.loss };
        let zero = LossConfig { beta: 0.0, ..run.loss };
        let detached = LossConfig { beta: 1.0, detach_nuisances_in_treg: true, ..run.loss };
        let a = train(&run, &plain, &data, &sp, &est, seed)?;
        let b = train(&run, &zero, &data, &sp, &est, seed)?;
        let c = train(&run, &detached, &data, &sp, &est, seed)?;
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        let hist = |o: &crate::bench::TrainOutcome| o.history.iter().map(|h| (h.val_base.to_bits(), h.train_total.to_bits())).collect::<Vec<_>>();
        out.push(Check::new(
            format!("beta = 0 reproduces the unregularized trajectory ({kind:?})"),
            bits(a.model.params()) == bits(b.model.params()) && hist(&a) == hist(&b),
            format!("{} epochs", a.history.len()),
        ));
        let er = c.model.eps_range();
        let nuis = |m: &Model| m.params().iter().enumerate().filter(|(i, _)| !er.contains(i)).map(|(_, v)| v.to_bits()).collect::<Vec<_>>();
        out.push(Check::new(
            format!("detached regularizer leaves nuisance parameters unchanged ({kind:?})"),
            nuis(&a.model) == nuis(&c.model),
            String::new(),
        ));
    }
    Ok(out)
}

/// Inf-norm of the perturbation-coefficient gradient of the regularizer.
pub fn eps_stationarity(model: &Model, batch: &Batch, clamp: f64, tol: f64) -> Result<Check> {
    let g = treg_eps_gradient(model, batch, clamp)?;
    let norm = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    Ok(Check::new("perturbation stationarity", norm <= tol, format!("residual {norm:.3e}")))
}

/// Every check at sizes that finish in a few minutes on one core.
pub fn selfcheck(seed: u64) -> Result<Vec<Check>> {
    let mut out = Vec::new();
    for kind in FAMILIES {
        let fam = FamilySpec::new(kind);
        for arm in [0.0, 1.0] {
            let psi = oracle_psi(fam, arm, 1_000_000, seed);
            out.push(eif_mean_zero(fam, arm, 100_000, psi, seed)?);
        }
        out.push(remainder_slope(fam, 1.0, 50_000, seed)?.1);
        out.push(von_mises_agreement(fam, 1.0, 200_000, seed)?);
    }
    out.extend(grad_checks(seed, 1e-4)?);
    out.push(density_normalization(seed)?);
    out.push(edf_inverse_pair());
    out.extend(reductions(seed)?);

    let run = tiny_run(FamilySpec::bernoulli());
    let (_, data) = crate::dgp::generate(&run.dgp, seed)?;
    let sp = split(data.len(), run.fractions(), seed)?;
    let est = data.batch();
    let trained = train(&run, &run.loss, &data, &sp, &est, seed)?;
    out.push(eps_stationarity(&trained.model, &est, run.loss.overlap_clamp, 1e-4)?);
    Ok(out)
}
