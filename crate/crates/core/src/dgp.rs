//! Simulated treatment/outcome mechanisms with closed-form oracles, and CSV
//! dataset ingestion.
//!
//! The synthetic scenario draws six uniform covariates; the semi-synthetic
//! scenario reuses any covariate matrix and builds treatment and outcome from
//! three random unit projections. Both expose the true conditional mean,
//! canonical parameter and treatment density so estimators can be scored.

use std::path::Path;
use std::sync::OnceLock;

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Beta, Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::edf::{sigmoid, FamilyKind, FamilySpec};
use crate::error::{Error, Result};
use crate::model::{Batch, TreatmentKind};
use crate::seeds::{sha256_hex, substream};

/// Smallest second shape parameter used when drawing `Beta(2, |ã|)`.
pub const BETA_SHAPE_FLOOR: f64 = 1e-3;

/// Largest double below 1; continuous treatments drawn as exactly 1 are
/// moved here so every dose stays inside the open unit interval.
pub const LARGEST_BELOW_ONE: f64 = 1.0 - f64::EPSILON / 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    News,
    Tcga,
    Custom,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SemiSyntheticSpec {
    pub preset: Preset,
    /// Treatment scale; defaults from the preset and treatment kind.
    #[serde(default)]
    pub w: Option<f64>,
    #[serde(default)]
    pub alpha: Option<f64>,
    #[serde(default)]
    pub beta: Option<f64>,
    #[serde(default)]
    pub gamma: Option<f64>,
    /// Seed of the projection vectors `V₁, V₂, V₃`.
    #[serde(default)]
    pub projection_seed: u64,
    /// Use `exp(max(4, γμ̃))` for the Poisson rate instead of `exp(min(4, γμ̃))`.
    #[serde(default)]
    pub strict_poisson_cap: bool,
    pub covariates: CovariateSource,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum CovariateSource {
    /// Sparse nonnegative count-like matrix with 498 columns.
    NewsLike { n: usize },
    /// Dense positive row-normalized matrix with 4000 columns.
    TcgaLike { n: usize },
    /// Covariates read from a CSV file of numbers with a header row.
    Csv { path: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "scenario", rename_all = "snake_case", deny_unknown_fields)]
pub enum Scenario {
    Synthetic {
        #[serde(default = "default_n")]
        n: usize,
    },
    SemiSynthetic(SemiSyntheticSpec),
}

fn default_n() -> usize {
    10000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "DgpSpecFields")]
pub struct DgpSpec {
    #[serde(flatten)]
    pub scenario: Scenario,
    pub treatment: TreatmentKind,
    pub family: FamilySpec,
    /// Location of the Gaussian treatment noise in the synthetic scenario.
    #[serde(default)]
    pub noise_mean: f64,
    /// Standard deviation of that noise.
    #[serde(default = "default_noise_sd")]
    pub noise_sd: f64,
}

fn default_noise_sd() -> f64 {
    0.5
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
enum ScenarioKind {
    Synthetic,
    SemiSynthetic,
}

/// Flat wire form of [`DgpSpec`]. serde cannot reject unknown keys through a
/// flattened enum, so parsing goes through this struct.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct DgpSpecFields {
    scenario: ScenarioKind,
    n: Option<usize>,
    preset: Option<Preset>,
    w: Option<f64>,
    alpha: Option<f64>,
    beta: Option<f64>,
    gamma: Option<f64>,
    projection_seed: Option<u64>,
    strict_poisson_cap: Option<bool>,
    covariates: Option<CovariateSource>,
    treatment: TreatmentKind,
    family: FamilySpec,
    #[serde(default)]
    noise_mean: f64,
    #[serde(default = "default_noise_sd")]
    noise_sd: f64,
}

impl TryFrom<DgpSpecFields> for DgpSpec {
    type Error = String;

    fn try_from(f: DgpSpecFields) -> std::result::Result<Self, String> {
        let scenario = match f.scenario {
            ScenarioKind::Synthetic => {
                let semi_only = [
                    ("preset", f.preset.is_some()),
                    ("w", f.w.is_some()),
                    ("alpha", f.alpha.is_some()),
                    ("beta", f.beta.is_some()),
                    ("gamma", f.gamma.is_some()),
                    ("projection_seed", f.projection_seed.is_some()),
                    ("strict_poisson_cap", f.strict_poisson_cap.is_some()),
                    ("covariates", f.covariates.is_some()),
                ];
                if let Some((k, _)) = semi_only.iter().find(|(_, set)| *set) {
                    return Err(format!("field `{k}` applies only to the semi_synthetic scenario"));
                }
                Scenario::Synthetic { n: f.n.unwrap_or_else(default_n) }
            }
            ScenarioKind::SemiSynthetic => {
                if f.n.is_some() {
                    return Err("field `n` applies only to the synthetic scenario; set covariates.n".into());
                }
                Scenario::SemiSynthetic(SemiSyntheticSpec {
                    preset: f.preset.ok_or("missing field `preset`")?,
                    w: f.w,
                    alpha: f.alpha,
                    beta: f.beta,
                    gamma: f.gamma,
                    projection_seed: f.projection_seed.unwrap_or(0),
                    strict_poisson_cap: f.strict_poisson_cap.unwrap_or(false),
                    covariates: f.covariates.ok_or("missing field `covariates`")?,
                })
            }
        };
        Ok(DgpSpec { scenario, treatment: f.treatment, family: f.family, noise_mean: f.noise_mean, noise_sd: f.noise_sd })
    }
}

impl DgpSpec {
    pub fn synthetic(n: usize, treatment: TreatmentKind, family: FamilySpec) -> Self {
        DgpSpec { scenario: Scenario::Synthetic { n }, treatment, family, noise_mean: 0.0, noise_sd: 0.5 }
    }

    pub fn validate(&self) -> Result<()> {
        self.family.validate()?;
        if !(self.noise_sd > 0.0) {
            return Err(Error::Config("dgp.noise_sd must be positive".into()));
        }
        match &self.scenario {
            Scenario::Synthetic { n } if *n == 0 => Err(Error::Config("dgp.n must be >= 1".into())),
            Scenario::SemiSynthetic(s) => {
                if s.preset == Preset::Custom && (s.w.is_none() || s.alpha.is_none() || s.beta.is_none() || s.gamma.is_none()) {
                    return Err(Error::Config("custom preset needs dgp.w, dgp.alpha, dgp.beta and dgp.gamma".into()));
                }
                if self.family.kind == FamilyKind::Gaussian {
                    return Err(Error::Config("semi-synthetic outcomes are Bernoulli or Poisson".into()));
                }
                Ok(())
            }
            _ => {
                if self.family.kind == FamilyKind::Gaussian {
                    return Err(Error::Config("synthetic outcomes are Bernoulli or Poisson".into()));
                }
                Ok(())
            }
        }
    }

    pub fn hash(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("spec serializes").as_bytes())
    }
}

/// Constants of a semi-synthetic preset after defaults are applied.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SemiConstants {
    pub w: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub strict_poisson_cap: bool,
}

impl SemiSyntheticSpec {
    pub fn constants(&self, treatment: TreatmentKind) -> SemiConstants {
        let (w, alpha, beta, gamma) = match (self.preset, treatment) {
            (Preset::News, TreatmentKind::Binary) => (1.5, -2.0, 10.0, 2.5),
            (Preset::News, TreatmentKind::Continuous) => (0.5, -2.0, 10.0, 2.5),
            (Preset::Tcga, TreatmentKind::Binary) => (5.0, -0.5, 5.0, 4.5),
            (Preset::Tcga, TreatmentKind::Continuous) => (0.2, -0.5, 5.0, 4.5),
            (Preset::Custom, _) => (f64::NAN, f64::NAN, f64::NAN, f64::NAN),
        };
        SemiConstants {
            w: self.w.unwrap_or(w),
            alpha: self.alpha.unwrap_or(alpha),
            beta: self.beta.unwrap_or(beta),
            gamma: self.gamma.unwrap_or(gamma),
            strict_poisson_cap: self.strict_poisson_cap,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Projections {
    pub v1: Vec<f64>,
    pub v2: Vec<f64>,
    pub v3: Vec<f64>,
}

impl Projections {
    fn draw<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Self {
        let mut unit = || {
            let u: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
            let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt();
            u.into_iter().map(|v| v / norm).collect::<Vec<f64>>()
        };
        let v1 = unit();
        let v2 = unit();
        let v3 = unit();
        Projections { v1, v2, v3 }
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub seed: u64,
    pub spec_hash: String,
    pub family: Option<FamilyKind>,
    pub treatment: Option<TreatmentKind>,
    /// Rows whose Beta shape parameter was raised to [`BETA_SHAPE_FLOOR`].
    #[serde(default)]
    pub beta_shape_floored: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: Array2<f64>,
    pub a: Vec<f64>,
    pub y: Vec<f64>,
    pub meta: DatasetMeta,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.a.len()
    }

    pub fn is_empty(&self) -> bool {
        self.a.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x.ncols()
    }

    pub fn batch(&self) -> Batch {
        Batch { x: self.x.clone(), a: self.a.clone(), y: self.y.clone() }
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        let b = self.batch().rows(idx);
        Dataset { x: b.x, a: b.a, y: b.y, meta: self.meta.clone() }
    }

    /// Check the treatment and outcome domains, naming the first bad row
    /// (1-based, counting the header as row 1 in files).
    pub fn validate(&self, treatment: Option<TreatmentKind>, family: Option<FamilySpec>) -> Result<()> {
        if self.x.nrows() != self.a.len() || self.a.len() != self.y.len() {
            return Err(Error::Data("covariate, treatment and outcome lengths differ".into()));
        }
        for i in 0..self.len() {
            if self.x.row(i).iter().any(|v| !v.is_finite()) || !self.a[i].is_finite() || !self.y[i].is_finite() {
                return Err(Error::Data(format!("row {}: non-finite value", i + 2)));
            }
            if let Some(t) = treatment {
                t.check_dose(self.a[i]).map_err(|e| Error::Data(format!("row {}: {e}", i + 2)))?;
            }
            if let Some(f) = family {
                f.check_outcome(self.y[i]).map_err(|e| Error::Data(format!("row {}: {e}", i + 2)))?;
            }
        }
        Ok(())
    }
}

/// Monte-Carlo oracle value with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OracleValue {
    pub value: f64,
    pub mc_se: f64,
    pub n_mc: usize,
    pub seed: u64,
}

/// Nodes and weights of 64-point Gauss–Hermite quadrature
/// (`∫ f(t) e^{−t²} dt ≈ Σ wᵢ f(tᵢ)`), by Golub–Welsch.
pub fn gauss_hermite_64() -> &'static (Vec<f64>, Vec<f64>) {
    static GH: OnceLock<(Vec<f64>, Vec<f64>)> = OnceLock::new();
    GH.get_or_init(|| {
        let n = 64;
        let mut j = DMatrix::<f64>::zeros(n, n);
        for k in 1..n {
            let b = (k as f64 / 2.0).sqrt();
            j[(k, k - 1)] = b;
            j[(k - 1, k)] = b;
        }
        let eig = SymmetricEigen::new(j);
        let mut pairs: Vec<(f64, f64)> = (0..n)
            .map(|i| {
                let v0 = eig.eigenvectors[(0, i)];
                (eig.eigenvalues[i], std::f64::consts::PI.sqrt() * v0 * v0)
            })
            .collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        pairs.into_iter().unzip()
    })
}

/// Systematic part of the synthetic treatment score.
pub fn synthetic_score(x: &[f64]) -> f64 {
    let (x1, x2, x3, x4, x5) = (x[0], x[1], x[2], x[3], x[4]);
    let m123 = x1.max(x2).max(x3);
    let m345 = x3.max(x4).max(x5);
    10.0 * (m123.sin() + m345.powi(3)) / (1.0 + (x1 + x5).powi(2))
        + (0.5 * x3).sin() * (1.0 + (x4 - 0.5 * x3).exp())
        + x3 * x3
        + 2.0 * x4.sin()
        + 2.0 * x5
        - 6.5
}

/// Outcome index `μ̃(x, a)` of the synthetic scenario.
pub fn synthetic_index(x: &[f64], a: f64, family: FamilyKind) -> f64 {
    let gamma = match family {
        FamilyKind::Poisson => 0.5,
        _ => -0.5,
    };
    let m16 = x[0].max(x[5]);
    2.0 * (a + gamma) * x[3].sin() * (a + 4.0 * m16.powi(3)) / (1.0 + 2.0 * x[2] * x[2])
}

/// A fully specified data-generating process: the `DgpSpec` plus, for the
/// semi-synthetic scenario, the realized projections.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dgp {
    pub spec: DgpSpec,
    pub projections: Option<Projections>,
    pub constants: Option<SemiConstants>,
}

impl Dgp {
    pub fn synthetic(treatment: TreatmentKind, family: FamilySpec) -> Self {
        Dgp { spec: DgpSpec::synthetic(10000, treatment, family), projections: None, constants: None }
    }

    pub fn from_spec(spec: DgpSpec) -> Result<Self> {
        spec.validate()?;
        let constants = match &spec.scenario {
            Scenario::SemiSynthetic(s) => Some(s.constants(spec.treatment)),
            _ => None,
        };
        Ok(Dgp { spec, projections: None, constants })
    }

    pub fn treatment(&self) -> TreatmentKind {
        self.spec.treatment
    }

    pub fn family(&self) -> FamilySpec {
        self.spec.family
    }

    pub fn is_synthetic(&self) -> bool {
        matches!(self.spec.scenario, Scenario::Synthetic { .. })
    }

    /// Draw projections for covariates `x`, retrying until no row has
    /// `V₂ᵀx = 0` or `V₃ᵀx = −2`.
    pub fn realize_projections(&mut self, x: ArrayView2<f64>) -> Result<()> {
        let Scenario::SemiSynthetic(s) = &self.spec.scenario else {
            return Ok(());
        };
        let mut rng = substream(s.projection_seed, "projections");
        for _ in 0..10 {
            let p = Projections::draw(x.ncols(), &mut rng);
            let ok = x.axis_iter(Axis(0)).all(|r| {
                let r = r.to_vec();
                dot(&p.v2, &r) != 0.0 && dot(&p.v3, &r) + 2.0 != 0.0
            });
            if ok {
                self.projections = Some(p);
                return Ok(());
            }
        }
        Err(Error::Data("projection denominators vanish for some row after 10 redraws".into()))
    }

    fn semi(&self) -> (&Projections, SemiConstants) {
        (
            self.projections.as_ref().expect("semi-synthetic projections are realized"),
            self.constants.expect("semi-synthetic constants are resolved"),
        )
    }

    /// Treatment score `ã(x)` without noise.
    pub fn score(&self, x: &[f64]) -> f64 {
        if self.is_synthetic() {
            synthetic_score(x)
        } else {
            let (p, c) = self.semi();
            (c.w * dot(&p.v3, x) / dot(&p.v2, x)).abs()
        }
    }

    /// Outcome index `μ̃(x, a)`.
    pub fn index(&self, x: &[f64], a: f64) -> f64 {
        if self.is_synthetic() {
            return synthetic_index(x, a, self.spec.family.kind);
        }
        let (p, c) = self.semi();
        let ratio = dot(&p.v2, x) / (dot(&p.v3, x) + 2.0) - 0.3;
        let v1 = dot(&p.v1, x);
        match self.spec.treatment {
            TreatmentKind::Binary => (1.2 * std::f64::consts::PI * a).cos() * 2.0 * ratio.max(-2.0) + 10.0 * v1,
            TreatmentKind::Continuous => {
                20.0 * (a - 0.5) * (std::f64::consts::PI * a).sin() * (ratio.max(c.alpha) + c.beta * v1)
            }
        }
    }

    /// True canonical parameter `θ(x, a)`.
    pub fn theta(&self, x: &[f64], a: f64) -> f64 {
        let m = self.index(x, a);
        match self.spec.family.kind {
            FamilyKind::Bernoulli | FamilyKind::Gaussian => m,
            FamilyKind::Poisson => {
                if self.is_synthetic() {
                    m.clamp(-4.0, 4.0)
                } else {
                    let c = self.semi().1;
                    if c.strict_poisson_cap {
                        (c.gamma * m).max(4.0)
                    } else {
                        (c.gamma * m).min(4.0)
                    }
                }
            }
        }
    }

    /// True conditional mean `μ(x, a) = κ′(θ(x, a))`.
    pub fn mu(&self, x: &[f64], a: f64) -> f64 {
        self.spec.family.kappa_prime(self.theta(x, a))
    }

    /// True treatment probability (binary arm `a`) or density (continuous).
    pub fn pi(&self, x: &[f64], a: f64) -> Result<f64> {
        self.spec.treatment.check_dose(a)?;
        let s = self.score(x);
        let (mean, sd) = (self.spec.noise_mean, self.spec.noise_sd);
        match (self.is_synthetic(), self.spec.treatment) {
            (true, TreatmentKind::Binary) => {
                let (t, w) = gauss_hermite_64();
                let p1: f64 = t
                    .iter()
                    .zip(w)
                    .map(|(t, w)| w * sigmoid(s + mean + std::f64::consts::SQRT_2 * sd * t))
                    .sum::<f64>()
                    / std::f64::consts::PI.sqrt();
                Ok(if a == 1.0 { p1 } else { 1.0 - p1 })
            }
            (true, TreatmentKind::Continuous) => {
                if a <= 0.0 || a >= 1.0 {
                    return Err(Error::Domain(format!("treatment density diverges at a = {a}")));
                }
                let z = ((a / (1.0 - a)).ln() - s - mean) / sd;
                let phi = (-0.5 * z * z).exp() / ((2.0 * std::f64::consts::PI).sqrt() * sd);
                Ok(phi / (a * (1.0 - a)))
            }
            (false, TreatmentKind::Binary) => {
                let p1 = sigmoid(s);
                Ok(if a == 1.0 { p1 } else { 1.0 - p1 })
            }
            (false, TreatmentKind::Continuous) => {
                if a <= 0.0 || a >= 1.0 {
                    return Err(Error::Domain(format!("treatment density undefined at a = {a}")));
                }
                let b = s.abs().max(BETA_SHAPE_FLOOR);
                // Beta(2, b): a (1−a)^{b−1} / B(2, b), B(2, b) = 1/(b(b+1))
                Ok(a * (1.0 - a).powf(b - 1.0) * b * (b + 1.0))
            }
        }
    }

    /// Draw treatments and outcomes for covariates `x`.
    pub fn sample_given_x<R: Rng + ?Sized>(&self, x: &Array2<f64>, rng: &mut R) -> Result<(Vec<f64>, Vec<f64>, usize)> {
        let n = x.nrows();
        let mut a = Vec::with_capacity(n);
        let mut y = Vec::with_capacity(n);
        let mut floored = 0;
        let noise = Normal::new(self.spec.noise_mean, self.spec.noise_sd).map_err(|e| Error::Config(e.to_string()))?;
        for row in x.axis_iter(Axis(0)) {
            let xi = row.to_vec();
            let s = self.score(&xi);
            let ai = match (self.is_synthetic(), self.spec.treatment) {
                (true, TreatmentKind::Binary) => {
                    let t = s + noise.sample(rng);
                    (rng.random::<f64>() < sigmoid(t)) as u8 as f64
                }
                (true, TreatmentKind::Continuous) => sigmoid(s + noise.sample(rng)),
                (false, TreatmentKind::Binary) => (rng.random::<f64>() < sigmoid(s)) as u8 as f64,
                (false, TreatmentKind::Continuous) => {
                    let mut b = s.abs();
                    if b < BETA_SHAPE_FLOOR {
                        b = BETA_SHAPE_FLOOR;
                        floored += 1;
                    }
                    let d = Beta::new(2.0, b).map_err(|e| Error::Numeric(e.to_string()))?;
                    // small shapes put mass within rounding distance of 1
                    let v: f64 = d.sample(rng);
                    v.min(LARGEST_BELOW_ONE)
                }
            };
            let mu = self.mu(&xi, ai);
            a.push(ai);
            y.push(self.spec.family.sample(mu, rng));
        }
        Ok((a, y, floored))
    }

    /// Generate a synthetic dataset of `n` rows.
    pub fn generate_synthetic(&self, n: usize, seed: u64) -> Result<Dataset> {
        if !self.is_synthetic() {
            return Err(Error::Config("generate_synthetic needs the synthetic scenario".into()));
        }
        if n == 0 {
            return Err(Error::Config("dataset size must be >= 1".into()));
        }
        let mut rng = substream(seed, "data");
        let x = synthetic_covariates(n, &mut rng);
        let (a, y, _) = self.sample_given_x(&x, &mut rng)?;
        Ok(Dataset { x, a, y, meta: self.meta(seed, 0) })
    }

    /// Generate treatments and outcomes over given covariates.
    pub fn generate_over(&self, x: Array2<f64>, seed: u64) -> Result<Dataset> {
        if x.nrows() == 0 {
            return Err(Error::Data("covariate matrix is empty".into()));
        }
        let mut rng = substream(seed, "data");
        let (a, y, floored) = self.sample_given_x(&x, &mut rng)?;
        Ok(Dataset { x, a, y, meta: self.meta(seed, floored) })
    }

    fn meta(&self, seed: u64, floored: usize) -> DatasetMeta {
        DatasetMeta {
            seed,
            spec_hash: self.spec.hash(),
            family: Some(self.spec.family.kind),
            treatment: Some(self.spec.treatment),
            beta_shape_floored: floored,
        }
    }

    /// `ψ(a) = E[θ(X, a)]` averaged over the rows of `x`.
    pub fn adcf(&self, x: ArrayView2<f64>, a: f64, seed: u64) -> OracleValue {
        let vals: Vec<f64> = x.axis_iter(Axis(0)).map(|r| self.theta(&r.to_vec(), a)).collect();
        mean_se(&vals, seed)
    }

    /// `ψ(1) − ψ(0)` averaged over the rows of `x`, with a paired SE.
    pub fn ate(&self, x: ArrayView2<f64>, seed: u64) -> OracleValue {
        let vals: Vec<f64> = x
            .axis_iter(Axis(0))
            .map(|r| {
                let r = r.to_vec();
                self.theta(&r, 1.0) - self.theta(&r, 0.0)
            })
            .collect();
        mean_se(&vals, seed)
    }
}

fn mean_se(v: &[f64], seed: u64) -> OracleValue {
    let n = v.len();
    let m = v.iter().sum::<f64>() / n as f64;
    let var = if n > 1 { v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1) as f64 } else { 0.0 };
    OracleValue { value: m, mc_se: (var / n as f64).sqrt(), n_mc: n, seed }
}

/// `n × 6` matrix of independent `U(0, 1)` covariates.
pub fn synthetic_covariates<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Array2<f64> {
    Array2::from_shape_fn((n, 6), |_| rng.random::<f64>())
}

/// Sparse nonnegative count-like covariates (498 columns, about 5% nonzero,
/// scaled to `[0, 1]` per column). Every row has at least one nonzero entry.
pub fn news_like_covariates<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Array2<f64> {
    let d = 498;
    let mut x = Array2::<f64>::zeros((n, d));
    for mut row in x.axis_iter_mut(Axis(0)) {
        for v in row.iter_mut() {
            if rng.random::<f64>() < 0.05 {
                *v = 1.0 + (rng.random::<f64>() * 9.0).floor();
            }
        }
        if row.iter().all(|&v| v == 0.0) {
            let j = rng.random_range(0..d);
            row[j] = 1.0;
        }
    }
    for mut col in x.axis_iter_mut(Axis(1)) {
        let m = col.iter().cloned().fold(0.0, f64::max);
        if m > 0.0 {
            col.mapv_inplace(|v| v / m);
        }
    }
    x
}

/// Dense positive covariates with 4000 columns, each row scaled to unit
/// Euclidean norm.
pub fn tcga_like_covariates<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Array2<f64> {
    let d = 4000;
    let mut x = Array2::from_shape_fn((n, d), |_| {
        let z: f64 = StandardNormal.sample(rng);
        (0.5 * z).exp()
    });
    for mut row in x.axis_iter_mut(Axis(0)) {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        row.mapv_inplace(|v| v / norm);
    }
    x
}

/// Build the semi-synthetic DGP for `spec` and generate its dataset.
pub fn gen_semisynthetic(spec: DgpSpec, seed: u64) -> Result<(Dgp, Dataset)> {
    let Scenario::SemiSynthetic(s) = &spec.scenario else {
        return Err(Error::Config("gen_semisynthetic needs the semi-synthetic scenario".into()));
    };
    let mut cov_rng = substream(seed, "covariates");
    let x = match &s.covariates {
        CovariateSource::NewsLike { n } => news_like_covariates(*n, &mut cov_rng),
        CovariateSource::TcgaLike { n } => tcga_like_covariates(*n, &mut cov_rng),
        CovariateSource::Csv { path } => read_matrix_csv(Path::new(path))?,
    };
    let mut dgp = Dgp::from_spec(spec)?;
    dgp.realize_projections(x.view())?;
    let ds = dgp.generate_over(x, seed)?;
    Ok((dgp, ds))
}

/// Generate the dataset for any scenario.
pub fn generate(spec: &DgpSpec, seed: u64) -> Result<(Dgp, Dataset)> {
    match spec.scenario {
        Scenario::Synthetic { n } => {
            let dgp = Dgp::from_spec(spec.clone())?;
            let ds = dgp.generate_synthetic(n, seed)?;
            Ok((dgp, ds))
        }
        Scenario::SemiSynthetic(_) => gen_semisynthetic(spec.clone(), seed),
    }
}

fn read_matrix_csv(path: &Path) -> Result<Array2<f64>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_path(path).map_err(csv_err)?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        let row = rec
            .iter()
            .map(|c| c.trim().parse::<f64>().map_err(|_| Error::Data(format!("row {}: not a number: {c:?}", i + 2))))
            .collect::<Result<Vec<f64>>>()?;
        if let Some(first) = rows.first() {
            if row.len() != first.len() {
                return Err(Error::Data(format!("row {}: expected {} cells, found {}", i + 2, first.len(), row.len())));
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::Data(format!("{}: no data rows", path.display())));
    }
    let d = rows[0].len();
    Ok(Array2::from_shape_vec((rows.len(), d), rows.into_iter().flatten().collect()).unwrap())
}

fn csv_err(e: csv::Error) -> Error {
    match e.kind() {
        csv::ErrorKind::Io(_) => Error::Io(std::io::Error::other(e.to_string())),
        _ => {
            let row = e.position().map(|p| p.line()).unwrap_or(0);
            Error::Data(format!("row {row}: {e}"))
        }
    }
}

/// Read a dataset with header `x1,…,xd,a,y`. Treatment and outcome domains
/// are checked when `treatment` / `family` are given.
pub fn ingest_csv(path: &Path, treatment: Option<TreatmentKind>, family: Option<FamilySpec>) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_path(path).map_err(csv_err)?;
    let header: Vec<String> = rdr.headers().map_err(csv_err)?.iter().map(|h| h.trim().to_string()).collect();
    let d = header.len().checked_sub(2).filter(|d| *d >= 1).ok_or_else(|| Error::Data("row 1: header needs x1..xd,a,y".into()))?;
    for (j, h) in header.iter().take(d).enumerate() {
        if *h != format!("x{}", j + 1) {
            return Err(Error::Data(format!("row 1: column {} should be x{}, found {h:?}", j + 1, j + 1)));
        }
    }
    if header[d] != "a" || header[d + 1] != "y" {
        return Err(Error::Data("row 1: last two columns must be a,y".into()));
    }
    let mut xs = Vec::new();
    let mut a = Vec::new();
    let mut y = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        if rec.len() != d + 2 {
            return Err(Error::Data(format!("row {}: expected {} cells, found {}", i + 2, d + 2, rec.len())));
        }
        let vals = rec
            .iter()
            .map(|c| {
                let c = c.trim();
                if c.is_empty() {
                    return Err(Error::Data(format!("row {}: missing cell", i + 2)));
                }
                c.parse::<f64>().map_err(|_| Error::Data(format!("row {}: not a number: {c:?}", i + 2)))
            })
            .collect::<Result<Vec<f64>>>()?;
        xs.extend_from_slice(&vals[..d]);
        a.push(vals[d]);
        y.push(vals[d + 1]);
    }
    if a.is_empty() {
        return Err(Error::Data(format!("{}: no data rows", path.display())));
    }
    let x = Array2::from_shape_vec((a.len(), d), xs).unwrap();
    let ds = Dataset {
        x,
        a,
        y,
        meta: DatasetMeta { family: family.map(|f| f.kind), treatment, ..Default::default() },
    };
    ds.validate(treatment, family)?;
    Ok(ds)
}

/// Write `x1,…,xd,a,y` with shortest round-trip float formatting.
pub fn export_csv(ds: &Dataset, path: &Path) -> Result<()> {
    let mut out = String::new();
    let d = ds.dim();
    let header: Vec<String> = (1..=d).map(|j| format!("x{j}")).chain(["a".into(), "y".into()]).collect();
    out.push_str(&header.join(","));
    out.push('\n');
    for i in 0..ds.len() {
        let mut cells: Vec<String> = ds.x.row(i).iter().map(|v| format!("{v}")).collect();
        cells.push(format!("{}", ds.a[i]));
        cells.push(format!("{}", ds.y[i]));
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    crate::io::write_atomic(path, out.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bern() -> FamilySpec {
        FamilySpec::bernoulli()
    }

    #[test]
    fn spec_roundtrips_and_rejects_stray_keys() {
        let synth = DgpSpec {
            scenario: Scenario::Synthetic { n: 1234 },
            treatment: TreatmentKind::Binary,
            family: FamilySpec::poisson(),
            noise_mean: 0.0,
            noise_sd: 0.5,
        };
        let semi = DgpSpec {
            scenario: Scenario::SemiSynthetic(SemiSyntheticSpec {
                preset: Preset::Tcga,
                w: Some(2.0),
                alpha: None,
                beta: None,
                gamma: Some(0.5),
                projection_seed: 3,
                strict_poisson_cap: true,
                covariates: CovariateSource::TcgaLike { n: 50 },
            }),
            treatment: TreatmentKind::Continuous,
            family: bern(),
            noise_mean: 0.0,
            noise_sd: 0.5,
        };
        for spec in [synth, semi] {
            let v = serde_json::to_value(&spec).unwrap();
            assert_eq!(serde_json::from_value::<DgpSpec>(v).unwrap(), spec);
        }
        let parse = |v: serde_json::Value| serde_json::from_value::<DgpSpec>(v);
        let ok = parse(serde_json::json!({"scenario": "synthetic", "treatment": "binary", "family": {"kind": "bernoulli"}})).unwrap();
        assert_eq!(ok.scenario, Scenario::Synthetic { n: default_n() });
        let typo = parse(serde_json::json!({"scenario": "synthetic", "nn": 5, "treatment": "binary", "family": {"kind": "bernoulli"}}));
        assert!(typo.unwrap_err().to_string().contains("nn"));
        let misplaced = parse(serde_json::json!({"scenario": "synthetic", "preset": "news", "treatment": "binary", "family": {"kind": "bernoulli"}}));
        assert!(misplaced.unwrap_err().to_string().contains("preset"));
        let missing = parse(serde_json::json!({"scenario": "semi_synthetic", "preset": "news", "treatment": "binary", "family": {"kind": "bernoulli"}}));
        assert!(missing.unwrap_err().to_string().contains("covariates"));
    }

    #[test]
    fn gauss_hermite_integrates_moments() {
        let (t, w) = gauss_hermite_64();
        let pi_sqrt = std::f64::consts::PI.sqrt();
        let m0: f64 = w.iter().sum();
        let m2: f64 = t.iter().zip(w).map(|(t, w)| w * t * t).sum();
        let m4: f64 = t.iter().zip(w).map(|(t, w)| w * t.powi(4)).sum();
        assert!((m0 - pi_sqrt).abs() < 1e-12);
        assert!((m2 - pi_sqrt / 2.0).abs() < 1e-12);
        assert!((m4 - 3.0 * pi_sqrt / 4.0).abs() < 1e-11);
    }

    #[test]
    fn synthetic_ranges() {
        for t in [TreatmentKind::Binary, TreatmentKind::Continuous] {
            let d = Dgp::synthetic(t, bern()).generate_synthetic(2000, 1).unwrap();
            assert!(d.x.iter().all(|&v| (0.0..=1.0).contains(&v)));
            match t {
                TreatmentKind::Binary => assert!(d.a.iter().all(|&a| a == 0.0 || a == 1.0)),
                TreatmentKind::Continuous => assert!(d.a.iter().all(|&a| a > 0.0 && a < 1.0)),
            }
            assert!(d.y.iter().all(|&y| y == 0.0 || y == 1.0));
        }
    }

    #[test]
    fn synthetic_replays_bitwise() {
        let g = Dgp::synthetic(TreatmentKind::Continuous, FamilySpec::poisson());
        assert_eq!(g.generate_synthetic(500, 9).unwrap(), g.generate_synthetic(500, 9).unwrap());
        assert_ne!(g.generate_synthetic(500, 9).unwrap().y, g.generate_synthetic(500, 10).unwrap().y);
    }

    #[test]
    fn bernoulli_control_arm_index_is_nonpositive() {
        let g = Dgp::synthetic(TreatmentKind::Binary, bern());
        let d = g.generate_synthetic(100_000, 2).unwrap();
        let mut s = 0.0;
        let mut n = 0.0;
        for i in 0..d.len() {
            let xi = d.x.row(i).to_vec();
            assert!(g.index(&xi, 0.0) <= 0.0);
            if d.a[i] == 0.0 {
                s += d.y[i];
                n += 1.0;
            }
        }
        assert!(s / n < 0.5);
    }

    #[test]
    fn oracle_theta_is_index() {
        let g = Dgp::synthetic(TreatmentKind::Binary, bern());
        let x = [0.1, 0.9, 0.3, 0.7, 0.2, 0.5];
        assert_eq!(g.theta(&x, 1.0), synthetic_index(&x, 1.0, FamilyKind::Bernoulli));
        let p = Dgp::synthetic(TreatmentKind::Binary, FamilySpec::poisson());
        let v = synthetic_index(&x, 1.0, FamilyKind::Poisson);
        assert_eq!(p.theta(&x, 1.0), v.clamp(-4.0, 4.0));
        assert!((p.mu(&x, 1.0) - v.clamp(-4.0, 4.0).exp()).abs() < 1e-15);
    }

    #[test]
    fn binary_propensity_limits() {
        let mut g = Dgp::synthetic(TreatmentKind::Binary, bern());
        // symmetric noise at zero score gives one half
        let zero_score = |g: &Dgp| {
            let (t, w) = gauss_hermite_64();
            t.iter().zip(w).map(|(t, w)| w * sigmoid(g.spec.noise_mean + std::f64::consts::SQRT_2 * g.spec.noise_sd * t)).sum::<f64>()
                / std::f64::consts::PI.sqrt()
        };
        assert!((zero_score(&g) - 0.5).abs() < 1e-14);
        g.spec.noise_mean = 20.0;
        assert!(zero_score(&g) >= 0.999);
    }

    #[test]
    fn binary_propensity_matches_simulation() {
        let g = Dgp::synthetic(TreatmentKind::Binary, bern());
        let x = [0.4, 0.2, 0.6, 0.5, 0.3, 0.9];
        let p = g.pi(&x, 1.0).unwrap();
        let mut r = substream(3, "pi");
        let noise = Normal::new(0.0, 0.5).unwrap();
        let n = 400_000;
        let s = synthetic_score(&x);
        let hits = (0..n).filter(|_| r.random::<f64>() < sigmoid(s + noise.sample(&mut r))).count();
        let est = hits as f64 / n as f64;
        let se = (p * (1.0 - p) / n as f64).sqrt();
        assert!((est - p).abs() < 4.0 * se, "{est} vs {p}");
    }

    #[test]
    fn continuous_density_integrates_to_one() {
        let g = Dgp::synthetic(TreatmentKind::Continuous, bern());
        let mut r = substream(4, "x");
        for _ in 0..20 {
            let x: Vec<f64> = (0..6).map(|_| r.random::<f64>()).collect();
            // integrate in logit space, where the integrand is a smooth
            // Gaussian; ±8 sd around the score carries all but ~1e-15 of the mass
            let s = synthetic_score(&x);
            let (lo, hi) = (s - 4.0, s + 4.0);
            let m = 20_000;
            let h = (hi - lo) / m as f64;
            let mut total = 0.0;
            for k in 0..=m {
                let a = sigmoid(lo + k as f64 * h);
                if a <= 0.0 || a >= 1.0 {
                    continue;
                }
                let wgt = if k == 0 || k == m { 0.5 } else { 1.0 };
                total += wgt * g.pi(&x, a).unwrap() * a * (1.0 - a) * h;
            }
            assert!((total - 1.0).abs() <= 1e-4, "{total}");
        }
        assert!(g.pi(&[0.5; 6], 0.0).is_err());
        assert!(g.pi(&[0.5; 6], 1.0).is_err());
    }

    #[test]
    fn overlap_on_generated_data() {
        let g = Dgp::synthetic(TreatmentKind::Continuous, bern());
        let d = g.generate_synthetic(5000, 5).unwrap();
        let min = (0..d.len()).map(|i| g.pi(&d.x.row(i).to_vec(), d.a[i]).unwrap()).fold(f64::INFINITY, f64::min);
        assert!(min >= 1e-4, "{min}");
    }

    #[test]
    fn oracle_mean_matches_binned_outcomes() {
        for fam in [bern(), FamilySpec::poisson()] {
            let g = Dgp::synthetic(TreatmentKind::Binary, fam);
            let d = g.generate_synthetic(100_000, 7).unwrap();
            let mu: Vec<f64> = (0..d.len()).map(|i| g.mu(&d.x.row(i).to_vec(), d.a[i])).collect();
            let mut idx: Vec<usize> = (0..d.len()).collect();
            idx.sort_by(|&i, &j| mu[i].total_cmp(&mu[j]));
            for chunk in idx.chunks(10_000) {
                let k = chunk.len() as f64;
                let ybar = chunk.iter().map(|&i| d.y[i]).sum::<f64>() / k;
                let mbar = chunk.iter().map(|&i| mu[i]).sum::<f64>() / k;
                let var = chunk.iter().map(|&i| fam.kappa_second(fam.h(fam.clamp_mean(mu[i])))).sum::<f64>() / k;
                let se = (var / k).sqrt();
                assert!((ybar - mbar).abs() <= 3.0 * se, "{fam:?}: {ybar} vs {mbar} (se {se})");
            }
        }
    }

    #[test]
    fn adcf_is_smooth_in_dose() {
        let g = Dgp::synthetic(TreatmentKind::Continuous, bern());
        let x = synthetic_covariates(20_000, &mut substream(7, "x"));
        for k in 0..20 {
            let a = k as f64 / 20.0;
            let d = (g.adcf(x.view(), a, 7).value - g.adcf(x.view(), a + 1e-4, 7).value).abs();
            assert!(d <= 1e-2);
        }
    }

    #[test]
    fn constant_theta_spec() {
        // at a = 0 with x4 = 0 the synthetic index vanishes for every row
        let g = Dgp::synthetic(TreatmentKind::Binary, bern());
        let mut x = synthetic_covariates(100, &mut substream(8, "x"));
        x.column_mut(3).fill(0.0);
        assert_eq!(g.adcf(x.view(), 1.0, 0).value, 0.0);
    }

    fn semi_spec(preset: Preset, t: TreatmentKind, fam: FamilySpec) -> DgpSpec {
        DgpSpec {
            scenario: Scenario::SemiSynthetic(SemiSyntheticSpec {
                preset,
                w: None,
                alpha: None,
                beta: None,
                gamma: None,
                projection_seed: 3,
                strict_poisson_cap: false,
                covariates: CovariateSource::NewsLike { n: 400 },
            }),
            treatment: t,
            family: fam,
            noise_mean: 0.0,
            noise_sd: 0.5,
        }
    }

    #[test]
    fn preset_constants() {
        let c = SemiSyntheticSpec {
            preset: Preset::Tcga,
            w: None,
            alpha: None,
            beta: None,
            gamma: None,
            projection_seed: 0,
            strict_poisson_cap: false,
            covariates: CovariateSource::TcgaLike { n: 1 },
        };
        assert_eq!(c.constants(TreatmentKind::Binary).w, 5.0);
        assert_eq!(c.constants(TreatmentKind::Continuous).w, 0.2);
        assert_eq!(c.constants(TreatmentKind::Continuous).gamma, 4.5);
    }

    #[test]
    fn semisynthetic_contract() {
        let (g, d) = gen_semisynthetic(semi_spec(Preset::News, TreatmentKind::Continuous, bern()), 1).unwrap();
        assert!(d.a.iter().all(|&a| a > 0.0 && a < 1.0));
        let (_, d2) = gen_semisynthetic(semi_spec(Preset::News, TreatmentKind::Continuous, bern()), 1).unwrap();
        assert_eq!(d, d2);
        for i in 0..5 {
            let xi = d.x.row(i).to_vec();
            assert!(g.pi(&xi, 0.3).unwrap() >= 0.0);
        }
        let (g, d) = gen_semisynthetic(semi_spec(Preset::News, TreatmentKind::Binary, bern()), 2).unwrap();
        let p = g.projections.as_ref().unwrap();
        for i in 0..d.len() {
            let xi = d.x.row(i).to_vec();
            let ratio = dot(&p.v2, &xi) / (dot(&p.v3, &xi) + 2.0) - 0.3;
            let contrast = ((0.0f64).cos() - (1.2 * std::f64::consts::PI).cos()) * 2.0 * ratio.max(-2.0);
            assert!((g.theta(&xi, 0.0) - g.theta(&xi, 1.0) - contrast).abs() < 1e-12);
        }
        let (g, d) = gen_semisynthetic(semi_spec(Preset::News, TreatmentKind::Binary, FamilySpec::poisson()), 2).unwrap();
        assert!(d.y.iter().all(|&y| y >= 0.0 && y.fract() == 0.0));
        let xi = d.x.row(0).to_vec();
        assert!(g.theta(&xi, 1.0) <= 4.0);
    }

    #[test]
    fn beta_density_matches_reference() {
        use statrs::distribution::{Beta as RefBeta, Continuous};
        let (g, d) = gen_semisynthetic(semi_spec(Preset::News, TreatmentKind::Continuous, bern()), 4).unwrap();
        let mut checked = 0;
        for i in 0..d.len() {
            let xi = d.x.row(i).to_vec();
            let b = g.score(&xi).abs();
            if b < BETA_SHAPE_FLOOR {
                continue;
            }
            let r = RefBeta::new(2.0, b).unwrap();
            for a in [0.01, 0.3, 0.5, 0.9, 0.999] {
                let ours = g.pi(&xi, a).unwrap();
                let want = r.pdf(a);
                assert!((ours - want).abs() <= 1e-9 * want.max(1.0), "b={b} a={a}: {ours} vs {want}");
            }
            checked += 1;
        }
        assert!(checked > 100);
    }

    #[test]
    fn csv_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.csv");
        std::fs::write(&p, "x1,x2,a,y\n0.1,0.2,1,0\n0.3,0.4,0,1\n0.5,0.6,1,1\n").unwrap();
        let d = ingest_csv(&p, Some(TreatmentKind::Binary), Some(bern())).unwrap();
        assert_eq!(d.x.dim(), (3, 2));
        let q = dir.path().join("e.csv");
        export_csv(&d, &q).unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap(), std::fs::read_to_string(&q).unwrap());

        let g = Dgp::synthetic(TreatmentKind::Continuous, FamilySpec::poisson()).generate_synthetic(50, 3).unwrap();
        export_csv(&g, &q).unwrap();
        let back = ingest_csv(&q, None, None).unwrap();
        assert_eq!(back.x, g.x);
        assert_eq!(back.a, g.a);
        assert_eq!(back.y, g.y);

        std::fs::write(&p, "x1,a,y\n0.1,1,0\n0.2,0,2\n").unwrap();
        let err = ingest_csv(&p, Some(TreatmentKind::Binary), Some(bern())).unwrap_err();
        assert!(matches!(&err, Error::Data(m) if m.contains("row 3")), "{err}");
        std::fs::write(&p, "x1,a,y\n0.1,1\n").unwrap();
        assert!(matches!(ingest_csv(&p, None, None), Err(Error::Data(_))));
        std::fs::write(&p, "x1,b,y\n0.1,1,0\n").unwrap();
        assert!(matches!(ingest_csv(&p, None, None), Err(Error::Data(_))));
    }
}
