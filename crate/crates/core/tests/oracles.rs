//! Synthetic-scenario oracles checked against values computed independently
//! with numpy/scipy (`tests/fixtures/make_oracles.py`).

use ef_target::bench::{amse_adcf, mae_ate};
use ef_target::dgp::{synthetic_covariates, Dgp};
use ef_target::edf::FamilySpec;
use ef_target::estimators::{psi_dr, psi_plugin, CorruptedNuisance, OracleNuisance};
use ef_target::model::TreatmentKind;
use ef_target::seeds::substream;
use serde_json::Value;

fn fixture() -> Value {
    let text = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures/synthetic_oracles.json")).unwrap();
    serde_json::from_str(&text).unwrap()
}

fn families() -> [(&'static str, FamilySpec); 2] {
    [("bernoulli", FamilySpec::bernoulli()), ("poisson", FamilySpec::poisson())]
}

fn f(v: &Value) -> f64 {
    v.as_f64().unwrap()
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-300)
}

#[test]
fn pointwise_score_propensity_and_theta() {
    let fx = fixture();
    for (name, fam) in families() {
        let bin = Dgp::synthetic(TreatmentKind::Binary, fam);
        let cont = Dgp::synthetic(TreatmentKind::Continuous, fam);
        for p in fx["points"].as_array().unwrap() {
            let x: Vec<f64> = p["x"].as_array().unwrap().iter().map(f).collect();
            assert!((bin.score(&x) - f(&p["score"])).abs() <= 1e-12);
            let p1 = bin.pi(&x, 1.0).unwrap();
            assert!(rel(p1, f(&p["p_treated"])) <= 1e-10, "P(A=1|x) {p1} vs {}", p["p_treated"]);
            assert!(rel(bin.pi(&x, 0.0).unwrap(), 1.0 - f(&p["p_treated"])) <= 1e-10);
            for d in p["density"].as_array().unwrap() {
                let got = cont.pi(&x, f(&d["a"])).unwrap();
                assert!(rel(got, f(&d["value"])) <= 1e-10, "density at a={}: {got} vs {}", d["a"], d["value"]);
            }
            for t in p["theta"][name].as_array().unwrap() {
                assert!((cont.theta(&x, f(&t["a"])) - f(&t["value"])).abs() <= 1e-12);
            }
        }
    }
}

/// Combined standard error of a difference of two independent MC means.
fn se2(a: f64, b: f64) -> f64 {
    (a * a + b * b).sqrt()
}

#[test]
fn rust_oracle_agrees_with_fixture() {
    let fx = fixture();
    let x = synthetic_covariates(1_000_000, &mut substream(11, "mc"));
    for (name, fam) in families() {
        let entry = &fx["families"][name];
        let bin = Dgp::synthetic(TreatmentKind::Binary, fam);
        let ate = bin.ate(x.view(), 11);
        let want = &entry["binary"]["ate"];
        let tol = 3.0 * se2(ate.mc_se, f(&want["mc_se"]));
        assert!((ate.value - f(&want["value"])).abs() <= tol, "{name} ate {} vs {}", ate.value, want["value"]);
        let cont = Dgp::synthetic(TreatmentKind::Continuous, fam);
        for d in entry["continuous"].as_array().unwrap() {
            let got = cont.adcf(x.view(), f(&d["a"]), 11);
            let tol = (3.0 * se2(got.mc_se, f(&d["mc_se"]))).max(1e-12);
            assert!((got.value - f(&d["value"])).abs() <= tol, "{name} psi({}) {} vs {}", d["a"], got.value, d["value"]);
        }
    }
}

#[test]
fn oracle_plugin_ate_within_mc_error() {
    let fx = fixture();
    for (name, fam) in families() {
        let dgp = Dgp::synthetic(TreatmentKind::Binary, fam);
        let data = dgp.generate_synthetic(100_000, 5).unwrap();
        let nuis = OracleNuisance { dgp: &dgp };
        let est = psi_plugin(&nuis, data.x.view(), 1.0).unwrap() - psi_plugin(&nuis, data.x.view(), 0.0).unwrap();
        let sample_se = dgp.ate(data.x.view(), 0).mc_se;
        let want = &fx["families"][name]["binary"]["ate"];
        let mae = mae_ate(est, f(&want["value"]));
        assert!(mae <= 3.0 * se2(sample_se, f(&want["mc_se"])), "{name}: mae {mae}, sample se {sample_se}");
    }
}

#[test]
fn oracle_plugin_curve_amse_within_mc_error() {
    let fx = fixture();
    for (name, fam) in families() {
        let dgp = Dgp::synthetic(TreatmentKind::Continuous, fam);
        let data = dgp.generate_synthetic(100_000, 6).unwrap();
        let nuis = OracleNuisance { dgp: &dgp };
        let rows = fx["families"][name]["continuous"].as_array().unwrap();
        let doses: Vec<f64> = rows.iter().map(|d| f(&d["a"])).collect();
        let truth: Vec<f64> = rows.iter().map(|d| f(&d["value"])).collect();
        let curve: Vec<f64> = doses.iter().map(|&a| psi_plugin(&nuis, data.x.view(), a).unwrap()).collect();
        let se: f64 = rows
            .iter()
            .zip(&doses)
            .map(|(d, &a)| se2(dgp.adcf(data.x.view(), a, 0).mc_se, f(&d["mc_se"])))
            .fold(0.0, f64::max);
        let amse = amse_adcf(&doses, &curve, &doses, &truth);
        assert!(amse <= 10.0 * se * se, "{name}: amse {amse:e} vs se {se:e}");
    }
}

#[test]
fn dr_with_shifted_outcome_model_carries_the_second_order_bias() {
    let fx = fixture();
    for (name, fam) in families() {
        let dgp = Dgp::synthetic(TreatmentKind::Binary, fam);
        let data = dgp.generate_synthetic(100_000, 8).unwrap();
        let oracle = OracleNuisance { dgp: &dgp };
        let bad_mu = CorruptedNuisance { inner: &oracle, theta_shift: 0.5, pi_const: None };
        let d = psi_dr(&bad_mu, &data, 1.0, 1e-3).unwrap();
        let bin = &fx["families"][name]["binary"];
        let bias = d.value - f(&bin["psi1"]["value"]);
        let want = &bin["dr_bias_shift_half_arm1"];
        let tol = 3.0 * se2(d.se, se2(f(&bin["psi1"]["mc_se"]), f(&want["mc_se"])));
        assert!((bias - f(&want["value"])).abs() <= tol, "{name}: bias {bias} vs {} (tol {tol})", want["value"]);
    }
}
