//! Dose bases: clamped B-splines, monomials, and the two-arm indicator basis.
//!
//! A varying-coefficient weight is `w(a) = Σₗ αₗ φₗ(a)`, and the targeted
//! perturbation is `ε(a) = Σₖ cₖ Bₖ(a)`; both only need basis values (and,
//! for gradient checks, derivatives) at a dose `a ∈ [0, 1]`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Clamped B-spline basis on `[0, 1]` with equally spaced interior knots.
///
/// Boundary knots are repeated `degree + 1` times, so the first basis
/// function equals 1 at `a = 0` and the last equals 1 at `a = 1`. Evaluation
/// is right-continuous and closed at 1.
#[derive(Debug, Clone, PartialEq)]
pub struct SplineBasis {
    degree: usize,
    interior_knot_count: usize,
    knots: Vec<f64>,
}

impl SplineBasis {
    pub fn new(degree: usize, interior_knot_count: usize) -> Self {
        let p = degree;
        let m = interior_knot_count;
        let mut knots = Vec::with_capacity(m + 2 * (p + 1));
        knots.extend(std::iter::repeat_n(0.0, p + 1));
        for j in 1..=m {
            knots.push(j as f64 / (m + 1) as f64);
        }
        knots.extend(std::iter::repeat_n(1.0, p + 1));
        SplineBasis { degree, interior_knot_count, knots }
    }

    /// Basis sized by [`kn_for_sample_size`].
    pub fn for_sample_size(n: usize, degree: usize) -> Self {
        let k = kn_for_sample_size(n, degree);
        SplineBasis::new(degree, k - degree - 1)
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn interior_knot_count(&self) -> usize {
        self.interior_knot_count
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn size(&self) -> usize {
        self.interior_knot_count + self.degree + 1
    }

    /// Index `s` of the knot span with `t[s] ≤ a < t[s+1]`; `a = 1` maps to the
    /// last non-degenerate span.
    fn span(&self, a: f64) -> usize {
        let k = self.size();
        if a >= 1.0 {
            return k - 1;
        }
        // spans live in [degree, k-1]
        let mut lo = self.degree;
        let mut hi = k; // t[k] = 1
        while hi - lo > 1 {
            let mid = (lo + hi) / 2;
            if a >= self.knots[mid] {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        lo
    }

    /// Degree-`d` basis values for all functions (Cox–de Boor), given the span.
    fn cox_de_boor(&self, a: f64, d: usize, span: usize) -> Vec<f64> {
        let t = &self.knots;
        let count = t.len() - 1;
        let mut n = vec![0.0; count];
        n[span] = 1.0;
        for k in 1..=d {
            for i in 0..count - k {
                let left_den = t[i + k] - t[i];
                let right_den = t[i + k + 1] - t[i + 1];
                let left = if left_den > 0.0 { (a - t[i]) / left_den * n[i] } else { 0.0 };
                let right = if right_den > 0.0 { (t[i + k + 1] - a) / right_den * n[i + 1] } else { 0.0 };
                n[i] = left + right;
            }
        }
        n.truncate(count - d);
        n
    }

    pub fn eval_into(&self, a: f64, out: &mut [f64]) {
        let s = self.span(a);
        let vals = self.cox_de_boor(a, self.degree, s);
        out.copy_from_slice(&vals);
    }

    pub fn eval_derivative_into(&self, a: f64, out: &mut [f64]) {
        let p = self.degree;
        if p == 0 {
            out.iter_mut().for_each(|v| *v = 0.0);
            return;
        }
        let s = self.span(a);
        let lower = self.cox_de_boor(a, p - 1, s);
        let t = &self.knots;
        let pf = p as f64;
        for (i, o) in out.iter_mut().enumerate() {
            let l_den = t[i + p] - t[i];
            let r_den = t[i + p + 1] - t[i + 1];
            let l = if l_den > 0.0 { pf / l_den * lower[i] } else { 0.0 };
            let r = if r_den > 0.0 { pf / r_den * lower[i + 1] } else { 0.0 };
            *o = l - r;
        }
    }
}

/// Monomial basis `φₗ(a) = a^(l−1)` for `l = 1..=size`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PolyBasis {
    size: usize,
}

impl PolyBasis {
    pub fn new(size: usize) -> Self {
        PolyBasis { size }
    }

    pub fn size(&self) -> usize {
        self.size
    }
}

/// Serializable basis description.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum BasisConfig {
    Spline { degree: usize, interior_knots: usize },
    Poly { size: usize },
    /// Indicator basis `(1 − a, a)` on the two arms of a binary treatment.
    Arms,
}

impl BasisConfig {
    pub fn build(&self) -> Result<Basis> {
        match *self {
            BasisConfig::Spline { degree, interior_knots } => {
                Ok(Basis::Spline(SplineBasis::new(degree, interior_knots)))
            }
            BasisConfig::Poly { size } => {
                if size == 0 {
                    return Err(Error::Config("polynomial basis needs size >= 1".into()));
                }
                Ok(Basis::Poly(PolyBasis::new(size)))
            }
            BasisConfig::Arms => Ok(Basis::Arms),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Basis {
    Spline(SplineBasis),
    Poly(PolyBasis),
    Arms,
}

impl Basis {
    pub fn config(&self) -> BasisConfig {
        match self {
            Basis::Spline(s) => BasisConfig::Spline {
                degree: s.degree,
                interior_knots: s.interior_knot_count,
            },
            Basis::Poly(p) => BasisConfig::Poly { size: p.size },
            Basis::Arms => BasisConfig::Arms,
        }
    }

    pub fn size(&self) -> usize {
        match self {
            Basis::Spline(s) => s.size(),
            Basis::Poly(p) => p.size,
            Basis::Arms => 2,
        }
    }

    /// True when the basis sums to one everywhere, so equal coefficient
    /// blocks give a dose-constant weight.
    pub fn is_partition_of_unity(&self) -> bool {
        !matches!(self, Basis::Poly(_))
    }

    fn check_dose(&self, a: f64) -> Result<()> {
        match self {
            Basis::Arms => {
                if a == 0.0 || a == 1.0 {
                    Ok(())
                } else {
                    Err(Error::Domain(format!("arm basis needs a in {{0, 1}}, got {a}")))
                }
            }
            _ => {
                if (0.0..=1.0).contains(&a) {
                    Ok(())
                } else {
                    Err(Error::Domain(format!("dose {a} outside [0, 1]")))
                }
            }
        }
    }

    pub fn eval(&self, a: f64) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.size()];
        self.eval_into(a, &mut out)?;
        Ok(out)
    }

    pub fn eval_into(&self, a: f64, out: &mut [f64]) -> Result<()> {
        self.check_dose(a)?;
        match self {
            Basis::Spline(s) => s.eval_into(a, out),
            Basis::Poly(_) => {
                let mut p = 1.0;
                for o in out.iter_mut() {
                    *o = p;
                    p *= a;
                }
            }
            Basis::Arms => {
                out[0] = 1.0 - a;
                out[1] = a;
            }
        }
        Ok(())
    }

    /// `d/da` of every basis function. At an interior spline knot the
    /// right-hand derivative is returned.
    pub fn eval_derivative(&self, a: f64) -> Result<Vec<f64>> {
        self.check_dose(a)?;
        let mut out = vec![0.0; self.size()];
        match self {
            Basis::Spline(s) => s.eval_derivative_into(a, &mut out),
            Basis::Poly(_) => {
                for (l, o) in out.iter_mut().enumerate().skip(1) {
                    *o = l as f64 * a.powi(l as i32 - 1);
                }
            }
            Basis::Arms => {
                out[0] = -1.0;
                out[1] = 1.0;
            }
        }
        Ok(out)
    }
}

/// Size of the perturbation spline basis for `n` samples: grows like
/// `n^(1/6)` with unit constant, floored at 4, plus the spline degree.
pub fn kn_for_sample_size(n: usize, degree: usize) -> usize {
    let base = (n.max(2) as f64).powf(1.0 / 6.0).round() as usize;
    base.max(4) + degree
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{DMatrix, DVector};
    use proptest::prelude::*;

    #[test]
    fn partition_of_unity_examples() {
        let b = Basis::Spline(SplineBasis::new(2, 2));
        if let Basis::Spline(s) = &b {
            assert_eq!(s.knots(), &[0.0, 0.0, 0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0, 1.0, 1.0]);
        }
        let v = b.eval(0.5).unwrap();
        assert!((v.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let v0 = b.eval(0.0).unwrap();
        assert_eq!(v0[0], 1.0);
        assert!(v0[1..].iter().all(|&x| x == 0.0));
        let v1 = b.eval(1.0).unwrap();
        assert_eq!(*v1.last().unwrap(), 1.0);
        assert!(v1[..v1.len() - 1].iter().all(|&x| x == 0.0));
    }

    #[test]
    fn poly_examples() {
        let b = Basis::Poly(PolyBasis::new(3));
        assert_eq!(b.eval(0.5).unwrap(), vec![1.0, 0.5, 0.25]);
        assert_eq!(b.eval_derivative(0.5).unwrap(), vec![0.0, 1.0, 1.0]);
        assert_eq!(b.eval(0.0).unwrap(), vec![1.0, 0.0, 0.0]);
    }

    #[test]
    fn arms_basis() {
        assert_eq!(Basis::Arms.eval(0.0).unwrap(), vec![1.0, 0.0]);
        assert_eq!(Basis::Arms.eval(1.0).unwrap(), vec![0.0, 1.0]);
        assert!(Basis::Arms.eval(0.5).is_err());
    }

    #[test]
    fn dose_domain() {
        let b = Basis::Spline(SplineBasis::new(2, 3));
        assert!(b.eval(-0.01).is_err());
        assert!(b.eval(1.01).is_err());
        assert!(b.eval(f64::NAN).is_err());
        assert!(b.eval_derivative(1.5).is_err());
    }

    #[test]
    fn kn_rule() {
        assert_eq!(kn_for_sample_size(10_000, 2), 7);
        assert_eq!(kn_for_sample_size(64, 2), 6);
        let ns = [100usize, 1_000, 10_000, 100_000, 1_000_000];
        for w in ns.windows(2) {
            assert!(kn_for_sample_size(w[0], 2) <= kn_for_sample_size(w[1], 2));
        }
        let s = SplineBasis::for_sample_size(10_000, 2);
        assert_eq!(s.size(), 7);
        assert_eq!(s.interior_knot_count(), 4);
    }

    #[test]
    fn derivatives_sum_to_zero_and_match_finite_differences() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for b in [
            Basis::Spline(SplineBasis::new(2, 2)),
            Basis::Spline(SplineBasis::new(3, 4)),
            Basis::Poly(PolyBasis::new(4)),
        ] {
            let knots: Vec<f64> = match &b {
                Basis::Spline(s) => s.knots().to_vec(),
                _ => vec![],
            };
            let mut checked = 0;
            while checked < 50 {
                let a: f64 = rng.random_range(0.001..0.999);
                let h = 1e-5;
                if knots.iter().any(|k| (k - a).abs() < 2.0 * h) {
                    continue;
                }
                let d = b.eval_derivative(a).unwrap();
                let up = b.eval(a + h).unwrap();
                let dn = b.eval(a - h).unwrap();
                for k in 0..d.len() {
                    let fd = (up[k] - dn[k]) / (2.0 * h);
                    assert!((fd - d[k]).abs() <= 1e-6, "{b:?} a={a} k={k}: {fd} vs {}", d[k]);
                }
                if b.is_partition_of_unity() {
                    assert!(d.iter().sum::<f64>().abs() < 1e-9);
                }
                checked += 1;
            }
        }
    }

    #[test]
    fn reproduces_polynomials_up_to_degree() {
        for degree in 1..=3usize {
            let s = SplineBasis::new(degree, 3);
            let pts: Vec<f64> = (0..=60).map(|i| i as f64 / 60.0).collect();
            let k = s.size();
            let mut design = DMatrix::<f64>::zeros(pts.len(), k);
            for (r, &a) in pts.iter().enumerate() {
                let mut row = vec![0.0; k];
                s.eval_into(a, &mut row);
                for c in 0..k {
                    design[(r, c)] = row[c];
                }
            }
            for p in 0..=degree {
                let target = DVector::from_iterator(pts.len(), pts.iter().map(|a| 0.3 - 1.7 * a.powi(p as i32)));
                let svd = design.clone().svd(true, true);
                let coef = svd.solve(&target, 1e-14).unwrap();
                let resid = (&design * coef - &target).amax();
                assert!(resid <= 1e-10, "degree {degree} power {p}: {resid}");
            }
        }
    }

    proptest! {
        #[test]
        fn spline_partition_nonnegative_local(a in 0.0f64..=1.0, degree in 0usize..4, m in 0usize..7) {
            let s = SplineBasis::new(degree, m);
            let mut v = vec![0.0; s.size()];
            s.eval_into(a, &mut v);
            prop_assert!((v.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            prop_assert!(v.iter().all(|&x| x >= 0.0));
            prop_assert!(v.iter().filter(|&&x| x != 0.0).count() <= degree + 1);
        }
    }
}
