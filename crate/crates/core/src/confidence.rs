//! Binomial-tail confidence of multi-path sampling.
//!
//! If `m` paths are drawn uniformly and a fraction `p` of the space is good,
//! the probability that at least `k` of them are good is the upper binomial
//! tail. The same tail with `q = 1 - p` gives the confidence of drawing at
//! least `k` weak paths.

use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConfidenceQuery {
    /// Paths sampled.
    pub m: u64,
    /// Threshold count, `k <= m`.
    pub k: u64,
    /// Good-path prior.
    pub p: f64,
}

impl ConfidenceQuery {
    pub fn new(m: u64, k: u64, p: f64) -> Result<Self> {
        let q = ConfidenceQuery { m, k, p };
        q.validate()?;
        Ok(q)
    }

    fn validate(&self) -> Result<()> {
        if self.m == 0 {
            return Err(Error::Domain("m must be positive".into()));
        }
        if self.k > self.m {
            return Err(Error::Domain(format!("k={} exceeds m={}", self.k, self.m)));
        }
        if !(0.0..=1.0).contains(&self.p) {
            return Err(Error::Domain(format!("prior {} outside [0,1]", self.p)));
        }
        Ok(())
    }
}

/// Neumaier-compensated running sum.
#[derive(Default)]
struct CompensatedSum {
    sum: f64,
    comp: f64,
}

impl CompensatedSum {
    fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

fn ln_choose(m: u64, j: u64) -> f64 {
    if m <= 60 {
        // Exact in u64 for m <= 60 (C(60,30) ~ 1.2e17), then one rounding.
        let j = j.min(m - j);
        let mut c: u64 = 1;
        for i in 0..j {
            c = c * (m - i) / (i + 1);
        }
        (c as f64).ln()
    } else {
        ln_gamma(m as f64 + 1.0) - ln_gamma(j as f64 + 1.0) - ln_gamma((m - j) as f64 + 1.0)
    }
}

/// `C(m,j) p^j (1-p)^(m-j)`, with `0^0 = 1`.
pub fn binomial_term(m: u64, j: u64, p: f64) -> f64 {
    let q = 1.0 - p;
    if p == 0.0 {
        return if j == 0 { 1.0 } else { 0.0 };
    }
    if q == 0.0 {
        return if j == m { 1.0 } else { 0.0 };
    }
    (ln_choose(m, j) + j as f64 * p.ln() + (m - j) as f64 * q.ln()).exp()
}

/// Upper binomial tail `sum_{j=k}^{m} C(m,j) p^j (1-p)^(m-j)`.
pub fn binomial_tail(m: u64, k: u64, p: f64) -> f64 {
    if k == 0 {
        return 1.0;
    }
    let mut acc = CompensatedSum::default();
    // Sum whichever side of the mean is the smaller tail.
    if (k as f64) <= m as f64 * p {
        for j in 0..k {
            acc.add(binomial_term(m, j, p));
        }
        (1.0 - acc.value()).clamp(0.0, 1.0)
    } else {
        for j in k..=m {
            acc.add(binomial_term(m, j, p));
        }
        acc.value().clamp(0.0, 1.0)
    }
}

/// Confidence that at least `k` of `m` uniform paths are good.
pub fn confidence_good(q: &ConfidenceQuery) -> Result<f64> {
    q.validate()?;
    Ok(binomial_tail(q.m, q.k, q.p))
}

/// Confidence that at least `k` of `m` uniform paths are weak: the same tail
/// at the weak prior `1 - p`, where `p` is still the query's good prior.
pub fn confidence_weak(q: &ConfidenceQuery) -> Result<f64> {
    q.validate()?;
    Ok(binomial_tail(q.m, q.k, 1.0 - q.p))
}

/// One row of the confidence curve.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CurvePoint {
    pub p: f64,
    pub p_good: f64,
    pub q_weak: f64,
}

/// Samples both confidences over `points` evenly spaced good priors in [0,1].
pub fn confidence_curve(m: u64, k: u64, points: usize) -> Result<Vec<CurvePoint>> {
    if points < 2 {
        return Err(Error::Domain("curve needs at least 2 points".into()));
    }
    ConfidenceQuery::new(m, k, 0.0)?;
    Ok((0..points)
        .map(|i| {
            let p = i as f64 / (points - 1) as f64;
            CurvePoint {
                p,
                p_good: binomial_tail(m, k, p),
                q_weak: binomial_tail(m, k, 1.0 - p),
            }
        })
        .collect())
}

pub fn curve_csv(curve: &[CurvePoint]) -> String {
    let mut out = String::from("p,P_good,Q_weak\n");
    for pt in curve {
        out.push_str(&format!("{},{},{}\n", pt.p, pt.p_good, pt.q_weak));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_rational::BigRational;
    use num_traits::ToPrimitive;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn q(m: u64, k: u64, p: f64) -> ConfidenceQuery {
        ConfidenceQuery::new(m, k, p).unwrap()
    }

    #[test]
    fn reported_values() {
        assert!((confidence_good(&q(10, 5, 0.6)).unwrap() - 0.8338).abs() <= 5e-5);
        assert!((confidence_good(&q(10, 5, 0.1)).unwrap() - 0.0016).abs() <= 5e-5);
        assert!(confidence_weak(&q(10, 5, 0.1)).unwrap() >= 0.99985);
    }

    #[test]
    fn full_tail_and_degenerate_priors() {
        for m in [1, 7, 40, 200] {
            for p in [0.0, 0.3, 1.0] {
                assert_eq!(confidence_good(&q(m, 0, p)).unwrap(), 1.0);
            }
        }
        assert_eq!(confidence_weak(&q(10, 10, 0.0)).unwrap(), 1.0);
        assert_eq!(confidence_good(&q(10, 1, 0.0)).unwrap(), 0.0);
    }

    #[test]
    fn rejects_bad_queries() {
        assert!(ConfidenceQuery::new(0, 0, 0.5).is_err());
        assert!(ConfidenceQuery::new(5, 6, 0.5).is_err());
        assert!(ConfidenceQuery::new(5, 2, 1.5).is_err());
        assert!(ConfidenceQuery::new(5, 2, f64::NAN).is_err());
    }

    #[test]
    fn monte_carlo_agreement() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let trials = 10_000_000u64;
        let p = 0.37;
        let mut hits = 0u64;
        for _ in 0..trials {
            let good = (0..10).filter(|_| rng.random::<f64>() < p).count();
            if good >= 5 {
                hits += 1;
            }
        }
        let est = hits as f64 / trials as f64;
        let exact = confidence_good(&q(10, 5, p)).unwrap();
        let sigma = (exact * (1.0 - exact) / trials as f64).sqrt();
        assert!((est - exact).abs() < 3.0 * sigma, "{est} vs {exact}");
    }

    #[test]
    fn weak_is_good_at_complement() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let m = rng.random_range(1..80);
            let k = rng.random_range(0..=m);
            let p: f64 = rng.random();
            let weak = confidence_weak(&q(m, k, p)).unwrap();
            let good = confidence_good(&q(m, k, 1.0 - p)).unwrap();
            assert_eq!(weak, good);
        }
    }

    #[test]
    fn monotone_on_grid() {
        for m in [5u64, 10, 30] {
            for k in 0..=m {
                let mut prev = -1.0;
                for i in 0..=50 {
                    let v = binomial_tail(m, k, i as f64 / 50.0);
                    assert!(v >= prev - 1e-15, "p-monotone m={m} k={k}");
                    prev = v;
                }
            }
            for i in 0..=20 {
                let p = i as f64 / 20.0;
                let mut prev = 2.0;
                for k in 0..=m {
                    let v = binomial_tail(m, k, p);
                    assert!(v <= prev + 1e-15, "k-monotone m={m} p={p}");
                    prev = v;
                }
            }
        }
    }

    #[test]
    fn terms_sum_to_one() {
        for m in [1u64, 10, 64, 500] {
            for p in [0.01, 0.25, 0.5, 0.9] {
                let mut s = CompensatedSum::default();
                for j in 0..=m {
                    s.add(binomial_term(m, j, p));
                }
                assert!((s.value() - 1.0).abs() < 1e-12, "m={m} p={p}");
            }
        }
    }

    fn exact_tail(m: u64, k: u64, p_tenths: i64) -> f64 {
        let p = BigRational::new(p_tenths.into(), 10.into());
        let q = BigRational::new((10 - p_tenths).into(), 10.into());
        let mut total = BigRational::from_integer(0.into());
        for j in k..=m {
            let mut c = num_bigint::BigInt::from(1);
            for i in 0..j {
                c = c * (m - i) / (i + 1);
            }
            let term = BigRational::from_integer(c)
                * num_traits::pow(p.clone(), j as usize)
                * num_traits::pow(q.clone(), (m - j) as usize);
            total += term;
        }
        total.to_f64().unwrap()
    }

    #[test]
    fn matches_exact_rationals() {
        for m in 1..=20u64 {
            for k in 0..=m {
                for t in 0..=10i64 {
                    let exact = exact_tail(m, k, t);
                    let got = binomial_tail(m, k, t as f64 / 10.0);
                    assert!(
                        (exact - got).abs() <= 1e-13,
                        "m={m} k={k} p={t}/10: {got} vs {exact}"
                    );
                }
            }
        }
    }

    #[test]
    fn curve_columns() {
        let c = confidence_curve(10, 5, 11).unwrap();
        assert_eq!(c.len(), 11);
        assert_eq!(c[0].p, 0.0);
        assert_eq!(c[10].p, 1.0);
        let csv = curve_csv(&c);
        assert!(csv.starts_with("p,P_good,Q_weak\n"));
        assert_eq!(csv.lines().count(), 12);
    }
}
