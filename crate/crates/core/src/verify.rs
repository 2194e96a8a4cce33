//! Black-box querying of the (allegedly) unlearned model and the one-sided
//! statistical decision "unlearned / not unlearned".
//!
//! Reject the no-unlearning hypothesis when
//! sqrt(m-1) * (alpha - beta) - sqrt(alpha - alpha^2) * t_tau > 0,
//! with beta = (K-1)/K the random-chance misprediction rate and t_tau the
//! upper-tail quantile of Student's t with m-1 degrees of freedom.

use serde::Serialize;

use crate::data::{TargetSet, MIN_TARGETS};
use crate::error::{Error, Result};
use crate::model::{predict, ModelParams};

/// A black-box prediction oracle; a dishonest server may refuse to answer.
pub trait Oracle {
    fn answer(&self, x: &[f64]) -> Result<OracleAnswer>;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OracleAnswer {
    Class(usize),
    Refused,
}

/// The trained or unlearned model itself, answering every query.
pub struct ModelOracle<'a>(pub &'a ModelParams);

impl Oracle for ModelOracle<'_> {
    fn answer(&self, x: &[f64]) -> Result<OracleAnswer> {
        Ok(OracleAnswer::Class(predict(self.0, x)?.0))
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TargetRecord {
    pub index: usize,
    pub predicted: Option<usize>,
    pub y_true: usize,
    pub y_wrong: usize,
    /// Misprediction landed exactly on the assigned wrong label.
    pub hit_wrong: bool,
}

/// Per-target misprediction indicators; refusals are excluded from the rate.
#[derive(Debug, Clone, Serialize)]
pub struct QueryOutcome {
    pub records: Vec<TargetRecord>,
    /// 0/1 misprediction results over answered queries.
    pub results: Vec<u8>,
    pub alpha: f64,
    pub answered: usize,
    pub refused: usize,
}

pub fn query_targets(oracle: &dyn Oracle, targets: &TargetSet) -> Result<QueryOutcome> {
    if targets.len() < MIN_TARGETS {
        return Err(Error::config(format!("need at least {MIN_TARGETS} targets")));
    }
    let mut records = Vec::with_capacity(targets.len());
    let mut results = Vec::with_capacity(targets.len());
    let mut refused = 0;
    for i in 0..targets.len() {
        match oracle.answer(targets.x.row(i))? {
            OracleAnswer::Class(c) => {
                results.push(u8::from(c != targets.y_true[i]));
                records.push(TargetRecord {
                    index: i,
                    predicted: Some(c),
                    y_true: targets.y_true[i],
                    y_wrong: targets.y_wrong[i],
                    hit_wrong: c == targets.y_wrong[i],
                });
            }
            OracleAnswer::Refused => {
                refused += 1;
                records.push(TargetRecord {
                    index: i,
                    predicted: None,
                    y_true: targets.y_true[i],
                    y_wrong: targets.y_wrong[i],
                    hit_wrong: false,
                });
            }
        }
    }
    let answered = results.len();
    let alpha = if answered == 0 {
        0.0
    } else {
        results.iter().map(|&r| r as f64).sum::<f64>() / answered as f64
    };
    Ok(QueryOutcome { records, results, alpha, answered, refused })
}

/// Regularized incomplete beta function I_x(a, b) by continued fraction.
fn betainc(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let front =
        (ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln()).exp();
    // symmetry picks the fast-converging branch
    if x < (a + 1.0) / (a + b + 2.0) {
        front * betacf(a, b, x) / a
    } else {
        1.0 - front * betacf(b, a, 1.0 - x) / b
    }
}

/// Continued fraction for the incomplete beta, modified Lentz method.
fn betacf(a: f64, b: f64, x: f64) -> f64 {
    const MAX_ITER: usize = 300;
    const EPS: f64 = 1e-15;
    const TINY: f64 = 1e-300;
    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=MAX_ITER {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

/// Lanczos approximation of ln Gamma.
fn ln_gamma(x: f64) -> f64 {
    const COEFFS: [f64; 6] = [
        76.18009172947146,
        -86.50532032941677,
        24.01409824083091,
        -1.231739572450155,
        0.1208650973866179e-2,
        -0.5395239384953e-5,
    ];
    let mut y = x;
    let tmp = x + 5.5;
    let tmp = tmp - (x + 0.5) * tmp.ln();
    let mut ser = 1.000000000190015;
    for c in COEFFS {
        y += 1.0;
        ser += c / y;
    }
    -tmp + (2.5066282746310005 * ser / x).ln()
}

/// Upper-tail probability P(T_df > t) for t >= 0.
fn t_upper_tail(t: f64, df: usize) -> f64 {
    let v = df as f64;
    0.5 * betainc(v / 2.0, 0.5, v / (v + t * t))
}

/// Upper-tail Student-t quantile: the Q with P(T_df > Q) = tau, for
/// tau in (0, 0.5]. Bracketed bisection on the incomplete-beta CDF.
pub fn t_quantile(tau: f64, df: usize) -> Result<f64> {
    if !(tau > 0.0 && tau <= 0.5) {
        return Err(Error::config("tau must be in (0, 0.5]"));
    }
    if df == 0 {
        return Err(Error::config("degrees of freedom must be >= 1"));
    }
    if tau == 0.5 {
        return Ok(0.0);
    }
    let mut lo = 0.0f64;
    let mut hi = 1.0f64;
    while t_upper_tail(hi, df) > tau {
        hi *= 2.0;
        if hi > 1e12 {
            return Err(Error::numeric("t quantile bracket expansion failed"));
        }
    }
    // bisect to 1e-10 interval width; monotone decreasing tail
    while hi - lo > 1e-10 {
        let mid = 0.5 * (lo + hi);
        if t_upper_tail(mid, df) > tau {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    RejectH0,
    FailToReject,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Degenerate {
    None,
    AlphaOne,
    AlphaZero,
}

#[derive(Debug, Clone, Serialize)]
pub struct HypothesisTestResult {
    pub alpha: f64,
    pub beta: f64,
    pub m: usize,
    pub tau: f64,
    pub t_quantile: f64,
    /// sqrt(m-1)*(alpha-beta) - sqrt(alpha-alpha^2)*t_tau
    pub lhs: f64,
    pub decision: Decision,
    pub degenerate: Degenerate,
}

pub fn decide(alpha: f64, m: usize, k: usize, tau: f64) -> Result<HypothesisTestResult> {
    decide_with_beta(alpha, m, k, tau, None)
}

/// `beta_override` substitutes the random-chance misprediction rate
/// (K-1)/K with a calibrated value.
pub fn decide_with_beta(
    alpha: f64,
    m: usize,
    k: usize,
    tau: f64,
    beta_override: Option<f64>,
) -> Result<HypothesisTestResult> {
    if m < MIN_TARGETS {
        return Err(Error::config(format!(
            "decision requires m >= {MIN_TARGETS} queries, got {m}"
        )));
    }
    if k < 2 {
        return Err(Error::config("need at least 2 classes"));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::config("alpha must be in [0,1]"));
    }
    let beta = match beta_override {
        Some(b) if !(0.0..1.0).contains(&b) || b <= 0.0 => {
            return Err(Error::config("beta override must be in (0,1)"));
        }
        Some(b) => b,
        None => (k as f64 - 1.0) / k as f64,
    };
    let t_q = t_quantile(tau, m - 1)?;
    let lhs = ((m - 1) as f64).sqrt() * (alpha - beta) - (alpha - alpha * alpha).max(0.0).sqrt() * t_q;
    let (decision, degenerate) = if alpha >= 1.0 {
        // s = 0: the statistic diverges to +inf when alpha > beta
        let d = if alpha > beta { Decision::RejectH0 } else { Decision::FailToReject };
        (d, Degenerate::AlphaOne)
    } else if alpha <= 0.0 {
        (Decision::FailToReject, Degenerate::AlphaZero)
    } else if lhs > 0.0 {
        (Decision::RejectH0, Degenerate::None)
    } else {
        (Decision::FailToReject, Degenerate::None)
    };
    Ok(HypothesisTestResult { alpha, beta, m, tau, t_quantile: t_q, lhs, decision, degenerate })
}

/// Full verification report: the query log, the test, and UV (which equals
/// alpha by definition).
#[derive(Debug, Clone, Serialize)]
pub struct VerificationReport {
    pub test: Option<HypothesisTestResult>,
    pub uv: f64,
    pub records: Vec<TargetRecord>,
    pub answered: usize,
    pub refused: usize,
    /// Too many refusals left fewer than the minimum query count.
    pub inconclusive: bool,
}

pub fn verify(
    oracle: &dyn Oracle,
    targets: &TargetSet,
    k: usize,
    tau: f64,
) -> Result<VerificationReport> {
    verify_with_beta(oracle, targets, k, tau, None)
}

pub fn verify_with_beta(
    oracle: &dyn Oracle,
    targets: &TargetSet,
    k: usize,
    tau: f64,
    beta_override: Option<f64>,
) -> Result<VerificationReport> {
    let outcome = query_targets(oracle, targets)?;
    if outcome.answered < MIN_TARGETS {
        return Ok(VerificationReport {
            test: None,
            uv: outcome.alpha,
            records: outcome.records,
            answered: outcome.answered,
            refused: outcome.refused,
            inconclusive: true,
        });
    }
    let test = decide_with_beta(outcome.alpha, outcome.answered, k, tau, beta_override)?;
    Ok(VerificationReport {
        uv: outcome.alpha,
        records: outcome.records,
        answered: outcome.answered,
        refused: outcome.refused,
        inconclusive: false,
        test: Some(test),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::TargetSet;
    use crate::tensor::Tensor;

    struct FixedOracle(Vec<OracleAnswer>);
    impl Oracle for FixedOracle {
        fn answer(&self, x: &[f64]) -> Result<OracleAnswer> {
            Ok(self.0[x[0] as usize])
        }
    }

    fn targets(m: usize) -> TargetSet {
        // feature 0 indexes the oracle's answer table
        let data: Vec<f64> = (0..m).flat_map(|i| [i as f64, 0.0]).collect();
        TargetSet {
            x: Tensor::matrix(m, 2, data).unwrap(),
            y_true: vec![0; m],
            y_wrong: vec![1; m],
        }
    }

    #[test]
    fn query_alpha_extremes() {
        let t = targets(30);
        let always_wrong = FixedOracle(vec![OracleAnswer::Class(1); 30]);
        let out = query_targets(&always_wrong, &t).unwrap();
        assert_eq!(out.alpha, 1.0);
        assert!(out.records.iter().all(|r| r.hit_wrong));

        let always_right = FixedOracle(vec![OracleAnswer::Class(0); 30]);
        let out = query_targets(&always_right, &t).unwrap();
        assert_eq!(out.alpha, 0.0);
        assert_eq!(out.records.len(), 30);
    }

    #[test]
    fn t_quantile_table_values() {
        // standard-table reference values
        assert!((t_quantile(0.05, 10).unwrap() - 1.812461).abs() < 1e-4);
        assert!((t_quantile(0.05, 99).unwrap() - 1.660391).abs() < 1e-4);
        assert!((t_quantile(0.01, 30).unwrap() - 2.457262).abs() < 1e-4);
        assert!((t_quantile(0.1, 1000).unwrap() - 1.282399).abs() < 1e-4);
        assert_eq!(t_quantile(0.5, 7).unwrap(), 0.0);
        assert!(t_quantile(0.0, 5).is_err());
        assert!(t_quantile(0.6, 5).is_err());
        assert!(t_quantile(0.05, 0).is_err());
    }

    #[test]
    fn decide_boundary_cases() {
        // alpha == beta forces a negative statistic
        let r = decide(0.9, 100, 10, 0.05).unwrap();
        assert_eq!(r.decision, Decision::FailToReject);
        assert!(r.lhs < 0.0);

        // hand-computed rejection: sqrt(99)*0.08 - sqrt(0.0196)*t_{0.05,99}
        let r = decide(0.98, 100, 10, 0.05).unwrap();
        assert_eq!(r.decision, Decision::RejectH0);
        let expect = 99f64.sqrt() * 0.08 - 0.0196f64.sqrt() * 1.660391;
        assert!((r.lhs - expect).abs() < 1e-4, "{} vs {expect}", r.lhs);

        let r = decide(1.0, 50, 10, 0.05).unwrap();
        assert_eq!(r.degenerate, Degenerate::AlphaOne);
        assert_eq!(r.decision, Decision::RejectH0);

        let r = decide(0.0, 50, 10, 0.05).unwrap();
        assert_eq!(r.degenerate, Degenerate::AlphaZero);
        assert_eq!(r.decision, Decision::FailToReject);

        assert!(decide(0.5, 29, 10, 0.05).is_err());
    }

    #[test]
    fn decide_monotone_in_alpha_above_beta() {
        let (m, k, tau) = (100, 10, 0.05);
        let beta = 0.9;
        let mut rejected = false;
        let mut alpha: f64 = beta;
        while alpha <= 1.0 + 1e-9 {
            let r = decide(alpha.min(1.0), m, k, tau).unwrap();
            if rejected {
                assert_eq!(r.decision, Decision::RejectH0, "regression at alpha={alpha}");
            }
            rejected = r.decision == Decision::RejectH0;
            alpha += 1e-3;
        }
        assert!(rejected, "never rejected even at alpha=1");
    }

    #[test]
    fn refusals_reduce_m_and_can_go_inconclusive() {
        let t = targets(40);
        let mut answers = vec![OracleAnswer::Class(1); 40];
        for a in answers.iter_mut().take(5) {
            *a = OracleAnswer::Refused;
        }
        let rep = verify(&FixedOracle(answers), &t, 2, 0.05).unwrap();
        assert!(!rep.inconclusive);
        assert_eq!(rep.answered, 35);
        assert_eq!(rep.refused, 5);
        assert_eq!(rep.test.as_ref().unwrap().m, 35);
        assert_eq!(rep.uv, 1.0);

        let mostly_refused = FixedOracle(
            (0..40)
                .map(|i| if i < 15 { OracleAnswer::Class(1) } else { OracleAnswer::Refused })
                .collect(),
        );
        let rep = verify(&mostly_refused, &targets(40), 2, 0.05).unwrap();
        assert!(rep.inconclusive);
        assert!(rep.test.is_none());
    }

    #[test]
    fn report_serializes_with_full_precision() {
        let t = targets(30);
        let rep = verify(&FixedOracle(vec![OracleAnswer::Class(1); 30]), &t, 10, 0.05).unwrap();
        let json = serde_json::to_string(&rep).unwrap();
        assert!(json.contains("\"uv\":1.0"));
        assert!(json.contains("reject_h0"));
    }
}
