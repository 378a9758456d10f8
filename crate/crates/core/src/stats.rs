//! Paired tests and equivalence analysis over per-episode accuracies.
//!
//! The Student-t distribution is evaluated through the regularized
//! incomplete beta function (Lentz continued fraction), so no statistics
//! library is needed.

use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum StatsError {
    #[error("samples have different lengths ({left} vs {right})")]
    LengthMismatch { left: usize, right: usize },
    #[error("{what} needs at least {needed} values, got {got}")]
    TooFew {
        what: &'static str,
        needed: usize,
        got: usize,
    },
    #[error("paired differences have zero variance")]
    ZeroVariance,
    #[error("all paired differences are zero")]
    AllZero,
    #[error("equivalence margin must be positive, got {0}")]
    NonPositiveMargin(f64),
    #[error("confidence must lie in (0, 1), got {0}")]
    InvalidConfidence(f64),
    #[error("bootstrap needs at least 1000 resamples, got {0}")]
    TooFewResamples(usize),
    #[error("non-finite value in input")]
    NonFinite,
    #[error("accuracy csv: {0}")]
    Csv(String),
}

/// Mean, sample standard deviation (n − 1 denominator) and standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub n: usize,
    pub mean: f64,
    /// Absent for a single value.
    pub std: Option<f64>,
    /// Absent for a single value.
    pub std_error: Option<f64>,
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Sum of squared deviations from the mean (two-pass). Exactly 0 for a
/// constant sequence, where the rounded mean may differ from the values.
fn sum_sq_dev(values: &[f64]) -> f64 {
    if values.iter().all(|&v| v == values[0]) {
        return 0.0;
    }
    let m = mean(values);
    values.iter().map(|v| (v - m) * (v - m)).sum()
}

/// `None` for an empty sequence.
pub fn summarize(values: &[f64]) -> Option<Summary> {
    if values.is_empty() {
        return None;
    }
    let n = values.len();
    let m = if values.iter().all(|&v| v == values[0]) {
        values[0]
    } else {
        mean(values)
    };
    let (std, std_error) = if n >= 2 {
        let sd = (sum_sq_dev(values) / (n - 1) as f64).sqrt();
        (Some(sd), Some(sd / (n as f64).sqrt()))
    } else {
        (None, None)
    };
    Some(Summary {
        n,
        mean: m,
        std,
        std_error,
    })
}

// ---------------------------------------------------------------------------
// Special functions

fn ln_beta(a: f64, b: f64) -> f64 {
    libm::lgamma(a) + libm::lgamma(b) - libm::lgamma(a + b)
}

/// Continued fraction for the incomplete beta (modified Lentz).
fn beta_cf(a: f64, b: f64, x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    const EPS: f64 = 1e-16;
    let (qab, qap, qam) = (a + b, a + 1.0, a - 1.0);
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=10_000 {
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

/// Regularized incomplete beta `I_x(a, b)`.
pub fn inc_beta(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let front = (a * x.ln() + b * (1.0 - x).ln() - ln_beta(a, b)).exp();
    // the fraction converges fast only on this side of the mean
    if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_cf(a, b, x) / a
    } else {
        1.0 - front * beta_cf(b, a, 1.0 - x) / b
    }
}

/// Student-t CDF with `df` degrees of freedom.
pub fn t_cdf(t: f64, df: f64) -> f64 {
    if t.is_infinite() {
        return if t > 0.0 { 1.0 } else { 0.0 };
    }
    let tail = 0.5 * inc_beta(df / 2.0, 0.5, df / (df + t * t));
    if t >= 0.0 {
        1.0 - tail
    } else {
        tail
    }
}

/// Two-sided tail probability `P(|T| ≥ |t|)`.
pub fn t_two_sided_p(t: f64, df: f64) -> f64 {
    if t.is_infinite() {
        return 0.0;
    }
    inc_beta(df / 2.0, 0.5, df / (df + t * t)).clamp(0.0, 1.0)
}

/// Inverse of [`t_cdf`] by bracketing and bisection to machine precision.
pub fn t_quantile(p: f64, df: f64) -> f64 {
    assert!(p > 0.0 && p < 1.0, "quantile level must lie in (0, 1)");
    if p == 0.5 {
        return 0.0;
    }
    if p < 0.5 {
        return -t_quantile(1.0 - p, df);
    }
    let mut lo = 0.0;
    let mut hi = 1.0;
    while t_cdf(hi, df) < p {
        lo = hi;
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid == lo || mid == hi {
            break;
        }
        if t_cdf(mid, df) < p {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Standard normal upper tail `P(Z ≥ z)`.
pub fn normal_sf(z: f64) -> f64 {
    0.5 * libm::erfc(z / std::f64::consts::SQRT_2)
}

// ---------------------------------------------------------------------------
// Paired tests

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairedTestResult {
    pub statistic: f64,
    /// Two-sided.
    pub p_value: f64,
    pub n: usize,
}

fn check_finite(values: &[f64]) -> Result<(), StatsError> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(StatsError::NonFinite)
    }
}

fn differences(a: &[f64], b: &[f64]) -> Result<Vec<f64>, StatsError> {
    if a.len() != b.len() {
        return Err(StatsError::LengthMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    check_finite(a)?;
    check_finite(b)?;
    Ok(a.iter().zip(b).map(|(x, y)| x - y).collect())
}

/// `t = mean(d) / (sd(d)/√n)` with `d = a − b`, two-sided p on `n − 1` df.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<PairedTestResult, StatsError> {
    let d = differences(a, b)?;
    let n = d.len();
    if n < 2 {
        return Err(StatsError::TooFew {
            what: "paired t-test",
            needed: 2,
            got: n,
        });
    }
    let var = sum_sq_dev(&d) / (n - 1) as f64;
    if var <= 0.0 {
        return Err(StatsError::ZeroVariance);
    }
    let t = mean(&d) / (var / n as f64).sqrt();
    Ok(PairedTestResult {
        statistic: t,
        p_value: t_two_sided_p(t, (n - 1) as f64),
        n,
    })
}

/// Exact enumeration is used up to this many non-zero differences.
pub const WILCOXON_EXACT_MAX: usize = 12;

/// Mid-ranks of `|d|`, doubled so that they are integers.
fn doubled_midranks(abs: &[f64]) -> (Vec<u64>, Vec<usize>) {
    let mut order: Vec<usize> = (0..abs.len()).collect();
    order.sort_by(|&i, &j| abs[i].total_cmp(&abs[j]));
    let mut ranks = vec![0u64; abs.len()];
    let mut ties = Vec::new();
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && abs[order[end]] == abs[order[start]] {
            end += 1;
        }
        // positions start+1 ..= end share rank (start+1+end)/2
        let doubled = (start + 1 + end) as u64;
        for &i in &order[start..end] {
            ranks[i] = doubled;
        }
        ties.push(end - start);
        start = end;
    }
    (ranks, ties)
}

/// Signed-rank test on `d = a − b`. Zero differences are dropped and ties
/// share mid-ranks; the statistic is `W = min(W+, W−)`. With at most
/// [`WILCOXON_EXACT_MAX`] non-zero differences the two-sided p is the share
/// of all `2^n` sign assignments whose `min(W+, W−)` does not exceed the
/// observed `W`; beyond that a tie-corrected normal approximation with
/// continuity correction is used.
pub fn wilcoxon_signed_rank(a: &[f64], b: &[f64]) -> Result<PairedTestResult, StatsError> {
    let d: Vec<f64> = differences(a, b)?.into_iter().filter(|&x| x != 0.0).collect();
    if d.is_empty() {
        return Err(StatsError::AllZero);
    }
    let n = d.len();
    let abs: Vec<f64> = d.iter().map(|x| x.abs()).collect();
    let (ranks, ties) = doubled_midranks(&abs);
    let total: u64 = ranks.iter().sum();
    let w_plus: u64 = ranks.iter().zip(&d).filter(|(_, &x)| x > 0.0).map(|(r, _)| r).sum();
    let w2 = w_plus.min(total - w_plus);
    let statistic = w2 as f64 / 2.0;

    let p_value = if n <= WILCOXON_EXACT_MAX {
        let mut hits = 0u64;
        for mask in 0u32..(1 << n) {
            let s: u64 = (0..n).filter(|i| mask >> i & 1 == 1).map(|i| ranks[i]).sum();
            if s.min(total - s) <= w2 {
                hits += 1;
            }
        }
        hits as f64 / (1u64 << n) as f64
    } else {
        let nf = n as f64;
        let mu = nf * (nf + 1.0) / 4.0;
        let tie_term: f64 = ties.iter().map(|&t| (t * t * t - t) as f64).sum::<f64>() / 48.0;
        let sigma = (nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term).sqrt();
        let z = ((mu - statistic).abs() - 0.5).max(0.0) / sigma;
        (2.0 * normal_sf(z)).min(1.0)
    };
    Ok(PairedTestResult {
        statistic,
        p_value,
        n,
    })
}

// ---------------------------------------------------------------------------
// Equivalence

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Verdict {
    Equivalent,
    NotEquivalent,
}

impl std::fmt::Display for Verdict {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Verdict::Equivalent => "equivalent",
            Verdict::NotEquivalent => "not-equivalent",
        })
    }
}

/// Equivalent iff the margin is non-negative and the CI lies inside
/// `[−margin, +margin]`.
pub fn verdict(ci_low: f64, ci_high: f64, margin: f64) -> Verdict {
    if margin >= 0.0 && ci_low >= -margin && ci_high <= margin {
        Verdict::Equivalent
    } else {
        Verdict::NotEquivalent
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquivalenceReport {
    pub method: String,
    pub n_a: usize,
    pub n_b: usize,
    pub mean_a: f64,
    pub mean_b: f64,
    /// `mean_a − mean_b`.
    pub mean_diff: f64,
    pub confidence: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub margin: f64,
    pub verdict: Verdict,
    /// Parametric only: pooled standard error and degrees of freedom.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub std_error: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub df: Option<f64>,
    /// Parametric only: one-sided p for `H0: diff ≤ −margin`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub p_lower: Option<f64>,
    /// Parametric only: one-sided p for `H0: diff ≥ +margin`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub p_upper: Option<f64>,
}

fn check_margin_confidence(margin: f64, confidence: f64) -> Result<(), StatsError> {
    if !(margin > 0.0) {
        return Err(StatsError::NonPositiveMargin(margin));
    }
    if !(confidence > 0.0 && confidence < 1.0) {
        return Err(StatsError::InvalidConfidence(confidence));
    }
    Ok(())
}

/// Unpaired pooled-variance TOST. The CI is
/// `mean_diff ± t((1+confidence)/2, n_a+n_b−2) · sp·√(1/n_a + 1/n_b)`.
pub fn tost_equivalence(
    a: &[f64],
    b: &[f64],
    margin: f64,
    confidence: f64,
) -> Result<EquivalenceReport, StatsError> {
    for (what, s) in [("TOST sample a", a), ("TOST sample b", b)] {
        if s.len() < 2 {
            return Err(StatsError::TooFew {
                what,
                needed: 2,
                got: s.len(),
            });
        }
        check_finite(s)?;
    }
    check_margin_confidence(margin, confidence)?;
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mean_a, mean_b) = (mean(a), mean(b));
    let diff = mean_a - mean_b;
    let df = na + nb - 2.0;
    let pooled_var = (sum_sq_dev(a) + sum_sq_dev(b)) / df;
    let se = pooled_var.sqrt() * (1.0 / na + 1.0 / nb).sqrt();
    let half = t_quantile((1.0 + confidence) / 2.0, df) * se;
    let (p_lower, p_upper) = if se > 0.0 {
        (
            1.0 - t_cdf((diff + margin) / se, df),
            t_cdf((diff - margin) / se, df),
        )
    } else {
        (
            if diff > -margin { 0.0 } else { 1.0 },
            if diff < margin { 0.0 } else { 1.0 },
        )
    };
    let (ci_low, ci_high) = (diff - half, diff + half);
    Ok(EquivalenceReport {
        method: "tost".into(),
        n_a: a.len(),
        n_b: b.len(),
        mean_a,
        mean_b,
        mean_diff: diff,
        confidence,
        ci_low,
        ci_high,
        margin,
        verdict: verdict(ci_low, ci_high, margin),
        std_error: Some(se),
        df: Some(df),
        p_lower: Some(p_lower),
        p_upper: Some(p_upper),
    })
}

/// Percentile with linear interpolation at position `q·(n − 1)` of a sorted
/// slice.
pub fn percentile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

pub const DEFAULT_RESAMPLES: usize = 10_000;

/// Percentile bootstrap of `mean(a*) − mean(b*)`, resampling each side
/// independently at its own size.
pub fn bootstrap_equivalence(
    a: &[f64],
    b: &[f64],
    margin: f64,
    resamples: usize,
    confidence: f64,
    seed: u64,
) -> Result<EquivalenceReport, StatsError> {
    for (what, s) in [("bootstrap sample a", a), ("bootstrap sample b", b)] {
        if s.is_empty() {
            return Err(StatsError::TooFew {
                what,
                needed: 1,
                got: 0,
            });
        }
        check_finite(s)?;
    }
    check_margin_confidence(margin, confidence)?;
    if resamples < 1000 {
        return Err(StatsError::TooFewResamples(resamples));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let resampled_mean = |s: &[f64], rng: &mut ChaCha8Rng| {
        (0..s.len()).map(|_| s[rng.random_range(0..s.len())]).sum::<f64>() / s.len() as f64
    };
    let mut diffs: Vec<f64> = (0..resamples)
        .map(|_| resampled_mean(a, &mut rng) - resampled_mean(b, &mut rng))
        .collect();
    diffs.sort_by(f64::total_cmp);
    let tail = (1.0 - confidence) / 2.0;
    let ci_low = percentile_sorted(&diffs, tail);
    let ci_high = percentile_sorted(&diffs, 1.0 - tail);
    let (mean_a, mean_b) = (mean(a), mean(b));
    Ok(EquivalenceReport {
        method: "bootstrap".into(),
        n_a: a.len(),
        n_b: b.len(),
        mean_a,
        mean_b,
        mean_diff: mean_a - mean_b,
        confidence,
        ci_low,
        ci_high,
        margin,
        verdict: verdict(ci_low, ci_high, margin),
        std_error: None,
        df: None,
        p_lower: None,
        p_upper: None,
    })
}

/// Parses a per-episode accuracy CSV: header `accuracy_pct`, one value per
/// line.
pub fn parse_accuracy_csv(text: &str) -> Result<Vec<f64>, StatsError> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    match lines.next().map(str::trim) {
        Some("accuracy_pct") => {}
        other => {
            return Err(StatsError::Csv(format!(
                "expected header `accuracy_pct`, found {other:?}"
            )))
        }
    }
    lines
        .enumerate()
        .map(|(i, l)| {
            l.trim()
                .parse::<f64>()
                .map_err(|e| StatsError::Csv(format!("row {}: {e}", i + 1)))
        })
        .collect()
}

pub fn read_accuracy_csv(path: impl AsRef<Path>) -> Result<Vec<f64>, StatsError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)
        .map_err(|e| StatsError::Csv(format!("{}: {e}", path.display())))?;
    parse_accuracy_csv(&text)
}
