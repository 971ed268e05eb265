//! Paired signed-rank test and report summaries.

use serde::{Deserialize, Serialize};

use crate::error::{check_len, invalid, Result};

/// Largest sample size evaluated with the exact null distribution.
pub const EXACT_MAX_N: usize = 25;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SignedRankTest {
    /// min(W⁺, W⁻).
    pub statistic: f64,
    pub p_value: f64,
    /// Non-zero differences used.
    pub n: usize,
}

/// Ranks of `|d|` with ties averaged, doubled so they stay integral.
fn doubled_ranks(diffs: &[f64]) -> Vec<u64> {
    let mut order: Vec<usize> = (0..diffs.len()).collect();
    order.sort_by(|&i, &j| diffs[i].abs().total_cmp(&diffs[j].abs()));
    let mut ranks = vec![0u64; diffs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && diffs[order[j]].abs() == diffs[order[i]].abs() {
            j += 1;
        }
        // average of ranks i+1..=j, doubled
        let doubled = (i + 1 + j) as u64;
        for &k in &order[i..j] {
            ranks[k] = doubled;
        }
        i = j;
    }
    ranks
}

fn nonzero_differences(a: &[f64], b: &[f64]) -> Result<Vec<f64>> {
    check_len(a.len(), b.len())?;
    if a.iter().chain(b).any(|x| !x.is_finite()) {
        return Err(invalid("signed-rank inputs must be finite"));
    }
    Ok(a.iter().zip(b).map(|(x, y)| x - y).filter(|d| *d != 0.0).collect())
}

/// Two-sided p-value from the exact null distribution of W⁺.
pub fn wilcoxon_exact(a: &[f64], b: &[f64]) -> Result<SignedRankTest> {
    let d = nonzero_differences(a, b)?;
    if d.is_empty() {
        return Ok(no_difference());
    }
    let ranks = doubled_ranks(&d);
    let total: u64 = ranks.iter().sum();
    // counts[s] = number of sign patterns with doubled W⁺ = s
    let mut counts = vec![0f64; total as usize + 1];
    counts[0] = 1.0;
    let mut reach = 0usize;
    for &r in &ranks {
        let r = r as usize;
        for s in (0..=reach).rev() {
            if counts[s] != 0.0 {
                counts[s + r] += counts[s];
            }
        }
        reach += r;
    }
    let w_plus: u64 = d.iter().zip(&ranks).filter(|(x, _)| **x > 0.0).map(|(_, r)| r).sum();
    let all = 2f64.powi(d.len() as i32);
    let lower: f64 = counts[..=w_plus as usize].iter().sum::<f64>() / all;
    let upper: f64 = counts[w_plus as usize..].iter().sum::<f64>() / all;
    Ok(SignedRankTest {
        statistic: w_plus.min(total - w_plus) as f64 / 2.0,
        p_value: (2.0 * lower.min(upper)).min(1.0),
        n: d.len(),
    })
}

/// Two-sided p-value from the tie-corrected normal approximation with
/// continuity correction.
pub fn wilcoxon_normal(a: &[f64], b: &[f64]) -> Result<SignedRankTest> {
    let d = nonzero_differences(a, b)?;
    if d.is_empty() {
        return Ok(no_difference());
    }
    let ranks = doubled_ranks(&d);
    let n = d.len() as f64;
    let w_plus: f64 = d.iter().zip(&ranks).filter(|(x, _)| **x > 0.0).map(|(_, r)| *r as f64 / 2.0).sum();
    let total = n * (n + 1.0) / 2.0;
    let mut sorted = ranks.clone();
    sorted.sort_unstable();
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let j = sorted[i..].iter().take_while(|&&r| r == sorted[i]).count();
        let t = j as f64;
        tie_term += t * t * t - t;
        i += j;
    }
    let mean = total / 2.0;
    let var = n * (n + 1.0) * (2.0 * n + 1.0) / 24.0 - tie_term / 48.0;
    let p = if var <= 0.0 {
        1.0
    } else {
        let dev = ((w_plus - mean).abs() - 0.5).max(0.0);
        let z = dev / var.sqrt();
        statrs::function::erf::erfc(z / std::f64::consts::SQRT_2).min(1.0)
    };
    Ok(SignedRankTest {
        statistic: w_plus.min(total - w_plus),
        p_value: p,
        n: d.len(),
    })
}

fn no_difference() -> SignedRankTest {
    SignedRankTest {
        statistic: 0.0,
        p_value: 1.0,
        n: 0,
    }
}

/// Paired two-sided signed-rank test: exact for up to 25 non-zero
/// differences, normal approximation above. Identical inputs give p = 1.
pub fn wilcoxon_signed_rank(a: &[f64], b: &[f64]) -> Result<SignedRankTest> {
    let n = nonzero_differences(a, b)?.len();
    if n == 0 {
        return Ok(no_difference());
    }
    if n < 5 {
        return Err(invalid(format!(
            "signed-rank test needs at least 5 non-zero differences, got {n}"
        )));
    }
    if n <= EXACT_MAX_N {
        wilcoxon_exact(a, b)
    } else {
        wilcoxon_normal(a, b)
    }
}

/// (median, mean); the median of an even count is the midpoint of the two
/// central values.
pub fn summarize_report(values: &[f64]) -> Result<(f64, f64)> {
    if values.is_empty() {
        return Err(invalid("cannot summarize an empty array"));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let median = if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    };
    let mean = values.iter().sum::<f64>() / n as f64;
    Ok((median, mean))
}

pub fn bonferroni(p_values: &[f64]) -> Vec<f64> {
    let n = p_values.len() as f64;
    p_values.iter().map(|p| (p * n).min(1.0)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_inputs() {
        let a = [0.3, 0.1, 0.7];
        let t = wilcoxon_signed_rank(&a, &a).unwrap();
        assert_eq!(t.p_value, 1.0);
    }

    #[test]
    fn six_positive() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [0.0; 6];
        let t = wilcoxon_signed_rank(&a, &b).unwrap();
        assert!((t.p_value - 0.03125).abs() < 1e-15);
        assert_eq!(t.statistic, 0.0);
    }

    #[test]
    fn errors() {
        assert!(wilcoxon_signed_rank(&[1.0, 2.0], &[1.0]).is_err());
        assert!(wilcoxon_signed_rank(&[1.0, 2.0], &[0.0, 0.0]).is_err());
        assert!(summarize_report(&[]).is_err());
    }

    #[test]
    fn symmetric_under_swap() {
        let a = [0.5, 0.2, 0.9, 0.4, 0.3, 0.8, 0.1];
        let b = [0.1, 0.3, 0.2, 0.6, 0.0, 0.7, 0.15];
        let x = wilcoxon_signed_rank(&a, &b).unwrap();
        let y = wilcoxon_signed_rank(&b, &a).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn ties_share_ranks() {
        assert_eq!(doubled_ranks(&[1.0, -1.0, 2.0]), vec![3, 3, 6]);
    }

    #[test]
    fn summaries() {
        assert_eq!(summarize_report(&[1.0, 2.0, 3.0]).unwrap(), (2.0, 2.0));
        assert_eq!(summarize_report(&[4.0, 1.0, 3.0, 2.0]).unwrap(), (2.5, 2.5));
        assert_eq!(bonferroni(&[0.01, 0.02]), vec![0.02, 0.04]);
        assert_eq!(bonferroni(&[0.6, 0.9]), vec![1.0, 1.0]);
        assert_eq!(bonferroni(&[0.3]), vec![0.3]);
    }
}
