//! Two-sided Mann-Whitney U test.
//!
//! Small samples (smaller group of at most 8 and at most 20 observations in
//! total) use the exact permutation distribution of the rank sum, computed by
//! dynamic programming over doubled midranks. Larger samples use the normal
//! approximation with tie-corrected variance.

use serde::Serialize;
use statrs::function::erf::erfc;

use super::EvalError;

pub const EXACT_MAX_SMALLER: usize = 8;
pub const EXACT_MAX_TOTAL: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MannWhitney {
    /// min(U_a, U_b)
    pub u: f64,
    /// U statistic of the first sample.
    pub u_a: f64,
    pub p_value: f64,
    pub exact: bool,
}

/// Midranks (1-based) of the pooled observations, in input order.
pub fn midranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&i, &j| values[i].total_cmp(&values[j]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

pub fn mann_whitney(a: &[f64], b: &[f64]) -> Result<MannWhitney, EvalError> {
    if a.is_empty() || b.is_empty() {
        return Err(EvalError::EmptySample);
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(EvalError::NonFiniteSample);
    }
    let (na, nb) = (a.len(), b.len());
    let n = na + nb;
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let ranks = midranks(&pooled);
    let rank_sum_a: f64 = ranks[..na].iter().sum();
    let u_a = rank_sum_a - (na * (na + 1)) as f64 / 2.0;
    let u_b = (na * nb) as f64 - u_a;
    let u = u_a.min(u_b);

    let exact = na.min(nb) <= EXACT_MAX_SMALLER && n <= EXACT_MAX_TOTAL;
    let p_value = if exact { exact_p(&ranks, na, u_a) } else { normal_p(&ranks, na, nb, u_a) };
    Ok(MannWhitney { u, u_a, p_value: p_value.clamp(0.0, 1.0), exact })
}

fn exact_p(ranks: &[f64], na: usize, u_a: f64) -> f64 {
    // doubled midranks are integers
    let doubled: Vec<usize> = ranks.iter().map(|r| (r * 2.0).round() as usize).collect();
    let max_sum: usize = doubled.iter().sum();
    // ways[j][s]: subsets of size j with doubled rank sum s
    let mut ways = vec![vec![0u64; max_sum + 1]; na + 1];
    ways[0][0] = 1;
    for &r in &doubled {
        for j in (1..=na).rev() {
            for s in (r..=max_sum).rev() {
                let add = ways[j - 1][s - r];
                if add != 0 {
                    ways[j][s] += add;
                }
            }
        }
    }
    let total: u64 = ways[na].iter().sum();
    let offset = (na * (na + 1)) as f64; // doubled na(na+1)/2
    let nb = ranks.len() - na;
    let mean = (na * nb) as f64 / 2.0;
    let observed = (u_a - mean).abs();
    let extreme: u64 = ways[na]
        .iter()
        .enumerate()
        .filter(|(_, &c)| c > 0)
        .filter(|(s, _)| {
            let u = (*s as f64 - offset) / 2.0;
            (u - mean).abs() >= observed - 1e-9
        })
        .map(|(_, &c)| c)
        .sum();
    extreme as f64 / total as f64
}

fn normal_p(ranks: &[f64], na: usize, nb: usize, u_a: f64) -> f64 {
    let n = (na + nb) as f64;
    let mut sorted = ranks.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j + 1 < sorted.len() && sorted[j + 1] == sorted[i] {
            j += 1;
        }
        let t = (j - i + 1) as f64;
        tie_term += t * t * t - t;
        i = j + 1;
    }
    let (na, nb) = (na as f64, nb as f64);
    let var = na * nb / 12.0 * ((n + 1.0) - tie_term / (n * (n - 1.0)));
    if var <= 0.0 {
        return 1.0;
    }
    let z = (u_a - na * nb / 2.0) / var.sqrt();
    erfc(z.abs() / std::f64::consts::SQRT_2)
}

/// Median of a non-empty sample; mean of the middle pair for even sizes.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Some(if v.len().is_multiple_of(2) { (v[m - 1] + v[m]) / 2.0 } else { v[m] })
}
