//! Two-sample Mann-Whitney U test and group comparisons over feature tables.

use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};
use crate::ingest::WmLabel;
use crate::table::FeatureTable;

/// Exact p-values are used up to this pooled sample size when there are no ties.
pub const EXACT_MAX_TOTAL: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Exact,
    NormalApprox,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Exact => "exact",
            Method::NormalApprox => "normal_approx",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    /// `U` of the first sample: pairs where it is larger, ties counting one half.
    pub u_statistic: f64,
    pub p_value: f64,
    pub method: Method,
    pub n1: usize,
    pub n2: usize,
}

/// Midranks (1-based) of the pooled values and the tie-group sizes.
pub fn midranks(values: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut ties = Vec::new();
    let mut start = 0;
    while start < idx.len() {
        let mut end = start;
        while end + 1 < idx.len() && values[idx[end + 1]] == values[idx[start]] {
            end += 1;
        }
        let rank = (start + end) as f64 / 2.0 + 1.0;
        for &i in &idx[start..=end] {
            ranks[i] = rank;
        }
        ties.push(end - start + 1);
        start = end + 1;
    }
    (ranks, ties)
}

/// Number of arrangements giving each `U = 0..=n1*n2` when there are no ties.
pub fn exact_u_counts(n1: usize, n2: usize) -> Vec<u64> {
    // counts[i][j] is the distribution for sample sizes (i, j)
    let mut counts: Vec<Vec<Vec<u64>>> = vec![vec![Vec::new(); n2 + 1]; n1 + 1];
    for i in 0..=n1 {
        for j in 0..=n2 {
            let mut d = vec![0u64; i * j + 1];
            if i == 0 || j == 0 {
                d[0] = 1;
            } else {
                // the largest pooled value belongs to sample 1 (adds j) or sample 2
                for (u, &c) in counts[i - 1][j].iter().enumerate() {
                    d[u + j] += c;
                }
                for (u, &c) in counts[i][j - 1].iter().enumerate() {
                    d[u] += c;
                }
            }
            counts[i][j] = d;
        }
    }
    std::mem::take(&mut counts[n1][n2])
}

fn normal_two_tailed(u: f64, n1: usize, n2: usize, ties: &[usize]) -> f64 {
    let (n1f, n2f) = (n1 as f64, n2 as f64);
    let n = n1f + n2f;
    let mu = n1f * n2f / 2.0;
    let tie_term: f64 = ties.iter().map(|&t| (t as f64).powi(3) - t as f64).sum();
    let var = if n > 1.0 {
        n1f * n2f / 12.0 * ((n + 1.0) - tie_term / (n * (n - 1.0)))
    } else {
        0.0
    };
    if var <= 0.0 {
        return 1.0;
    }
    let z = ((u - mu).abs() - 0.5).max(0.0) / var.sqrt();
    erfc(z / std::f64::consts::SQRT_2).min(1.0)
}

/// Two-tailed Mann-Whitney U test of `a` against `b`.
pub fn mann_whitney_u(a: &[f64], b: &[f64]) -> Result<TestResult> {
    let (n1, n2) = (a.len(), b.len());
    if n1 == 0 || n2 == 0 {
        return Err(Error::EmptySample);
    }
    if a.iter().chain(b).any(|v| v.is_nan()) {
        return Err(Error::Validation("NaN in Mann-Whitney sample".into()));
    }
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let (ranks, ties) = midranks(&pooled);
    let rank_sum: f64 = ranks[..n1].iter().sum();
    let u = rank_sum - (n1 * (n1 + 1)) as f64 / 2.0;
    let has_ties = ties.iter().any(|&t| t > 1);
    let (p_value, method) = if n1 + n2 <= EXACT_MAX_TOTAL && !has_ties {
        let counts = exact_u_counts(n1, n2);
        let total: u64 = counts.iter().sum();
        let k = u.round() as usize;
        let lower: u64 = counts[..=k].iter().sum();
        let upper: u64 = counts[k..].iter().sum();
        let p = 2.0 * lower.min(upper) as f64 / total as f64;
        (p.min(1.0), Method::Exact)
    } else {
        (normal_two_tailed(u, n1, n2, &ties), Method::NormalApprox)
    };
    Ok(TestResult { u_statistic: u, p_value, method, n1, n2 })
}

pub fn median(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let m = s.len() / 2;
    if s.len().is_multiple_of(2) {
        0.5 * (s[m - 1] + s[m])
    } else {
        s[m]
    }
}

/// A group test with its descriptive context. The first sample is the
/// low-WM group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupComparison {
    pub column: String,
    pub test: TestResult,
    pub n_low: usize,
    pub n_high: usize,
    pub median_low: f64,
    pub median_high: f64,
}

fn comparison(column: &str, low: &[f64], high: &[f64]) -> Result<GroupComparison> {
    if low.is_empty() {
        return Err(Error::EmptyGroup("low".into()));
    }
    if high.is_empty() {
        return Err(Error::EmptyGroup("high".into()));
    }
    Ok(GroupComparison {
        column: column.to_string(),
        test: mann_whitney_u(low, high)?,
        n_low: low.len(),
        n_high: high.len(),
        median_low: median(low),
        median_high: median(high),
    })
}

/// Test one column of a per-subject table, split by label.
pub fn compare_groups(table: &FeatureTable, column: &str) -> Result<GroupComparison> {
    let col = table
        .column_index(column)
        .ok_or_else(|| Error::Validation(format!("no column {column:?} in feature table")))?;
    let (mut low, mut high) = (Vec::new(), Vec::new());
    for row in table.rows() {
        match row.label {
            WmLabel::Low => low.push(row.values[col]),
            WmLabel::High => high.push(row.values[col]),
        }
    }
    comparison(column, &low, &high)
}

/// Pool per-subject samples within each group, then test the pooled values.
pub fn compare_pooled(name: &str, samples: &[(WmLabel, Vec<f64>)]) -> Result<GroupComparison> {
    let (mut low, mut high) = (Vec::new(), Vec::new());
    for (label, values) in samples {
        match label {
            WmLabel::Low => low.extend_from_slice(values),
            WmLabel::High => high.extend_from_slice(values),
        }
    }
    comparison(name, &low, &high)
}
