//! Clustering accuracy, normalized mutual information and group balance.

use std::collections::{BTreeMap, BTreeSet};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

fn check_lengths(a: &[usize], b: &[usize]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Structural(format!(
            "label vectors differ in length: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    if a.is_empty() {
        return Err(Error::Structural("label vectors are empty".into()));
    }
    Ok(())
}

/// Maps arbitrary ids onto `0..distinct` in ascending id order.
fn densify(labels: &[usize]) -> (Vec<usize>, usize) {
    let ids: BTreeSet<usize> = labels.iter().copied().collect();
    let dense: BTreeMap<usize, usize> = ids.into_iter().enumerate().map(|(i, k)| (k, i)).collect();
    (labels.iter().map(|l| dense[l]).collect(), dense.len())
}

/// `table[a][b]` counts instances with `rows[i] = a` and `cols[i] = b`.
pub fn contingency_matrix(
    rows: &[usize],
    cols: &[usize],
    n_rows: usize,
    n_cols: usize,
) -> Result<Array2<usize>> {
    if rows.len() != cols.len() {
        return Err(Error::Structural(format!(
            "label vectors differ in length: {} vs {}",
            rows.len(),
            cols.len()
        )));
    }
    let mut table = Array2::zeros((n_rows, n_cols));
    for (&r, &c) in rows.iter().zip(cols) {
        if r >= n_rows || c >= n_cols {
            return Err(Error::Bounds(format!(
                "label pair ({r}, {c}) outside {n_rows}×{n_cols}"
            )));
        }
        table[[r, c]] += 1;
    }
    Ok(table)
}

/// Maximum-weight assignment of rows to columns (Hungarian method with
/// potentials on the negated weights). Rectangular inputs are padded with
/// zeros; the returned vector gives the column for each row, and rows
/// matched to padding get an index `>= weights.ncols()`.
pub fn hungarian_max(weights: &Array2<f64>) -> Vec<usize> {
    let (r, c) = weights.dim();
    let n = r.max(c);
    if n == 0 {
        return Vec::new();
    }
    let max = weights.iter().copied().fold(0.0_f64, f64::max);
    let cost = |i: usize, j: usize| -> f64 {
        let w = if i < r && j < c { weights[[i, j]] } else { 0.0 };
        max - w
    };
    // 1-based arrays; p[j] = row matched to column j
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; n];
    for j in 1..=n {
        if p[j] > 0 {
            assignment[p[j] - 1] = j - 1;
        }
    }
    assignment.truncate(r);
    assignment
}

/// Fraction of instances correctly labelled under the best one-to-one
/// matching of predicted clusters to true classes.
pub fn accuracy(pred: &[usize], truth: &[usize]) -> Result<f64> {
    check_lengths(pred, truth)?;
    let (p, kp) = densify(pred);
    let (t, kt) = densify(truth);
    let table = contingency_matrix(&p, &t, kp, kt)?.mapv(|c| c as f64);
    let matching = hungarian_max(&table);
    let hits: f64 = matching
        .iter()
        .enumerate()
        .filter(|&(_, &j)| j < kt)
        .map(|(i, &j)| table[[i, j]])
        .sum();
    Ok(hits / pred.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NmiNormalization {
    #[default]
    Arithmetic,
    Geometric,
    Max,
}

fn entropy(counts: impl Iterator<Item = usize>, n: f64) -> f64 {
    counts
        .filter(|&c| c > 0)
        .map(|c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

pub fn nmi(pred: &[usize], truth: &[usize]) -> Result<f64> {
    nmi_with(pred, truth, NmiNormalization::Arithmetic)
}

/// `I(pred; truth)` over a mean of the two entropies, natural logs.
pub fn nmi_with(pred: &[usize], truth: &[usize], norm: NmiNormalization) -> Result<f64> {
    check_lengths(pred, truth)?;
    let n = pred.len() as f64;
    let (p, kp) = densify(pred);
    let (t, kt) = densify(truth);
    let table = contingency_matrix(&p, &t, kp, kt)?;
    let row_sums: Vec<usize> = table.rows().into_iter().map(|r| r.sum()).collect();
    let col_sums: Vec<usize> = table.columns().into_iter().map(|c| c.sum()).collect();
    let hp = entropy(row_sums.iter().copied(), n);
    let ht = entropy(col_sums.iter().copied(), n);
    if hp == 0.0 && ht == 0.0 {
        return Ok(1.0);
    }
    if hp == 0.0 || ht == 0.0 {
        return Ok(0.0);
    }
    let mut mi = 0.0;
    for ((i, j), &c) in table.indexed_iter() {
        if c > 0 {
            let c = c as f64;
            mi += c / n * (c * n / (row_sums[i] as f64 * col_sums[j] as f64)).ln();
        }
    }
    let denom = match norm {
        NmiNormalization::Arithmetic => 0.5 * (hp + ht),
        NmiNormalization::Geometric => (hp * ht).sqrt(),
        NmiNormalization::Max => hp.max(ht),
    };
    Ok((mi / denom).clamp(0.0, 1.0))
}

/// `|Ω_i ∩ G_j|` table over the clusters and groups present in the data.
pub fn cluster_group_counts(pred: &[usize], sensitive: &[usize]) -> Result<Array2<usize>> {
    check_lengths(pred, sensitive)?;
    let (p, kp) = densify(pred);
    let (g, kg) = densify(sensitive);
    contingency_matrix(&p, &g, kp, kg)
}

/// `min_i min_j |Ω_i ∩ G_j| / |Ω_i|` over the clusters present in `pred`.
pub fn balance(pred: &[usize], sensitive: &[usize]) -> Result<f64> {
    let table = cluster_group_counts(pred, sensitive)?;
    Ok(balance_from_counts(&table))
}

/// As [`balance`], but every id in `0..k` must be a non-empty cluster.
pub fn balance_with_k(pred: &[usize], sensitive: &[usize], k: usize) -> Result<f64> {
    let mut sizes = vec![0usize; k];
    for &l in pred {
        if l >= k {
            return Err(Error::Bounds(format!("cluster id {l} outside 0..{k}")));
        }
        sizes[l] += 1;
    }
    if let Some(empty) = sizes.iter().position(|&s| s == 0) {
        return Err(Error::Contract(format!("cluster {empty} is empty")));
    }
    balance(pred, sensitive)
}

fn balance_from_counts(table: &Array2<usize>) -> f64 {
    table
        .rows()
        .into_iter()
        .map(|r| {
            let size = r.sum();
            let smallest = r.iter().copied().min().unwrap_or(0);
            smallest as f64 / size as f64
        })
        .fold(f64::INFINITY, f64::min)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub acc: Option<f64>,
    pub nmi: Option<f64>,
    pub bal: f64,
    /// Predicted clusters × true classes; absent without ground truth.
    pub contingency: Option<Array2<usize>>,
    pub per_cluster_group_counts: Array2<usize>,
}

impl MetricsReport {
    pub fn compute(pred: &[usize], truth: Option<&[usize]>, sensitive: &[usize]) -> Result<Self> {
        let per_cluster_group_counts = cluster_group_counts(pred, sensitive)?;
        let bal = balance_from_counts(&per_cluster_group_counts);
        let (acc, nmi_value, contingency) = match truth {
            Some(truth) => {
                let (p, kp) = densify(pred);
                let (t, kt) = densify(truth);
                (
                    Some(accuracy(pred, truth)?),
                    Some(nmi(pred, truth)?),
                    Some(contingency_matrix(&p, &t, kp, kt)?),
                )
            }
            None => (None, None, None),
        };
        Ok(Self {
            acc,
            nmi: nmi_value,
            bal,
            contingency,
            per_cluster_group_counts,
        })
    }

    /// One row in the ACC / NMI / BAL layout.
    pub fn table_row(&self, label: &str) -> String {
        let fmt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{v:.3}"));
        format!(
            "{label:<12} ACC {:>6}  NMI {:>6}  BAL {:>6}",
            fmt(self.acc),
            fmt(self.nmi),
            format!("{:.3}", self.bal)
        )
    }
}
