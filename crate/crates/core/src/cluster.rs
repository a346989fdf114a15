//! k-means, Student-t soft assignments and the KL consensus loss.

use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::weighted::WeightedIndex;
use rand_distr::Distribution;
use serde::{Deserialize, Serialize};

use crate::data::seeded_rng;
use crate::metrics::{contingency_matrix, hungarian_max};
use crate::{Error, Result};

/// Floor applied to Q at the target index before taking the log.
pub const Q_FLOOR: f64 = 1e-12;

/// Column-wise concatenation of per-view latent codes, in view order.
pub fn concat_views(latents: &[Array2<f64>]) -> Result<Array2<f64>> {
    let first = latents
        .first()
        .ok_or_else(|| Error::Structural("no views to concatenate".into()))?;
    if let Some((v, bad)) = latents
        .iter()
        .enumerate()
        .find(|(_, z)| z.nrows() != first.nrows())
    {
        return Err(Error::Structural(format!(
            "view {v} has {} rows, view 0 has {}",
            bad.nrows(),
            first.nrows()
        )));
    }
    let views: Vec<ArrayView2<f64>> = latents.iter().map(|z| z.view()).collect();
    concatenate(Axis(1), &views).map_err(|e| Error::Structural(e.to_string()))
}

/// Inverse of [`concat_views`] for the given view widths.
pub fn split_columns(z: &Array2<f64>, widths: &[usize]) -> Result<Vec<Array2<f64>>> {
    if widths.iter().sum::<usize>() != z.ncols() {
        return Err(Error::Structural(format!(
            "widths {widths:?} do not add up to {} columns",
            z.ncols()
        )));
    }
    let mut start = 0;
    Ok(widths
        .iter()
        .map(|&w| {
            let part = z.slice(s![.., start..start + w]).to_owned();
            start += w;
            part
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct KMeansOptions {
    pub restarts: usize,
    pub max_iter: usize,
}

impl Default for KMeansOptions {
    fn default() -> Self {
        Self {
            restarts: 10,
            max_iter: 300,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub centroids: Array2<f64>,
    pub labels: Vec<usize>,
    pub inertia: f64,
}

/// One Lloyd run together with the inertia after every assignment step.
#[derive(Debug, Clone)]
pub struct LloydRun {
    pub result: KMeansResult,
    pub inertia_history: Vec<f64>,
    pub iterations: usize,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn row(z: &Array2<f64>, i: usize) -> &[f64] {
    let width = z.ncols();
    &z.as_slice().expect("standard layout")[i * width..(i + 1) * width]
}

/// Nearest centroid per point; ties go to the lowest index.
fn assign(z: &Array2<f64>, centroids: &Array2<f64>) -> (Vec<usize>, Vec<f64>) {
    let k = centroids.nrows();
    (0..z.nrows())
        .map(|i| {
            let x = row(z, i);
            let mut best = (0, f64::INFINITY);
            for j in 0..k {
                let d = sq_dist(x, row(centroids, j));
                if d < best.1 {
                    best = (j, d);
                }
            }
            best
        })
        .unzip()
}

/// Moves the point farthest from its centroid into each empty cluster.
fn repair_empty(
    z: &Array2<f64>,
    centroids: &mut Array2<f64>,
    labels: &mut [usize],
    dists: &mut [f64],
) {
    let k = centroids.nrows();
    let mut counts = vec![0usize; k];
    for &l in labels.iter() {
        counts[l] += 1;
    }
    for j in 0..k {
        if counts[j] > 0 {
            continue;
        }
        let mut far: Option<usize> = None;
        for i in 0..labels.len() {
            if counts[labels[i]] > 1 && far.is_none_or(|f| dists[i] > dists[f]) {
                far = Some(i);
            }
        }
        let Some(i) = far else { break };
        counts[labels[i]] -= 1;
        counts[j] += 1;
        labels[i] = j;
        dists[i] = 0.0;
        centroids.row_mut(j).assign(&z.row(i));
    }
}

fn cluster_means(z: &Array2<f64>, labels: &[usize], previous: &Array2<f64>) -> Array2<f64> {
    let k = previous.nrows();
    let mut sums = Array2::<f64>::zeros((k, z.ncols()));
    let mut counts = vec![0usize; k];
    for (i, &l) in labels.iter().enumerate() {
        sums.row_mut(l).scaled_add(1.0, &z.row(i));
        counts[l] += 1;
    }
    for j in 0..k {
        if counts[j] == 0 {
            sums.row_mut(j).assign(&previous.row(j));
        } else {
            sums.row_mut(j).mapv_inplace(|v| v / counts[j] as f64);
        }
    }
    sums
}

fn inertia_of(z: &Array2<f64>, centroids: &Array2<f64>, labels: &[usize]) -> f64 {
    labels
        .iter()
        .enumerate()
        .map(|(i, &l)| sq_dist(row(z, i), row(centroids, l)))
        .sum()
}

/// D²-weighted k-means++ seeding.
pub fn kmeans_plus_plus<R: Rng + ?Sized>(z: &Array2<f64>, k: usize, rng: &mut R) -> Array2<f64> {
    let n = z.nrows();
    let mut centroids = Array2::zeros((k, z.ncols()));
    let first = rng.random_range(0..n);
    centroids.row_mut(0).assign(&z.row(first));
    let mut min_d: Vec<f64> = (0..n).map(|i| sq_dist(row(z, i), row(z, first))).collect();
    for j in 1..k {
        let pick = match WeightedIndex::new(&min_d) {
            Ok(w) => w.sample(rng),
            // every point coincides with a chosen centroid
            Err(_) => rng.random_range(0..n),
        };
        centroids.row_mut(j).assign(&z.row(pick));
        for (i, d) in min_d.iter_mut().enumerate() {
            *d = d.min(sq_dist(row(z, i), row(z, pick)));
        }
    }
    centroids
}

/// Lloyd iterations from the given centroids until the assignment stops
/// changing or `max_iter` is reached.
pub fn lloyd(z: &Array2<f64>, initial: Array2<f64>, max_iter: usize) -> LloydRun {
    let z = z.as_standard_layout().into_owned();
    let mut centroids = initial.as_standard_layout().into_owned();
    let (mut labels, mut dists) = assign(&z, &centroids);
    repair_empty(&z, &mut centroids, &mut labels, &mut dists);
    let mut history = vec![inertia_of(&z, &centroids, &labels)];
    let mut iterations = 0;
    for _ in 0..max_iter {
        iterations += 1;
        centroids = cluster_means(&z, &labels, &centroids);
        let (mut next, mut next_d) = assign(&z, &centroids);
        repair_empty(&z, &mut centroids, &mut next, &mut next_d);
        history.push(inertia_of(&z, &centroids, &next));
        let converged = next == labels;
        labels = next;
        if converged {
            break;
        }
    }
    centroids = cluster_means(&z, &labels, &centroids);
    let inertia = inertia_of(&z, &centroids, &labels);
    LloydRun {
        result: KMeansResult {
            centroids,
            labels,
            inertia,
        },
        inertia_history: history,
        iterations,
    }
}

pub fn kmeans(z: &Array2<f64>, k: usize, seed: u64) -> Result<KMeansResult> {
    kmeans_with(z, k, seed, KMeansOptions::default())
}

/// Best of `restarts` k-means++-seeded Lloyd runs by inertia.
pub fn kmeans_with(z: &Array2<f64>, k: usize, seed: u64, options: KMeansOptions) -> Result<KMeansResult> {
    let n = z.nrows();
    if k == 0 || k > n {
        return Err(Error::Bounds(format!("k = {k} must lie in 1..={n}")));
    }
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::Contract("k-means input has non-finite values".into()));
    }
    let z = z.as_standard_layout().into_owned();
    let mut rng = seeded_rng(seed);
    let mut best: Option<KMeansResult> = None;
    for _ in 0..options.restarts.max(1) {
        let init = kmeans_plus_plus(&z, k, &mut rng);
        let run = lloyd(&z, init, options.max_iter).result;
        if best.as_ref().is_none_or(|b| run.inertia < b.inertia) {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one restart"))
}

/// Relabels `labels` so they agree as much as possible with `reference`.
pub fn align_labels(labels: &[usize], reference: &[usize], k: usize) -> Result<Vec<usize>> {
    let table = contingency_matrix(labels, reference, k, k)?;
    let mapping = hungarian_max(&table.mapv(|c| c as f64));
    Ok(labels.iter().map(|&l| mapping[l]).collect())
}

/// P with `P[i, labels[i]] = 1`.
pub fn one_hot_consensus(labels: &[usize], k: usize) -> Result<Array2<f64>> {
    let mut p = Array2::zeros((labels.len(), k));
    for (i, &l) in labels.iter().enumerate() {
        if l >= k {
            return Err(Error::Bounds(format!("label {l} at row {i} outside 0..{k}")));
        }
        p[[i, l]] = 1.0;
    }
    Ok(p)
}

/// Target index of every row of a one-hot matrix.
pub fn consensus_targets(p: &Array2<f64>) -> Result<Vec<usize>> {
    p.rows()
        .into_iter()
        .enumerate()
        .map(|(i, r)| {
            let ones: Vec<usize> = r
                .iter()
                .enumerate()
                .filter(|(_, &v)| v == 1.0)
                .map(|(j, _)| j)
                .collect();
            let zeros = r.iter().filter(|&&v| v == 0.0).count();
            if ones.len() != 1 || zeros + 1 != r.len() {
                return Err(Error::Contract(format!("consensus row {i} is not one-hot")));
            }
            Ok(ones[0])
        })
        .collect()
}

fn check_assign_shapes(z: &ArrayView2<f64>, centroids: &Array2<f64>, alpha: f64) -> Result<()> {
    if !(alpha > 0.0) {
        return Err(Error::Contract(format!("alpha must be positive, got {alpha}")));
    }
    if z.ncols() != centroids.ncols() {
        return Err(Error::Structural(format!(
            "latent width {} vs centroid width {}",
            z.ncols(),
            centroids.ncols()
        )));
    }
    Ok(())
}

/// Squared distances `‖z_i − μ_j‖²` as an N×K matrix.
fn sq_distances(z: &ArrayView2<f64>, centroids: &Array2<f64>) -> Array2<f64> {
    let zz = z.map_axis(Axis(1), |r| r.dot(&r));
    let mm = centroids.map_axis(Axis(1), |r| r.dot(&r));
    let mut d = z.dot(&centroids.t()) * -2.0;
    d += &zz.insert_axis(Axis(1));
    d += &mm;
    d.mapv_inplace(|v| v.max(0.0));
    d
}

/// Student-t kernel assignments
/// `Q_ij ∝ (1 + ‖z_i − μ_j‖² / α)^(−(α+1)/2)`, rows normalized.
pub fn soft_assign(z: &Array2<f64>, centroids: &Array2<f64>, alpha: f64) -> Result<Array2<f64>> {
    soft_assign_view(&z.view(), centroids, alpha).map(|(q, _)| q)
}

/// Also returns `u_ij = 1 + d²_ij / α` for gradient computation.
fn soft_assign_view(
    z: &ArrayView2<f64>,
    centroids: &Array2<f64>,
    alpha: f64,
) -> Result<(Array2<f64>, Array2<f64>)> {
    check_assign_shapes(z, centroids, alpha)?;
    let power = (alpha + 1.0) / 2.0;
    let u = sq_distances(z, centroids).mapv(|d| 1.0 + d / alpha);
    let mut q = u.mapv(|u| -power * u.ln());
    for mut r in q.rows_mut() {
        let max = r.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        r.mapv_inplace(|v| (v - max).exp());
        let sum = r.sum();
        r /= sum;
    }
    Ok((q, u))
}

/// KL consensus loss summed over views, with gradients.
#[derive(Debug, Clone)]
pub struct KlConsensus {
    pub loss: f64,
    /// Per-view loss terms; `loss` is their sum.
    pub per_view: Vec<f64>,
    pub q: Vec<Array2<f64>>,
    pub grad_z: Vec<Array2<f64>>,
    pub grad_centroids: Vec<Array2<f64>>,
}

/// `Σ_v mean_i Σ_j P_ij log(P_ij / Q^v_ij)` for one-hot P, i.e.
/// `−Σ_v mean_i log Q^v_{i, t(i)}`, with Q floored at [`Q_FLOOR`].
pub fn kl_consensus_value(targets: &[usize], q_views: &[Array2<f64>]) -> Result<f64> {
    let mut total = 0.0;
    for q in q_views {
        if q.nrows() != targets.len() {
            return Err(Error::Structural(format!(
                "{} assignment rows for {} targets",
                q.nrows(),
                targets.len()
            )));
        }
        let b = targets.len().max(1) as f64;
        total -= targets
            .iter()
            .enumerate()
            .map(|(i, &t)| q[[i, t]].max(Q_FLOOR).ln())
            .sum::<f64>()
            / b;
    }
    Ok(total)
}

/// Loss and analytic gradients with respect to every view's latent codes
/// and centroids. `targets[i]` is the column holding the 1 in row i of P.
pub fn kl_consensus_loss(
    targets: &[usize],
    z_views: &[ArrayView2<f64>],
    centroids: &[Array2<f64>],
    alpha: f64,
) -> Result<KlConsensus> {
    if z_views.len() != centroids.len() {
        return Err(Error::Structural(format!(
            "{} views but {} centroid sets",
            z_views.len(),
            centroids.len()
        )));
    }
    let power = (alpha + 1.0) / 2.0;
    let b = targets.len().max(1) as f64;
    let mut out = KlConsensus {
        loss: 0.0,
        per_view: Vec::with_capacity(z_views.len()),
        q: Vec::with_capacity(z_views.len()),
        grad_z: Vec::with_capacity(z_views.len()),
        grad_centroids: Vec::with_capacity(z_views.len()),
    };
    for (z, mu) in z_views.iter().zip(centroids) {
        if z.nrows() != targets.len() {
            return Err(Error::Structural(format!(
                "{} latent rows for {} targets",
                z.nrows(),
                targets.len()
            )));
        }
        let k = mu.nrows();
        if let Some(&bad) = targets.iter().find(|&&t| t >= k) {
            return Err(Error::Bounds(format!("target {bad} outside 0..{k}")));
        }
        let (q, u) = soft_assign_view(z, mu, alpha)?;
        let mut loss = 0.0;
        // w_ij = ∂L/∂(d²_ij) · 2
        let mut w = Array2::<f64>::zeros(q.raw_dim());
        for (i, &t) in targets.iter().enumerate() {
            let qt = q[[i, t]];
            loss -= qt.max(Q_FLOOR).ln();
            if qt < Q_FLOOR {
                continue;
            }
            for j in 0..k {
                let delta = if j == t { 1.0 } else { 0.0 };
                w[[i, j]] = 2.0 * (delta - q[[i, j]]) * power / (alpha * u[[i, j]]) / b;
            }
        }
        loss /= b;
        let row_sums = w.sum_axis(Axis(1)).insert_axis(Axis(1));
        let grad_z = z * &row_sums - w.dot(mu);
        let col_sums: Array1<f64> = w.sum_axis(Axis(0));
        let grad_mu = mu * &col_sums.insert_axis(Axis(1)) - w.t().dot(z);
        out.loss += loss;
        out.per_view.push(loss);
        out.q.push(q);
        out.grad_z.push(grad_z);
        out.grad_centroids.push(grad_mu);
    }
    Ok(out)
}

/// Trainable per-view centroids and the one-hot consensus target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterState {
    pub centroids: Vec<Array2<f64>>,
    pub consensus: Array2<f64>,
    pub alpha: f64,
}

impl ClusterState {
    pub fn new(centroids: Vec<Array2<f64>>, consensus: Array2<f64>, alpha: f64) -> Result<Self> {
        let k = consensus.ncols();
        if k < 2 {
            return Err(Error::Contract(format!("need at least 2 clusters, got {k}")));
        }
        consensus_targets(&consensus)?;
        for (v, mu) in centroids.iter().enumerate() {
            if mu.nrows() != k {
                return Err(Error::Structural(format!(
                    "view {v} has {} centroids for {k} clusters",
                    mu.nrows()
                )));
            }
            if mu.iter().any(|x| !x.is_finite()) {
                return Err(Error::Contract(format!("view {v} has non-finite centroids")));
            }
        }
        Ok(Self {
            centroids,
            consensus,
            alpha,
        })
    }

    pub fn k(&self) -> usize {
        self.consensus.ncols()
    }

    pub fn targets(&self) -> Vec<usize> {
        consensus_targets(&self.consensus).expect("consensus kept one-hot")
    }
}

/// Writes `instance_index,cluster_id` rows with a header.
pub fn write_assignments_csv(path: &std::path::Path, labels: &[usize]) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    writer.write_record(["instance_index", "cluster_id"])?;
    for (i, l) in labels.iter().enumerate() {
        writer.write_record([i.to_string(), l.to_string()])?;
    }
    writer
        .flush()
        .map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
    Ok(())
}

pub fn read_assignments_csv(path: &std::path::Path) -> Result<Vec<usize>> {
    let mut reader = csv::Reader::from_path(path)?;
    let mut labels = Vec::new();
    for (r, record) in reader.records().enumerate() {
        let record = record?;
        let parse = |c: usize| -> Result<usize> {
            record
                .get(c)
                .and_then(|f| f.trim().parse().ok())
                .ok_or_else(|| Error::Parse {
                    path: path.to_path_buf(),
                    row: r + 2,
                    column: c + 1,
                    message: "expected a non-negative integer".into(),
                })
        };
        let index = parse(0)?;
        if index != labels.len() {
            return Err(Error::Structural(format!(
                "{}: instance index {index} out of order",
                path.display()
            )));
        }
        labels.push(parse(1)?);
    }
    Ok(labels)
}
