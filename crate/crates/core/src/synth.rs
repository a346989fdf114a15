//! Synthetic datasets: separable Gaussian blobs seen through non-linear
//! views, and a testbed whose sensitive bit is correlated with the clusters.

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{derive_seed, seeded_rng, synthesize_sensitive, synthesize_views, MultiViewDataset, ViewTransform};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlobSpec {
    pub n: usize,
    pub k: usize,
    pub dim: usize,
    /// Distance of every blob center from the origin.
    pub separation: f64,
    /// Per-coordinate standard deviation inside a blob.
    pub spread: f64,
    pub seed: u64,
}

impl Default for BlobSpec {
    fn default() -> Self {
        Self {
            n: 1000,
            k: 4,
            dim: 6,
            separation: 6.0,
            spread: 1.0,
            seed: 0,
        }
    }
}

/// Balanced blobs; center j sits at `±separation` along axis `j mod dim`.
pub fn gaussian_blobs(spec: &BlobSpec) -> Result<(Array2<f64>, Vec<usize>)> {
    if spec.k == 0 || spec.n < spec.k {
        return Err(Error::Contract(format!(
            "need 1 <= k <= n, got k = {}, n = {}",
            spec.k, spec.n
        )));
    }
    if spec.k > 2 * spec.dim {
        return Err(Error::Contract(format!(
            "{} blobs do not fit on the axes of a {}-dimensional space",
            spec.k, spec.dim
        )));
    }
    let noise = Normal::new(0.0, spec.spread)
        .map_err(|e| Error::Contract(format!("spread: {e}")))?;
    let mut rng = seeded_rng(spec.seed);
    let labels: Vec<usize> = (0..spec.n).map(|i| i % spec.k).collect();
    let mut x = Array2::zeros((spec.n, spec.dim));
    for (i, &y) in labels.iter().enumerate() {
        let axis = y % spec.dim;
        let sign = if (y / spec.dim).is_multiple_of(2) { 1.0 } else { -1.0 };
        for d in 0..spec.dim {
            let center = if d == axis { sign * spec.separation } else { 0.0 };
            x[[i, d]] = center + noise.sample(&mut rng);
        }
    }
    Ok((x, labels))
}

/// Sigmoid and ReLU views of standardized blobs with Bernoulli(0.5) groups.
pub fn two_view_blobs(spec: &BlobSpec) -> Result<MultiViewDataset> {
    let (x, labels) = gaussian_blobs(spec)?;
    let views = synthesize_views(&x, &[ViewTransform::Sigmoid, ViewTransform::Relu])?;
    let sensitive = synthesize_sensitive(spec.n, 0.5, derive_seed(spec.seed, 1))?;
    Ok(MultiViewDataset::new("blobs", views, Some(labels), sensitive)?.standardized())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasedSpec {
    pub blobs: BlobSpec,
    /// Probability that an instance's group equals its cluster parity.
    pub rho: f64,
    /// Append the group bit (plus a little noise) as an input feature.
    pub sensitive_feature: bool,
}

impl Default for BiasedSpec {
    fn default() -> Self {
        Self {
            blobs: BlobSpec {
                n: 2000,
                k: 2,
                dim: 4,
                separation: 3.0,
                spread: 1.0,
                seed: 0,
            },
            rho: 0.9,
            sensitive_feature: true,
        }
    }
}

/// Two-view blobs whose binary group is `cluster mod 2` with probability ρ
/// and flipped otherwise. ρ = 0.5 makes groups independent of clusters;
/// ρ = 1 makes every cluster single-group.
pub fn biased_testbed(spec: &BiasedSpec) -> Result<MultiViewDataset> {
    if !(0.5..=1.0).contains(&spec.rho) {
        return Err(Error::Contract(format!("rho must lie in [0.5, 1], got {}", spec.rho)));
    }
    let (x, labels) = gaussian_blobs(&spec.blobs)?;
    let mut rng = seeded_rng(derive_seed(spec.blobs.seed, 2));
    let sensitive: Vec<usize> = labels
        .iter()
        .map(|&y| {
            let parity = y % 2;
            if rng.random_bool(spec.rho) {
                parity
            } else {
                1 - parity
            }
        })
        .collect();
    let base = if spec.sensitive_feature {
        let jitter = Normal::new(0.0, 0.1).expect("valid normal");
        let mut wide = Array2::zeros((x.nrows(), x.ncols() + 1));
        wide.slice_mut(ndarray::s![.., ..x.ncols()]).assign(&x);
        for (i, &g) in sensitive.iter().enumerate() {
            wide[[i, x.ncols()]] = g as f64 + jitter.sample(&mut rng);
        }
        wide
    } else {
        x
    };
    let views = synthesize_views(&base, &[ViewTransform::Sigmoid, ViewTransform::Relu])?;
    Ok(MultiViewDataset::new("biased", views, Some(labels), sensitive)?.standardized())
}
