//! Numerical laboratory for the KL-alignment fairness bound.
//!
//! If the consensus assignment P is independent of the sensitive attribute G
//! and a view's joint distribution over (Q, G) is within KL divergence ε of
//! the one over (P, G), then by Pinsker's inequality the two joints are
//! within total variation `sqrt(ε/2)`, and continuity of mutual information
//! keeps `I(Q; G)` small. The leading term of that bound is
//! `½ · sqrt(ε/8) · ln(2/ε)`; the remainder is only known up to `O(√ε)`, so
//! it is reported as a scale and never added in.
//!
//! Everything here uses natural logarithms.

use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

const SUM_TOLERANCE: f64 = 1e-12;
const MAX_RETRIES: usize = 1_000_000;

/// A K × |G| probability table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointDistribution {
    table: Array2<f64>,
}

impl JointDistribution {
    pub fn new(table: Array2<f64>) -> Result<Self> {
        if table.is_empty() {
            return Err(Error::Contract("joint table is empty".into()));
        }
        if table.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
            return Err(Error::Contract("joint table has negative or non-finite entries".into()));
        }
        let sum = table.sum();
        if (sum - 1.0).abs() > SUM_TOLERANCE {
            return Err(Error::Contract(format!("joint table sums to {sum}, not 1")));
        }
        Ok(Self { table })
    }

    pub fn table(&self) -> &Array2<f64> {
        &self.table
    }

    pub fn dim(&self) -> (usize, usize) {
        self.table.dim()
    }

    pub fn row_marginal(&self) -> Array1<f64> {
        self.table.sum_axis(Axis(1))
    }

    pub fn col_marginal(&self) -> Array1<f64> {
        self.table.sum_axis(Axis(0))
    }
}

fn check_probability_vector(p: &Array1<f64>, what: &str) -> Result<()> {
    if p.is_empty() || p.iter().any(|&x| !(x >= 0.0)) || (p.sum() - 1.0).abs() > SUM_TOLERANCE {
        return Err(Error::Contract(format!("{what} is not a probability vector")));
    }
    Ok(())
}

/// `table[p, g] = cluster[p] · group[g]`.
pub fn product_joint(cluster_marginal: &Array1<f64>, group_marginal: &Array1<f64>) -> Result<JointDistribution> {
    check_probability_vector(cluster_marginal, "cluster marginal")?;
    check_probability_vector(group_marginal, "group marginal")?;
    let outer = cluster_marginal
        .view()
        .insert_axis(Axis(1))
        .dot(&group_marginal.view().insert_axis(Axis(0)));
    JointDistribution::new(outer)
}

fn same_dims(q: &JointDistribution, p: &JointDistribution) -> Result<()> {
    if q.dim() != p.dim() {
        return Err(Error::Structural(format!(
            "joint tables differ in shape: {:?} vs {:?}",
            q.dim(),
            p.dim()
        )));
    }
    Ok(())
}

/// `Σ q log(q / p)` with `0 log 0 = 0`.
pub fn kl_joint(q: &JointDistribution, p: &JointDistribution) -> Result<f64> {
    same_dims(q, p)?;
    let mut kl = 0.0;
    for ((r, c), &qv) in q.table.indexed_iter() {
        if qv == 0.0 {
            continue;
        }
        let pv = p.table[[r, c]];
        if pv == 0.0 {
            return Err(Error::InfiniteDivergence { row: r, col: c });
        }
        kl += qv * (qv / pv).ln();
    }
    Ok(kl.max(0.0))
}

/// Half the L1 distance between the tables.
pub fn total_variation(q: &JointDistribution, p: &JointDistribution) -> Result<f64> {
    same_dims(q, p)?;
    let l1: f64 = q
        .table
        .iter()
        .zip(p.table.iter())
        .map(|(a, b)| (a - b).abs())
        .sum();
    Ok((0.5 * l1).min(1.0))
}

/// `I(P; G)` of the joint table.
pub fn mutual_information(j: &JointDistribution) -> f64 {
    let rows = j.row_marginal();
    let cols = j.col_marginal();
    let mut mi = 0.0;
    for ((r, c), &v) in j.table.indexed_iter() {
        if v > 0.0 {
            mi += v * (v / (rows[r] * cols[c])).ln();
        }
    }
    mi.max(0.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TheoremBound {
    pub epsilon: f64,
    /// `½ · sqrt(ε/8) · ln(2/ε)`
    pub leading_term: f64,
    /// `sqrt(ε/2)`, the scale of the unspecified remainder.
    pub sqrt_eps_scale: f64,
}

pub fn theorem_bound(epsilon: f64) -> Result<TheoremBound> {
    if !(epsilon > 0.0 && epsilon < 2.0) {
        return Err(Error::Domain(format!("epsilon must lie in (0, 2), got {epsilon}")));
    }
    Ok(TheoremBound {
        epsilon,
        leading_term: 0.5 * (epsilon / 8.0).sqrt() * (2.0 / epsilon).ln(),
        sqrt_eps_scale: (epsilon / 2.0).sqrt(),
    })
}

fn trial_rng(seed: u64, trial: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(trial);
    rng
}

fn dirichlet_flat<R: Rng + ?Sized>(cells: usize, rng: &mut R) -> Vec<f64> {
    let gamma = Gamma::new(1.0, 1.0).expect("valid gamma");
    let mut draws: Vec<f64> = (0..cells).map(|_| gamma.sample(rng)).collect();
    let sum: f64 = draws.iter().sum();
    for d in &mut draws {
        *d /= sum;
    }
    draws
}

/// Draws one joint with `KL(sample ‖ base) ≤ ε`.
///
/// A uniform Dirichlet point `s` and a step `t ~ U(0, 1]` define the
/// candidate `base + t (s − base)`; the step is halved until the candidate
/// satisfies the KL constraint.
fn sample_one<R: Rng + ?Sized>(base: &JointDistribution, epsilon: f64, rng: &mut R) -> Result<JointDistribution> {
    let (k, g) = base.dim();
    let target = dirichlet_flat(k * g, rng);
    let mut t: f64 = 1.0 - rng.random::<f64>();
    for _ in 0..MAX_RETRIES {
        let mut table = Array2::zeros((k, g));
        for ((cell, &b), &s) in table.iter_mut().zip(base.table.iter()).zip(&target) {
            *cell = b + t * (s - b);
        }
        let sum = table.sum();
        table /= sum;
        let candidate = JointDistribution::new(table)?;
        if kl_joint(&candidate, base)? <= epsilon {
            return Ok(candidate);
        }
        t *= 0.5;
    }
    Err(Error::Sampling(format!(
        "no sample within KL {epsilon} after {MAX_RETRIES} retries"
    )))
}

/// `trials` joints within KL divergence `epsilon` of the product joint `base`.
/// Trial `i` draws from its own RNG stream, so samples do not depend on how
/// trials are scheduled.
pub fn sample_near_independent(
    base: &JointDistribution,
    epsilon: f64,
    trials: usize,
    seed: u64,
) -> Result<Vec<JointDistribution>> {
    if !(epsilon > 0.0) {
        return Err(Error::Domain(format!("epsilon must be positive, got {epsilon}")));
    }
    let product = product_joint(&base.row_marginal(), &base.col_marginal())?;
    if total_variation(&product, base)? > 1e-12 {
        return Err(Error::Contract("base distribution is not a product joint".into()));
    }
    (0..trials)
        .map(|i| sample_one(base, epsilon, &mut trial_rng(seed, i as u64)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub epsilon: f64,
    pub trials: usize,
    pub max_i: f64,
    pub mean_i: f64,
    pub pinsker_pass_rate: f64,
    pub leading_term: f64,
    pub sqrt_eps_scale: f64,
}

/// Empirical mutual information and Pinsker checks for each ε, using the
/// uniform product joint on K × |G| as the independent reference.
pub fn sweep(k: usize, g: usize, epsilons: &[f64], trials: usize, seed: u64) -> Result<Vec<SweepRow>> {
    if k == 0 || g == 0 || trials == 0 {
        return Err(Error::Contract("k, g and trials must be positive".into()));
    }
    let base = product_joint(
        &Array1::from_elem(k, 1.0 / k as f64),
        &Array1::from_elem(g, 1.0 / g as f64),
    )?;
    epsilons
        .iter()
        .map(|&epsilon| {
            let bound = theorem_bound(epsilon)?;
            let samples = sample_near_independent(&base, epsilon, trials, seed)?;
            let mut max_i: f64 = 0.0;
            let mut sum_i = 0.0;
            let mut passes = 0usize;
            for q in &samples {
                let mi = mutual_information(q);
                max_i = max_i.max(mi);
                sum_i += mi;
                let kl = kl_joint(q, &base)?;
                if total_variation(q, &base)? <= (kl / 2.0).sqrt() + 1e-15 {
                    passes += 1;
                }
            }
            Ok(SweepRow {
                epsilon,
                trials,
                max_i,
                mean_i: sum_i / trials as f64,
                pinsker_pass_rate: passes as f64 / trials as f64,
                leading_term: bound.leading_term,
                sqrt_eps_scale: bound.sqrt_eps_scale,
            })
        })
        .collect()
}

pub const BOUND_REPORT_HEADER: [&str; 7] = [
    "epsilon",
    "trials",
    "max_I",
    "mean_I",
    "pinsker_pass_rate",
    "leading_term",
    "sqrt_eps_scale",
];

pub fn write_bound_report(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    writer.write_record(BOUND_REPORT_HEADER)?;
    for r in rows {
        writer.write_record([
            r.epsilon.to_string(),
            r.trials.to_string(),
            r.max_i.to_string(),
            r.mean_i.to_string(),
            r.pinsker_pass_rate.to_string(),
            r.leading_term.to_string(),
            r.sqrt_eps_scale.to_string(),
        ])?;
    }
    writer.flush().map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

pub fn read_bound_report(path: &Path) -> Result<Vec<SweepRow>> {
    let mut reader = csv::Reader::from_path(path)?;
    let mut rows = Vec::new();
    for (r, record) in reader.records().enumerate() {
        let record = record?;
        let field = |c: usize| -> Result<f64> {
            record
                .get(c)
                .and_then(|f| f.parse::<f64>().ok())
                .ok_or_else(|| Error::Parse {
                    path: path.to_path_buf(),
                    row: r + 2,
                    column: c + 1,
                    message: "expected a number".into(),
                })
        };
        rows.push(SweepRow {
            epsilon: field(0)?,
            trials: field(1)? as usize,
            max_i: field(2)?,
            mean_i: field(3)?,
            pinsker_pass_rate: field(4)?,
            leading_term: field(5)?,
            sqrt_eps_scale: field(6)?,
        });
    }
    Ok(rows)
}
