//! End-to-end training: autoencoder pretraining, consensus initialization,
//! the joint minimax loop with periodic consensus refresh, and final
//! assignment.
//!
//! Each mini-batch step computes the reconstruction loss `L_R`, the KL
//! consensus loss `L_C` and the discriminator cross-entropy `L_F`, then
//! takes one Adam step for every trainable group. Encoders descend
//! `L_R + λ_C·L_C` and ascend `λ_F·coeff·L_F` through the reversal layer;
//! the discriminator descends `λ_F·L_F`; centroids descend `λ_C·L_C`.

use std::path::Path;

use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::adversary::{grl_coeff, split_logit_grads, AdversarySchedule};
use crate::cluster::{
    align_labels, concat_views, kl_consensus_loss, kmeans, one_hot_consensus, soft_assign,
    split_columns, ClusterState,
};
use crate::data::{derive_seed, make_batches, seeded_rng, standardize, MultiViewDataset};
use crate::metrics::MetricsReport;
use crate::nn::{
    config_hash, cross_entropy_loss, grl_backward, mse_loss, AdamConfig, AdamState, Checkpoint,
    CheckpointEntry, DenseNetwork, Gradients, NetworkShape,
};
use crate::{Error, Result};

// seed tags
const TAG_ENCODER: u64 = 0x100;
const TAG_DECODER: u64 = 0x200;
const TAG_DISCRIMINATOR: u64 = 0x300;
const TAG_PRETRAIN_BATCH: u64 = 0x400;
const TAG_TRAIN_BATCH: u64 = 0x500;
const TAG_INIT_KMEANS: u64 = 0x600;
const TAG_REFRESH: u64 = 0x700;
const TAG_FINAL: u64 = 0x800;
const TAG_CENTROIDS: u64 = 0x900;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub encoder_hidden: Vec<usize>,
    pub latent_dim: usize,
    pub discriminator_hidden: Vec<usize>,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            encoder_hidden: vec![256, 64],
            latent_dim: 10,
            discriminator_hidden: vec![64],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CentroidInit {
    /// k-means on each view's latent codes, relabelled to match the consensus.
    #[default]
    Kmeans,
    /// Gaussian draws matching each latent column's mean and spread.
    Gaussian,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleUnit {
    #[default]
    Epoch,
    Minibatch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinalAssignment {
    #[default]
    Kmeans,
    /// argmax of the view-averaged soft assignments.
    MeanQArgmax,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub clusters: usize,
    pub lambda_c: f64,
    pub lambda_f: f64,
    pub update_interval: usize,
    pub epochs: usize,
    pub beta: f64,
    pub alpha: f64,
    pub batch_size: usize,
    pub pretrain_epochs: usize,
    pub lr: f64,
    pub seed: u64,
    pub architecture: Architecture,
    pub centroid_init: CentroidInit,
    pub schedule_unit: ScheduleUnit,
    pub final_assignment: FinalAssignment,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            clusters: 2,
            lambda_c: 0.1,
            lambda_f: 0.01,
            update_interval: 50,
            epochs: 1000,
            beta: 10.0,
            alpha: 1.0,
            batch_size: 256,
            pretrain_epochs: 200,
            lr: 1e-3,
            seed: 0,
            architecture: Architecture::default(),
            centroid_init: CentroidInit::default(),
            schedule_unit: ScheduleUnit::default(),
            final_assignment: FinalAssignment::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.clusters < 2 {
            return bad(format!("clusters must be at least 2, got {}", self.clusters));
        }
        if self.epochs == 0 {
            return bad("epochs must be positive".into());
        }
        if self.update_interval == 0 || self.update_interval > self.epochs {
            return bad(format!(
                "update_interval must lie in 1..={}, got {}",
                self.epochs, self.update_interval
            ));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        for (name, v) in [("beta", self.beta), ("alpha", self.alpha), ("lr", self.lr)] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        for (name, v) in [("lambda_c", self.lambda_c), ("lambda_f", self.lambda_f)] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be non-negative, got {v}"));
            }
        }
        if self.architecture.latent_dim == 0 || self.architecture.encoder_hidden.contains(&0) {
            return bad("layer widths must be positive".into());
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn hash(&self) -> Result<String> {
        config_hash(self)
    }
}

/// Loss combinations of the ablation study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    /// L_R + L_C, no fairness gradient.
    A,
    /// L_F + L_C, decoders frozen after pretraining.
    B,
    /// L_R + L_F, no consensus loss.
    C,
    /// All three losses.
    D,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::A, Variant::B, Variant::C, Variant::D];

    /// Which of (L_R, L_F, L_C) are active.
    pub fn components(self) -> (bool, bool, bool) {
        match self {
            Variant::A => (true, false, true),
            Variant::B => (false, true, true),
            Variant::C => (true, true, false),
            Variant::D => (true, true, true),
        }
    }

    pub fn weights(self, config: &TrainConfig) -> LossWeights {
        let (r, f, c) = self.components();
        LossWeights {
            reconstruction: r,
            lambda_c: if c { config.lambda_c } else { 0.0 },
            lambda_f: if f { config.lambda_f } else { 0.0 },
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Variant::A => "A",
            Variant::B => "B",
            Variant::C => "C",
            Variant::D => "D",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "A" => Ok(Variant::A),
            "B" => Ok(Variant::B),
            "C" => Ok(Variant::C),
            "D" => Ok(Variant::D),
            other => Err(Error::Config(format!("unknown variant {other:?}"))),
        }
    }
}

/// Effective loss weights of a run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub reconstruction: bool,
    pub lambda_c: f64,
    pub lambda_f: f64,
}

impl LossWeights {
    pub fn full(config: &TrainConfig) -> Self {
        Variant::D.weights(config)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub acc: f64,
    pub nmi: f64,
    pub bal: f64,
}

/// One epoch of the joint phase; losses are sample-weighted batch means.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub epoch: usize,
    pub l_r: f64,
    pub l_c: f64,
    pub l_f: f64,
    pub coeff: f64,
    pub metrics: Option<EpochMetrics>,
}

pub const TRACE_HEADER: [&str; 8] = ["epoch", "L_R", "L_C", "L_F", "coeff", "ACC", "NMI", "BAL"];

pub fn write_trace_csv(path: &Path, rows: &[TraceRow]) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    writer.write_record(TRACE_HEADER)?;
    for r in rows {
        let (acc, nmi, bal) = match r.metrics {
            Some(m) => (m.acc.to_string(), m.nmi.to_string(), m.bal.to_string()),
            None => (String::new(), String::new(), String::new()),
        };
        writer.write_record([
            r.epoch.to_string(),
            r.l_r.to_string(),
            r.l_c.to_string(),
            r.l_f.to_string(),
            r.coeff.to_string(),
            acc,
            nmi,
            bal,
        ])?;
    }
    writer.flush().map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

pub fn read_trace_csv(path: &Path) -> Result<Vec<TraceRow>> {
    let mut reader = csv::Reader::from_path(path)?;
    let mut rows = Vec::new();
    for (r, record) in reader.records().enumerate() {
        let record = record?;
        let parse_err = |c: usize| Error::Parse {
            path: path.to_path_buf(),
            row: r + 2,
            column: c + 1,
            message: "expected a number".into(),
        };
        let num = |c: usize| -> Result<f64> {
            record.get(c).and_then(|f| f.parse().ok()).ok_or_else(|| parse_err(c))
        };
        let metrics = match record.get(5) {
            Some(f) if !f.is_empty() => Some(EpochMetrics {
                acc: num(5)?,
                nmi: num(6)?,
                bal: num(7)?,
            }),
            _ => None,
        };
        rows.push(TraceRow {
            epoch: record.get(0).and_then(|f| f.parse().ok()).ok_or_else(|| parse_err(0))?,
            l_r: num(1)?,
            l_c: num(2)?,
            l_f: num(3)?,
            coeff: num(4)?,
            metrics,
        });
    }
    Ok(rows)
}

/// L2 norms of the gradients applied in one step, per tensor.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradNorms {
    /// `[view][tensor]`, tensors ordered W0, b0, W1, b1, …
    pub encoders: Vec<Vec<f64>>,
    pub decoders: Vec<Vec<f64>>,
    pub centroids: Vec<f64>,
    pub discriminator: Vec<f64>,
}

fn tensor_norms(g: &Gradients) -> Vec<f64> {
    g.slices()
        .iter()
        .map(|s| s.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchReport {
    pub l_r: f64,
    pub l_c: f64,
    pub l_f: f64,
    pub coeff: f64,
    pub grad_norms: GradNorms,
}

fn non_finite(term: &str, context: String) -> Error {
    Error::NonFinite {
        term: term.to_string(),
        context,
    }
}

/// Everything produced by a training run.
#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub config: TrainConfig,
    pub weights: LossWeights,
    pub encoders: Vec<DenseNetwork>,
    pub decoders: Vec<DenseNetwork>,
    pub discriminator: DenseNetwork,
    pub cluster_state: ClusterState,
    pub assignments: Vec<usize>,
    pub trace: Vec<TraceRow>,
    /// Full-data L_R after each pretraining epoch.
    pub pretrain_trace: Vec<f64>,
    /// Epochs after which the consensus target was recomputed.
    pub refresh_epochs: Vec<usize>,
}

impl TrainedModel {
    pub fn encode(&self, data: &MultiViewDataset) -> Result<Vec<Array2<f64>>> {
        encode_views(&self.encoders, data)
    }

    pub fn fused_latent(&self, data: &MultiViewDataset) -> Result<Array2<f64>> {
        concat_views(&self.encode(data)?)
    }

    pub fn metrics(&self, data: &MultiViewDataset) -> Result<MetricsReport> {
        MetricsReport::compute(&self.assignments, data.labels.as_deref(), &data.sensitive)
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let mut ckpt = Checkpoint::new(self.config.hash()?);
        for (v, net) in self.encoders.iter().enumerate() {
            ckpt.networks.push(CheckpointEntry {
                name: format!("encoder{v}"),
                network: net.clone(),
                adam: None,
            });
        }
        for (v, net) in self.decoders.iter().enumerate() {
            ckpt.networks.push(CheckpointEntry {
                name: format!("decoder{v}"),
                network: net.clone(),
                adam: None,
            });
        }
        ckpt.networks.push(CheckpointEntry {
            name: "discriminator".into(),
            network: self.discriminator.clone(),
            adam: None,
        });
        ckpt.centroids = self.cluster_state.centroids.clone();
        Ok(ckpt)
    }
}

pub fn encode_views(encoders: &[DenseNetwork], data: &MultiViewDataset) -> Result<Vec<Array2<f64>>> {
    if encoders.len() != data.n_views() {
        return Err(Error::Structural(format!(
            "{} encoders for {} views",
            encoders.len(),
            data.n_views()
        )));
    }
    encoders
        .iter()
        .zip(&data.views)
        .map(|(e, x)| e.predict(x))
        .collect()
}

/// Owns every network and optimizer state of one run.
pub struct Trainer<'a> {
    data: &'a MultiViewDataset,
    config: TrainConfig,
    weights: LossWeights,
    batch_size: usize,
    n_groups: usize,
    pub encoders: Vec<DenseNetwork>,
    pub decoders: Vec<DenseNetwork>,
    pub discriminator: DenseNetwork,
    encoder_adam: Vec<AdamState>,
    decoder_adam: Vec<AdamState>,
    centroid_adam: Vec<AdamState>,
    discriminator_adam: AdamState,
    state: Option<ClusterState>,
    global_step: u64,
    pretrain_trace: Vec<f64>,
    trace: Vec<TraceRow>,
    refresh_epochs: Vec<usize>,
}

impl<'a> Trainer<'a> {
    pub fn new(data: &'a MultiViewDataset, config: TrainConfig, weights: LossWeights) -> Result<Self> {
        config.validate()?;
        data.validate()?;
        if weights.lambda_f > 0.0 {
            data.require_fairness_groups()?;
        }
        let n = data.n_samples();
        if config.clusters > n {
            return Err(Error::Bounds(format!(
                "{} clusters for {n} instances",
                config.clusters
            )));
        }
        let arch = &config.architecture;
        let mut encoders = Vec::with_capacity(data.n_views());
        let mut decoders = Vec::with_capacity(data.n_views());
        for (v, &d) in data.view_dims().iter().enumerate() {
            let mut rng = seeded_rng(derive_seed(config.seed, TAG_ENCODER + v as u64));
            encoders.push(NetworkShape::encoder(d, &arch.encoder_hidden, arch.latent_dim).build(&mut rng)?);
            let mut rng = seeded_rng(derive_seed(config.seed, TAG_DECODER + v as u64));
            decoders.push(NetworkShape::decoder(arch.latent_dim, &arch.encoder_hidden, d).build(&mut rng)?);
        }
        let n_groups = data.n_groups().max(2);
        let fused_dim = arch.latent_dim * data.n_views();
        let mut rng = seeded_rng(derive_seed(config.seed, TAG_DISCRIMINATOR));
        let discriminator =
            NetworkShape::discriminator(fused_dim, &arch.discriminator_hidden, n_groups).build(&mut rng)?;
        let adam = AdamConfig::with_lr(config.lr);
        Ok(Self {
            batch_size: config.batch_size.min(n),
            encoder_adam: encoders.iter().map(|e| AdamState::for_network(adam, e)).collect(),
            decoder_adam: decoders.iter().map(|d| AdamState::for_network(adam, d)).collect(),
            centroid_adam: Vec::new(),
            discriminator_adam: AdamState::for_network(adam, &discriminator),
            encoders,
            decoders,
            discriminator,
            data,
            config,
            weights,
            n_groups,
            state: None,
            global_step: 0,
            pretrain_trace: Vec::new(),
            trace: Vec::new(),
            refresh_epochs: Vec::new(),
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn cluster_state(&self) -> Option<&ClusterState> {
        self.state.as_ref()
    }

    pub fn pretrain_trace(&self) -> &[f64] {
        &self.pretrain_trace
    }

    fn adam_config(&self) -> AdamConfig {
        AdamConfig::with_lr(self.config.lr)
    }

    /// Full-data reconstruction loss of each view.
    pub fn reconstruction_losses(&self) -> Result<Vec<f64>> {
        self.encoders
            .iter()
            .zip(&self.decoders)
            .zip(&self.data.views)
            .map(|((e, d), x)| {
                let x_hat = d.predict(&e.predict(x)?)?;
                Ok(mse_loss(&x_hat, x)?.0)
            })
            .collect()
    }

    /// Trains each autoencoder on L_R alone for `pretrain_epochs` epochs.
    pub fn pretrain(&mut self) -> Result<()> {
        let n = self.data.n_samples();
        for epoch in 0..self.config.pretrain_epochs {
            for v in 0..self.data.n_views() {
                let tag = TAG_PRETRAIN_BATCH + ((epoch as u64) << 8) + v as u64;
                let plan = make_batches(n, self.batch_size, derive_seed(self.config.seed, tag))?;
                for rows in plan.batches() {
                    let x = self.data.views[v].select(Axis(0), rows);
                    let (z, enc_tape) = self.encoders[v].forward(&x)?;
                    let (x_hat, dec_tape) = self.decoders[v].forward(&z)?;
                    let (loss, grad) = mse_loss(&x_hat, &x)?;
                    if !loss.is_finite() {
                        return Err(non_finite("L_R", format!("pretraining view {v}, epoch {}", epoch + 1)));
                    }
                    let (dec_grads, dz) = self.decoders[v].backward(&dec_tape, &grad)?;
                    let (enc_grads, _) = self.encoders[v].backward(&enc_tape, &dz)?;
                    let term = format!("L_R (pretraining view {v})");
                    self.decoders[v].adam_step(&dec_grads, &mut self.decoder_adam[v], &term)?;
                    self.encoders[v].adam_step(&enc_grads, &mut self.encoder_adam[v], &term)?;
                }
            }
            self.pretrain_trace.push(self.reconstruction_losses()?.iter().sum());
        }
        Ok(())
    }

    pub fn latents(&self) -> Result<Vec<Array2<f64>>> {
        encode_views(&self.encoders, self.data)
    }

    /// P from k-means on the fused codes; per-view centroids per `centroid_init`.
    pub fn init_consensus(&mut self) -> Result<()> {
        let k = self.config.clusters;
        let latents = self.latents()?;
        let fused = concat_views(&latents)?;
        let km = kmeans(&fused, k, derive_seed(self.config.seed, TAG_INIT_KMEANS))?;
        let consensus = one_hot_consensus(&km.labels, k)?;
        let mut centroids = Vec::with_capacity(latents.len());
        for (v, z) in latents.iter().enumerate() {
            let seed = derive_seed(self.config.seed, TAG_CENTROIDS + v as u64);
            let mu = match self.config.centroid_init {
                CentroidInit::Kmeans => {
                    let view_km = kmeans(z, k, seed)?;
                    let aligned = align_labels(&view_km.labels, &km.labels, k)?;
                    let mut mu = Array2::zeros(view_km.centroids.raw_dim());
                    for (old, new) in view_km.labels.iter().zip(&aligned) {
                        mu.row_mut(*new).assign(&view_km.centroids.row(*old));
                    }
                    mu
                }
                CentroidInit::Gaussian => gaussian_centroids(z, k, seed),
            };
            centroids.push(mu);
        }
        let adam = self.adam_config();
        self.centroid_adam = centroids
            .iter()
            .map(|mu| AdamState::new(adam, &[mu.len()]))
            .collect();
        // the joint phase starts from fresh optimizer moments
        self.encoder_adam = self.encoders.iter().map(|e| AdamState::for_network(adam, e)).collect();
        self.decoder_adam = self.decoders.iter().map(|d| AdamState::for_network(adam, d)).collect();
        self.discriminator_adam = AdamState::for_network(adam, &self.discriminator);
        self.state = Some(ClusterState::new(centroids, consensus, self.config.alpha)?);
        Ok(())
    }

    fn batches_per_epoch(&self) -> usize {
        self.data.n_samples().div_ceil(self.batch_size)
    }

    /// Reversal coefficient for the next step of `epoch` (1-based).
    fn coefficient(&self, epoch: usize) -> Result<f64> {
        let schedule = match self.config.schedule_unit {
            ScheduleUnit::Epoch => {
                AdversarySchedule::new(self.config.beta, self.config.epochs as u64, epoch as u64 - 1)?
            }
            ScheduleUnit::Minibatch => {
                let total = (self.config.epochs * self.batches_per_epoch()) as u64;
                AdversarySchedule::new(self.config.beta, total, self.global_step.min(total))?
            }
        };
        Ok(grl_coeff(&schedule))
    }

    /// One optimizer step on the given rows.
    pub fn step_batch(&mut self, rows: &[usize], coeff: f64, context: &str) -> Result<BatchReport> {
        let state = self
            .state
            .as_ref()
            .ok_or_else(|| Error::Contract("consensus must be initialized before training".into()))?;
        let all_targets = state.targets();
        let targets: Vec<usize> = rows.iter().map(|&i| all_targets[i]).collect();
        let groups: Vec<usize> = rows.iter().map(|&i| self.data.sensitive[i]).collect();
        let n_views = self.data.n_views();
        let LossWeights {
            reconstruction,
            lambda_c,
            lambda_f,
        } = self.weights;

        let mut xs = Vec::with_capacity(n_views);
        let mut zs = Vec::with_capacity(n_views);
        let mut enc_tapes = Vec::with_capacity(n_views);
        for v in 0..n_views {
            let x = self.data.views[v].select(Axis(0), rows);
            let (z, tape) = self.encoders[v].forward(&x)?;
            xs.push(x);
            zs.push(z);
            enc_tapes.push(tape);
        }

        // reconstruction
        let mut l_r = 0.0;
        let mut dz_total: Vec<Array2<f64>> = zs.iter().map(|z| Array2::zeros(z.raw_dim())).collect();
        let mut dec_grads = Vec::with_capacity(n_views);
        for v in 0..n_views {
            if reconstruction {
                let (x_hat, tape) = self.decoders[v].forward(&zs[v])?;
                let (loss, grad) = mse_loss(&x_hat, &xs[v])?;
                let (g, dz) = self.decoders[v].backward(&tape, &grad)?;
                l_r += loss;
                dz_total[v] += &dz;
                dec_grads.push(g);
            } else {
                let x_hat = self.decoders[v].predict(&zs[v])?;
                l_r += mse_loss(&x_hat, &xs[v])?.0;
            }
        }
        if !l_r.is_finite() {
            return Err(non_finite("L_R", context.to_string()));
        }

        // consensus clustering
        let views: Vec<ArrayView2<f64>> = zs.iter().map(|z| z.view()).collect();
        let kl = kl_consensus_loss(&targets, &views, &state.centroids, state.alpha)?;
        if !kl.loss.is_finite() {
            return Err(non_finite("L_C", context.to_string()));
        }
        if lambda_c > 0.0 {
            for (acc, g) in dz_total.iter_mut().zip(&kl.grad_z) {
                acc.scaled_add(lambda_c, g);
            }
        }

        // adversarial fairness on the fused codes
        let fused = concat_views(&zs)?;
        let (probs, disc_tape) = self.discriminator.forward(&fused)?;
        let (l_f, logit_grads) = cross_entropy_loss(&probs, &groups)?;
        if !l_f.is_finite() {
            return Err(non_finite("L_F", context.to_string()));
        }
        let mut disc_grads = None;
        if lambda_f > 0.0 {
            let (disc_logit_grads, _) = split_logit_grads(&logit_grads, coeff, lambda_f)?;
            let (g, dz_fused) = self.discriminator.backward_from_logits(&disc_tape, &disc_logit_grads)?;
            let reversed = grl_backward(&dz_fused, coeff);
            let widths: Vec<usize> = zs.iter().map(|z| z.ncols()).collect();
            for (acc, part) in dz_total.iter_mut().zip(split_columns(&reversed, &widths)?) {
                *acc += &part;
            }
            disc_grads = Some(g);
        }

        // parameter updates
        let mut norms = GradNorms::default();
        for v in 0..n_views {
            let (g, _) = self.encoders[v].backward(&enc_tapes[v], &dz_total[v])?;
            norms.encoders.push(tensor_norms(&g));
            self.encoders[v].adam_step(&g, &mut self.encoder_adam[v], "L_R + L_C + L_F (encoder)")?;
        }
        for (v, g) in dec_grads.iter().enumerate() {
            norms.decoders.push(tensor_norms(g));
            self.decoders[v].adam_step(g, &mut self.decoder_adam[v], "L_R (decoder)")?;
        }
        let state = self.state.as_mut().expect("checked above");
        if lambda_c > 0.0 {
            for (v, g) in kl.grad_centroids.iter().enumerate() {
                let g = g * lambda_c;
                norms.centroids.push(g.iter().map(|x| x * x).sum::<f64>().sqrt());
                let mu = state.centroids[v].as_slice_mut().expect("standard layout");
                self.centroid_adam[v].step(&mut [mu], &[g.as_slice().expect("standard layout")], "L_C (centroids)")?;
                if mu.iter().any(|x| !x.is_finite()) {
                    return Err(non_finite("L_C", format!("{context}: centroids of view {v}")));
                }
            }
        }
        if let Some(g) = disc_grads {
            norms.discriminator = tensor_norms(&g);
            self.discriminator
                .adam_step(&g, &mut self.discriminator_adam, "L_F (discriminator)")?;
        }
        self.global_step += 1;
        Ok(BatchReport {
            l_r,
            l_c: kl.loss,
            l_f,
            coeff,
            grad_norms: norms,
        })
    }

    /// Runs epoch `epoch` (1-based) and refreshes P when `epoch % T == 0`.
    pub fn run_epoch(&mut self, epoch: usize) -> Result<TraceRow> {
        let n = self.data.n_samples();
        let tag = TAG_TRAIN_BATCH + ((epoch as u64) << 8);
        let plan = make_batches(n, self.batch_size, derive_seed(self.config.seed, tag))?;
        let (mut l_r, mut l_c, mut l_f, mut coeff) = (0.0, 0.0, 0.0, 0.0);
        for (b, rows) in plan.batches().enumerate() {
            coeff = self.coefficient(epoch)?;
            let report = self.step_batch(rows, coeff, &format!("epoch {epoch}, batch {}", b + 1))?;
            let w = rows.len() as f64 / n as f64;
            l_r += w * report.l_r;
            l_c += w * report.l_c;
            l_f += w * report.l_f;
        }
        let mut row = TraceRow {
            epoch,
            l_r,
            l_c,
            l_f,
            coeff,
            metrics: None,
        };
        if epoch.is_multiple_of(self.config.update_interval) {
            let labels = self.refresh_consensus(epoch)?;
            if let Some(truth) = &self.data.labels {
                let report = MetricsReport::compute(&labels, Some(truth), &self.data.sensitive)?;
                row.metrics = Some(EpochMetrics {
                    acc: report.acc.unwrap_or(0.0),
                    nmi: report.nmi.unwrap_or(0.0),
                    bal: report.bal,
                });
            }
        }
        self.trace.push(row);
        Ok(row)
    }

    /// Recomputes P by k-means on the full fused codes. New cluster ids are
    /// matched to the previous ones so the trained centroids keep their meaning.
    pub fn refresh_consensus(&mut self, epoch: usize) -> Result<Vec<usize>> {
        let k = self.config.clusters;
        let fused = concat_views(&self.latents()?)?;
        let km = kmeans(&fused, k, derive_seed(self.config.seed, TAG_REFRESH + epoch as u64))?;
        let state = self
            .state
            .as_mut()
            .ok_or_else(|| Error::Contract("consensus must be initialized before refresh".into()))?;
        let labels = align_labels(&km.labels, &state.targets(), k)?;
        state.consensus = one_hot_consensus(&labels, k)?;
        self.refresh_epochs.push(epoch);
        Ok(labels)
    }

    fn final_assignments(&self) -> Result<Vec<usize>> {
        let latents = self.latents()?;
        let state = self.state.as_ref().expect("initialized");
        match self.config.final_assignment {
            FinalAssignment::Kmeans => {
                let fused = concat_views(&latents)?;
                Ok(kmeans(&fused, self.config.clusters, derive_seed(self.config.seed, TAG_FINAL))?.labels)
            }
            FinalAssignment::MeanQArgmax => {
                let mut mean = Array2::<f64>::zeros((self.data.n_samples(), self.config.clusters));
                for (z, mu) in latents.iter().zip(&state.centroids) {
                    mean += &soft_assign(z, mu, state.alpha)?;
                }
                Ok(mean
                    .rows()
                    .into_iter()
                    .map(|r| {
                        r.iter()
                            .enumerate()
                            .fold((0, f64::NEG_INFINITY), |best, (j, &q)| if q > best.1 { (j, q) } else { best })
                            .0
                    })
                    .collect())
            }
        }
    }

    pub fn finish(self) -> Result<TrainedModel> {
        let assignments = self.final_assignments()?;
        Ok(TrainedModel {
            config: self.config,
            weights: self.weights,
            encoders: self.encoders,
            decoders: self.decoders,
            discriminator: self.discriminator,
            cluster_state: self.state.expect("initialized"),
            assignments,
            trace: self.trace,
            pretrain_trace: self.pretrain_trace,
            refresh_epochs: self.refresh_epochs,
        })
    }

    /// Pretraining, consensus initialization, `epochs` joint epochs, final assignment.
    pub fn run(mut self) -> Result<TrainedModel> {
        self.pretrain()?;
        self.init_consensus()?;
        for epoch in 1..=self.config.epochs {
            self.run_epoch(epoch)?;
        }
        self.finish()
    }

    pub fn n_groups(&self) -> usize {
        self.n_groups
    }
}

fn gaussian_centroids(z: &Array2<f64>, k: usize, seed: u64) -> Array2<f64> {
    use rand_distr::{Distribution, StandardNormal};
    let n = z.nrows().max(1) as f64;
    let mean = z.sum_axis(Axis(0)) / n;
    let std = z
        .axis_iter(Axis(1))
        .zip(mean.iter())
        .map(|(c, m)| (c.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n).sqrt())
        .collect::<Vec<_>>();
    let mut rng = seeded_rng(seed);
    Array2::from_shape_fn((k, z.ncols()), |(_, d)| {
        let e: f64 = StandardNormal.sample(&mut rng);
        mean[d] + std[d] * e
    })
}

/// Pretrained autoencoders only; the discriminator is untouched.
pub fn pretrain(data: &MultiViewDataset, config: &TrainConfig) -> Result<(Vec<DenseNetwork>, Vec<DenseNetwork>, Vec<f64>)> {
    let mut trainer = Trainer::new(data, config.clone(), LossWeights::full(config))?;
    trainer.pretrain()?;
    let trace = trainer.pretrain_trace.clone();
    Ok((trainer.encoders, trainer.decoders, trace))
}

/// Consensus state from given encoders, following `config.centroid_init`.
pub fn init_consensus(
    encoders: &[DenseNetwork],
    data: &MultiViewDataset,
    config: &TrainConfig,
) -> Result<ClusterState> {
    let mut trainer = Trainer::new(data, config.clone(), LossWeights::full(config))?;
    if encoders.len() != trainer.encoders.len() {
        return Err(Error::Structural(format!(
            "{} encoders for {} views",
            encoders.len(),
            trainer.encoders.len()
        )));
    }
    trainer.encoders = encoders.to_vec();
    trainer.init_consensus()?;
    Ok(trainer.state.expect("initialized"))
}

pub fn train(data: &MultiViewDataset, config: &TrainConfig) -> Result<TrainedModel> {
    Trainer::new(data, config.clone(), LossWeights::full(config))?.run()
}

pub fn ablate(data: &MultiViewDataset, config: &TrainConfig, variant: Variant) -> Result<TrainedModel> {
    Trainer::new(data, config.clone(), variant.weights(config))?.run()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub hidden: Vec<usize>,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            hidden: vec![64],
            lr: 1e-3,
            batch_size: 256,
            seed: 0,
        }
    }
}

/// Trains a fresh discriminator on frozen codes (z-scored per column) and
/// returns its accuracy at predicting the sensitive group on the same data.
pub fn probe_sensitive(z: &Array2<f64>, sensitive: &[usize], config: &ProbeConfig) -> Result<f64> {
    if z.nrows() != sensitive.len() || z.nrows() == 0 {
        return Err(Error::Structural(format!(
            "{} codes for {} group ids",
            z.nrows(),
            sensitive.len()
        )));
    }
    let x = standardize(z);
    let groups = sensitive.iter().copied().max().unwrap_or(0).max(1) + 1;
    let mut rng = seeded_rng(derive_seed(config.seed, TAG_DISCRIMINATOR));
    let mut disc = NetworkShape::discriminator(x.ncols(), &config.hidden, groups).build(&mut rng)?;
    let mut adam = AdamState::for_network(AdamConfig::with_lr(config.lr), &disc);
    let n = x.nrows();
    let batch = config.batch_size.min(n);
    for epoch in 0..config.epochs {
        let plan = make_batches(n, batch, derive_seed(config.seed, TAG_TRAIN_BATCH + epoch as u64))?;
        for rows in plan.batches() {
            let xb = x.select(Axis(0), rows);
            let gb: Vec<usize> = rows.iter().map(|&i| sensitive[i]).collect();
            let (probs, tape) = disc.forward(&xb)?;
            let (_, grad) = cross_entropy_loss(&probs, &gb)?;
            let (g, _) = disc.backward_from_logits(&tape, &grad)?;
            disc.adam_step(&g, &mut adam, "probe")?;
        }
    }
    let probs = disc.predict(&x)?;
    let hits = probs
        .rows()
        .into_iter()
        .zip(sensitive)
        .filter(|(r, &g)| {
            let best = r
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |b, (j, &p)| if p > b.1 { (j, p) } else { b })
                .0;
            best == g
        })
        .count();
    Ok(hits as f64 / n as f64)
}
