//! Independent reference implementations used by the integration tests.
//! Everything here is written with plain loops and shares no numerical
//! code with the library beyond reading network parameters.

#![allow(dead_code)]

use afmvc::cluster::{concat_views, kl_consensus_loss, split_columns};
use afmvc::data::seeded_rng;
use afmvc::nn::{cross_entropy_loss, mse_loss, Activation, DenseNetwork, NetworkShape};
use ndarray::{Array2, ArrayView2};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

// ---------------------------------------------------------------------------
// networks and losses

/// Loop-based forward pass. Also returns the sign pattern of every ReLU
/// pre-activation so callers can detect kink crossings.
pub fn naive_forward(net: &DenseNetwork, x: &Array2<f64>, pattern: &mut Vec<bool>) -> Array2<f64> {
    let mut a: Vec<Vec<f64>> = x.rows().into_iter().map(|r| r.to_vec()).collect();
    for layer in &net.layers {
        let (out_dim, in_dim) = layer.weight.dim();
        let mut next = Vec::with_capacity(a.len());
        for row in &a {
            let mut pre = vec![0.0; out_dim];
            for (o, p) in pre.iter_mut().enumerate() {
                let mut s = layer.bias[o];
                for i in 0..in_dim {
                    s += layer.weight[[o, i]] * row[i];
                }
                *p = s;
            }
            let post = match layer.activation {
                Activation::Identity => pre,
                Activation::Relu => pre
                    .into_iter()
                    .map(|v| {
                        pattern.push(v > 0.0);
                        if v > 0.0 {
                            v
                        } else {
                            0.0
                        }
                    })
                    .collect(),
                Activation::Sigmoid => pre.into_iter().map(|v| 1.0 / (1.0 + (-v).exp())).collect(),
                Activation::Softmax => {
                    let m = pre.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let e: Vec<f64> = pre.iter().map(|v| (v - m).exp()).collect();
                    let s: f64 = e.iter().sum();
                    e.into_iter().map(|v| v / s).collect()
                }
            };
            next.push(post);
        }
        a = next;
    }
    let cols = a.first().map_or(0, |r| r.len());
    Array2::from_shape_fn((a.len(), cols), |(i, j)| a[i][j])
}

pub fn naive_mse(x_hat: &Array2<f64>, x: &Array2<f64>) -> f64 {
    let mut s = 0.0;
    for i in 0..x.nrows() {
        for j in 0..x.ncols() {
            s += (x_hat[[i, j]] - x[[i, j]]).powi(2);
        }
    }
    s / x.nrows() as f64
}

pub fn naive_ce(probs: &Array2<f64>, targets: &[usize]) -> f64 {
    let mut s = 0.0;
    for (i, &t) in targets.iter().enumerate() {
        s -= probs[[i, t]].ln();
    }
    s / targets.len() as f64
}

/// Student-t kernel assignments, computed directly.
pub fn naive_soft_assign(z: &Array2<f64>, mu: &Array2<f64>, alpha: f64) -> Array2<f64> {
    let mut q = Array2::zeros((z.nrows(), mu.nrows()));
    for i in 0..z.nrows() {
        let mut total = 0.0;
        for j in 0..mu.nrows() {
            let mut d2 = 0.0;
            for d in 0..z.ncols() {
                d2 += (z[[i, d]] - mu[[j, d]]).powi(2);
            }
            let k = (1.0 + d2 / alpha).powf(-(alpha + 1.0) / 2.0);
            q[[i, j]] = k;
            total += k;
        }
        for j in 0..mu.nrows() {
            q[[i, j]] /= total;
        }
    }
    q
}

/// `Σ_ij P_ij log(P_ij / Q_ij) / B` with one-hot P given by `targets`.
pub fn naive_kl(z: &Array2<f64>, mu: &Array2<f64>, alpha: f64, targets: &[usize]) -> f64 {
    let q = naive_soft_assign(z, mu, alpha);
    let mut s = 0.0;
    for (i, &t) in targets.iter().enumerate() {
        for j in 0..mu.nrows() {
            let p = if j == t { 1.0 } else { 0.0 };
            if p > 0.0 {
                s += p * (p / q[[i, j]]).ln();
            }
        }
    }
    s / targets.len() as f64
}

// ---------------------------------------------------------------------------
// gradient checking

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Term {
    Reconstruction,
    Consensus,
    Fairness,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Param {
    Encoder(usize, usize),
    Decoder(usize, usize),
    Discriminator(usize),
    Centroids(usize),
}

/// A random multi-view instance with every trainable tensor of the model.
pub struct GradCase {
    pub xs: Vec<Array2<f64>>,
    pub encoders: Vec<DenseNetwork>,
    pub decoders: Vec<DenseNetwork>,
    pub discriminator: DenseNetwork,
    pub centroids: Vec<Array2<f64>>,
    pub targets: Vec<usize>,
    pub groups: Vec<usize>,
    pub alpha: f64,
}

pub struct ShapeSpec {
    pub encoder_hidden: Vec<usize>,
    pub latent: usize,
    pub disc_hidden: Vec<usize>,
}

impl ShapeSpec {
    pub fn default_shapes() -> Self {
        Self {
            encoder_hidden: vec![256, 64],
            latent: 10,
            disc_hidden: vec![64],
        }
    }

    pub fn small() -> Self {
        Self {
            encoder_hidden: vec![5, 4],
            latent: 3,
            disc_hidden: vec![4],
        }
    }
}

fn normal_matrix<R: Rng>(rows: usize, cols: usize, scale: f64, rng: &mut R) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| {
        let e: f64 = StandardNormal.sample(rng);
        scale * e
    })
}

impl GradCase {
    pub fn random(seed: u64, shapes: &ShapeSpec) -> Self {
        let mut rng = seeded_rng(seed);
        let n_views = rng.random_range(1..=3);
        let batch = rng.random_range(4..=8);
        let k = rng.random_range(2..=4);
        let g = rng.random_range(2..=3);
        let mut xs = Vec::new();
        let mut encoders = Vec::new();
        let mut decoders = Vec::new();
        let mut centroids = Vec::new();
        for _ in 0..n_views {
            let d = rng.random_range(2..=12);
            xs.push(normal_matrix(batch, d, 1.0, &mut rng));
            let mut enc = NetworkShape::encoder(d, &shapes.encoder_hidden, shapes.latent)
                .build(&mut rng)
                .unwrap();
            let mut dec = NetworkShape::decoder(shapes.latent, &shapes.encoder_hidden, d)
                .build(&mut rng)
                .unwrap();
            randomize_biases(&mut enc, &mut rng);
            randomize_biases(&mut dec, &mut rng);
            encoders.push(enc);
            decoders.push(dec);
            centroids.push(normal_matrix(k, shapes.latent, 1.0, &mut rng));
        }
        let mut discriminator = NetworkShape::discriminator(shapes.latent * n_views, &shapes.disc_hidden, g)
            .build(&mut rng)
            .unwrap();
        randomize_biases(&mut discriminator, &mut rng);
        let targets = (0..batch).map(|_| rng.random_range(0..k)).collect();
        let groups = (0..batch).map(|_| rng.random_range(0..g)).collect();
        Self {
            xs,
            encoders,
            decoders,
            discriminator,
            centroids,
            targets,
            groups,
            alpha: 1.0,
        }
    }

    pub fn params(&self, term: Term) -> Vec<Param> {
        let mut out = Vec::new();
        for v in 0..self.xs.len() {
            for t in 0..2 * self.encoders[v].layers.len() {
                out.push(Param::Encoder(v, t));
            }
            match term {
                Term::Reconstruction => {
                    for t in 0..2 * self.decoders[v].layers.len() {
                        out.push(Param::Decoder(v, t));
                    }
                }
                Term::Consensus => out.push(Param::Centroids(v)),
                Term::Fairness => {}
            }
        }
        if term == Term::Fairness {
            for t in 0..2 * self.discriminator.layers.len() {
                out.push(Param::Discriminator(t));
            }
        }
        out
    }

    pub fn slice_mut(&mut self, p: Param) -> &mut [f64] {
        match p {
            Param::Encoder(v, t) => self.encoders[v].param_slices_mut().swap_remove(t),
            Param::Decoder(v, t) => self.decoders[v].param_slices_mut().swap_remove(t),
            Param::Discriminator(t) => self.discriminator.param_slices_mut().swap_remove(t),
            Param::Centroids(v) => self.centroids[v].as_slice_mut().unwrap(),
        }
    }

    /// Loss from the loop-based reference, plus the ReLU sign pattern.
    pub fn naive_loss(&self, term: Term) -> (f64, Vec<bool>) {
        let mut pattern = Vec::new();
        let zs: Vec<Array2<f64>> = self
            .encoders
            .iter()
            .zip(&self.xs)
            .map(|(e, x)| naive_forward(e, x, &mut pattern))
            .collect();
        let loss = match term {
            Term::Reconstruction => zs
                .iter()
                .zip(&self.decoders)
                .zip(&self.xs)
                .map(|((z, d), x)| naive_mse(&naive_forward(d, z, &mut pattern), x))
                .sum(),
            Term::Consensus => zs
                .iter()
                .zip(&self.centroids)
                .map(|(z, mu)| naive_kl(z, mu, self.alpha, &self.targets))
                .sum(),
            Term::Fairness => {
                let batch = zs[0].nrows();
                let width: usize = zs.iter().map(|z| z.ncols()).sum();
                let mut fused = Array2::zeros((batch, width));
                let mut offset = 0;
                for z in &zs {
                    for i in 0..batch {
                        for j in 0..z.ncols() {
                            fused[[i, offset + j]] = z[[i, j]];
                        }
                    }
                    offset += z.ncols();
                }
                naive_ce(&naive_forward(&self.discriminator, &fused, &mut pattern), &self.groups)
            }
        };
        (loss, pattern)
    }

    /// Analytic gradients from the library for every tensor of `term`.
    pub fn analytic(&self, term: Term) -> (f64, Vec<(Param, Vec<f64>)>) {
        let mut out = Vec::new();
        let mut zs = Vec::new();
        let mut tapes = Vec::new();
        for (e, x) in self.encoders.iter().zip(&self.xs) {
            let (z, tape) = e.forward(x).unwrap();
            zs.push(z);
            tapes.push(tape);
        }
        let push_encoder = |out: &mut Vec<(Param, Vec<f64>)>, v: usize, dz: &Array2<f64>| {
            let (g, _) = self.encoders[v].backward(&tapes[v], dz).unwrap();
            for (t, s) in g.slices().into_iter().enumerate() {
                out.push((Param::Encoder(v, t), s.to_vec()));
            }
        };
        let loss = match term {
            Term::Reconstruction => {
                let mut total = 0.0;
                for v in 0..zs.len() {
                    let (x_hat, tape) = self.decoders[v].forward(&zs[v]).unwrap();
                    let (l, g) = mse_loss(&x_hat, &self.xs[v]).unwrap();
                    total += l;
                    let (gd, dz) = self.decoders[v].backward(&tape, &g).unwrap();
                    push_encoder(&mut out, v, &dz);
                    for (t, s) in gd.slices().into_iter().enumerate() {
                        out.push((Param::Decoder(v, t), s.to_vec()));
                    }
                }
                total
            }
            Term::Consensus => {
                let views: Vec<ArrayView2<f64>> = zs.iter().map(|z| z.view()).collect();
                let kl = kl_consensus_loss(&self.targets, &views, &self.centroids, self.alpha).unwrap();
                for v in 0..zs.len() {
                    push_encoder(&mut out, v, &kl.grad_z[v]);
                    out.push((Param::Centroids(v), kl.grad_centroids[v].iter().copied().collect()));
                }
                kl.loss
            }
            Term::Fairness => {
                let fused = concat_views(&zs).unwrap();
                let (probs, tape) = self.discriminator.forward(&fused).unwrap();
                let (l, g) = cross_entropy_loss(&probs, &self.groups).unwrap();
                let (gd, dz) = self.discriminator.backward_from_logits(&tape, &g).unwrap();
                let widths: Vec<usize> = zs.iter().map(|z| z.ncols()).collect();
                for (v, part) in split_columns(&dz, &widths).unwrap().iter().enumerate() {
                    push_encoder(&mut out, v, part);
                }
                for (t, s) in gd.slices().into_iter().enumerate() {
                    out.push((Param::Discriminator(t), s.to_vec()));
                }
                l
            }
        };
        (loss, out)
    }
}

fn randomize_biases<R: Rng>(net: &mut DenseNetwork, rng: &mut R) {
    for layer in &mut net.layers {
        for b in layer.bias.iter_mut() {
            let e: f64 = StandardNormal.sample(rng);
            *b = 0.1 * e;
        }
    }
}

#[derive(Debug, Default, Clone, Copy)]
pub struct FdReport {
    pub max_rel_err: f64,
    pub checked: usize,
    pub skipped: usize,
    /// Analytic and reference loss values disagree by this much.
    pub loss_gap: f64,
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Central differences on up to `per_tensor` random coordinates of every
/// tensor (all coordinates when `per_tensor` is `None`). Coordinates whose
/// perturbation flips a ReLU sign are skipped and counted.
pub fn finite_difference_check(case: &mut GradCase, term: Term, h: f64, per_tensor: Option<usize>, seed: u64) -> FdReport {
    let mut rng = seeded_rng(seed);
    let (loss, grads) = case.analytic(term);
    let (reference, _) = case.naive_loss(term);
    let mut report = FdReport {
        loss_gap: (loss - reference).abs(),
        ..FdReport::default()
    };
    for (param, grad) in grads {
        let coords: Vec<usize> = match per_tensor {
            Some(m) if m < grad.len() => (0..m).map(|_| rng.random_range(0..grad.len())).collect(),
            _ => (0..grad.len()).collect(),
        };
        for c in coords {
            let original = case.slice_mut(param)[c];
            case.slice_mut(param)[c] = original + h;
            let (plus, pattern_plus) = case.naive_loss(term);
            case.slice_mut(param)[c] = original - h;
            let (minus, pattern_minus) = case.naive_loss(term);
            case.slice_mut(param)[c] = original;
            if pattern_plus != pattern_minus {
                report.skipped += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * h);
            report.max_rel_err = report.max_rel_err.max(rel_err(grad[c], numeric));
            report.checked += 1;
        }
    }
    report
}

// ---------------------------------------------------------------------------
// metrics

fn dense_ids(labels: &[usize]) -> (Vec<usize>, usize) {
    let mut ids: Vec<usize> = labels.to_vec();
    ids.sort_unstable();
    ids.dedup();
    (labels.iter().map(|l| ids.binary_search(l).unwrap()).collect(), ids.len())
}

fn permutations(m: usize) -> Vec<Vec<usize>> {
    if m == 0 {
        return vec![Vec::new()];
    }
    let mut out = Vec::new();
    for p in permutations(m - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, m - 1);
            out.push(q);
        }
    }
    out
}

/// Best matching found by trying every permutation.
pub fn brute_force_accuracy(pred: &[usize], truth: &[usize]) -> f64 {
    let (p, kp) = dense_ids(pred);
    let (t, kt) = dense_ids(truth);
    let m = kp.max(kt);
    let mut best = 0;
    for perm in permutations(m) {
        let hits = p.iter().zip(&t).filter(|&(&a, &b)| perm[a] == b).count();
        best = best.max(hits);
    }
    best as f64 / pred.len() as f64
}

/// NMI with arithmetic-mean normalization, one pass over pairs of labels.
pub fn straight_line_nmi(pred: &[usize], truth: &[usize]) -> f64 {
    let n = pred.len() as f64;
    let (p, kp) = dense_ids(pred);
    let (t, kt) = dense_ids(truth);
    let mut joint = vec![vec![0.0; kt]; kp];
    let mut pa = vec![0.0; kp];
    let mut pb = vec![0.0; kt];
    for (&a, &b) in p.iter().zip(&t) {
        joint[a][b] += 1.0 / n;
        pa[a] += 1.0 / n;
        pb[b] += 1.0 / n;
    }
    let h = |v: &[f64]| -> f64 { v.iter().filter(|&&x| x > 0.0).map(|&x| -x * x.ln()).sum() };
    let (ha, hb) = (h(&pa), h(&pb));
    if kp == 1 && kt == 1 {
        return 1.0;
    }
    if kp == 1 || kt == 1 {
        return 0.0;
    }
    let mut mi = 0.0;
    for a in 0..kp {
        for b in 0..kt {
            if joint[a][b] > 0.0 {
                mi += joint[a][b] * (joint[a][b] / (pa[a] * pb[b])).ln();
            }
        }
    }
    mi / ((ha + hb) / 2.0)
}

/// Balance by listing each cluster's members and counting every group.
pub fn enumerated_balance(pred: &[usize], sensitive: &[usize]) -> f64 {
    let (clusters, _) = dense_ids(pred);
    let (groups, kg) = dense_ids(sensitive);
    let kc = clusters.iter().max().unwrap() + 1;
    let mut best = f64::INFINITY;
    for c in 0..kc {
        let members: Vec<usize> = (0..pred.len()).filter(|&i| clusters[i] == c).collect();
        for g in 0..kg {
            let count = members.iter().filter(|&&i| groups[i] == g).count();
            best = best.min(count as f64 / members.len() as f64);
        }
    }
    best
}

/// Random labels with values below `k`, length `n`.
pub fn random_labels<R: Rng>(n: usize, k: usize, rng: &mut R) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(0..k)).collect()
}
