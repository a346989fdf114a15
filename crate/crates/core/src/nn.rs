//! Dense feedforward networks with hand-written backpropagation and Adam.
//!
//! A [`DenseNetwork`] is a chain of affine maps, each followed by an
//! activation. [`DenseNetwork::forward`] returns the output together with a
//! [`GradTape`] holding every layer's input and output; [`DenseNetwork::backward`]
//! consumes that tape to produce exact parameter and input gradients.
//!
//! Tapes are stamped with the network's identity and parameter revision. A
//! tape taken before an optimizer step is rejected by `backward`.

use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::{Error, Result};

static NEXT_NETWORK_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_NETWORK_ID.fetch_add(1, Ordering::Relaxed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Relu,
    Sigmoid,
    Softmax,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Encoder,
    Decoder,
    Discriminator,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    /// out × in
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub activation: Activation,
}

impl Layer {
    pub fn in_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.nrows()
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct DenseNetwork {
    pub layers: Vec<Layer>,
    pub role: Role,
    #[serde(skip, default = "fresh_id")]
    id: u64,
    #[serde(skip)]
    revision: u64,
}

impl Clone for DenseNetwork {
    fn clone(&self) -> Self {
        Self {
            layers: self.layers.clone(),
            role: self.role,
            id: fresh_id(),
            revision: 0,
        }
    }
}

impl PartialEq for DenseNetwork {
    fn eq(&self, other: &Self) -> bool {
        self.role == other.role && self.layers == other.layers
    }
}

/// Cached intermediates of one forward pass.
#[derive(Debug, Clone)]
pub struct GradTape {
    network_id: u64,
    revision: u64,
    /// Input of layer l.
    inputs: Vec<Array2<f64>>,
    /// Post-activation output of layer l.
    outputs: Vec<Array2<f64>>,
}

impl GradTape {
    pub fn output(&self) -> &Array2<f64> {
        self.outputs.last().expect("tape of an empty network")
    }

    /// Post-activation output of layer `l`.
    pub fn layer_output(&self, l: usize) -> &Array2<f64> {
        &self.outputs[l]
    }

    pub fn batch_size(&self) -> usize {
        self.inputs[0].nrows()
    }
}

/// Per-layer parameter gradients, aligned with [`DenseNetwork::layers`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
}

impl Gradients {
    pub fn zeros_like(net: &DenseNetwork) -> Self {
        Self {
            weights: net.layers.iter().map(|l| Array2::zeros(l.weight.raw_dim())).collect(),
            biases: net.layers.iter().map(|l| Array1::zeros(l.bias.raw_dim())).collect(),
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for w in &mut self.weights {
            *w *= factor;
        }
        for b in &mut self.biases {
            *b *= factor;
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            *a += b;
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            *a += b;
        }
    }

    /// Flat views in the same order as [`DenseNetwork::param_slices_mut`].
    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out = Vec::with_capacity(2 * self.weights.len());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.push(w.as_slice().expect("standard layout"));
            out.push(b.as_slice().expect("standard layout"));
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|v| v.is_finite()))
    }
}

/// Widths and activations of a network before its parameters are drawn.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkShape {
    pub widths: Vec<usize>,
    pub activations: Vec<Activation>,
    pub role: Role,
}

impl NetworkShape {
    /// `d_in → hidden… → latent`, relu on hidden layers, identity on the code.
    pub fn encoder(d_in: usize, hidden: &[usize], latent: usize) -> Self {
        let mut widths = vec![d_in];
        widths.extend_from_slice(hidden);
        widths.push(latent);
        let mut activations = vec![Activation::Relu; hidden.len()];
        activations.push(Activation::Identity);
        Self {
            widths,
            activations,
            role: Role::Encoder,
        }
    }

    /// Mirror of [`NetworkShape::encoder`].
    pub fn decoder(latent: usize, encoder_hidden: &[usize], d_out: usize) -> Self {
        let mut widths = vec![latent];
        widths.extend(encoder_hidden.iter().rev());
        widths.push(d_out);
        let mut activations = vec![Activation::Relu; encoder_hidden.len()];
        activations.push(Activation::Identity);
        Self {
            widths,
            activations,
            role: Role::Decoder,
        }
    }

    pub fn discriminator(d_in: usize, hidden: &[usize], groups: usize) -> Self {
        let mut widths = vec![d_in];
        widths.extend_from_slice(hidden);
        widths.push(groups);
        let mut activations = vec![Activation::Relu; hidden.len()];
        activations.push(Activation::Softmax);
        Self {
            widths,
            activations,
            role: Role::Discriminator,
        }
    }

    /// Glorot-uniform weights, zero biases.
    pub fn build<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<DenseNetwork> {
        if self.widths.len() != self.activations.len() + 1 || self.activations.is_empty() {
            return Err(Error::Structural(format!(
                "{} widths need {} activations, got {}",
                self.widths.len(),
                self.widths.len().saturating_sub(1),
                self.activations.len()
            )));
        }
        let layers = self
            .widths
            .windows(2)
            .zip(&self.activations)
            .map(|(pair, &activation)| {
                let (fan_in, fan_out) = (pair[0], pair[1]);
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let dist = Uniform::new_inclusive(-limit, limit).expect("finite limit");
                Layer {
                    weight: Array2::from_shape_simple_fn((fan_out, fan_in), || dist.sample(rng)),
                    bias: Array1::zeros(fan_out),
                    activation,
                }
            })
            .collect();
        DenseNetwork::from_layers(layers, self.role)
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Row-wise numerically stable softmax.
pub fn softmax(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
    out
}

fn activate(pre: &mut Array2<f64>, activation: Activation) {
    match activation {
        Activation::Identity => {}
        Activation::Relu => pre.mapv_inplace(|v| v.max(0.0)),
        Activation::Sigmoid => pre.mapv_inplace(sigmoid),
        Activation::Softmax => *pre = softmax(pre),
    }
}

impl DenseNetwork {
    pub fn from_layers(layers: Vec<Layer>, role: Role) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Structural("network has no layers".into()));
        }
        for (l, layer) in layers.iter().enumerate() {
            if layer.bias.len() != layer.out_dim() {
                return Err(Error::Structural(format!(
                    "layer {l}: bias length {} for {} outputs",
                    layer.bias.len(),
                    layer.out_dim()
                )));
            }
            if l + 1 < layers.len() && layers[l + 1].in_dim() != layer.out_dim() {
                return Err(Error::Structural(format!(
                    "layer {} expects {} inputs, layer {l} produces {}",
                    l + 1,
                    layers[l + 1].in_dim(),
                    layer.out_dim()
                )));
            }
            let is_last = l + 1 == layers.len();
            if layer.activation == Activation::Softmax && !(is_last && role == Role::Discriminator) {
                return Err(Error::Structural(
                    "softmax is only allowed as the final activation of a discriminator".into(),
                ));
            }
        }
        Ok(Self {
            layers,
            role,
            id: fresh_id(),
            revision: 0,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map_or(0, Layer::out_dim)
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    pub fn shape(&self) -> NetworkShape {
        let mut widths = vec![self.in_dim()];
        widths.extend(self.layers.iter().map(Layer::out_dim));
        NetworkShape {
            widths,
            activations: self.layers.iter().map(|l| l.activation).collect(),
            role: self.role,
        }
    }

    fn check_input(&self, x: &Array2<f64>) -> Result<()> {
        if x.ncols() != self.in_dim() {
            return Err(Error::Structural(format!(
                "{:?} expects {} input columns, got {}",
                self.role,
                self.in_dim(),
                x.ncols()
            )));
        }
        Ok(())
    }

    /// Output without recording a tape.
    pub fn predict(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        self.check_input(x)?;
        let mut a = x.clone();
        for layer in &self.layers {
            let mut pre = a.dot(&layer.weight.t()) + &layer.bias;
            activate(&mut pre, layer.activation);
            a = pre;
        }
        Ok(a)
    }

    pub fn forward(&self, x: &Array2<f64>) -> Result<(Array2<f64>, GradTape)> {
        self.check_input(x)?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut outputs = Vec::with_capacity(self.layers.len());
        let mut a = x.to_owned();
        for layer in &self.layers {
            let mut pre = a.dot(&layer.weight.t()) + &layer.bias;
            activate(&mut pre, layer.activation);
            inputs.push(a);
            a = pre;
            outputs.push(a.clone());
        }
        let tape = GradTape {
            network_id: self.id,
            revision: self.revision,
            inputs,
            outputs,
        };
        Ok((a, tape))
    }

    fn check_tape(&self, tape: &GradTape) -> Result<()> {
        if tape.network_id != self.id || tape.revision != self.revision {
            return Err(Error::Contract(
                "gradient tape was not produced by the current parameters of this network".into(),
            ));
        }
        Ok(())
    }

    /// Backpropagates a gradient with respect to the network output.
    pub fn backward(&self, tape: &GradTape, grad_output: &Array2<f64>) -> Result<(Gradients, Array2<f64>)> {
        self.backprop(tape, grad_output, false)
    }

    /// Backpropagates a gradient given with respect to the final layer's
    /// pre-activation (the logits, for a softmax head).
    pub fn backward_from_logits(
        &self,
        tape: &GradTape,
        grad_logits: &Array2<f64>,
    ) -> Result<(Gradients, Array2<f64>)> {
        self.backprop(tape, grad_logits, true)
    }

    fn backprop(
        &self,
        tape: &GradTape,
        grad: &Array2<f64>,
        skip_last_activation: bool,
    ) -> Result<(Gradients, Array2<f64>)> {
        self.check_tape(tape)?;
        if grad.dim() != tape.output().dim() {
            return Err(Error::Structural(format!(
                "output gradient has shape {:?}, output has {:?}",
                grad.dim(),
                tape.output().dim()
            )));
        }
        let n_layers = self.layers.len();
        let mut weights = Vec::with_capacity(n_layers);
        let mut biases = Vec::with_capacity(n_layers);
        let mut g = grad.clone();
        for l in (0..n_layers).rev() {
            let layer = &self.layers[l];
            let out = &tape.outputs[l];
            if !(skip_last_activation && l + 1 == n_layers) {
                match layer.activation {
                    Activation::Identity => {}
                    Activation::Relu => g.zip_mut_with(out, |gi, &o| {
                        if o <= 0.0 {
                            *gi = 0.0
                        }
                    }),
                    Activation::Sigmoid => g.zip_mut_with(out, |gi, &o| *gi *= o * (1.0 - o)),
                    Activation::Softmax => {
                        let dots = (&g * out).sum_axis(Axis(1)).insert_axis(Axis(1));
                        g = out * &(&g - &dots);
                    }
                }
            }
            weights.push(g.t().dot(&tape.inputs[l]).as_standard_layout().into_owned());
            biases.push(g.sum_axis(Axis(0)));
            g = g.dot(&layer.weight);
        }
        weights.reverse();
        biases.reverse();
        Ok((Gradients { weights, biases }, g))
    }

    /// Flat mutable views over all parameters: W0, b0, W1, b1, …
    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::with_capacity(2 * self.layers.len());
        for layer in &mut self.layers {
            out.push(layer.weight.as_slice_mut().expect("standard layout"));
            out.push(layer.bias.as_slice_mut().expect("standard layout"));
        }
        out
    }

    pub fn param_sizes(&self) -> Vec<usize> {
        self.layers
            .iter()
            .flat_map(|l| [l.weight.len(), l.bias.len()])
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.iter().chain(l.bias.iter()).all(|v| v.is_finite()))
    }

    /// Applies one Adam update and invalidates outstanding tapes.
    pub fn adam_step(&mut self, grads: &Gradients, state: &mut AdamState, term: &str) -> Result<()> {
        let grad_slices = grads.slices();
        let mut params = self.param_slices_mut();
        state.step(&mut params, &grad_slices, term)?;
        self.revision += 1;
        if !self.is_finite() {
            return Err(Error::NonFinite {
                term: term.to_string(),
                context: format!("{:?} parameters after Adam step", self.role),
            });
        }
        Ok(())
    }
}

/// Gradient-reversal backward rule: forward is the identity, backward
/// multiplies the upstream gradient by `-coeff`.
pub fn grl_backward(upstream: &Array2<f64>, coeff: f64) -> Array2<f64> {
    upstream * (-coeff)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

/// Adam moment accumulators for one parameter group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub config: AdamConfig,
    pub t: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(config: AdamConfig, sizes: &[usize]) -> Self {
        Self {
            config,
            t: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn for_network(config: AdamConfig, net: &DenseNetwork) -> Self {
        Self::new(config, &net.param_sizes())
    }

    /// Bias-corrected Adam step over parallel lists of parameter and gradient slices.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]], term: &str) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Structural(format!(
                "Adam state tracks {} tensors, got {} parameters and {} gradients",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != self.m[i].len() || g.len() != self.m[i].len() {
                return Err(Error::Structural(format!(
                    "tensor {i}: state size {}, parameter size {}, gradient size {}",
                    self.m[i].len(),
                    p.len(),
                    g.len()
                )));
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    term: term.to_string(),
                    context: format!("gradient of tensor {i}"),
                });
            }
        }
        self.t += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let t = self.t as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for j in 0..p.len() {
                let gj = g[j];
                m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
                v[j] = beta2 * v[j] + (1.0 - beta2) * gj * gj;
                let m_hat = m[j] / c1;
                let v_hat = v[j] / c2;
                p[j] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

fn same_shape(a: &Array2<f64>, b: &Array2<f64>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::Structural(format!(
            "shape mismatch: {:?} vs {:?}",
            a.dim(),
            b.dim()
        )));
    }
    Ok(())
}

/// Batch mean of squared row norms, and its gradient with respect to `x_hat`.
pub fn mse_loss(x_hat: &Array2<f64>, x: &Array2<f64>) -> Result<(f64, Array2<f64>)> {
    same_shape(x_hat, x)?;
    let b = x.nrows().max(1) as f64;
    let diff = x_hat - x;
    let loss = diff.iter().map(|d| d * d).sum::<f64>() / b;
    Ok((loss, diff * (2.0 / b)))
}

/// Mean negative log-likelihood of `targets` under row distributions `probs`,
/// with the gradient taken with respect to the pre-softmax logits.
pub fn cross_entropy_loss(probs: &Array2<f64>, targets: &[usize]) -> Result<(f64, Array2<f64>)> {
    if probs.nrows() != targets.len() {
        return Err(Error::Structural(format!(
            "{} probability rows for {} targets",
            probs.nrows(),
            targets.len()
        )));
    }
    let classes = probs.ncols();
    for (i, row) in probs.rows().into_iter().enumerate() {
        if (row.sum() - 1.0).abs() > 1e-6 {
            return Err(Error::Contract(format!("probability row {i} does not sum to 1")));
        }
    }
    if let Some(&bad) = targets.iter().find(|&&t| t >= classes) {
        return Err(Error::Bounds(format!(
            "target class {bad} outside 0..{classes}"
        )));
    }
    let b = targets.len().max(1) as f64;
    let mut grad = probs.clone();
    let mut loss = 0.0;
    for (i, &t) in targets.iter().enumerate() {
        loss -= probs[[i, t]].max(f64::MIN_POSITIVE).ln();
        grad[[i, t]] -= 1.0;
    }
    grad /= b;
    Ok((loss / b, grad))
}

pub const CHECKPOINT_MAGIC: &str = "AFMVC-CHECKPOINT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// A named network with its optimizer state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointEntry {
    pub name: String,
    pub network: DenseNetwork,
    pub adam: Option<AdamState>,
}

/// JSON container for trained networks and centroids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub magic: String,
    pub version: u32,
    pub config_hash: String,
    pub networks: Vec<CheckpointEntry>,
    pub centroids: Vec<Array2<f64>>,
}

impl Checkpoint {
    pub fn new(config_hash: String) -> Self {
        Self {
            magic: CHECKPOINT_MAGIC.to_string(),
            version: CHECKPOINT_VERSION,
            config_hash,
            networks: Vec::new(),
            centroids: Vec::new(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ckpt: Checkpoint = serde_json::from_str(&text)?;
        if ckpt.magic != CHECKPOINT_MAGIC {
            return Err(Error::Contract(format!(
                "{} is not a checkpoint (magic {:?})",
                path.display(),
                ckpt.magic
            )));
        }
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::Contract(format!(
                "unsupported checkpoint version {}",
                ckpt.version
            )));
        }
        for entry in &ckpt.networks {
            DenseNetwork::from_layers(entry.network.layers.clone(), entry.network.role)?;
        }
        Ok(ckpt)
    }
}

/// Hex SHA-256 of a serializable value's JSON form.
pub fn config_hash<T: Serialize>(value: &T) -> Result<String> {
    let json = serde_json::to_vec(value)?;
    let digest = Sha256::digest(&json);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::seeded_rng;
    use ndarray::array;

    fn single(weight: Array2<f64>, bias: Array1<f64>, activation: Activation) -> DenseNetwork {
        DenseNetwork::from_layers(
            vec![Layer {
                weight,
                bias,
                activation,
            }],
            Role::Encoder,
        )
        .unwrap()
    }

    #[test]
    fn identity_layer_is_identity() {
        let net = single(Array2::eye(3), Array1::zeros(3), Activation::Identity);
        let x = array![[1.0, -2.0, 3.0], [0.5, 0.0, -1.0]];
        let (y, _) = net.forward(&x).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn zero_sigmoid_layer_gives_half() {
        let net = single(Array2::zeros((2, 3)), Array1::zeros(2), Activation::Sigmoid);
        let (y, _) = net.forward(&array![[1.0, 2.0, 3.0]]).unwrap();
        assert!(y.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn identity_backward_is_affine_derivative() {
        let w = array![[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]];
        let net = single(w.clone(), Array1::zeros(3), Activation::Identity);
        let (_, tape) = net.forward(&array![[1.0, 1.0]]).unwrap();
        let g = array![[1.0, -1.0, 0.5]];
        let (_, dx) = net.backward(&tape, &g).unwrap();
        assert_eq!(dx, g.dot(&w));
        let (grads, dx0) = net.backward(&tape, &Array2::zeros((1, 3))).unwrap();
        assert!(dx0.iter().all(|&v| v == 0.0));
        assert!(grads.slices().iter().all(|s| s.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn softmax_only_on_discriminator_head() {
        let layer = Layer {
            weight: Array2::zeros((2, 2)),
            bias: Array1::zeros(2),
            activation: Activation::Softmax,
        };
        assert!(DenseNetwork::from_layers(vec![layer.clone()], Role::Encoder).is_err());
        assert!(DenseNetwork::from_layers(vec![layer.clone()], Role::Discriminator).is_ok());
        let hidden = Layer {
            weight: Array2::zeros((2, 2)),
            bias: Array1::zeros(2),
            activation: Activation::Relu,
        };
        assert!(DenseNetwork::from_layers(vec![layer, hidden], Role::Discriminator).is_err());
    }

    #[test]
    fn layer_chain_mismatch_is_structural() {
        let a = Layer {
            weight: Array2::zeros((3, 2)),
            bias: Array1::zeros(3),
            activation: Activation::Relu,
        };
        let b = Layer {
            weight: Array2::zeros((1, 4)),
            bias: Array1::zeros(1),
            activation: Activation::Identity,
        };
        assert!(matches!(
            DenseNetwork::from_layers(vec![a, b], Role::Encoder),
            Err(Error::Structural(_))
        ));
    }

    #[test]
    fn stale_tape_is_rejected() {
        let mut rng = seeded_rng(1);
        let mut net = NetworkShape::encoder(2, &[3], 2).build(&mut rng).unwrap();
        let x = array![[0.3, -0.2]];
        let (y, tape) = net.forward(&x).unwrap();
        let (grads, _) = net.backward(&tape, &y).unwrap();
        let mut adam = AdamState::for_network(AdamConfig::default(), &net);
        net.adam_step(&grads, &mut adam, "test").unwrap();
        assert!(matches!(net.backward(&tape, &y), Err(Error::Contract(_))));
        let other = net.clone();
        let (_, fresh) = other.forward(&x).unwrap();
        assert!(net.backward(&fresh, &y).is_err());
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut state = AdamState::new(AdamConfig::default(), &[2]);
        let mut p = [0.0, 0.0];
        state.step(&mut [&mut p[..]], &[&[1.0, 1.0][..]], "t").unwrap();
        // m̂ = 1, v̂ = 1 → Δ = lr / (1 + 1e-8)
        let expected = -1e-3 / (1.0 + 1e-8);
        assert!((p[0] - expected).abs() < 1e-15);
        assert_eq!(p[0], p[1]);
        assert_eq!(state.t, 1);
    }

    #[test]
    fn adam_zero_gradient_is_fixed_point() {
        let mut state = AdamState::new(AdamConfig::default(), &[3]);
        let mut p = vec![1.0, -2.0, 0.5];
        state.step(&mut [&mut p[..]], &[&[0.0; 3][..]], "t").unwrap();
        assert_eq!(p, vec![1.0, -2.0, 0.5]);
        assert!(state.m[0].iter().chain(&state.v[0]).all(|&v| v == 0.0));
    }

    #[test]
    fn adam_rejects_non_finite_gradient_by_term() {
        let mut state = AdamState::new(AdamConfig::default(), &[1]);
        let mut p = [0.0];
        let err = state.step(&mut [&mut p[..]], &[&[f64::NAN][..]], "L_C").unwrap_err();
        assert!(err.to_string().contains("L_C"));
        assert_eq!(state.t, 0);
    }

    #[test]
    fn grl_examples() {
        let g = array![[2.0, -4.0]];
        assert_eq!(grl_backward(&g, 1.0), array![[-2.0, 4.0]]);
        assert_eq!(grl_backward(&g, 0.5), array![[-1.0, 2.0]]);
        assert!(grl_backward(&g, 0.0).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mse_examples() {
        let (loss, grad) = mse_loss(&array![[1.0, 2.0]], &array![[0.0, 0.0]]).unwrap();
        assert_eq!(loss, 5.0);
        assert_eq!(grad, array![[2.0, 4.0]]);
        let (loss2, _) = mse_loss(&array![[2.0, 4.0]], &array![[0.0, 0.0]]).unwrap();
        assert_eq!(loss2, 4.0 * loss);
        let (zero, g0) = mse_loss(&array![[1.0, 2.0]], &array![[1.0, 2.0]]).unwrap();
        assert_eq!(zero, 0.0);
        assert!(g0.iter().all(|&v| v == 0.0));
        assert!(mse_loss(&array![[1.0]], &array![[1.0, 2.0]]).is_err());
    }

    #[test]
    fn cross_entropy_examples() {
        let (perfect, _) = cross_entropy_loss(&array![[1.0, 0.0], [0.0, 1.0]], &[0, 1]).unwrap();
        assert_eq!(perfect, 0.0);
        let (uniform, grad) = cross_entropy_loss(&array![[0.5, 0.5]], &[1]).unwrap();
        assert!((uniform - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(grad, array![[0.5, -0.5]]);
        assert!(matches!(
            cross_entropy_loss(&array![[0.5, 0.5]], &[2]),
            Err(Error::Bounds(_))
        ));
        assert!(cross_entropy_loss(&array![[0.5, 0.6]], &[0]).is_err());
    }

    #[test]
    fn checkpoint_round_trip_and_magic() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = seeded_rng(3);
        let net = NetworkShape::discriminator(4, &[5], 2).build(&mut rng).unwrap();
        let mut ckpt = Checkpoint::new(config_hash(&"cfg").unwrap());
        ckpt.networks.push(CheckpointEntry {
            name: "disc".into(),
            adam: Some(AdamState::for_network(AdamConfig::default(), &net)),
            network: net,
        });
        ckpt.centroids.push(array![[1.0, 2.0], [3.0, 4.0]]);
        let path = dir.path().join("ckpt.json");
        ckpt.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), ckpt);
        std::fs::write(&path, r#"{"magic":"nope","version":1,"config_hash":"","networks":[],"centroids":[]}"#)
            .unwrap();
        assert!(Checkpoint::load(&path).is_err());
    }
}
