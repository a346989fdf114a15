//! Sensitive-attribute discriminator, fairness loss and the reversal schedule.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::nn::{cross_entropy_loss, DenseNetwork};
use crate::{Error, Result};

/// Sigmoid ramp for the gradient-reversal coefficient.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdversarySchedule {
    pub beta: f64,
    pub total_iters: u64,
    pub current_iter: u64,
}

impl AdversarySchedule {
    pub fn new(beta: f64, total_iters: u64, current_iter: u64) -> Result<Self> {
        if !(beta > 0.0 && beta.is_finite()) {
            return Err(Error::Contract(format!("beta must be positive, got {beta}")));
        }
        if total_iters == 0 {
            return Err(Error::Contract("total iterations must be positive".into()));
        }
        if current_iter > total_iters {
            return Err(Error::Contract(format!(
                "iteration {current_iter} beyond total {total_iters}"
            )));
        }
        Ok(Self {
            beta,
            total_iters,
            current_iter,
        })
    }

    pub fn at(self, iter: u64) -> Result<Self> {
        Self::new(self.beta, self.total_iters, iter)
    }

    /// Largest coefficient the schedule reaches, at `iter = n`.
    pub fn ceiling(&self) -> f64 {
        2.0 / (1.0 + (-self.beta).exp()) - 1.0
    }
}

/// `2 / (1 + exp(−β · iter / n)) − 1`
pub fn grl_coeff(schedule: &AdversarySchedule) -> f64 {
    let progress = schedule.current_iter as f64 / schedule.total_iters as f64;
    let x = schedule.beta * progress;
    // tanh(x/2) equals the sigmoid form and keeps iter = 0 exactly at zero
    (x / 2.0).tanh()
}

/// Sensitive-group probabilities for every row of the fused codes.
pub fn discriminate(disc: &DenseNetwork, z: &Array2<f64>) -> Result<Array2<f64>> {
    disc.predict(z)
}

/// Cross-entropy of the discriminator's predictions against the true groups,
/// with the gradient taken with respect to its logits.
pub fn fairness_loss(probs: &Array2<f64>, sensitive: &[usize]) -> Result<(f64, Array2<f64>)> {
    cross_entropy_loss(probs, sensitive)
}

/// How the fairness gradient is shared between the two players.
///
/// The discriminator minimizes `λ_F · L_F` and so receives `λ_F` times the
/// logit gradient. Past the reversal layer the encoders see the gradient
/// scaled by `−λ_F · coeff`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdversarialSplit {
    pub disc_scale: f64,
    pub encoder_scale: f64,
}

impl AdversarialSplit {
    /// Coefficient handed to the reversal layer once the discriminator
    /// gradient already carries `λ_F`.
    pub fn reversal_coeff(&self) -> f64 {
        if self.disc_scale == 0.0 {
            0.0
        } else {
            -self.encoder_scale / self.disc_scale
        }
    }
}

pub fn adversarial_split(coeff: f64, lambda_f: f64) -> Result<AdversarialSplit> {
    if !(coeff >= 0.0 && lambda_f >= 0.0) {
        return Err(Error::Contract(format!(
            "coeff and lambda_f must be non-negative, got {coeff} and {lambda_f}"
        )));
    }
    Ok(AdversarialSplit {
        disc_scale: lambda_f,
        encoder_scale: -lambda_f * coeff,
    })
}

/// Applies [`adversarial_split`] to a logit gradient: returns the gradient
/// the discriminator descends on and the scalar the encoder side is scaled by.
pub fn split_logit_grads(
    logit_grads: &Array2<f64>,
    coeff: f64,
    lambda_f: f64,
) -> Result<(Array2<f64>, f64)> {
    let split = adversarial_split(coeff, lambda_f)?;
    Ok((logit_grads * split.disc_scale, split.encoder_scale))
}
