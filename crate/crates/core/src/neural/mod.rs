//! Differentiable models: the candidate scorer, the response generator, and
//! the optimizer they share.

pub mod generator;
pub mod gradcheck;
pub mod optim;
pub mod scorer;

pub use generator::{GenConditioning, GenState, Generator, GeneratorShape, StepModel};
pub use scorer::{ScorerCache, ScorerNet, ScorerShape};

use crate::composer::ComposedSequence;
use crate::error::{Error, Result};
use crate::latent::Categorical;

/// A distribution over candidates together with the per-candidate caches
/// needed to backpropagate into the scorer.
#[derive(Debug, Clone)]
pub struct Scored {
    pub dist: Categorical,
    caches: Vec<ScorerCache>,
}

impl Scored {
    /// Accumulate `Σ_i dlogits[i] * ∂logit_i/∂params` into `grad`.
    pub fn backward(&self, net: &ScorerNet, dlogits: &[f64], grad: &mut [f64]) {
        for (cache, &d) in self.caches.iter().zip(dlogits) {
            net.backward(cache, d, grad);
        }
    }

    pub fn logits(&self) -> Vec<f64> {
        self.caches.iter().map(|c| c.logit).collect()
    }
}

/// Softmax over the head's logits for each composed candidate.
pub fn score_candidates(
    net: &ScorerNet,
    head: usize,
    composed: &[ComposedSequence],
) -> Result<Categorical> {
    Ok(score_with_caches(net, head, composed)?.dist)
}

pub fn score_with_caches(
    net: &ScorerNet,
    head: usize,
    composed: &[ComposedSequence],
) -> Result<Scored> {
    if composed.is_empty() {
        return Err(Error::Argument("no candidates to score".into()));
    }
    let caches = composed
        .iter()
        .map(|s| net.forward(s, head))
        .collect::<Result<Vec<_>>>()?;
    let logits: Vec<f64> = caches.iter().map(|c| c.logit).collect();
    Ok(Scored {
        dist: Categorical::from_logits(&logits)?,
        caches,
    })
}

/// A scalar function of a flat parameter vector with an analytic gradient.
pub trait Objective {
    fn value_and_gradient(&self, params: &[f64]) -> Result<(f64, Vec<f64>)>;
}

impl<F: Fn(&[f64]) -> Result<(f64, Vec<f64>)>> Objective for F {
    fn value_and_gradient(&self, params: &[f64]) -> Result<(f64, Vec<f64>)> {
        self(params)
    }
}

/// Gradient of `objective` at `params`, rejecting non-finite values.
pub fn gradient<O: Objective + ?Sized>(objective: &O, params: &[f64]) -> Result<Vec<f64>> {
    let (value, grad) = objective.value_and_gradient(params)?;
    if !value.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::Numeric(format!("non-finite objective {value}")));
    }
    Ok(grad)
}
