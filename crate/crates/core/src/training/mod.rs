//! Warm-up, the dual-learning loop, and the training driver.

pub mod checkpoint;
pub mod objectives;

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::EncodedCase;
use crate::error::{Error, Result};
use crate::latent::{Group, LatentModels, ModelConfig};
use crate::metrics::recall_at_k;
use crate::neural::optim::{clip_norm, cosine_lr, Adam};

pub use objectives::{
    distill_objective, forward_policy_gradient, inverse_policy_gradient, theta_objective,
    warmup_objective, DistillTerms, ElboMode, ElboTerms, Grads, LatentTables, WarmupTerms,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub warmup_steps: usize,
    pub dual_steps: usize,
    pub batch_size: usize,
    pub warmup_lr: f64,
    pub dual_lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub grad_clip: f64,
    pub min_lr: f64,
    /// Weight of the pseudo-label term in distillation.
    pub alpha: f64,
    /// Distillation temperature.
    pub temperature: f64,
    pub seed: u64,
    /// Reconstruction estimator used by the prior/generator update.
    pub elbo_mode: ElboMode,
    /// Dual-phase steps between Recall@1 probes; 0 disables probing.
    pub probe_every: usize,
    pub probe_cases: usize,
    /// Probes without improvement before the dual phase stops early; 0 disables.
    pub patience: usize,
    /// Moving-average reward baseline for the policy gradients.
    pub baseline: bool,
    pub baseline_decay: f64,
    /// Steps between checkpoints; 0 disables.
    pub checkpoint_every: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            warmup_steps: 5000,
            dual_steps: 1000,
            batch_size: 16,
            warmup_lr: 1e-5,
            dual_lr: 1e-6,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            grad_clip: 2.0,
            min_lr: 0.0,
            alpha: 0.5,
            temperature: 2.0,
            seed: 0,
            elbo_mode: ElboMode::Sample,
            probe_every: 25,
            probe_cases: 200,
            patience: 5,
            baseline: false,
            baseline_decay: 0.9,
            checkpoint_every: 0,
        }
    }
}

impl TrainingConfig {
    /// Step counts and learning rates that finish in minutes on one core.
    pub fn desk() -> Self {
        TrainingConfig {
            warmup_steps: 1500,
            dual_steps: 300,
            batch_size: 8,
            warmup_lr: 3e-3,
            dual_lr: 3e-4,
            ..Self::default()
        }
    }

    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.batch_size == 0 {
            out.push("training.batch_size must be positive".into());
        }
        for (name, v) in [
            ("training.warmup_lr", self.warmup_lr),
            ("training.dual_lr", self.dual_lr),
            ("training.min_lr", self.min_lr),
            ("training.alpha", self.alpha),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                out.push(format!("{name} must be a finite non-negative number"));
            }
        }
        for (name, v) in [
            ("training.grad_clip", self.grad_clip),
            ("training.temperature", self.temperature),
            ("training.adam_eps", self.adam_eps),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                out.push(format!("{name} must be positive"));
            }
        }
        for (name, v) in [
            ("training.adam_beta1", self.adam_beta1),
            ("training.adam_beta2", self.adam_beta2),
            ("training.baseline_decay", self.baseline_decay),
        ] {
            if !(0.0..1.0).contains(&v) {
                out.push(format!("{name} must lie in [0, 1)"));
            }
        }
        if self.min_lr > self.warmup_lr.min(self.dual_lr) {
            out.push("training.min_lr exceeds a base learning rate".into());
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Warmup,
    Dual,
    Done,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Optimizers {
    pub prior: Adam,
    pub posterior: Adam,
    pub auxiliary: Adam,
    pub generator: Adam,
}

impl Optimizers {
    pub fn new(m: &LatentModels, cfg: &TrainingConfig) -> Self {
        let adam = |n| Adam::new(n, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
        Optimizers {
            prior: adam(m.prior.params.len()),
            posterior: adam(m.posterior.params.len()),
            auxiliary: adam(m.auxiliary.params.len()),
            generator: adam(m.generator.params.len()),
        }
    }

    fn get_mut(&mut self, g: Group) -> &mut Adam {
        match g {
            Group::Prior => &mut self.prior,
            Group::Posterior => &mut self.posterior,
            Group::Auxiliary => &mut self.auxiliary,
            Group::Generator => &mut self.generator,
        }
    }
}

/// Everything needed to continue training bit-for-bit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub models: LatentModels,
    pub optim: Optimizers,
    pub phase: Phase,
    pub step: usize,
    pub warmup_done: usize,
    pub dual_done: usize,
    pub rng: ChaCha8Rng,
    pub baseline_re1: f64,
    pub baseline_re2: f64,
    pub best_probe: Option<f64>,
    pub stale_probes: usize,
}

impl TrainState {
    pub fn new(model: &ModelConfig, cfg: &TrainingConfig, vocab: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let models = LatentModels::new(model, vocab, &mut rng);
        let optim = Optimizers::new(&models, cfg);
        TrainState {
            models,
            optim,
            phase: Phase::Warmup,
            step: 0,
            warmup_done: 0,
            dual_done: 0,
            rng,
            baseline_re1: 0.0,
            baseline_re2: 0.0,
            best_probe: None,
            stale_probes: 0,
        }
    }

    pub fn warmed_up(&self) -> bool {
        self.phase != Phase::Warmup
    }

    /// Leave warm-up: later phases start from fresh optimizer moments.
    pub fn finish_warmup(&mut self, cfg: &TrainingConfig) {
        self.optim = Optimizers::new(&self.models, cfg);
        self.phase = Phase::Dual;
    }

    fn require_warm(&self) -> Result<()> {
        if self.warmed_up() {
            Ok(())
        } else {
            Err(Error::State("dual-phase update requested before warm-up finished".into()))
        }
    }

    fn sample_batch<'c>(&mut self, cases: &'c [EncodedCase], size: usize) -> Vec<&'c EncodedCase> {
        (0..size)
            .map(|_| &cases[self.rng.gen_range(0..cases.len())])
            .collect()
    }
}

fn check_finite(value: f64, what: &str) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::Numeric(format!("non-finite {what}")))
    }
}

/// Clip each group to `clip` and take an Adam ascent step. Returns the
/// largest post-clip norm.
fn apply(state: &mut TrainState, grads: &mut Grads, groups: &[Group], lr: f64, clip: f64) -> Result<f64> {
    let mut largest: f64 = 0.0;
    for &g in groups {
        let grad = grads.get_mut(g);
        if grad.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numeric(format!("non-finite gradient in {}", g.name())));
        }
        let norm = clip_norm(grad, clip);
        largest = largest.max(norm.min(clip));
        let params = state.models.params_mut(g);
        state.optim.get_mut(g).ascend(params, grad, lr);
    }
    Ok(largest)
}

fn nonempty(batch: &[&EncodedCase]) -> Result<f64> {
    if batch.is_empty() {
        Err(Error::Argument("empty batch".into()))
    } else {
        Ok(1.0 / batch.len() as f64)
    }
}

/// One maximum-likelihood step on the pseudo labels. Returns the mean objective.
pub fn warmup_step(state: &mut TrainState, batch: &[&EncodedCase], cfg: &TrainingConfig, lr: f64) -> Result<f64> {
    let scale = nonempty(batch)?;
    let mut grads = Grads::zeros(&state.models);
    let mut total = 0.0;
    for case in batch {
        let labels = (case.labels.p_bar, case.labels.k_bar);
        total += warmup_objective(&state.models, &case.view(), labels, scale, Some(&mut grads))?.total();
    }
    apply(state, &mut grads, &Group::ALL, lr, cfg.grad_clip)?;
    check_finite(total * scale, "warm-up objective")
}

/// Primal then dual policy-gradient updates. Returns mean `(Re1, Re2)`.
pub fn dual_step(state: &mut TrainState, batch: &[&EncodedCase], cfg: &TrainingConfig, lr: f64) -> Result<(f64, f64)> {
    state.require_warm()?;
    let scale = nonempty(batch)?;

    let b1 = if cfg.baseline { state.baseline_re1 } else { 0.0 };
    let mut grads = Grads::zeros(&state.models);
    let mut re1 = 0.0;
    for case in batch {
        let v = case.view();
        let m = &state.models;
        let zp = m.post_zp(&v)?.dist.sample(&mut state.rng);
        let zk = m.post_zk(&v, zp)?.dist.sample(&mut state.rng);
        re1 += forward_policy_gradient(m, &v, zp, zk, b1, scale, Some(&mut grads))?;
    }
    apply(state, &mut grads, &[Group::Posterior], lr, cfg.grad_clip)?;

    let b2 = if cfg.baseline { state.baseline_re2 } else { 0.0 };
    let mut grads = Grads::zeros(&state.models);
    let mut re2 = 0.0;
    for case in batch {
        let v = case.view();
        let m = &state.models;
        let k_bar = case.labels.k_bar;
        let zp = m.aux_zp(&v, k_bar)?.dist.sample(&mut state.rng);
        re2 += inverse_policy_gradient(m, &v, zp, k_bar, b2, scale, Some(&mut grads))?;
    }
    apply(state, &mut grads, &[Group::Auxiliary], lr, cfg.grad_clip)?;

    let (re1, re2) = (re1 * scale, re2 * scale);
    if cfg.baseline {
        let d = cfg.baseline_decay;
        state.baseline_re1 = d * state.baseline_re1 + (1.0 - d) * re1;
        state.baseline_re2 = d * state.baseline_re2 + (1.0 - d) * re2;
    }
    Ok((check_finite(re1, "reward")?, check_finite(re2, "reward")?))
}

/// ELBO step on the prior parameters and the generator. Returns the mean terms.
pub fn theta_step(state: &mut TrainState, batch: &[&EncodedCase], cfg: &TrainingConfig, lr: f64) -> Result<ElboTerms> {
    state.require_warm()?;
    let scale = nonempty(batch)?;
    let mut grads = Grads::zeros(&state.models);
    let mut sum = ElboTerms {
        reconstruction: 0.0,
        kl_zp: 0.0,
        kl_zk: 0.0,
    };
    for case in batch {
        let t = theta_objective(&state.models, &case.view(), cfg.elbo_mode, &mut state.rng, scale, Some(&mut grads))?;
        sum.reconstruction += t.reconstruction * scale;
        sum.kl_zp += t.kl_zp * scale;
        sum.kl_zk += t.kl_zk * scale;
    }
    apply(state, &mut grads, &[Group::Prior, Group::Generator], lr, cfg.grad_clip)?;
    check_finite(sum.elbo(), "ELBO")?;
    Ok(sum)
}

/// Distill the auxiliary model into `q(Zp | C, R)`. Returns the mean objective.
pub fn distill_step(state: &mut TrainState, batch: &[&EncodedCase], cfg: &TrainingConfig, lr: f64) -> Result<f64> {
    state.require_warm()?;
    let scale = nonempty(batch)?;
    let mut grads = Grads::zeros(&state.models);
    let mut total = 0.0;
    for case in batch {
        let labels = (case.labels.p_bar, case.labels.k_bar);
        total += distill_objective(
            &state.models,
            &case.view(),
            labels,
            cfg.alpha,
            cfg.temperature,
            scale,
            Some(&mut grads),
        )?
        .value;
    }
    apply(state, &mut grads, &[Group::Posterior], lr, cfg.grad_clip)?;
    check_finite(total * scale, "distillation objective")
}

pub const PROBE_KEYS: [&str; 5] = ["prior_zp", "prior_zk", "post_zp", "post_zk", "aux_zp"];

/// Recall@1 of each distribution against the case targets, conditioning the
/// dependent models on the target of the other latent.
pub fn probe(m: &LatentModels, cases: &[EncodedCase]) -> Result<BTreeMap<String, f64>> {
    let mut rankings: [Vec<(Vec<f64>, usize)>; 5] = Default::default();
    for case in cases {
        let v = case.view();
        let (zp, zk) = case.target();
        let dists = [
            (m.prior_zp(&v)?, zp),
            (m.prior_zk(&v, &[zp])?, zk),
            (m.post_zp(&v)?, zp),
            (m.post_zk(&v, zp)?, zk),
            (m.aux_zp(&v, zk)?, zp),
        ];
        for (slot, (s, target)) in dists.into_iter().enumerate() {
            rankings[slot].push((s.dist.probs().to_vec(), target));
        }
    }
    PROBE_KEYS
        .iter()
        .zip(&rankings)
        .map(|(k, r)| Ok((k.to_string(), recall_at_k(r, 1)?)))
        .collect()
}

/// Mean of the probes the dual loop acts on.
pub fn dual_probe_score(p: &BTreeMap<String, f64>) -> f64 {
    (p["post_zk"] + p["aux_zp"] + p["post_zp"]) / 3.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub phase: Phase,
    pub loss: Option<f64>,
    pub elbo: Option<f64>,
    pub re1: Option<f64>,
    pub re2: Option<f64>,
    pub recall_probe: Option<BTreeMap<String, f64>>,
}

/// Where [`train`] stops.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Until {
    WarmupDone,
    Converged,
}

pub type LogSink<'a> = dyn FnMut(&LogRecord) -> Result<()> + 'a;
pub type CheckpointSink<'a> = dyn FnMut(&TrainState) -> Result<()> + 'a;

/// Run warm-up and then the dual loop from wherever `state` left off.
pub fn train(
    state: &mut TrainState,
    cfg: &TrainingConfig,
    cases: &[EncodedCase],
    until: Until,
    log: &mut LogSink<'_>,
    checkpoint: &mut CheckpointSink<'_>,
) -> Result<()> {
    if cases.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let probe_set = &cases[..cfg.probe_cases.min(cases.len())];
    loop {
        match state.phase {
            Phase::Warmup if state.warmup_done >= cfg.warmup_steps => {
                state.finish_warmup(cfg);
                if until == Until::WarmupDone {
                    return Ok(());
                }
                continue;
            }
            Phase::Warmup => {
                let lr = cosine_lr(cfg.warmup_lr, cfg.min_lr, state.warmup_done, cfg.warmup_steps);
                let batch = state.sample_batch(cases, cfg.batch_size);
                let obj = warmup_step(state, &batch, cfg, lr)?;
                state.warmup_done += 1;
                state.step += 1;
                log(&LogRecord {
                    step: state.step,
                    phase: Phase::Warmup,
                    loss: Some(-obj),
                    elbo: None,
                    re1: None,
                    re2: None,
                    recall_probe: None,
                })?;
            }
            Phase::Dual if state.dual_done >= cfg.dual_steps => {
                state.phase = Phase::Done;
                continue;
            }
            Phase::Dual => {
                let lr = cosine_lr(cfg.dual_lr, cfg.min_lr, state.dual_done, cfg.dual_steps);
                let batch = state.sample_batch(cases, cfg.batch_size);
                let (re1, re2) = dual_step(state, &batch, cfg, lr)?;
                let elbo = theta_step(state, &batch, cfg, lr)?;
                let dis = distill_step(state, &batch, cfg, lr)?;
                state.dual_done += 1;
                state.step += 1;
                let recall_probe = if cfg.probe_every > 0 && state.dual_done.is_multiple_of(cfg.probe_every) {
                    let p = probe(&state.models, probe_set)?;
                    let score = dual_probe_score(&p);
                    match state.best_probe {
                        Some(best) if score <= best => state.stale_probes += 1,
                        _ => {
                            state.best_probe = Some(score);
                            state.stale_probes = 0;
                        }
                    }
                    if cfg.patience > 0 && state.stale_probes >= cfg.patience {
                        state.phase = Phase::Done;
                    }
                    Some(p)
                } else {
                    None
                };
                log(&LogRecord {
                    step: state.step,
                    phase: Phase::Dual,
                    loss: Some(-dis),
                    elbo: Some(elbo.elbo()),
                    re1: Some(re1),
                    re2: Some(re2),
                    recall_probe,
                })?;
            }
            Phase::Done => return Ok(()),
        }
        if cfg.checkpoint_every > 0 && state.step.is_multiple_of(cfg.checkpoint_every) {
            checkpoint(state)?;
        }
    }
}
