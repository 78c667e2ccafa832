//! Categorical distributions over memory fragments and knowledge candidates,
//! and the five scoring models built on them.
//!
//! | model | params | composition |
//! |---|---|---|
//! | `p(Zp \| C)` | prior, head 0 | C, P_i |
//! | `p(Zk \| C, Zp)` | prior, head 1 | C, P_sel, K_i |
//! | `q(Zp \| C, R)` | posterior, head 0 | C, R, P_i |
//! | `q(Zk \| C, R, Zp)` | posterior, head 1 | C, R, P_sel, K_i |
//! | `π(Zp \| C, R, Zk)` | auxiliary, head 0 | C, R, K_sel, P_i |

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::composer::{Composer, DistributionKind, Segments};
use crate::corpus::{EncodedCase, SpecialToken};
use crate::error::{Error, Result};
use crate::neural::{
    score_with_caches, GenConditioning, Generator, GeneratorShape, Scored, ScorerNet, ScorerShape,
};

/// Floor on the second argument of [`kl`].
pub const KL_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct Categorical {
    probs: Vec<f64>,
    log_probs: Vec<f64>,
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

impl Categorical {
    pub fn from_logits(logits: &[f64]) -> Result<Self> {
        if logits.is_empty() {
            return Err(Error::Argument("empty distribution".into()));
        }
        if logits.iter().any(|l| !l.is_finite()) {
            return Err(Error::Numeric("non-finite logit".into()));
        }
        let lse = log_sum_exp(logits);
        let log_probs: Vec<f64> = logits.iter().map(|l| l - lse).collect();
        let probs = log_probs.iter().map(|l| l.exp()).collect();
        Ok(Categorical { probs, log_probs })
    }

    pub fn from_probs(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::Argument("empty distribution".into()));
        }
        let sum: f64 = probs.iter().sum();
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Numeric(format!("not a distribution (sum {sum})")));
        }
        let log_probs = probs.iter().map(|p| p.ln()).collect();
        Ok(Categorical { probs, log_probs })
    }

    pub fn uniform(n: usize) -> Result<Self> {
        Self::from_logits(&vec![0.0; n])
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn log_probs(&self) -> &[f64] {
        &self.log_probs
    }

    pub fn prob(&self, i: usize) -> f64 {
        self.probs[i]
    }

    pub fn log_prob(&self, i: usize) -> f64 {
        self.log_probs[i]
    }

    /// Inverse-CDF draw from one uniform variate.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut last = 0;
        for (i, &p) in self.probs.iter().enumerate() {
            if p > 0.0 {
                last = i;
                acc += p;
                if u < acc {
                    return i;
                }
            }
        }
        last
    }

    /// Highest-probability index; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        self.top_m(1)[0]
    }

    /// The `m` most probable indices in descending probability order.
    pub fn top_m(&self, m: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.sort_by(|&a, &b| {
            self.log_probs[b]
                .partial_cmp(&self.log_probs[a])
                .unwrap()
                .then(a.cmp(&b))
        });
        idx.truncate(m.clamp(1, self.len()));
        idx
    }

    /// `p_i^(1/T)` renormalized, computed in log space.
    pub fn temper(&self, t: f64) -> Result<Self> {
        if !(t > 0.0) || !t.is_finite() {
            return Err(Error::Argument(format!("temperature must be positive, got {t}")));
        }
        let scaled: Vec<f64> = self.log_probs.iter().map(|l| l / t).collect();
        if scaled.iter().all(|l| l.is_finite()) {
            return Self::from_logits(&scaled);
        }
        let lse = log_sum_exp(&scaled);
        let log_probs: Vec<f64> = scaled.iter().map(|l| l - lse).collect();
        let probs = log_probs.iter().map(|l| l.exp()).collect();
        Ok(Categorical { probs, log_probs })
    }
}

/// `KL(p ‖ q) = Σ p_i (log p_i - log q_i)` with `q_i` floored at [`KL_FLOOR`].
pub fn kl(p: &Categorical, q: &Categorical) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::Numeric(format!(
            "KL over supports of size {} and {}",
            p.len(),
            q.len()
        )));
    }
    let floor = KL_FLOOR.ln();
    let mut total = 0.0;
    for i in 0..p.len() {
        if p.probs[i] == 0.0 {
            continue;
        }
        if q.probs[i] == 0.0 && q.log_probs[i] == f64::NEG_INFINITY {
            return Err(Error::Numeric(format!("KL support violation at index {i}")));
        }
        total += p.probs[i] * (p.log_probs[i] - q.log_probs[i].max(floor));
    }
    Ok(total)
}

/// Signature shared by [`kl`] and test doubles of it.
pub type KlFn = fn(&Categorical, &Categorical) -> Result<f64>;

/// `∂/∂logits log q_target = e_target - q`, scaled.
pub fn dlogits_log_prob(q: &Categorical, target: usize, scale: f64) -> Vec<f64> {
    q.probs()
        .iter()
        .enumerate()
        .map(|(i, &p)| scale * (if i == target { 1.0 } else { 0.0 } - p))
        .collect()
}

/// `∂/∂logits_b [-KL(a ‖ b)] = a - b`, scaled.
pub fn dlogits_neg_kl(a: &Categorical, b: &Categorical, scale: f64) -> Vec<f64> {
    a.probs()
        .iter()
        .zip(b.probs())
        .map(|(x, y)| scale * (x - y))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub embed: usize,
    pub hidden: usize,
    pub repr: usize,
    pub head_hidden: usize,
    pub gen_embed: usize,
    pub gen_hidden: usize,
    pub init_scale: f64,
    pub composer: Composer,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            embed: 32,
            hidden: 32,
            repr: 32,
            head_hidden: 16,
            gen_embed: 32,
            gen_hidden: 32,
            init_scale: 0.1,
            composer: Composer::default(),
        }
    }
}

impl ModelConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (name, v) in [
            ("model.embed", self.embed),
            ("model.hidden", self.hidden),
            ("model.repr", self.repr),
            ("model.head_hidden", self.head_hidden),
            ("model.gen_embed", self.gen_embed),
            ("model.gen_hidden", self.gen_hidden),
        ] {
            if v == 0 {
                out.push(format!("{name} must be positive"));
            }
        }
        if !(self.init_scale >= 0.0 && self.init_scale.is_finite()) {
            out.push("model.init_scale must be a finite non-negative number".into());
        }
        if self.composer.context_floor < 8 {
            out.push("model.composer.context_floor must be at least 8".into());
        }
        if self.composer.max_seq_len < self.composer.context_floor + 8 {
            out.push("model.composer.max_seq_len too small for the context floor".into());
        }
        out
    }
}

/// Parameter groups of the latent models.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Group {
    /// Prior pair, `θ`.
    Prior,
    /// Posterior pair, `φ`.
    Posterior,
    /// Auxiliary inverse model, `ψ`.
    Auxiliary,
    Generator,
}

impl Group {
    pub const ALL: [Group; 4] = [
        Group::Prior,
        Group::Posterior,
        Group::Auxiliary,
        Group::Generator,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Group::Prior => "theta",
            Group::Posterior => "phi",
            Group::Auxiliary => "psi",
            Group::Generator => "generator",
        }
    }
}

pub const HEAD_ZP: usize = 0;
pub const HEAD_ZK: usize = 1;

/// Borrowed inputs of one case. `response` is absent at inference time.
#[derive(Debug, Clone, Copy)]
pub struct CaseView<'a> {
    pub context: &'a [Vec<u32>],
    pub response: Option<&'a [u32]>,
    pub memory: &'a [Vec<u32>],
    pub knowledge: &'a [Vec<u32>],
}

impl EncodedCase {
    pub fn view(&self) -> CaseView<'_> {
        CaseView {
            context: &self.context,
            response: Some(&self.response),
            memory: &self.memory,
            knowledge: &self.knowledge,
        }
    }
}

/// The generator is trained to emit the response followed by the end token.
pub fn generation_target(response: &[u32]) -> Vec<u32> {
    let mut t = response.to_vec();
    t.push(SpecialToken::Eos.id());
    t
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentModels {
    pub prior: ScorerNet,
    pub posterior: ScorerNet,
    pub auxiliary: ScorerNet,
    pub generator: Generator,
    pub composer: Composer,
}

fn check_index(index: usize, len: usize) -> Result<()> {
    if index >= len {
        Err(Error::Index { index, len })
    } else {
        Ok(())
    }
}

impl LatentModels {
    pub fn new<R: Rng>(cfg: &ModelConfig, vocab: usize, rng: &mut R) -> Self {
        let shape = |heads| ScorerShape {
            vocab,
            embed: cfg.embed,
            hidden: cfg.hidden,
            repr: cfg.repr,
            head_hidden: cfg.head_hidden,
            heads,
        };
        let prior = ScorerNet::new(shape(2), cfg.init_scale, rng);
        let posterior = ScorerNet::new(shape(2), cfg.init_scale, rng);
        let auxiliary = ScorerNet::new(shape(1), cfg.init_scale, rng);
        let generator = Generator::new(
            GeneratorShape {
                vocab,
                embed: cfg.gen_embed,
                hidden: cfg.gen_hidden,
            },
            cfg.init_scale,
            rng,
        );
        LatentModels {
            prior,
            posterior,
            auxiliary,
            generator,
            composer: cfg.composer,
        }
    }

    pub fn params(&self, g: Group) -> &[f64] {
        match g {
            Group::Prior => &self.prior.params,
            Group::Posterior => &self.posterior.params,
            Group::Auxiliary => &self.auxiliary.params,
            Group::Generator => &self.generator.params,
        }
    }

    pub fn params_mut(&mut self, g: Group) -> &mut Vec<f64> {
        match g {
            Group::Prior => &mut self.prior.params,
            Group::Posterior => &mut self.posterior.params,
            Group::Auxiliary => &mut self.auxiliary.params,
            Group::Generator => &mut self.generator.params,
        }
    }

    pub fn net(&self, g: Group) -> &ScorerNet {
        match g {
            Group::Prior => &self.prior,
            Group::Posterior => &self.posterior,
            Group::Auxiliary => &self.auxiliary,
            Group::Generator => panic!("the generator is not a scorer"),
        }
    }

    fn memory_zp(&self, v: &CaseView<'_>) -> Result<()> {
        if v.memory.is_empty() {
            return Err(Error::Argument("empty memory set".into()));
        }
        Ok(())
    }

    fn selected<'a>(&self, v: &CaseView<'a>, zp: &[usize]) -> Result<Vec<&'a [u32]>> {
        if zp.is_empty() {
            return Err(Error::Argument("no memory fragment selected".into()));
        }
        zp.iter()
            .map(|&i| {
                check_index(i, v.memory.len())?;
                Ok(v.memory[i].as_slice())
            })
            .collect()
    }

    fn score_memory(
        &self,
        net: &ScorerNet,
        kind: DistributionKind,
        v: &CaseView<'_>,
        response: Option<&[u32]>,
        knowledge: Option<&[u32]>,
    ) -> Result<Scored> {
        self.memory_zp(v)?;
        let seqs = v
            .memory
            .iter()
            .map(|frag| {
                let mem = [frag.as_slice()];
                self.composer.compose(
                    kind,
                    &Segments {
                        context: v.context,
                        response,
                        memory: Some(&mem),
                        knowledge,
                    },
                )
            })
            .collect::<Result<Vec<_>>>()?;
        score_with_caches(net, HEAD_ZP, &seqs)
    }

    fn score_knowledge(
        &self,
        net: &ScorerNet,
        kind: DistributionKind,
        v: &CaseView<'_>,
        response: Option<&[u32]>,
        zp: &[usize],
    ) -> Result<Scored> {
        if v.knowledge.is_empty() {
            return Err(Error::Argument("empty knowledge set".into()));
        }
        let mem = self.selected(v, zp)?;
        let seqs = v
            .knowledge
            .iter()
            .map(|k| {
                self.composer.compose(
                    kind,
                    &Segments {
                        context: v.context,
                        response,
                        memory: Some(&mem),
                        knowledge: Some(k),
                    },
                )
            })
            .collect::<Result<Vec<_>>>()?;
        score_with_caches(net, HEAD_ZK, &seqs)
    }

    /// `p_θ(Zp | C)`
    pub fn prior_zp(&self, v: &CaseView<'_>) -> Result<Scored> {
        self.score_memory(&self.prior, DistributionKind::PriorZp, v, None, None)
    }

    /// `p_θ(Zk | C, Zp)`; several fragments are concatenated in the given order.
    pub fn prior_zk(&self, v: &CaseView<'_>, zp: &[usize]) -> Result<Scored> {
        self.score_knowledge(&self.prior, DistributionKind::PriorZk, v, None, zp)
    }

    /// `q_φ(Zp | C, R)`
    pub fn post_zp(&self, v: &CaseView<'_>) -> Result<Scored> {
        self.score_memory(&self.posterior, DistributionKind::PostZp, v, v.response, None)
    }

    /// `q_φ(Zk | C, R, Zp)`
    pub fn post_zk(&self, v: &CaseView<'_>, zp: usize) -> Result<Scored> {
        self.score_knowledge(&self.posterior, DistributionKind::PostZk, v, v.response, &[zp])
    }

    /// `π_ψ(Zp | C, R, Zk)`
    pub fn aux_zp(&self, v: &CaseView<'_>, zk: usize) -> Result<Scored> {
        check_index(zk, v.knowledge.len())?;
        self.score_memory(
            &self.auxiliary,
            DistributionKind::AuxZp,
            v,
            v.response,
            Some(&v.knowledge[zk]),
        )
    }

    pub fn conditioning(&self, v: &CaseView<'_>, zp: &[usize], zk: usize) -> Result<GenConditioning> {
        let mem = self.selected(v, zp)?;
        check_index(zk, v.knowledge.len())?;
        Ok(GenConditioning::new(v.context, &mem, &v.knowledge[zk]))
    }

    /// `log g(R, [EOS] | C, Zp, Zk)`
    pub fn reconstruction(&self, v: &CaseView<'_>, zp: usize, zk: usize) -> Result<f64> {
        let r = v
            .response
            .ok_or_else(|| Error::Argument("reconstruction needs a response".into()))?;
        let cond = self.conditioning(v, &[zp], zk)?;
        self.generator.log_likelihood(&cond, &generation_target(r))
    }

    /// Reconstruction with `scale * ∂/∂params` added into `grad`.
    pub fn reconstruction_grad(
        &self,
        v: &CaseView<'_>,
        zp: usize,
        zk: usize,
        scale: f64,
        grad: &mut [f64],
    ) -> Result<f64> {
        let r = v
            .response
            .ok_or_else(|| Error::Argument("reconstruction needs a response".into()))?;
        let cond = self.conditioning(v, &[zp], zk)?;
        self.generator
            .log_likelihood_grad(&cond, &generation_target(r), scale, grad)
    }
}
