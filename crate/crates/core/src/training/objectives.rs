//! Per-case objectives and their analytic gradients. Every function here
//! returns the value to be *maximized* and, when given a [`Grads`], adds
//! `scale * ∂value/∂params` into it.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::latent::{
    dlogits_log_prob, dlogits_neg_kl, kl, Categorical, CaseView, Group, KlFn, LatentModels,
};
use crate::neural::Scored;

/// One gradient buffer per parameter group.
#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    pub prior: Vec<f64>,
    pub posterior: Vec<f64>,
    pub auxiliary: Vec<f64>,
    pub generator: Vec<f64>,
}

impl Grads {
    pub fn zeros(m: &LatentModels) -> Self {
        Grads {
            prior: vec![0.0; m.prior.params.len()],
            posterior: vec![0.0; m.posterior.params.len()],
            auxiliary: vec![0.0; m.auxiliary.params.len()],
            generator: vec![0.0; m.generator.params.len()],
        }
    }

    pub fn get(&self, g: Group) -> &[f64] {
        match g {
            Group::Prior => &self.prior,
            Group::Posterior => &self.posterior,
            Group::Auxiliary => &self.auxiliary,
            Group::Generator => &self.generator,
        }
    }

    pub fn get_mut(&mut self, g: Group) -> &mut [f64] {
        match g {
            Group::Prior => &mut self.prior,
            Group::Posterior => &mut self.posterior,
            Group::Auxiliary => &mut self.auxiliary,
            Group::Generator => &mut self.generator,
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in Group::ALL {
            self.get_mut(g).iter_mut().for_each(|x| *x *= s);
        }
    }
}

fn backprop(m: &LatentModels, group: Group, scored: &Scored, dlogits: &[f64], grads: &mut Option<&mut Grads>) {
    if let Some(g) = grads.as_deref_mut() {
        scored.backward(m.net(group), dlogits, g.get_mut(group));
    }
}

/// The six log-likelihood terms maximized during warm-up.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WarmupTerms {
    pub prior_zp: f64,
    pub prior_zk: f64,
    pub post_zp: f64,
    pub post_zk: f64,
    pub aux_zp: f64,
    pub generator: f64,
}

impl WarmupTerms {
    pub fn total(&self) -> f64 {
        self.prior_zp + self.prior_zk + self.post_zp + self.post_zk + self.aux_zp + self.generator
    }

    /// Sum of the five selection terms, without the generator.
    pub fn selection(&self) -> f64 {
        self.total() - self.generator
    }
}

/// Log-probability of the pseudo labels under every model, plus the
/// generator likelihood of the response given them.
pub fn warmup_objective(
    m: &LatentModels,
    v: &CaseView<'_>,
    (p_bar, k_bar): (usize, usize),
    scale: f64,
    mut grads: Option<&mut Grads>,
) -> Result<WarmupTerms> {
    let mut term = |group: Group, s: Scored, target: usize| -> f64 {
        backprop(m, group, &s, &dlogits_log_prob(&s.dist, target, scale), &mut grads);
        s.dist.log_prob(target)
    };
    let prior_zp = term(Group::Prior, m.prior_zp(v)?, p_bar);
    let prior_zk = term(Group::Prior, m.prior_zk(v, &[p_bar])?, k_bar);
    let post_zp = term(Group::Posterior, m.post_zp(v)?, p_bar);
    let post_zk = term(Group::Posterior, m.post_zk(v, p_bar)?, k_bar);
    let aux_zp = term(Group::Auxiliary, m.aux_zp(v, k_bar)?, p_bar);
    let generator = match grads {
        Some(g) => m.reconstruction_grad(v, p_bar, k_bar, scale, &mut g.generator)?,
        None => m.reconstruction(v, p_bar, k_bar)?,
    };
    Ok(WarmupTerms {
        prior_zp,
        prior_zk,
        post_zp,
        post_zk,
        aux_zp,
        generator,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ElboMode {
    /// Exact expectations over the full `|P| x |K|` grid.
    Enumerate,
    /// One draw of each latent for the reconstruction term.
    #[default]
    Sample,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ElboTerms {
    pub reconstruction: f64,
    pub kl_zp: f64,
    /// `E_q(Zp) KL(q(Zk|Zp) ‖ p(Zk|Zp))`
    pub kl_zk: f64,
}

impl ElboTerms {
    pub fn elbo(&self) -> f64 {
        self.reconstruction - self.kl_zk - self.kl_zp
    }
}

/// Every distribution and likelihood the ELBO touches for one case.
#[derive(Debug, Clone)]
pub struct LatentTables {
    pub prior_zp: Scored,
    pub prior_zk: Vec<Scored>,
    pub post_zp: Scored,
    pub post_zk: Vec<Scored>,
    /// `log g(R | C, zp, zk)`, present in enumeration mode.
    pub log_g: Option<Vec<Vec<f64>>>,
}

impl LatentTables {
    pub fn build(m: &LatentModels, v: &CaseView<'_>, with_likelihoods: bool) -> Result<Self> {
        let np = v.memory.len();
        let prior_zp = m.prior_zp(v)?;
        let post_zp = m.post_zp(v)?;
        let prior_zk = (0..np).map(|zp| m.prior_zk(v, &[zp])).collect::<Result<Vec<_>>>()?;
        let post_zk = (0..np).map(|zp| m.post_zk(v, zp)).collect::<Result<Vec<_>>>()?;
        let log_g = if with_likelihoods {
            Some(
                (0..np)
                    .map(|zp| {
                        (0..v.knowledge.len())
                            .map(|zk| m.reconstruction(v, zp, zk))
                            .collect::<Result<Vec<_>>>()
                    })
                    .collect::<Result<Vec<_>>>()?,
            )
        } else {
            None
        };
        Ok(LatentTables {
            prior_zp,
            prior_zk,
            post_zp,
            post_zk,
            log_g,
        })
    }

    fn grid(&self) -> Result<&Vec<Vec<f64>>> {
        self.log_g
            .as_ref()
            .ok_or_else(|| Error::State("likelihood grid was not computed".into()))
    }

    pub fn prior(&self) -> (Categorical, Vec<Categorical>) {
        (
            self.prior_zp.dist.clone(),
            self.prior_zk.iter().map(|s| s.dist.clone()).collect(),
        )
    }

    pub fn posterior(&self) -> (Categorical, Vec<Categorical>) {
        (
            self.post_zp.dist.clone(),
            self.post_zk.iter().map(|s| s.dist.clone()).collect(),
        )
    }

    /// Exact ELBO under the model posterior.
    pub fn elbo(&self) -> Result<ElboTerms> {
        self.elbo_with(kl)
    }

    pub fn elbo_with(&self, kl_fn: KlFn) -> Result<ElboTerms> {
        let (q_zp, q_zk) = self.posterior();
        self.elbo_for(&q_zp, &q_zk, kl_fn)
    }

    /// Exact ELBO for an arbitrary variational distribution.
    pub fn elbo_for(&self, q_zp: &Categorical, q_zk: &[Categorical], kl_fn: KlFn) -> Result<ElboTerms> {
        let log_g = self.grid()?;
        let (p_zp, p_zk) = self.prior();
        let mut reconstruction = 0.0;
        let mut kl_zk = 0.0;
        for zp in 0..q_zp.len() {
            let w = q_zp.prob(zp);
            if w == 0.0 {
                continue;
            }
            for zk in 0..q_zk[zp].len() {
                let wk = q_zk[zp].prob(zk);
                if wk > 0.0 {
                    reconstruction += w * wk * log_g[zp][zk];
                }
            }
            kl_zk += w * kl_fn(&q_zk[zp], &p_zk[zp])?;
        }
        Ok(ElboTerms {
            reconstruction,
            kl_zp: kl_fn(q_zp, &p_zp)?,
            kl_zk,
        })
    }

    /// `log Σ_{zp,zk} p(zp) p(zk|zp) g(R|zp,zk)`
    pub fn log_marginal(&self) -> Result<f64> {
        let log_g = self.grid()?;
        let mut terms = Vec::new();
        for (zp, row) in log_g.iter().enumerate() {
            for (zk, lg) in row.iter().enumerate() {
                terms.push(self.prior_zp.dist.log_prob(zp) + self.prior_zk[zp].dist.log_prob(zk) + lg);
            }
        }
        let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Ok(max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln())
    }

    /// Exact posterior `p(Zp, Zk | C, R)` in the factorized form.
    pub fn true_posterior(&self) -> Result<(Categorical, Vec<Categorical>)> {
        let log_g = self.grid()?;
        let mut zp_logits = Vec::new();
        let mut zk = Vec::new();
        for (zp, row) in log_g.iter().enumerate() {
            let joint: Vec<f64> = row
                .iter()
                .enumerate()
                .map(|(k, lg)| self.prior_zk[zp].dist.log_prob(k) + lg)
                .collect();
            let max = joint.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + joint.iter().map(|t| (t - max).exp()).sum::<f64>().ln();
            zp_logits.push(self.prior_zp.dist.log_prob(zp) + lse);
            zk.push(Categorical::from_logits(&joint)?);
        }
        Ok((Categorical::from_logits(&zp_logits)?, zk))
    }
}

/// ELBO as a function of the prior parameters and the generator, with the
/// posterior held fixed as the sampler. The two KL terms are always exact;
/// the reconstruction term follows `mode`.
pub fn theta_objective<R: Rng + ?Sized>(
    m: &LatentModels,
    v: &CaseView<'_>,
    mode: ElboMode,
    rng: &mut R,
    scale: f64,
    mut grads: Option<&mut Grads>,
) -> Result<ElboTerms> {
    let enumerate = mode == ElboMode::Enumerate;
    let tables = LatentTables::build(m, v, enumerate)?;
    let (q_zp, q_zk) = tables.posterior();
    let (p_zp, p_zk) = tables.prior();

    let mut kl_zk = 0.0;
    backprop(m, Group::Prior, &tables.prior_zp, &dlogits_neg_kl(&q_zp, &p_zp, scale), &mut grads);
    for zp in 0..q_zp.len() {
        let w = q_zp.prob(zp);
        kl_zk += w * kl(&q_zk[zp], &p_zk[zp])?;
        backprop(
            m,
            Group::Prior,
            &tables.prior_zk[zp],
            &dlogits_neg_kl(&q_zk[zp], &p_zk[zp], scale * w),
            &mut grads,
        );
    }
    let kl_zp = kl(&q_zp, &p_zp)?;

    let reconstruction = if enumerate {
        let log_g = tables.grid()?;
        let mut total = 0.0;
        for zp in 0..q_zp.len() {
            for zk in 0..q_zk[zp].len() {
                let w = q_zp.prob(zp) * q_zk[zp].prob(zk);
                total += w * log_g[zp][zk];
                if let Some(g) = grads.as_deref_mut() {
                    if w > 0.0 {
                        m.reconstruction_grad(v, zp, zk, scale * w, &mut g.generator)?;
                    }
                }
            }
        }
        total
    } else {
        let zp = q_zp.sample(rng);
        let zk = q_zk[zp].sample(rng);
        match grads {
            Some(g) => m.reconstruction_grad(v, zp, zk, scale, &mut g.generator)?,
            None => m.reconstruction(v, zp, zk)?,
        }
    };
    Ok(ElboTerms {
        reconstruction,
        kl_zp,
        kl_zk,
    })
}

/// Primal task: `Re1 = π(Zp = zp | C, R, zk)` rewards `log q(Zk = zk | C, R, zp)`.
/// The gradient weight is `Re1 - baseline`; the returned value is `Re1`.
pub fn forward_policy_gradient(
    m: &LatentModels,
    v: &CaseView<'_>,
    zp: usize,
    zk: usize,
    baseline: f64,
    scale: f64,
    mut grads: Option<&mut Grads>,
) -> Result<f64> {
    let re1 = m.aux_zp(v, zk)?.dist.prob(zp);
    let q = m.post_zk(v, zp)?;
    backprop(m, Group::Posterior, &q, &dlogits_log_prob(&q.dist, zk, scale * (re1 - baseline)), &mut grads);
    Ok(re1)
}

/// Dual task: `Re2 = q(Zk = k_bar | C, R, zp)` rewards `log π(Zp = zp | C, R, k_bar)`.
pub fn inverse_policy_gradient(
    m: &LatentModels,
    v: &CaseView<'_>,
    zp: usize,
    k_bar: usize,
    baseline: f64,
    scale: f64,
    mut grads: Option<&mut Grads>,
) -> Result<f64> {
    let re2 = m.post_zk(v, zp)?.dist.prob(k_bar);
    let pi = m.aux_zp(v, k_bar)?;
    backprop(m, Group::Auxiliary, &pi, &dlogits_log_prob(&pi.dist, zp, scale * (re2 - baseline)), &mut grads);
    Ok(re2)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistillTerms {
    pub kl: f64,
    pub log_p_bar: f64,
    pub value: f64,
}

/// `-KL(π^T(Zp|C,R,k_bar) ‖ q^T(Zp|C,R)) + α log q(p_bar|C,R)` with the teacher frozen.
pub fn distill_objective(
    m: &LatentModels,
    v: &CaseView<'_>,
    (p_bar, k_bar): (usize, usize),
    alpha: f64,
    temperature: f64,
    scale: f64,
    mut grads: Option<&mut Grads>,
) -> Result<DistillTerms> {
    let teacher = m.aux_zp(v, k_bar)?.dist.temper(temperature)?;
    let q = m.post_zp(v)?;
    let student = q.dist.temper(temperature)?;
    let divergence = kl(&teacher, &student)?;
    let log_p_bar = q.dist.log_prob(p_bar);
    if grads.is_some() {
        let soft = dlogits_neg_kl(&teacher, &student, scale / temperature);
        let hard = dlogits_log_prob(&q.dist, p_bar, scale * alpha);
        let d: Vec<f64> = soft.iter().zip(&hard).map(|(a, b)| a + b).collect();
        backprop(m, Group::Posterior, &q, &d, &mut grads);
    }
    Ok(DistillTerms {
        kl: divergence,
        log_p_bar,
        value: -divergence + alpha * log_p_bar,
    })
}
