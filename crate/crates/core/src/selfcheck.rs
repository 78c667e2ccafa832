//! Oracle checks runnable from a release binary.
//!
//! Each check compares a production code path against an independent
//! computation: full enumeration, finite differences, or hand-derived
//! metric values.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::latent::{Categorical, CaseView, Group, KlFn, LatentModels, ModelConfig};
use crate::metrics::{bleu, distinct, rouge, unigram_f1};
use crate::neural::gradcheck::{central_difference, max_relative_error};
use crate::training::{
    distill_objective, forward_policy_gradient, inverse_policy_gradient, theta_objective,
    warmup_objective, ElboMode, Grads, LatentTables,
};

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

/// A random case with `|P|, |K| ≤ 4` over a 20-token vocabulary.
#[derive(Debug, Clone)]
pub struct TinyCase {
    pub context: Vec<Vec<u32>>,
    pub response: Vec<u32>,
    pub memory: Vec<Vec<u32>>,
    pub knowledge: Vec<Vec<u32>>,
}

pub const TINY_VOCAB: usize = 20;

impl TinyCase {
    pub fn random<R: Rng>(rng: &mut R, np: usize, nk: usize) -> TinyCase {
        let seq = |rng: &mut R, max: usize| -> Vec<u32> {
            let len = rng.gen_range(1..=max);
            (0..len).map(|_| rng.gen_range(5..TINY_VOCAB as u32)).collect()
        };
        let nc = rng.gen_range(1..=2);
        TinyCase {
            context: (0..nc).map(|_| seq(rng, 3)).collect(),
            response: seq(rng, 4),
            memory: (0..np).map(|_| seq(rng, 3)).collect(),
            knowledge: (0..nk).map(|_| seq(rng, 3)).collect(),
        }
    }

    pub fn view(&self) -> CaseView<'_> {
        CaseView {
            context: &self.context,
            response: Some(&self.response),
            memory: &self.memory,
            knowledge: &self.knowledge,
        }
    }
}

pub fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        embed: 4,
        hidden: 5,
        repr: 4,
        head_hidden: 3,
        gen_embed: 3,
        gen_hidden: 4,
        init_scale: 0.8,
        ..ModelConfig::default()
    }
}

pub fn tiny_models(seed: u64) -> LatentModels {
    LatentModels::new(&tiny_model_config(), TINY_VOCAB, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn with_params(m: &LatentModels, g: Group, p: &[f64]) -> LatentModels {
    let mut out = m.clone();
    out.params_mut(g).copy_from_slice(p);
    out
}

/// Largest relative FD error of `objective` over the listed groups.
fn fd_error<F>(m: &LatentModels, groups: &[Group], grads: &Grads, objective: F) -> f64
where
    F: Fn(&LatentModels) -> f64,
{
    groups
        .iter()
        .map(|&g| {
            let fd = central_difference(|p| objective(&with_params(m, g, p)), m.params(g), 1e-5);
            max_relative_error(grads.get(g), &fd, 1e-5)
        })
        .fold(0.0, f64::max)
}

fn check(name: &str, passed: bool, detail: String) -> Check {
    Check {
        name: name.to_string(),
        passed,
        detail,
    }
}

fn elbo_bound(kl_fn: KlFn) -> Result<Check> {
    let mut worst_slack = f64::INFINITY;
    let mut worst_gap: f64 = 0.0;
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    for i in 0..40 {
        let m = tiny_models(1000 + i);
        let (np, nk) = (rng.gen_range(1..=4), rng.gen_range(1..=4));
        let case = TinyCase::random(&mut rng, np, nk);
        let t = LatentTables::build(&m, &case.view(), true)?;
        let lm = t.log_marginal()?;
        worst_slack = worst_slack.min(lm - t.elbo_with(kl_fn)?.elbo());
        let (qp, qk) = t.true_posterior()?;
        worst_gap = worst_gap.max((lm - t.elbo_for(&qp, &qk, kl_fn)?.elbo()).abs());
    }
    Ok(check(
        "elbo bound",
        worst_slack >= -1e-9 && worst_gap < 1e-9,
        format!("min slack {worst_slack:.3e}, max gap at true posterior {worst_gap:.3e}"),
    ))
}

fn gradients() -> Result<Check> {
    let mut worst: f64 = 0.0;
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    for seed in 0..3 {
        let m = tiny_models(2000 + seed);
        let case = TinyCase::random(&mut rng, 3, 3);
        let v = case.view();
        let labels = (1, 2);

        let mut g = Grads::zeros(&m);
        warmup_objective(&m, &v, labels, 1.0, Some(&mut g))?;
        worst = worst.max(fd_error(&m, &Group::ALL, &g, |mm| {
            warmup_objective(mm, &v, labels, 1.0, None).unwrap().total()
        }));

        let mut g = Grads::zeros(&m);
        distill_objective(&m, &v, labels, 0.5, 2.0, 1.0, Some(&mut g))?;
        worst = worst.max(fd_error(&m, &[Group::Posterior], &g, |mm| {
            distill_objective(mm, &v, labels, 0.5, 2.0, 1.0, None).unwrap().value
        }));

        let mut g = Grads::zeros(&m);
        let mut r = ChaCha8Rng::seed_from_u64(0);
        theta_objective(&m, &v, ElboMode::Enumerate, &mut r, 1.0, Some(&mut g))?;
        worst = worst.max(fd_error(&m, &[Group::Prior, Group::Generator], &g, |mm| {
            let mut r = ChaCha8Rng::seed_from_u64(0);
            // The posterior is the sampler here, so only θ and g move.
            let mut fixed = m.clone();
            fixed.prior = mm.prior.clone();
            fixed.generator = mm.generator.clone();
            theta_objective(&fixed, &v, ElboMode::Enumerate, &mut r, 1.0, None)
                .unwrap()
                .elbo()
        }));
    }
    Ok(check(
        "gradients vs finite differences",
        worst < 1e-4,
        format!("max relative error {worst:.3e}"),
    ))
}

/// `∂/∂logits Σ_i q_i r_i = q ⊙ (r - q·r)` via the softmax Jacobian.
fn expected_reward_dlogits(q: &Categorical, rewards: &[f64], scale: f64) -> Vec<f64> {
    let mean: f64 = q.probs().iter().zip(rewards).map(|(a, b)| a * b).sum();
    q.probs()
        .iter()
        .zip(rewards)
        .map(|(p, r)| scale * p * (r - mean))
        .collect()
}

fn reinforce() -> Result<Check> {
    let mut worst: f64 = 0.0;
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    for seed in 0..5 {
        let m = tiny_models(3000 + seed);
        let case = TinyCase::random(&mut rng, 3, 3);
        let v = case.view();

        // primal: E_{q(zp)} E_{q(zk|zp)} Re1 over the posterior parameters
        let q_zp = m.post_zp(&v)?.dist;
        let mut est = Grads::zeros(&m);
        let mut exact = vec![0.0; m.posterior.params.len()];
        for zp in 0..3 {
            let q_zk = m.post_zk(&v, zp)?;
            let rewards: Vec<f64> = (0..3)
                .map(|zk| Ok(m.aux_zp(&v, zk)?.dist.prob(zp)))
                .collect::<Result<_>>()?;
            for zk in 0..3 {
                let w = q_zp.prob(zp) * q_zk.dist.prob(zk);
                forward_policy_gradient(&m, &v, zp, zk, 0.0, w, Some(&mut est))?;
            }
            q_zk.backward(&m.posterior, &expected_reward_dlogits(&q_zk.dist, &rewards, q_zp.prob(zp)), &mut exact);
        }
        worst = worst.max(max_abs_diff(&est.posterior, &exact));

        // dual: E_{π(zp|k)} Re2 over the auxiliary parameters
        let k_bar = 1;
        let pi = m.aux_zp(&v, k_bar)?;
        let rewards: Vec<f64> = (0..3)
            .map(|zp| Ok(m.post_zk(&v, zp)?.dist.prob(k_bar)))
            .collect::<Result<_>>()?;
        let mut est = Grads::zeros(&m);
        for zp in 0..3 {
            inverse_policy_gradient(&m, &v, zp, k_bar, 0.0, pi.dist.prob(zp), Some(&mut est))?;
        }
        let mut exact = vec![0.0; m.auxiliary.params.len()];
        pi.backward(&m.auxiliary, &expected_reward_dlogits(&pi.dist, &rewards, 1.0), &mut exact);
        worst = worst.max(max_abs_diff(&est.auxiliary, &exact));
    }
    Ok(check(
        "policy gradients unbiased",
        worst < 1e-9,
        format!("max deviation {worst:.3e}"),
    ))
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn metric_fixtures() -> Result<Check> {
    let t = |s: &'static str| s.split_whitespace().collect::<Vec<_>>();
    let close = |a: f64, b: f64| (a - b).abs() < 1e-6;
    let mut failures = Vec::new();
    let mut expect = |name: &str, ok: bool| {
        if !ok {
            failures.push(name.to_string());
        }
    };
    expect("f1 identity", close(unigram_f1(&t("a b c"), &t("a b c"))?, 1.0));
    expect("f1 disjoint", close(unigram_f1(&t("a b"), &t("c d"))?, 0.0));
    expect("f1 partial", close(unigram_f1(&t("a b c"), &t("a b d"))?, 2.0 / 3.0));
    let b = bleu(&t("a b c d"), &t("a b c d"), 4)?;
    expect("bleu identity", b.values().all(|v| close(*v, 1.0)));
    expect("bleu disjoint", close(bleu(&t("a b"), &t("c d"), 4)?[&1], 0.0));
    let r = rouge(&t("a b c d e"), &t("a x c e"))?;
    expect("rouge-l lcs", close(r.rl, 2.0 * 0.6 * 0.75 / 1.35));
    expect("distinct unique", close(distinct(&[t("a b c")], 1)?, 1.0));
    expect("distinct repeated", close(distinct(&[t("a a a a")], 1)?, 0.25));
    expect("distinct duplicated", close(distinct(&[t("a b c"), t("a b c")], 1)?, 0.5));
    Ok(check(
        "metric fixtures",
        failures.is_empty(),
        if failures.is_empty() {
            "9 fixtures".into()
        } else {
            format!("failed: {}", failures.join(", "))
        },
    ))
}

fn distributions(kl_fn: KlFn) -> Result<Check> {
    let p = Categorical::from_probs(vec![1.0, 0.0])?;
    let q = Categorical::from_probs(vec![0.5, 0.5])?;
    let kl_ok = (kl_fn(&p, &q)? - 2f64.ln()).abs() < 1e-12 && kl_fn(&q, &q)?.abs() < 1e-15;
    let t = Categorical::from_probs(vec![0.8, 0.2])?.temper(0.5)?;
    let temper_ok = (t.prob(0) - 0.64 / 0.68).abs() < 1e-12;
    Ok(check(
        "categorical fixtures",
        kl_ok && temper_ok,
        format!("kl {kl_ok}, temper {temper_ok}"),
    ))
}

/// Run every check with the given KL implementation.
pub fn run_with(kl_fn: KlFn) -> Vec<Check> {
    let suite: [(&str, Box<dyn Fn() -> Result<Check>>); 5] = [
        ("elbo bound", Box::new(move || elbo_bound(kl_fn))),
        ("gradients vs finite differences", Box::new(gradients)),
        ("policy gradients unbiased", Box::new(reinforce)),
        ("metric fixtures", Box::new(metric_fixtures)),
        ("categorical fixtures", Box::new(move || distributions(kl_fn))),
    ];
    suite
        .iter()
        .map(|(name, f)| f().unwrap_or_else(|e| check(name, false, format!("error: {e}"))))
        .collect()
}

pub fn run() -> Vec<Check> {
    run_with(crate::latent::kl)
}

pub fn render(checks: &[Check]) -> String {
    checks
        .iter()
        .map(|c| {
            format!(
                "{} {}: {}",
                if c.passed { "PASS" } else { "FAIL" },
                c.name,
                c.detail
            )
        })
        .collect::<Vec<_>>()
        .join("\n")
}
