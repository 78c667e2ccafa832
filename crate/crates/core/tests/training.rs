mod common;

use common::small_corpus;
use persona_kgc::corpus::EncodedCase;
use persona_kgc::latent::{Group, LatentModels, ModelConfig};
use persona_kgc::selfcheck::{tiny_model_config, TinyCase, TINY_VOCAB};
use persona_kgc::training::checkpoint::{config_hash, Checkpoint, CHECKPOINT_VERSION};
use persona_kgc::training::{
    distill_objective, dual_step, forward_policy_gradient, theta_objective, theta_step, train,
    warmup_objective, warmup_step, ElboMode, Grads, LatentTables, LogRecord, Phase, TrainState,
    TrainingConfig, Until,
};
use persona_kgc::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn model_cfg() -> ModelConfig {
    ModelConfig {
        embed: 8,
        hidden: 8,
        repr: 8,
        head_hidden: 4,
        gen_embed: 8,
        gen_hidden: 8,
        ..ModelConfig::default()
    }
}

fn quick_cfg() -> TrainingConfig {
    TrainingConfig {
        warmup_steps: 30,
        dual_steps: 20,
        batch_size: 4,
        warmup_lr: 3e-3,
        dual_lr: 1e-3,
        probe_every: 5,
        probe_cases: 10,
        ..TrainingConfig::default()
    }
}

fn zero_models(np_vocab: usize) -> LatentModels {
    let cfg = ModelConfig {
        init_scale: 0.0,
        ..tiny_model_config()
    };
    LatentModels::new(&cfg, np_vocab, &mut ChaCha8Rng::seed_from_u64(0))
}

fn label_log_prob(m: &LatentModels, batch: &[&EncodedCase]) -> f64 {
    batch
        .iter()
        .map(|c| {
            warmup_objective(m, &c.view(), (c.labels.p_bar, c.labels.k_bar), 1.0, None)
                .unwrap()
                .selection()
        })
        .sum::<f64>()
        / batch.len() as f64
}

#[test]
fn warmup_raises_pseudo_label_likelihood() {
    let (vocab, cases) = small_corpus(1);
    let cfg = quick_cfg();
    let mut state = TrainState::new(&model_cfg(), &cfg, vocab.len());
    let batch: Vec<&EncodedCase> = cases.iter().take(4).collect();
    let before = label_log_prob(&state.models, &batch);
    assert!(before.is_finite());
    for _ in 0..200 {
        warmup_step(&mut state, &batch, &cfg, 3e-3).unwrap();
    }
    let after = label_log_prob(&state.models, &batch);
    assert!(after > before, "{before} -> {after}");
}

#[test]
fn zero_learning_rate_leaves_parameters() {
    let (vocab, cases) = small_corpus(1);
    let cfg = quick_cfg();
    let mut state = TrainState::new(&model_cfg(), &cfg, vocab.len());
    let before = state.models.clone();
    let batch: Vec<&EncodedCase> = cases.iter().take(4).collect();
    warmup_step(&mut state, &batch, &cfg, 0.0).unwrap();
    for g in Group::ALL {
        assert_eq!(state.models.params(g), before.params(g));
    }
}

#[test]
fn dual_updates_require_warm_up() {
    let (vocab, cases) = small_corpus(1);
    let cfg = quick_cfg();
    let mut state = TrainState::new(&model_cfg(), &cfg, vocab.len());
    let batch: Vec<&EncodedCase> = cases.iter().take(2).collect();
    assert!(matches!(dual_step(&mut state, &batch, &cfg, 1e-3), Err(Error::State(_))));
    assert!(matches!(theta_step(&mut state, &batch, &cfg, 1e-3), Err(Error::State(_))));
}

#[test]
fn elbo_of_latent_free_model_is_log_likelihood() {
    let m = zero_models(TINY_VOCAB);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..10 {
        let case = TinyCase::random(&mut rng, 3, 4);
        let t = LatentTables::build(&m, &case.view(), true).unwrap().elbo().unwrap();
        let n = case.response.len() as f64 + 1.0;
        assert!(t.kl_zp.abs() < 1e-15 && t.kl_zk.abs() < 1e-15);
        assert!((t.elbo() + n * (TINY_VOCAB as f64).ln()).abs() < 1e-12);
    }
}

#[test]
fn kl_gradients_vanish_when_posterior_equals_prior() {
    let m = zero_models(TINY_VOCAB);
    let case = TinyCase::random(&mut ChaCha8Rng::seed_from_u64(1), 3, 3);
    let mut g = Grads::zeros(&m);
    theta_objective(&m, &case.view(), ElboMode::Enumerate, &mut ChaCha8Rng::seed_from_u64(0), 1.0, Some(&mut g))
        .unwrap();
    assert!(g.prior.iter().all(|x| x.abs() < 1e-8));
}

#[test]
fn distillation_at_equality() {
    let m = zero_models(TINY_VOCAB);
    let case = TinyCase::random(&mut ChaCha8Rng::seed_from_u64(2), 4, 3);
    let v = case.view();
    let mut g = Grads::zeros(&m);
    let d = distill_objective(&m, &v, (1, 2), 0.5, 2.0, 1.0, Some(&mut g)).unwrap();
    assert!(d.kl.abs() < 1e-15);
    assert!((d.value - 0.5 * d.log_p_bar).abs() < 1e-15);

    let mut g = Grads::zeros(&m);
    distill_objective(&m, &v, (1, 2), 0.0, 2.0, 1.0, Some(&mut g)).unwrap();
    assert!(g.posterior.iter().all(|x| x.abs() < 1e-15));
}

#[test]
fn uniform_inverse_model_rewards_one_third() {
    let m = zero_models(TINY_VOCAB);
    let case = TinyCase::random(&mut ChaCha8Rng::seed_from_u64(4), 3, 2);
    for zp in 0..3 {
        for zk in 0..2 {
            let re1 = forward_policy_gradient(&m, &case.view(), zp, zk, 0.0, 1.0, None).unwrap();
            assert!((re1 - 1.0 / 3.0).abs() < 1e-15);
        }
    }
}

#[test]
fn enumerated_elbo_does_not_decrease_under_theta_steps() {
    let (vocab, cases) = small_corpus(2);
    let cfg = TrainingConfig {
        elbo_mode: ElboMode::Enumerate,
        ..quick_cfg()
    };
    let mut state = TrainState::new(&model_cfg(), &cfg, vocab.len());
    state.finish_warmup(&cfg);
    let batch: Vec<&EncodedCase> = cases.iter().take(4).collect();
    let elbo = |m: &LatentModels| -> f64 {
        batch
            .iter()
            .map(|c| LatentTables::build(m, &c.view(), true).unwrap().elbo().unwrap().elbo())
            .sum()
    };
    let mut prev = elbo(&state.models);
    let start = prev;
    for step in 0..100 {
        let reported = theta_step(&mut state, &batch, &cfg, 1e-3).unwrap();
        assert!((reported.elbo() * 4.0 - prev).abs() < 1e-9 * prev.abs().max(1.0));
        let now = elbo(&state.models);
        assert!(now >= prev - 1e-9, "step {step}: {prev} -> {now}");
        prev = now;
    }
    assert!(prev > start);
}

fn run(cfg: &TrainingConfig, cases: &[EncodedCase], vocab: usize) -> (Vec<String>, Vec<TrainState>) {
    let mut state = TrainState::new(&model_cfg(), cfg, vocab);
    let mut log = Vec::new();
    let mut snaps = Vec::new();
    train(
        &mut state,
        cfg,
        cases,
        Until::Converged,
        &mut |r: &LogRecord| {
            log.push(serde_json::to_string(r).unwrap());
            Ok(())
        },
        &mut |s: &TrainState| {
            snaps.push(s.clone());
            Ok(())
        },
    )
    .unwrap();
    assert_eq!(state.phase, Phase::Done);
    (log, snaps)
}

#[test]
fn same_seed_gives_identical_logs() {
    let (vocab, cases) = small_corpus(3);
    let cfg = quick_cfg();
    let (a, _) = run(&cfg, &cases, vocab.len());
    let (b, _) = run(&cfg, &cases, vocab.len());
    assert_eq!(a, b);
    let (c, _) = run(&TrainingConfig { seed: 1, ..cfg }, &cases, vocab.len());
    assert_ne!(a, c);
}

#[test]
fn resumed_run_reproduces_the_uninterrupted_tail() {
    let (vocab, cases) = small_corpus(4);
    let cfg = TrainingConfig {
        checkpoint_every: 20,
        patience: 0,
        ..quick_cfg()
    };
    let mcfg = model_cfg();
    let (full, snaps) = run(&cfg, &cases, vocab.len());
    assert_eq!(full.len(), 50);
    let dir = tempfile::tempdir().unwrap();
    let hash = config_hash(&mcfg, &cfg);
    for snap in snaps {
        let path = dir.path().join("ck.json");
        Checkpoint {
            version: CHECKPOINT_VERSION,
            config_hash: hash.clone(),
            vocab: vocab.clone(),
            state: snap,
        }
        .save(&path)
        .unwrap();
        let mut state = Checkpoint::load(&path, &hash).unwrap().state;
        let resumed_at = state.step;
        let mut tail = Vec::new();
        train(
            &mut state,
            &cfg,
            &cases,
            Until::Converged,
            &mut |r: &LogRecord| {
                tail.push(serde_json::to_string(r).unwrap());
                Ok(())
            },
            &mut |_: &TrainState| Ok(()),
        )
        .unwrap();
        assert_eq!(tail, full[resumed_at..], "resumed at {resumed_at}");
    }
    let other = config_hash(&mcfg, &TrainingConfig { seed: 9, ..cfg });
    assert!(matches!(
        Checkpoint::load(&dir.path().join("ck.json"), &other),
        Err(Error::Config(_))
    ));
}
