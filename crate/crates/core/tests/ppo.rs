use ltvs_core::env::Transition;
use ltvs_core::neural::{self, gaussian_log_prob, GaussianPolicyOutput, Mlp};
use ltvs_core::ppo::{
    clipped_objective, compute_advantages, critic_loss, Checkpoint, EpisodicEnv, Learner, PpoConfig, Rollout,
    RolloutBatch, TrainOptions,
};
use ltvs_core::{seeding, AdamState, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

const DIM: usize = 3;

/// Episodes of `steps` random states; reward `−|a|`, so the optimal policy
/// has μ ≡ 0.
struct AbsEnv {
    steps: usize,
}

impl EpisodicEnv for AbsEnv {
    type Shared = ();

    fn state_dim(&self) -> usize {
        DIM
    }

    fn initial_shared(&self) {}

    fn shared_is_frozen(&self, _: &()) -> bool {
        true
    }

    fn rollout(&self, actor: &Mlp<f64>, _: &mut (), master_seed: u64, episode: u64) -> Result<Rollout> {
        let mut env_rng = seeding::stream(master_seed, seeding::SCENARIO, episode);
        let mut pol_rng = seeding::stream(master_seed, seeding::POLICY_SAMPLING, episode);
        let mut state: Vec<f64> = (0..DIM).map(|_| env_rng.random_range(-1.0..1.0)).collect();
        let mut transitions = Vec::new();
        let mut total = 0.0;
        for t in 0..self.steps {
            let out = GaussianPolicyOutput::from_outputs(&actor.predict(&state)?);
            let z: f64 = pol_rng.sample(StandardNormal);
            let a = out.mu + out.sigma * z;
            let next: Vec<f64> = (0..DIM).map(|_| env_rng.random_range(-1.0..1.0)).collect();
            let r = -a.abs();
            total += r;
            transitions.push(Transition {
                state: std::mem::replace(&mut state, next.clone()),
                action: a,
                reward: r,
                next_state: next,
                terminal: t + 1 == self.steps,
                log_prob_old: gaussian_log_prob(out.mu, out.sigma, a),
            });
        }
        Ok(Rollout {
            transitions,
            total_reward: total,
            crashed: false,
            curtailed_mw: 0.0,
        })
    }
}

fn random_batch(rng: &mut ChaCha8Rng, actor: &Mlp<f64>, episodes: usize, steps: usize) -> RolloutBatch {
    let rollouts: Vec<Rollout> = (0..episodes)
        .map(|_| {
            let states: Vec<Vec<f64>> = (0..=steps)
                .map(|_| (0..DIM).map(|_| rng.random_range(-2.0..2.0)).collect())
                .collect();
            let transitions = (0..steps)
                .map(|t| {
                    let state = states[t].clone();
                    let next_state = states[t + 1].clone();
                    let out = GaussianPolicyOutput::from_outputs(&actor.predict(&state).unwrap());
                    let action = out.mu + out.sigma * rng.sample::<f64, _>(StandardNormal);
                    Transition {
                        state,
                        action,
                        reward: rng.random_range(-5.0..1.0),
                        next_state,
                        terminal: t + 1 == steps,
                        log_prob_old: gaussian_log_prob(out.mu, out.sigma, action),
                    }
                })
                .collect();
            Rollout {
                transitions,
                total_reward: 0.0,
                crashed: false,
                curtailed_mw: 0.0,
            }
        })
        .collect();
    RolloutBatch::from_rollouts(&rollouts)
}

#[test]
fn advantages_match_per_episode_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let actor: Mlp<f64> = neural::actor(DIM, &mut rng);
    let critic: Mlp<f64> = neural::critic(DIM, &mut rng);
    // Uneven episode lengths, several of them longer than a work chunk.
    let mut rollouts = Vec::new();
    for steps in [1, 7, 300, 45, 600] {
        let b = random_batch(&mut rng, &actor, 1, steps);
        rollouts.push(Rollout {
            transitions: b.transitions,
            total_reward: 0.0,
            crashed: false,
            curtailed_mw: 0.0,
        });
    }
    let batch = RolloutBatch::from_rollouts(&rollouts);
    let gamma = 0.99;
    let adv = compute_advantages(&batch, &critic, gamma).unwrap();
    let mut k = 0;
    for ep in &rollouts {
        for (t, tr) in ep.transitions.iter().enumerate() {
            let v = critic.predict(&tr.state).unwrap()[0];
            let bootstrap = if t + 1 == ep.transitions.len() {
                0.0
            } else {
                gamma * critic.predict(&ep.transitions[t + 1].state).unwrap()[0]
            };
            let target = tr.reward + bootstrap;
            assert_eq!(adv.advantages[k], target - v, "transition {k}");
            assert_eq!(adv.targets[k], target);
            k += 1;
        }
    }
    assert_eq!(k, batch.len());
}

#[test]
fn advantage_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let actor: Mlp<f64> = neural::actor(DIM, &mut rng);
    let batch = random_batch(&mut rng, &actor, 3, 5);
    // A zero critic makes every advantage equal its reward.
    let zero: Mlp<f64> = Mlp::zeros(&[DIM, 8, 1], vec![neural::Activation::Linear]);
    let adv = compute_advantages(&batch, &zero, 0.99).unwrap();
    for (a, tr) in adv.advantages.iter().zip(&batch.transitions) {
        assert_eq!(*a, tr.reward);
    }
    // Terminal transitions never bootstrap.
    let critic: Mlp<f64> = neural::critic(DIM, &mut rng);
    let adv = compute_advantages(&batch, &critic, 0.99).unwrap();
    for (k, tr) in batch.transitions.iter().enumerate().filter(|(_, tr)| tr.terminal) {
        let v = critic.predict(&tr.state).unwrap()[0];
        assert_eq!(adv.advantages[k], tr.reward - v);
    }
}

#[test]
fn ratios_are_one_for_fresh_samples() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..10 {
        let actor: Mlp<f64> = neural::actor(DIM, &mut rng);
        let batch = random_batch(&mut rng, &actor, 4, 80);
        let adv: Vec<f64> = (0..batch.len()).map(|_| rng.random_range(-3.0..3.0)).collect();
        let obj = clipped_objective(&batch, &actor, &adv, 0.2).unwrap();
        assert!(obj.ratios.iter().all(|r| (r - 1.0).abs() < 1e-12));
        assert!(obj.clipped.iter().all(|c| !c));
    }
}

#[test]
fn clipped_samples_contribute_no_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let actor: Mlp<f64> = neural::actor(DIM, &mut rng);
    let mut batch = random_batch(&mut rng, &actor, 1, 4);
    // Pretend the old policy was far less likely to take these actions:
    // ratios ≫ 1 + ε with positive advantages, or ≪ 1 − ε with negative ones.
    for (k, tr) in batch.transitions.iter_mut().enumerate() {
        tr.log_prob_old += if k % 2 == 0 { -2.0 } else { 2.0 };
    }
    let adv = vec![1.5, -0.7, 2.0, -3.0];
    let obj = clipped_objective(&batch, &actor, &adv, 0.2).unwrap();
    assert!(obj.clipped.iter().all(|&c| c));
    assert!(obj.grads.flatten().iter().all(|&g| g == 0.0));
    let expect = (1.2 * 1.5 + 0.8 * -0.7 + 1.2 * 2.0 + 0.8 * -3.0) / 4.0;
    assert!((obj.value - expect).abs() < 1e-12);

    // On the other side of the clip the gradient is live.
    let adv = vec![-1.5, 0.7, -2.0, 3.0];
    let obj = clipped_objective(&batch, &actor, &adv, 0.2).unwrap();
    assert!(obj.clipped.iter().all(|&c| !c));
    assert!(obj.grads.flatten().iter().any(|&g| g != 0.0));
}

#[test]
fn objective_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let actor: Mlp<f64> = neural::actor(DIM, &mut rng);
    let batch = random_batch(&mut rng, &actor, 2, 20);
    let adv: Vec<f64> = (0..batch.len()).map(|_| rng.random_range(-2.0..2.0)).collect();
    let obj = clipped_objective(&batch, &actor, &adv, 0.2).unwrap();
    let an = obj.grads.flatten();
    let base = actor.params_flat();
    let mut probe = actor.clone();
    let h = 1e-6;
    let (mut diff2, mut norm2) = (0.0, 0.0);
    for _ in 0..200 {
        let i = rng.random_range(0..base.len());
        let mut p = base.clone();
        p[i] += h;
        probe.set_params_flat(&p);
        let up = clipped_objective(&batch, &probe, &adv, 0.2).unwrap().value;
        p[i] -= 2.0 * h;
        probe.set_params_flat(&p);
        let down = clipped_objective(&batch, &probe, &adv, 0.2).unwrap().value;
        let fd = (up - down) / (2.0 * h);
        diff2 += (fd - an[i]).powi(2);
        norm2 += fd.abs().max(an[i].abs()).powi(2);
    }
    assert!(diff2.sqrt() / norm2.sqrt() < 1e-4);
}

#[test]
fn one_actor_step_does_not_decrease_objective() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut improved = 0;
    let trials = 40;
    for _ in 0..trials {
        let actor: Mlp<f64> = neural::actor(DIM, &mut rng);
        let batch = random_batch(&mut rng, &actor, 3, 30);
        let adv: Vec<f64> = (0..batch.len()).map(|_| rng.random_range(-2.0..2.0)).collect();
        let before = clipped_objective(&batch, &actor, &adv, 0.2).unwrap();
        let mut moved = actor.clone();
        let mut descent = before.grads.clone();
        descent.scale(-1.0);
        AdamState::new(actor.num_params()).step(&mut moved, &descent, 1e-5).unwrap();
        let after = clipped_objective(&batch, &moved, &adv, 0.2).unwrap();
        if after.value >= before.value {
            improved += 1;
        }
    }
    assert!(improved >= trials * 95 / 100, "{improved}/{trials}");
}

#[test]
fn critic_loss_examples_and_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let actor: Mlp<f64> = neural::actor(DIM, &mut rng);
    let batch = random_batch(&mut rng, &actor, 1, 2);
    let zero: Mlp<f64> = Mlp::zeros(&[DIM, 4, 1], vec![neural::Activation::Linear]);
    let (loss, grads) = critic_loss(&batch, &zero, &[1.0, 2.0]).unwrap();
    assert_eq!(loss, 2.5);
    // Only the output bias sees a gradient: mean of 2(0 − y) = −3.
    let last = grads.layers.last().unwrap();
    assert_eq!(last.biases, vec![-3.0]);
    let (loss, _) = critic_loss(&batch, &zero, &[0.0, 0.0]).unwrap();
    assert_eq!(loss, 0.0);
    assert!(critic_loss(&batch, &zero, &[1.0]).is_err());

    let critic: Mlp<f64> = neural::critic(DIM, &mut rng);
    let batch = random_batch(&mut rng, &actor, 3, 10);
    let targets: Vec<f64> = (0..batch.len()).map(|_| rng.random_range(-10.0..0.0)).collect();
    let (_, grads) = critic_loss(&batch, &critic, &targets).unwrap();
    let an = grads.flatten();
    let base = critic.params_flat();
    let mut probe = critic.clone();
    // Small step: ReLU kinks within ±h of a pre-activation would otherwise
    // spoil isolated coordinates.
    let h = 1e-7;
    let (mut diff2, mut norm2) = (0.0, 0.0);
    for _ in 0..200 {
        let i = rng.random_range(0..base.len());
        let mut p = base.clone();
        p[i] += h;
        probe.set_params_flat(&p);
        let up = critic_loss(&batch, &probe, &targets).unwrap().0;
        p[i] -= 2.0 * h;
        probe.set_params_flat(&p);
        let down = critic_loss(&batch, &probe, &targets).unwrap().0;
        let fd = (up - down) / (2.0 * h);
        diff2 += (fd - an[i]).powi(2);
        norm2 += fd.abs().max(an[i].abs()).powi(2);
    }
    let rel = diff2.sqrt() / norm2.sqrt();
    assert!(rel < 1e-4, "relative error {rel:e}");
}

#[test]
fn non_finite_ratio_is_rejected() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let actor: Mlp<f64> = neural::actor(DIM, &mut rng);
    let mut batch = random_batch(&mut rng, &actor, 1, 3);
    batch.transitions[1].log_prob_old = -1e6;
    let err = clipped_objective(&batch, &actor, &[1.0, 1.0, 1.0], 0.2).unwrap_err();
    assert!(err.to_string().contains("ratio"));
}

fn mean_abs_mu(actor: &Mlp<f64>) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    (0..200)
        .map(|_| {
            let s: Vec<f64> = (0..DIM).map(|_| rng.random_range(-1.0..1.0)).collect();
            actor.predict(&s).unwrap()[0].abs()
        })
        .sum::<f64>()
        / 200.0
}

#[test]
fn learns_the_trivial_optimum() {
    let env = AbsEnv { steps: 10 };
    let mut learner = Learner::new(&env, PpoConfig::default(), 5).unwrap();
    // Start well away from the optimum.
    learner.actor.params_mut().last_mut().unwrap().biases[0] = 1.0;
    let start = mean_abs_mu(&learner.actor);
    assert!(start > 0.5);
    learner
        .train(
            &env,
            &TrainOptions {
                total_episodes: 50 * 64,
                ..Default::default()
            },
        )
        .unwrap();
    assert_eq!(learner.updates.len(), 50);
    assert!(learner.updates.iter().all(|u| u.max_initial_ratio_deviation < 1e-12));
    let end = mean_abs_mu(&learner.actor);
    assert!(end < 0.2 * start, "mean |mu| {start} -> {end}");
    let early: f64 = learner.log[..64].iter().map(|r| r.total_reward).sum::<f64>();
    let late: f64 = learner.log[learner.log.len() - 64..].iter().map(|r| r.total_reward).sum::<f64>();
    assert!(late > early);
}

#[test]
fn training_is_deterministic_and_resumable() {
    let env = AbsEnv { steps: 6 };
    let cfg = PpoConfig::default();
    let opts = |stop| TrainOptions {
        total_episodes: 8 * 64,
        stop_after: stop,
        ..Default::default()
    };
    let mut a = Learner::new(&env, cfg.clone(), 17).unwrap();
    a.train(&env, &opts(None)).unwrap();
    let mut b = Learner::new(&env, cfg.clone(), 17).unwrap();
    b.train(&env, &opts(None)).unwrap();
    assert_eq!(a.log, b.log);
    assert_eq!(a.actor, b.actor);

    let mut c = Learner::new(&env, cfg.clone(), 17).unwrap();
    c.train(&env, &opts(Some(3 * 64))).unwrap();
    assert_eq!(c.episodes_done, 3 * 64);
    let text = serde_json::to_string(&c.checkpoint()).unwrap();
    let ckpt: Checkpoint<()> = Checkpoint::from_json(&text, "test").unwrap();
    let mut resumed = Learner::from_checkpoint(ckpt).unwrap();
    resumed.train(&env, &opts(None)).unwrap();
    assert_eq!(resumed.log, a.log);
    assert_eq!(resumed.actor, a.actor);
    assert_eq!(resumed.critic, a.critic);
    assert_eq!(resumed.actor_opt, a.actor_opt);

    let mut other = Learner::new(&env, cfg, 18).unwrap();
    other.train(&env, &opts(None)).unwrap();
    assert_ne!(other.log, a.log);

    let tampered = text.replace("\"ckpt-v1\"", "\"ckpt-v0\"");
    assert!(Checkpoint::<()>::from_json(&tampered, "test").unwrap_err().is_config_error());
}

#[test]
fn checkpoint_file_round_trip() {
    let env = AbsEnv { steps: 4 };
    let mut l = Learner::new(&env, PpoConfig::default(), 3).unwrap();
    l.train(
        &env,
        &TrainOptions {
            total_episodes: 128,
            ..Default::default()
        },
    )
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.json");
    l.checkpoint().save(&path).unwrap();
    let back: Checkpoint<()> = Checkpoint::load(&path).unwrap();
    assert_eq!(back, l.checkpoint());
    assert!(!dir.path().join("ckpt.tmp").exists());
}

#[test]
fn budget_must_be_whole_batches() {
    let env = AbsEnv { steps: 2 };
    let mut l = Learner::new(&env, PpoConfig::default(), 1).unwrap();
    let err = l
        .train(
            &env,
            &TrainOptions {
                total_episodes: 100,
                ..Default::default()
            },
        )
        .unwrap_err();
    assert!(err.is_config_error());
    assert_eq!(l.episodes_done, 0);
}
