//! Clipped-PPO actor-critic training with one-step TD advantages.
//!
//! Each update samples `N` episodes with the stochastic policy, computes TD
//! targets and advantages once with the pre-update critic, then takes `K`
//! full-batch Adam steps on the actor (ascending the clipped surrogate) and
//! the critic (descending the mean squared TD error) before discarding the
//! batch.

use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::env::Transition;
use crate::error::{Error, Result};
use crate::neural::{self, gaussian_log_prob, gaussian_log_prob_grad, AdamState, Gradients, Mlp};
use crate::seeding;

/// Checkpoint format tag.
pub const CHECKPOINT_FORMAT: &str = "ckpt-v1";
/// Window of the training-log moving averages.
pub const MOVING_AVERAGE_WINDOW: usize = 250;
/// Transitions per gradient work unit; fixed so sums are reproducible
/// regardless of thread count.
const CHUNK: usize = 256;
/// Policy standard deviation below which a diagnostic is logged.
const SIGMA_COLLAPSE: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PpoConfig {
    pub gamma: f64,
    pub clip_eps: f64,
    pub epochs: usize,
    pub batch_episodes: usize,
    pub actor_lr: f64,
    pub critic_lr: f64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            clip_eps: 0.2,
            epochs: 5,
            batch_episodes: 64,
            actor_lr: 5e-4,
            critic_lr: 5e-3,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return bad("gamma must lie in (0, 1)");
        }
        if !(self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            return bad("clip_eps must lie in (0, 1)");
        }
        if self.epochs == 0 || self.batch_episodes == 0 {
            return bad("epochs and batch_episodes must be positive");
        }
        if !(self.actor_lr > 0.0 && self.critic_lr > 0.0) {
            return bad("learning rates must be positive");
        }
        Ok(())
    }
}

/// Outcome of one sampled episode.
#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub transitions: Vec<Transition>,
    pub total_reward: f64,
    pub crashed: bool,
    pub curtailed_mw: f64,
}

/// Environment the trainer can sample episodes from.
pub trait EpisodicEnv: Sync {
    /// State carried across episodes (e.g. observation statistics).
    type Shared: Clone + Send + Sync + PartialEq + std::fmt::Debug + Serialize + DeserializeOwned;

    fn state_dim(&self) -> usize;

    fn initial_shared(&self) -> Self::Shared;

    /// True once `shared` no longer changes; episodes may then run
    /// concurrently on copies.
    fn shared_is_frozen(&self, shared: &Self::Shared) -> bool;

    /// Samples episode number `episode` with the stochastic policy. All
    /// randomness must derive from `(master_seed, episode)`.
    fn rollout(&self, actor: &Mlp<f64>, shared: &mut Self::Shared, master_seed: u64, episode: u64) -> Result<Rollout>;
}

/// Transitions of `N` episodes gathered under one policy snapshot.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RolloutBatch {
    pub transitions: Vec<Transition>,
    /// Start index of each episode in `transitions`.
    pub episode_starts: Vec<usize>,
}

impl RolloutBatch {
    pub fn from_rollouts(rollouts: &[Rollout]) -> Self {
        let mut batch = Self::default();
        for r in rollouts {
            batch.episode_starts.push(batch.transitions.len());
            batch.transitions.extend(r.transitions.iter().cloned());
        }
        batch
    }

    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }
}

/// Per-transition TD advantage and target.
#[derive(Debug, Clone, PartialEq)]
pub struct Advantages {
    pub advantages: Vec<f64>,
    pub targets: Vec<f64>,
}

/// `Â_t = R_t + γ V(s_{t+1})(1 − terminal_t) − V(s_t)`; the target omits the
/// `−V(s_t)` term. No normalisation.
pub fn compute_advantages(batch: &RolloutBatch, critic: &Mlp<f64>, gamma: f64) -> Result<Advantages> {
    let per_chunk: Vec<Vec<(f64, f64)>> = batch
        .transitions
        .par_chunks(CHUNK)
        .map(|chunk| {
            chunk
                .iter()
                .map(|tr| {
                    let v = critic.predict(&tr.state)?[0];
                    let next = if tr.terminal {
                        0.0
                    } else {
                        critic.predict(&tr.next_state)?[0]
                    };
                    let target = tr.reward + gamma * next;
                    Ok((target - v, target))
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let (advantages, targets) = per_chunk.into_iter().flatten().unzip();
    Ok(Advantages { advantages, targets })
}

/// Value and gradient of the clipped surrogate.
#[derive(Debug, Clone)]
pub struct ObjectiveEval {
    /// Mean clipped term.
    pub value: f64,
    /// Gradient of `value` (ascent direction).
    pub grads: Gradients<f64>,
    pub ratios: Vec<f64>,
    /// Samples whose clipped branch is active (zero gradient).
    pub clipped: Vec<bool>,
    pub mean_sigma: f64,
}

/// `J = mean_t min(r_t Â_t, clip(r_t, 1−ε, 1+ε) Â_t)` with
/// `r_t = π(a_t|s_t) / π_old(a_t|s_t)`.
pub fn clipped_objective(batch: &RolloutBatch, actor: &Mlp<f64>, advantages: &[f64], clip_eps: f64) -> Result<ObjectiveEval> {
    if advantages.len() != batch.len() {
        return Err(Error::Dimension {
            expected: batch.len(),
            actual: advantages.len(),
        });
    }
    struct Part {
        sum: f64,
        sigma_sum: f64,
        grads: Gradients<f64>,
        ratios: Vec<f64>,
        clipped: Vec<bool>,
    }
    let parts: Vec<Part> = batch
        .transitions
        .par_chunks(CHUNK)
        .zip(advantages.par_chunks(CHUNK))
        .map(|(chunk, adv)| {
            let mut part = Part {
                sum: 0.0,
                sigma_sum: 0.0,
                grads: Gradients::zeros_like(actor),
                ratios: Vec::with_capacity(chunk.len()),
                clipped: Vec::with_capacity(chunk.len()),
            };
            for (tr, &a_hat) in chunk.iter().zip(adv) {
                let cache = actor.forward(&tr.state)?;
                let (mu, sigma) = (cache.output()[0], cache.output()[1]);
                let ratio = (gaussian_log_prob(mu, sigma, tr.action) - tr.log_prob_old).exp();
                if !ratio.is_finite() || !a_hat.is_finite() {
                    return Err(Error::Numerical(format!(
                        "non-finite probability ratio {ratio} (sigma {sigma:e}, advantage {a_hat})"
                    )));
                }
                let clipped_ratio = ratio.clamp(1.0 - clip_eps, 1.0 + clip_eps);
                let unclipped = ratio * a_hat;
                let is_clipped = clipped_ratio * a_hat < unclipped;
                part.sum += if is_clipped { clipped_ratio * a_hat } else { unclipped };
                part.sigma_sum += sigma;
                part.ratios.push(ratio);
                part.clipped.push(is_clipped);
                if !is_clipped {
                    // d(r Â)/dθ = Â r ∇ log π.
                    let (g_mu, g_sigma) = gaussian_log_prob_grad(mu, sigma, tr.action);
                    let w = a_hat * ratio;
                    actor.backward_into(&cache, &[w * g_mu, w * g_sigma], &mut part.grads)?;
                }
            }
            Ok(part)
        })
        .collect::<Result<Vec<_>>>()?;

    let n = batch.len().max(1) as f64;
    let mut out = ObjectiveEval {
        value: 0.0,
        grads: Gradients::zeros_like(actor),
        ratios: Vec::with_capacity(batch.len()),
        clipped: Vec::with_capacity(batch.len()),
        mean_sigma: 0.0,
    };
    for p in parts {
        out.value += p.sum;
        out.mean_sigma += p.sigma_sum;
        out.grads.add_assign(&p.grads);
        out.ratios.extend(p.ratios);
        out.clipped.extend(p.clipped);
    }
    out.value /= n;
    out.mean_sigma /= n;
    out.grads.scale(1.0 / n);
    Ok(out)
}

/// `L = mean_t (V(s_t) − target_t)²` and its gradient (descent direction).
pub fn critic_loss(batch: &RolloutBatch, critic: &Mlp<f64>, targets: &[f64]) -> Result<(f64, Gradients<f64>)> {
    if targets.len() != batch.len() {
        return Err(Error::Dimension {
            expected: batch.len(),
            actual: targets.len(),
        });
    }
    let parts: Vec<(f64, Gradients<f64>)> = batch
        .transitions
        .par_chunks(CHUNK)
        .zip(targets.par_chunks(CHUNK))
        .map(|(chunk, tgt)| {
            let mut g = Gradients::zeros_like(critic);
            let mut sum = 0.0;
            for (tr, &y) in chunk.iter().zip(tgt) {
                let cache = critic.forward(&tr.state)?;
                let err = cache.output()[0] - y;
                sum += err * err;
                critic.backward_into(&cache, &[2.0 * err], &mut g)?;
            }
            Ok((sum, g))
        })
        .collect::<Result<Vec<_>>>()?;
    let n = batch.len().max(1) as f64;
    let mut loss = 0.0;
    let mut grads = Gradients::zeros_like(critic);
    for (s, g) in parts {
        loss += s;
        grads.add_assign(&g);
    }
    loss /= n;
    grads.scale(1.0 / n);
    if !loss.is_finite() {
        return Err(Error::Numerical(format!("critic loss is {loss}")));
    }
    Ok((loss, grads))
}

/// Diagnostics of one PPO update.
#[derive(Debug, Clone, PartialEq)]
pub struct UpdateStats {
    pub transitions: usize,
    /// Largest |r_t − 1| before the first epoch (0 for a correct sampler).
    pub max_initial_ratio_deviation: f64,
    pub objective_first_epoch: f64,
    pub critic_loss_first_epoch: f64,
    pub critic_loss_last_epoch: f64,
    pub clipped_fraction_last_epoch: f64,
    pub mean_sigma: f64,
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub episode: u64,
    pub total_reward: f64,
    pub crashed: bool,
    pub curtailed_mw: f64,
}

/// Centered moving average with the window truncated at the boundaries.
pub fn centered_moving_average(values: &[f64], window: usize) -> Vec<f64> {
    let half = window / 2;
    (0..values.len())
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + window - half).min(values.len());
            values[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
        })
        .collect()
}

/// Writes `episode,total_reward,crashed,curtailed_mw,ma250_reward,ma250_crash`.
pub fn write_training_log<W: Write>(rows: &[LogRow], mut w: W) -> std::io::Result<()> {
    let rewards: Vec<f64> = rows.iter().map(|r| r.total_reward).collect();
    let crashes: Vec<f64> = rows.iter().map(|r| if r.crashed { 1.0 } else { 0.0 }).collect();
    let ma_r = centered_moving_average(&rewards, MOVING_AVERAGE_WINDOW);
    let ma_c = centered_moving_average(&crashes, MOVING_AVERAGE_WINDOW);
    writeln!(w, "episode,total_reward,crashed,curtailed_mw,ma250_reward,ma250_crash")?;
    for (k, r) in rows.iter().enumerate() {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            r.episode, r.total_reward, r.crashed as u8, r.curtailed_mw, ma_r[k], ma_c[k]
        )?;
    }
    Ok(())
}

/// Serialized learner state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "S: Serialize + DeserializeOwned")]
pub struct Checkpoint<S> {
    pub format: String,
    pub master_seed: u64,
    pub config: PpoConfig,
    pub episodes_done: u64,
    pub actor: Mlp<f64>,
    pub critic: Mlp<f64>,
    pub actor_opt: AdamState<f64>,
    pub critic_opt: AdamState<f64>,
    /// Environment state shared across episodes (the observation normaliser).
    pub normalizer: S,
    pub log: Vec<LogRow>,
}

impl<S: Serialize + DeserializeOwned> Checkpoint<S> {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).map_err(|e| Error::Numerical(format!("checkpoint encode: {e}")))?;
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, &path.display().to_string())
    }

    pub fn from_json(text: &str, context: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct Tag {
            format: String,
        }
        let tag: Tag = serde_json::from_str(text).map_err(|e| Error::Parse {
            context: context.to_string(),
            message: e.to_string(),
        })?;
        if tag.format != CHECKPOINT_FORMAT {
            return Err(Error::Parse {
                context: context.to_string(),
                message: format!("unsupported checkpoint format {:?}, expected {CHECKPOINT_FORMAT:?}", tag.format),
            });
        }
        serde_json::from_str(text).map_err(|e| Error::Parse {
            context: context.to_string(),
            message: e.to_string(),
        })
    }
}

/// Where and how often to write checkpoints during training.
#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    pub total_episodes: u64,
    pub checkpoint_every: Option<u64>,
    pub checkpoint_path: Option<PathBuf>,
    /// Stop (as if interrupted) once this many episodes are done.
    pub stop_after: Option<u64>,
}

/// Actor, critic, optimisers and the shared environment state.
#[derive(Debug, Clone, PartialEq)]
pub struct Learner<S> {
    pub config: PpoConfig,
    pub master_seed: u64,
    pub actor: Mlp<f64>,
    pub critic: Mlp<f64>,
    pub actor_opt: AdamState<f64>,
    pub critic_opt: AdamState<f64>,
    pub shared: S,
    pub episodes_done: u64,
    pub log: Vec<LogRow>,
    pub updates: Vec<UpdateStats>,
}

impl<S: Clone + Send + Sync + PartialEq + std::fmt::Debug + Serialize + DeserializeOwned> Learner<S> {
    pub fn new<E: EpisodicEnv<Shared = S>>(env: &E, config: PpoConfig, master_seed: u64) -> Result<Self> {
        config.validate()?;
        let dim = env.state_dim();
        let actor = neural::actor::<f64, _>(dim, &mut seeding::stream(master_seed, seeding::POLICY_INIT, 0));
        let critic = neural::critic::<f64, _>(dim, &mut seeding::stream(master_seed, seeding::POLICY_INIT, 1));
        Ok(Self {
            actor_opt: AdamState::new(actor.num_params()),
            critic_opt: AdamState::new(critic.num_params()),
            actor,
            critic,
            config,
            master_seed,
            shared: env.initial_shared(),
            episodes_done: 0,
            log: Vec::new(),
            updates: Vec::new(),
        })
    }

    pub fn checkpoint(&self) -> Checkpoint<S> {
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            master_seed: self.master_seed,
            config: self.config.clone(),
            episodes_done: self.episodes_done,
            actor: self.actor.clone(),
            critic: self.critic.clone(),
            actor_opt: self.actor_opt.clone(),
            critic_opt: self.critic_opt.clone(),
            normalizer: self.shared.clone(),
            log: self.log.clone(),
        }
    }

    pub fn from_checkpoint(ckpt: Checkpoint<S>) -> Result<Self> {
        ckpt.config.validate()?;
        if ckpt.actor_opt.m.len() != ckpt.actor.num_params() || ckpt.critic_opt.m.len() != ckpt.critic.num_params() {
            return Err(Error::Parse {
                context: "checkpoint".into(),
                message: "optimiser state does not match network size".into(),
            });
        }
        Ok(Self {
            config: ckpt.config,
            master_seed: ckpt.master_seed,
            actor: ckpt.actor,
            critic: ckpt.critic,
            actor_opt: ckpt.actor_opt,
            critic_opt: ckpt.critic_opt,
            shared: ckpt.normalizer,
            episodes_done: ckpt.episodes_done,
            log: ckpt.log,
            updates: Vec::new(),
        })
    }

    /// Samples the next `N` episodes. Until the shared state freezes,
    /// episodes run one after another so each sees the statistics left by
    /// the previous one; afterwards they run in parallel on copies.
    pub fn collect<E: EpisodicEnv<Shared = S>>(&mut self, env: &E) -> Result<Vec<Rollout>> {
        let first = self.episodes_done;
        let n = self.config.batch_episodes as u64;
        if env.shared_is_frozen(&self.shared) {
            let (actor, shared, seed) = (&self.actor, &self.shared, self.master_seed);
            (first..first + n)
                .into_par_iter()
                .map(|ep| env.rollout(actor, &mut shared.clone(), seed, ep))
                .collect()
        } else {
            (first..first + n)
                .map(|ep| env.rollout(&self.actor, &mut self.shared, self.master_seed, ep))
                .collect()
        }
    }

    /// K epochs of full-batch actor ascent and critic descent.
    pub fn update(&mut self, batch: &RolloutBatch) -> Result<UpdateStats> {
        let cfg = &self.config;
        let mut stats = UpdateStats {
            transitions: batch.len(),
            max_initial_ratio_deviation: 0.0,
            objective_first_epoch: 0.0,
            critic_loss_first_epoch: 0.0,
            critic_loss_last_epoch: 0.0,
            clipped_fraction_last_epoch: 0.0,
            mean_sigma: 0.0,
        };
        if batch.is_empty() {
            return Ok(stats);
        }
        let adv = compute_advantages(batch, &self.critic, cfg.gamma)?;
        for epoch in 0..cfg.epochs {
            let obj = clipped_objective(batch, &self.actor, &adv.advantages, cfg.clip_eps)?;
            if !obj.value.is_finite() {
                return Err(Error::Numerical(format!("actor objective is {}", obj.value)));
            }
            if epoch == 0 {
                stats.max_initial_ratio_deviation = obj.ratios.iter().map(|r| (r - 1.0).abs()).fold(0.0, f64::max);
                stats.objective_first_epoch = obj.value;
                stats.mean_sigma = obj.mean_sigma;
                if obj.mean_sigma < SIGMA_COLLAPSE {
                    log::warn!("policy standard deviation collapsed to {:e}", obj.mean_sigma);
                }
            }
            stats.clipped_fraction_last_epoch =
                obj.clipped.iter().filter(|&&c| c).count() as f64 / obj.clipped.len() as f64;
            let mut ascent = obj.grads;
            ascent.scale(-1.0);
            self.actor_opt.step(&mut self.actor, &ascent, cfg.actor_lr)?;

            let (loss, grads) = critic_loss(batch, &self.critic, &adv.targets)?;
            if epoch == 0 {
                stats.critic_loss_first_epoch = loss;
            }
            stats.critic_loss_last_epoch = loss;
            self.critic_opt.step(&mut self.critic, &grads, cfg.critic_lr)?;
        }
        Ok(stats)
    }

    /// Runs sample/update cycles until `opts.total_episodes` are done (or
    /// `stop_after`). On a numerical failure the last good state is
    /// checkpointed before the error is returned.
    pub fn train<E: EpisodicEnv<Shared = S>>(&mut self, env: &E, opts: &TrainOptions) -> Result<()> {
        let n = self.config.batch_episodes as u64;
        if !opts.total_episodes.is_multiple_of(n) {
            return Err(Error::Config(format!(
                "episode budget {} is not a multiple of the batch size {n}",
                opts.total_episodes
            )));
        }
        if env.state_dim() != self.actor.input_dim() {
            return Err(Error::Dimension {
                expected: self.actor.input_dim(),
                actual: env.state_dim(),
            });
        }
        let stop = opts.stop_after.unwrap_or(opts.total_episodes).min(opts.total_episodes);
        while self.episodes_done < stop {
            let good = self.clone();
            let result = self.collect(env).and_then(|rollouts| {
                let batch = RolloutBatch::from_rollouts(&rollouts);
                let stats = self.update(&batch)?;
                Ok((rollouts, stats))
            });
            let (rollouts, stats) = match result {
                Ok(v) => v,
                Err(e) => {
                    *self = good;
                    if let Some(path) = &opts.checkpoint_path {
                        self.checkpoint().save(path)?;
                    }
                    return Err(e);
                }
            };
            for (k, r) in rollouts.iter().enumerate() {
                self.log.push(LogRow {
                    episode: self.episodes_done + k as u64 + 1,
                    total_reward: r.total_reward,
                    crashed: r.crashed,
                    curtailed_mw: r.curtailed_mw,
                });
            }
            self.episodes_done += n;
            self.updates.push(stats);
            let tail = &self.log[self.log.len() - n as usize..];
            log::info!(
                "episodes {}: mean reward {:.2}, crashes {}",
                self.episodes_done,
                tail.iter().map(|r| r.total_reward).sum::<f64>() / n as f64,
                tail.iter().filter(|r| r.crashed).count()
            );
            if let (Some(every), Some(path)) = (opts.checkpoint_every, &opts.checkpoint_path) {
                if every > 0 && self.episodes_done.is_multiple_of(every) {
                    self.checkpoint().save(path)?;
                }
            }
        }
        Ok(())
    }

    pub fn write_log(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        write_training_log(&self.log, &mut w)
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }

    /// 250-episode centered moving average of the crash flag.
    pub fn crash_moving_average(&self) -> Vec<f64> {
        let crashes: Vec<f64> = self.log.iter().map(|r| if r.crashed { 1.0 } else { 0.0 }).collect();
        centered_moving_average(&crashes, MOVING_AVERAGE_WINDOW)
    }
}

/// Trains a fresh learner for `total_episodes`.
pub fn train<E: EpisodicEnv>(env: &E, config: PpoConfig, total_episodes: u64, seed: u64) -> Result<Learner<E::Shared>> {
    let mut learner = Learner::new(env, config, seed)?;
    learner.train(
        env,
        &TrainOptions {
            total_episodes,
            ..TrainOptions::default()
        },
    )?;
    Ok(learner)
}
