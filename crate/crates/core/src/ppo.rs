//! Clipped-surrogate PPO with GAE over parallel environment workers.
//!
//! Rollouts store raw (pre-augmentation) observations plus memory snapshot
//! references and segment-start recurrent states; the update pass replays
//! the recurrence on independently re-augmented observations, so the two
//! augmentation applications are independent draws.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::path::Path;
use std::sync::Arc;

use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::augment::{augment_observation, AugmentConfig};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalConfig};
use crate::memory::{attention_view, MemoryBuffer, MemoryView};
use crate::nn::optim::{adam_step, clip_grad_norm, AdamConfig};
use crate::nn::{Bindings, Tape, Var};
use crate::policy::{
    ActMode, CachedKv, MemoryAttn, PolicyNet, PolicyState,
};
use crate::reach::ReachabilityNet;
use crate::rng::stream;
use crate::sim::{Difficulty, EpisodeSpec, NavEpisode, Observation, Scene, StepConfig};

#[derive(Clone, Copy, Debug, Serialize)]
pub struct PpoConfig {
    pub clip: f64,
    pub entropy_coef: f64,
    pub epochs: usize,
    pub lr: f64,
    pub gamma: f64,
    pub lambda: f64,
    pub value_coef: f64,
    pub grad_clip: f64,
    pub workers: usize,
    pub segment: usize,
    pub updates: usize,
    pub ckpt_every: usize,
    pub eval_every: usize,
    pub eval_episodes_per_difficulty: usize,
}

impl Default for PpoConfig {
    fn default() -> Self {
        PpoConfig {
            clip: 0.2,
            entropy_coef: 0.01,
            epochs: 2,
            lr: 9e-5,
            gamma: 0.99,
            lambda: 0.95,
            value_coef: 0.5,
            grad_clip: 0.5,
            workers: 8,
            segment: 64,
            updates: 5000,
            ckpt_every: 500,
            eval_every: 250,
            eval_episodes_per_difficulty: 20,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainerConfig {
    pub ppo: PpoConfig,
    pub step: StepConfig,
    pub augment: AugmentConfig,
    pub use_memory: bool,
    pub use_long_term: bool,
    pub memory_capacity: usize,
    pub long_term_capacity: usize,
    pub tau: f64,
    pub ttl_episodes: u64,
}

/// One stored step of one worker.
pub struct Transition {
    pub raw_obs: Observation,
    pub goal: Arc<Observation>,
    pub prev_action: usize,
    /// Recurrent state resets before this step during replay.
    pub episode_start: bool,
    pub action: usize,
    pub log_prob: f32,
    pub value: f32,
    pub reward: f32,
    pub done: bool,
    pub memory: Option<Arc<MemoryView<f32>>>,
}

pub struct WorkerRollout {
    pub transitions: Vec<Transition>,
    pub start_state: PolicyState<f32>,
    pub bootstrap: f32,
    /// (success, shortest_path, path_length) of episodes completed in this
    /// segment, for the train-SPL proxy.
    pub completed: Vec<(bool, f64, f64)>,
}

pub struct RolloutBuffer {
    pub workers: Vec<WorkerRollout>,
}

impl RolloutBuffer {
    pub fn len(&self) -> usize {
        self.workers.iter().map(|w| w.transitions.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Generalized advantage estimation with terminal masking and a bootstrap
/// value at the segment end. Advantages are NOT normalized here.
pub fn compute_gae(
    rewards: &[f32],
    values: &[f32],
    dones: &[bool],
    bootstrap: f32,
    gamma: f64,
    lambda: f64,
) -> (Vec<f64>, Vec<f64>) {
    let n = rewards.len();
    assert_eq!(values.len(), n);
    assert_eq!(dones.len(), n);
    let mut advantages = vec![0.0f64; n];
    let mut next_adv = 0.0f64;
    for t in (0..n).rev() {
        let not_done = if dones[t] { 0.0 } else { 1.0 };
        let next_value = if t + 1 < n {
            f64::from(values[t + 1])
        } else {
            f64::from(bootstrap)
        };
        let delta =
            f64::from(rewards[t]) + gamma * next_value * not_done - f64::from(values[t]);
        next_adv = delta + gamma * lambda * not_done * next_adv;
        advantages[t] = next_adv;
    }
    let returns = advantages
        .iter()
        .zip(values.iter())
        .map(|(a, &v)| a + f64::from(v))
        .collect();
    (advantages, returns)
}

/// In-place normalization to mean 0, std 1 (population, eps 1e-8).
pub fn normalize_advantages(advantages: &mut [f64]) {
    if advantages.is_empty() {
        return;
    }
    let n = advantages.len() as f64;
    let mean = advantages.iter().sum::<f64>() / n;
    let var = advantages.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    for a in advantages.iter_mut() {
        *a = (*a - mean) / (std + 1e-8);
    }
}

// ---------------------------------------------------------------------------
// Environment worker
// ---------------------------------------------------------------------------

pub struct EnvWorker {
    pub id: usize,
    scenes: Arc<BTreeMap<String, Arc<Scene>>>,
    episodes: Vec<EpisodeSpec>,
    next_episode: usize,
    env: Option<NavEpisode>,
    goal_raw: Option<Arc<Observation>>,
    state: PolicyState<f32>,
    episodic: MemoryBuffer<f32>,
    long_term: Option<MemoryBuffer<f32>>,
    act_rng: ChaCha8Rng,
    aug_rng: ChaCha8Rng,
    cfg: TrainerConfig,
    mem_version: u64,
    kv_cache: Option<CachedKv>,
    view_snapshot: Option<Arc<MemoryView<f32>>>,
    hidden: usize,
    embed_dim: usize,
}

impl EnvWorker {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        id: usize,
        scenes: Arc<BTreeMap<String, Arc<Scene>>>,
        episodes: Vec<EpisodeSpec>,
        cfg: TrainerConfig,
        hidden: usize,
        embed_dim: usize,
        seed: u64,
    ) -> Result<Self> {
        if episodes.is_empty() {
            return Err(Error::Invalid(format!("worker {id} has no episodes")));
        }
        Ok(EnvWorker {
            id,
            scenes,
            episodes,
            next_episode: 0,
            env: None,
            goal_raw: None,
            state: PolicyState::reset(hidden),
            episodic: MemoryBuffer::episodic(cfg.memory_capacity, cfg.tau),
            long_term: cfg
                .use_long_term
                .then(|| MemoryBuffer::long_term(cfg.long_term_capacity, cfg.tau, cfg.ttl_episodes)),
            act_rng: stream(seed, "worker.act", id as u64),
            aug_rng: stream(seed, "worker.aug", id as u64),
            cfg,
            mem_version: 0,
            kv_cache: None,
            view_snapshot: None,
            hidden,
            embed_dim,
        })
    }

    /// Begin the next episode if none is active. Returns true if an episode
    /// was (re)started at this step.
    fn ensure_episode(&mut self) -> Result<bool> {
        if self.env.as_ref().is_some_and(|e| !e.done) {
            return Ok(false);
        }
        let spec = self.episodes[self.next_episode % self.episodes.len()].clone();
        self.next_episode += 1;
        let scene = self
            .scenes
            .get(&spec.scene_id)
            .ok_or_else(|| Error::Invalid(format!("unknown scene {}", spec.scene_id)))?
            .clone();
        if let Some(lt) = &mut self.long_term {
            lt.advance_episode(&spec.scene_id)?;
        }
        self.episodic.reset_episodic()?;
        let env = NavEpisode::start(scene, spec, self.cfg.step)?;
        self.goal_raw = Some(Arc::new(env.goal_observation()?));
        self.env = Some(env);
        self.state = PolicyState::reset(self.hidden);
        self.mem_version += 1; // memory contents changed (episodic cleared)
        Ok(true)
    }

    /// Rebuild the cached keys/values if the memory contents changed.
    fn refresh_memory_cache(&mut self, policy: &PolicyNet<f32>) -> Result<()> {
        if !self.cfg.use_memory {
            return Ok(());
        }
        let stale = self
            .kv_cache
            .as_ref()
            .is_none_or(|c| c.version != self.mem_version);
        if stale {
            let view = Arc::new(attention_view(
                &self.episodic,
                self.long_term.as_ref(),
                self.embed_dim,
                self.mem_version,
            ));
            self.kv_cache = Some(policy.cache_memory(&view)?);
            self.view_snapshot = Some(view);
        }
        Ok(())
    }

    /// Step the worker `segment` times, collecting transitions.
    pub fn collect_segment(
        &mut self,
        policy: &PolicyNet<f32>,
        reach: Option<&ReachabilityNet<f32>>,
    ) -> Result<WorkerRollout> {
        let segment = self.cfg.ppo.segment;
        let mut start_state = self.state.clone();
        let mut transitions = Vec::with_capacity(segment);
        let mut completed = Vec::new();

        for t in 0..segment {
            let episode_start = self.ensure_episode()?;
            if t == 0 && episode_start {
                start_state = self.state.clone();
            }
            let raw_obs = self.env.as_ref().expect("episode active").observe()?;
            let goal_raw = Arc::clone(self.goal_raw.as_ref().expect("goal rendered"));
            let obs_in = augment_observation(&raw_obs, &self.cfg.augment, &mut self.aug_rng);
            let goal_in = augment_observation(&goal_raw, &self.cfg.augment, &mut self.aug_rng);

            let prev_action = self.state.prev_action;
            let state_before = self.state.clone();
            self.refresh_memory_cache(policy)?;
            let memory = if self.cfg.use_memory {
                MemoryAttn::Cached(self.kv_cache.as_ref().expect("cache fresh"))
            } else {
                MemoryAttn::Disabled
            };
            let out = policy.act(
                &obs_in,
                &goal_in,
                &state_before,
                memory,
                &mut self.act_rng,
                ActMode::Sample,
            )?;
            let env = self.env.as_mut().expect("episode active");
            let step_index = env.state.step_count;
            let result = env.step(out.action)?;
            self.state = out.state;

            if self.cfg.use_memory {
                if let Some(reach) = reach {
                    let e = reach.embed(&obs_in)?;
                    let (ins_e, _) =
                        self.episodic
                            .maybe_insert_embedding(reach, &e, u64::from(step_index))?;
                    let mut changed = ins_e;
                    if let Some(lt) = &mut self.long_term {
                        let (ins_lt, _) =
                            lt.maybe_insert_embedding(reach, &e, u64::from(step_index))?;
                        changed |= ins_lt;
                    }
                    if changed {
                        self.mem_version += 1;
                    }
                }
            }

            transitions.push(Transition {
                raw_obs,
                goal: goal_raw,
                prev_action,
                episode_start,
                action: out.action.index(),
                log_prob: out.log_prob,
                value: out.value,
                reward: result.reward as f32,
                done: result.done,
                memory: self.cfg.use_memory.then(|| {
                    Arc::clone(self.view_snapshot.as_ref().expect("snapshot exists"))
                }),
            });

            if result.done {
                let env = self.env.as_ref().expect("episode active");
                completed.push((env.success, env.spec.geodesic, env.path_length));
            }
        }

        // bootstrap value at the segment boundary
        let bootstrap = if self.env.as_ref().is_some_and(|e| !e.done) {
            let env = self.env.as_ref().expect("episode active");
            let raw_obs = env.observe()?;
            let goal_raw = Arc::clone(self.goal_raw.as_ref().expect("goal rendered"));
            let obs_in = augment_observation(&raw_obs, &self.cfg.augment, &mut self.aug_rng);
            let goal_in = augment_observation(&goal_raw, &self.cfg.augment, &mut self.aug_rng);
            let state = self.state.clone();
            self.refresh_memory_cache(policy)?;
            let memory = if self.cfg.use_memory {
                MemoryAttn::Cached(self.kv_cache.as_ref().expect("cache fresh"))
            } else {
                MemoryAttn::Disabled
            };
            let out = policy.act(
                &obs_in,
                &goal_in,
                &state,
                memory,
                &mut self.act_rng,
                ActMode::Greedy,
            )?;
            out.value
        } else {
            0.0
        };

        Ok(WorkerRollout {
            transitions,
            start_state,
            bootstrap,
            completed,
        })
    }
}

/// Collect one segment from every worker in parallel.
pub fn collect_rollouts(
    workers: &mut [EnvWorker],
    policy: &PolicyNet<f32>,
    reach: Option<&ReachabilityNet<f32>>,
) -> Result<RolloutBuffer> {
    let rollouts: Vec<Result<WorkerRollout>> = workers
        .par_iter_mut()
        .map(|w| {
            w.collect_segment(policy, reach).map_err(|e| {
                Error::Invalid(format!("worker {} failed: {e}", w.id))
            })
        })
        .collect();
    let mut out = Vec::with_capacity(rollouts.len());
    for r in rollouts {
        out.push(r?);
    }
    Ok(RolloutBuffer { workers: out })
}

// ---------------------------------------------------------------------------
// PPO update
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, Default, Serialize)]
pub struct UpdateStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub grad_norm: f64,
}

struct WorkerGrad {
    bindings: Bindings,
    grads: crate::nn::Grads<f32>,
    policy_loss: f64,
    value_loss: f64,
    entropy: f64,
}

/// Replay a stored segment on a tape: recurrent states restart from the
/// segment checkpoint (resetting at stored episode starts), observations are
/// re-augmented when enabled, and memory snapshots are projected once per
/// distinct version. Returns (logits `L x A`, values `L x 1`).
fn replay_forward(
    policy: &PolicyNet<f32>,
    tape: &mut Tape<f32>,
    bound: &crate::policy::BoundPolicy,
    rollout: &WorkerRollout,
    mut augment: Option<(&AugmentConfig, &mut ChaCha8Rng)>,
) -> Result<(Var, Var)> {
    let hidden = policy.arch.hidden;
    let zeros = |tape: &mut Tape<f32>| tape.leaf_owned(ndarray::Array2::zeros((1, hidden)));
    let mut h1 = tape.leaf_owned(rollout.start_state.h1.clone());
    let mut c1 = tape.leaf_owned(rollout.start_state.c1.clone());
    let mut h2 = tape.leaf_owned(rollout.start_state.h2.clone());
    let mut c2 = tape.leaf_owned(rollout.start_state.c2.clone());

    let mut kv_cache: HashMap<u64, crate::policy::MemoryKv> = HashMap::new();
    let mut logits_rows: Vec<Var> = Vec::with_capacity(rollout.transitions.len());
    let mut value_rows: Vec<Var> = Vec::with_capacity(rollout.transitions.len());

    for tr in &rollout.transitions {
        if tr.episode_start {
            h1 = zeros(tape);
            c1 = zeros(tape);
            h2 = zeros(tape);
            c2 = zeros(tape);
        }
        let (obs_in, goal_in) = match augment.as_mut() {
            Some((cfg, rng)) if cfg.enabled => (
                augment_observation(&tr.raw_obs, cfg, rng),
                augment_observation(&tr.goal, cfg, rng),
            ),
            _ => (tr.raw_obs.clone(), (*tr.goal).clone()),
        };
        let obs_mat = tape.leaf_owned(policy.obs_matrix(&obs_in)?);
        let goal_mat = tape.leaf_owned(policy.obs_matrix(&goal_in)?);
        let (w_obs, next) =
            policy.encode_current(tape, bound, obs_mat, &[tr.prev_action], h1, c1, h2, c2)?;
        [h1, c1, h2, c2] = next;
        let w_goal = policy.encode_goal(tape, bound, goal_mat)?;

        let kv = match &tr.memory {
            Some(view) => {
                if !kv_cache.contains_key(&view.version) {
                    let kv = policy.project_memory(tape, bound, view)?;
                    kv_cache.insert(view.version, kv);
                }
                Some(&kv_cache[&view.version])
            }
            None => None,
        };
        let (logits, value) = policy.heads(tape, bound, w_obs, w_goal, kv)?;
        logits_rows.push(logits);
        value_rows.push(value);
    }
    let logits_all = tape.concat_rows(&logits_rows)?;
    let values_all = tape.concat_rows(&value_rows)?;
    Ok((logits_all, values_all))
}

/// Recompute the log-probs of the stored actions with augmentation disabled
/// (replay-fidelity diagnostics: these must match the rollout's stored
/// log-probs).
pub fn replay_log_probs(policy: &PolicyNet<f32>, rollout: &WorkerRollout) -> Result<Vec<f32>> {
    let mut tape: Tape<f32> = Tape::new();
    let mut bindings = Bindings::new();
    let bound = policy.bind(&mut tape, &mut bindings);
    let (logits_all, _) = replay_forward(policy, &mut tape, &bound, rollout, None)?;
    let lp_all = tape.log_softmax_rows(logits_all);
    let actions: Vec<usize> = rollout.transitions.iter().map(|t| t.action).collect();
    let picked = tape.gather_cols(lp_all, Arc::new(actions))?;
    Ok(tape.value(picked).column(0).to_vec())
}

/// Replay one worker's segment on a fresh tape and build its loss.
#[allow(clippy::too_many_arguments)]
fn worker_loss_graph(
    policy: &PolicyNet<f32>,
    rollout: &WorkerRollout,
    advantages: &[f64],
    returns: &[f64],
    cfg: &PpoConfig,
    augment: &AugmentConfig,
    reaug_rng: &mut ChaCha8Rng,
    total_workers: usize,
) -> Result<WorkerGrad> {
    let mut tape: Tape<f32> = Tape::new();
    let mut bindings = Bindings::new();
    let bound = policy.bind(&mut tape, &mut bindings);
    let (logits_all, values_all) = replay_forward(
        policy,
        &mut tape,
        &bound,
        rollout,
        Some((augment, reaug_rng)),
    )?;

    let n = rollout.transitions.len();
    let actions: Vec<usize> = rollout.transitions.iter().map(|t| t.action).collect();
    let lp_old = ndarray::Array2::from_shape_fn((n, 1), |(r, _)| rollout.transitions[r].log_prob);
    let adv = ndarray::Array2::from_shape_fn((n, 1), |(r, _)| advantages[r] as f32);
    let ret = ndarray::Array2::from_shape_fn((n, 1), |(r, _)| returns[r] as f32);

    let lp_all = tape.log_softmax_rows(logits_all);
    let lp_taken = tape.gather_cols(lp_all, Arc::new(actions))?;
    let lp_old_leaf = tape.leaf_owned(lp_old);
    let lp_diff = tape.sub(lp_taken, lp_old_leaf)?;
    let ratio = tape.exp(lp_diff);

    let adv = Arc::new(adv);
    let surr1 = tape.mul_const(ratio, Arc::clone(&adv))?;
    let clipped = tape.clamp(ratio, 1.0 - cfg.clip as f32, 1.0 + cfg.clip as f32);
    let surr2 = tape.mul_const(clipped, adv)?;
    let surr = tape.minimum(surr1, surr2)?;
    let surr_mean = tape.mean_all(surr);
    let policy_loss = tape.scale(surr_mean, -1.0);

    let ret_leaf = tape.leaf_owned(ret);
    let vdiff = tape.sub(values_all, ret_leaf)?;
    let vsq = tape.mul(vdiff, vdiff)?;
    let value_loss = tape.mean_all(vsq);

    let probs = tape.softmax_rows(logits_all, None)?;
    let plogp = tape.mul(probs, lp_all)?;
    let neg_ent_rows = tape.sum_rows(plogp);
    let entropy_mean_neg = tape.mean_all(neg_ent_rows); // = -entropy

    let v_scaled = tape.scale(value_loss, cfg.value_coef as f32);
    let e_scaled = tape.scale(entropy_mean_neg, cfg.entropy_coef as f32);
    let pv = tape.add(policy_loss, v_scaled)?;
    let total = tape.add(pv, e_scaled)?;
    let scaled_total = tape.scale(total, 1.0 / total_workers as f32);

    let loss_value = f64::from(tape.scalar(scaled_total));
    if !loss_value.is_finite() {
        return Err(Error::Diverged(format!("PPO loss {loss_value}")));
    }
    let grads = tape.backward(scaled_total)?;
    Ok(WorkerGrad {
        bindings,
        grads,
        policy_loss: f64::from(tape.scalar(policy_loss)),
        value_loss: f64::from(tape.scalar(value_loss)),
        entropy: -f64::from(tape.scalar(entropy_mean_neg)),
    })
}

/// One PPO update: `epochs` passes, each recomputing log-probs and values on
/// re-augmented observations and taking one Adam step over the whole batch.
pub fn ppo_update(
    policy: &mut PolicyNet<f32>,
    buffer: &RolloutBuffer,
    cfg: &PpoConfig,
    augment: &AugmentConfig,
    update_index: usize,
    seed: u64,
) -> Result<Vec<UpdateStats>> {
    if buffer.is_empty() {
        return Err(Error::Invalid("PPO update on an empty buffer".into()));
    }
    // advantages from rollout values, fixed across epochs
    let mut all_adv: Vec<Vec<f64>> = Vec::with_capacity(buffer.workers.len());
    let mut all_ret: Vec<Vec<f64>> = Vec::with_capacity(buffer.workers.len());
    for w in &buffer.workers {
        let rewards: Vec<f32> = w.transitions.iter().map(|t| t.reward).collect();
        let values: Vec<f32> = w.transitions.iter().map(|t| t.value).collect();
        let dones: Vec<bool> = w.transitions.iter().map(|t| t.done).collect();
        let (adv, ret) = compute_gae(&rewards, &values, &dones, w.bootstrap, cfg.gamma, cfg.lambda);
        all_adv.push(adv);
        all_ret.push(ret);
    }
    let mut flat: Vec<f64> = all_adv.iter().flatten().copied().collect();
    normalize_advantages(&mut flat);
    let mut cursor = 0;
    for adv in all_adv.iter_mut() {
        let n = adv.len();
        adv.copy_from_slice(&flat[cursor..cursor + n]);
        cursor += n;
    }

    let adam = AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    };
    let mut stats = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let worker_grads: Vec<Result<WorkerGrad>> = buffer
            .workers
            .par_iter()
            .enumerate()
            .map(|(w, rollout)| {
                let idx = (update_index as u64) * 1_000_000 + (epoch as u64) * 1_000 + w as u64;
                let mut rng = stream(seed, "ppo.reaug", idx);
                worker_loss_graph(
                    policy,
                    rollout,
                    &all_adv[w],
                    &all_ret[w],
                    cfg,
                    augment,
                    &mut rng,
                    buffer.workers.len(),
                )
            })
            .collect();

        policy.store.zero_grads();
        let mut agg = UpdateStats::default();
        let n = buffer.workers.len() as f64;
        for wg in worker_grads {
            let wg = wg?;
            policy.store.accumulate(&wg.bindings, &wg.grads, 1.0);
            agg.policy_loss += wg.policy_loss / n;
            agg.value_loss += wg.value_loss / n;
            agg.entropy += wg.entropy / n;
        }
        agg.grad_norm = clip_grad_norm(&mut policy.store, cfg.grad_clip);
        adam_step(&mut policy.store, &adam);
        stats.push(agg);
    }
    Ok(stats)
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

pub struct TrainInputs {
    pub train_scenes: BTreeMap<String, Arc<Scene>>,
    pub test_scenes: BTreeMap<String, Arc<Scene>>,
    pub train_episodes: Vec<EpisodeSpec>,
    pub test_episodes: Vec<EpisodeSpec>,
}

/// Deterministic episode sharding: shuffle once, worker w takes indices
/// w, w+W, w+2W, ...
pub fn shard_episodes(episodes: &[EpisodeSpec], workers: usize, seed: u64) -> Vec<Vec<EpisodeSpec>> {
    use rand::seq::SliceRandom;
    let mut order: Vec<usize> = (0..episodes.len()).collect();
    order.shuffle(&mut stream(seed, "ppo.order", 0));
    let mut shards = vec![Vec::new(); workers];
    for (i, &e) in order.iter().enumerate() {
        shards[i % workers].push(episodes[e].clone());
    }
    shards
}

fn metrics_header() -> String {
    let mut cols = vec![
        "update".to_string(),
        "env_steps".to_string(),
        "train_spl_proxy".to_string(),
    ];
    for d in ["easy", "medium", "hard", "extra", "overall"] {
        cols.push(format!("test_succ_{d}"));
        cols.push(format!("test_spl_{d}"));
    }
    cols.join(",")
}

/// Full training run: alternating rollout collection and PPO updates with
/// periodic greedy evaluation and checkpointing. Returns the metrics rows.
pub fn train(
    policy: &mut PolicyNet<f32>,
    reach: Option<&ReachabilityNet<f32>>,
    inputs: &TrainInputs,
    cfg: &TrainerConfig,
    out_dir: &Path,
    seed: u64,
) -> Result<Vec<String>> {
    if cfg.use_memory && reach.is_none() {
        return Err(Error::Invalid(
            "memory enabled but no reachability net provided".into(),
        ));
    }
    std::fs::create_dir_all(out_dir)?;
    let scenes = Arc::new(inputs.train_scenes.clone());
    let shards = shard_episodes(&inputs.train_episodes, cfg.ppo.workers, seed);
    let mut workers: Vec<EnvWorker> = shards
        .into_iter()
        .enumerate()
        .map(|(id, episodes)| {
            EnvWorker::new(
                id,
                Arc::clone(&scenes),
                episodes,
                cfg.clone(),
                policy.arch.hidden,
                policy.arch.embed_dim,
                seed,
            )
        })
        .collect::<Result<Vec<_>>>()?;

    let eval_cfg = EvalConfig {
        step: cfg.step,
        use_memory: cfg.use_memory,
        use_long_term: cfg.use_long_term,
        memory_capacity: cfg.memory_capacity,
        long_term_capacity: cfg.long_term_capacity,
        tau: cfg.tau,
        ttl_episodes: cfg.ttl_episodes,
        collect_trajectories: false,
        collect_insertion_log: false,
    };
    let eval_subset = eval_subset(&inputs.test_episodes, cfg.ppo.eval_episodes_per_difficulty);

    let mut metrics: Vec<String> = vec![metrics_header()];
    let mut spl_window: VecDeque<f64> = VecDeque::with_capacity(100);
    let metrics_path = out_dir.join("metrics.csv");

    for update in 0..cfg.ppo.updates {
        let buffer = collect_rollouts(&mut workers, policy, reach)?;
        for w in &buffer.workers {
            for &(success, shortest, path) in &w.completed {
                let term = if success {
                    shortest / path.max(shortest)
                } else {
                    0.0
                };
                if spl_window.len() == 100 {
                    spl_window.pop_front();
                }
                spl_window.push_back(term);
            }
        }

        let pre_update = policy.store.clone();
        match ppo_update(policy, &buffer, &cfg.ppo, &cfg.augment, update, seed) {
            Ok(stats) => {
                if let Some(last) = stats.last() {
                    log::info!(
                        "update {update}: policy {:.4} value {:.4} entropy {:.4} grad {:.3}",
                        last.policy_loss,
                        last.value_loss,
                        last.entropy,
                        last.grad_norm
                    );
                }
            }
            Err(Error::Diverged(msg)) => {
                policy.store = pre_update;
                policy.store.save(&out_dir.join("last_good.ckpt"))?;
                return Err(Error::Diverged(format!(
                    "aborted at update {update}: {msg}; last-good checkpoint retained"
                )));
            }
            Err(e) => return Err(e),
        }

        let env_steps = (update + 1) * cfg.ppo.workers * cfg.ppo.segment;
        let is_last = update + 1 == cfg.ppo.updates;
        if (update + 1) % cfg.ppo.eval_every == 0 || is_last {
            let proxy = if spl_window.is_empty() {
                0.0
            } else {
                spl_window.iter().sum::<f64>() / spl_window.len() as f64
            };
            let outcome = evaluate(policy, reach, &inputs.test_scenes, &eval_subset, &eval_cfg)?;
            let report = crate::eval::report("train-eval", seed, &outcome.results)?;
            let mut row = format!("{},{},{proxy}", update + 1, env_steps);
            for d in ["easy", "medium", "hard", "extra", "overall"] {
                match report.difficulty.get(d) {
                    Some(r) => row.push_str(&format!(",{},{}", r.success, r.spl)),
                    None => row.push_str(",,"),
                }
            }
            metrics.push(row);
            std::fs::write(&metrics_path, metrics.join("\n") + "\n")?;
            log::info!(
                "update {}: test overall spl {:.3}",
                update + 1,
                report.overall_spl()
            );
        }
        if (update + 1) % cfg.ppo.ckpt_every == 0 || is_last {
            policy
                .store
                .save(&out_dir.join(format!("ckpt_{:06}.ckpt", update + 1)))?;
        }
    }
    policy.store.save(&out_dir.join("final.ckpt"))?;
    std::fs::write(&metrics_path, metrics.join("\n") + "\n")?;
    Ok(metrics)
}

/// Deterministic test-episode subset: the first k per difficulty.
pub fn eval_subset(episodes: &[EpisodeSpec], per_difficulty: usize) -> Vec<EpisodeSpec> {
    let mut counts: HashMap<Difficulty, usize> = HashMap::new();
    let mut out = Vec::new();
    for e in episodes {
        let c = counts.entry(e.difficulty).or_insert(0);
        if *c < per_difficulty {
            *c += 1;
            out.push(e.clone());
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gae_matches_double_loop_recursion_on_random_instances() {
        let mut rng = stream(5, "gae", 0);
        for _ in 0..100 {
            let n = rand::Rng::gen_range(&mut rng, 1..100);
            let rewards: Vec<f32> =
                (0..n).map(|_| rand::Rng::gen_range(&mut rng, -1.0..1.0)).collect();
            let values: Vec<f32> =
                (0..n).map(|_| rand::Rng::gen_range(&mut rng, -1.0..1.0)).collect();
            let dones: Vec<bool> = (0..n).map(|_| rand::Rng::gen_bool(&mut rng, 0.1)).collect();
            let bootstrap: f32 = rand::Rng::gen_range(&mut rng, -1.0..1.0);
            let (gamma, lambda) = (0.99, 0.95);
            let (adv, ret) = compute_gae(&rewards, &values, &dones, bootstrap, gamma, lambda);

            // brute force: direct double loop over the recursion definition
            for t in 0..n {
                let mut expect = 0.0f64;
                let mut weight = 1.0f64;
                for u in t..n {
                    let not_done = if dones[u] { 0.0 } else { 1.0 };
                    let next_value = if u + 1 < n {
                        f64::from(values[u + 1])
                    } else {
                        f64::from(bootstrap)
                    };
                    let delta = f64::from(rewards[u]) + gamma * next_value * not_done
                        - f64::from(values[u]);
                    expect += weight * delta;
                    if dones[u] {
                        break;
                    }
                    weight *= gamma * lambda;
                }
                assert!(
                    (adv[t] - expect).abs() < 1e-6,
                    "t={t}: {} vs {expect}",
                    adv[t]
                );
                assert!((ret[t] - (expect + f64::from(values[t]))).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn gae_monte_carlo_limit_telescopes() {
        // gamma=1, lambda=1, no dones: A_t = sum r + bootstrap - v_t
        let rewards = vec![1.0f32, 2.0, 3.0];
        let values = vec![0.5f32, 0.25, 0.125];
        let dones = vec![false, false, false];
        let (adv, _) = compute_gae(&rewards, &values, &dones, 10.0, 1.0, 1.0);
        let total: f32 = rewards.iter().sum::<f32>() + 10.0;
        for (t, a) in adv.iter().enumerate() {
            let expect = f64::from(total) - f64::from(values[t])
                - rewards[..t].iter().map(|&r| f64::from(r)).sum::<f64>();
            assert!((a - expect).abs() < 1e-6, "t={t}");
        }
    }

    #[test]
    fn gae_single_terminal_step_is_reward_minus_value() {
        let (adv, ret) = compute_gae(&[2.0], &[0.5], &[true], 99.0, 0.99, 0.95);
        assert!((adv[0] - 1.5).abs() < 1e-9);
        assert!((ret[0] - 2.0).abs() < 1e-9);
    }

    #[test]
    fn normalization_gives_zero_mean_unit_std() {
        let mut advs: Vec<f64> = (0..50).map(|i| (i as f64) * 0.3 - 4.0).collect();
        normalize_advantages(&mut advs);
        let mean: f64 = advs.iter().sum::<f64>() / advs.len() as f64;
        let var: f64 = advs.iter().map(|a| a * a).sum::<f64>() / advs.len() as f64;
        assert!(mean.abs() < 1e-9);
        assert!((var - 1.0).abs() < 1e-6);
    }

    #[test]
    fn shard_episodes_covers_all_and_is_deterministic() {
        use crate::sim::Pose;
        let eps: Vec<EpisodeSpec> = (0..10)
            .map(|i| EpisodeSpec {
                scene_id: format!("s{i}"),
                start: Pose::new(0.0, 0.0, 0.0),
                goal: (1.0, 1.0),
                difficulty: Difficulty::Easy,
                geodesic: 2.0,
            })
            .collect();
        let a = shard_episodes(&eps, 3, 7);
        let b = shard_episodes(&eps, 3, 7);
        assert_eq!(a.len(), 3);
        let total: usize = a.iter().map(|s| s.len()).sum();
        assert_eq!(total, 10);
        for (x, y) in a.iter().zip(b.iter()) {
            assert_eq!(
                serde_json::to_string(x).unwrap(),
                serde_json::to_string(y).unwrap()
            );
        }
    }
}
