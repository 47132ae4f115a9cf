//! PPO-level integration tests: the clipped-surrogate piecewise formula,
//! clip-band gradient behavior, entropy sign, zero-learning-rate no-ops,
//! rollout shapes, replay fidelity, and bitwise reproducibility.

use std::collections::BTreeMap;
use std::sync::Arc;

use ndarray::Array2;
use panonav_core::augment::AugmentConfig;
use panonav_core::config::ExperimentConfig;
use panonav_core::nn::optim::{adam_step, AdamConfig};
use panonav_core::policy::{PolicyArch, PolicyNet};
use panonav_core::ppo::{
    collect_rollouts, ppo_update, replay_log_probs, shard_episodes, EnvWorker, PpoConfig,
    RolloutBuffer, TrainerConfig,
};
use panonav_core::reach::{ReachArch, ReachabilityNet};
use panonav_core::rng::stream;
use panonav_core::sim::{
    generate_episode_dataset, generate_scene, Difficulty, Scene, SceneParams, StepConfig,
};
use panonav_core::nn::Tape;

// ---------------------------------------------------------------------------
// Surrogate formula checks on synthetic data
// ---------------------------------------------------------------------------

/// The op-graph surrogate must equal the piecewise closed form.
#[test]
fn clip_branch_selection_matches_piecewise_formula() {
    let eps = 0.2f32;
    let mut rng = stream(1, "clip", 0);
    for _ in 0..500 {
        let ratio: f32 = rand::Rng::gen_range(&mut rng, 0.0..2.5);
        let adv: f32 = rand::Rng::gen_range(&mut rng, -2.0..2.0);

        let mut tape: Tape<f32> = Tape::new();
        let r = tape.leaf_owned(Array2::from_elem((1, 1), ratio));
        let a = Arc::new(Array2::from_elem((1, 1), adv));
        let surr1 = tape.mul_const(r, Arc::clone(&a)).unwrap();
        let clipped = tape.clamp(r, 1.0 - eps, 1.0 + eps);
        let surr2 = tape.mul_const(clipped, a).unwrap();
        let m = tape.minimum(surr1, surr2).unwrap();
        let got = tape.scalar(m);

        let expect = (ratio * adv).min(ratio.clamp(1.0 - eps, 1.0 + eps) * adv);
        assert_eq!(got, expect, "ratio {ratio} adv {adv}");
    }
    // the spec's named cases
    let eval = |ratio: f32, adv: f32| {
        let mut tape: Tape<f32> = Tape::new();
        let r = tape.leaf_owned(Array2::from_elem((1, 1), ratio));
        let a = Arc::new(Array2::from_elem((1, 1), adv));
        let s1 = tape.mul_const(r, Arc::clone(&a)).unwrap();
        let c = tape.clamp(r, 0.8, 1.2);
        let s2 = tape.mul_const(c, a).unwrap();
        let m = tape.minimum(s1, s2).unwrap();
        tape.scalar(m)
    };
    assert_eq!(eval(1.5, 1.0), 1.2, "clipped branch for rho=1.5, A>0");
    assert_eq!(eval(1.1, 1.0), 1.1, "unclipped branch inside the band");
}

/// Outside the clip band on the disadvantageous side the gradient vanishes.
#[test]
fn surrogate_gradient_is_zero_outside_band_on_disadvantageous_side() {
    let eps = 0.2f32;
    let grad_of = |log_ratio: f32, adv: f32| -> f32 {
        let mut tape: Tape<f32> = Tape::new();
        let z = tape.leaf_owned(Array2::from_elem((1, 1), log_ratio));
        let ratio = tape.exp(z);
        let a = Arc::new(Array2::from_elem((1, 1), adv));
        let surr1 = tape.mul_const(ratio, Arc::clone(&a)).unwrap();
        let clipped = tape.clamp(ratio, 1.0 - eps, 1.0 + eps);
        let surr2 = tape.mul_const(clipped, a).unwrap();
        let m = tape.minimum(surr1, surr2).unwrap();
        let loss = tape.scale(m, -1.0);
        let grads = tape.backward(loss).unwrap();
        grads.get(z).map_or(0.0, |g| g[[0, 0]])
    };
    // A > 0 and ratio above the band: clipped, zero gradient
    assert_eq!(grad_of(0.5f32, 1.0), 0.0);
    // A < 0 and ratio below the band: clipped, zero gradient
    assert_eq!(grad_of(-0.5f32, -1.0), 0.0);
    // inside the band: gradient flows
    assert!(grad_of(0.0, 1.0).abs() > 1e-6);
    // A < 0, ratio above band: unclipped branch active, gradient flows
    assert!(grad_of(0.5, -1.0).abs() > 1e-6);
}

/// Flattening the action distribution lowers the (negative-entropy) term.
#[test]
fn entropy_term_decreases_loss_when_distribution_flattens() {
    let term_of = |logits: [f32; 4]| -> f32 {
        let mut tape: Tape<f32> = Tape::new();
        let l = tape.leaf_owned(Array2::from_shape_vec((1, 4), logits.to_vec()).unwrap());
        let p = tape.softmax_rows(l, None).unwrap();
        let lp = tape.log_softmax_rows(l);
        let plogp = tape.mul(p, lp).unwrap();
        let rows = tape.sum_rows(plogp);
        let neg_ent = tape.mean_all(rows);
        let term = tape.scale(neg_ent, 0.01f32);
        tape.scalar(term)
    };
    let peaked = term_of([5.0, 0.0, 0.0, 0.0]);
    let flat = term_of([0.0, 0.0, 0.0, 0.0]);
    assert!(flat < peaked, "flat {flat} should be below peaked {peaked}");
}

// ---------------------------------------------------------------------------
// Pipeline fixtures
// ---------------------------------------------------------------------------

struct Fixture {
    scenes: BTreeMap<String, Arc<Scene>>,
    policy: PolicyNet<f32>,
    reach: ReachabilityNet<f32>,
    cfg: TrainerConfig,
    workers: Vec<EnvWorker>,
}

fn fixture(seed: u64, workers: usize, segment: usize, use_memory: bool) -> Fixture {
    fixture_with(seed, workers, segment, use_memory, AugmentConfig::default())
}

fn fixture_with(
    seed: u64,
    workers: usize,
    segment: usize,
    use_memory: bool,
    augment: AugmentConfig,
) -> Fixture {
    let params = SceneParams {
        width: 10.0,
        height: 10.0,
        cell: 0.5,
        wall_density: 0.08,
        dividers: 2,
        max_retries: 20,
    };
    let scene_list: Vec<Scene> = (0..2)
        .map(|i| generate_scene(500 + i, &params).unwrap())
        .collect();
    let (episodes, _) = generate_episode_dataset(
        &scene_list,
        4,
        &[Difficulty::Easy, Difficulty::Medium],
        seed,
    );
    assert!(!episodes.is_empty());
    let scenes: BTreeMap<String, Arc<Scene>> = scene_list
        .into_iter()
        .map(|s| (s.id.clone(), Arc::new(s)))
        .collect();

    let arch = PolicyArch {
        views: 4,
        channels: 4,
        rays: 16,
        view_feature: 24,
        encoder_hidden: 32,
        hidden: 32,
        action_embed: 8,
        attn_layers: 2,
        attn_heads: 2,
        embed_dim: 16,
        use_memory,
    };
    let policy = PolicyNet::init(arch, seed);
    let reach = ReachabilityNet::init(
        ReachArch {
            views: 4,
            channels: 4,
            rays: 16,
            embed_dim: 16,
            encoder_hidden: 32,
            comparator_hidden: 24,
            aggregation: panonav_core::reach::Aggregation::Sum,
        },
        seed + 1,
    );

    let cfg = TrainerConfig {
        ppo: PpoConfig {
            workers,
            segment,
            updates: 2,
            epochs: 2,
            ..PpoConfig::default()
        },
        step: StepConfig {
            obs: panonav_core::sim::ObsSpec {
                views: 4,
                channels: 4,
                rays: 16,
            },
            max_steps: 40,
            ..StepConfig::default()
        },
        augment,
        use_memory,
        use_long_term: false,
        memory_capacity: 6,
        long_term_capacity: 8,
        tau: 0.5,
        ttl_episodes: 10,
    };

    let shards = shard_episodes(&episodes, workers, seed);
    let scenes_arc = Arc::new(scenes.clone());
    let workers = shards
        .into_iter()
        .enumerate()
        .map(|(id, eps)| {
            EnvWorker::new(
                id,
                Arc::clone(&scenes_arc),
                eps,
                cfg.clone(),
                policy.arch.hidden,
                policy.arch.embed_dim,
                seed,
            )
            .unwrap()
        })
        .collect();
    Fixture {
        scenes,
        policy,
        reach,
        cfg,
        workers,
    }
}

#[test]
fn rollout_buffer_has_workers_times_segment_transitions() {
    let mut f = fixture(3, 4, 16, true);
    let buffer = collect_rollouts(&mut f.workers, &f.policy, Some(&f.reach)).unwrap();
    assert_eq!(buffer.len(), 4 * 16);
    for w in &buffer.workers {
        assert_eq!(w.transitions.len(), 16);
        // every transition carries a memory snapshot when memory is enabled
        assert!(w.transitions.iter().all(|t| t.memory.is_some()));
    }
    let _ = f.scenes;
}

#[test]
fn replayed_log_probs_match_rollout_with_augmentation_disabled() {
    let mut f = fixture_with(5, 2, 12, true, AugmentConfig::disabled());
    let buffer = collect_rollouts(&mut f.workers, &f.policy, Some(&f.reach)).unwrap();
    for w in &buffer.workers {
        let replayed = replay_log_probs(&f.policy, w).unwrap();
        for (t, (tr, lp)) in w.transitions.iter().zip(replayed.iter()).enumerate() {
            assert!(
                (tr.log_prob - lp).abs() < 1e-5,
                "step {t}: stored {} vs replayed {lp}",
                tr.log_prob
            );
        }
    }
}

#[test]
fn zero_learning_rate_update_leaves_parameters_bitwise_unchanged() {
    let mut f = fixture(7, 2, 8, true);
    let buffer = collect_rollouts(&mut f.workers, &f.policy, Some(&f.reach)).unwrap();
    let before: Vec<(String, Vec<u32>)> = f
        .policy
        .store
        .names()
        .map(|n| {
            (
                n.clone(),
                f.policy.store.get(n).value.iter().map(|v| v.to_bits()).collect(),
            )
        })
        .collect();
    let cfg = PpoConfig {
        lr: 0.0,
        ..f.cfg.ppo
    };
    ppo_update(&mut f.policy, &buffer, &cfg, &f.cfg.augment, 0, 7).unwrap();
    for (name, bits) in before {
        let after: Vec<u32> = f
            .policy
            .store
            .get(&name)
            .value
            .iter()
            .map(|v| v.to_bits())
            .collect();
        assert_eq!(bits, after, "parameter {name} changed under lr=0");
    }
}

#[test]
fn single_worker_training_step_is_bitwise_reproducible() {
    let run = || {
        let mut f = fixture(11, 1, 16, true);
        for update in 0..2 {
            let buffer = collect_rollouts(&mut f.workers, &f.policy, Some(&f.reach)).unwrap();
            ppo_update(&mut f.policy, &buffer, &f.cfg.ppo, &f.cfg.augment, update, 11).unwrap();
        }
        let mut bits = Vec::new();
        for n in f.policy.store.names() {
            bits.extend(f.policy.store.get(n).value.iter().map(|v| v.to_bits()));
        }
        bits
    };
    assert_eq!(run(), run());
}

#[test]
fn parallel_worker_updates_are_reproducible() {
    // the same two-update run with 3 workers, twice
    let run = || {
        let mut f = fixture(13, 3, 8, true);
        for update in 0..2 {
            let buffer = collect_rollouts(&mut f.workers, &f.policy, Some(&f.reach)).unwrap();
            ppo_update(&mut f.policy, &buffer, &f.cfg.ppo, &f.cfg.augment, update, 13).unwrap();
        }
        let mut bits = Vec::new();
        for n in f.policy.store.names() {
            bits.extend(f.policy.store.get(n).value.iter().map(|v| v.to_bits()));
        }
        bits
    };
    assert_eq!(run(), run());
}

#[test]
fn adam_with_zero_gradients_and_lr_progresses_time_only() {
    // guards an interaction: lr=0 must be a parameter no-op even after
    // previous real steps populated the moment buffers
    let mut net: PolicyNet<f32> = PolicyNet::init(
        PolicyArch {
            views: 4,
            channels: 4,
            rays: 8,
            view_feature: 8,
            encoder_hidden: 8,
            hidden: 8,
            action_embed: 4,
            attn_layers: 1,
            attn_heads: 1,
            embed_dim: 8,
            use_memory: false,
        },
        3,
    );
    net.store.zero_grads();
    let before: Vec<f32> = net.store.get("obs_fc.w").value.iter().copied().collect();
    adam_step(
        &mut net.store,
        &AdamConfig {
            lr: 0.0,
            ..AdamConfig::default()
        },
    );
    let after: Vec<f32> = net.store.get("obs_fc.w").value.iter().copied().collect();
    assert_eq!(before, after);
    assert_eq!(net.store.adam_t, 1);
}

#[test]
fn rollout_buffer_is_empty_check() {
    let b = RolloutBuffer { workers: vec![] };
    assert!(b.is_empty());
}

#[test]
fn desk_config_produces_valid_trainer_pieces() {
    let cfg = ExperimentConfig::desk();
    assert_eq!(cfg.ppo.segment, 64);
    assert_eq!(cfg.ppo.workers, 8);
    let arch = cfg.policy_arch();
    assert_eq!(arch.hidden, 128);
    assert!(arch.use_memory);
}
