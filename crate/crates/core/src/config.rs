//! Experiment configuration: nested sections addressed by dotted keys
//! (`ppo.lr = 9e-5`), two presets (desk and paper), strict rejection of
//! unknown keys, and a JSON echo of the resolved configuration.

use serde::{Deserialize, Serialize};

use crate::augment::AugmentConfig;
use crate::error::{Error, Result};
use crate::sim::{ObsSpec, RewardConfig, StepConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Desk,
    Paper,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SimSection {
    pub scene_width: f64,
    pub scene_height: f64,
    pub cell: f64,
    pub wall_density: f64,
    pub dividers: usize,
    pub train_scenes: usize,
    pub test_scenes: usize,
    pub views: usize,
    pub channels: usize,
    pub rays: usize,
    pub forward_step: f64,
    pub turn_deg: f64,
    pub collision_margin: f64,
    pub success_radius: f64,
    pub max_steps: u32,
    pub reward_shape: f64,
    pub reward_slack: f64,
    pub reward_success: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct WalkSection {
    pub steps: usize,
    pub forward_step: f64,
    pub turn_deg: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ReachSection {
    pub embed_dim: usize,
    pub encoder_hidden: usize,
    pub comparator_hidden: usize,
    pub aggregation: String,
    pub k: usize,
    pub pos_per_walk: usize,
    pub neg_per_walk: usize,
    pub val_fraction: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MemorySection {
    pub tau: f64,
    pub capacity: usize,
    pub long_term_capacity: usize,
    pub ttl_episodes: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PolicySection {
    pub hidden: usize,
    pub view_feature: usize,
    pub encoder_hidden: usize,
    pub action_embed: usize,
    pub attn_layers: usize,
    pub attn_heads: usize,
    pub use_memory: bool,
    pub use_long_term: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PpoSection {
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

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpisodesSection {
    pub train_per_difficulty: usize,
    pub test_per_difficulty: usize,
    pub bands: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub preset: Preset,
    pub seed: u64,
    pub sim: SimSection,
    pub walk: WalkSection,
    pub augment: AugmentConfig,
    pub reach: ReachSection,
    pub memory: MemorySection,
    pub policy: PolicySection,
    pub ppo: PpoSection,
    pub episodes: EpisodesSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig::desk()
    }
}

impl ExperimentConfig {
    /// Desk-scale preset: runnable on one CPU.
    pub fn desk() -> Self {
        ExperimentConfig {
            preset: Preset::Desk,
            seed: 1,
            sim: SimSection {
                scene_width: 16.0,
                scene_height: 16.0,
                cell: 0.5,
                wall_density: 0.10,
                dividers: 6,
                train_scenes: 24,
                test_scenes: 6,
                views: 4,
                channels: 4,
                rays: 32,
                forward_step: 0.25,
                turn_deg: 10.0,
                collision_margin: 0.01,
                success_radius: 1.0,
                max_steps: 500,
                reward_shape: 1.0,
                reward_slack: -0.01,
                reward_success: 2.5,
            },
            walk: WalkSection {
                steps: 2000,
                forward_step: 1.0,
                turn_deg: 30.0,
            },
            augment: AugmentConfig::default(),
            reach: ReachSection {
                embed_dim: 64,
                encoder_hidden: 256,
                comparator_hidden: 128,
                aggregation: "sum".into(),
                k: 10,
                pos_per_walk: 500,
                neg_per_walk: 500,
                val_fraction: 0.2,
                epochs: 30,
                batch_size: 256,
                lr: 0.01,
                momentum: 0.9,
                weight_decay: 1e-7,
            },
            memory: MemorySection {
                tau: 0.5,
                capacity: 20,
                long_term_capacity: 60,
                ttl_episodes: 100,
            },
            policy: PolicySection {
                hidden: 128,
                view_feature: 128,
                encoder_hidden: 256,
                action_embed: 16,
                attn_layers: 4,
                attn_heads: 4,
                use_memory: true,
                use_long_term: false,
            },
            ppo: PpoSection {
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
            },
            episodes: EpisodesSection {
                train_per_difficulty: 100,
                test_per_difficulty: 50,
                bands: "easy,medium,hard".into(),
            },
        }
    }

    /// Paper-scale preset: records the published training recipe for
    /// documentation (72/14 scenes, 5k-step walks, 1k+1k pairs, width-512
    /// networks, 50k PPO updates, RGB-only observations).
    pub fn paper() -> Self {
        let mut cfg = ExperimentConfig::desk();
        cfg.preset = Preset::Paper;
        cfg.sim.train_scenes = 72;
        cfg.sim.test_scenes = 14;
        cfg.sim.channels = 3; // RGB input alone
        cfg.walk.steps = 5000;
        cfg.reach.pos_per_walk = 1000;
        cfg.reach.neg_per_walk = 1000;
        cfg.reach.embed_dim = 512;
        cfg.reach.comparator_hidden = 512;
        cfg.policy.hidden = 512;
        cfg.ppo.updates = 50_000;
        cfg.episodes.train_per_difficulty = 3000;
        cfg.episodes.test_per_difficulty = 100;
        cfg
    }

    pub fn preset(name: Preset) -> Self {
        match name {
            Preset::Desk => ExperimentConfig::desk(),
            Preset::Paper => ExperimentConfig::paper(),
        }
    }

    /// Apply line-oriented `key = value` overrides; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "line {}: expected `key = value`, got `{raw}`",
                    lineno + 1
                )));
            };
            self.set_key(key.trim(), value.trim())?;
        }
        Ok(())
    }

    pub fn to_json_pretty(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Set a single dotted key; unknown keys are rejected.
    pub fn set_key(&mut self, key: &str, value: &str) -> Result<()> {
        fn p<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value.parse().map_err(|_| {
                Error::Config(format!("invalid value `{value}` for key `{key}`"))
            })
        }
        match key {
            "seed" => self.seed = p(key, value)?,
            "sim.scene_width" => self.sim.scene_width = p(key, value)?,
            "sim.scene_height" => self.sim.scene_height = p(key, value)?,
            "sim.cell" => self.sim.cell = p(key, value)?,
            "sim.wall_density" => self.sim.wall_density = p(key, value)?,
            "sim.dividers" => self.sim.dividers = p(key, value)?,
            "sim.train_scenes" => self.sim.train_scenes = p(key, value)?,
            "sim.test_scenes" => self.sim.test_scenes = p(key, value)?,
            "sim.views" => self.sim.views = p(key, value)?,
            "sim.channels" => self.sim.channels = p(key, value)?,
            "sim.rays" => self.sim.rays = p(key, value)?,
            "sim.forward_step" => self.sim.forward_step = p(key, value)?,
            "sim.turn_deg" => self.sim.turn_deg = p(key, value)?,
            "sim.collision_margin" => self.sim.collision_margin = p(key, value)?,
            "sim.success_radius" => self.sim.success_radius = p(key, value)?,
            "sim.max_steps" => self.sim.max_steps = p(key, value)?,
            "sim.reward_shape" => self.sim.reward_shape = p(key, value)?,
            "sim.reward_slack" => self.sim.reward_slack = p(key, value)?,
            "sim.reward_success" => self.sim.reward_success = p(key, value)?,
            "walk.steps" => self.walk.steps = p(key, value)?,
            "walk.forward_step" => self.walk.forward_step = p(key, value)?,
            "walk.turn_deg" => self.walk.turn_deg = p(key, value)?,
            "augment.enabled" => self.augment.enabled = p(key, value)?,
            "augment.crop_min_scale" => self.augment.crop_min_scale = p(key, value)?,
            "augment.jitter_strength" => self.augment.jitter_strength = p(key, value)?,
            "reach.embed_dim" => self.reach.embed_dim = p(key, value)?,
            "reach.encoder_hidden" => self.reach.encoder_hidden = p(key, value)?,
            "reach.comparator_hidden" => self.reach.comparator_hidden = p(key, value)?,
            "reach.aggregation" => {
                let _: crate::reach::Aggregation = value.parse()?;
                self.reach.aggregation = value.to_string();
            }
            "reach.k" => self.reach.k = p(key, value)?,
            "reach.pos_per_walk" => self.reach.pos_per_walk = p(key, value)?,
            "reach.neg_per_walk" => self.reach.neg_per_walk = p(key, value)?,
            "reach.val_fraction" => self.reach.val_fraction = p(key, value)?,
            "reach.epochs" => self.reach.epochs = p(key, value)?,
            "reach.batch_size" => self.reach.batch_size = p(key, value)?,
            "reach.lr" => self.reach.lr = p(key, value)?,
            "reach.momentum" => self.reach.momentum = p(key, value)?,
            "reach.weight_decay" => self.reach.weight_decay = p(key, value)?,
            "memory.tau" => self.memory.tau = p(key, value)?,
            "memory.capacity" => self.memory.capacity = p(key, value)?,
            "memory.long_term_capacity" => self.memory.long_term_capacity = p(key, value)?,
            "memory.ttl_episodes" => self.memory.ttl_episodes = p(key, value)?,
            "policy.hidden" => self.policy.hidden = p(key, value)?,
            "policy.view_feature" => self.policy.view_feature = p(key, value)?,
            "policy.encoder_hidden" => self.policy.encoder_hidden = p(key, value)?,
            "policy.action_embed" => self.policy.action_embed = p(key, value)?,
            "policy.attn_layers" => self.policy.attn_layers = p(key, value)?,
            "policy.attn_heads" => self.policy.attn_heads = p(key, value)?,
            "policy.use_memory" => self.policy.use_memory = p(key, value)?,
            "policy.use_long_term" => self.policy.use_long_term = p(key, value)?,
            "ppo.clip" => self.ppo.clip = p(key, value)?,
            "ppo.entropy_coef" => self.ppo.entropy_coef = p(key, value)?,
            "ppo.epochs" => self.ppo.epochs = p(key, value)?,
            "ppo.lr" => self.ppo.lr = p(key, value)?,
            "ppo.gamma" => self.ppo.gamma = p(key, value)?,
            "ppo.lambda" => self.ppo.lambda = p(key, value)?,
            "ppo.value_coef" => self.ppo.value_coef = p(key, value)?,
            "ppo.grad_clip" => self.ppo.grad_clip = p(key, value)?,
            "ppo.workers" => self.ppo.workers = p(key, value)?,
            "ppo.segment" => self.ppo.segment = p(key, value)?,
            "ppo.updates" => self.ppo.updates = p(key, value)?,
            "ppo.ckpt_every" => self.ppo.ckpt_every = p(key, value)?,
            "ppo.eval_every" => self.ppo.eval_every = p(key, value)?,
            "ppo.eval_episodes_per_difficulty" => {
                self.ppo.eval_episodes_per_difficulty = p(key, value)?
            }
            "episodes.train_per_difficulty" => {
                self.episodes.train_per_difficulty = p(key, value)?
            }
            "episodes.test_per_difficulty" => self.episodes.test_per_difficulty = p(key, value)?,
            "episodes.bands" => {
                for b in value.split(',') {
                    let _: crate::sim::Difficulty = b.trim().parse()?;
                }
                self.episodes.bands = value.to_string();
            }
            other => return Err(Error::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    pub fn bands(&self) -> Result<Vec<crate::sim::Difficulty>> {
        self.episodes
            .bands
            .split(',')
            .map(|b| b.trim().parse())
            .collect()
    }

    pub fn scene_params(&self) -> crate::sim::SceneParams {
        crate::sim::SceneParams {
            width: self.sim.scene_width,
            height: self.sim.scene_height,
            cell: self.sim.cell,
            wall_density: self.sim.wall_density,
            dividers: self.sim.dividers,
            max_retries: 50,
        }
    }

    pub fn obs_spec(&self) -> ObsSpec {
        ObsSpec {
            views: self.sim.views,
            channels: self.sim.channels,
            rays: self.sim.rays,
        }
    }

    pub fn step_config(&self) -> StepConfig {
        StepConfig {
            forward_step: self.sim.forward_step,
            turn_radians: self.sim.turn_deg.to_radians(),
            collision_margin: self.sim.collision_margin,
            success_radius: self.sim.success_radius,
            max_steps: self.sim.max_steps,
            reward: RewardConfig {
                shape: self.sim.reward_shape,
                slack: self.sim.reward_slack,
                success: self.sim.reward_success,
            },
            obs: self.obs_spec(),
        }
    }

    pub fn walk_config(&self) -> crate::sim::WalkConfig {
        crate::sim::WalkConfig {
            steps: self.walk.steps,
            forward_step: self.walk.forward_step,
            turn_radians: self.walk.turn_deg.to_radians(),
            collision_margin: self.sim.collision_margin,
            obs: self.obs_spec(),
        }
    }

    pub fn reach_arch(&self) -> Result<crate::reach::ReachArch> {
        Ok(crate::reach::ReachArch {
            views: self.sim.views,
            channels: self.sim.channels,
            rays: self.sim.rays,
            embed_dim: self.reach.embed_dim,
            encoder_hidden: self.reach.encoder_hidden,
            comparator_hidden: self.reach.comparator_hidden,
            aggregation: self.reach.aggregation.parse()?,
        })
    }

    pub fn reach_train_config(&self) -> crate::reach::ReachTrainConfig {
        crate::reach::ReachTrainConfig {
            epochs: self.reach.epochs,
            batch_size: self.reach.batch_size,
            lr: self.reach.lr,
            momentum: self.reach.momentum,
            weight_decay: self.reach.weight_decay,
        }
    }

    pub fn policy_arch(&self) -> crate::policy::PolicyArch {
        crate::policy::PolicyArch {
            views: self.sim.views,
            channels: self.sim.channels,
            rays: self.sim.rays,
            view_feature: self.policy.view_feature,
            encoder_hidden: self.policy.encoder_hidden,
            hidden: self.policy.hidden,
            action_embed: self.policy.action_embed,
            attn_layers: self.policy.attn_layers,
            attn_heads: self.policy.attn_heads,
            embed_dim: self.reach.embed_dim,
            use_memory: self.policy.use_memory,
        }
    }
}
