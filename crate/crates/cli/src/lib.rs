//! Command implementations behind the `panonav` binary. Each command reads
//! an [`ExperimentConfig`], writes its outputs under one workspace directory,
//! and drops a `resolved-config.json` (config + code version) so any run can
//! be reproduced exactly.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use panonav_core::config::ExperimentConfig;
use panonav_core::eval::{self, EvalConfig, EvalReport};
use panonav_core::memory::MemoryBuffer;
use panonav_core::policy::{PolicyArch, PolicyNet};
use panonav_core::ppo::{train, PpoConfig, TrainInputs, TrainerConfig};
use panonav_core::reach::{
    build_pair_dataset, save_pair_index, train_reachability, write_accuracy_csv, ReachabilityNet,
};
use panonav_core::sim::{
    generate_episode_dataset, generate_scene, load_episodes, load_walk, random_walk,
    save_episodes, save_walk, Difficulty, EpisodeSpec, Observation, Scene,
};

pub const CODE_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Shared command context: resolved config plus the workspace directory.
pub struct Ctx {
    pub cfg: ExperimentConfig,
    pub out: PathBuf,
}

impl Ctx {
    pub fn new(cfg: ExperimentConfig, out: PathBuf) -> Self {
        Ctx { cfg, out }
    }

    fn dir(&self, sub: &str) -> Result<PathBuf> {
        let d = self.out.join(sub);
        std::fs::create_dir_all(&d)?;
        Ok(d)
    }

    /// Echo the resolved config (and code version) into a command's output
    /// directory so the run can be reproduced bit for bit.
    fn write_resolved(&self, dir: &Path, command: &str) -> Result<()> {
        #[derive(Serialize)]
        struct Resolved<'a> {
            command: &'a str,
            code_version: &'a str,
            config: &'a ExperimentConfig,
        }
        let body = serde_json::to_string_pretty(&Resolved {
            command,
            code_version: CODE_VERSION,
            config: &self.cfg,
        })?;
        std::fs::write(dir.join("resolved-config.json"), body)?;
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
pub struct SplitManifest {
    pub train: Vec<String>,
    pub test: Vec<String>,
}

fn scene_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{id}.json"))
}

/// Generate train/test scenes and the split manifest.
pub fn cmd_gen_scenes(ctx: &Ctx) -> Result<SplitManifest> {
    let dir = ctx.dir("scenes")?;
    let params = ctx.cfg.scene_params();
    let total = ctx.cfg.sim.train_scenes + ctx.cfg.sim.test_scenes;
    let mut train = Vec::new();
    let mut test = Vec::new();
    for i in 0..total {
        let seed = panonav_core::rng::subseed(ctx.cfg.seed, "scene-set", i as u64);
        let scene = generate_scene(seed, &params)
            .with_context(|| format!("generating scene {i} of {total}"))?;
        scene.save(&scene_path(&dir, &scene.id))?;
        if i < ctx.cfg.sim.train_scenes {
            train.push(scene.id);
        } else {
            test.push(scene.id);
        }
    }
    let manifest = SplitManifest { train, test };
    std::fs::write(
        dir.join("split.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    ctx.write_resolved(&dir, "gen-scenes")?;
    log::info!(
        "wrote {} train + {} test scenes to {}",
        manifest.train.len(),
        manifest.test.len(),
        dir.display()
    );
    Ok(manifest)
}

pub fn load_split(ctx: &Ctx) -> Result<SplitManifest> {
    let path = ctx.out.join("scenes/split.json");
    let text = std::fs::read_to_string(&path)
        .with_context(|| format!("{} missing; run gen-scenes first", path.display()))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn load_scenes(ctx: &Ctx, ids: &[String]) -> Result<BTreeMap<String, Arc<Scene>>> {
    let dir = ctx.out.join("scenes");
    ids.iter()
        .map(|id| {
            let scene = Scene::load(&scene_path(&dir, id))
                .with_context(|| format!("loading scene {id}"))?;
            Ok((id.clone(), Arc::new(scene)))
        })
        .collect()
}

/// One random-walk archive per train scene.
pub fn cmd_collect_walks(ctx: &Ctx) -> Result<Vec<PathBuf>> {
    let split = load_split(ctx)?;
    let scenes = load_scenes(ctx, &split.train)?;
    let dir = ctx.dir("walks")?;
    let wcfg = ctx.cfg.walk_config();
    let mut paths = Vec::new();
    for (i, id) in split.train.iter().enumerate() {
        let scene = &scenes[id];
        let seed = panonav_core::rng::subseed(ctx.cfg.seed, "walk-set", i as u64);
        let walk = random_walk(scene, &wcfg, seed)?;
        let obs: Vec<Observation> = walk.into_iter().map(|(o, _)| o).collect();
        let path = dir.join(format!("{id}.bin"));
        save_walk(&path, &obs)?;
        paths.push(path);
    }
    ctx.write_resolved(&dir, "collect-walks")?;
    log::info!("wrote {} walk archives", paths.len());
    Ok(paths)
}

pub fn load_walks(ctx: &Ctx, ids: &[String]) -> Result<Vec<Vec<Observation>>> {
    let dir = ctx.out.join("walks");
    ids.iter()
        .map(|id| {
            load_walk(&dir.join(format!("{id}.bin")))
                .with_context(|| format!("loading walk for scene {id}; run collect-walks"))
                .map_err(Into::into)
        })
        .collect()
}

#[derive(Serialize, Deserialize)]
pub struct ReachRunInfo {
    pub arch: panonav_core::reach::ReachArch,
    pub code_version: String,
}

/// Train the reachability network on the collected walks.
pub fn cmd_train_reach(ctx: &Ctx) -> Result<PathBuf> {
    let split = load_split(ctx)?;
    let walks = load_walks(ctx, &split.train)?;
    let dir = ctx.dir("reach")?;

    let walk_meta: Vec<(String, usize)> = split
        .train
        .iter()
        .zip(walks.iter())
        .map(|(id, w)| (id.clone(), w.len()))
        .collect();
    let ds = build_pair_dataset(
        &walk_meta,
        ctx.cfg.reach.pos_per_walk,
        ctx.cfg.reach.neg_per_walk,
        ctx.cfg.reach.k,
        ctx.cfg.reach.val_fraction,
        ctx.cfg.seed,
    )?;
    save_pair_index(&dir.join("pairs.jsonl"), &ds)?;

    let arch = ctx.cfg.reach_arch()?;
    let mut net: ReachabilityNet<f32> = ReachabilityNet::init(arch, ctx.cfg.seed);
    let stats = train_reachability(
        &mut net,
        &walks,
        &ds,
        &ctx.cfg.reach_train_config(),
        &ctx.cfg.augment,
        ctx.cfg.seed,
    )?;
    write_accuracy_csv(&dir.join("accuracy.csv"), &stats)?;
    let ckpt = dir.join("reach.ckpt");
    net.store.save(&ckpt)?;
    std::fs::write(
        dir.join("run.json"),
        serde_json::to_string_pretty(&ReachRunInfo {
            arch,
            code_version: CODE_VERSION.into(),
        })?,
    )?;
    ctx.write_resolved(&dir, "train-reach")?;
    if let Some(last) = stats.last() {
        log::info!(
            "reachability trained: val acc {:.4} (train {:.4})",
            last.val_acc,
            last.train_acc
        );
    }
    Ok(ckpt)
}

pub fn load_reach(ctx: &Ctx) -> Result<ReachabilityNet<f32>> {
    let dir = ctx.out.join("reach");
    let info: ReachRunInfo =
        serde_json::from_str(&std::fs::read_to_string(dir.join("run.json")).with_context(
            || "reach/run.json missing; run train-reach first",
        )?)?;
    let store = panonav_core::nn::ParamStore::load(&dir.join("reach.ckpt"))?;
    Ok(ReachabilityNet {
        store,
        arch: info.arch,
    })
}

#[derive(Serialize, Deserialize)]
pub struct TauReport {
    /// (tau, mean insertions per 500 steps, mean final buffer fill).
    pub sweep: Vec<(f64, f64, f64)>,
    pub recommended: f64,
    pub target_rate: (f64, f64),
}

/// Sweep the reachability threshold on held-out-scene walks and report the
/// insertion rate per 500 steps; recommends the tau whose rate is closest to
/// the middle of the 8-15 target band.
pub fn cmd_calibrate_tau(ctx: &Ctx) -> Result<TauReport> {
    let split = load_split(ctx)?;
    let scenes = load_scenes(ctx, &split.test)?;
    let reach = load_reach(ctx)?;
    let dir = ctx.dir("tau")?;

    let mut wcfg = ctx.cfg.walk_config();
    wcfg.steps = 500;
    let mut embeddings_per_walk = Vec::new();
    for (i, id) in split.test.iter().enumerate() {
        let seed = panonav_core::rng::subseed(ctx.cfg.seed, "tau-walk", i as u64);
        let walk = random_walk(&scenes[id], &wcfg, seed)?;
        let embeddings: Vec<_> = walk
            .iter()
            .map(|(o, _)| reach.embed(o))
            .collect::<panonav_core::Result<_>>()?;
        embeddings_per_walk.push(embeddings);
    }

    let mut sweep = Vec::new();
    let mut tau = 0.05;
    while tau < 0.975 {
        let mut insertions = 0.0;
        let mut fill = 0.0;
        for embeddings in &embeddings_per_walk {
            let mut buf: MemoryBuffer<f32> =
                MemoryBuffer::episodic(ctx.cfg.memory.capacity, tau);
            let mut count = 0usize;
            for (s, e) in embeddings.iter().enumerate() {
                let (ins, _) = buf.maybe_insert_embedding(&reach, e, s as u64)?;
                count += usize::from(ins);
            }
            insertions += count as f64;
            fill += buf.len() as f64;
        }
        let n = embeddings_per_walk.len() as f64;
        sweep.push((tau, insertions / n, fill / n));
        tau += 0.05;
    }
    let target = (8.0, 15.0);
    let mid = (target.0 + target.1) / 2.0;
    let recommended = sweep
        .iter()
        .min_by(|a, b| {
            (a.1 - mid)
                .abs()
                .partial_cmp(&(b.1 - mid).abs())
                .unwrap_or(std::cmp::Ordering::Equal)
        })
        .map(|&(t, _, _)| t)
        .unwrap_or(0.5);
    let report = TauReport {
        sweep,
        recommended,
        target_rate: target,
    };
    std::fs::write(
        dir.join("tau_report.json"),
        serde_json::to_string_pretty(&report)?,
    )?;
    ctx.write_resolved(&dir, "calibrate-tau")?;
    log::info!("recommended tau: {recommended:.2}");
    Ok(report)
}

#[derive(Serialize, Deserialize)]
pub struct EpisodeManifest {
    pub train: usize,
    pub test: usize,
    pub bands: Vec<String>,
    pub unsatisfiable: Vec<panonav_core::sim::UnsatisfiableBand>,
}

/// Generate train/test episode datasets over the scene split.
pub fn cmd_gen_episodes(ctx: &Ctx) -> Result<EpisodeManifest> {
    let split = load_split(ctx)?;
    let bands = ctx.cfg.bands()?;
    let dir = ctx.dir("episodes")?;

    let train_scenes: Vec<Scene> = load_scenes(ctx, &split.train)?
        .values()
        .map(|s| (**s).clone())
        .collect();
    let test_scenes: Vec<Scene> = load_scenes(ctx, &split.test)?
        .values()
        .map(|s| (**s).clone())
        .collect();

    let (train_eps, mut unsat) = generate_episode_dataset(
        &train_scenes,
        ctx.cfg.episodes.train_per_difficulty,
        &bands,
        panonav_core::rng::subseed(ctx.cfg.seed, "episodes-train", 0),
    );
    let (test_eps, unsat_test) = generate_episode_dataset(
        &test_scenes,
        ctx.cfg.episodes.test_per_difficulty,
        &bands,
        panonav_core::rng::subseed(ctx.cfg.seed, "episodes-test", 0),
    );
    unsat.extend(unsat_test);

    save_episodes(&dir.join("train.jsonl"), &train_eps)?;
    save_episodes(&dir.join("test.jsonl"), &test_eps)?;
    let manifest = EpisodeManifest {
        train: train_eps.len(),
        test: test_eps.len(),
        bands: bands.iter().map(|b| b.as_str().to_string()).collect(),
        unsatisfiable: unsat,
    };
    std::fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    ctx.write_resolved(&dir, "gen-episodes")?;
    log::info!(
        "episodes: {} train, {} test ({} unsatisfiable bands)",
        manifest.train,
        manifest.test,
        manifest.unsatisfiable.len()
    );
    Ok(manifest)
}

/// Ablation arms from the study: each is a named override set.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Arm {
    Baseline,
    Augment,
    Memory,
    LtMemory,
}

impl Arm {
    pub fn parse(s: &str) -> Result<Arm> {
        match s {
            "baseline" => Ok(Arm::Baseline),
            "augment" => Ok(Arm::Augment),
            "memory" => Ok(Arm::Memory),
            "lt_memory" => Ok(Arm::LtMemory),
            other => bail!("unknown arm {other} (expected baseline|augment|memory|lt_memory)"),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Arm::Baseline => "baseline",
            Arm::Augment => "augment",
            Arm::Memory => "memory",
            Arm::LtMemory => "lt_memory",
        }
    }

    /// Apply this arm's toggles to a config copy.
    pub fn apply(self, cfg: &mut ExperimentConfig) {
        match self {
            Arm::Baseline => {
                cfg.augment.enabled = false;
                cfg.policy.use_memory = false;
                cfg.policy.use_long_term = false;
            }
            Arm::Augment => {
                cfg.augment.enabled = true;
                cfg.policy.use_memory = false;
                cfg.policy.use_long_term = false;
            }
            Arm::Memory => {
                cfg.augment.enabled = true;
                cfg.policy.use_memory = true;
                cfg.policy.use_long_term = false;
            }
            Arm::LtMemory => {
                cfg.augment.enabled = true;
                cfg.policy.use_memory = true;
                cfg.policy.use_long_term = true;
            }
        }
    }
}

#[derive(Serialize, Deserialize)]
pub struct PolicyRunInfo {
    pub arch: PolicyArch,
    pub arm: String,
    pub seed: u64,
    pub use_long_term: bool,
    pub tau: f64,
    pub dataset: String,
    pub code_version: String,
}

fn trainer_config(cfg: &ExperimentConfig) -> TrainerConfig {
    TrainerConfig {
        ppo: PpoConfig {
            clip: cfg.ppo.clip,
            entropy_coef: cfg.ppo.entropy_coef,
            epochs: cfg.ppo.epochs,
            lr: cfg.ppo.lr,
            gamma: cfg.ppo.gamma,
            lambda: cfg.ppo.lambda,
            value_coef: cfg.ppo.value_coef,
            grad_clip: cfg.ppo.grad_clip,
            workers: cfg.ppo.workers,
            segment: cfg.ppo.segment,
            updates: cfg.ppo.updates,
            ckpt_every: cfg.ppo.ckpt_every,
            eval_every: cfg.ppo.eval_every,
            eval_episodes_per_difficulty: cfg.ppo.eval_episodes_per_difficulty,
        },
        step: cfg.step_config(),
        augment: cfg.augment,
        use_memory: cfg.policy.use_memory,
        use_long_term: cfg.policy.use_long_term,
        memory_capacity: cfg.memory.capacity,
        long_term_capacity: cfg.memory.long_term_capacity,
        tau: cfg.memory.tau,
        ttl_episodes: cfg.memory.ttl_episodes,
    }
}

pub fn policy_run_dir(out: &Path, arm: Arm, seed: u64) -> PathBuf {
    out.join(format!("policy_{}_seed{}", arm.as_str(), seed))
}

/// Train one policy arm with PPO.
pub fn cmd_train_policy(ctx: &Ctx, arm: Arm) -> Result<PathBuf> {
    let mut cfg = ctx.cfg.clone();
    arm.apply(&mut cfg);
    let arm_ctx = Ctx::new(cfg.clone(), ctx.out.clone());

    let split = load_split(&arm_ctx)?;
    let train_scenes = load_scenes(&arm_ctx, &split.train)?;
    let test_scenes = load_scenes(&arm_ctx, &split.test)?;
    let train_episodes = load_episodes(&arm_ctx.out.join("episodes/train.jsonl"))
        .with_context(|| "episodes/train.jsonl missing; run gen-episodes")?;
    let test_episodes = load_episodes(&arm_ctx.out.join("episodes/test.jsonl"))?;

    let reach = if cfg.policy.use_memory {
        Some(load_reach(&arm_ctx)?)
    } else {
        None
    };

    let dir = policy_run_dir(&arm_ctx.out, arm, cfg.seed);
    std::fs::create_dir_all(&dir)?;
    let arch = cfg.policy_arch();
    let mut policy: PolicyNet<f32> = PolicyNet::init(arch, cfg.seed);
    let inputs = TrainInputs {
        train_scenes: train_scenes.clone(),
        test_scenes: test_scenes.clone(),
        train_episodes,
        test_episodes,
    };
    std::fs::write(
        dir.join("run.json"),
        serde_json::to_string_pretty(&PolicyRunInfo {
            arch,
            arm: arm.as_str().into(),
            seed: cfg.seed,
            use_long_term: cfg.policy.use_long_term,
            tau: cfg.memory.tau,
            dataset: "episodes/test.jsonl".into(),
            code_version: CODE_VERSION.into(),
        })?,
    )?;
    arm_ctx.write_resolved(&dir, &format!("train-policy --arm {}", arm.as_str()))?;
    train(
        &mut policy,
        reach.as_ref(),
        &inputs,
        &trainer_config(&cfg),
        &dir,
        cfg.seed,
    )?;
    Ok(dir)
}

/// Evaluate a trained policy run directory on an episode dataset.
pub fn cmd_eval(
    ctx: &Ctx,
    run_dir: &Path,
    checkpoint: &str,
    dataset: &Path,
    dump_trajectories: bool,
) -> Result<EvalReport> {
    let info: PolicyRunInfo = serde_json::from_str(
        &std::fs::read_to_string(run_dir.join("run.json"))
            .with_context(|| format!("{}/run.json missing", run_dir.display()))?,
    )?;
    let store = panonav_core::nn::ParamStore::load(&run_dir.join(checkpoint))?;
    let policy = PolicyNet {
        store,
        arch: info.arch,
    };
    let reach = if info.arch.use_memory {
        Some(load_reach(ctx)?)
    } else {
        None
    };
    let episodes = load_episodes(dataset)?;
    let split = load_split(ctx)?;
    let all_ids: Vec<String> = split.train.iter().chain(split.test.iter()).cloned().collect();
    let needed: Vec<String> = all_ids
        .into_iter()
        .filter(|id| episodes.iter().any(|e| &e.scene_id == id))
        .collect();
    let scenes = load_scenes(ctx, &needed)?;

    let eval_cfg = EvalConfig {
        step: ctx.cfg.step_config(),
        use_memory: info.arch.use_memory,
        use_long_term: info.use_long_term,
        memory_capacity: ctx.cfg.memory.capacity,
        long_term_capacity: ctx.cfg.memory.long_term_capacity,
        tau: info.tau,
        ttl_episodes: ctx.cfg.memory.ttl_episodes,
        collect_trajectories: dump_trajectories,
        collect_insertion_log: false,
    };
    let outcome = eval::evaluate(&policy, reach.as_ref(), &scenes, &episodes, &eval_cfg)?;
    let report = eval::report(&info.arm, info.seed, &outcome.results)?;

    let eval_dir = run_dir.join(format!(
        "eval_{}",
        dataset.file_stem().and_then(|s| s.to_str()).unwrap_or("dataset")
    ));
    std::fs::create_dir_all(&eval_dir)?;
    std::fs::write(
        eval_dir.join("report.json"),
        serde_json::to_string_pretty(&report)?,
    )?;
    if dump_trajectories {
        eval::write_trajectories(&eval_dir.join("trajectories.jsonl"), &outcome.trajectories)?;
    }
    ctx.write_resolved(&eval_dir, "eval")?;
    log::info!(
        "eval {}: overall spl {:.3}",
        run_dir.display(),
        report.overall_spl()
    );
    Ok(report)
}

/// Aggregate evaluations of several arms and seeds into a comparison table.
pub fn cmd_ablate(ctx: &Ctx, arms: &[Arm], seeds: &[u64], dataset: &Path) -> Result<PathBuf> {
    let mut runs: BTreeMap<String, Vec<(EvalReport, String)>> = BTreeMap::new();
    let dataset_tag = dataset.to_string_lossy().to_string();
    for &arm in arms {
        for &seed in seeds {
            let run_dir = policy_run_dir(&ctx.out, arm, seed);
            if !run_dir.join("run.json").exists() {
                bail!(
                    "missing trained run {} (train-policy --arm {} with seed {seed} first)",
                    run_dir.display(),
                    arm.as_str()
                );
            }
            let report = cmd_eval(ctx, &run_dir, "final.ckpt", dataset, false)?;
            runs.entry(arm.as_str().to_string())
                .or_default()
                .push((report, dataset_tag.clone()));
        }
    }
    let report = eval::ablation_report(&runs)?;
    let dir = ctx.dir("ablation")?;
    std::fs::write(
        dir.join("ablation.json"),
        serde_json::to_string_pretty(&report)?,
    )?;
    eval::write_ablation_csv(&dir.join("ablation.csv"), &report)?;
    ctx.write_resolved(&dir, "ablate")?;
    Ok(dir)
}

/// Helper for tests: an oracle agent that descends the geodesic field.
pub fn oracle_episode(
    scene: Arc<Scene>,
    spec: &EpisodeSpec,
    step_cfg: panonav_core::sim::StepConfig,
) -> Result<panonav_core::eval::EpisodeResult> {
    use panonav_core::sim::{Action, NavEpisode};
    let mut env = NavEpisode::start(scene, spec.clone(), step_cfg)?;
    while !env.done {
        let here = env.field.distance(env.state.pose.x, env.state.pose.y);
        if here <= step_cfg.success_radius * 0.8 {
            env.step(Action::Stop)?;
            break;
        }
        // probe one forward step at each heading reachable by one turn
        let probe = |heading: f64| {
            let dx = heading.cos();
            let dy = heading.sin();
            let (px, py) = (
                env.state.pose.x + dx * step_cfg.forward_step,
                env.state.pose.y + dy * step_cfg.forward_step,
            );
            if env.scene.in_free(px, py) {
                env.field.distance(px, py)
            } else {
                f64::INFINITY
            }
        };
        let fwd = probe(env.state.pose.heading);
        let left = probe(env.state.pose.heading + step_cfg.turn_radians);
        let right = probe(env.state.pose.heading - step_cfg.turn_radians);
        let action = if fwd <= left && fwd <= right && fwd < here {
            Action::MoveForward
        } else if left <= right {
            Action::TurnLeft
        } else {
            Action::TurnRight
        };
        env.step(action)?;
    }
    Ok(panonav_core::eval::EpisodeResult {
        spec: spec.clone(),
        success: env.success,
        path_length: env.path_length,
        shortest_path: spec.geodesic,
        steps: env.state.step_count,
    })
}

/// Quick smoke check that a difficulty set matches requested bands.
pub fn episodes_by_band(episodes: &[EpisodeSpec]) -> BTreeMap<Difficulty, usize> {
    let mut counts = BTreeMap::new();
    for e in episodes {
        *counts.entry(e.difficulty).or_insert(0) += 1;
    }
    counts
}
