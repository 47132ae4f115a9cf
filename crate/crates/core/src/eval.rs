//! Episode evaluation: success rate and SPL per difficulty split, greedy
//! policy rollouts with memory maintenance, trajectory dumps, and the
//! multi-arm ablation report.

use std::collections::BTreeMap;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::memory::{attention_view, InsertionRecord, MemoryBuffer};
use crate::policy::{ActMode, MemoryAttn, PolicyNet, PolicyState};
use crate::reach::ReachabilityNet;
use crate::rng::stream;
use crate::sim::{Difficulty, EpisodeSpec, NavEpisode, Scene, StepConfig};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub spec: EpisodeSpec,
    pub success: bool,
    pub path_length: f64,
    pub shortest_path: f64,
    pub steps: u32,
}

/// Success weighted by inverse path length:
/// `(1/N) * sum S_i * l_i / max(p_i, l_i)`.
pub fn spl(results: &[EpisodeResult]) -> Result<f64> {
    if results.is_empty() {
        return Err(Error::Invalid("SPL of an empty result set".into()));
    }
    let total: f64 = results
        .iter()
        .map(|r| {
            if r.success {
                r.shortest_path / r.path_length.max(r.shortest_path)
            } else {
                0.0
            }
        })
        .sum();
    Ok(total / results.len() as f64)
}

pub fn success_rate(results: &[EpisodeResult]) -> f64 {
    if results.is_empty() {
        return 0.0;
    }
    results.iter().filter(|r| r.success).count() as f64 / results.len() as f64
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct DifficultyReport {
    pub success: f64,
    pub spl: f64,
    pub n: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub arm: String,
    pub seed: u64,
    /// Keyed by difficulty name plus "overall".
    pub difficulty: BTreeMap<String, DifficultyReport>,
}

impl EvalReport {
    pub fn overall_spl(&self) -> f64 {
        self.difficulty.get("overall").map_or(0.0, |d| d.spl)
    }

    pub fn spl_of(&self, difficulty: Difficulty) -> Option<f64> {
        self.difficulty.get(difficulty.as_str()).map(|d| d.spl)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    pub episode: usize,
    pub step: u32,
    pub x: f64,
    pub y: f64,
    pub heading: f64,
    pub action: usize,
    pub inserted_memory: bool,
}

#[derive(Clone, Debug)]
pub struct EvalConfig {
    pub step: StepConfig,
    pub use_memory: bool,
    pub use_long_term: bool,
    pub memory_capacity: usize,
    pub long_term_capacity: usize,
    pub tau: f64,
    pub ttl_episodes: u64,
    pub collect_trajectories: bool,
    pub collect_insertion_log: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            step: StepConfig::default(),
            use_memory: true,
            use_long_term: false,
            memory_capacity: 20,
            long_term_capacity: 60,
            tau: 0.5,
            ttl_episodes: 100,
            collect_trajectories: false,
            collect_insertion_log: false,
        }
    }
}

pub struct EvalOutcome {
    pub results: Vec<EpisodeResult>,
    pub trajectories: Vec<TrajectoryPoint>,
    pub insertion_logs: Vec<Vec<InsertionRecord>>,
}

/// Run one episode greedily; memory buffers are provided by the caller so
/// long-term state can persist across episodes in one scene.
#[allow(clippy::too_many_arguments)]
pub fn run_episode(
    policy: &PolicyNet<f32>,
    reach: Option<&ReachabilityNet<f32>>,
    scene: Arc<Scene>,
    spec: &EpisodeSpec,
    cfg: &EvalConfig,
    episodic: &mut MemoryBuffer<f32>,
    long_term: Option<&mut MemoryBuffer<f32>>,
    episode_index: usize,
    trajectories: Option<&mut Vec<TrajectoryPoint>>,
    insertion_log: Option<&mut Vec<InsertionRecord>>,
) -> Result<EpisodeResult> {
    let mut env = NavEpisode::start(scene, spec.clone(), cfg.step)?;
    let goal_obs = env.goal_observation()?;
    let mut state = PolicyState::reset(policy.arch.hidden);
    let mut rng = stream(0, "eval.greedy", episode_index as u64);
    let mut version = 0u64;
    let mut cache: Option<crate::policy::CachedKv> = None;
    let mut lt = long_term;
    let mut trajectories = trajectories;
    let mut insertion_log = insertion_log;

    while !env.done {
        let obs = env.observe()?;

        let memory = if cfg.use_memory {
            if cache.as_ref().is_none_or(|c| c.version != version) {
                let view =
                    attention_view(episodic, lt.as_deref(), policy.arch.embed_dim, version);
                cache = Some(policy.cache_memory(&view)?);
            }
            MemoryAttn::Cached(cache.as_ref().expect("cache just filled"))
        } else {
            MemoryAttn::Disabled
        };

        let out = policy.act(&obs, &goal_obs, &state, memory, &mut rng, ActMode::Greedy)?;
        let step_index = env.state.step_count;
        env.step(out.action)?;
        state = out.state;

        let mut inserted_any = false;
        if cfg.use_memory {
            if let Some(reach) = reach {
                let e = reach.embed(&obs)?;
                let (inserted, score) =
                    episodic.maybe_insert_embedding(reach, &e, u64::from(step_index))?;
                if let Some(records) = insertion_log.as_deref_mut() {
                    records.push(InsertionRecord {
                        step: u64::from(step_index),
                        score,
                        inserted,
                        buffer_size: episodic.len(),
                    });
                }
                inserted_any = inserted;
                // the long-term buffer gates independently on its own contents
                if let Some(lt) = lt.as_deref_mut() {
                    let (lt_inserted, _) =
                        lt.maybe_insert_embedding(reach, &e, u64::from(step_index))?;
                    inserted_any |= lt_inserted;
                }
                if inserted_any {
                    version += 1;
                }
            }
        }

        if let Some(points) = trajectories.as_deref_mut() {
            points.push(TrajectoryPoint {
                episode: episode_index,
                step: step_index,
                x: env.state.pose.x,
                y: env.state.pose.y,
                heading: env.state.pose.heading,
                action: out.action.index(),
                inserted_memory: inserted_any,
            });
        }
    }

    Ok(EpisodeResult {
        spec: spec.clone(),
        success: env.success,
        path_length: env.path_length,
        shortest_path: spec.geodesic,
        steps: env.state.step_count,
    })
}

/// Evaluate a policy on a dataset, grouped and parallelized by scene so
/// long-term memory sees episodes of one scene in dataset order.
pub fn evaluate(
    policy: &PolicyNet<f32>,
    reach: Option<&ReachabilityNet<f32>>,
    scenes: &BTreeMap<String, Arc<Scene>>,
    episodes: &[EpisodeSpec],
    cfg: &EvalConfig,
) -> Result<EvalOutcome> {
    if episodes.is_empty() {
        return Err(Error::Invalid("evaluate called with no episodes".into()));
    }
    // group by scene, preserving dataset order within each scene
    let mut by_scene: BTreeMap<&str, Vec<(usize, &EpisodeSpec)>> = BTreeMap::new();
    for (i, e) in episodes.iter().enumerate() {
        by_scene.entry(&e.scene_id).or_default().push((i, e));
    }

    let groups: Vec<(&str, Vec<(usize, &EpisodeSpec)>)> = by_scene.into_iter().collect();
    let outcomes: Vec<Result<(Vec<(usize, EpisodeResult)>, Vec<TrajectoryPoint>, Vec<Vec<InsertionRecord>>)>> = groups
        .par_iter()
        .map(|(scene_id, specs)| {
            let scene = scenes
                .get(*scene_id)
                .ok_or_else(|| Error::Invalid(format!("unknown scene {scene_id}")))?
                .clone();
            let mut episodic = MemoryBuffer::episodic(cfg.memory_capacity, cfg.tau);
            let mut long_term = cfg
                .use_long_term
                .then(|| MemoryBuffer::long_term(cfg.long_term_capacity, cfg.tau, cfg.ttl_episodes));
            let mut results = Vec::new();
            let mut trajectories = Vec::new();
            let mut logs = Vec::new();
            for (index, spec) in specs {
                episodic.reset_episodic()?;
                if let Some(lt) = &mut long_term {
                    lt.advance_episode(scene_id)?;
                }
                let mut log = Vec::new();
                let r = run_episode(
                    policy,
                    reach,
                    Arc::clone(&scene),
                    spec,
                    cfg,
                    &mut episodic,
                    long_term.as_mut(),
                    *index,
                    cfg.collect_trajectories.then_some(&mut trajectories),
                    cfg.collect_insertion_log.then_some(&mut log),
                )?;
                if cfg.collect_insertion_log {
                    logs.push(log);
                }
                results.push((*index, r));
            }
            Ok((results, trajectories, logs))
        })
        .collect();

    let mut indexed = Vec::with_capacity(episodes.len());
    let mut trajectories = Vec::new();
    let mut insertion_logs = Vec::new();
    for o in outcomes {
        let (r, t, l) = o?;
        indexed.extend(r);
        trajectories.extend(t);
        insertion_logs.extend(l);
    }
    indexed.sort_by_key(|(i, _)| *i);
    Ok(EvalOutcome {
        results: indexed.into_iter().map(|(_, r)| r).collect(),
        trajectories,
        insertion_logs,
    })
}

/// Aggregate results into per-difficulty success/SPL rows plus "overall".
pub fn report(arm: &str, seed: u64, results: &[EpisodeResult]) -> Result<EvalReport> {
    let mut difficulty = BTreeMap::new();
    for d in Difficulty::ALL {
        let subset: Vec<EpisodeResult> = results
            .iter()
            .filter(|r| r.spec.difficulty == d)
            .cloned()
            .collect();
        if subset.is_empty() {
            continue;
        }
        difficulty.insert(
            d.as_str().to_string(),
            DifficultyReport {
                success: success_rate(&subset),
                spl: spl(&subset)?,
                n: subset.len(),
            },
        );
    }
    difficulty.insert(
        "overall".to_string(),
        DifficultyReport {
            success: success_rate(results),
            spl: spl(results)?,
            n: results.len(),
        },
    );
    Ok(EvalReport {
        arm: arm.to_string(),
        seed,
        difficulty,
    })
}

pub fn write_trajectories(path: &std::path::Path, points: &[TrajectoryPoint]) -> Result<()> {
    let mut out = String::new();
    for p in points {
        out.push_str(&serde_json::to_string(p)?);
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Ablation report
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ArmSummary {
    pub arm: String,
    /// difficulty -> (mean, min, max) over seeds.
    pub spl: BTreeMap<String, (f64, f64, f64)>,
    pub success: BTreeMap<String, (f64, f64, f64)>,
    pub seeds: Vec<u64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationReport {
    pub arms: Vec<ArmSummary>,
    /// Dataset identity shared by every run.
    pub dataset: String,
}

/// Aggregate per-arm eval reports (one per seed) into mean and range rows.
/// Every run must have evaluated the same dataset.
pub fn ablation_report(
    runs: &BTreeMap<String, Vec<(EvalReport, String)>>,
) -> Result<AblationReport> {
    let mut dataset: Option<&str> = None;
    for reports in runs.values() {
        for (_, ds) in reports {
            match dataset {
                None => dataset = Some(ds),
                Some(d) if d == ds => {}
                Some(d) => {
                    return Err(Error::Invalid(format!(
                        "ablation arms evaluated different datasets: {d} vs {ds}"
                    )));
                }
            }
        }
    }
    let mut arms = Vec::new();
    for (arm, reports) in runs {
        let mut spl: BTreeMap<String, (f64, f64, f64)> = BTreeMap::new();
        let mut success: BTreeMap<String, (f64, f64, f64)> = BTreeMap::new();
        let keys: Vec<String> = reports
            .first()
            .map(|(r, _)| r.difficulty.keys().cloned().collect())
            .unwrap_or_default();
        for key in keys {
            let spls: Vec<f64> = reports
                .iter()
                .filter_map(|(r, _)| r.difficulty.get(&key).map(|d| d.spl))
                .collect();
            let succs: Vec<f64> = reports
                .iter()
                .filter_map(|(r, _)| r.difficulty.get(&key).map(|d| d.success))
                .collect();
            spl.insert(key.clone(), mean_min_max(&spls));
            success.insert(key.clone(), mean_min_max(&succs));
        }
        arms.push(ArmSummary {
            arm: arm.clone(),
            spl,
            success,
            seeds: reports.iter().map(|(r, _)| r.seed).collect(),
        });
    }
    Ok(AblationReport {
        arms,
        dataset: dataset.unwrap_or("").to_string(),
    })
}

fn mean_min_max(xs: &[f64]) -> (f64, f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0, 0.0);
    }
    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
    let min = xs.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    (mean, min, max)
}

pub fn write_ablation_csv(path: &std::path::Path, report: &AblationReport) -> Result<()> {
    let mut out = String::from("arm,difficulty,spl_mean,spl_min,spl_max,succ_mean,succ_min,succ_max\n");
    for arm in &report.arms {
        for (key, (m, lo, hi)) in &arm.spl {
            let (sm, slo, shi) = arm.success.get(key).copied().unwrap_or((0.0, 0.0, 0.0));
            out.push_str(&format!(
                "{},{},{m},{lo},{hi},{sm},{slo},{shi}\n",
                arm.arm, key
            ));
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}
