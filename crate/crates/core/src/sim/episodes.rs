//! Episode dataset generation: rejection sampling of start/goal pairs into
//! geodesic-distance difficulty bands, and the JSON-lines dataset format.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::geodesic::GeodesicField;
use super::scene::{Pose, Scene};
use crate::error::Result;
use crate::rng::stream;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Difficulty {
    Easy,
    Medium,
    Hard,
    Extra,
}

impl Difficulty {
    pub const ALL: [Difficulty; 4] = [
        Difficulty::Easy,
        Difficulty::Medium,
        Difficulty::Hard,
        Difficulty::Extra,
    ];

    /// Geodesic band [lo, hi); `extra` is closed at 15.
    pub fn band(self) -> (f64, f64) {
        match self {
            Difficulty::Easy => (1.5, 3.0),
            Difficulty::Medium => (3.0, 5.0),
            Difficulty::Hard => (5.0, 10.0),
            Difficulty::Extra => (10.0, 15.0),
        }
    }

    pub fn label(geodesic: f64) -> Option<Difficulty> {
        match geodesic {
            g if (1.5..3.0).contains(&g) => Some(Difficulty::Easy),
            g if (3.0..5.0).contains(&g) => Some(Difficulty::Medium),
            g if (5.0..10.0).contains(&g) => Some(Difficulty::Hard),
            g if (10.0..=15.0).contains(&g) => Some(Difficulty::Extra),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Difficulty::Easy => "easy",
            Difficulty::Medium => "medium",
            Difficulty::Hard => "hard",
            Difficulty::Extra => "extra",
        }
    }
}

impl std::str::FromStr for Difficulty {
    type Err = crate::error::Error;
    fn from_str(s: &str) -> Result<Difficulty> {
        match s {
            "easy" => Ok(Difficulty::Easy),
            "medium" => Ok(Difficulty::Medium),
            "hard" => Ok(Difficulty::Hard),
            "extra" => Ok(Difficulty::Extra),
            other => Err(crate::error::Error::Config(format!(
                "unknown difficulty {other}"
            ))),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpisodeSpec {
    pub scene_id: String,
    pub start: Pose,
    pub goal: (f64, f64),
    pub difficulty: Difficulty,
    pub geodesic: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct UnsatisfiableBand {
    pub scene_id: String,
    pub difficulty: Difficulty,
    pub produced: usize,
    pub requested: usize,
}

/// Rejection-sample start/goal pairs until each scene has `per_difficulty`
/// specs per requested band. Bands a scene cannot satisfy within the retry
/// budget are reported; the rest of the dataset is still emitted.
pub fn generate_episode_dataset(
    scenes: &[Scene],
    per_difficulty: usize,
    bands: &[Difficulty],
    seed: u64,
) -> (Vec<EpisodeSpec>, Vec<UnsatisfiableBand>) {
    let results: Vec<(Vec<EpisodeSpec>, Vec<UnsatisfiableBand>)> = scenes
        .par_iter()
        .enumerate()
        .map(|(i, scene)| sample_scene(scene, per_difficulty, bands, seed, i as u64))
        .collect();
    let mut specs = Vec::new();
    let mut unsat = Vec::new();
    for (s, u) in results {
        specs.extend(s);
        unsat.extend(u);
    }
    (specs, unsat)
}

fn sample_scene(
    scene: &Scene,
    per_difficulty: usize,
    bands: &[Difficulty],
    seed: u64,
    scene_index: u64,
) -> (Vec<EpisodeSpec>, Vec<UnsatisfiableBand>) {
    let mut rng = stream(seed, "episodes", scene_index);
    let mut counts: std::collections::HashMap<Difficulty, usize> =
        bands.iter().map(|&b| (b, 0)).collect();
    let mut specs = Vec::new();
    let goal_budget = 40 + 20 * bands.len() * per_difficulty / 25;
    let starts_per_goal = 150;

    for _ in 0..goal_budget {
        if counts.iter().all(|(_, &c)| c >= per_difficulty) {
            break;
        }
        let goal = scene.random_free_point(&mut rng, 0.05);
        let field = match GeodesicField::build(scene, goal, 0.1) {
            Ok(f) => f,
            Err(_) => continue,
        };
        for _ in 0..starts_per_goal {
            let start = scene.random_free_point(&mut rng, 0.05);
            let geo = field.distance(start.0, start.1);
            if !geo.is_finite() {
                continue;
            }
            let Some(diff) = Difficulty::label(geo) else {
                continue;
            };
            let Some(count) = counts.get_mut(&diff) else {
                continue;
            };
            if *count >= per_difficulty {
                continue;
            }
            *count += 1;
            let heading = rng.gen_range(0.0..std::f64::consts::TAU);
            specs.push(EpisodeSpec {
                scene_id: scene.id.clone(),
                start: Pose::new(start.0, start.1, heading),
                goal,
                difficulty: diff,
                geodesic: geo,
            });
        }
    }

    let unsat = bands
        .iter()
        .filter(|&&b| counts[&b] < per_difficulty)
        .map(|&b| UnsatisfiableBand {
            scene_id: scene.id.clone(),
            difficulty: b,
            produced: counts[&b],
            requested: per_difficulty,
        })
        .collect();
    (specs, unsat)
}

pub fn save_episodes(path: &std::path::Path, episodes: &[EpisodeSpec]) -> Result<()> {
    let mut out = String::new();
    for e in episodes {
        out.push_str(&serde_json::to_string(e)?);
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn load_episodes(path: &std::path::Path) -> Result<Vec<EpisodeSpec>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}
