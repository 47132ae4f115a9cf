//! Random-walk collection for reachability training, and the binary walk
//! archive: header (T, v, C, W) as little-endian u32 followed by the
//! observations as little-endian f32.

use rand::Rng;

use super::env::{apply_motion, Action, ObsSpec};
use super::raycast::{render_observation, Observation};
use super::scene::{Pose, Scene};
use crate::error::{Error, Result};
use crate::rng::stream;

#[derive(Clone, Copy, Debug)]
pub struct WalkConfig {
    pub steps: usize,
    pub forward_step: f64,
    pub turn_radians: f64,
    pub collision_margin: f64,
    pub obs: ObsSpec,
}

impl Default for WalkConfig {
    fn default() -> Self {
        WalkConfig {
            steps: 2000,
            forward_step: 1.0,
            turn_radians: 30f64.to_radians(),
            collision_margin: 0.01,
            obs: ObsSpec::default(),
        }
    }
}

/// Uniform random actions over {forward, left, right}; returns exactly
/// `steps` observations. Poses are diagnostics only and never fed to
/// learning.
pub fn random_walk(
    scene: &Scene,
    cfg: &WalkConfig,
    seed: u64,
) -> Result<Vec<(Observation, Pose)>> {
    if cfg.steps == 0 {
        return Err(Error::Invalid("walk length must be at least 1".into()));
    }
    let mut rng = stream(seed, "walk", 0);
    let (x, y) = scene.random_free_point(&mut rng, 0.1);
    let heading = rng.gen_range(0.0..std::f64::consts::TAU);
    let mut pose = Pose::new(x, y, heading);
    let mut out = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        let obs = render_observation(scene, pose, cfg.obs.views, cfg.obs.rays, cfg.obs.channels)?;
        out.push((obs, pose));
        let action = Action::WITHOUT_STOP[rng.gen_range(0..3)];
        let (next, _, _) = apply_motion(
            scene,
            pose,
            action,
            cfg.forward_step,
            cfg.turn_radians,
            cfg.collision_margin,
        );
        pose = next;
    }
    Ok(out)
}

pub fn save_walk(path: &std::path::Path, observations: &[Observation]) -> Result<()> {
    if observations.is_empty() {
        return Err(Error::Invalid("cannot save an empty walk".into()));
    }
    let (v, c, w) = (
        observations[0].views,
        observations[0].channels,
        observations[0].rays,
    );
    let mut bytes =
        Vec::with_capacity(16 + observations.len() * v * c * w * std::mem::size_of::<f32>());
    for header in [observations.len() as u32, v as u32, c as u32, w as u32] {
        bytes.extend_from_slice(&header.to_le_bytes());
    }
    for obs in observations {
        debug_assert_eq!((obs.views, obs.channels, obs.rays), (v, c, w));
        for &value in &obs.data {
            bytes.extend_from_slice(&value.to_le_bytes());
        }
    }
    std::fs::write(path, bytes)?;
    Ok(())
}

pub fn load_walk(path: &std::path::Path) -> Result<Vec<Observation>> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < 16 {
        return Err(Error::Invalid("walk archive too short".into()));
    }
    let word = |i: usize| u32::from_le_bytes([bytes[4 * i], bytes[4 * i + 1], bytes[4 * i + 2], bytes[4 * i + 3]]);
    let (t, v, c, w) = (word(0) as usize, word(1) as usize, word(2) as usize, word(3) as usize);
    let expect = 16 + t * v * c * w * 4;
    if bytes.len() != expect {
        return Err(Error::Invalid(format!(
            "walk archive is {} bytes, expected {expect}",
            bytes.len()
        )));
    }
    let mut offset = 16;
    let mut out = Vec::with_capacity(t);
    for _ in 0..t {
        let n = v * c * w;
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(f32::from_le_bytes([
                bytes[offset],
                bytes[offset + 1],
                bytes[offset + 2],
                bytes[offset + 3],
            ]));
            offset += 4;
        }
        out.push(Observation {
            views: v,
            channels: c,
            rays: w,
            data,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::scene::{generate_scene, SceneParams};

    #[test]
    fn walk_has_exact_length_and_is_deterministic() {
        let scene = generate_scene(3, &SceneParams::default()).unwrap();
        let cfg = WalkConfig {
            steps: 50,
            ..WalkConfig::default()
        };
        let a = random_walk(&scene, &cfg, 4).unwrap();
        let b = random_walk(&scene, &cfg, 4).unwrap();
        assert_eq!(a.len(), 50);
        for ((oa, pa), (ob, pb)) in a.iter().zip(b.iter()) {
            assert_eq!(oa.data, ob.data);
            assert_eq!(pa, pb);
        }
    }

    #[test]
    fn single_step_walk_observes_the_start_pose() {
        let scene = generate_scene(3, &SceneParams::default()).unwrap();
        let cfg = WalkConfig {
            steps: 1,
            ..WalkConfig::default()
        };
        let walk = random_walk(&scene, &cfg, 4).unwrap();
        let (obs, pose) = &walk[0];
        let direct =
            render_observation(&scene, *pose, cfg.obs.views, cfg.obs.rays, cfg.obs.channels)
                .unwrap();
        assert_eq!(obs.data, direct.data);
    }

    #[test]
    fn archive_round_trip_is_exact() {
        let scene = generate_scene(5, &SceneParams::default()).unwrap();
        let cfg = WalkConfig {
            steps: 20,
            ..WalkConfig::default()
        };
        let walk = random_walk(&scene, &cfg, 6).unwrap();
        let obs: Vec<Observation> = walk.into_iter().map(|(o, _)| o).collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("walk.bin");
        save_walk(&path, &obs).unwrap();
        let back = load_walk(&path).unwrap();
        assert_eq!(obs.len(), back.len());
        for (a, b) in obs.iter().zip(back.iter()) {
            assert_eq!(a.data, b.data);
            assert_eq!((a.views, a.channels, a.rays), (b.views, b.channels, b.rays));
        }
        // header fields
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(u32::from_le_bytes(bytes[0..4].try_into().unwrap()), 20);
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 4);
    }
}
