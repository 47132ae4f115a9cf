//! Agent kinematics, reward computation, and the episode runner.
//!
//! Movement is truncate-and-stop: MOVE_FORWARD advances along the heading
//! until the requested step or until the margin-inflated wall boundary,
//! whichever comes first. No wall sliding.

use serde::{Deserialize, Serialize};

use super::episodes::EpisodeSpec;
use super::geodesic::GeodesicField;
use super::raycast::{render_observation, Observation};
use super::scene::{Pose, Scene};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Action {
    MoveForward,
    TurnLeft,
    TurnRight,
    Stop,
}

impl Action {
    pub const ALL: [Action; 4] = [
        Action::MoveForward,
        Action::TurnLeft,
        Action::TurnRight,
        Action::Stop,
    ];
    /// Actions available to the random-walk policy (no STOP).
    pub const WITHOUT_STOP: [Action; 3] =
        [Action::MoveForward, Action::TurnLeft, Action::TurnRight];

    pub fn index(self) -> usize {
        match self {
            Action::MoveForward => 0,
            Action::TurnLeft => 1,
            Action::TurnRight => 2,
            Action::Stop => 3,
        }
    }

    pub fn from_index(i: usize) -> Option<Action> {
        Action::ALL.get(i).copied()
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct RewardConfig {
    pub shape: f64,
    pub slack: f64,
    pub success: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        RewardConfig {
            shape: 1.0,
            slack: -0.01,
            success: 2.5,
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct ObsSpec {
    pub views: usize,
    pub channels: usize,
    pub rays: usize,
}

impl Default for ObsSpec {
    fn default() -> Self {
        ObsSpec {
            views: 4,
            channels: 4,
            rays: 32,
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct StepConfig {
    pub forward_step: f64,
    pub turn_radians: f64,
    pub collision_margin: f64,
    pub success_radius: f64,
    pub max_steps: u32,
    pub reward: RewardConfig,
    pub obs: ObsSpec,
}

impl Default for StepConfig {
    fn default() -> Self {
        StepConfig {
            forward_step: 0.25,
            turn_radians: 10f64.to_radians(),
            collision_margin: 0.01,
            success_radius: 1.0,
            max_steps: 500,
            reward: RewardConfig::default(),
            obs: ObsSpec::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct AgentState {
    pub pose: Pose,
    pub step_count: u32,
}

#[derive(Clone, Debug)]
pub struct StepResult {
    pub observation: Observation,
    pub reward: f64,
    pub done: bool,
    pub success: bool,
    pub geodesic_to_goal: f64,
    pub collision: bool,
    /// Realized displacement of this step (path-length accounting).
    pub moved: f64,
}

/// Three-part reward: shaping (geodesic decrease), slack, success bonus.
pub fn reward_of(
    prev_geo: f64,
    new_geo: f64,
    stopped: bool,
    success: bool,
    cfg: &RewardConfig,
) -> f64 {
    let mut r = cfg.shape * (prev_geo - new_geo) + cfg.slack;
    if stopped && success {
        r += cfg.success;
    }
    r
}

fn normalize_heading(h: f64) -> f64 {
    let tau = std::f64::consts::TAU;
    let mut h = h % tau;
    if h < 0.0 {
        h += tau;
    }
    h
}

/// Maximum travel along (dx, dy) that keeps the point at least `margin`
/// away from every wall cell (walls treated as axis-inflated rectangles).
fn max_travel(scene: &Scene, x: f64, y: f64, dx: f64, dy: f64, want: f64, margin: f64) -> f64 {
    let (ex, ey) = (x + dx * want, y + dy * want);
    let pad = margin + scene.cell;
    let min_x = x.min(ex) - pad;
    let max_x = x.max(ex) + pad;
    let min_y = y.min(ey) - pad;
    let max_y = y.max(ey) + pad;
    let c0 = ((min_x / scene.cell).floor().max(0.0)) as usize;
    let c1 = ((max_x / scene.cell).ceil() as usize).min(scene.cols);
    let r0 = ((min_y / scene.cell).floor().max(0.0)) as usize;
    let r1 = ((max_y / scene.cell).ceil() as usize).min(scene.rows);

    let mut allowed = want;
    for r in r0..r1 {
        for c in c0..c1 {
            if !scene.is_wall(c, r) {
                continue;
            }
            let (bx0, by0) = (c as f64 * scene.cell - margin, r as f64 * scene.cell - margin);
            let (bx1, by1) = (bx0 + scene.cell + 2.0 * margin, by0 + scene.cell + 2.0 * margin);
            // slab test for segment (x,y) + t*(dx,dy), t in [0, allowed]
            let (tx0, tx1) = slab(x, dx, bx0, bx1);
            let (ty0, ty1) = slab(y, dy, by0, by1);
            let t_entry = tx0.max(ty0);
            let t_exit = tx1.min(ty1);
            if t_exit >= t_entry && t_exit >= 0.0 && t_entry < allowed {
                allowed = t_entry.max(0.0);
            }
        }
    }
    allowed
}

fn slab(origin: f64, dir: f64, lo: f64, hi: f64) -> (f64, f64) {
    if dir.abs() < 1e-15 {
        if origin >= lo && origin <= hi {
            (f64::NEG_INFINITY, f64::INFINITY)
        } else {
            (f64::INFINITY, f64::NEG_INFINITY)
        }
    } else {
        let a = (lo - origin) / dir;
        let b = (hi - origin) / dir;
        (a.min(b), a.max(b))
    }
}

/// Apply one movement action to a pose; returns (new pose, moved, collision).
pub fn apply_motion(
    scene: &Scene,
    pose: Pose,
    action: Action,
    forward: f64,
    turn: f64,
    margin: f64,
) -> (Pose, f64, bool) {
    match action {
        Action::MoveForward => {
            let (dx, dy) = (pose.heading.cos(), pose.heading.sin());
            let allowed = max_travel(scene, pose.x, pose.y, dx, dy, forward, margin);
            let collision = allowed < forward;
            (
                Pose::new(pose.x + dx * allowed, pose.y + dy * allowed, pose.heading),
                allowed,
                collision,
            )
        }
        Action::TurnLeft => (
            Pose::new(pose.x, pose.y, normalize_heading(pose.heading + turn)),
            0.0,
            false,
        ),
        Action::TurnRight => (
            Pose::new(pose.x, pose.y, normalize_heading(pose.heading - turn)),
            0.0,
            false,
        ),
        Action::Stop => (pose, 0.0, false),
    }
}

/// One environment step. The geodesic field must be built at the episode's
/// goal; success on STOP means geodesic distance within the success radius.
pub fn step(
    scene: &Scene,
    state: &AgentState,
    action: Action,
    goal_field: &GeodesicField,
    cfg: &StepConfig,
) -> Result<(AgentState, StepResult)> {
    let prev_geo = goal_field.distance(state.pose.x, state.pose.y);
    let (pose, moved, collision) = apply_motion(
        scene,
        state.pose,
        action,
        cfg.forward_step,
        cfg.turn_radians,
        cfg.collision_margin,
    );
    let next = AgentState {
        pose,
        step_count: state.step_count + 1,
    };
    let new_geo = goal_field.distance(pose.x, pose.y);
    let stopped = action == Action::Stop;
    let success = stopped && new_geo <= cfg.success_radius;
    let done = stopped || next.step_count >= cfg.max_steps;
    let reward = reward_of(prev_geo, new_geo, stopped, success, &cfg.reward);
    let observation = render_observation(scene, pose, cfg.obs.views, cfg.obs.rays, cfg.obs.channels)?;
    Ok((
        next,
        StepResult {
            observation,
            reward,
            done,
            success,
            geodesic_to_goal: new_geo,
            collision,
            moved,
        },
    ))
}

/// Owns one episode's mutable state: pose, step count, termination flags,
/// and path-length accounting. The scene and goal field are per-episode.
pub struct NavEpisode {
    pub scene: std::sync::Arc<Scene>,
    pub spec: EpisodeSpec,
    pub field: GeodesicField,
    pub cfg: StepConfig,
    pub state: AgentState,
    pub done: bool,
    pub success: bool,
    pub path_length: f64,
}

impl NavEpisode {
    pub fn start(scene: std::sync::Arc<Scene>, spec: EpisodeSpec, cfg: StepConfig) -> Result<Self> {
        let field = GeodesicField::build(&scene, spec.goal, 0.1)?;
        let state = AgentState {
            pose: Pose::new(spec.start.x, spec.start.y, spec.start.heading),
            step_count: 0,
        };
        if !scene.in_free(state.pose.x, state.pose.y) {
            return Err(Error::InvalidPose {
                x: state.pose.x,
                y: state.pose.y,
            });
        }
        Ok(NavEpisode {
            scene,
            spec,
            field,
            cfg,
            state,
            done: false,
            success: false,
            path_length: 0.0,
        })
    }

    pub fn observe(&self) -> Result<Observation> {
        render_observation(
            &self.scene,
            self.state.pose,
            self.cfg.obs.views,
            self.cfg.obs.rays,
            self.cfg.obs.channels,
        )
    }

    /// Goal observation rendered with heading 0; the goal encoder is
    /// rotation-invariant so the heading choice is immaterial.
    pub fn goal_observation(&self) -> Result<Observation> {
        render_observation(
            &self.scene,
            Pose::new(self.spec.goal.0, self.spec.goal.1, 0.0),
            self.cfg.obs.views,
            self.cfg.obs.rays,
            self.cfg.obs.channels,
        )
    }

    pub fn step(&mut self, action: Action) -> Result<StepResult> {
        if self.done {
            return Err(Error::EpisodeDone);
        }
        let (next, result) = step(&self.scene, &self.state, action, &self.field, &self.cfg)?;
        self.state = next;
        self.done = result.done;
        self.success = result.success;
        self.path_length += result.moved;
        Ok(result)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::episodes::Difficulty;
    use crate::sim::scene::{generate_scene, SceneParams};

    fn empty_room() -> Scene {
        generate_scene(
            0,
            &SceneParams {
                width: 10.0,
                height: 10.0,
                cell: 0.5,
                wall_density: 0.0,
                dividers: 0,
                max_retries: 2,
            },
        )
        .unwrap()
    }

    #[test]
    fn reward_formula_matches_spec_examples() {
        let cfg = RewardConfig::default();
        let r = reward_of(3.00, 2.75, false, false, &cfg);
        assert!((r - 0.24).abs() < 1e-12);
        let r = reward_of(2.0, 2.0, false, false, &cfg);
        assert!((r + 0.01).abs() < 1e-12);
        let r = reward_of(2.0, 0.5, true, true, &cfg);
        assert!((r - (1.5 - 0.01 + 2.5)).abs() < 1e-12);
    }

    #[test]
    fn turn_left_rotates_ten_degrees_without_moving() {
        let scene = empty_room();
        let field = GeodesicField::build(&scene, (8.0, 8.0), 0.1).unwrap();
        let cfg = StepConfig::default();
        let state = AgentState {
            pose: Pose::new(5.0, 5.0, 0.0),
            step_count: 0,
        };
        let (next, _) = step(&scene, &state, Action::TurnLeft, &field, &cfg).unwrap();
        assert!((next.pose.heading - 0.17453292519943295).abs() < 1e-12);
        assert_eq!(next.pose.x, 5.0);
        assert_eq!(next.pose.y, 5.0);
    }

    #[test]
    fn forward_into_nearby_wall_truncates_with_collision() {
        let scene = empty_room();
        let field = GeodesicField::build(&scene, (8.0, 8.0), 0.1).unwrap();
        let cfg = StepConfig::default();
        // wall face at x = 9.5; stand 0.10 before it
        let state = AgentState {
            pose: Pose::new(9.40, 5.0, 0.0),
            step_count: 0,
        };
        let (next, result) = step(&scene, &state, Action::MoveForward, &field, &cfg).unwrap();
        assert!(result.collision);
        assert!((result.moved - 0.09).abs() < 1e-9, "moved {}", result.moved);
        assert!((next.pose.x - 9.49).abs() < 1e-9);
    }

    #[test]
    fn stop_within_success_radius_succeeds() {
        let scene = empty_room();
        let field = GeodesicField::build(&scene, (5.0, 5.0), 0.1).unwrap();
        let cfg = StepConfig::default();
        let state = AgentState {
            pose: Pose::new(5.5, 5.0, 0.0),
            step_count: 0,
        };
        let (_, result) = step(&scene, &state, Action::Stop, &field, &cfg).unwrap();
        assert!(result.success && result.done);

        let far = AgentState {
            pose: Pose::new(8.0, 8.0, 0.0),
            step_count: 0,
        };
        let (_, result) = step(&scene, &far, Action::Stop, &field, &cfg).unwrap();
        assert!(!result.success && result.done);
    }

    #[test]
    fn max_steps_terminates_episode() {
        let scene = std::sync::Arc::new(empty_room());
        let spec = EpisodeSpec {
            scene_id: scene.id.clone(),
            start: Pose::new(3.0, 3.0, 0.0),
            goal: (7.0, 7.0),
            difficulty: Difficulty::Hard,
            geodesic: 5.6,
        };
        let cfg = StepConfig {
            max_steps: 5,
            ..StepConfig::default()
        };
        let mut ep = NavEpisode::start(scene, spec, cfg).unwrap();
        for _ in 0..5 {
            ep.step(Action::TurnLeft).unwrap();
        }
        assert!(ep.done && !ep.success);
        assert!(matches!(ep.step(Action::TurnLeft), Err(Error::EpisodeDone)));
    }

    #[test]
    fn collision_safety_holds_under_random_action_sequences() {
        let scene = generate_scene(31, &SceneParams::default()).unwrap();
        let mut rng = crate::rng::stream(10, "env-collision", 0);
        let margin = 0.01;
        for trial in 0..10 {
            let (x, y) = scene.random_free_point(&mut rng, 0.05);
            let mut pose = Pose::new(x, y, 0.0);
            for s in 0..200 {
                let a = Action::WITHOUT_STOP[rand::Rng::gen_range(&mut rng, 0..3)];
                let (next, _, _) = apply_motion(&scene, pose, a, 0.25, 0.3, margin);
                pose = next;
                let clear = scene.clearance(pose.x, pose.y);
                assert!(
                    clear >= margin - 1e-9,
                    "trial {trial} step {s}: clearance {clear}"
                );
            }
        }
    }
}
