//! Procedural 2D navigation world: scene generation, panoramic ray-cast
//! observations, agent kinematics with rewards, geodesic distance fields,
//! episode datasets, and random-walk collection.

mod env;
mod episodes;
mod geodesic;
mod raycast;
mod scene;
mod walks;

pub use env::{
    reward_of, step, Action, AgentState, NavEpisode, ObsSpec, RewardConfig, StepConfig, StepResult,
};
pub use episodes::{
    generate_episode_dataset, load_episodes, save_episodes, Difficulty, EpisodeSpec,
    UnsatisfiableBand,
};
pub use geodesic::{geodesic_distance, GeodesicField};
pub use raycast::{cast_ray, render_observation, Observation};
pub use scene::{generate_scene, Pose, Scene, SceneParams};
pub use walks::{load_walk, random_walk, save_walk, WalkConfig};
