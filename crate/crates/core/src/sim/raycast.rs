//! Panoramic ray-cast observations. Each of the `v` views spans (360/v)
//! degrees around the agent heading; every ray reports the hit wall's color
//! and (optionally) normalized inverse depth `1/(1+d)`.

use serde::{Deserialize, Serialize};

use super::scene::{Pose, Scene};
use crate::error::{Error, Result};

/// Panoramic stack of `views` strips, each `channels x rays`, values in [0,1].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub views: usize,
    pub channels: usize,
    pub rays: usize,
    /// Layout: `data[(view * channels + channel) * rays + ray]`.
    pub data: Vec<f32>,
}

impl Observation {
    pub fn zeros(views: usize, channels: usize, rays: usize) -> Self {
        Observation {
            views,
            channels,
            rays,
            data: vec![0.0; views * channels * rays],
        }
    }

    pub fn get(&self, view: usize, channel: usize, ray: usize) -> f32 {
        self.data[(view * self.channels + channel) * self.rays + ray]
    }

    pub fn set(&mut self, view: usize, channel: usize, ray: usize, value: f32) {
        self.data[(view * self.channels + channel) * self.rays + ray] = value;
    }

    /// One view's strip as a flat `channels * rays` slice.
    pub fn view_strip(&self, view: usize) -> &[f32] {
        let n = self.channels * self.rays;
        &self.data[view * n..(view + 1) * n]
    }

    pub fn view_strip_mut(&mut self, view: usize) -> &mut [f32] {
        let n = self.channels * self.rays;
        &mut self.data[view * n..(view + 1) * n]
    }

    /// Cyclic view rotation: output view k is input view (k + shift) mod v.
    pub fn rotate_views(&self, shift: usize) -> Observation {
        let mut out = Observation::zeros(self.views, self.channels, self.rays);
        for k in 0..self.views {
            let src = (k + shift) % self.views;
            out.view_strip_mut(k).copy_from_slice(self.view_strip(src));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        if self.data.len() != self.views * self.channels * self.rays {
            return Err(Error::Invalid(format!(
                "observation data length {} != {}x{}x{}",
                self.data.len(),
                self.views,
                self.channels,
                self.rays
            )));
        }
        for &v in &self.data {
            if !v.is_finite() || !(0.0..=1.0).contains(&v) {
                return Err(Error::Invalid(format!("observation value {v} outside [0,1]")));
            }
        }
        Ok(())
    }
}

/// First wall hit along a ray: (distance, cell). Boundary walls guarantee a
/// hit for rays starting in free space.
pub fn cast_ray(scene: &Scene, x: f64, y: f64, dx: f64, dy: f64) -> (f64, (usize, usize)) {
    let cell = scene.cell;
    let (mut cx, mut cy) = match scene.cell_of(x, y) {
        Some((c, r)) => (c as i64, r as i64),
        None => return (0.0, (0, 0)),
    };
    let step_x: i64 = if dx > 0.0 { 1 } else { -1 };
    let step_y: i64 = if dy > 0.0 { 1 } else { -1 };
    let t_delta_x = if dx != 0.0 { (cell / dx).abs() } else { f64::INFINITY };
    let t_delta_y = if dy != 0.0 { (cell / dy).abs() } else { f64::INFINITY };
    let next_vx = if dx > 0.0 { (cx + 1) as f64 * cell } else { cx as f64 * cell };
    let next_vy = if dy > 0.0 { (cy + 1) as f64 * cell } else { cy as f64 * cell };
    let mut t_max_x = if dx != 0.0 { (next_vx - x) / dx } else { f64::INFINITY };
    let mut t_max_y = if dy != 0.0 { (next_vy - y) / dy } else { f64::INFINITY };

    loop {
        let t;
        if t_max_x < t_max_y {
            t = t_max_x;
            t_max_x += t_delta_x;
            cx += step_x;
        } else {
            t = t_max_y;
            t_max_y += t_delta_y;
            cy += step_y;
        }
        if cx < 0 || cy < 0 || cx >= scene.cols as i64 || cy >= scene.rows as i64 {
            // boundary walls make this unreachable from free space
            return (t, (0, 0));
        }
        if scene.is_wall(cx as usize, cy as usize) {
            return (t, (cx as usize, cy as usize));
        }
    }
}

/// Render the panoramic observation at a pose. View k is centered on
/// `heading + k * (360/v)` degrees; rays are ordered left to right
/// (counterclockwise-most first). Channels are (r, g, b) and, when
/// `channels == 4`, inverse depth `1/(1+d)`.
pub fn render_observation(
    scene: &Scene,
    pose: Pose,
    views: usize,
    rays: usize,
    channels: usize,
) -> Result<Observation> {
    if !matches!(views, 1 | 3 | 4 | 6) {
        return Err(Error::Invalid(format!("unsupported view count {views}")));
    }
    if !matches!(channels, 3 | 4) {
        return Err(Error::Invalid(format!("unsupported channel count {channels}")));
    }
    if !scene.in_free(pose.x, pose.y) {
        return Err(Error::InvalidPose { x: pose.x, y: pose.y });
    }
    let span = std::f64::consts::TAU / views as f64;
    let mut obs = Observation::zeros(views, channels, rays);
    for k in 0..views {
        let center = pose.heading + k as f64 * span;
        for j in 0..rays {
            let angle = center + span / 2.0 - (j as f64 + 0.5) * span / rays as f64;
            let (dx, dy) = (angle.cos(), angle.sin());
            let (dist, cell) = cast_ray(scene, pose.x, pose.y, dx, dy);
            let color = scene.color_at(cell.0, cell.1);
            obs.set(k, 0, j, color[0]);
            obs.set(k, 1, j, color[1]);
            obs.set(k, 2, j, color[2]);
            if channels == 4 {
                obs.set(k, 3, j, (1.0 / (1.0 + dist)) as f32);
            }
        }
    }
    Ok(obs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::scene::{generate_scene, SceneParams};

    fn empty_room() -> Scene {
        generate_scene(
            0,
            &SceneParams {
                width: 8.0,
                height: 8.0,
                cell: 0.5,
                wall_density: 0.0,
                dividers: 0,
                max_retries: 2,
            },
        )
        .unwrap()
    }

    #[test]
    fn perpendicular_ray_reports_closed_form_inverse_depth() {
        let scene = empty_room();
        // center of the room, ray pointing along +x
        let pose = Pose::new(4.0, 4.0, 0.0);
        // nearest wall face along +x begins at x = 7.5 -> d = 3.5
        let (dist, _) = cast_ray(&scene, pose.x, pose.y, 1.0, 0.0);
        assert!((dist - 3.5).abs() < 1e-9);

        let obs = render_observation(&scene, pose, 4, 33, 4).unwrap();
        // odd ray count puts the middle ray exactly on the view center
        let mid = 33 / 2;
        let expect = 1.0 / (1.0 + 3.5);
        assert!((f64::from(obs.get(0, 3, mid)) - expect).abs() < 1e-6);
    }

    #[test]
    fn rotating_pose_by_view_angle_cyclically_permutes_views() {
        let scene = generate_scene(9, &SceneParams::default()).unwrap();
        let mut rng = crate::rng::stream(5, "raycast-test", 0);
        let (x, y) = scene.random_free_point(&mut rng, 0.1);
        let v = 4;
        let span = std::f64::consts::TAU / v as f64;
        let a = render_observation(&scene, Pose::new(x, y, 0.3), v, 32, 4).unwrap();
        let b = render_observation(&scene, Pose::new(x, y, 0.3 + span), v, 32, 4).unwrap();
        // rotated view k equals original view k+1: original view k appears
        // at index k-1 mod v
        for k in 0..v {
            let orig = a.view_strip((k + 1) % v);
            let rot = b.view_strip(k);
            for (p, q) in orig.iter().zip(rot.iter()) {
                assert!((p - q).abs() < 1e-9, "view {k}: {p} vs {q}");
            }
        }
    }

    #[test]
    fn strip_matches_brute_force_ray_march() {
        let scene = generate_scene(17, &SceneParams::default()).unwrap();
        let mut rng = crate::rng::stream(6, "raycast-march", 0);
        let (x, y) = scene.random_free_point(&mut rng, 0.1);
        let pose = Pose::new(x, y, 1.1);
        let (v, w) = (4, 32);
        let obs = render_observation(&scene, pose, v, w, 4).unwrap();
        let span = std::f64::consts::TAU / v as f64;
        for k in 0..v {
            let center = pose.heading + k as f64 * span;
            for j in 0..w {
                let angle = center + span / 2.0 - (j as f64 + 0.5) * span / w as f64;
                let (dx, dy) = (angle.cos(), angle.sin());
                // march at 1e-4 resolution until a wall cell is entered
                let mut t = 0.0;
                let (dist, cell) = loop {
                    t += 1e-4;
                    let (px, py) = (pose.x + t * dx, pose.y + t * dy);
                    match scene.cell_of(px, py) {
                        Some((c, r)) if scene.is_wall(c, r) => break (t, (c, r)),
                        None => break (t, (0, 0)),
                        _ => {}
                    }
                };
                let expect_depth = 1.0 / (1.0 + dist);
                let got = f64::from(obs.get(k, 3, j));
                assert!(
                    (got - expect_depth).abs() < 2e-3,
                    "view {k} ray {j}: {got} vs {expect_depth}"
                );
                let color = scene.color_at(cell.0, cell.1);
                for ch in 0..3 {
                    assert!((f64::from(obs.get(k, ch, j)) - f64::from(color[ch])).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn pose_inside_wall_is_rejected() {
        let scene = empty_room();
        let err = render_observation(&scene, Pose::new(0.1, 0.1, 0.0), 4, 32, 4);
        assert!(matches!(err, Err(Error::InvalidPose { .. })));
    }

    #[test]
    fn all_channels_stay_in_unit_range() {
        let scene = generate_scene(23, &SceneParams::default()).unwrap();
        let mut rng = crate::rng::stream(7, "raycast-range", 0);
        for _ in 0..20 {
            let (x, y) = scene.random_free_point(&mut rng, 0.05);
            let heading = rand::Rng::gen_range(&mut rng, 0.0..std::f64::consts::TAU);
            let obs = render_observation(&scene, Pose::new(x, y, heading), 4, 32, 4).unwrap();
            obs.validate().unwrap();
        }
    }
}
