//! Geodesic distances over a fine occupancy grid: 8-connected Dijkstra with
//! diagonal cost sqrt(2) * resolution, endpoints snapped to the nearest free
//! fine-grid node. A field is built once per goal and queried per step.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use super::scene::Scene;
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GeodesicField {
    pub cols: usize,
    pub rows: usize,
    pub resolution: f64,
    pub goal: (f64, f64),
    free: Vec<bool>,
    dist: Vec<f64>,
}

#[derive(PartialEq)]
struct HeapEntry {
    dist: f64,
    node: usize,
}

impl Eq for HeapEntry {}

impl Ord for HeapEntry {
    fn cmp(&self, other: &Self) -> Ordering {
        // reversed for a min-heap; ties break on node index for determinism
        other
            .dist
            .partial_cmp(&self.dist)
            .unwrap_or(Ordering::Equal)
            .then_with(|| other.node.cmp(&self.node))
    }
}

impl PartialOrd for HeapEntry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl GeodesicField {
    /// Single-source distances from `goal` over the fine grid.
    pub fn build(scene: &Scene, goal: (f64, f64), resolution: f64) -> Result<GeodesicField> {
        if resolution <= 0.0 {
            return Err(Error::Invalid("geodesic resolution must be positive".into()));
        }
        let cols = (scene.width() / resolution).round() as usize;
        let rows = (scene.height() / resolution).round() as usize;
        let free: Vec<bool> = (0..cols * rows)
            .map(|i| {
                let (c, r) = (i % cols, i / cols);
                let x = (c as f64 + 0.5) * resolution;
                let y = (r as f64 + 0.5) * resolution;
                scene.in_free(x, y)
            })
            .collect();

        let mut field = GeodesicField {
            cols,
            rows,
            resolution,
            goal,
            free,
            dist: vec![f64::INFINITY; cols * rows],
        };
        let start = field
            .snap(goal.0, goal.1)
            .ok_or(Error::InvalidPose { x: goal.0, y: goal.1 })?;

        let straight = resolution;
        let diagonal = resolution * std::f64::consts::SQRT_2;
        let mut heap = BinaryHeap::new();
        field.dist[start] = 0.0;
        heap.push(HeapEntry { dist: 0.0, node: start });
        while let Some(HeapEntry { dist, node }) = heap.pop() {
            if dist > field.dist[node] {
                continue;
            }
            let (c, r) = ((node % field.cols) as i64, (node / field.cols) as i64);
            for dr in -1i64..=1 {
                for dc in -1i64..=1 {
                    if dr == 0 && dc == 0 {
                        continue;
                    }
                    let (nc, nr) = (c + dc, r + dr);
                    if nc < 0 || nr < 0 || nc >= field.cols as i64 || nr >= field.rows as i64 {
                        continue;
                    }
                    let nn = nr as usize * field.cols + nc as usize;
                    if !field.free[nn] {
                        continue;
                    }
                    let w = if dr != 0 && dc != 0 { diagonal } else { straight };
                    let nd = dist + w;
                    if nd < field.dist[nn] {
                        field.dist[nn] = nd;
                        heap.push(HeapEntry { dist: nd, node: nn });
                    }
                }
            }
        }
        Ok(field)
    }

    fn node_of(&self, x: f64, y: f64) -> Option<usize> {
        if x < 0.0 || y < 0.0 {
            return None;
        }
        let c = (x / self.resolution) as usize;
        let r = (y / self.resolution) as usize;
        if c >= self.cols || r >= self.rows {
            return None;
        }
        Some(r * self.cols + c)
    }

    /// Nearest free node to a point, searching outward ring by ring.
    fn snap(&self, x: f64, y: f64) -> Option<usize> {
        let node = self.node_of(x, y)?;
        if self.free[node] {
            return Some(node);
        }
        let (c0, r0) = ((node % self.cols) as i64, (node / self.cols) as i64);
        let max_ring = self.cols.max(self.rows) as i64;
        for ring in 1..max_ring {
            let mut best: Option<(f64, usize)> = None;
            for dr in -ring..=ring {
                for dc in -ring..=ring {
                    if dr.abs() != ring && dc.abs() != ring {
                        continue;
                    }
                    let (c, r) = (c0 + dc, r0 + dr);
                    if c < 0 || r < 0 || c >= self.cols as i64 || r >= self.rows as i64 {
                        continue;
                    }
                    let n = r as usize * self.cols + c as usize;
                    if !self.free[n] {
                        continue;
                    }
                    let cx = (c as f64 + 0.5) * self.resolution;
                    let cy = (r as f64 + 0.5) * self.resolution;
                    let d2 = (cx - x).powi(2) + (cy - y).powi(2);
                    match best {
                        Some((bd, _)) if bd <= d2 => {}
                        _ => best = Some((d2, n)),
                    }
                }
            }
            if let Some((_, n)) = best {
                return Some(n);
            }
        }
        None
    }

    /// Geodesic distance from a point to the field's goal. Infinity signals
    /// an unreachable pair, which the scene connectivity invariant rules out.
    pub fn distance(&self, x: f64, y: f64) -> f64 {
        match self.snap(x, y) {
            Some(n) => self.dist[n],
            None => f64::INFINITY,
        }
    }
}

/// One-off geodesic distance; builds a field at `b` and queries `a`.
pub fn geodesic_distance(scene: &Scene, a: (f64, f64), b: (f64, f64), resolution: f64) -> Result<f64> {
    let field = GeodesicField::build(scene, b, resolution)?;
    let d = field.distance(a.0, a.1);
    if d.is_infinite() {
        return Err(Error::Invalid(format!(
            "no path between ({}, {}) and ({}, {}); scene connectivity violated",
            a.0, a.1, b.0, b.1
        )));
    }
    Ok(d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::scene::{generate_scene, Scene, SceneParams};

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
    fn distance_to_self_is_zero() {
        let scene = empty_room();
        let d = geodesic_distance(&scene, (5.0, 5.0), (5.0, 5.0), 0.1).unwrap();
        assert_eq!(d, 0.0);
    }

    #[test]
    fn straight_corridor_degenerates_to_euclidean() {
        let scene = empty_room();
        let d = geodesic_distance(&scene, (2.0, 5.0), (6.0, 5.0), 0.1).unwrap();
        assert!((d - 4.0).abs() <= 0.1, "distance {d}");
    }

    #[test]
    fn u_shaped_wall_forces_detour() {
        // hand-built scene: a wall segment between a and b with a gap far away
        let mut scene = empty_room();
        let col = scene.cols / 2;
        for r in 1..scene.rows - 3 {
            let i = scene.idx(col, r);
            scene.walls[i] = true;
            scene.colors[i] = [0.5, 0.5, 0.5];
        }
        let a = (3.0, 3.0);
        let b = (7.0, 3.0);
        let d = geodesic_distance(&scene, a, b, 0.1).unwrap();
        let euclid = 4.0;
        assert!(d > euclid + 1.0, "detour distance {d} should exceed euclidean");

        // compare against a finer-resolution run of the same algorithm
        let fine = geodesic_distance(&scene, a, b, 0.02).unwrap();
        assert!((d - fine).abs() < 0.15, "coarse {d} vs fine {fine}");
    }

    #[test]
    fn symmetric_within_tolerance() {
        let scene = generate_scene(5, &SceneParams::default()).unwrap();
        let mut rng = crate::rng::stream(8, "geo-sym", 0);
        for _ in 0..5 {
            let a = scene.random_free_point(&mut rng, 0.1);
            let b = scene.random_free_point(&mut rng, 0.1);
            let dab = geodesic_distance(&scene, a, b, 0.1).unwrap();
            let dba = geodesic_distance(&scene, b, a, 0.1).unwrap();
            assert!((dab - dba).abs() <= 0.2, "{dab} vs {dba}");
        }
    }

    #[test]
    fn triangle_inequality_with_grid_slack() {
        let scene = generate_scene(13, &SceneParams::default()).unwrap();
        let mut rng = crate::rng::stream(9, "geo-tri", 0);
        for _ in 0..5 {
            let a = scene.random_free_point(&mut rng, 0.1);
            let b = scene.random_free_point(&mut rng, 0.1);
            let c = scene.random_free_point(&mut rng, 0.1);
            let ab = geodesic_distance(&scene, a, b, 0.1).unwrap();
            let bc = geodesic_distance(&scene, b, c, 0.1).unwrap();
            let ac = geodesic_distance(&scene, a, c, 0.1).unwrap();
            assert!(ac <= ab + bc + 0.2, "{ac} > {ab} + {bc}");
        }
    }
}
