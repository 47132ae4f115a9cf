//! Scene generation: room-and-corridor layouts with door gaps plus random
//! wall sprinkling, wall colors hashed from (seed, cell index), and a JSON
//! file format with run-length-encoded occupancy.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, stream};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
}

impl Pose {
    pub fn new(x: f64, y: f64, heading: f64) -> Self {
        Pose { x, y, heading }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct SceneParams {
    pub width: f64,
    pub height: f64,
    pub cell: f64,
    /// Probability that an interior cell becomes a wall after room layout.
    pub wall_density: f64,
    /// Number of dividing wall segments (each with a door gap) to place.
    pub dividers: usize,
    pub max_retries: usize,
}

impl Default for SceneParams {
    fn default() -> Self {
        SceneParams {
            width: 16.0,
            height: 16.0,
            cell: 0.5,
            wall_density: 0.12,
            dividers: 6,
            max_retries: 50,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Scene {
    pub id: String,
    pub seed: u64,
    pub cols: usize,
    pub rows: usize,
    pub cell: f64,
    /// Row-major occupancy; `true` is a wall.
    pub walls: Vec<bool>,
    /// Row-major colors; only wall cells carry meaningful values.
    pub colors: Vec<[f32; 3]>,
}

impl Scene {
    pub fn width(&self) -> f64 {
        self.cols as f64 * self.cell
    }

    pub fn height(&self) -> f64 {
        self.rows as f64 * self.cell
    }

    pub fn idx(&self, col: usize, row: usize) -> usize {
        row * self.cols + col
    }

    pub fn is_wall(&self, col: usize, row: usize) -> bool {
        self.walls[self.idx(col, row)]
    }

    /// Cell containing a point; `None` outside the bounds.
    pub fn cell_of(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        if x < 0.0 || y < 0.0 || x >= self.width() || y >= self.height() {
            return None;
        }
        let col = ((x / self.cell) as usize).min(self.cols - 1);
        let row = ((y / self.cell) as usize).min(self.rows - 1);
        Some((col, row))
    }

    pub fn in_free(&self, x: f64, y: f64) -> bool {
        match self.cell_of(x, y) {
            Some((c, r)) => !self.is_wall(c, r),
            None => false,
        }
    }

    pub fn color_at(&self, col: usize, row: usize) -> [f32; 3] {
        self.colors[self.idx(col, row)]
    }

    pub fn free_cell_count(&self) -> usize {
        self.walls.iter().filter(|&&w| !w).count()
    }

    /// Euclidean clearance to the nearest wall cell within the 3x3 cell
    /// neighborhood (enough for clearances below one cell size).
    pub fn clearance(&self, x: f64, y: f64) -> f64 {
        let (c0, r0) = match self.cell_of(x, y) {
            Some(cr) => cr,
            None => return 0.0,
        };
        let mut best = f64::INFINITY;
        for dr in -1i64..=1 {
            for dc in -1i64..=1 {
                let (c, r) = (c0 as i64 + dc, r0 as i64 + dr);
                if c < 0 || r < 0 || c >= self.cols as i64 || r >= self.rows as i64 {
                    continue;
                }
                if self.is_wall(c as usize, r as usize) {
                    let (x0, y0) = (c as f64 * self.cell, r as f64 * self.cell);
                    let dx = (x0 - x).max(x - (x0 + self.cell)).max(0.0);
                    let dy = (y0 - y).max(y - (y0 + self.cell)).max(0.0);
                    best = best.min((dx * dx + dy * dy).sqrt());
                }
            }
        }
        best
    }

    /// Uniform random point in free space with at least `clearance` to walls.
    pub fn random_free_point(&self, rng: &mut rand_chacha::ChaCha8Rng, clearance: f64) -> (f64, f64) {
        loop {
            let x = rng.gen_range(0.0..self.width());
            let y = rng.gen_range(0.0..self.height());
            if self.in_free(x, y) && self.clearance(x, y) >= clearance {
                return (x, y);
            }
        }
    }
}

/// Flood fill over free cells from `start`; returns the visited mask.
fn flood_fill(walls: &[bool], cols: usize, rows: usize, start: usize) -> Vec<bool> {
    let mut seen = vec![false; walls.len()];
    let mut stack = vec![start];
    seen[start] = true;
    while let Some(i) = stack.pop() {
        let (c, r) = (i % cols, i / cols);
        let push = |c: usize, r: usize, stack: &mut Vec<usize>, seen: &mut Vec<bool>| {
            let j = r * cols + c;
            if !walls[j] && !seen[j] {
                seen[j] = true;
                stack.push(j);
            }
        };
        if c > 0 {
            push(c - 1, r, &mut stack, &mut seen);
        }
        if c + 1 < cols {
            push(c + 1, r, &mut stack, &mut seen);
        }
        if r > 0 {
            push(c, r - 1, &mut stack, &mut seen);
        }
        if r + 1 < rows {
            push(c, r + 1, &mut stack, &mut seen);
        }
    }
    seen
}

pub fn generate_scene(seed: u64, params: &SceneParams) -> Result<Scene> {
    if params.width < 6.0 || params.height < 6.0 {
        return Err(Error::SceneGeneration(format!(
            "bounds {}x{} below the 6x6 minimum",
            params.width, params.height
        )));
    }
    if params.cell <= 0.0 {
        return Err(Error::SceneGeneration("cell size must be positive".into()));
    }
    if !(0.0..1.0).contains(&params.wall_density) {
        return Err(Error::SceneGeneration(format!(
            "wall density {} outside [0, 1)",
            params.wall_density
        )));
    }
    let cols = (params.width / params.cell).round() as usize;
    let rows = (params.height / params.cell).round() as usize;
    if (cols as f64 * params.cell - params.width).abs() > 1e-9
        || (rows as f64 * params.cell - params.height).abs() > 1e-9
    {
        return Err(Error::SceneGeneration(format!(
            "bounds {}x{} not divisible by cell {}",
            params.width, params.height, params.cell
        )));
    }

    for retry in 0..params.max_retries.max(1) {
        let mut rng = stream(seed, "scene", retry as u64);
        let mut walls = vec![false; cols * rows];
        for c in 0..cols {
            walls[c] = true;
            walls[(rows - 1) * cols + c] = true;
        }
        for r in 0..rows {
            walls[r * cols] = true;
            walls[r * cols + cols - 1] = true;
        }

        // dividing walls with door gaps
        for _ in 0..params.dividers {
            if rng.gen_bool(0.5) {
                let r = rng.gen_range(2..rows.saturating_sub(2).max(3));
                let door = rng.gen_range(1..cols - 1);
                let door2 = rng.gen_range(1..cols - 1);
                for c in 1..cols - 1 {
                    if c != door && c != door2 {
                        walls[r * cols + c] = true;
                    }
                }
            } else {
                let c = rng.gen_range(2..cols.saturating_sub(2).max(3));
                let door = rng.gen_range(1..rows - 1);
                let door2 = rng.gen_range(1..rows - 1);
                for r in 1..rows - 1 {
                    if r != door && r != door2 {
                        walls[r * cols + c] = true;
                    }
                }
            }
        }

        // random sprinkle on interior free cells
        for r in 1..rows - 1 {
            for c in 1..cols - 1 {
                let i = r * cols + c;
                if !walls[i] && rng.gen_bool(params.wall_density) {
                    walls[i] = true;
                }
            }
        }

        // keep the largest free component; fill smaller pockets
        let mut best_mask: Option<Vec<bool>> = None;
        let mut best_count = 0usize;
        let mut assigned = vec![false; walls.len()];
        for i in 0..walls.len() {
            if !walls[i] && !assigned[i] {
                let mask = flood_fill(&walls, cols, rows, i);
                let count = mask.iter().filter(|&&m| m).count();
                for (a, m) in assigned.iter_mut().zip(mask.iter()) {
                    *a |= m;
                }
                if count > best_count {
                    best_count = count;
                    best_mask = Some(mask);
                }
            }
        }
        let Some(mask) = best_mask else { continue };
        for i in 0..walls.len() {
            if !walls[i] && !mask[i] {
                walls[i] = true;
            }
        }

        let interior = (cols - 2) * (rows - 2);
        if best_count < interior / 3 {
            continue; // degenerate layout; retry
        }

        // verify connectivity by flood fill from the first free cell
        let first_free = walls.iter().position(|&w| !w).expect("free cell exists");
        let seen = flood_fill(&walls, cols, rows, first_free);
        let connected = walls
            .iter()
            .zip(seen.iter())
            .all(|(&w, &s)| w || s);
        if !connected {
            continue;
        }

        let colors = (0..cols * rows)
            .map(|i| {
                if walls[i] {
                    [
                        rng::unit_from(seed, i as u64, 0),
                        rng::unit_from(seed, i as u64, 1),
                        rng::unit_from(seed, i as u64, 2),
                    ]
                } else {
                    [0.0, 0.0, 0.0]
                }
            })
            .collect();

        return Ok(Scene {
            id: format!("scene-{seed:08x}"),
            seed,
            cols,
            rows,
            cell: params.cell,
            walls,
            colors,
        });
    }
    Err(Error::SceneGeneration(format!(
        "no connected layout within {} retries (seed {seed}); parameters unsatisfiable",
        params.max_retries
    )))
}

// ---------------------------------------------------------------------------
// JSON file format
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct SceneFile {
    id: String,
    seed: u64,
    cols: usize,
    rows: usize,
    cell: f64,
    /// Run lengths of occupancy, alternating starting with `first` value.
    occupancy_rle: Vec<u32>,
    first_is_wall: bool,
    /// Colors of wall cells in row-major scan order of wall cells.
    wall_colors: Vec<[f32; 3]>,
}

impl Scene {
    pub fn to_json(&self) -> Result<String> {
        let mut rle = Vec::new();
        let first = self.walls[0];
        let mut current = first;
        let mut run = 0u32;
        for &w in &self.walls {
            if w == current {
                run += 1;
            } else {
                rle.push(run);
                current = w;
                run = 1;
            }
        }
        rle.push(run);
        let wall_colors = self
            .walls
            .iter()
            .enumerate()
            .filter(|&(_, w)| *w)
            .map(|(i, _)| self.colors[i])
            .collect();
        let file = SceneFile {
            id: self.id.clone(),
            seed: self.seed,
            cols: self.cols,
            rows: self.rows,
            cell: self.cell,
            occupancy_rle: rle,
            first_is_wall: first,
            wall_colors,
        };
        Ok(serde_json::to_string(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Scene> {
        let file: SceneFile = serde_json::from_str(text)?;
        let mut walls = Vec::with_capacity(file.cols * file.rows);
        let mut value = file.first_is_wall;
        for &run in &file.occupancy_rle {
            walls.extend(std::iter::repeat(value).take(run as usize));
            value = !value;
        }
        if walls.len() != file.cols * file.rows {
            return Err(Error::Invalid(format!(
                "scene RLE decodes to {} cells, expected {}",
                walls.len(),
                file.cols * file.rows
            )));
        }
        let mut colors = vec![[0.0f32; 3]; walls.len()];
        let mut it = file.wall_colors.iter();
        for (i, &w) in walls.iter().enumerate() {
            if w {
                colors[i] = *it
                    .next()
                    .ok_or_else(|| Error::Invalid("scene color table too short".into()))?;
            }
        }
        if it.next().is_some() {
            return Err(Error::Invalid("scene color table too long".into()));
        }
        Ok(Scene {
            id: file.id,
            seed: file.seed,
            cols: file.cols,
            rows: file.rows,
            cell: file.cell,
            walls,
            colors,
        })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Scene> {
        Scene::from_json(&std::fs::read_to_string(path)?)
    }
}
