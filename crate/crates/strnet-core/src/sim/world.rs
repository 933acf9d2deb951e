//! Occupancy-grid worlds with seeded procedural generation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{SimError, SimResult};

/// Direction order used for every neighbor scan and tie-break: N, E, S, W.
pub const DIRECTIONS: [(i64, i64); 4] = [(-1, 0), (0, 1), (1, 0), (0, -1)];

/// A 2-D occupancy world. Cell 0 is free, 1 is an obstacle.
#[derive(Debug, Clone)]
pub struct World {
    grid: Vec<u8>,
    height: usize,
    width: usize,
    pub start: (usize, usize),
    pub goal: (usize, usize),
    pub seed: u64,
}

impl World {
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Occupancy at (row, col); out-of-bounds reads as an obstacle.
    pub fn occupancy(&self, r: i64, c: i64) -> u8 {
        if r < 0 || c < 0 || r >= self.height as i64 || c >= self.width as i64 {
            1
        } else {
            self.grid[r as usize * self.width + c as usize]
        }
    }

    pub fn is_free(&self, r: i64, c: i64) -> bool {
        self.occupancy(r, c) == 0
    }

    /// BFS distances from `from` over free cells; `None` where unreachable.
    pub fn bfs_distances(&self, from: (usize, usize)) -> Vec<Option<u32>> {
        let mut dist = vec![None; self.grid.len()];
        if !self.is_free(from.0 as i64, from.1 as i64) {
            return dist;
        }
        let mut queue = std::collections::VecDeque::new();
        dist[from.0 * self.width + from.1] = Some(0);
        queue.push_back(from);
        while let Some((r, c)) = queue.pop_front() {
            let d = dist[r * self.width + c].unwrap();
            for (dr, dc) in DIRECTIONS {
                let (nr, nc) = (r as i64 + dr, c as i64 + dc);
                if self.is_free(nr, nc) {
                    let idx = nr as usize * self.width + nc as usize;
                    if dist[idx].is_none() {
                        dist[idx] = Some(d + 1);
                        queue.push_back((nr as usize, nc as usize));
                    }
                }
            }
        }
        dist
    }

    /// Shortest start-to-goal path length, guaranteed by generation.
    pub fn shortest_length(&self) -> u32 {
        self.bfs_distances(self.start)[self.goal.0 * self.width + self.goal.1]
            .expect("generation validated connectivity")
    }
}

/// Generation parameters.
#[derive(Debug, Clone)]
pub struct WorldConfig {
    pub size: usize,
    pub obstacle_density: f64,
    /// Admissible BFS start-goal distances.
    pub min_goal_distance: u32,
    pub max_goal_distance: u32,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            size: 32,
            obstacle_density: 0.22,
            min_goal_distance: 8,
            max_goal_distance: 18,
        }
    }
}

/// Generates a world whose start and goal are connected with a BFS distance
/// inside the configured band. Reproducible per seed; fails after bounded
/// retries.
pub fn generate_world(seed: u64, cfg: &WorldConfig) -> SimResult<World> {
    if cfg.obstacle_density >= 0.4 {
        return Err(SimError::WorldGeneration(format!(
            "density {} too high (must be < 0.4)",
            cfg.obstacle_density
        )));
    }
    let n = cfg.size;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    const GRID_TRIES: usize = 25;
    const PAIR_TRIES: usize = 60;
    for _ in 0..GRID_TRIES {
        let grid: Vec<u8> = (0..n * n)
            .map(|_| u8::from(rng.random::<f64>() < cfg.obstacle_density))
            .collect();
        let mut world = World {
            grid,
            height: n,
            width: n,
            start: (0, 0),
            goal: (0, 0),
            seed,
        };
        for _ in 0..PAIR_TRIES {
            let start = (rng.random_range(0..n), rng.random_range(0..n));
            if !world.is_free(start.0 as i64, start.1 as i64) {
                continue;
            }
            let dist = world.bfs_distances(start);
            let candidates: Vec<(usize, usize)> = (0..n * n)
                .filter_map(|i| {
                    dist[i].and_then(|d| {
                        (d >= cfg.min_goal_distance && d <= cfg.max_goal_distance)
                            .then(|| (i / n, i % n))
                    })
                })
                .collect();
            if candidates.is_empty() {
                continue;
            }
            let goal = candidates[rng.random_range(0..candidates.len())];
            world.start = start;
            world.goal = goal;
            return Ok(world);
        }
    }
    Err(SimError::WorldGeneration(format!(
        "no valid start/goal after bounded retries (seed {seed})"
    )))
}
