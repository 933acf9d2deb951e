//! Breadth-first shortest-path expert.

use super::world::{World, DIRECTIONS};
use super::{SimError, SimResult};

/// Expert demonstrator over a goal-rooted BFS distance field.
pub struct Expert<'a> {
    world: &'a World,
    dist_to_goal: Vec<Option<u32>>,
}

impl<'a> Expert<'a> {
    pub fn new(world: &'a World) -> Self {
        Expert {
            dist_to_goal: world.bfs_distances(world.goal),
            world,
        }
    }

    /// Steps-to-goal at a position, if reachable.
    pub fn distance_at(&self, pos: (usize, usize)) -> Option<u32> {
        self.dist_to_goal[pos.0 * self.world.width() + pos.1]
    }

    /// One step along a shortest path: the first direction (N, E, S, W order)
    /// that decreases the goal distance. Zero displacement at the goal.
    pub fn action(&self, pos: (usize, usize)) -> SimResult<(i64, i64)> {
        if pos == self.world.goal {
            return Ok((0, 0));
        }
        let here = self.distance_at(pos).ok_or(SimError::Unreachable(pos))?;
        for (dr, dc) in DIRECTIONS {
            let (nr, nc) = (pos.0 as i64 + dr, pos.1 as i64 + dc);
            if self.world.is_free(nr, nc) {
                if let Some(d) = self.dist_to_goal[nr as usize * self.world.width() + nc as usize]
                {
                    if d + 1 == here {
                        return Ok((dr, dc));
                    }
                }
            }
        }
        // a reachable non-goal cell always has a descending neighbor
        unreachable!("distance field inconsistent at {pos:?}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::world::{generate_world, WorldConfig};

    #[test]
    fn zero_displacement_at_goal() {
        let cfg = WorldConfig {
            obstacle_density: 0.0,
            ..WorldConfig::default()
        };
        let w = generate_world(0, &cfg).unwrap();
        let e = Expert::new(&w);
        assert_eq!(e.action(w.goal).unwrap(), (0, 0));
        assert_eq!(e.distance_at(w.goal), Some(0));
    }

    #[test]
    fn empty_world_path_equals_manhattan_distance() {
        let cfg = WorldConfig {
            obstacle_density: 0.0,
            ..WorldConfig::default()
        };
        for seed in 0..10 {
            let w = generate_world(seed, &cfg).unwrap();
            let e = Expert::new(&w);
            let manhattan = w.start.0.abs_diff(w.goal.0) + w.start.1.abs_diff(w.goal.1);
            let mut pos = w.start;
            let mut steps = 0usize;
            while pos != w.goal {
                let (dr, dc) = e.action(pos).unwrap();
                pos = ((pos.0 as i64 + dr) as usize, (pos.1 as i64 + dc) as usize);
                steps += 1;
                assert!(steps <= manhattan);
            }
            assert_eq!(steps, manhattan);
        }
    }

    #[test]
    fn expert_walk_matches_bfs_shortest_length() {
        let cfg = WorldConfig {
            obstacle_density: 0.25,
            ..WorldConfig::default()
        };
        for seed in 0..25 {
            let w = generate_world(seed, &cfg).unwrap();
            let e = Expert::new(&w);
            let shortest = w.shortest_length();
            let mut pos = w.start;
            let mut steps = 0u32;
            while pos != w.goal {
                // ground-truth distance decreases strictly along the path
                assert_eq!(e.distance_at(pos), Some(shortest - steps));
                let (dr, dc) = e.action(pos).unwrap();
                pos = ((pos.0 as i64 + dr) as usize, (pos.1 as i64 + dc) as usize);
                steps += 1;
            }
            assert_eq!(steps, shortest, "seed {seed}");
        }
    }

    #[test]
    fn deterministic_tie_breaks() {
        let cfg = WorldConfig::default();
        let w = generate_world(11, &cfg).unwrap();
        let e = Expert::new(&w);
        let a = e.action(w.start).unwrap();
        let b = e.action(w.start).unwrap();
        assert_eq!(a, b);
    }
}
