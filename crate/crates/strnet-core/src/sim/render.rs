//! Egocentric observation rendering.

use crate::tensor::Tensor;

use super::world::World;

/// Agent heading; observations are rotated so the heading points up.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Heading {
    North,
    East,
    South,
    West,
}

impl Heading {
    /// Heading after attempting a unit move (dr, dc); zero moves keep `self`.
    pub fn from_delta(self, dr: i64, dc: i64) -> Heading {
        match (dr.signum(), dc.signum()) {
            (-1, _) => Heading::North,
            (1, _) => Heading::South,
            (_, 1) => Heading::East,
            (_, -1) => Heading::West,
            _ => self,
        }
    }
}

/// Renders the egocentric occupancy window at `pos`, rotated to `heading`,
/// with out-of-bounds cells reading as obstacles. The agent sits at the
/// window center; rows ahead of the agent have smaller indices. A pure
/// function of (world, pos, heading).
pub fn render_observation(
    world: &World,
    pos: (usize, usize),
    heading: Heading,
    window: usize,
) -> Tensor<f32> {
    let m = (window / 2) as i64;
    let mut out = Tensor::<f32>::zeros(&[window, window]);
    for r in 0..window {
        for c in 0..window {
            // forward and lateral offsets in the agent frame
            let f = m - r as i64;
            let l = c as i64 - m;
            let (dr, dc) = match heading {
                Heading::North => (-f, l),
                Heading::East => (l, f),
                Heading::South => (f, -l),
                Heading::West => (-l, -f),
            };
            let occ = world.occupancy(pos.0 as i64 + dr, pos.1 as i64 + dc);
            out.data_mut()[r * window + c] = occ as f32;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::world::{generate_world, WorldConfig};

    #[test]
    fn open_area_renders_all_free_interior() {
        let cfg = WorldConfig {
            size: 31,
            obstacle_density: 0.0,
            min_goal_distance: 4,
            max_goal_distance: 10,
            ..WorldConfig::default()
        };
        let w = generate_world(5, &cfg).unwrap();
        let center = (15, 15);
        let obs = render_observation(&w, center, Heading::North, 7);
        assert!(obs.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn walls_appear_at_correct_egocentric_offsets() {
        // 3x3 free world: render from the corner so the world boundary shows
        // up as obstacles at known window coordinates.
        let cfg = WorldConfig {
            size: 3,
            obstacle_density: 0.0,
            min_goal_distance: 1,
            max_goal_distance: 4,
            ..WorldConfig::default()
        };
        let w = generate_world(2, &cfg).unwrap();
        let obs = render_observation(&w, (0, 0), Heading::North, 3);
        // agent at (0,0) facing north: the row ahead (world row -1) is OOB,
        // the column to the left (world col -1) is OOB
        assert_eq!(obs.get(&[0, 0]), 1.0); // ahead-left
        assert_eq!(obs.get(&[0, 1]), 1.0); // ahead
        assert_eq!(obs.get(&[0, 2]), 1.0); // ahead-right
        assert_eq!(obs.get(&[1, 0]), 1.0); // left
        assert_eq!(obs.get(&[1, 1]), 0.0); // agent cell
        assert_eq!(obs.get(&[1, 2]), 0.0); // right (world (0,1))
        assert_eq!(obs.get(&[2, 1]), 0.0); // behind (world (1,0))

        // facing east from the same corner: "ahead" is now world col +1 (free),
        // "left" is world row -1 (OOB)
        let obs = render_observation(&w, (0, 0), Heading::East, 3);
        assert_eq!(obs.get(&[0, 1]), 0.0); // ahead (world (0,1))
        assert_eq!(obs.get(&[1, 0]), 1.0); // left (world (-1,0))
        assert_eq!(obs.get(&[2, 1]), 1.0); // behind (world (0,-1), OOB)
    }

    #[test]
    fn rendering_is_pure() {
        let w = generate_world(9, &WorldConfig::default()).unwrap();
        let a = render_observation(&w, w.start, Heading::West, 15);
        let b = render_observation(&w, w.start, Heading::West, 15);
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn rotation_consistency() {
        // rotating the heading by 90 degrees rotates the window contents
        let w = generate_world(13, &WorldConfig::default()).unwrap();
        let n = render_observation(&w, w.start, Heading::North, 5);
        let e = render_observation(&w, w.start, Heading::East, 5);
        // east window at (r, c) equals north window rotated: forward of east
        // is world +col; check via the world directly for a couple of cells
        for r in 0..5 {
            for c in 0..5 {
                let f = 2 - r as i64;
                let l = c as i64 - 2;
                let world_n = w.occupancy(w.start.0 as i64 - f, w.start.1 as i64 + l);
                let world_e = w.occupancy(w.start.0 as i64 + l, w.start.1 as i64 + f);
                assert_eq!(n.get(&[r, c]), world_n as f32);
                assert_eq!(e.get(&[r, c]), world_e as f32);
            }
        }
    }
}
