//! PixelChase: a 16x16 grid where the agent chases a sequence of goals,
//! observed as 64x64 RGB frames.

use rand::Rng;

use crate::error::{invalid, Result};
use crate::rng::{stream, tag};
use crate::vision::Image;

pub const GRID: usize = 16;
pub const CELL: usize = 4;
pub const FRAME: usize = GRID * CELL;
pub const EPISODE_STEPS: usize = 100;
pub const ACTION_COUNT: usize = 5;

const BACKGROUND: [u8; 3] = [20, 20, 20];
const AGENT: [u8; 3] = [255, 255, 255];
const GOAL: [u8; 3] = [220, 30, 30];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Action {
    Up,
    Down,
    Left,
    Right,
    Stay,
}

impl Action {
    pub const ALL: [Action; ACTION_COUNT] = [Action::Up, Action::Down, Action::Left, Action::Right, Action::Stay];

    pub fn from_id(id: usize) -> Result<Self> {
        Self::ALL
            .get(id)
            .copied()
            .ok_or_else(|| invalid(format!("action id {id} out of range 0..{ACTION_COUNT}")))
    }

    pub fn id(self) -> usize {
        self as usize
    }

    /// Cell reached from `(x, y)`, clamped at the walls.
    pub fn apply(self, (x, y): (usize, usize)) -> (usize, usize) {
        match self {
            Action::Up => (x, y.saturating_sub(1)),
            Action::Down => (x, (y + 1).min(GRID - 1)),
            Action::Left => (x.saturating_sub(1), y),
            Action::Right => ((x + 1).min(GRID - 1), y),
            Action::Stay => (x, y),
        }
    }
}

/// Outcome of one raw environment step.
#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub obs: Vec<u8>,
    pub reward: f64,
    /// True on the final step of the episode.
    pub done: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PixelChase {
    pub agent: (usize, usize),
    /// Seed-determined goal sequence; consecutive goals differ.
    pub goals: Vec<(usize, usize)>,
    pub goal_index: usize,
    pub step_index: usize,
    pub episode_steps: usize,
}

impl PixelChase {
    /// Starts an episode; everything about it follows from `seed`.
    pub fn reset(seed: u64) -> (Self, Vec<u8>) {
        Self::reset_with_length(seed, EPISODE_STEPS)
    }

    pub fn reset_with_length(seed: u64, episode_steps: usize) -> (Self, Vec<u8>) {
        let mut rng = stream(seed, &[tag::ENV]);
        let cell = |rng: &mut crate::rng::Stream| (rng.random_range(0..GRID), rng.random_range(0..GRID));
        let agent = cell(&mut rng);
        let mut goals = Vec::with_capacity(episode_steps + 1);
        let mut prev = agent;
        // at most one goal can be collected per step
        while goals.len() <= episode_steps {
            let g = cell(&mut rng);
            if g != prev {
                goals.push(g);
                prev = g;
            }
        }
        let env = Self {
            agent,
            goals,
            goal_index: 0,
            step_index: 0,
            episode_steps,
        };
        let obs = env.render();
        (env, obs)
    }

    pub fn goal(&self) -> (usize, usize) {
        self.goals[self.goal_index]
    }

    pub fn done(&self) -> bool {
        self.step_index >= self.episode_steps
    }

    pub fn step(&mut self, action: usize) -> Result<Transition> {
        let action = Action::from_id(action)?;
        if self.done() {
            return Err(invalid("episode has ended; reset before stepping"));
        }
        self.agent = action.apply(self.agent);
        self.step_index += 1;
        let mut reward = 0.0;
        if self.agent == self.goal() {
            reward = 1.0;
            self.goal_index += 1;
        }
        Ok(Transition {
            obs: self.render(),
            reward,
            done: self.done(),
        })
    }

    /// CHW bytes, `3 x 64 x 64`.
    pub fn render(&self) -> Vec<u8> {
        let plane = FRAME * FRAME;
        let mut out = vec![0u8; 3 * plane];
        for c in 0..3 {
            out[c * plane..(c + 1) * plane].fill(BACKGROUND[c]);
        }
        for ((x, y), color) in [(self.goal(), GOAL), (self.agent, AGENT)] {
            for dy in 0..CELL {
                for dx in 0..CELL {
                    let i = (y * CELL + dy) * FRAME + x * CELL + dx;
                    for c in 0..3 {
                        out[c * plane + i] = color[c];
                    }
                }
            }
        }
        out
    }

    /// Shortest-path move towards the current goal, horizontal first.
    pub fn greedy_action(&self) -> usize {
        let ((ax, ay), (gx, gy)) = (self.agent, self.goal());
        let a = if gx > ax {
            Action::Right
        } else if gx < ax {
            Action::Left
        } else if gy > ay {
            Action::Down
        } else if gy < ay {
            Action::Up
        } else {
            Action::Stay
        };
        a.id()
    }
}

pub fn frame_to_image(obs: &[u8]) -> Result<Image> {
    Image::from_u8(FRAME, FRAME, obs)
}

/// Repeats each policy action `k` times, summing rewards and stopping
/// early at episode end.
#[derive(Clone, Debug, PartialEq)]
pub struct ActionRepeat {
    pub env: PixelChase,
    pub k: usize,
}

impl ActionRepeat {
    pub fn new(env: PixelChase, k: usize) -> Result<Self> {
        if k < 1 {
            return Err(invalid("action repeat must be at least 1"));
        }
        Ok(Self { env, k })
    }

    /// Returns the combined transition and the number of raw steps taken.
    pub fn step(&mut self, action: usize) -> Result<(Transition, usize)> {
        let mut total = 0.0;
        let mut raw = 0;
        loop {
            let t = self.env.step(action)?;
            total += t.reward;
            raw += 1;
            if t.done || raw == self.k {
                return Ok((
                    Transition {
                        reward: total,
                        ..t
                    },
                    raw,
                ));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::VecDeque;

    /// Grid distances by breadth-first search over the five moves.
    fn bfs(from: (usize, usize)) -> Vec<Vec<usize>> {
        let mut dist = vec![vec![usize::MAX; GRID]; GRID];
        dist[from.1][from.0] = 0;
        let mut queue = VecDeque::from([from]);
        while let Some(p) = queue.pop_front() {
            for a in Action::ALL {
                let n = a.apply(p);
                if dist[n.1][n.0] == usize::MAX {
                    dist[n.1][n.0] = dist[p.1][p.0] + 1;
                    queue.push_back(n);
                }
            }
        }
        dist
    }

    /// Most goals collectable in order within the step budget.
    fn oracle(env: &PixelChase) -> usize {
        let (mut pos, mut used, mut count) = (env.agent, 0, 0);
        for &g in &env.goals {
            let d = bfs(pos)[g.1][g.0];
            if used + d > env.episode_steps {
                break;
            }
            used += d;
            pos = g;
            count += 1;
        }
        count
    }

    #[test]
    fn moves_and_walls() {
        assert_eq!(Action::Up.apply((3, 0)), (3, 0));
        assert_eq!(Action::Right.apply((15, 4)), (15, 4));
        assert_eq!(Action::Down.apply((3, 4)), (3, 5));
        assert!(Action::from_id(5).is_err());
        let (mut env, _) = PixelChase::reset(3);
        let before = env.agent;
        env.step(Action::Stay.id()).unwrap();
        assert_eq!(env.agent, before);
    }

    #[test]
    fn adjacent_goal_collected_and_respawned() {
        let (mut env, _) = PixelChase::reset(1);
        let g = env.goal();
        env.agent = if g.0 > 0 { (g.0 - 1, g.1) } else { (1, g.1) };
        let a = if g.0 > 0 { Action::Right } else { Action::Left };
        let t = env.step(a.id()).unwrap();
        assert_eq!(t.reward, 1.0);
        assert_eq!(env.goal_index, 1);
        assert_ne!(env.goal(), env.agent);
    }

    #[test]
    fn episode_ends_at_step_limit() {
        let (mut env, _) = PixelChase::reset(2);
        for i in 0..EPISODE_STEPS {
            let t = env.step(Action::Stay.id()).unwrap();
            assert_eq!(t.done, i + 1 == EPISODE_STEPS);
        }
        assert!(env.step(0).is_err());
    }

    #[test]
    fn render_is_deterministic_and_marks_cells() {
        let (env, obs) = PixelChase::reset(4);
        assert_eq!(obs, PixelChase::reset(4).1);
        assert_eq!(obs.len(), 3 * FRAME * FRAME);
        let (x, y) = env.agent;
        let i = (y * CELL) * FRAME + x * CELL;
        assert_eq!([obs[i], obs[FRAME * FRAME + i], obs[2 * FRAME * FRAME + i]], AGENT);
        let (gx, gy) = env.goal();
        let j = (gy * CELL + 3) * FRAME + gx * CELL + 3;
        assert_eq!(obs[j], GOAL[0]);
        assert_eq!(obs[FRAME * FRAME + j], GOAL[1]);
        let img = frame_to_image(&obs).unwrap();
        assert_eq!((img.height, img.width), (FRAME, FRAME));
    }

    #[test]
    fn greedy_policy_matches_bfs_oracle() {
        for seed in 0..20 {
            let (mut env, _) = PixelChase::reset(seed);
            let expected = oracle(&env);
            let mut total = 0.0;
            while !env.done() {
                total += env.step(env.greedy_action()).unwrap().reward;
            }
            assert_eq!(total as usize, expected, "seed {seed}");
        }
    }

    #[test]
    fn seeded_replay_is_bitwise_identical() {
        let run = || {
            let (mut env, first) = PixelChase::reset(9);
            let mut frames = vec![first];
            for i in 0..EPISODE_STEPS {
                frames.push(env.step(i * 7 % ACTION_COUNT).unwrap().obs);
            }
            frames
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn action_repeat_rules() {
        assert!(ActionRepeat::new(PixelChase::reset(0).0, 0).is_err());
        let (env, _) = PixelChase::reset(5);
        let mut plain = env.clone();
        let mut wrapped = ActionRepeat::new(env, 1).unwrap();
        for a in [0, 3, 3, 1, 4] {
            let (t, raw) = wrapped.step(a).unwrap();
            assert_eq!(raw, 1);
            assert_eq!(t, plain.step(a).unwrap());
        }

        let (mut env, _) = PixelChase::reset(6);
        env.goals[0] = (5, 5);
        env.goals[1] = (6, 5);
        env.agent = (4, 5);
        let mut wrapped = ActionRepeat::new(env, 2).unwrap();
        let (t, _) = wrapped.step(Action::Right.id()).unwrap();
        assert_eq!(t.reward, 2.0);

        let mut wrapped = ActionRepeat::new(PixelChase::reset(7).0, 2).unwrap();
        let mut decisions = 0;
        while !wrapped.env.done() {
            wrapped.step(Action::Stay.id()).unwrap();
            decisions += 1;
        }
        assert_eq!(decisions, 50);

        let (env, _) = PixelChase::reset_with_length(8, 5);
        let mut wrapped = ActionRepeat::new(env, 2).unwrap();
        wrapped.step(4).unwrap();
        wrapped.step(4).unwrap();
        let (t, raw) = wrapped.step(4).unwrap();
        assert!(t.done);
        assert_eq!(raw, 1);
    }
}
