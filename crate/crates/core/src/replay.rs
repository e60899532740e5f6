//! Episode replay with uniform within-episode window sampling.

use std::collections::VecDeque;

use rand::Rng;

use crate::error::{Error, Result};

/// One policy step. `action` is the action that led to `obs` (`None` for
/// the first record of an episode); `reward` arrives with `obs`.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub obs: Vec<u8>,
    pub action: Option<usize>,
    pub reward: f64,
    /// 0 exactly on the final record of an episode.
    pub cont: f64,
    /// Optional precomputed encoder input (e.g. frozen-prefix features).
    pub cached: Option<Vec<f32>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Replay {
    pub capacity: usize,
    episodes: VecDeque<Vec<StepRecord>>,
    steps: usize,
}

impl Replay {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            episodes: VecDeque::new(),
            steps: 0,
        }
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn episodes(&self) -> &VecDeque<Vec<StepRecord>> {
        &self.episodes
    }

    /// Appends a finished episode, evicting whole episodes oldest first
    /// until the step count fits the capacity.
    pub fn add(&mut self, episode: Vec<StepRecord>) -> Result<()> {
        if episode.is_empty() {
            return Err(Error::Replay("cannot store an empty episode".into()));
        }
        if episode.len() > self.capacity {
            return Err(Error::Replay(format!(
                "episode of {} steps exceeds capacity {}",
                episode.len(),
                self.capacity
            )));
        }
        self.steps += episode.len();
        self.episodes.push_back(episode);
        while self.steps > self.capacity {
            let old = self.episodes.pop_front().expect("steps > 0 implies an episode");
            self.steps -= old.len();
        }
        Ok(())
    }

    fn window_count(&self, length: usize) -> usize {
        self.episodes
            .iter()
            .map(|e| (e.len() + 1).saturating_sub(length))
            .sum()
    }

    /// `(episode, start)` pairs, each drawn uniformly from all contiguous
    /// windows of `length` records that fit inside one episode.
    pub fn sample<R: Rng + ?Sized>(&self, batch: usize, length: usize, rng: &mut R) -> Result<Vec<(usize, usize)>> {
        if length == 0 {
            return Err(Error::Replay("window length must be positive".into()));
        }
        let total = self.window_count(length);
        if total == 0 {
            return Err(Error::Replay(format!(
                "no stored episode has {length} steps; collect more warmup data before training"
            )));
        }
        Ok((0..batch)
            .map(|_| {
                let mut u = rng.random_range(0..total);
                for (i, e) in self.episodes.iter().enumerate() {
                    let n = (e.len() + 1).saturating_sub(length);
                    if u < n {
                        return (i, u);
                    }
                    u -= n;
                }
                unreachable!("index below total window count")
            })
            .collect())
    }

    pub fn window(&self, episode: usize, start: usize, length: usize) -> &[StepRecord] {
        &self.episodes[episode][start..start + length]
    }
}

/// Converts environment steps into owed gradient updates, carrying the
/// fractional remainder: `ratio` replayed steps per env step, each update
/// replaying `batch * length` steps.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainRatio {
    pub ratio: f64,
    pub replayed_per_update: usize,
    pub carry: f64,
}

impl TrainRatio {
    pub fn new(ratio: f64, batch: usize, length: usize) -> Result<Self> {
        if !(ratio > 0.0) || batch * length == 0 {
            return Err(Error::InvalidArgument("train ratio and batch size must be positive".into()));
        }
        Ok(Self {
            ratio,
            replayed_per_update: batch * length,
            carry: 0.0,
        })
    }

    pub fn owed(&mut self, env_steps: usize) -> usize {
        self.carry += env_steps as f64 * self.ratio / self.replayed_per_update as f64;
        let n = self.carry.floor();
        self.carry -= n;
        n as usize
    }
}
