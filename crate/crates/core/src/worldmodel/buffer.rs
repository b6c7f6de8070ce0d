//! Episode replay storage with fixed-length segment sampling.
//!
//! Observations are stored at f32 to keep long runs in memory; training
//! reads them back as f64. Only the modality the configured encoder consumes
//! is retained.

use std::collections::VecDeque;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::diffmath::DiffError;
use crate::encoders::ObsInput;
use crate::pointcloud::PointCloud;
use crate::scenesim::{Observation, RgbdImage};

/// Compact single-modality observation.
#[derive(Clone, Debug)]
pub enum StoredObs {
    Cloud {
        positions: Vec<[f32; 3]>,
        colors: Vec<[f32; 3]>,
    },
    Image {
        size: u16,
        rgb: Vec<[f32; 3]>,
        depth: Vec<f32>,
    },
}

impl StoredObs {
    pub fn from_observation(obs: &Observation, wants_cloud: bool) -> StoredObs {
        if wants_cloud {
            StoredObs::Cloud {
                positions: obs
                    .cloud
                    .positions
                    .iter()
                    .map(|p| [p[0] as f32, p[1] as f32, p[2] as f32])
                    .collect(),
                colors: obs
                    .cloud
                    .colors
                    .iter()
                    .map(|c| [c[0] as f32, c[1] as f32, c[2] as f32])
                    .collect(),
            }
        } else {
            StoredObs::Image {
                size: obs.image.width as u16,
                rgb: obs
                    .image
                    .rgb
                    .iter()
                    .map(|c| [c[0] as f32, c[1] as f32, c[2] as f32])
                    .collect(),
                depth: obs.image.depth.iter().map(|&d| d as f32).collect(),
            }
        }
    }

    /// Materialize back to the f64 observation type encoders consume.
    pub fn materialize(&self) -> OwnedObs {
        match self {
            StoredObs::Cloud { positions, colors } => OwnedObs::Cloud(
                PointCloud::new(
                    positions
                        .iter()
                        .map(|p| [p[0] as f64, p[1] as f64, p[2] as f64])
                        .collect(),
                    colors
                        .iter()
                        .map(|c| {
                            [
                                (c[0] as f64).clamp(0.0, 1.0),
                                (c[1] as f64).clamp(0.0, 1.0),
                                (c[2] as f64).clamp(0.0, 1.0),
                            ]
                        })
                        .collect(),
                )
                .expect("stored cloud is well-formed"),
            ),
            StoredObs::Image { size, rgb, depth } => OwnedObs::Image(RgbdImage {
                width: *size as usize,
                height: *size as usize,
                rgb: rgb
                    .iter()
                    .map(|c| [c[0] as f64, c[1] as f64, c[2] as f64])
                    .collect(),
                depth: depth.iter().map(|&d| d as f64).collect(),
            }),
        }
    }
}

/// Owned f64 observation; borrows into [`ObsInput`] for encoding.
pub enum OwnedObs {
    Cloud(PointCloud),
    Image(RgbdImage),
}

impl OwnedObs {
    pub fn as_input(&self) -> ObsInput<'_> {
        match self {
            OwnedObs::Cloud(c) => ObsInput::Cloud(c),
            OwnedObs::Image(i) => ObsInput::Image(i),
        }
    }
}

/// One finished episode: aligned (observation, action, reward, continuation)
/// rows. `actions[t]` is the action taken after observing `obs[t]`.
#[derive(Clone, Debug)]
pub struct EpisodeRecord {
    pub obs: Vec<StoredObs>,
    pub actions: Vec<Vec<f32>>,
    pub rewards: Vec<f32>,
    pub continuations: Vec<u8>,
}

impl EpisodeRecord {
    pub fn len(&self) -> usize {
        self.obs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.obs.is_empty()
    }
}

/// Fixed-length training segment. Steps past an episode end are padded with
/// the terminal observation, zero action/reward, and continuation 0.
pub struct Segment {
    pub obs: Vec<OwnedObs>,
    pub actions: Vec<Vec<f64>>,
    pub rewards: Vec<f64>,
    pub continuations: Vec<f64>,
}

/// FIFO episode buffer bounded by a total step budget.
pub struct ReplayBuffer {
    episodes: VecDeque<EpisodeRecord>,
    capacity_steps: usize,
    total_steps: usize,
}

impl ReplayBuffer {
    pub fn new(capacity_steps: usize) -> Self {
        ReplayBuffer {
            episodes: VecDeque::new(),
            capacity_steps,
            total_steps: 0,
        }
    }

    pub fn push_episode(&mut self, ep: EpisodeRecord) {
        assert_eq!(ep.obs.len(), ep.actions.len());
        assert_eq!(ep.obs.len(), ep.rewards.len());
        assert_eq!(ep.obs.len(), ep.continuations.len());
        if ep.is_empty() {
            return;
        }
        self.total_steps += ep.len();
        self.episodes.push_back(ep);
        while self.total_steps > self.capacity_steps && self.episodes.len() > 1 {
            if let Some(old) = self.episodes.pop_front() {
                self.total_steps -= old.len();
            }
        }
    }

    pub fn episode_count(&self) -> usize {
        self.episodes.len()
    }

    pub fn step_count(&self) -> usize {
        self.total_steps
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }

    /// Uniformly sample a start step over all stored steps, then cut a
    /// length-T window from that episode, padding past the end.
    pub fn sample_segment(&self, rng: &mut ChaCha8Rng, t_len: usize) -> Result<Segment, DiffError> {
        if self.is_empty() {
            return Err(DiffError::InvalidArg {
                what: "cannot sample from an empty replay buffer",
            });
        }
        let mut pick = rng.gen_range(0..self.total_steps);
        let mut ep_idx = 0;
        for (i, ep) in self.episodes.iter().enumerate() {
            if pick < ep.len() {
                ep_idx = i;
                break;
            }
            pick -= ep.len();
        }
        let ep = &self.episodes[ep_idx];
        let start = pick;
        let action_dim = ep.actions[0].len();

        let mut obs = Vec::with_capacity(t_len);
        let mut actions = Vec::with_capacity(t_len);
        let mut rewards = Vec::with_capacity(t_len);
        let mut continuations = Vec::with_capacity(t_len);
        for t in 0..t_len {
            let i = start + t;
            if i < ep.len() {
                obs.push(ep.obs[i].materialize());
                actions.push(ep.actions[i].iter().map(|&a| a as f64).collect());
                rewards.push(ep.rewards[i] as f64);
                continuations.push(ep.continuations[i] as f64);
            } else {
                // absorbing padding at the episode boundary
                obs.push(ep.obs[ep.len() - 1].materialize());
                actions.push(vec![0.0; action_dim]);
                rewards.push(0.0);
                continuations.push(0.0);
            }
        }
        Ok(Segment {
            obs,
            actions,
            rewards,
            continuations,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::rand_core::SeedableRng;

    fn tiny_obs(v: f32) -> StoredObs {
        StoredObs::Cloud {
            positions: vec![[v, 0.0, 0.0]; 4],
            colors: vec![[0.5, 0.5, 0.5]; 4],
        }
    }

    fn episode(len: usize, mark: f32) -> EpisodeRecord {
        EpisodeRecord {
            obs: (0..len).map(|_| tiny_obs(mark)).collect(),
            actions: vec![vec![0.0; 2]; len],
            rewards: (0..len).map(|i| i as f32).collect(),
            continuations: (0..len).map(|i| u8::from(i + 1 < len)).collect(),
        }
    }

    #[test]
    fn fifo_eviction_at_capacity() {
        let mut buf = ReplayBuffer::new(25);
        for i in 0..4 {
            buf.push_episode(episode(10, i as f32));
        }
        // 40 steps pushed into a 25-step budget: the two oldest evicted
        assert_eq!(buf.episode_count(), 2);
        assert_eq!(buf.step_count(), 20);
    }

    #[test]
    fn segment_pads_past_episode_end_with_zero_continuation() {
        let mut buf = ReplayBuffer::new(100);
        buf.push_episode(episode(5, 1.0));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let seg = buf.sample_segment(&mut rng, 8).unwrap();
            assert_eq!(seg.obs.len(), 8);
            // once continuation hits 0 it stays 0 and rewards are zero
            let mut ended = false;
            for t in 0..8 {
                if ended {
                    assert_eq!(seg.continuations[t], 0.0);
                    assert_eq!(seg.rewards[t], 0.0);
                }
                if seg.continuations[t] == 0.0 {
                    ended = true;
                }
            }
        }
    }

    #[test]
    fn empty_buffer_sampling_is_error() {
        let buf = ReplayBuffer::new(10);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(buf.sample_segment(&mut rng, 4).is_err());
    }
}
