use std::collections::VecDeque;

use rand::Rng;

use super::Trajectory;
use crate::{Error, Result};

/// Contiguous slice of one episode: `L + 1` observations, `L` actions and
/// `L` rewards starting at step `start`.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceWindow {
    pub episode: usize,
    pub start: usize,
    pub observations: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
    pub rewards: Vec<f64>,
}

/// Episode store for world-model training, FIFO-bounded by episode count.
#[derive(Clone, Debug)]
pub struct SequenceDataset {
    episodes: VecDeque<Trajectory>,
    capacity: usize,
    total_steps: usize,
    writes: u64,
}

impl SequenceDataset {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "dataset capacity must be positive");
        Self {
            episodes: VecDeque::new(),
            capacity,
            total_steps: 0,
            writes: 0,
        }
    }

    pub fn push(&mut self, episode: Trajectory) {
        self.writes += 1;
        self.total_steps += episode.len();
        self.episodes.push_back(episode);
        if self.episodes.len() > self.capacity {
            let old = self.episodes.pop_front().unwrap();
            self.total_steps -= old.len();
        }
    }

    pub fn len(&self) -> usize {
        self.episodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }

    pub fn total_steps(&self) -> usize {
        self.total_steps
    }

    pub fn writes(&self) -> u64 {
        self.writes
    }

    pub fn episodes(&self) -> impl Iterator<Item = &Trajectory> {
        self.episodes.iter()
    }

    /// Draws `batch` windows of `len` steps, uniformly over every valid
    /// `(episode, start)` pair.
    pub fn sample<R: Rng>(
        &self,
        batch: usize,
        len: usize,
        rng: &mut R,
    ) -> Result<Vec<SequenceWindow>> {
        if len == 0 {
            return Err(Error::InvalidArgument(
                "window length must be positive".into(),
            ));
        }
        let mut cumulative = Vec::with_capacity(self.episodes.len());
        let mut total = 0usize;
        for ep in &self.episodes {
            total += (ep.len() + 1).saturating_sub(len);
            cumulative.push(total);
        }
        if total == 0 {
            return Err(Error::NoLongEpisode { required: len });
        }
        Ok((0..batch)
            .map(|_| {
                let pick = rng.gen_range(0..total);
                let episode = cumulative.partition_point(|&c| c <= pick);
                let before = if episode == 0 {
                    0
                } else {
                    cumulative[episode - 1]
                };
                let start = pick - before;
                let ep = &self.episodes[episode];
                SequenceWindow {
                    episode,
                    start,
                    observations: ep.observations()[start..=start + len].to_vec(),
                    actions: ep.actions()[start..start + len].to_vec(),
                    rewards: ep.rewards()[start..start + len].to_vec(),
                }
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::replay::trajectory::fixture;
    use crate::replay::Source;
    use crate::rng;

    #[test]
    fn exact_length_episode_has_one_window() {
        let mut d = SequenceDataset::new(10);
        d.push(fixture(&[1.0, 2.0, 3.0], Source::Dreamer));
        let mut r = rng::stream(0, &[0]);
        let w = d.sample(3, 3, &mut r).unwrap();
        assert_eq!(w.len(), 3);
        for win in w {
            assert_eq!(win.start, 0);
            assert_eq!(win.rewards, vec![1.0, 2.0, 3.0]);
            assert_eq!(win.observations.len(), 4);
        }
    }

    #[test]
    fn two_valid_starts_are_equally_likely() {
        let mut d = SequenceDataset::new(10);
        d.push(fixture(&[0.0; 5], Source::Dreamer));
        let mut r = rng::stream(11, &[0]);
        let w = d.sample(10_000, 4, &mut r).unwrap();
        let ones = w.iter().filter(|w| w.start == 1).count() as f64;
        let zeros = 10_000.0 - ones;
        // Chi-square with one degree of freedom against 5000/5000; 10.83 is
        // the 0.1% critical value.
        let chi2 = (ones - 5000.0).powi(2) / 5000.0 + (zeros - 5000.0).powi(2) / 5000.0;
        assert!(chi2 < 10.83, "chi2 = {chi2}");
        assert!(w.iter().all(|w| w.start <= 1));
    }

    #[test]
    fn windows_stay_inside_one_episode() {
        let mut d = SequenceDataset::new(10);
        d.push(fixture(&[1.0; 3], Source::Dreamer));
        d.push(fixture(&[2.0; 6], Source::Dreamer));
        d.push(fixture(&[3.0; 4], Source::Dreamer));
        let mut r = rng::stream(1, &[0]);
        for w in d.sample(500, 4, &mut r).unwrap() {
            let v = w.rewards[0];
            assert!(w.rewards.iter().all(|&x| x == v));
            assert_ne!(v, 1.0);
        }
    }

    #[test]
    fn too_short_names_required_length() {
        let mut d = SequenceDataset::new(10);
        d.push(fixture(&[1.0; 3], Source::Dreamer));
        let mut r = rng::stream(1, &[0]);
        let err = d.sample(1, 4, &mut r).unwrap_err();
        assert_eq!(err.to_string(), "no episode has at least 4 steps");
    }

    #[test]
    fn total_steps_tracks_capacity_eviction() {
        let mut d = SequenceDataset::new(2);
        d.push(fixture(&[1.0; 3], Source::Dreamer));
        d.push(fixture(&[1.0; 4], Source::Dreamer));
        d.push(fixture(&[1.0; 5], Source::Dreamer));
        assert_eq!(d.len(), 2);
        assert_eq!(d.total_steps(), 9);
        assert_eq!(
            d.total_steps(),
            d.episodes().map(Trajectory::len).sum::<usize>()
        );
    }
}
