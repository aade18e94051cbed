use std::cell::Cell;

use rand::Rng;

use super::{compute_rtg, Source, Trajectory};
use crate::tokens::TokenSequence;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvictionPolicy {
    /// Drop the earliest-inserted trajectory.
    Oldest,
    /// Drop the trajectory with the smallest total return, considering the
    /// incoming one as well. Ties go to the earliest insertion.
    LowestReward,
}

impl EvictionPolicy {
    pub fn as_str(self) -> &'static str {
        match self {
            EvictionPolicy::Oldest => "oldest",
            EvictionPolicy::LowestReward => "lowest_reward",
        }
    }
}

impl std::str::FromStr for EvictionPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "oldest" => Ok(EvictionPolicy::Oldest),
            "lowest_reward" => Ok(EvictionPolicy::LowestReward),
            other => Err(Error::InvalidArgument(format!(
                "unknown eviction policy `{other}`"
            ))),
        }
    }
}

/// One training window drawn from the buffer.
#[derive(Clone, Debug)]
pub struct SampledWindow {
    pub trajectory_id: u64,
    pub source: Source,
    pub seq: TokenSequence,
}

/// Capacity-bounded trajectory store.
#[derive(Debug)]
pub struct TrajectoryBuffer {
    capacity: usize,
    policy: EvictionPolicy,
    entries: Vec<Trajectory>,
    next_stamp: u64,
    reads: Cell<u64>,
    writes: u64,
}

impl TrajectoryBuffer {
    pub fn new(capacity: usize, policy: EvictionPolicy) -> Self {
        assert!(capacity > 0, "buffer capacity must be positive");
        Self {
            capacity,
            policy,
            entries: Vec::with_capacity(capacity.min(4096)),
            next_stamp: 1,
            reads: Cell::new(0),
            writes: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn policy(&self) -> EvictionPolicy {
        self.policy
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[Trajectory] {
        &self.entries
    }

    /// Number of sampling calls so far.
    pub fn reads(&self) -> u64 {
        self.reads.get()
    }

    /// Number of insertions so far.
    pub fn writes(&self) -> u64 {
        self.writes
    }

    pub fn count_source(&self, source: Source) -> usize {
        self.entries.iter().filter(|t| t.source == source).count()
    }

    pub fn min_return(&self) -> Option<f64> {
        self.entries
            .iter()
            .map(Trajectory::total_return)
            .reduce(f64::min)
    }

    /// Stamps `traj` with the next insertion id and stores it. When the buffer
    /// is full exactly one trajectory leaves and is returned; under
    /// [`EvictionPolicy::LowestReward`] that may be `traj` itself.
    pub fn insert(&mut self, mut traj: Trajectory) -> Option<Trajectory> {
        traj.created_at = self.next_stamp;
        self.next_stamp += 1;
        self.writes += 1;
        if self.entries.len() < self.capacity {
            self.entries.push(traj);
            return None;
        }
        let victim = match self.policy {
            EvictionPolicy::Oldest => self.position_min_by(|t| (0.0, t.created_at)),
            EvictionPolicy::LowestReward => {
                let i = self.position_min_by(|t| (t.total_return(), t.created_at));
                if traj.total_return() < self.entries[i].total_return() {
                    return Some(traj);
                }
                i
            }
        };
        Some(std::mem::replace(&mut self.entries[victim], traj))
    }

    fn position_min_by(&self, key: impl Fn(&Trajectory) -> (f64, u64)) -> usize {
        let mut best = 0;
        for i in 1..self.entries.len() {
            let (a, b) = (key(&self.entries[i]), key(&self.entries[best]));
            if a.0 < b.0 || (a.0 == b.0 && a.1 < b.1) {
                best = i;
            }
        }
        best
    }

    /// Fills the buffer with the `n` highest-return trajectories of `offline`.
    pub fn seed_from_offline(&mut self, offline: &[Trajectory], n: usize) -> Result<()> {
        if offline.is_empty() {
            return Err(Error::InvalidArgument("offline dataset is empty".into()));
        }
        let mut ranked: Vec<&Trajectory> = offline.iter().collect();
        ranked.sort_by(|a, b| b.total_return().total_cmp(&a.total_return()));
        for t in ranked.into_iter().take(n) {
            let mut t = t.clone();
            t.source = Source::Offline;
            self.insert(t);
        }
        Ok(())
    }

    /// Draws `batch` training windows of at most `k` steps.
    ///
    /// Trajectories are picked with probability proportional to their length;
    /// the window start is uniform over positions where a `min(k, T)`-step
    /// window fits. Return-to-go is computed over the whole remaining episode.
    pub fn sample_windows<R: Rng>(
        &self,
        batch: usize,
        k: usize,
        gamma: f64,
        rng: &mut R,
    ) -> Result<Vec<SampledWindow>> {
        if self.entries.is_empty() {
            return Err(Error::EmptyBuffer);
        }
        if k == 0 {
            return Err(Error::InvalidArgument(
                "context length must be positive".into(),
            ));
        }
        self.reads.set(self.reads.get() + 1);
        let mut cumulative = Vec::with_capacity(self.entries.len());
        let mut total = 0usize;
        for t in &self.entries {
            total += t.len();
            cumulative.push(total);
        }
        let mut out = Vec::with_capacity(batch);
        for _ in 0..batch {
            let pick = rng.gen_range(0..total);
            let idx = cumulative.partition_point(|&c| c <= pick);
            let traj = &self.entries[idx];
            let width = k.min(traj.len());
            let start = rng.gen_range(0..=traj.len() - width);
            let rtg = compute_rtg(&traj.rewards()[start..], gamma);
            let range = start..start + width;
            let seq = TokenSequence::left_padded(
                k,
                &rtg[..width],
                &traj.observations()[range.clone()],
                &traj.actions()[range.clone()],
                &range.collect::<Vec<_>>(),
            )?;
            out.push(SampledWindow {
                trajectory_id: traj.created_at,
                source: traj.source,
                seq,
            });
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::replay::trajectory::fixture;
    use crate::rng;
    use proptest::prelude::*;
    use rand::Rng;

    fn returns(buf: &TrajectoryBuffer) -> Vec<f64> {
        let mut r: Vec<f64> = buf.entries().iter().map(Trajectory::total_return).collect();
        r.sort_by(f64::total_cmp);
        r
    }

    #[test]
    fn lowest_reward_evicts_the_minimum() {
        let mut buf = TrajectoryBuffer::new(2, EvictionPolicy::LowestReward);
        buf.insert(fixture(&[1.0], Source::Odt));
        buf.insert(fixture(&[3.0], Source::Odt));
        let gone = buf.insert(fixture(&[2.0], Source::Odt)).unwrap();
        assert_eq!(gone.total_return(), 1.0);
        assert_eq!(returns(&buf), vec![2.0, 3.0]);
    }

    #[test]
    fn oldest_evicts_smallest_stamp() {
        let mut buf = TrajectoryBuffer::new(2, EvictionPolicy::Oldest);
        buf.insert(fixture(&[3.0], Source::Odt));
        buf.insert(fixture(&[1.0], Source::Odt));
        let gone = buf.insert(fixture(&[2.0], Source::Odt)).unwrap();
        assert_eq!(gone.total_return(), 3.0);
        assert_eq!(gone.created_at, 1);
    }

    #[test]
    fn ties_go_to_the_earliest_insertion() {
        let mut buf = TrajectoryBuffer::new(2, EvictionPolicy::LowestReward);
        buf.insert(fixture(&[1.0], Source::Odt));
        buf.insert(fixture(&[1.0], Source::Dreamer));
        let gone = buf.insert(fixture(&[1.0], Source::Offline)).unwrap();
        assert_eq!(gone.created_at, 1);
        assert_eq!(gone.source, Source::Odt);
    }

    #[test]
    fn thousand_ascending_inserts_keep_the_top_ten() {
        let mut buf = TrajectoryBuffer::new(10, EvictionPolicy::LowestReward);
        for r in 1..=1000 {
            buf.insert(fixture(&[r as f64], Source::Odt));
        }
        assert_eq!(
            returns(&buf),
            (991..=1000).map(f64::from).collect::<Vec<_>>()
        );
    }

    #[test]
    fn offline_seeding_takes_top_n() {
        let offline: Vec<_> = [5.0, 1.0, 9.0]
            .iter()
            .map(|&r| fixture(&[r], Source::Odt))
            .collect();
        let mut buf = TrajectoryBuffer::new(10, EvictionPolicy::Oldest);
        buf.seed_from_offline(&offline, 2).unwrap();
        assert_eq!(returns(&buf), vec![5.0, 9.0]);
        assert!(buf.entries().iter().all(|t| t.source == Source::Offline));

        let mut all = TrajectoryBuffer::new(10, EvictionPolicy::Oldest);
        all.seed_from_offline(&offline, 7).unwrap();
        assert_eq!(all.len(), 3);
        assert!(all.seed_from_offline(&[], 1).is_err());
    }

    #[test]
    fn offline_seeding_matches_sort_oracle() {
        let mut r = rng::stream(0, &[1]);
        let offline: Vec<_> = (0..100)
            .map(|_| fixture(&[r.gen_range(-50.0..50.0)], Source::Odt))
            .collect();
        let mut buf = TrajectoryBuffer::new(100, EvictionPolicy::Oldest);
        buf.seed_from_offline(&offline, 10).unwrap();
        let mut oracle: Vec<f64> = offline.iter().map(Trajectory::total_return).collect();
        oracle.sort_by(|a, b| b.total_cmp(a));
        oracle.truncate(10);
        oracle.sort_by(f64::total_cmp);
        assert_eq!(returns(&buf), oracle);
    }

    #[test]
    fn short_trajectory_window_is_whole_episode() {
        let mut buf = TrajectoryBuffer::new(4, EvictionPolicy::Oldest);
        buf.insert(fixture(&[1.0, 2.0, 3.0, 4.0, 5.0], Source::Odt));
        let mut r = rng::stream(0, &[2]);
        for w in buf.sample_windows(8, 10, 1.0, &mut r).unwrap() {
            assert_eq!(w.seq.valid_len, 5);
            assert_eq!(w.seq.pad_len(), 5);
            assert_eq!(&w.seq.timesteps[5..], &[0, 1, 2, 3, 4]);
            assert_eq!(w.seq.rtg[5], 15.0);
        }
    }

    #[test]
    fn first_token_rtg_of_full_window_is_discounted_return() {
        let mut buf = TrajectoryBuffer::new(4, EvictionPolicy::Oldest);
        buf.insert(fixture(&[1.0, 1.0, 1.0], Source::Odt));
        let mut r = rng::stream(0, &[3]);
        let w = &buf.sample_windows(1, 3, 0.5, &mut r).unwrap()[0];
        assert_eq!(w.seq.rtg[0], 1.0 + 0.5 + 0.25);
    }

    #[test]
    fn sampling_is_length_proportional() {
        let mut buf = TrajectoryBuffer::new(4, EvictionPolicy::Oldest);
        buf.insert(fixture(&[0.0; 10], Source::Odt));
        buf.insert(fixture(&[0.0; 30], Source::Dreamer));
        let mut r = rng::stream(7, &[4]);
        let draws = buf.sample_windows(10_000, 5, 1.0, &mut r).unwrap();
        let long = draws.iter().filter(|w| w.source == Source::Dreamer).count() as f64;
        // Binomial(10^4, 0.75): std ≈ 43, so ±200 is > 4.5 standard deviations.
        assert!((long - 7500.0).abs() < 200.0, "long = {long}");
    }

    #[test]
    fn empty_buffer_cannot_be_sampled() {
        let buf = TrajectoryBuffer::new(4, EvictionPolicy::Oldest);
        let mut r = rng::stream(0, &[5]);
        assert!(matches!(
            buf.sample_windows(1, 4, 1.0, &mut r),
            Err(Error::EmptyBuffer)
        ));
    }

    proptest! {
        #[test]
        fn lowest_reward_retains_top_n(rets in proptest::collection::vec(-100i32..100, 1..300), cap in 1usize..12) {
            let mut buf = TrajectoryBuffer::new(cap, EvictionPolicy::LowestReward);
            let mut prev_min = f64::NEG_INFINITY;
            for (i, &r) in rets.iter().enumerate() {
                buf.insert(fixture(&[r as f64], Source::Odt));
                prop_assert!(buf.len() <= cap);
                if i + 1 >= cap {
                    let m = buf.min_return().unwrap();
                    prop_assert!(m >= prev_min);
                    prev_min = m;
                }
            }
            let mut oracle: Vec<f64> = rets.iter().map(|&r| r as f64).collect();
            oracle.sort_by(|a, b| b.total_cmp(a));
            oracle.truncate(cap);
            oracle.sort_by(f64::total_cmp);
            prop_assert_eq!(returns(&buf), oracle);
        }
    }
}
