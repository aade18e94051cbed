use std::fmt;
use std::str::FromStr;

use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Source {
    Dreamer,
    Odt,
    Offline,
}

impl Source {
    pub fn as_str(self) -> &'static str {
        match self {
            Source::Dreamer => "dreamer",
            Source::Odt => "odt",
            Source::Offline => "offline",
        }
    }
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Source {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dreamer" => Ok(Source::Dreamer),
            "odt" => Ok(Source::Odt),
            "offline" => Ok(Source::Offline),
            other => Err(Error::InvalidArgument(format!("unknown source `{other}`"))),
        }
    }
}

/// One episode: `T + 1` observations, `T` actions and `T` rewards.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    observations: Vec<Vec<f64>>,
    actions: Vec<Vec<f64>>,
    rewards: Vec<f64>,
    total_return: f64,
    pub source: Source,
    /// Insertion stamp assigned by the buffer that holds the trajectory.
    pub created_at: u64,
}

impl Trajectory {
    pub fn new(
        observations: Vec<Vec<f64>>,
        actions: Vec<Vec<f64>>,
        rewards: Vec<f64>,
        source: Source,
    ) -> Result<Self> {
        if rewards.is_empty() {
            return Err(Error::InvalidTrajectory("no steps".into()));
        }
        if actions.len() != rewards.len() || observations.len() != rewards.len() + 1 {
            return Err(Error::InvalidTrajectory(format!(
                "{} observations, {} actions, {} rewards",
                observations.len(),
                actions.len(),
                rewards.len()
            )));
        }
        let obs_dim = observations[0].len();
        let act_dim = actions[0].len();
        if obs_dim == 0
            || act_dim == 0
            || observations.iter().any(|o| o.len() != obs_dim)
            || actions.iter().any(|a| a.len() != act_dim)
        {
            return Err(Error::InvalidTrajectory(
                "ragged observation or action rows".into(),
            ));
        }
        let total_return = rewards.iter().sum();
        Ok(Self {
            observations,
            actions,
            rewards,
            total_return,
            source,
            created_at: 0,
        })
    }

    /// Number of steps `T`.
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn observations(&self) -> &[Vec<f64>] {
        &self.observations
    }

    pub fn actions(&self) -> &[Vec<f64>] {
        &self.actions
    }

    pub fn rewards(&self) -> &[f64] {
        &self.rewards
    }

    /// Undiscounted sum of rewards.
    pub fn total_return(&self) -> f64 {
        self.total_return
    }

    pub fn obs_dim(&self) -> usize {
        self.observations[0].len()
    }

    pub fn act_dim(&self) -> usize {
        self.actions[0].len()
    }
}

#[cfg(test)]
pub(crate) fn fixture(rewards: &[f64], source: Source) -> Trajectory {
    let n = rewards.len();
    Trajectory::new(
        (0..=n).map(|i| vec![i as f64]).collect(),
        (0..n).map(|i| vec![(i as f64 * 0.1).sin()]).collect(),
        rewards.to_vec(),
        source,
    )
    .unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn total_return_is_reward_sum() {
        let t = fixture(&[0.5, -1.0, 2.25], Source::Odt);
        assert_eq!(t.total_return(), 1.75);
        assert_eq!(t.len(), 3);
    }

    #[test]
    fn rejects_inconsistent_lengths() {
        let bad = Trajectory::new(
            vec![vec![0.0]; 3],
            vec![vec![0.0]; 3],
            vec![0.0; 3],
            Source::Odt,
        );
        assert!(bad.is_err());
        let ragged = Trajectory::new(
            vec![vec![0.0], vec![0.0, 1.0]],
            vec![vec![0.0]],
            vec![0.0],
            Source::Odt,
        );
        assert!(ragged.is_err());
    }
}
