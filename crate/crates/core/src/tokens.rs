//! Interleaved `(return-to-go, observation, action)` model input.

use crate::{Error, Result};

/// A left-padded context window of `K` timesteps.
///
/// The first `K - valid_len` positions are padding (zeros, timestep 0). The
/// action at the last valid position may be a placeholder when the sequence is
/// built for acting.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    pub rtg: Vec<f64>,
    pub observations: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
    pub timesteps: Vec<usize>,
    pub valid_len: usize,
}

impl TokenSequence {
    /// Left-pads the given steps (all the same length, at most `k`) to `k`.
    pub fn left_padded(
        k: usize,
        rtg: &[f64],
        observations: &[Vec<f64>],
        actions: &[Vec<f64>],
        timesteps: &[usize],
    ) -> Result<Self> {
        let n = rtg.len();
        if n == 0 || n > k || observations.len() != n || actions.len() != n || timesteps.len() != n
        {
            return Err(Error::InvalidArgument(format!(
                "token window of {n} steps does not fit context length {k}"
            )));
        }
        let pad = k - n;
        let obs_dim = observations[0].len();
        let act_dim = actions[0].len();
        let mut seq = TokenSequence {
            rtg: vec![0.0; pad],
            observations: vec![vec![0.0; obs_dim]; pad],
            actions: vec![vec![0.0; act_dim]; pad],
            timesteps: vec![0; pad],
            valid_len: n,
        };
        seq.rtg.extend_from_slice(rtg);
        seq.observations.extend(observations.iter().cloned());
        seq.actions.extend(actions.iter().cloned());
        seq.timesteps.extend_from_slice(timesteps);
        seq.validate()?;
        Ok(seq)
    }

    pub fn context_len(&self) -> usize {
        self.rtg.len()
    }

    pub fn pad_len(&self) -> usize {
        self.context_len() - self.valid_len
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.context_len();
        if self.valid_len == 0 || self.valid_len > k {
            return Err(Error::InvalidArgument(format!(
                "valid_len {} outside 1..={k}",
                self.valid_len
            )));
        }
        if self.observations.len() != k || self.actions.len() != k || self.timesteps.len() != k {
            return Err(Error::InvalidArgument(
                "token fields differ in length".into(),
            ));
        }
        let ts = &self.timesteps[self.pad_len()..];
        if ts.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidArgument(
                "timesteps must be strictly increasing".into(),
            ));
        }
        Ok(())
    }
}
