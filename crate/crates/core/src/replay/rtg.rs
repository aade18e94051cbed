/// Per-step return-to-go `g_t = Σ_{k≥t} γ^{k−t} r_k`, computed by the backward
/// recursion `g_t = r_t + γ g_{t+1}`.
pub fn compute_rtg(rewards: &[f64], gamma: f64) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for t in (0..rewards.len()).rev() {
        acc = rewards[t] + gamma * acc;
        out[t] = acc;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn undiscounted_suffix_sums() {
        assert_eq!(compute_rtg(&[1.0, 2.0, 3.0], 1.0), vec![6.0, 5.0, 3.0]);
    }

    #[test]
    fn single_and_empty() {
        assert_eq!(compute_rtg(&[-2.5], 0.3), vec![-2.5]);
        assert!(compute_rtg(&[], 0.9).is_empty());
    }

    #[test]
    fn halving_discount() {
        assert_eq!(compute_rtg(&[1.0; 4], 0.5), vec![1.875, 1.75, 1.5, 1.0]);
    }

    proptest! {
        #[test]
        fn recursion_identity(rewards in proptest::collection::vec(-10.0f64..10.0, 1..60), gamma in 0.01f64..=1.0) {
            let g = compute_rtg(&rewards, gamma);
            for t in 0..rewards.len() {
                let next = if t + 1 < g.len() { g[t + 1] } else { 0.0 };
                let resid = g[t] - gamma * next - rewards[t];
                prop_assert!(resid.abs() <= 1e-12 * g[t].abs().max(1.0));
            }
        }
    }
}
