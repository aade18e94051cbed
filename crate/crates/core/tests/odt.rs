use dodt_core::env::{Env, EnvCounters, EnvName, EnvSpec, StepResult};
use dodt_core::odt::{evaluate, rollout_online, OdtConfig, Transformer};
use dodt_core::replay::{EvictionPolicy, Source, Trajectory, TrajectoryBuffer};
use dodt_core::rng;
use dodt_core::tokens::TokenSequence;
use dodt_core::world_model::ActMode;
use rand::Rng;

fn small_cfg() -> OdtConfig {
    OdtConfig {
        context_len: 5,
        width: 16,
        layers: 2,
        heads: 2,
        max_timestep: 64,
        rtg_scale: 10.0,
        batch: 8,
        lr: 1e-3,
        grad_clip: 1.0,
        ..OdtConfig::default()
    }
}

fn random_seq<R: Rng>(k: usize, valid: usize, obs: usize, act: usize, r: &mut R) -> TokenSequence {
    let t0 = r.gen_range(0..20);
    let rtg: Vec<f64> = (0..valid).map(|_| r.gen_range(-20.0..20.0)).collect();
    let o: Vec<Vec<f64>> = (0..valid)
        .map(|_| (0..obs).map(|_| r.gen_range(-1.0..1.0)).collect())
        .collect();
    let a: Vec<Vec<f64>> = (0..valid)
        .map(|_| (0..act).map(|_| r.gen_range(-1.0..1.0)).collect())
        .collect();
    let ts: Vec<usize> = (t0..t0 + valid).collect();
    TokenSequence::left_padded(k, &rtg, &o, &a, &ts).unwrap()
}

fn outputs(model: &Transformer, seq: &TokenSequence) -> (Vec<f64>, Vec<f64>) {
    let mut g = dodt_autodiff::Graph::new();
    let out = model.forward(&mut g, std::slice::from_ref(seq)).unwrap();
    (g.value(out.mean).to_vec(), g.value(out.log_std).to_vec())
}

#[test]
fn future_tokens_never_change_past_outputs() {
    let mut r = rng::stream(0, &[]);
    let model = Transformer::new(OdtConfig::default(), 3, 1, &mut r).unwrap();
    let k = model.cfg.context_len;
    for _ in 0..200 {
        let valid = r.gen_range(1..=k);
        let seq = random_seq(k, valid, 3, 1, &mut r);
        let (m0, s0) = outputs(&model, &seq);
        let t = r.gen_range(0..k);
        let mut p = seq.clone();
        p.actions[t][0] = r.gen_range(-1.0..1.0);
        for j in t + 1..k {
            p.rtg[j] = r.gen_range(-50.0..50.0);
            p.observations[j][r.gen_range(0..3)] = r.gen_range(-3.0..3.0);
            p.actions[j][0] = r.gen_range(-1.0..1.0);
        }
        let (m1, s1) = outputs(&model, &p);
        for i in 0..=t {
            assert_eq!(m0[i].to_bits(), m1[i].to_bits(), "position {i} of {t}");
            assert_eq!(s0[i].to_bits(), s1[i].to_bits());
        }
    }
}

#[test]
fn single_valid_step_ignores_padding() {
    let mut r = rng::stream(1, &[]);
    let model = Transformer::new(small_cfg(), 2, 1, &mut r).unwrap();
    let seq = random_seq(5, 1, 2, 1, &mut r);
    let mut p = seq.clone();
    for j in 0..4 {
        p.rtg[j] = 7.0;
        p.observations[j] = vec![0.3, -0.2];
        p.actions[j] = vec![0.9];
    }
    p.actions[4] = vec![-0.4];
    assert_eq!(
        outputs(&model, &seq).0[4].to_bits(),
        outputs(&model, &p).0[4].to_bits()
    );
}

#[test]
fn padded_and_unpadded_sequences_agree() {
    let mut r = rng::stream(2, &[]);
    let model = Transformer::new(small_cfg(), 2, 1, &mut r).unwrap();
    for valid in 1..=5 {
        let seq = random_seq(5, valid, 2, 1, &mut r);
        let short = TokenSequence::left_padded(
            valid,
            &seq.rtg[5 - valid..],
            &seq.observations[5 - valid..],
            &seq.actions[5 - valid..],
            &seq.timesteps[5 - valid..],
        )
        .unwrap();
        let (a, _) = outputs(&model, &seq);
        let (b, _) = outputs(&model, &short);
        assert!(
            (a[4] - b[valid - 1]).abs() < 1e-12,
            "{} vs {}",
            a[4],
            b[valid - 1]
        );
    }
}

#[test]
fn log_std_stays_in_range_and_oversized_input_is_rejected() {
    let mut r = rng::stream(3, &[]);
    let model = Transformer::new(small_cfg(), 2, 1, &mut r).unwrap();
    let seq = random_seq(5, 5, 2, 1, &mut r);
    let (_, s) = outputs(&model, &seq);
    assert!(s.iter().all(|&v| (-5.0..=2.0).contains(&v)));
    let long = random_seq(6, 6, 2, 1, &mut r);
    assert!(model.predict(&long).is_err());
    let mut bad = seq.clone();
    bad.valid_len = 6;
    assert!(model.predict(&bad).is_err());
}

#[test]
fn golden_mean_vector() {
    let model = Transformer::new(small_cfg(), 2, 1, &mut rng::stream(0, &[])).unwrap();
    let seq = TokenSequence::left_padded(
        5,
        &[3.0, 2.0, 1.5],
        &[vec![0.1, 0.2], vec![0.3, -0.1], vec![-0.5, 0.0]],
        &[vec![0.5], vec![-0.25], vec![0.0]],
        &[0, 1, 2],
    )
    .unwrap();
    let (mean, _) = outputs(&model, &seq);
    println!("golden mean: {mean:?}");
    let golden: [f64; 5] = GOLDEN;
    for (a, b) in mean.iter().zip(golden) {
        assert_eq!(a.to_bits(), b.to_bits(), "{mean:?}");
    }
}

const GOLDEN: [f64; 5] = [
    -0.6814950546206362,
    -0.6814950546206362,
    -0.7018119636240846,
    -0.6654664235855355,
    0.4798517738443571,
];

#[test]
fn nll_at_the_mean_is_the_gaussian_constant() {
    let cfg = OdtConfig {
        entropy_coef: 0.0,
        ..small_cfg()
    };
    let mut model = Transformer::new(cfg, 2, 1, &mut rng::stream(4, &[])).unwrap();
    let w = model.theta.index_of("head.w").unwrap();
    let b = model.theta.index_of("head.b").unwrap();
    model.theta.get_mut(w).data_mut().fill(0.0);
    model
        .theta
        .get_mut(b)
        .data_mut()
        .copy_from_slice(&[0.3, -20.0]);
    let a = 0.3f64.tanh();
    let log_std = -5.0 + 3.5 * ((-20.0f64).tanh() + 1.0);
    let mut r = rng::stream(4, &[1]);
    let mut seq = random_seq(5, 4, 2, 1, &mut r);
    seq.actions.iter_mut().for_each(|x| x[0] = a);
    let mut g = dodt_autodiff::Graph::new();
    let (_, nll, _) = model.loss(&mut g, &[seq]).unwrap();
    let expected = log_std + 0.5 * (2.0 * std::f64::consts::PI).ln();
    assert!(
        (g.scalar(nll) - expected).abs() < 1e-12,
        "{} vs {expected}",
        g.scalar(nll)
    );
}

fn fixture_buffer(seed: u64) -> TrajectoryBuffer {
    let mut r = rng::stream(seed, &[9]);
    let mut buf = TrajectoryBuffer::new(10, EvictionPolicy::Oldest);
    for _ in 0..3 {
        let n = r.gen_range(6..12);
        let obs = (0..=n)
            .map(|i| vec![(i as f64 * 0.3).sin(), r.gen_range(-1.0..1.0)])
            .collect();
        let acts = (0..n).map(|i| vec![(i as f64 * 0.3).cos() * 0.8]).collect();
        let rew = (0..n).map(|_| r.gen_range(-1.0..0.0)).collect();
        buf.insert(Trajectory::new(obs, acts, rew, Source::Odt).unwrap());
    }
    buf
}

#[test]
fn zero_learning_rate_keeps_parameters() {
    let cfg = OdtConfig {
        lr: 0.0,
        ..small_cfg()
    };
    let mut model = Transformer::new(cfg, 2, 1, &mut rng::stream(5, &[])).unwrap();
    let before = model.theta.clone();
    let buf = fixture_buffer(5);
    let batch: Vec<_> = buf
        .sample_windows(4, 5, 1.0, &mut rng::stream(5, &[1]))
        .unwrap()
        .into_iter()
        .map(|w| w.seq)
        .collect();
    model.train_step(&batch).unwrap();
    assert!(model.theta.same_values(&before));
}

#[test]
fn training_lowers_nll() {
    for seed in 0..5 {
        let mut model = Transformer::new(small_cfg(), 2, 1, &mut rng::stream(seed, &[])).unwrap();
        let buf = fixture_buffer(seed);
        let mut r = rng::stream(seed, &[2]);
        let fixed: Vec<_> = buf
            .sample_windows(8, 5, 1.0, &mut r)
            .unwrap()
            .into_iter()
            .map(|w| w.seq)
            .collect();
        let nll = |m: &Transformer| {
            let mut g = dodt_autodiff::Graph::new();
            let (_, n, _) = m.loss(&mut g, &fixed).unwrap();
            g.scalar(n)
        };
        let initial = nll(&model);
        for _ in 0..300 {
            let batch: Vec<_> = buf
                .sample_windows(8, 5, 1.0, &mut r)
                .unwrap()
                .into_iter()
                .map(|w| w.seq)
                .collect();
            model.train_step(&batch).unwrap();
        }
        let after = nll(&model);
        assert!(after < initial, "seed {seed}: {initial} -> {after}");
    }
}

#[test]
fn entropy_bonus_raises_log_std() {
    for seed in 0..5 {
        let buf = fixture_buffer(100 + seed);
        let run = |coef: f64| {
            let cfg = OdtConfig {
                entropy_coef: coef,
                ..small_cfg()
            };
            let mut model = Transformer::new(cfg, 2, 1, &mut rng::stream(seed, &[])).unwrap();
            let mut r = rng::stream(seed, &[3]);
            let mut last = 0.0;
            for _ in 0..200 {
                let batch: Vec<_> = buf
                    .sample_windows(8, 5, 1.0, &mut r)
                    .unwrap()
                    .into_iter()
                    .map(|w| w.seq)
                    .collect();
                last = model.train_step(&batch).unwrap().entropy;
            }
            last
        };
        let (low, high) = (run(0.0), run(10.0));
        assert!(high > low, "seed {seed}: {low} vs {high}");
    }
}

/// Emits a fixed reward script and then terminates.
struct Scripted {
    spec: EnvSpec,
    rewards: Vec<f64>,
    t: usize,
    counters: EnvCounters,
}

impl Scripted {
    fn new(rewards: Vec<f64>) -> Self {
        Self {
            spec: EnvSpec {
                obs_dim: 2,
                act_dim: 1,
                act_low: vec![-1.0],
                act_high: vec![1.0],
                max_episode_steps: 50,
            },
            rewards,
            t: 0,
            counters: EnvCounters::default(),
        }
    }
}

impl Env for Scripted {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }
    fn reset(&mut self, _seed: u64) -> Vec<f64> {
        self.t = 0;
        self.counters.resets += 1;
        vec![0.0, 0.0]
    }
    fn step(&mut self, action: &[f64]) -> dodt_core::Result<StepResult> {
        self.counters.steps += 1;
        let r = self.rewards[self.t];
        self.t += 1;
        Ok(StepResult {
            observation: vec![self.t as f64 * 0.1, action[0]],
            reward: r,
            terminated: self.t == self.rewards.len(),
            truncated: false,
        })
    }
    fn counters(&self) -> EnvCounters {
        self.counters
    }
    fn name(&self) -> EnvName {
        EnvName::Chain
    }
}

#[test]
fn rtg_bookkeeping() {
    let model = Transformer::new(small_cfg(), 2, 1, &mut rng::stream(6, &[])).unwrap();
    let mut env = Scripted::new(vec![1.0, 2.0]);
    let ro = rollout_online(
        &mut env,
        &model,
        10.0,
        ActMode::Explore,
        0,
        &mut rng::stream(0, &[]),
    )
    .unwrap();
    assert_eq!(ro.rtg, vec![10.0, 9.0, 7.0]);
    let mut env = Scripted::new(vec![0.0; 12]);
    let ro = rollout_online(
        &mut env,
        &model,
        3.5,
        ActMode::Eval,
        0,
        &mut rng::stream(0, &[]),
    )
    .unwrap();
    assert!(ro.rtg.iter().all(|&g| g == 3.5));
    assert_eq!(ro.trajectory.source, Source::Odt);
}

#[test]
fn rtg_identity_holds_along_pendulum_rollouts() {
    let mut r = rng::stream(7, &[]);
    let model = Transformer::new(small_cfg(), 3, 1, &mut r).unwrap();
    let mut env = EnvName::Pendulum.make();
    let ro = rollout_online(env.as_mut(), &model, -150.0, ActMode::Explore, 3, &mut r).unwrap();
    for t in 0..ro.trajectory.len() {
        let (g, r) = (ro.rtg[t], ro.trajectory.rewards()[t]);
        let resid = ro.rtg[t + 1] + r - g;
        assert!(
            resid.abs() <= 2.0 * f64::EPSILON * g.abs().max(r.abs()),
            "step {t}: {resid}"
        );
    }
}

#[test]
fn evaluation_is_reproducible_and_counts_episodes() {
    let model = Transformer::new(small_cfg(), 5, 1, &mut rng::stream(8, &[])).unwrap();
    let mut env = EnvName::Chain.make();
    let res = evaluate(env.as_mut(), &model, 1.0, 5, 42).unwrap();
    assert_eq!(env.counters().resets, 5);
    assert_eq!(res.returns.len(), 5);
    assert_eq!(res.std, 0.0);
    assert_eq!(res.mean, res.returns.iter().sum::<f64>() / 5.0);
    let mut env2 = EnvName::Pendulum.make();
    let model = Transformer::new(small_cfg(), 3, 1, &mut rng::stream(8, &[])).unwrap();
    let a = evaluate(env2.as_mut(), &model, -100.0, 2, 1).unwrap();
    let b = evaluate(env2.as_mut(), &model, -100.0, 2, 1).unwrap();
    assert_eq!(a, b);
}
