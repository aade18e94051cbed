//! Central finite-difference gradient checks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{Graph, OpKind, ParamStore, Result, Tensor, Var};

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(1.0)
}

fn eval_at<F>(f: &F, x: &Tensor, fault: Option<OpKind>) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    g.inject_fault(fault);
    let xv = g.constant(x);
    let y = f(&mut g, xv)?;
    Ok(g.scalar(y))
}

fn check_coords<F>(
    f: &F,
    x: &Tensor,
    h: f64,
    coords: Option<&[usize]>,
    fault: Option<OpKind>,
) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    g.inject_fault(fault);
    let xv = g.leaf(&x.clone().requires_grad(true));
    let y = f(&mut g, xv)?;
    let grads = g.backward(y)?;
    let analytic = grads
        .get(xv)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; x.numel()]);
    let all: Vec<usize> = (0..x.numel()).collect();
    let coords = coords.unwrap_or(&all);
    let mut worst = 0.0f64;
    let mut probe = x.clone();
    for &i in coords {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = eval_at(f, &probe, None)?;
        probe.data_mut()[i] = orig - h;
        let down = eval_at(f, &probe, None)?;
        probe.data_mut()[i] = orig;
        worst = worst.max(rel_err(analytic[i], (up - down) / (2.0 * h)));
    }
    Ok(worst)
}

/// Largest `|analytic - numeric| / max(1, |analytic|)` over all coordinates of
/// `x`, comparing reverse-mode gradients of the scalar `f` against central
/// differences with step `h`.
pub fn finite_diff_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    check_coords(&f, x, h, None, None)
}

/// Same as [`finite_diff_check`] but with the local derivative of `fault`
/// deliberately corrupted in the analytic pass.
#[doc(hidden)]
pub fn finite_diff_check_faulty<F>(f: F, x: &Tensor, h: f64, fault: Option<OpKind>) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    check_coords(&f, x, h, None, fault)
}

/// Worst relative error of the gradient of `loss` with respect to the tensors
/// in `store`, probing at most `per_tensor` randomly chosen coordinates of each
/// tensor. `loss` must be deterministic for a fixed store.
pub fn check_params<F, E>(
    loss: F,
    store: &mut ParamStore,
    h: f64,
    per_tensor: usize,
    seed: u64,
) -> std::result::Result<(f64, String), E>
where
    F: Fn(&mut Graph, &ParamStore) -> std::result::Result<Var, E>,
    E: From<crate::Error>,
{
    let mut g = Graph::new();
    let y = loss(&mut g, store)?;
    let grads = g.backward(y)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = (0.0f64, String::new());
    for i in 0..store.len() {
        let n = store.get(i).numel();
        let analytic = grads
            .param(store.param_ref(i))
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; n]);
        let coords: Vec<usize> = if n <= per_tensor {
            (0..n).collect()
        } else {
            (0..per_tensor).map(|_| rng.gen_range(0..n)).collect()
        };
        for j in coords {
            let orig = store.get(i).data()[j];
            let eval = |v: f64, store: &mut ParamStore| -> std::result::Result<f64, E> {
                store.get_mut(i).data_mut()[j] = v;
                let mut g = Graph::new();
                let y = loss(&mut g, store)?;
                Ok(g.scalar(y))
            };
            let up = eval(orig + h, store)?;
            let down = eval(orig - h, store)?;
            store.get_mut(i).data_mut()[j] = orig;
            let e = rel_err(analytic[j], (up - down) / (2.0 * h));
            if e > worst.0 || worst.1.is_empty() {
                worst = (e.max(worst.0), store.name(i).to_string());
            }
        }
    }
    Ok(worst)
}

/// Outcome of checking one op kind over many random shapes.
#[derive(Clone, Debug)]
pub struct OpCheck {
    pub kind: OpKind,
    pub trials: usize,
    pub worst: f64,
    /// Operand shapes of the worst trial.
    pub worst_shapes: Vec<Vec<usize>>,
}

fn random_shape<R: Rng>(rng: &mut R, min_last: usize) -> Vec<usize> {
    let rank = rng.gen_range(1..=3);
    let mut s: Vec<usize> = (0..rank).map(|_| rng.gen_range(1..=4)).collect();
    let last = s.last_mut().unwrap();
    *last = (*last).max(min_last);
    s
}

fn random_tensor<R: Rng>(rng: &mut R, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.gen_range(lo..hi)).collect(),
    )
    .unwrap()
}

/// Values in `±[gap, hi)`, keeping away from kinks at zero.
fn away_from_zero<R: Rng>(rng: &mut R, shape: &[usize], gap: f64, hi: f64) -> Tensor {
    let mut t = random_tensor(rng, shape, gap, hi);
    for v in t.data_mut() {
        if rng.gen_bool(0.5) {
            *v = -*v;
        }
    }
    t
}

/// Builds `sum(out ⊙ w)` for a fixed random `w`, so that no gradient vanishes
/// by symmetry.
fn weighted_sum(g: &mut Graph, out: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = g.shape(out).to_vec();
    let w = random_tensor(&mut rng, &shape, -1.0, 1.0);
    let w = g.constant(&w);
    let p = g.mul(out, w)?;
    Ok(g.sum(p))
}

type Trial = (
    Tensor,
    Vec<Vec<usize>>,
    Box<dyn Fn(&mut Graph, Var) -> Result<Var>>,
);

fn binary_trial(kind: OpKind, rng: &mut ChaCha8Rng) -> Trial {
    let big = random_shape(rng, 1);
    let small = if rng.gen_bool(0.5) {
        big.clone()
    } else {
        big[rng.gen_range(0..big.len())..].to_vec()
    };
    let (mut sa, mut sb) = (big, small);
    if rng.gen_bool(0.5) {
        std::mem::swap(&mut sa, &mut sb);
    }
    let a = random_tensor(rng, &sa, -2.0, 2.0);
    let b = if kind == OpKind::Div {
        away_from_zero(rng, &sb, 0.5, 2.0)
    } else {
        random_tensor(rng, &sb, -2.0, 2.0)
    };
    let wrt_first = rng.gen_bool(0.5);
    let seed = rng.gen();
    let apply = move |g: &mut Graph, x: Var, y: Var| match kind {
        OpKind::Add => g.add(x, y),
        OpKind::Sub => g.sub(x, y),
        OpKind::Mul => g.mul(x, y),
        _ => g.div(x, y),
    };
    let shapes = vec![sa, sb];
    if wrt_first {
        let other = b;
        (
            a,
            shapes,
            Box::new(move |g: &mut Graph, x: Var| {
                let y = g.constant(&other);
                let out = apply(g, x, y)?;
                weighted_sum(g, out, seed)
            }),
        )
    } else {
        let other = a;
        (
            b,
            shapes,
            Box::new(move |g: &mut Graph, x: Var| {
                let y = g.constant(&other);
                let out = apply(g, y, x)?;
                weighted_sum(g, out, seed)
            }),
        )
    }
}

fn unary_trial(kind: OpKind, rng: &mut ChaCha8Rng) -> Trial {
    let min_last = if matches!(kind, OpKind::Softmax | OpKind::LayerNorm) {
        2
    } else {
        1
    };
    let shape = random_shape(rng, min_last);
    let x = match kind {
        OpKind::Log => random_tensor(rng, &shape, 0.2, 3.0),
        OpKind::Relu | OpKind::ClampMin => away_from_zero(rng, &shape, 0.05, 2.0),
        _ => random_tensor(rng, &shape, -2.0, 2.0),
    };
    let c: f64 = rng.gen_range(-2.0..2.0);
    let seed = rng.gen();
    let f = move |g: &mut Graph, x: Var| -> Result<Var> {
        let out = match kind {
            OpKind::Tanh => g.tanh(x),
            OpKind::Relu => g.relu(x),
            OpKind::Sigmoid => g.sigmoid(x),
            OpKind::Softplus => g.softplus(x),
            OpKind::Exp => g.exp(x),
            OpKind::Log => g.log(x),
            OpKind::Neg => g.neg(x),
            OpKind::Scale => g.scale(x, c),
            OpKind::AddScalar => g.add_scalar(x, c),
            OpKind::ClampMin => g.clamp_min(x, 0.0),
            OpKind::Square => g.square(x),
            OpKind::Softmax => g.softmax(x),
            OpKind::LayerNorm => g.layer_norm(x),
            OpKind::SumLast => g.sum_last(x),
            OpKind::Sum => g.sum(x),
            OpKind::Mean => g.mean(x),
            _ => unreachable!(),
        };
        weighted_sum(g, out, seed)
    };
    (x, vec![shape], Box::new(f))
}

fn make_trial(kind: OpKind, rng: &mut ChaCha8Rng) -> Trial {
    let seed: u64 = rng.gen();
    match kind {
        OpKind::Add | OpKind::Sub | OpKind::Mul | OpKind::Div => binary_trial(kind, rng),
        OpKind::MatMul => {
            let (m, k, n, bsz) = (
                rng.gen_range(1..=4),
                rng.gen_range(1..=4),
                rng.gen_range(1..=4),
                rng.gen_range(1..=3),
            );
            let (sa, sb) = match rng.gen_range(0..3) {
                0 => (vec![m, k], vec![k, n]),
                1 => (vec![bsz, m, k], vec![k, n]),
                _ => (vec![bsz, m, k], vec![bsz, k, n]),
            };
            let a = random_tensor(rng, &sa, -1.0, 1.0);
            let b = random_tensor(rng, &sb, -1.0, 1.0);
            let shapes = vec![sa, sb];
            if rng.gen_bool(0.5) {
                (
                    a,
                    shapes,
                    Box::new(move |g: &mut Graph, x: Var| {
                        let y = g.constant(&b);
                        let out = g.matmul(x, y)?;
                        weighted_sum(g, out, seed)
                    }),
                )
            } else {
                (
                    b,
                    shapes,
                    Box::new(move |g: &mut Graph, x: Var| {
                        let y = g.constant(&a);
                        let out = g.matmul(y, x)?;
                        weighted_sum(g, out, seed)
                    }),
                )
            }
        }
        OpKind::GatherRows => {
            let (rows, w) = (rng.gen_range(1..=5), rng.gen_range(1..=4));
            let idx: Vec<usize> = (0..rng.gen_range(1..=6))
                .map(|_| rng.gen_range(0..rows))
                .collect();
            let table = random_tensor(rng, &[rows, w], -1.0, 1.0);
            (
                table,
                vec![vec![rows, w], vec![idx.len()]],
                Box::new(move |g: &mut Graph, x: Var| {
                    let out = g.gather_rows(x, &idx)?;
                    weighted_sum(g, out, seed)
                }),
            )
        }
        OpKind::Concat => {
            let shape = random_shape(rng, 1);
            let mut left = shape.clone();
            *left.last_mut().unwrap() = rng.gen_range(1..=3);
            let mut right = shape.clone();
            *right.last_mut().unwrap() = rng.gen_range(1..=3);
            let l = random_tensor(rng, &left, -1.0, 1.0);
            let r = random_tensor(rng, &right, -1.0, 1.0);
            let x = random_tensor(rng, &shape, -1.0, 1.0);
            (
                x,
                vec![left, shape, right],
                Box::new(move |g: &mut Graph, x: Var| {
                    let (lv, rv) = (g.constant(&l), g.constant(&r));
                    let out = g.concat(&[lv, x, rv])?;
                    weighted_sum(g, out, seed)
                }),
            )
        }
        OpKind::Slice => {
            let shape = random_shape(rng, 2);
            let w = *shape.last().unwrap();
            let start = rng.gen_range(0..w);
            let len = rng.gen_range(1..=w - start);
            let x = random_tensor(rng, &shape, -1.0, 1.0);
            (
                x,
                vec![shape],
                Box::new(move |g: &mut Graph, x: Var| {
                    let out = g.slice(x, start, len)?;
                    weighted_sum(g, out, seed)
                }),
            )
        }
        OpKind::Reshape => {
            let shape = random_shape(rng, 1);
            let n: usize = shape.iter().product();
            let target: Vec<usize> = if rng.gen_bool(0.5) {
                vec![n]
            } else {
                shape.iter().rev().copied().collect()
            };
            let x = random_tensor(rng, &shape, -1.0, 1.0);
            (
                x,
                vec![shape, target.clone()],
                Box::new(move |g: &mut Graph, x: Var| {
                    let out = g.reshape(x, &target)?;
                    weighted_sum(g, out, seed)
                }),
            )
        }
        OpKind::Transpose => {
            let mut shape = random_shape(rng, 1);
            if shape.len() == 1 {
                shape.insert(0, rng.gen_range(1..=4));
            }
            let x = random_tensor(rng, &shape, -1.0, 1.0);
            (
                x,
                vec![shape],
                Box::new(move |g: &mut Graph, x: Var| {
                    let out = g.transpose(x)?;
                    weighted_sum(g, out, seed)
                }),
            )
        }
        OpKind::Leaf => unreachable!("leaves have no local derivative"),
        _ => unary_trial(kind, rng),
    }
}

/// Checks every op kind on `trials` seeded random shapes each.
pub fn op_suite(seed: u64, trials: usize, h: f64, fault: Option<OpKind>) -> Result<Vec<OpCheck>> {
    let mut out = Vec::with_capacity(OpKind::ALL.len());
    for (ki, &kind) in OpKind::ALL.iter().enumerate() {
        let mut rng =
            ChaCha8Rng::seed_from_u64(seed.wrapping_mul(1_000_003).wrapping_add(ki as u64));
        let mut report = OpCheck {
            kind,
            trials,
            worst: 0.0,
            worst_shapes: Vec::new(),
        };
        for _ in 0..trials {
            let (x, shapes, f) = make_trial(kind, &mut rng);
            let err = check_coords(&f, &x, h, None, fault)?;
            if err >= report.worst {
                report.worst = err;
                report.worst_shapes = shapes;
            }
        }
        out.push(report);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_sum_matches_analytic() {
        let x = Tensor::vector(&[1.0, 2.0, 3.0]);
        let err = finite_diff_check(
            |g, x| {
                let sq = g.mul(x, x)?;
                Ok(g.sum(sq))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-6, "err = {err:e}");
    }

    #[test]
    fn constant_function_has_zero_error() {
        let x = Tensor::vector(&[0.3, -0.7]);
        let err = finite_diff_check(|g, _| Ok(g.constant(&Tensor::scalar(4.0))), &x, 1e-5).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn tanh_sum_seed0() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = random_tensor(&mut rng, &[8], -2.0, 2.0);
        let err = finite_diff_check(
            |g, x| {
                let t = g.tanh(x);
                Ok(g.sum(t))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-4, "err = {err:e}");
    }

    #[test]
    fn every_op_passes_on_twenty_shapes() {
        for r in op_suite(0, 20, 1e-5, None).unwrap() {
            assert!(
                r.worst <= 1e-4,
                "{}: {:e} at {:?}",
                r.kind,
                r.worst,
                r.worst_shapes
            );
        }
    }

    #[test]
    fn corrupted_derivative_is_caught() {
        let report = op_suite(0, 5, 1e-5, Some(OpKind::Tanh)).unwrap();
        for r in report {
            if r.kind == OpKind::Tanh {
                assert!(r.worst > 1e-2);
            } else {
                assert!(r.worst <= 1e-4);
            }
        }
    }
}
