//! Layers and helpers shared by the learners, built on the autodiff tape.

use dodt_autodiff::{AdamState, Gradients, Graph, ParamStore, Tensor, Var};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::Result;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Relu,
}

impl Activation {
    fn apply(self, g: &mut Graph, x: Var) -> Var {
        match self {
            Activation::Tanh => g.tanh(x),
            Activation::Relu => g.relu(x),
        }
    }
}

/// Affine map `x W + b` acting on the last axis.
#[derive(Clone, Debug)]
pub struct Linear {
    w: usize,
    b: usize,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    /// Glorot-uniform weights, zero bias.
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Self {
        let bound = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let w = store.add(
            format!("{name}.w"),
            Tensor::uniform(&[in_dim, out_dim], bound, rng),
        );
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[out_dim]));
        Self {
            w,
            b,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        let y = g.matmul(x, w)?;
        Ok(g.add(y, b)?)
    }
}

/// Stack of linear layers with an activation after every layer but the last.
#[derive(Clone, Debug)]
pub struct Mlp {
    layers: Vec<Linear>,
    act: Activation,
}

impl Mlp {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        dims: &[usize],
        act: Activation,
        rng: &mut R,
    ) -> Self {
        assert!(dims.len() >= 2, "an MLP needs input and output sizes");
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, d)| Linear::new(store, &format!("{name}.{i}"), d[0], d[1], rng))
            .collect();
        Self { layers, act }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, mut x: Var) -> Result<Var> {
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(g, store, x)?;
            if i < last {
                x = self.act.apply(g, x);
            }
        }
        Ok(x)
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().unwrap().out_dim
    }
}

/// Layer normalization over the last axis with learned gain and bias.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    gain: usize,
    bias: usize,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        let gain = store.add(format!("{name}.gain"), Tensor::full(&[dim], 1.0));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[dim]));
        Self { gain, bias }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let n = g.layer_norm(x);
        let gain = g.param(store, self.gain);
        let bias = g.param(store, self.bias);
        let y = g.mul(n, gain)?;
        Ok(g.add(y, bias)?)
    }
}

/// Adds the store's share of `grads`, treats untouched tensors as having zero
/// gradient, clips the global norm when `clip > 0` and takes one optimizer
/// step. Returns the gradient norm before clipping.
pub fn apply_grads(
    store: &mut ParamStore,
    opt: &mut AdamState,
    grads: &Gradients,
    clip: f64,
) -> Result<f64> {
    store.accumulate(grads);
    for i in 0..store.len() {
        if store.get(i).grad().is_none() {
            let zeros = vec![0.0; store.get(i).numel()];
            store.get_mut(i).accumulate_grad(&zeros);
        }
    }
    let norm = if clip > 0.0 {
        store.clip_grad_norm(clip)
    } else {
        store.grad_norm()
    };
    if !norm.is_finite() {
        store.zero_grads();
        return Err(crate::Error::NonFinite("gradient"));
    }
    opt.step(store)?;
    Ok(norm)
}

pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

/// Elementwise KL divergence between diagonal Gaussians `q` and `p`, summed
/// over the last axis.
pub fn gaussian_kl(g: &mut Graph, q_mean: Var, q_std: Var, p_mean: Var, p_std: Var) -> Result<Var> {
    let ratio = g.div(q_std, p_std)?;
    let ratio_sq = g.square(ratio);
    let diff = g.sub(q_mean, p_mean)?;
    let scaled = g.div(diff, p_std)?;
    let maha = g.square(scaled);
    let log_ratio = g.log(ratio);
    let a = g.add(ratio_sq, maha)?;
    let a = g.add_scalar(a, -1.0);
    let a = g.scale(a, 0.5);
    let kl = g.sub(a, log_ratio)?;
    Ok(g.sum_last(kl))
}

/// Closed-form value of [`gaussian_kl`] for one pair of distributions.
pub fn gaussian_kl_value(q_mean: &[f64], q_std: &[f64], p_mean: &[f64], p_std: &[f64]) -> f64 {
    (0..q_mean.len())
        .map(|i| {
            let r = q_std[i] / p_std[i];
            let d = (q_mean[i] - p_mean[i]) / p_std[i];
            0.5 * (r * r + d * d - 1.0) - r.ln()
        })
        .sum()
}

/// Rows of a `[rows, cols]` slice as owned vectors.
pub fn rows(data: &[f64], cols: usize) -> Vec<Vec<f64>> {
    data.chunks(cols).map(<[f64]>::to_vec).collect()
}
