//! Parameterized layers shared by the model components.

use rand::Rng;

use crate::error::Result;
use crate::numerics::{attention, trunc_normal, Graph, ParamGroup, ParamId, ParamStore, Scalar, Tensor, Var};

pub const INIT_STD: f64 = 0.02;
pub const NORM_EPS: f64 = 1e-5;

/// `y = x W + b` with `W:[in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        inp: usize,
        out: usize,
        bias: bool,
        group: ParamGroup,
        rng: &mut R,
    ) -> Self {
        let w = store.add(format!("{name}.weight"), trunc_normal(vec![inp, out], INIT_STD, rng), group);
        let b = bias.then(|| store.add_no_decay(format!("{name}.bias"), Tensor::zeros(vec![out]), group));
        Self { w, b }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let w = g.param(self.w);
        let b = self.b.map(|b| g.param(b));
        g.linear(x, w, b)
    }
}

/// Layer normalization over the last axis.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, n: usize, group: ParamGroup) -> Self {
        Self {
            gamma: store.add_no_decay(format!("{name}.gamma"), Tensor::full(vec![n], 1.0), group),
            beta: store.add_no_decay(format!("{name}.beta"), Tensor::zeros(vec![n]), group),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        g.layer_norm(x, gamma, beta, NORM_EPS)
    }
}

/// Group normalization of `[C, ...]` with per-channel affine.
#[derive(Clone, Debug)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
}

impl GroupNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, groups: usize, group: ParamGroup) -> Self {
        Self {
            gamma: store.add_no_decay(format!("{name}.gamma"), Tensor::full(vec![channels], 1.0), group),
            beta: store.add_no_decay(format!("{name}.beta"), Tensor::zeros(vec![channels]), group),
            groups,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        g.group_norm(x, self.groups, gamma, beta, NORM_EPS)
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        group: ParamGroup,
        rng: &mut R,
    ) -> Self {
        Self::with_std(store, name, [cin, cout, k], stride, pad, INIT_STD, group, rng)
    }

    /// Weights drawn with standard deviation `std`; `shape` is `[cin, cout, k]`.
    #[allow(clippy::too_many_arguments)]
    pub fn with_std<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        shape: [usize; 3],
        stride: usize,
        pad: usize,
        std: f64,
        group: ParamGroup,
        rng: &mut R,
    ) -> Self {
        let [cin, cout, k] = shape;
        Self {
            w: store.add(format!("{name}.weight"), trunc_normal(vec![cout, cin, k, k], std, rng), group),
            b: store.add_no_decay(format!("{name}.bias"), Tensor::zeros(vec![cout]), group),
            stride,
            pad,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let w = g.param(self.w);
        let b = g.param(self.b);
        g.conv2d(x, w, Some(b), self.stride, self.pad)
    }
}

/// Depthwise 1-D convolution followed by a pointwise channel mix on `[C, L]`.
///
/// Initialized close to the identity mapping. Borders are padded by edge
/// replication, so a constant line maps to a constant line.
#[derive(Clone, Debug)]
pub struct SeparableConv1d {
    pub depthwise: ParamId,
    pub pointwise: ParamId,
    pub bias: ParamId,
    pub pad: usize,
}

impl SeparableConv1d {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        kernel: usize,
        group: ParamGroup,
        rng: &mut R,
    ) -> Self {
        let mut dw = trunc_normal(vec![channels, kernel], INIT_STD, rng);
        for c in 0..channels {
            dw.data_mut()[c * kernel + kernel / 2] += 1.0;
        }
        let mut pw = trunc_normal(vec![channels, channels], INIT_STD, rng);
        for c in 0..channels {
            pw.data_mut()[c * channels + c] += 1.0;
        }
        Self {
            depthwise: store.add(format!("{name}.depthwise"), dw, group),
            pointwise: store.add(format!("{name}.pointwise"), pw, group),
            bias: store.add_no_decay(format!("{name}.bias"), Tensor::zeros(vec![channels, 1]), group),
            pad: kernel / 2,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let dw = g.param(self.depthwise);
        let pw = g.param(self.pointwise);
        let b = g.param(self.bias);
        let x = if self.pad > 0 {
            let len = g.shape(x)[1];
            let first = g.slice(x, 1, 0, 1)?;
            let last = g.slice(x, 1, len - 1, 1)?;
            let mut parts = vec![first; self.pad];
            parts.push(x);
            parts.extend(std::iter::repeat_n(last, self.pad));
            g.concat(&parts, 1)?
        } else {
            x
        };
        let y = g.depthwise_conv1d(x, dw, 0)?;
        let y = g.matmul(pw, y)?;
        g.add(y, b)
    }
}

/// Multi-head attention on token matrices `[N, D]`.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        group: ParamGroup,
        rng: &mut R,
    ) -> Self {
        Self {
            q: Linear::new(store, &format!("{name}.q"), dim, dim, true, group, rng),
            k: Linear::new(store, &format!("{name}.k"), dim, dim, true, group, rng),
            v: Linear::new(store, &format!("{name}.v"), dim, dim, true, group, rng),
            o: Linear::new(store, &format!("{name}.o"), dim, dim, true, group, rng),
            heads,
        }
    }

    /// Queries from `xq:[N, D]`, keys and values from `xkv:[M, D]`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, xq: Var, xkv: Var) -> Result<Var> {
        let q = self.q.forward(g, xq)?;
        let k = self.k.forward(g, xkv)?;
        let v = self.v.forward(g, xkv)?;
        let (q, k, v) = (self.split(g, q)?, self.split(g, k)?, self.split(g, v)?);
        let y = attention(g, q, k, v)?;
        let y = g.permute(y, &[1, 0, 2])?;
        let n = g.shape(y)[0];
        let d = g.shape(y)[1] * g.shape(y)[2];
        let y = g.reshape(y, vec![n, d])?;
        self.o.forward(g, y)
    }

    fn split<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let (n, d) = (g.shape(x)[0], g.shape(x)[1]);
        let x = g.reshape(x, vec![n, self.heads, d / self.heads])?;
        g.permute(x, &[1, 0, 2])
    }
}

#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, dim: usize, hidden: usize, group: ParamGroup, rng: &mut R) -> Self {
        Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), dim, hidden, true, group, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, dim, true, group, rng),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, x)?;
        let h = g.gelu(h);
        self.fc2.forward(g, h)
    }
}

/// `[N, D]` tokens to a `[D, H, W]` grid.
pub fn tokens_to_grid<T: Scalar>(g: &mut Graph<'_, T>, tokens: Var, h: usize, w: usize) -> Result<Var> {
    let d = g.shape(tokens)[1];
    let t = g.transpose(tokens)?;
    g.reshape(t, vec![d, h, w])
}

/// `[D, H, W]` grid to `[H*W, D]` tokens.
pub fn grid_to_tokens<T: Scalar>(g: &mut Graph<'_, T>, grid: Var) -> Result<Var> {
    let s = g.shape(grid).to_vec();
    let flat = g.reshape(grid, vec![s[0], s[1] * s[2]])?;
    g.transpose(flat)
}
