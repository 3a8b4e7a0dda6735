//! Compression of a target feature map into gate tokens and reconstruction
//! of a target feature from tokens plus the template feature.

use rand::Rng;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{Conv2d, GroupNorm, SeparableConv1d};
use crate::numerics::{attention, Graph, ParamGroup, ParamStore, Scalar, Var};

/// Where a history entry came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TokenSource {
    Compressed,
    Inferred,
    Init,
}

impl TokenSource {
    pub fn as_str(self) -> &'static str {
        match self {
            TokenSource::Compressed => "compressed",
            TokenSource::Inferred => "inferred",
            TokenSource::Init => "init",
        }
    }
}

impl std::str::FromStr for TokenSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "compressed" => Ok(Self::Compressed),
            "inferred" => Ok(Self::Inferred),
            "init" => Ok(Self::Init),
            other => Err(Error::Contract(format!("unknown token source `{other}`"))),
        }
    }
}

/// One frame's compressed target state.
#[derive(Clone, Debug, PartialEq)]
pub struct StateTokenPair {
    /// Width gate followed by height gate.
    pub spatial: Vec<f32>,
    pub channel: Vec<f32>,
    pub frame_index: usize,
    pub source: TokenSource,
}

/// Channel pooling window of the channel branch.
const CHANNEL_POOL: usize = 4;
const SPATIAL_NORM_GROUPS: usize = 4;

#[derive(Clone, Debug)]
pub struct StateCodec {
    channel_norm: GroupNorm,
    q: SeparableConv1d,
    k: SeparableConv1d,
    v: SeparableConv1d,
    width_convs: Vec<SeparableConv1d>,
    height_convs: Vec<SeparableConv1d>,
    width_norm: GroupNorm,
    height_norm: GroupNorm,
    fuse1: Conv2d,
    fuse3: Conv2d,
    fuse5: Conv2d,
    project: Conv2d,
    pub dim: usize,
    pub grid: usize,
    pub groups: usize,
}

impl StateCodec {
    pub fn new<R: Rng>(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut R) -> Self {
        let d = cfg.dim;
        let grp = ParamGroup::Head;
        let groups = cfg.spatial_groups;
        let per = d / groups;
        let convs = |store: &mut ParamStore, axis: &str, rng: &mut R| -> Vec<SeparableConv1d> {
            (0..groups)
                .map(|i| SeparableConv1d::new(store, &format!("codec.{axis}_conv{i}"), per, 3, grp, rng))
                .collect()
        };
        let width_convs = convs(store, "width", rng);
        let height_convs = convs(store, "height", rng);
        Self {
            channel_norm: GroupNorm::new(store, "codec.channel_norm", d, 1, grp),
            q: SeparableConv1d::new(store, "codec.q", d, 1, grp, rng),
            k: SeparableConv1d::new(store, "codec.k", d, 1, grp, rng),
            v: SeparableConv1d::new(store, "codec.v", d, 1, grp, rng),
            width_convs,
            height_convs,
            width_norm: GroupNorm::new(store, "codec.width_norm", d, SPATIAL_NORM_GROUPS, grp),
            height_norm: GroupNorm::new(store, "codec.height_norm", d, SPATIAL_NORM_GROUPS, grp),
            fuse1: Conv2d::new(store, "codec.fuse1", 2 * d, d, 1, 1, 0, grp, rng),
            fuse3: Conv2d::new(store, "codec.fuse3", 2 * d, d, 3, 1, 1, grp, rng),
            fuse5: Conv2d::new(store, "codec.fuse5", 2 * d, d, 5, 1, 2, grp, rng),
            project: Conv2d::new(store, "codec.project", d, d, 1, 1, 0, grp, rng),
            dim: d,
            grid: cfg.template_size / crate::encoder::PATCH_STRIDE,
            groups,
        }
    }

    pub fn spatial_len(&self) -> usize {
        2 * self.grid
    }

    fn check_map<T: Scalar>(&self, g: &Graph<'_, T>, f: Var) -> Result<()> {
        let s = g.shape(f);
        if s.len() != 3 || s[0] != self.dim {
            return Err(Error::dim("state_codec", &[self.dim, self.grid, self.grid], s));
        }
        Ok(())
    }

    /// Channel gate `[D]` from a target feature `[D, H, W]`.
    pub fn compress_channel<T: Scalar>(&self, g: &mut Graph<'_, T>, f: Var) -> Result<Var> {
        self.check_map(g, f)?;
        let s = g.shape(f).to_vec();
        let (d, h, w) = (s[0], s[1], s[2]);
        let pooled = if h >= CHANNEL_POOL && w >= CHANNEL_POOL && h % CHANNEL_POOL == 0 && w % CHANNEL_POOL == 0 {
            g.avg_pool2d(f, CHANNEL_POOL)?
        } else {
            let a = g.mean_axis(f, 2)?;
            g.mean_axis(a, 1)?
        };
        let pooled = self.channel_norm.forward(g, pooled)?;
        let n = g.shape(pooled)[1] * g.shape(pooled)[2];
        let x = g.reshape(pooled, vec![d, n])?;
        let q = self.q.forward(g, x)?;
        let k = self.k.forward(g, x)?;
        let v = self.v.forward(g, x)?;
        let q = g.reshape(q, vec![1, d, n])?;
        let k = g.reshape(k, vec![1, d, n])?;
        let v = g.reshape(v, vec![1, d, n])?;
        let focused = attention(g, q, k, v)?;
        let pooled = g.mean_axis(focused, 2)?;
        let gate = g.sigmoid(pooled);
        g.reshape(gate, vec![d])
    }

    fn axis_gate<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        lines: Var,
        convs: &[SeparableConv1d],
        norm: &GroupNorm,
    ) -> Result<Var> {
        let per = self.dim / self.groups;
        let parts = convs
            .iter()
            .enumerate()
            .map(|(i, conv)| {
                let chunk = g.slice(lines, 0, i * per, per)?;
                conv.forward(g, chunk)
            })
            .collect::<Result<Vec<_>>>()?;
        let joined = g.concat(&parts, 0)?;
        let normed = norm.forward(g, joined)?;
        let reduced = g.mean_axis(normed, 0)?;
        let gate = g.sigmoid(reduced);
        let len = g.shape(gate)[1];
        g.reshape(gate, vec![len])
    }

    /// Width gate `[W]` followed by height gate `[H]`.
    pub fn compress_spatial<T: Scalar>(&self, g: &mut Graph<'_, T>, f: Var) -> Result<Var> {
        self.check_map(g, f)?;
        let s = g.shape(f).to_vec();
        let (d, h, w) = (s[0], s[1], s[2]);
        let cols = g.mean_axis(f, 1)?;
        let cols = g.reshape(cols, vec![d, w])?;
        let rows = g.mean_axis(f, 2)?;
        let rows = g.reshape(rows, vec![d, h])?;
        let wg = self.axis_gate(g, cols, &self.width_convs, &self.width_norm)?;
        let hg = self.axis_gate(g, rows, &self.height_convs, &self.height_norm)?;
        g.concat(&[wg, hg], 0)
    }

    /// `(spatial, channel)` tokens of a target feature map.
    pub fn compress<T: Scalar>(&self, g: &mut Graph<'_, T>, f: Var) -> Result<(Var, Var)> {
        Ok((self.compress_spatial(g, f)?, self.compress_channel(g, f)?))
    }

    /// Predicted target feature `[D, H, W]` from tokens and the template
    /// feature `f_z:[D, H, W]`.
    pub fn reconstruct<T: Scalar>(&self, g: &mut Graph<'_, T>, s_hat: Var, c_hat: Var, f_z: Var) -> Result<Var> {
        self.check_map(g, f_z)?;
        let s = g.shape(f_z).to_vec();
        let (d, h, w) = (s[0], s[1], s[2]);
        if g.shape(s_hat) != [w + h] || g.shape(c_hat) != [d] {
            return Err(Error::dim("reconstruct", &[w + h, d], &[g.shape(s_hat)[0], g.shape(c_hat)[0]]));
        }
        let wg = g.slice(s_hat, 0, 0, w)?;
        let wg = g.reshape(wg, vec![1, 1, w])?;
        let hg = g.slice(s_hat, 0, w, h)?;
        let hg = g.reshape(hg, vec![1, h, 1])?;
        let spatial = g.mul(hg, wg)?;
        let channel = g.reshape(c_hat, vec![d, 1, 1])?;
        let state = g.add(channel, spatial)?;
        let x = g.concat(&[state, f_z], 0)?;
        let a = self.fuse1.forward(g, x)?;
        let b = self.fuse3.forward(g, x)?;
        let c = self.fuse5.forward(g, x)?;
        let y = g.add(a, b)?;
        let y = g.add(y, c)?;
        let y = g.gelu(y);
        self.project.forward(g, y)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Config;
    use crate::numerics::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn codec(dim: usize, template: usize) -> (ParamStore, StateCodec) {
        let mut cfg = Config::default().model;
        cfg.dim = dim;
        cfg.template_size = template;
        let mut store = ParamStore::new();
        let c = StateCodec::new(&mut store, &cfg, &mut ChaCha8Rng::seed_from_u64(9));
        (store, c)
    }

    #[test]
    fn constant_map_gives_uniform_gates() {
        let (store, c) = codec(64, 64);
        let mut g = Graph::<f32>::no_grad(&store);
        let f = g.constant(Tensor::full(vec![64, 4, 4], 0.7));
        let (s, ch) = c.compress(&mut g, f).unwrap();
        let cv = g.value(ch).data();
        assert!(cv.iter().all(|&v| v == cv[0]));
        let sv = g.value(s).data();
        assert_eq!(sv.len(), 8);
        assert!(sv[..4].iter().all(|&v| v == sv[0]));
        assert!(sv[4..].iter().all(|&v| v == sv[4]));
    }

    #[test]
    fn gates_lie_strictly_inside_unit_interval() {
        let (store, c) = codec(64, 64);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut g = Graph::<f32>::no_grad(&store);
        let f = g.constant(Tensor::randn(vec![64, 4, 4], 3.0, &mut rng));
        let (s, ch) = c.compress(&mut g, f).unwrap();
        for &v in g.value(s).data().iter().chain(g.value(ch).data()) {
            assert!(v > 0.0 && v < 1.0);
        }
    }

    #[test]
    fn bright_column_maximizes_width_gate() {
        let (store, c) = codec(64, 64);
        for j in 0..4 {
            let mut g = Graph::<f32>::no_grad(&store);
            let f = Tensor::from_fn(vec![64, 4, 4], |i| if i % 4 == j { 2.0 } else { 0.0 });
            let f = g.constant(f);
            let s = c.compress_spatial(&mut g, f).unwrap();
            let wg = &g.value(s).data()[..4];
            let best = (0..4).max_by(|&a, &b| wg[a].total_cmp(&wg[b])).unwrap();
            assert_eq!(best, j, "{wg:?}");
        }
    }

    /// Explicit-loop evaluation of the channel branch.
    fn channel_oracle(store: &ParamStore, f: &Tensor<f64>) -> Vec<f64> {
        let p = |n: &str| store.value(store.id(n).unwrap()).cast::<f64>().into_data();
        let (d, h, w) = (f.shape()[0], f.shape()[1], f.shape()[2]);
        let (ph, pw) = (h / 4, w / 4);
        let n = ph * pw;
        let x = f.data();
        let mut pooled = vec![0.0; d * n];
        for c in 0..d {
            for py in 0..ph {
                for px in 0..pw {
                    let mut acc = 0.0;
                    for dy in 0..4 {
                        for dx in 0..4 {
                            acc += x[(c * h + py * 4 + dy) * w + px * 4 + dx];
                        }
                    }
                    pooled[c * n + py * pw + px] = acc / 16.0;
                }
            }
        }
        let mean = pooled.iter().sum::<f64>() / (d * n) as f64;
        let var = pooled.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (d * n) as f64;
        let (gm, bt) = (p("codec.channel_norm.gamma"), p("codec.channel_norm.beta"));
        for c in 0..d {
            for i in 0..n {
                let v = &mut pooled[c * n + i];
                *v = (*v - mean) / (var + 1e-5).sqrt() * gm[c] + bt[c];
            }
        }
        let proj = |name: &str| {
            let dw = p(&format!("{name}.depthwise"));
            let pw = p(&format!("{name}.pointwise"));
            let b = p(&format!("{name}.bias"));
            let mut out = vec![0.0; d * n];
            for o in 0..d {
                for i in 0..n {
                    let mut acc = b[o];
                    for c in 0..d {
                        acc += pw[o * d + c] * dw[c] * pooled[c * n + i];
                    }
                    out[o * n + i] = acc;
                }
            }
            out
        };
        let (q, k, v) = (proj("codec.q"), proj("codec.k"), proj("codec.v"));
        let mut gate = vec![0.0; d];
        for i in 0..d {
            let logits: Vec<f64> = (0..d)
                .map(|j| (0..n).map(|t| q[i * n + t] * k[j * n + t]).sum::<f64>() / (n as f64).sqrt())
                .collect();
            let m = logits.iter().cloned().fold(f64::MIN, f64::max);
            let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
            let mut acc = 0.0;
            for t in 0..n {
                for j in 0..d {
                    acc += (logits[j] - m).exp() / z * v[j * n + t];
                }
            }
            gate[i] = 1.0 / (1.0 + (-(acc / n as f64)).exp());
        }
        gate
    }

    #[test]
    fn channel_branch_matches_loop_oracle() {
        let (store, c) = codec(8, 128);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let f = Tensor::<f64>::randn(vec![8, 8, 8], 1.0, &mut rng);
        let want = channel_oracle(&store, &f);
        let mut g = Graph::<f64>::no_grad(&store);
        let fv = g.constant(f);
        let gate = c.compress_channel(&mut g, fv).unwrap();
        for (a, b) in g.value(gate).data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn small_grid_falls_back_to_global_pool() {
        let (store, c) = codec(16, 32);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut g = Graph::<f32>::no_grad(&store);
        let f = g.constant(Tensor::randn(vec![16, 2, 2], 1.0, &mut rng));
        let ch = c.compress_channel(&mut g, f).unwrap();
        assert_eq!(g.shape(ch), &[16]);
    }

    #[test]
    fn zero_inputs_reconstruct_deterministically() {
        let (store, c) = codec(64, 64);
        let run = || {
            let mut g = Graph::<f32>::no_grad(&store);
            let s = g.constant(Tensor::zeros(vec![8]));
            let ch = g.constant(Tensor::zeros(vec![64]));
            let fz = g.constant(Tensor::zeros(vec![64, 4, 4]));
            let y = c.reconstruct(&mut g, s, ch, fz).unwrap();
            g.value(y).clone()
        };
        let a = run();
        assert_eq!(a.shape(), &[64, 4, 4]);
        assert_eq!(a, run());
        // all biases start at zero
        assert!(a.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn reconstruct_rejects_mismatched_dims() {
        let (store, c) = codec(64, 64);
        let mut g = Graph::<f32>::no_grad(&store);
        let s = g.constant(Tensor::zeros(vec![8]));
        let ch = g.constant(Tensor::zeros(vec![32]));
        let fz = g.constant(Tensor::zeros(vec![64, 4, 4]));
        assert!(c.reconstruct(&mut g, s, ch, fz).is_err());
    }
}
