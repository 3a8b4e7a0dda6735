//! Joint template/search attention encoder and the frozen target branch.

use rand::Rng;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::imaging::Frame;
use crate::nn::{Conv2d, LayerNorm, Mlp, MultiHeadAttention, INIT_STD};
use crate::numerics::{trunc_normal, Graph, ParamGroup, ParamId, ParamStore, Scalar, Tensor, Var};

/// Total downsampling of the convolutional stem.
pub const PATCH_STRIDE: usize = 16;

#[derive(Clone, Debug)]
struct Block {
    norm1: LayerNorm,
    attn: MultiHeadAttention,
    norm2: LayerNorm,
    mlp: Mlp,
}

/// Token matrices `[N, D]` for the two regions.
#[derive(Clone, Copy, Debug)]
pub struct EncoderOutput {
    pub f_z: Var,
    pub f_x: Var,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    stem: [Conv2d; 3],
    stem_norm: LayerNorm,
    out_norm: LayerNorm,
    pos_z: ParamId,
    pos_x: ParamId,
    blocks: Vec<Block>,
    pub dim: usize,
    pub template_size: usize,
    pub search_size: usize,
}

impl Encoder {
    pub fn new<R: Rng>(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut R) -> Self {
        let d = cfg.dim;
        let grp = ParamGroup::Encoder;
        let (c1, c2) = ((d / 4).max(1), (d / 2).max(1));
        // fan-in scaled so the stem output is not vanishingly small
        let he = |cin: usize, k: usize| (2.0 / (cin * k * k) as f64).sqrt();
        let stem = [
            Conv2d::with_std(store, "encoder.stem0", [3, c1, 4], 4, 0, he(3, 4), grp, rng),
            Conv2d::with_std(store, "encoder.stem1", [c1, c2, 2], 2, 0, he(c1, 2), grp, rng),
            Conv2d::with_std(store, "encoder.stem2", [c2, d, 2], 2, 0, he(c2, 2), grp, rng),
        ];
        let stem_norm = LayerNorm::new(store, "encoder.stem_norm", d, grp);
        let out_norm = LayerNorm::new(store, "encoder.out_norm", d, grp);
        let nz = (cfg.template_size / PATCH_STRIDE).pow(2);
        let nx = (cfg.canvas / PATCH_STRIDE).pow(2);
        let pos_z = store.add_no_decay("encoder.pos_template", trunc_normal(vec![nz, d], INIT_STD, rng), grp);
        let pos_x = store.add_no_decay("encoder.pos_search", trunc_normal(vec![nx, d], INIT_STD, rng), grp);
        let blocks = (0..cfg.encoder_layers)
            .map(|i| {
                let n = format!("encoder.block{i}");
                Block {
                    norm1: LayerNorm::new(store, &format!("{n}.norm1"), d, grp),
                    attn: MultiHeadAttention::new(store, &format!("{n}.attn"), d, cfg.heads, grp, rng),
                    norm2: LayerNorm::new(store, &format!("{n}.norm2"), d, grp),
                    mlp: Mlp::new(store, &format!("{n}.mlp"), d, d * cfg.mlp_ratio, grp, rng),
                }
            })
            .collect();
        Self {
            stem,
            stem_norm,
            out_norm,
            pos_z,
            pos_x,
            blocks,
            dim: d,
            template_size: cfg.template_size,
            search_size: cfg.canvas,
        }
    }

    pub fn template_grid(&self) -> usize {
        self.template_size / PATCH_STRIDE
    }

    pub fn search_grid(&self) -> usize {
        self.search_size / PATCH_STRIDE
    }

    fn patchify<T: Scalar>(&self, g: &mut Graph<'_, T>, image: &Frame, expect: usize) -> Result<Var> {
        let s = image.shape();
        if s.len() != 3 || s[0] != 3 || s[1] % PATCH_STRIDE != 0 || s[2] % PATCH_STRIDE != 0 {
            return Err(Error::Config(format!(
                "image shape {s:?} must be 3xHxW with H, W divisible by {PATCH_STRIDE}"
            )));
        }
        if s[1] != expect || s[2] != expect {
            return Err(Error::dim("embed", &[3, expect, expect], s));
        }
        let mut x = g.constant(image.cast::<T>());
        for (i, conv) in self.stem.iter().enumerate() {
            x = conv.forward(g, x)?;
            if i + 1 < self.stem.len() {
                x = g.gelu(x);
            }
        }
        let tokens = crate::nn::grid_to_tokens(g, x)?;
        self.stem_norm.forward(g, tokens)
    }

    /// Joint `[Nz + Nx, D]` token sequence, template tokens first.
    pub fn embed_pair<T: Scalar>(&self, g: &mut Graph<'_, T>, template: &Frame, search: &Frame) -> Result<Var> {
        let pz = self.patchify(g, template, self.template_size)?;
        let px = self.patchify(g, search, self.search_size)?;
        let pos_z = g.param(self.pos_z);
        let pos_x = g.param(self.pos_x);
        let pz = g.add(pz, pos_z)?;
        let px = g.add(px, pos_x)?;
        g.concat(&[pz, px], 0)
    }

    /// Pre-norm transformer blocks over the joint sequence, then a final
    /// layer norm.
    pub fn encode<T: Scalar>(&self, g: &mut Graph<'_, T>, tokens: Var) -> Result<Var> {
        let mut x = tokens;
        for b in &self.blocks {
            let h = b.norm1.forward(g, x)?;
            let h = b.attn.forward(g, h, h)?;
            x = g.add(x, h)?;
            let h = b.norm2.forward(g, x)?;
            let h = b.mlp.forward(g, h)?;
            x = g.add(x, h)?;
        }
        self.out_norm.forward(g, x)
    }

    fn split<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var, nz: usize) -> Result<EncoderOutput> {
        let n = g.shape(x)[0];
        let f_z = g.slice(x, 0, 0, nz)?;
        let f_x = g.slice(x, 0, nz, n - nz)?;
        Ok(EncoderOutput { f_z, f_x })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, template: &Frame, search: &Frame) -> Result<EncoderOutput> {
        let tokens = self.embed_pair(g, template, search)?;
        let x = self.encode(g, tokens)?;
        self.split(g, x, self.template_grid().pow(2))
    }

    /// Encode `[template; crop]`, both carrying template position embeddings,
    /// and return the crop half `[Nz, D]`.
    pub fn target_tokens<T: Scalar>(&self, g: &mut Graph<'_, T>, template: &Frame, crop: &Frame) -> Result<Var> {
        let pz = self.patchify(g, template, self.template_size)?;
        let pc = self.patchify(g, crop, self.template_size)?;
        let pos = g.param(self.pos_z);
        let pz = g.add(pz, pos)?;
        let pc = g.add(pc, pos)?;
        let joint = g.concat(&[pz, pc], 0)?;
        let x = self.encode(g, joint)?;
        Ok(self.split(g, x, self.template_grid().pow(2))?.f_x)
    }

    /// True target feature under the parameters of `frozen` (no gradient).
    pub fn target_feature<T: Scalar>(&self, frozen: &ParamStore, template: &Frame, crop: &Frame) -> Result<Tensor<T>> {
        let mut g = Graph::<T>::no_grad(frozen);
        let v = self.target_tokens(&mut g, template, crop)?;
        Ok(g.value(v).clone())
    }

    pub fn param_prefix() -> &'static str {
        "encoder."
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Config;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn build(cfg: &ModelConfig) -> (ParamStore, Encoder) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let enc = Encoder::new(&mut store, cfg, &mut rng);
        (store, enc)
    }

    fn noise(size: usize, seed: u64) -> Frame {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(vec![3, size, size], |_| rng.random::<f32>())
    }

    #[test]
    fn toy_shapes() {
        let cfg = ModelConfig::default();
        let (store, enc) = build(&cfg);
        let mut g = Graph::<f32>::no_grad(&store);
        let tokens = enc.embed_pair(&mut g, &noise(64, 1), &noise(128, 2)).unwrap();
        assert_eq!(g.shape(tokens), &[80, 64]);
        let out = enc.forward(&mut g, &noise(64, 1), &noise(128, 2)).unwrap();
        assert_eq!(g.shape(out.f_z), &[16, 64]);
        assert_eq!(g.shape(out.f_x), &[64, 64]);
    }

    #[test]
    fn zero_layers_reduce_to_output_norm() {
        let mut cfg = Config::micro().model;
        cfg.encoder_layers = 0;
        let (store, enc) = build(&cfg);
        let mut g = Graph::<f32>::no_grad(&store);
        let t = enc.embed_pair(&mut g, &noise(32, 1), &noise(64, 2)).unwrap();
        let e = enc.encode(&mut g, t).unwrap();
        let n = enc.out_norm.forward(&mut g, t).unwrap();
        assert_eq!(g.value(n), g.value(e));
    }

    #[test]
    fn zero_images_embed_to_position_embeddings() {
        let cfg = Config::micro().model;
        let (store, enc) = build(&cfg);
        let mut g = Graph::<f32>::no_grad(&store);
        let t = enc
            .embed_pair(&mut g, &Tensor::zeros(vec![3, 32, 32]), &Tensor::zeros(vec![3, 64, 64]))
            .unwrap();
        let pz = store.value(store.id("encoder.pos_template").unwrap());
        let px = store.value(store.id("encoder.pos_search").unwrap());
        let want: Vec<f32> = pz.data().iter().chain(px.data()).copied().collect();
        assert_eq!(g.value(t).data(), want.as_slice());
    }

    #[test]
    fn non_divisible_images_are_rejected() {
        let cfg = Config::micro().model;
        let (store, enc) = build(&cfg);
        let mut g = Graph::<f32>::no_grad(&store);
        let err = enc.embed_pair(&mut g, &noise(30, 1), &noise(64, 2)).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn template_features_depend_on_search_pixels() {
        let cfg = Config::micro().model;
        let (store, enc) = build(&cfg);
        let mut g = Graph::<f64>::with_params(&store);
        let z = noise(32, 1);
        let x = noise(64, 2);
        let pz = enc.patchify(&mut g, &z, 32).unwrap();
        let xin = g.input(x.cast::<f64>());
        // rebuild the search branch from a differentiable input
        let mut h = xin;
        for (i, conv) in enc.stem.iter().enumerate() {
            h = conv.forward(&mut g, h).unwrap();
            if i + 1 < enc.stem.len() {
                h = g.gelu(h);
            }
        }
        let px = crate::nn::grid_to_tokens(&mut g, h).unwrap();
        let px = enc.stem_norm.forward(&mut g, px).unwrap();
        let (pos_z, pos_x) = (g.param(enc.pos_z), g.param(enc.pos_x));
        let pz = g.add(pz, pos_z).unwrap();
        let px = g.add(px, pos_x).unwrap();
        let joint = g.concat(&[pz, px], 0).unwrap();
        let out = enc.encode(&mut g, joint).unwrap();
        let fz = g.slice(out, 0, 0, 4).unwrap();
        let l = g.sum(fz);
        let sq = g.mul(fz, fz).unwrap();
        let l2 = g.sum(sq);
        let l = g.add(l, l2).unwrap();
        let grads = g.backward(l).unwrap();
        let gx = grads.wrt(xin).unwrap();
        assert!(gx.squared_norm() > 0.0);
    }

    #[test]
    fn shuffled_search_changes_output() {
        let cfg = Config::micro().model;
        let (store, enc) = build(&cfg);
        let z = noise(32, 1);
        let x = noise(64, 2);
        // swap the two halves of the search image (a token permutation)
        let mut swapped = x.clone();
        for c in 0..3 {
            for y in 0..64 {
                for xx in 0..32 {
                    let a = (c * 64 + y) * 64 + xx;
                    swapped.data_mut().swap(a, a + 32);
                }
            }
        }
        let mut g = Graph::<f32>::no_grad(&store);
        let a = enc.forward(&mut g, &z, &x).unwrap();
        let b = enc.forward(&mut g, &z, &swapped).unwrap();
        assert!(g.value(a.f_x).max_abs_diff(g.value(b.f_x)) > 0.0);
    }

    #[test]
    fn identical_crop_reproduces_template_feature() {
        let cfg = Config::micro().model;
        let (store, enc) = build(&cfg);
        let z = noise(32, 5);
        let mut g = Graph::<f32>::no_grad(&store);
        let pz = enc.patchify(&mut g, &z, 32).unwrap();
        let pos = g.param(enc.pos_z);
        let pz = g.add(pz, pos).unwrap();
        let joint = g.concat(&[pz, pz], 0).unwrap();
        let x = enc.encode(&mut g, joint).unwrap();
        let n = enc.template_grid().pow(2);
        let template_half = g.slice(x, 0, 0, n).unwrap();
        let crop_half = enc.target_tokens(&mut g, &z, &z).unwrap();
        assert!(g.value(template_half).max_abs_diff(g.value(crop_half)) < 1e-6);
    }
}
