//! Temporal decoder refining search tokens with template and predicted target
//! tokens, the center/size prediction head and box decoding.

use rand::Rng;

use crate::bbox::BBox;
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{tokens_to_grid, Conv2d, LayerNorm, Mlp, MultiHeadAttention};
use crate::numerics::{Graph, ParamGroup, ParamStore, Scalar, Tensor, Var};

/// Initial logit of the center map, a prior of about 0.1 per cell.
pub const CLS_PRIOR_LOGIT: f32 = -2.19;

#[derive(Clone, Debug)]
struct DecoderLayer {
    query_norm: LayerNorm,
    ref_norm: LayerNorm,
    joint_attn: MultiHeadAttention,
    joint_norm: LayerNorm,
    search_norm: LayerNorm,
    search_attn: MultiHeadAttention,
    ffn_norm: LayerNorm,
    ffn: Mlp,
}

impl DecoderLayer {
    fn new<R: Rng>(store: &mut ParamStore, name: &str, cfg: &ModelConfig, rng: &mut R) -> Self {
        let (d, grp) = (cfg.dim, ParamGroup::Head);
        let h = cfg.decoder_heads;
        Self {
            query_norm: LayerNorm::new(store, &format!("{name}.query_norm"), d, grp),
            ref_norm: LayerNorm::new(store, &format!("{name}.ref_norm"), d, grp),
            joint_attn: MultiHeadAttention::new(store, &format!("{name}.joint_attn"), d, h, grp, rng),
            joint_norm: LayerNorm::new(store, &format!("{name}.joint_norm"), d, grp),
            search_norm: LayerNorm::new(store, &format!("{name}.search_norm"), d, grp),
            search_attn: MultiHeadAttention::new(store, &format!("{name}.search_attn"), d, h, grp, rng),
            ffn_norm: LayerNorm::new(store, &format!("{name}.ffn_norm"), d, grp),
            ffn: Mlp::new(store, &format!("{name}.ffn"), d, d * cfg.mlp_ratio, grp, rng),
        }
    }

    fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var, reference: Var) -> Result<Var> {
        let q = self.query_norm.forward(g, x)?;
        let r = self.ref_norm.forward(g, reference)?;
        let a = self.joint_attn.forward(g, q, r)?;
        let joint = g.add(x, a)?;
        let q = self.joint_norm.forward(g, joint)?;
        let k = self.search_norm.forward(g, x)?;
        let a = self.search_attn.forward(g, q, k)?;
        let y = g.add(joint, a)?;
        let h = self.ffn_norm.forward(g, y)?;
        let h = self.ffn.forward(g, h)?;
        g.add(y, h)
    }
}

#[derive(Clone, Debug)]
pub struct TemporalDecoder {
    layers: Vec<DecoderLayer>,
    dim: usize,
}

impl TemporalDecoder {
    pub fn new<R: Rng>(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut R) -> Self {
        let layers = (0..cfg.decoder_layers)
            .map(|i| DecoderLayer::new(store, &format!("decoder.layer{i}"), cfg, rng))
            .collect();
        Self { layers, dim: cfg.dim }
    }

    /// Refined search tokens `[Nx, D]`.
    ///
    /// The reference sequence is `[predicted; template]`, or the template
    /// alone when no predicted tokens are available.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, f_x: Var, f_z: Var, f_pred: Option<Var>) -> Result<Var> {
        check_tokens(g, f_x, self.dim)?;
        check_tokens(g, f_z, self.dim)?;
        let reference = match f_pred {
            Some(p) => {
                if g.shape(p) != g.shape(f_z) {
                    return Err(Error::dim("temporal_decode", &g.shape(f_z).to_vec(), g.shape(p)));
                }
                g.concat(&[p, f_z], 0)?
            }
            None => f_z,
        };
        let mut x = f_x;
        for layer in &self.layers {
            x = layer.forward(g, x, reference)?;
        }
        Ok(x)
    }
}

fn check_tokens<T: Scalar>(g: &Graph<'_, T>, v: Var, dim: usize) -> Result<()> {
    let s = g.shape(v);
    if s.len() != 2 || s[1] != dim {
        return Err(Error::dim("temporal_decode", &[s.first().copied().unwrap_or(0), dim], s));
    }
    Ok(())
}

/// Parameter-free stand-in for the decoder: each search token is modulated
/// by its channel-wise correlation with the pooled reference tokens.
pub fn cross_correlation<T: Scalar>(g: &mut Graph<'_, T>, f_x: Var, reference: Option<Var>) -> Result<Var> {
    match reference {
        None => Ok(f_x),
        Some(r) => {
            let kernel = g.mean_axis(r, 0)?;
            let response = g.mul(f_x, kernel)?;
            g.add(f_x, response)
        }
    }
}

/// Graph outputs of the head on one search grid.
#[derive(Clone, Copy, Debug)]
pub struct HeadVars {
    /// Center logits `[1, H, W]`.
    pub logits: Var,
    /// Center probabilities `[1, H, W]`.
    pub cls: Var,
    /// Normalized `(w, h)` per cell, `[2, H, W]`.
    pub size: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadOutput {
    pub cls: Tensor<f32>,
    pub size: Tensor<f32>,
}

impl HeadOutput {
    pub fn from_graph<T: Scalar>(g: &Graph<'_, T>, vars: &HeadVars) -> Self {
        Self {
            cls: g.value(vars.cls).cast(),
            size: g.value(vars.size).cast(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Head {
    cls1: Conv2d,
    cls2: Conv2d,
    size1: Conv2d,
    size2: Conv2d,
    grid: usize,
}

impl Head {
    pub fn new<R: Rng>(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut R) -> Self {
        let (d, hid, grp) = (cfg.dim, cfg.head_hidden, ParamGroup::Head);
        let cls2 = Conv2d::new(store, "head.cls2", hid, 1, 3, 1, 1, grp, rng);
        store.value_mut(cls2.b).data_mut().fill(CLS_PRIOR_LOGIT);
        Self {
            cls1: Conv2d::new(store, "head.cls1", d, hid, 3, 1, 1, grp, rng),
            cls2,
            size1: Conv2d::new(store, "head.size1", d, hid, 3, 1, 1, grp, rng),
            size2: Conv2d::new(store, "head.size2", hid, 2, 3, 1, 1, grp, rng),
            grid: cfg.canvas / crate::encoder::PATCH_STRIDE,
        }
    }

    /// Head maps from refined search tokens `[H*W, D]`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, tokens: Var) -> Result<HeadVars> {
        let n = g.shape(tokens)[0];
        if n != self.grid * self.grid {
            return Err(Error::dim("predict_head", &[self.grid * self.grid], &[n]));
        }
        let grid = tokens_to_grid(g, tokens, self.grid, self.grid)?;
        let h = self.cls1.forward(g, grid)?;
        let h = g.gelu(h);
        let logits = self.cls2.forward(g, h)?;
        let cls = g.sigmoid(logits);
        let h = self.size1.forward(g, grid)?;
        let h = g.gelu(h);
        let size = self.size2.forward(g, h)?;
        let size = g.sigmoid(size);
        Ok(HeadVars { logits, cls, size })
    }
}

/// Box at the highest-scoring cell and that score.
///
/// Ties go to the lowest row-major index.
pub fn decode_box(head: &HeadOutput) -> Result<(BBox, f32)> {
    let s = head.cls.shape();
    if s.len() != 3 || s[0] != 1 || head.size.shape() != [2, s[1], s[2]] {
        return Err(Error::dim("decode_box", s, head.size.shape()));
    }
    let (h, w) = (s[1], s[2]);
    let cls = head.cls.data();
    let mut best = 0;
    for (i, &v) in cls.iter().enumerate() {
        if v > cls[best] {
            best = i;
        }
    }
    let (row, col) = (best / w, best % w);
    let size = head.size.data();
    let bbox = BBox::new(
        (col as f64 + 0.5) / w as f64,
        (row as f64 + 0.5) / h as f64,
        size[best] as f64,
        size[h * w + best] as f64,
    );
    Ok((bbox, cls[best]))
}
