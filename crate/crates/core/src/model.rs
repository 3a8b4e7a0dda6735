//! The assembled tracker: live parameters, the frozen target-feature branch
//! and the per-frame forward pass shared by training and inference.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{Ablation, ModelConfig};
use crate::decoder_head::{cross_correlation, Head, HeadVars, TemporalDecoder};
use crate::encoder::{Encoder, PATCH_STRIDE};
use crate::error::Result;
use crate::imaging::Frame;
use crate::nn::{grid_to_tokens, tokens_to_grid};
use crate::numerics::{Graph, ParamStore, Scalar, Var};
use crate::reasoning::Reasoner;
use crate::state_codec::StateCodec;

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub ablation: Ablation,
    pub store: ParamStore,
    /// Snapshot used for true target features. Same layout as `store`; only
    /// the encoder entries are ever read.
    pub frozen: ParamStore,
    pub encoder: Encoder,
    pub codec: StateCodec,
    pub reasoner: Reasoner,
    pub decoder: TemporalDecoder,
    pub head: Head,
}

/// Graph values of one search frame.
#[derive(Clone, Copy, Debug)]
pub struct FrameVars {
    pub head: HeadVars,
    /// Inferred `(spatial, channel)` tokens.
    pub inferred: Option<(Var, Var)>,
    /// Predicted target feature `[D, H, W]`.
    pub predicted: Option<Var>,
}

impl Model {
    pub fn new(cfg: &ModelConfig, ablation: Ablation, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoder = Encoder::new(&mut store, cfg, &mut rng);
        let codec = StateCodec::new(&mut store, cfg, &mut rng);
        let reasoner = Reasoner::new(&mut store, cfg, &mut rng);
        let decoder = TemporalDecoder::new(&mut store, cfg, &mut rng);
        let head = Head::new(&mut store, cfg, &mut rng);
        Self {
            cfg: cfg.clone(),
            ablation,
            frozen: store.clone(),
            store,
            encoder,
            codec,
            reasoner,
            decoder,
            head,
        }
    }

    /// Copy the live encoder into the frozen branch.
    pub fn refresh_frozen(&mut self) {
        self.frozen.copy_from(&self.store.subset(Encoder::param_prefix()));
    }

    pub fn template_grid(&self) -> usize {
        self.cfg.template_size / PATCH_STRIDE
    }

    pub fn search_grid(&self) -> usize {
        self.cfg.canvas / PATCH_STRIDE
    }

    /// Whether this variant carries a history of state tokens.
    pub fn uses_history(&self) -> bool {
        !self.ablation.no_reasoning
    }

    /// True target feature `[D, H, W]` of `crop` and its compressed tokens.
    ///
    /// The feature comes from the frozen branch and is a graph constant; the
    /// compression runs on the live codec.
    pub fn true_state<T: Scalar>(&self, g: &mut Graph<'_, T>, template: &Frame, crop: &Frame) -> Result<(Var, Var, Var)> {
        let tokens = self.encoder.target_feature::<T>(&self.frozen, template, crop)?;
        let tokens = g.constant(tokens);
        let n = self.template_grid();
        let grid = tokens_to_grid(g, tokens, n, n)?;
        let (s, c) = self.codec.compress(g, grid)?;
        Ok((grid, s, c))
    }

    /// Head outputs for `search`, optionally conditioned on a token history
    /// `([T, W+H], [T, D])`.
    pub fn frame_forward<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        template: &Frame,
        search: &Frame,
        history: Option<(Var, Var)>,
        bidirectional: bool,
    ) -> Result<FrameVars> {
        let enc = self.encoder.forward(g, template, search)?;
        let inferred = match history {
            Some((hs, hc)) if !self.ablation.no_reasoning => Some(if bidirectional {
                self.reasoner.reason_bidirectional(g, hs, hc)?
            } else {
                self.reasoner.reason(g, hs, hc)?
            }),
            _ => None,
        };
        let predicted = match inferred {
            Some((s, c)) if !self.ablation.no_reconstruction => {
                let n = self.template_grid();
                let fz = tokens_to_grid(g, enc.f_z, n, n)?;
                Some(self.codec.reconstruct(g, s, c, fz)?)
            }
            _ => None,
        };
        let predicted_tokens = match predicted {
            Some(p) => Some(grid_to_tokens(g, p)?),
            None => None,
        };
        let refined = if self.ablation.no_decoder {
            cross_correlation(g, enc.f_x, predicted_tokens)?
        } else {
            self.decoder.forward(g, enc.f_x, enc.f_z, predicted_tokens)?
        };
        let head = self.head.forward(g, refined)?;
        Ok(FrameVars { head, inferred, predicted })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Config;
    use crate::numerics::Tensor;

    fn frames(cfg: &ModelConfig) -> (Frame, Frame) {
        let t = Tensor::from_fn(vec![3, cfg.template_size, cfg.template_size], |i| ((i * 7) % 13) as f32 / 13.0);
        let s = Tensor::from_fn(vec![3, cfg.canvas, cfg.canvas], |i| ((i * 5) % 11) as f32 / 11.0);
        (t, s)
    }

    #[test]
    fn noop_ablation_builds_identical_model() {
        let cfg = Config::micro().model;
        let a = Model::new(&cfg, Ablation::default(), 3);
        let b = Model::new(&cfg, Ablation::default(), 3);
        assert_eq!(a.store.len(), b.store.len());
        for ((_, p), (_, q)) in a.store.iter().zip(b.store.iter()) {
            assert_eq!(p.name, q.name);
            assert_eq!(p.value, q.value);
        }
    }

    #[test]
    fn ablations_gate_predicted_features() {
        let cfg = Config::micro().model;
        let (z, x) = frames(&cfg);
        for (ablation, predicts) in [
            (Ablation::default(), true),
            (Ablation { no_decoder: true, ..Default::default() }, true),
            (Ablation { no_reconstruction: true, ..Default::default() }, false),
            (Ablation::all(), false),
        ] {
            let m = Model::new(&cfg, ablation, 1);
            let mut g = Graph::<f32>::no_grad(&m.store);
            let (_, s, c) = m.true_state(&mut g, &z, &z).unwrap();
            let ws = g.shape(s)[0];
            let hs = g.reshape(s, vec![1, ws]).unwrap();
            let hc = g.reshape(c, vec![1, cfg.dim]).unwrap();
            let out = m.frame_forward(&mut g, &z, &x, Some((hs, hc)), false).unwrap();
            assert_eq!(out.predicted.is_some(), predicts, "{ablation}");
            assert_eq!(g.shape(out.head.cls), &[1, m.search_grid(), m.search_grid()]);
        }
    }

    #[test]
    fn refresh_copies_only_the_encoder() {
        let cfg = Config::micro().model;
        let mut m = Model::new(&cfg, Ablation::default(), 2);
        let ids: Vec<_> = m.store.ids().collect();
        for id in ids {
            m.store.value_mut(id).data_mut().iter_mut().for_each(|v| *v += 1.0);
        }
        m.refresh_frozen();
        for ((_, live), (_, frozen)) in m.store.iter().zip(m.frozen.iter()) {
            assert_eq!(live.name.starts_with("encoder."), live.value == frozen.value, "{}", live.name);
        }
    }
}
