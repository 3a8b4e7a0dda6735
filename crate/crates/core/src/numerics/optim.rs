//! Decoupled weight-decay Adam and gradient accumulation.

use super::{Gradients, ParamGroup, ParamId, ParamStore, Scalar, Tensor};

/// Running sum of parameter gradients over samples in a batch.
pub struct GradAccum {
    sums: Vec<Option<Vec<f32>>>,
    count: usize,
}

impl GradAccum {
    pub fn new(store: &ParamStore) -> Self {
        Self {
            sums: vec![None; store.len()],
            count: 0,
        }
    }

    pub fn add<T: Scalar>(&mut self, grads: &Gradients<T>) {
        for (id, g) in grads.params() {
            let slot = self.sums[id.index()].get_or_insert_with(|| vec![0.0; g.numel()]);
            for (s, v) in slot.iter_mut().zip(g.data()) {
                *s += v.as_f64() as f32;
            }
        }
        self.count += 1;
    }

    pub fn count(&self) -> usize {
        self.count
    }

    /// Mean gradient per parameter (`None` where nothing was accumulated).
    pub fn mean(&self) -> Vec<Option<Vec<f32>>> {
        let n = self.count.max(1) as f32;
        self.sums
            .iter()
            .map(|s| s.as_ref().map(|v| v.iter().map(|x| x / n).collect()))
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct AdamWConfig {
    pub lr_encoder: f64,
    pub lr_head: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr_encoder: 4e-5,
            lr_head: 4e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

pub struct AdamW {
    pub cfg: AdamWConfig,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    step: u64,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig, store: &ParamStore) -> Self {
        let zeros = |p: &Tensor<f32>| vec![0.0f32; p.numel()];
        Self {
            cfg,
            m: store.iter().map(|(_, p)| zeros(&p.value)).collect(),
            v: store.iter().map(|(_, p)| zeros(&p.value)).collect(),
            step: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update; `lr_scale` multiplies both group learning rates.
    /// `frozen` parameters are never touched.
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        grads: &[Option<Vec<f32>>],
        lr_scale: f64,
        frozen: impl Fn(ParamId) -> bool,
    ) {
        self.step += 1;
        let c = &self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let ids: Vec<ParamId> = store.ids().collect();
        for id in ids {
            let Some(g) = &grads[id.index()] else {
                continue;
            };
            if frozen(id) {
                continue;
            }
            let p = store.get(id);
            let lr = lr_scale
                * match p.group {
                    ParamGroup::Encoder => c.lr_encoder,
                    ParamGroup::Head => c.lr_head,
                };
            let wd = if p.no_decay { 0.0 } else { c.weight_decay };
            let (m, v) = (&mut self.m[id.index()], &mut self.v[id.index()]);
            let value = store.value_mut(id).data_mut();
            for k in 0..value.len() {
                let gk = g[k] as f64;
                let mk = c.beta1 * m[k] as f64 + (1.0 - c.beta1) * gk;
                let vk = c.beta2 * v[k] as f64 + (1.0 - c.beta2) * gk * gk;
                m[k] = mk as f32;
                v[k] = vk as f32;
                let update = (mk / bc1) / ((vk / bc2).sqrt() + c.eps);
                let w = value[k] as f64;
                value[k] = (w - lr * (update + wd * w)) as f32;
            }
        }
    }
}
