use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bbox::BBox;
use crate::config::{Config, LossWeights};
use crate::error::{Error, Result};
use crate::imaging::{context_crop, Frame};
use crate::losses::{recon_loss, ssm_loss, state_loss, total_loss, track_loss, LossReport};
use crate::model::Model;
use crate::numerics::{AdamW, AdamWConfig, GradAccum, Gradients, Graph, Scalar, Var};
use crate::synthgen::Sequence;

/// One template crop and ordered search frames from the same video.
#[derive(Clone, Debug)]
pub struct TrainSample {
    pub template: Frame,
    pub search: Vec<Frame>,
    pub boxes: Vec<BBox>,
}

/// Template at a visible frame, then `count` later visible frames in order,
/// at most `max_gap` visible frames apart. Occluded frames are never drawn.
pub fn sample_from_sequence<R: Rng>(
    seq: &Sequence,
    count: usize,
    max_gap: usize,
    context: f64,
    template_size: usize,
    rng: &mut R,
) -> Result<TrainSample> {
    let visible: Vec<usize> = (0..seq.frames.len()).filter(|&t| !seq.spec.occluded(t)).collect();
    let n = visible.len();
    if n <= count {
        return Err(Error::Config(format!("sequence with {n} visible frames cannot supply {count} search frames")));
    }
    let mut k0 = rng.random_range(0..n - count);
    let t0 = visible[k0];
    let mut idx = Vec::with_capacity(count);
    for k in 0..count {
        // leave room for the frames still to come
        let room = n - 1 - k0 - (count - 1 - k);
        k0 += rng.random_range(1..=max_gap.max(1).min(room));
        idx.push(visible[k0]);
    }
    let (template, _) = context_crop(&seq.frames[t0], &seq.boxes[t0], context, template_size);
    Ok(TrainSample {
        template,
        search: idx.iter().map(|&i| seq.frames[i].clone()).collect(),
        boxes: idx.iter().map(|&i| seq.boxes[i]).collect(),
    })
}

pub struct Trainer {
    pub model: Model,
    pub cfg: Config,
    opt: AdamW,
    data: Vec<Sequence>,
    order: Vec<usize>,
    rng: ChaCha8Rng,
    pub step: u64,
}

impl Trainer {
    pub fn new(model: Model, cfg: &Config, data: Vec<Sequence>) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::Config("training needs at least one sequence".into()));
        }
        let t = &cfg.train;
        let opt = AdamW::new(
            AdamWConfig {
                lr_encoder: t.lr_encoder,
                lr_head: t.lr_head,
                weight_decay: t.weight_decay,
                ..AdamWConfig::default()
            },
            &model.store,
        );
        Ok(Self {
            model,
            cfg: cfg.clone(),
            opt,
            data,
            order: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(t.seed),
            step: 0,
        })
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.data.len().div_ceil(self.cfg.train.batch_size.max(1))
    }

    /// Learning-rate multiplier for the step about to run.
    pub fn lr_scale(&self) -> f64 {
        let t = &self.cfg.train;
        if (self.step as f64) >= t.lr_decay_at * t.steps as f64 {
            t.lr_decay_factor
        } else {
            1.0
        }
    }

    /// Draw the next batch, reshuffling and refreshing the frozen branch at
    /// every epoch boundary.
    pub fn next_batch(&mut self) -> Result<Vec<TrainSample>> {
        let per_epoch = self.steps_per_epoch();
        let slot = self.step as usize % per_epoch;
        if slot == 0 {
            self.model.refresh_frozen();
            self.order = (0..self.data.len()).collect();
            self.order.shuffle(&mut self.rng);
        }
        let b = self.cfg.train.batch_size;
        let ids: Vec<usize> = self.order.iter().skip(slot * b).take(b).copied().collect();
        let mc = &self.model.cfg;
        ids.iter()
            .map(|&i| {
                sample_from_sequence(
                    &self.data[i],
                    self.cfg.train.search_frames,
                    self.cfg.train.max_frame_gap,
                    mc.context_factor,
                    mc.template_size,
                    &mut self.rng,
                )
            })
            .collect()
    }

    pub fn train_step(&mut self, batch: &[TrainSample]) -> Result<LossReport> {
        let mut accum = GradAccum::new(&self.model.store);
        let mut sums = [0.0f64; 5];
        let mut frames = 0usize;
        for sample in batch {
            match self.sample_losses(sample) {
                Ok((grads, parts, n)) => {
                    accum.add(&grads);
                    for (s, p) in sums.iter_mut().zip(parts) {
                        *s += p;
                    }
                    frames += n;
                }
                Err(Error::DegenerateBox(msg)) => eprintln!("skipping sample with degenerate box: {msg}"),
                Err(e) => return Err(e),
            }
        }
        if accum.count() == 0 {
            return Err(Error::Contract("no usable samples in batch".into()));
        }
        let scale = self.lr_scale();
        self.opt.step(&mut self.model.store, &accum.mean(), scale, |_| false);
        self.step += 1;
        let n = frames.max(1) as f64;
        let mut w = self.cfg.loss.clone();
        if self.model.ablation.no_ssm_loss {
            w.lambda_ssm = 0.0;
        }
        LossReport::from_parts(sums[0] / n, sums[1] / n, sums[2] / n, sums[3] / n, sums[4] / n, &w)
    }

    fn sample_losses(&self, sample: &TrainSample) -> Result<(Gradients<f32>, [f64; 5], usize)> {
        let mut g = Graph::<f32>::with_params(&self.model.store);
        let (loss, parts) = sample_loss(&mut g, &self.model, sample, &self.cfg.loss)?;
        let grads = g.backward(loss)?;
        Ok((grads, parts, sample.search.len()))
    }

    /// Run `steps` steps, calling `log` with each step's report.
    pub fn run(&mut self, steps: usize, mut log: impl FnMut(u64, &LossReport)) -> Result<Vec<LossReport>> {
        let mut out = Vec::with_capacity(steps);
        for _ in 0..steps {
            let batch = self.next_batch()?;
            let report = self.train_step(&batch)?;
            log(self.step, &report);
            out.push(report);
        }
        Ok(out)
    }
}

/// Frame-averaged training loss of one sample and the summed
/// `(cls, iou, l1, state, recon)` parts over its frames.
///
/// History entries are the compressed true tokens of earlier frames.
pub fn sample_loss<T: Scalar>(
    g: &mut Graph<'_, T>,
    model: &Model,
    sample: &TrainSample,
    weights: &LossWeights,
) -> Result<(Var, [f64; 5])> {
    let mut w = weights.clone();
    if model.ablation.no_ssm_loss {
        w.lambda_ssm = 0.0;
    }
    for b in &sample.boxes {
        b.check(model.cfg.canvas)?;
    }
    let mut hist_s: Vec<Var> = Vec::new();
    let mut hist_c: Vec<Var> = Vec::new();
    if model.uses_history() {
        let (_, s0, c0) = model.true_state(g, &sample.template, &sample.template)?;
        push_row(g, &mut hist_s, &mut hist_c, s0, c0)?;
    }
    let mut parts = [0.0f64; 5];
    let mut totals = Vec::new();
    for (search, gt) in sample.search.iter().zip(&sample.boxes) {
        let history = if model.uses_history() {
            Some((g.concat(&hist_s, 0)?, g.concat(&hist_c, 0)?))
        } else {
            None
        };
        let out = model.frame_forward(g, &sample.template, search, history, false)?;
        let track = track_loss(g, &out.head, gt, &w)?;
        parts[0] += g.value(track.cls).item().as_f64();
        parts[1] += g.value(track.iou).item().as_f64();
        parts[2] += g.value(track.l1).item().as_f64();
        let mut ssm = None;
        if model.uses_history() {
            let (crop, _) = context_crop(search, gt, model.cfg.context_factor, model.cfg.template_size);
            let (f_true, s_true, c_true) = model.true_state(g, &sample.template, &crop)?;
            let mut state = None;
            let mut recon = None;
            if let Some((s_hat, c_hat)) = out.inferred {
                let l = state_loss(g, s_true, c_true, s_hat, c_hat)?;
                parts[3] += g.value(l).item().as_f64();
                state = Some(l);
            }
            if let Some(f_hat) = out.predicted {
                let l = recon_loss(g, f_true, f_hat)?;
                parts[4] += g.value(l).item().as_f64();
                recon = Some(l);
            }
            if w.lambda_ssm != 0.0 {
                ssm = match (state, recon) {
                    (Some(s), Some(r)) => Some(ssm_loss(g, s, r, &w)?),
                    (Some(s), None) => Some(g.scale(s, w.alpha_state)),
                    _ => None,
                };
            }
            push_row(g, &mut hist_s, &mut hist_c, s_true, c_true)?;
        }
        totals.push(total_loss(g, &track, ssm, &w)?);
    }
    let rows = totals.iter().map(|&t| g.reshape(t, vec![1])).collect::<Result<Vec<_>>>()?;
    let stacked = g.concat(&rows, 0)?;
    Ok((g.mean(stacked), parts))
}

fn push_row<T: Scalar>(g: &mut Graph<'_, T>, hist_s: &mut Vec<Var>, hist_c: &mut Vec<Var>, s: Var, c: Var) -> Result<()> {
    let (ws, wc) = (g.shape(s)[0], g.shape(c)[0]);
    hist_s.push(g.reshape(s, vec![1, ws])?);
    hist_c.push(g.reshape(c, vec![1, wc])?);
    Ok(())
}
