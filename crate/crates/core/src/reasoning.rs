//! History of state tokens and the selective state-space networks that infer
//! the current frame's tokens from it.

use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{LayerNorm, Linear};
use crate::numerics::{Graph, ParamGroup, ParamId, ParamStore, Scalar, Tensor, Var};
use crate::state_codec::StateTokenPair;

/// Ordered per-frame state tokens with a most-recent sampling window.
///
/// Every entry is kept; the window only limits what [`HistoryBuffer::view`]
/// returns.
#[derive(Clone, Debug, PartialEq)]
pub struct HistoryBuffer {
    entries: Vec<StateTokenPair>,
    window: usize,
}

impl HistoryBuffer {
    pub fn new(window: usize) -> Result<Self> {
        if window == 0 {
            return Err(Error::Config("history window must be at least 1".into()));
        }
        Ok(Self { entries: Vec::new(), window })
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn push(&mut self, pair: StateTokenPair) -> Result<()> {
        if let Some(last) = self.entries.last() {
            if pair.frame_index <= last.frame_index {
                return Err(Error::Contract(format!(
                    "history push for frame {} after frame {}",
                    pair.frame_index, last.frame_index
                )));
            }
        }
        self.entries.push(pair);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[StateTokenPair] {
        &self.entries
    }

    /// The first pushed pair, when it belongs to frame 0.
    pub fn initial(&self) -> Option<&StateTokenPair> {
        self.entries.first().filter(|p| p.frame_index == 0)
    }

    /// The `window` most recent entries, oldest first.
    pub fn view(&self) -> &[StateTokenPair] {
        let start = self.entries.len().saturating_sub(self.window);
        &self.entries[start..]
    }

    /// `([T, spatial], [T, channel])` matrices of the windowed view.
    pub fn view_tensors<T: Scalar>(&self) -> Result<(Tensor<T>, Tensor<T>)> {
        let view = self.view();
        if view.is_empty() {
            return Err(Error::Contract("reasoning over an empty history".into()));
        }
        stack(view)
    }
}

fn stack<T: Scalar>(pairs: &[StateTokenPair]) -> Result<(Tensor<T>, Tensor<T>)> {
    let (ws, wc) = (pairs[0].spatial.len(), pairs[0].channel.len());
    let mut s = Vec::with_capacity(pairs.len() * ws);
    let mut c = Vec::with_capacity(pairs.len() * wc);
    for p in pairs {
        if p.spatial.len() != ws || p.channel.len() != wc {
            return Err(Error::dim("history", &[ws, wc], &[p.spatial.len(), p.channel.len()]));
        }
        s.extend(p.spatial.iter().map(|&v| T::lit(v as f64)));
        c.extend(p.channel.iter().map(|&v| T::lit(v as f64)));
    }
    Ok((Tensor::new(vec![pairs.len(), ws], s)?, Tensor::new(vec![pairs.len(), wc], c)?))
}

/// One selective state-space layer over `[T, d]` sequences.
#[derive(Clone, Debug)]
pub struct ScanLayer {
    norm: LayerNorm,
    pub delta: Linear,
    pub b_proj: Linear,
    pub c_proj: Linear,
    pub a_log: ParamId,
    pub skip: ParamId,
}

impl ScanLayer {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, d: usize, n: usize, rng: &mut R) -> Self {
        let grp = ParamGroup::Head;
        let delta = Linear::new(store, &format!("{name}.delta"), d, d, true, grp, rng);
        // step sizes start log-uniform in [1e-3, 1e-1]
        let dist = Uniform::new(1e-3f64.ln(), 1e-1f64.ln()).expect("valid range");
        let bias = delta.b.expect("delta bias");
        for v in store.value_mut(bias).data_mut() {
            let dt = dist.sample(rng).exp();
            *v = (dt + (-(-dt).exp_m1()).ln()) as f32;
        }
        let a_log = Tensor::from_fn(vec![d, n], |i| ((i % n + 1) as f32).ln());
        Self {
            norm: LayerNorm::new(store, &format!("{name}.norm"), d, grp),
            delta,
            b_proj: Linear::new(store, &format!("{name}.b"), d, n, false, grp, rng),
            c_proj: Linear::new(store, &format!("{name}.c"), d, n, false, grp, rng),
            a_log: store.add_no_decay(format!("{name}.a_log"), a_log, grp),
            skip: store.add_no_decay(format!("{name}.skip"), Tensor::full(vec![d], 1.0), grp),
        }
    }

    /// The bare recurrence with its input-dependent projections.
    pub fn scan<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let dt = self.delta.forward(g, x)?;
        let dt = g.softplus(dt);
        let b = self.b_proj.forward(g, x)?;
        let c = self.c_proj.forward(g, x)?;
        let a = g.param(self.a_log);
        let a = g.exp(a);
        let a = g.neg(a);
        let skip = g.param(self.skip);
        g.selective_scan(x, dt, a, b, c, skip)
    }

    /// `x + scan(norm(x))`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let h = self.norm.forward(g, x)?;
        let h = self.scan(g, h)?;
        g.add(x, h)
    }
}

/// Stack of scan layers between an input and an output projection.
#[derive(Clone, Debug)]
pub struct SsmNet {
    input: Linear,
    pub layers: Vec<ScanLayer>,
    output: Linear,
    pub width: usize,
}

impl SsmNet {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, width: usize, cfg: &ModelConfig, rng: &mut R) -> Self {
        let grp = ParamGroup::Head;
        let input = Linear::new(store, &format!("{name}.input"), width, width, true, grp, rng);
        let layers = (0..cfg.ssm_layers)
            .map(|i| ScanLayer::new(store, &format!("{name}.layer{i}"), width, cfg.ssm_state, rng))
            .collect();
        let output = Linear::new(store, &format!("{name}.output"), width, width, true, grp, rng);
        // neutral gate at the start of training
        store.value_mut(output.b.expect("output bias")).data_mut().fill(0.5);
        Self { input, layers, output, width }
    }

    /// Unclamped output at the last position of `seq:[T, width]`.
    pub fn last_output<T: Scalar>(&self, g: &mut Graph<'_, T>, seq: Var) -> Result<Var> {
        let s = g.shape(seq).to_vec();
        if s.len() != 2 || s[1] != self.width || s[0] == 0 {
            return Err(Error::dim("ssm", &[1, self.width], &s));
        }
        let mut h = self.input.forward(g, seq)?;
        for layer in &self.layers {
            h = layer.forward(g, h)?;
        }
        let last = g.slice(h, 0, s[0] - 1, 1)?;
        let y = self.output.forward(g, last)?;
        g.reshape(y, vec![self.width])
    }
}

/// Reverse the row order of a `[T, w]` matrix.
pub fn reverse_rows<T: Scalar>(g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
    let t = g.shape(x)[0];
    let rows = (0..t).rev().map(|i| g.slice(x, 0, i, 1)).collect::<Result<Vec<_>>>()?;
    g.concat(&rows, 0)
}

/// Learned initial tokens plus the spatial and channel reasoning networks.
#[derive(Clone, Debug)]
pub struct Reasoner {
    pub spatial: SsmNet,
    pub channel: SsmNet,
    pub init_spatial: ParamId,
    pub init_channel: ParamId,
}

impl Reasoner {
    pub fn new<R: Rng>(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut R) -> Self {
        let ws = 2 * (cfg.template_size / crate::encoder::PATCH_STRIDE);
        let wc = cfg.dim;
        let grp = ParamGroup::Head;
        Self {
            spatial: SsmNet::new(store, "reason.spatial", ws, cfg, rng),
            channel: SsmNet::new(store, "reason.channel", wc, cfg, rng),
            init_spatial: store.add_no_decay("reason.init_spatial", Tensor::full(vec![ws], 0.5), grp),
            init_channel: store.add_no_decay("reason.init_channel", Tensor::full(vec![wc], 0.5), grp),
        }
    }

    /// The init-valued pair recorded for `frame_index`.
    pub fn init_pair(&self, store: &ParamStore, frame_index: usize) -> StateTokenPair {
        StateTokenPair {
            spatial: store.value(self.init_spatial).data().to_vec(),
            channel: store.value(self.init_channel).data().to_vec(),
            frame_index,
            source: crate::state_codec::TokenSource::Init,
        }
    }

    fn with_init<T: Scalar>(&self, g: &mut Graph<'_, T>, hist: Var, init: ParamId) -> Result<Var> {
        let p = g.param(init);
        let w = g.shape(p)[0];
        let p = g.reshape(p, vec![1, w])?;
        g.concat(&[hist, p], 0)
    }

    /// Unclamped `(spatial, channel)` outputs over `[history; init]`.
    ///
    /// `hist_s:[T, W+H]` and `hist_c:[T, D]` are ordered oldest first; with
    /// `reverse` the history is fed newest first.
    pub fn raw<T: Scalar>(&self, g: &mut Graph<'_, T>, hist_s: Var, hist_c: Var, reverse: bool) -> Result<(Var, Var)> {
        let (hs, hc) = if reverse {
            (reverse_rows(g, hist_s)?, reverse_rows(g, hist_c)?)
        } else {
            (hist_s, hist_c)
        };
        let seq_s = self.with_init(g, hs, self.init_spatial)?;
        let seq_c = self.with_init(g, hc, self.init_channel)?;
        Ok((self.spatial.last_output(g, seq_s)?, self.channel.last_output(g, seq_c)?))
    }

    /// Inferred tokens for the frame after the history.
    pub fn reason<T: Scalar>(&self, g: &mut Graph<'_, T>, hist_s: Var, hist_c: Var) -> Result<(Var, Var)> {
        let (s, c) = self.raw(g, hist_s, hist_c, false)?;
        Ok((g.clamp(s, 0.0, 1.0), g.clamp(c, 0.0, 1.0)))
    }

    /// Sum of the forward and reversed-history passes, clamped.
    pub fn reason_bidirectional<T: Scalar>(&self, g: &mut Graph<'_, T>, hist_s: Var, hist_c: Var) -> Result<(Var, Var)> {
        let (fs, fc) = self.raw(g, hist_s, hist_c, false)?;
        let (bs, bc) = self.raw(g, hist_s, hist_c, true)?;
        let s = g.add(fs, bs)?;
        let c = g.add(fc, bc)?;
        Ok((g.clamp(s, 0.0, 1.0), g.clamp(c, 0.0, 1.0)))
    }

    /// Inferred tokens from a history buffer, outside of any training graph.
    pub fn infer(&self, store: &ParamStore, psi: &HistoryBuffer, bidirectional: bool) -> Result<(Vec<f32>, Vec<f32>)> {
        let (ts, tc) = psi.view_tensors::<f32>()?;
        let mut g = Graph::no_grad(store);
        let hs = g.constant(ts);
        let hc = g.constant(tc);
        let (s, c) = if bidirectional {
            self.reason_bidirectional(&mut g, hs, hc)?
        } else {
            self.reason(&mut g, hs, hc)?
        };
        Ok((g.value(s).data().to_vec(), g.value(c).data().to_vec()))
    }
}
