use std::fmt;

use crate::bbox::BBox;
use crate::config::TrackConfig;
use crate::decoder_head::{decode_box, HeadOutput};
use crate::error::{Error, Result};
use crate::imaging::{context_crop, Frame};
use crate::model::Model;
use crate::numerics::Graph;
use crate::reasoning::HistoryBuffer;
use crate::state_codec::{StateTokenPair, TokenSource};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrackResult {
    pub frame_index: usize,
    pub bbox: BBox,
    pub confidence: f32,
}

/// How a frame's state tokens were inferred.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Frame 0: the template frame itself.
    Init,
    Forward,
    Bidirectional,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Init => "init",
            Mode::Forward => "forward",
            Mode::Bidirectional => "bidirectional",
        }
    }
}

/// Policy record of one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameTrace {
    pub frame_index: usize,
    pub mode: Mode,
    pub confidence: f32,
    /// Source of the history entry written for this frame; `None` when the
    /// variant keeps no history.
    pub source: Option<TokenSource>,
    /// Whether the confidence gate replaced the state with the init pair.
    pub gated: bool,
    /// Whether the compression crop reached outside the frame.
    pub clipped: bool,
}

impl fmt::Display for FrameTrace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "frame={} mode={} confidence={:.6} source={} gated={} clipped={}",
            self.frame_index,
            self.mode.as_str(),
            self.confidence,
            self.source.map_or("none", TokenSource::as_str),
            self.gated,
            self.clipped
        )
    }
}

#[derive(Clone, Debug)]
pub struct TrackOutput {
    pub results: Vec<TrackResult>,
    pub trace: Vec<FrameTrace>,
    pub history: HistoryBuffer,
}

fn compressed_pair(model: &Model, template: &Frame, crop: &Frame, frame_index: usize) -> Result<StateTokenPair> {
    let mut g = Graph::<f32>::no_grad(&model.store);
    let (_, s, c) = model.true_state(&mut g, template, crop)?;
    Ok(StateTokenPair {
        spatial: g.value(s).data().to_vec(),
        channel: g.value(c).data().to_vec(),
        frame_index,
        source: TokenSource::Compressed,
    })
}

/// Track the target given by `init` in frame 0 through `frames`.
pub fn track_sequence(model: &Model, frames: &[Frame], init: &BBox, cfg: &TrackConfig) -> Result<TrackOutput> {
    cfg.validate()?;
    let first = frames.first().ok_or_else(|| Error::Contract("no frames to track".into()))?;
    let canvas = model.cfg.canvas;
    if first.shape() != [3, canvas, canvas] {
        return Err(Error::dim("track_sequence", &[3, canvas, canvas], first.shape()));
    }
    init.check(canvas)?;
    let (ctx, tsize) = (model.cfg.context_factor, model.cfg.template_size);
    let (template, clipped) = context_crop(first, init, ctx, tsize);
    let mut history = HistoryBuffer::new(cfg.window)?;
    let keeps_history = model.uses_history();
    if keeps_history {
        history.push(compressed_pair(model, &template, &template, 0)?)?;
    }
    let mut results = vec![TrackResult { frame_index: 0, bbox: *init, confidence: 1.0 }];
    let mut trace = vec![FrameTrace {
        frame_index: 0,
        mode: Mode::Init,
        confidence: 1.0,
        source: keeps_history.then_some(TokenSource::Compressed),
        gated: false,
        clipped,
    }];
    for (t, frame) in frames.iter().enumerate().skip(1) {
        if frame.shape() != first.shape() {
            return Err(Error::dim("track_sequence", first.shape(), frame.shape()));
        }
        let bidirectional = t % cfg.interval == 0;
        let mode = if bidirectional { Mode::Bidirectional } else { Mode::Forward };
        let mut g = Graph::<f32>::no_grad(&model.store);
        let hist = if keeps_history {
            let (ts, tc) = history.view_tensors::<f32>()?;
            Some((g.constant(ts), g.constant(tc)))
        } else {
            None
        };
        let out = model.frame_forward(&mut g, &template, frame, hist, bidirectional)?;
        let (bbox, confidence) = decode_box(&HeadOutput::from_graph(&g, &out.head))?;
        let gated = (confidence as f64) < cfg.threshold || bbox.is_degenerate(canvas);
        let mut entry = TraceEntry { source: None, clipped: false };
        if keeps_history {
            let pair = if gated {
                model.reasoner.init_pair(&model.store, t)
            } else if cfg.parity.compresses(t) {
                let (crop, clip) = context_crop(frame, &bbox, ctx, tsize);
                entry.clipped = clip;
                compressed_pair(model, &template, &crop, t)?
            } else {
                match out.inferred {
                    Some((s, c)) => StateTokenPair {
                        spatial: g.value(s).data().to_vec(),
                        channel: g.value(c).data().to_vec(),
                        frame_index: t,
                        source: TokenSource::Inferred,
                    },
                    None => return Err(Error::Contract("history kept without a reasoner".into())),
                }
            };
            entry.source = Some(pair.source);
            history.push(pair)?;
        }
        results.push(TrackResult { frame_index: t, bbox, confidence });
        trace.push(FrameTrace {
            frame_index: t,
            mode,
            confidence,
            source: entry.source,
            gated,
            clipped: entry.clipped,
        });
    }
    Ok(TrackOutput { results, trace, history })
}

struct TraceEntry {
    source: Option<TokenSource>,
    clipped: bool,
}

/// `frame_index cx cy w h confidence` lines with six decimals.
pub fn format_results(results: &[TrackResult]) -> String {
    let mut out = String::new();
    for r in results {
        let b = &r.bbox;
        out.push_str(&format!(
            "{} {:.6} {:.6} {:.6} {:.6} {:.6}\n",
            r.frame_index, b.cx, b.cy, b.w, b.h, r.confidence
        ));
    }
    out
}

pub fn parse_results(text: &str) -> Result<Vec<TrackResult>> {
    let mut out = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = || Error::Config(format!("results line {}: expected `frame_index cx cy w h confidence`", ln + 1));
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 6 {
            return Err(bad());
        }
        let frame_index = f[0].parse().map_err(|_| bad())?;
        let v: Vec<f64> = f[1..]
            .iter()
            .map(|s| s.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| bad())?;
        out.push(TrackResult {
            frame_index,
            bbox: BBox::new(v[0], v[1], v[2], v[3]),
            confidence: v[4] as f32,
        });
    }
    Ok(out)
}
