//! Tracking losses, state and reconstruction supervision, and their weighted
//! combination.

use std::fmt;

use crate::bbox::BBox;
use crate::config::LossWeights;
use crate::decoder_head::HeadVars;
use crate::error::{Error, Result};
use crate::numerics::{Graph, Scalar, Tensor, Var};

fn same_shape<T: Scalar>(g: &Graph<'_, T>, op: &'static str, a: Var, b: Var) -> Result<()> {
    if g.shape(a) != g.shape(b) {
        return Err(Error::dim(op, g.shape(a), g.shape(b)));
    }
    Ok(())
}

fn squared_distance<T: Scalar>(g: &mut Graph<'_, T>, a: Var, b: Var) -> Result<Var> {
    let d = g.sub(a, b)?;
    let d = g.square(d)?;
    Ok(g.sum(d))
}

/// `|s - s_hat|^2 + |c - c_hat|^2`, summed over elements.
pub fn state_loss<T: Scalar>(g: &mut Graph<'_, T>, s: Var, c: Var, s_hat: Var, c_hat: Var) -> Result<Var> {
    same_shape(g, "state_loss", s, s_hat)?;
    same_shape(g, "state_loss", c, c_hat)?;
    let a = squared_distance(g, s, s_hat)?;
    let b = squared_distance(g, c, c_hat)?;
    g.add(a, b)
}

/// `|f - f_hat|^2`, summed over elements.
pub fn recon_loss<T: Scalar>(g: &mut Graph<'_, T>, f: Var, f_hat: Var) -> Result<Var> {
    same_shape(g, "recon_loss", f, f_hat)?;
    squared_distance(g, f, f_hat)
}

pub fn ssm_loss<T: Scalar>(g: &mut Graph<'_, T>, state: Var, recon: Var, w: &LossWeights) -> Result<Var> {
    let a = g.scale(state, w.alpha_state);
    let b = g.scale(recon, w.beta_recon);
    g.add(a, b)
}

/// Scalar form of [`ssm_loss`].
pub fn ssm_value(state: f64, recon: f64, w: &LossWeights) -> Result<f64> {
    if !(state >= 0.0 && recon >= 0.0) {
        return Err(Error::Contract(format!("ssm loss of negative parts ({state}, {recon})")));
    }
    Ok(w.alpha_state * state + w.beta_recon * recon)
}

/// Scalar form of [`total_loss`].
pub fn total_value(cls: f64, iou: f64, l1: f64, ssm: f64, w: &LossWeights) -> f64 {
    cls + w.lambda_iou * iou + w.lambda_l1 * l1 + w.lambda_ssm * ssm
}

/// Weighted sum of the tracking terms and, when present, the ssm term.
pub fn total_loss<T: Scalar>(g: &mut Graph<'_, T>, track: &TrackTerms, ssm: Option<Var>, w: &LossWeights) -> Result<Var> {
    let iou = g.scale(track.iou, w.lambda_iou);
    let l1 = g.scale(track.l1, w.lambda_l1);
    let t = g.add(track.cls, iou)?;
    let mut t = g.add(t, l1)?;
    if let Some(s) = ssm {
        let s = g.scale(s, w.lambda_ssm);
        t = g.add(t, s)?;
    }
    Ok(t)
}

/// Grid cell `(row, col)` holding the box center.
pub fn center_cell(gt: &BBox, h: usize, w: usize) -> (usize, usize) {
    let cell = |v: f64, n: usize| ((v * n as f64).floor().max(0.0) as usize).min(n - 1);
    (cell(gt.cy, h), cell(gt.cx, w))
}

/// Unit-peak Gaussian at the center cell, standard deviation a sixth of the
/// box extent in cells per axis.
pub fn gaussian_target(gt: &BBox, h: usize, w: usize) -> Tensor<f64> {
    let (ci, cj) = center_cell(gt, h, w);
    let sx = (gt.w * w as f64 / 6.0).max(1e-3);
    let sy = (gt.h * h as f64 / 6.0).max(1e-3);
    Tensor::from_fn(vec![1, h, w], |k| {
        let (i, j) = ((k / w) as f64 - ci as f64, (k % w) as f64 - cj as f64);
        (-(j * j) / (2.0 * sx * sx) - (i * i) / (2.0 * sy * sy)).exp()
    })
}

#[derive(Clone, Copy, Debug)]
pub struct TrackTerms {
    pub cls: Var,
    pub iou: Var,
    pub l1: Var,
}

/// Focal loss on the center logits against `gaussian_target`, normalized by
/// the number of peak cells.
pub fn focal_loss<T: Scalar>(g: &mut Graph<'_, T>, logits: Var, target: &Tensor<f64>, w: &LossWeights) -> Result<Var> {
    if g.shape(logits) != target.shape() {
        return Err(Error::dim("focal_loss", g.shape(logits), target.shape()));
    }
    let pos: Vec<f64> = target.data().iter().map(|&y| if y == 1.0 { 1.0 } else { 0.0 }).collect();
    let npos = pos.iter().sum::<f64>().max(1.0);
    let neg: Vec<f64> = target
        .data()
        .iter()
        .zip(&pos)
        .map(|(&y, &p)| if p == 1.0 { 0.0 } else { (1.0 - y).powf(w.focal_beta) })
        .collect();
    let shape = target.shape().to_vec();
    let lit = |v: Vec<f64>| Tensor::new(shape.clone(), v.into_iter().map(T::lit).collect()).expect("target shape");
    // -log p = softplus(-z), -log(1-p) = softplus(z)
    let nz = g.neg(logits);
    let sp_neg = g.softplus(nz);
    let sp_pos = g.softplus(logits);
    let one_minus_p_pow = g.scale(sp_pos, -w.focal_alpha);
    let one_minus_p_pow = g.exp(one_minus_p_pow);
    let p_pow = g.scale(sp_neg, -w.focal_alpha);
    let p_pow = g.exp(p_pow);
    let pos_w = g.constant(lit(pos));
    let neg_w = g.constant(lit(neg));
    let a = g.mul(one_minus_p_pow, sp_neg)?;
    let a = g.mul(a, pos_w)?;
    let b = g.mul(p_pow, sp_pos)?;
    let b = g.mul(b, neg_w)?;
    let s = g.add(a, b)?;
    let s = g.sum(s);
    Ok(g.scale(s, 1.0 / npos))
}

/// `1 - GIoU` of the box read at `cell` against `gt`, with `pw`, `ph` shaped
/// `[1, 1, 1]` and the predicted center at the cell center.
fn giou_loss<T: Scalar>(g: &mut Graph<'_, T>, pw: Var, ph: Var, cell: (usize, usize), grid: (usize, usize), gt: &BBox) -> Result<Var> {
    let cx = (cell.1 as f64 + 0.5) / grid.1 as f64;
    let cy = (cell.0 as f64 + 0.5) / grid.0 as f64;
    let (gx1, gy1, gx2, gy2) = gt.corners();
    let c = |g: &mut Graph<'_, T>, v: f64| g.constant(Tensor::full(vec![1, 1, 1], T::lit(v)));
    let hw = g.scale(pw, 0.5);
    let hh = g.scale(ph, 0.5);
    let cxv = c(g, cx);
    let cyv = c(g, cy);
    let px1 = g.sub(cxv, hw)?;
    let px2 = g.add(cxv, hw)?;
    let py1 = g.sub(cyv, hh)?;
    let py2 = g.add(cyv, hh)?;
    let (gx1, gy1, gx2, gy2) = (c(g, gx1), c(g, gy1), c(g, gx2), c(g, gy2));
    let extent = |g: &mut Graph<'_, T>, a1: Var, a2: Var, b1: Var, b2: Var, inner: bool| -> Result<Var> {
        if inner {
            let hi = g.minimum(a2, b2)?;
            let lo = g.maximum(a1, b1)?;
            let d = g.sub(hi, lo)?;
            Ok(g.clamp(d, 0.0, f64::INFINITY))
        } else {
            let hi = g.maximum(a2, b2)?;
            let lo = g.minimum(a1, b1)?;
            g.sub(hi, lo)
        }
    };
    let iw = extent(g, px1, px2, gx1, gx2, true)?;
    let ih = extent(g, py1, py2, gy1, gy2, true)?;
    let inter = g.mul(iw, ih)?;
    let parea = g.mul(pw, ph)?;
    let union = g.offset(parea, gt.area());
    let union = g.sub(union, inter)?;
    let hw_ = extent(g, px1, px2, gx1, gx2, false)?;
    let hh_ = extent(g, py1, py2, gy1, gy2, false)?;
    let hull = g.mul(hw_, hh_)?;
    let iou = g.div(inter, union)?;
    let gap = g.sub(hull, union)?;
    let gap = g.div(gap, hull)?;
    let giou = g.sub(iou, gap)?;
    let loss = g.rsub(1.0, giou);
    g.reshape(loss, Vec::<usize>::new())
}

/// Focal, GIoU and L1 terms of one head output.
pub fn track_loss<T: Scalar>(g: &mut Graph<'_, T>, head: &HeadVars, gt: &BBox, w: &LossWeights) -> Result<TrackTerms> {
    let s = g.shape(head.cls).to_vec();
    let (h, wd) = (s[1], s[2]);
    if !(gt.w > 0.0 && gt.h > 0.0) || !gt.cx.is_finite() || !gt.cy.is_finite() {
        return Err(Error::DegenerateBox(format!("{gt:?}")));
    }
    let target = gaussian_target(gt, h, wd);
    let cls = focal_loss(g, head.logits, &target, w)?;
    let cell = center_cell(gt, h, wd);
    let at = |g: &mut Graph<'_, T>, ch: usize| -> Result<Var> {
        let v = g.slice(head.size, 0, ch, 1)?;
        let v = g.slice(v, 1, cell.0, 1)?;
        g.slice(v, 2, cell.1, 1)
    };
    let pw = at(g, 0)?;
    let ph = at(g, 1)?;
    let tw = g.constant(Tensor::full(vec![1, 1, 1], T::lit(gt.w)));
    let th = g.constant(Tensor::full(vec![1, 1, 1], T::lit(gt.h)));
    let dw = g.sub(pw, tw)?;
    let dw = g.abs(dw);
    let dh = g.sub(ph, th)?;
    let dh = g.abs(dh);
    let l1 = g.add(dw, dh)?;
    let l1 = g.reshape(l1, Vec::<usize>::new())?;
    let iou = giou_loss(g, pw, ph, cell, (h, wd), gt)?;
    Ok(TrackTerms { cls, iou, l1 })
}

/// Loss values of one step, with the weights they were combined under.
#[derive(Clone, Debug, PartialEq)]
pub struct LossReport {
    pub l_cls: f64,
    pub l_iou: f64,
    pub l_l1: f64,
    pub l_state: f64,
    pub l_recon: f64,
    pub l_ssm: f64,
    pub l_total: f64,
    pub weights: LossWeights,
}

impl LossReport {
    pub fn from_parts(cls: f64, iou: f64, l1: f64, state: f64, recon: f64, weights: &LossWeights) -> Result<Self> {
        let l_ssm = ssm_value(state, recon, weights)?;
        Ok(Self {
            l_cls: cls,
            l_iou: iou,
            l_l1: l1,
            l_state: state,
            l_recon: recon,
            l_ssm,
            l_total: total_value(cls, iou, l1, l_ssm, weights),
            weights: weights.clone(),
        })
    }

    /// Look up a field of a telemetry line written by `Display`.
    pub fn field(line: &str, key: &str) -> Option<f64> {
        line.split_whitespace()
            .filter_map(|kv| kv.split_once('='))
            .find(|(k, _)| *k == key)
            .and_then(|(_, v)| v.parse().ok())
    }
}

impl fmt::Display for LossReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let w = &self.weights;
        write!(
            f,
            "l_cls={:.6} l_iou={:.6} l_l1={:.6} l_state={:.6} l_recon={:.6} l_ssm={:.6} l_total={:.6} \
             alpha={} beta={} lambda_iou={} lambda_l1={} lambda_ssm={}",
            self.l_cls,
            self.l_iou,
            self.l_l1,
            self.l_state,
            self.l_recon,
            self.l_ssm,
            self.l_total,
            w.alpha_state,
            w.beta_recon,
            w.lambda_iou,
            w.lambda_l1,
            w.lambda_ssm
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn w() -> LossWeights {
        LossWeights::default()
    }

    fn scalar(g: &Graph<'_, f64>, v: Var) -> f64 {
        g.value(v).item()
    }

    #[test]
    fn state_loss_examples() {
        let mut g = Graph::<f64>::new();
        let mut sv = vec![0.5; 8];
        let s = g.constant(Tensor::new(vec![8], sv.clone()).unwrap());
        sv[0] += 0.3;
        let sh = g.constant(Tensor::new(vec![8], sv).unwrap());
        let c = g.constant(Tensor::full(vec![4], 0.2));
        let l = state_loss(&mut g, s, c, sh, c).unwrap();
        assert!((scalar(&g, l) - 0.09).abs() < 1e-12);
        let z = state_loss(&mut g, s, c, s, c).unwrap();
        assert_eq!(scalar(&g, z), 0.0);
    }

    #[test]
    fn recon_loss_example() {
        let mut g = Graph::<f64>::new();
        let f = g.constant(Tensor::full(vec![64, 4, 4], 0.3));
        let fh = g.constant(Tensor::full(vec![64, 4, 4], 0.4));
        let l = recon_loss(&mut g, f, fh).unwrap();
        assert!((scalar(&g, l) - 10.24).abs() < 1e-9);
        let bad = g.constant(Tensor::zeros(vec![64, 4]));
        assert!(recon_loss(&mut g, f, bad).is_err());
    }

    #[test]
    fn ssm_and_total_arithmetic() {
        assert!((ssm_value(0.2, 0.1, &w()).unwrap() - 0.2).abs() < 1e-12);
        assert_eq!(ssm_value(0.0, 0.0, &w()).unwrap(), 0.0);
        assert!((ssm_value(1.0, 0.5, &w()).unwrap() - 1.0).abs() < 1e-12);
        assert!(matches!(ssm_value(-0.1, 0.0, &w()), Err(Error::Contract(_))));
        assert!((total_value(1.0, 0.5, 0.2, 0.25, &w()) - 4.0).abs() < 1e-12);
        assert_eq!(total_value(0.0, 0.0, 0.0, 0.0, &w()), 0.0);
    }

    fn head_at(g: &mut Graph<'_, f64>, logits: Tensor<f64>, size: Tensor<f64>) -> HeadVars {
        let l = g.input(logits);
        let cls = g.sigmoid(l);
        let s = g.input(size);
        HeadVars { logits: l, cls, size: s }
    }

    #[test]
    fn perfect_box_has_zero_regression_loss() {
        let gt = BBox::new(3.5 / 8.0, 2.5 / 8.0, 0.25, 0.375);
        let mut g = Graph::<f64>::new();
        let size = Tensor::from_fn(vec![2, 8, 8], |i| if i < 64 { 0.25 } else { 0.375 });
        let head = head_at(&mut g, Tensor::zeros(vec![1, 8, 8]), size);
        let t = track_loss(&mut g, &head, &gt, &w()).unwrap();
        assert!(scalar(&g, t.l1).abs() < 1e-12);
        assert!(scalar(&g, t.iou).abs() < 1e-12);
    }

    #[test]
    fn distant_box_giou_loss_near_two() {
        // tiny box in the corner of its cell, tiny prediction at the cell center
        let gt = BBox::new(0.002, 0.002, 0.002, 0.002);
        let mut g = Graph::<f64>::new();
        let head = head_at(&mut g, Tensor::zeros(vec![1, 8, 8]), Tensor::full(vec![2, 8, 8], 0.002));
        let t = track_loss(&mut g, &head, &gt, &w()).unwrap();
        let v = scalar(&g, t.iou);
        assert!(v > 1.99 && v < 2.0, "{v}");
    }

    #[test]
    fn degenerate_gt_is_rejected() {
        let mut g = Graph::<f64>::new();
        let head = head_at(&mut g, Tensor::zeros(vec![1, 8, 8]), Tensor::full(vec![2, 8, 8], 0.1));
        let gt = BBox::new(0.5, 0.5, 0.0, 0.2);
        assert!(matches!(track_loss(&mut g, &head, &gt, &w()), Err(Error::DegenerateBox(_))));
    }

    #[test]
    fn gaussian_target_peaks_at_center_cell() {
        let gt = BBox::new(0.3, 0.7, 0.25, 0.25);
        let t = gaussian_target(&gt, 8, 8);
        let (i, j) = center_cell(&gt, 8, 8);
        assert_eq!((i, j), (5, 2));
        assert_eq!(t.data()[i * 8 + j], 1.0);
        assert_eq!(t.data().iter().filter(|&&v| v == 1.0).count(), 1);
    }

    #[test]
    fn focal_loss_matches_probability_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let logits = Tensor::<f64>::randn(vec![1, 8, 8], 2.0, &mut rng);
        let gt = BBox::new(0.55, 0.4, 0.3, 0.2);
        let target = gaussian_target(&gt, 8, 8);
        let mut g = Graph::<f64>::new();
        let l = g.input(logits.clone());
        let v = focal_loss(&mut g, l, &target, &w()).unwrap();
        let mut want = 0.0;
        for (&z, &y) in logits.data().iter().zip(target.data()) {
            let p = 1.0 / (1.0 + (-z).exp());
            want += if y == 1.0 {
                -(1.0 - p).powi(2) * p.ln()
            } else {
                -(1.0 - y).powi(4) * p.powi(2) * (1.0 - p).ln()
            };
        }
        assert!((scalar(&g, v) - want).abs() < 1e-9);
    }

    #[test]
    fn report_line_round_trips_fields() {
        let r = LossReport::from_parts(1.0, 0.5, 0.2, 0.1, 0.2, &w()).unwrap();
        assert!((r.l_ssm - 0.25).abs() < 1e-12);
        assert!((r.l_total - 4.0).abs() < 1e-12);
        let line = r.to_string();
        assert_eq!(LossReport::field(&line, "l_total"), Some(4.0));
        assert_eq!(LossReport::field(&line, "lambda_ssm"), Some(4.0));
    }
}
