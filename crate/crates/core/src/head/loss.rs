use serde::{Deserialize, Serialize};

use super::{argmax_cell, BBox, HeadVars};
use crate::autograd::{OpKind, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const SCORE_CLAMP: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub center: f64,
    pub giou: f64,
    pub l1: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            center: 1.0,
            giou: 2.0,
            l1: 5.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let w = [self.center, self.giou, self.l1];
        if w.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) || w.iter().all(|&v| v == 0.0) {
            return Err(Error::Config(format!(
                "loss weights must be nonnegative with at least one positive, got {w:?}"
            )));
        }
        Ok(())
    }
}

/// Cell whose regressed box enters the GIoU and L1 terms during training.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegressionAnchor {
    #[default]
    GroundTruth,
    Predicted,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub weights: LossWeights,
    pub focal_alpha: f64,
    pub focal_beta: f64,
    pub anchor: RegressionAnchor,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            focal_alpha: 2.0,
            focal_beta: 4.0,
            anchor: RegressionAnchor::GroundTruth,
        }
    }
}

/// Gaussian heatmap centered on `center` (normalized), evaluated at cell centers.
pub fn gaussian_target(center: (f64, f64), grid: (usize, usize), sigma: f64) -> Result<Tensor> {
    let (cx, cy) = center;
    if !(0.0..=1.0).contains(&cx) || !(0.0..=1.0).contains(&cy) {
        return Err(Error::InvalidBox(format!("target center ({cx}, {cy}) outside the unit square")));
    }
    if !(sigma > 0.0) {
        return Err(Error::Config(format!("gaussian sigma must be positive, got {sigma}")));
    }
    let (h, w) = grid;
    let c_gt = cx * w as f64 - 0.5;
    let r_gt = cy * h as f64 - 0.5;
    let mut data = Vec::with_capacity(h * w);
    for r in 0..h {
        for c in 0..w {
            let d2 = (c as f64 - c_gt).powi(2) + (r as f64 - r_gt).powi(2);
            data.push((-d2 / (2.0 * sigma * sigma)).exp());
        }
    }
    Tensor::new([1, h, w], data)
}

/// Training target for one ground-truth box on an `h×w` grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Target {
    pub heatmap: Tensor,
    /// Row-major index of the cell containing the box center.
    pub cell: usize,
    pub sigma: f64,
}

/// Heatmap peaked at the center of the cell containing the box center, with
/// σ a sixth of the mean box side in cells (at least half a cell).
pub fn target_for(gt: &BBox, grid: (usize, usize)) -> Result<Target> {
    gt.validate_normalized()?;
    let (h, w) = grid;
    let c = ((gt.cx * w as f64).floor() as usize).min(w - 1);
    let r = ((gt.cy * h as f64).floor() as usize).min(h - 1);
    let sigma = ((gt.w * w as f64 + gt.h * h as f64) / 2.0 / 6.0).max(0.5);
    let center = ((c as f64 + 0.5) / w as f64, (r as f64 + 0.5) / h as f64);
    Ok(Target {
        heatmap: gaussian_target(center, grid, sigma)?,
        cell: r * w + c,
        sigma,
    })
}

/// Penalty-reduced focal loss and its gradient w.r.t. `scores`.
pub fn focal_loss_with_grad(scores: &Tensor, target: &Tensor, alpha: f64, beta: f64) -> Result<(f64, Vec<f64>)> {
    if scores.shape() != target.shape() {
        return Err(Error::mismatch("focal_loss", scores.shape(), target.shape()));
    }
    let mut total = 0.0;
    let mut grad = Vec::with_capacity(scores.len());
    let mut peaks = 0usize;
    for (&s, &t) in scores.data().iter().zip(target.data()) {
        let inside = s > SCORE_CLAMP && s < 1.0 - SCORE_CLAMP;
        let p = s.clamp(SCORE_CLAMP, 1.0 - SCORE_CLAMP);
        let (l, d) = if t == 1.0 {
            peaks += 1;
            let q = 1.0 - p;
            (
                -q.powf(alpha) * p.ln(),
                alpha * q.powf(alpha - 1.0) * p.ln() - q.powf(alpha) / p,
            )
        } else {
            let wt = (1.0 - t).powf(beta);
            let q = 1.0 - p;
            (
                -wt * p.powf(alpha) * q.ln(),
                -wt * (alpha * p.powf(alpha - 1.0) * q.ln() - p.powf(alpha) / q),
            )
        };
        total += l;
        grad.push(if inside { d } else { 0.0 });
    }
    let norm = peaks.max(1) as f64;
    grad.iter_mut().for_each(|g| *g /= norm);
    Ok((total / norm, grad))
}

pub fn focal_loss(scores: &Tensor, target: &Tensor, alpha: f64, beta: f64) -> Result<f64> {
    focal_loss_with_grad(scores, target, alpha, beta).map(|r| r.0)
}

/// `1 - GIoU` and its gradient w.r.t. `(cx, cy, w, h)` of `pred`.
pub fn giou_loss_with_grad(pred: &BBox, gt: &BBox) -> Result<(f64, [f64; 4])> {
    if !(gt.area() > 0.0) || gt.w < 0.0 {
        return Err(Error::InvalidBox(format!("ground truth {gt:?} has no area")));
    }
    if !(pred.w >= 0.0 && pred.h >= 0.0) || !pred.is_finite() {
        return Err(Error::InvalidBox(format!("prediction {pred:?} has negative size")));
    }
    let [px1, py1, px2, py2] = pred.corners();
    let [gx1, gy1, gx2, gy2] = gt.corners();

    let iw = px2.min(gx2) - px1.max(gx1);
    let ih = py2.min(gy2) - py1.max(gy1);
    let (iw, ih) = (iw.max(0.0), ih.max(0.0));
    let inter = iw * ih;
    let union = pred.area() + gt.area() - inter;
    let cw = px2.max(gx2) - px1.min(gx1);
    let ch = py2.max(gy2) - py1.min(gy1);
    let hull = cw * ch;
    let loss = 2.0 - inter / union - union / hull;

    // Partials of the loss w.r.t. intersection, prediction area and hull.
    let d_inter = -(union + inter) / (union * union) + 1.0 / hull;
    let d_area = inter / (union * union) - 1.0 / hull;
    let d_hull = union / (hull * hull);

    // Partials w.r.t. the prediction's corner coordinates.
    let step = |cond: bool| if cond { 1.0 } else { 0.0 };
    let overlap = iw > 0.0 && ih > 0.0;
    let (diw_x1, diw_x2) = if overlap { (-step(px1 > gx1), step(px2 < gx2)) } else { (0.0, 0.0) };
    let (dih_y1, dih_y2) = if overlap { (-step(py1 > gy1), step(py2 < gy2)) } else { (0.0, 0.0) };
    let (dcw_x1, dcw_x2) = (-step(px1 < gx1), step(px2 > gx2));
    let (dch_y1, dch_y2) = (-step(py1 < gy1), step(py2 > gy2));

    let gx1_ = d_inter * ih * diw_x1 + d_hull * ch * dcw_x1;
    let gx2_ = d_inter * ih * diw_x2 + d_hull * ch * dcw_x2;
    let gy1_ = d_inter * iw * dih_y1 + d_hull * cw * dch_y1;
    let gy2_ = d_inter * iw * dih_y2 + d_hull * cw * dch_y2;

    let grad = [
        gx1_ + gx2_,
        gy1_ + gy2_,
        (gx2_ - gx1_) / 2.0 + d_area * pred.h,
        (gy2_ - gy1_) / 2.0 + d_area * pred.w,
    ];
    Ok((loss, grad))
}

pub fn giou_loss(pred: &BBox, gt: &BBox) -> Result<f64> {
    giou_loss_with_grad(pred, gt).map(|r| r.0)
}

/// Mean absolute difference over `(cx, cy, w, h)` and its gradient.
pub fn l1_loss_with_grad(pred: &BBox, gt: &BBox) -> (f64, [f64; 4]) {
    let p = pred.to_array();
    let g = gt.to_array();
    let mut grad = [0.0; 4];
    let mut total = 0.0;
    for i in 0..4 {
        let d = p[i] - g[i];
        total += d.abs();
        grad[i] = if d > 0.0 {
            0.25
        } else if d < 0.0 {
            -0.25
        } else {
            0.0
        };
    }
    (total / 4.0, grad)
}

pub fn l1_loss(pred: &BBox, gt: &BBox) -> f64 {
    l1_loss_with_grad(pred, gt).0
}

/// Weighted loss node plus the unweighted term values.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub focal: f64,
    pub giou: f64,
    pub l1: f64,
}

/// Box `[1,4]` regressed at cell `k` as a graph node.
fn box_node(tape: &mut Tape, head: &HeadVars, k: usize) -> Result<Var> {
    let (_, h, w) = tape.value(head.offset).dims3()?;
    let pick = |tape: &mut Tape, map: Var| -> Result<Var> {
        let flat = tape.reshape(map, [2, h * w])?;
        let cols = tape.transpose(flat)?;
        tape.gather_rows(cols, &[k])
    };
    let off = pick(tape, head.offset)?;
    let size = pick(tape, head.size)?;
    let cell = tape.constant(Tensor::new([2], vec![(k % w) as f64, (k / w) as f64])?);
    let inv = tape.constant(Tensor::new([2], vec![1.0 / w as f64, 1.0 / h as f64])?);
    let center = tape.add_row(off, cell)?;
    let center = tape.mul_row(center, inv)?;
    tape.concat_cols(&[center, size])
}

/// Focal loss on the full center map plus GIoU and L1 on the box regressed
/// at the anchor cell, weighted and summed.
pub fn total_loss(tape: &mut Tape, head: &HeadVars, gt: &BBox, cfg: &LossConfig) -> Result<LossTerms> {
    cfg.weights.validate()?;
    let (_, h, w) = tape.value(head.center).dims3()?;
    let target = target_for(gt, (h, w))?;

    let (focal, fgrad) = focal_loss_with_grad(tape.value(head.center), &target.heatmap, cfg.focal_alpha, cfg.focal_beta)?;
    let focal_var = tape.loss_with_grad(OpKind::Focal, head.center, focal, fgrad)?;

    let k = match cfg.anchor {
        RegressionAnchor::GroundTruth => target.cell,
        RegressionAnchor::Predicted => argmax_cell(tape.value(head.center)),
    };
    let bx = box_node(tape, head, k)?;
    let d = tape.value(bx).data();
    let pred = BBox::new(d[0], d[1], d[2], d[3]);
    let (giou, ggrad) = giou_loss_with_grad(&pred, gt)?;
    let (l1, lgrad) = l1_loss_with_grad(&pred, gt);
    let giou_var = tape.loss_with_grad(OpKind::GIoU, bx, giou, ggrad.to_vec())?;
    let l1_var = tape.loss_with_grad(OpKind::L1, bx, l1, lgrad.to_vec())?;

    let mut total: Option<Var> = None;
    for (term, weight) in [
        (focal_var, cfg.weights.center),
        (giou_var, cfg.weights.giou),
        (l1_var, cfg.weights.l1),
    ] {
        if weight == 0.0 {
            continue;
        }
        let scaled = tape.scale(term, weight)?;
        total = Some(match total {
            Some(t) => tape.add(t, scaled)?,
            None => scaled,
        });
    }
    Ok(LossTerms {
        total: total.expect("at least one positive weight"),
        focal,
        giou,
        l1,
    })
}
