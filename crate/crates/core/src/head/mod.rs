//! Center, offset and size prediction head on the search feature map, plus
//! box decoding and the training losses.

mod loss;

pub use loss::{
    focal_loss, focal_loss_with_grad, gaussian_target, giou_loss, giou_loss_with_grad, l1_loss,
    l1_loss_with_grad, target_for, total_loss, LossConfig, LossTerms, LossWeights,
    RegressionAnchor, Target,
};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{ConvSpec, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::module;
use crate::tensor::Tensor;

/// Axis-aligned box given by center and size.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self { cx, cy, w, h }
    }

    pub fn from_corners(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self::new((x1 + x2) / 2.0, (y1 + y2) / 2.0, x2 - x1, y2 - y1)
    }

    /// `(x1, y1, x2, y2)`.
    pub fn corners(&self) -> [f64; 4] {
        [
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        ]
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }

    /// Checks the box lies in normalized search-region coordinates.
    pub fn validate_normalized(&self) -> Result<()> {
        let ok = (0.0..=1.0).contains(&self.cx)
            && (0.0..=1.0).contains(&self.cy)
            && self.w > 0.0
            && self.w <= 1.0
            && self.h > 0.0
            && self.h <= 1.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidBox(format!("{self:?} is not a normalized box")))
        }
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        let [ax1, ay1, ax2, ay2] = self.corners();
        let [bx1, by1, bx2, by2] = other.corners();
        let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
        let ih = (ay2.min(by2) - ay1.max(by1)).max(0.0);
        let inter = iw * ih;
        // Areas from the same corners as the overlap, so identical boxes give exactly 1.
        let union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter;
        if union > 0.0 {
            inter / union
        } else {
            0.0
        }
    }
}

pub const INSTANCE_NORM_EPS: f64 = 1e-5;
pub const HEAD_STAGES: usize = 4;

/// 3×3 convolution (no bias), per-channel normalization over positions, ReLU.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvStage<T = Tensor> {
    pub kernel: T,
    pub gamma: T,
    pub beta: T,
}
module!(ConvStage { kernel, gamma, beta });

#[derive(Clone, Debug, PartialEq)]
pub struct Branch<T = Tensor> {
    pub stages: Vec<ConvStage<T>>,
    pub out_kernel: T,
    pub out_bias: T,
}
module!(Branch { out_kernel, out_bias }; stages);

#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams<T = Tensor> {
    pub center: Branch<T>,
    pub offset: Branch<T>,
    pub size: Branch<T>,
}
module!(HeadParams {}; center, offset, size);

impl Branch<Tensor> {
    fn init<R: Rng + ?Sized>(c: usize, cout: usize, bias: f64, rng: &mut R) -> Self {
        let mut cin = c;
        let mut stages = Vec::with_capacity(HEAD_STAGES);
        for _ in 0..HEAD_STAGES {
            let next = (cin / 2).max(1);
            let std = (2.0 / (9 * cin) as f64).sqrt();
            stages.push(ConvStage {
                kernel: Tensor::randn([next, cin, 3, 3], std, rng),
                gamma: Tensor::ones([next]),
                beta: Tensor::zeros([next]),
            });
            cin = next;
        }
        let bound = (6.0 / (cin + cout) as f64).sqrt();
        Self {
            stages,
            out_kernel: Tensor::uniform([cout, cin, 1, 1], bound, rng),
            out_bias: Tensor::full([cout], bias),
        }
    }
}

impl HeadParams<Tensor> {
    /// Center bias starts at a 0.1 prior and size bias at a quarter of the
    /// search region, the expected target extent.
    pub fn init<R: Rng + ?Sized>(c: usize, rng: &mut R) -> Self {
        let logit = |p: f64| (p / (1.0 - p)).ln();
        Self {
            center: Branch::init(c, 1, logit(0.1), rng),
            offset: Branch::init(c, 2, 0.0, rng),
            size: Branch::init(c, 2, logit(0.25), rng),
        }
    }
}

/// Head outputs as tape nodes: center `[1,h,w]`, offset and size `[2,h,w]`.
#[derive(Clone, Copy, Debug)]
pub struct HeadVars {
    pub center: Var,
    pub offset: Var,
    pub size: Var,
}

/// Head outputs detached from the tape.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadOutput {
    pub center: Tensor,
    pub offset: Tensor,
    pub size: Tensor,
}

impl HeadOutput {
    pub fn from_vars(tape: &Tape, v: &HeadVars) -> Self {
        Self {
            center: tape.value(v.center).clone(),
            offset: tape.value(v.offset).clone(),
            size: tape.value(v.size).clone(),
        }
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.center.shape()[1], self.center.shape()[2])
    }
}

fn branch_forward(tape: &mut Tape, x: Var, b: &Branch<Var>) -> Result<Var> {
    let (_, h, w) = tape.value(x).dims3()?;
    let mut x = x;
    for s in &b.stages {
        let y = tape.conv2d(x, s.kernel, ConvSpec::same(3))?;
        let c = tape.shape(y)[0];
        let y = tape.reshape(y, [c, h * w])?;
        let y = tape.standardize_rows(y, INSTANCE_NORM_EPS)?;
        let y = tape.mul_col(y, s.gamma)?;
        let y = tape.add_col(y, s.beta)?;
        let y = tape.relu(y)?;
        x = tape.reshape(y, [c, h, w])?;
    }
    let y = tape.conv2d(x, b.out_kernel, ConvSpec::same(1))?;
    let c = tape.shape(y)[0];
    let y = tape.reshape(y, [c, h * w])?;
    let y = tape.add_col(y, b.out_bias)?;
    let y = tape.sigmoid(y)?;
    tape.reshape(y, [c, h, w])
}

/// Runs the three branches on a `C×h×w` feature map.
pub fn head_forward(tape: &mut Tape, feat: Var, params: &HeadParams<Var>) -> Result<HeadVars> {
    let (c, _, _) = tape.value(feat).dims3()?;
    let expect = tape.shape(params.center.stages[0].kernel)[1];
    if c != expect {
        return Err(Error::mismatch("head_forward", tape.shape(feat), &[expect]));
    }
    Ok(HeadVars {
        center: branch_forward(tape, feat, &params.center)?,
        offset: branch_forward(tape, feat, &params.offset)?,
        size: branch_forward(tape, feat, &params.size)?,
    })
}

/// Row-major index of the first maximal entry.
pub fn argmax_cell(scores: &Tensor) -> usize {
    let mut best = 0;
    for (i, &v) in scores.data().iter().enumerate() {
        if v > scores.data()[best] {
            best = i;
        }
    }
    best
}

/// Box regressed at the highest-scoring cell.
pub fn decode_box(out: &HeadOutput) -> BBox {
    let (_, w) = out.grid();
    let k = argmax_cell(&out.center);
    box_at(out, k / w, k % w)
}

/// Box regressed at cell `(r, c)`.
pub fn box_at(out: &HeadOutput, r: usize, c: usize) -> BBox {
    let (h, w) = out.grid();
    let k = r * w + c;
    let hw = h * w;
    let off = out.offset.data();
    let size = out.size.data();
    BBox::new(
        (c as f64 + off[k]) / w as f64,
        (r as f64 + off[hw + k]) / h as f64,
        size[k],
        size[hw + k],
    )
}
