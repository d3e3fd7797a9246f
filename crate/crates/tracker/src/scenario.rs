//! Procedurally generated tracking sequences.
//!
//! Objects are axis-aligned rectangles, drawn with exact area coverage so
//! sub-pixel motion is visible. The target may carry an inner accent square;
//! distractors share its shape family and, in the hard suite, its colors.

use grm_core::head::BBox;
use grm_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Result, TrackerError};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectSpec {
    pub color: [f64; 3],
    /// Width and height in pixels.
    pub size: [f64; 2],
    /// Standard deviation of the per-frame velocity kick, in pixels.
    pub motion: f64,
    /// Color of a centered inner rectangle of half the object's size.
    #[serde(default)]
    pub accent: Option<[f64; 3]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticScenario {
    pub seed: u64,
    pub frames: usize,
    /// Width and height in pixels.
    pub canvas: [usize; 2],
    pub background: [f64; 3],
    pub target: ObjectSpec,
    #[serde(default)]
    pub distractors: Vec<ObjectSpec>,
    /// Standard deviation of additive pixel noise.
    #[serde(default)]
    pub noise: f64,
}

/// Velocity damping of the random walk.
const MOMENTUM: f64 = 0.8;

#[derive(Clone, Debug)]
pub struct Frame {
    pub image: Tensor,
    pub gt: Option<BBox>,
}

/// A generated sequence. Frames are rendered on demand from the stored
/// trajectories, so long sequences cost little memory.
#[derive(Clone, Debug)]
pub struct Sequence {
    pub spec: SyntheticScenario,
    /// `boxes[t][0]` is the target, followed by the distractors.
    boxes: Vec<Vec<BBox>>,
}

fn check_color(what: &str, c: &[f64; 3]) -> Result<()> {
    if c.iter().all(|v| (0.0..=1.0).contains(v)) {
        Ok(())
    } else {
        Err(TrackerError::Scenario(format!("{what} color {c:?} outside [0, 1]")))
    }
}

impl ObjectSpec {
    fn validate(&self, what: &str, canvas: [usize; 2]) -> Result<()> {
        check_color(what, &self.color)?;
        if let Some(a) = &self.accent {
            check_color(what, a)?;
        }
        let [w, h] = self.size;
        if !(w > 0.0 && h > 0.0 && w.is_finite() && h.is_finite()) {
            return Err(TrackerError::Scenario(format!("{what} size {:?} must be positive", self.size)));
        }
        if w > canvas[0] as f64 || h > canvas[1] as f64 {
            return Err(TrackerError::Scenario(format!(
                "{what} of size {w}x{h} cannot fit inside the {}x{} canvas",
                canvas[0], canvas[1]
            )));
        }
        if !(self.motion >= 0.0 && self.motion.is_finite()) {
            return Err(TrackerError::Scenario(format!("{what} motion must be nonnegative")));
        }
        Ok(())
    }
}

impl SyntheticScenario {
    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 {
            return Err(TrackerError::Scenario("frame count must be positive".into()));
        }
        if self.canvas.contains(&0) {
            return Err(TrackerError::Scenario("canvas must be non-empty".into()));
        }
        check_color("background", &self.background)?;
        self.target.validate("target", self.canvas)?;
        for (i, d) in self.distractors.iter().enumerate() {
            d.validate(&format!("distractor {i}"), self.canvas)?;
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(TrackerError::Scenario("noise must be nonnegative".into()));
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn digest(&self) -> String {
        hex_digest(&serde_json::to_vec(self).expect("scenario serializes"))
    }
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Hex SHA-256 of the little-endian pixel data.
pub fn image_checksum(image: &Tensor) -> String {
    hex_digest(&image.to_le_bytes())
}

fn walk(obj: &ObjectSpec, canvas: [usize; 2], frames: usize, rng: &mut ChaCha8Rng) -> Vec<BBox> {
    let [w, h] = obj.size;
    let lo = [w / 2.0, h / 2.0];
    let hi = [canvas[0] as f64 - w / 2.0, canvas[1] as f64 - h / 2.0];
    let mut pos = [0.0; 2];
    for a in 0..2 {
        pos[a] = if hi[a] > lo[a] { rng.random_range(lo[a]..hi[a]) } else { lo[a] };
    }
    let kick = Normal::new(0.0, 1.0).expect("unit normal");
    let mut vel = [kick.sample(rng) * obj.motion, kick.sample(rng) * obj.motion];
    let mut out = Vec::with_capacity(frames);
    for _ in 0..frames {
        out.push(BBox::new(pos[0], pos[1], w, h));
        for a in 0..2 {
            vel[a] = MOMENTUM * vel[a] + kick.sample(rng) * obj.motion;
            pos[a] += vel[a];
            if pos[a] < lo[a] {
                pos[a] = 2.0 * lo[a] - pos[a];
                vel[a] = -vel[a];
            }
            if pos[a] > hi[a] {
                pos[a] = 2.0 * hi[a] - pos[a];
                vel[a] = -vel[a];
            }
            pos[a] = pos[a].clamp(lo[a], hi[a]);
        }
    }
    out
}

/// Builds the trajectories of a scenario; deterministic in `spec.seed`.
pub fn generate_scenario(spec: &SyntheticScenario) -> Result<Sequence> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut tracks = vec![walk(&spec.target, spec.canvas, spec.frames, &mut rng)];
    for d in &spec.distractors {
        tracks.push(walk(d, spec.canvas, spec.frames, &mut rng));
    }
    let boxes = (0..spec.frames).map(|t| tracks.iter().map(|tr| tr[t]).collect()).collect();
    Ok(Sequence {
        spec: spec.clone(),
        boxes,
    })
}

/// Blends `color` into the planes with exact per-pixel area coverage of `b`.
fn paint(img: &mut [f64], width: usize, height: usize, b: &BBox, color: &[f64; 3]) {
    let [x1, y1, x2, y2] = b.corners();
    let cover = |p: usize, lo: f64, hi: f64| ((p as f64 + 1.0).min(hi) - (p as f64).max(lo)).max(0.0);
    let xr = (x1.floor().max(0.0) as usize)..(x2.ceil().min(width as f64) as usize);
    let yr = (y1.floor().max(0.0) as usize)..(y2.ceil().min(height as f64) as usize);
    for y in yr {
        let cy = cover(y, y1, y2);
        for x in xr.clone() {
            let a = cy * cover(x, x1, x2);
            if a <= 0.0 {
                continue;
            }
            for (ch, &c) in color.iter().enumerate() {
                let px = &mut img[(ch * height + y) * width + x];
                *px = (1.0 - a) * *px + a * c;
            }
        }
    }
}

fn draw(img: &mut [f64], width: usize, height: usize, b: &BBox, obj: &ObjectSpec) {
    paint(img, width, height, b, &obj.color);
    if let Some(accent) = &obj.accent {
        let inner = BBox::new(b.cx, b.cy, b.w / 2.0, b.h / 2.0);
        paint(img, width, height, &inner, accent);
    }
}

impl Sequence {
    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    pub fn gt(&self, t: usize) -> BBox {
        self.boxes[t][0]
    }

    /// All object boxes at frame `t`, target first.
    pub fn objects(&self, t: usize) -> &[BBox] {
        &self.boxes[t]
    }

    /// Renders frame `t`. Noise for each frame comes from its own stream, so
    /// frames can be rendered in any order.
    pub fn frame(&self, t: usize) -> Frame {
        let spec = &self.spec;
        let [width, height] = spec.canvas;
        let plane = width * height;
        let mut img = vec![0.0; 3 * plane];
        for (ch, &c) in spec.background.iter().enumerate() {
            img[ch * plane..(ch + 1) * plane].fill(c);
        }
        let boxes = &self.boxes[t];
        // Target last so it is never occluded.
        for (b, d) in boxes[1..].iter().zip(&spec.distractors) {
            draw(&mut img, width, height, b, d);
        }
        draw(&mut img, width, height, &boxes[0], &spec.target);
        if spec.noise > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(t as u64 + 1);
            let n = Normal::new(0.0, spec.noise).expect("validated noise");
            for px in &mut img {
                *px = (*px + n.sample(&mut rng)).clamp(0.0, 1.0);
            }
        }
        Frame {
            image: Tensor::new([3, height, width], img).expect("sized buffer"),
            gt: Some(boxes[0]),
        }
    }

    pub fn frames(&self) -> Vec<Frame> {
        (0..self.len()).map(|t| self.frame(t)).collect()
    }
}

/// Named families of scenarios used for training and evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    /// One dissimilar distractor, mild motion and noise.
    Easy,
    /// Several distractors sharing the target's body color.
    Distractor,
}

fn random_color(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> [f64; 3] {
    [rng.random_range(lo..hi), rng.random_range(lo..hi), rng.random_range(lo..hi)]
}

fn random_size(rng: &mut ChaCha8Rng) -> [f64; 2] {
    [rng.random_range(14.0..24.0), rng.random_range(14.0..24.0)]
}

fn jitter(c: [f64; 3], rng: &mut ChaCha8Rng, amount: f64) -> [f64; 3] {
    c.map(|v| (v + rng.random_range(-amount..amount)).clamp(0.0, 1.0))
}

impl Suite {
    /// Scenario `seed` of this suite on a 128×128 canvas.
    pub fn scenario(self, seed: u64, frames: usize) -> SyntheticScenario {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(u64::MAX);
        let background = random_color(&mut rng, 0.05, 0.3);
        let color = random_color(&mut rng, 0.45, 1.0);
        let target = ObjectSpec {
            color,
            size: random_size(&mut rng),
            motion: 1.0,
            accent: Some(color.map(|v| 1.0 - v)),
        };
        let (distractors, noise) = match self {
            Suite::Easy => {
                let d = ObjectSpec {
                    color: random_color(&mut rng, 0.3, 1.0),
                    size: random_size(&mut rng),
                    motion: 1.0,
                    accent: None,
                };
                (vec![d], 0.02)
            }
            Suite::Distractor => {
                let ds = (0..3)
                    .map(|_| ObjectSpec {
                        color: jitter(color, &mut rng, 0.08),
                        size: random_size(&mut rng),
                        motion: 1.5,
                        accent: Some(random_color(&mut rng, 0.0, 1.0)),
                    })
                    .collect();
                (ds, 0.03)
            }
        };
        SyntheticScenario {
            seed,
            frames,
            canvas: [128, 128],
            background,
            target,
            distractors,
            noise,
        }
    }
}
