//! Frame-by-frame inference with a fixed template.

use grm_core::head::{decode_box, BBox, HeadOutput};
use grm_core::model::{embed_template, forward_with_template};
use grm_core::relation::{Division, DivisionSampler};
use grm_core::{Tape, Tensor};

use crate::checkpoint::Checkpoint;
use crate::crop::{crop_search, crop_template, CropConfig, CropRecord};
use crate::error::{Result, TrackerError};
use crate::scenario::Frame;

/// Smallest box side, in pixels, carried between frames.
pub const MIN_SIDE: f64 = 1.0;

#[derive(Clone, Debug)]
pub struct TrackState {
    /// Template tokens from the first frame; never updated.
    pub template_tokens: Tensor,
    pub prev_box: BBox,
    pub crop_record: Option<CropRecord>,
}

#[derive(Clone, Debug)]
pub struct StepOutput {
    pub bbox: BBox,
    /// Per encoder layer; `None` where the layer has no division.
    pub divisions: Vec<Option<Division>>,
    /// Peak value of the center heatmap.
    pub score: f64,
}

pub fn init_track(ckpt: &Checkpoint, crop: &CropConfig, frame: &Frame, bbox: BBox) -> Result<TrackState> {
    let cfg = &ckpt.config;
    let (template, _) = crop_template(&frame.image, &bbox, crop, cfg.patch.template_size)?;
    let mut tape = Tape::new();
    let params = ckpt.params.bind_frozen(&mut tape);
    let z = embed_template(&mut tape, &params, cfg, &template)?;
    Ok(TrackState {
        template_tokens: tape.value(z).clone(),
        prev_box: bbox,
        crop_record: None,
    })
}

/// Keeps a frame-space box usable as the next crop anchor.
fn keep_in_frame(b: BBox, width: usize, height: usize) -> BBox {
    BBox::new(
        b.cx.clamp(0.0, width as f64),
        b.cy.clamp(0.0, height as f64),
        b.w.clamp(MIN_SIDE, width as f64),
        b.h.clamp(MIN_SIDE, height as f64),
    )
}

pub fn track_step(ckpt: &Checkpoint, crop: &CropConfig, state: &mut TrackState, frame: &Frame) -> Result<StepOutput> {
    let cfg = &ckpt.config;
    let (search, record) = crop_search(&frame.image, &state.prev_box, crop, cfg.patch.search_size)?;
    let mut tape = Tape::new();
    let params = ckpt.params.bind_frozen(&mut tape);
    let z = tape.constant(state.template_tokens.clone());
    let out = forward_with_template(&mut tape, &params, cfg, z, &search, &mut DivisionSampler::eval())?;
    let head = HeadOutput::from_vars(&tape, &out.head);
    let score = head.center.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (_, h, w) = frame.image.dims3()?;
    let bbox = keep_in_frame(record.to_frame(&decode_box(&head)), w, h);
    state.prev_box = bbox;
    state.crop_record = Some(record);
    Ok(StepOutput {
        bbox,
        divisions: out.divisions,
        score,
    })
}

#[derive(Clone, Debug)]
pub struct Prediction {
    pub bbox: BBox,
    pub cross_fraction: Vec<Option<f64>>,
}

/// Anything that can follow a target given its initial box.
pub trait Tracker {
    fn init(&mut self, frame: &Frame, bbox: BBox) -> Result<()>;
    fn update(&mut self, frame: &Frame) -> Result<Prediction>;
}

pub struct GrmTracker<'a> {
    ckpt: &'a Checkpoint,
    crop: CropConfig,
    state: Option<TrackState>,
}

impl<'a> GrmTracker<'a> {
    pub fn new(ckpt: &'a Checkpoint, crop: CropConfig) -> Self {
        Self { ckpt, crop, state: None }
    }

    pub fn state(&self) -> Option<&TrackState> {
        self.state.as_ref()
    }
}

impl Tracker for GrmTracker<'_> {
    fn init(&mut self, frame: &Frame, bbox: BBox) -> Result<()> {
        self.state = Some(init_track(self.ckpt, &self.crop, frame, bbox)?);
        Ok(())
    }

    fn update(&mut self, frame: &Frame) -> Result<Prediction> {
        let state = self.state.as_mut().ok_or(TrackerError::Uninitialized)?;
        let out = track_step(self.ckpt, &self.crop, state, frame)?;
        Ok(Prediction {
            bbox: out.bbox,
            cross_fraction: out.divisions.iter().map(|d| d.as_ref().map(Division::cross_fraction)).collect(),
        })
    }
}

/// Reports the ground truth; checks the evaluation harness.
#[derive(Default)]
pub struct OracleTracker;

impl Tracker for OracleTracker {
    fn init(&mut self, _: &Frame, _: BBox) -> Result<()> {
        Ok(())
    }

    fn update(&mut self, frame: &Frame) -> Result<Prediction> {
        let bbox = frame.gt.ok_or_else(|| TrackerError::InvalidBox("frame has no ground truth".into()))?;
        Ok(Prediction {
            bbox,
            cross_fraction: Vec::new(),
        })
    }
}

/// Always reports the same box.
pub struct FixedTracker(pub BBox);

impl Tracker for FixedTracker {
    fn init(&mut self, _: &Frame, _: BBox) -> Result<()> {
        Ok(())
    }

    fn update(&mut self, _: &Frame) -> Result<Prediction> {
        Ok(Prediction {
            bbox: self.0,
            cross_fraction: Vec::new(),
        })
    }
}
