//! Pseudo segmentation labels from probability maps: test-time-augmentation
//! merging, bbox-gated outlier removal with an uncertainty band, a
//! segmentation loss restricted to confidently labeled pixels, bbox jitter,
//! and the multi-round relabeling harness.

use alloc::vec;
use alloc::vec::Vec;
#[cfg(not(feature = "std"))]
use num_traits::Float;
use rand::Rng;

use crate::geometry::{BBox, GeometryError};
use crate::keypoint::pixel_center;
use crate::metrics::{label_iou, MetricsError};
use crate::render::{ProbMask, RenderError};
use crate::selfsup::{SelfsupError, SimilarityTransform2D};

/// Default confidence threshold separating certain from uncertain pixels.
pub const DEFAULT_SIGMA_CONF: f64 = 0.7;

/// Default upper bound on the random bbox expansion fraction.
pub const DEFAULT_MAX_EXPAND: f64 = 0.15;

/// Default number of relabeling rounds.
pub const DEFAULT_ROUNDS: usize = 5;

/// Probabilities are clamped to `[PROB_CLAMP, 1 − PROB_CLAMP]` before logs.
pub const PROB_CLAMP: f64 = 1e-7;

/// Errors from pseudo-label construction and iteration.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PseudoLabelError {
    #[error("paired list length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("nothing to merge: empty probability-map list")]
    EmptyInput,
    #[error("mask dimensions mismatch: {wa}x{ha} vs {wb}x{hb}")]
    DimensionMismatch {
        wa: usize,
        ha: usize,
        wb: usize,
        hb: usize,
    },
    #[error("confidence threshold must lie in (0.5, 1), got {value}")]
    InvalidThreshold { value: f64 },
    #[error("label buffer length {got} does not match {width}x{height}")]
    LabelLengthMismatch {
        width: usize,
        height: usize,
        got: usize,
    },
    #[error("no certain pixels to score")]
    NoCertainPixels,
    #[error("max_expand must lie in [0, 1], got {value}")]
    InvalidExpansion { value: f64 },
    #[error("bbox [{x_min}, {x_max})x[{y_min}, {y_max}) exceeds the {width}x{height} image")]
    BBoxOutsideImage {
        x_min: f64,
        y_min: f64,
        x_max: f64,
        y_max: f64,
        width: usize,
        height: usize,
    },
    #[error("iteration requires rounds >= 1")]
    NoRounds,
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Selfsup(#[from] SelfsupError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

/// Trinary per-pixel label. The ordering `Background < Uncertain <
/// Foreground` mirrors increasing foreground probability.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum PseudoLabel {
    Background,
    Uncertain,
    Foreground,
}

/// Row-major trinary label image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PseudoLabelMap {
    width: usize,
    height: usize,
    labels: Vec<PseudoLabel>,
}

impl PseudoLabelMap {
    pub fn new(
        width: usize,
        height: usize,
        labels: Vec<PseudoLabel>,
    ) -> Result<Self, PseudoLabelError> {
        if labels.len() != width * height {
            return Err(PseudoLabelError::LabelLengthMismatch {
                width,
                height,
                got: labels.len(),
            });
        }
        Ok(PseudoLabelMap {
            width,
            height,
            labels,
        })
    }

    pub fn filled(width: usize, height: usize, label: PseudoLabel) -> Self {
        PseudoLabelMap {
            width,
            height,
            labels: vec![label; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn get(&self, row: usize, col: usize) -> PseudoLabel {
        self.labels[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, label: PseudoLabel) {
        self.labels[row * self.width + col] = label;
    }

    pub fn data(&self) -> &[PseudoLabel] {
        &self.labels
    }

    /// Number of pixels carrying `label`.
    pub fn count(&self, label: PseudoLabel) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }
}

/// Warps each probability map back to the reference frame by the inverse of
/// the transform that produced its input (bilinear, zero outside) and
/// averages pixelwise.
pub fn merge_tta(
    maps: &[ProbMask],
    transforms: &[SimilarityTransform2D],
    out_width: usize,
    out_height: usize,
) -> Result<ProbMask, PseudoLabelError> {
    if maps.len() != transforms.len() {
        return Err(PseudoLabelError::LengthMismatch {
            left: maps.len(),
            right: transforms.len(),
        });
    }
    if maps.is_empty() {
        return Err(PseudoLabelError::EmptyInput);
    }
    let mut sum = vec![0.0f64; out_width * out_height];
    for (map, transform) in maps.iter().zip(transforms) {
        let warped = transform.inverse().apply_to_mask(map, out_width, out_height);
        for (acc, &v) in sum.iter_mut().zip(warped.data()) {
            *acc += v;
        }
    }
    let n = maps.len() as f64;
    for v in &mut sum {
        *v /= n;
        // Guard against accumulated rounding nudging a saturated mean past 1.
        *v = v.clamp(0.0, 1.0);
    }
    Ok(ProbMask::new(out_width, out_height, sum)?)
}

/// Classifies each pixel of a probability map as foreground, background, or
/// uncertain.
///
/// Pixels whose center lies outside every bbox are background regardless of
/// probability. Inside a bbox, `p ≥ sigma_conf` is foreground and
/// `p ≤ 1 − sigma_conf` is background; the open interval between them is
/// uncertain, so boundary values are classified confidently.
pub fn make_pseudo_labels(
    prob: &ProbMask,
    bboxes: &[BBox],
    sigma_conf: f64,
) -> Result<PseudoLabelMap, PseudoLabelError> {
    if !(sigma_conf > 0.5 && sigma_conf < 1.0) {
        return Err(PseudoLabelError::InvalidThreshold { value: sigma_conf });
    }
    let mut labels = Vec::with_capacity(prob.width() * prob.height());
    for row in 0..prob.height() {
        for col in 0..prob.width() {
            let center = pixel_center(col, row);
            let inside = bboxes.iter().any(|b| b.contains(&center));
            let p = prob.get(row, col);
            let label = if !inside {
                PseudoLabel::Background
            } else if p >= sigma_conf {
                PseudoLabel::Foreground
            } else if p <= 1.0 - sigma_conf {
                PseudoLabel::Background
            } else {
                PseudoLabel::Uncertain
            };
            labels.push(label);
        }
    }
    PseudoLabelMap::new(prob.width(), prob.height(), labels)
}

/// Mean negative log-likelihood of the certain pseudo labels under the
/// predicted probabilities, with the gradient w.r.t. each prediction.
///
/// Probabilities are clamped to `[PROB_CLAMP, 1 − PROB_CLAMP]` before the
/// log. Uncertain pixels contribute nothing — zero loss and zero gradient —
/// and pixels whose raw prediction lies beyond the clamp range get zero
/// gradient (the clamp is saturated there).
pub fn seg_loss(
    pred: &ProbMask,
    labels: &PseudoLabelMap,
) -> Result<(f64, Vec<f64>), PseudoLabelError> {
    if pred.width() != labels.width() || pred.height() != labels.height() {
        return Err(PseudoLabelError::DimensionMismatch {
            wa: pred.width(),
            ha: pred.height(),
            wb: labels.width(),
            hb: labels.height(),
        });
    }
    let lo = PROB_CLAMP;
    let hi = 1.0 - PROB_CLAMP;
    let mut nll = 0.0;
    let mut count = 0usize;
    for (&p_raw, &label) in pred.data().iter().zip(labels.data()) {
        let p = p_raw.clamp(lo, hi);
        match label {
            PseudoLabel::Foreground => {
                nll -= p.ln();
                count += 1;
            }
            PseudoLabel::Background => {
                nll -= (1.0 - p).ln();
                count += 1;
            }
            PseudoLabel::Uncertain => {}
        }
    }
    if count == 0 {
        return Err(PseudoLabelError::NoCertainPixels);
    }
    let scale = 1.0 / count as f64;
    let grad: Vec<f64> = pred
        .data()
        .iter()
        .zip(labels.data())
        .map(|(&p_raw, &label)| {
            if p_raw < lo || p_raw > hi {
                return 0.0;
            }
            let p = p_raw.clamp(lo, hi);
            match label {
                PseudoLabel::Foreground => -scale / p,
                PseudoLabel::Background => scale / (1.0 - p),
                PseudoLabel::Uncertain => 0.0,
            }
        })
        .collect();
    Ok((nll * scale, grad))
}

/// Randomly expands a tight bbox: width and height grow by independent
/// uniform fractions in `[0, max_expand]`, each expansion split uniformly at
/// random between the two sides, then clamped to the image. The output
/// always contains the input.
pub fn perturb_bbox<R: Rng + ?Sized>(
    tight: &BBox,
    image_width: usize,
    image_height: usize,
    max_expand: f64,
    rng: &mut R,
) -> Result<BBox, PseudoLabelError> {
    if !(max_expand >= 0.0 && max_expand <= 1.0) {
        return Err(PseudoLabelError::InvalidExpansion { value: max_expand });
    }
    let w = image_width as f64;
    let h = image_height as f64;
    if tight.x_min() < 0.0 || tight.y_min() < 0.0 || tight.x_max() > w || tight.y_max() > h {
        return Err(PseudoLabelError::BBoxOutsideImage {
            x_min: tight.x_min(),
            y_min: tight.y_min(),
            x_max: tight.x_max(),
            y_max: tight.y_max(),
            width: image_width,
            height: image_height,
        });
    }
    let extra_w = rng.random_range(0.0..=max_expand) * tight.width();
    let left = extra_w * rng.random_range(0.0..=1.0);
    let extra_h = rng.random_range(0.0..=max_expand) * tight.height();
    let top = extra_h * rng.random_range(0.0..=1.0);
    let x_min = (tight.x_min() - left).max(0.0);
    let x_max = (tight.x_max() + (extra_w - left)).min(w);
    let y_min = (tight.y_min() - top).max(0.0);
    let y_max = (tight.y_max() + (extra_h - top)).min(h);
    Ok(BBox::new(x_min, y_min, x_max, y_max)?)
}

/// One round of the relabeling loop: the labels produced for every image and
/// the mean IoU of their certain pixels against the reference masks.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelRound {
    pub labels: Vec<PseudoLabelMap>,
    pub mean_iou: f64,
}

/// Runs `rounds` sequential relabeling rounds.
///
/// Per round and image, the segmenter is queried once per test-time
/// transform (arguments: round index, image index, transform; it returns the
/// probability map in that transform's frame), the maps are merged back to
/// the reference frame, labels are gated by the image's bboxes, and the IoU
/// against the reference mask is recorded. The segmenter stands in for a
/// model that improves between rounds; this harness only orchestrates.
pub fn iterate_pseudo_labels<F>(
    mut segmenter: F,
    truths: &[ProbMask],
    bboxes: &[Vec<BBox>],
    transforms: &[SimilarityTransform2D],
    rounds: usize,
    sigma_conf: f64,
) -> Result<Vec<LabelRound>, PseudoLabelError>
where
    F: FnMut(usize, usize, &SimilarityTransform2D) -> Result<ProbMask, PseudoLabelError>,
{
    if rounds == 0 {
        return Err(PseudoLabelError::NoRounds);
    }
    if truths.len() != bboxes.len() {
        return Err(PseudoLabelError::LengthMismatch {
            left: truths.len(),
            right: bboxes.len(),
        });
    }
    if truths.is_empty() || transforms.is_empty() {
        return Err(PseudoLabelError::EmptyInput);
    }
    let mut trajectory = Vec::with_capacity(rounds);
    for round in 0..rounds {
        let mut labels_out = Vec::with_capacity(truths.len());
        let mut iou_sum = 0.0;
        for (index, truth) in truths.iter().enumerate() {
            let maps: Vec<ProbMask> = transforms
                .iter()
                .map(|t| segmenter(round, index, t))
                .collect::<Result<_, _>>()?;
            let merged = merge_tta(&maps, transforms, truth.width(), truth.height())?;
            let labels = make_pseudo_labels(&merged, &bboxes[index], sigma_conf)?;
            iou_sum += label_iou(&labels, truth)?;
            labels_out.push(labels);
        }
        trajectory.push(LabelRound {
            labels: labels_out,
            mean_iou: iou_sum / truths.len() as f64,
        });
    }
    Ok(trajectory)
}
