//! Keypoint selection and 2D keypoint estimation from dense prediction
//! fields: farthest-point sampling on models, attention-weighted keypoint
//! aggregation, and the synthetic-data keypoint and offset losses.

use alloc::vec::Vec;
use nalgebra::Vector2;
#[cfg(not(feature = "std"))]
use num_traits::Float;

use crate::geometry::{KeypointSet2D, Point2, Point3};

/// Errors from keypoint selection, aggregation, and losses.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum KeypointError {
    #[error("requested {requested} samples from {available} points")]
    TooFewPoints { requested: usize, available: usize },
    #[error("seed index {seed_index} out of range for {available} points")]
    SeedIndexOutOfRange { seed_index: usize, available: usize },
    #[error("foreground pixel set is empty")]
    EmptyForeground,
    #[error("keypoint set length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("scale must be positive and finite, got {value}")]
    NonPositiveScale { value: f64 },
    #[error("prediction fields shape mismatch: {message}")]
    ShapeMismatch { message: alloc::string::String },
    #[error("fg_prob[{index}] = {value} outside [0, 1]")]
    ProbabilityOutOfRange { index: usize, value: f64 },
    #[error("attention logit [{index}] is not finite")]
    NonFiniteLogit { index: usize },
}

/// Continuous image coordinates of the center of pixel `(row, col)`.
pub fn pixel_center(col: usize, row: usize) -> Point2 {
    Point2::new(col as f64 + 0.5, row as f64 + 0.5)
}

/// Object scale `S`: the length of the longest bounding-box side, used to
/// normalize keypoint residuals to a resolution-independent magnitude.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectScale(f64);

impl ObjectScale {
    pub fn new(s: f64) -> Result<Self, KeypointError> {
        if !(s > 0.0 && s.is_finite()) {
            return Err(KeypointError::NonPositiveScale { value: s });
        }
        Ok(Self(s))
    }

    pub fn get(&self) -> f64 {
        self.0
    }
}

/// Dense per-pixel predictions standing in for network output: per-keypoint
/// 2D offsets and attention logits, plus a foreground probability map.
///
/// Layouts are row-major: `offsets[((n·H + row)·W + col)·2 + c]`,
/// `attention[(n·H + row)·W + col]`, `fg_prob[row·W + col]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionFields {
    width: usize,
    height: usize,
    n_keypoints: usize,
    offsets: Vec<f64>,
    attention: Vec<f64>,
    fg_prob: Vec<f64>,
}

impl PredictionFields {
    /// Validates array shapes, `fg_prob ∈ [0, 1]`, and logit finiteness.
    pub fn new(
        width: usize,
        height: usize,
        n_keypoints: usize,
        offsets: Vec<f64>,
        attention: Vec<f64>,
        fg_prob: Vec<f64>,
    ) -> Result<Self, KeypointError> {
        let hw = width * height;
        if offsets.len() != n_keypoints * hw * 2 {
            return Err(KeypointError::ShapeMismatch {
                message: alloc::format!(
                    "offsets has {} entries, expected {}",
                    offsets.len(),
                    n_keypoints * hw * 2
                ),
            });
        }
        if attention.len() != n_keypoints * hw {
            return Err(KeypointError::ShapeMismatch {
                message: alloc::format!(
                    "attention has {} entries, expected {}",
                    attention.len(),
                    n_keypoints * hw
                ),
            });
        }
        if fg_prob.len() != hw {
            return Err(KeypointError::ShapeMismatch {
                message: alloc::format!(
                    "fg_prob has {} entries, expected {}",
                    fg_prob.len(),
                    hw
                ),
            });
        }
        for (i, &p) in fg_prob.iter().enumerate() {
            if !(0.0..=1.0).contains(&p) {
                return Err(KeypointError::ProbabilityOutOfRange { index: i, value: p });
            }
        }
        if let Some(i) = attention.iter().position(|a| !a.is_finite()) {
            return Err(KeypointError::NonFiniteLogit { index: i });
        }
        Ok(Self {
            width,
            height,
            n_keypoints,
            offsets,
            attention,
            fg_prob,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn n_keypoints(&self) -> usize {
        self.n_keypoints
    }

    /// Offset vector Δk for keypoint `n` at pixel `(row, col)`.
    pub fn offset(&self, n: usize, row: usize, col: usize) -> Point2 {
        let base = ((n * self.height + row) * self.width + col) * 2;
        Vector2::new(self.offsets[base], self.offsets[base + 1])
    }

    /// Attention logit for keypoint `n` at pixel `(row, col)`.
    pub fn attention(&self, n: usize, row: usize, col: usize) -> f64 {
        self.attention[(n * self.height + row) * self.width + col]
    }

    /// Foreground probability at pixel `(row, col)`.
    pub fn fg_prob(&self, row: usize, col: usize) -> f64 {
        self.fg_prob[row * self.width + col]
    }

    pub fn offsets_raw(&self) -> &[f64] {
        &self.offsets
    }

    pub fn attention_raw(&self) -> &[f64] {
        &self.attention
    }

    pub fn fg_prob_raw(&self) -> &[f64] {
        &self.fg_prob
    }
}

/// Farthest-point sampling: returns `n` point indices starting from
/// `seed_index`; each subsequent index maximizes the minimum distance to
/// the already-selected set, ties broken by lowest index.
///
/// Deterministic given `(points, n, seed_index)`; the sequence of selected
/// min-distances is non-increasing.
pub fn fps_sample(
    points: &[Point3],
    n: usize,
    seed_index: usize,
) -> Result<Vec<usize>, KeypointError> {
    if n < 1 || n > points.len() {
        return Err(KeypointError::TooFewPoints {
            requested: n,
            available: points.len(),
        });
    }
    if seed_index >= points.len() {
        return Err(KeypointError::SeedIndexOutOfRange {
            seed_index,
            available: points.len(),
        });
    }
    let mut selected = Vec::with_capacity(n);
    selected.push(seed_index);
    // min_dist[i] = distance from point i to the nearest selected point.
    let mut min_dist: Vec<f64> = points
        .iter()
        .map(|p| (p - points[seed_index]).norm())
        .collect();
    while selected.len() < n {
        let mut best = usize::MAX;
        let mut best_dist = f64::NEG_INFINITY;
        for (i, &d) in min_dist.iter().enumerate() {
            if !selected.contains(&i) && d > best_dist {
                best = i;
                best_dist = d;
            }
        }
        selected.push(best);
        for (i, d) in min_dist.iter_mut().enumerate() {
            let nd = (points[i] - points[best]).norm();
            if nd < *d {
                *d = nd;
            }
        }
    }
    Ok(selected)
}

/// Default FPS seed: the index of the point farthest from the centroid
/// (lowest index on ties), making seedless sampling reproducible.
pub fn fps_centroid_seed(points: &[Point3]) -> Result<usize, KeypointError> {
    if points.is_empty() {
        return Err(KeypointError::TooFewPoints {
            requested: 1,
            available: 0,
        });
    }
    let centroid = points.iter().sum::<Point3>() / points.len() as f64;
    let mut best = 0usize;
    let mut best_dist = f64::NEG_INFINITY;
    for (i, p) in points.iter().enumerate() {
        let d = (p - centroid).norm();
        if d > best_dist {
            best = i;
            best_dist = d;
        }
    }
    Ok(best)
}

/// Attention-weighted keypoint aggregation over the foreground pixel set:
/// `k̃_n = Σ_{m∈O} softmax(a_nm over O) · (p_m + Δk_nm)` with `p_m` the
/// pixel center.
///
/// `fg_mask` is a row-major boolean grid of the same dimensions as
/// `fields`. The softmax subtracts the per-keypoint maximum logit for
/// overflow safety; pixels outside the mask are ignored entirely.
/// Summation runs in fixed row-major pixel order so results are
/// bit-reproducible.
pub fn aggregate_keypoints(
    fields: &PredictionFields,
    fg_mask: &[bool],
) -> Result<KeypointSet2D, KeypointError> {
    let hw = fields.width * fields.height;
    if fg_mask.len() != hw {
        return Err(KeypointError::ShapeMismatch {
            message: alloc::format!("fg_mask has {} entries, expected {hw}", fg_mask.len()),
        });
    }
    let fg_indices: Vec<usize> = (0..hw).filter(|&m| fg_mask[m]).collect();
    if fg_indices.is_empty() {
        return Err(KeypointError::EmptyForeground);
    }
    let mut keypoints = Vec::with_capacity(fields.n_keypoints);
    for n in 0..fields.n_keypoints {
        let base = n * hw;
        let max_logit = fg_indices
            .iter()
            .fold(f64::NEG_INFINITY, |acc, &m| acc.max(fields.attention[base + m]));
        let mut weight_sum = 0.0;
        let mut acc = Point2::zeros();
        for &m in &fg_indices {
            let w = (fields.attention[base + m] - max_logit).exp();
            let (row, col) = (m / fields.width, m % fields.width);
            let pred = pixel_center(col, row) + fields.offset(n, row, col);
            acc += w * pred;
            weight_sum += w;
        }
        keypoints.push(acc / weight_sum);
    }
    Ok(keypoints)
}

/// Smooth-ℓ1 (Huber-like) penalty: `0.5x²` for `|x| < 1`, else `|x| − 0.5`.
pub fn smooth_l1(x: f64) -> f64 {
    if x.abs() < 1.0 {
        0.5 * x * x
    } else {
        x.abs() - 0.5
    }
}

/// Derivative of [`smooth_l1`]: `x` for `|x| < 1`, else `sign(x)`.
pub fn smooth_l1_grad(x: f64) -> f64 {
    if x.abs() < 1.0 {
        x
    } else {
        x.signum()
    }
}

/// Keypoint loss against ground truth for synthetic data with exact
/// keypoint annotations: smooth-ℓ1 of each residual coordinate scaled by
/// `1/(sigma_scale·S)`, summed over keypoints and coordinates.
///
/// Returns the loss and its gradient w.r.t. each predicted keypoint.
pub fn keypoint_loss_syn(
    pred: &[Point2],
    gt: &[Point2],
    scale: ObjectScale,
    sigma_scale: f64,
) -> Result<(f64, Vec<Point2>), KeypointError> {
    if pred.len() != gt.len() {
        return Err(KeypointError::LengthMismatch {
            expected: gt.len(),
            got: pred.len(),
        });
    }
    if !(sigma_scale > 0.0 && sigma_scale.is_finite()) {
        return Err(KeypointError::NonPositiveScale { value: sigma_scale });
    }
    let denom = sigma_scale * scale.get();
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(pred.len());
    for (p, g) in pred.iter().zip(gt.iter()) {
        let r = (p - g) / denom;
        loss += smooth_l1(r.x) + smooth_l1(r.y);
        grad.push(Point2::new(
            smooth_l1_grad(r.x) / denom,
            smooth_l1_grad(r.y) / denom,
        ));
    }
    Ok((loss, grad))
}

/// Per-pixel offset loss over the foreground set — the warm-up objective:
/// for every keypoint `n` and foreground pixel `m`, smooth-ℓ1 of
/// `(p_m + Δk_nm − k_n) / (sigma_scale·S)` per coordinate.
///
/// Returns the loss and its gradient w.r.t. the offset array (same layout
/// as [`PredictionFields::offsets_raw`], zero outside the foreground).
pub fn offset_loss_syn(
    fields: &PredictionFields,
    gt: &[Point2],
    fg_mask: &[bool],
    scale: ObjectScale,
    sigma_scale: f64,
) -> Result<(f64, Vec<f64>), KeypointError> {
    if gt.len() != fields.n_keypoints {
        return Err(KeypointError::LengthMismatch {
            expected: fields.n_keypoints,
            got: gt.len(),
        });
    }
    if !(sigma_scale > 0.0 && sigma_scale.is_finite()) {
        return Err(KeypointError::NonPositiveScale { value: sigma_scale });
    }
    let hw = fields.width * fields.height;
    if fg_mask.len() != hw {
        return Err(KeypointError::ShapeMismatch {
            message: alloc::format!("fg_mask has {} entries, expected {hw}", fg_mask.len()),
        });
    }
    if !fg_mask.iter().any(|&b| b) {
        return Err(KeypointError::EmptyForeground);
    }
    let denom = sigma_scale * scale.get();
    let mut loss = 0.0;
    let mut grad = alloc::vec![0.0; fields.offsets.len()];
    for n in 0..fields.n_keypoints {
        for m in 0..hw {
            if !fg_mask[m] {
                continue;
            }
            let (row, col) = (m / fields.width, m % fields.width);
            let r = (pixel_center(col, row) + fields.offset(n, row, col) - gt[n]) / denom;
            loss += smooth_l1(r.x) + smooth_l1(r.y);
            let base = ((n * fields.height + row) * fields.width + col) * 2;
            grad[base] = smooth_l1_grad(r.x) / denom;
            grad[base + 1] = smooth_l1_grad(r.y) / denom;
        }
    }
    Ok((loss, grad))
}
