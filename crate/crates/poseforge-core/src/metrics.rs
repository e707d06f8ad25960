//! Pose-accuracy metrics and mask overlap: average 3D model-point distance
//! (ADD), its symmetric closest-point variant (ADD-S), model diameter,
//! diameter-relative recall, and binary mask IoU.

use alloc::vec::Vec;

use crate::geometry::{Point3, Pose};
use crate::pseudolabel::{PseudoLabel, PseudoLabelMap};
use crate::render::ProbMask;

/// Fraction of the model diameter used as the default recall threshold.
pub const DEFAULT_RECALL_FRACTION: f64 = 0.1;

/// Probability threshold at which a mask pixel counts as foreground.
pub const FOREGROUND_THRESHOLD: f64 = 0.5;

/// Errors from metric computation.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MetricsError {
    #[error("model point cloud is empty")]
    EmptyModel,
    #[error("diameter requires at least 2 points, got {got}")]
    TooFewPoints { got: usize },
    #[error("diameter must be positive, got {diameter}")]
    NonPositiveDiameter { diameter: f64 },
    #[error("distance [{index}] = {value} is negative")]
    NegativeDistance { index: usize, value: f64 },
    #[error("mask dimensions mismatch: {wa}x{ha} vs {wb}x{hb}")]
    DimensionMismatch {
        wa: usize,
        ha: usize,
        wb: usize,
        hb: usize,
    },
}

/// Mean distance between corresponding model points under two poses:
/// `mean_x ‖(R_p·x + t_p) − (R_g·x + t_g)‖`.
pub fn add_score(pred: &Pose, gt: &Pose, model_points: &[Point3]) -> Result<f64, MetricsError> {
    if model_points.is_empty() {
        return Err(MetricsError::EmptyModel);
    }
    let sum: f64 = model_points
        .iter()
        .map(|x| (pred.transform(x) - gt.transform(x)).norm())
        .sum();
    Ok(sum / model_points.len() as f64)
}

/// Symmetric-object variant of [`add_score`]: mean over ground-truth-posed
/// points of the distance to the *closest* predicted-pose point, so a pose
/// that permutes a symmetric model onto itself scores zero.
pub fn adds_score(pred: &Pose, gt: &Pose, model_points: &[Point3]) -> Result<f64, MetricsError> {
    if model_points.is_empty() {
        return Err(MetricsError::EmptyModel);
    }
    let pred_points: Vec<Point3> = model_points.iter().map(|x| pred.transform(x)).collect();
    let mut sum = 0.0;
    for x in model_points {
        let g = gt.transform(x);
        let mut best = f64::INFINITY;
        for p in &pred_points {
            let d = (g - p).norm();
            if d < best {
                best = d;
            }
        }
        sum += best;
    }
    Ok(sum / model_points.len() as f64)
}

/// Dispatches to [`adds_score`] for symmetric objects and [`add_score`]
/// otherwise.
pub fn pose_distance(
    pred: &Pose,
    gt: &Pose,
    model_points: &[Point3],
    symmetric: bool,
) -> Result<f64, MetricsError> {
    if symmetric {
        adds_score(pred, gt, model_points)
    } else {
        add_score(pred, gt, model_points)
    }
}

/// Maximum pairwise distance over the model point cloud.
pub fn diameter(model_points: &[Point3]) -> Result<f64, MetricsError> {
    if model_points.len() < 2 {
        return Err(MetricsError::TooFewPoints {
            got: model_points.len(),
        });
    }
    let mut best = 0.0f64;
    for (i, a) in model_points.iter().enumerate() {
        for b in &model_points[i + 1..] {
            let d = (a - b).norm();
            if d > best {
                best = d;
            }
        }
    }
    Ok(best)
}

/// Fraction of samples whose distance is *strictly* below
/// `threshold_fraction · diameter`. An empty distance list scores 0.
///
/// The caller guarantees `diameter > 0`; see [`MetricReport::new`] for the
/// validated entry point.
pub fn add_recall(distances: &[f64], diameter: f64, threshold_fraction: f64) -> f64 {
    if distances.is_empty() {
        return 0.0;
    }
    let threshold = threshold_fraction * diameter;
    let hits = distances.iter().filter(|&&d| d < threshold).count();
    hits as f64 / distances.len() as f64
}

/// Intersection-over-union of two binary masks (values thresholded at
/// [`FOREGROUND_THRESHOLD`]). Two empty masks are in perfect agreement and
/// score 1.
pub fn mask_iou(a: &ProbMask, b: &ProbMask) -> Result<f64, MetricsError> {
    if !a.same_shape(b) {
        return Err(MetricsError::DimensionMismatch {
            wa: a.width(),
            ha: a.height(),
            wb: b.width(),
            hb: b.height(),
        });
    }
    let fa = a.to_foreground(FOREGROUND_THRESHOLD);
    let fb = b.to_foreground(FOREGROUND_THRESHOLD);
    let mut intersection = 0usize;
    let mut union = 0usize;
    for (&x, &y) in fa.iter().zip(&fb) {
        if x && y {
            intersection += 1;
        }
        if x || y {
            union += 1;
        }
    }
    if union == 0 {
        return Ok(1.0);
    }
    Ok(intersection as f64 / union as f64)
}

/// IoU between a trinary pseudo-label map and a binary reference mask, with
/// uncertain pixels excluded from both intersection and union.
pub fn label_iou(labels: &PseudoLabelMap, truth: &ProbMask) -> Result<f64, MetricsError> {
    if labels.width() != truth.width() || labels.height() != truth.height() {
        return Err(MetricsError::DimensionMismatch {
            wa: labels.width(),
            ha: labels.height(),
            wb: truth.width(),
            hb: truth.height(),
        });
    }
    let ft = truth.to_foreground(FOREGROUND_THRESHOLD);
    let mut intersection = 0usize;
    let mut union = 0usize;
    for (&label, &t) in labels.data().iter().zip(&ft) {
        if label == PseudoLabel::Uncertain {
            continue;
        }
        let f = label == PseudoLabel::Foreground;
        if f && t {
            intersection += 1;
        }
        if f || t {
            union += 1;
        }
    }
    if union == 0 {
        return Ok(1.0);
    }
    Ok(intersection as f64 / union as f64)
}

/// Evaluation summary for one object: per-sample distances, the diameter
/// and threshold they were scored against, and the resulting recall.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub distances: Vec<f64>,
    pub diameter: f64,
    pub threshold_fraction: f64,
    pub recall: f64,
    pub symmetric: bool,
}

impl MetricReport {
    /// Validates inputs (positive diameter, non-negative distances) and
    /// computes the recall.
    pub fn new(
        distances: Vec<f64>,
        diameter: f64,
        threshold_fraction: f64,
        symmetric: bool,
    ) -> Result<Self, MetricsError> {
        if !(diameter > 0.0) {
            return Err(MetricsError::NonPositiveDiameter { diameter });
        }
        if let Some((index, &value)) = distances
            .iter()
            .enumerate()
            .find(|(_, &d)| !(d >= 0.0))
        {
            return Err(MetricsError::NegativeDistance { index, value });
        }
        let recall = add_recall(&distances, diameter, threshold_fraction);
        Ok(MetricReport {
            distances,
            diameter,
            threshold_fraction,
            recall,
            symmetric,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use nalgebra::Vector3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cube_corners() -> Vec<Point3> {
        let mut points = Vec::new();
        for &x in &[-0.5, 0.5] {
            for &y in &[-0.5, 0.5] {
                for &z in &[-0.5, 0.5] {
                    points.push(Point3::new(x, y, z));
                }
            }
        }
        points
    }

    fn random_pose(rng: &mut ChaCha8Rng) -> Pose {
        let omega = Vector3::new(
            rng.random_range(-1.5..1.5),
            rng.random_range(-1.5..1.5),
            rng.random_range(-1.5..1.5),
        );
        let t = Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        Pose::from_axis_angle(&omega, &t)
    }

    fn random_cloud(rng: &mut ChaCha8Rng, n: usize) -> Vec<Point3> {
        (0..n)
            .map(|_| {
                Point3::new(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                )
            })
            .collect()
    }

    #[test]
    fn add_zero_when_poses_equal() {
        let pose = Pose::from_axis_angle(&Vector3::new(0.3, -0.1, 0.2), &Vector3::new(1.0, 2.0, 3.0));
        let points = cube_corners();
        assert_eq!(add_score(&pose, &pose, &points).unwrap(), 0.0);
        assert_eq!(adds_score(&pose, &pose, &points).unwrap(), 0.0);
    }

    #[test]
    fn add_of_pure_translation_offset_is_its_norm() {
        let gt = Pose::from_axis_angle(&Vector3::new(0.4, 0.2, -0.3), &Vector3::new(0.5, -0.2, 2.0));
        let d = Vector3::new(0.03, -0.04, 0.12);
        let pred = Pose::new(*gt.rotation(), gt.translation() + d).unwrap();
        let add = add_score(&pred, &gt, &cube_corners()).unwrap();
        assert!((add - d.norm()).abs() < 1e-12, "add = {add}");
    }

    #[test]
    fn add_matches_naive_per_point_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let pred = random_pose(&mut rng);
            let gt = random_pose(&mut rng);
            let points = cube_corners();
            let add = add_score(&pred, &gt, &points).unwrap();
            let mut oracle = 0.0;
            for x in &points {
                let rp = pred.rotation();
                let rg = gt.rotation();
                let px = rp[(0, 0)] * x.x + rp[(0, 1)] * x.y + rp[(0, 2)] * x.z
                    + pred.translation().x;
                let py = rp[(1, 0)] * x.x + rp[(1, 1)] * x.y + rp[(1, 2)] * x.z
                    + pred.translation().y;
                let pz = rp[(2, 0)] * x.x + rp[(2, 1)] * x.y + rp[(2, 2)] * x.z
                    + pred.translation().z;
                let gx =
                    rg[(0, 0)] * x.x + rg[(0, 1)] * x.y + rg[(0, 2)] * x.z + gt.translation().x;
                let gy =
                    rg[(1, 0)] * x.x + rg[(1, 1)] * x.y + rg[(1, 2)] * x.z + gt.translation().y;
                let gz =
                    rg[(2, 0)] * x.x + rg[(2, 1)] * x.y + rg[(2, 2)] * x.z + gt.translation().z;
                oracle +=
                    ((px - gx) * (px - gx) + (py - gy) * (py - gy) + (pz - gz) * (pz - gz)).sqrt();
            }
            oracle /= points.len() as f64;
            assert!((add - oracle).abs() < 1e-12);
        }
    }

    #[test]
    fn ring_rotation_scores_near_zero_on_symmetric_metric() {
        // 360 points evenly spaced about the z-axis: a 1° rotation about that
        // axis maps the sample set onto itself, so the closest-point metric
        // vanishes while the matched metric measures the chord length.
        let n = 360;
        let ring: Vec<Point3> = (0..n)
            .map(|k| {
                let a = 2.0 * core::f64::consts::PI * k as f64 / n as f64;
                Point3::new(a.cos(), a.sin(), 0.0)
            })
            .collect();
        let gt = Pose::from_axis_angle(&Vector3::new(0.2, -0.4, 0.1), &Vector3::new(0.3, 0.1, 1.5));
        let step = 2.0 * core::f64::consts::PI / n as f64;
        let spin = Pose::from_axis_angle(&Vector3::new(0.0, 0.0, step), &Vector3::zeros());
        let pred = gt.compose(&spin);
        let add = add_score(&pred, &gt, &ring).unwrap();
        let adds = adds_score(&pred, &gt, &ring).unwrap();
        let chord = 2.0 * (step / 2.0).sin();
        assert!((add - chord).abs() < 1e-12, "add = {add}, chord = {chord}");
        assert!(adds < 1e-12, "adds = {adds}");
        assert!(adds < add / 100.0);
    }

    #[test]
    fn adds_matches_brute_force_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let points = random_cloud(&mut rng, 150);
        let pred = random_pose(&mut rng);
        let gt = random_pose(&mut rng);
        let adds = adds_score(&pred, &gt, &points).unwrap();
        let pred_pts: Vec<Point3> = points.iter().map(|x| pred.transform(x)).collect();
        let mut oracle = 0.0;
        for x in &points {
            let g = gt.transform(x);
            let mut best = f64::INFINITY;
            for p in &pred_pts {
                best = best.min((g - p).norm());
            }
            oracle += best;
        }
        oracle /= points.len() as f64;
        assert_eq!(adds, oracle);
    }

    #[test]
    fn adds_never_exceeds_add() {
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        for _ in 0..300 {
            let points = random_cloud(&mut rng, 24);
            let pred = random_pose(&mut rng);
            let gt = random_pose(&mut rng);
            let add = add_score(&pred, &gt, &points).unwrap();
            let adds = adds_score(&pred, &gt, &points).unwrap();
            assert!(adds <= add + 1e-12, "adds = {adds} > add = {add}");
        }
    }

    #[test]
    fn add_invariant_under_left_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        for _ in 0..20 {
            let points = random_cloud(&mut rng, 32);
            let pred = random_pose(&mut rng);
            let gt = random_pose(&mut rng);
            let rigid = random_pose(&mut rng);
            let base = add_score(&pred, &gt, &points).unwrap();
            let moved =
                add_score(&rigid.compose(&pred), &rigid.compose(&gt), &points).unwrap();
            assert!((base - moved).abs() < 1e-9, "{base} vs {moved}");
        }
    }

    #[test]
    fn empty_model_is_rejected() {
        let pose = Pose::identity();
        assert_eq!(
            add_score(&pose, &pose, &[]),
            Err(MetricsError::EmptyModel)
        );
        assert_eq!(
            adds_score(&pose, &pose, &[]),
            Err(MetricsError::EmptyModel)
        );
    }

    #[test]
    fn diameter_of_unit_cube_is_sqrt3() {
        let d = diameter(&cube_corners()).unwrap();
        assert!((d - 3.0f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn diameter_of_two_points() {
        let points = vec![Point3::new(1.0, 2.0, 3.0), Point3::new(1.0, 2.0, 8.0)];
        assert_eq!(diameter(&points).unwrap(), 5.0);
        assert_eq!(
            diameter(&points[..1]),
            Err(MetricsError::TooFewPoints { got: 1 })
        );
    }

    #[test]
    fn diameter_matches_brute_force_on_seeded_cloud() {
        let mut rng = ChaCha8Rng::seed_from_u64(53);
        let points = random_cloud(&mut rng, 500);
        let d = diameter(&points).unwrap();
        let mut oracle = 0.0f64;
        for a in &points {
            for b in &points {
                oracle = oracle.max((a - b).norm());
            }
        }
        assert_eq!(d, oracle);
    }

    #[test]
    fn recall_uses_strict_inequality_at_threshold() {
        let d = 2.0;
        let distances = [0.05 * d, 0.09 * d, 0.10 * d, 0.2 * d];
        assert_eq!(add_recall(&distances, d, 0.1), 0.5);
        assert_eq!(add_recall(&[0.0, 0.0, 0.0], d, 0.1), 1.0);
        assert_eq!(add_recall(&[d, d], d, 0.1), 0.0);
        assert_eq!(add_recall(&[], d, 0.1), 0.0);
    }

    #[test]
    fn recall_monotone_as_threshold_loosens() {
        let mut rng = ChaCha8Rng::seed_from_u64(61);
        let distances: Vec<f64> = (0..100).map(|_| rng.random_range(0.0..1.0)).collect();
        let mut last = 0.0;
        for f in [0.02, 0.05, 0.1, 0.3, 0.7, 1.1] {
            let r = add_recall(&distances, 1.0, f);
            assert!(r >= last);
            last = r;
        }
    }

    #[test]
    fn mask_iou_examples() {
        let mut a = ProbMask::zeros(20, 10);
        let mut b = ProbMask::zeros(20, 10);
        // 100-pixel masks overlapping in 50 pixels: IoU = 50/150.
        for row in 0..10 {
            for col in 0..10 {
                a.set(row, col, 1.0);
                b.set(row, col + 5, 1.0);
            }
        }
        assert_eq!(mask_iou(&a, &a).unwrap(), 1.0);
        assert!((mask_iou(&a, &b).unwrap() - 50.0 / 150.0).abs() < 1e-15);
        let empty = ProbMask::zeros(20, 10);
        assert_eq!(mask_iou(&empty, &empty).unwrap(), 1.0);
        assert_eq!(mask_iou(&a, &empty).unwrap(), 0.0);
        let disjoint = {
            let mut m = ProbMask::zeros(20, 10);
            m.set(5, 15, 1.0);
            m
        };
        assert_eq!(mask_iou(&a, &disjoint).unwrap(), 0.0);
        let other = ProbMask::zeros(5, 5);
        assert!(matches!(
            mask_iou(&a, &other),
            Err(MetricsError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn label_iou_excludes_uncertain_pixels() {
        use crate::pseudolabel::{PseudoLabel, PseudoLabelMap};
        let mut truth = ProbMask::zeros(4, 1);
        truth.set(0, 0, 1.0);
        truth.set(0, 1, 1.0);
        // Labels: fg, uncertain, bg, uncertain. Certain pixels agree with the
        // truth except none disagree → IoU counts only columns 0 and 2.
        let labels = PseudoLabelMap::new(
            4,
            1,
            vec![
                PseudoLabel::Foreground,
                PseudoLabel::Uncertain,
                PseudoLabel::Background,
                PseudoLabel::Uncertain,
            ],
        )
        .unwrap();
        assert_eq!(label_iou(&labels, &truth).unwrap(), 1.0);
        // Flip the certain background pixel to foreground: union grows.
        let labels = PseudoLabelMap::new(
            4,
            1,
            vec![
                PseudoLabel::Foreground,
                PseudoLabel::Uncertain,
                PseudoLabel::Foreground,
                PseudoLabel::Uncertain,
            ],
        )
        .unwrap();
        assert_eq!(label_iou(&labels, &truth).unwrap(), 0.5);
    }

    #[test]
    fn report_validates_and_computes_recall() {
        let report = MetricReport::new(vec![0.01, 0.5], 1.0, 0.1, false).unwrap();
        assert_eq!(report.recall, 0.5);
        assert!(matches!(
            MetricReport::new(vec![0.1], 0.0, 0.1, false),
            Err(MetricsError::NonPositiveDiameter { .. })
        ));
        assert!(matches!(
            MetricReport::new(vec![0.1, -0.2], 1.0, 0.1, true),
            Err(MetricsError::NegativeDistance { index: 1, .. })
        ));
    }
}
