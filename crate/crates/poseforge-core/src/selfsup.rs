//! Self-supervision objectives: 2D similarity transforms for scale
//! normalization and augmentation, keypoint ensembling across scales, the
//! dual-scale consistency loss against a reprojected average pose, the
//! combined objective, and a silhouette-alignment pose refiner.

use alloc::{vec, vec::Vec};
use nalgebra::Matrix2;
#[cfg(not(feature = "std"))]
use num_traits::Float;

use crate::geometry::{
    BBox, CameraIntrinsics, GeometryError, KeypointSet2D, Point2, Pose, TriMesh,
};
use crate::keypoint::{smooth_l1, smooth_l1_grad, ObjectScale};
use crate::pnp::{epnp_solve, pnp_jacobian, HessianMode, PnPError};
use crate::render::{
    dice_loss, dice_loss_value, render_silhouette, render_silhouette_with_pose_grad, visible_mask,
    ProbMask, RenderError, DEFAULT_DICE_EPSILON,
};

/// Default edge length of the normalized crop, in pixels.
pub const DEFAULT_NORMALIZED_SIZE: f64 = 64.0;

/// Minimum allowed normalized-crop edge length.
pub const MIN_NORMALIZED_SIZE: f64 = 8.0;

/// Maximum step halvings per line search in [`refine_pose_vsa`].
pub const MAX_LINE_SEARCH_HALVINGS: usize = 20;

/// Errors from transforms, losses, and refinement.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SelfsupError {
    #[error("keypoint set length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("transform scale must be positive and finite, got {scale}")]
    InvalidScale { scale: f64 },
    #[error("normalized size must be >= {MIN_NORMALIZED_SIZE}, got {size}")]
    InvalidNormalizedSize { size: f64 },
    #[error("loss term '{which}' is not finite: {value}")]
    NonFiniteTerm { which: &'static str, value: f64 },
    #[error("loss weights must be finite and non-negative")]
    InvalidWeights,
    #[error("initial silhouette does not overlap the target (dice = {dice})")]
    NoOverlap { dice: f64 },
    #[error("refinement requires steps >= 1")]
    NoSteps,
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    PnP(#[from] PnPError),
    #[error(transparent)]
    Render(#[from] RenderError),
}

/// Invertible 2D similarity transform `p ↦ s·R(φ)·F·p + o`, where `F`
/// mirrors the x-axis when `flip` is set. Scale normalization uses only
/// scale+offset; augmentation may also rotate and flip.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimilarityTransform2D {
    scale: f64,
    rotation: f64,
    flip: bool,
    offset: Point2,
}

impl SimilarityTransform2D {
    pub fn new(
        scale: f64,
        rotation: f64,
        flip: bool,
        offset: Point2,
    ) -> Result<Self, SelfsupError> {
        if !(scale > 0.0 && scale.is_finite()) || !rotation.is_finite() || !offset.x.is_finite()
            || !offset.y.is_finite()
        {
            return Err(SelfsupError::InvalidScale { scale });
        }
        Ok(Self {
            scale,
            rotation,
            flip,
            offset,
        })
    }

    pub fn identity() -> Self {
        Self {
            scale: 1.0,
            rotation: 0.0,
            flip: false,
            offset: Point2::zeros(),
        }
    }

    /// Axis-aligned scale-and-offset transform (the normalization family).
    pub fn scale_offset(scale: f64, offset: Point2) -> Result<Self, SelfsupError> {
        Self::new(scale, 0.0, false, offset)
    }

    /// Left–right mirror of an image of the given pixel width: `x ↦ w − x`.
    pub fn hflip(width: f64) -> Self {
        Self {
            scale: 1.0,
            rotation: 0.0,
            flip: true,
            offset: Point2::new(width, 0.0),
        }
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn rotation(&self) -> f64 {
        self.rotation
    }

    pub fn flip(&self) -> bool {
        self.flip
    }

    pub fn offset(&self) -> Point2 {
        self.offset
    }

    /// The linear part `s·R(φ)·F` as a matrix.
    pub fn linear(&self) -> Matrix2<f64> {
        let (sin, cos) = self.rotation.sin_cos();
        let rot = Matrix2::new(cos, -sin, sin, cos);
        let flip = if self.flip {
            Matrix2::new(-1.0, 0.0, 0.0, 1.0)
        } else {
            Matrix2::identity()
        };
        rot * flip * self.scale
    }

    pub fn apply(&self, p: &Point2) -> Point2 {
        self.linear() * p + self.offset
    }

    pub fn apply_set(&self, points: &[Point2]) -> KeypointSet2D {
        points.iter().map(|p| self.apply(p)).collect()
    }

    /// Exact inverse, again a similarity transform. With a flip the mirror
    /// commutes with rotation as `F·R(−φ) = R(φ)·F`, so the flip flag and
    /// angle are preserved; without one the angle negates.
    pub fn inverse(&self) -> Self {
        let inv_scale = 1.0 / self.scale;
        let (sin, cos) = self.rotation.sin_cos();
        let rot_neg = Matrix2::new(cos, sin, -sin, cos);
        if self.flip {
            let flip = Matrix2::new(-1.0, 0.0, 0.0, 1.0);
            Self {
                scale: inv_scale,
                rotation: self.rotation,
                flip: true,
                offset: -(flip * rot_neg * self.offset) * inv_scale,
            }
        } else {
            Self {
                scale: inv_scale,
                rotation: -self.rotation,
                flip: false,
                offset: -(rot_neg * self.offset) * inv_scale,
            }
        }
    }

    /// Resample a probability field through this transform: output pixel
    /// center `q` reads `input(T⁻¹(q))` bilinearly, zero outside. Fields
    /// are carried along, not differentiated through.
    pub fn apply_to_mask(&self, input: &ProbMask, out_width: usize, out_height: usize) -> ProbMask {
        let inv = self.inverse();
        let mut out = ProbMask::zeros(out_width, out_height);
        for row in 0..out_height {
            for col in 0..out_width {
                let src = inv.apply(&crate::keypoint::pixel_center(col, row));
                out.set(row, col, input.sample_bilinear(&src));
            }
        }
        out
    }
}

/// Weights for the consistency and alignment terms of the combined loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
}

impl LossWeights {
    pub fn new(lambda1: f64, lambda2: f64) -> Result<Self, SelfsupError> {
        if !(lambda1.is_finite() && lambda1 >= 0.0 && lambda2.is_finite() && lambda2 >= 0.0) {
            return Err(SelfsupError::InvalidWeights);
        }
        Ok(Self { lambda1, lambda2 })
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 1.0,
        }
    }
}

/// Scale-and-offset transform mapping `bbox` into the `[0, target]²`
/// normalized crop: the longest side maps to `target` and the short side
/// is centered with symmetric padding.
pub fn normalize_transform(bbox: &BBox, target: f64) -> Result<SimilarityTransform2D, SelfsupError> {
    if !(target >= MIN_NORMALIZED_SIZE && target.is_finite()) {
        return Err(SelfsupError::InvalidNormalizedSize { size: target });
    }
    let scale = target / bbox.longest_side();
    let center = bbox.center();
    let offset = Point2::new(target / 2.0, target / 2.0) - scale * center;
    SimilarityTransform2D::new(scale, 0.0, false, offset)
}

/// Midpoint of the full-scale predictions and the normalized-scale
/// predictions mapped back through `n`.
pub fn ensemble_keypoints(
    k_orig: &[Point2],
    k_norm: &[Point2],
    n: &SimilarityTransform2D,
) -> Result<KeypointSet2D, SelfsupError> {
    if k_orig.len() != k_norm.len() {
        return Err(SelfsupError::LengthMismatch {
            expected: k_orig.len(),
            got: k_norm.len(),
        });
    }
    let n_inv = n.inverse();
    Ok(k_orig
        .iter()
        .zip(k_norm.iter())
        .map(|(o, m)| (o + n_inv.apply(m)) * 0.5)
        .collect())
}

/// How the consistency target (the reprojected average) is treated when
/// differentiating [`dual_scale_loss`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TargetMode {
    /// The reprojected average is a constant pseudo-target: the
    /// unaugmented sets receive zero gradient.
    #[default]
    Detached,
    /// Gradients flow through the pose solve into the unaugmented sets via
    /// the implicit-function pose Jacobian.
    PnpThrough,
}

/// Gradients of [`dual_scale_loss`] w.r.t. the four keypoint sets.
#[derive(Debug, Clone, PartialEq)]
pub struct DualScaleGradients {
    pub d_orig_aug: Vec<Point2>,
    pub d_norm_aug: Vec<Point2>,
    pub d_orig: Vec<Point2>,
    pub d_norm: Vec<Point2>,
    pub mode: TargetMode,
}

/// Dual-scale consistency loss.
///
/// The full-scale and normalized-scale predictions are averaged in the
/// original frame, a pose is solved on the average, and the model points
/// are reprojected to form the target set k̄. Both augmented prediction
/// sets are mapped back to the original frame (augmentation inverse; the
/// normalized branch additionally un-normalizes, matching the
/// augment-then-normalize input pipeline) and penalized against k̄ with a
/// smooth-ℓ1 on each coordinate of the residual divided by
/// `sigma_scale·scale`.
#[allow(clippy::too_many_arguments)]
pub fn dual_scale_loss(
    k_orig_aug: &[Point2],
    k_norm_aug: &[Point2],
    k_orig: &[Point2],
    k_norm: &[Point2],
    aug: &SimilarityTransform2D,
    norm: &SimilarityTransform2D,
    k3d: &[crate::geometry::Point3],
    cam: &CameraIntrinsics,
    scale: ObjectScale,
    sigma_scale: f64,
    mode: TargetMode,
) -> Result<(f64, DualScaleGradients), SelfsupError> {
    let n = k3d.len();
    for set in [k_orig_aug, k_norm_aug, k_orig, k_norm] {
        if set.len() != n {
            return Err(SelfsupError::LengthMismatch {
                expected: n,
                got: set.len(),
            });
        }
    }
    let denom = sigma_scale * scale.get();
    if !(denom > 0.0 && denom.is_finite()) {
        return Err(SelfsupError::NonFiniteTerm {
            which: "sigma_scale * scale",
            value: denom,
        });
    }

    let averaged = ensemble_keypoints(k_orig, k_norm, norm)?;
    let solution = epnp_solve(&averaged, k3d, cam)?;
    let target = crate::geometry::project_points(&solution.pose, k3d, cam)?;

    let aug_inv = aug.inverse();
    let norm_inv = norm.inverse();
    // Residual branches: per point, mapped-back prediction minus target.
    let orig_mapped: Vec<Point2> = k_orig_aug.iter().map(|p| aug_inv.apply(p)).collect();
    let norm_mapped: Vec<Point2> = k_norm_aug
        .iter()
        .map(|p| aug_inv.apply(&norm_inv.apply(p)))
        .collect();

    let mut loss = 0.0;
    let mut d_orig_aug = vec![Point2::zeros(); n];
    let mut d_norm_aug = vec![Point2::zeros(); n];
    // ∂loss/∂target, reused by the pose-through mode.
    let mut d_target = vec![Point2::zeros(); n];
    // Chain factors: mapped = M·k_aug + const per branch.
    let m_orig = aug_inv.linear();
    let m_norm = aug_inv.linear() * norm_inv.linear();
    for i in 0..n {
        for (mapped, m, d_aug) in [
            (&orig_mapped[i], &m_orig, &mut d_orig_aug[i]),
            (&norm_mapped[i], &m_norm, &mut d_norm_aug[i]),
        ] {
            let r = (mapped - target[i]) / denom;
            loss += smooth_l1(r.x) + smooth_l1(r.y);
            let g = Point2::new(smooth_l1_grad(r.x), smooth_l1_grad(r.y)) / denom;
            *d_aug += m.transpose() * g;
            d_target[i] -= g;
        }
    }

    let (d_orig, d_norm) = match mode {
        TargetMode::Detached => (vec![Point2::zeros(); n], vec![Point2::zeros(); n]),
        TargetMode::PnpThrough => {
            // d(target)/d(averaged) = J_proj (2N×6) · dθ/dk (6×2N).
            let dtheta_dk = pnp_jacobian(&solution, &averaged, k3d, cam, HessianMode::Exact)?;
            let jac = crate::geometry::project_jacobian(&solution.pose, k3d, cam)?;
            // d(loss)/dθ = Σ_i J_i^T · d_target_i  (6-vector).
            let mut dl_dtheta = [0.0f64; 6];
            for i in 0..n {
                for c in 0..6 {
                    dl_dtheta[c] += jac[i][(0, c)] * d_target[i].x + jac[i][(1, c)] * d_target[i].y;
                }
            }
            // d(loss)/d(averaged)_j = Σ_c dθ_c/dk_j · dl/dθ_c.
            let mut d_avg = vec![Point2::zeros(); n];
            for j in 0..n {
                for c in 0..6 {
                    d_avg[j].x += dtheta_dk[(c, 2 * j)] * dl_dtheta[c];
                    d_avg[j].y += dtheta_dk[(c, 2 * j + 1)] * dl_dtheta[c];
                }
            }
            // averaged = (k_orig + N⁻¹(k_norm)) / 2.
            let half_norm_lin = (norm_inv.linear() * 0.5).transpose();
            let d_orig: Vec<Point2> = d_avg.iter().map(|g| g * 0.5).collect();
            let d_norm: Vec<Point2> = d_avg.iter().map(|g| half_norm_lin * g).collect();
            (d_orig, d_norm)
        }
    };

    Ok((
        loss,
        DualScaleGradients {
            d_orig_aug,
            d_norm_aug,
            d_orig,
            d_norm,
            mode,
        },
    ))
}

/// Combined self-supervision objective:
/// `key + offset + λ1·consistency + λ2·alignment`, where the keypoint and
/// offset terms are already accumulated over both scales by the caller.
pub fn total_self_loss(
    key_term: f64,
    offset_term: f64,
    consistency_term: f64,
    alignment_term: f64,
    w: &LossWeights,
) -> Result<f64, SelfsupError> {
    for (which, value) in [
        ("key", key_term),
        ("offset", offset_term),
        ("consistency", consistency_term),
        ("alignment", alignment_term),
    ] {
        if !value.is_finite() {
            return Err(SelfsupError::NonFiniteTerm { which, value });
        }
    }
    Ok(key_term + offset_term + w.lambda1 * consistency_term + w.lambda2 * alignment_term)
}

/// One recorded refinement state: the loss and the pose-chart coordinates
/// at which it was accepted.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VsaSample {
    pub loss: f64,
    pub params: [f64; 6],
}

/// Result of [`refine_pose_vsa`]: the best pose encountered and the
/// accepted-step loss trace (first entry is the initial loss).
#[derive(Debug, Clone, PartialEq)]
pub struct VsaResult {
    pub pose: Pose,
    pub trace: Vec<VsaSample>,
}

/// Visible-silhouette-alignment refinement: gradient descent on
/// `dice(pseudo, render(pose)·fg)` over the six pose-chart coordinates
/// with a backtracking line search (step resets each outer iteration and
/// halves on increase, up to [`MAX_LINE_SEARCH_HALVINGS`] times). Probes
/// that leave the renderable domain (mesh behind camera) count as
/// increases. Returns the best-loss pose encountered; the trace is
/// non-increasing by construction.
#[allow(clippy::too_many_arguments)]
pub fn refine_pose_vsa(
    init: &Pose,
    pseudo: &ProbMask,
    fg_prob: &ProbMask,
    mesh: &TriMesh,
    cam: &CameraIntrinsics,
    steps: usize,
    step_size: f64,
    tau: f64,
) -> Result<VsaResult, SelfsupError> {
    if steps == 0 {
        return Err(SelfsupError::NoSteps);
    }
    let eval_loss = |params: &[f64; 6]| -> Result<f64, SelfsupError> {
        let pose = Pose::from_params(params);
        let rendered = render_silhouette(&pose, mesh, cam, tau)?;
        let visible = visible_mask(&rendered, fg_prob)?;
        Ok(dice_loss_value(
            pseudo,
            &visible,
            &ProbMask::filled(visible.width(), visible.height(), 1.0)?,
            DEFAULT_DICE_EPSILON,
        )?)
    };
    // Loss and pose-gradient in one pass: the dice gradient w.r.t. the
    // rendered map (which already carries the fg factor) contracts with
    // the per-pixel pose gradients.
    let eval_full = |params: &[f64; 6]| -> Result<(f64, [f64; 6]), SelfsupError> {
        let pose = Pose::from_params(params);
        let (rendered, pix_grad) = render_silhouette_with_pose_grad(&pose, mesh, cam, tau)?;
        let (loss, grads) = dice_loss(pseudo, &rendered, fg_prob, DEFAULT_DICE_EPSILON)?;
        let mut g = [0.0f64; 6];
        for (dm, pg) in grads.d_rendered.iter().zip(pix_grad.iter()) {
            if *dm != 0.0 {
                for c in 0..6 {
                    g[c] += dm * pg[c];
                }
            }
        }
        Ok((loss, g))
    };

    let mut params = init.params();
    let (init_loss, _) = eval_full(&params)?;
    if init_loss >= 1.0 - 1e-6 {
        return Err(SelfsupError::NoOverlap { dice: init_loss });
    }
    let mut trace = vec![VsaSample {
        loss: init_loss,
        params,
    }];
    let mut best = (init_loss, params);
    let mut cur_loss = init_loss;

    for _ in 0..steps {
        let (loss, grad) = eval_full(&params)?;
        cur_loss = cur_loss.min(loss);
        let gmax = grad.iter().fold(0.0f64, |m, g| m.max(g.abs()));
        if gmax < 1e-12 {
            break;
        }
        let mut step = step_size;
        let mut accepted = false;
        for _ in 0..=MAX_LINE_SEARCH_HALVINGS {
            let mut cand = params;
            for c in 0..6 {
                cand[c] -= step * grad[c];
            }
            match eval_loss(&cand) {
                Ok(l) if l < cur_loss => {
                    params = cand;
                    cur_loss = l;
                    trace.push(VsaSample {
                        loss: l,
                        params: cand,
                    });
                    if l < best.0 {
                        best = (l, cand);
                    }
                    accepted = true;
                    break;
                }
                // Higher loss, or the probe left the renderable domain.
                Ok(_) | Err(SelfsupError::Render(RenderError::MeshBehindCamera { .. })) => {
                    step *= 0.5;
                }
                Err(e) => return Err(e),
            }
        }
        if !accepted {
            break;
        }
    }

    Ok(VsaResult {
        pose: Pose::from_params(&best.1),
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{parse_obj, Point3};
    use crate::render::hard_silhouette;
    use approx::assert_relative_eq;
    use nalgebra::Vector3;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cube_points() -> Vec<Point3> {
        let mut pts = Vec::new();
        for &x in &[-0.5, 0.5] {
            for &y in &[-0.5, 0.5] {
                for &z in &[-0.5, 0.5] {
                    pts.push(Point3::new(x, y, z));
                }
            }
        }
        pts
    }

    fn cube_mesh() -> TriMesh {
        parse_obj(
            "v -0.5 -0.5 -0.5\nv 0.5 -0.5 -0.5\nv 0.5 0.5 -0.5\nv -0.5 0.5 -0.5\n\
             v -0.5 -0.5 0.5\nv 0.5 -0.5 0.5\nv 0.5 0.5 0.5\nv -0.5 0.5 0.5\n\
             f 1 3 2\nf 1 4 3\nf 5 6 7\nf 5 7 8\nf 1 2 6\nf 1 6 5\n\
             f 2 3 7\nf 2 7 6\nf 3 4 8\nf 3 8 7\nf 4 1 5\nf 4 5 8\n",
        )
        .unwrap()
    }

    fn test_cam() -> CameraIntrinsics {
        CameraIntrinsics::new(500.0, 500.0, 320.0, 240.0, 640, 480).unwrap()
    }

    fn random_transform(rng: &mut ChaCha8Rng, allow_aug: bool) -> SimilarityTransform2D {
        let scale = rng.random_range(0.2..4.0);
        let offset = Point2::new(rng.random_range(-50.0..50.0), rng.random_range(-50.0..50.0));
        if allow_aug {
            SimilarityTransform2D::new(
                scale,
                rng.random_range(-3.0..3.0),
                rng.random_bool(0.5),
                offset,
            )
            .unwrap()
        } else {
            SimilarityTransform2D::scale_offset(scale, offset).unwrap()
        }
    }

    #[test]
    fn transform_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for case in 0..200 {
            let t = random_transform(&mut rng, case % 2 == 0);
            let inv = t.inverse();
            let p = Point2::new(rng.random_range(-80.0..80.0), rng.random_range(-80.0..80.0));
            let back = inv.apply(&t.apply(&p));
            assert!((back - p).norm() < 1e-12 * (1.0 + p.norm()), "case {case}");
            // Double inverse reproduces the transform.
            let tt = inv.inverse();
            assert!((tt.scale() - t.scale()).abs() < 1e-12);
            assert_eq!(tt.flip(), t.flip());
            assert!((tt.offset() - t.offset()).norm() < 1e-9);
        }
    }

    #[test]
    fn normalize_transform_examples() {
        let identity = normalize_transform(&BBox::new(0.0, 0.0, 64.0, 64.0).unwrap(), 64.0).unwrap();
        assert_relative_eq!(identity.scale(), 1.0);
        assert!(identity.offset().norm() < 1e-12);

        let t = normalize_transform(&BBox::new(10.0, 10.0, 138.0, 138.0).unwrap(), 64.0).unwrap();
        assert_relative_eq!(t.scale(), 0.5);
        assert_relative_eq!(t.offset().x, -5.0);
        assert_relative_eq!(t.offset().y, -5.0);

        // Non-square: short side centered with symmetric padding.
        let t = normalize_transform(&BBox::new(0.0, 0.0, 100.0, 50.0).unwrap(), 64.0).unwrap();
        assert_relative_eq!(t.scale(), 0.64);
        let lo = t.apply(&Point2::new(0.0, 0.0));
        let hi = t.apply(&Point2::new(100.0, 50.0));
        assert_relative_eq!(lo.x, 0.0);
        assert_relative_eq!(hi.x, 64.0);
        assert_relative_eq!(lo.y, 16.0);
        assert_relative_eq!(hi.y, 48.0);

        assert!(matches!(
            normalize_transform(&BBox::new(0.0, 0.0, 10.0, 10.0).unwrap(), 4.0),
            Err(SelfsupError::InvalidNormalizedSize { .. })
        ));
    }

    #[test]
    fn flip_is_involution_and_scale_pair_cancels() {
        let flip = SimilarityTransform2D::hflip(64.0);
        let p = Point2::new(13.25, 41.5);
        assert_relative_eq!(flip.apply(&flip.apply(&p)).x, p.x);
        let double = SimilarityTransform2D::scale_offset(2.0, Point2::zeros()).unwrap();
        let half = SimilarityTransform2D::scale_offset(0.5, Point2::zeros()).unwrap();
        let q = half.apply(&double.apply(&p));
        assert!((q - p).norm() < 1e-12);
        let id = SimilarityTransform2D::identity();
        assert_eq!(id.apply(&p), p);
    }

    #[test]
    fn ensemble_is_exact_midpoint() {
        let n = SimilarityTransform2D::scale_offset(2.0, Point2::new(4.0, -2.0)).unwrap();
        let k_orig = vec![Point2::new(0.0, 0.0)];
        // Mapped back: (2, 2) → ensemble (1, 1).
        let k_norm = vec![n.apply(&Point2::new(2.0, 2.0))];
        let ens = ensemble_keypoints(&k_orig, &k_norm, &n).unwrap();
        assert_relative_eq!(ens[0].x, 1.0);
        assert_relative_eq!(ens[0].y, 1.0);

        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let n = random_transform(&mut rng, false);
        let a: Vec<Point2> = (0..8)
            .map(|_| Point2::new(rng.random_range(0.0..64.0), rng.random_range(0.0..64.0)))
            .collect();
        let b: Vec<Point2> = (0..8)
            .map(|_| Point2::new(rng.random_range(0.0..64.0), rng.random_range(0.0..64.0)))
            .collect();
        let ens = ensemble_keypoints(&a, &b, &n).unwrap();
        let n_inv = n.inverse();
        for i in 0..8 {
            let mapped = n_inv.apply(&b[i]);
            assert_relative_eq!(
                (ens[i] - a[i]).norm(),
                (ens[i] - mapped).norm(),
                epsilon = 1e-9
            );
        }
        assert!(matches!(
            ensemble_keypoints(&a, &b[..4], &n),
            Err(SelfsupError::LengthMismatch { .. })
        ));
    }

    /// A ground-truth scene: pose, camera, exact projections, and the
    /// normalization transform of the projections' bbox.
    fn consistent_scene() -> (Pose, Vec<Point3>, KeypointSet2D, SimilarityTransform2D) {
        let pose = Pose::from_axis_angle(&Vector3::new(0.4, -0.3, 0.2), &Vector3::new(0.2, -0.1, 4.0));
        let k3d = cube_points();
        let cam = test_cam();
        let proj = crate::geometry::project_points(&pose, &k3d, &cam).unwrap();
        let (mut lo, mut hi) = (Point2::new(f64::MAX, f64::MAX), Point2::new(f64::MIN, f64::MIN));
        for p in &proj {
            lo = lo.inf(p);
            hi = hi.sup(p);
        }
        let bbox = BBox::new(lo.x, lo.y, hi.x, hi.y).unwrap();
        let norm = normalize_transform(&bbox, DEFAULT_NORMALIZED_SIZE).unwrap();
        (pose, k3d, proj, norm)
    }

    #[test]
    fn dual_scale_loss_zero_at_consistent_pose_exact_predictions() {
        let (_, k3d, proj, norm) = consistent_scene();
        let cam = test_cam();
        let aug = SimilarityTransform2D::identity();
        let k_norm: Vec<Point2> = norm.apply_set(&proj);
        let (loss, grads) = dual_scale_loss(
            &proj,
            &k_norm,
            &proj,
            &k_norm,
            &aug,
            &norm,
            &k3d,
            &cam,
            ObjectScale::new(100.0).unwrap(),
            0.1,
            TargetMode::Detached,
        )
        .unwrap();
        assert!(loss < 1e-8, "zero-point loss {loss:.3e}");
        for g in grads.d_orig_aug.iter().chain(grads.d_norm_aug.iter()) {
            assert!(g.norm() < 1e-6);
        }
        // Detached mode: unaugmented sets receive no gradient.
        for g in grads.d_orig.iter().chain(grads.d_norm.iter()) {
            assert_eq!(g.norm(), 0.0);
        }
    }

    #[test]
    fn dual_scale_loss_unit_offset_closed_form() {
        let (_, k3d, proj, norm) = consistent_scene();
        let cam = test_cam();
        let aug = SimilarityTransform2D::identity();
        let scale = ObjectScale::new(120.0).unwrap();
        let sigma_scale = 0.1;
        let shift = Point2::new(sigma_scale * scale.get(), 0.0);
        let orig_aug: Vec<Point2> = proj.iter().map(|p| p + shift).collect();
        let norm_aug: Vec<Point2> = proj.iter().map(|p| norm.apply(&(p + shift))).collect();
        let k_norm: Vec<Point2> = norm.apply_set(&proj);
        let (loss, _) = dual_scale_loss(
            &orig_aug,
            &norm_aug,
            &proj,
            &k_norm,
            &aug,
            &norm,
            &k3d,
            &cam,
            scale,
            sigma_scale,
            TargetMode::Detached,
        )
        .unwrap();
        // Each branch contributes smooth_ℓ1(1) + smooth_ℓ1(0) = 0.5 per
        // keypoint; two branches → n · 1.0.
        assert_relative_eq!(loss, k3d.len() as f64, epsilon = 1e-6);
    }

    #[test]
    fn dual_scale_detached_gradient_matches_finite_differences() {
        let (_, k3d, proj, norm) = consistent_scene();
        let cam = test_cam();
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let aug = SimilarityTransform2D::new(1.2, 0.3, true, Point2::new(12.0, -5.0)).unwrap();
        let scale = ObjectScale::new(100.0).unwrap();
        let sigma_scale = 0.1;
        // Noisy augmented predictions in their own frames.
        let orig_aug: Vec<Point2> = proj
            .iter()
            .map(|p| {
                aug.apply(p) + Point2::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0))
            })
            .collect();
        let norm_aug: Vec<Point2> = proj
            .iter()
            .map(|p| {
                norm.apply(&aug.apply(p))
                    + Point2::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0))
            })
            .collect();
        let k_norm: Vec<Point2> = norm.apply_set(&proj);
        let eval = |oa: &[Point2], na: &[Point2]| {
            dual_scale_loss(
                oa,
                na,
                &proj,
                &k_norm,
                &aug,
                &norm,
                &k3d,
                &cam,
                scale,
                sigma_scale,
                TargetMode::Detached,
            )
            .unwrap()
            .0
        };
        let (_, grads) = dual_scale_loss(
            &orig_aug,
            &norm_aug,
            &proj,
            &k_norm,
            &aug,
            &norm,
            &k3d,
            &cam,
            scale,
            sigma_scale,
            TargetMode::Detached,
        )
        .unwrap();
        // Flatten both augmented sets into one FD vector.
        let flat: Vec<f64> = orig_aug
            .iter()
            .chain(norm_aug.iter())
            .flat_map(|p| [p.x, p.y])
            .collect();
        let n = k3d.len();
        let fd = crate::numeric::central_difference(
            |x: &[f64]| {
                let oa: Vec<Point2> =
                    (0..n).map(|i| Point2::new(x[2 * i], x[2 * i + 1])).collect();
                let na: Vec<Point2> = (0..n)
                    .map(|i| Point2::new(x[2 * n + 2 * i], x[2 * n + 2 * i + 1]))
                    .collect();
                eval(&oa, &na)
            },
            &flat,
            1e-5,
        );
        let analytic: Vec<f64> = grads
            .d_orig_aug
            .iter()
            .chain(grads.d_norm_aug.iter())
            .flat_map(|g| [g.x, g.y])
            .collect();
        let rel = crate::numeric::max_relative_error(&analytic, &fd);
        assert!(rel < 1e-6, "detached gradient rel err {rel:.3e}");
    }

    #[test]
    fn dual_scale_pnp_through_gradient_matches_resolve_fd() {
        let (_, k3d, proj, norm) = consistent_scene();
        let cam = test_cam();
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let aug = SimilarityTransform2D::identity();
        let scale = ObjectScale::new(100.0).unwrap();
        let sigma_scale = 0.1;
        // Offset the augmented sets so residuals (and target gradients)
        // are non-trivial; perturb the unaugmented sets mildly.
        let orig_aug: Vec<Point2> = proj.iter().map(|p| p + Point2::new(4.0, -2.0)).collect();
        let norm_aug: Vec<Point2> = proj
            .iter()
            .map(|p| norm.apply(&(p + Point2::new(-3.0, 5.0))))
            .collect();
        let k_orig: Vec<Point2> = proj
            .iter()
            .map(|p| {
                p + Point2::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5))
            })
            .collect();
        let k_norm: Vec<Point2> = norm.apply_set(&proj);
        let eval = |ko: &[Point2]| {
            dual_scale_loss(
                &orig_aug,
                &norm_aug,
                ko,
                &k_norm,
                &aug,
                &norm,
                &k3d,
                &cam,
                scale,
                sigma_scale,
                TargetMode::PnpThrough,
            )
            .unwrap()
            .0
        };
        let (_, grads) = dual_scale_loss(
            &orig_aug,
            &norm_aug,
            &k_orig,
            &k_norm,
            &aug,
            &norm,
            &k3d,
            &cam,
            scale,
            sigma_scale,
            TargetMode::PnpThrough,
        )
        .unwrap();
        let flat: Vec<f64> = k_orig.iter().flat_map(|p| [p.x, p.y]).collect();
        let n = k3d.len();
        let fd = crate::numeric::central_difference(
            |x: &[f64]| {
                let ko: Vec<Point2> =
                    (0..n).map(|i| Point2::new(x[2 * i], x[2 * i + 1])).collect();
                eval(&ko)
            },
            &flat,
            1e-4,
        );
        let analytic: Vec<f64> = grads.d_orig.iter().flat_map(|g| [g.x, g.y]).collect();
        let rel = crate::numeric::max_relative_error(&analytic, &fd);
        assert!(rel < 1e-3, "pose-through gradient rel err {rel:.3e}");
    }

    #[test]
    fn dual_scale_loss_invariant_under_joint_relabeling() {
        let (_, k3d, proj, norm) = consistent_scene();
        let cam = test_cam();
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let aug = SimilarityTransform2D::new(0.9, -0.2, false, Point2::new(3.0, 4.0)).unwrap();
        let scale = ObjectScale::new(100.0).unwrap();
        let jitter = |rng: &mut ChaCha8Rng, set: &[Point2]| -> Vec<Point2> {
            set.iter()
                .map(|p| {
                    p + Point2::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0))
                })
                .collect()
        };
        let orig_aug = jitter(&mut rng, &aug.apply_set(&proj));
        let norm_aug = jitter(&mut rng, &norm.apply_set(&aug.apply_set(&proj)));
        let k_orig = jitter(&mut rng, &proj);
        let k_norm = jitter(&mut rng, &norm.apply_set(&proj));
        let run = |perm: &[usize]| {
            let pick2 = |s: &[Point2]| -> Vec<Point2> { perm.iter().map(|&i| s[i]).collect() };
            let pick3: Vec<Point3> = perm.iter().map(|&i| k3d[i]).collect();
            dual_scale_loss(
                &pick2(&orig_aug),
                &pick2(&norm_aug),
                &pick2(&k_orig),
                &pick2(&k_norm),
                &aug,
                &norm,
                &pick3,
                &cam,
                scale,
                0.1,
                TargetMode::Detached,
            )
            .unwrap()
            .0
        };
        let id: Vec<usize> = (0..k3d.len()).collect();
        let shuffled = vec![5, 2, 7, 0, 3, 6, 1, 4];
        let (a, b) = (run(&id), run(&shuffled));
        assert_relative_eq!(a, b, epsilon = 1e-9);
    }

    #[test]
    fn total_self_loss_arithmetic_and_errors() {
        let w = LossWeights::new(0.5, 0.25).unwrap();
        assert_relative_eq!(total_self_loss(0.0, 0.0, 0.0, 0.0, &w).unwrap(), 0.0);
        assert_relative_eq!(total_self_loss(1.0, 2.0, 3.0, 4.0, &w).unwrap(), 5.5);
        let zero = LossWeights::new(0.0, 0.0).unwrap();
        assert_relative_eq!(total_self_loss(1.0, 2.0, 9.0, 9.0, &zero).unwrap(), 3.0);
        assert!(matches!(
            total_self_loss(f64::NAN, 0.0, 0.0, 0.0, &w),
            Err(SelfsupError::NonFiniteTerm { which: "key", .. })
        ));
        assert!(LossWeights::new(-1.0, 0.0).is_err());
        // Default weights are unit.
        let d = LossWeights::default();
        assert_relative_eq!(total_self_loss(1.0, 1.0, 1.0, 1.0, &d).unwrap(), 4.0);
    }

    fn vsa_cam() -> CameraIntrinsics {
        CameraIntrinsics::new(96.0, 96.0, 48.0, 48.0, 96, 96).unwrap()
    }

    #[test]
    fn vsa_stays_put_at_ground_truth() {
        let cam = vsa_cam();
        let mesh = cube_mesh();
        let gt = Pose::from_axis_angle(&Vector3::new(0.2, 0.3, 0.1), &Vector3::new(0.0, 0.0, 4.0));
        let pseudo = hard_silhouette(&gt, &mesh, &cam).unwrap();
        let ones = ProbMask::filled(96, 96, 1.0).unwrap();
        // A deliberately tiny step bounds total movement by
        // steps·step·‖g‖ ≪ 1e-6 — the assertion is that descent from the
        // optimum has nowhere to go, not that it takes large null steps.
        let out = refine_pose_vsa(&gt, &pseudo, &ones, &mesh, &cam, 50, 1e-9, 0.5).unwrap();
        let moved: f64 = out
            .pose
            .params()
            .iter()
            .zip(gt.params().iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(moved < 1e-6, "moved {moved:.3e}");
        for w in out.trace.windows(2) {
            assert!(w[1].loss <= w[0].loss);
        }
    }

    #[test]
    fn vsa_recovers_perturbed_pose() {
        // The soft silhouette is slightly dilated relative to the hard one
        // (each boundary edge contributes two coincident sigmoid ramps), which
        // biases the dice optimum a fraction of tau outward in depth.  A
        // coarse-to-fine tau schedule shrinks that bias below the target
        // tolerance while the coarse stage keeps the basin wide.
        let cam = CameraIntrinsics::new(128.0, 128.0, 64.0, 64.0, 128, 128).unwrap();
        let mesh = cube_mesh();
        let gt = Pose::from_axis_angle(&Vector3::new(0.4, -0.3, 0.2), &Vector3::new(0.1, -0.1, 4.0));
        let pseudo = hard_silhouette(&gt, &mesh, &cam).unwrap();
        let ones = ProbMask::filled(128, 128, 1.0).unwrap();
        // 5° about a skew axis and 5%-of-depth translation offset.
        let angle = 5.0f64.to_radians();
        let axis = Vector3::new(1.0, 2.0, -1.0).normalize() * angle;
        let delta = Pose::from_axis_angle(&axis, &Vector3::new(0.08, -0.12, 0.12));
        let init = delta.compose(&gt);
        let coarse = refine_pose_vsa(&init, &pseudo, &ones, &mesh, &cam, 50, 0.1, 0.5).unwrap();
        let fine = refine_pose_vsa(&coarse.pose, &pseudo, &ones, &mesh, &cam, 150, 0.1, 0.1).unwrap();
        let rot_err = fine.pose.geodesic_to(&gt).to_degrees();
        let t_err = (fine.pose.translation() - gt.translation()).norm();
        assert!(rot_err < 1.0, "rotation error {rot_err:.3}°");
        assert!(t_err < 0.04, "translation error {t_err:.4}");
        // The refiner improved on the initial loss.
        assert!(fine.trace.last().unwrap().loss < 0.5 * coarse.trace[0].loss);
    }

    #[test]
    fn vsa_reduces_loss_under_occlusion() {
        let cam = vsa_cam();
        let mesh = cube_mesh();
        let gt = Pose::from_axis_angle(&Vector3::new(0.1, 0.2, -0.3), &Vector3::new(0.0, 0.0, 4.0));
        // Left half-plane occluded in both the prediction and the pseudo
        // label.
        let mut fg = ProbMask::filled(96, 96, 1.0).unwrap();
        let mut pseudo = hard_silhouette(&gt, &mesh, &cam).unwrap();
        for row in 0..96 {
            for col in 0..48 {
                fg.set(row, col, 0.0);
                pseudo.set(row, col, 0.0);
            }
        }
        let angle = 4.0f64.to_radians();
        let delta = Pose::from_axis_angle(
            &(Vector3::new(0.5, 1.0, 0.3).normalize() * angle),
            &Vector3::new(0.1, 0.05, -0.1),
        );
        let init = delta.compose(&gt);
        let out = refine_pose_vsa(&init, &pseudo, &fg, &mesh, &cam, 150, 0.01, 1.0).unwrap();
        let init_loss = out.trace[0].loss;
        let final_loss = out.trace.last().unwrap().loss;
        assert!(
            final_loss <= 0.5 * init_loss,
            "dice {init_loss:.4} → {final_loss:.4}"
        );
    }

    #[test]
    fn vsa_rejects_disjoint_initialization() {
        let cam = vsa_cam();
        let mesh = cube_mesh();
        let gt = Pose::from_axis_angle(&Vector3::zeros(), &Vector3::new(0.0, 0.0, 4.0));
        let pseudo = ProbMask::zeros(96, 96);
        let ones = ProbMask::filled(96, 96, 1.0).unwrap();
        let err = refine_pose_vsa(&gt, &pseudo, &ones, &mesh, &cam, 10, 0.01, 1.0).unwrap_err();
        assert!(matches!(err, SelfsupError::NoOverlap { .. }));
        assert!(matches!(
            refine_pose_vsa(&gt, &pseudo, &ones, &mesh, &cam, 0, 0.01, 1.0),
            Err(SelfsupError::NoSteps)
        ));
    }

    proptest! {
        #[test]
        fn transform_inverse_is_exact(
            scale in 0.1f64..10.0,
            rot in -3.0f64..3.0,
            flip in proptest::bool::ANY,
            ox in -100.0f64..100.0,
            oy in -100.0f64..100.0,
            px in -100.0f64..100.0,
            py in -100.0f64..100.0,
        ) {
            let t = SimilarityTransform2D::new(scale, rot, flip, Point2::new(ox, oy)).unwrap();
            let p = Point2::new(px, py);
            let back = t.inverse().apply(&t.apply(&p));
            prop_assert!((back - p).norm() < 1e-9 * (1.0 + p.norm()));
        }
    }
}
