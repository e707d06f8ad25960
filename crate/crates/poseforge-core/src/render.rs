//! Differentiable silhouette rasterization of posed meshes, visible-mask
//! composition, and the Dice overlap loss.
//!
//! The soft rasterizer follows the probabilistic-aggregation model: each
//! triangle contributes an inside-probability that decays with the signed
//! 2D distance of the pixel center to the projected triangle boundary, and
//! per-pixel contributions combine as `1 − Π(1 − D_j)`. Silhouettes are
//! unions, so no depth buffering is needed.

use alloc::{vec, vec::Vec};
use nalgebra::Matrix2x6;
#[cfg(not(feature = "std"))]
use num_traits::Float;

use crate::geometry::{
    project_jacobian, BBox, CameraIntrinsics, GeometryError, Point2, Pose, TriMesh, Z_NEAR,
};
use crate::keypoint::pixel_center;

/// Errors from rasterization and mask arithmetic.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum RenderError {
    #[error("mesh vertex {index} is behind the camera (z = {z:.6e})")]
    MeshBehindCamera { index: usize, z: f64 },
    #[error("mesh has no faces")]
    EmptyMesh,
    #[error("mask dimensions mismatch: {wa}x{ha} vs {wb}x{hb}")]
    DimensionMismatch {
        wa: usize,
        ha: usize,
        wb: usize,
        hb: usize,
    },
    #[error("sharpness tau must be positive, got {tau}")]
    NonPositiveTau { tau: f64 },
    #[error("epsilon must be positive, got {epsilon}")]
    NonPositiveEpsilon { epsilon: f64 },
    #[error("mask value [{index}] = {value} outside [0, 1]")]
    ValueOutOfRange { index: usize, value: f64 },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Per-pixel probability map in `[0, 1]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMask {
    width: usize,
    height: usize,
    values: Vec<f64>,
}

impl ProbMask {
    /// Validates length and the `[0, 1]` range.
    pub fn new(width: usize, height: usize, values: Vec<f64>) -> Result<Self, RenderError> {
        if values.len() != width * height {
            return Err(RenderError::DimensionMismatch {
                wa: width,
                ha: height,
                wb: values.len(),
                hb: 1,
            });
        }
        for (i, &v) in values.iter().enumerate() {
            if !(0.0..=1.0).contains(&v) {
                return Err(RenderError::ValueOutOfRange { index: i, value: v });
            }
        }
        Ok(Self {
            width,
            height,
            values,
        })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            values: vec![0.0; width * height],
        }
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Result<Self, RenderError> {
        Self::new(width, height, vec![value; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        self.values[row * self.width + col] = value;
    }

    pub fn data(&self) -> &[f64] {
        &self.values
    }

    pub fn same_shape(&self, other: &ProbMask) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// Row-major boolean grid of pixels with value ≥ `threshold`.
    pub fn to_foreground(&self, threshold: f64) -> Vec<bool> {
        self.values.iter().map(|&v| v >= threshold).collect()
    }

    /// Number of pixels with value ≥ `threshold`.
    pub fn count_at_least(&self, threshold: f64) -> usize {
        self.values.iter().filter(|&&v| v >= threshold).count()
    }

    /// Bilinear sample at continuous image coordinates (pixel centers at
    /// half-integer coordinates); zero outside the image.
    pub fn sample_bilinear(&self, p: &Point2) -> f64 {
        let u = p.x - 0.5;
        let v = p.y - 0.5;
        let j0 = u.floor();
        let i0 = v.floor();
        let fu = u - j0;
        let fv = v - i0;
        let mut acc = 0.0;
        for (di, wi) in [(0i64, 1.0 - fv), (1, fv)] {
            for (dj, wj) in [(0i64, 1.0 - fu), (1, fu)] {
                let i = i0 as i64 + di;
                let j = j0 as i64 + dj;
                if i >= 0 && j >= 0 && (i as usize) < self.height && (j as usize) < self.width {
                    acc += wi * wj * self.values[i as usize * self.width + j as usize];
                }
            }
        }
        acc
    }
}

/// Tight bbox of the nonzero pixels of a mask, aligned to pixel boundaries
/// (half-open); `None` if the mask is entirely zero.
pub fn mask_tight_bbox(mask: &ProbMask) -> Option<BBox> {
    let mut min_col = usize::MAX;
    let mut max_col = 0usize;
    let mut min_row = usize::MAX;
    let mut max_row = 0usize;
    let mut any = false;
    for row in 0..mask.height() {
        for col in 0..mask.width() {
            if mask.get(row, col) > 0.0 {
                any = true;
                min_col = min_col.min(col);
                max_col = max_col.max(col);
                min_row = min_row.min(row);
                max_row = max_row.max(row);
            }
        }
    }
    if !any {
        return None;
    }
    Some(
        BBox::new(
            min_col as f64,
            min_row as f64,
            (max_col + 1) as f64,
            (max_row + 1) as f64,
        )
        .expect("nonempty pixel range is a valid bbox"),
    )
}

/// Dilation radius of each triangle's pixel cover region, in units of tau.
pub const COVER_RADIUS_TAUS: f64 = 4.0;

/// Default ε for the Dice loss denominator.
pub const DEFAULT_DICE_EPSILON: f64 = 1e-6;

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Edge-function point-in-triangle test; points exactly on an edge count
/// as inside. Accepts both windings.
fn point_in_triangle(p: &Point2, v: &[Point2; 3]) -> bool {
    let edge = |a: &Point2, b: &Point2| (b.x - a.x) * (p.y - a.y) - (b.y - a.y) * (p.x - a.x);
    let e0 = edge(&v[0], &v[1]);
    let e1 = edge(&v[1], &v[2]);
    let e2 = edge(&v[2], &v[0]);
    (e0 >= 0.0 && e1 >= 0.0 && e2 >= 0.0) || (e0 <= 0.0 && e1 <= 0.0 && e2 <= 0.0)
}

/// Distance from `p` to segment `ab` plus the clamped projection parameter
/// and nearest point.
fn segment_nearest(p: &Point2, a: &Point2, b: &Point2) -> (f64, f64, Point2) {
    let ab = b - a;
    let len_sq = ab.norm_squared();
    let s = if len_sq > 0.0 {
        ((p - a).dot(&ab) / len_sq).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let q = a + ab * s;
    ((p - q).norm(), s, q)
}

/// Signed 2D Euclidean distance from `p` to the triangle boundary:
/// positive inside, negative outside.
fn triangle_signed_distance(p: &Point2, v: &[Point2; 3]) -> f64 {
    let mut dist = f64::INFINITY;
    for k in 0..3 {
        let (d, _, _) = segment_nearest(p, &v[k], &v[(k + 1) % 3]);
        dist = dist.min(d);
    }
    if point_in_triangle(p, v) {
        dist
    } else {
        -dist
    }
}

/// Signed distance plus its gradient w.r.t. the three triangle vertices.
///
/// Only the nearest boundary segment receives gradient (envelope theorem
/// over the min): with nearest point `q = a + s*(b−a)` and outward unit
/// `n̂ = (p−q)/‖p−q‖`, `∂dist/∂a = −(1−s*)·n̂` and `∂dist/∂b = −s*·n̂`;
/// the sign of the signed distance multiplies both. On the boundary itself
/// the direction is undefined and the gradient is reported as zero
/// (a measure-zero set).
fn triangle_signed_distance_grad(p: &Point2, v: &[Point2; 3]) -> (f64, [Point2; 3]) {
    let mut best = (f64::INFINITY, 0.0, Point2::zeros());
    let mut best_k = 0usize;
    for k in 0..3 {
        let (d, s, q) = segment_nearest(p, &v[k], &v[(k + 1) % 3]);
        if d < best.0 {
            best = (d, s, q);
            best_k = k;
        }
    }
    let (dist, s, q) = best;
    let sign = if point_in_triangle(p, v) { 1.0 } else { -1.0 };
    let mut grads = [Point2::zeros(); 3];
    if dist > 1e-12 {
        let n_hat = (p - q) / dist;
        grads[best_k] = -sign * (1.0 - s) * n_hat;
        grads[(best_k + 1) % 3] = -sign * s * n_hat;
    }
    (sign * dist, grads)
}

struct ProjectedMesh {
    verts: Vec<Point2>,
    jacobians: Option<Vec<Matrix2x6<f64>>>,
}

fn project_mesh(
    pose: &Pose,
    mesh: &TriMesh,
    cam: &CameraIntrinsics,
    with_grad: bool,
) -> Result<ProjectedMesh, RenderError> {
    if mesh.faces().is_empty() || mesh.vertices().is_empty() {
        return Err(RenderError::EmptyMesh);
    }
    for (index, p) in mesh.vertices().iter().enumerate() {
        let z = pose.transform(p).z;
        if z <= Z_NEAR {
            return Err(RenderError::MeshBehindCamera { index, z });
        }
    }
    let verts = crate::geometry::project_points(pose, mesh.vertices(), cam)?;
    let jacobians = if with_grad {
        Some(project_jacobian(pose, mesh.vertices(), cam)?)
    } else {
        None
    };
    Ok(ProjectedMesh { verts, jacobians })
}

/// Pixel-index cover range of a triangle's bbox dilated by `radius`.
fn cover_range(
    tri: &[Point2; 3],
    radius: f64,
    width: usize,
    height: usize,
) -> Option<(usize, usize, usize, usize)> {
    let (mut x_min, mut y_min) = (f64::INFINITY, f64::INFINITY);
    let (mut x_max, mut y_max) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for p in tri {
        x_min = x_min.min(p.x);
        y_min = y_min.min(p.y);
        x_max = x_max.max(p.x);
        y_max = y_max.max(p.y);
    }
    // Pixel centers sit at integer + 0.5: the covered column range is
    // [⌈x_min − r − 0.5⌉, ⌊x_max + r − 0.5⌋] clamped to the image.
    let col_lo = (x_min - radius - 0.5).ceil().max(0.0);
    let col_hi = (x_max + radius - 0.5).floor().min(width as f64 - 1.0);
    let row_lo = (y_min - radius - 0.5).ceil().max(0.0);
    let row_hi = (y_max + radius - 0.5).floor().min(height as f64 - 1.0);
    if col_lo > col_hi || row_lo > row_hi {
        return None;
    }
    Some((
        col_lo as usize,
        col_hi as usize,
        row_lo as usize,
        row_hi as usize,
    ))
}

/// Soft silhouette of the posed mesh.
///
/// Per triangle `j`, `D_j = max(0, σ(sd_j/τ) − σ(−4)) / (1 − σ(−4))` where
/// `sd_j` is the signed distance of the pixel center to the projected
/// triangle boundary. The sigmoid tail is subtracted and renormalized so
/// each contribution reaches exactly zero at the cover radius of
/// [`COVER_RADIUS_TAUS`]·τ — the rendered field stays continuous in the
/// pose while every pixel only touches triangles whose dilated bbox covers
/// it. Pixel value = `1 − Π_j (1 − D_j)` over covering triangles, in fixed
/// face-index order.
pub fn render_silhouette(
    pose: &Pose,
    mesh: &TriMesh,
    cam: &CameraIntrinsics,
    tau: f64,
) -> Result<ProbMask, RenderError> {
    render_impl(pose, mesh, cam, tau, false).map(|(mask, _)| mask)
}

/// [`render_silhouette`] plus the per-pixel gradient of the pixel value
/// w.r.t. the six pose-chart coordinates `[ω, t]`.
pub fn render_silhouette_with_pose_grad(
    pose: &Pose,
    mesh: &TriMesh,
    cam: &CameraIntrinsics,
    tau: f64,
) -> Result<(ProbMask, Vec<[f64; 6]>), RenderError> {
    render_impl(pose, mesh, cam, tau, true).map(|(mask, grad)| (mask, grad.unwrap()))
}

#[allow(clippy::type_complexity)]
fn render_impl(
    pose: &Pose,
    mesh: &TriMesh,
    cam: &CameraIntrinsics,
    tau: f64,
    with_grad: bool,
) -> Result<(ProbMask, Option<Vec<[f64; 6]>>), RenderError> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(RenderError::NonPositiveTau { tau });
    }
    let projected = project_mesh(pose, mesh, cam, with_grad)?;
    let (w, h) = (cam.width, cam.height);
    let radius = COVER_RADIUS_TAUS * tau;
    let tail = sigmoid(-COVER_RADIUS_TAUS);
    let renorm = 1.0 - tail;

    // Forward pass: per-pixel product of (1 − D_j), with exact-zero factors
    // (saturated D_j = 1) counted separately so the backward pass can form
    // Π_{l≠j} without dividing by zero.
    let mut prod_nonzero = vec![1.0f64; w * h];
    let mut zero_count = vec![0u32; w * h];
    // (pixel, D_j) cover entries per triangle, kept for the backward pass.
    let mut cover: Vec<Vec<(u32, f64)>> = if with_grad {
        Vec::with_capacity(mesh.faces().len())
    } else {
        Vec::new()
    };

    for face in mesh.faces() {
        let tri = [
            projected.verts[face[0]],
            projected.verts[face[1]],
            projected.verts[face[2]],
        ];
        let mut entries: Vec<(u32, f64)> = Vec::new();
        if let Some((c0, c1, r0, r1)) = cover_range(&tri, radius, w, h) {
            for row in r0..=r1 {
                for col in c0..=c1 {
                    let sd = triangle_signed_distance(&pixel_center(col, row), &tri);
                    let d = ((sigmoid(sd / tau) - tail) / renorm).max(0.0);
                    let m = row * w + col;
                    let one_minus = 1.0 - d;
                    if one_minus == 0.0 {
                        zero_count[m] += 1;
                    } else {
                        prod_nonzero[m] *= one_minus;
                    }
                    if with_grad && d > 0.0 {
                        entries.push((m as u32, d));
                    }
                }
            }
        }
        if with_grad {
            cover.push(entries);
        }
    }

    let values: Vec<f64> = (0..w * h)
        .map(|m| {
            if zero_count[m] > 0 {
                1.0
            } else {
                1.0 - prod_nonzero[m]
            }
        })
        .collect();
    let mask = ProbMask {
        width: w,
        height: h,
        values,
    };
    if !with_grad {
        return Ok((mask, None));
    }

    // Backward pass: ∂value/∂D_j = Π_{l≠j}(1 − D_l), then chain through
    // ∂D_j/∂sd = σ'(sd/τ)/(τ·(1−tail)) and the vertex projection Jacobians.
    let jac = projected.jacobians.as_ref().unwrap();
    let mut grad = vec![[0.0f64; 6]; w * h];
    for (face, entries) in mesh.faces().iter().zip(cover.iter()) {
        let tri = [
            projected.verts[face[0]],
            projected.verts[face[1]],
            projected.verts[face[2]],
        ];
        for &(m32, d) in entries {
            let m = m32 as usize;
            let one_minus = 1.0 - d;
            let dp_dd = if zero_count[m] == 0 {
                prod_nonzero[m] / one_minus
            } else if zero_count[m] == 1 && one_minus == 0.0 {
                prod_nonzero[m]
            } else {
                0.0
            };
            if dp_dd == 0.0 {
                continue;
            }
            let (row, col) = (m / w, m % w);
            let (_, sd_grads) = triangle_signed_distance_grad(&pixel_center(col, row), &tri);
            // dD/dsd from the unshifted sigmoid value s = σ(sd/τ):
            // D = (s − tail)/(1 − tail) ⇒ dD/dsd = s(1−s)/(τ·(1−tail)).
            let s = d * renorm + tail;
            let dd_dsd = s * (1.0 - s) / (tau * renorm);
            let coeff = dp_dd * dd_dsd;
            for (k, &vi) in face.iter().enumerate() {
                let g2 = sd_grads[k];
                if g2.x == 0.0 && g2.y == 0.0 {
                    continue;
                }
                let j = &jac[vi];
                for c in 0..6 {
                    grad[m][c] += coeff * (g2.x * j[(0, c)] + g2.y * j[(1, c)]);
                }
            }
        }
    }
    Ok((mask, Some(grad)))
}

/// Binary silhouette: pixel is 1 iff its center lies inside any projected
/// triangle (edges count as inside). The τ → 0 limit of the soft render
/// away from boundaries.
pub fn hard_silhouette(
    pose: &Pose,
    mesh: &TriMesh,
    cam: &CameraIntrinsics,
) -> Result<ProbMask, RenderError> {
    let projected = project_mesh(pose, mesh, cam, false)?;
    let (w, h) = (cam.width, cam.height);
    let mut values = vec![0.0f64; w * h];
    for face in mesh.faces() {
        let tri = [
            projected.verts[face[0]],
            projected.verts[face[1]],
            projected.verts[face[2]],
        ];
        if let Some((c0, c1, r0, r1)) = cover_range(&tri, 0.5, w, h) {
            for row in r0..=r1 {
                for col in c0..=c1 {
                    let m = row * w + col;
                    if values[m] == 0.0 && point_in_triangle(&pixel_center(col, row), &tri) {
                        values[m] = 1.0;
                    }
                }
            }
        }
    }
    Ok(ProbMask {
        width: w,
        height: h,
        values,
    })
}

/// Visible rendered mask: elementwise product of the rendered silhouette
/// and the predicted foreground probability.
pub fn visible_mask(rendered: &ProbMask, fg_prob: &ProbMask) -> Result<ProbMask, RenderError> {
    if !rendered.same_shape(fg_prob) {
        return Err(RenderError::DimensionMismatch {
            wa: rendered.width,
            ha: rendered.height,
            wb: fg_prob.width,
            hb: fg_prob.height,
        });
    }
    Ok(ProbMask {
        width: rendered.width,
        height: rendered.height,
        values: rendered
            .values
            .iter()
            .zip(fg_prob.values.iter())
            .map(|(a, b)| a * b)
            .collect(),
    })
}

/// Analytic gradients of [`dice_loss`] w.r.t. its three input maps.
#[derive(Debug, Clone, PartialEq)]
pub struct DiceGradients {
    /// ∂L/∂ŷ (pseudo-label map).
    pub d_pseudo: Vec<f64>,
    /// ∂L/∂ỹᴿ (rendered silhouette).
    pub d_rendered: Vec<f64>,
    /// ∂L/∂ỹ (foreground probability).
    pub d_fg: Vec<f64>,
}

/// IoU-style Dice alignment loss between a pseudo label ŷ and the visible
/// rendered mask ỹᴿ·ỹ:
///
/// `L = 1 − (Σ 2·ŷ·ỹᴿ·ỹ + ε) / (Σ (ŷ + ỹᴿ·ỹ) + ε)`.
///
/// Returns the loss and analytic gradients w.r.t. all three maps; callers
/// select which to propagate.
pub fn dice_loss(
    pseudo: &ProbMask,
    rendered: &ProbMask,
    fg_prob: &ProbMask,
    epsilon: f64,
) -> Result<(f64, DiceGradients), RenderError> {
    let (loss, num, den) = dice_loss_parts(pseudo, rendered, fg_prob, epsilon)?;
    let n = pseudo.values.len();
    let mut d_pseudo = vec![0.0; n];
    let mut d_rendered = vec![0.0; n];
    let mut d_fg = vec![0.0; n];
    let den_sq = den * den;
    for m in 0..n {
        let y_hat = pseudo.values[m];
        let v = rendered.values[m] * fg_prob.values[m];
        d_pseudo[m] = (num - 2.0 * v * den) / den_sq;
        let dv = (num - 2.0 * y_hat * den) / den_sq;
        d_rendered[m] = dv * fg_prob.values[m];
        d_fg[m] = dv * rendered.values[m];
    }
    Ok((
        loss,
        DiceGradients {
            d_pseudo,
            d_rendered,
            d_fg,
        },
    ))
}

/// Loss-only variant of [`dice_loss`] for line searches.
pub fn dice_loss_value(
    pseudo: &ProbMask,
    rendered: &ProbMask,
    fg_prob: &ProbMask,
    epsilon: f64,
) -> Result<f64, RenderError> {
    dice_loss_parts(pseudo, rendered, fg_prob, epsilon).map(|(loss, _, _)| loss)
}

fn dice_loss_parts(
    pseudo: &ProbMask,
    rendered: &ProbMask,
    fg_prob: &ProbMask,
    epsilon: f64,
) -> Result<(f64, f64, f64), RenderError> {
    if !(epsilon > 0.0) {
        return Err(RenderError::NonPositiveEpsilon { epsilon });
    }
    if !pseudo.same_shape(rendered) || !pseudo.same_shape(fg_prob) {
        return Err(RenderError::DimensionMismatch {
            wa: pseudo.width,
            ha: pseudo.height,
            wb: rendered.width,
            hb: rendered.height,
        });
    }
    let mut num = epsilon;
    let mut den = epsilon;
    for m in 0..pseudo.values.len() {
        let v = rendered.values[m] * fg_prob.values[m];
        num += 2.0 * pseudo.values[m] * v;
        den += pseudo.values[m] + v;
    }
    Ok((1.0 - num / den, num, den))
}
