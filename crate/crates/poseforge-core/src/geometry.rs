//! Rigid-body poses, pinhole cameras, triangle meshes, keypoint sets, and
//! perspective projection with its analytic Jacobian.
//!
//! Conventions used throughout the crate:
//!
//! - Pixel `(row i, col j)` has its center at continuous image coordinates
//!   `(j + 0.5, i + 0.5)`; image coordinates are `(x, y)` = `(col, row)`.
//! - Bounding boxes are half-open: `[x_min, x_max) × [y_min, y_max)`.
//! - Poses map model-frame points into the camera frame: `q = R·p + t`,
//!   camera looking down `+z`.
//! - For optimization a pose is charted as six reals: axis-angle rotation
//!   (3) followed by translation (3).

use alloc::{format, string::String, vec::Vec};
use nalgebra::{Matrix2x3, Matrix2x6, Matrix3, Rotation3, Vector2, Vector3};
#[cfg(not(feature = "std"))]
use num_traits::Float;

/// 2D point or vector in pixel coordinates.
pub type Point2 = Vector2<f64>;
/// 3D point or vector in scene units.
pub type Point3 = Vector3<f64>;

/// Ordered 2D keypoints in pixels. Index `n` corresponds to index `n` of the
/// matching [`KeypointSet3D`]; every operation preserves this ordering.
pub type KeypointSet2D = Vec<Point2>;
/// Ordered 3D keypoints in the model frame (see [`KeypointSet2D`]).
pub type KeypointSet3D = Vec<Point3>;

/// Points with camera-frame depth at or below this value are rejected by
/// projection to avoid the near-plane singularity.
pub const Z_NEAR: f64 = 1e-4;

/// Twice-area threshold below which a triangle counts as degenerate.
pub const DEGENERATE_FACE_TOL: f64 = 1e-12;

/// Errors from geometric types and projection.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GeometryError {
    /// A point's camera-frame depth fell at or below [`Z_NEAR`].
    #[error("point {index} is behind the camera (z = {z:.6e})")]
    PointBehindCamera { index: usize, z: f64 },
    /// A mesh/record text line could not be parsed (1-based line number).
    #[error("parse error at line {line}: {message}")]
    ParseError { line: usize, message: String },
    /// A mesh face has (twice-)area at or below [`DEGENERATE_FACE_TOL`].
    #[error("face {index} is degenerate (twice-area {twice_area:.3e})")]
    DegenerateFace { index: usize, twice_area: f64 },
    /// A face references a vertex index outside the vertex list. `index` is
    /// the offending raw index as written (1-based for OBJ input).
    #[error("face {face} references out-of-range vertex index {index}")]
    IndexOutOfRange { face: usize, index: i64 },
    /// Matrix supplied as a rotation is not orthonormal with determinant +1.
    #[error("matrix is not a rotation (orthonormality/determinant off by more than {tol:.1e})")]
    NotARotation { tol: f64 },
    /// Focal lengths must be positive and image dimensions at least 1.
    #[error("invalid camera intrinsics: {message}")]
    InvalidIntrinsics { message: String },
    /// Bounding box max must strictly exceed min on both axes.
    #[error("invalid bbox: ({x_min}, {y_min}, {x_max}, {y_max})")]
    InvalidBBox {
        x_min: f64,
        y_min: f64,
        x_max: f64,
        y_max: f64,
    },
}

/// Pinhole camera: projects camera-frame `(X, Y, Z)` to pixel
/// `(fx·X/Z + cx, fy·Y/Z + cy)`. No distortion model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics {
    /// Focal length in pixels along x.
    pub fx: f64,
    /// Focal length in pixels along y.
    pub fy: f64,
    /// Principal point x in pixels.
    pub cx: f64,
    /// Principal point y in pixels.
    pub cy: f64,
    /// Image width in pixels.
    pub width: usize,
    /// Image height in pixels.
    pub height: usize,
}

impl CameraIntrinsics {
    /// Validates `fx, fy > 0` and `width, height ≥ 1`.
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
    ) -> Result<Self, GeometryError> {
        if !(fx > 0.0 && fy > 0.0 && fx.is_finite() && fy.is_finite()) {
            return Err(GeometryError::InvalidIntrinsics {
                message: format!("focal lengths must be positive and finite, got ({fx}, {fy})"),
            });
        }
        if !(cx.is_finite() && cy.is_finite()) {
            return Err(GeometryError::InvalidIntrinsics {
                message: format!("principal point must be finite, got ({cx}, {cy})"),
            });
        }
        if width == 0 || height == 0 {
            return Err(GeometryError::InvalidIntrinsics {
                message: format!("image dimensions must be at least 1, got {width}x{height}"),
            });
        }
        Ok(Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        })
    }

    /// Projects a single camera-frame point; `Err` if `z ≤ Z_NEAR`.
    /// `index` is only used to label the error.
    pub fn project_camera_point(&self, q: &Point3, index: usize) -> Result<Point2, GeometryError> {
        if q.z <= Z_NEAR {
            return Err(GeometryError::PointBehindCamera { index, z: q.z });
        }
        Ok(Point2::new(
            self.fx * q.x / q.z + self.cx,
            self.fy * q.y / q.z + self.cy,
        ))
    }
}

/// Rigid transform: orthonormal rotation plus translation, mapping model
/// coordinates into the camera frame.
///
/// The rotation is stored in canonical matrix form; the equivalent
/// axis-angle vector (used as the optimization chart) is available via
/// [`Pose::axis_angle`] and round-trips through [`Pose::from_axis_angle`]
/// to better than 1e-9 for angles in `(0, π)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

/// Tolerance used by [`Pose::new`] for orthonormality and determinant.
pub const ROTATION_TOL: f64 = 1e-9;

impl Pose {
    /// Builds a pose from a rotation matrix and translation, rejecting
    /// matrices that are not orthonormal with determinant +1 within
    /// [`ROTATION_TOL`].
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self, GeometryError> {
        let err = (rotation.transpose() * rotation - Matrix3::identity()).abs().max();
        let det_err = (rotation.determinant() - 1.0).abs();
        if err > ROTATION_TOL || det_err > ROTATION_TOL {
            return Err(GeometryError::NotARotation { tol: ROTATION_TOL });
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    /// Identity rotation, zero translation.
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Builds a pose from an axis-angle vector (direction = axis, norm =
    /// angle in radians) and a translation.
    pub fn from_axis_angle(omega: &Vector3<f64>, translation: &Vector3<f64>) -> Self {
        Self {
            rotation: Rotation3::from_scaled_axis(*omega).into_inner(),
            translation: *translation,
        }
    }

    /// Builds a pose from the six-real optimization chart
    /// `[ω₁, ω₂, ω₃, t₁, t₂, t₃]`.
    pub fn from_params(params: &[f64; 6]) -> Self {
        Self::from_axis_angle(
            &Vector3::new(params[0], params[1], params[2]),
            &Vector3::new(params[3], params[4], params[5]),
        )
    }

    /// The six-real optimization chart `[ω, t]` of this pose.
    pub fn params(&self) -> [f64; 6] {
        let omega = self.axis_angle();
        [
            omega.x,
            omega.y,
            omega.z,
            self.translation.x,
            self.translation.y,
            self.translation.z,
        ]
    }

    /// Rotation in canonical matrix form.
    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    /// Translation in scene units.
    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    /// Axis-angle vector equivalent to the stored rotation matrix.
    ///
    /// Handles the θ → 0 and θ → π branches explicitly (with the trace
    /// clamped into [-1, 1]) so that numerically perfect rotations never
    /// produce NaN and the matrix round-trip stays below 1e-9 across
    /// (0, π).
    pub fn axis_angle(&self) -> Vector3<f64> {
        let r = &self.rotation;
        let cos_theta = ((r.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
        let theta = cos_theta.acos();
        // v = 2·sin(θ)·axis, assembled from the skew part of R.
        let v = Vector3::new(
            r[(2, 1)] - r[(1, 2)],
            r[(0, 2)] - r[(2, 0)],
            r[(1, 0)] - r[(0, 1)],
        );
        if theta < 1e-7 {
            // R ≈ I + [ω]×, so ω ≈ v/2 with O(θ³) error.
            return v * 0.5;
        }
        if core::f64::consts::PI - theta < 1e-7 {
            // sin(θ) ≈ 0 makes v useless; recover the axis from the
            // symmetric part instead: (R + I)/2 ≈ axis·axisᵀ near π.
            let s = (r + Matrix3::identity()) * 0.5;
            let col = (0..3)
                .max_by(|&a, &b| s[(a, a)].partial_cmp(&s[(b, b)]).unwrap())
                .unwrap();
            let mut axis = Vector3::new(s[(0, col)], s[(1, col)], s[(2, col)]);
            axis /= axis.norm();
            // Pick the sign consistent with the (tiny) skew part when
            // available; at exactly π the sign is arbitrary.
            if v.dot(&axis) < 0.0 {
                axis = -axis;
            }
            return axis * theta;
        }
        v * (theta / (2.0 * theta.sin()))
    }

    /// Applies the transform: `R·p + t`.
    pub fn transform(&self, p: &Point3) -> Point3 {
        self.rotation * p + self.translation
    }

    /// Composition `self ∘ other`: applying the result equals applying
    /// `other` first, then `self`.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    /// Inverse transform.
    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// Geodesic rotation distance to `other` in radians.
    pub fn geodesic_to(&self, other: &Pose) -> f64 {
        rotation_geodesic(&self.rotation, &other.rotation)
    }
}

/// Angle of the relative rotation `Raᵀ·Rb` — the geodesic metric on SO(3).
pub fn rotation_geodesic(ra: &Matrix3<f64>, rb: &Matrix3<f64>) -> f64 {
    let trace = (ra.transpose() * rb).trace();
    ((trace - 1.0) / 2.0).clamp(-1.0, 1.0).acos()
}

/// Skew-symmetric cross-product matrix: `skew(v)·w = v × w`.
pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Right Jacobian of the SO(3) exponential map at `omega`:
/// `exp((ω+δ)∧) ≈ exp(ω∧)·exp((Jr(ω)·δ)∧)` for small `δ`.
///
/// Used to differentiate rotated points with respect to the axis-angle
/// chart. Falls back to the second-order Taylor expansion near θ = 0.
pub fn so3_right_jacobian(omega: &Vector3<f64>) -> Matrix3<f64> {
    let theta_sq = omega.norm_squared();
    let w = skew(omega);
    if theta_sq < 1e-14 {
        Matrix3::identity() - 0.5 * w + (w * w) / 6.0
    } else {
        let theta = theta_sq.sqrt();
        Matrix3::identity() - ((1.0 - theta.cos()) / theta_sq) * w
            + ((theta - theta.sin()) / (theta_sq * theta)) * (w * w)
    }
}

/// Projects model-frame points through `pose` and `cam`.
///
/// Output order matches input order. Fails with
/// [`GeometryError::PointBehindCamera`] if any transformed point has
/// `z ≤ Z_NEAR`.
pub fn project_points(
    pose: &Pose,
    points: &[Point3],
    cam: &CameraIntrinsics,
) -> Result<KeypointSet2D, GeometryError> {
    points
        .iter()
        .enumerate()
        .map(|(i, p)| cam.project_camera_point(&pose.transform(p), i))
        .collect()
}

/// Per-point 2×6 Jacobian of the projected pixel w.r.t. the pose chart
/// `[ω, t]`, evaluated with the pose's own axis-angle vector as the chart
/// center (the same global chart used by [`Pose::params`], so central
/// finite differences over `params` reproduce these blocks).
///
/// Columns 0–2 differentiate w.r.t. axis-angle, columns 3–5 w.r.t.
/// translation.
pub fn project_jacobian(
    pose: &Pose,
    points: &[Point3],
    cam: &CameraIntrinsics,
) -> Result<Vec<Matrix2x6<f64>>, GeometryError> {
    let omega = pose.axis_angle();
    let jr = so3_right_jacobian(&omega);
    let r = pose.rotation();
    points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let q = pose.transform(p);
            if q.z <= Z_NEAR {
                return Err(GeometryError::PointBehindCamera { index: i, z: q.z });
            }
            // d(R(ω)p + t)/dω = −R·[p]×·Jr(ω); d/dt = I.
            let d_cam_d_omega = -(r * skew(p)) * jr;
            let z_inv = 1.0 / q.z;
            let pinhole = Matrix2x3::new(
                cam.fx * z_inv,
                0.0,
                -cam.fx * q.x * z_inv * z_inv,
                0.0,
                cam.fy * z_inv,
                -cam.fy * q.y * z_inv * z_inv,
            );
            let mut j = Matrix2x6::zeros();
            j.fixed_view_mut::<2, 3>(0, 0)
                .copy_from(&(pinhole * d_cam_d_omega));
            j.fixed_view_mut::<2, 3>(0, 3).copy_from(&pinhole);
            Ok(j)
        })
        .collect()
}

/// Triangle mesh in the model frame.
///
/// Construction validates that all face indices are in range and that no
/// face is degenerate (twice-area ≤ [`DEGENERATE_FACE_TOL`]).
#[derive(Debug, Clone, PartialEq)]
pub struct TriMesh {
    vertices: Vec<Point3>,
    faces: Vec<[usize; 3]>,
}

impl TriMesh {
    /// Validates and builds a mesh.
    pub fn new(vertices: Vec<Point3>, faces: Vec<[usize; 3]>) -> Result<Self, GeometryError> {
        for (fi, face) in faces.iter().enumerate() {
            for &vi in face {
                if vi >= vertices.len() {
                    return Err(GeometryError::IndexOutOfRange {
                        face: fi,
                        index: vi as i64,
                    });
                }
            }
            let [a, b, c] = [vertices[face[0]], vertices[face[1]], vertices[face[2]]];
            let twice_area = (b - a).cross(&(c - a)).norm();
            if twice_area <= DEGENERATE_FACE_TOL {
                return Err(GeometryError::DegenerateFace {
                    index: fi,
                    twice_area,
                });
            }
        }
        Ok(Self { vertices, faces })
    }

    pub fn vertices(&self) -> &[Point3] {
        &self.vertices
    }

    pub fn faces(&self) -> &[[usize; 3]] {
        &self.faces
    }

    /// Applies a rigid transform to every vertex (faces unchanged).
    pub fn transformed(&self, pose: &Pose) -> TriMesh {
        TriMesh {
            vertices: self.vertices.iter().map(|v| pose.transform(v)).collect(),
            faces: self.faces.clone(),
        }
    }
}

/// Parses the OBJ subset used for model meshes: `v x y z` vertex lines and
/// triangular `f` face lines (1-based indices; `i/t/n` attribute suffixes
/// accepted and ignored). All other line types are skipped. Quads and
/// higher polygons are rejected rather than triangulated.
pub fn parse_obj(text: &str) -> Result<TriMesh, GeometryError> {
    let mut vertices: Vec<Point3> = Vec::new();
    let mut faces: Vec<[usize; 3]> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        let mut tokens = line.split_whitespace();
        match tokens.next() {
            Some("v") => {
                let mut coords = [0.0f64; 3];
                for coord in coords.iter_mut() {
                    let tok = tokens.next().ok_or(GeometryError::ParseError {
                        line: line_no,
                        message: String::from("vertex line needs 3 coordinates"),
                    })?;
                    *coord = tok.parse().map_err(|_| GeometryError::ParseError {
                        line: line_no,
                        message: format!("bad vertex coordinate `{tok}`"),
                    })?;
                }
                // Extra fields (w component, vertex colors) are ignored.
                vertices.push(Point3::new(coords[0], coords[1], coords[2]));
            }
            Some("f") => {
                let idx_tokens: Vec<&str> = tokens.collect();
                if idx_tokens.len() != 3 {
                    return Err(GeometryError::ParseError {
                        line: line_no,
                        message: format!(
                            "only triangular faces are supported, got {} indices",
                            idx_tokens.len()
                        ),
                    });
                }
                let mut face = [0usize; 3];
                for (slot, tok) in face.iter_mut().zip(&idx_tokens) {
                    let head = tok.split('/').next().unwrap_or("");
                    let raw_idx: i64 = head.parse().map_err(|_| GeometryError::ParseError {
                        line: line_no,
                        message: format!("bad face index `{tok}`"),
                    })?;
                    if raw_idx < 1 {
                        return Err(GeometryError::IndexOutOfRange {
                            face: faces.len(),
                            index: raw_idx,
                        });
                    }
                    *slot = (raw_idx - 1) as usize;
                }
                faces.push(face);
            }
            _ => {} // comments, normals, texcoords, groups, empty lines
        }
    }
    TriMesh::new(vertices, faces)
}

/// Axis-aligned bounding box in pixels, half-open:
/// `[x_min, x_max) × [y_min, y_max)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    x_min: f64,
    y_min: f64,
    x_max: f64,
    y_max: f64,
}

impl BBox {
    /// Validates `x_max > x_min` and `y_max > y_min`.
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self, GeometryError> {
        let all_finite =
            x_min.is_finite() && y_min.is_finite() && x_max.is_finite() && y_max.is_finite();
        if !all_finite || x_max <= x_min || y_max <= y_min {
            return Err(GeometryError::InvalidBBox {
                x_min,
                y_min,
                x_max,
                y_max,
            });
        }
        Ok(Self {
            x_min,
            y_min,
            x_max,
            y_max,
        })
    }

    pub fn x_min(&self) -> f64 {
        self.x_min
    }

    pub fn y_min(&self) -> f64 {
        self.y_min
    }

    pub fn x_max(&self) -> f64 {
        self.x_max
    }

    pub fn y_max(&self) -> f64 {
        self.y_max
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    /// Length of the longest side — the object scale `S` used to normalize
    /// keypoint residuals.
    pub fn longest_side(&self) -> f64 {
        self.width().max(self.height())
    }

    pub fn center(&self) -> Point2 {
        Point2::new(
            0.5 * (self.x_min + self.x_max),
            0.5 * (self.y_min + self.y_max),
        )
    }

    /// Half-open membership test.
    pub fn contains(&self, p: &Point2) -> bool {
        p.x >= self.x_min && p.x < self.x_max && p.y >= self.y_min && p.y < self.y_max
    }

    /// Whether `other` lies entirely within `self` (closed comparison on
    /// the shared half-open bounds).
    pub fn contains_box(&self, other: &BBox) -> bool {
        other.x_min >= self.x_min
            && other.y_min >= self.y_min
            && other.x_max <= self.x_max
            && other.y_max <= self.y_max
    }

    /// Intersects with the image rectangle `[0, width) × [0, height)`,
    /// failing if the intersection is empty.
    pub fn clamp_to_image(&self, width: usize, height: usize) -> Result<BBox, GeometryError> {
        BBox::new(
            self.x_min.max(0.0),
            self.y_min.max(0.0),
            self.x_max.min(width as f64),
            self.y_max.min(height as f64),
        )
    }
}
