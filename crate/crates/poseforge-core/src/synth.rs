//! Deterministic synthetic scenes and prediction fields: the oracle source
//! for fixtures used in tests and experiments. Everything here is a pure
//! function of its seed — identical seeds reproduce bit-identical fixtures,
//! and each operation draws from its own RNG stream so adding an operation
//! never perturbs existing fixtures.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;
use nalgebra::{Matrix3, Vector3};
#[cfg(not(feature = "std"))]
use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, UnitSphere};

use crate::geometry::{
    project_points, BBox, CameraIntrinsics, GeometryError, KeypointSet2D, KeypointSet3D, Point3,
    Pose, TriMesh,
};
use crate::keypoint::{fps_centroid_seed, fps_sample, KeypointError, PredictionFields};
use crate::pseudolabel::PseudoLabelError;
use crate::render::{hard_silhouette, mask_tight_bbox, ProbMask, RenderError};
use crate::selfsup::SimilarityTransform2D;

/// Number of 3D keypoints sampled per fixture.
pub const DEFAULT_KEYPOINTS: usize = 8;

/// Icosphere refinement level (subdivisions of the icosahedron).
pub const SPHERE_SUBDIVISIONS: usize = 3;

/// Placement retries before generation gives up.
pub const MAX_PLACEMENT_ATTEMPTS: usize = 100;

/// Default per-round corruption levels for the noisy segmenter: a decaying
/// schedule standing in for a model that improves as relabeling proceeds.
pub const DEFAULT_NOISE_SCHEDULE: [f64; 5] = [0.40, 0.30, 0.20, 0.10, 0.02];

// Per-operation RNG stream ids (ChaCha streams of the fixture seed).
const STREAM_POSE: u64 = 0;
const STREAM_SHAPE: u64 = 1;
const STREAM_OFFSETS: u64 = 2;
const STREAM_ATTENTION: u64 = 3;
const STREAM_FG: u64 = 4;

/// Errors from fixture generation.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SynthError {
    #[error("depth range [{z_min}, {z_max}] is empty or not in front of the camera")]
    InvalidDepthRange { z_min: f64, z_max: f64 },
    #[error("object never projected fully inside the frame after {attempts} attempts")]
    GenerationFailure { attempts: usize },
    #[error("noise schedule has {got} levels but {needed} rounds are requested")]
    ScheduleTooShort { needed: usize, got: usize },
    #[error("noise parameter '{which}' = {value} is out of range")]
    InvalidNoise { which: &'static str, value: f64 },
    #[error("fixture inconsistent: {message}")]
    Inconsistent { message: &'static str },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Keypoint(#[from] KeypointError),
    #[error(transparent)]
    Render(#[from] RenderError),
}

/// Object shape family for generated scenes. All three are convex, which
/// keeps silhouette-based refinement experiments well-conditioned.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeKind {
    /// Unit cube (half-extent 0.5).
    Cube,
    /// Icosphere of radius 0.5.
    Icosphere,
    /// Randomly oriented ellipsoid: a seeded anisotropic linear image of the
    /// icosphere, semi-axes in [0.3, 0.6].
    RandomConvex,
}

/// A complete synthetic scene: mesh, ground-truth pose, camera, sampled 3D
/// keypoints with their exact projections, the hard silhouette mask, and
/// its tight bbox.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneFixture {
    pub mesh: TriMesh,
    pub gt_pose: Pose,
    pub cam: CameraIntrinsics,
    pub keypoints3d: KeypointSet3D,
    pub gt_keypoints2d: KeypointSet2D,
    pub gt_hard_mask: ProbMask,
    pub tight_bbox: BBox,
    pub seed: u64,
}

impl SceneFixture {
    /// Re-checks the internal-consistency invariants: keypoint projections
    /// are exact and the bbox is the tight bound of the mask.
    pub fn verify(&self) -> Result<(), SynthError> {
        let reprojected = project_points(&self.gt_pose, &self.keypoints3d, &self.cam)?;
        if reprojected.len() != self.gt_keypoints2d.len()
            || reprojected
                .iter()
                .zip(&self.gt_keypoints2d)
                .any(|(a, b)| a.x != b.x || a.y != b.y)
        {
            return Err(SynthError::Inconsistent {
                message: "stored 2D keypoints differ from the projection of the 3D keypoints",
            });
        }
        match mask_tight_bbox(&self.gt_hard_mask) {
            Some(bbox) if bbox == self.tight_bbox => Ok(()),
            _ => Err(SynthError::Inconsistent {
                message: "stored bbox is not the tight bound of the mask",
            }),
        }
    }

    /// FNV-1a hash of a canonical byte serialization of every field, used
    /// as a golden-file checksum for reproducibility tests.
    pub fn checksum(&self) -> u64 {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"PFX1");
        bytes.extend_from_slice(&self.seed.to_le_bytes());
        for v in [self.cam.fx, self.cam.fy, self.cam.cx, self.cam.cy] {
            bytes.extend_from_slice(&v.to_bits().to_le_bytes());
        }
        bytes.extend_from_slice(&(self.cam.width as u64).to_le_bytes());
        bytes.extend_from_slice(&(self.cam.height as u64).to_le_bytes());
        bytes.extend_from_slice(&(self.mesh.vertices().len() as u64).to_le_bytes());
        for v in self.mesh.vertices() {
            for c in [v.x, v.y, v.z] {
                bytes.extend_from_slice(&c.to_bits().to_le_bytes());
            }
        }
        bytes.extend_from_slice(&(self.mesh.faces().len() as u64).to_le_bytes());
        for f in self.mesh.faces() {
            for &i in f {
                bytes.extend_from_slice(&(i as u64).to_le_bytes());
            }
        }
        let r = self.gt_pose.rotation();
        for row in 0..3 {
            for col in 0..3 {
                bytes.extend_from_slice(&r[(row, col)].to_bits().to_le_bytes());
            }
        }
        for c in [
            self.gt_pose.translation().x,
            self.gt_pose.translation().y,
            self.gt_pose.translation().z,
        ] {
            bytes.extend_from_slice(&c.to_bits().to_le_bytes());
        }
        bytes.extend_from_slice(&(self.keypoints3d.len() as u64).to_le_bytes());
        for k in &self.keypoints3d {
            for c in [k.x, k.y, k.z] {
                bytes.extend_from_slice(&c.to_bits().to_le_bytes());
            }
        }
        for k in &self.gt_keypoints2d {
            for c in [k.x, k.y] {
                bytes.extend_from_slice(&c.to_bits().to_le_bytes());
            }
        }
        for v in [
            self.tight_bbox.x_min(),
            self.tight_bbox.y_min(),
            self.tight_bbox.x_max(),
            self.tight_bbox.y_max(),
        ] {
            bytes.extend_from_slice(&v.to_bits().to_le_bytes());
        }
        bytes.extend_from_slice(&(self.gt_hard_mask.width() as u64).to_le_bytes());
        bytes.extend_from_slice(&(self.gt_hard_mask.height() as u64).to_le_bytes());
        for &v in self.gt_hard_mask.data() {
            bytes.push(if v >= 0.5 { 1 } else { 0 });
        }
        fnv1a64(&bytes)
    }
}

/// 64-bit FNV-1a over a byte slice.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

fn op_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Unit cube mesh with half-extent 0.5, two triangles per face.
pub fn cube_mesh() -> TriMesh {
    let vertices = vec![
        Point3::new(-0.5, -0.5, -0.5),
        Point3::new(0.5, -0.5, -0.5),
        Point3::new(0.5, 0.5, -0.5),
        Point3::new(-0.5, 0.5, -0.5),
        Point3::new(-0.5, -0.5, 0.5),
        Point3::new(0.5, -0.5, 0.5),
        Point3::new(0.5, 0.5, 0.5),
        Point3::new(-0.5, 0.5, 0.5),
    ];
    let faces = vec![
        [0, 2, 1],
        [0, 3, 2],
        [4, 5, 6],
        [4, 6, 7],
        [0, 1, 5],
        [0, 5, 4],
        [1, 2, 6],
        [1, 6, 5],
        [2, 3, 7],
        [2, 7, 6],
        [3, 0, 4],
        [3, 4, 7],
    ];
    TriMesh::new(vertices, faces).expect("static cube mesh is valid")
}

/// Icosphere: `subdivisions` rounds of midpoint subdivision of the
/// icosahedron, every vertex normalized onto the sphere of `radius`.
pub fn icosphere_mesh(subdivisions: usize, radius: f64) -> TriMesh {
    let phi = (1.0 + 5.0f64.sqrt()) / 2.0;
    let mut vertices = vec![
        Point3::new(-1.0, phi, 0.0),
        Point3::new(1.0, phi, 0.0),
        Point3::new(-1.0, -phi, 0.0),
        Point3::new(1.0, -phi, 0.0),
        Point3::new(0.0, -1.0, phi),
        Point3::new(0.0, 1.0, phi),
        Point3::new(0.0, -1.0, -phi),
        Point3::new(0.0, 1.0, -phi),
        Point3::new(phi, 0.0, -1.0),
        Point3::new(phi, 0.0, 1.0),
        Point3::new(-phi, 0.0, -1.0),
        Point3::new(-phi, 0.0, 1.0),
    ];
    let mut faces: Vec<[usize; 3]> = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];
    for v in &mut vertices {
        *v = v.normalize() * radius;
    }
    for _ in 0..subdivisions {
        let mut midpoint_cache: BTreeMap<(usize, usize), usize> = BTreeMap::new();
        let mut midpoint = |a: usize, b: usize, vertices: &mut Vec<Point3>| -> usize {
            let key = if a < b { (a, b) } else { (b, a) };
            *midpoint_cache.entry(key).or_insert_with(|| {
                let m = ((vertices[a] + vertices[b]) / 2.0).normalize() * radius;
                vertices.push(m);
                vertices.len() - 1
            })
        };
        let mut next_faces = Vec::with_capacity(faces.len() * 4);
        for [a, b, c] in faces {
            let ab = midpoint(a, b, &mut vertices);
            let bc = midpoint(b, c, &mut vertices);
            let ca = midpoint(c, a, &mut vertices);
            next_faces.push([a, ab, ca]);
            next_faces.push([b, bc, ab]);
            next_faces.push([c, ca, bc]);
            next_faces.push([ab, bc, ca]);
        }
        faces = next_faces;
    }
    TriMesh::new(vertices, faces).expect("icosphere construction is valid")
}

fn random_rotation(rng: &mut ChaCha8Rng) -> Matrix3<f64> {
    let axis: [f64; 3] = UnitSphere.sample(rng);
    let angle = rng.random_range(0.0..core::f64::consts::PI);
    let omega = Vector3::new(axis[0], axis[1], axis[2]) * angle;
    *Pose::from_axis_angle(&omega, &Vector3::zeros()).rotation()
}

fn shape_mesh(shape: ShapeKind, seed: u64) -> TriMesh {
    match shape {
        ShapeKind::Cube => cube_mesh(),
        ShapeKind::Icosphere => icosphere_mesh(SPHERE_SUBDIVISIONS, 0.5),
        ShapeKind::RandomConvex => {
            let mut rng = op_rng(seed, STREAM_SHAPE);
            let rotation = random_rotation(&mut rng);
            let semi_axes = Vector3::new(
                rng.random_range(0.3..0.6),
                rng.random_range(0.3..0.6),
                rng.random_range(0.3..0.6),
            );
            let sphere = icosphere_mesh(SPHERE_SUBDIVISIONS.saturating_sub(1), 1.0);
            let vertices = sphere
                .vertices()
                .iter()
                .map(|v| rotation * v.component_mul(&semi_axes))
                .collect();
            TriMesh::new(vertices, sphere.faces().to_vec())
                .expect("linear image of the icosphere is valid")
        }
    }
}

/// Generates a seeded, reproducible scene: a shaped mesh posed randomly so
/// that it projects fully inside the frame, with farthest-point-sampled 3D
/// keypoints, their exact projections, the hard silhouette, and its bbox.
///
/// The object center targets the central ±10% of the image so silhouettes
/// stay near the principal axis. Depth is uniform in `depth_range`.
pub fn gen_scene(
    shape: ShapeKind,
    seed: u64,
    cam: &CameraIntrinsics,
    depth_range: (f64, f64),
) -> Result<SceneFixture, SynthError> {
    let (z_min, z_max) = depth_range;
    if !(z_min > 0.0 && z_max >= z_min && z_max.is_finite()) {
        return Err(SynthError::InvalidDepthRange { z_min, z_max });
    }
    let mesh = shape_mesh(shape, seed);
    let seed_index = fps_centroid_seed(mesh.vertices())?;
    let kp_indices = fps_sample(mesh.vertices(), DEFAULT_KEYPOINTS, seed_index)?;
    let keypoints3d: KeypointSet3D = kp_indices.iter().map(|&i| mesh.vertices()[i]).collect();

    let mut rng = op_rng(seed, STREAM_POSE);
    let (w, h) = (cam.width as f64, cam.height as f64);
    for _ in 0..MAX_PLACEMENT_ATTEMPTS {
        let axis: [f64; 3] = UnitSphere.sample(&mut rng);
        let angle = rng.random_range(0.0..core::f64::consts::PI);
        let omega = Vector3::new(axis[0], axis[1], axis[2]) * angle;
        let z = rng.random_range(z_min..=z_max);
        let u = cam.cx + 0.1 * w * rng.random_range(-1.0..1.0);
        let v = cam.cy + 0.1 * h * rng.random_range(-1.0..1.0);
        let t = Vector3::new((u - cam.cx) * z / cam.fx, (v - cam.cy) * z / cam.fy, z);
        let pose = Pose::from_axis_angle(&omega, &t);
        let projected = match project_points(&pose, mesh.vertices(), cam) {
            Ok(p) => p,
            Err(_) => continue, // behind camera or off-frustum: redraw
        };
        let inside = projected
            .iter()
            .all(|p| p.x >= 1.0 && p.x <= w - 1.0 && p.y >= 1.0 && p.y <= h - 1.0);
        if !inside {
            continue;
        }
        let mask = hard_silhouette(&pose, &mesh, cam)?;
        let Some(tight_bbox) = mask_tight_bbox(&mask) else {
            continue;
        };
        if mask.count_at_least(0.5) < 32 {
            continue;
        }
        let gt_keypoints2d = project_points(&pose, &keypoints3d, cam)?;
        let fixture = SceneFixture {
            mesh,
            gt_pose: pose,
            cam: *cam,
            keypoints3d,
            gt_keypoints2d,
            gt_hard_mask: mask,
            tight_bbox,
            seed,
        };
        fixture.verify()?;
        return Ok(fixture);
    }
    Err(SynthError::GenerationFailure {
        attempts: MAX_PLACEMENT_ATTEMPTS,
    })
}

/// Noise levels for synthesized prediction fields.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseParams {
    /// Per-component Gaussian noise on the keypoint offsets, in pixels.
    pub offset_sigma: f64,
    /// Gaussian noise on the attention logits.
    pub attention_sigma: f64,
    /// Per-pixel Bernoulli flip rate on the foreground mask.
    pub fg_flip_rate: f64,
}

impl NoiseParams {
    pub fn new(
        offset_sigma: f64,
        attention_sigma: f64,
        fg_flip_rate: f64,
    ) -> Result<Self, SynthError> {
        if !(offset_sigma >= 0.0 && offset_sigma.is_finite()) {
            return Err(SynthError::InvalidNoise {
                which: "offset_sigma",
                value: offset_sigma,
            });
        }
        if !(attention_sigma >= 0.0 && attention_sigma.is_finite()) {
            return Err(SynthError::InvalidNoise {
                which: "attention_sigma",
                value: attention_sigma,
            });
        }
        if !(0.0..=1.0).contains(&fg_flip_rate) {
            return Err(SynthError::InvalidNoise {
                which: "fg_flip_rate",
                value: fg_flip_rate,
            });
        }
        Ok(NoiseParams {
            offset_sigma,
            attention_sigma,
            fg_flip_rate,
        })
    }

    /// Exact fields: zero noise everywhere.
    pub fn zero() -> Self {
        NoiseParams {
            offset_sigma: 0.0,
            attention_sigma: 0.0,
            fg_flip_rate: 0.0,
        }
    }
}

/// Separable 3×3 binomial blur (`[0.25, 0.5, 0.25]` per axis, zero padding).
fn blur3(values: &[f64], width: usize, height: usize) -> Vec<f64> {
    let fetch = |buf: &[f64], row: i64, col: i64| -> f64 {
        if row < 0 || col < 0 || row >= height as i64 || col >= width as i64 {
            0.0
        } else {
            buf[row as usize * width + col as usize]
        }
    };
    let mut horizontal = vec![0.0; values.len()];
    for row in 0..height as i64 {
        for col in 0..width as i64 {
            horizontal[row as usize * width + col as usize] = 0.25
                * fetch(values, row, col - 1)
                + 0.5 * fetch(values, row, col)
                + 0.25 * fetch(values, row, col + 1);
        }
    }
    let mut out = vec![0.0; values.len()];
    for row in 0..height as i64 {
        for col in 0..width as i64 {
            out[row as usize * width + col as usize] = 0.25
                * fetch(&horizontal, row - 1, col)
                + 0.5 * fetch(&horizontal, row, col)
                + 0.25 * fetch(&horizontal, row + 1, col);
        }
    }
    out
}

/// Synthesizes dense prediction fields for a fixture.
///
/// Offsets point from every pixel center to each ground-truth keypoint plus
/// `N(0, offset_sigma²)` per component. Attention logits are wide Gaussian
/// bumps centered on each keypoint (width = the bbox's longest side, so
/// aggregation weights stay near-uniform over the object) plus
/// `N(0, attention_sigma²)`. The foreground probability is the hard mask
/// with seeded label flips at `fg_flip_rate`, then a radius-1 binomial blur.
pub fn gen_prediction_fields(
    fixture: &SceneFixture,
    noise: &NoiseParams,
) -> Result<PredictionFields, SynthError> {
    NoiseParams::new(noise.offset_sigma, noise.attention_sigma, noise.fg_flip_rate)?;
    let (w, h) = (fixture.cam.width, fixture.cam.height);
    let n = fixture.gt_keypoints2d.len();
    let peak_width = fixture.tight_bbox.longest_side();

    let mut offset_rng = op_rng(fixture.seed, STREAM_OFFSETS);
    let mut offsets = Vec::with_capacity(n * w * h * 2);
    for k in &fixture.gt_keypoints2d {
        for row in 0..h {
            for col in 0..w {
                let p = crate::keypoint::pixel_center(col, row);
                let nx: f64 = StandardNormal.sample(&mut offset_rng);
                let ny: f64 = StandardNormal.sample(&mut offset_rng);
                offsets.push(k.x - p.x + noise.offset_sigma * nx);
                offsets.push(k.y - p.y + noise.offset_sigma * ny);
            }
        }
    }

    let mut attention_rng = op_rng(fixture.seed, STREAM_ATTENTION);
    let mut attention = Vec::with_capacity(n * w * h);
    for k in &fixture.gt_keypoints2d {
        for row in 0..h {
            for col in 0..w {
                let p = crate::keypoint::pixel_center(col, row);
                let d2 = (p - k).norm_squared();
                let noise_term: f64 = StandardNormal.sample(&mut attention_rng);
                attention.push(-d2 / (2.0 * peak_width * peak_width)
                    + noise.attention_sigma * noise_term);
            }
        }
    }

    let mut fg_rng = op_rng(fixture.seed, STREAM_FG);
    let flipped: Vec<f64> = fixture
        .gt_hard_mask
        .data()
        .iter()
        .map(|&v| {
            if fg_rng.random::<f64>() < noise.fg_flip_rate {
                1.0 - v
            } else {
                v
            }
        })
        .collect();
    let fg_prob = blur3(&flipped, w, h);

    Ok(PredictionFields::new(w, h, n, offsets, attention, fg_prob)?)
}

/// Builds a deterministic probability-map provider for the relabeling
/// harness: round `r` returns the ground-truth mask warped into the query
/// transform's frame, then corrupted by per-pixel value flips at rate
/// `schedule[r]`. Pure in (fixture seed, round, image index, transform).
///
/// `rounds` is validated against the schedule length up front; queries past
/// the schedule reuse its last level.
pub fn gen_noisy_segmenter(
    fixture: &SceneFixture,
    schedule: &[f64],
    rounds: usize,
) -> Result<
    impl Fn(usize, usize, &SimilarityTransform2D) -> Result<ProbMask, PseudoLabelError>,
    SynthError,
> {
    if schedule.len() < rounds {
        return Err(SynthError::ScheduleTooShort {
            needed: rounds,
            got: schedule.len(),
        });
    }
    if let Some(&bad) = schedule.iter().find(|l| !(0.0..=1.0).contains(*l)) {
        return Err(SynthError::InvalidNoise {
            which: "schedule",
            value: bad,
        });
    }
    let truth = fixture.gt_hard_mask.clone();
    let seed = fixture.seed;
    let schedule: Vec<f64> = schedule.to_vec();
    let (w, h) = (truth.width() as f64, truth.height() as f64);
    Ok(move |round: usize, index: usize, transform: &SimilarityTransform2D| {
        let level = schedule[round.min(schedule.len() - 1)];
        // The map frame's extent is the transform of the reference frame.
        let corners = [
            transform.apply(&crate::geometry::Point2::new(0.0, 0.0)),
            transform.apply(&crate::geometry::Point2::new(w, 0.0)),
            transform.apply(&crate::geometry::Point2::new(0.0, h)),
            transform.apply(&crate::geometry::Point2::new(w, h)),
        ];
        let (mut x_min, mut x_max, mut y_min, mut y_max) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
        for c in &corners {
            x_min = x_min.min(c.x);
            x_max = x_max.max(c.x);
            y_min = y_min.min(c.y);
            y_max = y_max.max(c.y);
        }
        let out_w = ((x_max - x_min).round() as usize).max(1);
        let out_h = ((y_max - y_min).round() as usize).max(1);
        let warped = transform.apply_to_mask(&truth, out_w, out_h);
        // One stream per (round, image, transform) so every query is an
        // independent, reproducible draw.
        let mut key = Vec::with_capacity(64);
        key.extend_from_slice(&(round as u64).to_le_bytes());
        key.extend_from_slice(&(index as u64).to_le_bytes());
        key.extend_from_slice(&transform.scale().to_bits().to_le_bytes());
        key.extend_from_slice(&transform.rotation().to_bits().to_le_bytes());
        key.push(transform.flip() as u8);
        key.extend_from_slice(&transform.offset().x.to_bits().to_le_bytes());
        key.extend_from_slice(&transform.offset().y.to_bits().to_le_bytes());
        let mut rng = op_rng(seed, fnv1a64(&key));
        let values: Vec<f64> = warped
            .data()
            .iter()
            .map(|&v| {
                if rng.random::<f64>() < level {
                    1.0 - v
                } else {
                    v
                }
            })
            .collect();
        Ok(ProbMask::new(out_w, out_h, values)?)
    })
}
