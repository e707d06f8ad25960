//! On-disk formats: binary PGM images, CSV tables, minimal SVG line plots,
//! OBJ meshes, JSON pose records, and a little binary tensor container.
//! All writers are deterministic: same data, same bytes.

use std::fs;
use std::path::Path;

use nalgebra::Matrix3;
use poseforge_core::geometry::{Point3, Pose, TriMesh};
use poseforge_core::pseudolabel::{PseudoLabel, PseudoLabelMap};
use poseforge_core::render::ProbMask;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// Pixel values used when serializing trinary label maps as 8-bit PGM.
pub const PGM_BACKGROUND: u8 = 0;
pub const PGM_UNCERTAIN: u8 = 128;
pub const PGM_FOREGROUND: u8 = 255;

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

/// Writes a probability mask as binary 8-bit PGM (values scaled to 0..=255).
pub fn write_pgm_mask(path: &Path, mask: &ProbMask) -> Result<(), CliError> {
    let mut bytes = format!("P5\n{} {}\n255\n", mask.width(), mask.height()).into_bytes();
    bytes.extend(mask.data().iter().map(|&v| (v * 255.0).round() as u8));
    write_file(path, &bytes)
}

/// Writes a trinary label map as binary PGM with values {0, 128, 255}.
pub fn write_pgm_labels(path: &Path, labels: &PseudoLabelMap) -> Result<(), CliError> {
    let mut bytes = format!("P5\n{} {}\n255\n", labels.width(), labels.height()).into_bytes();
    bytes.extend(labels.data().iter().map(|&l| match l {
        PseudoLabel::Background => PGM_BACKGROUND,
        PseudoLabel::Uncertain => PGM_UNCERTAIN,
        PseudoLabel::Foreground => PGM_FOREGROUND,
    }));
    write_file(path, &bytes)
}

/// Reads a binary 8-bit PGM into a probability mask (values / 255).
pub fn read_pgm_mask(path: &Path) -> Result<ProbMask, CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    let bad = |msg: &str| CliError::InvalidInput(format!("{}: {msg}", path.display()));
    // Header: "P5" then three whitespace-separated integers, then one
    // whitespace byte, then the raster.
    if !bytes.starts_with(b"P5") {
        return Err(bad("not a binary PGM (missing P5 magic)"));
    }
    let mut cursor = 2usize;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        while cursor < bytes.len() && bytes[cursor].is_ascii_whitespace() {
            cursor += 1;
        }
        let start = cursor;
        while cursor < bytes.len() && bytes[cursor].is_ascii_digit() {
            cursor += 1;
        }
        if start == cursor {
            return Err(bad("malformed PGM header"));
        }
        *field = std::str::from_utf8(&bytes[start..cursor])
            .map_err(|_| bad("malformed PGM header"))?
            .parse()
            .map_err(|_| bad("malformed PGM header"))?;
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(bad("only maxval 255 is supported"));
    }
    cursor += 1; // single whitespace byte before the raster
    let expected = width * height;
    if bytes.len() < cursor + expected {
        return Err(bad("truncated PGM raster"));
    }
    let values = bytes[cursor..cursor + expected]
        .iter()
        .map(|&b| b as f64 / 255.0)
        .collect();
    ProbMask::new(width, height, values).map_err(|e| CliError::module("render", "read_pgm", e))
}

/// Reads a trinary label PGM written by [`write_pgm_labels`].
pub fn read_pgm_labels(path: &Path) -> Result<PseudoLabelMap, CliError> {
    let mask = read_pgm_mask(path)?;
    let labels = mask
        .data()
        .iter()
        .map(|&v| {
            let byte = (v * 255.0).round() as u8;
            match byte {
                PGM_BACKGROUND => Ok(PseudoLabel::Background),
                PGM_UNCERTAIN => Ok(PseudoLabel::Uncertain),
                PGM_FOREGROUND => Ok(PseudoLabel::Foreground),
                other => Err(CliError::InvalidInput(format!(
                    "{}: pixel value {other} is not a label",
                    path.display()
                ))),
            }
        })
        .collect::<Result<Vec<_>, _>>()?;
    PseudoLabelMap::new(mask.width(), mask.height(), labels)
        .map_err(|e| CliError::module("pseudolabel", "read_pgm_labels", e))
}

/// Writes rows as CSV: header line, then one line per row, fields joined by
/// commas. Floats use Rust's shortest round-trip formatting.
pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<(), CliError> {
    let mut out = String::new();
    out.push_str(&header.join(","));
    out.push('\n');
    for row in rows {
        out.push_str(&row.join(","));
        out.push('\n');
    }
    write_file(path, out.as_bytes())
}

/// Writes a value as pretty JSON plus trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_file(path, text.as_bytes())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_slice(&bytes)
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

/// Minimal SVG polyline plot of (x, y) samples, y-axis inverted so lower
/// loss plots lower. No timestamps or external references.
pub fn write_svg_polyline(
    path: &Path,
    title: &str,
    samples: &[(f64, f64)],
) -> Result<(), CliError> {
    let (w, h, margin) = (640.0, 360.0, 40.0);
    let (x_min, x_max) = samples
        .iter()
        .fold((f64::MAX, f64::MIN), |(lo, hi), s| (lo.min(s.0), hi.max(s.0)));
    let (y_min, y_max) = samples
        .iter()
        .fold((f64::MAX, f64::MIN), |(lo, hi), s| (lo.min(s.1), hi.max(s.1)));
    let x_span = (x_max - x_min).max(1e-12);
    let y_span = (y_max - y_min).max(1e-12);
    let mut points = String::new();
    for (x, y) in samples {
        let px = margin + (x - x_min) / x_span * (w - 2.0 * margin);
        let py = h - margin - (y - y_min) / y_span * (h - 2.0 * margin);
        points.push_str(&format!("{px:.2},{py:.2} "));
    }
    let svg = format!(
        concat!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {w} {h}\">\n",
            "<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n",
            "<text x=\"{tx}\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">{title}</text>\n",
            "<line x1=\"{m}\" y1=\"{ym}\" x2=\"{xm}\" y2=\"{ym}\" stroke=\"black\"/>\n",
            "<line x1=\"{m}\" y1=\"{m}\" x2=\"{m}\" y2=\"{ym}\" stroke=\"black\"/>\n",
            "<polyline fill=\"none\" stroke=\"steelblue\" stroke-width=\"1.5\" points=\"{points}\"/>\n",
            "</svg>\n"
        ),
        w = w,
        h = h,
        tx = w / 2.0,
        title = title,
        m = margin,
        ym = h - margin,
        xm = w - margin,
        points = points.trim_end(),
    );
    write_file(path, svg.as_bytes())
}

/// Writes a mesh as Wavefront OBJ (1-based face indices).
pub fn write_obj(path: &Path, mesh: &TriMesh) -> Result<(), CliError> {
    let mut out = String::new();
    for v in mesh.vertices() {
        out.push_str(&format!("v {} {} {}\n", v.x, v.y, v.z));
    }
    for f in mesh.faces() {
        out.push_str(&format!("f {} {} {}\n", f[0] + 1, f[1] + 1, f[2] + 1));
    }
    write_file(path, out.as_bytes())
}

pub fn read_obj(path: &Path) -> Result<TriMesh, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    poseforge_core::geometry::parse_obj(&text).map_err(|e| CliError::module("geometry", "parse_obj", e))
}

/// JSON form of a pose: row-major rotation, its axis-angle vector, and the
/// translation. Floats round-trip exactly through JSON.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PoseJson {
    pub rotation: [f64; 9],
    pub axis_angle: [f64; 3],
    pub translation: [f64; 3],
}

impl PoseJson {
    pub fn from_pose(pose: &Pose) -> Self {
        let r = pose.rotation();
        let aa = pose.axis_angle();
        let t = pose.translation();
        PoseJson {
            rotation: [
                r[(0, 0)],
                r[(0, 1)],
                r[(0, 2)],
                r[(1, 0)],
                r[(1, 1)],
                r[(1, 2)],
                r[(2, 0)],
                r[(2, 1)],
                r[(2, 2)],
            ],
            axis_angle: [aa.x, aa.y, aa.z],
            translation: [t.x, t.y, t.z],
        }
    }

    pub fn to_pose(&self) -> Result<Pose, CliError> {
        let rotation = Matrix3::from_row_slice(&self.rotation);
        let translation = nalgebra::Vector3::new(
            self.translation[0],
            self.translation[1],
            self.translation[2],
        );
        Pose::new(rotation, translation).map_err(|e| CliError::module("geometry", "pose_from_json", e))
    }
}

/// One named tensor in the container: row-major f64 data with its shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

const TENSOR_MAGIC: &[u8; 4] = b"PFTC";
const TENSOR_VERSION: u32 = 1;

/// Writes tensors to the binary container: magic, version, count, then per
/// tensor a length-prefixed UTF-8 name, dims, and little-endian f64 data.
pub fn write_tensors(path: &Path, tensors: &[Tensor]) -> Result<(), CliError> {
    let mut out: Vec<u8> = Vec::new();
    out.extend_from_slice(TENSOR_MAGIC);
    out.extend_from_slice(&TENSOR_VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in tensors {
        let expected: usize = t.dims.iter().product();
        if expected != t.data.len() {
            return Err(CliError::InvalidInput(format!(
                "tensor '{}' has {} values but dims imply {expected}",
                t.name,
                t.data.len()
            )));
        }
        out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
        out.extend_from_slice(t.name.as_bytes());
        out.extend_from_slice(&(t.dims.len() as u32).to_le_bytes());
        for &d in &t.dims {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in &t.data {
            out.extend_from_slice(&v.to_bits().to_le_bytes());
        }
    }
    write_file(path, &out)
}

pub fn read_tensors(path: &Path) -> Result<Vec<Tensor>, CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    let bad = |msg: &str| CliError::InvalidInput(format!("{}: {msg}", path.display()));
    let mut cursor = 0usize;
    let mut take = |n: usize| -> Result<&[u8], CliError> {
        if cursor + n > bytes.len() {
            return Err(bad("truncated tensor container"));
        }
        let slice = &bytes[cursor..cursor + n];
        cursor += n;
        Ok(slice)
    };
    if take(4)? != TENSOR_MAGIC {
        return Err(bad("missing PFTC magic"));
    }
    let version = u32::from_le_bytes(take(4)?.try_into().unwrap());
    if version != TENSOR_VERSION {
        return Err(bad("unsupported container version"));
    }
    let count = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let name = std::str::from_utf8(take(name_len)?)
            .map_err(|_| bad("tensor name is not UTF-8"))?
            .to_string();
        let ndim = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize);
        }
        let len: usize = dims.iter().product();
        let mut data = Vec::with_capacity(len);
        for _ in 0..len {
            data.push(f64::from_bits(u64::from_le_bytes(take(8)?.try_into().unwrap())));
        }
        tensors.push(Tensor { name, dims, data });
    }
    Ok(tensors)
}

/// Serde mirror of the camera intrinsics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CameraJson {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraJson {
    pub fn from_cam(cam: &poseforge_core::geometry::CameraIntrinsics) -> Self {
        CameraJson {
            fx: cam.fx,
            fy: cam.fy,
            cx: cam.cx,
            cy: cam.cy,
            width: cam.width,
            height: cam.height,
        }
    }

    pub fn to_cam(&self) -> Result<poseforge_core::geometry::CameraIntrinsics, CliError> {
        poseforge_core::geometry::CameraIntrinsics::new(
            self.fx,
            self.fy,
            self.cx,
            self.cy,
            self.width,
            self.height,
        )
        .map_err(|e| CliError::module("geometry", "camera_from_json", e))
    }
}

pub fn point3_to_array(p: &Point3) -> [f64; 3] {
    [p.x, p.y, p.z]
}
