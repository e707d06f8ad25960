//! Fixture directory layout: one directory per scene holding the mesh (OBJ),
//! the scene record (JSON), the ground-truth silhouette (PGM), and optional
//! dense prediction fields (tensor container). A manifest at the root lists
//! every fixture with its content checksum.

use std::fs;
use std::path::{Path, PathBuf};

use poseforge_core::geometry::{BBox, Point2, Point3};
use poseforge_core::keypoint::PredictionFields;
use poseforge_core::synth::SceneFixture;
use serde::{Deserialize, Serialize};

use crate::error::CliError;
use crate::formats::{
    read_json, read_obj, read_pgm_mask, read_tensors, write_json, write_obj, write_pgm_mask,
    write_tensors, CameraJson, PoseJson, Tensor,
};

pub const MESH_FILE: &str = "mesh.obj";
pub const FIXTURE_FILE: &str = "fixture.json";
pub const MASK_FILE: &str = "gt_mask.pgm";
pub const FIELDS_FILE: &str = "fields.pftc";
pub const MANIFEST_FILE: &str = "manifest.json";

/// JSON record of one generated scene (everything except mesh, mask, and
/// dense fields, which live in sibling files).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FixtureJson {
    pub seed: u64,
    pub shape: String,
    pub camera: CameraJson,
    pub gt_pose: PoseJson,
    pub keypoints3d: Vec<[f64; 3]>,
    pub gt_keypoints2d: Vec<[f64; 2]>,
    /// Tight silhouette bbox as [x_min, y_min, x_max, y_max].
    pub tight_bbox: [f64; 4],
    /// Content checksum (hex) of the full fixture, mesh and mask included.
    pub checksum: String,
}

/// Root manifest: fixture names with their checksums, in index order.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub shape: String,
    pub base_seed: u64,
    pub count: usize,
    pub fixtures: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub seed: u64,
    pub checksum: String,
}

pub fn fixture_dir_name(index: usize) -> String {
    format!("fixture_{index:03}")
}

pub fn checksum_hex(fixture: &SceneFixture) -> String {
    format!("{:016x}", fixture.checksum())
}

/// Writes one fixture directory. `fields` adds the dense prediction tensors
/// when present.
pub fn write_fixture(
    dir: &Path,
    fixture: &SceneFixture,
    shape: &str,
    fields: Option<&PredictionFields>,
) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    write_obj(&dir.join(MESH_FILE), &fixture.mesh)?;
    write_pgm_mask(&dir.join(MASK_FILE), &fixture.gt_hard_mask)?;
    let record = FixtureJson {
        seed: fixture.seed,
        shape: shape.to_string(),
        camera: CameraJson::from_cam(&fixture.cam),
        gt_pose: PoseJson::from_pose(&fixture.gt_pose),
        keypoints3d: fixture.keypoints3d.iter().map(|p| [p.x, p.y, p.z]).collect(),
        gt_keypoints2d: fixture.gt_keypoints2d.iter().map(|p| [p.x, p.y]).collect(),
        tight_bbox: [
            fixture.tight_bbox.x_min(),
            fixture.tight_bbox.y_min(),
            fixture.tight_bbox.x_max(),
            fixture.tight_bbox.y_max(),
        ],
        checksum: checksum_hex(fixture),
    };
    write_json(&dir.join(FIXTURE_FILE), &record)?;
    if let Some(fields) = fields {
        let (w, h, n) = (fields.width(), fields.height(), fields.n_keypoints());
        let tensors = vec![
            Tensor {
                name: "offsets".into(),
                dims: vec![n, h, w, 2],
                data: fields.offsets_raw().to_vec(),
            },
            Tensor {
                name: "attention".into(),
                dims: vec![n, h, w],
                data: fields.attention_raw().to_vec(),
            },
            Tensor {
                name: "fg_prob".into(),
                dims: vec![h, w],
                data: fields.fg_prob_raw().to_vec(),
            },
        ];
        write_tensors(&dir.join(FIELDS_FILE), &tensors)?;
    }
    Ok(())
}

/// A fixture read back from disk, checksum-verified.
#[derive(Debug, Clone)]
pub struct LoadedFixture {
    pub name: String,
    pub shape: String,
    pub fixture: SceneFixture,
}

pub fn read_fixture(dir: &Path) -> Result<LoadedFixture, CliError> {
    let record: FixtureJson = read_json(&dir.join(FIXTURE_FILE))?;
    let mesh = read_obj(&dir.join(MESH_FILE))?;
    let gt_hard_mask = read_pgm_mask(&dir.join(MASK_FILE))?;
    let cam = record.camera.to_cam()?;
    let gt_pose = record.gt_pose.to_pose()?;
    let keypoints3d = record
        .keypoints3d
        .iter()
        .map(|&[x, y, z]| Point3::new(x, y, z))
        .collect();
    let gt_keypoints2d = record
        .gt_keypoints2d
        .iter()
        .map(|&[x, y]| Point2::new(x, y))
        .collect();
    let [x_min, y_min, x_max, y_max] = record.tight_bbox;
    let tight_bbox = BBox::new(x_min, y_min, x_max, y_max)
        .map_err(|e| CliError::module("geometry", "fixture_bbox", e))?;
    let fixture = SceneFixture {
        mesh,
        gt_pose,
        cam,
        keypoints3d,
        gt_keypoints2d,
        gt_hard_mask,
        tight_bbox,
        seed: record.seed,
    };
    let actual = checksum_hex(&fixture);
    if actual != record.checksum {
        return Err(CliError::InvalidInput(format!(
            "{}: fixture checksum mismatch (recorded {}, recomputed {actual})",
            dir.display(),
            record.checksum
        )));
    }
    let name = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "fixture".to_string());
    Ok(LoadedFixture {
        name,
        shape: record.shape,
        fixture,
    })
}

/// Reads the optional dense prediction fields of a fixture directory.
pub fn read_fields(dir: &Path) -> Result<Option<PredictionFields>, CliError> {
    let path = dir.join(FIELDS_FILE);
    if !path.exists() {
        return Ok(None);
    }
    let tensors = read_tensors(&path)?;
    let find = |name: &str| -> Result<&Tensor, CliError> {
        tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| CliError::InvalidInput(format!("{}: missing tensor '{name}'", path.display())))
    };
    let offsets = find("offsets")?;
    let attention = find("attention")?;
    let fg_prob = find("fg_prob")?;
    if offsets.dims.len() != 4 || attention.dims.len() != 3 || fg_prob.dims.len() != 2 {
        return Err(CliError::InvalidInput(format!(
            "{}: unexpected tensor ranks",
            path.display()
        )));
    }
    let (n, h, w) = (offsets.dims[0], offsets.dims[1], offsets.dims[2]);
    let fields = PredictionFields::new(
        w,
        h,
        n,
        offsets.data.clone(),
        attention.data.clone(),
        fg_prob.data.clone(),
    )
    .map_err(|e| CliError::module("keypoint", "read_fields", e))?;
    Ok(Some(fields))
}

/// Lists fixture subdirectories of `root` in name order.
pub fn list_fixture_dirs(root: &Path) -> Result<Vec<PathBuf>, CliError> {
    if !root.is_dir() {
        return Err(CliError::InvalidInput(format!(
            "{}: fixtures directory not found (run `gen` first or pass --fixtures)",
            root.display()
        )));
    }
    let entries = fs::read_dir(root).map_err(|e| CliError::io(root, e))?;
    let mut dirs: Vec<PathBuf> = entries
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| {
            p.is_dir()
                && p.file_name()
                    .map(|n| n.to_string_lossy().starts_with("fixture_"))
                    .unwrap_or(false)
        })
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(CliError::InvalidInput(format!(
            "{}: no fixture_* directories found",
            root.display()
        )));
    }
    Ok(dirs)
}
