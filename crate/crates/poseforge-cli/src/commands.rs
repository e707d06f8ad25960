//! Command implementations. Every command writes `resolved-config.json`
//! into the output directory, then its own artifacts. Parallel sections run
//! on an explicit thread pool and derive all randomness from per-item
//! counter streams, so outputs are byte-identical for any `--threads`.

use std::fs;
use std::path::PathBuf;

use nalgebra::Vector3;
use poseforge_core::geometry::{
    project_jacobian, project_points, BBox, CameraIntrinsics, Point2, Point3, Pose,
};
use poseforge_core::keypoint::{
    keypoint_loss_syn, offset_loss_syn, ObjectScale, PredictionFields,
};
use poseforge_core::metrics::{diameter, label_iou, pose_distance};
use poseforge_core::numeric::{central_difference, max_relative_error};
use poseforge_core::pnp::{epnp_solve, pnp_jacobian, HessianMode};
use poseforge_core::pseudolabel::{iterate_pseudo_labels, perturb_bbox};
use poseforge_core::render::{
    dice_loss, render_silhouette, render_silhouette_with_pose_grad, ProbMask,
    DEFAULT_DICE_EPSILON,
};
use poseforge_core::selfsup::{
    dual_scale_loss, normalize_transform, refine_pose_vsa, SimilarityTransform2D, TargetMode,
};
use poseforge_core::synth::{
    gen_noisy_segmenter, gen_prediction_fields, gen_scene, NoiseParams,
    ShapeKind as SynthShape,
};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{RunConfig, ShapeKind, ToleranceProfile};
use crate::error::CliError;
use crate::fixture_io::{
    checksum_hex, fixture_dir_name, list_fixture_dirs, read_fixture, write_fixture,
    LoadedFixture, Manifest, ManifestEntry, MANIFEST_FILE,
};
use crate::formats::{
    read_json, write_csv, write_json, write_pgm_labels, write_svg_polyline, write_tensors,
    PoseJson, Tensor,
};
use crate::logging;

pub const RESOLVED_CONFIG_FILE: &str = "resolved-config.json";

/// Everything a command needs: the resolved config, where to write, and
/// (for fixture-consuming commands) where to read fixtures from.
pub struct CommandContext {
    pub config: RunConfig,
    pub out_dir: PathBuf,
    pub fixtures_dir: Option<PathBuf>,
}

impl CommandContext {
    /// Creates the output directory and echoes the resolved config into it.
    fn prepare(&self) -> Result<(), CliError> {
        self.config.validate()?;
        fs::create_dir_all(&self.out_dir).map_err(|e| CliError::io(&self.out_dir, e))?;
        write_json(&self.out_dir.join(RESOLVED_CONFIG_FILE), &self.config)
    }

    /// Fixture root: `--fixtures` when given, else `<out>/fixtures` so a
    /// `gen` followed by other commands with the same `--out` just works.
    fn fixtures_root(&self) -> PathBuf {
        self.fixtures_dir
            .clone()
            .unwrap_or_else(|| self.out_dir.join("fixtures"))
    }

    fn load_fixtures(&self) -> Result<Vec<LoadedFixture>, CliError> {
        let root = self.fixtures_root();
        let dirs = list_fixture_dirs(&root)?;
        let fixtures = dirs
            .iter()
            .map(|d| read_fixture(d))
            .collect::<Result<Vec<_>, _>>()?;
        logging::info(&format!(
            "loaded {} fixtures from {}",
            fixtures.len(),
            root.display()
        ));
        Ok(fixtures)
    }

    fn thread_pool(&self) -> Result<rayon::ThreadPool, CliError> {
        rayon::ThreadPoolBuilder::new()
            .num_threads(self.config.threads)
            .build()
            .map_err(|e| CliError::Config(format!("failed to build thread pool: {e}")))
    }

    /// Per-item RNG: one counter stream per item index, independent of
    /// thread scheduling.
    fn item_rng(&self, index: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(index as u64);
        rng
    }
}

fn to_synth_shape(shape: ShapeKind) -> SynthShape {
    match shape {
        ShapeKind::Cube => SynthShape::Cube,
        ShapeKind::Icosphere => SynthShape::Icosphere,
        ShapeKind::RandomConvex => SynthShape::RandomConvex,
    }
}

fn shape_is_symmetric(shape: &str) -> bool {
    shape == "icosphere"
}

/// Shortest-round-trip float formatting shared by all CSV writers.
fn fmt(v: f64) -> String {
    format!("{v}")
}

fn random_unit(rng: &mut ChaCha8Rng) -> Vector3<f64> {
    loop {
        let v = Vector3::new(
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
        );
        let n = v.norm();
        if n > 1e-9 {
            return v / n;
        }
    }
}

// ---------------------------------------------------------------------------
// gen
// ---------------------------------------------------------------------------

pub fn cmd_gen(ctx: &CommandContext) -> Result<(), CliError> {
    ctx.prepare()?;
    let cfg = &ctx.config.gen;
    let cam = cfg.camera.to_cam()?;
    let noise = NoiseParams::new(cfg.offset_sigma, cfg.attention_sigma, cfg.fg_flip_rate)
        .map_err(|e| CliError::module("synth", "noise_params", e))?;
    let shape = to_synth_shape(cfg.shape);
    let root = ctx.out_dir.join("fixtures");
    fs::create_dir_all(&root).map_err(|e| CliError::io(&root, e))?;

    let pool = ctx.thread_pool()?;
    let entries: Vec<ManifestEntry> = pool.install(|| {
        (0..cfg.count)
            .into_par_iter()
            .map(|i| -> Result<ManifestEntry, CliError> {
                let seed = ctx.config.seed.wrapping_add(i as u64);
                let fixture =
                    gen_scene(shape, seed, &cam, (cfg.depth_range[0], cfg.depth_range[1]))
                        .map_err(|e| CliError::module("synth", "gen_scene", e))?;
                let fields = if cfg.write_fields {
                    Some(
                        gen_prediction_fields(&fixture, &noise)
                            .map_err(|e| CliError::module("synth", "gen_prediction_fields", e))?,
                    )
                } else {
                    None
                };
                let name = fixture_dir_name(i);
                write_fixture(&root.join(&name), &fixture, cfg.shape.as_str(), fields.as_ref())?;
                Ok(ManifestEntry {
                    name,
                    seed,
                    checksum: checksum_hex(&fixture),
                })
            })
            .collect::<Result<Vec<_>, CliError>>()
    })?;

    let manifest = Manifest {
        shape: cfg.shape.as_str().to_string(),
        base_seed: ctx.config.seed,
        count: cfg.count,
        fixtures: entries,
    };
    write_json(&root.join(MANIFEST_FILE), &manifest)?;
    logging::info(&format!(
        "generated {} {} fixtures in {}",
        cfg.count,
        cfg.shape.as_str(),
        root.display()
    ));
    Ok(())
}

// ---------------------------------------------------------------------------
// solve
// ---------------------------------------------------------------------------

struct SolveRow {
    name: String,
    seed: u64,
    reprojection_rms: f64,
    iterations: usize,
    converged: bool,
    rot_err_rad: f64,
    trans_err: f64,
}

pub fn cmd_solve(ctx: &CommandContext) -> Result<(), CliError> {
    ctx.prepare()?;
    let fixtures = ctx.load_fixtures()?;
    let cfg = &ctx.config.solve;
    let poses_dir = ctx.out_dir.join("poses");
    fs::create_dir_all(&poses_dir).map_err(|e| CliError::io(&poses_dir, e))?;

    let pool = ctx.thread_pool()?;
    let rows: Vec<SolveRow> = pool.install(|| {
        fixtures
            .par_iter()
            .enumerate()
            .map(|(i, f)| -> Result<SolveRow, CliError> {
                let mut observed = f.fixture.gt_keypoints2d.clone();
                if cfg.noise_px > 0.0 {
                    let mut rng = ctx.item_rng(i);
                    for p in &mut observed {
                        p.x += cfg.noise_px * rng.sample::<f64, _>(StandardNormal);
                        p.y += cfg.noise_px * rng.sample::<f64, _>(StandardNormal);
                    }
                }
                let sol = epnp_solve(&observed, &f.fixture.keypoints3d, &f.fixture.cam)
                    .map_err(|e| CliError::module("pnp", "epnp_solve", e))?;
                write_json(
                    &poses_dir.join(format!("{}_pose.json", f.name)),
                    &PoseJson::from_pose(&sol.pose),
                )?;
                if cfg.report_jacobian {
                    let jac = pnp_jacobian(
                        &sol,
                        &observed,
                        &f.fixture.keypoints3d,
                        &f.fixture.cam,
                        HessianMode::Exact,
                    )
                    .map_err(|e| CliError::module("pnp", "pnp_jacobian", e))?;
                    let (nr, nc) = (jac.nrows(), jac.ncols());
                    let data: Vec<f64> = (0..nr)
                        .flat_map(|r| (0..nc).map(move |c| (r, c)))
                        .map(|(r, c)| jac[(r, c)])
                        .collect();
                    write_tensors(
                        &poses_dir.join(format!("{}_jacobian.pftc", f.name)),
                        &[Tensor {
                            name: "pose_jacobian".into(),
                            dims: vec![nr, nc],
                            data,
                        }],
                    )?;
                }
                Ok(SolveRow {
                    name: f.name.clone(),
                    seed: f.fixture.seed,
                    reprojection_rms: sol.reprojection_rms,
                    iterations: sol.iterations,
                    converged: sol.converged,
                    rot_err_rad: sol.pose.geodesic_to(&f.fixture.gt_pose),
                    trans_err: (sol.pose.translation() - f.fixture.gt_pose.translation()).norm(),
                })
            })
            .collect::<Result<Vec<_>, CliError>>()
    })?;

    let csv_rows: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.name.clone(),
                r.seed.to_string(),
                fmt(cfg.noise_px),
                fmt(r.reprojection_rms),
                r.iterations.to_string(),
                r.converged.to_string(),
                fmt(r.rot_err_rad),
                fmt(r.trans_err),
            ]
        })
        .collect();
    write_csv(
        &ctx.out_dir.join("solve.csv"),
        &[
            "fixture",
            "seed",
            "noise_px",
            "reprojection_rms",
            "iterations",
            "converged",
            "rot_err_rad",
            "trans_err",
        ],
        &csv_rows,
    )?;
    logging::info(&format!("solved {} fixtures", rows.len()));
    Ok(())
}

// ---------------------------------------------------------------------------
// refine
// ---------------------------------------------------------------------------

struct RefineRow {
    name: String,
    seed_index: usize,
    rot_err_init_deg: f64,
    trans_err_init_frac: f64,
    rot_err_deg: f64,
    trans_err_frac: f64,
    initial_loss: f64,
    final_loss: f64,
}

pub fn cmd_refine(ctx: &CommandContext) -> Result<(), CliError> {
    ctx.prepare()?;
    let fixtures = ctx.load_fixtures()?;
    let cfg = &ctx.config.refine;
    let traces_dir = ctx.out_dir.join("traces");
    fs::create_dir_all(&traces_dir).map_err(|e| CliError::io(&traces_dir, e))?;
    let plots_dir = ctx.out_dir.join("plots");
    if cfg.svg {
        fs::create_dir_all(&plots_dir).map_err(|e| CliError::io(&plots_dir, e))?;
    }

    let jobs: Vec<(usize, usize)> = (0..fixtures.len())
        .flat_map(|fi| (0..cfg.seeds).map(move |si| (fi, si)))
        .collect();

    let pool = ctx.thread_pool()?;
    let rows: Vec<RefineRow> = pool.install(|| {
        jobs.par_iter()
            .map(|&(fi, si)| -> Result<RefineRow, CliError> {
                let f = &fixtures[fi];
                let gt = &f.fixture.gt_pose;
                let cam = &f.fixture.cam;
                let mut rng = ctx.item_rng(fi * cfg.seeds + si);
                let axis = random_unit(&mut rng) * cfg.rot_perturb_deg.to_radians();
                let depth = gt.translation().z;
                let dt = random_unit(&mut rng) * (cfg.trans_perturb_frac * depth);
                // Perturb the two components independently so the realized
                // initial errors equal the configured knobs exactly.
                let delta_r = Pose::from_axis_angle(&axis, &Vector3::zeros());
                let init = Pose::new(
                    delta_r.rotation() * gt.rotation(),
                    gt.translation() + dt,
                )
                .map_err(|e| CliError::module("geometry", "perturbed_pose", e))?;
                let rot_err_init_deg = init.geodesic_to(gt).to_degrees();
                let trans_err_init_frac =
                    (init.translation() - gt.translation()).norm() / depth;

                let pseudo = &f.fixture.gt_hard_mask;
                let ones = ProbMask::filled(cam.width, cam.height, 1.0)
                    .map_err(|e| CliError::module("render", "filled", e))?;
                let mut pose = init;
                let mut trace: Vec<(usize, f64, [f64; 6])> = Vec::new();
                for stage in &cfg.stages {
                    let result = refine_pose_vsa(
                        &pose,
                        pseudo,
                        &ones,
                        &f.fixture.mesh,
                        cam,
                        stage.steps,
                        stage.step_size,
                        stage.tau,
                    )
                    .map_err(|e| CliError::module("selfsup", "refine_pose_vsa", e))?;
                    let base = trace.len();
                    trace.extend(
                        result
                            .trace
                            .iter()
                            .enumerate()
                            .map(|(k, s)| (base + k, s.loss, s.params)),
                    );
                    pose = result.pose;
                }

                let trace_rows: Vec<Vec<String>> = trace
                    .iter()
                    .map(|(k, loss, p)| {
                        let mut row = vec![k.to_string(), fmt(*loss)];
                        row.extend(p.iter().map(|&v| fmt(v)));
                        row
                    })
                    .collect();
                let job_name = format!("{}_seed{}", f.name, si);
                write_csv(
                    &traces_dir.join(format!("{job_name}.csv")),
                    &["step", "loss", "rx", "ry", "rz", "tx", "ty", "tz"],
                    &trace_rows,
                )?;
                if cfg.svg {
                    let samples: Vec<(f64, f64)> =
                        trace.iter().map(|(k, loss, _)| (*k as f64, *loss)).collect();
                    write_svg_polyline(
                        &plots_dir.join(format!("{job_name}.svg")),
                        &format!("{job_name} silhouette-alignment loss"),
                        &samples,
                    )?;
                }

                Ok(RefineRow {
                    name: f.name.clone(),
                    seed_index: si,
                    rot_err_init_deg,
                    trans_err_init_frac,
                    rot_err_deg: pose.geodesic_to(gt).to_degrees(),
                    trans_err_frac: (pose.translation() - gt.translation()).norm() / depth,
                    initial_loss: trace.first().map(|t| t.1).unwrap_or(f64::NAN),
                    final_loss: trace.last().map(|t| t.1).unwrap_or(f64::NAN),
                })
            })
            .collect::<Result<Vec<_>, CliError>>()
    })?;

    let csv_rows: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.name.clone(),
                r.seed_index.to_string(),
                fmt(r.rot_err_init_deg),
                fmt(r.trans_err_init_frac),
                fmt(r.rot_err_deg),
                fmt(r.trans_err_frac),
                fmt(r.initial_loss),
                fmt(r.final_loss),
            ]
        })
        .collect();
    write_csv(
        &ctx.out_dir.join("refine.csv"),
        &[
            "fixture",
            "seed_index",
            "rot_err_init_deg",
            "trans_err_init_frac",
            "rot_err_deg",
            "trans_err_frac",
            "initial_loss",
            "final_loss",
        ],
        &csv_rows,
    )?;
    logging::info(&format!("refined {} pose initializations", rows.len()));
    Ok(())
}

// ---------------------------------------------------------------------------
// pseudolabel
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct IouSummary {
    rounds: usize,
    sigma_conf: f64,
    mean_iou_per_round: Vec<f64>,
}

pub fn cmd_pseudolabel(ctx: &CommandContext) -> Result<(), CliError> {
    ctx.prepare()?;
    let fixtures = ctx.load_fixtures()?;
    let cfg = &ctx.config.pseudolabel;

    let (w, h) = (fixtures[0].fixture.cam.width, fixtures[0].fixture.cam.height);
    if fixtures
        .iter()
        .any(|f| f.fixture.cam.width != w || f.fixture.cam.height != h)
    {
        return Err(CliError::InvalidInput(
            "pseudolabel requires all fixtures to share one image size".into(),
        ));
    }

    let truths: Vec<ProbMask> = fixtures
        .iter()
        .map(|f| f.fixture.gt_hard_mask.clone())
        .collect();
    let bboxes: Vec<Vec<BBox>> = fixtures
        .iter()
        .enumerate()
        .map(|(i, f)| -> Result<Vec<BBox>, CliError> {
            let mut rng = ctx.item_rng(i);
            let expanded = perturb_bbox(&f.fixture.tight_bbox, w, h, cfg.max_expand, &mut rng)
                .map_err(|e| CliError::module("pseudolabel", "perturb_bbox", e))?;
            Ok(vec![expanded])
        })
        .collect::<Result<Vec<_>, _>>()?;

    // TTA set: every configured scale, unflipped and mirrored.
    let mut transforms = Vec::with_capacity(cfg.tta_scales.len() * 2);
    for &s in &cfg.tta_scales {
        transforms.push(
            SimilarityTransform2D::scale_offset(s, Point2::zeros())
                .map_err(|e| CliError::module("selfsup", "tta_transform", e))?,
        );
        transforms.push(
            SimilarityTransform2D::new(s, 0.0, true, Point2::new(s * w as f64, 0.0))
                .map_err(|e| CliError::module("selfsup", "tta_transform", e))?,
        );
    }

    let segmenters = fixtures
        .iter()
        .map(|f| {
            gen_noisy_segmenter(&f.fixture, &cfg.noise_schedule, cfg.rounds)
                .map_err(|e| CliError::module("synth", "gen_noisy_segmenter", e))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let segment = |round: usize, index: usize, t: &SimilarityTransform2D| {
        segmenters[index](round, index, t)
    };

    let rounds = iterate_pseudo_labels(
        segment,
        &truths,
        &bboxes,
        &transforms,
        cfg.rounds,
        cfg.sigma_conf,
    )
    .map_err(|e| CliError::module("pseudolabel", "iterate_pseudo_labels", e))?;

    let mut iou_rows: Vec<Vec<String>> = Vec::new();
    let mut means = Vec::with_capacity(rounds.len());
    for (r, round) in rounds.iter().enumerate() {
        let round_dir = ctx.out_dir.join("labels").join(format!("round_{r}"));
        fs::create_dir_all(&round_dir).map_err(|e| CliError::io(&round_dir, e))?;
        for (i, labels) in round.labels.iter().enumerate() {
            write_pgm_labels(&round_dir.join(format!("{}.pgm", fixtures[i].name)), labels)?;
            let iou = label_iou(labels, &truths[i])
                .map_err(|e| CliError::module("metrics", "label_iou", e))?;
            iou_rows.push(vec![r.to_string(), fixtures[i].name.clone(), fmt(iou)]);
        }
        means.push(round.mean_iou);
        logging::info(&format!("round {r}: mean IoU {:.4}", round.mean_iou));
    }
    write_csv(&ctx.out_dir.join("iou.csv"), &["round", "fixture", "iou"], &iou_rows)?;
    write_json(
        &ctx.out_dir.join("iou_summary.json"),
        &IouSummary {
            rounds: cfg.rounds,
            sigma_conf: cfg.sigma_conf,
            mean_iou_per_round: means,
        },
    )?;
    Ok(())
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct EvalSummary {
    count: usize,
    threshold_fraction: f64,
    recall: f64,
    mean_distance: f64,
    max_distance: f64,
}

struct EvalRow {
    name: String,
    shape: String,
    symmetric: bool,
    distance: f64,
    diameter: f64,
    threshold: f64,
    within: bool,
}

pub fn cmd_eval(ctx: &CommandContext) -> Result<(), CliError> {
    ctx.prepare()?;
    let fixtures = ctx.load_fixtures()?;
    let cfg = &ctx.config.eval;

    // Predictions: a directory of pose JSON files (as written by `solve`),
    // or the ground truth itself as a baseline when none is configured.
    let preds: Vec<Pose> = match &cfg.predictions {
        Some(dir) => fixtures
            .iter()
            .map(|f| -> Result<Pose, CliError> {
                read_json::<PoseJson>(&dir.join(format!("{}_pose.json", f.name)))?.to_pose()
            })
            .collect::<Result<Vec<_>, _>>()?,
        None => fixtures.iter().map(|f| f.fixture.gt_pose).collect(),
    };

    let pool = ctx.thread_pool()?;
    let rows: Vec<EvalRow> = pool.install(|| {
        fixtures
            .par_iter()
            .zip(preds.par_iter())
            .map(|(f, pred)| -> Result<EvalRow, CliError> {
                let model = f.fixture.mesh.vertices();
                let diam = diameter(model).map_err(|e| CliError::module("metrics", "diameter", e))?;
                let symmetric = cfg.symmetric.unwrap_or_else(|| shape_is_symmetric(&f.shape));
                let distance = pose_distance(pred, &f.fixture.gt_pose, model, symmetric)
                    .map_err(|e| CliError::module("metrics", "pose_distance", e))?;
                let threshold = cfg.threshold_fraction * diam;
                Ok(EvalRow {
                    name: f.name.clone(),
                    shape: f.shape.clone(),
                    symmetric,
                    distance,
                    diameter: diam,
                    threshold,
                    // Strict inequality: a distance exactly at the threshold
                    // does not count as a hit.
                    within: distance < threshold,
                })
            })
            .collect::<Result<Vec<_>, CliError>>()
    })?;

    let csv_rows: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.name.clone(),
                r.shape.clone(),
                r.symmetric.to_string(),
                fmt(r.distance),
                fmt(r.diameter),
                fmt(r.threshold),
                (r.within as u8).to_string(),
            ]
        })
        .collect();
    write_csv(
        &ctx.out_dir.join("eval.csv"),
        &["fixture", "shape", "symmetric", "distance", "diameter", "threshold", "within"],
        &csv_rows,
    )?;

    let count = rows.len();
    let recall = rows.iter().filter(|r| r.within).count() as f64 / count as f64;
    let mean_distance = rows.iter().map(|r| r.distance).sum::<f64>() / count as f64;
    let max_distance = rows.iter().fold(0.0f64, |acc, r| acc.max(r.distance));
    write_json(
        &ctx.out_dir.join("summary.json"),
        &EvalSummary {
            count,
            threshold_fraction: cfg.threshold_fraction,
            recall,
            mean_distance,
            max_distance,
        },
    )?;
    logging::info(&format!("evaluated {count} fixtures: recall {recall}"));
    Ok(())
}

// ---------------------------------------------------------------------------
// gradcheck
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct GradcheckRow {
    name: &'static str,
    max_rel_err: f64,
    tolerance: f64,
    pass: bool,
}

#[derive(Serialize)]
struct GradcheckReport {
    profile: &'static str,
    passed: usize,
    failed: usize,
    checks: Vec<GradcheckRow>,
}

fn desk_cam() -> CameraIntrinsics {
    CameraIntrinsics::new(500.0, 500.0, 320.0, 240.0, 640, 480).expect("valid intrinsics")
}

fn small_cam() -> CameraIntrinsics {
    CameraIntrinsics::new(128.0, 128.0, 64.0, 64.0, 128, 128).expect("valid intrinsics")
}

fn cube_corners() -> Vec<Point3> {
    let mut pts = Vec::with_capacity(8);
    for &x in &[-0.5, 0.5] {
        for &y in &[-0.5, 0.5] {
            for &z in &[-0.5, 0.5] {
                pts.push(Point3::new(x, y, z));
            }
        }
    }
    pts
}

fn gradcheck_pose() -> Pose {
    Pose::from_axis_angle(&Vector3::new(0.4, -0.3, 0.2), &Vector3::new(0.2, -0.1, 4.0))
}

/// Projection Jacobian vs per-parameter central differences.
fn check_projection(seed: u64) -> Result<f64, CliError> {
    let _ = seed;
    let cam = desk_cam();
    let k3d = cube_corners();
    let pose = gradcheck_pose();
    let jacs = project_jacobian(&pose, &k3d, &cam)
        .map_err(|e| CliError::module("geometry", "project_jacobian", e))?;
    let n = k3d.len();
    let mut analytic = vec![0.0; n * 12];
    for (i, m) in jacs.iter().enumerate() {
        for r in 0..2 {
            for c in 0..6 {
                analytic[(i * 2 + r) * 6 + c] = m[(r, c)];
            }
        }
    }
    let params = pose.params();
    let step = 1e-6;
    let mut fd = vec![0.0; n * 12];
    for c in 0..6 {
        let mut hi = params;
        let mut lo = params;
        hi[c] += step;
        lo[c] -= step;
        let ph = project_points(&Pose::from_params(&hi), &k3d, &cam)
            .map_err(|e| CliError::module("geometry", "project_points", e))?;
        let pl = project_points(&Pose::from_params(&lo), &k3d, &cam)
            .map_err(|e| CliError::module("geometry", "project_points", e))?;
        for i in 0..n {
            fd[(i * 2) * 6 + c] = (ph[i].x - pl[i].x) / (2.0 * step);
            fd[(i * 2 + 1) * 6 + c] = (ph[i].y - pl[i].y) / (2.0 * step);
        }
    }
    Ok(max_relative_error(&analytic, &fd))
}

/// Keypoint-loss gradient vs central differences over the predictions.
fn check_keypoint_loss(seed: u64) -> Result<f64, CliError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(101);
    let n = 8;
    let gt: Vec<Point2> = (0..n)
        .map(|_| Point2::new(rng.random_range(100.0..540.0), rng.random_range(100.0..380.0)))
        .collect();
    let pred: Vec<Point2> = gt
        .iter()
        .map(|p| p + Point2::new(rng.random_range(-30.0..30.0), rng.random_range(-30.0..30.0)))
        .collect();
    let scale = ObjectScale::new(100.0).map_err(|e| CliError::module("keypoint", "scale", e))?;
    let sigma = 0.1;
    let (_, grad) = keypoint_loss_syn(&pred, &gt, scale, sigma)
        .map_err(|e| CliError::module("keypoint", "keypoint_loss_syn", e))?;
    let analytic: Vec<f64> = grad.iter().flat_map(|g| [g.x, g.y]).collect();
    let flat: Vec<f64> = pred.iter().flat_map(|p| [p.x, p.y]).collect();
    let fd = central_difference(
        |x: &[f64]| {
            let p: Vec<Point2> = (0..n).map(|i| Point2::new(x[2 * i], x[2 * i + 1])).collect();
            keypoint_loss_syn(&p, &gt, scale, sigma).expect("valid inputs").0
        },
        &flat,
        1e-6,
    );
    Ok(max_relative_error(&analytic, &fd))
}

/// Offset-loss gradient vs central differences over the offset field.
fn check_offset_loss(seed: u64) -> Result<f64, CliError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(102);
    let (w, h, n) = (8usize, 8usize, 3usize);
    let hw = w * h;
    let offsets: Vec<f64> = (0..n * hw * 2).map(|_| rng.random_range(-3.0..3.0)).collect();
    let attention = vec![0.0; n * hw];
    let fg_prob = vec![1.0; hw];
    let fg_mask: Vec<bool> = (0..hw).map(|_| rng.random_bool(0.6)).collect();
    let gt: Vec<Point2> = (0..n)
        .map(|_| Point2::new(rng.random_range(0.0..w as f64), rng.random_range(0.0..h as f64)))
        .collect();
    let scale = ObjectScale::new(8.0).map_err(|e| CliError::module("keypoint", "scale", e))?;
    let sigma = 0.1;
    let fields = PredictionFields::new(w, h, n, offsets.clone(), attention.clone(), fg_prob.clone())
        .map_err(|e| CliError::module("keypoint", "fields", e))?;
    let (_, analytic) = offset_loss_syn(&fields, &gt, &fg_mask, scale, sigma)
        .map_err(|e| CliError::module("keypoint", "offset_loss_syn", e))?;
    let fd = central_difference(
        |x: &[f64]| {
            let f = PredictionFields::new(w, h, n, x.to_vec(), attention.clone(), fg_prob.clone())
                .expect("valid fields");
            offset_loss_syn(&f, &gt, &fg_mask, scale, sigma).expect("valid inputs").0
        },
        &offsets,
        1e-6,
    );
    Ok(max_relative_error(&analytic, &fd))
}

/// Dice gradients (all three inputs) vs central differences.
fn check_dice(seed: u64) -> Result<f64, CliError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(103);
    let (w, h) = (12usize, 12usize);
    let hw = w * h;
    let draw = |rng: &mut ChaCha8Rng| -> Vec<f64> {
        (0..hw).map(|_| rng.random_range(0.05..0.95)).collect()
    };
    let pseudo = draw(&mut rng);
    let rendered = draw(&mut rng);
    let fg = draw(&mut rng);
    let mk = |v: Vec<f64>| -> Result<ProbMask, CliError> {
        ProbMask::new(w, h, v).map_err(|e| CliError::module("render", "mask", e))
    };
    let (_, grads) = dice_loss(&mk(pseudo.clone())?, &mk(rendered.clone())?, &mk(fg.clone())?, DEFAULT_DICE_EPSILON)
        .map_err(|e| CliError::module("render", "dice_loss", e))?;
    let analytic: Vec<f64> = grads
        .d_pseudo
        .iter()
        .chain(grads.d_rendered.iter())
        .chain(grads.d_fg.iter())
        .copied()
        .collect();
    let flat: Vec<f64> = pseudo
        .iter()
        .chain(rendered.iter())
        .chain(fg.iter())
        .copied()
        .collect();
    let fd = central_difference(
        |x: &[f64]| {
            let p = ProbMask::new(w, h, x[..hw].to_vec()).expect("mask");
            let r = ProbMask::new(w, h, x[hw..2 * hw].to_vec()).expect("mask");
            let f = ProbMask::new(w, h, x[2 * hw..].to_vec()).expect("mask");
            dice_loss(&p, &r, &f, DEFAULT_DICE_EPSILON).expect("valid inputs").0
        },
        &flat,
        1e-6,
    );
    Ok(max_relative_error(&analytic, &fd))
}

/// Dual-scale loss gradients in detached-target mode vs central differences
/// over both augmented prediction sets (the only sets that receive gradient
/// in this mode).
fn check_dual_scale(seed: u64, normalized_size: usize, sigma_scale: f64) -> Result<f64, CliError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(104);
    let cam = desk_cam();
    let k3d = cube_corners();
    let pose = gradcheck_pose();
    let proj = project_points(&pose, &k3d, &cam)
        .map_err(|e| CliError::module("geometry", "project_points", e))?;
    let (mut lo, mut hi) = (Point2::new(f64::MAX, f64::MAX), Point2::new(f64::MIN, f64::MIN));
    for p in &proj {
        lo = lo.inf(p);
        hi = hi.sup(p);
    }
    let bbox = BBox::new(lo.x, lo.y, hi.x, hi.y)
        .map_err(|e| CliError::module("geometry", "bbox", e))?;
    let norm = normalize_transform(&bbox, normalized_size as f64)
        .map_err(|e| CliError::module("selfsup", "normalize_transform", e))?;
    let aug = SimilarityTransform2D::new(1.2, 0.3, true, Point2::new(12.0, -5.0))
        .map_err(|e| CliError::module("selfsup", "transform", e))?;
    let scale = ObjectScale::new(bbox.longest_side())
        .map_err(|e| CliError::module("keypoint", "scale", e))?;

    let orig_aug: Vec<Point2> = proj
        .iter()
        .map(|p| aug.apply(p) + Point2::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)))
        .collect();
    let norm_aug: Vec<Point2> = proj
        .iter()
        .map(|p| {
            norm.apply(&aug.apply(p))
                + Point2::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0))
        })
        .collect();
    let k_norm: Vec<Point2> = norm.apply_set(&proj);

    let eval = |oa: &[Point2], na: &[Point2]| -> f64 {
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
        .expect("valid inputs")
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
    .map_err(|e| CliError::module("selfsup", "dual_scale_loss", e))?;
    let analytic: Vec<f64> = grads
        .d_orig_aug
        .iter()
        .chain(grads.d_norm_aug.iter())
        .flat_map(|g| [g.x, g.y])
        .collect();
    let flat: Vec<f64> = orig_aug
        .iter()
        .chain(norm_aug.iter())
        .flat_map(|p| [p.x, p.y])
        .collect();
    let n = k3d.len();
    let fd = central_difference(
        |x: &[f64]| {
            let oa: Vec<Point2> = (0..n).map(|i| Point2::new(x[2 * i], x[2 * i + 1])).collect();
            let na: Vec<Point2> = (0..n)
                .map(|i| Point2::new(x[2 * n + 2 * i], x[2 * n + 2 * i + 1]))
                .collect();
            eval(&oa, &na)
        },
        &flat,
        1e-5,
    );
    Ok(max_relative_error(&analytic, &fd))
}

/// Mean-pixel-probability pose gradient of the soft renderer vs central
/// differences at bandwidth 1 px (rasterization keeps this check loose).
fn check_soft_render(seed: u64) -> Result<f64, CliError> {
    let _ = seed;
    let cam = small_cam();
    let mesh = poseforge_core::synth::cube_mesh();
    let tau = 1.0;
    let pose = Pose::from_axis_angle(
        &Vector3::new(0.3, -0.2, 0.15),
        &Vector3::new(0.15, -0.1, 4.0),
    );
    let (_, grad) = render_silhouette_with_pose_grad(&pose, &mesh, &cam, tau)
        .map_err(|e| CliError::module("render", "render_silhouette_with_pose_grad", e))?;
    let n = (cam.width * cam.height) as f64;
    let analytic: Vec<f64> = (0..6)
        .map(|c| grad.iter().map(|g| g[c]).sum::<f64>() / n)
        .collect();
    let fd = central_difference(
        |x: &[f64]| {
            let p = Pose::from_params(&[x[0], x[1], x[2], x[3], x[4], x[5]]);
            let m = render_silhouette(&p, &mesh, &cam, tau).expect("renderable pose");
            m.data().iter().sum::<f64>() / n
        },
        &pose.params(),
        1e-4,
    );
    Ok(max_relative_error(&analytic, &fd))
}

/// Pose-solver Jacobian vs re-solve central differences over scenes with
/// and without observation noise.
fn check_pnp_jacobian(seed: u64, scenes: usize) -> Result<f64, CliError> {
    let cam = desk_cam();
    let k3d = cube_corners();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(107);
    let mut worst = 0.0f64;
    for case in 0..scenes {
        let axis = random_unit(&mut rng) * rng.random_range(0.1..1.2);
        let t = Vector3::new(
            rng.random_range(-0.3..0.3),
            rng.random_range(-0.3..0.3),
            rng.random_range(3.0..5.0),
        );
        let gt = Pose::from_axis_angle(&axis, &t);
        let noise = if case % 2 == 0 { 0.0 } else { 1.0 };
        let k2d: Vec<Point2> = project_points(&gt, &k3d, &cam)
            .map_err(|e| CliError::module("geometry", "project_points", e))?
            .into_iter()
            .map(|p| {
                Point2::new(
                    p.x + noise * rng.sample::<f64, _>(StandardNormal),
                    p.y + noise * rng.sample::<f64, _>(StandardNormal),
                )
            })
            .collect();
        let sol = epnp_solve(&k2d, &k3d, &cam)
            .map_err(|e| CliError::module("pnp", "epnp_solve", e))?;
        let jac = pnp_jacobian(&sol, &k2d, &k3d, &cam, HessianMode::Exact)
            .map_err(|e| CliError::module("pnp", "pnp_jacobian", e))?;
        // Re-solve finite differences: perturb one observed coordinate,
        // solve from scratch, difference the pose chart.
        let step = 1e-4;
        let n = k2d.len();
        let mut fd = vec![0.0; 6 * 2 * n];
        for i in 0..n {
            for c in 0..2 {
                let mut hi = k2d.clone();
                let mut lo = k2d.clone();
                if c == 0 {
                    hi[i].x += step;
                    lo[i].x -= step;
                } else {
                    hi[i].y += step;
                    lo[i].y -= step;
                }
                let ph = epnp_solve(&hi, &k3d, &cam)
                    .map_err(|e| CliError::module("pnp", "epnp_solve", e))?
                    .pose
                    .params();
                let pl = epnp_solve(&lo, &k3d, &cam)
                    .map_err(|e| CliError::module("pnp", "epnp_solve", e))?
                    .pose
                    .params();
                for r in 0..6 {
                    fd[r * 2 * n + 2 * i + c] = (ph[r] - pl[r]) / (2.0 * step);
                }
            }
        }
        let analytic: Vec<f64> = (0..6)
            .flat_map(|r| (0..2 * n).map(move |col| (r, col)))
            .map(|(r, col)| jac[(r, col)])
            .collect();
        worst = worst.max(max_relative_error(&analytic, &fd));
    }
    Ok(worst)
}

pub fn cmd_gradcheck(ctx: &CommandContext) -> Result<(), CliError> {
    ctx.prepare()?;
    let cfg = &ctx.config.gradcheck;
    let seed = ctx.config.seed;
    let profile = ctx.config.tolerance_profile;
    // (name, default tolerance, strict tolerance, result)
    let row_defs: Vec<(&'static str, f64, f64, Result<f64, CliError>)> = vec![
        ("projection_jacobian", 1e-5, 1e-6, check_projection(seed)),
        ("keypoint_loss_grad", 1e-5, 1e-6, check_keypoint_loss(seed)),
        ("offset_loss_grad", 1e-5, 1e-6, check_offset_loss(seed)),
        ("dice_loss_grad", 1e-5, 1e-6, check_dice(seed)),
        (
            "dual_scale_detached_grad",
            1e-5,
            1e-6,
            check_dual_scale(seed, cfg.normalized_size, cfg.sigma_scale),
        ),
        ("soft_render_pose_grad", 5e-2, 5e-2, check_soft_render(seed)),
        (
            "pnp_jacobian",
            1e-3,
            5e-4,
            check_pnp_jacobian(seed, cfg.pnp_scenes),
        ),
    ];

    let mut checks = Vec::with_capacity(row_defs.len());
    for (name, tol_default, tol_strict, result) in row_defs {
        let max_rel_err = result?;
        let tolerance = match profile {
            ToleranceProfile::Default => tol_default,
            ToleranceProfile::Strict => tol_strict,
        };
        let pass = max_rel_err < tolerance;
        println!(
            "{name:<26} max_rel_err {max_rel_err:>10.3e}   tol {tolerance:.1e}   {}",
            if pass { "PASS" } else { "FAIL" }
        );
        checks.push(GradcheckRow {
            name,
            max_rel_err,
            tolerance,
            pass,
        });
    }
    let failed = checks.iter().filter(|c| !c.pass).count();
    let report = GradcheckReport {
        profile: profile.as_str(),
        passed: checks.len() - failed,
        failed,
        checks,
    };
    write_json(&ctx.out_dir.join("gradcheck.json"), &report)?;
    if failed > 0 {
        return Err(CliError::ChecksFailed {
            failed,
            total: report.passed + failed,
        });
    }
    println!("all {} gradient checks passed", report.passed);
    Ok(())
}
