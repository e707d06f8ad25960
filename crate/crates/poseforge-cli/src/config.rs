//! Run configuration: one JSON file with per-command sections. Every field
//! has a default, so an empty config (or none at all) is a valid run. The
//! resolved configuration is echoed into the output directory as
//! `resolved-config.json` for reproducibility.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::CliError;
use crate::formats::CameraJson;

/// Named defaults shared by commands. They surface in `--help` so a reader
/// can see every constant a default run uses without opening a config file.
pub mod defaults {
    /// Keypoints per object.
    pub const KEYPOINTS: usize = 8;
    /// Confidence threshold for trinary pseudo-label classification.
    pub const SIGMA_CONF: f64 = 0.7;
    /// Maximum relative bounding-box expansion during perturbation.
    pub const MAX_EXPAND: f64 = 0.15;
    /// Pseudo-label refinement rounds.
    pub const ROUNDS: usize = 5;
    /// Normalized crop size (pixels) for the dual-scale branch.
    pub const NORMALIZED_SIZE: usize = 64;
    /// Smooth-L1 transition scale as a fraction of object scale.
    pub const SIGMA_SCALE: f64 = 0.1;
    /// ADD recall threshold as a fraction of the model diameter.
    pub const RECALL_FRACTION: f64 = 0.1;
    /// Test-time-augmentation scale set (each used with and without flip).
    pub const TTA_SCALES: [f64; 3] = [0.75, 1.0, 1.25];
    /// Consistency / alignment loss weights.
    pub const LAMBDA1: f64 = 1.0;
    pub const LAMBDA2: f64 = 1.0;
}

/// Tolerance profile for gradient checks: `default` uses the documented
/// acceptance thresholds; `strict` tightens the exact-gradient checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ToleranceProfile {
    #[default]
    Default,
    Strict,
}

impl ToleranceProfile {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        match text {
            "default" => Ok(ToleranceProfile::Default),
            "strict" => Ok(ToleranceProfile::Strict),
            other => Err(CliError::Config(format!(
                "unknown tolerance profile '{other}' (expected 'default' or 'strict')"
            ))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ToleranceProfile::Default => "default",
            ToleranceProfile::Strict => "strict",
        }
    }
}

/// Shape kind for fixture generation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    #[default]
    Cube,
    Icosphere,
    RandomConvex,
}

impl ShapeKind {
    /// Whether evaluation should treat this shape as symmetric by default.
    pub fn default_symmetric(self) -> bool {
        matches!(self, ShapeKind::Icosphere)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ShapeKind::Cube => "cube",
            ShapeKind::Icosphere => "icosphere",
            ShapeKind::RandomConvex => "random_convex",
        }
    }
}

fn default_camera() -> CameraJson {
    CameraJson {
        fx: 128.0,
        fy: 128.0,
        cx: 64.0,
        cy: 64.0,
        width: 128,
        height: 128,
    }
}

fn default_depth_range() -> [f64; 2] {
    [3.5, 4.5]
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    /// Number of fixtures to generate.
    pub count: usize,
    pub shape: ShapeKind,
    pub camera: CameraJson,
    /// Inclusive [min, max] object depth in scene units.
    pub depth_range: [f64; 2],
    /// Std-dev of per-pixel keypoint offset noise (pixels).
    pub offset_sigma: f64,
    /// Std-dev of attention logit noise.
    pub attention_sigma: f64,
    /// Probability of flipping a foreground-probability pixel.
    pub fg_flip_rate: f64,
    /// Also write the dense prediction fields (offsets + attention + fg).
    pub write_fields: bool,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            count: 4,
            shape: ShapeKind::Cube,
            camera: default_camera(),
            depth_range: default_depth_range(),
            offset_sigma: 0.5,
            attention_sigma: 0.25,
            fg_flip_rate: 0.02,
            write_fields: true,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolveConfig {
    /// Std-dev of Gaussian pixel noise added to the observed keypoints.
    pub noise_px: f64,
    /// Also report the pose Jacobian condition diagnostics.
    pub report_jacobian: bool,
}

impl Default for SolveConfig {
    fn default() -> Self {
        SolveConfig {
            noise_px: 0.0,
            report_jacobian: false,
        }
    }
}

/// One stage of silhouette-alignment refinement: a fixed number of descent
/// steps at one rendering bandwidth.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RefineStage {
    pub steps: usize,
    pub step_size: f64,
    pub tau: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefineConfig {
    /// Initial rotation perturbation (degrees) applied to the ground truth.
    pub rot_perturb_deg: f64,
    /// Initial translation perturbation as a fraction of object depth.
    pub trans_perturb_frac: f64,
    /// Perturbation seeds per fixture; each seed is refined independently.
    pub seeds: usize,
    /// Coarse-to-fine schedule; stages run back to back.
    pub stages: Vec<RefineStage>,
    /// Emit an SVG convergence plot per run.
    pub svg: bool,
}

impl Default for RefineConfig {
    fn default() -> Self {
        RefineConfig {
            rot_perturb_deg: 5.0,
            trans_perturb_frac: 0.05,
            seeds: 1,
            stages: vec![
                RefineStage { steps: 50, step_size: 0.1, tau: 0.5 },
                RefineStage { steps: 150, step_size: 0.1, tau: 0.1 },
            ],
            svg: true,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PseudoLabelConfig {
    /// Refinement rounds.
    pub rounds: usize,
    /// Confidence threshold: p ≥ sigma_conf is foreground, p ≤ 1-sigma_conf
    /// background, anything strictly between is uncertain.
    pub sigma_conf: f64,
    /// Maximum relative bounding-box expansion when perturbing boxes.
    pub max_expand: f64,
    /// Per-round segmenter corruption rates (must cover `rounds`).
    pub noise_schedule: Vec<f64>,
    /// Test-time-augmentation scales; each is used unflipped and flipped.
    pub tta_scales: Vec<f64>,
}

impl Default for PseudoLabelConfig {
    fn default() -> Self {
        PseudoLabelConfig {
            rounds: defaults::ROUNDS,
            sigma_conf: defaults::SIGMA_CONF,
            max_expand: defaults::MAX_EXPAND,
            noise_schedule: poseforge_core::synth::DEFAULT_NOISE_SCHEDULE.to_vec(),
            tta_scales: defaults::TTA_SCALES.to_vec(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Recall threshold as a fraction of the model diameter.
    pub threshold_fraction: f64,
    /// Directory of predicted poses (pose JSON per fixture). When absent the
    /// ground-truth poses are evaluated against themselves as a baseline.
    pub predictions: Option<PathBuf>,
    /// Force symmetric (closest-point) matching; default follows the shape.
    pub symmetric: Option<bool>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            threshold_fraction: defaults::RECALL_FRACTION,
            predictions: None,
            symmetric: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckConfig {
    /// Normalized crop size for the dual-scale check.
    pub normalized_size: usize,
    /// Smooth-L1 transition scale as a fraction of object scale.
    pub sigma_scale: f64,
    /// Scenes for the pose-solver Jacobian check (half get pixel noise).
    pub pnp_scenes: usize,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            normalized_size: defaults::NORMALIZED_SIZE,
            sigma_scale: defaults::SIGMA_SCALE,
            pnp_scenes: 8,
        }
    }
}

/// Top-level run configuration. The active command reads its own section;
/// `seed` and `tolerance_profile` apply to every command. The worker-thread
/// count is execution detail (results are independent of it by contract), so
/// it is not part of the resolved configuration echo.
#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub tolerance_profile: ToleranceProfile,
    #[serde(skip_serializing)]
    pub threads: usize,
    pub gen: GenConfig,
    pub solve: SolveConfig,
    pub refine: RefineConfig,
    pub pseudolabel: PseudoLabelConfig,
    pub eval: EvalConfig,
    pub gradcheck: GradcheckConfig,
}

impl RunConfig {
    pub fn load(path: Option<&PathBuf>) -> Result<Self, CliError> {
        let mut config = match path {
            Some(p) => crate::formats::read_json(p)?,
            None => RunConfig::default(),
        };
        if config.seed == 0 && path.is_none() {
            config.seed = 42;
        }
        if config.threads == 0 {
            config.threads = 1;
        }
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.gen.count == 0 {
            return Err(CliError::Config("gen.count must be at least 1".into()));
        }
        if self.gen.depth_range[0] <= 0.0 || self.gen.depth_range[1] < self.gen.depth_range[0] {
            return Err(CliError::Config(format!(
                "gen.depth_range [{}, {}] must satisfy 0 < min <= max",
                self.gen.depth_range[0], self.gen.depth_range[1]
            )));
        }
        if self.refine.stages.is_empty() {
            return Err(CliError::Config("refine.stages must not be empty".into()));
        }
        if self.refine.seeds == 0 {
            return Err(CliError::Config("refine.seeds must be at least 1".into()));
        }
        if self.pseudolabel.noise_schedule.len() < self.pseudolabel.rounds {
            return Err(CliError::Config(format!(
                "pseudolabel.noise_schedule has {} entries but {} rounds are requested",
                self.pseudolabel.noise_schedule.len(),
                self.pseudolabel.rounds
            )));
        }
        if self.pseudolabel.tta_scales.is_empty() {
            return Err(CliError::Config("pseudolabel.tta_scales must not be empty".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid_and_round_trips() {
        let mut config = RunConfig::default();
        config.seed = 42;
        config.threads = 1;
        config.validate().unwrap();
        let text = serde_json::to_string_pretty(&config).unwrap();
        // Thread count is execution detail and must not leak into the echo.
        assert!(!text.contains("threads"));
        let back: RunConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back.seed, 42);
        assert_eq!(back.pseudolabel.rounds, defaults::ROUNDS);
        assert_eq!(back.gen.camera.width, 128);
    }

    #[test]
    fn empty_json_gives_defaults() {
        let config: RunConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(config.gen.count, 4);
        assert_eq!(config.eval.threshold_fraction, defaults::RECALL_FRACTION);
        assert_eq!(config.refine.stages.len(), 2);
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let err = serde_json::from_str::<RunConfig>("{\"sedd\": 7}").unwrap_err();
        assert!(err.to_string().contains("sedd"));
    }

    #[test]
    fn tolerance_profile_parses() {
        assert_eq!(ToleranceProfile::parse("strict").unwrap(), ToleranceProfile::Strict);
        assert!(ToleranceProfile::parse("loose").is_err());
    }
}
