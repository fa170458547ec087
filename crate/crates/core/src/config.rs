//! Flat key = value run configuration. One file drives every stage so a run
//! is reproducible from the config plus a seed; unknown keys are rejected
//! instead of silently ignored.

use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::features::NmsParams;
use crate::matcher_vo::{MatchParams, RansacConfig, VoParams};
use crate::model::{HingeParams, LossWeights, TrainConfig};
use crate::supervision::SupervisionConfig;
use crate::synthscene::{example_rig, SceneSpec};
use crate::geometry::StereoRig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("line {0}: expected key = value, got {1:?}")]
    BadLine(usize, String),
    #[error("line {0}: unknown key {1:?}")]
    UnknownKey(usize, String),
    #[error("line {0}: duplicate key {1:?}")]
    DuplicateKey(usize, String),
    #[error("line {0}: bad value {2:?} for {1}")]
    BadValue(usize, String, String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// Every tunable of the pipeline with its default. Field order mirrors the
/// stage order: scene, rig, matching, odometry, labeling, network, training,
/// evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    /// Master seed; the command line can override it without editing the
    /// file.
    pub seed: u64,
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    /// Forward step between consecutive frames, meters.
    pub traj_step: f64,
    /// Textured landmarks painted onto the scene planes.
    pub landmarks: usize,
    // Optional rig overrides; unset fields follow the default rig for the
    // configured image size.
    pub fx: Option<f64>,
    pub fy: Option<f64>,
    pub cx: Option<f64>,
    pub cy: Option<f64>,
    pub baseline: Option<f64>,
    pub match_ratio: f64,
    pub mutual: bool,
    pub stereo_band: f64,
    pub min_disparity: f64,
    pub ransac_iterations: usize,
    pub ransac_inlier_px: f64,
    pub ransac_min_inliers: usize,
    pub nms_radius: usize,
    pub nms_threshold: f64,
    pub nms_max: usize,
    pub tau_px: f64,
    pub l_min: usize,
    pub stereo_tau: f64,
    pub eps_cell: f64,
    pub descriptor_dim: usize,
    pub step_size: f64,
    pub momentum: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub m_p: f64,
    pub m_n: f64,
    pub lambda_d: f64,
    pub w_i: f64,
    pub w_i_warped: f64,
    pub w_pk: f64,
    pub w_d: f64,
    /// Self-supervision rounds for the closed-loop trainer.
    pub rounds: usize,
    /// Pixel tolerance when scoring detector repeatability.
    pub repeat_rho: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 7,
            width: 128,
            height: 96,
            frames: 8,
            traj_step: 0.05,
            landmarks: 140,
            fx: None,
            fy: None,
            cx: None,
            cy: None,
            baseline: None,
            match_ratio: 0.8,
            mutual: true,
            stereo_band: 1.0,
            min_disparity: 0.5,
            ransac_iterations: 200,
            ransac_inlier_px: 2.0,
            ransac_min_inliers: 12,
            nms_radius: 4,
            nms_threshold: 0.015,
            nms_max: 500,
            tau_px: 1.0,
            l_min: 3,
            stereo_tau: 1.0,
            eps_cell: 8.0,
            descriptor_dim: 64,
            step_size: 1e-3,
            momentum: 0.9,
            steps: 100,
            batch_size: 2,
            m_p: 1.0,
            m_n: 0.2,
            lambda_d: 250.0,
            w_i: 1.0,
            w_i_warped: 1.0,
            w_pk: 0.25,
            w_d: 0.5,
            rounds: 1,
            repeat_rho: 2.0,
        }
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<RunConfig, ConfigError> {
        Self::parse(&fs::read_to_string(path)?)
    }

    /// Lines are `key = value`; blank lines and `#` comments are skipped.
    pub fn parse(text: &str) -> Result<RunConfig, ConfigError> {
        let mut cfg = RunConfig::default();
        let mut seen = std::collections::BTreeSet::new();
        for (i, raw) in text.lines().enumerate() {
            let lineno = i + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| ConfigError::BadLine(lineno, line.to_string()))?;
            let key = key.trim();
            let value = value.trim();
            if !seen.insert(key.to_string()) {
                return Err(ConfigError::DuplicateKey(lineno, key.to_string()));
            }
            cfg.assign(lineno, key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn assign(&mut self, lineno: usize, key: &str, value: &str) -> Result<(), ConfigError> {
        fn num<T: std::str::FromStr>(
            lineno: usize,
            key: &str,
            value: &str,
        ) -> Result<T, ConfigError> {
            value
                .parse()
                .map_err(|_| ConfigError::BadValue(lineno, key.to_string(), value.to_string()))
        }
        match key {
            "seed" => self.seed = num(lineno, key, value)?,
            "width" => self.width = num(lineno, key, value)?,
            "height" => self.height = num(lineno, key, value)?,
            "frames" => self.frames = num(lineno, key, value)?,
            "traj_step" => self.traj_step = num(lineno, key, value)?,
            "landmarks" => self.landmarks = num(lineno, key, value)?,
            "fx" => self.fx = Some(num(lineno, key, value)?),
            "fy" => self.fy = Some(num(lineno, key, value)?),
            "cx" => self.cx = Some(num(lineno, key, value)?),
            "cy" => self.cy = Some(num(lineno, key, value)?),
            "baseline" => self.baseline = Some(num(lineno, key, value)?),
            "match_ratio" => self.match_ratio = num(lineno, key, value)?,
            "mutual" => self.mutual = num(lineno, key, value)?,
            "stereo_band" => self.stereo_band = num(lineno, key, value)?,
            "min_disparity" => self.min_disparity = num(lineno, key, value)?,
            "ransac_iterations" => self.ransac_iterations = num(lineno, key, value)?,
            "ransac_inlier_px" => self.ransac_inlier_px = num(lineno, key, value)?,
            "ransac_min_inliers" => self.ransac_min_inliers = num(lineno, key, value)?,
            "nms_radius" => self.nms_radius = num(lineno, key, value)?,
            "nms_threshold" => self.nms_threshold = num(lineno, key, value)?,
            "nms_max" => self.nms_max = num(lineno, key, value)?,
            "tau_px" => self.tau_px = num(lineno, key, value)?,
            "l_min" => self.l_min = num(lineno, key, value)?,
            "stereo_tau" => self.stereo_tau = num(lineno, key, value)?,
            "eps_cell" => self.eps_cell = num(lineno, key, value)?,
            "descriptor_dim" => self.descriptor_dim = num(lineno, key, value)?,
            "step_size" => self.step_size = num(lineno, key, value)?,
            "momentum" => self.momentum = num(lineno, key, value)?,
            "steps" => self.steps = num(lineno, key, value)?,
            "batch_size" => self.batch_size = num(lineno, key, value)?,
            "m_p" => self.m_p = num(lineno, key, value)?,
            "m_n" => self.m_n = num(lineno, key, value)?,
            "lambda_d" => self.lambda_d = num(lineno, key, value)?,
            "w_i" => self.w_i = num(lineno, key, value)?,
            "w_i_warped" => self.w_i_warped = num(lineno, key, value)?,
            "w_pk" => self.w_pk = num(lineno, key, value)?,
            "w_d" => self.w_d = num(lineno, key, value)?,
            "rounds" => self.rounds = num(lineno, key, value)?,
            "repeat_rho" => self.repeat_rho = num(lineno, key, value)?,
            _ => return Err(ConfigError::UnknownKey(lineno, key.to_string())),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.width % 8 != 0 || self.height % 8 != 0 || self.width < 16 || self.height < 16 {
            return Err(ConfigError::Invalid(format!(
                "image size {}x{} must be multiples of 8, at least 16",
                self.width, self.height
            )));
        }
        if self.frames == 0 {
            return Err(ConfigError::Invalid("frames must be positive".into()));
        }
        if self.landmarks == 0 {
            return Err(ConfigError::Invalid("landmarks must be positive".into()));
        }
        if !(self.match_ratio > 0.0 && self.match_ratio <= 1.0) {
            return Err(ConfigError::Invalid("match_ratio must be in (0, 1]".into()));
        }
        if self.descriptor_dim == 0 {
            return Err(ConfigError::Invalid("descriptor_dim must be positive".into()));
        }
        if !(self.repeat_rho > 0.0) {
            return Err(ConfigError::Invalid("repeat_rho must be positive".into()));
        }
        if self.rounds == 0 {
            return Err(ConfigError::Invalid("rounds must be positive".into()));
        }
        self.supervision().validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.train_config(0).validate().map_err(ConfigError::Invalid)?;
        Ok(())
    }

    pub fn scene_spec(&self, seed: u64) -> SceneSpec {
        let mut spec = SceneSpec::example(seed, self.width, self.height);
        spec.landmark_count = self.landmarks;
        spec
    }

    pub fn rig(&self) -> StereoRig {
        let mut rig = example_rig(self.width, self.height);
        if let Some(v) = self.fx {
            rig.intrinsics.fx = v;
        }
        if let Some(v) = self.fy {
            rig.intrinsics.fy = v;
        }
        if let Some(v) = self.cx {
            rig.intrinsics.cx = v;
        }
        if let Some(v) = self.cy {
            rig.intrinsics.cy = v;
        }
        if let Some(v) = self.baseline {
            rig.baseline = v;
        }
        rig
    }

    pub fn vo_params(&self, seed: u64) -> VoParams {
        VoParams {
            match_params: MatchParams { ratio: self.match_ratio, mutual: self.mutual },
            stereo_band: self.stereo_band,
            min_disparity: self.min_disparity,
            ransac: RansacConfig {
                iterations: self.ransac_iterations,
                inlier_px: self.ransac_inlier_px,
                min_inliers: self.ransac_min_inliers,
                seed,
            },
        }
    }

    pub fn nms(&self) -> NmsParams {
        NmsParams { radius: self.nms_radius, threshold: self.nms_threshold, max_n: self.nms_max }
    }

    pub fn supervision(&self) -> SupervisionConfig {
        SupervisionConfig {
            tau_px: self.tau_px,
            l_min: self.l_min,
            stereo_tau: self.stereo_tau,
            eps_cell: self.eps_cell,
        }
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            step_size: self.step_size,
            momentum: self.momentum,
            steps: self.steps,
            batch_size: self.batch_size,
            seed,
            weights: LossWeights {
                w_i: self.w_i,
                w_i_warped: self.w_i_warped,
                w_pk: self.w_pk,
                w_d: self.w_d,
            },
            hinge: HingeParams { m_p: self.m_p, m_n: self.m_n, lambda_d: self.lambda_d },
            eps_cell: self.eps_cell,
        }
    }

    /// Full config with every key spelled out at its default, ready to edit.
    pub fn example_text() -> String {
        let d = RunConfig::default();
        let mut s = String::from("# pipeline configuration, key = value per line\n\n");
        s.push_str("# master seed (command line --seed overrides)\n");
        s.push_str(&format!("seed = {}\n", d.seed));
        s.push_str("# synthetic scene and trajectory\n");
        s.push_str(&format!("width = {}\n", d.width));
        s.push_str(&format!("height = {}\n", d.height));
        s.push_str(&format!("frames = {}\n", d.frames));
        s.push_str(&format!("traj_step = {}\n", d.traj_step));
        s.push_str(&format!("landmarks = {}\n", d.landmarks));
        s.push_str("# stereo rig overrides (defaults follow the image size)\n");
        s.push_str("# fx = 100.0\n# fy = 100.0\n# cx = 63.5\n# cy = 47.5\n# baseline = 0.12\n");
        s.push_str("# descriptor matching\n");
        s.push_str(&format!("match_ratio = {}\n", d.match_ratio));
        s.push_str(&format!("mutual = {}\n", d.mutual));
        s.push_str("# stereo matching and odometry\n");
        s.push_str(&format!("stereo_band = {}\n", d.stereo_band));
        s.push_str(&format!("min_disparity = {}\n", d.min_disparity));
        s.push_str(&format!("ransac_iterations = {}\n", d.ransac_iterations));
        s.push_str(&format!("ransac_inlier_px = {}\n", d.ransac_inlier_px));
        s.push_str(&format!("ransac_min_inliers = {}\n", d.ransac_min_inliers));
        s.push_str("# keypoint decoding\n");
        s.push_str(&format!("nms_radius = {}\n", d.nms_radius));
        s.push_str(&format!("nms_threshold = {}\n", d.nms_threshold));
        s.push_str(&format!("nms_max = {}\n", d.nms_max));
        s.push_str("# track scoring\n");
        s.push_str(&format!("tau_px = {}\n", d.tau_px));
        s.push_str(&format!("l_min = {}\n", d.l_min));
        s.push_str(&format!("stereo_tau = {}\n", d.stereo_tau));
        s.push_str(&format!("eps_cell = {}\n", d.eps_cell));
        s.push_str("# network and training\n");
        s.push_str(&format!("descriptor_dim = {}\n", d.descriptor_dim));
        s.push_str(&format!("step_size = {}\n", d.step_size));
        s.push_str(&format!("momentum = {}\n", d.momentum));
        s.push_str(&format!("steps = {}\n", d.steps));
        s.push_str(&format!("batch_size = {}\n", d.batch_size));
        s.push_str(&format!("m_p = {}\n", d.m_p));
        s.push_str(&format!("m_n = {}\n", d.m_n));
        s.push_str(&format!("lambda_d = {}\n", d.lambda_d));
        s.push_str(&format!("w_i = {}\n", d.w_i));
        s.push_str(&format!("w_i_warped = {}\n", d.w_i_warped));
        s.push_str(&format!("w_pk = {}\n", d.w_pk));
        s.push_str(&format!("w_d = {}\n", d.w_d));
        s.push_str(&format!("rounds = {}\n", d.rounds));
        s.push_str("# evaluation\n");
        s.push_str(&format!("repeat_rho = {}\n", d.repeat_rho));
        s
    }
}
