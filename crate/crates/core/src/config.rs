//! Flat, versioned pipeline configuration.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::detection::CodecOptions;
use crate::error::{Error, Result};
use crate::fusion::{FusionConfig, TrackOptions, WeightingPolicy, DEFAULT_FUSION_EPSILON, DEFAULT_GATE_SCALE, DEFAULT_MIN_LENGTH};
use crate::main_root::{ConnectConfig, DEFAULT_MIN_COUNT, DEFAULT_STROKE_WIDTH};
use crate::matching::{VoteMode, DEFAULT_MATCHING_THRESHOLD};
use crate::metrics::MatchCriterion;
use crate::sba::{DampingPolicyKind, DEFAULT_ANGLE_WEIGHT, DEFAULT_SBA_ITERATIONS};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DampingChoice {
    Constant,
    #[default]
    Adaptive,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightingChoice {
    #[default]
    InverseError,
    Softmin,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub schema_version: u32,
    /// Seed for generated scenes and oracle matches.
    pub seed: u64,
    /// Worker threads; 0 uses all cores.
    pub jobs: usize,

    pub objectness_threshold: f64,
    pub nms_iou_threshold: f64,
    pub keypoint_y_uses_ah: bool,

    pub matching_threshold: u32,
    pub vote_smallest_box_only: bool,
    pub oracle_matches: bool,

    pub fusion_weighting: WeightingChoice,
    pub fusion_epsilon: f64,
    pub softmin_temperature: f64,
    pub asymmetric_errors_as_printed: bool,
    pub dist_threshold: f64,
    pub max_view_error_px: f64,
    /// Widen the gates above to this multiple of the median track error; 0 disables.
    pub gate_scale: f64,
    pub min_lateral_length: f64,

    pub sba_iterations: usize,
    pub damping_policy: DampingChoice,
    /// Constant λ, or the starting λ of the adaptive policy.
    pub damping_lambda: f64,
    pub damping_up: f64,
    pub damping_down: f64,
    pub angle_weight: f64,
    /// Hold one translation component of camera 1 fixed during SBA.
    pub sba_fix_scale: bool,

    pub stroke_width: f64,
    pub min_connection_count: usize,
    pub casewise_update: bool,
    pub connect_use_view_masks: bool,
    pub reference_view: usize,

    pub eval_max_px: f64,
    pub eval_diagonal_fraction: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let criterion = MatchCriterion::default();
        Self {
            schema_version: SCHEMA_VERSION,
            seed: 0,
            jobs: 0,
            objectness_threshold: 0.5,
            nms_iou_threshold: 0.9,
            keypoint_y_uses_ah: false,
            matching_threshold: DEFAULT_MATCHING_THRESHOLD,
            vote_smallest_box_only: false,
            oracle_matches: false,
            fusion_weighting: WeightingChoice::InverseError,
            fusion_epsilon: DEFAULT_FUSION_EPSILON,
            softmin_temperature: 1.0,
            asymmetric_errors_as_printed: false,
            dist_threshold: 5.0,
            max_view_error_px: 4.0,
            gate_scale: DEFAULT_GATE_SCALE,
            min_lateral_length: DEFAULT_MIN_LENGTH,
            sba_iterations: DEFAULT_SBA_ITERATIONS,
            damping_policy: DampingChoice::Adaptive,
            damping_lambda: 1e-3,
            damping_up: 10.0,
            damping_down: 10.0,
            angle_weight: DEFAULT_ANGLE_WEIGHT,
            sba_fix_scale: true,
            stroke_width: DEFAULT_STROKE_WIDTH,
            min_connection_count: DEFAULT_MIN_COUNT,
            casewise_update: false,
            connect_use_view_masks: true,
            reference_view: 0,
            eval_max_px: criterion.max_px,
            eval_diagonal_fraction: criterion.diagonal_fraction,
        }
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingInput(path.to_path_buf()),
            _ => Error::Io(e),
        })?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Json(j) => Error::Malformed {
                path: path.to_path_buf(),
                msg: j.to_string(),
            },
            other => other,
        })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: PipelineConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if !(0.0..=1.0).contains(&self.objectness_threshold) || !(0.0..=1.0).contains(&self.nms_iou_threshold) {
            return bad("objectness and NMS thresholds must lie in [0, 1]");
        }
        if self.matching_threshold == 0 {
            return bad("matching_threshold must be at least 1");
        }
        if !(self.fusion_epsilon > 0.0 && self.softmin_temperature > 0.0) {
            return bad("fusion_epsilon and softmin_temperature must be positive");
        }
        if !(self.dist_threshold > 0.0 && self.max_view_error_px > 0.0 && self.min_lateral_length >= 0.0 && self.gate_scale >= 0.0) {
            return bad("fusion thresholds must be positive");
        }
        if self.sba_iterations == 0 {
            return bad("sba_iterations must be at least 1");
        }
        self.damping().validate()?;
        if !(self.angle_weight >= 0.0 && self.angle_weight.is_finite()) {
            return bad("angle_weight must be a non-negative number");
        }
        if !(self.stroke_width > 0.0) || self.min_connection_count == 0 {
            return bad("stroke_width and min_connection_count must be positive");
        }
        self.criterion().validate()
    }

    pub fn codec(&self) -> CodecOptions {
        CodecOptions {
            keypoint_y_uses_ah: self.keypoint_y_uses_ah,
        }
    }

    pub fn vote_mode(&self) -> VoteMode {
        if self.vote_smallest_box_only {
            VoteMode::SmallestBoxOnly
        } else {
            VoteMode::AllContaining
        }
    }

    pub fn fusion(&self) -> FusionConfig {
        FusionConfig {
            weighting: match self.fusion_weighting {
                WeightingChoice::InverseError => WeightingPolicy::InverseError {
                    epsilon: self.fusion_epsilon,
                },
                WeightingChoice::Softmin => WeightingPolicy::Softmin {
                    temperature: self.softmin_temperature,
                },
            },
            track: TrackOptions {
                asymmetric_errors_as_printed: self.asymmetric_errors_as_printed,
            },
            dist_threshold: self.dist_threshold,
            max_view_error_px: self.max_view_error_px,
            gate_scale: self.gate_scale,
            min_length: self.min_lateral_length,
        }
    }

    pub fn damping(&self) -> DampingPolicyKind {
        match self.damping_policy {
            DampingChoice::Constant => DampingPolicyKind::Constant {
                lambda: self.damping_lambda,
            },
            DampingChoice::Adaptive => DampingPolicyKind::Adaptive {
                initial: self.damping_lambda,
                up: self.damping_up,
                down: self.damping_down,
            },
        }
    }

    pub fn connect(&self) -> ConnectConfig {
        ConnectConfig {
            stroke_width: self.stroke_width,
            min_count: self.min_connection_count,
            casewise_update: self.casewise_update,
            use_view_masks: self.connect_use_view_masks,
            reference_view: self.reference_view,
        }
    }

    pub fn criterion(&self) -> MatchCriterion {
        MatchCriterion {
            max_px: self.eval_max_px,
            diagonal_fraction: self.eval_diagonal_fraction,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_rejections() {
        let cfg = PipelineConfig::default();
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(PipelineConfig::from_json(&text).unwrap(), cfg);
        assert_eq!(PipelineConfig::from_json("{}").unwrap(), cfg);
        assert!(matches!(PipelineConfig::from_json(r#"{"bogus": 1}"#), Err(Error::Json(_))));
        assert!(matches!(PipelineConfig::from_json(r#"{"schema_version": 2}"#), Err(Error::Config(_))));
        assert!(PipelineConfig::from_json(r#"{"damping_policy": "constant", "damping_lambda": 1e12}"#).is_ok());
        assert!(PipelineConfig::from_json(r#"{"sba_iterations": 0}"#).is_err());
    }
}
