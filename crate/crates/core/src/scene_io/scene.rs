use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};

use super::{read_yaml, write_yaml, SCHEMA_VERSION};
use crate::camera::{CameraIntrinsics, CameraPose};
use crate::error::{Error, Result};

/// Landmark name reserved for the world origin marker.
pub const ORIGIN: &str = "origin";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Multiplicity {
    /// At most one instance exists in the scene.
    Unique,
    Multiple,
}

pub type ClassTable = BTreeMap<String, Multiplicity>;

/// A horizontal rectangle-ish fixture (table, counter) whose four corners are
/// annotated in the images. Corners are nominal world `(x, y)` positions; the
/// calibration solves for a planar offset of the whole rig.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TableRig {
    pub name: String,
    pub corners: Vec<[f64; 2]>,
    /// Height of the top surface in meters.
    pub height: f64,
}

impl TableRig {
    pub fn corner(&self, index: usize, offset: Vector2<f64>) -> Option<Vector3<f64>> {
        self.corners
            .get(index)
            .map(|c| Vector3::new(c[0] + offset.x, c[1] + offset.y, self.height))
    }

    pub fn center(&self) -> Vector3<f64> {
        let n = self.corners.len().max(1) as f64;
        let (sx, sy) = self
            .corners
            .iter()
            .fold((0.0, 0.0), |(x, y), c| (x + c[0], y + c[1]));
        Vector3::new(sx / n, sy / n, self.height)
    }
}

/// Axis-aligned box bounding the tracked volume.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Workspace {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Workspace {
    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }
}

impl Default for Workspace {
    fn default() -> Self {
        Self {
            min: [-4.0, -4.0, -0.5],
            max: [4.0, 4.0, 3.0],
        }
    }
}

/// Thresholds of the calibration, spawner and tracker. Every field has a
/// default so configuration files only need to list overrides.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Tuning {
    pub frame_rate: f64,

    /// Max distance (m) between a ray and an intersection point it supports.
    pub ray_proximity: f64,
    /// Candidates closer than this (m) to a same-class tracklet are not spawned.
    pub suppression_radius: f64,
    /// Multiplier of `suppression_radius` on relaxation frames.
    pub relaxation_factor: f64,
    /// Every `relaxation_period`-th frame uses the relaxed suppression radius.
    pub relaxation_period: u64,
    pub spawn_merge_radius: f64,
    /// Rays whose directions differ by less than this (degrees) count as one.
    pub parallel_angle_deg: f64,

    /// Base pixel measurement noise.
    pub sigma_px: f64,
    /// Variance (m^2) added to each axis per dynamic step.
    pub process_noise: f64,
    pub association_gate: f64,
    pub staleness_frames: u64,
    pub probation_frames: u64,
    pub convergence_distance: f64,
    /// Standard deviation (m) per axis of a freshly spawned tracklet.
    pub initial_std: f64,

    pub calib_max_iterations: usize,
    pub calib_loss_tolerance: f64,
    pub calib_gradient_tolerance: f64,
    /// A solve whose final RMS (px) is above this is reported as not converged.
    pub calib_rms_threshold: f64,
    pub calib_patience: usize,
    pub calib_behind_penalty: f64,
    pub calib_min_points: usize,
}

impl Default for Tuning {
    fn default() -> Self {
        Self {
            frame_rate: 30.0,
            ray_proximity: 0.10,
            suppression_radius: 0.15,
            relaxation_factor: 0.15,
            relaxation_period: 100,
            spawn_merge_radius: 0.10,
            parallel_angle_deg: 5.0,
            sigma_px: 3.0,
            process_noise: 0.02 * 0.02,
            association_gate: 0.3,
            staleness_frames: 30,
            probation_frames: 30,
            convergence_distance: 0.05,
            initial_std: 0.10,
            calib_max_iterations: 500,
            calib_loss_tolerance: 1e-8,
            calib_gradient_tolerance: 1e-8,
            calib_rms_threshold: 5.0,
            calib_patience: 20,
            calib_behind_penalty: 1e4,
            calib_min_points: 3,
        }
    }
}

impl Tuning {
    /// Applies a `key=value` override, where `key` is a field name.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let mut map = match serde_yaml::to_value(&*self) {
            Ok(serde_yaml::Value::Mapping(m)) => m,
            _ => unreachable!("tuning serializes to a mapping"),
        };
        let k = serde_yaml::Value::String(key.to_string());
        if !map.contains_key(&k) {
            return Err(Error::Validation(format!("unknown tuning key `{key}`")));
        }
        let v: serde_yaml::Value = serde_yaml::from_str(value)
            .map_err(|e| Error::Validation(format!("bad value for `{key}`: {e}")))?;
        map.insert(k, v);
        *self = serde_yaml::from_value(serde_yaml::Value::Mapping(map))
            .map_err(|e| Error::Validation(format!("bad value for `{key}`: {e}")))?;
        Ok(())
    }

    pub fn parallel_angle(&self) -> f64 {
        self.parallel_angle_deg.to_radians()
    }

    pub fn frame_index(&self, timestamp: f64) -> i64 {
        (timestamp * self.frame_rate).round() as i64
    }
}

/// World geometry and configuration shared by all stages of a trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneConfig {
    pub version: u32,
    pub intrinsics: CameraIntrinsics,
    /// World position of the origin marker.
    #[serde(default)]
    pub origin: [f64; 3],
    pub rigs: Vec<TableRig>,
    pub classes: ClassTable,
    #[serde(default)]
    pub workspace: Workspace,
    pub initial_guess: BTreeMap<String, CameraPose>,
    #[serde(default)]
    pub tuning: Tuning,
}

impl SceneConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let scene: SceneConfig = read_yaml(path)?;
        scene
            .validate()
            .map_err(|e| Error::parse(path, e.to_string()))?;
        Ok(scene)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_yaml(path, self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != SCHEMA_VERSION {
            return Err(Error::Validation(format!(
                "unsupported version {}",
                self.version
            )));
        }
        self.intrinsics.validate()?;
        for rig in &self.rigs {
            if rig.corners.len() != 4 {
                return Err(Error::Validation(format!(
                    "rig `{}` has {} corners, expected 4",
                    rig.name,
                    rig.corners.len()
                )));
            }
            if rig.name == ORIGIN {
                return Err(Error::Validation(format!(
                    "rig name `{ORIGIN}` is reserved"
                )));
            }
        }
        let mut names: Vec<_> = self.rigs.iter().map(|r| &r.name).collect();
        names.sort();
        names.dedup();
        if names.len() != self.rigs.len() {
            return Err(Error::Validation("duplicate rig names".into()));
        }
        for pose in self.initial_guess.values() {
            pose.validate()?;
        }
        Ok(())
    }

    pub fn origin(&self) -> Vector3<f64> {
        Vector3::from(self.origin)
    }

    pub fn rig(&self, name: &str) -> Option<&TableRig> {
        self.rigs.iter().find(|r| r.name == name)
    }

    pub fn multiplicity(&self, class_name: &str) -> Option<Multiplicity> {
        self.classes.get(class_name).copied()
    }
}
