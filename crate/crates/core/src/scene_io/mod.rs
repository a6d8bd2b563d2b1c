//! On-disk formats of a trial: detections, annotations, scene configuration,
//! camera poses, trajectories and the trial manifest.
//!
//! Every YAML document is a mapping with a `version` key; unknown keys are
//! rejected.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

mod annotations;
mod detections;
mod manifest;
mod poses;
mod scene;
mod trajectories;

pub use annotations::{read_annotations, write_annotations, AnnotationSet, CameraAnnotations};
pub use detections::{
    merge_streams, read_detections, write_detections, BoundingBox, Detection, DetectionFrame,
    DetectionStream, FrameBatch,
};
pub use manifest::TrialManifest;
pub use poses::{read_poses, write_poses, PoseFile};
pub use scene::{ClassTable, Multiplicity, SceneConfig, TableRig, Tuning, Workspace, ORIGIN};
pub use trajectories::{
    read_trajectories, write_plot_data, write_trajectories, TrajectoryRecord, TrajectoryStep,
};

/// Schema version written to and expected in every file.
pub const SCHEMA_VERSION: u32 = 1;

/// The kinds of per-trial files, used to build canonical file names.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FileKind {
    Detections(String),
    Annotations,
    CameraPoses,
    Trajectories,
    PlotData,
    GroundTruth,
    Scene,
    Manifest,
}

/// Canonical name `sXXXtYY.mocap.objecttracking.<kind>` with zero padded ids.
pub fn trial_file_name(session: u32, trial: u32, kind: &FileKind) -> String {
    let suffix = match kind {
        FileKind::Detections(camera) => format!("{camera}.yolodetections.yaml"),
        FileKind::Annotations => "imageannotations.yaml".into(),
        FileKind::CameraPoses => "cameraposes.yaml".into(),
        FileKind::Trajectories => "3dtrajetories.yaml".into(),
        FileKind::PlotData => "3dtrajetories.plotdata.txt".into(),
        FileKind::GroundTruth => "groundtruth.yaml".into(),
        FileKind::Scene => "scene.yaml".into(),
        FileKind::Manifest => "manifest.yaml".into(),
    };
    format!("s{session:03}t{trial:02}.mocap.objecttracking.{suffix}")
}

#[derive(Deserialize)]
struct VersionProbe {
    version: Option<u32>,
}

pub(crate) fn read_yaml<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    from_yaml_str(path, &text)
}

pub(crate) fn from_yaml_str<T: DeserializeOwned>(path: &Path, text: &str) -> Result<T> {
    // check the version first so that a schema mismatch is reported as such
    if let Ok(probe) = serde_yaml::from_str::<VersionProbe>(text) {
        match probe.version {
            Some(SCHEMA_VERSION) => {}
            Some(v) => {
                return Err(Error::parse(
                    path,
                    format!("unsupported schema version {v} (expected {SCHEMA_VERSION})"),
                ))
            }
            None => return Err(Error::parse(path, "missing `version` key")),
        }
    }
    serde_yaml::from_str(text).map_err(|e| Error::parse(path, e))
}

pub(crate) fn write_yaml<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_yaml::to_string(value).map_err(|e| Error::parse(path, e))?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_names_are_zero_padded() {
        assert_eq!(
            trial_file_name(22, 1, &FileKind::CameraPoses),
            "s022t01.mocap.objecttracking.cameraposes.yaml"
        );
        assert_eq!(
            trial_file_name(5, 12, &FileKind::Detections("front".into())),
            "s005t12.mocap.objecttracking.front.yolodetections.yaml"
        );
        assert_eq!(
            trial_file_name(100, 3, &FileKind::Trajectories),
            "s100t03.mocap.objecttracking.3dtrajetories.yaml"
        );
    }

    #[test]
    fn wrong_version_is_rejected() {
        let err = from_yaml_str::<PoseFile>(
            Path::new("x.yaml"),
            "version: 2\ncameras: {}\ntable_offsets: {}\n",
        )
        .unwrap_err();
        assert!(err.to_string().contains("version 2"));
        let err = from_yaml_str::<PoseFile>(Path::new("x.yaml"), "cameras: {}\n").unwrap_err();
        assert!(err.to_string().contains("version"));
    }
}
