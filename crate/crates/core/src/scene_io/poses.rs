use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{read_yaml, write_yaml, SCHEMA_VERSION};
use crate::camera::CameraPose;
use crate::error::{Error, Result};

/// Solved camera poses of a trial and the planar offsets of each table rig
/// relative to its nominal position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoseFile {
    pub version: u32,
    pub cameras: BTreeMap<String, CameraPose>,
    pub table_offsets: BTreeMap<String, [f64; 2]>,
}

impl PoseFile {
    pub fn new(
        cameras: BTreeMap<String, CameraPose>,
        table_offsets: BTreeMap<String, [f64; 2]>,
    ) -> Self {
        Self {
            version: SCHEMA_VERSION,
            cameras,
            table_offsets,
        }
    }
}

pub fn write_poses(
    path: &Path,
    poses: &BTreeMap<String, CameraPose>,
    table_offsets: &BTreeMap<String, [f64; 2]>,
) -> Result<()> {
    for pose in poses.values() {
        pose.validate()?;
    }
    write_yaml(path, &PoseFile::new(poses.clone(), table_offsets.clone()))
}

pub fn read_poses(path: &Path) -> Result<PoseFile> {
    let file: PoseFile = read_yaml(path)?;
    for (camera, pose) in &file.cameras {
        pose.validate()
            .map_err(|e| Error::parse(path, format!("camera `{camera}`: {e}")))?;
    }
    Ok(file)
}
