use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{from_yaml_str, write_yaml, SCHEMA_VERSION};
use crate::error::{Error, Result};

/// Landmark name -> annotated pixel per landmark point. For a table rig the
/// list follows the rig's corner order and `None` marks a corner that is not
/// visible; the origin marker has a single entry.
pub type CameraAnnotations = BTreeMap<String, Vec<Option<[f64; 2]>>>;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationSet {
    pub cameras: BTreeMap<String, CameraAnnotations>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AnnotationsDoc {
    version: u32,
    cameras: BTreeMap<String, CameraAnnotations>,
}

impl AnnotationSet {
    /// Number of annotated (non-missing) points over all cameras.
    pub fn point_count(&self) -> usize {
        self.cameras.values().map(count_points).sum()
    }

    pub fn validate(&self) -> Result<()> {
        for (camera, landmarks) in &self.cameras {
            for (name, points) in landmarks {
                if points.iter().all(Option::is_none) {
                    return Err(Error::Validation(format!(
                        "camera `{camera}`: landmark `{name}` has no annotated position"
                    )));
                }
                if points.iter().flatten().flatten().any(|v| !v.is_finite()) {
                    return Err(Error::Validation(format!(
                        "camera `{camera}`: landmark `{name}` has a non-finite position"
                    )));
                }
            }
        }
        Ok(())
    }
}

pub(crate) fn count_points(landmarks: &CameraAnnotations) -> usize {
    landmarks.values().flatten().filter(|p| p.is_some()).count()
}

pub fn read_annotations(path: &Path) -> Result<AnnotationSet> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    // a plain map deserialization keeps the last of duplicated camera keys
    serde_yaml::from_str::<serde_yaml::Value>(&text).map_err(|e| Error::parse(path, e))?;
    let doc: AnnotationsDoc = from_yaml_str(path, &text)?;
    let set = AnnotationSet {
        cameras: doc.cameras,
    };
    set.validate().map_err(|e| Error::parse(path, e))?;
    Ok(set)
}

pub fn write_annotations(path: &Path, set: &AnnotationSet) -> Result<()> {
    write_yaml(
        path,
        &AnnotationsDoc {
            version: SCHEMA_VERSION,
            cameras: set.cameras.clone(),
        },
    )
}
