use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{read_yaml, trial_file_name, write_yaml, FileKind, SCHEMA_VERSION};
use crate::error::{Error, Result};

/// Locations of all inputs and outputs of one trial. Relative paths are
/// resolved against the directory containing the manifest file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrialManifest {
    pub version: u32,
    pub session: u32,
    pub trial: u32,
    pub scene: PathBuf,
    pub annotations: PathBuf,
    /// Camera id -> detection file.
    pub detections: BTreeMap<String, PathBuf>,
    pub output_dir: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_truth: Option<PathBuf>,
}

impl TrialManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let mut m: TrialManifest = read_yaml(path)?;
        let base = path.parent().unwrap_or(Path::new(""));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut m.scene);
        resolve(&mut m.annotations);
        resolve(&mut m.output_dir);
        m.detections.values_mut().for_each(resolve);
        if let Some(gt) = m.ground_truth.as_mut() {
            resolve(gt);
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_yaml(path, self)
    }

    /// Fails with the first referenced input file that does not exist.
    pub fn check_inputs(&self) -> Result<()> {
        let mut inputs: Vec<&Path> = vec![&self.scene, &self.annotations];
        inputs.extend(self.detections.values().map(PathBuf::as_path));
        for p in inputs {
            if !p.is_file() {
                return Err(Error::io(
                    p,
                    std::io::Error::new(
                        std::io::ErrorKind::NotFound,
                        "referenced file does not exist",
                    ),
                ));
            }
        }
        Ok(())
    }

    pub fn output_path(&self, kind: FileKind) -> PathBuf {
        self.output_dir
            .join(trial_file_name(self.session, self.trial, &kind))
    }

    pub fn poses_path(&self) -> PathBuf {
        self.output_path(FileKind::CameraPoses)
    }

    /// A manifest with the canonical file names for all inputs, relative to
    /// the manifest's own directory.
    pub fn canonical(session: u32, trial: u32, cameras: impl IntoIterator<Item = String>) -> Self {
        let name = |k: FileKind| PathBuf::from(trial_file_name(session, trial, &k));
        Self {
            version: SCHEMA_VERSION,
            session,
            trial,
            scene: name(FileKind::Scene),
            annotations: name(FileKind::Annotations),
            detections: cameras
                .into_iter()
                .map(|c| {
                    let p = name(FileKind::Detections(c.clone()));
                    (c, p)
                })
                .collect(),
            output_dir: PathBuf::from("out"),
            ground_truth: Some(name(FileKind::GroundTruth)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_paths_resolve_against_manifest_dir() {
        let dir = tempfile::tempdir().unwrap();
        let m = TrialManifest::canonical(22, 1, ["front".to_string()]);
        let path = dir.path().join("m.yaml");
        m.save(&path).unwrap();
        let loaded = TrialManifest::load(&path).unwrap();
        assert_eq!(
            loaded.scene,
            dir.path().join("s022t01.mocap.objecttracking.scene.yaml")
        );
        assert_eq!(loaded.output_dir, dir.path().join("out"));
        let err = loaded.check_inputs().unwrap_err().to_string();
        assert!(err.contains("scene.yaml"), "{err}");
    }
}
