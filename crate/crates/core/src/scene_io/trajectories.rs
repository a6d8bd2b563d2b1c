use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use serde::{Deserialize, Serialize};

use super::{read_yaml, write_yaml, SCHEMA_VERSION};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrajectoryStep {
    pub time: f64,
    pub position: [f64; 3],
    /// Row-major 3x3 position covariance in m^2.
    pub covariance: [[f64; 3]; 3],
}

impl TrajectoryStep {
    pub fn new(time: f64, position: &Vector3<f64>, covariance: &Matrix3<f64>) -> Self {
        let mut cov = [[0.0; 3]; 3];
        for (r, row) in cov.iter_mut().enumerate() {
            for (c, v) in row.iter_mut().enumerate() {
                *v = covariance[(r, c)];
            }
        }
        Self {
            time,
            position: [position.x, position.y, position.z],
            covariance: cov,
        }
    }

    pub fn position(&self) -> Vector3<f64> {
        Vector3::from(self.position)
    }

    pub fn covariance(&self) -> Matrix3<f64> {
        Matrix3::from_fn(|r, c| self.covariance[r][c])
    }
}

/// Trajectory of one tracked object.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrajectoryRecord {
    pub id: u64,
    #[serde(rename = "name")]
    pub class_name: String,
    pub timesteps: Vec<TrajectoryStep>,
}

impl TrajectoryRecord {
    pub fn validate(&self) -> Result<()> {
        for pair in self.timesteps.windows(2) {
            if pair[1].time.partial_cmp(&pair[0].time) != Some(std::cmp::Ordering::Greater) {
                return Err(Error::Validation(format!(
                    "tracklet {}: times not strictly increasing at {}",
                    self.id, pair[1].time
                )));
            }
        }
        for step in &self.timesteps {
            if !is_symmetric_psd(&step.covariance()) {
                return Err(Error::Validation(format!(
                    "tracklet {}: covariance at t = {} is not symmetric PSD",
                    self.id, step.time
                )));
            }
        }
        Ok(())
    }

    pub fn start_time(&self) -> Option<f64> {
        self.timesteps.first().map(|s| s.time)
    }
}

pub(crate) fn is_symmetric_psd(m: &Matrix3<f64>) -> bool {
    let scale = m.abs().max().max(f64::MIN_POSITIVE);
    if !m.iter().all(|v| v.is_finite()) || (m - m.transpose()).abs().max() > 1e-12 * scale {
        return false;
    }
    let eig = SymmetricEigen::new(*m);
    eig.eigenvalues.min() >= -1e-12 * scale
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrajectoriesDoc {
    version: u32,
    tracklets: Vec<TrajectoryRecord>,
}

pub fn write_trajectories(path: &Path, records: &[TrajectoryRecord]) -> Result<()> {
    for r in records {
        r.validate()?;
    }
    write_yaml(
        path,
        &TrajectoriesDoc {
            version: SCHEMA_VERSION,
            tracklets: records.to_vec(),
        },
    )
}

pub fn read_trajectories(path: &Path) -> Result<Vec<TrajectoryRecord>> {
    let doc: TrajectoriesDoc = read_yaml(path)?;
    for r in &doc.tracklets {
        r.validate().map_err(|e| Error::parse(path, e))?;
    }
    Ok(doc.tracklets)
}

/// Whitespace separated table with one row per tracklet timestep:
/// `id class time x y z cov_trace`.
pub fn write_plot_data(path: &Path, records: &[TrajectoryRecord]) -> Result<()> {
    let mut out = String::from("# id class time x y z cov_trace\n");
    for r in records {
        for s in &r.timesteps {
            let trace = s.covariance[0][0] + s.covariance[1][1] + s.covariance[2][2];
            let [x, y, z] = s.position;
            let _ = writeln!(
                out,
                "{} {} {} {} {} {} {}",
                r.id, r.class_name, s.time, x, y, z, trace
            );
        }
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}
