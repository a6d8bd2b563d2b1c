//! Multi-object tracking with one extended Kalman filter per object.
//!
//! The state of a tracklet is its 3D position under a random-walk motion
//! model. Every detection is a 2D pixel measurement of one camera, fused by
//! linearizing the projection at the current belief.
//!
//! Each frame runs, in order: association and measurement updates (cameras
//! in id order), one dynamic step for all tracklets, spawning from the
//! detections no tracklet claimed, removal of stale tracklets, and deletion
//! of young tracklets that converged onto an older one of the same class.

use std::collections::BTreeMap;

use nalgebra::{Matrix2, Matrix3, Vector2, Vector3};
use tracing::{debug, trace};

use crate::camera::{Camera, CameraPose, Ray};
use crate::error::{Error, Result};
use crate::scene_io::{
    merge_streams, ClassTable, Detection, DetectionStream, FrameBatch, Multiplicity, SceneConfig,
    TrajectoryRecord, TrajectoryStep, Tuning,
};
use crate::spawner::{
    apply_support_rule, find_intersections, suppress_near_tracklets, ObservedRay, SpawnConfig,
};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseModel {
    /// Base measurement standard deviation in pixels.
    pub sigma: f64,
    /// Variance (m^2) added to each axis per dynamic step.
    pub process_noise: f64,
}

impl NoiseModel {
    pub fn new(sigma: f64, process_noise: f64) -> Result<Self> {
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::Validation(format!(
                "sigma must be positive, got {sigma}"
            )));
        }
        if !(process_noise >= 0.0 && process_noise.is_finite()) {
            return Err(Error::Validation(format!(
                "process noise must be non-negative, got {process_noise}"
            )));
        }
        Ok(Self {
            sigma,
            process_noise,
        })
    }

    pub fn from_tuning(tuning: &Tuning) -> Result<Self> {
        Self::new(tuning.sigma_px, tuning.process_noise)
    }
}

/// Measurement standard deviation for a detection of the given confidence:
/// `sigma * (2 - confidence)^10`.
pub fn effective_sigma(sigma: f64, confidence: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&confidence) {
        return Err(Error::Validation(format!(
            "confidence must lie in [0, 1], got {confidence}"
        )));
    }
    Ok(sigma * (2.0 - confidence).powi(10))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tracklet {
    pub id: u64,
    pub class_name: String,
    pub state: Vector3<f64>,
    pub covariance: Matrix3<f64>,
    /// Frame index of the last measurement update (or of the spawn).
    pub last_update: i64,
    /// Frame index of the spawn.
    pub birth: i64,
    pub history: Vec<TrajectoryStep>,
}

impl Tracklet {
    pub fn new(
        id: u64,
        class_name: &str,
        position: Vector3<f64>,
        initial_std: f64,
        frame: i64,
    ) -> Self {
        Self {
            id,
            class_name: class_name.to_string(),
            state: position,
            covariance: Matrix3::identity() * initial_std * initial_std,
            last_update: frame,
            birth: frame,
            history: Vec::new(),
        }
    }

    /// Whether the tracklet kept receiving measurements for at least
    /// `probation_frames` frames after its spawn.
    pub fn is_confirmed(&self, probation_frames: u64) -> bool {
        self.last_update - self.birth >= probation_frames as i64
    }

    fn record(&mut self, time: f64) {
        self.history
            .push(TrajectoryStep::new(time, &self.state, &self.covariance));
    }

    pub fn to_record(&self) -> TrajectoryRecord {
        TrajectoryRecord {
            id: self.id,
            class_name: self.class_name.clone(),
            timesteps: self.history.clone(),
        }
    }
}

/// Id of the same-class tracklet closest to `ray`, if within `gate`.
pub fn associate_ray(
    ray: &Ray,
    class_name: &str,
    tracklets: &[Tracklet],
    gate: f64,
) -> Option<u64> {
    tracklets
        .iter()
        .filter(|t| t.class_name == class_name)
        .map(|t| (t.id, ray.distance_to(&t.state)))
        .filter(|(_, d)| *d <= gate)
        .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
        .map(|(id, _)| id)
}

pub fn associate(
    detection: &Detection,
    tracklets: &[Tracklet],
    camera: &Camera,
    gate: f64,
) -> Result<Option<u64>> {
    let ray = camera.unproject(&detection.bbox.center())?;
    Ok(associate_ray(&ray, &detection.class_name, tracklets, gate))
}

fn symmetrize(m: &Matrix3<f64>) -> Matrix3<f64> {
    (m + m.transpose()) * 0.5
}

/// EKF update with the center of `detection` as a pixel measurement.
///
/// Returns `Ok(false)` and leaves the tracklet untouched when its state is
/// behind the camera.
pub fn measurement_step(
    tracklet: &mut Tracklet,
    detection: &Detection,
    camera: &Camera,
    noise: &NoiseModel,
) -> Result<bool> {
    let sigma = effective_sigma(noise.sigma, detection.confidence)?;
    let (predicted, jac) = match (
        camera.project(&tracklet.state),
        camera.jacobians(&tracklet.state),
    ) {
        (Ok(p), Ok(j)) => (p, j),
        (Err(Error::BehindCamera { .. }), _) | (_, Err(Error::BehindCamera { .. })) => {
            debug!(tracklet = tracklet.id, camera = %detection.camera_id, "state behind camera, update skipped");
            return Ok(false);
        }
        (Err(e), _) | (_, Err(e)) => return Err(e),
    };
    let h = jac.wrt_point;
    let p = tracklet.covariance;
    let r = Matrix2::identity() * sigma * sigma;
    let s = h * p * h.transpose() + r;
    let Some(s_inv) = s.try_inverse() else {
        return Ok(false);
    };
    let k = p * h.transpose() * s_inv;
    let innovation: Vector2<f64> = detection.bbox.center().to_vector() - predicted.to_vector();
    let a = Matrix3::identity() - k * h;
    tracklet.state += k * innovation;
    tracklet.covariance = symmetrize(&(a * p * a.transpose() + k * r * k.transpose()));
    Ok(true)
}

/// Constant-position prediction: the covariance grows by `process_noise` per axis.
pub fn dynamic_step(tracklet: &mut Tracklet, noise: &NoiseModel) {
    tracklet.covariance += Matrix3::identity() * noise.process_noise;
}

/// Per-stage counts accumulated over a trial.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct StageCounters {
    pub frames: usize,
    pub detections: usize,
    pub associated: usize,
    pub skipped_updates: usize,
    pub unprojectable: usize,
    pub candidates: usize,
    pub below_support: usize,
    pub suppressed: usize,
    pub spawned: usize,
    pub removed_stale: usize,
    pub deleted_converged: usize,
}

#[derive(Debug, Clone)]
pub struct Tracker {
    cameras: BTreeMap<String, Camera>,
    classes: ClassTable,
    tuning: Tuning,
    spawn: SpawnConfig,
    noise: NoiseModel,
    active: Vec<Tracklet>,
    retired: Vec<Tracklet>,
    next_id: u64,
    last_frame: Option<i64>,
    pub counters: StageCounters,
}

impl Tracker {
    pub fn new(scene: &SceneConfig, poses: &BTreeMap<String, CameraPose>) -> Result<Self> {
        let cameras = poses
            .iter()
            .map(|(id, pose)| {
                pose.validate()?;
                Ok((id.clone(), Camera::new(*pose, scene.intrinsics)))
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            cameras,
            classes: scene.classes.clone(),
            tuning: scene.tuning.clone(),
            spawn: SpawnConfig::new(&scene.tuning, scene.workspace),
            noise: NoiseModel::from_tuning(&scene.tuning)?,
            active: Vec::new(),
            retired: Vec::new(),
            next_id: 0,
            last_frame: None,
            counters: StageCounters::default(),
        })
    }

    pub fn active(&self) -> &[Tracklet] {
        &self.active
    }

    fn camera(&self, id: &str) -> Result<&Camera> {
        self.cameras
            .get(id)
            .ok_or_else(|| Error::UncalibratedCamera(id.to_string()))
    }

    /// Processes one frame. Frames must arrive in increasing index order;
    /// skipped indices receive their dynamic steps.
    pub fn step(&mut self, batch: &FrameBatch) -> Result<()> {
        if let Some(last) = self.last_frame {
            if batch.index <= last {
                return Err(Error::Validation(format!(
                    "frame {} does not follow frame {last}",
                    batch.index
                )));
            }
        }
        let dynamic_steps = self.last_frame.map_or(1, |last| batch.index - last);
        self.last_frame = Some(batch.index);
        self.counters.frames += 1;
        self.counters.detections += batch.detections.len();

        let gate = self.tuning.association_gate;
        let mut leftovers: BTreeMap<String, Vec<ObservedRay>> = BTreeMap::new();
        for detection in &batch.detections {
            let camera = *self.camera(&detection.camera_id)?;
            let ray = match camera.unproject(&detection.bbox.center()) {
                Ok(r) => r,
                Err(e) => {
                    trace!(camera = %detection.camera_id, error = %e, "detection not unprojectable");
                    self.counters.unprojectable += 1;
                    continue;
                }
            };
            match associate_ray(&ray, &detection.class_name, &self.active, gate) {
                Some(id) => {
                    let t = self
                        .active
                        .iter_mut()
                        .find(|t| t.id == id)
                        .expect("active id");
                    if measurement_step(t, detection, &camera, &self.noise)? {
                        t.last_update = batch.index;
                        self.counters.associated += 1;
                    } else {
                        self.counters.skipped_updates += 1;
                    }
                }
                None => leftovers
                    .entry(detection.class_name.clone())
                    .or_default()
                    .push(ObservedRay {
                        camera_id: detection.camera_id.clone(),
                        detection: detection.clone(),
                        ray,
                    }),
            }
        }

        for t in &mut self.active {
            for _ in 0..dynamic_steps {
                dynamic_step(t, &self.noise);
            }
        }

        self.spawn_from(&leftovers, batch.index);
        self.remove_stale(batch.index);
        self.delete_converged(batch.index);

        for t in &mut self.active {
            t.record(batch.time);
        }
        Ok(())
    }

    fn spawn_from(&mut self, leftovers: &BTreeMap<String, Vec<ObservedRay>>, frame: i64) {
        if leftovers.is_empty() {
            return;
        }
        let candidates = find_intersections(leftovers, &self.spawn);
        let found = candidates.len();
        self.counters.candidates += found;
        let supported: Vec<_> = candidates
            .into_iter()
            .filter(|c| {
                let m = self
                    .classes
                    .get(&c.class_name)
                    .copied()
                    .unwrap_or(Multiplicity::Multiple);
                apply_support_rule(c, m)
            })
            .collect();
        self.counters.below_support += found - supported.len();
        let existing: Vec<(&str, Vector3<f64>)> = self
            .active
            .iter()
            .map(|t| (t.class_name.as_str(), t.state))
            .collect();
        let before = supported.len();
        let kept = suppress_near_tracklets(supported, &existing, frame, &self.spawn);
        self.counters.suppressed += before - kept.len();
        for c in kept {
            let id = self.next_id;
            self.next_id += 1;
            debug!(id, class = %c.class_name, frame, support = c.camera_support, "spawned tracklet");
            self.active.push(Tracklet::new(
                id,
                &c.class_name,
                c.position,
                self.tuning.initial_std,
                frame,
            ));
            self.counters.spawned += 1;
        }
    }

    fn remove_stale(&mut self, frame: i64) {
        let window = self.tuning.staleness_frames as i64;
        let (stale, keep): (Vec<_>, Vec<_>) = std::mem::take(&mut self.active)
            .into_iter()
            .partition(|t| frame - t.last_update > window);
        self.active = keep;
        for t in stale {
            debug!(id = t.id, frame, "removed stale tracklet");
            self.counters.removed_stale += 1;
            self.retire(t);
        }
    }

    /// Deletes tracklets still in probation that came within the
    /// convergence distance of an older tracklet of the same class.
    fn delete_converged(&mut self, frame: i64) {
        let probation = self.tuning.probation_frames as i64;
        let radius = self.tuning.convergence_distance;
        let doomed: Vec<u64> = self
            .active
            .iter()
            .filter(|t| frame - t.birth < probation)
            .filter(|t| {
                self.active.iter().any(|o| {
                    o.class_name == t.class_name
                        && (o.birth, o.id) < (t.birth, t.id)
                        && (o.state - t.state).norm() < radius
                })
            })
            .map(|t| t.id)
            .collect();
        if doomed.is_empty() {
            return;
        }
        self.active.retain(|t| !doomed.contains(&t.id));
        self.counters.deleted_converged += doomed.len();
        debug!(?doomed, frame, "deleted converged tracklets");
    }

    fn retire(&mut self, mut t: Tracklet) {
        let fps = self.tuning.frame_rate;
        let cutoff = t.last_update as f64 / fps + 0.5 / fps;
        t.history.retain(|s| s.time <= cutoff);
        self.retired.push(t);
    }

    /// Ends the trial and returns the records of all confirmed tracklets,
    /// ordered by id. History after a tracklet's last measurement is dropped.
    pub fn finalize(mut self) -> Vec<TrajectoryRecord> {
        for t in std::mem::take(&mut self.active) {
            self.retire(t);
        }
        let probation = self.tuning.probation_frames;
        let mut out: Vec<TrajectoryRecord> = self
            .retired
            .iter()
            .filter(|t| t.is_confirmed(probation) && !t.history.is_empty())
            .map(Tracklet::to_record)
            .collect();
        out.sort_by_key(|r| r.id);
        out
    }
}

#[derive(Debug, Clone)]
pub struct TrackOutput {
    pub records: Vec<TrajectoryRecord>,
    pub counters: StageCounters,
}

/// Tracks a whole trial. Every detection stream must have a calibrated pose.
pub fn track_trial(
    streams: &[DetectionStream],
    scene: &SceneConfig,
    poses: &BTreeMap<String, CameraPose>,
) -> Result<TrackOutput> {
    for s in streams {
        if !poses.contains_key(&s.camera_id) {
            return Err(Error::UncalibratedCamera(s.camera_id.clone()));
        }
    }
    let mut tracker = Tracker::new(scene, poses)?;
    for batch in merge_streams(streams, scene.tuning.frame_rate) {
        tracker.step(&batch)?;
    }
    let counters = tracker.counters;
    Ok(TrackOutput {
        records: tracker.finalize(),
        counters,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::CameraIntrinsics;
    use crate::scene_io::BoundingBox;
    use std::f64::consts::FRAC_PI_2;

    fn camera() -> Camera {
        // looking straight down from 2 m
        Camera::new(
            CameraPose::new(Vector3::new(0.0, 0.0, 2.0), 0.0, -FRAC_PI_2, 0.0),
            CameraIntrinsics::hd720(900.0, 0.1, 0.01),
        )
    }

    fn detection_at(camera: &Camera, p: &Vector3<f64>, confidence: f64) -> Detection {
        let px = camera.project(p).unwrap();
        Detection {
            class_name: "cup".into(),
            bbox: BoundingBox {
                x: px.u,
                y: px.v,
                w: 20.0,
                h: 20.0,
            },
            confidence,
            timestamp: 0.0,
            camera_id: "top".into(),
        }
    }

    #[test]
    fn effective_sigma_values() {
        assert_eq!(effective_sigma(3.0, 1.0).unwrap(), 3.0);
        assert_eq!(effective_sigma(1.0, 0.0).unwrap(), 1024.0);
        assert!(effective_sigma(1.0, 1.5).is_err());
        assert!(effective_sigma(1.0, -0.1).is_err());
        assert!(NoiseModel::new(0.0, 0.0).is_err());
        assert!(NoiseModel::new(1.0, -1.0).is_err());
    }

    #[test]
    fn zero_innovation_keeps_state_and_shrinks_covariance() {
        let cam = camera();
        let p = Vector3::new(0.1, 0.2, 0.8);
        let mut t = Tracklet::new(0, "cup", p, 0.1, 0);
        let before = t.covariance.trace();
        let det = detection_at(&cam, &p, 0.9);
        assert!(measurement_step(&mut t, &det, &cam, &NoiseModel::new(3.0, 0.0).unwrap()).unwrap());
        assert!((t.state - p).norm() < 1e-12);
        assert!(t.covariance.trace() < before);
        assert!(t.covariance.cholesky().is_some());
    }

    #[test]
    fn behind_camera_update_is_skipped() {
        let cam = camera();
        let det = detection_at(&cam, &Vector3::new(0.0, 0.0, 0.5), 0.9);
        let mut t = Tracklet::new(0, "cup", Vector3::new(0.0, 0.0, 3.0), 0.1, 0);
        let prior = t.clone();
        assert!(
            !measurement_step(&mut t, &det, &cam, &NoiseModel::new(3.0, 0.0).unwrap()).unwrap()
        );
        assert_eq!(t, prior);
    }

    #[test]
    fn dynamic_step_adds_process_noise() {
        let mut t = Tracklet::new(0, "cup", Vector3::zeros(), 0.1, 0);
        let prior = t.clone();
        dynamic_step(&mut t, &NoiseModel::new(3.0, 0.0).unwrap());
        assert_eq!(t, prior);
        dynamic_step(&mut t, &NoiseModel::new(3.0, 0.01).unwrap());
        assert!((t.covariance.trace() - prior.covariance.trace() - 0.03).abs() < 1e-15);
    }

    #[test]
    fn association_gates_and_breaks_ties_by_id() {
        let ray = Ray::new(Vector3::new(0.0, 0.0, 2.0), -Vector3::z()).unwrap();
        let mk =
            |id, x: f64, class: &str| Tracklet::new(id, class, Vector3::new(x, 0.0, 0.5), 0.1, 0);
        let ts = vec![mk(3, 0.1, "cup"), mk(1, -0.1, "cup"), mk(0, 0.0, "plate")];
        assert_eq!(associate_ray(&ray, "cup", &ts, 0.3), Some(1));
        assert_eq!(associate_ray(&ray, "cup", &ts, 0.05), None);
        assert_eq!(associate_ray(&ray, "bowl", &ts, 1.0), None);
        let ts = vec![mk(3, 1.0, "cup")];
        assert_eq!(associate_ray(&ray, "cup", &ts, 0.3), None);
    }

    #[test]
    fn lower_confidence_moves_state_less() {
        let cam = camera();
        let truth = Vector3::new(0.05, 0.0, 0.8);
        let noise = NoiseModel::new(3.0, 0.0).unwrap();
        let shift = |c: f64| {
            let mut t = Tracklet::new(0, "cup", Vector3::new(0.0, 0.0, 0.8), 0.1, 0);
            measurement_step(&mut t, &detection_at(&cam, &truth, c), &cam, &noise).unwrap();
            t.state.norm_squared().sqrt() - 0.8
        };
        assert!(shift(0.3) < shift(0.6));
        assert!(shift(0.6) < shift(0.9));
    }
}
