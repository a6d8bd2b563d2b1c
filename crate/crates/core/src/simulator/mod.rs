//! Synthetic trials with known ground truth.
//!
//! A [`SyntheticScenario`] describes true camera poses, table offsets and
//! object motions. Rendering projects the truth through the camera model and
//! perturbs it with Gaussian pixel noise, dropout and false positives. All
//! randomness comes from a seeded ChaCha generator, so a scenario always
//! renders to identical files.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::camera::{Camera, CameraPose, PixelPoint};
use crate::error::{Error, Result};
use crate::scene_io::{
    self, write_annotations, write_detections, write_trajectories, AnnotationSet, BoundingBox,
    Detection, DetectionFrame, DetectionStream, FileKind, SceneConfig, TrajectoryRecord,
    TrajectoryStep, TrialManifest, ORIGIN, SCHEMA_VERSION,
};

pub mod reference;
mod score;

pub use score::{score_trajectories, ObjectScore, TrackingScore, DEFAULT_MATCH_RADIUS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Waypoint {
    pub time: f64,
    pub position: [f64; 3],
}

/// An object following a piecewise-linear path through its waypoints. It
/// rests at the first waypoint before it and at the last one after it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimObject {
    #[serde(rename = "name")]
    pub class_name: String,
    pub waypoints: Vec<Waypoint>,
    /// `[start, end)` time intervals during which no camera sees the object.
    #[serde(default)]
    pub hidden: Vec<[f64; 2]>,
}

impl SimObject {
    pub fn position(&self, t: f64) -> Vector3<f64> {
        let w = &self.waypoints;
        let first = &w[0];
        if t <= first.time {
            return Vector3::from(first.position);
        }
        for pair in w.windows(2) {
            let (a, b) = (&pair[0], &pair[1]);
            if t <= b.time {
                let s = if b.time > a.time {
                    (t - a.time) / (b.time - a.time)
                } else {
                    1.0
                };
                return Vector3::from(a.position).lerp(&Vector3::from(b.position), s);
            }
        }
        Vector3::from(w[w.len() - 1].position)
    }

    pub fn is_hidden(&self, t: f64) -> bool {
        self.hidden.iter().any(|[a, b]| t >= *a && t < *b)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticScenario {
    pub version: u32,
    pub session: u32,
    pub trial: u32,
    pub seed: u64,
    /// Seconds.
    pub duration: f64,
    pub fps: f64,
    /// Standard deviation (px) of detection centers.
    pub pixel_noise: f64,
    /// Probability that a visible object is not detected in a frame.
    pub dropout: f64,
    /// Probability per camera and frame of one spurious detection.
    pub false_positive_rate: f64,
    /// Standard deviation (px) of annotated landmark positions.
    pub annotation_noise: f64,
    pub true_confidence: [f64; 2],
    pub false_confidence: [f64; 2],
    /// Object extent (m) used for bounding box sizes.
    pub object_size: f64,
    pub scene: SceneConfig,
    /// True camera poses.
    pub cameras: BTreeMap<String, CameraPose>,
    /// True table offsets.
    pub table_offsets: BTreeMap<String, [f64; 2]>,
    pub objects: Vec<SimObject>,
}

impl SyntheticScenario {
    pub fn load(path: &Path) -> Result<Self> {
        let s: SyntheticScenario = scene_io::read_yaml(path)?;
        s.validate().map_err(|e| Error::parse(path, e))?;
        Ok(s)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        scene_io::write_yaml(path, self)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Validation(m));
        if !(self.fps > 0.0 && self.fps.is_finite()) {
            return bad(format!("fps must be positive, got {}", self.fps));
        }
        if !(self.duration >= 0.0 && self.duration.is_finite()) {
            return bad(format!("invalid duration {}", self.duration));
        }
        for (name, p) in [
            ("dropout", self.dropout),
            ("false_positive_rate", self.false_positive_rate),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} must lie in [0, 1], got {p}"));
            }
        }
        if !(self.pixel_noise >= 0.0 && self.annotation_noise >= 0.0) {
            return bad("noise levels must be non-negative".into());
        }
        for range in [self.true_confidence, self.false_confidence] {
            if !(0.0 <= range[0] && range[0] <= range[1] && range[1] <= 1.0) {
                return bad(format!("confidence range {range:?} not within [0, 1]"));
            }
        }
        self.scene.validate()?;
        for pose in self.cameras.values() {
            pose.validate()?;
        }
        for (i, o) in self.objects.iter().enumerate() {
            if o.waypoints.is_empty() {
                return bad(format!("object {i} has no waypoints"));
            }
            if o.waypoints
                .iter()
                .flat_map(|w| w.position.iter().chain([&w.time]))
                .any(|v| !v.is_finite())
            {
                return bad(format!("object {i} has non-finite waypoints"));
            }
            if o.waypoints.windows(2).any(|w| w[1].time < w[0].time) {
                return bad(format!("object {i} waypoints are not ordered by time"));
            }
            if !self.scene.classes.contains_key(&o.class_name) {
                return bad(format!("object {i} has unknown class `{}`", o.class_name));
            }
        }
        Ok(())
    }

    pub fn frame_count(&self) -> usize {
        (self.duration * self.fps).round() as usize + 1
    }

    pub fn frame_time(&self, frame: usize) -> f64 {
        frame as f64 / self.fps
    }

    fn cameras(&self) -> Vec<(String, Camera)> {
        self.cameras
            .iter()
            .map(|(id, pose)| (id.clone(), Camera::new(*pose, self.scene.intrinsics)))
            .collect()
    }

    /// Pixel position of `point` if it is in front of the camera and inside the image.
    fn visible_pixel(&self, camera: &Camera, point: &Vector3<f64>) -> Option<PixelPoint> {
        camera
            .project(point)
            .ok()
            .filter(|px| self.scene.intrinsics.contains(px))
    }

    /// Whether `object` is visible from `camera_id` at time `t`.
    pub fn is_visible(&self, object: &SimObject, camera_id: &str, t: f64) -> bool {
        let Some(pose) = self.cameras.get(camera_id) else {
            return false;
        };
        !object.is_hidden(t)
            && self
                .visible_pixel(
                    &Camera::new(*pose, self.scene.intrinsics),
                    &object.position(t),
                )
                .is_some()
    }

    /// Copy of the scenario without one camera.
    pub fn without_camera(&self, camera_id: &str) -> Self {
        let mut s = self.clone();
        s.cameras.remove(camera_id);
        s
    }
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

const DETECTION_STREAM: u64 = 1;
const ANNOTATION_STREAM: u64 = 2;

/// Output of [`render_detections`].
#[derive(Debug, Clone)]
pub struct RenderedDetections {
    /// One stream per camera, ordered by camera id.
    pub streams: Vec<DetectionStream>,
    /// Exact object positions at every frame, with zero covariance.
    pub ground_truth: Vec<TrajectoryRecord>,
    /// Objects that no camera sees at any frame.
    pub never_visible: Vec<usize>,
}

pub fn render_detections(scenario: &SyntheticScenario) -> Result<RenderedDetections> {
    scenario.validate()?;
    let mut rng = rng_for(scenario.seed, DETECTION_STREAM);
    let noise =
        Normal::new(0.0, scenario.pixel_noise).map_err(|e| Error::Validation(e.to_string()))?;
    let cameras = scenario.cameras();
    let [w, h] = scenario.scene.intrinsics.image_size;
    let object_classes: Vec<&str> = {
        let mut c: Vec<&str> = scenario
            .objects
            .iter()
            .map(|o| o.class_name.as_str())
            .collect();
        c.sort();
        c.dedup();
        c
    };

    let mut streams: Vec<DetectionStream> = cameras
        .iter()
        .map(|(id, _)| DetectionStream {
            camera_id: id.clone(),
            frames: Vec::with_capacity(scenario.frame_count()),
            skipped_unknown: 0,
        })
        .collect();
    let mut seen = vec![false; scenario.objects.len()];

    for frame in 0..scenario.frame_count() {
        let t = scenario.frame_time(frame);
        for ((camera_id, camera), stream) in cameras.iter().zip(streams.iter_mut()) {
            let mut detections = Vec::new();
            for (i, object) in scenario.objects.iter().enumerate() {
                if object.is_hidden(t) {
                    continue;
                }
                let position = object.position(t);
                let Some(px) = scenario.visible_pixel(camera, &position) else {
                    continue;
                };
                seen[i] = true;
                if rng.random::<f64>() < scenario.dropout {
                    continue;
                }
                let depth = camera.to_camera_frame(&position).z;
                let size = scenario.scene.intrinsics.focal_length * scenario.object_size / depth;
                let (du, dv) = (noise.sample(&mut rng), noise.sample(&mut rng));
                let conf = uniform(&mut rng, scenario.true_confidence);
                detections.push(Detection {
                    class_name: object.class_name.clone(),
                    bbox: BoundingBox {
                        x: px.u + du,
                        y: px.v + dv,
                        w: size,
                        h: size,
                    },
                    confidence: conf,
                    timestamp: t,
                    camera_id: camera_id.clone(),
                });
            }
            if !object_classes.is_empty() && rng.random::<f64>() < scenario.false_positive_rate {
                let class = object_classes[rng.random_range(0..object_classes.len())];
                let x = rng.random::<f64>() * w as f64;
                let y = rng.random::<f64>() * h as f64;
                let conf = uniform(&mut rng, scenario.false_confidence);
                detections.push(Detection {
                    class_name: class.to_string(),
                    bbox: BoundingBox {
                        x,
                        y,
                        w: 20.0,
                        h: 20.0,
                    },
                    confidence: conf,
                    timestamp: t,
                    camera_id: camera_id.clone(),
                });
            }
            stream.frames.push(DetectionFrame {
                timestamp: t,
                detections,
            });
        }
    }

    let never_visible: Vec<usize> = (0..seen.len()).filter(|&i| !seen[i]).collect();
    for &i in &never_visible {
        tracing::warn!(object = i, class = %scenario.objects[i].class_name, "object is never inside any camera frustum");
    }
    Ok(RenderedDetections {
        streams,
        ground_truth: ground_truth(scenario),
        never_visible,
    })
}

fn uniform(rng: &mut ChaCha8Rng, [lo, hi]: [f64; 2]) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

/// True trajectories sampled at every frame.
pub fn ground_truth(scenario: &SyntheticScenario) -> Vec<TrajectoryRecord> {
    scenario
        .objects
        .iter()
        .enumerate()
        .map(|(i, o)| TrajectoryRecord {
            id: i as u64,
            class_name: o.class_name.clone(),
            timesteps: (0..scenario.frame_count())
                .map(|f| {
                    let t = scenario.frame_time(f);
                    TrajectoryStep::new(t, &o.position(t), &Matrix3::zeros())
                })
                .collect(),
        })
        .collect()
}

/// Projects every table corner and the origin marker into every camera,
/// adding Gaussian noise of `scenario.annotation_noise` pixels. Corners
/// behind a camera or outside its image are left unannotated.
pub fn render_annotations(scenario: &SyntheticScenario) -> Result<AnnotationSet> {
    scenario.validate()?;
    let mut rng = rng_for(scenario.seed, ANNOTATION_STREAM);
    let noise = Normal::new(0.0, scenario.annotation_noise)
        .map_err(|e| Error::Validation(e.to_string()))?;
    let mut set = AnnotationSet::default();
    for (camera_id, camera) in scenario.cameras() {
        let mut landmarks = BTreeMap::new();
        let annotate = |p: &Vector3<f64>, rng: &mut ChaCha8Rng| {
            scenario
                .visible_pixel(&camera, p)
                .map(|px| [px.u + noise.sample(rng), px.v + noise.sample(rng)])
        };
        for rig in &scenario.scene.rigs {
            let offset = Vector2::from(
                scenario
                    .table_offsets
                    .get(&rig.name)
                    .copied()
                    .unwrap_or([0.0, 0.0]),
            );
            let points: Vec<Option<[f64; 2]>> = (0..rig.corners.len())
                .map(|i| annotate(&rig.corner(i, offset).unwrap(), &mut rng))
                .collect();
            if points.iter().any(Option::is_some) {
                landmarks.insert(rig.name.clone(), points);
            }
        }
        if let Some(px) = annotate(&scenario.scene.origin(), &mut rng) {
            landmarks.insert(ORIGIN.to_string(), vec![Some(px)]);
        }
        if landmarks.is_empty() {
            tracing::warn!(camera = %camera_id, "camera sees no landmark");
        } else {
            set.cameras.insert(camera_id, landmarks);
        }
    }
    Ok(set)
}

/// Renders a complete trial into `dir`: scene configuration, annotations,
/// per-camera detections, ground truth and a manifest. Returns the path of
/// the manifest.
pub fn write_trial(scenario: &SyntheticScenario, dir: &Path) -> Result<PathBuf> {
    let rendered = render_detections(scenario)?;
    let annotations = render_annotations(scenario)?;
    let manifest = TrialManifest::canonical(
        scenario.session,
        scenario.trial,
        rendered.streams.iter().map(|s| s.camera_id.clone()),
    );
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut scene = scenario.scene.clone();
    scene.version = SCHEMA_VERSION;
    // the scene handed to the pipeline only knows the cameras that exist
    scene
        .initial_guess
        .retain(|c, _| scenario.cameras.contains_key(c));
    scene.save(&dir.join(&manifest.scene))?;
    write_annotations(&dir.join(&manifest.annotations), &annotations)?;
    for stream in &rendered.streams {
        write_detections(&dir.join(&manifest.detections[&stream.camera_id]), stream)?;
    }
    if let Some(gt) = &manifest.ground_truth {
        write_trajectories(&dir.join(gt), &rendered.ground_truth)?;
    }
    let path = dir.join(scene_io::trial_file_name(
        scenario.session,
        scenario.trial,
        &FileKind::Manifest,
    ));
    manifest.save(&path)?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticScenario {
        let mut s = reference::reference_scenario();
        s.duration = 1.0;
        s
    }

    #[test]
    fn noise_free_detections_sit_on_projections() {
        let mut s = small();
        s.pixel_noise = 0.0;
        s.dropout = 0.0;
        s.false_positive_rate = 0.0;
        let r = render_detections(&s).unwrap();
        let mut n = 0;
        for stream in &r.streams {
            let cam = Camera::new(s.cameras[&stream.camera_id], s.scene.intrinsics);
            for frame in &stream.frames {
                for d in &frame.detections {
                    let obj = s.objects.iter().find(|o| {
                        o.class_name == d.class_name && {
                            let px = cam.project(&o.position(frame.timestamp)).unwrap();
                            px.u == d.bbox.x && px.v == d.bbox.y
                        }
                    });
                    assert!(obj.is_some());
                    assert!(s.scene.intrinsics.contains(&d.bbox.center()));
                    n += 1;
                }
            }
        }
        assert!(n > 0);
    }

    #[test]
    fn full_dropout_gives_empty_frames() {
        let mut s = small();
        s.dropout = 1.0;
        s.false_positive_rate = 0.0;
        let r = render_detections(&s).unwrap();
        assert!(r.streams.iter().all(|st| st.detection_count() == 0));
        assert!(r
            .streams
            .iter()
            .all(|st| st.frames.len() == s.frame_count()));
    }

    #[test]
    fn zero_objects_is_valid() {
        let mut s = small();
        s.objects.clear();
        let r = render_detections(&s).unwrap();
        assert!(r.streams.iter().all(|st| st.detection_count() == 0));
        assert!(r.ground_truth.is_empty());
    }

    #[test]
    fn invalid_scenarios_rejected() {
        let mut s = small();
        s.fps = 0.0;
        assert!(render_detections(&s).is_err());
        let mut s = small();
        s.dropout = 1.5;
        assert!(s.validate().is_err());
        let mut s = small();
        s.objects[0].class_name = "teapot".into();
        assert!(s.validate().is_err());
    }

    #[test]
    fn waypoint_interpolation() {
        let o = SimObject {
            class_name: "plate".into(),
            waypoints: vec![
                Waypoint {
                    time: 1.0,
                    position: [0.0, 0.0, 0.0],
                },
                Waypoint {
                    time: 3.0,
                    position: [2.0, 0.0, 1.0],
                },
            ],
            hidden: vec![[5.0, 6.0]],
        };
        assert_eq!(o.position(0.0), Vector3::zeros());
        assert_eq!(o.position(2.0), Vector3::new(1.0, 0.0, 0.5));
        assert_eq!(o.position(9.0), Vector3::new(2.0, 0.0, 1.0));
        assert!(o.is_hidden(5.5) && !o.is_hidden(6.0));
    }

    #[test]
    fn annotations_skip_invisible_landmarks() {
        let s = reference::reference_scenario();
        let a = render_annotations(&s).unwrap();
        let counter_top = &a.cameras["counter-top"];
        assert!(counter_top.contains_key("counter"));
        assert!(!counter_top.contains_key("table"));
    }
}
