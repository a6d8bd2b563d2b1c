//! Joint calibration of camera poses and table offsets from annotated
//! landmarks.
//!
//! All cameras of a trial and the planar offsets of all table rigs are solved
//! together by minimizing the mean squared reprojection error of the
//! annotated table corners and origin marker. The minimizer is a damped
//! Gauss-Newton (Levenberg-Marquardt) descent on analytic Jacobians; a step
//! is accepted only if it lowers the loss.

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector, Vector2, Vector3};

use crate::camera::{Camera, CameraIntrinsics, CameraPose};
use crate::error::{Error, Result};
use crate::scene_io::{AnnotationSet, SceneConfig, Tuning, ORIGIN};

/// Sanity bound on camera positions, in meters.
const MAX_POSITION: f64 = 20.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Landmark {
    Corner { rig: usize, corner: usize },
    Origin,
}

#[derive(Debug, Clone)]
struct Observation {
    camera: usize,
    landmark_name: String,
    index: usize,
    landmark: Landmark,
    pixel: Vector2<f64>,
}

/// Reprojection residual (predicted minus annotated) of one annotated point.
#[derive(Debug, Clone, PartialEq)]
pub struct LandmarkResidual {
    pub camera: String,
    pub landmark: String,
    /// Corner index within the rig (0 for the origin).
    pub index: usize,
    pub du: f64,
    pub dv: f64,
    /// The point projected behind the camera and was assigned the penalty.
    pub behind_camera: bool,
}

/// Starting point of a solve.
#[derive(Debug, Clone, PartialEq)]
pub struct InitialGuess {
    pub poses: BTreeMap<String, CameraPose>,
    pub table_offsets: BTreeMap<String, [f64; 2]>,
}

impl InitialGuess {
    /// Poses from the scene configuration, all tables at their nominal spot.
    pub fn from_scene(scene: &SceneConfig) -> Self {
        Self {
            poses: scene.initial_guess.clone(),
            table_offsets: scene
                .rigs
                .iter()
                .map(|r| (r.name.clone(), [0.0, 0.0]))
                .collect(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct CalibrationResult {
    pub poses: BTreeMap<String, CameraPose>,
    pub table_offsets: BTreeMap<String, [f64; 2]>,
    /// Root mean square over all residual components, in pixels.
    pub final_rms: f64,
    pub iterations: usize,
    pub converged: bool,
    pub residuals: Vec<LandmarkResidual>,
    /// Cameras with too few annotated points; kept at their initial guess.
    pub under_constrained: Vec<String>,
    /// Cameras held at a caller supplied pose.
    pub held_fixed: Vec<String>,
    /// Loss after every accepted step, starting with the initial loss.
    pub loss_history: Vec<f64>,
}

/// Annotations plus world geometry, with the mapping of free parameters.
#[derive(Debug, Clone)]
pub struct CalibrationProblem {
    intrinsics: CameraIntrinsics,
    scene: SceneConfig,
    cameras: Vec<String>,
    observations: Vec<Observation>,
    tuning: Tuning,
}

/// Full parameter state: every camera pose and every rig offset.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub poses: Vec<CameraPose>,
    pub offsets: Vec<Vector2<f64>>,
}

/// Which parts of [`Params`] are optimized, and where they sit in the flat vector.
#[derive(Debug, Clone)]
struct Layout {
    free_cameras: Vec<usize>,
    free_rigs: Vec<usize>,
    camera_slot: Vec<Option<usize>>,
    rig_slot: Vec<Option<usize>>,
}

impl Layout {
    fn new(
        n_cameras: usize,
        n_rigs: usize,
        free_cameras: Vec<usize>,
        free_rigs: Vec<usize>,
    ) -> Self {
        let mut camera_slot = vec![None; n_cameras];
        for (k, &c) in free_cameras.iter().enumerate() {
            camera_slot[c] = Some(6 * k);
        }
        let base = 6 * free_cameras.len();
        let mut rig_slot = vec![None; n_rigs];
        for (k, &r) in free_rigs.iter().enumerate() {
            rig_slot[r] = Some(base + 2 * k);
        }
        Self {
            free_cameras,
            free_rigs,
            camera_slot,
            rig_slot,
        }
    }

    fn len(&self) -> usize {
        6 * self.free_cameras.len() + 2 * self.free_rigs.len()
    }

    fn pack(&self, p: &Params) -> DVector<f64> {
        let mut v = DVector::zeros(self.len());
        for &c in &self.free_cameras {
            let s = self.camera_slot[c].unwrap();
            for (i, x) in p.poses[c].params().iter().enumerate() {
                v[s + i] = *x;
            }
        }
        for &r in &self.free_rigs {
            let s = self.rig_slot[r].unwrap();
            v[s] = p.offsets[r].x;
            v[s + 1] = p.offsets[r].y;
        }
        v
    }

    fn unpack(&self, v: &DVector<f64>, base: &Params) -> Params {
        let mut p = base.clone();
        for &c in &self.free_cameras {
            let s = self.camera_slot[c].unwrap();
            let mut a = [0.0; 6];
            a.copy_from_slice(&v.as_slice()[s..s + 6]);
            p.poses[c] = CameraPose::from_params(&a);
        }
        for &r in &self.free_rigs {
            let s = self.rig_slot[r].unwrap();
            p.offsets[r] = Vector2::new(v[s], v[s + 1]);
        }
        p
    }
}

struct Evaluation {
    residuals: DVector<f64>,
    behind: Vec<bool>,
    jacobian: Option<DMatrix<f64>>,
}

impl CalibrationProblem {
    pub fn new(annotations: &AnnotationSet, scene: &SceneConfig) -> Result<Self> {
        annotations.validate()?;
        let cameras: Vec<String> = annotations.cameras.keys().cloned().collect();
        let mut observations = Vec::new();
        for (ci, camera) in cameras.iter().enumerate() {
            for (name, points) in &annotations.cameras[camera] {
                let rig = if name == ORIGIN {
                    if points.len() != 1 {
                        return Err(Error::Validation(format!(
                            "camera `{camera}`: origin must have exactly one position"
                        )));
                    }
                    None
                } else {
                    let ri = scene
                        .rigs
                        .iter()
                        .position(|r| &r.name == name)
                        .ok_or_else(|| {
                            Error::Validation(format!(
                                "camera `{camera}`: landmark `{name}` is not a rig of the scene"
                            ))
                        })?;
                    if points.len() > scene.rigs[ri].corners.len() {
                        return Err(Error::Validation(format!(
                            "camera `{camera}`: landmark `{name}` lists {} corners",
                            points.len()
                        )));
                    }
                    Some(ri)
                };
                for (index, p) in points.iter().enumerate() {
                    let Some([u, v]) = p else { continue };
                    observations.push(Observation {
                        camera: ci,
                        landmark_name: name.clone(),
                        index,
                        landmark: match rig {
                            Some(rig) => Landmark::Corner { rig, corner: index },
                            None => Landmark::Origin,
                        },
                        pixel: Vector2::new(*u, *v),
                    });
                }
            }
        }
        Ok(Self {
            intrinsics: scene.intrinsics,
            scene: scene.clone(),
            cameras,
            observations,
            tuning: scene.tuning.clone(),
        })
    }

    pub fn with_tuning(mut self, tuning: Tuning) -> Self {
        self.tuning = tuning;
        self
    }

    pub fn cameras(&self) -> &[String] {
        &self.cameras
    }

    pub fn observation_count(&self) -> usize {
        self.observations.len()
    }

    /// Builds a full parameter state from named poses and offsets.
    pub fn params(&self, guess: &InitialGuess) -> Result<Params> {
        let poses =
            self.cameras
                .iter()
                .map(|c| {
                    guess.poses.get(c).copied().ok_or_else(|| {
                        Error::Validation(format!("no initial guess for camera `{c}`"))
                    })
                })
                .collect::<Result<Vec<_>>>()?;
        let offsets = self
            .scene
            .rigs
            .iter()
            .map(|r| {
                Vector2::from(
                    guess
                        .table_offsets
                        .get(&r.name)
                        .copied()
                        .unwrap_or([0.0, 0.0]),
                )
            })
            .collect();
        Ok(Params { poses, offsets })
    }

    fn world_point(&self, landmark: Landmark, params: &Params) -> Vector3<f64> {
        match landmark {
            Landmark::Corner { rig, corner } => self.scene.rigs[rig]
                .corner(corner, params.offsets[rig])
                .expect("corner index validated"),
            Landmark::Origin => self.scene.origin(),
        }
    }

    fn evaluate(&self, params: &Params, layout: Option<&Layout>) -> Evaluation {
        let n = self.observations.len();
        let mut residuals = DVector::zeros(2 * n);
        let mut behind = vec![false; n];
        let mut jacobian = layout.map(|l| DMatrix::zeros(2 * n, l.len()));
        let cams: Vec<Camera> = params
            .poses
            .iter()
            .map(|p| Camera::new(*p, self.intrinsics))
            .collect();
        let penalty = self.tuning.calib_behind_penalty;
        for (k, obs) in self.observations.iter().enumerate() {
            let cam = &cams[obs.camera];
            let point = self.world_point(obs.landmark, params);
            match cam.project(&point) {
                Ok(px) => {
                    residuals[2 * k] = px.u - obs.pixel.x;
                    residuals[2 * k + 1] = px.v - obs.pixel.y;
                    if let (Some(jac), Some(layout)) = (jacobian.as_mut(), layout) {
                        let j = cam.jacobians(&point).expect("projectable point");
                        if let Some(s) = layout.camera_slot[obs.camera] {
                            jac.view_mut((2 * k, s), (2, 6)).copy_from(&j.wrt_pose);
                        }
                        if let Landmark::Corner { rig, .. } = obs.landmark {
                            if let Some(s) = layout.rig_slot[rig] {
                                jac.view_mut((2 * k, s), (2, 2))
                                    .copy_from(&j.wrt_point.fixed_view::<2, 2>(0, 0));
                            }
                        }
                    }
                }
                Err(_) => {
                    residuals[2 * k] = penalty;
                    residuals[2 * k + 1] = penalty;
                    behind[k] = true;
                }
            }
        }
        Evaluation {
            residuals,
            behind,
            jacobian,
        }
    }

    /// Mean squared residual component (px^2) and the residual vector
    /// `[du0, dv0, du1, dv1, ...]` in annotation order.
    pub fn reprojection_error(&self, params: &Params) -> (f64, DVector<f64>) {
        let e = self.evaluate(params, None);
        (mean_square(&e.residuals), e.residuals)
    }

    /// Loss and its gradient with respect to all camera and rig parameters,
    /// laid out as 6 values per camera (in [`cameras`](Self::cameras) order)
    /// followed by 2 per rig.
    pub fn loss_and_gradient(&self, params: &Params) -> (f64, DVector<f64>) {
        let layout = self.full_layout();
        let e = self.evaluate(params, Some(&layout));
        let jac = e.jacobian.unwrap();
        let m = e.residuals.len().max(1) as f64;
        let grad = jac.transpose() * &e.residuals * (2.0 / m);
        (mean_square(&e.residuals), grad)
    }

    /// Flattens `params` in the layout of [`loss_and_gradient`](Self::loss_and_gradient).
    pub fn flatten(&self, params: &Params) -> DVector<f64> {
        self.full_layout().pack(params)
    }

    pub fn unflatten(&self, v: &DVector<f64>, like: &Params) -> Params {
        self.full_layout().unpack(v, like)
    }

    fn full_layout(&self) -> Layout {
        Layout::new(
            self.cameras.len(),
            self.scene.rigs.len(),
            (0..self.cameras.len()).collect(),
            (0..self.scene.rigs.len()).collect(),
        )
    }

    fn points_per_camera(&self) -> Vec<usize> {
        let mut counts = vec![0; self.cameras.len()];
        for o in &self.observations {
            counts[o.camera] += 1;
        }
        counts
    }

    pub fn solve(&self, initial: &InitialGuess) -> Result<CalibrationResult> {
        self.solve_with_fixed(initial, &BTreeMap::new())
    }

    /// Solves with the cameras in `fixed` held at the given poses.
    pub fn solve_with_fixed(
        &self,
        initial: &InitialGuess,
        fixed: &BTreeMap<String, CameraPose>,
    ) -> Result<CalibrationResult> {
        let mut guess = initial.clone();
        for (c, p) in fixed {
            guess.poses.insert(c.clone(), *p);
        }
        let start = self.params(&guess)?;
        for p in &start.poses {
            p.validate()?;
            if p.position().amax() >= MAX_POSITION {
                return Err(Error::Validation(format!(
                    "initial camera position {:?} outside the {MAX_POSITION} m sanity bound",
                    p.position()
                )));
            }
        }

        let counts = self.points_per_camera();
        let mut under_constrained = Vec::new();
        let mut held_fixed = Vec::new();
        let mut free_cameras = Vec::new();
        for (ci, name) in self.cameras.iter().enumerate() {
            if fixed.contains_key(name) {
                held_fixed.push(name.clone());
            } else if counts[ci] < self.tuning.calib_min_points {
                tracing::warn!(camera = %name, points = counts[ci], "camera has too few annotated points");
                under_constrained.push(name.clone());
            } else {
                free_cameras.push(ci);
            }
        }

        let mut observed_rigs = BTreeSet::new();
        let mut origin_seen = false;
        for o in &self.observations {
            match o.landmark {
                Landmark::Corner { rig, .. } => {
                    observed_rigs.insert(rig);
                }
                Landmark::Origin => origin_seen = true,
            }
        }
        let mut free_rigs: Vec<usize> = observed_rigs.into_iter().collect();
        if !origin_seen && held_fixed.is_empty() && !free_rigs.is_empty() {
            // without the origin marker only the rigs anchor the frame
            let pinned = free_rigs.remove(0);
            tracing::warn!(
                rig = %self.scene.rigs[pinned].name,
                "no origin annotation; holding this rig at its initial offset"
            );
        }

        let layout = Layout::new(
            self.cameras.len(),
            self.scene.rigs.len(),
            free_cameras,
            free_rigs,
        );
        let (params, iterations, loss_history) = self.minimize(&layout, start)?;

        let eval = self.evaluate(&params, None);
        let final_rms = mean_square(&eval.residuals).sqrt();
        let residuals = self
            .observations
            .iter()
            .enumerate()
            .map(|(k, o)| LandmarkResidual {
                camera: self.cameras[o.camera].clone(),
                landmark: o.landmark_name.clone(),
                index: o.index,
                du: eval.residuals[2 * k],
                dv: eval.residuals[2 * k + 1],
                behind_camera: eval.behind[k],
            })
            .collect();
        let converged = iterations.1 && final_rms <= self.tuning.calib_rms_threshold;
        Ok(CalibrationResult {
            poses: self
                .cameras
                .iter()
                .zip(&params.poses)
                .map(|(c, p)| (c.clone(), normalize_angles(p)))
                .collect(),
            table_offsets: self
                .scene
                .rigs
                .iter()
                .zip(&params.offsets)
                .map(|(r, o)| (r.name.clone(), [o.x, o.y]))
                .collect(),
            final_rms,
            iterations: iterations.0,
            converged,
            residuals,
            under_constrained,
            held_fixed,
            loss_history,
        })
    }

    /// Levenberg-Marquardt on the free parameters. Returns the final state,
    /// `(iterations, converged)` and the loss after every accepted step.
    #[allow(clippy::type_complexity)]
    fn minimize(
        &self,
        layout: &Layout,
        start: Params,
    ) -> Result<(Params, (usize, bool), Vec<f64>)> {
        let tuning = &self.tuning;
        let mut params = start;
        let mut history = Vec::new();
        if layout.len() == 0 || self.observations.is_empty() {
            let (loss, _) = self.reprojection_error(&params);
            history.push(loss);
            return Ok((params, (0, true), history));
        }
        let m = (2 * self.observations.len()) as f64;
        let mut x = layout.pack(&params);
        let mut eval = self.evaluate(&params, Some(layout));
        let mut loss = mean_square(&eval.residuals);
        history.push(loss);
        let mut trace: Vec<Vec<f64>> = vec![x.as_slice().to_vec()];
        let mut lambda = 1e-3;
        let mut rejections = 0;

        for iteration in 0..tuning.calib_max_iterations {
            let jac = eval.jacobian.as_ref().unwrap();
            let jt_r = jac.transpose() * &eval.residuals;
            let gradient_norm = (&jt_r * (2.0 / m)).norm();
            if gradient_norm < tuning.calib_gradient_tolerance {
                return Ok((params, (iteration, true), history));
            }
            let jtj = jac.transpose() * jac;
            let scale = jtj.diagonal().max().max(1e-12);
            let mut accepted = false;
            while !accepted {
                let mut a = jtj.clone();
                for i in 0..a.nrows() {
                    a[(i, i)] += lambda * a[(i, i)].max(1e-9 * scale);
                }
                let step = match a.cholesky() {
                    Some(ch) => ch.solve(&(-&jt_r)),
                    None if lambda < 1e16 => {
                        lambda *= 10.0;
                        continue;
                    }
                    None => {
                        return Err(Error::Diverged {
                            iterations: iteration,
                            loss,
                            trace,
                        })
                    }
                };
                let x_new = &x + &step;
                let candidate = layout.unpack(&x_new, &params);
                let cand_eval = self.evaluate(&candidate, Some(layout));
                let cand_loss = mean_square(&cand_eval.residuals);
                if !cand_loss.is_finite() {
                    return Err(Error::Diverged {
                        iterations: iteration,
                        loss: cand_loss,
                        trace,
                    });
                }
                if cand_loss < loss && positions_sane(&candidate) {
                    let improvement = loss - cand_loss;
                    x = x_new;
                    params = candidate;
                    eval = cand_eval;
                    loss = cand_loss;
                    history.push(loss);
                    trace.push(x.as_slice().to_vec());
                    if trace.len() > tuning.calib_patience.max(1) {
                        trace.remove(0);
                    }
                    let near_gauss_newton = lambda < 1.0;
                    lambda = (lambda / 3.0).max(1e-12);
                    rejections = 0;
                    accepted = true;
                    if improvement < tuning.calib_loss_tolerance && near_gauss_newton {
                        return Ok((params, (iteration + 1, true), history));
                    }
                } else {
                    lambda *= 4.0;
                    rejections += 1;
                    if rejections > tuning.calib_patience || lambda > 1e16 {
                        if step.norm() < 1e-12 * (1.0 + x.norm()) {
                            // no representable improvement left
                            return Ok((params, (iteration, true), history));
                        }
                        return Err(Error::Diverged {
                            iterations: iteration,
                            loss,
                            trace,
                        });
                    }
                }
            }
        }
        Ok((params, (tuning.calib_max_iterations, false), history))
    }
}

fn positions_sane(p: &Params) -> bool {
    p.poses
        .iter()
        .all(|c| c.position().amax() < MAX_POSITION && c.params().iter().all(|v| v.is_finite()))
}

fn mean_square(r: &DVector<f64>) -> f64 {
    if r.is_empty() {
        0.0
    } else {
        r.norm_squared() / r.len() as f64
    }
}

fn wrap_angle(a: f64) -> f64 {
    if a > -PI && a <= PI {
        return a;
    }
    let w = (a + PI).rem_euclid(2.0 * PI) - PI;
    if w == -PI {
        PI
    } else {
        w
    }
}

fn normalize_angles(p: &CameraPose) -> CameraPose {
    CameraPose {
        pan: wrap_angle(p.pan),
        tilt: wrap_angle(p.tilt),
        roll: wrap_angle(p.roll),
        ..*p
    }
}

/// Annotations and solved poses of an earlier trial, for reuse when a camera
/// was not moved in between.
#[derive(Debug, Clone)]
pub struct PriorTrial {
    pub annotations: AnnotationSet,
    pub poses: BTreeMap<String, CameraPose>,
}

/// True iff `camera` has a prior pose and its annotations are identical to
/// the prior trial's.
pub fn skip_if_unmoved(prior: &PriorTrial, annotations: &AnnotationSet, camera: &str) -> bool {
    match (
        prior.annotations.cameras.get(camera),
        annotations.cameras.get(camera),
    ) {
        (Some(before), Some(now)) => before == now && prior.poses.contains_key(camera),
        _ => false,
    }
}

/// Cameras that can reuse their prior pose, with that pose.
pub fn unmoved_cameras(
    prior: &PriorTrial,
    annotations: &AnnotationSet,
) -> BTreeMap<String, CameraPose> {
    annotations
        .cameras
        .keys()
        .filter(|c| skip_if_unmoved(prior, annotations, c))
        .map(|c| (c.clone(), prior.poses[c]))
        .collect()
}
