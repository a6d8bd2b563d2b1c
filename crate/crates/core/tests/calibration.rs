use std::collections::BTreeMap;

use mvtrack::calibration::{unmoved_cameras, CalibrationProblem, InitialGuess, Params, PriorTrial};
use mvtrack::camera::{rotation_angle_between, CameraPose};
use mvtrack::scene_io::AnnotationSet;
use mvtrack::simulator::{reference, render_annotations, SyntheticScenario};
use nalgebra::Vector2;

fn noise_free() -> SyntheticScenario {
    let mut s = reference::reference_scenario();
    s.annotation_noise = 0.0;
    s
}

fn truth(problem: &CalibrationProblem, s: &SyntheticScenario) -> Params {
    problem
        .params(&InitialGuess {
            poses: s.cameras.clone(),
            table_offsets: s.table_offsets.clone(),
        })
        .unwrap()
}

fn max_errors(
    solved: &BTreeMap<String, CameraPose>,
    truth: &BTreeMap<String, CameraPose>,
) -> (f64, f64) {
    solved.iter().fold((0.0, 0.0), |(p, a), (c, pose)| {
        let t = &truth[c];
        (
            f64::max(p, (pose.position() - t.position()).norm()),
            f64::max(a, rotation_angle_between(pose, t)),
        )
    })
}

#[test]
fn loss_is_zero_at_truth_and_grows_with_displacement() {
    let s = noise_free();
    let problem = CalibrationProblem::new(&render_annotations(&s).unwrap(), &s.scene).unwrap();
    let at_truth = truth(&problem, &s);
    let (loss, residuals) = problem.reprojection_error(&at_truth);
    assert!(loss < 1e-20, "{loss}");
    assert_eq!(residuals.len(), 2 * problem.observation_count());
    for k in 0..problem.cameras().len() {
        let mut moved = at_truth.clone();
        moved.poses[k].x += 0.01;
        assert!(problem.reprojection_error(&moved).0 > loss, "camera {k}");
    }
}

#[test]
fn gradient_matches_finite_differences() {
    let s = reference::reference_scenario();
    let problem = CalibrationProblem::new(&render_annotations(&s).unwrap(), &s.scene).unwrap();
    let at = problem.params(&InitialGuess::from_scene(&s.scene)).unwrap();
    let (_, grad) = problem.loss_and_gradient(&at);
    let x = problem.flatten(&at);
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[i] += h;
        xm[i] -= h;
        let lp = problem.reprojection_error(&problem.unflatten(&xp, &at)).0;
        let lm = problem.reprojection_error(&problem.unflatten(&xm, &at)).0;
        let fd = (lp - lm) / (2.0 * h);
        worst = worst.max((fd - grad[i]).abs() / grad[i].abs().max(1.0));
    }
    assert!(worst < 1e-3, "relative error {worst}");
}

#[test]
fn truth_is_a_fixed_point() {
    let s = noise_free();
    let problem = CalibrationProblem::new(&render_annotations(&s).unwrap(), &s.scene).unwrap();
    let result = problem
        .solve(&InitialGuess {
            poses: s.cameras.clone(),
            table_offsets: s.table_offsets.clone(),
        })
        .unwrap();
    assert!(result.converged);
    assert!(result.iterations <= 1, "{} iterations", result.iterations);
    let (dp, da) = max_errors(&result.poses, &s.cameras);
    assert!(dp < 1e-9 && da < 1e-9, "{dp} {da}");
}

#[test]
fn noise_free_recovery_from_initial_guess() {
    let s = noise_free();
    let problem = CalibrationProblem::new(&render_annotations(&s).unwrap(), &s.scene).unwrap();
    let result = problem.solve(&InitialGuess::from_scene(&s.scene)).unwrap();
    assert!(result.converged);
    assert!(result.under_constrained.is_empty());
    assert_eq!(result.residuals.len(), problem.observation_count());
    let (dp, da) = max_errors(&result.poses, &s.cameras);
    assert!(dp < 0.005, "position error {dp}");
    assert!(da.to_degrees() < 0.2, "angle error {}", da.to_degrees());
    for (rig, offset) in &result.table_offsets {
        let t = s.table_offsets[rig];
        assert!(
            (Vector2::from(*offset) - Vector2::from(t)).norm() < 1e-6,
            "{rig}"
        );
    }
}

#[test]
fn one_pixel_noise_gives_unit_rms() {
    let s = reference::reference_scenario();
    let problem = CalibrationProblem::new(&render_annotations(&s).unwrap(), &s.scene).unwrap();
    let result = problem.solve(&InitialGuess::from_scene(&s.scene)).unwrap();
    assert!(result.converged);
    assert!(
        (0.5..=1.5).contains(&result.final_rms),
        "{}",
        result.final_rms
    );
    assert!(max_errors(&result.poses, &s.cameras).0 < 0.05);
    let history = &result.loss_history;
    assert!(history.windows(2).all(|w| w[1] < w[0]));
}

#[test]
fn behind_camera_landmarks_get_the_penalty() {
    let s = noise_free();
    let problem = CalibrationProblem::new(&render_annotations(&s).unwrap(), &s.scene).unwrap();
    let mut params = truth(&problem, &s);
    // turn the first camera to look straight up
    params.poses[0].tilt = std::f64::consts::FRAC_PI_2;
    let (loss, r) = problem.reprojection_error(&params);
    assert!(loss.is_finite());
    assert!(r.iter().any(|v| *v == s.scene.tuning.calib_behind_penalty));
}

#[test]
fn sparse_camera_is_flagged_and_held() {
    let s = noise_free();
    let mut annotations = render_annotations(&s).unwrap();
    let front = annotations.cameras.get_mut("front").unwrap();
    front.retain(|name, _| name == "table");
    let corners = front.get_mut("table").unwrap();
    let mut kept = 0;
    for c in corners.iter_mut() {
        if c.is_some() {
            kept += 1;
            if kept > 2 {
                *c = None;
            }
        }
    }
    let problem = CalibrationProblem::new(&annotations, &s.scene).unwrap();
    let guess = InitialGuess::from_scene(&s.scene);
    let result = problem.solve(&guess).unwrap();
    assert_eq!(result.under_constrained, vec!["front".to_string()]);
    assert_eq!(result.poses["front"], guess.poses["front"]);
}

#[test]
fn camera_without_table_annotations_recovers_through_counter() {
    let s = noise_free();
    let mut annotations = render_annotations(&s).unwrap();
    let back = annotations.cameras.get_mut("back").unwrap();
    assert!(back.contains_key("counter"));
    back.remove("table");
    let problem = CalibrationProblem::new(&annotations, &s.scene).unwrap();
    let result = problem.solve(&InitialGuess::from_scene(&s.scene)).unwrap();
    let err = (result.poses["back"].position() - s.cameras["back"].position()).norm();
    assert!(err < 0.02, "{err}");
}

#[test]
fn only_moved_cameras_are_solved_again() {
    let first = noise_free();
    let annotations_1 = render_annotations(&first).unwrap();
    let solved_1 = CalibrationProblem::new(&annotations_1, &first.scene)
        .unwrap()
        .solve(&InitialGuess::from_scene(&first.scene))
        .unwrap();

    let mut second = first.clone();
    for cam in ["back", "front", "table-side"] {
        let p = second.cameras.get_mut(cam).unwrap();
        p.x += 0.05;
        p.pan += 0.02;
    }
    let annotations_2 = render_annotations(&second).unwrap();
    let prior = PriorTrial {
        annotations: annotations_1,
        poses: solved_1.poses.clone(),
    };
    let unmoved = unmoved_cameras(&prior, &annotations_2);
    let names: Vec<&str> = unmoved.keys().map(String::as_str).collect();
    assert_eq!(names, ["ceiling", "counter-top", "table-top"]);

    let problem = CalibrationProblem::new(&annotations_2, &second.scene).unwrap();
    let result = problem
        .solve_with_fixed(&InitialGuess::from_scene(&second.scene), &unmoved)
        .unwrap();
    assert_eq!(result.held_fixed, names);
    for cam in names {
        assert_eq!(result.poses[cam], solved_1.poses[cam]);
    }
    let (dp, _) = max_errors(&result.poses, &second.cameras);
    assert!(dp < 0.005, "{dp}");
}

#[test]
fn unknown_landmark_is_rejected() {
    let s = noise_free();
    let mut annotations = AnnotationSet::default();
    annotations.cameras.insert(
        "front".into(),
        [("sideboard".to_string(), vec![Some([1.0, 2.0])])].into(),
    );
    assert!(CalibrationProblem::new(&annotations, &s.scene).is_err());
}
