use std::collections::BTreeMap;

use mvtrack::camera::{Camera, CameraPose};
use mvtrack::scene_io::{BoundingBox, Detection, Multiplicity};
use mvtrack::simulator::reference::reference_intrinsics;
use mvtrack::spawner::{
    apply_support_rule, find_intersections, IntersectionCandidate, ObservedRay, SpawnConfig,
};
use nalgebra::Vector3;

fn looking_at(position: Vector3<f64>, target: Vector3<f64>) -> Camera {
    let d = target - position;
    let pan = d.x.atan2(d.y);
    let tilt = d.z.atan2(d.xy().norm());
    Camera::new(
        CameraPose::new(position, pan, tilt, 0.0),
        reference_intrinsics(),
    )
}

fn observe(camera_id: &str, camera: &Camera, p: &Vector3<f64>, class: &str) -> ObservedRay {
    let px = camera.project(p).unwrap();
    let detection = Detection {
        class_name: class.into(),
        bbox: BoundingBox {
            x: px.u,
            y: px.v,
            w: 20.0,
            h: 20.0,
        },
        confidence: 0.9,
        timestamp: 0.0,
        camera_id: camera_id.into(),
    };
    ObservedRay {
        camera_id: camera_id.into(),
        ray: camera.unproject(&detection.bbox.center()).unwrap(),
        detection,
    }
}

/// Two cups seen by two cameras at mirrored positions plus a third camera
/// from the opposite side.
fn two_cups() -> (Vec<Vector3<f64>>, BTreeMap<String, Vec<ObservedRay>>) {
    let cups = vec![Vector3::new(-0.2, 0.0, 0.8), Vector3::new(0.2, 0.0, 0.8)];
    let center = Vector3::new(0.0, 0.0, 0.8);
    let cameras = [
        ("a", looking_at(Vector3::new(-1.5, -1.5, 1.8), center)),
        ("b", looking_at(Vector3::new(1.5, -1.5, 1.8), center)),
        ("c", looking_at(Vector3::new(0.0, 2.0, 1.8), center)),
    ];
    let rays = cameras
        .iter()
        .flat_map(|(id, cam)| cups.iter().map(move |p| observe(id, cam, p, "cup-coffee")))
        .collect();
    (cups, [("cup-coffee".to_string(), rays)].into())
}

fn accepted(cands: &[IntersectionCandidate], m: Multiplicity) -> Vec<&IntersectionCandidate> {
    cands.iter().filter(|c| apply_support_rule(c, m)).collect()
}

#[test]
fn three_camera_rule_removes_ghosts() {
    let (cups, rays) = two_cups();
    let cands = find_intersections(&rays, &SpawnConfig::default());
    let with_rule = accepted(&cands, Multiplicity::Multiple);
    assert_eq!(with_rule.len(), 2);
    for (c, truth) in with_rule.iter().zip(&cups) {
        assert!((c.position - truth).norm() < 1e-6);
        assert_eq!(c.camera_support, 3);
    }
    assert!(accepted(&cands, Multiplicity::Unique).len() >= 3);
}

#[test]
fn support_rule_examples() {
    let target = Vector3::new(0.5, -0.8, 0.8);
    let a = looking_at(Vector3::new(-1.5, -1.5, 1.8), target);
    let b = looking_at(Vector3::new(1.5, -1.5, 1.8), target);
    // nearly the same viewing direction as `b`
    let b2 = looking_at(Vector3::new(1.55, -1.5, 1.85), target);
    let two: BTreeMap<String, Vec<ObservedRay>> = [(
        "x".to_string(),
        vec![
            observe("a", &a, &target, "x"),
            observe("b", &b, &target, "x"),
        ],
    )]
    .into();
    let cands = find_intersections(&two, &SpawnConfig::default());
    assert_eq!(cands.len(), 1);
    assert!(apply_support_rule(&cands[0], Multiplicity::Unique));
    assert!(!apply_support_rule(&cands[0], Multiplicity::Multiple));

    let mut three = two.clone();
    three
        .get_mut("x")
        .unwrap()
        .push(observe("b2", &b2, &target, "x"));
    let cands = find_intersections(&three, &SpawnConfig::default());
    assert_eq!(cands.len(), 1);
    assert_eq!(cands[0].supporting.len(), 3);
    assert_eq!(cands[0].camera_support, 2);
    assert!(!apply_support_rule(&cands[0], Multiplicity::Multiple));
}

#[test]
fn candidates_respect_invariants() {
    let (_, rays) = two_cups();
    let config = SpawnConfig::default();
    let cands = find_intersections(&rays, &config);
    assert_eq!(cands, find_intersections(&rays, &config));
    for (i, c) in cands.iter().enumerate() {
        assert!(c.camera_support >= 2);
        assert!(config.workspace.contains(&c.position));
        for r in &c.supporting {
            assert!(r.ray.distance_to(&c.position) <= config.ray_proximity);
            assert_eq!(r.detection.class_name, c.class_name);
        }
        for other in &cands[i + 1..] {
            assert!((other.position - c.position).norm() >= config.spawn_merge_radius);
        }
    }
}

#[test]
fn classes_do_not_mix() {
    let target = Vector3::new(0.5, -0.8, 0.8);
    let a = looking_at(Vector3::new(-1.5, -1.5, 1.8), target);
    let b = looking_at(Vector3::new(1.5, -1.5, 1.8), target);
    let rays: BTreeMap<String, Vec<ObservedRay>> = [
        ("x".to_string(), vec![observe("a", &a, &target, "x")]),
        ("y".to_string(), vec![observe("b", &b, &target, "y")]),
    ]
    .into();
    assert!(find_intersections(&rays, &SpawnConfig::default()).is_empty());
    assert!(find_intersections(&BTreeMap::new(), &SpawnConfig::default()).is_empty());
}
