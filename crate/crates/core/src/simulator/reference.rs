//! The desk-scale reference trial: six cameras around a dining table and a
//! kitchen counter, five tableware objects including two plates that end up
//! stacked.

use std::collections::BTreeMap;
use std::f64::consts::{FRAC_PI_2, PI};

use crate::camera::{CameraIntrinsics, CameraPose};
use crate::scene_io::{
    ClassTable, Multiplicity, SceneConfig, TableRig, Tuning, Workspace, SCHEMA_VERSION,
};

use super::{SimObject, SyntheticScenario, Waypoint};

pub const CAMERA_IDS: [&str; 6] = [
    "back",
    "ceiling",
    "counter-top",
    "front",
    "table-side",
    "table-top",
];

/// Tableware vocabulary with the number of instances each class may have.
pub fn tableware_classes() -> ClassTable {
    use Multiplicity::*;
    [
        ("bowl-salad", Unique),
        ("bowl-cooker", Unique),
        ("plate-pasta", Unique),
        ("bread", Unique),
        ("butter", Unique),
        ("jam", Unique),
        ("nutella", Unique),
        ("salt-sugar", Unique),
        ("shaker-pepper", Unique),
        ("cereal", Unique),
        ("milk", Unique),
        ("coffee", Unique),
        ("wine-bottle", Unique),
        ("water", Unique),
        ("knife-bread", Unique),
        ("utensil-pasta", Unique),
        ("ladle", Unique),
        ("utensil-salad", Unique),
        ("bowl-cereal", Multiple),
        ("plate", Multiple),
        ("teaspoon", Multiple),
        ("tablespoon", Multiple),
        ("fork", Multiple),
        ("knife", Multiple),
        ("glass-water", Multiple),
        ("glass-wine", Multiple),
        ("cup-coffee", Multiple),
    ]
    .into_iter()
    .map(|(c, m)| (c.to_string(), m))
    .collect()
}

/// Nominal camera poses used as the starting point of calibration.
pub fn initial_guess() -> BTreeMap<String, CameraPose> {
    let p = |x, y, z, pan, tilt, roll| CameraPose {
        x,
        y,
        z,
        pan,
        tilt,
        roll,
    };
    [
        ("table-side", p(3.0, -1.0, 2.0, -FRAC_PI_2, -PI / 7.0, 0.0)),
        ("table-top", p(1.0, -1.0, 3.0, FRAC_PI_2, -FRAC_PI_2, 0.0)),
        ("back", p(0.0, 2.5, 3.0, PI, -PI / 4.0, 0.0)),
        ("counter-top", p(-1.5, 0.5, 3.0, FRAC_PI_2, -FRAC_PI_2, 0.0)),
        ("ceiling", p(0.0, 0.0, 5.0, 0.0, -FRAC_PI_2, FRAC_PI_2)),
        ("front", p(0.5, -2.5, 3.0, -PI / 12.0, -PI / 4.0, 0.0)),
    ]
    .into_iter()
    .map(|(c, pose)| (c.to_string(), pose))
    .collect()
}

/// Ground-truth poses of the reference trial (a realistic solved rig).
pub fn true_poses() -> BTreeMap<String, CameraPose> {
    let p = |x, y, z, pan, tilt, roll| CameraPose {
        x,
        y,
        z,
        pan,
        tilt,
        roll,
    };
    [
        ("table-side", p(2.16, -0.74, 2.11, -1.51, -0.48, 0.03)),
        ("table-top", p(0.70, -0.80, 2.79, 2.17, -1.50, -0.58)),
        ("back", p(-0.04, 2.34, 2.62, 3.48, -0.65, -0.05)),
        ("counter-top", p(-1.37, 0.61, 2.52, 1.41, -1.51, 0.17)),
        ("ceiling", p(0.08, -0.21, 4.87, -97.33, -1.65, 98.90)),
        ("front", p(0.33, -2.35, 1.97, -0.11, -0.62, 0.06)),
    ]
    .into_iter()
    .map(|(c, pose)| (c.to_string(), pose))
    .collect()
}

pub fn true_table_offsets() -> BTreeMap<String, [f64; 2]> {
    [
        ("table".to_string(), [-0.01, 0.06]),
        ("counter".to_string(), [-0.04, -0.02]),
    ]
    .into()
}

pub fn reference_intrinsics() -> CameraIntrinsics {
    CameraIntrinsics::hd720(900.0, 0.1, 0.01)
}

pub fn reference_scene() -> SceneConfig {
    SceneConfig {
        version: SCHEMA_VERSION,
        intrinsics: reference_intrinsics(),
        origin: [0.0, 0.0, 0.0],
        rigs: vec![
            TableRig {
                name: "table".into(),
                corners: vec![[0.2, -1.4], [0.85, -1.4], [0.85, -0.3], [0.2, -0.3]],
                height: 0.75,
            },
            TableRig {
                name: "counter".into(),
                corners: vec![[-1.65, 0.0], [-1.05, 0.0], [-1.05, 1.3], [-1.65, 1.3]],
                height: 0.9,
            },
        ],
        classes: tableware_classes(),
        workspace: Workspace {
            min: [-3.0, -3.0, -0.2],
            max: [3.0, 3.0, 2.5],
        },
        initial_guess: initial_guess(),
        tuning: Tuning::default(),
    }
}

fn wp(time: f64, x: f64, y: f64, z: f64) -> Waypoint {
    Waypoint {
        time,
        position: [x, y, z],
    }
}

/// Moves from `from` to `to` during `[t0, t1]`, lifted 30 cm in between.
fn carried(t0: f64, t1: f64, from: [f64; 3], to: [f64; 3]) -> Vec<Waypoint> {
    let mid = [
        0.5 * (from[0] + to[0]),
        0.5 * (from[1] + to[1]),
        from[2].max(to[2]) + 0.3,
    ];
    vec![
        wp(t0, from[0], from[1], from[2]),
        wp(0.5 * (t0 + t1), mid[0], mid[1], mid[2]),
        wp(t1, to[0], to[1], to[2]),
    ]
}

/// The reference scenario: 60 s at 30 fps, 2 px detection noise, 10 %
/// dropout, occasional low-confidence false positives.
pub fn reference_scenario() -> SyntheticScenario {
    let objects = vec![
        SimObject {
            class_name: "cereal".into(),
            waypoints: carried(8.0, 14.0, [-1.35, 0.9, 1.05], [0.4, -0.5, 0.9]),
            hidden: vec![],
        },
        SimObject {
            class_name: "bread".into(),
            waypoints: carried(18.0, 24.0, [-1.3, 0.3, 0.95], [0.7, -0.6, 0.8]),
            hidden: vec![],
        },
        SimObject {
            class_name: "cup-coffee".into(),
            waypoints: vec![wp(0.0, 0.7, -1.2, 0.8)],
            hidden: vec![],
        },
        SimObject {
            class_name: "plate".into(),
            waypoints: vec![wp(0.0, 0.4, -1.0, 0.76)],
            // covered by the second plate once stacked
            hidden: vec![[41.0, 60.0]],
        },
        SimObject {
            class_name: "plate".into(),
            waypoints: carried(35.0, 41.0, [-1.4, 0.6, 0.91], [0.4, -1.0, 0.78]),
            hidden: vec![],
        },
    ];
    SyntheticScenario {
        version: SCHEMA_VERSION,
        session: 1,
        trial: 1,
        seed: 1,
        duration: 60.0,
        fps: 30.0,
        pixel_noise: 2.0,
        dropout: 0.1,
        false_positive_rate: 0.05,
        annotation_noise: 1.0,
        true_confidence: [0.6, 1.0],
        false_confidence: [0.2, 0.6],
        object_size: 0.1,
        scene: reference_scene(),
        cameras: true_poses(),
        table_offsets: true_table_offsets(),
        objects,
    }
}
