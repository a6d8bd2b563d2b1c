use mvtrack::scene_io::{
    read_annotations, read_detections, read_poses, read_trajectories, write_poses,
    write_trajectories, SceneConfig, TrialManifest,
};
use mvtrack::simulator::{reference, render_annotations, render_detections, write_trial};

#[test]
fn written_trial_reads_back_identically() {
    let mut s = reference::reference_scenario();
    s.duration = 2.0;
    let dir = tempfile::tempdir().unwrap();
    let manifest_path = write_trial(&s, dir.path()).unwrap();
    let manifest = TrialManifest::load(&manifest_path).unwrap();
    manifest.check_inputs().unwrap();

    let scene = SceneConfig::load(&manifest.scene).unwrap();
    assert_eq!(scene.rigs, s.scene.rigs);
    assert_eq!(
        read_annotations(&manifest.annotations).unwrap(),
        render_annotations(&s).unwrap()
    );

    let rendered = render_detections(&s).unwrap();
    assert_eq!(manifest.detections.len(), 6);
    for stream in &rendered.streams {
        let read = read_detections(
            &manifest.detections[&stream.camera_id],
            Some(&scene.classes),
        )
        .unwrap();
        assert_eq!(read.frames.len(), s.frame_count());
        assert_eq!(read.detection_count(), stream.detection_count());
        assert_eq!(read.count_by_class(), stream.count_by_class());
        assert_eq!(read.skipped_unknown, 0);
    }
    let gt = read_trajectories(manifest.ground_truth.as_ref().unwrap()).unwrap();
    assert_eq!(gt, rendered.ground_truth);
}

#[test]
fn poses_and_empty_trajectories_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let poses_path = dir.path().join("poses.yaml");
    write_poses(
        &poses_path,
        &reference::true_poses(),
        &reference::true_table_offsets(),
    )
    .unwrap();
    let read = read_poses(&poses_path).unwrap();
    assert_eq!(read.cameras, reference::true_poses());
    assert_eq!(read.table_offsets, reference::true_table_offsets());

    let traj = dir.path().join("nested/t.yaml");
    write_trajectories(&traj, &[]).unwrap();
    assert!(read_trajectories(&traj).unwrap().is_empty());
}

#[test]
fn unwritable_path_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    std::fs::write(&blocker, "x").unwrap();
    let err = write_trajectories(&blocker.join("t.yaml"), &[]).unwrap_err();
    assert!(matches!(err, mvtrack::Error::Io { .. }), "{err}");
}
