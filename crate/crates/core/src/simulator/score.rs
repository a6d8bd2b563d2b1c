use std::collections::BTreeMap;

use nalgebra::Vector3;

use crate::scene_io::TrajectoryRecord;

/// Max distance (m) between a produced tracklet's first position and a
/// ground-truth object for the two to be matched.
pub const DEFAULT_MATCH_RADIUS: f64 = 0.3;

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectScore {
    pub class_name: String,
    /// Ids of the produced tracklets matched to this object.
    pub tracklets: Vec<u64>,
    pub rmse: f64,
    pub samples: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackingScore {
    /// Position RMSE (m) pooled over all matched timesteps.
    pub rmse: f64,
    pub samples: usize,
    /// Per ground-truth object id.
    pub objects: BTreeMap<u64, ObjectScore>,
    pub produced: usize,
    /// Produced tracklets matching no ground-truth object.
    pub ghosts: Vec<u64>,
    /// Extra tracklets beyond the first, summed over objects.
    pub fragmentation: usize,
    /// Ground-truth objects without any matched tracklet.
    pub missed: Vec<u64>,
}

/// Position of a ground-truth record at time `t`, linearly interpolated.
fn position_at(record: &TrajectoryRecord, t: f64) -> Option<Vector3<f64>> {
    let steps = &record.timesteps;
    let first = steps.first()?;
    let last = steps.last()?;
    if t <= first.time {
        return Some(first.position());
    }
    if t >= last.time {
        return Some(last.position());
    }
    let k = steps.partition_point(|s| s.time <= t);
    let (a, b) = (&steps[k - 1], &steps[k]);
    let s = (t - a.time) / (b.time - a.time);
    Some(a.position().lerp(&b.position(), s))
}

/// Matches each produced tracklet to the nearest same-class ground-truth
/// object at the tracklet's first timestep, then measures position errors
/// over all of the tracklet's timesteps.
pub fn score_trajectories(
    produced: &[TrajectoryRecord],
    ground_truth: &[TrajectoryRecord],
    match_radius: f64,
) -> TrackingScore {
    let mut objects: BTreeMap<u64, ObjectScore> = ground_truth
        .iter()
        .map(|g| {
            (
                g.id,
                ObjectScore {
                    class_name: g.class_name.clone(),
                    tracklets: vec![],
                    rmse: 0.0,
                    samples: 0,
                },
            )
        })
        .collect();
    let mut sums: BTreeMap<u64, f64> = BTreeMap::new();
    let mut ghosts = Vec::new();

    let mut order: Vec<&TrajectoryRecord> = produced
        .iter()
        .filter(|r| !r.timesteps.is_empty())
        .collect();
    order.sort_by(|a, b| {
        a.timesteps[0]
            .time
            .total_cmp(&b.timesteps[0].time)
            .then(a.id.cmp(&b.id))
    });
    for record in order {
        let start = &record.timesteps[0];
        let best = ground_truth
            .iter()
            .filter(|g| g.class_name == record.class_name)
            .filter_map(|g| position_at(g, start.time).map(|p| (g, (p - start.position()).norm())))
            .filter(|(_, d)| *d <= match_radius)
            .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.id.cmp(&b.0.id)));
        let Some((gt, _)) = best else {
            ghosts.push(record.id);
            continue;
        };
        let entry = objects.get_mut(&gt.id).expect("ground truth id");
        entry.tracklets.push(record.id);
        for step in &record.timesteps {
            let truth = position_at(gt, step.time).expect("non-empty ground truth");
            *sums.entry(gt.id).or_insert(0.0) += (step.position() - truth).norm_squared();
            entry.samples += 1;
        }
    }

    let mut total = 0.0;
    let mut samples = 0;
    let mut fragmentation = 0;
    let mut missed = Vec::new();
    for (id, score) in objects.iter_mut() {
        let sum = sums.get(id).copied().unwrap_or(0.0);
        if score.samples > 0 {
            score.rmse = (sum / score.samples as f64).sqrt();
        }
        total += sum;
        samples += score.samples;
        if score.tracklets.is_empty() {
            missed.push(*id);
        } else {
            fragmentation += score.tracklets.len() - 1;
        }
    }
    TrackingScore {
        rmse: if samples > 0 {
            (total / samples as f64).sqrt()
        } else {
            0.0
        },
        samples,
        objects,
        produced: produced.len(),
        ghosts,
        fragmentation,
        missed,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene_io::TrajectoryStep;
    use nalgebra::Matrix3;

    fn record(id: u64, class: &str, z: f64) -> TrajectoryRecord {
        TrajectoryRecord {
            id,
            class_name: class.into(),
            timesteps: (0..10)
                .map(|i| {
                    TrajectoryStep::new(
                        i as f64 * 0.1,
                        &Vector3::new(i as f64 * 0.01, 0.0, z),
                        &Matrix3::zeros(),
                    )
                })
                .collect(),
        }
    }

    #[test]
    fn identical_inputs_score_perfectly() {
        let gt = vec![record(0, "plate", 0.0), record(1, "cereal", 1.0)];
        let s = score_trajectories(&gt, &gt, DEFAULT_MATCH_RADIUS);
        assert_eq!(s.rmse, 0.0);
        assert!(s.ghosts.is_empty() && s.missed.is_empty());
        assert_eq!(s.fragmentation, 0);
    }

    #[test]
    fn constant_offset_gives_that_rmse() {
        let gt = vec![record(0, "plate", 0.0)];
        let produced = vec![record(7, "plate", 0.1)];
        let s = score_trajectories(&produced, &gt, DEFAULT_MATCH_RADIUS);
        assert!((s.rmse - 0.10).abs() < 1e-12);
        assert_eq!(s.objects[&0].tracklets, vec![7]);
    }

    #[test]
    fn unmatched_are_ghosts_and_missed() {
        let gt = vec![record(0, "plate", 0.0)];
        let produced = vec![record(1, "cereal", 0.0), record(2, "plate", 5.0)];
        let s = score_trajectories(&produced, &gt, DEFAULT_MATCH_RADIUS);
        assert_eq!(s.ghosts, vec![1, 2]);
        assert_eq!(s.missed, vec![0]);
    }

    #[test]
    fn fragments_counted() {
        let gt = vec![record(0, "plate", 0.0)];
        let produced = vec![record(1, "plate", 0.0), record(2, "plate", 0.01)];
        let s = score_trajectories(&produced, &gt, DEFAULT_MATCH_RADIUS);
        assert_eq!(s.fragmentation, 1);
    }
}
