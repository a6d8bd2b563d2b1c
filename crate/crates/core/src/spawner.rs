//! Detection of new objects from rays that no tracklet claimed.
//!
//! For every class, each pair of rays from different cameras whose
//! closest-approach midpoint lies within `ray_proximity` of both seeds a
//! candidate. The candidate collects, per camera, the nearest ray within
//! `ray_proximity`, and its position is refined to the least-squares point
//! of those rays until the supporting set stops changing. Every settled set
//! is reseeded with one extra ray from each camera it does not use. Candidates whose ray set is contained in
//! another candidate's set are dropped, and of candidates closer than
//! `spawn_merge_radius` only the best supported survives.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, VecDeque};

use nalgebra::{Matrix3, Vector3};

use crate::camera::Ray;
use crate::scene_io::{Detection, Multiplicity, Tuning, Workspace};

/// A detection turned into a ray from its camera.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservedRay {
    pub camera_id: String,
    pub detection: Detection,
    pub ray: Ray,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IntersectionCandidate {
    pub position: Vector3<f64>,
    pub class_name: String,
    /// At most one ray per camera, ordered by camera id.
    pub supporting: Vec<ObservedRay>,
    /// Number of supporting rays after nearly parallel rays are merged.
    pub camera_support: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpawnConfig {
    pub ray_proximity: f64,
    pub spawn_merge_radius: f64,
    /// Radians.
    pub parallel_angle: f64,
    pub suppression_radius: f64,
    pub relaxation_factor: f64,
    pub relaxation_period: u64,
    pub workspace: Workspace,
}

impl SpawnConfig {
    pub fn new(tuning: &Tuning, workspace: Workspace) -> Self {
        Self {
            ray_proximity: tuning.ray_proximity,
            spawn_merge_radius: tuning.spawn_merge_radius,
            parallel_angle: tuning.parallel_angle(),
            suppression_radius: tuning.suppression_radius,
            relaxation_factor: tuning.relaxation_factor,
            relaxation_period: tuning.relaxation_period,
            workspace,
        }
    }
}

impl Default for SpawnConfig {
    fn default() -> Self {
        Self::new(&Tuning::default(), Workspace::default())
    }
}

/// Point minimizing the summed squared distance to the lines through `rays`.
pub fn least_squares_point<'a>(rays: impl IntoIterator<Item = &'a Ray>) -> Option<Vector3<f64>> {
    let mut a = Matrix3::zeros();
    let mut b = Vector3::zeros();
    for ray in rays {
        let d = ray.direction();
        let m = Matrix3::identity() - d * d.transpose();
        a += m;
        b += m * ray.origin;
    }
    let p = a.cholesky()?.solve(&b);
    p.iter().all(|v| v.is_finite()).then_some(p)
}

/// Number of rays left after grouping rays whose directions lie within
/// `parallel_angle` of a group's first ray.
pub fn effective_support<'a>(
    rays: impl IntoIterator<Item = &'a Ray>,
    parallel_angle: f64,
) -> usize {
    let mut groups: Vec<&Ray> = Vec::new();
    for ray in rays {
        if !groups.iter().any(|g| g.angle_to(ray) < parallel_angle) {
            groups.push(ray);
        }
    }
    groups.len()
}

/// Unique classes need two effective rays, classes with several instances
/// need three.
pub fn apply_support_rule(candidate: &IntersectionCandidate, multiplicity: Multiplicity) -> bool {
    let required = match multiplicity {
        Multiplicity::Unique => 2,
        Multiplicity::Multiple => 3,
    };
    candidate.camera_support >= required
}

struct ClassRays<'a> {
    rays: &'a [ObservedRay],
    /// Ray indices grouped per camera, cameras in id order.
    by_camera: Vec<Vec<usize>>,
}

impl<'a> ClassRays<'a> {
    fn new(rays: &'a [ObservedRay]) -> Self {
        let mut cams: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for (i, r) in rays.iter().enumerate() {
            cams.entry(r.camera_id.as_str()).or_default().push(i);
        }
        Self {
            rays,
            by_camera: cams.into_values().collect(),
        }
    }

    /// Per camera, the ray nearest to `p` if within `threshold`.
    fn gather(&self, p: &Vector3<f64>, threshold: f64) -> Vec<usize> {
        let mut set = Vec::new();
        for idx in &self.by_camera {
            let best = idx
                .iter()
                .map(|&i| (i, self.rays[i].ray.distance_to(p)))
                .filter(|(_, d)| *d <= threshold)
                .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
            if let Some((i, _)) = best {
                set.push(i);
            }
        }
        set.sort_unstable();
        set
    }

    fn point(&self, set: &[usize]) -> Option<Vector3<f64>> {
        least_squares_point(set.iter().map(|&i| &self.rays[i].ray))
    }
}

struct Found {
    set: Vec<usize>,
    position: Vector3<f64>,
    support: usize,
    residual: f64,
}

const MAX_REFINEMENTS: usize = 10;

impl ClassRays<'_> {
    /// Alternates least-squares point and gather until the set is stable.
    fn settle(&self, mut set: Vec<usize>, threshold: f64) -> Option<(Vec<usize>, Vector3<f64>)> {
        for _ in 0..MAX_REFINEMENTS {
            if set.len() < 2 {
                return None;
            }
            let p = self.point(&set)?;
            let next = self.gather(&p, threshold);
            if next == set {
                return Some((set, p));
            }
            set = next;
        }
        None
    }
}

fn candidates_for_class(rays: &[ObservedRay], config: &SpawnConfig) -> Vec<Found> {
    let class = ClassRays::new(rays);
    let mut seeds: VecDeque<Vec<usize>> = VecDeque::new();
    for i in 0..rays.len() {
        for j in i + 1..rays.len() {
            let (a, b) = (&rays[i], &rays[j]);
            if a.camera_id == b.camera_id || a.ray.angle_to(&b.ray) < config.parallel_angle {
                continue;
            }
            let Some((t, s)) = a.ray.closest_parameters(&b.ray) else {
                continue;
            };
            if t <= 0.0 || s <= 0.0 {
                continue;
            }
            let (pa, pb) = (a.ray.at(t), b.ray.at(s));
            if 0.5 * (pa - pb).norm() > config.ray_proximity {
                continue;
            }
            seeds.push_back(class.gather(&((pa + pb) * 0.5), config.ray_proximity));
        }
    }

    let mut found: Vec<Found> = Vec::new();
    let mut tried: BTreeSet<Vec<usize>> = BTreeSet::new();
    while let Some(seed) = seeds.pop_front() {
        if !tried.insert(seed.clone()) {
            continue;
        }
        let Some((set, position)) = class.settle(seed, config.ray_proximity) else {
            continue;
        };
        if found.iter().any(|f| f.set == set) {
            continue;
        }
        if !config.workspace.contains(&position)
            || set
                .iter()
                .any(|&k| rays[k].ray.parameter_of(&position) <= 0.0)
        {
            continue;
        }
        let support = effective_support(set.iter().map(|&k| &rays[k].ray), config.parallel_angle);
        if support < 2 {
            continue;
        }
        // clusters grow one ray at a time from cameras they do not use yet
        for cam in &class.by_camera {
            if cam.iter().any(|k| set.contains(k)) {
                continue;
            }
            for &k in cam {
                let mut grown = set.clone();
                grown.push(k);
                grown.sort_unstable();
                seeds.push_back(grown);
            }
        }
        let residual = set
            .iter()
            .map(|&k| rays[k].ray.distance_to(&position).powi(2))
            .sum();
        found.push(Found {
            set,
            position,
            support,
            residual,
        });
    }

    // drop candidates explained by a larger ray set
    let maximal: Vec<bool> = found
        .iter()
        .map(|f| {
            !found
                .iter()
                .any(|g| g.set.len() > f.set.len() && f.set.iter().all(|k| g.set.contains(k)))
        })
        .collect();
    let mut found: Vec<Found> = found
        .into_iter()
        .zip(maximal)
        .filter_map(|(f, keep)| keep.then_some(f))
        .collect();

    found.sort_by(|a, b| {
        b.support
            .cmp(&a.support)
            .then(b.set.len().cmp(&a.set.len()))
            .then(a.residual.total_cmp(&b.residual))
            .then(cmp_position(&a.position, &b.position))
    });
    let mut kept: Vec<Found> = Vec::new();
    for f in found {
        if kept
            .iter()
            .all(|k| (k.position - f.position).norm() >= config.spawn_merge_radius)
        {
            kept.push(f);
        }
    }
    kept
}

fn cmp_position(a: &Vector3<f64>, b: &Vector3<f64>) -> Ordering {
    a.x.total_cmp(&b.x)
        .then(a.y.total_cmp(&b.y))
        .then(a.z.total_cmp(&b.z))
}

/// Intersection candidates of same-class rays, sorted by class and then
/// position.
pub fn find_intersections(
    rays_by_class: &BTreeMap<String, Vec<ObservedRay>>,
    config: &SpawnConfig,
) -> Vec<IntersectionCandidate> {
    let mut out = Vec::new();
    for (class_name, rays) in rays_by_class {
        let mut found = candidates_for_class(rays, config);
        found.sort_by(|a, b| cmp_position(&a.position, &b.position));
        out.extend(found.into_iter().map(|f| IntersectionCandidate {
            position: f.position,
            class_name: class_name.clone(),
            supporting: f.set.iter().map(|&k| rays[k].clone()).collect(),
            camera_support: f.support,
        }));
    }
    out
}

/// Suppression radius in effect on `frame_index`.
pub fn suppression_radius(config: &SpawnConfig, frame_index: i64) -> f64 {
    let period = config.relaxation_period.max(1) as i64;
    if frame_index.rem_euclid(period) == 0 {
        config.suppression_radius * config.relaxation_factor
    } else {
        config.suppression_radius
    }
}

/// Removes candidates within the suppression radius of an active tracklet of
/// the same class. `tracklets` holds `(class, position)` pairs.
pub fn suppress_near_tracklets(
    candidates: Vec<IntersectionCandidate>,
    tracklets: &[(&str, Vector3<f64>)],
    frame_index: i64,
    config: &SpawnConfig,
) -> Vec<IntersectionCandidate> {
    let radius = suppression_radius(config, frame_index);
    candidates
        .into_iter()
        .filter(|c| {
            !tracklets
                .iter()
                .any(|(class, p)| *class == c.class_name && (p - c.position).norm() < radius)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene_io::BoundingBox;

    fn observed(
        camera: &str,
        class: &str,
        origin: Vector3<f64>,
        target: Vector3<f64>,
    ) -> ObservedRay {
        ObservedRay {
            camera_id: camera.into(),
            detection: Detection {
                class_name: class.into(),
                bbox: BoundingBox {
                    x: 0.0,
                    y: 0.0,
                    w: 0.0,
                    h: 0.0,
                },
                confidence: 1.0,
                timestamp: 0.0,
                camera_id: camera.into(),
            },
            ray: Ray::new(origin, target - origin).unwrap(),
        }
    }

    fn by_class(rays: Vec<ObservedRay>) -> BTreeMap<String, Vec<ObservedRay>> {
        let mut m: BTreeMap<String, Vec<ObservedRay>> = BTreeMap::new();
        for r in rays {
            m.entry(r.detection.class_name.clone()).or_default().push(r);
        }
        m
    }

    #[test]
    fn exact_crossing_is_found() {
        let p = Vector3::new(0.3, -0.2, 0.8);
        let rays = by_class(vec![
            observed("a", "cereal", Vector3::new(2.0, 0.0, 2.0), p),
            observed("b", "cereal", Vector3::new(0.0, 2.5, 3.0), p),
        ]);
        let c = find_intersections(&rays, &SpawnConfig::default());
        assert_eq!(c.len(), 1);
        assert!((c[0].position - p).norm() < 1e-9);
        assert_eq!(c[0].camera_support, 2);
        assert!(apply_support_rule(&c[0], Multiplicity::Unique));
        assert!(!apply_support_rule(&c[0], Multiplicity::Multiple));
    }

    #[test]
    fn parallel_rays_give_nothing() {
        let rays = by_class(vec![
            observed(
                "a",
                "cereal",
                Vector3::new(0.0, 0.0, 2.0),
                Vector3::new(0.0, 3.0, 2.0),
            ),
            observed(
                "b",
                "cereal",
                Vector3::new(0.05, 0.0, 2.0),
                Vector3::new(0.05, 3.0, 2.0),
            ),
        ]);
        assert!(find_intersections(&rays, &SpawnConfig::default()).is_empty());
    }

    #[test]
    fn same_camera_rays_do_not_pair() {
        let p = Vector3::new(0.0, 0.0, 0.8);
        let o = Vector3::new(2.0, 0.0, 2.0);
        let rays = by_class(vec![
            observed("a", "cereal", o, p),
            observed("a", "cereal", o, p + Vector3::new(0.0, 0.5, 0.0)),
        ]);
        assert!(find_intersections(&rays, &SpawnConfig::default()).is_empty());
    }

    #[test]
    fn nearly_parallel_pair_counts_once() {
        let p = Vector3::new(0.0, 0.0, 0.8);
        let rays = by_class(vec![
            observed("a", "plate", Vector3::new(3.0, 0.0, 2.0), p),
            // 10 cm beside camera a: nearly the same direction
            observed("b", "plate", Vector3::new(3.0, 0.1, 2.0), p),
            observed("c", "plate", Vector3::new(0.0, 3.0, 2.5), p),
        ]);
        let c = find_intersections(&rays, &SpawnConfig::default());
        assert_eq!(c.len(), 1);
        assert_eq!(c[0].supporting.len(), 3);
        assert_eq!(c[0].camera_support, 2);
        assert!(!apply_support_rule(&c[0], Multiplicity::Multiple));
    }

    #[test]
    fn outside_workspace_rejected() {
        let p = Vector3::new(0.0, 0.0, -3.0);
        let rays = by_class(vec![
            observed("a", "cereal", Vector3::new(2.0, 0.0, 2.0), p),
            observed("b", "cereal", Vector3::new(0.0, 2.5, 3.0), p),
        ]);
        assert!(find_intersections(&rays, &SpawnConfig::default()).is_empty());
    }

    #[test]
    fn crossing_behind_cameras_rejected() {
        // the lines meet behind both camera centers
        let rays = by_class(vec![
            observed(
                "a",
                "cereal",
                Vector3::new(1.0, 0.0, 1.0),
                Vector3::new(2.0, 0.0, 1.0),
            ),
            observed(
                "b",
                "cereal",
                Vector3::new(0.0, 1.0, 1.0),
                Vector3::new(0.0, 2.0, 1.0),
            ),
        ]);
        assert!(find_intersections(&rays, &SpawnConfig::default()).is_empty());
    }

    fn candidate_at(class: &str, p: Vector3<f64>) -> IntersectionCandidate {
        IntersectionCandidate {
            position: p,
            class_name: class.into(),
            supporting: vec![],
            camera_support: 3,
        }
    }

    #[test]
    fn suppression_and_relaxation() {
        let config = SpawnConfig::default();
        let t = Vector3::new(0.0, 0.0, 0.8);
        let near = candidate_at("plate", t + Vector3::new(0.01, 0.0, 0.0));
        let mid = candidate_at("plate", t + Vector3::new(0.05, 0.0, 0.0));
        let tracklets = [("plate", t)];

        let kept = suppress_near_tracklets(vec![near.clone(), mid.clone()], &tracklets, 7, &config);
        assert!(kept.is_empty());

        // relaxation frame: radius 15 cm * 0.15 = 2.25 cm
        assert!((suppression_radius(&config, 300) - 0.0225).abs() < 1e-12);
        let kept = suppress_near_tracklets(vec![near, mid.clone()], &tracklets, 300, &config);
        assert_eq!(kept, vec![mid]);

        let other = candidate_at("cup-coffee", t + Vector3::new(0.01, 0.0, 0.0));
        let kept = suppress_near_tracklets(vec![other.clone()], &tracklets, 7, &config);
        assert_eq!(kept, vec![other]);
    }

    #[test]
    fn least_squares_point_of_skew_lines_is_midpoint() {
        let a = Ray::new(Vector3::new(-1.0, 0.0, 0.0), Vector3::x()).unwrap();
        let b = Ray::new(Vector3::new(0.0, -1.0, 0.2), Vector3::y()).unwrap();
        let p = least_squares_point([&a, &b]).unwrap();
        assert!((p - Vector3::new(0.0, 0.0, 0.1)).norm() < 1e-12);
        assert!(least_squares_point([&a]).is_none());
    }
}
