//! Deterministic cuboid scenes with exact ground truth.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::palette::{class_color, CLASSES};
use super::{BBox3D, Point, ScenePointCloud};

const CELL: f64 = 1.6;

fn quantize(v: f64) -> f64 {
    (v * 100.0).round() / 100.0
}

/// Builds a room of `n_objects` non-overlapping cuboids on a floor grid.
///
/// The first two points of every object are its opposite box corners, so the
/// point-derived box reproduces the returned ground truth. Centers and extents
/// sit on a 1 cm grid, so their two-decimal answer strings are exact.
pub fn generate_fixture_scene(
    seed: u64,
    n_objects: usize,
    points_per_object: usize,
) -> (ScenePointCloud, Vec<(String, BBox3D)>) {
    assert!(n_objects >= 1, "fixture needs at least one object");
    assert!(points_per_object >= 2, "fixture objects need two corner points");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let side = (n_objects as f64).sqrt().ceil() as usize;
    let mut cells: Vec<(usize, usize)> = (0..side * side).map(|i| (i % side, i / side)).collect();
    cells.shuffle(&mut rng);

    let mut class_ids: Vec<usize> = Vec::with_capacity(n_objects);
    for _ in 0..n_objects {
        let c = if !class_ids.is_empty() && rng.random_bool(0.3) {
            class_ids[rng.random_range(0..class_ids.len())]
        } else {
            rng.random_range(0..CLASSES.len())
        };
        class_ids.push(c);
    }

    let mut points = Vec::with_capacity(n_objects * points_per_object);
    let mut labels = Vec::with_capacity(points.capacity());
    let mut classes = BTreeMap::new();
    let mut truth = Vec::with_capacity(n_objects);
    for (obj, &class) in class_ids.iter().enumerate() {
        let (cx, cy) = cells[obj];
        let extents = [
            quantize(rng.random_range(0.3..1.3)),
            quantize(rng.random_range(0.3..1.3)),
            // Even centimetres, so the floor-resting center height stays on the 1 cm grid.
            2.0 * quantize(rng.random_range(0.1..0.9)),
        ];
        let center = [
            quantize(cx as f64 * CELL + CELL / 2.0 + rng.random_range(-0.1..0.1)),
            quantize(cy as f64 * CELL + CELL / 2.0 + rng.random_range(-0.1..0.1)),
            extents[2] / 2.0,
        ];
        let bbox = BBox3D::new(center, extents);
        let (lo, hi) = (bbox.min(), bbox.max());
        let rgb = class_color(class).rgb.map(|v| v as f64 / 255.0);

        points.push(Point { xyz: lo, rgb });
        points.push(Point { xyz: hi, rgb });
        for _ in 2..points_per_object {
            let xyz = [0, 1, 2].map(|i| lo[i] + rng.random::<f64>() * (hi[i] - lo[i]));
            points.push(Point { xyz, rgb });
        }
        labels.extend(std::iter::repeat_n(obj as i64, points_per_object));
        let name = CLASSES[class].0.to_string();
        classes.insert(obj as i64, name.clone());
        truth.push((name, bbox));
    }

    let scene = ScenePointCloud {
        scene_id: format!("fixture{seed:04}"),
        points,
        labels,
        classes,
    };
    (scene, truth)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::iou_3d;
    use crate::scene::{bbox_of, compute_attributes, scene_to_json, segment_objects};

    #[test]
    fn deterministic_per_seed() {
        let a = generate_fixture_scene(0, 8, 64);
        let b = generate_fixture_scene(0, 8, 64);
        assert_eq!(scene_to_json(&a.0), scene_to_json(&b.0));
        assert_eq!(a.1, b.1);
        assert_ne!(scene_to_json(&generate_fixture_scene(1, 8, 64).0), scene_to_json(&a.0));
    }

    #[test]
    fn minimal_scene_is_valid() {
        let (scene, truth) = generate_fixture_scene(5, 1, 2);
        scene.validate().unwrap();
        assert_eq!(scene.points.len(), 2);
        assert_eq!(truth.len(), 1);
    }

    #[test]
    fn pipeline_recovers_ground_truth_boxes() {
        let (scene, truth) = generate_fixture_scene(7, 8, 200);
        let objs = segment_objects(&scene);
        assert_eq!(objs.len(), 8);
        for (obj, (class, gt)) in objs.iter().zip(&truth) {
            assert_eq!(&obj.class_name, class);
            let b = bbox_of(&compute_attributes(obj).unwrap());
            assert!(iou_3d(&b, gt) >= 0.9);
            for i in 0..3 {
                assert!((b.center[i] - gt.center[i]).abs() < 1e-9);
                assert!((b.extents[i] - gt.extents[i]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn boxes_do_not_overlap() {
        let (_, truth) = generate_fixture_scene(11, 9, 2);
        for i in 0..truth.len() {
            for j in i + 1..truth.len() {
                assert_eq!(iou_3d(&truth[i].1, &truth[j].1), 0.0);
            }
        }
    }
}
