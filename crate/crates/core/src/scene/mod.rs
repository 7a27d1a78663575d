//! Scene point clouds, object segmentation and per-object geometry.

mod fixture;
mod io;
pub mod palette;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use fixture::generate_fixture_scene;
pub use io::{load_scene, save_scene, scene_to_json, SceneFormat};

pub type Vec3 = [f64; 3];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Point {
    pub xyz: Vec3,
    /// Color components in [0, 1].
    pub rgb: Vec3,
}

/// A colored scene with one object label per point (`-1` = unlabeled).
#[derive(Clone, Debug, PartialEq)]
pub struct ScenePointCloud {
    pub scene_id: String,
    pub points: Vec<Point>,
    pub labels: Vec<i64>,
    pub classes: BTreeMap<i64, String>,
}

impl ScenePointCloud {
    /// Checks the structural invariants: non-empty, finite coordinates, colors in [0, 1].
    pub fn validate(&self) -> Result<()> {
        if self.points.is_empty() {
            return Err(Error::Precondition(format!("scene {} has no points", self.scene_id)));
        }
        if self.points.len() != self.labels.len() {
            return Err(Error::Precondition(format!(
                "scene {}: {} points but {} labels",
                self.scene_id,
                self.points.len(),
                self.labels.len()
            )));
        }
        for (i, p) in self.points.iter().enumerate() {
            if p.xyz.iter().any(|v| !v.is_finite()) {
                return Err(Error::Precondition(format!("point {i}: non-finite coordinate")));
            }
            if p.rgb.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::Precondition(format!("point {i}: color outside [0, 1]")));
            }
        }
        Ok(())
    }

    pub fn class_name(&self, label: i64) -> &str {
        self.classes.get(&label).map(String::as_str).unwrap_or("object")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegmentedObject {
    pub object_id: u32,
    pub class_name: String,
    pub points: Vec<Point>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectAttributes {
    pub center: Vec3,
    pub size: Vec3,
    pub mean_color: Vec3,
}

/// Axis-aligned box stored as center plus (length, width, height).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox3D {
    pub center: Vec3,
    pub extents: Vec3,
}

impl BBox3D {
    pub fn new(center: Vec3, extents: Vec3) -> Self {
        Self { center, extents }
    }

    pub fn from_corners(lo: Vec3, hi: Vec3) -> Self {
        Self {
            center: [0, 1, 2].map(|i| (lo[i] + hi[i]) / 2.0),
            extents: [0, 1, 2].map(|i| hi[i] - lo[i]),
        }
    }

    pub fn volume(&self) -> f64 {
        self.extents.iter().product()
    }

    pub fn min(&self) -> Vec3 {
        [0, 1, 2].map(|i| self.center[i] - self.extents[i] / 2.0)
    }

    pub fn max(&self) -> Vec3 {
        [0, 1, 2].map(|i| self.center[i] + self.extents[i] / 2.0)
    }

    /// Closed containment with slack `tol`.
    pub fn contains(&self, p: Vec3, tol: f64) -> bool {
        let (lo, hi) = (self.min(), self.max());
        (0..3).all(|i| p[i] >= lo[i] - tol && p[i] <= hi[i] + tol)
    }

    pub fn translated(&self, t: Vec3) -> Self {
        Self {
            center: [0, 1, 2].map(|i| self.center[i] + t[i]),
            extents: self.extents,
        }
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self {
            center: self.center.map(|v| v * s),
            extents: self.extents.map(|v| v * s),
        }
    }
}

/// One object per distinct non-negative label, in ascending id order.
pub fn segment_objects(scene: &ScenePointCloud) -> Vec<SegmentedObject> {
    let mut groups: BTreeMap<i64, Vec<Point>> = BTreeMap::new();
    for (p, &label) in scene.points.iter().zip(&scene.labels) {
        if label >= 0 {
            groups.entry(label).or_default().push(*p);
        }
    }
    groups
        .into_iter()
        .map(|(label, points)| SegmentedObject {
            object_id: label as u32,
            class_name: scene.class_name(label).to_string(),
            points,
        })
        .collect()
}

pub fn compute_attributes(obj: &SegmentedObject) -> Result<ObjectAttributes> {
    let Some(first) = obj.points.first() else {
        return Err(Error::Precondition(format!("object {} has no points", obj.object_id)));
    };
    let mut lo = first.xyz;
    let mut hi = first.xyz;
    let mut color = [0.0; 3];
    for p in &obj.points {
        for i in 0..3 {
            lo[i] = lo[i].min(p.xyz[i]);
            hi[i] = hi[i].max(p.xyz[i]);
            color[i] += p.rgb[i];
        }
    }
    let n = obj.points.len() as f64;
    Ok(ObjectAttributes {
        center: [0, 1, 2].map(|i| (lo[i] + hi[i]) / 2.0),
        size: [0, 1, 2].map(|i| hi[i] - lo[i]),
        mean_color: color.map(|c| c / n),
    })
}

pub fn bbox_of(attrs: &ObjectAttributes) -> BBox3D {
    BBox3D::new(attrs.center, attrs.size)
}

/// Everything downstream modules need to know about one object.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectSummary {
    pub object_id: u32,
    pub class_name: String,
    pub color_name: String,
    pub point_count: usize,
    pub attributes: ObjectAttributes,
    pub bbox: BBox3D,
}

/// Scene id plus per-object summaries, ascending by object id.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSummary {
    pub scene_id: String,
    pub point_count: usize,
    pub objects: Vec<ObjectSummary>,
}

pub fn summarize(scene: &ScenePointCloud) -> Result<SceneSummary> {
    let objects = segment_objects(scene)
        .iter()
        .map(|obj| {
            let attributes = compute_attributes(obj)?;
            Ok(ObjectSummary {
                object_id: obj.object_id,
                class_name: obj.class_name.clone(),
                color_name: palette::nearest_color_name(attributes.mean_color).to_string(),
                point_count: obj.points.len(),
                bbox: bbox_of(&attributes),
                attributes,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SceneSummary {
        scene_id: scene.scene_id.clone(),
        point_count: scene.points.len(),
        objects,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pt(xyz: Vec3, rgb: Vec3) -> Point {
        Point { xyz, rgb }
    }

    fn scene(points: Vec<Point>, labels: Vec<i64>) -> ScenePointCloud {
        ScenePointCloud {
            scene_id: "t".into(),
            points,
            labels,
            classes: BTreeMap::new(),
        }
    }

    #[test]
    fn segments_by_label() {
        let g = [0.5; 3];
        let s = scene(vec![pt([0.; 3], g), pt([1.; 3], g), pt([2.; 3], g)], vec![0, 0, 1]);
        let objs = segment_objects(&s);
        assert_eq!(objs.len(), 2);
        assert_eq!(objs[0].points.len(), 2);
        assert_eq!(objs[1].points.len(), 1);
    }

    #[test]
    fn unlabeled_scene_has_no_objects() {
        let s = scene(vec![pt([0.; 3], [0.; 3]); 3], vec![-1; 3]);
        assert!(segment_objects(&s).is_empty());
    }

    #[test]
    fn two_point_attributes() {
        let obj = SegmentedObject {
            object_id: 0,
            class_name: "x".into(),
            points: vec![pt([0.; 3], [0.5; 3]), pt([2.; 3], [0.5; 3])],
        };
        let a = compute_attributes(&obj).unwrap();
        assert_eq!(a.center, [1.0; 3]);
        assert_eq!(a.size, [2.0; 3]);
        assert_eq!(a.mean_color, [0.5; 3]);
        assert_eq!(bbox_of(&a).volume(), 8.0);
    }

    #[test]
    fn single_point_is_degenerate_box() {
        let p = [0.3, -1.0, 2.5];
        let obj = SegmentedObject {
            object_id: 4,
            class_name: "x".into(),
            points: vec![pt(p, [0.1, 0.2, 0.3])],
        };
        let a = compute_attributes(&obj).unwrap();
        assert_eq!(a.center, p);
        assert_eq!(a.size, [0.0; 3]);
        assert_eq!(bbox_of(&a).volume(), 0.0);
    }

    #[test]
    fn empty_object_is_rejected() {
        let obj = SegmentedObject {
            object_id: 0,
            class_name: "x".into(),
            points: vec![],
        };
        assert!(matches!(compute_attributes(&obj), Err(Error::Precondition(_))));
    }

    fn arb_scene() -> impl Strategy<Value = ScenePointCloud> {
        prop::collection::vec(
            (prop::array::uniform3(-5.0f64..5.0), prop::array::uniform3(0.0f64..=1.0), -1i64..4),
            1..60,
        )
        .prop_map(|rows| {
            let points = rows.iter().map(|(x, c, _)| pt(*x, *c)).collect();
            let labels = rows.iter().map(|r| r.2).collect();
            scene(points, labels)
        })
    }

    proptest! {
        #[test]
        fn partition_and_containment(s in arb_scene()) {
            let objs = segment_objects(&s);
            let labeled = s.labels.iter().filter(|&&l| l >= 0).count();
            prop_assert_eq!(objs.iter().map(|o| o.points.len()).sum::<usize>(), labeled);
            for w in objs.windows(2) {
                prop_assert!(w[0].object_id < w[1].object_id);
            }
            for o in &objs {
                let b = bbox_of(&compute_attributes(o).unwrap());
                for p in &o.points {
                    prop_assert!(b.contains(p.xyz, 1e-9));
                }
            }
        }

        #[test]
        fn scale_equivariance(s in arb_scene(), k in 1u32..8) {
            // Powers of two keep the scaling exact in floating point.
            let f = (1u64 << k) as f64 / 4.0;
            let mut scaled = s.clone();
            for p in &mut scaled.points {
                p.xyz = p.xyz.map(|v| v * f);
            }
            for (a, b) in segment_objects(&s).iter().zip(segment_objects(&scaled).iter()) {
                let (a, b) = (compute_attributes(a).unwrap(), compute_attributes(b).unwrap());
                for i in 0..3 {
                    prop_assert_eq!(a.center[i] * f, b.center[i]);
                    prop_assert_eq!(a.size[i] * f, b.size[i]);
                }
            }
        }
    }
}
