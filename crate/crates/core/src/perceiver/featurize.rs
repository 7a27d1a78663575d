//! Frozen scene and object descriptors and the coordinate position code.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::scene::{compute_attributes, segment_objects, ObjectAttributes, Point, ScenePointCloud, SegmentedObject};

pub const SCENE_FEATURE_DIM: usize = 256;
pub const OBJECT_FEATURE_DIM: usize = 256;

const SCENE_FREQS: usize = 18;
const OBJECT_FREQS: usize = 10;
const COLOR_BINS: usize = 8;
const OCCUPANCY: usize = 4;
const MARGINAL_BINS: usize = 16;
const POSITION_BASE: f64 = 10000.0;

/// Featurizer output for one scene: `fs` plus `fo` and attributes per object.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneFeatures {
    pub scene_id: String,
    pub scene: Vec<f64>,
    pub objects: Vec<ObjectFeatures>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectFeatures {
    pub object_id: u32,
    pub features: Vec<f64>,
    pub attributes: ObjectAttributes,
}

/// Points in a canonical order, so pooled sums do not depend on input order.
fn sorted_points(points: &[Point]) -> Vec<Point> {
    let mut p = points.to_vec();
    p.sort_by(|a, b| {
        a.xyz
            .iter()
            .chain(&a.rgb)
            .zip(b.xyz.iter().chain(&b.rgb))
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    p
}

/// Mean and max pooling of per-point `[sin, cos]` features, axis-major.
fn pooled_fourier(coords: &[[f64; 3]], freqs: &[f64], out: &mut Vec<f64>) {
    let width = 3 * 2 * freqs.len();
    let mut sum = vec![0.0; width];
    let mut max = vec![f64::NEG_INFINITY; width];
    for c in coords {
        let mut k = 0;
        for axis in c {
            for w in freqs {
                for v in [(w * axis).sin(), (w * axis).cos()] {
                    sum[k] += v;
                    max[k] = max[k].max(v);
                    k += 1;
                }
            }
        }
    }
    let n = coords.len() as f64;
    out.extend(sum.iter().map(|s| s / n));
    out.extend(max);
}

fn histogram(values: impl Iterator<Item = f64>, bins: usize, n: usize, out: &mut Vec<f64>) {
    let mut h = vec![0.0; bins];
    for v in values {
        let b = ((v * bins as f64).floor() as isize).clamp(0, bins as isize - 1) as usize;
        h[b] += 1.0;
    }
    out.extend(h.iter().map(|c| c / n as f64));
}

fn color_histograms(points: &[Point], out: &mut Vec<f64>) {
    for ch in 0..3 {
        histogram(points.iter().map(|p| p.rgb[ch]), COLOR_BINS, points.len(), out);
    }
}

fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Fixed 256-dim scene descriptor over all points, labelled or not: pooled
/// Fourier features of coordinates, color histograms, global box, color and
/// spread statistics, and log point count.
pub fn scene_featurizer(scene: &ScenePointCloud) -> Vec<f64> {
    let points = sorted_points(&scene.points);
    let freqs: Vec<f64> = (0..SCENE_FREQS).map(|k| 2f64.powf(k as f64 / 3.0 - 2.0)).collect();
    let coords: Vec<[f64; 3]> = points.iter().map(|p| p.xyz).collect();
    let mut out = Vec::with_capacity(SCENE_FEATURE_DIM);
    pooled_fourier(&coords, &freqs, &mut out);
    color_histograms(&points, &mut out);
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for c in &coords {
        for i in 0..3 {
            lo[i] = lo[i].min(c[i]);
            hi[i] = hi[i].max(c[i]);
        }
    }
    out.extend((0..3).map(|i| (lo[i] + hi[i]) / 2.0));
    out.extend((0..3).map(|i| hi[i] - lo[i]));
    let color_stats: Vec<(f64, f64)> = (0..3).map(|ch| mean_std(points.iter().map(move |p| p.rgb[ch]))).collect();
    out.extend(color_stats.iter().map(|s| s.0));
    out.extend(color_stats.iter().map(|s| s.1));
    out.extend((0..3).map(|i| mean_std(coords.iter().map(move |c| c[i])).1));
    out.push((points.len() as f64).ln());
    debug_assert_eq!(out.len(), SCENE_FEATURE_DIM);
    out
}

/// Fixed 256-dim shape descriptor on coordinates normalized to the object's
/// own box, so it ignores position and uniform scale. Degenerate axes map to 0.5.
pub fn object_featurizer(obj: &SegmentedObject) -> Vec<f64> {
    let points = sorted_points(&obj.points);
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in &points {
        for i in 0..3 {
            lo[i] = lo[i].min(p.xyz[i]);
            hi[i] = hi[i].max(p.xyz[i]);
        }
    }
    let unit: Vec<[f64; 3]> = points
        .iter()
        .map(|p| {
            [0, 1, 2].map(|i| {
                let span = hi[i] - lo[i];
                if span > 0.0 {
                    (p.xyz[i] - lo[i]) / span
                } else {
                    0.5
                }
            })
        })
        .collect();
    let n = points.len();
    let freqs: Vec<f64> = (0..OBJECT_FREQS).map(|k| (k + 1) as f64 * std::f64::consts::FRAC_PI_2).collect();
    let mut out = Vec::with_capacity(OBJECT_FEATURE_DIM);
    pooled_fourier(&unit, &freqs, &mut out);
    let cell = |v: f64| ((v * OCCUPANCY as f64).floor() as usize).min(OCCUPANCY - 1);
    let mut occ = vec![0.0; OCCUPANCY.pow(3)];
    for u in &unit {
        occ[(cell(u[0]) * OCCUPANCY + cell(u[1])) * OCCUPANCY + cell(u[2])] += 1.0;
    }
    out.extend(occ.iter().map(|c| c / n as f64));
    color_histograms(&points, &mut out);
    for i in 0..3 {
        histogram(unit.iter().map(|u| u[i]), MARGINAL_BINS, n, &mut out);
    }
    debug_assert_eq!(out.len(), OBJECT_FEATURE_DIM);
    out
}

/// `[sin(ω_k·c), cos(ω_k·c)]` for each axis and ω_k = 10000^(−k/n_freq).
pub fn encode_position(center: [f64; 3], n_freq: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(6 * n_freq);
    for c in center {
        for k in 0..n_freq {
            let w = POSITION_BASE.powf(-(k as f64) / n_freq as f64);
            out.push((w * c).sin());
            out.push((w * c).cos());
        }
    }
    out
}

/// Runs both featurizers over a scene; objects in ascending id order.
pub fn featurize_scene(scene: &ScenePointCloud) -> Result<SceneFeatures> {
    let objects = segment_objects(scene)
        .iter()
        .map(|o| {
            Ok(ObjectFeatures {
                object_id: o.object_id,
                features: object_featurizer(o),
                attributes: compute_attributes(o)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SceneFeatures {
        scene_id: scene.scene_id.clone(),
        scene: scene_featurizer(scene),
        objects,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::generate_fixture_scene;
    use rand::seq::SliceRandom;
    use rand::SeedableRng;

    #[test]
    fn dims_and_determinism() {
        let (scene, _) = generate_fixture_scene(3, 5, 40);
        let a = featurize_scene(&scene).unwrap();
        assert_eq!(a.scene.len(), SCENE_FEATURE_DIM);
        assert!(a.objects.iter().all(|o| o.features.len() == OBJECT_FEATURE_DIM));
        assert_eq!(a, featurize_scene(&scene).unwrap());
        assert!(a.scene.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn translation_moves_fourier_but_not_histograms() {
        let (scene, _) = generate_fixture_scene(4, 4, 30);
        let mut moved = scene.clone();
        for p in &mut moved.points {
            p.xyz[0] += 10.0;
        }
        let (a, b) = (scene_featurizer(&scene), scene_featurizer(&moved));
        let fourier = 0..3 * 2 * SCENE_FREQS * 2;
        let hist = fourier.end..fourier.end + 3 * COLOR_BINS;
        assert_eq!(a[hist.clone()], b[hist]);
        assert_ne!(a[fourier.clone()], b[fourier]);
    }

    #[test]
    fn unlabelled_scene_still_featurizes() {
        let (mut scene, _) = generate_fixture_scene(5, 2, 10);
        scene.labels.iter_mut().for_each(|l| *l = -1);
        let f = featurize_scene(&scene).unwrap();
        assert!(f.objects.is_empty());
        assert_eq!(f.scene.len(), SCENE_FEATURE_DIM);
    }

    #[test]
    fn object_features_ignore_pose_and_scale() {
        let (scene, _) = generate_fixture_scene(6, 1, 50);
        let obj = &segment_objects(&scene)[0];
        let base = object_featurizer(obj);
        let mut moved = obj.clone();
        for p in &mut moved.points {
            p.xyz = [p.xyz[0] + 3.25, p.xyz[1] - 1.5, p.xyz[2] + 0.75];
        }
        let mut scaled = obj.clone();
        for p in &mut scaled.points {
            p.xyz = p.xyz.map(|v| v * 2.5);
        }
        for other in [object_featurizer(&moved), object_featurizer(&scaled)] {
            let diff = base.iter().zip(&other).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(diff < 1e-9, "{diff}");
        }
    }

    #[test]
    fn point_order_does_not_matter() {
        let (scene, _) = generate_fixture_scene(8, 6, 25);
        let mut shuffled = scene.clone();
        let mut idx: Vec<usize> = (0..scene.points.len()).collect();
        idx.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(0));
        shuffled.points = idx.iter().map(|&i| scene.points[i]).collect();
        shuffled.labels = idx.iter().map(|&i| scene.labels[i]).collect();
        assert_eq!(featurize_scene(&scene).unwrap(), featurize_scene(&shuffled).unwrap());
    }

    #[test]
    fn position_code() {
        let z = encode_position([0.0; 3], 8);
        assert_eq!(z.len(), 48);
        for k in 0..24 {
            assert_eq!(z[2 * k], 0.0);
            assert_eq!(z[2 * k + 1], 1.0);
        }
        // ω_0 = 1, so x = π/2 puts the first sine at its peak.
        let p = encode_position([std::f64::consts::FRAC_PI_2, 0.0, 0.0], 8);
        assert!((p[0] - 1.0).abs() < 1e-15);
        let big = encode_position([1e4, -333.3, 7.0], 8);
        assert!(big.iter().all(|v| (-1.0..=1.0).contains(v)));
    }
}
