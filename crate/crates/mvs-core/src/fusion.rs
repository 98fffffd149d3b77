//! Depth-map fusion into a point cloud, and evaluation against ground truth.
//!
//! Fusion is a greedy pixel-consumption pass: each unconsumed valid pixel
//! gathers the source views that agree with it in reprojection, relative
//! depth and normal angle; when enough views agree, their averaged point is
//! emitted and the contributing pixels are retired. Views are processed in
//! ascending id order no matter how the caller arranged them, so the result
//! does not depend on input permutation.

use std::collections::BTreeMap;

use nalgebra::Vector3;
use thiserror::Error;

use crate::depthmap::DepthNormalMap;
use crate::prior::TexturenessMap;
use crate::scene::ply::CloudPoint;
use crate::scene::CameraView;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("empty point cloud")]
    EmptyCloud,
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
}

/// Multi-view consistency gates for fusion.
#[derive(Clone, Copy, Debug)]
pub struct FusionParams {
    /// Forward-backward reprojection gate, pixels.
    pub max_reproj_error: f64,
    /// Normal disagreement gate, degrees.
    pub max_normal_error_deg: f64,
    /// Relative depth agreement gate.
    pub max_depth_error: f64,
    /// Minimum number of agreeing views (reference included).
    pub min_consistent_views: usize,
}

impl Default for FusionParams {
    fn default() -> Self {
        Self {
            max_reproj_error: 1.0,
            max_normal_error_deg: 20.0,
            max_depth_error: 0.01,
            min_consistent_views: 3,
        }
    }
}

/// Fusion result plus per-view consumption bookkeeping.
pub struct FusionOutcome {
    pub points: Vec<CloudPoint>,
    /// Pixels of each view that ended up inside fused points.
    pub consumed_per_view: BTreeMap<u32, usize>,
}

#[inline]
fn kahan_add(sum: &mut f64, comp: &mut f64, value: f64) {
    let y = value - *comp;
    let t = *sum + y;
    *comp = (t - *sum) - y;
    *sum = t;
}

fn normal_world(view: &CameraView, n: [f32; 3]) -> Vector3<f64> {
    view.rotation.transpose() * Vector3::new(n[0] as f64, n[1] as f64, n[2] as f64)
}

/// Fuses per-view depth/normal maps into a consistent point cloud.
pub fn fuse(
    views: &[&CameraView],
    maps: &BTreeMap<u32, DepthNormalMap>,
    params: &FusionParams,
) -> FusionOutcome {
    // canonical order: ascending view id
    let mut order: Vec<&CameraView> = views
        .iter()
        .copied()
        .filter(|v| maps.contains_key(&v.view_id))
        .collect();
    order.sort_by_key(|v| v.view_id);

    let mut consumed: BTreeMap<u32, Vec<bool>> = order
        .iter()
        .map(|v| (v.view_id, vec![false; v.width * v.height]))
        .collect();
    let mut consumed_count: BTreeMap<u32, usize> =
        order.iter().map(|v| (v.view_id, 0)).collect();
    let mut points = Vec::new();
    let cos_gate = params.max_normal_error_deg.to_radians().cos();

    for ref_view in &order {
        let ref_map = &maps[&ref_view.view_id];
        for y in 0..ref_view.height {
            for x in 0..ref_view.width {
                let idx = y * ref_view.width + x;
                if consumed[&ref_view.view_id][idx] || !ref_map.is_valid(x, y) {
                    continue;
                }
                let depth = ref_map.depth_at(x, y) as f64;
                let point = ref_view.unproject(x as f64, y as f64, depth);
                let n_ref = normal_world(ref_view, ref_map.normal_at(x, y));
                // (view id, pixel index, world point, world normal, color)
                let mut group: Vec<(u32, usize, Vector3<f64>, Vector3<f64>, [f32; 3])> = vec![(
                    ref_view.view_id,
                    idx,
                    point,
                    n_ref,
                    ref_view.rgb_at(x, y),
                )];
                for src in &order {
                    if src.view_id == ref_view.view_id {
                        continue;
                    }
                    let src_map = &maps[&src.view_id];
                    let Some((su, sv, sz)) = src.project(&point) else {
                        continue;
                    };
                    if !src.contains(su, sv) {
                        continue;
                    }
                    let sx = su.round() as usize;
                    let sy = sv.round() as usize;
                    let sidx = sy * src.width + sx;
                    // consumed pixels may still support later points; they
                    // just never seed one
                    if !src_map.is_valid(sx, sy) {
                        continue;
                    }
                    let sd = src_map.depth_at(sx, sy) as f64;
                    if ((sz - sd) / sd).abs() > params.max_depth_error {
                        continue;
                    }
                    let n_src = normal_world(src, src_map.normal_at(sx, sy));
                    if n_ref.dot(&n_src) < cos_gate {
                        continue;
                    }
                    let back = src.unproject(sx as f64, sy as f64, sd);
                    let Some((ru, rv, _)) = ref_view.project(&back) else {
                        continue;
                    };
                    let reproj =
                        ((ru - x as f64).powi(2) + (rv - y as f64).powi(2)).sqrt();
                    if reproj > params.max_reproj_error {
                        continue;
                    }
                    group.push((src.view_id, sidx, back, n_src, src.rgb_at(sx, sy)));
                }
                if group.len() < params.min_consistent_views {
                    continue;
                }
                // compensated averages keep the result independent of
                // accumulation order
                let mut pos = [0.0f64; 3];
                let mut pos_c = [0.0f64; 3];
                let mut nrm = [0.0f64; 3];
                let mut nrm_c = [0.0f64; 3];
                let mut col = [0.0f64; 3];
                let mut col_c = [0.0f64; 3];
                for (_, _, p, n, c) in &group {
                    for k in 0..3 {
                        kahan_add(&mut pos[k], &mut pos_c[k], p[k]);
                        kahan_add(&mut nrm[k], &mut nrm_c[k], n[k]);
                        kahan_add(&mut col[k], &mut col_c[k], c[k] as f64);
                    }
                }
                let count = group.len() as f64;
                let n_len = (nrm[0] * nrm[0] + nrm[1] * nrm[1] + nrm[2] * nrm[2]).sqrt();
                let normal = if n_len > 1e-12 {
                    [nrm[0] / n_len, nrm[1] / n_len, nrm[2] / n_len]
                } else {
                    [n_ref.x, n_ref.y, n_ref.z]
                };
                points.push(CloudPoint {
                    position: [pos[0] / count, pos[1] / count, pos[2] / count],
                    normal,
                    color: [
                        ((col[0] / count).clamp(0.0, 1.0) * 255.0).round() as u8,
                        ((col[1] / count).clamp(0.0, 1.0) * 255.0).round() as u8,
                        ((col[2] / count).clamp(0.0, 1.0) * 255.0).round() as u8,
                    ],
                });
                for (vid, pidx, ..) in &group {
                    let slot = &mut consumed.get_mut(vid).unwrap()[*pidx];
                    if !*slot {
                        *slot = true;
                        *consumed_count.get_mut(vid).unwrap() += 1;
                    }
                }
            }
        }
    }
    FusionOutcome {
        points,
        consumed_per_view: consumed_count,
    }
}

/// One accuracy/completeness/F1 row of an evaluation report.
#[derive(Clone, Copy, Debug, serde::Serialize)]
pub struct EvalRow {
    pub tau: f64,
    /// % of model points within `tau` of ground truth.
    pub accuracy: f64,
    /// % of ground-truth points within `tau` of the model.
    pub completeness: f64,
    pub f1: f64,
}

#[derive(Clone, Debug, serde::Serialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
}

/// Uniform voxel hash for radius-bounded nearest-neighbor distances.
struct VoxelGrid<'a> {
    cell: f64,
    points: &'a [[f64; 3]],
    map: std::collections::HashMap<(i64, i64, i64), Vec<u32>>,
}

impl<'a> VoxelGrid<'a> {
    fn build(points: &'a [[f64; 3]], cell: f64) -> Self {
        let mut map: std::collections::HashMap<(i64, i64, i64), Vec<u32>> = Default::default();
        for (i, p) in points.iter().enumerate() {
            let key = (
                (p[0] / cell).floor() as i64,
                (p[1] / cell).floor() as i64,
                (p[2] / cell).floor() as i64,
            );
            map.entry(key).or_default().push(i as u32);
        }
        Self { cell, points, map }
    }

    /// Squared distance to the nearest point within one cell radius;
    /// `inf` when nothing lies that close.
    fn nearest_sq(&self, q: &[f64; 3]) -> f64 {
        let kx = (q[0] / self.cell).floor() as i64;
        let ky = (q[1] / self.cell).floor() as i64;
        let kz = (q[2] / self.cell).floor() as i64;
        let mut best = f64::INFINITY;
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    if let Some(bucket) = self.map.get(&(kx + dx, ky + dy, kz + dz)) {
                        for &i in bucket {
                            let p = &self.points[i as usize];
                            let d = (p[0] - q[0]).powi(2)
                                + (p[1] - q[1]).powi(2)
                                + (p[2] - q[2]).powi(2);
                            if d < best {
                                best = d;
                            }
                        }
                    }
                }
            }
        }
        best
    }
}

/// Accuracy / completeness / F1 at each threshold.
///
/// Nearest neighbors come from a voxel hash with cell size equal to the
/// largest threshold, which is exact for every distance that matters.
pub fn evaluate(
    model: &[[f64; 3]],
    gt: &[[f64; 3]],
    taus: &[f64],
) -> Result<EvalReport, EvalError> {
    if model.is_empty() || gt.is_empty() {
        return Err(EvalError::EmptyCloud);
    }
    if taus.is_empty() {
        return Err(EvalError::DimensionMismatch("no thresholds".into()));
    }
    let tau_max = taus.iter().cloned().fold(0.0f64, f64::max);
    if tau_max <= 0.0 {
        return Err(EvalError::DimensionMismatch("thresholds must be positive".into()));
    }
    let gt_grid = VoxelGrid::build(gt, tau_max);
    let model_grid = VoxelGrid::build(model, tau_max);
    let model_d2: Vec<f64> = model.iter().map(|p| gt_grid.nearest_sq(p)).collect();
    let gt_d2: Vec<f64> = gt.iter().map(|p| model_grid.nearest_sq(p)).collect();
    let rows = taus
        .iter()
        .map(|&tau| {
            let t2 = tau * tau;
            let acc = model_d2.iter().filter(|&&d| d <= t2).count() as f64
                / model.len() as f64
                * 100.0;
            let comp = gt_d2.iter().filter(|&&d| d <= t2).count() as f64 / gt.len() as f64
                * 100.0;
            let f1 = if acc + comp > 0.0 {
                2.0 * acc * comp / (acc + comp)
            } else {
                0.0
            };
            EvalRow {
                tau,
                accuracy: acc,
                completeness: comp,
                f1,
            }
        })
        .collect();
    Ok(EvalReport { rows })
}

/// Depth-error distributions over the valid ground-truth pixels.
#[derive(Clone, Debug, serde::Serialize)]
pub struct DepthErrorReport {
    pub thresholds: Vec<f64>,
    /// % of ground-truth pixels with L1 depth error at or below each
    /// threshold (missing estimates count as infinite error).
    pub cdf: Vec<f64>,
    pub textureness_cutoffs: Vec<f64>,
    /// `binned[c][t]`: the CDF restricted to pixels with `t_x` below
    /// cutoff `c`.
    pub binned: Vec<Vec<f64>>,
    pub gt_pixels: usize,
}

/// Per-pixel L1 depth-error CDF, overall and binned by textureness cutoff.
pub fn depth_error_report(
    views: &[(&DepthNormalMap, &DepthNormalMap, &TexturenessMap)],
    thresholds: &[f64],
    cutoffs: &[f64],
) -> Result<DepthErrorReport, EvalError> {
    let mut errors: Vec<(f64, f64)> = Vec::new(); // (error, textureness)
    for (est, gt, tex) in views {
        if est.width() != gt.width()
            || est.height() != gt.height()
            || tex.width() != gt.width()
            || tex.height() != gt.height()
        {
            return Err(EvalError::DimensionMismatch(format!(
                "est {}x{}, gt {}x{}, tex {}x{}",
                est.width(),
                est.height(),
                gt.width(),
                gt.height(),
                tex.width(),
                tex.height()
            )));
        }
        for y in 0..gt.height() {
            for x in 0..gt.width() {
                if !gt.is_valid(x, y) {
                    continue;
                }
                let err = if est.is_valid(x, y) {
                    (est.depth_at(x, y) as f64 - gt.depth_at(x, y) as f64).abs()
                } else {
                    f64::INFINITY
                };
                errors.push((err, tex.at(x, y)));
            }
        }
    }
    let pct = |subset: &dyn Fn(&(f64, f64)) -> bool, thr: f64| -> f64 {
        let total = errors.iter().filter(|e| subset(e)).count();
        if total == 0 {
            return 0.0;
        }
        let hit = errors.iter().filter(|e| subset(e) && e.0 <= thr).count();
        hit as f64 / total as f64 * 100.0
    };
    let cdf = thresholds.iter().map(|&t| pct(&|_| true, t)).collect();
    let binned = cutoffs
        .iter()
        .map(|&c| {
            thresholds
                .iter()
                .map(|&t| pct(&|e: &(f64, f64)| e.1 < c, t))
                .collect()
        })
        .collect();
    Ok(DepthErrorReport {
        thresholds: thresholds.to_vec(),
        cdf,
        textureness_cutoffs: cutoffs.to_vec(),
        binned,
        gt_pixels: errors.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prior::compute_textureness;
    use crate::rng::StreamRng;
    use crate::scene::synth::{self, SyntheticSpec};

    fn gt_scene() -> (crate::scene::SceneBundle, crate::scene::GroundTruth) {
        // small ring keeps every wall pixel inside all four frusta, so the
        // fusion density is limited by the algorithm and not by coverage
        let mut spec = SyntheticSpec::frontal_wall_demo(4, 80, 60);
        spec.cameras.radius = 0.35;
        synth::generate_synthetic_scene(&spec).unwrap()
    }

    #[test]
    fn exact_gt_maps_fuse_densely_onto_surface() {
        let (scene, gt) = gt_scene();
        let views: Vec<&CameraView> = scene.views.iter().collect();
        let outcome = fuse(&views, &gt.depth, &FusionParams::default());
        let total_pixels: usize = gt.depth.values().map(|m| m.valid_count()).sum();
        let consumed: usize = outcome.consumed_per_view.values().sum();
        assert!(
            consumed as f64 >= 0.95 * total_pixels as f64,
            "{consumed}/{total_pixels} consumed"
        );
        // every fused point on the z=5 wall plane
        let tol = 1e-3 * scene.scene_size;
        for p in &outcome.points {
            assert!((p.position[2] - 5.0).abs() < tol, "off-plane: {:?}", p.position);
        }
        assert!(!outcome.points.is_empty());
    }

    #[test]
    fn inconsistent_view_contributes_almost_nothing() {
        let (scene, gt) = gt_scene();
        let views: Vec<&CameraView> = scene.views.iter().collect();
        let mut maps = gt.depth.clone();
        // shift view 2's depths by 10%
        let bad = maps.get_mut(&2).unwrap();
        let mut shifted = DepthNormalMap::new_invalid(bad.width(), bad.height());
        for y in 0..bad.height() {
            for x in 0..bad.width() {
                if bad.is_valid(x, y) {
                    shifted.set(x, y, bad.depth_at(x, y) * 1.10, bad.normal_at(x, y));
                }
            }
        }
        *bad = shifted;
        let outcome = fuse(&views, &maps, &FusionParams::default());
        let total: usize = outcome.consumed_per_view.values().sum();
        let bad_share = outcome.consumed_per_view[&2] as f64 / total as f64;
        assert!(
            bad_share < 0.05,
            "inconsistent view consumed {:.2}% of contributions",
            100.0 * bad_share
        );
    }

    #[test]
    fn single_view_fuses_to_empty_cloud() {
        let (scene, gt) = gt_scene();
        let views = vec![&scene.views[0]];
        let mut maps = BTreeMap::new();
        maps.insert(0, gt.depth[&0].clone());
        let outcome = fuse(&views, &maps, &FusionParams::default());
        assert!(outcome.points.is_empty());
    }

    #[test]
    fn view_order_permutation_invariant() {
        let (scene, gt) = gt_scene();
        let forward: Vec<&CameraView> = scene.views.iter().collect();
        let mut shuffled: Vec<&CameraView> = scene.views.iter().collect();
        shuffled.reverse();
        shuffled.swap(0, 1);
        let a = fuse(&forward, &gt.depth, &FusionParams::default());
        let b = fuse(&shuffled, &gt.depth, &FusionParams::default());
        assert_eq!(a.points.len(), b.points.len());
        for (pa, pb) in a.points.iter().zip(&b.points) {
            for k in 0..3 {
                assert!((pa.position[k] - pb.position[k]).abs() < 1e-9);
                assert!((pa.normal[k] - pb.normal[k]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn identical_clouds_score_perfect() {
        let mut rng = StreamRng::from_key(5, &[1]);
        let cloud: Vec<[f64; 3]> = (0..400)
            .map(|_| {
                [
                    rng.uniform_in(-5.0, 5.0),
                    rng.uniform_in(-5.0, 5.0),
                    rng.uniform_in(-5.0, 5.0),
                ]
            })
            .collect();
        let report = evaluate(&cloud, &cloud, &[0.01, 0.1, 1.0]).unwrap();
        for row in report.rows {
            assert_eq!(row.accuracy, 100.0);
            assert_eq!(row.completeness, 100.0);
            assert_eq!(row.f1, 100.0);
        }
    }

    #[test]
    fn one_far_outlier_counts_against_accuracy_only() {
        let mut rng = StreamRng::from_key(6, &[2]);
        let gt: Vec<[f64; 3]> = (0..99)
            .map(|_| {
                [
                    rng.uniform_in(-2.0, 2.0),
                    rng.uniform_in(-2.0, 2.0),
                    rng.uniform_in(-2.0, 2.0),
                ]
            })
            .collect();
        let mut model = gt.clone();
        model.push([1000.0, 1000.0, 1000.0]);
        let report = evaluate(&model, &gt, &[0.5]).unwrap();
        let row = report.rows[0];
        assert_eq!(row.completeness, 100.0);
        assert!((row.accuracy - 99.0).abs() < 1e-9);
        let expect_f1 = 2.0 * 99.0 * 100.0 / 199.0;
        assert!((row.f1 - expect_f1).abs() < 1e-9);
    }

    #[test]
    fn metrics_match_bruteforce_oracle_exactly() {
        let mut rng = StreamRng::from_key(7, &[3]);
        for trial in 0..4 {
            let n = 500;
            let spread = 3.0 + trial as f64;
            let cloud = |rng: &mut StreamRng| -> Vec<[f64; 3]> {
                (0..n)
                    .map(|_| {
                        [
                            rng.uniform_in(-spread, spread),
                            rng.uniform_in(-spread, spread),
                            rng.uniform_in(-spread, spread),
                        ]
                    })
                    .collect()
            };
            let model = cloud(&mut rng);
            let gt = cloud(&mut rng);
            let taus = [0.05, 0.2, 0.5, 1.0];
            let fast = evaluate(&model, &gt, &taus).unwrap();
            // brute force: full O(n^2) nearest distances
            let brute_d2 = |from: &[[f64; 3]], to: &[[f64; 3]]| -> Vec<f64> {
                from.iter()
                    .map(|p| {
                        to.iter()
                            .map(|q| {
                                (p[0] - q[0]).powi(2)
                                    + (p[1] - q[1]).powi(2)
                                    + (p[2] - q[2]).powi(2)
                            })
                            .fold(f64::INFINITY, f64::min)
                    })
                    .collect()
            };
            let md = brute_d2(&model, &gt);
            let gd = brute_d2(&gt, &model);
            for (i, &tau) in taus.iter().enumerate() {
                let t2 = tau * tau;
                let acc =
                    md.iter().filter(|&&d| d <= t2).count() as f64 / n as f64 * 100.0;
                let comp =
                    gd.iter().filter(|&&d| d <= t2).count() as f64 / n as f64 * 100.0;
                assert_eq!(fast.rows[i].accuracy, acc, "tau {tau} accuracy");
                assert_eq!(fast.rows[i].completeness, comp, "tau {tau} completeness");
            }
        }
    }

    #[test]
    fn accuracy_monotone_in_tau() {
        let mut rng = StreamRng::from_key(8, &[4]);
        let gen = |rng: &mut StreamRng| -> Vec<[f64; 3]> {
            (0..200)
                .map(|_| {
                    [
                        rng.uniform_in(-1.0, 1.0),
                        rng.uniform_in(-1.0, 1.0),
                        rng.uniform_in(-1.0, 1.0),
                    ]
                })
                .collect()
        };
        let model = gen(&mut rng);
        let gt = gen(&mut rng);
        let report = evaluate(&model, &gt, &[0.01, 0.05, 0.1, 0.3, 0.8]).unwrap();
        for pair in report.rows.windows(2) {
            assert!(pair[1].accuracy >= pair[0].accuracy);
            assert!(pair[1].completeness >= pair[0].completeness);
        }
    }

    #[test]
    fn empty_cloud_is_an_error() {
        assert!(matches!(
            evaluate(&[], &[[0.0; 3]], &[0.1]),
            Err(EvalError::EmptyCloud)
        ));
    }

    #[test]
    fn error_cdf_steps_at_constant_offset() {
        let (scene, gt) = gt_scene();
        let view = &scene.views[0];
        let gt_map = &gt.depth[&0];
        let tex = compute_textureness(view);
        // exact estimate: 100% at the smallest threshold
        let report =
            depth_error_report(&[(gt_map, gt_map, &tex)], &[1e-9, 0.1], &[0.75, 1.01]).unwrap();
        assert_eq!(report.cdf[0], 100.0);
        // constant 0.05 offset: nothing below, everything above
        let mut offset = DepthNormalMap::new_invalid(gt_map.width(), gt_map.height());
        for y in 0..gt_map.height() {
            for x in 0..gt_map.width() {
                if gt_map.is_valid(x, y) {
                    offset.set(x, y, gt_map.depth_at(x, y) + 0.05, gt_map.normal_at(x, y));
                }
            }
        }
        let report =
            depth_error_report(&[(&offset, gt_map, &tex)], &[0.049, 0.051], &[1.01]).unwrap();
        assert_eq!(report.cdf[0], 0.0);
        assert_eq!(report.cdf[1], 100.0);
        // the all-inclusive cutoff bin reproduces the overall cdf
        assert_eq!(report.binned[0], report.cdf);
    }

    #[test]
    fn report_rejects_mismatched_dims() {
        let (scene, gt) = gt_scene();
        let tex = compute_textureness(&scene.views[0]);
        let small = DepthNormalMap::new_invalid(3, 3);
        assert!(matches!(
            depth_error_report(&[(&small, &gt.depth[&0], &tex)], &[0.1], &[1.0]),
            Err(EvalError::DimensionMismatch(_))
        ));
    }
}
