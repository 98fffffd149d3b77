//! Depth/normal map cleanup: speckle removal and discontinuity-preserving
//! gap filling.
//!
//! The speckle filter drops small 4-connected components of mutually
//! continuous depth. Gaps are then filled by an approximate bilateral
//! weighted median: neighbor depths vote in a three-bin histogram and the
//! winning bin's members are averaged with the bilateral kernel, which keeps
//! foreground and background from bleeding into each other across an edge.

use crate::depthmap::DepthNormalMap;
use crate::photo::MatchWindow;
use crate::scene::CameraView;

/// Speckle-filter thresholds as fractions of image area and scene size.
#[derive(Clone, Copy, Debug)]
pub struct SpeckleConfig {
    /// Components smaller than `image_area * max_area_fraction` are dropped.
    pub max_area_fraction: f64,
    /// Two depths are continuous when they differ by at most
    /// `continuity_fraction * scene_size`.
    pub continuity_fraction: f64,
}

impl Default for SpeckleConfig {
    fn default() -> Self {
        Self {
            max_area_fraction: 1.0 / 5000.0,
            continuity_fraction: 0.10,
        }
    }
}

/// Removes 4-connected components of continuous depth smaller than the area
/// threshold. Surviving pixels are copied through untouched.
pub fn speckle_filter(
    map: &DepthNormalMap,
    cfg: &SpeckleConfig,
    scene_size: f64,
) -> DepthNormalMap {
    let (w, h) = (map.width(), map.height());
    let mut out = map.clone();
    let max_delta = (cfg.continuity_fraction * scene_size) as f32;
    let min_area = (w * h) as f64 * cfg.max_area_fraction;
    let mut visited = vec![false; w * h];
    let mut stack: Vec<usize> = Vec::new();
    let mut component = Vec::new();
    for start in 0..w * h {
        if visited[start] || map.depths()[start] <= 0.0 {
            continue;
        }
        component.clear();
        stack.push(start);
        visited[start] = true;
        while let Some(i) = stack.pop() {
            component.push(i);
            let (x, y) = (i % w, i / w);
            let d = map.depths()[i];
            let mut neighbors = [usize::MAX; 4];
            let mut n = 0;
            if x > 0 {
                neighbors[n] = i - 1;
                n += 1;
            }
            if x + 1 < w {
                neighbors[n] = i + 1;
                n += 1;
            }
            if y > 0 {
                neighbors[n] = i - w;
                n += 1;
            }
            if y + 1 < h {
                neighbors[n] = i + w;
                n += 1;
            }
            for &j in &neighbors[..n] {
                if !visited[j]
                    && map.depths()[j] > 0.0
                    && (map.depths()[j] - d).abs() <= max_delta
                {
                    visited[j] = true;
                    stack.push(j);
                }
            }
        }
        if (component.len() as f64) < min_area {
            for &i in &component {
                out.invalidate(i % w, i / w);
            }
        }
    }
    out
}

/// Fills invalid pixels with the bilateral weighted mean of the most
/// populated of three depth bins over the valid window neighbors.
///
/// Single pass over a frozen snapshot: pixels filled in this call never feed
/// later fills. Pixels with fewer than `k_min` valid neighbors stay invalid.
pub fn median_fill(
    map: &DepthNormalMap,
    view: &CameraView,
    win: &MatchWindow,
    radius: usize,
    k_min: usize,
) -> DepthNormalMap {
    let (w, h) = (map.width(), map.height());
    let mut out = map.clone();
    let inv_2ss = 1.0 / (2.0 * win.sigma_spatial * win.sigma_spatial);
    let inv_2sc = 1.0 / (2.0 * win.sigma_color * win.sigma_color);
    let r = radius as isize;

    let mut depths: Vec<f32> = Vec::new();
    let mut weights: Vec<f64> = Vec::new();
    let mut normals: Vec<[f32; 3]> = Vec::new();

    for y in 0..h {
        for x in 0..w {
            if map.is_valid(x, y) {
                continue;
            }
            depths.clear();
            weights.clear();
            normals.clear();
            let g_center = view.gray_at(x, y) as f64;
            for dv in -r..=r {
                let qy = y as isize + dv;
                if qy < 0 || qy >= h as isize {
                    continue;
                }
                for du in -r..=r {
                    let qx = x as isize + du;
                    if qx < 0 || qx >= w as isize || (du == 0 && dv == 0) {
                        continue;
                    }
                    let (qx, qy) = (qx as usize, qy as usize);
                    if !map.is_valid(qx, qy) {
                        continue;
                    }
                    let dg = view.gray_at(qx, qy) as f64 - g_center;
                    let wgt = (-((du * du + dv * dv) as f64) * inv_2ss).exp()
                        * (-dg * dg * inv_2sc).exp();
                    depths.push(map.depth_at(qx, qy));
                    weights.push(wgt);
                    normals.push(map.normal_at(qx, qy));
                }
            }
            if depths.len() < k_min {
                continue;
            }
            // three-bin histogram over the neighbor depth span
            let lo = depths.iter().cloned().fold(f32::INFINITY, f32::min);
            let hi = depths.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let span = hi - lo;
            let bin_of = |d: f32| -> usize {
                if span <= 0.0 {
                    return 0;
                }
                (((d - lo) / span * 3.0) as usize).min(2)
            };
            let mut counts = [0usize; 3];
            let mut depth_sums = [0.0f64; 3];
            for &d in &depths {
                let b = bin_of(d);
                counts[b] += 1;
                depth_sums[b] += d as f64;
            }
            let mut best = 0usize;
            for b in 1..3 {
                let better = counts[b] > counts[best]
                    || (counts[b] == counts[best]
                        && counts[b] > 0
                        && depth_sums[b] / (counts[b] as f64)
                            < depth_sums[best] / (counts[best].max(1) as f64));
                if better {
                    best = b;
                }
            }
            let mut sum_w = 0.0f64;
            let mut sum_wd = 0.0f64;
            let mut sum_wn = [0.0f64; 3];
            let mut top_w = -1.0;
            let mut top_n = [0.0f32; 3];
            for i in 0..depths.len() {
                if bin_of(depths[i]) != best {
                    continue;
                }
                let wgt = weights[i];
                sum_w += wgt;
                sum_wd += wgt * depths[i] as f64;
                for k in 0..3 {
                    sum_wn[k] += wgt * normals[i][k] as f64;
                }
                if wgt > top_w {
                    top_w = wgt;
                    top_n = normals[i];
                }
            }
            if sum_w <= 0.0 {
                continue;
            }
            let depth = (sum_wd / sum_w) as f32;
            let norm =
                (sum_wn[0] * sum_wn[0] + sum_wn[1] * sum_wn[1] + sum_wn[2] * sum_wn[2]).sqrt();
            let normal = if norm > 1e-9 {
                [
                    (sum_wn[0] / norm) as f32,
                    (sum_wn[1] / norm) as f32,
                    (sum_wn[2] / norm) as f32,
                ]
            } else {
                top_n
            };
            out.set(x, y, depth, normal);
        }
    }
    out
}
