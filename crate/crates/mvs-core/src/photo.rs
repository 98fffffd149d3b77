//! Photometric and geometric matching costs.
//!
//! The photometric score is a bilaterally weighted NCC between a reference
//! window and its plane-warped source samples; the geometric cost is a
//! forward-backward reprojection error against a source depth map.

use crate::depthmap::DepthNormalMap;
use crate::geometry::{LocalPlane, PlaneWarp};
use crate::scene::CameraView;

/// Matching-window shape and bandwidths.
#[derive(Clone, Copy, Debug)]
pub struct MatchWindow {
    /// Window spans `(2 * half_size + 1)^2` pixels.
    pub half_size: usize,
    /// Spatial kernel bandwidth, pixels.
    pub sigma_spatial: f64,
    /// Range kernel bandwidth, gray units.
    pub sigma_color: f64,
    /// NCC-likelihood bandwidth of the photometric density.
    pub sigma_rho: f64,
}

impl Default for MatchWindow {
    fn default() -> Self {
        Self {
            half_size: 5,
            sigma_spatial: 3.0,
            sigma_color: 0.12,
            sigma_rho: 0.6,
        }
    }
}

impl MatchWindow {
    pub fn validate(&self) -> Result<(), String> {
        if self.half_size < 1 || self.half_size > 15 {
            return Err(format!("half_size {} outside [1, 15]", self.half_size));
        }
        for (name, v) in [
            ("sigma_spatial", self.sigma_spatial),
            ("sigma_color", self.sigma_color),
            ("sigma_rho", self.sigma_rho),
        ] {
            if !(v > 0.0) {
                return Err(format!("{name} must be positive, got {v}"));
            }
        }
        Ok(())
    }
}

/// Minimum usable sample count for a clipped border window.
const MIN_WINDOW_SAMPLES: usize = 9;
/// Below this weighted variance a window counts as textureless.
const VAR_EPS: f64 = 1e-12;

/// Weighted first and second moments of paired samples.
#[derive(Default)]
struct Moments {
    sw: f64,
    swr: f64,
    swrr: f64,
    sws: f64,
    swss: f64,
    swrs: f64,
    invalid: usize,
}

impl Moments {
    #[inline]
    fn push(&mut self, w: f64, r: f64, s: f64) {
        self.sw += w;
        self.swr += w * r;
        self.swrr += w * r * r;
        self.sws += w * s;
        self.swss += w * s * s;
        self.swrs += w * r * s;
    }

    fn correlation(&self) -> f64 {
        let mu_r = self.swr / self.sw;
        let mu_s = self.sws / self.sw;
        let var_r = self.swrr / self.sw - mu_r * mu_r;
        let var_s = self.swss / self.sw - mu_s * mu_s;
        if var_r < VAR_EPS || var_s < VAR_EPS {
            return 0.0;
        }
        let cov = self.swrs / self.sw - mu_r * mu_s;
        (cov / (var_r * var_s).sqrt()).clamp(-1.0, 1.0)
    }
}

/// Reference-side window data gathered once per pixel and reused across all
/// hypotheses and sources evaluated there.
#[derive(Default)]
pub struct RefWindow {
    us: Vec<f64>,
    vs: Vec<f64>,
    weight: Vec<f64>,
    gray: Vec<f64>,
    /// `(x0, y0, nx, ny)` when the window is a full unclipped rectangle and
    /// the sample arrays enumerate it row-major; enables the fast NCC loop.
    rect: Option<(usize, usize, usize, usize)>,
}

impl RefWindow {
    pub fn len(&self) -> usize {
        self.us.len()
    }

    pub fn is_empty(&self) -> bool {
        self.us.is_empty()
    }

    /// Collects the clipped window around `(x, y)` with bilateral weights
    /// `exp(-|q-p|^2 / 2σ_s^2) * exp(-(g_q-g_p)^2 / 2σ_c^2)`.
    pub fn gather(&mut self, view: &CameraView, x: usize, y: usize, win: &MatchWindow) {
        self.us.clear();
        self.vs.clear();
        self.weight.clear();
        self.gray.clear();
        let h = win.half_size as isize;
        self.rect = {
            let x0 = x as isize - h;
            let y0 = y as isize - h;
            let side = 2 * win.half_size + 1;
            (x0 >= 0
                && y0 >= 0
                && x + win.half_size < view.width
                && y + win.half_size < view.height)
                .then_some((x0 as usize, y0 as usize, side, side))
        };
        let inv_2ss = 1.0 / (2.0 * win.sigma_spatial * win.sigma_spatial);
        let inv_2sc = 1.0 / (2.0 * win.sigma_color * win.sigma_color);
        let g_center = view.gray_at(x, y) as f64;
        for dv in -h..=h {
            let qy = y as isize + dv;
            if qy < 0 || qy >= view.height as isize {
                continue;
            }
            for du in -h..=h {
                let qx = x as isize + du;
                if qx < 0 || qx >= view.width as isize {
                    continue;
                }
                let g = view.gray_at(qx as usize, qy as usize) as f64;
                let dg = g - g_center;
                let w = (-((du * du + dv * dv) as f64) * inv_2ss).exp()
                    * (-dg * dg * inv_2sc).exp();
                self.us.push(qx as f64);
                self.vs.push(qy as f64);
                self.weight.push(w);
                self.gray.push(g);
            }
        }
    }

    /// Weighted NCC of this window against plane-warped source samples.
    ///
    /// Samples whose warp fails or leaves the source image are dropped from
    /// both sides; more than half dropped (or a tiny clipped window) scores
    /// the worst value -1. Textureless windows on either side score 0.
    pub fn ncc(&self, src: &CameraView, warp: &PlaneWarp) -> f64 {
        let n = self.len();
        if n < MIN_WINDOW_SAMPLES {
            return -1.0;
        }
        let mut acc = Moments::default();
        // fast path: unclipped window whose four corners sit in front of
        // both cameras (the front checks are linear in pixel coordinates)
        let fast = match self.rect {
            Some((x0, y0, nx, ny)) => {
                let (u0, v0) = (x0 as f64, y0 as f64);
                let (u1, v1) = ((x0 + nx - 1) as f64, (y0 + ny - 1) as f64);
                if warp.in_front(u0, v0)
                    && warp.in_front(u1, v0)
                    && warp.in_front(u0, v1)
                    && warp.in_front(u1, v1)
                {
                    self.ncc_rect_sums(src, warp, x0, y0, nx, ny, &mut acc);
                    true
                } else {
                    false
                }
            }
            None => false,
        };
        if !fast {
            for i in 0..n {
                match warp.warp(self.us[i], self.vs[i]) {
                    Ok((su, sv)) if src.contains(su, sv) => {
                        acc.push(self.weight[i], self.gray[i], src.gray_bilinear(su, sv) as f64);
                    }
                    _ => acc.invalid += 1,
                }
            }
        }
        if acc.invalid * 2 > n || acc.sw <= 0.0 {
            return -1.0;
        }
        acc.correlation()
    }

    /// Row-incremental homography evaluation over a full rectangle window.
    fn ncc_rect_sums(
        &self,
        src: &CameraView,
        warp: &PlaneWarp,
        x0: usize,
        y0: usize,
        nx: usize,
        ny: usize,
        acc: &mut Moments,
    ) {
        let h = warp.rows();
        let max_u = (src.width - 1) as f64;
        let max_v = (src.height - 1) as f64;
        let src_w = src.width;
        let gray = &src.gray;
        let u0 = x0 as f64;
        for row in 0..ny {
            let vy = (y0 + row) as f64;
            let mut hx = h[0] * u0 + h[1] * vy + h[2];
            let mut hy = h[3] * u0 + h[4] * vy + h[5];
            let mut hw = h[6] * u0 + h[7] * vy + h[8];
            let base = row * nx;
            for col in 0..nx {
                let inv = 1.0 / hw;
                let su = hx * inv;
                let sv = hy * inv;
                hx += h[0];
                hy += h[3];
                hw += h[6];
                if su < 0.0 || sv < 0.0 || su > max_u || sv > max_v {
                    acc.invalid += 1;
                    continue;
                }
                let ix = su as usize;
                let iy = sv as usize;
                let x1 = (ix + 1).min(src_w - 1);
                let y1 = (iy + 1).min(src.height - 1);
                let fx = (su - ix as f64) as f32;
                let fy = (sv - iy as f64) as f32;
                let g00 = gray[iy * src_w + ix];
                let g10 = gray[iy * src_w + x1];
                let g01 = gray[y1 * src_w + ix];
                let g11 = gray[y1 * src_w + x1];
                let top = g00 + (g10 - g00) * fx;
                let bot = g01 + (g11 - g01) * fx;
                let i = base + col;
                acc.push(self.weight[i], self.gray[i], (top + (bot - top) * fy) as f64);
            }
        }
    }
}

/// Bilaterally weighted NCC between the window at `(x, y)` in `ref_view`
/// and its plane-warped samples in `src_view`.
pub fn bilateral_ncc(
    ref_view: &CameraView,
    src_view: &CameraView,
    x: usize,
    y: usize,
    plane: &LocalPlane,
    win: &MatchWindow,
) -> f64 {
    let mut window = RefWindow::default();
    window.gather(ref_view, x, y, win);
    window.ncc(src_view, &PlaneWarp::new(ref_view, src_view, plane))
}

/// Photometric likelihood of a correlation under the visible branch:
/// `exp(-(1-ρ)^2 / 2σ_ρ^2)`.
#[inline]
pub fn photo_density(rho: f64, sigma_rho: f64) -> f64 {
    let d = 1.0 - rho;
    (-d * d / (2.0 * sigma_rho * sigma_rho)).exp()
}

/// Photometric cost `C_photo = 1 - ρ`, in `[0, 2]`.
#[inline]
pub fn photo_cost(rho: f64) -> f64 {
    1.0 - rho
}

/// Forward-backward reprojection cost in `[0, 1]`.
///
/// The pixel is warped into the source through the hypothesis plane, the
/// source's stored depth at the landing pixel is unprojected and reprojected
/// into the reference, and the round-trip pixel error is truncated at
/// `psi_max` and normalized. Missing source depth costs 1.
pub fn geometric_cost(
    ref_view: &CameraView,
    src_view: &CameraView,
    src_map: &DepthNormalMap,
    x: usize,
    y: usize,
    plane: &LocalPlane,
    psi_max: f64,
) -> f64 {
    let warp = PlaneWarp::new(ref_view, src_view, plane);
    let (su, sv) = match warp.warp(x as f64, y as f64) {
        Ok(p) => p,
        Err(_) => return 1.0,
    };
    if !src_view.contains(su, sv) {
        return 1.0;
    }
    // depth at the landing point: bilinear when the 2x2 neighborhood is
    // fully valid, else the nearest valid pixel (at its own coordinates)
    let x0 = su.floor() as usize;
    let y0 = sv.floor() as usize;
    let x1 = (x0 + 1).min(src_map.width() - 1);
    let y1 = (y0 + 1).min(src_map.height() - 1);
    let corners = [(x0, y0), (x1, y0), (x0, y1), (x1, y1)];
    let all_valid = corners.iter().all(|&(cx, cy)| src_map.is_valid(cx, cy));
    let (lu, lv, src_depth) = if all_valid {
        let fx = su - x0 as f64;
        let fy = sv - y0 as f64;
        let d00 = src_map.depth_at(x0, y0) as f64;
        let d10 = src_map.depth_at(x1, y0) as f64;
        let d01 = src_map.depth_at(x0, y1) as f64;
        let d11 = src_map.depth_at(x1, y1) as f64;
        let top = d00 + (d10 - d00) * fx;
        let bot = d01 + (d11 - d01) * fx;
        (su, sv, top + (bot - top) * fy)
    } else {
        let sx = su.round() as usize;
        let sy = sv.round() as usize;
        if !src_map.is_valid(sx, sy) {
            return 1.0;
        }
        (sx as f64, sy as f64, src_map.depth_at(sx, sy) as f64)
    };
    let world = src_view.unproject(lu, lv, src_depth);
    let (ru, rv, _) = match ref_view.project(&world) {
        Some(p) => p,
        None => return 1.0,
    };
    let err = ((ru - x as f64).powi(2) + (rv - y as f64).powi(2)).sqrt();
    err.min(psi_max) / psi_max
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::LocalPlane;
    use crate::rng::StreamRng;
    use crate::scene::synth::{self, SyntheticSpec};
    use nalgebra::Vector3;

    #[test]
    fn self_correlation_is_one() {
        let spec = SyntheticSpec::frontal_wall_demo(2, 64, 48);
        let (scene, gt) = synth::generate_synthetic_scene(&spec).unwrap();
        let view = &scene.views[0];
        let win = MatchWindow::default();
        let map = &gt.depth[&0];
        let (x, y) = (30, 20);
        let n = map.normal_at(x, y);
        let plane = LocalPlane::from_pixel(
            view,
            x as f64,
            y as f64,
            map.depth_at(x, y) as f64,
            Vector3::new(n[0] as f64, n[1] as f64, n[2] as f64),
        )
        .unwrap();
        // source = the reference itself: identity warp, perfect correlation
        let rho = bilateral_ncc(view, view, x, y, &plane, &win);
        assert!((rho - 1.0).abs() < 1e-6, "rho = {rho}");
    }

    #[test]
    fn constant_window_scores_zero() {
        let mut spec = SyntheticSpec::frontal_wall_demo(2, 64, 48);
        spec.planes[0].texture = synth::Texture::Constant { color: [0.5; 3] };
        let (scene, gt) = synth::generate_synthetic_scene(&spec).unwrap();
        let (a, b) = (&scene.views[0], &scene.views[1]);
        let map = &gt.depth[&0];
        let (x, y) = (32, 24);
        let plane = LocalPlane::from_pixel(
            a,
            x as f64,
            y as f64,
            map.depth_at(x, y) as f64,
            Vector3::new(0.0, 0.0, -1.0),
        )
        .unwrap();
        assert_eq!(bilateral_ncc(a, b, x, y, &plane, &MatchWindow::default()), 0.0);
    }

    #[test]
    fn gt_plane_beats_offset_plane_on_checkerboard() {
        let mut spec = SyntheticSpec::frontal_wall_demo(2, 96, 72);
        spec.noise_sigma = 0.005;
        let (scene, gt) = synth::generate_synthetic_scene(&spec).unwrap();
        let (a, b) = (&scene.views[0], &scene.views[1]);
        let map = &gt.depth[&0];
        let win = MatchWindow::default();
        let range = scene.depth_range.1 - scene.depth_range.0;
        let mut margins = Vec::new();
        for (x, y) in [(20, 20), (48, 36), (70, 50), (30, 55)] {
            let depth = map.depth_at(x, y) as f64;
            let gt_plane = LocalPlane::from_pixel(
                a, x as f64, y as f64, depth, Vector3::new(0.0, 0.0, -1.0),
            )
            .unwrap();
            let off_plane = LocalPlane::from_pixel(
                a, x as f64, y as f64, depth + 0.05 * range, Vector3::new(0.0, 0.0, -1.0),
            )
            .unwrap();
            let rho_gt = bilateral_ncc(a, b, x, y, &gt_plane, &win);
            let rho_off = bilateral_ncc(a, b, x, y, &off_plane, &win);
            margins.push(rho_gt - rho_off);
        }
        let avg = margins.iter().sum::<f64>() / margins.len() as f64;
        assert!(avg > 0.2, "margins {margins:?}");
    }

    #[test]
    fn affine_intensity_invariance() {
        let spec = SyntheticSpec::frontal_wall_demo(2, 64, 48);
        let (scene, gt) = synth::generate_synthetic_scene(&spec).unwrap();
        let a = &scene.views[0];
        let mut b = scene.views[1].clone();
        let map = &gt.depth[&0];
        let (x, y) = (32, 24);
        let plane = LocalPlane::from_pixel(
            a, x as f64, y as f64, map.depth_at(x, y) as f64, Vector3::new(0.0, 0.0, -1.0),
        )
        .unwrap();
        let win = MatchWindow::default();
        let rho = bilateral_ncc(a, &b, x, y, &plane, &win);
        for g in &mut b.gray {
            *g = 0.35 * *g + 0.2;
        }
        let rho_affine = bilateral_ncc(a, &b, x, y, &plane, &win);
        assert!((rho - rho_affine).abs() < 1e-6, "{rho} vs {rho_affine}");
    }

    #[test]
    fn out_of_bounds_majority_scores_minus_one() {
        let spec = SyntheticSpec::frontal_wall_demo(2, 64, 48);
        let (scene, _) = synth::generate_synthetic_scene(&spec).unwrap();
        let (a, b) = (&scene.views[0], &scene.views[1]);
        // a plane so close that the warp lands far outside the source
        let plane = LocalPlane::from_pixel(
            a, 32.0, 24.0, 0.05, Vector3::new(0.0, 0.0, -1.0),
        )
        .unwrap();
        let rho = bilateral_ncc(a, b, 32, 24, &plane, &MatchWindow::default());
        assert_eq!(rho, -1.0);
    }

    #[test]
    fn photo_density_values_and_monotonicity() {
        let win = MatchWindow::default();
        assert_eq!(photo_density(1.0, win.sigma_rho), 1.0);
        assert_eq!(photo_cost(1.0), 0.0);
        // direct formula: exp(-(1-(-1))^2 / (2 * 0.36)) = exp(-4/0.72)
        let d = photo_density(-1.0, 0.6);
        assert!((d - (-4.0f64 / 0.72).exp()).abs() < 1e-15);
        assert!((d - 3.88e-3).abs() < 2e-5, "d = {d}");
        let mut prev = -1.0;
        let mut last = photo_density(-1.0, win.sigma_rho);
        while prev < 1.0 {
            prev += 0.05;
            let next = photo_density(prev, win.sigma_rho);
            assert!(next > last);
            last = next;
        }
    }

    #[test]
    fn photo_cost_range_randomized() {
        let mut rng = StreamRng::from_key(5, &[1]);
        for _ in 0..1000 {
            let rho = rng.uniform_in(-1.0, 1.0);
            let c = photo_cost(rho);
            assert!((0.0..=2.0).contains(&c));
        }
    }

    #[test]
    fn geometric_cost_low_on_exact_gt() {
        let mut spec = SyntheticSpec::frontal_wall_demo(3, 80, 60);
        spec.cameras.radius = 0.6;
        let (scene, gt) = synth::generate_synthetic_scene(&spec).unwrap();
        let (a, b) = (&scene.views[0], &scene.views[1]);
        let map_a = &gt.depth[&0];
        let map_b = &gt.depth[&1];
        let mut total = 0usize;
        let mut low = 0usize;
        for y in 0..a.height {
            for x in 0..a.width {
                if !map_a.is_valid(x, y) {
                    continue;
                }
                let n = map_a.normal_at(x, y);
                let plane = LocalPlane::from_pixel(
                    a,
                    x as f64,
                    y as f64,
                    map_a.depth_at(x, y) as f64,
                    Vector3::new(n[0] as f64, n[1] as f64, n[2] as f64),
                )
                .unwrap();
                let c = geometric_cost(a, b, map_b, x, y, &plane, 3.0);
                if c >= 1.0 {
                    continue; // not co-visible
                }
                total += 1;
                if c < 0.1 {
                    low += 1;
                }
            }
        }
        assert!(total > 1000, "co-visible sample too small: {total}");
        assert!(
            low as f64 >= 0.99 * total as f64,
            "{low}/{total} below 0.1"
        );
    }

    #[test]
    fn geometric_cost_missing_src_depth_is_one() {
        let spec = SyntheticSpec::frontal_wall_demo(2, 64, 48);
        let (scene, gt) = synth::generate_synthetic_scene(&spec).unwrap();
        let (a, b) = (&scene.views[0], &scene.views[1]);
        let empty = DepthNormalMap::new_invalid(b.width, b.height);
        let map_a = &gt.depth[&0];
        let plane = LocalPlane::from_pixel(
            a, 32.0, 24.0, map_a.depth_at(32, 24) as f64, Vector3::new(0.0, 0.0, -1.0),
        )
        .unwrap();
        assert_eq!(geometric_cost(a, b, &empty, 32, 24, &plane, 3.0), 1.0);
    }

    #[test]
    fn geometric_cost_grows_with_depth_perturbation() {
        let mut spec = SyntheticSpec::frontal_wall_demo(2, 80, 60);
        spec.cameras.radius = 0.8;
        let (scene, gt) = synth::generate_synthetic_scene(&spec).unwrap();
        let (a, b) = (&scene.views[0], &scene.views[1]);
        let map_b = &gt.depth[&1];
        let (x, y) = (40, 30);
        let depth = gt.depth[&0].depth_at(x, y) as f64;
        let mut last = -1.0;
        let mut grew = true;
        for frac in [0.0, 0.02, 0.04, 0.06, 0.08, 0.10] {
            let plane = LocalPlane::from_pixel(
                a, x as f64, y as f64, depth * (1.0 + frac), Vector3::new(0.0, 0.0, -1.0),
            )
            .unwrap();
            let c = geometric_cost(a, b, map_b, x, y, &plane, 3.0);
            if c < last {
                grew = false;
            }
            last = c;
        }
        assert!(grew, "cost not monotone under growing perturbation");
        assert!(last > 0.3, "10% perturbation should be visibly inconsistent: {last}");
    }
}
