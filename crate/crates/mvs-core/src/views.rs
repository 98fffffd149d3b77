//! Per-pixel source-visibility inference and source-subset sampling.
//!
//! Each source image carries a per-pixel occupancy probability
//! `q(Z = 1)` smoothed along sweep lines by a two-state forward-backward
//! pass: emission for `Z = 1` is the photometric density of the current
//! estimate, emission for `Z = 0` is a flat density anchored at a mediocre
//! correlation level. Hypothesis evaluation samples a source subset
//! proportional to `q` times parallax / resolution / front-facing priors.

use nalgebra::Vector3;
use thiserror::Error;

use crate::rng::StreamRng;
use crate::scene::CameraView;

#[derive(Debug, Error)]
pub enum ViewSelectionError {
    #[error("no source views available")]
    NoSources,
}

/// Per-pixel, per-source visibility posteriors.
#[derive(Clone, Debug)]
pub struct ViewSelectionState {
    width: usize,
    height: usize,
    n_sources: usize,
    /// Layout: `[source][pixel]`, initialized to 0.5.
    q: Vec<f32>,
}

impl ViewSelectionState {
    pub fn new(width: usize, height: usize, n_sources: usize) -> Self {
        Self {
            width,
            height,
            n_sources,
            q: vec![0.5; width * height * n_sources],
        }
    }

    #[inline]
    pub fn q_at(&self, source: usize, x: usize, y: usize) -> f32 {
        self.q[source * self.width * self.height + y * self.width + x]
    }

    #[inline]
    pub fn set_q(&mut self, source: usize, x: usize, y: usize, value: f32) {
        self.q[source * self.width * self.height + y * self.width + x] = value;
    }

    pub fn n_sources(&self) -> usize {
        self.n_sources
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }
}

/// Scaled two-state forward-backward smoothing along one line.
///
/// `init_p1` seeds the forward pass (the previous iteration's posterior at
/// the line's first pixel, folding the cross-iteration coherence in),
/// `stay` is the probability of `Z` keeping its value between neighbors,
/// `emit1[i]` the `Z = 1` emission density at pixel `i` and `emit0` the flat
/// `Z = 0` density. Returns the smoothed `P(Z_i = 1)`.
pub fn smooth_line_posteriors(
    init_p1: f64,
    stay: f64,
    emit1: &[f64],
    emit0: f64,
) -> Vec<f64> {
    let n = emit1.len();
    if n == 0 {
        return Vec::new();
    }
    let flip = 1.0 - stay;
    // forward, normalized per step
    let mut alpha = vec![[0.0f64; 2]; n];
    let a0 = (1.0 - init_p1) * emit0;
    let a1 = init_p1 * emit1[0];
    let norm = (a0 + a1).max(f64::MIN_POSITIVE);
    alpha[0] = [a0 / norm, a1 / norm];
    for i in 1..n {
        let p0 = alpha[i - 1][0] * stay + alpha[i - 1][1] * flip;
        let p1 = alpha[i - 1][0] * flip + alpha[i - 1][1] * stay;
        let a0 = p0 * emit0;
        let a1 = p1 * emit1[i];
        let norm = (a0 + a1).max(f64::MIN_POSITIVE);
        alpha[i] = [a0 / norm, a1 / norm];
    }
    // backward
    let mut beta = [1.0f64, 1.0f64];
    let mut out = vec![0.0f64; n];
    {
        let g0 = alpha[n - 1][0] * beta[0];
        let g1 = alpha[n - 1][1] * beta[1];
        out[n - 1] = g1 / (g0 + g1).max(f64::MIN_POSITIVE);
    }
    for i in (0..n - 1).rev() {
        let e0 = emit0 * beta[0];
        let e1 = emit1[i + 1] * beta[1];
        let b0 = stay * e0 + flip * e1;
        let b1 = flip * e0 + stay * e1;
        let norm = (b0 + b1).max(f64::MIN_POSITIVE);
        beta = [b0 / norm, b1 / norm];
        let g0 = alpha[i][0] * beta[0];
        let g1 = alpha[i][1] * beta[1];
        out[i] = g1 / (g0 + g1).max(f64::MIN_POSITIVE);
    }
    out
}

/// Replaces the stored `q` of one source along a sweep line with the
/// smoothed posteriors of the freshly computed densities.
pub fn update_visibility_line(
    state: &mut ViewSelectionState,
    source: usize,
    line: &[(usize, usize)],
    densities: &[f64],
    emit0: f64,
    stay: f64,
) {
    assert_eq!(line.len(), densities.len());
    if line.is_empty() {
        return;
    }
    let (x0, y0) = line[0];
    let init = state.q_at(source, x0, y0) as f64;
    let post = smooth_line_posteriors(init, stay, densities, emit0);
    for (&(x, y), &p) in line.iter().zip(&post) {
        state.set_q(source, x, y, p as f32);
    }
}

/// Geometry priors for source sampling.
#[derive(Clone, Copy, Debug)]
pub struct SourcePriors {
    pub parallax_peak_deg: f64,
    pub parallax_sigma_deg: f64,
}

impl Default for SourcePriors {
    fn default() -> Self {
        Self {
            parallax_peak_deg: 15.0,
            parallax_sigma_deg: 10.0,
        }
    }
}

/// Triangulation-angle prior, peaking at the configured parallax.
pub fn parallax_weight(angle_deg: f64, priors: &SourcePriors) -> f64 {
    let d = angle_deg - priors.parallax_peak_deg;
    (-d * d / (2.0 * priors.parallax_sigma_deg * priors.parallax_sigma_deg)).exp()
}

/// Footprint-scale prior: flat inside [0.5, 2], linear falloff outside,
/// reaching zero at a 4x mismatch.
pub fn resolution_weight(scale_ratio: f64) -> f64 {
    if scale_ratio <= 0.0 || !scale_ratio.is_finite() {
        return 0.0;
    }
    let r = if scale_ratio >= 1.0 {
        scale_ratio
    } else {
        1.0 / scale_ratio
    };
    if r <= 2.0 {
        1.0
    } else {
        ((4.0 - r) / 2.0).max(0.0)
    }
}

/// Unnormalized sampling weight `P_l(m)` of one source for the 3D point and
/// normal hypothesized at the reference pixel.
pub fn source_weight(
    ref_view: &CameraView,
    src_view: &CameraView,
    point_world: &Vector3<f64>,
    normal_world: &Vector3<f64>,
    q: f64,
    priors: &SourcePriors,
) -> f64 {
    let to_ref = ref_view.center() - point_world;
    let to_src = src_view.center() - point_world;
    let (dr, ds) = (to_ref.norm(), to_src.norm());
    if dr < 1e-12 || ds < 1e-12 {
        return 0.0;
    }
    let cosang = (to_ref.dot(&to_src) / (dr * ds)).clamp(-1.0, 1.0);
    let angle_deg = cosang.acos().to_degrees();
    let w_par = parallax_weight(angle_deg, priors);

    // footprint scale: pixels per scene unit at the point, src relative to ref
    let z_ref = ref_view.world_to_cam(point_world).z;
    let z_src = src_view.world_to_cam(point_world).z;
    if z_ref <= 0.0 || z_src <= 0.0 {
        return 0.0;
    }
    let f_ref = 0.5 * (ref_view.fx + ref_view.fy);
    let f_src = 0.5 * (src_view.fx + src_view.fy);
    let w_res = resolution_weight((f_src / z_src) / (f_ref / z_ref));

    // front-facing: the camera-facing surface normal must point at the source
    let dir = (point_world - src_view.center()) / ds;
    let w_front = (-normal_world.dot(&dir)).max(0.0);

    q * w_par * w_res * w_front
}

/// Samples `subset_size` distinct source indices proportional to `weights`,
/// falling back to uniform when every weight is zero.
pub fn sample_source_subset(
    weights: &[f64],
    subset_size: usize,
    rng: &mut StreamRng,
) -> Result<Vec<usize>, ViewSelectionError> {
    if weights.is_empty() {
        return Err(ViewSelectionError::NoSources);
    }
    let k = subset_size.min(weights.len()).max(1);
    let mut w: Vec<f64> = weights.iter().map(|&x| x.max(0.0)).collect();
    if w.iter().sum::<f64>() <= 0.0 {
        w.iter_mut().for_each(|x| *x = 1.0);
    }
    let mut picked = Vec::with_capacity(k);
    for _ in 0..k {
        let total: f64 = w.iter().sum();
        if total <= 0.0 {
            // remaining candidates all zero: finish uniformly among them
            for (i, wi) in w.iter_mut().enumerate() {
                if !picked.contains(&i) {
                    *wi = 1.0;
                }
            }
        }
        let total: f64 = w.iter().sum();
        let mut u = rng.uniform() * total;
        let mut chosen = None;
        for (i, &wi) in w.iter().enumerate() {
            if wi <= 0.0 {
                continue;
            }
            u -= wi;
            if u <= 0.0 {
                chosen = Some(i);
                break;
            }
        }
        let idx = chosen.unwrap_or_else(|| {
            w.iter()
                .enumerate()
                .rev()
                .find(|(_, &wi)| wi > 0.0)
                .map(|(i, _)| i)
                .expect("positive weight exists")
        });
        picked.push(idx);
        w[idx] = 0.0;
    }
    Ok(picked)
}
