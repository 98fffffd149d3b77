//! Line-sweep PatchMatch optimization with per-pixel view selection.
//!
//! Each iteration sweeps every image line in one of four alternating
//! directions. At a pixel the hypothesis set holds the current plane, the
//! previous pixel's plane re-anchored through its geometry, random and
//! perturbed draws, and (when the prior stage is active) the fine/coarse
//! superpixel plane hypotheses. Costs combine bilateral NCC with an optional
//! multi-view geometric term, both reweighted by the local textureness, and
//! the winner replaces the pixel state. After each line the per-source
//! visibility posteriors are re-smoothed from the winners' densities.

use std::collections::BTreeMap;

use nalgebra::Vector3;
use rayon::prelude::*;
use thiserror::Error;

use crate::config::RunConfig;
use crate::depthmap::DepthNormalMap;
use crate::geometry::{GeomError, LocalPlane, PlaneWarp};
use crate::photo::{geometric_cost, photo_cost, photo_density, RefWindow};
use crate::prior::{compute_textureness, weights, PlanarPriorContext, PriorMaps, TexturenessMap};
use crate::rng::{domain, StreamRng};
use crate::scene::CameraView;
use crate::views::{sample_source_subset, smooth_line_posteriors, source_weight, ViewSelectionState};

#[derive(Debug, Error)]
pub enum PatchmatchError {
    #[error("no source views")]
    NoSources,
    #[error(transparent)]
    Config(#[from] crate::config::ConfigError),
}

/// Provenance of a hypothesis; decides its textureness weighting.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HypothesisKind {
    Current,
    Propagated,
    RandomDepth,
    RandomNormal,
    RandomBoth,
    PerturbedDepth,
    PerturbedNormal,
    PlanarFine,
    PlanarCoarse,
}

impl HypothesisKind {
    /// Superpixel-plane hypotheses get the opposite weighting of the
    /// baseline set.
    #[inline]
    pub fn is_planar(self) -> bool {
        matches!(self, HypothesisKind::PlanarFine | HypothesisKind::PlanarCoarse)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Hypothesis {
    pub plane: LocalPlane,
    pub kind: HypothesisKind,
}

/// Photometric cost weight for a hypothesis kind.
#[inline]
pub fn photo_weight(kind: HypothesisKind, w_plus: f64, w_minus: f64) -> f64 {
    if kind.is_planar() {
        w_plus
    } else {
        w_minus
    }
}

/// Geometric cost weight for a hypothesis kind (mirrored).
#[inline]
pub fn geom_weight(kind: HypothesisKind, w_plus: f64, w_minus: f64) -> f64 {
    if kind.is_planar() {
        w_minus
    } else {
        w_plus
    }
}

/// Sweep direction of one iteration; rows and columns alternate.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepDirection {
    LeftRight,
    TopDown,
    RightLeft,
    BottomUp,
}

impl SweepDirection {
    pub fn of_iteration(t: usize) -> Self {
        match t % 4 {
            0 => SweepDirection::LeftRight,
            1 => SweepDirection::TopDown,
            2 => SweepDirection::RightLeft,
            _ => SweepDirection::BottomUp,
        }
    }
}

/// Uniform unit normal on the hemisphere facing the camera along the pixel
/// ray; grazing directions are rejected and redrawn.
pub fn random_facing_normal(
    view: &CameraView,
    u: f64,
    v: f64,
    rng: &mut StreamRng,
) -> Vector3<f64> {
    let ray = view.ray_cam(u, v);
    let ray_norm = ray.norm();
    loop {
        let n = Vector3::new(rng.normal(), rng.normal(), rng.normal());
        let len = n.norm();
        if len < 1e-9 {
            continue;
        }
        let n = n / len;
        let dot = n.dot(&ray);
        if dot.abs() < 1e-3 * ray_norm {
            continue;
        }
        return if dot > 0.0 { -n } else { n };
    }
}

/// Rotates a normal by a uniform angle up to `max_deg` about a random axis,
/// keeping it camera-facing. Falls back to the input when the rotation
/// grazes the ray.
pub fn perturb_normal(
    view: &CameraView,
    u: f64,
    v: f64,
    normal: &Vector3<f64>,
    max_deg: f64,
    rng: &mut StreamRng,
) -> Vector3<f64> {
    let raw = Vector3::new(rng.normal(), rng.normal(), rng.normal());
    let axis = raw - normal * raw.dot(normal);
    let axis_len = axis.norm();
    if axis_len < 1e-9 {
        return *normal;
    }
    let angle = rng.uniform() * max_deg.to_radians();
    let rot = nalgebra::Rotation3::from_axis_angle(
        &nalgebra::Unit::new_unchecked(axis / axis_len),
        angle,
    );
    let mut out = rot * normal;
    let ray = view.ray_cam(u, v);
    let dot = out.dot(&ray);
    if dot > 0.0 {
        out = -out;
    }
    if out.dot(&ray).abs() < 1e-6 * ray.norm() {
        return *normal;
    }
    out
}

/// Assembles the hypothesis set for one pixel.
///
/// Baseline entries: current, propagated (previous pixel's plane evaluated
/// here), random depth / normal / both, perturbed depth / normal. Planar
/// entries are appended when the prior stage supplied them.
#[allow(clippy::too_many_arguments)]
pub fn build_hypotheses(
    view: &CameraView,
    x: usize,
    y: usize,
    current: Option<LocalPlane>,
    previous: Option<&LocalPlane>,
    planar_fine: Option<LocalPlane>,
    planar_coarse: Option<LocalPlane>,
    depth_range: (f64, f64),
    perturb_depth_frac: f64,
    perturb_normal_deg: f64,
    rng: &mut StreamRng,
) -> Vec<Hypothesis> {
    let (u, v) = (x as f64, y as f64);
    let (d_min, d_max) = depth_range;
    let mut set = Vec::with_capacity(9);
    let push = |plane: Result<LocalPlane, GeomError>, kind: HypothesisKind, set: &mut Vec<Hypothesis>| {
        if let Ok(plane) = plane {
            set.push(Hypothesis { plane, kind });
        }
    };

    // the pixel's own state: depth and normal as of the previous update
    let (cur_depth, cur_normal) = match current {
        Some(p) => match p.depth_at(view, u, v) {
            Ok(d) => {
                set.push(Hypothesis { plane: p, kind: HypothesisKind::Current });
                (d, p.normal)
            }
            Err(_) => (0.5 * (d_min + d_max), random_facing_normal(view, u, v, rng)),
        },
        None => (0.5 * (d_min + d_max), random_facing_normal(view, u, v, rng)),
    };

    if let Some(prev) = previous {
        // re-anchor the neighbor's plane at this pixel
        if let Ok(d) = prev.depth_at(view, u, v) {
            if d >= d_min && d <= d_max {
                set.push(Hypothesis { plane: *prev, kind: HypothesisKind::Propagated });
            }
        }
    }

    let rnd_depth = rng.uniform_in(d_min, d_max);
    push(
        LocalPlane::from_pixel(view, u, v, rnd_depth, cur_normal),
        HypothesisKind::RandomDepth,
        &mut set,
    );

    let rnd_normal = random_facing_normal(view, u, v, rng);
    push(
        LocalPlane::from_pixel(view, u, v, cur_depth, rnd_normal),
        HypothesisKind::RandomNormal,
        &mut set,
    );

    let rnd_depth2 = rng.uniform_in(d_min, d_max);
    let rnd_normal2 = random_facing_normal(view, u, v, rng);
    push(
        LocalPlane::from_pixel(view, u, v, rnd_depth2, rnd_normal2),
        HypothesisKind::RandomBoth,
        &mut set,
    );

    let eps = rng.uniform_in(-perturb_depth_frac, perturb_depth_frac);
    let prt_depth = (cur_depth * (1.0 + eps)).clamp(d_min, d_max);
    push(
        LocalPlane::from_pixel(view, u, v, prt_depth, cur_normal),
        HypothesisKind::PerturbedDepth,
        &mut set,
    );

    let prt_normal = perturb_normal(view, u, v, &cur_normal, perturb_normal_deg, rng);
    push(
        LocalPlane::from_pixel(view, u, v, cur_depth, prt_normal),
        HypothesisKind::PerturbedNormal,
        &mut set,
    );

    if let Some(p) = planar_fine {
        set.push(Hypothesis { plane: p, kind: HypothesisKind::PlanarFine });
    }
    if let Some(p) = planar_coarse {
        set.push(Hypothesis { plane: p, kind: HypothesisKind::PlanarCoarse });
    }
    set
}

/// Per-view estimation state shared across iterations.
pub struct ViewEstimator<'a> {
    ref_view: &'a CameraView,
    sources: Vec<&'a CameraView>,
    cfg: &'a RunConfig,
    depth_range: (f64, f64),
    scene_size: f64,
    textureness: TexturenessMap,
    prior_ctx: Option<PlanarPriorContext>,
}

struct LineOutcome {
    /// (linear index, depth, normal) in sweep order.
    pixels: Vec<(usize, f32, [f32; 3])>,
    /// Smoothed q per source, aligned with `pixels`.
    q: Vec<Vec<f32>>,
}

impl<'a> ViewEstimator<'a> {
    pub fn new(
        ref_view: &'a CameraView,
        sources: Vec<&'a CameraView>,
        cfg: &'a RunConfig,
        depth_range: (f64, f64),
        scene_size: f64,
    ) -> Result<Self, PatchmatchError> {
        if sources.is_empty() {
            return Err(PatchmatchError::NoSources);
        }
        cfg.validate()?;
        let textureness = compute_textureness(ref_view);
        let prior_ctx = cfg
            .planar_priors_enabled()
            .then(|| PlanarPriorContext::new(ref_view, &cfg.prior_stage(scene_size)));
        Ok(Self {
            ref_view,
            sources,
            cfg,
            depth_range,
            scene_size,
            textureness,
            prior_ctx,
        })
    }

    pub fn textureness(&self) -> &TexturenessMap {
        &self.textureness
    }

    /// Random full-map initialization for this round.
    fn random_init(&self, round: u64) -> DepthNormalMap {
        let (w, h) = (self.ref_view.width, self.ref_view.height);
        let mut map = DepthNormalMap::new_invalid(w, h);
        for y in 0..h {
            for x in 0..w {
                let mut rng = StreamRng::from_key(
                    self.cfg.seed,
                    &[
                        domain::INIT,
                        self.ref_view.view_id as u64,
                        round,
                        (y * w + x) as u64,
                    ],
                );
                let depth = rng.uniform_in(self.depth_range.0, self.depth_range.1);
                let n = random_facing_normal(self.ref_view, x as f64, y as f64, &mut rng);
                map.set(x, y, depth as f32, [n.x as f32, n.y as f32, n.z as f32]);
            }
        }
        map
    }

    /// Runs the configured number of sweep iterations.
    ///
    /// `src_maps` holds neighbor-view depth maps from a previous outer
    /// round; when present, the geometric term activates for iterations
    /// past the halfway point. Results are bit-reproducible for a fixed
    /// seed regardless of thread count.
    pub fn run(
        &self,
        round: u64,
        init: Option<&DepthNormalMap>,
        src_maps: &BTreeMap<u32, DepthNormalMap>,
    ) -> (DepthNormalMap, ViewSelectionState) {
        let (w, h) = (self.ref_view.width, self.ref_view.height);
        let mut map = match init {
            Some(m) => m.clone(),
            None => self.random_init(round),
        };
        let mut state = ViewSelectionState::new(w, h, self.sources.len());
        let iterations = self.cfg.patchmatch.iterations;

        for t in 0..iterations {
            // planar hypotheses need one completed iteration's estimates
            let priors: Option<PriorMaps> = match (&self.prior_ctx, t >= 1) {
                (Some(ctx), true) => Some(ctx.build(
                    self.ref_view,
                    &map,
                    &self.cfg.prior_stage(self.scene_size),
                    self.scene_size,
                    self.depth_range,
                    self.cfg.seed,
                    (round << 8) | t as u64,
                )),
                _ => None,
            };
            let geom_enabled = !src_maps.is_empty() && 2 * (t + 1) > iterations;
            let direction = SweepDirection::of_iteration(t);
            let lines = sweep_lines(w, h, direction);

            let outcomes: Vec<(usize, LineOutcome)> = lines
                .par_iter()
                .enumerate()
                .map(|(li, line)| {
                    (
                        li,
                        self.sweep_line(
                            line,
                            &map,
                            &state,
                            priors.as_ref(),
                            src_maps,
                            round,
                            t as u64,
                            geom_enabled,
                        ),
                    )
                })
                .collect();

            for (li, outcome) in outcomes {
                let line = &lines[li];
                for (k, &(idx, depth, normal)) in outcome.pixels.iter().enumerate() {
                    let (x, y) = (idx % w, idx / w);
                    debug_assert_eq!((x, y), line[k]);
                    map.set(x, y, depth, normal);
                }
                for (m, qline) in outcome.q.iter().enumerate() {
                    for (&(x, y), &qv) in line.iter().zip(qline) {
                        state.set_q(m, x, y, qv);
                    }
                }
            }
        }
        (map, state)
    }

    /// Sequential propagation along one line; returns the new pixel states
    /// and the re-smoothed visibility posteriors.
    #[allow(clippy::too_many_arguments)]
    fn sweep_line(
        &self,
        line: &[(usize, usize)],
        map: &DepthNormalMap,
        state: &ViewSelectionState,
        priors: Option<&PriorMaps>,
        src_maps: &BTreeMap<u32, DepthNormalMap>,
        round: u64,
        iteration: u64,
        geom_enabled: bool,
    ) -> LineOutcome {
        let view = self.ref_view;
        let w = view.width;
        let win = self.cfg.match_window();
        let n_src = self.sources.len();
        let u_density = photo_density(self.cfg.views.u_anchor_rho, win.sigma_rho);
        let lambda = self.cfg.patchmatch.lambda_geom;

        let mut refwin = RefWindow::default();
        let mut pixels = Vec::with_capacity(line.len());
        // per-source photometric densities of the selected hypotheses
        let mut densities: Vec<Vec<f64>> = vec![Vec::with_capacity(line.len()); n_src];
        let mut prev_plane: Option<LocalPlane> = None;

        for &(x, y) in line {
            let idx = y * w + x;
            let (u, v) = (x as f64, y as f64);
            let current = if map.is_valid(x, y) {
                let n = map.normal_at(x, y);
                LocalPlane::from_pixel(
                    view,
                    u,
                    v,
                    map.depth_at(x, y) as f64,
                    Vector3::new(n[0] as f64, n[1] as f64, n[2] as f64),
                )
                .ok()
            } else {
                None
            };

            let mut rng = StreamRng::from_key(
                self.cfg.seed,
                &[
                    domain::HYPOTHESES,
                    view.view_id as u64,
                    round,
                    iteration,
                    idx as u64,
                ],
            );
            let hypotheses = build_hypotheses(
                view,
                x,
                y,
                current,
                prev_plane.as_ref(),
                priors.and_then(|p| p.fine[idx]),
                priors.and_then(|p| p.coarse[idx]),
                self.depth_range,
                self.cfg.patchmatch.perturb_depth_frac,
                self.cfg.patchmatch.perturb_normal_deg,
                &mut rng,
            );

            if hypotheses.is_empty() {
                // nothing valid at this pixel: keep the raw state
                pixels.push((idx, map.depth_at(x, y), map.normal_at(x, y)));
                for m in 0..n_src {
                    densities[m].push(u_density);
                }
                prev_plane = None;
                continue;
            }

            // sample the source subset from the pre-sweep posteriors
            let subset = {
                let anchor = hypotheses[0].plane;
                let point = anchor.point_at(view, u, v).unwrap_or_else(|_| {
                    view.unproject(u, v, 0.5 * (self.depth_range.0 + self.depth_range.1))
                });
                let normal_world = anchor.world_normal(view);
                let weights_vec: Vec<f64> = self
                    .sources
                    .iter()
                    .enumerate()
                    .map(|(m, src)| {
                        source_weight(
                            view,
                            src,
                            &point,
                            &normal_world,
                            state.q_at(m, x, y) as f64,
                            &self.cfg.source_priors(),
                        )
                    })
                    .collect();
                let mut srng = StreamRng::from_key(
                    self.cfg.seed,
                    &[
                        domain::VIEW_SAMPLING,
                        view.view_id as u64,
                        round,
                        iteration,
                        idx as u64,
                    ],
                );
                sample_source_subset(&weights_vec, self.cfg.views.subset_size, &mut srng)
                    .expect("sources checked non-empty")
            };

            refwin.gather(view, x, y, &win);
            let t_x = self.textureness.at(x, y);
            let (w_plus, w_minus) = if self.cfg.patchmatch.enable_texture_weighting {
                weights(t_x)
            } else {
                (1.0, 1.0)
            };

            // rho per (hypothesis, sampled source), cached for the winner
            let mut best_i = 0usize;
            let mut best_cost = f64::INFINITY;
            let mut rho_cache: Vec<Vec<f64>> = Vec::with_capacity(hypotheses.len());
            for (hi, hyp) in hypotheses.iter().enumerate() {
                let mut cost = 0.0;
                let mut rhos = Vec::with_capacity(subset.len());
                for &m in &subset {
                    let src = self.sources[m];
                    let warp = PlaneWarp::new(view, src, &hyp.plane);
                    let rho = refwin.ncc(src, &warp);
                    rhos.push(rho);
                    let mut c = photo_weight(hyp.kind, w_plus, w_minus) * photo_cost(rho);
                    if geom_enabled {
                        if let Some(src_map) = src_maps.get(&src.view_id) {
                            c += lambda
                                * geom_weight(hyp.kind, w_plus, w_minus)
                                * geometric_cost(
                                    view,
                                    src,
                                    src_map,
                                    x,
                                    y,
                                    &hyp.plane,
                                    self.cfg.photo.psi_max,
                                );
                        }
                    }
                    cost += c;
                }
                cost /= subset.len() as f64;
                rho_cache.push(rhos);
                if cost < best_cost {
                    best_cost = cost;
                    best_i = hi;
                }
            }

            let winner = &hypotheses[best_i];
            let sel_depth = winner
                .plane
                .depth_at(view, u, v)
                .unwrap_or(0.5 * (self.depth_range.0 + self.depth_range.1));
            let n = winner.plane.normal;
            pixels.push((idx, sel_depth as f32, [n.x as f32, n.y as f32, n.z as f32]));
            prev_plane = Some(winner.plane);

            // densities of the winning plane for every source (reuse the
            // sampled ones, compute the rest)
            let mut per_src = vec![f64::NAN; n_src];
            for (k, &m) in subset.iter().enumerate() {
                per_src[m] = rho_cache[best_i][k];
            }
            for (m, slot) in per_src.iter_mut().enumerate() {
                if slot.is_nan() {
                    let warp = PlaneWarp::new(view, self.sources[m], &winner.plane);
                    *slot = refwin.ncc(self.sources[m], &warp);
                }
            }
            for m in 0..n_src {
                densities[m].push(photo_density(per_src[m], win.sigma_rho));
            }
        }

        // forward-backward smoothing per source along this line
        let q = (0..n_src)
            .map(|m| {
                let (x0, y0) = line[0];
                let init = state.q_at(m, x0, y0) as f64;
                smooth_line_posteriors(init, self.cfg.views.gamma, &densities[m], u_density)
                    .into_iter()
                    .map(|p| p as f32)
                    .collect()
            })
            .collect();
        LineOutcome { pixels, q }
    }
}

/// Pixel traversal orders for a sweep direction.
fn sweep_lines(w: usize, h: usize, dir: SweepDirection) -> Vec<Vec<(usize, usize)>> {
    match dir {
        SweepDirection::LeftRight => (0..h)
            .map(|y| (0..w).map(|x| (x, y)).collect())
            .collect(),
        SweepDirection::RightLeft => (0..h)
            .map(|y| (0..w).rev().map(|x| (x, y)).collect())
            .collect(),
        SweepDirection::TopDown => (0..w)
            .map(|x| (0..h).map(|y| (x, y)).collect())
            .collect(),
        SweepDirection::BottomUp => (0..w)
            .map(|x| (0..h).rev().map(|y| (x, y)).collect())
            .collect(),
    }
}
