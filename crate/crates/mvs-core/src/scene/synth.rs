//! Synthetic calibrated scenes with exact ground truth.
//!
//! Scenes are finite textured rectangles in world space rendered by
//! ray-plane intersection (nearest hit wins). Ground-truth depth comes
//! straight from the intersection parameter, so every rendered pixel has an
//! analytically exact depth and normal.
//!
//! World convention: x right, y down, z forward; cameras sit on a ring
//! perpendicular to the viewing direction and all look at the same target.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::depthmap::DepthNormalMap;
use crate::rng::{domain, StreamRng};
use crate::scene::ply::CloudPoint;
use crate::scene::{CameraView, GroundTruth, SceneBundle, SceneError};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Texture {
    /// Alternating squares of `period` plane units.
    Checkerboard {
        period: f64,
        color_a: [f32; 3],
        color_b: [f32; 3],
    },
    /// Smooth value noise, `amp` around `base`, feature size `scale`.
    Noise {
        scale: f64,
        base: [f32; 3],
        amp: f32,
    },
    Constant { color: [f32; 3] },
}

/// Overrides the texture inside a centered rectangle of the plane.
///
/// `micro_amp` adds visually negligible value-noise shading (a real matte
/// surface is never perfectly constant); zero yields a mathematically
/// constant patch.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FlatPatch {
    pub half_u_frac: f64,
    pub half_v_frac: f64,
    pub color: [f32; 3],
    #[serde(default)]
    pub micro_amp: f32,
    #[serde(default = "default_micro_scale")]
    pub micro_scale: f64,
}

fn default_micro_scale() -> f64 {
    0.3
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PlaneSpec {
    pub center: [f64; 3],
    pub normal: [f64; 3],
    /// Half-extents along the in-plane axes.
    pub extent_u: f64,
    pub extent_v: f64,
    pub texture: Texture,
    /// Rotates the texture coordinates. A rotated checkerboard avoids the
    /// lattice-aliased stereo matches an axis-aligned pattern produces on an
    /// axis-aligned camera ring.
    #[serde(default)]
    pub tex_rotation_deg: f64,
    #[serde(default)]
    pub flat_center: Option<FlatPatch>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CameraRing {
    pub count: usize,
    pub ring_center: [f64; 3],
    pub radius: f64,
    pub look_at: [f64; 3],
    #[serde(default = "default_up")]
    pub up_hint: [f64; 3],
}

fn default_up() -> [f64; 3] {
    [0.0, -1.0, 0.0]
}

fn default_gt_cloud_step() -> usize {
    2
}

fn default_supersample() -> usize {
    3
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub image_width: usize,
    pub image_height: usize,
    pub fov_deg: f64,
    #[serde(default)]
    pub noise_sigma: f64,
    #[serde(default)]
    pub seed: u64,
    pub depth_min: f64,
    pub depth_max: f64,
    #[serde(default)]
    pub background: [f32; 3],
    /// Subsampling step when exporting the ground-truth cloud.
    #[serde(default = "default_gt_cloud_step")]
    pub gt_cloud_step: usize,
    /// Rays per pixel axis for color antialiasing (depth stays exact from
    /// the center ray). Hard texture edges need this to behave like real
    /// sensor images under the bilateral range kernel.
    #[serde(default = "default_supersample")]
    pub supersample: usize,
    pub cameras: CameraRing,
    pub planes: Vec<PlaneSpec>,
}

struct Plane {
    center: Vector3<f64>,
    normal: Vector3<f64>, // unit
    u_axis: Vector3<f64>,
    v_axis: Vector3<f64>,
    extent_u: f64,
    extent_v: f64,
    offset: f64, // n . x = offset for points on the plane
    texture: Texture,
    tex_rot: (f64, f64), // (cos, sin) of the texture rotation
    flat_center: Option<FlatPatch>,
}

impl Plane {
    fn from_spec(spec: &PlaneSpec) -> Result<Self, SceneError> {
        let normal = Vector3::from(spec.normal);
        let len = normal.norm();
        if len < 1e-12 {
            return Err(SceneError::DegenerateGeometry("zero plane normal".into()));
        }
        let normal = normal / len;
        // any stable perpendicular works for the texture frame
        let helper = if normal.x.abs() < 0.9 {
            Vector3::x()
        } else {
            Vector3::y()
        };
        let u_axis = (helper - normal * helper.dot(&normal)).normalize();
        let v_axis = normal.cross(&u_axis);
        let center = Vector3::from(spec.center);
        let rot = spec.tex_rotation_deg.to_radians();
        Ok(Self {
            center,
            normal,
            u_axis,
            v_axis,
            extent_u: spec.extent_u,
            extent_v: spec.extent_v,
            offset: normal.dot(&center),
            texture: spec.texture.clone(),
            tex_rot: (rot.cos(), rot.sin()),
            flat_center: spec.flat_center.clone(),
        })
    }

    /// Ray-plane intersection; returns the ray parameter and local (u, v)
    /// when the hit lies inside the rectangle.
    fn intersect(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<(f64, f64, f64)> {
        let denom = self.normal.dot(dir);
        if denom.abs() < 1e-12 {
            return None;
        }
        let s = (self.offset - self.normal.dot(origin)) / denom;
        if s <= 0.0 {
            return None;
        }
        let hit = origin + dir * s;
        let rel = hit - self.center;
        let u = rel.dot(&self.u_axis);
        let v = rel.dot(&self.v_axis);
        if u.abs() > self.extent_u || v.abs() > self.extent_v {
            return None;
        }
        Some((s, u, v))
    }

    fn color_at(&self, u: f64, v: f64, plane_idx: usize, seed: u64) -> [f32; 3] {
        if let Some(patch) = &self.flat_center {
            if u.abs() <= patch.half_u_frac * self.extent_u
                && v.abs() <= patch.half_v_frac * self.extent_v
            {
                if patch.micro_amp > 0.0 {
                    let n = value_noise(
                        u / patch.micro_scale,
                        v / patch.micro_scale,
                        seed ^ 0xf1a7 ^ (plane_idx as u64 + 1),
                    ) as f32;
                    let shift = (n - 0.5) * 2.0 * patch.micro_amp;
                    return [
                        (patch.color[0] + shift).clamp(0.0, 1.0),
                        (patch.color[1] + shift).clamp(0.0, 1.0),
                        (patch.color[2] + shift).clamp(0.0, 1.0),
                    ];
                }
                return patch.color;
            }
        }
        let (c, s) = self.tex_rot;
        let (u, v) = (c * u - s * v, s * u + c * v);
        match &self.texture {
            Texture::Constant { color } => *color,
            Texture::Checkerboard {
                period,
                color_a,
                color_b,
            } => {
                let iu = (u / period).floor() as i64;
                let iv = (v / period).floor() as i64;
                if (iu + iv).rem_euclid(2) == 0 {
                    *color_a
                } else {
                    *color_b
                }
            }
            Texture::Noise { scale, base, amp } => {
                let n = value_noise(u / scale, v / scale, seed ^ (plane_idx as u64 + 1)) as f32;
                let shift = (n - 0.5) * 2.0 * amp;
                [
                    (base[0] + shift).clamp(0.0, 1.0),
                    (base[1] + shift).clamp(0.0, 1.0),
                    (base[2] + shift).clamp(0.0, 1.0),
                ]
            }
        }
    }
}

fn hash01(seed: u64, xi: i64, yi: i64) -> f64 {
    let mut z = seed
        ^ (xi as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)
        ^ (yi as u64).wrapping_mul(0xc2b2_ae3d_27d4_eb4f);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^= z >> 31;
    (z >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Two-octave value noise in [0, 1]; smooth enough to carry NCC texture.
fn value_noise(x: f64, y: f64, seed: u64) -> f64 {
    let mut total = 0.0;
    let mut weight = 0.0;
    for (octave, w) in [(1.0, 0.65), (2.7, 0.35)] {
        let sx = x * octave;
        let sy = y * octave;
        let x0 = sx.floor();
        let y0 = sy.floor();
        let fx = sx - x0;
        let fy = sy - y0;
        // smoothstep fade
        let ux = fx * fx * (3.0 - 2.0 * fx);
        let uy = fy * fy * (3.0 - 2.0 * fy);
        let (xi, yi) = (x0 as i64, y0 as i64);
        let o = octave.to_bits();
        let v00 = hash01(seed ^ o, xi, yi);
        let v10 = hash01(seed ^ o, xi + 1, yi);
        let v01 = hash01(seed ^ o, xi, yi + 1);
        let v11 = hash01(seed ^ o, xi + 1, yi + 1);
        let top = v00 + (v10 - v00) * ux;
        let bot = v01 + (v11 - v01) * ux;
        total += (top + (bot - top) * uy) * w;
        weight += w;
    }
    total / weight
}

/// Builds world->camera rotation for a camera at `pos` looking at `target`.
pub fn look_at_rotation(
    pos: &Vector3<f64>,
    target: &Vector3<f64>,
    up_hint: &Vector3<f64>,
) -> Result<Matrix3<f64>, SceneError> {
    let forward = (target - pos)
        .try_normalize(1e-12)
        .ok_or_else(|| SceneError::DegenerateGeometry("camera at look-at target".into()))?;
    let mut up = *up_hint;
    if forward.cross(&up).norm() < 1e-9 {
        up = Vector3::x();
    }
    let right = forward.cross(&up).normalize();
    let down = forward.cross(&right);
    Ok(Matrix3::from_rows(&[
        right.transpose(),
        down.transpose(),
        forward.transpose(),
    ]))
}

/// Renders every ring camera and emits exact per-pixel ground truth.
pub fn generate_synthetic_scene(
    spec: &SyntheticSpec,
) -> Result<(SceneBundle, GroundTruth), SceneError> {
    if spec.cameras.count == 0 {
        return Err(SceneError::MalformedScene("camera ring has zero cameras".into()));
    }
    if spec.planes.is_empty() {
        return Err(SceneError::MalformedScene("no planes in scene".into()));
    }
    if !(spec.depth_min > 0.0 && spec.depth_min < spec.depth_max) {
        return Err(SceneError::MalformedScene("bad depth range".into()));
    }
    let planes: Vec<Plane> = spec
        .planes
        .iter()
        .map(Plane::from_spec)
        .collect::<Result<_, _>>()?;

    let (w, h) = (spec.image_width, spec.image_height);
    let fx = w as f64 / (2.0 * (spec.fov_deg.to_radians() / 2.0).tan());
    let fy = fx;
    let cx = (w as f64 - 1.0) / 2.0;
    let cy = (h as f64 - 1.0) / 2.0;

    let ring_center = Vector3::from(spec.cameras.ring_center);
    let look_at = Vector3::from(spec.cameras.look_at);
    let up_hint = Vector3::from(spec.cameras.up_hint);
    let axis = (look_at - ring_center)
        .try_normalize(1e-12)
        .ok_or_else(|| SceneError::DegenerateGeometry("ring center equals look-at".into()))?;
    let basis_a = {
        let helper = if axis.x.abs() < 0.9 {
            Vector3::x()
        } else {
            Vector3::y()
        };
        (helper - axis * helper.dot(&axis)).normalize()
    };
    let basis_b = axis.cross(&basis_a);

    let mut views = Vec::with_capacity(spec.cameras.count);
    let mut gt = GroundTruth::default();
    let mut cloud: Vec<CloudPoint> = Vec::new();

    for cam_idx in 0..spec.cameras.count {
        let phi = std::f64::consts::TAU * cam_idx as f64 / spec.cameras.count as f64;
        let pos = ring_center + basis_a * (spec.cameras.radius * phi.cos())
            + basis_b * (spec.cameras.radius * phi.sin());
        let rotation = look_at_rotation(&pos, &look_at, &up_hint)?;
        let translation = -(rotation * pos);

        let mut rgb = vec![spec.background; w * h];
        let mut depth_map = DepthNormalMap::new_invalid(w, h);
        let rot_t = rotation.transpose();
        let mut hits = 0usize;

        let trace = |dir_world: &Vector3<f64>| -> Option<(f64, usize, f64, f64)> {
            let mut best: Option<(f64, usize, f64, f64)> = None;
            for (pi, plane) in planes.iter().enumerate() {
                if let Some((s, u, v)) = plane.intersect(&pos, dir_world) {
                    if best.map_or(true, |(bs, ..)| s < bs) {
                        best = Some((s, pi, u, v));
                    }
                }
            }
            best
        };
        let ss = spec.supersample.max(1);
        for y in 0..h {
            for x in 0..w {
                // area-averaged color over the pixel footprint
                let mut color = [0.0f32; 3];
                for sy in 0..ss {
                    for sx in 0..ss {
                        let du = (sx as f64 + 0.5) / ss as f64 - 0.5;
                        let dv = (sy as f64 + 0.5) / ss as f64 - 0.5;
                        let dir = rot_t
                            * Vector3::new(
                                (x as f64 + du - cx) / fx,
                                (y as f64 + dv - cy) / fy,
                                1.0,
                            );
                        let sample = match trace(&dir) {
                            Some((_, pi, u, v)) => planes[pi].color_at(u, v, pi, spec.seed),
                            None => spec.background,
                        };
                        for c in 0..3 {
                            color[c] += sample[c];
                        }
                    }
                }
                for c in &mut color {
                    *c /= (ss * ss) as f32;
                }
                if spec.noise_sigma > 0.0 {
                    let mut rng = StreamRng::from_key(
                        spec.seed,
                        &[domain::NOISE, cam_idx as u64, y as u64, x as u64],
                    );
                    let n = (rng.normal() * spec.noise_sigma) as f32;
                    for c in &mut color {
                        *c = (*c + n).clamp(0.0, 1.0);
                    }
                }
                rgb[y * w + x] = color;

                // exact ground truth from the center ray
                let dir_cam = Vector3::new((x as f64 - cx) / fx, (y as f64 - cy) / fy, 1.0);
                let dir_world = rot_t * dir_cam;
                if let Some((s, pi, _, _)) = trace(&dir_world) {
                    hits += 1;
                    let plane = &planes[pi];
                    // z-depth equals the ray parameter because dir_cam.z = 1
                    let mut n_cam = rotation * plane.normal;
                    if n_cam.dot(&dir_cam) > 0.0 {
                        n_cam = -n_cam;
                    }
                    depth_map.set(x, y, s as f32, [n_cam.x as f32, n_cam.y as f32, n_cam.z as f32]);
                    if x % spec.gt_cloud_step == 0 && y % spec.gt_cloud_step == 0 {
                        let hit = pos + dir_world * s;
                        cloud.push(CloudPoint {
                            position: [hit.x, hit.y, hit.z],
                            normal: [plane.normal.x, plane.normal.y, plane.normal.z],
                            color: [
                                (color[0] * 255.0) as u8,
                                (color[1] * 255.0) as u8,
                                (color[2] * 255.0) as u8,
                            ],
                        });
                    }
                }
            }
        }
        if hits == 0 {
            return Err(SceneError::DegenerateGeometry(format!(
                "camera {cam_idx} sees no plane"
            )));
        }
        gt.depth.insert(cam_idx as u32, depth_map);
        views.push(CameraView::new(
            cam_idx as u32,
            w,
            h,
            (fx, fy, cx, cy),
            rotation,
            translation,
            rgb,
        )?);
    }
    gt.cloud = Some(cloud);

    // scene size: diagonal of the bounding box over all plane corners
    let mut lo = Vector3::repeat(f64::INFINITY);
    let mut hi = Vector3::repeat(f64::NEG_INFINITY);
    for p in &planes {
        for su in [-1.0, 1.0] {
            for sv in [-1.0, 1.0] {
                let corner = p.center + p.u_axis * (su * p.extent_u) + p.v_axis * (sv * p.extent_v);
                lo = lo.inf(&corner);
                hi = hi.sup(&corner);
            }
        }
    }
    let scene_size = (hi - lo).norm();

    Ok((
        SceneBundle {
            views,
            depth_range: (spec.depth_min, spec.depth_max),
            scene_size,
        },
        gt,
    ))
}

impl SyntheticSpec {
    /// Small frontal checkerboard wall; handy default for tests.
    pub fn frontal_wall_demo(cameras: usize, width: usize, height: usize) -> Self {
        Self {
            image_width: width,
            image_height: height,
            fov_deg: 60.0,
            noise_sigma: 0.0,
            seed: 1,
            depth_min: 2.0,
            depth_max: 10.0,
            background: [0.0; 3],
            gt_cloud_step: 2,
            supersample: 3,
            cameras: CameraRing {
                count: cameras,
                ring_center: [0.0, 0.0, 0.0],
                radius: 0.5,
                look_at: [0.0, 0.0, 5.0],
                up_hint: default_up(),
            },
            planes: vec![PlaneSpec {
                center: [0.0, 0.0, 5.0],
                normal: [0.0, 0.0, -1.0],
                extent_u: 7.0,
                extent_v: 7.0,
                texture: Texture::Checkerboard {
                    period: 0.35,
                    color_a: [0.92, 0.9, 0.88],
                    color_b: [0.12, 0.14, 0.16],
                },
                tex_rotation_deg: 20.0,
                flat_center: None,
            }],
        }
    }
}
