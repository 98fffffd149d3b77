//! Plane-induced correspondence between calibrated views.
//!
//! Per-pixel state is a [`LocalPlane`]: a camera-facing unit normal plus the
//! plane offset, both in the reference-camera frame. The plane at a pixel
//! with depth `θ` and normal `n` has offset `d = θ * (n . ray)`, so depth at
//! any other pixel is `d / (n . ray')` — propagation re-anchors through the
//! plane instead of copying the neighbor's depth.

use nalgebra::{Matrix3, Vector3};
use thiserror::Error;

use crate::scene::CameraView;

#[derive(Clone, Copy, Debug, Error, PartialEq, Eq)]
pub enum GeomError {
    /// Warped or unprojected point has non-positive depth in the target view.
    #[error("point behind camera")]
    BehindCamera,
    /// The viewing ray is (near-)parallel to the hypothesis plane.
    #[error("ray parallel to plane")]
    RayParallelToPlane,
}

pub const RAY_PARALLEL_EPS: f64 = 1e-9;

/// Plane in the reference-camera frame: `normal . X = offset`.
///
/// `normal` is unit and faces the camera at its anchoring pixel
/// (`normal . ray < 0`), which makes `offset` negative for valid planes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LocalPlane {
    pub normal: Vector3<f64>,
    pub offset: f64,
}

impl LocalPlane {
    /// Anchors a plane at pixel `(u, v)` with the given depth and normal.
    /// The normal is flipped camera-facing if needed.
    pub fn from_pixel(
        view: &CameraView,
        u: f64,
        v: f64,
        depth: f64,
        normal: Vector3<f64>,
    ) -> Result<Self, GeomError> {
        let ray = view.ray_cam(u, v);
        let mut n = normal.normalize();
        let mut dot = n.dot(&ray);
        if dot > 0.0 {
            n = -n;
            dot = -dot;
        }
        if dot.abs() < RAY_PARALLEL_EPS {
            return Err(GeomError::RayParallelToPlane);
        }
        Ok(Self {
            normal: n,
            offset: depth * dot,
        })
    }

    /// Depth of the plane along the ray of pixel `(u, v)`.
    pub fn depth_at(&self, view: &CameraView, u: f64, v: f64) -> Result<f64, GeomError> {
        let ray = view.ray_cam(u, v);
        let denom = self.normal.dot(&ray);
        if denom.abs() < RAY_PARALLEL_EPS {
            return Err(GeomError::RayParallelToPlane);
        }
        let depth = self.offset / denom;
        if depth <= 0.0 {
            return Err(GeomError::BehindCamera);
        }
        Ok(depth)
    }

    /// Same plane expressed in another camera's frame.
    pub fn transform(&self, from: &CameraView, to: &CameraView) -> LocalPlane {
        let r_rel = to.rotation * from.rotation.transpose();
        let t_rel = to.translation - r_rel * from.translation;
        let normal = r_rel * self.normal;
        LocalPlane {
            normal,
            offset: self.offset + normal.dot(&t_rel),
        }
    }

    /// The 3D world point where the ray of `(u, v)` meets the plane.
    pub fn point_at(&self, view: &CameraView, u: f64, v: f64) -> Result<Vector3<f64>, GeomError> {
        let depth = self.depth_at(view, u, v)?;
        Ok(view.unproject(u, v, depth))
    }

    /// Plane normal in world coordinates.
    pub fn world_normal(&self, view: &CameraView) -> Vector3<f64> {
        view.rotation.transpose() * self.normal
    }
}

/// Plane in world coordinates: `normal . X = offset` (unit normal).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WorldPlane {
    pub normal: Vector3<f64>,
    pub offset: f64,
}

impl WorldPlane {
    pub fn from_point_normal(point: &Vector3<f64>, normal: &Vector3<f64>) -> Self {
        let n = normal.normalize();
        Self {
            normal: n,
            offset: n.dot(point),
        }
    }

    pub fn distance(&self, point: &Vector3<f64>) -> f64 {
        (self.normal.dot(point) - self.offset).abs()
    }

    /// Re-expresses the plane in a camera frame, anchored at pixel `(u, v)`,
    /// normal flipped camera-facing.
    pub fn to_local(&self, view: &CameraView, u: f64, v: f64) -> Result<LocalPlane, GeomError> {
        let n_cam = view.rotation * self.normal;
        let d_cam = self.offset + n_cam.dot(&view.translation);
        let ray = view.ray_cam(u, v);
        let denom = n_cam.dot(&ray);
        if denom.abs() < RAY_PARALLEL_EPS {
            return Err(GeomError::RayParallelToPlane);
        }
        let plane = if denom > 0.0 {
            LocalPlane {
                normal: -n_cam,
                offset: -d_cam,
            }
        } else {
            LocalPlane {
                normal: n_cam,
                offset: d_cam,
            }
        };
        Ok(plane)
    }
}

/// Precomputed plane-induced homography from a reference view into a source.
///
/// Built once per (hypothesis, source) pair; warping a window sample is then
/// nine multiply-adds and a division.
pub struct PlaneWarp {
    h: Matrix3<f64>,
    // g . [u,v,1] = normal . ray(u,v); used for the positive-ref-depth check
    g: Vector3<f64>,
    offset: f64,
}

impl PlaneWarp {
    pub fn new(ref_view: &CameraView, src_view: &CameraView, plane: &LocalPlane) -> Self {
        let r_rel = src_view.rotation * ref_view.rotation.transpose();
        let t_rel = src_view.translation - r_rel * ref_view.translation;
        // M maps ref-camera points on the plane into the src camera frame
        let m = r_rel + t_rel * (plane.normal.transpose() / plane.offset);
        let k_src = Matrix3::new(
            src_view.fx, 0.0, src_view.cx,
            0.0, src_view.fy, src_view.cy,
            0.0, 0.0, 1.0,
        );
        let k_ref_inv = Matrix3::new(
            1.0 / ref_view.fx, 0.0, -ref_view.cx / ref_view.fx,
            0.0, 1.0 / ref_view.fy, -ref_view.cy / ref_view.fy,
            0.0, 0.0, 1.0,
        );
        Self {
            h: k_src * m * k_ref_inv,
            g: k_ref_inv.transpose() * plane.normal,
            offset: plane.offset,
        }
    }

    /// Maps a reference pixel through the plane into the source image.
    #[inline]
    pub fn warp(&self, u: f64, v: f64) -> Result<(f64, f64), GeomError> {
        if !self.in_front(u, v) {
            return Err(GeomError::BehindCamera);
        }
        let h = &self.h;
        let x = h[(0, 0)] * u + h[(0, 1)] * v + h[(0, 2)];
        let y = h[(1, 0)] * u + h[(1, 1)] * v + h[(1, 2)];
        let w = h[(2, 0)] * u + h[(2, 1)] * v + h[(2, 2)];
        let inv = 1.0 / w;
        Ok((x * inv, y * inv))
    }

    /// True when the plane point of this pixel lies in front of both
    /// cameras. Linear in `(u, v)`, so checking the four corners of a
    /// rectangle validates its whole interior.
    #[inline]
    pub(crate) fn in_front(&self, u: f64, v: f64) -> bool {
        // ref depth = offset / (g . p) must be positive
        let denom = self.g.x * u + self.g.y * v + self.g.z;
        if denom * self.offset <= 0.0 {
            return false;
        }
        // src depth has the sign of w (given positive ref depth)
        let h = &self.h;
        h[(2, 0)] * u + h[(2, 1)] * v + h[(2, 2)] > 0.0
    }

    /// Homography coefficients, row-major.
    #[inline]
    pub(crate) fn rows(&self) -> [f64; 9] {
        let h = &self.h;
        [
            h[(0, 0)], h[(0, 1)], h[(0, 2)],
            h[(1, 0)], h[(1, 1)], h[(1, 2)],
            h[(2, 0)], h[(2, 1)], h[(2, 2)],
        ]
    }
}

/// One-shot plane-induced warp of a single pixel.
pub fn plane_induced_warp(
    ref_view: &CameraView,
    src_view: &CameraView,
    plane: &LocalPlane,
    u: f64,
    v: f64,
) -> Result<(f64, f64), GeomError> {
    // reject pixels whose ray meets the plane behind the reference camera
    plane.depth_at(ref_view, u, v)?;
    PlaneWarp::new(ref_view, src_view, plane).warp(u, v)
}
