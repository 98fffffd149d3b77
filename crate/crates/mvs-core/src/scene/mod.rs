//! On-disk scene model: calibrated views, depth ranges, ground truth.
//!
//! A scene directory holds `cameras.txt` (one line per view:
//! `id w h fx fy cx cy r11..r33 tx ty tz`), `scene.toml`
//! (`depth_min`, `depth_max`, `scene_size`) and `images/<id>.png`.
//! Ground truth, when present, lives under `gt/` as PFM depth/normal maps
//! plus a binary PLY point cloud.

pub mod pfm;
pub mod ply;
pub mod synth;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::depthmap::DepthNormalMap;
use ply::CloudPoint;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("missing file: {0}")]
    MissingFile(PathBuf),
    #[error("malformed camera: {0}")]
    MalformedCamera(String),
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),
    #[error("malformed scene metadata: {0}")]
    MalformedScene(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

/// Rec.601 luma weights used for the gray channel.
pub const LUMA: [f32; 3] = [0.299, 0.587, 0.114];

/// One calibrated pinhole view with its image buffers.
///
/// `rotation`/`translation` map world to camera: `X_cam = R * X_world + t`.
#[derive(Clone, Debug)]
pub struct CameraView {
    pub view_id: u32,
    pub width: usize,
    pub height: usize,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
    pub rgb: Vec<[f32; 3]>,
    pub gray: Vec<f32>,
}

impl CameraView {
    /// Builds a view, deriving the gray channel from rgb.
    pub fn new(
        view_id: u32,
        width: usize,
        height: usize,
        intrinsics: (f64, f64, f64, f64),
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
        rgb: Vec<[f32; 3]>,
    ) -> Result<Self, SceneError> {
        let (fx, fy, cx, cy) = intrinsics;
        if fx <= 0.0 || fy <= 0.0 {
            return Err(SceneError::MalformedCamera(format!(
                "view {view_id}: non-positive focal ({fx}, {fy})"
            )));
        }
        let ortho = (rotation.transpose() * rotation - Matrix3::identity()).norm();
        if ortho > 1e-6 {
            return Err(SceneError::MalformedCamera(format!(
                "view {view_id}: rotation not orthonormal (|R'R - I| = {ortho:.2e})"
            )));
        }
        if rgb.len() != width * height {
            return Err(SceneError::DimensionMismatch(format!(
                "view {view_id}: {} rgb pixels for {width}x{height}",
                rgb.len()
            )));
        }
        let gray = rgb
            .iter()
            .map(|p| LUMA[0] * p[0] + LUMA[1] * p[1] + LUMA[2] * p[2])
            .collect();
        Ok(Self {
            view_id,
            width,
            height,
            fx,
            fy,
            cx,
            cy,
            rotation,
            translation,
            rgb,
            gray,
        })
    }

    #[inline]
    pub fn idx(&self, x: usize, y: usize) -> usize {
        y * self.width + x
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    /// Viewing ray through a (continuous) pixel, camera frame, z = 1.
    #[inline]
    pub fn ray_cam(&self, u: f64, v: f64) -> Vector3<f64> {
        Vector3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0)
    }

    #[inline]
    pub fn cam_to_world(&self, xc: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.transpose() * (xc - self.translation)
    }

    #[inline]
    pub fn world_to_cam(&self, xw: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * xw + self.translation
    }

    /// Pixel at integer coordinates unprojected to the world at `depth`
    /// (z-depth in the camera frame).
    pub fn unproject(&self, u: f64, v: f64, depth: f64) -> Vector3<f64> {
        self.cam_to_world(&(self.ray_cam(u, v) * depth))
    }

    /// Projects a world point; `None` when it lies at or behind the camera.
    /// Returns `(u, v, z_depth)`.
    #[inline]
    pub fn project(&self, xw: &Vector3<f64>) -> Option<(f64, f64, f64)> {
        let xc = self.world_to_cam(xw);
        if xc.z <= 0.0 {
            return None;
        }
        Some((
            self.fx * xc.x / xc.z + self.cx,
            self.fy * xc.y / xc.z + self.cy,
            xc.z,
        ))
    }

    /// True when `(u, v)` can be bilinearly sampled.
    #[inline]
    pub fn contains(&self, u: f64, v: f64) -> bool {
        u >= 0.0 && v >= 0.0 && u <= (self.width - 1) as f64 && v <= (self.height - 1) as f64
    }

    #[inline]
    pub fn gray_at(&self, x: usize, y: usize) -> f32 {
        self.gray[y * self.width + x]
    }

    #[inline]
    pub fn rgb_at(&self, x: usize, y: usize) -> [f32; 3] {
        self.rgb[y * self.width + x]
    }

    /// Bilinear gray sample; caller guarantees `contains(u, v)`.
    #[inline]
    pub fn gray_bilinear(&self, u: f64, v: f64) -> f32 {
        let x0 = u.floor() as usize;
        let y0 = v.floor() as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let fx = (u - x0 as f64) as f32;
        let fy = (v - y0 as f64) as f32;
        let g00 = self.gray[y0 * self.width + x0];
        let g10 = self.gray[y0 * self.width + x1];
        let g01 = self.gray[y1 * self.width + x0];
        let g11 = self.gray[y1 * self.width + x1];
        let top = g00 + (g10 - g00) * fx;
        let bot = g01 + (g11 - g01) * fx;
        top + (bot - top) * fy
    }
}

/// A loaded scene: all views plus the depth search range and global scale.
#[derive(Clone, Debug)]
pub struct SceneBundle {
    pub views: Vec<CameraView>,
    /// `(d_min, d_max)` bounding random depth hypotheses.
    pub depth_range: (f64, f64),
    /// Diagonal of the scene's bounding box; grounds size-relative thresholds.
    pub scene_size: f64,
}

impl SceneBundle {
    pub fn view_by_id(&self, id: u32) -> Option<&CameraView> {
        self.views.iter().find(|v| v.view_id == id)
    }
}

/// Optional per-view true depth and a true surface point cloud.
#[derive(Clone, Debug, Default)]
pub struct GroundTruth {
    pub depth: BTreeMap<u32, DepthNormalMap>,
    pub cloud: Option<Vec<CloudPoint>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct SceneMeta {
    depth_min: f64,
    depth_max: f64,
    scene_size: f64,
}

fn parse_camera_line(line: &str, lineno: usize) -> Result<(u32, usize, usize, [f64; 16]), SceneError> {
    let fields: Vec<&str> = line.split_whitespace().collect();
    if fields.len() != 19 {
        return Err(SceneError::MalformedCamera(format!(
            "line {lineno}: expected 19 fields, got {}",
            fields.len()
        )));
    }
    let id: u32 = fields[0]
        .parse()
        .map_err(|_| SceneError::MalformedCamera(format!("line {lineno}: bad id")))?;
    let w: usize = fields[1]
        .parse()
        .map_err(|_| SceneError::MalformedCamera(format!("line {lineno}: bad width")))?;
    let h: usize = fields[2]
        .parse()
        .map_err(|_| SceneError::MalformedCamera(format!("line {lineno}: bad height")))?;
    let mut nums = [0.0f64; 16];
    for (i, f) in fields[3..].iter().enumerate() {
        nums[i] = f
            .parse()
            .map_err(|_| SceneError::MalformedCamera(format!("line {lineno}: bad float {f:?}")))?;
    }
    Ok((id, w, h, nums))
}

fn load_png_rgb(path: &Path) -> Result<(usize, usize, Vec<[f32; 3]>), SceneError> {
    let img = image::open(path)?.into_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let rgb = img
        .pixels()
        .map(|p| [
            p.0[0] as f32 / 255.0,
            p.0[1] as f32 / 255.0,
            p.0[2] as f32 / 255.0,
        ])
        .collect();
    Ok((w, h, rgb))
}

fn save_png_rgb(path: &Path, width: usize, height: usize, rgb: &[[f32; 3]]) -> Result<(), SceneError> {
    let mut img = image::RgbImage::new(width as u32, height as u32);
    for (i, px) in rgb.iter().enumerate() {
        let x = (i % width) as u32;
        let y = (i / width) as u32;
        let quant = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        img.put_pixel(x, y, image::Rgb([quant(px[0]), quant(px[1]), quant(px[2])]));
    }
    img.save(path)?;
    Ok(())
}

/// Writes a view's image as PNG (quantized to 8 bits per channel).
pub fn save_view_png(view: &CameraView, path: &Path) -> Result<(), SceneError> {
    save_png_rgb(path, view.width, view.height, &view.rgb)
}

/// Loads `cameras.txt`, `scene.toml` and all referenced images.
pub fn load_scene(dir: &Path) -> Result<SceneBundle, SceneError> {
    let cam_path = dir.join("cameras.txt");
    if !cam_path.is_file() {
        return Err(SceneError::MissingFile(cam_path));
    }
    let meta_path = dir.join("scene.toml");
    if !meta_path.is_file() {
        return Err(SceneError::MissingFile(meta_path));
    }
    let meta: SceneMeta = toml::from_str(&fs::read_to_string(&meta_path)?)
        .map_err(|e| SceneError::MalformedScene(e.to_string()))?;
    if !(meta.depth_min > 0.0 && meta.depth_min < meta.depth_max) {
        return Err(SceneError::MalformedScene(format!(
            "need 0 < depth_min < depth_max, got ({}, {})",
            meta.depth_min, meta.depth_max
        )));
    }
    if meta.scene_size <= 0.0 {
        return Err(SceneError::MalformedScene("scene_size must be positive".into()));
    }

    let mut views = Vec::new();
    let mut seen = std::collections::BTreeSet::new();
    for (lineno, line) in fs::read_to_string(&cam_path)?.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let (id, w, h, nums) = parse_camera_line(line, lineno + 1)?;
        if !seen.insert(id) {
            return Err(SceneError::MalformedCamera(format!("duplicate view id {id}")));
        }
        let rotation = Matrix3::new(
            nums[4], nums[5], nums[6],
            nums[7], nums[8], nums[9],
            nums[10], nums[11], nums[12],
        );
        let translation = Vector3::new(nums[13], nums[14], nums[15]);
        let img_path = dir.join("images").join(format!("{id}.png"));
        if !img_path.is_file() {
            return Err(SceneError::MissingFile(img_path));
        }
        let (iw, ih, rgb) = load_png_rgb(&img_path)?;
        if iw != w || ih != h {
            return Err(SceneError::DimensionMismatch(format!(
                "view {id}: image is {iw}x{ih}, cameras.txt says {w}x{h}"
            )));
        }
        views.push(CameraView::new(
            id,
            w,
            h,
            (nums[0], nums[1], nums[2], nums[3]),
            rotation,
            translation,
            rgb,
        )?);
    }
    Ok(SceneBundle {
        views,
        depth_range: (meta.depth_min, meta.depth_max),
        scene_size: meta.scene_size,
    })
}

/// Writes the bundle back to the `load_scene` layout.
pub fn save_scene(scene: &SceneBundle, dir: &Path) -> Result<(), SceneError> {
    fs::create_dir_all(dir.join("images"))?;
    let mut cams = String::new();
    for v in &scene.views {
        write!(
            cams,
            "{} {} {} {} {} {} {}",
            v.view_id, v.width, v.height, v.fx, v.fy, v.cx, v.cy
        )
        .unwrap();
        for r in 0..3 {
            for c in 0..3 {
                write!(cams, " {}", v.rotation[(r, c)]).unwrap();
            }
        }
        for k in 0..3 {
            write!(cams, " {}", v.translation[k]).unwrap();
        }
        cams.push('\n');
        save_png_rgb(
            &dir.join("images").join(format!("{}.png", v.view_id)),
            v.width,
            v.height,
            &v.rgb,
        )?;
    }
    fs::write(dir.join("cameras.txt"), cams)?;
    let meta = SceneMeta {
        depth_min: scene.depth_range.0,
        depth_max: scene.depth_range.1,
        scene_size: scene.scene_size,
    };
    fs::write(
        dir.join("scene.toml"),
        toml::to_string(&meta).expect("scene meta serializes"),
    )?;
    Ok(())
}

/// Writes ground truth under `dir/gt/`.
pub fn save_ground_truth(gt: &GroundTruth, dir: &Path) -> Result<(), SceneError> {
    let gt_dir = dir.join("gt");
    fs::create_dir_all(&gt_dir)?;
    for (id, map) in &gt.depth {
        pfm::write_depth_map(
            map,
            &gt_dir.join(format!("depth_{id}.pfm")),
            &gt_dir.join(format!("normal_{id}.pfm")),
        )?;
    }
    if let Some(cloud) = &gt.cloud {
        ply::write_ply(&gt_dir.join("cloud.ply"), cloud)?;
    }
    Ok(())
}

/// Loads ground truth from `dir/gt/` for the given view ids.
pub fn load_ground_truth(dir: &Path, view_ids: &[u32]) -> Result<GroundTruth, SceneError> {
    let gt_dir = dir.join("gt");
    let mut gt = GroundTruth::default();
    for &id in view_ids {
        let dp = gt_dir.join(format!("depth_{id}.pfm"));
        let np = gt_dir.join(format!("normal_{id}.pfm"));
        if dp.is_file() && np.is_file() {
            gt.depth.insert(id, pfm::read_depth_map(&dp, &np)?);
        }
    }
    let cloud_path = gt_dir.join("cloud.ply");
    if cloud_path.is_file() {
        gt.cloud = Some(ply::read_ply(&cloud_path)?);
    }
    Ok(gt)
}
