//! Per-view depth and normal estimates.

/// Per-pixel depth (scene units) and unit normal (reference-camera frame).
///
/// Depth `0.0` is the invalid sentinel; in-scene depths are strictly
/// positive, so validity needs no separate mask.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthNormalMap {
    width: usize,
    height: usize,
    depth: Vec<f32>,
    normal: Vec<[f32; 3]>,
}

impl DepthNormalMap {
    pub fn new_invalid(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            depth: vec![0.0; width * height],
            normal: vec![[0.0; 3]; width * height],
        }
    }

    pub fn from_parts(width: usize, height: usize, depth: Vec<f32>, normal: Vec<[f32; 3]>) -> Self {
        assert_eq!(depth.len(), width * height);
        assert_eq!(normal.len(), width * height);
        Self {
            width,
            height,
            depth,
            normal,
        }
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn idx(&self, x: usize, y: usize) -> usize {
        y * self.width + x
    }

    #[inline]
    pub fn depth_at(&self, x: usize, y: usize) -> f32 {
        self.depth[self.idx(x, y)]
    }

    #[inline]
    pub fn normal_at(&self, x: usize, y: usize) -> [f32; 3] {
        self.normal[self.idx(x, y)]
    }

    #[inline]
    pub fn is_valid(&self, x: usize, y: usize) -> bool {
        self.depth[self.idx(x, y)] > 0.0
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, depth: f32, normal: [f32; 3]) {
        let i = self.idx(x, y);
        self.depth[i] = depth;
        self.normal[i] = normal;
    }

    /// Clears the pixel back to the invalid sentinel.
    #[inline]
    pub fn invalidate(&mut self, x: usize, y: usize) {
        let i = self.idx(x, y);
        self.depth[i] = 0.0;
        self.normal[i] = [0.0; 3];
    }

    pub fn depths(&self) -> &[f32] {
        &self.depth
    }

    pub fn normals(&self) -> &[[f32; 3]] {
        &self.normal
    }

    pub fn valid_count(&self) -> usize {
        self.depth.iter().filter(|&&d| d > 0.0).count()
    }
}
