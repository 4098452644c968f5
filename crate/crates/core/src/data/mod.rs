//! Samples, label derivation, synthetic scenes and the on-disk layout.

mod classmap;
mod io;
mod normals;
mod synthetic;

pub use classmap::{apply_class_map, ClassMap, COMMON_CLASSES};
pub use io::{load_dataset, read_pfm, save_dataset, save_sample, write_pfm, DatasetMeta, DatasetReader, LoadMode, Pfm};
pub use normals::{median_scale, normals_from_depth};
pub use synthetic::{render_scene, synthetic_scene, Primitive, SceneLayout};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Pinhole camera parameters in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Intrinsics {
    /// Square pixels, principal point at the image centre, focal length
    /// equal to the image width.
    pub fn centered(height: usize, width: usize) -> Self {
        Self { fx: width as f64, fy: width as f64, cx: (width as f64 - 1.0) / 2.0, cy: (height as f64 - 1.0) / 2.0 }
    }

    /// Camera-frame point seen at pixel `(u, v)` with depth `z`.
    pub fn unproject(&self, u: f64, v: f64, z: f64) -> [f64; 3] {
        [(u - self.cx) * z / self.fx, (v - self.cy) * z / self.fy, z]
    }
}

/// An image with aligned labels for every task.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub height: usize,
    pub width: usize,
    /// `[3, H, W]` in `[0, 1]`.
    pub image: Tensor,
    /// Class id per pixel, `IGNORE_LABEL` for unlabelled pixels.
    pub seg: Vec<u8>,
    /// Metric depth along the optical axis.
    pub depth: Vec<f64>,
    /// `[3, H, W]` unit vectors facing the camera.
    pub normals: Tensor,
    /// 1 on edge pixels, 0 elsewhere.
    pub edges: Vec<u8>,
    pub intrinsics: Intrinsics,
}

/// Marks pixels whose segmentation differs from a 4-neighbour.
pub fn seg_boundaries(seg: &[u8], height: usize, width: usize) -> Vec<u8> {
    let mut out = vec![0u8; seg.len()];
    for y in 0..height {
        for x in 0..width {
            let s = seg[y * width + x];
            let differs = (x > 0 && seg[y * width + x - 1] != s)
                || (x + 1 < width && seg[y * width + x + 1] != s)
                || (y > 0 && seg[(y - 1) * width + x] != s)
                || (y + 1 < height && seg[(y + 1) * width + x] != s);
            out[y * width + x] = differs as u8;
        }
    }
    out
}

impl Sample {
    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    /// Checks every sample invariant: shapes, image range, positive depth
    /// bounded by `d_far`, unit normals (within `normal_tol`) and edges lying
    /// on segmentation changes.
    pub fn validate(&self, d_far: f64, normal_tol: f64) -> Result<()> {
        let (h, w, p) = (self.height, self.width, self.pixels());
        let bad = |detail: String| Err(Error::value("sample", detail));
        if h == 0 || w == 0 {
            return bad("empty image".into());
        }
        if self.image.shape() != [3, h, w] || self.normals.shape() != [3, h, w] {
            return bad(format!("image {:?}, normals {:?} for {h}x{w}", self.image.shape(), self.normals.shape()));
        }
        if self.seg.len() != p || self.depth.len() != p || self.edges.len() != p {
            return bad("label maps do not match the image size".into());
        }
        if self.image.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return bad("image values outside [0, 1]".into());
        }
        if let Some(d) = self.depth.iter().find(|&&d| !(d > 0.0 && d <= d_far)) {
            return bad(format!("depth {d} outside (0, {d_far}]"));
        }
        let n = self.normals.data();
        for i in 0..p {
            let norm = (n[i].powi(2) + n[p + i].powi(2) + n[2 * p + i].powi(2)).sqrt();
            if (norm - 1.0).abs() > normal_tol {
                return bad(format!("normal of norm {norm} at pixel {i}"));
            }
        }
        let boundary = seg_boundaries(&self.seg, h, w);
        if let Some(i) = (0..p).find(|&i| self.edges[i] > 1 || self.edges[i] == 1 && boundary[i] == 0) {
            return bad(format!("edge label {} at pixel {i} off a segmentation change", self.edges[i]));
        }
        Ok(())
    }
}

/// Stacks samples into model inputs and targets.
#[derive(Clone, Debug)]
pub struct Batch {
    /// `[B, 3, H, W]`.
    pub images: Tensor,
    pub seg: Vec<u8>,
    /// `[B, 1, H, W]`.
    pub depth: Tensor,
    /// `[B, 3, H, W]`.
    pub normals: Tensor,
    /// `[B, 1, H, W]` in {0, 1}.
    pub edges: Tensor,
}

impl Batch {
    pub fn from_samples(samples: &[&Sample]) -> Result<Self> {
        let first = samples.first().ok_or_else(|| Error::value("batch", "no samples"))?;
        let (h, w) = (first.height, first.width);
        if samples.iter().any(|s| s.height != h || s.width != w) {
            return Err(Error::shape("batch", "samples differ in size"));
        }
        let b = samples.len();
        let images = Tensor::stack(&samples.iter().map(|s| s.image.clone()).collect::<Vec<_>>())?;
        let normals = Tensor::stack(&samples.iter().map(|s| s.normals.clone()).collect::<Vec<_>>())?;
        let depth = Tensor::new(vec![b, 1, h, w], samples.iter().flat_map(|s| s.depth.iter().copied()).collect())?;
        let edges = Tensor::new(vec![b, 1, h, w], samples.iter().flat_map(|s| s.edges.iter().map(|&e| e as f64)).collect())?;
        let seg = samples.iter().flat_map(|s| s.seg.iter().copied()).collect();
        Ok(Self { images, seg, depth, normals, edges })
    }

    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
