//! Ray-cast toy scenes: a back wall, an optional ground plane, boxes and
//! spheres. Every pixel keeps its nearest hit, so segmentation and depth
//! agree by construction.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::{normals_from_depth, seg_boundaries, Intrinsics, Sample};

/// Scene content in camera coordinates (x right, y down, z forward).
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Primitive {
    /// Axis-aligned box between `min` and `max`.
    Box { min: [f64; 3], max: [f64; 3], class: u8 },
    Sphere { center: [f64; 3], radius: f64, class: u8 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneLayout {
    /// Depth of the fronto-parallel back wall (class 0).
    pub wall_depth: f64,
    /// Height of the camera above the ground plane (class 1), if any.
    pub ground: Option<f64>,
    pub objects: Vec<Primitive>,
    /// RGB albedo per class.
    pub palette: Vec<[f64; 3]>,
    /// Unit vector towards the light.
    pub light: [f64; 3],
}

impl SceneLayout {
    /// Only the back wall.
    pub fn background(wall_depth: f64) -> Self {
        Self { wall_depth, ground: None, objects: Vec::new(), palette: default_palette(1), light: [0.3, -0.6, -0.74] }
    }

    /// A random layout with classes `0..num_classes`: wall, ground, then
    /// object classes.
    pub fn random<R: Rng + ?Sized>(rng: &mut R, num_classes: usize, d_far: f64) -> Self {
        let wall_depth = d_far * rng.random_range(0.6..0.9);
        let cam_h = rng.random_range(1.2..1.8);
        let ground = (num_classes >= 2).then_some(cam_h);
        let mut objects = Vec::new();
        if num_classes >= 3 {
            let count = rng.random_range(2..=5);
            for _ in 0..count {
                let class = rng.random_range(2..num_classes) as u8;
                let z = rng.random_range(3.5..wall_depth * 0.7);
                let x = rng.random_range(-0.35..0.35) * z;
                if rng.random_bool(0.5) {
                    let (w, h, d) = (rng.random_range(0.6..2.0), rng.random_range(0.6..2.2), rng.random_range(0.6..2.0));
                    objects.push(Primitive::Box { min: [x - w / 2.0, cam_h - h, z], max: [x + w / 2.0, cam_h, z + d], class });
                } else {
                    let r = rng.random_range(0.4..1.1);
                    objects.push(Primitive::Sphere { center: [x, cam_h - r, z + r], radius: r, class });
                }
            }
        }
        let mut palette = default_palette(num_classes);
        for c in &mut palette {
            for v in c.iter_mut() {
                *v = (*v + rng.random_range(-0.08..0.08)).clamp(0.05, 0.95);
            }
        }
        let light = normalize([rng.random_range(-0.5..0.5), -0.7, -0.6]);
        Self { wall_depth, ground, objects, palette, light }
    }
}

fn default_palette(num_classes: usize) -> Vec<[f64; 3]> {
    const BASE: [[f64; 3]; 8] = [
        [0.55, 0.60, 0.75],
        [0.45, 0.35, 0.25],
        [0.85, 0.20, 0.20],
        [0.20, 0.70, 0.30],
        [0.90, 0.80, 0.20],
        [0.25, 0.35, 0.85],
        [0.75, 0.40, 0.80],
        [0.30, 0.80, 0.80],
    ];
    (0..num_classes.max(1))
        .map(|c| {
            let b = BASE[c % BASE.len()];
            let shade = 1.0 - 0.15 * (c / BASE.len()) as f64;
            [b[0] * shade, b[1] * shade, b[2] * shade]
        })
        .collect()
}

fn normalize(v: [f64; 3]) -> [f64; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}

/// Nearest positive ray parameter for the ray `t * dir` against `p`.
fn intersect(p: &Primitive, dir: [f64; 3]) -> Option<f64> {
    match *p {
        Primitive::Box { min, max, .. } => {
            let (mut t0, mut t1) = (0.0f64, f64::INFINITY);
            for i in 0..3 {
                if dir[i].abs() < 1e-12 {
                    if 0.0 < min[i] || 0.0 > max[i] {
                        return None;
                    }
                } else {
                    let (a, b) = (min[i] / dir[i], max[i] / dir[i]);
                    t0 = t0.max(a.min(b));
                    t1 = t1.min(a.max(b));
                }
            }
            (t0 <= t1 && t0 > 0.0).then_some(t0)
        }
        Primitive::Sphere { center, radius, .. } => {
            let a = dir[0] * dir[0] + dir[1] * dir[1] + dir[2] * dir[2];
            let b = dir[0] * center[0] + dir[1] * center[1] + dir[2] * center[2];
            let c = center[0] * center[0] + center[1] * center[1] + center[2] * center[2] - radius * radius;
            let disc = b * b - a * c;
            if disc < 0.0 {
                return None;
            }
            let t = (b - disc.sqrt()) / a;
            (t > 0.0).then_some(t)
        }
    }
}

fn class_of(p: &Primitive) -> u8 {
    match *p {
        Primitive::Box { class, .. } | Primitive::Sphere { class, .. } => class,
    }
}

/// Renders `layout` at `height x width`. Depth is clipped at the wall.
pub fn render_scene(layout: &SceneLayout, height: usize, width: usize) -> Result<Sample> {
    if height < 2 || width < 2 {
        return Err(Error::shape("render_scene", format!("{height}x{width}")));
    }
    if !(layout.wall_depth > 0.0) {
        return Err(Error::value("render_scene", "wall depth must be positive"));
    }
    let k = Intrinsics::centered(height, width);
    let p = height * width;
    let mut seg = vec![0u8; p];
    let mut depth = vec![layout.wall_depth; p];
    for y in 0..height {
        for x in 0..width {
            // rays with unit z-component, so the hit parameter is the depth
            let dir = [(x as f64 - k.cx) / k.fx, (y as f64 - k.cy) / k.fy, 1.0];
            let i = y * width + x;
            if let Some(h) = layout.ground {
                if dir[1] > 0.0 {
                    let t = h / dir[1];
                    if t < depth[i] {
                        depth[i] = t;
                        seg[i] = 1;
                    }
                }
            }
            for obj in &layout.objects {
                if let Some(t) = intersect(obj, dir) {
                    if t < depth[i] {
                        depth[i] = t;
                        seg[i] = class_of(obj);
                    }
                }
            }
        }
    }
    let normals = normals_from_depth(&depth, height, width, &k)?;
    let edges = seg_boundaries(&seg, height, width);

    let mut image = vec![0.0; 3 * p];
    let n = normals.data();
    for y in 0..height {
        for x in 0..width {
            let i = y * width + x;
            let pt = k.unproject(x as f64, y as f64, depth[i]);
            let albedo = layout.palette.get(seg[i] as usize).copied().unwrap_or([0.5; 3]);
            let lambert = -(n[i] * layout.light[0] + n[p + i] * layout.light[1] + n[2 * p + i] * layout.light[2]);
            let shade = 0.45 + 0.55 * lambert.clamp(0.0, 1.0);
            let checker = if ((pt[0] * 1.5).floor() + (pt[1] * 1.5).floor() + (pt[2] * 1.5).floor()) as i64 % 2 == 0 { 1.0 } else { 0.8 };
            for c in 0..3 {
                image[c * p + i] = (albedo[c] * shade * checker).clamp(0.0, 1.0);
            }
        }
    }
    Ok(Sample {
        height,
        width,
        image: Tensor::new(vec![3, height, width], image)?,
        seg,
        depth,
        normals,
        edges,
        intrinsics: k,
    })
}

/// Deterministic random scene of `size x size` pixels.
pub fn synthetic_scene(seed: u64, size: usize, num_classes: usize, d_far: f64) -> Result<Sample> {
    if size < 32 {
        return Err(Error::Config(format!("synthetic scenes need size >= 32, got {size}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layout = SceneLayout::random(&mut rng, num_classes, d_far);
    render_scene(&layout, size, size)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_scene() {
        assert_eq!(synthetic_scene(7, 32, 5, 20.0).unwrap(), synthetic_scene(7, 32, 5, 20.0).unwrap());
        assert_ne!(synthetic_scene(7, 32, 5, 20.0).unwrap(), synthetic_scene(8, 32, 5, 20.0).unwrap());
    }

    #[test]
    fn background_only() {
        let s = render_scene(&SceneLayout::background(12.0), 32, 32).unwrap();
        assert!(s.seg.iter().all(|&c| c == 0));
        assert!(s.edges.iter().all(|&e| e == 0));
        let n = s.normals.data();
        for i in 0..32 * 32 {
            assert!(n[i].abs() < 1e-12 && n[1024 + i].abs() < 1e-12 && (n[2048 + i] + 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn small_sizes_rejected() {
        assert!(synthetic_scene(0, 16, 4, 20.0).is_err());
    }
}
