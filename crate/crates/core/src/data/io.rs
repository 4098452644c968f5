//! On-disk dataset layout:
//!
//! ```text
//! root/intrinsics.json
//! root/images/000000.png   8-bit RGB
//! root/seg/000000.png      8-bit class ids
//! root/depth/000000.pfm    1-channel float
//! root/normals/000000.pfm  3-channel float
//! root/edges/000000.png    8-bit {0, 255}
//! ```

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use image::{GrayImage, RgbImage};
use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::{Intrinsics, Sample};

const MODALITIES: [&str; 5] = ["images", "seg", "depth", "normals", "edges"];

/// Tolerance on normal lengths after the 32-bit round trip.
const LOADED_NORMAL_TOL: f64 = 1e-4;

/// A decoded PFM image, rows top to bottom, channels interleaved.
#[derive(Clone, Debug, PartialEq)]
pub struct Pfm {
    pub width: usize,
    pub height: usize,
    /// 1 or 3.
    pub channels: usize,
    pub data: Vec<f32>,
}

fn format_err(path: &Path, detail: impl Into<String>) -> Error {
    Error::Format { path: path.to_path_buf(), detail: detail.into() }
}

/// Writes little-endian PFM (negative scale), rows bottom to top.
pub fn write_pfm(path: &Path, pfm: &Pfm) -> Result<()> {
    let tag = match pfm.channels {
        1 => "Pf",
        3 => "PF",
        c => return Err(format_err(path, format!("{c} channels"))),
    };
    if pfm.data.len() != pfm.width * pfm.height * pfm.channels {
        return Err(format_err(path, "data length does not match the header"));
    }
    let mut w = BufWriter::new(fs::File::create(path)?);
    write!(w, "{tag}\n{} {}\n-1.0\n", pfm.width, pfm.height)?;
    let row = pfm.width * pfm.channels;
    for y in (0..pfm.height).rev() {
        for v in &pfm.data[y * row..(y + 1) * row] {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_pfm(path: &Path) -> Result<Pfm> {
    let mut r = BufReader::new(fs::File::open(path)?);
    let mut header = Vec::new();
    // three whitespace-terminated lines: tag, dimensions, scale
    for _ in 0..3 {
        let mut line = String::new();
        r.read_line(&mut line)?;
        header.push(line.trim().to_string());
    }
    let channels = match header[0].as_str() {
        "Pf" => 1,
        "PF" => 3,
        t => return Err(format_err(path, format!("bad tag `{t}`"))),
    };
    let dims: Vec<usize> = header[1].split_whitespace().filter_map(|s| s.parse().ok()).collect();
    let [width, height] = dims[..] else {
        return Err(format_err(path, format!("bad dimensions `{}`", header[1])));
    };
    let scale: f32 = header[2].parse().map_err(|_| format_err(path, format!("bad scale `{}`", header[2])))?;
    if scale == 0.0 {
        return Err(format_err(path, "zero scale"));
    }
    let little = scale < 0.0;
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let row = width * channels;
    if bytes.len() != 4 * row * height {
        return Err(format_err(path, format!("{} data bytes for {width}x{height}x{channels}", bytes.len())));
    }
    let mut data = vec![0f32; row * height];
    for (i, chunk) in bytes.chunks_exact(4).enumerate() {
        let b: [u8; 4] = chunk.try_into().expect("chunks of four");
        let v = if little { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) };
        let (file_row, col) = (i / row, i % row);
        data[(height - 1 - file_row) * row + col] = v;
    }
    Ok(Pfm { width, height, channels, data })
}

/// Camera and depth range shared by a split, stored as `intrinsics.json`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMeta {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub d_far: f64,
}

impl DatasetMeta {
    pub fn new(k: Intrinsics, d_far: f64) -> Self {
        Self { fx: k.fx, fy: k.fy, cx: k.cx, cy: k.cy, d_far }
    }

    pub fn intrinsics(&self) -> Intrinsics {
        Intrinsics { fx: self.fx, fy: self.fy, cx: self.cx, cy: self.cy }
    }
}

fn file_name(index: usize, ext: &str) -> String {
    format!("{index:06}.{ext}")
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes one sample under `root`; the modality directories must exist.
pub fn save_sample(root: &Path, index: usize, s: &Sample) -> Result<()> {
    let (h, w, p) = (s.height, s.width, s.pixels());
    let img = s.image.data();
    let rgb = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        image::Rgb([to_u8(img[i]), to_u8(img[p + i]), to_u8(img[2 * p + i])])
    });
    rgb.save(root.join("images").join(file_name(index, "png")))?;
    GrayImage::from_raw(w as u32, h as u32, s.seg.clone())
        .ok_or_else(|| Error::shape("save_sample", "segmentation size"))?
        .save(root.join("seg").join(file_name(index, "png")))?;
    GrayImage::from_raw(w as u32, h as u32, s.edges.iter().map(|&e| if e > 0 { 255 } else { 0 }).collect())
        .ok_or_else(|| Error::shape("save_sample", "edge map size"))?
        .save(root.join("edges").join(file_name(index, "png")))?;
    let depth = Pfm { width: w, height: h, channels: 1, data: s.depth.iter().map(|&d| d as f32).collect() };
    write_pfm(&root.join("depth").join(file_name(index, "pfm")), &depth)?;
    let n = s.normals.data();
    let normals = Pfm {
        width: w,
        height: h,
        channels: 3,
        data: (0..p).flat_map(|i| (0..3).map(move |c| n[c * p + i] as f32)).collect(),
    };
    write_pfm(&root.join("normals").join(file_name(index, "pfm")), &normals)
}

/// Writes a whole split. Intrinsics are taken from the first sample.
pub fn save_dataset(root: &Path, samples: &[Sample], d_far: f64) -> Result<()> {
    let first = samples.first().ok_or_else(|| Error::value("save_dataset", "no samples"))?;
    for m in MODALITIES {
        fs::create_dir_all(root.join(m))?;
    }
    let meta = DatasetMeta::new(first.intrinsics, d_far);
    fs::write(root.join("intrinsics.json"), serde_json::to_string_pretty(&meta)?)?;
    for (i, s) in samples.iter().enumerate() {
        s.validate(d_far, LOADED_NORMAL_TOL)?;
        save_sample(root, i, s)?;
    }
    Ok(())
}

/// What to do with a sample that lacks a modality or fails validation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum LoadMode {
    /// Yield an error.
    #[default]
    Strict,
    /// Log a warning and move on.
    Skip,
}

/// Streams samples in index order.
pub struct DatasetReader {
    root: PathBuf,
    meta: DatasetMeta,
    stems: Vec<String>,
    next: usize,
    mode: LoadMode,
}

impl DatasetReader {
    pub fn meta(&self) -> &DatasetMeta {
        &self.meta
    }

    pub fn len(&self) -> usize {
        self.stems.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stems.is_empty()
    }

    fn load(&self, stem: &str) -> Result<Sample> {
        let path = |m: &str, ext: &str| self.root.join(m).join(format!("{stem}.{ext}"));
        for (m, ext) in [("images", "png"), ("seg", "png"), ("depth", "pfm"), ("normals", "pfm"), ("edges", "png")] {
            if !path(m, ext).is_file() {
                return Err(Error::MissingModality { modality: m, sample: stem.to_string() });
            }
        }
        let rgb = image::open(path("images", "png"))?.to_rgb8();
        let (w, h) = (rgb.width() as usize, rgb.height() as usize);
        let p = w * h;
        let mut img = vec![0.0; 3 * p];
        for (i, px) in rgb.pixels().enumerate() {
            for c in 0..3 {
                img[c * p + i] = px[c] as f64 / 255.0;
            }
        }
        let gray = |m: &str| -> Result<Vec<u8>> {
            let g = image::open(path(m, "png"))?.to_luma8();
            if (g.width() as usize, g.height() as usize) != (w, h) {
                return Err(format_err(&path(m, "png"), "size differs from the image"));
            }
            Ok(g.into_raw())
        };
        let seg = gray("seg")?;
        let edges = gray("edges")?.into_iter().map(|e| (e > 127) as u8).collect();
        let float = |m: &str, channels: usize| -> Result<Vec<f32>> {
            let pfm = read_pfm(&path(m, "pfm"))?;
            if (pfm.width, pfm.height, pfm.channels) != (w, h, channels) {
                return Err(format_err(&path(m, "pfm"), "size differs from the image"));
            }
            Ok(pfm.data)
        };
        let depth = float("depth", 1)?.into_iter().map(f64::from).collect();
        let nd = float("normals", 3)?;
        let mut normals = vec![0.0; 3 * p];
        for i in 0..p {
            for c in 0..3 {
                normals[c * p + i] = nd[3 * i + c] as f64;
            }
        }
        let sample = Sample {
            height: h,
            width: w,
            image: Tensor::new(vec![3, h, w], img)?,
            seg,
            depth,
            normals: Tensor::new(vec![3, h, w], normals)?,
            edges,
            intrinsics: self.meta.intrinsics(),
        };
        sample.validate(self.meta.d_far, LOADED_NORMAL_TOL)?;
        Ok(sample)
    }
}

impl Iterator for DatasetReader {
    type Item = Result<Sample>;

    fn next(&mut self) -> Option<Self::Item> {
        while self.next < self.stems.len() {
            let stem = self.stems[self.next].clone();
            self.next += 1;
            match self.load(&stem) {
                Err(e) if self.mode == LoadMode::Skip => warn!("skipping sample {stem}: {e}"),
                r => return Some(r),
            }
        }
        None
    }
}

/// Opens a split. Sample ids are the stems found in any modality directory,
/// so a file missing from one of them is reported rather than silently dropped.
pub fn load_dataset(root: &Path, mode: LoadMode) -> Result<DatasetReader> {
    let meta_path = root.join("intrinsics.json");
    let meta: DatasetMeta = serde_json::from_str(&fs::read_to_string(&meta_path)?)?;
    if !(meta.d_far > 0.0) {
        return Err(format_err(&meta_path, "d_far must be positive"));
    }
    let mut stems = Vec::new();
    for m in MODALITIES {
        let dir = root.join(m);
        if !dir.is_dir() {
            continue;
        }
        for entry in fs::read_dir(dir)? {
            let path = entry?.path();
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                stems.push(stem.to_string());
            }
        }
    }
    stems.sort();
    stems.dedup();
    Ok(DatasetReader { root: root.to_path_buf(), meta, stems, next: 0, mode })
}
