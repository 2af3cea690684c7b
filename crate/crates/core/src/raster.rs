//! In-memory image planes and file-boundary conversions.
//!
//! All pixel math in the toolkit runs on linear `[0,1]` `f64` values;
//! quantization happens only when crossing a file boundary. Depth maps are
//! ingested either as 16-bit grayscale PNG with a JSON sidecar recording the
//! original min/max, or as a raw little-endian f32 array with a 16-byte
//! header.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::boxes::BoxPx;
use crate::error::{CoreError, Result};

/// RGB image, row-major, channel-interleaved, values in `[0,1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl Raster {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height * 3],
        }
    }

    pub fn from_data(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(CoreError::Shape(format!(
                "raster data length {} does not match {}x{}x3",
                data.len(),
                width,
                height
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * 3 + c]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f64) {
        self.data[(y * self.width + x) * 3 + c] = v;
    }

    pub fn fill(&mut self, rgb: [f64; 3]) {
        for px in self.data.chunks_exact_mut(3) {
            px.copy_from_slice(&rgb);
        }
    }

    /// Bilinear resample to a new size (half-pixel-centered sampling).
    pub fn resize(&self, new_w: usize, new_h: usize) -> Result<Raster> {
        if new_w == 0 || new_h == 0 {
            return Err(CoreError::InvalidInput("resize to zero size".into()));
        }
        let mut out = Raster::new(new_w, new_h);
        let sx = self.width as f64 / new_w as f64;
        let sy = self.height as f64 / new_h as f64;
        for y in 0..new_h {
            let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f64);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(self.height - 1);
            let dy = fy - y0 as f64;
            for x in 0..new_w {
                let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f64);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(self.width - 1);
                let dx = fx - x0 as f64;
                for c in 0..3 {
                    let v = self.get(x0, y0, c) * (1.0 - dx) * (1.0 - dy)
                        + self.get(x1, y0, c) * dx * (1.0 - dy)
                        + self.get(x0, y1, c) * (1.0 - dx) * dy
                        + self.get(x1, y1, c) * dx * dy;
                    out.set(x, y, c, v);
                }
            }
        }
        Ok(out)
    }

    /// Copy a pixel-aligned sub-rectangle.
    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Result<Raster> {
        if w == 0 || h == 0 || x0 + w > self.width || y0 + h > self.height {
            return Err(CoreError::InvalidInput(format!(
                "crop ({x0},{y0},{w},{h}) out of bounds for {}x{}",
                self.width, self.height
            )));
        }
        let mut out = Raster::new(w, h);
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    out.set(x, y, c, self.get(x0 + x, y0 + y, c));
                }
            }
        }
        Ok(out)
    }

    /// Quantize to 8-bit RGB bytes (round-half-up via `round`).
    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    pub fn from_rgb8(width: usize, height: usize, bytes: &[u8]) -> Result<Self> {
        if bytes.len() != width * height * 3 {
            return Err(CoreError::Shape("rgb8 buffer size mismatch".into()));
        }
        let data = bytes.iter().map(|&b| f64::from(b) / 255.0).collect();
        Self::from_data(width, height, data)
    }

    /// Stable hash over the exact pixel bit patterns.
    pub fn content_hash(&self) -> u64 {
        let mut h = crate::util::fnv1a(&(self.width as u64).to_le_bytes());
        h = crate::util::fnv1a_extend(h, &(self.height as u64).to_le_bytes());
        for &v in &self.data {
            h = crate::util::fnv1a_extend(h, &v.to_bits().to_le_bytes());
        }
        h
    }

    pub fn write_png8(&self, path: &Path) -> Result<()> {
        let buf = self.to_rgb8();
        let img = image::RgbImage::from_raw(self.width as u32, self.height as u32, buf)
            .ok_or_else(|| CoreError::Shape("rgb8 buffer construction failed".into()))?;
        img.save_with_format(path, image::ImageFormat::Png)?;
        Ok(())
    }

    pub fn read_png(path: &Path) -> Result<Raster> {
        let img = image::open(path)?.to_rgb8();
        Raster::from_rgb8(img.width() as usize, img.height() as usize, img.as_raw())
    }
}

/// Single-channel H x W map of `f64` values (depth, transmission, ...).
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarMap {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl ScalarMap {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height],
        }
    }

    pub fn from_data(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height {
            return Err(CoreError::Shape(format!(
                "map data length {} does not match {}x{}",
                data.len(),
                width,
                height
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.data[y * self.width + x] = v;
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> ScalarMap {
        ScalarMap {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

/// Sidecar for 16-bit PNG depth files: the stored integers are rescaled back
/// to `[min, max]` on load.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DepthSidecar {
    pub schema: String,
    pub min: f64,
    pub max: f64,
}

const RAW_DEPTH_MAGIC: &[u8; 4] = b"DPF1";

/// Write a depth map as raw little-endian f32 with a 16-byte header
/// {magic, height, width, reserved}.
pub fn write_depth_raw(map: &ScalarMap, path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(RAW_DEPTH_MAGIC)?;
    f.write_all(&(map.height as u32).to_le_bytes())?;
    f.write_all(&(map.width as u32).to_le_bytes())?;
    f.write_all(&0u32.to_le_bytes())?;
    for &v in map.data() {
        f.write_all(&(v as f32).to_le_bytes())?;
    }
    Ok(())
}

pub fn read_depth_raw(path: &Path) -> Result<ScalarMap> {
    let mut f = std::fs::File::open(path)?;
    let mut header = [0u8; 16];
    f.read_exact(&mut header)?;
    if &header[..4] != RAW_DEPTH_MAGIC {
        return Err(CoreError::Parse(format!(
            "{}: bad raw depth magic",
            path.display()
        )));
    }
    let h = u32::from_le_bytes(header[4..8].try_into().unwrap()) as usize;
    let w = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
    let mut bytes = Vec::new();
    f.read_to_end(&mut bytes)?;
    if bytes.len() != w * h * 4 {
        return Err(CoreError::Parse(format!(
            "{}: raw depth payload is {} bytes, expected {}",
            path.display(),
            bytes.len(),
            w * h * 4
        )));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())))
        .collect();
    ScalarMap::from_data(w, h, data)
}

/// Write a depth map as 16-bit grayscale PNG plus a min/max sidecar.
pub fn write_depth_png16(map: &ScalarMap, path: &Path) -> Result<()> {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for &v in map.data() {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !lo.is_finite() || !hi.is_finite() {
        return Err(CoreError::Numeric("non-finite depth values".into()));
    }
    let span = if hi > lo { hi - lo } else { 1.0 };
    let buf: Vec<u16> = map
        .data()
        .iter()
        .map(|&v| (((v - lo) / span).clamp(0.0, 1.0) * 65535.0).round() as u16)
        .collect();
    let img = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::from_raw(
        map.width as u32,
        map.height as u32,
        buf,
    )
    .ok_or_else(|| CoreError::Shape("depth buffer construction failed".into()))?;
    img.save_with_format(path, image::ImageFormat::Png)?;
    let sidecar = DepthSidecar {
        schema: "depth-sidecar/v1".into(),
        min: lo,
        max: hi,
    };
    let sidecar_path = sidecar_path_for(path);
    std::fs::write(&sidecar_path, serde_json::to_string_pretty(&sidecar)?)?;
    Ok(())
}

fn sidecar_path_for(path: &Path) -> std::path::PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(".json");
    std::path::PathBuf::from(p)
}

pub fn read_depth_png16(path: &Path) -> Result<ScalarMap> {
    let img = image::open(path)?.to_luma16();
    let sidecar_path = sidecar_path_for(path);
    let (lo, hi) = if sidecar_path.exists() {
        let sidecar: DepthSidecar = serde_json::from_str(&std::fs::read_to_string(sidecar_path)?)?;
        (sidecar.min, sidecar.max)
    } else {
        (0.0, 1.0)
    };
    let span = hi - lo;
    let data = img
        .as_raw()
        .iter()
        .map(|&v| lo + f64::from(v) / 65535.0 * span)
        .collect();
    ScalarMap::from_data(img.width() as usize, img.height() as usize, data)
}

/// Load a depth map, dispatching on extension: `.png` (16-bit + sidecar)
/// or anything else as the raw f32 format.
pub fn read_depth(path: &Path) -> Result<ScalarMap> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("png") => read_depth_png16(path),
        _ => read_depth_raw(path),
    }
}

/// How an object box becomes encoder input: expand the shorter side to a
/// square, clip to image bounds, resize to `resize_to`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CropPolicy {
    pub resize_to: usize,
}

impl Default for CropPolicy {
    fn default() -> Self {
        Self { resize_to: 64 }
    }
}

impl CropPolicy {
    /// Extract the crop for `bbox` from `image` under this policy.
    ///
    /// Zero-area boxes are an input error; boxes poking outside the image are
    /// clipped and only an empty post-clip region is an error.
    pub fn extract(&self, image: &Raster, bbox: &BoxPx) -> Result<Raster> {
        if bbox.area() <= 0.0 {
            return Err(CoreError::InvalidInput(format!(
                "zero-area crop ({}, {}, {}, {})",
                bbox.x, bbox.y, bbox.w, bbox.h
            )));
        }
        let side = bbox.w.max(bbox.h);
        let (cx, cy) = bbox.center();
        let square = BoxPx::new(cx - side / 2.0, cy - side / 2.0, side, side);
        let clipped = square
            .clip_to(image.width() as f64, image.height() as f64)
            .ok_or_else(|| CoreError::InvalidInput("crop empty after clipping".into()))?;
        let x0 = clipped.x.floor() as usize;
        let y0 = clipped.y.floor() as usize;
        let x1 = (clipped.x2().ceil() as usize).min(image.width()).max(x0 + 1);
        let y1 = (clipped.y2().ceil() as usize)
            .min(image.height())
            .max(y0 + 1);
        let raw = image.crop(x0, y0, x1 - x0, y1 - y0)?;
        raw.resize(self.resize_to, self.resize_to)
    }
}
