//! Procedural synthetic-shapes dataset for desk-scale runs.
//!
//! Each image carries a handful of colored shapes (discs, blocks, wedges) on
//! a gradient background. Every object gets an injected degradation score in
//! [0,1]; its pixels are washed toward a haze color by that amount, and the
//! score is recorded on the annotation so the stub embedding backend and the
//! weight-analysis report can key on it.

use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::boxes::{iou, BoxPx};
use crate::data::{Annotation, DatasetManifest, ManifestEntry};
use crate::error::Result;
use crate::raster::{Raster, ScalarMap};
use crate::util;

pub const SHAPE_CLASSES: [&str; 3] = ["disc", "block", "wedge"];

const HAZE_COLOR: [f64; 3] = [0.85, 0.85, 0.88];
const CLASS_COLORS: [[f64; 3]; 3] = [
    [0.80, 0.15, 0.15], // disc
    [0.15, 0.70, 0.20], // block
    [0.15, 0.25, 0.80], // wedge
];

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ShapesConfig {
    pub num_images: usize,
    pub image_size: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub seed: u64,
    /// Fraction of the pixel signal replaced by haze at degradation 1.
    pub wash_strength: f64,
    pub split: String,
    /// Also emit a synthetic depth map per image (for the haze pipeline).
    pub with_depth: bool,
}

impl Default for ShapesConfig {
    fn default() -> Self {
        Self {
            num_images: 200,
            image_size: 64,
            min_objects: 1,
            max_objects: 3,
            seed: 42,
            wash_strength: 0.85,
            split: "train".into(),
            with_depth: false,
        }
    }
}

/// One rendered object: class index, box, injected degradation.
#[derive(Debug, Clone)]
pub struct RenderedObject {
    pub class_index: usize,
    pub bbox: BoxPx,
    pub degradation: f64,
}

/// Render one scene. Pure given the RNG state; reused by the demo frontend.
pub fn render_scene(cfg: &ShapesConfig, rng: &mut ChaCha8Rng) -> (Raster, Vec<RenderedObject>) {
    let size = cfg.image_size;
    let mut img = Raster::new(size, size);
    // Gradient background with light pixel noise.
    for y in 0..size {
        let base = 0.15 + 0.20 * (y as f64 / size as f64);
        for x in 0..size {
            for c in 0..3 {
                let tint = [0.00, 0.02, 0.05][c];
                img.set(x, y, c, (base + tint + 0.01 * util::sample_gaussian(rng)).clamp(0.0, 1.0));
            }
        }
    }

    let count = rng.gen_range(cfg.min_objects..=cfg.max_objects);
    let mut objects: Vec<RenderedObject> = Vec::new();
    let mut attempts = 0;
    while objects.len() < count && attempts < 40 {
        attempts += 1;
        let w: f64 = rng.gen_range(12.0..24.0);
        let aspect: f64 = rng.gen_range(0.78..1.28);
        let h = (w * aspect).clamp(10.0, 26.0);
        let x = rng.gen_range(1.0..(size as f64 - w - 1.0));
        let y = rng.gen_range(1.0..(size as f64 - h - 1.0));
        let bbox = BoxPx::new(x, y, w, h);
        if objects.iter().any(|o| iou(&o.bbox, &bbox) > 0.25) {
            continue;
        }
        let class_index = rng.gen_range(0..SHAPE_CLASSES.len());
        let degradation: f64 = rng.gen();
        let mut color = CLASS_COLORS[class_index];
        for c in color.iter_mut() {
            *c = (*c + rng.gen_range(-0.08..0.08)).clamp(0.05, 0.95);
        }
        draw_shape(&mut img, class_index, &bbox, color, degradation, cfg.wash_strength, rng);
        objects.push(RenderedObject {
            class_index,
            bbox,
            degradation,
        });
    }
    (img, objects)
}

fn draw_shape(
    img: &mut Raster,
    class_index: usize,
    bbox: &BoxPx,
    color: [f64; 3],
    degradation: f64,
    wash_strength: f64,
    rng: &mut ChaCha8Rng,
) {
    let (cx, cy) = bbox.center();
    let (rx, ry) = (bbox.w / 2.0, bbox.h / 2.0);
    let x0 = bbox.x.floor().max(0.0) as usize;
    let y0 = bbox.y.floor().max(0.0) as usize;
    let x1 = (bbox.x2().ceil() as usize).min(img.width());
    let y1 = (bbox.y2().ceil() as usize).min(img.height());
    let wash = wash_strength * degradation;
    for y in y0..y1 {
        for x in x0..x1 {
            let fx = x as f64 + 0.5;
            let fy = y as f64 + 0.5;
            let inside = match class_index {
                0 => {
                    let dx = (fx - cx) / rx;
                    let dy = (fy - cy) / ry;
                    dx * dx + dy * dy <= 1.0
                }
                1 => true,
                _ => {
                    // wedge: below the diagonal from top-center to the base corners
                    let u = ((fx - bbox.x) / bbox.w).clamp(0.0, 1.0);
                    let v = ((fy - bbox.y) / bbox.h).clamp(0.0, 1.0);
                    v >= (2.0 * (u - 0.5)).abs()
                }
            };
            if inside {
                for c in 0..3 {
                    let textured = (color[c] + 0.02 * util::sample_gaussian(rng)).clamp(0.0, 1.0);
                    let washed = (1.0 - wash) * textured + wash * HAZE_COLOR[c];
                    img.set(x, y, c, washed);
                }
            }
        }
    }
}

/// Synthetic depth for a scene: a floor-to-horizon gradient, used when the
/// fixture feeds the haze pipeline.
pub fn scene_depth(size: usize) -> ScalarMap {
    let mut d = ScalarMap::new(size, size);
    for y in 0..size {
        // nearer at the bottom of the frame
        let v = 1.0 + 9.0 * (1.0 - y as f64 / (size - 1).max(1) as f64);
        for x in 0..size {
            d.set(x, y, v);
        }
    }
    d
}

/// Generate the dataset on disk: images/, optional depth/, manifest.json.
pub fn generate_shapes_dataset(cfg: &ShapesConfig, out_dir: &Path) -> Result<DatasetManifest> {
    std::fs::create_dir_all(out_dir.join("images"))?;
    if cfg.with_depth {
        std::fs::create_dir_all(out_dir.join("depth"))?;
    }
    let mut manifest = DatasetManifest::new(
        &cfg.split,
        SHAPE_CLASSES.iter().map(|s| s.to_string()).collect(),
    );
    let mut next_annotation_id: u64 = 1;
    for image_index in 0..cfg.num_images {
        let image_id = image_index as u64 + 1;
        let mut rng = util::seeded_rng(
            util::fnv1a_parts(&[&cfg.seed.to_le_bytes(), &image_id.to_le_bytes()]),
            "shapes-scene",
        );
        let (img, objects) = render_scene(cfg, &mut rng);
        let file_name = format!("shapes_{image_id:06}.png");
        img.write_png8(&out_dir.join("images").join(&file_name))?;
        let depth_path = if cfg.with_depth {
            let depth_name = format!("shapes_{image_id:06}.depth");
            crate::raster::write_depth_raw(
                &scene_depth(cfg.image_size),
                &out_dir.join("depth").join(&depth_name),
            )?;
            Some(format!("depth/{depth_name}"))
        } else {
            None
        };
        let annotations = objects
            .iter()
            .map(|o| {
                let ann = Annotation {
                    annotation_id: next_annotation_id,
                    class_index: o.class_index,
                    bbox: o.bbox,
                    degradation: Some(o.degradation),
                };
                next_annotation_id += 1;
                ann
            })
            .collect();
        manifest.entries.push(ManifestEntry {
            image_id,
            image_path: format!("images/{file_name}"),
            depth_path,
            width: cfg.image_size,
            height: cfg.image_size,
            annotations,
        });
    }
    manifest.save(&out_dir.join("manifest.json"))?;
    // Re-load so entry paths are absolute for immediate use.
    DatasetManifest::load(&out_dir.join("manifest.json"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic() {
        let cfg = ShapesConfig {
            num_images: 4,
            ..ShapesConfig::default()
        };
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let m1 = generate_shapes_dataset(&cfg, d1.path()).unwrap();
        let m2 = generate_shapes_dataset(&cfg, d2.path()).unwrap();
        assert_eq!(m1.content_hash(), m2.content_hash());
        for (e1, e2) in m1.entries.iter().zip(&m2.entries) {
            let i1 = crate::data::load_entry_image(e1).unwrap();
            let i2 = crate::data::load_entry_image(e2).unwrap();
            assert_eq!(i1.data(), i2.data());
        }
    }

    #[test]
    fn objects_are_annotated_and_in_bounds() {
        let cfg = ShapesConfig {
            num_images: 6,
            ..ShapesConfig::default()
        };
        let dir = tempfile::tempdir().unwrap();
        let manifest = generate_shapes_dataset(&cfg, dir.path()).unwrap();
        manifest.validate().unwrap();
        assert!(manifest.total_annotations() >= cfg.num_images * cfg.min_objects);
        for entry in &manifest.entries {
            for ann in &entry.annotations {
                assert!(ann.bbox.x >= 0.0 && ann.bbox.y >= 0.0);
                assert!(ann.bbox.x2() <= cfg.image_size as f64);
                assert!(ann.bbox.y2() <= cfg.image_size as f64);
                assert!(ann.degradation.is_some());
            }
        }
    }

    #[test]
    fn depth_fixture_written_when_requested() {
        let cfg = ShapesConfig {
            num_images: 2,
            with_depth: true,
            ..ShapesConfig::default()
        };
        let dir = tempfile::tempdir().unwrap();
        let manifest = generate_shapes_dataset(&cfg, dir.path()).unwrap();
        for entry in &manifest.entries {
            let depth =
                crate::raster::read_depth(Path::new(entry.depth_path.as_ref().unwrap())).unwrap();
            assert_eq!(depth.width(), cfg.image_size);
            let max = depth.data().iter().copied().fold(0.0f64, f64::max);
            let min = depth.data().iter().copied().fold(f64::INFINITY, f64::min);
            assert!(max / min <= 100.0);
        }
    }
}
