//! Dataset manifests, COCO ingestion and object cropping.
//!
//! A manifest is the single bookkeeping structure the rest of the toolkit
//! consumes: ordered entries, dense class indices, pixel-space boxes. Paths
//! inside a manifest file are resolved against the manifest's own directory
//! on load, so datasets stay relocatable.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::boxes::BoxPx;
use crate::error::{CoreError, Result};
use crate::raster::{CropPolicy, Raster};
use crate::util;

pub const MANIFEST_SCHEMA: &str = "manifest/v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub annotation_id: u64,
    pub class_index: usize,
    pub bbox: BoxPx,
    /// Injected degradation score for synthetic fixtures; absent on real data.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub degradation: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image_id: u64,
    pub image_path: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub depth_path: Option<String>,
    pub width: usize,
    pub height: usize,
    pub annotations: Vec<Annotation>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub schema: String,
    pub split: String,
    pub class_names: Vec<String>,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn new(split: &str, class_names: Vec<String>) -> Self {
        Self {
            schema: MANIFEST_SCHEMA.into(),
            split: split.to_string(),
            class_names,
            entries: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema != MANIFEST_SCHEMA {
            return Err(CoreError::Parse(format!(
                "unexpected manifest schema {:?}",
                self.schema
            )));
        }
        let mut image_ids = BTreeSet::new();
        let mut annotation_ids = BTreeSet::new();
        for entry in &self.entries {
            if !image_ids.insert(entry.image_id) {
                return Err(CoreError::InvalidInput(format!(
                    "duplicate image id {}",
                    entry.image_id
                )));
            }
            for ann in &entry.annotations {
                if !annotation_ids.insert(ann.annotation_id) {
                    return Err(CoreError::InvalidInput(format!(
                        "duplicate annotation id {}",
                        ann.annotation_id
                    )));
                }
                if ann.class_index >= self.class_names.len() {
                    return Err(CoreError::InvalidInput(format!(
                        "annotation {} class index {} out of range",
                        ann.annotation_id, ann.class_index
                    )));
                }
                let clipped = ann
                    .bbox
                    .clip_to(entry.width as f64, entry.height as f64)
                    .map(|b| b.area())
                    .unwrap_or(0.0);
                if clipped <= 0.0 {
                    return Err(CoreError::InvalidInput(format!(
                        "annotation {} box has no area inside the image",
                        ann.annotation_id
                    )));
                }
                if let Some(g) = ann.degradation {
                    if !(0.0..=1.0).contains(&g) {
                        return Err(CoreError::InvalidInput(format!(
                            "annotation {} degradation {g} outside [0,1]",
                            ann.annotation_id
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.validate()?;
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    /// Load and validate; relative image/depth paths are rebased onto the
    /// manifest's directory.
    pub fn load(path: &Path) -> Result<DatasetManifest> {
        let mut manifest: DatasetManifest =
            serde_json::from_str(&std::fs::read_to_string(path)?)?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        for entry in &mut manifest.entries {
            entry.image_path = rebase(base, &entry.image_path);
            if let Some(depth) = &entry.depth_path {
                entry.depth_path = Some(rebase(base, depth));
            }
        }
        manifest.validate()?;
        Ok(manifest)
    }

    /// Stable content hash used to key downstream caches.
    pub fn content_hash(&self) -> u64 {
        // Paths are excluded so relocating a dataset does not invalidate
        // caches; identity is ids, classes, geometry.
        let mut h = util::fnv1a(self.split.as_bytes());
        for name in &self.class_names {
            h = util::fnv1a_extend(h, name.as_bytes());
        }
        for entry in &self.entries {
            h = util::fnv1a_extend(h, &entry.image_id.to_le_bytes());
            for ann in &entry.annotations {
                h = util::fnv1a_extend(h, &ann.annotation_id.to_le_bytes());
                h = util::fnv1a_extend(h, &(ann.class_index as u64).to_le_bytes());
                for v in [ann.bbox.x, ann.bbox.y, ann.bbox.w, ann.bbox.h] {
                    h = util::fnv1a_extend(h, &v.to_bits().to_le_bytes());
                }
                if let Some(g) = ann.degradation {
                    h = util::fnv1a_extend(h, &g.to_bits().to_le_bytes());
                }
            }
        }
        h
    }

    pub fn entry(&self, image_id: u64) -> Option<&ManifestEntry> {
        self.entries.iter().find(|e| e.image_id == image_id)
    }

    pub fn total_annotations(&self) -> usize {
        self.entries.iter().map(|e| e.annotations.len()).sum()
    }
}

fn rebase(base: &Path, path: &str) -> String {
    let p = Path::new(path);
    if p.is_absolute() {
        path.to_string()
    } else {
        base.join(p).to_string_lossy().into_owned()
    }
}

// --- COCO ingestion -------------------------------------------------------

#[derive(Debug, Deserialize)]
struct CocoDataset {
    #[serde(default)]
    images: Vec<CocoImage>,
    #[serde(default)]
    annotations: Vec<CocoAnnotation>,
    #[serde(default)]
    categories: Vec<CocoCategory>,
}

#[derive(Debug, Deserialize)]
struct CocoImage {
    id: u64,
    file_name: String,
    width: usize,
    height: usize,
}

#[derive(Debug, Deserialize)]
struct CocoAnnotation {
    id: u64,
    image_id: u64,
    category_id: u64,
    bbox: [f64; 4],
}

#[derive(Debug, Deserialize)]
struct CocoCategory {
    id: u64,
    name: String,
}

#[derive(Debug)]
pub struct IngestReport {
    pub manifest: DatasetManifest,
    pub dropped_boxes: usize,
    pub missing_images: Vec<String>,
}

/// Convert a COCO-format annotation file into a manifest.
///
/// Category ids map to a dense index in ascending id order. Boxes are
/// clipped to image bounds and zero/negative-area boxes dropped with a
/// count. Missing image files are listed; the run continues when they are
/// under 1% of the dataset and aborts otherwise.
pub fn ingest_coco(
    annotation_json: &Path,
    image_root: &Path,
    depth_root: Option<&Path>,
) -> Result<IngestReport> {
    let text = std::fs::read_to_string(annotation_json)?;
    let coco: CocoDataset = serde_json::from_str(&text).map_err(|e| {
        CoreError::Parse(format!(
            "{}: line {} column {}: {e}",
            annotation_json.display(),
            e.line(),
            e.column()
        ))
    })?;

    let mut categories = coco.categories;
    categories.sort_by_key(|c| c.id);
    let class_names: Vec<String> = categories.iter().map(|c| c.name.clone()).collect();
    let index_of = |category_id: u64| -> Result<usize> {
        categories
            .binary_search_by_key(&category_id, |c| c.id)
            .map_err(|_| {
                CoreError::InvalidInput(format!(
                    "annotation references missing category id {category_id}"
                ))
            })
    };

    let mut images = coco.images;
    images.sort_by_key(|i| i.id);

    let mut manifest = DatasetManifest::new("ingested", class_names);
    let mut dropped_boxes = 0usize;
    let mut missing_images = Vec::new();

    let mut annotations = coco.annotations;
    annotations.sort_by_key(|a| a.id);

    for img in &images {
        let image_path = image_root.join(&img.file_name);
        if !image_path.exists() {
            missing_images.push(img.file_name.clone());
            continue;
        }
        let depth_path = depth_root.and_then(|root| {
            let stem = Path::new(&img.file_name)
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())?;
            for ext in ["png", "depth"] {
                let candidate = root.join(format!("{stem}.{ext}"));
                if candidate.exists() {
                    return Some(candidate.to_string_lossy().into_owned());
                }
            }
            None
        });
        let mut entry = ManifestEntry {
            image_id: img.id,
            image_path: image_path.to_string_lossy().into_owned(),
            depth_path,
            width: img.width,
            height: img.height,
            annotations: Vec::new(),
        };
        for ann in annotations.iter().filter(|a| a.image_id == img.id) {
            let class_index = index_of(ann.category_id)?;
            let raw = BoxPx::new(ann.bbox[0], ann.bbox[1], ann.bbox[2], ann.bbox[3]);
            match raw.clip_to(img.width as f64, img.height as f64) {
                Some(clipped) if clipped.area() > 0.0 => entry.annotations.push(Annotation {
                    annotation_id: ann.id,
                    class_index,
                    bbox: clipped,
                    degradation: None,
                }),
                _ => dropped_boxes += 1,
            }
        }
        manifest.entries.push(entry);
    }

    if !images.is_empty() {
        let frac = missing_images.len() as f64 / images.len() as f64;
        if !missing_images.is_empty() && frac >= 0.01 {
            return Err(CoreError::InvalidInput(format!(
                "{} of {} images missing ({:.1}%), aborting ingestion",
                missing_images.len(),
                images.len(),
                frac * 100.0
            )));
        }
    }

    manifest.validate()?;
    Ok(IngestReport {
        manifest,
        dropped_boxes,
        missing_images,
    })
}

/// Serialize a manifest back to COCO-style annotation JSON (used to carry
/// annotations through synthesis untouched).
pub fn manifest_to_coco_json(manifest: &DatasetManifest) -> serde_json::Value {
    serde_json::json!({
        "images": manifest.entries.iter().map(|e| serde_json::json!({
            "id": e.image_id,
            "file_name": Path::new(&e.image_path).file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default(),
            "width": e.width,
            "height": e.height,
        })).collect::<Vec<_>>(),
        "annotations": manifest.entries.iter().flat_map(|e| e.annotations.iter().map(move |a| serde_json::json!({
            "id": a.annotation_id,
            "image_id": e.image_id,
            "category_id": a.class_index + 1,
            "bbox": [a.bbox.x, a.bbox.y, a.bbox.w, a.bbox.h],
            "area": a.bbox.area(),
            "iscrowd": 0,
        }))).collect::<Vec<_>>(),
        "categories": manifest.class_names.iter().enumerate().map(|(i, name)| serde_json::json!({
            "id": i + 1,
            "name": name,
        })).collect::<Vec<_>>(),
    })
}

pub fn load_entry_image(entry: &ManifestEntry) -> Result<Raster> {
    Raster::read_png(Path::new(&entry.image_path))
}

/// One crop per annotation of the given image, in annotation order, using
/// the provider crop policy.
pub fn crop_objects(
    manifest: &DatasetManifest,
    image_id: u64,
    policy: &CropPolicy,
) -> Result<Vec<Raster>> {
    let entry = manifest
        .entry(image_id)
        .ok_or_else(|| CoreError::InvalidInput(format!("unknown image id {image_id}")))?;
    let image = load_entry_image(entry)
        .map_err(|e| CoreError::InvalidInput(format!("image {image_id} unreadable: {e}")))?;
    entry
        .annotations
        .iter()
        .map(|ann| policy.extract(&image, &ann.bbox))
        .collect()
}

/// Resolve the weight-cache directory: the `CLIPCE_CACHE_DIR` environment
/// variable overrides the default location under the run's output dir.
pub fn cache_dir(default_under: &Path) -> PathBuf {
    match std::env::var_os("CLIPCE_CACHE_DIR") {
        Some(dir) if !dir.is_empty() => PathBuf::from(dir),
        _ => default_under.join("cache"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_png(dir: &Path, name: &str, w: usize, h: usize) -> String {
        let mut img = Raster::new(w, h);
        img.fill([0.3, 0.5, 0.7]);
        let path = dir.join(name);
        img.write_png8(&path).unwrap();
        path.to_string_lossy().into_owned()
    }

    fn minimal_coco(dir: &Path) -> PathBuf {
        let json = serde_json::json!({
            "images": [{"id": 1, "file_name": "a.png", "width": 32, "height": 24}],
            "annotations": [
                {"id": 10, "image_id": 1, "category_id": 7, "bbox": [2.0, 3.0, 10.0, 8.0]},
            ],
            "categories": [{"id": 7, "name": "disc"}],
        });
        let path = dir.join("coco.json");
        std::fs::write(&path, serde_json::to_string(&json).unwrap()).unwrap();
        path
    }

    #[test]
    fn ingest_minimal_file() {
        let dir = tempfile::tempdir().unwrap();
        write_png(dir.path(), "a.png", 32, 24);
        let path = minimal_coco(dir.path());
        let report = ingest_coco(&path, dir.path(), None).unwrap();
        assert_eq!(report.manifest.entries.len(), 1);
        assert_eq!(report.manifest.entries[0].annotations.len(), 1);
        assert_eq!(report.manifest.class_names, vec!["disc".to_string()]);
        assert_eq!(report.dropped_boxes, 0);
    }

    #[test]
    fn ingest_rejects_missing_category() {
        let dir = tempfile::tempdir().unwrap();
        write_png(dir.path(), "a.png", 32, 24);
        let json = serde_json::json!({
            "images": [{"id": 1, "file_name": "a.png", "width": 32, "height": 24}],
            "annotations": [{"id": 10, "image_id": 1, "category_id": 99, "bbox": [2.0, 3.0, 10.0, 8.0]}],
            "categories": [{"id": 7, "name": "disc"}],
        });
        let path = dir.path().join("coco.json");
        std::fs::write(&path, serde_json::to_string(&json).unwrap()).unwrap();
        let err = ingest_coco(&path, dir.path(), None).unwrap_err();
        assert!(err.to_string().contains("99"), "{err}");
    }

    #[test]
    fn ingest_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        write_png(dir.path(), "a.png", 32, 24);
        let path = minimal_coco(dir.path());
        let a = ingest_coco(&path, dir.path(), None).unwrap().manifest;
        let b = ingest_coco(&path, dir.path(), None).unwrap().manifest;
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
        assert_eq!(a.content_hash(), b.content_hash());
    }

    #[test]
    fn ingest_drops_degenerate_boxes_and_reports_missing() {
        let dir = tempfile::tempdir().unwrap();
        write_png(dir.path(), "a.png", 32, 24);
        let json = serde_json::json!({
            "images": [
                {"id": 1, "file_name": "a.png", "width": 32, "height": 24},
                {"id": 2, "file_name": "gone.png", "width": 32, "height": 24},
            ],
            "annotations": [
                {"id": 10, "image_id": 1, "category_id": 7, "bbox": [2.0, 3.0, 0.0, 8.0]},
                {"id": 11, "image_id": 1, "category_id": 7, "bbox": [-50.0, -50.0, 5.0, 5.0]},
                {"id": 12, "image_id": 1, "category_id": 7, "bbox": [1.0, 1.0, 4.0, 4.0]},
            ],
            "categories": [{"id": 7, "name": "disc"}],
        });
        let path = dir.path().join("coco.json");
        std::fs::write(&path, serde_json::to_string(&json).unwrap()).unwrap();
        // 1 of 2 images missing = 50% >= 1% threshold: abort.
        assert!(ingest_coco(&path, dir.path(), None).is_err());
    }

    #[test]
    fn manifest_round_trip_with_relative_paths() {
        let dir = tempfile::tempdir().unwrap();
        let mut manifest = DatasetManifest::new("train", vec!["disc".into()]);
        manifest.entries.push(ManifestEntry {
            image_id: 1,
            image_path: "images/a.png".into(),
            depth_path: None,
            width: 16,
            height: 16,
            annotations: vec![Annotation {
                annotation_id: 1,
                class_index: 0,
                bbox: BoxPx::new(1.0, 1.0, 4.0, 4.0),
                degradation: Some(0.5),
            }],
        });
        let path = dir.path().join("manifest.json");
        manifest.save(&path).unwrap();
        let back = DatasetManifest::load(&path).unwrap();
        assert!(back.entries[0]
            .image_path
            .starts_with(dir.path().to_string_lossy().as_ref()));
        assert_eq!(back.entries[0].annotations, manifest.entries[0].annotations);
    }

    #[test]
    fn validate_catches_duplicates_and_bad_classes() {
        let mut manifest = DatasetManifest::new("t", vec!["a".into()]);
        let entry = ManifestEntry {
            image_id: 1,
            image_path: "x.png".into(),
            depth_path: None,
            width: 8,
            height: 8,
            annotations: vec![],
        };
        manifest.entries.push(entry.clone());
        manifest.entries.push(entry);
        assert!(manifest.validate().is_err());
    }

    #[test]
    fn crop_objects_matches_annotation_count() {
        let dir = tempfile::tempdir().unwrap();
        let image_path = write_png(dir.path(), "a.png", 32, 32);
        let mut manifest = DatasetManifest::new("t", vec!["a".into()]);
        manifest.entries.push(ManifestEntry {
            image_id: 5,
            image_path,
            depth_path: None,
            width: 32,
            height: 32,
            annotations: (0..3)
                .map(|i| Annotation {
                    annotation_id: i,
                    class_index: 0,
                    bbox: BoxPx::new(2.0 + i as f64 * 6.0, 4.0, 5.0, 7.0),
                    degradation: None,
                })
                .collect(),
        });
        let crops = crop_objects(&manifest, 5, &CropPolicy { resize_to: 16 }).unwrap();
        assert_eq!(crops.len(), 3);
        assert!(crop_objects(&manifest, 99, &CropPolicy::default()).is_err());
    }

    #[test]
    fn cache_dir_env_override() {
        // Serialized via a unique var value to avoid cross-test interference.
        std::env::set_var("CLIPCE_CACHE_DIR", "/tmp/clipce-cache-test");
        assert_eq!(
            cache_dir(Path::new("/out")),
            PathBuf::from("/tmp/clipce-cache-test")
        );
        std::env::remove_var("CLIPCE_CACHE_DIR");
        assert_eq!(cache_dir(Path::new("/out")), PathBuf::from("/out/cache"));
    }
}
