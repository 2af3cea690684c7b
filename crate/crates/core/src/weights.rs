//! Per-object loss weights from mutually exclusive prompt similarities.
//!
//! The core quantity is a two-way softmax of the negative-prompt similarity
//! against the positive one: high when the encoder sees the absence prompt as
//! the better description, i.e. when the object's visual semantics are
//! degraded. The focal-loss weight lives here too so the two weighting
//! schemes can be compared on equal footing.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::DatasetManifest;
use crate::embedding::{Embedding, EmbeddingProvider, PromptTemplates, StubHint};
use crate::error::{CoreError, Result};
use crate::raster::{CropPolicy, Raster};

/// Cosine similarities of one object against its prompt pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimilarityPair {
    pub sim_pos: f64,
    pub sim_neg: f64,
}

impl SimilarityPair {
    pub fn new(sim_pos: f64, sim_neg: f64) -> Result<Self> {
        if !sim_pos.is_finite() || !sim_neg.is_finite() {
            return Err(CoreError::InvalidInput("non-finite similarity".into()));
        }
        Ok(Self { sim_pos, sim_neg })
    }

    pub fn swapped(&self) -> SimilarityPair {
        SimilarityPair {
            sim_pos: self.sim_neg,
            sim_neg: self.sim_pos,
        }
    }
}

/// Focusing parameter for the focal-loss weight.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FocalParams {
    pub gamma: f64,
}

impl FocalParams {
    pub fn new(gamma: f64) -> Result<Self> {
        if !(gamma >= 0.0) {
            return Err(CoreError::InvalidInput(format!(
                "gamma must be nonnegative, got {gamma}"
            )));
        }
        Ok(Self { gamma })
    }
}

/// All weights attached to one ground-truth object.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightRecord {
    pub image_id: u64,
    pub annotation_id: u64,
    pub class_name: String,
    pub similarities: SimilarityPair,
    pub w_ame: f64,
    pub w_offset: Option<f64>,
    pub w_fame: Option<f64>,
}

impl WeightRecord {
    pub fn from_similarities(
        image_id: u64,
        annotation_id: u64,
        class_name: &str,
        sims: SimilarityPair,
    ) -> Result<Self> {
        Ok(Self {
            image_id,
            annotation_id,
            class_name: class_name.to_string(),
            similarities: sims,
            w_ame: ame_weight(&sims)?,
            w_offset: None,
            w_fame: None,
        })
    }

    /// Attach an offset weight and the fused weight it implies.
    pub fn with_offset(mut self, w_offset: f64) -> Result<Self> {
        self.w_fame = Some(crate::adapter::fame_weight(self.w_ame, w_offset)?);
        self.w_offset = Some(w_offset);
        Ok(self)
    }
}

/// Dot-product similarity between a visual and a text embedding.
pub fn similarity(visual: &Embedding, text: &Embedding) -> Result<f64> {
    visual.dot(text)
}

/// Numerically stable two-way softmax: `e^a / (e^a + e^b)`.
///
/// The max is subtracted before exponentiation so arbitrary provider logits
/// cannot overflow; for cosine-scale inputs this is a no-op.
pub fn two_way_softmax(a: f64, b: f64) -> Result<f64> {
    if !a.is_finite() || !b.is_finite() {
        return Err(CoreError::InvalidInput(format!(
            "non-finite softmax inputs ({a}, {b})"
        )));
    }
    let m = a.max(b);
    let ea = (a - m).exp();
    let eb = (b - m).exp();
    Ok(ea / (ea + eb))
}

/// Weight for an object from its prompt similarities: the softmax score of
/// the negative similarity. Strictly inside (0,1).
pub fn ame_weight(sims: &SimilarityPair) -> Result<f64> {
    two_way_softmax(sims.sim_neg, sims.sim_pos)
}

/// The focal-loss weight `(1 - p_t)^gamma`.
pub fn focal_weight(p_t: f64, params: &FocalParams) -> Result<f64> {
    if !(0.0..=1.0).contains(&p_t) {
        return Err(CoreError::InvalidInput(format!(
            "p_t {p_t} outside [0,1]"
        )));
    }
    Ok((1.0 - p_t).powf(params.gamma))
}

pub const WEIGHT_CACHE_SCHEMA: &str = "weight-cache/v1";
pub const WEIGHT_CACHE_VERSION: u32 = 1;

/// First line of the cache file; any mismatch against the current provider
/// or templates invalidates the whole cache.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightCacheHeader {
    pub schema: String,
    pub backend_id: String,
    pub dim: usize,
    pub template_pos: String,
    pub template_neg: String,
    pub templates_hash: String,
    pub version: u32,
    #[serde(default)]
    pub partial: bool,
}

/// One line per ground-truth annotation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightCacheRecord {
    pub image_id: u64,
    pub annotation_id: u64,
    pub class: String,
    pub sim_pos: f64,
    pub sim_neg: f64,
    pub w_ame: f64,
}

#[derive(Debug, Clone)]
pub struct WeightCache {
    pub header: WeightCacheHeader,
    pub records: Vec<WeightCacheRecord>,
}

impl WeightCache {
    pub fn new(provider: &dyn EmbeddingProvider, templates: &PromptTemplates) -> Self {
        let d = provider.descriptor();
        Self {
            header: WeightCacheHeader {
                schema: WEIGHT_CACHE_SCHEMA.into(),
                backend_id: d.backend_id.clone(),
                dim: d.embedding_dim,
                template_pos: templates.template_pos.clone(),
                template_neg: templates.template_neg.clone(),
                templates_hash: format!("{:016x}", templates.content_hash()),
                version: WEIGHT_CACHE_VERSION,
                partial: false,
            },
            records: Vec::new(),
        }
    }

    /// True when the cache was produced by the same backend and templates.
    pub fn is_compatible(
        &self,
        provider: &dyn EmbeddingProvider,
        templates: &PromptTemplates,
    ) -> bool {
        let d = provider.descriptor();
        self.header.schema == WEIGHT_CACHE_SCHEMA
            && self.header.backend_id == d.backend_id
            && self.header.dim == d.embedding_dim
            && self.header.templates_hash == format!("{:016x}", templates.content_hash())
            && self.header.template_pos == templates.template_pos
            && self.header.template_neg == templates.template_neg
            && !self.header.partial
    }

    pub fn lookup(&self) -> BTreeMap<(u64, u64), &WeightCacheRecord> {
        self.records
            .iter()
            .map(|r| ((r.image_id, r.annotation_id), r))
            .collect()
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let mut f = std::fs::File::create(path)?;
        writeln!(f, "{}", serde_json::to_string(&self.header)?)?;
        for record in &self.records {
            writeln!(f, "{}", serde_json::to_string(record)?)?;
        }
        Ok(())
    }

    pub fn read_jsonl(path: &Path) -> Result<WeightCache> {
        let f = std::fs::File::open(path)?;
        let mut lines = BufReader::new(f).lines();
        let header_line = lines
            .next()
            .ok_or_else(|| CoreError::Parse(format!("{}: empty cache", path.display())))??;
        let header: WeightCacheHeader = serde_json::from_str(&header_line)?;
        if header.schema != WEIGHT_CACHE_SCHEMA {
            return Err(CoreError::Parse(format!(
                "{}: unexpected schema {:?}",
                path.display(),
                header.schema
            )));
        }
        let mut records = Vec::new();
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            records.push(serde_json::from_str(&line)?);
        }
        Ok(WeightCache { header, records })
    }
}

/// Per-item failure collected during precomputation.
#[derive(Debug, Clone, Serialize)]
pub struct ItemError {
    pub image_id: u64,
    pub message: String,
}

#[derive(Debug)]
pub struct PrecomputeReport {
    pub cache: WeightCache,
    pub item_errors: Vec<ItemError>,
    /// Set when the provider failed mid-run; the cache is then flagged partial.
    pub aborted: Option<String>,
}

/// Compute one cache record per ground-truth annotation.
///
/// The encoders are frozen, so these weights are training-invariant; reruns
/// over identical inputs produce identical caches. Missing or unreadable
/// images are collected per item and the run continues; a provider failure
/// aborts and flags the cache partial.
pub fn precompute_ame_weights(
    manifest: &DatasetManifest,
    provider: &dyn EmbeddingProvider,
    templates: &PromptTemplates,
    policy: &CropPolicy,
) -> Result<PrecomputeReport> {
    let mut cache = WeightCache::new(provider, templates);
    let mut item_errors = Vec::new();
    let mut text_cache: BTreeMap<String, (Embedding, Embedding)> = BTreeMap::new();

    for entry in &manifest.entries {
        let image = match Raster::read_png(Path::new(&entry.image_path)) {
            Ok(img) => img,
            Err(err) => {
                item_errors.push(ItemError {
                    image_id: entry.image_id,
                    message: format!("{}: {err}", entry.image_path),
                });
                continue;
            }
        };
        for ann in &entry.annotations {
            let class_name = match manifest.class_names.get(ann.class_index) {
                Some(name) => name.clone(),
                None => {
                    item_errors.push(ItemError {
                        image_id: entry.image_id,
                        message: format!(
                            "annotation {} has invalid class index {}",
                            ann.annotation_id, ann.class_index
                        ),
                    });
                    continue;
                }
            };
            let texts = match text_cache.get(&class_name) {
                Some(t) => t.clone(),
                None => {
                    let pair = templates.pair_for(&class_name)?;
                    let encoded = (
                        provider.encode_text(&pair.positive_text),
                        provider.encode_text(&pair.negative_text),
                    );
                    match encoded {
                        (Ok(p), Ok(n)) => {
                            text_cache.insert(class_name.clone(), (p.clone(), n.clone()));
                            (p, n)
                        }
                        (Err(e), _) | (_, Err(e)) => {
                            cache.header.partial = true;
                            return Ok(PrecomputeReport {
                                cache,
                                item_errors,
                                aborted: Some(format!("text encoding failed: {e}")),
                            });
                        }
                    }
                }
            };
            let hint = ann.degradation.map(|g| StubHint {
                class_name: class_name.clone(),
                degradation: g,
            });
            let visual = match crate::embedding::encode_image_crop(
                provider,
                &image,
                &ann.bbox,
                policy,
                hint.as_ref(),
            ) {
                Ok(v) => v,
                Err(CoreError::Provider(msg)) => {
                    cache.header.partial = true;
                    return Ok(PrecomputeReport {
                        cache,
                        item_errors,
                        aborted: Some(format!("provider failure: {msg}")),
                    });
                }
                Err(err) => {
                    item_errors.push(ItemError {
                        image_id: entry.image_id,
                        message: format!("annotation {}: {err}", ann.annotation_id),
                    });
                    continue;
                }
            };
            let sims = SimilarityPair::new(
                similarity(&visual, &texts.0)?,
                similarity(&visual, &texts.1)?,
            )?;
            cache.records.push(WeightCacheRecord {
                image_id: entry.image_id,
                annotation_id: ann.annotation_id,
                class: class_name,
                sim_pos: sims.sim_pos,
                sim_neg: sims.sim_neg,
                w_ame: ame_weight(&sims)?,
            });
        }
    }
    cache
        .records
        .sort_by_key(|r| (r.image_id, r.annotation_id));
    Ok(PrecomputeReport {
        cache,
        item_errors,
        aborted: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::StubProvider;
    use proptest::prelude::*;

    #[test]
    fn ame_equal_sims_half() {
        for v in [-5.0, 0.0, 0.3, 12.0] {
            let w = ame_weight(&SimilarityPair::new(v, v).unwrap()).unwrap();
            assert_eq!(w, 0.5);
        }
    }

    #[test]
    fn ame_hand_value() {
        // e^2 / (e^2 + e^0) = 1 / (1 + e^-2)
        let w = ame_weight(&SimilarityPair::new(0.0, 2.0).unwrap()).unwrap();
        assert!((w - 1.0 / (1.0 + (-2.0f64).exp())).abs() < 1e-12);
        assert!((w - 0.880797).abs() < 1e-6);
    }

    #[test]
    fn ame_rejects_non_finite() {
        assert!(SimilarityPair::new(f64::NAN, 0.0).is_err());
        assert!(two_way_softmax(f64::INFINITY, 0.0).is_err());
    }

    #[test]
    fn ame_safe_for_huge_logits() {
        let w = two_way_softmax(1e6, -1e6).unwrap();
        assert!(w > 0.999_999);
        assert!(w <= 1.0);
    }

    #[test]
    fn similarity_axioms() {
        let e1 = Embedding::from_raw(vec![1.0, 0.0, 0.0]).unwrap();
        let e2 = Embedding::from_raw(vec![0.0, 1.0, 0.0]).unwrap();
        let neg = Embedding::from_raw(vec![-1.0, 0.0, 0.0]).unwrap();
        assert_eq!(similarity(&e1, &e1).unwrap(), 1.0);
        assert_eq!(similarity(&e1, &e2).unwrap(), 0.0);
        assert_eq!(similarity(&e1, &neg).unwrap(), -1.0);
        let short = Embedding::from_raw(vec![1.0, 1.0]).unwrap();
        assert!(similarity(&e1, &short).is_err());
    }

    #[test]
    fn focal_weight_examples() {
        let g2 = FocalParams::new(2.0).unwrap();
        assert_eq!(focal_weight(1.0, &g2).unwrap(), 0.0);
        assert_eq!(focal_weight(0.0, &g2).unwrap(), 1.0);
        assert!((focal_weight(0.9, &g2).unwrap() - 0.01).abs() < 1e-12);
        assert!(focal_weight(1.5, &g2).is_err());
        assert!(FocalParams::new(-1.0).is_err());
    }

    #[test]
    fn focal_weight_matches_square_formula_on_grid() {
        let g2 = FocalParams::new(2.0).unwrap();
        for i in 0..100 {
            let p = i as f64 / 99.0;
            let direct = (1.0 - p) * (1.0 - p);
            assert_eq!(focal_weight(p, &g2).unwrap(), direct);
        }
    }

    proptest! {
        #[test]
        fn ame_complement_sums_to_one(a in -20.0f64..20.0, b in -20.0f64..20.0) {
            let s = SimilarityPair::new(a, b).unwrap();
            let w = ame_weight(&s).unwrap();
            let wc = ame_weight(&s.swapped()).unwrap();
            prop_assert!((w + wc - 1.0).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&w));
        }

        // Strict interior only holds where f64 cannot saturate; cosine-scale
        // similarities sit far inside this band.
        #[test]
        fn ame_strictly_interior_for_moderate_gaps(a in -8.0f64..8.0, b in -8.0f64..8.0) {
            let w = ame_weight(&SimilarityPair::new(a, b).unwrap()).unwrap();
            prop_assert!(w > 0.0 && w < 1.0);
        }

        #[test]
        fn ame_shift_invariant(a in -5.0f64..5.0, b in -5.0f64..5.0, c in -50.0f64..50.0) {
            let w1 = ame_weight(&SimilarityPair::new(a, b).unwrap()).unwrap();
            let w2 = ame_weight(&SimilarityPair::new(a + c, b + c).unwrap()).unwrap();
            prop_assert!((w1 - w2).abs() < 1e-9);
        }

        #[test]
        fn ame_equals_sigmoid_of_gap(a in -20.0f64..20.0, b in -20.0f64..20.0) {
            let w = ame_weight(&SimilarityPair::new(a, b).unwrap()).unwrap();
            let sigmoid = 1.0 / (1.0 + (-(b - a)).exp());
            prop_assert!((w - sigmoid).abs() < 1e-9);
        }

        #[test]
        fn ame_monotone(a in -3.0f64..3.0, b in -3.0f64..3.0, d in 1e-3f64..1.0) {
            let base = ame_weight(&SimilarityPair::new(a, b).unwrap()).unwrap();
            let more_neg = ame_weight(&SimilarityPair::new(a, b + d).unwrap()).unwrap();
            let more_pos = ame_weight(&SimilarityPair::new(a + d, b).unwrap()).unwrap();
            prop_assert!(more_neg > base);
            prop_assert!(more_pos < base);
        }
    }

    #[test]
    fn unit_norm_similarity_bounded() {
        let provider = StubProvider::new(9, 48, PromptTemplates::default()).unwrap();
        for i in 0..50 {
            let a = provider.encode_text(&format!("text {i}")).unwrap();
            let b = provider.encode_text(&format!("text {}", i + 1)).unwrap();
            assert!(similarity(&a, &b).unwrap().abs() <= 1.0 + 1e-6);
        }
    }

    #[test]
    fn precompute_is_idempotent_byte_for_byte() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = crate::shapes::generate_shapes_dataset(
            &crate::shapes::ShapesConfig {
                num_images: 3,
                ..crate::shapes::ShapesConfig::default()
            },
            dir.path(),
        )
        .unwrap();
        let provider = StubProvider::new(3, 16, PromptTemplates::default()).unwrap();
        let policy = crate::raster::CropPolicy::default();
        let templates = PromptTemplates::default();
        let a = precompute_ame_weights(&manifest, &provider, &templates, &policy).unwrap();
        let b = precompute_ame_weights(&manifest, &provider, &templates, &policy).unwrap();
        let pa = dir.path().join("a.jsonl");
        let pb = dir.path().join("b.jsonl");
        a.cache.write_jsonl(&pa).unwrap();
        b.cache.write_jsonl(&pb).unwrap();
        assert_eq!(std::fs::read(&pa).unwrap(), std::fs::read(&pb).unwrap());
        assert_eq!(a.cache.records.len(), manifest.total_annotations());
    }

    #[test]
    fn precompute_empty_dataset_succeeds() {
        let manifest = crate::data::DatasetManifest::new("t", vec!["disc".into()]);
        let provider = StubProvider::new(3, 16, PromptTemplates::default()).unwrap();
        let report = precompute_ame_weights(
            &manifest,
            &provider,
            &PromptTemplates::default(),
            &crate::raster::CropPolicy::default(),
        )
        .unwrap();
        assert!(report.cache.records.is_empty());
        assert!(report.aborted.is_none());
    }

    #[test]
    fn precompute_collects_missing_image_errors() {
        let mut manifest = crate::data::DatasetManifest::new("t", vec!["disc".into()]);
        manifest.entries.push(crate::data::ManifestEntry {
            image_id: 1,
            image_path: "/does/not/exist.png".into(),
            depth_path: None,
            width: 16,
            height: 16,
            annotations: vec![crate::data::Annotation {
                annotation_id: 1,
                class_index: 0,
                bbox: crate::boxes::BoxPx::new(1.0, 1.0, 4.0, 4.0),
                degradation: None,
            }],
        });
        let provider = StubProvider::new(3, 16, PromptTemplates::default()).unwrap();
        let report = precompute_ame_weights(
            &manifest,
            &provider,
            &PromptTemplates::default(),
            &crate::raster::CropPolicy::default(),
        )
        .unwrap();
        assert!(report.aborted.is_none());
        assert_eq!(report.item_errors.len(), 1);
        assert!(report.cache.records.is_empty());
    }

    #[test]
    fn monotone_weights_for_increasing_degradation() {
        let dir = tempfile::tempdir().unwrap();
        let mut manifest = crate::data::DatasetManifest::new("t", vec!["disc".into()]);
        let mut img = crate::raster::Raster::new(32, 32);
        img.fill([0.4, 0.4, 0.4]);
        let image_path = dir.path().join("img.png");
        img.write_png8(&image_path).unwrap();
        manifest.entries.push(crate::data::ManifestEntry {
            image_id: 1,
            image_path: image_path.to_string_lossy().into_owned(),
            depth_path: None,
            width: 32,
            height: 32,
            annotations: [0.1, 0.5, 0.9]
                .iter()
                .enumerate()
                .map(|(i, &g)| crate::data::Annotation {
                    annotation_id: i as u64 + 1,
                    class_index: 0,
                    bbox: crate::boxes::BoxPx::new(2.0 + i as f64 * 9.0, 4.0, 8.0, 8.0),
                    degradation: Some(g),
                })
                .collect(),
        });
        let provider = StubProvider::new(3, 32, PromptTemplates::default()).unwrap();
        let report = precompute_ame_weights(
            &manifest,
            &provider,
            &PromptTemplates::default(),
            &crate::raster::CropPolicy::default(),
        )
        .unwrap();
        let ws: Vec<f64> = report.cache.records.iter().map(|r| r.w_ame).collect();
        assert!(ws[0] < ws[1] && ws[1] < ws[2], "{ws:?}");
    }

    #[test]
    fn equal_degradation_gives_near_constant_weights() {
        let dir = tempfile::tempdir().unwrap();
        let mut manifest = crate::data::DatasetManifest::new("t", vec!["disc".into()]);
        let mut img = crate::raster::Raster::new(48, 48);
        img.fill([0.3, 0.3, 0.3]);
        let image_path = dir.path().join("img.png");
        img.write_png8(&image_path).unwrap();
        manifest.entries.push(crate::data::ManifestEntry {
            image_id: 1,
            image_path: image_path.to_string_lossy().into_owned(),
            depth_path: None,
            width: 48,
            height: 48,
            annotations: (0..8)
                .map(|i| crate::data::Annotation {
                    annotation_id: i + 1,
                    class_index: 0,
                    bbox: crate::boxes::BoxPx::new(1.0 + i as f64 * 5.5, 6.0, 5.0, 5.0),
                    degradation: Some(0.5),
                })
                .collect(),
        });
        let provider = StubProvider::new(3, 32, PromptTemplates::default()).unwrap();
        let report = precompute_ame_weights(
            &manifest,
            &provider,
            &PromptTemplates::default(),
            &crate::raster::CropPolicy::default(),
        )
        .unwrap();
        let ws: Vec<f64> = report.cache.records.iter().map(|r| r.w_ame).collect();
        let mean = ws.iter().sum::<f64>() / ws.len() as f64;
        let var = ws.iter().map(|w| (w - mean) * (w - mean)).sum::<f64>() / ws.len() as f64;
        assert!(var < 1e-4, "variance {var} too large for equal degradation");
    }

    #[test]
    fn cache_round_trip_and_compat() {
        let provider = StubProvider::new(5, 16, PromptTemplates::default()).unwrap();
        let templates = PromptTemplates::default();
        let mut cache = WeightCache::new(&provider, &templates);
        cache.records.push(WeightCacheRecord {
            image_id: 1,
            annotation_id: 2,
            class: "disc".into(),
            sim_pos: 0.4,
            sim_neg: 0.1,
            w_ame: ame_weight(&SimilarityPair::new(0.4, 0.1).unwrap()).unwrap(),
        });
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("weights.jsonl");
        cache.write_jsonl(&path).unwrap();
        let back = WeightCache::read_jsonl(&path).unwrap();
        assert_eq!(back.records, cache.records);
        assert!(back.is_compatible(&provider, &templates));

        let other_templates = PromptTemplates {
            template_pos: "it is a {cls}".into(),
            template_neg: "it is not a {cls}".into(),
        };
        assert!(!back.is_compatible(&provider, &other_templates));
        let other_provider = StubProvider::new(6, 16, PromptTemplates::default()).unwrap();
        assert!(!back.is_compatible(&other_provider, &templates));
    }
}
