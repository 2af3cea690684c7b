//! Vision-language encoder abstraction and mutually exclusive prompt pairs.
//!
//! Every embedding leaving a provider is unit-norm and finite, so downstream
//! similarity math can treat dot products as cosines. The deterministic stub
//! backend makes the whole toolkit runnable without model weights: text
//! embeddings are seeded-hash pseudo-random unit vectors, and crop embeddings
//! for fixtures are convex mixtures of the class's positive and negative
//! prompt embeddings, steered by an injected degradation score.

use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::boxes::BoxPx;
use crate::error::{CoreError, Result};
use crate::raster::{CropPolicy, Raster};
use crate::util;

/// Unit-norm embedding vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    values: Vec<f64>,
}

impl Embedding {
    /// Normalize a raw vector into an embedding. Zero or non-finite vectors
    /// are rejected.
    pub fn from_raw(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(CoreError::InvalidInput("empty embedding".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(CoreError::Numeric("non-finite embedding entry".into()));
        }
        let norm = util::l2_norm(&values);
        if norm <= 0.0 || !norm.is_finite() {
            return Err(CoreError::Numeric("zero-norm embedding".into()));
        }
        Ok(Self {
            values: values.into_iter().map(|v| v / norm).collect(),
        })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn dot(&self, other: &Embedding) -> Result<f64> {
        if self.dim() != other.dim() {
            return Err(CoreError::Shape(format!(
                "embedding dims {} vs {}",
                self.dim(),
                other.dim()
            )));
        }
        Ok(util::dot(&self.values, &other.values))
    }
}

/// Paired class descriptions, one asserting presence, one absence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptPair {
    pub class_name: String,
    pub positive_text: String,
    pub negative_text: String,
}

/// Substitute `class_name` into a positive and a negative template.
///
/// Each template must contain the literal `{cls}` placeholder exactly once.
pub fn build_prompt_pair(
    class_name: &str,
    template_pos: &str,
    template_neg: &str,
) -> Result<PromptPair> {
    if class_name.is_empty() {
        return Err(CoreError::InvalidInput("empty class name".into()));
    }
    let positive_text = substitute(template_pos, class_name)?;
    let negative_text = substitute(template_neg, class_name)?;
    if positive_text == negative_text {
        return Err(CoreError::Template(
            "positive and negative prompts are identical".into(),
        ));
    }
    Ok(PromptPair {
        class_name: class_name.to_string(),
        positive_text,
        negative_text,
    })
}

fn substitute(template: &str, class_name: &str) -> Result<String> {
    let count = template.matches("{cls}").count();
    if count != 1 {
        return Err(CoreError::Template(format!(
            "template {template:?} must contain \"{{cls}}\" exactly once, found {count}"
        )));
    }
    Ok(template.replacen("{cls}", class_name, 1))
}

/// Prompt templates used across weight precomputation and training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptTemplates {
    pub template_pos: String,
    pub template_neg: String,
}

impl Default for PromptTemplates {
    fn default() -> Self {
        Self {
            template_pos: "a photo of a {cls}".into(),
            template_neg: "a photo without {cls}".into(),
        }
    }
}

impl PromptTemplates {
    pub fn pair_for(&self, class_name: &str) -> Result<PromptPair> {
        build_prompt_pair(class_name, &self.template_pos, &self.template_neg)
    }

    pub fn content_hash(&self) -> u64 {
        util::fnv1a_parts(&[self.template_pos.as_bytes(), self.template_neg.as_bytes()])
    }
}

/// Static facts about a provider instance.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProviderDescriptor {
    pub backend_id: String,
    pub embedding_dim: usize,
    pub deterministic: bool,
}

/// Fixture-only steering information attached to a crop: the class it came
/// from and an injected degradation score in `[0,1]`. Real backends ignore it.
#[derive(Debug, Clone, PartialEq)]
pub struct StubHint {
    pub class_name: String,
    pub degradation: f64,
}

/// Frozen encoder pair behind a uniform interface.
///
/// Providers must be safe for concurrent read-only queries after
/// construction; batch encoding preserves input order.
pub trait EmbeddingProvider: Send + Sync {
    fn descriptor(&self) -> &ProviderDescriptor;

    /// Encode a text prompt into a unit-norm embedding. Identical inputs
    /// yield identical vectors within 1e-6 in one process.
    fn encode_text(&self, text: &str) -> Result<Embedding>;

    /// Encode already-extracted crop pixels. The optional hint steers stub
    /// backends; real backends must ignore it.
    fn encode_crop_pixels(&self, pixels: &Raster, hint: Option<&StubHint>) -> Result<Embedding>;

    /// Drain accumulated warnings (e.g. token-limit truncations).
    fn take_warnings(&self) -> Vec<String>;

    fn encode_text_batch(&self, texts: &[&str]) -> Result<Vec<Embedding>> {
        texts.iter().map(|t| self.encode_text(t)).collect()
    }
}

/// Extract the crop for `bbox` under `policy` and encode it.
pub fn encode_image_crop(
    provider: &dyn EmbeddingProvider,
    image: &Raster,
    bbox: &BoxPx,
    policy: &CropPolicy,
    hint: Option<&StubHint>,
) -> Result<Embedding> {
    let pixels = policy.extract(image, bbox)?;
    provider.encode_crop_pixels(&pixels, hint)
}

/// Whitespace-token budget for the stub text encoder, mirroring the context
/// limit a real text tower would impose.
const STUB_TOKEN_LIMIT: usize = 77;

/// Mixture sharpness for hinted crop embeddings; small noise keeps weights
/// analytically predictable while avoiding exact degeneracy.
const STUB_NOISE_SCALE: f64 = 0.01;

/// Deterministic stand-in for a pretrained encoder pair.
pub struct StubProvider {
    descriptor: ProviderDescriptor,
    seed: u64,
    templates: PromptTemplates,
    warnings: Mutex<Vec<String>>,
}

impl StubProvider {
    pub fn new(seed: u64, embedding_dim: usize, templates: PromptTemplates) -> Result<Self> {
        if embedding_dim == 0 {
            return Err(CoreError::Config("embedding_dim must be positive".into()));
        }
        Ok(Self {
            descriptor: ProviderDescriptor {
                backend_id: format!("stub:{seed}"),
                embedding_dim,
                deterministic: true,
            },
            seed,
            templates,
            warnings: Mutex::new(Vec::new()),
        })
    }

    fn unit_vector_from_hash(&self, h: u64) -> Embedding {
        let mut rng = util::seeded_rng(self.seed ^ h, "stub-embed");
        let raw: Vec<f64> = (0..self.descriptor.embedding_dim)
            .map(|_| util::sample_gaussian(&mut rng))
            .collect();
        // A gaussian vector is zero with probability zero; normalization is safe.
        Embedding::from_raw(raw).expect("gaussian stub vector")
    }
}

impl EmbeddingProvider for StubProvider {
    fn descriptor(&self) -> &ProviderDescriptor {
        &self.descriptor
    }

    fn encode_text(&self, text: &str) -> Result<Embedding> {
        if text.is_empty() {
            return Err(CoreError::InvalidInput("empty text".into()));
        }
        let tokens: Vec<&str> = text.split_whitespace().collect();
        let effective: String = if tokens.len() > STUB_TOKEN_LIMIT {
            self.warnings.lock().unwrap().push(format!(
                "text truncated to {STUB_TOKEN_LIMIT} tokens: {:?}...",
                &text[..text.len().min(32)]
            ));
            tokens[..STUB_TOKEN_LIMIT].join(" ")
        } else {
            text.to_string()
        };
        Ok(self.unit_vector_from_hash(util::fnv1a_parts(&[b"text", effective.as_bytes()])))
    }

    fn encode_crop_pixels(&self, pixels: &Raster, hint: Option<&StubHint>) -> Result<Embedding> {
        if pixels.width() == 0 || pixels.height() == 0 {
            return Err(CoreError::InvalidInput("empty crop".into()));
        }
        let pixel_hash = pixels.content_hash();
        match hint {
            None => Ok(self.unit_vector_from_hash(util::fnv1a_parts(&[
                b"pixels",
                &pixel_hash.to_le_bytes(),
            ]))),
            Some(hint) => {
                let g = hint.degradation;
                if !(0.0..=1.0).contains(&g) {
                    return Err(CoreError::InvalidInput(format!(
                        "degradation {g} outside [0,1]"
                    )));
                }
                let pair = self.templates.pair_for(&hint.class_name)?;
                let t_pos = self.encode_text(&pair.positive_text)?;
                let t_neg = self.encode_text(&pair.negative_text)?;
                let noise = self.unit_vector_from_hash(util::fnv1a_parts(&[
                    b"crop-noise",
                    &pixel_hash.to_le_bytes(),
                    hint.class_name.as_bytes(),
                    &g.to_bits().to_le_bytes(),
                ]));
                let raw: Vec<f64> = (0..self.descriptor.embedding_dim)
                    .map(|i| {
                        (1.0 - g) * t_pos.values()[i]
                            + g * t_neg.values()[i]
                            + STUB_NOISE_SCALE * noise.values()[i]
                    })
                    .collect();
                Embedding::from_raw(raw)
            }
        }
    }

    fn take_warnings(&self) -> Vec<String> {
        std::mem::take(&mut self.warnings.lock().unwrap())
    }
}

/// Build a provider from the `embeddings.backend` config value:
/// `"stub:<seed>"` or `"real"`.
///
/// No pretrained backend is compiled into this build; selecting `"real"`
/// reports the backend as unavailable. The trait above is the integration
/// point for one.
pub fn provider_from_spec(
    backend: &str,
    embedding_dim: usize,
    templates: PromptTemplates,
) -> Result<Box<dyn EmbeddingProvider>> {
    if let Some(seed) = backend.strip_prefix("stub:") {
        let seed: u64 = seed
            .parse()
            .map_err(|_| CoreError::Config(format!("bad stub seed in {backend:?}")))?;
        return Ok(Box::new(StubProvider::new(seed, embedding_dim, templates)?));
    }
    if backend == "real" {
        return Err(CoreError::Provider(
            "backend unavailable: no pretrained encoder is bundled with this build".into(),
        ));
    }
    Err(CoreError::Config(format!(
        "unknown embeddings.backend {backend:?} (expected \"real\" or \"stub:<seed>\")"
    )))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stub() -> StubProvider {
        StubProvider::new(42, 64, PromptTemplates::default()).unwrap()
    }

    #[test]
    fn prompt_pair_paper_templates() {
        let p = build_prompt_pair("car", "a photo of a {cls}", "a photo without {cls}").unwrap();
        assert_eq!(p.positive_text, "a photo of a car");
        assert_eq!(p.negative_text, "a photo without car");
    }

    #[test]
    fn prompt_pair_bare_substitution() {
        let p = build_prompt_pair("x", "{cls}", "{cls}!").unwrap();
        assert_eq!(p.positive_text, "x");
        assert_eq!(p.negative_text, "x!");
    }

    #[test]
    fn prompt_pair_foggy_variant() {
        let p = build_prompt_pair(
            "person",
            "a foggy photo of a {cls}",
            "a foggy photo without {cls}",
        )
        .unwrap();
        assert_eq!(p.positive_text, "a foggy photo of a person");
        assert_eq!(p.negative_text, "a foggy photo without person");
    }

    #[test]
    fn prompt_pair_rejects_missing_placeholder() {
        assert!(build_prompt_pair("car", "a photo", "without {cls}").is_err());
        assert!(build_prompt_pair("car", "{cls} and {cls}", "no {cls}").is_err());
        assert!(build_prompt_pair("", "{cls}", "no {cls}").is_err());
    }

    #[test]
    fn prompt_round_trips_class_name() {
        let templates = PromptTemplates::default();
        let p = templates.pair_for("traffic light").unwrap();
        let prefix = "a photo of a ";
        assert_eq!(&p.positive_text[prefix.len()..], "traffic light");
    }

    #[test]
    fn text_embeddings_unit_norm_and_deterministic() {
        let s = stub();
        let a = s.encode_text("a photo of a car").unwrap();
        let b = s.encode_text("a photo of a car").unwrap();
        assert!((util::l2_norm(a.values()) - 1.0).abs() < 1e-5);
        for (x, y) in a.values().iter().zip(b.values()) {
            assert!((x - y).abs() < 1e-6);
        }
        let c = s.encode_text("a photo of a dog").unwrap();
        assert!(a.dot(&c).unwrap().abs() < 0.99);
    }

    #[test]
    fn long_text_truncates_with_warning() {
        let s = stub();
        let long = vec!["tok"; 200].join(" ");
        let truncated = s.encode_text(&long).unwrap();
        assert_eq!(s.take_warnings().len(), 1);
        let same_prefix = vec!["tok"; STUB_TOKEN_LIMIT].join(" ");
        let direct = s.encode_text(&same_prefix).unwrap();
        assert!((truncated.dot(&direct).unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn crop_embedding_tracks_degradation() {
        let s = stub();
        let mut img = Raster::new(8, 8);
        img.fill([0.4, 0.4, 0.4]);
        let pair = PromptTemplates::default().pair_for("car").unwrap();
        let t_neg = s.encode_text(&pair.negative_text).unwrap();
        let mut last = f64::NEG_INFINITY;
        for g in [0.1, 0.5, 0.9] {
            let hint = StubHint {
                class_name: "car".into(),
                degradation: g,
            };
            let v = s.encode_crop_pixels(&img, Some(&hint)).unwrap();
            let sim_neg = v.dot(&t_neg).unwrap();
            assert!(sim_neg > last, "sim_neg not increasing at g={g}");
            last = sim_neg;
        }
    }

    #[test]
    fn identical_pixels_identical_embeddings() {
        let s = stub();
        let mut img = Raster::new(6, 6);
        img.set(1, 2, 0, 0.7);
        let a = s.encode_crop_pixels(&img, None).unwrap();
        let b = s.encode_crop_pixels(&img, None).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn one_pixel_crop_is_valid() {
        let s = stub();
        let img = Raster::new(1, 1);
        let e = s.encode_crop_pixels(&img, None).unwrap();
        assert!((util::l2_norm(e.values()) - 1.0).abs() < 1e-5);
    }

    #[test]
    fn batch_encoding_preserves_order() {
        let s = stub();
        let texts = ["a", "b", "c", "a"];
        let batch = s.encode_text_batch(&texts).unwrap();
        assert_eq!(batch.len(), 4);
        for (text, emb) in texts.iter().zip(&batch) {
            assert_eq!(&s.encode_text(text).unwrap(), emb);
        }
        assert_eq!(batch[0], batch[3]);
    }

    #[test]
    fn concurrent_queries_agree() {
        let s = std::sync::Arc::new(stub());
        let reference = s.encode_text("a photo of a boat").unwrap();
        let handles: Vec<_> = (0..4)
            .map(|_| {
                let s = s.clone();
                std::thread::spawn(move || s.encode_text("a photo of a boat").unwrap())
            })
            .collect();
        for handle in handles {
            assert_eq!(handle.join().unwrap(), reference);
        }
    }

    #[test]
    fn provider_spec_parsing() {
        assert!(provider_from_spec("stub:7", 32, PromptTemplates::default()).is_ok());
        assert!(matches!(
            provider_from_spec("real", 512, PromptTemplates::default()),
            Err(CoreError::Provider(_))
        ));
        assert!(provider_from_spec("nope", 32, PromptTemplates::default()).is_err());
    }
}
