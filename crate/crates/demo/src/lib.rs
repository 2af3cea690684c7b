//! Browser demo exposing three interactive views of the toolkit:
//! a haze-synthesis explorer over a procedural scene, the prompt-weight
//! curve as a function of injected degradation, and the weighted loss
//! curves against their baselines.
//!
//! Build for the web with `wasm-pack build crates/demo --target web`
//! (or cargo + wasm-bindgen-cli); `static/index.html` loads the result.

use wasm_bindgen::prelude::*;

use clipce_core::embedding::{EmbeddingProvider, PromptTemplates, StubHint, StubProvider};
use clipce_core::haze::{
    clamp_depth, compose_haze, estimate_atmospheric_light, normalize_depth, transmission,
    DcpConfig, DepthMap,
};
use clipce_core::loss::{ce_loss, focal_loss, ClassificationOutput};
use clipce_core::raster::Raster;
use clipce_core::shapes::{render_scene, scene_depth, ShapesConfig};
use clipce_core::util::seeded_rng;
use clipce_core::weights::{ame_weight, FocalParams, SimilarityPair};

fn err_to_js(e: clipce_core::CoreError) -> JsValue {
    JsValue::from_str(&e.to_string())
}

/// A procedural scene with its depth map, kept alive across slider moves.
#[wasm_bindgen]
pub struct HazeScene {
    clear: Raster,
    depth_raw: DepthMap,
}

#[wasm_bindgen]
impl HazeScene {
    /// Build a scene from a seed. Objects are rendered clean; all haze in
    /// the demo comes from the scattering model itself.
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32, size: u32) -> Result<HazeScene, JsValue> {
        let size = size.clamp(32, 256) as usize;
        let cfg = ShapesConfig {
            image_size: size,
            wash_strength: 0.0,
            min_objects: 2,
            max_objects: 4,
            seed: u64::from(seed),
            ..ShapesConfig::default()
        };
        let mut rng = seeded_rng(u64::from(seed), "demo-scene");
        let (clear, _objects) = render_scene(&cfg, &mut rng);
        let depth_raw = DepthMap::new(scene_depth(size), "demo").map_err(err_to_js)?;
        Ok(HazeScene { clear, depth_raw })
    }

    pub fn size(&self) -> u32 {
        self.clear.width() as u32
    }

    /// RGBA pixels of the clear scene.
    pub fn render_clear(&self) -> Vec<u8> {
        rgba(&self.clear)
    }

    /// RGBA pixels of the hazy composite for the given parameters.
    ///
    /// When `estimate_a` is set the atmospheric light comes from the dark
    /// channel prior; otherwise the explicit channels are used.
    #[allow(clippy::too_many_arguments)]
    pub fn render_hazy(
        &self,
        beta: f64,
        clamp_ratio: f64,
        estimate_a: bool,
        a_r: f64,
        a_g: f64,
        a_b: f64,
    ) -> Result<Vec<u8>, JsValue> {
        let clamped = clamp_depth(&self.depth_raw, clamp_ratio).map_err(err_to_js)?;
        let normalized = normalize_depth(&clamped).map_err(err_to_js)?;
        let t = transmission(&normalized, beta).map_err(err_to_js)?;
        let a = if estimate_a {
            let (a, _) =
                estimate_atmospheric_light(&self.clear, &DcpConfig::default()).map_err(err_to_js)?;
            a
        } else {
            [
                a_r.clamp(0.0, 1.0),
                a_g.clamp(0.0, 1.0),
                a_b.clamp(0.0, 1.0),
            ]
        };
        let hazy = compose_haze(&self.clear, &t, a).map_err(err_to_js)?;
        Ok(rgba(&hazy))
    }

    /// Grayscale RGBA view of the normalized depth after clamping.
    pub fn render_depth(&self, clamp_ratio: f64) -> Result<Vec<u8>, JsValue> {
        let clamped = clamp_depth(&self.depth_raw, clamp_ratio).map_err(err_to_js)?;
        let normalized = normalize_depth(&clamped).map_err(err_to_js)?;
        let mut out = Vec::with_capacity(normalized.map.data().len() * 4);
        for &v in normalized.map.data() {
            let g = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            out.extend_from_slice(&[g, g, g, 255]);
        }
        Ok(out)
    }

    /// Atmospheric light the dark channel prior estimates for this scene.
    pub fn estimated_airlight(&self) -> Result<Vec<f64>, JsValue> {
        let (a, _) =
            estimate_atmospheric_light(&self.clear, &DcpConfig::default()).map_err(err_to_js)?;
        Ok(a.to_vec())
    }
}

fn rgba(image: &Raster) -> Vec<u8> {
    let rgb = image.to_rgb8();
    let mut out = Vec::with_capacity(rgb.len() / 3 * 4);
    for px in rgb.chunks_exact(3) {
        out.extend_from_slice(px);
        out.push(255);
    }
    out
}

/// Prompt similarities and the resulting weight for one degradation value:
/// returns [sim_pos, sim_neg, w_ame].
#[wasm_bindgen]
pub fn prompt_weight_at(seed: u32, class_name: &str, degradation: f64) -> Result<Vec<f64>, JsValue> {
    let templates = PromptTemplates::default();
    let provider =
        StubProvider::new(u64::from(seed), 64, templates.clone()).map_err(err_to_js)?;
    let pair = templates.pair_for(class_name).map_err(err_to_js)?;
    let t_pos = provider.encode_text(&pair.positive_text).map_err(err_to_js)?;
    let t_neg = provider.encode_text(&pair.negative_text).map_err(err_to_js)?;
    let mut crop = Raster::new(4, 4);
    crop.fill([0.5, 0.5, 0.5]);
    let hint = StubHint {
        class_name: class_name.to_string(),
        degradation: degradation.clamp(0.0, 1.0),
    };
    let v = provider.encode_crop_pixels(&crop, Some(&hint)).map_err(err_to_js)?;
    let sims = SimilarityPair::new(
        v.dot(&t_pos).map_err(err_to_js)?,
        v.dot(&t_neg).map_err(err_to_js)?,
    )
    .map_err(err_to_js)?;
    Ok(vec![
        sims.sim_pos,
        sims.sim_neg,
        ame_weight(&sims).map_err(err_to_js)?,
    ])
}

/// Weight curve over `n` degradation points in [0,1].
#[wasm_bindgen]
pub fn prompt_weight_curve(seed: u32, class_name: &str, n: u32) -> Result<Vec<f64>, JsValue> {
    let n = n.clamp(2, 512);
    let mut out = Vec::with_capacity(n as usize);
    for i in 0..n {
        let g = f64::from(i) / f64::from(n - 1);
        out.push(prompt_weight_at(seed, class_name, g)?[2]);
    }
    Ok(out)
}

/// Loss curves over a p_t grid: `n` cross-entropy values, then `n` focal
/// values at `gamma`, then `n` weighted values at multiplier e^{alpha w}.
#[wasm_bindgen]
pub fn loss_curves(gamma: f64, alpha: f64, w: f64, n: u32) -> Result<Vec<f64>, JsValue> {
    let n = n.clamp(2, 2048) as usize;
    let gamma = FocalParams::new(gamma.max(0.0)).map_err(err_to_js)?;
    let w = w.clamp(0.001, 0.999);
    let mut out = Vec::with_capacity(3 * n);
    let grid: Vec<ClassificationOutput> = (0..n)
        .map(|i| {
            let p = (i as f64 / (n - 1) as f64).clamp(0.001, 0.999);
            ClassificationOutput::new(vec![p, 1.0 - p], 0).unwrap()
        })
        .collect();
    for o in &grid {
        out.push(ce_loss(o));
    }
    for o in &grid {
        out.push(focal_loss(o, &gamma));
    }
    for o in &grid {
        out.push((alpha.max(0.0) * w).exp() * ce_loss(o));
    }
    Ok(out)
}

/// The loss multiplier per epoch under the two-phase schedule, using a fixed
/// prompt weight before the switch and a fused weight after it.
#[wasm_bindgen]
pub fn multiplier_schedule(
    alpha1: f64,
    alpha2: f64,
    pretrain_epochs: u32,
    total_epochs: u32,
    w_ame: f64,
    w_fame: f64,
) -> Result<Vec<f64>, JsValue> {
    let sched = clipce_core::loss::ClipCeSchedule::new(
        alpha1.max(0.0),
        alpha2.max(0.0),
        pretrain_epochs.max(1) as usize,
        total_epochs.max(pretrain_epochs.max(1)) as usize,
    )
    .map_err(err_to_js)?;
    let mut out = Vec::new();
    for epoch in 1..=sched.total_epochs {
        let m = match sched.branch(epoch).map_err(err_to_js)? {
            clipce_core::loss::ScheduleBranch::Ame => (sched.alpha1 * w_ame.clamp(0.0, 1.0)).exp(),
            clipce_core::loss::ScheduleBranch::Fame => {
                (sched.alpha2 * w_fame.clamp(0.0, 1.0)).exp()
            }
        };
        out.push(m);
    }
    Ok(out)
}
