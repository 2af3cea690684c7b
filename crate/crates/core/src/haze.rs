//! Physically-based haze synthesis.
//!
//! The image-formation model is `I(x) = J(x) t(x) + A (1 - t(x))` with
//! transmission `t(x) = exp(-beta d(x))`. Relative depth is clamped so the
//! farthest value is at most `clamp_ratio` times the nearest positive one
//! (restoring mid-range depth hierarchy), then normalized to (0,1] so
//! `beta * d` spans `[0, beta]`. Atmospheric light is estimated per image
//! from the dark channel: the brightest dark-channel pixels locate airlight.

use std::io::Write;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::DatasetManifest;
use crate::error::{CoreError, Result};
use crate::raster::{Raster, ScalarMap};
use crate::util;

/// Relative depth map plus where it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub map: ScalarMap,
    pub provenance: String,
}

impl DepthMap {
    pub fn new(map: ScalarMap, provenance: &str) -> Result<Self> {
        if map.data().iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(CoreError::InvalidInput(
                "depth values must be finite and nonnegative".into(),
            ));
        }
        Ok(Self {
            map,
            provenance: provenance.to_string(),
        })
    }
}

/// Per-image haze parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HazeParams {
    pub a: [f64; 3],
    pub beta: f64,
    pub clamp_ratio: f64,
}

impl HazeParams {
    pub fn validate(&self) -> Result<()> {
        if self.a.iter().any(|&c| !(0.0..=1.0).contains(&c)) {
            return Err(CoreError::InvalidInput(
                "atmospheric light channels must lie in [0,1]".into(),
            ));
        }
        if !(self.beta > 0.0) {
            return Err(CoreError::InvalidInput("beta must be positive".into()));
        }
        if !(self.clamp_ratio >= 1.0) {
            return Err(CoreError::InvalidInput("clamp_ratio must be >= 1".into()));
        }
        Ok(())
    }
}

/// Dark-channel-prior estimation knobs. The defaults are the standard
/// choices: 15 px patches and the brightest 0.1% of dark-channel pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DcpConfig {
    pub patch_size: usize,
    pub bright_fraction: f64,
}

impl Default for DcpConfig {
    fn default() -> Self {
        Self {
            patch_size: 15,
            bright_fraction: 0.001,
        }
    }
}

impl DcpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.patch_size % 2 == 0 {
            return Err(CoreError::InvalidInput(
                "patch_size must be an odd positive integer".into(),
            ));
        }
        if !(self.bright_fraction > 0.0 && self.bright_fraction <= 1.0) {
            return Err(CoreError::InvalidInput(
                "bright_fraction must lie in (0,1]".into(),
            ));
        }
        Ok(())
    }
}

/// Cap depth values into `[d_min, clamp_ratio * d_min]` where `d_min` is the
/// smallest positive entry. Order-preserving; flooring the near end avoids
/// division blow-ups when the map is later normalized.
pub fn clamp_depth(d: &DepthMap, clamp_ratio: f64) -> Result<DepthMap> {
    if !(clamp_ratio >= 1.0) {
        return Err(CoreError::InvalidInput("clamp_ratio must be >= 1".into()));
    }
    let d_min = d
        .map
        .data()
        .iter()
        .copied()
        .filter(|&v| v > 0.0)
        .fold(f64::INFINITY, f64::min);
    if !d_min.is_finite() {
        return Err(CoreError::Degenerate(
            "depth map has no positive entries".into(),
        ));
    }
    // Nudge the cap down until the ratio bound holds exactly in f64.
    let mut cap = clamp_ratio * d_min;
    while cap / d_min > clamp_ratio {
        cap = cap.next_down();
    }
    Ok(DepthMap {
        map: d.map.map(|v| v.clamp(d_min, cap)),
        provenance: d.provenance.clone(),
    })
}

/// Divide by the maximum value; output in (0,1].
pub fn normalize_depth(d: &DepthMap) -> Result<DepthMap> {
    let max = d.map.data().iter().copied().fold(0.0f64, f64::max);
    if max <= 0.0 {
        return Err(CoreError::Degenerate("depth map max is zero".into()));
    }
    Ok(DepthMap {
        map: d.map.map(|v| v / max),
        provenance: d.provenance.clone(),
    })
}

/// Transmission `t(x) = exp(-beta d(x))` over a normalized depth map.
pub fn transmission(d: &DepthMap, beta: f64) -> Result<ScalarMap> {
    if !(beta > 0.0) {
        return Err(CoreError::InvalidInput("beta must be positive".into()));
    }
    if d.map.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
        return Err(CoreError::InvalidInput(
            "transmission expects normalized depth in [0,1]".into(),
        ));
    }
    Ok(d.map.map(|v| (-beta * v).exp()))
}

/// Estimate per-channel atmospheric light from the clear image.
///
/// Dark channel: per-pixel channel minimum followed by a patch minimum
/// filter. A is the per-channel mean of the original pixels at the top
/// `bright_fraction` of dark-channel values. Images smaller than the patch
/// shrink the window with a warning.
pub fn estimate_atmospheric_light(j: &Raster, cfg: &DcpConfig) -> Result<([f64; 3], Vec<String>)> {
    cfg.validate()?;
    let (w, h) = (j.width(), j.height());
    if w == 0 || h == 0 {
        return Err(CoreError::InvalidInput("empty image".into()));
    }
    let mut warnings = Vec::new();
    let mut patch = cfg.patch_size;
    if patch > w.min(h) {
        patch = w.min(h);
        if patch % 2 == 0 {
            patch = patch.saturating_sub(1).max(1);
        }
        warnings.push(format!(
            "image {w}x{h} smaller than patch {}, shrunk to {patch}",
            cfg.patch_size
        ));
    }
    let half = patch / 2;

    let mut channel_min = vec![0.0f64; w * h];
    for y in 0..h {
        for x in 0..w {
            channel_min[y * w + x] = j.get(x, y, 0).min(j.get(x, y, 1)).min(j.get(x, y, 2));
        }
    }
    // Patch minimum via two separable 1-D passes.
    let mut row_min = vec![0.0f64; w * h];
    for y in 0..h {
        for x in 0..w {
            let x0 = x.saturating_sub(half);
            let x1 = (x + half).min(w - 1);
            let mut m = f64::INFINITY;
            for xx in x0..=x1 {
                m = m.min(channel_min[y * w + xx]);
            }
            row_min[y * w + x] = m;
        }
    }
    let mut dark = vec![0.0f64; w * h];
    for y in 0..h {
        let y0 = y.saturating_sub(half);
        let y1 = (y + half).min(h - 1);
        for x in 0..w {
            let mut m = f64::INFINITY;
            for yy in y0..=y1 {
                m = m.min(row_min[yy * w + x]);
            }
            dark[y * w + x] = m;
        }
    }

    let count = ((cfg.bright_fraction * (w * h) as f64).round() as usize).max(1);
    let mut order: Vec<usize> = (0..w * h).collect();
    order.sort_by(|&a, &b| {
        dark[b]
            .partial_cmp(&dark[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut a = [0.0f64; 3];
    for &idx in order.iter().take(count) {
        let (x, y) = (idx % w, idx / w);
        for (c, acc) in a.iter_mut().enumerate() {
            *acc += j.get(x, y, c);
        }
    }
    for acc in a.iter_mut() {
        *acc = (*acc / count as f64).clamp(0.0, 1.0);
    }
    Ok((a, warnings))
}

/// Composite the hazy image `I = J t + A (1 - t)` per channel. The output is
/// a pixelwise convex combination of `J` and `A`, so it stays in [0,1]
/// without clipping.
pub fn compose_haze(j: &Raster, t: &ScalarMap, a: [f64; 3]) -> Result<Raster> {
    if j.width() != t.width() || j.height() != t.height() {
        return Err(CoreError::Shape(format!(
            "image {}x{} vs transmission {}x{}",
            j.width(),
            j.height(),
            t.width(),
            t.height()
        )));
    }
    let mut out = Raster::new(j.width(), j.height());
    for y in 0..j.height() {
        for x in 0..j.width() {
            let tv = t.get(x, y);
            for c in 0..3 {
                out.set(x, y, c, j.get(x, y, c) * tv + a[c] * (1.0 - tv));
            }
        }
    }
    Ok(out)
}

/// Analytic inversion `J = (I - A(1 - t)) / t`, with transmission floored at
/// `t_floor` for stability.
pub fn invert_haze(i: &Raster, t: &ScalarMap, a: [f64; 3], t_floor: f64) -> Result<Raster> {
    if i.width() != t.width() || i.height() != t.height() {
        return Err(CoreError::Shape("image vs transmission size".into()));
    }
    let mut out = Raster::new(i.width(), i.height());
    for y in 0..i.height() {
        for x in 0..i.width() {
            let tv = t.get(x, y).max(t_floor);
            for c in 0..3 {
                out.set(x, y, c, (i.get(x, y, c) - a[c] * (1.0 - tv)) / tv);
            }
        }
    }
    Ok(out)
}

/// How beta is drawn per image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum BetaPolicy {
    Fixed(f64),
    /// Uniform over a discrete set; the default is {1,2,3,4,5}.
    UniformSet(Vec<f64>),
}

impl Default for BetaPolicy {
    fn default() -> Self {
        BetaPolicy::UniformSet(vec![1.0, 2.0, 3.0, 4.0, 5.0])
    }
}

impl BetaPolicy {
    /// Parse the CLI notation `fixed:<k>` or `uniform:<lo>-<hi>`.
    pub fn parse(s: &str) -> Result<BetaPolicy> {
        if let Some(v) = s.strip_prefix("fixed:") {
            let beta: f64 = v
                .parse()
                .map_err(|_| CoreError::Config(format!("bad beta value in {s:?}")))?;
            if !(beta > 0.0) {
                return Err(CoreError::Config("beta must be positive".into()));
            }
            return Ok(BetaPolicy::Fixed(beta));
        }
        if let Some(v) = s.strip_prefix("uniform:") {
            let (lo, hi) = v
                .split_once('-')
                .ok_or_else(|| CoreError::Config(format!("expected uniform:<lo>-<hi> in {s:?}")))?;
            let lo: i64 = lo
                .parse()
                .map_err(|_| CoreError::Config(format!("bad range in {s:?}")))?;
            let hi: i64 = hi
                .parse()
                .map_err(|_| CoreError::Config(format!("bad range in {s:?}")))?;
            if lo <= 0 || hi < lo {
                return Err(CoreError::Config(format!("bad beta range in {s:?}")));
            }
            return Ok(BetaPolicy::UniformSet((lo..=hi).map(|k| k as f64).collect()));
        }
        Err(CoreError::Config(format!(
            "unknown beta policy {s:?} (expected fixed:<k> or uniform:<lo>-<hi>)"
        )))
    }

    fn draw(&self, rng: &mut impl Rng) -> f64 {
        match self {
            BetaPolicy::Fixed(beta) => *beta,
            BetaPolicy::UniformSet(set) => set[rng.gen_range(0..set.len())],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthesisConfig {
    pub beta: BetaPolicy,
    pub clamp_ratio: f64,
    pub dcp: DcpConfig,
    /// Treat ingested maps as disparity (larger = nearer) and flip them.
    pub depth_invert: bool,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        Self {
            beta: BetaPolicy::default(),
            clamp_ratio: 100.0,
            dcp: DcpConfig::default(),
            depth_invert: false,
        }
    }
}

/// Per-image provenance line.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProvenanceRecord {
    pub schema: String,
    pub image_id: u64,
    pub beta: f64,
    pub a: [f64; 3],
    pub clamp_ratio: f64,
    pub seed: u64,
    pub out_path: String,
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct SynthesisSkip {
    pub image_id: u64,
    pub reason: String,
}

#[derive(Debug)]
pub struct SynthesisReport {
    pub manifest: DatasetManifest,
    pub provenance: Vec<ProvenanceRecord>,
    pub skipped: Vec<SynthesisSkip>,
}

/// Synthesize a hazy copy of every manifest entry that has a depth map.
///
/// Per image: clamp -> normalize -> draw beta -> estimate A -> composite ->
/// write PNG. Annotations pass through untouched (geometry is preserved by
/// the compositing model). Fully reproducible from (manifest, seed): the
/// per-image draw is keyed on the image id, not iteration order.
pub fn synthesize_dataset(
    manifest: &DatasetManifest,
    out_dir: &Path,
    cfg: &SynthesisConfig,
    seed: u64,
) -> Result<SynthesisReport> {
    cfg.dcp.validate()?;
    std::fs::create_dir_all(out_dir.join("images"))?;
    let mut out_manifest = DatasetManifest::new(&manifest.split, manifest.class_names.clone());
    let mut provenance = Vec::new();
    let mut skipped = Vec::new();

    for entry in &manifest.entries {
        let Some(depth_path) = &entry.depth_path else {
            skipped.push(SynthesisSkip {
                image_id: entry.image_id,
                reason: "missing depth map".into(),
            });
            continue;
        };
        let clear = match crate::data::load_entry_image(entry) {
            Ok(img) => img,
            Err(err) => {
                skipped.push(SynthesisSkip {
                    image_id: entry.image_id,
                    reason: format!("unreadable image: {err}"),
                });
                continue;
            }
        };
        let raw_depth = match crate::raster::read_depth(Path::new(depth_path)) {
            Ok(d) => d,
            Err(err) => {
                skipped.push(SynthesisSkip {
                    image_id: entry.image_id,
                    reason: format!("unreadable depth: {err}"),
                });
                continue;
            }
        };
        if raw_depth.width() != clear.width() || raw_depth.height() != clear.height() {
            skipped.push(SynthesisSkip {
                image_id: entry.image_id,
                reason: "depth size does not match image".into(),
            });
            continue;
        }
        let oriented = if cfg.depth_invert {
            let max = raw_depth.data().iter().copied().fold(0.0f64, f64::max);
            raw_depth.map(|v| max - v)
        } else {
            raw_depth
        };
        let depth = DepthMap::new(oriented, depth_path)?;
        let clamped = clamp_depth(&depth, cfg.clamp_ratio)?;
        let normalized = normalize_depth(&clamped)?;
        let mut rng = util::seeded_rng(
            util::fnv1a_parts(&[&seed.to_le_bytes(), &entry.image_id.to_le_bytes()]),
            "haze-beta",
        );
        let beta = cfg.beta.draw(&mut rng);
        let (a, _warnings) = estimate_atmospheric_light(&clear, &cfg.dcp)?;
        let t = transmission(&normalized, beta)?;
        let hazy = compose_haze(&clear, &t, a)?;

        let file_name = format!("hazy_{:06}.png", entry.image_id);
        let out_path = out_dir.join("images").join(&file_name);
        hazy.write_png8(&out_path)?;

        out_manifest.entries.push(crate::data::ManifestEntry {
            image_id: entry.image_id,
            image_path: format!("images/{file_name}"),
            depth_path: Some(depth_path.clone()),
            width: entry.width,
            height: entry.height,
            annotations: entry.annotations.clone(),
        });
        provenance.push(ProvenanceRecord {
            schema: "haze-provenance/v1".into(),
            image_id: entry.image_id,
            beta,
            a,
            clamp_ratio: cfg.clamp_ratio,
            seed,
            out_path: format!("images/{file_name}"),
        });
    }

    let mut prov_file = std::fs::File::create(out_dir.join("provenance.jsonl"))?;
    for rec in &provenance {
        writeln!(prov_file, "{}", serde_json::to_string(rec)?)?;
    }
    out_manifest.save(&out_dir.join("manifest.json"))?;
    std::fs::write(
        out_dir.join("annotations.json"),
        serde_json::to_string_pretty(&crate::data::manifest_to_coco_json(&out_manifest))?,
    )?;
    Ok(SynthesisReport {
        manifest: out_manifest,
        provenance,
        skipped,
    })
}
