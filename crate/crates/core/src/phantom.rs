//! Synthetic phantom generator: co-registered PA cube, US image, and
//! reference label map per sample, with site-dependent morphology.
//!
//! Geometry is a layered half-space seen by a handheld probe: a heavy
//! water standoff on top, then the probe membrane, acoustic gel, skin,
//! and tissue below, with blood vessels as filled ellipses inside the
//! tissue and an optional coupling-loss wedge at one lateral edge.
//!
//! PA rendering uses a 1-d depth fluence: value(lambda, x, y) =
//! mu_a(class, lambda) * exp(-mu_eff(lambda) * y) + noise, where y is
//! the row index. Blood mixes the haemoglobin spectra by the vessel's
//! sO2; skin follows melanin. US rendering is per-class echogenicity
//! under unit-mean log-normal speckle plus additive edge brightening.
//!
//! Every random quantity comes from one ChaCha8 stream per sample in a
//! fixed, documented draw order, so generation is bit-reproducible and
//! parallel generation (per-sample sub-seeds) equals serial.

use std::collections::VecDeque;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::config::{format_f64, write_config, ConfigMap};
use crate::error::{CoreError, Result};
use crate::manifest::{write_manifest, SampleRef};
use crate::seeding::sub_seed;
use crate::spectra;
use crate::tensorfile::{write_tensor, TensorData};
use crate::types::{
    LabelMap, Sample, SampleMeta, Side, Site, SpectralCube, TissueClass, UsImage, WavelengthAxis,
};

/// Per-class absorption scales (1/pixel at unit fluence). Grueneisen
/// and concentration factors are folded in; networks see arbitrary
/// units either way.
const BLOOD_EXTINCTION_SCALE: f64 = 1e-3;
const SKIN_MELANIN_SCALE: f64 = 3e-3;
const MU_A_GEL: f64 = 0.03;
const MU_A_MEMBRANE: f64 = 0.6;
const MU_A_HEAVY_WATER: f64 = 0.01;
const MU_A_TISSUE_BASE: f64 = 0.08;
const TISSUE_BLOOD_TINT: f64 = 0.05;

/// Default per-class echogenicity, indexed by class code.
pub const DEFAULT_ECHOGENICITY: [f64; TissueClass::COUNT] =
    [0.32, 0.75, 0.12, 0.90, 0.05, 0.40, 0.02];

/// Everything the generator needs for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct PhantomConfig {
    pub height: usize,
    pub width: usize,
    pub axis: WavelengthAxis,
    /// Band thicknesses in pixels, top to bottom.
    pub heavy_water_px: usize,
    pub membrane_px: usize,
    pub gel_px: usize,
    pub skin_px: usize,
    /// Inclusive vessel count range.
    pub vessel_count: (usize, usize),
    /// Ellipse semi-axis range in pixels; both axes drawn from it.
    pub vessel_radius: (f64, f64),
    /// Vessel centre depth below the skin bottom, in pixels.
    pub vessel_depth: (f64, f64),
    pub so2: (f64, f64),
    /// Effective attenuation per wavelength, 1/pixel.
    pub mu_eff: Vec<f64>,
    /// Additive Gaussian PA noise sigma; 0 disables the draw entirely.
    pub noise_std: f64,
    pub artefact_probability: f64,
    pub echogenicity: [f64; TissueClass::COUNT],
    /// Log-normal speckle sigma; 0 disables the draw entirely.
    pub speckle_sigma: f64,
    pub us_edge_gain: f64,
    /// Master seed for dataset generation.
    pub seed: u64,
}

fn linear_ramp(count: usize, start: f64, end: f64) -> Vec<f64> {
    (0..count)
        .map(|i| start + (end - start) * i as f64 / (count - 1).max(1) as f64)
        .collect()
}

impl Default for PhantomConfig {
    fn default() -> Self {
        let axis = WavelengthAxis::default();
        PhantomConfig {
            height: 128,
            width: 128,
            heavy_water_px: 16,
            membrane_px: 6,
            gel_px: 12,
            skin_px: 10,
            vessel_count: (2, 6),
            vessel_radius: (3.0, 10.0),
            vessel_depth: (6.0, 60.0),
            so2: (0.2, 1.0),
            mu_eff: linear_ramp(axis.count(), 0.015, 0.03),
            noise_std: 0.05,
            artefact_probability: 0.25,
            echogenicity: DEFAULT_ECHOGENICITY,
            speckle_sigma: 0.35,
            us_edge_gain: 0.25,
            seed: 42,
            axis,
        }
    }
}

impl PhantomConfig {
    /// Default geometry rescaled to `height` x `width` (bands and
    /// vessel sizes scale with the 128-pixel reference).
    pub fn for_size(height: usize, width: usize) -> Self {
        let base = PhantomConfig::default();
        let fy = height as f64 / 128.0;
        let f = fy.min(width as f64 / 128.0);
        let px = |v: usize| ((v as f64 * fy).round() as usize).max(1);
        PhantomConfig {
            height,
            width,
            heavy_water_px: px(base.heavy_water_px),
            membrane_px: px(base.membrane_px),
            gel_px: px(base.gel_px),
            skin_px: px(base.skin_px),
            vessel_radius: (base.vessel_radius.0 * f, base.vessel_radius.1 * f),
            vessel_depth: (base.vessel_depth.0 * fy, base.vessel_depth.1 * fy),
            ..base
        }
    }

    /// Row of the first tissue pixel (below all bands).
    pub fn tissue_top(&self) -> usize {
        self.heavy_water_px + self.membrane_px + self.gel_px + self.skin_px
    }

    /// Row of the first pixel below the membrane (top of the gel).
    pub fn membrane_bottom(&self) -> usize {
        self.heavy_water_px + self.membrane_px
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |reason: String| Err(CoreError::config(reason));
        if self.height == 0 || self.width == 0 {
            return bad("phantom image extent is empty".into());
        }
        if self.tissue_top() >= self.height {
            return bad(format!(
                "bands occupy {} rows but the image has only {}",
                self.tissue_top(),
                self.height
            ));
        }
        if self.vessel_count.0 > self.vessel_count.1 {
            return bad(format!(
                "vessel count range ({}, {}) is empty",
                self.vessel_count.0, self.vessel_count.1
            ));
        }
        let range_ok = |(lo, hi): (f64, f64)| lo.is_finite() && hi.is_finite() && lo <= hi;
        if !range_ok(self.vessel_radius) || self.vessel_radius.0 <= 0.0 {
            return bad(format!("vessel radius range {:?} invalid", self.vessel_radius));
        }
        if !range_ok(self.vessel_depth) || self.vessel_depth.0 < 0.0 {
            return bad(format!("vessel depth range {:?} invalid", self.vessel_depth));
        }
        if !range_ok(self.so2) || self.so2.0 < 0.0 || self.so2.1 > 1.0 {
            return bad(format!("sO2 range {:?} outside [0, 1]", self.so2));
        }
        if self.mu_eff.len() != self.axis.count() {
            return bad(format!(
                "mu_eff has {} entries but the axis has {} wavelengths",
                self.mu_eff.len(),
                self.axis.count()
            ));
        }
        if !self.mu_eff.iter().all(|m| m.is_finite() && *m >= 0.0) {
            return bad("mu_eff entries must be finite and non-negative".into());
        }
        if !(self.noise_std.is_finite() && self.noise_std >= 0.0) {
            return bad(format!("noise_std {} must be >= 0", self.noise_std));
        }
        if !(0.0..=1.0).contains(&self.artefact_probability) {
            return bad(format!(
                "artefact probability {} outside [0, 1]",
                self.artefact_probability
            ));
        }
        if !self.echogenicity.iter().all(|e| e.is_finite() && *e >= 0.0) {
            return bad("echogenicity entries must be finite and non-negative".into());
        }
        if !(self.speckle_sigma.is_finite() && self.speckle_sigma >= 0.0) {
            return bad(format!("speckle sigma {} must be >= 0", self.speckle_sigma));
        }
        if !(self.us_edge_gain.is_finite() && self.us_edge_gain >= 0.0) {
            return bad(format!("us edge gain {} must be >= 0", self.us_edge_gain));
        }
        Ok(())
    }
}

/// Site-dependent morphology: scale factors applied to the base config.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SitePreset {
    pub site: Site,
    pub skin_scale: f64,
    pub depth_scale: f64,
    pub radius_scale: f64,
    /// Forced artefact probability, if the site never shows artefacts.
    pub artefact_probability_override: Option<f64>,
}

impl SitePreset {
    /// The three built-in presets. Calf: thicker skin, deeper vessels.
    /// Neck: thinner skin, much deeper and larger vessels (carotid-
    /// like), and no coupling artefacts so the robustness experiment's
    /// reference neck images contain no Artefact class.
    pub fn for_site(site: Site) -> SitePreset {
        match site {
            Site::Forearm => SitePreset {
                site,
                skin_scale: 1.0,
                depth_scale: 1.0,
                radius_scale: 1.0,
                artefact_probability_override: None,
            },
            Site::Calf => SitePreset {
                site,
                skin_scale: 1.5,
                depth_scale: 1.2,
                radius_scale: 1.0,
                artefact_probability_override: None,
            },
            Site::Neck => SitePreset {
                site,
                skin_scale: 0.8,
                depth_scale: 1.6,
                radius_scale: 1.5,
                artefact_probability_override: Some(0.0),
            },
        }
    }

    /// The concrete per-site config: scaled skin band, vessel depth and
    /// radius ranges (depth clamped so vessel centres stay inside the
    /// image), and possibly overridden artefact probability.
    pub fn resolve(&self, base: &PhantomConfig) -> Result<PhantomConfig> {
        let mut cfg = base.clone();
        cfg.skin_px = ((base.skin_px as f64 * self.skin_scale).round() as usize).max(1);
        cfg.vessel_radius = (
            base.vessel_radius.0 * self.radius_scale,
            base.vessel_radius.1 * self.radius_scale,
        );
        let max_depth = (cfg.height - 1).saturating_sub(cfg.tissue_top()) as f64;
        let lo = (base.vessel_depth.0 * self.depth_scale).min(max_depth);
        let hi = (base.vessel_depth.1 * self.depth_scale).min(max_depth);
        cfg.vessel_depth = (lo, hi.max(lo));
        if let Some(p) = self.artefact_probability_override {
            cfg.artefact_probability = p;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn uniform_in(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

/// Draws the label geometry for one sample.
///
/// Draw order from `rng`: vessel count; per vessel (semi-axis x,
/// semi-axis y, depth, centre x); artefact coin; then, only when the
/// coin hits, artefact side, top width, bottom width.
pub fn generate_label_map(
    config: &PhantomConfig,
    preset: &SitePreset,
    rng: &mut ChaCha8Rng,
) -> Result<LabelMap> {
    let cfg = preset.resolve(config)?;
    let (h, w) = (cfg.height, cfg.width);
    let mut labels = Array2::zeros((h, w));

    // Bands, top to bottom.
    let boundaries = [
        (cfg.heavy_water_px, TissueClass::HeavyWater),
        (cfg.membrane_px, TissueClass::Membrane),
        (cfg.gel_px, TissueClass::UsGel),
        (cfg.skin_px, TissueClass::Skin),
    ];
    let mut row = 0;
    for (thickness, class) in boundaries {
        for r in row..(row + thickness).min(h) {
            for c in 0..w {
                labels[(r, c)] = class.code();
            }
        }
        row += thickness;
    }
    for r in row..h {
        for c in 0..w {
            labels[(r, c)] = TissueClass::OtherTissue.code();
        }
    }

    // Vessels: filled ellipses painted only over tissue, so they never
    // cut into the bands above.
    let tissue_top = cfg.tissue_top();
    let n_vessels = rng.random_range(cfg.vessel_count.0..=cfg.vessel_count.1);
    for _ in 0..n_vessels {
        let rx = uniform_in(rng, cfg.vessel_radius.0, cfg.vessel_radius.1);
        let ry = uniform_in(rng, cfg.vessel_radius.0, cfg.vessel_radius.1);
        let depth = uniform_in(rng, cfg.vessel_depth.0, cfg.vessel_depth.1);
        let cy = tissue_top as f64 + depth;
        let cx = if w as f64 - 1.0 - rx > rx {
            uniform_in(rng, rx, w as f64 - 1.0 - rx)
        } else {
            (w as f64 - 1.0) / 2.0
        };
        let r_lo = ((cy - ry).floor().max(0.0)) as usize;
        let r_hi = ((cy + ry).ceil().min(h as f64 - 1.0)) as usize;
        let c_lo = ((cx - rx).floor().max(0.0)) as usize;
        let c_hi = ((cx + rx).ceil().min(w as f64 - 1.0)) as usize;
        for r in r_lo..=r_hi {
            for c in c_lo..=c_hi {
                let dy = (r as f64 - cy) / ry;
                let dx = (c as f64 - cx) / rx;
                if dy * dy + dx * dx <= 1.0
                    && labels[(r, c)] == TissueClass::OtherTissue.code()
                {
                    labels[(r, c)] = TissueClass::Blood.code();
                }
            }
        }
    }

    // Coupling-loss wedge: replaces everything below the membrane at
    // one lateral edge, widening with depth.
    if rng.random_range(0.0..1.0) < cfg.artefact_probability {
        let left: bool = rng.random();
        let top_max = (w as f64 / 8.0).max(3.0);
        let w_top = uniform_in(rng, 2.0, top_max);
        let bottom_max = (w as f64 / 4.0).max(w_top + 1.0);
        let w_bottom = uniform_in(rng, w_top, bottom_max);
        let r0 = cfg.membrane_bottom();
        for r in r0..h {
            let t = if h > r0 + 1 {
                (r - r0) as f64 / (h - 1 - r0) as f64
            } else {
                0.0
            };
            let width_here = (w_top + (w_bottom - w_top) * t).round() as usize;
            let width_here = width_here.clamp(1, w);
            let cols = if left {
                0..width_here
            } else {
                w - width_here..w
            };
            for c in cols {
                labels[(r, c)] = TissueClass::CouplingArtefact.code();
            }
        }
    }

    LabelMap::new(labels)
}

/// 4-connected Blood components in row-major discovery order. Each
/// component is one vessel for sO2 purposes; vessels that touch merge.
pub fn blood_components(labels: &LabelMap) -> Vec<Vec<(usize, usize)>> {
    let (h, w) = (labels.height(), labels.width());
    let blood = TissueClass::Blood.code();
    let mut seen = Array2::<bool>::from_elem((h, w), false);
    let mut components = Vec::new();
    for r in 0..h {
        for c in 0..w {
            if labels.values()[(r, c)] != blood || seen[(r, c)] {
                continue;
            }
            let mut comp = Vec::new();
            let mut queue = VecDeque::from([(r, c)]);
            seen[(r, c)] = true;
            while let Some((pr, pc)) = queue.pop_front() {
                comp.push((pr, pc));
                let mut push = |nr: usize, nc: usize, seen: &mut Array2<bool>| {
                    if labels.values()[(nr, nc)] == blood && !seen[(nr, nc)] {
                        seen[(nr, nc)] = true;
                        queue.push_back((nr, nc));
                    }
                };
                if pr > 0 {
                    push(pr - 1, pc, &mut seen);
                }
                if pr + 1 < h {
                    push(pr + 1, pc, &mut seen);
                }
                if pc > 0 {
                    push(pr, pc - 1, &mut seen);
                }
                if pc + 1 < w {
                    push(pr, pc + 1, &mut seen);
                }
            }
            components.push(comp);
        }
    }
    components
}

/// Renders the multispectral PA cube for a label map.
///
/// Draw order from `rng`: one sO2 per blood component (row-major
/// discovery order), then, only when noise_std > 0, one Gaussian per
/// (wavelength, row, column) in that nesting order.
pub fn render_pa(
    labels: &LabelMap,
    config: &PhantomConfig,
    rng: &mut ChaCha8Rng,
) -> Result<SpectralCube> {
    config.validate()?;
    if (labels.height(), labels.width()) != (config.height, config.width) {
        return Err(CoreError::invalid(
            "render",
            format!(
                "labels are {}x{} but config says {}x{}",
                labels.height(),
                labels.width(),
                config.height,
                config.width
            ),
        ));
    }
    let axis = &config.axis;
    let hbo2 = spectra::hbo2().sample_axis(axis)?;
    let hb = spectra::hb().sample_axis(axis)?;
    let mel = spectra::melanin().sample_axis(axis)?;

    // Per-pixel sO2 via component discovery.
    let (h, w) = (config.height, config.width);
    let mut so2_map = Array2::<f64>::zeros((h, w));
    for comp in blood_components(labels) {
        let so2 = uniform_in(rng, config.so2.0, config.so2.1);
        for (r, c) in comp {
            so2_map[(r, c)] = so2;
        }
    }

    let noise = if config.noise_std > 0.0 {
        Some(Normal::new(0.0, config.noise_std).expect("validated noise_std"))
    } else {
        None
    };

    let mut values = Array3::<f32>::zeros((axis.count(), h, w));
    for li in 0..axis.count() {
        let fluence: Vec<f64> = (0..h).map(|r| (-config.mu_eff[li] * r as f64).exp()).collect();
        for r in 0..h {
            for c in 0..w {
                let class = TissueClass::from_code(labels.values()[(r, c)]).unwrap();
                let mu_a = match class {
                    TissueClass::Blood => {
                        let s = so2_map[(r, c)];
                        (s * hbo2[li] + (1.0 - s) * hb[li]) * BLOOD_EXTINCTION_SCALE
                    }
                    TissueClass::Skin => mel[li] * SKIN_MELANIN_SCALE,
                    TissueClass::UsGel => MU_A_GEL,
                    TissueClass::Membrane => MU_A_MEMBRANE,
                    TissueClass::HeavyWater => MU_A_HEAVY_WATER,
                    TissueClass::OtherTissue => {
                        MU_A_TISSUE_BASE + TISSUE_BLOOD_TINT * hbo2[li] * BLOOD_EXTINCTION_SCALE
                    }
                    TissueClass::CouplingArtefact => 0.0,
                };
                let mut v = mu_a * fluence[r];
                if let Some(n) = &noise {
                    v += n.sample(rng);
                }
                values[(li, r, c)] = v as f32;
            }
        }
    }
    SpectralCube::new(*axis, values)
}

/// Renders the US image for a label map.
///
/// value = echogenicity(class) * speckle + edge_gain * [class boundary],
/// speckle log-normal with unit mean (exp(sigma Z - sigma^2/2)), one
/// draw per pixel in row-major order; no draws when sigma = 0.
pub fn render_us(
    labels: &LabelMap,
    config: &PhantomConfig,
    rng: &mut ChaCha8Rng,
) -> Result<UsImage> {
    config.validate()?;
    if (labels.height(), labels.width()) != (config.height, config.width) {
        return Err(CoreError::invalid(
            "render",
            format!(
                "labels are {}x{} but config says {}x{}",
                labels.height(),
                labels.width(),
                config.height,
                config.width
            ),
        ));
    }
    let (h, w) = (config.height, config.width);
    let sigma = config.speckle_sigma;
    let normal = if sigma > 0.0 {
        Some(Normal::new(0.0, 1.0).unwrap())
    } else {
        None
    };
    let lv = labels.values();
    let mut values = Array2::<f32>::zeros((h, w));
    for r in 0..h {
        for c in 0..w {
            let class = lv[(r, c)];
            let speckle = match &normal {
                Some(n) => {
                    let z: f64 = n.sample(rng);
                    (sigma * z - sigma * sigma / 2.0).exp()
                }
                None => 1.0,
            };
            let edge = (r > 0 && lv[(r - 1, c)] != class)
                || (r + 1 < h && lv[(r + 1, c)] != class)
                || (c > 0 && lv[(r, c - 1)] != class)
                || (c + 1 < w && lv[(r, c + 1)] != class);
            let v = config.echogenicity[class as usize] * speckle
                + if edge { config.us_edge_gain } else { 0.0 };
            values[(r, c)] = v as f32;
        }
    }
    UsImage::new(values)
}

/// Builds the canonical sample id for a metadata tuple.
pub fn sample_id(meta: &SampleMeta) -> String {
    format!(
        "v{:02}_{}_{}_l{}",
        meta.volunteer_id, meta.site, meta.side, meta.location_index
    )
}

/// Generates one full sample from its own seed: label map, then PA,
/// then US, all from a single ChaCha8 stream.
pub fn generate_sample(config: &PhantomConfig, meta: SampleMeta, seed: u64) -> Result<Sample> {
    let preset = SitePreset::for_site(meta.site);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels = generate_label_map(config, &preset, &mut rng)?;
    let site_cfg = preset.resolve(config)?;
    let pa = render_pa(&labels, &site_cfg, &mut rng)?;
    let us = render_us(&labels, &site_cfg, &mut rng)?;
    Sample::new(sample_id(&meta), pa, us, labels, meta)
}

/// The acquisition grid to synthesize: which volunteers, sites, sides,
/// and locations per site/side.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetGrid {
    pub volunteers: u32,
    pub sites: Vec<Site>,
    pub sides: Vec<Side>,
    pub locations: u8,
}

impl Default for DatasetGrid {
    /// 10 volunteers x 3 sites x 2 sides x 3 locations = 180 samples.
    fn default() -> Self {
        DatasetGrid {
            volunteers: 10,
            sites: Site::ALL.to_vec(),
            sides: Side::ALL.to_vec(),
            locations: 3,
        }
    }
}

impl DatasetGrid {
    pub fn validate(&self) -> Result<()> {
        if self.volunteers == 0 {
            return Err(CoreError::config("grid needs at least one volunteer"));
        }
        if self.sites.is_empty() || self.sides.is_empty() {
            return Err(CoreError::config("grid needs at least one site and side"));
        }
        if has_dup(&self.sites) {
            return Err(CoreError::config("grid lists a site twice"));
        }
        if has_dup(&self.sides) {
            return Err(CoreError::config("grid lists a side twice"));
        }
        if self.locations == 0 || self.locations > 3 {
            return Err(CoreError::config(format!(
                "locations per site/side must be 1..=3, got {}",
                self.locations
            )));
        }
        Ok(())
    }

    /// All sample metadata in generation order: volunteer, site, side,
    /// location, nested in that precedence.
    pub fn metas(&self) -> Vec<SampleMeta> {
        let mut out = Vec::new();
        for v in 1..=self.volunteers {
            for &site in &self.sites {
                for &side in &self.sides {
                    for loc in 0..self.locations {
                        out.push(SampleMeta {
                            volunteer_id: v,
                            site,
                            side,
                            location_index: loc,
                        });
                    }
                }
            }
        }
        out
    }

    pub fn len(&self) -> usize {
        self.volunteers as usize * self.sites.len() * self.sides.len() * self.locations as usize
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn has_dup<T: PartialEq>(items: &[T]) -> bool {
    items
        .iter()
        .enumerate()
        .any(|(i, x)| items[..i].contains(x))
}

/// A dataset written to disk.
#[derive(Debug, Clone)]
pub struct GeneratedDataset {
    pub manifest_path: PathBuf,
    pub config_path: PathBuf,
    pub refs: Vec<SampleRef>,
}

/// Generates the full grid into `out_dir`: three PATC files per sample,
/// `manifest.txt`, and `config_resolved.txt`. Sample `i` uses
/// `sub_seed(config.seed, i)`, so parallel generation is bit-identical
/// to serial and to any rerun with the same config.
pub fn generate_dataset(
    out_dir: &Path,
    config: &PhantomConfig,
    grid: &DatasetGrid,
) -> Result<GeneratedDataset> {
    config.validate()?;
    grid.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| CoreError::io(out_dir, e))?;

    let metas = grid.metas();
    let mut refs: Vec<(usize, SampleRef)> = metas
        .par_iter()
        .enumerate()
        .map(|(i, meta)| -> Result<(usize, SampleRef)> {
            let sample = generate_sample(config, *meta, sub_seed(config.seed, i as u64))?;
            let id = sample.id.clone();
            let pa_path = PathBuf::from(format!("{id}_pa.patc"));
            let us_path = PathBuf::from(format!("{id}_us.patc"));
            let label_path = PathBuf::from(format!("{id}_label.patc"));
            write_tensor(
                &out_dir.join(&pa_path),
                &TensorData::F32(sample.pa.values().clone().into_dyn()),
            )?;
            write_tensor(
                &out_dir.join(&us_path),
                &TensorData::F32(sample.us.values().clone().into_dyn()),
            )?;
            write_tensor(
                &out_dir.join(&label_path),
                &TensorData::U8(sample.labels.values().clone().into_dyn()),
            )?;
            Ok((
                i,
                SampleRef {
                    id,
                    meta: *meta,
                    pa_path,
                    us_path,
                    label_path,
                },
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    refs.sort_by_key(|(i, _)| *i);
    let refs: Vec<SampleRef> = refs.into_iter().map(|(_, r)| r).collect();

    let manifest_path = out_dir.join("manifest.txt");
    write_manifest(&manifest_path, &refs)?;
    let config_path = out_dir.join("config_resolved.txt");
    write_config(&config_path, &resolved_pairs(config, grid))?;

    Ok(GeneratedDataset {
        manifest_path,
        config_path,
        refs,
    })
}

/// The flat key-value rendering of a fully resolved config + grid, in
/// stable key order. `read_config` parses exactly this set of keys.
pub fn resolved_pairs(config: &PhantomConfig, grid: &DatasetGrid) -> Vec<(String, String)> {
    let join_f64 = |v: &[f64]| v.iter().map(|x| format_f64(*x)).collect::<Vec<_>>().join(",");
    let mut pairs: Vec<(String, String)> = vec![
        ("height".into(), config.height.to_string()),
        ("width".into(), config.width.to_string()),
        ("wavelengths".into(), config.axis.count().to_string()),
        ("lambda_start_nm".into(), format_f64(config.axis.start_nm())),
        ("lambda_end_nm".into(), format_f64(config.axis.end_nm())),
        ("heavy_water_px".into(), config.heavy_water_px.to_string()),
        ("membrane_px".into(), config.membrane_px.to_string()),
        ("gel_px".into(), config.gel_px.to_string()),
        ("skin_px".into(), config.skin_px.to_string()),
        ("vessel_count_min".into(), config.vessel_count.0.to_string()),
        ("vessel_count_max".into(), config.vessel_count.1.to_string()),
        ("vessel_radius_min".into(), format_f64(config.vessel_radius.0)),
        ("vessel_radius_max".into(), format_f64(config.vessel_radius.1)),
        ("vessel_depth_min".into(), format_f64(config.vessel_depth.0)),
        ("vessel_depth_max".into(), format_f64(config.vessel_depth.1)),
        ("so2_min".into(), format_f64(config.so2.0)),
        ("so2_max".into(), format_f64(config.so2.1)),
        ("mu_eff".into(), join_f64(&config.mu_eff)),
        ("noise_std".into(), format_f64(config.noise_std)),
        (
            "artefact_probability".into(),
            format_f64(config.artefact_probability),
        ),
        ("speckle_sigma".into(), format_f64(config.speckle_sigma)),
        ("us_edge_gain".into(), format_f64(config.us_edge_gain)),
        ("seed".into(), config.seed.to_string()),
        ("volunteers".into(), grid.volunteers.to_string()),
        (
            "sites".into(),
            grid.sites.iter().map(|s| s.name()).collect::<Vec<_>>().join(","),
        ),
        (
            "sides".into(),
            grid.sides.iter().map(|s| s.name()).collect::<Vec<_>>().join(","),
        ),
        ("locations".into(), grid.locations.to_string()),
    ];
    for cls in TissueClass::ALL {
        pairs.push((
            format!("echo_{}", cls.name()),
            format_f64(config.echogenicity[cls.code() as usize]),
        ));
    }
    pairs.sort();
    pairs
}

/// Reads a phantom config + grid from a parsed key-value file. Every
/// key is optional and falls back to the default; `mu_eff` accepts
/// either an explicit comma list or a `mu_eff_start`/`mu_eff_end`
/// linear ramp. Call `cfg.ensure_all_used()` afterwards to reject
/// stray keys.
pub fn read_config(cfg: &ConfigMap) -> Result<(PhantomConfig, DatasetGrid)> {
    // A given size rescales the geometric defaults (bands, vessel
    // ranges) before explicit overrides apply on top.
    let height = cfg.get_usize("height")?;
    let width = cfg.get_usize("width")?;
    let mut config = match (height, width) {
        (None, None) => PhantomConfig::default(),
        (h, w) => PhantomConfig::for_size(h.unwrap_or(128), w.unwrap_or(128)),
    };
    let mut grid = DatasetGrid::default();

    let count = cfg.get_usize("wavelengths")?.unwrap_or(config.axis.count());
    let start = cfg.get_f64("lambda_start_nm")?.unwrap_or(config.axis.start_nm());
    let end = cfg.get_f64("lambda_end_nm")?.unwrap_or(config.axis.end_nm());
    config.axis = WavelengthAxis::new(count, start, end)?;

    if let Some(v) = cfg.get_usize("heavy_water_px")? {
        config.heavy_water_px = v;
    }
    if let Some(v) = cfg.get_usize("membrane_px")? {
        config.membrane_px = v;
    }
    if let Some(v) = cfg.get_usize("gel_px")? {
        config.gel_px = v;
    }
    if let Some(v) = cfg.get_usize("skin_px")? {
        config.skin_px = v;
    }
    if let Some(v) = cfg.get_usize("vessel_count_min")? {
        config.vessel_count.0 = v;
    }
    if let Some(v) = cfg.get_usize("vessel_count_max")? {
        config.vessel_count.1 = v;
    }
    if let Some(v) = cfg.get_f64("vessel_radius_min")? {
        config.vessel_radius.0 = v;
    }
    if let Some(v) = cfg.get_f64("vessel_radius_max")? {
        config.vessel_radius.1 = v;
    }
    if let Some(v) = cfg.get_f64("vessel_depth_min")? {
        config.vessel_depth.0 = v;
    }
    if let Some(v) = cfg.get_f64("vessel_depth_max")? {
        config.vessel_depth.1 = v;
    }
    if let Some(v) = cfg.get_f64("so2_min")? {
        config.so2.0 = v;
    }
    if let Some(v) = cfg.get_f64("so2_max")? {
        config.so2.1 = v;
    }

    let ramp_start = cfg.get_f64("mu_eff_start")?;
    let ramp_end = cfg.get_f64("mu_eff_end")?;
    if let Some(list) = cfg.get_str("mu_eff") {
        if ramp_start.is_some() || ramp_end.is_some() {
            return Err(CoreError::config(
                "give either mu_eff or mu_eff_start/mu_eff_end, not both",
            ));
        }
        config.mu_eff = list
            .split(',')
            .map(|s| {
                s.trim().parse::<f64>().map_err(|_| {
                    CoreError::config(format!("mu_eff entry '{}' is not a number", s.trim()))
                })
            })
            .collect::<Result<Vec<f64>>>()?;
    } else {
        match (ramp_start, ramp_end) {
            (None, None) => {
                config.mu_eff = linear_ramp(config.axis.count(), 0.015, 0.03);
            }
            (s, e) => {
                let s = s.ok_or_else(|| {
                    CoreError::config("mu_eff_end given without mu_eff_start")
                })?;
                let e = e.ok_or_else(|| {
                    CoreError::config("mu_eff_start given without mu_eff_end")
                })?;
                config.mu_eff = linear_ramp(config.axis.count(), s, e);
            }
        }
    }

    if let Some(v) = cfg.get_f64("noise_std")? {
        config.noise_std = v;
    }
    if let Some(v) = cfg.get_f64("artefact_probability")? {
        config.artefact_probability = v;
    }
    if let Some(v) = cfg.get_f64("speckle_sigma")? {
        config.speckle_sigma = v;
    }
    if let Some(v) = cfg.get_f64("us_edge_gain")? {
        config.us_edge_gain = v;
    }
    for cls in TissueClass::ALL {
        if let Some(v) = cfg.get_f64(&format!("echo_{}", cls.name()))? {
            config.echogenicity[cls.code() as usize] = v;
        }
    }
    if let Some(v) = cfg.get_u64("seed")? {
        config.seed = v;
    }

    if let Some(v) = cfg.get_u32("volunteers")? {
        grid.volunteers = v;
    }
    if let Some(list) = cfg.get_str("sites") {
        grid.sites = list
            .split(',')
            .map(|s| Site::parse(s.trim()))
            .collect::<Result<Vec<Site>>>()?;
    }
    if let Some(list) = cfg.get_str("sides") {
        grid.sides = list
            .split(',')
            .map(|s| Side::parse(s.trim()))
            .collect::<Result<Vec<Side>>>()?;
    }
    if let Some(v) = cfg.get_usize("locations")? {
        grid.locations = u8::try_from(v)
            .map_err(|_| CoreError::config(format!("locations {v} out of range")))?;
    }

    config.validate()?;
    grid.validate()?;
    Ok((config, grid))
}
