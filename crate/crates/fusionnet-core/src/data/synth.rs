//! Synthetic multi-spectral dataset generator.
//!
//! Stands in for the real satellite chips: landcover sites are smoothed
//! correlated noise fields with per-channel seasonal offsets; cement
//! sites additionally carry a localised anomaly whose form depends on
//! the band family — an additive hot region persistent across all three
//! channels for the thermal bands, a multiplicative reflectance shift
//! for the shortwave bands, and an elevated-ratio region for the ratio
//! band. Every chip is generated from seeds derived from (master seed,
//! site, band, channel), so regeneration is bit-identical.

use super::{
    derive_seed, stratified_split, Anomaly, BandId, Chip, ChipSource, ClassCounts, DatasetManifest, Label,
    SiteRecord, SplitAssignment, CHANNELS,
};
use crate::error::Result;
use crate::util::run_indexed;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

const TAG_SCENE: u64 = 1;
const TAG_FIELD: u64 = 2;
const TAG_SPLIT: u64 = 3;
const TAG_AMP: u64 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// Anomalies several background deviations strong; models should
    /// reach near-perfect accuracy quickly.
    Separable,
    /// Anomalies around one background deviation; leaves headroom so
    /// architecture differences show up in accuracy.
    Hard,
}

impl Preset {
    pub fn name(&self) -> &'static str {
        match self {
            Preset::Separable => "separable",
            Preset::Hard => "hard",
        }
    }

    pub fn params(&self) -> SynthPreset {
        match self {
            Preset::Separable => SynthPreset {
                noise_sigma: 0.2,
                thermal_amp: 1.1,
                reflect_shift: 0.9,
                ratio_amp: 1.1,
            },
            Preset::Hard => SynthPreset {
                noise_sigma: 0.3,
                thermal_amp: 0.32,
                reflect_shift: 0.28,
                ratio_amp: 0.32,
            },
        }
    }
}

/// Signal-to-noise knobs of the generator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthPreset {
    pub noise_sigma: f64,
    pub thermal_amp: f64,
    pub reflect_shift: f64,
    pub ratio_amp: f64,
}

#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub n_cement: usize,
    pub n_landcover: usize,
    pub bands: Vec<BandId>,
    pub size: usize,
    pub seed: u64,
    pub preset: Preset,
    /// Number of split repetitions written into the manifest.
    pub repetitions: usize,
}

impl SynthConfig {
    pub fn new(n_cement: usize, n_landcover: usize, bands: Vec<BandId>, size: usize, seed: u64, preset: Preset) -> Self {
        SynthConfig {
            n_cement,
            n_landcover,
            bands,
            size,
            seed,
            preset,
            repetitions: 5,
        }
    }
}

/// Per-channel offsets modelling the seasonal composite (two winter
/// acquisitions around one spring acquisition).
const SEASON: [f64; CHANNELS] = [0.0, 0.3, 0.05];

fn band_base(band: BandId) -> f64 {
    if band.is_thermal() {
        0.0
    } else {
        1.0
    }
}

/// Smoothed, zero-mean, unit-variance correlated noise field.
fn background_field(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let mut field: Vec<f64> = (0..n * n).map(|_| StandardNormal.sample(rng)).collect();
    let radius = (n / 16).max(1);
    for _ in 0..2 {
        box_blur(&mut field, n, radius);
    }
    let mean = field.iter().sum::<f64>() / field.len() as f64;
    let var = field.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / field.len() as f64;
    let inv_std = 1.0 / var.sqrt().max(1e-12);
    for v in &mut field {
        *v = (*v - mean) * inv_std;
    }
    field
}

fn box_blur(field: &mut [f64], n: usize, radius: usize) {
    let mut tmp = vec![0.0; n * n];
    // horizontal
    for y in 0..n {
        for x in 0..n {
            let lo = x.saturating_sub(radius);
            let hi = (x + radius).min(n - 1);
            let mut s = 0.0;
            for xi in lo..=hi {
                s += field[y * n + xi];
            }
            tmp[y * n + x] = s / (hi - lo + 1) as f64;
        }
    }
    // vertical
    for y in 0..n {
        for x in 0..n {
            let lo = y.saturating_sub(radius);
            let hi = (y + radius).min(n - 1);
            let mut s = 0.0;
            for yi in lo..=hi {
                s += tmp[yi * n + x];
            }
            field[y * n + x] = s / (hi - lo + 1) as f64;
        }
    }
}

/// Anomaly geometry for a cement site, derived purely from the seed.
pub fn scene_anomaly(master: u64, site: usize, size: usize) -> Anomaly {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(master, &[TAG_SCENE, site as u64]));
    let s = size as f64;
    Anomaly {
        cx: rng.random_range(0.3 * s..0.7 * s),
        cy: rng.random_range(0.3 * s..0.7 * s),
        radius: rng.random_range(0.12 * s..0.2 * s),
    }
}

/// Soft-edged disk: 1 inside 0.65 r, linear falloff to 0 at r.
fn anomaly_mask(a: &Anomaly, x: usize, y: usize) -> f64 {
    let dx = x as f64 - a.cx;
    let dy = y as f64 - a.cy;
    let d = (dx * dx + dy * dy).sqrt();
    ((a.radius - d) / (0.35 * a.radius)).clamp(0.0, 1.0)
}

/// Generates one chip deterministically from derived seeds.
pub fn synth_chip(
    master: u64,
    site: usize,
    band: BandId,
    size: usize,
    label: Label,
    anomaly: Option<&Anomaly>,
    preset: &SynthPreset,
) -> Result<Chip> {
    let plane = size * size;
    let mut pixels = vec![0.0f32; CHANNELS * plane];
    let amp_jitter = {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(master, &[TAG_AMP, site as u64]));
        rng.random_range(0.9..1.1)
    };
    for c in 0..CHANNELS {
        let field_seed = derive_seed(master, &[TAG_FIELD, site as u64, band.code() as u64, c as u64]);
        let mut rng = ChaCha8Rng::seed_from_u64(field_seed);
        let field = background_field(&mut rng, size);
        let base = band_base(band);
        for y in 0..size {
            for x in 0..size {
                let mut v = base + SEASON[c] + preset.noise_sigma * field[y * size + x];
                if let Some(a) = anomaly {
                    let m = anomaly_mask(a, x, y) * amp_jitter;
                    v = match band {
                        BandId::B11 | BandId::B10 => v + preset.thermal_amp * m,
                        BandId::B7 | BandId::B6 => v * (1.0 + preset.reflect_shift * m),
                        BandId::B76 => v + preset.ratio_amp * m,
                    };
                }
                pixels[c * plane + y * size + x] = v as f32;
            }
        }
    }
    let seed = derive_seed(master, &[TAG_FIELD, site as u64, band.code() as u64]);
    Chip::new(pixels, size, size, label, band, ChipSource::Synthetic { seed })
}

/// Generates all chips and the manifest into `dir` (chips under
/// `dir/chips/`). Chip generation parallelises across `threads`; the
/// manifest is assembled in site order either way.
pub fn generate_to_dir(cfg: &SynthConfig, dir: &Path, threads: usize) -> Result<DatasetManifest> {
    let chips_dir = dir.join("chips");
    std::fs::create_dir_all(&chips_dir)?;
    let n_sites = cfg.n_cement + cfg.n_landcover;
    let preset = cfg.preset.params();

    let mut sites = Vec::with_capacity(n_sites);
    for site in 0..n_sites {
        let label = if site < cfg.n_cement { Label::Cement } else { Label::Landcover };
        let anomaly = (label == Label::Cement).then(|| scene_anomaly(cfg.seed, site, cfg.size));
        let chips: BTreeMap<BandId, String> = cfg
            .bands
            .iter()
            .map(|b| (*b, format!("chips/site{site:05}_{}.fchp", b.key())))
            .collect();
        sites.push(SiteRecord {
            site,
            label,
            anomaly,
            seed: derive_seed(cfg.seed, &[TAG_FIELD, site as u64]),
            chips,
        });
    }

    let tasks: Vec<(usize, BandId, String)> = sites
        .iter()
        .flat_map(|s| s.chips.iter().map(move |(b, p)| (s.site, *b, p.clone())))
        .collect();
    let results = run_indexed(tasks.len(), threads, |i| {
        let (site, band, rel) = &tasks[i];
        let record = &sites[*site];
        let chip = synth_chip(
            cfg.seed,
            *site,
            *band,
            cfg.size,
            record.label,
            record.anomaly.as_ref(),
            &preset,
        )?;
        super::write_chip(&dir.join(rel), &chip)?;
        Ok::<(), crate::error::Error>(())
    });
    for r in results {
        r?;
    }

    let labels: Vec<Label> = sites.iter().map(|s| s.label).collect();
    // Stratification needs at least 5 sites per class; below that the
    // manifest ships without split assignments (chips are still usable
    // as fixtures).
    let mut splits = Vec::with_capacity(cfg.repetitions);
    if cfg.n_cement >= 5 && cfg.n_landcover >= 5 {
        for rep in 1..=cfg.repetitions {
            let seed = derive_seed(cfg.seed, &[TAG_SPLIT, rep as u64]);
            let s = stratified_split(&labels, seed)?;
            splits.push(SplitAssignment {
                rep,
                seed,
                train: s.train,
                val: s.val,
                test: s.test,
            });
        }
    }

    let manifest = DatasetManifest {
        size: cfg.size,
        bands: cfg.bands.clone(),
        preset: cfg.preset.name().to_string(),
        seed: cfg.seed,
        class_counts: ClassCounts {
            cement: cfg.n_cement,
            landcover: cfg.n_landcover,
        },
        sites,
        splits,
    };
    manifest.save(&dir.join("manifest.json"))?;
    Ok(manifest)
}
