//! Chip data model, band arithmetic, synthetic dataset generation,
//! stratified splitting, class weighting and geometric augmentation.

mod augment;
mod io;
mod split;
mod synth;

pub use augment::{apply_augment, apply_to_planes, sample_augment, AugmentDraw};
pub use io::{read_chip, read_chip_bytes, write_chip, write_chip_bytes};
pub use split::{class_weights, stratified_split, ClassWeightMode, Split};
pub use synth::{generate_to_dir, Preset, SynthConfig, SynthPreset};

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::collections::HashMap;
use std::path::{Path, PathBuf};

pub const CHANNELS: usize = 3;

/// The five spectral inputs, in fixed branch order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BandId {
    B11,
    B10,
    B7,
    B6,
    B76,
}

impl BandId {
    pub const ALL: [BandId; 5] = [BandId::B11, BandId::B10, BandId::B7, BandId::B6, BandId::B76];

    pub fn code(&self) -> u8 {
        match self {
            BandId::B11 => 0,
            BandId::B10 => 1,
            BandId::B7 => 2,
            BandId::B6 => 3,
            BandId::B76 => 4,
        }
    }

    pub fn from_code(code: u8) -> Result<BandId> {
        Self::ALL
            .into_iter()
            .find(|b| b.code() == code)
            .ok_or_else(|| Error::Format(format!("unknown band code {code}")))
    }

    pub fn key(&self) -> &'static str {
        match self {
            BandId::B11 => "b11",
            BandId::B10 => "b10",
            BandId::B7 => "b7",
            BandId::B6 => "b6",
            BandId::B76 => "b76",
        }
    }

    pub fn parse(s: &str) -> Result<BandId> {
        Self::ALL
            .into_iter()
            .find(|b| b.key() == s)
            .ok_or_else(|| Error::invalid(format!("unknown band `{s}` (expected b11|b10|b7|b6|b76)")))
    }

    /// Thermal bands carry additive heat anomalies, reflectance bands a
    /// multiplicative shift, the ratio band an elevated-ratio region.
    pub fn is_thermal(&self) -> bool {
        matches!(self, BandId::B11 | BandId::B10)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Cement,
    Landcover,
}

impl Label {
    pub fn code(&self) -> u8 {
        match self {
            Label::Cement => 0,
            Label::Landcover => 1,
        }
    }

    pub fn from_code(code: u8) -> Result<Label> {
        match code {
            0 => Ok(Label::Cement),
            1 => Ok(Label::Landcover),
            other => Err(Error::Format(format!("unknown label code {other}"))),
        }
    }

    pub fn index(&self) -> usize {
        self.code() as usize
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ChipSource {
    Synthetic { seed: u64 },
    File(String),
}

/// One three-channel square sample. Channels are temporal composites of
/// the same site; pixels are stored as `f32` (matching the on-disk
/// format) and widened to `f64` when entering the tensor pipeline.
#[derive(Debug, Clone, PartialEq)]
pub struct Chip {
    pub pixels: Vec<f32>,
    pub h: usize,
    pub w: usize,
    pub label: Label,
    pub band: BandId,
    pub source: ChipSource,
}

impl Chip {
    pub fn new(pixels: Vec<f32>, h: usize, w: usize, label: Label, band: BandId, source: ChipSource) -> Result<Chip> {
        if pixels.len() != CHANNELS * h * w {
            return Err(Error::invalid(format!(
                "chip pixel count {} does not match {CHANNELS}x{h}x{w}",
                pixels.len()
            )));
        }
        if h != w {
            return Err(Error::invalid(format!("chips must be square, got {h}x{w}")));
        }
        if pixels.iter().any(|p| !p.is_finite()) {
            return Err(Error::invalid("chip contains non-finite pixels"));
        }
        Ok(Chip {
            pixels,
            h,
            w,
            label,
            band,
            source,
        })
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        &self.pixels[c * self.h * self.w..(c + 1) * self.h * self.w]
    }
}

/// Pixelwise band ratio `b7 / (b6 + eps)`. The epsilon keeps the
/// denominator at least `eps` away from zero; for negative denominators
/// it is applied with the denominator's sign so the output stays finite
/// for every finite input.
pub fn band_ratio(b7: &Chip, b6: &Chip, eps: f64) -> Result<Chip> {
    if b7.h != b6.h || b7.w != b6.w {
        return Err(Error::shape_mismatch(
            "band_ratio chip extents",
            &[b7.h, b7.w],
            &[b6.h, b6.w],
        ));
    }
    if b7.label != b6.label {
        return Err(Error::invalid("band_ratio chips carry different labels"));
    }
    let pixels = b7
        .pixels
        .iter()
        .zip(&b6.pixels)
        .map(|(&n, &d)| {
            let d = d as f64;
            let den = if d >= 0.0 { d + eps } else { d - eps };
            (n as f64 / den) as f32
        })
        .collect();
    Chip::new(pixels, b7.h, b7.w, b7.label, BandId::B76, b7.source.clone())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub cement: usize,
    pub landcover: usize,
}

/// Planted anomaly ground truth for one synthetic cement site.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Anomaly {
    pub cx: f64,
    pub cy: f64,
    pub radius: f64,
}

impl Anomaly {
    pub fn contains(&self, x: usize, y: usize) -> bool {
        let dx = x as f64 - self.cx;
        let dy = y as f64 - self.cy;
        dx * dx + dy * dy <= self.radius * self.radius
    }
}

/// One site: the same scene observed in one or more bands.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SiteRecord {
    pub site: usize,
    pub label: Label,
    pub anomaly: Option<Anomaly>,
    pub seed: u64,
    /// Relative chip path per band.
    pub chips: BTreeMap<BandId, String>,
}

/// Train/val/test site indices for one repetition.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub rep: usize,
    pub seed: u64,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub size: usize,
    pub bands: Vec<BandId>,
    pub preset: String,
    pub seed: u64,
    pub class_counts: ClassCounts,
    pub sites: Vec<SiteRecord>,
    pub splits: Vec<SplitAssignment>,
}

impl DatasetManifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<DatasetManifest> {
        let json = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&json)?)
    }

    pub fn split(&self, rep: usize) -> Result<&SplitAssignment> {
        self.splits
            .iter()
            .find(|s| s.rep == rep)
            .ok_or_else(|| Error::invalid(format!("manifest has no split for repetition {rep}")))
    }

    pub fn labels(&self) -> Vec<Label> {
        self.sites.iter().map(|s| s.label).collect()
    }
}

/// A manifest plus all referenced chips, preloaded.
pub struct LoadedDataset {
    pub manifest: DatasetManifest,
    pub root: PathBuf,
    chips: HashMap<(usize, BandId), Chip>,
}

impl LoadedDataset {
    pub fn load(manifest_path: &Path) -> Result<LoadedDataset> {
        let manifest = DatasetManifest::load(manifest_path)?;
        let root = manifest_path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."));
        let mut chips = HashMap::new();
        for site in &manifest.sites {
            for (&band, rel) in &site.chips {
                let chip = read_chip(&root.join(rel))?;
                chips.insert((site.site, band), chip);
            }
        }
        Ok(LoadedDataset {
            manifest,
            root,
            chips,
        })
    }

    pub fn chip(&self, site: usize, band: BandId) -> Result<&Chip> {
        self.chips
            .get(&(site, band))
            .ok_or_else(|| Error::invalid(format!("site {site} has no chip for band {}", band.key())))
    }

    pub fn site(&self, site: usize) -> &SiteRecord {
        &self.manifest.sites[site]
    }
}

/// Splitmix-style seed derivation so every chip, split and epoch gets an
/// independent deterministic stream.
pub fn derive_seed(master: u64, tags: &[u64]) -> u64 {
    let mut x = master;
    for &t in tags {
        x ^= t.wrapping_add(0x9E37_79B9_7F4A_7C15);
        x = splitmix(x);
    }
    splitmix(x)
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
