//! JSON run configurations. Schemas are strict: unknown keys are
//! rejected so typos cannot silently change an experiment.

use fusionnet_core::backbone::{BackboneSpec, Variant};
use fusionnet_core::error::{Error, Result};
use fusionnet_core::gabor::GaborConfig;
use fusionnet_core::layers::DilationSet;
use fusionnet_core::model::ModelSpec;
use fusionnet_core::train::{BandSelection, TrainConfig};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub manifest: PathBuf,
    pub band: BandSelection,
    /// Which manifest split repetitions to train; defaults to
    /// 1..=seeds.len().
    #[serde(default)]
    pub reps: Option<Vec<usize>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub model: ModelSpec,
    #[serde(default)]
    pub train: TrainConfig,
    /// Output directory; `--out` overrides it.
    #[serde(default)]
    pub out: Option<PathBuf>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)?;
        let cfg: RunConfig = serde_json::from_str(&text)?;
        cfg.model.validate()?;
        if cfg.train.seeds.is_empty() {
            return Err(Error::invalid("train.seeds must list at least one seed"));
        }
        if let Some(reps) = &cfg.data.reps {
            if reps.len() != cfg.train.seeds.len() {
                return Err(Error::invalid(format!(
                    "data.reps lists {} repetitions but train.seeds has {} seeds (one seed per repetition)",
                    reps.len(),
                    cfg.train.seeds.len()
                )));
            }
        }
        Ok(cfg)
    }

    pub fn reps(&self) -> Vec<usize> {
        self.data
            .reps
            .clone()
            .unwrap_or_else(|| (1..=self.train.seeds.len()).collect())
    }
}

/// Ablation suite: a backbone template plus the component toggles per
/// named variant, trained per band and seed.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblateSuite {
    /// Band key (`b76`, ...) to manifest path.
    pub manifests: std::collections::BTreeMap<String, PathBuf>,
    /// Variants to run; defaults to all five.
    #[serde(default = "default_variants")]
    pub variants: Vec<Variant>,
    /// One seed per repetition; repetition i uses manifest split i+1.
    pub seeds: Vec<u64>,
    /// Backbone template without the toggled components (channels,
    /// pools, input size, batch-norm settings).
    pub base: BackboneSpec,
    /// Gabor bank used by the Gabor-bearing variants.
    #[serde(default)]
    pub gabor: GaborConfig,
    /// Dilation set used by the dilated-block variants.
    #[serde(default)]
    pub dilations: DilationSet,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub out: Option<PathBuf>,
}

fn default_variants() -> Vec<Variant> {
    Variant::ALL.to_vec()
}

impl AblateSuite {
    pub fn load(path: &Path) -> Result<AblateSuite> {
        let text = std::fs::read_to_string(path)?;
        let suite: AblateSuite = serde_json::from_str(&text)?;
        if suite.seeds.is_empty() {
            return Err(Error::invalid("ablation suite needs at least one seed"));
        }
        if suite.manifests.is_empty() {
            return Err(Error::invalid("ablation suite needs at least one band manifest"));
        }
        suite.base.validate()?;
        Ok(suite)
    }

    /// Builds the spec for one variant from the template and toggles.
    pub fn variant_spec(&self, variant: Variant) -> Result<BackboneSpec> {
        let mut spec = self.base.clone();
        spec.gabor = None;
        spec.mix_pool = false;
        spec.dilations = None;
        match variant {
            Variant::Cnn5 => {}
            Variant::Mpcnn5 => spec.mix_pool = true,
            Variant::Gcnn5 => spec.set_gabor(self.gabor),
            Variant::Dcnn5 => spec.dilations = Some(self.dilations.clone()),
            Variant::Dgcnn => {
                spec.set_gabor(self.gabor);
                spec.mix_pool = true;
                spec.dilations = Some(self.dilations.clone());
            }
        }
        spec.validate()?;
        Ok(spec)
    }
}

/// Resolves a manifest path relative to the config file that named it.
pub fn resolve_relative(config_path: &Path, target: &Path) -> PathBuf {
    if target.is_absolute() {
        target.to_path_buf()
    } else {
        config_path.parent().unwrap_or(Path::new(".")).join(target)
    }
}
