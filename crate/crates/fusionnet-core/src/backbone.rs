//! Five-layer convolutional backbones.
//!
//! One builder covers the whole ablation family: a plain five-stage CNN
//! (conv -> ReLU -> max pool -> batch norm per stage, then global average
//! pooling), and the physics-motivated variant that swaps the first stage
//! for a trainable Gabor bank, replaces max pooling with the mixed
//! max/average schedule, and inserts the averaged dilated block between
//! the last stage and global pooling. Toggling the three components
//! independently yields CNN5, MPCNN5, GCNN5, DCNN5 and DGCNN.

use crate::error::{Error, Result};
use crate::gabor::{GaborBank, GaborConfig};
use crate::layers::{alpha_schedule, mix_pool, DilatedBlock, DilationSet};
use crate::nn::{BatchNorm2d, Conv2dLayer, Mode};
use crate::params::ParamStore;
use crate::tensor::{PoolMode, Tape, VarId};
use rand::Rng;
use serde::{Deserialize, Serialize};

pub const STAGES: usize = 5;

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(deny_unknown_fields)]
pub struct PoolCfg {
    pub window: usize,
    pub stride: usize,
}

impl Default for PoolCfg {
    fn default() -> Self {
        PoolCfg { window: 2, stride: 2 }
    }
}

fn default_pools() -> [PoolCfg; STAGES] {
    [PoolCfg::default(); STAGES]
}

fn default_channels() -> [usize; STAGES] {
    [32, 64, 128, 128, 128]
}

fn default_kernel() -> usize {
    3
}

fn default_bn_eps() -> f64 {
    1e-5
}

fn default_bn_momentum() -> f64 {
    0.1
}

/// The named ablation variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Hash)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Cnn5,
    Mpcnn5,
    Gcnn5,
    Dcnn5,
    Dgcnn,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Cnn5,
        Variant::Mpcnn5,
        Variant::Gcnn5,
        Variant::Dcnn5,
        Variant::Dgcnn,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Variant::Cnn5 => "CNN5",
            Variant::Mpcnn5 => "MPCNN5",
            Variant::Gcnn5 => "GCNN5",
            Variant::Dcnn5 => "DCNN5",
            Variant::Dgcnn => "DGCNN",
        }
    }
}

/// Declarative description of one backbone.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct BackboneSpec {
    /// Square input extent; must survive the pooling schedule exactly.
    pub input_size: usize,
    /// Output channels per stage; the last entry is the feature width.
    #[serde(default = "default_channels")]
    pub channels: [usize; STAGES],
    /// Kernel size of the plain conv stages.
    #[serde(default = "default_kernel")]
    pub kernel_size: usize,
    #[serde(default = "default_pools")]
    pub pools: [PoolCfg; STAGES],
    /// When set, stage 1 is the trainable Gabor bank and `channels[0]`
    /// must equal its filter count.
    #[serde(default)]
    pub gabor: Option<GaborConfig>,
    /// Mixed max/average pooling with the per-layer schedule; plain max
    /// pooling otherwise.
    #[serde(default)]
    pub mix_pool: bool,
    /// Averaged multi-dilation block between stage 5 and global pooling.
    #[serde(default)]
    pub dilations: Option<DilationSet>,
    #[serde(default = "default_bn_eps")]
    pub bn_eps: f64,
    #[serde(default = "default_bn_momentum")]
    pub bn_momentum: f64,
}

impl BackboneSpec {
    pub fn cnn5(input_size: usize) -> Self {
        BackboneSpec {
            input_size,
            channels: default_channels(),
            kernel_size: default_kernel(),
            pools: default_pools(),
            gabor: None,
            mix_pool: false,
            dilations: None,
            bn_eps: default_bn_eps(),
            bn_momentum: default_bn_momentum(),
        }
    }

    pub fn dgcnn(input_size: usize) -> Self {
        Self::variant(Variant::Dgcnn, input_size)
    }

    pub fn variant(kind: Variant, input_size: usize) -> Self {
        let mut spec = Self::cnn5(input_size);
        match kind {
            Variant::Cnn5 => {}
            Variant::Mpcnn5 => spec.mix_pool = true,
            Variant::Gcnn5 => spec.set_gabor(GaborConfig::default()),
            Variant::Dcnn5 => spec.dilations = Some(DilationSet::default()),
            Variant::Dgcnn => {
                spec.set_gabor(GaborConfig::default());
                spec.mix_pool = true;
                spec.dilations = Some(DilationSet::default());
            }
        }
        spec
    }

    pub fn set_gabor(&mut self, cfg: GaborConfig) {
        self.channels[0] = cfg.filters();
        self.gabor = Some(cfg);
    }

    /// Which variant the toggles correspond to, if any single named one.
    pub fn variant_name(&self) -> &'static str {
        match (self.gabor.is_some(), self.mix_pool, self.dilations.is_some()) {
            (false, false, false) => "CNN5",
            (false, true, false) => "MPCNN5",
            (true, false, false) => "GCNN5",
            (false, false, true) => "DCNN5",
            (true, true, true) => "DGCNN",
            _ => "custom",
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.channels[STAGES - 1]
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel_size % 2 == 0 || self.kernel_size == 0 {
            return Err(Error::invalid("backbone kernel size must be odd"));
        }
        if let Some(g) = &self.gabor {
            g.validate()?;
            if self.channels[0] != g.filters() {
                return Err(Error::invalid(format!(
                    "stage-1 width {} must equal the Gabor filter count {}",
                    self.channels[0],
                    g.filters()
                )));
            }
        }
        if let Some(d) = &self.dilations {
            d.validate()?;
        }
        self.infer_spatial()?;
        Ok(())
    }

    /// Spatial extent after each stage; errors if any pooling step does
    /// not divide the extent exactly. This is the build-time shape check.
    pub fn infer_spatial(&self) -> Result<Vec<usize>> {
        let mut h = self.input_size;
        let mut dims = Vec::with_capacity(STAGES);
        for (i, p) in self.pools.iter().enumerate() {
            if p.window == 0 || p.stride == 0 {
                return Err(Error::invalid("pool window and stride must be >= 1"));
            }
            if h < p.window || (h - p.window) % p.stride != 0 {
                return Err(Error::invalid(format!(
                    "stage {} pooling ({}x{} window, stride {}) does not divide spatial extent {}",
                    i + 1,
                    p.window,
                    p.window,
                    p.stride,
                    h
                )));
            }
            h = (h - p.window) / p.stride + 1;
            dims.push(h);
        }
        Ok(dims)
    }
}

enum StageOp {
    Gabor(GaborBank),
    Conv(Conv2dLayer),
}

struct Stage {
    op: StageOp,
    bn: BatchNorm2d,
    pool: PoolCfg,
}

/// Everything a backbone forward pass produces.
pub struct BackboneOutput {
    /// Final feature maps, before global pooling: [B, C_out, h, w].
    pub feature_maps: VarId,
    /// Globally pooled feature vectors: [B, C_out].
    pub features: VarId,
    /// Two-class logits from the standalone head, when one was built.
    pub logits: Option<VarId>,
}

pub struct Backbone {
    pub spec: BackboneSpec,
    /// Mixing coefficients consumed per stage (all 1.0 when mixed pooling
    /// is disabled, i.e. pure max pooling).
    pub alphas: Vec<f64>,
    stages: Vec<Stage>,
    dilated: Option<DilatedBlock>,
    head: Option<Conv2dLayer>,
}

impl Backbone {
    /// Builds the backbone under `prefix.*` parameter names. `with_head`
    /// attaches the linear-over-GAP two-class classifier used standalone;
    /// fusion branches are built without it.
    pub fn new<R: Rng>(
        spec: BackboneSpec,
        store: &mut ParamStore,
        prefix: &str,
        with_head: bool,
        rng: &mut R,
    ) -> Result<Backbone> {
        spec.validate()?;
        let mut stages = Vec::with_capacity(STAGES);
        let mut cin = 3;
        for i in 0..STAGES {
            let cout = spec.channels[i];
            let name = format!("{prefix}.stage{}", i + 1);
            let op = if i == 0 && spec.gabor.is_some() {
                let bank = GaborBank::init(store, &format!("{name}.gabor"), spec.gabor.unwrap(), rng)?;
                StageOp::Gabor(bank)
            } else {
                let k = spec.kernel_size;
                StageOp::Conv(Conv2dLayer::init(
                    store,
                    &format!("{name}.conv"),
                    cin,
                    cout,
                    k,
                    1,
                    (k - 1) / 2,
                    1,
                    rng,
                )?)
            };
            let bn = BatchNorm2d::init(store, &format!("{name}.bn"), cout, spec.bn_eps, spec.bn_momentum)?;
            stages.push(Stage {
                op,
                bn,
                pool: spec.pools[i],
            });
            cin = cout;
        }
        let dilated = match &spec.dilations {
            Some(set) => Some(DilatedBlock::init(
                store,
                &format!("{prefix}.dilated"),
                spec.feature_dim(),
                set,
                rng,
            )?),
            None => None,
        };
        let head = if with_head {
            Some(Conv2dLayer::init(
                store,
                &format!("{prefix}.head"),
                spec.feature_dim(),
                2,
                1,
                1,
                0,
                1,
                rng,
            )?)
        } else {
            None
        };
        let alphas = if spec.mix_pool {
            alpha_schedule(STAGES)
        } else {
            vec![1.0; STAGES]
        };
        Ok(Backbone {
            spec,
            alphas,
            stages,
            dilated,
            head,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &mut ParamStore, x: VarId, mode: Mode) -> Result<BackboneOutput> {
        let mut h = x;
        for (i, stage) in self.stages.iter().enumerate() {
            h = match &stage.op {
                StageOp::Gabor(bank) => bank.forward(tape, store, h)?,
                StageOp::Conv(conv) => conv.forward(tape, store, h)?,
            };
            h = tape.relu(h)?;
            h = if self.spec.mix_pool {
                mix_pool(tape, h, self.alphas[i], stage.pool.window, stage.pool.stride)?
            } else {
                tape.pool2d(h, PoolMode::Max, stage.pool.window, stage.pool.stride)?
            };
            h = stage.bn.forward(tape, store, h, mode)?;
        }
        if let Some(block) = &self.dilated {
            h = block.forward(tape, store, h)?;
        }
        let feature_maps = h;
        let pooled = tape.global_avg_pool(feature_maps)?;
        let b = tape.shape(pooled)[0];
        let c = self.spec.feature_dim();
        let features = tape.reshape(pooled, vec![b, c])?;
        let logits = match &self.head {
            Some(head) => {
                let z = head.forward(tape, store, pooled)?;
                Some(tape.reshape(z, vec![b, 2])?)
            }
            None => None,
        };
        Ok(BackboneOutput {
            feature_maps,
            features,
            logits,
        })
    }

    /// Name of the head weight parameter (used by CAM generation).
    pub fn head_weight_name(prefix: &str) -> String {
        format!("{prefix}.head.weight")
    }
}
