//! Intermediate fusion of five band-specific backbones.
//!
//! Each branch digests one spectral input into a pooled feature vector;
//! the vectors are concatenated channel-wise, recalibrated by channel
//! attention and classified by a stack of 1x1 conv stages (the fused
//! tensor is 1x1 spatial, so the five-stage head operates as affine
//! layers with ReLU and batch norm in between).

use crate::attention::{AttentionSpec, ChannelAttention};
use crate::backbone::{Backbone, BackboneSpec};
use crate::data::BandId;
use crate::error::{Error, Result};
use crate::nn::{BatchNorm2d, Conv2dLayer, Mode};
use crate::params::ParamStore;
use crate::tensor::{Tape, VarId};
use rand::Rng;
use serde::{Deserialize, Serialize};

fn default_reduction() -> usize {
    4
}

fn default_head_widths() -> Vec<usize> {
    vec![512, 256, 128, 64, 2]
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct FusionSpec {
    /// Architecture shared by all five branches.
    pub branch: BackboneSpec,
    /// Channel-attention reduction ratio over the fused width.
    #[serde(default = "default_reduction")]
    pub reduction: usize,
    /// Output widths of the five 1x1 head stages; the last must be 2.
    #[serde(default = "default_head_widths")]
    pub head_widths: Vec<usize>,
}

impl FusionSpec {
    pub fn new(branch: BackboneSpec) -> Self {
        FusionSpec {
            branch,
            reduction: default_reduction(),
            head_widths: default_head_widths(),
        }
    }

    /// Fixed branch order.
    pub fn bands() -> [BandId; 5] {
        [BandId::B11, BandId::B10, BandId::B7, BandId::B6, BandId::B76]
    }

    /// Fused channel count: five branches of `feature_dim` each.
    pub fn fused_channels(&self) -> usize {
        5 * self.branch.feature_dim()
    }

    pub fn attention_spec(&self) -> Result<AttentionSpec> {
        AttentionSpec::new(self.fused_channels(), self.reduction)
    }

    pub fn validate(&self) -> Result<()> {
        self.branch.validate()?;
        self.attention_spec()?;
        if self.head_widths.last() != Some(&2) {
            return Err(Error::invalid("fusion head must end in 2 output classes"));
        }
        if self.head_widths.iter().any(|&w| w == 0) {
            return Err(Error::invalid("fusion head widths must be positive"));
        }
        Ok(())
    }
}

struct HeadStage {
    conv: Conv2dLayer,
    bn: Option<BatchNorm2d>,
}

#[derive(Debug)]
pub struct FusionOutput {
    /// Pre-attention concatenated features, [B, 5*F, 1, 1].
    pub fused: VarId,
    /// Attention-refined features, same shape.
    pub refined: VarId,
    /// Attention gates, [B, 5*F, 1, 1].
    pub gates: VarId,
    /// Per-branch final feature maps (pre-GAP), in branch order.
    pub branch_maps: Vec<VarId>,
    pub logits: VarId,
}

pub struct FusionNet {
    pub spec: FusionSpec,
    branches: Vec<Backbone>,
    pub attention: ChannelAttention,
    head: Vec<HeadStage>,
}

impl FusionNet {
    pub fn new<R: Rng>(spec: FusionSpec, store: &mut ParamStore, rng: &mut R) -> Result<FusionNet> {
        spec.validate()?;
        let mut branches = Vec::with_capacity(5);
        for band in FusionSpec::bands() {
            branches.push(Backbone::new(
                spec.branch.clone(),
                store,
                &format!("branch_{}", band.key()),
                false,
                rng,
            )?);
        }
        let attention = ChannelAttention::init(store, "attention", spec.attention_spec()?, rng)?;
        let mut head = Vec::with_capacity(spec.head_widths.len());
        let mut cin = spec.fused_channels();
        let last = spec.head_widths.len() - 1;
        for (i, &cout) in spec.head_widths.iter().enumerate() {
            let conv = Conv2dLayer::init(store, &format!("head.stage{}.conv", i + 1), cin, cout, 1, 1, 0, 1, rng)?;
            let bn = if i < last {
                Some(BatchNorm2d::init(
                    store,
                    &format!("head.stage{}.bn", i + 1),
                    cout,
                    spec.branch.bn_eps,
                    spec.branch.bn_momentum,
                )?)
            } else {
                None
            };
            head.push(HeadStage { conv, bn });
            cin = cout;
        }
        Ok(FusionNet {
            spec,
            branches,
            attention,
            head,
        })
    }

    /// Forward over the five band inputs, which must share batch and
    /// spatial extents (checked; mismatches name the offending branch).
    pub fn forward(&self, tape: &mut Tape, store: &mut ParamStore, inputs: &[VarId; 5], mode: Mode) -> Result<FusionOutput> {
        let first = tape.shape(inputs[0]).to_vec();
        for (i, &x) in inputs.iter().enumerate() {
            if tape.shape(x) != first {
                return Err(Error::ShapeMismatch {
                    context: format!("fusion branch {i} input"),
                    lhs: tape.shape(x).to_vec(),
                    rhs: first,
                });
            }
        }
        let mut branch_vecs = Vec::with_capacity(5);
        let mut branch_maps = Vec::with_capacity(5);
        let f = self.spec.branch.feature_dim();
        for (branch, &x) in self.branches.iter().zip(inputs) {
            let out = branch.forward(tape, store, x, mode)?;
            let b = tape.shape(out.features)[0];
            branch_vecs.push(tape.reshape(out.features, vec![b, f, 1, 1])?);
            branch_maps.push(out.feature_maps);
        }
        let fused = tape.concat_channels(&branch_vecs)?;
        let gates = self.attention.gates(tape, store, fused)?;
        let gated = tape.mul(fused, gates)?; // 1x1 spatial: no broadcast needed
        let refined = tape.add(fused, gated)?;
        let mut h = refined;
        for stage in &self.head {
            h = stage.conv.forward(tape, store, h)?;
            if let Some(bn) = &stage.bn {
                h = tape.relu(h)?;
                h = bn.forward(tape, store, h, mode)?;
            }
        }
        let b = tape.shape(h)[0];
        let logits = tape.reshape(h, vec![b, 2])?;
        Ok(FusionOutput {
            fused,
            refined,
            gates,
            branch_maps,
            logits,
        })
    }
}
