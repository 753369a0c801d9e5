//! Class activation maps for backbones with a linear-over-GAP head.
//!
//! The heatmap is the head-weight-weighted sum of the final feature maps
//! for the predicted class, bilinearly upsampled to chip size and
//! min-max normalised into [0,1]. A constant map has no min-max
//! normalisation; that degenerate case is defined as all zeros.

use crate::data::{Chip, Label};
use crate::error::{Error, Result};
use crate::model::{Model, BACKBONE_PREFIX};
use crate::nn::Mode;
use crate::params::ParamStore;
use crate::tensor::Tape;

#[derive(Debug, Clone)]
pub struct CamResult {
    /// Normalised heatmap at chip resolution, row-major.
    pub heatmap: Vec<f64>,
    pub h: usize,
    pub w: usize,
    pub predicted: Label,
    /// True when the raw map was constant and the zero rule applied.
    pub degenerate: bool,
}

pub fn compute_cam(model: &Model, store: &mut ParamStore, chip: &Chip) -> Result<CamResult> {
    let backbone = match model {
        Model::Backbone(b) => b,
        Model::Fusion(_) => return Err(Error::CamUndefinedForFusionHead),
    };
    let mut tape = Tape::new();
    let n = chip.h;
    let data: Vec<f64> = chip.pixels.iter().map(|&p| p as f64).collect();
    let x = tape.constant(vec![1, 3, n, n], data)?;
    let out = backbone.forward(&mut tape, store, x, Mode::Eval)?;
    let logits = tape.data(out.logits.ok_or_else(|| Error::invalid("backbone lacks a classifier head"))?);
    let predicted = if logits[0] >= logits[1] { Label::Cement } else { Label::Landcover };

    let maps_shape = tape.shape(out.feature_maps).to_vec();
    let (c, sh, sw) = (maps_shape[1], maps_shape[2], maps_shape[3]);
    let maps = tape.data(out.feature_maps);

    let head_w = store
        .id_by_name(&format!("{BACKBONE_PREFIX}.head.weight"))
        .ok_or_else(|| Error::invalid("head weights not found for CAM"))?;
    let wrow_base = predicted.index() * c;
    let weights = &store.tensor(head_w).data()[wrow_base..wrow_base + c];

    let mut small = vec![0.0; sh * sw];
    for ci in 0..c {
        let wv = weights[ci];
        let plane = &maps[ci * sh * sw..(ci + 1) * sh * sw];
        for (s, m) in small.iter_mut().zip(plane) {
            *s += wv * m;
        }
    }
    let up = bilinear_upsample(&small, sh, sw, n, n);
    let (heatmap, degenerate) = min_max_normalise(&up);
    Ok(CamResult {
        heatmap,
        h: n,
        w: n,
        predicted,
        degenerate,
    })
}

/// Bilinear upsampling with half-pixel centre alignment.
pub fn bilinear_upsample(src: &[f64], sh: usize, sw: usize, dh: usize, dw: usize) -> Vec<f64> {
    let mut out = vec![0.0; dh * dw];
    let scale_y = sh as f64 / dh as f64;
    let scale_x = sw as f64 / dw as f64;
    for y in 0..dh {
        let fy = ((y as f64 + 0.5) * scale_y - 0.5).clamp(0.0, (sh - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(sh - 1);
        let ty = fy - y0 as f64;
        for x in 0..dw {
            let fx = ((x as f64 + 0.5) * scale_x - 0.5).clamp(0.0, (sw - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(sw - 1);
            let tx = fx - x0 as f64;
            let top = src[y0 * sw + x0] * (1.0 - tx) + src[y0 * sw + x1] * tx;
            let bot = src[y1 * sw + x0] * (1.0 - tx) + src[y1 * sw + x1] * tx;
            out[y * dw + x] = top * (1.0 - ty) + bot * ty;
        }
    }
    out
}

fn min_max_normalise(v: &[f64]) -> (Vec<f64>, bool) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &x in v {
        lo = lo.min(x);
        hi = hi.max(x);
    }
    if hi <= lo {
        return (vec![0.0; v.len()], true);
    }
    let span = hi - lo;
    (v.iter().map(|&x| (x - lo) / span).collect(), false)
}

/// 16-bit binary PGM (maxval 65535, big-endian samples) of a [0,1] map.
pub fn pgm16_bytes(map: &[f64], h: usize, w: usize) -> Vec<u8> {
    let mut out = format!("P5\n{w} {h}\n65535\n").into_bytes();
    for &v in map {
        let q = (v.clamp(0.0, 1.0) * 65535.0).round() as u16;
        out.extend_from_slice(&q.to_be_bytes());
    }
    out
}

/// Raw little-endian f32 sidecar of the same map.
pub fn f32_raw_bytes(map: &[f64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(map.len() * 4);
    for &v in map {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

/// Attention-weighted activation map of one fusion branch: the branch's
/// final feature maps combined with its slice of the channel-attention
/// gates. Not class-specific (the fused head has no linear class
/// weights over branch maps); exposed for qualitative inspection.
pub fn branch_attention_map(
    model: &Model,
    store: &mut ParamStore,
    chips: &[Chip; 5],
    branch: usize,
) -> Result<CamResult> {
    let net = match model {
        Model::Fusion(f) => f,
        Model::Backbone(_) => return Err(Error::invalid("branch maps only exist for fusion models")),
    };
    if branch >= 5 {
        return Err(Error::invalid(format!("branch index {branch} outside 0..5")));
    }
    let n = chips[0].h;
    let mut tape = Tape::new();
    let inputs: [crate::tensor::VarId; 5] = {
        let mut ids = [0; 5];
        for (i, chip) in chips.iter().enumerate() {
            let data: Vec<f64> = chip.pixels.iter().map(|&p| p as f64).collect();
            ids[i] = tape.constant(vec![1, 3, n, n], data)?;
        }
        ids
    };
    let out = net.forward(&mut tape, store, &inputs, Mode::Eval)?;
    let logits = tape.data(out.logits);
    let predicted = if logits[0] >= logits[1] { Label::Cement } else { Label::Landcover };

    let f = net.spec.branch.feature_dim();
    let gates = tape.data(out.gates)[branch * f..(branch + 1) * f].to_vec();
    let maps_shape = tape.shape(out.branch_maps[branch]).to_vec();
    let (sh, sw) = (maps_shape[2], maps_shape[3]);
    let maps = tape.data(out.branch_maps[branch]);
    let mut small = vec![0.0; sh * sw];
    for ci in 0..f {
        let g = gates[ci];
        let plane = &maps[ci * sh * sw..(ci + 1) * sh * sw];
        for (s, m) in small.iter_mut().zip(plane) {
            *s += g * m;
        }
    }
    let up = bilinear_upsample(&small, sh, sw, n, n);
    let (heatmap, degenerate) = min_max_normalise(&up);
    Ok(CamResult {
        heatmap,
        h: n,
        w: n,
        predicted,
        degenerate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_map_yields_all_zeros() {
        let (v, degenerate) = min_max_normalise(&[0.7; 9]);
        assert!(degenerate);
        assert!(v.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn normalised_range_is_exactly_zero_to_one() {
        let (v, degenerate) = min_max_normalise(&[2.0, 5.0, 3.5]);
        assert!(!degenerate);
        assert_eq!(v[0], 0.0);
        assert_eq!(v[1], 1.0);
        assert!(v[2] > 0.0 && v[2] < 1.0);
    }

    #[test]
    fn upsampling_a_constant_is_constant() {
        let up = bilinear_upsample(&[3.0; 4], 2, 2, 8, 8);
        assert!(up.iter().all(|&v| (v - 3.0).abs() < 1e-12));
    }

    #[test]
    fn upsampling_preserves_a_gradient_direction() {
        let up = bilinear_upsample(&[0.0, 1.0, 0.0, 1.0], 2, 2, 8, 8);
        for y in 0..8 {
            for x in 1..8 {
                assert!(up[y * 8 + x] >= up[y * 8 + x - 1]);
            }
        }
    }

    #[test]
    fn cam_range_is_exactly_unit_or_all_zero() {
        use crate::backbone::{BackboneSpec, PoolCfg};
        use crate::data::{BandId, Chip, ChipSource, Label};
        use crate::model::{Model, ModelSpec};
        use crate::params::ParamStore;
        use crate::tensor::Tensor;
        use rand::SeedableRng;

        let mut spec = BackboneSpec::cnn5(16);
        spec.channels = [4, 4, 4, 4, 4];
        spec.pools = [
            PoolCfg { window: 2, stride: 2 },
            PoolCfg { window: 2, stride: 2 },
            PoolCfg { window: 1, stride: 1 },
            PoolCfg { window: 1, stride: 1 },
            PoolCfg { window: 1, stride: 1 },
        ];
        let mut store = ParamStore::new();
        let model = Model::build(&ModelSpec::Backbone(spec), &mut store, 3).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let t = Tensor::rand_uniform(vec![3 * 16 * 16], -1.0, 1.0, &mut rng);
        let chip = Chip::new(
            t.data().iter().map(|&v| v as f32).collect(),
            16,
            16,
            Label::Cement,
            BandId::B10,
            ChipSource::Synthetic { seed: 0 },
        )
        .unwrap();
        let cam = compute_cam(&model, &mut store, &chip).unwrap();
        if cam.degenerate {
            assert!(cam.heatmap.iter().all(|&v| v == 0.0));
        } else {
            let lo = cam.heatmap.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = cam.heatmap.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            assert_eq!((lo, hi), (0.0, 1.0));
        }
    }

    #[test]
    fn fusion_checkpoint_has_no_class_activation_map() {
        use crate::backbone::BackboneSpec;
        use crate::data::{BandId, Chip, ChipSource, Label};
        use crate::fusion::FusionSpec;
        use crate::gabor::GaborConfig;
        use crate::model::{Model, ModelSpec};
        use crate::params::ParamStore;

        let mut branch = BackboneSpec::dgcnn(32);
        branch.channels = [4, 4, 4, 4, 4];
        branch.gabor = Some(GaborConfig { n_freq: 2, n_orient: 2, kernel_size: 5 });
        let mut fspec = FusionSpec::new(branch);
        fspec.head_widths = vec![8, 8, 8, 8, 2];
        let mut store = ParamStore::new();
        let model = Model::build(&ModelSpec::Fusion(fspec), &mut store, 1).unwrap();
        let chip = Chip::new(
            vec![0.0; 3 * 32 * 32],
            32,
            32,
            Label::Cement,
            BandId::B10,
            ChipSource::Synthetic { seed: 0 },
        )
        .unwrap();
        let err = compute_cam(&model, &mut store, &chip).unwrap_err();
        assert_eq!(err.to_string(), "CAM undefined for fusion head");
    }

    #[test]
    fn pgm_header_and_sample_encoding() {
        let bytes = pgm16_bytes(&[0.0, 1.0], 1, 2);
        let header_end = bytes.len() - 4;
        assert_eq!(&bytes[..header_end], b"P5\n2 1\n65535\n");
        assert_eq!(&bytes[header_end..], &[0, 0, 0xFF, 0xFF]);
    }
}
