//! Channel attention over fused multi-branch features.
//!
//! Average- and max-pooled channel descriptors pass through a shared
//! two-layer MLP; the summed responses are squashed by a sigmoid into
//! per-channel gates `A` in (0,1), applied residually as `F + F .* A`.

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Tape, Tensor, VarId};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(deny_unknown_fields)]
pub struct AttentionSpec {
    pub channels: usize,
    pub reduction: usize,
}

impl AttentionSpec {
    pub fn new(channels: usize, reduction: usize) -> Result<Self> {
        let spec = AttentionSpec { channels, reduction };
        spec.validate()?;
        Ok(spec)
    }

    pub fn hidden(&self) -> usize {
        self.channels / self.reduction
    }

    pub fn validate(&self) -> Result<()> {
        if self.reduction == 0 || self.channels == 0 {
            return Err(Error::invalid("attention channels and reduction must be positive"));
        }
        if self.channels % self.reduction != 0 {
            return Err(Error::invalid(format!(
                "attention channels {} not divisible by reduction {}",
                self.channels, self.reduction
            )));
        }
        if self.hidden() < 1 {
            return Err(Error::invalid("attention hidden width must be >= 1"));
        }
        Ok(())
    }
}

/// Shared-MLP channel attention with a residual connection.
#[derive(Debug, Clone)]
pub struct ChannelAttention {
    pub spec: AttentionSpec,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl ChannelAttention {
    pub fn init<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        spec: AttentionSpec,
        rng: &mut R,
    ) -> Result<ChannelAttention> {
        spec.validate()?;
        let (c, h) = (spec.channels, spec.hidden());
        let mut randn = |n: usize, std: f64| -> Vec<f64> {
            (0..n)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(rng);
                    z * std
                })
                .collect()
        };
        let w1 = randn(h * c, (2.0 / c as f64).sqrt());
        let w2 = randn(c * h, (2.0 / h as f64).sqrt());
        Ok(ChannelAttention {
            spec,
            w1: store.add(format!("{prefix}.w1"), Tensor::from_vec(vec![h, c], w1)?, true)?,
            b1: store.add(format!("{prefix}.b1"), Tensor::zeros(vec![h]), true)?,
            w2: store.add(format!("{prefix}.w2"), Tensor::from_vec(vec![c, h], w2)?, true)?,
            b2: store.add(format!("{prefix}.b2"), Tensor::zeros(vec![c]), true)?,
        })
    }

    /// The two 1x1 stages applied to a [B,C,1,1] descriptor; weights are
    /// shared between the average and max paths by binding the same
    /// parameters twice.
    fn mlp(&self, tape: &mut Tape, store: &ParamStore, descriptor: VarId) -> Result<VarId> {
        let b = tape.shape(descriptor)[0];
        let c = self.spec.channels;
        let flat = tape.reshape(descriptor, vec![b, c])?;
        let w1 = tape.param(store, self.w1);
        let b1 = tape.param(store, self.b1);
        let h = tape.linear(flat, w1, Some(b1))?;
        let h = tape.relu(h)?;
        let w2 = tape.param(store, self.w2);
        let b2 = tape.param(store, self.b2);
        tape.linear(h, w2, Some(b2))
    }

    /// Gate values `A = sigmoid(mlp(avgpool(F)) + mlp(maxpool(F)))`,
    /// shape [B,C,1,1].
    pub fn gates(&self, tape: &mut Tape, store: &ParamStore, f: VarId) -> Result<VarId> {
        let s = tape.shape(f);
        if s.len() != 4 || s[1] != self.spec.channels {
            return Err(Error::shape_mismatch(
                "channel_attention input channels",
                s,
                &[self.spec.channels],
            ));
        }
        let b = s[0];
        let avg = tape.global_avg_pool(f)?;
        let mx = tape.global_max_pool(f)?;
        let za = self.mlp(tape, store, avg)?;
        let zm = self.mlp(tape, store, mx)?;
        let z = tape.add(za, zm)?;
        let a = tape.sigmoid(z)?;
        tape.reshape(a, vec![b, self.spec.channels, 1, 1])
    }

    /// `F_refined = F + F .* A` with the gates broadcast over space.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, f: VarId) -> Result<VarId> {
        let a = self.gates(tape, store, f)?;
        let s = tape.shape(f).to_vec();
        let a_full = tape.broadcast_spatial(a, s[2], s[3])?;
        let gated = tape.mul(f, a_full)?;
        tape.add(f, gated)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn attention_with_zero_weights(c: usize, r: usize) -> (ParamStore, ChannelAttention) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let att = ChannelAttention::init(&mut store, "att", AttentionSpec::new(c, r).unwrap(), &mut rng).unwrap();
        for id in [att.w1, att.b1, att.w2, att.b2] {
            store.tensor_mut(id).data_mut().fill(0.0);
        }
        (store, att)
    }

    #[test]
    fn zero_weights_give_half_gates_and_one_and_a_half_scaling() {
        let (store, att) = attention_with_zero_weights(8, 4);
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = Tensor::rand_uniform(vec![2, 8, 3, 3], -1.0, 1.0, &mut rng);
        let fid = tape.leaf(&f);
        let gates = att.gates(&mut tape, &store, fid).unwrap();
        assert!(tape.data(gates).iter().all(|&a| a == 0.5));
        let refined = att.forward(&mut tape, &store, fid).unwrap();
        for (r, x) in tape.data(refined).iter().zip(f.data()) {
            assert!((r - 1.5 * x).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_input_stays_zero() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let att = ChannelAttention::init(&mut store, "att", AttentionSpec::new(8, 4).unwrap(), &mut rng).unwrap();
        let mut tape = Tape::new();
        let f = tape.constant(vec![1, 8, 2, 2], vec![0.0; 32]).unwrap();
        let refined = att.forward(&mut tape, &store, f).unwrap();
        assert!(tape.data(refined).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gates_strictly_inside_unit_interval() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let att = ChannelAttention::init(&mut store, "att", AttentionSpec::new(12, 4).unwrap(), &mut rng).unwrap();
        let mut tape = Tape::new();
        let f = Tensor::rand_uniform(vec![3, 12, 4, 4], -2.0, 2.0, &mut rng);
        let fid = tape.leaf(&f);
        let gates = att.gates(&mut tape, &store, fid).unwrap();
        assert!(tape.data(gates).iter().all(|&a| a > 0.0 && a < 1.0));
    }

    #[test]
    fn attention_reorders_channel_ranking() {
        // the gating is non-trivial: for some seed the argsort of channel
        // means changes between F and F_refined.
        let c = 6;
        let rank = |v: &[f64]| {
            let mut idx: Vec<usize> = (0..c).collect();
            idx.sort_by(|&a, &b| v[a].partial_cmp(&v[b]).unwrap());
            idx
        };
        let mut found = false;
        for seed in 0..20 {
            let mut store = ParamStore::new();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let att = ChannelAttention::init(&mut store, "att", AttentionSpec::new(c, 2).unwrap(), &mut rng).unwrap();
            let mut tape = Tape::new();
            let f = Tensor::rand_uniform(vec![1, c, 4, 4], 0.0, 1.0, &mut rng);
            let fid = tape.leaf(&f);
            let refined = att.forward(&mut tape, &store, fid).unwrap();
            let mean_of = |data: &[f64]| -> Vec<f64> {
                (0..c).map(|ci| data[ci * 16..(ci + 1) * 16].iter().sum::<f64>() / 16.0).collect()
            };
            if rank(&mean_of(tape.data(fid))) != rank(&mean_of(tape.data(refined))) {
                found = true;
                break;
            }
        }
        assert!(found, "no seed produced a channel re-ranking");
    }

    #[test]
    fn channel_mismatch_rejected() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let att = ChannelAttention::init(&mut store, "att", AttentionSpec::new(8, 4).unwrap(), &mut rng).unwrap();
        let mut tape = Tape::new();
        let f = tape.constant(vec![1, 6, 2, 2], vec![0.0; 24]).unwrap();
        assert!(att.forward(&mut tape, &store, f).is_err());
    }

    #[test]
    fn indivisible_reduction_rejected() {
        assert!(AttentionSpec::new(10, 4).is_err());
        assert!(AttentionSpec::new(8, 4).is_ok());
    }
}
