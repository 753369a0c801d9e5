//! Mixed pooling and the averaged multi-dilation block.

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{PoolMode, Tape, Tensor, VarId};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

/// Convex combination of max and average pooling:
/// `alpha * max(x) + (1 - alpha) * avg(x)`.
pub fn mix_pool(tape: &mut Tape, x: VarId, alpha: f64, window: usize, stride: usize) -> Result<VarId> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::invalid(format!("mix_pool alpha {alpha} outside [0,1]")));
    }
    let mx = tape.pool2d(x, PoolMode::Max, window, stride)?;
    let av = tape.pool2d(x, PoolMode::Avg, window, stride)?;
    let mx = tape.scale(mx, alpha)?;
    let av = tape.scale(av, 1.0 - alpha)?;
    tape.add(mx, av)
}

/// Per-layer mixing coefficients: pure max pooling at the lowest layer,
/// decreasing by 0.2 per layer and clamped at zero. Built from integer
/// tenths so the canonical 5-layer schedule (1.0, 0.8, 0.6, 0.4, 0.2)
/// is exact.
pub fn alpha_schedule(layers: usize) -> Vec<f64> {
    (1..=layers)
        .map(|l| {
            let tenths = 10_i64 - 2 * (l as i64 - 1);
            tenths.max(0) as f64 / 10.0
        })
        .collect()
}

/// Dilation rates of the multi-receptive-field block: a base rate of 1
/// plus auxiliary rates whose responses are averaged onto the base map.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
#[serde(deny_unknown_fields)]
pub struct DilationSet {
    pub rates: Vec<usize>,
    /// Share one weight tensor across the auxiliary branches instead of
    /// giving each rate its own.
    #[serde(default)]
    pub shared_weights: bool,
}

impl Default for DilationSet {
    fn default() -> Self {
        DilationSet {
            rates: vec![1, 3, 6, 9],
            shared_weights: false,
        }
    }
}

impl DilationSet {
    pub fn validate(&self) -> Result<()> {
        if self.rates.first() != Some(&1) {
            return Err(Error::invalid("dilation set must start with the base rate 1"));
        }
        if self.rates.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid("dilation rates must be strictly ascending"));
        }
        if self.rates.len() < 2 {
            return Err(Error::invalid("dilation set needs at least one auxiliary rate"));
        }
        Ok(())
    }

    pub fn auxiliary_count(&self) -> usize {
        self.rates.len() - 1
    }
}

/// The dilated localisation block: one 3x3 conv -> ReLU branch per rate,
/// each padded to preserve the spatial extent, combined as
/// `base + mean(auxiliary branches)`.
#[derive(Debug, Clone)]
pub struct DilatedBlock {
    pub rates: Vec<usize>,
    weights: Vec<ParamId>,
    biases: Vec<ParamId>,
    k: usize,
}

impl DilatedBlock {
    pub fn init<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        channels: usize,
        set: &DilationSet,
        rng: &mut R,
    ) -> Result<DilatedBlock> {
        set.validate()?;
        let k = 3;
        let std = (2.0 / (channels * k * k) as f64).sqrt();
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        let shared = if set.shared_weights {
            // auxiliary branches reuse one tensor; the base branch keeps its own
            let w: Vec<f64> = (0..channels * channels * k * k)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(rng);
                    z * std
                })
                .collect();
            Some((
                store.add(
                    format!("{prefix}.aux.weight"),
                    Tensor::from_vec(vec![channels, channels, k, k], w)?,
                    true,
                )?,
                store.add(format!("{prefix}.aux.bias"), Tensor::zeros(vec![channels]), true)?,
            ))
        } else {
            None
        };
        for (i, &rate) in set.rates.iter().enumerate() {
            if i > 0 {
                if let Some((w, b)) = shared {
                    weights.push(w);
                    biases.push(b);
                    continue;
                }
            }
            let w: Vec<f64> = (0..channels * channels * k * k)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(rng);
                    z * std
                })
                .collect();
            weights.push(store.add(
                format!("{prefix}.d{rate}.weight"),
                Tensor::from_vec(vec![channels, channels, k, k], w)?,
                true,
            )?);
            biases.push(store.add(format!("{prefix}.d{rate}.bias"), Tensor::zeros(vec![channels]), true)?);
        }
        Ok(DilatedBlock {
            rates: set.rates.clone(),
            weights,
            biases,
            k,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: VarId) -> Result<VarId> {
        let mut branches = Vec::with_capacity(self.rates.len());
        for (i, &rate) in self.rates.iter().enumerate() {
            let w = tape.param(store, self.weights[i]);
            let b = tape.param(store, self.biases[i]);
            let padding = rate * (self.k - 1) / 2;
            let conv = tape.conv2d(x, w, Some(b), 1, padding, rate)?;
            branches.push(tape.relu(conv)?);
        }
        combine_dilated(tape, &branches)
    }
}

/// `base + mean(auxiliary)` over same-shape localisation maps. The mean is
/// computed with a true division so equal branches stay exact.
pub fn combine_dilated(tape: &mut Tape, branches: &[VarId]) -> Result<VarId> {
    if branches.len() < 2 {
        return Err(Error::invalid("dilated combination needs a base and auxiliaries"));
    }
    let base_shape = tape.shape(branches[0]).to_vec();
    for &b in &branches[1..] {
        if tape.shape(b) != base_shape {
            return Err(Error::invalid(format!(
                "dilated branch shapes diverged: {:?} vs {:?} (padding bug)",
                base_shape,
                tape.shape(b)
            )));
        }
    }
    let mut acc = branches[1];
    for &b in &branches[2..] {
        acc = tape.add(acc, b)?;
    }
    let mean = tape.div_scalar(acc, (branches.len() - 1) as f64)?;
    tape.add(branches[0], mean)
}
