//! Shared layer building blocks: plain conv layers and batch norm with
//! running statistics.

use crate::error::Result;
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Tape, Tensor, VarId};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// Forward mode: train mode normalises with batch statistics and updates
/// the running buffers, eval mode uses the stored running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone)]
pub struct Conv2dLayer {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl Conv2dLayer {
    /// He-initialised convolution with zero bias.
    #[allow(clippy::too_many_arguments)]
    pub fn init<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        padding: usize,
        dilation: usize,
        rng: &mut R,
    ) -> Result<Conv2dLayer> {
        let std = (2.0 / (cin * k * k) as f64).sqrt();
        let data: Vec<f64> = (0..cout * cin * k * k)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                z * std
            })
            .collect();
        let weight = store.add(
            format!("{prefix}.weight"),
            Tensor::from_vec(vec![cout, cin, k, k], data)?,
            true,
        )?;
        let bias = store.add(format!("{prefix}.bias"), Tensor::zeros(vec![cout]), true)?;
        Ok(Conv2dLayer {
            weight,
            bias: Some(bias),
            stride,
            padding,
            dilation,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: VarId) -> Result<VarId> {
        let w = tape.param(store, self.weight);
        let b = self.bias.map(|b| tape.param(store, b));
        tape.conv2d(x, w, b, self.stride, self.padding, self.dilation)
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm2d {
    pub fn init(store: &mut ParamStore, prefix: &str, channels: usize, eps: f64, momentum: f64) -> Result<BatchNorm2d> {
        Ok(BatchNorm2d {
            gamma: store.add(format!("{prefix}.gamma"), Tensor::filled(vec![channels], 1.0), true)?,
            beta: store.add(format!("{prefix}.beta"), Tensor::zeros(vec![channels]), true)?,
            running_mean: store.add(format!("{prefix}.running_mean"), Tensor::zeros(vec![channels]), false)?,
            running_var: store.add(format!("{prefix}.running_var"), Tensor::filled(vec![channels], 1.0), false)?,
            eps,
            momentum,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &mut ParamStore, x: VarId, mode: Mode) -> Result<VarId> {
        let gamma = tape.param(store, self.gamma);
        let beta = tape.param(store, self.beta);
        match mode {
            Mode::Train => {
                let (out, stats) = tape.batch_norm_train(x, gamma, beta, self.eps)?;
                let m = self.momentum;
                let rm = store.tensor_mut(self.running_mean).data_mut();
                for (r, b) in rm.iter_mut().zip(&stats.mean) {
                    *r = (1.0 - m) * *r + m * b;
                }
                let rv = store.tensor_mut(self.running_var).data_mut();
                for (r, b) in rv.iter_mut().zip(&stats.var) {
                    *r = (1.0 - m) * *r + m * b;
                }
                Ok(out)
            }
            Mode::Eval => {
                let rm = store.tensor(self.running_mean).data().to_vec();
                let rv = store.tensor(self.running_var).data().to_vec();
                tape.batch_norm_eval(x, gamma, beta, self.eps, &rm, &rv)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn train_mode_updates_running_statistics() {
        let mut store = ParamStore::new();
        let bn = BatchNorm2d::init(&mut store, "bn", 2, 1e-5, 0.1).unwrap();
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::rand_uniform(vec![4, 2, 3, 3], -2.0, 2.0, &mut rng);
        let xid = tape.leaf(&x);
        bn.forward(&mut tape, &mut store, xid, Mode::Train).unwrap();
        let rm = store.tensor(bn.running_mean).data();
        assert!(rm.iter().any(|&v| v != 0.0));
    }

    #[test]
    fn eval_mode_is_affine_in_running_stats() {
        let mut store = ParamStore::new();
        let bn = BatchNorm2d::init(&mut store, "bn", 1, 1e-5, 0.1).unwrap();
        store.tensor_mut(bn.running_mean).data_mut()[0] = 1.0;
        store.tensor_mut(bn.running_var).data_mut()[0] = 4.0;
        let mut tape = Tape::new();
        let x = tape.constant(vec![1, 1, 1, 2], vec![3.0, 5.0]).unwrap();
        let out = bn.forward(&mut tape, &mut store, x, Mode::Eval).unwrap();
        let inv = 1.0 / (4.0f64 + 1e-5).sqrt();
        assert!((tape.data(out)[0] - 2.0 * inv).abs() < 1e-12);
        assert!((tape.data(out)[1] - 4.0 * inv).abs() < 1e-12);
    }
}
