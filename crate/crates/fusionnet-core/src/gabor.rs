//! Trainable Gabor-parameterised convolutional layer.
//!
//! Instead of a free weight tensor, the first DGCNN layer owns four
//! parameter vectors — spatial frequency, orientation, phase and envelope
//! width, one scalar each per filter — and synthesises its kernels from
//! them on every forward pass. Gradients flow through the synthesis back
//! into the four vectors, so the layer trains 4·N scalars regardless of
//! kernel size.

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Tape, Tensor, VarId};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

/// Bank layout and kernel size. The default 5 frequencies x 8 orientations
/// yields 40 filters.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(deny_unknown_fields)]
pub struct GaborConfig {
    pub n_freq: usize,
    pub n_orient: usize,
    /// Odd spatial extent of the synthesised kernels.
    pub kernel_size: usize,
}

impl Default for GaborConfig {
    fn default() -> Self {
        GaborConfig {
            n_freq: 5,
            n_orient: 8,
            kernel_size: 7,
        }
    }
}

impl GaborConfig {
    pub fn filters(&self) -> usize {
        self.n_freq * self.n_orient
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_freq < 1 || self.n_orient < 1 {
            return Err(Error::invalid("gabor bank needs n_freq, n_orient >= 1"));
        }
        if self.kernel_size % 2 == 0 || self.kernel_size == 0 {
            return Err(Error::invalid(format!(
                "gabor kernel size must be odd, got {}",
                self.kernel_size
            )));
        }
        Ok(())
    }
}

/// Frequency of bank row `n` (1-based): `(pi/2) * sqrt(2)^-(n-1)`.
pub fn bank_frequency(n: usize) -> f64 {
    (PI / 2.0) * 2.0_f64.powf(-((n - 1) as f64) / 2.0)
}

/// Orientation of bank column `m` (1-based): `(pi/8) * (m-1)` scaled to
/// the configured orientation count (`pi / n_orient` spacing).
pub fn bank_orientation(m: usize, n_orient: usize) -> f64 {
    PI / n_orient as f64 * (m - 1) as f64
}

/// Handles to the four trainable parameter vectors of one bank.
#[derive(Debug, Clone)]
pub struct GaborBank {
    pub config: GaborConfig,
    pub omega: ParamId,
    pub theta: ParamId,
    pub psi: ParamId,
    pub sigma: ParamId,
}

impl GaborBank {
    /// Registers a freshly initialised bank:
    /// filter (n, m) carries frequency `omega_n` and orientation `theta_m`,
    /// the envelope width starts at `pi / omega_n` and the phase is drawn
    /// from Unif(0, pi). Filters are laid out frequency-major.
    pub fn init<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        config: GaborConfig,
        rng: &mut R,
    ) -> Result<GaborBank> {
        config.validate()?;
        let n = config.filters();
        let mut omega = Vec::with_capacity(n);
        let mut theta = Vec::with_capacity(n);
        let mut sigma = Vec::with_capacity(n);
        for fi in 1..=config.n_freq {
            let w = bank_frequency(fi);
            for oi in 1..=config.n_orient {
                omega.push(w);
                theta.push(bank_orientation(oi, config.n_orient));
                sigma.push(PI / w);
            }
        }
        let psi: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..PI)).collect();
        Ok(GaborBank {
            config,
            omega: store.add(format!("{prefix}.omega"), Tensor::from_vec(vec![n], omega)?, true)?,
            theta: store.add(format!("{prefix}.theta"), Tensor::from_vec(vec![n], theta)?, true)?,
            psi: store.add(format!("{prefix}.psi"), Tensor::from_vec(vec![n], psi)?, true)?,
            sigma: store.add(format!("{prefix}.sigma"), Tensor::from_vec(vec![n], sigma)?, true)?,
        })
    }

    /// Synthesises the [N,1,k,k] kernel stack from the current parameters.
    pub fn kernels(&self, tape: &mut Tape, store: &ParamStore) -> Result<VarId> {
        let omega = tape.param(store, self.omega);
        let theta = tape.param(store, self.theta);
        let psi = tape.param(store, self.psi);
        let sigma = tape.param(store, self.sigma);
        tape.gabor_kernel(omega, theta, psi, sigma, self.config.kernel_size)
    }

    /// Applies the bank to a [B,Cin,H,W] input with padding `(k-1)/2` so the
    /// spatial extent is preserved. One 2-D kernel per output filter, shared
    /// across input channels: the response is the convolution of the
    /// channel-summed input with each kernel.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: VarId) -> Result<VarId> {
        let kernels = self.kernels(tape, store)?;
        let summed = tape.channel_sum(x)?;
        let padding = (self.config.kernel_size - 1) / 2;
        tape.conv2d(summed, kernels, None, 1, padding, 1)
    }
}

/// Convenience for tests and the standalone kernel check: evaluates one
/// kernel without a tape.
pub fn gabor_kernel_values(omega: f64, theta: f64, psi: f64, sigma: f64, k: usize) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let om = tape.constant(vec![1], vec![omega])?;
    let th = tape.constant(vec![1], vec![theta])?;
    let ps = tape.constant(vec![1], vec![psi])?;
    let sg = tape.constant(vec![1], vec![sigma])?;
    let id = tape.gabor_kernel(om, th, ps, sg, k)?;
    Ok(tape.data(id).to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::ChaCha8Rng;
    use rand::SeedableRng;

    #[test]
    fn centre_value_is_cos_psi() {
        for (omega, theta, psi, sigma) in [
            (1.3, 0.4, 0.0, 2.0),
            (0.7, 2.1, 1.1, 3.5),
            (2.2, -0.6, 2.9, 0.8),
        ] {
            let k = 5;
            let kern = gabor_kernel_values(omega, theta, psi, sigma, k).unwrap();
            let centre = kern[(k / 2) * k + k / 2];
            assert!((centre - psi.cos()).abs() < 1e-15, "{centre} vs {}", psi.cos());
        }
    }

    #[test]
    fn point_evaluation_matches_closed_form() {
        // omega=pi/2, theta=0, psi=0, sigma=2 at grid point (x,y)=(2,0):
        // exp(-4/8) * cos(pi) = -e^{-1/2}.
        let k = 5;
        let kern = gabor_kernel_values(PI / 2.0, 0.0, 0.0, 2.0, k).unwrap();
        let c = k / 2;
        let v = kern[c * k + (c + 2)];
        let expected = -(-0.5_f64).exp();
        assert!((v - expected).abs() < 1e-12, "{v} vs {expected}");
        assert!((expected + 0.60653).abs() < 1e-5);
    }

    #[test]
    fn bank_initialisation_follows_lattice() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let bank = GaborBank::init(&mut store, "g", GaborConfig::default(), &mut rng).unwrap();
        let omega = store.tensor(bank.omega).data();
        let theta = store.tensor(bank.theta).data();
        let sigma = store.tensor(bank.sigma).data();
        // frequency-major layout: filter (n,m) at index (n-1)*8 + (m-1)
        assert!((omega[0] - PI / 2.0).abs() < 1e-12);
        assert!((omega[2 * 8] - PI / 4.0).abs() < 1e-12);
        assert!((omega[4 * 8] - PI / 8.0).abs() < 1e-12);
        assert!((theta[0] - 0.0).abs() < 1e-12);
        assert!((theta[7] - 7.0 * PI / 8.0).abs() < 1e-12);
        assert!((sigma[0] - 2.0).abs() < 1e-12);
        let psi = store.tensor(bank.psi).data();
        assert!(psi.iter().all(|&p| (0.0..PI).contains(&p)));
    }

    #[test]
    fn psi_draw_is_deterministic_per_seed() {
        let draw = |seed: u64| {
            let mut store = ParamStore::new();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let bank = GaborBank::init(&mut store, "g", GaborConfig::default(), &mut rng).unwrap();
            store.tensor(bank.psi).data().to_vec()
        };
        assert_eq!(draw(3), draw(3));
        assert_ne!(draw(3), draw(4));
    }

    #[test]
    fn quarter_turn_permutes_the_grid() {
        // Rotating the orientation by pi/2 equals evaluating the original
        // kernel at (x,y) -> (y,-x); the Gaussian envelope is isotropic.
        let k = 7;
        let (omega, psi, sigma) = (1.1, 0.6, 2.3);
        for theta in [0.0, 0.37, 1.9] {
            let a = gabor_kernel_values(omega, theta, psi, sigma, k).unwrap();
            let b = gabor_kernel_values(omega, theta + PI / 2.0, psi, sigma, k).unwrap();
            for r in 0..k {
                for q in 0..k {
                    // (x,y) = (q-c, r-c); source point (y,-x) lives at
                    // row (k-1-q), column r.
                    let src = a[(k - 1 - q) * k + r];
                    assert!(
                        (b[r * k + q] - src).abs() < 1e-12,
                        "theta={theta} r={r} q={q}: {} vs {src}",
                        b[r * k + q]
                    );
                }
            }
        }
    }

    #[test]
    fn phase_is_two_pi_periodic() {
        let k = 7;
        let a = gabor_kernel_values(0.9, 0.8, 0.3, 1.7, k).unwrap();
        let b = gabor_kernel_values(0.9, 0.8, 0.3 + 2.0 * PI, 1.7, k).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn resynthesis_is_pure() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let bank = GaborBank::init(&mut store, "g", GaborConfig::default(), &mut rng).unwrap();
        let mut t1 = Tape::new();
        let k1 = bank.kernels(&mut t1, &store).unwrap();
        let mut t2 = Tape::new();
        let k2 = bank.kernels(&mut t2, &store).unwrap();
        assert_eq!(t1.data(k1), t2.data(k2));
    }

    #[test]
    fn training_step_moves_psi_and_kernels_stay_pure_resyntheses() {
        use crate::tensor::adam::{AdamConfig, AdamState};
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let cfg = GaborConfig {
            n_freq: 2,
            n_orient: 2,
            kernel_size: 5,
        };
        let bank = GaborBank::init(&mut store, "g", cfg, &mut rng).unwrap();
        let psi_before = store.tensor(bank.psi).data().to_vec();

        // a loss that depends on psi: the squared kernel mass
        let mut tape = Tape::new();
        let kernels = bank.kernels(&mut tape, &store).unwrap();
        let sq = tape.mul(kernels, kernels).unwrap();
        let loss = tape.sum(sq).unwrap();
        tape.backward(loss).unwrap();
        tape.write_param_grads(&mut store);
        let mut adam = AdamState::new(AdamConfig::default());
        adam.step(&mut store).unwrap();

        let psi_after = store.tensor(bank.psi).data().to_vec();
        assert_ne!(psi_before, psi_after, "psi must move under the update");

        // the re-synthesised kernels equal a direct evaluation at the
        // updated parameters: the only trainable state is the parameters
        let mut tape2 = Tape::new();
        let k2 = bank.kernels(&mut tape2, &store).unwrap();
        for f in 0..cfg.filters() {
            let direct = gabor_kernel_values(
                store.tensor(bank.omega).data()[f],
                store.tensor(bank.theta).data()[f],
                store.tensor(bank.psi).data()[f],
                store.tensor(bank.sigma).data()[f],
                cfg.kernel_size,
            )
            .unwrap();
            let k = cfg.kernel_size * cfg.kernel_size;
            assert_eq!(&tape2.data(k2)[f * k..(f + 1) * k], direct.as_slice());
        }
    }

    #[test]
    fn even_kernel_size_rejected() {
        let err = gabor_kernel_values(1.0, 0.0, 0.0, 2.0, 6).unwrap_err();
        assert!(err.to_string().contains("odd"));
    }

    #[test]
    fn singular_envelope_rejected() {
        let err = gabor_kernel_values(1.0, 0.0, 0.0, 0.0, 5).unwrap_err();
        assert!(err.to_string().contains("singular"));
        let err = gabor_kernel_values(1.0, 0.0, 0.0, 1e-4, 5).unwrap_err();
        assert!(err.to_string().contains("singular"));
    }

    #[test]
    fn constant_input_scales_by_kernel_sum() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = GaborConfig {
            n_freq: 2,
            n_orient: 2,
            kernel_size: 5,
        };
        let bank = GaborBank::init(&mut store, "g", cfg, &mut rng).unwrap();
        let mut tape = Tape::new();
        let c = 0.75;
        let cin = 3;
        let h = 9;
        let x = tape.constant(vec![1, cin, h, h], vec![c; cin * h * h]).unwrap();
        let kernels = bank.kernels(&mut tape, &store).unwrap();
        let ksums: Vec<f64> = (0..cfg.filters())
            .map(|f| tape.data(kernels)[f * 25..(f + 1) * 25].iter().sum::<f64>())
            .collect();
        let out = bank.forward(&mut tape, &store, x).unwrap();
        // interior pixels see the full kernel: value = Cin * c * sum(kernel)
        let plane = h * h;
        for (f, ks) in ksums.iter().enumerate() {
            let v = tape.data(out)[f * plane + (h / 2) * h + h / 2];
            let expected = cin as f64 * c * ks;
            assert!((v - expected).abs() < 1e-12, "filter {f}: {v} vs {expected}");
        }
    }
}
