//! Shared fixtures for the criterion benches.

use fusionnet_core::backbone::{BackboneSpec, PoolCfg};
use fusionnet_core::gabor::GaborConfig;

/// The desk-scale DGCNN configuration used across benches.
pub fn desk_dgcnn(input_size: usize) -> BackboneSpec {
    let mut spec = BackboneSpec::dgcnn(input_size);
    spec.channels = [40, 16, 24, 32, 32];
    spec.gabor = Some(GaborConfig {
        n_freq: 5,
        n_orient: 8,
        kernel_size: 7,
    });
    spec.pools = [PoolCfg { window: 2, stride: 2 }; 5];
    spec
}
