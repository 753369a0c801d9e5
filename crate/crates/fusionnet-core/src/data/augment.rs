//! Training-time geometric augmentation: axis-aligned rotation and flips.
//! Every transform is a pixel permutation; chips are never resampled.

use super::{Chip, CHANNELS};
use rand::Rng;

/// One sampled augmentation: quarter turns (0 = none), then horizontal
/// flip, then vertical flip, applied in that order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AugmentDraw {
    pub quarter_turns: u8,
    pub hflip: bool,
    pub vflip: bool,
}

impl AugmentDraw {
    pub const IDENTITY: AugmentDraw = AugmentDraw {
        quarter_turns: 0,
        hflip: false,
        vflip: false,
    };

    pub fn is_identity(&self) -> bool {
        *self == Self::IDENTITY
    }
}

/// Rotation with probability 0.9 (1..=3 quarter turns, uniform),
/// horizontal flip with probability 0.5, vertical flip with 0.1.
pub fn sample_augment<R: Rng>(rng: &mut R) -> AugmentDraw {
    let quarter_turns = if rng.random::<f64>() < 0.9 {
        rng.random_range(1..=3u8)
    } else {
        0
    };
    let hflip = rng.random::<f64>() < 0.5;
    let vflip = rng.random::<f64>() < 0.1;
    AugmentDraw {
        quarter_turns,
        hflip,
        vflip,
    }
}

fn rot90_plane(src: &[f32], dst: &mut [f32], n: usize) {
    // quarter turn clockwise: (y, x) <- (n-1-x, y)
    for y in 0..n {
        for x in 0..n {
            dst[y * n + x] = src[(n - 1 - x) * n + y];
        }
    }
}

fn hflip_plane(plane: &mut [f32], n: usize) {
    for y in 0..n {
        plane[y * n..(y + 1) * n].reverse();
    }
}

fn vflip_plane(plane: &mut [f32], n: usize) {
    for y in 0..n / 2 {
        for x in 0..n {
            plane.swap(y * n + x, (n - 1 - y) * n + x);
        }
    }
}

/// Applies a draw to raw channel-major square pixel planes.
pub fn apply_to_planes(pixels: &mut [f32], n: usize, draw: &AugmentDraw) {
    debug_assert_eq!(pixels.len(), CHANNELS * n * n);
    let mut scratch = vec![0.0f32; n * n];
    for c in 0..CHANNELS {
        let plane = &mut pixels[c * n * n..(c + 1) * n * n];
        for _ in 0..draw.quarter_turns {
            scratch.copy_from_slice(plane);
            rot90_plane(&scratch, plane, n);
        }
        if draw.hflip {
            hflip_plane(plane, n);
        }
        if draw.vflip {
            vflip_plane(plane, n);
        }
    }
}

pub fn apply_augment(chip: &mut Chip, draw: &AugmentDraw) {
    let n = chip.h;
    apply_to_planes(&mut chip.pixels, n, draw);
}
