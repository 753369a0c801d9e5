//! Binary chip format.
//!
//! Layout (all integers little-endian):
//! magic `FCHP`, version byte 0x01, u32 channel count (always 3),
//! u32 height, u32 width, u8 label, u8 band, then C*H*W f32 pixel values
//! row-major, channel-major.

use super::{BandId, Chip, ChipSource, Label, CHANNELS};
use crate::error::{Error, Result};
use std::path::Path;

const MAGIC: &[u8; 4] = b"FCHP";
const VERSION: u8 = 0x01;

pub fn write_chip_bytes(chip: &Chip) -> Vec<u8> {
    let mut out = Vec::with_capacity(18 + chip.pixels.len() * 4);
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&(CHANNELS as u32).to_le_bytes());
    out.extend_from_slice(&(chip.h as u32).to_le_bytes());
    out.extend_from_slice(&(chip.w as u32).to_le_bytes());
    out.push(chip.label.code());
    out.push(chip.band.code());
    for p in &chip.pixels {
        out.extend_from_slice(&p.to_le_bytes());
    }
    out
}

pub fn read_chip_bytes(bytes: &[u8], source: ChipSource) -> Result<Chip> {
    if bytes.len() < 18 {
        return Err(Error::Format("chip file truncated before header end".into()));
    }
    if &bytes[0..4] != MAGIC {
        return Err(Error::Format("bad chip magic (expected FCHP)".into()));
    }
    if bytes[4] != VERSION {
        return Err(Error::Format(format!("unsupported chip version {}", bytes[4])));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
    let c = u32_at(5);
    let h = u32_at(9);
    let w = u32_at(13);
    if c != CHANNELS {
        return Err(Error::Format(format!("chip declares {c} channels, expected {CHANNELS}")));
    }
    let label = Label::from_code(bytes[17])?;
    let band = BandId::from_code(bytes[18])?;
    let expected = 19 + c * h * w * 4;
    if bytes.len() != expected {
        return Err(Error::Format(format!(
            "chip payload is {} bytes, expected {expected}",
            bytes.len()
        )));
    }
    let pixels = bytes[19..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    Chip::new(pixels, h, w, label, band, source)
}

pub fn write_chip(path: &Path, chip: &Chip) -> Result<()> {
    std::fs::write(path, write_chip_bytes(chip))?;
    Ok(())
}

pub fn read_chip(path: &Path) -> Result<Chip> {
    let bytes = std::fs::read(path)?;
    read_chip_bytes(&bytes, ChipSource::File(path.display().to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout_is_stable() {
        let chip = Chip::new(
            vec![1.5f32; 3 * 2 * 2],
            2,
            2,
            Label::Landcover,
            BandId::B76,
            ChipSource::Synthetic { seed: 1 },
        )
        .unwrap();
        let bytes = write_chip_bytes(&chip);
        assert_eq!(&bytes[0..4], b"FCHP");
        assert_eq!(bytes[4], 0x01);
        assert_eq!(&bytes[5..9], &3u32.to_le_bytes());
        assert_eq!(&bytes[9..13], &2u32.to_le_bytes());
        assert_eq!(&bytes[13..17], &2u32.to_le_bytes());
        assert_eq!(bytes[17], 1); // landcover
        assert_eq!(bytes[18], 4); // b76
        assert_eq!(bytes.len(), 19 + 12 * 4);
        assert_eq!(&bytes[19..23], &1.5f32.to_le_bytes());
    }

    #[test]
    fn truncated_and_corrupt_inputs_rejected() {
        let chip = Chip::new(
            vec![0.0f32; 12],
            2,
            2,
            Label::Cement,
            BandId::B7,
            ChipSource::Synthetic { seed: 1 },
        )
        .unwrap();
        let bytes = write_chip_bytes(&chip);
        assert!(read_chip_bytes(&bytes[..10], ChipSource::Synthetic { seed: 0 }).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(read_chip_bytes(&bad, ChipSource::Synthetic { seed: 0 }).is_err());
        let mut short = bytes;
        short.pop();
        assert!(read_chip_bytes(&short, ChipSource::Synthetic { seed: 0 }).is_err());
    }
}
