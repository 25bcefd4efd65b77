//! Pad-and-crop plus horizontal flip for image batches.

use rand::Rng;

use crate::error::{DmpError, Result};
use crate::tensor::Tensor;

pub const PAD: usize = 4;

/// Crop offset into the padded image and whether to mirror.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Crop {
    pub dy: usize,
    pub dx: usize,
    pub flip: bool,
}

impl Crop {
    pub const CENTER: Crop = Crop {
        dy: PAD,
        dx: PAD,
        flip: false,
    };
}

/// Random crops and flips for a `[b, c, H, W]` batch, padding with
/// `pad[c]` (the normalized value of a zero pixel).
pub fn augment<R: Rng + ?Sized>(x: &Tensor, pad: &[f64], rng: &mut R) -> Result<Tensor> {
    let b = x.shape().first().copied().unwrap_or(0);
    let crops: Vec<Crop> = (0..b)
        .map(|_| Crop {
            dy: rng.random_range(0..=2 * PAD),
            dx: rng.random_range(0..=2 * PAD),
            flip: rng.random_bool(0.5),
        })
        .collect();
    augment_with(x, pad, &crops)
}

/// Apply explicit per-image crops.
pub fn augment_with(x: &Tensor, pad: &[f64], crops: &[Crop]) -> Result<Tensor> {
    let s = x.shape();
    if s.len() != 4 || s[1] != pad.len() || crops.len() != s[0] {
        return Err(DmpError::shape(format!(
            "augment needs [b, c, H, W] with one pad value per channel and one crop per image; got {s:?}, {} pads, {} crops",
            pad.len(),
            crops.len()
        )));
    }
    if let Some(c) = crops.iter().find(|c| c.dy > 2 * PAD || c.dx > 2 * PAD) {
        return Err(DmpError::InvalidArgument(format!(
            "crop offset {c:?} beyond the padding"
        )));
    }
    let (c, h, w) = (s[1], s[2], s[3]);
    let mut out = Vec::with_capacity(x.len());
    for (img, crop) in x.data().chunks(c * h * w).zip(crops) {
        for (ch, plane) in img.chunks(h * w).enumerate() {
            for y in 0..h {
                for xo in 0..w {
                    let xs = if crop.flip { w - 1 - xo } else { xo };
                    // coordinates in the padded image
                    let (py, px) = (y + crop.dy, xs + crop.dx);
                    let inside = (PAD..PAD + h).contains(&py) && (PAD..PAD + w).contains(&px);
                    out.push(if inside {
                        plane[(py - PAD) * w + px - PAD]
                    } else {
                        pad[ch]
                    });
                }
            }
        }
    }
    Tensor::new(s.to_vec(), out)
}
