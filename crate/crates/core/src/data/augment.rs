use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Image;
use crate::error::{Error, Result};
use crate::losses::LabelMap;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub crop_height: usize,
    pub crop_width: usize,
    pub flip: bool,
}

impl AugmentConfig {
    /// Full-size crop with random horizontal flips.
    pub fn flip_only(height: usize, width: usize) -> Self {
        Self {
            crop_height: height,
            crop_width: width,
            flip: true,
        }
    }
}

/// Crops and optionally mirrors image and labels with the same offsets.
/// Labels are moved, never interpolated.
pub fn augment(
    image: &Image,
    labels: &LabelMap,
    config: &AugmentConfig,
    seed: u64,
) -> Result<(Image, LabelMap)> {
    let (h, w) = (image.height, image.width);
    if labels.height() != h || labels.width() != w {
        return Err(Error::Data(format!(
            "image {}×{} and labels {}×{} differ",
            h,
            w,
            labels.height(),
            labels.width()
        )));
    }
    let (ch, cw) = (config.crop_height, config.crop_width);
    if ch == 0 || cw == 0 || ch > h || cw > w {
        return Err(Error::InvalidArgument(format!(
            "crop {ch}×{cw} does not fit a {h}×{w} image"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let oy = rng.random_range(0..=h - ch);
    let ox = rng.random_range(0..=w - cw);
    let flip = config.flip && rng.random_bool(0.5);

    let mut pixels = Vec::with_capacity(ch * cw * 3);
    let mut values = Vec::with_capacity(ch * cw);
    for y in 0..ch {
        for x in 0..cw {
            let sx = if flip { ox + cw - 1 - x } else { ox + x };
            let p = (oy + y) * w + sx;
            pixels.extend_from_slice(&image.pixels[p * 3..p * 3 + 3]);
            values.push(labels.values()[p]);
        }
    }
    Ok((Image::new(ch, cw, pixels)?, LabelMap::new(ch, cw, values)?))
}
