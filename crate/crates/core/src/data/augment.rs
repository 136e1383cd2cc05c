use rand::Rng;

use crate::imaging::{Mask, RgbImage};

use super::config::AugmentConfig;

/// Mirror index into `0..n` without repeating the edge sample.
fn reflect(i: i64, n: usize) -> usize {
    let n = n as i64;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - m }) as usize
}

/// Crop offsets and flip decision shared by an image and its label.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AugmentPlan {
    pub dx: i64,
    pub dy: i64,
    pub flip: bool,
}

impl AugmentPlan {
    pub const IDENTITY: AugmentPlan = AugmentPlan { dx: 0, dy: 0, flip: false };

    pub fn sample(rng: &mut impl Rng, cfg: &AugmentConfig) -> Self {
        let p = cfg.crop_pad as i64;
        let (dx, dy) = if p > 0 { (rng.random_range(-p..=p), rng.random_range(-p..=p)) } else { (0, 0) };
        let flip = cfg.flip && rng.random_bool(0.5);
        AugmentPlan { dx, dy, flip }
    }

    /// Source coordinate of output pixel `(x, y)`.
    fn source(&self, x: usize, y: usize, w: usize, h: usize) -> (usize, usize) {
        let x = if self.flip { w - 1 - x } else { x };
        (reflect(x as i64 + self.dx, w), reflect(y as i64 + self.dy, h))
    }

    pub fn apply_image(&self, img: &RgbImage) -> RgbImage {
        if *self == Self::IDENTITY {
            return img.clone();
        }
        RgbImage::from_fn(img.width, img.height, |x, y| {
            let (sx, sy) = self.source(x, y, img.width, img.height);
            img.pixel(sx, sy)
        })
    }

    pub fn apply_mask(&self, mask: &Mask) -> Mask {
        let (w, h) = (mask.width, mask.height);
        let data = (0..w * h)
            .map(|p| {
                let (sx, sy) = self.source(p % w, p / w, w, h);
                mask.data[sy * w + sx]
            })
            .collect();
        Mask { width: w, height: h, data }
    }
}
