//! Planar RGB images, real-valued maps and binary masks, with PNG I/O.

use std::path::Path;

use image::{GrayImage, ImageBuffer, Luma, Rgb};

use crate::error::{shape_err, Error, Result};
use crate::tensor::{bilinear, Scalar, Tensor};

/// RGB image with channel planes `[3, H, W]` and values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != 3 * width * height {
            return shape_err(format!("{} values for a {width}x{height} RGB image", data.len()));
        }
        Ok(RgbImage { width, height, data })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> [f32; 3]) -> Self {
        let plane = width * height;
        let mut data = vec![0.0; 3 * plane];
        for y in 0..height {
            for x in 0..width {
                let px = f(x, y);
                for c in 0..3 {
                    data[c * plane + y * width + x] = px[c];
                }
            }
        }
        RgbImage { width, height, data }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let plane = self.width * self.height;
        let i = y * self.width + x;
        [self.data[i], self.data[plane + i], self.data[2 * plane + i]]
    }

    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path)?.to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        Ok(Self::from_fn(w, h, |x, y| {
            let p = img.get_pixel(x as u32, y as u32).0;
            [p[0] as f32 / 255.0, p[1] as f32 / 255.0, p[2] as f32 / 255.0]
        }))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let buf = ImageBuffer::from_fn(self.width as u32, self.height as u32, |x, y| {
            let p = self.pixel(x as usize, y as usize);
            Rgb(p.map(quantize))
        });
        buf.save(path)?;
        Ok(())
    }

    pub fn resize(&self, width: usize, height: usize) -> RgbImage {
        if (width, height) == (self.width, self.height) {
            return self.clone();
        }
        let data = bilinear(&self.data, 3, self.height, self.width, height, width);
        RgbImage { width, height, data }
    }

    pub fn flip_horizontal(&self) -> RgbImage {
        let w = self.width;
        let mut data = self.data.clone();
        for row in data.chunks_mut(w) {
            row.reverse();
        }
        RgbImage { width: w, height: self.height, data }
    }
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Real-valued single-channel map, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Map {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl Map {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height {
            return shape_err(format!("{} values for a {width}x{height} map", data.len()));
        }
        Ok(Map { width, height, data })
    }

    pub fn constant(width: usize, height: usize, value: f32) -> Self {
        Map { width, height, data: vec![value; width * height] }
    }

    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    pub fn resize(&self, width: usize, height: usize) -> Map {
        if (width, height) == (self.width, self.height) {
            return self.clone();
        }
        Map { width, height, data: bilinear(&self.data, 1, self.height, self.width, height, width) }
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len().max(1) as f64
    }

    /// 8-bit grayscale PNG holding `round(255 s)`.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let buf = GrayImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            Luma([quantize(self.get(x as usize, y as usize))])
        });
        buf.save(path)?;
        Ok(())
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)?.to_luma8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        Ok(Map { width: w, height: h, data: img.pixels().map(|p| p.0[0] as f32 / 255.0).collect() })
    }

    /// One map per image of an `[N, 1, H, W]` tensor.
    pub fn from_batch<F: Scalar>(t: &Tensor<F>) -> Result<Vec<Map>> {
        let [n, 1, h, w] = *t.shape() else {
            return shape_err(format!("expected [N, 1, H, W] maps, got {:?}", t.shape()));
        };
        Ok((0..n)
            .map(|i| Map {
                width: w,
                height: h,
                data: t.data()[i * h * w..(i + 1) * h * w].iter().map(|v| v.to_f64_lossy() as f32).collect(),
            })
            .collect())
    }
}

/// Binary mask, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn new(width: usize, height: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != width * height {
            return shape_err(format!("{} values for a {width}x{height} mask", data.len()));
        }
        Ok(Mask { width, height, data })
    }

    /// Pixels with `value >= threshold`.
    pub fn threshold(map: &Map, threshold: f32) -> Self {
        Mask { width: map.width, height: map.height, data: map.data.iter().map(|&v| v >= threshold).collect() }
    }

    pub fn to_map(&self) -> Map {
        Map { width: self.width, height: self.height, data: self.data.iter().map(|&b| b as u8 as f32).collect() }
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn area_fraction(&self) -> f64 {
        self.count() as f64 / self.data.len().max(1) as f64
    }

    /// Intersection over union; two empty masks agree perfectly.
    pub fn iou(&self, other: &Mask) -> Result<f64> {
        if (self.width, self.height) != (other.width, other.height) {
            return shape_err(format!(
                "masks {}x{} and {}x{} differ",
                self.width, self.height, other.width, other.height
            ));
        }
        let (mut inter, mut union) = (0usize, 0usize);
        for (&a, &b) in self.data.iter().zip(&other.data) {
            inter += (a && b) as usize;
            union += (a || b) as usize;
        }
        Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
    }

    pub fn flip_horizontal(&self) -> Mask {
        let mut data = self.data.clone();
        for row in data.chunks_mut(self.width) {
            row.reverse();
        }
        Mask { width: self.width, height: self.height, data }
    }

    /// 8-bit PNG with values 0 and 255.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let buf = GrayImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            Luma([if self.data[y as usize * self.width + x as usize] { 255 } else { 0 }])
        });
        buf.save(path)?;
        Ok(())
    }

    /// Reads a grayscale PNG; pixels at or above 128 are foreground.
    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)?.to_luma8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        Ok(Mask { width: w, height: h, data: img.pixels().map(|p| p.0[0] >= 128).collect() })
    }

    /// Like [`Mask::load_png`] but rejects anything other than 0 and 255.
    pub fn load_binary_png(path: &Path) -> Result<Self> {
        let img = image::open(path)?.to_luma8();
        if let Some(p) = img.pixels().find(|p| p.0[0] != 0 && p.0[0] != 255) {
            return Err(Error::Invalid(format!("{} holds non-binary value {}", path.display(), p.0[0])));
        }
        let (w, h) = (img.width() as usize, img.height() as usize);
        Ok(Mask { width: w, height: h, data: img.pixels().map(|p| p.0[0] == 255).collect() })
    }
}

/// Stacks equally sized images into a centred `[N, 3, H, W]` tensor.
pub fn image_batch<F: Scalar>(images: &[&RgbImage]) -> Result<Tensor<F>> {
    let Some(first) = images.first() else {
        return Err(Error::Invalid("empty image batch".into()));
    };
    let (w, h) = (first.width, first.height);
    let mut data = Vec::with_capacity(images.len() * 3 * w * h);
    for img in images {
        if (img.width, img.height) != (w, h) {
            return shape_err(format!("batch mixes {w}x{h} and {}x{} images", img.width, img.height));
        }
        data.extend(img.data.iter().map(|&v| F::lit(v as f64 - 0.5)));
    }
    Tensor::new([images.len(), 3, h, w], data)
}

/// Stacks masks into an `[N, 1, H, W]` tensor of zeros and ones.
pub fn mask_batch<F: Scalar>(masks: &[&Mask]) -> Result<Tensor<F>> {
    let Some(first) = masks.first() else {
        return Err(Error::Invalid("empty mask batch".into()));
    };
    let (w, h) = (first.width, first.height);
    let mut data = Vec::with_capacity(masks.len() * w * h);
    for m in masks {
        if (m.width, m.height) != (w, h) {
            return shape_err(format!("batch mixes {w}x{h} and {}x{} masks", m.width, m.height));
        }
        data.extend(m.data.iter().map(|&b| if b { F::one() } else { F::zero() }));
    }
    Tensor::new([masks.len(), 1, h, w], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let img = RgbImage::from_fn(5, 4, |x, y| [x as f32 / 4.0, y as f32 / 3.0, 0.5]);
        img.save(&dir.path().join("a.png")).unwrap();
        let back = RgbImage::load(&dir.path().join("a.png")).unwrap();
        for (a, b) in img.data.iter().zip(&back.data) {
            assert!((a - b).abs() <= 1.0 / 510.0 + 1e-6);
        }

        let map = Map::new(3, 2, vec![0.0, 0.1, 0.2, 0.5, 0.77, 1.0]).unwrap();
        map.save_png(&dir.path().join("m.png")).unwrap();
        let back = Map::load_png(&dir.path().join("m.png")).unwrap();
        for (a, b) in map.data.iter().zip(&back.data) {
            assert!((a - b).abs() <= 1.0 / 510.0 + 1e-6);
        }

        let mask = Mask::threshold(&map, 0.5);
        mask.save_png(&dir.path().join("k.png")).unwrap();
        assert_eq!(Mask::load_binary_png(&dir.path().join("k.png")).unwrap(), mask);
        assert!(Mask::load_binary_png(&dir.path().join("m.png")).is_err());
    }

    #[test]
    fn flips_and_iou() {
        let m = Mask::new(3, 1, vec![true, false, false]).unwrap();
        assert_eq!(m.flip_horizontal().data, vec![false, false, true]);
        assert_eq!(m.iou(&m.flip_horizontal()).unwrap(), 0.0);
        let img = RgbImage::from_fn(3, 1, |x, _| [x as f32, 0.0, 0.0]);
        assert_eq!(img.flip_horizontal().pixel(0, 0), [2.0, 0.0, 0.0]);
        let half = Mask::new(2, 1, vec![true, true]).unwrap();
        let one = Mask::new(2, 1, vec![true, false]).unwrap();
        assert_eq!(half.iou(&one).unwrap(), 0.5);
    }

    #[test]
    fn batches_are_planar() {
        let a = RgbImage::from_fn(2, 2, |x, y| [(x + 2 * y) as f32 / 4.0, 0.5, 1.0]);
        let t: Tensor<f32> = image_batch(&[&a, &a]).unwrap();
        assert_eq!(t.shape(), [2, 3, 2, 2]);
        assert_eq!(t.at(&[1, 0, 1, 1]), 0.75 - 0.5);
        assert_eq!(t.at(&[0, 2, 0, 0]), 0.5);
    }
}
