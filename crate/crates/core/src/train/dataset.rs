use crate::data::{Manifest, SampleRecord};
use crate::imaging::{Mask, RgbImage};

/// A manifest record decoded into memory at training resolution.
#[derive(Clone, Debug)]
pub struct Sample {
    pub id: String,
    pub image: RgbImage,
    pub labels: Option<Vec<u8>>,
    pub tokens: Option<Vec<usize>>,
    pub mask: Option<Mask>,
}

pub fn resize_mask(mask: &Mask, width: usize, height: usize) -> Mask {
    if (mask.width, mask.height) == (width, height) {
        return mask.clone();
    }
    Mask::threshold(&mask.to_map().resize(width, height), 0.5)
}

/// Decodes `records`, resizing to `size x size` when given. Unreadable
/// files are skipped with a warning.
pub fn load_samples(manifest: &Manifest, records: &[&SampleRecord], size: Option<usize>, with_masks: bool) -> Vec<Sample> {
    let mut out = Vec::with_capacity(records.len());
    for r in records {
        let image = match RgbImage::load(&manifest.resolve(&r.image)) {
            Ok(img) => img,
            Err(e) => {
                log::warn!("skipping {}: {e}", r.id);
                continue;
            }
        };
        let image = match size {
            Some(s) => image.resize(s, s),
            None => image,
        };
        let mask = match (&r.gt_mask, with_masks) {
            (Some(p), true) => match Mask::load_png(&manifest.resolve(p)) {
                Ok(m) => Some(resize_mask(&m, image.width, image.height)),
                Err(e) => {
                    log::warn!("skipping {}: mask: {e}", r.id);
                    continue;
                }
            },
            _ => None,
        };
        out.push(Sample { id: r.id.clone(), image, labels: r.labels.clone(), tokens: r.tokens.clone(), mask });
    }
    out
}
