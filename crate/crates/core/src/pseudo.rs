//! Pseudo ground truth from the two coarse maps: average, resize, refine
//! with a color-aware mean-field step, and threshold.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::imaging::{Map, Mask, RgbImage};
use crate::tensor::LOG_EPS;

static REFINER_CALLS: AtomicUsize = AtomicUsize::new(0);

/// Number of refinement calls made by this process so far.
pub fn refiner_invocations() -> usize {
    REFINER_CALLS.load(Ordering::SeqCst)
}

/// Element-wise mean of two maps on the same grid, resized bilinearly.
pub fn fuse_maps(s_c: &Map, s_p: &Map, out_w: usize, out_h: usize) -> Result<Map> {
    if (s_c.width, s_c.height) != (s_p.width, s_p.height) {
        return shape_err(format!(
            "cannot fuse {}x{} and {}x{} maps",
            s_c.width, s_c.height, s_p.width, s_p.height
        ));
    }
    let mean = s_c.data.iter().zip(&s_p.data).map(|(a, b)| 0.5 * (a + b)).collect();
    Ok(Map::new(s_c.width, s_c.height, mean)?.resize(out_w, out_h))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrfParams {
    pub iterations: usize,
    /// Pixels.
    pub spatial_std: f64,
    /// Normalized RGB units.
    pub color_std: f64,
    /// Half-width of the square message window.
    pub radius: usize,
    /// Potts penalty on the normalized neighbour disagreement.
    pub pairwise_weight: f64,
}

impl Default for CrfParams {
    fn default() -> Self {
        CrfParams { iterations: 5, spatial_std: 8.0, color_std: 0.1, radius: 8, pairwise_weight: 3.0 }
    }
}

/// Two-label mean-field inference with unaries `-log p`, `-log(1 - p)` and
/// a bilateral kernel truncated to a window. Messages are normalized by the
/// total kernel mass around each pixel, so the pairwise weight is scale free.
pub fn crf_refine(image: &RgbImage, map: &Map, params: &CrfParams) -> Result<Map> {
    REFINER_CALLS.fetch_add(1, Ordering::SeqCst);
    mean_field(image, map, params)
}

fn mean_field(image: &RgbImage, map: &Map, params: &CrfParams) -> Result<Map> {
    let (w, h) = (map.width, map.height);
    if (image.width, image.height) != (w, h) {
        return shape_err(format!("{}x{} image for a {w}x{h} map", image.width, image.height));
    }
    if map.data.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::Domain("refinement expects map values in [0, 1]".into()));
    }
    if params.pairwise_weight == 0.0 || params.iterations == 0 {
        return Ok(map.clone());
    }
    let r = params.radius as i64;
    let side = 2 * params.radius + 1;
    let spatial: Vec<f64> = (0..side * side)
        .map(|k| {
            let (dy, dx) = ((k / side) as f64 - r as f64, (k % side) as f64 - r as f64);
            (-(dx * dx + dy * dy) / (2.0 * params.spatial_std.powi(2))).exp()
        })
        .collect();
    let color_scale = 1.0 / (2.0 * params.color_std.powi(2));

    // Kernel weights of every pixel's window, normalized to sum to one.
    let mut kernel = vec![0.0f64; w * h * side * side];
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            let p = (y as usize) * w + x as usize;
            let c = image.pixel(x as usize, y as usize);
            let row = &mut kernel[p * side * side..(p + 1) * side * side];
            let mut total = 0.0;
            for dy in -r..=r {
                for dx in -r..=r {
                    let (nx, ny) = (x + dx, y + dy);
                    if (dx, dy) == (0, 0) || nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                        continue;
                    }
                    let q = image.pixel(nx as usize, ny as usize);
                    let dc: f64 = (0..3).map(|i| (c[i] as f64 - q[i] as f64).powi(2)).sum();
                    let k = ((dy + r) as usize) * side + (dx + r) as usize;
                    let v = spatial[k] * (-dc * color_scale).exp();
                    row[k] = v;
                    total += v;
                }
            }
            if total > 0.0 {
                row.iter_mut().for_each(|v| *v /= total);
            }
        }
    }

    let eps = LOG_EPS;
    let logit: Vec<f64> = map
        .data
        .iter()
        .map(|&v| {
            let v = (v as f64).clamp(eps, 1.0 - eps);
            (v / (1.0 - v)).ln()
        })
        .collect();
    let mut q: Vec<f64> = map.data.iter().map(|&v| v as f64).collect();
    let mut next = q.clone();
    for _ in 0..params.iterations {
        for y in 0..h as i64 {
            for x in 0..w as i64 {
                let p = (y as usize) * w + x as usize;
                let row = &kernel[p * side * side..(p + 1) * side * side];
                let mut fg = 0.0;
                for dy in (-r).max(-y)..=r.min(h as i64 - 1 - y) {
                    let base = ((y + dy) as usize) * w;
                    let krow = ((dy + r) as usize) * side;
                    for dx in (-r).max(-x)..=r.min(w as i64 - 1 - x) {
                        fg += row[krow + (dx + r) as usize] * q[base + (x + dx) as usize];
                    }
                }
                // Potts: label 1 pays w * (mass of 0) and label 0 pays w * (mass of 1).
                let z = logit[p] + params.pairwise_weight * (2.0 * fg - 1.0);
                next[p] = 1.0 / (1.0 + (-z).exp());
            }
        }
        std::mem::swap(&mut q, &mut next);
    }
    Map::new(w, h, q.into_iter().map(|v| v as f32).collect())
}

/// Refinement stage of pseudo-label generation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Refiner {
    Off,
    MeanField(CrfParams),
}

impl Default for Refiner {
    fn default() -> Self {
        Refiner::MeanField(CrfParams::default())
    }
}

impl Refiner {
    pub fn refine(&self, image: &RgbImage, map: &Map) -> Result<Map> {
        REFINER_CALLS.fetch_add(1, Ordering::SeqCst);
        match self {
            Refiner::Off => Ok(map.clone()),
            Refiner::MeanField(p) => mean_field(image, map, p),
        }
    }
}

/// Foreground where `value >= threshold`.
pub fn binarize(map: &Map, threshold: f32) -> Mask {
    Mask::threshold(map, threshold)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub image_id: String,
    pub fusion: String,
    pub refiner: Refiner,
    pub threshold: f32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PseudoLabel {
    pub mask: Mask,
    pub provenance: Provenance,
}

/// Fuse, refine and binarize the two coarse maps of one image.
pub fn pseudo_label(
    id: &str,
    image: &RgbImage,
    s_c: &Map,
    s_p: &Map,
    refiner: &Refiner,
    threshold: f32,
) -> Result<PseudoLabel> {
    let fused = fuse_maps(s_c, s_p, image.width, image.height)?;
    let refined = refiner.refine(image, &fused)?;
    Ok(PseudoLabel {
        mask: binarize(&refined, threshold),
        provenance: Provenance {
            image_id: id.to_string(),
            fusion: "mean, bilinear resize".into(),
            refiner: refiner.clone(),
            threshold,
        },
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PseudoEntry {
    /// Label PNG, relative to the manifest.
    pub label: String,
    /// Source image path as given.
    pub image: String,
    pub provenance: Provenance,
}

/// JSON object keyed by image id.
pub type PseudoManifest = BTreeMap<String, PseudoEntry>;

pub const PSEUDO_MANIFEST: &str = "pseudo_labels.json";

/// Writes `<id>.png` for every label plus the JSON manifest.
pub fn write_pseudo_labels(dir: &Path, labels: &[(PseudoLabel, String)]) -> Result<PseudoManifest> {
    std::fs::create_dir_all(dir)?;
    let mut manifest = PseudoManifest::new();
    for (label, image) in labels {
        let id = &label.provenance.image_id;
        let file = format!("{id}.png");
        label.mask.save_png(&dir.join(&file))?;
        manifest.insert(
            id.clone(),
            PseudoEntry { label: file, image: image.clone(), provenance: label.provenance.clone() },
        );
    }
    std::fs::write(dir.join(PSEUDO_MANIFEST), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

pub fn read_pseudo_manifest(path: &Path) -> Result<PseudoManifest> {
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn fuse_examples() {
        let a = Map::new(2, 2, vec![0.1, 0.5, 0.9, 0.3]).unwrap();
        assert_eq!(fuse_maps(&a, &a, 8, 8).unwrap(), a.resize(8, 8));
        let zero = Map::constant(3, 3, 0.0);
        let one = Map::constant(3, 3, 1.0);
        assert!(fuse_maps(&zero, &one, 12, 9).unwrap().data.iter().all(|&v| v == 0.5));

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = Map::new(2, 2, (0..4).map(|_| rng.random()).collect()).unwrap();
        let f = fuse_maps(&a, &b, 2, 2).unwrap();
        for i in 0..4 {
            let (lo, hi) = (a.data[i].min(b.data[i]), a.data[i].max(b.data[i]));
            assert!(f.data[i] >= lo && f.data[i] <= hi);
        }
        assert!(fuse_maps(&a, &zero, 4, 4).is_err());
    }

    #[test]
    fn uniform_input_is_a_fixed_point() {
        let img = RgbImage::from_fn(20, 20, |_, _| [0.3, 0.3, 0.3]);
        let out = crf_refine(&img, &Map::constant(20, 20, 0.5), &CrfParams::default()).unwrap();
        assert!(out.data.iter().all(|&v| (v - 0.5).abs() < 1e-6));
    }

    #[test]
    fn zero_pairwise_weight_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let img = RgbImage::from_fn(10, 10, |_, _| [rng.random(), rng.random(), rng.random()]);
        let map = Map::new(10, 10, (0..100).map(|_| rng.random()).collect()).unwrap();
        let p = CrfParams { pairwise_weight: 0.0, ..CrfParams::default() };
        assert_eq!(crf_refine(&img, &map, &p).unwrap(), map);
    }

    #[test]
    fn refinement_snaps_to_color_edges() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (w, h) = (48, 48);
        let inside = |x: usize, y: usize| (12..34).contains(&x) && (14..38).contains(&y);
        let img = RgbImage::from_fn(w, h, |x, y| if inside(x, y) { [0.9, 0.3, 0.2] } else { [0.2, 0.4, 0.6] });
        let truth = Mask::new(w, h, (0..w * h).map(|p| inside(p % w, p / w)).collect()).unwrap();
        for _ in 0..5 {
            // A coarse, shifted, noisy version of the object.
            let (sx, sy) = (rng.random_range(-4i64..=4), rng.random_range(-4i64..=4));
            let coarse = Map::new(6, 6, (0..36).map(|i| {
                let (cx, cy) = ((i % 6) as i64 * 8 + 4 - sx, (i / 6) as i64 * 8 + 4 - sy);
                let on = cx >= 0 && cy >= 0 && inside(cx as usize, cy as usize);
                (if on { 0.8 } else { 0.2 }) + rng.random_range(-0.1..0.1)
            }).collect()).unwrap();
            let map = coarse.resize(w, h);
            let before = binarize(&map, 0.5).iou(&truth).unwrap();
            let refined = crf_refine(&img, &map, &CrfParams::default()).unwrap();
            assert!(refined.data.iter().all(|v| (0.0..=1.0).contains(v)));
            let after = binarize(&refined, 0.5).iou(&truth).unwrap();
            assert!(after > before, "{before} -> {after}");
        }
    }

    #[test]
    fn binarize_examples() {
        let m = Map::new(3, 1, vec![0.5, 0.49, 0.8]).unwrap();
        assert_eq!(binarize(&m, 0.5).data, vec![true, false, true]);
        let once = binarize(&m, 0.5);
        assert_eq!(binarize(&once.to_map(), 0.5), once);
        assert_eq!(binarize(&Map::constant(4, 4, 0.2), 0.5).count(), 0);
    }

    #[test]
    fn refiner_off_and_pipeline_arithmetic() {
        let img = RgbImage::from_fn(16, 16, |_, _| [0.5; 3]);
        let m = Map::constant(4, 4, 0.6);
        let label = pseudo_label("a", &img, &m, &m, &Refiner::Off, 0.5).unwrap();
        assert_eq!(label.mask.count(), 256);
        let before = refiner_invocations();
        Refiner::default().refine(&img, &m.resize(16, 16)).unwrap();
        assert!(refiner_invocations() > before);
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let img = RgbImage::from_fn(8, 8, |x, _| [x as f32 / 8.0, 0.2, 0.2]);
        let a = Map::new(2, 2, vec![0.9, 0.1, 0.9, 0.1]).unwrap();
        let label = pseudo_label("img7", &img, &a, &a, &Refiner::Off, 0.5).unwrap();
        let written = write_pseudo_labels(dir.path(), &[(label.clone(), "x.png".into())]).unwrap();
        let read = read_pseudo_manifest(&dir.path().join(PSEUDO_MANIFEST)).unwrap();
        assert_eq!(read, written);
        let mask = Mask::load_binary_png(&dir.path().join(&read["img7"].label)).unwrap();
        assert_eq!(mask, label.mask);
    }
}
