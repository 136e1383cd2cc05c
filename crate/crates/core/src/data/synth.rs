use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{Mask, RgbImage};
use crate::networks::VocabIndex;

use super::manifest::{write_manifest, SampleRecord, Source};

pub const SHAPES: [&str; 4] = ["circle", "square", "triangle", "star"];
pub const COLORS: [(&str, [f32; 3]); 8] = [
    ("red", [0.9, 0.1, 0.1]),
    ("green", [0.1, 0.75, 0.2]),
    ("blue", [0.15, 0.25, 0.95]),
    ("yellow", [0.95, 0.9, 0.1]),
    ("purple", [0.6, 0.15, 0.8]),
    ("orange", [1.0, 0.55, 0.05]),
    ("cyan", [0.1, 0.85, 0.9]),
    ("pink", [1.0, 0.45, 0.75]),
];
pub const POSITIONS: [&str; 4] = ["left", "right", "top", "bottom"];

pub const TRAIN_MANIFEST: &str = "train.jsonl";
pub const EVAL_MANIFEST: &str = "eval.jsonl";
pub const VOCAB_FILE: &str = "vocab.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub size: usize,
    pub min_area: f64,
    pub max_area: f64,
    pub per_source: usize,
    pub eval: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig { size: 96, min_area: 0.05, max_area: 0.40, per_source: 300, eval: 100, seed: 0 }
    }
}

/// Every word a synthetic caption can use.
pub fn synth_vocab() -> VocabIndex {
    let words = ["a", "on", "the"].into_iter().chain(COLORS.iter().map(|c| c.0)).chain(SHAPES).chain(POSITIONS);
    VocabIndex::from_words(words)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSample {
    pub image: RgbImage,
    pub mask: Mask,
    pub shape: usize,
    pub color: usize,
    pub position: usize,
}

impl SynthSample {
    pub fn caption(&self) -> String {
        format!("a {} {} on the {}", COLORS[self.color].0, SHAPES[self.shape], POSITIONS[self.position])
    }
}

/// Polygon vertices for unit size, centred on the origin, y pointing down.
fn outline(shape: usize) -> Vec<(f64, f64)> {
    let ring = |n: usize, radius: &dyn Fn(usize) -> f64| {
        (0..n)
            .map(|k| {
                let a = -PI / 2.0 + 2.0 * PI * k as f64 / n as f64;
                (radius(k) * a.cos(), radius(k) * a.sin())
            })
            .collect()
    };
    match shape {
        2 => ring(3, &|_| 1.0),
        3 => ring(10, &|k| if k % 2 == 0 { 1.0 } else { 0.5 }),
        _ => Vec::new(),
    }
}

fn polygon_area(poly: &[(f64, f64)]) -> f64 {
    let n = poly.len();
    0.5 * (0..n).map(|i| poly[i].0 * poly[(i + 1) % n].1 - poly[(i + 1) % n].0 * poly[i].1).sum::<f64>().abs()
}

fn inside_polygon(poly: &[(f64, f64)], x: f64, y: f64) -> bool {
    let mut inside = false;
    let n = poly.len();
    for i in 0..n {
        let (a, b) = (poly[i], poly[(i + n - 1) % n]);
        if (a.1 > y) != (b.1 > y) && x < (b.0 - a.0) * (y - a.1) / (b.1 - a.1) + a.0 {
            inside = !inside;
        }
    }
    inside
}

/// Area of the shape at unit size.
fn unit_area(shape: usize) -> f64 {
    match shape {
        0 => PI,
        1 => 4.0,
        s => polygon_area(&outline(s)),
    }
}

fn shape_contains(shape: usize, poly: &[(f64, f64)], dx: f64, dy: f64) -> bool {
    match shape {
        0 => dx * dx + dy * dy <= 1.0,
        1 => dx.abs() <= 1.0 && dy.abs() <= 1.0,
        _ => inside_polygon(poly, dx, dy),
    }
}

/// Renders one shape on a textured background. The object centre lies in
/// the named half of the image and the mask covers `[min_area, max_area]`.
pub fn render_sample(rng: &mut impl Rng, cfg: &SynthConfig) -> Result<SynthSample> {
    let n = cfg.size;
    if n < 16 || !(0.0 < cfg.min_area && cfg.min_area < cfg.max_area && cfg.max_area <= 1.0) {
        return Err(Error::Config(format!("unusable synthetic settings {cfg:?}")));
    }
    let (shape, color, position) = (rng.random_range(0..4), rng.random_range(0..COLORS.len()), rng.random_range(0..4));
    let poly = outline(shape);
    let side = n as f64;
    let lo = (cfg.min_area + 0.01).min(cfg.max_area);
    let hi = (0.6 * cfg.max_area).max(lo);
    let mask = loop {
        let area = rng.random_range(lo..=hi) * side * side;
        let size = (area / unit_area(shape)).sqrt();
        let along = rng.random_range(0.22..0.36) * side;
        let across = rng.random_range(0.35..0.65) * side;
        let (cx, cy) = match position {
            0 => (along, across),
            1 => (side - along, across),
            2 => (across, along),
            _ => (across, side - along),
        };
        let data: Vec<bool> = (0..n * n)
            .map(|p| {
                let dx = ((p % n) as f64 + 0.5 - cx) / size;
                let dy = ((p / n) as f64 + 0.5 - cy) / size;
                shape_contains(shape, &poly, dx, dy)
            })
            .collect();
        let mask = Mask::new(n, n, data)?;
        if (cfg.min_area..=cfg.max_area).contains(&mask.area_fraction()) {
            break mask;
        }
    };

    let base: f32 = rng.random_range(0.3..0.7);
    let tint: [f32; 3] = [rng.random_range(-0.08..0.08), rng.random_range(-0.08..0.08), rng.random_range(-0.08..0.08)];
    let (freq, angle, amp): (f32, f32, f32) =
        (rng.random_range(0.15..0.6), rng.random_range(0.0..std::f32::consts::PI), rng.random_range(0.03..0.1));
    let fg = COLORS[color].1;
    let mut noise = || rng.random_range(-0.03f32..0.03);
    let image = RgbImage::from_fn(n, n, |x, y| {
        if mask.data[y * n + x] {
            let e = noise();
            fg.map(|c| (c + e).clamp(0.0, 1.0))
        } else {
            let wave = amp * ((x as f32 * angle.cos() + y as f32 * angle.sin()) * freq).sin();
            let e = noise();
            [0, 1, 2].map(|c| (base + tint[c] + wave + e).clamp(0.0, 1.0))
        }
    });
    Ok(SynthSample { image, mask, shape, color, position })
}

/// Independent generator for sample `index` of a dataset.
pub fn sample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSummary {
    pub train_manifest: PathBuf,
    pub eval_manifest: PathBuf,
    pub vocab: PathBuf,
    pub train_records: usize,
    pub eval_records: usize,
}

/// Writes `images/`, `masks/`, `train.jsonl` (all three sources),
/// `eval.jsonl` and `vocab.json` under `out_dir`.
pub fn synth_dataset(out_dir: &Path, cfg: &SynthConfig) -> Result<SynthSummary> {
    std::fs::create_dir_all(out_dir.join("images"))?;
    std::fs::create_dir_all(out_dir.join("masks"))?;
    let vocab = synth_vocab();
    let mut train = Vec::new();
    let mut eval = Vec::new();
    let groups = [
        (Some(Source::Category), "cat", cfg.per_source),
        (Some(Source::Caption), "cap", cfg.per_source),
        (Some(Source::Unlabelled), "unl", cfg.per_source),
        (None, "eval", cfg.eval),
    ];
    let mut index = 0u64;
    for (source, prefix, count) in groups {
        for i in 0..count {
            let sample = render_sample(&mut sample_rng(cfg.seed, index), cfg)?;
            index += 1;
            let id = format!("{prefix}_{i:05}");
            let image = PathBuf::from("images").join(format!("{id}.png"));
            let mask = PathBuf::from("masks").join(format!("{id}.png"));
            sample.image.save(&out_dir.join(&image))?;
            sample.mask.save_png(&out_dir.join(&mask))?;
            let mut record = SampleRecord {
                id,
                image,
                source: source.unwrap_or(Source::Unlabelled),
                labels: None,
                tokens: None,
                gt_mask: Some(mask),
            };
            match source {
                Some(Source::Category) => {
                    record.labels = Some((0..SHAPES.len()).map(|s| (s == sample.shape) as u8).collect());
                }
                Some(Source::Caption) => record.tokens = Some(vocab.encode(&sample.caption())?),
                _ => {}
            }
            if source.is_some() {
                train.push(record);
            } else {
                eval.push(record);
            }
        }
    }
    let summary = SynthSummary {
        train_manifest: out_dir.join(TRAIN_MANIFEST),
        eval_manifest: out_dir.join(EVAL_MANIFEST),
        vocab: out_dir.join(VOCAB_FILE),
        train_records: train.len(),
        eval_records: eval.len(),
    };
    write_manifest(&summary.train_manifest, &train)?;
    write_manifest(&summary.eval_manifest, &eval)?;
    vocab.save(&summary.vocab)?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::manifest::load_manifest;

    #[test]
    fn unit_areas() {
        assert!((unit_area(2) - 3.0 * 3f64.sqrt() / 4.0).abs() < 1e-12);
        assert!((unit_area(3) - 5.0 * 0.5 * (PI / 5.0).sin()).abs() < 1e-12);
        assert!(inside_polygon(&outline(2), 0.0, 0.0));
        assert!(!inside_polygon(&outline(2), 0.3, -0.9));
        assert!(inside_polygon(&outline(3), 0.0, -0.9));
        assert!(!inside_polygon(&outline(3), 0.45, -0.45));
    }

    #[test]
    fn samples_respect_area_and_position() {
        let cfg = SynthConfig::default();
        for i in 0..200 {
            let s = render_sample(&mut sample_rng(7, i), &cfg).unwrap();
            let a = s.mask.area_fraction();
            assert!((cfg.min_area..=cfg.max_area).contains(&a), "area {a}");
            let n = cfg.size as f64;
            let (sx, sy, count) = s.mask.data.iter().enumerate().filter(|(_, &b)| b).fold((0.0, 0.0, 0.0), |acc, (p, _)| {
                (acc.0 + (p % cfg.size) as f64, acc.1 + (p / cfg.size) as f64, acc.2 + 1.0)
            });
            let (mx, my) = (sx / count / n, sy / count / n);
            let ok = match s.position {
                0 => mx < 0.5,
                1 => mx > 0.5,
                2 => my < 0.5,
                _ => my > 0.5,
            };
            assert!(ok, "{} at ({mx:.2}, {my:.2})", s.caption());
        }
    }

    #[test]
    fn dataset_is_reproducible() {
        let cfg = SynthConfig { per_source: 3, eval: 2, seed: 5, ..SynthConfig::default() };
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let sa = synth_dataset(a.path(), &cfg).unwrap();
        synth_dataset(b.path(), &cfg).unwrap();
        assert_eq!((sa.train_records, sa.eval_records), (9, 2));
        for rel in [TRAIN_MANIFEST, EVAL_MANIFEST, VOCAB_FILE, "images/cap_00002.png", "masks/eval_00001.png"] {
            assert_eq!(std::fs::read(a.path().join(rel)).unwrap(), std::fs::read(b.path().join(rel)).unwrap());
        }
        let m = load_manifest(&sa.train_manifest).unwrap();
        let vocab = synth_vocab();
        assert!(vocab.len() < 32);
        for r in m.by_source(Source::Caption) {
            assert!(r.tokens.as_ref().unwrap().iter().all(|&t| t < vocab.len()));
        }
        for r in m.by_source(Source::Category) {
            assert_eq!(r.labels.as_ref().unwrap().iter().map(|&v| v as usize).sum::<usize>(), 1);
        }
    }
}
