//! Precision-recall curves, mean absolute error and maximum F-measure.
//!
//! Precision and recall are computed per image at every threshold and then
//! averaged over images. An image predicting nothing at a threshold has
//! precision 1 there.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::imaging::{Map, Mask};

pub const DEFAULT_THRESHOLDS: usize = 256;
pub const BETA2: f64 = 0.3;
pub const AGGREGATION: &str = "per-image precision/recall averaged over images";

/// `k / (n - 1)` for `k = 0..n`.
pub fn thresholds(n: usize) -> Vec<f64> {
    (0..n).map(|k| k as f64 / (n - 1).max(1) as f64).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct PrCurve {
    pub thresholds: Vec<f64>,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    /// Images contributing to the averages.
    pub images: usize,
}

fn check_pairs(preds: &[Map], truths: &[Mask]) -> Result<()> {
    if preds.len() != truths.len() {
        return Err(Error::Invalid(format!("{} predictions for {} truths", preds.len(), truths.len())));
    }
    for (i, (p, t)) in preds.iter().zip(truths).enumerate() {
        if (p.width, p.height) != (t.width, t.height) {
            return shape_err(format!(
                "pair {i}: {}x{} prediction for a {}x{} truth",
                p.width, p.height, t.width, t.height
            ));
        }
    }
    Ok(())
}

/// Highest threshold index `k` with `thr[k] <= v`, or `None` below all.
fn top_index(v: f64, thr: &[f64]) -> Option<usize> {
    let n = thr.len();
    let mut k = ((v * (n - 1) as f64).floor().max(0.0) as usize).min(n - 1);
    while k + 1 < n && thr[k + 1] <= v {
        k += 1;
    }
    loop {
        if thr[k] <= v {
            return Some(k);
        }
        if k == 0 {
            return None;
        }
        k -= 1;
    }
}

pub fn pr_curve(preds: &[Map], truths: &[Mask], n_thresholds: usize) -> Result<PrCurve> {
    check_pairs(preds, truths)?;
    if n_thresholds < 2 {
        return Err(Error::Invalid("need at least two thresholds".into()));
    }
    let thr = thresholds(n_thresholds);
    let mut precision = vec![0.0; n_thresholds];
    let mut recall = vec![0.0; n_thresholds];
    let mut images = 0;
    for (i, (pred, truth)) in preds.iter().zip(truths).enumerate() {
        let positives = truth.count();
        if positives == 0 {
            log::warn!("image {i} has no positive truth pixels and is left out of the PR curve");
            continue;
        }
        images += 1;
        // Histogram by highest passed threshold, then suffix sums.
        let mut tp = vec![0usize; n_thresholds];
        let mut fp = vec![0usize; n_thresholds];
        for (&v, &t) in pred.data.iter().zip(&truth.data) {
            if let Some(k) = top_index(v as f64, &thr) {
                if t {
                    tp[k] += 1;
                } else {
                    fp[k] += 1;
                }
            }
        }
        let (mut ctp, mut cfp) = (0usize, 0usize);
        for k in (0..n_thresholds).rev() {
            ctp += tp[k];
            cfp += fp[k];
            precision[k] += if ctp + cfp == 0 { 1.0 } else { ctp as f64 / (ctp + cfp) as f64 };
            recall[k] += ctp as f64 / positives as f64;
        }
    }
    if images == 0 {
        return Err(Error::Invalid("no image with positive truth pixels".into()));
    }
    for k in 0..n_thresholds {
        precision[k] /= images as f64;
        recall[k] /= images as f64;
    }
    Ok(PrCurve { thresholds: thr, precision, recall, images })
}

/// Mean over images of the mean per-pixel `|s - y|`.
pub fn mae(preds: &[Map], truths: &[Mask]) -> Result<f64> {
    check_pairs(preds, truths)?;
    if preds.is_empty() {
        return Err(Error::Invalid("no images to score".into()));
    }
    let total: f64 = preds
        .iter()
        .zip(truths)
        .map(|(p, t)| {
            let sum: f64 = p.data.iter().zip(&t.data).map(|(&s, &y)| (s as f64 - y as u8 as f64).abs()).sum();
            sum / p.data.len().max(1) as f64
        })
        .sum();
    Ok(total / preds.len() as f64)
}

/// `(1 + β²) P R / (β² P + R)`, with `0 / 0 = 0`.
pub fn f_measure(p: f64, r: f64, beta2: f64) -> f64 {
    let den = beta2 * p + r;
    if den == 0.0 {
        0.0
    } else {
        (1.0 + beta2) * p * r / den
    }
}

pub fn max_f_measure(precision: &[f64], recall: &[f64], beta2: f64) -> f64 {
    precision.iter().zip(recall).map(|(&p, &r)| f_measure(p, r, beta2)).fold(0.0, f64::max)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub thresholds: Vec<f64>,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub mae: f64,
    pub max_f: f64,
    pub images: usize,
}

#[derive(Serialize)]
struct Summary<'a> {
    mae: f64,
    max_f: f64,
    images: usize,
    beta2: f64,
    aggregation: &'a str,
}

impl MetricsReport {
    pub fn compute(preds: &[Map], truths: &[Mask]) -> Result<Self> {
        let curve = pr_curve(preds, truths, DEFAULT_THRESHOLDS)?;
        let max_f = max_f_measure(&curve.precision, &curve.recall, BETA2);
        Ok(MetricsReport {
            mae: mae(preds, truths)?,
            max_f,
            images: curve.images,
            thresholds: curve.thresholds,
            precision: curve.precision,
            recall: curve.recall,
        })
    }

    pub fn csv(&self) -> String {
        let mut out = format!("# aggregation: {AGGREGATION} ({} images)\nthreshold,precision,recall\n", self.images);
        for ((t, p), r) in self.thresholds.iter().zip(&self.precision).zip(&self.recall) {
            let _ = writeln!(out, "{t:.6},{p:.6},{r:.6}");
        }
        out
    }

    pub fn summary_json(&self) -> Result<String> {
        let s = Summary { mae: self.mae, max_f: self.max_f, images: self.images, beta2: BETA2, aggregation: AGGREGATION };
        Ok(serde_json::to_string_pretty(&s)?)
    }

    /// Precision against recall on the unit square.
    pub fn svg(&self) -> String {
        let (size, pad) = (400.0, 40.0);
        let span = size - 2.0 * pad;
        let points: Vec<String> = self
            .recall
            .iter()
            .zip(&self.precision)
            .map(|(r, p)| format!("{:.2},{:.2}", pad + r * span, size - pad - p * span))
            .collect();
        format!(
            concat!(
                "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{s}\" height=\"{s}\">\n",
                "<rect x=\"{p}\" y=\"{p}\" width=\"{w}\" height=\"{w}\" fill=\"none\" stroke=\"black\"/>\n",
                "<text x=\"{mid}\" y=\"{bottom}\" text-anchor=\"middle\">recall</text>\n",
                "<text x=\"12\" y=\"{mid}\" transform=\"rotate(-90 12 {mid})\" text-anchor=\"middle\">precision</text>\n",
                "<text x=\"{mid}\" y=\"24\" text-anchor=\"middle\">max F {f:.4}, MAE {m:.4}</text>\n",
                "<polyline fill=\"none\" stroke=\"steelblue\" stroke-width=\"2\" points=\"{pts}\"/>\n",
                "</svg>\n"
            ),
            s = size,
            p = pad,
            w = span,
            mid = size / 2.0,
            bottom = size - 10.0,
            f = self.max_f,
            m = self.mae,
            pts = points.join(" ")
        )
    }

    /// Writes `pr_curve.csv`, `summary.json` and `pr_curve.svg`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("pr_curve.csv"), self.csv())?;
        std::fs::write(dir.join("summary.json"), self.summary_json()?)?;
        std::fs::write(dir.join("pr_curve.svg"), self.svg())?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn random_pair(rng: &mut impl Rng) -> (Map, Mask) {
        let p = Map::new(8, 8, (0..64).map(|_| rng.random::<f32>()).collect()).unwrap();
        let mut t: Vec<bool> = (0..64).map(|_| rng.random::<f64>() < 0.3).collect();
        t[rng.random_range(0..64)] = true;
        (p, Mask::new(8, 8, t).unwrap())
    }

    #[test]
    fn identical_and_inverted_predictions() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (_, t) = random_pair(&mut rng);
        let c = pr_curve(&[t.to_map()], &[t.clone()], 256).unwrap();
        for k in 1..256 {
            assert_eq!((c.precision[k], c.recall[k]), (1.0, 1.0));
        }
        let inv = Map::new(8, 8, t.data.iter().map(|&b| if b { 0.0 } else { 1.0 }).collect()).unwrap();
        let c = pr_curve(&[inv], &[t], 256).unwrap();
        assert!(c.recall[1..].iter().all(|&r| r == 0.0));
    }

    #[test]
    fn threshold_index_matches_comparisons() {
        let thr = thresholds(256);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut probes: Vec<f64> = (0..2000).map(|_| rng.random::<f32>() as f64).collect();
        probes.extend(thr.iter().copied());
        probes.extend([0.0, 1.0, -0.1, 1.5]);
        for v in probes {
            let want = thr.iter().rposition(|&t| t <= v);
            assert_eq!(top_index(v, &thr), want, "{v}");
        }
    }

    #[test]
    fn mae_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (_, t) = random_pair(&mut rng);
        assert_eq!(mae(&[t.to_map()], &[t.clone()]).unwrap(), 0.0);
        assert_eq!(mae(&[Map::constant(8, 8, 0.5)], &[t]).unwrap(), 0.5);
        let checker = Mask::new(8, 8, (0..64).map(|p| (p % 8 + p / 8) % 2 == 0).collect()).unwrap();
        assert_eq!(mae(&[Map::constant(8, 8, 0.0)], &[checker]).unwrap(), 0.5);
    }

    #[test]
    fn f_measure_examples() {
        assert!((f_measure(0.8, 0.8, BETA2) - 0.8).abs() < 1e-12);
        assert_eq!(max_f_measure(&[1.0, 1.0], &[0.0, 0.0], BETA2), 0.0);
        let f = f_measure(0.9, 0.6, BETA2);
        assert!((f - 1.3 * 0.54 / 0.87).abs() < 1e-12);
        assert!((f - 0.807).abs() < 1e-3);
        assert_eq!(max_f_measure(&[0.9, 0.5, 0.99], &[0.6, 0.9, 0.1], BETA2), f_measure(0.5, 0.9, BETA2).max(f));
    }

    #[test]
    fn images_without_positives_are_skipped() {
        let empty = Mask::new(2, 2, vec![false; 4]).unwrap();
        let one = Mask::new(2, 2, vec![true, false, false, false]).unwrap();
        let m = Map::constant(2, 2, 0.7);
        let c = pr_curve(&[m.clone(), m.clone()], &[empty.clone(), one], 256).unwrap();
        assert_eq!(c.images, 1);
        assert_eq!(c.precision[0], 0.25);
        assert!(pr_curve(&[m], &[empty], 256).is_err());
    }

    #[test]
    fn report_files() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (p, t) = random_pair(&mut rng);
        let r = MetricsReport::compute(&[p], &[t]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        r.write(dir.path()).unwrap();
        let csv = std::fs::read_to_string(dir.path().join("pr_curve.csv")).unwrap();
        assert!(csv.starts_with("# aggregation: per-image"));
        assert_eq!(csv.lines().count(), 2 + 256);
        let json: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join("summary.json")).unwrap()).unwrap();
        assert_eq!(json["max_f"].as_f64(), Some(r.max_f));
        assert!(std::fs::read_to_string(dir.path().join("pr_curve.svg")).unwrap().contains("<polyline"));
    }

    proptest::proptest! {
        #[test]
        fn recall_is_monotone_and_values_bounded(seed in 0u64..200) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (p, t) = random_pair(&mut rng);
            let c = pr_curve(&[p.clone()], &[t.clone()], 256).unwrap();
            proptest::prop_assert!(c.recall.windows(2).all(|w| w[1] <= w[0]));
            proptest::prop_assert!(c.precision.iter().chain(&c.recall).all(|v| (0.0..=1.0).contains(v)));
            let m = mae(&[p.clone()], &[t.clone()]).unwrap();
            let flipped_p = Map::new(8, 8, p.data.iter().map(|v| 1.0 - v).collect()).unwrap();
            let flipped_t = Mask::new(8, 8, t.data.iter().map(|b| !b).collect()).unwrap();
            let m2 = mae(&[flipped_p], &[flipped_t]).unwrap();
            proptest::prop_assert!((m - m2).abs() < 1e-6);
        }
    }
}
