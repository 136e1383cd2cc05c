use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{Manifest, PseudoConfig, SnetTrainConfig};
use crate::error::{Error, Result};
use crate::imaging::{image_batch, Map, Mask, RgbImage};
use crate::metrics::MetricsReport;
use crate::networks::SNet;
use crate::pseudo::{fuse_maps, pseudo_label, write_pseudo_labels, PSEUDO_MANIFEST};
use crate::tensor::{checkpoint, ParamStore, Tape};

use super::{load_samples, WeakHyper, WeakModels};

const CHUNK: usize = 8;

/// Trained weak-stage networks ready for inference.
pub struct WeakBundle {
    pub hyper: WeakHyper,
    pub models: WeakModels,
    pub store: ParamStore<f32>,
}

pub fn load_weak(path: &Path) -> Result<WeakBundle> {
    let ckpt = checkpoint::load(path)?;
    let hyper: WeakHyper = serde_json::from_value(ckpt.sidecar.hyperparameters)?;
    let models = WeakModels::new(&hyper)?;
    Ok(WeakBundle { hyper, models, store: ckpt.tensors })
}

/// Coarse maps of both networks, computed at the training resolution.
pub fn coarse_maps(bundle: &WeakBundle, images: &[&RgbImage]) -> Result<(Option<Vec<Map>>, Option<Vec<Map>>)> {
    let size = bundle.hyper.config.image_size;
    let (mut all_c, mut all_p) = (Vec::new(), Vec::new());
    for chunk in images.chunks(CHUNK) {
        let resized: Vec<RgbImage> = chunk.iter().map(|i| i.resize(size, size)).collect();
        let mut tape = Tape::<f32>::new();
        tape.set_eval(true);
        let bound = bundle.store.bind(&mut tape, false);
        let x = tape.constant(image_batch(&resized.iter().collect::<Vec<_>>())?);
        let (s_c, s_p) = bundle.models.saliency(&mut tape, &bound, x)?;
        if let Some(s) = s_c {
            all_c.extend(Map::from_batch(tape.value(s))?);
        }
        if let Some(s) = s_p {
            all_p.extend(Map::from_batch(tape.value(s))?);
        }
    }
    let some = |v: Vec<Map>| if v.is_empty() { None } else { Some(v) };
    Ok((
        bundle.models.cnet.as_ref().and(some(all_c)),
        bundle.models.pnet.as_ref().and(some(all_p)),
    ))
}

/// Which coarse map is scored.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CoarseKind {
    Category,
    Caption,
    Fused,
}

#[derive(Clone, Debug)]
pub struct CoarseEval {
    pub report: MetricsReport,
    /// Mean IoU of the maps binarized at 0.5.
    pub mean_iou: f64,
}

/// Scores upsampled coarse maps against the ground-truth masks of `manifest`.
/// A fused map falls back to the single available network.
pub fn evaluate_coarse(bundle: &WeakBundle, manifest: &Manifest, kind: CoarseKind) -> Result<CoarseEval> {
    let records: Vec<_> = manifest.records.iter().filter(|r| r.gt_mask.is_some()).collect();
    let samples = load_samples(manifest, &records, None, true);
    if samples.is_empty() {
        return Err(Error::Invalid("no evaluation records with ground truth".into()));
    }
    let images: Vec<&RgbImage> = samples.iter().map(|s| &s.image).collect();
    let (c, p) = coarse_maps(bundle, &images)?;
    let missing = |what: &str| Error::Invalid(format!("checkpoint has no {what} network"));
    let mut preds = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let (w, h) = (s.image.width, s.image.height);
        let map = match (kind, &c, &p) {
            (CoarseKind::Category, Some(c), _) => c[i].resize(w, h),
            (CoarseKind::Caption, _, Some(p)) => p[i].resize(w, h),
            (CoarseKind::Fused, Some(c), Some(p)) => fuse_maps(&c[i], &p[i], w, h)?,
            (CoarseKind::Fused, Some(m), None) | (CoarseKind::Fused, None, Some(m)) => m[i].resize(w, h),
            (CoarseKind::Category, None, _) => return Err(missing("category")),
            (CoarseKind::Caption, _, None) => return Err(missing("caption")),
            (CoarseKind::Fused, None, None) => return Err(missing("coarse")),
        };
        preds.push(map);
    }
    let truths: Vec<Mask> = samples.into_iter().map(|s| s.mask.expect("loaded with masks")).collect();
    let mut iou = 0.0;
    for (m, t) in preds.iter().zip(&truths) {
        iou += Mask::threshold(m, 0.5).iou(t)?;
    }
    Ok(CoarseEval { report: MetricsReport::compute(&preds, &truths)?, mean_iou: iou / truths.len() as f64 })
}

#[derive(Clone, Debug, PartialEq)]
pub struct PseudoSummary {
    pub manifest: PathBuf,
    pub written: usize,
    pub skipped: usize,
}

/// Fuses, refines and binarizes the coarse maps of every record whose
/// source is listed in `cfg.sources`.
pub fn gen_pseudo(bundle: &WeakBundle, manifest: &Manifest, cfg: &PseudoConfig, out_dir: &Path) -> Result<PseudoSummary> {
    let records: Vec<_> = manifest.records.iter().filter(|r| cfg.sources.contains(&r.source)).collect();
    let samples = load_samples(manifest, &records, None, false);
    let skipped = records.len() - samples.len();
    let paths: std::collections::HashMap<&str, String> =
        records.iter().map(|r| (r.id.as_str(), manifest.resolve(&r.image).display().to_string())).collect();
    let mut labels = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(CHUNK) {
        let images: Vec<&RgbImage> = chunk.iter().map(|s| &s.image).collect();
        let (c, p) = coarse_maps(bundle, &images)?;
        let (c, p) = match (c, p) {
            (Some(c), Some(p)) => (c, p),
            (Some(m), None) | (None, Some(m)) => (m.clone(), m),
            (None, None) => return Err(Error::Invalid("checkpoint holds no network".into())),
        };
        for (i, s) in chunk.iter().enumerate() {
            let label = pseudo_label(&s.id, &s.image, &c[i], &p[i], &cfg.refiner, cfg.threshold)?;
            labels.push((label, paths[s.id.as_str()].clone()));
        }
    }
    write_pseudo_labels(out_dir, &labels)?;
    log::info!("{} pseudo labels written, {skipped} skipped", labels.len());
    Ok(PseudoSummary { manifest: out_dir.join(PSEUDO_MANIFEST), written: labels.len(), skipped })
}

pub fn load_snet(path: &Path) -> Result<(SNet, ParamStore<f32>)> {
    let ckpt = checkpoint::load(path)?;
    let config: SnetTrainConfig = serde_json::from_value(ckpt.sidecar.hyperparameters)?;
    Ok((SNet::new(config.snet)?, ckpt.tensors))
}

/// End-to-end SNet maps at each image's own size. Inputs are resized to the
/// nearest multiple of the output stride and the output resized back.
pub fn predict_snet(snet: &SNet, store: &ParamStore<f32>, images: &[&RgbImage]) -> Result<Vec<Map>> {
    let stride = snet.config.backbone.output_stride;
    let fit = |v: usize| ((v + stride / 2) / stride).max(1) * stride;
    let mut out = Vec::with_capacity(images.len());
    let mut start = 0;
    while start < images.len() {
        let (w, h) = (images[start].width, images[start].height);
        let mut end = start + 1;
        while end < images.len() && end - start < CHUNK && (images[end].width, images[end].height) == (w, h) {
            end += 1;
        }
        let (fw, fh) = (fit(w), fit(h));
        let resized: Vec<RgbImage> = images[start..end].iter().map(|i| i.resize(fw, fh)).collect();
        let mut tape = Tape::<f32>::new();
        tape.set_eval(true);
        let bound = store.bind(&mut tape, false);
        let x = tape.constant(image_batch(&resized.iter().collect::<Vec<_>>())?);
        let s = snet.forward(&mut tape, &bound, x)?;
        out.extend(Map::from_batch(tape.value(s))?.into_iter().map(|m| m.resize(w, h)));
        start = end;
    }
    Ok(out)
}

/// Scores SNet on every record of `manifest` that has a ground-truth mask
/// and writes the report files to `out_dir`.
pub fn evaluate(snet: &SNet, store: &ParamStore<f32>, manifest: &Manifest, out_dir: Option<&Path>) -> Result<MetricsReport> {
    let records: Vec<_> = manifest.records.iter().filter(|r| r.gt_mask.is_some()).collect();
    let samples = load_samples(manifest, &records, None, true);
    if samples.is_empty() {
        return Err(Error::Invalid("no evaluation records with ground truth".into()));
    }
    let preds = predict_snet(snet, store, &samples.iter().map(|s| &s.image).collect::<Vec<_>>())?;
    let truths: Vec<Mask> = samples.into_iter().map(|s| s.mask.expect("loaded with masks")).collect();
    let report = MetricsReport::compute(&preds, &truths)?;
    if let Some(dir) = out_dir {
        report.write(dir)?;
    }
    Ok(report)
}

/// Writes `<stem>.png` per input; returns the written paths.
pub fn infer(snet: &SNet, store: &ParamStore<f32>, paths: &[PathBuf], out_dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir)?;
    let mut written = Vec::with_capacity(paths.len());
    for path in paths {
        let image = RgbImage::load(path)?;
        let map = predict_snet(snet, store, &[&image])?.remove(0);
        let stem = path.file_stem().ok_or_else(|| Error::Invalid(format!("no file name in {}", path.display())))?;
        let target = out_dir.join(stem).with_extension("png");
        map.save_png(&target)?;
        written.push(target);
    }
    Ok(written)
}
