//! The SNet evaluation and inference paths must never call the refiner.
//! Kept in its own test binary so the process-wide call counter is not
//! shared with other tests.

mod common;

use weaksal::data::{PseudoConfig, Source};
use weaksal::pseudo::refiner_invocations;
use weaksal::train::{evaluate, gen_pseudo, infer, load_snet, load_weak, predict_snet, SnetTrainer, WeakTrainer};

use common::*;

#[test]
fn snet_eval_and_infer_never_refine() {
    let dir = tempfile::tempdir().unwrap();
    let (train, eval, vocab) = tiny_data(&dir.path().join("data"), 3, 4);
    let mut cfg = tiny_weak();
    cfg.steps = 3;
    WeakTrainer::new(cfg, &train, &vocab).unwrap().run(&dir.path().join("weak")).unwrap();
    let bundle = load_weak(&dir.path().join("weak/weak.ckpt")).unwrap();

    let before = refiner_invocations();
    let pseudo = PseudoConfig { sources: vec![Source::Unlabelled, Source::Category], ..PseudoConfig::default() };
    let summary = gen_pseudo(&bundle, &train, &pseudo, &dir.path().join("pseudo")).unwrap();
    assert_eq!(refiner_invocations() - before, summary.written, "the counter must see pseudo-label refinement");

    SnetTrainer::new(tiny_snet(), &summary.manifest).unwrap().run(&dir.path().join("snet")).unwrap();
    let (snet, store) = load_snet(&dir.path().join("snet/snet.ckpt")).unwrap();

    let before = refiner_invocations();
    let report = evaluate(&snet, &store, &eval, Some(&dir.path().join("report"))).unwrap();
    assert_eq!(report.images, 4);
    let image = weaksal::imaging::RgbImage::load(&eval.resolve(&eval.records[0].image)).unwrap();
    predict_snet(&snet, &store, &[&image]).unwrap();
    infer(&snet, &store, &[eval.resolve(&eval.records[0].image)], &dir.path().join("maps")).unwrap();
    assert_eq!(refiner_invocations(), before, "SNet evaluation refined a map");
}
