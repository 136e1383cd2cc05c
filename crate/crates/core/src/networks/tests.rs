use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::tensor::gradcheck::{check_gradients, GradCheckConfig};
use crate::tensor::{ParamStore, Tape, Tensor};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn mini_backbone(blocks: usize, stride: usize) -> BackboneConfig {
    BackboneConfig { in_channels: 3, widths: vec![8; blocks], output_stride: stride, activation: Activation::Tanh, batch_norm: true }
}

fn random_images<F: crate::tensor::Scalar>(n: usize, h: usize, w: usize, seed: u64) -> Tensor<F> {
    use rand::Rng;
    let mut r = rng(seed);
    Tensor::from_fn([n, 3, h, w], |_| F::lit(r.random_range(-0.5..0.5)))
}

fn feature_shape(cfg: &BackboneConfig, h: usize, w: usize) -> Vec<usize> {
    let bb = Backbone::new("x", cfg.clone()).unwrap();
    let mut store = ParamStore::<f32>::new();
    bb.init(&mut store, &mut rng(0)).unwrap();
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape, false);
    let x = tape.constant(Tensor::zeros([1, 3, h, w]));
    let f = bb.forward(&mut tape, &bound, x).unwrap();
    tape.shape(f).to_vec()
}

#[test]
fn schedule_strides_then_dilates() {
    assert_eq!(BackboneConfig::stride16().schedule(), vec![(2, 1), (2, 1), (2, 1), (2, 1)]);
    assert_eq!(BackboneConfig::stride8().schedule(), vec![(2, 1), (2, 1), (2, 1), (1, 2)]);
    let bad = BackboneConfig { output_stride: 32, ..BackboneConfig::stride16() };
    assert!(bad.validate().is_err());
}

#[test]
fn full_scale_feature_grids() {
    assert_eq!(feature_shape(&BackboneConfig::stride16(), 256, 256), [1, 128, 16, 16]);
    assert_eq!(feature_shape(&BackboneConfig::stride8(), 256, 256), [1, 128, 32, 32]);
}

#[test]
fn stride_arithmetic_across_sizes() {
    let mut narrow16 = BackboneConfig::stride16();
    narrow16.widths = vec![4, 4, 4, 4];
    let narrow8 = BackboneConfig { output_stride: 8, ..narrow16.clone() };
    for h in [64, 128, 256] {
        for w in [64, 128, 256] {
            assert_eq!(feature_shape(&narrow16, h, w), [1, 4, h / 16, w / 16]);
            assert_eq!(feature_shape(&narrow8, h, w), [1, 4, h / 8, w / 8]);
        }
    }
}

#[test]
fn indivisible_extent_is_rejected() {
    let bb = Backbone::new("x", BackboneConfig::stride16()).unwrap();
    let mut store = ParamStore::<f32>::new();
    bb.init(&mut store, &mut rng(0)).unwrap();
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape, false);
    let x = tape.constant(Tensor::zeros([1, 3, 100, 96]));
    let err = bb.forward(&mut tape, &bound, x).unwrap_err().to_string();
    assert!(err.contains("100x96") && err.contains("16"), "{err}");
}

#[test]
fn zero_image_zero_bias_gives_zero_features() {
    for act in [Activation::Relu, Activation::Tanh] {
        let cfg = BackboneConfig { activation: act, ..BackboneConfig::stride8() };
        let bb = Backbone::new("x", cfg).unwrap();
        let mut store = ParamStore::<f32>::new();
        bb.init(&mut store, &mut rng(1)).unwrap();
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape, false);
        let x = tape.constant(Tensor::zeros([2, 3, 32, 32]));
        let f = bb.forward(&mut tape, &bound, x).unwrap();
        assert!(tape.value(f).data().iter().all(|&v| v == 0.0));
    }
}

#[test]
fn cnet_output_contracts() {
    let net = CNet::new(CNetConfig::new(4)).unwrap();
    let mut store = ParamStore::<f32>::new();
    net.init(&mut store, &mut rng(2)).unwrap();
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape, false);
    let x = tape.constant(random_images(1, 256, 256, 3));
    let out = net.forward(&mut tape, &bound, x).unwrap();
    assert_eq!(tape.shape(out.logits), [1, 4]);
    assert_eq!(tape.shape(out.saliency), [1, 1, 16, 16]);
    assert!(tape.value(out.saliency).data().iter().all(|&s| s > 0.0 && s < 1.0));

    for (_, t) in store.iter_mut() {
        t.data_mut().fill(0.0);
    }
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape, false);
    let x = tape.constant(random_images(2, 64, 64, 4));
    let out = net.forward(&mut tape, &bound, x).unwrap();
    let logits = tape.value(out.logits).data();
    assert!(logits.iter().all(|&l| l == logits[0]));
}

fn small_pnet(vocab: usize) -> (PNet, ParamStore<f64>) {
    let cfg = PNetConfig {
        backbone: mini_backbone(2, 4),
        attended_dim: 6,
        vocab_size: vocab,
        embed_dim: 5,
        hidden_dim: 7,
    };
    let net = PNet::new(cfg).unwrap();
    let mut store = ParamStore::new();
    net.init(&mut store, &mut rng(5)).unwrap();
    (net, store)
}

fn pnet_logits(net: &PNet, store: &ParamStore<f64>, images: &Tensor<f64>, caps: &[Vec<usize>]) -> Vec<Vec<f64>> {
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape, false);
    let x = tape.constant(images.clone());
    let out = net.forward(&mut tape, &bound, x, caps).unwrap();
    out.step_logits.iter().map(|&v| tape.value(v).data().to_vec()).collect()
}

#[test]
fn pnet_minimal_caption_and_determinism() {
    let (net, store) = small_pnet(9);
    let img = random_images(1, 12, 12, 6);
    let one = pnet_logits(&net, &store, &img, &[vec![BOS, EOS]]);
    assert_eq!(one.len(), 1);
    assert_eq!(one[0].len(), 9);
    let caps = vec![vec![BOS, 3, 4, EOS]];
    assert_eq!(pnet_logits(&net, &store, &img, &caps), pnet_logits(&net, &store, &img, &caps));
}

#[test]
fn pnet_is_causal() {
    let (net, store) = small_pnet(9);
    let img = random_images(1, 12, 12, 7);
    let a = pnet_logits(&net, &store, &img, &[vec![BOS, 3, 4, 5, EOS]]);
    let b = pnet_logits(&net, &store, &img, &[vec![BOS, 3, 4, 8, EOS]]);
    // Token 3 is consumed at step 3, so steps 0..=2 cannot see the change.
    for t in 0..3 {
        assert_eq!(a[t], b[t], "step {t}");
    }
    assert_ne!(a[3], b[3]);
}

#[test]
fn pnet_rejects_bad_tokens() {
    let (net, store) = small_pnet(9);
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape, false);
    let x = tape.constant(random_images(1, 12, 12, 8));
    assert!(net.forward(&mut tape, &bound, x, &[vec![BOS, 9, EOS]]).is_err());
    assert!(net.forward(&mut tape, &bound, x, &[vec![3, 4, EOS]]).is_err());
}

#[test]
fn pnet_softmax_rows_normalize() {
    let (net, store) = small_pnet(9);
    let img = random_images(2, 12, 12, 9);
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape, false);
    let x = tape.constant(img);
    let out = net.forward(&mut tape, &bound, x, &[vec![BOS, 3, EOS], vec![BOS, 4, EOS]]).unwrap();
    for &l in &out.step_logits {
        let p = tape.softmax(l).unwrap();
        for row in tape.value(p).data().chunks(9) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
}

#[test]
fn snet_shape_and_zero_branches() {
    let net = SNet::new(SNetConfig::default()).unwrap();
    let mut store = ParamStore::<f32>::new();
    net.init(&mut store, &mut rng(10)).unwrap();
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape, false);
    let x = tape.constant(random_images(1, 64, 96, 11));
    let s = net.forward(&mut tape, &bound, x).unwrap();
    assert_eq!(tape.shape(s), [1, 1, 64, 96]);

    for i in 0..4 {
        store.get_mut(&format!("snet.branch{i}.weight")).unwrap().data_mut().fill(0.0);
    }
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape, false);
    let x = tape.constant(random_images(1, 64, 64, 12));
    let s = net.forward(&mut tape, &bound, x).unwrap();
    assert!(tape.value(s).data().iter().all(|&v| v == 0.5));
}

#[test]
fn snet_impulse_reaches_far_pixels() {
    let net = SNet::new(SNetConfig::default()).unwrap();
    let mut store = ParamStore::<f64>::new();
    net.init(&mut store, &mut rng(13)).unwrap();
    let run = |img: Tensor<f64>| {
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape, false);
        let x = tape.constant(img);
        let s = net.logits(&mut tape, &bound, x).unwrap();
        tape.value(s).clone()
    };
    let base = run(Tensor::zeros([1, 3, 128, 128]));
    let mut impulse = Tensor::zeros([1, 3, 128, 128]);
    for c in 0..3 {
        let o = impulse.offset(&[0, c, 64, 64]);
        impulse.data_mut()[o] = 1.0;
    }
    let hit = run(impulse);
    let far = (0..128 * 128).any(|i| {
        let (y, x) = ((i / 128) as i64, (i % 128) as i64);
        let dist = (y - 64).abs().max((x - 64).abs());
        dist >= 48 && (hit.data()[i] - base.data()[i]).abs() > 1e-12
    });
    assert!(far);
}

#[test]
fn vocab_round_trip() {
    let v = VocabIndex::from_words("a red circle on the left a".split(' '));
    assert_eq!(v.len(), 3 + 6);
    assert_eq!(v.token(PAD), Some("<pad>"));
    let ids = v.encode("a red circle").unwrap();
    assert_eq!(ids.first(), Some(&BOS));
    assert_eq!(ids.last(), Some(&EOS));
    assert_eq!(v.decode(&ids), "a red circle");
    assert!(v.encode("blue").is_err());
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("vocab.json");
    v.save(&path).unwrap();
    assert_eq!(VocabIndex::load(&path).unwrap(), v);
    for i in 0..v.len() {
        assert_eq!(v.id(v.token(i).unwrap()), Some(i));
    }
}

fn gradcheck_net(store: &mut ParamStore<f64>, f: impl FnMut(&mut Tape<f64>, &crate::tensor::Bound) -> crate::Result<crate::tensor::Var>) {
    let report = check_gradients(store, None, GradCheckConfig::default(), f).unwrap();
    assert!(report.passes(1e-5), "{report:?}");
}

#[test]
fn miniature_cnet_gradients() {
    let cfg = CNetConfig { backbone: mini_backbone(2, 4), attended_dim: 6, classes: 3 };
    let net = CNet::new(cfg).unwrap();
    let mut store = ParamStore::new();
    net.init(&mut store, &mut rng(14)).unwrap();
    let img = random_images(2, 12, 12, 15);
    let weights = Tensor::from_fn([2, 3], |i| i as f64 * 0.3 - 0.7);
    gradcheck_net(&mut store, |tape, b| {
        let x = tape.constant(img.clone());
        let out = net.forward(tape, b, x)?;
        let w = tape.constant(weights.clone());
        let y = tape.mul(out.logits, w)?;
        let s = tape.sum(out.saliency);
        let y = tape.sum(y);
        tape.add(y, s)
    });
}

#[test]
fn miniature_pnet_gradients() {
    let (net, mut store) = small_pnet(6);
    let img = random_images(2, 12, 12, 16);
    let caps = vec![vec![BOS, 3, 4, EOS], vec![BOS, 5, EOS]];
    gradcheck_net(&mut store, |tape, b| {
        let x = tape.constant(img.clone());
        let out = net.forward(tape, b, x, &caps)?;
        let mut total = tape.sum(out.saliency);
        for (t, &l) in out.step_logits.iter().enumerate() {
            let lp = tape.log_softmax(l)?;
            let picked = tape.pick(lp, &[caps[0][t + 1], caps[1].get(t + 1).copied().unwrap_or(0)])?;
            let s = tape.sum(picked);
            total = tape.add(total, s)?;
        }
        Ok(total)
    });
}

#[test]
fn miniature_snet_gradients() {
    let cfg = SNetConfig { backbone: mini_backbone(3, 4), rates: vec![1, 2] };
    let net = SNet::new(cfg).unwrap();
    let mut store = ParamStore::new();
    net.init(&mut store, &mut rng(17)).unwrap();
    let img = random_images(2, 12, 12, 18);
    let weights = Tensor::from_fn([2, 1, 12, 12], |i| ((i * 7) % 11) as f64 / 11.0 - 0.5);
    gradcheck_net(&mut store, |tape, b| {
        let x = tape.constant(img.clone());
        let s = net.forward(tape, b, x)?;
        let w = tape.constant(weights.clone());
        let y = tape.mul(s, w)?;
        Ok(tape.sum(y))
    });
}
