use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::frame::{Frame, Mask};

fn random_frame(h: usize, w: usize, seed: u64) -> Frame {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Frame::from_fn(h, w, 3, |_, _, _| rng.random::<f32>()).unwrap()
}

fn random_tensor(c: usize, h: usize, w: usize, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_vec(c, h, w, (0..c * h * w).map(|_| rng.random_range(-1.0..1.0)).collect())
}

#[test]
fn shapes_are_preserved() {
    let nets = FusionNets::<f32>::new(FusionConfig::default(), 1);
    for (h, w) in [(64, 64), (16, 16), (20, 28), (18, 33)] {
        let a = random_frame(h, w, 2);
        let b = random_frame(h, w, 3);
        let m = Mask::filled(h, w, true);
        let f_int = nets.intermediate(&a, &b, &m, &m).unwrap();
        assert_eq!(f_int.shape(), (h, w, 3));
        assert!(f_int.data().iter().all(|v| (0.0..=1.0).contains(v)));
        let f_hat = nets.refine(&f_int, &a).unwrap();
        assert_eq!(f_hat.shape(), (h, w, 3));
    }
}

#[test]
fn maskless_input_has_six_channels() {
    let cfg = FusionConfig {
        use_masks: false,
        ..FusionConfig::default()
    };
    let nets = FusionNets::<f32>::new(cfg, 1);
    assert_eq!(nets.unet.in_ch, 6);
    let a = random_frame(16, 16, 2);
    let m = Mask::filled(16, 16, false);
    assert_eq!(nets.intermediate(&a, &a, &m, &m).unwrap().shape(), (16, 16, 3));
}

#[test]
fn zeroed_unet_outputs_final_bias_image() {
    let mut nets = FusionNets::<f32>::new(FusionConfig::default(), 4);
    zero_params(&mut nets.unet);
    let a = random_frame(32, 32, 5);
    let m = Mask::filled(32, 32, true);
    let out = nets.intermediate(&a, &a, &m, &m).unwrap();
    assert!(out.data().iter().all(|&v| v == 0.0));

    nets.unet.out.feature.bias = vec![0.4, 1.0, -0.3];
    let out = nets.intermediate(&a, &a, &m, &m).unwrap();
    for c in 0..3 {
        let expected = (nets.unet.out.feature.bias[c].tanh() * 0.5).clamp(0.0, 1.0);
        for y in 0..32 {
            for x in 0..32 {
                assert!((out.get(y, x, c) - expected).abs() < 1e-7);
            }
        }
    }
}

#[test]
fn zeroed_residual_blocks_pass_features_through() {
    let mut net = ResNetRefine::<f64>::new(6, 3, 32, &mut ChaCha8Rng::seed_from_u64(6));
    for b in &mut net.blocks {
        zero_params(&mut b.first);
        zero_params(&mut b.second);
    }
    let x = random_tensor(6, 12, 12, &mut ChaCha8Rng::seed_from_u64(7));
    assert_eq!(net.trunk(&x), net.head.forward(&x));
}

/// Central differences of `loss` against the analytic gradient on sampled
/// parameters. Returns the worst relative error.
fn worst_relative_error<P: Params<f64> + Clone>(
    net: &P,
    grad: &P,
    loss: impl Fn(&P) -> f64,
    samples: usize,
    rng: &mut ChaCha8Rng,
) -> f64 {
    let params = flatten(net);
    let analytic = flatten(grad);
    let mut worst: f64 = 0.0;
    for _ in 0..samples {
        let i = rng.random_range(0..params.len());
        let eps = 1e-6;
        let mut p = params.clone();
        p[i] += eps;
        let mut plus = net.clone();
        assign(&mut plus, &p);
        p[i] -= 2.0 * eps;
        let mut minus = net.clone();
        assign(&mut minus, &p);
        let numeric = (loss(&plus) - loss(&minus)) / (2.0 * eps);
        let denom = numeric.abs().max(analytic[i].abs()).max(1e-7);
        worst = worst.max((numeric - analytic[i]).abs() / denom);
    }
    worst
}

#[test]
fn unet_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let net = UNetFusion::<f64>::new(8, 3, 8, &mut rng);
    let x = random_tensor(8, 8, 8, &mut rng);
    let r = random_tensor(3, 8, 8, &mut rng);
    let loss = |n: &UNetFusion<f64>| n.forward(&x).data.iter().zip(&r.data).map(|(a, b)| a * b).sum::<f64>();
    let (_, cache) = net.forward_cached(&x);
    let mut grad = net.clone();
    zero_params(&mut grad);
    let dx = net.backward(&cache, &r, &mut grad);
    assert!(worst_relative_error(&net, &grad, loss, 25, &mut rng) <= 1e-3);

    // Input gradient, a few coordinates.
    for _ in 0..5 {
        let i = rng.random_range(0..x.data.len());
        let mut xp = x.clone();
        xp.data[i] += 1e-6;
        let mut xm = x.clone();
        xm.data[i] -= 1e-6;
        let f = |t: &Tensor<f64>| net.forward(t).data.iter().zip(&r.data).map(|(a, b)| a * b).sum::<f64>();
        let numeric = (f(&xp) - f(&xm)) / 2e-6;
        assert!((numeric - dx.data[i]).abs() <= 1e-3 * numeric.abs().max(dx.data[i].abs()).max(1e-7));
    }
}

#[test]
fn resnet_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let net = ResNetRefine::<f64>::new(6, 3, 8, &mut rng);
    let x = random_tensor(6, 8, 8, &mut rng);
    let r = random_tensor(3, 8, 8, &mut rng);
    let loss = |n: &ResNetRefine<f64>| n.forward(&x).data.iter().zip(&r.data).map(|(a, b)| a * b).sum::<f64>();
    let (_, cache) = net.forward_cached(&x);
    let mut grad = net.clone();
    zero_params(&mut grad);
    net.backward(&cache, &r, &mut grad);
    assert!(worst_relative_error(&net, &grad, loss, 25, &mut rng) <= 1e-3);
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("nets.ckpt");
    let nets = FusionNets::<f32>::new(FusionConfig::default(), 10);
    save_checkpoint(&nets, 77, &path).unwrap();

    let (loaded, step) = load_checkpoint::<f32>(&path).unwrap();
    assert_eq!(step, 77);
    let (a, b) = (flatten(&nets), flatten(&loaded));
    assert_eq!(a.len(), b.len());
    assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));

    let mut fresh = FusionNets::<f32>::new(FusionConfig::default(), 11);
    assert_ne!(flatten(&fresh), a);
    load_checkpoint_into(&mut fresh, &path).unwrap();
    let f = random_frame(24, 24, 12);
    let m = Mask::filled(24, 24, true);
    assert_eq!(
        nets.intermediate(&f, &f, &m, &m).unwrap(),
        fresh.intermediate(&f, &f, &m, &m).unwrap()
    );
}

#[test]
fn checkpoint_with_wrong_width_names_the_tensor() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("narrow.ckpt");
    let narrow = FusionConfig {
        width: 16,
        ..FusionConfig::default()
    };
    save_checkpoint(&FusionNets::<f32>::new(narrow, 1), 0, &path).unwrap();
    let mut nets = FusionNets::<f32>::new(FusionConfig::default(), 1);
    let err = load_checkpoint_into(&mut nets, &path).unwrap_err().to_string();
    assert!(err.contains("unet.enc1.0.feature.weight"), "{err}");
}

#[test]
fn checkpoint_rejects_other_versions_and_garbage() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.ckpt");
    std::fs::write(&path, b"nonsense").unwrap();
    assert!(load_checkpoint::<f32>(&path).is_err());
    let mut bytes = b"DFCK".to_vec();
    bytes.extend_from_slice(&99u32.to_le_bytes());
    std::fs::write(&path, bytes).unwrap();
    let err = load_checkpoint::<f32>(&path).unwrap_err().to_string();
    assert!(err.contains("version 99"), "{err}");
}

#[test]
fn forward_is_deterministic() {
    let nets = FusionNets::<f32>::new(FusionConfig::default(), 13);
    let a = random_frame(32, 48, 14);
    let b = random_frame(32, 48, 15);
    let m = Mask::filled(32, 48, true);
    let one = nets.intermediate(&a, &b, &m, &m).unwrap();
    let two = nets.intermediate(&a, &b, &m, &m).unwrap();
    assert_eq!(one, two);
}

#[test]
fn rejects_channel_mismatch() {
    let nets = FusionNets::<f32>::new(FusionConfig::default(), 1);
    let gray = Frame::zeros(16, 16, 1).unwrap();
    let m = Mask::filled(16, 16, true);
    assert!(nets.intermediate(&gray, &gray, &m, &m).is_err());
}

#[test]
fn inference_matches_cached_forward() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let unet = UNetFusion::<f64>::new(8, 3, 8, &mut rng);
    let resnet = ResNetRefine::<f64>::new(6, 3, 8, &mut rng);
    let x = random_tensor(8, 12, 16, &mut rng);
    assert_eq!(unet.forward(&x), unet.forward_cached(&x).0);
    let y = random_tensor(6, 12, 16, &mut rng);
    assert_eq!(resnet.forward(&y), resnet.forward_cached(&y).0);
}
