//! End-to-end training run: the ranking loss must actually fall on a
//! synthetic catalog, and the trained network must survive a checkpoint
//! round trip bit-for-bit.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use shelfscan_core::augment::AugmentConfig;
use shelfscan_core::embedder::{train, EmbedderNet, TrainConfig};
use shelfscan_core::tensor::Tensor;

/// Distinctive synthetic product images: a per-product base color with a
/// per-product stripe pattern, plus mild pixel noise.
fn synthetic_catalog(n: usize, size: usize, seed: u64) -> Vec<(String, Tensor)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|p| {
            let base = [rng.random::<f32>(), rng.random::<f32>(), rng.random::<f32>()];
            let stripe = [rng.random::<f32>(), rng.random::<f32>(), rng.random::<f32>()];
            let period = 2 + p % 5;
            let mut data = Vec::with_capacity(size * size * 3);
            for y in 0..size {
                for x in 0..size {
                    let on = (x + y * (p % 3 + 1)) % period == 0;
                    for c in 0..3 {
                        let v = if on { stripe[c] } else { base[c] };
                        let noise = (rng.random::<f32>() - 0.5) * 0.02;
                        data.push((v + noise).clamp(0.0, 1.0));
                    }
                }
            }
            (
                format!("product_{p:02}"),
                Tensor::new(vec![size, size, 3], data).unwrap(),
            )
        })
        .collect()
}

fn small_net(input_size: usize, seed: u64) -> EmbedderNet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut kernel = |k: usize, cin: usize, cout: usize| {
        let n = k * k * cin * cout;
        let scale = (2.0 / (k * k * cin) as f64).sqrt() as f32;
        let data: Vec<f32> = (0..n).map(|_| (rng.random::<f32>() - 0.5) * 2.0 * scale).collect();
        Tensor::new(vec![k, k, cin, cout], data).unwrap()
    };
    // 16 -> conv5 -> 12 -> pool -> 6 -> conv3 -> 4x4 final map, 16 channels.
    EmbedderNet::from_conv_stack(input_size, vec![kernel(5, 3, 8), kernel(3, 8, 16)]).unwrap()
}

#[test]
fn training_lowers_the_ranking_loss_on_a_synthetic_catalog() {
    let images = synthetic_catalog(20, 20, 11);
    let mut net = small_net(16, 5);
    let cfg = TrainConfig {
        alpha: 0.1,
        lr: 1e-3,
        steps: 400,
        batch: 8,
        seed: 7,
        input_size: 16,
        dim: 16,
        aug: AugmentConfig::default(),
    };
    let losses = train(&mut net, &images, &cfg).unwrap();
    assert_eq!(losses.len(), cfg.steps);
    assert!(losses.iter().all(|l| l.is_finite() && *l >= 0.0));

    let head: f64 = losses[..50].iter().sum::<f64>() / 50.0;
    let tail: f64 = losses[losses.len() - 50..].iter().sum::<f64>() / 50.0;
    assert!(
        tail < head,
        "loss did not fall: first-50 mean {head}, last-50 mean {tail}"
    );
}

#[test]
fn trained_network_round_trips_through_a_checkpoint() {
    let images = synthetic_catalog(6, 20, 3);
    let mut net = small_net(16, 9);
    let cfg = TrainConfig {
        alpha: 0.1,
        lr: 1e-3,
        steps: 40,
        batch: 4,
        seed: 21,
        input_size: 16,
        dim: 16,
        aug: AugmentConfig::identity(),
    };
    train(&mut net, &images, &cfg).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("weights.bin");
    net.save(&path).unwrap();
    let restored = EmbedderNet::load(&path, 16).unwrap();

    let a = net.embed(&images[0].1).unwrap();
    let b = restored.embed(&images[0].1).unwrap();
    assert_eq!(a.values(), b.values(), "descriptors must match bit-for-bit");
}
