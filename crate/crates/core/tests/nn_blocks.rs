//! Block-level properties: attention structure, MLP algebra, and
//! checkpoint round trips with corruption handling.

mod common;

use common::*;
use rand_chacha::ChaCha8Rng;

use msfpt_core::nn::{
    init_params, load_checkpoint, save_checkpoint, CheckpointError, CheckpointMeta, LinearLayer,
    MlpBlock, MultiHeadAttention,
};
use msfpt_core::train::AdamState;
use msfpt_core::{ModelConfig, Scale, Tensor};

fn tiny_cfg() -> ModelConfig {
    ModelConfig {
        embed_dim: 8,
        num_layers: 1,
        num_heads: 2,
        mlp_dim: 16,
        target_h: 3,
        target_w: 3,
        block_channels: 2,
        scales: Scale::ALL.to_vec(),
    }
}

fn toy_mha(seed: u64, d: usize, heads: usize) -> MultiHeadAttention<f64> {
    use rand::SeedableRng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    MultiHeadAttention {
        num_heads: heads,
        w_q: const_tensor(&mut rng, &[d, d]),
        w_k: const_tensor(&mut rng, &[d, d]),
        w_v: const_tensor(&mut rng, &[d, d]),
        w_o: const_tensor(&mut rng, &[d, d]),
    }
}

#[test]
fn attention_weights_are_a_distribution() {
    use rand::SeedableRng;
    let mha = toy_mha(0, 8, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let q = const_tensor(&mut rng, &[5, 8]);
    let k = const_tensor(&mut rng, &[7, 8]);
    for head in 0..2 {
        let w = mha.attention_weights(&q, &k, head).unwrap();
        assert_eq!(w.shape(), &[5, 7]);
        let data = w.to_vec();
        for row in data.chunks(7) {
            assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn attention_on_singleton_sequence_is_value_projection() {
    use rand::SeedableRng;
    let mha = toy_mha(2, 6, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = const_tensor(&mut rng, &[1, 6]);
    // One key: softmax weight is exactly 1, so out = (x·Wv)·Wo.
    let out = mha.forward(&x, &x, &x).unwrap();
    let expect = x.matmul(&mha.w_v).unwrap().matmul(&mha.w_o).unwrap();
    for (a, b) in out.to_vec().iter().zip(expect.to_vec()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn attention_is_permutation_equivariant_in_queries() {
    use rand::SeedableRng;
    let mha = toy_mha(4, 8, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let q = const_tensor(&mut rng, &[4, 8]);
    let kv = const_tensor(&mut rng, &[6, 8]);
    let out = mha.forward(&q, &kv, &kv).unwrap().to_vec();

    // Reverse the query rows; the output rows must reverse identically.
    let qd = q.to_vec();
    let mut rev = Vec::with_capacity(qd.len());
    for r in (0..4).rev() {
        rev.extend_from_slice(&qd[r * 8..(r + 1) * 8]);
    }
    let q_rev = Tensor::from_vec(vec![4, 8], rev).unwrap();
    let out_rev = mha.forward(&q_rev, &kv, &kv).unwrap().to_vec();
    for r in 0..4 {
        for c in 0..8 {
            assert!((out[r * 8 + c] - out_rev[(3 - r) * 8 + c]).abs() < 1e-12);
        }
    }
}

#[test]
fn mlp_can_represent_identity() {
    // relu(x) - relu(-x) = x, encoded as fc1 = [I; -I], fc2 = [I, -I].
    let d = 3;
    let mut fc1_w = vec![0.0f64; 2 * d * d];
    let mut fc2_w = vec![0.0f64; d * 2 * d];
    for i in 0..d {
        fc1_w[i * d + i] = 1.0;
        fc1_w[(d + i) * d + i] = -1.0;
        fc2_w[i * 2 * d + i] = 1.0;
        fc2_w[i * 2 * d + d + i] = -1.0;
    }
    let mlp = MlpBlock {
        fc1: LinearLayer {
            weight: Tensor::from_vec(vec![2 * d, d], fc1_w).unwrap(),
            bias: Tensor::zeros(vec![2 * d]),
        },
        fc2: LinearLayer {
            weight: Tensor::from_vec(vec![d, 2 * d], fc2_w).unwrap(),
            bias: Tensor::zeros(vec![d]),
        },
    };
    let x = Tensor::from_vec(vec![2, 3], vec![0.7, -1.3, 0.0, 2.5, -0.1, 4.0]).unwrap();
    let y = mlp.forward(&x).unwrap();
    assert_eq!(y.to_vec(), x.to_vec());
}

fn meta(cfg: &ModelConfig) -> CheckpointMeta {
    CheckpointMeta {
        model: cfg.clone(),
        patch_size: 48,
        mos_min: 1.0,
        mos_max: 5.0,
        seed: 17,
    }
}

#[test]
fn checkpoint_round_trip_bit_exact() {
    let cfg = tiny_cfg();
    let store = init_params::<f32>(&cfg, 17).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&store, &meta(&cfg), None, &path).unwrap();
    let (loaded, m, opt) = load_checkpoint(&path).unwrap();
    assert!(opt.is_none());
    assert_eq!(m.patch_size, 48);
    assert_eq!(m.mos_min, 1.0);
    assert_eq!(m.model, cfg);
    assert_eq!(loaded.len(), store.len());
    for ((n1, t1), (n2, t2)) in store.iter().zip(loaded.iter()) {
        assert_eq!(n1, n2);
        assert_eq!(t1.shape(), t2.shape());
        assert_eq!(t1.to_vec(), t2.to_vec());
        assert_eq!(t1.requires_grad(), t2.requires_grad());
    }
    // The frozen backbone stays frozen through the round trip.
    assert!(!loaded.get("backbone.stage0.weight").unwrap().requires_grad());
}

#[test]
fn checkpoint_round_trip_with_optimizer_state() {
    let cfg = tiny_cfg();
    let store = init_params::<f32>(&cfg, 3).unwrap();
    let mut state = AdamState::new(&store);
    // Give the moments non-trivial values via one real backward sweep.
    let mut loss = Tensor::zeros(vec![1]);
    for (_, p) in store.trainable() {
        loss = loss.add(&p.sum().unwrap()).unwrap();
    }
    loss.backward().unwrap();
    let tc: msfpt_core::train::TrainConfig =
        serde_json::from_str("{\"total_steps\":10}").unwrap();
    msfpt_core::train::adam_step(&store, &mut state, 1e-3, &tc).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&store, &meta(&cfg), Some(&state), &path).unwrap();
    let (_, _, opt) = load_checkpoint(&path).unwrap();
    let opt = opt.expect("optimizer section present");
    assert_eq!(opt.step_count(), 1);
    for name in state.moment_names() {
        let (m1, v1) = state.moments(name).unwrap();
        let (m2, v2) = opt.moments(name).unwrap();
        assert_eq!(m1, m2, "first moment mismatch for {name}");
        assert_eq!(v1, v2, "second moment mismatch for {name}");
    }
}

#[test]
fn checkpoint_rejects_corruption() {
    let cfg = tiny_cfg();
    let store = init_params::<f32>(&cfg, 0).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&store, &meta(&cfg), None, &path).unwrap();
    let good = std::fs::read(&path).unwrap();

    // Flipped payload byte -> checksum failure.
    let mut bad = good.clone();
    let mid = bad.len() / 2;
    bad[mid] ^= 0x40;
    std::fs::write(&path, &bad).unwrap();
    assert!(matches!(
        load_checkpoint(&path),
        Err(CheckpointError::Checksum)
    ));

    // Truncation -> checksum failure (the trailing CRC no longer matches).
    let mut bad = good.clone();
    bad.truncate(bad.len() - 16);
    std::fs::write(&path, &bad).unwrap();
    assert!(matches!(
        load_checkpoint(&path),
        Err(CheckpointError::Checksum)
    ));

    // Shorter than the CRC itself -> truncated.
    std::fs::write(&path, &good[..4]).unwrap();
    assert!(matches!(
        load_checkpoint(&path),
        Err(CheckpointError::Truncated(_))
    ));

    // Wrong magic with a valid CRC -> bad magic.
    let mut body = good[..good.len() - 8].to_vec();
    body[..4].copy_from_slice(b"XXXX");
    let crc = recompute_crc(&body);
    body.extend_from_slice(&crc.to_le_bytes());
    std::fs::write(&path, &body).unwrap();
    assert!(matches!(
        load_checkpoint(&path),
        Err(CheckpointError::BadMagic)
    ));

    // Unsupported version with a valid CRC -> version error.
    let mut body = good[..good.len() - 8].to_vec();
    body[4..8].copy_from_slice(&9u32.to_le_bytes());
    let crc = recompute_crc(&body);
    body.extend_from_slice(&crc.to_le_bytes());
    std::fs::write(&path, &body).unwrap();
    assert!(matches!(
        load_checkpoint(&path),
        Err(CheckpointError::Version(9))
    ));
}

// Same CRC-64/ECMA (XZ variant) as the checkpoint writer, reimplemented
// bitwise so the test does not depend on the writer's own table.
fn recompute_crc(bytes: &[u8]) -> u64 {
    const POLY: u64 = 0xC96C_5795_D787_0F42;
    let mut crc = !0u64;
    for &b in bytes {
        crc ^= b as u64;
        for _ in 0..8 {
            crc = if crc & 1 == 1 { (crc >> 1) ^ POLY } else { crc >> 1 };
        }
    }
    !crc
}

#[test]
fn init_is_deterministic_and_seed_sensitive() {
    let cfg = tiny_cfg();
    let a = init_params::<f32>(&cfg, 7).unwrap();
    let b = init_params::<f32>(&cfg, 7).unwrap();
    let c = init_params::<f32>(&cfg, 8).unwrap();
    for ((_, ta), (_, tb)) in a.iter().zip(b.iter()) {
        assert_eq!(ta.to_vec(), tb.to_vec());
    }
    let differs = a
        .iter()
        .zip(c.iter())
        .any(|((_, ta), (_, tc))| ta.to_vec() != tc.to_vec());
    assert!(differs);
}
