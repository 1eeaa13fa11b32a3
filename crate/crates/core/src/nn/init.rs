//! Deterministic parameter initialization.
//!
//! Weights are drawn from Uniform(−a, +a) with a = sqrt(6 / (fan_in +
//! fan_out)); biases start at zero, layer-norm gains at one, and quality /
//! positional embeddings from Normal(0, 0.02). All draws come from a single
//! ChaCha8 stream (a counter-based PRNG) consumed in lexicographic parameter
//! order, so identical `(config, seed)` yields bit-identical stores.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{NnError, ParamStore};
use crate::config::ModelConfig;
use crate::elem::Elem;
use crate::tensor::Tensor;

#[derive(Clone, Copy)]
enum InitKind {
    UniformFan { fan_in: usize, fan_out: usize },
    Embedding,
    Zeros,
    Ones,
}

struct ParamSpec {
    name: String,
    shape: Vec<usize>,
    kind: InitKind,
    trainable: bool,
}

fn linear_spec(specs: &mut Vec<ParamSpec>, prefix: &str, d_out: usize, d_in: usize) {
    specs.push(ParamSpec {
        name: format!("{prefix}.weight"),
        shape: vec![d_out, d_in],
        kind: InitKind::UniformFan {
            fan_in: d_in,
            fan_out: d_out,
        },
        trainable: true,
    });
    specs.push(ParamSpec {
        name: format!("{prefix}.bias"),
        shape: vec![d_out],
        kind: InitKind::Zeros,
        trainable: true,
    });
}

fn mha_spec(specs: &mut Vec<ParamSpec>, prefix: &str, d: usize) {
    for p in ["w_q", "w_k", "w_v", "w_o"] {
        specs.push(ParamSpec {
            name: format!("{prefix}.{p}"),
            shape: vec![d, d],
            kind: InitKind::UniformFan { fan_in: d, fan_out: d },
            trainable: true,
        });
    }
}

fn ln_spec(specs: &mut Vec<ParamSpec>, prefix: &str, d: usize) {
    specs.push(ParamSpec {
        name: format!("{prefix}.gamma"),
        shape: vec![d],
        kind: InitKind::Ones,
        trainable: true,
    });
    specs.push(ParamSpec {
        name: format!("{prefix}.beta"),
        shape: vec![d],
        kind: InitKind::Zeros,
        trainable: true,
    });
}

fn param_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let d = cfg.embed_dim;
    let c = cfg.feature_channels();
    let seq = cfg.seq_len();
    let mut specs = Vec::new();

    // Frozen stand-in backbone: three stride-2 3×3 conv stages, each emitting
    // two blocks' worth of channels.
    let stage_ch = 2 * cfg.block_channels;
    for (i, c_in) in [3, stage_ch, stage_ch].into_iter().enumerate() {
        specs.push(ParamSpec {
            name: format!("backbone.stage{i}.weight"),
            shape: vec![stage_ch, c_in, 3, 3],
            kind: InitKind::UniformFan {
                fan_in: c_in * 9,
                fan_out: stage_ch * 9,
            },
            trainable: false,
        });
        specs.push(ParamSpec {
            name: format!("backbone.stage{i}.bias"),
            shape: vec![stage_ch],
            kind: InitKind::Zeros,
            trainable: false,
        });
    }

    for scale in &cfg.scales {
        let p = scale.prefix();
        // Separate 1×1 reduction and embeddings per stream (diff feeds the
        // encoder, ref feeds the decoder).
        for stream in ["diff", "ref"] {
            specs.push(ParamSpec {
                name: format!("{p}.embed.{stream}.reduce.weight"),
                shape: vec![d, c, 1, 1],
                kind: InitKind::UniformFan { fan_in: c, fan_out: d },
                trainable: true,
            });
            specs.push(ParamSpec {
                name: format!("{p}.embed.{stream}.reduce.bias"),
                shape: vec![d],
                kind: InitKind::Zeros,
                trainable: true,
            });
            specs.push(ParamSpec {
                name: format!("{p}.embed.{stream}.quality"),
                shape: vec![1, d],
                kind: InitKind::Embedding,
                trainable: true,
            });
            specs.push(ParamSpec {
                name: format!("{p}.embed.{stream}.pos"),
                shape: vec![seq, d],
                kind: InitKind::Embedding,
                trainable: true,
            });
        }
        for l in 0..cfg.num_layers {
            let enc = format!("{p}.encoder.layer{l}");
            mha_spec(&mut specs, &format!("{enc}.mha"), d);
            ln_spec(&mut specs, &format!("{enc}.ln1"), d);
            linear_spec(&mut specs, &format!("{enc}.mlp.fc1"), cfg.mlp_dim, d);
            linear_spec(&mut specs, &format!("{enc}.mlp.fc2"), d, cfg.mlp_dim);
            ln_spec(&mut specs, &format!("{enc}.ln2"), d);

            let dec = format!("{p}.decoder.layer{l}");
            mha_spec(&mut specs, &format!("{dec}.self_mha"), d);
            ln_spec(&mut specs, &format!("{dec}.ln1"), d);
            mha_spec(&mut specs, &format!("{dec}.cross_mha"), d);
            ln_spec(&mut specs, &format!("{dec}.ln2"), d);
            linear_spec(&mut specs, &format!("{dec}.mlp.fc1"), cfg.mlp_dim, d);
            linear_spec(&mut specs, &format!("{dec}.mlp.fc2"), d, cfg.mlp_dim);
            ln_spec(&mut specs, &format!("{dec}.ln3"), d);
        }
        linear_spec(&mut specs, &format!("{p}.head.fc1"), d, d);
        linear_spec(&mut specs, &format!("{p}.head.fc2"), 1, d);
    }

    specs.sort_by(|a, b| a.name.cmp(&b.name));
    specs
}

/// Standard normal draw via Box–Muller on two uniform samples.
fn normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Build a freshly initialized parameter store for `config`.
pub fn init_params<E: Elem>(config: &ModelConfig, seed: u64) -> Result<ParamStore<E>, NnError> {
    config.validate().map_err(NnError::InvalidConfig)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new(seed);
    for spec in param_specs(config) {
        let n: usize = spec.shape.iter().product();
        let data: Vec<E> = match spec.kind {
            InitKind::UniformFan { fan_in, fan_out } => {
                let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
                (0..n)
                    .map(|_| E::from_f64(rng.gen_range(-a..a)))
                    .collect()
            }
            InitKind::Embedding => (0..n).map(|_| E::from_f64(0.02 * normal(&mut rng))).collect(),
            InitKind::Zeros => vec![E::zero(); n],
            InitKind::Ones => vec![E::one(); n],
        };
        let t = Tensor::leaf(spec.shape, data, spec.trainable)?;
        store.insert(&spec.name, t)?;
    }
    Ok(store)
}
