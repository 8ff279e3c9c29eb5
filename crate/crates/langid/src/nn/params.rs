//! Parameter naming, shapes, and seeded initialization.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::{HeadKind, ModelConfig};
use super::tensor::{ParameterSet, Scalar, Tensor};

#[derive(Clone, Copy, Debug)]
pub(crate) enum Init {
    /// N(0, sqrt(2/fan_in)) for ReLU-followed weights.
    He { fan_in: usize },
    /// N(0, sqrt(1/fan_in)) for tanh/sigmoid-followed weights.
    Xavier { fan_in: usize },
    Zero,
    One,
}

#[derive(Clone, Debug)]
pub(crate) struct TensorSpec {
    pub name: String,
    pub dims: Vec<usize>,
    pub init: Init,
}

fn bn_specs(prefix: &str, c: usize, out: &mut Vec<TensorSpec>) {
    out.push(TensorSpec {
        name: format!("{prefix}.gamma"),
        dims: vec![c],
        init: Init::One,
    });
    out.push(TensorSpec {
        name: format!("{prefix}.beta"),
        dims: vec![c],
        init: Init::Zero,
    });
    out.push(TensorSpec {
        name: format!("{prefix}.running_mean"),
        dims: vec![c],
        init: Init::Zero,
    });
    out.push(TensorSpec {
        name: format!("{prefix}.running_var"),
        dims: vec![c],
        init: Init::One,
    });
}

/// Every tensor the model owns, in construction order.
pub(crate) fn tensor_specs(cfg: &ModelConfig) -> Vec<TensorSpec> {
    let mut specs = Vec::new();
    let c0 = cfg.prologue_channels;
    specs.push(TensorSpec {
        name: "prologue.conv.weight".into(),
        dims: vec![c0, cfg.n_mels, cfg.prologue_kernel],
        init: Init::He {
            fan_in: cfg.n_mels * cfg.prologue_kernel,
        },
    });
    specs.push(TensorSpec {
        name: "prologue.conv.bias".into(),
        dims: vec![c0],
        init: Init::Zero,
    });
    bn_specs("prologue.bn", c0, &mut specs);

    let mut c_in = c0;
    for (bi, b) in cfg.mega_blocks.iter().enumerate() {
        for j in 0..b.repeats {
            let cj = if j == 0 { c_in } else { b.channels };
            let p = format!("block{bi:02}.sub{j}");
            specs.push(TensorSpec {
                name: format!("{p}.dw.weight"),
                dims: vec![cj, b.kernel],
                init: Init::He { fan_in: b.kernel },
            });
            specs.push(TensorSpec {
                name: format!("{p}.pw.weight"),
                dims: vec![b.channels, cj],
                init: Init::He { fan_in: cj },
            });
            specs.push(TensorSpec {
                name: format!("{p}.pw.bias"),
                dims: vec![b.channels],
                init: Init::Zero,
            });
            bn_specs(&format!("{p}.bn"), b.channels, &mut specs);
        }
        let p = format!("block{bi:02}.res");
        specs.push(TensorSpec {
            name: format!("{p}.pw.weight"),
            dims: vec![b.channels, c_in],
            init: Init::He { fan_in: c_in },
        });
        specs.push(TensorSpec {
            name: format!("{p}.pw.bias"),
            dims: vec![b.channels],
            init: Init::Zero,
        });
        bn_specs(&format!("{p}.bn"), b.channels, &mut specs);
        let h = cfg.se_hidden(b.channels);
        let p = format!("block{bi:02}.se");
        specs.push(TensorSpec {
            name: format!("{p}.fc1.weight"),
            dims: vec![h, b.channels],
            init: Init::He { fan_in: b.channels },
        });
        specs.push(TensorSpec {
            name: format!("{p}.fc1.bias"),
            dims: vec![h],
            init: Init::Zero,
        });
        specs.push(TensorSpec {
            name: format!("{p}.fc2.weight"),
            dims: vec![b.channels, h],
            init: Init::Xavier { fan_in: h },
        });
        specs.push(TensorSpec {
            name: format!("{p}.fc2.bias"),
            dims: vec![b.channels],
            init: Init::Zero,
        });
        c_in = b.channels;
    }

    let ce = cfg.epilogue_channels;
    specs.push(TensorSpec {
        name: "epilogue.conv.weight".into(),
        dims: vec![ce, c_in, cfg.epilogue_kernel],
        init: Init::He {
            fan_in: c_in * cfg.epilogue_kernel,
        },
    });
    specs.push(TensorSpec {
        name: "epilogue.conv.bias".into(),
        dims: vec![ce],
        init: Init::Zero,
    });
    bn_specs("epilogue.bn", ce, &mut specs);

    specs.push(TensorSpec {
        name: "pool.att.w".into(),
        dims: vec![cfg.attention_hidden, ce],
        init: Init::Xavier { fan_in: ce },
    });
    specs.push(TensorSpec {
        name: "pool.att.b".into(),
        dims: vec![cfg.attention_hidden],
        init: Init::Zero,
    });
    specs.push(TensorSpec {
        name: "pool.att.v".into(),
        dims: vec![cfg.attention_hidden],
        init: Init::Xavier {
            fan_in: cfg.attention_hidden,
        },
    });

    specs.push(TensorSpec {
        name: "embed.weight".into(),
        dims: vec![cfg.embed_dim, cfg.pooled_dim()],
        init: Init::He {
            fan_in: cfg.pooled_dim(),
        },
    });
    specs.push(TensorSpec {
        name: "embed.bias".into(),
        dims: vec![cfg.embed_dim],
        init: Init::Zero,
    });
    if cfg.embed_bn {
        bn_specs("embed.bn", cfg.embed_dim, &mut specs);
    }

    specs.push(TensorSpec {
        name: "head.weight".into(),
        dims: vec![cfg.n_classes, cfg.embed_dim],
        init: Init::Xavier {
            fan_in: cfg.embed_dim,
        },
    });
    if matches!(cfg.head, HeadKind::Linear { bias: true }) {
        specs.push(TensorSpec {
            name: "head.bias".into(),
            dims: vec![cfg.n_classes],
            init: Init::Zero,
        });
    }
    specs
}

fn fnv1a(s: &str) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x1000_0000_01b3);
    }
    h
}

fn init_tensor<S: Scalar>(spec: &TensorSpec, seed: u64) -> Tensor<S> {
    match spec.init {
        Init::Zero => Tensor::zeros(&spec.dims),
        Init::One => Tensor::filled(&spec.dims, S::one()),
        Init::He { fan_in } | Init::Xavier { fan_in } => {
            let gain = match spec.init {
                Init::He { .. } => 2.0,
                _ => 1.0,
            };
            let std = (gain / fan_in as f64).sqrt();
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(&spec.name));
            let normal = Normal::new(0.0f64, std).expect("valid std");
            let n: usize = spec.dims.iter().product();
            let data = (0..n)
                .map(|_| S::from_f64(normal.sample(&mut rng)))
                .collect();
            Tensor::from_vec(&spec.dims, data)
        }
    }
}

/// Seeded parameter initialization. Each tensor draws from its own RNG
/// stream (seed xor name hash), so any subset of tensors can be
/// re-initialized reproducibly.
pub fn init_params<S: Scalar>(cfg: &ModelConfig, seed: u64) -> ParameterSet<S> {
    let mut params = ParameterSet::new();
    for spec in tensor_specs(cfg) {
        params.insert(spec.name.clone(), init_tensor(&spec, seed));
    }
    params
}

/// Freshly initialized head tensors only (for head re-initialization).
pub(crate) fn init_head_tensors<S: Scalar>(cfg: &ModelConfig, seed: u64) -> Vec<(String, Tensor<S>)> {
    tensor_specs(cfg)
        .into_iter()
        .filter(|s| is_head_tensor(&s.name))
        .map(|s| {
            let t = init_tensor(&s, seed);
            (s.name, t)
        })
        .collect()
}

/// Batch-norm running statistics are stored state, not trainable weights.
pub fn is_running_stat(name: &str) -> bool {
    name.ends_with(".running_mean") || name.ends_with(".running_var")
}

/// The final embed->classes layer replaced on transfer.
pub fn is_head_tensor(name: &str) -> bool {
    name.starts_with("head.")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn enumeration_matches_analytic_count_tiny() {
        let cfg = ModelConfig::tiny();
        let p = init_params::<f32>(&cfg, 0);
        assert_eq!(p.total_elements(), cfg.count_params());
    }

    #[test]
    fn enumeration_matches_analytic_count_variants() {
        let mut cfg = ModelConfig::tiny();
        cfg.embed_bn = true;
        cfg.head = HeadKind::Cosine { scale: 30.0 };
        cfg.n_classes = 8;
        let p = init_params::<f64>(&cfg, 1);
        assert_eq!(p.total_elements(), cfg.count_params());
    }

    #[test]
    fn init_is_seed_deterministic() {
        let cfg = ModelConfig::tiny();
        let a = init_params::<f32>(&cfg, 7);
        let b = init_params::<f32>(&cfg, 7);
        let c = init_params::<f32>(&cfg, 8);
        assert_eq!(a, b);
        assert!(a.max_abs_diff(&c) > 0.0);
    }

    #[test]
    fn head_tensors_identified() {
        assert!(is_head_tensor("head.weight"));
        assert!(!is_head_tensor("embed.weight"));
        assert!(is_running_stat("prologue.bn.running_var"));
        assert!(!is_running_stat("prologue.bn.gamma"));
    }
}
