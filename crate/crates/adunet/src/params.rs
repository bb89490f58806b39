//! Parameter naming, initialization, and the checkpointable store.
//!
//! [`param_specs`] is the single source of truth for which learnable tensors
//! exist under a given config; initialization, parameter counting, and the
//! forward wiring all follow its naming scheme.

use std::collections::BTreeMap;

use ndarray::ArrayD;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::config::{AttentionKind, FusionKind, NetworkConfig};
use crate::error::{Error, Result};

pub const BN_EPS: f32 = 1e-5;
pub const BN_MOMENTUM: f32 = 0.1;
pub const LN_EPS: f32 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// 3x3 convolutions from the kernel table (encoder, decoder, heads).
    Conv,
    /// Batch-norm scale/shift.
    Bn,
    /// 1x1 convolutions inside the fusion gates.
    Fusion,
    /// Attention projections, norms, and bias tables.
    Attention,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Fan-in-scaled normal draw.
    Normal { std: f64 },
    Zeros,
    Ones,
}

#[derive(Debug, Clone)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: ParamKind,
    pub init: Init,
}

#[derive(Debug, Clone)]
pub struct BufferSpec {
    pub name: String,
    pub len: usize,
    pub fill: f32,
}

fn conv_spec(name: &str, cout: usize, cin: usize, k: usize, kind: ParamKind) -> [ParamSpec; 2] {
    conv_spec_scaled(name, cout, cin, k, kind, 1.0)
}

fn conv_spec_scaled(
    name: &str,
    cout: usize,
    cin: usize,
    k: usize,
    kind: ParamKind,
    scale: f64,
) -> [ParamSpec; 2] {
    let fan_in = (cin * k * k) as f64;
    [
        ParamSpec {
            name: format!("{name}.weight"),
            shape: vec![cout, cin, k, k],
            kind,
            init: Init::Normal {
                std: scale * (2.0 / fan_in).sqrt(),
            },
        },
        ParamSpec {
            name: format!("{name}.bias"),
            shape: vec![cout],
            kind,
            init: Init::Zeros,
        },
    ]
}

fn bn_specs(name: &str, c: usize, params: &mut Vec<ParamSpec>, buffers: &mut Vec<BufferSpec>) {
    params.push(ParamSpec {
        name: format!("{name}.gamma"),
        shape: vec![c],
        kind: ParamKind::Bn,
        init: Init::Ones,
    });
    params.push(ParamSpec {
        name: format!("{name}.beta"),
        shape: vec![c],
        kind: ParamKind::Bn,
        init: Init::Zeros,
    });
    buffers.push(BufferSpec {
        name: format!("{name}.running_mean"),
        len: c,
        fill: 0.0,
    });
    buffers.push(BufferSpec {
        name: format!("{name}.running_var"),
        len: c,
        fill: 1.0,
    });
}

/// Two 3x3 convolutions, each followed by batch norm.
fn conv_block_specs(
    prefix: &str,
    cin: usize,
    cout: usize,
    params: &mut Vec<ParamSpec>,
    buffers: &mut Vec<BufferSpec>,
) {
    params.extend(conv_spec(&format!("{prefix}.conv1"), cout, cin, 3, ParamKind::Conv));
    bn_specs(&format!("{prefix}.bn1"), cout, params, buffers);
    params.extend(conv_spec(&format!("{prefix}.conv2"), cout, cout, 3, ParamKind::Conv));
    bn_specs(&format!("{prefix}.bn2"), cout, params, buffers);
}

/// Two 1x1 convolutions with batch norms; shared by the CFF and GCFF gates.
fn fusion_specs(
    prefix: &str,
    c: usize,
    params: &mut Vec<ParamSpec>,
    buffers: &mut Vec<BufferSpec>,
) {
    let fan_in = c as f64;
    for layer in ["conv1", "conv2"] {
        params.push(ParamSpec {
            name: format!("{prefix}.{layer}.weight"),
            shape: vec![c, c, 1, 1],
            kind: ParamKind::Fusion,
            init: Init::Normal {
                std: (2.0 / fan_in).sqrt(),
            },
        });
        params.push(ParamSpec {
            name: format!("{prefix}.{layer}.bias"),
            shape: vec![c],
            kind: ParamKind::Fusion,
            init: Init::Zeros,
        });
    }
    bn_specs(&format!("{prefix}.bn1"), c, params, buffers);
    bn_specs(&format!("{prefix}.bn2"), c, params, buffers);
}

fn attention_specs(prefix: &str, c: usize, win: usize, heads: usize, params: &mut Vec<ParamSpec>) {
    params.push(ParamSpec {
        name: format!("{prefix}.ln.gamma"),
        shape: vec![c],
        kind: ParamKind::Attention,
        init: Init::Ones,
    });
    params.push(ParamSpec {
        name: format!("{prefix}.ln.beta"),
        shape: vec![c],
        kind: ParamKind::Attention,
        init: Init::Zeros,
    });
    let std = (1.0 / c as f64).sqrt();
    for proj in ["q", "k", "v", "proj"] {
        params.push(ParamSpec {
            name: format!("{prefix}.{proj}.weight"),
            shape: vec![c, c],
            kind: ParamKind::Attention,
            init: Init::Normal { std },
        });
        params.push(ParamSpec {
            name: format!("{prefix}.{proj}.bias"),
            shape: vec![c],
            kind: ParamKind::Attention,
            init: Init::Zeros,
        });
    }
    let span = 2 * win - 1;
    params.push(ParamSpec {
        name: format!("{prefix}.rel_bias"),
        shape: vec![span * span, heads],
        kind: ParamKind::Attention,
        init: Init::Zeros,
    });
}

/// Enumerate every learnable tensor and buffer the config requires, in a
/// fixed deterministic order.
pub fn param_specs(cfg: &NetworkConfig) -> (Vec<ParamSpec>, Vec<BufferSpec>) {
    let mut params = Vec::new();
    let mut buffers = Vec::new();
    let enc = &cfg.encoder_channels;

    for (i, &cout) in enc.iter().enumerate() {
        let cin = if i == 0 { 3 } else { enc[i - 1] };
        conv_block_specs(&format!("encoder.conv{i}"), cin, cout, &mut params, &mut buffers);
    }

    let streams: &[&str] = if cfg.num_streams() == 1 { &["c"] } else { &["c", "s"] };
    for (s, tag) in streams.iter().enumerate() {
        for j in 0..4 {
            let [cin, cout] = cfg.adb_channels[j];
            let prefix = format!("adb{j}.{tag}");
            if j > 0 {
                // blocks after the first merge the previous streams first
                let prev_out = cfg.adb_channels[j - 1][1];
                let merged = prev_out * cfg.num_streams();
                conv_block_specs(&format!("{prefix}.conv_in"), merged, cin, &mut params, &mut buffers);
            }
            match cfg.fusion_kind(s) {
                FusionKind::Add => {}
                FusionKind::Cff | FusionKind::Gcff => {
                    fusion_specs(&format!("{prefix}.fusion"), cin, &mut params, &mut buffers);
                }
            }
            if cfg.attention_kind(s) != AttentionKind::None {
                attention_specs(
                    &format!("{prefix}.attn"),
                    cin,
                    cfg.window_size,
                    cfg.num_heads,
                    &mut params,
                );
            }
            conv_block_specs(&format!("{prefix}.conv_out"), cin, cout, &mut params, &mut buffers);
        }
        // residual head: conv+bn+activation, then a bare linear conv so the
        // residual stays signed. The last conv starts near (not at) zero so
        // the untrained network sits close to the identity while gradients
        // still reach every head tensor on the first step.
        let c_last = cfg.adb_channels[3][1];
        let head = format!("head.{tag}");
        params.extend(conv_spec(&format!("{head}.conv1"), 3, c_last, 3, ParamKind::Conv));
        bn_specs(&format!("{head}.bn1"), 3, &mut params, &mut buffers);
        params.extend(conv_spec_scaled(
            &format!("{head}.conv2"),
            3,
            3,
            3,
            ParamKind::Conv,
            1e-2,
        ));
    }
    (params, buffers)
}

/// Named learnable tensors plus batch-norm running statistics.
///
/// Immutable once published for inference; the training loop is the single
/// writer.
#[derive(Debug, Clone)]
pub struct ParameterStore {
    params: BTreeMap<String, ArrayD<f32>>,
    buffers: BTreeMap<String, ArrayD<f32>>,
    pub config_hash: u64,
    pub seed: u64,
}

impl ParameterStore {
    /// Initialize all tensors for `cfg` from its seed: conv weights from a
    /// fan-in-scaled normal, biases zero, norm scales one, bias tables zero.
    pub fn init(cfg: &NetworkConfig) -> Self {
        let (specs, buffer_specs) = param_specs(cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.init_seed);
        let mut params = BTreeMap::new();
        for spec in &specs {
            let n: usize = spec.shape.iter().product();
            let data: Vec<f32> = match spec.init {
                Init::Zeros => vec![0.0; n],
                Init::Ones => vec![1.0; n],
                Init::Normal { std } => {
                    let dist = Normal::new(0.0, std).expect("valid std");
                    (0..n).map(|_| dist.sample(&mut rng) as f32).collect()
                }
            };
            let arr = ArrayD::from_shape_vec(ndarray::IxDyn(&spec.shape), data).unwrap();
            let prev = params.insert(spec.name.clone(), arr);
            assert!(prev.is_none(), "duplicate parameter name {}", spec.name);
        }
        let mut buffers = BTreeMap::new();
        for spec in &buffer_specs {
            buffers.insert(
                spec.name.clone(),
                ArrayD::from_elem(ndarray::IxDyn(&[spec.len]), spec.fill),
            );
        }
        ParameterStore {
            params,
            buffers,
            config_hash: cfg.hash(),
            seed: cfg.init_seed,
        }
    }

    /// Reassemble a store from decoded checkpoint tensors.
    pub fn from_parts(
        params: BTreeMap<String, ArrayD<f32>>,
        buffers: BTreeMap<String, ArrayD<f32>>,
        config_hash: u64,
        seed: u64,
    ) -> Self {
        ParameterStore {
            params,
            buffers,
            config_hash,
            seed,
        }
    }

    pub fn get(&self, name: &str) -> &ArrayD<f32> {
        self.params
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    pub fn get_buffer(&self, name: &str) -> &ArrayD<f32> {
        self.buffers
            .get(name)
            .unwrap_or_else(|| panic!("missing buffer {name}"))
    }

    /// Replace a parameter tensor; the shape must match.
    pub fn set(&mut self, name: &str, value: ArrayD<f32>) -> Result<()> {
        match self.params.get_mut(name) {
            Some(slot) => {
                if slot.shape() != value.shape() {
                    return Err(Error::Shape(format!(
                        "parameter {name}: shape {:?} != {:?}",
                        value.shape(),
                        slot.shape()
                    )));
                }
                *slot = value;
                Ok(())
            }
            None => Err(Error::Shape(format!("unknown parameter {name}"))),
        }
    }

    pub fn set_buffer(&mut self, name: &str, value: ArrayD<f32>) -> Result<()> {
        match self.buffers.get_mut(name) {
            Some(slot) => {
                if slot.shape() != value.shape() {
                    return Err(Error::Shape(format!(
                        "buffer {name}: shape {:?} != {:?}",
                        value.shape(),
                        slot.shape()
                    )));
                }
                *slot = value;
                Ok(())
            }
            None => Err(Error::Shape(format!("unknown buffer {name}"))),
        }
    }

    pub fn params(&self) -> impl Iterator<Item = (&String, &ArrayD<f32>)> {
        self.params.iter()
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&String, &ArrayD<f32>)> {
        self.buffers.iter()
    }

    pub fn num_tensors(&self) -> usize {
        self.params.len()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|a| a.len()).sum()
    }

    /// Overwrite the residual heads with zeros so the network becomes the
    /// identity (both residuals vanish).
    pub fn zero_heads(&mut self) {
        let names: Vec<String> = self
            .params
            .keys()
            .filter(|n| n.starts_with("head."))
            .cloned()
            .collect();
        for name in names {
            let zero = ArrayD::zeros(self.params[&name].raw_dim());
            self.params.insert(name, zero);
        }
    }
}
