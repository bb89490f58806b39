//! Single-branch encoder: five two-layer convolution blocks with 2x2
//! max-pool down-sampling between them, producing the skip features F0..F4.

use autograd::{Element, Tape, Var};
use ndarray::{Array1, Array3, Array4};

use crate::config::NetworkConfig;
use crate::error::{Error, Result};
use crate::image::{FeatureMap, Image};
use crate::nn::{conv_block_tape, Act, BnParams, BnUpdates, ConvBlockVars, Mode, Registry};
use crate::params::ParameterStore;

/// Two 3x3 kernels with biases plus their batch-norm parameter sets.
#[derive(Debug, Clone)]
pub struct ConvBlockParams {
    pub conv1_w: Array4<f32>,
    pub conv1_b: Array1<f32>,
    pub bn1: BnParams,
    pub conv2_w: Array4<f32>,
    pub conv2_b: Array1<f32>,
    pub bn2: BnParams,
}

impl ConvBlockParams {
    pub fn from_store(store: &ParameterStore, prefix: &str) -> Self {
        let fetch1 = |name: String| store.get(&name).to_owned().into_dimensionality().unwrap();
        ConvBlockParams {
            conv1_w: store
                .get(&format!("{prefix}.conv1.weight"))
                .to_owned()
                .into_dimensionality()
                .unwrap(),
            conv1_b: fetch1(format!("{prefix}.conv1.bias")),
            bn1: bn_from_store(store, &format!("{prefix}.bn1")),
            conv2_w: store
                .get(&format!("{prefix}.conv2.weight"))
                .to_owned()
                .into_dimensionality()
                .unwrap(),
            conv2_b: fetch1(format!("{prefix}.conv2.bias")),
            bn2: bn_from_store(store, &format!("{prefix}.bn2")),
        }
    }

    pub fn in_channels(&self) -> usize {
        self.conv1_w.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.conv2_w.shape()[0]
    }

    pub(crate) fn to_vars<T: Element>(
        &self,
        tape: &mut Tape<T>,
        prefix: &str,
        reg: &mut Registry,
        grad: bool,
    ) -> ConvBlockVars<T> {
        let conv1_w = tape.leaf(crate::nn::to_dyn_t(&self.conv1_w), grad);
        let conv1_b = tape.leaf(crate::nn::to_dyn_t(&self.conv1_b), grad);
        reg.add(format!("{prefix}.conv1.weight"), conv1_w);
        reg.add(format!("{prefix}.conv1.bias"), conv1_b);
        let bn1 = self.bn1.to_vars(tape, &format!("{prefix}.bn1"), reg, grad);
        let conv2_w = tape.leaf(crate::nn::to_dyn_t(&self.conv2_w), grad);
        let conv2_b = tape.leaf(crate::nn::to_dyn_t(&self.conv2_b), grad);
        reg.add(format!("{prefix}.conv2.weight"), conv2_w);
        reg.add(format!("{prefix}.conv2.bias"), conv2_b);
        let bn2 = self.bn2.to_vars(tape, &format!("{prefix}.bn2"), reg, grad);
        ConvBlockVars {
            conv1_w,
            conv1_b,
            bn1,
            conv2_w,
            conv2_b,
            bn2,
        }
    }
}

pub(crate) fn bn_from_store(store: &ParameterStore, prefix: &str) -> BnParams {
    BnParams {
        gamma: store
            .get(&format!("{prefix}.gamma"))
            .to_owned()
            .into_dimensionality()
            .unwrap(),
        beta: store
            .get(&format!("{prefix}.beta"))
            .to_owned()
            .into_dimensionality()
            .unwrap(),
        running_mean: store
            .get_buffer(&format!("{prefix}.running_mean"))
            .to_owned()
            .into_dimensionality()
            .unwrap(),
        running_var: store
            .get_buffer(&format!("{prefix}.running_var"))
            .to_owned()
            .into_dimensionality()
            .unwrap(),
    }
}

#[derive(Debug, Clone, Copy)]
pub enum Activation {
    Relu,
    LeakyRelu,
}

/// One encoder/decoder convolution block in eval mode (running statistics).
/// Spatial size is preserved (stride 1, padding 1).
pub fn conv_block(
    x: &FeatureMap,
    p: &ConvBlockParams,
    activation: Activation,
) -> Result<FeatureMap> {
    if x.channels() != p.in_channels() {
        return Err(Error::Shape(format!(
            "conv_block: input has {} channels, kernel expects {}",
            x.channels(),
            p.in_channels()
        )));
    }
    let mut tape = Tape::<f32>::new();
    let xv = tape.leaf(to_batch(&x.data), false);
    let mut reg = Registry::default();
    let vars = p.to_vars(&mut tape, "conv_block", &mut reg, false);
    let act = match activation {
        Activation::Relu => Act::Relu,
        Activation::LeakyRelu => Act::LeakyRelu(0.01),
    };
    let mut updates = BnUpdates::default();
    let y = conv_block_tape(&mut tape, xv, &vars, act, Mode::Eval, &mut updates);
    Ok(FeatureMap::new(from_batch(tape.value(y)), x.level))
}

pub(crate) fn to_batch(a: &Array3<f32>) -> ndarray::ArrayD<f32> {
    let s = a.shape().to_vec();
    a.to_owned()
        .into_shape_with_order(ndarray::IxDyn(&[1, s[0], s[1], s[2]]))
        .unwrap()
}

pub(crate) fn from_batch(a: &ndarray::ArrayD<f32>) -> Array3<f32> {
    let s = a.shape().to_vec();
    assert_eq!(s[0], 1, "expected batch of one");
    a.to_owned()
        .into_shape_with_order((s[1], s[2], s[3]))
        .unwrap()
}

/// Encoder parameters for all five blocks.
#[derive(Debug, Clone)]
pub struct EncoderParams {
    pub blocks: Vec<ConvBlockParams>,
}

impl EncoderParams {
    pub fn from_store(store: &ParameterStore) -> Self {
        EncoderParams {
            blocks: (0..5)
                .map(|i| ConvBlockParams::from_store(store, &format!("encoder.conv{i}")))
                .collect(),
        }
    }
}

/// Tape-level encoder: pool-then-convolve for stages 1..4.
pub(crate) fn encode_tape<T: Element>(
    tape: &mut Tape<T>,
    x: Var,
    blocks: &[ConvBlockVars<T>],
    mode: Mode,
    updates: &mut BnUpdates,
) -> Vec<Var> {
    let mut feats = Vec::with_capacity(blocks.len());
    let mut cur = x;
    for (i, block) in blocks.iter().enumerate() {
        if i > 0 {
            cur = tape.max_pool2(cur);
        }
        cur = conv_block_tape(tape, cur, block, Act::Relu, mode, updates);
        feats.push(cur);
    }
    feats
}

/// Run the encoder in eval mode, returning the skip pyramid F0..F4.
/// Input dimensions must be divisible by 16; the caller pads if needed.
pub fn encode(image: &Image, params: &EncoderParams) -> Result<Vec<FeatureMap>> {
    let (h, w) = (image.height(), image.width());
    if h % 16 != 0 || w % 16 != 0 {
        return Err(Error::Shape(format!(
            "encoder input {h}x{w} not divisible by 16"
        )));
    }
    let mut tape = Tape::<f32>::new();
    let x = tape.leaf(to_batch(image.data()), false);
    let mut reg = Registry::default();
    let vars: Vec<_> = params
        .blocks
        .iter()
        .enumerate()
        .map(|(i, b)| b.to_vars(&mut tape, &format!("encoder.conv{i}"), &mut reg, false))
        .collect();
    let mut updates = BnUpdates::default();
    let feats = encode_tape(&mut tape, x, &vars, Mode::Eval, &mut updates);
    Ok(feats
        .into_iter()
        .enumerate()
        .map(|(i, v)| FeatureMap::new(from_batch(tape.value(v)), i))
        .collect())
}

/// Expected encoder output shapes for an input size, per the kernel table.
pub fn expected_shapes(cfg: &NetworkConfig, h: usize, w: usize) -> Vec<[usize; 3]> {
    (0..5)
        .map(|i| [cfg.encoder_channels[i], h >> i, w >> i])
        .collect()
}
