//! Feature-fusion gates.
//!
//! CFF derives a sigmoid gate per spatial position and channel from the sum
//! of its two inputs through a pair of 1x1 convolutions; GCFF pools the sum
//! to a channel vector first, so its gate is one scalar per channel. Both
//! blend their inputs as `w * a + (1 - w) * b`, a convex combination.

use autograd::{Element, Tape, Var};
use ndarray::{Array1, Array4};

use crate::encoder::{bn_from_store, from_batch, to_batch};
use crate::error::{Error, Result};
use crate::image::FeatureMap;
use crate::nn::{batch_norm, to_dyn_t, BnParams, BnUpdates, BnVars, Mode, Registry};
use crate::params::ParameterStore;

/// Array-level parameters of one fusion gate: two 1x1 convolutions with
/// batch norms, channel count preserved throughout.
#[derive(Debug, Clone)]
pub struct FusionParams {
    pub conv1_w: Array4<f32>,
    pub conv1_b: Array1<f32>,
    pub bn1: BnParams,
    pub conv2_w: Array4<f32>,
    pub conv2_b: Array1<f32>,
    pub bn2: BnParams,
}

pub type CffParams = FusionParams;
pub type GcffParams = FusionParams;

impl FusionParams {
    pub fn from_store(store: &ParameterStore, prefix: &str) -> Self {
        FusionParams {
            conv1_w: store
                .get(&format!("{prefix}.conv1.weight"))
                .to_owned()
                .into_dimensionality()
                .unwrap(),
            conv1_b: store
                .get(&format!("{prefix}.conv1.bias"))
                .to_owned()
                .into_dimensionality()
                .unwrap(),
            bn1: bn_from_store(store, &format!("{prefix}.bn1")),
            conv2_w: store
                .get(&format!("{prefix}.conv2.weight"))
                .to_owned()
                .into_dimensionality()
                .unwrap(),
            conv2_b: store
                .get(&format!("{prefix}.conv2.bias"))
                .to_owned()
                .into_dimensionality()
                .unwrap(),
            bn2: bn_from_store(store, &format!("{prefix}.bn2")),
        }
    }

    /// Identity-initialized gate for a channel count (tests and probes).
    pub fn identity(c: usize) -> Self {
        FusionParams {
            conv1_w: Array4::zeros((c, c, 1, 1)),
            conv1_b: Array1::zeros(c),
            bn1: BnParams::identity(c),
            conv2_w: Array4::zeros((c, c, 1, 1)),
            conv2_b: Array1::zeros(c),
            bn2: BnParams::identity(c),
        }
    }

    pub fn channels(&self) -> usize {
        self.conv1_w.shape()[0]
    }

    pub(crate) fn to_vars<T: Element>(
        &self,
        tape: &mut Tape<T>,
        prefix: &str,
        reg: &mut Registry,
        grad: bool,
    ) -> FusionVars<T> {
        let conv1_w = tape.leaf(to_dyn_t(&self.conv1_w), grad);
        let conv1_b = tape.leaf(to_dyn_t(&self.conv1_b), grad);
        reg.add(format!("{prefix}.conv1.weight"), conv1_w);
        reg.add(format!("{prefix}.conv1.bias"), conv1_b);
        let bn1 = self.bn1.to_vars(tape, &format!("{prefix}.bn1"), reg, grad);
        let conv2_w = tape.leaf(to_dyn_t(&self.conv2_w), grad);
        let conv2_b = tape.leaf(to_dyn_t(&self.conv2_b), grad);
        reg.add(format!("{prefix}.conv2.weight"), conv2_w);
        reg.add(format!("{prefix}.conv2.bias"), conv2_b);
        let bn2 = self.bn2.to_vars(tape, &format!("{prefix}.bn2"), reg, grad);
        FusionVars {
            conv1_w,
            conv1_b,
            bn1,
            conv2_w,
            conv2_b,
            bn2,
        }
    }
}

/// Tape handles for one fusion gate.
pub struct FusionVars<T: Element> {
    pub conv1_w: Var,
    pub conv1_b: Var,
    pub bn1: BnVars<T>,
    pub conv2_w: Var,
    pub conv2_b: Var,
    pub bn2: BnVars<T>,
}

/// Shared gate trunk: sigmoid(BN(Conv(ReLU(BN(Conv(x)))))).
fn gate_trunk<T: Element>(
    tape: &mut Tape<T>,
    x: Var,
    p: &FusionVars<T>,
    mode: Mode,
    updates: &mut BnUpdates,
) -> Var {
    let h = tape.conv2d(x, p.conv1_w, Some(p.conv1_b), 0);
    let h = batch_norm(tape, h, &p.bn1, mode, updates);
    let h = tape.relu(h);
    let h = tape.conv2d(h, p.conv2_w, Some(p.conv2_b), 0);
    let h = batch_norm(tape, h, &p.bn2, mode, updates);
    tape.sigmoid(h)
}

/// Channel feature fusion on the tape. Inputs [N,C,H,W] with equal shapes.
pub fn cff_tape<T: Element>(
    tape: &mut Tape<T>,
    fa: Var,
    fb: Var,
    p: &FusionVars<T>,
    mode: Mode,
    updates: &mut BnUpdates,
) -> Var {
    let sum = tape.add(fa, fb);
    let w = gate_trunk(tape, sum, p, mode, updates);
    let one_minus = tape.scalar_sub(T::one(), w);
    let a = tape.mul(w, fa);
    let b = tape.mul(one_minus, fb);
    tape.add(a, b)
}

/// Global channel feature fusion on the tape: the gate comes from the
/// globally average-pooled channel vector and is broadcast per channel.
pub fn gcff_tape<T: Element>(
    tape: &mut Tape<T>,
    fa: Var,
    fb: Var,
    p: &FusionVars<T>,
    mode: Mode,
    updates: &mut BnUpdates,
) -> Var {
    let sum = tape.add(fa, fb);
    let shape = tape.value(sum).shape().to_vec();
    let (n, c) = (shape[0], shape[1]);
    let pooled = tape.gap(sum);
    let as_map = tape.reshape(pooled, &[n, c, 1, 1]);
    let w = gate_trunk(tape, as_map, p, mode, updates);
    let w_vec = tape.reshape(w, &[n, c]);
    let one_minus = tape.scalar_sub(T::one(), w_vec);
    let a = tape.mul_channel(fa, w_vec);
    let b = tape.mul_channel(fb, one_minus);
    tape.add(a, b)
}

fn check_fusable(fa: &FeatureMap, fb: &FeatureMap, p: &FusionParams) -> Result<()> {
    if fa.data.shape() != fb.data.shape() {
        return Err(Error::Shape(format!(
            "fusion inputs differ: {:?} vs {:?}",
            fa.data.shape(),
            fb.data.shape()
        )));
    }
    if fa.channels() != p.channels() {
        return Err(Error::Shape(format!(
            "fusion params expect {} channels, inputs have {}",
            p.channels(),
            fa.channels()
        )));
    }
    Ok(())
}

/// CFF in eval mode on single feature maps.
pub fn cff(fa: &FeatureMap, fb: &FeatureMap, p: &CffParams) -> Result<FeatureMap> {
    check_fusable(fa, fb, p)?;
    let mut tape = Tape::<f32>::new();
    let a = tape.leaf(to_batch(&fa.data), false);
    let b = tape.leaf(to_batch(&fb.data), false);
    let mut reg = Registry::default();
    let vars = p.to_vars(&mut tape, "cff", &mut reg, false);
    let mut updates = BnUpdates::default();
    let y = cff_tape(&mut tape, a, b, &vars, Mode::Eval, &mut updates);
    Ok(FeatureMap::new(from_batch(tape.value(y)), fa.level))
}

/// GCFF in eval mode on single feature maps.
pub fn gcff(fa: &FeatureMap, fb: &FeatureMap, p: &GcffParams) -> Result<FeatureMap> {
    check_fusable(fa, fb, p)?;
    let mut tape = Tape::<f32>::new();
    let a = tape.leaf(to_batch(&fa.data), false);
    let b = tape.leaf(to_batch(&fb.data), false);
    let mut reg = Registry::default();
    let vars = p.to_vars(&mut tape, "gcff", &mut reg, false);
    let mut updates = BnUpdates::default();
    let y = gcff_tape(&mut tape, a, b, &vars, Mode::Eval, &mut updates);
    Ok(FeatureMap::new(from_batch(tape.value(y)), fa.level))
}

/// Gate map produced by CFF for two inputs (introspection helper).
pub fn cff_gate(fa: &FeatureMap, fb: &FeatureMap, p: &CffParams) -> Result<ndarray::Array3<f32>> {
    check_fusable(fa, fb, p)?;
    let mut tape = Tape::<f32>::new();
    let a = tape.leaf(to_batch(&fa.data), false);
    let b = tape.leaf(to_batch(&fb.data), false);
    let mut reg = Registry::default();
    let vars = p.to_vars(&mut tape, "cff", &mut reg, false);
    let mut updates = BnUpdates::default();
    let sum = tape.add(a, b);
    let w = gate_trunk(&mut tape, sum, &vars, Mode::Eval, &mut updates);
    Ok(from_batch(tape.value(w)))
}

/// Per-channel gate vector produced by GCFF (introspection helper).
pub fn gcff_gate(fa: &FeatureMap, fb: &FeatureMap, p: &GcffParams) -> Result<Array1<f32>> {
    check_fusable(fa, fb, p)?;
    let mut tape = Tape::<f32>::new();
    let a = tape.leaf(to_batch(&fa.data), false);
    let b = tape.leaf(to_batch(&fb.data), false);
    let mut reg = Registry::default();
    let vars = p.to_vars(&mut tape, "gcff", &mut reg, false);
    let mut updates = BnUpdates::default();
    let sum = tape.add(a, b);
    let shape = tape.value(sum).shape().to_vec();
    let pooled = tape.gap(sum);
    let as_map = tape.reshape(pooled, &[shape[0], shape[1], 1, 1]);
    let w = gate_trunk(&mut tape, as_map, &vars, Mode::Eval, &mut updates);
    Ok(tape
        .value(w)
        .to_owned()
        .into_shape_with_order(shape[1])
        .unwrap())
}
