//! Shared building blocks for wiring the network onto an autodiff tape.

use autograd::{Element, Tape, Var};
use ndarray::Array1;

use crate::params::{BN_EPS, BN_MOMENTUM};

/// Whether batch norm uses batch statistics (and reports running-stat
/// updates) or the stored running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy)]
pub enum Act {
    Relu,
    LeakyRelu(f32),
}

/// Batch-norm tape handles plus the running statistics it normalizes with
/// in eval mode. `name` keys the running-stat update this layer produces in
/// train mode.
pub struct BnVars<T: Element> {
    pub name: String,
    pub gamma: Var,
    pub beta: Var,
    pub running_mean: Array1<T>,
    pub running_var: Array1<T>,
}

/// Running-statistic updates collected during a train-mode forward pass,
/// to be written back by the single training writer after the step.
#[derive(Default)]
pub struct BnUpdates {
    pub updates: Vec<(String, Array1<f32>, Array1<f32>)>,
}

pub fn batch_norm<T: Element>(
    tape: &mut Tape<T>,
    x: Var,
    bn: &BnVars<T>,
    mode: Mode,
    updates: &mut BnUpdates,
) -> Var {
    let eps = T::from_f64(BN_EPS as f64);
    match mode {
        Mode::Eval => tape.batch_norm_eval(
            x,
            bn.gamma,
            bn.beta,
            bn.running_mean.clone(),
            bn.running_var.clone(),
            eps,
        ),
        Mode::Train => {
            let shape = tape.value(x).shape().to_vec();
            let m = (shape[0] * shape[2] * shape[3]) as f64;
            let (y, mean, var) = tape.batch_norm_train(x, bn.gamma, bn.beta, eps);
            // running update uses the unbiased variance, PyTorch-style
            let unbias = if m > 1.0 { m / (m - 1.0) } else { 1.0 };
            let mom = BN_MOMENTUM as f64;
            let new_mean: Array1<f32> = bn
                .running_mean
                .iter()
                .zip(mean.iter())
                .map(|(&r, &b)| ((1.0 - mom) * r.to_f64() + mom * b.to_f64()) as f32)
                .collect();
            let new_var: Array1<f32> = bn
                .running_var
                .iter()
                .zip(var.iter())
                .map(|(&r, &b)| ((1.0 - mom) * r.to_f64() + mom * b.to_f64() * unbias) as f32)
                .collect();
            updates.updates.push((bn.name.clone(), new_mean, new_var));
            y
        }
    }
}

pub fn activate<T: Element>(tape: &mut Tape<T>, x: Var, act: Act) -> Var {
    match act {
        Act::Relu => tape.relu(x),
        Act::LeakyRelu(slope) => tape.leaky_relu(x, T::from_f64(slope as f64)),
    }
}

/// Two 3x3 convolutions, each with batch norm and activation.
pub struct ConvBlockVars<T: Element> {
    pub conv1_w: Var,
    pub conv1_b: Var,
    pub bn1: BnVars<T>,
    pub conv2_w: Var,
    pub conv2_b: Var,
    pub bn2: BnVars<T>,
}

pub fn conv_block_tape<T: Element>(
    tape: &mut Tape<T>,
    x: Var,
    p: &ConvBlockVars<T>,
    act: Act,
    mode: Mode,
    updates: &mut BnUpdates,
) -> Var {
    let h = tape.conv2d(x, p.conv1_w, Some(p.conv1_b), 1);
    let h = batch_norm(tape, h, &p.bn1, mode, updates);
    let h = activate(tape, h, act);
    let h = tape.conv2d(h, p.conv2_w, Some(p.conv2_b), 1);
    let h = batch_norm(tape, h, &p.bn2, mode, updates);
    activate(tape, h, act)
}

/// Residual head: conv+bn+leaky-relu, then a bare conv so the output stays
/// an unconstrained signed residual.
pub struct HeadVars<T: Element> {
    pub conv1_w: Var,
    pub conv1_b: Var,
    pub bn1: BnVars<T>,
    pub conv2_w: Var,
    pub conv2_b: Var,
}

pub fn head_block_tape<T: Element>(
    tape: &mut Tape<T>,
    x: Var,
    p: &HeadVars<T>,
    slope: f32,
    mode: Mode,
    updates: &mut BnUpdates,
) -> Var {
    let h = tape.conv2d(x, p.conv1_w, Some(p.conv1_b), 1);
    let h = batch_norm(tape, h, &p.bn1, mode, updates);
    let h = activate(tape, h, Act::LeakyRelu(slope));
    tape.conv2d(h, p.conv2_w, Some(p.conv2_b), 1)
}

/// Names of the learnable leaves placed on a tape, in creation order, for
/// routing gradients back to the parameter store.
#[derive(Default)]
pub struct Registry {
    pub entries: Vec<(String, Var)>,
}

impl Registry {
    pub fn add(&mut self, name: impl Into<String>, var: Var) {
        self.entries.push((name.into(), var));
    }
}

/// Array-level batch-norm parameters for the public module wrappers.
#[derive(Debug, Clone)]
pub struct BnParams {
    pub gamma: Array1<f32>,
    pub beta: Array1<f32>,
    pub running_mean: Array1<f32>,
    pub running_var: Array1<f32>,
}

impl BnParams {
    /// gamma 1, beta 0, running stats at the identity.
    pub fn identity(c: usize) -> Self {
        BnParams {
            gamma: Array1::ones(c),
            beta: Array1::zeros(c),
            running_mean: Array1::zeros(c),
            running_var: Array1::ones(c),
        }
    }

    pub(crate) fn to_vars<T: Element>(
        &self,
        tape: &mut Tape<T>,
        name: &str,
        reg: &mut Registry,
        grad: bool,
    ) -> BnVars<T> {
        let gamma = tape.leaf(to_dyn_t(&self.gamma), grad);
        let beta = tape.leaf(to_dyn_t(&self.beta), grad);
        reg.add(format!("{name}.gamma"), gamma);
        reg.add(format!("{name}.beta"), beta);
        BnVars {
            name: name.to_string(),
            gamma,
            beta,
            running_mean: self.running_mean.mapv(|v| T::from_f64(v as f64)),
            running_var: self.running_var.mapv(|v| T::from_f64(v as f64)),
        }
    }
}

pub(crate) fn to_dyn_t<T: Element, D: ndarray::Dimension>(
    a: &ndarray::Array<f32, D>,
) -> ndarray::ArrayD<T> {
    a.mapv(|v| T::from_f64(v as f64)).into_dyn()
}
