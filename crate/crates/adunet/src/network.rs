//! Full network assembly: encoder, four decoder blocks, two residual heads,
//! and the residual composition `Y = clamp(I - Yc - Ys)`.

use autograd::{Element, Tape, Var};
use ndarray::Array3;

use crate::adb::{adb0_tape, adbj_tape, AdbParams, AdbSettings};
use crate::config::{DecoderMode, NetworkConfig};
use crate::encoder::{encode_tape, from_batch, to_batch, EncoderParams};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::nn::{head_block_tape, BnParams, BnUpdates, HeadVars, Mode, Registry};
use crate::params::{param_specs, ParamKind, ParameterStore};

/// Residual head parameters (conv+bn+activation then a bare conv).
#[derive(Debug, Clone)]
pub struct HeadParams {
    pub conv1_w: ndarray::Array4<f32>,
    pub conv1_b: ndarray::Array1<f32>,
    pub bn1: BnParams,
    pub conv2_w: ndarray::Array4<f32>,
    pub conv2_b: ndarray::Array1<f32>,
}

impl HeadParams {
    pub fn from_store(store: &ParameterStore, prefix: &str) -> Self {
        HeadParams {
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
            bn1: crate::encoder::bn_from_store(store, &format!("{prefix}.bn1")),
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
        }
    }

    fn to_vars<T: Element>(
        &self,
        tape: &mut Tape<T>,
        prefix: &str,
        reg: &mut Registry,
        grad: bool,
    ) -> HeadVars<T> {
        let conv1_w = tape.leaf(crate::nn::to_dyn_t(&self.conv1_w), grad);
        let conv1_b = tape.leaf(crate::nn::to_dyn_t(&self.conv1_b), grad);
        reg.add(format!("{prefix}.conv1.weight"), conv1_w);
        reg.add(format!("{prefix}.conv1.bias"), conv1_b);
        let bn1 = self.bn1.to_vars(tape, &format!("{prefix}.bn1"), reg, grad);
        let conv2_w = tape.leaf(crate::nn::to_dyn_t(&self.conv2_w), grad);
        let conv2_b = tape.leaf(crate::nn::to_dyn_t(&self.conv2_b), grad);
        reg.add(format!("{prefix}.conv2.weight"), conv2_w);
        reg.add(format!("{prefix}.conv2.bias"), conv2_b);
        HeadVars {
            conv1_w,
            conv1_b,
            bn1,
            conv2_w,
            conv2_b,
        }
    }
}

/// Outputs of one batched forward pass on a tape.
pub struct BatchGraph {
    /// Restored image before clamping, [N,3,H,W].
    pub y_pre: Var,
    /// Contamination residual, [N,3,H,W].
    pub yc: Var,
    /// Scene residual; absent for a single decoder.
    pub ys: Option<Var>,
    /// Learnable leaves by parameter name (empty unless gradients tracked
    /// were requested with names; always populated, names always valid).
    pub registry: Registry,
    pub updates: BnUpdates,
    /// (stage label, tensor shape) for every named intermediate.
    pub trace: Vec<(String, Vec<usize>)>,
}

/// Wire the whole network onto `tape` for an input batch `x` [N,3,H,W].
pub fn build_forward<T: Element>(
    tape: &mut Tape<T>,
    x: Var,
    store: &ParameterStore,
    cfg: &NetworkConfig,
    mode: Mode,
    track_grads: bool,
) -> Result<BatchGraph> {
    if store.config_hash != cfg.hash() {
        return Err(Error::Config(
            "parameter store was built for a different config (hash mismatch)".into(),
        ));
    }
    let shape = tape.value(x).shape().to_vec();
    let (h, w) = (shape[2], shape[3]);
    if shape[1] != 3 {
        return Err(Error::Shape(format!("expected 3 input channels, got {}", shape[1])));
    }
    if h % 16 != 0 || w % 16 != 0 {
        return Err(Error::Shape(format!("input {h}x{w} not divisible by 16")));
    }

    let mut reg = Registry::default();
    let mut updates = BnUpdates::default();
    let mut trace: Vec<(String, Vec<usize>)> = vec![("input".into(), shape.clone())];

    let enc_params = EncoderParams::from_store(store);
    let enc_vars: Vec<_> = enc_params
        .blocks
        .iter()
        .enumerate()
        .map(|(i, b)| b.to_vars(tape, &format!("encoder.conv{i}"), &mut reg, track_grads))
        .collect();
    let feats = encode_tape(tape, x, &enc_vars, mode, &mut updates);
    for (i, &f) in feats.iter().enumerate() {
        trace.push((format!("encoder.F{i}"), tape.value(f).shape().to_vec()));
    }

    let settings = AdbSettings::from_config(cfg);
    let stream_tags = ["c", "s"];
    let mut current: Vec<Var> = Vec::new();
    for j in 0..4 {
        let p = AdbParams::from_store(store, cfg, j)?;
        let vars = p.to_vars(tape, &mut reg, track_grads);
        current = if j == 0 {
            adb0_tape(tape, feats[3], feats[4], &vars, &settings, mode, &mut updates)
        } else {
            adbj_tape(tape, &current, feats[3 - j], &vars, &settings, mode, &mut updates)
        };
        for (s, &z) in current.iter().enumerate() {
            trace.push((
                format!("adb{j}.Z{}", stream_tags[s]),
                tape.value(z).shape().to_vec(),
            ));
        }
    }

    let head_c = HeadParams::from_store(store, "head.c");
    let hv = head_c.to_vars(tape, "head.c", &mut reg, track_grads);
    let yc = head_block_tape(tape, current[0], &hv, cfg.leaky_slope, mode, &mut updates);
    trace.push(("head.Yc".into(), tape.value(yc).shape().to_vec()));

    let ys = if cfg.decoder_mode == DecoderMode::Single {
        None
    } else {
        let head_s = HeadParams::from_store(store, "head.s");
        let hv = head_s.to_vars(tape, "head.s", &mut reg, track_grads);
        let ys = head_block_tape(tape, current[1], &hv, cfg.leaky_slope, mode, &mut updates);
        trace.push(("head.Ys".into(), tape.value(ys).shape().to_vec()));
        Some(ys)
    };

    let mut y_pre = tape.sub(x, yc);
    if let Some(ys) = ys {
        y_pre = tape.sub(y_pre, ys);
    }
    trace.push(("output.Y".into(), tape.value(y_pre).shape().to_vec()));

    Ok(BatchGraph {
        y_pre,
        yc,
        ys,
        registry: reg,
        updates,
        trace,
    })
}

/// Result of restoring a single image.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// Restored image, clamped to [0,1].
    pub restored: Image,
    /// Restored values before clamping.
    pub pre_clamp: Array3<f32>,
    /// Signed contamination residual.
    pub contamination_residual: Array3<f32>,
    /// Signed scene residual (zeros for a single decoder).
    pub scene_residual: Array3<f32>,
    pub trace: Vec<(String, Vec<usize>)>,
}

/// Restore one image in eval mode. Dimensions must divide by 16 (the CLI
/// pads and crops around this).
pub fn forward(
    image: &Image,
    store: &ParameterStore,
    cfg: &NetworkConfig,
) -> Result<ForwardOutput> {
    let mut tape = Tape::<f32>::new();
    let x = tape.leaf(to_batch(image.data()), false);
    let g = build_forward(&mut tape, x, store, cfg, Mode::Eval, false)?;
    let pre_clamp = from_batch(tape.value(g.y_pre));
    let contamination_residual = from_batch(tape.value(g.yc));
    let scene_residual = match g.ys {
        Some(ys) => from_batch(tape.value(ys)),
        None => Array3::zeros(contamination_residual.raw_dim()),
    };
    let restored = Image::from_unclamped(pre_clamp.clone())?;
    Ok(ForwardOutput {
        restored,
        pre_clamp,
        contamination_residual,
        scene_residual,
        trace: g.trace,
    })
}

/// Shape trace of a full forward pass at the given input size, using
/// freshly initialized parameters.
pub fn shape_trace(cfg: &NetworkConfig, h: usize, w: usize) -> Result<Vec<(String, Vec<usize>)>> {
    let store = ParameterStore::init(cfg);
    let img = Image::zeros(h, w);
    Ok(forward(&img, &store, cfg)?.trace)
}

/// Learnable-parameter census for a config.
#[derive(Debug, Clone)]
pub struct ParamBreakdown {
    pub total: usize,
    pub conv: usize,
    pub bn: usize,
    pub fusion: usize,
    pub attention: usize,
    /// Subtotals per architectural segment (encoder, adb0..3, head).
    pub segments: Vec<(String, usize)>,
}

impl ParamBreakdown {
    pub fn table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("{:<12} {:>12}\n", "segment", "parameters"));
        for (name, n) in &self.segments {
            out.push_str(&format!("{:<12} {:>12}\n", name, n));
        }
        out.push_str(&format!("{:<12} {:>12}\n", "kind: conv", self.conv));
        out.push_str(&format!("{:<12} {:>12}\n", "kind: bn", self.bn));
        out.push_str(&format!("{:<12} {:>12}\n", "kind: fusion", self.fusion));
        out.push_str(&format!("{:<12} {:>12}\n", "kind: attn", self.attention));
        out.push_str(&format!("{:<12} {:>12}\n", "total", self.total));
        out
    }
}

/// Count learnable scalars per the config's parameter plan.
pub fn count_parameters(cfg: &NetworkConfig) -> ParamBreakdown {
    let (specs, _) = param_specs(cfg);
    let mut total = 0usize;
    let (mut conv, mut bn, mut fusion, mut attention) = (0usize, 0usize, 0usize, 0usize);
    let mut segments: Vec<(String, usize)> = Vec::new();
    for spec in &specs {
        let n: usize = spec.shape.iter().product();
        total += n;
        match spec.kind {
            ParamKind::Conv => conv += n,
            ParamKind::Bn => bn += n,
            ParamKind::Fusion => fusion += n,
            ParamKind::Attention => attention += n,
        }
        let segment = spec.name.split('.').next().unwrap_or("?").to_string();
        match segments.iter_mut().find(|(s, _)| *s == segment) {
            Some((_, acc)) => *acc += n,
            None => segments.push((segment, n)),
        }
    }
    ParamBreakdown {
        total,
        conv,
        bn,
        fusion,
        attention,
        segments,
    }
}
