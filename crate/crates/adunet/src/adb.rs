//! Asymmetric dual-decoder blocks.
//!
//! The first block fuses the two deepest encoder features (upsampling the
//! deeper one); later blocks concatenate the previous block's two streams,
//! upsample, reduce each stream with its own input convolution, and fuse
//! with the matching encoder skip. Stream 0 (contamination) pairs CFF with
//! W-MSA; stream 1 (scene) pairs GCFF with SW-MSA, subject to the ablation
//! switches in the config.

use autograd::{Element, Tape, Var};
use ndarray::Array3;

use crate::attention::{window_attention_tape, AttentionParams, AttnVars};
use crate::config::{AttentionKind, FusionKind, NetworkConfig};
use crate::encoder::{from_batch, to_batch, ConvBlockParams};
use crate::error::{Error, Result};
use crate::fusion::{cff_tape, gcff_tape, FusionParams, FusionVars};
use crate::image::FeatureMap;
use crate::nn::{conv_block_tape, Act, BnUpdates, ConvBlockVars, Mode, Registry};
use crate::params::ParameterStore;

/// Bilinear 2x upsampling of a [C,H,W] map.
pub fn upsample2x(x: &Array3<f32>) -> Array3<f32> {
    let mut tape = Tape::<f32>::new();
    let v = tape.leaf(to_batch(x), false);
    let y = tape.upsample_bilinear2x(v);
    from_batch(tape.value(y))
}

/// Static geometry/ablation settings shared by all decoder blocks.
#[derive(Debug, Clone, Copy)]
pub struct AdbSettings {
    pub window: usize,
    pub heads: usize,
    pub slope: f32,
}

impl AdbSettings {
    pub fn from_config(cfg: &NetworkConfig) -> Self {
        AdbSettings {
            window: cfg.window_size,
            heads: cfg.num_heads,
            slope: cfg.leaky_slope,
        }
    }
}

/// Tape handles for one decoder stream within a block.
pub struct StreamVars<T: Element> {
    /// Present for blocks after the first.
    pub conv_in: Option<ConvBlockVars<T>>,
    pub fusion_kind: FusionKind,
    pub fusion: Option<FusionVars<T>>,
    pub attention_kind: AttentionKind,
    pub attn: Option<AttnVars>,
    pub conv_out: ConvBlockVars<T>,
}

/// Tape handles for one decoder block (one or two streams).
pub struct AdbVars<T: Element> {
    pub streams: Vec<StreamVars<T>>,
}

/// Fusion, attention, and the output convolution for one stream.
fn stream_tail<T: Element>(
    tape: &mut Tape<T>,
    a: Var,
    b: Var,
    sv: &StreamVars<T>,
    s: &AdbSettings,
    mode: Mode,
    updates: &mut BnUpdates,
) -> Var {
    let fused = match sv.fusion_kind {
        FusionKind::Add => tape.add(a, b),
        FusionKind::Cff => cff_tape(tape, a, b, sv.fusion.as_ref().expect("cff vars"), mode, updates),
        FusionKind::Gcff => {
            gcff_tape(tape, a, b, sv.fusion.as_ref().expect("gcff vars"), mode, updates)
        }
    };
    let attended = match sv.attention_kind {
        AttentionKind::None => fused,
        AttentionKind::Wmsa => {
            window_attention_tape(tape, fused, sv.attn.as_ref().expect("attn vars"), s.window, s.heads, false).out
        }
        AttentionKind::Swmsa => {
            window_attention_tape(tape, fused, sv.attn.as_ref().expect("attn vars"), s.window, s.heads, true).out
        }
    };
    conv_block_tape(tape, attended, &sv.conv_out, Act::LeakyRelu(s.slope), mode, updates)
}

/// First decoder block: fuse F3 with upsampled F4, once per stream.
pub fn adb0_tape<T: Element>(
    tape: &mut Tape<T>,
    f3: Var,
    f4: Var,
    vars: &AdbVars<T>,
    s: &AdbSettings,
    mode: Mode,
    updates: &mut BnUpdates,
) -> Vec<Var> {
    let up = tape.upsample_bilinear2x(f4);
    vars.streams
        .iter()
        .map(|sv| stream_tail(tape, f3, up, sv, s, mode, updates))
        .collect()
}

/// Later decoder blocks: merge the previous streams, upsample, reduce with
/// per-stream input convolutions, then fuse with the encoder skip.
pub fn adbj_tape<T: Element>(
    tape: &mut Tape<T>,
    prev: &[Var],
    fskip: Var,
    vars: &AdbVars<T>,
    s: &AdbSettings,
    mode: Mode,
    updates: &mut BnUpdates,
) -> Vec<Var> {
    let merged = match prev {
        [only] => *only,
        [c, sstream] => tape.concat_channels(*c, *sstream),
        _ => panic!("decoder carries one or two streams"),
    };
    let up = tape.upsample_bilinear2x(merged);
    vars.streams
        .iter()
        .map(|sv| {
            let reduced = conv_block_tape(
                tape,
                up,
                sv.conv_in.as_ref().expect("conv_in for later blocks"),
                Act::LeakyRelu(s.slope),
                mode,
                updates,
            );
            stream_tail(tape, reduced, fskip, sv, s, mode, updates)
        })
        .collect()
}

/// Array-level parameters for one decoder block, extracted from a store.
#[derive(Debug, Clone)]
pub struct AdbParams {
    pub block: usize,
    pub settings: AdbSettings,
    pub streams: Vec<AdbStreamParams>,
}

#[derive(Debug, Clone)]
pub struct AdbStreamParams {
    pub conv_in: Option<ConvBlockParams>,
    pub fusion_kind: FusionKind,
    pub fusion: Option<FusionParams>,
    pub attention_kind: AttentionKind,
    pub attn: Option<AttentionParams>,
    pub conv_out: ConvBlockParams,
}

impl AdbParams {
    pub fn from_store(store: &ParameterStore, cfg: &NetworkConfig, block: usize) -> Result<Self> {
        if block >= 4 {
            return Err(Error::Config(format!("decoder block index {block} out of range")));
        }
        let tags: &[&str] = if cfg.num_streams() == 1 { &["c"] } else { &["c", "s"] };
        let streams = tags
            .iter()
            .enumerate()
            .map(|(sidx, tag)| {
                let prefix = format!("adb{block}.{tag}");
                let fusion_kind = cfg.fusion_kind(sidx);
                let attention_kind = cfg.attention_kind(sidx);
                AdbStreamParams {
                    conv_in: (block > 0)
                        .then(|| ConvBlockParams::from_store(store, &format!("{prefix}.conv_in"))),
                    fusion_kind,
                    fusion: (fusion_kind != FusionKind::Add)
                        .then(|| FusionParams::from_store(store, &format!("{prefix}.fusion"))),
                    attention_kind,
                    attn: (attention_kind != AttentionKind::None)
                        .then(|| AttentionParams::from_store(store, &format!("{prefix}.attn"))),
                    conv_out: ConvBlockParams::from_store(store, &format!("{prefix}.conv_out")),
                }
            })
            .collect();
        Ok(AdbParams {
            block,
            settings: AdbSettings::from_config(cfg),
            streams,
        })
    }

    pub(crate) fn to_vars<T: Element>(
        &self,
        tape: &mut Tape<T>,
        reg: &mut Registry,
        grad: bool,
    ) -> AdbVars<T> {
        let tags = ["c", "s"];
        let streams = self
            .streams
            .iter()
            .enumerate()
            .map(|(sidx, sp)| {
                let prefix = format!("adb{}.{}", self.block, tags[sidx]);
                StreamVars {
                    conv_in: sp
                        .conv_in
                        .as_ref()
                        .map(|p| p.to_vars(tape, &format!("{prefix}.conv_in"), reg, grad)),
                    fusion_kind: sp.fusion_kind,
                    fusion: sp
                        .fusion
                        .as_ref()
                        .map(|p| p.to_vars(tape, &format!("{prefix}.fusion"), reg, grad)),
                    attention_kind: sp.attention_kind,
                    attn: sp
                        .attn
                        .as_ref()
                        .map(|p| p.to_vars(tape, &format!("{prefix}.attn"), reg, grad)),
                    conv_out: sp.conv_out.to_vars(tape, &format!("{prefix}.conv_out"), reg, grad),
                }
            })
            .collect();
        AdbVars { streams }
    }
}

fn run_block<T: Element>(tape: &mut Tape<T>, inputs: BlockInputs, p: &AdbParams) -> Vec<Var> {
    let mut updates = BnUpdates::default();
    let mut reg = Registry::default();
    let vars = p.to_vars(tape, &mut reg, false);
    match inputs {
        BlockInputs::First { f3, f4 } => {
            adb0_tape(tape, f3, f4, &vars, &p.settings, Mode::Eval, &mut updates)
        }
        BlockInputs::Later { prev, fskip } => {
            adbj_tape(tape, &prev, fskip, &vars, &p.settings, Mode::Eval, &mut updates)
        }
    }
}

enum BlockInputs {
    First { f3: Var, f4: Var },
    Later { prev: Vec<Var>, fskip: Var },
}

/// First decoder block in eval mode on single feature maps.
pub fn adb0_forward(
    f3: &FeatureMap,
    f4: &FeatureMap,
    p: &AdbParams,
) -> Result<(FeatureMap, FeatureMap)> {
    if p.block != 0 {
        return Err(Error::Config(format!(
            "adb0_forward called with block {} parameters",
            p.block
        )));
    }
    if p.streams.len() != 2 {
        return Err(Error::Config(
            "adb0_forward requires a dual-decoder configuration".into(),
        ));
    }
    if f3.channels() != f4.channels() {
        return Err(Error::Shape(format!(
            "deepest features must share channels: {} vs {}",
            f3.channels(),
            f4.channels()
        )));
    }
    if f3.height() != 2 * f4.height() || f3.width() != 2 * f4.width() {
        return Err(Error::Shape(format!(
            "F4 must sit one pyramid level below F3: {}x{} vs {}x{}",
            f4.height(),
            f4.width(),
            f3.height(),
            f3.width()
        )));
    }
    let mut tape = Tape::<f32>::new();
    let f3v = tape.leaf(to_batch(&f3.data), false);
    let f4v = tape.leaf(to_batch(&f4.data), false);
    let outs = run_block(&mut tape, BlockInputs::First { f3: f3v, f4: f4v }, p);
    collect_pair(&tape, &outs, f3.level)
}

/// Later decoder blocks in eval mode on single feature maps.
pub fn adbj_forward(
    zc: &FeatureMap,
    zs: &FeatureMap,
    fskip: &FeatureMap,
    p: &AdbParams,
) -> Result<(FeatureMap, FeatureMap)> {
    if p.block == 0 {
        return Err(Error::Config("adbj_forward called with block 0 parameters".into()));
    }
    if zc.data.shape() != zs.data.shape() {
        return Err(Error::Shape(format!(
            "stream latents must match: {:?} vs {:?}",
            zc.data.shape(),
            zs.data.shape()
        )));
    }
    if fskip.height() != 2 * zc.height() || fskip.width() != 2 * zc.width() {
        return Err(Error::Shape(format!(
            "skip resolution {}x{} must be exactly twice the latent {}x{}",
            fskip.height(),
            fskip.width(),
            zc.height(),
            zc.width()
        )));
    }
    if p.streams.len() != 2 {
        return Err(Error::Config(
            "adbj_forward requires a dual-decoder configuration".into(),
        ));
    }
    let expect_in = p.streams[0]
        .conv_in
        .as_ref()
        .expect("later block has conv_in")
        .in_channels();
    if 2 * zc.channels() != expect_in {
        return Err(Error::Shape(format!(
            "latent channels {} (x2 streams) do not match conv_in {}",
            zc.channels(),
            expect_in
        )));
    }
    let mut tape = Tape::<f32>::new();
    let zcv = tape.leaf(to_batch(&zc.data), false);
    let zsv = tape.leaf(to_batch(&zs.data), false);
    let skipv = tape.leaf(to_batch(&fskip.data), false);
    let outs = run_block(
        &mut tape,
        BlockInputs::Later {
            prev: vec![zcv, zsv],
            fskip: skipv,
        },
        p,
    );
    collect_pair(&tape, &outs, fskip.level)
}

fn collect_pair(
    tape: &Tape<f32>,
    outs: &[Var],
    level: usize,
) -> Result<(FeatureMap, FeatureMap)> {
    assert_eq!(outs.len(), 2, "pair wrappers require dual streams");
    Ok((
        FeatureMap::new(from_batch(tape.value(outs[0])), level),
        FeatureMap::new(from_batch(tape.value(outs[1])), level),
    ))
}
