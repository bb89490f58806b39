//! Network configuration: presets, sizing, and ablation switches.
//!
//! A config file is a single JSON document; unknown keys are rejected.
//! Loading expands the preset into a fully-populated [`NetworkConfig`] whose
//! channel plan is validated against the preset tables.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Encoder widths for the base network.
pub const ADU_NET_CHANNELS: [usize; 5] = [32, 64, 128, 256, 256];
/// Encoder widths for the large network.
pub const ADU_NET_PLUS_CHANNELS: [usize; 5] = [64, 128, 256, 512, 512];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    AduNet,
    AduNetPlus,
    Custom,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionMode {
    None,
    WmsaOnly,
    SwmsaOnly,
    Asymmetric,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    None,
    CffOnly,
    GcffOnly,
    Asymmetric,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderMode {
    Single,
    DualSymmetric,
    DualAsymmetric,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    Ssim,
    Mse,
    SsimPlusMse,
}

/// Per-stream fusion operator actually wired into a decoder block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FusionKind {
    /// Plain element-wise addition (fusion ablated away).
    Add,
    Cff,
    Gcff,
}

/// Per-stream attention operator actually wired into a decoder block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionKind {
    None,
    Wmsa,
    Swmsa,
}

/// Fully-expanded network configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub preset: Preset,
    /// Output channels of the five encoder blocks.
    pub encoder_channels: [usize; 5],
    /// (input, output) channels of the four decoder blocks.
    pub adb_channels: [[usize; 2]; 4],
    pub window_size: usize,
    pub num_heads: usize,
    pub attention_mode: AttentionMode,
    pub fusion_mode: FusionMode,
    pub decoder_mode: DecoderMode,
    pub loss_mode: LossMode,
    pub leaky_slope: f32,
    /// Seed for deterministic parameter initialization.
    pub init_seed: u64,
}

/// On-disk form: everything except the preset may be omitted.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub preset: Preset,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub encoder_channels: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub adb_channels: Option<Vec<[usize; 2]>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub window_size: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub num_heads: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub attention_mode: Option<AttentionMode>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fusion_mode: Option<FusionMode>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub decoder_mode: Option<DecoderMode>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss_mode: Option<LossMode>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub leaky_slope: Option<f32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub init_seed: Option<u64>,
}

impl Default for Preset {
    fn default() -> Self {
        Preset::AduNet
    }
}

impl ConfigFile {
    /// Expand defaults and presets into a validated [`NetworkConfig`].
    pub fn expand(&self) -> Result<NetworkConfig> {
        let encoder_channels: [usize; 5] = match self.preset {
            Preset::AduNet => check_preset_channels(&self.encoder_channels, ADU_NET_CHANNELS)?,
            Preset::AduNetPlus => {
                check_preset_channels(&self.encoder_channels, ADU_NET_PLUS_CHANNELS)?
            }
            Preset::Custom => {
                let v = self.encoder_channels.as_ref().ok_or_else(|| {
                    Error::Config("encoder_channels: required for preset \"custom\"".into())
                })?;
                v.as_slice().try_into().map_err(|_| {
                    Error::Config(format!(
                        "encoder_channels: expected 5 entries, got {}",
                        v.len()
                    ))
                })?
            }
        };
        let derived_adb = derive_adb_channels(&encoder_channels)?;
        let adb_channels = match &self.adb_channels {
            None => derived_adb,
            Some(v) => {
                let given: [[usize; 2]; 4] = v.as_slice().try_into().map_err(|_| {
                    Error::Config(format!("adb_channels: expected 4 pairs, got {}", v.len()))
                })?;
                if given != derived_adb {
                    return Err(Error::Config(format!(
                        "adb_channels: {:?} inconsistent with encoder_channels (expected {:?})",
                        given, derived_adb
                    )));
                }
                given
            }
        };
        let cfg = NetworkConfig {
            preset: self.preset,
            encoder_channels,
            adb_channels,
            window_size: self.window_size.unwrap_or(8),
            num_heads: self.num_heads.unwrap_or(4),
            attention_mode: self.attention_mode.unwrap_or(AttentionMode::Asymmetric),
            fusion_mode: self.fusion_mode.unwrap_or(FusionMode::Asymmetric),
            decoder_mode: self.decoder_mode.unwrap_or(DecoderMode::DualAsymmetric),
            loss_mode: self.loss_mode.unwrap_or(LossMode::Ssim),
            leaky_slope: self.leaky_slope.unwrap_or(0.01),
            init_seed: self.init_seed.unwrap_or(0),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

fn check_preset_channels(
    given: &Option<Vec<usize>>,
    expected: [usize; 5],
) -> Result<[usize; 5]> {
    match given {
        None => Ok(expected),
        Some(v) if v.as_slice() == expected => Ok(expected),
        Some(v) => Err(Error::Config(format!(
            "encoder_channels: {:?} does not match the preset table {:?}",
            v, expected
        ))),
    }
}

/// Decoder channel plan implied by the encoder widths: block j fuses at the
/// width of skip level 3-j and halves it on output; the last block halves
/// the first encoder width.
fn derive_adb_channels(enc: &[usize; 5]) -> Result<[[usize; 2]; 4]> {
    if enc[0] % 2 != 0 {
        return Err(Error::Config(format!(
            "encoder_channels: first entry {} must be even",
            enc[0]
        )));
    }
    Ok([
        [enc[3], enc[2]],
        [enc[2], enc[1]],
        [enc[1], enc[0]],
        [enc[0], enc[0] / 2],
    ])
}

impl NetworkConfig {
    pub fn adu_net() -> Self {
        ConfigFile {
            preset: Preset::AduNet,
            ..Default::default()
        }
        .expand()
        .expect("preset is valid")
    }

    pub fn adu_net_plus() -> Self {
        ConfigFile {
            preset: Preset::AduNetPlus,
            ..Default::default()
        }
        .expand()
        .expect("preset is valid")
    }

    /// Small custom network for tests and smoke runs.
    pub fn tiny() -> Self {
        ConfigFile {
            preset: Preset::Custom,
            encoder_channels: Some(vec![8, 16, 32, 64, 64]),
            ..Default::default()
        }
        .expand()
        .expect("tiny config is valid")
    }

    pub fn validate(&self) -> Result<()> {
        let enc = &self.encoder_channels;
        if enc.iter().any(|&c| c == 0) {
            return Err(Error::Config("encoder_channels: zero channel count".into()));
        }
        for i in 1..5 {
            if enc[i] < enc[i - 1] {
                return Err(Error::Config(format!(
                    "encoder_channels: must be non-decreasing, got {:?}",
                    enc
                )));
            }
        }
        if enc[3] != enc[4] {
            return Err(Error::Config(format!(
                "encoder_channels: last two entries must be equal, got {:?}",
                enc
            )));
        }
        if self.preset == Preset::AduNet && *enc != ADU_NET_CHANNELS {
            return Err(Error::Config(
                "encoder_channels: preset adu_net requires the preset table".into(),
            ));
        }
        if self.preset == Preset::AduNetPlus && *enc != ADU_NET_PLUS_CHANNELS {
            return Err(Error::Config(
                "encoder_channels: preset adu_net_plus requires the preset table".into(),
            ));
        }
        if self.adb_channels != derive_adb_channels(enc)? {
            return Err(Error::Config(format!(
                "adb_channels: {:?} inconsistent with encoder_channels",
                self.adb_channels
            )));
        }
        if self.window_size < 1 {
            return Err(Error::Config("window_size: must be >= 1".into()));
        }
        if self.num_heads < 1 {
            return Err(Error::Config("num_heads: must be >= 1".into()));
        }
        if self.attention_mode != AttentionMode::None {
            for &c in self.attended_channels().iter() {
                if c % self.num_heads != 0 {
                    return Err(Error::Config(format!(
                        "num_heads: {} does not divide attended channel count {}",
                        self.num_heads, c
                    )));
                }
            }
        }
        if !(self.leaky_slope > 0.0 && self.leaky_slope < 1.0) {
            return Err(Error::Config(format!(
                "leaky_slope: {} outside (0, 1)",
                self.leaky_slope
            )));
        }
        Ok(())
    }

    /// Channel widths at which fusion/attention operate, one per decoder block.
    pub fn attended_channels(&self) -> [usize; 4] {
        [
            self.adb_channels[0][0],
            self.adb_channels[1][0],
            self.adb_channels[2][0],
            self.adb_channels[3][0],
        ]
    }

    pub fn num_streams(&self) -> usize {
        match self.decoder_mode {
            DecoderMode::Single => 1,
            _ => 2,
        }
    }

    /// Fusion operator for decoder stream 0 (contamination) or 1 (scene).
    pub fn fusion_kind(&self, stream: usize) -> FusionKind {
        let pair = match self.fusion_mode {
            FusionMode::None => (FusionKind::Add, FusionKind::Add),
            FusionMode::CffOnly => (FusionKind::Cff, FusionKind::Cff),
            FusionMode::GcffOnly => (FusionKind::Gcff, FusionKind::Gcff),
            FusionMode::Asymmetric => (FusionKind::Cff, FusionKind::Gcff),
        };
        match (stream, self.decoder_mode) {
            (0, _) => pair.0,
            // a symmetric dual decoder repeats the contamination wiring
            (_, DecoderMode::DualSymmetric) => pair.0,
            _ => pair.1,
        }
    }

    /// Attention operator for decoder stream 0 or 1.
    pub fn attention_kind(&self, stream: usize) -> AttentionKind {
        let pair = match self.attention_mode {
            AttentionMode::None => (AttentionKind::None, AttentionKind::None),
            AttentionMode::WmsaOnly => (AttentionKind::Wmsa, AttentionKind::Wmsa),
            AttentionMode::SwmsaOnly => (AttentionKind::Swmsa, AttentionKind::Swmsa),
            AttentionMode::Asymmetric => (AttentionKind::Wmsa, AttentionKind::Swmsa),
        };
        match (stream, self.decoder_mode) {
            (0, _) => pair.0,
            (_, DecoderMode::DualSymmetric) => pair.0,
            _ => pair.1,
        }
    }

    /// Stable hash binding checkpoints to the architecture they were built for.
    pub fn hash(&self) -> u64 {
        let json = serde_json::to_string(self).expect("config serializes");
        fnv1a(json.as_bytes())
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Read and expand a JSON config file.
pub fn load_config(path: impl AsRef<Path>) -> Result<NetworkConfig> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: ConfigFile = serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("{}: {}", path.display(), e)))?;
    file.expand()
}
