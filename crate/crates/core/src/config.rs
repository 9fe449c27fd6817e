//! Architecture and training hyperparameters, with named presets.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dsp::{FeatureRecipe, StftConfig, Window};
use crate::error::{Error, Result};

/// Auxiliary-loss weight as a function of the training step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum AuxWeight {
    Constant {
        value: f64,
    },
    /// Geometric interpolation from `start` to `end` over `steps`, then held.
    Decay {
        start: f64,
        end: f64,
        steps: u64,
    },
}

impl AuxWeight {
    pub fn at(&self, step: u64) -> f64 {
        match *self {
            AuxWeight::Constant { value } => value,
            AuxWeight::Decay { start, end, steps } => {
                if steps == 0 || step >= steps {
                    return end;
                }
                let frac = step as f64 / steps as f64;
                start * (end / start).powf(frac)
            }
        }
    }

    fn validate(&self) -> Result<()> {
        match *self {
            AuxWeight::Constant { value } if value >= 0.0 && value.is_finite() => Ok(()),
            AuxWeight::Decay { start, end, .. } if start > 0.0 && end > 0.0 && start.is_finite() && end.is_finite() => Ok(()),
            w => Err(Error::Config(format!("invalid aux weight schedule {w:?}"))),
        }
    }
}

/// Which auxiliary phoneme decoders are trained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AuxMode {
    None,
    Source,
    Target,
    Both,
}

impl AuxMode {
    pub const ALL: [AuxMode; 4] = [AuxMode::None, AuxMode::Source, AuxMode::Target, AuxMode::Both];

    pub fn source(self) -> bool {
        matches!(self, AuxMode::Source | AuxMode::Both)
    }

    pub fn target(self) -> bool {
        matches!(self, AuxMode::Target | AuxMode::Both)
    }

    pub fn name(self) -> &'static str {
        match self {
            AuxMode::None => "none",
            AuxMode::Source => "source",
            AuxMode::Target => "target",
            AuxMode::Both => "both",
        }
    }
}

impl fmt::Display for AuxMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AuxMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AuxMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown aux mode `{s}` (none|source|target|both)")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Preset {
    Conversational,
    Fisher,
    Toy,
}

impl Preset {
    pub fn config(self) -> ModelConfig {
        match self {
            Preset::Conversational => ModelConfig::conversational(),
            Preset::Fisher => ModelConfig::fisher(),
            Preset::Toy => ModelConfig::toy(),
        }
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "CONVERSATIONAL" => Ok(Preset::Conversational),
            "FISHER" => Ok(Preset::Fisher),
            "TOY" => Ok(Preset::Toy),
            _ => Err(Error::Config(format!("unknown preset `{s}` (CONVERSATIONAL|FISHER|TOY)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub feature_recipe: FeatureRecipe,
    pub n_mels: usize,
    /// Analysis of the source waveform.
    pub input_stft: StftConfig,
    /// Analysis/synthesis of the target spectrogram.
    pub output_stft: StftConfig,
    pub symbol_vocab: usize,

    pub encoder_layers: usize,
    /// Units per direction.
    pub encoder_units: usize,
    pub decoder_layers: usize,
    pub decoder_units: usize,
    pub attention_heads: usize,
    pub prenet_units: usize,
    pub prenet_dropout: f64,
    /// Keep pre-net dropout on while decoding (off by default).
    pub prenet_dropout_at_inference: bool,
    pub postnet_layers: usize,
    pub postnet_channels: usize,
    pub postnet_kernel: usize,
    pub reduction: usize,

    pub aux_layers: usize,
    pub aux_units: usize,
    pub aux_attention_units: usize,
    pub aux_embedding: usize,
    /// 1-based encoder layer feeding the source-phoneme decoder.
    pub aux_source_tap: usize,
    /// 1-based encoder layer feeding the target-phoneme decoder.
    pub aux_target_tap: usize,
    pub aux_dropout: f64,
    pub aux_weight: AuxWeight,

    pub zoneout: f64,
    pub attention_dropout: f64,
    pub learning_rate: f64,
    pub weight_noise: f64,
    pub batch_size: usize,
    /// Decoder steps allowed per encoder frame when free-running.
    pub max_decode_factor: usize,
    pub speaker_conditioning: bool,
    pub speaker_projection: usize,
    pub griffin_lim_iters: usize,
    pub checkpoint_every: u64,
}

fn stft(sample_rate: u32, window: usize, hop: usize, fft: usize) -> StftConfig {
    StftConfig { sample_rate, window_length: window, hop_length: hop, fft_size: fft, window: Window::Hann }
}

impl ModelConfig {
    pub fn conversational() -> Self {
        ModelConfig {
            feature_recipe: FeatureRecipe::Stack3,
            n_mels: 80,
            input_stft: stft(16000, 800, 200, 1024),
            output_stft: StftConfig::full_scale(),
            symbol_vocab: 16,
            encoder_layers: 8,
            encoder_units: 1024,
            decoder_layers: 6,
            decoder_units: 1024,
            attention_heads: 4,
            prenet_units: 32,
            prenet_dropout: 0.5,
            prenet_dropout_at_inference: false,
            postnet_layers: 5,
            postnet_channels: 128,
            postnet_kernel: 5,
            reduction: 2,
            aux_layers: 2,
            aux_units: 256,
            aux_attention_units: 256,
            aux_embedding: 64,
            aux_source_tap: 8,
            aux_target_tap: 8,
            aux_dropout: 0.2,
            aux_weight: AuxWeight::Constant { value: 1.0 },
            zoneout: 0.1,
            attention_dropout: 0.1,
            learning_rate: 0.002,
            weight_noise: 0.0,
            batch_size: 16,
            max_decode_factor: 3,
            speaker_conditioning: false,
            speaker_projection: 16,
            griffin_lim_iters: 30,
            checkpoint_every: 1000,
        }
    }

    pub fn fisher() -> Self {
        ModelConfig {
            feature_recipe: FeatureRecipe::DeltasAccel,
            input_stft: stft(8000, 400, 100, 512),
            encoder_units: 256,
            decoder_layers: 4,
            aux_source_tap: 4,
            aux_target_tap: 6,
            aux_dropout: 0.3,
            aux_weight: AuxWeight::Decay { start: 0.3, end: 0.001, steps: 160_000 },
            learning_rate: 0.006,
            weight_noise: 0.05,
            ..ModelConfig::conversational()
        }
    }

    /// Desk-scale configuration for the synthetic corpus.
    pub fn toy() -> Self {
        ModelConfig {
            feature_recipe: FeatureRecipe::Stack3,
            n_mels: 32,
            input_stft: StftConfig::toy(),
            output_stft: StftConfig::toy(),
            encoder_layers: 4,
            encoder_units: 64,
            decoder_layers: 2,
            decoder_units: 128,
            postnet_channels: 32,
            aux_units: 64,
            aux_attention_units: 64,
            aux_embedding: 16,
            aux_source_tap: 2,
            aux_target_tap: 3,
            learning_rate: 0.002,
            ..ModelConfig::conversational()
        }
    }

    pub fn encoder_width(&self) -> usize {
        2 * self.encoder_units
    }

    /// Width of the memory the primary decoder attends over.
    pub fn memory_width(&self) -> usize {
        self.encoder_width() + if self.speaker_conditioning { self.speaker_projection } else { 0 }
    }

    pub fn input_channels(&self) -> usize {
        self.feature_recipe.channels(self.n_mels)
    }

    pub fn bins(&self) -> usize {
        self.output_stft.bins()
    }

    /// Output classes of the phoneme decoders: symbols plus end-of-sequence.
    pub fn aux_classes(&self) -> usize {
        self.symbol_vocab + 1
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        self.input_stft.validate()?;
        self.output_stft.validate()?;
        let positive = [
            ("n_mels", self.n_mels),
            ("symbol_vocab", self.symbol_vocab),
            ("encoder_layers", self.encoder_layers),
            ("encoder_units", self.encoder_units),
            ("decoder_layers", self.decoder_layers),
            ("decoder_units", self.decoder_units),
            ("attention_heads", self.attention_heads),
            ("prenet_units", self.prenet_units),
            ("postnet_channels", self.postnet_channels),
            ("aux_layers", self.aux_layers),
            ("aux_units", self.aux_units),
            ("aux_attention_units", self.aux_attention_units),
            ("aux_embedding", self.aux_embedding),
            ("batch_size", self.batch_size),
            ("max_decode_factor", self.max_decode_factor),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return bad(format!("{name} must be positive"));
        }
        if self.reduction == 0 {
            return bad("reduction factor must be at least 1".into());
        }
        if self.postnet_kernel.is_multiple_of(2) {
            return bad(format!("postnet kernel {} must be odd", self.postnet_kernel));
        }
        for (name, tap) in [("aux_source_tap", self.aux_source_tap), ("aux_target_tap", self.aux_target_tap)] {
            if tap == 0 || tap > self.encoder_layers {
                return bad(format!("{name} = {tap} outside 1..={}", self.encoder_layers));
            }
        }
        if !self.memory_width().is_multiple_of(self.attention_heads) {
            return bad(format!("memory width {} not divisible by {} attention heads", self.memory_width(), self.attention_heads));
        }
        for (name, p) in [
            ("prenet_dropout", self.prenet_dropout),
            ("aux_dropout", self.aux_dropout),
            ("zoneout", self.zoneout),
            ("attention_dropout", self.attention_dropout),
        ] {
            if !(0.0..1.0).contains(&p) {
                return bad(format!("{name} = {p} outside [0, 1)"));
            }
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning rate {} must be positive", self.learning_rate));
        }
        if !(self.weight_noise >= 0.0 && self.weight_noise.is_finite()) {
            return bad(format!("weight noise {} must be non-negative", self.weight_noise));
        }
        self.aux_weight.validate()
    }

    /// Applies a JSON object of overrides; unknown keys are rejected.
    pub fn merged(&self, overrides: &serde_json::Value) -> Result<ModelConfig> {
        let mut base = serde_json::to_value(self)?;
        let serde_json::Value::Object(o) = overrides else {
            return Err(Error::Config("config overrides must be a JSON object".into()));
        };
        let map = base.as_object_mut().expect("config serializes to an object");
        for (k, v) in o {
            if !map.contains_key(k) {
                return Err(Error::Config(format!("unknown config key `{k}`")));
            }
            map.insert(k.clone(), v.clone());
        }
        let cfg: ModelConfig = serde_json::from_value(base).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::toy()
    }
}
