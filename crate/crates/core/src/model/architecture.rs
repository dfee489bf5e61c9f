//! Declarative U-net description derived from a hyperparameter vector.
//!
//! Serialized as TOML with one `[[encoder_levels]]` / `[[decoder_levels]]`
//! table per resolution level, e.g.
//!
//! ```toml
//! input_size = 256
//! input_channels = 1
//!
//! [[encoder_levels]]
//! level = 0
//! resolution = 256
//! features = 32
//!
//! [[encoder_levels.convs]]
//! in_channels = 1
//! out_channels = 32
//! kernel = 3
//! batch_norm = false
//! activation = "relu"
//! dropout = 0.0
//! ```
//!
//! Decoder levels are listed in execution order, deepest first. Each decoder
//! level up-samples by two, applies `up_conv` (2×2), concatenates the encoder
//! output of the same level (`skip_channels`) and runs its two 3×3 `convs`.

use serde::{Deserialize, Serialize};

use super::HyperParams;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Sigmoid,
}

/// One convolution followed by optional BN, an activation and optional dropout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub batch_norm: bool,
    pub activation: Activation,
    pub dropout: f64,
}

impl ConvSpec {
    fn hidden(in_channels: usize, out_channels: usize, kernel: usize, batch_norm: bool, dropout: f64) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel,
            batch_norm,
            activation: Activation::Relu,
            dropout,
        }
    }

    /// Kernel weights, biases and BN scale/shift.
    pub fn parameter_count(&self) -> usize {
        let kernel = self.kernel * self.kernel * self.in_channels * self.out_channels;
        let bn = if self.batch_norm { 2 * self.out_channels } else { 0 };
        kernel + self.out_channels + bn
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderLevel {
    pub level: usize,
    pub resolution: usize,
    pub features: usize,
    pub convs: Vec<ConvSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderLevel {
    pub level: usize,
    pub resolution: usize,
    pub features: usize,
    pub up_conv: ConvSpec,
    pub skip_channels: usize,
    pub convs: Vec<ConvSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchitectureSpec {
    pub input_size: usize,
    pub input_channels: usize,
    pub encoder_levels: Vec<EncoderLevel>,
    pub bottleneck: EncoderLevel,
    pub decoder_levels: Vec<DecoderLevel>,
    pub output_head: ConvSpec,
}

/// Per-level feature counts `F · 2^min(i, T)` for `i = 0..=N`; the last entry
/// is the bottleneck.
pub fn feature_ladder(base_features: usize, doublings: usize, levels: usize) -> Result<Vec<usize>> {
    if doublings > levels {
        return Err(Error::Architecture(format!(
            "doublings T = {doublings} exceed pooling levels N = {levels}"
        )));
    }
    if base_features == 0 {
        return Err(Error::Architecture("base feature count must be positive".into()));
    }
    Ok((0..=levels).map(|i| base_features << i.min(doublings)).collect())
}

fn conv_pair(in_channels: usize, features: usize, hp: &HyperParams) -> Vec<ConvSpec> {
    let bn = hp.uses_batch_norm();
    vec![
        ConvSpec::hidden(in_channels, features, 3, bn, hp.dropout),
        ConvSpec::hidden(features, features, 3, bn, hp.dropout),
    ]
}

/// Expands a validated hyperparameter vector into a U-net description.
pub fn build_architecture(hp: &HyperParams, input_size: usize) -> Result<ArchitectureSpec> {
    hp.validate()?;
    let levels = hp.pool_levels as usize;
    let divisor = 1usize << levels;
    if input_size == 0 || !input_size.is_multiple_of(divisor) {
        return Err(Error::Architecture(format!(
            "input size {input_size} is not divisible by 2^{levels} = {divisor}"
        )));
    }
    let ladder = feature_ladder(hp.base_features as usize, hp.doublings as usize, levels)?;

    let mut encoder_levels = Vec::with_capacity(levels);
    let mut in_channels = 1;
    for (level, &features) in ladder[..levels].iter().enumerate() {
        encoder_levels.push(EncoderLevel {
            level,
            resolution: input_size >> level,
            features,
            convs: conv_pair(in_channels, features, hp),
        });
        in_channels = features;
    }
    let bottleneck = EncoderLevel {
        level: levels,
        resolution: input_size >> levels,
        features: ladder[levels],
        convs: conv_pair(in_channels, ladder[levels], hp),
    };

    let mut decoder_levels = Vec::with_capacity(levels);
    let mut below = ladder[levels];
    for level in (0..levels).rev() {
        let features = ladder[level];
        decoder_levels.push(DecoderLevel {
            level,
            resolution: input_size >> level,
            features,
            up_conv: ConvSpec::hidden(below, features, 2, false, 0.0),
            skip_channels: features,
            convs: conv_pair(2 * features, features, hp),
        });
        below = features;
    }

    Ok(ArchitectureSpec {
        input_size,
        input_channels: 1,
        encoder_levels,
        bottleneck,
        decoder_levels,
        output_head: ConvSpec {
            in_channels: ladder[0],
            out_channels: 1,
            kernel: 1,
            batch_norm: false,
            activation: Activation::Sigmoid,
            dropout: 0.0,
        },
    })
}

impl ArchitectureSpec {
    pub fn pool_levels(&self) -> usize {
        self.encoder_levels.len()
    }

    /// Feature counts per level, bottleneck last.
    pub fn ladder(&self) -> Vec<usize> {
        self.encoder_levels
            .iter()
            .chain(std::iter::once(&self.bottleneck))
            .map(|l| l.features)
            .collect()
    }

    pub fn convs(&self) -> impl Iterator<Item = &ConvSpec> {
        self.encoder_levels
            .iter()
            .chain(std::iter::once(&self.bottleneck))
            .flat_map(|l| l.convs.iter())
            .chain(
                self.decoder_levels
                    .iter()
                    .flat_map(|d| std::iter::once(&d.up_conv).chain(d.convs.iter())),
            )
            .chain(std::iter::once(&self.output_head))
    }

    /// Checks the structural invariants: mirrored levels, matching skips,
    /// consistent channel chaining and a divisible input size.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Architecture(msg));
        let n = self.pool_levels();
        if n == 0 {
            return bad("at least one pooling level is required".into());
        }
        if self.input_size == 0 || !self.input_size.is_multiple_of(1 << n) {
            return bad(format!("input size {} is not divisible by 2^{n}", self.input_size));
        }
        if self.decoder_levels.len() != n {
            return bad(format!(
                "{} encoder levels but {} decoder levels",
                n,
                self.decoder_levels.len()
            ));
        }
        let mut channels = self.input_channels;
        for level in self.encoder_levels.iter().chain(std::iter::once(&self.bottleneck)) {
            for c in &level.convs {
                if c.in_channels != channels || c.kernel != 3 {
                    return bad(format!("encoder level {} has inconsistent convolutions", level.level));
                }
                channels = c.out_channels;
            }
            if channels != level.features {
                return bad(format!("encoder level {} ends with {channels} channels", level.level));
            }
        }
        for (dec, expect_level) in self.decoder_levels.iter().zip((0..n).rev()) {
            let enc = &self.encoder_levels[expect_level];
            if dec.level != expect_level || dec.skip_channels != enc.features {
                return bad(format!(
                    "decoder level {} does not mirror encoder level {expect_level}",
                    dec.level
                ));
            }
            if dec.up_conv.in_channels != channels || dec.up_conv.kernel != 2 {
                return bad(format!("decoder level {} up-convolution is inconsistent", dec.level));
            }
            channels = dec.up_conv.out_channels + dec.skip_channels;
            for c in &dec.convs {
                if c.in_channels != channels || c.kernel != 3 {
                    return bad(format!("decoder level {} has inconsistent convolutions", dec.level));
                }
                channels = c.out_channels;
            }
        }
        let head = &self.output_head;
        if head.in_channels != channels
            || head.out_channels != 1
            || head.kernel != 1
            || head.activation != Activation::Sigmoid
        {
            return bad("output head must be a 1×1 convolution to one sigmoid channel".into());
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: Self = toml::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }
}

/// Trainable scalars implied by `spec`.
pub fn parameter_count(spec: &ArchitectureSpec) -> usize {
    spec.convs().map(ConvSpec::parameter_count).sum()
}
