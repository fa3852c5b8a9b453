use std::fmt;
use std::str::FromStr;

use super::attention::{AttentionKind, BlockConfig, ResidualKind};
use super::skip::SkipKind;
use crate::config::{list, KeyValues};
use crate::error::{Error, Result};

/// Architectural hyperparameters of the encoder–decoder.
///
/// Level `i` (0-based) runs at `2^i·C` channels and `H/2^i × W/2^i`. Skips
/// leave every level but the deepest, so there are `levels − 1` of them.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub base_channels: usize,
    pub levels: usize,
    /// Encoder blocks at each level, deepest level included.
    pub blocks_per_level: Vec<usize>,
    /// Extra blocks at the deepest level after the encoder stack.
    pub bottleneck_blocks: usize,
    /// Decoder blocks at levels `0..levels-1`, shallowest first.
    pub decoder_blocks_per_level: Vec<usize>,
    pub heads_per_level: Vec<usize>,
    pub ffn_expansion: f64,
    pub attention_kind: AttentionKind,
    pub skip_kind: SkipKind,
    pub residual_kind: ResidualKind,
    pub pem_differentiable: bool,
    pub input_size: (usize, usize),
    /// Kernel of every stride-2 transposed convolution.
    pub upsample_kernel: usize,
    pub ln_eps: f64,
}

impl ModelConfig {
    /// Full-size configuration, about 1.75M parameters at 256×256.
    pub fn full() -> Self {
        ModelConfig {
            base_channels: 24,
            levels: 4,
            blocks_per_level: vec![1, 1, 1, 1],
            bottleneck_blocks: 2,
            decoder_blocks_per_level: vec![1, 1, 1],
            heads_per_level: vec![1, 2, 4, 8],
            ffn_expansion: 2.0,
            attention_kind: AttentionKind::Phase,
            skip_kind: SkipKind::Opab,
            residual_kind: ResidualKind::Normalized,
            pem_differentiable: true,
            input_size: (256, 256),
            upsample_kernel: 2,
            ln_eps: 1e-5,
        }
    }

    /// Small configuration for single-core experiments.
    pub fn desk() -> Self {
        ModelConfig {
            base_channels: 8,
            levels: 3,
            blocks_per_level: vec![1, 1, 1],
            bottleneck_blocks: 1,
            decoder_blocks_per_level: vec![1, 1],
            heads_per_level: vec![1, 2, 4],
            input_size: (64, 64),
            ..Self::full()
        }
    }

    pub fn channels_at(&self, level: usize) -> usize {
        self.base_channels << level
    }

    pub fn block_config(&self, level: usize) -> BlockConfig {
        BlockConfig {
            channels: self.channels_at(level),
            heads: self.heads_per_level[level],
            ffn_expansion: self.ffn_expansion,
            attention: self.attention_kind,
            residual: self.residual_kind,
            pem_differentiable: self.pem_differentiable,
            ln_eps: self.ln_eps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.base_channels == 0 || self.levels == 0 {
            return bad("base_channels and levels must be positive".into());
        }
        if self.blocks_per_level.len() != self.levels {
            return bad(format!(
                "blocks_per_level has {} entries for {} levels",
                self.blocks_per_level.len(),
                self.levels
            ));
        }
        if self.heads_per_level.len() != self.levels {
            return bad(format!(
                "heads_per_level has {} entries for {} levels",
                self.heads_per_level.len(),
                self.levels
            ));
        }
        if self.decoder_blocks_per_level.len() != self.levels - 1 {
            return bad(format!(
                "decoder_blocks_per_level has {} entries; expected {}",
                self.decoder_blocks_per_level.len(),
                self.levels - 1
            ));
        }
        if self.upsample_kernel < 2 || !self.upsample_kernel.is_multiple_of(2) {
            return bad(format!("upsample_kernel {} must be even and at least 2", self.upsample_kernel));
        }
        if self.ffn_expansion.is_nan() || self.ffn_expansion <= 0.0 {
            return bad(format!("ffn_expansion {} must be positive", self.ffn_expansion));
        }
        if self.ln_eps.is_nan() || self.ln_eps <= 0.0 {
            return bad(format!("ln_eps {} must be positive", self.ln_eps));
        }
        for level in 0..self.levels {
            self.block_config(level).validate()?;
        }
        self.check_input(self.input_size.0, self.input_size.1)
    }

    /// Spatial dims must be powers of two and survive `levels − 1` halvings.
    pub fn check_input(&self, h: usize, w: usize) -> Result<()> {
        let div = 1usize << (self.levels - 1);
        if !(h.is_power_of_two() && w.is_power_of_two()) || h < div || w < div {
            return Err(Error::Config(format!(
                "input {h}x{w} must be powers of two divisible by {div} for {} levels",
                self.levels
            )));
        }
        Ok(())
    }

    pub fn from_key_values(kv: &mut KeyValues) -> Result<Self> {
        let mut c = Self::full();
        if let Some(v) = kv.take("base_channels")? {
            c.base_channels = v;
        }
        if let Some(v) = kv.take("levels")? {
            c.levels = v;
        }
        if let Some(v) = kv.take_list("blocks_per_level")? {
            c.blocks_per_level = v;
        }
        if let Some(v) = kv.take("bottleneck_blocks")? {
            c.bottleneck_blocks = v;
        }
        if let Some(v) = kv.take_list("decoder_blocks_per_level")? {
            c.decoder_blocks_per_level = v;
        }
        if let Some(v) = kv.take_list("heads_per_level")? {
            c.heads_per_level = v;
        }
        if let Some(v) = kv.take("ffn_expansion")? {
            c.ffn_expansion = v;
        }
        if let Some(v) = kv.take("attention_kind")? {
            c.attention_kind = v;
        }
        if let Some(v) = kv.take("skip_kind")? {
            c.skip_kind = v;
        }
        if let Some(v) = kv.take("residual_kind")? {
            c.residual_kind = v;
        }
        if let Some(v) = kv.take("pem_differentiable")? {
            c.pem_differentiable = v;
        }
        if let Some(v) = kv.take::<Size>("input_size")? {
            c.input_size = (v.0, v.1);
        }
        if let Some(v) = kv.take("upsample_kernel")? {
            c.upsample_kernel = v;
        }
        if let Some(v) = kv.take("ln_eps")? {
            c.ln_eps = v;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut kv = KeyValues::parse(text)?;
        let c = Self::from_key_values(&mut kv)?;
        kv.finish()?;
        Ok(c)
    }

    /// All keys as `key = value` lines, in the order [`ModelConfig::parse`] documents them.
    pub fn to_text(&self) -> String {
        let lines = [
            ("base_channels", self.base_channels.to_string()),
            ("levels", self.levels.to_string()),
            ("blocks_per_level", list(&self.blocks_per_level)),
            ("bottleneck_blocks", self.bottleneck_blocks.to_string()),
            ("decoder_blocks_per_level", list(&self.decoder_blocks_per_level)),
            ("heads_per_level", list(&self.heads_per_level)),
            ("ffn_expansion", self.ffn_expansion.to_string()),
            ("attention_kind", self.attention_kind.to_string()),
            ("skip_kind", self.skip_kind.to_string()),
            ("residual_kind", self.residual_kind.to_string()),
            ("pem_differentiable", self.pem_differentiable.to_string()),
            ("input_size", Size(self.input_size.0, self.input_size.1).to_string()),
            ("upsample_kernel", self.upsample_kernel.to_string()),
            ("ln_eps", self.ln_eps.to_string()),
        ];
        lines.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

/// `HxW` pair.
struct Size(usize, usize);

impl fmt::Display for Size {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.0, self.1)
    }
}

impl FromStr for Size {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let (h, w) = s.split_once('x').ok_or_else(|| format!("expected HxW, got {s}"))?;
        let p = |v: &str| v.trim().parse::<usize>().map_err(|e| e.to_string());
        Ok(Size(p(h)?, p(w)?))
    }
}

macro_rules! text_enum {
    ($t:ty { $($v:ident => $s:literal),+ $(,)? }) => {
        impl fmt::Display for $t {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $(<$t>::$v => $s),+ })
            }
        }

        impl FromStr for $t {
            type Err = String;
            fn from_str(s: &str) -> std::result::Result<Self, String> {
                match s {
                    $($s => Ok(<$t>::$v),)+
                    _ => Err(format!("expected one of: {}", [$($s),+].join(", "))),
                }
            }
        }
    };
}

text_enum!(AttentionKind { Phase => "phase", Plain => "plain" });
text_enum!(SkipKind { Opab => "opab", Oa => "oa", Identity => "identity" });
text_enum!(ResidualKind { Normalized => "normalized", PreNorm => "pre_norm" });
