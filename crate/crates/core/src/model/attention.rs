//! Phase-based multi-head self-attention, the gated feed-forward network and
//! the transformer block that chains them.
//!
//! Attention is computed across channels: per head, a `d × d` map with
//! `d = c / heads` mixes channels, so cost grows linearly with pixel count.

use crate::error::{Error, Result};
use crate::spectral::pem_var;
use crate::tensor::{BoundParams, Init, ParamSpec, Scalar, Tape, Var};

/// Source of the query/key features.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionKind {
    /// Queries and keys come from the phase-only projection of the input.
    Phase,
    /// Queries and keys come from the input itself.
    Plain,
}

/// What the attention and feed-forward residuals add back.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ResidualKind {
    /// Both residuals add the layer-normalized tensor that fed the sub-layer.
    Normalized,
    /// Both residuals add the un-normalized block stream.
    PreNorm,
}

/// Hyperparameters shared by every sub-layer of one block.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockConfig {
    pub channels: usize,
    pub heads: usize,
    pub ffn_expansion: f64,
    pub attention: AttentionKind,
    pub residual: ResidualKind,
    pub pem_differentiable: bool,
    pub ln_eps: f64,
}

impl BlockConfig {
    pub fn new(channels: usize, heads: usize) -> Self {
        BlockConfig {
            channels,
            heads,
            ffn_expansion: 2.0,
            attention: AttentionKind::Phase,
            residual: ResidualKind::PreNorm,
            pem_differentiable: true,
            ln_eps: 1e-5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || !self.channels.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "{} channels are not divisible by {} heads",
                self.channels, self.heads
            )));
        }
        if self.hidden() == 0 {
            return Err(Error::Config(format!(
                "ffn expansion {} leaves no hidden channels",
                self.ffn_expansion
            )));
        }
        Ok(())
    }

    /// Width of each gated half in the feed-forward network.
    pub fn hidden(&self) -> usize {
        (self.ffn_expansion * self.channels as f64).round() as usize
    }

    pub fn head_dim(&self) -> usize {
        self.channels / self.heads
    }
}

fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Bound weights of one attention sub-layer.
#[derive(Clone, Copy, Debug)]
pub struct PmsaParams {
    pub q_point: Var,
    pub q_depth: Var,
    pub k_point: Var,
    pub k_depth: Var,
    pub v_point: Var,
    pub v_depth: Var,
    pub out_point: Var,
    /// One temperature per head.
    pub alpha: Var,
}

impl PmsaParams {
    pub fn specs(prefix: &str, cfg: &BlockConfig) -> Vec<ParamSpec> {
        let c = cfg.channels;
        let mut specs = Vec::new();
        for p in ["q", "k", "v"] {
            specs.push(ParamSpec::conv(join(prefix, &format!("{p}_point")), c, c, 1));
            specs.push(ParamSpec::conv(join(prefix, &format!("{p}_depth")), c, 1, 3));
        }
        specs.push(ParamSpec::conv(join(prefix, "out_point"), c, c, 1));
        specs.push(ParamSpec::new(
            join(prefix, "alpha"),
            vec![cfg.heads],
            Init::Constant((cfg.head_dim() as f64).sqrt()),
        ));
        specs
    }

    pub fn bind(bound: &BoundParams, prefix: &str) -> Result<Self> {
        let get = |n: &str| bound.get(&join(prefix, n));
        Ok(PmsaParams {
            q_point: get("q_point")?,
            q_depth: get("q_depth")?,
            k_point: get("k_point")?,
            k_depth: get("k_depth")?,
            v_point: get("v_point")?,
            v_depth: get("v_depth")?,
            out_point: get("out_point")?,
            alpha: get("alpha")?,
        })
    }
}

/// Bound weights of one gated feed-forward sub-layer.
#[derive(Clone, Copy, Debug)]
pub struct FfnParams {
    pub expand_point: Var,
    pub expand_depth: Var,
    pub project_point: Var,
}

impl FfnParams {
    pub fn specs(prefix: &str, cfg: &BlockConfig) -> Vec<ParamSpec> {
        let (c, hid) = (cfg.channels, cfg.hidden());
        vec![
            ParamSpec::conv(join(prefix, "expand_point"), 2 * hid, c, 1),
            ParamSpec::conv(join(prefix, "expand_depth"), 2 * hid, 1, 3),
            ParamSpec::conv(join(prefix, "project_point"), c, hid, 1),
        ]
    }

    pub fn bind(bound: &BoundParams, prefix: &str) -> Result<Self> {
        let get = |n: &str| bound.get(&join(prefix, n));
        Ok(FfnParams {
            expand_point: get("expand_point")?,
            expand_depth: get("expand_depth")?,
            project_point: get("project_point")?,
        })
    }
}

/// Bound weights of one transformer block.
#[derive(Clone, Copy, Debug)]
pub struct BlockParams {
    pub norm1: Var,
    pub attn: PmsaParams,
    pub norm2: Var,
    pub ffn: FfnParams,
}

impl BlockParams {
    pub fn specs(prefix: &str, cfg: &BlockConfig) -> Vec<ParamSpec> {
        let c = cfg.channels;
        let mut specs = vec![
            ParamSpec::new(join(prefix, "norm1"), vec![c], Init::Constant(1.0)),
            ParamSpec::new(join(prefix, "norm2"), vec![c], Init::Constant(1.0)),
        ];
        specs.extend(PmsaParams::specs(&join(prefix, "attn"), cfg));
        specs.extend(FfnParams::specs(&join(prefix, "ffn"), cfg));
        specs
    }

    pub fn bind(bound: &BoundParams, prefix: &str) -> Result<Self> {
        Ok(BlockParams {
            norm1: bound.get(&join(prefix, "norm1"))?,
            attn: PmsaParams::bind(bound, &join(prefix, "attn"))?,
            norm2: bound.get(&join(prefix, "norm2"))?,
            ffn: FfnParams::bind(bound, &join(prefix, "ffn"))?,
        })
    }
}

/// Trainable scalars in one block: `10c² + 65c + heads` at the default expansion.
pub fn block_param_count(cfg: &BlockConfig) -> usize {
    BlockParams::specs("", cfg).iter().map(ParamSpec::numel).sum()
}

/// Result of an attention sub-layer before its residual is added.
#[derive(Clone, Copy, Debug)]
pub struct PmsaOutput {
    /// `out_point` applied to the attended values, `[n, c, h, w]`.
    pub projected: Var,
    /// Softmaxed per-head maps, `[n, heads, d, d]`; rows sum to one.
    pub attention: Var,
}

fn point_then_depth<T: Scalar>(tape: &mut Tape<T>, x: Var, point: Var, depth: Var) -> Result<Var> {
    let y = tape.conv2d(x, point, 1, 0)?;
    tape.depthwise_conv2d(y, depth, 1)
}

fn dims4<T: Scalar>(tape: &Tape<T>, op: &'static str, x: Var) -> Result<(usize, usize, usize, usize)> {
    match *tape.shape(x) {
        [n, c, h, w] => Ok((n, c, h, w)),
        ref s => Err(Error::dim(op, format!("expected [n, c, h, w], got {s:?}"))),
    }
}

/// Attention body: `out_point(v · softmax(k·qᵀ / α))` per head, without residual.
pub fn pmsa_body<T: Scalar>(tape: &mut Tape<T>, p: &PmsaParams, y: Var, cfg: &BlockConfig) -> Result<PmsaOutput> {
    cfg.validate()?;
    let (n, c, h, w) = dims4(tape, "pmsa", y)?;
    if c != cfg.channels {
        return Err(Error::dim("pmsa", format!("input has {c} channels, block expects {}", cfg.channels)));
    }
    let (heads, d, hw) = (cfg.heads, cfg.head_dim(), h * w);
    let qk_src = match cfg.attention {
        AttentionKind::Phase => pem_var(tape, y, cfg.pem_differentiable)?,
        AttentionKind::Plain => y,
    };
    let q = point_then_depth(tape, qk_src, p.q_point, p.q_depth)?;
    let k = point_then_depth(tape, qk_src, p.k_point, p.k_depth)?;
    let v = point_then_depth(tape, y, p.v_point, p.v_depth)?;

    let q = tape.reshape(q, &[n * heads, d, hw])?;
    let k = tape.reshape(k, &[n * heads, d, hw])?;
    let v = tape.reshape(v, &[n * heads, d, hw])?;

    let logits = tape.matmul_ex(k, false, q, true)?;
    let logits = tape.reshape(logits, &[n, heads, d, d])?;
    let inv_alpha = tape.powf(p.alpha, T::from_f64(-1.0));
    let logits = tape.scale_channels(logits, inv_alpha)?;
    let attention = tape.softmax(logits)?;

    let s = tape.reshape(attention, &[n * heads, d, d])?;
    let out = tape.matmul_ex(s, true, v, false)?;
    let out = tape.reshape(out, &[n, c, h, w])?;
    let projected = tape.conv2d(out, p.out_point, 1, 0)?;
    Ok(PmsaOutput { projected, attention })
}

/// Attention with its residual: `pmsa_body(y) + y`.
pub fn pmsa<T: Scalar>(tape: &mut Tape<T>, p: &PmsaParams, y: Var, cfg: &BlockConfig) -> Result<Var> {
    let body = pmsa_body(tape, p, y, cfg)?;
    tape.add(body.projected, y)
}

/// Gated feed-forward body: `project(gelu(a) ⊗ b)` with `[a, b]` the two halves
/// of the depthwise-filtered expansion.
pub fn ffn_body<T: Scalar>(tape: &mut Tape<T>, p: &FfnParams, z: Var) -> Result<Var> {
    let expanded = point_then_depth(tape, z, p.expand_point, p.expand_depth)?;
    let width = tape.shape(expanded)[1];
    if !width.is_multiple_of(2) {
        return Err(Error::Config(format!("expanded width {width} cannot be split into equal halves")));
    }
    let a = tape.narrow(expanded, 1, 0, width / 2)?;
    let b = tape.narrow(expanded, 1, width / 2, width / 2)?;
    let a = tape.gelu(a);
    let gated = tape.mul(a, b)?;
    tape.conv2d(gated, p.project_point, 1, 0)
}

/// Feed-forward with its residual: `ffn_body(z) + z`.
pub fn ffn<T: Scalar>(tape: &mut Tape<T>, p: &FfnParams, z: Var) -> Result<Var> {
    let body = ffn_body(tape, p, z)?;
    tape.add(body, z)
}

/// Bias-free layer norm over channels with a learned per-channel scale.
pub fn channel_norm<T: Scalar>(tape: &mut Tape<T>, x: Var, scale: Var, eps: f64) -> Result<Var> {
    let y = tape.layer_norm(x, T::from_f64(eps))?;
    tape.scale_channels(y, scale)
}

/// One transformer block; output shape equals input shape.
pub fn pbtb<T: Scalar>(tape: &mut Tape<T>, p: &BlockParams, x: Var, cfg: &BlockConfig) -> Result<Var> {
    let y = channel_norm(tape, x, p.norm1, cfg.ln_eps)?;
    let attn = pmsa_body(tape, &p.attn, y, cfg)?.projected;
    match cfg.residual {
        ResidualKind::Normalized => {
            let a = tape.add(attn, y)?;
            let z = channel_norm(tape, a, p.norm2, cfg.ln_eps)?;
            ffn(tape, &p.ffn, z)
        }
        ResidualKind::PreNorm => {
            let a = tape.add(attn, x)?;
            let z = channel_norm(tape, a, p.norm2, cfg.ln_eps)?;
            let f = ffn_body(tape, &p.ffn, z)?;
            tape.add(f, a)
        }
    }
}
