//! Network building blocks expressed as tape operations.
//!
//! Spatial activations are carried as `[batch, H, W, channels]`; since the
//! layout is row-major this is the same buffer as the token sequence
//! `[batch, H*W, channels]`, so grid/sequence conversion is a reshape.

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};

/// LayerNorm variance floor used throughout the model.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// `x * w + b` over the last axis. `w` is `[in, out]`, `b` is `[out]`.
pub fn linear(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    tape.add(y, b)
}

pub fn layer_norm(tape: &mut Tape, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
    tape.layer_norm(x, gamma, beta, eps)
}

pub fn gelu(tape: &mut Tape, x: Var) -> Result<Var> {
    tape.gelu(x)
}

pub fn softmax(tape: &mut Tape, x: Var) -> Result<Var> {
    tape.softmax(x)
}

pub fn cross_entropy(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    tape.cross_entropy(logits, labels)
}

/// Shape bookkeeping for a depthwise or pointwise convolution weight.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Conv2dKernel {
    /// `[channels, k, k]`, odd `k`.
    Depthwise { channels: usize, kernel_size: usize },
    /// `[c_out, c_in]`, a 1x1 convolution.
    Pointwise { c_out: usize, c_in: usize },
}

impl Conv2dKernel {
    pub fn depthwise(channels: usize, kernel_size: usize) -> Result<Self> {
        if channels == 0 || kernel_size % 2 == 0 {
            return Err(Error::InvalidConfig(format!(
                "depthwise kernel needs odd size and channels > 0, got k={kernel_size}, c={channels}"
            )));
        }
        Ok(Conv2dKernel::Depthwise {
            channels,
            kernel_size,
        })
    }

    pub fn pointwise(c_out: usize, c_in: usize) -> Self {
        Conv2dKernel::Pointwise { c_out, c_in }
    }

    pub fn shape(&self) -> Vec<usize> {
        match *self {
            Conv2dKernel::Depthwise {
                channels,
                kernel_size,
            } => vec![channels, kernel_size, kernel_size],
            Conv2dKernel::Pointwise { c_out, c_in } => vec![c_out, c_in],
        }
    }

    /// Number of scalar weights; no bias.
    pub fn weight_count(&self) -> usize {
        self.shape().iter().product()
    }

    /// Inputs feeding each output value (for Kaiming bounds).
    pub fn fan_in(&self) -> usize {
        match *self {
            Conv2dKernel::Depthwise { kernel_size, .. } => kernel_size * kernel_size,
            Conv2dKernel::Pointwise { c_in, .. } => c_in,
        }
    }
}

/// A `[batch, H, W, channels]` activation on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TokenGrid {
    pub var: Var,
    pub height: usize,
    pub width: usize,
}

impl TokenGrid {
    /// Wrap a tape value that is already `[b, H, W, c]`.
    pub fn new(tape: &Tape, var: Var) -> Result<Self> {
        let s = tape.shape(var);
        if s.len() != 4 {
            return Err(Error::ShapeMismatch(format!(
                "token grid must be [b,H,W,c], got {s:?}"
            )));
        }
        Ok(Self {
            var,
            height: s[1],
            width: s[2],
        })
    }

    /// `[b, H*W, c] -> [b, H, W, c]`
    pub fn from_sequence(tape: &mut Tape, seq: Var, height: usize, width: usize) -> Result<Self> {
        let s = tape.shape(seq).to_vec();
        if s.len() != 3 || s[1] != height * width {
            return Err(Error::ShapeMismatch(format!(
                "sequence {s:?} does not hold a {height}x{width} grid"
            )));
        }
        let var = tape.reshape(seq, &[s[0], height, width, s[2]])?;
        Ok(Self { var, height, width })
    }

    /// `[b, H, W, c] -> [b, H*W, c]`
    pub fn to_sequence(&self, tape: &mut Tape) -> Result<Var> {
        let s = tape.shape(self.var).to_vec();
        tape.reshape(self.var, &[s[0], s[1] * s[2], s[3]])
    }

    pub fn batch(&self, tape: &Tape) -> usize {
        tape.shape(self.var)[0]
    }

    pub fn channels(&self, tape: &Tape) -> usize {
        tape.shape(self.var)[3]
    }

    pub fn with_var(&self, var: Var) -> Self {
        Self { var, ..*self }
    }
}

/// Per-channel spatial filtering, SAME zero padding, stride 1, no bias.
pub fn depthwise_conv2d(tape: &mut Tape, x: &TokenGrid, kernel: Var) -> Result<TokenGrid> {
    let y = tape.depthwise_conv2d(x.var, kernel)?;
    Ok(x.with_var(y))
}

/// 1x1 convolution with `weights[c_out, c_in]`, no bias.
pub fn pointwise_conv2d(tape: &mut Tape, x: &TokenGrid, weights: Var) -> Result<TokenGrid> {
    let ws = tape.shape(weights).to_vec();
    let c_in = x.channels(tape);
    if ws.len() != 2 || ws[1] != c_in {
        return Err(Error::ShapeMismatch(format!(
            "pointwise weights {ws:?} for {c_in} input channels"
        )));
    }
    let wt = tape.transpose_last(weights)?;
    let y = tape.matmul(x.var, wt)?;
    Ok(x.with_var(y))
}

/// Low-rank additive update `x * a * b` with `a[in, r]`, `b[r, out]`.
#[derive(Clone, Copy, Debug)]
pub struct LowRank {
    pub a: Var,
    pub b: Var,
}

/// A biased projection with an optional parallel low-rank path.
#[derive(Clone, Copy, Debug)]
pub struct Projection {
    pub weight: Var,
    pub bias: Var,
    pub low_rank: Option<LowRank>,
}

impl Projection {
    pub fn new(weight: Var, bias: Var) -> Self {
        Self {
            weight,
            bias,
            low_rank: None,
        }
    }

    pub fn apply(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let base = linear(tape, x, self.weight, self.bias)?;
        match self.low_rank {
            None => Ok(base),
            Some(lr) => {
                let down = tape.matmul(x, lr.a)?;
                let up = tape.matmul(down, lr.b)?;
                tape.add(base, up)
            }
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AttentionWeights {
    pub q: Projection,
    pub k: Projection,
    pub v: Projection,
    pub out: Projection,
}

/// Non-overlapping square attention windows over an `height x width` grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Window {
    pub size: usize,
    pub height: usize,
    pub width: usize,
}

fn split_heads(tape: &mut Tape, x: Var, heads: usize) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let (b, t, c) = (s[0], s[1], s[2]);
    let y = tape.reshape(x, &[b, t, heads, c / heads])?;
    let y = tape.permute(y, &[0, 2, 1, 3])?;
    tape.reshape(y, &[b * heads, t, c / heads])
}

fn merge_heads(tape: &mut Tape, x: Var, batch: usize, heads: usize) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let (t, d) = (s[1], s[2]);
    let y = tape.reshape(x, &[batch, heads, t, d])?;
    let y = tape.permute(y, &[0, 2, 1, 3])?;
    tape.reshape(y, &[batch, t, heads * d])
}

fn global_attention(tape: &mut Tape, x: Var, w: &AttentionWeights, heads: usize) -> Result<Var> {
    let batch = tape.shape(x)[0];
    let c = tape.shape(x)[2];
    let q = w.q.apply(tape, x)?;
    let k = w.k.apply(tape, x)?;
    let v = w.v.apply(tape, x)?;
    let q = split_heads(tape, q, heads)?;
    let k = split_heads(tape, k, heads)?;
    let v = split_heads(tape, v, heads)?;
    let kt = tape.transpose_last(k)?;
    let scores = tape.batch_matmul(q, kt)?;
    let scale = 1.0 / ((c / heads) as f64).sqrt();
    let scores = tape.mul_const(scores, scale)?;
    let attn = tape.softmax(scores)?;
    let ctx = tape.batch_matmul(attn, v)?;
    let ctx = merge_heads(tape, ctx, batch, heads)?;
    w.out.apply(tape, ctx)
}

/// `[b, H, W, c] -> [b * windows, size * size, c]`
pub fn window_partition(tape: &mut Tape, x: Var, win: Window) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let (b, c, ws) = (s[0], s[3], win.size);
    let (nh, nw) = (win.height / ws, win.width / ws);
    let y = tape.reshape(x, &[b, nh, ws, nw, ws, c])?;
    let y = tape.permute(y, &[0, 1, 3, 2, 4, 5])?;
    tape.reshape(y, &[b * nh * nw, ws * ws, c])
}

/// Inverse of [`window_partition`].
pub fn window_merge(tape: &mut Tape, x: Var, batch: usize, win: Window) -> Result<Var> {
    let c = tape.shape(x)[2];
    let ws = win.size;
    let (nh, nw) = (win.height / ws, win.width / ws);
    let y = tape.reshape(x, &[batch, nh, nw, ws, ws, c])?;
    let y = tape.permute(y, &[0, 1, 3, 2, 4, 5])?;
    tape.reshape(y, &[batch, win.height, win.width, c])
}

/// Multi-head scaled dot-product self-attention over `x[b, t, c]`.
///
/// With a window, tokens are read as an `height x width` grid and attend only
/// within their own window.
pub fn multihead_attention(
    tape: &mut Tape,
    x: Var,
    weights: &AttentionWeights,
    heads: usize,
    window: Option<Window>,
) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    if s.len() != 3 {
        return Err(Error::ShapeMismatch(format!(
            "attention input must be [b,t,c], got {s:?}"
        )));
    }
    let (b, t, c) = (s[0], s[1], s[2]);
    if heads == 0 || c % heads != 0 {
        return Err(Error::InvalidConfig(format!(
            "{c} channels not divisible by {heads} heads"
        )));
    }
    let Some(win) = window else {
        return global_attention(tape, x, weights, heads);
    };
    if win.size == 0
        || win.height * win.width != t
        || win.height % win.size != 0
        || win.width % win.size != 0
    {
        return Err(Error::InvalidConfig(format!(
            "window {} does not tile a {}x{} grid of {t} tokens",
            win.size, win.height, win.width
        )));
    }
    let grid = tape.reshape(x, &[b, win.height, win.width, c])?;
    let windows = window_partition(tape, grid, win)?;
    let attended = global_attention(tape, windows, weights, heads)?;
    let merged = window_merge(tape, attended, b, win)?;
    tape.reshape(merged, &[b, t, c])
}

/// Cut `images[b, H, W, ch]` into non-overlapping `patch x patch` tiles and
/// project each to `w.shape[1]` channels.
pub fn patch_embed(tape: &mut Tape, images: Var, patch: usize, w: Var, b: Var) -> Result<TokenGrid> {
    let s = tape.shape(images).to_vec();
    if s.len() != 4 {
        return Err(Error::ShapeMismatch(format!(
            "images must be [b,H,W,ch], got {s:?}"
        )));
    }
    let (batch, h, wd, ch) = (s[0], s[1], s[2], s[3]);
    if patch == 0 || h % patch != 0 || wd % patch != 0 {
        return Err(Error::InvalidConfig(format!(
            "{h}x{wd} image not divisible into {patch}x{patch} patches"
        )));
    }
    let (gh, gw) = (h / patch, wd / patch);
    let y = tape.reshape(images, &[batch, gh, patch, gw, patch, ch])?;
    let y = tape.permute(y, &[0, 1, 3, 2, 4, 5])?;
    let y = tape.reshape(y, &[batch, gh, gw, patch * patch * ch])?;
    let y = linear(tape, y, w, b)?;
    Ok(TokenGrid {
        var: y,
        height: gh,
        width: gw,
    })
}

/// Gather each 2x2 neighbourhood into the channel axis:
/// `[b, H, W, c] -> [b, H/2, W/2, 4c]`.
pub fn patch_merge(tape: &mut Tape, x: &TokenGrid) -> Result<TokenGrid> {
    let s = tape.shape(x.var).to_vec();
    let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::InvalidConfig(format!(
            "cannot merge patches of an odd {h}x{w} grid"
        )));
    }
    let y = tape.reshape(x.var, &[b, h / 2, 2, w / 2, 2, c])?;
    let y = tape.permute(y, &[0, 1, 3, 2, 4, 5])?;
    let y = tape.reshape(y, &[b, h / 2, w / 2, 4 * c])?;
    Ok(TokenGrid {
        var: y,
        height: h / 2,
        width: w / 2,
    })
}
