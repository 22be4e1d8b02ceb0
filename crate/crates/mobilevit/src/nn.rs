//! Neural building blocks on top of the tape.
//!
//! Conventions used throughout:
//! - feature maps are `(B, C, H, W)`, token sequences are `(B, N, d)`;
//! - convolutions are followed by batch norm, and SiLU where an activation
//!   applies (inverted-residual projections and the v2 fusion conv stay
//!   linear because a residual add follows);
//! - transformer feed-forwards use GELU and layer norm normalizes the last
//!   axis;
//! - `unfold` flattens each non-overlapping P x P patch in pixel row-major
//!   order with the channel innermost, producing `N = HW / P^2` tokens of
//!   width `P^2 * C`. `fold` is its exact inverse; both are compositions of
//!   reshape and permute, so a round trip is bit-identical.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const LN_EPS: f64 = 1e-5;

/// Whether batch norm consumes batch statistics (training) or running
/// estimates (inference).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Residual arrangement inside an encoder layer.
///
/// `Single` applies one residual around the whole layer:
/// `Z_{l+1} = FFN(Attn(LN(Z_l))) + Z_l`.
/// `PreNorm` is the conventional two-residual form:
/// `Z' = Z + Attn(LN1(Z)); Z_{l+1} = Z' + FFN(LN2(Z'))`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum EncoderStyle {
    #[default]
    Single,
    PreNorm,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Act {
    Linear,
    Silu,
}

/// Batch-norm parameters plus the running statistics they normalize with in
/// eval mode. `key` identifies the layer so training can write updated
/// statistics back to the right slot.
pub struct BnState {
    pub gamma: Var,
    pub beta: Var,
    pub mean: Tensor,
    pub var: Tensor,
    pub key: String,
}

/// Fresh batch statistics observed during a training-mode forward pass.
pub struct BnUpdate {
    pub key: String,
    pub mean: Tensor,
    pub var: Tensor,
}

/// Convolution with optional bias, batch norm, and activation.
pub struct ConvUnit {
    pub weight: Var,
    pub bias: Option<Var>,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
    pub bn: Option<BnState>,
    pub act: Act,
}

pub fn conv_unit(
    tape: &mut Tape,
    x: Var,
    unit: &ConvUnit,
    mode: Mode,
    updates: &mut Vec<BnUpdate>,
) -> Result<Var> {
    let mut y = tape.conv2d(x, unit.weight, unit.bias, unit.stride, unit.padding, unit.groups)?;
    if let Some(bn) = &unit.bn {
        y = match mode {
            Mode::Train => {
                let (out, mean, var) = tape.batch_norm_train(y, bn.gamma, bn.beta, BN_EPS)?;
                updates.push(BnUpdate { key: bn.key.clone(), mean, var });
                out
            }
            Mode::Eval => tape.batch_norm_eval(y, bn.gamma, bn.beta, &bn.mean, &bn.var, BN_EPS)?,
        };
    }
    match unit.act {
        Act::Linear => Ok(y),
        Act::Silu => tape.silu(y),
    }
}

// ---- patch tokenization ----

fn check_patch(op: &'static str, h: usize, w: usize, p: usize) -> Result<()> {
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::shape(
            op,
            format!("spatial {}x{} not divisible by patch size {}", h, w, p),
        ));
    }
    Ok(())
}

/// `(B, C, H, W)` to `(B, N, P^2*C)` patch tokens.
pub fn unfold(tape: &mut Tape, x: Var, p: usize) -> Result<Var> {
    let s = tape.value(x).shape().to_vec();
    if s.len() != 4 {
        return Err(Error::shape("unfold", format!("expected (B,C,H,W), got {:?}", s)));
    }
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    check_patch("unfold", h, w, p)?;
    let (hp, wp) = (h / p, w / p);
    let split = tape.reshape(x, &[b, c, hp, p, wp, p])?;
    let grouped = tape.permute(split, &[0, 2, 4, 3, 5, 1])?;
    tape.reshape(grouped, &[b, hp * wp, p * p * c])
}

/// Inverse of [`unfold`]: `(B, N, P^2*C)` tokens back to `(B, C, H, W)`.
pub fn fold(tape: &mut Tape, z: Var, c: usize, h: usize, w: usize, p: usize) -> Result<Var> {
    let s = tape.value(z).shape().to_vec();
    check_patch("fold", h, w, p)?;
    let (hp, wp) = (h / p, w / p);
    if s.len() != 3 || s[1] != hp * wp || s[2] != p * p * c {
        return Err(Error::shape(
            "fold",
            format!("tokens {:?} do not fold into ({},{},{}) with patch {}", s, c, h, w, p),
        ));
    }
    let b = s[0];
    let split = tape.reshape(z, &[b, hp, wp, p, p, c])?;
    let regrouped = tape.permute(split, &[0, 5, 1, 3, 2, 4])?;
    tape.reshape(regrouped, &[b, c, h, w])
}

/// Value-level unfold of one `(H, W, C)` image into `(N, P^2*C)` tokens.
pub fn unfold_image(x: &Tensor, p: usize) -> Result<Tensor> {
    let s = x.shape();
    if s.len() != 3 {
        return Err(Error::shape("unfold", format!("expected (H,W,C), got {:?}", s)));
    }
    let (h, w, c) = (s[0], s[1], s[2]);
    check_patch("unfold", h, w, p)?;
    let (hp, wp) = (h / p, w / p);
    x.reshape(&[hp, p, wp, p, c])?
        .permute(&[0, 2, 1, 3, 4])?
        .reshape(&[hp * wp, p * p * c])
}

/// Value-level inverse of [`unfold_image`].
pub fn fold_image(z: &Tensor, h: usize, w: usize, p: usize) -> Result<Tensor> {
    check_patch("fold", h, w, p)?;
    let (hp, wp) = (h / p, w / p);
    let s = z.shape();
    if s.len() != 2 || s[0] != hp * wp || s[1] % (p * p) != 0 {
        return Err(Error::shape(
            "fold",
            format!("tokens {:?} do not fold into {}x{} with patch {}", s, h, w, p),
        ));
    }
    let c = s[1] / (p * p);
    z.reshape(&[hp, wp, p, p, c])?
        .permute(&[0, 2, 1, 3, 4])?
        .reshape(&[h, w, c])
}

// ---- attention ----

pub struct AttentionVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
}

/// Scaled dot-product attention over `(B, N, d)` with `heads` heads.
/// Returns the output and, for inspection, the attention weights as
/// `(B*heads, N, N)`.
pub fn softmax_attention_with_weights(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
) -> Result<(Var, Var)> {
    let s = tape.value(q).shape().to_vec();
    if s.len() != 3 {
        return Err(Error::shape("mhsa", format!("expected (B,N,d), got {:?}", s)));
    }
    let (b, n, d) = (s[0], s[1], s[2]);
    if heads == 0 || d % heads != 0 {
        return Err(Error::shape("mhsa", format!("width {} not divisible by {} heads", d, heads)));
    }
    let dh = d / heads;
    let split = |tape: &mut Tape, t: Var| -> Result<Var> {
        let r = tape.reshape(t, &[b, n, heads, dh])?;
        let p = tape.permute(r, &[0, 2, 1, 3])?;
        tape.reshape(p, &[b * heads, n, dh])
    };
    let qh = split(tape, q)?;
    let kh = split(tape, k)?;
    let vh = split(tape, v)?;
    let kt = tape.permute(kh, &[0, 2, 1])?;
    let scores = tape.matmul(qh, kt)?;
    let scaled = tape.affine(scores, 1.0 / (dh as f64).sqrt(), 0.0)?;
    let weights = tape.softmax(scaled)?;
    let ctx = tape.matmul(weights, vh)?;
    let merged = tape.reshape(ctx, &[b, heads, n, dh])?;
    let ordered = tape.permute(merged, &[0, 2, 1, 3])?;
    let out = tape.reshape(ordered, &[b, n, d])?;
    Ok((out, weights))
}

pub fn softmax_attention(tape: &mut Tape, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
    softmax_attention_with_weights(tape, q, k, v, heads).map(|(out, _)| out)
}

/// Kernelized attention `phi(Q) (phi(K)^T V)` with `phi = ELU + 1`.
///
/// The contraction `phi(K)^T V` is a `(d, d_v)` context matrix, so cost grows
/// linearly in the token count and no `N x N` matrix is ever formed.
pub fn linear_attention(tape: &mut Tape, q: Var, k: Var, v: Var) -> Result<Var> {
    let s = tape.value(q).shape().to_vec();
    if s.len() != 3 {
        return Err(Error::shape("linear_attention", format!("expected (B,N,d), got {:?}", s)));
    }
    let pq = tape.elu_plus_one(q)?;
    let pk = tape.elu_plus_one(k)?;
    let kt = tape.permute(pk, &[0, 2, 1])?;
    let ctx = tape.matmul(kt, v)?;
    tape.matmul(pq, ctx)
}

// ---- feed-forward and encoder layers ----

pub struct FfnVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

pub fn ffn(tape: &mut Tape, z: Var, vars: &FfnVars) -> Result<Var> {
    let h = tape.matmul(z, vars.w1)?;
    let h = tape.add(h, vars.b1)?;
    let h = tape.gelu(h)?;
    let out = tape.matmul(h, vars.w2)?;
    tape.add(out, vars.b2)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionKind {
    /// Multi-head softmax attention with the given head count.
    Softmax { heads: usize },
    /// Single-head kernelized linear attention.
    Linear,
}

pub struct EncoderLayerVars {
    pub ln1_gamma: Var,
    pub ln1_beta: Var,
    /// Second norm, present only for the two-residual style.
    pub ln2: Option<(Var, Var)>,
    pub attn: AttentionVars,
    pub ffn: FfnVars,
}

fn attend(tape: &mut Tape, z: Var, vars: &AttentionVars, kind: AttentionKind) -> Result<Var> {
    let q = tape.matmul(z, vars.wq)?;
    let k = tape.matmul(z, vars.wk)?;
    let v = tape.matmul(z, vars.wv)?;
    let out = match kind {
        AttentionKind::Softmax { heads } => softmax_attention(tape, q, k, v, heads)?,
        AttentionKind::Linear => linear_attention(tape, q, k, v)?,
    };
    tape.matmul(out, vars.wo)
}

/// One transformer encoder layer over `(B, N, d)` tokens.
pub fn encoder_layer(
    tape: &mut Tape,
    z: Var,
    vars: &EncoderLayerVars,
    kind: AttentionKind,
    style: EncoderStyle,
) -> Result<Var> {
    match style {
        EncoderStyle::Single => {
            let normed = tape.layer_norm(z, vars.ln1_gamma, vars.ln1_beta, LN_EPS)?;
            let attended = attend(tape, normed, &vars.attn, kind)?;
            let fed = ffn(tape, attended, &vars.ffn)?;
            tape.add(fed, z)
        }
        EncoderStyle::PreNorm => {
            let (g2, b2) = vars.ln2.ok_or_else(|| {
                Error::Invalid("encoder_layer: two-residual style needs a second norm".to_string())
            })?;
            let n1 = tape.layer_norm(z, vars.ln1_gamma, vars.ln1_beta, LN_EPS)?;
            let a = attend(tape, n1, &vars.attn, kind)?;
            let z1 = tape.add(z, a)?;
            let n2 = tape.layer_norm(z1, g2, b2, LN_EPS)?;
            let f = ffn(tape, n2, &vars.ffn)?;
            tape.add(z1, f)
        }
    }
}

// ---- inverted residual ----

pub struct IrbVars {
    pub expand: ConvUnit,
    pub depthwise: ConvUnit,
    pub project: ConvUnit,
}

/// `x + project(depthwise(expand(x)))`. Stride 1 and matching channel counts
/// are required so the residual is well-formed.
pub fn inverted_residual(
    tape: &mut Tape,
    x: Var,
    vars: &IrbVars,
    mode: Mode,
    updates: &mut Vec<BnUpdate>,
) -> Result<Var> {
    let in_ch = tape.value(x).shape()[1];
    let out_ch = tape.value(vars.project.weight).shape()[0];
    if in_ch != out_ch {
        return Err(Error::shape(
            "inverted_residual",
            format!("residual needs matching channels, got {} in and {} out", in_ch, out_ch),
        ));
    }
    let e = conv_unit(tape, x, &vars.expand, mode, updates)?;
    let d = conv_unit(tape, e, &vars.depthwise, mode, updates)?;
    let p = conv_unit(tape, d, &vars.project, mode, updates)?;
    tape.add(x, p)
}

// ---- transformer blocks ----

pub struct MobileVitBlockVars {
    /// n x n local convolution, channel-preserving.
    pub local_spatial: ConvUnit,
    /// 1 x 1 projection to the token channel width.
    pub local_project: ConvUnit,
    pub encoders: Vec<EncoderLayerVars>,
    /// n x n fusion convolution producing the block output width.
    pub fusion: ConvUnit,
    pub patch: usize,
    pub heads: usize,
    pub style: EncoderStyle,
    /// When set, the fusion convolution sees the block input concatenated
    /// onto the folded global features along the channel axis.
    pub fusion_concat_input: bool,
}

/// Local convolutions, patch tokenization, softmax-attention encoding, fold,
/// and a fusion convolution.
pub fn mobilevit_block(
    tape: &mut Tape,
    x: Var,
    vars: &MobileVitBlockVars,
    mode: Mode,
    updates: &mut Vec<BnUpdate>,
) -> Result<Var> {
    let s = tape.value(x).shape().to_vec();
    if s.len() != 4 {
        return Err(Error::shape("mobilevit_block", format!("expected (B,C,H,W), got {:?}", s)));
    }
    let (h, w) = (s[2], s[3]);
    check_patch("mobilevit_block", h, w, vars.patch)?;
    let local = conv_unit(tape, x, &vars.local_spatial, mode, updates)?;
    let local = conv_unit(tape, local, &vars.local_project, mode, updates)?;
    let cp = tape.value(local).shape()[1];
    let mut z = unfold(tape, local, vars.patch)?;
    for layer in &vars.encoders {
        z = encoder_layer(tape, z, layer, AttentionKind::Softmax { heads: vars.heads }, vars.style)?;
    }
    let global = fold(tape, z, cp, h, w, vars.patch)?;
    let fused_in = if vars.fusion_concat_input {
        tape.concat(&[x, global], 1)?
    } else {
        global
    };
    conv_unit(tape, fused_in, &vars.fusion, mode, updates)
}

pub struct MobileVitV2BlockVars {
    pub irb: IrbVars,
    pub encoders: Vec<EncoderLayerVars>,
    /// 1 x 1 fusion back to the block width; linear because a residual add
    /// with the inverted-residual output follows.
    pub fusion: ConvUnit,
    pub patch: usize,
    pub style: EncoderStyle,
}

/// Inverted residual, patch tokenization, linear-attention encoding, fold,
/// 1 x 1 fusion, and a residual connection to the inverted-residual output.
pub fn mobilevit_v2_block(
    tape: &mut Tape,
    x: Var,
    vars: &MobileVitV2BlockVars,
    mode: Mode,
    updates: &mut Vec<BnUpdate>,
) -> Result<Var> {
    let s = tape.value(x).shape().to_vec();
    if s.len() != 4 {
        return Err(Error::shape("mobilevit_v2_block", format!("expected (B,C,H,W), got {:?}", s)));
    }
    let (h, w) = (s[2], s[3]);
    check_patch("mobilevit_v2_block", h, w, vars.patch)?;
    let x_irb = inverted_residual(tape, x, &vars.irb, mode, updates)?;
    let c = tape.value(x_irb).shape()[1];
    let mut z = unfold(tape, x_irb, vars.patch)?;
    for layer in &vars.encoders {
        z = encoder_layer(tape, z, layer, AttentionKind::Linear, vars.style)?;
    }
    let folded = fold(tape, z, c, h, w, vars.patch)?;
    let fused = conv_unit(tape, folded, &vars.fusion, mode, updates)?;
    tape.add(fused, x_irb)
}

/// Global average pooling over the spatial axes: `(B, C, H, W)` to `(B, C)`.
pub fn global_avg_pool(tape: &mut Tape, x: Var) -> Result<Var> {
    let s = tape.value(x).shape();
    if s.len() != 4 {
        return Err(Error::shape("global_avg_pool", format!("expected (B,C,H,W), got {:?}", s)));
    }
    tape.mean_axes(x, &[2, 3], false)
}
