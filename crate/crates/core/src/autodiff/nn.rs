//! Attention and transformer encoder layers built from tape primitives.

use super::tape::{Tape, Var};
use super::tensor::Real;
use crate::error::{Error, Result};

/// Projection weights are `[E, E]` laid out input-major, as [`Tape::linear`] expects.
#[derive(Debug, Clone, Copy)]
pub struct AttentionVars {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct EncoderLayerVars {
    pub attn: AttentionVars,
    pub ln1_gamma: Var,
    pub ln1_beta: Var,
    pub ff1_w: Var,
    pub ff1_b: Var,
    pub ff2_w: Var,
    pub ff2_b: Var,
    pub ln2_gamma: Var,
    pub ln2_beta: Var,
}

/// Self-attention over axis 0 of a sequence-first `[S, B, E]` input.
pub fn multi_head_attention<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    p: &AttentionVars,
    heads: usize,
) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    if shape.len() != 3 {
        return Err(Error::ShapeMismatch(format!("attention expects [S, B, E], got {shape:?}")));
    }
    let (s, b, e) = (shape[0], shape[1], shape[2]);
    if heads == 0 || e % heads != 0 {
        return Err(Error::InvalidArgument(format!(
            "embedding width {e} is not divisible by {heads} heads"
        )));
    }
    let dh = e / heads;
    let split = |tape: &mut Tape<T>, w: Var, bias: Var| -> Result<Var> {
        let y = tape.linear(x, w, Some(bias))?;
        let y = tape.reshape(y, &[s, b, heads, dh])?;
        tape.permute(y, &[1, 2, 0, 3])
    };
    let q = split(tape, p.wq, p.bq)?;
    let k = split(tape, p.wk, p.bk)?;
    let v = split(tape, p.wv, p.bv)?;
    let scores = tape.batch_matmul(q, k, true)?;
    let scores = tape.scale(scores, T::of(1.0 / (dh as f64).sqrt()));
    let attn = tape.softmax(scores);
    let ctx = tape.batch_matmul(attn, v, false)?;
    let ctx = tape.permute(ctx, &[2, 0, 1, 3])?;
    let ctx = tape.reshape(ctx, &[s, b, e])?;
    tape.linear(ctx, p.wo, Some(p.bo))
}

/// Post-norm encoder layer: `y1 = LN(x + MHA(x))`, `y = LN(y1 + FFN(y1))`.
pub fn encoder_layer<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    p: &EncoderLayerVars,
    heads: usize,
) -> Result<Var> {
    let a = multi_head_attention(tape, x, &p.attn, heads)?;
    let r1 = tape.add(x, a)?;
    let y1 = tape.layer_norm(r1, p.ln1_gamma, p.ln1_beta)?;
    let h = tape.linear(y1, p.ff1_w, Some(p.ff1_b))?;
    let h = tape.relu(h);
    let f = tape.linear(h, p.ff2_w, Some(p.ff2_b))?;
    let r2 = tape.add(y1, f)?;
    tape.layer_norm(r2, p.ln2_gamma, p.ln2_beta)
}
