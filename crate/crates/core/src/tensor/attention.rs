//! Single-head spatial self-attention over `[N, C, H, W]` feature maps.

use crate::error::Result;
use crate::tensor::graph::{Graph, Var};
use crate::tensor::Element;

/// Attention body without the residual: tokens are the H*W spatial positions,
/// scores are `(xWq)(xWk)^T / sqrt(C)` with a row softmax, and the context is
/// projected back through `wo`.
pub fn attention_body<T: Element>(
    g: &mut Graph<T>,
    x: Var,
    wq: Var,
    wk: Var,
    wv: Var,
    wo: Var,
) -> Result<Var> {
    let &[n, c, h, w] = g.shape(x) else {
        return Err(crate::error::CoreError::InvalidArgument {
            op: "self_attention",
            msg: format!("expected rank-4 input, got {:?}", g.shape(x)),
        });
    };
    let l = h * w;
    let tokens = g.nchw_to_nlc(x)?; // [N, L, C]
    let flat = g.reshape(tokens, vec![n * l, c])?;
    let q = g.matmul(flat, wq)?;
    let k = g.matmul(flat, wk)?;
    let v = g.matmul(flat, wv)?;
    let q3 = g.reshape(q, vec![n, l, c])?;
    let k3 = g.reshape(k, vec![n, l, c])?;
    let v3 = g.reshape(v, vec![n, l, c])?;
    let scores = g.bmm(q3, k3, true)?; // [N, L, L]
    let scaled = g.scale(scores, T::from_f64(1.0 / (c as f64).sqrt()))?;
    let attn = g.softmax_rows(scaled)?;
    let ctx = g.bmm(attn, v3, false)?; // [N, L, C]
    let ctx_flat = g.reshape(ctx, vec![n * l, c])?;
    let out = g.matmul(ctx_flat, wo)?;
    let out3 = g.reshape(out, vec![n, l, c])?;
    g.nlc_to_nchw(out3, h, w)
}

/// Self-attention with the residual connection folded in:
/// `x + attention_body(x)`.
pub fn self_attention<T: Element>(
    g: &mut Graph<T>,
    x: Var,
    wq: Var,
    wk: Var,
    wv: Var,
    wo: Var,
) -> Result<Var> {
    let body = attention_body(g, x, wq, wk, wv, wo)?;
    g.add(x, body)
}
