//! Patch embedding and the weight-sharing attention branches.
//!
//! One block owns a single parameter store that serves three wirings:
//! self-attention over source tokens (`b_s`), self-attention over target
//! tokens (`b_t`), and the polymerized cross-attention branch (`b_p`) that
//! takes queries from the source stream and keys/values from the target
//! stream. `msa` and `mca` share one code path, so `mca(q, q)` is
//! bit-identical to `msa(q)`.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

pub const LN_EPS: f64 = 1e-5;

/// Graph handles for the patch-embedder parameters.
#[derive(Debug, Clone, Copy)]
pub struct EmbedderVars {
    /// (C·p²)×d linear projection.
    pub proj_w: Var,
    /// Length-d bias.
    pub proj_b: Var,
    /// N×d learnable positional embedding, shared by both domains.
    pub pos: Var,
}

/// Graph handles for one block's single parameter store. No per-branch
/// copies exist; all three wirings read these same vars.
#[derive(Debug, Clone, Copy)]
pub struct BlockVars {
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub w_o: Var,
    pub ln1_gamma: Var,
    pub ln1_beta: Var,
    pub ln2_gamma: Var,
    pub ln2_beta: Var,
    pub ffn_w1: Var,
    pub ffn_b1: Var,
    pub ffn_w2: Var,
    pub ffn_b2: Var,
    pub heads: usize,
}

/// The three branch outputs of one block, each N×d.
#[derive(Debug, Clone, Copy)]
pub struct BranchOutputs {
    pub p_s: Var,
    pub p_t: Var,
    pub p_p: Var,
}

/// Flatten a C×H×W map into non-overlapping patch tokens, project to d,
/// and add the positional embedding.
pub fn embed_patches(g: &mut Graph, x: Var, e: &EmbedderVars, patch: usize) -> Result<Var> {
    let tokens = g.extract_patches(x, patch)?;
    let projected = g.matmul(tokens, e.proj_w)?;
    let biased = g.add_row(projected, e.proj_b)?;
    g.add(biased, e.pos)
}

/// Multi-head self-attention encoder block (pre-norm, residual).
pub fn msa(g: &mut Graph, tokens: Var, blk: &BlockVars) -> Result<Var> {
    encode(g, tokens, tokens, blk)
}

/// Multi-head cross-attention encoder block: queries from `q_src`,
/// keys/values from `kv_tgt`, residual stream carried by `q_src`.
pub fn mca(g: &mut Graph, q_src: Var, kv_tgt: Var, blk: &BlockVars) -> Result<Var> {
    encode(g, q_src, kv_tgt, blk)
}

/// Run all three wirings of one block over a (source, target) token pair.
pub fn pfm_forward(g: &mut Graph, src: Var, tgt: Var, blk: &BlockVars) -> Result<BranchOutputs> {
    Ok(BranchOutputs {
        p_s: msa(g, src, blk)?,
        p_t: msa(g, tgt, blk)?,
        p_p: mca(g, src, tgt, blk)?,
    })
}

fn encode(g: &mut Graph, q_in: Var, kv_in: Var, blk: &BlockVars) -> Result<Var> {
    let attended = attention_sublayer(g, q_in, kv_in, blk)?;
    feed_forward_sublayer(g, attended, blk)
}

/// Residual attention half of the block: q_in + proj(multi-head attention).
pub fn attention_sublayer(g: &mut Graph, q_in: Var, kv_in: Var, blk: &BlockVars) -> Result<Var> {
    let d = token_dim(g, q_in)?;
    if token_dim(g, kv_in)? != d {
        return Err(Error::Dimension(
            "attention: query and key/value token widths differ".into(),
        ));
    }
    if blk.heads == 0 || d % blk.heads != 0 {
        return Err(Error::Dimension(format!(
            "attention: token width {d} not divisible by {} heads",
            blk.heads
        )));
    }
    let dh = d / blk.heads;
    let scale = 1.0 / (dh as f64).sqrt();

    let q_n = g.layer_norm_rows(q_in, blk.ln1_gamma, blk.ln1_beta, LN_EPS)?;
    let kv_n = g.layer_norm_rows(kv_in, blk.ln1_gamma, blk.ln1_beta, LN_EPS)?;
    let q = g.matmul(q_n, blk.w_q)?;
    let k = g.matmul(kv_n, blk.w_k)?;
    let v = g.matmul(kv_n, blk.w_v)?;

    let mut head_outputs = Vec::with_capacity(blk.heads);
    for head in 0..blk.heads {
        let qh = g.slice_cols(q, head * dh, dh)?;
        let kh = g.slice_cols(k, head * dh, dh)?;
        let vh = g.slice_cols(v, head * dh, dh)?;
        let kt = g.transpose(kh)?;
        let scores = g.matmul(qh, kt)?;
        let scaled = g.scale(scores, scale)?;
        let weights = g.softmax_rows(scaled)?;
        head_outputs.push(g.matmul(weights, vh)?);
    }
    let merged = g.concat_cols(&head_outputs)?;
    let projected = g.matmul(merged, blk.w_o)?;
    g.add(q_in, projected)
}

fn feed_forward_sublayer(g: &mut Graph, x: Var, blk: &BlockVars) -> Result<Var> {
    let normed = g.layer_norm_rows(x, blk.ln2_gamma, blk.ln2_beta, LN_EPS)?;
    let hidden = g.matmul(normed, blk.ffn_w1)?;
    let hidden = g.add_row(hidden, blk.ffn_b1)?;
    let hidden = g.gelu(hidden)?;
    let out = g.matmul(hidden, blk.ffn_w2)?;
    let out = g.add_row(out, blk.ffn_b2)?;
    g.add(x, out)
}

fn token_dim(g: &Graph, v: Var) -> Result<usize> {
    let s = g.value(v).shape();
    if s.len() != 2 {
        return Err(Error::Dimension(format!(
            "expected N×d tokens, got shape {s:?}"
        )));
    }
    Ok(s[1])
}

/// Euclidean distances among the three branch outputs of one sample.
#[derive(Debug, Clone, Copy)]
pub struct GeodesicReport {
    pub d_sp: f64,
    pub d_tp: f64,
    pub d_st: f64,
    /// d_sp / d_tp; 1.0 by convention when all three outputs coincide.
    pub ratio: f64,
    /// d_sp + d_tp − d_st; nonnegative by the triangle inequality.
    pub slack: f64,
}

/// Distance diagnostic over one sample's branch outputs. d(·) is the
/// Euclidean norm of the flattened difference.
pub fn geodesic_report(p_s: &Tensor, p_t: &Tensor, p_p: &Tensor) -> Result<GeodesicReport> {
    if p_s.shape() != p_t.shape() || p_s.shape() != p_p.shape() {
        return Err(Error::Dimension(format!(
            "geodesic_report: shapes {:?}/{:?}/{:?} differ",
            p_s.shape(),
            p_t.shape(),
            p_p.shape()
        )));
    }
    let dist = |a: &Tensor, b: &Tensor| -> f64 {
        a.data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt()
    };
    let d_sp = dist(p_s, p_p);
    let d_tp = dist(p_t, p_p);
    let d_st = dist(p_s, p_t);
    let ratio = if d_sp == 0.0 && d_tp == 0.0 {
        1.0
    } else if d_tp == 0.0 {
        f64::INFINITY
    } else {
        d_sp / d_tp
    };
    Ok(GeodesicReport {
        d_sp,
        d_tp,
        d_st,
        ratio,
        slack: d_sp + d_tp - d_st,
    })
}
