//! Multi-head windowed self-attention and the cross-modal variants.
//!
//! The cross-modal form mixes the two modality branches per window: the
//! attention map pairs each branch's queries with the *other* branch's
//! keys, while values stay with the query's own branch (a config flag flips
//! values to the other branch for comparison). Scores are scaled by
//! `1/sqrt(head_dim)` and optionally offset by a learned relative position
//! bias shared across windows, plus the shift mask in shifted layers.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::init::ParamBuilder;
use crate::tensor::Tensor;
use crate::windowing::{ShiftMask, WindowBatch};

/// Projection weights of one attention operator: fused query/key/value
/// matrices, the output projection, and the optional relative position
/// bias table sized by the configured window.
#[derive(Debug, Clone)]
pub struct AttentionParams {
    pub embed_dim: usize,
    pub heads: usize,
    /// Window size the bias table was built for; effective windows at run
    /// time may be smaller and index a subset of offsets.
    pub window_size: usize,
    pub qkv_weight: Tensor,
    pub qkv_bias: Tensor,
    pub proj_weight: Tensor,
    pub proj_bias: Tensor,
    pub rel_bias_table: Option<Tensor>,
}

impl AttentionParams {
    pub fn init(
        pb: &mut ParamBuilder,
        prefix: &str,
        embed_dim: usize,
        heads: usize,
        window_size: usize,
        with_bias_table: bool,
    ) -> Result<AttentionParams> {
        if heads == 0 || embed_dim % heads != 0 {
            return Err(Error::Config(format!(
                "{prefix}: {heads} heads do not divide embed dim {embed_dim}"
            )));
        }
        let table_rows = (2 * window_size - 1).pow(3);
        Ok(AttentionParams {
            embed_dim,
            heads,
            window_size,
            qkv_weight: pb.trunc_normal(
                &format!("{prefix}.qkv.weight"),
                &[embed_dim, 3 * embed_dim],
                0.02,
            )?,
            qkv_bias: pb.zeros(&format!("{prefix}.qkv.bias"), &[3 * embed_dim])?,
            proj_weight: pb.trunc_normal(
                &format!("{prefix}.proj.weight"),
                &[embed_dim, embed_dim],
                0.02,
            )?,
            proj_bias: pb.zeros(&format!("{prefix}.proj.bias"), &[embed_dim])?,
            rel_bias_table: if with_bias_table {
                Some(pb.trunc_normal(&format!("{prefix}.rel_bias.table"), &[table_rows, heads], 0.02)?)
            } else {
                None
            },
        })
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }
}

/// Two window batches of identical shape, one per modality.
#[derive(Debug, Clone)]
pub struct ModalityPair {
    pub mod1: WindowBatch,
    pub mod2: WindowBatch,
}

impl ModalityPair {
    pub fn new(mod1: WindowBatch, mod2: WindowBatch) -> Result<ModalityPair> {
        if mod1.tensor.dims() != mod2.tensor.dims()
            || mod1.window_size != mod2.window_size
            || mod1.source_resolution != mod2.source_resolution
        {
            return Err(Error::ShapeMismatch {
                op: "ModalityPair",
                lhs: mod1.tensor.dims().to_vec(),
                rhs: mod2.tensor.dims().to_vec(),
            });
        }
        Ok(ModalityPair { mod1, mod2 })
    }
}

/// Pair-offset index map for an effective window edge of `m_eff` against a
/// table built for `window_size`: entry `(i, j)` is the table row holding
/// the bias for the 3D offset between tokens `i` and `j`.
pub fn rel_pos_index_map(m_eff: usize, window_size: usize) -> Vec<usize> {
    let span = 2 * window_size - 1;
    let tokens = m_eff * m_eff * m_eff;
    let coord = |t: usize| -> [i64; 3] {
        [
            (t / (m_eff * m_eff)) as i64,
            ((t / m_eff) % m_eff) as i64,
            (t % m_eff) as i64,
        ]
    };
    let mut map = Vec::with_capacity(tokens * tokens);
    for i in 0..tokens {
        let ci = coord(i);
        for j in 0..tokens {
            let cj = coord(j);
            let idx: usize = (0..3).fold(0, |acc, ax| {
                let offset = (ci[ax] - cj[ax] + (window_size as i64 - 1)) as usize;
                acc * span + offset
            });
            map.push(idx);
        }
    }
    map
}

/// Gathers the per-head bias matrix `[heads, m^3, m^3]` for an effective
/// window edge `m_eff`. Returns `None` when the table is disabled.
pub fn relative_position_bias(p: &AttentionParams, m_eff: usize) -> Result<Option<Tensor>> {
    let Some(table) = &p.rel_bias_table else {
        return Ok(None);
    };
    let tokens = m_eff * m_eff * m_eff;
    let map = Arc::new(rel_pos_index_map(m_eff, p.window_size));
    let bias = table
        .index_select0(map)? // [tokens^2, heads]
        .reshape(&[tokens, tokens, p.heads])?
        .permute(&[2, 0, 1])?;
    Ok(Some(bias))
}

/// Applies the fused projections and splits heads:
/// returns `(Q, K, V)`, each `[n_windows, heads, tokens, head_dim]`.
pub fn qkv_project(s: &WindowBatch, p: &AttentionParams) -> Result<(Tensor, Tensor, Tensor)> {
    let c = s.channels();
    if c != p.embed_dim {
        return Err(Error::ShapeMismatch {
            op: "qkv_project",
            lhs: s.tensor.dims().to_vec(),
            rhs: vec![p.embed_dim],
        });
    }
    let nw = s.n_windows();
    let m = s.tokens_per_window();
    let (h, dk) = (p.heads, p.head_dim());
    let flat = s.tensor.reshape(&[nw * m, c])?;
    let qkv = flat.matmul(&p.qkv_weight)?.add(
        &p.qkv_bias
            .reshape(&[1, 3 * c])?
            .broadcast_to(&[nw * m, 3 * c])?,
    )?;
    let split = qkv.reshape(&[nw, m, 3, h, dk])?.permute(&[2, 0, 3, 1, 4])?;
    let take = |i: usize| -> Result<Tensor> {
        split
            .slice(&[(i, i + 1, 1), (0, nw, 1), (0, h, 1), (0, m, 1), (0, dk, 1)])?
            .reshape(&[nw, h, m, dk])
    };
    Ok((take(0)?, take(1)?, take(2)?))
}

/// Scaled-dot-product core shared by both variants:
/// `softmax(Q K^T / sqrt(dk) + bias + mask) V`, heads merged and projected.
fn attend(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    bias: Option<&Tensor>,
    mask: Option<&ShiftMask>,
    p: &AttentionParams,
) -> Result<Tensor> {
    let dims = q.dims().to_vec(); // [nw, h, m, dk]
    let (nw, h, m, dk) = (dims[0], dims[1], dims[2], dims[3]);
    let mut scores = q
        .matmul(&k.permute(&[0, 1, 3, 2])?)?
        .scale(1.0 / (dk as f64).sqrt())?;
    if let Some(b) = bias {
        let expanded = b.reshape(&[1, h, m, m])?.broadcast_to(&[nw, h, m, m])?;
        scores = scores.add(&expanded)?;
    }
    if let Some(sm) = mask {
        if sm.tensor.dims() != [nw, m, m] {
            return Err(Error::ShapeMismatch {
                op: "window_attention_mask",
                lhs: scores.dims().to_vec(),
                rhs: sm.tensor.dims().to_vec(),
            });
        }
        let expanded = sm.tensor.reshape(&[nw, 1, m, m])?.broadcast_to(&[nw, h, m, m])?;
        scores = scores.add(&expanded)?;
    }
    let weights = scores.softmax_lastdim()?;
    let ctx = weights
        .matmul(v)?
        .permute(&[0, 2, 1, 3])?
        .reshape(&[nw * m, h * dk])?;
    let c = p.embed_dim;
    let out = ctx.matmul(&p.proj_weight)?.add(
        &p.proj_bias.reshape(&[1, c])?.broadcast_to(&[nw * m, c])?,
    )?;
    out.reshape(&[nw, m, c])
}

fn bias_for(p: &AttentionParams, s: &WindowBatch) -> Result<Option<Tensor>> {
    if p.rel_bias_table.is_none() {
        return Ok(None);
    }
    relative_position_bias(p, cube_root(s.tokens_per_window())?)
}

/// Windowed multi-head self-attention; pass the mask in shifted layers.
pub fn window_self_attention(
    s: &WindowBatch,
    p: &AttentionParams,
    mask: Option<&ShiftMask>,
) -> Result<WindowBatch> {
    let (q, k, v) = qkv_project(s, p)?;
    let bias = bias_for(p, s)?;
    let out = attend(&q, &k, &v, bias.as_ref(), mask, p)?;
    Ok(WindowBatch {
        tensor: out,
        window_size: s.window_size,
        source_resolution: s.source_resolution,
    })
}

/// Bimodal cross-attention: each branch's queries score against the other
/// branch's keys; values come from the query's own branch unless
/// `values_from_other_modality` is set. Each branch keeps its own
/// projections and bias table; the query side's bias enters its map.
pub fn cross_modal_window_attention(
    pair: &ModalityPair,
    p1: &AttentionParams,
    p2: &AttentionParams,
    mask: Option<&ShiftMask>,
    values_from_other_modality: bool,
) -> Result<ModalityPair> {
    let (q1, k1, v1) = qkv_project(&pair.mod1, p1)?;
    let (q2, k2, v2) = qkv_project(&pair.mod2, p2)?;
    let bias1 = bias_for(p1, &pair.mod1)?;
    let bias2 = bias_for(p2, &pair.mod2)?;
    let (va, vb) = if values_from_other_modality {
        (&v2, &v1)
    } else {
        (&v1, &v2)
    };
    let out1 = attend(&q1, &k2, va, bias1.as_ref(), mask, p1)?;
    let out2 = attend(&q2, &k1, vb, bias2.as_ref(), mask, p2)?;
    Ok(ModalityPair {
        mod1: WindowBatch {
            tensor: out1,
            window_size: pair.mod1.window_size,
            source_resolution: pair.mod1.source_resolution,
        },
        mod2: WindowBatch {
            tensor: out2,
            window_size: pair.mod2.window_size,
            source_resolution: pair.mod2.source_resolution,
        },
    })
}

fn cube_root(tokens: usize) -> Result<usize> {
    let mut m = 1;
    while m * m * m < tokens {
        m += 1;
    }
    if m * m * m != tokens {
        return Err(Error::invalid(
            "window_attention",
            format!("{tokens} tokens per window is not a cube"),
        ));
    }
    Ok(m)
}
