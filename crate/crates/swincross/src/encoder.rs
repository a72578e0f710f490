//! Dual-branch four-stage encoder: per-modality patch embedding, patch
//! merging, windowed/shifted block pairs, and the stage fusion that feeds
//! the decoder.
//!
//! Per stage, each branch is downsampled by patch merging (`x_k`), run
//! through the block pairs (`y_k`), and fused two ways: the branch carries
//! `x_k + y_k` forward, while the decoder skip receives the element-wise
//! sum of the branch outputs `y_1 + y_2`. Stage resolutions follow the
//! ceil-halving schedule; odd extents are zero-padded before merging and
//! window sizes clamp to the grid where necessary.

use crate::attention::{
    cross_modal_window_attention, window_self_attention, AttentionParams, ModalityPair,
};
use crate::error::{Error, Result};
use crate::init::ParamBuilder;
use crate::model::{BlockMode, SwinCrossConfig};
use crate::tensor::Tensor;
use crate::windowing::{
    compute_shift_mask, crop_to_resolution, cyclic_shift, cyclic_unshift, pad_to_window_multiple,
    window_partition, window_reverse, ShiftMask, TokenGrid,
};

pub const LN_EPS: f64 = 1e-5;

/// Strided 3D convolution that tokenizes one modality.
#[derive(Debug, Clone)]
pub struct PatchEmbedParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl PatchEmbedParams {
    fn init(pb: &mut ParamBuilder, prefix: &str, in_channels: usize, out_channels: usize) -> Result<Self> {
        Ok(PatchEmbedParams {
            weight: pb.trunc_normal(
                &format!("{prefix}.weight"),
                &[out_channels, in_channels, 2, 2, 2],
                0.02,
            )?,
            bias: pb.zeros(&format!("{prefix}.bias"), &[out_channels])?,
        })
    }
}

#[derive(Debug, Clone)]
pub struct PatchMergingParams {
    pub norm_gamma: Tensor,
    pub norm_beta: Tensor,
    /// `[8*C_in, 2*C_in]`, applied after the neighborhood concat + norm.
    pub reduction: Tensor,
}

impl PatchMergingParams {
    fn init(pb: &mut ParamBuilder, prefix: &str, in_channels: usize) -> Result<Self> {
        Ok(PatchMergingParams {
            norm_gamma: pb.ones(&format!("{prefix}.norm.gamma"), &[8 * in_channels])?,
            norm_beta: pb.zeros(&format!("{prefix}.norm.beta"), &[8 * in_channels])?,
            reduction: pb.trunc_normal(
                &format!("{prefix}.reduction.weight"),
                &[8 * in_channels, 2 * in_channels],
                0.02,
            )?,
        })
    }
}

#[derive(Debug, Clone)]
pub struct LayerNormParams {
    pub gamma: Tensor,
    pub beta: Tensor,
}

impl LayerNormParams {
    fn init(pb: &mut ParamBuilder, prefix: &str, dim: usize) -> Result<Self> {
        Ok(LayerNormParams {
            gamma: pb.ones(&format!("{prefix}.gamma"), &[dim])?,
            beta: pb.zeros(&format!("{prefix}.beta"), &[dim])?,
        })
    }
}

#[derive(Debug, Clone)]
pub struct MlpParams {
    pub fc1_weight: Tensor,
    pub fc1_bias: Tensor,
    pub fc2_weight: Tensor,
    pub fc2_bias: Tensor,
}

impl MlpParams {
    fn init(pb: &mut ParamBuilder, prefix: &str, dim: usize, hidden: usize) -> Result<Self> {
        Ok(MlpParams {
            fc1_weight: pb.trunc_normal(&format!("{prefix}.fc1.weight"), &[dim, hidden], 0.02)?,
            fc1_bias: pb.zeros(&format!("{prefix}.fc1.bias"), &[hidden])?,
            fc2_weight: pb.trunc_normal(&format!("{prefix}.fc2.weight"), &[hidden, dim], 0.02)?,
            fc2_bias: pb.zeros(&format!("{prefix}.fc2.bias"), &[dim])?,
        })
    }
}

/// One transformer layer of one branch: pre-norm attention plus pre-norm
/// MLP, both residual.
#[derive(Debug, Clone)]
pub struct BlockLayerParams {
    pub norm1: LayerNormParams,
    pub attn: AttentionParams,
    pub norm2: LayerNormParams,
    pub mlp: MlpParams,
}

impl BlockLayerParams {
    fn init(pb: &mut ParamBuilder, prefix: &str, cfg: &SwinCrossConfig, dim: usize, heads: usize) -> Result<Self> {
        let hidden = ((dim as f64 * cfg.mlp_ratio).round() as usize).max(1);
        Ok(BlockLayerParams {
            norm1: LayerNormParams::init(pb, &format!("{prefix}.norm1"), dim)?,
            attn: AttentionParams::init(
                pb,
                &format!("{prefix}.attn"),
                dim,
                heads,
                cfg.window_size,
                cfg.use_rel_pos_bias,
            )?,
            norm2: LayerNormParams::init(pb, &format!("{prefix}.norm2"), dim)?,
            mlp: MlpParams::init(pb, &format!("{prefix}.mlp"), dim, hidden)?,
        })
    }
}

/// A windowed layer followed by its shifted twin, per branch.
#[derive(Debug, Clone)]
pub struct BlockPairParams {
    /// indexed `[branch]`
    pub unshifted: Vec<BlockLayerParams>,
    pub shifted: Vec<BlockLayerParams>,
}

#[derive(Debug, Clone)]
pub struct StageParams {
    /// indexed `[branch]`
    pub merge: Vec<PatchMergingParams>,
    pub pairs: Vec<BlockPairParams>,
}

#[derive(Debug, Clone)]
pub struct EncoderParams {
    /// indexed `[branch]`; one branch in baseline mode, two otherwise
    pub embed: Vec<PatchEmbedParams>,
    pub stages: Vec<StageParams>,
}

fn branch_names(mode: BlockMode) -> &'static [&'static str] {
    match mode {
        BlockMode::CrossModal => &["mod1", "mod2"],
        BlockMode::SingleStreamBaseline => &["main"],
    }
}

impl EncoderParams {
    pub fn init(pb: &mut ParamBuilder, cfg: &SwinCrossConfig) -> Result<EncoderParams> {
        let branches = branch_names(cfg.block_mode);
        let embed_in = match cfg.block_mode {
            BlockMode::CrossModal => 1,
            BlockMode::SingleStreamBaseline => cfg.modalities,
        };
        let mut embed = Vec::new();
        for b in branches {
            embed.push(PatchEmbedParams::init(
                pb,
                &format!("encoder.embed.{b}"),
                embed_in,
                cfg.embed_dim,
            )?);
        }
        let mut stages = Vec::new();
        for (i, (&depth, &heads)) in cfg.depths.iter().zip(&cfg.heads).enumerate() {
            let stage_no = i + 1;
            let in_ch = cfg.embed_dim << i;
            let dim = 2 * in_ch;
            let mut merge = Vec::new();
            for b in branches {
                merge.push(PatchMergingParams::init(
                    pb,
                    &format!("encoder.stage{stage_no}.merge.{b}"),
                    in_ch,
                )?);
            }
            let mut pairs = Vec::new();
            for p in 0..depth / 2 {
                let mut unshifted = Vec::new();
                let mut shifted = Vec::new();
                for b in branches {
                    unshifted.push(BlockLayerParams::init(
                        pb,
                        &format!("encoder.stage{stage_no}.pair{p}.w.{b}"),
                        cfg,
                        dim,
                        heads,
                    )?);
                }
                for b in branches {
                    shifted.push(BlockLayerParams::init(
                        pb,
                        &format!("encoder.stage{stage_no}.pair{p}.sw.{b}"),
                        cfg,
                        dim,
                        heads,
                    )?);
                }
                pairs.push(BlockPairParams { unshifted, shifted });
            }
            stages.push(StageParams { merge, pairs });
        }
        Ok(EncoderParams { embed, stages })
    }
}

/// Per-modality token grids flowing through the encoder stages.
#[derive(Debug, Clone)]
pub struct ModalityBranchState {
    pub grids: Vec<TokenGrid>,
    pub stage_index: usize,
}

impl ModalityBranchState {
    pub fn channels(&self) -> usize {
        self.grids[0].channels()
    }
}

/// The six multi-resolution tensors handed to the decoder. Level 0 is the
/// raw input `[H, W, D, M]`; levels 1..=5 are token grids `[h, w, d, ch]`
/// on the ceil-halving schedule with channels `C, 2C, 4C, 8C, 16C`.
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    pub levels: Vec<Tensor>,
    pub input_resolution: (usize, usize, usize),
}

impl FeaturePyramid {
    pub fn level_shapes(&self) -> Vec<Vec<usize>> {
        self.levels.iter().map(|t| t.dims().to_vec()).collect()
    }
}

/// Tokenizes a single-channel volume `[H, W, D]` (extents must be even)
/// into a `(H/2, W/2, D/2)` grid of `C`-dim tokens.
pub fn patch_embed(volume: &Tensor, p: &PatchEmbedParams) -> Result<TokenGrid> {
    if volume.rank() != 3 {
        return Err(Error::invalid(
            "patch_embed",
            format!("expected [H, W, D], got {:?}", volume.dims()),
        ));
    }
    let d = volume.dims().to_vec();
    if d.iter().any(|&v| v % 2 != 0 || v == 0) {
        return Err(Error::invalid(
            "patch_embed",
            format!("spatial extents must be even and positive, got {d:?}"),
        ));
    }
    let x = volume.reshape(&[1, d[0], d[1], d[2]])?;
    embed_channels(&x, p)
}

/// Tokenizes a channel-last multi-channel volume in baseline mode.
pub fn patch_embed_multichannel(volume: &Tensor, p: &PatchEmbedParams) -> Result<TokenGrid> {
    let d = volume.dims().to_vec();
    if volume.rank() != 4 {
        return Err(Error::invalid(
            "patch_embed",
            format!("expected [H, W, D, M], got {d:?}"),
        ));
    }
    let x = volume.permute(&[3, 0, 1, 2])?;
    embed_channels(&x, p)
}

fn embed_channels(x: &Tensor, p: &PatchEmbedParams) -> Result<TokenGrid> {
    let c = p.weight.dims()[0];
    let out = x.conv3d(&p.weight, 2, 0)?;
    let od = out.dims().to_vec();
    let biased = out.add(
        &p.bias
            .reshape(&[c, 1, 1, 1])?
            .broadcast_to(&[c, od[1], od[2], od[3]])?,
    )?;
    TokenGrid::new(biased.permute(&[1, 2, 3, 0])?)
}

/// Gathers each 2x2x2 token neighborhood into an `8C` vector
/// (row-major over the neighborhood offsets, channels fastest).
pub fn gather_neighborhoods(g: &TokenGrid) -> Result<Tensor> {
    let (h, w, d) = g.resolution;
    if h % 2 != 0 || w % 2 != 0 || d % 2 != 0 {
        return Err(Error::invalid(
            "patch_merging",
            format!("resolution {:?} must be even; pad first", g.resolution),
        ));
    }
    let c = g.channels();
    let mut parts = Vec::with_capacity(8);
    for a in 0..2 {
        for b in 0..2 {
            for cc in 0..2 {
                parts.push(g.tensor.slice(&[(a, h, 2), (b, w, 2), (cc, d, 2), (0, c, 1)])?);
            }
        }
    }
    Tensor::concat(&parts, 3)
}

/// Halves the resolution and doubles the channels: neighborhood concat,
/// layer norm over `8C`, linear projection to `2C`.
pub fn patch_merging(g: &TokenGrid, p: &PatchMergingParams) -> Result<TokenGrid> {
    let gathered = gather_neighborhoods(g)?;
    let dims = gathered.dims().to_vec();
    let (oh, ow, od, c8) = (dims[0], dims[1], dims[2], dims[3]);
    let flat = gathered.reshape(&[oh * ow * od, c8])?;
    let normed = flat.layer_norm(&p.norm_gamma, &p.norm_beta, LN_EPS)?;
    let reduced = normed.matmul(&p.reduction)?;
    TokenGrid::new(reduced.reshape(&[oh, ow, od, c8 / 4])?)
}

fn mlp_forward(g: &TokenGrid, p: &MlpParams) -> Result<TokenGrid> {
    let (h, w, d) = g.resolution;
    let c = g.channels();
    let hidden = p.fc1_weight.dims()[1];
    let n = h * w * d;
    let flat = g.tensor.reshape(&[n, c])?;
    let a = flat
        .matmul(&p.fc1_weight)?
        .add(&p.fc1_bias.reshape(&[1, hidden])?.broadcast_to(&[n, hidden])?)?
        .gelu()?;
    let b = a
        .matmul(&p.fc2_weight)?
        .add(&p.fc2_bias.reshape(&[1, c])?.broadcast_to(&[n, c])?)?;
    TokenGrid::new(b.reshape(&[h, w, d, c])?)
}

fn layer_norm_grid(g: &TokenGrid, ln: &LayerNormParams) -> Result<TokenGrid> {
    TokenGrid::new(g.tensor.layer_norm(&ln.gamma, &ln.beta, LN_EPS)?)
}

/// Window size clamped to the smallest grid extent.
pub fn effective_window(resolution: (usize, usize, usize), configured: usize) -> usize {
    configured.min(resolution.0).min(resolution.1).min(resolution.2).max(1)
}

/// Shift used by the shifted layer on a padded grid. Zero when one window
/// covers the whole grid (shifting would only mask); halved when the
/// window itself was clamped below the configured size.
pub fn effective_shift(
    padded: (usize, usize, usize),
    m_eff: usize,
    cfg: &SwinCrossConfig,
) -> usize {
    if padded.0 <= m_eff && padded.1 <= m_eff && padded.2 <= m_eff {
        0
    } else if m_eff < cfg.window_size {
        m_eff / 2
    } else {
        cfg.shift_size
    }
}

struct WindowPlan {
    m_eff: usize,
    s_eff: usize,
    padded: (usize, usize, usize),
    mask: Option<ShiftMask>,
}

impl WindowPlan {
    fn for_resolution(resolution: (usize, usize, usize), cfg: &SwinCrossConfig, dtype: crate::tensor::DType) -> Result<WindowPlan> {
        let m_eff = effective_window(resolution, cfg.window_size);
        let pad = |v: usize| v.div_ceil(m_eff) * m_eff;
        let padded = (pad(resolution.0), pad(resolution.1), pad(resolution.2));
        let s_eff = effective_shift(padded, m_eff, cfg);
        let mask = if s_eff > 0 {
            Some(compute_shift_mask(padded, m_eff, s_eff, dtype)?)
        } else {
            None
        };
        Ok(WindowPlan {
            m_eff,
            s_eff,
            padded: resolution_unused(padded),
            mask,
        })
    }
}

// padded resolution is carried only for debug assertions
fn resolution_unused(p: (usize, usize, usize)) -> (usize, usize, usize) {
    p
}

/// One attention sub-layer across all branches: pre-norm, pad, optional
/// shift, partition, attend (cross-modal for two branches, self for one),
/// reverse everything, residual add.
fn attention_sublayer(
    grids: &[TokenGrid],
    layers: &[BlockLayerParams],
    plan: &WindowPlan,
    shifted: bool,
    cfg: &SwinCrossConfig,
) -> Result<Vec<TokenGrid>> {
    let resolution = grids[0].resolution;
    let mut windows = Vec::with_capacity(grids.len());
    for (g, layer) in grids.iter().zip(layers) {
        let normed = layer_norm_grid(g, &layer.norm1)?;
        let mut padded = pad_to_window_multiple(&normed, plan.m_eff)?;
        debug_assert_eq!(padded.resolution, plan.padded);
        if shifted && plan.s_eff > 0 {
            padded = cyclic_shift(&padded, plan.s_eff)?;
        }
        windows.push(window_partition(&padded, plan.m_eff)?);
    }
    let mask = if shifted { plan.mask.as_ref() } else { None };
    let attended: Vec<crate::windowing::WindowBatch> = match windows.len() {
        2 => {
            let pair = ModalityPair::new(windows[0].clone(), windows[1].clone())?;
            let out = cross_modal_window_attention(
                &pair,
                &layers[0].attn,
                &layers[1].attn,
                mask,
                cfg.values_from_other_modality,
            )?;
            vec![out.mod1, out.mod2]
        }
        1 => vec![window_self_attention(&windows[0], &layers[0].attn, mask)?],
        n => {
            return Err(Error::Config(format!(
                "unsupported branch count {n}; pairwise cross attention needs exactly two"
            )))
        }
    };
    let mut out = Vec::with_capacity(grids.len());
    for ((wb, g), _layer) in attended.iter().zip(grids).zip(layers) {
        let mut rev = window_reverse(wb)?;
        if shifted && plan.s_eff > 0 {
            rev = cyclic_unshift(&rev, plan.s_eff)?;
        }
        let cropped = crop_to_resolution(&rev, resolution)?;
        out.push(TokenGrid::new(g.tensor.add(&cropped.tensor)?)?);
    }
    Ok(out)
}

fn block_layer(
    grids: &[TokenGrid],
    layers: &[BlockLayerParams],
    plan: &WindowPlan,
    shifted: bool,
    cfg: &SwinCrossConfig,
) -> Result<Vec<TokenGrid>> {
    let after_attn = attention_sublayer(grids, layers, plan, shifted, cfg)?;
    let mut out = Vec::with_capacity(after_attn.len());
    for (g, layer) in after_attn.iter().zip(layers) {
        let h = mlp_forward(&layer_norm_grid(g, &layer.norm2)?, &layer.mlp)?;
        out.push(TokenGrid::new(g.tensor.add(&h.tensor)?)?);
    }
    Ok(out)
}

/// The two-layer structure: a windowed layer followed by its
/// shifted-window twin, updating every branch.
pub fn cma_block_pair(
    grids: &[TokenGrid],
    pair: &BlockPairParams,
    cfg: &SwinCrossConfig,
) -> Result<Vec<TokenGrid>> {
    let plan = WindowPlan::for_resolution(grids[0].resolution, cfg, grids[0].tensor.dtype())?;
    block_pair_with_plan(grids, pair, &plan, cfg)
}

fn block_pair_with_plan(
    grids: &[TokenGrid],
    pair: &BlockPairParams,
    plan: &WindowPlan,
    cfg: &SwinCrossConfig,
) -> Result<Vec<TokenGrid>> {
    let mid = block_layer(grids, &pair.unshifted, plan, false, cfg)?;
    block_layer(&mid, &pair.shifted, plan, true, cfg)
}

/// Runs one encoder stage: per-branch patch merging, the stage's block
/// pairs, the green-plus branch update `x_k + y_k`, and the red-plus
/// decoder skip `sum_k y_k`.
pub fn run_stage(
    state: &ModalityBranchState,
    stage: &StageParams,
    cfg: &SwinCrossConfig,
) -> Result<(ModalityBranchState, Tensor)> {
    let mut merged = Vec::with_capacity(state.grids.len());
    for (g, m) in state.grids.iter().zip(&stage.merge) {
        let even = pad_to_window_multiple(g, 2)?;
        merged.push(patch_merging(&even, m)?);
    }
    let mut y = merged.clone();
    if !y.is_empty() {
        let plan = WindowPlan::for_resolution(y[0].resolution, cfg, y[0].tensor.dtype())?;
        for pair in &stage.pairs {
            y = block_pair_with_plan(&y, pair, &plan, cfg)?;
        }
    }
    let mut out_grids = Vec::with_capacity(merged.len());
    for (x, yk) in merged.iter().zip(&y) {
        out_grids.push(TokenGrid::new(x.tensor.add(&yk.tensor)?)?);
    }
    let mut skip = y[0].tensor.clone();
    for yk in &y[1..] {
        skip = skip.add(&yk.tensor)?;
    }
    Ok((
        ModalityBranchState {
            grids: out_grids,
            stage_index: state.stage_index + 1,
        },
        skip,
    ))
}

/// Full encoder pass over a channel-last volume `[H, W, D, M]`, producing
/// the six-level pyramid: raw input, summed patch embeddings, and the four
/// stage skips.
pub fn encode(volume: &Tensor, params: &EncoderParams, cfg: &SwinCrossConfig) -> Result<FeaturePyramid> {
    if volume.rank() != 4 {
        return Err(Error::invalid(
            "encode",
            format!("expected [H, W, D, M], got {:?}", volume.dims()),
        ));
    }
    let d = volume.dims().to_vec();
    if d[3] != cfg.modalities {
        return Err(Error::invalid(
            "encode",
            format!("expected {} channels, got {}", cfg.modalities, d[3]),
        ));
    }
    if d[..3].iter().any(|&v| v < 2) {
        return Err(Error::invalid(
            "encode",
            format!("volume extents {:?} too small for the patch schedule", &d[..3]),
        ));
    }
    let input_resolution = (d[0], d[1], d[2]);

    // Pad odd extents to even before tokenization.
    let grid = TokenGrid::new(volume.clone())?;
    let even = pad_to_window_multiple(&grid, 2)?;
    let (h, w, dd) = even.resolution;

    let mut levels = vec![volume.clone()];
    let embeds: Vec<TokenGrid> = match cfg.block_mode {
        BlockMode::CrossModal => {
            let mut out = Vec::new();
            for (m, p) in params.embed.iter().enumerate() {
                let single = even
                    .tensor
                    .slice(&[(0, h, 1), (0, w, 1), (0, dd, 1), (m, m + 1, 1)])?
                    .reshape(&[h, w, dd])?;
                out.push(patch_embed(&single, p)?);
            }
            out
        }
        BlockMode::SingleStreamBaseline => {
            vec![patch_embed_multichannel(&even.tensor, &params.embed[0])?]
        }
    };
    let mut level1 = embeds[0].tensor.clone();
    for e in &embeds[1..] {
        level1 = level1.add(&e.tensor)?;
    }
    levels.push(level1);

    let mut state = ModalityBranchState {
        grids: embeds,
        stage_index: 0,
    };
    for stage in &params.stages {
        let (next, skip) = run_stage(&state, stage, cfg)?;
        levels.push(skip);
        state = next;
    }
    Ok(FeaturePyramid {
        levels,
        input_resolution,
    })
}

/// Total transformer layers across the encoder under the configured depths.
pub fn encoder_layer_count(depths: &[usize]) -> usize {
    depths.iter().sum()
}
