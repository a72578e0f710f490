//! U-shaped convolutional decoder over the six-level feature pyramid.
//!
//! Every pyramid level passes through its own residual block; decoding
//! starts from the deepest level and repeatedly doubles the resolution
//! with a deconvolution, concatenates the next-shallower processed skip,
//! and fuses with another residual block. A 1x1x1 convolution plus sigmoid
//! produces the probability volume. Work happens channel-first; the
//! pyramid's channel-last levels are permuted on entry and the result is
//! permuted back.

use crate::encoder::FeaturePyramid;
use crate::error::{Error, Result};
use crate::init::ParamBuilder;
use crate::model::SwinCrossConfig;
use crate::tensor::Tensor;

pub const IN_EPS: f64 = 1e-5;
pub const LEAKY_SLOPE: f64 = 0.01;

#[derive(Debug, Clone)]
pub struct ConvParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl ConvParams {
    fn init(pb: &mut ParamBuilder, prefix: &str, c_in: usize, c_out: usize, k: usize) -> Result<Self> {
        Ok(ConvParams {
            weight: pb.trunc_normal(&format!("{prefix}.weight"), &[c_out, c_in, k, k, k], 0.02)?,
            bias: pb.zeros(&format!("{prefix}.bias"), &[c_out])?,
        })
    }
}

#[derive(Debug, Clone)]
pub struct NormParams {
    pub gamma: Tensor,
    pub beta: Tensor,
}

impl NormParams {
    fn init(pb: &mut ParamBuilder, prefix: &str, channels: usize) -> Result<Self> {
        Ok(NormParams {
            gamma: pb.ones(&format!("{prefix}.gamma"), &[channels])?,
            beta: pb.zeros(&format!("{prefix}.beta"), &[channels])?,
        })
    }
}

/// Two 3x3x3 conv + instance-norm + leaky-ReLU stages plus a shortcut;
/// the shortcut is a 1x1x1 projection (with norm) when channel counts
/// differ and the identity otherwise.
#[derive(Debug, Clone)]
pub struct ResidualBlockParams {
    pub conv1: ConvParams,
    pub norm1: NormParams,
    pub conv2: ConvParams,
    pub norm2: NormParams,
    pub shortcut: Option<(ConvParams, NormParams)>,
}

impl ResidualBlockParams {
    fn init(pb: &mut ParamBuilder, prefix: &str, c_in: usize, c_out: usize) -> Result<Self> {
        Ok(ResidualBlockParams {
            conv1: ConvParams::init(pb, &format!("{prefix}.conv1"), c_in, c_out, 3)?,
            norm1: NormParams::init(pb, &format!("{prefix}.norm1"), c_out)?,
            conv2: ConvParams::init(pb, &format!("{prefix}.conv2"), c_out, c_out, 3)?,
            norm2: NormParams::init(pb, &format!("{prefix}.norm2"), c_out)?,
            shortcut: if c_in != c_out {
                Some((
                    ConvParams::init(pb, &format!("{prefix}.shortcut.conv"), c_in, c_out, 1)?,
                    NormParams::init(pb, &format!("{prefix}.shortcut.norm"), c_out)?,
                ))
            } else {
                None
            },
        })
    }
}

/// Stride-2 transposed convolution halving the channel count while
/// doubling each spatial extent.
#[derive(Debug, Clone)]
pub struct DeconvParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl DeconvParams {
    fn init(pb: &mut ParamBuilder, prefix: &str, c_in: usize, c_out: usize) -> Result<Self> {
        Ok(DeconvParams {
            weight: pb.trunc_normal(&format!("{prefix}.weight"), &[c_in, c_out, 2, 2, 2], 0.02)?,
            bias: pb.zeros(&format!("{prefix}.bias"), &[c_out])?,
        })
    }
}

#[derive(Debug, Clone)]
pub struct DecoderParams {
    /// One per pyramid level, shallow to deep (6 entries).
    pub skip_blocks: Vec<ResidualBlockParams>,
    /// Upsamplers from level `i+1` down to level `i` (5 entries).
    pub ups: Vec<DeconvParams>,
    /// Fusion blocks after each concatenation (5 entries).
    pub fuse_blocks: Vec<ResidualBlockParams>,
    pub head: ConvParams,
}

/// Channels of each processed pyramid level: the raw level maps to `C`,
/// deeper levels keep their encoder widths.
pub fn decoder_channels(cfg: &SwinCrossConfig) -> Vec<usize> {
    let c = cfg.embed_dim;
    vec![c, c, 2 * c, 4 * c, 8 * c, 16 * c]
}

impl DecoderParams {
    pub fn init(pb: &mut ParamBuilder, cfg: &SwinCrossConfig) -> Result<DecoderParams> {
        let d = decoder_channels(cfg);
        let in_ch = |level: usize| -> usize {
            if level == 0 {
                cfg.modalities
            } else {
                cfg.embed_dim << (level - 1)
            }
        };
        let mut skip_blocks = Vec::new();
        for (level, &out) in d.iter().enumerate() {
            skip_blocks.push(ResidualBlockParams::init(
                pb,
                &format!("decoder.skip{level}"),
                in_ch(level),
                out,
            )?);
        }
        let mut ups = Vec::new();
        let mut fuse_blocks = Vec::new();
        for level in 0..5 {
            ups.push(DeconvParams::init(
                pb,
                &format!("decoder.up{level}"),
                d[level + 1],
                d[level],
            )?);
            fuse_blocks.push(ResidualBlockParams::init(
                pb,
                &format!("decoder.fuse{level}"),
                2 * d[level],
                d[level],
            )?);
        }
        let head = ConvParams::init(pb, "decoder.head", d[0], cfg.out_channels, 1)?;
        Ok(DecoderParams {
            skip_blocks,
            ups,
            fuse_blocks,
            head,
        })
    }
}

fn add_channel_bias(x: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let d = x.dims().to_vec();
    x.add(&bias.reshape(&[d[0], 1, 1, 1])?.broadcast_to(&d)?)
}

/// `conv -> IN -> leaky-ReLU` twice, plus the (possibly projected)
/// shortcut. Spatial extents are preserved by the padding.
pub fn residual_block(x: &Tensor, p: &ResidualBlockParams) -> Result<Tensor> {
    let a = add_channel_bias(&x.conv3d(&p.conv1.weight, 1, 1)?, &p.conv1.bias)?
        .instance_norm3d(&p.norm1.gamma, &p.norm1.beta, IN_EPS)?
        .leaky_relu(LEAKY_SLOPE)?;
    let b = add_channel_bias(&a.conv3d(&p.conv2.weight, 1, 1)?, &p.conv2.bias)?
        .instance_norm3d(&p.norm2.gamma, &p.norm2.beta, IN_EPS)?
        .leaky_relu(LEAKY_SLOPE)?;
    let shortcut = match &p.shortcut {
        Some((conv, norm)) => add_channel_bias(&x.conv3d(&conv.weight, 1, 0)?, &conv.bias)?
            .instance_norm3d(&norm.gamma, &norm.beta, IN_EPS)?,
        None => x.clone(),
    };
    b.add(&shortcut)
}

fn deconv(x: &Tensor, p: &DeconvParams) -> Result<Tensor> {
    add_channel_bias(&x.conv_transpose3d(&p.weight, 2)?, &p.bias)
}

fn crop_spatial(x: &Tensor, target: &[usize]) -> Result<Tensor> {
    let d = x.dims().to_vec();
    if d[1] == target[0] && d[2] == target[1] && d[3] == target[2] {
        return Ok(x.clone());
    }
    x.slice(&[(0, d[0], 1), (0, target[0], 1), (0, target[1], 1), (0, target[2], 1)])
}

/// Decodes the pyramid into a probability volume `[H, W, D, out_channels]`
/// with every value strictly inside (0, 1).
pub fn decode(pyramid: &FeaturePyramid, params: &DecoderParams, cfg: &SwinCrossConfig) -> Result<Tensor> {
    if pyramid.levels.len() != 6 {
        return Err(Error::invalid(
            "decode",
            format!("expected a six-level pyramid, got {}", pyramid.levels.len()),
        ));
    }
    let expected_in = |level: usize| -> usize {
        if level == 0 {
            cfg.modalities
        } else {
            cfg.embed_dim << (level - 1)
        }
    };
    for (level, t) in pyramid.levels.iter().enumerate() {
        if t.rank() != 4 || t.dims()[3] != expected_in(level) {
            return Err(Error::invalid(
                "decode",
                format!(
                    "pyramid level {level} has shape {:?}, expected {} channels",
                    t.dims(),
                    expected_in(level)
                ),
            ));
        }
    }
    // channel-first views of each level
    let cf: Vec<Tensor> = pyramid
        .levels
        .iter()
        .map(|t| t.permute(&[3, 0, 1, 2]))
        .collect::<Result<_>>()?;

    let mut x = residual_block(&cf[5], &params.skip_blocks[5])?;
    for level in (0..5).rev() {
        let up = deconv(&x, &params.ups[level])?;
        let target = &cf[level].dims()[1..];
        let up = crop_spatial(&up, target)?;
        let skip = residual_block(&cf[level], &params.skip_blocks[level])?;
        let cat = Tensor::concat(&[up, skip], 0)?;
        x = residual_block(&cat, &params.fuse_blocks[level])?;
    }
    let logits = add_channel_bias(&x.conv3d(&params.head.weight, 1, 0)?, &params.head.bias)?;
    logits.sigmoid()?.permute(&[1, 2, 3, 0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::SwinCrossConfig;
    use crate::tensor::grad_check::grad_check;
    use crate::tensor::{DType, Parameter, Storage};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: &[usize], seed: u64, dtype: DType) -> Tensor {
        let n: usize = shape.iter().product();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let storage = match dtype {
            DType::F32 => Storage::F32(data.iter().map(|&v| v as f32).collect()),
            DType::F64 => Storage::F64(data),
        };
        Tensor::from_storage(shape, storage).unwrap()
    }

    fn res_block(c_in: usize, c_out: usize, seed: u64, dtype: DType) -> (ResidualBlockParams, Vec<Parameter>) {
        let mut pb = ParamBuilder::new(seed, dtype);
        let p = ResidualBlockParams::init(&mut pb, "blk", c_in, c_out).unwrap();
        (p, pb.into_params())
    }

    #[test]
    fn zeroed_block_with_identity_shortcut_is_identity() {
        let (p, params) = res_block(3, 3, 0, DType::F32);
        for param in &params {
            param
                .tensor
                .set_data(Storage::zeros(DType::F32, param.tensor.len()))
                .unwrap();
        }
        let x = rand_tensor(&[3, 4, 4, 4], 1, DType::F32);
        let out = residual_block(&x, &p).unwrap();
        assert_eq!(out.to_f32_vec(), x.to_f32_vec());
    }

    #[test]
    fn block_preserves_spatial_shape() {
        for (shape, seed) in [([2usize, 3, 5, 4], 2u64), ([1, 1, 1, 1], 3), ([4, 6, 2, 3], 4)] {
            let (p, _) = res_block(shape[0], shape[0] + 1, seed, DType::F32);
            let x = rand_tensor(&shape, seed + 10, DType::F32);
            let out = residual_block(&x, &p).unwrap();
            assert_eq!(&out.dims()[1..], &shape[1..]);
            assert_eq!(out.dims()[0], shape[0] + 1);
        }
    }

    #[test]
    fn block_gradients_pass_fd() {
        let (p, params) = res_block(2, 3, 5, DType::F64);
        let x = rand_tensor(&[2, 4, 4, 4], 6, DType::F64);
        let f = move || {
            let out = residual_block(&x, &p)?;
            out.mul(&out)?.sum_all()
        };
        let report = grad_check(&f, &params, 1e-5, 1e-6, 6, 0).unwrap();
        assert!(report.passed(), "{:?}", report.worst);
    }

    fn synthetic_pyramid(cfg: &SwinCrossConfig, size: usize, seed: u64, dtype: DType) -> FeaturePyramid {
        let c = cfg.embed_dim;
        let mut levels = vec![rand_tensor(&[size, size, size, cfg.modalities], seed, dtype)];
        for i in 0..5 {
            let s = size >> (i + 1);
            let ch = c << i;
            levels.push(rand_tensor(&[s.max(1), s.max(1), s.max(1), ch], seed + 1 + i as u64, dtype));
        }
        FeaturePyramid {
            levels,
            input_resolution: (size, size, size),
        }
    }

    #[test]
    fn decode_shape_and_range() {
        let cfg = SwinCrossConfig {
            embed_dim: 4,
            ..SwinCrossConfig::default()
        };
        let mut pb = ParamBuilder::new(7, DType::F32);
        let dec = DecoderParams::init(&mut pb, &cfg).unwrap();
        let pyr = synthetic_pyramid(&cfg, 32, 8, DType::F32);
        let out = decode(&pyr, &dec, &cfg).unwrap();
        assert_eq!(out.dims(), &[32, 32, 32, 1]);
        assert!(out.to_f64_vec().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn zero_head_gives_uniform_half() {
        let cfg = SwinCrossConfig {
            embed_dim: 2,
            ..SwinCrossConfig::default()
        };
        let mut pb = ParamBuilder::new(9, DType::F32);
        let dec = DecoderParams::init(&mut pb, &cfg).unwrap();
        dec.head
            .weight
            .set_data(Storage::zeros(DType::F32, dec.head.weight.len()))
            .unwrap();
        let pyr = synthetic_pyramid(&cfg, 16, 10, DType::F32);
        let out = decode(&pyr, &dec, &cfg).unwrap();
        assert!(out.to_f64_vec().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn decode_rejects_wrong_level_channels() {
        let cfg = SwinCrossConfig {
            embed_dim: 2,
            ..SwinCrossConfig::default()
        };
        let mut pb = ParamBuilder::new(11, DType::F32);
        let dec = DecoderParams::init(&mut pb, &cfg).unwrap();
        let mut pyr = synthetic_pyramid(&cfg, 16, 12, DType::F32);
        pyr.levels[2] = rand_tensor(&[4, 4, 4, 7], 13, DType::F32);
        assert!(decode(&pyr, &dec, &cfg).is_err());
    }

    #[test]
    fn decoder_alone_gradients_pass_fd() {
        let cfg = SwinCrossConfig {
            embed_dim: 2,
            ..SwinCrossConfig::default()
        };
        let mut pb = ParamBuilder::new(14, DType::F64);
        let dec = DecoderParams::init(&mut pb, &cfg).unwrap();
        let params = pb.into_params();
        let pyr = synthetic_pyramid(&cfg, 8, 15, DType::F64);
        let f = move || {
            let out = decode(&pyr, &dec, &cfg)?;
            out.mul(&out)?.sum_all()
        };
        let report = grad_check(&f, &params, 1e-5, 1e-6, 2, 0).unwrap();
        assert!(report.passed(), "{:?}", report.worst);
    }
}
