//! Model configuration, assembly, parameter accounting, checkpointing, and
//! attention cost accounting.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::decoder::{decode, DecoderParams};
use crate::encoder::{effective_window, encode, encoder_layer_count, EncoderParams};
use crate::error::{Error, Result};
use crate::init::ParamBuilder;
use crate::tensor::{DType, Parameter, Storage, Tensor};

/// Block composition: the dual-branch cross-modal form, or the
/// single-stream self-attention baseline on channel-concatenated input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockMode {
    CrossModal,
    SingleStreamBaseline,
}

/// All hyperparameters. The JSON config file mirrors these field names;
/// missing fields take the defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SwinCrossConfig {
    pub embed_dim: usize,
    pub patch_size: usize,
    pub depths: Vec<usize>,
    pub heads: Vec<usize>,
    pub window_size: usize,
    pub shift_size: usize,
    pub mlp_ratio: f64,
    pub modalities: usize,
    pub out_channels: usize,
    pub use_rel_pos_bias: bool,
    pub values_from_other_modality: bool,
    pub block_mode: BlockMode,
}

impl Default for SwinCrossConfig {
    fn default() -> Self {
        SwinCrossConfig {
            embed_dim: 48,
            patch_size: 2,
            depths: vec![2, 4, 2, 2],
            heads: vec![3, 6, 12, 24],
            window_size: 7,
            shift_size: 3,
            mlp_ratio: 4.0,
            modalities: 2,
            out_channels: 1,
            use_rel_pos_bias: true,
            values_from_other_modality: false,
            block_mode: BlockMode::CrossModal,
        }
    }
}

impl SwinCrossConfig {
    /// The reduced configuration used by gradient-check runs: small enough
    /// for finite differences over the full model at 64-bit precision.
    pub fn tiny() -> SwinCrossConfig {
        SwinCrossConfig {
            embed_dim: 8,
            depths: vec![2, 2, 2, 2],
            heads: vec![1, 2, 4, 8],
            window_size: 2,
            shift_size: 1,
            mlp_ratio: 2.0,
            ..SwinCrossConfig::default()
        }
    }

    /// Desk-scale training default: fits a 32^3 phantom overfit in minutes
    /// on one core.
    pub fn toy() -> SwinCrossConfig {
        SwinCrossConfig {
            embed_dim: 16,
            depths: vec![2, 2, 2, 2],
            heads: vec![2, 4, 8, 16],
            window_size: 4,
            shift_size: 2,
            mlp_ratio: 2.0,
            ..SwinCrossConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.patch_size != 2 {
            return fail(format!("patch_size must be 2, got {}", self.patch_size));
        }
        if self.modalities != 2 {
            return fail(format!("modalities is fixed at 2, got {}", self.modalities));
        }
        if self.embed_dim == 0 {
            return fail("embed_dim must be positive".into());
        }
        if self.out_channels == 0 {
            return fail("out_channels must be positive".into());
        }
        if self.depths.len() != 4 || self.heads.len() != 4 {
            return fail(format!(
                "expected 4 stages, got {} depths and {} head counts",
                self.depths.len(),
                self.heads.len()
            ));
        }
        for (i, &d) in self.depths.iter().enumerate() {
            if d == 0 || d % 2 != 0 {
                return fail(format!(
                    "stage {} depth {} invalid: blocks come in windowed/shifted pairs",
                    i + 1,
                    d
                ));
            }
        }
        for (i, &h) in self.heads.iter().enumerate() {
            let ch = self.embed_dim << (i + 1);
            if h == 0 || ch % h != 0 {
                return fail(format!(
                    "stage {} has {} heads which do not divide its {} channels",
                    i + 1,
                    h,
                    ch
                ));
            }
        }
        if self.window_size == 0 {
            return fail("window_size must be positive".into());
        }
        if self.shift_size >= self.window_size {
            return fail(format!(
                "shift_size {} must be below window_size {}",
                self.shift_size, self.window_size
            ));
        }
        if !(self.mlp_ratio > 0.0) {
            return fail(format!("mlp_ratio must be positive, got {}", self.mlp_ratio));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<SwinCrossConfig> {
        let cfg: SwinCrossConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

pub struct Model {
    pub config: SwinCrossConfig,
    pub encoder: EncoderParams,
    pub decoder: DecoderParams,
    pub seed: u64,
    params: Vec<Parameter>,
}

impl Model {
    /// Deterministic build: truncated-normal(0.02) projections, zero
    /// biases/betas, unit gammas, all drawn from one seeded stream in
    /// registration order.
    pub fn build(cfg: &SwinCrossConfig, seed: u64, dtype: DType) -> Result<Model> {
        cfg.validate()?;
        let mut pb = ParamBuilder::new(seed, dtype);
        let encoder = EncoderParams::init(&mut pb, cfg)?;
        let decoder = DecoderParams::init(&mut pb, cfg)?;
        Ok(Model {
            config: cfg.clone(),
            encoder,
            decoder,
            seed,
            params: pb.into_params(),
        })
    }

    /// Full forward pass: channel-last volume `[H, W, D, 2]` to a
    /// probability volume `[H, W, D, out_channels]`.
    pub fn forward(&self, volume: &Tensor) -> Result<Tensor> {
        if !volume.all_finite() {
            return Err(Error::NonFinite {
                context: "forward input".into(),
            });
        }
        let pyramid = encode(volume, &self.encoder, &self.config)?;
        decode(&pyramid, &self.decoder, &self.config)
    }

    pub fn parameters(&self) -> &[Parameter] {
        &self.params
    }

    pub fn dtype(&self) -> DType {
        self.params[0].tensor.dtype()
    }

    pub fn zero_grads(&self) {
        for p in &self.params {
            p.tensor.zero_grad();
        }
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    /// Counts grouped by the first two name segments
    /// (`encoder.stage1`, `decoder.fuse0`, ...), in sorted order.
    pub fn param_count_by_module(&self) -> Vec<(String, usize)> {
        let mut groups: BTreeMap<String, usize> = BTreeMap::new();
        for p in &self.params {
            let key: String = p.name.split('.').take(2).collect::<Vec<_>>().join(".");
            *groups.entry(key).or_default() += p.tensor.len();
        }
        groups.into_iter().collect()
    }

    pub fn layer_count(&self) -> usize {
        encoder_layer_count(&self.config.depths)
    }

    /// Copy of this model with the two branch parameter sets exchanged
    /// (`mod1` <-> `mod2` everywhere). Cross-modal mode only.
    pub fn swapped_branches(&self) -> Result<Model> {
        if self.config.block_mode != BlockMode::CrossModal {
            return Err(Error::Config(
                "branch swap only applies to the cross-modal mode".into(),
            ));
        }
        let swapped = Model::build(&self.config, self.seed, self.dtype())?;
        for p in swapped.parameters() {
            let source_name = if p.name.contains(".mod1.") {
                p.name.replace(".mod1.", ".mod2.")
            } else if p.name.contains(".mod2.") {
                p.name.replace(".mod2.", ".mod1.")
            } else {
                p.name.clone()
            };
            let source = self
                .params
                .iter()
                .find(|q| q.name == source_name)
                .ok_or_else(|| Error::Config(format!("missing parameter {source_name}")))?;
            p.tensor.set_data(source.tensor.storage_clone())?;
        }
        Ok(swapped)
    }
}

// ---------------------------------------------------------------------------
// checkpointing
// ---------------------------------------------------------------------------

pub const MANIFEST_FILE: &str = "model.manifest.json";
pub const PAYLOAD_FILE: &str = "model.bin";

#[derive(Debug, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: DType,
    /// Byte offset into the payload.
    pub offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub endianness: String,
    pub config: SwinCrossConfig,
    pub seed: u64,
    pub parameters: Vec<ManifestEntry>,
}

fn storage_to_le_bytes(s: &Storage) -> Vec<u8> {
    match s {
        Storage::F32(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
        Storage::F64(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
    }
}

fn storage_from_le_bytes(dtype: DType, bytes: &[u8]) -> Storage {
    match dtype {
        DType::F32 => Storage::F32(
            bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect(),
        ),
        DType::F64 => Storage::F64(
            bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes([c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]]))
                .collect(),
        ),
    }
}

/// Writes `0.tmp`-then-rename so readers never observe partial files.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

impl Model {
    /// Writes `model.manifest.json` + `model.bin` into `dir`.
    pub fn save_checkpoint(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut entries = Vec::with_capacity(self.params.len());
        let mut payload = Vec::new();
        for p in &self.params {
            let data = p.tensor.storage_clone();
            entries.push(ManifestEntry {
                name: p.name.clone(),
                shape: p.tensor.dims().to_vec(),
                dtype: data.dtype(),
                offset: payload.len() as u64,
            });
            payload.extend(storage_to_le_bytes(&data));
        }
        let manifest = CheckpointManifest {
            endianness: "little".into(),
            config: self.config.clone(),
            seed: self.seed,
            parameters: entries,
        };
        write_atomic(&dir.join(PAYLOAD_FILE), &payload)?;
        write_atomic(
            &dir.join(MANIFEST_FILE),
            serde_json::to_string_pretty(&manifest)?.as_bytes(),
        )?;
        Ok(())
    }

    /// Rebuilds a model from a checkpoint directory. When `expected` is
    /// given, the stored config must match it exactly.
    pub fn load_checkpoint(dir: &Path, expected: Option<&SwinCrossConfig>) -> Result<Model> {
        let manifest_path = dir.join(MANIFEST_FILE);
        let manifest: CheckpointManifest = serde_json::from_str(
            &std::fs::read_to_string(&manifest_path).map_err(|e| {
                Error::Checkpoint(format!("cannot read {}: {e}", manifest_path.display()))
            })?,
        )?;
        if manifest.endianness != "little" {
            return Err(Error::Checkpoint(format!(
                "unsupported endianness {:?}",
                manifest.endianness
            )));
        }
        if let Some(cfg) = expected {
            if *cfg != manifest.config {
                return Err(Error::Checkpoint(
                    "manifest config does not match the requested config".into(),
                ));
            }
        }
        let dtype = manifest
            .parameters
            .first()
            .map(|e| e.dtype)
            .unwrap_or(DType::F32);
        let model = Model::build(&manifest.config, manifest.seed, dtype)?;
        if model.params.len() != manifest.parameters.len() {
            return Err(Error::Checkpoint(format!(
                "manifest lists {} parameters, model has {}",
                manifest.parameters.len(),
                model.params.len()
            )));
        }

        let mut payload = Vec::new();
        std::fs::File::open(dir.join(PAYLOAD_FILE))
            .map_err(|e| Error::Checkpoint(format!("cannot open payload: {e}")))?
            .read_to_end(&mut payload)?;
        let expected_len: u64 = manifest
            .parameters
            .iter()
            .map(|e| (e.shape.iter().product::<usize>() * e.dtype.size_bytes()) as u64)
            .sum();
        if payload.len() as u64 != expected_len {
            return Err(Error::Checkpoint(format!(
                "payload holds {} bytes, manifest requires {expected_len}",
                payload.len()
            )));
        }

        for (p, entry) in model.params.iter().zip(&manifest.parameters) {
            if p.name != entry.name || p.tensor.dims() != entry.shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "parameter mismatch: model has {} {:?}, manifest lists {} {:?}",
                    p.name,
                    p.tensor.dims(),
                    entry.name,
                    entry.shape
                )));
            }
            let nbytes = p.tensor.len() * entry.dtype.size_bytes();
            let start = entry.offset as usize;
            let end = start + nbytes;
            if end > payload.len() {
                return Err(Error::Checkpoint(format!(
                    "payload truncated at parameter {}",
                    entry.name
                )));
            }
            p.tensor
                .set_data(storage_from_le_bytes(entry.dtype, &payload[start..end]))?;
        }
        Ok(model)
    }
}

// ---------------------------------------------------------------------------
// attention cost accounting
// ---------------------------------------------------------------------------

/// Closed-form multiply-add count of one windowed attention operation on
/// `t` tokens with window volume `m3`: `4 t C^2` projections plus
/// `2 m^3 t C` score/value products.
pub fn windowed_attention_madds(t: u64, c: u64, m3: u64) -> u64 {
    4 * t * c * c + 2 * m3 * t * c
}

/// Dense counterpart: the window spans all `t` tokens.
pub fn dense_attention_madds(t: u64, c: u64) -> u64 {
    windowed_attention_madds(t, c, t)
}

#[derive(Debug, Clone, Serialize)]
pub struct StageCost {
    pub stage: usize,
    /// Token grid edge lengths at this stage before padding.
    pub resolution: (usize, usize, usize),
    pub channels: usize,
    pub effective_window: usize,
    /// Tokens after padding to a window multiple (what the windowed path
    /// actually processes).
    pub padded_tokens: usize,
    pub tokens: usize,
    pub windowed_madds: u64,
    pub dense_madds: u64,
}

/// Per-stage multiply-add counts for one attention operation under the
/// windowed and dense regimes, for an input volume of `resolution`.
pub fn attention_cost(cfg: &SwinCrossConfig, resolution: (usize, usize, usize)) -> Result<Vec<StageCost>> {
    cfg.validate()?;
    let half = |v: usize| v.div_ceil(2).max(1);
    let mut r = (
        half(resolution.0),
        half(resolution.1),
        half(resolution.2),
    ); // embedding grid
    let mut out = Vec::new();
    for stage in 1..=cfg.depths.len() {
        r = (half(r.0), half(r.1), half(r.2));
        let channels = cfg.embed_dim << stage;
        let m = effective_window(r, cfg.window_size);
        let pad = |v: usize| v.div_ceil(m) * m;
        let padded = pad(r.0) * pad(r.1) * pad(r.2);
        let tokens = r.0 * r.1 * r.2;
        out.push(StageCost {
            stage,
            resolution: r,
            channels,
            effective_window: m,
            padded_tokens: padded,
            tokens,
            windowed_madds: windowed_attention_madds(
                padded as u64,
                channels as u64,
                (m * m * m) as u64,
            ),
            dense_madds: dense_attention_madds(tokens as u64, channels as u64),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::{window_self_attention, AttentionParams};
    use crate::tensor::with_madd_count;
    use crate::windowing::{window_partition, TokenGrid};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn default_config_is_valid() {
        SwinCrossConfig::default().validate().unwrap();
        SwinCrossConfig::tiny().validate().unwrap();
        SwinCrossConfig::toy().validate().unwrap();
    }

    #[test]
    fn invalid_heads_rejected() {
        let cfg = SwinCrossConfig {
            heads: vec![5, 6, 12, 24],
            ..SwinCrossConfig::default()
        };
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("5"), "message should name the offender: {err}");
    }

    #[test]
    fn odd_depths_rejected() {
        let cfg = SwinCrossConfig {
            depths: vec![2, 3, 2, 2],
            ..SwinCrossConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn config_json_roundtrip_and_defaults() {
        let cfg = SwinCrossConfig::from_json("{}").unwrap();
        assert_eq!(cfg, SwinCrossConfig::default());
        let cfg = SwinCrossConfig::from_json(r#"{"embed_dim": 8, "heads": [1,2,4,8]}"#).unwrap();
        assert_eq!(cfg.embed_dim, 8);
        assert!(SwinCrossConfig::from_json(r#"{"unknown_field": 3}"#).is_err());
    }

    #[test]
    fn build_is_deterministic() {
        let cfg = SwinCrossConfig::tiny();
        let a = Model::build(&cfg, 42, DType::F32).unwrap();
        let b = Model::build(&cfg, 42, DType::F32).unwrap();
        assert_eq!(a.param_count(), b.param_count());
        for (x, y) in a.parameters().iter().zip(b.parameters()) {
            assert_eq!(x.name, y.name);
            assert_eq!(x.tensor.to_f32_vec(), y.tensor.to_f32_vec());
        }
        let c = Model::build(&cfg, 43, DType::F32).unwrap();
        assert_eq!(a.param_count(), c.param_count(), "count must not depend on seed");
        assert_ne!(
            a.parameters()[0].tensor.to_f32_vec(),
            c.parameters()[0].tensor.to_f32_vec()
        );
    }

    #[test]
    fn layer_count_matches_depths() {
        let model = Model::build(&SwinCrossConfig::tiny(), 0, DType::F32).unwrap();
        assert_eq!(model.layer_count(), 8);
        let default_depths = Model::build(
            &SwinCrossConfig {
                embed_dim: 2,
                heads: vec![1, 1, 1, 1],
                ..SwinCrossConfig::default()
            },
            0,
            DType::F32,
        )
        .unwrap();
        assert_eq!(default_depths.layer_count(), 10);
    }

    #[test]
    fn param_count_matches_analytic_formula() {
        // Hand-derived for the tiny config (C=8, depths [2,2,2,2],
        // heads [1,2,4,8], window 2, mlp ratio 2, bias table on).
        let cfg = SwinCrossConfig::tiny();
        let model = Model::build(&cfg, 1, DType::F32).unwrap();
        let c = cfg.embed_dim;
        let w3 = 27usize; // (2*2-1)^3 bias table rows

        // per-branch patch embed: [C,1,2,2,2] + [C]
        let embed = 2 * (c * 8 + c);
        let mut encoder = embed;
        for i in 0..4 {
            let cin = c << i;
            let dim = 2 * cin;
            let hidden = dim * 2;
            // merge per branch: LN(8cin) twice + reduction [8cin, 2cin]
            let merge = 2 * (2 * (8 * cin) + 8 * cin * 2 * cin);
            // one layer: LN1 + attn(qkv w/b + proj w/b + table) + LN2 + mlp
            let attn = dim * 3 * dim + 3 * dim + dim * dim + dim + w3 * cfg.heads[i];
            let mlp = dim * hidden + hidden + hidden * dim + dim;
            let layer = 2 * dim + attn + 2 * dim + mlp;
            // depth 2 = one pair = 2 layers, per branch
            let blocks = 2 * 2 * layer;
            encoder += merge + blocks;
        }

        let dch = [c, c, 2 * c, 4 * c, 8 * c, 16 * c];
        let inch = [2, c, 2 * c, 4 * c, 8 * c, 16 * c];
        let res = |ci: usize, co: usize| -> usize {
            let mut n = co * ci * 27 + co + 2 * co; // conv1 + bias + IN
            n += co * co * 27 + co + 2 * co; // conv2 + bias + IN
            if ci != co {
                n += co * ci + co + 2 * co; // 1x1x1 shortcut + IN
            }
            n
        };
        let mut decoder = 0;
        for l in 0..6 {
            decoder += res(inch[l], dch[l]);
        }
        for l in 0..5 {
            decoder += dch[l + 1] * dch[l] * 8 + dch[l]; // deconv + bias
            decoder += res(2 * dch[l], dch[l]);
        }
        decoder += dch[0] * cfg.out_channels + cfg.out_channels; // head

        assert_eq!(model.param_count(), encoder + decoder);
    }

    #[test]
    fn single_linear_param_count() {
        let mut pb = ParamBuilder::new(0, DType::F32);
        let w = pb.trunc_normal("w", &[8, 4], 0.02).unwrap();
        let b = pb.zeros("b", &[4]).unwrap();
        assert_eq!(w.len() + b.len(), 36);
    }

    #[test]
    fn checkpoint_roundtrip_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SwinCrossConfig::tiny();
        let model = Model::build(&cfg, 5, DType::F32).unwrap();
        model.save_checkpoint(dir.path()).unwrap();
        let loaded = Model::load_checkpoint(dir.path(), Some(&cfg)).unwrap();
        for (a, b) in model.parameters().iter().zip(loaded.parameters()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.tensor.to_f32_vec(), b.tensor.to_f32_vec());
        }
    }

    #[test]
    fn checkpoint_truncated_payload_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SwinCrossConfig::tiny();
        let model = Model::build(&cfg, 6, DType::F32).unwrap();
        model.save_checkpoint(dir.path()).unwrap();
        let payload = dir.path().join(PAYLOAD_FILE);
        let bytes = std::fs::read(&payload).unwrap();
        std::fs::write(&payload, &bytes[..bytes.len() - 16]).unwrap();
        let err = Model::load_checkpoint(dir.path(), Some(&cfg)).unwrap_err();
        assert!(err.to_string().contains("bytes"), "{err}");
    }

    #[test]
    fn checkpoint_config_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let model = Model::build(&SwinCrossConfig::tiny(), 7, DType::F32).unwrap();
        model.save_checkpoint(dir.path()).unwrap();
        let other = SwinCrossConfig {
            depths: vec![2, 4, 2, 2],
            ..SwinCrossConfig::tiny()
        };
        assert!(Model::load_checkpoint(dir.path(), Some(&other)).is_err());
    }

    #[test]
    fn forward_shape_and_range_small() {
        let cfg = SwinCrossConfig::tiny();
        let model = Model::build(&cfg, 8, DType::F32).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let data: Vec<f32> = (0..16 * 16 * 16 * 2).map(|_| rng.gen_range(0.0..1.0)).collect();
        let vol = Tensor::from_f32(&[16, 16, 16, 2], data).unwrap();
        let guard = crate::tensor::NoGradGuard::new();
        let out = model.forward(&vol).unwrap();
        drop(guard);
        assert_eq!(out.dims(), &[16, 16, 16, 1]);
        assert!(out.to_f64_vec().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn forward_rejects_non_finite_input() {
        let cfg = SwinCrossConfig::tiny();
        let model = Model::build(&cfg, 10, DType::F32).unwrap();
        let mut data = vec![0.0f32; 16 * 16 * 16 * 2];
        data[5] = f32::NAN;
        let vol = Tensor::from_f32(&[16, 16, 16, 2], data).unwrap();
        assert!(model.forward(&vol).is_err());
    }

    #[test]
    fn swapped_branches_with_swapped_input_match_bitwise() {
        let cfg = SwinCrossConfig {
            embed_dim: 4,
            depths: vec![2, 2, 2, 2],
            heads: vec![1, 2, 4, 8],
            window_size: 2,
            shift_size: 1,
            mlp_ratio: 2.0,
            ..SwinCrossConfig::default()
        };
        let model = Model::build(&cfg, 11, DType::F32).unwrap();
        let swapped = model.swapped_branches().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let data: Vec<f32> = (0..8 * 8 * 8 * 2).map(|_| rng.gen_range(0.0..1.0)).collect();
        let vol = Tensor::from_f32(&[8, 8, 8, 2], data).unwrap();
        let vol_swapped = {
            let a = vol.slice(&[(0, 8, 1), (0, 8, 1), (0, 8, 1), (0, 1, 1)]).unwrap();
            let b = vol.slice(&[(0, 8, 1), (0, 8, 1), (0, 8, 1), (1, 2, 1)]).unwrap();
            Tensor::concat(&[b, a], 3).unwrap()
        };
        let _guard = crate::tensor::NoGradGuard::new();
        let out = model.forward(&vol).unwrap();
        let out_swapped = swapped.forward(&vol_swapped).unwrap();
        assert_eq!(out.to_f32_vec(), out_swapped.to_f32_vec());
    }

    #[test]
    fn windowed_cost_equals_dense_for_single_window() {
        let t = 64u64;
        let c = 16u64;
        assert_eq!(windowed_attention_madds(t, c, t), dense_attention_madds(t, c));
    }

    #[test]
    fn doubling_tokens_scales_terms_as_expected() {
        let (c, m3) = (8u64, 8u64);
        let attn = |t: u64| windowed_attention_madds(t, c, m3) - 4 * t * c * c;
        assert_eq!(attn(128), 2 * attn(64));
        let dense_attn = |t: u64| dense_attention_madds(t, c) - 4 * t * c * c;
        assert_eq!(dense_attn(128), 4 * dense_attn(64));
    }

    #[test]
    fn instrumented_attention_matches_closed_form() {
        for edge in [4usize, 8] {
            let c = 8;
            let m = 2;
            let mut pb = ParamBuilder::new(13, DType::F32);
            let p = AttentionParams::init(&mut pb, "a", c, 2, m, false).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(14);
            let data: Vec<f32> = (0..edge * edge * edge * c)
                .map(|_| rng.gen_range(-1.0..1.0))
                .collect();
            let grid =
                TokenGrid::new(Tensor::from_f32(&[edge, edge, edge, c], data).unwrap()).unwrap();

            // windowed: partition into m^3 windows
            let wb = window_partition(&grid, m).unwrap();
            let (_, counted) = with_madd_count(|| window_self_attention(&wb, &p, None).unwrap());
            let t = (edge * edge * edge) as u64;
            assert_eq!(counted, windowed_attention_madds(t, c as u64, (m * m * m) as u64));

            // dense: a single window spanning the whole grid
            let dense_p = AttentionParams::init(
                &mut ParamBuilder::new(15, DType::F32),
                "d",
                c,
                2,
                edge,
                false,
            )
            .unwrap();
            let db = window_partition(&grid, edge).unwrap();
            let (_, counted) =
                with_madd_count(|| window_self_attention(&db, &dense_p, None).unwrap());
            assert_eq!(counted, dense_attention_madds(t, c as u64));
        }
    }

    #[test]
    fn stage_costs_follow_schedule() {
        let cfg = SwinCrossConfig {
            embed_dim: 8,
            heads: vec![1, 2, 4, 8],
            window_size: 2,
            shift_size: 1,
            ..SwinCrossConfig::default()
        };
        let costs = attention_cost(&cfg, (32, 32, 32)).unwrap();
        assert_eq!(costs.len(), 4);
        assert_eq!(costs[0].resolution, (8, 8, 8));
        assert_eq!(costs[0].channels, 16);
        assert_eq!(costs[3].resolution, (1, 1, 1));
        // windowed attention term scales linearly in T, dense quadratically
        let g = |c: &StageCost| (c.windowed_madds, c.dense_madds);
        let (w0, d0) = g(&costs[0]);
        let (w1, d1) = g(&costs[1]);
        assert!(w0 < d0);
        assert!(w1 < w0 && d1 < d0);
    }
}
