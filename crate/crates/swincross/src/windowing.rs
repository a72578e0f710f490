//! 3D window partitioning, cyclic shifting, padding, and the additive
//! attention mask used by shifted-window layers.
//!
//! Conventions, fixed for reproducibility:
//! - windows are enumerated row-major over `(H'/M, W'/M, D'/M)`;
//! - tokens within a window are row-major over the `M^3` cube;
//! - `cyclic_shift` rolls content by `-s` along each spatial axis (element
//!   at post-shift position `p` originates from `(p + s) mod dim`), and
//!   `cyclic_unshift` is its exact inverse.

use crate::error::{Error, Result};
use crate::tensor::{DType, Storage, Tensor};

/// Additive mask offset for forbidden token pairs. Kept finite so masked
/// logits stay well-defined; `exp(-1e9)` underflows to zero.
pub const MASK_OFFSET: f64 = -1e9;

/// Token grid `[H', W', D', C]` with its spatial resolution.
#[derive(Debug, Clone)]
pub struct TokenGrid {
    pub tensor: Tensor,
    pub resolution: (usize, usize, usize),
}

impl TokenGrid {
    pub fn new(tensor: Tensor) -> Result<TokenGrid> {
        if tensor.rank() != 4 {
            return Err(Error::invalid(
                "TokenGrid",
                format!("expected [H', W', D', C], got {:?}", tensor.dims()),
            ));
        }
        let d = tensor.dims();
        let resolution = (d[0], d[1], d[2]);
        Ok(TokenGrid { tensor, resolution })
    }

    pub fn channels(&self) -> usize {
        self.tensor.dims()[3]
    }
}

/// Windows of a partitioned grid: `[n_windows, M^3, C]`.
#[derive(Debug, Clone)]
pub struct WindowBatch {
    pub tensor: Tensor,
    pub window_size: usize,
    /// Resolution of the (padded) grid the windows were cut from.
    pub source_resolution: (usize, usize, usize),
}

impl WindowBatch {
    pub fn n_windows(&self) -> usize {
        self.tensor.dims()[0]
    }

    pub fn tokens_per_window(&self) -> usize {
        self.tensor.dims()[1]
    }

    pub fn channels(&self) -> usize {
        self.tensor.dims()[2]
    }
}

/// Per-window additive bias `[n_windows, M^3, M^3]` whose entries are `0`
/// for token pairs from the same pre-shift region and [`MASK_OFFSET`]
/// otherwise.
#[derive(Debug, Clone)]
pub struct ShiftMask {
    pub tensor: Tensor,
    pub window_size: usize,
}

/// Zero-pads each spatial extent up to the next multiple of `m` at the high
/// end. A no-op when already divisible; [`crop_to_resolution`] inverts it.
pub fn pad_to_window_multiple(g: &TokenGrid, m: usize) -> Result<TokenGrid> {
    if m == 0 {
        return Err(Error::invalid("pad_to_window_multiple", "window size must be positive"));
    }
    let (h, w, d) = g.resolution;
    let target = |v: usize| v.div_ceil(m) * m;
    let (th, tw, td) = (target(h), target(w), target(d));
    if (th, tw, td) == (h, w, d) {
        return Ok(g.clone());
    }
    let c = g.channels();
    let dtype = g.tensor.dtype();
    let mut t = g.tensor.clone();
    if th > h {
        let pad = Tensor::zeros(&[th - h, w, d, c], dtype);
        t = Tensor::concat(&[t, pad], 0)?;
    }
    if tw > w {
        let pad = Tensor::zeros(&[th, tw - w, d, c], dtype);
        t = Tensor::concat(&[t, pad], 1)?;
    }
    if td > d {
        let pad = Tensor::zeros(&[th, tw, td - d, c], dtype);
        t = Tensor::concat(&[t, pad], 2)?;
    }
    TokenGrid::new(t)
}

/// Crops a grid back to `resolution` (inverse of the zero-padding).
pub fn crop_to_resolution(g: &TokenGrid, resolution: (usize, usize, usize)) -> Result<TokenGrid> {
    let (h, w, d) = resolution;
    let (gh, gw, gd) = g.resolution;
    if h > gh || w > gw || d > gd {
        return Err(Error::invalid(
            "crop_to_resolution",
            format!("cannot crop {:?} up to {:?}", g.resolution, resolution),
        ));
    }
    if (h, w, d) == (gh, gw, gd) {
        return Ok(g.clone());
    }
    let c = g.channels();
    let t = g
        .tensor
        .slice(&[(0, h, 1), (0, w, 1), (0, d, 1), (0, c, 1)])?;
    TokenGrid::new(t)
}

/// Cuts the grid into non-overlapping `m^3` windows. Every spatial extent
/// must be divisible by `m`; callers pad first.
pub fn window_partition(g: &TokenGrid, m: usize) -> Result<WindowBatch> {
    let (h, w, d) = g.resolution;
    if m == 0 || h % m != 0 || w % m != 0 || d % m != 0 {
        return Err(Error::invalid(
            "window_partition",
            format!("resolution {:?} is not divisible by window {m}", g.resolution),
        ));
    }
    let c = g.channels();
    let (nh, nw, nd) = (h / m, w / m, d / m);
    let t = g
        .tensor
        .reshape(&[nh, m, nw, m, nd, m, c])?
        .permute(&[0, 2, 4, 1, 3, 5, 6])?
        .reshape(&[nh * nw * nd, m * m * m, c])?;
    Ok(WindowBatch {
        tensor: t,
        window_size: m,
        source_resolution: g.resolution,
    })
}

/// Exact inverse of [`window_partition`].
pub fn window_reverse(wb: &WindowBatch) -> Result<TokenGrid> {
    let m = wb.window_size;
    let (h, w, d) = wb.source_resolution;
    let (nh, nw, nd) = (h / m, w / m, d / m);
    if nh * nw * nd != wb.n_windows() || wb.tokens_per_window() != m * m * m {
        return Err(Error::invalid(
            "window_reverse",
            format!(
                "{} windows of {} tokens inconsistent with resolution {:?} and window {m}",
                wb.n_windows(),
                wb.tokens_per_window(),
                wb.source_resolution
            ),
        ));
    }
    let c = wb.channels();
    let t = wb
        .tensor
        .reshape(&[nh, nw, nd, m, m, m, c])?
        .permute(&[0, 3, 1, 4, 2, 5, 6])?
        .reshape(&[h, w, d, c])?;
    TokenGrid::new(t)
}

/// Torus roll by `-shift` along each spatial axis.
pub fn cyclic_shift(g: &TokenGrid, shift: usize) -> Result<TokenGrid> {
    shift_impl(g, shift, true)
}

/// Inverse of [`cyclic_shift`]: torus roll by `+shift`.
pub fn cyclic_unshift(g: &TokenGrid, shift: usize) -> Result<TokenGrid> {
    shift_impl(g, shift, false)
}

fn shift_impl(g: &TokenGrid, shift: usize, forward: bool) -> Result<TokenGrid> {
    let (h, w, d) = g.resolution;
    let min_dim = h.min(w).min(d);
    if shift >= min_dim {
        return Err(Error::invalid(
            "cyclic_shift",
            format!("shift {shift} out of range for resolution {:?}", g.resolution),
        ));
    }
    if shift == 0 {
        return Ok(g.clone());
    }
    let s = if forward { -(shift as i64) } else { shift as i64 };
    let t = g.tensor.roll(&[s, s, s, 0])?;
    TokenGrid::new(t)
}

/// Pre-shift region id of each post-shift grid position, following the
/// three-interval scheme per axis (up to 27 distinct regions in 3D).
fn region_ids(resolution: (usize, usize, usize), m: usize, s: usize) -> Vec<u8> {
    let (h, w, d) = resolution;
    let zone = |idx: usize, n: usize| -> u8 {
        if idx < n - m {
            0
        } else if idx < n - s {
            1
        } else {
            2
        }
    };
    let mut ids = Vec::with_capacity(h * w * d);
    for x in 0..h {
        let zx = zone(x, h);
        for y in 0..w {
            let zy = zone(y, w);
            for z in 0..d {
                ids.push(zx * 9 + zy * 3 + zone(z, d));
            }
        }
    }
    ids
}

/// Builds the additive attention mask for a shifted layer on a grid of
/// `resolution` (already padded to a multiple of `m`), shift `s`.
pub fn compute_shift_mask(
    resolution: (usize, usize, usize),
    m: usize,
    s: usize,
    dtype: DType,
) -> Result<ShiftMask> {
    let (h, w, d) = resolution;
    if m == 0 || h % m != 0 || w % m != 0 || d % m != 0 {
        return Err(Error::invalid(
            "compute_shift_mask",
            format!("resolution {resolution:?} is not divisible by window {m}"),
        ));
    }
    if s == 0 || s >= m {
        return Err(Error::invalid(
            "compute_shift_mask",
            format!("shift {s} must satisfy 0 < s < window {m}"),
        ));
    }
    let ids = region_ids(resolution, m, s);
    let (nh, nw, nd) = (h / m, w / m, d / m);
    let n_windows = nh * nw * nd;
    let tokens = m * m * m;

    // Gather each window's region ids in token order, then compare pairs.
    let mut window_ids = vec![0u8; tokens];
    let mut mask = vec![0.0f64; n_windows * tokens * tokens];
    let mut wi = 0;
    for bx in 0..nh {
        for by in 0..nw {
            for bz in 0..nd {
                let mut t = 0;
                for ix in 0..m {
                    for iy in 0..m {
                        for iz in 0..m {
                            let gx = bx * m + ix;
                            let gy = by * m + iy;
                            let gz = bz * m + iz;
                            window_ids[t] = ids[(gx * w + gy) * d + gz];
                            t += 1;
                        }
                    }
                }
                let base = wi * tokens * tokens;
                for i in 0..tokens {
                    for j in 0..tokens {
                        if window_ids[i] != window_ids[j] {
                            mask[base + i * tokens + j] = MASK_OFFSET;
                        }
                    }
                }
                wi += 1;
            }
        }
    }
    let storage = match dtype {
        DType::F32 => Storage::F32(mask.iter().map(|&v| v as f32).collect()),
        DType::F64 => Storage::F64(mask),
    };
    let tensor = Tensor::from_storage(&[n_windows, tokens, tokens], storage)?;
    Ok(ShiftMask {
        tensor,
        window_size: m,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid_from_seed(resolution: (usize, usize, usize), c: usize, seed: u64) -> TokenGrid {
        let (h, w, d) = resolution;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f32> = (0..h * w * d * c).map(|_| rng.gen_range(-1.0..1.0)).collect();
        TokenGrid::new(Tensor::from_f32(&[h, w, d, c], data).unwrap()).unwrap()
    }

    #[test]
    fn pad_noop_when_divisible() {
        let g = grid_from_seed((4, 4, 4), 3, 0);
        let p = pad_to_window_multiple(&g, 2).unwrap();
        assert_eq!(p.resolution, (4, 4, 4));
        assert_eq!(p.tensor.to_f32_vec(), g.tensor.to_f32_vec());
    }

    #[test]
    fn pad_fills_high_end_with_zeros() {
        let g = grid_from_seed((3, 3, 3), 2, 1);
        let p = pad_to_window_multiple(&g, 2).unwrap();
        assert_eq!(p.resolution, (4, 4, 4));
        for x in 0..4 {
            for y in 0..4 {
                for z in 0..4 {
                    for c in 0..2 {
                        let v = p.tensor.at(&[x, y, z, c]);
                        if x < 3 && y < 3 && z < 3 {
                            assert_eq!(v, g.tensor.at(&[x, y, z, c]));
                        } else {
                            assert_eq!(v, 0.0);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn pad_crop_roundtrip_bitwise() {
        for seed in 0..10 {
            let g = grid_from_seed((3, 5, 6), 2, seed);
            let p = pad_to_window_multiple(&g, 4).unwrap();
            let back = crop_to_resolution(&p, g.resolution).unwrap();
            assert_eq!(back.tensor.to_f32_vec(), g.tensor.to_f32_vec());
        }
    }

    #[test]
    fn partition_counts() {
        let g = grid_from_seed((2, 2, 2), 3, 2);
        let wb = window_partition(&g, 2).unwrap();
        assert_eq!(wb.n_windows(), 1);
        assert_eq!(wb.tokens_per_window(), 8);

        let g = grid_from_seed((4, 4, 4), 3, 3);
        let wb = window_partition(&g, 2).unwrap();
        assert_eq!(wb.n_windows(), 8);
        assert_eq!(wb.tokens_per_window(), 8);
    }

    #[test]
    fn partition_rejects_nondivisible() {
        let g = grid_from_seed((3, 4, 4), 1, 4);
        assert!(window_partition(&g, 2).is_err());
    }

    #[test]
    fn partition_reverse_roundtrip_bitwise() {
        for seed in 0..10 {
            let g = grid_from_seed((4, 6, 2), 5, seed);
            let wb = window_partition(&g, 2).unwrap();
            let back = window_reverse(&wb).unwrap();
            assert_eq!(back.tensor.to_f32_vec(), g.tensor.to_f32_vec());
        }
    }

    #[test]
    fn partition_layout_matches_index_map() {
        // Fill the grid with its own flat index so each token is unique,
        // then recompute the expected placement with explicit loops.
        let (h, w, d, c) = (4, 4, 4, 1);
        let data: Vec<f32> = (0..h * w * d).map(|v| v as f32).collect();
        let g = TokenGrid::new(Tensor::from_f32(&[h, w, d, c], data).unwrap()).unwrap();
        let m = 2;
        let wb = window_partition(&g, m).unwrap();
        let (nh, nw, nd) = (h / m, w / m, d / m);
        for bx in 0..nh {
            for by in 0..nw {
                for bz in 0..nd {
                    let wi = (bx * nw + by) * nd + bz;
                    for ix in 0..m {
                        for iy in 0..m {
                            for iz in 0..m {
                                let t = (ix * m + iy) * m + iz;
                                let expect = (((bx * m + ix) * w + (by * m + iy)) * d
                                    + (bz * m + iz)) as f64;
                                assert_eq!(wb.tensor.at(&[wi, t, 0]), expect);
                            }
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn shift_zero_is_identity() {
        let g = grid_from_seed((3, 3, 3), 2, 5);
        let s = cyclic_shift(&g, 0).unwrap();
        assert_eq!(s.tensor.to_f32_vec(), g.tensor.to_f32_vec());
    }

    #[test]
    fn shift_unshift_roundtrip_bitwise() {
        for seed in 0..10 {
            let g = grid_from_seed((4, 5, 6), 3, seed);
            let s = cyclic_shift(&g, 2).unwrap();
            let back = cyclic_unshift(&s, 2).unwrap();
            assert_eq!(back.tensor.to_f32_vec(), g.tensor.to_f32_vec());
        }
    }

    #[test]
    fn shift_matches_modular_index_map() {
        let data: Vec<f32> = (0..8).map(|v| v as f32).collect();
        let g = TokenGrid::new(Tensor::from_f32(&[2, 2, 2, 1], data).unwrap()).unwrap();
        let s = 1;
        let shifted = cyclic_shift(&g, s).unwrap();
        for x in 0..2 {
            for y in 0..2 {
                for z in 0..2 {
                    // post-shift position p holds the original (p + s) mod n
                    let expect = g.tensor.at(&[(x + s) % 2, (y + s) % 2, (z + s) % 2, 0]);
                    assert_eq!(shifted.tensor.at(&[x, y, z, 0]), expect);
                }
            }
        }
    }

    #[test]
    fn shift_out_of_range_rejected() {
        let g = grid_from_seed((2, 2, 2), 1, 6);
        assert!(cyclic_shift(&g, 2).is_err());
    }

    #[test]
    fn mask_interior_windows_are_zero() {
        // On an 8^3 grid with window 2 and shift 1, windows that sit fully
        // inside zone 0 carry an all-zero mask.
        let mask = compute_shift_mask((8, 8, 8), 2, 1, DType::F32).unwrap();
        let v = mask.tensor.to_f64_vec();
        let tokens = 8;
        // window (0,0,0) spans positions 0..2 on each axis: zone 0 only
        assert!(v[..tokens * tokens].iter().all(|&x| x == 0.0));
    }

    #[test]
    fn mask_matches_wrap_status_oracle() {
        // Independent route: token pairs may attend iff their original
        // (pre-shift) positions have identical wrap status on every axis.
        let (res, m, s) = ((4usize, 4usize, 4usize), 2usize, 1usize);
        let mask = compute_shift_mask(res, m, s, DType::F64).unwrap();
        let dims = [res.0, res.1, res.2];
        let (nh, nw, nd) = (res.0 / m, res.1 / m, res.2 / m);
        let tokens = m * m * m;
        let token_coords = |wi: usize, t: usize| -> [usize; 3] {
            let bz = wi % nd;
            let by = (wi / nd) % nw;
            let bx = wi / (nd * nw);
            let iz = t % m;
            let iy = (t / m) % m;
            let ix = t / (m * m);
            [bx * m + ix, by * m + iy, bz * m + iz]
        };
        for wi in 0..nh * nw * nd {
            for i in 0..tokens {
                for j in 0..tokens {
                    let pi = token_coords(wi, i);
                    let pj = token_coords(wi, j);
                    let same_region = (0..3).all(|ax| {
                        let wrapped_i = pi[ax] + s >= dims[ax];
                        let wrapped_j = pj[ax] + s >= dims[ax];
                        wrapped_i == wrapped_j
                    });
                    let got = mask.tensor.at(&[wi, i, j]);
                    if same_region {
                        assert_eq!(got, 0.0, "window {wi} pair ({i},{j}) wrongly masked");
                    } else {
                        assert_eq!(got, MASK_OFFSET, "window {wi} pair ({i},{j}) not masked");
                    }
                }
            }
        }
    }

    #[test]
    fn mask_is_symmetric() {
        for (res, m, s) in [((4, 4, 4), 2, 1), ((6, 6, 6), 3, 1), ((6, 6, 6), 3, 2), ((4, 8, 4), 4, 2)] {
            let mask = compute_shift_mask(res, m, s, DType::F32).unwrap();
            let tokens = m * m * m;
            let n_windows = mask.tensor.dims()[0];
            for wi in 0..n_windows {
                for i in 0..tokens {
                    for j in 0..i {
                        assert_eq!(
                            mask.tensor.at(&[wi, i, j]),
                            mask.tensor.at(&[wi, j, i]),
                            "asymmetry at window {wi} ({i},{j})"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn mask_shift_bounds_enforced() {
        assert!(compute_shift_mask((4, 4, 4), 2, 2, DType::F32).is_err());
        assert!(compute_shift_mask((4, 4, 4), 2, 0, DType::F32).is_err());
    }

    #[test]
    fn masked_softmax_suppresses_cross_region_weight() {
        let mask = compute_shift_mask((4, 4, 4), 2, 1, DType::F64).unwrap();
        let scores = Tensor::zeros(mask.tensor.dims(), DType::F64);
        let weights = scores
            .add(&mask.tensor)
            .unwrap()
            .softmax_lastdim()
            .unwrap();
        let m = mask.tensor.to_f64_vec();
        let w = weights.to_f64_vec();
        for (wv, mv) in w.iter().zip(&m) {
            if *mv != 0.0 {
                assert!(*wv < 1e-12, "masked weight {wv} too large");
            }
        }
    }
}
