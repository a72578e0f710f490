//! Raw numeric kernels shared by forward operators and their backward
//! counterparts. All reductions run in ascending index order so results are
//! bitwise reproducible; nothing here is parallel.

use super::Element;

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

pub fn map2<T: Element>(a: &[T], b: &[T], f: impl Fn(T, T) -> T) -> Vec<T> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

pub fn map1<T: Element>(a: &[T], f: impl Fn(T) -> T) -> Vec<T> {
    a.iter().map(|&x| f(x)).collect()
}

pub fn affine_map<T: Element>(a: &[T], mul: f64, add: f64) -> Vec<T> {
    let m = T::from_f64(mul);
    let c = T::from_f64(add);
    map1(a, |v| v * m + c)
}

pub fn recip_map<T: Element>(a: &[T]) -> Vec<T> {
    map1(a, |v| T::ONE / v)
}

pub fn clamp_map<T: Element>(a: &[T], lo: f64, hi: f64) -> Vec<T> {
    let l = T::from_f64(lo);
    let h = T::from_f64(hi);
    map1(a, |v| if v < l { l } else if v > h { h } else { v })
}

pub fn leaky_relu_map<T: Element>(a: &[T], slope: f64) -> Vec<T> {
    let s = T::from_f64(slope);
    map1(a, |v| if v > T::ZERO { v } else { v * s })
}

/// Zero buffer with the element type of `like`.
pub fn zeros_like_slice<T: Element>(_like: &[T], len: usize) -> Vec<T> {
    vec![T::ZERO; len]
}

pub fn sum_flat<T: Element>(a: &[T]) -> T {
    let mut acc = T::ZERO;
    for &v in a {
        acc += v;
    }
    acc
}

pub fn gelu<T: Element>(x: T) -> T {
    // tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))
    let c = T::from_f64(0.797_884_560_802_865_4);
    let a = T::from_f64(0.044_715);
    let half = T::from_f64(0.5);
    let u = c * (x + a * x * x * x);
    half * x * (T::ONE + u.tanh())
}

pub fn gelu_grad<T: Element>(x: T) -> T {
    let c = T::from_f64(0.797_884_560_802_865_4);
    let a = T::from_f64(0.044_715);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let sech2 = T::ONE - t * t;
    half * (T::ONE + t) + half * x * sech2 * c * (T::ONE + three * a * x * x)
}

pub fn sigmoid<T: Element>(x: T) -> T {
    // split on sign to avoid exp overflow
    if x >= T::ZERO {
        T::ONE / (T::ONE + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::ONE + e)
    }
}

// ---------------------------------------------------------------------------
// matrix multiply
// ---------------------------------------------------------------------------

/// `c[m,n] += a[m,k] @ b[k,n]`, all row-major.
pub fn gemm_nn_acc<T: Element>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for (kk, &aik) in a_row.iter().enumerate() {
            let b_row = &b[kk * n..(kk + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv = *cv + aik * bv;
            }
        }
    }
}

/// `c[k,n] += a[m,k]^T @ b[m,n]` (reduction over rows of `a`).
pub fn gemm_tn_acc<T: Element>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(c.len(), k * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let b_row = &b[i * n..(i + 1) * n];
        for (kk, &aik) in a_row.iter().enumerate() {
            let c_row = &mut c[kk * n..(kk + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv = *cv + aik * bv;
            }
        }
    }
}

/// Transposed copy of a row-major `[m, n]` matrix into `[n, m]`.
pub fn transpose2d<T: Element>(x: &[T], m: usize, n: usize) -> Vec<T> {
    debug_assert_eq!(x.len(), m * n);
    let mut out = vec![T::ZERO; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = x[i * n + j];
        }
    }
    out
}

// ---------------------------------------------------------------------------
// softmax over trailing dimension
// ---------------------------------------------------------------------------

pub fn softmax_rows<T: Element>(x: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::ZERO; rows * cols];
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let mut max = row[0];
        for &v in row.iter() {
            if v > max {
                max = v;
            }
        }
        let dst = &mut out[r * cols..(r + 1) * cols];
        let mut sum = T::ZERO;
        for (d, &v) in dst.iter_mut().zip(row) {
            let e = (v - max).exp();
            *d = e;
            sum += e;
        }
        let inv = T::ONE / sum;
        for d in dst.iter_mut() {
            *d = *d * inv;
        }
    }
    out
}

pub fn softmax_rows_backward<T: Element>(y: &[T], dy: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut dx = vec![T::ZERO; rows * cols];
    for r in 0..rows {
        let y_row = &y[r * cols..(r + 1) * cols];
        let dy_row = &dy[r * cols..(r + 1) * cols];
        let mut dot = T::ZERO;
        for (yv, dv) in y_row.iter().zip(dy_row) {
            dot += *yv * *dv;
        }
        let dst = &mut dx[r * cols..(r + 1) * cols];
        for ((d, &yv), &dv) in dst.iter_mut().zip(y_row).zip(dy_row) {
            *d = yv * (dv - dot);
        }
    }
    dx
}

// ---------------------------------------------------------------------------
// row normalization (layer norm / instance norm share the math; they differ
// in how the affine parameters index into the data)
// ---------------------------------------------------------------------------

/// Normalizes each of the `rows` contiguous rows of length `cols` to zero
/// mean and unit variance, then applies `gamma`/`beta`. When
/// `affine_per_row` is set the affine index is the row (instance norm over
/// `[C, spatial]`), otherwise it is the column (layer norm over `[N, C]`).
/// Returns `(y, mean, rstd)`.
pub fn norm_rows<T: Element>(
    x: &[T],
    rows: usize,
    cols: usize,
    gamma: &[T],
    beta: &[T],
    eps: f64,
    affine_per_row: bool,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let mut y = vec![T::ZERO; rows * cols];
    let mut mean = vec![T::ZERO; rows];
    let mut rstd = vec![T::ZERO; rows];
    let inv_cols = T::from_f64(1.0 / cols as f64);
    let eps = T::from_f64(eps);
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let mut m = T::ZERO;
        for &v in row {
            m += v;
        }
        m = m * inv_cols;
        let mut var = T::ZERO;
        for &v in row {
            let d = v - m;
            var += d * d;
        }
        var = var * inv_cols;
        let rs = T::ONE / (var + eps).sqrt();
        mean[r] = m;
        rstd[r] = rs;
        let dst = &mut y[r * cols..(r + 1) * cols];
        for (c, (d, &v)) in dst.iter_mut().zip(row).enumerate() {
            let idx = if affine_per_row { r } else { c };
            *d = (v - m) * rs * gamma[idx] + beta[idx];
        }
    }
    (y, mean, rstd)
}

/// Returns `(dx, dgamma, dbeta)`.
#[allow(clippy::too_many_arguments)]
pub fn norm_rows_backward<T: Element>(
    x: &[T],
    dy: &[T],
    rows: usize,
    cols: usize,
    gamma: &[T],
    mean: &[T],
    rstd: &[T],
    affine_per_row: bool,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let mut dx = vec![T::ZERO; rows * cols];
    let mut dgamma = vec![T::ZERO; gamma.len()];
    let mut dbeta = vec![T::ZERO; gamma.len()];
    let inv_cols = T::from_f64(1.0 / cols as f64);
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let dy_row = &dy[r * cols..(r + 1) * cols];
        let m = mean[r];
        let rs = rstd[r];
        // g = dy * gamma; dx = rs * (g - mean(g) - xhat * mean(g * xhat))
        let mut g_sum = T::ZERO;
        let mut gx_sum = T::ZERO;
        for (c, (&v, &dv)) in row.iter().zip(dy_row).enumerate() {
            let idx = if affine_per_row { r } else { c };
            let xhat = (v - m) * rs;
            let g = dv * gamma[idx];
            g_sum += g;
            gx_sum += g * xhat;
            dgamma[idx] += dv * xhat;
            dbeta[idx] += dv;
        }
        let g_mean = g_sum * inv_cols;
        let gx_mean = gx_sum * inv_cols;
        let dst = &mut dx[r * cols..(r + 1) * cols];
        for (c, (d, (&v, &dv))) in dst.iter_mut().zip(row.iter().zip(dy_row)).enumerate() {
            let idx = if affine_per_row { r } else { c };
            let xhat = (v - m) * rs;
            let g = dv * gamma[idx];
            *d = rs * (g - g_mean - xhat * gx_mean);
        }
    }
    (dx, dgamma, dbeta)
}

// ---------------------------------------------------------------------------
// 3D convolution via im2col, processed in row chunks to bound memory
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub struct ConvGeom {
    pub c_in: usize,
    pub in_dims: [usize; 3],
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_dims: [usize; 3],
}

impl ConvGeom {
    pub fn out_positions(&self) -> usize {
        self.out_dims.iter().product()
    }

    pub fn patch_len(&self) -> usize {
        self.c_in * self.kernel * self.kernel * self.kernel
    }
}

/// Gathers im2col rows `row_start..row_end` (output positions in row-major
/// `(oh, ow, od)` order) into `out`, one `(ci, ka, kb, kc)` patch per row.
pub fn im2col_chunk<T: Element>(x: &[T], g: &ConvGeom, row_start: usize, row_end: usize, out: &mut [T]) {
    let [h, w, d] = g.in_dims;
    let [_oh, ow, od] = g.out_dims;
    let k = g.kernel;
    let patch = g.patch_len();
    debug_assert_eq!(out.len(), (row_end - row_start) * patch);
    for (local, row) in (row_start..row_end).enumerate() {
        let oz = row % od;
        let oy = (row / od) % ow;
        let ox = row / (od * ow);
        let base_x = (ox * g.stride) as isize - g.pad as isize;
        let base_y = (oy * g.stride) as isize - g.pad as isize;
        let base_z = (oz * g.stride) as isize - g.pad as isize;
        let dst = &mut out[local * patch..(local + 1) * patch];
        let mut col = 0;
        for ci in 0..g.c_in {
            let chan = &x[ci * h * w * d..(ci + 1) * h * w * d];
            for ka in 0..k {
                let ix = base_x + ka as isize;
                for kb in 0..k {
                    let iy = base_y + kb as isize;
                    for kc in 0..k {
                        let iz = base_z + kc as isize;
                        dst[col] = if ix >= 0
                            && iy >= 0
                            && iz >= 0
                            && (ix as usize) < h
                            && (iy as usize) < w
                            && (iz as usize) < d
                        {
                            chan[(ix as usize * w + iy as usize) * d + iz as usize]
                        } else {
                            T::ZERO
                        };
                        col += 1;
                    }
                }
            }
        }
    }
}

/// Scatter-adds im2col gradient rows back into `dx` (inverse of
/// `im2col_chunk`); out-of-bounds (padded) entries are dropped.
pub fn col2im_chunk_add<T: Element>(
    dcol: &[T],
    g: &ConvGeom,
    row_start: usize,
    row_end: usize,
    dx: &mut [T],
) {
    let [h, w, d] = g.in_dims;
    let [_oh, ow, od] = g.out_dims;
    let k = g.kernel;
    let patch = g.patch_len();
    for (local, row) in (row_start..row_end).enumerate() {
        let oz = row % od;
        let oy = (row / od) % ow;
        let ox = row / (od * ow);
        let base_x = (ox * g.stride) as isize - g.pad as isize;
        let base_y = (oy * g.stride) as isize - g.pad as isize;
        let base_z = (oz * g.stride) as isize - g.pad as isize;
        let src = &dcol[local * patch..(local + 1) * patch];
        let mut col = 0;
        for ci in 0..g.c_in {
            let chan_off = ci * h * w * d;
            for ka in 0..k {
                let ix = base_x + ka as isize;
                for kb in 0..k {
                    let iy = base_y + kb as isize;
                    for kc in 0..k {
                        let iz = base_z + kc as isize;
                        if ix >= 0
                            && iy >= 0
                            && iz >= 0
                            && (ix as usize) < h
                            && (iy as usize) < w
                            && (iz as usize) < d
                        {
                            let idx = chan_off + (ix as usize * w + iy as usize) * d + iz as usize;
                            dx[idx] += src[col];
                        }
                        col += 1;
                    }
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// index remapping: broadcast, permute, slice, roll, row gather
// ---------------------------------------------------------------------------

/// Expands `x` of `src_shape` to `dst_shape` (numpy alignment: `src_shape`
/// right-aligned, size-1 axes repeat).
pub fn broadcast_copy<T: Element>(x: &[T], src_shape: &[usize], dst_shape: &[usize]) -> Vec<T> {
    let map = broadcast_strides(src_shape, dst_shape);
    let total: usize = dst_shape.iter().product();
    let mut out = vec![T::ZERO; total];
    let mut idx = vec![0usize; dst_shape.len()];
    for slot in out.iter_mut() {
        let src: usize = idx.iter().zip(&map).map(|(i, s)| i * s).sum();
        *slot = x[src];
        advance(&mut idx, dst_shape);
    }
    out
}

/// Reduces a gradient of `dst_shape` back onto `src_shape` by summation, in
/// ascending destination order.
pub fn broadcast_reduce<T: Element>(dy: &[T], src_shape: &[usize], dst_shape: &[usize]) -> Vec<T> {
    let map = broadcast_strides(src_shape, dst_shape);
    let total: usize = src_shape.iter().product();
    let mut out = vec![T::ZERO; total];
    let mut idx = vec![0usize; dst_shape.len()];
    for &g in dy.iter() {
        let src: usize = idx.iter().zip(&map).map(|(i, s)| i * s).sum();
        out[src] += g;
        advance(&mut idx, dst_shape);
    }
    out
}

/// For each destination axis, the flat stride into the source (0 where the
/// source axis is broadcast or absent).
fn broadcast_strides(src_shape: &[usize], dst_shape: &[usize]) -> Vec<usize> {
    let src_strides = super::strides(src_shape);
    let offset = dst_shape.len() - src_shape.len();
    (0..dst_shape.len())
        .map(|i| {
            if i < offset {
                0
            } else {
                let s = i - offset;
                if src_shape[s] == 1 && dst_shape[i] != 1 {
                    0
                } else {
                    src_strides[s]
                }
            }
        })
        .collect()
}

#[inline]
fn advance(idx: &mut [usize], shape: &[usize]) {
    for ax in (0..shape.len()).rev() {
        idx[ax] += 1;
        if idx[ax] < shape[ax] {
            return;
        }
        idx[ax] = 0;
    }
}

pub fn permute_copy<T: Element>(x: &[T], shape: &[usize], axes: &[usize]) -> Vec<T> {
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let src_strides = super::strides(shape);
    let mapped: Vec<usize> = axes.iter().map(|&a| src_strides[a]).collect();
    let total: usize = shape.iter().product();
    let mut out = vec![T::ZERO; total];
    let mut idx = vec![0usize; out_shape.len()];
    for slot in out.iter_mut() {
        let src: usize = idx.iter().zip(&mapped).map(|(i, s)| i * s).sum();
        *slot = x[src];
        advance(&mut idx, &out_shape);
    }
    out
}

/// Ranges are `(start, end, step)` per axis, end-exclusive.
pub fn slice_out_shape(shape: &[usize], ranges: &[(usize, usize, usize)]) -> Vec<usize> {
    ranges
        .iter()
        .zip(shape)
        .map(|(&(s, e, st), _)| (e - s).div_ceil(st))
        .collect()
}

pub fn slice_copy<T: Element>(x: &[T], shape: &[usize], ranges: &[(usize, usize, usize)]) -> Vec<T> {
    let out_shape = slice_out_shape(shape, ranges);
    let src_strides = super::strides(shape);
    let total: usize = out_shape.iter().product();
    let mut out = vec![T::ZERO; total];
    let mut idx = vec![0usize; out_shape.len()];
    for slot in out.iter_mut() {
        let src: usize = idx
            .iter()
            .zip(ranges)
            .zip(&src_strides)
            .map(|((i, &(s, _, st)), stride)| (s + i * st) * stride)
            .sum();
        *slot = x[src];
        advance(&mut idx, &out_shape);
    }
    out
}

pub fn slice_scatter_add<T: Element>(
    dy: &[T],
    shape: &[usize],
    ranges: &[(usize, usize, usize)],
    dx: &mut [T],
) {
    let out_shape = slice_out_shape(shape, ranges);
    let src_strides = super::strides(shape);
    let mut idx = vec![0usize; out_shape.len()];
    for &g in dy.iter() {
        let src: usize = idx
            .iter()
            .zip(ranges)
            .zip(&src_strides)
            .map(|((i, &(s, _, st)), stride)| (s + i * st) * stride)
            .sum();
        dx[src] += g;
        advance(&mut idx, &out_shape);
    }
}

/// Torus roll: positive shift moves content toward higher indices,
/// `out[i] = x[(i - shift) mod n]` per axis.
pub fn roll_copy<T: Element>(x: &[T], shape: &[usize], shifts: &[i64]) -> Vec<T> {
    let st = super::strides(shape);
    let norm: Vec<usize> = shifts
        .iter()
        .zip(shape)
        .map(|(&s, &n)| (s.rem_euclid(n as i64)) as usize)
        .collect();
    let total: usize = shape.iter().product();
    let mut out = vec![T::ZERO; total];
    let mut idx = vec![0usize; shape.len()];
    for slot in out.iter_mut() {
        let src: usize = idx
            .iter()
            .zip(shape)
            .zip(&norm)
            .zip(&st)
            .map(|(((i, &n), &s), stride)| ((i + n - s) % n) * stride)
            .sum();
        *slot = x[src];
        advance(&mut idx, shape);
    }
    out
}

/// `out[r, ...] = x[indices[r], ...]` over the leading axis.
pub fn gather_rows<T: Element>(x: &[T], row_len: usize, indices: &[usize]) -> Vec<T> {
    let mut out = Vec::with_capacity(indices.len() * row_len);
    for &i in indices {
        out.extend_from_slice(&x[i * row_len..(i + 1) * row_len]);
    }
    out
}

pub fn scatter_rows_add<T: Element>(dy: &[T], row_len: usize, indices: &[usize], dx: &mut [T]) {
    for (r, &i) in indices.iter().enumerate() {
        let src = &dy[r * row_len..(r + 1) * row_len];
        let dst = &mut dx[i * row_len..(i + 1) * row_len];
        for (d, &g) in dst.iter_mut().zip(src) {
            *d += g;
        }
    }
}
