//! Forward operators. Each validates shapes, computes the result with the
//! kernels, and records an [`Op`] when any input participates in
//! differentiation and recording is enabled.

use std::sync::Arc;

use super::autograd::CONV_CHUNK_ELEMS;
use super::kern::{self, ConvGeom};
use super::{grad_enabled, numel, record_madds, DType, Element, Op, Storage, Tensor};
use crate::error::{Error, Result};

macro_rules! dispatch1 {
    ($a:expr, |$x:ident| $body:expr) => {
        match &*$a {
            Storage::F32($x) => Storage::F32($body),
            Storage::F64($x) => Storage::F64($body),
        }
    };
}

macro_rules! dispatch2 {
    ($opname:literal, $a:expr, $b:expr, |$x:ident, $y:ident| $body:expr) => {
        match (&*$a, &*$b) {
            (Storage::F32($x), Storage::F32($y)) => Storage::F32($body),
            (Storage::F64($x), Storage::F64($y)) => Storage::F64($body),
            _ => {
                return Err(Error::DTypeMismatch {
                    op: $opname,
                    lhs: $a.dtype(),
                    rhs: $b.dtype(),
                })
            }
        }
    };
}

fn make(shape: Vec<usize>, data: Storage, wants_grad: bool, op: impl FnOnce() -> Op) -> Tensor {
    if wants_grad && grad_enabled() {
        Tensor::from_parts(shape, data, true, Some(op()))
    } else {
        Tensor::from_parts(shape, data, false, None)
    }
}

fn check_same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::ShapeMismatch {
            op,
            lhs: a.dims().to_vec(),
            rhs: b.dims().to_vec(),
        });
    }
    Ok(())
}

impl Tensor {
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        check_same_shape("add", self, other)?;
        let (a, b) = (self.read_data(), other.read_data());
        let data = dispatch2!("add", a, b, |x, y| kern::map2(x, y, |u, v| u + v));
        drop((a, b));
        let wants = self.requires_grad() || other.requires_grad();
        Ok(make(self.dims().to_vec(), data, wants, || {
            Op::Add(self.clone(), other.clone())
        }))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        check_same_shape("sub", self, other)?;
        let (a, b) = (self.read_data(), other.read_data());
        let data = dispatch2!("sub", a, b, |x, y| kern::map2(x, y, |u, v| u - v));
        drop((a, b));
        let wants = self.requires_grad() || other.requires_grad();
        Ok(make(self.dims().to_vec(), data, wants, || {
            Op::Sub(self.clone(), other.clone())
        }))
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        check_same_shape("mul", self, other)?;
        let (a, b) = (self.read_data(), other.read_data());
        let data = dispatch2!("mul", a, b, |x, y| kern::map2(x, y, |u, v| u * v));
        drop((a, b));
        let wants = self.requires_grad() || other.requires_grad();
        Ok(make(self.dims().to_vec(), data, wants, || {
            Op::Mul(self.clone(), other.clone())
        }))
    }

    pub fn neg(&self) -> Result<Tensor> {
        let a = self.read_data();
        let data = dispatch1!(a, |x| kern::map1(x, |v| -v));
        drop(a);
        Ok(make(self.dims().to_vec(), data, self.requires_grad(), || {
            Op::Neg(self.clone())
        }))
    }

    /// Elementwise `x * mul + add`.
    pub fn affine(&self, mul: f64, add: f64) -> Result<Tensor> {
        let a = self.read_data();
        let data = dispatch1!(a, |x| kern::affine_map(x, mul, add));
        drop(a);
        Ok(make(self.dims().to_vec(), data, self.requires_grad(), || {
            Op::Affine {
                x: self.clone(),
                mul,
            }
        }))
    }

    pub fn scale(&self, factor: f64) -> Result<Tensor> {
        self.affine(factor, 0.0)
    }

    /// Elementwise reciprocal.
    pub fn recip(&self) -> Result<Tensor> {
        let a = self.read_data();
        let data = dispatch1!(a, |x| kern::recip_map(x));
        drop(a);
        Ok(make(self.dims().to_vec(), data, self.requires_grad(), || {
            Op::Recip(self.clone())
        }))
    }

    pub fn ln(&self) -> Result<Tensor> {
        let a = self.read_data();
        let data = dispatch1!(a, |x| kern::map1(x, |v| v.ln()));
        drop(a);
        Ok(make(self.dims().to_vec(), data, self.requires_grad(), || {
            Op::Ln(self.clone())
        }))
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Result<Tensor> {
        if !(lo < hi) {
            return Err(Error::invalid("clamp", format!("lo {lo} must be below hi {hi}")));
        }
        let a = self.read_data();
        let data = dispatch1!(a, |x| kern::clamp_map(x, lo, hi));
        drop(a);
        Ok(make(self.dims().to_vec(), data, self.requires_grad(), || {
            Op::Clamp {
                x: self.clone(),
                lo,
                hi,
            }
        }))
    }

    pub fn gelu(&self) -> Result<Tensor> {
        let a = self.read_data();
        let data = dispatch1!(a, |x| kern::map1(x, kern::gelu));
        drop(a);
        Ok(make(self.dims().to_vec(), data, self.requires_grad(), || {
            Op::Gelu(self.clone())
        }))
    }

    pub fn sigmoid(&self) -> Result<Tensor> {
        let a = self.read_data();
        let data = dispatch1!(a, |x| kern::map1(x, kern::sigmoid));
        drop(a);
        Ok(make(self.dims().to_vec(), data, self.requires_grad(), || {
            Op::Sigmoid(self.clone())
        }))
    }

    pub fn leaky_relu(&self, slope: f64) -> Result<Tensor> {
        let a = self.read_data();
        let data = dispatch1!(a, |x| kern::leaky_relu_map(x, slope));
        drop(a);
        Ok(make(self.dims().to_vec(), data, self.requires_grad(), || {
            Op::LeakyRelu {
                x: self.clone(),
                slope,
            }
        }))
    }

    /// Numerically stabilized softmax along the trailing dimension. Each
    /// slice sums to one.
    pub fn softmax_lastdim(&self) -> Result<Tensor> {
        let cols = *self
            .dims()
            .last()
            .ok_or_else(|| Error::invalid("softmax_lastdim", "rank must be at least 1"))?;
        if cols == 0 {
            return Err(Error::invalid("softmax_lastdim", "empty trailing dimension"));
        }
        let rows = self.len() / cols;
        let a = self.read_data();
        let data = dispatch1!(a, |x| kern::softmax_rows(x, rows, cols));
        drop(a);
        Ok(make(self.dims().to_vec(), data, self.requires_grad(), || {
            Op::Softmax {
                x: self.clone(),
                cols,
            }
        }))
    }

    /// Per-token normalization over the trailing dimension followed by the
    /// affine `gamma`/`beta` of that dimension.
    pub fn layer_norm(&self, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
        let cols = *self
            .dims()
            .last()
            .ok_or_else(|| Error::invalid("layer_norm", "rank must be at least 1"))?;
        self.norm_impl("layer_norm", gamma, beta, eps, self.len() / cols, cols, false)
    }

    /// Per-channel normalization of a `[C, H, W, D]` tensor over its spatial
    /// extent, followed by the per-channel affine.
    pub fn instance_norm3d(&self, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
        if self.rank() != 4 {
            return Err(Error::invalid(
                "instance_norm3d",
                format!("expected [C, H, W, D], got {:?}", self.dims()),
            ));
        }
        let channels = self.dims()[0];
        let spatial = self.len() / channels;
        self.norm_impl("instance_norm3d", gamma, beta, eps, channels, spatial, true)
    }

    #[allow(clippy::too_many_arguments)]
    fn norm_impl(
        &self,
        opname: &'static str,
        gamma: &Tensor,
        beta: &Tensor,
        eps: f64,
        rows: usize,
        cols: usize,
        per_row: bool,
    ) -> Result<Tensor> {
        if eps <= 0.0 {
            return Err(Error::invalid(opname, format!("eps must be positive, got {eps}")));
        }
        let affine_len = if per_row { rows } else { cols };
        if gamma.len() != affine_len || beta.len() != affine_len {
            return Err(Error::ShapeMismatch {
                op: opname,
                lhs: vec![affine_len],
                rhs: gamma.dims().to_vec(),
            });
        }
        let (a, g, b) = (self.read_data(), gamma.read_data(), beta.read_data());
        let (data, mean, rstd) = match (&*a, &*g, &*b) {
            (Storage::F32(x), Storage::F32(gm), Storage::F32(bt)) => {
                let (y, m, r) = kern::norm_rows(x, rows, cols, gm, bt, eps, per_row);
                (Storage::F32(y), Storage::F32(m), Storage::F32(r))
            }
            (Storage::F64(x), Storage::F64(gm), Storage::F64(bt)) => {
                let (y, m, r) = kern::norm_rows(x, rows, cols, gm, bt, eps, per_row);
                (Storage::F64(y), Storage::F64(m), Storage::F64(r))
            }
            _ => {
                return Err(Error::DTypeMismatch {
                    op: opname,
                    lhs: a.dtype(),
                    rhs: g.dtype(),
                })
            }
        };
        drop((a, g, b));
        let wants = self.requires_grad() || gamma.requires_grad() || beta.requires_grad();
        Ok(make(self.dims().to_vec(), data, wants, || Op::Norm {
            x: self.clone(),
            gamma: gamma.clone(),
            beta: beta.clone(),
            rows,
            cols,
            per_row,
            mean,
            rstd,
        }))
    }

    /// Matrix product over the two trailing dimensions. Leading (batch)
    /// dimensions must match exactly, or the right operand may be a plain
    /// `[k, n]` matrix shared across the batch.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (ad, bd) = (self.dims(), other.dims());
        let mismatch = || Error::ShapeMismatch {
            op: "matmul",
            lhs: ad.to_vec(),
            rhs: bd.to_vec(),
        };
        if ad.len() < 2 || bd.len() < 2 {
            return Err(mismatch());
        }
        let (m, k) = (ad[ad.len() - 2], ad[ad.len() - 1]);
        let (kb, n) = (bd[bd.len() - 2], bd[bd.len() - 1]);
        if k != kb {
            return Err(mismatch());
        }
        let b_batched = bd.len() > 2;
        if b_batched && ad[..ad.len() - 2] != bd[..bd.len() - 2] {
            return Err(mismatch());
        }
        let batch = numel(&ad[..ad.len() - 2]);
        let mut out_shape = ad[..ad.len() - 2].to_vec();
        out_shape.push(m);
        out_shape.push(n);

        let (a, b) = (self.read_data(), other.read_data());
        let data = dispatch2!("matmul", a, b, |x, y| {
            let mut out = kern::zeros_like_slice(x, batch * m * n);
            for i in 0..batch {
                let b_i = if b_batched { &y[i * k * n..(i + 1) * k * n] } else { &y[..] };
                kern::gemm_nn_acc(
                    &x[i * m * k..(i + 1) * m * k],
                    b_i,
                    &mut out[i * m * n..(i + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
            out
        });
        drop((a, b));
        record_madds((batch * m * k * n) as u64);
        let wants = self.requires_grad() || other.requires_grad();
        Ok(make(out_shape, data, wants, || Op::Matmul {
            a: self.clone(),
            b: other.clone(),
            batch,
            m,
            k,
            n,
            b_batched,
        }))
    }

    /// Direct 3D convolution of `[C_in, H, W, D]` with a cubic kernel
    /// `[C_out, C_in, k, k, k]`. Output spatial extent per axis is
    /// `(dim + 2*pad - k) / stride + 1` (floor).
    pub fn conv3d(&self, weight: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
        if self.rank() != 4 {
            return Err(Error::invalid(
                "conv3d",
                format!("input must be [C_in, H, W, D], got {:?}", self.dims()),
            ));
        }
        if weight.rank() != 5 {
            return Err(Error::invalid(
                "conv3d",
                format!("kernel must be [C_out, C_in, k, k, k], got {:?}", weight.dims()),
            ));
        }
        let wd = weight.dims().to_vec();
        let (c_out, c_in, k) = (wd[0], wd[1], wd[2]);
        if wd[3] != k || wd[4] != k {
            return Err(Error::invalid("conv3d", format!("kernel must be cubic, got {wd:?}")));
        }
        if self.dims()[0] != c_in {
            return Err(Error::ShapeMismatch {
                op: "conv3d",
                lhs: self.dims().to_vec(),
                rhs: wd,
            });
        }
        if stride == 0 {
            return Err(Error::invalid("conv3d", "stride must be at least 1"));
        }
        let in_dims = [self.dims()[1], self.dims()[2], self.dims()[3]];
        let mut out_dims = [0usize; 3];
        for (o, &dim) in out_dims.iter_mut().zip(&in_dims) {
            let padded = dim + 2 * pad;
            if padded < k {
                return Err(Error::invalid(
                    "conv3d",
                    format!("kernel size {k} exceeds padded input extent {padded}"),
                ));
            }
            *o = (padded - k) / stride + 1;
        }
        let geom = ConvGeom {
            c_in,
            in_dims,
            kernel: k,
            stride,
            pad,
            out_dims,
        };
        let positions = geom.out_positions();
        let patch = geom.patch_len();
        let chunk_rows = (CONV_CHUNK_ELEMS / patch.max(1)).max(1);

        let (a, w) = (self.read_data(), weight.read_data());
        let data = dispatch2!("conv3d", a, w, |x, wm| {
            // rows[positions, c_out] accumulated chunk-wise, then transposed
            // into the [C_out, spatial] output layout.
            let wt = kern::transpose2d(wm, c_out, patch);
            let mut rows = kern::zeros_like_slice(x, positions * c_out);
            let mut col = kern::zeros_like_slice(x, chunk_rows * patch);
            let mut start = 0;
            while start < positions {
                let end = (start + chunk_rows).min(positions);
                let nrows = end - start;
                kern::im2col_chunk(x, &geom, start, end, &mut col[..nrows * patch]);
                kern::gemm_nn_acc(
                    &col[..nrows * patch],
                    &wt,
                    &mut rows[start * c_out..end * c_out],
                    nrows,
                    patch,
                    c_out,
                );
                start = end;
            }
            kern::transpose2d(&rows, positions, c_out)
        });
        drop((a, w));
        record_madds((positions * patch * c_out) as u64);
        let out_shape = vec![c_out, out_dims[0], out_dims[1], out_dims[2]];
        let wants = self.requires_grad() || weight.requires_grad();
        Ok(make(out_shape, data, wants, || Op::Conv3d {
            x: self.clone(),
            w: weight.clone(),
            geom,
            c_out,
        }))
    }

    /// Transposed convolution doubling each spatial extent. Only the
    /// kernel-2 / stride-2 case is supported; the kernel layout is
    /// `[C_in, C_out, 2, 2, 2]`. Built from reshape/matmul/permute, so the
    /// gradient comes from the chain.
    pub fn conv_transpose3d(&self, weight: &Tensor, stride: usize) -> Result<Tensor> {
        if stride != 2 {
            return Err(Error::invalid(
                "conv_transpose3d",
                format!("only stride 2 is supported, got {stride}"),
            ));
        }
        if self.rank() != 4 {
            return Err(Error::invalid(
                "conv_transpose3d",
                format!("input must be [C_in, H, W, D], got {:?}", self.dims()),
            ));
        }
        let wd = weight.dims().to_vec();
        if weight.rank() != 5 || wd[2] != 2 || wd[3] != 2 || wd[4] != 2 {
            return Err(Error::invalid(
                "conv_transpose3d",
                format!("kernel must be [C_in, C_out, 2, 2, 2], got {wd:?}"),
            ));
        }
        let (c_in, c_out) = (wd[0], wd[1]);
        if self.dims()[0] != c_in {
            return Err(Error::ShapeMismatch {
                op: "conv_transpose3d",
                lhs: self.dims().to_vec(),
                rhs: wd,
            });
        }
        let (h, w, d) = (self.dims()[1], self.dims()[2], self.dims()[3]);
        let n = h * w * d;
        let x_mat = self.reshape(&[c_in, n])?.permute(&[1, 0])?;
        let w_mat = weight.reshape(&[c_in, c_out * 8])?;
        let blocks = x_mat.matmul(&w_mat)?; // [n, c_out*8]
        blocks
            .reshape(&[h, w, d, c_out, 2, 2, 2])?
            .permute(&[3, 0, 4, 1, 5, 2, 6])?
            .reshape(&[c_out, 2 * h, 2 * w, 2 * d])
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != self.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.dims().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let data = self.read_data().clone();
        Ok(make(shape.to_vec(), data, self.requires_grad(), || {
            Op::Reshape(self.clone())
        }))
    }

    pub fn permute(&self, axes: &[usize]) -> Result<Tensor> {
        let rank = self.rank();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::invalid(
                "permute",
                format!("axes {:?} are not a permutation of 0..{}", axes, rank),
            ));
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| self.dims()[a]).collect();
        let a = self.read_data();
        let data = dispatch1!(a, |x| kern::permute_copy(x, self.dims(), axes));
        drop(a);
        Ok(make(out_shape, data, self.requires_grad(), || Op::Permute {
            x: self.clone(),
            axes: axes.to_vec(),
        }))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(parts: &[Tensor], axis: usize) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat", "no tensors given"))?;
        let rank = first.rank();
        if axis >= rank {
            return Err(Error::invalid("concat", format!("axis {axis} out of range for rank {rank}")));
        }
        let mut axis_total = 0;
        for p in parts {
            if p.rank() != rank
                || p.dims()
                    .iter()
                    .enumerate()
                    .any(|(i, &d)| i != axis && d != first.dims()[i])
            {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: first.dims().to_vec(),
                    rhs: p.dims().to_vec(),
                });
            }
            if p.dtype() != first.dtype() {
                return Err(Error::DTypeMismatch {
                    op: "concat",
                    lhs: first.dtype(),
                    rhs: p.dtype(),
                });
            }
            axis_total += p.dims()[axis];
        }
        let mut out_shape = first.dims().to_vec();
        out_shape[axis] = axis_total;
        let outer: usize = first.dims()[..axis].iter().product();
        let inner: usize = first.dims()[axis + 1..].iter().product();

        fn concat_impl<T: Element>(
            guards: &[std::sync::RwLockReadGuard<'_, Storage>],
            extents: &[usize],
            outer: usize,
            inner: usize,
            total: usize,
        ) -> Vec<T> {
            let mut out = Vec::with_capacity(outer * total * inner);
            for o in 0..outer {
                for (g, &ext) in guards.iter().zip(extents) {
                    let src = T::slice_of(g);
                    let block = ext * inner;
                    out.extend_from_slice(&src[o * block..(o + 1) * block]);
                }
            }
            out
        }

        let guards: Vec<_> = parts.iter().map(|p| p.read_data()).collect();
        let extents: Vec<usize> = parts.iter().map(|p| p.dims()[axis]).collect();
        let data = match first.dtype() {
            DType::F32 => Storage::F32(concat_impl::<f32>(&guards, &extents, outer, inner, axis_total)),
            DType::F64 => Storage::F64(concat_impl::<f64>(&guards, &extents, outer, inner, axis_total)),
        };
        drop(guards);
        let wants = parts.iter().any(|p| p.requires_grad());
        Ok(make(out_shape, data, wants, || Op::Concat {
            xs: parts.to_vec(),
            axis,
        }))
    }

    /// Strided view copy; `ranges` is one `(start, end, step)` per axis,
    /// end-exclusive.
    pub fn slice(&self, ranges: &[(usize, usize, usize)]) -> Result<Tensor> {
        if ranges.len() != self.rank() {
            return Err(Error::invalid(
                "slice",
                format!("{} ranges for rank {}", ranges.len(), self.rank()),
            ));
        }
        for (&(s, e, st), &d) in ranges.iter().zip(self.dims()) {
            if st == 0 || s >= e || e > d {
                return Err(Error::invalid(
                    "slice",
                    format!("range ({s}, {e}, {st}) invalid for extent {d}"),
                ));
            }
        }
        let out_shape = kern::slice_out_shape(self.dims(), ranges);
        let a = self.read_data();
        let data = dispatch1!(a, |x| kern::slice_copy(x, self.dims(), ranges));
        drop(a);
        Ok(make(out_shape, data, self.requires_grad(), || Op::Slice {
            x: self.clone(),
            ranges: ranges.to_vec(),
        }))
    }

    /// Torus roll; positive shifts move content toward higher indices.
    pub fn roll(&self, shifts: &[i64]) -> Result<Tensor> {
        if shifts.len() != self.rank() {
            return Err(Error::invalid(
                "roll",
                format!("{} shifts for rank {}", shifts.len(), self.rank()),
            ));
        }
        let a = self.read_data();
        let data = dispatch1!(a, |x| kern::roll_copy(x, self.dims(), shifts));
        drop(a);
        Ok(make(self.dims().to_vec(), data, self.requires_grad(), || Op::Roll {
            x: self.clone(),
            shifts: shifts.to_vec(),
        }))
    }

    /// Expands to `shape` with numpy alignment (right-aligned, size-1 axes
    /// repeat). The gradient sums back over expanded axes.
    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Tensor> {
        let src = self.dims();
        if src.len() > shape.len() {
            return Err(Error::ShapeMismatch {
                op: "broadcast_to",
                lhs: src.to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let offset = shape.len() - src.len();
        for (i, &d) in src.iter().enumerate() {
            if d != shape[offset + i] && d != 1 {
                return Err(Error::ShapeMismatch {
                    op: "broadcast_to",
                    lhs: src.to_vec(),
                    rhs: shape.to_vec(),
                });
            }
        }
        let a = self.read_data();
        let data = dispatch1!(a, |x| kern::broadcast_copy(x, src, shape));
        drop(a);
        Ok(make(shape.to_vec(), data, self.requires_grad(), || {
            Op::Broadcast(self.clone())
        }))
    }

    /// Sum of all elements as a `[1]` tensor, accumulated in flat order.
    pub fn sum_all(&self) -> Result<Tensor> {
        let a = self.read_data();
        let data = dispatch1!(a, |x| vec![kern::sum_flat(x)]);
        drop(a);
        Ok(make(vec![1], data, self.requires_grad(), || Op::SumAll(self.clone())))
    }

    pub fn mean_all(&self) -> Result<Tensor> {
        let n = self.len().max(1);
        self.sum_all()?.scale(1.0 / n as f64)
    }

    /// Row gather over the leading axis: `out[r, ...] = self[indices[r], ...]`.
    pub fn index_select0(&self, indices: Arc<Vec<usize>>) -> Result<Tensor> {
        if self.rank() == 0 {
            return Err(Error::invalid("index_select0", "rank must be at least 1"));
        }
        let rows = self.dims()[0];
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(Error::invalid(
                "index_select0",
                format!("index {bad} out of range for {rows} rows"),
            ));
        }
        let row_len = numel(&self.dims()[1..]);
        let mut out_shape = self.dims().to_vec();
        out_shape[0] = indices.len();
        let a = self.read_data();
        let data = dispatch1!(a, |x| kern::gather_rows(x, row_len, &indices));
        drop(a);
        Ok(make(out_shape, data, self.requires_grad(), || Op::GatherRows {
            x: self.clone(),
            indices,
        }))
    }

    /// Precision conversion. Differentiable only into leaf tensors.
    pub fn cast(&self, dtype: DType) -> Result<Tensor> {
        if dtype == self.dtype() {
            let data = self.read_data().clone();
            return Ok(make(self.dims().to_vec(), data, self.requires_grad(), || {
                Op::Reshape(self.clone())
            }));
        }
        let data = match (&*self.read_data(), dtype) {
            (Storage::F32(v), DType::F64) => Storage::F64(v.iter().map(|&x| x as f64).collect()),
            (Storage::F64(v), DType::F32) => Storage::F32(v.iter().map(|&x| x as f32).collect()),
            _ => unreachable!(),
        };
        Ok(make(self.dims().to_vec(), data, self.requires_grad(), || {
            Op::Cast(self.clone())
        }))
    }
}
