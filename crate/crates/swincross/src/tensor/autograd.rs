//! Reverse-mode differentiation over the recorded operator graph.
//!
//! Each non-leaf tensor carries the `Op` that produced it, holding handles
//! to its inputs plus whatever the backward formula needs. `backward` walks
//! the graph once in reverse topological order and deposits gradients on
//! reachable leaf tensors. Gradient accumulation follows the same ascending
//! index order as the forward kernels, so repeated runs are bitwise equal.

use std::collections::{HashMap, HashSet};
use std::sync::atomic::Ordering;
use std::sync::Arc;

use super::kern::{self, ConvGeom};
use super::{numel, Element, Storage, Tensor};
use crate::error::{Error, Result};

/// Rows-per-chunk bound for im2col recomputation (kept in sync with ops.rs).
pub(crate) const CONV_CHUNK_ELEMS: usize = 1 << 22;

pub(crate) enum Op {
    Add(Tensor, Tensor),
    Sub(Tensor, Tensor),
    Mul(Tensor, Tensor),
    Neg(Tensor),
    Affine {
        x: Tensor,
        mul: f64,
    },
    Recip(Tensor),
    Ln(Tensor),
    Clamp {
        x: Tensor,
        lo: f64,
        hi: f64,
    },
    Gelu(Tensor),
    Sigmoid(Tensor),
    LeakyRelu {
        x: Tensor,
        slope: f64,
    },
    Softmax {
        x: Tensor,
        cols: usize,
    },
    Norm {
        x: Tensor,
        gamma: Tensor,
        beta: Tensor,
        rows: usize,
        cols: usize,
        per_row: bool,
        mean: Storage,
        rstd: Storage,
    },
    Matmul {
        a: Tensor,
        b: Tensor,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        b_batched: bool,
    },
    Conv3d {
        x: Tensor,
        w: Tensor,
        geom: ConvGeom,
        c_out: usize,
    },
    Reshape(Tensor),
    Permute {
        x: Tensor,
        axes: Vec<usize>,
    },
    Broadcast(Tensor),
    Concat {
        xs: Vec<Tensor>,
        axis: usize,
    },
    Slice {
        x: Tensor,
        ranges: Vec<(usize, usize, usize)>,
    },
    Roll {
        x: Tensor,
        shifts: Vec<i64>,
    },
    SumAll(Tensor),
    GatherRows {
        x: Tensor,
        indices: Arc<Vec<usize>>,
    },
    Cast(Tensor),
}

impl Op {
    fn inputs(&self) -> Vec<&Tensor> {
        match self {
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![a, b],
            Op::Neg(x)
            | Op::Affine { x, .. }
            | Op::Recip(x)
            | Op::Ln(x)
            | Op::Clamp { x, .. }
            | Op::Gelu(x)
            | Op::Sigmoid(x)
            | Op::LeakyRelu { x, .. }
            | Op::Softmax { x, .. }
            | Op::Reshape(x)
            | Op::Permute { x, .. }
            | Op::Broadcast(x)
            | Op::Slice { x, .. }
            | Op::Roll { x, .. }
            | Op::SumAll(x)
            | Op::GatherRows { x, .. }
            | Op::Cast(x) => vec![x],
            Op::Norm { x, gamma, beta, .. } => vec![x, gamma, beta],
            Op::Matmul { a, b, .. } => vec![a, b],
            Op::Conv3d { x, w, .. } => vec![x, w],
            Op::Concat { xs, .. } => xs.iter().collect(),
        }
    }
}

/// Post-order walk over tensors that participate in differentiation.
fn topo_order(root: &Tensor) -> Vec<Tensor> {
    let mut order = Vec::new();
    let mut visited: HashSet<u64> = HashSet::new();
    // (tensor, expanded flag)
    let mut stack: Vec<(Tensor, bool)> = vec![(root.clone(), false)];
    while let Some((node, expanded)) = stack.pop() {
        if expanded {
            order.push(node);
            continue;
        }
        if !visited.insert(node.id()) {
            continue;
        }
        let children: Vec<Tensor> = match &node.inner.op {
            Some(op) => op
                .inputs()
                .into_iter()
                .filter(|t| t.requires_grad())
                .cloned()
                .collect(),
            None => Vec::new(),
        };
        stack.push((node, true));
        for child in children {
            if !visited.contains(&child.id()) {
                stack.push((child, false));
            }
        }
    }
    order
}

impl Tensor {
    /// Populates `grad` on every reachable differentiable leaf. Existing
    /// gradients on those leaves are reset first; use
    /// [`Tensor::backward_accumulate`] to sum into them instead.
    pub fn backward(&self) -> Result<()> {
        self.backward_impl(true)
    }

    /// Like [`Tensor::backward`] but adds onto existing leaf gradients.
    pub fn backward_accumulate(&self) -> Result<()> {
        self.backward_impl(false)
    }

    fn backward_impl(&self, reset: bool) -> Result<()> {
        if self.len() != 1 {
            return Err(Error::NonScalarLoss { elements: self.len() });
        }
        if self.inner.backward_done.swap(true, Ordering::SeqCst) {
            return Err(Error::GraphConsumed);
        }
        if !self.requires_grad() {
            // Loss built purely from constants: nothing to do.
            return Ok(());
        }
        let order = topo_order(self);
        if reset {
            for t in &order {
                if t.inner.op.is_none() {
                    t.zero_grad();
                }
            }
        }
        match self.dtype() {
            super::DType::F32 => run_backward::<f32>(self, &order),
            super::DType::F64 => run_backward::<f64>(self, &order),
        }
        Ok(())
    }
}

fn run_backward<T: Element>(root: &Tensor, order: &[Tensor]) {
    let mut grads: HashMap<u64, Vec<T>> = HashMap::new();
    grads.insert(root.id(), vec![T::ONE; 1]);

    let sink = |grads: &mut HashMap<u64, Vec<T>>, t: &Tensor, contrib: Vec<T>| {
        if !t.requires_grad() {
            return;
        }
        match grads.get_mut(&t.id()) {
            Some(existing) => {
                for (e, c) in existing.iter_mut().zip(&contrib) {
                    *e += *c;
                }
            }
            None => {
                grads.insert(t.id(), contrib);
            }
        }
    };

    for node in order.iter().rev() {
        let Some(g) = grads.remove(&node.id()) else {
            continue;
        };
        match &node.inner.op {
            None => {
                node.add_to_grad(&T::make_storage(g));
            }
            Some(op) => backward_one::<T>(node, op, &g, &mut |t, contrib| {
                sink(&mut grads, t, contrib)
            }),
        }
    }
}

fn backward_one<T: Element>(
    node: &Tensor,
    op: &Op,
    g: &[T],
    sink: &mut dyn FnMut(&Tensor, Vec<T>),
) {
    match op {
        Op::Add(a, b) => {
            sink(a, g.to_vec());
            sink(b, g.to_vec());
        }
        Op::Sub(a, b) => {
            sink(a, g.to_vec());
            sink(b, g.iter().map(|&v| -v).collect());
        }
        Op::Mul(a, b) => {
            if a.requires_grad() {
                let bd = b.read_data();
                sink(a, kern::map2(g, T::slice_of(&bd), |gv, bv| gv * bv));
            }
            if b.requires_grad() {
                let ad = a.read_data();
                sink(b, kern::map2(g, T::slice_of(&ad), |gv, av| gv * av));
            }
        }
        Op::Neg(x) => sink(x, g.iter().map(|&v| -v).collect()),
        Op::Affine { x, mul } => {
            let m = T::from_f64(*mul);
            sink(x, g.iter().map(|&v| v * m).collect());
        }
        Op::Recip(x) => {
            let yd = node.read_data();
            let y = T::slice_of(&yd);
            sink(x, kern::map2(g, y, |gv, yv| -gv * yv * yv));
        }
        Op::Ln(x) => {
            let xd = x.read_data();
            sink(x, kern::map2(g, T::slice_of(&xd), |gv, xv| gv / xv));
        }
        Op::Clamp { x, lo, hi } => {
            let lo = T::from_f64(*lo);
            let hi = T::from_f64(*hi);
            let xd = x.read_data();
            sink(
                x,
                kern::map2(g, T::slice_of(&xd), |gv, xv| {
                    if xv >= lo && xv <= hi {
                        gv
                    } else {
                        T::ZERO
                    }
                }),
            );
        }
        Op::Gelu(x) => {
            let xd = x.read_data();
            sink(x, kern::map2(g, T::slice_of(&xd), |gv, xv| gv * kern::gelu_grad(xv)));
        }
        Op::Sigmoid(x) => {
            let yd = node.read_data();
            let y = T::slice_of(&yd);
            sink(x, kern::map2(g, y, |gv, yv| gv * yv * (T::ONE - yv)));
        }
        Op::LeakyRelu { x, slope } => {
            let s = T::from_f64(*slope);
            let xd = x.read_data();
            sink(
                x,
                kern::map2(g, T::slice_of(&xd), |gv, xv| if xv > T::ZERO { gv } else { gv * s }),
            );
        }
        Op::Softmax { x, cols } => {
            let yd = node.read_data();
            let y = T::slice_of(&yd);
            let rows = y.len() / cols;
            sink(x, kern::softmax_rows_backward(y, g, rows, *cols));
        }
        Op::Norm {
            x,
            gamma,
            beta,
            rows,
            cols,
            per_row,
            mean,
            rstd,
        } => {
            let xd = x.read_data();
            let gd = gamma.read_data();
            let (dx, dgamma, dbeta) = kern::norm_rows_backward(
                T::slice_of(&xd),
                g,
                *rows,
                *cols,
                T::slice_of(&gd),
                T::slice_of(mean),
                T::slice_of(rstd),
                *per_row,
            );
            sink(x, dx);
            sink(gamma, dgamma);
            sink(beta, dbeta);
        }
        Op::Matmul {
            a,
            b,
            batch,
            m,
            k,
            n,
            b_batched,
        } => {
            let (batch, m, k, n) = (*batch, *m, *k, *n);
            if a.requires_grad() {
                let bd = b.read_data();
                let bs = T::slice_of(&bd);
                let mut da = vec![T::ZERO; batch * m * k];
                for i in 0..batch {
                    let b_i = if *b_batched { &bs[i * k * n..(i + 1) * k * n] } else { bs };
                    let bt = kern::transpose2d(b_i, k, n);
                    kern::gemm_nn_acc(
                        &g[i * m * n..(i + 1) * m * n],
                        &bt,
                        &mut da[i * m * k..(i + 1) * m * k],
                        m,
                        n,
                        k,
                    );
                }
                sink(a, da);
            }
            if b.requires_grad() {
                let ad = a.read_data();
                let as_ = T::slice_of(&ad);
                let db_len = if *b_batched { batch * k * n } else { k * n };
                let mut db = vec![T::ZERO; db_len];
                for i in 0..batch {
                    let dst = if *b_batched {
                        &mut db[i * k * n..(i + 1) * k * n]
                    } else {
                        &mut db[..]
                    };
                    kern::gemm_tn_acc(
                        &as_[i * m * k..(i + 1) * m * k],
                        &g[i * m * n..(i + 1) * m * n],
                        dst,
                        m,
                        k,
                        n,
                    );
                }
                sink(b, db);
            }
        }
        Op::Conv3d { x, w, geom, c_out } => {
            let positions = geom.out_positions();
            let patch = geom.patch_len();
            let c_out = *c_out;
            // dY arrives as [C_out, positions]; transpose once to rows.
            let dy_rows = kern::transpose2d(g, c_out, positions);
            let chunk_rows = (CONV_CHUNK_ELEMS / patch.max(1)).max(1);
            let xd = x.read_data();
            let xs = T::slice_of(&xd);
            let need_dx = x.requires_grad();
            let need_dw = w.requires_grad();
            let mut dx = if need_dx { vec![T::ZERO; xs.len()] } else { Vec::new() };
            let mut dw = if need_dw { vec![T::ZERO; c_out * patch] } else { Vec::new() };
            let wd = w.read_data();
            let ws = T::slice_of(&wd);
            let mut col = vec![T::ZERO; chunk_rows * patch];
            let mut start = 0;
            while start < positions {
                let end = (start + chunk_rows).min(positions);
                let rows = end - start;
                let dy_chunk = &dy_rows[start * c_out..end * c_out];
                if need_dw {
                    kern::im2col_chunk(xs, geom, start, end, &mut col[..rows * patch]);
                    // dW[c_out, patch] += dy_chunk^T @ col
                    kern::gemm_tn_acc(dy_chunk, &col[..rows * patch], &mut dw, rows, c_out, patch);
                }
                if need_dx {
                    // dcol[rows, patch] = dy_chunk @ W[c_out, patch]
                    let mut dcol = vec![T::ZERO; rows * patch];
                    kern::gemm_nn_acc(dy_chunk, ws, &mut dcol, rows, c_out, patch);
                    kern::col2im_chunk_add(&dcol, geom, start, end, &mut dx);
                }
                start = end;
            }
            if need_dx {
                sink(x, dx);
            }
            if need_dw {
                sink(w, dw);
            }
        }
        Op::Reshape(x) => sink(x, g.to_vec()),
        Op::Permute { x, axes } => {
            let mut inverse = vec![0usize; axes.len()];
            for (i, &a) in axes.iter().enumerate() {
                inverse[a] = i;
            }
            sink(x, kern::permute_copy(g, node.dims(), &inverse));
        }
        Op::Broadcast(x) => {
            sink(x, kern::broadcast_reduce(g, x.dims(), node.dims()));
        }
        Op::Concat { xs, axis } => {
            let mut offset = 0;
            for x in xs {
                let extent = x.dims()[*axis];
                let ranges: Vec<(usize, usize, usize)> = node
                    .dims()
                    .iter()
                    .enumerate()
                    .map(|(i, &d)| {
                        if i == *axis {
                            (offset, offset + extent, 1)
                        } else {
                            (0, d, 1)
                        }
                    })
                    .collect();
                sink(x, kern::slice_copy(g, node.dims(), &ranges));
                offset += extent;
            }
        }
        Op::Slice { x, ranges } => {
            let mut dx = vec![T::ZERO; numel(x.dims())];
            kern::slice_scatter_add(g, x.dims(), ranges, &mut dx);
            sink(x, dx);
        }
        Op::Roll { x, shifts } => {
            let inverse: Vec<i64> = shifts.iter().map(|&s| -s).collect();
            sink(x, kern::roll_copy(g, node.dims(), &inverse));
        }
        Op::SumAll(x) => {
            sink(x, vec![g[0]; numel(x.dims())]);
        }
        Op::GatherRows { x, indices } => {
            let row_len = numel(&x.dims()[1..]);
            let mut dx = vec![T::ZERO; numel(x.dims())];
            kern::scatter_rows_add(g, row_len, indices, &mut dx);
            sink(x, dx);
        }
        Op::Cast(x) => {
            // widen/narrow the gradient back to the input dtype
            let contrib: Vec<f64> = g.iter().map(|&v| v.to_f64()).collect();
            match x.dtype() {
                super::DType::F32 => {
                    let v: Vec<f32> = contrib.iter().map(|&v| v as f32).collect();
                    if x.requires_grad() {
                        sink_other(x, Storage::F32(v));
                    }
                }
                super::DType::F64 => {
                    if x.requires_grad() {
                        sink_other(x, Storage::F64(contrib));
                    }
                }
            }

            // Cast crosses dtypes, which the typed sink cannot represent.
            // The graph is single-dtype everywhere else, so a cast boundary
            // only ever feeds constants in practice; deposit directly.
            fn sink_other(x: &Tensor, s: Storage) {
                if x.inner.op.is_some() {
                    panic!("cast backward into a non-leaf is unsupported");
                }
                x.add_to_grad(&s);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::super::{DType, NoGradGuard, Storage, Tensor};

    #[test]
    fn linear_loss_grad_is_input() {
        let w = Tensor::leaf(&[3], Storage::F64(vec![0.5, -1.0, 2.0])).unwrap();
        let x = Tensor::from_f64(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        let loss = w.mul(&x).unwrap().sum_all().unwrap();
        loss.backward().unwrap();
        match w.grad().unwrap() {
            Storage::F64(g) => assert_eq!(g, vec![1.0, 2.0, 3.0]),
            _ => panic!("dtype"),
        }
    }

    #[test]
    fn quadratic_loss_grad_is_two_w() {
        let w = Tensor::leaf(&[3], Storage::F64(vec![0.5, -1.0, 2.0])).unwrap();
        let loss = w.mul(&w).unwrap().sum_all().unwrap();
        loss.backward().unwrap();
        match w.grad().unwrap() {
            Storage::F64(g) => assert_eq!(g, vec![1.0, -2.0, 4.0]),
            _ => panic!("dtype"),
        }
    }

    #[test]
    fn backward_requires_scalar() {
        let w = Tensor::leaf(&[2], Storage::F32(vec![1.0, 2.0])).unwrap();
        let y = w.mul(&w).unwrap();
        assert!(y.backward().is_err());
    }

    #[test]
    fn graph_consumed_on_second_backward() {
        let w = Tensor::leaf(&[2], Storage::F32(vec![1.0, 2.0])).unwrap();
        let loss = w.sum_all().unwrap();
        loss.backward().unwrap();
        assert!(loss.backward().is_err());
    }

    #[test]
    fn default_backward_resets_accumulate_adds() {
        let w = Tensor::leaf(&[1], Storage::F64(vec![3.0])).unwrap();
        let run = |w: &Tensor| w.mul(w).unwrap().sum_all().unwrap();
        run(&w).backward().unwrap();
        run(&w).backward().unwrap();
        match w.grad().unwrap() {
            Storage::F64(g) => assert_eq!(g, vec![6.0], "default resets before populating"),
            _ => panic!("dtype"),
        }
        run(&w).backward_accumulate().unwrap();
        match w.grad().unwrap() {
            Storage::F64(g) => assert_eq!(g, vec![12.0], "accumulate sums onto existing"),
            _ => panic!("dtype"),
        }
    }

    #[test]
    fn no_grad_guard_suppresses_recording() {
        let w = Tensor::leaf(&[2], Storage::F32(vec![1.0, 2.0])).unwrap();
        let _guard = NoGradGuard::new();
        let y = w.mul(&w).unwrap();
        assert!(!y.requires_grad());
        assert!(y.inner.op.is_none());
    }

    #[test]
    fn grad_flows_through_mixed_constant_graph() {
        let w = Tensor::leaf(&[2, 2], Storage::F64(vec![1.0, 0.0, 0.0, 1.0])).unwrap();
        let c = Tensor::from_f64(&[2, 2], vec![2.0, 3.0, 4.0, 5.0]).unwrap();
        let loss = w.matmul(&c).unwrap().sum_all().unwrap();
        loss.backward().unwrap();
        // d/dW sum(W C) = row sums of C broadcast: grad[i][k] = sum_j C[k][j]
        match w.grad().unwrap() {
            Storage::F64(g) => assert_eq!(g, vec![5.0, 9.0, 5.0, 9.0]),
            _ => panic!("dtype"),
        }
        assert!(c.grad().is_none(), "constants collect no gradient");
    }

    #[test]
    fn backward_on_constant_loss_is_noop() {
        let c = Tensor::from_f32(&[1], vec![2.0]).unwrap();
        let loss = c.scale(3.0).unwrap();
        loss.backward().unwrap();
    }

    #[test]
    fn dtype_of_graph_is_uniform_f32() {
        let w = Tensor::leaf(&[2], Storage::F32(vec![0.25, -0.5])).unwrap();
        let loss = w.gelu().unwrap().sum_all().unwrap();
        loss.backward().unwrap();
        assert!(matches!(w.grad().unwrap(), Storage::F32(_)));
    }
}
