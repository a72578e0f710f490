//! Finite-difference checks for every differentiable operator, run on small
//! random inputs over several seeds at 64-bit precision.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use swincross::tensor::grad_check::grad_check;
use swincross::{Parameter, Result, Storage, Tensor};

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
const TOL: f64 = 1e-6;

fn rand_param(name: &str, shape: &[usize], rng: &mut ChaCha8Rng) -> Parameter {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Parameter::new(name, Tensor::leaf(shape, Storage::F64(data)).unwrap())
}

fn check(seed: u64, params: Vec<Parameter>, f: impl Fn() -> Result<Tensor>) {
    let report = grad_check(&f, &params, 1e-5, TOL, 16, seed).unwrap();
    assert!(
        report.passed(),
        "seed {seed}: max rel error {:.3e} at {:?}",
        report.max_rel_error,
        report.worst
    );
}

#[test]
fn grad_matmul_both_operands() {
    for seed in SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = rand_param("a", &[3, 4], &mut rng);
        let b = rand_param("b", &[4, 2], &mut rng);
        let (at, bt) = (a.tensor.clone(), b.tensor.clone());
        check(seed, vec![a, b], move || at.matmul(&bt)?.sum_all());
    }
}

#[test]
fn grad_matmul_batched_shared_rhs() {
    for seed in SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = rand_param("a", &[2, 3, 3, 4], &mut rng);
        let b = rand_param("b", &[4, 2], &mut rng);
        let (at, bt) = (a.tensor.clone(), b.tensor.clone());
        check(seed, vec![a, b], move || at.matmul(&bt)?.sum_all());
    }
}

#[test]
fn grad_matmul_batched_pair() {
    for seed in SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = rand_param("a", &[2, 2, 3], &mut rng);
        let b = rand_param("b", &[2, 3, 2], &mut rng);
        let (at, bt) = (a.tensor.clone(), b.tensor.clone());
        check(seed, vec![a, b], move || at.matmul(&bt)?.sum_all());
    }
}

#[test]
fn grad_softmax() {
    for seed in SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_param("x", &[3, 5], &mut rng);
        let w = rand_param("w", &[3, 5], &mut rng);
        let (xt, wt) = (x.tensor.clone(), w.tensor.clone());
        // weighted sum keeps the check sensitive to every output entry
        check(seed, vec![x, w], move || {
            xt.softmax_lastdim()?.mul(&wt)?.sum_all()
        });
    }
}

#[test]
fn grad_layer_norm() {
    for seed in SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_param("x", &[4, 6], &mut rng);
        let gamma = rand_param("gamma", &[6], &mut rng);
        let beta = rand_param("beta", &[6], &mut rng);
        let probe = rand_param("probe", &[4, 6], &mut rng);
        let (xt, gt, bt, pt) = (
            x.tensor.clone(),
            gamma.tensor.clone(),
            beta.tensor.clone(),
            probe.tensor.clone(),
        );
        check(seed, vec![x, gamma, beta, probe], move || {
            xt.layer_norm(&gt, &bt, 1e-5)?.mul(&pt)?.sum_all()
        });
    }
}

#[test]
fn grad_instance_norm3d() {
    for seed in SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_param("x", &[2, 2, 3, 2], &mut rng);
        let gamma = rand_param("gamma", &[2], &mut rng);
        let beta = rand_param("beta", &[2], &mut rng);
        let probe = rand_param("probe", &[2, 2, 3, 2], &mut rng);
        let (xt, gt, bt, pt) = (
            x.tensor.clone(),
            gamma.tensor.clone(),
            beta.tensor.clone(),
            probe.tensor.clone(),
        );
        check(seed, vec![x, gamma, beta, probe], move || {
            xt.instance_norm3d(&gt, &bt, 1e-5)?.mul(&pt)?.sum_all()
        });
    }
}

#[test]
fn grad_conv3d() {
    for seed in SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_param("x", &[2, 4, 4, 4], &mut rng);
        let w = rand_param("w", &[3, 2, 3, 3, 3], &mut rng);
        let (xt, wt) = (x.tensor.clone(), w.tensor.clone());
        check(seed, vec![x, w], move || xt.conv3d(&wt, 1, 1)?.sum_all());
    }
}

#[test]
fn grad_conv3d_strided() {
    for seed in SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_param("x", &[1, 4, 4, 4], &mut rng);
        let w = rand_param("w", &[2, 1, 2, 2, 2], &mut rng);
        let (xt, wt) = (x.tensor.clone(), w.tensor.clone());
        check(seed, vec![x, w], move || xt.conv3d(&wt, 2, 0)?.sum_all());
    }
}

#[test]
fn grad_conv_transpose3d() {
    for seed in SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_param("x", &[2, 2, 2, 2], &mut rng);
        let w = rand_param("w", &[2, 3, 2, 2, 2], &mut rng);
        let (xt, wt) = (x.tensor.clone(), w.tensor.clone());
        check(seed, vec![x, w], move || {
            xt.conv_transpose3d(&wt, 2)?.sum_all()
        });
    }
}

#[test]
fn grad_elementwise_chain() {
    // gelu -> sigmoid -> mul -> affine in one chain
    for seed in SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_param("x", &[3, 4], &mut rng);
        let y = rand_param("y", &[3, 4], &mut rng);
        let (xt, yt) = (x.tensor.clone(), y.tensor.clone());
        check(seed, vec![x, y], move || {
            xt.gelu()?
                .mul(&yt.sigmoid()?)?
                .affine(1.7, 0.3)?
                .sum_all()
        });
    }
}

#[test]
fn grad_leaky_relu() {
    for seed in SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_param("x", &[4, 4], &mut rng);
        let xt = x.tensor.clone();
        check(seed, vec![x], move || xt.leaky_relu(0.01)?.sum_all());
    }
}

#[test]
fn grad_ln_recip_clamp() {
    for seed in SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // keep values away from the clamp boundary and the log pole
        let data: Vec<f64> = (0..12).map(|_| rng.gen_range(0.2..0.8)).collect();
        let x = Parameter::new("x", Tensor::leaf(&[12], Storage::F64(data)).unwrap());
        let xt = x.tensor.clone();
        check(seed, vec![x], move || {
            xt.clamp(1e-7, 1.0 - 1e-7)?.ln()?.recip()?.sum_all()
        });
    }
}

#[test]
fn grad_shape_movement() {
    // reshape -> permute -> roll -> slice -> concat -> broadcast survive FD
    for seed in SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_param("x", &[2, 3, 4], &mut rng);
        let y = rand_param("y", &[2, 3, 4], &mut rng);
        let (xt, yt) = (x.tensor.clone(), y.tensor.clone());
        check(seed, vec![x, y], move || {
            let moved = xt
                .reshape(&[6, 4])?
                .permute(&[1, 0])?
                .roll(&[1, -2])?
                .reshape(&[2, 3, 4])?;
            let both = Tensor::concat(&[moved, yt.clone()], 1)?;
            let cut = both.slice(&[(0, 2, 1), (1, 6, 2), (0, 4, 1)])?;
            cut.mul(&cut)?.sum_all()
        });
    }
}

#[test]
fn grad_broadcast() {
    for seed in SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_param("x", &[1, 4], &mut rng);
        let w = rand_param("w", &[3, 2, 4], &mut rng);
        let (xt, wt) = (x.tensor.clone(), w.tensor.clone());
        check(seed, vec![x, w], move || {
            xt.broadcast_to(&[3, 2, 4])?.mul(&wt)?.sum_all()
        });
    }
}

#[test]
fn grad_index_select0() {
    for seed in SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let table = rand_param("table", &[5, 3], &mut rng);
        let idx = Arc::new(vec![0usize, 2, 2, 4, 1]);
        let tt = table.tensor.clone();
        check(seed, vec![table], move || {
            tt.index_select0(idx.clone())?.sum_all()
        });
    }
}
