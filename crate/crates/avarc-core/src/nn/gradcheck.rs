//! Central finite-difference checks for every backward pass.

use ndarray::{Array2, Array3};
use rand::Rng;

use super::*;
use crate::rng::rng_from_seed;

const H: f64 = 1e-5;
const TOL: f64 = 1e-6;

fn analytic_grad(obj: &mut dyn HasParams, idx: usize) -> f64 {
    let mut seen = 0;
    let mut out = f64::NAN;
    obj.visit_params("", &mut |p| {
        if idx >= seen && idx < seen + p.value.len() {
            out = *p.grad.iter().nth(idx - seen).unwrap();
        }
        seen += p.value.len();
    });
    out
}

/// Checks d(loss)/d(param) for `n_probe` randomly chosen parameters.
/// `run` must compute the scalar loss and, when `backward` is true,
/// accumulate gradients (grads are zeroed beforehand).
pub fn check_params<M, F>(obj: &mut M, mut run: F, n_probe: usize, seed: u64, tol: f64)
where
    M: HasParams,
    F: FnMut(&mut M, bool) -> f64,
{
    obj.zero_grads();
    let _ = run(obj, true);
    let total = obj.param_count();
    let mut rng = rng_from_seed(seed);
    for _ in 0..n_probe {
        let idx = rng.random_range(0..total);
        let orig = get_param_scalar(obj, idx);
        set_param_scalar(obj, idx, orig + H);
        let lp = run(obj, false);
        set_param_scalar(obj, idx, orig - H);
        let lm = run(obj, false);
        set_param_scalar(obj, idx, orig);
        let fd = (lp - lm) / (2.0 * H);
        let an = analytic_grad(obj, idx);
        let denom = fd.abs().max(an.abs()).max(1e-8);
        assert!(
            ((fd - an) / denom).abs() < tol,
            "param {idx}: analytic {an} vs fd {fd}"
        );
    }
}

fn quadratic_loss(y: &Array2<f64>, target: &Array2<f64>) -> (f64, Array2<f64>) {
    let diff = y - target;
    let loss = diff.iter().map(|d| d * d).sum::<f64>();
    (loss, diff.mapv(|d| 2.0 * d))
}

#[test]
fn linear_grads() {
    let mut rng = rng_from_seed(1);
    let x = Array2::from_shape_fn((5, 4), |_| rng.random::<f64>() - 0.5);
    let t = Array2::from_shape_fn((5, 3), |_| rng.random::<f64>() - 0.5);
    let mut lin = Linear::new(&mut rng_from_seed(2), 4, 3);
    check_params(
        &mut lin,
        |l, back| {
            let y = l.forward(x.view());
            let (loss, dy) = quadratic_loss(&y, &t);
            if back {
                l.backward(x.view(), dy.view());
            }
            loss
        },
        20,
        3,
        TOL,
    );
}

#[test]
fn linear_input_grad() {
    let mut rng = rng_from_seed(4);
    let mut x = Array2::from_shape_fn((5, 4), |_| rng.random::<f64>() - 0.5);
    let t = Array2::from_shape_fn((5, 3), |_| rng.random::<f64>() - 0.5);
    let mut lin = Linear::new(&mut rng_from_seed(5), 4, 3);
    let y = lin.forward(x.view());
    let (_, dy) = quadratic_loss(&y, &t);
    let dx = lin.backward(x.view(), dy.view());
    for idx in [(0usize, 0usize), (2, 1), (4, 3)] {
        let orig = x[idx];
        x[idx] = orig + H;
        let lp = quadratic_loss(&lin.forward(x.view()), &t).0;
        x[idx] = orig - H;
        let lm = quadratic_loss(&lin.forward(x.view()), &t).0;
        x[idx] = orig;
        let fd = (lp - lm) / (2.0 * H);
        assert!((fd - dx[idx]).abs() < 1e-6, "dx {idx:?}: {fd} vs {}", dx[idx]);
    }
}

#[test]
fn layernorm_grads() {
    let mut rng = rng_from_seed(6);
    let x = Array2::from_shape_fn((4, 6), |_| rng.random::<f64>() * 2.0 - 1.0);
    let t = Array2::from_shape_fn((4, 6), |_| rng.random::<f64>() - 0.5);
    let mut ln = LayerNorm::new(6);
    // non-trivial gamma/beta
    ln.gamma.mapv_inplace(|_| rng.random::<f64>() + 0.5);
    ln.beta.mapv_inplace(|_| rng.random::<f64>() - 0.5);
    check_params(
        &mut ln,
        |l, back| {
            let (y, cache) = l.forward(x.view());
            let (loss, dy) = quadratic_loss(&y, &t);
            if back {
                l.backward(&cache, dy.view());
            }
            loss
        },
        12,
        7,
        TOL,
    );
}

#[test]
fn layernorm_input_grad() {
    let mut rng = rng_from_seed(8);
    let mut x = Array2::from_shape_fn((3, 5), |_| rng.random::<f64>() * 2.0 - 1.0);
    let t = Array2::from_shape_fn((3, 5), |_| rng.random::<f64>() - 0.5);
    let mut ln = LayerNorm::new(5);
    ln.gamma.mapv_inplace(|_| rng.random::<f64>() + 0.5);
    let (y, cache) = ln.forward(x.view());
    let (_, dy) = quadratic_loss(&y, &t);
    let dx = ln.backward(&cache, dy.view());
    for idx in [(0usize, 0usize), (1, 3), (2, 4)] {
        let orig = x[idx];
        x[idx] = orig + H;
        let lp = quadratic_loss(&ln.forward(x.view()).0, &t).0;
        x[idx] = orig - H;
        let lm = quadratic_loss(&ln.forward(x.view()).0, &t).0;
        x[idx] = orig;
        let fd = (lp - lm) / (2.0 * H);
        assert!((fd - dx[idx]).abs() < 1e-6, "dx {idx:?}: {fd} vs {}", dx[idx]);
    }
}

#[test]
fn attention_grads_with_block_mask() {
    let mut rng = rng_from_seed(9);
    let n = 7;
    let dim = 8;
    let limits = vec![1, 3, 3, 7, 7, 7, 7];
    let x = Array2::from_shape_fn((n, dim), |_| rng.random::<f64>() - 0.5);
    let t = Array2::from_shape_fn((n, dim), |_| rng.random::<f64>() - 0.5);
    let mut attn = BlockCausalAttention::new(&mut rng_from_seed(10), dim, 2);
    let lim = limits.clone();
    check_params(
        &mut attn,
        move |a, back| {
            let (y, cache) = a.forward(x.view(), &lim);
            let (loss, dy) = quadratic_loss(&y, &t);
            if back {
                a.backward(x.view(), &cache, dy.view(), &lim);
            }
            loss
        },
        24,
        11,
        TOL,
    );
}

#[test]
fn attention_input_grad() {
    let mut rng = rng_from_seed(12);
    let n = 5;
    let dim = 6;
    let limits = vec![1, 3, 3, 5, 5];
    let mut x = Array2::from_shape_fn((n, dim), |_| rng.random::<f64>() - 0.5);
    let t = Array2::from_shape_fn((n, dim), |_| rng.random::<f64>() - 0.5);
    let mut attn = BlockCausalAttention::new(&mut rng_from_seed(13), dim, 3);
    let (y, cache) = attn.forward(x.view(), &limits);
    let (_, dy) = quadratic_loss(&y, &t);
    let dx = attn.backward(x.view(), &cache, dy.view(), &limits);
    let mut rng2 = rng_from_seed(14);
    for _ in 0..8 {
        let idx = (rng2.random_range(0..n), rng2.random_range(0..dim));
        let orig = x[idx];
        x[idx] = orig + H;
        let lp = quadratic_loss(&attn.forward(x.view(), &limits).0, &t).0;
        x[idx] = orig - H;
        let lm = quadratic_loss(&attn.forward(x.view(), &limits).0, &t).0;
        x[idx] = orig;
        let fd = (lp - lm) / (2.0 * H);
        assert!(
            (fd - dx[idx]).abs() < 1e-6,
            "dx {idx:?}: {fd} vs {}",
            dx[idx]
        );
    }
}

#[test]
fn attention_infer_matches_train_forward() {
    let mut rng = rng_from_seed(15);
    let n = 9;
    let dim = 12;
    let limits = vec![1, 5, 5, 5, 5, 9, 9, 9, 9];
    let x = Array2::from_shape_fn((n, dim), |_| rng.random::<f64>() - 0.5);
    let attn = BlockCausalAttention::new(&mut rng_from_seed(16), dim, 4);
    let (a, _) = attn.forward(x.view(), &limits);
    let b = attn.forward_infer(x.view(), &limits);
    assert_eq!(a, b);
}

#[test]
fn conv_grads_stride1_and_2() {
    for stride in [1usize, 2] {
        let mut rng = rng_from_seed(17 + stride as u64);
        let x = Array3::from_shape_fn((2, 6, 6), |_| rng.random::<f64>() - 0.5);
        let mut conv = Conv2d::new(&mut rng_from_seed(19), 2, 3, stride);
        let (oh, ow) = conv.out_hw(6, 6);
        let t = Array3::from_shape_fn((3, oh, ow), |_| rng.random::<f64>() - 0.5);
        check_params(
            &mut conv,
            |c, back| {
                let y = c.forward(x.view());
                let diff = &y - &t;
                let loss = diff.iter().map(|d| d * d).sum::<f64>();
                if back {
                    c.backward(x.view(), &diff.mapv(|d| 2.0 * d));
                }
                loss
            },
            16,
            20,
            TOL,
        );
    }
}

#[test]
fn conv_input_grad() {
    let mut rng = rng_from_seed(21);
    let mut x = Array3::from_shape_fn((2, 5, 5), |_| rng.random::<f64>() - 0.5);
    let mut conv = Conv2d::new(&mut rng_from_seed(22), 2, 2, 2);
    let (oh, ow) = conv.out_hw(5, 5);
    let t = Array3::from_shape_fn((2, oh, ow), |_| rng.random::<f64>() - 0.5);
    let loss_of = |c: &Conv2d, x: &Array3<f64>| {
        let y = c.forward(x.view());
        (&y - &t).iter().map(|d| d * d).sum::<f64>()
    };
    let y = conv.forward(x.view());
    let dx = conv.backward(x.view(), &(&y - &t).mapv(|d| 2.0 * d));
    let mut rng2 = rng_from_seed(23);
    for _ in 0..8 {
        let idx = (
            rng2.random_range(0..2),
            rng2.random_range(0..5),
            rng2.random_range(0..5),
        );
        let orig = x[idx];
        x[idx] = orig + H;
        let lp = loss_of(&conv, &x);
        x[idx] = orig - H;
        let lm = loss_of(&conv, &x);
        x[idx] = orig;
        let fd = (lp - lm) / (2.0 * H);
        assert!(
            (fd - dx[idx]).abs() < 1e-6,
            "dx {idx:?}: {fd} vs {}",
            dx[idx]
        );
    }
}

#[test]
fn transformer_block_grads() {
    use crate::model::TransformerBlock;
    let mut rng = rng_from_seed(24);
    let n = 5;
    let dim = 8;
    let limits = vec![1, 5, 5, 5, 5];
    let x = Array2::from_shape_fn((n, dim), |_| rng.random::<f64>() - 0.5);
    let t = Array2::from_shape_fn((n, dim), |_| rng.random::<f64>() - 0.5);
    let mut block = TransformerBlock::new(&mut rng_from_seed(25), dim, 2);
    let lim = limits.clone();
    check_params(
        &mut block,
        move |b, back| {
            let (y, cache) = b.forward_train(x.clone(), &lim);
            let (loss, dy) = quadratic_loss(&y, &t);
            if back {
                b.backward(&cache, dy.view(), &lim);
            }
            loss
        },
        24,
        26,
        TOL,
    );
}
