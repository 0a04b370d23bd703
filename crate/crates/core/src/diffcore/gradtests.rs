//! Randomized per-primitive gradient checks against central differences.
//!
//! Inputs for kinked primitives (relu, max-pool, clamp) are sampled away
//! from their kinks so the finite-difference oracle stays valid.

#![cfg(test)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use super::{finite_difference, max_relative_error, Tensor};

const TOLERANCE: f64 = 1e-4;
const STEP: f64 = 1e-5;
const SEEDS: u64 = 100;

fn smooth_values(rng: &mut ChaCha12Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.5..1.5)).collect()
}

/// Values bounded away from zero, for primitives with a kink there.
fn kink_safe_values(rng: &mut ChaCha12Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            sign * rng.gen_range(0.05..1.5)
        })
        .collect()
}

fn positive_values(rng: &mut ChaCha12Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(0.1..2.0)).collect()
}

/// Reduce an output tensor to a scalar with fixed random weights so every
/// output element feeds the objective with a distinct coefficient.
fn weighted(out: &Tensor, weights: &Tensor) -> Tensor {
    out.mul(weights).unwrap().sum_all()
}

/// Check d(objective)/d(leaf) for every leaf against central differences.
fn check(leaves: &[&Tensor], objective: impl Fn() -> Tensor, label: &str) {
    for leaf in leaves {
        leaf.zero_grad();
    }
    objective().backward().unwrap();
    for (i, leaf) in leaves.iter().enumerate() {
        let analytic = leaf.grad().unwrap_or_else(|| vec![0.0; leaf.numel()]);
        let fd = finite_difference(leaf, STEP, || objective().item()).unwrap();
        let err = max_relative_error(&analytic, &fd);
        assert!(err < TOLERANCE, "{label} leaf {i}: relative error {err}");
    }
}

#[test]
fn primitive_gradients_match_finite_differences() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);

        // matmul: (2,3) x (3,2)
        let a = Tensor::param(&[2, 3], smooth_values(&mut rng, 6));
        let b = Tensor::param(&[3, 2], smooth_values(&mut rng, 6));
        let w = Tensor::constant(&[2, 2], smooth_values(&mut rng, 4));
        check(
            &[&a, &b],
            || weighted(&a.matmul(&b).unwrap(), &w),
            "matmul",
        );

        // conv2d with bias, stride 1, padding 1.
        let x = Tensor::param(&[1, 3, 3], smooth_values(&mut rng, 9));
        let k = Tensor::param(&[2, 1, 2, 2], smooth_values(&mut rng, 8));
        let bias = Tensor::param(&[2], smooth_values(&mut rng, 2));
        let w = Tensor::constant(&[2, 4, 4], smooth_values(&mut rng, 32));
        check(
            &[&x, &k, &bias],
            || weighted(&x.conv2d(&k, Some(&bias), 1, 1).unwrap(), &w),
            "conv2d/p1",
        );

        // conv2d stride 2, no padding.
        let x2 = Tensor::param(&[2, 4, 4], smooth_values(&mut rng, 32));
        let k2 = Tensor::param(&[1, 2, 2, 2], smooth_values(&mut rng, 8));
        let w = Tensor::constant(&[1, 2, 2], smooth_values(&mut rng, 4));
        check(
            &[&x2, &k2],
            || weighted(&x2.conv2d(&k2, None, 2, 0).unwrap(), &w),
            "conv2d/s2",
        );

        // max-pool on tie-free input.
        let xp = Tensor::param(&[1, 4, 4], kink_safe_values(&mut rng, 16));
        let w = Tensor::constant(&[1, 2, 2], smooth_values(&mut rng, 4));
        check(&[&xp], || weighted(&xp.max_pool2d(2).unwrap(), &w), "max_pool2d");

        // relu away from the origin kink.
        let xr = Tensor::param(&[6], kink_safe_values(&mut rng, 6));
        let w = Tensor::constant(&[6], smooth_values(&mut rng, 6));
        check(&[&xr], || weighted(&xr.relu(), &w), "relu");

        // sigmoid, softmax (rows), ln, clamp interior.
        let xs = Tensor::param(&[5], smooth_values(&mut rng, 5));
        let w5 = Tensor::constant(&[5], smooth_values(&mut rng, 5));
        check(&[&xs], || weighted(&xs.sigmoid(), &w5), "sigmoid");

        let xm = Tensor::param(&[2, 4], smooth_values(&mut rng, 8));
        let w8 = Tensor::constant(&[2, 4], smooth_values(&mut rng, 8));
        check(&[&xm], || weighted(&xm.softmax().unwrap(), &w8), "softmax");

        let xl = Tensor::param(&[4], positive_values(&mut rng, 4));
        let w4 = Tensor::constant(&[4], smooth_values(&mut rng, 4));
        check(&[&xl], || weighted(&xl.ln(), &w4), "ln");

        let xc = Tensor::param(&[4], smooth_values(&mut rng, 4));
        check(&[&xc], || weighted(&xc.clamp(-4.0, 4.0), &w4), "clamp");

        // Elementwise pairs, scale, add_scalar.
        let ea = Tensor::param(&[2, 2], smooth_values(&mut rng, 4));
        let eb = Tensor::param(&[2, 2], smooth_values(&mut rng, 4));
        let w4m = Tensor::constant(&[2, 2], smooth_values(&mut rng, 4));
        check(&[&ea, &eb], || weighted(&ea.add(&eb).unwrap(), &w4m), "add");
        check(&[&ea, &eb], || weighted(&ea.sub(&eb).unwrap(), &w4m), "sub");
        check(&[&ea, &eb], || weighted(&ea.mul(&eb).unwrap(), &w4m), "mul");
        check(&[&ea], || weighted(&ea.scale(-1.7), &w4m), "scale");
        check(&[&ea], || weighted(&ea.add_scalar(0.31), &w4m), "add_scalar");

        // concat along both axes.
        let ca = Tensor::param(&[2, 2], smooth_values(&mut rng, 4));
        let cb = Tensor::param(&[2, 1], smooth_values(&mut rng, 2));
        let w6 = Tensor::constant(&[2, 3], smooth_values(&mut rng, 6));
        check(
            &[&ca, &cb],
            || weighted(&Tensor::concat(&[ca.clone(), cb.clone()], 1).unwrap(), &w6),
            "concat/1",
        );
        let cc = Tensor::param(&[1, 2], smooth_values(&mut rng, 2));
        let w6b = Tensor::constant(&[3, 2], smooth_values(&mut rng, 6));
        check(
            &[&ca, &cc],
            || weighted(&Tensor::concat(&[ca.clone(), cc.clone()], 0).unwrap(), &w6b),
            "concat/0",
        );

        // Reductions and reshape.
        let m = Tensor::param(&[3, 2], smooth_values(&mut rng, 6));
        let w2 = Tensor::constant(&[2], smooth_values(&mut rng, 2));
        let w3 = Tensor::constant(&[3], smooth_values(&mut rng, 3));
        check(&[&m], || weighted(&m.sum_axis(0).unwrap(), &w2), "sum_axis/0");
        check(&[&m], || weighted(&m.sum_axis(1).unwrap(), &w3), "sum_axis/1");
        check(&[&m], || m.sum_all(), "sum_all");
        check(&[&m], || m.mean(), "mean");
        let w6c = Tensor::constant(&[2, 3], smooth_values(&mut rng, 6));
        check(
            &[&m],
            || weighted(&m.reshape(&[2, 3]).unwrap(), &w6c),
            "reshape",
        );
    }
}
