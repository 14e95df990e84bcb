use horst::gradcheck::{grad_check, DEFAULT_EPSILON};
use horst::graph::softmax_scaled;
use horst::{Graph, Result, Tensor, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-4;

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::uniform(shape, 1.0, rng)
}

/// Values bounded away from zero so ReLU kinks sit far outside the
/// finite-difference stencil.
fn off_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.gen_range(0.05..1.0);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Channel vectors whose entries are at least `0.5 / c` apart, so the
/// per-pixel max never switches under a small perturbation.
fn well_separated(c: usize, h: usize, w: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let mut data = vec![0.0; c * h * w];
    for p in 0..h * w {
        let mut levels: Vec<usize> = (0..c).collect();
        for i in (1..c).rev() {
            levels.swap(i, rng.gen_range(0..=i));
        }
        for (ch, &lv) in levels.iter().enumerate() {
            data[ch * h * w + p] = lv as f64 / c as f64 + rng.gen_range(0.0..0.25 / c as f64);
        }
    }
    Tensor::new(vec![c, h, w], data).unwrap()
}

/// Reduces `out` to a scalar by a dot product with a fixed random tensor.
fn project(g: &mut Graph, out: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let r = g.constant(rand_tensor(g.shape(out), &mut rng));
    g.dot(out, r)
}

fn check<F>(f: F, params: &[Tensor]) -> f64
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    grad_check(f, params, DEFAULT_EPSILON)
        .unwrap()
        .max_rel_error
}

fn dims() -> impl Strategy<Value = (usize, usize, usize, u64)> {
    (1usize..=4, 1usize..=6, 1usize..=6, any::<u64>())
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 24, ..ProptestConfig::default() })]

    #[test]
    fn conv2d_gradients((c, h, w, seed) in dims(), stride in 1usize..=2, co in 1usize..=3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_tensor(&[c, h, w], &mut rng);
        let k = rand_tensor(&[co, c, 3, 3], &mut rng);
        let err = check(|g, p| { let y = g.conv2d(p[0], p[1], stride)?; project(g, y, seed) }, &[x, k]);
        prop_assert!(err <= TOL, "max rel error {err}");
    }

    #[test]
    fn layer_norm_gradients((c, h, w, seed) in dims()) {
        prop_assume!(c >= 2);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_tensor(&[c, h, w], &mut rng);
        let gamma = rand_tensor(&[c], &mut rng);
        let beta = rand_tensor(&[c], &mut rng);
        let err = check(
            |g, p| { let y = g.layer_norm(p[0], p[1], p[2], 1e-5)?; project(g, y, seed) },
            &[x, gamma, beta],
        );
        prop_assert!(err <= TOL, "max rel error {err}");
    }

    #[test]
    fn softmax_gradients(n in 1usize..=8, scale in 0.1f64..3.0, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_tensor(&[n], &mut rng);
        let err = check(|g, p| { let y = g.softmax_scaled(p[0], scale)?; project(g, y, seed) }, &[x]);
        prop_assert!(err <= TOL, "max rel error {err}");
    }

    #[test]
    fn pointwise_gradients((c, h, w, seed) in dims()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = off_zero(&[c, h, w], &mut rng);
        let err = check(|g, p| { let y = g.relu(p[0]); project(g, y, seed) }, std::slice::from_ref(&x));
        prop_assert!(err <= TOL, "relu: {err}");
        let err = check(|g, p| { let y = g.sigmoid(p[0]); project(g, y, seed) }, &[x]);
        prop_assert!(err <= TOL, "sigmoid: {err}");
    }

    #[test]
    fn pooling_gradients((c, h, w, seed) in dims()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = well_separated(c, h, w, &mut rng);
        let err = check(|g, p| { let y = g.channel_pool(p[0])?; project(g, y, seed) }, std::slice::from_ref(&x));
        prop_assert!(err <= TOL, "channel_pool: {err}");
        let err = check(|g, p| { let y = g.spatial_avg_pool(p[0])?; project(g, y, seed) }, std::slice::from_ref(&x));
        prop_assert!(err <= TOL, "spatial_avg_pool: {err}");
        let err = check(|g, p| { let y = g.avg_pool2(p[0])?; project(g, y, seed) }, &[x]);
        prop_assert!(err <= TOL, "avg_pool2: {err}");
    }

    #[test]
    fn combination_gradients((c, h, w, seed) in dims()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = rand_tensor(&[c, h, w], &mut rng);
        let b = rand_tensor(&[c, h, w], &mut rng);
        let m = rand_tensor(&[1, h, w], &mut rng);
        let q = rand_tensor(&[c], &mut rng);
        let t = rand_tensor(&[3], &mut rng);
        let err = check(|g, p| { let y = g.concat(&[p[0], p[1]])?; project(g, y, seed) }, &[a.clone(), b.clone()]);
        prop_assert!(err <= TOL, "concat: {err}");
        let err = check(|g, p| { let y = g.mul(p[0], p[1])?; project(g, y, seed) }, &[a.clone(), b.clone()]);
        prop_assert!(err <= TOL, "mul: {err}");
        let err = check(|g, p| g.dot(p[0], p[1]), &[a.clone(), b.clone()]);
        prop_assert!(err <= TOL, "dot: {err}");
        let err = check(|g, p| { let y = g.mul_map(p[0], p[1])?; project(g, y, seed) }, &[a.clone(), m]);
        prop_assert!(err <= TOL, "mul_map: {err}");
        let err = check(|g, p| { let y = g.channel_dot(p[0], p[1])?; project(g, y, seed) }, &[q, a.clone()]);
        prop_assert!(err <= TOL, "channel_dot: {err}");
        let err = check(|g, p| { let y = g.scale_entry(p[0], p[1], 2)?; project(g, y, seed) }, &[a.clone(), t]);
        prop_assert!(err <= TOL, "scale_entry: {err}");
        let err = check(|g, p| { let y = g.add_n(&[p[0], p[1], p[0]])?; project(g, y, seed) }, &[a, b]);
        prop_assert!(err <= TOL, "add_n: {err}");
    }

    #[test]
    fn softmax_is_a_distribution(scores in prop::collection::vec(-50.0f64..50.0, 1..10), scale in 0.01f64..5.0) {
        let p = softmax_scaled(&scores, scale);
        let s: f64 = p.iter().sum();
        prop_assert!((s - 1.0).abs() <= 1e-6);
        prop_assert!(p.iter().all(|&v| v > 0.0 && v <= 1.0));
    }
}

#[test]
fn head_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = rand_tensor(&[6], &mut rng);
    let w = rand_tensor(&[4, 6], &mut rng);
    let b = rand_tensor(&[4], &mut rng);
    let err = check(
        |g, p| {
            let logits = g.linear(p[0], p[1], p[2])?;
            g.cross_entropy(logits, 2)
        },
        &[x, w, b],
    );
    assert!(err <= TOL, "{err}");
}

#[test]
fn shared_input_accumulates_both_branches() {
    // f(x) = sum(x * x) + 3 sum(x) through two consumers of x, compared with
    // the single-expression derivative 2x + 3.
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x0 = rand_tensor(&[2, 2, 2], &mut rng);
    let mut g = Graph::new();
    let x = g.param(x0.clone());
    let sq = g.dot(x, x).unwrap();
    let ones = g.constant(Tensor::full(&[2, 2, 2], 3.0));
    let lin = g.dot(x, ones).unwrap();
    let f = g.add(sq, lin).unwrap();
    let grad = g.backward(f).unwrap().get(x).unwrap();
    for (gv, xv) in grad.data().iter().zip(x0.data()) {
        assert!((gv - (2.0 * xv + 3.0)).abs() < 1e-12);
    }
}

#[test]
fn conv_identity_kernel_is_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x0 = rand_tensor(&[1, 5, 7], &mut rng);
    let mut k = Tensor::zeros(&[1, 1, 3, 3]);
    k.data_mut()[4] = 1.0;
    let mut g = Graph::new();
    let x = g.constant(x0.clone());
    let k = g.constant(k);
    let y = g.conv2d(x, k, 1).unwrap();
    assert_eq!(g.value(y), &x0);
}
