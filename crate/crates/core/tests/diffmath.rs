use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use seqcal_core::diffmath::{logsumexp, Axis, Graph, Tensor, Var};
use seqcal_core::Result;

const EPS: f64 = 1e-5;

type Build = fn(&mut Graph, &[Var]) -> Result<Var>;

fn random_tensor(rng: &mut ChaCha8Rng, (r, c): (usize, usize), away_from_zero: bool) -> Tensor {
    let data = (0..r * c)
        .map(|_| {
            let v: f64 = rng.gen_range(-1.5..1.5);
            if away_from_zero && v.abs() < 0.1 {
                0.5
            } else {
                v
            }
        })
        .collect();
    Tensor::matrix(r, c, data).unwrap()
}

/// `Σ out ∘ w` for a fixed random `w`, so every output cell matters.
fn weighted_root(g: &mut Graph, out: Var, rng: &mut ChaCha8Rng) -> Var {
    let shape = (g.value(out).rows(), g.value(out).cols());
    let w = g.constant(random_tensor(rng, shape, false));
    let prod = g.mul(out, w).unwrap();
    g.reduce_sum(prod).unwrap()
}

fn evaluate(inputs: &[Tensor], build: Build, weight_seed: u64) -> f64 {
    let mut g = Graph::new();
    let leaves: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let out = build(&mut g, &leaves).unwrap();
    let root = weighted_root(&mut g, out, &mut ChaCha8Rng::seed_from_u64(weight_seed));
    g.value(root).item().unwrap()
}

/// Relative error of the analytic gradient against central differences.
fn fd_error(shapes: &[(usize, usize)], seed: u64, away_from_zero: bool, build: Build) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs: Vec<Tensor> = shapes.iter().map(|&s| random_tensor(&mut rng, s, away_from_zero)).collect();
    let weight_seed = seed ^ 0x5eed;

    let mut g = Graph::new();
    let leaves: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let out = build(&mut g, &leaves).unwrap();
    let root = weighted_root(&mut g, out, &mut ChaCha8Rng::seed_from_u64(weight_seed));
    g.backward(root).unwrap();
    let analytic = g.gradients(&leaves);

    let (mut diff, mut na, mut nn) = (0.0f64, 0.0f64, 0.0f64);
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.len() {
            let mut shifted = inputs.clone();
            shifted[i].data_mut()[j] = input.data()[j] + EPS;
            let up = evaluate(&shifted, build, weight_seed);
            shifted[i].data_mut()[j] = input.data()[j] - EPS;
            let down = evaluate(&shifted, build, weight_seed);
            let numeric = (up - down) / (2.0 * EPS);
            let a = analytic[i][j];
            diff += (numeric - a).powi(2);
            na += a * a;
            nn += numeric * numeric;
        }
    }
    let scale = na.sqrt().max(nn.sqrt());
    if scale < 1e-12 {
        return diff.sqrt();
    }
    diff.sqrt() / scale
}

macro_rules! gradient_checks {
    ($($name:ident: $shapes:expr, $away:expr, $build:expr;)*) => {
        proptest! {
            #![proptest_config(ProptestConfig::with_cases(24))]
            $(
                #[test]
                fn $name(seed in any::<u64>()) {
                    let err = fd_error(&$shapes, seed, $away, $build);
                    prop_assert!(err <= 1e-4, "relative error {:e}", err);
                }
            )*
        }
    };
}

gradient_checks! {
    matmul_grad: [(2, 3), (3, 4)], false, |g, v| g.matmul(v[0], v[1]);
    add_grad: [(2, 3), (2, 3)], false, |g, v| g.add(v[0], v[1]);
    sub_grad: [(2, 3), (2, 3)], false, |g, v| g.sub(v[0], v[1]);
    mul_grad: [(3, 2), (3, 2)], false, |g, v| g.mul(v[0], v[1]);
    scale_grad: [(2, 2)], false, |g, v| g.scale(v[0], -1.7);
    offset_grad: [(2, 2)], false, |g, v| g.offset(v[0], 0.3);
    tanh_grad: [(3, 3)], false, |g, v| g.tanh(v[0]);
    exp_grad: [(3, 3)], false, |g, v| g.exp(v[0]);
    relu_grad: [(3, 3)], true, |g, v| g.relu(v[0]);
    gather_grad: [(5, 3)], false, |g, v| g.gather(v[0], &[4, 0, 4, 2]);
    concat_rows_grad: [(2, 3), (1, 3)], false, |g, v| g.concat(&[v[0], v[1], v[0]], Axis::Rows);
    concat_cols_grad: [(2, 3), (2, 1)], false, |g, v| g.concat(&[v[1], v[0]], Axis::Cols);
    log_softmax_cols_grad: [(3, 4)], false, |g, v| g.log_softmax(v[0], Axis::Cols);
    log_softmax_rows_grad: [(3, 4)], false, |g, v| g.log_softmax(v[0], Axis::Rows);
    reduce_sum_grad: [(3, 4)], false, |g, v| g.reduce_sum(v[0]);
    pick_grad: [(3, 4)], false, |g, v| g.pick(v[0], &[(0, 1), (2, 3), (0, 1)]);
    reshape_grad: [(2, 6)], false, |g, v| g.reshape(v[0], 3, 4);
    composite_grad: [(1, 3), (3, 5), (1, 5)], false, |g, v| {
        let h = g.matmul(v[0], v[1])?;
        let h = g.add(h, v[2])?;
        let h = g.tanh(h)?;
        let both = g.concat(&[h, v[2]], Axis::Rows)?;
        let lp = g.log_softmax(both, Axis::Cols)?;
        let e = g.exp(lp)?;
        g.mul(e, lp)
    };
}

proptest! {
    #[test]
    fn log_softmax_rows_normalize(seed in any::<u64>(), rows in 1usize..5, cols in 1usize..9, spread in 0.1f64..200.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..rows * cols).map(|_| rng.gen_range(-spread..spread)).collect();
        let mut g = Graph::new();
        let x = g.constant(Tensor::matrix(rows, cols, data).unwrap());
        let lp = g.log_softmax(x, Axis::Cols).unwrap();
        for r in 0..rows {
            prop_assert!(logsumexp(g.value(lp).row_slice(r)).abs() < 1e-9);
        }
    }

    #[test]
    fn backward_is_linear_in_the_root(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x0 = random_tensor(&mut rng, (2, 3), false);
        let w0 = random_tensor(&mut rng, (3, 2), false);
        let f = |g: &mut Graph, x: Var, w: Var| -> (Var, Var) {
            let a = g.matmul(x, w).unwrap();
            let a = g.tanh(a).unwrap();
            let a = g.reduce_sum(a).unwrap();
            let b = g.exp(x).unwrap();
            let b = g.reduce_sum(b).unwrap();
            (a, b)
        };
        let grads_of = |pick: usize| {
            let mut g = Graph::new();
            let (x, w) = (g.variable(x0.clone()), g.variable(w0.clone()));
            let (a, b) = f(&mut g, x, w);
            let root = match pick {
                0 => a,
                1 => b,
                _ => g.add(a, b).unwrap(),
            };
            g.backward(root).unwrap();
            g.gradients(&[x, w])
        };
        let (ga, gb, gs) = (grads_of(0), grads_of(1), grads_of(2));
        for k in 0..2 {
            for j in 0..gs[k].len() {
                prop_assert!((gs[k][j] - (ga[k][j] + gb[k][j])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gradients_are_bit_identical_across_runs(seed in any::<u64>()) {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut g = Graph::new();
            let x = g.variable(random_tensor(&mut rng, (2, 4), false));
            let w = g.variable(random_tensor(&mut rng, (4, 3), false));
            let h = g.matmul(x, w).unwrap();
            let lp = g.log_softmax(h, Axis::Cols).unwrap();
            let root = g.pick(lp, &[(0, 1), (1, 2)]).unwrap();
            let root = g.reduce_sum(root).unwrap();
            g.backward(root).unwrap();
            g.gradients(&[x, w])
        };
        let (a, b) = (run(), run());
        let bits = |v: &Vec<Vec<f64>>| v.iter().flatten().map(|x| x.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(&a), bits(&b));
    }
}

#[test]
fn equal_logits_give_log_one_eighth() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::filled(1, 8, 0.7));
    let lp = g.log_softmax(x, Axis::Cols).unwrap();
    for &v in g.value(lp).data() {
        assert!((v - (1.0f64 / 8.0).ln()).abs() < 1e-12);
        assert!((v + 2.0794).abs() < 1e-4);
    }
}

#[test]
fn shape_errors_carry_both_shapes() {
    let mut g = Graph::new();
    let a = g.variable(Tensor::zeros(2, 3));
    let b = g.variable(Tensor::zeros(2, 3));
    let err = g.matmul(a, b).unwrap_err();
    assert_eq!(err.kind(), "shape-error");
    let msg = err.to_string();
    assert!(msg.contains("[2, 3]"), "{msg}");
}
