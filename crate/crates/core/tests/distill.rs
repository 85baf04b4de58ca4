use distillmatch::distill::{gram, loss_gram, loss_kd, loss_kl, loss_mse, DistillWeights};
use distillmatch::Error;
use distillmatch_tensor::{finite_diff_check, Graph, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn randn(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn eval(f: impl Fn(&mut Graph, distillmatch_tensor::Var, distillmatch_tensor::Var) -> distillmatch::Result<distillmatch_tensor::Var>, a: &Tensor, b: &Tensor) -> f64 {
    let mut g = Graph::new();
    let (x, y) = (g.constant(a.clone()), g.constant(b.clone()));
    let out = f(&mut g, x, y).unwrap();
    g.value(out).item()
}

fn mse(a: &Tensor, b: &Tensor) -> f64 {
    eval(loss_mse, a, b)
}
fn gram_loss(a: &Tensor, b: &Tensor) -> f64 {
    eval(loss_gram, a, b)
}
fn kl(a: &Tensor, b: &Tensor) -> f64 {
    eval(loss_kl, a, b)
}

#[test]
fn all_losses_vanish_on_identical_features() {
    let a = randn(&[2, 6, 3, 3], 1);
    assert!(mse(&a, &a) < 1e-10);
    assert!(gram_loss(&a, &a) < 1e-10);
    assert!(kl(&a, &a) < 1e-10);
    let kd = eval(|g, x, y| Ok(loss_kd(g, x, y, &DistillWeights::default())?.total), &a, &a);
    assert!(kd < 1e-10);
}

#[test]
fn default_weights() {
    let w = DistillWeights::default();
    assert_eq!((w.alpha, w.beta, w.gamma), (100.0, 0.5, 0.25));
}

#[test]
fn mse_matches_direct_formula() {
    let (a, b) = (randn(&[1, 4, 2, 2], 2), randn(&[1, 4, 2, 2], 3));
    let na = a.norm_l2();
    let nb = b.norm_l2();
    let direct: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x / na - y / nb).powi(2)).sum::<f64>() / 4.0;
    assert!((mse(&a, &b) - direct).abs() < 1e-6);
}

#[test]
fn mse_rejects_zero_features() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(&[1, 2, 2, 2]));
    let b = g.constant(randn(&[1, 2, 2, 2], 4));
    assert!(matches!(loss_mse(&mut g, a, b), Err(Error::Degenerate(_))));
}

#[test]
fn shape_mismatch_is_a_dimension_error() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::ones(&[1, 2, 2, 2]));
    let b = g.constant(Tensor::ones(&[1, 3, 2, 2]));
    assert!(matches!(loss_gram(&mut g, a, b), Err(Error::Dimension(_))));
}

#[test]
fn gram_matches_triple_loop() {
    let (a, b) = (randn(&[1, 3, 2, 2], 5), randn(&[1, 3, 2, 2], 6));
    let gm = |t: &Tensor| {
        let mut m = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                for k in 0..4 {
                    m[i][j] += t.data()[i * 4 + k] * t.data()[j * 4 + k];
                }
                m[i][j] /= 4.0;
            }
        }
        m
    };
    let (ga, gb) = (gm(&a), gm(&b));
    let mut direct = 0.0;
    for i in 0..3 {
        for j in 0..3 {
            direct += (ga[i][j] - gb[i][j]).powi(2);
        }
    }
    direct /= 9.0;
    assert!((gram_loss(&a, &b) - direct).abs() < 1e-6);

    let mut g = Graph::new();
    let x = g.constant(a.clone());
    let m = gram(&mut g, x).unwrap();
    assert_eq!(g.shape(m), &[1, 3, 3]);
    assert!((g.value(m).at(&[0, 1, 2]) - ga[1][2]).abs() < 1e-12);
}

#[test]
fn kl_single_position_oracle() {
    // teacher logits [0, ln 2] give p = [1/3, 2/3]; the student is uniform
    let t = Tensor::new(&[1, 2, 1, 1], vec![0.0, 2f64.ln()]).unwrap();
    let s = Tensor::zeros(&[1, 2, 1, 1]);
    let p: [f64; 2] = [1.0 / 3.0, 2.0 / 3.0];
    let oracle: f64 = p.iter().map(|pi| pi * (pi / 0.5).ln()).sum();
    assert!((kl(&t, &s) - oracle).abs() < 1e-12);
}

#[test]
fn kd_is_the_weighted_sum() {
    let (a, b) = (randn(&[2, 5, 2, 3], 7), randn(&[2, 5, 2, 3], 8));
    let w = DistillWeights::default();
    let kd = eval(|g, x, y| Ok(loss_kd(g, x, y, &w)?.total), &a, &b);
    let sum = w.alpha * mse(&a, &b) + w.beta * gram_loss(&a, &b) + w.gamma * kl(&a, &b);
    assert!((kd - sum).abs() < 1e-6);
    let only = DistillWeights {
        alpha: 1.0,
        beta: 0.0,
        gamma: 0.0,
    };
    let kd_mse = eval(|g, x, y| Ok(loss_kd(g, x, y, &only)?.total), &a, &b);
    assert_eq!(kd_mse, mse(&a, &b));
}

#[test]
fn kd_gradient_wrt_student() {
    let tea = randn(&[1, 4, 2, 2], 9);
    for seed in 10..15 {
        let stu = randn(&[1, 4, 2, 2], seed);
        let r = finite_diff_check(
            |g, x| {
                let t = g.constant(tea.clone());
                Ok(loss_kd(g, t, x, &DistillWeights::default()).map_err(|e| match e {
                    Error::Tensor(t) => t,
                    other => panic!("{other}"),
                })?
                .total)
            },
            &stu,
            1e-4,
            1e-3,
        )
        .unwrap();
        assert!(r.passed, "seed {seed}: {:.3e}", r.max_rel_error);
    }
}

fn features() -> impl Strategy<Value = (Tensor, Tensor)> {
    (any::<u64>(), any::<u64>()).prop_map(|(s1, s2)| (randn(&[2, 4, 2, 3], s1), randn(&[2, 4, 2, 3], s2)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn losses_are_non_negative((a, b) in features()) {
        prop_assert!(mse(&a, &b) >= 0.0);
        prop_assert!(gram_loss(&a, &b) >= 0.0);
        prop_assert!(kl(&a, &b) >= -1e-12);
    }

    #[test]
    fn mse_ignores_positive_scale((a, b) in features(), s in 0.01f64..100.0) {
        let scaled = a.map(|v| v * s);
        prop_assert!((mse(&scaled, &b) - mse(&a, &b)).abs() < 1e-6);
        prop_assert!(mse(&scaled, &a) < 1e-6);
    }

    #[test]
    fn gram_ignores_sign((a, b) in features()) {
        let neg = a.map(|v| -v);
        prop_assert!((gram_loss(&neg, &b) - gram_loss(&a, &b)).abs() < 1e-6);
        prop_assert!(gram_loss(&neg, &a) < 1e-10);
    }

    #[test]
    fn kl_ignores_per_position_shift((a, b) in features(), seed in any::<u64>()) {
        let shift = randn(&[2, 1, 2, 3], seed);
        let shifted = Tensor::from_fn(b.shape(), |i| {
            let (bi, rest) = (i / 24, i % 6);
            b.data()[i] + shift.data()[bi * 6 + rest]
        });
        prop_assert!((kl(&a, &shifted) - kl(&a, &b)).abs() < 1e-6);
        prop_assert!(kl(&b, &shifted) < 1e-10);
    }
}
