use distillmatch_tensor::{
    attention, finite_diff_check, linear_attention, param_diff_check, Conv2dOptions, Graph, PadMode, ParamStore, Result, Tensor, Var,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-3;
const TOL: f64 = 1e-3;
const SEEDS: [u64; 5] = [11, 22, 33, 44, 55];

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Reduces `out` against fixed random weights so every output element matters.
fn probe(g: &mut Graph, out: Var, seed: u64) -> Result<Var> {
    let w = Tensor::randn(g.shape(out), 1.0, &mut rng(seed ^ 0xABCD));
    let w = g.constant(w);
    let p = g.mul(out, w)?;
    g.sum(p)
}

/// Samples away from zero so kinks stay further than `H` from every probe.
fn away_from_zero(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape, 1.0, &mut rng(seed)).map(|v| if v.abs() < 0.05 { v.signum() * 0.05 + v } else { v })
}

fn positive(shape: &[usize], seed: u64) -> Tensor {
    Tensor::uniform(shape, 0.3, 2.0, &mut rng(seed))
}

fn check<F>(name: &str, x: impl Fn(u64) -> Tensor, f: F)
where
    F: Fn(&mut Graph, Var, u64) -> Result<Var>,
{
    for seed in SEEDS {
        let input = x(seed);
        let report = finite_diff_check(|g, v| f(g, v, seed).and_then(|o| probe(g, o, seed)), &input, H, TOL).unwrap();
        assert!(report.passed, "{name} seed {seed}: max rel error {:.3e}", report.max_rel_error);
    }
}

fn randn(shape: &'static [usize]) -> impl Fn(u64) -> Tensor {
    move |s| Tensor::randn(shape, 1.0, &mut rng(s))
}

#[test]
fn elementwise_binary_with_broadcast() {
    for (name, op) in [("add", 0), ("sub", 1), ("mul", 2), ("div", 3)] {
        check(name, randn(&[2, 3, 4]), |g, x, s| {
            let other = g.constant(positive(&[3, 1], s + 1));
            match op {
                0 => g.add(x, other),
                1 => g.sub(other, x),
                2 => g.mul(x, other),
                _ => g.div(x, other),
            }
        });
        // gradient w.r.t. the broadcast operand
        check(name, |s| positive(&[3, 1], s), |g, x, s| {
            let other = g.constant(Tensor::randn(&[2, 3, 4], 1.0, &mut rng(s + 2)));
            match op {
                0 => g.add(other, x),
                1 => g.sub(other, x),
                2 => g.mul(other, x),
                _ => g.div(other, x),
            }
        });
    }
}

#[test]
fn elementwise_unary() {
    check("neg", randn(&[5]), |g, x, _| g.neg(x));
    check("scale", randn(&[5]), |g, x, _| g.scale(x, -2.5));
    check("add_scalar", randn(&[5]), |g, x, _| g.add_scalar(x, 0.7));
    check("exp", randn(&[2, 3]), |g, x, _| g.exp(x));
    check("log", |s| positive(&[2, 3], s), |g, x, _| g.log(x));
    check("tanh", randn(&[2, 3]), |g, x, _| g.tanh(x));
    check("relu", |s| away_from_zero(&[4, 3], s), |g, x, _| g.relu(x));
    check("gelu", randn(&[4, 3]), |g, x, _| g.gelu(x));
    check("sigmoid", randn(&[4, 3]), |g, x, _| g.sigmoid(x));
    check("elu", |s| away_from_zero(&[4, 3], s), |g, x, _| g.elu(x));
    check("sqrt", |s| positive(&[4], s), |g, x, _| g.sqrt(x));
    check("square", randn(&[4]), |g, x, _| g.square(x));
    check("powf", |s| positive(&[4], s), |g, x, _| g.powf(x, 1.5));
    check(
        "clamp",
        |s| Tensor::uniform(&[6], -2.0, 2.0, &mut rng(s)).map(|v| if (v.abs() - 1.0).abs() < 0.05 { v * 1.1 } else { v }),
        |g, x, _| g.clamp(x, -1.0, 1.0),
    );
    check("map_unary", randn(&[5]), |g, x, _| g.map_unary(x, f64::sin, f64::cos));
}

#[test]
fn reductions() {
    check("sum", randn(&[3, 2]), |g, x, _| g.sum(x));
    check("mean", randn(&[3, 2]), |g, x, _| g.mean(x));
    check("sum_axis0", randn(&[3, 4, 2]), |g, x, _| g.sum_axis(x, 0));
    check("sum_axis1", randn(&[3, 4, 2]), |g, x, _| g.sum_axis(x, 1));
    check("mean_axis2", randn(&[3, 4, 2]), |g, x, _| g.mean_axis(x, 2));
}

#[test]
fn matmul_both_operands() {
    check("matmul lhs", randn(&[2, 3, 4]), |g, x, s| {
        let b = g.constant(Tensor::randn(&[4, 5], 1.0, &mut rng(s + 7)));
        g.matmul(x, b)
    });
    check("matmul rhs", randn(&[4, 5]), |g, x, s| {
        let a = g.constant(Tensor::randn(&[2, 3, 4], 1.0, &mut rng(s + 7)));
        g.matmul(a, x)
    });
    check("matmul batch", randn(&[2, 1, 3, 4]), |g, x, s| {
        let b = g.constant(Tensor::randn(&[3, 4, 2], 1.0, &mut rng(s + 7)));
        g.matmul(x, b)
    });
}

#[test]
fn structural() {
    check("permute", randn(&[2, 3, 4]), |g, x, _| g.permute(x, &[2, 0, 1]));
    check("reshape", randn(&[2, 6]), |g, x, _| g.reshape(x, &[3, 4]));
    check("concat", randn(&[2, 3]), |g, x, s| {
        let c = g.constant(Tensor::randn(&[2, 2], 1.0, &mut rng(s + 3)));
        g.concat(&[c, x, x], 1)
    });
    check("narrow", randn(&[3, 5]), |g, x, _| g.narrow(x, 1, 1, 3));
    check("index_select", randn(&[4, 3]), |g, x, _| g.index_select(x, 0, &[3, 0, 3, 1]));
}

#[test]
fn normalisation() {
    check("softmax", randn(&[3, 4]), |g, x, _| g.softmax(x, 1));
    check("softmax axis0", randn(&[3, 4]), |g, x, _| g.softmax(x, 0));
    check("log_softmax", randn(&[3, 4]), |g, x, _| g.log_softmax(x, 1));
    check("layer_norm x", randn(&[3, 5]), |g, x, s| {
        let gm = g.constant(positive(&[5], s + 1));
        let bt = g.constant(Tensor::randn(&[5], 1.0, &mut rng(s + 2)));
        g.layer_norm(x, 1, gm, bt, 1e-5)
    });
    check("layer_norm gamma", |s| positive(&[5], s), |g, gm, s| {
        let x = g.constant(Tensor::randn(&[3, 5], 1.0, &mut rng(s + 1)));
        let bt = g.constant(Tensor::zeros(&[5]));
        g.layer_norm(x, 1, gm, bt, 1e-5)
    });
    check("layer_norm beta", randn(&[4]), |g, bt, s| {
        let x = g.constant(Tensor::randn(&[2, 4, 3], 1.0, &mut rng(s + 1)));
        let gm = g.constant(Tensor::ones(&[4]));
        g.layer_norm(x, 1, gm, bt, 1e-5)
    });
}

#[test]
fn conv2d_all_inputs() {
    let opts = [
        Conv2dOptions::same(3),
        Conv2dOptions::same(3).stride(2),
        Conv2dOptions::same(3).groups(2),
        Conv2dOptions::same(3).pad_mode(PadMode::Circular),
        Conv2dOptions {
            stride: 4,
            padding: 0,
            groups: 1,
            pad_mode: PadMode::Zero,
        },
    ];
    for (i, o) in opts.into_iter().enumerate() {
        let k = if o.stride == 4 { 4 } else { 3 };
        check(&format!("conv x {i}"), randn(&[2, 2, 8, 8]), move |g, x, s| {
            let w = g.constant(Tensor::randn(&[4, 2 / o.groups, k, k], 0.5, &mut rng(s + 1)));
            g.conv2d(x, w, None, o)
        });
        check(&format!("conv w {i}"), move |s| Tensor::randn(&[4, 2 / o.groups, k, k], 0.5, &mut rng(s)), move |g, w, s| {
            let x = g.constant(Tensor::randn(&[2, 2, 8, 8], 1.0, &mut rng(s + 1)));
            let b = g.constant(Tensor::randn(&[4], 1.0, &mut rng(s + 2)));
            g.conv2d(x, w, Some(b), o)
        });
    }
    check("conv bias", randn(&[3]), |g, b, s| {
        let x = g.constant(Tensor::randn(&[1, 2, 5, 5], 1.0, &mut rng(s + 1)));
        let w = g.constant(Tensor::randn(&[3, 2, 3, 3], 0.5, &mut rng(s + 2)));
        g.conv2d(x, w, Some(b), Conv2dOptions::same(3))
    });
}

#[test]
fn resize_up_and_down() {
    check("resize up", randn(&[1, 2, 3, 4]), |g, x, _| g.resize_bilinear(x, 7, 5));
    check("resize down", randn(&[2, 1, 7, 6]), |g, x, _| g.resize_bilinear(x, 3, 4));
    check("resize same", randn(&[1, 1, 3, 3]), |g, x, _| g.resize_bilinear(x, 3, 3));
}

#[test]
fn attention_variants() {
    for which in 0..3 {
        check("attention", randn(&[2, 4, 3]), move |g, x, s| {
            let a = g.constant(Tensor::randn(&[2, 5, 3], 1.0, &mut rng(s + 1)));
            let b = g.constant(Tensor::randn(&[2, 5, 2], 1.0, &mut rng(s + 2)));
            match which {
                0 => attention(g, x, a, b, 0.6),
                1 => {
                    let k = g.narrow(x, 1, 0, 4)?;
                    let v = g.constant(Tensor::randn(&[2, 4, 2], 1.0, &mut rng(s + 3)));
                    attention(g, a, k, v, 0.6)
                }
                _ => {
                    let v = g.narrow(x, 2, 0, 2)?;
                    let q = g.constant(Tensor::randn(&[2, 3, 3], 1.0, &mut rng(s + 3)));
                    let k = g.constant(Tensor::randn(&[2, 4, 3], 1.0, &mut rng(s + 4)));
                    attention(g, q, k, v, 0.6)
                }
            }
        });
    }
    check("linear attention q", |s| away_from_zero(&[2, 4, 3], s), |g, x, s| {
        let k = g.constant(Tensor::randn(&[2, 5, 3], 1.0, &mut rng(s + 1)));
        let v = g.constant(Tensor::randn(&[2, 5, 2], 1.0, &mut rng(s + 2)));
        linear_attention(g, x, k, v)
    });
    check("linear attention k", |s| away_from_zero(&[2, 5, 3], s), |g, x, s| {
        let q = g.constant(Tensor::randn(&[2, 4, 3], 1.0, &mut rng(s + 1)));
        let v = g.constant(Tensor::randn(&[2, 5, 2], 1.0, &mut rng(s + 2)));
        linear_attention(g, q, x, v)
    });
    check("linear attention v", randn(&[2, 5, 2]), |g, x, s| {
        let q = g.constant(away_from_zero(&[2, 4, 3], s + 1));
        let k = g.constant(away_from_zero(&[2, 5, 3], s + 2));
        linear_attention(g, q, k, x)
    });
}

#[test]
fn plain_sum_passes() {
    let x = Tensor::randn(&[7], 3.0, &mut rng(1));
    let r = finite_diff_check(|g, v| g.sum(v), &x, H, TOL).unwrap();
    assert!(r.passed);
    assert_eq!(r.checked, 7);
}

#[test]
fn softmax_sum_of_logs_composite_passes() {
    for seed in SEEDS {
        let x = Tensor::randn(&[3, 4], 1.0, &mut rng(seed));
        let r = finite_diff_check(
            |g, v| {
                let p = g.softmax(v, 1)?;
                let l = g.log(p)?;
                let w = g.constant(Tensor::randn(&[3, 4], 1.0, &mut rng(seed + 100)));
                let l = g.mul(l, w)?;
                g.sum(l)
            },
            &x,
            H,
            TOL,
        )
        .unwrap();
        assert!(r.passed, "seed {seed}: {:.3e}", r.max_rel_error);
    }
}

#[test]
fn corrupted_backward_rule_fails() {
    fn wrong(x: f64) -> f64 {
        1.2 * x.cos()
    }
    let x = Tensor::randn(&[5], 1.0, &mut rng(2));
    let r = finite_diff_check(
        |g, v| {
            let y = g.map_unary(v, f64::sin, wrong)?;
            g.sum(y)
        },
        &x,
        H,
        TOL,
    )
    .unwrap();
    assert!(!r.passed);
    assert!(r.max_rel_error > 0.1);
}

#[test]
fn param_probe_check() {
    let mut store = ParamStore::new();
    let w = store.add("w", Tensor::randn(&[3, 4], 0.5, &mut rng(5)), true);
    let x = Tensor::randn(&[2, 3], 1.0, &mut rng(6));
    let r = param_diff_check(
        &store,
        w,
        |g, s| {
            let xv = g.constant(x.clone());
            let wv = g.param(s, w);
            let y = g.matmul(xv, wv)?;
            let y = g.tanh(y)?;
            probe(g, y, 9)
        },
        H,
        TOL,
        12,
    )
    .unwrap();
    assert!(r.passed, "{:.3e}", r.max_rel_error);
    assert_eq!(r.checked, 12);
}
