use cdst_tensor::gradcheck::max_rel_error;
use cdst_tensor::{checkpoint, Axis, Tape, Tensor, Var};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;
const FLOOR: f64 = 1e-6;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Checks d(sum(w ⊙ f(x)))/dx against central differences, where `w` is a
/// fixed random weighting so every output element contributes.
fn check_unary(name: &str, x: Tensor, f: impl Fn(&mut Tape, Var) -> Var) {
    let probe_w = {
        let mut t = Tape::new();
        let xv = t.constant(x.clone());
        let y = f(&mut t, xv);
        Tensor::randn(t.shape(y), 1.0, &mut rng(99))
    };
    let loss_of = |x: &Tensor| {
        let mut t = Tape::new();
        let xv = t.constant(x.clone());
        let y = f(&mut t, xv);
        let w = t.constant(probe_w.clone());
        let p = t.mul(y, w).unwrap();
        let s = t.sum(p);
        t.value(s)[0]
    };
    let mut t = Tape::new();
    let xv = t.variable(x.clone());
    let y = f(&mut t, xv);
    let w = t.constant(probe_w.clone());
    let p = t.mul(y, w).unwrap();
    let l = t.sum(p);
    let g = t.backward(l).unwrap();
    let analytic = g.get(xv).unwrap().to_vec();
    let err = max_rel_error(&x, &analytic, H, FLOOR, loss_of);
    assert!(err < TOL, "{name}: max relative error {err:e}");
}

#[test]
fn elementwise_and_reduction_gradients() {
    let x = Tensor::randn(&[4, 5], 1.0, &mut rng(1));
    let other = Tensor::randn(&[4, 5], 1.0, &mut rng(2));
    let bias = Tensor::randn(&[5], 1.0, &mut rng(3));
    check_unary("gelu", x.clone(), |t, v| t.gelu(v));
    check_unary("softmax", x.clone(), |t, v| t.softmax(v));
    check_unary("scale", x.clone(), |t, v| t.scale(v, -1.7));
    check_unary("mean_rows", x.clone(), |t, v| t.mean_rows(v));
    check_unary("mul", x.clone(), |t, v| {
        let o = t.constant(other.clone());
        t.mul(v, o).unwrap()
    });
    check_unary("sub", x.clone(), |t, v| {
        let o = t.constant(other.clone());
        t.sub(o, v).unwrap()
    });
    check_unary("add_bias(x)", x.clone(), |t, v| {
        let b = t.constant(bias.clone());
        t.add_bias(v, b).unwrap()
    });
    check_unary("add_bias(b)", bias.clone(), |t, b| {
        let xv = t.constant(x.clone());
        t.add_bias(xv, b).unwrap()
    });
    check_unary("reshape", x.clone(), |t, v| t.reshape(v, &[20]).unwrap());
    check_unary("mse", x.clone(), |t, v| {
        let o = t.constant(other.clone());
        t.mse(v, o).unwrap()
    });
}

#[test]
fn matmul_gradients_both_operands() {
    let a = Tensor::randn(&[3, 4], 1.0, &mut rng(4));
    let b = Tensor::randn(&[4, 6], 1.0, &mut rng(5));
    let bt = Tensor::randn(&[6, 4], 1.0, &mut rng(6));
    check_unary("matmul(a)", a.clone(), |t, v| {
        let bv = t.constant(b.clone());
        t.matmul(v, bv).unwrap()
    });
    check_unary("matmul(b)", b.clone(), |t, v| {
        let av = t.constant(a.clone());
        t.matmul(av, v).unwrap()
    });
    check_unary("matmul_nt(a)", a.clone(), |t, v| {
        let bv = t.constant(bt.clone());
        t.matmul_nt(v, bv).unwrap()
    });
    check_unary("matmul_nt(b)", bt.clone(), |t, v| {
        let av = t.constant(a.clone());
        t.matmul_nt(av, v).unwrap()
    });
    // leading dimensions of the left operand flatten into rows
    let x3 = Tensor::randn(&[2, 3, 4], 1.0, &mut rng(7));
    check_unary("matmul(rank3)", x3, |t, v| {
        let bv = t.constant(b.clone());
        t.matmul(v, bv).unwrap()
    });
}

#[test]
fn layer_norm_gradients() {
    let x = Tensor::randn(&[5, 6], 1.0, &mut rng(8));
    let g = Tensor::randn(&[6], 1.0, &mut rng(9));
    let b = Tensor::randn(&[6], 1.0, &mut rng(10));
    check_unary("layer_norm(x)", x.clone(), |t, v| {
        let (gv, bv) = (t.constant(g.clone()), t.constant(b.clone()));
        t.layer_norm(v, gv, bv, 1e-5).unwrap()
    });
    check_unary("layer_norm(gamma)", g.clone(), |t, v| {
        let (xv, bv) = (t.constant(x.clone()), t.constant(b.clone()));
        t.layer_norm(xv, v, bv, 1e-5).unwrap()
    });
    check_unary("layer_norm(beta)", b.clone(), |t, v| {
        let (xv, gv) = (t.constant(x.clone()), t.constant(g.clone()));
        t.layer_norm(xv, gv, v, 1e-5).unwrap()
    });
}

#[test]
fn conv_and_resampling_gradients() {
    for stride in [1, 2] {
        let x = Tensor::randn(&[6, 5, 3], 1.0, &mut rng(11));
        let w = Tensor::randn(&[3, 3, 3, 4], 0.5, &mut rng(12));
        let b = Tensor::randn(&[4], 0.5, &mut rng(13));
        check_unary("conv2d(x)", x.clone(), |t, v| {
            let (wv, bv) = (t.constant(w.clone()), t.constant(b.clone()));
            t.conv2d(v, wv, bv, stride).unwrap()
        });
        check_unary("conv2d(w)", w.clone(), |t, v| {
            let (xv, bv) = (t.constant(x.clone()), t.constant(b.clone()));
            t.conv2d(xv, v, bv, stride).unwrap()
        });
        check_unary("conv2d(b)", b.clone(), |t, v| {
            let (xv, wv) = (t.constant(x.clone()), t.constant(w.clone()));
            t.conv2d(xv, wv, v, stride).unwrap()
        });
    }
    let x = Tensor::randn(&[4, 6, 2], 1.0, &mut rng(14));
    check_unary("upsample2x", x.clone(), |t, v| t.upsample2x(v).unwrap());
    check_unary("avg_pool2x", x.clone(), |t, v| t.avg_pool2x(v).unwrap());
    let y = Tensor::randn(&[4, 6, 3], 1.0, &mut rng(15));
    check_unary("concat(last)", x.clone(), |t, v| {
        let yv = t.constant(y.clone());
        t.concat(&[yv, v], Axis::Last).unwrap()
    });
    let r = Tensor::randn(&[2, 6, 2], 1.0, &mut rng(16));
    check_unary("concat(first)", x, |t, v| {
        let rv = t.constant(r.clone());
        t.concat(&[v, rv], Axis::First).unwrap()
    });
}

#[test]
fn attention_gradients() {
    let q = Tensor::randn(&[5, 4], 1.0, &mut rng(17));
    let k = Tensor::randn(&[3, 4], 1.0, &mut rng(18));
    let v = Tensor::randn(&[3, 6], 1.0, &mut rng(19));
    let (kc, vc) = (k.clone(), v.clone());
    check_unary("attention(q)", q.clone(), move |t, x| {
        let (kv, vv) = (t.constant(kc.clone()), t.constant(vc.clone()));
        t.attention(x, kv, vv, 4).unwrap()
    });
    let (qc, vc) = (q.clone(), v.clone());
    check_unary("attention(k)", k.clone(), move |t, x| {
        let (qv, vv) = (t.constant(qc.clone()), t.constant(vc.clone()));
        t.attention(qv, x, vv, 4).unwrap()
    });
    check_unary("attention(v)", v, move |t, x| {
        let (qv, kv) = (t.constant(q.clone()), t.constant(k.clone()));
        t.attention(qv, kv, x, 4).unwrap()
    });
}

#[test]
fn three_layer_composite_gradient() {
    let x = Tensor::randn(&[4, 8], 1.0, &mut rng(20));
    let w1 = Tensor::randn(&[8, 16], 0.3, &mut rng(21));
    let w2 = Tensor::randn(&[16, 16], 0.3, &mut rng(22));
    let w3 = Tensor::randn(&[16, 3], 0.3, &mut rng(23));
    let target = Tensor::randn(&[4, 3], 1.0, &mut rng(24));
    let run = |w1: &Tensor, track: bool| {
        let mut t = Tape::new();
        let xv = t.constant(x.clone());
        let a = if track { t.variable(w1.clone()) } else { t.constant(w1.clone()) };
        let b = t.constant(w2.clone());
        let c = t.constant(w3.clone());
        let h = t.matmul(xv, a).unwrap();
        let h = t.gelu(h);
        let h = t.matmul(h, b).unwrap();
        let h = t.softmax(h);
        let y = t.matmul(h, c).unwrap();
        let tv = t.constant(target.clone());
        let l = t.mse(y, tv).unwrap();
        let grad = track.then(|| t.backward(l).unwrap().get(a).unwrap().to_vec());
        (t.value(l)[0], grad)
    };
    let (_, g) = run(&w1, true);
    let err = max_rel_error(&w1, &g.unwrap(), H, FLOOR, |w| run(w, false).0);
    assert!(err < TOL, "composite: {err:e}");
}

#[test]
fn softmax_rows_sum_to_one_and_identity_matmul() {
    let x = Tensor::randn(&[7, 9], 3.0, &mut rng(25));
    let mut t = Tape::new();
    let xv = t.constant(x.clone());
    let s = t.softmax(xv);
    for row in t.value(s).chunks(9) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
    let i = t.constant(Tensor::eye(9));
    let y = t.matmul(xv, i).unwrap();
    assert_eq!(t.value(y), x.data());
}

#[test]
fn attention_single_key_returns_that_value_row() {
    let mut t = Tape::new();
    let q = t.constant(Tensor::randn(&[6, 4], 1.0, &mut rng(26)));
    let k = t.constant(Tensor::randn(&[1, 4], 1.0, &mut rng(27)));
    let vrow = vec![0.25, -1.5, 3.0];
    let v = t.constant(Tensor::new(&[1, 3], vrow.clone()).unwrap());
    let o = t.attention(q, k, v, 4).unwrap();
    for row in t.value(o).chunks(3) {
        assert_eq!(row, vrow.as_slice());
    }
}

#[test]
fn attention_temperature_limit_selects_matching_rows() {
    // K = Q with orthonormal rows scaled by s: scores are s^2/sqrt(d) on the
    // diagonal and 0 elsewhere, so the weights on other rows are
    // exp(-s^2/sqrt(d)) relative to the match.
    let d = 4;
    let v = Tensor::randn(&[4, 3], 1.0, &mut rng(28));
    let mut prev = f64::INFINITY;
    for s in [2.0, 4.0, 8.0] {
        let mut qd = Tensor::eye(d);
        qd.data_mut().iter_mut().for_each(|x| *x *= s);
        let mut t = Tape::new();
        let q = t.constant(qd.clone());
        let k = t.constant(qd);
        let vv = t.constant(v.clone());
        let o = t.attention(q, k, vv, d).unwrap();
        let err = t.to_tensor(o).max_abs_diff(&v);
        // oracle: closed-form off-diagonal weight
        let w_off = 1.0 / ((s * s / (d as f64).sqrt()).exp() + 3.0);
        let bound = 3.0 * w_off * 2.0 * v.data().iter().fold(0.0f64, |m, x| m.max(x.abs()));
        assert!(err <= bound + 1e-12, "s={s}: err {err} bound {bound}");
        assert!(err < prev);
        prev = err;
    }
    assert!(prev < 1e-6);
}

#[test]
fn shape_errors_name_the_op() {
    let mut t = Tape::new();
    let a = t.constant(Tensor::zeros(&[2, 3]));
    let b = t.constant(Tensor::zeros(&[4, 5]));
    let e = t.matmul(a, b).unwrap_err().to_string();
    assert!(e.contains("matmul") && e.contains("[2, 3]") && e.contains("[4, 5]"), "{e}");
    assert!(t.add(a, b).unwrap_err().to_string().contains("add"));
    let x = t.constant(Tensor::zeros(&[4, 4, 2]));
    let w = t.constant(Tensor::zeros(&[3, 3, 3, 1]));
    let bias = t.constant(Tensor::zeros(&[1]));
    assert!(t.conv2d(x, w, bias, 1).unwrap_err().to_string().contains("conv2d"));
}

#[test]
fn frozen_leaves_get_no_gradient() {
    let w = Tensor::randn(&[3, 3], 1.0, &mut rng(29));
    let frozen = Tensor::randn(&[3, 3], 1.0, &mut rng(30));
    let mut t = Tape::new();
    let x = t.constant(Tensor::randn(&[2, 3], 1.0, &mut rng(31)));
    let wv = t.leaf(&w, true);
    let fv = t.leaf(&frozen, false);
    let h = t.matmul(x, fv).unwrap();
    let h = t.matmul(h, wv).unwrap();
    let l = t.sum(h);
    let g = t.backward(l).unwrap();
    assert!(g.get(wv).is_some());
    assert!(g.get(fv).is_none());
}

fn forward_bits(seed: u64) -> Vec<u64> {
    let mut t = Tape::new();
    let x = t.constant(Tensor::randn(&[8, 8, 3], 1.0, &mut rng(seed)));
    let w = t.constant(Tensor::randn(&[3, 3, 3, 5], 0.3, &mut rng(seed + 1)));
    let b = t.constant(Tensor::zeros(&[5]));
    let y = t.conv2d(x, w, b, 2).unwrap();
    let y = t.gelu(y);
    let y = t.upsample2x(y).unwrap();
    t.value(y).iter().map(|v| v.to_bits()).collect()
}

#[test]
fn forward_is_bit_deterministic() {
    assert_eq!(forward_bits(40), forward_bits(40));
}

proptest! {
    #[test]
    fn checkpoint_roundtrip(names in proptest::collection::vec("[a-z.0-9]{1,12}", 1..5), seed in 0u64..1000) {
        let mut r = rng(seed);
        let tensors: Vec<Tensor> = names
            .iter()
            .enumerate()
            .map(|(i, _)| Tensor::randn(&[i + 1, 2], 1.0, &mut r))
            .collect();
        let mut buf = Vec::new();
        checkpoint::write_checkpoint(&mut buf, names.iter().map(|s| s.as_str()).zip(&tensors)).unwrap();
        let back = checkpoint::read_checkpoint(&mut buf.as_slice()).unwrap();
        prop_assert_eq!(back.len(), names.len());
        for ((n, t), (bn, bt)) in names.iter().zip(&tensors).zip(&back) {
            prop_assert_eq!(n, bn);
            prop_assert_eq!(t, bt);
        }
    }

    #[test]
    fn softmax_rows_are_distributions(rows in 1usize..6, cols in 1usize..9, seed in 0u64..500, scale in 0.1f64..50.0) {
        let mut t = Tape::new();
        let x = t.constant(Tensor::randn(&[rows, cols], scale, &mut rng(seed)));
        let s = t.softmax(x);
        for row in t.value(s).chunks(cols) {
            prop_assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
