use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    t(shape, &(0..n).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<_>>())
}

/// Central finite differences of a scalar function of one tensor.
fn fd_grad(x: &Tensor, h: f64, f: &dyn Fn(&Tensor) -> f64) -> Vec<f64> {
    (0..x.len())
        .map(|i| {
            let mut p = x.clone();
            p.data_mut()[i] += h;
            let mut m = x.clone();
            m.data_mut()[i] -= h;
            (f(&p) - f(&m)) / (2.0 * h)
        })
        .collect()
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt();
    let scale: f64 = b.iter().map(|q| q * q).sum::<f64>().sqrt().max(1e-12);
    diff / scale
}

#[test]
fn square_records_one_primitive() {
    let tape = Tape::new();
    let x = tape.var(Tensor::scalar(3.0));
    let y = x.square();
    assert_eq!(y.item(), 9.0);
    assert_eq!(tape.op_count(), 1);
    let g = tape.grad(y, &[x], GradOptions::default()).unwrap();
    assert_eq!(g[0].item(), 6.0);
}

#[test]
fn softplus_value_and_derivative_at_zero() {
    let tape = Tape::new();
    let x = tape.var(Tensor::scalar(0.0));
    let y = x.softplus(1.0).unwrap();
    assert!((y.item() - std::f64::consts::LN_2).abs() < 1e-15);
    let g = tape.grad(y, &[x], GradOptions::default()).unwrap();
    assert_eq!(g[0].item(), 0.5);
}

#[test]
fn conv_all_ones() {
    let tape = Tape::new();
    let x = tape.constant(Tensor::filled(&[1, 5, 5], 1.0));
    let k = tape.constant(Tensor::filled(&[1, 1, 3, 3], 1.0));
    let y = x.conv2d(k, 1).unwrap();
    assert_eq!(y.shape(), vec![1, 3, 3]);
    assert!(y.value().data().iter().all(|&v| v == 9.0));
}

#[test]
fn named_primitives_and_errors() {
    let tape = Tape::new();
    let x = tape.var(Tensor::scalar(3.0));
    assert_eq!(tape.apply("square", &[x]).unwrap().item(), 9.0);
    match tape.apply("tanh", &[x]) {
        Err(Error::UnsupportedPrimitive { name, supported }) => {
            assert_eq!(name, "tanh");
            assert!(supported.contains("softplus"));
        }
        other => panic!("expected unsupported primitive, got {other:?}"),
    }
    let a = tape.var(Tensor::zeros(&[2, 3]));
    let b = tape.var(Tensor::zeros(&[3, 2]));
    let err = a.add(b).unwrap_err().to_string();
    assert!(err.contains("[2, 3]") && err.contains("[3, 2]"), "{err}");
}

#[test]
fn grad_requires_scalar_attached_output() {
    let tape = Tape::new();
    let x = tape.var(Tensor::zeros(&[3]));
    assert!(matches!(
        tape.grad(x.square(), &[x], GradOptions::default()),
        Err(Error::NonScalarOutput { .. })
    ));
    let c = tape.constant(Tensor::scalar(1.0));
    assert!(matches!(
        tape.grad(c.square(), &[x], GradOptions::default()),
        Err(Error::Detached)
    ));
    let other = Tape::new();
    let y = other.var(Tensor::scalar(1.0));
    assert!(matches!(
        tape.grad(x.sum(), &[y], GradOptions::default()),
        Err(Error::ForeignTape)
    ));
}

#[test]
fn external_tensors_reject_nan() {
    assert!(matches!(
        Tensor::new(vec![2], vec![1.0, f64::NAN]),
        Err(Error::NonFinite { index: 1, .. })
    ));
    assert!(matches!(
        Tensor::new(vec![2, 2], vec![1.0]),
        Err(Error::InvalidShape { .. })
    ));
}

/// y = w2 · softplus(W1 x + b1) for a 2-3-1 net; 6 weights in W1.
fn small_dense<'t>(_tape: &'t Tape, x: Var<'t>, w1: Var<'t>, b1: Var<'t>, w2: Var<'t>) -> Var<'t> {
    let h = w1.matvec(x).unwrap().add(b1).unwrap().softplus(2.0).unwrap();
    w2.matvec(h).unwrap().sum()
}

#[test]
fn dense_net_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..20 {
        let x0 = rand_tensor(&mut rng, &[2]);
        let w10 = rand_tensor(&mut rng, &[3, 2]);
        let b10 = rand_tensor(&mut rng, &[3]);
        let w20 = rand_tensor(&mut rng, &[1, 3]);
        let f = |w1: &Tensor| {
            let tape = Tape::new();
            let (x, w1, b1, w2) = (
                tape.constant(x0.clone()),
                tape.constant(w1.clone()),
                tape.constant(b10.clone()),
                tape.constant(w20.clone()),
            );
            small_dense(&tape, x, w1, b1, w2).item()
        };
        let tape = Tape::new();
        let x = tape.constant(x0.clone());
        let w1 = tape.var(w10.clone());
        let b1 = tape.constant(b10.clone());
        let w2 = tape.constant(w20.clone());
        let y = small_dense(&tape, x, w1, b1, w2);
        let g = tape.grad(y, &[w1], GradOptions::default()).unwrap();
        let err = rel_err(g[0].value().data(), &fd_grad(&w10, 1e-5, &f));
        assert!(err <= 1e-6, "relative error {err}");
    }
}

#[test]
fn loss_on_gradient_closed_form() {
    // L = (d(x²)/dx)² = 4x², dL/dx = 8x = 24 at x = 3
    let tape = Tape::new();
    let x = tape.var(Tensor::scalar(3.0));
    let y = x.square();
    let g = grad_of_loss_on_grad(&tape, y, x, |g| Ok(g.square())).unwrap();
    assert_eq!(g.item(), 24.0);
}

#[test]
fn softplus_second_derivative_is_beta_over_four() {
    for beta in [0.5, 1.0, 10.0, 100.0] {
        let tape = Tape::new();
        let x = tape.var(Tensor::scalar(0.0));
        let y = x.softplus(beta).unwrap();
        let g2 = grad_of_loss_on_grad(&tape, y, x, Ok).unwrap();
        assert!((g2.item() - beta / 4.0).abs() < 1e-12 * beta);
    }
}

#[test]
fn relu_rejected_for_second_order() {
    let tape = Tape::new();
    let x = tape.var(Tensor::scalar(1.0));
    let y = x.relu().square();
    assert!(matches!(
        grad_of_loss_on_grad(&tape, y, x, |g| Ok(g.square())),
        Err(Error::NotTwiceDifferentiable)
    ));
}

/// ‖∇ₓ y‖² for a small conv + pool + dense softplus net.
fn conv_net_input_grad_norm<'t>(tape: &'t Tape, x: Var<'t>, k: &Tensor, w: &Tensor) -> (Var<'t>, Var<'t>) {
    let k = tape.constant(k.clone());
    let w = tape.constant(w.clone());
    let h = x.conv2d(k, 1).unwrap().softplus(3.0).unwrap().maxpool(2).unwrap();
    let h = h.avgpool(1).unwrap().reshape(&[8]).unwrap();
    let y = w.matvec(h).unwrap().softplus(1.5).unwrap().sum();
    let g = tape.grad(y, &[x], GradOptions::smooth()).unwrap()[0];
    (y, g.square().sum())
}

#[test]
fn second_order_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..10 {
        let x0 = rand_tensor(&mut rng, &[1, 5, 5]);
        let k = rand_tensor(&mut rng, &[2, 1, 2, 2]);
        let w = rand_tensor(&mut rng, &[3, 8]);
        let f = |x: &Tensor| {
            let tape = Tape::new();
            let x = tape.var(x.clone());
            conv_net_input_grad_norm(&tape, x, &k, &w).1.item()
        };
        let tape = Tape::new();
        let x = tape.var(x0.clone());
        let (_, l) = conv_net_input_grad_norm(&tape, x, &k, &w);
        let g = tape.grad(l, &[x], GradOptions::default()).unwrap()[0];
        let err = rel_err(g.value().data(), &fd_grad(&x0, 1e-5, &f));
        assert!(err <= 1e-4, "relative error {err}");
    }
}

#[test]
fn guided_equals_plain_without_activations() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let tape = Tape::new();
    let x = tape.var(rand_tensor(&mut rng, &[1, 6, 6]));
    let k = tape.constant(rand_tensor(&mut rng, &[2, 1, 3, 3]));
    let w = tape.constant(rand_tensor(&mut rng, &[1, 8]));
    let h = x.conv2d(k, 1).unwrap().maxpool(2).unwrap().reshape(&[8]).unwrap();
    let y = w.matvec(h).unwrap().sum();
    let plain = tape.grad(y, &[x], GradOptions::default()).unwrap()[0];
    let guided = tape.grad(y, &[x], GradOptions::guided()).unwrap()[0];
    assert_eq!(plain.value(), guided.value());
}

#[test]
fn guided_zeroes_negative_upstream() {
    let tape = Tape::new();
    let x = tape.var(Tensor::scalar(2.0));
    let y = x.relu().neg();
    assert_eq!(tape.grad(y, &[x], GradOptions::default()).unwrap()[0].item(), -1.0);
    assert_eq!(tape.grad(y, &[x], GradOptions::guided()).unwrap()[0].item(), 0.0);
}

#[test]
fn guided_rule_on_four_unit_net_by_enumeration() {
    // y = Σ_h v_h relu(W x)_h with x ∈ R², four hidden units. The guided
    // gradient is Σ_h W[h,i] · max(v_h, 0) · [z_h > 0]; enumerate every sign
    // pattern of v and a grid of inputs.
    let w = [[1.0, -0.5], [-0.7, 0.8], [0.3, 0.9], [-1.1, -0.2]];
    for pattern in 0..16u32 {
        let v: Vec<f64> = (0..4).map(|h| if pattern >> h & 1 == 1 { 0.6 + h as f64 * 0.1 } else { -0.4 - h as f64 * 0.2 }).collect();
        for xi in [-1.0, -0.3, 0.4, 1.2] {
            for xj in [-0.8, 0.1, 0.9] {
                let tape = Tape::new();
                let x = tape.var(t(&[2], &[xi, xj]));
                let wt = tape.constant(t(&[4, 2], &w.concat()));
                let vt = tape.constant(t(&[1, 4], &v));
                let y = vt.matvec(wt.matvec(x).unwrap().relu()).unwrap().sum();
                let guided = tape.grad(y, &[x], GradOptions::guided()).unwrap()[0].value();
                let plain = tape.grad(y, &[x], GradOptions::default()).unwrap()[0].value();
                for i in 0..2 {
                    let mut expect = 0.0;
                    let mut expect_plain = 0.0;
                    for h in 0..4 {
                        let z = w[h][0] * xi + w[h][1] * xj;
                        let active = if z > 0.0 { 1.0 } else { 0.0 };
                        expect += w[h][i] * v[h].max(0.0) * active;
                        expect_plain += w[h][i] * v[h] * active;
                    }
                    assert!((guided.data()[i] - expect).abs() < 1e-14);
                    assert!((plain.data()[i] - expect_plain).abs() < 1e-14);
                }
            }
        }
    }
}

#[test]
fn softplus_within_ln2_over_beta_of_relu() {
    for beta in [1.0, 10.0, 100.0] {
        let bound = std::f64::consts::LN_2 / beta;
        for i in 0..=2000 {
            let x = -10.0 + i as f64 * 0.01;
            let gap = (softplus(x, beta) - x.max(0.0)).abs();
            assert!(gap <= bound + 1e-15, "x={x} beta={beta} gap={gap}");
        }
    }
}

#[test]
fn replay_is_bit_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let xv = rand_tensor(&mut rng, &[1, 6, 6]);
    let kv = rand_tensor(&mut rng, &[2, 1, 3, 3]);
    let run = || {
        let tape = Tape::new();
        let x = tape.var(xv.clone());
        let k = tape.constant(kv.clone());
        let y = x.conv2d(k, 1).unwrap().softplus(5.0).unwrap().maxpool(2).unwrap().square().sum();
        let g = tape.grad(y, &[x], GradOptions::smooth()).unwrap()[0];
        let l = g.abs().sum();
        let g2 = tape.grad(l, &[x], GradOptions::default()).unwrap()[0];
        for (a, b) in tape.values().iter().zip(tape.replay()) {
            assert_eq!(**a, *b);
        }
        (y.value(), g.value(), g2.value())
    };
    assert_eq!(run(), run());
}

#[test]
fn every_primitive_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    type Build = for<'t> fn(&'t Tape, Var<'t>) -> Var<'t>;
    let cases: Vec<(&str, Vec<usize>, Build)> = vec![
        ("mul", vec![4], |_, x| x.mul(x.exp()).unwrap().sum()),
        ("sub/neg/scale", vec![4], |_, x| x.scale(3.0).sub(x.square()).unwrap().neg().sum()),
        ("recip", vec![3], |_, x| x.square().scale(1.0).exp().recip().sum()),
        ("ln", vec![3], |_, x| x.square().exp().ln().sum()),
        ("sigmoid", vec![3], |_, x| x.sigmoid(2.5).unwrap().square().sum()),
        ("mul_scalar", vec![3], |_, x| {
            let s = x.square().sum();
            x.mul_scalar(s).unwrap().sum()
        }),
        ("fill", vec![3], |_, x| x.sum().fill(&[2, 2]).unwrap().square().sum()),
        ("outer", vec![3], |_, x| {
            let o = x.tape().push(super::tape::Op::Outer(x.id(), x.square().id()));
            o.square().sum()
        }),
        ("matvec_t", vec![2, 3], |t, x| {
            let g = t.constant(Tensor::new(vec![2], vec![0.3, -0.7]).unwrap());
            x.matvec_t(g).unwrap().square().sum()
        }),
        ("conv stride 2", vec![2, 7, 7], |t, x| {
            let k = t.constant(Tensor::new(vec![3, 2, 3, 3], (0..54).map(|i| ((i * 7) % 13) as f64 / 13.0 - 0.5).collect()).unwrap());
            x.conv2d(k, 2).unwrap().softplus(2.0).unwrap().sum()
        }),
        ("conv transpose", vec![2, 3, 3], |t, x| {
            let k = t.constant(Tensor::new(vec![2, 1, 2, 2], vec![0.5, -0.25, 1.0, 0.75, -0.5, 0.2, 0.1, 0.3]).unwrap());
            x.conv2d_transpose(k, 1, &[1, 4, 4]).unwrap().square().sum()
        }),
        ("avgpool", vec![2, 4, 6], |_, x| x.square().avgpool(2).unwrap().square().sum()),
        ("avgpool transpose", vec![1, 2, 2], |_, x| x.avgpool_transpose(2, &[1, 4, 5]).unwrap().exp().sum()),
        ("channels", vec![3, 2, 2], |_, x| {
            let c = x.square().sum_to_channels();
            c.expand_channels(&[3, 2]).unwrap().exp().sum()
        }),
        ("leading", vec![3, 2, 2], |_, x| x.sum_leading().square().repeat_leading(2).sum()),
        ("abs", vec![4], |_, x| x.abs().square().sum()),
    ];
    for (name, shape, build) in cases {
        let x0 = rand_tensor(&mut rng, &shape);
        let f = |x: &Tensor| {
            let tape = Tape::new();
            build(&tape, tape.constant(x.clone())).item()
        };
        let tape = Tape::new();
        let x = tape.var(x0.clone());
        let y = build(&tape, x);
        let g = tape.grad(y, &[x], GradOptions::default()).unwrap()[0];
        let err = rel_err(g.value().data(), &fd_grad(&x0, 1e-6, &f));
        assert!(err <= 1e-6, "{name}: relative error {err}");
    }
}

#[test]
fn kernel_gradients_of_conv_family_are_differentiable() {
    // second-order through ConvKernelGrad / ConvInputGrad with a trainable kernel
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let x0 = rand_tensor(&mut rng, &[1, 5, 5]);
    let k0 = rand_tensor(&mut rng, &[2, 1, 3, 3]);
    let build = |tape: &Tape, x: Var<'_>, k: &Tensor| -> f64 {
        let k = tape.var(k.clone());
        let y = x.conv2d(k, 1).unwrap().softplus(1.0).unwrap().sum();
        let gk = tape.grad(y, &[k], GradOptions::smooth()).unwrap()[0];
        gk.square().sum().item()
    };
    let f = |x: &Tensor| {
        let tape = Tape::new();
        build(&tape, tape.constant(x.clone()), &k0)
    };
    let tape = Tape::new();
    let x = tape.var(x0.clone());
    let k = tape.var(k0.clone());
    let y = x.conv2d(k, 1).unwrap().softplus(1.0).unwrap().sum();
    let gk = tape.grad(y, &[k], GradOptions::smooth()).unwrap()[0];
    let l = gk.square().sum();
    let gx = tape.grad(l, &[x], GradOptions::default()).unwrap()[0];
    let err = rel_err(gx.value().data(), &fd_grad(&x0, 1e-5, &f));
    assert!(err <= 1e-4, "relative error {err}");
}
