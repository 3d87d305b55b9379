use ndgrad::check::{numeric_gradient, relative_error};
use ndgrad::{record, Tensor};
use proptest::prelude::*;

const STEP: f64 = 1e-5;
const TOL: f64 = 1e-4;

/// Analytic gradient of a scalar function of one flat input, plus its
/// finite-difference counterpart.
fn both_gradients(f: impl Fn(&Tensor) -> Tensor, at: &[f64], shape: &[usize]) -> (Vec<f64>, Vec<f64>) {
    let ((x, y), tape) = record(|| {
        let x = Tensor::variable(at.to_vec(), shape).unwrap();
        let y = f(&x);
        (x, y)
    })
    .unwrap();
    let analytic = tape.backward(&y).unwrap().wrt_or_zeros(&x).to_vec();
    let numeric = numeric_gradient(|v| f(&Tensor::new(v.to_vec(), shape).unwrap()).item().unwrap(), at, STEP);
    (analytic, numeric)
}

fn assert_close(f: impl Fn(&Tensor) -> Tensor, at: &[f64], shape: &[usize]) {
    let (a, n) = both_gradients(f, at, shape);
    let err = relative_error(&a, &n);
    assert!(err <= TOL, "rel err {err}: analytic {a:?} numeric {n:?}");
}

fn c(data: &[f64], shape: &[usize]) -> Tensor {
    Tensor::new(data.to_vec(), shape).unwrap()
}

// Fixed weights turn every op into a scalar with a non-trivial gradient.
fn weigh(y: &Tensor) -> Tensor {
    let w: Vec<f64> = (0..y.numel()).map(|i| 0.3 + 0.7 * ((i * 7 % 5) as f64) - 1.1).collect();
    y.mul(&c(&w, y.shape())).unwrap().sum()
}

fn vals(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-2.0f64..2.0, n)
}

#[test]
fn square_sum_example() {
    let (a, n) = both_gradients(|x| x.square().sum(), &[1.0, 2.0, 3.0], &[3]);
    assert_eq!(a, vec![2.0, 4.0, 6.0]);
    assert!(relative_error(&a, &n) <= 1e-6);
}

#[test]
fn two_layer_tanh_mlp() {
    let w1 = c(&[0.4, -0.3, 0.2, 0.9, -0.5, 0.1], &[2, 3]);
    let b1 = c(&[0.05, -0.1, 0.2], &[3]);
    let w2 = c(&[0.7, -1.2, 0.3], &[3]);
    let input = c(&[0.3, -0.8, 1.1, 0.6], &[2, 2]);
    // Gradient w.r.t. the first-layer weights.
    assert_close(
        |w: &Tensor| {
            let h = input.matmul(w).unwrap().add(&b1.repeat_rows(2).unwrap()).unwrap().tanh();
            h.matmul(&w2).unwrap().sum()
        },
        w1.data(),
        &[2, 3],
    );
}

#[test]
fn linearity_of_backward() {
    let at = [0.3, -1.2, 0.8];
    let f1 = |x: &Tensor| x.tanh().sum();
    let f2 = |x: &Tensor| x.square().mul(&c(&[1.0, 2.0, 3.0], &[3])).unwrap().sum();
    let (g1, _) = both_gradients(f1, &at, &[3]);
    let (g2, _) = both_gradients(f2, &at, &[3]);
    let (g12, _) = both_gradients(|x| f1(x).add(&f2(x)).unwrap(), &at, &[3]);
    for i in 0..3 {
        assert!((g12[i] - (g1[i] + g2[i])).abs() <= 1e-14);
    }
}

#[test]
fn replay_is_bit_identical() {
    let ((x, y), tape) = record(|| {
        let x = Tensor::variable(vec![0.1, 0.2, -0.3, 0.4], &[2, 2]).unwrap();
        let y = x.matmul(&x).unwrap().tanh().exp().mean();
        (x, y)
    })
    .unwrap();
    let a = tape.backward(&y).unwrap().wrt_or_zeros(&x).to_vec();
    let b = tape.backward(&y).unwrap().wrt_or_zeros(&x).to_vec();
    assert_eq!(a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn grad_add(a in vals(4), b in vals(4)) {
        let bt = c(&b, &[4]);
        assert_close(|x| weigh(&x.add(&bt).unwrap()), &a, &[4]);
        let at = c(&a, &[4]);
        assert_close(|x| weigh(&at.add(x).unwrap()), &b, &[4]);
    }

    #[test]
    fn grad_sub(a in vals(4), b in vals(4)) {
        let bt = c(&b, &[4]);
        assert_close(|x| weigh(&x.sub(&bt).unwrap()), &a, &[4]);
        let at = c(&a, &[4]);
        assert_close(|x| weigh(&at.sub(x).unwrap()), &b, &[4]);
    }

    #[test]
    fn grad_mul(a in vals(6), b in vals(6), s in -2.0f64..2.0) {
        let bt = c(&b, &[2, 3]);
        assert_close(|x| weigh(&x.mul(&bt).unwrap()), &a, &[2, 3]);
        let st = Tensor::scalar(s);
        assert_close(|x| weigh(&x.mul(&st).unwrap()), &a, &[2, 3]);
        let at = c(&a, &[2, 3]);
        assert_close(|x| weigh(&at.mul(x).unwrap()), &[s], &[]);
    }

    #[test]
    fn grad_scale_shift_neg(a in vals(5), k in -3.0f64..3.0) {
        assert_close(|x| weigh(&x.scale(k).shift(0.5).neg()), &a, &[5]);
    }

    #[test]
    fn grad_matmul(a in vals(6), b in vals(12), v in vals(3)) {
        let bt = c(&b, &[3, 4]);
        assert_close(|x| weigh(&x.matmul(&bt).unwrap()), &a, &[2, 3]);
        let at = c(&a, &[2, 3]);
        assert_close(|x| weigh(&at.matmul(x).unwrap()), &b, &[3, 4]);
        assert_close(|x| weigh(&at.matmul(x).unwrap()), &v, &[3]);
    }

    #[test]
    fn grad_unary(a in vals(5)) {
        assert_close(|x| weigh(&x.tanh()), &a, &[5]);
        assert_close(|x| weigh(&x.exp()), &a, &[5]);
        assert_close(|x| weigh(&x.square()), &a, &[5]);
    }

    #[test]
    fn grad_log(a in prop::collection::vec(0.1f64..3.0, 5)) {
        assert_close(|x| weigh(&x.ln()), &a, &[5]);
    }

    #[test]
    fn grad_reductions(a in vals(6)) {
        assert_close(|x| x.sum(), &a, &[2, 3]);
        assert_close(|x| x.mean().square(), &a, &[2, 3]);
        assert_close(|x| weigh(&x.sum_axis(0).unwrap()), &a, &[2, 3]);
        assert_close(|x| weigh(&x.sum_axis(1).unwrap()), &a, &[2, 3]);
    }

    #[test]
    fn grad_concat_reshape_repeat(a in vals(6), b in vals(4)) {
        let bt = c(&b, &[2, 2]);
        assert_close(|x| weigh(&Tensor::concat(&[x, &bt], 1).unwrap()), &a, &[2, 3]);
        assert_close(|x| weigh(&Tensor::concat(&[&bt, x], 0).unwrap()), &b, &[2, 2]);
        assert_close(|x| weigh(&x.reshape(&[3, 2]).unwrap().square()), &a, &[2, 3]);
        assert_close(|x| weigh(&x.repeat_rows(3).unwrap().tanh()), &b, &[4]);
    }

    #[test]
    fn grad_clamp_minimum(a in vals(5), b in vals(5)) {
        // Keep clear of the kinks so the finite differences are valid.
        prop_assume!(a.iter().all(|v| (v.abs() - 1.0).abs() > 1e-3));
        prop_assume!(a.iter().zip(&b).all(|(x, y)| (x - y).abs() > 1e-3));
        assert_close(|x| weigh(&x.clamp(-1.0, 1.0)), &a, &[5]);
        let bt = c(&b, &[5]);
        assert_close(|x| weigh(&x.minimum(&bt).unwrap()), &a, &[5]);
    }

    #[test]
    fn values_match_scalar_definitions(a in vals(4), b in vals(4)) {
        let (at, bt) = (c(&a, &[4]), c(&b, &[4]));
        let sum = at.add(&bt).unwrap();
        let prod = at.mul(&bt).unwrap();
        for i in 0..4 {
            prop_assert_eq!(sum.data()[i], a[i] + b[i]);
            prop_assert_eq!(prod.data()[i], a[i] * b[i]);
        }
        prop_assert_eq!(at.sum().item().unwrap(), a.iter().sum::<f64>());
    }
}
