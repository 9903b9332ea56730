//! Reverse-mode automatic differentiation over dense `f64` tensors.

mod tape;
mod tensor;

pub use tape::{Tape, Var};
pub use tensor::Tensor;

pub(crate) use tape::stable_sigmoid;

use crate::error::{Error, Result};

/// Compares reverse-mode gradients of a scalar function against central differences.
///
/// `f` receives one tape variable per entry of `points`. The return value is the
/// maximum over all coordinates of `|analytic - numeric| / (|analytic| + |numeric| + 1e-12)`.
pub fn finite_difference_check_many<F>(f: F, points: &[Tensor], step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(step > 0.0) {
        return Err(Error::invalid("step", "must be positive"));
    }
    let eval = |pts: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = pts.iter().map(|p| tape.leaf(p)).collect();
        let out = f(&mut tape, &vars)?;
        let v = tape.item(out);
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFinite {
                op: "finite difference evaluation".into(),
            })
        }
    };

    let mut trainable: Vec<Tensor> = points.to_vec();
    trainable.iter_mut().for_each(|t| t.set_requires_grad(true));
    let mut tape = Tape::new();
    let vars: Vec<Var> = trainable.iter().map(|p| tape.leaf(p)).collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars.iter().map(|&v| tape.grad_or_zeros(v)).collect();

    let mut worst = 0.0f64;
    let mut probe = points.to_vec();
    for (k, grads) in analytic.iter().enumerate() {
        for (i, &a) in grads.iter().enumerate() {
            let orig = probe[k].values()[i];
            probe[k].values_mut()[i] = orig + step;
            let up = eval(&probe)?;
            probe[k].values_mut()[i] = orig - step;
            let down = eval(&probe)?;
            probe[k].values_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * step);
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs() + 1e-12);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

/// Single-input form of [`finite_difference_check_many`].
pub fn finite_difference_check<F>(f: F, point: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    finite_difference_check_many(|tape, vars| f(tape, vars[0]), std::slice::from_ref(point), step)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn sigmoid_of_zero_is_half() {
        let mut tape = Tape::new();
        let x = tape.scalar(0.0).unwrap();
        let y = tape.sigmoid(x).unwrap();
        assert_eq!(tape.item(y), 0.5);
    }

    #[test]
    fn sigmoid_derivative_at_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::param(vec![], vec![0.0]).unwrap());
        let y = tape.sigmoid(x).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0.25]);
    }

    #[test]
    fn matmul_hand_example() {
        let mut tape = Tape::new();
        let a = tape.constant(vec![2, 2], vec![1., 2., 3., 4.]).unwrap();
        let b = tape.constant(vec![2, 2], vec![5., 6., 7., 8.]).unwrap();
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c), &[19., 22., 43., 50.]);
    }

    #[test]
    fn identity_matmul_is_noop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&mut rng, vec![3, 5]);
        let mut tape = Tape::new();
        let mut eye = vec![0.0; 9];
        for i in 0..3 {
            eye[i * 4] = 1.0;
        }
        let i3 = tape.constant(vec![3, 3], eye).unwrap();
        let xv = tape.leaf(&x);
        let y = tape.matmul(i3, xv).unwrap();
        assert_eq!(tape.value(y), x.values());
    }

    #[test]
    fn shape_errors_name_the_op() {
        let mut tape = Tape::new();
        let a = tape.constant(vec![2, 3], vec![0.0; 6]).unwrap();
        let b = tape.constant(vec![2, 3], vec![0.0; 6]).unwrap();
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("matmul") && err.contains("[2, 3]"), "{err}");
        let c = tape.constant(vec![3], vec![0.0; 3]).unwrap();
        assert!(tape.add(a, c).is_err());
    }

    #[test]
    fn non_finite_outputs_are_errors() {
        let mut tape = Tape::new();
        let x = tape.scalar(0.0).unwrap();
        assert!(matches!(tape.ln(x), Err(Error::NonFinite { .. })));
        let big = tape.scalar(1000.0).unwrap();
        assert!(tape.exp(big).is_err());
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::param(vec![2], vec![1.0, 2.0]).unwrap());
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let c = tape.constant(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let s = tape.sum(c).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad_or_zeros(c), vec![0.0; 3]);
    }

    #[test]
    fn unreachable_leaves_stay_zero() {
        let mut tape = Tape::new();
        let a = tape.leaf(&Tensor::param(vec![2], vec![1.0, 2.0]).unwrap());
        let b = tape.leaf(&Tensor::param(vec![2], vec![3.0, 4.0]).unwrap());
        let s = tape.sum(a).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad_or_zeros(b), vec![0.0, 0.0]);
        assert_eq!(tape.grad(a).unwrap(), &[1.0, 1.0]);
    }

    #[test]
    fn fan_out_accumulates() {
        // y = x * x + x  =>  dy/dx = 2x + 1
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::param(vec![], vec![3.0]).unwrap());
        let sq = tape.mul(x, x).unwrap();
        let y = tape.add(sq, x).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[7.0]);
    }

    #[test]
    fn accumulate_grad_adds_across_calls() {
        let mut p = Tensor::param(vec![2], vec![1.0, -1.0]).unwrap();
        for _ in 0..2 {
            let mut tape = Tape::new();
            let v = tape.leaf(&p);
            let s = tape.sum(v).unwrap();
            tape.backward(s).unwrap();
            tape.accumulate_grad(v, &mut p).unwrap();
        }
        assert_eq!(p.grad(), &[2.0, 2.0]);
        p.zero_grad();
        assert_eq!(p.grad(), &[0.0, 0.0]);
    }

    #[test]
    fn least_squares_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = random(&mut rng, vec![4, 3]);
        let b = random(&mut rng, vec![4, 1]);
        let x = random(&mut rng, vec![3, 1]);
        let err = finite_difference_check(
            |tape, x| {
                let av = tape.leaf(&a);
                let bv = tape.leaf(&b);
                let ax = tape.matmul(av, x)?;
                let r = tape.sub(ax, bv)?;
                let sq = tape.mul(r, r)?;
                tape.mean(sq)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn sum_of_squares_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random(&mut rng, vec![6]);
        let err = finite_difference_check(
            |tape, x| {
                let sq = tape.mul(x, x)?;
                tape.sum(sq)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn constant_function_has_zero_error() {
        let x = Tensor::new(vec![3], vec![0.1, 0.2, 0.3]).unwrap();
        let err = finite_difference_check(|tape, _| tape.scalar(4.0), &x, 1e-5).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn bad_step_rejected() {
        let x = Tensor::new(vec![1], vec![0.1]).unwrap();
        assert!(finite_difference_check(|tape, x| tape.sum(x), &x, 0.0).is_err());
    }
}
