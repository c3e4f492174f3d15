//! Dense `f64` tensors and a single-use reverse-mode tape.
//!
//! Forward passes record onto a [`Tape`]; [`Tape::backward`] replays the
//! records in reverse and leaves gradients on the tape, from where they are
//! accumulated (`+=`) into parameter tensors. Callers zero parameter
//! gradients between optimizer steps.

pub mod gradcheck;
mod tape;
mod tensor;

pub use tape::{logsumexp, Tape, Var};
pub use tensor::{Tensor, TensorError};

/// Guard used wherever rows are normalized to unit length.
pub const NORM_EPS: f64 = 1e-12;

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
    let mut tape = Tape::new();
    let (va, vb) = (tape.leaf(a)?, tape.leaf(b)?);
    let out = tape.matmul(va, vb)?;
    tape.to_tensor(out)
}

pub fn l2_normalize(v: &Tensor, eps: f64) -> Result<Tensor, TensorError> {
    let mut tape = Tape::new();
    let x = tape.leaf(v)?;
    let out = tape.l2_normalize(x, eps)?;
    tape.to_tensor(out)
}

pub fn log_softmax(logits: &Tensor) -> Result<Tensor, TensorError> {
    let mut tape = Tape::new();
    let x = tape.leaf(logits)?;
    let out = tape.log_softmax(x)?;
    tape.to_tensor(out)
}

/// Slice form of [`log_softmax`]; the only entry point that can see an empty input.
pub fn log_softmax_values(logits: &[f64]) -> Result<Vec<f64>, TensorError> {
    if logits.is_empty() {
        return Err(TensorError::Empty { op: "log_softmax" });
    }
    log_softmax(&Tensor::new(vec![logits.len()], logits.to_vec())?).map(|t| t.data().to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    type Graph = Box<dyn Fn(&mut Tape, &[Var]) -> Var>;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::parameter(shape.to_vec(), data).unwrap()
    }

    /// Central differences of a scalar function of several inputs.
    fn finite_diff(
        inputs: &[Tensor],
        f: &dyn Fn(&mut Tape, &[Var]) -> Var,
        step: f64,
    ) -> Vec<Vec<f64>> {
        let eval = |inputs: &[Tensor]| {
            let mut tape = Tape::new();
            let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x).unwrap()).collect();
            let out = f(&mut tape, &vars);
            tape.value(out)[0]
        };
        let mut grads = Vec::new();
        for k in 0..inputs.len() {
            let mut gk = Vec::new();
            for i in 0..inputs[k].len() {
                let mut plus = inputs.to_vec();
                let mut minus = inputs.to_vec();
                let mut d = plus[k].data().to_vec();
                d[i] += step;
                plus[k].assign(&d).unwrap();
                d[i] -= 2.0 * step;
                minus[k].assign(&d).unwrap();
                gk.push((eval(&plus) - eval(&minus)) / (2.0 * step));
            }
            grads.push(gk);
        }
        grads
    }

    fn analytic(inputs: &[Tensor], f: &dyn Fn(&mut Tape, &[Var]) -> Var) -> Vec<Vec<f64>> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x).unwrap()).collect();
        let out = f(&mut tape, &vars);
        tape.backward(out).unwrap();
        vars.iter()
            .map(|v| tape.grad(*v).map(<[f64]>::to_vec).unwrap_or_default())
            .collect()
    }

    fn max_rel_err(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
        a.iter()
            .flatten()
            .zip(b.iter().flatten())
            .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-6))
            .fold(0.0, f64::max)
    }

    // Σ_rc w_rc·v_rc / rows with distinct weights per coordinate, via
    // the diagonal of v·Wᵀ.
    fn weighted_sum(tape: &mut Tape, v: Var) -> Var {
        let shape = tape.shape(v).to_vec();
        let (rows, cols) = (shape[0], shape[1]);
        let w: Vec<f64> = (0..rows * cols).map(|i| 0.3 + 0.17 * i as f64).collect();
        let wl = tape.constant(shape, w).unwrap();
        let prod = tape.matmul_transposed(v, wl).unwrap();
        let diag = tape.gather(prod, &(0..rows).collect::<Vec<_>>()).unwrap();
        tape.mean(diag).unwrap()
    }

    fn check(inputs: &[Tensor], f: &dyn Fn(&mut Tape, &[Var]) -> Var) -> f64 {
        max_rel_err(&analytic(inputs, f), &finite_diff(inputs, f, 1e-5))
    }

    #[test]
    fn matmul_examples() {
        let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let id = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        assert_eq!(matmul(&a, &id).unwrap().data(), a.data());
        let r = matmul(&t(&[1, 2], &[1.0, 2.0]), &t(&[2, 1], &[3.0, 4.0])).unwrap();
        assert_eq!(r.shape(), &[1, 1]);
        assert_eq!(r.data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let err = matmul(&t(&[2, 3], &[0.0; 6]), &t(&[2, 3], &[0.0; 6])).unwrap_err();
        assert_eq!(
            err,
            TensorError::Dimension {
                op: "matmul",
                left: vec![2, 3],
                right: vec![2, 3]
            }
        );
        assert!(err.to_string().contains("[2, 3] vs [2, 3]"));
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let inputs = [random(&mut rng, &[3, 4]), random(&mut rng, &[4, 2])];
        let err = check(&inputs, &|tape, v| {
            let p = tape.matmul(v[0], v[1]).unwrap();
            weighted_sum(tape, p)
        });
        assert!(err < 1e-6, "max rel err {err}");
    }

    #[test]
    fn l2_normalize_examples() {
        let out = l2_normalize(&t(&[2], &[3.0, 4.0]), 1e-12).unwrap();
        assert!((out.data()[0] - 0.6).abs() < 1e-15 && (out.data()[1] - 0.8).abs() < 1e-15);
        let zero = l2_normalize(&t(&[2], &[0.0, 0.0]), 1e-12).unwrap();
        assert_eq!(zero.data(), &[0.0, 0.0]);
    }

    #[test]
    fn l2_normalize_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let inputs = [random(&mut rng, &[1, 8])];
        let err = check(&inputs, &|tape, v| {
            let n = tape.l2_normalize(v[0], NORM_EPS).unwrap();
            weighted_sum(tape, n)
        });
        assert!(err < 1e-6, "max rel err {err}");
    }

    #[test]
    fn log_softmax_examples() {
        let out = log_softmax_values(&[0.0, 0.0]).unwrap();
        let ln2 = std::f64::consts::LN_2;
        assert!((out[0] + ln2).abs() < 1e-15 && (out[1] + ln2).abs() < 1e-15);

        let big = log_softmax_values(&[1000.0, 0.0]).unwrap();
        assert!(big[0].abs() < 1e-12);
        assert!((big[1] + 1000.0).abs() < 1e-9);

        assert_eq!(
            log_softmax_values(&[]),
            Err(TensorError::Empty { op: "log_softmax" })
        );
    }

    #[test]
    fn log_softmax_matches_scalar_oracle() {
        // softmax([1,2,3]) with denominators in closed form: 1 + e + e².
        let e = std::f64::consts::E;
        let z = 1.0 + e + e * e;
        let expect = [1.0 / z, e / z, e * e / z];
        let out = log_softmax_values(&[1.0, 2.0, 3.0]).unwrap();
        for (o, p) in out.iter().zip(expect) {
            assert!((o.exp() - p).abs() < 1e-12);
        }
    }

    #[test]
    fn dominant_logit_keeps_relative_precision() {
        // −log p of the winner at large logits is ln(1 + e^−gap); forming
        // `x − (max + lse)` would lose about 1e-14 absolute here.
        let out = log_softmax_values(&[100.0, 88.5]).unwrap();
        let oracle = (-11.5f64).exp().ln_1p();
        assert!((-out[0] - oracle).abs() <= 1e-14 * oracle);
        assert_eq!(logsumexp(&[3.0, 3.0]), 3.0 + std::f64::consts::LN_2);
    }

    #[test]
    fn backward_twice_is_rejected() {
        let mut tape = Tape::new();
        let x = tape
            .leaf(&Tensor::parameter(vec![2], vec![1.0, 2.0]).unwrap())
            .unwrap();
        let m = tape.mean(x).unwrap();
        tape.backward(m).unwrap();
        assert_eq!(tape.backward(m), Err(TensorError::TapeConsumed));
        assert_eq!(tape.grad(x), Some(&[0.5, 0.5][..]));
        assert!(matches!(tape.mean(x), Err(TensorError::TapeConsumed)));
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut tape = Tape::new();
        let x = tape
            .leaf(&Tensor::parameter(vec![2], vec![1.0, 2.0]).unwrap())
            .unwrap();
        assert!(matches!(
            tape.backward(x),
            Err(TensorError::NotScalar { .. })
        ));
    }

    #[test]
    fn foreign_vars_are_rejected() {
        let mut a = Tape::new();
        let mut b = Tape::new();
        let x = a.leaf(&Tensor::scalar(1.0).unwrap()).unwrap();
        assert_eq!(b.mean(x), Err(TensorError::ForeignVar));
    }

    #[test]
    fn accumulate_into_adds_across_tapes() {
        let mut p = Tensor::parameter(vec![2], vec![1.0, -1.0]).unwrap();
        for _ in 0..2 {
            let mut tape = Tape::new();
            let x = tape.leaf(&p).unwrap();
            let m = tape.mean(x).unwrap();
            tape.backward(m).unwrap();
            tape.accumulate_into(x, &mut p).unwrap();
        }
        assert_eq!(p.grad(), Some(&[1.0, 1.0][..]));
    }

    #[test]
    fn overflowing_op_reports_non_finite() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::scalar(1e308).unwrap()).unwrap();
        assert_eq!(
            tape.scale(x, 10.0),
            Err(TensorError::NonFinite { op: "scale" })
        );
    }

    /// Every differentiable primitive against central differences, 50 instances each.
    #[test]
    fn primitives_gradcheck_sweep() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let mut worst: f64 = 0.0;
        for _ in 0..50 {
            let (m, k, n) = (
                rng.random_range(1..4),
                rng.random_range(1..4),
                rng.random_range(2..5),
            );
            let a = random(&mut rng, &[m, k]);
            let b = random(&mut rng, &[k, n]);
            let c = random(&mut rng, &[n, k]);
            let bias = random(&mut rng, &[n]);
            let labels: Vec<usize> = (0..m).map(|_| rng.random_range(0..n)).collect();
            let cases: Vec<(Vec<Tensor>, Graph)> = vec![
                (
                    vec![a.clone(), b.clone()],
                    Box::new(|tp: &mut Tape, v: &[Var]| {
                        let p = tp.matmul(v[0], v[1]).unwrap();
                        weighted_sum(tp, p)
                    }),
                ),
                (
                    vec![a.clone(), c.clone()],
                    Box::new(|tp: &mut Tape, v: &[Var]| {
                        let p = tp.matmul_transposed(v[0], v[1]).unwrap();
                        weighted_sum(tp, p)
                    }),
                ),
                (
                    vec![a.clone(), b.clone(), bias.clone()],
                    Box::new(|tp: &mut Tape, v: &[Var]| {
                        let p = tp.matmul(v[0], v[1]).unwrap();
                        let q = tp.add_row(p, v[2]).unwrap();
                        let r = tp.tanh(q).unwrap();
                        weighted_sum(tp, r)
                    }),
                ),
                (
                    vec![a.clone(), b.clone()],
                    Box::new(|tp: &mut Tape, v: &[Var]| {
                        let p = tp.matmul(v[0], v[1]).unwrap();
                        let q = tp.relu(p).unwrap();
                        let s = tp.scale(q, -1.7).unwrap();
                        let both = tp.add(s, p).unwrap();
                        weighted_sum(tp, both)
                    }),
                ),
                (
                    vec![a.clone(), b.clone()],
                    Box::new(|tp: &mut Tape, v: &[Var]| {
                        let p = tp.matmul(v[0], v[1]).unwrap();
                        let nrm = tp.l2_normalize(p, NORM_EPS).unwrap();
                        weighted_sum(tp, nrm)
                    }),
                ),
                (
                    vec![a.clone(), b.clone()],
                    Box::new({
                        let labels = labels.clone();
                        move |tp: &mut Tape, v: &[Var]| {
                            let p = tp.matmul(v[0], v[1]).unwrap();
                            let shifted = tp.add_const(p, &vec![0.25; m * n]).unwrap();
                            let ls = tp.log_softmax(shifted).unwrap();
                            let g = tp.gather(ls, &labels).unwrap();
                            tp.mean(g).unwrap()
                        }
                    }),
                ),
            ];
            for (inputs, f) in &cases {
                worst = worst.max(check(inputs, f.as_ref()));
            }
        }
        assert!(worst < 1e-4, "worst rel err {worst}");
    }
}
