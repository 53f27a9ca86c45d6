//! Minimal reverse-mode differentiation engine.
//!
//! The operator set is closed: elementwise arithmetic (add, sub, mul, div,
//! scale, negate, relu, tanh, square), matmul, transpose, row softmax,
//! cosine similarity, row normalization, reshape, concat, slice, gather,
//! sum, mean, L2 norm and a fused softmax cross-entropy for training.

mod check;
mod tape;
mod tensor;

pub use check::{finite_diff_check, finite_diff_check_with, FdOptions, FdReport};
pub use tape::{concat, cosine_similarity, softmax, ModelId, Tape, Var};
pub use tensor::Tensor;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        t(
            shape,
            &(0..n)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect::<Vec<_>>(),
        )
    }

    #[test]
    fn elementwise_examples() {
        let tape = Tape::new();
        let a = tape.constant(t(&[2], &[1.0, 2.0]));
        let b = tape.constant(t(&[2], &[3.0, 4.0]));
        assert_eq!(a.add(b).unwrap().value().data(), &[4.0, 6.0]);
        let r = tape.constant(t(&[3], &[-1.0, 0.0, 2.0])).relu();
        assert_eq!(r.value().data(), &[0.0, 0.0, 2.0]);

        let x = tape.leaf(Tensor::scalar(3.0));
        let y = x.square();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn elementwise_errors() {
        let tape = Tape::new();
        let a = tape.constant(t(&[2], &[1.0, 2.0]));
        let b = tape.constant(t(&[3], &[1.0, 2.0, 3.0]));
        let err = a.add(b).unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch { .. }));
        assert!(err.to_string().contains("[2]") && err.to_string().contains("[3]"));
        let z = tape.constant(t(&[2], &[1.0, 0.0]));
        assert!(matches!(a.div(z), Err(Error::DivisionByZero { index: 1 })));
    }

    #[test]
    fn broadcast_rules() {
        let tape = Tape::new();
        let m = tape.leaf(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let row = tape.leaf(t(&[3], &[10.0, 20.0, 30.0]));
        let s = tape.leaf(Tensor::scalar(2.0));
        let y = m.add(row).unwrap();
        assert_eq!(y.value().data(), &[11.0, 22.0, 33.0, 14.0, 25.0, 36.0]);
        let z = y.mul(s).unwrap().sum();
        tape.backward(z).unwrap();
        assert_eq!(tape.grad(row).unwrap().data(), &[4.0, 4.0, 4.0]);
        assert_eq!(tape.grad(s).unwrap().data(), &[141.0]);
    }

    #[test]
    fn matmul_examples() {
        let tape = Tape::new();
        let eye = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let m = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        assert_eq!(eye.matmul(m).unwrap().value().data(), &[1.0, 2.0, 3.0, 4.0]);
        let r = tape.constant(t(&[1, 2], &[1.0, 2.0]));
        let c = tape.constant(t(&[2, 1], &[3.0, 4.0]));
        assert_eq!(r.matmul(c).unwrap().value().data(), &[11.0]);
        assert!(r.matmul(r).is_err());
    }

    #[test]
    fn matmul_gradient_matches_central_differences() {
        let b = random(&[4, 4], 7);
        let w = random(&[4, 4], 8);
        let a = random(&[4, 4], 9);
        // loss = sum((a·b) ⊙ w), checked against both operands
        let err_a = finite_diff_check(
            |tape, x| {
                let y = x.matmul(tape.constant(b.clone()))?;
                Ok(y.mul(tape.constant(w.clone()))?.sum())
            },
            &a,
            1e-5,
        )
        .unwrap();
        let err_b = finite_diff_check(
            |tape, x| {
                let y = tape.constant(a.clone()).matmul(x)?;
                Ok(y.mul(tape.constant(w.clone()))?.sum())
            },
            &b,
            1e-5,
        )
        .unwrap();
        assert!(err_a <= 1e-6 && err_b <= 1e-6, "{err_a} {err_b}");
    }

    #[test]
    fn softmax_examples() {
        let s = softmax(&[0.0, 0.0, 0.0]).unwrap();
        for v in s {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        // e^0/(e^0+e^1) and e^1/(e^0+e^1)
        let s = softmax(&[0.0, 1.0]).unwrap();
        assert!((s[0] - 0.268_941_421_369_995).abs() < 1e-12);
        assert!((s[1] - 0.731_058_578_630_005).abs() < 1e-12);
        assert!(matches!(softmax(&[]), Err(Error::Empty(_))));
        let big = softmax(&[1000.0, 1001.0]).unwrap();
        assert!((big[1] - s[1]).abs() < 1e-12);
    }

    #[test]
    fn cosine_examples() {
        let c = |a: &[f64], b: &[f64]| cosine_similarity(a, b).unwrap();
        assert!((c(&[1.0, 0.0], &[1.0, 0.0]) - 1.0).abs() < 1e-15);
        assert!(c(&[1.0, 0.0], &[0.0, 1.0]).abs() < 1e-15);
        assert!((c(&[1.0, 1.0], &[1.0, 0.0]) - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
        match cosine_similarity(&[1.0, 0.0], &[0.0, 0.0]) {
            Err(Error::ZeroNorm { arg, .. }) => assert_eq!(arg, "b"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn backward_examples_and_errors() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[4], &[0.3, -1.0, 2.0, 5.0]));
        let s = x.sum();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0; 4]);
        // accumulation on repeated backward
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[2.0; 4]);
        tape.zero_grad();
        assert!(tape.grad(x).is_none());

        assert!(matches!(tape.backward(x), Err(Error::NonScalarLoss(_))));
        let other = Tape::new();
        let y = other.leaf(Tensor::scalar(1.0));
        assert!(matches!(tape.backward(y), Err(Error::ForeignVariable)));

        let tape = Tape::new();
        let c = t(&[3], &[0.5, -0.2, 0.9]);
        let x = tape.leaf(c.clone());
        let loss = x.cosine_sim(tape.constant(c)).unwrap();
        tape.backward(loss).unwrap();
        assert!(tape.grad(x).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn fd_check_examples() {
        let x = random(&[6], 3);
        let err = finite_diff_check(|_, v| Ok(v.square().sum()), &x, 1e-5).unwrap();
        assert!(err <= 1e-8, "{err}");

        let w = random(&[6], 4);
        let err = finite_diff_check(
            |tape, v| Ok(v.softmax()?.mul(tape.constant(w.clone()))?.sum()),
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-5, "{err}");

        // relu applied at a kink coordinate
        let k = t(&[3], &[0.0, 1.0, -2.0]);
        let opts = FdOptions::new(1e-5).with_relu_kinks();
        let r = finite_diff_check_with(|_, v| Ok(v.relu().sum()), &k, &opts).unwrap();
        assert_eq!((r.checked, r.skipped), (2, 1));
        assert!(r.max_rel_error < 1e-8);
    }

    #[test]
    fn untracked_subgraphs_are_skipped() {
        let tape = Tape::new();
        let c = tape.constant(Tensor::scalar(2.0));
        let y = c.square();
        assert!(!y.is_tracked());
        tape.backward(y).unwrap();
        assert!(tape.grad(c).is_none());
    }

    #[test]
    fn structural_ops_gradients() {
        let x = random(&[4, 3], 11);
        let w = random(&[6, 3], 12);
        let err = finite_diff_check(
            |tape, v| {
                let top = v.slice_rows(0, 2)?;
                let bottom = v.slice_rows(2, 2)?;
                let joined = concat(&[bottom, top, v.slice_rows(1, 2)?])?;
                let g = joined.gather(std::rc::Rc::new((0..18).rev().collect()), &[6, 3])?;
                let n = g.normalize_rows()?;
                n.mul(tape.constant(w.clone()))?
                    .sum()
                    .add(v.transpose()?.l2_norm())?
                    .add(v.tanh().mean())
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn cross_entropy_gradient() {
        let x = random(&[3, 4], 5);
        let err = finite_diff_check(|_, v| v.cross_entropy(&[0, 3, 1]), &x, 1e-5).unwrap();
        assert!(err < 1e-6, "{err}");
        let tape = Tape::new();
        let v = tape.constant(Tensor::zeros(&[2, 4]));
        assert!((v.cross_entropy(&[1, 2]).unwrap().item() - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn tape_replay_is_deterministic() {
        let run = || {
            let x = random(&[5, 5], 21);
            let tape = Tape::new();
            let v = tape.leaf(x);
            let y = v.matmul(v).unwrap().softmax().unwrap().square().sum();
            tape.backward(y).unwrap();
            (y.item().to_bits(), tape.grad(v).unwrap())
        };
        let (a, ga) = run();
        let (b, gb) = run();
        assert_eq!(a, b);
        assert!(ga
            .data()
            .iter()
            .zip(gb.data())
            .all(|(p, q)| p.to_bits() == q.to_bits()));
    }

    fn vec_strategy(n: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-3.0f64..3.0, n)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn softmax_sums_to_one_and_is_permutation_equivariant(v in vec_strategy(7), shift in -50.0f64..50.0, rot in 0usize..7) {
            let s = softmax(&v).unwrap();
            prop_assert!((s.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            prop_assert!(s.iter().all(|&p| p > 0.0));
            let mut p = v.clone();
            p.rotate_left(rot);
            let mut sp = s.clone();
            sp.rotate_left(rot);
            let s2 = softmax(&p).unwrap();
            for (a, b) in s2.iter().zip(&sp) { prop_assert!((a - b).abs() < 1e-14); }
            let shifted: Vec<f64> = v.iter().map(|x| x + shift).collect();
            for (a, b) in softmax(&shifted).unwrap().iter().zip(&s) { prop_assert!((a - b).abs() < 1e-12); }
        }

        #[test]
        fn cosine_is_scale_invariant(a in vec_strategy(5), b in vec_strategy(5), c in 0.01f64..100.0) {
            prop_assume!(a.iter().any(|v| v.abs() > 1e-3) && b.iter().any(|v| v.abs() > 1e-3));
            let scaled: Vec<f64> = a.iter().map(|v| v * c).collect();
            let base = cosine_similarity(&a, &b).unwrap();
            prop_assert!((cosine_similarity(&scaled, &b).unwrap() - base).abs() <= 1e-12);
            prop_assert!((-1.0..=1.0).contains(&base));
        }

        #[test]
        fn differentiable_ops_match_central_differences(x in vec_strategy(6), w in vec_strategy(6), op in 0usize..9) {
            let xt = Tensor::new(&[2, 3], x).unwrap();
            let wt = Tensor::new(&[2, 3], w.iter().map(|v| v + 3.5).collect()).unwrap();
            let opts = FdOptions::new(1e-5).with_relu_kinks();
            let report = finite_diff_check_with(|tape, v| {
                let c = tape.constant(wt.clone());
                let y = match op {
                    0 => v.add(c)?.square(),
                    1 => v.sub(c)?.add_scalar(3.5).tanh(),
                    2 => v.mul(c)?,
                    3 => v.div(c)?,
                    4 => c.div(v.square().add_scalar(1.0))?,
                    5 => v.relu().scale(3.0).neg(),
                    6 => v.softmax()?,
                    7 => v.matmul(c.transpose()?)?,
                    _ => return v.cosine_sim(c),
                };
                Ok(y.mul(tape.constant(wt.clone())).unwrap_or(y).sum())
            }, &xt, &opts).unwrap();
            prop_assert!(report.max_rel_error <= 1e-4, "op {} err {}", op, report.max_rel_error);
        }
    }
}
