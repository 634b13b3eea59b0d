//! Dense tensors with a tape-style reverse-mode differentiation graph.

mod graph;
pub mod kernels;
mod tensor;

pub use graph::{Gradients, Graph, Var};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum NumericsError {
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: expected a matrix, got shape {shape:?}")]
    NotMatrix { op: &'static str, shape: Vec<usize> },
    #[error("invalid shape {shape:?}")]
    InvalidShape { shape: Vec<usize> },
    #[error("shape {shape:?} does not hold {len} values")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("axis {axis} out of range for shape {shape:?}")]
    InvalidAxis { axis: usize, shape: Vec<usize> },
    #[error("index {index} out of range (bound {bound})")]
    IndexOutOfRange { index: usize, bound: usize },
    #[error("loss must be a scalar, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("position encoding dimension must be even and positive, got {dim}")]
    OddEncodingDim { dim: usize },
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
        Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    /// Central-difference check of `f` at every entry of `inputs`.
    fn check<F>(inputs: &[Tensor], f: F) -> f64
    where
        F: Fn(&mut Graph, &[Var]) -> Var,
    {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
        let loss = f(&mut g, &vars);
        let grads = g.backward(loss).unwrap();

        let eval = |ins: &[Tensor]| {
            let mut g = Graph::new();
            let vars: Vec<Var> = ins.iter().map(|t| g.input(t.clone())).collect();
            let out = f(&mut g, &vars);
            g.value(out).item()
        };

        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for (i, t) in inputs.iter().enumerate() {
            let analytic = grads.get(vars[i]).cloned().unwrap_or_else(|| Tensor::zeros(t.shape()));
            for j in 0..t.len() {
                let mut plus = inputs.to_vec();
                plus[i].data_mut()[j] += h;
                let mut minus = inputs.to_vec();
                minus[i].data_mut()[j] -= h;
                let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let a = analytic.data()[j];
                let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-6);
                worst = worst.max(rel);
            }
        }
        worst
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut g = Graph::new();
        let x = g.input(Tensor::vector(vec![1.0, 2.0]));
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum(sq).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn softmax_cross_entropy_gradient_is_p_minus_onehot() {
        let logits = Tensor::matrix(1, 3, vec![0.3, -1.2, 2.0]);
        let mut g = Graph::new();
        let z = g.input(logits.clone());
        let loss = g.cross_entropy(z, &[1], None).unwrap();
        let grads = g.backward(loss).unwrap();
        let p = kernels::softmax_rows(&logits);
        let mut want = p.data().to_vec();
        want[1] -= 1.0;
        for (a, b) in grads.get(z).unwrap().data().iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_entropy_examples() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::matrix(1, 8, vec![0.0; 8]));
        let l = g.cross_entropy(z, &[3], None).unwrap();
        assert!((g.value(l).item() - 8f64.ln()).abs() < 1e-12);

        let mut row = vec![0.0; 4];
        row[2] = 1000.0;
        let z = g.constant(Tensor::matrix(1, 4, row));
        let l = g.cross_entropy(z, &[2], None).unwrap();
        assert!(g.value(l).item().abs() < 1e-12);

        let z = g.constant(Tensor::matrix(1, 2, vec![1.0, 0.0]));
        let l = g.cross_entropy(z, &[0], None).unwrap();
        assert!((g.value(l).item() - 0.31326168751822286).abs() < 1e-12);

        let z = g.constant(Tensor::matrix(1, 2, vec![1.0, 0.0]));
        assert_eq!(
            g.cross_entropy(z, &[2], None),
            Err(NumericsError::IndexOutOfRange { index: 2, bound: 2 })
        );
    }

    #[test]
    fn cross_entropy_sums_and_ignores_padding() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::matrix(4, 6, vec![0.7; 24]));
        let l = g.cross_entropy(z, &[1, 0, 5, 0], Some(0)).unwrap();
        assert!((g.value(l).item() - 2.0 * 6f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::new();
        let x = g.input(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(
            g.backward(x),
            Err(NumericsError::NonScalarLoss { .. })
        ));
    }

    #[test]
    fn non_finite_values_are_errors() {
        let mut g = Graph::new();
        let x = g.input(Tensor::vector(vec![1e200, 1.0]));
        assert_eq!(g.mul(x, x), Err(NumericsError::NonFinite { op: "mul" }));
    }

    #[test]
    fn primitive_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = random(&mut rng, 3, 4);
        let b = random(&mut rng, 4, 2);
        let bt = random(&mut rng, 5, 4);
        let bias = Tensor::vector((0..4).map(|_| rng.random_range(-1.0..1.0)).collect());
        let w = random(&mut rng, 3, 4);

        // Weighted sums keep the loss sensitive to every output entry.
        let weighted = |g: &mut Graph, v: Var, w: &Tensor| {
            let wv = g.constant(w.clone());
            let p = g.mul(v, wv).unwrap();
            g.sum(p).unwrap()
        };
        let w32 = random(&mut rng, 3, 2);
        let w35 = random(&mut rng, 3, 5);

        let checks: Vec<(&str, f64)> = vec![
            ("matmul", check(&[a.clone(), b.clone()], |g, v| {
                let y = g.matmul(v[0], v[1]).unwrap();
                weighted(g, y, &w32)
            })),
            ("matmul_t", check(&[a.clone(), bt.clone()], |g, v| {
                let y = g.matmul_t(v[0], v[1]).unwrap();
                weighted(g, y, &w35)
            })),
            ("add_row", check(&[a.clone(), bias.clone()], |g, v| {
                let y = g.add_row(v[0], v[1]).unwrap();
                let y = g.mul(y, y).unwrap();
                g.sum(y).unwrap()
            })),
            ("add_mul_scale", check(&[a.clone(), w.clone()], |g, v| {
                let s = g.add(v[0], v[1]).unwrap();
                let m = g.mul(s, v[0]).unwrap();
                let m = g.scale(m, -1.7).unwrap();
                g.sum(m).unwrap()
            })),
            ("relu", check(std::slice::from_ref(&a), |g, v| {
                let y = g.relu(v[0]).unwrap();
                weighted(g, y, &w)
            })),
            ("softmax", check(std::slice::from_ref(&a), |g, v| {
                let y = g.softmax(v[0]).unwrap();
                weighted(g, y, &w)
            })),
            ("layer_norm", check(&[a.clone(), bias.clone(), bias.map(|x| x * 0.5)], |g, v| {
                let y = g.layer_norm(v[0], v[1], v[2]).unwrap();
                weighted(g, y, &w)
            })),
            ("gather", check(std::slice::from_ref(&a), |g, v| {
                let y = g.gather(v[0], &[2, 0, 2]).unwrap();
                weighted(g, y, &w)
            })),
            ("slice_concat", check(std::slice::from_ref(&a), |g, v| {
                let s = g.slice_cols(v[0], 1, 2).unwrap();
                let t = g.slice_cols(v[0], 0, 1).unwrap();
                let c = g.concat_cols(&[s, t, s]).unwrap();
                weighted(g, c, &w35)
            })),
            ("cross_entropy", check(std::slice::from_ref(&a), |g, v| {
                g.cross_entropy(v[0], &[1, 0, 3], Some(0)).unwrap()
            })),
            ("weighted_nll", check(&[random(&mut rng, 3, 8)], |g, v| {
                g.weighted_nll(v[0], &[7, 2, 2], &[0.5, -1.0, 2.0]).unwrap()
            })),
        ];
        for (name, err) in checks {
            assert!(err < 1e-4, "{name}: relative error {err}");
        }
    }

    #[test]
    fn softmax_rows_sum_to_one_and_shift_invariant() {
        use proptest::prelude::*;
        proptest!(|(row in proptest::collection::vec(-50.0f64..50.0, 1..12), shift in -100.0f64..100.0)| {
            let x = Tensor::vector(row.clone());
            let s = kernels::softmax_rows(&x);
            prop_assert!((s.sum() - 1.0).abs() < 1e-9);
            prop_assert!(s.data().iter().all(|&p| p > 0.0 && p <= 1.0));
            let shifted = kernels::softmax_rows(&Tensor::vector(row.iter().map(|v| v + shift).collect()));
            prop_assert!(s.max_abs_diff(&shifted) < 1e-9);
        });
    }

    #[test]
    fn uniform_cross_entropy_is_count_times_log_vocab() {
        use proptest::prelude::*;
        proptest!(|(vocab in 2usize..40, targets in proptest::collection::vec(0usize..40, 1..10), c in -5.0f64..5.0)| {
            let targets: Vec<usize> = targets.iter().map(|t| t % vocab).collect();
            let mut g = Graph::new();
            let z = g.constant(Tensor::matrix(targets.len(), vocab, vec![c; targets.len() * vocab]));
            let l = g.cross_entropy(z, &targets, Some(0)).unwrap();
            let kept = targets.iter().filter(|&&t| t != 0).count() as f64;
            prop_assert!((g.value(l).item() - kept * (vocab as f64).ln()).abs() < 1e-9);
        });
    }
}
