//! Finite-difference gradient checking.
//!
//! [`grad_check`] is the independent oracle for every differentiable
//! primitive and loss in this crate: it rebuilds the graph twice per input
//! coordinate and compares the central difference against the analytic
//! gradient from one backward pass.

use crate::autodiff::{DiffTensor, Graph};
use crate::error::{Error, Result};
use crate::mat::Mat;

/// Compares analytic gradients of a scalar-valued builder against central
/// finite differences, returning the maximum relative error
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)` over all
/// coordinates of all inputs.
///
/// `build` must construct the loss from scratch on the graph it is given;
/// it is called `2 * total_coordinates + 1` times.
pub fn grad_check<F>(build: F, inputs: &[Mat], eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[DiffTensor]) -> Result<DiffTensor>,
{
    if eps <= 0.0 {
        return Err(Error::Contract {
            op: "grad_check",
            message: format!("eps must be positive, got {eps}"),
        });
    }
    for (i, m) in inputs.iter().enumerate() {
        if !m.is_finite() {
            return Err(Error::Contract {
                op: "grad_check",
                message: format!("input {i} contains non-finite entries"),
            });
        }
    }

    let eval = |points: &[Mat]| -> Result<f64> {
        let mut g = Graph::new();
        let leaves: Vec<DiffTensor> = points
            .iter()
            .map(|m| g.leaf(m))
            .collect::<Result<_>>()?;
        let loss = build(&mut g, &leaves)?;
        if !loss.is_scalar() {
            return Err(Error::Contract {
                op: "grad_check",
                message: "builder must return a scalar".into(),
            });
        }
        Ok(g.scalar(loss))
    };

    // Analytic pass.
    let mut g = Graph::new();
    let leaves: Vec<DiffTensor> = inputs.iter().map(|m| g.leaf(m)).collect::<Result<_>>()?;
    let loss = build(&mut g, &leaves)?;
    g.backward(loss)?;
    let analytic: Vec<Vec<f64>> = leaves.iter().map(|&t| g.grad(t).to_vec()).collect();

    let mut max_rel = 0.0f64;
    let mut points = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        for (k, &orig) in input.data().iter().enumerate() {
            points[i].data_mut()[k] = orig + eps;
            let f_plus = eval(&points)?;
            points[i].data_mut()[k] = orig - eps;
            let f_minus = eval(&points)?;
            points[i].data_mut()[k] = orig;

            let numeric = (f_plus - f_minus) / (2.0 * eps);
            if !numeric.is_finite() {
                return Err(Error::Numeric {
                    op: "grad_check",
                    message: format!("non-finite difference quotient at input {i} coord {k}"),
                });
            }
            let a = analytic[i][k];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(max_rel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    fn random_mat(rng: &mut SplitMix64, rows: usize, cols: usize) -> Mat {
        let data = (0..rows * cols).map(|_| rng.uniform(-1.0, 1.0)).collect();
        Mat::from_vec(rows, cols, data).unwrap()
    }

    #[test]
    fn sum_of_squares_gradient_is_exact() {
        // f = sum(x*x), analytic gradient 2x; the checker itself is the
        // derived oracle here.
        let mut rng = SplitMix64::new(11);
        let x = random_mat(&mut rng, 3, 4);
        let err = grad_check(
            |g, inputs| {
                let sq = g.mul(inputs[0], inputs[0])?;
                g.sum(sq)
            },
            &[x],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "max relative error {err}");
    }

    #[test]
    fn softmax_cross_entropy_matches_finite_differences() {
        let mut rng = SplitMix64::new(23);
        let logits = random_mat(&mut rng, 4, 3);
        let labels = vec![0, 2, 1, 2];
        let err = grad_check(
            move |g, inputs| g.softmax_cross_entropy(inputs[0], &labels),
            &[logits],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "max relative error {err}");
    }

    #[test]
    fn matmul_chain_matches_finite_differences() {
        let mut rng = SplitMix64::new(37);
        let a = random_mat(&mut rng, 3, 4);
        let b = random_mat(&mut rng, 4, 2);
        let err = grad_check(
            |g, inputs| {
                let y = g.matmul(inputs[0], inputs[1])?;
                let r = g.relu(y)?;
                g.mean(r)
            },
            &[a, b],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "max relative error {err}");
    }

    #[test]
    fn broadcast_ops_match_finite_differences() {
        let mut rng = SplitMix64::new(51);
        let x = random_mat(&mut rng, 5, 3);
        let bias = random_mat(&mut rng, 1, 3);
        let err = grad_check(
            |g, inputs| {
                let shifted = g.add_row_broadcast(inputs[0], inputs[1])?;
                let m = g.col_mean(shifted)?;
                let centered = g.sub_row_broadcast(shifted, m)?;
                let sq = g.mul(centered, centered)?;
                let spread = g.mean(sq)?;
                // Centering cancels the bias, so add a term that keeps the
                // bias gradient nonzero; otherwise the check only measures
                // cancellation noise.
                let drift = g.mean(shifted)?;
                g.add(spread, drift)
            },
            &[x, bias],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "max relative error {err}");
    }

    #[test]
    fn scale_by_scalar_reaches_the_scalar() {
        let mut rng = SplitMix64::new(67);
        let x = random_mat(&mut rng, 2, 3);
        let s = Mat::from_vec(1, 1, vec![1.7]).unwrap();
        let err = grad_check(
            |g, inputs| {
                let y = g.scale_by_scalar(inputs[0], inputs[1])?;
                let sq = g.mul(y, y)?;
                g.sum(sq)
            },
            &[x, s],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "max relative error {err}");
    }

    #[test]
    fn rejects_non_positive_eps() {
        let x = Mat::zeros(1, 1);
        let err = grad_check(|g, inputs| g.sum(inputs[0]), &[x], 0.0).unwrap_err();
        assert!(matches!(err, Error::Contract { .. }));
    }

    /// Every differentiable primitive, ten randomized trials each with a
    /// fixed seed. Each builder reduces through `sum` so the checked op sits
    /// in the middle of the chain.
    #[test]
    fn every_primitive_passes_grad_check() {
        type Builder = fn(&mut Graph, &[DiffTensor]) -> crate::error::Result<DiffTensor>;
        // (name, input shapes, positive-only inputs, builder)
        type Case = (&'static str, Vec<(usize, usize)>, bool, Builder);
        let cases: Vec<Case> = vec![
            ("matmul", vec![(3, 4), (4, 2)], false, |g, t| {
                let y = g.matmul(t[0], t[1])?;
                g.sum(y)
            }),
            ("transpose", vec![(3, 4)], false, |g, t| {
                let y = g.transpose(t[0])?;
                let sq = g.mul(y, y)?;
                g.sum(sq)
            }),
            ("add", vec![(3, 3), (3, 3)], false, |g, t| {
                let y = g.add(t[0], t[1])?;
                let sq = g.mul(y, y)?;
                g.sum(sq)
            }),
            ("sub", vec![(3, 3), (3, 3)], false, |g, t| {
                let y = g.sub(t[0], t[1])?;
                let sq = g.mul(y, y)?;
                g.sum(sq)
            }),
            ("mul", vec![(3, 3), (3, 3)], false, |g, t| {
                let y = g.mul(t[0], t[1])?;
                g.sum(y)
            }),
            ("div", vec![(3, 3), (3, 3)], true, |g, t| {
                let y = g.div(t[0], t[1])?;
                g.sum(y)
            }),
            ("add_row_broadcast", vec![(4, 3), (1, 3)], false, |g, t| {
                let y = g.add_row_broadcast(t[0], t[1])?;
                let sq = g.mul(y, y)?;
                g.sum(sq)
            }),
            ("sub_row_broadcast", vec![(4, 3), (1, 3)], false, |g, t| {
                let y = g.sub_row_broadcast(t[0], t[1])?;
                let sq = g.mul(y, y)?;
                g.sum(sq)
            }),
            ("div_row_broadcast", vec![(4, 3), (1, 3)], true, |g, t| {
                let y = g.div_row_broadcast(t[0], t[1])?;
                g.sum(y)
            }),
            ("div_col_broadcast", vec![(4, 3), (4, 1)], true, |g, t| {
                let y = g.div_col_broadcast(t[0], t[1])?;
                g.sum(y)
            }),
            ("scale", vec![(3, 3)], false, |g, t| {
                let y = g.scale(t[0], -1.7)?;
                let sq = g.mul(y, y)?;
                g.sum(sq)
            }),
            ("add_const", vec![(3, 3)], false, |g, t| {
                let y = g.add_const(t[0], 0.9)?;
                let sq = g.mul(y, y)?;
                g.sum(sq)
            }),
            ("scale_by_scalar", vec![(3, 3), (1, 1)], false, |g, t| {
                let y = g.scale_by_scalar(t[0], t[1])?;
                let sq = g.mul(y, y)?;
                g.sum(sq)
            }),
            // Positive inputs keep the finite difference away from the kink.
            ("relu", vec![(3, 4)], true, |g, t| {
                let y = g.relu(t[0])?;
                let sq = g.mul(y, y)?;
                g.sum(sq)
            }),
            ("sqrt", vec![(3, 4)], true, |g, t| {
                let y = g.sqrt(t[0])?;
                g.sum(y)
            }),
            ("sum", vec![(3, 4)], false, |g, t| g.sum(t[0])),
            ("mean", vec![(3, 4)], false, |g, t| g.mean(t[0])),
            ("row_sum", vec![(3, 4)], false, |g, t| {
                let y = g.row_sum(t[0])?;
                let sq = g.mul(y, y)?;
                g.sum(sq)
            }),
            ("col_sum", vec![(3, 4)], false, |g, t| {
                let y = g.col_sum(t[0])?;
                let sq = g.mul(y, y)?;
                g.sum(sq)
            }),
            ("col_mean", vec![(3, 4)], false, |g, t| {
                let y = g.col_mean(t[0])?;
                let sq = g.mul(y, y)?;
                g.sum(sq)
            }),
            ("gather_rows", vec![(5, 3)], false, |g, t| {
                let y = g.gather_rows(t[0], &[4, 0, 2, 0])?;
                let sq = g.mul(y, y)?;
                g.sum(sq)
            }),
            ("slice_cols", vec![(3, 5)], false, |g, t| {
                let y = g.slice_cols(t[0], 1, 4)?;
                let sq = g.mul(y, y)?;
                g.sum(sq)
            }),
            ("softmax_cross_entropy", vec![(4, 3)], false, |g, t| {
                g.softmax_cross_entropy(t[0], &[0, 2, 1, 2])
            }),
            ("soft_cross_entropy", vec![(3, 4)], false, |g, t| {
                let targets = Mat::from_vec(
                    3,
                    4,
                    vec![0.1, 0.2, 0.3, 0.4, 0.25, 0.25, 0.25, 0.25, 0.7, 0.1, 0.1, 0.1],
                )
                .unwrap();
                g.soft_cross_entropy(t[0], &targets)
            }),
        ];

        let mut rng = SplitMix64::new(424242);
        for (name, shapes, positive, builder) in cases {
            let mut worst = 0.0f64;
            for _ in 0..10 {
                let inputs: Vec<Mat> = shapes
                    .iter()
                    .map(|&(r, c)| {
                        let (lo, hi) = if positive { (0.4, 1.6) } else { (-1.2, 1.2) };
                        random_range_mat(&mut rng, r, c, lo, hi)
                    })
                    .collect();
                let err = grad_check(builder, &inputs, 1e-5).unwrap();
                worst = worst.max(err);
            }
            assert!(worst < 1e-4, "{name}: max relative error {worst}");
        }
    }

    fn random_range_mat(rng: &mut SplitMix64, rows: usize, cols: usize, lo: f64, hi: f64) -> Mat {
        let data = (0..rows * cols).map(|_| rng.uniform(lo, hi)).collect();
        Mat::from_vec(rows, cols, data).unwrap()
    }

    #[test]
    fn division_and_normalization_match_finite_differences() {
        let mut rng = SplitMix64::new(93);
        // Keep away from zero so the quotient is well conditioned.
        let data: Vec<f64> = (0..12).map(|_| rng.uniform(0.5, 2.0)).collect();
        let x = Mat::from_vec(4, 3, data).unwrap();
        let err = grad_check(
            |g, inputs| {
                let n = crate::autodiff::l2_normalize_rows(g, inputs[0], 1e-12)?;
                let s = col_std_loss(g, n)?;
                Ok(s)
            },
            &[x],
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-4, "max relative error {err}");
    }

    fn col_std_loss(g: &mut Graph, t: DiffTensor) -> crate::error::Result<DiffTensor> {
        let s = crate::autodiff::col_std(g, t)?;
        g.sum(s)
    }
}
