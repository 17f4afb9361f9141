//! The self-check commands: gradient verification and the spectrum-variance
//! identity sweep.

use cil_lab::autodiff::grad_check;
use cil_lab::error::Error;
use cil_lab::mat::Mat;
use cil_lab::objectives::{cwd_loss, feature_distill, lwf_distill, oracle_mimic_loss, CwdMode};
use cil_lab::rng::SplitMix64;
use cil_lab::spectral::{correlation_matrix, spectrum_variance_residual};

const GRAD_TOLERANCE: f64 = 1e-4;

fn random_mat(rng: &mut SplitMix64, rows: usize, cols: usize, lo: f64, hi: f64) -> Mat {
    let data = (0..rows * cols).map(|_| rng.uniform(lo, hi)).collect();
    Mat::from_vec(rows, cols, data).expect("sized to shape")
}

/// Runs every loss through the finite-difference checker `trials` times and
/// prints one line per loss. Exits nonzero when any error exceeds 1e-4.
pub fn cmd_grad_check(trials: u64, seed: u64) -> Result<(), Error> {
    if trials == 0 {
        return Err(Error::Config("--trials must be at least 1".into()));
    }
    let mut rng = SplitMix64::new(seed);
    let mut failures = 0;
    let mut check = |name: &str, worst: f64| {
        let status = if worst < GRAD_TOLERANCE { "ok" } else { "FAIL" };
        if worst >= GRAD_TOLERANCE {
            failures += 1;
        }
        println!("{status:4} {name:32} max relative error {worst:.3e}");
    };

    for mode in [CwdMode::SquaredMean, CwdMode::Frobenius] {
        let mut worst = 0.0f64;
        for _ in 0..trials {
            let reps = random_mat(&mut rng, 16, 8, -1.5, 1.5);
            let labels: Vec<usize> = (0..16).map(|i| i % 3).collect();
            let err = grad_check(
                |g, inputs| cwd_loss(g, inputs[0], &labels, mode, 1e-5),
                std::slice::from_ref(&reps),
                1e-5,
            )?;
            worst = worst.max(err);
        }
        check(&format!("cwd_loss ({mode})"), worst);
    }

    let mut worst = 0.0f64;
    for _ in 0..trials {
        let student = random_mat(&mut rng, 6, 5, -1.5, 1.5);
        let reference = random_mat(&mut rng, 6, 5, 0.2, 1.5);
        let err = grad_check(
            |g, inputs| oracle_mimic_loss(g, inputs[0], &reference),
            std::slice::from_ref(&student),
            1e-5,
        )?;
        worst = worst.max(err);
    }
    check("oracle_mimic_loss", worst);

    let mut worst = 0.0f64;
    for _ in 0..trials {
        let student = random_mat(&mut rng, 6, 5, -1.5, 1.5);
        let reference = random_mat(&mut rng, 6, 5, 0.2, 1.5);
        let err = grad_check(
            |g, inputs| feature_distill(g, inputs[0], &reference),
            std::slice::from_ref(&student),
            1e-5,
        )?;
        worst = worst.max(err);
    }
    check("feature_distill", worst);

    let mut worst = 0.0f64;
    for _ in 0..trials {
        let teacher = random_mat(&mut rng, 5, 3, -2.0, 2.0);
        let student = random_mat(&mut rng, 5, 6, -2.0, 2.0);
        let err = grad_check(
            |g, inputs| lwf_distill(g, inputs[0], &teacher, 2.0),
            std::slice::from_ref(&student),
            1e-5,
        )?;
        worst = worst.max(err);
    }
    check("lwf_distill", worst);

    let mut worst = 0.0f64;
    for _ in 0..trials {
        let logits = random_mat(&mut rng, 8, 4, -2.0, 2.0);
        let labels: Vec<usize> = (0..8).map(|i| i % 4).collect();
        let err = grad_check(
            |g, inputs| g.softmax_cross_entropy(inputs[0], &labels),
            std::slice::from_ref(&logits),
            1e-5,
        )?;
        worst = worst.max(err);
    }
    check("softmax_cross_entropy", worst);

    if failures > 0 {
        return Err(Error::Numeric {
            op: "grad-check",
            message: format!("{failures} losses exceeded tolerance {GRAD_TOLERANCE}"),
        });
    }
    Ok(())
}

/// Draws random correlation matrices of dimension 2..=dim and verifies the
/// identity between spectrum variance and squared Frobenius norm on each.
pub fn cmd_prop_check(dim: usize, trials: u64, seed: u64) -> Result<(), Error> {
    if dim < 2 {
        return Err(Error::Config("--dim must be at least 2".into()));
    }
    if trials == 0 {
        return Err(Error::Config("--trials must be at least 1".into()));
    }
    let mut rng = SplitMix64::new(seed);
    let mut worst_residual = 0.0f64;
    let mut worst_dim = 2;
    for _ in 0..trials {
        let d = 2 + rng.below(dim - 1);
        let n = d + 1 + rng.below(2 * d + 8);
        let reps = random_mat(&mut rng, n, d, -2.0, 2.0);
        let k = correlation_matrix(&reps, 1e-12)?;
        let residual = spectrum_variance_residual(&k)?;
        let bound = 1e-8 * d as f64;
        if residual > bound {
            return Err(Error::Numeric {
                op: "prop-check",
                message: format!("residual {residual:.3e} exceeds {bound:.3e} at d={d}"),
            });
        }
        if residual > worst_residual {
            worst_residual = residual;
            worst_dim = d;
        }
    }
    println!(
        "{trials} random correlation matrices (d in 2..={dim}): max residual {worst_residual:.3e} at d={worst_dim} (bound 1e-8*d)"
    );
    Ok(())
}
