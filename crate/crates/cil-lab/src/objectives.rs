//! Training losses and the per-phase objective assembler.
//!
//! The class-wise decorrelation loss operates on each class present in the
//! batch: representations are standardized per dimension (mean removed,
//! divided by the unbiased standard deviation plus a small guard), the
//! correlation matrix `K = Z^T Z / (n - 1)` is formed, and the penalty is
//! either the mean of its squared entries ([`CwdMode::SquaredMean`]) or its
//! Frobenius norm ([`CwdMode::Frobenius`]). Both normalizations are in
//! circulation for this penalty; squared-mean is the default and every run
//! records which mode produced its numbers. Classes with a single sample in
//! the batch are skipped — their standard deviation is undefined — and
//! contribute exactly nothing.

use serde::{Deserialize, Serialize};

use crate::autodiff::{cosine_rows, col_std, DiffTensor, Graph};
use crate::error::{Error, Result};
use crate::mat::Mat;

/// Guard added to denominators of cosine similarities.
const COSINE_EPS: f64 = 1e-12;

/// How a class's correlation matrix is reduced to a penalty.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum CwdMode {
    /// Mean of squared entries, `||K||_F^2 / d^2`.
    #[default]
    SquaredMean,
    /// Unsquared Frobenius norm `||K||_F`.
    Frobenius,
}

impl std::fmt::Display for CwdMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CwdMode::SquaredMean => write!(f, "squared-mean"),
            CwdMode::Frobenius => write!(f, "frobenius"),
        }
    }
}

/// Anti-forgetting strategy for phases after the initial one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// No distillation; the forgetting baseline.
    Finetune,
    /// Temperature-scaled soft cross-entropy on the old-class logits.
    Lwf,
    /// Cosine distillation on representations against the previous-phase
    /// teacher.
    #[default]
    LucirLite,
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Method::Finetune => write!(f, "finetune"),
            Method::Lwf => write!(f, "lwf"),
            Method::LucirLite => write!(f, "lucir-lite"),
        }
    }
}

/// Raw (unweighted) loss parts and the weighted total for one step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct LossReport {
    pub ce: f64,
    pub cwd: f64,
    pub distill: f64,
    pub oracle: f64,
    pub total: f64,
    /// Classes skipped by the decorrelation loss because they appeared with
    /// a single sample.
    pub skipped_classes: usize,
}

impl LossReport {
    pub fn is_finite(&self) -> bool {
        self.ce.is_finite()
            && self.cwd.is_finite()
            && self.distill.is_finite()
            && self.oracle.is_finite()
            && self.total.is_finite()
    }
}

/// Class-wise decorrelation penalty over a batch of representations.
///
/// Returns an exactly-zero differentiable constant when every class in the
/// batch is a singleton.
pub fn cwd_loss(
    g: &mut Graph,
    reps: DiffTensor,
    labels: &[usize],
    mode: CwdMode,
    eps: f64,
) -> Result<DiffTensor> {
    cwd_loss_counted(g, reps, labels, mode, eps).map(|(loss, _)| loss)
}

/// As [`cwd_loss`], additionally reporting how many classes were skipped.
pub fn cwd_loss_counted(
    g: &mut Graph,
    reps: DiffTensor,
    labels: &[usize],
    mode: CwdMode,
    eps: f64,
) -> Result<(DiffTensor, usize)> {
    let d = reps.cols();
    if d < 2 {
        return Err(Error::Config(format!(
            "decorrelation needs representation dimension >= 2, got {d}"
        )));
    }
    if labels.len() != reps.rows() {
        return Err(Error::Dimension {
            op: "cwd_loss",
            left: format!("{} rows", reps.rows()),
            right: format!("{} labels", labels.len()),
        });
    }
    if eps <= 0.0 {
        return Err(Error::Config(format!("cwd eps must be positive, got {eps}")));
    }

    // Classes in ascending order; batch row order within a class is
    // irrelevant to the loss but kept deterministic anyway.
    let mut classes: Vec<usize> = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();

    let mut total: Option<DiffTensor> = None;
    let mut skipped = 0usize;
    for c in classes {
        let idx: Vec<usize> = labels
            .iter()
            .enumerate()
            .filter_map(|(i, &l)| (l == c).then_some(i))
            .collect();
        let n_c = idx.len();
        if n_c == 1 {
            skipped += 1;
            continue;
        }
        let z = g.gather_rows(reps, &idx)?;
        let mean = g.col_mean(z)?;
        let centered = g.sub_row_broadcast(z, mean)?;
        let std = col_std(g, z)?;
        let std = g.add_const(std, eps)?;
        let normalized = g.div_row_broadcast(centered, std)?;
        let zt = g.transpose(normalized)?;
        let corr = g.matmul(zt, normalized)?;
        let corr = g.scale(corr, 1.0 / (n_c - 1) as f64)?;
        let sq = g.mul(corr, corr)?;
        let contribution = match mode {
            CwdMode::SquaredMean => g.mean(sq)?,
            CwdMode::Frobenius => {
                let s = g.sum(sq)?;
                g.sqrt(s)?
            }
        };
        total = Some(match total {
            None => contribution,
            Some(t) => g.add(t, contribution)?,
        });
    }
    let loss = match total {
        Some(t) => t,
        None => g.scalar_constant(0.0)?,
    };
    Ok((loss, skipped))
}

/// Mean over rows of `1 - cos(student_row, reference_row)` against a fixed
/// reference. Gradient flows only into the student side.
pub fn oracle_mimic_loss(g: &mut Graph, student: DiffTensor, reference: &Mat) -> Result<DiffTensor> {
    if student.rows() != reference.rows() || student.cols() != reference.cols() {
        return Err(Error::Dimension {
            op: "oracle_mimic_loss",
            left: format!("{}x{}", student.rows(), student.cols()),
            right: format!("{}x{}", reference.rows(), reference.cols()),
        });
    }
    for i in 0..reference.rows() {
        if reference.row(i).iter().all(|&v| v == 0.0) {
            return Err(Error::Contract {
                op: "oracle_mimic_loss",
                message: format!("reference row {i} has zero norm"),
            });
        }
    }
    let reference = g.leaf(reference)?;
    let cos = cosine_rows(g, student, reference, COSINE_EPS)?;
    let neg = g.scale(cos, -1.0)?;
    let one_minus = g.add_const(neg, 1.0)?;
    g.mean(one_minus)
}

/// Cosine distillation against the previous-phase teacher's representations;
/// contract identical to [`oracle_mimic_loss`].
pub fn feature_distill(g: &mut Graph, student: DiffTensor, teacher_reps: &Mat) -> Result<DiffTensor> {
    oracle_mimic_loss(g, student, teacher_reps)
}

/// Temperature-scaled soft cross-entropy of the student's first
/// `teacher.cols()` logits against the teacher's softened distribution.
/// New-class logits receive exactly zero gradient.
pub fn lwf_distill(
    g: &mut Graph,
    student_logits: DiffTensor,
    teacher_logits: &Mat,
    temperature: f64,
) -> Result<DiffTensor> {
    if temperature <= 0.0 {
        return Err(Error::Config(format!(
            "distillation temperature must be positive, got {temperature}"
        )));
    }
    let c_old = teacher_logits.cols();
    if c_old > student_logits.cols() || teacher_logits.rows() != student_logits.rows() {
        return Err(Error::Dimension {
            op: "lwf_distill",
            left: format!("{}x{}", student_logits.rows(), student_logits.cols()),
            right: format!("{}x{}", teacher_logits.rows(), teacher_logits.cols()),
        });
    }
    let targets = softened_rows(teacher_logits, temperature);
    let slice = if c_old == student_logits.cols() {
        student_logits
    } else {
        g.slice_cols(student_logits, 0, c_old)?
    };
    let scaled = g.scale(slice, 1.0 / temperature)?;
    g.soft_cross_entropy(scaled, &targets)
}

/// Stable row-wise softmax of `m / temperature` as a plain matrix.
fn softened_rows(m: &Mat, temperature: f64) -> Mat {
    let mut out = Mat::zeros(m.rows(), m.cols());
    for i in 0..m.rows() {
        let row = m.row(i);
        let max = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b)) / temperature;
        let mut z = 0.0;
        for &x in row {
            z += (x / temperature - max).exp();
        }
        for (j, &x) in row.iter().enumerate() {
            out[(i, j)] = (x / temperature - max).exp() / z;
        }
    }
    out
}

/// Coefficients and switches for [`total_objective`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ObjectiveConfig {
    pub method: Method,
    /// Decorrelation coefficient; applied at the initial phase only unless
    /// `cwd_all_phases` is set.
    pub eta: f64,
    pub cwd_mode: CwdMode,
    pub cwd_eps: f64,
    pub cwd_all_phases: bool,
    /// Oracle-mimic coefficient; phase 0 only, 0 disables.
    pub beta: f64,
    /// Base distillation weight; the effective weight is
    /// `lambda_base * sqrt(C_old / C_new)` per phase.
    pub lambda_base: f64,
    pub temperature: f64,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        ObjectiveConfig {
            method: Method::default(),
            eta: 0.0,
            cwd_mode: CwdMode::default(),
            cwd_eps: 1e-5,
            cwd_all_phases: false,
            beta: 0.0,
            lambda_base: 5.0,
            temperature: 2.0,
        }
    }
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<()> {
        if self.eta < 0.0 || self.beta < 0.0 || self.lambda_base < 0.0 {
            return Err(Error::Config(
                "loss coefficients must be nonnegative".into(),
            ));
        }
        if self.temperature <= 0.0 {
            return Err(Error::Config(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if self.cwd_eps <= 0.0 {
            return Err(Error::Config(format!(
                "cwd_eps must be positive, got {}",
                self.cwd_eps
            )));
        }
        Ok(())
    }

    /// Effective distillation weight for a phase that adds `new_classes` on
    /// top of `old_classes`.
    pub fn lambda_d(&self, old_classes: usize, new_classes: usize) -> f64 {
        if new_classes == 0 {
            return 0.0;
        }
        self.lambda_base * (old_classes as f64 / new_classes as f64).sqrt()
    }
}

/// Teacher outputs for the current batch, produced by the frozen
/// previous-phase snapshot.
#[derive(Debug)]
pub struct TeacherSignals<'a> {
    /// `n x C_old` logits of the teacher.
    pub logits: &'a Mat,
    /// `n x d` representations of the teacher.
    pub reps: &'a Mat,
    /// Classes added in the current phase, for the adaptive weight.
    pub new_classes: usize,
}

/// Assembles `ce + eta * cwd + beta * oracle + lambda_d * distill` under the
/// phase rules, returning the scalar loss node and the value report.
///
/// * decorrelation: initial phase only, unless `cwd_all_phases`;
/// * oracle term: initial phase only; requesting it without oracle
///   representations is a configuration error;
/// * distillation: phases past the initial one only, per `method`.
#[allow(clippy::too_many_arguments)]
pub fn total_objective(
    g: &mut Graph,
    logits: DiffTensor,
    reps: DiffTensor,
    labels: &[usize],
    phase: usize,
    cfg: &ObjectiveConfig,
    teacher: Option<&TeacherSignals>,
    oracle_reps: Option<&Mat>,
) -> Result<(DiffTensor, LossReport)> {
    cfg.validate()?;
    let ce = g.softmax_cross_entropy(logits, labels)?;
    let mut total = ce;
    let mut report = LossReport {
        ce: g.scalar(ce),
        ..LossReport::default()
    };

    let cwd_active = cfg.eta > 0.0 && (phase == 0 || cfg.cwd_all_phases);
    if cwd_active {
        let (cwd, skipped) = cwd_loss_counted(g, reps, labels, cfg.cwd_mode, cfg.cwd_eps)?;
        report.cwd = g.scalar(cwd);
        report.skipped_classes = skipped;
        let weighted = g.scale(cwd, cfg.eta)?;
        total = g.add(total, weighted)?;
    }

    if cfg.beta > 0.0 && phase == 0 {
        let oracle = oracle_reps.ok_or_else(|| {
            Error::Config("oracle coefficient is set but no oracle representations given".into())
        })?;
        let term = oracle_mimic_loss(g, reps, oracle)?;
        report.oracle = g.scalar(term);
        let weighted = g.scale(term, cfg.beta)?;
        total = g.add(total, weighted)?;
    }

    if phase >= 1 && cfg.method != Method::Finetune {
        let signals = teacher.ok_or_else(|| {
            Error::State(format!(
                "method {} needs a teacher at phase {phase}",
                cfg.method
            ))
        })?;
        let old_classes = signals.logits.cols();
        let lambda = cfg.lambda_d(old_classes, signals.new_classes);
        let term = match cfg.method {
            Method::Lwf => lwf_distill(g, logits, signals.logits, cfg.temperature)?,
            Method::LucirLite => feature_distill(g, reps, signals.reps)?,
            Method::Finetune => unreachable!(),
        };
        report.distill = g.scalar(term);
        let weighted = g.scale(term, lambda)?;
        total = g.add(total, weighted)?;
    }

    report.total = g.scalar(total);
    if !report.is_finite() {
        return Err(Error::Numeric {
            op: "total_objective",
            message: format!("non-finite loss parts: {report:?}"),
        });
    }
    Ok((total, report))
}
