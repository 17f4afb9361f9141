//! Phase-by-phase training orchestration.
//!
//! [`run_protocol`] drives the full loop: build data and a phase plan, train
//! phase 0 (optionally with decorrelation and the oracle-mimic term), then
//! for each later phase snapshot the teacher, extend the head, train on new
//! classes plus exemplar replay with distillation, evaluate over all seen
//! classes, and rebuild the exemplar memory. Every number in the resulting
//! report is a pure function of `(config, seeds)`.

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::data::{gaussian_mixture, load_csv, make_phase_plan, Dataset, MixtureSpec, Split};
use crate::error::{Error, Result};
use crate::memory::ExemplarMemory;
use crate::model::{Network, NetworkConfig, ParamDeltas};
use crate::objectives::{total_objective, LossReport, Method, ObjectiveConfig, TeacherSignals};
use crate::rng::SplitMix64;
use crate::spectral::{conditional_mi_estimate, SpectrumReport, SpectrumSource, MI_EIGENVALUE_FLOOR};

/// Where the training and test data come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DatasetSpec {
    Synthetic(MixtureSpec),
    Csv {
        train_path: String,
        test_path: String,
    },
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec::Synthetic(MixtureSpec::default())
    }
}

/// Step-decay learning-rate schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LrSchedule {
    pub initial: f64,
    /// Epoch fractions at which the rate is multiplied by `decay_factor`.
    pub decay_at_fractions: Vec<f64>,
    pub decay_factor: f64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule {
            initial: 0.1,
            decay_at_fractions: vec![0.5, 0.75],
            decay_factor: 0.1,
        }
    }
}

impl LrSchedule {
    /// Learning rate for a 0-based epoch out of `total` epochs.
    pub fn rate_at(&self, epoch: usize, total: usize) -> f64 {
        let mut rate = self.initial;
        for f in &self.decay_at_fractions {
            let boundary = (f * total as f64).floor() as usize;
            if epoch >= boundary && boundary > 0 {
                rate *= self.decay_factor;
            }
        }
        rate
    }
}

/// Complete description of one experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProtocolConfig {
    pub dataset: DatasetSpec,
    /// Classes learned in the initial phase (`B`).
    pub initial_classes: usize,
    /// Classes added per later phase (`S`).
    pub increment_classes: usize,
    pub shuffle_seed: u64,
    /// Exemplars retained per class (`R`).
    pub exemplars_per_class: usize,
    pub objective: ObjectiveConfig,
    pub epochs_per_phase: usize,
    pub batch_size: usize,
    pub lr: LrSchedule,
    pub momentum: f64,
    pub weight_decay: f64,
    pub network: NetworkConfig,
    /// Drives batch shuffling during training.
    pub run_seed: u64,
    pub normalize_before_herding: bool,
    /// Initialization seed for the jointly-trained oracle network.
    pub oracle_seed: u64,
    /// Epochs for oracle training; defaults to `epochs_per_phase` when zero.
    pub oracle_epochs: usize,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        ProtocolConfig {
            dataset: DatasetSpec::default(),
            initial_classes: 6,
            increment_classes: 2,
            shuffle_seed: 1993,
            exemplars_per_class: 5,
            objective: ObjectiveConfig::default(),
            epochs_per_phase: 40,
            batch_size: 32,
            lr: LrSchedule::default(),
            momentum: 0.9,
            weight_decay: 0.0,
            network: NetworkConfig::default(),
            run_seed: 0,
            normalize_before_herding: false,
            oracle_seed: 9000,
            oracle_epochs: 0,
        }
    }
}

impl ProtocolConfig {
    pub fn validate(&self) -> Result<()> {
        self.objective.validate()?;
        self.network.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        if self.lr.initial <= 0.0 || self.lr.decay_factor <= 0.0 {
            return Err(Error::Config("learning-rate values must be positive".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight_decay must be nonnegative".into()));
        }
        Ok(())
    }

    /// Re-seeds the config for the `k`-th member of a multi-seed battery:
    /// training shuffles, network init and the oracle init all move
    /// together; the dataset stays fixed, as repeated runs on one dataset.
    pub fn with_seed_offset(&self, k: u64) -> ProtocolConfig {
        let mut cfg = self.clone();
        cfg.run_seed = self.run_seed.wrapping_add(k);
        cfg.network.seed = self.network.seed.wrapping_add(k);
        cfg.oracle_seed = self.oracle_seed.wrapping_add(k);
        cfg
    }

    fn load_data(&self) -> Result<(Dataset, Dataset)> {
        match &self.dataset {
            DatasetSpec::Synthetic(spec) => gaussian_mixture(spec),
            DatasetSpec::Csv { train_path, test_path } => {
                let train = load_csv(std::path::Path::new(train_path), Split::Train)?;
                let test = load_csv(std::path::Path::new(test_path), Split::Test)?;
                if train.label_map != test.label_map {
                    return Err(Error::Config(format!(
                        "train and test label sets differ: {:?} vs {:?}",
                        train.label_map.keys().collect::<Vec<_>>(),
                        test.label_map.keys().collect::<Vec<_>>()
                    )));
                }
                if train.label_map.iter().any(|(orig, mapped)| orig != mapped) {
                    log::info!("csv labels remapped: {:?}", train.label_map);
                }
                if train.dataset.input_dim() != test.dataset.input_dim() {
                    return Err(Error::Config(format!(
                        "train dimension {} does not match test dimension {}",
                        train.dataset.input_dim(),
                        test.dataset.input_dim()
                    )));
                }
                Ok((train.dataset, test.dataset))
            }
        }
    }
}

/// One optimization step's losses, for the metrics trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub phase: usize,
    pub epoch: usize,
    pub step: usize,
    pub losses: LossReport,
}

/// Condensed view of a phase's loss trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossTraceSummary {
    pub steps: usize,
    pub mean_total: f64,
    pub final_losses: LossReport,
}

/// Everything measured after one phase.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PhaseResult {
    pub phase: usize,
    pub classes_learned: Vec<usize>,
    /// Top-1 accuracy in percent over test samples of all seen classes.
    pub accuracy: f64,
    pub per_class_accuracy: BTreeMap<usize, f64>,
    pub loss_summary: LossTraceSummary,
    /// Covariance spectra of each seen class's test representations.
    pub spectra: Vec<SpectrumReport>,
    /// Class-averaged log-eigenvalue sum over the seen classes.
    pub conditional_mi: f64,
}

/// Full outcome of one protocol run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub config: ProtocolConfig,
    pub phases: Vec<PhaseResult>,
    pub average_incremental_accuracy: f64,
    pub run_seed: u64,
    /// Wall-clock seconds; excluded from serialized reports so that two
    /// identical runs produce byte-identical files.
    #[serde(skip)]
    pub wall_clock_secs: f64,
}

/// Report plus the artifacts that feed the CSV exports.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub report: RunReport,
    pub steps: Vec<StepRecord>,
    pub memory: ExemplarMemory,
    pub network: Network,
    pub test_data: Dataset,
}

/// Arithmetic mean of per-phase accuracies.
pub fn average_incremental_accuracy(per_phase: &[f64]) -> Result<f64> {
    if per_phase.is_empty() {
        return Err(Error::Contract {
            op: "average_incremental_accuracy",
            message: "no phase accuracies given".into(),
        });
    }
    Ok(per_phase.iter().sum::<f64>() / per_phase.len() as f64)
}

/// Accuracy of `net` on test samples of the seen classes, with logits
/// restricted to the seen head rows.
pub fn evaluate(
    net: &Network,
    test: &Dataset,
    learned_order: &[usize],
) -> Result<(f64, BTreeMap<usize, f64>)> {
    if learned_order.is_empty() {
        return Err(Error::Contract {
            op: "evaluate",
            message: "no classes seen yet".into(),
        });
    }
    let mut per_class = BTreeMap::new();
    let mut correct_total = 0usize;
    let mut count_total = 0usize;
    for (head_row, &class) in learned_order.iter().enumerate() {
        let indices = test.class_indices(class);
        if indices.is_empty() {
            return Err(Error::Evaluation(format!(
                "seen class {class} has no test samples"
            )));
        }
        let batch = test.features.select_rows(indices);
        let (_, logits) = net.forward_eval(&batch)?;
        let mut correct = 0usize;
        for i in 0..logits.rows() {
            let row = logits.row(i);
            let mut best = (f64::NEG_INFINITY, 0usize);
            for (j, &v) in row.iter().enumerate().take(learned_order.len()) {
                if v > best.0 {
                    best = (v, j);
                }
            }
            if best.1 == head_row {
                correct += 1;
            }
        }
        per_class.insert(class, 100.0 * correct as f64 / indices.len() as f64);
        correct_total += correct;
        count_total += indices.len();
    }
    let accuracy = 100.0 * correct_total as f64 / count_total as f64;
    Ok((accuracy, per_class))
}

/// Mini-batch SGD with momentum over the union of new-class samples and the
/// exemplar store, applying the phase's objective rules.
#[allow(clippy::too_many_arguments)]
pub fn train_phase(
    net: &mut Network,
    phase_classes: &[usize],
    train: &Dataset,
    memory: &ExemplarMemory,
    teacher: Option<&Network>,
    oracle: Option<&Network>,
    class_to_head: &BTreeMap<usize, usize>,
    config: &ProtocolConfig,
    phase: usize,
) -> Result<Vec<StepRecord>> {
    if net.is_frozen() {
        return Err(Error::State("cannot train a frozen network".into()));
    }
    let needs_teacher = phase >= 1 && config.objective.method != Method::Finetune;
    if needs_teacher && teacher.is_none() {
        return Err(Error::State(format!(
            "phase {phase} with method {} requires a teacher",
            config.objective.method
        )));
    }

    // Replay pool: this phase's samples plus every stored exemplar.
    let mut pool = train.indices_of_classes(phase_classes);
    pool.extend(memory.all_indices());
    let new_classes_count = phase_classes.len();

    let mut rng = SplitMix64::new(config.run_seed).derive(0x7261 + phase as u64);
    let mut velocity = ParamDeltas::zeros_like(net);
    let mut trace = Vec::new();

    for epoch in 0..config.epochs_per_phase {
        let lr = config.lr.rate_at(epoch, config.epochs_per_phase);
        rng.shuffle(&mut pool);
        for (step, chunk) in pool.chunks(config.batch_size).enumerate() {
            let batch_x = train.features.select_rows(chunk);
            let labels: Vec<usize> = chunk
                .iter()
                .map(|&i| class_to_head[&train.labels[i]])
                .collect();

            // Numeric blow-ups anywhere in the step abort with the step
            // identifier and whatever losses were seen last.
            let losses = (|| -> Result<LossReport> {
                let teacher_data = match (needs_teacher, teacher) {
                    (true, Some(t)) => Some(t.forward_eval(&batch_x)?),
                    _ => None,
                };
                let oracle_reps = match oracle {
                    Some(o) if phase == 0 && config.objective.beta > 0.0 => {
                        Some(o.representations(&batch_x)?)
                    }
                    _ => None,
                };

                let mut g = Graph::new();
                let (bound, reps, logits) = net.forward(&mut g, &batch_x)?;
                let signals = teacher_data.as_ref().map(|(t_reps, t_logits)| TeacherSignals {
                    logits: t_logits,
                    reps: t_reps,
                    new_classes: new_classes_count,
                });
                let (loss, losses) = total_objective(
                    &mut g,
                    logits,
                    reps,
                    &labels,
                    phase,
                    &config.objective,
                    signals.as_ref(),
                    oracle_reps.as_ref(),
                )?;
                g.backward(loss)?;

                let mut grads = bound.gradients(&g);
                if config.weight_decay > 0.0 {
                    apply_weight_decay(&mut grads, net, config.weight_decay);
                }
                let delta = velocity.momentum_step(&grads, config.momentum, lr);
                net.apply_update(&delta)?;
                Ok(losses)
            })()
            .map_err(|e| match e {
                Error::Numeric { op, message } => Error::Numeric {
                    op,
                    message: format!(
                        "{message} at phase {phase} epoch {epoch} step {step}; last losses {:?}",
                        trace.last().map(|s: &StepRecord| s.losses)
                    ),
                },
                other => other,
            })?;
            trace.push(StepRecord {
                phase,
                epoch,
                step,
                losses,
            });
        }
    }
    Ok(trace)
}

/// Plain L2 regularization on weight matrices and classifier rows; biases
/// and the head scale are left undecayed.
fn apply_weight_decay(grads: &mut ParamDeltas, net: &Network, wd: f64) {
    for ((gw, _), layer) in grads.layers.iter_mut().zip(&net.layers) {
        for (g, w) in gw.iter_mut().zip(layer.weight.data()) {
            *g += wd * w;
        }
    }
    for (g, w) in grads.classifier.iter_mut().zip(net.classifier.data()) {
        *g += wd * w;
    }
}

fn summarize(trace: &[StepRecord]) -> LossTraceSummary {
    if trace.is_empty() {
        return LossTraceSummary {
            steps: 0,
            mean_total: 0.0,
            final_losses: LossReport::default(),
        };
    }
    let mean_total = trace.iter().map(|s| s.losses.total).sum::<f64>() / trace.len() as f64;
    LossTraceSummary {
        steps: trace.len(),
        mean_total,
        final_losses: trace.last().unwrap().losses,
    }
}

/// Covariance spectra of the seen classes' test representations, plus the
/// class-averaged conditional-MI proxy.
fn spectra_for_classes(
    net: &Network,
    test: &Dataset,
    classes: &[usize],
    eps: f64,
) -> Result<(Vec<SpectrumReport>, f64)> {
    let mut spectra = Vec::with_capacity(classes.len());
    for &class in classes {
        let indices = test.class_indices(class);
        if indices.len() < 2 {
            return Err(Error::InsufficientSamples {
                op: "spectra_for_classes",
                required: 2,
                got: indices.len(),
            });
        }
        let reps = net.representations(&test.features.select_rows(indices))?;
        spectra.push(SpectrumReport::from_representations(
            class,
            &reps,
            SpectrumSource::Covariance,
            eps,
        )?);
    }
    let mi = conditional_mi_estimate(&spectra, MI_EIGENVALUE_FLOOR)?;
    Ok((spectra, mi))
}

/// Runs the full class-incremental protocol described by `config`.
///
/// A positive oracle coefficient requires [`run_oracle_experiment`], which
/// trains the oracle network first; calling `run_protocol` directly with
/// `beta > 0` is a configuration error.
pub fn run_protocol(config: &ProtocolConfig) -> Result<RunOutput> {
    if config.objective.beta > 0.0 {
        return Err(Error::Config(
            "beta > 0 needs the oracle experiment driver, which trains the oracle model".into(),
        ));
    }
    run_protocol_with_oracle(config, None)
}

fn run_protocol_with_oracle(config: &ProtocolConfig, oracle: Option<&Network>) -> Result<RunOutput> {
    config.validate()?;
    let started = Instant::now();
    let (train, test) = config.load_data()?;
    if train.input_dim() != config.network.input_dim {
        return Err(Error::Config(format!(
            "dataset dimension {} does not match network input_dim {}",
            train.input_dim(),
            config.network.input_dim
        )));
    }
    let plan = make_phase_plan(
        train.num_classes,
        config.initial_classes,
        config.increment_classes,
        config.shuffle_seed,
    )?;

    let mut net = Network::init(config.network.clone())?;
    let mut memory = ExemplarMemory::new(config.exemplars_per_class, config.normalize_before_herding);
    let mut teacher: Option<Network> = None;
    let mut class_to_head: BTreeMap<usize, usize> = BTreeMap::new();
    let mut learned_order: Vec<usize> = Vec::new();
    let mut phases = Vec::new();
    let mut steps = Vec::new();

    for (phase, phase_classes) in plan.phases.iter().enumerate() {
        net.extend_head(phase_classes.len())?;
        for &c in phase_classes {
            class_to_head.insert(c, learned_order.len());
            learned_order.push(c);
        }

        let trace = train_phase(
            &mut net,
            phase_classes,
            &train,
            &memory,
            teacher.as_ref(),
            oracle,
            &class_to_head,
            config,
            phase,
        )?;

        let (accuracy, per_class) = evaluate(&net, &test, &learned_order)?;
        let (spectra, conditional_mi) =
            spectra_for_classes(&net, &test, &learned_order, config.objective.cwd_eps)?;
        phases.push(PhaseResult {
            phase,
            classes_learned: phase_classes.clone(),
            accuracy,
            per_class_accuracy: per_class,
            loss_summary: summarize(&trace),
            spectra,
            conditional_mi,
        });
        steps.extend(trace);

        // End-of-phase snapshot: exemplar selection and the next phase's
        // teacher both use the frozen pre-extension parameters.
        let frozen = net.snapshot().restore();
        if config.exemplars_per_class > 0 {
            memory.rebuild(&frozen, &train, phase_classes)?;
        }
        teacher = Some(frozen);
    }

    let accuracies: Vec<f64> = phases.iter().map(|p| p.accuracy).collect();
    let report = RunReport {
        config: config.clone(),
        average_incremental_accuracy: average_incremental_accuracy(&accuracies)?,
        phases,
        run_seed: config.run_seed,
        wall_clock_secs: started.elapsed().as_secs_f64(),
    };
    Ok(RunOutput {
        report,
        steps,
        memory,
        network: net,
        test_data: test,
    })
}

/// Trains one network on the given classes in a single phase (no replay, no
/// teacher), returning it unfrozen.
pub fn train_joint(
    config: &ProtocolConfig,
    classes: &[usize],
    train: &Dataset,
    network_seed: u64,
    epochs: usize,
    eta: f64,
) -> Result<(Network, Vec<StepRecord>)> {
    let mut cfg = config.clone();
    cfg.network.seed = network_seed;
    cfg.epochs_per_phase = epochs;
    cfg.objective.eta = eta;
    cfg.objective.beta = 0.0;

    let mut net = Network::init(cfg.network.clone())?;
    net.extend_head(classes.len())?;
    let mut class_to_head = BTreeMap::new();
    for (i, &c) in classes.iter().enumerate() {
        class_to_head.insert(c, i);
    }
    let memory = ExemplarMemory::new(0, false);
    let trace = train_phase(
        &mut net,
        classes,
        train,
        &memory,
        None,
        None,
        &class_to_head,
        &cfg,
        0,
    )?;
    Ok((net, trace))
}

/// Paired outcome of the oracle-mimicking experiment.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OracleExperimentReport {
    /// Test accuracy of the jointly trained oracle over all classes.
    pub oracle_accuracy: f64,
    pub baseline: RunReport,
    pub regularized: RunReport,
    /// `regularized - baseline` accuracy per phase.
    pub phase_deltas: Vec<f64>,
    pub initial_phase_delta: f64,
    pub mean_later_phase_delta: f64,
}

/// Trains the oracle jointly on all classes, then runs the protocol twice:
/// once plain (`beta = 0`) and once with the oracle-mimic term active at the
/// initial phase.
pub fn run_oracle_experiment(config: &ProtocolConfig) -> Result<OracleExperimentReport> {
    if config.objective.beta <= 0.0 {
        return Err(Error::Config(
            "oracle experiment needs a positive beta coefficient".into(),
        ));
    }
    config.validate()?;
    let (train, test) = config.load_data()?;
    let plan = make_phase_plan(
        train.num_classes,
        config.initial_classes,
        config.increment_classes,
        config.shuffle_seed,
    )?;
    let oracle_epochs = if config.oracle_epochs > 0 {
        config.oracle_epochs
    } else {
        config.epochs_per_phase
    };
    let (mut oracle_net, _) = train_joint(
        config,
        &plan.class_order,
        &train,
        config.oracle_seed,
        oracle_epochs,
        0.0,
    )?;
    oracle_net.freeze();
    let (oracle_accuracy, _) = evaluate(&oracle_net, &test, &plan.class_order)?;

    let mut baseline_cfg = config.clone();
    baseline_cfg.objective.beta = 0.0;
    let baseline = run_protocol(&baseline_cfg)?.report;
    let regularized = run_protocol_with_oracle(config, Some(&oracle_net))?.report;

    let phase_deltas: Vec<f64> = regularized
        .phases
        .iter()
        .zip(&baseline.phases)
        .map(|(r, b)| r.accuracy - b.accuracy)
        .collect();
    let initial_phase_delta = phase_deltas.first().copied().unwrap_or(0.0);
    let later: Vec<f64> = phase_deltas.iter().skip(1).copied().collect();
    let mean_later_phase_delta = if later.is_empty() {
        0.0
    } else {
        later.iter().sum::<f64>() / later.len() as f64
    };
    Ok(OracleExperimentReport {
        oracle_accuracy,
        baseline,
        regularized,
        phase_deltas,
        initial_phase_delta,
        mean_later_phase_delta,
    })
}

/// What a spectrum sweep varies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variable", content = "values", rename_all = "kebab-case")]
pub enum SweepValues {
    /// Joint single-phase trainings on nested class subsets of these sizes.
    TrainClassCount(Vec<usize>),
    /// Joint single-phase trainings on all classes with these decorrelation
    /// coefficients.
    Eta(Vec<f64>),
}

/// One trained point of a sweep.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepPoint {
    pub value: f64,
    pub seed_index: u64,
    /// Mean over the shared classes of `alpha_k` at `k = d/4`.
    pub alpha_quarter: f64,
    pub conditional_mi: f64,
    pub train_classes: usize,
    pub spectra: Vec<SpectrumReport>,
}

/// Aggregated sweep outcome.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepReport {
    pub values: SweepValues,
    pub seeds: u64,
    /// Per-seed measurements, outer index = sweep value, inner = seed.
    pub points: Vec<Vec<SweepPoint>>,
    /// Seed-averaged `alpha_{d/4}` per sweep value.
    pub mean_alpha_quarter: Vec<f64>,
    /// Seed-averaged conditional-MI proxy per sweep value.
    pub mean_conditional_mi: Vec<f64>,
}

/// Trains one single-phase model per sweep value (per seed) and tabulates
/// the spectral statistics of the shared classes.
///
/// Class-count sweeps use nested subsets: every subset is a prefix of the
/// shuffled class order, so the smallest subset's classes are shared by all
/// models and comparable across them.
pub fn run_spectrum_sweep(config: &ProtocolConfig, sweep: &SweepValues, seeds: u64) -> Result<SweepReport> {
    config.validate()?;
    if seeds == 0 {
        return Err(Error::Config("need at least one seed".into()));
    }
    let (train, test) = config.load_data()?;
    let class_order = {
        let mut order: Vec<usize> = (0..train.num_classes).collect();
        SplitMix64::new(config.shuffle_seed).shuffle(&mut order);
        order
    };

    let (values, shared_count): (Vec<f64>, usize) = match sweep {
        SweepValues::TrainClassCount(counts) => {
            if counts.len() < 2 {
                return Err(Error::Protocol("a sweep needs at least two values".into()));
            }
            let max = *counts.iter().max().unwrap();
            let min = *counts.iter().min().unwrap();
            if max > train.num_classes {
                return Err(Error::Protocol(format!(
                    "nested subsets infeasible: {max} classes requested, dataset has {}",
                    train.num_classes
                )));
            }
            if min < 2 {
                return Err(Error::Protocol(
                    "the smallest subset needs at least two classes".into(),
                ));
            }
            (counts.iter().map(|&c| c as f64).collect(), min)
        }
        SweepValues::Eta(etas) => {
            if etas.len() < 2 {
                return Err(Error::Protocol("a sweep needs at least two values".into()));
            }
            if etas.iter().any(|&e| e < 0.0) {
                return Err(Error::Protocol("eta values must be nonnegative".into()));
            }
            (etas.clone(), train.num_classes)
        }
    };
    let shared_classes: Vec<usize> = class_order[..shared_count].to_vec();
    let quarter_k = (config.network.representation_dim / 4).max(1);

    let mut points: Vec<Vec<SweepPoint>> = vec![Vec::new(); values.len()];
    for seed_index in 0..seeds {
        let seeded = config.with_seed_offset(seed_index);
        for (vi, &value) in values.iter().enumerate() {
            let (classes, eta) = match sweep {
                SweepValues::TrainClassCount(_) => {
                    (class_order[..value as usize].to_vec(), seeded.objective.eta)
                }
                SweepValues::Eta(_) => (class_order.clone(), value),
            };
            let (mut net, _) = train_joint(
                &seeded,
                &classes,
                &train,
                seeded.network.seed,
                seeded.epochs_per_phase,
                eta,
            )?;
            net.freeze();
            let (spectra, conditional_mi) =
                spectra_for_classes(&net, &test, &shared_classes, seeded.objective.cwd_eps)?;
            let alpha_quarter = spectra
                .iter()
                .map(|s| s.alpha_at(quarter_k))
                .sum::<f64>()
                / spectra.len() as f64;
            points[vi].push(SweepPoint {
                value,
                seed_index,
                alpha_quarter,
                conditional_mi,
                train_classes: classes.len(),
                spectra,
            });
        }
    }

    let mean_alpha_quarter: Vec<f64> = points
        .iter()
        .map(|ps| ps.iter().map(|p| p.alpha_quarter).sum::<f64>() / ps.len() as f64)
        .collect();
    let mean_conditional_mi: Vec<f64> = points
        .iter()
        .map(|ps| ps.iter().map(|p| p.conditional_mi).sum::<f64>() / ps.len() as f64)
        .collect();
    Ok(SweepReport {
        values: sweep.clone(),
        seeds,
        points,
        mean_alpha_quarter,
        mean_conditional_mi,
    })
}
