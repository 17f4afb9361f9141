//! Exemplar memory with herding-based selection.
//!
//! After each phase, the classes just learned get up to `R` exemplars each,
//! picked greedily so that the running mean of the chosen representations
//! tracks the class mean as closely as possible. Old classes keep the
//! exemplars they were given when first learned; the backbone drifts, but
//! re-herding is deliberately not done.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::mat::Mat;
use crate::model::Network;

/// Per-class exemplar index lists (indices into the training dataset), in
/// herding selection order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ExemplarMemory {
    pub capacity_per_class: usize,
    /// Ordered map so that iteration (replay, dumps) is deterministic.
    pub exemplars: BTreeMap<usize, Vec<usize>>,
    /// Whether representations are L2-normalized before herding.
    pub normalize_before_herding: bool,
}

impl ExemplarMemory {
    pub fn new(capacity_per_class: usize, normalize_before_herding: bool) -> Self {
        ExemplarMemory {
            capacity_per_class,
            exemplars: BTreeMap::new(),
            normalize_before_herding,
        }
    }

    /// All stored dataset indices, ordered by class then selection rank.
    pub fn all_indices(&self) -> Vec<usize> {
        self.exemplars.values().flatten().copied().collect()
    }

    pub fn classes(&self) -> Vec<usize> {
        self.exemplars.keys().copied().collect()
    }

    /// Selects exemplars for each class just learned, using the frozen
    /// end-of-phase network's representations. Existing classes are
    /// untouched. A class smaller than the capacity keeps all its samples.
    pub fn rebuild(
        &mut self,
        net: &Network,
        train: &Dataset,
        classes_just_learned: &[usize],
    ) -> Result<()> {
        if !net.is_frozen() {
            return Err(Error::State(
                "exemplar selection requires a frozen network".into(),
            ));
        }
        if classes_just_learned.is_empty() {
            return Err(Error::Contract {
                op: "ExemplarMemory::rebuild",
                message: "no classes to select exemplars for".into(),
            });
        }
        for &class in classes_just_learned {
            let indices = train.class_indices(class);
            if indices.is_empty() {
                return Err(Error::Contract {
                    op: "ExemplarMemory::rebuild",
                    message: format!("class {class} has no training samples"),
                });
            }
            let keep = self.capacity_per_class.min(indices.len());
            if indices.len() < self.capacity_per_class {
                log::warn!(
                    "class {class} has {} samples, below the exemplar capacity {}; keeping all",
                    indices.len(),
                    self.capacity_per_class
                );
            }
            let batch = train.features.select_rows(indices);
            let mut reps = net.representations(&batch)?;
            if self.normalize_before_herding {
                normalize_rows(&mut reps);
            }
            let order = herd_select(&reps, keep)?;
            let chosen: Vec<usize> = order.iter().map(|&local| indices[local]).collect();
            self.exemplars.insert(class, chosen);
        }
        Ok(())
    }

    /// Writes `class_id,rank,dataset_index` rows.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("class_id,rank,dataset_index\n");
        for (class, indices) in &self.exemplars {
            for (rank, idx) in indices.iter().enumerate() {
                out.push_str(&format!("{class},{rank},{idx}\n"));
            }
        }
        let mut f = std::fs::File::create(path)?;
        f.write_all(out.as_bytes())?;
        Ok(())
    }
}

fn normalize_rows(m: &mut Mat) {
    for i in 0..m.rows() {
        let norm: f64 = m.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            for v in m.row_mut(i) {
                *v /= norm;
            }
        }
    }
}

/// Greedy herding: iteratively picks the sample whose inclusion keeps the
/// running mean of chosen samples closest (in L2) to the class mean. Ties
/// break toward the lowest index. Returns `m` unique row indices in
/// selection order.
pub fn herd_select(reps: &Mat, m: usize) -> Result<Vec<usize>> {
    let n = reps.rows();
    if m == 0 || m > n {
        return Err(Error::Contract {
            op: "herd_select",
            message: format!("cannot select {m} of {n} samples"),
        });
    }
    let d = reps.cols();
    let mean = reps.col_mean();
    let mut chosen = Vec::with_capacity(m);
    let mut taken = vec![false; n];
    let mut running_sum = vec![0.0; d];
    for t in 0..m {
        let divisor = (t + 1) as f64;
        let mut best: Option<(f64, usize)> = None;
        for (i, taken_flag) in taken.iter().enumerate() {
            if *taken_flag {
                continue;
            }
            let row = reps.row(i);
            let mut dist_sq = 0.0;
            for j in 0..d {
                let diff = mean[j] - (running_sum[j] + row[j]) / divisor;
                dist_sq += diff * diff;
            }
            // Strict < keeps the lowest index on ties.
            if best.is_none_or(|(b, _)| dist_sq < b) {
                best = Some((dist_sq, i));
            }
        }
        let (_, pick) = best.expect("at least one candidate remains");
        taken[pick] = true;
        for (s, v) in running_sum.iter_mut().zip(reps.row(pick)) {
            *s += v;
        }
        chosen.push(pick);
    }
    Ok(chosen)
}
