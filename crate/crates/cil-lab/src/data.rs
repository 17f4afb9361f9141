//! Dataset synthesis, CSV ingestion and phase splitting.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mat::Mat;
use crate::rng::SplitMix64;

/// Which half of a train/test pair a dataset is.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// Labeled feature matrix with per-class index lists.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub features: Mat,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub split: Split,
    class_indices: Vec<Vec<usize>>,
}

impl Dataset {
    pub fn new(features: Mat, labels: Vec<usize>, num_classes: usize, split: Split) -> Result<Self> {
        if labels.len() != features.rows() {
            return Err(Error::Dimension {
                op: "Dataset::new",
                left: format!("{} rows", features.rows()),
                right: format!("{} labels", labels.len()),
            });
        }
        let mut class_indices = vec![Vec::new(); num_classes];
        for (i, &l) in labels.iter().enumerate() {
            if l >= num_classes {
                return Err(Error::Index {
                    op: "Dataset::new",
                    index: l,
                    bound: num_classes,
                });
            }
            class_indices[l].push(i);
        }
        Ok(Dataset {
            features,
            labels,
            num_classes,
            split,
            class_indices,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.features.cols()
    }

    /// Row indices belonging to one class, in dataset order.
    pub fn class_indices(&self, class: usize) -> &[usize] {
        &self.class_indices[class]
    }

    /// All row indices whose label is in `classes`, in dataset order per
    /// class, concatenated in the order the classes are given.
    pub fn indices_of_classes(&self, classes: &[usize]) -> Vec<usize> {
        classes
            .iter()
            .flat_map(|&c| self.class_indices[c].iter().copied())
            .collect()
    }

    /// Writes the dataset as `label,f1,...,fd` rows.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        for i in 0..self.len() {
            let mut line = self.labels[i].to_string();
            for v in self.features.row(i) {
                // 17 significant digits: lossless f64 round trip.
                line.push_str(&format!(",{v:.16e}"));
            }
            line.push('\n');
            out.extend_from_slice(line.as_bytes());
        }
        let mut f = std::fs::File::create(path)?;
        f.write_all(&out)?;
        Ok(())
    }
}

/// Result of [`load_csv`]: the dataset plus the original-label-to-index map
/// applied during remapping (identity when labels were already contiguous).
#[derive(Debug, Clone)]
pub struct LoadedCsv {
    pub dataset: Dataset,
    pub label_map: BTreeMap<usize, usize>,
}

/// Parses `label,f1,...,fd` rows. Labels need not be contiguous; they are
/// remapped to `0..k` in increasing original order and the map is returned.
pub fn load_csv(path: &Path, split: Split) -> Result<LoadedCsv> {
    let file = std::fs::File::open(path)?;
    let reader = BufReader::new(file);
    let mut raw_labels = Vec::new();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut width: Option<usize> = None;
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.trim().split(',');
        let label_text = fields.next().unwrap_or("");
        let label: usize = label_text.trim().parse().map_err(|_| Error::Parse {
            line: line_no,
            message: format!("label {label_text:?} is not a nonnegative integer"),
        })?;
        let mut features = Vec::new();
        for field in fields {
            let v: f64 = field.trim().parse().map_err(|_| Error::Parse {
                line: line_no,
                message: format!("feature {field:?} is not numeric"),
            })?;
            features.push(v);
        }
        match width {
            None => {
                if features.is_empty() {
                    return Err(Error::Parse {
                        line: line_no,
                        message: "row has no feature columns".into(),
                    });
                }
                width = Some(features.len());
            }
            Some(w) if w != features.len() => {
                return Err(Error::Parse {
                    line: line_no,
                    message: format!("row has {} features, expected {w}", features.len()),
                });
            }
            _ => {}
        }
        raw_labels.push(label);
        rows.push(features);
    }
    if rows.is_empty() {
        return Err(Error::Parse {
            line: 0,
            message: "file contains no data rows".into(),
        });
    }

    let mut label_map = BTreeMap::new();
    let mut distinct: Vec<usize> = raw_labels.clone();
    distinct.sort_unstable();
    distinct.dedup();
    for (i, &orig) in distinct.iter().enumerate() {
        label_map.insert(orig, i);
    }
    let labels: Vec<usize> = raw_labels.iter().map(|l| label_map[l]).collect();
    let features = Mat::from_rows(&rows)?;
    let dataset = Dataset::new(features, labels, distinct.len(), split)?;
    Ok(LoadedCsv { dataset, label_map })
}

/// Parameters for [`gaussian_mixture`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MixtureSpec {
    pub num_classes: usize,
    pub input_dim: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// Class centers are drawn uniformly from `[-center_scale, center_scale]^dim`.
    pub center_scale: f64,
    /// Isotropic Gaussian noise standard deviation around the center.
    pub noise_scale: f64,
    pub seed: u64,
}

impl Default for MixtureSpec {
    fn default() -> Self {
        MixtureSpec {
            num_classes: 10,
            input_dim: 32,
            train_per_class: 50,
            test_per_class: 20,
            center_scale: 5.0,
            noise_scale: 1.0,
            seed: 1,
        }
    }
}

/// Synthesizes a Gaussian-mixture classification pair. Per class, a center
/// is drawn first, then `train_per_class` followed by `test_per_class`
/// disjoint samples around it, so both splits come from one distribution.
pub fn gaussian_mixture(spec: &MixtureSpec) -> Result<(Dataset, Dataset)> {
    if spec.num_classes == 0
        || spec.input_dim == 0
        || spec.train_per_class == 0
        || spec.test_per_class == 0
    {
        return Err(Error::Config(
            "mixture counts and dimensions must be positive".into(),
        ));
    }
    if spec.noise_scale <= 0.0 {
        return Err(Error::Config(format!(
            "noise_scale must be positive, got {}",
            spec.noise_scale
        )));
    }
    let mut rng = SplitMix64::new(spec.seed);
    let mut centers = Vec::with_capacity(spec.num_classes);
    for _ in 0..spec.num_classes {
        let c: Vec<f64> = (0..spec.input_dim)
            .map(|_| rng.uniform(-spec.center_scale, spec.center_scale))
            .collect();
        centers.push(c);
    }

    let sample = |center: &[f64], rng: &mut SplitMix64| -> Vec<f64> {
        center
            .iter()
            .map(|&c| c + spec.noise_scale * rng.normal())
            .collect()
    };

    let mut train_rows = Vec::new();
    let mut train_labels = Vec::new();
    let mut test_rows = Vec::new();
    let mut test_labels = Vec::new();
    for (class, center) in centers.iter().enumerate() {
        for _ in 0..spec.train_per_class {
            train_rows.push(sample(center, &mut rng));
            train_labels.push(class);
        }
        for _ in 0..spec.test_per_class {
            test_rows.push(sample(center, &mut rng));
            test_labels.push(class);
        }
    }
    let train = Dataset::new(
        Mat::from_rows(&train_rows)?,
        train_labels,
        spec.num_classes,
        Split::Train,
    )?;
    let test = Dataset::new(
        Mat::from_rows(&test_rows)?,
        test_labels,
        spec.num_classes,
        Split::Test,
    )?;
    Ok((train, test))
}

/// Shuffled class order split into an initial block of `B` classes followed
/// by increments of `S`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhasePlan {
    pub class_order: Vec<usize>,
    pub initial_classes: usize,
    pub increment_classes: usize,
    pub phases: Vec<Vec<usize>>,
}

impl PhasePlan {
    pub fn num_phases(&self) -> usize {
        self.phases.len()
    }

    /// Classes seen in phases `0..=phase`.
    pub fn seen_classes(&self, phase: usize) -> Vec<usize> {
        let mut seen: Vec<usize> = self.phases[..=phase].concat();
        seen.sort_unstable();
        seen
    }
}

/// Fisher-Yates shuffles the class ids with the given seed, then splits
/// into `[B, S, S, ...]`. `(num_classes - B)` must divide evenly by `S`.
pub fn make_phase_plan(
    num_classes: usize,
    initial_classes: usize,
    increment_classes: usize,
    shuffle_seed: u64,
) -> Result<PhasePlan> {
    if initial_classes < 1 || increment_classes < 1 || initial_classes > num_classes {
        return Err(Error::Protocol(format!(
            "invalid phase split: B={initial_classes}, S={increment_classes}, classes={num_classes}"
        )));
    }
    let remaining = num_classes - initial_classes;
    if !remaining.is_multiple_of(increment_classes) {
        return Err(Error::Protocol(format!(
            "classes after the initial phase must split evenly: B={initial_classes}, \
             S={increment_classes}, classes={num_classes}"
        )));
    }
    let mut class_order: Vec<usize> = (0..num_classes).collect();
    SplitMix64::new(shuffle_seed).shuffle(&mut class_order);
    let mut phases = vec![class_order[..initial_classes].to_vec()];
    let mut cursor = initial_classes;
    while cursor < num_classes {
        phases.push(class_order[cursor..cursor + increment_classes].to_vec());
        cursor += increment_classes;
    }
    Ok(PhasePlan {
        class_order,
        initial_classes,
        increment_classes,
        phases,
    })
}
