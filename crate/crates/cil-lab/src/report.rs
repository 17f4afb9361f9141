//! Artifact emission: report JSON and the CSV schemas.
//!
//! All files are written atomically (temp file in the target directory,
//! then rename), so an aborted run never leaves a partial `report.json`.
//! Floats are serialized with 17 significant digits, which round-trips
//! `f64` exactly.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::data::Dataset;
use crate::engine::{RunOutput, StepRecord};
use crate::error::Result;
use crate::model::Network;
use crate::spectral::SpectrumReport;

/// 17-significant-digit float formatting shared by every CSV writer.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// Writes `contents` to `path` via a temporary sibling file and rename.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    fs::create_dir_all(dir)?;
    let mut tmp = PathBuf::from(dir);
    let file_name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "artifact".into());
    tmp.push(format!(".{file_name}.tmp"));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(contents)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Serializes any report as pretty JSON, atomically.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut body = serde_json::to_vec_pretty(value).map_err(|e| crate::Error::Numeric {
        op: "write_json",
        message: format!("serialization failed: {e}"),
    })?;
    body.push(b'\n');
    write_atomic(path, &body)
}

/// `phase,epoch,step,ce,cwd,distill,oracle,total` rows.
pub fn metrics_csv(steps: &[StepRecord]) -> String {
    let mut out = String::from("phase,epoch,step,ce,cwd,distill,oracle,total\n");
    for s in steps {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            s.phase,
            s.epoch,
            s.step,
            fmt_f64(s.losses.ce),
            fmt_f64(s.losses.cwd),
            fmt_f64(s.losses.distill),
            fmt_f64(s.losses.oracle),
            fmt_f64(s.losses.total),
        ));
    }
    out
}

/// `run_id,class_id,source,k,lambda_k,alpha_k` rows for a set of spectra.
pub fn spectra_csv<'a>(runs: impl IntoIterator<Item = (&'a str, &'a [SpectrumReport])>) -> String {
    let mut out = String::from("run_id,class_id,source,k,lambda_k,alpha_k\n");
    for (run_id, spectra) in runs {
        for s in spectra {
            for (i, (lambda, alpha)) in s.eigenvalues.iter().zip(&s.alpha).enumerate() {
                out.push_str(&format!(
                    "{},{},{},{},{},{}\n",
                    run_id,
                    s.class_id,
                    s.source,
                    i + 1,
                    fmt_f64(*lambda),
                    fmt_f64(*alpha),
                ));
            }
        }
    }
    out
}

/// `class_id,n,frobenius_sq,log_eig_sum` summary rows.
pub fn spectra_summary_csv(spectra: &[SpectrumReport]) -> String {
    let mut out = String::from("class_id,n,frobenius_sq,log_eig_sum\n");
    for s in spectra {
        out.push_str(&format!(
            "{},{},{},{}\n",
            s.class_id,
            s.sample_count,
            fmt_f64(s.frobenius_sq),
            fmt_f64(s.log_eig_sum),
        ));
    }
    out
}

/// `class_id,e1,...,ed` rows of unit-normalized test representations.
pub fn embeddings_csv(net: &Network, data: &Dataset) -> Result<String> {
    let reps = net.representations(&data.features)?;
    let mut out = String::from("class_id");
    for j in 0..reps.cols() {
        out.push_str(&format!(",e{}", j + 1));
    }
    out.push('\n');
    for i in 0..reps.rows() {
        let row = reps.row(i);
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        out.push_str(&data.labels[i].to_string());
        for v in row {
            out.push_str(&format!(",{}", fmt_f64(v / norm)));
        }
        out.push('\n');
    }
    Ok(out)
}

/// Writes the standard artifact set for one protocol run under `dir`:
/// `report.json`, `metrics.csv`, `spectra.csv`, `spectra_summary.csv`,
/// `memory.csv`, and optionally `embeddings.csv`.
pub fn write_run_artifacts(dir: &Path, output: &RunOutput, export_embeddings: bool) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_json(&dir.join("report.json"), &output.report)?;
    write_atomic(&dir.join("metrics.csv"), metrics_csv(&output.steps).as_bytes())?;

    let mut per_phase: Vec<(String, &[SpectrumReport])> = Vec::new();
    for phase in &output.report.phases {
        per_phase.push((format!("phase{}", phase.phase), &phase.spectra));
    }
    let spectra = spectra_csv(per_phase.iter().map(|(id, s)| (id.as_str(), *s)));
    write_atomic(&dir.join("spectra.csv"), spectra.as_bytes())?;
    if let Some(last) = output.report.phases.last() {
        write_atomic(
            &dir.join("spectra_summary.csv"),
            spectra_summary_csv(&last.spectra).as_bytes(),
        )?;
    }

    let mut memory = String::from("class_id,rank,dataset_index\n");
    for (class, indices) in &output.memory.exemplars {
        for (rank, idx) in indices.iter().enumerate() {
            memory.push_str(&format!("{class},{rank},{idx}\n"));
        }
    }
    write_atomic(&dir.join("memory.csv"), memory.as_bytes())?;

    if export_embeddings {
        let emb = embeddings_csv(&output.network, &output.test_data)?;
        write_atomic(&dir.join("embeddings.csv"), emb.as_bytes())?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{run_protocol, DatasetSpec, ProtocolConfig};
    use crate::data::MixtureSpec;
    use crate::model::NetworkConfig;

    fn tiny_run() -> RunOutput {
        let cfg = ProtocolConfig {
            dataset: DatasetSpec::Synthetic(MixtureSpec {
                num_classes: 4,
                input_dim: 6,
                train_per_class: 8,
                test_per_class: 4,
                center_scale: 4.0,
                noise_scale: 1.0,
                seed: 2,
            }),
            initial_classes: 2,
            increment_classes: 2,
            exemplars_per_class: 2,
            epochs_per_phase: 4,
            batch_size: 8,
            network: NetworkConfig {
                input_dim: 6,
                hidden_dims: vec![],
                representation_dim: 4,
                head_scale_init: 16.0,
                seed: 11,
            },
            ..ProtocolConfig::default()
        };
        run_protocol(&cfg).unwrap()
    }

    #[test]
    fn fmt_f64_round_trips_exactly() {
        for v in [
            0.1,
            -1.0 / 3.0,
            1e-300,
            std::f64::consts::PI,
            6.02214076e23,
        ] {
            let parsed: f64 = fmt_f64(v).parse().unwrap();
            assert_eq!(parsed.to_bits(), v.to_bits(), "{v}");
        }
    }

    #[test]
    fn artifacts_exist_and_parse() {
        let dir = tempfile::tempdir().unwrap();
        let out = tiny_run();
        write_run_artifacts(dir.path(), &out, true).unwrap();
        for name in [
            "report.json",
            "metrics.csv",
            "spectra.csv",
            "spectra_summary.csv",
            "memory.csv",
            "embeddings.csv",
        ] {
            assert!(dir.path().join(name).exists(), "{name} missing");
        }
        let report: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join("report.json")).unwrap())
                .unwrap();
        assert!(report["average_incremental_accuracy"].is_number());
        // No stray temp files left behind.
        let leftovers: Vec<_> = std::fs::read_dir(dir.path())
            .unwrap()
            .filter(|e| {
                e.as_ref()
                    .unwrap()
                    .file_name()
                    .to_string_lossy()
                    .ends_with(".tmp")
            })
            .collect();
        assert!(leftovers.is_empty());
    }

    #[test]
    fn metrics_header_and_row_count() {
        let out = tiny_run();
        let csv = metrics_csv(&out.steps);
        let mut lines = csv.lines();
        assert_eq!(
            lines.next().unwrap(),
            "phase,epoch,step,ce,cwd,distill,oracle,total"
        );
        assert_eq!(csv.lines().count(), 1 + out.steps.len());
    }

    #[test]
    fn embeddings_rows_are_unit_norm() {
        let out = tiny_run();
        let csv = embeddings_csv(&out.network, &out.test_data).unwrap();
        for line in csv.lines().skip(1) {
            let fields: Vec<&str> = line.split(',').collect();
            let coords: Vec<f64> = fields[1..].iter().map(|f| f.parse().unwrap()).collect();
            let norm: f64 = coords.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-9, "row norm {norm}");
        }
    }

    #[test]
    fn identical_runs_serialize_identically() {
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        write_run_artifacts(dir_a.path(), &tiny_run(), false).unwrap();
        write_run_artifacts(dir_b.path(), &tiny_run(), false).unwrap();
        for name in ["report.json", "metrics.csv", "spectra.csv", "memory.csv"] {
            let a = std::fs::read(dir_a.path().join(name)).unwrap();
            let b = std::fs::read(dir_b.path().join(name)).unwrap();
            assert_eq!(a, b, "{name} differs between identical runs");
        }
    }
}
