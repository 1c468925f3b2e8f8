use std::fs::OpenOptions;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::defenses::PdMatrix;
use crate::protocol::EvalMetrics;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub schema_version: u32,
    pub config_hash: String,
    pub seed: u64,
    /// `epoch` after each training epoch, `final` once at the end.
    pub phase: String,
    pub epoch: usize,
    pub main_accuracy: Option<f64>,
    pub backdoor_accuracy: Option<f64>,
    pub label_recovery_rate: Option<f64>,
    pub d_final: Option<f64>,
    pub wall_time_s: Option<f64>,
}

impl MetricsRow {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        hash: &str,
        seed: u64,
        phase: &str,
        epoch: usize,
        m: &EvalMetrics,
        recovery: Option<f64>,
        d_final: Option<f64>,
        wall: Option<f64>,
    ) -> Self {
        MetricsRow {
            schema_version: SCHEMA_VERSION,
            config_hash: hash.to_string(),
            seed,
            phase: phase.to_string(),
            epoch,
            main_accuracy: (!m.main_accuracy.is_nan()).then_some(m.main_accuracy),
            backdoor_accuracy: m.backdoor_accuracy,
            label_recovery_rate: recovery,
            d_final,
            wall_time_s: wall,
        }
    }
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |e| HarnessError::Io(format!("{}: {e}", path.display()))
}

fn csv_err(path: &Path) -> impl FnOnce(csv::Error) -> HarnessError + '_ {
    move |e| HarnessError::Io(format!("{}: {e}", path.display()))
}

/// Appends rows to a metrics CSV, writing the header for a new file.
pub fn append_metrics(path: &Path, rows: &[MetricsRow]) -> Result<(), HarnessError> {
    let fresh = std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    if !fresh {
        let mut r = csv::Reader::from_path(path).map_err(csv_err(path))?;
        let header = r.headers().map_err(csv_err(path))?.clone();
        let expected = [
            "schema_version",
            "config_hash",
            "seed",
            "phase",
            "epoch",
            "main_accuracy",
            "backdoor_accuracy",
            "label_recovery_rate",
            "d_final",
            "wall_time_s",
        ];
        if header.iter().ne(expected.iter().copied()) {
            return Err(HarnessError::Io(format!("{} has a different column layout", path.display())));
        }
    }
    let file = OpenOptions::new().create(true).append(true).open(path).map_err(io(path))?;
    let mut w = csv::WriterBuilder::new().has_headers(fresh).from_writer(file);
    for row in rows {
        w.serialize(row).map_err(csv_err(path))?;
    }
    w.flush().map_err(io(path))?;
    Ok(())
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>, HarnessError> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err(path))?;
    r.deserialize().collect::<Result<Vec<_>, _>>().map_err(csv_err(path))
}

/// `true_label, p_0 .. p_{c-1}, support, row_entropy`.
pub fn write_pd_matrix(path: &Path, pd: &PdMatrix) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    let c = pd.classes();
    let mut header = vec!["true_label".to_string()];
    header.extend((0..c).map(|j| format!("p_{j}")));
    header.push("support".into());
    header.push("row_entropy".into());
    w.write_record(&header).map_err(csv_err(path))?;
    for (i, (row, h)) in pd.rows.iter().zip(pd.row_entropies()).enumerate() {
        let mut rec = vec![i.to_string()];
        rec.extend(row.iter().map(f64::to_string));
        rec.push(pd.support[i].to_string());
        rec.push(h.to_string());
        w.write_record(&rec).map_err(csv_err(path))?;
    }
    w.flush().map_err(io(path))?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), HarnessError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| HarnessError::Io(e.to_string()))?;
    std::fs::write(path, text + "\n").map_err(io(path))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(seed: u64) -> MetricsRow {
        let m = EvalMetrics {
            main_accuracy: 0.5,
            backdoor_accuracy: None,
            clean: 2,
            triggered: 0,
        };
        MetricsRow::new("abc", seed, "final", 3, &m, Some(1.0), None, None)
    }

    #[test]
    fn append_keeps_one_header() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("metrics.csv");
        append_metrics(&p, &[row(0)]).unwrap();
        append_metrics(&p, &[row(1)]).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(text.matches("schema_version").count(), 1);
        assert_eq!(read_metrics(&p).unwrap(), vec![row(0), row(1)]);
        assert!(text.lines().nth(1).unwrap().starts_with("1,abc,0,final,3,0.5,,1"));
    }
}
