use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::Serialize;
use serde_json::Value;

use super::config::{set_path, AttackKind, ExperimentConfig};
use super::experiment::{run_experiment, run_repeats, RunOutcome};
use super::HarnessError;
use crate::defenses::{pd_matrix, DefenseMode, PdMatrix};

/// Field path to the values it takes; points are the cartesian product in
/// key order.
pub type Grid = BTreeMap<String, Vec<Value>>;

#[derive(Debug, Clone, Serialize)]
pub struct SweepPoint {
    pub index: usize,
    pub overrides: BTreeMap<String, Value>,
    pub config: ExperimentConfig,
    pub outcomes: Vec<RunOutcome>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Stat {
    pub n: usize,
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    pub fn of(values: impl IntoIterator<Item = f64>) -> Option<Stat> {
        let v: Vec<f64> = values.into_iter().collect();
        if v.is_empty() {
            return None;
        }
        let n = v.len();
        let mean = v.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Some(Stat { n, mean, std })
    }
}

impl SweepPoint {
    pub fn main_accuracy(&self) -> Option<Stat> {
        Stat::of(self.outcomes.iter().filter_map(|o| o.final_row().main_accuracy))
    }

    pub fn backdoor_accuracy(&self) -> Option<Stat> {
        Stat::of(self.outcomes.iter().filter_map(|o| o.final_row().backdoor_accuracy))
    }

    pub fn label_recovery(&self) -> Option<Stat> {
        Stat::of(self.outcomes.iter().filter_map(|o| o.final_row().label_recovery_rate))
    }

    pub fn d_final(&self) -> Option<Stat> {
        Stat::of(self.outcomes.iter().filter_map(|o| o.final_row().d_final))
    }
}

pub fn grid_points(grid: &Grid) -> Result<Vec<BTreeMap<String, Value>>, HarnessError> {
    if grid.is_empty() || grid.values().any(Vec::is_empty) {
        return Err(HarnessError::Config {
            path: "grid".into(),
            message: "grid must name at least one field, each with at least one value".into(),
        });
    }
    let mut points = vec![BTreeMap::new()];
    for (key, values) in grid {
        points = points
            .into_iter()
            .flat_map(|p| {
                values.iter().map(move |v| {
                    let mut q = p.clone();
                    q.insert(key.clone(), v.clone());
                    q
                })
            })
            .collect();
    }
    Ok(points)
}

/// Runs every grid point for `repeats` seeds (`base.seed + r`, shared by all
/// points) in parallel. Results are ordered by point, then seed.
pub fn run_sweep(base: &ExperimentConfig, grid: &Grid, repeats: usize) -> Result<Vec<SweepPoint>, HarnessError> {
    let points = grid_points(grid)?;
    let base_value = serde_json::to_value(base).expect("config serializes");
    let configs = points
        .iter()
        .map(|p| {
            let mut v = base_value.clone();
            for (k, val) in p {
                set_path(&mut v, k, val.clone())?;
            }
            let mut cfg: ExperimentConfig = serde_json::from_value(v).map_err(|e| HarnessError::Config {
                path: "grid".into(),
                message: e.to_string(),
            })?;
            cfg.repeats = repeats.max(1);
            let cfg = cfg.resolved();
            cfg.validate()?;
            Ok(cfg)
        })
        .collect::<Result<Vec<_>, HarnessError>>()?;
    let jobs: Vec<(usize, u64)> = (0..configs.len())
        .flat_map(|i| (0..repeats.max(1) as u64).map(move |r| (i, r)))
        .collect();
    let results: Vec<Result<RunOutcome, HarnessError>> = jobs
        .par_iter()
        .map(|&(i, r)| run_experiment(&configs[i], configs[i].seed.wrapping_add(r)))
        .collect();
    let mut out: Vec<SweepPoint> = points
        .into_iter()
        .zip(configs)
        .enumerate()
        .map(|(index, (overrides, config))| SweepPoint {
            index,
            overrides,
            config,
            outcomes: Vec::new(),
        })
        .collect();
    for ((i, _), res) in jobs.into_iter().zip(results) {
        out[i].outcomes.push(res?);
    }
    Ok(out)
}

/// Writes `summary.csv`: one row per point with mean/std of final metrics.
pub fn write_summary(path: &std::path::Path, points: &[SweepPoint]) -> Result<(), HarnessError> {
    let err = |e: csv::Error| HarnessError::Io(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    let metrics = ["main_accuracy", "backdoor_accuracy", "label_recovery_rate", "d_final"];
    let mut header = vec!["point".to_string(), "config_hash".into(), "overrides".into(), "runs".into()];
    for m in metrics {
        header.push(format!("{m}_mean"));
        header.push(format!("{m}_std"));
    }
    w.write_record(&header).map_err(err)?;
    for p in points {
        let mut rec = vec![
            p.index.to_string(),
            p.config.hash(),
            serde_json::to_string(&p.overrides).expect("values serialize"),
            p.outcomes.len().to_string(),
        ];
        for s in [p.main_accuracy(), p.backdoor_accuracy(), p.label_recovery(), p.d_final()] {
            match s {
                Some(s) => {
                    rec.push(s.mean.to_string());
                    rec.push(s.std.to_string());
                }
                None => rec.extend([String::new(), String::new()]),
            }
        }
        w.write_record(&rec).map_err(err)?;
    }
    w.flush().map_err(|e| HarnessError::Io(e.to_string()))
}

/// Restored-label distribution of the label-inference attack against a
/// CoAE-defended run, pooled over the configured repeats.
pub fn emit_pd_matrix(cfg: &ExperimentConfig) -> Result<(PdMatrix, Vec<RunOutcome>), HarnessError> {
    if cfg.defense.mode != DefenseMode::Coae {
        return Err(HarnessError::Config {
            path: "defense.mode".into(),
            message: "the PD matrix needs the coae defense".into(),
        });
    }
    if cfg.attack.kind != AttackKind::LabelInference {
        return Err(HarnessError::Config {
            path: "attack.kind".into(),
            message: "the PD matrix needs the label_inference attack".into(),
        });
    }
    let outcomes = run_repeats(cfg)?;
    let (mut truth, mut restored) = (Vec::new(), Vec::new());
    for o in &outcomes {
        let inf = o.inference.as_ref().expect("label inference ran");
        truth.extend_from_slice(&inf.truth);
        restored.extend_from_slice(&inf.restored);
    }
    let classes = cfg.dataset.classes_hint();
    let c = classes.max(truth.iter().chain(&restored).max().map_or(0, |m| m + 1));
    Ok((pd_matrix(&truth, &restored, c), outcomes))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cartesian_product_in_key_order() {
        let mut g = Grid::new();
        g.insert("b".into(), vec![Value::from(1), Value::from(2)]);
        g.insert("a".into(), vec![Value::from("x"), Value::from("y"), Value::from("z")]);
        let pts = grid_points(&g).unwrap();
        assert_eq!(pts.len(), 6);
        assert_eq!(pts[0]["a"], Value::from("x"));
        assert_eq!(pts[1]["b"], Value::from(2));
        assert!(grid_points(&Grid::new()).is_err());
    }

    #[test]
    fn stats() {
        let s = Stat::of([1.0, 2.0, 3.0]).unwrap();
        assert_eq!((s.n, s.mean), (3, 2.0));
        assert!((s.std - 1.0).abs() < 1e-12);
        assert!(Stat::of([]).is_none());
    }
}
