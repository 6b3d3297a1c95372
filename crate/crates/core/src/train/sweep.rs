//! Temperature × α grids against one or more teachers, plus the standalone
//! baseline. Cells are independent and may run in parallel; every cell of a
//! given seed starts from the same student initialization and data order.

use std::io::Write;

use super::{fit_distill, fit_standalone, RunRecord, TrainConfig, TrainData, TrainError};
use crate::distill::{KDConfig, KlDirection};
use crate::nn::{load_weights, ModelSpec};
use crate::par;
use crate::tensor::Scalar;

pub const BASELINE_ID: &str = "baseline";
pub const REPORT_HEADER: &str = "teacher_id\tT\talpha\tsplit\taccuracy\tf1\tmcc";

/// A trained teacher as architecture plus serialized weights.
#[derive(Debug, Clone)]
pub struct TeacherSource {
    pub id: String,
    pub spec: ModelSpec,
    pub weights: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepPlan {
    pub temperatures: Vec<f64>,
    pub alphas: Vec<f64>,
    pub kl_direction: KlDirection,
    /// One run per seed in every cell.
    pub seeds: Vec<u64>,
}

impl SweepPlan {
    /// T ∈ {2, 5, 10, 20, 40}, α ∈ {0.3, 0.5, 0.7}.
    pub fn default_grid(seeds: Vec<u64>) -> Self {
        SweepPlan {
            temperatures: vec![2.0, 5.0, 10.0, 20.0, 40.0],
            alphas: vec![0.3, 0.5, 0.7],
            kl_direction: KlDirection::default(),
            seeds,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CellResult {
    /// [`BASELINE_ID`] for the standalone run.
    pub teacher_id: String,
    pub kd: KDConfig,
    pub seed: u64,
    pub outcome: Result<RunRecord, String>,
}

/// Runs every (teacher, T, α, seed) cell and one standalone run per seed.
/// A failing cell is recorded and the remaining cells still run. Results
/// come back in plan order regardless of scheduling.
pub fn sweep<F: Scalar>(
    teachers: &[TeacherSource],
    student: &ModelSpec,
    plan: &SweepPlan,
    data: &TrainData<F>,
    cfg: &TrainConfig,
) -> Result<Vec<CellResult>, TrainError> {
    if plan.temperatures.is_empty() || plan.alphas.is_empty() || plan.seeds.is_empty() {
        return Err(TrainError::Config("sweep grids and seed list must be nonempty".into()));
    }
    let mut cells: Vec<(Option<usize>, KDConfig, u64)> = Vec::new();
    for &seed in &plan.seeds {
        cells.push((None, KDConfig::standalone(), seed));
        for (ti, _) in teachers.iter().enumerate() {
            for &t in &plan.temperatures {
                for &a in &plan.alphas {
                    let kd = KDConfig {
                        kl_direction: plan.kl_direction,
                        ..KDConfig::new(t, a)
                    };
                    cells.push((Some(ti), kd, seed));
                }
            }
        }
    }
    let results = par::map_collect(cells.len(), |i| {
        let (teacher, kd, seed) = cells[i];
        let cfg = TrainConfig { seed, ..cfg.clone() };
        let outcome = run_cell(teacher.map(|t| &teachers[t]), student, &kd, data, &cfg)
            .map_err(|e| e.to_string());
        CellResult {
            teacher_id: teacher.map_or(BASELINE_ID.to_string(), |t| teachers[t].id.clone()),
            kd,
            seed,
            outcome,
        }
    });
    Ok(results)
}

fn run_cell<F: Scalar>(
    teacher: Option<&TeacherSource>,
    student: &ModelSpec,
    kd: &KDConfig,
    data: &TrainData<F>,
    cfg: &TrainConfig,
) -> Result<RunRecord, TrainError> {
    let mut s = student.build::<F>(cfg.seed)?;
    match teacher {
        None => fit_standalone(s.as_mut(), data, cfg),
        Some(src) => {
            let mut t = src.spec.build::<F>(0)?;
            load_weights(t.as_ref(), &mut src.weights.as_slice())
                .map_err(|e| TrainError::Contract(format!("teacher {}: {e}", src.id)))?;
            fit_distill(s.as_mut(), t.as_mut(), data, cfg, kd)
        }
    }
}

/// Median of a nonempty slice; the mean of the two middle values for even
/// lengths.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// One report line: median over the successful seeds of a cell.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub teacher_id: String,
    pub temperature: f64,
    pub alpha: f64,
    pub split: &'static str,
    pub accuracy: f64,
    pub f1: f64,
    pub mcc: f64,
    pub runs: usize,
    pub failed: usize,
}

/// Aggregates cell results into val and test rows, sorted by teacher id,
/// T, α, then split.
pub fn report_rows(results: &[CellResult]) -> Vec<ReportRow> {
    let mut keys: Vec<(String, f64, f64)> = Vec::new();
    for r in results {
        let k = (r.teacher_id.clone(), r.kd.temperature, r.kd.alpha);
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    keys.sort_by(|a, b| {
        a.0.cmp(&b.0)
            .then(a.1.total_cmp(&b.1))
            .then(a.2.total_cmp(&b.2))
    });
    let mut rows = Vec::new();
    for (id, t, a) in keys {
        let cell: Vec<&CellResult> = results
            .iter()
            .filter(|r| r.teacher_id == id && r.kd.temperature == t && r.kd.alpha == a)
            .collect();
        let ok: Vec<&RunRecord> = cell.iter().filter_map(|r| r.outcome.as_ref().ok()).collect();
        for split in ["val", "test"] {
            let metrics: Vec<(f64, f64, f64)> = ok
                .iter()
                .filter_map(|r| match split {
                    "val" => r.best().map(|e| (e.val.accuracy, e.val.f1, e.val.mcc)),
                    _ => r.test.map(|m| (m.accuracy, m.f1, m.mcc)),
                })
                .collect();
            let col = |f: fn(&(f64, f64, f64)) -> f64| median(&metrics.iter().map(f).collect::<Vec<_>>());
            rows.push(ReportRow {
                teacher_id: id.clone(),
                temperature: t,
                alpha: a,
                split,
                accuracy: col(|m| m.0),
                f1: col(|m| m.1),
                mcc: col(|m| m.2),
                runs: metrics.len(),
                failed: cell.len() - ok.len(),
            });
        }
    }
    rows
}

/// Writes the report TSV. Cells without a successful run print `failed`.
pub fn write_report(out: &mut impl Write, rows: &[ReportRow]) -> std::io::Result<()> {
    writeln!(out, "{REPORT_HEADER}")?;
    for r in rows {
        let m = |v: f64| {
            if r.runs == 0 {
                "failed".to_string()
            } else {
                format!("{v:.6}")
            }
        };
        writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}",
            r.teacher_id,
            r.temperature,
            r.alpha,
            r.split,
            m(r.accuracy),
            m(r.f1),
            m(r.mcc)
        )?;
    }
    Ok(())
}
