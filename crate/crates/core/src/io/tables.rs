//! Plain CSV tables: fit outputs, ground truth, labels, covariates and
//! reports. Every file starts with a header row.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::dataset::{check_header, csv_error, csv_reader, csv_writer, write_records};
use crate::dataset::Dataset;
use crate::error::{DiveError, Result};
use crate::eval::{ComparisonReport, Covariate};
use crate::gem::FitReport;
use crate::model::{ModelState, SubjectStage};
use crate::sigmoid::TrajectoryParams;
use crate::synthetic::GroundTruth;

pub const TRACE_FILE: &str = "trace.csv";
pub const SUBSTEPS_FILE: &str = "substeps.csv";
pub const REPORT_FILE: &str = "report.csv";
pub const FOLDS_FILE: &str = "folds.csv";
pub const TRAJECTORIES_FILE: &str = "trajectories.csv";
pub const PARAMS_FILE: &str = "params.csv";
pub const STAGES_FILE: &str = "stages.csv";
pub const LABELS_FILE: &str = "labels.csv";
pub const COVARIATES_FILE: &str = "covariates.csv";
pub const TRUTH_LABELS_FILE: &str = "truth_labels.csv";
pub const TRUTH_PARAMS_FILE: &str = "truth_params.csv";
pub const TRUTH_STAGES_FILE: &str = "truth_stages.csv";

/// Points per cluster in `trajectories.csv`.
pub const TRAJECTORY_SAMPLES: usize = 101;

#[derive(Serialize)]
struct TraceRow {
    iteration: usize,
    objective: f64,
}

/// `iteration,objective`; iteration 0 is the initial state.
pub fn write_trace(path: &Path, report: &FitReport) -> Result<()> {
    let rows = std::iter::once(report.initial_objective)
        .chain(report.objectives.iter().copied())
        .enumerate()
        .map(|(iteration, objective)| TraceRow { iteration, objective });
    write_records(path, &["iteration", "objective"], rows)
}

#[derive(Serialize)]
struct SubstepRow {
    iteration: usize,
    step: String,
    before: f64,
    after: f64,
    delta: f64,
}

pub fn write_substeps(path: &Path, report: &FitReport) -> Result<()> {
    let rows = report.substeps.iter().map(|s| SubstepRow {
        iteration: s.iteration,
        step: s.step.to_string(),
        before: s.before,
        after: s.after,
        delta: s.delta(),
    });
    write_records(path, &["iteration", "step", "before", "after", "delta"], rows)
}

#[derive(Serialize)]
struct CurveRow {
    cluster: usize,
    dps: f64,
    value: f64,
}

/// `cluster,dps,value`: each trajectory sampled on an even grid covering the
/// DPS of every observation.
pub fn write_trajectories(path: &Path, data: &Dataset, model: &ModelState) -> Result<()> {
    let dps: Vec<f64> = (0..data.n_rows())
        .map(|r| model.stages[data.subject_of_row(r)].dps(data.age(r)))
        .collect();
    let lo = dps.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = dps.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let step = (hi - lo) / (TRAJECTORY_SAMPLES - 1) as f64;
    let rows = model.trajectories.iter().enumerate().flat_map(|(cluster, t)| {
        (0..TRAJECTORY_SAMPLES).map(move |j| {
            let s = lo + step * j as f64;
            CurveRow {
                cluster,
                dps: s,
                value: t.eval(s),
            }
        })
    });
    write_records(path, &["cluster", "dps", "value"], rows)
}

#[derive(Serialize, Deserialize)]
struct ParamRow {
    cluster: usize,
    a: f64,
    b: f64,
    c: f64,
    d: f64,
    sigma: f64,
}

/// `cluster,a,b,c,d,sigma`.
pub fn write_params(path: &Path, trajectories: &[TrajectoryParams], sigmas: &[f64]) -> Result<()> {
    let rows = trajectories.iter().zip(sigmas).enumerate().map(|(cluster, (t, &sigma))| ParamRow {
        cluster,
        a: t.a,
        b: t.b,
        c: t.c,
        d: t.d,
        sigma,
    });
    write_records(path, &["cluster", "a", "b", "c", "d", "sigma"], rows)
}

pub fn read_params(path: &Path) -> Result<(Vec<TrajectoryParams>, Vec<f64>)> {
    let mut reader = csv_reader(path)?;
    check_header(path, &mut reader, &["cluster", "a", "b", "c", "d", "sigma"])?;
    let mut out = (Vec::new(), Vec::new());
    for (n, r) in reader.deserialize::<ParamRow>().enumerate() {
        let r = r.map_err(|e| csv_error(path, e))?;
        if r.cluster != n {
            return Err(DiveError::format(path, format!("line {}", n + 2), "clusters must be listed in order"));
        }
        out.0.push(TrajectoryParams {
            a: r.a,
            b: r.b,
            c: r.c,
            d: r.d,
        });
        out.1.push(r.sigma);
    }
    Ok(out)
}

#[derive(Serialize, Deserialize)]
struct StageRow {
    subject_id: u64,
    alpha: f64,
    beta: f64,
    baseline_age: f64,
    baseline_dps: f64,
}

/// `subject_id,alpha,beta,baseline_age,baseline_dps`.
pub fn write_stages(path: &Path, data: &Dataset, stages: &[SubjectStage]) -> Result<()> {
    let rows = stages.iter().enumerate().map(|(i, s)| {
        let age = data.age(data.baseline_row(i));
        StageRow {
            subject_id: data.subject_id(i),
            alpha: s.alpha,
            beta: s.beta,
            baseline_age: age,
            baseline_dps: s.dps(age),
        }
    });
    write_records(
        path,
        &["subject_id", "alpha", "beta", "baseline_age", "baseline_dps"],
        rows,
    )
}

/// Stages ordered by the dataset's subject index.
pub fn read_stages(path: &Path, data: &Dataset) -> Result<Vec<SubjectStage>> {
    let mut reader = csv_reader(path)?;
    check_header(
        path,
        &mut reader,
        &["subject_id", "alpha", "beta", "baseline_age", "baseline_dps"],
    )?;
    let mut stages: Vec<Option<SubjectStage>> = vec![None; data.n_subjects()];
    for (n, r) in reader.deserialize::<StageRow>().enumerate() {
        let r = r.map_err(|e| csv_error(path, e))?;
        let line = format!("line {}", n + 2);
        let i = data
            .subject_index(r.subject_id)
            .ok_or_else(|| DiveError::format(path, &line, format!("unknown subject {}", r.subject_id)))?;
        stages[i] = Some(
            SubjectStage::new(r.alpha, r.beta).map_err(|e| DiveError::format(path, &line, e.to_string()))?,
        );
    }
    stages
        .into_iter()
        .enumerate()
        .map(|(i, s)| {
            s.ok_or_else(|| {
                DiveError::format(path, "end", format!("missing subject {}", data.subject_id(i)))
            })
        })
        .collect()
}

#[derive(Serialize, Deserialize)]
struct LabelRow {
    vertex: usize,
    label: usize,
}

/// `vertex,label`.
pub fn write_labels(path: &Path, labels: &[usize]) -> Result<()> {
    let rows = labels.iter().enumerate().map(|(vertex, &label)| LabelRow { vertex, label });
    write_records(path, &["vertex", "label"], rows)
}

pub fn read_labels(path: &Path, n_vertices: usize) -> Result<Vec<usize>> {
    let mut reader = csv_reader(path)?;
    check_header(path, &mut reader, &["vertex", "label"])?;
    let mut labels = vec![None; n_vertices];
    for (n, r) in reader.deserialize::<LabelRow>().enumerate() {
        let r = r.map_err(|e| csv_error(path, e))?;
        if r.vertex >= n_vertices {
            return Err(DiveError::format(
                path,
                format!("line {}", n + 2),
                format!("vertex {} out of range for {n_vertices} vertices", r.vertex),
            ));
        }
        labels[r.vertex] = Some(r.label);
    }
    labels
        .into_iter()
        .enumerate()
        .map(|(l, v)| v.ok_or_else(|| DiveError::format(path, "end", format!("no label for vertex {l}"))))
        .collect()
}

pub fn write_truth(dir: &Path, data: &Dataset, truth: &GroundTruth) -> Result<()> {
    write_labels(&dir.join(TRUTH_LABELS_FILE), &truth.labels)?;
    let sigmas = vec![truth.noise; truth.trajectories.len()];
    write_params(&dir.join(TRUTH_PARAMS_FILE), &truth.trajectories, &sigmas)?;
    write_stages(&dir.join(TRUTH_STAGES_FILE), data, &truth.stages)
}

pub fn read_truth(dir: &Path, data: &Dataset) -> Result<GroundTruth> {
    let labels = read_labels(&dir.join(TRUTH_LABELS_FILE), data.n_vertices())?;
    let (trajectories, sigmas) = read_params(&dir.join(TRUTH_PARAMS_FILE))?;
    let stages = read_stages(&dir.join(TRUTH_STAGES_FILE), data)?;
    Ok(GroundTruth {
        labels,
        trajectories,
        stages,
        noise: sigmas.first().copied().unwrap_or(0.0),
    })
}

/// `subject_id,visit_id,<name>...`, one row per observation.
pub fn write_covariates(path: &Path, data: &Dataset, covariates: &[Covariate]) -> Result<()> {
    let mut w = csv_writer(path)?;
    let mut header = vec!["subject_id".to_string(), "visit_id".to_string()];
    header.extend(covariates.iter().map(|c| c.name.clone()));
    w.write_record(&header).map_err(|e| csv_error(path, e))?;
    for (r, o) in data.rows().iter().enumerate() {
        let mut rec = vec![o.subject.to_string(), o.visit.to_string()];
        rec.extend(covariates.iter().map(|c| c.values()[r].to_string()));
        w.write_record(&rec).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| DiveError::io(path, e))
}

/// Reads covariates and aligns them to the dataset rows by
/// `(subject_id, visit_id)`.
pub fn read_covariates(path: &Path, data: &Dataset) -> Result<Vec<Covariate>> {
    let mut reader = csv_reader(path)?;
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| csv_error(path, e))?
        .iter()
        .map(str::to_string)
        .collect();
    if header.len() < 3 || header[0] != "subject_id" || header[1] != "visit_id" {
        return Err(DiveError::format(
            path,
            "line 1",
            "expected header subject_id,visit_id followed by covariate names",
        ));
    }
    let index: HashMap<(u64, u64), usize> = data
        .rows()
        .iter()
        .enumerate()
        .map(|(r, o)| ((o.subject, o.visit), r))
        .collect();
    let names = &header[2..];
    let mut values = vec![vec![f64::NAN; data.n_rows()]; names.len()];
    let mut seen = vec![false; data.n_rows()];
    for record in reader.records() {
        let record = record.map_err(|e| csv_error(path, e))?;
        let line = format!("line {}", record.position().map_or(0, |p| p.line()));
        let parse_id = |c: usize| -> Result<u64> {
            record[c]
                .parse()
                .map_err(|_| DiveError::format(path, &line, format!("bad id {:?}", &record[c])))
        };
        let key = (parse_id(0)?, parse_id(1)?);
        let r = *index
            .get(&key)
            .ok_or_else(|| DiveError::format(path, &line, format!("no observation for subject {} visit {}", key.0, key.1)))?;
        seen[r] = true;
        for (c, col) in values.iter_mut().enumerate() {
            let field = &record[c + 2];
            let v: f64 = field
                .parse()
                .ok()
                .filter(|v: &f64| v.is_finite())
                .ok_or_else(|| DiveError::format(path, &line, format!("{}: bad value {field:?}", names[c])))?;
            col[r] = v;
        }
    }
    if let Some(r) = seen.iter().position(|s| !s) {
        let o = data.rows()[r];
        return Err(DiveError::format(
            path,
            "end",
            format!("missing subject {} visit {}", o.subject, o.visit),
        ));
    }
    names
        .iter()
        .zip(values)
        .map(|(n, v)| Covariate::new(n.clone(), v, data))
        .collect()
}

#[derive(Serialize)]
struct SummaryRow<'a> {
    model: &'a str,
    metric: String,
    mean: f64,
    sd: f64,
    folds: usize,
}

#[derive(Serialize)]
struct FoldRow<'a> {
    fold: usize,
    model: &'a str,
    metric: String,
    value: f64,
}

/// Writes `report.csv` (`model,metric,mean,sd,folds`) and `folds.csv`
/// (`fold,model,metric,value`). Correlation metrics are named `rho_<covariate>`.
pub fn write_comparison(dir: &Path, report: &ComparisonReport) -> Result<()> {
    let metrics = |m: &crate::eval::ModelSummary| {
        report
            .covariates
            .iter()
            .map(|c| format!("rho_{c}"))
            .zip(m.correlations.clone())
            .chain(std::iter::once(("rmse".to_string(), m.rmse.clone())))
            .collect::<Vec<_>>()
    };
    let mut summary = Vec::new();
    let mut folds = Vec::new();
    for m in &report.models {
        for (metric, s) in metrics(m) {
            for (&fold, &value) in report.folds_used.iter().zip(&s.per_fold) {
                folds.push(FoldRow {
                    fold,
                    model: &m.model,
                    metric: metric.clone(),
                    value,
                });
            }
            summary.push(SummaryRow {
                model: &m.model,
                metric,
                mean: s.mean,
                sd: s.sd,
                folds: s.per_fold.len(),
            });
        }
    }
    write_records(&dir.join(REPORT_FILE), &["model", "metric", "mean", "sd", "folds"], summary)?;
    write_records(&dir.join(FOLDS_FILE), &["fold", "model", "metric", "value"], folds)
}

#[derive(Serialize)]
struct MetricRow<'a> {
    metric: &'a str,
    value: f64,
}

/// `metric,value`.
pub fn write_metrics(path: &Path, metrics: &[(&str, f64)]) -> Result<()> {
    let rows = metrics.iter().map(|&(metric, value)| MetricRow { metric, value });
    write_records(path, &["metric", "value"], rows)
}
