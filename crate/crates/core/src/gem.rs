//! Generalized EM outer loop.

use std::fmt;
use std::time::{Duration, Instant};

use log::{debug, warn};
use rayon::prelude::*;
use serde::Serialize;

use crate::dataset::Dataset;
use crate::error::{DiveError, Result};
use crate::estep::{compute_data_fit, update_posteriors};
use crate::fast::{cluster_means_lenient, fit_stage_fast, fit_trajectory_fast};
use crate::model::{one_hot, ModelState, SubjectStage};
use crate::mstep::{
    fit_lambda, fit_stage, fit_trajectory, initialize_with, initialize_with_labels, severity_stages,
    stage_objective_slow, trajectory_objective_slow, update_sigma, FitConfig,
};
use crate::objective::{penalized_objective, renormalize_dps};
use crate::priors::Priors;

/// Mass below `EMPTY_CLUSTER_FRACTION · L` freezes a cluster's parameters.
pub const EMPTY_CLUSTER_FRACTION: f64 = 1e-6;

/// Allowed drop after a parameter sub-step, relative to `max(1, |objective|)`.
pub const MONOTONICITY_SLACK: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub enum FitMode {
    Full,
    /// Posteriors frozen one-hot at these labels; no E-step, no λ update.
    RoiFixed(Vec<usize>),
    /// Every stage fixed at `α = 1, β = 0`.
    NoStaging,
}

impl FitMode {
    pub fn name(&self) -> &'static str {
        match self {
            FitMode::Full => "full",
            FitMode::RoiFixed(_) => "roi",
            FitMode::NoStaging => "no_staging",
        }
    }

    fn staging(&self) -> bool {
        !matches!(self, FitMode::NoStaging)
    }

    fn updates_posteriors(&self) -> bool {
        !matches!(self, FitMode::RoiFixed(_))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Substep {
    EStep,
    Trajectory,
    Sigma,
    Stage,
    Lambda,
    Renormalize,
}

impl Substep {
    /// Sub-steps that hold the posteriors fixed and must not lower the objective.
    pub fn is_monotone(self) -> bool {
        matches!(self, Substep::Trajectory | Substep::Sigma | Substep::Stage)
    }
}

impl fmt::Display for Substep {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Substep::EStep => "e_step",
            Substep::Trajectory => "trajectory",
            Substep::Sigma => "sigma",
            Substep::Stage => "stage",
            Substep::Lambda => "lambda",
            Substep::Renormalize => "renormalize",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SubstepRecord {
    pub iteration: usize,
    pub step: Substep,
    pub before: f64,
    pub after: f64,
}

impl SubstepRecord {
    pub fn delta(&self) -> f64 {
        self.after - self.before
    }

    pub fn violates_monotonicity(&self) -> bool {
        self.step.is_monotone()
            && self.after < self.before - MONOTONICITY_SLACK * self.before.abs().max(1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct EmptyCluster {
    pub iteration: usize,
    pub cluster: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum FitStatus {
    Converged,
    MaxIterations,
    /// Non-finite objective; the returned state is the last finite one.
    Diverged(String),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FitReport {
    pub mode: String,
    pub initial_objective: f64,
    /// Objective at the end of each completed outer iteration.
    pub objectives: Vec<f64>,
    pub converged: bool,
    pub status: FitStatus,
    pub substeps: Vec<SubstepRecord>,
    pub monotonicity_violations: Vec<SubstepRecord>,
    pub empty_clusters: Vec<EmptyCluster>,
    /// Fast updates discarded because the slow objective got worse.
    pub reverted_fast_updates: usize,
    /// Which initialization produced this result.
    pub start: String,
    /// Final objective of every start that was tried, in order.
    pub start_objectives: Vec<f64>,
    #[serde(skip)]
    pub wall_time: Duration,
}

impl FitReport {
    pub fn iterations(&self) -> usize {
        self.objectives.len()
    }

    pub fn final_objective(&self) -> f64 {
        self.objectives.last().copied().unwrap_or(self.initial_objective)
    }
}

/// Initializes according to `mode` and runs the GEM loop. With
/// `severity_start` (and staging enabled) a second run starts from
/// [`severity_stages`]; the run with the higher final objective wins,
/// ties going to the first.
pub fn gem_fit(
    data: &Dataset,
    config: &FitConfig,
    priors: &Priors,
    mode: &FitMode,
) -> Result<(ModelState, FitReport)> {
    config.validate()?;
    let init = match mode {
        FitMode::RoiFixed(labels) => initialize_with_labels(data, config.k, labels, true)?,
        _ => initialize_with(data, config, mode.staging())?,
    };
    let mut best = gem_fit_from(data, init.clone(), config, priors, mode)?;
    best.1.start = "age".into();
    if config.severity_start && mode.staging() {
        let mut alt = init;
        alt.stages = severity_stages(data);
        let labels = alt.hard_labels();
        let alt = rebuild_trajectories(data, alt, &labels)?;
        let (model, mut report) = gem_fit_from(data, alt, config, priors, mode)?;
        report.start = "severity".into();
        let mut starts = std::mem::take(&mut best.1.start_objectives);
        starts.push(report.final_objective());
        let diverged = matches!(report.status, FitStatus::Diverged(_));
        if !diverged && report.final_objective() > best.1.final_objective() {
            best = (model, report);
        }
        best.1.start_objectives = starts;
    }
    Ok(best)
}

/// Re-derives initial trajectories and noise levels for new stages.
fn rebuild_trajectories(data: &Dataset, model: ModelState, labels: &[usize]) -> Result<ModelState> {
    let mut rebuilt = crate::mstep::build_state_with_stages(
        data,
        model.k(),
        labels,
        model.posteriors.clone(),
        model.stages.clone(),
    )?;
    rebuilt.mrf = model.mrf;
    Ok(rebuilt)
}

fn is_divergence(e: &DiveError) -> bool {
    matches!(
        e,
        DiveError::FitDivergence(_) | DiveError::InferenceDivergence { .. } | DiveError::ParameterDomain(_)
    )
}

struct Tracker<'a> {
    data: &'a Dataset,
    priors: &'a Priors,
    enabled: bool,
    current: f64,
    iteration: usize,
    records: Vec<SubstepRecord>,
}

impl Tracker<'_> {
    fn record(&mut self, step: Substep, model: &ModelState) -> Result<()> {
        if !self.enabled {
            return Ok(());
        }
        let after = penalized_objective(self.data, model, self.priors)?;
        self.records.push(SubstepRecord {
            iteration: self.iteration,
            step,
            before: self.current,
            after,
        });
        self.current = after;
        Ok(())
    }
}

/// Runs the GEM loop from a given state. In [`FitMode::RoiFixed`] the
/// posteriors are replaced by the one-hot labels; in [`FitMode::NoStaging`]
/// the stages are reset to the identity.
pub fn gem_fit_from(
    data: &Dataset,
    init: ModelState,
    config: &FitConfig,
    priors: &Priors,
    mode: &FitMode,
) -> Result<(ModelState, FitReport)> {
    config.validate()?;
    let started = Instant::now();
    let mut model = init;
    if model.stages.len() != data.n_subjects() || model.n_vertices() != data.n_vertices() {
        return Err(DiveError::Config(format!(
            "model shape ({} stages, {} vertices) does not match the dataset ({}, {})",
            model.stages.len(),
            model.n_vertices(),
            data.n_subjects(),
            data.n_vertices()
        )));
    }
    match mode {
        FitMode::RoiFixed(labels) => {
            if labels.len() != data.n_vertices() {
                return Err(DiveError::Config(format!(
                    "{} atlas labels for {} vertices",
                    labels.len(),
                    data.n_vertices()
                )));
            }
            model.posteriors = one_hot(labels, model.k())?;
        }
        FitMode::NoStaging => model.stages.fill(SubjectStage::IDENTITY),
        FitMode::Full => {}
    }
    model.validate()?;

    let initial_objective = penalized_objective(data, &model, priors)?;
    let mut report = FitReport {
        mode: mode.name().to_string(),
        initial_objective,
        objectives: Vec::new(),
        converged: false,
        status: FitStatus::MaxIterations,
        substeps: Vec::new(),
        monotonicity_violations: Vec::new(),
        empty_clusters: Vec::new(),
        reverted_fast_updates: 0,
        start: "given".into(),
        start_objectives: Vec::new(),
        wall_time: Duration::ZERO,
    };
    let mut tracker = Tracker {
        data,
        priors,
        enabled: config.track_substeps,
        current: initial_objective,
        iteration: 0,
        records: Vec::new(),
    };

    let mut previous = initial_objective;
    for it in 0..config.max_outer_iters {
        tracker.iteration = it;
        let snapshot = model.clone();
        match gem_iteration(data, &mut model, config, priors, mode, &mut tracker, &mut report) {
            Ok(objective) => {
                report.objectives.push(objective);
                debug!("iteration {it}: objective {objective:.10e}");
                let change = (objective - previous).abs();
                previous = objective;
                if change <= config.tol * previous.abs().max(1.0) {
                    report.converged = true;
                    report.status = FitStatus::Converged;
                    break;
                }
            }
            Err(e) if is_divergence(&e) => {
                warn!("fit diverged at iteration {it}: {e}");
                model = snapshot;
                report.status = FitStatus::Diverged(e.to_string());
                break;
            }
            Err(e) => return Err(e),
        }
    }
    report.substeps = tracker.records;
    report.monotonicity_violations = report
        .substeps
        .iter()
        .filter(|r| r.violates_monotonicity())
        .copied()
        .collect();
    report.start_objectives = vec![report.final_objective()];
    report.wall_time = started.elapsed();
    Ok((model, report))
}

fn gem_iteration(
    data: &Dataset,
    model: &mut ModelState,
    config: &FitConfig,
    priors: &Priors,
    mode: &FitMode,
    tracker: &mut Tracker<'_>,
    report: &mut FitReport,
) -> Result<f64> {
    let it = tracker.iteration;
    let opts = config.bfgs();
    let adjacency = data.adjacency();

    // E-step
    let dfit = compute_data_fit(data, model)?;
    let z_prev = model.posteriors.clone();
    if mode.updates_posteriors() {
        model.posteriors = update_posteriors(&dfit, &z_prev, adjacency, model.mrf.lambda)?;
        tracker.record(Substep::EStep, model)?;
    }

    // trajectories, one task per cluster
    let k = model.k();
    let threshold = EMPTY_CLUSTER_FRACTION * data.n_vertices() as f64;
    let masses = model.cluster_mass();
    let empty: Vec<bool> = masses.iter().map(|&m| m < threshold).collect();
    for (c, _) in empty.iter().enumerate().filter(|(_, e)| **e) {
        report.empty_clusters.push(EmptyCluster {
            iteration: it,
            cluster: c,
        });
    }
    let means = config.fast.then(|| cluster_means_lenient(data, &model.posteriors));
    let snapshot: &ModelState = model;
    let updates: Vec<(crate::sigmoid::TrajectoryParams, bool)> = (0..k)
        .into_par_iter()
        .map(|c| {
            let init = snapshot.trajectories[c];
            if empty[c] {
                return (init, false);
            }
            let sigma = snapshot.sigmas[c];
            match &means {
                Some(means) => {
                    let fit = fit_trajectory_fast(
                        c,
                        data,
                        means,
                        &snapshot.stages,
                        sigma,
                        &priors.theta,
                        init,
                        config.theta_starts,
                        &opts,
                    );
                    let slow = |t| {
                        trajectory_objective_slow(
                            c,
                            data,
                            &snapshot.posteriors,
                            &snapshot.stages,
                            sigma,
                            &priors.theta,
                            t,
                        )
                    };
                    if fit.progressed && slow(&fit.theta) < slow(&init) {
                        (init, true)
                    } else {
                        (fit.theta, false)
                    }
                }
                None => {
                    let fit = fit_trajectory(
                        c,
                        data,
                        &snapshot.posteriors,
                        &snapshot.stages,
                        sigma,
                        &priors.theta,
                        init,
                        config.theta_starts,
                        &opts,
                    );
                    (fit.theta, false)
                }
            }
        })
        .collect();
    for (c, (theta, reverted)) in updates.into_iter().enumerate() {
        model.trajectories[c] = theta;
        report.reverted_fast_updates += usize::from(reverted);
    }
    tracker.record(Substep::Trajectory, model)?;

    // noise levels, always from the full residuals
    for c in (0..k).filter(|&c| !empty[c]) {
        model.sigmas[c] = update_sigma(c, data, &model.posteriors, &model.stages, &model.trajectories[c]);
    }
    tracker.record(Substep::Sigma, model)?;

    // subject stages
    if mode.staging() {
        let snapshot: &ModelState = model;
        let fits: Vec<Result<(SubjectStage, bool)>> = (0..data.n_subjects())
            .into_par_iter()
            .map(|i| {
                let init = snapshot.stages[i];
                match &means {
                    Some(means) => {
                        let fit = fit_stage_fast(
                            data,
                            data.subject_rows(i),
                            means,
                            &snapshot.trajectories,
                            &snapshot.sigmas,
                            &priors.stage,
                            init,
                            &opts,
                        )?;
                        let slow = |s| {
                            stage_objective_slow(
                                i,
                                data,
                                &snapshot.posteriors,
                                &snapshot.trajectories,
                                &snapshot.sigmas,
                                &priors.stage,
                                s,
                            )
                        };
                        if fit.progressed && slow(&fit.stage) < slow(&init) {
                            Ok((init, true))
                        } else {
                            Ok((fit.stage, false))
                        }
                    }
                    None => fit_stage(
                        i,
                        data,
                        &snapshot.posteriors,
                        &snapshot.trajectories,
                        &snapshot.sigmas,
                        &priors.stage,
                        init,
                        &opts,
                    )
                    .map(|f| (f.stage, false)),
                }
            })
            .collect();
        for (i, fit) in fits.into_iter().enumerate() {
            let (stage, reverted) = fit?;
            model.stages[i] = stage;
            report.reverted_fast_updates += usize::from(reverted);
        }
        tracker.record(Substep::Stage, model)?;
    }

    // MRF strength, always on the full posterior formulation
    if mode.updates_posteriors() {
        model.mrf.lambda = fit_lambda(&dfit, &z_prev, adjacency, &config.lambda_grid)?.lambda;
        tracker.record(Substep::Lambda, model)?;
    }

    if mode.staging() {
        match renormalize_dps(model, data) {
            Ok(m) => {
                *model = m;
                tracker.record(Substep::Renormalize, model)?;
            }
            Err(DiveError::DegenerateStaging) => debug!("baseline DPS has no spread; gauge left as is"),
            Err(e) => return Err(e),
        }
    }

    let objective = if tracker.enabled {
        tracker.current
    } else {
        penalized_objective(data, model, priors)?
    };
    Ok(objective)
}
