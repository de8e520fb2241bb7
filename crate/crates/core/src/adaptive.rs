//! Adaptive localization: pick the best radius from a pool during a training
//! phase, learn features -> radius with a random forest, then predict the
//! radius from features alone.
//!
//! Cycle `c` (1-based) forecasts the previous analysis by `steps_per_cycle`
//! model steps, assimilates the observation of the truth at cycle `c`, and
//! inflates the analysis before the next forecast.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::enkf::{self, FilterConfig, ObservationBatch};
use crate::ensemble::Ensemble;
use crate::error::{Error, Result};
use crate::features::{extract_features, FeatureLayout, FeatureVector};
use crate::forest::Forest;
use crate::localization::{build_rho, localize_covariance, LocalizationSpec, Radii, Taper};
use crate::lorenz96::Lorenz96;
use crate::metrics::{self, criterion, CriterionValue, CriterionWeights};
use crate::rng::{stream, tag, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolMode {
    ScalarInTime,
    VectorInTimeSpace,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RadiusPool {
    pub mode: PoolMode,
    pub scalar_candidates: Vec<f64>,
    pub n_trials: usize,
    /// Inclusive range of integer per-variable radii (vector mode).
    pub vector_range: (u32, u32),
    pub rng_seed: u64,
}

impl RadiusPool {
    pub fn scalar(candidates: Vec<f64>, rng_seed: u64) -> Result<Self> {
        let pool = RadiusPool {
            mode: PoolMode::ScalarInTime,
            scalar_candidates: candidates,
            n_trials: 1,
            vector_range: (1, 1),
            rng_seed,
        };
        pool.validate()?;
        Ok(pool)
    }

    pub fn vector(n_trials: usize, low: u32, high: u32, rng_seed: u64) -> Result<Self> {
        let pool = RadiusPool {
            mode: PoolMode::VectorInTimeSpace,
            scalar_candidates: Vec::new(),
            n_trials,
            vector_range: (low, high),
            rng_seed,
        };
        pool.validate()?;
        Ok(pool)
    }

    pub fn validate(&self) -> Result<()> {
        match self.mode {
            PoolMode::ScalarInTime => {
                let c = &self.scalar_candidates;
                if c.is_empty() {
                    return Err(Error::Parameter("scalar_candidates is empty".into()));
                }
                if c.iter().any(|r| !(*r > 0.0 && r.is_finite())) {
                    return Err(Error::Parameter("scalar_candidates must be > 0".into()));
                }
                if c.windows(2).any(|w| w[0] >= w[1]) {
                    return Err(Error::Parameter(
                        "scalar_candidates must be strictly increasing".into(),
                    ));
                }
            }
            PoolMode::VectorInTimeSpace => {
                let (lo, hi) = self.vector_range;
                if lo == 0 || lo > hi {
                    return Err(Error::Parameter(format!(
                        "vector_range must satisfy 1 <= low <= high, got [{lo}, {hi}]"
                    )));
                }
                if self.n_trials == 0 {
                    return Err(Error::Parameter("n_trials must be >= 1".into()));
                }
            }
        }
        Ok(())
    }

    /// Number of values the forest predicts per cycle.
    pub fn n_targets(&self, n_state: usize) -> usize {
        match self.mode {
            PoolMode::ScalarInTime => 1,
            PoolMode::VectorInTimeSpace => n_state,
        }
    }

    /// Candidates for one training cycle. Scalar mode lists the whole pool;
    /// vector mode draws `n_trials` integer vectors from a per-cycle stream.
    pub fn propose_candidates(&self, cycle: usize, n_state: usize) -> Vec<Radii> {
        match self.mode {
            PoolMode::ScalarInTime => self
                .scalar_candidates
                .iter()
                .map(|&r| Radii::Scalar(r))
                .collect(),
            PoolMode::VectorInTimeSpace => {
                let (lo, hi) = self.vector_range;
                let mut rng = stream(self.rng_seed, &[tag::CANDIDATES, cycle as u64]);
                (0..self.n_trials)
                    .map(|_| {
                        Radii::PerVariable(
                            (0..n_state)
                                .map(|_| f64::from(rng.random_range(lo..=hi)))
                                .collect(),
                        )
                    })
                    .collect()
            }
        }
    }

    /// Map a raw forest prediction onto the nearest admissible radius, ties
    /// going to the smaller value.
    pub fn snap(&self, prediction: &[f64], n_state: usize) -> Result<Radii> {
        match self.mode {
            PoolMode::ScalarInTime => {
                let [p] = prediction else {
                    return Err(Error::dim("scalar radius prediction", 1, prediction.len()));
                };
                let mut best = self.scalar_candidates[0];
                for &c in &self.scalar_candidates[1..] {
                    if (c - p).abs() < (best - p).abs() {
                        best = c;
                    }
                }
                Ok(Radii::Scalar(best))
            }
            PoolMode::VectorInTimeSpace => {
                if prediction.len() != n_state {
                    return Err(Error::dim("vector radius prediction", n_state, prediction.len()));
                }
                let (lo, hi) = (f64::from(self.vector_range.0), f64::from(self.vector_range.1));
                Ok(Radii::PerVariable(
                    prediction
                        .iter()
                        .map(|&p| {
                            let p = p.clamp(lo, hi);
                            let below = p.floor();
                            if p - below > 0.5 {
                                below + 1.0
                            } else {
                                below
                            }
                        })
                        .collect(),
                ))
            }
        }
    }

    pub fn contains(&self, radii: &Radii) -> bool {
        match (self.mode, radii) {
            (PoolMode::ScalarInTime, Radii::Scalar(r)) => self.scalar_candidates.contains(r),
            (PoolMode::VectorInTimeSpace, Radii::PerVariable(v)) => {
                let (lo, hi) = (f64::from(self.vector_range.0), f64::from(self.vector_range.1));
                v.iter().all(|r| r.fract() == 0.0 && (lo..=hi).contains(r))
            }
            _ => false,
        }
    }

    fn target(&self, radii: &Radii) -> Vec<f64> {
        match radii {
            Radii::Scalar(r) => vec![*r],
            Radii::PerVariable(v) => v.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingRecord {
    pub cycle: usize,
    pub features: FeatureVector,
    pub winner: Radii,
    pub winner_cost: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Training,
    Testing,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Training => "training",
            Phase::Testing => "testing",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CycleResult {
    pub cycle: usize,
    pub phase: Phase,
    pub radius_used: Radii,
    pub forecast_rmse_true: f64,
    pub forecast_rmse_obs: f64,
    pub analysis_rmse_true: f64,
    pub analysis_rmse_obs: f64,
    pub analysis_kl: f64,
    pub criterion_value: f64,
}

/// Everything a cycle's analysis depends on besides the ensemble and radius.
#[derive(Debug, Clone, Copy)]
pub struct AnalysisSettings {
    pub taper: Taper,
    pub filter: FilterConfig,
    pub weights: CriterionWeights,
}

/// Perturbation and rank-tie streams of candidate `index` at `cycle`.
/// Fixed-radius runs use index 0.
pub fn candidate_streams(seed: u64, cycle: usize, index: usize) -> (Stream, Stream) {
    let tags = |t: u64| [t, cycle as u64, index as u64];
    (stream(seed, &tags(tag::PERTURB)), stream(seed, &tags(tag::RANK_TIES)))
}

#[derive(Debug, Clone)]
pub struct CandidateOutcome {
    pub analysis: Ensemble,
    pub criterion: CriterionValue,
}

/// Analyse `fc` with one candidate radius and score the result. `cov` is the
/// forecast sample covariance, shared by all candidates of a cycle.
pub fn evaluate_candidate(
    fc: &Ensemble,
    cov: &DMatrix<f64>,
    obs: &ObservationBatch,
    radii: &Radii,
    settings: &AnalysisSettings,
    cycle: usize,
    index: usize,
) -> Result<CandidateOutcome> {
    let spec = LocalizationSpec::new(settings.taper, radii.clone());
    let rho = build_rho(&spec, fc.n_state())?;
    let gain = enkf::kalman_gain(&localize_covariance(cov, &rho)?, obs)?;
    let (mut perturb, mut ties) = candidate_streams(settings.filter.rng_seed, cycle, index);
    let analysis = enkf::analysis(settings.filter.variant, fc, obs, &gain, &mut perturb)?;
    let criterion = criterion(&analysis, obs, &settings.weights, &mut ties)?;
    if !criterion.value.is_finite() {
        return Err(Error::Divergence {
            cycle,
            member: None,
        });
    }
    Ok(CandidateOutcome {
        analysis,
        criterion,
    })
}

#[derive(Debug, Clone)]
pub struct WinnerSearch {
    pub winner_index: usize,
    pub winner: Radii,
    pub analysis: Ensemble,
    pub criterion: CriterionValue,
    /// Cost of every candidate in proposal order; failed candidates are `+inf`.
    pub costs: Vec<f64>,
}

/// Evaluate every candidate and keep the cheapest; the first listed wins ties,
/// which is the smallest radius for a sorted scalar pool.
pub fn winner_search(
    fc: &Ensemble,
    obs: &ObservationBatch,
    candidates: &[Radii],
    settings: &AnalysisSettings,
    cycle: usize,
) -> Result<WinnerSearch> {
    if candidates.is_empty() {
        return Err(Error::Parameter("winner search needs at least one candidate".into()));
    }
    let cov = fc.covariance();
    let outcomes: Vec<Option<CandidateOutcome>> = candidates
        .par_iter()
        .enumerate()
        .map(|(i, r)| evaluate_candidate(fc, &cov, obs, r, settings, cycle, i).ok())
        .collect();
    let costs: Vec<f64> = outcomes
        .iter()
        .map(|o| o.as_ref().map_or(f64::INFINITY, |o| o.criterion.value))
        .collect();
    let mut best: Option<usize> = None;
    for (i, c) in costs.iter().enumerate() {
        if c.is_finite() && best.is_none_or(|b| *c < costs[b]) {
            best = Some(i);
        }
    }
    let winner_index = best.ok_or(Error::CycleFailure { cycle })?;
    let outcome = outcomes
        .into_iter()
        .nth(winner_index)
        .flatten()
        .ok_or(Error::CycleFailure { cycle })?;
    Ok(WinnerSearch {
        winner_index,
        winner: candidates[winner_index].clone(),
        analysis: outcome.analysis,
        criterion: outcome.criterion,
        costs,
    })
}

/// Truth trajectory, observations, and initial ensemble of a twin experiment.
#[derive(Debug, Clone)]
pub struct TwinExperiment {
    pub model: Lorenz96,
    pub steps_per_cycle: usize,
    /// `truth[c]` is the true state at cycle `c`; `truth[0]` is the spun-up start.
    pub truth: Vec<DVector<f64>>,
    /// `observations[c - 1]` observes `truth[c]`.
    pub observations: Vec<ObservationBatch>,
    /// Perturbed start state shared by the free run and the ensemble mean.
    pub background: DVector<f64>,
    pub initial: Ensemble,
}

impl TwinExperiment {
    pub fn generate(cfg: &ExperimentConfig) -> Result<Self> {
        let model = cfg.model();
        let seed = cfg.experiment.seed;
        let steps = cfg.model.steps_per_cycle;
        let k = model.k;
        let x0 = model.spin_up(cfg.model.spin_up_steps)?;

        let mut truth = Vec::with_capacity(cfg.model.n_cycles + 1);
        truth.push(x0.clone());
        for _ in 0..cfg.model.n_cycles {
            let next = model.integrate(truth.last().expect("nonempty"), steps)?;
            truth.push(next);
        }

        let sigma_o = cfg.filter.obs_noise_std;
        let mut obs_rng = stream(seed, &[tag::TRUTH_OBS]);
        let observations = truth[1..]
            .iter()
            .map(|x| {
                let y = DVector::from_fn(k, |i, _| {
                    let z: f64 = obs_rng.sample(StandardNormal);
                    x[i] + sigma_o * z
                });
                ObservationBatch::identity(y, cfg.obs_variance())
            })
            .collect::<Result<Vec<_>>>()?;

        let sigma_b = cfg.filter.background_std_fraction * x0.abs().mean();
        let mut init_rng = stream(seed, &[tag::INIT_ENSEMBLE]);
        let mut noise = |n: usize| -> DVector<f64> {
            DVector::from_fn(n, |_, _| sigma_b * init_rng.sample::<f64, _>(StandardNormal))
        };
        let background = &x0 + noise(k);
        let members: Vec<DVector<f64>> =
            (0..cfg.filter.n_ens).map(|_| &background + noise(k)).collect();
        let initial = Ensemble::from_columns(&members, 0)?;

        Ok(TwinExperiment {
            model,
            steps_per_cycle: steps,
            truth,
            observations,
            background,
            initial,
        })
    }

    pub fn n_cycles(&self) -> usize {
        self.observations.len()
    }

    pub fn obs(&self, cycle: usize) -> &ObservationBatch {
        &self.observations[cycle - 1]
    }

    fn forecast(&self, ens: &Ensemble, cycle: usize) -> Result<Ensemble> {
        let mut start = ens.clone();
        start.time_index = cycle;
        enkf::forecast(&self.model, &start, self.steps_per_cycle)
    }
}

/// Per-training-cycle view passed to an observer of [`run_experiment_with`].
pub struct TrainingCycleView<'a> {
    pub cycle: usize,
    pub forecast: &'a Ensemble,
    pub obs: &'a ObservationBatch,
    pub candidates: &'a [Radii],
    pub search: &'a WinnerSearch,
}

#[derive(Debug, Clone)]
pub struct AdaptiveRun {
    pub records: Vec<TrainingRecord>,
    pub results: Vec<CycleResult>,
    pub forest: Forest,
    pub layout: FeatureLayout,
}

fn settings(cfg: &ExperimentConfig) -> AnalysisSettings {
    AnalysisSettings {
        taper: cfg.localization.taper,
        filter: cfg.filter_config(),
        weights: cfg.weights(),
    }
}

fn phase_of(cfg: &ExperimentConfig, cycle: usize) -> Phase {
    if cycle <= cfg.n_train() {
        Phase::Training
    } else {
        Phase::Testing
    }
}

fn cycle_result(
    twin: &TwinExperiment,
    cycle: usize,
    phase: Phase,
    radius_used: Radii,
    fc: &Ensemble,
    outcome: &CandidateOutcome,
) -> Result<CycleResult> {
    let obs = twin.obs(cycle);
    let truth = &twin.truth[cycle];
    let fc_mean = fc.mean();
    let an_mean = outcome.analysis.mean();
    let result = CycleResult {
        cycle,
        phase,
        radius_used,
        forecast_rmse_true: metrics::rmse(&fc_mean, truth)?,
        forecast_rmse_obs: metrics::obs_rmse(&fc_mean, obs)?,
        analysis_rmse_true: metrics::rmse(&an_mean, truth)?,
        analysis_rmse_obs: outcome.criterion.rmse_obs,
        analysis_kl: outcome.criterion.kl,
        criterion_value: outcome.criterion.value,
    };
    let finite = [
        result.forecast_rmse_true,
        result.forecast_rmse_obs,
        result.analysis_rmse_true,
        result.analysis_rmse_obs,
        result.criterion_value,
    ]
    .iter()
    .all(|v| v.is_finite());
    if finite {
        Ok(result)
    } else {
        Err(Error::Divergence {
            cycle,
            member: None,
        })
    }
}

fn training_matrices(records: &[TrainingRecord], pool: &RadiusPool) -> (DMatrix<f64>, DMatrix<f64>) {
    let n_feat = records[0].features.len();
    let targets: Vec<Vec<f64>> = records.iter().map(|r| pool.target(&r.winner)).collect();
    let n_tgt = targets[0].len();
    let x = DMatrix::from_fn(records.len(), n_feat, |i, j| records[i].features.values[j]);
    let y = DMatrix::from_fn(records.len(), n_tgt, |i, j| targets[i][j]);
    (x, y)
}

/// Fit a forest on training records, attaching feature names.
pub fn fit_forest(
    records: &[TrainingRecord],
    pool: &RadiusPool,
    cfg: &ExperimentConfig,
    layout: &FeatureLayout,
) -> Result<Forest> {
    if records.is_empty() {
        return Err(Error::InsufficientData { needed: 1, got: 0 });
    }
    let (x, y) = training_matrices(records, pool);
    Forest::fit(&x, &y, &cfg.forest_config())?.with_feature_names(layout.names())
}

/// Full adaptive run: winner search while training, forest prediction after.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<AdaptiveRun> {
    run_experiment_with(cfg, |_| {})
}

/// As [`run_experiment`], calling `observer` after each training-cycle search.
pub fn run_experiment_with(
    cfg: &ExperimentConfig,
    mut observer: impl FnMut(&TrainingCycleView<'_>),
) -> Result<AdaptiveRun> {
    cfg.validate()?;
    let twin = TwinExperiment::generate(cfg)?;
    let layout = cfg.feature_layout()?;
    let pool = cfg.pool();
    let settings = settings(cfg);
    let seed = cfg.experiment.seed;
    let k = twin.model.k;

    let mut records = Vec::with_capacity(cfg.n_train());
    let mut results = Vec::with_capacity(twin.n_cycles());
    let mut forest: Option<Forest> = None;
    let mut ens = twin.initial.clone();

    for cycle in 1..=twin.n_cycles() {
        let fc = twin.forecast(&ens, cycle)?;
        let obs = twin.obs(cycle);
        let phase = phase_of(cfg, cycle);
        let features =
            extract_features(&fc, obs, &layout, &mut stream(seed, &[tag::FEATURE_TIES, cycle as u64]))?;

        let (radius, outcome) = match phase {
            Phase::Training => {
                let candidates = pool.propose_candidates(cycle, k);
                let search = winner_search(&fc, obs, &candidates, &settings, cycle)?;
                observer(&TrainingCycleView {
                    cycle,
                    forecast: &fc,
                    obs,
                    candidates: &candidates,
                    search: &search,
                });
                records.push(TrainingRecord {
                    cycle,
                    features,
                    winner: search.winner.clone(),
                    winner_cost: search.criterion.value,
                });
                let outcome = CandidateOutcome {
                    analysis: search.analysis,
                    criterion: search.criterion,
                };
                (search.winner, outcome)
            }
            Phase::Testing => {
                if forest.is_none() {
                    forest = Some(fit_forest(&records, &pool, cfg, &layout)?);
                }
                let model = forest.as_ref().expect("fitted above");
                let radius = pool.snap(&model.predict(&features.values)?, k)?;
                let outcome =
                    evaluate_candidate(&fc, &fc.covariance(), obs, &radius, &settings, cycle, 0)?;
                (radius, outcome)
            }
        };

        results.push(cycle_result(&twin, cycle, phase, radius, &fc, &outcome)?);
        ens = outcome.analysis.inflate(cfg.filter.inflation)?;
    }

    let forest = match forest {
        Some(f) => f,
        None => fit_forest(&records, &pool, cfg, &layout)?,
    };
    Ok(AdaptiveRun {
        records,
        results,
        forest,
        layout,
    })
}

/// Baseline EnKF with a constant radius over the same twin experiment.
pub fn run_fixed_radius(cfg: &ExperimentConfig, radius: &Radii) -> Result<Vec<CycleResult>> {
    cfg.validate()?;
    let twin = TwinExperiment::generate(cfg)?;
    run_fixed_on(cfg, &twin, radius)
}

fn run_fixed_on(cfg: &ExperimentConfig, twin: &TwinExperiment, radius: &Radii) -> Result<Vec<CycleResult>> {
    radius.validate(twin.model.k)?;
    let settings = settings(cfg);
    let mut results = Vec::with_capacity(twin.n_cycles());
    let mut ens = twin.initial.clone();
    for cycle in 1..=twin.n_cycles() {
        let fc = twin.forecast(&ens, cycle)?;
        let obs = twin.obs(cycle);
        let outcome = evaluate_candidate(&fc, &fc.covariance(), obs, radius, &settings, cycle, 0)?;
        results.push(cycle_result(twin, cycle, phase_of(cfg, cycle), radius.clone(), &fc, &outcome)?);
        ens = outcome.analysis.inflate(cfg.filter.inflation)?;
    }
    Ok(results)
}

/// RMSE against truth of the unassimilated background trajectory, per cycle.
pub fn free_run(cfg: &ExperimentConfig) -> Result<Vec<f64>> {
    let twin = TwinExperiment::generate(cfg)?;
    let mut x = twin.background.clone();
    let mut out = Vec::with_capacity(twin.n_cycles());
    for cycle in 1..=twin.n_cycles() {
        x = twin
            .model
            .integrate(&x, twin.steps_per_cycle)
            .map_err(|_| Error::Divergence { cycle, member: None })?;
        out.push(metrics::rmse(&x, &twin.truth[cycle])?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepEntry {
    pub radius: f64,
    /// Mean analysis RMSE over the scoring window; `None` if the run diverged.
    pub mean_analysis_rmse: Option<f64>,
    pub mean_forecast_rmse: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    /// First cycle of the scoring window (the second half of the run).
    pub window_start: usize,
    pub entries: Vec<SweepEntry>,
    pub best_radius: f64,
}

/// Mean of `f` over results with `cycle >= start`.
pub fn window_mean(results: &[CycleResult], start: usize, f: impl Fn(&CycleResult) -> f64) -> f64 {
    let vals: Vec<f64> = results.iter().filter(|r| r.cycle >= start).map(f).collect();
    vals.iter().sum::<f64>() / vals.len() as f64
}

/// Run every scalar candidate of the pool as a fixed radius and rank them by
/// mean analysis RMSE over the second half of the cycles.
pub fn sweep_fixed(cfg: &ExperimentConfig) -> Result<SweepResult> {
    cfg.validate()?;
    let twin = TwinExperiment::generate(cfg)?;
    let window_start = twin.n_cycles() / 2 + 1;
    let entries: Vec<SweepEntry> = cfg
        .pool
        .scalar_candidates
        .par_iter()
        .map(|&r| match run_fixed_on(cfg, &twin, &Radii::Scalar(r)) {
            Ok(res) => Ok(SweepEntry {
                radius: r,
                mean_analysis_rmse: Some(window_mean(&res, window_start, |c| c.analysis_rmse_true)),
                mean_forecast_rmse: Some(window_mean(&res, window_start, |c| c.forecast_rmse_true)),
            }),
            Err(Error::Divergence { .. } | Error::DegenerateEnsemble(_) | Error::LinearAlgebra(_)) => {
                Ok(SweepEntry {
                    radius: r,
                    mean_analysis_rmse: None,
                    mean_forecast_rmse: None,
                })
            }
            Err(e) => Err(e),
        })
        .collect::<Result<_>>()?;
    let mut best: Option<(f64, f64)> = None;
    for e in &entries {
        if let Some(m) = e.mean_analysis_rmse {
            if best.is_none_or(|(_, b)| m < b) {
                best = Some((e.radius, m));
            }
        }
    }
    let (best_radius, _) = best.ok_or(Error::Divergence {
        cycle: window_start,
        member: None,
    })?;
    Ok(SweepResult {
        window_start,
        entries,
        best_radius,
    })
}
