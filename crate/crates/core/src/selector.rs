//! The outer alternating-maximization loop over the labels γ.
//!
//! Each outer iteration runs the M-step for the current labels, scores all
//! 3K single-coordinate relabelings, and applies one of those that raise ℓ by
//! more than δ. For non-Gaussian families the working response is refreshed
//! (penalized quasi-likelihood style) before the M-step of every iteration.

use std::collections::HashSet;

use ndarray::{concatenate, Array1, Array2, Axis};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::family::{Family, WorkingData};
use crate::glm::fit_glm;
use crate::likelihood::{fitted_linear_predictor, m_step, CandidateScorer, MStep, PrecisionCache};
use crate::model::{Dataset, MixtureAssignment, Theta, LABELS};
use crate::scalar::Scalar;
use crate::screen::{benjamini_hochberg, marginal_tests, BH_LEVEL};

/// Absolute floor under δ so that rounding noise never counts as ascent.
pub const DELTA_GUARD: f64 = 1e-10;
/// Default neighbor correlation cutoff.
pub const NEIGHBOR_THRESHOLD: f64 = 0.75;
/// Default round cap for [`sequential_fit`].
pub const MAX_ROUNDS: usize = 10;

const PQL_MAX_ITER: usize = 25;
const PQL_TOL: f64 = 1e-6;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelectionMode {
    /// Apply the proposal with the largest improvement.
    #[default]
    Greedy,
    /// Draw a proposal with probability proportional to its improvement.
    Weighted,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitStrategy {
    /// Marginal GLM screen with Benjamini–Hochberg control; see [`initialize_gamma`].
    #[default]
    BhScreen,
    /// Every γ_k = 0. Since p_L = p_R = 0 there, no activation improves ℓ
    /// and the run stops immediately.
    AllNull,
    UserProvided(Vec<i8>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectorConfig {
    pub mode: SelectionMode,
    /// Improvement threshold δ ≥ 0.
    pub delta: f64,
    /// Outer iteration cap; `None` means 20·K.
    pub max_outer_iter: Option<usize>,
    pub rng_seed: u64,
    pub n_restarts: usize,
    pub neighbor_threshold: f64,
    pub init_strategy: InitStrategy,
    /// FDR level of the screening initializer.
    pub screen_level: f64,
}

impl Default for SelectorConfig {
    fn default() -> Self {
        Self {
            mode: SelectionMode::Greedy,
            delta: 0.0,
            max_outer_iter: None,
            rng_seed: 0,
            n_restarts: 1,
            neighbor_threshold: NEIGHBOR_THRESHOLD,
            init_strategy: InitStrategy::BhScreen,
            screen_level: BH_LEVEL,
        }
    }
}

impl SelectorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::validation("gam_selector", msg));
        if !(self.delta >= 0.0 && self.delta.is_finite()) {
            return bad(format!("delta must be a finite value ≥ 0, got {}", self.delta));
        }
        if !(0.0..=1.0).contains(&self.neighbor_threshold) {
            return bad(format!(
                "neighbor threshold must lie in [0, 1], got {}",
                self.neighbor_threshold
            ));
        }
        if self.n_restarts == 0 {
            return bad("n_restarts must be at least 1".into());
        }
        if self.max_outer_iter == Some(0) {
            return bad("max_outer_iter must be at least 1".into());
        }
        if !(self.screen_level > 0.0 && self.screen_level < 1.0) {
            return bad(format!("screen level must lie in (0, 1), got {}", self.screen_level));
        }
        Ok(())
    }
}

/// A proposal γ_k ← `label` with improvement `d`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub k: usize,
    pub label: i8,
    pub d: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Move {
    /// 1 for a plain run; the round number in a sequential fit.
    pub round: usize,
    pub iteration: usize,
    pub k: usize,
    pub from: i8,
    pub to: i8,
    pub d: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NeighborEdge {
    pub selected: usize,
    pub neighbor: usize,
    pub correlation: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct NeighborReport {
    pub threshold: f64,
    pub edges: Vec<NeighborEdge>,
    /// Selected columns together with all their neighbors, ascending.
    pub relevant: Vec<usize>,
    /// Constant columns, for which a correlation is undefined.
    pub excluded: Vec<usize>,
}

/// Ordinary GLM refit on the locked-in columns plus the selected ones.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefitSummary<T> {
    pub names: Vec<String>,
    pub coef: Vec<T>,
    pub std_err: Vec<T>,
    pub aic: T,
    pub r_squared: Option<T>,
    pub deviance: T,
    pub null_deviance: T,
    pub df_residual: usize,
}

/// Selections made in one round of [`sequential_fit`], in original column indices.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundSelection {
    pub round: usize,
    pub selected: Vec<(usize, i8)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitResult<T> {
    pub gamma_init: MixtureAssignment,
    pub gamma_final: MixtureAssignment,
    pub theta_final: Theta<T>,
    /// ℓ after the M-step of every outer iteration.
    pub loglik_trace: Vec<T>,
    pub moves: Vec<Move>,
    pub neighbor_report: NeighborReport,
    pub refit_summary: Option<RefitSummary<T>>,
    pub selected_names: Vec<String>,
    pub rounds: Vec<RoundSelection>,
    pub warnings: Vec<String>,
    pub converged: bool,
    pub iterations: usize,
}

impl<T: Scalar> FitResult<T> {
    /// Indices with γ_k ≠ 0.
    pub fn selected(&self) -> &[usize] {
        self.gamma_final.active()
    }

    pub fn final_loglik(&self) -> T {
        self.loglik_trace.last().copied().unwrap_or(T::neg_infinity())
    }

    /// Refit AIC, +∞ when no refit was possible.
    pub fn aic(&self) -> f64 {
        self.refit_summary
            .as_ref()
            .map_or(f64::INFINITY, |r| r.aic.as_f64())
    }
}

/// Result of [`multi_run`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultiRun<T> {
    pub runs: Vec<FitResult<T>>,
    /// Index of the run with the smallest refit AIC.
    pub best: usize,
    /// Columns selected by at least one run, ascending.
    pub union: Vec<usize>,
}

/// RNG for restart `stream` of a seeded fit.
pub fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Starting labels.
///
/// `bh_screen` fits every z_k alone next to X, applies Benjamini–Hochberg at
/// `screen_level` and labels each discovery with the sign of its marginal
/// coefficient. A component that is empty has p_j = 0, which no later move
/// can change, so when one sign has no discovery the strongest marginal
/// predictor of that sign is added as a seed; the loop removes it again if
/// it does not pay for itself.
pub fn initialize_gamma<T: Scalar>(data: &Dataset<T>, config: &SelectorConfig) -> Result<MixtureAssignment> {
    config.validate()?;
    let k = data.k();
    match &config.init_strategy {
        InitStrategy::AllNull => Ok(MixtureAssignment::null(k)),
        InitStrategy::UserProvided(labels) => {
            if labels.len() != k {
                return Err(Error::validation(
                    "gam_selector",
                    format!("initial assignment has {} labels for {k} predictors", labels.len()),
                ));
            }
            MixtureAssignment::new(labels.clone())
        }
        InitStrategy::BhScreen => {
            let tests = marginal_tests(data);
            let p: Vec<f64> = tests.iter().map(|t| t.p_value).collect();
            let reject = benjamini_hochberg(&p, config.screen_level)?;
            let sign = |c: f64| if c < 0.0 { -1i8 } else { 1 };
            let mut labels: Vec<i8> = (0..k)
                .map(|i| if reject[i] { sign(tests[i].coef) } else { 0 })
                .collect();
            for s in [-1i8, 1] {
                if labels.contains(&s) {
                    continue;
                }
                let best = (0..k)
                    .filter(|&i| labels[i] == 0 && tests[i].coef != 0.0 && sign(tests[i].coef) == s)
                    .min_by(|&a, &b| p[a].total_cmp(&p[b]));
                if let Some(i) = best {
                    labels[i] = s;
                }
            }
            MixtureAssignment::new(labels)
        }
    }
}

/// Picks one proposal from the improving set S.
///
/// Greedy takes the largest d, breaking ties by smallest k and then label
/// order −1, 0, +1. Weighted draws (k, j) with probability d_{j,k}/Σ d.
pub fn choose_candidate<R: Rng + ?Sized>(
    candidates: &[Candidate],
    mode: SelectionMode,
    rng: &mut R,
) -> Result<Candidate> {
    if candidates.is_empty() {
        return Err(Error::ContractViolation(
            "choose_candidate called with an empty improving set".into(),
        ));
    }
    match mode {
        SelectionMode::Greedy => Ok(*candidates
            .iter()
            .min_by(|a, b| {
                b.d.total_cmp(&a.d)
                    .then(a.k.cmp(&b.k))
                    .then(a.label.cmp(&b.label))
            })
            .expect("nonempty")),
        SelectionMode::Weighted => {
            let dist = WeightedIndex::new(candidates.iter().map(|c| c.d)).map_err(|e| {
                Error::ContractViolation(format!("improvements are not valid weights: {e}"))
            })?;
            Ok(candidates[dist.sample(rng)])
        }
    }
}

/// Runs the loop from `gamma_init` with the RNG stream 0 of `config.rng_seed`.
pub fn run<T: Scalar>(
    data: &Dataset<T>,
    config: &SelectorConfig,
    gamma_init: &MixtureAssignment,
) -> Result<FitResult<T>> {
    run_with_rng(data, config, gamma_init, &mut rng_for(config.rng_seed, 0))
}

pub fn run_with_rng<T: Scalar, R: Rng + ?Sized>(
    data: &Dataset<T>,
    config: &SelectorConfig,
    gamma_init: &MixtureAssignment,
    rng: &mut R,
) -> Result<FitResult<T>> {
    config.validate()?;
    let outcome = gam_loop(data, config, gamma_init, rng, 1)?;
    Ok(finish(data, config, outcome))
}

struct LoopOutcome<T> {
    gamma_init: MixtureAssignment,
    gamma: MixtureAssignment,
    theta: Theta<T>,
    trace: Vec<T>,
    moves: Vec<Move>,
    warnings: Vec<String>,
    converged: bool,
    iterations: usize,
}

fn gam_loop<T: Scalar, R: Rng + ?Sized>(
    data: &Dataset<T>,
    config: &SelectorConfig,
    gamma_init: &MixtureAssignment,
    rng: &mut R,
    round: usize,
) -> Result<LoopOutcome<T>> {
    if gamma_init.len() != data.k() {
        return Err(Error::validation(
            "gam_selector",
            format!("initial assignment has {} labels for {} predictors", gamma_init.len(), data.k()),
        ));
    }
    let max_iter = config.max_outer_iter.unwrap_or(20 * data.k());
    let guard = config.delta.max(DELTA_GUARD);
    let mut gamma = gamma_init.clone();
    let mut theta = Theta::initial(data.j(), &gamma);
    let mut working = if data.spec.family == Family::Normal {
        WorkingData::identity(data.y_slice(), &data.spec.prior_weights)
    } else {
        data.spec.initial_working(data.y_slice())?
    };
    let mut visited: HashSet<Vec<i8>> = HashSet::new();
    visited.insert(gamma.labels().to_vec());
    let mut trace = Vec::new();
    let mut moves = Vec::new();
    let mut warnings = Vec::new();
    let mut converged = false;
    let mut pending_fit = true;
    let mut inner_unconverged = 0usize;
    let mut clamped = false;

    for iteration in 1..=max_iter {
        let (w, fit) = fit_theta(data, &working, &gamma, &theta)?;
        working = w;
        theta = fit.theta;
        trace.push(fit.loglik);
        inner_unconverged += usize::from(!fit.converged);
        clamped |= working.clamped;
        pending_fit = false;

        let cache = PrecisionCache::build(data, &working, &gamma, theta.phi, theta.sigma2)?;
        let scorer = CandidateScorer::new(data, &working, &gamma, &theta, &cache)?;
        let scores = scorer.sweep();
        let mut improving = Vec::new();
        let mut blocked = 0usize;
        for (k, row) in scores.iter().enumerate() {
            for (slot, &label) in LABELS.iter().enumerate() {
                let d = row[slot].as_f64();
                if d > guard {
                    if visited.contains(gamma.with(k, label).labels()) {
                        blocked += 1;
                    } else {
                        improving.push(Candidate { k, label, d });
                    }
                }
            }
        }
        if improving.is_empty() {
            converged = true;
            if blocked > 0 {
                warnings.push(format!(
                    "stopped with {blocked} improving proposal(s) that would revisit earlier label states"
                ));
            }
            break;
        }
        if iteration == max_iter {
            break;
        }
        let pick = choose_candidate(&improving, config.mode, rng)?;
        moves.push(Move {
            round,
            iteration,
            k: pick.k,
            from: gamma.label(pick.k),
            to: pick.label,
            d: pick.d,
        });
        gamma.set(pick.k, pick.label);
        visited.insert(gamma.labels().to_vec());
        pending_fit = true;
    }
    if pending_fit {
        let (w, fit) = fit_theta(data, &working, &gamma, &theta)?;
        working = w;
        theta = fit.theta;
        trace.push(fit.loglik);
        clamped |= working.clamped;
    }
    if !converged {
        warnings.push(format!(
            "outer iteration cap of {max_iter} reached before the improving set emptied"
        ));
    }
    if inner_unconverged > 0 {
        warnings.push(format!(
            "{inner_unconverged} M-step(s) stopped at the inner iteration cap"
        ));
    }
    if clamped {
        warnings.push("fitted means were clamped away from the boundary of the mean domain".into());
    }
    Ok(LoopOutcome {
        gamma_init: gamma_init.clone(),
        iterations: trace.len(),
        gamma,
        theta,
        trace,
        moves,
        warnings,
        converged,
    })
}

/// M-step for fixed labels. For non-Gaussian families the working response
/// is recomputed from the fitted linear predictor and the M-step repeated
/// until the linear predictor settles.
fn fit_theta<T: Scalar>(
    data: &Dataset<T>,
    working: &WorkingData<T>,
    gamma: &MixtureAssignment,
    theta: &Theta<T>,
) -> Result<(WorkingData<T>, MStep<T>)> {
    let mut working = working.clone();
    let mut fit = m_step(data, &working, gamma, theta)?;
    if data.spec.family == Family::Normal {
        return Ok((working, fit));
    }
    let mut previous: Option<Array1<T>> = None;
    for _ in 0..PQL_MAX_ITER {
        let eta = fitted_linear_predictor(data, &working, gamma, &fit.theta)?;
        if let Some(prev) = &previous {
            let scale = T::one() + eta.iter().fold(T::zero(), |m, v| m.max(v.abs()));
            let change = (&eta - prev).iter().fold(T::zero(), |m, v| m.max(v.abs()));
            if change < T::of(PQL_TOL) * scale {
                break;
            }
        }
        let lambda: Vec<T> = eta.iter().map(|&e| data.spec.inverse_link(e)).collect();
        working = data.spec.working_response(data.y_slice(), &lambda)?;
        fit = m_step(data, &working, gamma, &fit.theta)?;
        previous = Some(eta);
    }
    Ok((working, fit))
}

fn finish<T: Scalar>(data: &Dataset<T>, config: &SelectorConfig, outcome: LoopOutcome<T>) -> FitResult<T> {
    let mut warnings = outcome.warnings;
    let (refit_summary, refit_warning) = refit(data, outcome.gamma.active());
    warnings.extend(refit_warning);
    let neighbor_report = correlated_neighbors(data, &outcome.gamma, config.neighbor_threshold);
    if !neighbor_report.excluded.is_empty() {
        warnings.push(format!(
            "{} constant putative column(s) excluded from the neighbor report",
            neighbor_report.excluded.len()
        ));
    }
    FitResult {
        selected_names: outcome
            .gamma
            .active()
            .iter()
            .map(|&k| data.z_names[k].clone())
            .collect(),
        gamma_init: outcome.gamma_init,
        gamma_final: outcome.gamma,
        theta_final: outcome.theta,
        loglik_trace: outcome.trace,
        moves: outcome.moves,
        neighbor_report,
        refit_summary,
        rounds: Vec::new(),
        warnings,
        converged: outcome.converged,
        iterations: outcome.iterations,
    }
}

/// Ordinary GLM on [X, Z_selected].
pub fn refit<T: Scalar>(data: &Dataset<T>, selected: &[usize]) -> (Option<RefitSummary<T>>, Option<String>) {
    let mut cols = vec![data.x.view()];
    let sel: Vec<_> = selected.iter().map(|&k| data.z.column(k).insert_axis(Axis(1))).collect();
    cols.extend(sel.iter().cloned());
    let design: Array2<T> = concatenate(Axis(1), &cols).expect("matching rows");
    let mut names = data.x_names.clone();
    names.extend(selected.iter().map(|&k| data.z_names[k].clone()));
    if design.ncols() >= data.n() {
        return (
            None,
            Some(format!(
                "refit skipped: {} columns for {} observations",
                design.ncols(),
                data.n()
            )),
        );
    }
    match fit_glm(design.view(), data.y_slice(), data.offset.view(), &data.spec, &names) {
        Ok(fit) => {
            let warning = (!fit.converged).then(|| "refit GLM did not converge".to_string());
            (
                Some(RefitSummary {
                    names,
                    coef: fit.coef,
                    std_err: fit.std_err,
                    aic: fit.aic,
                    r_squared: fit.r_squared,
                    deviance: fit.deviance,
                    null_deviance: fit.null_deviance,
                    df_residual: fit.df_residual,
                }),
                warning,
            )
        }
        Err(e) => (None, Some(format!("refit failed: {e}"))),
    }
}

/// Lists, for every selected k, the putative columns j ≠ k with
/// |corr(z_k, z_j)| ≥ `threshold`.
pub fn correlated_neighbors<T: Scalar>(
    data: &Dataset<T>,
    gamma: &MixtureAssignment,
    threshold: f64,
) -> NeighborReport {
    let n = data.n();
    let k_total = data.k();
    // Centered, unit-norm columns; None for constant columns.
    let unit: Vec<Option<Vec<f64>>> = (0..k_total)
        .into_par_iter()
        .map(|k| {
            let col: Vec<f64> = data.z.column(k).iter().map(|v| v.as_f64()).collect();
            let mean = col.iter().sum::<f64>() / n as f64;
            let centered: Vec<f64> = col.iter().map(|v| v - mean).collect();
            let norm = centered.iter().map(|v| v * v).sum::<f64>().sqrt();
            let scale = col.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            (norm > 1e-12 * scale.max(f64::MIN_POSITIVE) * (n as f64).sqrt())
                .then(|| centered.iter().map(|v| v / norm).collect())
        })
        .collect();
    let excluded: Vec<usize> = (0..k_total).filter(|&k| unit[k].is_none()).collect();
    let tol = 1e-12;
    let mut edges = Vec::new();
    for &k in gamma.active() {
        let Some(a) = &unit[k] else { continue };
        let row: Vec<NeighborEdge> = (0..k_total)
            .into_par_iter()
            .filter(|&j| j != k)
            .filter_map(|j| {
                let b = unit[j].as_ref()?;
                let corr: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                let corr = corr.clamp(-1.0, 1.0);
                (corr.abs() >= threshold - tol).then_some(NeighborEdge {
                    selected: k,
                    neighbor: j,
                    correlation: corr,
                })
            })
            .collect();
        edges.extend(row);
    }
    let mut relevant: Vec<usize> = gamma
        .active()
        .iter()
        .copied()
        .chain(edges.iter().map(|e| e.neighbor))
        .collect();
    relevant.sort_unstable();
    relevant.dedup();
    NeighborReport {
        threshold,
        edges,
        relevant,
        excluded,
    }
}

/// Independent runs on RNG streams 0, 1, … of `config.rng_seed`, in parallel.
pub fn multi_run<T: Scalar>(data: &Dataset<T>, config: &SelectorConfig) -> Result<MultiRun<T>> {
    config.validate()?;
    let init = initialize_gamma(data, config)?;
    let runs = (0..config.n_restarts)
        .into_par_iter()
        .map(|r| run_with_rng(data, config, &init, &mut rng_for(config.rng_seed, r as u64)))
        .collect::<Result<Vec<_>>>()?;
    let best = (0..runs.len())
        .min_by(|&a, &b| runs[a].aic().total_cmp(&runs[b].aic()).then(a.cmp(&b)))
        .expect("at least one run");
    let mut union: Vec<usize> = runs.iter().flat_map(|r| r.selected().to_vec()).collect();
    union.sort_unstable();
    union.dedup();
    Ok(MultiRun { runs, best, union })
}

/// Repeats {initialize, run, promote the selected columns into X} until a
/// round selects nothing or `max_rounds` is reached.
///
/// The returned labels, refit and neighbor report refer to the original
/// columns and cover the selections of all rounds; `theta_final` comes from
/// the last round, whose locked-in design includes every promoted column.
pub fn sequential_fit<T: Scalar>(
    data: &Dataset<T>,
    config: &SelectorConfig,
    max_rounds: usize,
) -> Result<FitResult<T>> {
    config.validate()?;
    if max_rounds == 0 {
        return Err(Error::validation("gam_selector", "max_rounds must be at least 1"));
    }
    let mut rng = rng_for(config.rng_seed, 0);
    let mut current = data.clone();
    let mut original: Vec<usize> = (0..data.k()).collect();
    let mut labels = vec![0i8; data.k()];
    let mut rounds = Vec::new();
    let mut moves = Vec::new();
    let mut trace = Vec::new();
    let mut warnings = Vec::new();
    let mut gamma_init = None;
    let mut theta = None;
    let mut converged = true;
    let mut iterations = 0;

    for round in 1..=max_rounds {
        let init = initialize_gamma(&current, config)?;
        let outcome = gam_loop(&current, config, &init, &mut rng, round)?;
        if gamma_init.is_none() {
            let mut g = MixtureAssignment::null(data.k());
            for &k in init.active() {
                g.set(original[k], init.label(k));
            }
            gamma_init = Some(g);
        }
        moves.extend(outcome.moves.iter().map(|m| Move {
            k: original[m.k],
            ..*m
        }));
        trace.extend(outcome.trace.iter().copied());
        warnings.extend(outcome.warnings.iter().map(|w| format!("round {round}: {w}")));
        converged &= outcome.converged;
        iterations += outcome.iterations;
        theta = Some(outcome.theta.clone());
        let selected: Vec<usize> = outcome.gamma.active().to_vec();
        if selected.is_empty() {
            break;
        }
        rounds.push(RoundSelection {
            round,
            selected: selected
                .iter()
                .map(|&k| (original[k], outcome.gamma.label(k)))
                .collect(),
        });
        for &k in &selected {
            labels[original[k]] = outcome.gamma.label(k);
        }
        if selected.len() == current.k() {
            warnings.push(format!("round {round} selected every remaining putative column"));
            break;
        }
        if round == max_rounds {
            warnings.push(format!("stopped after the round cap of {max_rounds}"));
            break;
        }
        let (next, promoted_warnings) = promote(&current, &selected)?;
        warnings.extend(promoted_warnings);
        original = (0..current.k())
            .filter(|k| !selected.contains(k))
            .map(|k| original[k])
            .collect();
        current = next;
    }

    let gamma_final = MixtureAssignment::new(labels)?;
    let outcome = LoopOutcome {
        gamma_init: gamma_init.expect("at least one round"),
        gamma: gamma_final,
        theta: theta.expect("at least one round"),
        trace,
        moves,
        warnings,
        converged,
        iterations,
    };
    let mut result = finish(data, config, outcome);
    result.rounds = rounds;
    Ok(result)
}

/// Moves the `selected` putative columns into X.
fn promote<T: Scalar>(data: &Dataset<T>, selected: &[usize]) -> Result<(Dataset<T>, Vec<String>)> {
    let keep: Vec<usize> = (0..data.k()).filter(|k| !selected.contains(k)).collect();
    let mut x_names = data.x_names.clone();
    let mut warnings = Vec::new();
    for &k in selected {
        let mut name = data.z_names[k].clone();
        let taken = |n: &str, x: &[String]| x.iter().any(|m| m == n) || keep.iter().any(|&j| data.z_names[j] == n);
        if taken(&name, &x_names) {
            let base = name.clone();
            let mut i = 1;
            while taken(&name, &x_names) {
                name = format!("{base}_locked{i}");
                i += 1;
            }
            warnings.push(format!("promoted column '{base}' renamed to '{name}'"));
        }
        x_names.push(name);
    }
    let mut cols = vec![data.x.view()];
    let sel: Vec<_> = selected.iter().map(|&k| data.z.column(k).insert_axis(Axis(1))).collect();
    cols.extend(sel.iter().cloned());
    let x = concatenate(Axis(1), &cols).expect("matching rows");
    let z = data.z.select(Axis(1), &keep);
    let z_names = keep.iter().map(|&k| data.z_names[k].clone()).collect();
    let next = Dataset::new(data.y.clone(), x, z, x_names, z_names, data.spec.clone())?
        .with_offset(data.offset.clone())?;
    Ok((next, warnings))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn greedy_picks_argmax() {
        let s = [
            Candidate { k: 1, label: 1, d: 0.5 },
            Candidate { k: 2, label: 1, d: 0.9 },
        ];
        let pick = choose_candidate(&s, SelectionMode::Greedy, &mut rng_for(0, 0)).unwrap();
        assert_eq!((pick.k, pick.label), (2, 1));
    }

    #[test]
    fn greedy_ties_break_on_index_then_label() {
        let s = [
            Candidate { k: 5, label: 1, d: 0.7 },
            Candidate { k: 3, label: -1, d: 0.7 },
        ];
        let pick = choose_candidate(&s, SelectionMode::Greedy, &mut rng_for(0, 0)).unwrap();
        assert_eq!((pick.k, pick.label), (3, -1));
        let s = [
            Candidate { k: 3, label: 1, d: 0.7 },
            Candidate { k: 3, label: -1, d: 0.7 },
        ];
        let pick = choose_candidate(&s, SelectionMode::Greedy, &mut rng_for(0, 0)).unwrap();
        assert_eq!(pick.label, -1);
    }

    #[test]
    fn weighted_frequencies_follow_improvements() {
        let s = [
            Candidate { k: 1, label: 1, d: 0.5 },
            Candidate { k: 2, label: 1, d: 0.9 },
        ];
        let mut rng = rng_for(42, 0);
        let hits = (0..10_000)
            .filter(|_| choose_candidate(&s, SelectionMode::Weighted, &mut rng).unwrap().k == 2)
            .count();
        let freq = hits as f64 / 10_000.0;
        assert!((freq - 0.9 / 1.4).abs() < 0.02, "frequency {freq}");
    }

    #[test]
    fn empty_improving_set_is_a_contract_violation() {
        let err = choose_candidate(&[], SelectionMode::Greedy, &mut rng_for(0, 0)).unwrap_err();
        assert!(matches!(err, Error::ContractViolation(_)));
    }

    #[test]
    fn config_validation() {
        let mut c = SelectorConfig::default();
        assert!(c.validate().is_ok());
        c.delta = -1.0;
        assert!(c.validate().is_err());
        c.delta = 0.0;
        c.neighbor_threshold = 1.5;
        assert!(c.validate().is_err());
    }
}
