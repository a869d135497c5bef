//! Simulation scenarios N1–N9, B1–B3, P1–P2 and replicated studies scoring
//! true and false positives.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::family::{Family, FamilySpec};
use crate::model::Dataset;
use crate::screen::{bh_discoveries, BH_LEVEL};
use crate::selector::{initialize_gamma, rng_for, run_with_rng, SelectorConfig};

/// Standard deviation of the normal-scenario errors (N2 uses [`N2_NOISE_SD`]).
pub const NOISE_SD: f64 = 0.1;
pub const N2_NOISE_SD: f64 = 0.5;
/// Standard deviation of the perturbations δ in the N3/B1 constructions.
pub const DELTA_SD: f64 = 0.2;
pub const AR_RHO: f64 = 0.95;
/// Within-hub compound-symmetry correlation used for B3.
pub const HUB_CORRELATION: f64 = 0.3;
pub const HUB_SIZE: usize = 10;
/// Logistic coefficient of every hub neighbor in B3.
pub const HUB_COEF: f64 = 2.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ScenarioId {
    N1,
    N2,
    N3,
    N4,
    N5,
    N6,
    N7,
    N8,
    N9,
    B1,
    B2,
    B3,
    P1,
    P2,
}

impl ScenarioId {
    pub const ALL: [ScenarioId; 14] = [
        Self::N1,
        Self::N2,
        Self::N3,
        Self::N4,
        Self::N5,
        Self::N6,
        Self::N7,
        Self::N8,
        Self::N9,
        Self::B1,
        Self::B2,
        Self::B3,
        Self::P1,
        Self::P2,
    ];

    pub fn family(self) -> Family {
        match self {
            Self::B1 | Self::B2 | Self::B3 => Family::Binomial,
            Self::P1 | Self::P2 => Family::Poisson,
            _ => Family::Normal,
        }
    }

    /// True support size L.
    pub fn support_size(self) -> usize {
        match self {
            Self::N1 => 1,
            Self::N2 | Self::N3 => 8,
            Self::N4 => 14,
            Self::N5 => 20,
            Self::N6 | Self::N7 => 15,
            Self::N8 | Self::N9 => 10,
            Self::B1 | Self::P1 | Self::P2 => 7,
            Self::B2 => 10,
            Self::B3 => HUB_SIZE - 1,
        }
    }

    pub fn default_n(self) -> usize {
        match self.family() {
            Family::Normal => 100,
            _ => 120,
        }
    }
}

impl fmt::Display for ScenarioId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

impl FromStr for ScenarioId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|id| id.to_string().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::validation("sim_harness", format!("unknown scenario '{s}'")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub id: ScenarioId,
    pub n: usize,
    /// Number of generated columns. B3 drops the response node, so its Z has K − 1 columns.
    pub k: usize,
    pub rng_seed: u64,
    pub replications: usize,
}

impl ScenarioSpec {
    /// Defaults: K = 1000, 30 replications, N = 100 (normal) or 120.
    pub fn new(id: ScenarioId) -> Self {
        Self {
            id,
            n: id.default_n(),
            k: 1000,
            rng_seed: 1,
            replications: 30,
        }
    }

    pub fn l(&self) -> usize {
        self.id.support_size()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::validation("sim_harness", msg));
        let min_k = match self.id {
            ScenarioId::B2 => 105,
            ScenarioId::B3 => 2 * HUB_SIZE,
            _ => 20,
        };
        if self.k < min_k {
            return bad(format!("{} needs K ≥ {min_k}, got {}", self.id, self.k));
        }
        if self.id == ScenarioId::B3 && self.k % HUB_SIZE != 0 {
            return bad(format!("B3 needs K divisible by the hub size {HUB_SIZE}"));
        }
        if self.n < 5 {
            return bad(format!("N must be at least 5, got {}", self.n));
        }
        if self.replications == 0 {
            return bad("at least one replication is required".into());
        }
        Ok(())
    }
}

/// One simulated dataset and its true support (0-based column indices).
#[derive(Clone, Debug)]
pub struct Simulated {
    pub data: Dataset<f64>,
    pub truth: Vec<usize>,
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Overwrites `cols` with a unit-variance Gaussian AR(1) sequence across columns.
fn fill_ar1(z: &mut Array2<f64>, cols: std::ops::Range<usize>, rho: f64, rng: &mut ChaCha8Rng) {
    let innov = (1.0 - rho * rho).sqrt();
    for i in 0..z.nrows() {
        let mut prev = normal(rng);
        for (t, c) in cols.clone().enumerate() {
            if t > 0 {
                prev = rho * prev + innov * normal(rng);
            }
            z[[i, c]] = prev;
        }
    }
}

/// Z_2 = Z_1 + δ, Z_3 = −2Z_1 + δ, Z_4 = −Z_1 + δ, Z_6 = −Z_5 + δ.
fn correlate_n3(z: &mut Array2<f64>, rng: &mut ChaCha8Rng) {
    for i in 0..z.nrows() {
        let (z1, z5) = (z[[i, 0]], z[[i, 4]]);
        z[[i, 1]] = z1 + DELTA_SD * normal(rng);
        z[[i, 2]] = -2.0 * z1 + DELTA_SD * normal(rng);
        z[[i, 3]] = -z1 + DELTA_SD * normal(rng);
        z[[i, 5]] = -z5 + DELTA_SD * normal(rng);
    }
}

fn linear(z: &Array2<f64>, coefs: &[(usize, f64)]) -> Array1<f64> {
    Array1::from_shape_fn(z.nrows(), |i| coefs.iter().map(|&(c, b)| b * z[[i, c]]).sum())
}

fn logistic(eta: f64) -> f64 {
    1.0 / (1.0 + (-eta).exp())
}

/// Draws replication `rep` of `spec`; the same (spec, rep) always gives the same data.
pub fn generate(spec: &ScenarioSpec, rep: usize) -> Result<Simulated> {
    spec.validate()?;
    let mut rng = rng_for(spec.rng_seed, rep as u64);
    let (n, k) = (spec.n, spec.k);
    let mut z = Array2::from_shape_fn((n, k), |_| rng.random_range(-1.0..=1.0));
    let eps_sd = if spec.id == ScenarioId::N2 { N2_NOISE_SD } else { NOISE_SD };
    let ones = |m: usize| (0..m).map(|c| (c, 1.0)).collect::<Vec<_>>();

    use ScenarioId::*;
    let (coefs, truth): (Vec<(usize, f64)>, Vec<usize>) = match spec.id {
        N1 => (ones(1), vec![0]),
        N2 => (ones(8), (0..8).collect()),
        N3 => {
            correlate_n3(&mut z, &mut rng);
            (ones(8), (0..8).collect())
        }
        N4 => {
            // Compound symmetry 0.01·I + 0.05·J on Z_2..Z_10.
            for i in 0..n {
                let common = 0.05f64.sqrt() * normal(&mut rng);
                for c in 1..10 {
                    z[[i, c]] = common + 0.1 * normal(&mut rng);
                }
            }
            (ones(14), (0..14).collect())
        }
        N5 => {
            fill_ar1(&mut z, 0..20, AR_RHO, &mut rng);
            (ones(20), (0..20).collect())
        }
        N6 => {
            let c = (0..15).map(|j| (j, normal(&mut rng))).collect();
            (c, (0..15).collect())
        }
        N7 => {
            let b = [5., 1., 2., 4., 9., 3., 4., 1., 3., 2., 4., 2., 3., 1., 7.];
            (b.iter().copied().enumerate().collect(), (0..15).collect())
        }
        N8 | N9 => {
            let b = if spec.id == N8 {
                [5., 7., 2., 4., 9., 3., 4., 1., 3., 2.]
            } else {
                [2., 2., 2., 2., 2., 2., 6., 6., 6., 6.]
            };
            let c = b
                .iter()
                .enumerate()
                .map(|(j, &v)| (j, if j < 4 { -v } else { v }))
                .collect();
            (c, (0..10).collect())
        }
        B1 => {
            correlate_n3(&mut z, &mut rng);
            (vec![(2, 2.0), (5, 2.0), (6, 2.0)], (0..7).collect())
        }
        B2 => {
            fill_ar1(&mut z, 0..5, AR_RHO, &mut rng);
            fill_ar1(&mut z, 100..105, AR_RHO, &mut rng);
            (vec![(0, 2.0), (100, 2.0)], (0..5).chain(100..105).collect())
        }
        B3 => return generate_hubs(spec, &mut rng),
        P1 | P2 => {
            if spec.id == P2 {
                fill_ar1(&mut z, 0..5, AR_RHO, &mut rng);
            }
            let b = [0.3, 0.25, -0.22, -0.19, 0.27, -0.17, -0.25];
            (b.iter().copied().enumerate().collect(), (0..7).collect())
        }
    };

    let eta = linear(&z, &coefs);
    let y = match spec.id.family() {
        Family::Normal => eta.mapv(|e| e + eps_sd * normal(&mut rng)),
        Family::Binomial => eta.mapv(|e| f64::from(u8::from(rng.random_bool(logistic(e))))),
        Family::Poisson => eta.mapv(|e| {
            let lambda = (3.0 + e).exp();
            Poisson::new(lambda).expect("positive rate").sample(&mut rng)
        }),
    };
    let spec_f = FamilySpec::unit_weights(spec.id.family(), n);
    let data = Dataset::unnamed(y, Array2::ones((n, 1)), z, spec_f)?;
    Ok(Simulated { data, truth })
}

/// K/HUB_SIZE hubs of Gaussian nodes with compound-symmetry correlation; the
/// first node of the first hub becomes the 0/1 response of a logistic model
/// on the other nodes of its hub and is dropped from Z.
fn generate_hubs(spec: &ScenarioSpec, rng: &mut ChaCha8Rng) -> Result<Simulated> {
    let (n, k) = (spec.n, spec.k);
    let rho = HUB_CORRELATION;
    let mut full = Array2::<f64>::zeros((n, k));
    for i in 0..n {
        for hub in 0..k / HUB_SIZE {
            let common = rho.sqrt() * normal(rng);
            for node in 0..HUB_SIZE {
                full[[i, hub * HUB_SIZE + node]] = common + (1.0 - rho).sqrt() * normal(rng);
            }
        }
    }
    let y = Array1::from_shape_fn(n, |i| {
        let eta: f64 = (1..HUB_SIZE).map(|c| HUB_COEF * full[[i, c]]).sum();
        f64::from(u8::from(rng.random_bool(logistic(eta))))
    });
    let z = full.slice(ndarray::s![.., 1..]).to_owned();
    let truth = (0..HUB_SIZE - 1).collect();
    let data = Dataset::unnamed(y, Array2::ones((n, 1)), z, FamilySpec::unit_weights(Family::Binomial, n))?;
    Ok(Simulated { data, truth })
}

/// (TP, FP) of a selection against the truth.
pub fn score(selected: &[usize], truth: &[usize]) -> (usize, usize) {
    let tp = selected.iter().filter(|k| truth.contains(k)).count();
    (tp, selected.len() - tp)
}

/// One-at-a-time marginal GLM tests with Benjamini–Hochberg at `level`.
pub fn bh_baseline(data: &Dataset<f64>, level: f64) -> Result<Vec<usize>> {
    Ok(bh_discoveries(data, level)?.into_iter().map(|(k, _)| k).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Replication {
    pub rep: usize,
    /// (TP, FP) of the selector; `None` if the fit failed.
    pub selector: Option<(usize, usize)>,
    pub baseline: Option<(usize, usize)>,
    pub converged: bool,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: String,
    pub median_tp: f64,
    pub median_fp: f64,
    /// Replications that contributed to the medians.
    pub completed: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudyResult {
    pub spec: ScenarioSpec,
    pub l: usize,
    pub replications: Vec<Replication>,
    pub methods: Vec<MethodSummary>,
}

/// Which methods a study runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Methods {
    pub selector: bool,
    pub baseline: bool,
}

impl Default for Methods {
    fn default() -> Self {
        Self {
            selector: true,
            baseline: true,
        }
    }
}

pub const SELECTOR_LABEL: &str = "SEMMS";
pub const BASELINE_LABEL: &str = "FDR";

/// Generates, fits and scores every replication (in parallel) and reports medians.
pub fn run_study(spec: &ScenarioSpec, config: &SelectorConfig) -> Result<StudyResult> {
    run_study_with(spec, config, Methods::default())
}

pub fn run_study_with(spec: &ScenarioSpec, config: &SelectorConfig, methods: Methods) -> Result<StudyResult> {
    spec.validate()?;
    config.validate()?;
    let replications: Vec<Replication> = (0..spec.replications)
        .into_par_iter()
        .map(|rep| replicate(spec, config, methods, rep))
        .collect();
    let mut summaries = Vec::new();
    if methods.selector {
        summaries.push(summarize(SELECTOR_LABEL, replications.iter().map(|r| r.selector)));
    }
    if methods.baseline {
        summaries.push(summarize(BASELINE_LABEL, replications.iter().map(|r| r.baseline)));
    }
    Ok(StudyResult {
        spec: spec.clone(),
        l: spec.l(),
        replications,
        methods: summaries,
    })
}

fn replicate(spec: &ScenarioSpec, config: &SelectorConfig, methods: Methods, rep: usize) -> Replication {
    let mut out = Replication {
        rep,
        selector: None,
        baseline: None,
        converged: false,
        error: None,
    };
    let sim = match generate(spec, rep) {
        Ok(s) => s,
        Err(e) => {
            out.error = Some(e.to_string());
            return out;
        }
    };
    let mut errors = Vec::new();
    if methods.selector {
        let fit = initialize_gamma(&sim.data, config).and_then(|init| {
            run_with_rng(&sim.data, config, &init, &mut rng_for(config.rng_seed, rep as u64))
        });
        match fit {
            Ok(fit) => {
                out.selector = Some(score(fit.selected(), &sim.truth));
                out.converged = fit.converged;
            }
            Err(e) => errors.push(format!("selector: {e}")),
        }
    }
    if methods.baseline {
        match bh_baseline(&sim.data, BH_LEVEL) {
            Ok(sel) => out.baseline = Some(score(&sel, &sim.truth)),
            Err(e) => errors.push(format!("baseline: {e}")),
        }
    }
    if !errors.is_empty() {
        out.error = Some(errors.join("; "));
    }
    out
}

fn summarize(method: &str, scores: impl Iterator<Item = Option<(usize, usize)>>) -> MethodSummary {
    let done: Vec<(usize, usize)> = scores.flatten().collect();
    let tp: Vec<usize> = done.iter().map(|s| s.0).collect();
    let fp: Vec<usize> = done.iter().map(|s| s.1).collect();
    MethodSummary {
        method: method.to_string(),
        median_tp: median(&tp),
        median_fp: median(&fp),
        completed: done.len(),
    }
}

/// Median of counts; NaN for an empty list.
pub fn median(values: &[usize]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_unstable();
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m] as f64
    } else {
        (v[m - 1] + v[m]) as f64 / 2.0
    }
}

impl StudyResult {
    pub fn summary(&self, method: &str) -> Option<&MethodSummary> {
        self.methods.iter().find(|m| m.method == method)
    }

    /// Tab-separated table: method, scenario, N, K, L, median TP, median FP.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("method\tscenario\tN\tK\tL\tmedian_TP\tmedian_FP\treplications\n");
        for m in &self.methods {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
                m.method, self.spec.id, self.spec.n, self.spec.k, self.l, m.median_tp, m.median_fp, m.completed
            ));
        }
        out
    }
}
