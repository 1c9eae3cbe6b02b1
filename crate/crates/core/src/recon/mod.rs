//! Two-step, modified two-step and one-step reconstruction.
//!
//! Step 1 recovers the signal part `Ũ^s_q = Σ_{i≤L} (ψᵢᵗJ_q/μᵢ) φᵢ` of the
//! intermediate field for every source. Step 2 fits the coefficient to the
//! state equation `U = B(Σx) U - F`. The modified variant adds one noise
//! correction `Φⁿγ` shared by all sources, and the one-step variant optimizes
//! `γ` and `Σx` jointly.
//!
//! Every state residual is affine in `Σx` once `z = T⁻¹Ũ` is known
//! (`(B - I)Ũ - F = M₀z + Σx ⊙ Dz - Ũ - F`), so all streaming solves happen
//! before the optimization starts.

pub mod bfgs;

use std::sync::Once;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::medium::OpticalField;
use crate::operators::Factorization;
use crate::par;
use crate::spectral::{select_l, LPolicy, SvdCache};
use crate::transport::dot;

pub use bfgs::{minimize, BfgsOptions, BfgsReport, BfgsStatus};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    #[default]
    TwoStep,
    ModifiedTwoStep,
    OneStep,
}

impl Algorithm {
    pub fn name(self) -> &'static str {
        match self {
            Algorithm::TwoStep => "two_step",
            Algorithm::ModifiedTwoStep => "modified_two_step",
            Algorithm::OneStep => "one_step",
        }
    }
}

/// How the coefficient is fitted in step 2.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Step2Solver {
    #[default]
    Bfgs,
    /// Exact least squares. The step-2 objective decouples by cell, so the
    /// normal equations are diagonal.
    Direct,
}

/// Starting point for the one-step optimization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OneStepStart {
    pub gamma: Vec<f64>,
    pub sigma: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReconConfig {
    pub algorithm: Algorithm,
    pub truncation: LPolicy,
    pub optimizer: BfgsOptions,
    pub step2_solver: Step2Solver,
    /// Optional lower clamp on coefficient iterates.
    pub positivity_floor: Option<f64>,
    /// Uniform starting value. When absent the best constant fit is used.
    pub initial_value: Option<f64>,
    /// Cell-wise starting field; takes precedence over `initial_value`.
    #[serde(skip)]
    pub initial_sigma: Option<Vec<f64>>,
    /// One-step starting point; when absent the modified two-step result is used.
    #[serde(skip)]
    pub one_step_start: Option<OneStepStart>,
}

impl Default for ReconConfig {
    fn default() -> Self {
        Self {
            algorithm: Algorithm::TwoStep,
            truncation: LPolicy::Fixed { value: 50 },
            optimizer: BfgsOptions::default(),
            step2_solver: Step2Solver::Bfgs,
            positivity_floor: None,
            initial_value: None,
            initial_sigma: None,
            one_step_start: None,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ReconResult {
    pub algorithm: Algorithm,
    pub l: usize,
    pub rank: usize,
    /// Full medium: the estimate for the target coefficient plus the known one.
    pub sigma: OpticalField,
    pub beta_s: Vec<Vec<f64>>,
    pub gamma_n: Vec<f64>,
    pub objective_history: Vec<f64>,
    pub status: BfgsStatus,
    pub iterations: usize,
    /// Joint objective at the returned point (modified two-step and one-step).
    pub joint_objective: Option<f64>,
    pub error_vs_truth: Option<f64>,
}

fn check_truncation(cache: &SvdCache, l: usize) -> Result<usize> {
    let rank = cache.rank();
    if l == 0 || l > rank {
        return Err(Error::Truncation { requested: l, rank });
    }
    Ok(rank)
}

fn norm_sq(v: &[f64]) -> f64 {
    dot(v, v)
}

/// Signal coefficients `β_i = ψᵢᵗJ/μᵢ` (`i ≤ L`) and `Ũ^s = Σ βᵢ φᵢ`.
pub fn step1_signal(j: &[f64], cache: &SvdCache, l: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    check_truncation(cache, l)?;
    check_data_len(j, cache)?;
    let beta: Vec<f64> = (0..l)
        .map(|i| dot(cache.psi.column(i).as_slice(), j) / cache.mu[i])
        .collect();
    let mut u = vec![0.0; cache.dim()];
    for (i, &b) in beta.iter().enumerate() {
        for (x, p) in u.iter_mut().zip(cache.phi.column(i).iter()) {
            *x += b * p;
        }
    }
    Ok((beta, u))
}

fn check_data_len(j: &[f64], cache: &SvdCache) -> Result<()> {
    if j.len() != cache.n_detectors() {
        return Err(Error::DimensionMismatch {
            context: "data vector",
            expected: cache.n_detectors(),
            actual: j.len(),
        });
    }
    Ok(())
}

/// `ψ_{L+i}ᵗ J̃_q` with `J̃_q = J_q - A Ũ^s_q`, for every source and noise mode.
fn noise_projections(data: &[Vec<f64>], betas: &[Vec<f64>], cache: &SvdCache, l: usize, rank: usize) -> Vec<Vec<f64>> {
    data.iter()
        .zip(betas)
        .map(|(j, beta)| {
            let mut jt = j.clone();
            for (i, b) in beta.iter().enumerate() {
                let s = cache.mu[i] * b;
                jt.iter_mut()
                    .zip(cache.psi.column(i).iter())
                    .for_each(|(x, p)| *x -= s * p);
            }
            (l..rank).map(|i| dot(cache.psi.column(i).as_slice(), &jt)).collect()
        })
        .collect()
}

fn data_weights(data: &[Vec<f64>]) -> Result<Vec<f64>> {
    data.iter()
        .map(|j| {
            let n2 = norm_sq(j);
            if n2 > 0.0 {
                Ok(1.0 / n2)
            } else {
                Err(Error::invalid("a data vector is identically zero"))
            }
        })
        .collect()
}

/// `Σ_q ‖AΦⁿγ - J̃_q‖² / ‖J_q‖²`, evaluated through the SVD.
pub fn noise_objective(
    gamma: &[f64],
    data: &[Vec<f64>],
    betas: &[Vec<f64>],
    cache: &SvdCache,
    l: usize,
) -> Result<f64> {
    let rank = check_truncation(cache, l)?;
    if gamma.len() != rank - l {
        return Err(Error::DimensionMismatch {
            context: "noise coefficients",
            expected: rank - l,
            actual: gamma.len(),
        });
    }
    let weights = data_weights(data)?;
    let mut total = 0.0;
    for (q, j) in data.iter().enumerate() {
        let mut resid = j.clone();
        for (i, b) in betas[q].iter().enumerate() {
            let s = cache.mu[i] * b;
            resid
                .iter_mut()
                .zip(cache.psi.column(i).iter())
                .for_each(|(x, p)| *x -= s * p);
        }
        for (k, g) in gamma.iter().enumerate() {
            let s = cache.mu[l + k] * g;
            resid
                .iter_mut()
                .zip(cache.psi.column(l + k).iter())
                .for_each(|(x, p)| *x -= s * p);
        }
        total += weights[q] * norm_sq(&resid);
    }
    Ok(total)
}

static NORMALIZER_NOTE: Once = Once::new();

/// The shared noise coefficients minimizing [`noise_objective`].
pub fn step1_noise(data: &[Vec<f64>], betas: &[Vec<f64>], cache: &SvdCache, l: usize) -> Result<Vec<f64>> {
    let rank = check_truncation(cache, l)?;
    if data.is_empty() || data.len() != betas.len() {
        return Err(Error::invalid("step1_noise needs one β vector per data vector"));
    }
    for j in data {
        check_data_len(j, cache)?;
    }
    let weights = data_weights(data)?;
    let proj = noise_projections(data, betas, cache, l, rank);
    let total_weight: f64 = weights.iter().sum();
    let gamma: Vec<f64> = (0..rank - l)
        .map(|i| {
            let s: f64 = proj.iter().zip(&weights).map(|(p, w)| w * p[i]).sum();
            s / (cache.mu[l + i] * total_weight)
        })
        .collect();
    if total_weight != 1.0 && !gamma.is_empty() {
        NORMALIZER_NOTE.call_once(|| {
            log::info!(
                "noise average uses the normalized stationary point; the unnormalized sum is {:.3e} times larger",
                total_weight
            )
        });
    }
    Ok(gamma)
}

/// Per-source state residuals `r_q = c_q + Σᵢγᵢcᵢ + Σx ⊙ (d_q + Σᵢγᵢdᵢ)`,
/// weighted and summed. With no noise basis this is the step-2 objective.
pub struct StateResidual {
    n_cells: usize,
    c0: Vec<Vec<f64>>,
    d0: Vec<Vec<f64>>,
    weights: Vec<f64>,
    cn: Vec<Vec<f64>>,
    dn: Vec<Vec<f64>>,
}

impl StateResidual {
    /// `base[q]` is the fixed part of `Ũ_q`, `noise_basis` the vectors
    /// multiplied by `γ`.
    pub fn new(fact: &Factorization, base: &[Vec<f64>], weights: Vec<f64>, noise_basis: &[Vec<f64>]) -> Result<Self> {
        let dim = fact.dim();
        if base.len() != fact.sources.len() || weights.len() != base.len() {
            return Err(Error::invalid(format!(
                "expected {} intermediate fields and weights, got {} and {}",
                fact.sources.len(),
                base.len(),
                weights.len()
            )));
        }
        if let Some(bad) = base.iter().chain(noise_basis).find(|u| u.len() != dim) {
            return Err(Error::DimensionMismatch {
                context: "intermediate field",
                expected: dim,
                actual: bad.len(),
            });
        }
        let op = fact.streaming();
        let per_source = par::map_indices(base.len(), |q| {
            let z = op.solve(&base[q]);
            let mut c = fact.base_part(&z);
            c.iter_mut()
                .zip(&base[q])
                .zip(fact.sources[q].iter())
                .for_each(|((x, u), f)| *x -= u + f);
            (c, fact.sensitivity(&z))
        });
        let per_mode = par::map_indices(noise_basis.len(), |i| {
            let z = op.solve(&noise_basis[i]);
            let mut c = fact.base_part(&z);
            c.iter_mut().zip(&noise_basis[i]).for_each(|(x, p)| *x -= p);
            (c, fact.sensitivity(&z))
        });
        let (c0, d0) = per_source.into_iter().unzip();
        let (cn, dn) = per_mode.into_iter().unzip();
        Ok(Self {
            n_cells: fact.n_cells(),
            c0,
            d0,
            weights,
            cn,
            dn,
        })
    }

    pub fn n_gamma(&self) -> usize {
        self.cn.len()
    }

    /// Objective value and gradients with respect to `γ` and `Σx`.
    pub fn evaluate(&self, gamma: &[f64], sigma: &[f64]) -> (f64, Vec<f64>, Vec<f64>) {
        let n = self.n_cells;
        let parts = par::map_indices(self.c0.len(), |q| {
            let w = self.weights[q];
            let mut d = self.d0[q].clone();
            let mut r = self.c0[q].clone();
            for (k, &g) in gamma.iter().enumerate() {
                if g != 0.0 {
                    d.iter_mut().zip(&self.dn[k]).for_each(|(x, y)| *x += g * y);
                    r.iter_mut().zip(&self.cn[k]).for_each(|(x, y)| *x += g * y);
                }
            }
            for (i, (x, y)) in r.iter_mut().zip(&d).enumerate() {
                *x += sigma[i % n] * y;
            }
            let mut g_sigma = vec![0.0; n];
            for (i, (x, y)) in r.iter().zip(&d).enumerate() {
                g_sigma[i % n] += 2.0 * w * x * y;
            }
            let g_gamma: Vec<f64> = (0..gamma.len())
                .map(|k| {
                    let s: f64 = r
                        .iter()
                        .enumerate()
                        .map(|(i, x)| x * (self.cn[k][i] + sigma[i % n] * self.dn[k][i]))
                        .sum();
                    2.0 * w * s
                })
                .collect();
            (w * norm_sq(&r), g_gamma, g_sigma)
        });
        let mut value = 0.0;
        let mut g_gamma = vec![0.0; gamma.len()];
        let mut g_sigma = vec![0.0; n];
        for (v, gg, gs) in parts {
            value += v;
            g_gamma.iter_mut().zip(&gg).for_each(|(a, b)| *a += b);
            g_sigma.iter_mut().zip(&gs).for_each(|(a, b)| *a += b);
        }
        (value, g_gamma, g_sigma)
    }

    /// Per-cell quadratic coefficients `(a_m, b_m)` with
    /// `O(Σx) = Σ_m a_m Σx_m² + 2 b_m Σx_m + const` at `γ = 0`.
    fn cell_quadratics(&self) -> (Vec<f64>, Vec<f64>) {
        let n = self.n_cells;
        let mut a = vec![0.0; n];
        let mut b = vec![0.0; n];
        for q in 0..self.c0.len() {
            let w = self.weights[q];
            for (i, (c, d)) in self.c0[q].iter().zip(&self.d0[q]).enumerate() {
                a[i % n] += w * d * d;
                b[i % n] += w * c * d;
            }
        }
        (a, b)
    }

    /// Exact minimizer at `γ = 0`; cells the data cannot see keep `fallback`.
    pub fn solve_direct(&self, fallback: &[f64]) -> Vec<f64> {
        let (a, b) = self.cell_quadratics();
        a.iter()
            .zip(&b)
            .zip(fallback)
            .map(|((&a, &b), &f)| if a > 0.0 { -b / a } else { f })
            .collect()
    }

    /// Best spatially constant coefficient at `γ = 0`.
    pub fn best_constant(&self) -> f64 {
        let (a, b) = self.cell_quadratics();
        let (sa, sb): (f64, f64) = (a.iter().sum(), b.iter().sum());
        if sa > 0.0 {
            -sb / sa
        } else {
            0.0
        }
    }
}

/// Data-mismatch term of the one-step objective, in the ψ basis.
struct NoiseDataTerm {
    mu: Vec<f64>,
    proj: Vec<Vec<f64>>,
    resid_norm2: Vec<f64>,
    weights: Vec<f64>,
}

impl NoiseDataTerm {
    fn evaluate(&self, gamma: &[f64]) -> (f64, Vec<f64>) {
        let mut value = 0.0;
        let mut grad = vec![0.0; gamma.len()];
        for q in 0..self.proj.len() {
            let w = self.weights[q];
            // ‖Σ μγψ - J̃‖² = ‖J̃‖² - 2 Σ μγ p + Σ (μγ)²
            let mut v = self.resid_norm2[q];
            for (i, &g) in gamma.iter().enumerate() {
                let mg = self.mu[i] * g;
                v += mg * mg - 2.0 * mg * self.proj[q][i];
                grad[i] += 2.0 * w * self.mu[i] * (mg - self.proj[q][i]);
            }
            value += w * v;
        }
        (value, grad)
    }
}

/// The joint objective over `x = [γ, Σx]`.
pub struct OneStepObjective {
    data: NoiseDataTerm,
    state: StateResidual,
    pub betas: Vec<Vec<f64>>,
    pub signals: Vec<Vec<f64>>,
    pub l: usize,
}

impl OneStepObjective {
    pub fn new(fact: &Factorization, cache: &SvdCache, data: &[Vec<f64>], l: usize) -> Result<Self> {
        let rank = check_truncation(cache, l)?;
        check_sources(fact, data)?;
        let (betas, signals): (Vec<_>, Vec<_>) = data
            .iter()
            .map(|j| step1_signal(j, cache, l))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .unzip();
        let weights = data_weights(data)?;
        let proj = noise_projections(data, &betas, cache, l, rank);
        let resid_norm2 = data
            .iter()
            .zip(&betas)
            .map(|(j, beta)| {
                let mut jt = j.clone();
                for (i, b) in beta.iter().enumerate() {
                    let s = cache.mu[i] * b;
                    jt.iter_mut()
                        .zip(cache.psi.column(i).iter())
                        .for_each(|(x, p)| *x -= s * p);
                }
                norm_sq(&jt)
            })
            .collect();
        let state_weights = signal_weights(&signals)?;
        let basis: Vec<Vec<f64>> = (l..rank).map(|i| cache.phi.column(i).as_slice().to_vec()).collect();
        let state = StateResidual::new(fact, &signals, state_weights, &basis)?;
        Ok(Self {
            data: NoiseDataTerm {
                mu: cache.mu[l..rank].to_vec(),
                proj,
                resid_norm2,
                weights,
            },
            state,
            betas,
            signals,
            l,
        })
    }

    pub fn n_gamma(&self) -> usize {
        self.data.mu.len()
    }

    /// Objective and gradient at `x = [γ, Σx]`.
    pub fn evaluate(&self, x: &[f64]) -> (f64, Vec<f64>) {
        let k = self.n_gamma();
        let (gamma, sigma) = x.split_at(k);
        let (vd, gd) = self.data.evaluate(gamma);
        let (vs, gg, gs) = self.state.evaluate(gamma, sigma);
        let mut grad = gd;
        grad.iter_mut().zip(&gg).for_each(|(a, b)| *a += b);
        grad.extend(gs);
        (vd + vs, grad)
    }
}

fn signal_weights(fields: &[Vec<f64>]) -> Result<Vec<f64>> {
    fields
        .iter()
        .map(|u| {
            let n2 = norm_sq(u);
            if n2 > 0.0 {
                Ok(1.0 / n2)
            } else {
                Err(Error::invalid("intermediate field is zero; step-2 weights vanish"))
            }
        })
        .collect()
}

fn check_sources(fact: &Factorization, data: &[Vec<f64>]) -> Result<()> {
    if data.len() != fact.sources.len() {
        return Err(Error::DimensionMismatch {
            context: "number of data vectors",
            expected: fact.sources.len(),
            actual: data.len(),
        });
    }
    Ok(())
}

/// Result of fitting the coefficient to fixed intermediate fields.
#[derive(Clone, Debug)]
pub struct Step2Output {
    pub sigma: Vec<f64>,
    pub history: Vec<f64>,
    pub status: BfgsStatus,
    pub iterations: usize,
}

fn lower_bounds(floor: Option<f64>, n_free: usize, n_sigma: usize) -> Option<Vec<f64>> {
    floor.map(|f| {
        let mut lb = vec![f64::NEG_INFINITY; n_free];
        lb.extend(std::iter::repeat_n(f, n_sigma));
        lb
    })
}

fn initial_sigma(config: &ReconConfig, state: &StateResidual, n: usize) -> Result<Vec<f64>> {
    if let Some(s) = &config.initial_sigma {
        if s.len() != n {
            return Err(Error::DimensionMismatch {
                context: "initial coefficient",
                expected: n,
                actual: s.len(),
            });
        }
        return Ok(s.clone());
    }
    let v = config.initial_value.unwrap_or_else(|| state.best_constant());
    Ok(vec![v; n])
}

/// Minimizes `Σ_q ‖(B(Σx) - I)Ũ_q - F_q‖² / ‖Ũ_q‖²` over `Σx`.
pub fn step2_coefficient(fact: &Factorization, u_tilde: &[Vec<f64>], config: &ReconConfig) -> Result<Step2Output> {
    let weights = signal_weights(u_tilde)?;
    let state = StateResidual::new(fact, u_tilde, weights, &[])?;
    let n = fact.n_cells();
    let x0 = initial_sigma(config, &state, n)?;
    match config.step2_solver {
        Step2Solver::Direct => {
            let mut sigma = state.solve_direct(&x0);
            if let Some(f) = config.positivity_floor {
                sigma.iter_mut().for_each(|s| *s = s.max(f));
            }
            let history = vec![state.evaluate(&[], &x0).0, state.evaluate(&[], &sigma).0];
            Ok(Step2Output {
                sigma,
                history,
                status: BfgsStatus::Converged,
                iterations: 1,
            })
        }
        Step2Solver::Bfgs => {
            let lb = lower_bounds(config.positivity_floor, 0, n);
            let report = minimize(
                |s| {
                    let (v, _, g) = state.evaluate(&[], s);
                    (v, g)
                },
                &x0,
                lb.as_deref(),
                &config.optimizer,
            )?;
            if report.status == BfgsStatus::LineSearchFailed {
                log::warn!(
                    "step-2 line search failed after {} iterations; keeping best iterate",
                    report.iterations
                );
            }
            Ok(Step2Output {
                sigma: report.x,
                history: report.history,
                status: report.status,
                iterations: report.iterations,
            })
        }
    }
}

fn add_noise_part(signals: &[Vec<f64>], gamma: &[f64], cache: &SvdCache, l: usize) -> Vec<Vec<f64>> {
    signals
        .iter()
        .map(|u| {
            let mut u = u.clone();
            for (k, &g) in gamma.iter().enumerate() {
                u.iter_mut()
                    .zip(cache.phi.column(l + k).iter())
                    .for_each(|(x, p)| *x += g * p);
            }
            u
        })
        .collect()
}

/// Runs the configured algorithm on data `J_q`, one vector per source.
pub fn reconstruct(
    fact: &Factorization,
    cache: &SvdCache,
    data: &[Vec<f64>],
    config: &ReconConfig,
) -> Result<ReconResult> {
    config.optimizer.validate()?;
    check_sources(fact, data)?;
    if cache.dim() != fact.dim() || cache.n_detectors() != fact.a.nrows() {
        return Err(Error::invalid(format!(
            "SVD cache is for {} x {}, factorization is {} x {}",
            cache.n_detectors(),
            cache.dim(),
            fact.a.nrows(),
            fact.dim()
        )));
    }
    let l = select_l(cache, data, &config.truncation)?;
    let rank = check_truncation(cache, l)?;
    log::info!("{}: L = {l}, rank = {rank}", config.algorithm.name());

    let (betas, signals): (Vec<_>, Vec<_>) = data
        .iter()
        .map(|j| step1_signal(j, cache, l))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .unzip();

    let finish = |sigma: Vec<f64>, gamma: Vec<f64>, history, status, iterations, joint| ReconResult {
        algorithm: config.algorithm,
        l,
        rank,
        sigma: fact.medium(&sigma),
        beta_s: betas.clone(),
        gamma_n: gamma,
        objective_history: history,
        status,
        iterations,
        joint_objective: joint,
        error_vs_truth: None,
    };

    match config.algorithm {
        Algorithm::TwoStep => {
            let out = step2_coefficient(fact, &signals, config)?;
            Ok(finish(
                out.sigma,
                Vec::new(),
                out.history,
                out.status,
                out.iterations,
                None,
            ))
        }
        Algorithm::ModifiedTwoStep => {
            let gamma = step1_noise(data, &betas, cache, l)?;
            let fields = add_noise_part(&signals, &gamma, cache, l);
            let out = step2_coefficient(fact, &fields, config)?;
            let joint = OneStepObjective::new(fact, cache, data, l)?;
            let mut x = gamma.clone();
            x.extend_from_slice(&out.sigma);
            let value = joint.evaluate(&x).0;
            Ok(finish(
                out.sigma,
                gamma,
                out.history,
                out.status,
                out.iterations,
                Some(value),
            ))
        }
        Algorithm::OneStep => {
            let start = match &config.one_step_start {
                Some(s) => s.clone(),
                None => {
                    let gamma = step1_noise(data, &betas, cache, l)?;
                    let fields = add_noise_part(&signals, &gamma, cache, l);
                    let out = step2_coefficient(fact, &fields, config)?;
                    OneStepStart {
                        gamma,
                        sigma: out.sigma,
                    }
                }
            };
            let objective = OneStepObjective::new(fact, cache, data, l)?;
            let k = objective.n_gamma();
            if start.gamma.len() != k || start.sigma.len() != fact.n_cells() {
                return Err(Error::invalid(format!(
                    "one-step start has {} noise and {} cell values, expected {k} and {}",
                    start.gamma.len(),
                    start.sigma.len(),
                    fact.n_cells()
                )));
            }
            let mut x0 = start.gamma;
            x0.extend(start.sigma);
            let lb = lower_bounds(config.positivity_floor, k, fact.n_cells());
            let report = minimize(|x| objective.evaluate(x), &x0, lb.as_deref(), &config.optimizer)?;
            if report.status == BfgsStatus::LineSearchFailed {
                log::warn!(
                    "one-step line search failed after {} iterations; keeping best iterate",
                    report.iterations
                );
            }
            let (gamma, sigma) = report.x.split_at(k);
            Ok(finish(
                sigma.to_vec(),
                gamma.to_vec(),
                report.history,
                report.status,
                report.iterations,
                Some(report.value),
            ))
        }
    }
}

/// Dense Jacobian of the stacked, weighted step-2 residuals with respect to
/// `Σx`, built column by column from `B`. Limited to small grids.
pub fn step2_dense_jacobian(fact: &Factorization, u_tilde: &[Vec<f64>]) -> Result<(DMatrix<f64>, Vec<f64>)> {
    let n = fact.n_cells();
    if n > 256 {
        return Err(Error::invalid(format!(
            "dense step-2 Jacobian limited to 256 cells, got {n}"
        )));
    }
    let weights = signal_weights(u_tilde)?;
    let dim = fact.dim();
    let rows = dim * u_tilde.len();
    let zero = vec![0.0; n];
    let mut jac = DMatrix::zeros(rows, n);
    let mut offset = vec![0.0; rows];
    for (q, u) in u_tilde.iter().enumerate() {
        let sw = weights[q].sqrt();
        let base = fact.apply_b(&zero, u);
        for i in 0..dim {
            offset[q * dim + i] = sw * (base[i] - u[i] - fact.sources[q][i]);
        }
        for m in 0..n {
            let col = fact.apply_db(m, u)?;
            for i in 0..dim {
                jac[(q * dim + i, m)] = sw * col[i];
            }
        }
    }
    Ok((jac, offset))
}
