//! Damped diagonal-Newton minimization with backtracking and random restarts.

use std::collections::{BTreeMap, BTreeSet};
use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calculus::TripletObjective;
use crate::domain::{Dataset, Embedding, GlobalParams, ModelKind, Observation, PriorConfig, Role, UserProfile};
use crate::error::{Error, Result};
use crate::likelihood::{distance_sq, LossValue};
use crate::model::Model;

/// A twice-differentiable loss over a flat parameter vector, with a diagonal Hessian.
pub trait Objective {
    fn num_params(&self) -> usize;
    fn value(&self, x: &[f64]) -> f64;
    /// Value, gradient and Hessian diagonal.
    fn value_grad_hess(&self, x: &[f64]) -> (f64, Vec<f64>, Vec<f64>);
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub max_iters: usize,
    pub rel_tol: f64,
    pub restarts: usize,
    /// Hessian entries below this take the fallback gradient step.
    pub hessian_floor: f64,
    pub backtrack_factor: f64,
    pub max_halvings: usize,
    pub fallback_step: f64,
    pub seed: u64,
    /// Train on TEST-role observations too (ACTIVE only by default).
    pub include_test: bool,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            max_iters: 500,
            rel_tol: 1e-6,
            restarts: 5,
            hessian_floor: 1e-4,
            backtrack_factor: 0.5,
            max_halvings: 20,
            fallback_step: 1e-2,
            seed: 0,
            include_test: false,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.max_iters > 0
            && self.rel_tol > 0.0
            && self.restarts >= 1
            && self.hessian_floor > 0.0
            && self.backtrack_factor > 0.0
            && self.backtrack_factor < 1.0
            && self.max_halvings > 0
            && self.fallback_step > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!("optimizer config {self:?}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum StepOutcome {
    Accepted { x: Vec<f64>, loss: f64, halvings: usize },
    /// No decrease after exhausting the halvings.
    NoDescent,
}

/// Raw per-coordinate step: `−g/H` where `H ≥ ε_H`, else `−η g`. Coordinates
/// outside `free` do not move.
pub fn newton_direction(grad: &[f64], hess: &[f64], free: &Range<usize>, config: &OptimizerConfig) -> Vec<f64> {
    grad.iter()
        .zip(hess)
        .enumerate()
        .map(|(i, (&g, &h))| {
            if !free.contains(&i) {
                0.0
            } else if h >= config.hessian_floor {
                -g / h.max(config.hessian_floor)
            } else {
                -config.fallback_step * g
            }
        })
        .collect()
}

/// One damped Newton step with backtracking; accepted only if the loss drops.
pub fn newton_step<O: Objective + ?Sized>(
    objective: &O,
    x: &[f64],
    loss: f64,
    grad: &[f64],
    hess: &[f64],
    free: &Range<usize>,
    config: &OptimizerConfig,
) -> StepOutcome {
    if grad.iter().chain(hess).any(|v| !v.is_finite()) {
        return StepOutcome::NoDescent;
    }
    let dir = newton_direction(grad, hess, free, config);
    let mut t = 1.0;
    for halvings in 0..=config.max_halvings {
        let cand: Vec<f64> = x.iter().zip(&dir).map(|(xi, di)| xi + t * di).collect();
        let value = objective.value(&cand);
        if value < loss {
            return StepOutcome::Accepted { x: cand, loss: value, halvings };
        }
        t *= config.backtrack_factor;
    }
    StepOutcome::NoDescent
}

#[derive(Debug, Clone, PartialEq)]
pub struct MinimizeResult {
    pub x: Vec<f64>,
    pub loss: f64,
    /// Loss at the start and after every accepted step (or every iteration for
    /// gradient descent).
    pub trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

/// Iterates [`newton_step`] until the relative loss change drops below
/// `rel_tol`, no step descends, or `max_iters` is reached.
pub fn minimize<O: Objective + ?Sized>(
    objective: &O,
    x0: Vec<f64>,
    free: Range<usize>,
    config: &OptimizerConfig,
) -> MinimizeResult {
    let mut x = x0;
    let (mut loss, mut grad, mut hess) = objective.value_grad_hess(&x);
    let mut trace = vec![loss];
    let mut iterations = 0;
    let mut converged = false;
    while iterations < config.max_iters {
        iterations += 1;
        match newton_step(objective, &x, loss, &grad, &hess, &free, config) {
            StepOutcome::Accepted { x: next, loss: next_loss, .. } => {
                let rel = (loss - next_loss) / loss.abs().max(f64::MIN_POSITIVE);
                x = next;
                loss = next_loss;
                trace.push(loss);
                if rel < config.rel_tol {
                    converged = true;
                    break;
                }
                (_, grad, hess) = objective.value_grad_hess(&x);
            }
            StepOutcome::NoDescent => {
                converged = true;
                break;
            }
        }
    }
    MinimizeResult { x, loss, trace, iterations, converged }
}

/// Plain gradient descent with a fixed step, no acceptance test.
/// The trace holds the loss before every iteration and after the last.
pub fn gradient_descent<O: Objective + ?Sized>(objective: &O, x0: Vec<f64>, step: f64, iters: usize) -> MinimizeResult {
    let mut x = x0;
    let mut trace = Vec::with_capacity(iters + 1);
    for _ in 0..iters {
        let (loss, grad, _) = objective.value_grad_hess(&x);
        trace.push(loss);
        for (xi, g) in x.iter_mut().zip(&grad) {
            *xi -= step * g;
        }
    }
    let loss = objective.value(&x);
    trace.push(loss);
    MinimizeResult { x, loss, trace, iterations: iters, converged: false }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub model: Model,
    pub loss: LossValue,
    /// Loss trace of the winning restart.
    pub trace: Vec<f64>,
    pub iterations: usize,
    pub best_restart: usize,
    /// Final loss of every restart, in restart order.
    pub restart_losses: Vec<f64>,
}

/// ACTIVE observations, plus TEST ones when `include_test` is set.
pub fn training_observations(observations: &[Observation], include_test: bool) -> Vec<Observation> {
    observations
        .iter()
        .filter(|o| o.role == Role::Active || (include_test && o.role == Role::Test))
        .cloned()
        .collect()
}

/// Deterministic per-restart generator derived from the master seed.
pub fn restart_rng(seed: u64, restart: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(restart as u64);
    rng
}

/// Random starting point: `M ~ N(0, 1)`, `μ = 1`, `d²` = mean pairwise
/// distance of the initial embedding, unit user scalings.
pub fn initial_model(kind: ModelKind, n: usize, dim: usize, users: &[String], rng: &mut ChaCha8Rng) -> Result<Model> {
    let coords: Vec<f64> = (0..n * dim).map(|_| StandardNormal.sample(rng)).collect();
    let embedding = Embedding::new(n, dim, coords)?;
    let mut total = 0.0;
    for x in 0..n {
        for y in x + 1..n {
            total += distance_sq(&embedding, None, x, y);
        }
    }
    let pairs = (n * (n - 1) / 2) as f64;
    let d_neither_sq = (total / pairs).max(f64::MIN_POSITIVE);
    let params = GlobalParams { lambda: 1.0, mu: 1.0, d_neither_sq };
    let mut model = Model::new(kind, embedding, params);
    if kind == ModelKind::Personalized {
        for u in users {
            model.profiles.insert(u.clone(), UserProfile::identity(u.clone(), dim, 1.0, d_neither_sq));
        }
    }
    Ok(model)
}

fn distinct_users(observations: &[Observation]) -> Vec<String> {
    let set: BTreeSet<&str> = observations.iter().map(|o| o.user_id.as_str()).collect();
    set.into_iter().map(str::to_owned).collect()
}

/// Fits an embedding (and the model's parameters) to observations with
/// `config.restarts` random starts, keeping the lowest loss.
pub fn fit(
    observations: &[Observation],
    dataset: &Dataset,
    dim: usize,
    kind: ModelKind,
    config: &OptimizerConfig,
    prior: &PriorConfig,
) -> Result<FitResult> {
    config.validate()?;
    if dim == 0 {
        return Err(Error::InvalidParameter("dim must be at least 1".into()));
    }
    let train = training_observations(observations, config.include_test);
    if train.is_empty() {
        return Err(Error::NoObservations);
    }
    let users = distinct_users(&train);
    let template = TripletObjective::new(kind, dataset, dim, &train, &users, *prior, GlobalParams::default())?;

    let runs: Vec<Result<(Model, MinimizeResult)>> = (0..config.restarts)
        .into_par_iter()
        .map(|restart| {
            let mut rng = restart_rng(config.seed, restart);
            let init = initial_model(kind, dataset.len(), dim, &users, &mut rng)?;
            let mut objective = template.clone();
            if kind == ModelKind::TwoAnswer {
                objective.fixed = init.params;
            }
            let x0 = objective.pack(&init);
            let run = minimize(&objective, x0, 0..objective.layout.len(), config);
            Ok((objective.unpack(&run.x)?, run))
        })
        .collect();

    let mut best: Option<(usize, Model, MinimizeResult)> = None;
    let mut restart_losses = Vec::with_capacity(runs.len());
    for (i, run) in runs.into_iter().enumerate() {
        let (model, result) = run?;
        restart_losses.push(result.loss);
        if best.as_ref().is_none_or(|(_, _, b)| result.loss < b.loss) {
            best = Some((i, model, result));
        }
    }
    let (best_restart, model, result) = best.expect("at least one restart");
    let mut objective = template;
    objective.fixed = model.params;
    let loss = objective.loss(&result.x);
    Ok(FitResult {
        model,
        loss,
        trace: result.trace,
        iterations: result.iterations,
        best_restart,
        restart_losses,
    })
}

/// Fits only per-user scalings, `μ_k` and `d²_k` against a frozen embedding.
///
/// Users already in `model.profiles` start from their profile (and are fitted
/// even without observations); new users start at the identity profile.
pub fn fit_users_only(
    model: &Model,
    dataset: &Dataset,
    observations: &[Observation],
    config: &OptimizerConfig,
    prior: &PriorConfig,
) -> Result<BTreeMap<String, UserProfile>> {
    config.validate()?;
    let mut users: BTreeSet<String> = model.profiles.keys().cloned().collect();
    users.extend(observations.iter().map(|o| o.user_id.clone()));
    let users: Vec<String> = users.into_iter().collect();
    let objective = TripletObjective::new(
        ModelKind::Personalized,
        dataset,
        model.dim(),
        observations,
        &users,
        *prior,
        model.params,
    )?;
    let mut start = model.clone();
    start.kind = ModelKind::Personalized;
    let x0 = objective.pack(&start);
    let free = objective.layout.coords_len()..objective.layout.len();
    let run = minimize(&objective, x0, free, config);
    let fitted = objective.unpack(&run.x)?;
    Ok(fitted.profiles)
}
