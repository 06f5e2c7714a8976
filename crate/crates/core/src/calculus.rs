//! Analytic first and diagonal second derivatives of the answer
//! log-probabilities, the chain rule onto coordinates and log-domain
//! parameters, and a central-difference oracle to check them against.
//!
//! With `λ` the preference smoothing (fixed to 1 when fitting):
//!
//! ```text
//! c1 = 1/(μ + δ_ab)          c5 = 1/(λ + δ_ac)
//! c2 = 1/(μ + δ_ac)          c6 = 1/(2λ + δ_ab + δ_ac)
//! c3 = 1/(μ + d² + δ_ab)     c7 = 1/d²
//! c4 = 1/(μ + d² + δ_ac)     c8 = 1/(2μ + d² + δ_ab + δ_ac)
//! ```
//!
//! `ln p_b = ln d² + ln(2μ + d² + δ_ab + δ_ac) − ln(μ + d² + δ_ab) − ln(μ + d² + δ_ac)
//!          + ln(λ + δ_ac) − ln(2λ + δ_ab + δ_ac)`, from which every entry below follows.
//! Both `δ_ab` and `δ_ac` move with `M_a` and with `u^k`, so the diagonal
//! Hessian for those parameters also carries the mixed `∂²/∂δ_ab∂δ_ac` term.

use std::f64::consts::LN_2;

use crate::domain::{Answer, Dataset, Embedding, GlobalParams, ModelKind, Observation, PriorConfig, UserProfile};
use crate::error::{Error, Result};
use crate::likelihood::{answer_probabilities_unchecked, floored_log2, row_distance_sq, LossValue, PROB_FLOOR};
use crate::model::Model;
use crate::optimizer::Objective;

/// Derivatives of `ln p(answer)` with respect to the two distances, `d²` and `μ`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct DerivativeBundle {
    pub d_logp_d_delta_ab: f64,
    pub d_logp_d_delta_ac: f64,
    pub d_logp_d_dsq: f64,
    pub d_logp_d_mu: f64,
    pub d2_logp_d_delta_ab2: f64,
    pub d2_logp_d_delta_ac2: f64,
    pub d2_logp_d_dsq2: f64,
    pub d2_logp_d_mu2: f64,
    /// `∂² ln p / ∂δ_ab ∂δ_ac`.
    pub d2_logp_d_delta_ab_ac: f64,
}

impl DerivativeBundle {
    /// The bundle for the same answer with the b and c slots exchanged.
    pub fn swapped(&self) -> Self {
        Self {
            d_logp_d_delta_ab: self.d_logp_d_delta_ac,
            d_logp_d_delta_ac: self.d_logp_d_delta_ab,
            d2_logp_d_delta_ab2: self.d2_logp_d_delta_ac2,
            d2_logp_d_delta_ac2: self.d2_logp_d_delta_ab2,
            ..*self
        }
    }
}

/// Derivatives of `ln p̂(answer | δ_ab, δ_ac, μ, d², λ)`.
pub fn logp_derivatives(
    answer: Answer,
    model: ModelKind,
    delta_ab: f64,
    delta_ac: f64,
    params: &GlobalParams,
) -> DerivativeBundle {
    if answer == Answer::PreferC {
        return logp_derivatives(Answer::PreferB, model, delta_ac, delta_ab, params).swapped();
    }
    let GlobalParams { lambda, mu, d_neither_sq: dsq } = *params;
    let c1 = 1.0 / (mu + delta_ab);
    let c2 = 1.0 / (mu + delta_ac);
    let c3 = 1.0 / (mu + dsq + delta_ab);
    let c4 = 1.0 / (mu + dsq + delta_ac);
    let c5 = 1.0 / (lambda + delta_ac);
    let c6 = 1.0 / (2.0 * lambda + delta_ab + delta_ac);
    let c7 = 1.0 / dsq;
    let c8 = 1.0 / (2.0 * mu + dsq + delta_ab + delta_ac);

    match (model, answer) {
        (ModelKind::TwoAnswer, _) => DerivativeBundle {
            d_logp_d_delta_ab: -c6,
            d_logp_d_delta_ac: c5 - c6,
            d2_logp_d_delta_ab2: c6 * c6,
            d2_logp_d_delta_ac2: c6 * c6 - c5 * c5,
            d2_logp_d_delta_ab_ac: c6 * c6,
            ..Default::default()
        },
        (_, Answer::Neither) => DerivativeBundle {
            d_logp_d_delta_ab: c1 - c3,
            d_logp_d_delta_ac: c2 - c4,
            d_logp_d_dsq: -c3 - c4,
            d_logp_d_mu: c1 + c2 - c3 - c4,
            d2_logp_d_delta_ab2: c3 * c3 - c1 * c1,
            d2_logp_d_delta_ac2: c4 * c4 - c2 * c2,
            d2_logp_d_dsq2: c3 * c3 + c4 * c4,
            d2_logp_d_mu2: c3 * c3 + c4 * c4 - c1 * c1 - c2 * c2,
            d2_logp_d_delta_ab_ac: 0.0,
        },
        (_, _) => DerivativeBundle {
            d_logp_d_delta_ab: c8 - c3 - c6,
            d_logp_d_delta_ac: c8 - c4 + c5 - c6,
            d_logp_d_dsq: c7 + c8 - c3 - c4,
            d_logp_d_mu: 2.0 * c8 - c3 - c4,
            d2_logp_d_delta_ab2: c3 * c3 + c6 * c6 - c8 * c8,
            d2_logp_d_delta_ac2: c4 * c4 + c6 * c6 - c8 * c8 - c5 * c5,
            d2_logp_d_dsq2: c3 * c3 + c4 * c4 - c7 * c7 - c8 * c8,
            d2_logp_d_mu2: c3 * c3 + c4 * c4 - 4.0 * c8 * c8,
            d2_logp_d_delta_ab_ac: c6 * c6 - c8 * c8,
        },
    }
}

/// Gradient and diagonal Hessian of `ln p` for one observation.
///
/// Scaling, `μ` and `d²` entries are with respect to their logarithms.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Contribution {
    pub grad_a: Vec<f64>,
    pub hess_a: Vec<f64>,
    pub grad_b: Vec<f64>,
    pub hess_b: Vec<f64>,
    pub grad_c: Vec<f64>,
    pub hess_c: Vec<f64>,
    pub grad_log_u: Vec<f64>,
    pub hess_log_u: Vec<f64>,
    pub grad_log_mu: f64,
    pub hess_log_mu: f64,
    pub grad_log_dsq: f64,
    pub hess_log_dsq: f64,
}

/// `∂L/∂ln x = x ∂L/∂x`, `∂²L/∂(ln x)² = x² ∂²L/∂x² + x ∂L/∂x`.
pub fn to_log_domain(x: f64, grad: f64, hess: f64) -> (f64, f64) {
    (x * grad, x * x * hess + x * grad)
}

/// Chain rule from a [`DerivativeBundle`] onto the rows of `a`, `b`, `c`,
/// the user scaling, `μ` and `d²`.
pub fn chain_rule_assemble(
    row_a: &[f64],
    row_b: &[f64],
    row_c: &[f64],
    scaling: Option<&[f64]>,
    params: &GlobalParams,
    bundle: &DerivativeBundle,
) -> Contribution {
    let dim = row_a.len();
    let mut out = Contribution {
        grad_a: vec![0.0; dim],
        hess_a: vec![0.0; dim],
        grad_b: vec![0.0; dim],
        hess_b: vec![0.0; dim],
        grad_c: vec![0.0; dim],
        hess_c: vec![0.0; dim],
        ..Default::default()
    };
    if scaling.is_some() {
        out.grad_log_u = vec![0.0; dim];
        out.hess_log_u = vec![0.0; dim];
    }
    let (g_ab, g_ac) = (bundle.d_logp_d_delta_ab, bundle.d_logp_d_delta_ac);
    let (h_ab, h_ac, h_x) = (bundle.d2_logp_d_delta_ab2, bundle.d2_logp_d_delta_ac2, bundle.d2_logp_d_delta_ab_ac);
    for d in 0..dim {
        let u = scaling.map_or(1.0, |s| s[d]);
        let diff_ab = row_a[d] - row_b[d];
        let diff_ac = row_a[d] - row_c[d];
        // ∂δ_xy/∂M_x = 2u(M_x − M_y), ∂²δ_xy/∂M_x² = 2u
        let j_ab = 2.0 * u * diff_ab;
        let j_ac = 2.0 * u * diff_ac;
        let curv = 2.0 * u;

        out.grad_a[d] = g_ab * j_ab + g_ac * j_ac;
        out.hess_a[d] = h_ab * j_ab * j_ab + h_ac * j_ac * j_ac + 2.0 * h_x * j_ab * j_ac + (g_ab + g_ac) * curv;
        out.grad_b[d] = -g_ab * j_ab;
        out.hess_b[d] = h_ab * j_ab * j_ab + g_ab * curv;
        out.grad_c[d] = -g_ac * j_ac;
        out.hess_c[d] = h_ac * j_ac * j_ac + g_ac * curv;

        if scaling.is_some() {
            // ∂δ/∂u = Δ², ∂²δ/∂u² = 0
            let q_ab = diff_ab * diff_ab;
            let q_ac = diff_ac * diff_ac;
            let g_u = g_ab * q_ab + g_ac * q_ac;
            let h_u = h_ab * q_ab * q_ab + h_ac * q_ac * q_ac + 2.0 * h_x * q_ab * q_ac;
            let (g, h) = to_log_domain(u, g_u, h_u);
            out.grad_log_u[d] = g;
            out.hess_log_u[d] = h;
        }
    }
    (out.grad_log_mu, out.hess_log_mu) = to_log_domain(params.mu, bundle.d_logp_d_mu, bundle.d2_logp_d_mu2);
    (out.grad_log_dsq, out.hess_log_dsq) =
        to_log_domain(params.d_neither_sq, bundle.d_logp_d_dsq, bundle.d2_logp_d_dsq2);
    out
}

/// Central differences: `g_i ≈ (L(x+h) − L(x−h))/2h`, `H_ii ≈ (L(x+h) − 2L(x) + L(x−h))/h²`.
pub fn finite_difference_oracle(
    loss: impl Fn(&[f64]) -> f64,
    x: &[f64],
    h: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let f0 = loss(x);
    if !f0.is_finite() {
        return Err(Error::NonFinite("loss at the base point".into()));
    }
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    let mut hess = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let fp = loss(&probe);
        probe[i] = x[i] - h;
        let fm = loss(&probe);
        probe[i] = x[i];
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NonFinite(format!("loss at probe point for coordinate {i}")));
        }
        grad.push((fp - fm) / (2.0 * h));
        hess.push((fp - 2.0 * f0 + fm) / (h * h));
    }
    Ok((grad, hess))
}

/// Observation resolved to row indices and a user slot in the layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IndexedObservation {
    pub a: usize,
    pub b: usize,
    pub c: usize,
    pub answer: Answer,
    pub user: usize,
}

/// Flat parameter layout: every coordinate of `M` (row-major), then
///
/// * three-answer: `ln μ`, `ln d²`;
/// * personalized: for each user `ln u_1..ln u_dim`, `ln μ_k`, `ln d²_k`;
/// * two-answer: nothing.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamLayout {
    pub kind: ModelKind,
    pub n: usize,
    pub dim: usize,
    pub users: Vec<String>,
}

impl ParamLayout {
    pub fn coords_len(&self) -> usize {
        self.n * self.dim
    }

    pub fn len(&self) -> usize {
        self.coords_len()
            + match self.kind {
                ModelKind::TwoAnswer => 0,
                ModelKind::ThreeAnswer => 2,
                ModelKind::Personalized => self.users.len() * (self.dim + 2),
            }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn user_block(&self, user: usize) -> usize {
        self.coords_len() + user * (self.dim + 2)
    }

    /// Index of `ln μ` for a user (ignored unless personalized).
    pub fn log_mu(&self, user: usize) -> usize {
        match self.kind {
            ModelKind::Personalized => self.user_block(user) + self.dim,
            _ => self.coords_len(),
        }
    }

    pub fn log_dsq(&self, user: usize) -> usize {
        self.log_mu(user) + 1
    }
}

/// The training loss over a flat parameter vector, with analytic gradient
/// and diagonal Hessian.
#[derive(Debug, Clone)]
pub struct TripletObjective {
    pub layout: ParamLayout,
    pub observations: Vec<IndexedObservation>,
    pub lambda: f64,
    pub prior: PriorConfig,
    /// `μ` and `d²` for the two-answer model, where they are not parameters.
    pub fixed: GlobalParams,
}

impl TripletObjective {
    /// Resolves observations against the dataset. Personalized users are
    /// taken from `users` (in order); unknown users are appended.
    pub fn new(
        kind: ModelKind,
        dataset: &Dataset,
        dim: usize,
        observations: &[Observation],
        users: &[String],
        prior: PriorConfig,
        fixed: GlobalParams,
    ) -> Result<Self> {
        let mut users = users.to_vec();
        let mut indexed = Vec::with_capacity(observations.len());
        for obs in observations {
            if kind == ModelKind::TwoAnswer && obs.answer == Answer::Neither {
                return Err(Error::ModelMismatch("NEITHER observation supplied to a two-answer fit".into()));
            }
            let (a, b, c) = obs.indices(dataset)?;
            let user = if kind == ModelKind::Personalized {
                match users.iter().position(|u| *u == obs.user_id) {
                    Some(k) => k,
                    None => {
                        users.push(obs.user_id.clone());
                        users.len() - 1
                    }
                }
            } else {
                0
            };
            indexed.push(IndexedObservation { a, b, c, answer: obs.answer, user });
        }
        if kind != ModelKind::Personalized {
            users.clear();
        }
        Ok(Self {
            layout: ParamLayout { kind, n: dataset.len(), dim, users },
            observations: indexed,
            lambda: fixed.lambda,
            prior,
            fixed,
        })
    }

    /// Flattens a model into the layout's parameter vector.
    pub fn pack(&self, model: &Model) -> Vec<f64> {
        let l = &self.layout;
        let mut x = model.embedding.coords().to_vec();
        match l.kind {
            ModelKind::TwoAnswer => {}
            ModelKind::ThreeAnswer => {
                x.push(model.params.mu.ln());
                x.push(model.params.d_neither_sq.ln());
            }
            ModelKind::Personalized => {
                for user in &l.users {
                    let p = model.profile_or_identity(user);
                    x.extend(p.scaling.iter().map(|u| u.ln()));
                    x.push(p.mu.ln());
                    x.push(p.d_neither_sq.ln());
                }
            }
        }
        x
    }

    /// Rebuilds a model from a parameter vector. For personalized models the
    /// global `μ`, `d²` become the geometric means over users.
    pub fn unpack(&self, x: &[f64]) -> Result<Model> {
        let l = &self.layout;
        let embedding = Embedding::new(l.n, l.dim, x[..l.coords_len()].to_vec())?;
        let mut model = Model::new(l.kind, embedding, self.fixed);
        match l.kind {
            ModelKind::TwoAnswer => {}
            ModelKind::ThreeAnswer => {
                model.params.mu = x[l.log_mu(0)].exp();
                model.params.d_neither_sq = x[l.log_dsq(0)].exp();
            }
            ModelKind::Personalized => {
                let (mut lm, mut ld) = (0.0, 0.0);
                for (k, user) in l.users.iter().enumerate() {
                    let start = l.user_block(k);
                    let profile = UserProfile {
                        user_id: user.clone(),
                        scaling: x[start..start + l.dim].iter().map(|v| v.exp()).collect(),
                        mu: x[l.log_mu(k)].exp(),
                        d_neither_sq: x[l.log_dsq(k)].exp(),
                    };
                    lm += x[l.log_mu(k)];
                    ld += x[l.log_dsq(k)];
                    model.profiles.insert(user.clone(), profile);
                }
                if !l.users.is_empty() {
                    let k = l.users.len() as f64;
                    model.params.mu = (lm / k).exp();
                    model.params.d_neither_sq = (ld / k).exp();
                }
            }
        }
        model.params.lambda = self.lambda;
        Ok(model)
    }

    fn params_for(&self, x: &[f64], user: usize) -> GlobalParams {
        match self.layout.kind {
            ModelKind::TwoAnswer => self.fixed,
            _ => GlobalParams {
                lambda: self.lambda,
                mu: x[self.layout.log_mu(user)].exp(),
                d_neither_sq: x[self.layout.log_dsq(user)].exp(),
            },
        }
    }

    fn scaling_for(&self, x: &[f64], user: usize) -> Option<Vec<f64>> {
        (self.layout.kind == ModelKind::Personalized).then(|| {
            let start = self.layout.user_block(user);
            x[start..start + self.layout.dim].iter().map(|v| v.exp()).collect()
        })
    }

    fn row<'x>(&self, x: &'x [f64], i: usize) -> &'x [f64] {
        &x[i * self.layout.dim..(i + 1) * self.layout.dim]
    }

    fn prior_term(&self, x: &[f64]) -> f64 {
        if self.layout.kind != ModelKind::Personalized {
            return 0.0;
        }
        let two_var = 2.0 * self.prior.sigma_d * self.prior.sigma_d;
        (0..self.layout.users.len())
            .flat_map(|k| {
                let start = self.layout.user_block(k);
                x[start..start + self.layout.dim].iter()
            })
            .map(|l| l * l / two_var)
            .sum()
    }

    /// Loss split into data and prior terms.
    pub fn loss(&self, x: &[f64]) -> LossValue {
        let mut data = 0.0;
        let mut cached_user = usize::MAX;
        let mut scaling = None;
        let mut params = self.fixed;
        for o in &self.observations {
            if o.user != cached_user {
                cached_user = o.user;
                scaling = self.scaling_for(x, o.user);
                params = self.params_for(x, o.user);
            }
            let (ra, rb, rc) = (self.row(x, o.a), self.row(x, o.b), self.row(x, o.c));
            let d_ab = row_distance_sq(ra, rb, scaling.as_deref());
            let d_ac = row_distance_sq(ra, rc, scaling.as_deref());
            let dist = answer_probabilities_unchecked(d_ab, d_ac, &params, self.layout.kind);
            data -= floored_log2(dist.prob(o.answer));
        }
        if !data.is_finite() {
            data = f64::INFINITY;
        }
        LossValue::new(data, self.prior_term(x))
    }

    /// Loss, gradient and diagonal Hessian at `x`.
    pub fn evaluate(&self, x: &[f64]) -> (LossValue, Vec<f64>, Vec<f64>) {
        let l = &self.layout;
        let mut grad = vec![0.0; l.len()];
        let mut hess = vec![0.0; l.len()];
        let mut data = 0.0;
        // d(−lg p) = −d(ln p)/ln 2
        let scale = -1.0 / LN_2;
        let dim = l.dim;
        for o in &self.observations {
            let scaling = self.scaling_for(x, o.user);
            let params = self.params_for(x, o.user);
            let (ra, rb, rc) = (self.row(x, o.a), self.row(x, o.b), self.row(x, o.c));
            let d_ab = row_distance_sq(ra, rb, scaling.as_deref());
            let d_ac = row_distance_sq(ra, rc, scaling.as_deref());
            let p = answer_probabilities_unchecked(d_ab, d_ac, &params, l.kind).prob(o.answer);
            data -= floored_log2(p);
            if p < PROB_FLOOR || !p.is_finite() {
                continue;
            }
            let bundle = logp_derivatives(o.answer, l.kind, d_ab, d_ac, &params);
            let c = chain_rule_assemble(ra, rb, rc, scaling.as_deref(), &params, &bundle);
            for d in 0..dim {
                grad[o.a * dim + d] += scale * c.grad_a[d];
                hess[o.a * dim + d] += scale * c.hess_a[d];
                grad[o.b * dim + d] += scale * c.grad_b[d];
                hess[o.b * dim + d] += scale * c.hess_b[d];
                grad[o.c * dim + d] += scale * c.grad_c[d];
                hess[o.c * dim + d] += scale * c.hess_c[d];
            }
            match l.kind {
                ModelKind::TwoAnswer => {}
                ModelKind::ThreeAnswer | ModelKind::Personalized => {
                    if l.kind == ModelKind::Personalized {
                        let start = l.user_block(o.user);
                        for d in 0..dim {
                            grad[start + d] += scale * c.grad_log_u[d];
                            hess[start + d] += scale * c.hess_log_u[d];
                        }
                    }
                    grad[l.log_mu(o.user)] += scale * c.grad_log_mu;
                    hess[l.log_mu(o.user)] += scale * c.hess_log_mu;
                    grad[l.log_dsq(o.user)] += scale * c.grad_log_dsq;
                    hess[l.log_dsq(o.user)] += scale * c.hess_log_dsq;
                }
            }
        }
        if l.kind == ModelKind::Personalized {
            let inv_var = 1.0 / (self.prior.sigma_d * self.prior.sigma_d);
            for k in 0..l.users.len() {
                let start = l.user_block(k);
                for i in start..start + dim {
                    grad[i] += x[i] * inv_var;
                    hess[i] += inv_var;
                }
            }
        }
        if !data.is_finite() {
            data = f64::INFINITY;
        }
        (LossValue::new(data, self.prior_term(x)), grad, hess)
    }
}

impl Objective for TripletObjective {
    fn num_params(&self) -> usize {
        self.layout.len()
    }

    fn value(&self, x: &[f64]) -> f64 {
        self.loss(x).total
    }

    fn value_grad_hess(&self, x: &[f64]) -> (f64, Vec<f64>, Vec<f64>) {
        let (loss, g, h) = self.evaluate(x);
        (loss.total, g, h)
    }
}

/// Largest relative discrepancies between analytic and central-difference
/// derivatives.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct GradCheckReport {
    pub points: usize,
    pub coordinates: usize,
    pub max_grad_rel_err: f64,
    pub max_hess_rel_err: f64,
}

pub const GRAD_REL_TOL: f64 = 1e-5;
pub const GRAD_ABS_FLOOR: f64 = 1e-8;
pub const HESS_REL_TOL: f64 = 1e-3;
/// Absolute floor for Hessian entries near zero, where second differences
/// are dominated by round-off.
pub const HESS_ABS_FLOOR: f64 = 1e-6;
pub const GRAD_STEP: f64 = 1e-5;
pub const HESS_STEP: f64 = 1e-4;

/// `|a − b| / max(|a|, |b|)`, or 0 when the difference is under `floor`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    if diff <= floor {
        0.0
    } else {
        diff / analytic.abs().max(numeric.abs())
    }
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_grad_rel_err <= GRAD_REL_TOL && self.max_hess_rel_err <= HESS_REL_TOL
    }

    pub fn merge(&mut self, other: &GradCheckReport) {
        self.points += other.points;
        self.coordinates += other.coordinates;
        self.max_grad_rel_err = self.max_grad_rel_err.max(other.max_grad_rel_err);
        self.max_hess_rel_err = self.max_hess_rel_err.max(other.max_hess_rel_err);
    }
}

/// Compares [`TripletObjective::evaluate`] with central differences of
/// [`TripletObjective::loss`] at `x`.
pub fn check_objective(objective: &TripletObjective, x: &[f64]) -> Result<GradCheckReport> {
    let (_, grad, hess) = objective.evaluate(x);
    let f = |p: &[f64]| objective.loss(p).total;
    let (num_grad, _) = finite_difference_oracle(f, x, GRAD_STEP)?;
    let (_, num_hess) = finite_difference_oracle(f, x, HESS_STEP)?;
    let mut report = GradCheckReport { points: 1, coordinates: x.len(), ..Default::default() };
    for i in 0..x.len() {
        report.max_grad_rel_err = report.max_grad_rel_err.max(relative_error(grad[i], num_grad[i], GRAD_ABS_FLOOR));
        report.max_hess_rel_err = report.max_hess_rel_err.max(relative_error(hess[i], num_hess[i], HESS_ABS_FLOOR));
    }
    Ok(report)
}
