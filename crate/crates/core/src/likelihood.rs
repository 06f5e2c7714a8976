//! Answer probabilities for triple questions and the training loss.
//!
//! For a head `a` and options `b`, `c` with squared distances `δ_ab`, `δ_ac`:
//!
//! ```text
//! p_neither = (μ + δ_ab)/(μ + d² + δ_ab) · (μ + δ_ac)/(μ + d² + δ_ac)
//! p_b       = (1 − p_neither) · (λ + δ_ac)/(2λ + δ_ab + δ_ac)
//! p_c       = (1 − p_neither) · (λ + δ_ab)/(2λ + δ_ab + δ_ac)
//! ```
//!
//! The two-answer model drops the `(1 − p_neither)` factor and never predicts
//! "neither". Log-probabilities are base 2.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::domain::{Answer, Dataset, Embedding, GlobalParams, ModelKind, Observation, PriorConfig, UserProfile};
use crate::error::{Error, Result};
use crate::model::{KernelView, Model};

/// Probabilities are clamped to this value before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnswerDistribution {
    pub p_prefer_b: f64,
    pub p_prefer_c: f64,
    pub p_neither: f64,
}

impl AnswerDistribution {
    pub fn prob(&self, answer: Answer) -> f64 {
        match answer {
            Answer::PreferB => self.p_prefer_b,
            Answer::PreferC => self.p_prefer_c,
            Answer::Neither => self.p_neither,
        }
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.p_prefer_b, self.p_prefer_c, self.p_neither]
    }

    /// Shannon entropy in bits.
    pub fn entropy(&self) -> f64 {
        entropy_bits(&self.as_array())
    }
}

pub(crate) fn entropy_bits(p: &[f64]) -> f64 {
    p.iter().filter(|&&x| x > 0.0).map(|&x| -x * x.log2()).sum()
}

/// Squared distance `Σ_d u_d (M_x^d − M_y^d)²`; `None` scaling is the identity user.
pub fn distance_sq(embedding: &Embedding, scaling: Option<&[f64]>, x: usize, y: usize) -> f64 {
    let (mx, my) = (embedding.row(x), embedding.row(y));
    match scaling {
        None => mx.iter().zip(my).map(|(a, b)| (a - b) * (a - b)).sum(),
        Some(u) => mx.iter().zip(my).zip(u).map(|((a, b), w)| w * (a - b) * (a - b)).sum(),
    }
}

/// Same as [`distance_sq`] on raw rows.
pub fn row_distance_sq(mx: &[f64], my: &[f64], scaling: Option<&[f64]>) -> f64 {
    match scaling {
        None => mx.iter().zip(my).map(|(a, b)| (a - b) * (a - b)).sum(),
        Some(u) => mx.iter().zip(my).zip(u).map(|((a, b), w)| w * (a - b) * (a - b)).sum(),
    }
}

/// Probability of "neither" under the three-answer model.
pub fn neither_probability(delta_ab: f64, delta_ac: f64, mu: f64, d_neither_sq: f64) -> f64 {
    (mu + delta_ab) / (mu + d_neither_sq + delta_ab) * ((mu + delta_ac) / (mu + d_neither_sq + delta_ac))
}

/// Answer distribution for one triple. `Personalized` uses the three-answer
/// formula with the user's parameters already folded into `params`.
pub fn answer_probabilities(
    delta_ab: f64,
    delta_ac: f64,
    params: &GlobalParams,
    model: ModelKind,
) -> Result<AnswerDistribution> {
    let inputs = [delta_ab, delta_ac, params.lambda, params.mu, params.d_neither_sq];
    if inputs.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("answer_probabilities inputs {inputs:?}")));
    }
    Ok(answer_probabilities_unchecked(delta_ab, delta_ac, params, model))
}

pub(crate) fn answer_probabilities_unchecked(
    delta_ab: f64,
    delta_ac: f64,
    params: &GlobalParams,
    model: ModelKind,
) -> AnswerDistribution {
    let lambda = params.lambda;
    let denom = 2.0 * lambda + delta_ab + delta_ac;
    let pref_b = (lambda + delta_ac) / denom;
    let pref_c = (lambda + delta_ab) / denom;
    match model {
        ModelKind::TwoAnswer => AnswerDistribution { p_prefer_b: pref_b, p_prefer_c: pref_c, p_neither: 0.0 },
        ModelKind::ThreeAnswer | ModelKind::Personalized => {
            let p_neither = neither_probability(delta_ab, delta_ac, params.mu, params.d_neither_sq);
            let rest = 1.0 - p_neither;
            AnswerDistribution { p_prefer_b: rest * pref_b, p_prefer_c: rest * pref_c, p_neither }
        }
    }
}

/// `lg` of a probability after applying [`PROB_FLOOR`].
pub fn floored_log2(p: f64) -> f64 {
    p.max(PROB_FLOOR).log2()
}

/// Log-probability of an answer for objects given by row index.
pub fn triple_log_prob(
    embedding: &Embedding,
    (a, b, c): (usize, usize, usize),
    answer: Answer,
    view: &KernelView<'_>,
    model: ModelKind,
) -> Result<f64> {
    if model == ModelKind::TwoAnswer && answer == Answer::Neither {
        return Err(Error::ModelMismatch("NEITHER answer under the two-answer model".into()));
    }
    let d_ab = distance_sq(embedding, view.scaling, a, b);
    let d_ac = distance_sq(embedding, view.scaling, a, c);
    let dist = answer_probabilities(d_ab, d_ac, &view.params, model)?;
    Ok(floored_log2(dist.prob(answer)))
}

/// Base-2 log-probability the model assigns to an observation's answer.
pub fn observation_log_prob(obs: &Observation, dataset: &Dataset, model: &Model) -> Result<f64> {
    let idx = obs.indices(dataset)?;
    triple_log_prob(&model.embedding, idx, obs.answer, &model.view_for(&obs.user_id), model.kind)
}

/// `Σ_{k,d} (ln u^k_d)² / (2σ²)`: the negative log prior without its constant.
pub fn prior_penalty<'a>(profiles: impl IntoIterator<Item = &'a UserProfile>, prior: &PriorConfig) -> f64 {
    let two_var = 2.0 * prior.sigma_d * prior.sigma_d;
    profiles
        .into_iter()
        .flat_map(|p| p.scaling.iter())
        .map(|u| {
            let l = u.ln();
            l * l / two_var
        })
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossValue {
    pub total: f64,
    /// Negative base-2 log-likelihood of the observations.
    pub data_term: f64,
    pub prior_term: f64,
}

impl LossValue {
    pub fn new(data_term: f64, prior_term: f64) -> Self {
        Self { total: data_term + prior_term, data_term, prior_term }
    }
}

/// Data term plus (for personalized models) the prior over user scalings.
pub fn total_loss(
    observations: &[Observation],
    dataset: &Dataset,
    model: &Model,
    prior: &PriorConfig,
) -> Result<LossValue> {
    let mut data = 0.0;
    for obs in observations {
        data -= observation_log_prob(obs, dataset, model)?;
    }
    let prior_term = match model.kind {
        ModelKind::Personalized => prior_penalty(model.profiles.values(), prior),
        _ => 0.0,
    };
    Ok(LossValue::new(data, prior_term))
}

/// Convenience used by tests and tools: profiles keyed by user id.
pub fn profile_map(profiles: impl IntoIterator<Item = UserProfile>) -> BTreeMap<String, UserProfile> {
    profiles.into_iter().map(|p| (p.user_id.clone(), p)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{validate_dataset, ObjectRecord, Role, Triple};
    use proptest::prelude::*;

    fn params(mu: f64, dsq: f64) -> GlobalParams {
        GlobalParams { lambda: 1.0, mu, d_neither_sq: dsq }
    }

    #[test]
    fn distance_examples() {
        let e = Embedding::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        assert_eq!(distance_sq(&e, None, 0, 2), 0.0);
        assert_eq!(distance_sq(&e, Some(&[1.0, 1.0]), 0, 1), 2.0);
        assert_eq!(distance_sq(&e, Some(&[4.0, 0.25]), 0, 1), 4.25);
        // K_xx + K_yy - 2 K_xy
        assert_eq!(distance_sq(&e, None, 0, 1), e.kernel(0, 0) + e.kernel(1, 1) - 2.0 * e.kernel(0, 1));
    }

    #[test]
    fn three_answer_example() {
        let d = answer_probabilities(1.0, 3.0, &params(1.0, 4.0), ModelKind::ThreeAnswer).unwrap();
        assert!((d.p_prefer_b - 5.0 / 9.0).abs() < 1e-15);
        assert!((d.p_prefer_c - 5.0 / 18.0).abs() < 1e-15);
        assert!((d.p_neither - 1.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn two_answer_example() {
        let d = answer_probabilities(1.0, 3.0, &params(1.0, 4.0), ModelKind::TwoAnswer).unwrap();
        assert!((d.p_prefer_b - 2.0 / 3.0).abs() < 1e-15);
        assert!((d.p_prefer_c - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(d.p_neither, 0.0);
    }

    #[test]
    fn non_finite_rejected() {
        assert!(answer_probabilities(f64::NAN, 1.0, &params(1.0, 1.0), ModelKind::ThreeAnswer).is_err());
        assert!(answer_probabilities(1.0, f64::INFINITY, &params(1.0, 1.0), ModelKind::TwoAnswer).is_err());
    }

    #[test]
    fn neither_at_zero_distance() {
        let d = answer_probabilities(0.0, 0.0, &params(2.0, 3.0), ModelKind::ThreeAnswer).unwrap();
        assert!((d.p_neither - (2.0f64 / 5.0).powi(2)).abs() < 1e-15);
    }

    fn fixture() -> (Dataset, Model) {
        let recs = ["a", "b", "c"]
            .iter()
            .enumerate()
            .map(|(i, id)| ObjectRecord {
                id: id.to_string(),
                name: id.to_string(),
                description: String::new(),
                image_ref: None,
                cluster: if i == 0 { "x".into() } else { "y".into() },
            })
            .collect();
        let ds = validate_dataset(recs).unwrap();
        // δ_ab = 1, δ_ac = 3
        let emb = Embedding::from_rows(&[vec![0.0], vec![1.0], vec![-(3.0f64).sqrt()]]).unwrap();
        (ds, Model::new(ModelKind::ThreeAnswer, emb, params(1.0, 4.0)))
    }

    fn obs(a: &str, b: &str, c: &str, answer: Answer) -> Observation {
        Observation::new(Triple::new(a, b, c), answer, "u1", Role::Active, Default::default())
    }

    #[test]
    fn log_prob_examples() {
        let (ds, mut model) = fixture();
        let lp = observation_log_prob(&obs("a", "b", "c", Answer::Neither), &ds, &model).unwrap();
        assert!((lp - (1.0f64 / 6.0).log2()).abs() < 1e-12);

        // symmetric triple: b and c both at distance 1 from a
        model.embedding = Embedding::from_rows(&[vec![0.0], vec![1.0], vec![-1.0]]).unwrap();
        model.kind = ModelKind::TwoAnswer;
        let lp = observation_log_prob(&obs("a", "b", "c", Answer::PreferB), &ds, &model).unwrap();
        assert!((lp + 1.0).abs() < 1e-15);

        let err = observation_log_prob(&obs("a", "b", "c", Answer::Neither), &ds, &model).unwrap_err();
        assert!(matches!(err, Error::ModelMismatch(_)));

        let loss = total_loss(&[obs("a", "b", "c", Answer::PreferB)], &ds, &model, &PriorConfig::default()).unwrap();
        assert!((loss.total - 1.0).abs() < 1e-15);
        let empty = total_loss(&[], &ds, &model, &PriorConfig::default()).unwrap();
        assert_eq!(empty.total, 0.0);
    }

    #[test]
    fn floor_boundary() {
        assert_eq!(floored_log2(1e-12), (1e-12f64).log2());
        assert_eq!(floored_log2(0.0), (1e-12f64).log2());
        assert_eq!(floored_log2(1e-300), (1e-12f64).log2());
    }

    #[test]
    fn prior_examples() {
        let prior = PriorConfig::default();
        let ones = UserProfile::identity("u", 3, 1.0, 1.0);
        assert_eq!(prior_penalty([&ones], &prior), 0.0);
        let mut one = UserProfile::identity("u", 1, 1.0, 1.0);
        one.scaling[0] = 0.18f64.exp();
        assert!((prior_penalty([&one], &prior) - 0.5).abs() < 1e-12);
        let mut inv = one.clone();
        inv.scaling[0] = 1.0 / one.scaling[0];
        assert!((prior_penalty([&one], &prior) - prior_penalty([&inv], &prior)).abs() < 1e-12);
    }

    #[test]
    fn total_loss_is_additive_with_prior() {
        let (ds, mut model) = fixture();
        model.kind = ModelKind::Personalized;
        let mut p = UserProfile::identity("u1", 1, 0.7, 2.5);
        p.scaling[0] = 1.3;
        model.profiles = profile_map([p.clone()]);
        let all = [obs("a", "b", "c", Answer::PreferB), obs("b", "a", "c", Answer::Neither), obs("c", "b", "a", Answer::PreferC)];
        let prior = PriorConfig::default();
        let loss = total_loss(&all, &ds, &model, &prior).unwrap();
        let per: f64 = all.iter().map(|o| -observation_log_prob(o, &ds, &model).unwrap()).sum();
        assert!((loss.data_term - per).abs() < 1e-12);
        assert!((loss.prior_term - prior_penalty([&p], &prior)).abs() < 1e-15);
        assert_eq!(loss.total, loss.data_term + loss.prior_term);
    }

    proptest! {
        #[test]
        fn normalized(dab in 0.0f64..1e3, dac in 0.0f64..1e3, mu in 1e-3f64..1e2, dsq in 1e-3f64..1e3) {
            let d = answer_probabilities(dab, dac, &params(mu, dsq), ModelKind::ThreeAnswer).unwrap();
            prop_assert!((d.p_prefer_b + d.p_prefer_c + d.p_neither - 1.0).abs() < 1e-12);
            for p in d.as_array() {
                prop_assert!((0.0..=1.0).contains(&p));
            }
        }

        #[test]
        fn preference_ordering(dab in 0.0f64..100.0, dac in 0.0f64..100.0, mu in 0.01f64..10.0, dsq in 0.01f64..100.0) {
            let d = answer_probabilities(dab, dac, &params(mu, dsq), ModelKind::ThreeAnswer).unwrap();
            prop_assert_eq!(dab < dac, d.p_prefer_b > d.p_prefer_c);
            let sym = answer_probabilities(dab, dab, &params(mu, dsq), ModelKind::ThreeAnswer).unwrap();
            prop_assert_eq!(sym.p_prefer_b, sym.p_prefer_c);
        }

        #[test]
        fn neither_monotone(dab in 0.0f64..100.0, dac in 0.0f64..100.0, step in 0.0f64..50.0, mu in 0.01f64..10.0, dsq in 0.01f64..100.0) {
            let p0 = neither_probability(dab, dac, mu, dsq);
            prop_assert!(neither_probability(dab + step, dac, mu, dsq) >= p0);
            prop_assert!(neither_probability(dab, dac + step, mu, dsq) >= p0);
        }

        #[test]
        fn two_answer_limit(dab in 0.0f64..100.0, dac in 0.0f64..100.0, mu in 0.01f64..10.0) {
            let three = answer_probabilities(dab, dac, &params(mu, 1e12), ModelKind::ThreeAnswer).unwrap();
            let two = answer_probabilities(dab, dac, &params(mu, 1e12), ModelKind::TwoAnswer).unwrap();
            prop_assert!((three.p_prefer_b - two.p_prefer_b).abs() < 1e-6);
            prop_assert!((three.p_prefer_c - two.p_prefer_c).abs() < 1e-6);
        }

        #[test]
        fn scale_counter_scale(rows in prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 2), 3..6),
                               u in prop::collection::vec(0.1f64..5.0, 2), s in 0.2f64..5.0, col in 0usize..2) {
            let e = Embedding::from_rows(&rows).unwrap();
            let mut scaled_rows = rows.clone();
            for r in &mut scaled_rows { r[col] *= s; }
            let e2 = Embedding::from_rows(&scaled_rows).unwrap();
            let mut u2 = u.clone();
            u2[col] /= s * s;
            for x in 0..rows.len() {
                for y in 0..rows.len() {
                    let a = distance_sq(&e, Some(&u), x, y);
                    let b = distance_sq(&e2, Some(&u2), x, y);
                    prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
                }
            }
        }

        #[test]
        fn identity_profile_matches_unscaled(rows in prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 3), 3..6)) {
            let e = Embedding::from_rows(&rows).unwrap();
            let ones = [1.0; 3];
            for x in 0..rows.len() {
                for y in 0..rows.len() {
                    prop_assert_eq!(distance_sq(&e, Some(&ones), x, y), distance_sq(&e, None, x, y));
                }
            }
        }
    }

    #[test]
    fn neither_tends_to_one() {
        assert!(neither_probability(1e9, 1e9, 1.0, 4.0) > 1.0 - 1e-8);
    }
}
