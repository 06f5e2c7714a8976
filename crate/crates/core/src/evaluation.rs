//! Held-out accuracy, comparable log loss and learning curves.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::domain::{Answer, Dataset, Embedding, GlobalParams, ModelKind, Observation};
use crate::error::{Error, Result};
use crate::likelihood::{answer_probabilities_unchecked, distance_sq, floored_log2};
use crate::model::Model;

/// How distances are computed when predicting a test answer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictionMode {
    /// The shared embedding, unscaled.
    Global,
    /// A personalized model's embedding seen by the identity user.
    IdentityUser,
    /// Each answer scored with its own user's scaling.
    Personalized,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearningCurvePoint {
    pub model_tag: String,
    pub observations_used: usize,
    pub accuracy: f64,
    /// Mean base-2 log loss per test observation.
    pub log_loss: f64,
}

pub const CURVE_HEADER: &str = "model_tag,observations_used,accuracy,log_loss";

/// Test observations that express a preference.
pub fn preference_only(test: &[Observation]) -> Vec<&Observation> {
    test.iter().filter(|o| o.answer != Answer::Neither).collect()
}

fn scaling_for<'m>(model: &'m Model, obs: &Observation, mode: PredictionMode) -> Option<&'m [f64]> {
    match mode {
        PredictionMode::Global | PredictionMode::IdentityUser => None,
        PredictionMode::Personalized => model.profiles.get(&obs.user_id).map(|p| p.scaling.as_slice()),
    }
}

fn distances(embedding: &Embedding, scaling: Option<&[f64]>, (a, b, c): (usize, usize, usize)) -> (f64, f64) {
    (distance_sq(embedding, scaling, a, b), distance_sq(embedding, scaling, a, c))
}

/// Fraction of preference answers whose preferred option is strictly closer
/// to the head. Ties count as wrong; NEITHER answers are skipped.
pub fn test_accuracy(model: &Model, dataset: &Dataset, test: &[Observation], mode: PredictionMode) -> Result<f64> {
    let prefs = preference_only(test);
    if prefs.is_empty() {
        return Err(Error::EmptyTestSet);
    }
    let mut correct = 0usize;
    for obs in &prefs {
        let (d_ab, d_ac) = distances(&model.embedding, scaling_for(model, obs, mode), obs.indices(dataset)?);
        let ok = match obs.answer {
            Answer::PreferB => d_ab < d_ac,
            Answer::PreferC => d_ac < d_ab,
            Answer::Neither => unreachable!("filtered"),
        };
        correct += usize::from(ok);
    }
    Ok(correct as f64 / prefs.len() as f64)
}

/// Mean `−lg p̂` under the two-answer formula with `λ = 1`, whatever model
/// produced the coordinates.
pub fn comparable_log_loss(embedding: &Embedding, dataset: &Dataset, test: &[Observation]) -> Result<f64> {
    let model = Model::new(ModelKind::TwoAnswer, embedding.clone(), GlobalParams::default());
    comparable_log_loss_for(&model, dataset, test, PredictionMode::Global)
}

/// [`comparable_log_loss`] with distances taken according to `mode`.
pub fn comparable_log_loss_for(
    model: &Model,
    dataset: &Dataset,
    test: &[Observation],
    mode: PredictionMode,
) -> Result<f64> {
    let prefs = preference_only(test);
    if prefs.is_empty() {
        return Err(Error::EmptyTestSet);
    }
    let params = GlobalParams::default();
    let mut total = 0.0;
    for obs in &prefs {
        let (d_ab, d_ac) = distances(&model.embedding, scaling_for(model, obs, mode), obs.indices(dataset)?);
        let dist = answer_probabilities_unchecked(d_ab, d_ac, &params, ModelKind::TwoAnswer);
        total -= floored_log2(dist.prob(obs.answer));
    }
    Ok(total / prefs.len() as f64)
}

/// Curve tags and prediction modes reported for a model flag.
pub fn modes_for(flag: ModelKind) -> &'static [(&'static str, PredictionMode)] {
    match flag {
        ModelKind::TwoAnswer => &[("two_answer", PredictionMode::Global)],
        ModelKind::ThreeAnswer => &[("three_answer", PredictionMode::Global)],
        ModelKind::Personalized => &[
            ("personalized", PredictionMode::Personalized),
            ("identity_user", PredictionMode::IdentityUser),
        ],
    }
}

/// A fitted model together with the number of training observations it saw.
#[derive(Debug, Clone, Copy)]
pub struct Checkpointed<'a> {
    pub observations_used: usize,
    pub model: &'a Model,
}

/// One point per checkpoint per `(tag, mode)`.
pub fn build_learning_curve(
    checkpoints: &[Checkpointed<'_>],
    dataset: &Dataset,
    test: &[Observation],
    modes: &[(&str, PredictionMode)],
) -> Result<Vec<LearningCurvePoint>> {
    let mut out = Vec::with_capacity(checkpoints.len() * modes.len());
    for cp in checkpoints {
        for &(tag, mode) in modes {
            out.push(LearningCurvePoint {
                model_tag: tag.to_owned(),
                observations_used: cp.observations_used,
                accuracy: test_accuracy(cp.model, dataset, test, mode)?,
                log_loss: comparable_log_loss_for(cp.model, dataset, test, mode)?,
            });
        }
    }
    Ok(out)
}

/// Comma-separated export with [`CURVE_HEADER`].
pub fn curve_to_csv(points: &[LearningCurvePoint]) -> String {
    let mut s = String::from(CURVE_HEADER);
    s.push('\n');
    for p in points {
        let _ = writeln!(s, "{},{},{},{}", p.model_tag, p.observations_used, p.accuracy, p.log_loss);
    }
    s
}

/// Parses [`curve_to_csv`] output.
pub fn curve_from_csv(text: &str) -> Result<Vec<LearningCurvePoint>> {
    let mut lines = text.lines();
    if lines.next() != Some(CURVE_HEADER) {
        return Err(Error::InvalidParameter("learning curve header mismatch".into()));
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            let bad = || Error::InvalidParameter(format!("bad learning curve row `{l}`"));
            if f.len() != 4 {
                return Err(bad());
            }
            Ok(LearningCurvePoint {
                model_tag: f[0].to_owned(),
                observations_used: f[1].parse().map_err(|_| bad())?,
                accuracy: f[2].parse().map_err(|_| bad())?,
                log_loss: f[3].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}
