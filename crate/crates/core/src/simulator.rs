//! Synthetic ground truth and synthetic assessors.
//!
//! A truth draws cluster centers from `N(0, 4I)`, objects around their center
//! from `N(center, I)`, and per-user scalings `u = exp(N(0, σ*))`. Answers are
//! sampled from the same answer model that gets fitted.

use chrono::{DateTime, Utc};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::calculus::{check_objective, GradCheckReport, TripletObjective};
use crate::domain::{
    validate_dataset, Answer, Dataset, Embedding, GlobalParams, ModelKind, ObjectRecord, Observation, PriorConfig, Role,
    Triple, UserProfile, Verdict,
};
use crate::error::{Error, Result};
use crate::evaluation::{self, LearningCurvePoint};
use crate::likelihood::{answer_probabilities_unchecked, distance_sq, AnswerDistribution};
use crate::model::{KernelView, Model};
use crate::optimizer::{self, OptimizerConfig};
use crate::selection::{self, BatchComposition, SelectionStrategy};

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub dataset: Dataset,
    pub embedding: Embedding,
    pub params: GlobalParams,
    pub users: Vec<UserProfile>,
    /// Generative answer model: `TwoAnswer` truths never answer NEITHER.
    pub answer_model: ModelKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TruthConfig {
    pub objects: usize,
    pub dim: usize,
    pub users: usize,
    pub clusters: usize,
    /// Standard deviation of `ln u` across users.
    pub user_spread: f64,
    /// Multiplier on every true squared distance. Large values make
    /// preferences close to deterministic.
    pub distance_scale: f64,
    pub mu: f64,
}

impl Default for TruthConfig {
    fn default() -> Self {
        Self { objects: 30, dim: 2, users: 5, clusters: 5, user_spread: 0.18, distance_scale: 1.0, mu: 1.0 }
    }
}

/// Cluster-center variance of the generator.
const CENTER_VARIANCE: f64 = 4.0;
const MAX_GENERATION_ATTEMPTS: usize = 1000;

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let m = v.len();
    if m % 2 == 1 {
        v[m / 2]
    } else {
        0.5 * (v[m / 2 - 1] + v[m / 2])
    }
}

/// Median squared distance over all object pairs.
pub fn median_pairwise_distance_sq(embedding: &Embedding) -> f64 {
    let n = embedding.n();
    let mut d = Vec::with_capacity(n * (n - 1) / 2);
    for x in 0..n {
        for y in x + 1..n {
            d.push(distance_sq(embedding, None, x, y));
        }
    }
    median(d)
}

/// Draws a ground truth. Generation is retried until every cluster has at
/// least one object.
pub fn generate_truth(config: &TruthConfig, rng: &mut impl Rng) -> Result<GroundTruth> {
    if config.objects < 3 || config.clusters < 2 || config.clusters > config.objects || config.dim == 0 {
        return Err(Error::InvalidParameter(format!("truth config {config:?}")));
    }
    if !(config.distance_scale > 0.0) || !(config.mu > 0.0) || !(config.user_spread >= 0.0) {
        return Err(Error::InvalidParameter(format!("truth config {config:?}")));
    }
    let (n, dim) = (config.objects, config.dim);
    let center_sd = CENTER_VARIANCE.sqrt();
    let (labels, coords) = (0..MAX_GENERATION_ATTEMPTS)
        .find_map(|_| {
            let centers: Vec<f64> = (0..config.clusters * dim)
                .map(|_| center_sd * Distribution::<f64>::sample(&StandardNormal, rng))
                .collect();
            let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..config.clusters)).collect();
            let mut seen = vec![false; config.clusters];
            labels.iter().for_each(|&l| seen[l] = true);
            if seen.contains(&false) {
                return None;
            }
            let coords: Vec<f64> = labels
                .iter()
                .flat_map(|&l| (0..dim).map(move |d| (l, d)))
                .map(|(l, d)| centers[l * dim + d] + Distribution::<f64>::sample(&StandardNormal, rng))
                .collect();
            Some((labels, coords))
        })
        .ok_or_else(|| Error::InvalidParameter("could not fill every cluster".into()))?;
    let s = config.distance_scale.sqrt();
    let embedding = Embedding::new(n, dim, coords.into_iter().map(|v| v * s).collect())?;

    let records = labels
        .iter()
        .enumerate()
        .map(|(i, l)| ObjectRecord {
            id: format!("o{i:03}"),
            name: format!("Object {i}"),
            description: format!("synthetic object {i} from cluster {l}"),
            image_ref: None,
            cluster: format!("c{l}"),
        })
        .collect();
    let dataset = validate_dataset(records)?;
    let d_neither_sq = median_pairwise_distance_sq(&embedding);
    let params = GlobalParams { lambda: 1.0, mu: config.mu, d_neither_sq };
    let users = (0..config.users)
        .map(|k| {
            let scaling = (0..dim)
                .map(|_| {
                    if config.user_spread == 0.0 {
                        1.0
                    } else {
                        let z: f64 = StandardNormal.sample(rng);
                        (config.user_spread * z).exp()
                    }
                })
                .collect();
            UserProfile { user_id: format!("w{k:02}"), scaling, mu: params.mu, d_neither_sq }
        })
        .collect();
    Ok(GroundTruth { dataset, embedding, params, users, answer_model: ModelKind::ThreeAnswer })
}

impl GroundTruth {
    /// Replaces the user scalings (one vector of length `dim` per user).
    pub fn with_user_scalings(mut self, scalings: &[Vec<f64>]) -> Result<Self> {
        if scalings.len() != self.users.len() || scalings.iter().any(|s| s.len() != self.embedding.dim()) {
            return Err(Error::InvalidParameter("scalings must be users x dim".into()));
        }
        for (u, s) in self.users.iter_mut().zip(scalings) {
            u.scaling = s.clone();
            u.validate()?;
        }
        Ok(self)
    }

    pub fn with_answer_model(mut self, model: ModelKind) -> Self {
        self.answer_model = model;
        self
    }

    /// The truth as a fitted-model value, for checkpoints and evaluation.
    pub fn as_model(&self) -> Model {
        let mut m = Model::new(ModelKind::Personalized, self.embedding.clone(), self.params);
        m.profiles = self.users.iter().map(|u| (u.user_id.clone(), u.clone())).collect();
        m
    }

    /// True answer distribution for user `k` on a triple of row indices.
    pub fn distribution(&self, user: usize, (a, b, c): (usize, usize, usize)) -> AnswerDistribution {
        let profile = &self.users[user];
        let view = KernelView::for_profile(profile, self.params.lambda);
        let d_ab = distance_sq(&self.embedding, view.scaling, a, b);
        let d_ac = distance_sq(&self.embedding, view.scaling, a, c);
        let kind = match self.answer_model {
            ModelKind::TwoAnswer => ModelKind::TwoAnswer,
            _ => ModelKind::ThreeAnswer,
        };
        answer_probabilities_unchecked(d_ab, d_ac, &view.params, kind)
    }
}

fn draw(dist: &AnswerDistribution, rng: &mut impl Rng) -> Answer {
    let r: f64 = rng.random();
    if r < dist.p_prefer_b {
        Answer::PreferB
    } else if r < dist.p_prefer_b + dist.p_prefer_c {
        Answer::PreferC
    } else if dist.p_neither > 0.0 {
        Answer::Neither
    } else {
        Answer::PreferC
    }
}

/// Samples user `k`'s answer. On a two-answer interface a three-answer truth
/// that lands on NEITHER is forced into a coin flip between b and c.
pub fn sample_answer(
    truth: &GroundTruth,
    user: usize,
    triple: &Triple,
    interface: ModelKind,
    rng: &mut impl Rng,
) -> Result<Answer> {
    let idx = (
        truth.dataset.index_of(&triple.a)?,
        truth.dataset.index_of(&triple.b)?,
        truth.dataset.index_of(&triple.c)?,
    );
    let answer = draw(&truth.distribution(user, idx), rng);
    Ok(match (interface, answer) {
        (ModelKind::TwoAnswer, Answer::Neither) => {
            if rng.random_bool(0.5) {
                Answer::PreferB
            } else {
                Answer::PreferC
            }
        }
        _ => answer,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub rounds: usize,
    pub dim: usize,
    pub flags: Vec<ModelKind>,
    /// `None` picks the per-model default (baseline for two-answer).
    pub composition: Option<BatchComposition>,
    pub strategy: SelectionStrategy,
    pub fit: OptimizerConfig,
    pub seed: u64,
    /// Size of the shared holdout used when a run collected no usable TEST answers.
    pub holdout_size: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            rounds: 20,
            dim: 2,
            flags: vec![ModelKind::ThreeAnswer],
            composition: None,
            strategy: SelectionStrategy::default(),
            fit: OptimizerConfig::default(),
            seed: 0,
            holdout_size: 200,
        }
    }
}

/// Per-model outcome of an experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct FlagRun {
    pub flag: ModelKind,
    pub curve: Vec<LearningCurvePoint>,
    pub model: Option<Model>,
    pub observations: Vec<Observation>,
    pub accepted_batches: usize,
    pub rejected_batches: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentResult {
    pub runs: Vec<FlagRun>,
}

impl ExperimentResult {
    pub fn curves(&self) -> Vec<LearningCurvePoint> {
        self.runs.iter().flat_map(|r| r.curve.iter().cloned()).collect()
    }

    pub fn run(&self, flag: ModelKind) -> Option<&FlagRun> {
        self.runs.iter().find(|r| r.flag == flag)
    }
}

/// Stream for the shared holdout set; flag streams use [`ModelKind::code`].
const HOLDOUT_STREAM: u64 = 1;
const EPOCH: i64 = 1_700_000_000;

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn stamp(counter: usize) -> DateTime<Utc> {
    DateTime::from_timestamp(EPOCH + counter as i64, 0).expect("in range")
}

/// Preference-only test answers sampled from the truth on random triples.
pub fn holdout_set(truth: &GroundTruth, size: usize, rng: &mut impl Rng) -> Result<Vec<Observation>> {
    let mut out = Vec::with_capacity(size);
    let mut tries = 0;
    while out.len() < size && tries < size * 100 {
        tries += 1;
        let t = selection::random_triple(&truth.dataset, rng);
        let user = rng.random_range(0..truth.users.len());
        let ans = sample_answer(truth, user, &t, ModelKind::ThreeAnswer, rng)?;
        if ans != Answer::Neither {
            out.push(Observation::new(t, ans, truth.users[user].user_id.clone(), Role::Test, stamp(out.len())));
        }
    }
    Ok(out)
}

/// Rounds of active learning against synthetic workers, one independent run
/// per model flag. Each round asks one question per head, judges the HITs,
/// refits on the accepted ACTIVE answers and evaluates on the TEST answers
/// collected so far.
pub fn run_experiment(truth: &GroundTruth, config: &ExperimentConfig) -> Result<ExperimentResult> {
    if truth.users.is_empty() {
        return Err(Error::InvalidParameter("the truth has no users".into()));
    }
    let holdout = holdout_set(truth, config.holdout_size, &mut stream_rng(config.seed, HOLDOUT_STREAM))?;
    let runs = config
        .flags
        .iter()
        .map(|&flag| run_flag(truth, config, flag, &holdout))
        .collect::<Result<Vec<_>>>()?;
    Ok(ExperimentResult { runs })
}

fn run_flag(truth: &GroundTruth, config: &ExperimentConfig, flag: ModelKind, holdout: &[Observation]) -> Result<FlagRun> {
    let ds = &truth.dataset;
    let n = ds.len();
    let composition = config.composition.unwrap_or_else(|| BatchComposition::default_for(flag));
    composition.validate()?;
    if composition.active == 0 {
        return Err(Error::InvalidParameter("composition has no active questions".into()));
    }
    let mut rng = stream_rng(config.seed, flag.code());
    let mut observations: Vec<Observation> = Vec::new();
    let mut model: Option<Model> = None;
    let mut curve = Vec::new();
    let (mut accepted, mut rejected) = (0, 0);
    let mut batch_no = 0usize;

    for round in 0..config.rounds {
        let mut heads: Vec<usize> = (0..n).collect();
        heads.shuffle(&mut rng);
        while !heads.len().is_multiple_of(composition.active) {
            heads.push(rng.random_range(0..n));
        }
        let active = heads
            .iter()
            .map(|&h| selection::select_question(h, ds, model.as_ref(), &config.strategy, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        for chunk in active.chunks(composition.active) {
            let user = rng.random_range(0..truth.users.len());
            let worker = truth.users[user].user_id.clone();
            let mut batch = selection::assemble_hit_with_active(
                format!("{}-r{round:02}-b{batch_no:04}", flag.tag()),
                worker,
                ds,
                chunk.to_vec(),
                composition,
                &mut rng,
            )?;
            batch_no += 1;
            let answers = batch
                .questions()
                .iter()
                .map(|q| sample_answer(truth, user, &q.triple, flag, &mut rng))
                .collect::<Result<Vec<_>>>()?;
            batch.record_answers(answers)?;
            match selection::judge_batch(&mut batch)? {
                Verdict::Accepted => {
                    accepted += 1;
                    observations.extend(batch.observations(stamp(batch_no))?);
                }
                _ => rejected += 1,
            }
        }

        let train = optimizer::training_observations(&observations, config.fit.include_test);
        if !train.is_empty() {
            let mut fit_cfg = config.fit;
            fit_cfg.seed = config.seed ^ (flag.code() << 32) ^ (round as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
            model = Some(optimizer::fit(&train, ds, config.dim, flag, &fit_cfg, &Default::default())?.model);
        }
        let current = match &model {
            Some(m) => m.clone(),
            None => optimizer::initial_model(flag, n, config.dim, &[], &mut stream_rng(config.seed, 0))?,
        };
        let collected: Vec<Observation> = observations
            .iter()
            .filter(|o| o.role == Role::Test && o.answer != Answer::Neither)
            .cloned()
            .collect();
        let test = if collected.is_empty() { holdout } else { &collected };
        let points = evaluation::build_learning_curve(
            &[evaluation::Checkpointed { observations_used: train.len(), model: &current }],
            ds,
            test,
            evaluation::modes_for(flag),
        )?;
        curve.extend(points);
    }
    Ok(FlagRun { flag, curve, model, observations, accepted_batches: accepted, rejected_batches: rejected })
}

/// Samples `count` answers on uniformly random triples, users drawn uniformly.
pub fn sample_observations(
    truth: &GroundTruth,
    count: usize,
    interface: ModelKind,
    role: Role,
    rng: &mut impl Rng,
) -> Result<Vec<Observation>> {
    (0..count)
        .map(|i| {
            let t = selection::random_triple(&truth.dataset, rng);
            let user = rng.random_range(0..truth.users.len());
            let ans = sample_answer(truth, user, &t, interface, rng)?;
            Ok(Observation::new(t, ans, truth.users[user].user_id.clone(), role, stamp(i)))
        })
        .collect()
}

/// Derivative check on `points` random small instances, cycling through the
/// three model kinds. Parameters are drawn away from the fitted regime so
/// every parameter group is exercised.
pub fn gradcheck_suite(points: usize, seed: u64) -> Result<GradCheckReport> {
    let kinds = [ModelKind::TwoAnswer, ModelKind::ThreeAnswer, ModelKind::Personalized];
    let mut report = GradCheckReport::default();
    for i in 0..points {
        let kind = kinds[i % kinds.len()];
        let mut rng = stream_rng(seed, 100 + i as u64);
        let cfg = TruthConfig { objects: 6, users: 3, clusters: 2, user_spread: 0.5, ..TruthConfig::default() };
        let truth = generate_truth(&cfg, &mut rng)?;
        let interface = if kind == ModelKind::TwoAnswer { ModelKind::TwoAnswer } else { ModelKind::ThreeAnswer };
        let obs = sample_observations(&truth, 40, interface, Role::Active, &mut rng)?;
        let users: Vec<String> = truth.users.iter().map(|u| u.user_id.clone()).collect();
        let mut model = optimizer::initial_model(kind, truth.dataset.len(), cfg.dim, &users, &mut rng)?;
        let mut log_uniform = |lo: f64, hi: f64| rng.random_range(f64::ln(lo)..f64::ln(hi)).exp();
        model.params.mu = log_uniform(0.1, 10.0);
        model.params.d_neither_sq = log_uniform(0.1, 10.0);
        for p in model.profiles.values_mut() {
            p.scaling = (0..cfg.dim).map(|_| log_uniform(0.3, 3.0)).collect();
            p.mu = log_uniform(0.1, 10.0);
            p.d_neither_sq = log_uniform(0.1, 10.0);
        }
        let objective = TripletObjective::new(kind, &truth.dataset, cfg.dim, &obs, &users, PriorConfig::default(), model.params)?;
        report.merge(&check_objective(&objective, &objective.pack(&model))?);
    }
    Ok(report)
}
