//! Core value types: objects, embeddings, model parameters, observations and
//! HIT batches.

use std::collections::{BTreeSet, HashMap};
use std::fmt;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::selection::BatchComposition;

/// One object of a collection, as stored in a dataset file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectRecord {
    pub id: String,
    pub name: String,
    #[serde(default)]
    pub description: String,
    #[serde(default)]
    pub image_ref: Option<String>,
    /// Manual cluster label. Only trap questions look at it.
    pub cluster: String,
}

/// A validated collection with a dataset-scoped id → row index map.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    records: Vec<ObjectRecord>,
    index: HashMap<String, usize>,
    clusters: Vec<usize>,
    cluster_names: Vec<String>,
}

/// Minimum collection size: a triple needs three distinct objects.
pub const MIN_OBJECTS: usize = 3;

/// Checks ids, clusters and size, and builds the index map.
pub fn validate_dataset(records: Vec<ObjectRecord>) -> Result<Dataset> {
    let mut index = HashMap::with_capacity(records.len());
    for (i, r) in records.iter().enumerate() {
        if r.id.trim().is_empty() {
            return Err(Error::InvalidDataset(format!("record {} has an empty id", i + 1)));
        }
        if r.cluster.trim().is_empty() {
            return Err(Error::InvalidDataset(format!("object `{}` has an empty cluster", r.id)));
        }
        if index.insert(r.id.clone(), i).is_some() {
            return Err(Error::InvalidDataset(format!("duplicate object id `{}`", r.id)));
        }
    }
    if records.len() < MIN_OBJECTS {
        return Err(Error::InvalidDataset(format!(
            "need at least {MIN_OBJECTS} objects, got {}",
            records.len()
        )));
    }
    let names: BTreeSet<&str> = records.iter().map(|r| r.cluster.as_str()).collect();
    if names.len() < 2 {
        return Err(Error::InvalidDataset(format!(
            "need at least 2 distinct clusters, got {}",
            names.len()
        )));
    }
    let cluster_names: Vec<String> = names.into_iter().map(str::to_owned).collect();
    let clusters = records
        .iter()
        .map(|r| cluster_names.binary_search(&r.cluster).expect("cluster collected above"))
        .collect();
    Ok(Dataset { records, index, clusters, cluster_names })
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[ObjectRecord] {
        &self.records
    }

    pub fn record(&self, idx: usize) -> &ObjectRecord {
        &self.records[idx]
    }

    pub fn id(&self, idx: usize) -> &str {
        &self.records[idx].id
    }

    pub fn index_of(&self, id: &str) -> Result<usize> {
        self.index.get(id).copied().ok_or_else(|| Error::UnknownObject(id.to_owned()))
    }

    /// Dense cluster number of an object (clusters sorted by label).
    pub fn cluster_of(&self, idx: usize) -> usize {
        self.clusters[idx]
    }

    pub fn cluster_count(&self) -> usize {
        self.cluster_names.len()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.records.iter().map(|r| r.id.as_str())
    }
}

/// Object coordinates, one row per object. `K = M Mᵀ` is the learned kernel.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    n: usize,
    dim: usize,
    coords: Vec<f64>,
}

impl Embedding {
    pub fn new(n: usize, dim: usize, coords: Vec<f64>) -> Result<Self> {
        if n < MIN_OBJECTS {
            return Err(Error::InvalidEmbedding(format!("need n >= {MIN_OBJECTS}, got {n}")));
        }
        if dim == 0 {
            return Err(Error::InvalidEmbedding("dim must be at least 1".into()));
        }
        if coords.len() != n * dim {
            return Err(Error::InvalidEmbedding(format!(
                "expected {} coordinates for {n}x{dim}, got {}",
                n * dim,
                coords.len()
            )));
        }
        if let Some(bad) = coords.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidEmbedding(format!("coordinate {bad} is not finite")));
        }
        Ok(Self { n, dim, coords })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::InvalidEmbedding("ragged rows".into()));
        }
        Self::new(rows.len(), dim, rows.concat())
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.coords[i * self.dim..(i + 1) * self.dim]
    }

    pub fn into_coords(self) -> Vec<f64> {
        self.coords
    }

    /// Kernel entry `K_xy = <M_x, M_y>`.
    pub fn kernel(&self, x: usize, y: usize) -> f64 {
        self.row(x).iter().zip(self.row(y)).map(|(a, b)| a * b).sum()
    }
}

/// Shared smoothing parameters and the squared "neither" radius.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GlobalParams {
    pub lambda: f64,
    pub mu: f64,
    pub d_neither_sq: f64,
}

impl GlobalParams {
    pub fn new(lambda: f64, mu: f64, d_neither_sq: f64) -> Result<Self> {
        let p = Self { lambda, mu, d_neither_sq };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda", self.lambda), ("mu", self.mu), ("d_neither_sq", self.d_neither_sq)] {
            if !(v > 0.0) || v.is_nan() {
                return Err(Error::InvalidParameter(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

impl Default for GlobalParams {
    fn default() -> Self {
        Self { lambda: 1.0, mu: 1.0, d_neither_sq: 1.0 }
    }
}

/// Per-user diagonal scaling `u^k` plus the user's own `μ_k` and `d²_k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserProfile {
    pub user_id: String,
    pub scaling: Vec<f64>,
    pub mu: f64,
    pub d_neither_sq: f64,
}

impl UserProfile {
    /// The identity user: unit scaling on every dimension.
    pub fn identity(user_id: impl Into<String>, dim: usize, mu: f64, d_neither_sq: f64) -> Self {
        Self { user_id: user_id.into(), scaling: vec![1.0; dim], mu, d_neither_sq }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(u) = self.scaling.iter().find(|u| !(**u > 0.0 && u.is_finite())) {
            return Err(Error::InvalidParameter(format!(
                "user `{}` has non-positive scaling {u}",
                self.user_id
            )));
        }
        if !(self.mu > 0.0) || !(self.d_neither_sq > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "user `{}` needs positive mu and d_neither_sq",
                self.user_id
            )));
        }
        Ok(())
    }
}

/// Gaussian prior on `log u^k_d`, one standard deviation shared by every dimension.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PriorConfig {
    pub sigma_d: f64,
}

pub const DEFAULT_SIGMA_D: f64 = 0.18;

impl Default for PriorConfig {
    fn default() -> Self {
        Self { sigma_d: DEFAULT_SIGMA_D }
    }
}

impl PriorConfig {
    pub fn new(sigma_d: f64) -> Result<Self> {
        if !(sigma_d > 0.0) || !sigma_d.is_finite() {
            return Err(Error::InvalidParameter(format!("sigma_d must be positive, got {sigma_d}")));
        }
        Ok(Self { sigma_d })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Answer {
    #[serde(alias = "B")]
    PreferB,
    #[serde(alias = "C")]
    PreferC,
    Neither,
}

impl Answer {
    pub const ALL: [Answer; 3] = [Answer::PreferB, Answer::PreferC, Answer::Neither];

    /// The same judgment after swapping the b and c slots.
    pub fn swapped(self) -> Self {
        match self {
            Answer::PreferB => Answer::PreferC,
            Answer::PreferC => Answer::PreferB,
            Answer::Neither => Answer::Neither,
        }
    }
}

impl fmt::Display for Answer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Answer::PreferB => "B",
            Answer::PreferC => "C",
            Answer::Neither => "NEITHER",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Role {
    Active,
    Test,
    Trap,
}

/// Which probability model a fit or a question interface uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    /// Forced choice between b and c; `p_neither ≡ 0`.
    TwoAnswer,
    /// Shared embedding with a global `μ` and `d²`.
    ThreeAnswer,
    /// Shared embedding with per-user scaling, `μ_k` and `d²_k`.
    Personalized,
}

impl ModelKind {
    pub fn allows_neither(self) -> bool {
        !matches!(self, ModelKind::TwoAnswer)
    }

    pub fn tag(self) -> &'static str {
        match self {
            ModelKind::TwoAnswer => "two_answer",
            ModelKind::ThreeAnswer => "three_answer",
            ModelKind::Personalized => "personalized",
        }
    }

    /// Stable small integer, used to derive independent rng streams.
    pub fn code(self) -> u64 {
        match self {
            ModelKind::TwoAnswer => 2,
            ModelKind::ThreeAnswer => 3,
            ModelKind::Personalized => 4,
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

/// Ordered triple of object ids: head `a`, options `b` and `c`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Triple {
    pub a: String,
    pub b: String,
    pub c: String,
}

impl Triple {
    pub fn new(a: impl Into<String>, b: impl Into<String>, c: impl Into<String>) -> Self {
        Self { a: a.into(), b: b.into(), c: c.into() }
    }

    pub fn swapped(&self) -> Self {
        Self { a: self.a.clone(), b: self.c.clone(), c: self.b.clone() }
    }

    pub fn is_distinct(&self) -> bool {
        self.a != self.b && self.a != self.c && self.b != self.c
    }
}

/// One answered triple question.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub a: String,
    pub b: String,
    pub c: String,
    pub answer: Answer,
    pub user_id: String,
    pub role: Role,
    pub timestamp: DateTime<Utc>,
}

impl Observation {
    pub fn new(triple: Triple, answer: Answer, user_id: impl Into<String>, role: Role, timestamp: DateTime<Utc>) -> Self {
        Self { a: triple.a, b: triple.b, c: triple.c, answer, user_id: user_id.into(), role, timestamp }
    }

    pub fn triple(&self) -> Triple {
        Triple::new(self.a.clone(), self.b.clone(), self.c.clone())
    }

    /// Resolves ids against the dataset and checks the triple is distinct.
    pub fn indices(&self, dataset: &Dataset) -> Result<(usize, usize, usize)> {
        let (a, b, c) = (dataset.index_of(&self.a)?, dataset.index_of(&self.b)?, dataset.index_of(&self.c)?);
        if a == b || a == c || b == c {
            return Err(Error::InvalidObservation(format!(
                "objects must be distinct: ({}, {}, {})",
                self.a, self.b, self.c
            )));
        }
        Ok((a, b, c))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Verdict {
    Pending,
    Accepted,
    Rejected,
}

/// A question inside a batch. `expected` is the in-cluster option id for traps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchQuestion {
    pub triple: Triple,
    pub role: Role,
    pub expected: Option<String>,
}

/// Number of questions in one HIT.
pub const HIT_SIZE: usize = 12;

/// A 12-question unit of work, accepted or rejected as a whole.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HitBatch {
    pub batch_id: String,
    pub worker_id: String,
    questions: Vec<BatchQuestion>,
    answers: Option<Vec<Answer>>,
    verdict: Verdict,
}

impl HitBatch {
    pub fn new(
        batch_id: impl Into<String>,
        worker_id: impl Into<String>,
        questions: Vec<BatchQuestion>,
        composition: BatchComposition,
    ) -> Result<Self> {
        if questions.len() != HIT_SIZE {
            return Err(Error::InvalidBatch(format!(
                "a batch holds exactly {HIT_SIZE} questions, got {}",
                questions.len()
            )));
        }
        let count = |role| questions.iter().filter(|q| q.role == role).count();
        let got = (count(Role::Trap), count(Role::Active), count(Role::Test));
        if got != (composition.traps, composition.active, composition.test) {
            return Err(Error::InvalidBatch(format!(
                "role counts (trap, active, test) = {got:?} do not match composition {composition:?}"
            )));
        }
        if let Some(q) = questions.iter().find(|q| !q.triple.is_distinct()) {
            return Err(Error::InvalidBatch(format!("triple {:?} repeats an object", q.triple)));
        }
        if questions.iter().any(|q| (q.role == Role::Trap) != q.expected.is_some()) {
            return Err(Error::InvalidBatch("exactly the trap questions carry an expected answer".into()));
        }
        Ok(Self {
            batch_id: batch_id.into(),
            worker_id: worker_id.into(),
            questions,
            answers: None,
            verdict: Verdict::Pending,
        })
    }

    pub fn questions(&self) -> &[BatchQuestion] {
        &self.questions
    }

    pub fn answers(&self) -> Option<&[Answer]> {
        self.answers.as_deref()
    }

    pub fn verdict(&self) -> Verdict {
        self.verdict
    }

    pub fn record_answers(&mut self, answers: Vec<Answer>) -> Result<()> {
        if self.verdict != Verdict::Pending {
            return Err(Error::InvalidBatch(format!("batch `{}` is already judged", self.batch_id)));
        }
        if answers.len() != self.questions.len() {
            return Err(Error::InvalidBatch(format!(
                "expected {} answers, got {}",
                self.questions.len(),
                answers.len()
            )));
        }
        self.answers = Some(answers);
        Ok(())
    }

    /// `PENDING → ACCEPTED | REJECTED`; any other transition is an error.
    pub fn set_verdict(&mut self, verdict: Verdict) -> Result<()> {
        if self.verdict != Verdict::Pending || verdict == Verdict::Pending {
            return Err(Error::InvalidBatch(format!(
                "illegal verdict transition {:?} -> {verdict:?}",
                self.verdict
            )));
        }
        self.verdict = verdict;
        Ok(())
    }

    /// Pairs each answered question with its answer as an observation.
    pub fn observations(&self, timestamp: DateTime<Utc>) -> Result<Vec<Observation>> {
        let answers = self
            .answers
            .as_ref()
            .ok_or_else(|| Error::InvalidBatch(format!("batch `{}` has no answers", self.batch_id)))?;
        Ok(self
            .questions
            .iter()
            .zip(answers)
            .map(|(q, &ans)| Observation::new(q.triple.clone(), ans, self.worker_id.clone(), q.role, timestamp))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: &str, cluster: &str) -> ObjectRecord {
        ObjectRecord {
            id: id.into(),
            name: id.to_uppercase(),
            description: String::new(),
            image_ref: None,
            cluster: cluster.into(),
        }
    }

    #[test]
    fn hundred_records_eight_clusters() {
        let recs: Vec<_> = (0..100).map(|i| rec(&format!("m{i}"), &format!("g{}", i % 8))).collect();
        let ds = validate_dataset(recs).unwrap();
        assert_eq!(ds.len(), 100);
        assert_eq!(ds.cluster_count(), 8);
        assert_eq!(ds.index_of("m42").unwrap(), 42);
    }

    #[test]
    fn single_cluster_rejected() {
        let err = validate_dataset(vec![rec("a", "x"), rec("b", "x"), rec("c", "x")]).unwrap_err();
        assert!(err.to_string().contains("2 distinct clusters"), "{err}");
    }

    #[test]
    fn duplicate_id_rejected() {
        let err = validate_dataset(vec![rec("m7", "x"), rec("m7", "y"), rec("m8", "y")]).unwrap_err();
        assert!(err.to_string().contains("duplicate object id `m7`"), "{err}");
    }

    #[test]
    fn too_few_and_empty_cluster() {
        assert!(validate_dataset(vec![rec("a", "x"), rec("b", "y")]).is_err());
        assert!(validate_dataset(vec![rec("a", "x"), rec("b", "y"), rec("c", " ")]).is_err());
    }

    #[test]
    fn embedding_checks() {
        assert!(Embedding::new(3, 1, vec![0.0, 1.0, f64::NAN]).is_err());
        assert!(Embedding::new(2, 1, vec![0.0, 1.0]).is_err());
        assert!(Embedding::new(3, 0, vec![]).is_err());
        let e = Embedding::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]]).unwrap();
        assert_eq!(e.kernel(0, 2), 1.0);
        assert_eq!(e.row(1), &[0.0, 1.0]);
    }

    #[test]
    fn verdict_transitions() {
        let comp = BatchComposition::THREE_ANSWER;
        let mut qs = Vec::new();
        for i in 0..12 {
            let role = match i {
                0 | 1 => Role::Trap,
                2..=6 => Role::Active,
                _ => Role::Test,
            };
            let expected = (role == Role::Trap).then(|| "b".to_string());
            qs.push(BatchQuestion { triple: Triple::new("a", "b", "c"), role, expected });
        }
        let mut batch = HitBatch::new("h1", "w", qs.clone(), comp).unwrap();
        assert!(batch.set_verdict(Verdict::Pending).is_err());
        batch.set_verdict(Verdict::Rejected).unwrap();
        assert!(batch.set_verdict(Verdict::Accepted).is_err());

        assert!(HitBatch::new("h2", "w", qs[..11].to_vec(), comp).is_err());
        assert!(HitBatch::new("h3", "w", qs, BatchComposition::BASELINE).is_err());
    }

    #[test]
    fn observation_serde_round_trip() {
        let obs = Observation::new(
            Triple::new("a", "b", "c"),
            Answer::Neither,
            "worker-1",
            Role::Test,
            "2024-05-01T12:00:00.123Z".parse().unwrap(),
        );
        let text = serde_json::to_string(&obs).unwrap();
        assert!(text.contains("\"NEITHER\""));
        let back: Observation = serde_json::from_str(&text).unwrap();
        assert_eq!(back, obs);
    }

    #[test]
    fn short_answer_names_are_accepted() {
        let a: Vec<Answer> = serde_json::from_str(r#"["B", "C", "NEITHER", "PREFER_B"]"#).unwrap();
        assert_eq!(a, [Answer::PreferB, Answer::PreferC, Answer::Neither, Answer::PreferB]);
        assert_eq!(serde_json::to_string(&Answer::PreferC).unwrap(), "\"PREFER_C\"");
    }
}
