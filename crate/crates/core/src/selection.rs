//! Question selection, HIT assembly and trap-based acceptance.

use std::cmp::Ordering;
use std::collections::HashSet;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::domain::{Answer, BatchQuestion, Dataset, HitBatch, ModelKind, Role, Triple, Verdict, HIT_SIZE};
use crate::error::{Error, Result};
use crate::likelihood::{answer_probabilities_unchecked, entropy_bits, row_distance_sq, AnswerDistribution};
use crate::model::Model;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    Random,
    Entropy,
    InfoGain,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SelectionStrategy {
    pub kind: StrategyKind,
    pub candidate_pairs: usize,
    pub position_samples: usize,
    /// Standard deviation of the head perturbations; `None` means half the
    /// median pairwise distance of the current embedding.
    pub perturbation_scale: Option<f64>,
}

impl SelectionStrategy {
    pub fn new(kind: StrategyKind) -> Self {
        Self { kind, candidate_pairs: 50, position_samples: 20, perturbation_scale: None }
    }
}

impl Default for SelectionStrategy {
    fn default() -> Self {
        Self::new(StrategyKind::InfoGain)
    }
}

/// Role counts in one HIT.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchComposition {
    pub traps: usize,
    pub active: usize,
    pub test: usize,
}

impl BatchComposition {
    /// 2 traps, 5 active, 5 test.
    pub const THREE_ANSWER: Self = Self { traps: 2, active: 5, test: 5 };
    /// 2 traps, 10 active: the two-answer baseline.
    pub const BASELINE: Self = Self { traps: 2, active: 10, test: 0 };

    pub fn new(traps: usize, active: usize, test: usize) -> Result<Self> {
        let c = Self { traps, active, test };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.traps + self.active + self.test != HIT_SIZE {
            return Err(Error::InvalidBatch(format!(
                "composition {self:?} does not add up to {HIT_SIZE}"
            )));
        }
        Ok(())
    }

    pub fn default_for(kind: ModelKind) -> Self {
        match kind {
            ModelKind::TwoAnswer => Self::BASELINE,
            _ => Self::THREE_ANSWER,
        }
    }
}

/// `I(answer; position)` for a uniform prior over candidate head positions:
/// `H(mixture) − mean H(answer | position)`, in bits.
pub fn mutual_information(conditionals: &[AnswerDistribution]) -> f64 {
    if conditionals.is_empty() {
        return 0.0;
    }
    let k = conditionals.len() as f64;
    let mut mixture = [0.0; 3];
    let mut cond_entropy = 0.0;
    for d in conditionals {
        let p = d.as_array();
        for (m, v) in mixture.iter_mut().zip(p) {
            *m += v / k;
        }
        cond_entropy += entropy_bits(&p) / k;
    }
    (entropy_bits(&mixture) - cond_entropy).max(0.0)
}

fn scoring_kind(model: &Model) -> ModelKind {
    match model.kind {
        ModelKind::TwoAnswer => ModelKind::TwoAnswer,
        _ => ModelKind::ThreeAnswer,
    }
}

/// Half the median pairwise Euclidean distance of the embedding.
pub fn default_perturbation_scale(model: &Model) -> f64 {
    let e = &model.embedding;
    let mut d: Vec<f64> = Vec::with_capacity(e.n() * (e.n() - 1) / 2);
    for x in 0..e.n() {
        for y in x + 1..e.n() {
            d.push(row_distance_sq(e.row(x), e.row(y), None).sqrt());
        }
    }
    d.sort_by(f64::total_cmp);
    let m = d.len();
    let median = if m % 2 == 1 { d[m / 2] } else { 0.5 * (d[m / 2 - 1] + d[m / 2]) };
    0.5 * median
}

fn candidate_pairs(head: usize, n: usize, wanted: usize, rng: &mut impl Rng) -> Vec<(usize, usize)> {
    let others: Vec<usize> = (0..n).filter(|&i| i != head).collect();
    let total = others.len() * (others.len() - 1) / 2;
    if total <= wanted {
        let mut all = Vec::with_capacity(total);
        for (i, &b) in others.iter().enumerate() {
            for &c in &others[i + 1..] {
                all.push((b, c));
            }
        }
        return all;
    }
    let mut seen = HashSet::with_capacity(wanted);
    let mut out = Vec::with_capacity(wanted);
    while out.len() < wanted {
        let b = *others.choose(rng).expect("n >= 3");
        let c = *others.choose(rng).expect("n >= 3");
        if b == c {
            continue;
        }
        let key = (b.min(c), b.max(c));
        if seen.insert(key) {
            out.push(key);
        }
    }
    out
}

/// Picks the `(b, c)` options for head `a`. Without a model every strategy
/// degrades to a uniform random pair. The returned slot order is random.
pub fn select_question(
    head: usize,
    dataset: &Dataset,
    model: Option<&Model>,
    strategy: &SelectionStrategy,
    rng: &mut impl Rng,
) -> Result<Triple> {
    let n = dataset.len();
    if n < 3 {
        return Err(Error::Selection(format!("collection of {n} objects is too small")));
    }
    if head >= n {
        return Err(Error::Selection(format!("head index {head} out of range")));
    }
    if strategy.candidate_pairs == 0 || strategy.position_samples == 0 {
        return Err(Error::InvalidParameter("selection counts must be at least 1".into()));
    }
    let (b, c) = match (strategy.kind, model) {
        (StrategyKind::Random, _) | (_, None) => {
            let others: Vec<usize> = (0..n).filter(|&i| i != head).collect();
            let pick: Vec<usize> = others.choose_multiple(rng, 2).copied().collect();
            (pick[0], pick[1])
        }
        (kind, Some(model)) => {
            if model.embedding.n() != n {
                return Err(Error::Selection("model and dataset sizes differ".into()));
            }
            let pairs = candidate_pairs(head, n, strategy.candidate_pairs, rng);
            let scores = if kind == StrategyKind::InfoGain && strategy.position_samples > 1 {
                info_gain_scores(head, &pairs, model, strategy, rng)
            } else {
                entropy_scores(head, &pairs, model)
            };
            best_pair(&pairs, &scores, dataset)
        }
    };
    let (b, c) = if rng.random_bool(0.5) { (c, b) } else { (b, c) };
    Ok(Triple::new(dataset.id(head), dataset.id(b), dataset.id(c)))
}

/// Highest score; ties go to the lexicographically lowest `(b, c)` id pair.
fn best_pair(pairs: &[(usize, usize)], scores: &[f64], dataset: &Dataset) -> (usize, usize) {
    let key = |&(b, c): &(usize, usize)| {
        let (x, y) = (dataset.id(b), dataset.id(c));
        if x <= y {
            (x, y)
        } else {
            (y, x)
        }
    };
    let mut best = 0;
    for i in 1..pairs.len() {
        let ord = scores[i].total_cmp(&scores[best]);
        if ord == Ordering::Greater || (ord == Ordering::Equal && key(&pairs[i]) < key(&pairs[best])) {
            best = i;
        }
    }
    pairs[best]
}

fn entropy_scores(head: usize, pairs: &[(usize, usize)], model: &Model) -> Vec<f64> {
    let view = model.identity_view();
    let kind = scoring_kind(model);
    let e = &model.embedding;
    pairs
        .iter()
        .map(|&(b, c)| {
            let d_ab = row_distance_sq(e.row(head), e.row(b), None);
            let d_ac = row_distance_sq(e.row(head), e.row(c), None);
            answer_probabilities_unchecked(d_ab, d_ac, &view.params, kind).entropy()
        })
        .collect()
}

fn info_gain_scores(
    head: usize,
    pairs: &[(usize, usize)],
    model: &Model,
    strategy: &SelectionStrategy,
    rng: &mut impl Rng,
) -> Vec<f64> {
    let e = &model.embedding;
    let scale = strategy.perturbation_scale.unwrap_or_else(|| default_perturbation_scale(model));
    let noise = Normal::new(0.0, scale.max(f64::MIN_POSITIVE)).expect("finite scale");
    let positions: Vec<Vec<f64>> = (0..strategy.position_samples)
        .map(|_| e.row(head).iter().map(|v| v + noise.sample(rng)).collect())
        .collect();
    let view = model.identity_view();
    let kind = scoring_kind(model);
    pairs
        .iter()
        .map(|&(b, c)| {
            let conditionals: Vec<AnswerDistribution> = positions
                .iter()
                .map(|pos| {
                    let d_ab = row_distance_sq(pos, e.row(b), None);
                    let d_ac = row_distance_sq(pos, e.row(c), None);
                    answer_probabilities_unchecked(d_ab, d_ac, &view.params, kind)
                })
                .collect();
            mutual_information(&conditionals)
        })
        .collect()
}

/// A trap triple and the id of its in-cluster option.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrapQuestion {
    pub triple: Triple,
    pub expected: String,
}

/// One option from the head's cluster, one from another cluster, slot order random.
pub fn make_trap_question(dataset: &Dataset, rng: &mut impl Rng) -> Result<TrapQuestion> {
    if dataset.cluster_count() < 2 {
        return Err(Error::Selection("trap questions need at least 2 clusters".into()));
    }
    let n = dataset.len();
    let mut sizes = vec![0usize; dataset.cluster_count()];
    for i in 0..n {
        sizes[dataset.cluster_of(i)] += 1;
    }
    let heads: Vec<usize> = (0..n).filter(|&i| sizes[dataset.cluster_of(i)] >= 2).collect();
    let &head = heads
        .choose(rng)
        .ok_or_else(|| Error::Selection("no cluster has two members to form a trap".into()))?;
    let cluster = dataset.cluster_of(head);
    let same: Vec<usize> = (0..n).filter(|&i| i != head && dataset.cluster_of(i) == cluster).collect();
    let other: Vec<usize> = (0..n).filter(|&i| dataset.cluster_of(i) != cluster).collect();
    let &inside = same.choose(rng).expect("cluster has >= 2 members");
    let &outside = other.choose(rng).expect(">= 2 clusters");
    let (b, c) = if rng.random_bool(0.5) { (inside, outside) } else { (outside, inside) };
    Ok(TrapQuestion {
        triple: Triple::new(dataset.id(head), dataset.id(b), dataset.id(c)),
        expected: dataset.id(inside).to_owned(),
    })
}

/// Uniformly random triple of distinct objects.
pub fn random_triple(dataset: &Dataset, rng: &mut impl Rng) -> Triple {
    let idx = rand::seq::index::sample(rng, dataset.len(), 3);
    Triple::new(dataset.id(idx.index(0)), dataset.id(idx.index(1)), dataset.id(idx.index(2)))
}

/// Builds a HIT around given active triples: adds traps and distinct random
/// test triples, then shuffles the question order.
pub fn assemble_hit_with_active(
    batch_id: impl Into<String>,
    worker: impl Into<String>,
    dataset: &Dataset,
    active: Vec<Triple>,
    composition: BatchComposition,
    rng: &mut impl Rng,
) -> Result<HitBatch> {
    composition.validate()?;
    if active.len() != composition.active {
        return Err(Error::InvalidBatch(format!(
            "expected {} active questions, got {}",
            composition.active,
            active.len()
        )));
    }
    let mut questions = Vec::with_capacity(HIT_SIZE);
    for _ in 0..composition.traps {
        let trap = make_trap_question(dataset, rng)?;
        questions.push(BatchQuestion { triple: trap.triple, role: Role::Trap, expected: Some(trap.expected) });
    }
    questions.extend(active.into_iter().map(|triple| BatchQuestion { triple, role: Role::Active, expected: None }));
    let mut tests: HashSet<Triple> = HashSet::new();
    while tests.len() < composition.test {
        let t = random_triple(dataset, rng);
        if tests.insert(t.clone()) {
            questions.push(BatchQuestion { triple: t, role: Role::Test, expected: None });
        }
    }
    questions.shuffle(rng);
    HitBatch::new(batch_id, worker, questions, composition)
}

/// Assembles a HIT for a live worker: active heads are distinct random
/// objects, each asked with the strategy's chosen pair.
pub fn assemble_hit(
    batch_id: impl Into<String>,
    worker: impl Into<String>,
    dataset: &Dataset,
    model: Option<&Model>,
    composition: BatchComposition,
    strategy: &SelectionStrategy,
    rng: &mut impl Rng,
) -> Result<HitBatch> {
    composition.validate()?;
    let n = dataset.len();
    let heads: Vec<usize> = if composition.active <= n {
        rand::seq::index::sample(rng, n, composition.active).into_vec()
    } else {
        (0..composition.active).map(|_| rng.random_range(0..n)).collect()
    };
    let active = heads
        .into_iter()
        .map(|h| select_question(h, dataset, model, strategy, rng))
        .collect::<Result<Vec<_>>>()?;
    assemble_hit_with_active(batch_id, worker, dataset, active, composition, rng)
}

/// A question as shown to a worker: no role, no expected answer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkerQuestion {
    pub index: usize,
    pub a: String,
    pub b: String,
    pub c: String,
}

pub fn worker_view(batch: &HitBatch) -> Vec<WorkerQuestion> {
    batch
        .questions()
        .iter()
        .enumerate()
        .map(|(index, q)| WorkerQuestion { index, a: q.triple.a.clone(), b: q.triple.b.clone(), c: q.triple.c.clone() })
        .collect()
}

fn trap_passed(q: &BatchQuestion, answer: Answer) -> bool {
    let chosen = match answer {
        Answer::PreferB => &q.triple.b,
        Answer::PreferC => &q.triple.c,
        Answer::Neither => return false,
    };
    q.expected.as_deref() == Some(chosen.as_str())
}

/// Accepted iff at least one trap was answered with its in-cluster option.
pub fn judge(batch: &HitBatch) -> Result<Verdict> {
    let answers = batch
        .answers()
        .ok_or_else(|| Error::InvalidBatch(format!("batch `{}` is unanswered", batch.batch_id)))?;
    let passed = batch
        .questions()
        .iter()
        .zip(answers)
        .any(|(q, &a)| q.role == Role::Trap && trap_passed(q, a));
    Ok(if passed { Verdict::Accepted } else { Verdict::Rejected })
}

/// Applies [`judge`] and records the verdict on the batch.
pub fn judge_batch(batch: &mut HitBatch) -> Result<Verdict> {
    let verdict = judge(batch)?;
    batch.set_verdict(verdict)?;
    Ok(verdict)
}
