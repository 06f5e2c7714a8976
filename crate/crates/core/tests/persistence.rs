use chrono::DateTime;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use triadic_core::optimizer::{fit, OptimizerConfig};
use triadic_core::selection::{assemble_hit, judge_batch, BatchComposition, SelectionStrategy};
use triadic_core::simulator::{generate_truth, sample_answer, TruthConfig};
use triadic_core::store::{load_checkpoint, load_dataset, save_checkpoint, Checkpoint, ObservationLog};
use triadic_core::{ModelKind, PriorConfig, Verdict};

#[test]
fn sample_dataset_loads() {
    let ds = load_dataset(concat!(env!("CARGO_MANIFEST_DIR"), "/data/sample.jsonl")).unwrap();
    assert_eq!(ds.len(), 12);
    assert_eq!(ds.cluster_count(), 3);
}

#[test]
fn replayed_log_gives_the_same_fit_and_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let log_path = dir.path().join("observations.jsonl");
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let truth = generate_truth(&TruthConfig { objects: 12, clusters: 3, ..TruthConfig::default() }, &mut rng).unwrap();
    let mut log = ObservationLog::open(&log_path).unwrap();
    let mut accepted = 0;
    for b in 0..20 {
        let user = b % truth.users.len();
        let mut batch = assemble_hit(
            format!("b{b}"),
            truth.users[user].user_id.clone(),
            &truth.dataset,
            None,
            BatchComposition::THREE_ANSWER,
            &SelectionStrategy::default(),
            &mut rng,
        )
        .unwrap();
        let answers = batch
            .questions()
            .iter()
            .map(|q| sample_answer(&truth, user, &q.triple, ModelKind::ThreeAnswer, &mut rng).unwrap())
            .collect();
        batch.record_answers(answers).unwrap();
        if judge_batch(&mut batch).unwrap() == Verdict::Accepted {
            log.append_batch(&batch, DateTime::from_timestamp(1_700_000_000 + b as i64, 0).unwrap()).unwrap();
            accepted += 1;
        } else {
            assert!(log.append_batch(&batch, DateTime::from_timestamp(0, 0).unwrap()).is_err());
        }
    }
    assert!(accepted > 0);
    assert_eq!(log.len(), 12 * accepted);

    let cfg = OptimizerConfig { seed: 5, ..OptimizerConfig::default() };
    let live = fit(&log.observations(), &truth.dataset, 2, ModelKind::Personalized, &cfg, &PriorConfig::default()).unwrap();
    let replayed = ObservationLog::open(&log_path).unwrap();
    let again = fit(&replayed.observations(), &truth.dataset, 2, ModelKind::Personalized, &cfg, &PriorConfig::default()).unwrap();
    assert_eq!(live, again);

    let (p1, p2) = (dir.path().join("one.json"), dir.path().join("two.json"));
    save_checkpoint(&p1, &Checkpoint::from_model(&live.model, &truth.dataset, cfg, log.len())).unwrap();
    save_checkpoint(&p2, &Checkpoint::from_model(&again.model, &truth.dataset, cfg, replayed.len())).unwrap();
    assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    assert_eq!(load_checkpoint(&p1).unwrap().to_model().unwrap(), live.model);
}
