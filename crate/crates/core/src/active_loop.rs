//! Budgeted pool-based selection loop.
//!
//! The loop trains on an initial labeled set, scores the unlabeled pool once,
//! and then repeatedly takes the next `min(k, remaining)` candidates, has them
//! annotated, continues training and evaluates on the held-out set, until the
//! consumed-budget counter passes `B - K`.

use std::collections::{BTreeSet, HashMap, HashSet};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalConfig, EvalReport};
use crate::geometry::BoundingBox;
use crate::ids::ImageId;
use crate::sampler::{build_candidates, CandidateList, SelectionConfig, Strategy};
use crate::scoring::{score_all, PredictionRecord, ScoreConfig};
use crate::seed;

/// An image together with its oracle annotation.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatedImage {
    pub image_id: ImageId,
    pub boxes: Vec<BoundingBox>,
}

/// A trainable detector as seen by the loop.
pub trait ModelAdapter {
    type Model: Clone;

    /// Trains on `batch`. With `warm_start` the previous model's state is
    /// kept and `batch` is added to it; otherwise training starts fresh.
    fn train(&self, previous: Option<&Self::Model>, batch: &[AnnotatedImage], warm_start: bool) -> Result<Self::Model>;

    /// Runs inference; must be deterministic for a fixed model.
    fn infer(&self, model: &Self::Model, ids: &[ImageId]) -> Result<Vec<PredictionRecord>>;
}

/// Simulated human annotator backed by stored ground truth. Counts every
/// annotated image and refuses to annotate an image twice.
#[derive(Debug, Clone, Default)]
pub struct GroundTruthStore {
    boxes: HashMap<ImageId, Vec<BoundingBox>>,
    annotated: HashSet<ImageId>,
}

impl GroundTruthStore {
    pub fn new(boxes: HashMap<ImageId, Vec<BoundingBox>>) -> Self {
        Self {
            boxes,
            annotated: HashSet::new(),
        }
    }

    pub fn annotate(&mut self, ids: &[ImageId]) -> Result<Vec<AnnotatedImage>> {
        let mut batch = HashSet::new();
        for id in ids {
            if !self.boxes.contains_key(id) {
                return Err(Error::MissingGroundTruth(id.to_string()));
            }
            if self.annotated.contains(id) || !batch.insert(id) {
                return Err(Error::config(format!("image `{id}` was already annotated")));
            }
        }
        Ok(ids
            .iter()
            .map(|id| {
                self.annotated.insert(id.clone());
                AnnotatedImage {
                    image_id: id.clone(),
                    boxes: self.boxes[id].clone(),
                }
            })
            .collect())
    }

    /// Total number of images annotated so far.
    pub fn annotation_count(&self) -> usize {
        self.annotated.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Budget {
    /// Total annotation budget `B`, including the initial set.
    pub total: usize,
    /// Size `K` of the initial labeled set.
    pub initial: usize,
    /// Images added per round, `k`.
    pub step: usize,
    /// Starting value `ε` of the consumed-budget counter.
    pub start: usize,
}

impl Budget {
    /// Budget with the counter starting at one step.
    pub fn new(total: usize, initial: usize, step: usize) -> Self {
        Self {
            total,
            initial,
            step,
            start: step,
        }
    }

    pub fn remaining(&self) -> usize {
        self.total - self.initial
    }

    pub fn validate(&self) -> Result<()> {
        if self.initial > self.total {
            return Err(Error::config(format!(
                "initial set size K={} exceeds total budget B={}",
                self.initial, self.total
            )));
        }
        if self.step == 0 {
            return Err(Error::config("budget step k must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LoopMode {
    /// Score the pool once and consume the resulting list.
    #[default]
    Static,
    /// Re-run inference and rebuild the list after every round.
    Rescore,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainMode {
    /// Continue from the previous model with each new batch.
    #[default]
    WarmStart,
    /// Retrain from scratch on the newly selected images only.
    ColdNewOnly,
}

impl std::str::FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "warm-start" => Ok(TrainMode::WarmStart),
            "cold-new-only" => Ok(TrainMode::ColdNewOnly),
            other => Err(Error::config(format!(
                "unknown train mode `{other}` (expected warm-start|cold-new-only)"
            ))),
        }
    }
}

impl std::fmt::Display for TrainMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TrainMode::WarmStart => "warm-start",
            TrainMode::ColdNewOnly => "cold-new-only",
        })
    }
}

impl std::str::FromStr for LoopMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "static" => Ok(LoopMode::Static),
            "rescore" => Ok(LoopMode::Rescore),
            other => Err(Error::config(format!("unknown mode `{other}` (expected static|rescore)"))),
        }
    }
}

impl std::fmt::Display for LoopMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LoopMode::Static => "static",
            LoopMode::Rescore => "rescore",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoopConfig {
    pub strategy: Strategy,
    pub budget: Budget,
    pub mode: LoopMode,
    pub train_mode: TrainMode,
    pub seed: u64,
    pub score: ScoreConfig,
    pub selection: SelectionConfig,
    pub eval: EvalConfig,
}

impl LoopConfig {
    pub fn new(strategy: Strategy, budget: Budget, seed: u64) -> Self {
        Self {
            strategy,
            budget,
            mode: LoopMode::default(),
            train_mode: TrainMode::default(),
            seed,
            score: ScoreConfig::default(),
            selection: SelectionConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

/// Pool bookkeeping: labeled, newly labeled and unlabeled sets partition the
/// training pool.
#[derive(Debug, Clone, PartialEq)]
pub struct BudgetState {
    pub budget: Budget,
    /// Consumed-budget counter `b`.
    pub consumed: usize,
    pub labeled: BTreeSet<ImageId>,
    pub new_labeled: BTreeSet<ImageId>,
    pub unlabeled: BTreeSet<ImageId>,
}

impl BudgetState {
    pub fn pool_size(&self) -> usize {
        self.labeled.len() + self.new_labeled.len() + self.unlabeled.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionRound {
    pub round_index: usize,
    pub strategy: Strategy,
    pub picked_ids: Vec<ImageId>,
    /// Counter `b` after this round.
    pub budget_consumed: usize,
    /// Labeled images after this round, initial set included.
    pub cumulative_labeled: usize,
    pub labeled_size: usize,
    pub new_labeled_size: usize,
    pub unlabeled_size: usize,
    /// Set when the candidate list ran dry before the round's quota.
    pub truncated: bool,
    pub metrics: EvalReport,
}

#[derive(Debug, Clone)]
pub struct LoopOutcome<M> {
    pub model: M,
    pub initial_metrics: EvalReport,
    pub rounds: Vec<SelectionRound>,
    pub state: BudgetState,
    /// The candidate list ran out before the budget was spent.
    pub truncated: bool,
    pub annotation_count: usize,
    /// Number of inference passes over the unlabeled pool.
    pub pool_inference_calls: usize,
}

fn adapter_err(round: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::Adapter { .. } => e,
        other => Error::Adapter {
            round,
            message: other.to_string(),
        },
    }
}

fn candidates_for<A: ModelAdapter>(
    adapter: &A,
    model: &A::Model,
    unlabeled: &BTreeSet<ImageId>,
    config: &LoopConfig,
    list_seed: u64,
    round: usize,
) -> Result<CandidateList> {
    let ids: Vec<ImageId> = unlabeled.iter().cloned().collect();
    let preds = adapter.infer(model, &ids).map_err(adapter_err(round))?;
    let scores = score_all(&preds, &config.score)?;
    build_candidates(config.strategy, &scores, &config.selection, list_seed)
}

fn evaluate_model<A: ModelAdapter>(
    adapter: &A,
    model: &A::Model,
    test: &Dataset,
    gt: &HashMap<ImageId, Vec<BoundingBox>>,
    config: &EvalConfig,
    round: usize,
) -> Result<EvalReport> {
    let preds = adapter.infer(model, &test.ids()).map_err(adapter_err(round))?;
    evaluate(&preds, gt, config)
}

/// Runs inference on the test set and scores it.
pub fn evaluate_round<A: ModelAdapter>(adapter: &A, model: &A::Model, test: &Dataset, config: &EvalConfig) -> Result<EvalReport> {
    evaluate_model(adapter, model, test, &test.ground_truth(), config, 0)
}

/// Executes the selection loop over `pool`, evaluating on `test` after
/// every round.
pub fn run_loop<A: ModelAdapter>(pool: &Dataset, test: &Dataset, adapter: &A, config: &LoopConfig) -> Result<LoopOutcome<A::Model>> {
    let budget = config.budget;
    budget.validate()?;
    if budget.initial > pool.len() {
        return Err(Error::config(format!(
            "initial set size K={} exceeds pool of {} images",
            budget.initial,
            pool.len()
        )));
    }
    let warm = config.train_mode == TrainMode::WarmStart;
    let test_gt = test.ground_truth();
    let mut oracle = GroundTruthStore::new(pool.ground_truth());

    // Initial labeled set: the first K pool images in a seeded order.
    let mut order = pool.ids();
    order.shuffle(&mut seed::rng(seed::derive(config.seed, 0x696e_6974)));
    let initial_ids: Vec<ImageId> = order[..budget.initial].to_vec();
    let mut state = BudgetState {
        budget,
        consumed: budget.start,
        labeled: initial_ids.iter().cloned().collect(),
        new_labeled: BTreeSet::new(),
        unlabeled: order[budget.initial..].iter().cloned().collect(),
    };

    let initial_batch = oracle.annotate(&initial_ids)?;
    let mut model = adapter.train(None, &initial_batch, false).map_err(adapter_err(0))?;
    let initial_metrics = evaluate_model(adapter, &model, test, &test_gt, &config.eval, 0)?;

    let mut pool_inference_calls = 1;
    let mut candidates = candidates_for(adapter, &model, &state.unlabeled, config, config.seed, 0)?;
    let mut new_annotations: Vec<AnnotatedImage> = Vec::new();
    let mut rounds = Vec::new();
    let mut truncated = false;
    let remaining = budget.remaining();

    while state.consumed <= remaining {
        let round = rounds.len() + 1;
        let quota = budget.step.min(remaining - state.new_labeled.len());
        if quota == 0 {
            break;
        }
        let picked: Vec<ImageId> = candidates
            .take_front(quota)
            .into_iter()
            .map(|c| c.image_id)
            .collect();
        let short = picked.len() < quota;
        if picked.is_empty() {
            truncated = true;
            break;
        }
        let batch = oracle.annotate(&picked)?;
        for id in &picked {
            state.unlabeled.remove(id);
            state.new_labeled.insert(id.clone());
        }
        new_annotations.extend(batch.iter().cloned());
        model = if warm {
            adapter.train(Some(&model), &batch, true)
        } else {
            adapter.train(None, &new_annotations, false)
        }
        .map_err(adapter_err(round))?;
        let metrics = evaluate_model(adapter, &model, test, &test_gt, &config.eval, round)?;
        state.consumed += picked.len();
        rounds.push(SelectionRound {
            round_index: round,
            strategy: config.strategy,
            picked_ids: picked,
            budget_consumed: state.consumed,
            cumulative_labeled: state.labeled.len() + state.new_labeled.len(),
            labeled_size: state.labeled.len(),
            new_labeled_size: state.new_labeled.len(),
            unlabeled_size: state.unlabeled.len(),
            truncated: short,
            metrics,
        });
        if short {
            truncated = true;
            break;
        }
        if config.mode == LoopMode::Rescore && state.consumed <= remaining && !state.unlabeled.is_empty() {
            let list_seed = seed::derive(config.seed, round as u64);
            candidates = candidates_for(adapter, &model, &state.unlabeled, config, list_seed, round)?;
            pool_inference_calls += 1;
        }
    }

    Ok(LoopOutcome {
        model,
        initial_metrics,
        rounds,
        truncated,
        annotation_count: oracle.annotation_count(),
        state,
        pool_inference_calls,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::DatasetRecord;
    use crate::scoring::Detection;
    use std::cell::Cell;

    /// Remembers how many labeled images it has seen and predicts ground truth
    /// for the first `seen` test images it is asked about.
    struct CountingAdapter {
        gt: HashMap<ImageId, Vec<BoundingBox>>,
        infer_calls: Cell<usize>,
        fail_on_train: Option<usize>,
    }

    impl ModelAdapter for CountingAdapter {
        type Model = usize;

        fn train(&self, previous: Option<&usize>, batch: &[AnnotatedImage], warm_start: bool) -> Result<usize> {
            let base = if warm_start { previous.copied().unwrap_or(0) } else { 0 };
            let next = base + batch.len();
            if self.fail_on_train == Some(next) {
                return Err(Error::config("gpu on fire"));
            }
            Ok(next)
        }

        fn infer(&self, model: &usize, ids: &[ImageId]) -> Result<Vec<PredictionRecord>> {
            self.infer_calls.set(self.infer_calls.get() + 1);
            Ok(ids
                .iter()
                .enumerate()
                .map(|(i, id)| {
                    let dets = if i < *model {
                        self.gt.get(id).map_or(vec![], |b| {
                            b.iter().map(|&bb| Detection { bbox: bb, confidence: 0.9 }).collect()
                        })
                    } else {
                        vec![]
                    };
                    PredictionRecord::new(id.clone(), 100, 100).with_detections(dets)
                })
                .collect())
        }
    }

    fn dataset(prefix: &str, n: usize) -> Dataset {
        Dataset::new(
            (0..n)
                .map(|i| DatasetRecord {
                    image_id: ImageId::new(format!("{prefix}{i:03}")),
                    width: 100,
                    height: 100,
                    gt_boxes: (0..=(i % 3)).map(|t| BoundingBox::new(t as f64 * 30.0, 0.0, t as f64 * 30.0 + 20.0, 20.0).unwrap()).collect(),
                    hardness: None,
                })
                .collect(),
        )
        .unwrap()
    }

    fn adapter(pool: &Dataset, test: &Dataset) -> CountingAdapter {
        let mut gt = pool.ground_truth();
        gt.extend(test.ground_truth());
        CountingAdapter {
            gt,
            infer_calls: Cell::new(0),
            fail_on_train: None,
        }
    }

    #[test]
    fn annotate_examples() {
        let ds = dataset("a", 3);
        let mut store = GroundTruthStore::new(ds.ground_truth());
        assert!(store.annotate(&[]).unwrap().is_empty());
        let out = store.annotate(&ds.ids()).unwrap();
        assert_eq!(out.len(), 3);
        assert_eq!(out.iter().map(|a| a.boxes.len()).sum::<usize>(), 6);
        assert!(store.annotate(&ds.ids()[..1]).is_err());
        assert!(matches!(store.annotate(&["nope".into()]), Err(Error::MissingGroundTruth(id)) if id == "nope"));

        let ds = dataset("b", 4);
        let mut store = GroundTruthStore::new(ds.ground_truth());
        let ids = ds.ids();
        store.annotate(&ids[..2]).unwrap();
        store.annotate(&ids[2..]).unwrap();
        assert_eq!(store.annotation_count(), 4);
    }

    #[test]
    fn small_budget_trace() {
        let (pool, test) = (dataset("p", 20), dataset("t", 5));
        let a = adapter(&pool, &test);
        let cfg = LoopConfig::new(Strategy::Random, Budget { total: 6, initial: 2, step: 2, start: 2 }, 1);
        let out = run_loop(&pool, &test, &a, &cfg).unwrap();
        assert_eq!(out.rounds.len(), 2);
        assert_eq!(out.state.new_labeled.len(), 4);
        assert_eq!(out.annotation_count, 6);
        assert_eq!(out.rounds.iter().map(|r| r.budget_consumed).collect::<Vec<_>>(), vec![4, 6]);
        for r in &out.rounds {
            assert_eq!(r.labeled_size + r.new_labeled_size + r.unlabeled_size, 20);
        }
        assert!(!out.truncated);
    }

    #[test]
    fn single_pass_when_step_covers_budget() {
        let (pool, test) = (dataset("p", 30), dataset("t", 5));
        let a = adapter(&pool, &test);
        let cfg = LoopConfig::new(Strategy::Random, Budget { total: 12, initial: 4, step: 10, start: 3 }, 2);
        let out = run_loop(&pool, &test, &a, &cfg).unwrap();
        assert_eq!(out.rounds.len(), 1);
        assert_eq!(out.rounds[0].picked_ids.len(), 8);
    }

    #[test]
    fn clamps_when_counter_starts_low() {
        let (pool, test) = (dataset("p", 30), dataset("t", 5));
        let a = adapter(&pool, &test);
        let cfg = LoopConfig::new(Strategy::Random, Budget { total: 10, initial: 2, step: 3, start: 0 }, 2);
        let out = run_loop(&pool, &test, &a, &cfg).unwrap();
        let sizes: Vec<usize> = out.rounds.iter().map(|r| r.picked_ids.len()).collect();
        assert_eq!(sizes, vec![3, 3, 2]);
        assert_eq!(out.state.new_labeled.len(), 8);
    }

    #[test]
    fn static_mode_infers_pool_once() {
        let (pool, test) = (dataset("p", 40), dataset("t", 5));
        let a = adapter(&pool, &test);
        let cfg = LoopConfig::new(Strategy::Entropy, Budget::new(30, 5, 5), 3);
        let out = run_loop(&pool, &test, &a, &cfg).unwrap();
        assert_eq!(out.pool_inference_calls, 1);
        // One pool pass plus one test pass per round and one for the initial model.
        assert_eq!(a.infer_calls.get(), 1 + 1 + out.rounds.len());

        let cfg = LoopConfig { mode: LoopMode::Rescore, ..cfg };
        let out = run_loop(&pool, &test, &a, &cfg).unwrap();
        assert_eq!(out.pool_inference_calls, out.rounds.len());
    }

    #[test]
    fn exhausted_candidates_truncate() {
        let (pool, test) = (dataset("p", 8), dataset("t", 3));
        let a = adapter(&pool, &test);
        let cfg = LoopConfig::new(Strategy::Random, Budget::new(20, 2, 4), 0);
        let out = run_loop(&pool, &test, &a, &cfg).unwrap();
        assert!(out.truncated);
        assert_eq!(out.state.unlabeled.len(), 0);
        assert_eq!(out.rounds.last().unwrap().picked_ids.len(), 2);
    }

    #[test]
    fn adapter_failure_carries_round() {
        let (pool, test) = (dataset("p", 20), dataset("t", 3));
        let mut a = adapter(&pool, &test);
        a.fail_on_train = Some(6);
        let cfg = LoopConfig::new(Strategy::Random, Budget::new(10, 2, 2), 0);
        match run_loop(&pool, &test, &a, &cfg) {
            Err(Error::Adapter { round, message }) => {
                assert_eq!(round, 2);
                assert!(message.contains("gpu on fire"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn invalid_budgets_rejected() {
        let (pool, test) = (dataset("p", 5), dataset("t", 1));
        let a = adapter(&pool, &test);
        for b in [Budget::new(3, 4, 1), Budget::new(10, 2, 0), Budget::new(10, 6, 1)] {
            let cfg = LoopConfig::new(Strategy::Random, b, 0);
            assert!(matches!(run_loop(&pool, &test, &a, &cfg), Err(Error::Config(_))));
        }
    }

    #[test]
    fn cold_mode_retrains_on_new_only() {
        let (pool, test) = (dataset("p", 20), dataset("t", 3));
        let a = adapter(&pool, &test);
        let cfg = LoopConfig {
            train_mode: TrainMode::ColdNewOnly,
            ..LoopConfig::new(Strategy::Random, Budget::new(10, 4, 2), 0)
        };
        let out = run_loop(&pool, &test, &a, &cfg).unwrap();
        assert_eq!(out.model, out.state.new_labeled.len());
        let warm = run_loop(&pool, &test, &a, &LoopConfig { train_mode: TrainMode::WarmStart, ..cfg }).unwrap();
        assert_eq!(warm.model, 4 + warm.state.new_labeled.len());
    }

    #[test]
    fn evaluate_round_extremes() {
        let (pool, test) = (dataset("p", 3), dataset("t", 4));
        let a = adapter(&pool, &test);
        let perfect = evaluate_round(&a, &100, &test, &EvalConfig::default()).unwrap();
        assert_eq!(perfect.map_50, 1.0);
        let blind = evaluate_round(&a, &0, &test, &EvalConfig::default()).unwrap();
        assert_eq!(blind.map_50, 0.0);
    }
}
