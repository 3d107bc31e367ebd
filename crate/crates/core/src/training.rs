//! Supervised training with early stopping, pseudo-label selection for
//! self-training, and the weak-supervision regimes.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

use crate::autograd::{adam_step, AdamState, Tape};
use crate::corpus::{seed_from, TweetRecord};
use crate::evaluation::compute_metrics;
use crate::models::{combined_loss, EncodedTweet, Model, ModelError, ModelSpec, Task};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Autograd(#[from] crate::autograd::AutogradError),
    #[error(transparent)]
    Eval(#[from] crate::evaluation::EvalError),
    #[error("empty training set")]
    EmptyTrainSet,
    #[error("empty dev set")]
    EmptyDevSet,
    #[error("empty candidate pool")]
    EmptyPool,
    #[error("top percentage {0} outside (0, 100]")]
    BadPercentage(f64),
    #[error("regime requires a non-empty {0} set")]
    EmptySets(&'static str),
    #[error("example missing a target for task {0:?}")]
    MissingTarget(Task),
}

type Result<T> = std::result::Result<T, TrainError>;

/// One labeled training example: encoded tokens plus class indices for
/// every supervised task.
#[derive(Debug, Clone)]
pub struct TrainExample {
    pub tweet: EncodedTweet,
    pub targets: BTreeMap<Task, usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMetric {
    /// Dev accuracy on one task.
    Accuracy(Task),
    /// Mean dev accuracy over the supervised tasks.
    MeanAccuracy,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub selection: SelectionMetric,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            max_epochs: 15,
            patience: 5,
            batch_size: 8,
            learning_rate: 1e-3,
            seed: 0,
            selection: SelectionMetric::MeanAccuracy,
        }
    }
}

/// Per-epoch history row; absent tasks stay out of the maps and render as
/// blank CSV cells.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_acc: BTreeMap<Task, f64>,
    pub dev_f1: BTreeMap<Task, f64>,
}

#[derive(Debug)]
pub struct TrainResult {
    pub history: Vec<EpochRow>,
    pub best_epoch: usize,
    pub best_metric: f64,
    /// Parameter snapshot from the best epoch, in declared order. The
    /// trained model is restored to this snapshot before return.
    pub best_params: Vec<Vec<f64>>,
}

fn check_targets(set: &[TrainExample], tasks: &[Task]) -> Result<()> {
    for ex in set {
        for t in tasks {
            if !ex.targets.contains_key(t) {
                return Err(TrainError::MissingTarget(*t));
            }
        }
    }
    Ok(())
}

/// Evaluate `model` on `dev` in eval mode; returns (accuracy, macro-F1)
/// per task on the 0-100 scale.
pub fn evaluate(
    model: &Model,
    dev: &[TrainExample],
) -> Result<(BTreeMap<Task, f64>, BTreeMap<Task, f64>)> {
    let tasks = model.spec.tasks();
    let mut y_true: BTreeMap<Task, Vec<String>> = BTreeMap::new();
    let mut y_pred: BTreeMap<Task, Vec<String>> = BTreeMap::new();
    for chunk in dev.chunks(64) {
        let tweets: Vec<EncodedTweet> = chunk.iter().map(|e| e.tweet.clone()).collect();
        let tape = Tape::new();
        let out = model.forward_batch(&tape, &tweets, None, false, 0)?;
        for (task, rows) in &out.probs {
            for (i, row) in rows.iter().enumerate() {
                let pred = argmax(row);
                y_pred.entry(*task).or_default().push(pred.to_string());
                y_true
                    .entry(*task)
                    .or_default()
                    .push(chunk[i].targets[task].to_string());
            }
        }
    }
    let mut acc = BTreeMap::new();
    let mut f1 = BTreeMap::new();
    for task in tasks {
        let classes: Vec<String> = (0..model.spec.class_counts[&task])
            .map(|c| c.to_string())
            .collect();
        let m = compute_metrics(&y_true[&task], &y_pred[&task], &classes)?;
        acc.insert(task, m.accuracy);
        f1.insert(task, m.macro_f1);
    }
    Ok((acc, f1))
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

fn selection_value(sel: SelectionMetric, acc: &BTreeMap<Task, f64>) -> f64 {
    match sel {
        SelectionMetric::Accuracy(t) => acc.get(&t).copied().unwrap_or(0.0),
        SelectionMetric::MeanAccuracy => {
            acc.values().sum::<f64>() / acc.len().max(1) as f64
        }
    }
}

/// Train with Adam and early stopping.
///
/// Each epoch shuffles the training set with a seed derived from
/// (`config.seed`, epoch), so a fixed config replays the exact batch
/// order. Improvement is strict (`>`); training stops once `patience`
/// consecutive epochs fail to improve the selection metric, and the model
/// is restored to the best epoch's parameters.
pub fn train(model: &Model, train_set: &[TrainExample], dev: &[TrainExample], config: &TrainConfig) -> Result<TrainResult> {
    if train_set.is_empty() {
        return Err(TrainError::EmptyTrainSet);
    }
    if dev.is_empty() {
        return Err(TrainError::EmptyDevSet);
    }
    let tasks = model.spec.tasks();
    check_targets(train_set, &tasks)?;
    check_targets(dev, &tasks)?;

    let mut adam = AdamState::new(config.learning_rate);
    let mut history = Vec::new();
    let mut best_epoch = 0usize;
    let mut best_metric = f64::NEG_INFINITY;
    let mut best_params = model.param_values();

    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 1..=config.max_epochs {
        let mut rng =
            ChaCha8Rng::seed_from_u64(seed_from(&["epoch", &epoch.to_string()], config.seed));
        order.shuffle(&mut rng);

        let mut loss_sum = 0.0;
        let mut n_batches = 0usize;
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let tweets: Vec<EncodedTweet> =
                chunk.iter().map(|&i| train_set[i].tweet.clone()).collect();
            let targets: Vec<BTreeMap<Task, usize>> =
                chunk.iter().map(|&i| train_set[i].targets.clone()).collect();
            let tape = Tape::new();
            let dropout_seed =
                seed_from(&["dropout", &epoch.to_string(), &b.to_string()], config.seed);
            let out = model.forward_batch(&tape, &tweets, Some(&targets), true, dropout_seed)?;
            let loss = combined_loss(&out.losses)?;
            loss_sum += loss.item();
            n_batches += 1;
            loss.backward()?;
            tape.flush_param_grads();
            adam_step(model.parameters(), &mut adam)?;
        }

        let (dev_acc, dev_f1) = evaluate(model, dev)?;
        let metric = selection_value(config.selection, &dev_acc);
        history.push(EpochRow {
            epoch,
            train_loss: loss_sum / n_batches.max(1) as f64,
            dev_acc,
            dev_f1,
        });
        if metric > best_metric {
            best_metric = metric;
            best_epoch = epoch;
            best_params = model.param_values();
        } else if epoch - best_epoch >= config.patience {
            break;
        }
    }

    model.set_param_values(&best_params);
    Ok(TrainResult { history, best_epoch, best_metric, best_params })
}

/// Render training history as CSV. Tasks absent from a run leave their
/// columns blank.
pub fn history_to_csv(history: &[EpochRow]) -> String {
    let mut out = String::from(
        "epoch,train_loss,dev_acc_city,dev_acc_state,dev_acc_country,dev_f1_city,dev_f1_state,dev_f1_country\n",
    );
    let cell = |m: &BTreeMap<Task, f64>, t: Task| {
        m.get(&t).map(|v| format!("{v:.6}")).unwrap_or_default()
    };
    for row in history {
        out.push_str(&format!(
            "{},{:.6},{},{},{},{},{},{}\n",
            row.epoch,
            row.train_loss,
            cell(&row.dev_acc, Task::City),
            cell(&row.dev_acc, Task::State),
            cell(&row.dev_acc, Task::Country),
            cell(&row.dev_f1, Task::City),
            cell(&row.dev_f1, Task::State),
            cell(&row.dev_f1, Task::Country),
        ));
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectMode {
    /// Top p% of the whole filtered pool.
    ClassAgnostic,
    /// Top p% within each predicted class.
    ClassSpecific,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SelfTrainConfig {
    pub mode: SelectMode,
    pub top_pct: f64,
    pub task: Task,
    /// Optional pool filters; all default to off.
    #[serde(default)]
    pub min_tokens: Option<usize>,
    #[serde(default)]
    pub require_zero_diacritics: bool,
    #[serde(default)]
    pub replies_only: bool,
}

/// One unlabeled pool tweet with the model's prediction attached.
#[derive(Debug, Clone)]
pub struct PoolItem {
    pub record: TweetRecord,
    pub predicted: usize,
    /// Probability of the predicted class.
    pub confidence: f64,
}

const ARABIC_DIACRITICS: std::ops::RangeInclusive<char> = '\u{064B}'..='\u{065F}';

fn passes_filters(item: &PoolItem, cfg: &SelfTrainConfig) -> bool {
    if let Some(min) = cfg.min_tokens {
        if item.record.mask_len < min {
            return false;
        }
    }
    if cfg.require_zero_diacritics
        && item
            .record
            .raw_text
            .chars()
            .any(|c| ARABIC_DIACRITICS.contains(&c) || c == '\u{0670}')
    {
        return false;
    }
    if cfg.replies_only && !item.record.raw_text.starts_with('@') {
        return false;
    }
    true
}

fn take_count(n: usize, pct: f64) -> usize {
    (n as f64 * pct / 100.0).ceil() as usize
}

/// Select pseudo-label candidates: the most confident ceil(N * p / 100)
/// items, ranked by confidence descending with ties broken by ascending
/// tweet id. Returns indices into `pool`.
pub fn self_train_select(pool: &[PoolItem], cfg: &SelfTrainConfig) -> Result<Vec<usize>> {
    if !(cfg.top_pct > 0.0 && cfg.top_pct <= 100.0) {
        return Err(TrainError::BadPercentage(cfg.top_pct));
    }
    let filtered: Vec<usize> = (0..pool.len())
        .filter(|&i| passes_filters(&pool[i], cfg))
        .collect();
    if filtered.is_empty() {
        return Err(TrainError::EmptyPool);
    }
    let rank = |a: &usize, b: &usize| {
        pool[*b]
            .confidence
            .partial_cmp(&pool[*a].confidence)
            .unwrap()
            .then_with(|| pool[*a].record.tweet_id.cmp(&pool[*b].record.tweet_id))
    };
    let mut picked = match cfg.mode {
        SelectMode::ClassAgnostic => {
            let mut order = filtered;
            order.sort_by(rank);
            order.truncate(take_count(order.len(), cfg.top_pct));
            order
        }
        SelectMode::ClassSpecific => {
            let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
            for i in filtered {
                by_class.entry(pool[i].predicted).or_default().push(i);
            }
            let mut out = Vec::new();
            for (_, mut members) in by_class {
                members.sort_by(rank);
                members.truncate(take_count(members.len(), cfg.top_pct));
                out.extend(members);
            }
            out
        }
    };
    picked.sort_unstable();
    Ok(picked)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeakRegime {
    /// Weakly labeled tweets only.
    Weak,
    /// Weak and gold pooled into one training set.
    WeakPlusGold,
    /// Train on weak, then continue on gold from the weak phase's best
    /// checkpoint.
    WeakThenGold,
}

impl std::str::FromStr for WeakRegime {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "weak" => Ok(WeakRegime::Weak),
            "weak_plus_gold" => Ok(WeakRegime::WeakPlusGold),
            "weak_then_gold" => Ok(WeakRegime::WeakThenGold),
            other => Err(format!("unknown regime {other:?}")),
        }
    }
}

pub struct RegimeOutcome {
    pub model: Model,
    /// Training set size per phase.
    pub phase_sizes: Vec<usize>,
    pub phase_results: Vec<TrainResult>,
    /// Parameters phase 2 started from (WeakThenGold only); bitwise equal
    /// to phase 1's best snapshot.
    pub phase2_init: Option<Vec<Vec<f64>>>,
}

/// Run one weak-supervision regime. Dev (and any later test evaluation)
/// always uses gold labels regardless of regime.
pub fn run_weak_regime(
    spec: ModelSpec,
    seed: u64,
    weak: &[TrainExample],
    gold: &[TrainExample],
    dev: &[TrainExample],
    config: &TrainConfig,
    regime: WeakRegime,
) -> Result<RegimeOutcome> {
    if weak.is_empty() {
        return Err(TrainError::EmptySets("weak"));
    }
    if dev.is_empty() {
        return Err(TrainError::EmptySets("dev"));
    }
    if regime != WeakRegime::Weak && gold.is_empty() {
        return Err(TrainError::EmptySets("gold"));
    }
    let model = Model::build(spec, seed)?;
    match regime {
        WeakRegime::Weak => {
            let r = train(&model, weak, dev, config)?;
            Ok(RegimeOutcome {
                model,
                phase_sizes: vec![weak.len()],
                phase_results: vec![r],
                phase2_init: None,
            })
        }
        WeakRegime::WeakPlusGold => {
            let mut pooled = weak.to_vec();
            pooled.extend_from_slice(gold);
            let size = pooled.len();
            let r = train(&model, &pooled, dev, config)?;
            Ok(RegimeOutcome {
                model,
                phase_sizes: vec![size],
                phase_results: vec![r],
                phase2_init: None,
            })
        }
        WeakRegime::WeakThenGold => {
            let r1 = train(&model, weak, dev, config)?;
            // r1 restored the model to its best snapshot; phase 2 starts
            // exactly there, with fresh optimizer state.
            let init = model.param_values();
            let mut cfg2 = config.clone();
            cfg2.seed = seed_from(&["phase2"], config.seed);
            let r2 = train(&model, gold, dev, &cfg2)?;
            Ok(RegimeOutcome {
                model,
                phase_sizes: vec![weak.len(), gold.len()],
                phase_results: vec![r1, r2],
                phase2_init: Some(init),
            })
        }
    }
}
