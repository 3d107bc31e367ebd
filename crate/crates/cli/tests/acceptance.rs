//! Acceptance gate: one test per criterion, each printing a PASS/FAIL
//! line. Numeric criteria are checked against independent oracles
//! (central finite differences, a brute-force confusion matrix, sort
//! prefixes) rather than against the implementation under test.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use std::panic::AssertUnwindSafe;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use mudi_core::autograd::Tape;
use mudi_core::corpus::{
    filter_tweet, generate_synthetic_corpus, make_splits, normalize_text, tokenize,
    FilterDecision, LabelTriple, SyntheticConfig, TweetRecord, Vocabulary,
};
use mudi_core::evaluation::{
    compute_metrics, majority_baseline, user_level_accuracy, user_level_predict, TweetPrediction,
};
use mudi_core::geo::LocationHierarchy;
use mudi_core::layers::{
    attention_pool, bigru_forward, classify_head, embed_lookup, multi_head_attention,
    BiGruParams, DenseParams, EmbeddingTable, MultiHeadAttentionParams,
};
use mudi_core::models::{
    mtl_loss, EncodedTweet, HamtlOrder, Model, ModelSpec, Task, Variant,
};
use mudi_core::training::{
    self, self_train_select, PoolItem, SelectMode, SelectionMetric, SelfTrainConfig,
    TrainConfig, TrainExample, WeakRegime,
};

fn report(n: usize, name: &str, f: impl FnOnce()) {
    let result = std::panic::catch_unwind(AssertUnwindSafe(f));
    match &result {
        Ok(()) => println!("criterion {n:02} ({name}): PASS"),
        Err(_) => println!("criterion {n:02} ({name}): FAIL"),
    }
    if let Err(e) = result {
        std::panic::resume_unwind(e);
    }
}

fn mudi(args: &[&str], dir: &Path) -> String {
    let out = Command::new(env!("CARGO_BIN_EXE_mudi"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("spawn mudi");
    assert!(
        out.status.success(),
        "mudi {:?} failed: {}",
        args,
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn grid_hierarchy(countries: usize, states: usize, cities: usize) -> LocationHierarchy {
    let mut rows = Vec::new();
    for c in 0..countries {
        for s in 0..states {
            for t in 0..cities {
                rows.push((
                    format!("city{c}.{s}.{t}"),
                    format!("state{c}.{s}"),
                    format!("country{c}"),
                ));
            }
        }
    }
    LocationHierarchy::from_rows(rows).unwrap()
}

fn label_of(r: &TweetRecord, task: Task) -> String {
    let l = r.labels.as_ref().unwrap();
    match task {
        Task::City => l.city.clone(),
        Task::State => l.state.clone(),
        Task::Country => l.country.clone(),
    }
}

/// Encode records against a vocabulary and class lists.
fn encode(
    records: &[TweetRecord],
    vocab: &Vocabulary,
    classes: &BTreeMap<Task, Vec<String>>,
    tasks: &[Task],
) -> Vec<TrainExample> {
    records
        .iter()
        .map(|r| {
            let tokens = tokenize(&r.normalized_text);
            let (ids, mask_len) = mudi_core::corpus::encode_sequence(&tokens, vocab, 50);
            let targets = tasks
                .iter()
                .map(|t| {
                    let lbl = label_of(r, *t);
                    (*t, classes[t].iter().position(|c| *c == lbl).unwrap())
                })
                .collect();
            TrainExample { tweet: EncodedTweet { ids, mask_len }, targets }
        })
        .collect()
}

fn toy_spec(variant: Variant, class_counts: BTreeMap<Task, usize>) -> ModelSpec {
    ModelSpec {
        variant,
        vocab_size: 16,
        embed_dim: 6,
        hidden_size: 4,
        heads: 2,
        class_counts,
        dropout_rate: 0.0,
    }
}

fn toy_batch() -> Vec<EncodedTweet> {
    vec![
        EncodedTweet { ids: vec![4, 5, 6, 7], mask_len: 4 },
        EncodedTweet { ids: vec![8, 9, 0, 0], mask_len: 2 },
    ]
}

fn toy_targets() -> Vec<BTreeMap<Task, usize>> {
    (0..2)
        .map(|i| Task::ALL.iter().map(|t| (*t, i % 2)).collect())
        .collect()
}

#[test]
fn criterion_01_gradient_suite() {
    report(1, "finite-difference gradient suite", || {
        let start = Instant::now();
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for seed in 0..100u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let seq_len = rng.gen_range(1..=5usize);
            let embed_dim = rng.gen_range(1..=7usize);
            let hidden = rng.gen_range(1..=4usize);
            let heads = if rng.gen_bool(0.5) { 1 } else { 2 };
            let d_model = 2 * hidden;
            let vocab = 6usize;
            let n_classes = 3usize;
            let ids: Vec<usize> = (0..seq_len).map(|_| rng.gen_range(0..vocab)).collect();
            let target = rng.gen_range(0..n_classes);

            let table = EmbeddingTable::new(vocab, embed_dim, &mut rng);
            let bigru = BiGruParams::new("g", embed_dim, hidden, &mut rng);
            let attn = MultiHeadAttentionParams::new("a", d_model, heads, &mut rng).unwrap();
            let head = DenseParams::new("h", d_model, n_classes, &mut rng);

            let mut params = vec![table.table.clone()];
            params.extend(bigru.parameters());
            params.extend(attn.parameters());
            params.extend(head.parameters());

            // Full composition: embed -> BiGRU -> attention -> pool -> head -> CE.
            let forward = || -> f64 {
                let tape = Tape::new();
                let x = embed_lookup(&tape, &ids, &table).unwrap();
                let g = bigru_forward(&tape, &x, seq_len, &bigru).unwrap();
                let a = multi_head_attention(&tape, &g, seq_len, &attn).unwrap();
                let pooled = attention_pool(&a, seq_len).unwrap();
                let probs = classify_head(&tape, &pooled, &head).unwrap();
                probs.cross_entropy(target).unwrap().item()
            };

            // Analytic gradients.
            let tape = Tape::new();
            let x = embed_lookup(&tape, &ids, &table).unwrap();
            let g = bigru_forward(&tape, &x, seq_len, &bigru).unwrap();
            let a = multi_head_attention(&tape, &g, seq_len, &attn).unwrap();
            let pooled = attention_pool(&a, seq_len).unwrap();
            let probs = classify_head(&tape, &pooled, &head).unwrap();
            let loss = probs.cross_entropy(target).unwrap();
            loss.backward().unwrap();
            tape.flush_param_grads();

            for p in &params {
                let analytic = p.grad();
                for i in 0..p.len() {
                    p.perturb(i, h);
                    let fp = forward();
                    p.perturb(i, -2.0 * h);
                    let fm = forward();
                    p.perturb(i, h);
                    let fd = (fp - fm) / (2.0 * h);
                    let rel = (analytic[i] - fd).abs() / fd.abs().max(1.0);
                    worst = worst.max(rel);
                    assert!(
                        rel < 1e-6,
                        "seed {seed} param {} [{i}]: analytic {} vs fd {fd}",
                        p.name(),
                        analytic[i]
                    );
                }
                p.zero_grad();
            }
        }
        let elapsed = start.elapsed();
        assert!(elapsed.as_secs() < 60, "gradient suite took {elapsed:?}");
        assert!(worst < 1e-6);
    });
}

#[test]
fn criterion_02_mtl_loss_contract() {
    report(2, "Eq. 1 multi-task loss contract", || {
        // Mean within 1e-12.
        let tape = Tape::new();
        let losses: BTreeMap<Task, _> = [
            (Task::City, tape.constant(1, 1, vec![0.3])),
            (Task::State, tape.constant(1, 1, vec![1.1])),
            (Task::Country, tape.constant(1, 1, vec![2.2])),
        ]
        .into();
        let expected = (0.3 + 1.1 + 2.2) / 3.0;
        assert!((mtl_loss(&losses).unwrap().item() - expected).abs() < 1e-12);

        // Gradient distributivity within 1e-10 on a toy HA-MTL.
        let counts: BTreeMap<Task, usize> = Task::ALL.iter().map(|t| (*t, 2)).collect();
        let model =
            Model::build(toy_spec(Variant::Hamtl(HamtlOrder::CityFirst), counts), 17).unwrap();
        let batch = toy_batch();
        let targets = toy_targets();

        let tape = Tape::new();
        let out = model
            .forward_batch(&tape, &batch, Some(&targets), false, 0)
            .unwrap();
        mtl_loss(&out.losses).unwrap().backward().unwrap();
        tape.flush_param_grads();
        let combined: Vec<Vec<f64>> = model.parameters().iter().map(|p| p.grad()).collect();
        model.zero_grads();

        let mut mean_of_parts: Vec<Vec<f64>> =
            model.parameters().iter().map(|p| vec![0.0; p.len()]).collect();
        for task in Task::ALL {
            let t = Tape::new();
            let o = model.forward_batch(&t, &batch, Some(&targets), false, 0).unwrap();
            o.losses[&task].backward().unwrap();
            t.flush_param_grads();
            for (acc, p) in mean_of_parts.iter_mut().zip(model.parameters()) {
                for (a, g) in acc.iter_mut().zip(p.grad()) {
                    *a += g / 3.0;
                }
            }
            model.zero_grads();
        }
        for (c, m) in combined.iter().zip(&mean_of_parts) {
            for (x, y) in c.iter().zip(m) {
                assert!((x - y).abs() < 1e-10, "{x} vs {y}");
            }
        }
    });
}

#[test]
fn criterion_03_hamtl_wiring() {
    report(3, "HA-MTL tap layer isolation", || {
        let counts: BTreeMap<Task, usize> = Task::ALL.iter().map(|t| (*t, 2)).collect();
        // In city_first the city tap reads layer 2; layers 3-4 must get
        // exactly zero gradient from the city loss. country_first is
        // symmetric with the country loss.
        for (order, early_task) in [
            (HamtlOrder::CityFirst, Task::City),
            (HamtlOrder::CountryFirst, Task::Country),
        ] {
            let model =
                Model::build(toy_spec(Variant::Hamtl(order), counts.clone()), 23).unwrap();
            let tape = Tape::new();
            let out = model
                .forward_batch(&tape, &toy_batch(), Some(&toy_targets()), false, 0)
                .unwrap();
            out.losses[&early_task].backward().unwrap();
            tape.flush_param_grads();
            for layer in [3, 4] {
                for p in model.trunk_layer_parameters(layer) {
                    assert!(
                        p.grad().iter().all(|&g| g == 0.0),
                        "{order:?}: {} got gradient from {} loss",
                        p.name(),
                        early_task.name()
                    );
                }
            }
            // Sanity: the deep task's loss does reach layer 4.
            model.zero_grads();
            let deep_task = match early_task {
                Task::City => Task::Country,
                _ => Task::City,
            };
            let tape2 = Tape::new();
            let out2 = model
                .forward_batch(&tape2, &toy_batch(), Some(&toy_targets()), false, 0)
                .unwrap();
            out2.losses[&deep_task].backward().unwrap();
            tape2.flush_param_grads();
            let touched = model
                .trunk_layer_parameters(4)
                .iter()
                .any(|p| p.grad().iter().any(|&g| g != 0.0));
            assert!(touched, "{order:?}: layer 4 untouched by {}", deep_task.name());
        }
    });
}

/// Build encoded examples from a synthetic corpus for the given tasks.
fn synth_examples(
    hierarchy: &LocationHierarchy,
    cfg: &SyntheticConfig,
    tasks: &[Task],
) -> (Vec<TweetRecord>, Vocabulary, BTreeMap<Task, Vec<String>>) {
    let records = generate_synthetic_corpus(hierarchy, cfg);
    let token_lists: Vec<Vec<String>> =
        records.iter().map(|r| tokenize(&r.normalized_text)).collect();
    let vocab = Vocabulary::build(&token_lists, 1).unwrap();
    let mut classes = BTreeMap::new();
    for &t in tasks {
        let mut labels: Vec<String> = records.iter().map(|r| label_of(r, t)).collect();
        labels.sort();
        labels.dedup();
        classes.insert(t, labels);
    }
    (records, vocab, classes)
}

#[test]
fn criterion_04_overfit_sanity() {
    report(4, "overfit 64 tweets / 3 classes", || {
        let start = Instant::now();
        let hierarchy = grid_hierarchy(3, 1, 1);
        let cfg = SyntheticConfig {
            vocab_size: 40,
            tweets_per_city: 22,
            tweet_len: 8,
            state_drift: 0.0,
            city_drift: 0.0,
            seed: 5,
        };
        let tasks = [Task::Country];
        let (mut records, vocab, classes) = synth_examples(&hierarchy, &cfg, &tasks);
        records.truncate(64);
        let examples = encode(&records, &vocab, &classes, &tasks);
        let spec = ModelSpec {
            variant: Variant::SingleTask(Task::Country),
            vocab_size: vocab.len(),
            embed_dim: 16,
            hidden_size: 8,
            heads: 2,
            class_counts: [(Task::Country, 3)].into(),
            dropout_rate: 0.0,
        };
        let model = Model::build(spec, 1).unwrap();
        let train_cfg = TrainConfig {
            max_epochs: 50,
            patience: 50,
            selection: SelectionMetric::Accuracy(Task::Country),
            ..Default::default()
        };
        training::train(&model, &examples, &examples, &train_cfg).unwrap();
        let (acc, _) = training::evaluate(&model, &examples).unwrap();
        assert_eq!(acc[&Task::Country], 100.0, "train accuracy");
        let elapsed = start.elapsed();
        assert!(elapsed.as_secs() < 300, "overfit took {elapsed:?}");
    });
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    xs[xs.len() / 2]
}

#[test]
fn criterion_05_hierarchy_learning() {
    report(5, "HA-MTL learns the synthetic hierarchy", || {
        let start = Instant::now();
        let hierarchy = grid_hierarchy(4, 2, 2);
        let cfg = SyntheticConfig {
            vocab_size: 500,
            tweets_per_city: 200,
            tweet_len: 12,
            state_drift: 0.5,
            city_drift: 0.5,
            seed: 99,
        };
        let tasks = Task::ALL;
        let (records, vocab, classes) = synth_examples(&hierarchy, &cfg, &tasks);
        let splits = make_splits(&records, (0.8, 0.1, 0.1), 100_000, 7).unwrap();
        let train_ex = encode(&splits.train, &vocab, &classes, &tasks);
        let dev_ex = encode(&splits.dev, &vocab, &classes, &tasks);
        let test_ex = encode(&splits.test, &vocab, &classes, &tasks);

        // Majority baseline: most frequent TRAIN label scored on TEST.
        let mut majority_acc = BTreeMap::new();
        for &t in &tasks {
            let train_labels: Vec<String> =
                splits.train.iter().map(|r| label_of(r, t)).collect();
            let constant = majority_baseline(&train_labels).unwrap();
            let hits = splits.test.iter().filter(|r| label_of(r, t) == constant).count();
            majority_acc.insert(t, 100.0 * hits as f64 / splits.test.len() as f64);
        }

        let class_counts: BTreeMap<Task, usize> =
            classes.iter().map(|(t, c)| (*t, c.len())).collect();
        let vocab_size = vocab.len();
        let hamtl_spec = ModelSpec {
            variant: Variant::Hamtl(HamtlOrder::CityFirst),
            vocab_size,
            embed_dim: 24,
            hidden_size: 12,
            heads: 2,
            class_counts: class_counts.clone(),
            dropout_rate: 0.0,
        };
        let single_spec = ModelSpec {
            variant: Variant::SingleTask(Task::City),
            vocab_size,
            embed_dim: 24,
            hidden_size: 12,
            heads: 2,
            class_counts: [(Task::City, class_counts[&Task::City])].into(),
            dropout_rate: 0.0,
        };

        // One run per (seed, model); runs are independent, so spread them
        // over threads.
        let mut handles = Vec::new();
        for seed in [11u64, 12, 13] {
            for which in ["hamtl", "single"] {
                let spec = if which == "hamtl" { hamtl_spec.clone() } else { single_spec.clone() };
                let (train_ex, dev_ex, test_ex) =
                    (train_ex.clone(), dev_ex.clone(), test_ex.clone());
                handles.push(std::thread::spawn(move || {
                    let model = Model::build(spec, seed).unwrap();
                    let cfg = TrainConfig {
                        max_epochs: 15,
                        selection: if which == "single" {
                            SelectionMetric::Accuracy(Task::City)
                        } else {
                            SelectionMetric::MeanAccuracy
                        },
                        seed,
                        ..Default::default()
                    };
                    training::train(&model, &train_ex, &dev_ex, &cfg).unwrap();
                    let (acc, _) = training::evaluate(&model, &test_ex).unwrap();
                    (seed, which, acc)
                }));
            }
        }
        let mut hamtl_acc: BTreeMap<Task, Vec<f64>> = BTreeMap::new();
        let mut single_city = Vec::new();
        for h in handles {
            let (_, which, acc) = h.join().unwrap();
            if which == "hamtl" {
                for (t, a) in acc {
                    hamtl_acc.entry(t).or_default().push(a);
                }
            } else {
                single_city.push(acc[&Task::City]);
            }
        }

        for &t in &tasks {
            let med = median(hamtl_acc[&t].clone());
            assert!(
                med > majority_acc[&t],
                "{}: HA-MTL median {med:.2} <= majority {:.2}",
                t.name(),
                majority_acc[&t]
            );
        }
        let hamtl_city = median(hamtl_acc[&Task::City].clone());
        let single_med = median(single_city);
        assert!(
            hamtl_city >= single_med - 2.0,
            "city: HA-MTL {hamtl_city:.2} < single-task {single_med:.2} - 2"
        );
        let elapsed = start.elapsed();
        assert!(elapsed.as_secs() < 1800, "hierarchy learning took {elapsed:?}");
    });
}

/// Brute-force metrics oracle: nested loops, no shared code with the
/// implementation under test.
fn oracle_metrics(
    y_true: &[usize],
    y_pred: &[usize],
    k: usize,
) -> (f64, f64, Vec<(f64, f64, f64)>) {
    let mut correct = 0usize;
    for (t, p) in y_true.iter().zip(y_pred) {
        if t == p {
            correct += 1;
        }
    }
    let accuracy = 100.0 * correct as f64 / y_true.len() as f64;
    let mut per_class = Vec::new();
    let mut f1_sum = 0.0;
    for c in 0..k {
        let tp = y_true
            .iter()
            .zip(y_pred)
            .filter(|(t, p)| **t == c && **p == c)
            .count() as f64;
        let pred_c = y_pred.iter().filter(|p| **p == c).count() as f64;
        let true_c = y_true.iter().filter(|t| **t == c).count() as f64;
        let precision = if pred_c == 0.0 { 0.0 } else { tp / pred_c };
        let recall = if true_c == 0.0 { 0.0 } else { tp / true_c };
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        f1_sum += f1;
        per_class.push((100.0 * precision, 100.0 * recall, 100.0 * f1));
    }
    (accuracy, 100.0 * f1_sum / k as f64, per_class)
}

#[test]
fn criterion_06_metrics_oracle() {
    report(6, "metrics vs brute-force oracle", || {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..1000 {
            let k = rng.gen_range(2..=8usize);
            let n = rng.gen_range(1..=200usize);
            let y_true: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
            let y_pred: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
            let classes: Vec<String> = (0..k).map(|c| format!("c{c}")).collect();
            let ts: Vec<String> = y_true.iter().map(|c| format!("c{c}")).collect();
            let ps: Vec<String> = y_pred.iter().map(|c| format!("c{c}")).collect();
            let m = compute_metrics(&ts, &ps, &classes).unwrap();
            let (acc, macro_f1, per_class) = oracle_metrics(&y_true, &y_pred, k);
            assert!((m.accuracy - acc).abs() < 1e-9);
            assert!((m.macro_f1 - macro_f1).abs() < 1e-9);
            for (c, (p, r, f1)) in per_class.iter().enumerate() {
                let got = &m.per_class[&format!("c{c}")];
                assert!((got.precision - p).abs() < 1e-9);
                assert!((got.recall - r).abs() < 1e-9);
                assert!((got.f1 - f1).abs() < 1e-9);
            }
        }
        // Worked example.
        let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>();
        let m = compute_metrics(
            &s(&["a", "a", "b", "c"]),
            &s(&["a", "b", "b", "b"]),
            &s(&["a", "b", "c"]),
        )
        .unwrap();
        assert!((m.accuracy - 50.0).abs() < 1e-9);
        assert!((m.macro_f1 - 38.89).abs() < 0.005);
    });
}

fn pool_of(n: usize, rng: &mut ChaCha8Rng, k: usize) -> Vec<PoolItem> {
    (0..n)
        .map(|i| PoolItem {
            record: TweetRecord::new(
                &format!("t{i:05}"),
                "u",
                "نص عربي تجريبي",
                Some(LabelTriple {
                    city: "x".into(),
                    state: "y".into(),
                    country: "z".into(),
                }),
            ),
            predicted: rng.gen_range(0..k),
            confidence: (rng.gen_range(0..=1000) as f64) / 1000.0,
        })
        .collect()
}

#[test]
fn criterion_07_self_training_selection() {
    report(7, "self-training top-p selection", || {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for trial in 0..20 {
            let k = rng.gen_range(2..=6usize);
            let pool = pool_of(1000, &mut rng, k);
            for pct in [5.0, 10.0, 25.0] {
                let agnostic = SelfTrainConfig {
                    mode: SelectMode::ClassAgnostic,
                    top_pct: pct,
                    task: Task::City,
                    min_tokens: None,
                    require_zero_diacritics: false,
                    replies_only: false,
                };
                let picked = self_train_select(&pool, &agnostic).unwrap();
                let expected_n = (1000.0 * pct / 100.0).ceil() as usize;
                assert_eq!(picked.len(), expected_n, "trial {trial} pct {pct}");

                // Sort-prefix oracle.
                let mut order: Vec<usize> = (0..pool.len()).collect();
                order.sort_by(|a, b| {
                    pool[*b]
                        .confidence
                        .partial_cmp(&pool[*a].confidence)
                        .unwrap()
                        .then_with(|| pool[*a].record.tweet_id.cmp(&pool[*b].record.tweet_id))
                });
                let mut expected = order[..expected_n].to_vec();
                expected.sort_unstable();
                assert_eq!(picked, expected);

                let specific = SelfTrainConfig {
                    mode: SelectMode::ClassSpecific,
                    ..agnostic
                };
                let picked = self_train_select(&pool, &specific).unwrap();
                let expected_total: usize = (0..k)
                    .map(|c| {
                        let n_c = pool.iter().filter(|p| p.predicted == c).count();
                        (n_c as f64 * pct / 100.0).ceil() as usize
                    })
                    .sum();
                assert_eq!(picked.len(), expected_total, "trial {trial} pct {pct}");
            }
        }
    });
}

#[test]
fn criterion_08_weak_regimes() {
    report(8, "weak-supervision regimes", || {
        let hierarchy = grid_hierarchy(2, 1, 1);
        let cfg = SyntheticConfig {
            vocab_size: 30,
            tweets_per_city: 20,
            tweet_len: 6,
            state_drift: 0.0,
            city_drift: 0.0,
            seed: 3,
        };
        let tasks = Task::ALL;
        let (records, vocab, classes) = synth_examples(&hierarchy, &cfg, &tasks);
        let all = encode(&records, &vocab, &classes, &tasks);
        let weak = all[..16].to_vec();
        let gold = all[16..28].to_vec();
        let dev = all[28..].to_vec();
        let class_counts: BTreeMap<Task, usize> =
            classes.iter().map(|(t, c)| (*t, c.len())).collect();
        let spec = ModelSpec {
            variant: Variant::MtlCommonAttn,
            vocab_size: vocab.len(),
            embed_dim: 8,
            hidden_size: 4,
            heads: 2,
            class_counts,
            dropout_rate: 0.0,
        };
        let tcfg = TrainConfig { max_epochs: 2, ..Default::default() };

        // Weak consumes no gold: it must equal a direct train on weak only.
        let out = training::run_weak_regime(
            spec.clone(), 5, &weak, &gold, &dev, &tcfg, WeakRegime::Weak,
        )
        .unwrap();
        assert_eq!(out.phase_sizes, vec![weak.len()]);
        let direct = Model::build(spec.clone(), 5).unwrap();
        training::train(&direct, &weak, &dev, &tcfg).unwrap();
        assert_eq!(out.model.param_values(), direct.param_values());

        // WeakPlusGold sees exactly |weak| + |gold| instances per epoch.
        let out = training::run_weak_regime(
            spec.clone(), 5, &weak, &gold, &dev, &tcfg, WeakRegime::WeakPlusGold,
        )
        .unwrap();
        assert_eq!(out.phase_sizes, vec![weak.len() + gold.len()]);

        // WeakThenGold phase 2 starts bitwise at phase 1's best checkpoint.
        let out = training::run_weak_regime(
            spec, 5, &weak, &gold, &dev, &tcfg, WeakRegime::WeakThenGold,
        )
        .unwrap();
        assert_eq!(out.phase_sizes, vec![weak.len(), gold.len()]);
        assert_eq!(
            out.phase2_init.as_ref().unwrap(),
            &out.phase_results[0].best_params
        );
    });
}

#[test]
fn criterion_09_preprocessing() {
    report(9, "preprocessing bit-exactness + idempotence", || {
        // normalize_text examples, byte for byte.
        assert_eq!(normalize_text("cooool", true), "cool");
        assert_eq!(normalize_text("@bob see http://t.co/x", true), "<USER> see <URL>");
        assert_eq!(normalize_text("كَتَبَ", true), "كتب");

        // filter_tweet examples.
        let mk = |raw: &str| {
            let mut r = TweetRecord::new("t", "u", raw, None);
            r.normalized_text = normalize_text(raw, true);
            r
        };
        assert_eq!(
            filter_tweet(&mk("RT @x مرحبا يا صديقي")),
            FilterDecision::DiscardRetweet
        );
        assert_eq!(
            filter_tweet(&mk("مرحبا يا hello world")),
            FilterDecision::DiscardTooFewArabic
        );
        assert_eq!(filter_tweet(&mk("مرحبا يا صديقي")), FilterDecision::Keep);

        // tokenize examples.
        assert_eq!(tokenize("مرحبا!"), vec!["مرحبا", "!"]);
        assert_eq!(tokenize("a,b"), vec!["a", ",", "b"]);
        assert_eq!(tokenize("x   y"), vec!["x", "y"]);

        // Idempotence over a 10k fuzz corpus of Arabic letters, diacritics,
        // mentions, URLs, repeats, punctuation, and whitespace.
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let arabic: Vec<char> = ('\u{0621}'..='\u{064A}').collect();
        let diacritics: Vec<char> = ('\u{064B}'..='\u{065F}').chain(['\u{0670}']).collect();
        for _ in 0..10_000 {
            let mut text = String::new();
            for _ in 0..rng.gen_range(1..=12usize) {
                match rng.gen_range(0..7u8) {
                    0 => {
                        for _ in 0..rng.gen_range(1..=5usize) {
                            text.push(arabic[rng.gen_range(0..arabic.len())]);
                            if rng.gen_bool(0.4) {
                                text.push(diacritics[rng.gen_range(0..diacritics.len())]);
                            }
                        }
                    }
                    1 => text.push_str(&format!("@user{}", rng.gen_range(0..100))),
                    2 => text.push_str("http://example.com/x"),
                    3 => {
                        let c = (b'a' + rng.gen_range(0..26u8)) as char;
                        for _ in 0..rng.gen_range(1..=6usize) {
                            text.push(c);
                        }
                    }
                    4 => text.push_str("!!!؟؟؟"),
                    5 => text.push_str("   "),
                    _ => text.push_str("www.t.co/abc"),
                }
                text.push(' ');
            }
            let once = normalize_text(&text, true);
            let twice = normalize_text(&once, true);
            assert_eq!(once, twice, "not idempotent on {text:?}");
        }
    });
}

#[test]
fn criterion_10_user_level_voting() {
    report(10, "user-level thresholded voting", || {
        // Perfect per-tweet classifier: 100.0 accuracy for every n.
        let mut users = Vec::new();
        let mut truth = BTreeMap::new();
        for u in 0..10 {
            let label = format!("c{}", u % 3);
            let preds: Vec<TweetPrediction> = (0..40)
                .map(|_| TweetPrediction { label: label.clone(), confidence: 0.99 })
                .collect();
            truth.insert(format!("u{u}"), label);
            users.push((format!("u{u}"), preds));
        }
        for n in [10, 25, 50, 75, 100, 500] {
            assert_eq!(user_level_accuracy(&users, &truth, n, 0.0).unwrap(), 100.0);
        }

        // Thresholding example: [eg .9, sa .95, sa .96], threshold 0.92 -> sa.
        let p = vec![
            TweetPrediction { label: "eg".into(), confidence: 0.9 },
            TweetPrediction { label: "sa".into(), confidence: 0.95 },
            TweetPrediction { label: "sa".into(), confidence: 0.96 },
        ];
        assert_eq!(user_level_predict(&p, 3, 0.92).unwrap(), "sa");
        // Without the threshold sa still wins 2-1; with threshold 0 and a
        // flipped pool, eg wins.
        let p2 = vec![
            TweetPrediction { label: "eg".into(), confidence: 0.9 },
            TweetPrediction { label: "eg".into(), confidence: 0.8 },
            TweetPrediction { label: "sa".into(), confidence: 0.95 },
        ];
        assert_eq!(user_level_predict(&p2, 3, 0.0).unwrap(), "eg");

        // CLI table shape: one row per (n, threshold), columns
        // n,acc,thresh,f1,thresh.
        let dir = tempfile::tempdir().unwrap();
        let d = dir.path();
        mudi(
            &["synth", "--out-dir", "synth", "--countries", "2", "--states-per-country", "1",
              "--cities-per-state", "1", "--tweets-per-city", "30", "--vocab", "40",
              "--tweet-len", "6", "--seed", "2"],
            d,
        );
        mudi(&["split", "--out-dir", "sp", "--input", "synth/corpus.jsonl", "--seed", "1"], d);
        mudi(
            &["train", "--out-dir", "run", "--train", "sp/train.jsonl", "--dev", "sp/dev.jsonl",
              "--model", "single", "--task", "country", "--embed-dim", "8", "--hidden", "4",
              "--heads", "2", "--epochs", "1", "--dropout", "0.0", "--seed", "1"],
            d,
        );
        mudi(
            &["usereval", "--out-dir", "ue", "--checkpoint", "run/model.ckpt", "--vocab",
              "run/vocab.txt", "--input", "sp/test.jsonl", "--task", "country",
              "--n", "10,25,50,75,100,500", "--thresholds", "0.0,0.5,0.9"],
            d,
        );
        let csv = std::fs::read_to_string(d.join("ue/usereval.csv")).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "n,acc,thresh,f1,thresh");
        assert_eq!(lines.len(), 1 + 6 * 3);
        for row in &lines[1..] {
            let fields: Vec<&str> = row.split(',').collect();
            assert_eq!(fields.len(), 5);
            assert_eq!(fields[2], fields[4], "both thresh columns match");
        }
    });
}

#[test]
fn criterion_11_train_determinism() {
    report(11, "byte-identical train artifacts", || {
        let dir = tempfile::tempdir().unwrap();
        let d = dir.path();
        mudi(
            &["synth", "--out-dir", "synth", "--countries", "2", "--states-per-country", "1",
              "--cities-per-state", "2", "--tweets-per-city", "25", "--vocab", "50",
              "--tweet-len", "6", "--seed", "4"],
            d,
        );
        mudi(&["split", "--out-dir", "sp", "--input", "synth/corpus.jsonl", "--seed", "4"], d);
        let train_args = |out: &str| {
            vec![
                "train".to_string(), "--out-dir".into(), out.into(),
                "--train".into(), "sp/train.jsonl".into(), "--dev".into(), "sp/dev.jsonl".into(),
                "--model".into(), "hamtl".into(), "--order".into(), "city_first".into(),
                "--embed-dim".into(), "8".into(), "--hidden".into(), "4".into(),
                "--heads".into(), "2".into(), "--epochs".into(), "2".into(),
                "--dropout".into(), "0.5".into(), "--seed".into(), "21".into(),
            ]
        };
        for out in ["a", "b"] {
            let args: Vec<String> = train_args(out);
            let args: Vec<&str> = args.iter().map(String::as_str).collect();
            mudi(&args, d);
        }
        for artifact in ["history.csv", "model.ckpt", "vocab.txt"] {
            let a = std::fs::read(d.join("a").join(artifact)).unwrap();
            let b = std::fs::read(d.join("b").join(artifact)).unwrap();
            assert_eq!(a, b, "{artifact} differs between identical runs");
        }
    });
}
