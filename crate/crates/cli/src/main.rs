//! `mudi` — experiment harness for fine-grained dialect identification.
//!
//! One command per process; every run writes a `manifest.json` recording
//! the resolved configuration, the seed, and SHA-256 hashes of all input
//! files. Exit codes: 0 success, 1 user error, 2 internal error.

mod config;
mod pipeline;

use clap::{Parser, Subcommand};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use mudi_core::corpus::{
    filter_tweet, make_splits_with, normalize_text, tokenize, FilterDecision, LabelSource,
    SyntheticConfig, Vocabulary, MAX_SEQ_LEN,
};
use mudi_core::evaluation::{compute_metrics, user_level_predict, TweetPrediction};
use mudi_core::geo::LocationHierarchy;
use mudi_core::models::{
    save_checkpoint, CheckpointMeta, HamtlOrder, Model, ModelSpec, Task, Variant,
};
use mudi_core::training::{
    self, history_to_csv, run_weak_regime, self_train_select, PoolItem, SelectMode,
    SelectionMetric, SelfTrainConfig, TrainConfig, WeakRegime,
};

use config::Settings;
use pipeline::*;

#[derive(Debug)]
pub enum CliError {
    /// Bad flags, missing files, malformed inputs. Exit code 1.
    User(String),
    /// Failures inside the library modules. Exit code 2.
    Internal(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::User(m) | CliError::Internal(m) => write!(f, "{m}"),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Internal(e.to_string())
    }
}

impl From<mudi_core::training::TrainError> for CliError {
    fn from(e: mudi_core::training::TrainError) -> Self {
        CliError::Internal(e.to_string())
    }
}

impl From<mudi_core::models::ModelError> for CliError {
    fn from(e: mudi_core::models::ModelError) -> Self {
        CliError::Internal(e.to_string())
    }
}

#[derive(Parser)]
#[command(name = "mudi", version, about = "Fine-grained dialect identification experiments")]
struct Cli {
    /// Flat key=value configuration file; flags override its entries.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (default: $MUDI_OUTPUT_DIR, else ".").
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Normalize, filter, and tokenize a raw JSONL corpus.
    Preprocess {
        #[arg(long)]
        input: Option<PathBuf>,
        /// Keep Arabic diacritics instead of stripping them.
        #[arg(long)]
        keep_diacritics: bool,
    },
    /// Partition a corpus into TRAIN/DEV/TEST with per-country capping.
    Split {
        #[arg(long)]
        input: Option<PathBuf>,
        /// Train/dev/test proportions, e.g. --ratios 0.8 0.1 0.1
        #[arg(long, num_args = 3)]
        ratios: Option<Vec<f64>>,
        /// Per-country TRAIN cap.
        #[arg(long)]
        cap: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Keep each user's tweets within a single split.
        #[arg(long)]
        user_disjoint: bool,
    },
    /// Generate a labeled synthetic corpus plus its hierarchy file.
    Synth {
        #[arg(long)]
        countries: Option<usize>,
        #[arg(long)]
        states_per_country: Option<usize>,
        #[arg(long)]
        cities_per_state: Option<usize>,
        #[arg(long)]
        tweets_per_city: Option<usize>,
        #[arg(long)]
        vocab: Option<usize>,
        #[arg(long)]
        tweet_len: Option<usize>,
        #[arg(long)]
        city_drift: Option<f64>,
        #[arg(long)]
        state_drift: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train one model; emits checkpoint, vocabulary, and history CSV.
    Train {
        #[arg(long)]
        train: Option<PathBuf>,
        #[arg(long)]
        dev: Option<PathBuf>,
        /// single | gru | mtl_common | mtl_spec | hamtl
        #[arg(long)]
        model: Option<String>,
        /// Task for single-task variants: city | state | country.
        #[arg(long)]
        task: Option<String>,
        /// Tap order for hamtl: city_first | country_first.
        #[arg(long)]
        order: Option<String>,
        #[arg(long)]
        embed_dim: Option<usize>,
        #[arg(long)]
        hidden: Option<usize>,
        #[arg(long)]
        heads: Option<usize>,
        #[arg(long)]
        dropout: Option<f64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        patience: Option<usize>,
        #[arg(long)]
        batch: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        /// Minimum corpus frequency for a vocabulary entry.
        #[arg(long)]
        min_count: Option<usize>,
        /// Dev metric for model selection: mean | city | state | country.
        #[arg(long)]
        selection: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// One self-training round: pseudo-label a pool and augment TRAIN.
    Selftrain {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long)]
        pool: Option<PathBuf>,
        #[arg(long)]
        train: Option<PathBuf>,
        /// class_agnostic | class_specific
        #[arg(long)]
        mode: Option<String>,
        #[arg(long)]
        top_pct: Option<f64>,
        /// Task whose confidence ranks the pool.
        #[arg(long)]
        task: Option<String>,
        /// city,state,country hierarchy CSV, for deriving parent labels
        /// from a city-only model.
        #[arg(long)]
        hierarchy: Option<PathBuf>,
        #[arg(long)]
        min_tokens: Option<usize>,
        #[arg(long)]
        require_zero_diacritics: bool,
        #[arg(long)]
        replies_only: bool,
    },
    /// Run a weak-supervision regime.
    Weak {
        #[arg(long)]
        weak: Option<PathBuf>,
        #[arg(long)]
        gold: Option<PathBuf>,
        #[arg(long)]
        dev: Option<PathBuf>,
        /// weak | weak_plus_gold | weak_then_gold
        #[arg(long)]
        regime: Option<String>,
        #[arg(long)]
        model: Option<String>,
        #[arg(long)]
        task: Option<String>,
        #[arg(long)]
        order: Option<String>,
        #[arg(long)]
        embed_dim: Option<usize>,
        #[arg(long)]
        hidden: Option<usize>,
        #[arg(long)]
        heads: Option<usize>,
        #[arg(long)]
        dropout: Option<f64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        patience: Option<usize>,
        #[arg(long)]
        batch: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        min_count: Option<usize>,
        #[arg(long)]
        selection: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Tweet-level metrics report on a labeled split.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// User-level thresholded-majority sweep over n and thresholds.
    Usereval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        task: Option<String>,
        /// Comma-separated tweets-per-user counts.
        #[arg(long)]
        n: Option<String>,
        /// Comma-separated confidence thresholds.
        #[arg(long)]
        thresholds: Option<String>,
    },
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // --help / --version are not errors.
            if e.use_stderr() {
                eprintln!("{e}");
                std::process::exit(1);
            }
            print!("{e}");
            std::process::exit(0);
        }
    };
    let settings = match Settings::load(cli.config.as_deref()) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("mudi: {e}");
            std::process::exit(1);
        }
    };
    let out_dir = cli
        .out_dir
        .or_else(|| std::env::var_os("MUDI_OUTPUT_DIR").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("."));
    match run(cli.command, &settings, &out_dir) {
        Ok(()) => {}
        Err(CliError::User(m)) => {
            eprintln!("mudi: {m}");
            std::process::exit(1);
        }
        Err(CliError::Internal(m)) => {
            eprintln!("mudi: internal error: {m}");
            std::process::exit(2);
        }
    }
}

fn parse_task(s: &str) -> Result<Task, CliError> {
    s.parse().map_err(CliError::User)
}

fn parse_variant(
    settings: &Settings,
    model: Option<String>,
    task: Option<String>,
    order: Option<String>,
) -> Result<Variant, CliError> {
    let model: String = settings.require("model", model)?;
    match model.as_str() {
        "single" | "gru" => {
            let task = parse_task(&settings.require("task", task)?)?;
            Ok(if model == "single" {
                Variant::SingleTask(task)
            } else {
                Variant::GruBaseline(task)
            })
        }
        "mtl_common" => Ok(Variant::MtlCommonAttn),
        "mtl_spec" => Ok(Variant::MtlSpecAttn),
        "hamtl" => {
            let order: String = settings.get("order", order, "city_first".into())?;
            match order.as_str() {
                "city_first" => Ok(Variant::Hamtl(HamtlOrder::CityFirst)),
                "country_first" => Ok(Variant::Hamtl(HamtlOrder::CountryFirst)),
                other => Err(CliError::User(format!("unknown order {other:?}"))),
            }
        }
        other => Err(CliError::User(format!(
            "unknown model {other:?} (single | gru | mtl_common | mtl_spec | hamtl)"
        ))),
    }
}

#[allow(clippy::too_many_arguments)]
fn resolve_spec(
    settings: &Settings,
    variant: Variant,
    embed_dim: Option<usize>,
    hidden: Option<usize>,
    heads: Option<usize>,
    dropout: Option<f64>,
    class_counts: BTreeMap<Task, usize>,
) -> Result<ModelSpec, CliError> {
    // HA-MTL uses the stronger 0.7 dropout by default; everything else 0.5.
    let default_dropout = if matches!(variant, Variant::Hamtl(_)) { 0.7 } else { 0.5 };
    Ok(ModelSpec {
        variant,
        vocab_size: 0, // filled in after the vocabulary is built
        embed_dim: settings.get("embed_dim", embed_dim, 300)?,
        hidden_size: settings.get("hidden", hidden, 500)?,
        heads: settings.get("heads", heads, 4)?,
        class_counts,
        dropout_rate: settings.get("dropout", dropout, default_dropout)?,
    })
}

fn resolve_train_config(
    settings: &Settings,
    epochs: Option<usize>,
    patience: Option<usize>,
    batch: Option<usize>,
    lr: Option<f64>,
    selection: Option<String>,
    seed: u64,
) -> Result<TrainConfig, CliError> {
    let selection: String = settings.get("selection", selection, "mean".into())?;
    let selection = match selection.as_str() {
        "mean" => SelectionMetric::MeanAccuracy,
        other => SelectionMetric::Accuracy(parse_task(other)?),
    };
    Ok(TrainConfig {
        max_epochs: settings.get("epochs", epochs, 15)?,
        patience: settings.get("patience", patience, 5)?,
        batch_size: settings.get("batch", batch, 8)?,
        learning_rate: settings.get("lr", lr, 1e-3)?,
        seed,
        selection,
    })
}

fn best_epoch_metrics(result: &training::TrainResult) -> BTreeMap<String, f64> {
    let mut metrics = BTreeMap::new();
    if let Some(row) = result.history.iter().find(|r| r.epoch == result.best_epoch) {
        for (t, v) in &row.dev_acc {
            metrics.insert(format!("dev_acc_{}", t.name()), *v);
        }
        for (t, v) in &row.dev_f1 {
            metrics.insert(format!("dev_f1_{}", t.name()), *v);
        }
    }
    metrics
}

fn run(command: Command, settings: &Settings, out_dir: &Path) -> Result<(), CliError> {
    let out_dir = ensure_out_dir(out_dir)?;
    match command {
        Command::Preprocess { input, keep_diacritics } => {
            let input = settings.require_path("input", input)?;
            let keep = settings.get("keep_diacritics", keep_diacritics.then_some(true), false)?;
            let records = load_records(&input)?;
            let total = records.len();
            let mut kept = Vec::new();
            let mut log = String::new();
            let (mut n_rt, mut n_arabic) = (0usize, 0usize);
            for mut rec in records {
                rec.normalized_text = normalize_text(&rec.raw_text, !keep);
                match filter_tweet(&rec) {
                    FilterDecision::Keep => {
                        let tokens = tokenize(&rec.normalized_text);
                        rec.mask_len = tokens.len().min(MAX_SEQ_LEN);
                        kept.push(rec);
                    }
                    FilterDecision::DiscardRetweet => {
                        n_rt += 1;
                        writeln!(log, "{}\tretweet", rec.tweet_id).unwrap();
                    }
                    FilterDecision::DiscardTooFewArabic => {
                        n_arabic += 1;
                        writeln!(log, "{}\ttoo_few_arabic", rec.tweet_id).unwrap();
                    }
                }
            }
            writeln!(
                log,
                "# input={total} kept={} retweets={n_rt} too_few_arabic={n_arabic}",
                kept.len()
            )
            .unwrap();
            write_records(&out_dir.join("cleaned.jsonl"), &kept)?;
            std::fs::write(out_dir.join("rejections.log"), log)?;
            write_manifest(&out_dir, "preprocess", &settings.resolved(), 0, &[&input])?;
            println!(
                "input={total} kept={} retweets={n_rt} too_few_arabic={n_arabic}",
                kept.len()
            );
            Ok(())
        }
        Command::Split { input, ratios, cap, seed, user_disjoint } => {
            let input = settings.require_path("input", input)?;
            let ratios = match ratios {
                Some(r) => r,
                None => {
                    let raw: String = settings.get("ratios", None, "0.8 0.1 0.1".into())?;
                    raw.split_whitespace()
                        .map(|x| x.parse::<f64>())
                        .collect::<Result<Vec<f64>, _>>()
                        .map_err(|_| CliError::User(format!("bad ratios {raw:?}")))?
                }
            };
            if ratios.len() != 3 {
                return Err(CliError::User("ratios needs exactly 3 values".into()));
            }
            let cap = settings.get("cap", cap, 100_000)?;
            let seed = settings.get("seed", seed, 0)?;
            let user_disjoint =
                settings.get("user_disjoint", user_disjoint.then_some(true), false)?;
            let records = load_records(&input)?;
            let splits = make_splits_with(
                &records,
                (ratios[0], ratios[1], ratios[2]),
                cap,
                seed,
                user_disjoint,
            )
            .map_err(|e| CliError::User(e.to_string()))?;
            write_records(&out_dir.join("train.jsonl"), &splits.train)?;
            write_records(&out_dir.join("dev.jsonl"), &splits.dev)?;
            write_records(&out_dir.join("test.jsonl"), &splits.test)?;
            write_manifest(&out_dir, "split", &settings.resolved(), seed, &[&input])?;
            println!(
                "train={} dev={} test={}",
                splits.train.len(),
                splits.dev.len(),
                splits.test.len()
            );
            Ok(())
        }
        Command::Synth {
            countries,
            states_per_country,
            cities_per_state,
            tweets_per_city,
            vocab,
            tweet_len,
            city_drift,
            state_drift,
            seed,
        } => {
            let countries = settings.get("countries", countries, 4)?;
            let states = settings.get("states_per_country", states_per_country, 2)?;
            let cities = settings.get("cities_per_state", cities_per_state, 2)?;
            let seed = settings.get("seed", seed, 0)?;
            let cfg = SyntheticConfig {
                vocab_size: settings.get("vocab", vocab, 500)?,
                tweets_per_city: settings.get("tweets_per_city", tweets_per_city, 200)?,
                tweet_len: settings.get("tweet_len", tweet_len, 15)?,
                state_drift: settings.get("state_drift", state_drift, 0.5)?,
                city_drift: settings.get("city_drift", city_drift, 0.5)?,
                seed,
            };
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
            let hierarchy = LocationHierarchy::from_rows(rows.clone())
                .map_err(|e| CliError::Internal(e.to_string()))?;
            let records = mudi_core::corpus::generate_synthetic_corpus(&hierarchy, &cfg);
            write_records(&out_dir.join("corpus.jsonl"), &records)?;
            let mut csv = String::from("city,state,country\n");
            for (city, state, country) in &rows {
                writeln!(csv, "{city},{state},{country}").unwrap();
            }
            std::fs::write(out_dir.join("hierarchy.csv"), csv)?;
            write_manifest(&out_dir, "synth", &settings.resolved(), seed, &[])?;
            println!("tweets={} cities={}", records.len(), hierarchy.n_cities());
            Ok(())
        }
        Command::Train {
            train,
            dev,
            model,
            task,
            order,
            embed_dim,
            hidden,
            heads,
            dropout,
            epochs,
            patience,
            batch,
            lr,
            min_count,
            selection,
            seed,
        } => {
            let train_path = settings.require_path("train", train)?;
            let dev_path = settings.require_path("dev", dev)?;
            let seed = settings.get("seed", seed, 0)?;
            let variant = parse_variant(settings, model, task, order)?;
            let train_set = load_records(&train_path)?;
            let dev_set = load_records(&dev_path)?;

            let min_count = settings.get("min_count", min_count, 1)?;
            let token_lists: Vec<Vec<String>> =
                train_set.iter().map(record_tokens).collect();
            let vocab = Vocabulary::build(&token_lists, min_count)
                .map_err(|e| CliError::User(e.to_string()))?;

            let tasks = match variant {
                Variant::SingleTask(t) | Variant::GruBaseline(t) => vec![t],
                _ => Task::ALL.to_vec(),
            };
            let classes =
                build_classes(&[train_set.as_slice(), dev_set.as_slice()], &tasks)?;
            let class_counts: BTreeMap<Task, usize> =
                classes.iter().map(|(t, c)| (*t, c.len())).collect();
            let mut spec =
                resolve_spec(settings, variant, embed_dim, hidden, heads, dropout, class_counts)?;
            spec.vocab_size = vocab.len();
            let cfg =
                resolve_train_config(settings, epochs, patience, batch, lr, selection, seed)?;

            let train_ex = encode_examples(&train_set, &vocab, &classes, &tasks)?;
            let dev_ex = encode_examples(&dev_set, &vocab, &classes, &tasks)?;
            let model = Model::build(spec.clone(), seed)?;
            let result = training::train(&model, &train_ex, &dev_ex, &cfg)?;

            std::fs::write(out_dir.join("history.csv"), history_to_csv(&result.history))?;
            write_vocab(&out_dir.join("vocab.txt"), &vocab)?;
            let meta = CheckpointMeta {
                spec,
                vocab_hash: vocab.hash(),
                seed,
                epoch: result.best_epoch,
                dev_metrics: best_epoch_metrics(&result),
                classes,
            };
            save_checkpoint(&out_dir.join("model.ckpt"), &model, &meta)?;
            write_manifest(
                &out_dir,
                "train",
                &settings.resolved(),
                seed,
                &[&train_path, &dev_path],
            )?;
            println!(
                "best_epoch={} best_metric={:.3} epochs_run={}",
                result.best_epoch,
                result.best_metric,
                result.history.len()
            );
            Ok(())
        }
        Command::Selftrain {
            checkpoint,
            vocab,
            pool,
            train,
            mode,
            top_pct,
            task,
            hierarchy,
            min_tokens,
            require_zero_diacritics,
            replies_only,
        } => {
            let ckpt_path = settings.require_path("checkpoint", checkpoint)?;
            let vocab_path = settings.require_path("vocab", vocab)?;
            let pool_path = settings.require_path("pool", pool)?;
            let train_path = settings.require_path("train", train)?;
            let hierarchy_path = settings.optional_path("hierarchy", hierarchy)?;
            let (model, meta, vocab) = load_model(&ckpt_path, &vocab_path)?;

            let mode: String = settings.get("mode", mode, "class_agnostic".into())?;
            let mode = match mode.as_str() {
                "class_agnostic" => SelectMode::ClassAgnostic,
                "class_specific" => SelectMode::ClassSpecific,
                other => return Err(CliError::User(format!("unknown mode {other:?}"))),
            };
            let task = parse_task(&settings.get("task", task, "city".into())?)?;
            let cfg = SelfTrainConfig {
                mode,
                top_pct: settings.get("top_pct", top_pct, 10.0)?,
                task,
                min_tokens: match min_tokens {
                    Some(m) => Some(m),
                    None => settings
                        .get("min_tokens", None::<usize>, 0)
                        .ok()
                        .filter(|&m| m > 0),
                },
                require_zero_diacritics: settings.get(
                    "require_zero_diacritics",
                    require_zero_diacritics.then_some(true),
                    false,
                )?,
                replies_only: settings.get("replies_only", replies_only.then_some(true), false)?,
            };

            let tasks = model.spec.tasks();
            if !tasks.contains(&task) {
                return Err(CliError::User(format!(
                    "checkpoint does not supervise task {}",
                    task.name()
                )));
            }
            let geo = match &hierarchy_path {
                Some(p) => {
                    Some(LocationHierarchy::load(p).map_err(|e| CliError::User(e.to_string()))?)
                }
                None => None,
            };
            if tasks.len() != 3 && !(tasks == [Task::City] && geo.is_some()) {
                return Err(CliError::User(
                    "pseudo-labeling needs an MTL checkpoint, or a city model plus --hierarchy"
                        .into(),
                ));
            }

            let pool_records = load_records(&pool_path)?;
            let preds = predict(&model, &meta, &vocab, &pool_records)?;
            let class_index: BTreeMap<&str, usize> = meta.classes[&task]
                .iter()
                .enumerate()
                .map(|(i, c)| (c.as_str(), i))
                .collect();
            let items: Vec<PoolItem> = pool_records
                .iter()
                .enumerate()
                .map(|(i, rec)| {
                    let mut rec = rec.clone();
                    rec.mask_len = encode_tweet(&rec, &vocab).mask_len;
                    let (label, confidence) = preds[&task][i].clone();
                    PoolItem { record: rec, predicted: class_index[label.as_str()], confidence }
                })
                .collect();
            let picked = self_train_select(&items, &cfg)?;

            let mut augmented = load_records(&train_path)?;
            let before = augmented.len();
            for &i in &picked {
                let mut rec = items[i].record.clone();
                let triple = if tasks.len() == 3 {
                    mudi_core::corpus::LabelTriple {
                        city: preds[&Task::City][i].0.clone(),
                        state: preds[&Task::State][i].0.clone(),
                        country: preds[&Task::Country][i].0.clone(),
                    }
                } else {
                    geo.as_ref()
                        .unwrap()
                        .derive_labels(&preds[&Task::City][i].0)
                        .map_err(|e| CliError::User(e.to_string()))?
                };
                rec.labels = Some(triple);
                rec.label_source = LabelSource::Pseudo;
                rec.confidence = Some(items[i].confidence);
                augmented.push(rec);
            }
            write_records(&out_dir.join("augmented_train.jsonl"), &augmented)?;
            let mut inputs: Vec<&Path> = vec![&ckpt_path, &vocab_path, &pool_path, &train_path];
            if let Some(h) = &hierarchy_path {
                inputs.push(h);
            }
            write_manifest(&out_dir, "selftrain", &settings.resolved(), meta.seed, &inputs)?;
            println!(
                "pool={} selected={} train={before} augmented={}",
                items.len(),
                picked.len(),
                augmented.len()
            );
            Ok(())
        }
        Command::Weak {
            weak,
            gold,
            dev,
            regime,
            model,
            task,
            order,
            embed_dim,
            hidden,
            heads,
            dropout,
            epochs,
            patience,
            batch,
            lr,
            min_count,
            selection,
            seed,
        } => {
            let weak_path = settings.require_path("weak", weak)?;
            let gold_path = settings.require_path("gold", gold)?;
            let dev_path = settings.require_path("dev", dev)?;
            let regime: WeakRegime = settings
                .require::<String>("regime", regime)?
                .parse()
                .map_err(CliError::User)?;
            let seed = settings.get("seed", seed, 0)?;
            let variant = parse_variant(settings, model, task, order)?;

            let weak_set = load_records(&weak_path)?;
            let gold_set = load_records(&gold_path)?;
            let dev_set = load_records(&dev_path)?;

            // One vocabulary over weak+gold so all regimes share the input
            // space and WeakThenGold's two phases stay compatible.
            let min_count = settings.get("min_count", min_count, 1)?;
            let token_lists: Vec<Vec<String>> = weak_set
                .iter()
                .chain(gold_set.iter())
                .map(record_tokens)
                .collect();
            let vocab = Vocabulary::build(&token_lists, min_count)
                .map_err(|e| CliError::User(e.to_string()))?;

            let tasks = match variant {
                Variant::SingleTask(t) | Variant::GruBaseline(t) => vec![t],
                _ => Task::ALL.to_vec(),
            };
            let classes = build_classes(
                &[weak_set.as_slice(), gold_set.as_slice(), dev_set.as_slice()],
                &tasks,
            )?;
            let class_counts: BTreeMap<Task, usize> =
                classes.iter().map(|(t, c)| (*t, c.len())).collect();
            let mut spec =
                resolve_spec(settings, variant, embed_dim, hidden, heads, dropout, class_counts)?;
            spec.vocab_size = vocab.len();
            let cfg =
                resolve_train_config(settings, epochs, patience, batch, lr, selection, seed)?;

            let weak_ex = encode_examples(&weak_set, &vocab, &classes, &tasks)?;
            let gold_ex = encode_examples(&gold_set, &vocab, &classes, &tasks)?;
            let dev_ex = encode_examples(&dev_set, &vocab, &classes, &tasks)?;
            let outcome =
                run_weak_regime(spec.clone(), seed, &weak_ex, &gold_ex, &dev_ex, &cfg, regime)?;

            for (i, result) in outcome.phase_results.iter().enumerate() {
                std::fs::write(
                    out_dir.join(format!("history_phase{}.csv", i + 1)),
                    history_to_csv(&result.history),
                )?;
            }
            write_vocab(&out_dir.join("vocab.txt"), &vocab)?;
            let last = outcome.phase_results.last().expect("at least one phase");
            let meta = CheckpointMeta {
                spec,
                vocab_hash: vocab.hash(),
                seed,
                epoch: last.best_epoch,
                dev_metrics: best_epoch_metrics(last),
                classes,
            };
            save_checkpoint(&out_dir.join("model.ckpt"), &outcome.model, &meta)?;
            write_manifest(
                &out_dir,
                "weak",
                &settings.resolved(),
                seed,
                &[&weak_path, &gold_path, &dev_path],
            )?;
            println!(
                "phases={:?} best_metric={:.3}",
                outcome.phase_sizes, last.best_metric
            );
            Ok(())
        }
        Command::Eval { checkpoint, vocab, input } => {
            let ckpt_path = settings.require_path("checkpoint", checkpoint)?;
            let vocab_path = settings.require_path("vocab", vocab)?;
            let input_path = settings.require_path("input", input)?;
            let (model, meta, vocab) = load_model(&ckpt_path, &vocab_path)?;
            let records = load_records(&input_path)?;
            let preds = predict(&model, &meta, &vocab, &records)?;

            let mut reports = BTreeMap::new();
            let mut csv = String::from("task,accuracy,macro_f1\n");
            for (task, task_preds) in &preds {
                let y_true: Vec<String> = records
                    .iter()
                    .map(|r| label_of(r, *task))
                    .collect::<Result<_, _>>()?;
                let y_pred: Vec<String> = task_preds.iter().map(|(l, _)| l.clone()).collect();
                let m = compute_metrics(&y_true, &y_pred, &meta.classes[task])
                    .map_err(|e| CliError::User(e.to_string()))?;
                writeln!(csv, "{},{:.3},{:.3}", task.name(), m.accuracy, m.macro_f1).unwrap();
                reports.insert(task.name().to_string(), m);
            }
            std::fs::write(
                out_dir.join("metrics.json"),
                mudi_core::evaluation::metrics_to_json(&reports) + "\n",
            )?;
            std::fs::write(out_dir.join("metrics.csv"), &csv)?;
            write_manifest(
                &out_dir,
                "eval",
                &settings.resolved(),
                meta.seed,
                &[&ckpt_path, &vocab_path, &input_path],
            )?;
            print!("{csv}");
            Ok(())
        }
        Command::Usereval { checkpoint, vocab, input, task, n, thresholds } => {
            let ckpt_path = settings.require_path("checkpoint", checkpoint)?;
            let vocab_path = settings.require_path("vocab", vocab)?;
            let input_path = settings.require_path("input", input)?;
            let (model, meta, vocab) = load_model(&ckpt_path, &vocab_path)?;
            let task = parse_task(&settings.get("task", task, "country".into())?)?;
            if !meta.classes.contains_key(&task) {
                return Err(CliError::User(format!(
                    "checkpoint does not supervise task {}",
                    task.name()
                )));
            }
            let parse_list = |raw: &str, what: &str| -> Result<Vec<f64>, CliError> {
                raw.split(',')
                    .map(|x| x.trim().parse::<f64>())
                    .collect::<Result<Vec<f64>, _>>()
                    .map_err(|_| CliError::User(format!("bad {what} list {raw:?}")))
            };
            let n_list: Vec<usize> = parse_list(
                &settings.get("n", n, "10,25,50,75,100,500".into())?,
                "n",
            )?
            .into_iter()
            .map(|x| x as usize)
            .collect();
            let thresholds = parse_list(
                &settings.get("thresholds", thresholds, "0.0,0.25,0.5,0.75,0.9".into())?,
                "thresholds",
            )?;

            let records = load_records(&input_path)?;
            let preds = predict(&model, &meta, &vocab, &records)?;
            // Group by user in first-seen order; truth = the user's gold
            // label on their first tweet.
            let mut order: Vec<String> = Vec::new();
            let mut by_user: BTreeMap<String, Vec<TweetPrediction>> = BTreeMap::new();
            let mut truth: BTreeMap<String, String> = BTreeMap::new();
            for (i, rec) in records.iter().enumerate() {
                let (label, confidence) = preds[&task][i].clone();
                if !by_user.contains_key(&rec.user_id) {
                    order.push(rec.user_id.clone());
                    truth.insert(rec.user_id.clone(), label_of(rec, task)?);
                }
                by_user
                    .entry(rec.user_id.clone())
                    .or_default()
                    .push(TweetPrediction { label, confidence });
            }

            let mut csv = String::from("n,acc,thresh,f1,thresh\n");
            for &n in &n_list {
                for &thresh in &thresholds {
                    let mut y_true = Vec::new();
                    let mut y_pred = Vec::new();
                    for user in &order {
                        let p = user_level_predict(&by_user[user], n, thresh)
                            .map_err(|e| CliError::Internal(e.to_string()))?;
                        y_pred.push(p);
                        y_true.push(truth[user].clone());
                    }
                    let m = compute_metrics(&y_true, &y_pred, &meta.classes[&task])
                        .map_err(|e| CliError::User(e.to_string()))?;
                    writeln!(
                        csv,
                        "{n},{:.3},{thresh},{:.3},{thresh}",
                        m.accuracy, m.macro_f1
                    )
                    .unwrap();
                }
            }
            std::fs::write(out_dir.join("usereval.csv"), &csv)?;
            write_manifest(
                &out_dir,
                "usereval",
                &settings.resolved(),
                meta.seed,
                &[&ckpt_path, &vocab_path, &input_path],
            )?;
            print!("{csv}");
            Ok(())
        }
    }
}
