//! Shared plumbing between subcommands: corpus IO, encoding, vocabulary
//! files, prediction, and run manifests.

use mudi_core::autograd::Tape;
use mudi_core::corpus::{
    encode_sequence, normalize_text, record_from_jsonl, record_to_jsonl, tokenize,
    TweetRecord, Vocabulary, MAX_SEQ_LEN,
};
use mudi_core::models::{EncodedTweet, Model, Task};
use mudi_core::training::{argmax, TrainExample};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::CliError;

pub fn load_records(path: &Path) -> Result<Vec<TweetRecord>, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::User(format!("cannot read {}: {e}", path.display())))?;
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec = record_from_jsonl(line).map_err(|e| {
            CliError::User(format!("{} line {}: {e}", path.display(), i + 1))
        })?;
        records.push(rec);
    }
    if records.is_empty() {
        return Err(CliError::User(format!("{}: no records", path.display())));
    }
    Ok(records)
}

pub fn write_records(path: &Path, records: &[TweetRecord]) -> Result<(), CliError> {
    let mut out = String::new();
    for r in records {
        out.push_str(&record_to_jsonl(r));
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Tokens for a record, normalizing on the fly when the pipeline has not
/// run yet.
pub fn record_tokens(rec: &TweetRecord) -> Vec<String> {
    let normalized = if rec.normalized_text.is_empty() {
        normalize_text(&rec.raw_text, true)
    } else {
        rec.normalized_text.clone()
    };
    tokenize(&normalized)
}

pub fn label_of(rec: &TweetRecord, task: Task) -> Result<String, CliError> {
    let labels = rec
        .labels
        .as_ref()
        .ok_or_else(|| CliError::User(format!("tweet {} has no labels", rec.tweet_id)))?;
    Ok(match task {
        Task::City => labels.city.clone(),
        Task::State => labels.state.clone(),
        Task::Country => labels.country.clone(),
    })
}

/// Sorted unique label strings per task over all given record sets.
pub fn build_classes(
    sets: &[&[TweetRecord]],
    tasks: &[Task],
) -> Result<BTreeMap<Task, Vec<String>>, CliError> {
    let mut classes = BTreeMap::new();
    for &task in tasks {
        let mut seen: Vec<String> = Vec::new();
        for set in sets {
            for rec in *set {
                seen.push(label_of(rec, task)?);
            }
        }
        seen.sort();
        seen.dedup();
        classes.insert(task, seen);
    }
    Ok(classes)
}

pub fn encode_tweet(rec: &TweetRecord, vocab: &Vocabulary) -> EncodedTweet {
    let tokens = record_tokens(rec);
    let (ids, mask_len) = encode_sequence(&tokens, vocab, MAX_SEQ_LEN);
    EncodedTweet { ids, mask_len }
}

pub fn encode_examples(
    records: &[TweetRecord],
    vocab: &Vocabulary,
    classes: &BTreeMap<Task, Vec<String>>,
    tasks: &[Task],
) -> Result<Vec<TrainExample>, CliError> {
    let index: BTreeMap<Task, BTreeMap<&str, usize>> = classes
        .iter()
        .map(|(t, cs)| {
            (*t, cs.iter().enumerate().map(|(i, c)| (c.as_str(), i)).collect())
        })
        .collect();
    let mut out = Vec::with_capacity(records.len());
    for rec in records {
        let mut targets = BTreeMap::new();
        for &task in tasks {
            let label = label_of(rec, task)?;
            let idx = *index[&task].get(label.as_str()).ok_or_else(|| {
                CliError::User(format!(
                    "tweet {}: {} label {label:?} not in the training class set",
                    rec.tweet_id,
                    task.name()
                ))
            })?;
            targets.insert(task, idx);
        }
        out.push(TrainExample { tweet: encode_tweet(rec, vocab), targets });
    }
    Ok(out)
}

/// Vocabulary file: one token per line, line number = id.
pub fn write_vocab(path: &Path, vocab: &Vocabulary) -> Result<(), CliError> {
    std::fs::write(path, vocab.tokens().join("\n") + "\n")?;
    Ok(())
}

pub fn read_vocab(path: &Path) -> Result<Vocabulary, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::User(format!("cannot read {}: {e}", path.display())))?;
    let tokens: Vec<String> = text.lines().map(str::to_string).collect();
    Vocabulary::from_tokens(tokens)
        .map_err(|e| CliError::User(format!("{}: {e}", path.display())))
}

/// Load a checkpoint + its vocabulary, refusing mismatched pairs.
pub fn load_model(
    ckpt: &Path,
    vocab_path: &Path,
) -> Result<(Model, mudi_core::models::CheckpointMeta, Vocabulary), CliError> {
    let (model, meta) = mudi_core::models::load_checkpoint(ckpt)
        .map_err(|e| CliError::User(format!("{}: {e}", ckpt.display())))?;
    let vocab = read_vocab(vocab_path)?;
    if vocab.hash() != meta.vocab_hash {
        return Err(CliError::User(format!(
            "vocabulary {} does not match checkpoint {} (hash mismatch)",
            vocab_path.display(),
            ckpt.display()
        )));
    }
    Ok((model, meta, vocab))
}

/// Per-task (predicted label, confidence) for each record, in eval mode.
pub fn predict(
    model: &Model,
    meta: &mudi_core::models::CheckpointMeta,
    vocab: &Vocabulary,
    records: &[TweetRecord],
) -> Result<BTreeMap<Task, Vec<(String, f64)>>, CliError> {
    let mut out: BTreeMap<Task, Vec<(String, f64)>> = BTreeMap::new();
    for chunk in records.chunks(64) {
        let tweets: Vec<EncodedTweet> =
            chunk.iter().map(|r| encode_tweet(r, vocab)).collect();
        let tape = Tape::new();
        let output = model
            .forward_batch(&tape, &tweets, None, false, 0)
            .map_err(|e| CliError::Internal(e.to_string()))?;
        for (task, rows) in &output.probs {
            let classes = meta.classes.get(task).ok_or_else(|| {
                CliError::User(format!("checkpoint has no class list for {}", task.name()))
            })?;
            for row in rows {
                let k = argmax(row);
                out.entry(*task)
                    .or_default()
                    .push((classes[k].clone(), row[k]));
            }
        }
    }
    Ok(out)
}

pub fn sha256_hex(path: &Path) -> Result<String, CliError> {
    let bytes = std::fs::read(path)
        .map_err(|e| CliError::User(format!("cannot read {}: {e}", path.display())))?;
    let mut h = Sha256::new();
    h.update(&bytes);
    Ok(format!("{:x}", h.finalize()))
}

/// Every run records its resolved configuration, seed, and input hashes,
/// so any artifact can be reproduced from the manifest alone.
pub fn write_manifest(
    out_dir: &Path,
    command: &str,
    config: &BTreeMap<String, String>,
    seed: u64,
    inputs: &[&Path],
) -> Result<(), CliError> {
    let mut hashes = BTreeMap::new();
    for p in inputs {
        hashes.insert(p.display().to_string(), sha256_hex(p)?);
    }
    let doc = serde_json::json!({
        "command": command,
        "seed": seed,
        "config": config,
        "inputs": hashes,
    });
    let mut f = std::fs::File::create(out_dir.join("manifest.json"))?;
    writeln!(f, "{}", serde_json::to_string_pretty(&doc).expect("manifest json"))?;
    Ok(())
}

pub fn ensure_out_dir(dir: &Path) -> Result<PathBuf, CliError> {
    std::fs::create_dir_all(dir)?;
    Ok(dir.to_path_buf())
}
