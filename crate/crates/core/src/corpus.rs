//! Deterministic text pipeline: normalization, filtering, light
//! tokenization, vocabulary, encoding, splitting, and a synthetic corpus
//! generator for desk-scale experiments.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::{BTreeMap, HashMap};
use std::sync::OnceLock;
use thiserror::Error;

use crate::geo::LocationHierarchy;

pub const PAD_TOKEN: &str = "<PAD>";
pub const UNK_TOKEN: &str = "<UNK>";
pub const USER_TOKEN: &str = "<USER>";
pub const URL_TOKEN: &str = "<URL>";

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const USER_ID: usize = 2;
pub const URL_ID: usize = 3;

/// Sequences are trimmed at 50 tokens.
pub const MAX_SEQ_LEN: usize = 50;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("need at least 3 records to split, got {0}")]
    TooFewRecords(usize),
    #[error("split ratios must sum to 1, got {0}")]
    BadRatios(f64),
    #[error("invalid record: {0}")]
    InvalidRecord(String),
}

/// City, state, and country labels for one tweet or user.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LabelTriple {
    pub city: String,
    pub state: String,
    pub country: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelSource {
    Gold,
    Weak,
    Pseudo,
}

/// One tweet moving through the pipeline.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TweetRecord {
    pub tweet_id: String,
    pub user_id: String,
    pub raw_text: String,
    #[serde(default)]
    pub normalized_text: String,
    #[serde(default)]
    pub token_ids: Vec<usize>,
    #[serde(default)]
    pub mask_len: usize,
    pub labels: Option<LabelTriple>,
    #[serde(default = "gold_source")]
    pub label_source: LabelSource,
    /// Set iff `label_source` is `Pseudo`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confidence: Option<f64>,
}

fn gold_source() -> LabelSource {
    LabelSource::Gold
}

impl TweetRecord {
    pub fn new(tweet_id: &str, user_id: &str, raw_text: &str, labels: Option<LabelTriple>) -> Self {
        TweetRecord {
            tweet_id: tweet_id.to_string(),
            user_id: user_id.to_string(),
            raw_text: raw_text.to_string(),
            normalized_text: String::new(),
            token_ids: Vec::new(),
            mask_len: 0,
            labels,
            label_source: LabelSource::Gold,
            confidence: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FilterDecision {
    Keep,
    DiscardRetweet,
    DiscardTooFewArabic,
}

fn url_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?:https?://|www\.)\S+").unwrap())
}

fn mention_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"@[A-Za-z0-9_]{1,15}").unwrap())
}

fn is_arabic_diacritic(c: char) -> bool {
    ('\u{064B}'..='\u{065F}').contains(&c) || c == '\u{0670}'
}

fn is_arabic_letter(c: char) -> bool {
    ('\u{0621}'..='\u{064A}').contains(&c)
}

/// Collapse runs of the same character longer than 2 down to exactly 2.
fn collapse_runs(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    let mut prev: Option<char> = None;
    let mut run = 0usize;
    for c in s.chars() {
        if Some(c) == prev {
            run += 1;
        } else {
            prev = Some(c);
            run = 1;
        }
        if run <= 2 {
            out.push(c);
        }
    }
    out
}

/// Normalize raw tweet text. In order: URLs to `<URL>`, @-mentions to
/// `<USER>`, (optionally) Arabic diacritics removed, and character runs
/// longer than 2 collapsed to 2. Idempotent: diacritics are stripped
/// before run-collapsing, since removing a diacritic between repeated
/// letters can create a new run.
pub fn normalize_text(raw: &str, strip_diacritics: bool) -> String {
    let s = url_re().replace_all(raw, URL_TOKEN);
    let s = mention_re().replace_all(&s, USER_TOKEN);
    let s: String = if strip_diacritics {
        s.chars().filter(|c| !is_arabic_diacritic(*c)).collect()
    } else {
        s.into_owned()
    };
    collapse_runs(&s)
}

fn count_arabic_words(text: &str) -> usize {
    text.split_whitespace()
        .filter(|w| w.chars().any(is_arabic_letter))
        .count()
}

/// Keep/discard decision for one normalized tweet. Retweets (raw text
/// starting with `RT @`) and tweets with fewer than 3 Arabic words are
/// dropped.
pub fn filter_tweet(record: &TweetRecord) -> FilterDecision {
    if record.raw_text.starts_with("RT @") {
        return FilterDecision::DiscardRetweet;
    }
    if count_arabic_words(&record.normalized_text) < 3 {
        return FilterDecision::DiscardTooFewArabic;
    }
    FilterDecision::Keep
}

fn is_punct(c: char) -> bool {
    !c.is_alphanumeric() && !c.is_whitespace()
}

/// Light tokenization: whitespace split with punctuation characters split
/// off one per token. The `<USER>`/`<URL>` placeholders are never split.
pub fn tokenize(normalized: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    for chunk in normalized.split_whitespace() {
        let mut rest = chunk;
        let mut word = String::new();
        while !rest.is_empty() {
            if rest.starts_with(USER_TOKEN) || rest.starts_with(URL_TOKEN) {
                if !word.is_empty() {
                    tokens.push(std::mem::take(&mut word));
                }
                let ph = if rest.starts_with(USER_TOKEN) { USER_TOKEN } else { URL_TOKEN };
                tokens.push(ph.to_string());
                rest = &rest[ph.len()..];
                continue;
            }
            let c = rest.chars().next().unwrap();
            if is_punct(c) {
                if !word.is_empty() {
                    tokens.push(std::mem::take(&mut word));
                }
                tokens.push(c.to_string());
            } else {
                word.push(c);
            }
            rest = &rest[c.len_utf8()..];
        }
        if !word.is_empty() {
            tokens.push(word);
        }
    }
    tokens
}

/// Token/id mapping with reserved ids 0=PAD, 1=UNK, 2=USER, 3=URL.
/// Non-reserved entries are ordered by corpus frequency (desc) then
/// lexicographically, so the mapping is deterministic.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    token_to_id: HashMap<String, usize>,
    id_to_token: Vec<String>,
}

impl Vocabulary {
    pub fn build<S: AsRef<str>>(corpus: &[Vec<S>], min_count: usize) -> Result<Self, CorpusError> {
        assert!(min_count >= 1, "min_count must be >= 1");
        if corpus.is_empty() {
            return Err(CorpusError::EmptyCorpus);
        }
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for seq in corpus {
            for tok in seq {
                let t = tok.as_ref();
                if t == USER_TOKEN || t == URL_TOKEN {
                    continue;
                }
                *counts.entry(t).or_insert(0) += 1;
            }
        }
        let mut entries: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|(_, c)| *c >= min_count)
            .collect();
        entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));

        let mut id_to_token: Vec<String> =
            vec![PAD_TOKEN, UNK_TOKEN, USER_TOKEN, URL_TOKEN].into_iter().map(String::from).collect();
        id_to_token.extend(entries.iter().map(|(t, _)| t.to_string()));
        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Ok(Vocabulary { token_to_id, id_to_token })
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Self, CorpusError> {
        if tokens.len() < 4
            || tokens[PAD_ID] != PAD_TOKEN
            || tokens[UNK_ID] != UNK_TOKEN
            || tokens[USER_ID] != USER_TOKEN
            || tokens[URL_ID] != URL_TOKEN
        {
            return Err(CorpusError::InvalidRecord(
                "vocabulary file must start with the four reserved tokens".into(),
            ));
        }
        let token_to_id = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Ok(Vocabulary { token_to_id, id_to_token: tokens })
    }

    pub fn id(&self, token: &str) -> usize {
        *self.token_to_id.get(token).unwrap_or(&UNK_ID)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.id_to_token.get(id).map(|s| s.as_str())
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn tokens(&self) -> &[String] {
        &self.id_to_token
    }

    /// SHA-256 over the token list; recorded in checkpoints so a model is
    /// never run against the wrong vocabulary.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.id_to_token {
            h.update(t.as_bytes());
            h.update([b'\n']);
        }
        format!("{:x}", h.finalize())
    }
}

/// Map tokens to ids (unknown -> UNK), truncate at `max_len`, right-pad
/// with PAD. Returns the ids and the count of real tokens.
pub fn encode_sequence<S: AsRef<str>>(
    tokens: &[S],
    vocab: &Vocabulary,
    max_len: usize,
) -> (Vec<usize>, usize) {
    let mask_len = tokens.len().min(max_len);
    let mut ids: Vec<usize> = tokens[..mask_len]
        .iter()
        .map(|t| vocab.id(t.as_ref()))
        .collect();
    ids.resize(max_len, PAD_ID);
    (ids, mask_len)
}

/// Train/dev/test partition of a corpus.
#[derive(Debug, Clone)]
pub struct SplitSet {
    pub train: Vec<TweetRecord>,
    pub dev: Vec<TweetRecord>,
    pub test: Vec<TweetRecord>,
    pub seed: u64,
}

/// Shuffle by seed, partition per `ratios`, then down-sample each country
/// class within TRAIN to at most `cap` tweets. DEV/TEST are untouched.
pub fn make_splits(
    records: &[TweetRecord],
    ratios: (f64, f64, f64),
    cap: usize,
    seed: u64,
) -> Result<SplitSet, CorpusError> {
    make_splits_with(records, ratios, cap, seed, false)
}

/// As [`make_splits`], optionally keeping each user's tweets within a
/// single split.
pub fn make_splits_with(
    records: &[TweetRecord],
    ratios: (f64, f64, f64),
    cap: usize,
    seed: u64,
    user_disjoint: bool,
) -> Result<SplitSet, CorpusError> {
    let sum = ratios.0 + ratios.1 + ratios.2;
    if (sum - 1.0).abs() > 1e-9 {
        return Err(CorpusError::BadRatios(sum));
    }
    assert!(cap >= 1, "cap must be >= 1");
    if records.len() < 3 {
        return Err(CorpusError::TooFewRecords(records.len()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (train, dev, test) = if user_disjoint {
        let mut users: Vec<&str> = {
            let mut seen = BTreeMap::new();
            for r in records {
                *seen.entry(r.user_id.as_str()).or_insert(0usize) += 1;
            }
            seen.keys().cloned().collect()
        };
        users.shuffle(&mut rng);
        let n = records.len();
        let train_target = (n as f64 * ratios.0).round() as usize;
        let dev_target = (n as f64 * ratios.1).round() as usize;
        let counts: HashMap<&str, usize> = {
            let mut m = HashMap::new();
            for r in records {
                *m.entry(r.user_id.as_str()).or_insert(0) += 1;
            }
            m
        };
        let mut assign: HashMap<&str, u8> = HashMap::new();
        let mut taken = 0usize;
        for u in &users {
            let c = counts[u];
            let split = if taken < train_target {
                0
            } else if taken < train_target + dev_target {
                1
            } else {
                2
            };
            assign.insert(u, split);
            taken += c;
        }
        let mut tr = Vec::new();
        let mut dv = Vec::new();
        let mut te = Vec::new();
        for r in records {
            match assign[r.user_id.as_str()] {
                0 => tr.push(r.clone()),
                1 => dv.push(r.clone()),
                _ => te.push(r.clone()),
            }
        }
        (tr, dv, te)
    } else {
        let mut shuffled: Vec<TweetRecord> = records.to_vec();
        shuffled.shuffle(&mut rng);
        let n = shuffled.len();
        let n_train = (n as f64 * ratios.0).round() as usize;
        let n_dev = ((n as f64 * ratios.1).round() as usize).min(n - n_train);
        let test = shuffled.split_off(n_train + n_dev);
        let dev = shuffled.split_off(n_train);
        (shuffled, dev, test)
    };

    // Cap TRAIN per country, sampling uniformly with the same seed stream.
    let mut by_country: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, r) in train.iter().enumerate() {
        let key = r
            .labels
            .as_ref()
            .map(|l| l.country.clone())
            .unwrap_or_default();
        by_country.entry(key).or_default().push(i);
    }
    let mut keep = vec![true; train.len()];
    for (_, mut idxs) in by_country {
        if idxs.len() > cap {
            idxs.shuffle(&mut rng);
            for &i in &idxs[cap..] {
                keep[i] = false;
            }
        }
    }
    let train = train
        .into_iter()
        .zip(keep)
        .filter_map(|(r, k)| k.then_some(r))
        .collect();

    Ok(SplitSet { train, dev, test, seed })
}

/// Synthetic corpus over a location hierarchy. Each country gets a base
/// unigram distribution over `tok####` tokens; each state mixes in a
/// state-unique component weighted `state_drift`, each city likewise with
/// `city_drift`. Tweets are i.i.d. token draws, fully gold-labeled, and
/// per-record randomness is derived from `seed` + tweet id so output is
/// independent of iteration order.
pub struct SyntheticConfig {
    pub vocab_size: usize,
    pub tweets_per_city: usize,
    pub tweet_len: usize,
    pub state_drift: f64,
    pub city_drift: f64,
    pub seed: u64,
}

fn dirichlet_uniform(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    // Dirichlet(1, .., 1) via normalized exponentials.
    let mut v: Vec<f64> = (0..n)
        .map(|_| -(rng.gen_range(f64::EPSILON..1.0f64)).ln())
        .collect();
    let s: f64 = v.iter().sum();
    v.iter_mut().for_each(|x| *x /= s);
    v
}

fn mix(base: &[f64], unique: &[f64], drift: f64) -> Vec<f64> {
    if drift == 0.0 {
        // Exact copy keeps per-city distributions bitwise identical.
        return base.to_vec();
    }
    base.iter()
        .zip(unique.iter())
        .map(|(b, u)| (1.0 - drift) * b + drift * u)
        .collect()
}

/// Derive a stream seed from a base seed and a list of string parts, via
/// SHA-256. Stable across platforms and runs.
pub fn seed_from(parts: &[&str], seed: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    for p in parts {
        h.update(p.as_bytes());
        h.update([0]);
    }
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

/// Per-city unigram distributions for a hierarchy; exposed so tests can
/// assert on the distributions themselves.
pub fn synthetic_distributions(
    hierarchy: &LocationHierarchy,
    cfg: &SyntheticConfig,
) -> BTreeMap<String, Vec<f64>> {
    assert!((0.0..=1.0).contains(&cfg.state_drift) && (0.0..=1.0).contains(&cfg.city_drift));
    assert!(cfg.vocab_size > hierarchy.n_cities(), "vocab_size must exceed city count");
    let mut country_dist: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for country in hierarchy.countries() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed_from(&["country", &country], cfg.seed));
        country_dist.insert(country.clone(), dirichlet_uniform(cfg.vocab_size, &mut rng));
    }
    let mut state_dist: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for state in hierarchy.states() {
        let country = hierarchy.country_of_state(&state).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed_from(&["state", &state], cfg.seed));
        let unique = dirichlet_uniform(cfg.vocab_size, &mut rng);
        state_dist.insert(
            state.clone(),
            mix(&country_dist[&country], &unique, cfg.state_drift),
        );
    }
    let mut city_dist = BTreeMap::new();
    for city in hierarchy.cities() {
        let state = hierarchy.state_of_city(&city).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed_from(&["city", &city], cfg.seed));
        let unique = dirichlet_uniform(cfg.vocab_size, &mut rng);
        city_dist.insert(city.clone(), mix(&state_dist[&state], &unique, cfg.city_drift));
    }
    city_dist
}

pub fn generate_synthetic_corpus(
    hierarchy: &LocationHierarchy,
    cfg: &SyntheticConfig,
) -> Vec<TweetRecord> {
    let city_dist = synthetic_distributions(hierarchy, cfg);
    let mut records = Vec::new();
    for (city, dist) in &city_dist {
        let state = hierarchy.state_of_city(city).unwrap();
        let country = hierarchy.country_of_state(&state).unwrap();
        // Cumulative distribution for inverse sampling.
        let mut cum = Vec::with_capacity(dist.len());
        let mut acc = 0.0;
        for p in dist {
            acc += p;
            cum.push(acc);
        }
        for i in 0..cfg.tweets_per_city {
            let tweet_id = format!("synth-{city}-{i:06}");
            let mut rng = ChaCha8Rng::seed_from_u64(seed_from(&["tweet", &tweet_id], cfg.seed));
            let text: Vec<String> = (0..cfg.tweet_len)
                .map(|_| {
                    let u: f64 = rng.gen();
                    let k = cum.partition_point(|c| *c < u).min(dist.len() - 1);
                    format!("tok{k:05}")
                })
                .collect();
            let text = text.join(" ");
            let mut rec = TweetRecord::new(
                &tweet_id,
                &format!("user-{city}-{:03}", i / 10),
                &text,
                Some(LabelTriple {
                    city: city.clone(),
                    state: state.clone(),
                    country: country.clone(),
                }),
            );
            rec.normalized_text = text;
            records.push(rec);
        }
    }
    records
}

/// Serialize to the corpus JSON Lines interchange form: one object per
/// tweet with fields tweet_id, user_id, text, and optional labels.
pub fn record_to_jsonl(r: &TweetRecord) -> String {
    let mut obj = serde_json::Map::new();
    obj.insert("tweet_id".into(), r.tweet_id.clone().into());
    obj.insert("user_id".into(), r.user_id.clone().into());
    obj.insert("text".into(), r.raw_text.clone().into());
    if let Some(l) = &r.labels {
        obj.insert("city".into(), l.city.clone().into());
        obj.insert("state".into(), l.state.clone().into());
        obj.insert("country".into(), l.country.clone().into());
    }
    if !r.normalized_text.is_empty() {
        obj.insert("normalized".into(), r.normalized_text.clone().into());
    }
    match r.label_source {
        LabelSource::Gold => {}
        LabelSource::Weak => {
            obj.insert("label_source".into(), "weak".into());
        }
        LabelSource::Pseudo => {
            obj.insert("label_source".into(), "pseudo".into());
            if let Some(c) = r.confidence {
                obj.insert("confidence".into(), c.into());
            }
        }
    }
    serde_json::Value::Object(obj).to_string()
}

pub fn record_from_jsonl(line: &str) -> Result<TweetRecord, CorpusError> {
    let v: serde_json::Value =
        serde_json::from_str(line).map_err(|e| CorpusError::InvalidRecord(e.to_string()))?;
    let get = |k: &str| -> Result<String, CorpusError> {
        v.get(k)
            .and_then(|x| x.as_str())
            .map(String::from)
            .ok_or_else(|| CorpusError::InvalidRecord(format!("missing field {k}")))
    };
    let labels = match (v.get("city"), v.get("state"), v.get("country")) {
        (Some(c), Some(s), Some(k)) => Some(LabelTriple {
            city: c.as_str().unwrap_or_default().to_string(),
            state: s.as_str().unwrap_or_default().to_string(),
            country: k.as_str().unwrap_or_default().to_string(),
        }),
        _ => None,
    };
    let mut rec = TweetRecord::new(&get("tweet_id")?, &get("user_id")?, &get("text")?, labels);
    if let Some(n) = v.get("normalized").and_then(|x| x.as_str()) {
        rec.normalized_text = n.to_string();
    }
    match v.get("label_source").and_then(|x| x.as_str()) {
        Some("weak") => rec.label_source = LabelSource::Weak,
        Some("pseudo") => {
            rec.label_source = LabelSource::Pseudo;
            rec.confidence = v.get("confidence").and_then(|x| x.as_f64());
        }
        _ => {}
    }
    Ok(rec)
}
