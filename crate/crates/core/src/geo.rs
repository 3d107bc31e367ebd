//! City → state → country hierarchy and the gold-user filtering rules.

use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use thiserror::Error;

use crate::corpus::LabelTriple;

#[derive(Debug, Error)]
pub enum GeoError {
    #[error("city {0:?} listed under conflicting parents")]
    ConflictingParent(String),
    #[error("row {0}: missing field")]
    MissingField(usize),
    #[error("hierarchy file is empty")]
    EmptyFile,
    #[error("unknown city {0:?}")]
    UnknownCity(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

/// Validated many-to-one maps city→state and state→country. Immutable
/// after load; names are compared after Unicode NFC-free exact match
/// (inputs are expected pre-normalized).
#[derive(Debug, Clone)]
pub struct LocationHierarchy {
    city_to_state: BTreeMap<String, String>,
    state_to_country: BTreeMap<String, String>,
}

impl LocationHierarchy {
    pub fn from_rows<I>(rows: I) -> Result<Self, GeoError>
    where
        I: IntoIterator<Item = (String, String, String)>,
    {
        let mut city_to_state = BTreeMap::new();
        let mut state_to_country = BTreeMap::new();
        let mut any = false;
        for (city, state, country) in rows {
            any = true;
            if let Some(prev) = city_to_state.insert(city.clone(), state.clone()) {
                if prev != state {
                    return Err(GeoError::ConflictingParent(city));
                }
            }
            if let Some(prev) = state_to_country.insert(state.clone(), country.clone()) {
                if prev != country {
                    return Err(GeoError::ConflictingParent(state));
                }
            }
        }
        if !any {
            return Err(GeoError::EmptyFile);
        }
        Ok(LocationHierarchy { city_to_state, state_to_country })
    }

    /// Load from a UTF-8 CSV with a header line and rows `city,state,country`.
    pub fn load(path: &Path) -> Result<Self, GeoError> {
        let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
        let mut rows = Vec::new();
        for (i, rec) in reader.records().enumerate() {
            let rec = rec?;
            let field = |j: usize| -> Result<String, GeoError> {
                rec.get(j)
                    .map(|s| s.trim().to_string())
                    .filter(|s| !s.is_empty())
                    .ok_or(GeoError::MissingField(i + 2))
            };
            rows.push((field(0)?, field(1)?, field(2)?));
        }
        Self::from_rows(rows)
    }

    pub fn n_cities(&self) -> usize {
        self.city_to_state.len()
    }

    pub fn n_states(&self) -> usize {
        self.state_to_country.len()
    }

    pub fn n_countries(&self) -> usize {
        self.state_to_country.values().collect::<BTreeSet<_>>().len()
    }

    pub fn cities(&self) -> Vec<String> {
        self.city_to_state.keys().cloned().collect()
    }

    pub fn states(&self) -> Vec<String> {
        self.state_to_country.keys().cloned().collect()
    }

    pub fn countries(&self) -> Vec<String> {
        self.state_to_country
            .values()
            .collect::<BTreeSet<_>>()
            .into_iter()
            .cloned()
            .collect()
    }

    pub fn state_of_city(&self, city: &str) -> Option<String> {
        self.city_to_state.get(city).cloned()
    }

    pub fn country_of_state(&self, state: &str) -> Option<String> {
        self.state_to_country.get(state).cloned()
    }

    /// Full label triple for a listed city.
    pub fn derive_labels(&self, city: &str) -> Result<LabelTriple, GeoError> {
        let state = self
            .city_to_state
            .get(city)
            .ok_or_else(|| GeoError::UnknownCity(city.to_string()))?;
        let country = self
            .state_to_country
            .get(state)
            .ok_or_else(|| GeoError::UnknownCity(city.to_string()))?;
        Ok(LabelTriple {
            city: city.to_string(),
            state: state.clone(),
            country: country.clone(),
        })
    }

    /// True iff the triple matches what the hierarchy derives for its city.
    pub fn validate(&self, labels: &LabelTriple) -> bool {
        self.derive_labels(&labels.city)
            .map(|d| d == *labels)
            .unwrap_or(false)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verification {
    True,
    False,
    Unknown,
}

/// One annotated user: assigned labels plus per-task verification flags.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UserRecord {
    pub user_id: String,
    pub labels: LabelTriple,
    pub country_verified: Verification,
    pub city_verified: Verification,
    pub tweet_count: usize,
}

/// Keep users with at least `min_user_tweets` tweets whose city has at
/// least `min_city_tweets` total tweets.
pub fn filter_gold_users(
    users: &[UserRecord],
    per_city_tweets: &BTreeMap<String, usize>,
    min_user_tweets: usize,
    min_city_tweets: usize,
) -> Vec<UserRecord> {
    users
        .iter()
        .filter(|u| {
            u.tweet_count >= min_user_tweets
                && per_city_tweets.get(&u.labels.city).copied().unwrap_or(0) >= min_city_tweets
        })
        .cloned()
        .collect()
}
