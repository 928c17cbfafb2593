use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Maximum number of interactions kept per user after preprocessing.
pub const MAX_SEQUENCE_LEN: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ItemId(pub u64);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct UserId(pub u64);

impl fmt::Display for ItemId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl fmt::Display for UserId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Interaction {
    pub item: ItemId,
    pub timestamp: i64,
    pub rating: f64,
}

/// Per-user chronologically ordered interactions.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct InteractionLog {
    users: BTreeMap<UserId, Vec<Interaction>>,
}

impl InteractionLog {
    pub fn new() -> Self {
        Self::default()
    }

    /// Builds a log from raw per-user lists. Each list is stably sorted by timestamp.
    pub fn from_users(users: impl IntoIterator<Item = (UserId, Vec<Interaction>)>) -> Self {
        let mut log = Self::new();
        for (user, mut seq) in users {
            seq.sort_by_key(|x| x.timestamp);
            log.users.entry(user).or_default().extend(seq);
        }
        for seq in log.users.values_mut() {
            seq.sort_by_key(|x| x.timestamp);
        }
        log.users.retain(|_, s| !s.is_empty());
        log
    }

    /// Convenience constructor from plain item sequences; timestamps are positions.
    pub fn from_sequences(seqs: impl IntoIterator<Item = (UserId, Vec<ItemId>)>) -> Self {
        Self::from_users(seqs.into_iter().map(|(u, items)| {
            let seq = items
                .into_iter()
                .enumerate()
                .map(|(t, item)| Interaction { item, timestamp: t as i64, rating: 5.0 })
                .collect();
            (u, seq)
        }))
    }

    pub fn push(&mut self, user: UserId, interaction: Interaction) {
        let seq = self.users.entry(user).or_default();
        let pos = seq.partition_point(|x| x.timestamp <= interaction.timestamp);
        seq.insert(pos, interaction);
    }

    pub fn is_empty(&self) -> bool {
        self.users.is_empty()
    }

    pub fn num_users(&self) -> usize {
        self.users.len()
    }

    pub fn num_interactions(&self) -> usize {
        self.users.values().map(Vec::len).sum()
    }

    pub fn users(&self) -> impl Iterator<Item = (UserId, &[Interaction])> {
        self.users.iter().map(|(u, s)| (*u, s.as_slice()))
    }

    pub fn sequence(&self, user: UserId) -> Option<&[Interaction]> {
        self.users.get(&user).map(Vec::as_slice)
    }

    /// Item sequence of a user in chronological order.
    pub fn items_of(&self, user: UserId) -> Vec<ItemId> {
        self.sequence(user).map(|s| s.iter().map(|x| x.item).collect()).unwrap_or_default()
    }

    pub fn item_set(&self) -> BTreeSet<ItemId> {
        self.users.values().flatten().map(|x| x.item).collect()
    }

    /// Positive-feedback filter, minimum-length filter and truncation to the most
    /// recent [`MAX_SEQUENCE_LEN`] interactions.
    pub fn preprocess(&self, min_interactions: usize) -> Result<Self> {
        let mut users = BTreeMap::new();
        for (user, seq) in &self.users {
            let kept: Vec<Interaction> = seq.iter().copied().filter(|x| x.rating > 3.0).collect();
            if kept.is_empty() || kept.len() < min_interactions {
                continue;
            }
            let start = kept.len().saturating_sub(MAX_SEQUENCE_LEN);
            users.insert(*user, kept[start..].to_vec());
        }
        if users.is_empty() {
            return Err(Error::NoInteractions);
        }
        Ok(Self { users })
    }
}
