//! User action sequences: events, windowing, vocabularies, padding and the
//! synthetic impression generator.

mod batch;
mod io;
mod synth;
mod vocab;

use std::fmt;
use std::str::FromStr;

use crate::error::Error;

pub use batch::{pad_and_mask, PaddedBatch};
pub use io::{read_dataset, read_vocab, write_dataset, write_vocab};
pub use synth::{
    generate_clustered_sessions, generate_coclick_pairs, generate_impressions, generate_world,
    impression_keys, ImpressionConfig, Session, SyntheticWorld, WorldConfig, AIR_SCALAR_FEATURES,
    TEXT_DIM, VISUAL_DIM,
};
pub use vocab::{build_vocab, Vocabulary};

/// One hour, inclusive.
pub const DEFAULT_WINDOW_SECONDS: u64 = 3600;
pub const DEFAULT_MAX_LEN: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Action {
    View,
    Favorite,
    CartAdd,
    Purchase,
    Search,
}

impl Action {
    pub const ALL: [Action; 5] = [
        Action::View,
        Action::Favorite,
        Action::CartAdd,
        Action::Purchase,
        Action::Search,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Action::View => "view",
            Action::Favorite => "favorite",
            Action::CartAdd => "cart_add",
            Action::Purchase => "purchase",
            Action::Search => "search",
        }
    }
}

impl FromStr for Action {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        Action::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown action `{s}`")))
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum EntityKind {
    Listing,
    Shop,
    Taxonomy,
    Query,
}

impl EntityKind {
    pub const ALL: [EntityKind; 4] = [
        EntityKind::Listing,
        EntityKind::Shop,
        EntityKind::Taxonomy,
        EntityKind::Query,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            EntityKind::Listing => "listing",
            EntityKind::Shop => "shop",
            EntityKind::Taxonomy => "taxonomy",
            EntityKind::Query => "query",
        }
    }
}

impl FromStr for EntityKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        EntityKind::ALL
            .into_iter()
            .find(|e| e.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown entity kind `{s}`")))
    }
}

impl fmt::Display for EntityKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// An `(entity, action)` sequence type, written `entity:action`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SeqKey {
    pub entity: EntityKind,
    pub action: Action,
}

impl SeqKey {
    pub const fn new(entity: EntityKind, action: Action) -> Self {
        Self { entity, action }
    }
}

impl fmt::Display for SeqKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.entity, self.action)
    }
}

impl FromStr for SeqKey {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        let (e, a) = s
            .split_once(':')
            .ok_or_else(|| Error::Config(format!("sequence key `{s}` is not entity:action")))?;
        Ok(SeqKey::new(e.parse()?, a.parse()?))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActionEvent {
    pub action: Action,
    pub entity_kind: EntityKind,
    pub entity_id: String,
    pub timestamp: u64,
}

impl ActionEvent {
    pub fn key(&self) -> SeqKey {
        SeqKey::new(self.entity_kind, self.action)
    }
}

/// Events in reverse chronological order, bounded in count and time span.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActionSequence {
    events: Vec<ActionEvent>,
    max_len: usize,
    window_seconds: u64,
}

impl ActionSequence {
    pub fn events(&self) -> &[ActionEvent] {
        &self.events
    }

    pub fn into_events(self) -> Vec<ActionEvent> {
        self.events
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn window_seconds(&self) -> u64 {
        self.window_seconds
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }
}

/// Keeps events within `window_seconds` of the most recent one (inclusive),
/// then the `max_len` most recent of those. `events` must be in reverse
/// chronological order.
pub fn truncate_window(
    events: &[ActionEvent],
    window_seconds: u64,
    max_len: usize,
) -> ActionSequence {
    let kept = match events.first() {
        None => Vec::new(),
        Some(head) => events
            .iter()
            .take_while(|e| head.timestamp.saturating_sub(e.timestamp) <= window_seconds)
            .take(max_len)
            .cloned()
            .collect(),
    };
    ActionSequence {
        events: kept,
        max_len,
        window_seconds,
    }
}

/// A listing, shop, taxonomy or query id with its event time.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TimedEntity {
    pub id: String,
    pub timestamp: u64,
}

/// One impression: who saw what, the outcome, and the user's recent
/// sequences (most recent first), aligned with [`Dataset::keys`].
#[derive(Debug, Clone, PartialEq)]
pub struct Impression {
    pub user_id: String,
    pub candidate_id: String,
    pub click: bool,
    pub purchase: bool,
    pub sequences: Vec<Vec<TimedEntity>>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub keys: Vec<SeqKey>,
    pub rows: Vec<Impression>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn key_index(&self, key: SeqKey) -> Option<usize> {
        self.keys.iter().position(|k| *k == key)
    }

    /// Ids of sequence `key` for `row`, most recent first (empty when the
    /// dataset has no such sequence type).
    pub fn sequence_ids(&self, row: usize, key: SeqKey) -> Vec<&str> {
        match self.key_index(key) {
            Some(k) => self.rows[row].sequences[k]
                .iter()
                .map(|e| e.id.as_str())
                .collect(),
            None => Vec::new(),
        }
    }

    pub fn subset(&self, rows: &[usize]) -> Dataset {
        Dataset {
            keys: self.keys.clone(),
            rows: rows.iter().map(|&i| self.rows[i].clone()).collect(),
        }
    }

    pub fn click_rate(&self) -> f64 {
        self.rows.iter().filter(|r| r.click).count() as f64 / self.rows.len().max(1) as f64
    }

    /// Chronological listing sessions (all listing actions of a row, merged),
    /// for skip-gram training.
    pub fn listing_sessions(&self) -> Vec<Session> {
        self.rows
            .iter()
            .map(|r| {
                let mut events: Vec<(&TimedEntity, Action)> = self
                    .keys
                    .iter()
                    .zip(&r.sequences)
                    .filter(|(k, _)| k.entity == EntityKind::Listing)
                    .flat_map(|(k, s)| s.iter().map(move |e| (e, k.action)))
                    .collect();
                events.sort_by(|a, b| a.0.timestamp.cmp(&b.0.timestamp).then(a.0.id.cmp(&b.0.id)));
                Session {
                    has_purchase: events.iter().any(|(_, a)| *a == Action::Purchase),
                    listings: events.into_iter().map(|(e, _)| e.id.clone()).collect(),
                }
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(ts: u64) -> ActionEvent {
        ActionEvent {
            action: Action::View,
            entity_kind: EntityKind::Listing,
            entity_id: format!("l{ts}"),
            timestamp: ts,
        }
    }

    #[test]
    fn window_boundary_is_inclusive() {
        let s = truncate_window(&[ev(3700), ev(100)], 3600, 50);
        assert_eq!(s.len(), 2);
        let s = truncate_window(&[ev(3700), ev(99)], 3600, 50);
        assert_eq!(s.len(), 1);
        assert_eq!(s.events()[0].timestamp, 3700);
    }

    #[test]
    fn caps_at_max_len() {
        let events: Vec<_> = (0..60).map(|_| ev(0)).collect();
        assert_eq!(truncate_window(&events, 3600, DEFAULT_MAX_LEN).len(), 50);
        assert!(truncate_window(&[], 3600, 50).is_empty());
    }

    #[test]
    fn keys_round_trip_through_text() {
        let k: SeqKey = "shop:cart_add".parse().unwrap();
        assert_eq!(k, SeqKey::new(EntityKind::Shop, Action::CartAdd));
        assert_eq!(k.to_string(), "shop:cart_add");
        assert!("shop".parse::<SeqKey>().is_err());
        assert!("shop:teleport".parse::<SeqKey>().is_err());
    }
}
