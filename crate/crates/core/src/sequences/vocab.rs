use std::collections::HashMap;

use crate::error::{Error, Result};

/// Top-K entity vocabulary. Indices `[0, num_oov)` are out-of-vocabulary
/// buckets (index 0 doubles as padding); kept ids occupy
/// `[num_oov, num_oov + len)` in frequency order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    entries: Vec<(String, u64)>,
    index_of: HashMap<String, usize>,
    k: usize,
    num_oov: usize,
}

/// Counts ids in `corpus` and keeps the `k` most frequent, ties broken by
/// ascending id.
pub fn build_vocab<'a, I>(corpus: I, k: usize, num_oov: usize) -> Result<Vocabulary>
where
    I: IntoIterator<Item = &'a str>,
{
    if k == 0 {
        return Err(Error::Config("vocabulary size K must be at least 1".into()));
    }
    let mut counts: HashMap<&str, u64> = HashMap::new();
    for id in corpus {
        *counts.entry(id).or_default() += 1;
    }
    let mut entries: Vec<(String, u64)> = counts
        .into_iter()
        .map(|(id, c)| (id.to_string(), c))
        .collect();
    entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    entries.truncate(k);
    Vocabulary::from_entries(entries, k, num_oov)
}

impl Vocabulary {
    /// Entries must already be in index order.
    pub fn from_entries(entries: Vec<(String, u64)>, k: usize, num_oov: usize) -> Result<Self> {
        if num_oov == 0 {
            return Err(Error::Config("num_oov must be at least 1".into()));
        }
        if entries.len() > k {
            return Err(Error::Config(format!(
                "{} vocabulary entries exceed K = {k}",
                entries.len()
            )));
        }
        let mut index_of = HashMap::with_capacity(entries.len());
        for (i, (id, _)) in entries.iter().enumerate() {
            if index_of.insert(id.clone(), num_oov + i).is_some() {
                return Err(Error::Config(format!("duplicate vocabulary id `{id}`")));
            }
        }
        Ok(Self {
            entries,
            index_of,
            k,
            num_oov,
        })
    }

    pub fn index(&self, id: &str) -> usize {
        match self.index_of.get(id) {
            Some(i) => *i,
            None => self.oov_index(id),
        }
    }

    pub fn contains(&self, id: &str) -> bool {
        self.index_of.contains_key(id)
    }

    fn oov_index(&self, id: &str) -> usize {
        if self.num_oov == 1 {
            return 0;
        }
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in id.as_bytes() {
            h ^= u64::from(*b);
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
        (h % self.num_oov as u64) as usize
    }

    /// Id stored at table row `index`, if it is not an OOV row.
    pub fn id_at(&self, index: usize) -> Option<&str> {
        index
            .checked_sub(self.num_oov)
            .and_then(|i| self.entries.get(i))
            .map(|(id, _)| id.as_str())
    }

    pub fn entries(&self) -> &[(String, u64)] {
        &self.entries
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn num_oov(&self) -> usize {
        self.num_oov
    }

    /// Number of kept ids.
    pub fn num_kept(&self) -> usize {
        self.entries.len()
    }

    /// Rows an embedding table over this vocabulary needs.
    pub fn table_rows(&self) -> usize {
        self.num_oov + self.entries.len()
    }

    /// The top-`k` prefix. Because entries are frequency ordered, its indices
    /// coincide with those of `self` for every kept id.
    pub fn truncated(&self, k: usize) -> Result<Vocabulary> {
        let entries = self.entries.iter().take(k).cloned().collect();
        Vocabulary::from_entries(entries, k, self.num_oov)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn corpus(counts: &[(&'static str, usize)]) -> Vec<&'static str> {
        counts
            .iter()
            .flat_map(|(id, n)| std::iter::repeat_n(*id, *n))
            .collect()
    }

    #[test]
    fn keeps_top_k_by_frequency() {
        let c = corpus(&[("c", 1), ("a", 5), ("b", 3)]);
        let v = build_vocab(c.iter().copied(), 2, 1).unwrap();
        assert_eq!(v.index("a"), 1);
        assert_eq!(v.index("b"), 2);
        assert_eq!(v.index("c"), 0);
        assert_eq!(v.table_rows(), 3);
    }

    #[test]
    fn large_k_keeps_everything() {
        let c = corpus(&[("x", 1), ("y", 2)]);
        let v = build_vocab(c.iter().copied(), 100, 1).unwrap();
        assert_eq!(v.num_kept(), 2);
    }

    #[test]
    fn ties_break_by_id() {
        let c = corpus(&[("b", 2), ("a", 2)]);
        let v = build_vocab(c.iter().copied(), 1, 1).unwrap();
        assert!(v.contains("a"));
        assert!(!v.contains("b"));
    }

    #[test]
    fn rejects_zero_k() {
        assert!(build_vocab(["a"], 0, 1).is_err());
    }

    #[test]
    fn multiple_oov_buckets_stay_in_range() {
        let v = build_vocab(["a", "a", "b"], 1, 3).unwrap();
        assert_eq!(v.index("a"), 3);
        for id in ["zz", "q", "b", "hello"] {
            assert!(v.index(id) < 3);
        }
    }

    #[test]
    fn truncation_is_a_prefix() {
        let c = corpus(&[("a", 9), ("b", 7), ("c", 5), ("d", 3)]);
        let big = build_vocab(c.iter().copied(), 4, 1).unwrap();
        let small = big.truncated(2).unwrap();
        for id in ["a", "b"] {
            assert_eq!(big.index(id), small.index(id));
        }
        assert_eq!(small.index("c"), 0);
    }
}
