//! Item vocabulary with frequent-item ID truncation.

use std::collections::HashMap;

/// Dense item indices plus the mapping from dense index to lookup-table row.
///
/// The `F_eff = min(F, items)` most frequent items own rows `1..=F_eff`; every
/// other item shares the generic row 0. Row `F_eff + 1` is reserved for padding.
#[derive(Debug, Clone, PartialEq)]
pub struct ItemVocabulary {
    keys: Vec<String>,
    index: HashMap<String, usize>,
    counts: Vec<u64>,
    rows: Vec<usize>,
    frequent: usize,
}

impl ItemVocabulary {
    /// `keys[i]` is the key of dense item `i` and `counts[i]` its interaction count.
    pub fn new(keys: Vec<String>, counts: Vec<u64>, frequent_count: usize) -> Self {
        assert_eq!(keys.len(), counts.len(), "one count per item key");
        let mut order: Vec<usize> = (0..keys.len()).collect();
        order.sort_by(|&a, &b| counts[b].cmp(&counts[a]).then_with(|| keys[a].cmp(&keys[b])));
        let frequent = frequent_count.min(keys.len());
        let mut rows = vec![0; keys.len()];
        for (rank, &item) in order.iter().take(frequent).enumerate() {
            rows[item] = rank + 1;
        }
        let index = keys.iter().enumerate().map(|(i, k)| (k.clone(), i)).collect();
        ItemVocabulary {
            keys,
            index,
            counts,
            rows,
            frequent,
        }
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn dense_of(&self, key: &str) -> Option<usize> {
        self.index.get(key).copied()
    }

    pub fn key_of(&self, dense: usize) -> &str {
        &self.keys[dense]
    }

    pub fn count_of(&self, dense: usize) -> u64 {
        self.counts[dense]
    }

    /// Lookup-table row of a dense item.
    pub fn row_of(&self, dense: usize) -> usize {
        self.rows[dense]
    }

    /// Number of items with a dedicated row.
    pub fn frequent_items(&self) -> usize {
        self.frequent
    }

    pub fn pad_row(&self) -> usize {
        self.frequent + 1
    }

    /// Rows in the lookup table: generic, frequent items, padding.
    pub fn table_rows(&self) -> usize {
        self.frequent + 2
    }

    /// Rebuilds the row mapping with a different cutoff.
    pub fn with_frequent_count(&self, frequent_count: usize) -> Self {
        ItemVocabulary::new(self.keys.clone(), self.counts.clone(), frequent_count)
    }
}
