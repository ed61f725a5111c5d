#![allow(dead_code)]

use std::collections::HashMap;

use convrec::dataset::{Dataset, DatasetOptions, InteractionRecord};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rec(user: &str, item: &str, ts: i64, attrs: &[f64]) -> InteractionRecord {
    InteractionRecord {
        user: user.into(),
        item: item.into(),
        timestamp: ts,
        attributes: Some(attrs.to_vec()),
    }
}

pub fn dataset(records: Vec<InteractionRecord>) -> Dataset {
    Dataset::from_records(records, None, &HashMap::new(), &DatasetOptions::default()).unwrap()
}

pub fn dataset_with(records: Vec<InteractionRecord>, frequent_items: usize) -> Dataset {
    let opts = DatasetOptions {
        frequent_items,
        ..DatasetOptions::default()
    };
    Dataset::from_records(records, None, &HashMap::new(), &opts).unwrap()
}

/// One user per entry, items named by the given strings, one day apart.
pub fn sequences(users: &[&[&str]]) -> Dataset {
    let mut records = Vec::new();
    for (u, items) in users.iter().enumerate() {
        for (t, item) in items.iter().enumerate() {
            records.push(rec(&format!("u{u}"), item, 1_600_000_000 + 86_400 * t as i64, &[t as f64, 1.0]));
        }
    }
    dataset(records)
}

/// Lengths and right paddings found by enumerating window placements: for each
/// layer the smallest pad whose strided windows end exactly at the padded end.
pub fn brute_force_plan(len: usize, layers: &[(usize, usize)]) -> (Vec<usize>, Vec<usize>) {
    let mut cur = len;
    let (mut lengths, mut pads) = (Vec::new(), Vec::new());
    for &(k, s) in layers {
        let pad = (0..)
            .find(|&p| {
                let total = cur + p;
                let mut start = 0;
                let mut last_end = None;
                while start + k <= total {
                    last_end = Some(start + k);
                    start += s;
                }
                last_end == Some(total)
            })
            .unwrap();
        let mut count = 0;
        let mut start = 0;
        while start + k <= cur + pad {
            count += 1;
            start += s;
        }
        pads.push(pad);
        lengths.push(count);
        cur = count;
    }
    (lengths, pads)
}

/// Kernel schedules compared by the schedule sweep.
pub const KERNEL_SCHEDULES: [&str; 8] = [
    "{ (2, 2), (5, 5), (7, 7) }",
    "{ (3, 3), (5, 5), (5, 5) }",
    "{ (5, 5), (2, 2), (7, 7) }",
    "{ (7, 7), (5, 5), (2, 2) }",
    "{ (10, 10), (7, 7) }",
    "{ (2, 1), (5, 5), (7, 7) }",
    "{ (2, 1), (5, 2), (7, 3) }",
    "{ (3, 1), (3, 1), (3, 1) }",
];

/// Rank of candidate 0 after a descending sort that places the positive last
/// among equal scores.
pub fn sort_rank(scores: &[f64]) -> usize {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then((a == 0).cmp(&(b == 0))));
    order.iter().position(|&i| i == 0).unwrap() + 1
}

/// HR@k and NDCG@k recomputed from raw score rows.
pub fn oracle_metrics(rows: &[Vec<f64>], k: usize) -> (f64, f64) {
    let mut hits = 0usize;
    let mut gain = 0.0;
    for row in rows {
        let r = sort_rank(row);
        if r <= k {
            hits += 1;
            gain += 1.0 / ((r + 1) as f64).log2();
        }
    }
    (hits as f64 / rows.len() as f64, gain / rows.len() as f64)
}

/// Scores candidates from a fixed per-user matrix row.
pub struct MatrixScorer(pub Vec<Vec<f64>>);

impl convrec::evaluator::Scorer for MatrixScorer {
    fn score(&self, _: &Dataset, ex: &convrec::dataset::FixedLengthExample) -> convrec::Result<Vec<f64>> {
        Ok(self.0[ex.user][..1 + ex.negatives.len()].to_vec())
    }
}

/// Deterministic pseudo-random scores keyed by user and candidate item.
pub struct HashScorer(pub u64);

impl convrec::evaluator::Scorer for HashScorer {
    fn score(&self, _: &Dataset, ex: &convrec::dataset::FixedLengthExample) -> convrec::Result<Vec<f64>> {
        use rand::Rng;
        let mut r = rng(self.0 ^ (ex.user as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        Ok(ex.candidates().iter().map(|_| r.gen::<f64>()).collect())
    }
}

/// Scores the true target 1 and everything else 0.
pub struct OracleScorer;

impl convrec::evaluator::Scorer for OracleScorer {
    fn score(&self, _: &Dataset, ex: &convrec::dataset::FixedLengthExample) -> convrec::Result<Vec<f64>> {
        Ok(ex.candidates().iter().map(|&c| f64::from(c == ex.target)).collect())
    }
}

/// `users` users with 6 to 10 events over a 400-item catalogue.
pub fn eval_dataset(users: usize, seed: u64) -> Dataset {
    dataset(convrec::dataset::synthetic::random(users, 400, 6, 10, 2, seed))
}
