//! Small generated datasets for tests, demos and smoke runs.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;

use super::InteractionRecord;
use crate::error::{Error, Result};
use crate::rng::{self, Stream};

const DAY: i64 = 86_400;
/// 2020-01-01T00:00:00Z.
const START: i64 = 1_577_836_800;

fn item_attributes(items: usize, width: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = rng::stream(seed, Stream::Synthetic, u64::MAX);
    (0..items)
        .map(|_| (0..width).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect()
}

/// Every user walks the item ring `i → (i + 1) mod items` from a user-specific
/// start, one interaction per day.
pub fn successor(users: usize, items: usize, length: usize, attr_width: usize, seed: u64) -> Vec<InteractionRecord> {
    let attrs = item_attributes(items, attr_width, seed);
    let mut rng = rng::stream(seed, Stream::Synthetic, 0);
    let mut out = Vec::with_capacity(users * length);
    for u in 0..users {
        let start = rng.gen_range(0..items);
        for t in 0..length {
            let item = (start + t) % items;
            out.push(InteractionRecord {
                user: format!("u{u}"),
                item: format!("i{item}"),
                timestamp: START + (t as i64) * DAY,
                attributes: Some(attrs[item].clone()),
            });
        }
    }
    out
}

/// Offsets of the day component of an interval that [`interval_coded`] uses.
pub const DAY_OFFSET_RANGE: std::ops::RangeInclusive<i64> = -27..=27;

/// Users interact once per calendar month on a random day of that month. The
/// item of each event is determined solely by the day component of the
/// preceding interval (`day_{k-1} − day_{k-2}`, zero for the second event),
/// through a fixed random mapping of day offsets to items. The first event of
/// every user is a uniformly random item from the same catalog.
pub fn interval_coded(users: usize, length: usize, attr_width: usize, seed: u64) -> Vec<InteractionRecord> {
    let classes: Vec<i64> = DAY_OFFSET_RANGE.collect();
    let mut order: Vec<usize> = (0..classes.len()).collect();
    order.shuffle(&mut rng::stream(seed, Stream::Synthetic, 1));
    let item_of = |offset: i64| order[(offset - DAY_OFFSET_RANGE.start()) as usize];
    let attrs = item_attributes(classes.len(), attr_width, seed);
    let mut rng = rng::stream(seed, Stream::Synthetic, 2);
    let length = length.min(12);
    let mut out = Vec::with_capacity(users * length);
    for u in 0..users {
        let year = rng.gen_range(2010..2020);
        let days: Vec<u32> = (0..length).map(|_| rng.gen_range(1..=28)).collect();
        for k in 0..length {
            let item = match k {
                0 => rng.gen_range(0..classes.len()),
                1 => item_of(0),
                _ => item_of(days[k - 1] as i64 - days[k - 2] as i64),
            };
            let date = chrono::NaiveDate::from_ymd_opt(year, k as u32 + 1, days[k]).expect("valid day");
            let ts = date.and_hms_opt(12, 0, 0).expect("valid time").and_utc().timestamp();
            out.push(InteractionRecord {
                user: format!("u{u}"),
                item: format!("i{item}"),
                timestamp: ts,
                attributes: Some(attrs[item].clone()),
            });
        }
    }
    out
}

/// Users with random lengths in `min_len..=max_len` drawing items with a
/// popularity skew, for demos and benchmarks.
pub fn random(users: usize, items: usize, min_len: usize, max_len: usize, attr_width: usize, seed: u64) -> Vec<InteractionRecord> {
    let attrs = item_attributes(items, attr_width, seed);
    let mut rng = rng::stream(seed, Stream::Synthetic, 3);
    let mut out = Vec::new();
    for u in 0..users {
        let len = rng.gen_range(min_len..=max_len);
        let mut ts = START + rng.gen_range(0..365) * DAY;
        let mut cur = rng.gen_range(0..items);
        for _ in 0..len {
            ts += rng.gen_range(1..=30) * DAY + rng.gen_range(0..DAY);
            // Mostly move to a nearby item, sometimes jump to a popular one.
            cur = if rng.gen_bool(0.2) {
                let r: f64 = rng.gen();
                ((r * r) * items as f64) as usize
            } else {
                (cur + rng.gen_range(1..=3)) % items
            };
            out.push(InteractionRecord {
                user: format!("u{u}"),
                item: format!("i{cur}"),
                timestamp: ts,
                attributes: Some(attrs[cur].clone()),
            });
        }
    }
    out
}

/// Writes records in the JSON-lines interaction format.
pub fn write_jsonl(records: &[InteractionRecord], path: &Path) -> Result<()> {
    let mut out = Vec::new();
    for r in records {
        let mut obj = serde_json::json!({ "user": r.user, "item": r.item, "ts": r.timestamp });
        if let Some(a) = &r.attributes {
            obj["attrs"] = serde_json::json!(a);
        }
        writeln!(out, "{obj}").expect("writing to memory");
    }
    std::fs::write(path, out).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}
