//! Interaction logs, item vocabulary, calendar context and example construction.

mod calendar;
mod examples;
pub mod synthetic;
mod vocab;

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use serde::Deserialize;
use serde_json::Value;

pub use calendar::{decompose_timestamp, CalendarFields, ContextMode, Standardizer};
pub use examples::{
    all_negatives, make_eval_example, make_training_example, sample_negatives, EvalMode, FixedLengthExample,
    NegativeMode,
};
pub use vocab::ItemVocabulary;

use crate::error::{Error, Result};

/// One raw interaction line.
#[derive(Debug, Clone, PartialEq)]
pub struct InteractionRecord {
    pub user: String,
    pub item: String,
    pub timestamp: i64,
    pub attributes: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Event {
    pub item: usize,
    pub timestamp: i64,
    pub calendar: CalendarFields,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UserSequence {
    pub user_index: usize,
    pub key: String,
    /// Chronological; equal timestamps keep input order.
    pub events: Vec<Event>,
}

/// Positions of the held-out validation and test events in a user's sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
pub struct Split {
    pub validation: usize,
    pub test: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DatasetStats {
    pub users: usize,
    pub items: usize,
    pub interactions: usize,
    pub average_length: f64,
    /// Users too short for validation and test targets.
    pub excluded_users: usize,
}

#[derive(Debug, Clone)]
pub struct DatasetOptions {
    /// Number of most frequent items given their own lookup row.
    pub frequent_items: usize,
    pub context: ContextMode,
}

impl Default for DatasetOptions {
    fn default() -> Self {
        DatasetOptions {
            frequent_items: 5000,
            context: ContextMode::Ymd,
        }
    }
}

/// Input files of a dataset.
#[derive(Debug, Clone, Default)]
pub struct DataPaths {
    pub interactions: PathBuf,
    pub item_attributes: Option<PathBuf>,
    pub split_manifest: Option<PathBuf>,
}

/// An immutable, fully indexed dataset.
#[derive(Debug, Clone)]
pub struct Dataset {
    users: Vec<UserSequence>,
    vocab: ItemVocabulary,
    attributes: Vec<f64>,
    attr_width: usize,
    context: ContextMode,
    standardizer: Standardizer,
    splits: Vec<Option<Split>>,
    item_sets: Vec<Vec<usize>>,
}

fn key_string(v: &Value) -> Option<String> {
    match v {
        Value::String(s) => Some(s.clone()),
        Value::Number(n) => Some(n.to_string()),
        _ => None,
    }
}

fn float_list(v: &Value) -> Option<Vec<f64>> {
    v.as_array()?.iter().map(Value::as_f64).collect()
}

fn parse_error(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

fn json_lines(path: &Path) -> Result<Vec<(usize, serde_json::Map<String, Value>)>> {
    let file = File::open(path).map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<Value>(&line) {
            Ok(Value::Object(map)) => out.push((i + 1, map)),
            Ok(_) => return Err(parse_error(path, i + 1, "expected a JSON object")),
            Err(e) => return Err(parse_error(path, i + 1, e.to_string())),
        }
    }
    Ok(out)
}

/// Reads interaction lines `{user, item, ts, attrs?}`.
pub fn read_interactions(path: &Path) -> Result<Vec<InteractionRecord>> {
    json_lines(path)?
        .into_iter()
        .map(|(line, obj)| {
            let field = |name: &str| obj.get(name).ok_or_else(|| parse_error(path, line, format!("missing field '{name}'")));
            let user = key_string(field("user")?).ok_or_else(|| parse_error(path, line, "'user' must be a string or number"))?;
            let item = key_string(field("item")?).ok_or_else(|| parse_error(path, line, "'item' must be a string or number"))?;
            let timestamp = field("ts")?
                .as_i64()
                .ok_or_else(|| parse_error(path, line, "'ts' must be an integer"))?;
            if timestamp < 0 {
                return Err(parse_error(path, line, format!("negative timestamp {timestamp}")));
            }
            let attributes = match obj.get("attrs") {
                None | Some(Value::Null) => None,
                Some(v) => Some(float_list(v).ok_or_else(|| parse_error(path, line, "'attrs' must be a list of numbers"))?),
            };
            Ok(InteractionRecord {
                user,
                item,
                timestamp,
                attributes,
            })
        })
        .collect()
}

/// Reads item attribute lines `{item, attrs}`.
pub fn read_item_attributes(path: &Path) -> Result<HashMap<String, Vec<f64>>> {
    let mut out = HashMap::new();
    for (line, obj) in json_lines(path)? {
        let item = obj
            .get("item")
            .and_then(key_string)
            .ok_or_else(|| parse_error(path, line, "missing or invalid 'item'"))?;
        let attrs = obj
            .get("attrs")
            .and_then(float_list)
            .ok_or_else(|| parse_error(path, line, "missing or invalid 'attrs'"))?;
        out.insert(item, attrs);
    }
    Ok(out)
}

/// Reads a split manifest `{"<user>": {"validation": i, "test": j}, ...}`.
pub fn read_split_manifest(path: &Path) -> Result<HashMap<String, Split>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    serde_json::from_str(&text).map_err(|e| parse_error(path, e.line(), e.to_string()))
}

/// Loads interactions plus the optional attribute file and split manifest.
pub fn load_dataset(paths: &DataPaths, options: &DatasetOptions) -> Result<Dataset> {
    let records = read_interactions(&paths.interactions)?;
    let item_attributes = paths.item_attributes.as_deref().map(read_item_attributes).transpose()?;
    let splits = paths.split_manifest.as_deref().map(read_split_manifest).transpose()?.unwrap_or_default();
    let ds = Dataset::from_records(records, item_attributes.as_ref(), &splits, options)?;
    let s = ds.stats();
    log::info!(
        "loaded {}: {} users, {} items, {} interactions, mean length {:.2}, {} users too short to evaluate",
        paths.interactions.display(),
        s.users,
        s.items,
        s.interactions,
        s.average_length,
        s.excluded_users
    );
    Ok(ds)
}

impl Dataset {
    /// Indexes raw records. Users and items receive dense indices in order of
    /// first appearance. Attributes come from `item_attributes` when given,
    /// otherwise from the first record of each item.
    pub fn from_records(
        records: Vec<InteractionRecord>,
        item_attributes: Option<&HashMap<String, Vec<f64>>>,
        splits: &HashMap<String, Split>,
        options: &DatasetOptions,
    ) -> Result<Dataset> {
        let mut user_index: HashMap<String, usize> = HashMap::new();
        let mut item_index: HashMap<String, usize> = HashMap::new();
        let mut users: Vec<UserSequence> = Vec::new();
        let mut item_keys: Vec<String> = Vec::new();
        let mut item_attrs: Vec<Option<Vec<f64>>> = Vec::new();
        let mut counts: Vec<u64> = Vec::new();
        let mut width: Option<usize> = None;
        let mut check_width = |len: usize, what: &str| -> Result<()> {
            match width {
                None => {
                    width = Some(len);
                    Ok(())
                }
                Some(w) if w == len => Ok(()),
                Some(w) => Err(Error::Schema(format!("{what} has {len} attributes, expected {w}"))),
            }
        };

        for (n, rec) in records.into_iter().enumerate() {
            let calendar = decompose_timestamp(rec.timestamp)?;
            if let Some(a) = &rec.attributes {
                check_width(a.len(), &format!("record {}", n + 1))?;
            }
            let item = *item_index.entry(rec.item.clone()).or_insert_with(|| {
                item_keys.push(rec.item.clone());
                item_attrs.push(None);
                counts.push(0);
                item_keys.len() - 1
            });
            counts[item] += 1;
            if item_attrs[item].is_none() {
                item_attrs[item] = rec.attributes.clone();
            }
            let u = *user_index.entry(rec.user.clone()).or_insert_with(|| {
                users.push(UserSequence {
                    user_index: users.len(),
                    key: rec.user.clone(),
                    events: Vec::new(),
                });
                users.len() - 1
            });
            users[u].events.push(Event {
                item,
                timestamp: rec.timestamp,
                calendar,
            });
        }

        if let Some(table) = item_attributes {
            let mut keys: Vec<&String> = table.keys().collect();
            keys.sort();
            for k in keys {
                check_width(table[k].len(), &format!("item '{k}' in the attribute file"))?;
            }
            for (i, key) in item_keys.iter().enumerate() {
                let attrs = table
                    .get(key)
                    .ok_or_else(|| Error::Schema(format!("item '{key}' missing from the attribute file")))?;
                item_attrs[i] = Some(attrs.clone());
            }
        }
        let attr_width = width.unwrap_or(0);
        let mut attributes = Vec::with_capacity(item_keys.len() * attr_width);
        for (i, a) in item_attrs.into_iter().enumerate() {
            match a {
                Some(a) => attributes.extend(a),
                None if attr_width == 0 => {}
                None => return Err(Error::Schema(format!("item '{}' has no attributes", item_keys[i]))),
            }
        }

        for u in &mut users {
            u.events.sort_by_key(|e| e.timestamp);
        }

        let mut split_of = Vec::with_capacity(users.len());
        for u in &users {
            let n = u.events.len();
            let split = match splits.get(&u.key) {
                Some(s) => {
                    if !(1 <= s.validation && s.validation < s.test && s.test < n) {
                        return Err(Error::Schema(format!(
                            "split for user '{}' (validation {}, test {}) invalid for {} events",
                            u.key, s.validation, s.test, n
                        )));
                    }
                    Some(*s)
                }
                None if n >= 3 => Some(Split {
                    validation: n - 2,
                    test: n - 1,
                }),
                None => None,
            };
            split_of.push(split);
        }

        let vocab = ItemVocabulary::new(item_keys, counts, options.frequent_items);
        let item_sets = users
            .iter()
            .map(|u| {
                let mut s: Vec<usize> = u.events.iter().map(|e| e.item).collect();
                s.sort_unstable();
                s.dedup();
                s
            })
            .collect();

        let mut ds = Dataset {
            users,
            vocab,
            attributes,
            attr_width,
            context: options.context,
            standardizer: Standardizer {
                mean: vec![0.0; options.context.width()],
                std: vec![1.0; options.context.width()],
            },
            splits: split_of,
            item_sets,
        };
        let raw: Vec<Vec<f64>> = ds
            .users
            .iter()
            .enumerate()
            .flat_map(|(u, seq)| seq.events[..ds.training_len(u)].iter())
            .map(|e| options.context.components(&e.calendar))
            .collect();
        ds.standardizer = Standardizer::fit(options.context.width(), raw.iter().map(Vec::as_slice));
        Ok(ds)
    }

    pub fn users(&self) -> &[UserSequence] {
        &self.users
    }

    pub fn user(&self, u: usize) -> &UserSequence {
        &self.users[u]
    }

    pub fn vocab(&self) -> &ItemVocabulary {
        &self.vocab
    }

    pub fn num_items(&self) -> usize {
        self.vocab.len()
    }

    pub fn attr_width(&self) -> usize {
        self.attr_width
    }

    pub fn context_mode(&self) -> ContextMode {
        self.context
    }

    pub fn context_width(&self) -> usize {
        self.context.width()
    }

    pub fn standardizer(&self) -> &Standardizer {
        &self.standardizer
    }

    pub fn attributes_of(&self, item: usize) -> &[f64] {
        &self.attributes[item * self.attr_width..(item + 1) * self.attr_width]
    }

    /// Standardized context vector of an event.
    pub fn context_of(&self, event: &Event) -> Vec<f64> {
        self.standardizer.apply(&self.context.components(&event.calendar))
    }

    /// Held-out positions, or `None` when the user is too short to evaluate.
    pub fn split(&self, u: usize) -> Option<Split> {
        self.splits[u]
    }

    /// Number of leading events available for training.
    pub fn training_len(&self, u: usize) -> usize {
        match self.splits[u] {
            Some(s) => s.validation,
            None => self.users[u].events.len(),
        }
    }

    /// Sorted distinct items the user interacted with.
    pub fn item_set(&self, u: usize) -> &[usize] {
        &self.item_sets[u]
    }

    pub fn evaluable_users(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.users.len()).filter(|&u| self.splits[u].is_some())
    }

    pub fn stats(&self) -> DatasetStats {
        let interactions: usize = self.users.iter().map(|u| u.events.len()).sum();
        DatasetStats {
            users: self.users.len(),
            items: self.vocab.len(),
            interactions,
            average_length: if self.users.is_empty() {
                0.0
            } else {
                interactions as f64 / self.users.len() as f64
            },
            excluded_users: self.splits.iter().filter(|s| s.is_none()).count(),
        }
    }

    /// Same data with a different frequent-item cutoff.
    pub fn with_frequent_items(&self, frequent_items: usize) -> Dataset {
        let mut ds = self.clone();
        ds.vocab = self.vocab.with_frequent_count(frequent_items);
        ds
    }
}
