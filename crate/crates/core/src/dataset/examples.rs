//! Fixed-length training and evaluation examples with negative candidates.

use rand::seq::index;
use rand::Rng;

use super::{Dataset, Event};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// How negatives are chosen for an example.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NegativeMode {
    /// `N` items drawn uniformly without replacement from outside the user's items.
    Sampled(usize),
    /// Every item the user never interacted with.
    AllItems,
}

impl NegativeMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "all_items" => Ok(NegativeMode::AllItems),
            _ => s
                .strip_prefix("sampled:")
                .and_then(|n| n.parse().ok())
                .filter(|&n: &usize| n >= 1)
                .map(NegativeMode::Sampled)
                .ok_or_else(|| Error::Config(format!("protocol must be 'sampled:<N>' or 'all_items', got '{s}'"))),
        }
    }
}

impl std::fmt::Display for NegativeMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            NegativeMode::Sampled(n) => write!(f, "sampled:{n}"),
            NegativeMode::AllItems => f.write_str("all_items"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalMode {
    Validation,
    Test,
}

/// A left-padded input window of length `L` plus the scored candidates.
///
/// Candidate 0 is the positive target, the rest are negatives. Every
/// candidate carries the context of the target event.
#[derive(Debug, Clone)]
pub struct FixedLengthExample {
    pub user: usize,
    /// Position of the target within the user's sequence.
    pub target_position: usize,
    /// Dense item per position, `None` for padding.
    pub input_items: Vec<Option<usize>>,
    /// Lookup-table row per position, the padding row for padding.
    pub input_rows: Vec<usize>,
    /// `L × |A|`, zero rows for padding.
    pub input_attributes: Tensor,
    /// `L × |C|` standardized context, zero rows for padding.
    pub input_contexts: Tensor,
    /// Raw `(year, month, day)` per position, zero for padding.
    pub input_calendar: Vec<[f64; 3]>,
    /// `true` at padded positions.
    pub padding_mask: Vec<bool>,
    pub target: usize,
    pub negatives: Vec<usize>,
    /// Standardized context shared by all candidates.
    pub candidate_context: Vec<f64>,
}

impl FixedLengthExample {
    pub fn len(&self) -> usize {
        self.input_items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.input_items.is_empty()
    }

    pub fn real_len(&self) -> usize {
        self.padding_mask.iter().filter(|p| !**p).count()
    }

    /// Positive first, then negatives.
    pub fn candidates(&self) -> Vec<usize> {
        let mut c = Vec::with_capacity(1 + self.negatives.len());
        c.push(self.target);
        c.extend(&self.negatives);
        c
    }
}

fn build(
    ds: &Dataset,
    user: usize,
    target_position: usize,
    seq_len: usize,
    negatives: Vec<usize>,
) -> FixedLengthExample {
    let events: &[Event] = &ds.user(user).events;
    let start = target_position.saturating_sub(seq_len);
    let window = &events[start..target_position];
    let pad = seq_len - window.len();
    let (aw, cw) = (ds.attr_width(), ds.context_width());
    let mut attrs = vec![0.0; seq_len * aw];
    let mut ctx = vec![0.0; seq_len * cw];
    let mut input_items = vec![None; seq_len];
    let mut input_rows = vec![ds.vocab().pad_row(); seq_len];
    let mut input_calendar = vec![[0.0; 3]; seq_len];
    let mut padding_mask = vec![true; seq_len];
    for (i, e) in window.iter().enumerate() {
        let p = pad + i;
        input_items[p] = Some(e.item);
        input_rows[p] = ds.vocab().row_of(e.item);
        attrs[p * aw..(p + 1) * aw].copy_from_slice(ds.attributes_of(e.item));
        ctx[p * cw..(p + 1) * cw].copy_from_slice(&ds.context_of(e));
        input_calendar[p] = e.calendar.ymd();
        padding_mask[p] = false;
    }
    let target_event = &events[target_position];
    FixedLengthExample {
        user,
        target_position,
        input_items,
        input_rows,
        input_attributes: Tensor::new(vec![seq_len, aw], attrs).expect("sized above"),
        input_contexts: Tensor::new(vec![seq_len, cw], ctx).expect("sized above"),
        input_calendar,
        padding_mask,
        target: target_event.item,
        negatives,
        candidate_context: ds.context_of(target_event),
    }
}

fn contains(sorted: &[usize], item: usize) -> bool {
    sorted.binary_search(&item).is_ok()
}

/// Every item outside the user's set, ascending.
pub fn all_negatives(ds: &Dataset, user: usize) -> Vec<usize> {
    let own = ds.item_set(user);
    (0..ds.num_items()).filter(|&i| !contains(own, i)).collect()
}

/// Up to `n` distinct items outside the user's set. When fewer than `n`
/// exist, all of them are returned.
pub fn sample_negatives<R: Rng + ?Sized>(ds: &Dataset, user: usize, n: usize, rng: &mut R) -> Vec<usize> {
    let own = ds.item_set(user);
    let pool_size = ds.num_items() - own.len();
    if n >= pool_size {
        return all_negatives(ds, user);
    }
    if 4 * n > pool_size {
        let pool = all_negatives(ds, user);
        return index::sample(rng, pool.len(), n).into_iter().map(|i| pool[i]).collect();
    }
    let mut chosen = Vec::with_capacity(n);
    while chosen.len() < n {
        let candidate = rng.gen_range(0..ds.num_items());
        if !contains(own, candidate) && !chosen.contains(&candidate) {
            chosen.push(candidate);
        }
    }
    chosen
}

/// A random subsequence example from the user's training region: the target
/// position is uniform over all positions with at least one earlier event, and
/// the input holds up to `seq_len` events before it. `None` when the training
/// region has fewer than two events.
pub fn make_training_example<R: Rng + ?Sized>(
    ds: &Dataset,
    user: usize,
    seq_len: usize,
    n_train: usize,
    rng: &mut R,
) -> Option<FixedLengthExample> {
    let n = ds.training_len(user);
    if n < 2 || seq_len == 0 {
        return None;
    }
    let target = rng.gen_range(1..n);
    let negatives = sample_negatives(ds, user, n_train, rng);
    Some(build(ds, user, target, seq_len, negatives))
}

/// The validation or test example of a user.
pub fn make_eval_example<R: Rng + ?Sized>(
    ds: &Dataset,
    user: usize,
    seq_len: usize,
    mode: EvalMode,
    negatives: NegativeMode,
    rng: &mut R,
) -> Result<FixedLengthExample> {
    let split = ds.split(user).ok_or_else(|| {
        Error::InsufficientData(format!(
            "user '{}' has {} events, at least 3 are needed",
            ds.user(user).key,
            ds.user(user).events.len()
        ))
    })?;
    let target = match mode {
        EvalMode::Validation => split.validation,
        EvalMode::Test => split.test,
    };
    let negatives = match negatives {
        NegativeMode::Sampled(n) => sample_negatives(ds, user, n, rng),
        NegativeMode::AllItems => all_negatives(ds, user),
    };
    Ok(build(ds, user, target, seq_len, negatives))
}
