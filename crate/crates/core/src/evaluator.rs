//! Leave-one-out ranking evaluation with HR@K and NDCG@K.

use std::io::Write;
use std::path::Path;

use crate::dataset::{make_eval_example, Dataset, EvalMode, FixedLengthExample, NegativeMode};
use crate::encoder::Candidates;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::rng::{self, Stream};

/// Anything that scores an example's candidates (positive first).
pub trait Scorer {
    fn score(&self, ds: &Dataset, example: &FixedLengthExample) -> Result<Vec<f64>>;
}

impl Scorer for Model {
    fn score(&self, ds: &Dataset, example: &FixedLengthExample) -> Result<Vec<f64>> {
        self.scores(example, &Candidates::from_example(ds, example))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RankResult {
    pub user: usize,
    /// 1-based rank of the positive among all candidates.
    pub rank: usize,
    pub candidate_count: usize,
}

/// Pessimistic rank of `scores[0]`: one plus the number of other candidates
/// scoring at least as high.
pub fn pessimistic_rank(scores: &[f64]) -> usize {
    let pos = scores[0];
    1 + scores[1..].iter().filter(|&&s| s >= pos).count()
}

pub fn rank_candidates(scorer: &dyn Scorer, ds: &Dataset, example: &FixedLengthExample) -> Result<RankResult> {
    let scores = scorer.score(ds, example)?;
    if scores.len() != 1 + example.negatives.len() {
        return Err(Error::dim("scores", &[scores.len()], &[1 + example.negatives.len()]));
    }
    if let Some(i) = scores.iter().position(|s| s.is_nan()) {
        return Err(Error::Numeric(format!(
            "NaN score for candidate {i} of user '{}'",
            ds.user(example.user).key
        )));
    }
    Ok(RankResult {
        user: example.user,
        rank: pessimistic_rank(&scores),
        candidate_count: scores.len(),
    })
}

fn check(ranks: &[usize], k: usize) -> Result<()> {
    if ranks.is_empty() {
        return Err(Error::UndefinedMetric("no ranks to average"));
    }
    if k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    Ok(())
}

/// Fraction of ranks within the top `k`.
pub fn hit_rate_at_k(ranks: &[usize], k: usize) -> Result<f64> {
    check(ranks, k)?;
    Ok(ranks.iter().filter(|&&r| r <= k).count() as f64 / ranks.len() as f64)
}

/// Mean of `1/log2(rank + 1)` over ranks within the top `k`, zero otherwise.
pub fn ndcg_at_k(ranks: &[usize], k: usize) -> Result<f64> {
    check(ranks, k)?;
    let total: f64 = ranks
        .iter()
        .filter(|&&r| r <= k)
        .map(|&r| 1.0 / ((r + 1) as f64).log2())
        .sum();
    Ok(total / ranks.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalSettings {
    pub mode: EvalMode,
    pub negatives: NegativeMode,
    pub k: usize,
    pub seq_len: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupReport {
    pub label: String,
    /// `None` when the group has no users.
    pub report: Option<MetricReport>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub hr_at_k: f64,
    pub ndcg_at_k: f64,
    pub k: usize,
    pub protocol: NegativeMode,
    pub evaluated_users: usize,
    pub excluded_users: usize,
    pub ranks: Vec<RankResult>,
    pub groups: Vec<GroupReport>,
}

impl MetricReport {
    fn from_ranks(ranks: Vec<RankResult>, k: usize, protocol: NegativeMode, excluded_users: usize) -> Result<Self> {
        let r: Vec<usize> = ranks.iter().map(|x| x.rank).collect();
        Ok(MetricReport {
            hr_at_k: hit_rate_at_k(&r, k)?,
            ndcg_at_k: ndcg_at_k(&r, k)?,
            k,
            protocol,
            evaluated_users: ranks.len(),
            excluded_users,
            ranks,
            groups: Vec::new(),
        })
    }

    /// Metrics over a subset of the already ranked users.
    pub fn subset(&self, users: &[usize]) -> Result<Option<MetricReport>> {
        let mut keep: Vec<RankResult> = self.ranks.iter().filter(|r| users.contains(&r.user)).copied().collect();
        if keep.is_empty() {
            return Ok(None);
        }
        keep.sort_by_key(|r| r.user);
        MetricReport::from_ranks(keep, self.k, self.protocol, 0).map(Some)
    }

    /// `group,hr@k,ndcg@k,users` rows, overall first.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
        let k = self.k;
        w.write_record(["group", "protocol", &format!("hr@{k}"), &format!("ndcg@{k}"), "users", "excluded_users"])
            .map_err(|e| csv_error(path, e))?;
        let mut rows = vec![("all".to_string(), Some(self))];
        rows.extend(self.groups.iter().map(|g| (g.label.clone(), g.report.as_ref())));
        for (label, report) in rows {
            let fields = match report {
                Some(r) => vec![
                    label,
                    self.protocol.to_string(),
                    format!("{:.6}", r.hr_at_k),
                    format!("{:.6}", r.ndcg_at_k),
                    r.evaluated_users.to_string(),
                    r.excluded_users.to_string(),
                ],
                None => vec![label, self.protocol.to_string(), String::new(), String::new(), "0".into(), "0".into()],
            };
            w.write_record(&fields).map_err(|e| csv_error(path, e))?;
        }
        w.flush().map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    /// One JSON object per evaluated user.
    pub fn write_ranks(&self, ds: &Dataset, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        for r in &self.ranks {
            let line = serde_json::json!({
                "user": ds.user(r.user).key,
                "rank": r.rank,
                "candidates": r.candidate_count,
            });
            writeln!(out, "{line}").expect("writing to memory");
        }
        std::fs::write(path, out).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    /// Aligned text table of the overall and group metrics.
    pub fn pretty(&self) -> String {
        let k = self.k;
        let mut s = format!(
            "{:<16} {:>10} {:>10} {:>8}\n",
            "group",
            format!("HR@{k}"),
            format!("NDCG@{k}"),
            "users"
        );
        s += &format!(
            "{:<16} {:>10.4} {:>10.4} {:>8}\n",
            "all", self.hr_at_k, self.ndcg_at_k, self.evaluated_users
        );
        for g in &self.groups {
            match &g.report {
                Some(r) => {
                    s += &format!(
                        "{:<16} {:>10.4} {:>10.4} {:>8}\n",
                        g.label, r.hr_at_k, r.ndcg_at_k, r.evaluated_users
                    )
                }
                None => s += &format!("{:<16} {:>10} {:>10} {:>8}\n", g.label, "-", "-", 0),
            }
        }
        s += &format!("protocol {}, {} users excluded\n", self.protocol, self.excluded_users);
        s
    }
}

pub(crate) fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::io(
        format!("writing {}", path.display()),
        std::io::Error::other(e.to_string()),
    )
}

/// Ranks every evaluable user's held-out target. Each user's negatives come
/// from a generator keyed by `(seed, user)`, so reports are reproducible.
pub fn evaluate(scorer: &dyn Scorer, ds: &Dataset, settings: &EvalSettings) -> Result<MetricReport> {
    let stream = match settings.mode {
        EvalMode::Validation => Stream::Validation,
        EvalMode::Test => Stream::Evaluation,
    };
    let mut ranks = Vec::new();
    for u in ds.evaluable_users() {
        let mut rng = rng::stream(settings.seed, stream, u as u64);
        let ex = make_eval_example(ds, u, settings.seq_len, settings.mode, settings.negatives, &mut rng)?;
        ranks.push(rank_candidates(scorer, ds, &ex)?);
    }
    if ranks.is_empty() {
        return Err(Error::InsufficientData("no user has enough events to evaluate".into()));
    }
    MetricReport::from_ranks(ranks, settings.k, settings.negatives, ds.stats().excluded_users)
}

/// How users are sliced for a breakdown.
#[derive(Debug, Clone, PartialEq)]
pub enum GroupRule {
    /// The `q` fraction of users with the longest training sequences versus the rest.
    TopBottom(f64),
    /// Re-evaluation with each maximum input length.
    SeqLength(Vec<usize>),
}

impl GroupRule {
    pub fn parse(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("groups must be 'top_bottom:<q>' or 'seq_length:<L>,<L>,...', got '{s}'"));
        if let Some(q) = s.strip_prefix("top_bottom:") {
            let q: f64 = q.parse().map_err(|_| bad())?;
            if !(0.0..=1.0).contains(&q) {
                return Err(bad());
            }
            return Ok(GroupRule::TopBottom(q));
        }
        if let Some(list) = s.strip_prefix("seq_length:") {
            let lens: Vec<usize> = list.split(',').map(|v| v.trim().parse()).collect::<Result<_, _>>().map_err(|_| bad())?;
            if lens.is_empty() || lens.contains(&0) {
                return Err(bad());
            }
            return Ok(GroupRule::SeqLength(lens));
        }
        Err(bad())
    }
}

/// Splits evaluable users into `(top, bottom)` by training length. Top holds
/// the `round(q·n)` longest users plus any user tied with the shortest of them.
pub fn top_bottom_users(ds: &Dataset, q: f64) -> (Vec<usize>, Vec<usize>) {
    let mut users: Vec<usize> = ds.evaluable_users().collect();
    users.sort_by_key(|&u| (std::cmp::Reverse(ds.training_len(u)), u));
    let n_top = (q * users.len() as f64).round() as usize;
    if n_top == 0 {
        return (Vec::new(), users);
    }
    let threshold = ds.training_len(users[n_top - 1]);
    let (top, bottom): (Vec<usize>, Vec<usize>) = users.into_iter().partition(|&u| ds.training_len(u) >= threshold);
    (top, bottom)
}

/// The overall report with per-group breakdowns attached.
pub fn evaluate_groups(
    scorer: &dyn Scorer,
    ds: &Dataset,
    settings: &EvalSettings,
    rule: &GroupRule,
) -> Result<MetricReport> {
    let mut report = evaluate(scorer, ds, settings)?;
    match rule {
        GroupRule::TopBottom(q) => {
            let (top, bottom) = top_bottom_users(ds, *q);
            report.groups = vec![
                GroupReport {
                    label: "top".into(),
                    report: report.subset(&top)?,
                },
                GroupReport {
                    label: "bottom".into(),
                    report: report.subset(&bottom)?,
                },
            ];
        }
        GroupRule::SeqLength(lens) => {
            for &len in lens {
                let s = EvalSettings { seq_len: len, ..*settings };
                report.groups.push(GroupReport {
                    label: format!("L={len}"),
                    report: Some(evaluate(scorer, ds, &s)?),
                });
            }
        }
    }
    Ok(report)
}
