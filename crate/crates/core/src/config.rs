//! Run configuration: a flat `key = value` text format with presets.

use std::path::{Path, PathBuf};

use crate::bench::BenchConfig;
use crate::dataset::{ContextMode, DataPaths, DatasetOptions, NegativeMode};
use crate::error::{Error, Result};
use crate::model::{Ablations, ModelConfig};
use crate::trainer::TrainConfig;

/// Every setting of a run. `to_text` output parses back to an equal value.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub data: Option<PathBuf>,
    pub item_attributes: Option<PathBuf>,
    pub split_manifest: Option<PathBuf>,
    pub frequent_items: usize,
    pub context: ContextMode,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub protocol: NegativeMode,
    pub k: usize,
    pub threads: usize,
    pub bench: BenchConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut model = ModelConfig::uniform(256, 50, vec![(2, 2), (5, 5), (7, 7)]);
        model.dropout = 0.35;
        RunConfig {
            data: None,
            item_attributes: None,
            split_manifest: None,
            frequent_items: 5000,
            context: ContextMode::Ymd,
            model,
            train: TrainConfig::default(),
            protocol: NegativeMode::Sampled(100),
            k: 10,
            threads: 1,
            bench: BenchConfig::default(),
        }
    }
}

const PRESETS: [(&str, &str); 4] = [
    ("beauty", include_str!("../presets/beauty.conf")),
    ("games", include_str!("../presets/games.conf")),
    ("fashion", include_str!("../presets/fashion.conf")),
    ("men", include_str!("../presets/men.conf")),
];

pub fn preset_names() -> Vec<&'static str> {
    PRESETS.iter().map(|(n, _)| *n).collect()
}

/// Parses `[[k,s],...]` or the brace form `{ (k, s), ... }`.
pub fn parse_schedule(text: &str) -> Result<Vec<(usize, usize)>> {
    let json: String = text
        .chars()
        .map(|c| match c {
            '{' | '(' => '[',
            '}' | ')' => ']',
            c => c,
        })
        .collect();
    let layers: Vec<(usize, usize)> = serde_json::from_str(&json)
        .map_err(|_| Error::Config(format!("cannot read schedule '{text}', expected e.g. [[2,2],[5,5],[7,7]]")))?;
    if layers.is_empty() || layers.iter().any(|&(k, s)| k == 0 || s == 0) {
        return Err(Error::Config(format!("schedule '{text}' needs layers with kernel and stride ≥ 1")));
    }
    Ok(layers)
}

pub fn format_schedule(layers: &[(usize, usize)]) -> String {
    let inner: Vec<String> = layers.iter().map(|(k, s)| format!("[{k},{s}]")).collect();
    format!("[{}]", inner.join(","))
}

/// Parses `[a,b,c]` or `a,b,c`.
pub fn parse_usize_list(text: &str) -> Result<Vec<usize>> {
    let t = text.trim().trim_start_matches('[').trim_end_matches(']');
    t.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|_| Error::Config(format!("'{s}' in '{text}' is not a non-negative integer"))))
        .collect()
}

fn number<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse '{value}'")))
}

fn optional_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

impl RunConfig {
    pub fn preset(name: &str) -> Result<RunConfig> {
        let (_, text) = PRESETS.iter().find(|(n, _)| *n == name).ok_or_else(|| {
            Error::Config(format!("unknown preset '{name}', expected one of {}", preset_names().join(", ")))
        })?;
        let mut cfg = RunConfig::default();
        cfg.apply_text(text, Path::new(name))?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        cfg.apply_file(path)?;
        Ok(cfg)
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        self.apply_text(&text, path)
    }

    /// Applies `key = value` lines in order. `#` starts a comment.
    pub fn apply_text(&mut self, text: &str, origin: &Path) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Config(format!(
                "{}:{}: expected 'key = value'",
                origin.display(),
                i + 1
            )))?;
            self.set(key.trim(), value.trim())
                .map_err(|e| Error::Config(format!("{}:{}: {e}", origin.display(), i + 1)))?;
        }
        Ok(())
    }

    /// Applies a single `key=value` override.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (key, value) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override '{assignment}' is not key=value")))?;
        self.set(key.trim(), value.trim())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let m = &mut self.model;
        let t = &mut self.train;
        let b = &mut self.bench;
        match key {
            "data" => self.data = optional_path(value),
            "item_attributes" => self.item_attributes = optional_path(value),
            "split_manifest" => self.split_manifest = optional_path(value),
            "frequent_items" => self.frequent_items = number(key, value)?,
            "context" => self.context = ContextMode::parse(value)?,
            "seq_len" => m.seq_len = number(key, value)?,
            "embedding_dim" => {
                let d = number(key, value)?;
                (m.d_a, m.d_c, m.d_f, m.d_i, m.d_v) = (d, d, d, d, d);
            }
            "d_a" => m.d_a = number(key, value)?,
            "d_c" => m.d_c = number(key, value)?,
            "d_f" => m.d_f = number(key, value)?,
            "d_i" => m.d_i = number(key, value)?,
            "d_v" => m.d_v = number(key, value)?,
            "schedule" => m.schedule = parse_schedule(value)?,
            "dropout" => m.dropout = number(key, value)?,
            "ablations" => m.ablations = Ablations::parse(value)?,
            "batch_size" => t.batch_size = number(key, value)?,
            "learning_rate" => t.learning_rate = number(key, value)?,
            "weight_decay" => t.weight_decay = number(key, value)?,
            "max_epochs" => t.max_epochs = number(key, value)?,
            "patience" => t.patience = number(key, value)?,
            "n_train" => t.n_train = number(key, value)?,
            "n_val" => t.n_val = number(key, value)?,
            "seed" => {
                t.seed = number(key, value)?;
                b.seed = t.seed;
            }
            "protocol" => self.protocol = NegativeMode::parse(value)?,
            "k" => self.k = number(key, value)?,
            "threads" => self.threads = number(key, value)?,
            "bench_lengths" => b.lengths = parse_usize_list(value)?,
            "bench_batch" => b.batch_size = number(key, value)?,
            "bench_d_v" => b.d_v = number(key, value)?,
            "bench_heads" => b.heads = number(key, value)?,
            "bench_repetitions" => b.repetitions = number(key, value)?,
            "bench_warmup" => b.warmup = number(key, value)?,
            "bench_memory_limit_mb" => {
                let mb: u64 = number(key, value)?;
                b.memory_limit_bytes = (mb > 0).then_some(mb << 20);
            }
            other => return Err(Error::Config(format!("unknown key '{other}'"))),
        }
        Ok(())
    }

    pub fn seed(&self) -> u64 {
        self.train.seed
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        if self.threads == 0 {
            return Err(Error::Config("threads must be at least 1".into()));
        }
        Ok(())
    }

    pub fn data_paths(&self) -> Result<DataPaths> {
        let interactions = self
            .data
            .clone()
            .ok_or_else(|| Error::Config("no dataset given: pass --data <path> or set 'data' in the config".into()))?;
        Ok(DataPaths {
            interactions,
            item_attributes: self.item_attributes.clone(),
            split_manifest: self.split_manifest.clone(),
        })
    }

    pub fn dataset_options(&self) -> DatasetOptions {
        DatasetOptions {
            frequent_items: self.frequent_items,
            context: self.context,
        }
    }

    /// Canonical text form listing every key.
    pub fn to_text(&self) -> String {
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let m = &self.model;
        let t = &self.train;
        let b = &self.bench;
        let lengths: Vec<String> = b.lengths.iter().map(usize::to_string).collect();
        let entries: Vec<(&str, String)> = vec![
            ("data", path(&self.data)),
            ("item_attributes", path(&self.item_attributes)),
            ("split_manifest", path(&self.split_manifest)),
            ("frequent_items", self.frequent_items.to_string()),
            ("context", self.context.name().to_string()),
            ("seq_len", m.seq_len.to_string()),
            ("d_a", m.d_a.to_string()),
            ("d_c", m.d_c.to_string()),
            ("d_f", m.d_f.to_string()),
            ("d_i", m.d_i.to_string()),
            ("d_v", m.d_v.to_string()),
            ("schedule", format_schedule(&m.schedule)),
            ("dropout", m.dropout.to_string()),
            ("ablations", m.ablations.to_string()),
            ("batch_size", t.batch_size.to_string()),
            ("learning_rate", t.learning_rate.to_string()),
            ("weight_decay", t.weight_decay.to_string()),
            ("max_epochs", t.max_epochs.to_string()),
            ("patience", t.patience.to_string()),
            ("n_train", t.n_train.to_string()),
            ("n_val", t.n_val.to_string()),
            ("seed", t.seed.to_string()),
            ("protocol", self.protocol.to_string()),
            ("k", self.k.to_string()),
            ("threads", self.threads.to_string()),
            ("bench_lengths", format!("[{}]", lengths.join(","))),
            ("bench_batch", b.batch_size.to_string()),
            ("bench_d_v", b.d_v.to_string()),
            ("bench_heads", b.heads.to_string()),
            ("bench_repetitions", b.repetitions.to_string()),
            ("bench_warmup", b.warmup.to_string()),
            ("bench_memory_limit_mb", b.memory_limit_bytes.map_or(0, |v| v >> 20).to_string()),
        ];
        entries.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}
