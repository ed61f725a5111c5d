//! The full recommender: item encoder, convolution pyramid and dot-product scoring.

use std::path::Path;

use rand::Rng;

use crate::cds::{cds_forward, count_flops, plan_schedule, BlockParams, CdsOptions, ConvSchedule};
use crate::dataset::{Dataset, FixedLengthExample};
use crate::encoder::{encode_sequence, encode_target_items, Candidates, EncodeOptions, EncoderDims, EncoderParams};
use crate::error::{Error, Result};
use crate::numerics::{checkpoint, Graph, ParamStore, Tensor, Var};
use crate::rng::{self, Stream};

/// Component switches matching the ablation study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Ablations {
    /// Interval features replaced by zeros.
    pub no_intervals: bool,
    /// Both weighted residual terms removed from every block.
    pub no_residuals: bool,
    /// The schedule becomes a single `(L, L)` block.
    pub single_conv: bool,
    /// The pyramid is bypassed; the sequence vector is the mean of real rows of `Z`.
    pub avgpool_only: bool,
}

impl Ablations {
    pub const NAMES: [&'static str; 4] = ["no_intervals", "no_residuals", "single_conv", "avgpool_only"];

    pub fn validate(&self) -> Result<()> {
        if self.single_conv && self.avgpool_only {
            return Err(Error::Config("ablations single_conv and avgpool_only cannot be combined".into()));
        }
        Ok(())
    }

    pub fn set(&mut self, name: &str) -> Result<()> {
        match name {
            "no_intervals" => self.no_intervals = true,
            "no_residuals" => self.no_residuals = true,
            "single_conv" => self.single_conv = true,
            "avgpool_only" => self.avgpool_only = true,
            other => {
                return Err(Error::Config(format!(
                    "unknown ablation '{other}', expected one of {}",
                    Self::NAMES.join(", ")
                )))
            }
        }
        Ok(())
    }

    /// Parses a comma list; `none` or an empty string is no ablation.
    pub fn parse(list: &str) -> Result<Self> {
        let mut a = Ablations::default();
        for name in list.split(',').map(str::trim).filter(|s| !s.is_empty() && *s != "none") {
            a.set(name)?;
        }
        a.validate()?;
        Ok(a)
    }

    /// Validates a comma list of flag names without combining them, returned in
    /// canonical order.
    pub fn parse_names(list: &str) -> Result<Vec<&'static str>> {
        let mut all = Ablations::default();
        for name in list.split(',').map(str::trim).filter(|s| !s.is_empty() && *s != "none") {
            all.set(name)?;
        }
        Ok(all.names())
    }

    pub fn names(&self) -> Vec<&'static str> {
        let flags = [self.no_intervals, self.no_residuals, self.single_conv, self.avgpool_only];
        Self::NAMES.iter().zip(flags).filter(|(_, on)| *on).map(|(n, _)| *n).collect()
    }
}

impl std::fmt::Display for Ablations {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let names = self.names();
        if names.is_empty() {
            f.write_str("none")
        } else {
            f.write_str(&names.join(","))
        }
    }
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub d_a: usize,
    pub d_c: usize,
    pub d_f: usize,
    pub d_i: usize,
    pub d_v: usize,
    pub seq_len: usize,
    pub schedule: Vec<(usize, usize)>,
    pub dropout: f64,
    pub ablations: Ablations,
}

impl ModelConfig {
    /// Every width set to `d`.
    pub fn uniform(d: usize, seq_len: usize, schedule: Vec<(usize, usize)>) -> Self {
        ModelConfig {
            d_a: d,
            d_c: d,
            d_f: d,
            d_i: d,
            d_v: d,
            seq_len,
            schedule,
            dropout: 0.0,
            ablations: Ablations::default(),
        }
    }

    /// Schedule after applying the single-convolution ablation.
    pub fn effective_layers(&self) -> Vec<(usize, usize)> {
        if self.ablations.single_conv {
            vec![(self.seq_len, self.seq_len)]
        } else {
            self.schedule.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.ablations.validate()?;
        for (name, v) in [
            ("d_a", self.d_a),
            ("d_c", self.d_c),
            ("d_f", self.d_f),
            ("d_i", self.d_i),
            ("d_v", self.d_v),
            ("seq_len", self.seq_len),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if !self.ablations.avgpool_only {
            plan_schedule(self.seq_len, &self.effective_layers())?;
        }
        Ok(())
    }
}

/// Data-dependent input widths.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DataShape {
    pub attr_width: usize,
    pub context_width: usize,
    pub table_rows: usize,
}

impl DataShape {
    pub fn of(ds: &Dataset) -> Self {
        DataShape {
            attr_width: ds.attr_width(),
            context_width: ds.context_width(),
            table_rows: ds.vocab().table_rows(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub encoder: EncoderParams,
    pub blocks: Vec<BlockParams>,
    /// Planned for `config.seq_len`; `None` when the pyramid is bypassed.
    pub schedule: Option<ConvSchedule>,
}

const META_SCHEDULE: &str = "meta.schedule";
const META_SEQ_LEN: &str = "meta.seq_len";

impl Model {
    pub fn new(config: ModelConfig, shape: DataShape, seed: u64) -> Result<Model> {
        config.validate()?;
        let mut rng = rng::stream(seed, Stream::Init, 0);
        let mut store = ParamStore::new();
        let dims = EncoderDims {
            attr_width: shape.attr_width,
            context_width: shape.context_width,
            d_a: config.d_a,
            d_c: config.d_c,
            d_f: config.d_f,
            d_i: config.d_i,
            d_v: config.d_v,
            table_rows: shape.table_rows,
        };
        let encoder = EncoderParams::new(&mut store, dims, &mut rng);
        let (blocks, schedule) = if config.ablations.avgpool_only {
            (Vec::new(), None)
        } else {
            let layers = config.effective_layers();
            let schedule = plan_schedule(config.seq_len, &layers)?;
            let blocks = layers
                .iter()
                .enumerate()
                .map(|(j, &(k, _))| BlockParams::new(&mut store, j, config.d_v, k, &mut rng))
                .collect();
            (blocks, Some(schedule))
        };
        Ok(Model {
            config,
            store,
            encoder,
            blocks,
            schedule,
        })
    }

    pub fn for_dataset(config: ModelConfig, ds: &Dataset, seed: u64) -> Result<Model> {
        Model::new(config, DataShape::of(ds), seed)
    }

    fn encode_options(&self, training: bool) -> EncodeOptions {
        EncodeOptions {
            dropout: self.config.dropout,
            training,
            no_intervals: self.config.ablations.no_intervals,
        }
    }

    /// Schedule for an input window of `len` positions.
    pub fn schedule_for(&self, len: usize) -> Result<Option<ConvSchedule>> {
        match &self.schedule {
            None => Ok(None),
            Some(s) if s.input_len == len => Ok(Some(s.clone())),
            Some(s) => {
                if self.config.ablations.single_conv {
                    return Err(Error::Config(format!(
                        "single-convolution model was built for length {}, not {len}",
                        s.input_len
                    )));
                }
                plan_schedule(len, &s.layers).map(Some)
            }
        }
    }

    /// The sequence vector `X` (`1×d_v`) of an example's input window.
    pub fn sequence_vector<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        example: &FixedLengthExample,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        let z = encode_sequence(g, &self.encoder, example, self.encode_options(training), rng)?;
        match self.schedule_for(example.len())? {
            None => {
                let first_real = example.padding_mask.iter().take_while(|p| **p).count();
                g.window_mean(z, &[(first_real, example.len())], true)
            }
            Some(schedule) => {
                let keep: Vec<bool> = example.padding_mask.iter().map(|p| !p).collect();
                let z = g.mask_rows(z, &keep)?;
                let opts = CdsOptions {
                    dropout: self.config.dropout,
                    training,
                    no_residuals: self.config.ablations.no_residuals,
                };
                cds_forward(g, &self.blocks, &schedule, z, opts, rng)
            }
        }
    }

    /// Candidate embeddings, `n×d_v`.
    pub fn candidate_embeddings<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        candidates: &Candidates,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        encode_target_items(g, &self.encoder, candidates, self.encode_options(training), rng)
    }

    /// Binary cross-entropy of one example; candidate 0 is the positive.
    pub fn example_loss<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        example: &FixedLengthExample,
        candidates: &Candidates,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        let x = self.sequence_vector(g, example, training, rng)?;
        let targets = self.candidate_embeddings(g, candidates, training, rng)?;
        let logits = score(g, x, targets)?;
        g.bce_logits(logits)
    }

    /// Inference scores of the candidates, in candidate order.
    pub fn scores(&self, example: &FixedLengthExample, candidates: &Candidates) -> Result<Vec<f64>> {
        let mut unused = rng::stream(0, Stream::Dropout, 0);
        let mut g = Graph::new(&self.store);
        let x = self.sequence_vector(&mut g, example, false, &mut unused)?;
        let targets = self.candidate_embeddings(&mut g, candidates, false, &mut unused)?;
        let logits = score(&mut g, x, targets)?;
        Ok(g.value(logits).data().to_vec())
    }

    pub fn param_count(&self) -> usize {
        self.store.scalar_count()
    }

    /// Multiply-adds of the pyramid for one sequence.
    pub fn pyramid_flops(&self) -> u64 {
        self.schedule.as_ref().map_or(0, |s| count_flops(s, self.config.d_v))
    }

    fn meta_records(&self) -> Vec<(String, Tensor)> {
        let layers = self.schedule.as_ref().map(|s| s.layers.clone()).unwrap_or_default();
        let flat = layers.iter().flat_map(|&(k, s)| [k as f64, s as f64]).collect();
        vec![
            (
                META_SCHEDULE.to_string(),
                Tensor::new(vec![layers.len(), 2], flat).expect("two columns"),
            ),
            (META_SEQ_LEN.to_string(), Tensor::scalar(self.config.seq_len as f64)),
        ]
    }

    /// Checkpoint bytes: every parameter followed by schedule metadata.
    pub fn checkpoint_bytes(&self) -> Vec<u8> {
        let meta = self.meta_records();
        checkpoint::encode_records(
            self.store
                .iter()
                .map(|p| (p.name.as_str(), &p.value))
                .chain(meta.iter().map(|(n, t)| (n.as_str(), t))),
        )
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::write_bytes(&self.checkpoint_bytes(), path)
    }

    /// Overwrites parameter values from checkpoint records written by [`Model::save`].
    pub fn restore(&mut self, records: &[(String, Tensor)]) -> Result<()> {
        let (meta, params): (Vec<_>, Vec<_>) = records.iter().cloned().partition(|(n, _)| n.starts_with("meta."));
        let expected = self.meta_records();
        for (name, want) in &expected {
            match meta.iter().find(|(n, _)| n == name) {
                Some((_, got)) if got == want => {}
                Some(_) => {
                    return Err(Error::Incompatible(format!(
                        "{name} in checkpoint differs from the configured model"
                    )))
                }
                None => return Err(Error::Incompatible(format!("checkpoint lacks {name}"))),
            }
        }
        checkpoint::restore(&mut self.store, &params)
    }

    pub fn load(&mut self, path: &Path) -> Result<()> {
        let records = checkpoint::read(path)?;
        self.restore(&records)
    }
}

/// Schedule layers and sequence length stored in a checkpoint, if present.
pub fn checkpoint_schedule(records: &[(String, Tensor)]) -> Option<(usize, Vec<(usize, usize)>)> {
    let seq_len = records.iter().find(|(n, _)| n == META_SEQ_LEN)?.1.data()[0] as usize;
    let s = &records.iter().find(|(n, _)| n == META_SCHEDULE)?.1;
    let layers = s.data().chunks(2).map(|c| (c[0] as usize, c[1] as usize)).collect();
    Some((seq_len, layers))
}

/// Dot-product logits of each target row against the sequence vector, `n×1`.
pub fn score(g: &mut Graph, x: Var, targets: Var) -> Result<Var> {
    g.matmul_nt(targets, x, 1.0)
}
