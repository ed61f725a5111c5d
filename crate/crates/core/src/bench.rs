//! Scaling benchmark of the convolution pyramid against a single-block
//! multi-head self-attention reference.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::Rng;

use crate::cds::{cds_forward, count_flops, plan_schedule, schedule_family, BlockParams, CdsOptions};
use crate::error::{Error, Result};
use crate::evaluator::csv_error;
use crate::numerics::{threads, Graph, ParamId, ParamStore, PeakProbe, Tensor, Var};
use crate::rng::{self, Stream};

/// Weights of one self-attention block.
#[derive(Debug, Clone)]
pub struct AttentionParams {
    pub heads: usize,
    pub w_q: ParamId,
    pub b_q: ParamId,
    pub w_k: ParamId,
    pub b_k: ParamId,
    pub w_v: ParamId,
    pub b_v: ParamId,
    pub w_o: ParamId,
    pub b_o: ParamId,
}

impl AttentionParams {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, d: usize, heads: usize, rng: &mut R) -> Result<Self> {
        if heads == 0 || !d.is_multiple_of(heads) {
            return Err(Error::Config(format!("{heads} heads do not divide width {d}")));
        }
        let mut w = |name: &str| store.add(name, Tensor::glorot(&[d, d], d, d, rng));
        let (w_q, w_k, w_v, w_o) = (w("attn.w_q"), w("attn.w_k"), w("attn.w_v"), w("attn.w_o"));
        let mut b = |name: &str| store.add(name, Tensor::zeros(&[d]));
        let (b_q, b_k, b_v, b_o) = (b("attn.b_q"), b("attn.b_k"), b("attn.b_v"), b("attn.b_o"));
        Ok(AttentionParams {
            heads,
            w_q,
            b_q,
            w_k,
            b_k,
            w_v,
            b_v,
            w_o,
            b_o,
        })
    }
}

/// Output (`1×d`) and the per-head `L×L` attention weights.
pub fn attention_with_weights(g: &mut Graph, p: &AttentionParams, z: Var) -> Result<(Var, Vec<Var>)> {
    let d = g.value(z).cols();
    let dh = d / p.heads;
    let project = |g: &mut Graph, w: ParamId, b: ParamId| {
        let (w, b) = (g.param(w), g.param(b));
        g.linear(z, w, Some(b))
    };
    let q = project(g, p.w_q, p.b_q)?;
    let k = project(g, p.w_k, p.b_k)?;
    let v = project(g, p.w_v, p.b_v)?;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(p.heads);
    let mut weights = Vec::with_capacity(p.heads);
    for h in 0..p.heads {
        let qh = g.slice_cols(q, h * dh, dh)?;
        let kh = g.slice_cols(k, h * dh, dh)?;
        let vh = g.slice_cols(v, h * dh, dh)?;
        let scores = g.matmul_nt(qh, kh, scale)?;
        let a = g.softmax_rows(scores)?;
        weights.push(a);
        heads.push(g.matmul(a, vh)?);
    }
    let joined = g.concat_cols(&heads)?;
    let (w, b) = (g.param(p.w_o), g.param(p.b_o));
    let out = g.linear(joined, w, Some(b))?;
    Ok((g.mean_rows(out)?, weights))
}

/// Self-attention over `Z` (`L×d`), mean-pooled to `1×d`.
pub fn attention_encoder_forward(g: &mut Graph, p: &AttentionParams, z: Var) -> Result<Var> {
    Ok(attention_with_weights(g, p, z)?.0)
}

/// Score-matrix multiply-adds: `QKᵀ` plus `A·V`, `2·L²·d`.
pub fn attention_score_macs(len: usize, d: usize) -> u64 {
    2 * (len * len * d) as u64
}

/// Projection (`4·L·d²`) plus score-matrix multiply-adds.
pub fn attention_macs(len: usize, d: usize) -> u64 {
    4 * (len * d * d) as u64 + attention_score_macs(len, d)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EncoderKind {
    Cds,
    Attention,
}

impl EncoderKind {
    pub fn name(self) -> &'static str {
        match self {
            EncoderKind::Cds => "cds",
            EncoderKind::Attention => "attention",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    pub lengths: Vec<usize>,
    pub batch_size: usize,
    pub d_v: usize,
    pub heads: usize,
    pub repetitions: usize,
    pub warmup: usize,
    pub seed: u64,
    /// Samples whose estimated per-example tape exceeds this are marked out of memory.
    pub memory_limit_bytes: Option<u64>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            lengths: vec![128, 256, 512, 1024, 2048],
            batch_size: 32,
            d_v: 64,
            heads: 4,
            repetitions: 5,
            warmup: 2,
            seed: 42,
            memory_limit_bytes: Some(4 << 30),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScalingSample {
    pub encoder: EncoderKind,
    pub len: usize,
    pub batch_size: usize,
    /// Median forward+backward time of one batch.
    pub wall_seconds: f64,
    /// Tensor-storage high-water mark of one batch above the starting level.
    pub peak_bytes: u64,
    /// Forward multiply-adds of one batch.
    pub mac_count: u64,
    pub out_of_memory: bool,
}

fn estimated_tape_bytes(kind: EncoderKind, len: usize, d: usize) -> u64 {
    let (l, d) = (len as u64, d as u64);
    match kind {
        EncoderKind::Cds => 8 * 40 * l * d,
        EncoderKind::Attention => 8 * (12 * l * l + 24 * l * d),
    }
}

enum Encoder {
    Cds(Vec<BlockParams>, crate::cds::ConvSchedule),
    Attention(AttentionParams),
}

fn run_batch(store: &mut ParamStore, encoder: &Encoder, batch: &[Tensor]) -> Result<()> {
    for z in batch {
        let grads = {
            let mut g = Graph::new(store);
            let zv = g.leaf(z.clone());
            let out = match encoder {
                Encoder::Cds(blocks, schedule) => {
                    let mut unused = rng::stream(0, Stream::Dropout, 0);
                    cds_forward(&mut g, blocks, schedule, zv, CdsOptions::default(), &mut unused)?
                }
                Encoder::Attention(p) => attention_encoder_forward(&mut g, p, zv)?,
            };
            let loss = g.mean(out);
            g.backward(loss)?
        };
        store.accumulate(&grads, 1.0 / batch.len() as f64);
    }
    Ok(())
}

fn measure_one(kind: EncoderKind, len: usize, cfg: &BenchConfig) -> Result<ScalingSample> {
    let d = cfg.d_v;
    let mut sample = ScalingSample {
        encoder: kind,
        len,
        batch_size: cfg.batch_size,
        wall_seconds: f64::NAN,
        peak_bytes: 0,
        mac_count: 0,
        out_of_memory: false,
    };
    let mut rng = rng::stream(cfg.seed, Stream::Bench, len as u64);
    let mut store = ParamStore::new();
    let encoder = match kind {
        EncoderKind::Cds => {
            let layers = schedule_family(len);
            let schedule = plan_schedule(len, &layers)?;
            sample.mac_count = count_flops(&schedule, d) * cfg.batch_size as u64;
            let blocks = layers
                .iter()
                .enumerate()
                .map(|(j, &(k, _))| BlockParams::new(&mut store, j, d, k, &mut rng))
                .collect();
            Encoder::Cds(blocks, schedule)
        }
        EncoderKind::Attention => {
            sample.mac_count = attention_macs(len, d) * cfg.batch_size as u64;
            Encoder::Attention(AttentionParams::new(&mut store, d, cfg.heads, &mut rng)?)
        }
    };
    if cfg
        .memory_limit_bytes
        .is_some_and(|limit| estimated_tape_bytes(kind, len, d) > limit)
    {
        sample.out_of_memory = true;
        return Ok(sample);
    }
    for p in store.iter_mut() {
        p.value.grad_mut();
    }
    let batch: Vec<Tensor> = (0..cfg.batch_size)
        .map(|_| Tensor::uniform(&[len, d], 1.0, &mut rng))
        .collect();
    for _ in 0..cfg.warmup {
        run_batch(&mut store, &encoder, &batch)?;
    }
    let mut times = Vec::with_capacity(cfg.repetitions);
    for rep in 0..cfg.repetitions {
        store.zero_grad();
        let probe = PeakProbe::start();
        let started = Instant::now();
        run_batch(&mut store, &encoder, &batch)?;
        times.push(started.elapsed().as_secs_f64());
        if rep == 0 {
            sample.peak_bytes = probe.peak_above_baseline();
        }
    }
    times.sort_by(f64::total_cmp);
    sample.wall_seconds = times[times.len() / 2];
    Ok(sample)
}

/// Times forward plus backward of both encoders at every length.
///
/// Each example of a batch runs on its own tape, with gradients accumulated
/// across the batch, so the memory figure is the peak of one example's tape
/// plus the accumulated parameter gradients.
pub fn measure_scaling(cfg: &BenchConfig, mut on_sample: impl FnMut(&ScalingSample)) -> Result<Vec<ScalingSample>> {
    if threads() > 1 {
        return Err(Error::Config(format!(
            "benchmarks run single-threaded; {} threads are configured",
            threads()
        )));
    }
    if cfg.repetitions < 5 || cfg.warmup < 2 {
        return Err(Error::Config("benchmarks need at least 5 repetitions and 2 warmup runs".into()));
    }
    if cfg.lengths.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config("benchmark lengths must be strictly ascending".into()));
    }
    let mut out = Vec::new();
    for kind in [EncoderKind::Cds, EncoderKind::Attention] {
        for &len in &cfg.lengths {
            let s = measure_one(kind, len, cfg)?;
            log::info!(
                "{} L={len}: {:.4}s, {} bytes, {} MACs",
                kind.name(),
                s.wall_seconds,
                s.peak_bytes,
                s.mac_count
            );
            on_sample(&s);
            out.push(s);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogLogFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

/// Least-squares fit of `log(metric)` against `log(L)`. Needs at least four
/// positive points spanning a factor of eight in `L`.
pub fn fit_loglog_slope(points: &[(f64, f64)]) -> Result<LogLogFit> {
    let valid: Vec<(f64, f64)> = points
        .iter()
        .filter(|(l, m)| *l > 0.0 && *m > 0.0 && l.is_finite() && m.is_finite())
        .map(|(l, m)| (l.ln(), m.ln()))
        .collect();
    if valid.len() < 4 {
        return Err(Error::InsufficientData(format!("{} valid samples, at least 4 needed", valid.len())));
    }
    let (lo, hi) = valid
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), (x, _)| (lo.min(*x), hi.max(*x)));
    if hi - lo < 8f64.ln() - 1e-12 {
        return Err(Error::InsufficientData("samples span less than 8x in length".into()));
    }
    let n = valid.len() as f64;
    let mx = valid.iter().map(|p| p.0).sum::<f64>() / n;
    let my = valid.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = valid.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = valid.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let syy: f64 = valid.iter().map(|p| (p.1 - my).powi(2)).sum();
    let slope = sxy / sxx;
    let r_squared = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    Ok(LogLogFit {
        slope,
        intercept: my - slope * mx,
        r_squared,
    })
}

/// Samples of one encoder as `(L, metric)` pairs, skipping out-of-memory samples.
pub fn series(samples: &[ScalingSample], kind: EncoderKind, metric: impl Fn(&ScalingSample) -> f64) -> Vec<(f64, f64)> {
    samples
        .iter()
        .filter(|s| s.encoder == kind && !s.out_of_memory)
        .map(|s| (s.len as f64, metric(s)))
        .collect()
}

pub fn write_csv(samples: &[ScalingSample], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(["encoder", "L", "batch", "median_seconds", "peak_bytes", "mac_count"])
        .map_err(|e| csv_error(path, e))?;
    for s in samples {
        let seconds = if s.out_of_memory { "OOM".to_string() } else { format!("{:.6}", s.wall_seconds) };
        w.write_record([
            s.encoder.name().to_string(),
            s.len.to_string(),
            s.batch_size.to_string(),
            seconds,
            s.peak_bytes.to_string(),
            s.mac_count.to_string(),
        ])
        .map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// Whitespace-separated blocks per encoder, separated by two blank lines.
pub fn write_dat(samples: &[ScalingSample], path: &Path) -> Result<()> {
    let mut out = Vec::new();
    for kind in [EncoderKind::Cds, EncoderKind::Attention] {
        writeln!(out, "# {} L seconds peak_bytes macs", kind.name()).expect("writing to memory");
        for s in samples.iter().filter(|s| s.encoder == kind && !s.out_of_memory) {
            writeln!(out, "{} {:.6} {} {}", s.len, s.wall_seconds, s.peak_bytes, s.mac_count).expect("writing to memory");
        }
        writeln!(out, "\n").expect("writing to memory");
    }
    std::fs::write(path, out).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}
