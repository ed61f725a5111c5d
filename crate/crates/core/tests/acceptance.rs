//! End-to-end acceptance suite. Run with `--nocapture` to see one PASS/FAIL
//! line per criterion.

mod common;

use std::collections::HashMap;
use std::time::{Duration, Instant};

use common::{brute_force_plan, eval_dataset, oracle_metrics, rng, HashScorer, MatrixScorer};
use convrec::bench::{
    attention_score_macs, fit_loglog_slope, measure_scaling, series, BenchConfig, EncoderKind, ScalingSample,
};
use convrec::cds::{cds_forward, count_flops, plan_schedule, schedule_family, BlockParams, CdsOptions};
use convrec::cli::{cmd_train, METRICS_FILE, CHECKPOINT_FILE};
use convrec::config::{parse_schedule, RunConfig};
use convrec::dataset::{make_training_example, synthetic, Dataset, DatasetOptions, EvalMode, NegativeMode};
use convrec::encoder::{
    compute_intervals, encode_rows, Candidates, EncodeOptions, EncoderDims, EncoderInput, EncoderParams,
    LAYER_NORM_EPS,
};
use convrec::evaluator::{evaluate, EvalSettings};
use convrec::model::{Ablations, Model, ModelConfig};
use convrec::numerics::{grad_check, Graph, GradCheckReport, ParamStore, Tensor, Var};
use convrec::trainer::{fit, TrainConfig};
use rand::Rng;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn within(limit: Duration, start: Instant, detail: String) -> Outcome {
    let spent = start.elapsed();
    check(spent < limit, format!("{detail}; {:.1}s of {}s", spent.as_secs_f64(), limit.as_secs()))
}

fn random(shape: &[usize], seed: u64) -> Tensor {
    Tensor::uniform(shape, 1.0, &mut rng(seed))
}

fn weights(n: usize, seed: u64) -> Vec<f64> {
    let mut r = rng(seed);
    (0..n).map(|_| r.gen_range(-1.0..1.0)).collect()
}

fn ds_of(records: Vec<convrec::dataset::InteractionRecord>) -> Dataset {
    Dataset::from_records(records, None, &HashMap::new(), &DatasetOptions::default()).unwrap()
}

fn test_settings(negatives: NegativeMode, seq_len: usize, seed: u64) -> EvalSettings {
    EvalSettings {
        mode: EvalMode::Test,
        negatives,
        k: 10,
        seq_len,
        seed,
    }
}

type Primitive = (&'static str, Vec<Vec<usize>>, fn(&mut Graph, &[Var]) -> convrec::Result<Var>);

fn primitive_reports() -> Vec<(&'static str, GradCheckReport)> {
    let cases: Vec<Primitive> = vec![
        ("linear", vec![vec![3, 4], vec![4, 5], vec![5]], |g, v| g.linear(v[0], v[1], Some(v[2]))),
        ("matmul", vec![vec![3, 4], vec![4, 2]], |g, v| g.matmul(v[0], v[1])),
        ("matmul_nt", vec![vec![3, 4], vec![5, 4]], |g, v| g.matmul_nt(v[0], v[1], 0.7)),
        ("add", vec![vec![3, 4], vec![3, 4]], |g, v| g.add(v[0], v[1])),
        ("scale", vec![vec![3, 4]], |g, v| Ok(g.scale(v[0], -1.5))),
        ("scale_by", vec![vec![3, 4], vec![1]], |g, v| g.scale_by(v[0], v[1])),
        ("concat_cols", vec![vec![3, 4], vec![3, 2]], |g, v| g.concat_cols(&[v[0], v[1]])),
        ("slice_cols", vec![vec![3, 6]], |g, v| g.slice_cols(v[0], 1, 4)),
        ("transpose", vec![vec![3, 4]], |g, v| g.transpose(v[0])),
        ("conv1d", vec![vec![9, 2], vec![3, 2, 3], vec![3]], |g, v| {
            let x = g.transpose(v[0])?;
            g.conv1d(x, v[1], v[2], 2, (1, 1))
        }),
        ("layer_norm", vec![vec![4, 6], vec![6], vec![6]], |g, v| g.layer_norm(v[0], v[1], v[2], LAYER_NORM_EPS)),
        ("gelu", vec![vec![4, 5]], |g, v| Ok(g.gelu(v[0]))),
        ("window_mean", vec![vec![5, 3]], |g, v| g.window_mean(v[0], &[(0, 2), (1, 4), (4, 5)], true)),
        ("avg_pool1d", vec![vec![3, 7]], |g, v| g.avg_pool1d(v[0], 3, 3, (0, 2))),
        ("dropout", vec![vec![4, 5]], |g, v| g.dropout(v[0], 0.3, true, &mut rng(99))),
        ("mask_rows", vec![vec![3, 4]], |g, v| g.mask_rows(v[0], &[true, false, true])),
        ("mean_rows", vec![vec![4, 3]], |g, v| g.mean_rows(v[0])),
        ("softmax_rows", vec![vec![3, 5]], |g, v| g.softmax_rows(v[0])),
        ("sum", vec![vec![3, 4]], |g, v| Ok(g.sum(v[0]))),
        ("mean", vec![vec![3, 4]], |g, v| Ok(g.mean(v[0]))),
        ("bce_logits", vec![vec![6]], |g, v| g.bce_logits(v[0])),
    ];
    let mut out = Vec::new();
    for (i, (name, shapes, op)) in cases.into_iter().enumerate() {
        let mut store = ParamStore::new();
        let ids: Vec<_> = shapes
            .iter()
            .enumerate()
            .map(|(j, s)| store.add(format!("p{j}"), random(s, 100 * i as u64 + j as u64)))
            .collect();
        let report = grad_check(&mut store, &[], 1e-6, |g| {
            let vars: Vec<Var> = ids.iter().map(|&id| g.param(id)).collect();
            let y = op(g, &vars)?;
            let n = g.value(y).len();
            g.weighted_sum(y, &weights(n, 7 + i as u64))
        })
        .unwrap();
        out.push((name, report));
    }

    // Embedding lookups: gradients flow into the referenced table rows.
    let mut store = ParamStore::new();
    let table = store.add("table", random(&[6, 3], 1));
    let w = weights(9, 2);
    let report = grad_check(&mut store, &[], 1e-6, |g| {
        let e = g.embedding(table, &[4, 1, 4])?;
        g.weighted_sum(e, &w)
    })
    .unwrap();
    out.push(("embedding", report));
    out
}

fn encoder_report() -> GradCheckReport {
    let d = EncoderDims {
        attr_width: 3,
        context_width: 3,
        d_a: 4,
        d_c: 4,
        d_f: 4,
        d_i: 4,
        d_v: 4,
        table_rows: 6,
    };
    let mut store = ParamStore::new();
    let p = EncoderParams::new(&mut store, d, &mut rng(13));
    for id in [p.b_a, p.b_c, p.b_f, p.b_v, p.b_q, p.ln_beta] {
        let shape = store.value(id).shape().to_vec();
        *store.value_mut(id) = Tensor::uniform(&shape, 0.5, &mut rng(id.index() as u64));
    }
    let attrs = random(&[5, 3], 14);
    let ctx = random(&[5, 3], 15);
    let intervals = compute_intervals(
        &[[0.0; 3], [2020.0, 1.0, 3.0], [2020.0, 2.0, 1.0], [2021.0, 1.0, 9.0], [2021.0, 1.0, 30.0]],
        &[true, false, false, false, false],
    );
    let w = weights(5 * 4, 16);
    grad_check(&mut store, &[], 1e-6, |g| {
        let input = EncoderInput {
            attributes: attrs.clone(),
            contexts: ctx.clone(),
            rows: vec![5, 1, 0, 2, 1],
            intervals: intervals.clone(),
        };
        let z = encode_rows(g, &p, input, EncodeOptions::default(), &mut rng(0))?;
        g.weighted_sum(z, &w)
    })
    .unwrap()
}

fn cds_report() -> GradCheckReport {
    let (d, len) = (3, 10);
    let layers = [(2, 2), (5, 5)];
    let mut store = ParamStore::new();
    let mut r = rng(10);
    let blocks: Vec<BlockParams> =
        layers.iter().enumerate().map(|(j, &(k, _))| BlockParams::new(&mut store, j, d, k, &mut r)).collect();
    let plan = plan_schedule(len, &layers).unwrap();
    let z = store.add("z", random(&[len, d], 11));
    let w = weights(d, 12);
    grad_check(&mut store, &[], 1e-6, |g| {
        let zv = g.param(z);
        let x = cds_forward(g, &blocks, &plan, zv, CdsOptions::default(), &mut rng(0))?;
        g.weighted_sum(x, &w)
    })
    .unwrap()
}

fn end_to_end_report() -> GradCheckReport {
    let ds = ds_of(synthetic::random(2, 30, 13, 13, 3, 7));
    let mut model = Model::for_dataset(ModelConfig::uniform(8, 10, vec![(2, 2), (5, 5)]), &ds, 2).unwrap();
    let ex = make_training_example(&ds, 0, 10, 5, &mut rng(4)).unwrap();
    assert_eq!(ex.negatives.len(), 5);
    let cands = Candidates::from_example(&ds, &ex);
    let m = model.clone();
    grad_check(&mut model.store, &[], 1e-6, |g| m.example_loss(g, &ex, &cands, false, &mut rng(0))).unwrap()
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut reports = primitive_reports();
    reports.push(("encoder", encoder_report()));
    reports.push(("cds", cds_report()));
    reports.push(("end_to_end", end_to_end_report()));
    let worst = reports.iter().map(|(_, r)| r.max_rel_error).fold(0.0, f64::max);
    let failing: Vec<String> =
        reports.iter().filter(|(_, r)| !r.passes(1e-3)).map(|(n, r)| format!("{n} {:.2e}", r.max_rel_error)).collect();
    if !failing.is_empty() {
        return Err(format!("max relative error >= 1e-3 in {}", failing.join(", ")));
    }
    within(Duration::from_secs(60), start, format!("{} checks, worst relative error {worst:.2e}", reports.len()))
}

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let mut cases = 0;
    for len in 1..=64 {
        for k in 1..=8 {
            for s in 1..=8 {
                let (lengths, pads) = brute_force_plan(len, &[(k, s)]);
                let plan = plan_schedule(len, &[(k, s)]).map_err(|e| format!("L={len} K={k} S={s}: {e}"))?;
                if plan.lengths != lengths || plan.paddings != pads {
                    return Err(format!("L={len} K={k} S={s}: {:?} vs oracle {lengths:?}", plan.lengths));
                }
                cases += 1;
            }
        }
    }
    let winner = parse_schedule("{ (2, 2), (5, 5), (7, 7) }").map_err(|e| e.to_string())?;
    let plan = plan_schedule(70, &winner).map_err(|e| e.to_string())?;
    if plan.lengths != [35, 7, 1] || brute_force_plan(70, &winner).0 != plan.lengths {
        return Err(format!("L=70 planned {:?}", plan.lengths));
    }
    within(Duration::from_secs(10), start, format!("{cases} single-layer cases and L=70 -> [35, 7, 1]"))
}

fn criterion_3() -> Outcome {
    let mut worst = 0.0f64;
    for (len, d, seed) in [(6usize, 3usize, 15u64), (10, 8, 16), (50, 4, 17)] {
        let mut store = ParamStore::new();
        let block = BlockParams::new(&mut store, 0, d, len, &mut rng(seed));
        for id in [block.conv_bias, block.b_g, block.ln_beta] {
            *store.value_mut(id) = Tensor::uniform(&[d], 0.5, &mut rng(seed + 100));
        }
        let plan = plan_schedule(len, &[(len, len)]).map_err(|e| e.to_string())?;
        let z = random(&[len, d], seed + 1);
        let kernel = store.value(block.kernel).clone();
        let mut dense = vec![0.0; len * d * d];
        for o in 0..d {
            for c in 0..d {
                for t in 0..len {
                    dense[(t * d + c) * d + o] = kernel.data()[(o * d + c) * len + t];
                }
            }
        }
        let opts = CdsOptions {
            no_residuals: true,
            ..CdsOptions::default()
        };
        let mut g = Graph::new(&store);
        let zv = g.input(z.clone());
        let out = cds_forward(&mut g, std::slice::from_ref(&block), &plan, zv, opts, &mut rng(0)).unwrap();
        let flat = g.input(z.reshape(vec![1, len * d]).unwrap());
        let w = g.input(Tensor::new(vec![len * d, d], dense).unwrap());
        let cb = g.param(block.conv_bias);
        let fc = g.linear(flat, w, Some(cb)).unwrap();
        let (wg, bg) = (g.param(block.w_g), g.param(block.b_g));
        let proj = g.linear(fc, wg, Some(bg)).unwrap();
        let act = g.gelu(proj);
        let (gamma, beta) = (g.param(block.ln_gamma), g.param(block.ln_beta));
        let reference = g.layer_norm(act, gamma, beta, LAYER_NORM_EPS).unwrap();
        for (a, b) in g.value(out).data().iter().zip(g.value(reference).data()) {
            worst = worst.max((a - b).abs());
        }
    }
    check(worst <= 1e-10, format!("max abs difference {worst:.2e} over L in {{6, 10, 50}}"))
}

fn criterion_4() -> Outcome {
    let ds = eval_dataset(50, 2);
    let mut r = rng(3);
    for m in 0..200u64 {
        let rows: Vec<Vec<f64>> = (0..50).map(|_| (0..101).map(|_| r.gen_range(0..20) as f64).collect()).collect();
        let report = evaluate(&MatrixScorer(rows.clone()), &ds, &test_settings(NegativeMode::Sampled(100), 5, m))
            .map_err(|e| e.to_string())?;
        let oracle = oracle_metrics(&rows, 10);
        if (report.hr_at_k, report.ndcg_at_k) != oracle {
            return Err(format!("matrix {m}: {:?} vs oracle {oracle:?}", (report.hr_at_k, report.ndcg_at_k)));
        }
    }
    let users = 2000;
    let ds = eval_dataset(users, 5);
    let report =
        evaluate(&HashScorer(9), &ds, &test_settings(NegativeMode::Sampled(100), 5, 1)).map_err(|e| e.to_string())?;
    let p = 10.0 / 101.0;
    let sigma = (p * (1.0 - p) / users as f64).sqrt();
    let z = (report.hr_at_k - p) / sigma;
    check(z.abs() < 3.0, format!("200 matrices exact; random HR@10 {:.4} vs {p:.4} ({z:+.2} sigma)", report.hr_at_k))
}

fn criterion_5() -> Outcome {
    let start = Instant::now();
    let ds = ds_of(synthetic::successor(20, 50, 15, 4, 1));
    let mut model = Model::for_dataset(ModelConfig::uniform(32, 10, vec![(2, 2), (5, 5)]), &ds, 1).unwrap();
    let train = TrainConfig {
        batch_size: 20,
        learning_rate: 1e-2,
        weight_decay: 0.0,
        max_epochs: 300,
        patience: 300,
        n_train: 20,
        n_val: 20,
        seed: 1,
    };
    let outcome = fit(&mut model, &ds, &train, |_| {}).map_err(|e| e.to_string())?;
    let report =
        evaluate(&model, &ds, &test_settings(NegativeMode::Sampled(20), 10, 1)).map_err(|e| e.to_string())?;
    if report.hr_at_k != 1.0 {
        return Err(format!("HR@10 {} after {} epochs", report.hr_at_k, outcome.log.len()));
    }
    within(Duration::from_secs(300), start, format!("HR@10 1.0, best epoch {}", outcome.best_epoch))
}

fn interval_run(seed: u64, ablations: &str) -> f64 {
    let ds = ds_of(synthetic::interval_coded(300, 12, 4, 100 + seed));
    let mut cfg = ModelConfig::uniform(32, 10, vec![(2, 2), (5, 5)]);
    cfg.ablations = Ablations::parse(ablations).unwrap();
    let mut model = Model::for_dataset(cfg, &ds, seed).unwrap();
    let train = TrainConfig {
        batch_size: 32,
        learning_rate: 3e-3,
        weight_decay: 0.0,
        max_epochs: 120,
        patience: 20,
        n_train: 40,
        n_val: 40,
        seed,
    };
    fit(&mut model, &ds, &train, |_| {}).unwrap();
    evaluate(&model, &ds, &test_settings(NegativeMode::AllItems, 10, seed)).unwrap().hr_at_k
}

fn criterion_6() -> Outcome {
    let start = Instant::now();
    let mut gaps = Vec::new();
    let mut detail = Vec::new();
    for seed in 0..3 {
        let full = interval_run(seed, "");
        let ablated = interval_run(seed, "no_intervals");
        gaps.push(full - ablated);
        detail.push(format!("seed {seed}: {full:.3} vs {ablated:.3}"));
    }
    let mean = gaps.iter().sum::<f64>() / gaps.len() as f64;
    let msg = format!("mean paired gap {:.1} HR@10 points ({})", 100.0 * mean, detail.join(", "));
    if mean < 0.10 {
        return Err(msg);
    }
    within(Duration::from_secs(600), start, msg)
}

fn criterion_7() -> Outcome {
    let lengths = [64usize, 128, 256, 512, 1024, 2048];
    let d = 64;
    let cds: Vec<(f64, f64)> = lengths
        .iter()
        .map(|&l| (l as f64, count_flops(&plan_schedule(l, &schedule_family(l)).unwrap(), d) as f64))
        .collect();
    let attn: Vec<(f64, f64)> = lengths.iter().map(|&l| (l as f64, attention_score_macs(l, d) as f64)).collect();
    let cds_slope = fit_loglog_slope(&cds).map_err(|e| e.to_string())?.slope;
    let attn_slope = fit_loglog_slope(&attn).map_err(|e| e.to_string())?.slope;
    check(cds_slope <= 1.1 && attn_slope >= 1.9, format!("CDS slope {cds_slope:.3}, attention score slope {attn_slope:.3}"))
}

fn slope(samples: &[ScalingSample], kind: EncoderKind, metric: fn(&ScalingSample) -> f64) -> Result<f64, String> {
    fit_loglog_slope(&series(samples, kind, metric)).map(|f| f.slope).map_err(|e| e.to_string())
}

fn criterion_8() -> Outcome {
    let start = Instant::now();
    let cfg = BenchConfig::default();
    let samples = measure_scaling(&cfg, |_| {}).map_err(|e| e.to_string())?;
    let mem = |s: &ScalingSample| s.peak_bytes as f64;
    let time = |s: &ScalingSample| s.wall_seconds;
    let (cm, am) = (slope(&samples, EncoderKind::Cds, mem)?, slope(&samples, EncoderKind::Attention, mem)?);
    let (ct, at) = (slope(&samples, EncoderKind::Cds, time)?, slope(&samples, EncoderKind::Attention, time)?);
    let msg = format!("memory slopes CDS {cm:.3} attention {am:.3}; time slopes CDS {ct:.3} attention {at:.3}");
    if !(cm <= 1.2 && am >= 1.7 && ct <= 1.4 && at >= 1.6) {
        return Err(msg);
    }
    within(Duration::from_secs(600), start, msg)
}

fn small_run_config(data: &std::path::Path) -> RunConfig {
    let mut cfg = RunConfig::default();
    for (k, v) in [
        ("embedding_dim", "8"),
        ("seq_len", "8"),
        ("schedule", "[[2,2],[4,4]]"),
        ("max_epochs", "4"),
        ("batch_size", "8"),
        ("n_train", "10"),
        ("n_val", "10"),
        ("protocol", "sampled:100"),
        ("seed", "11"),
    ] {
        cfg.set(k, v).unwrap();
    }
    cfg.data = Some(data.to_path_buf());
    cfg
}

fn criterion_9() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data.jsonl");
    synthetic::write_jsonl(&synthetic::random(40, 300, 5, 14, 3, 21), &data).unwrap();
    let cfg = small_run_config(&data);
    let ds = convrec::dataset::load_dataset(&cfg.data_paths().unwrap(), &cfg.dataset_options()).unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    cmd_train(&cfg, &ds, &a).map_err(|e| e.to_string())?;
    cmd_train(&cfg, &ds, &b).map_err(|e| e.to_string())?;
    for f in [CHECKPOINT_FILE, METRICS_FILE] {
        if std::fs::read(a.join(f)).unwrap() != std::fs::read(b.join(f)).unwrap() {
            return Err(format!("{f} differs between runs"));
        }
    }
    check(true, "checkpoint and metrics identical byte for byte".into())
}

fn criterion_10() -> Outcome {
    let ds = ds_of(synthetic::random(40, 300, 5, 14, 3, 22));
    let mut model = Model::for_dataset(ModelConfig::uniform(8, 8, vec![(2, 2), (4, 4)]), &ds, 3).unwrap();
    let train = TrainConfig {
        batch_size: 8,
        learning_rate: 1e-2,
        weight_decay: 0.0,
        max_epochs: 3,
        patience: 3,
        n_train: 10,
        n_val: 10,
        seed: 3,
    };
    fit(&mut model, &ds, &train, |_| {}).map_err(|e| e.to_string())?;
    let mut reports = Vec::new();
    for protocol in [NegativeMode::Sampled(100), NegativeMode::AllItems] {
        let settings = test_settings(protocol, 8, 5);
        let before = evaluate(&model, &ds, &settings).map_err(|e| e.to_string())?;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bin");
        model.save(&path).map_err(|e| e.to_string())?;
        let mut fresh = Model::for_dataset(model.config.clone(), &ds, 99).unwrap();
        fresh.load(&path).map_err(|e| e.to_string())?;
        let after = evaluate(&fresh, &ds, &settings).map_err(|e| e.to_string())?;
        if before != after {
            return Err(format!("{protocol:?}: report changed after reload"));
        }
        reports.push(format!("{protocol:?} HR@10 {:.3}", after.hr_at_k));
    }
    check(true, format!("identical reports ({})", reports.join(", ")))
}

#[test]
fn acceptance_criteria() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("gradient integrity", criterion_1),
        ("schedule arithmetic", criterion_2),
        ("single-conv equivalence", criterion_3),
        ("metric oracles", criterion_4),
        ("overfit smoke test", criterion_5),
        ("temporal signal learnability", criterion_6),
        ("analytic scaling", criterion_7),
        ("measured scaling", criterion_8),
        ("determinism", criterion_9),
        ("checkpoint round trip", criterion_10),
    ];
    let mut failed = Vec::new();
    for (i, (name, run)) in criteria.iter().enumerate() {
        let outcome = std::panic::catch_unwind(run).unwrap_or_else(|_| Err("panicked".into()));
        match outcome {
            Ok(detail) => println!("criterion {:>2} PASS {name}: {detail}", i + 1),
            Err(detail) => {
                println!("criterion {:>2} FAIL {name}: {detail}", i + 1);
                failed.push(i + 1);
            }
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
