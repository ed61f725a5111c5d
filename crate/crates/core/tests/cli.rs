mod common;

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use convrec::cli::{ablation_variants, split_sweep_values, summarize_checkpoint, SweepAxis};
use convrec::config::{parse_schedule, RunConfig};
use convrec::dataset::{synthetic, NegativeMode};
use convrec::model::{Ablations, DataShape, Model};
use convrec::numerics::checkpoint;

const TINY: [&str; 9] = [
    "embedding_dim=8",
    "seq_len=6",
    "schedule=[[2,2],[3,3]]",
    "max_epochs=3",
    "batch_size=8",
    "n_train=5",
    "n_val=5",
    "protocol=sampled:20",
    "learning_rate=0.005",
];

fn convrec(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_convrec"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn tiny_args<'a>(cmd: &'a str, out: &'a str, data: &'a str) -> Vec<&'a str> {
    let mut v = vec![cmd, "--out", out, "--data", data];
    for s in TINY {
        v.push("--set");
        v.push(s);
    }
    v
}

fn data_file(dir: &Path) -> PathBuf {
    let path = dir.join("data.jsonl");
    synthetic::write_jsonl(&synthetic::random(25, 60, 4, 12, 3, 5), &path).unwrap();
    path
}

fn read(path: PathBuf) -> String {
    std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn presets_carry_dataset_hyperparameters() {
    let b = RunConfig::preset("beauty").unwrap();
    assert_eq!(b.model.seq_len, 70);
    assert_eq!(b.train.learning_rate, 0.00004);
    assert_eq!(b.model.dropout, 0.45);
    assert_eq!(b.train.weight_decay, 0.2);
    assert_eq!(b.model.schedule, [(2, 2), (5, 5), (7, 7)]);
    assert_eq!((b.train.batch_size, b.model.d_v, b.train.max_epochs), (128, 256, 1000));
    let g = RunConfig::preset("games").unwrap();
    assert_eq!((g.model.seq_len, g.train.learning_rate, g.model.dropout, g.train.weight_decay), (50, 0.0001, 0.35, 0.1));
    let f = RunConfig::preset("fashion").unwrap();
    assert_eq!((f.model.seq_len, f.train.learning_rate), (50, 0.00005));
    let m = RunConfig::preset("men").unwrap();
    assert_eq!((m.model.seq_len, m.train.learning_rate), (30, 0.0001));
    assert!(RunConfig::preset("books").is_err());
}

#[test]
fn missing_data_is_a_usage_error_naming_the_flag() {
    let dir = tempfile::tempdir().unwrap();
    let out = convrec(&["train", "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--data"));
}

#[test]
fn invalid_values_name_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let out = convrec(&["train", "--out", s(dir.path()), "--set", "dropout=1.5", "--data", "x.jsonl"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("dropout"));
    let out = convrec(&["train", "--out", s(dir.path()), "--set", "batch_sise=3"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("batch_sise"));
    let out = convrec(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_file_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = convrec(&tiny_args("train", s(dir.path()), "/nonexistent/data.jsonl"));
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn train_then_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let data = data_file(dir.path());
    let run = dir.path().join("run");
    let out = convrec(&tiny_args("train", s(&run), s(&data)));
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["checkpoint.bin", "resolved_config.conf", "train_log.csv", "metrics.csv", "ranks.jsonl", "manifest.json"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let manifest: serde_json::Value = serde_json::from_str(&read(run.join("manifest.json"))).unwrap();
    assert_eq!(manifest["command"], "train");
    assert_eq!(manifest["files"].as_array().unwrap().len(), 5);
    let log = read(run.join("train_log.csv"));
    assert!(log.starts_with("epoch,mean_loss,val_hr10,val_ndcg10,seconds,peak_bytes\n"));
    assert_eq!(log.lines().count(), 4);

    // Sampled protocol with the resolved config found next to the checkpoint.
    let ev = dir.path().join("eval");
    let ckpt = run.join("checkpoint.bin");
    let out = convrec(&["evaluate", "--checkpoint", s(&ckpt), "--out", s(&ev), "--protocol", "sampled:100"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let metrics = read(ev.join("metrics.csv"));
    let header = metrics.lines().next().unwrap();
    assert_eq!(header, "group,protocol,hr@10,ndcg@10,users,excluded_users");
    assert!(metrics.lines().nth(1).unwrap().starts_with("all,sampled:100,"));
    assert!(ev.join("ranks.jsonl").exists());

    let out = convrec(&["evaluate", "--checkpoint", s(&ckpt), "--out", s(&ev), "--protocol", "all_items", "--groups", "top_bottom:0.2"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let metrics = read(ev.join("metrics.csv"));
    let groups: Vec<&str> = metrics.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(groups, ["all", "top", "bottom"]);
    assert!(metrics.lines().nth(1).unwrap().starts_with("all,all_items,"));

    // A checkpoint built for different widths is rejected.
    let out = convrec(&["evaluate", "--checkpoint", s(&ckpt), "--out", s(&ev), "--set", "embedding_dim=4"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("checkpoint"));
    let out = convrec(&["evaluate", "--checkpoint", s(&ckpt), "--out", s(&ev), "--set", "seq_len=8"]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn identical_invocations_give_identical_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let data = data_file(dir.path());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for run in [&a, &b] {
        let mut args = tiny_args("train", s(run), s(&data));
        args.extend(["--seed", "17"]);
        assert!(convrec(&args).status.success());
    }
    for f in ["checkpoint.bin", "metrics.csv", "ranks.jsonl", "resolved_config.conf", "manifest.json"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    let strip_timing = |p: PathBuf| read(p).lines().map(|l| l.split(',').take(4).collect::<Vec<_>>().join(",")).collect::<Vec<_>>();
    assert_eq!(strip_timing(a.join("train_log.csv")), strip_timing(b.join("train_log.csv")));

    // Replaying the resolved config reproduces the metrics.
    let replay = dir.path().join("replay");
    let conf = a.join("resolved_config.conf");
    assert!(convrec(&["train", "--config", s(&conf), "--out", s(&replay)]).status.success());
    assert_eq!(read(a.join("metrics.csv")), read(replay.join("metrics.csv")));
    assert_eq!(std::fs::read(a.join("checkpoint.bin")).unwrap(), std::fs::read(replay.join("checkpoint.bin")).unwrap());
}

#[test]
fn flags_override_set_which_overrides_files() {
    let dir = tempfile::tempdir().unwrap();
    let conf = dir.path().join("c.conf");
    std::fs::write(&conf, "seed = 5\nseq_len = 20 # comment\nlearning_rate = 0.5\n").unwrap();
    let cli = <convrec::cli::Cli as clap::Parser>::try_parse_from([
        "convrec", "--preset", "men", "--config", s(&conf), "--set", "seed=6", "--set", "learning_rate=0.25", "--seed", "7", "bench",
    ])
    .unwrap();
    let cfg = convrec::cli::resolve_config(&cli, None, None).unwrap();
    assert_eq!(cfg.seed(), 7);
    assert_eq!(cfg.model.seq_len, 20);
    assert_eq!(cfg.train.learning_rate, 0.25);
    assert_eq!(cfg.model.dropout, 0.3);
}

#[test]
fn ablation_rows_follow_table_order() {
    let all = Ablations::parse_names("avgpool_only,single_conv,no_residuals,no_intervals").unwrap();
    assert!(Ablations::parse_names("no_gates").is_err());
    let rows = ablation_variants(&Ablations::default(), &all).unwrap();
    let labels: Vec<&str> = rows.iter().map(|(l, _)| l.as_str()).collect();
    assert_eq!(labels, ["w/o Intervals", "w/o Residuals", "w/ one Conv", "w/ AvgPool", "ConvRec"]);
    assert_eq!(rows[4].1, Ablations::default());
    let base = Ablations::parse("single_conv").unwrap();
    assert!(ablation_variants(&base, &["avgpool_only"]).is_err());
}

#[test]
fn ablate_and_sweep_commands() {
    let dir = tempfile::tempdir().unwrap();
    let data = data_file(dir.path());
    let ab = dir.path().join("ablate");
    let out = convrec(&tiny_args("ablate", s(&ab), s(&data)));
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let table = read(ab.join("ablation.csv"));
    let labels: Vec<&str> = table.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(labels, ["w/o Intervals", "w/o Residuals", "w/ one Conv", "w/ AvgPool", "ConvRec"]);
    assert_eq!(table.lines().next().unwrap(), "variant,hr@10,ndcg@10");

    // The base row equals a plain training run with the same seed.
    let tr = dir.path().join("train");
    assert!(convrec(&tiny_args("train", s(&tr), s(&data))).status.success());
    let hr = read(tr.join("metrics.csv")).lines().nth(1).unwrap().split(',').nth(2).unwrap().parse::<f64>().unwrap();
    let base_hr = table.lines().last().unwrap().split(',').nth(1).unwrap().parse::<f64>().unwrap();
    assert!((hr - base_hr).abs() < 1e-6);

    let sw = dir.path().join("sweep");
    let joined = common::KERNEL_SCHEDULES.join(";");
    let mut args = tiny_args("sweep", s(&sw), s(&data));
    args.extend(["--axis", "kernel_schedule", "--values", &joined]);
    let out = convrec(&args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = read(sw.join("sweep.csv"));
    assert_eq!(csv.lines().count(), 9);
    assert!(csv.lines().nth(1).unwrap().starts_with("\"{ (2, 2), (5, 5), (7, 7) }\","));

    let mut args = tiny_args("sweep", s(&sw), s(&data));
    args.extend(["--axis", "embedding", "--values", ""]);
    assert_eq!(convrec(&args).status.code(), Some(2));
}

#[test]
fn sweep_value_lists() {
    let v = split_sweep_values(SweepAxis::Embedding, &["[32,64,128,256,512]".into()]).unwrap();
    assert_eq!(v, ["32", "64", "128", "256", "512"]);
    let v = split_sweep_values(SweepAxis::SeqLength, &["10,20,30,40".into(), "50,100,200,300".into()]).unwrap();
    assert_eq!(v.len(), 8);
    let v = split_sweep_values(SweepAxis::KernelSchedule, &[common::KERNEL_SCHEDULES.join("; ")]).unwrap();
    assert_eq!(v.len(), 8);
    for text in &v {
        parse_schedule(text).unwrap();
    }
    assert!(matches!(split_sweep_values(SweepAxis::Dropout, &[]), Err(convrec::Error::Config(_))));
}

fn beauty_model() -> Model {
    let cfg = RunConfig::preset("beauty").unwrap();
    let shape = DataShape {
        attr_width: 4,
        context_width: 3,
        table_rows: 12,
    };
    Model::new(cfg.model, shape, 1).unwrap()
}

#[test]
fn inspect_fresh_beauty_model() {
    let model = beauty_model();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.bin");
    model.save(&path).unwrap();
    let summary = summarize_checkpoint(&checkpoint::read(&path).unwrap());
    let alphas: Vec<&str> = summary.lines().filter(|l| l.contains(".alpha") && l.contains(" = ")).collect();
    assert_eq!(alphas.len(), 6);
    assert!(alphas.iter().all(|l| l.ends_with("= 0.5")), "{alphas:?}");
    assert!(summary.contains("seq_len: 70, schedule: [[2,2],[5,5],[7,7]]"));

    let d = 256usize;
    let encoder = 4 * d + d + 3 * d + d + 2 * d * d + d + 12 * d + 2 * d * d + d + 2 * (d + 3) + (d + 3) * d + d;
    let blocks: usize = [2usize, 5, 7].iter().map(|k| d * d * k + d + d * d + d + 2 * d + 2).sum();
    assert!(summary.contains(&format!("parameters: {}\n", encoder + blocks)));
    assert_eq!(model.param_count(), encoder + blocks);

    // Round trip through the command.
    let out = convrec(&["inspect", "--checkpoint", s(&path), "--out", s(&dir.path().join("i"))]);
    assert!(out.status.success());
    assert_eq!(String::from_utf8_lossy(&out.stdout), summary);
    assert_eq!(read(dir.path().join("i").join("inspect.txt")), summary);
}

#[test]
fn corrupt_checkpoint_reports_offset() {
    let model = beauty_model();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.bin");
    let bytes = model.checkpoint_bytes();
    std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
    let out = convrec(&["inspect", "--checkpoint", s(&path), "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("at byte"));
}

#[test]
fn negative_modes_parse() {
    assert_eq!(NegativeMode::parse("sampled:100").unwrap(), NegativeMode::Sampled(100));
    assert_eq!(NegativeMode::parse("all_items").unwrap(), NegativeMode::AllItems);
    assert!(NegativeMode::parse("some").is_err());
}
