use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rand::SeedableRng;
use rlt::checkpoint::Checkpoint;
use rlt::config::{ModelConfig, TrainConfig};
use rlt::container::Container;
use rlt::lora::Branch;
use rlt::trainer::sample_with;
use rlt::{vocab, Rng, Tensor};
use tempfile::TempDir;

const SMALL: [&str; 6] = ["--model.layers", "1", "--model.d_model", "32", "--train.rank", "4"];

fn rlt(args: &[&str]) -> Output {
    rlt_env(args, &[])
}

fn rlt_env(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_rlt"));
    cmd.args(args).env_remove("RLT_SEED").env("RUST_LOG", "warn");
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn ok(out: Output) -> Output {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).unwrap() {
        let path = e.unwrap().path();
        if path.is_dir() {
            out.extend(tree(&path));
        } else {
            out.push((path.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&path).unwrap()));
        }
    }
    out.sort();
    out
}

fn datagen(dir: &Path, relation: &str, count: &str, seed: &str) {
    ok(rlt(&["datagen", "--out", p(dir), "--relation", relation, "--count", count, "--seed", seed]));
}

#[test]
fn datagen_is_deterministic() {
    let tmp = TempDir::new().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    datagen(&a, "approach", "20", "1");
    datagen(&b, "approach", "20", "1");
    let ta = tree(&a);
    assert_eq!(ta.len(), 60);
    assert_eq!(ta, tree(&b));
    assert_eq!(rlt::datagen::read_dataset::<f64>(&a).unwrap().len(), 20);

    let c = tmp.path().join("c");
    ok(rlt_env(&["datagen", "--out", p(&c), "--relation", "approach", "--count", "20"], &[("RLT_SEED", "1")]));
    assert_eq!(ta, tree(&c));
}

#[test]
fn datagen_rejects_unknown_relation() {
    let tmp = TempDir::new().unwrap();
    let out = rlt(&["datagen", "--out", p(tmp.path()), "--relation", "flying"]);
    assert_eq!(code(&out), 2);
    let msg = stderr(&out);
    for name in ["approach", "separate", "orbit", "follow", "collide"] {
        assert!(msg.contains(name), "{msg}");
    }
    assert_eq!(code(&rlt(&["datagen", "--relation", "approach"])), 2);
}

#[test]
fn datagen_shape_subset() {
    let tmp = TempDir::new().unwrap();
    ok(rlt(&["datagen", "--out", p(tmp.path()), "--relation", "orbit", "--count", "6", "--shapes", "circle,square"]));
    for e in rlt::datagen::read_dataset::<f64>(tmp.path()).unwrap() {
        let words = vocab::decode(&e.prompt).unwrap();
        assert!(!words.contains("triangle") && !words.contains("cross"), "{words}");
    }
}

fn train_args<'a>(data: &'a Path, out: &'a Path, iters: &'a str) -> Vec<&'a str> {
    let mut v = vec!["train", "--data", p(data), "--out", p(out), "--iters", iters];
    v.extend(SMALL);
    v
}

#[test]
fn train_zero_iterations_is_initialization() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    datagen(&data, "approach", "2", "0");
    let ckpt = tmp.path().join("c.ntv");
    ok(rlt(&train_args(&data, &ckpt, "0")));
    let got = Checkpoint::<f64>::load(&ckpt).unwrap();
    let model = ModelConfig { layers: 1, d_model: 32, ..ModelConfig::default() };
    let train = TrainConfig { rank: 4, iterations: 0, ..TrainConfig::default() };
    let init = Checkpoint::<f64>::init(model, train).unwrap();
    assert_eq!(got.base, init.base);
    assert_eq!(got.iteration, 0);
    assert!(got.optimizer.slots().next().is_none());
    for set in rlt::lora::LoraSet::ALL {
        assert_eq!(got.triplet.set(set), init.triplet.set(set));
    }
    let csv = fs::read_to_string(ckpt.with_extension("metrics.csv")).unwrap();
    assert_eq!(csv, "iter,choice,l_rec,l_rcl,l_total\n");
}

#[test]
fn train_metrics_are_consistent_and_repeatable() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    datagen(&data, "approach", "3", "0");
    let (c1, c2) = (tmp.path().join("c1.ntv"), tmp.path().join("c2.ntv"));
    for c in [&c1, &c2] {
        let mut args = train_args(&data, c, "8");
        args.extend(["--train.seed", "4", "--train.lambda_rcl", "0.5", "--train.bank_capacity", "64"]);
        ok(rlt(&args));
    }
    let (m1, m2) = (fs::read_to_string(c1.with_extension("metrics.csv")).unwrap(), fs::read_to_string(c2.with_extension("metrics.csv")).unwrap());
    assert_eq!(m1, m2);
    assert_eq!(fs::read(&c1).unwrap(), fs::read(&c2).unwrap());
    let mut lines = m1.lines();
    assert_eq!(lines.next(), Some("iter,choice,l_rec,l_rcl,l_total"));
    let rows: Vec<Vec<String>> = lines.map(|l| l.split(',').map(String::from).collect()).collect();
    assert_eq!(rows.len(), 8);
    for r in &rows {
        let v = |i: usize| r[i].parse::<f64>().unwrap();
        assert!((v(4) - (v(2) + 0.5 * v(3))).abs() < 1e-9, "{r:?}");
        assert!(["relation", "subject1", "subject2"].contains(&r[1].as_str()));
    }
}

#[test]
fn train_config_file_and_schema_errors() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    datagen(&data, "approach", "2", "0");
    let cfg = tmp.path().join("run.json");
    fs::write(&cfg, r#"{"model": {"layers": 1, "d_model": 32}, "train": {"rank": 4, "iterations": 2}}"#).unwrap();
    let ckpt = tmp.path().join("c.ntv");
    ok(rlt(&["train", "--data", p(&data), "--out", p(&ckpt), "--config", p(&cfg)]));
    assert_eq!(Checkpoint::<f64>::load(&ckpt).unwrap().iteration, 2);

    fs::write(&cfg, r#"{"train": {"learning_rate": 0.1}}"#).unwrap();
    let out = rlt(&["train", "--data", p(&data), "--out", p(&ckpt), "--config", p(&cfg)]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("learning_rate"), "{}", stderr(&out));

    let out = rlt(&["train", "--data", p(&data), "--out", p(&ckpt), "--train.lr", "-1"]);
    assert_eq!(code(&out), 2);
    let out = rlt(&["train", "--data", p(&tmp.path().join("missing")), "--out", p(&ckpt)]);
    assert_eq!(code(&out), 3, "{}", stderr(&out));
}

#[test]
fn train_aborts_on_divergence() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    datagen(&data, "approach", "2", "0");
    let ckpt = tmp.path().join("c.ntv");
    let mut args = train_args(&data, &ckpt, "40");
    args.extend(["--train.lr", "1e300", "--train.weight_decay", "0"]);
    let out = rlt(&args);
    assert_eq!(code(&out), 4, "{}", stderr(&out));
}

fn small_checkpoint(dir: &Path) -> PathBuf {
    let data = dir.join("data");
    datagen(&data, "approach", "2", "0");
    let ckpt = dir.join("c.ntv");
    ok(rlt(&train_args(&data, &ckpt, "3")));
    ckpt
}

fn read_video(path: &Path) -> Tensor {
    Container::<f64>::read(path).unwrap().tensor("video").unwrap().clone()
}

#[test]
fn infer_guidance_and_determinism() {
    let tmp = TempDir::new().unwrap();
    let ckpt = small_checkpoint(tmp.path());
    let help = String::from_utf8_lossy(&ok(rlt(&["infer", "--help"])).stdout).into_owned();
    assert!(help.contains("[default: 6]"), "{help}");

    let run = |name: &str, scale: &str| {
        let out = tmp.path().join(name);
        ok(rlt(&["infer", "--ckpt", p(&ckpt), "--prompt", "cross approach circle", "--steps", "4", "--cfg-scale", scale, "--seed", "3", "--out", p(&out)]));
        out
    };
    let (a, b) = (run("a.ntv", "6"), run("b.ntv", "6"));
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    assert_eq!(read_video(&a).shape(), &[8, 32, 32, 1]);

    let zero = read_video(&run("z.ntv", "0"));
    let c = Checkpoint::<f64>::load(&ckpt).unwrap();
    let view = c.triplet.inference_view();
    let null = sample_with(&c.denoiser().unwrap(), Some(&view), &vocab::null_prompt(), 4, 1.0, &mut Rng::seed_from_u64(3)).unwrap();
    assert_eq!(zero, null);

    let out = rlt(&["infer", "--ckpt", p(&ckpt), "--prompt", "cross dances circle", "--out", p(&tmp.path().join("x.ntv"))]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("dances") && stderr(&out).contains("orbit"));
}

#[test]
fn analyze_subspace() {
    let tmp = TempDir::new().unwrap();
    let mut c = Checkpoint::<f64>::init(ModelConfig::default(), TrainConfig::default()).unwrap();
    let fresh = tmp.path().join("fresh.ntv");
    c.save(&fresh).unwrap();
    let csv = String::from_utf8(ok(rlt(&["analyze", "subspace", "--ckpt", p(&fresh), "--rank", "8"])).stdout).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("layer,branch,pair,rank,similarity"));
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 2 * 2 * 3 + 3);
    for r in &rows {
        let s: f64 = r[4].parse().unwrap();
        assert!((s - 0.125).abs() < 0.05, "{r:?}");
    }

    let q = c.base.blocks[0].branch(Branch::Text).q.clone();
    c.base.blocks[0].branch_mut(Branch::Text).k = q;
    let copied = tmp.path().join("copied.ntv");
    c.save(&copied).unwrap();
    let out_csv = tmp.path().join("s.csv");
    ok(rlt(&["analyze", "subspace", "--ckpt", p(&copied), "--out", p(&out_csv)]));
    let text = fs::read_to_string(&out_csv).unwrap();
    let qk: f64 = text.lines().find(|l| l.starts_with("0,text,QK,8,")).unwrap().rsplit(',').next().unwrap().parse().unwrap();
    assert!((qk - 1.0).abs() < 1e-9);

    assert_eq!(code(&rlt(&["analyze", "subspace", "--ckpt", p(&fresh), "--rank", "65"])), 2);
    assert_eq!(code(&rlt(&["analyze", "subspace", "--ckpt", p(&tmp.path().join("none.ntv"))])), 3);
}

#[test]
fn analyze_maps() {
    let tmp = TempDir::new().unwrap();
    let ckpt = small_checkpoint(tmp.path());
    let base = ["--ckpt", p(&ckpt), "--prompt", "circle approach square", "--seed", "1"];
    let mut args = vec!["analyze", "attnmap", "--token", "approach"];
    args.extend(base);
    let csv = String::from_utf8(ok(rlt(&args)).stdout).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("frame,row,col,value"));
    let values: Vec<f64> = lines.map(|l| l.rsplit(',').next().unwrap().parse().unwrap()).collect();
    assert_eq!(values.len(), 4 * 8 * 8);
    assert!(values.iter().all(|&v| v >= 0.0));

    let mut args = vec!["analyze", "attnmap", "--token", "orbit"];
    args.extend(base);
    assert_eq!(code(&rlt(&args)), 2);

    let mut args = vec!["analyze", "featmap", "--which", "k"];
    args.extend(base);
    let csv = String::from_utf8(ok(rlt(&args)).stdout).unwrap();
    assert!(csv.starts_with("frame,row,col,value\n"));
    assert_eq!(csv.lines().count(), 1 + 8 * 8);
}

fn flat_videos(dataset: &Path, into: &Path, tag: &str) {
    fs::create_dir_all(into).unwrap();
    for (i, e) in rlt::datagen::read_dataset::<f64>(dataset).unwrap().into_iter().enumerate() {
        let mut c = Container::new();
        c.push_tensor("video", e.video);
        c.write(&into.join(format!("{tag}{i}.ntv"))).unwrap();
    }
}

fn eval(dir: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["eval", "--videos", p(dir)];
    args.extend(extra);
    rlt(&args)
}

#[test]
fn eval_metrics() {
    let tmp = TempDir::new().unwrap();
    let (approach, separate) = (tmp.path().join("a"), tmp.path().join("s"));
    datagen(&approach, "approach", "3", "2");
    datagen(&separate, "separate", "1", "2");
    let videos = tmp.path().join("videos");
    flat_videos(&approach, &videos, "a");
    let value = |out: Output| String::from_utf8(ok(out).stdout).unwrap().trim().parse::<f64>().unwrap();
    assert_eq!(value(eval(&videos, &["--metric", "relation-accuracy", "--expected", "approach"])), 1.0);
    flat_videos(&separate, &videos, "s");
    assert_eq!(value(eval(&videos, &["--metric", "relation-accuracy", "--expected", "approach"])), 0.75);

    let still = tmp.path().join("still");
    fs::create_dir_all(&still).unwrap();
    let frame = Tensor::from_fn(&[32, 32, 1], |i| (i % 7) as f64 / 7.0);
    let video = Tensor::from_fn(&[8, 32, 32, 1], |i| frame.data()[i % 1024]);
    let mut c = Container::new();
    c.push_tensor("video", video);
    c.write(&still.join("v.ntv")).unwrap();
    assert_eq!(value(eval(&still, &["--metric", "temporal-consistency"])), 1.0);

    let empty = tmp.path().join("empty");
    fs::create_dir_all(&empty).unwrap();
    assert_eq!(code(&eval(&empty, &["--metric", "temporal-consistency"])), 2);
    assert_eq!(code(&eval(&videos, &["--metric", "relation-accuracy"])), 2);
}
