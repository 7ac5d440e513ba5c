use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const SMALL: &str = "seed=3\nusers=40\nitems=30\ninteractions=600\npositive_ratio=0.4\n\
chain.cat=2:6:3\nuser_attr.age=3\ncontext.hour=4\nplanted.cat_0=2.0\nmax_behaviors=4\n";

const QUICK: &str = "epochs=2\nbatch_size=64\nk=4\nmlp=4,1\n";

fn hien(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hien"))
        .args(args)
        .env_remove("HIEN_OUT_DIR")
        .env_remove("HIEN_THREADS")
        .output()
        .expect("binary runs")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

struct Fixture {
    _dir: TempDir,
    root: PathBuf,
    data: PathBuf,
    run: PathBuf,
}

fn fixture() -> Fixture {
    let dir = TempDir::new().unwrap();
    let root = dir.path().to_path_buf();
    fs::write(root.join("gen.txt"), SMALL).unwrap();
    fs::write(root.join("train.txt"), QUICK).unwrap();
    let data = root.join("data");
    let o = hien(&["generate", "--config", p(&root.join("gen.txt")), "--out", p(&data)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let run = root.join("run");
    let o = hien(&["train", "--config", p(&root.join("train.txt")), "--data", p(&data), "--out", p(&run)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    Fixture {
        _dir: dir,
        root,
        data,
        run,
    }
}

#[test]
fn generate_writes_four_files_deterministically() {
    let dir = TempDir::new().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = hien(&["generate", "--out", p(out)]);
        assert_eq!(code(&o), 0);
    }
    for f in ["train.csv", "test.csv", "truth.json", "schema.txt"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn out_dir_comes_from_environment() {
    let dir = TempDir::new().unwrap();
    fs::write(dir.path().join("gen.txt"), SMALL).unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_hien"))
        .args(["generate", "--config", p(&dir.path().join("gen.txt"))])
        .env("HIEN_OUT_DIR", dir.path().join("env"))
        .output()
        .unwrap();
    assert_eq!(code(&o), 0);
    assert!(dir.path().join("env/train.csv").exists());
}

#[test]
fn bad_generator_config_exits_2() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("bad.txt");
    fs::write(&cfg, "chain.cat=2:6:0\n").unwrap();
    let o = hien(&["generate", "--config", p(&cfg), "--out", p(dir.path())]);
    assert_eq!(code(&o), 2);
    assert!(!String::from_utf8_lossy(&o.stderr).is_empty());
}

#[test]
fn retrain_is_identical_and_evaluate_matches() {
    let fx = fixture();
    let again = fx.root.join("again");
    let o = hien(&["train", "--config", p(&fx.root.join("train.txt")), "--data", p(&fx.data), "--out", p(&again)]);
    assert_eq!(code(&o), 0);
    let m1 = fs::read_to_string(fx.run.join("metrics.csv")).unwrap();
    assert_eq!(m1, fs::read_to_string(again.join("metrics.csv")).unwrap());
    assert_eq!(m1.lines().next().unwrap(), "epoch,train_loss,test_logloss,test_auc");
    assert_eq!(m1.lines().count(), 3);

    let o = hien(&[
        "evaluate",
        "--checkpoint",
        p(&fx.run.join("model.ckpt")),
        "--test",
        p(&fx.data.join("test.csv")),
        "--out",
        p(&fx.run),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let last: Vec<String> = m1.lines().last().unwrap().split(',').map(String::from).collect();
    let eval = fs::read_to_string(fx.run.join("eval.csv")).unwrap();
    let row: Vec<&str> = eval.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(row[0], last[3], "auc");
    assert_eq!(row[1], last[2], "logloss");
}

#[test]
fn ablation_flags_and_options_run() {
    let fx = fixture();
    let base = fx.root.join("base");
    let o = hien(&[
        "train",
        "--config",
        p(&fx.root.join("train.txt")),
        "--data",
        p(&fx.data),
        "--out",
        p(&base),
        "--no-user-agg",
        "--no-item-agg",
        "--no-user-intent",
        "--no-item-intent",
        "--epochs",
        "1",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let cfg = fs::read_to_string(base.join("config.txt")).unwrap();
    for flag in ["user_agg=false", "item_agg=false", "user_intent=false", "item_intent=false", "epochs=1"] {
        assert!(cfg.contains(flag), "{flag}");
    }
    let full = fx.root.join("hien3");
    let o = hien(&[
        "train",
        "--config",
        p(&fx.root.join("train.txt")),
        "--data",
        p(&fx.data),
        "--out",
        p(&full),
        "--layers",
        "3",
        "--aggregator",
        "cp",
        "--epochs",
        "1",
    ]);
    assert_eq!(code(&o), 0);
    assert!(fs::read_to_string(full.join("config.txt")).unwrap().contains("layers=3"));
    let o = hien(&["train", "--data", p(&fx.data), "--out", p(&full), "--aggregator", "gat"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn input_errors_exit_2() {
    let fx = fixture();
    let ckpt = fx.run.join("model.ckpt");
    let o = hien(&["train", "--data", p(&fx.root.join("missing")), "--out", p(&fx.root)]);
    assert_eq!(code(&o), 2);

    let header = fs::read_to_string(fx.data.join("test.csv")).unwrap().lines().next().unwrap().to_string();
    let empty = fx.data.join("empty.csv");
    fs::write(&empty, format!("{header}\n")).unwrap();
    let o = hien(&["evaluate", "--checkpoint", p(&ckpt), "--test", p(&empty), "--out", p(&fx.root)]);
    assert_eq!(code(&o), 2);

    let text = fs::read_to_string(fx.data.join("test.csv")).unwrap();
    let mut one_class = format!("{header}\n");
    for line in text.lines().skip(1).filter(|l| l.ends_with(",0")) {
        one_class += line;
        one_class.push('\n');
    }
    let single = fx.data.join("single.csv");
    fs::write(&single, one_class).unwrap();
    let o = hien(&["evaluate", "--checkpoint", p(&ckpt), "--test", p(&single), "--out", p(&fx.root)]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("undefined"));

    let other = fx.root.join("other_schema.txt");
    let schema = fs::read_to_string(fx.data.join("schema.txt")).unwrap().replace("user_attr age 4", "user_attr age 9");
    fs::write(&other, schema).unwrap();
    let o = hien(&[
        "evaluate",
        "--checkpoint",
        p(&ckpt),
        "--test",
        p(&fx.data.join("test.csv")),
        "--schema",
        p(&other),
        "--out",
        p(&fx.root),
    ]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("`age`"));

    let junk = fx.root.join("junk.ckpt");
    fs::write(&junk, b"not a checkpoint").unwrap();
    let o = hien(&["export-embeddings", "--checkpoint", p(&junk), "--out", p(&fx.root.join("e.csv"))]);
    assert_eq!(code(&o), 2);
}

#[test]
fn divergence_exits_3_with_checkpoint() {
    let fx = fixture();
    let cfg = fx.root.join("wild.txt");
    fs::write(&cfg, format!("{QUICK}lr=1e300\nclip_norm=0\nepochs=3\n")).unwrap();
    let out = fx.root.join("wild");
    let o = hien(&["train", "--config", p(&cfg), "--data", p(&fx.data), "--out", p(&out)]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join("model.ckpt").exists());
}

#[test]
fn intent_report_shape() {
    let fx = fixture();
    let ckpt = fx.run.join("model.ckpt");
    let test = fx.data.join("test.csv");
    let report = fx.root.join("intents.csv");
    let o = hien(&["inspect-intents", "--checkpoint", p(&ckpt), "--samples", p(&test), "--out", p(&report)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(&report).unwrap();
    let rows: Vec<Vec<&str>> = text.lines().skip(1).map(|l| l.split(',').collect()).collect();
    let n_samples = fs::read_to_string(&test).unwrap().lines().count() - 1;
    // item attrs cat_0, cat_1; user attr age
    assert_eq!(rows.len(), n_samples * 3);
    for group in rows.chunks(3) {
        let a: f64 = group.iter().filter(|r| r[2] == "item_attr").map(|r| r[4].parse::<f64>().unwrap()).sum();
        assert!((a - 1.0).abs() < 1e-9);
    }

    let json = fx.root.join("intents.json");
    let o = hien(&[
        "inspect-intents",
        "--checkpoint",
        p(&ckpt),
        "--samples",
        p(&test),
        "--out",
        p(&json),
        "--format",
        "json",
    ]);
    assert_eq!(code(&o), 0);
    let parsed: serde_json::Value = serde_json::from_str(&fs::read_to_string(&json).unwrap()).unwrap();
    assert_eq!(parsed.as_array().unwrap().len(), rows.len());

    let unknown = text_with_unknown_user(&test);
    let bad = fx.data.join("unknown.csv");
    fs::write(&bad, unknown.0).unwrap();
    let o = hien(&["inspect-intents", "--checkpoint", p(&ckpt), "--samples", p(&bad), "--out", p(&report)]);
    assert_eq!(code(&o), 0);
    let n = fs::read_to_string(&report).unwrap().lines().count() - 1;
    assert_eq!(n, (unknown.1 - 1) * 3);
}

/// Test CSV with the first sample's user replaced by an id outside the
/// vocabulary. Returns the text and the sample count.
fn text_with_unknown_user(test: &Path) -> (String, usize) {
    let text = fs::read_to_string(test).unwrap();
    let mut lines: Vec<String> = text.lines().map(String::from).collect();
    let first = lines[1].split_once(',').unwrap().1.to_string();
    lines[1] = format!("99999,{first}");
    (lines.join("\n") + "\n", lines.len() - 1)
}

#[test]
fn graph_dump_and_embedding_export() {
    let fx = fixture();
    let g = fx.root.join("graph.json");
    let o = hien(&["dump-graph", "--data", p(&fx.data), "--out", p(&g)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let doc: serde_json::Value = serde_json::from_str(&fs::read_to_string(&g).unwrap()).unwrap();
    assert!(!doc["item_forest"]["edges"].as_array().unwrap().is_empty());
    assert!(doc["bipartite"]["edges"].as_array().unwrap().len() > 10);

    let e = fx.root.join("emb.csv");
    let o = hien(&["export-embeddings", "--checkpoint", p(&fx.run.join("model.ckpt")), "--out", p(&e)]);
    assert_eq!(code(&o), 0);
    let text = fs::read_to_string(&e).unwrap();
    assert_eq!(text.lines().next().unwrap(), "table,row,e0,e1,e2,e3");
    assert!(text.lines().any(|l| l.starts_with("item_id,1,")));
    assert!(text.lines().any(|l| l.starts_with("cat_1,")));
}
