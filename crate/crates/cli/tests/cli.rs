use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn tablelab(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tablelab"))
        .args(args)
        .arg("--out")
        .arg(out)
        .env("RUST_LOG", "warn")
        .env_remove("TABLELAB_OUT")
        .env_remove("TABLELAB_THREADS")
        .output()
        .expect("spawn tablelab")
}

fn smoke_config(dir: &Path) -> String {
    let p = dir.join("smoke.json");
    fs::write(&p, tablelab::pipeline::RunConfig::smoke().to_json()).unwrap();
    p.display().to_string()
}

#[test]
fn report_without_analyses_exits_3() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = smoke_config(tmp.path());
    let run = tmp.path().join("run");
    assert!(tablelab(&["gen", "--config", &cfg], &run).status.success());
    let out = tablelab(&["report", "--config", &cfg], &run);
    assert_eq!(out.status.code(), Some(3));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("eval"), "{err}");
}

#[test]
fn stage_without_data_exits_3() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = smoke_config(tmp.path());
    let out = tablelab(&["train", "--config", &cfg], &tmp.path().join("empty"));
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn bad_config_exits_2_and_names_field() {
    let tmp = tempfile::tempdir().unwrap();
    let p = tmp.path().join("bad.json");
    let mut cfg = tablelab::pipeline::RunConfig::smoke();
    cfg.train.lr = -1.0;
    fs::write(&p, cfg.to_json()).unwrap();
    let out = tablelab(&["gen", "--config", p.to_str().unwrap()], &tmp.path().join("run"));
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("lr"), "{err}");
}

#[test]
fn gen_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = smoke_config(tmp.path());
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for dir in [&a, &b] {
        let out = tablelab(&["gen", "--config", &cfg], dir);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    for f in ["pool.json", "demo.json", "vocab.json", "train.jsonl", "heldout.jsonl"] {
        assert_eq!(fs::read(a.join("data").join(f)).unwrap(), fs::read(b.join("data").join(f)).unwrap(), "{f}");
    }
}
