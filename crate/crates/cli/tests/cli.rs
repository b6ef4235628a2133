use std::path::Path;
use std::process::{Command, Output};

fn casmtr(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_casmtr")).current_dir(dir).args(args).output().expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8_lossy(&out.stdout).into_owned()
}

const TINY: &str = r#"{
  "seed": 4,
  "data": {"width": 64, "height": 64},
  "model": {"encoder": {"channels": [8, 16, 16]}, "matcher": {"coarse_blocks": 2, "train_parents": 16}},
  "attention": {"heads": 2, "lw": {"window": 4, "k": 16}},
  "train": {"optimizer": {"warmup": 1}}
}"#;

#[test]
fn gen_data_is_deterministic() {
    let d = tempfile::tempdir().unwrap();
    for out in ["a", "b"] {
        ok(&casmtr(d.path(), &["gen-data", "--out", out, "--pairs", "2", "--width", "48", "--height", "48", "--seed", "9"]));
    }
    for f in ["pair_00000_a.png", "pair_00001_b.png", "pair_00001.json"] {
        assert_eq!(std::fs::read(d.path().join("a").join(f)).unwrap(), std::fs::read(d.path().join("b").join(f)).unwrap());
    }
    let truth: serde_json::Value = serde_json::from_slice(&std::fs::read(d.path().join("a/pair_00000.json")).unwrap()).unwrap();
    assert_eq!(truth["h"].as_array().unwrap().len(), 3);
}

#[test]
fn exit_codes() {
    let d = tempfile::tempdir().unwrap();
    std::fs::write(d.path().join("bad.json"), r#"{"attention": {"self_variant": "lsa", "bogus": 1}}"#).unwrap();
    assert_eq!(casmtr(d.path(), &["--config", "bad.json", "grad-check", "--op", "focal"]).status.code(), Some(2));
    assert_eq!(casmtr(d.path(), &["eval-homography", "--oracle", "--data", "missing"]).status.code(), Some(2));
    assert_eq!(casmtr(d.path(), &["match", "--image-a", "x.png"]).status.code(), Some(2));
    assert_eq!(casmtr(d.path(), &["--detector", "grid", "--grid-cell", "1", "grad-check"]).status.code(), Some(2));
    std::fs::write(d.path().join("m.ckpt"), b"garbage").unwrap();
    std::fs::write(d.path().join("m.ckpt.json"), b"{}").unwrap();
    assert_eq!(casmtr(d.path(), &["bench", "--checkpoint", "m.ckpt"]).status.code(), Some(3));
    ok(&casmtr(d.path(), &["grad-check", "--op", "focal"]));
}

#[test]
fn oracle_eval_reports() {
    let d = tempfile::tempdir().unwrap();
    ok(&casmtr(d.path(), &["gen-data", "--out", "c", "--pairs", "2", "--width", "64", "--height", "64"]));
    let table = ok(&casmtr(d.path(), &["eval-homography", "--oracle", "--data", "c", "--compare", "grid-4", "--report", "r.json", "--plots", "p"]));
    assert!(table.contains("grid-4"));
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(d.path().join("r.json")).unwrap()).unwrap();
    assert_eq!(report["rows"].as_array().unwrap().len(), 2);
    assert!(d.path().join("p/curve_homography.png").exists());
}

#[test]
fn train_match_eval_bench_round_trip() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    std::fs::write(p.join("run.json"), TINY).unwrap();
    ok(&casmtr(p, &["--config", "run.json", "gen-data", "--out", "train", "--pairs", "2"]));
    ok(&casmtr(p, &["--config", "run.json", "gen-data", "--out", "test", "--pairs", "2", "--seed", "77"]));
    for (ck, log) in [("m1.ckpt", "m1.jsonl"), ("m2.ckpt", "m2.jsonl")] {
        ok(&casmtr(
            p,
            &["--config", "run.json", "train", "--data", "train", "--eval-data", "test", "--steps", "1", "--out", ck, "--metrics", log, "--eval-every", "2"],
        ));
    }
    let (l1, l2) = (std::fs::read_to_string(p.join("m1.jsonl")).unwrap(), std::fs::read_to_string(p.join("m2.jsonl")).unwrap());
    assert_eq!(l1, l2);
    assert_eq!(l1.lines().filter(|l| l.contains("\"kind\":\"step\"")).count(), 4);
    assert_eq!(l1.lines().filter(|l| l.contains("\"kind\":\"eval\"")).count(), 2);
    assert_eq!(std::fs::read(p.join("m1.ckpt")).unwrap(), std::fs::read(p.join("m2.ckpt")).unwrap());

    let out = ok(&casmtr(
        p,
        &["match", "--checkpoint", "m1.ckpt", "--image-a", "test/pair_00000_a.png", "--image-b", "test/pair_00000_b.png", "--out", "m.jsonl", "--confidence", "c.bin", "--overlay", "o.png", "--detector", "nms"],
    ));
    assert!(out.contains("matches"));
    for line in std::fs::read_to_string(p.join("m.jsonl")).unwrap().lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        for k in ["xa", "ya", "xb", "yb", "conf", "scale"] {
            assert!(v[k].is_number(), "{k} missing in {line}");
        }
    }
    assert!(p.join("o.png").exists() && p.join("c.bin").exists());

    let e1 = ok(&casmtr(p, &["eval-homography", "--checkpoint", "m1.ckpt", "--data", "test", "--sizes", "64,96", "--report", "r.json"]));
    let e2 = ok(&casmtr(p, &["eval-homography", "--checkpoint", "m1.ckpt", "--data", "test", "--sizes", "64,96"]));
    assert_eq!(e1, e2);
    let r: serde_json::Value = serde_json::from_slice(&std::fs::read(p.join("r.json")).unwrap()).unwrap();
    let sizes: Vec<_> = r["rows"].as_array().unwrap().iter().map(|x| x["size"].as_u64().unwrap()).collect();
    assert_eq!(sizes, vec![64, 96]);

    let bench = ok(&casmtr(p, &["bench", "--checkpoint", "m1.ckpt", "--size", "64", "--scales", "8", "--runs", "5"]));
    assert!(bench.contains("encode") && bench.contains("detection") && !bench.contains("cascade"));

    ok(&casmtr(p, &["--config", "run.json", "train", "--data", "train", "--stage", "pmt", "--steps", "1", "--init", "m1.ckpt", "--out", "pmt.ckpt"]));
    let man: serde_json::Value = serde_json::from_slice(&std::fs::read(p.join("pmt.ckpt.json")).unwrap()).unwrap();
    assert_eq!(man["model"]["ladder"], true);
    assert_eq!(casmtr(p, &["--config", "run.json", "train", "--data", "train", "--stage", "pmt", "--out", "x.ckpt"]).status.code(), Some(2));
}
