use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use scfreg_core::embeddings::{load_embeddings, one_hot_embeddings, write_embedding_files, EmbeddingSidecar};
use scfreg_core::nn::BackboneConfig;
use scfreg_core::scf::{ModelConfig, ScfModel};
use scfreg_core::tensorio::{read_tensor, Tensor};

fn scfreg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_scfreg"))
        .args(args)
        .env_remove("SCFREG_SEED")
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = scfreg(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn small_dataset(dir: &Path, regions: &str) -> PathBuf {
    let d = dir.join(format!("data_{regions}"));
    ok(&["synth", "--shape", "32x32", "--regions", regions, "--pairs", "3", "--seed", "1", "--out", s(&d)]);
    d
}

/// Every file under `dir` except run manifests (they carry wall-clock time).
fn snapshot(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if !p.to_string_lossy().ends_with("run.json") {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn usage_errors_exit_two() {
    let t = tempfile::tempdir().unwrap();
    let out = scfreg(&["synth", "--regions", "4", "--out", s(t.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--shape"));
    assert_eq!(scfreg(&["synth", "--shape", "64", "--out", "x"]).status.code(), Some(2));
    assert_eq!(scfreg(&["train", "--data", "d", "--out", "o"]).status.code(), Some(2));
    assert_eq!(
        scfreg(&["train", "--data", "d", "--one-hot", "--embeddings", "e", "--out", "o"]).status.code(),
        Some(2)
    );
}

#[test]
fn runtime_errors_exit_one() {
    let t = tempfile::tempdir().unwrap();
    let missing = t.path().join("nope");
    let out = scfreg(&["train", "--data", s(&missing), "--one-hot", "--out", s(t.path())]);
    assert_eq!(out.status.code(), Some(1));
    assert!(out.stdout.is_empty());
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));
}

#[test]
fn synth_is_byte_reproducible_and_honours_env_seed() {
    let t = tempfile::tempdir().unwrap();
    let (a, b) = (t.path().join("a"), t.path().join("b"));
    for d in [&a, &b] {
        ok(&["synth", "--shape", "64x64", "--regions", "4", "--pairs", "10", "--seed", "1", "--out", s(d)]);
    }
    let snap = snapshot(&a);
    assert_eq!(snap.iter().filter(|(p, _)| p.ends_with("im_m.scft")).count(), 10);
    assert_eq!(snap, snapshot(&b));
    assert!(a.join("run.json").is_file());

    let c = t.path().join("c");
    let out = Command::new(env!("CARGO_BIN_EXE_scfreg"))
        .args(["synth", "--shape", "64x64", "--pairs", "10", "--out", s(&c)])
        .env("SCFREG_SEED", "1")
        .output()
        .unwrap();
    assert!(out.status.success());
    assert_eq!(snapshot(&c), snap);
}

#[test]
fn train_writes_checkpoint_and_history() {
    let t = tempfile::tempdir().unwrap();
    let data = small_dataset(t.path(), "2");
    for lambda in ["0.1", "0"] {
        let out = t.path().join(format!("run_{lambda}"));
        ok(&[
            "train", "--data", s(&data), "--one-hot", "--epochs", "2", "--ns", "4", "--levels", "2", "--c2",
            "8", "--cphi", "16", "--lambda", lambda, "--val-pairs", "1", "--seed", "1", "--out", s(&out),
        ]);
        assert!(out.join("checkpoint/model.json").is_file());
        let history = fs::read_to_string(out.join("history.csv")).unwrap();
        assert_eq!(history.lines().count(), 3);
        assert!(history.starts_with("epoch,lr,sim,dice,reg,total,val_dice"));
        let manifest: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(out.join("run.json")).unwrap()).unwrap();
        assert_eq!(manifest["command"], "train");
        assert!(manifest["wall_clock_s"].as_f64().unwrap() >= 0.0);
    }
}

#[test]
fn train_rejects_embedding_label_mismatch() {
    let t = tempfile::tempdir().unwrap();
    let data = small_dataset(t.path(), "4"); // N = 5
    let raw = Tensor::from_f64(vec![2, 4], vec![1., 0., 0., 0., 0., 1., 0., 0.]).unwrap();
    let emb = t.path().join("emb");
    let sidecar = EmbeddingSidecar {
        labels: vec!["liver".into(), "spleen".into()],
        prompt_template: "a photo of a [CLS].".into(),
        encoder: "test".into(),
        has_background_row: false,
    };
    write_embedding_files(&emb, &raw, &sidecar).unwrap(); // N = 3 after prepare
    let out = scfreg(&[
        "train", "--data", s(&data), "--embeddings", s(&emb), "--epochs", "1", "--out", s(&t.path().join("o")),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("label count mismatch"));
}

fn zero_checkpoint(dir: &Path, n_labels: usize) -> PathBuf {
    let cfg = ModelConfig {
        backbone: BackboneConfig {
            start_channels: 4,
            levels: 2,
            out_channels: 8,
            ..Default::default()
        },
        mlp_hidden: 16,
        ..Default::default()
    };
    let ckpt = dir.join("ckpt");
    ScfModel::new(cfg, one_hot_embeddings(n_labels).unwrap(), 0).unwrap().save(&ckpt).unwrap();
    ckpt
}

#[test]
fn register_then_eval_identity() {
    let t = tempfile::tempdir().unwrap();
    let data = small_dataset(t.path(), "2");
    let ckpt = zero_checkpoint(t.path(), 3);
    let pair = data.join("pair_0000");
    let out = t.path().join("reg");
    ok(&[
        "register", "--ckpt", s(&ckpt), "--moving", s(&pair.join("im_m.scft")), "--fixed",
        s(&pair.join("im_f.scft")), "--fixed-seg", s(&pair.join("seg_f.scft")), "--moving-seg",
        s(&pair.join("seg_m.scft")), "--out", s(&out),
    ]);
    let u = read_tensor(out.join("u.scft")).unwrap();
    assert_eq!(u.shape(), &[2, 32, 32]);
    assert!(u.as_f64().unwrap().iter().all(|&x| x == 0.0));
    assert_eq!(
        read_tensor(out.join("warped.scft")).unwrap(),
        read_tensor(pair.join("im_m.scft")).unwrap()
    );
    assert_eq!(
        read_tensor(out.join("warped_seg.scft")).unwrap(),
        read_tensor(pair.join("seg_m.scft")).unwrap()
    );

    let seg = pair.join("seg_f.scft");
    let report_path = t.path().join("report.json");
    ok(&[
        "eval", "--field", s(&out.join("u.scft")), "--fixed-seg", s(&seg), "--moving-seg", s(&seg), "--out",
        s(&report_path),
    ]);
    let r: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report_path).unwrap()).unwrap();
    let mut keys: Vec<&str> = r.as_object().unwrap().keys().map(String::as_str).collect();
    keys.sort();
    assert_eq!(
        keys,
        ["dice_mean", "dice_per_label", "folding_fraction", "hd95_mean", "hd95_per_label", "sdlogj"]
    );
    assert_eq!(r["dice_mean"], 1.0);
    assert_eq!(r["hd95_mean"], 0.0);
    assert_eq!(r["sdlogj"], 0.0);
    assert_eq!(r["folding_fraction"], 0.0);
    assert!(t.path().join("report.json.run.json").is_file());
}

#[test]
fn eval_spacing_scales_hd95() {
    let t = tempfile::tempdir().unwrap();
    let data = small_dataset(t.path(), "2");
    let pair = data.join("pair_0001");
    let zero = t.path().join("zero.scft");
    scfreg_core::tensorio::write_tensor(&zero, &Tensor::from_f64(vec![2, 32, 32], vec![0.0; 2048]).unwrap())
        .unwrap();
    let hd = |spacing: &str| {
        let out = ok(&[
            "eval", "--field", s(&zero), "--fixed-seg", s(&pair.join("seg_f.scft")), "--moving-seg",
            s(&pair.join("seg_m.scft")), "--spacing", spacing,
        ]);
        let r: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
        r["hd95_mean"].as_f64().unwrap()
    };
    let (one, two) = (hd("1,1"), hd("2,2"));
    assert!(one > 0.0);
    assert!((two - 2.0 * one).abs() < 1e-12);
    assert_eq!(scfreg(&["eval", "--field", s(&zero), "--fixed-seg", s(&pair.join("seg_f.scft")),
        "--moving-seg", s(&pair.join("seg_m.scft")), "--spacing", "1,1,1"]).status.code(), Some(1));
}

#[test]
fn register_rejects_shape_mismatch() {
    let t = tempfile::tempdir().unwrap();
    let a = small_dataset(t.path(), "2");
    let b = t.path().join("big");
    ok(&["synth", "--shape", "64x64", "--regions", "2", "--pairs", "1", "--out", s(&b)]);
    let ckpt = zero_checkpoint(t.path(), 3);
    let out = scfreg(&[
        "register", "--ckpt", s(&ckpt), "--moving", s(&b.join("pair_0000/im_m.scft")), "--fixed",
        s(&a.join("pair_0000/im_f.scft")), "--fixed-seg", s(&a.join("pair_0000/seg_f.scft")), "--out",
        s(&t.path().join("r")),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("shape mismatch"));
}

#[test]
fn sweep_writes_csv_and_fit() {
    let t = tempfile::tempdir().unwrap();
    let (a, b) = (t.path().join("a"), t.path().join("b"));
    ok(&["sweep-correlation", "--seed", "3", "--out", s(&a)]);
    ok(&["sweep-correlation", "--seed", "3", "--out", s(&b)]);
    assert_eq!(snapshot(&a), snapshot(&b));
    let fit: serde_json::Value = serde_json::from_str(&fs::read_to_string(a.join("fit.json")).unwrap()).unwrap();
    assert!(fit["pearson_r"].as_f64().is_some());
    assert_eq!(fit["n_fields"], 24);
    let mut rdr = csv::Reader::from_path(a.join("sweep.csv")).unwrap();
    let headers = rdr.headers().unwrap().clone();
    let col = |name: &str| headers.iter().position(|h| h == name).unwrap();
    let (sd, ff, sdn, ffn) = (col("sdlogj"), col("fold_frac"), col("sdlogj_norm"), col("fold_frac_norm"));
    let rows: Vec<csv::StringRecord> = rdr.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 24);
    for r in &rows {
        for c in [sd, ff] {
            assert!(r[c].parse::<f64>().unwrap() >= 0.0);
        }
        for c in [sdn, ffn] {
            assert!((0.0..=1.0).contains(&r[c].parse::<f64>().unwrap()));
        }
    }

    // degenerate: a single amplitude too small to fold anything
    let out = scfreg(&["sweep-correlation", "--amps", "0.1", "--out", s(&t.path().join("c"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("degenerate"));
}

#[test]
fn sweep_over_saved_fields() {
    let t = tempfile::tempdir().unwrap();
    let dir = t.path().join("fields");
    fs::create_dir(&dir).unwrap();
    let grid = scfreg_core::field::Grid::new(vec![24, 24]).unwrap();
    for (k, amp) in [1.0, 2.0, 4.0, 6.0, 8.0].into_iter().enumerate() {
        let u = scfreg_core::synth::smooth_noise_field(&grid, 2.5, amp, k as u64).unwrap();
        scfreg_core::tensorio::write_tensor(dir.join(format!("u{k}.scft")), &u.to_tensor()).unwrap();
    }
    let out = t.path().join("out");
    ok(&["sweep-correlation", "--fields", s(&dir), "--out", s(&out)]);
    let csv = fs::read_to_string(out.join("sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 6);
    assert!(csv.contains("u0.scft"));
}

#[test]
fn background_vector_prepares_embeddings() {
    let t = tempfile::tempdir().unwrap();
    let raw = Tensor::from_f64(vec![3, 4], vec![3., 0., 0., 0., 0., 2., 0., 0., 0., 0., 5., 0.]).unwrap();
    let sidecar = EmbeddingSidecar {
        labels: vec!["liver".into(), "spleen".into(), "kidney".into()],
        prompt_template: "A computerized tomography of a [CLS].".into(),
        encoder: "test".into(),
        has_background_row: false,
    };
    let input = t.path().join("raw");
    write_embedding_files(&input, &raw, &sidecar).unwrap();
    let out = t.path().join("prepared");
    ok(&["background-vector", "--embeddings", s(&input), "--out", s(&out)]);
    let m = load_embeddings(&out).unwrap();
    assert_eq!(m.n_regions(), 4);
    assert_eq!(m.row(0), &[0.0, 0.0, 0.0, 1.0]);
    for r in 0..4 {
        assert!((m.row(r).iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-12);
    }
    // idempotent: feeding the prepared file back changes nothing
    let again = t.path().join("again");
    ok(&["background-vector", "--embeddings", s(&out), "--out", s(&again)]);
    assert_eq!(fs::read(out.with_extension("scft")).unwrap(), fs::read(again.with_extension("scft")).unwrap());

    let zero = Tensor::from_f64(vec![2, 2], vec![1., 0., 0., 0.]).unwrap();
    let bad = t.path().join("bad");
    write_embedding_files(&bad, &zero, &EmbeddingSidecar { labels: vec!["a".into(), "b".into()], ..sidecar })
        .unwrap();
    let res = scfreg(&["background-vector", "--embeddings", s(&bad), "--out", s(&t.path().join("x"))]);
    assert_eq!(res.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&res.stderr).contains("zero norm"));
}

fn complexity(extra: &[&str]) -> serde_json::Value {
    let mut args = vec!["complexity"];
    args.extend_from_slice(extra);
    serde_json::from_slice(&ok(&args).stdout).unwrap()
}

#[test]
fn complexity_reports_closed_forms() {
    let r = complexity(&["--ns", "4", "--cphi", "8", "--levels", "2", "--c2", "8", "--regions", "3"]);
    // MLP 3 → 8 → 16 → 16 (C2·d)
    assert_eq!(r["mlp_params"], 3 * 8 + 8 + 8 * 16 + 16 + 16 * 16 + 16);
    assert_eq!(r["backbone_params"], 848);
    assert_eq!(r["uniform_filter_params"], 16);
    assert!(r["scf_inference_overhead"].as_u64().unwrap() > 0);
    let cached = complexity(&["--ns", "4", "--cphi", "8", "--levels", "2", "--c2", "8", "--regions", "3", "--cached"]);
    assert_eq!(cached["scf_inference_overhead"], 0);
    let mut last = 0;
    for ns in ["2", "4", "8", "16"] {
        let p = complexity(&["--ns", ns])["param_count"].as_u64().unwrap();
        assert!(p > last);
        last = p;
    }
}
