//! Drives the `rfr` binary through every command on a tiny configuration.

use std::path::Path;
use std::process::{Command, Output};

use rfr::config::ExperimentConfig;
use rfr::corpus::PRETRAIN_LOG_COLUMNS;
use rfr::metrics::MetricsReport;
use rfr::network::checkpoint;

fn tiny_config(seed: u64) -> String {
    format!(
        r#"{{
  "seed": {seed},
  "corpus": {{ "train_size": 6, "validation_size": 2, "test_size": 3, "control_size": 2, "tile_size": 8, "grid": 4 }},
  "arch": {{ "image_channels": 3, "base_channels": 4, "depth": 1, "dilations": [2], "gated": false, "activation": "elu" }},
  "pretrain": {{ "epochs": 2, "batch_size": 4, "rect_min": 4, "rect_max": 12,
                 "coverage": {{ "lo": 0.05, "hi": 0.6 }},
                 "free_form": {{ "max_strokes": 4, "max_vertices_per_stroke": 4, "brush_width_range": [2, 4],
                                 "max_segment_length": 8.0, "max_turn_angle": 1.2 }} }},
  "adapt": {{ "iterations": 4, "checkpoint_every": 2, "batch_size": 2,
              "coverage": {{ "lo": 0.05, "hi": 0.6 }},
              "free_form": {{ "max_strokes": 4, "max_vertices_per_stroke": 4, "brush_width_range": [2, 4],
                              "max_segment_length": 8.0, "max_turn_angle": 1.2 }} }},
  "sweep": {{ "iterations": [0, 2, 4] }}
}}"#
    )
}

fn rfr(args: &[&str], config: &Path, out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rfr"))
        .args(args)
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .output()
        .expect("binary runs")
}

fn ok(o: &Output) {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
}

fn write_config(dir: &Path, text: &str) -> std::path::PathBuf {
    let p = dir.join("config.json");
    std::fs::write(&p, text).unwrap();
    p
}

fn run_all(root: &Path, seed: u64) -> std::path::PathBuf {
    let cfg = write_config(root, &tiny_config(seed));
    let out = root.join("out");
    for cmd in ["datagen", "pretrain", "adapt", "eval", "sweep"] {
        ok(&rfr(&[cmd], &cfg, &out));
    }
    out
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn full_pipeline_outputs_and_determinism() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let out_a = run_all(a.path(), 11);
    let out_b = run_all(b.path(), 11);
    let fa = files(&out_a);
    let fb = files(&out_b);
    assert_eq!(fa.len(), fb.len());
    for ((na, ba), (nb, bb)) in fa.iter().zip(&fb) {
        // resolved configs name their own output directory
        if na.ends_with("config.json") {
            continue;
        }
        assert_eq!(na, nb);
        assert!(ba == bb, "{na} differs between runs");
    }

    let manifest = std::fs::read_to_string(out_a.join("corpus/manifest.csv")).unwrap();
    assert_eq!(manifest.lines().count(), 1 + 6 + 2 + 3 + 2);
    assert!(manifest.starts_with("split,index,seed,spec,path,mask_path\n"));

    let log = std::fs::read_to_string(out_a.join("pretrain/log.csv")).unwrap();
    let rows: Vec<&str> = log.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(rows[0], PRETRAIN_LOG_COLUMNS.join(","));
    assert_eq!(rows.len() - 1, 2 * 2);

    let ckpt = out_a.join("pretrain/theta0.ckpt");
    let (theta, seed) = checkpoint::load(&ckpt).unwrap();
    assert_eq!(checkpoint::to_bytes(&theta, seed), std::fs::read(&ckpt).unwrap());

    let report = std::fs::read_to_string(out_a.join("adapt/test_recurrent/report.csv")).unwrap();
    let fp = ExperimentConfig::load(out_a.join("adapt/config.json")).unwrap().fingerprint();
    let report = MetricsReport::from_csv(&report, fp.clone()).unwrap();
    assert_eq!(report.rows.len(), 3);
    let json: MetricsReport =
        serde_json::from_str(&std::fs::read_to_string(out_a.join("adapt/test_recurrent/report.json")).unwrap()).unwrap();
    assert_eq!(json, report);
    assert_eq!(json.fingerprint, fp);
    for id in ["test_recurrent_0000", "test_recurrent_0002"] {
        for suffix in ["baseline.png", "adapted.png", "mask.png", "trace.csv"] {
            assert!(out_a.join(format!("adapt/test_recurrent/{id}_{suffix}")).exists());
        }
    }
    let trace = std::fs::read_to_string(out_a.join("adapt/test_recurrent/test_recurrent_0001_trace.csv")).unwrap();
    assert_eq!(trace.lines().next().unwrap(), "iteration,rec_loss,adv_loss,total,psnr,ssim");
    assert_eq!(trace.lines().count(), 3);

    assert!(out_a.join("eval/test_control/report.csv").exists());
    let curve = std::fs::read_to_string(out_a.join("sweep/curve.csv")).unwrap();
    let keys: Vec<&str> = curve.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(keys, ["0", "2", "4"]);
}

#[test]
fn zero_iterations_leave_metrics_unchanged() {
    let root = tempfile::tempdir().unwrap();
    let text = tiny_config(5).replace(r#""iterations": 4,"#, r#""iterations": 0,"#).replace("[0, 2, 4]", "[0]");
    let cfg = write_config(root.path(), &text);
    let out = root.path().join("out");
    for cmd in ["datagen", "pretrain"] {
        ok(&rfr(&[cmd], &cfg, &out));
    }
    let o = rfr(&["adapt", "--tee-csv"], &cfg, &out);
    ok(&o);
    let stdout = String::from_utf8(o.stdout).unwrap();
    let first = stdout.split("id,").nth(1).unwrap();
    let report = MetricsReport::from_csv(&format!("id,{first}"), "x").unwrap();
    for r in &report.rows {
        assert_eq!(r.psnr_before.to_bits(), r.psnr_after.to_bits());
        assert_eq!(r.ssim_before.to_bits(), r.ssim_after.to_bits());
        assert_eq!(r.l1pct_before.to_bits(), r.l1pct_after.to_bits());
    }
    let o = rfr(&["sweep", "--tee-csv"], &cfg, &out);
    ok(&o);
    let curve = String::from_utf8(o.stdout).unwrap();
    let row: Vec<f64> = curve.lines().nth(1).unwrap().split(',').map(|v| v.parse().unwrap()).collect();
    assert_eq!(row[1], report.aggregates.psnr_before.mean);
    assert_eq!(row[3], report.aggregates.ssim_before.mean);
    assert_eq!(curve.lines().count(), 2);
}

#[test]
fn datagen_is_idempotent_and_validates() {
    let root = tempfile::tempdir().unwrap();
    let cfg = write_config(root.path(), &tiny_config(2));
    let out = root.path().join("out");
    ok(&rfr(&["datagen"], &cfg, &out));
    let first = files(&out.join("corpus"));
    ok(&rfr(&["datagen"], &cfg, &out));
    assert_eq!(files(&out.join("corpus")), first);

    let o = rfr(&["datagen", "--seed", "3"], &cfg, &out);
    ok(&o);
    assert_ne!(files(&out.join("corpus")), first);

    let empty = write_config(root.path(), &tiny_config(2).replace(r#""train_size": 6"#, r#""train_size": 0"#));
    let o = rfr(&["datagen"], &empty, &root.path().join("empty"));
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn failures_map_to_exit_codes() {
    let root = tempfile::tempdir().unwrap();
    let cfg = write_config(root.path(), &tiny_config(2));
    // no corpus yet
    let o = rfr(&["pretrain"], &cfg, &root.path().join("nothing"));
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("manifest.csv"));

    let bad = write_config(root.path(), r#"{"corpus": {}}"#);
    assert_eq!(rfr(&["datagen"], &bad, root.path()).status.code(), Some(1));

    let o = Command::new(env!("CARGO_BIN_EXE_rfr")).arg("frobnicate").output().unwrap();
    assert_eq!(o.status.code(), Some(1));

    // a learning rate this large drives the tiny net to non-finite values
    let diverge = tiny_config(2).replace(r#""epochs": 2,"#, r#""epochs": 2, "learning_rate": 1e300,"#);
    let cfg = write_config(root.path(), &diverge);
    let out = root.path().join("div");
    ok(&rfr(&["datagen"], &cfg, &out));
    let o = rfr(&["pretrain"], &cfg, &out);
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
}
