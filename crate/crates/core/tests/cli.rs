//! End-to-end runs of the command-line surface on tiny inputs.

use std::path::Path;
use std::process::Command;

use xfeat::cli;
use xfeat::geometry::Homography;
use xfeat::io::{load_features, load_weights, save_pgm, save_weights};
use xfeat::training::procedural_texture;
use xfeat::XFeatModel;

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn train_writes_checkpoint_and_loss_curve() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus");
    std::fs::create_dir(&corpus).unwrap();
    for k in 0..3 {
        save_pgm(&procedural_texture(300, 200, k), &corpus.join(format!("{k}.pgm"))).unwrap();
    }
    let out = dir.path().join("m.xftw");
    let text = cli::run(["xfeat", "train", "--desk", "--steps", "2", "--corpus", s(&corpus), "--out", s(&out)]).unwrap();
    assert!(text.contains("trained 2 steps"), "{text}");
    assert_eq!(load_weights(&out).unwrap().config.backbone.descriptor_dim, 64);
    let csv = std::fs::read_to_string(out.with_extension("csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(csv.starts_with("step,lr,total,ds,rel,fine,kp"));
}

#[test]
fn extract_match_and_evaluate_a_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let model = d.join("m.xftw");
    save_weights(&XFeatModel::<f32>::reduced(2).unwrap(), &model).unwrap();
    let a = procedural_texture(200, 160, 9);
    let h = Homography::translation(6.0, 2.0);
    save_pgm(&a, &d.join("a.pgm")).unwrap();
    save_pgm(&a.warp(&h, 200, 160, 0.0).unwrap(), &d.join("b.pgm")).unwrap();

    for (img, out, mode) in [("a.pgm", "a.xftc", "sparse"), ("b.pgm", "b.xftc", "sparse"), ("a.pgm", "a_sd.xftc", "semidense")] {
        cli::run(["xfeat", "extract", "--model", s(&model), "--image", s(&d.join(img)), "--mode", mode, "--out", s(&d.join(out))])
            .unwrap();
    }
    let fa = load_features(&d.join("a.xftc")).unwrap();
    assert!(!fa.is_empty() && fa.len() <= 4096);
    assert!(load_features(&d.join("a_sd.xftc")).unwrap().scales.contains(&1.3));

    let matches = d.join("m.json");
    cli::run(["xfeat", "match", "--feats-a", s(&d.join("a.xftc")), "--feats-b", s(&d.join("b.xftc")), "--out", s(&matches)]).unwrap();
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&matches).unwrap()).unwrap();
    assert!(v.as_array().unwrap().iter().all(|m| m["confidence"] == 1.0));
    assert!(cli::run(["xfeat", "match", "--feats-a", s(&d.join("a.xftc")), "--feats-b", s(&d.join("b.xftc")), "--refine", "--out", s(&matches)]).is_err());

    std::fs::write(
        d.join("pairs.jsonl"),
        "{\"image_a\":\"a.pgm\",\"image_b\":\"b.pgm\",\"homography\":[1,0,6,0,1,2,0,0,1]}\n",
    )
    .unwrap();
    let report = d.join("r.json");
    let text = cli::run([
        "xfeat", "eval-homography", "--model", s(&model), "--pairs", s(&d.join("pairs.jsonl")), "--sweep", "2,4", "--out", s(&report),
    ])
    .unwrap();
    assert_eq!(text.lines().count(), 2);
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(v[1]["ransac_threshold"], 4.0);
    for k in ["3", "5", "7"] {
        assert!(v[0]["report"]["mha"][k].is_number());
    }
}

#[test]
fn binary_reports_errors_with_failure_status() {
    let exe = env!("CARGO_BIN_EXE_xfeat");
    let out = Command::new(exe).args(["extract", "--model", "/nonexistent.xftw", "--image", "x.pgm", "--out", "o"]).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));
    let ok = Command::new(exe).args(["bench-flops", "--width", "64", "--height", "48"]).output().unwrap();
    assert!(ok.status.success());
    assert!(String::from_utf8_lossy(&ok.stdout).contains("total"));
}
