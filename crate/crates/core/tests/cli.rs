//! The `chimera` binary end to end on small inputs.

use std::path::Path;
use std::process::{Command, Output};

fn chimera(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_chimera")).args(args).output().unwrap()
}

fn text(b: &[u8]) -> String {
    String::from_utf8_lossy(b).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn usage_errors_exit_two() {
    let o = chimera(&["pipeline", "--taxonomy", "/missing/taxonomy.txt"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(text(&o.stderr).contains("--taxonomy"));

    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "taxonomy = /missing/taxonomy.txt\n").unwrap();
    let o = chimera(&["pipeline", "--config", p(&cfg)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(text(&o.stderr).contains("--taxonomy"), "{}", text(&o.stderr));

    std::fs::write(&cfg, "no_such_key = 1\n").unwrap();
    let o = chimera(&["pipeline", "--config", p(&cfg)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(text(&o.stderr).contains("no_such_key"));

    assert_eq!(chimera(&["corpus", "gen", "--n", "5"]).status.code(), Some(2));
    assert_eq!(chimera(&["--help"]).status.code(), Some(0));
}

#[test]
fn taxonomy_validate_reports_errors() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.txt");
    std::fs::write(&bad, "domain creature\nprefix A creature\npart head: lion, tiger\n").unwrap();
    let o = chimera(&["taxonomy", "validate", p(&bad)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(text(&o.stderr).starts_with("error:"));
}

#[test]
fn corpus_train_sample_eval_report() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus.jsonl");
    let o = chimera(&["corpus", "gen", "--n", "300", "--seed", "4", "--mix-ratio", "0.5", "--out", p(&corpus)]);
    assert!(o.status.success(), "{}", text(&o.stderr));
    assert_eq!(std::fs::read_to_string(&corpus).unwrap().lines().count(), 300);

    let ckpt = dir.path().join("prior.ckpt");
    let o = chimera(&[
        "prior", "train", "--objective", "flow", "--corpus", p(&corpus), "--world-seed", "0", "--steps", "30",
        "--out", p(&ckpt), "--train-n", "250", "--hidden", "32,32", "--batch-size", "16",
    ]);
    assert!(o.status.success(), "{}", text(&o.stderr));
    assert!(dir.path().join("prior.ckpt.json").exists());
    let curve = std::fs::read_to_string(dir.path().join("prior.ckpt.loss.csv")).unwrap();
    assert!(curve.starts_with("step,loss\n0,"));

    let o = chimera(&["prior", "sample", "--ckpt", p(&ckpt), "--prompt-id", "260", "--corpus", p(&corpus), "--steps", "5"]);
    assert!(o.status.success(), "{}", text(&o.stderr));
    let rec: serde_json::Value = serde_json::from_str(text(&o.stdout).trim()).unwrap();
    assert_eq!(rec["prompt_id"], 260);
    assert!(rec["cosine_to_oracle"].as_f64().unwrap().abs() <= 1.0 + 1e-12);

    let o = chimera(&["prior", "sample", "--ckpt", p(&ckpt), "--atoms", "wing:toaster"]);
    assert_eq!(o.status.code(), Some(2));
    let o = chimera(&["prior", "sample", "--ckpt", p(&ckpt)]);
    assert_eq!(o.status.code(), Some(2));

    let out = dir.path().join("eval");
    let o = chimera(&[
        "eval", "--ckpt", p(&ckpt), "--corpus", p(&corpus), "--start", "250", "--count", "50", "--out", p(&out),
        "--steps", "5", "--kid-subset-size", "20", "--kid-subsets", "3",
    ]);
    assert!(o.status.success(), "{}", text(&o.stderr));
    for f in ["metrics.json", "samples.jsonl", "reports/compositional_accuracy.json", "charts/parteval.svg"] {
        assert!(out.join(f).exists(), "{f}");
    }

    let reports: Vec<String> = std::fs::read_dir(out.join("reports"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.file_name().unwrap().to_str().unwrap().starts_with("parteval_"))
        .map(|p| p.to_str().unwrap().to_string())
        .collect();
    assert!(!reports.is_empty());
    let chart_dir = dir.path().join("chart");
    let mut args = vec!["report"];
    args.extend(reports.iter().map(String::as_str));
    args.extend(["--out", p(&chart_dir)]);
    let o = chimera(&args);
    assert!(o.status.success(), "{}", text(&o.stderr));
    assert!(std::fs::read_to_string(chart_dir.join("report.svg")).unwrap().contains("<polyline"));

    // metrics of different kinds cannot share a chart
    let acc = out.join("reports/compositional_accuracy.json");
    let o = chimera(&["report", &reports[0], p(&acc), "--out", p(&chart_dir)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(text(&o.stderr).contains("malformed report"));
}

#[test]
fn pipeline_manifest_rerun() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("small.cfg");
    std::fs::write(
        &cfg,
        "corpus_n = 150\ntrain_n = 120\nheldout_n = 30\nsteps = 25\nhidden = 16\nbatch_size = 8\n\
         sample_steps = 3\nkid_subset_size = 10\nkid_subsets = 3\n",
    )
    .unwrap();
    let run = dir.path().join("run");
    let o = chimera(&["pipeline", "--config", p(&cfg), "--out", p(&run)]);
    assert!(o.status.success(), "{}", text(&o.stderr));
    let manifest = run.join("manifest.json");
    let o = chimera(&["--sequential", "pipeline", "--manifest", p(&manifest), "--out", p(&dir.path().join("again"))]);
    assert!(o.status.success(), "{}", text(&o.stderr));
    assert!(text(&o.stdout).starts_with("verified:"));

    // a doctored digest must fail verification
    let mut m: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&manifest).unwrap()).unwrap();
    m["artifacts"][0]["sha256"] = "00".into();
    std::fs::write(&manifest, serde_json::to_vec(&m).unwrap()).unwrap();
    let o = chimera(&["pipeline", "--manifest", p(&manifest), "--out", p(&dir.path().join("third"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(text(&o.stderr).contains("digest mismatch"));
}
