//! CLI surface tests: file formats, exit codes, idempotence and the
//! spec-level behaviors of each subcommand.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_hyperbal"))
}

fn tmp(name: &str) -> PathBuf {
    let dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join(name);
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn assert_ok(out: &Output) {
    assert!(
        out.status.success(),
        "command failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn cifar_path() -> String {
    concat!(env!("CARGO_MANIFEST_DIR"), "/data/cifar100_hierarchy.tsv").to_string()
}

#[test]
fn embed_writes_one_row_per_cifar_node() {
    let dir = tmp("cli_embed_cifar");
    let out = dir.join("emb.tsv");
    // initialization only keeps this fast; the row contract is the same
    let res = run(&[
        "embed",
        "--hierarchy",
        &cifar_path(),
        "--out",
        out.to_str().unwrap(),
        "--epochs",
        "0",
        "--init-epochs",
        "5",
        "--dim",
        "8",
    ]);
    assert_ok(&res);
    let text = std::fs::read_to_string(&out).unwrap();
    let rows = text.lines().filter(|l| !l.starts_with('#')).count();
    assert_eq!(rows, 121);
    assert!(text.starts_with("#dim=8 curvature=1 seed=0"));
    // config echo sits alongside the output
    assert!(dir.join("emb.tsv.config.json").exists());
}

#[test]
fn embed_missing_file_exits_2_and_names_path() {
    let res = run(&[
        "embed",
        "--hierarchy",
        "/definitely/not/here.tsv",
        "--out",
        "/tmp/unused_out.tsv",
    ]);
    assert_eq!(res.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&res.stderr);
    assert!(stderr.contains("/definitely/not/here.tsv"), "{stderr}");
    assert!(!Path::new("/tmp/unused_out.tsv").exists());
}

#[test]
fn embed_is_idempotent_given_seed() {
    let dir = tmp("cli_embed_idem");
    let text = "r\ta\nr\tb\na\tc\n";
    let hier = dir.join("h.tsv");
    std::fs::write(&hier, text).unwrap();
    let args = |out: &Path| {
        vec![
            "embed".to_string(),
            "--hierarchy".into(),
            hier.display().to_string(),
            "--out".into(),
            out.display().to_string(),
            "--dim".into(),
            "4".into(),
            "--epochs".into(),
            "200".into(),
            "--seed".into(),
            "9".into(),
        ]
    };
    let o1 = dir.join("e1.tsv");
    let o2 = dir.join("e2.tsv");
    assert_ok(&bin().args(args(&o1)).output().unwrap());
    assert_ok(&bin().args(args(&o2)).output().unwrap());
    assert_eq!(
        std::fs::read(&o1).unwrap(),
        std::fs::read(&o2).unwrap(),
        "identical seeds must give bitwise-identical embeddings"
    );
}

#[test]
fn embed_eval_is_deterministic_and_matches_library() {
    let dir = tmp("cli_embed_eval");
    let hier = dir.join("h.tsv");
    std::fs::write(&hier, "r\ta\nr\tb\nb\tc\nb\td\n").unwrap();
    let emb = dir.join("e.tsv");
    assert_ok(&run(&[
        "embed",
        "--hierarchy",
        hier.to_str().unwrap(),
        "--out",
        emb.to_str().unwrap(),
        "--dim",
        "4",
        "--epochs",
        "300",
    ]));
    let eval = |out: &str| {
        let res = run(&[
            "embed-eval",
            "--hierarchy",
            hier.to_str().unwrap(),
            "--embeddings",
            emb.to_str().unwrap(),
            "--out",
            out,
        ]);
        assert_ok(&res);
        std::fs::read_to_string(out).unwrap()
    };
    let a = eval(dir.join("r1.json").to_str().unwrap());
    let b = eval(dir.join("r2.json").to_str().unwrap());
    assert_eq!(a, b, "evaluating the same embedding twice must agree");

    // against the library route
    let v: serde_json::Value = serde_json::from_str(&a).unwrap();
    let h = hyperbal::hierarchy::Hierarchy::parse_edge_list(
        std::fs::read_to_string(&hier).unwrap().as_bytes(),
    )
    .unwrap();
    let e = hyperbal::embedder::EmbeddingSet::read_tsv(
        std::fs::read_to_string(&emb).unwrap().as_bytes(),
    )
    .unwrap();
    let dist = h.all_pairs_distances();
    let want = hyperbal::metrics::distortion_metric(&e, &h, &dist).unwrap();
    assert_eq!(v["distortion"].as_f64().unwrap(), want);
}

#[test]
fn eval_perfect_separation_and_oracle_case() {
    let dir = tmp("cli_eval");
    std::fs::write(dir.join("id.txt"), "# method=msp source=euclidean\n0.9\n0.8\n0.7\n")
        .unwrap();
    std::fs::write(dir.join("ood.txt"), "0.1\n0.2\n0.3\n").unwrap();
    let res = run(&[
        "eval",
        "--id-scores",
        dir.join("id.txt").to_str().unwrap(),
        "--ood-scores",
        dir.join("ood.txt").to_str().unwrap(),
    ]);
    assert_ok(&res);
    let v: serde_json::Value = serde_json::from_str(&String::from_utf8_lossy(&res.stdout)).unwrap();
    assert_eq!(v["auroc"], 1.0);
    assert_eq!(v["fpr_at_95"], 0.0);
    assert_eq!(v["n_id"], 3);

    // six mixed samples against the library oracle
    std::fs::write(dir.join("id6.txt"), "0.9\n0.4\n0.4\n").unwrap();
    std::fs::write(dir.join("ood6.txt"), "0.6\n0.4\n0.1\n").unwrap();
    let res = run(&[
        "eval",
        "--id-scores",
        dir.join("id6.txt").to_str().unwrap(),
        "--ood-scores",
        dir.join("ood6.txt").to_str().unwrap(),
    ]);
    assert_ok(&res);
    let v: serde_json::Value = serde_json::from_str(&String::from_utf8_lossy(&res.stdout)).unwrap();
    let want = hyperbal::metrics::evaluate_scores(&[0.9, 0.4, 0.4], &[0.6, 0.4, 0.1]).unwrap();
    assert_eq!(v["auroc"].as_f64().unwrap(), want.auroc);
    assert_eq!(v["aupr"].as_f64().unwrap(), want.aupr);
}

#[test]
fn eval_tsv_format_is_flat() {
    let dir = tmp("cli_eval_tsv");
    std::fs::write(dir.join("id.txt"), "1\n2\n").unwrap();
    std::fs::write(dir.join("ood.txt"), "0\n").unwrap();
    let res = run(&[
        "eval",
        "--id-scores",
        dir.join("id.txt").to_str().unwrap(),
        "--ood-scores",
        dir.join("ood.txt").to_str().unwrap(),
        "--format",
        "tsv",
    ]);
    assert_ok(&res);
    let text = String::from_utf8_lossy(&res.stdout).to_string();
    assert!(text.contains("auroc\t1.0"));
    assert!(text.contains("n_ood\t1"));
}

#[test]
fn hier_eval_sibling_predictions() {
    let dir = tmp("cli_hier");
    std::fs::write(dir.join("h.tsv"), "r\tp\np\ta\np\tb\nr\tq\nq\tc\n").unwrap();
    std::fs::write(dir.join("preds.tsv"), "a\tb\nb\ta\n").unwrap();
    let res = run(&[
        "hier-eval",
        "--hierarchy",
        dir.join("h.tsv").to_str().unwrap(),
        "--predictions",
        dir.join("preds.tsv").to_str().unwrap(),
    ]);
    assert_ok(&res);
    let v: serde_json::Value = serde_json::from_str(&String::from_utf8_lossy(&res.stdout)).unwrap();
    assert_eq!(v["h_dist"], 1.0);
    assert_eq!(v["hsi_b1"], 1.0);
    assert_eq!(v["m"], 2);
}

/// One small end-to-end directory shared by the train/score tests.
fn trained_fixture() -> &'static (PathBuf, PathBuf, PathBuf) {
    use std::sync::OnceLock;
    static FIXTURE: OnceLock<(PathBuf, PathBuf, PathBuf)> = OnceLock::new();
    FIXTURE.get_or_init(|| {
        let dir = tmp("cli_fixture");
        assert_ok(&run(&[
            "gen-data",
            "--out-dir",
            dir.join("data").to_str().unwrap(),
            "--depth",
            "1",
            "--branching",
            "5",
            "--feature-dim",
            "6",
            "--train-per-class",
            "25",
            "--test-per-class",
            "8",
            "--holdout",
            "0.4",
            "--seed",
            "11",
        ]));
        assert_ok(&run(&[
            "embed",
            "--hierarchy",
            dir.join("data/hierarchy.tsv").to_str().unwrap(),
            "--out",
            dir.join("emb.tsv").to_str().unwrap(),
            "--dim",
            "4",
            "--epochs",
            "400",
            "--seed",
            "11",
        ]));
        assert_ok(&run(&[
            "train",
            "--features",
            dir.join("data/train.csv").to_str().unwrap(),
            "--embeddings",
            dir.join("emb.tsv").to_str().unwrap(),
            "--id-classes",
            dir.join("data/id_classes.txt").to_str().unwrap(),
            "--epochs",
            "12",
            "--hidden",
            "16",
            "--out",
            dir.join("model.json").to_str().unwrap(),
            "--seed",
            "11",
        ]));
        let model = dir.join("model.json");
        let data = dir.join("data");
        (dir, model, data)
    })
}

#[test]
fn train_zero_lr_leaves_initial_weights() {
    let (dir, _, data) = trained_fixture();
    let out_a = dir.join("m_lr0_a.json");
    let out_b = dir.join("m_lr0_b.json");
    for (out, epochs) in [(&out_a, "1"), (&out_b, "7")] {
        assert_ok(&run(&[
            "train",
            "--features",
            data.join("train.csv").to_str().unwrap(),
            "--embeddings",
            dir.join("emb.tsv").to_str().unwrap(),
            "--epochs",
            epochs,
            "--lr",
            "0",
            "--hidden",
            "16",
            "--out",
            out.to_str().unwrap(),
            "--seed",
            "11",
        ]));
    }
    // any number of zero-rate epochs leaves the checkpoint unchanged
    assert_eq!(
        std::fs::read(&out_a).unwrap(),
        std::fs::read(&out_b).unwrap()
    );
}

#[test]
fn mismatched_feature_dim_is_a_configuration_error() {
    let (dir, model, _) = trained_fixture();
    // the checkpoint expects 6-dim features; hand it a 2-dim CSV
    let bad = dir.join("bad.csv");
    std::fs::write(&bad, "f0,f1,label\n1.0,2.0,n0\n").unwrap();
    let res = run(&[
        "score",
        "--model",
        model.to_str().unwrap(),
        "--features",
        bad.to_str().unwrap(),
        "--method",
        "msp",
        "--out",
        dir.join("never.txt").to_str().unwrap(),
    ]);
    assert_eq!(res.status.code(), Some(2));
    assert!(!dir.join("never.txt").exists());
}

#[test]
fn train_rejects_id_class_mismatch() {
    let (dir, _, data) = trained_fixture();
    let markers = dir.join("wrong_markers.txt");
    std::fs::write(&markers, "n0\n").unwrap();
    let res = run(&[
        "train",
        "--features",
        data.join("train.csv").to_str().unwrap(),
        "--embeddings",
        dir.join("emb.tsv").to_str().unwrap(),
        "--id-classes",
        markers.to_str().unwrap(),
        "--out",
        dir.join("never.json").to_str().unwrap(),
    ]);
    assert_eq!(res.status.code(), Some(2));
    assert!(!dir.join("never.json").exists());
}

#[test]
fn score_batch_matches_per_row_and_writes_header() {
    let (dir, model, data) = trained_fixture();
    let out = dir.join("scores_msp.txt");
    assert_ok(&run(&[
        "score",
        "--model",
        model.to_str().unwrap(),
        "--features",
        data.join("test_id.csv").to_str().unwrap(),
        "--method",
        "msp",
        "--out",
        out.to_str().unwrap(),
    ]));
    let text = std::fs::read_to_string(&out).unwrap();
    assert!(text.starts_with("# method=msp source=hyperbolic"));

    // per-row oracle through the library
    let m = hyperbal::protohead::Model::from_json(
        &std::fs::read_to_string(model).unwrap(),
    )
    .unwrap();
    let feats = hyperbal::protohead::LabeledFeatures::read_csv(
        std::fs::read_to_string(data.join("test_id.csv"))
            .unwrap()
            .as_bytes(),
        "t",
    )
    .unwrap();
    let scores: Vec<f64> = text
        .lines()
        .filter(|l| !l.starts_with('#'))
        .map(|l| l.parse().unwrap())
        .collect();
    assert_eq!(scores.len(), feats.len());
    for (i, &s) in scores.iter().enumerate().take(5) {
        let logits = m.logits(feats.row(i)).unwrap();
        let rec = hyperbal::scoring::LogitRecord::new(
            logits,
            hyperbal::scoring::ScoreSource::Hyperbolic,
        )
        .unwrap();
        assert_eq!(s, hyperbal::scoring::msp(&rec));
    }
}

#[test]
fn score_empty_input_writes_header_only() {
    let (dir, model, _) = trained_fixture();
    let empty = dir.join("empty.csv");
    std::fs::write(&empty, "f0,f1,f2,f3,f4,f5,label\n").unwrap();
    let out = dir.join("scores_empty.txt");
    assert_ok(&run(&[
        "score",
        "--model",
        model.to_str().unwrap(),
        "--features",
        empty.to_str().unwrap(),
        "--method",
        "energy",
        "--out",
        out.to_str().unwrap(),
    ]));
    let text = std::fs::read_to_string(&out).unwrap();
    assert_eq!(text.lines().count(), 1);
    assert!(text.starts_with("# method=energy source=hyperbolic T=0.05"));
}

#[test]
fn score_knn_requires_bank_and_scores_with_it() {
    let (dir, model, data) = trained_fixture();
    let out = dir.join("scores_knn.txt");
    let res = run(&[
        "score",
        "--model",
        model.to_str().unwrap(),
        "--features",
        data.join("test_id.csv").to_str().unwrap(),
        "--method",
        "knn",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(res.status.code(), Some(2));

    assert_ok(&run(&[
        "score",
        "--model",
        model.to_str().unwrap(),
        "--features",
        data.join("test_id.csv").to_str().unwrap(),
        "--method",
        "knn",
        "--k",
        "10",
        "--bank",
        data.join("train.csv").to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]));
    let text = std::fs::read_to_string(&out).unwrap();
    assert!(text.starts_with("# method=knn source=hyperbolic k=10"));
    // every score is a negative distance or zero
    for line in text.lines().skip(1) {
        assert!(line.parse::<f64>().unwrap() <= 0.0);
    }
}

#[test]
fn score_predictions_feed_hier_eval() {
    let (dir, model, data) = trained_fixture();
    let preds = dir.join("preds_ood.tsv");
    assert_ok(&run(&[
        "score",
        "--model",
        model.to_str().unwrap(),
        "--features",
        data.join("test_ood.csv").to_str().unwrap(),
        "--method",
        "msp",
        "--out",
        dir.join("ood_msp.txt").to_str().unwrap(),
        "--predictions",
        preds.to_str().unwrap(),
    ]));
    let res = run(&[
        "hier-eval",
        "--hierarchy",
        data.join("hierarchy.tsv").to_str().unwrap(),
        "--predictions",
        preds.to_str().unwrap(),
    ]);
    assert_ok(&res);
    let v: serde_json::Value = serde_json::from_str(&String::from_utf8_lossy(&res.stdout)).unwrap();
    assert!(v["h_dist"].as_f64().unwrap() >= 0.0);
    assert!(v["m"].as_u64().unwrap() > 0);
}

#[test]
fn gen_data_markers_match_csv_labels() {
    let (_, _, data) = trained_fixture();
    let id: Vec<String> = std::fs::read_to_string(data.join("id_classes.txt"))
        .unwrap()
        .lines()
        .map(str::to_string)
        .collect();
    let ood: Vec<String> = std::fs::read_to_string(data.join("ood_classes.txt"))
        .unwrap()
        .lines()
        .map(str::to_string)
        .collect();
    assert_eq!(id.len(), 3);
    assert_eq!(ood.len(), 2);
    let train = std::fs::read_to_string(data.join("train.csv")).unwrap();
    for class in &ood {
        assert!(!train.contains(class), "OOD class {class} leaked into train");
    }
}
