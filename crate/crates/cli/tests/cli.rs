use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"
seed = 3

[data]
source = "synthetic"
synthetic_graphs = 30

[split]
train_fraction = 0.8

[model]
hidden_dim = 4
proj_dim = 8
clusters = 3

[train]
epochs = 3
batch_size = 8

[eval]
repeats = 2
"#;

fn goodd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_goodd"))
        .args(args)
        .env_remove("GOODD_DATA_DIR")
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, text: &str) -> String {
    let p = dir.join("run.toml");
    fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn train_is_reproducible_and_scores() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        let o = goodd(&["train", "--config", &cfg, "--out", out.to_str().unwrap()]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let ca = fs::read(a.join("model.json")).unwrap();
    assert_eq!(ca, fs::read(b.join("model.json")).unwrap());
    assert!(fs::read_to_string(a.join("train.log")).unwrap().starts_with("epoch=0 loss_node="));
    assert!(fs::read_to_string(a.join("config.toml")).unwrap().contains("epochs = 3"));

    let s = dir.path().join("s");
    let o = goodd(&[
        "score",
        "--config",
        &cfg,
        "--checkpoint",
        a.join("model.json").to_str().unwrap(),
        "--out",
        s.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(s.join("scores.csv")).unwrap();
    assert!(csv.starts_with("graph_id,label,s_node,s_graph,s_group,score\n"));
    assert_eq!(csv.lines().count(), 1 + 12);
    for space in ["node_f", "node_s", "graph_f", "graph_s", "group"] {
        assert!(s.join("embeddings").join(format!("{space}.csv")).exists());
    }
    assert!(stdout(&o).starts_with("AUC "));
}

#[test]
fn eval_report_and_variants() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out1 = dir.path().join("e1");
    let out2 = dir.path().join("e2");
    let o = goodd(&["eval", "--config", &cfg, "--variant", "simp", "--out", out1.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    let last = text.lines().last().unwrap();
    assert!(last.starts_with("AUC mean=") && last.ends_with(" seeds=2"), "{last}");
    assert!(text.starts_with("seed=3 auc="));
    assert!(out1.join("scores_seed4.csv").exists());

    let o = goodd(&["eval", "--config", &cfg, "--variant", "simp", "--out", out2.to_str().unwrap()]);
    assert_eq!(stdout(&o), text);
    for f in ["report.txt", "scores_seed3.csv", "scores_seed4.csv", "config.toml"] {
        assert_eq!(fs::read(out1.join(f)).unwrap(), fs::read(out2.join(f)).unwrap(), "{f}");
    }

    let o = goodd(&["eval", "--config", &cfg, "--mode", "anomaly", "--score-neg", "bank", "--out", out1.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn ablate_and_sweep_tables() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &SMALL.replace("repeats = 2", "repeats = 1"));
    let out = dir.path().join("x");
    let o = goodd(&["ablate", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rows: Vec<String> = stdout(&o).lines().skip(1).map(String::from).collect();
    assert_eq!(rows.len(), 7);
    assert!(rows[6].starts_with("node+graph+group\t"));

    let o = goodd(&["sweep", "--config", &cfg, "--param", "K", "--values", "2,3", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(stdout(&o).lines().count(), 3);
    assert!(out.join("sweep_K.tsv").exists());
}

#[test]
fn config_and_usage_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[train]\nepochz = 3\n");
    let o = goodd(&["train", "--config", &cfg, "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("epochz"));

    assert_eq!(goodd(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(goodd(&["eval", "--variant", "fancy"]).status.code(), Some(1));
}

#[test]
fn missing_dataset_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let text = format!(
        "[data]\nsource = \"tu\"\nid = \"AIDS\"\nood = \"DHFR\"\nroot = \"{}\"\n",
        dir.path().join("none").display()
    );
    let cfg = write_config(dir.path(), &text);
    let o = goodd(&["eval", "--config", &cfg, "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn gradcheck_passes_and_catches_fault() {
    let o = goodd(&["gradcheck", "--instances", "3"]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.contains("gradcheck op=matmul instances=3 max_rel_error="));
    assert!(text.contains("op=loss.group"));

    let o = goodd(&["gradcheck", "--instances", "2", "--inject-fault"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stdout(&o).contains("gradcheck failed: custom.faulty_square"));
}
