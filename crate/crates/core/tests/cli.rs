use std::path::Path;
use std::process::{Command, Output};

const TINY: [&str; 14] = [
    "--override",
    "model.d_model=8",
    "--override",
    "model.d_att=8",
    "--override",
    "model.pair_hidden=4",
    "--override",
    "optim.epochs=1",
    "--override",
    "data.task=grammar",
    "--override",
    "data.grammar.count=20",
    "--override",
    "data.test_count=6",
];

fn run(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_set2seq"))
        .arg("--out")
        .arg(out)
        .args(args)
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn header_config(dir: &Path) -> serde_json::Value {
    let text = std::fs::read_to_string(dir.join("metrics.jsonl")).unwrap();
    let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    first["config"].clone()
}

fn flatten(v: &serde_json::Value, prefix: &str, out: &mut Vec<(String, String)>) {
    match v {
        serde_json::Value::Object(map) => {
            for (k, inner) in map {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(inner, &key, out);
            }
        }
        other => out.push((prefix.to_string(), other.to_string())),
    }
}

#[test]
fn generate_writes_loadable_datasets() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &[&TINY[..], &["generate"]].concat());
    assert!(o.status.success(), "{}", stderr(&o));
    let train = set2seq::datagen::load_dataset(&dir.path().join("train.jsonl")).unwrap();
    let test = set2seq::datagen::load_dataset(&dir.path().join("test.jsonl")).unwrap();
    assert_eq!((train.len(), test.len()), (20, 6));
    assert!(dir.path().join("config.toml").exists());
}

#[test]
fn gradcheck_passes_and_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &[&TINY[..], &["gradcheck", "--n", "4", "--coords", "3"]].concat());
    assert!(o.status.success(), "{}", stderr(&o));
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.contains("max relative error"));
    assert!(!text.contains("FAIL"));
}

#[test]
fn one_override_changes_exactly_one_logged_value() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let o = run(&a, &[&TINY[..], &["train"]].concat());
    assert!(o.status.success(), "{}", stderr(&o));
    let o = run(&b, &[&TINY[..], &["--override", "optim.weight_decay=0.5", "train"]].concat());
    assert!(o.status.success(), "{}", stderr(&o));
    let (mut fa, mut fb) = (Vec::new(), Vec::new());
    flatten(&header_config(&a), "", &mut fa);
    flatten(&header_config(&b), "", &mut fb);
    assert_eq!(fa.len(), fb.len());
    let diff: Vec<_> = fa.iter().zip(&fb).filter(|(x, y)| x != y).collect();
    assert_eq!(diff.len(), 1, "{diff:?}");
    assert_eq!(diff[0].1 .0, "optim.weight_decay");
    assert_eq!(diff[0].1 .1, "0.5");
}

#[test]
fn unknown_key_lists_valid_keys() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &["--override", "model.width=3", "generate"]);
    assert!(!o.status.success());
    let err = stderr(&o);
    assert_eq!(err.trim_end().lines().count(), 1, "{err}");
    assert!(err.starts_with("error:"));
    assert!(err.contains("model.width") && err.contains("model.d_model") && err.contains("optim.lr"));
}

#[test]
fn failures_exit_nonzero_with_one_line() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.ckpt");
    let o = run(dir.path(), &["eval", "--checkpoint", missing.to_str().unwrap()]);
    assert!(!o.status.success());
    let err = stderr(&o);
    assert_eq!(err.trim_end().lines().count(), 1, "{err}");
    assert!(err.starts_with("error:"));

    let o = run(dir.path(), &["recipe", "nonsense"]);
    assert!(!o.status.success());
    assert!(stderr(&o).starts_with("error:"));
}

#[test]
fn train_then_eval_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let o = run(&out, &[&TINY[..], &["train"]].concat());
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["metrics.jsonl", "best.ckpt", "last.ckpt", "test_report.csv", "config.toml"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let ckpt = out.join("best.ckpt");
    let ev = dir.path().join("eval");
    let o = run(&ev, &["eval", "--checkpoint", ckpt.to_str().unwrap(), "--metrics", "validity,pmr", "--by-cardinality"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report = set2seq::metrics::EvalReport::read_csv(&ev.join("eval_report.csv")).unwrap();
    assert!(report.rows.iter().all(|r| r.metric == "validity" || r.metric == "pmr"));
    assert!(report.rows.iter().any(|r| r.task.contains("/n=")));

    let agg = dir.path().join("agg");
    let csv = out.join("test_report.csv");
    let o = run(&agg, &["report", csv.to_str().unwrap(), csv.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(agg.join("aggregate_report.csv").exists());
}
