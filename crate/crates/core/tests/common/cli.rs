use std::path::{Path, PathBuf};

use serde_json::Value;

pub const SMALL_CONFIG: &str = r#"
[synthetic]
n_videos = 6
n_test_videos = 3
feature_dim = 8
t_min = 40
t_max = 50
instances_max = 2
length_max = 10

[train]
epochs = 2
"#;

pub fn run(args: &[&str]) -> pointloc::Result<()> {
    pointloc::cli::run_from(std::iter::once("pointloc").chain(args.iter().copied()))
}

pub fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Report JSON with wall-clock fields removed.
pub fn timeless(path: &Path) -> Value {
    fn strip(v: &mut Value) {
        match v {
            Value::Object(m) => {
                m.retain(|k, _| k != "timings" && !k.ends_with("seconds"));
                m.values_mut().for_each(strip);
            }
            Value::Array(a) => a.iter_mut().for_each(strip),
            _ => {}
        }
    }
    let mut v: Value = serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
    strip(&mut v);
    v
}

/// Runs gen-data, train, infer, and eval under `root`; returns
/// (data dir, run dir).
pub fn pipeline(root: &Path, seed: &str) -> (PathBuf, PathBuf) {
    let cfg = root.join("run.toml");
    std::fs::write(&cfg, SMALL_CONFIG).unwrap();
    let data = root.join("data");
    let run_dir = root.join("run");
    let c = p(&cfg);
    run(&["gen-data", "--config", c, "--seed", seed, "--out", p(&data)]).unwrap();
    let ckpt = run_dir.join("model.ptlh");
    run(&["train", "--config", c, "--seed", seed, "--manifest", p(&data.join("train.json")), "--checkpoint", p(&ckpt)]).unwrap();
    let props = run_dir.join("proposals.tsv");
    run(&["infer", "--config", c, "--checkpoint", p(&ckpt), "--manifest", p(&data.join("test.json")), "--out", p(&props)]).unwrap();
    run(&[
        "eval",
        "--config",
        c,
        "--proposals",
        p(&props),
        "--manifest",
        p(&data.join("test.json")),
        "--out",
        p(&run_dir.join("eval.json")),
    ])
    .unwrap();
    (data, run_dir)
}

pub fn files_under(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).unwrap() {
        let path = e.unwrap().path();
        if path.is_dir() {
            out.extend(files_under(&path));
        } else {
            out.push(path);
        }
    }
    out.sort();
    out
}
