//! End-to-end run of every subcommand on a tiny config.

use std::path::Path;
use std::process::Command;

use kvlab::config::LabConfig;

const TINY: &str = r#"
num_layers = 1
num_query_heads = 2
num_kv_heads = 1
head_dim = 4
model_dim = 8
vocab_size = 16
num_keys = 4
sink_size = 1
window_size = 4
span_len = 4
copy_region = 8
steps = 3
seq_len = 32
long_steps = 0
gate_steps = 2
gate_seq_len = 32
batch_tokens = 32
task_len = 32
num_seeds = 2
sparsities = [0.5]
retentions = [0.5]
chunk_sizes = [8, 0]
# An untrained model scores 0 on passkey, which has no threshold.
tasks = ["lm"]
observation_window = 4
smoothing_kernel = 3
"#;

fn kvlab(dir: &Path, args: &[&str]) -> String {
    let out = Command::new(env!("CARGO_BIN_EXE_kvlab"))
        .current_dir(dir)
        .arg("--config")
        .arg("tiny.toml")
        .args(args)
        .output()
        .unwrap();
    let stdout = String::from_utf8_lossy(&out.stdout).into_owned();
    assert!(out.status.success(), "{args:?}: {}{stdout}", String::from_utf8_lossy(&out.stderr));
    stdout
}

#[test]
fn every_subcommand_runs() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("tiny.toml"), TINY).unwrap();

    let shown = kvlab(d, &["--seed", "7", "show-config"]);
    let cfg = LabConfig::from_str_with_overrides(&shown, &[]).unwrap();
    assert_eq!(cfg.seed, 7);
    assert_eq!(cfg.chunk_sizes, vec![8, 0]);

    kvlab(d, &["pretrain"]);
    assert!(d.join("out/model.json").exists());
    assert!(d.join("out/pretrain_metrics.csv").exists());
    kvlab(d, &["prulong"]);
    assert!(d.join("out/masks.csv").exists());
    kvlab(d, &["duo"]);
    kvlab(d, &["sweep"]);
    let results = std::fs::read_to_string(d.join("out/results.csv")).unwrap();
    assert!(results.starts_with("# score:"));
    assert!(!results.contains("error"), "{results}");
    for f in ["summary.csv", "plot_lm.svg"] {
        assert!(d.join("out").join(f).exists(), "{f}");
    }
    let report = kvlab(d, &["report"]);
    assert!(report.contains("full lm"), "{report}");

    let log = d.join("out/events/snap__retention=0.5__c8__lm__s0.jsonl");
    let fp = kvlab(d, &["footprint", log.to_str().unwrap()]);
    let value: f64 = fp.lines().next().unwrap().strip_prefix("footprint ").unwrap().parse().unwrap();
    assert!(value > 0.0 && value < 1.0, "{fp}");
}

#[test]
fn bad_overrides_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("tiny.toml"), TINY).unwrap();
    for args in [["--set", "no_such_key=1"], ["--set", "copy_region=2"]] {
        let out = Command::new(env!("CARGO_BIN_EXE_kvlab"))
            .current_dir(dir.path())
            .args(["--config", "tiny.toml"])
            .args(args)
            .arg("show-config")
            .output()
            .unwrap();
        assert!(!out.status.success(), "{args:?}");
    }
}
