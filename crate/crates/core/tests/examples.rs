//! Runs every example binary; `cargo test` builds them alongside the tests.

use std::path::PathBuf;
use std::process::Command;

fn example(name: &str) -> String {
    let mut dir: PathBuf = std::env::current_exe().expect("test binary path");
    dir.pop();
    if dir.ends_with("deps") {
        dir.pop();
    }
    let bin = dir.join("examples").join(format!("{name}{}", std::env::consts::EXE_SUFFIX));
    let out = Command::new(&bin).output().unwrap_or_else(|e| panic!("{}: {e}", bin.display()));
    assert!(out.status.success(), "{name}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).expect("utf8 output")
}

#[test]
fn param_count() {
    let out = example("param_count");
    for n in ["1189632", "2379264", "3568896"] {
        assert!(out.contains(n), "{out}");
    }
}

#[test]
fn encode() {
    let out = example("encode");
    assert!(out.contains("max shift 0.00e0"), "{out}");
}

#[test]
fn embedding() {
    assert!(example("embedding").contains("= 0.000e0"));
}

#[test]
fn adaptformer() {
    assert!(example("adaptformer").contains("bit-identical: true"));
}

#[test]
fn gradcheck() {
    assert!(example("gradcheck").contains("0 failures"));
}

#[test]
fn prototypes() {
    assert!(example("prototypes").contains("[0, 1, 2]: [2]"));
}

#[test]
fn imbalance() {
    assert!(example("imbalance").contains("[500, 397, 315, 251, 199, 158, 126, 100, 79, 63]"));
}

#[test]
fn weights_io() {
    let out = example("weights_io");
    assert!(out.contains("encoder identical: true") && out.contains("adapters identical: true"), "{out}");
}

#[test]
fn raw_ingest() {
    assert!(example("raw_ingest").contains("ingested 400 train / 100 test"));
}

#[test]
fn protocol() {
    assert!(example("protocol").starts_with("task,last,avg,params,seed\n"));
}

#[test]
fn pretrain() {
    assert!(example("pretrain").contains("trained encoder NCM accuracy"));
}

#[test]
fn sweep() {
    assert_eq!(example("sweep").lines().filter(|l| l.starts_with("kinds,")).count(), 8);
}

#[test]
fn cli_train() {
    let out = example("cli_train");
    for step in ["train", "eval", "report"] {
        assert!(out.contains(&format!("{step} exited 0")), "{out}");
    }
}
