//! Drives the command-line front end in process: train, evaluate the saved
//! run and merge the report.

use adaptcl::cli;

fn main() {
    let dir = tempfile::tempdir().expect("tempdir");
    let out = dir.path().join("run");
    let config = concat!(env!("CARGO_MANIFEST_DIR"), "/configs/toy.toml");
    let code = cli::run([
        "adaptcl", "train", config, "--out", out.to_str().expect("utf8"), "--set", "recipe.epochs=5",
    ]);
    println!("train exited {code}");
    let code = cli::run(["adaptcl", "eval", out.to_str().expect("utf8")]);
    println!("eval exited {code}");
    let code = cli::run(["adaptcl", "report", out.to_str().expect("utf8"), "--format", "gnuplot-data"]);
    println!("report exited {code}");
}
