//! A five-task incremental run on synthetic data, printed as the CSV the
//! `train` command writes.

use adaptcl::cil::run_experiment;
use adaptcl::config::RunConfig;

fn main() -> adaptcl::Result<()> {
    let mut cfg = RunConfig::default();
    cfg.set("data.noise=1.5")?;
    cfg.set("recipe.epochs=10")?;
    let out = run_experiment(&cfg)?;
    let r = &out.report;
    print!("{}", r.to_csv());
    println!("class order {:?}", r.class_order);
    println!(
        "task-1 accuracy: frozen prototypes {:.4}, finetuned composite {:.4}",
        r.baseline_task1, r.rows[0].last
    );
    println!("probe loss {:.4} -> {:.4}", r.finetune.probe_losses[0], r.finetune.probe_losses.last().copied().unwrap_or(f64::NAN));
    println!("feature dim {}, fingerprint {}", r.feature_dim, &r.fingerprint[..12]);
    Ok(())
}
