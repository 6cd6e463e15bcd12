//! Final Last/Avg for every subset of adapter kinds.

use adaptcl::cil::{expand_grid, sweep, SweepAxis};
use adaptcl::config::RunConfig;

fn main() -> adaptcl::Result<()> {
    let mut base = RunConfig::default();
    base.set("data.noise=1.5")?;
    base.set("recipe.epochs=5")?;
    base.set("recipe.lr=0.2")?;
    base.set("adapters.bottleneck=4")?;
    let grid = expand_grid(SweepAxis::Kinds, "all8")?;
    let table = sweep(&base, SweepAxis::Kinds, &grid)?;
    print!("{}", table.to_csv());
    for n in &table.notes {
        println!("note: {n}");
    }
    Ok(())
}
