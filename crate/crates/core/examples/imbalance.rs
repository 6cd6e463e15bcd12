//! Long-tailed per-class training counts and their effect on a synthetic
//! training set.

use adaptcl::data::{apply_imbalance, generate_synthetic, imbalance_counts, SyntheticSpec};

fn main() -> adaptcl::Result<()> {
    for f in [0.01, 0.05, 0.1, 0.5, 1.0] {
        println!("factor {f:<4}: {:?}", imbalance_counts(500, 10, f)?);
    }
    let split = generate_synthetic(&SyntheticSpec::default(), 0)?;
    let (train, info) = apply_imbalance(&split.train, 0.1, 42)?;
    println!("rank order {:?}", info.rank_order);
    println!("kept {} of {} samples: {:?}", train.len(), split.train.len(), train.class_counts());
    Ok(())
}
