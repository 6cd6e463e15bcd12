//! Trainable adapter parameters of a ViT-B/16 sized encoder with one, two
//! and three adapter kinds in each of its twelve blocks.

use adaptcl::adapters::{count_trainable, parse_kinds, AdapterConfig};

fn main() -> adaptcl::Result<()> {
    let (dim, bottleneck, blocks) = (768, 64, 12);
    for kinds in ["mlp", "mlp+atten", "mlp+atten+all"] {
        let cfg = AdapterConfig::uniform(0..blocks, &parse_kinds(kinds)?, bottleneck);
        let n = count_trainable(&cfg, dim, None);
        println!("{kinds:<14} {n:>9} ({:.2}M)", n as f64 / 1e6);
    }
    Ok(())
}
