//! A trained adapter set embedded into a larger one whose new adapters have
//! zero up-projections computes the same features.

use adaptcl::adapters::{parse_kinds, AdapterConfig, AdapterState};
use adaptcl::data::{generate_synthetic, SyntheticSpec};
use adaptcl::encoder::{encode, EncoderConfig, EncoderState};
use adaptcl::seed;
use rand_distr::{Distribution, Normal};

fn main() -> adaptcl::Result<()> {
    let cfg = EncoderConfig::default();
    let enc = EncoderState::init(&cfg, 3)?;
    let small_cfg = AdapterConfig::uniform([0], &parse_kinds("mlp")?, 4);
    let mut small = AdapterState::init(&small_cfg, cfg.embed_dim, cfg.num_blocks, 4)?;
    // Pretend it was trained: give the up-projections real values.
    let mut rng = seed::rng(5);
    let normal = Normal::new(0.0f32, 0.5).expect("valid normal");
    for t in small.params_mut() {
        t.data_mut().iter_mut().for_each(|v| *v = normal.sample(&mut rng));
    }

    let large_cfg = AdapterConfig::uniform(0..cfg.num_blocks, &parse_kinds("mlp+atten+all")?, 4);
    let large = small.embed_into_larger(&large_cfg, cfg.num_blocks, 6)?;
    println!("{} adapters -> {} adapters", small_cfg.len(), large_cfg.len());

    let images = generate_synthetic(&SyntheticSpec::default(), 7)?.test.images;
    let a = encode(&enc, Some(&small), &images[..8])?;
    let b = encode(&enc, Some(&large), &images[..8])?;
    println!("max |f_small - f_large| = {:.3e}", a.max_abs_diff(&b).unwrap_or(f64::NAN));
    Ok(())
}
