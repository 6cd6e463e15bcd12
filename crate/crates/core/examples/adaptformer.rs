//! A single mlp adapter per block reproduces the AdaptFormer block exactly.

use adaptcl::adapters::{adaptformer_encode, AdapterConfig, AdapterKind, AdapterState};
use adaptcl::data::{generate_synthetic, SyntheticSpec};
use adaptcl::encoder::{encode, EncoderConfig, EncoderState};

fn main() -> adaptcl::Result<()> {
    let cfg = EncoderConfig::default();
    let enc = EncoderState::init(&cfg, 11)?;
    let ad_cfg = AdapterConfig::uniform(0..cfg.num_blocks, &[AdapterKind::Mlp], 8);
    let mut adapters = AdapterState::init(&ad_cfg, cfg.embed_dim, cfg.num_blocks, 12)?;
    for t in adapters.params_mut() {
        t.data_mut().iter_mut().enumerate().for_each(|(i, v)| *v += 0.01 * (i % 7) as f32);
    }
    let images = generate_synthetic(&SyntheticSpec::default(), 13)?.test.images;
    let ours = encode(&enc, Some(&adapters), &images[..6])?;
    let theirs = adaptformer_encode(&enc, &adapters, &images[..6])?;
    println!("bit-identical: {}", ours.bit_eq(&theirs));
    Ok(())
}
