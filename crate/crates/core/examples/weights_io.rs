//! Round trip of encoder and adapter weights through the SIML container.

use adaptcl::adapters::{parse_kinds, AdapterConfig, AdapterState};
use adaptcl::encoder::{EncoderConfig, EncoderState};
use adaptcl::weights;

fn main() -> adaptcl::Result<()> {
    let dir = tempfile::tempdir()?;
    let cfg = EncoderConfig::default();
    let enc = EncoderState::init(&cfg, 9)?;
    let enc_path = dir.path().join("encoder.siml");
    enc.save_weights(&enc_path)?;
    for (name, t) in weights::read_file(&enc_path)?.iter().take(5) {
        println!("{name:<24} {:?}", t.shape());
    }
    let back = EncoderState::load_weights(&cfg, &enc_path)?;
    println!("encoder identical: {}", back.named_params() == enc.named_params());

    let ad_cfg = AdapterConfig::uniform(0..cfg.num_blocks, &parse_kinds("mlp+all")?, 4);
    let ad = AdapterState::init(&ad_cfg, cfg.embed_dim, cfg.num_blocks, 10)?;
    let ad_path = dir.path().join("adapters.siml");
    ad.save_weights(&ad_path)?;
    let ad_back = AdapterState::load_weights(&ad_cfg, cfg.embed_dim, cfg.num_blocks, &ad_path)?;
    let same = ad.params().iter().zip(ad_back.params()).all(|((_, a), (_, b))| a.bit_eq(b));
    println!("adapters identical: {same} ({} bytes on disk)", std::fs::metadata(&ad_path)?.len());
    Ok(())
}
