//! Encode a few synthetic images with a randomly initialised encoder, with
//! and without adapters.

use adaptcl::adapters::{parse_kinds, AdapterConfig, AdapterState};
use adaptcl::data::{generate_synthetic, SyntheticSpec};
use adaptcl::encoder::{encode, EncoderConfig, EncoderState};

fn main() -> adaptcl::Result<()> {
    let cfg = EncoderConfig::default();
    let enc = EncoderState::init(&cfg, 0)?;
    println!("encoder: {} parameters, {} tokens", enc.param_count(), cfg.num_tokens());

    let split = generate_synthetic(&SyntheticSpec::default(), 1)?;
    let images = &split.test.images[..4];
    let plain = encode(&enc, None, images)?;
    println!("features {:?}", plain.shape());
    for r in 0..plain.shape()[0] {
        let row: Vec<String> = plain.row(r)[..6].iter().map(|v| format!("{v:+.3}")).collect();
        println!("  image {r}: [{} ...]", row.join(" "));
    }

    let ad_cfg = AdapterConfig::uniform(0..cfg.num_blocks, &parse_kinds("mlp+atten")?, 4);
    let mut adapters = AdapterState::init(&ad_cfg, cfg.embed_dim, cfg.num_blocks, 2)?;
    let shift = |a: &AdapterState| -> adaptcl::Result<f64> {
        Ok(encode(&enc, Some(a), images)?.max_abs_diff(&plain).unwrap_or(f64::NAN))
    };
    // Up-projections start at zero.
    println!("fresh adapters ({} params): max shift {:.2e}", adapters.param_count(), shift(&adapters)?);
    for t in adapters.params_mut() {
        t.data_mut().iter_mut().enumerate().for_each(|(i, v)| *v += 0.05 * ((i % 5) as f32 - 2.0));
    }
    println!("perturbed adapters: max shift {:.2e}", shift(&adapters)?);
    Ok(())
}
