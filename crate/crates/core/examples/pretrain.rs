//! Supervised training of the whole encoder on disjoint classes, used as a
//! stand-in for a pre-trained backbone, then frozen and saved.

use adaptcl::cil::{pretrain_encoder, CosineHead, FrozenEncoder, TrainRecipe};
use adaptcl::cil::{evaluate, FeatureExtractor};
use adaptcl::data::{generate_synthetic, SyntheticSpec};
use adaptcl::encoder::{EncoderConfig, EncoderState};
use adaptcl::protoclf::{compute_prototypes, PrototypeClassifier};

fn ncm(enc: &EncoderState, train: &adaptcl::data::Dataset, test: &adaptcl::data::Dataset) -> adaptcl::Result<f64> {
    let fe = FrozenEncoder(enc);
    let classes: Vec<usize> = train.classes().into_iter().collect();
    let mut clf = PrototypeClassifier::new(fe.dim());
    clf.grow(&compute_prototypes(&fe.extract(&train.images)?, &train.labels, &classes)?)?;
    evaluate(&fe, &clf, &[test])
}

fn main() -> adaptcl::Result<()> {
    let cfg = EncoderConfig::default();
    let spec = SyntheticSpec { noise: 2.0, ..SyntheticSpec::default() };
    let data = generate_synthetic(&spec, 21)?;
    let mut enc = EncoderState::init(&cfg, 0)?;
    println!("random encoder NCM accuracy  {:.4}", ncm(&enc, &data.train, &data.test)?);

    let classes: Vec<usize> = data.train.classes().into_iter().collect();
    let mut head = CosineHead::random(&classes, cfg.embed_dim, 1);
    let recipe = TrainRecipe { epochs: 10, lr: 0.05, ..TrainRecipe::default() };
    let fit = pretrain_encoder(&mut enc, &mut head, &data.train, &recipe, 2)?;
    println!("epoch losses {:?}", fit.epoch_losses.iter().map(|l| format!("{l:.3}")).collect::<Vec<_>>());
    println!("trained encoder NCM accuracy {:.4}", ncm(&enc, &data.train, &data.test)?);

    let path = std::env::temp_dir().join("adaptcl_pretrained.siml");
    enc.save_weights(&path)?;
    println!("saved to {} (set protocol.encoder_weights to use it)", path.display());
    Ok(())
}
